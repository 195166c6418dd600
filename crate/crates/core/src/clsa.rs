//! Cross-level scaled alignment: gated visual-to-text context injection
//! followed by gated text-to-visual semantic guidance, per mapped layer pair.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{attend, Projections};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

pub const DEFAULT_HEADS: usize = 4;

/// Which alignment directions run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    None,
    V2tOnly,
    T2vOnly,
    Sequential,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::None, Strategy::V2tOnly, Strategy::T2vOnly, Strategy::Sequential];

    pub fn token(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::V2tOnly => "v2t",
            Strategy::T2vOnly => "t2v",
            Strategy::Sequential => "seq",
        }
    }

    pub fn injects_context(self) -> bool {
        matches!(self, Strategy::V2tOnly | Strategy::Sequential)
    }

    pub fn guides_visual(self) -> bool {
        matches!(self, Strategy::T2vOnly | Strategy::Sequential)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "v2t" | "v2t_only" => Ok(Strategy::V2tOnly),
            "t2v" | "t2v_only" => Ok(Strategy::T2vOnly),
            "seq" | "sequential" => Ok(Strategy::Sequential),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected none | v2t | t2v | seq)"
            ))),
        }
    }
}

/// Bias-free query/key/value/output projections, each `[d × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionBlock<T = Tensor> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

impl<T> CrossAttentionBlock<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> CrossAttentionBlock<U> {
        CrossAttentionBlock {
            wq: f(&format!("{prefix}.wq"), &self.wq),
            wk: f(&format!("{prefix}.wk"), &self.wk),
            wv: f(&format!("{prefix}.wv"), &self.wv),
            wo: f(&format!("{prefix}.wo"), &self.wo),
        }
    }

    pub fn entries<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.wq"), &self.wq));
        out.push((format!("{prefix}.wk"), &self.wk));
        out.push((format!("{prefix}.wv"), &self.wv));
        out.push((format!("{prefix}.wo"), &self.wo));
    }

    pub fn entries_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.wq"), &mut self.wq));
        out.push((format!("{prefix}.wk"), &mut self.wk));
        out.push((format!("{prefix}.wv"), &mut self.wv));
        out.push((format!("{prefix}.wo"), &mut self.wo));
    }
}

impl CrossAttentionBlock<Tensor> {
    pub fn init<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Self {
        let mut w = || Tensor::randn(&[d, d], std, rng);
        Self {
            wq: w(),
            wk: w(),
            wv: w(),
            wo: w(),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            wq: Tensor::eye(d),
            wk: Tensor::eye(d),
            wv: Tensor::eye(d),
            wo: Tensor::eye(d),
        }
    }
}

impl CrossAttentionBlock<Var> {
    fn projections(&self) -> Projections {
        Projections {
            wq: self.wq,
            wk: self.wk,
            wv: self.wv,
            wo: self.wo,
        }
    }
}

/// The v→t and t→v blocks of one mapped layer pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsaPair<T = Tensor> {
    pub v2t: CrossAttentionBlock<T>,
    pub t2v: CrossAttentionBlock<T>,
}

impl<T> ClsaPair<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> ClsaPair<U> {
        ClsaPair {
            v2t: self.v2t.map(&format!("{prefix}.v2t"), f),
            t2v: self.t2v.map(&format!("{prefix}.t2v"), f),
        }
    }

    pub fn entries<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        self.v2t.entries(&format!("{prefix}.v2t"), out);
        self.t2v.entries(&format!("{prefix}.t2v"), out);
    }

    pub fn entries_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        self.v2t.entries_mut(&format!("{prefix}.v2t"), out);
        self.t2v.entries_mut(&format!("{prefix}.t2v"), out);
    }
}

/// `MHCA(Q, K, V)`; per-head attention matrices go to `weights` if given.
pub fn mhca(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    block: &CrossAttentionBlock<Var>,
    heads: usize,
    weights: Option<&mut Vec<Var>>,
) -> Result<Var> {
    attend(tape, q, k, v, &block.projections(), heads, weights)
}

/// `T′ = T̃ + β_t · MHCA(Q=T̃, K=Ṽ, V=Ṽ)`.
pub fn context_injection(
    tape: &mut Tape,
    t_tilde: Var,
    v_tilde: Var,
    block: &CrossAttentionBlock<Var>,
    beta_t: Var,
    heads: usize,
) -> Result<Var> {
    let m = mhca(tape, t_tilde, v_tilde, v_tilde, block, heads, None)?;
    let m = tape.scale_by(m, beta_t)?;
    tape.add(t_tilde, m)
}

/// `V′ = Ṽ + β_v · MHCA(Q=Ṽ, K=T′, V=T′)`.
pub fn semantic_guidance(
    tape: &mut Tape,
    v_tilde: Var,
    t_prime: Var,
    block: &CrossAttentionBlock<Var>,
    beta_v: Var,
    heads: usize,
) -> Result<Var> {
    let m = mhca(tape, v_tilde, t_prime, t_prime, block, heads, None)?;
    let m = tape.scale_by(m, beta_v)?;
    tape.add(v_tilde, m)
}

/// Adapted features of one mapped layer pair.
#[derive(Clone, Copy, Debug)]
pub struct PairFeatures {
    pub v_tilde: Var,
    pub t_tilde: Var,
}

#[derive(Clone, Debug)]
pub struct ClsaOutput {
    pub v_prime: Vec<Var>,
    pub t_prime: Vec<Var>,
    /// Keys and values fed to the text-to-visual attention of each pair, when
    /// that direction ran.
    pub guidance_keys: Vec<Option<Var>>,
}

/// Applies the chosen strategy independently to every pair.
pub fn clsa_forward(
    tape: &mut Tape,
    pairs: &[PairFeatures],
    blocks: &[&ClsaPair<Var>],
    beta_t: Var,
    beta_v: Var,
    strategy: Strategy,
    heads: usize,
) -> Result<ClsaOutput> {
    if pairs.len() != blocks.len() || pairs.is_empty() {
        return Err(Error::Config(format!(
            "{} feature pairs for {} alignment blocks",
            pairs.len(),
            blocks.len()
        )));
    }
    let mut out = ClsaOutput {
        v_prime: Vec::with_capacity(pairs.len()),
        t_prime: Vec::with_capacity(pairs.len()),
        guidance_keys: Vec::with_capacity(pairs.len()),
    };
    for (p, b) in pairs.iter().zip(blocks) {
        let t_prime = if strategy.injects_context() {
            context_injection(tape, p.t_tilde, p.v_tilde, &b.v2t, beta_t, heads)?
        } else {
            p.t_tilde
        };
        let (v_prime, keys) = if strategy.guides_visual() {
            (semantic_guidance(tape, p.v_tilde, t_prime, &b.t2v, beta_v, heads)?, Some(t_prime))
        } else {
            (p.v_tilde, None)
        };
        out.v_prime.push(v_prime);
        out.t_prime.push(t_prime);
        out.guidance_keys.push(keys);
    }
    Ok(out)
}
