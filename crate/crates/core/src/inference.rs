//! Dual-branch scoring: the semantic branch, class prototypes with the
//! prototypical branch, batch min-max normalization and the λ blend.

use std::fmt::Write as _;

use crate::class::Class;
use crate::clsa::Strategy;
use crate::error::{Error, Result};
use crate::numcore::ops::{cosine_rows, dot, sigmoid_scalar};
use crate::numcore::Tensor;

pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Value-level semantic score: mean over layers of the mean over patches of
/// `σ(τ·⟨V′_p, t_abn⟩)`.
pub fn semantic_score(v_prime: &[Tensor], t_abn: &Tensor, tau: f64) -> Result<f64> {
    if v_prime.is_empty() {
        return Err(Error::Contract("semantic score needs at least one layer".into()));
    }
    let mut total = 0.0;
    for v in v_prime {
        if v.cols() != t_abn.numel() {
            return Err(Error::shape("semantic_score", v.shape(), t_abn.shape()));
        }
        let s: f64 = (0..v.rows()).map(|p| sigmoid_scalar(tau * dot(v.row(p), t_abn.data()))).sum();
        total += s / v.rows() as f64;
    }
    Ok(total / v_prime.len() as f64)
}

/// Per-class, per-layer mean of per-image patch means.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet {
    /// Indexed `[class][layer]`, each `[d]`.
    pub prototypes: [Vec<Tensor>; 2],
}

fn patch_mean(v: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; v.cols()];
    for p in 0..v.rows() {
        for (a, x) in m.iter_mut().zip(v.row(p)) {
            *a += x;
        }
    }
    let n = v.rows() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Builds prototypes from support features (`[image][layer]`) and the
/// support index sets of each class.
pub fn build_prototypes(support: &[Vec<Tensor>], normal_idx: &[usize], abnormal_idx: &[usize]) -> Result<PrototypeSet> {
    let layers = support.first().map_or(0, Vec::len);
    let build = |idx: &[usize], class: Class| -> Result<Vec<Tensor>> {
        if idx.is_empty() {
            return Err(Error::Capacity(format!("no {class} support samples for prototypes")));
        }
        (0..layers)
            .map(|l| {
                let d = support[idx[0]][l].cols();
                let mut acc = vec![0.0; d];
                for &i in idx {
                    let img = support
                        .get(i)
                        .ok_or_else(|| Error::Contract(format!("support index {i} out of range")))?;
                    for (a, m) in acc.iter_mut().zip(patch_mean(&img[l])) {
                        *a += m;
                    }
                }
                let n = idx.len() as f64;
                Tensor::vector(acc.into_iter().map(|a| a / n).collect())
            })
            .collect()
    };
    Ok(PrototypeSet {
        prototypes: [build(normal_idx, Class::Normal)?, build(abnormal_idx, Class::Abnormal)?],
    })
}

/// `D_c = Σ_ℓ (1 − mean_p cos(V′_p, P_c))`.
pub fn proto_distance(query: &[Tensor], protos: &PrototypeSet, class: Class) -> Result<f64> {
    let ps = &protos.prototypes[class.index()];
    if ps.len() != query.len() {
        return Err(Error::Contract(format!(
            "{} query layers against {} prototype layers",
            query.len(),
            ps.len()
        )));
    }
    let mut d = 0.0;
    for (v, p) in query.iter().zip(ps) {
        let c = cosine_rows(v, p)?;
        d += 1.0 - c.data().iter().sum::<f64>() / c.numel() as f64;
    }
    Ok(d)
}

/// `D_norm / (D_norm + D_abn + ε)`.
pub fn proto_score(d_norm: f64, d_abn: f64, eps: f64) -> f64 {
    d_norm / (d_norm + d_abn + eps)
}

/// Affine map sending a batch's minimum to 0 and maximum to 1; a constant
/// batch maps everything to 0.5.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub fn fit(scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Contract("cannot normalize an empty batch".into()));
        }
        let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self { min, max })
    }

    pub fn apply(&self, s: f64) -> f64 {
        if self.max == self.min {
            0.5
        } else {
            (s - self.min) / (self.max - self.min)
        }
    }
}

pub fn minmax_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    let m = MinMax::fit(scores)?;
    Ok(scores.iter().map(|&s| m.apply(s)).collect())
}

/// `λ·S̃_sem + (1−λ)·S̃_proto` over already normalized lists.
pub fn blend(sem_norm: &[f64], proto_norm: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda {lambda} outside [0, 1]")));
    }
    if sem_norm.len() != proto_norm.len() {
        return Err(Error::Contract(format!(
            "{} semantic scores against {} prototype scores",
            sem_norm.len(),
            proto_norm.len()
        )));
    }
    Ok(sem_norm
        .iter()
        .zip(proto_norm)
        .map(|(s, p)| lambda * s + (1.0 - lambda) * p)
        .collect())
}

/// Normalizes both branches over the batch, then blends.
pub fn ensemble(sem: &[f64], proto: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda {lambda} outside [0, 1]")));
    }
    blend(&minmax_normalize(sem)?, &minmax_normalize(proto)?, lambda)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRecord {
    pub id: usize,
    pub label: Class,
    pub s_sem: f64,
    pub s_proto: f64,
    pub s_final: f64,
}

/// Per-query scores of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub k: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub lambda: f64,
    pub records: Vec<ScoreRecord>,
}

pub const SCORE_CSV_HEADER: &str = "episode_seed,k,strategy,lambda,id,label,s_sem,s_proto,s_final";

impl ScoreReport {
    pub fn final_scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.s_final).collect()
    }

    pub fn labels(&self) -> Vec<Class> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// CSV rows without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.17e},{:.17e},{:.17e}",
                self.seed,
                self.k,
                self.strategy,
                self.lambda,
                r.id,
                r.label.label(),
                r.s_sem,
                r.s_proto,
                r.s_final
            );
        }
        out
    }

    /// One `key=value` record per query.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "episode seed={} k={} strategy={} lambda={}\n",
            self.seed, self.k, self.strategy, self.lambda
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "id={} label={} s_sem={} s_proto={} s_final={}",
                r.id, r.label, r.s_sem, r.s_proto, r.s_final
            );
        }
        out
    }
}
