//! Intra-modal residual adapters and learnable context prompts.
//!
//! Adapters act on side taps: the frozen forward pass never sees their
//! output.

use rand::Rng;

use crate::class::Class;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

pub const DEFAULT_REDUCTION: usize = 4;
pub const DEFAULT_PROMPT_LEN: usize = 8;
pub const CONTEXT_INIT_STD: f64 = 0.02;
/// Initial spread of the text adapter up-projection. The visual one starts
/// at zero.
pub const TEXT_UP_INIT_STD: f64 = 0.02;

/// Bottleneck MLP `d → d/r → d` with a SiLU between the projections.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualAdapter<T = Tensor> {
    pub down: T,
    pub down_bias: T,
    pub up: T,
    pub up_bias: T,
}

impl<T> ResidualAdapter<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> ResidualAdapter<U> {
        ResidualAdapter {
            down: f(&format!("{prefix}.down"), &self.down),
            down_bias: f(&format!("{prefix}.down_bias"), &self.down_bias),
            up: f(&format!("{prefix}.up"), &self.up),
            up_bias: f(&format!("{prefix}.up_bias"), &self.up_bias),
        }
    }

    pub fn entries<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a T)>) {
        out.push((format!("{prefix}.down"), &self.down));
        out.push((format!("{prefix}.down_bias"), &self.down_bias));
        out.push((format!("{prefix}.up"), &self.up));
        out.push((format!("{prefix}.up_bias"), &self.up_bias));
    }

    pub fn entries_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut T)>) {
        out.push((format!("{prefix}.down"), &mut self.down));
        out.push((format!("{prefix}.down_bias"), &mut self.down_bias));
        out.push((format!("{prefix}.up"), &mut self.up));
        out.push((format!("{prefix}.up_bias"), &mut self.up_bias));
    }
}

impl ResidualAdapter<Tensor> {
    /// Down-projection drawn with std `1/sqrt(d)`, up-projection with
    /// `up_std` (zero gives an exact identity adapter), biases zero.
    pub fn init<R: Rng + ?Sized>(d: usize, reduction: usize, up_std: f64, rng: &mut R) -> Result<Self> {
        if reduction == 0 || d % reduction != 0 {
            return Err(Error::Config(format!("width {d} not divisible by reduction {reduction}")));
        }
        let b = d / reduction;
        let down = Tensor::randn(&[d, b], 1.0 / (d as f64).sqrt(), rng);
        let up = if up_std > 0.0 {
            Tensor::randn(&[b, d], up_std, rng)
        } else {
            Tensor::zeros(&[b, d])
        };
        Ok(Self {
            down,
            down_bias: Tensor::zeros(&[b]),
            up,
            up_bias: Tensor::zeros(&[d]),
        })
    }

    pub fn width(&self) -> usize {
        self.down.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.down.cols()
    }
}

/// The adapter branch alone: `silu(x·down + b₁)·up + b₂`.
pub fn adapter_branch(tape: &mut Tape, x: Var, adapter: &ResidualAdapter<Var>) -> Result<Var> {
    let d = tape.value(adapter.down).rows();
    if tape.value(x).rank() != 2 || tape.value(x).cols() != d {
        return Err(Error::shape("adapter", tape.shape(x), tape.shape(adapter.down)));
    }
    let h = tape.matmul(x, adapter.down)?;
    let h = tape.add(h, adapter.down_bias)?;
    let h = tape.silu(h);
    let h = tape.matmul(h, adapter.up)?;
    tape.add(h, adapter.up_bias)
}

/// `Ṽ = V + RAV(V)`.
pub fn apply_visual_adapter(tape: &mut Tape, v: Var, adapter: &ResidualAdapter<Var>) -> Result<Var> {
    let r = adapter_branch(tape, v, adapter)?;
    tape.add(v, r)
}

/// `T̃ = T + α_t · RAT(T)`.
pub fn apply_text_adapter(tape: &mut Tape, t: Var, adapter: &ResidualAdapter<Var>, alpha: Var) -> Result<Var> {
    let r = adapter_branch(tape, t, adapter)?;
    let r = tape.scale_by(r, alpha)?;
    tape.add(t, r)
}

/// Shared learnable context rows plus the fixed per-class embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    /// `[L × d]`.
    pub context: Tensor,
    class_embeddings: [Tensor; 2],
}

impl PromptBank {
    pub fn new(context: Tensor, class_embeddings: [Tensor; 2]) -> Result<Self> {
        let d = context.cols();
        if context.rank() != 2 || class_embeddings.iter().any(|e| e.numel() != d) {
            return Err(Error::shape(
                "prompt bank",
                context.shape(),
                class_embeddings[0].shape(),
            ));
        }
        Ok(Self { context, class_embeddings })
    }

    pub fn init<R: Rng + ?Sized>(len: usize, class_embeddings: [Tensor; 2], rng: &mut R) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("prompt length must be positive".into()));
        }
        let d = class_embeddings[0].numel();
        Self::new(Tensor::randn(&[len, d], CONTEXT_INIT_STD, rng), class_embeddings)
    }

    pub fn len(&self) -> usize {
        self.context.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn class_embedding(&self, class: Class) -> &Tensor {
        &self.class_embeddings[class.index()]
    }

    /// `[v₁ … v_L, e_c]` as a plain value.
    pub fn assemble(&self, class: Class) -> Tensor {
        let mut data = self.context.data().to_vec();
        data.extend_from_slice(self.class_embedding(class).data());
        Tensor::matrix(self.len() + 1, self.context.cols(), data).expect("consistent prompt shape")
    }
}

/// Appends the fixed class embedding to the context rows on the tape. The
/// embedding enters as a constant, so no gradient ever reaches it.
pub fn assemble_prompt(tape: &mut Tape, context: Var, class_embedding: &Tensor) -> Result<Var> {
    let d = class_embedding.numel();
    let e = tape.constant(Tensor::matrix(1, d, class_embedding.data().to_vec())?);
    tape.concat_rows(&[context, e])
}

/// Parameters of the intra-modal stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Adaptation {
    pub visual: Vec<ResidualAdapter>,
    pub text: Vec<ResidualAdapter>,
    pub prompts: PromptBank,
    pub alpha_t: f64,
}

/// One visual and one text adapter per stage, context rows from
/// `N(0, 0.02²)`, and `α_t = alpha_init`.
pub fn init_adaptation<R: Rng + ?Sized>(
    stages: usize,
    prompt_len: usize,
    reduction: usize,
    alpha_init: f64,
    class_embeddings: [Tensor; 2],
    rng: &mut R,
) -> Result<Adaptation> {
    let d = class_embeddings[0].numel();
    let prompts = PromptBank::init(prompt_len, class_embeddings, rng)?;
    let visual = (0..stages)
        .map(|_| ResidualAdapter::init(d, reduction, 0.0, rng))
        .collect::<Result<Vec<_>>>()?;
    let text = (0..stages)
        .map(|_| ResidualAdapter::init(d, reduction, TEXT_UP_INIT_STD, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Adaptation {
        visual,
        text,
        prompts,
        alpha_t: alpha_init,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ops::{dot, silu};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bind(tape: &mut Tape, a: &ResidualAdapter) -> ResidualAdapter<Var> {
        a.map("a", &mut |_, t| tape.param(t.clone()))
    }

    fn naive(x: &Tensor, a: &ResidualAdapter) -> Vec<f64> {
        let (d, b) = (a.width(), a.bottleneck());
        let mut out = Vec::new();
        for i in 0..x.rows() {
            let row = x.row(i);
            let mut h = vec![0.0; b];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut s = a.down_bias.data()[j];
                for k in 0..d {
                    s += row[k] * a.down.get2(k, j);
                }
                *hj = silu(&Tensor::scalar(s)).data()[0];
            }
            for k in 0..d {
                let mut s = a.up_bias.data()[k];
                for (j, hj) in h.iter().enumerate() {
                    s += hj * a.up.get2(j, k);
                }
                out.push(row[k] + s);
            }
        }
        out
    }

    #[test]
    fn zero_up_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ResidualAdapter::init(8, 4, 0.0, &mut rng).unwrap();
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let ab = bind(&mut tape, &a);
        let xv = tape.constant(x.clone());
        let y = apply_visual_adapter(&mut tape, xv, &ab).unwrap();
        assert!(tape.value(y).bit_eq(&x));
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ResidualAdapter::init(8, 4, 0.5, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ab = bind(&mut tape, &a);
        let x = tape.constant(Tensor::zeros(&[3, 8]));
        let y = apply_visual_adapter(&mut tape, x, &ab).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_naive_bottleneck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut a = ResidualAdapter::init(8, 4, 0.3, &mut rng).unwrap();
        a.down_bias = Tensor::randn(&[2], 0.1, &mut rng);
        a.up_bias = Tensor::randn(&[8], 0.1, &mut rng);
        let x = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let ab = bind(&mut tape, &a);
        let xv = tape.constant(x.clone());
        let y = apply_visual_adapter(&mut tape, xv, &ab).unwrap();
        let expect = naive(&x, &a);
        for (g, e) in tape.value(y).data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn text_gate_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = ResidualAdapter::init(8, 4, 0.3, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let run = |alpha: f64| {
            let mut tape = Tape::new();
            let ab = bind(&mut tape, &a);
            let xv = tape.constant(x.clone());
            let al = tape.param(Tensor::scalar(alpha));
            let y = apply_text_adapter(&mut tape, xv, &ab, al).unwrap();
            tape.value(y).clone()
        };
        assert!(run(0.0).bit_eq(&x));
        let full = naive(&x, &a);
        for (i, v) in run(1.0).data().iter().enumerate() {
            assert!((v - full[i]).abs() < 1e-12);
        }
        for (i, v) in run(0.5).data().iter().enumerate() {
            let e = x.data()[i] + 0.5 * (full[i] - x.data()[i]);
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = ResidualAdapter::init(8, 4, 0.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let ab = bind(&mut tape, &a);
        let x = tape.constant(Tensor::zeros(&[2, 6]));
        assert!(matches!(apply_visual_adapter(&mut tape, x, &ab), Err(Error::Shape { .. })));
    }

    fn unit_pair() -> [Tensor; 2] {
        let mut a = vec![0.0; 8];
        let mut b = vec![0.0; 8];
        a[0] = 1.0;
        b[1] = 1.0;
        [Tensor::vector(a).unwrap(), Tensor::vector(b).unwrap()]
    }

    #[test]
    fn prompts_share_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = PromptBank::init(2, unit_pair(), &mut rng).unwrap();
        let n = bank.assemble(Class::Normal);
        let a = bank.assemble(Class::Abnormal);
        assert_eq!(n.shape(), &[3, 8]);
        assert_eq!(n.data()[..16], a.data()[..16]);
        assert_ne!(n.row(2), a.row(2));
    }

    #[test]
    fn class_embedding_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = PromptBank::init(2, unit_pair(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let ctx = tape.param(bank.context.clone());
        let p = assemble_prompt(&mut tape, ctx, bank.class_embedding(Class::Abnormal)).unwrap();
        assert!(tape.value(p).bit_eq(&bank.assemble(Class::Abnormal)));
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(ctx).unwrap().data(), &[1.0; 16]);
    }

    #[test]
    fn init_counts_and_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = init_adaptation(4, 8, 4, 0.0, unit_pair(), &mut rng).unwrap();
        assert_eq!(a.visual.len(), 4);
        assert_eq!(a.text.len(), 4);
        assert_eq!(a.alpha_t, 0.0);
        assert!(a.visual.iter().all(|v| v.up.data().iter().all(|&x| x == 0.0)));
        let e = (a.prompts.class_embedding(Class::Normal), a.prompts.class_embedding(Class::Abnormal));
        assert_eq!(dot(e.0.data(), e.1.data()), 0.0);
    }
}
