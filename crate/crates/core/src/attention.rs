//! Scaled dot-product attention shared by the frozen encoders and the
//! cross-level alignment blocks.

use crate::error::{Error, Result};
use crate::numcore::{Tape, Var};

/// Query/key/value/output projections of one attention layer, no biases.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head self- or cross-attention of `queries [q×d]` over `context [k×d]`
/// used as both keys and values.
pub fn multi_head_attention(
    tape: &mut Tape,
    queries: Var,
    context: Var,
    proj: &Projections,
    heads: usize,
    weights: Option<&mut Vec<Var>>,
) -> Result<Var> {
    attend(tape, queries, context, context, proj, heads, weights)
}

/// Multi-head attention of `queries [q×d]` over `keys [k×d]` and
/// `values [k×d]`.
///
/// Each head attends with `softmax(Q_h K_hᵀ / sqrt(d/h)) V_h`; heads are
/// concatenated and passed through the output projection. When `weights` is
/// provided, the per-head attention matrices are pushed into it.
pub fn attend(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    values: Var,
    proj: &Projections,
    heads: usize,
    mut weights: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = tape.value(queries).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    for other in [keys, values] {
        if tape.value(other).rank() != 2 || tape.value(other).cols() != d {
            return Err(Error::shape("attention", tape.shape(queries), tape.shape(other)));
        }
    }
    if tape.value(keys).rows() != tape.value(values).rows() {
        return Err(Error::shape("attention", tape.shape(keys), tape.shape(values)));
    }
    let q = tape.matmul(queries, proj.wq)?;
    let k = tape.matmul(keys, proj.wk)?;
    let v = tape.matmul(values, proj.wv)?;
    let dh = d / heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, inv_sqrt);
        let attn = tape.softmax_rows(logits);
        if let Some(w) = weights.as_deref_mut() {
            w.push(attn);
        }
        outs.push(tape.matmul(attn, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(joined, proj.wo)
}
