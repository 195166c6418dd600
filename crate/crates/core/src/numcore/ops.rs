//! Value-level kernels. The tape records these and adds the backward rules.

use super::Tensor;
use crate::error::{Error, Result};

/// Norm floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
/// Variance epsilon of row layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, s, &[0, 0])),
    }
}

/// `a [m×k] · b [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul")?;
    let (k2, n) = as_matrix(b, "matmul")?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a [m×k] · bᵀ` with `b [n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = as_matrix(a, "matmul_nt")?;
    let (n, k2) = as_matrix(b, "matmul_nt")?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `aᵀ · b` with `a [k×m]`, `b [k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = as_matrix(a, "matmul_tn")?;
    let (k2, n) = as_matrix(b, "matmul_tn")?;
    if k != k2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = ad[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = as_matrix(a, "transpose")?;
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// `x·σ(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid_scalar(v))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Cosine similarity of every row of `a [m×d]` with `b [d]`; norms are
/// floored at [`COSINE_EPS`].
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a.cols();
    if b.rank() != 1 || b.numel() != d || a.rank() > 2 {
        return Err(Error::shape("cosine_rows", a.shape(), b.shape()));
    }
    let bn = norm(b.data()).max(COSINE_EPS);
    let out = a
        .data()
        .chunks(d)
        .map(|row| dot(row, b.data()) / (norm(row).max(COSINE_EPS) * bn))
        .collect::<Vec<_>>();
    let m = out.len();
    Ok(Tensor::from_parts(vec![m], out))
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn zip_same(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Elementwise sum. `b` may also be a `[n]` vector added to every row of
/// `a [m×n]`.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return zip_same(a, b, "add", |x, y| x + y);
    }
    if a.rank() == 2 && b.rank() == 1 && b.numel() == a.cols() {
        let n = a.cols();
        let mut out = a.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        return Ok(Tensor::from_parts(a.shape().to_vec(), out));
    }
    Err(Error::shape("add", a.shape(), b.shape()))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same(a, b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|x| x * c)
}

/// Arithmetic mean of a matrix along `axis` (0 averages rows together,
/// 1 averages within each row). A vector reduces to a one-element tensor.
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    match (x.shape(), axis) {
        ([n], 0) => Ok(Tensor::scalar(x.data().iter().sum::<f64>() / *n as f64)),
        ([m, n], 0) => {
            let mut out = vec![0.0; *n];
            for row in x.data().chunks(*n) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let inv = 1.0 / *m as f64;
            out.iter_mut().for_each(|o| *o *= inv);
            Ok(Tensor::from_parts(vec![*n], out))
        }
        ([m, n], 1) => {
            let out = x
                .data()
                .chunks(*n)
                .map(|row| row.iter().sum::<f64>() / *n as f64)
                .collect();
            Ok(Tensor::from_parts(vec![*m], out))
        }
        (s, _) => Err(Error::Contract(format!(
            "mean_axis: axis {axis} out of range for shape {s:?}"
        ))),
    }
}

/// Per-row `(x − mean)/sqrt(var + eps)` without affine parameters.
pub fn layer_norm_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_product_is_noop() {
        let m = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 7.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
    }

    #[test]
    fn small_product_by_hand() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_variants_agree() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![3.0, 0.0, 1.0]]).unwrap();
        let nt = matmul_nt(&a, &b).unwrap();
        assert_eq!(nt, matmul(&a, &transpose(&b).unwrap()).unwrap());
        let tn = matmul_tn(&a, &b).unwrap();
        assert_eq!(tn, matmul(&transpose(&a).unwrap(), &b).unwrap());
    }

    #[test]
    fn softmax_examples() {
        let z = softmax_rows(&Tensor::zeros(&[1, 4]));
        assert!(z.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let same = softmax_rows(&Tensor::full(&[1, 2], 123.0));
        assert_eq!(same.data(), &[0.5, 0.5]);
        let t = Tensor::matrix(1, 2, vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax_rows(&t);
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let t = Tensor::matrix(1, 3, vec![1000.0, 1000.0, -1000.0]).unwrap();
        let s = softmax_rows(&t);
        assert!(s.is_finite());
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(3f64.ln()) - 0.75).abs() < 1e-15);
        for x in [-30.0, -1.2, 0.3, 4.0, 50.0] {
            let s = sigmoid_scalar(x) + sigmoid_scalar(-x);
            assert!((s - 1.0).abs() < 1e-15);
            assert!(sigmoid_scalar(x) > 0.0 && sigmoid_scalar(x) < 1.0 || x.abs() > 36.0);
        }
    }

    #[test]
    fn cosine_examples() {
        let b = Tensor::vector(vec![0.3, -1.0, 2.0]).unwrap();
        let a = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![-0.3, 1.0, -2.0]]).unwrap();
        let c = cosine_rows(&a, &b).unwrap();
        assert!((c.data()[0] - 1.0).abs() < 1e-15);
        assert!((c.data()[1] + 1.0).abs() < 1e-15);
        let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let b = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let c = cosine_rows(&a, &b).unwrap();
        assert!((c.data()[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_zero_row_is_defined() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let c = cosine_rows(&a, &b).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
    }

    #[test]
    fn elementwise_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0]]).unwrap();
        assert_eq!(add(&x, &Tensor::zeros(&[2, 2])).unwrap(), x);
        assert_eq!(scale(&x, 1.0), x);
        assert_eq!(mean_axis(&x, 0).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(mean_axis(&x, 1).unwrap().data(), &[2.0, 6.0]);
        let bias = Tensor::vector(vec![1.0, -1.0]).unwrap();
        assert_eq!(add(&x, &bias).unwrap().data(), &[2.0, 2.0, 6.0, 6.0]);
        assert!(add(&x, &Tensor::zeros(&[3])).is_err());
        assert!(sub(&x, &Tensor::zeros(&[4])).is_err());
    }
}
