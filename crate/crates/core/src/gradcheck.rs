//! Finite-difference verification of every tape operation and of the full
//! support loss with respect to every learnable tensor.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{adapter_branch, ResidualAdapter};
use crate::backbone::TextBackbone;
use crate::clsa::{mhca, CrossAttentionBlock};
use crate::error::Result;
use crate::model::{ModelState, ParamGroup};
use crate::numcore::{finite_diff_coords, relative_error, Tape, Tensor, Var};
use crate::training::{evaluate_support_loss, support_loss_on, SupportBatch};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates probed per parameter tensor; smaller tensors are probed
    /// exhaustively.
    pub coords_per_tensor: usize,
    /// Std of the noise that moves the model off its initialization.
    pub perturbation: f64,
    pub seed: u64,
    /// Corrupts one backward rule so the check must fail.
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 3,
            perturbation: 0.05,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    /// `op` for kernel checks, otherwise the optimizer group.
    pub group: String,
    pub max_rel_err: f64,
    pub coords: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub ops: Vec<CheckLine>,
    pub params: Vec<CheckLine>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().chain(&self.params).all(|l| l.max_rel_err < self.tolerance)
    }

    /// Worst error per group, ops first then parameter groups in canonical
    /// order.
    pub fn group_maxima(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for l in self.ops.iter().chain(&self.params) {
            match out.iter_mut().find(|(g, _)| *g == l.group) {
                Some((_, e)) => *e = e.max(l.max_rel_err),
                None => out.push((l.group.clone(), l.max_rel_err)),
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,name,group,coords,max_rel_err,status\n");
        let status = |e: f64| if e < self.tolerance { "pass" } else { "FAIL" };
        for (kind, lines) in [("op", &self.ops), ("param", &self.params)] {
            for l in lines {
                s.push_str(&format!(
                    "{kind},{},{},{},{:e},{}\n",
                    l.name,
                    l.group,
                    l.coords,
                    l.max_rel_err,
                    status(l.max_rel_err)
                ));
            }
        }
        for (g, e) in self.group_maxima() {
            s.push_str(&format!("group,{g},{g},,{e:e},{}\n", status(e)));
        }
        s
    }
}

type Graph = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Weighted sum so every output coordinate carries a distinct adjoint.
fn reduce(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn unary(f: fn(&mut Tape, Var) -> Var) -> Graph {
    Box::new(move |t, x| Ok(f(t, x[0])))
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Graph)> {
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, rng);
    let (a, b, c, m, v, s) = (r(&[3, 4]), r(&[4, 2]), r(&[3, 4]), r(&[5, 4]), r(&[4]), r(&[1]));
    let (q, kv) = (r(&[3, 8]), r(&[5, 8]));
    let block: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[8, 8], 0.35, rng)).collect();
    let adapter = vec![
        Tensor::randn(&[8, 2], 0.35, rng),
        Tensor::randn(&[2], 0.1, rng),
        Tensor::randn(&[2, 8], 0.35, rng),
        Tensor::randn(&[8], 0.1, rng),
    ];
    let pos = a.map(|x| x.abs() + 0.5);
    let with = |head: Vec<Tensor>, tail: &[Tensor]| head.into_iter().chain(tail.iter().cloned()).collect();
    vec![
        ("matmul", vec![a.clone(), b], Box::new(|t, x| t.matmul(x[0], x[1]))),
        ("matmul_nt", vec![a.clone(), m.clone()], Box::new(|t, x| t.matmul_nt(x[0], x[1]))),
        ("add", vec![a.clone(), c.clone()], Box::new(|t, x| t.add(x[0], x[1]))),
        ("add_row", vec![a.clone(), v.clone()], Box::new(|t, x| t.add(x[0], x[1]))),
        ("sub", vec![a.clone(), c.clone()], Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", vec![a.clone(), c.clone()], Box::new(|t, x| t.mul(x[0], x[1]))),
        ("scale", vec![a.clone()], Box::new(|t, x| Ok(t.scale(x[0], -1.7)))),
        ("scale_by", vec![a.clone(), s], Box::new(|t, x| t.scale_by(x[0], x[1]))),
        ("affine", vec![a.clone()], Box::new(|t, x| Ok(t.affine(x[0], 0.3, 2.0)))),
        ("sigmoid", vec![a.clone()], unary(Tape::sigmoid)),
        ("silu", vec![a.clone()], unary(Tape::silu)),
        ("gelu", vec![a.clone()], unary(Tape::gelu)),
        ("ln", vec![pos.clone()], unary(Tape::ln)),
        ("exp", vec![a.clone()], unary(Tape::exp)),
        ("softmax_rows", vec![a.clone()], unary(Tape::softmax_rows)),
        ("layer_norm_rows", vec![a.clone()], unary(Tape::layer_norm_rows)),
        ("mean_axis0", vec![a.clone()], Box::new(|t, x| t.mean_axis(x[0], 0))),
        ("mean_axis1", vec![a.clone()], Box::new(|t, x| t.mean_axis(x[0], 1))),
        ("sum", vec![a.clone()], unary(Tape::sum)),
        ("mean", vec![a.clone()], unary(Tape::mean)),
        ("slice_cols", vec![a.clone()], Box::new(|t, x| t.slice_cols(x[0], 1, 2))),
        ("slice_rows", vec![m.clone()], Box::new(|t, x| t.slice_rows(x[0], 1, 3))),
        ("row", vec![m.clone()], Box::new(|t, x| t.row(x[0], 2))),
        ("concat_cols", vec![a.clone(), c.clone()], Box::new(|t, x| t.concat_cols(&[x[0], x[1]]))),
        ("concat_rows", vec![a.clone(), m.clone()], Box::new(|t, x| t.concat_rows(&[x[0], x[1]]))),
        ("cosine_rows", vec![m.clone(), v.clone()], Box::new(|t, x| t.cosine_rows(x[0], x[1]))),
        ("matvec", vec![m, v], Box::new(|t, x| t.matvec(x[0], x[1]))),
        (
            "multi_head_cross_attention",
            with(vec![q.clone(), kv], &block),
            Box::new(|t, x| {
                let blk = CrossAttentionBlock {
                    wq: x[2],
                    wk: x[3],
                    wv: x[4],
                    wo: x[5],
                };
                mhca(t, x[0], x[1], x[1], &blk, 2, None)
            }),
        ),
        (
            "residual_adapter",
            with(vec![q], &adapter),
            Box::new(|t, x| {
                let ad = ResidualAdapter {
                    down: x[1],
                    down_bias: x[2],
                    up: x[3],
                    up_bias: x[4],
                };
                let br = adapter_branch(t, x[0], &ad)?;
                t.add(x[0], br)
            }),
        ),
    ]
}

fn check_op(name: &str, inputs: &[Tensor], graph: &Graph, opts: &GradcheckOptions, seed: u64) -> Result<CheckLine> {
    let weight_of = |tape: &Tape, out: Var| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(tape.shape(out), 1.0, &mut rng)
    };
    let mut tape = Tape::new();
    if opts.inject_fault {
        tape.inject_backward_fault();
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    let w = weight_of(&tape, out);
    let loss = reduce(&mut tape, out, &w)?;
    tape.backward(loss)?;
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[k]).unwrap_or_else(|| Tensor::zeros(input.shape()));
        let all: Vec<usize> = (0..input.numel()).collect();
        let numeric = finite_diff_coords(
            |probe| {
                let mut t = Tape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| t.param(if j == k { probe.clone() } else { x.clone() }))
                    .collect();
                graph(&mut t, &vs)
                    .and_then(|o| reduce(&mut t, o, &w))
                    .map(|l| t.value(l).data()[0])
                    .unwrap_or(f64::NAN)
            },
            input,
            opts.step,
            &all,
        )?;
        for (&a, &n) in analytic.data().iter().zip(&numeric) {
            let e = relative_error(a, n);
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        coords += all.len();
    }
    Ok(CheckLine {
        name: name.to_string(),
        group: "op".into(),
        max_rel_err: worst,
        coords,
    })
}

/// Every differentiable kernel plus the two composite blocks, on random
/// inputs.
pub fn op_suite(opts: &GradcheckOptions) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    op_cases(&mut rng)
        .iter()
        .enumerate()
        .map(|(i, (name, inputs, graph))| check_op(name, inputs, graph, opts, opts.seed.wrapping_add(i as u64)))
        .collect()
}

/// Adds seeded noise to every parameter so gates, zero-initialized
/// projections and the logit scale all sit at generic values.
pub fn perturb(model: &mut ModelState, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in model.params.entries_mut() {
        let noise = Tensor::randn(t.shape(), std, &mut rng);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
}

/// Support BCE gradients against central differences for every parameter
/// tensor the optimizer may train.
pub fn loss_suite(
    model: &ModelState,
    text: &dyn TextBackbone,
    batch: &SupportBatch<'_>,
    opts: &GradcheckOptions,
) -> Result<Vec<CheckLine>> {
    let all: Vec<usize> = (0..batch.labels.len()).collect();
    let mut tape = Tape::new();
    if opts.inject_fault {
        tape.inject_backward_fault();
    }
    let (p, _, loss) = support_loss_on(&mut tape, model, text, batch, &all, true)?;
    tape.backward(loss)?;
    let bound = p.entries();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut out = Vec::new();
    for (i, (name, value)) in model.params.entries().into_iter().enumerate() {
        if !model.is_trainable(&name) {
            continue;
        }
        let n = value.numel();
        let coords: Vec<usize> = if n <= opts.coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let analytic = tape
            .grad(*bound[i].1)
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let numeric = finite_diff_coords(
            |probe| {
                let mut m = model.clone();
                for (pn, t) in m.params.entries_mut() {
                    if pn == name {
                        *t = probe.clone();
                    }
                }
                evaluate_support_loss(&m, text, batch).unwrap_or(f64::NAN)
            },
            value,
            opts.step,
            &coords,
        )?;
        let worst = coords
            .iter()
            .zip(&numeric)
            .map(|(&c, &nv)| relative_error(analytic.data()[c], nv))
            .fold(0.0f64, |w, e| if e.is_nan() { f64::INFINITY } else { w.max(e) });
        out.push(CheckLine {
            group: ParamGroup::of(&name).name().to_string(),
            name,
            max_rel_err: worst,
            coords: coords.len(),
        });
    }
    Ok(out)
}

/// Kernel suite plus the loss suite on a perturbed copy of `model`.
pub fn run_gradcheck(
    model: &ModelState,
    text: &dyn TextBackbone,
    batch: &SupportBatch<'_>,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut generic = model.clone();
    perturb(&mut generic, opts.perturbation, opts.seed);
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        ops: op_suite(opts)?,
        params: loss_suite(&generic, text, batch, opts)?,
    })
}
