//! Few-shot optimization: BCE objective, AdamW with decoupled weight decay,
//! cosine annealing and per-group learning rates.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::TextBackbone;
use crate::class::Class;
use crate::error::{Error, Result};
use crate::model::{semantic_score_var, ModelState, ParamGroup};
use crate::numcore::{Tape, Tensor, Var};

/// Which learning rate the logit scale follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TauRate {
    Fast,
    Slow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Prompts and alignment blocks.
    pub lr_fast: f64,
    /// Adapters, including `α_t`.
    pub lr_slow: f64,
    pub tau_rate: TauRate,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr_fast: 1e-4,
            lr_slow: 1e-5,
            tau_rate: TauRate::Fast,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_fast > 0.0 && self.lr_slow > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("AdamW moments need beta in [0, 1) and eps > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Base learning rate of a named parameter.
    pub fn base_lr(&self, name: &str) -> f64 {
        match ParamGroup::of(name) {
            ParamGroup::Prompt | ParamGroup::Clsa => self.lr_fast,
            ParamGroup::Adapter => self.lr_slow,
            ParamGroup::LogitScale => match self.tau_rate {
                TauRate::Fast => self.lr_fast,
                TauRate::Slow => self.lr_slow,
            },
        }
    }
}

/// `−mean(y·ln s + (1−y)·ln(1−s))` on the tape.
pub fn bce_loss_var(tape: &mut Tape, scores: &[Var], labels: &[Class]) -> Result<Var> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "BCE over {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&s, &y) in scores.iter().zip(labels) {
        let p = match y {
            Class::Abnormal => s,
            Class::Normal => tape.affine(s, -1.0, 1.0),
        };
        let term = tape.ln(p);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(tape.scale(total, -1.0 / scores.len() as f64))
}

/// Value-level BCE.
pub fn bce_loss(scores: &[f64], labels: &[Class]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "BCE over {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| match y {
            Class::Abnormal => s.ln(),
            Class::Normal => (1.0 - s).ln(),
        })
        .sum();
    Ok(-total / scores.len() as f64)
}

/// `0.5·base·(1 + cos(π t/T))` for `0 <= t < T`.
pub fn cosine_lr(base_lr: f64, t: usize, total: usize) -> Result<f64> {
    if t >= total {
        return Err(Error::Domain(format!("epoch {t} outside schedule of {total}")));
    }
    Ok((0.5 * base_lr * (1.0 + (PI * t as f64 / total as f64).cos())).max(0.0))
}

/// AdamW state keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn from_config(c: &TrainConfig) -> Self {
        Self::new(c.beta1, c.beta2, c.eps, c.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor, Tensor)> {
        self.moments.get(name)
    }

    /// One update over `(name, param, grad, lr)`; parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, updates: Vec<(String, &mut Tensor, Option<Tensor>, f64)>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p, g, lr) in updates {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(Error::Contract(format!(
                    "gradient of `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let pi = p.data()[i];
                p.data_mut()[i] = pi - lr * wd * pi - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Support samples for training: frozen visual taps and labels.
pub struct SupportBatch<'a> {
    pub visual: &'a [Vec<Tensor>],
    pub labels: &'a [Class],
}

/// Forward pass over selected support samples on a fresh binding. Returns the
/// tape, the bound parameters, the scores and the BCE loss.
pub fn support_loss(
    model: &ModelState,
    text: &dyn TextBackbone,
    batch: &SupportBatch<'_>,
    indices: &[usize],
    trainable: bool,
) -> Result<(Tape, crate::model::HaafParams<Var>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let (p, scores, loss) = support_loss_on(&mut tape, model, text, batch, indices, trainable)?;
    Ok((tape, p, scores, loss))
}

/// [`support_loss`] recorded on a caller-provided tape.
pub fn support_loss_on(
    tape: &mut Tape,
    model: &ModelState,
    text: &dyn TextBackbone,
    batch: &SupportBatch<'_>,
    indices: &[usize],
    trainable: bool,
) -> Result<(crate::model::HaafParams<Var>, Vec<Var>, Var)> {
    if batch.visual.len() != batch.labels.len() {
        return Err(Error::Contract(format!(
            "{} support features against {} labels",
            batch.visual.len(),
            batch.labels.len()
        )));
    }
    let p = model.bind(tape, trainable);
    let tt = model.text_features(tape, &p, text)?;
    let mut scores = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let visual = batch
            .visual
            .get(i)
            .ok_or_else(|| Error::Contract(format!("support index {i} out of range")))?;
        let f = model.image_forward(tape, &p, &tt, visual)?;
        scores.push(semantic_score_var(tape, &f.v_prime, f.t_abn, p.log_tau)?);
        labels.push(batch.labels[i]);
    }
    let loss = bce_loss_var(tape, &scores, &labels)?;
    Ok((p, scores, loss))
}

/// Full-support BCE at the current parameters.
pub fn evaluate_support_loss(model: &ModelState, text: &dyn TextBackbone, batch: &SupportBatch<'_>) -> Result<f64> {
    let all: Vec<usize> = (0..batch.labels.len()).collect();
    let (tape, _, _, loss) = support_loss(model, text, batch, &all, false)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_fast: f64,
    pub lr_slow: f64,
    /// Mean minibatch loss seen during the epoch, before its updates.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub trace: Vec<EpochRecord>,
    /// Full-support loss before the first and after the last update.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainReport {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("epoch,lr_fast,lr_slow,loss\n");
        for r in &self.trace {
            let _ = writeln!(out, "{},{:e},{:e},{:.17e}", r.epoch, r.lr_fast, r.lr_slow, r.loss);
        }
        out
    }
}

/// Trains every learnable member on the support set. Minibatches are drawn
/// by a seeded shuffle when the support exceeds the batch size.
pub fn train_episode(
    model: &mut ModelState,
    text: &dyn TextBackbone,
    batch: &SupportBatch<'_>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if batch.visual.len() != batch.labels.len() || batch.labels.is_empty() {
        return Err(Error::Contract("support features and labels must align".into()));
    }
    let initial_loss = evaluate_support_loss(model, text, batch)?;
    let mut opt = AdamW::from_config(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = batch.labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr_fast = cosine_lr(config.lr_fast, epoch, config.epochs)?;
        let lr_slow = cosine_lr(config.lr_slow, epoch, config.epochs)?;
        let scale = |base: f64| cosine_lr(base, epoch, config.epochs);
        if n > config.batch_size {
            order.shuffle(&mut rng);
        }
        let mut seen = 0.0;
        let mut chunks = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (mut tape, p, _, loss) = support_loss(model, text, batch, chunk, true)?;
            seen += tape.value(loss).data()[0];
            chunks += 1;
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = p.entries().into_iter().map(|(_, &v)| tape.grad(v)).collect();
            let mut updates = Vec::new();
            for ((name, t), g) in model.params.entries_mut().into_iter().zip(grads) {
                let lr = scale(config.base_lr(&name))?;
                updates.push((name, t, g, lr));
            }
            opt.step(updates)?;
        }
        trace.push(EpochRecord {
            epoch,
            lr_fast,
            lr_slow,
            loss: seen / chunks as f64,
        });
    }
    let final_loss = evaluate_support_loss(model, text, batch)?;
    Ok(TrainReport {
        trace,
        initial_loss,
        final_loss,
    })
}
