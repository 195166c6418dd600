//! Ranking metrics, support-derived thresholds and confusion arithmetic.
//!
//! Labels are booleans with `true` marking the positive (abnormal) class.

use crate::error::{Error, Result};

fn sorted_desc(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, bool)>> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Domain("scores contain NaN".into()));
    }
    let mut v: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(v)
}

/// Groups of equal score in descending order, as `(positives, negatives)`.
fn tie_groups(sorted: &[(f64, bool)]) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    let mut prev: Option<f64> = None;
    for &(s, y) in sorted {
        if prev != Some(s) {
            out.push((0, 0));
            prev = Some(s);
        }
        let g = out.last_mut().expect("group exists");
        if y {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    out
}

/// Mann-Whitney AUC with half credit for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let sorted = sorted_desc(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::MetricUndefined("AUC needs both classes".into()));
    }
    // Twice the concordance count: each positive beats every negative scored
    // strictly lower and ties with the negatives in its group.
    let mut neg_below = n_neg;
    let mut twice = 0u64;
    for (p, n) in tie_groups(&sorted) {
        neg_below -= n;
        twice += p * (2 * neg_below + n);
    }
    Ok(twice as f64 / (2 * n_pos * n_neg) as f64)
}

/// Step-sum average precision over tie-grouped descending thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let sorted = sorted_desc(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count() as u64;
    if n_pos == 0 {
        return Err(Error::MetricUndefined("AP needs at least one positive".into()));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut ap = 0.0;
    for (p, n) in tie_groups(&sorted) {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (p as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Predicts positive iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Confusion> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Contract(format!(
            "{} scores against {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// F1-maximizing threshold over midpoints between adjacent distinct support
/// scores, lowest midpoint winning ties. A constant support yields that
/// constant, which predicts every support sample positive.
pub fn threshold_from_support(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::Capacity("threshold search needs both classes in the support".into()));
    }
    let mut distinct: Vec<f64> = sorted_desc(scores, labels)?.into_iter().map(|(s, _)| s).collect();
    distinct.reverse();
    distinct.dedup();
    if distinct.len() == 1 {
        return Ok(distinct[0]);
    }
    let mut best = (f64::NEG_INFINITY, distinct[0]);
    for w in distinct.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let f1 = confusion(scores, labels, t)?.f1();
        if f1 > best.0 {
            best = (f1, t);
        }
    }
    Ok(best.1)
}

/// Episode-level summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub auc: f64,
    pub ap: f64,
    pub f1: f64,
    pub acc: f64,
    pub threshold: f64,
    pub counts: Confusion,
}

pub fn thresholded_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<(f64, f64, Confusion)> {
    let c = confusion(scores, labels, threshold)?;
    Ok((c.f1(), c.accuracy(), c))
}

pub fn metric_report(scores: &[f64], labels: &[bool], threshold: f64) -> Result<MetricReport> {
    let (f1, acc, counts) = thresholded_metrics(scores, labels, threshold)?;
    Ok(MetricReport {
        auc: auc(scores, labels)?,
        ap: average_precision(scores, labels)?,
        f1,
        acc,
        threshold,
        counts,
    })
}
