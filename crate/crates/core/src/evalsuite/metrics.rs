use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    F1,
    Matthews,
    Pearson,
    Spearman,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Accuracy,
        Metric::F1,
        Metric::Matthews,
        Metric::Pearson,
        Metric::Spearman,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Matthews => "matthews",
            Metric::Pearson => "pearson",
            Metric::Spearman => "spearman",
        }
    }

    /// Inclusive range of valid values.
    pub fn range(self) -> (f64, f64) {
        match self {
            Metric::Accuracy | Metric::F1 => (0.0, 1.0),
            _ => (-1.0, 1.0),
        }
    }

    pub fn compute(self, predictions: &[f64], references: &[f64]) -> Result<f64> {
        if predictions.len() != references.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} references",
                predictions.len(),
                references.len()
            )));
        }
        if predictions.is_empty() {
            return Err(Error::InvalidArgument(
                "metrics need at least one prediction".into(),
            ));
        }
        Ok(match self {
            Metric::Accuracy => accuracy(predictions, references),
            Metric::F1 => f1(predictions, references),
            Metric::Matthews => matthews(predictions, references),
            Metric::Pearson => pearson(predictions, references),
            Metric::Spearman => pearson(&ranks(predictions), &ranks(references)),
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric {s:?}")))
    }
}

/// Computes a metric by name. Classification metrics compare values exactly.
pub fn compute_metric(name: &str, predictions: &[f64], references: &[f64]) -> Result<f64> {
    name.parse::<Metric>()?.compute(predictions, references)
}

fn accuracy(p: &[f64], r: &[f64]) -> f64 {
    p.iter().zip(r).filter(|(a, b)| a == b).count() as f64 / p.len() as f64
}

/// Binary F1 with class 1 as the positive label; 0 when nothing is positive.
fn f1(p: &[f64], r: &[f64]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(r) {
        match (a == 1.0, b == 1.0) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    let denom = 2.0 * tp + fp + fn_;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * tp / denom
    }
}

/// Multiclass Matthews correlation from the confusion matrix. Reduces to
/// the usual binary formula for two classes.
fn matthews(p: &[f64], r: &[f64]) -> f64 {
    let mut pred_counts: BTreeMap<u64, f64> = BTreeMap::new();
    let mut ref_counts: BTreeMap<u64, f64> = BTreeMap::new();
    let mut correct = 0.0;
    for (&a, &b) in p.iter().zip(r) {
        *pred_counts.entry(a.to_bits()).or_default() += 1.0;
        *ref_counts.entry(b.to_bits()).or_default() += 1.0;
        if a == b {
            correct += 1.0;
        }
    }
    let n = p.len() as f64;
    let cross: f64 = pred_counts
        .iter()
        .map(|(k, &pk)| pk * ref_counts.get(k).copied().unwrap_or(0.0))
        .sum();
    let pp: f64 = pred_counts.values().map(|x| x * x).sum();
    let rr: f64 = ref_counts.values().map(|x| x * x).sum();
    let denom = ((n * n - pp) * (n * n - rr)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (correct * n - cross) / denom
    }
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let denom = (sxx * syy).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (sxy / denom).clamp(-1.0, 1.0)
    }
}

/// 1-based ranks with ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}
