//! Scalar objectives.
//!
//! Plain functions work on single logit vectors; batch helpers average
//! them over rows. The [`graph`] submodule builds the same quantities on
//! an autograd graph, always treating teacher logits as constants.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Distillation temperature.
    pub temperature: f64,
    /// Weight of the distillation term in the KD baseline.
    pub lambda: f64,
    /// Temperature used by the adversarial and generator terms.
    pub adv_temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            lambda: 0.5,
            adv_temperature: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        check_temperature(self.adv_temperature)?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidArgument(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {t}"
        )))
    }
}

/// `KL(softmax(p) ‖ softmax(q))`, evaluated in log space.
pub fn kl_div<S: Scalar>(p_logits: &[S], q_logits: &[S]) -> Result<S> {
    if p_logits.len() != q_logits.len() {
        return Err(Error::Shape(format!(
            "kl_div on lengths {} and {}",
            p_logits.len(),
            q_logits.len()
        )));
    }
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: S = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
    // Rounding can leave a tiny negative residue when p == q.
    Ok(kl.max(S::zero()))
}

pub fn ce_loss<S: Scalar>(logits: &[S], y: usize) -> Result<S> {
    if y >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {y} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits)[y])
}

/// `T² · KL(softmax(t/T) ‖ softmax(s/T))`.
pub fn kd_loss<S: Scalar>(teacher: &[S], student: &[S], temperature: f64) -> Result<S> {
    check_temperature(temperature)?;
    let inv = S::of(1.0 / temperature);
    let t: Vec<S> = teacher.iter().map(|&x| x * inv).collect();
    let s: Vec<S> = student.iter().map(|&x| x * inv).collect();
    Ok(kl_div(&t, &s)? * S::of(temperature * temperature))
}

/// `(1 − λ)·ce + λ·kd`.
pub fn kd_baseline_loss<S: Scalar>(ce: S, kd: S, lambda: f64) -> S {
    debug_assert!((0.0..=1.0).contains(&lambda));
    S::of(1.0 - lambda) * ce + S::of(lambda) * kd
}

/// Divergence on pseudo samples, at temperature 1.
pub fn adv_loss<S: Scalar>(teacher: &[S], student: &[S]) -> Result<S> {
    kl_div(teacher, student)
}

/// Equal-weight mean of the three terms.
pub fn mate_kd_loss<S: Scalar>(ce: S, kd: S, adv: S) -> Result<S> {
    if !(ce.is_finite() && kd.is_finite() && adv.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite loss term ({ce}, {kd}, {adv})"
        )));
    }
    Ok((ce + kd + adv) / S::of(3.0))
}

/// The quantity the generator maximizes; equal in value to [`kl_div`].
pub fn generator_objective<S: Scalar>(teacher: &[S], student: &[S]) -> Result<S> {
    kl_div(teacher, student)
}

fn rows_mean<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(&[S], &[S]) -> Result<S>,
) -> Result<S> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(Error::Shape(format!(
            "batch shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut total = S::zero();
    for r in 0..a.rows() {
        total += f(a.row(r), b.row(r))?;
    }
    Ok(total / S::of(a.rows() as f64))
}

pub fn batch_kl<S: Scalar>(
    teacher: &Tensor<S>,
    student: &Tensor<S>,
    temperature: f64,
) -> Result<S> {
    rows_mean(teacher, student, |t, s| kd_loss(t, s, temperature))
}

pub fn batch_ce<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Shape("label count differs from batch size".into()));
    }
    let mut total = S::zero();
    for (r, &y) in labels.iter().enumerate() {
        total += ce_loss(logits.row(r), y)?;
    }
    Ok(total / S::of(labels.len() as f64))
}

pub mod graph {
    //! Differentiable batch-mean losses.

    use super::check_temperature;
    use crate::autograd::{Graph, NodeId};
    use crate::error::{Error, Result};
    use crate::scalar::Scalar;
    use crate::tensor::{log_softmax, softmax, Tensor};

    /// Mean cross-entropy of `logits` (`batch × C`) against `labels`.
    pub fn ce<S: Scalar>(g: &mut Graph<S>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, c) = g.value(logits).shape();
        if labels.len() != b || b == 0 {
            return Err(Error::Shape("label count differs from batch size".into()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let ls = g.log_softmax_rows(logits);
        let onehot = g.constant(Tensor::one_hot(labels, c));
        let picked = g.mul(ls, onehot);
        let total = g.sum(picked);
        Ok(g.scale(total, S::of(-1.0 / b as f64)))
    }

    /// Mean of `T² · KL(softmax(teacher/T) ‖ softmax(student/T))` over rows.
    /// The teacher enters as plain values, so no gradient reaches it.
    pub fn kl_from_teacher<S: Scalar>(
        g: &mut Graph<S>,
        teacher: &Tensor<S>,
        student: NodeId,
        temperature: f64,
    ) -> Result<NodeId> {
        check_temperature(temperature)?;
        let (b, c) = g.value(student).shape();
        if teacher.shape() != (b, c) || b == 0 {
            return Err(Error::Shape(format!(
                "teacher {:?} vs student {:?}",
                teacher.shape(),
                (b, c)
            )));
        }
        let inv = S::of(1.0 / temperature);
        let mut probs = Tensor::zeros(b, c);
        let mut neg_entropy = S::zero();
        for r in 0..b {
            let scaled: Vec<S> = teacher.row(r).iter().map(|&x| x * inv).collect();
            let p = softmax(&scaled);
            let lp = log_softmax(&scaled);
            neg_entropy += p.iter().zip(&lp).map(|(&a, &l)| a * l).sum::<S>();
            probs.row_mut(r).copy_from_slice(&p);
        }
        let scaled = g.scale(student, inv);
        let ls = g.log_softmax_rows(scaled);
        let p = g.constant(probs);
        let cross = g.mul(p, ls);
        let cross = g.sum(cross);
        let ent = g.constant(Tensor::from_vec(1, 1, vec![neg_entropy]));
        let kl = g.sub(ent, cross);
        Ok(g.scale(kl, S::of(temperature * temperature / b as f64)))
    }

    /// `(ce + kd + adv) / 3`.
    pub fn mate_kd<S: Scalar>(g: &mut Graph<S>, ce: NodeId, kd: NodeId, adv: NodeId) -> NodeId {
        let s = g.add(ce, kd);
        let s = g.add(s, adv);
        g.scale(s, S::of(1.0 / 3.0))
    }

    /// `(1 − λ)·ce + λ·kd`.
    pub fn kd_baseline<S: Scalar>(g: &mut Graph<S>, ce: NodeId, kd: NodeId, lambda: f64) -> NodeId {
        let a = g.scale(ce, S::of(1.0 - lambda));
        let b = g.scale(kd, S::of(lambda));
        g.add(a, b)
    }
}
