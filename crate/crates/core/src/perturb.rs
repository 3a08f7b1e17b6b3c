//! Masking, Gumbel noise, relaxed sampling and pseudo-sample assembly.
//!
//! The generator fills masked positions through a Gumbel-Softmax sample
//! followed by a straight-through argmax: the forward value is a one-hot
//! row, the backward pass sees the relaxed distribution. Every position
//! outside the mask plan keeps the exact one-hot of its original token
//! and carries no gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::models::{Encoder, EncoderInput, HeadKind};
use crate::scalar::Scalar;
use crate::tensor::{argmax, log_softmax, softmax, Tensor};
use crate::vocab::{TokenSequence, MASK, NUM_SPECIALS};

/// Lower clamp for the uniform draw behind each Gumbel sample; the upper
/// clamp is `1 - GUMBEL_EPS`.
pub const GUMBEL_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Sorted, unique, all maskable.
    pub positions: Vec<usize>,
    pub rho: f64,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Replaces each maskable token by the mask token when its uniform draw
/// falls below `rho`. When `rho > 0` selects nothing, one maskable
/// position chosen uniformly is masked anyway.
pub fn mask_tokens(
    seq: &TokenSequence,
    rho: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(TokenSequence, MaskPlan)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!(
            "rho must lie in [0, 1], got {rho}"
        )));
    }
    let candidates: Vec<usize> = seq.maskable_positions().collect();
    let mut positions: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() < rho)
        .collect();
    if rho > 0.0 && positions.is_empty() && !candidates.is_empty() {
        positions.push(candidates[rng.gen_range(0..candidates.len())]);
    }
    let mut masked = seq.clone();
    for &p in &positions {
        masked.ids[p] = MASK;
    }
    Ok((masked, MaskPlan { positions, rho }))
}

/// Gumbel(0, 1) noise with the relaxation temperature it will be used at.
#[derive(Clone, Debug)]
pub struct GumbelSample<S> {
    pub g: Tensor<S>,
    pub tau: f64,
}

/// `rows × cols` draws of `-ln(-ln(u))`, `u` uniform and clamped to
/// `[GUMBEL_EPS, 1 - GUMBEL_EPS]`.
pub fn sample_gumbel<S: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS);
            S::of(-(-u.ln()).ln())
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "tau must be positive, got {tau}"
        )))
    }
}

/// `softmax((log_softmax(logits) + g) / tau)`.
pub fn gumbel_softmax<S: Scalar>(logits: &[S], g: &[S], tau: f64) -> Result<Vec<S>> {
    check_tau(tau)?;
    if logits.len() != g.len() {
        return Err(Error::Shape(format!(
            "{} logits but {} noise entries",
            logits.len(),
            g.len()
        )));
    }
    let inv = S::of(1.0 / tau);
    let z: Vec<S> = log_softmax(logits)
        .iter()
        .zip(g)
        .map(|(&l, &n)| (l + n) * inv)
        .collect();
    Ok(softmax(&z))
}

/// Row-wise [`gumbel_softmax`] on the graph; differentiable in `logits`.
pub fn gumbel_softmax_node<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    noise: &Tensor<S>,
    tau: f64,
) -> Result<NodeId> {
    check_tau(tau)?;
    if g.value(logits).shape() != noise.shape() {
        return Err(Error::Shape(
            "gumbel noise shape differs from logits".into(),
        ));
    }
    let ls = g.log_softmax_rows(logits);
    let n = g.constant(noise.clone());
    let z = g.add(ls, n);
    let z = g.scale(z, S::of(1.0 / tau));
    Ok(g.softmax_rows(z))
}

/// Forward value of the straight-through estimator: the one-hot of the
/// argmax, lowest id on ties. On the graph use [`Graph::straight_through`].
pub fn straight_through<S: Scalar>(relaxed: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); relaxed.len()];
    if !relaxed.is_empty() {
        out[argmax(relaxed)] = S::one();
    }
    out
}

/// A text in both views: probability rows over the vocabulary and the
/// token ids those rows select.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedSequence<S> {
    pub rows: Tensor<S>,
    pub hard_ids: Vec<usize>,
    pub mask_positions: Vec<usize>,
}

impl<S: Scalar> RelaxedSequence<S> {
    /// Token view sharing the original's segment layout.
    pub fn hard_view(&self, original: &TokenSequence) -> TokenSequence {
        TokenSequence {
            ids: self.hard_ids.clone(),
            ..original.clone()
        }
    }
}

/// Fixes every unmasked position to the one-hot of its original token and
/// writes one sampled row into each planned position.
pub fn assemble_pseudo<S: Scalar>(
    original: &TokenSequence,
    plan: &MaskPlan,
    sampled_rows: &Tensor<S>,
    vocab_size: usize,
) -> Result<RelaxedSequence<S>> {
    if sampled_rows.rows() != plan.len() {
        return Err(Error::Shape(format!(
            "{} sampled rows for a plan of {} positions",
            sampled_rows.rows(),
            plan.len()
        )));
    }
    if sampled_rows.rows() > 0 && sampled_rows.cols() != vocab_size {
        return Err(Error::Shape(
            "sampled row width differs from vocabulary size".into(),
        ));
    }
    let mut rows = Tensor::one_hot(&original.ids, vocab_size);
    let mut hard_ids = original.ids.clone();
    for (i, &p) in plan.positions.iter().enumerate() {
        rows.row_mut(p).copy_from_slice(sampled_rows.row(i));
        hard_ids[p] = argmax(sampled_rows.row(i));
    }
    Ok(RelaxedSequence {
        rows,
        hard_ids,
        mask_positions: plan.positions.clone(),
    })
}

/// Sampling knobs for pseudo-sample generation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbConfig {
    pub rho: f64,
    pub tau: f64,
}

/// A batch of assembled pseudo samples living on a graph.
pub struct PseudoBatch {
    /// `(batch·len) × K` straight-through rows.
    pub rows: NodeId,
    /// Hard views, one per input sequence.
    pub hard: Vec<TokenSequence>,
    pub plans: Vec<MaskPlan>,
    /// Relaxed Gumbel-Softmax rows at plan positions, before the argmax.
    pub relaxed: Option<NodeId>,
}

/// Row offsets of every planned position in the stacked batch.
pub fn flat_positions(plans: &[MaskPlan], seq_len: usize) -> Vec<usize> {
    plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.positions.iter().map(move |&i| b * seq_len + i))
        .collect()
}

/// Masks each sequence, runs the generator, and assembles `X'`.
///
/// Special tokens are excluded from sampling so that the hard view keeps
/// the original layout. `gen_bound` decides whether the generator's
/// parameters are variables on `g`.
#[allow(clippy::too_many_arguments)]
pub fn generate_pseudo<S: Scalar>(
    g: &mut Graph<S>,
    generator: &Encoder<S>,
    gen_bound: &[NodeId],
    originals: &[TokenSequence],
    cfg: PerturbConfig,
    mask_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<PseudoBatch> {
    if generator.head() != HeadKind::MaskedLm {
        return Err(Error::Config("generator needs a masked-LM head".into()));
    }
    let k = generator.config().vocab_size;
    let len = originals.first().map_or(0, TokenSequence::len);
    let mut masked = Vec::with_capacity(originals.len());
    let mut plans = Vec::with_capacity(originals.len());
    for s in originals {
        let (m, p) = mask_tokens(s, cfg.rho, mask_rng)?;
        masked.push(m);
        plans.push(p);
    }
    let all_ids: Vec<usize> = originals
        .iter()
        .flat_map(|s| s.ids.iter().copied())
        .collect();
    let base = g.constant(Tensor::one_hot(&all_ids, k));
    let flat = flat_positions(&plans, len);
    if flat.is_empty() {
        return Ok(PseudoBatch {
            rows: base,
            hard: originals.to_vec(),
            plans,
            relaxed: None,
        });
    }
    let logits = generator.forward(g, gen_bound, EncoderInput::Hard(&masked), dropout_rng)?;
    let at_mask = g.select_rows(logits, &flat);
    let mut restrict = Tensor::zeros(flat.len(), k);
    for r in 0..flat.len() {
        restrict.row_mut(r)[..NUM_SPECIALS]
            .iter_mut()
            .for_each(|x| *x = S::neg_infinity());
    }
    let restrict = g.constant(restrict);
    let at_mask = g.add(at_mask, restrict);
    let noise = sample_gumbel::<S>(flat.len(), k, noise_rng);
    let relaxed = gumbel_softmax_node(g, at_mask, &noise, cfg.tau)?;
    let st = g.straight_through(relaxed);
    let rows = g.scatter_rows(base, st, &flat);
    let picked = g.value(st).argmax_rows();
    let mut hard = originals.to_vec();
    for (&f, &id) in flat.iter().zip(&picked) {
        hard[f / len].ids[f % len] = id;
    }
    Ok(PseudoBatch {
        rows,
        hard,
        plans,
        relaxed: Some(relaxed),
    })
}
