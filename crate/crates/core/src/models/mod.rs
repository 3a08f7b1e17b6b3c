//! Transformer encoders used as teacher, student and masked-LM generator.
//!
//! All three share one architecture (pre-norm encoder blocks over token,
//! position and segment embeddings) and differ only in the output head.
//! The student accepts relaxed inputs: each position is a probability
//! row over the vocabulary and its embedding is `row · E`.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use params::ParamStore;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, Vocabulary, CLS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_layers,
            self.hidden_dim,
            self.num_heads,
            self.ffn_dim,
            self.vocab_size,
            self.max_len,
        ];
        if dims.contains(&0) || self.num_classes == 0 {
            return Err(Error::Config("encoder dimensions must all be >= 1".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// 4 layers, width 128.
    pub fn teacher(vocab_size: usize, max_len: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 128,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size,
            max_len,
            num_classes,
            dropout: 0.1,
        }
    }

    /// 2 layers, width 64.
    pub fn student(vocab_size: usize, max_len: usize, num_classes: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 2,
            ffn_dim: 128,
            vocab_size,
            max_len,
            num_classes,
            dropout: 0.1,
        }
    }

    /// 2 layers, width 64.
    pub fn generator(vocab_size: usize, max_len: usize) -> Self {
        Self {
            num_classes: 1,
            ..Self::student(vocab_size, max_len, 1)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Affine map of the first (cls) position to `num_classes` logits.
    Classifier,
    /// Affine map of every position to `vocab_size` logits.
    MaskedLm,
}

/// Input to an encoder forward pass. All sequences in a batch must share
/// a length no larger than `max_len`.
pub enum EncoderInput<'a> {
    Hard(&'a [TokenSequence]),
    /// `rows` is a `(batch·len) × K` node of per-position distributions;
    /// `layout` supplies segment ids and the padding mask.
    Relaxed {
        rows: NodeId,
        layout: &'a [TokenSequence],
    },
}

impl EncoderInput<'_> {
    fn layout(&self) -> &[TokenSequence] {
        match self {
            EncoderInput::Hard(s) => s,
            EncoderInput::Relaxed { layout, .. } => layout,
        }
    }
}

#[derive(Clone, Debug)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder<S> {
    config: EncoderConfig,
    head: HeadKind,
    params: ParamStore<S>,
    tok_emb: usize,
    pos_emb: usize,
    seg_emb: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

const INIT_STD: f64 = 0.02;

impl<S: Scalar> Encoder<S> {
    pub fn new(config: EncoderConfig, head: HeadKind, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut init = |r: usize, c: usize| -> Tensor<S> {
            Tensor::from_vec(
                r,
                c,
                (0..r * c).map(|_| S::of(normal.sample(rng))).collect(),
            )
        };
        let (d, f) = (config.hidden_dim, config.ffn_dim);
        let ones = |n: usize| Tensor::full(1, n, S::one());
        let zeros = |n: usize| Tensor::zeros(1, n);
        let mut p = ParamStore::new();
        let tok_emb = p.push("embed.token", init(config.vocab_size, d));
        let pos_emb = p.push("embed.position", init(config.max_len, d));
        let seg_emb = p.push("embed.segment", init(2, d));
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let n = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIdx {
                ln1_g: p.push(n("ln1.gamma"), ones(d)),
                ln1_b: p.push(n("ln1.beta"), zeros(d)),
                wq: p.push(n("attn.wq"), init(d, d)),
                bq: p.push(n("attn.bq"), zeros(d)),
                wk: p.push(n("attn.wk"), init(d, d)),
                bk: p.push(n("attn.bk"), zeros(d)),
                wv: p.push(n("attn.wv"), init(d, d)),
                bv: p.push(n("attn.bv"), zeros(d)),
                wo: p.push(n("attn.wo"), init(d, d)),
                bo: p.push(n("attn.bo"), zeros(d)),
                ln2_g: p.push(n("ln2.gamma"), ones(d)),
                ln2_b: p.push(n("ln2.beta"), zeros(d)),
                w1: p.push(n("ffn.w1"), init(d, f)),
                b1: p.push(n("ffn.b1"), zeros(f)),
                w2: p.push(n("ffn.w2"), init(f, d)),
                b2: p.push(n("ffn.b2"), zeros(d)),
            });
        }
        let lnf_g = p.push("final_ln.gamma", ones(d));
        let lnf_b = p.push("final_ln.beta", zeros(d));
        let out = match head {
            HeadKind::Classifier => config.num_classes,
            HeadKind::MaskedLm => config.vocab_size,
        };
        let head_w = p.push("head.w", init(d, out));
        let head_b = p.push("head.b", zeros(out));
        Ok(Self {
            config,
            head,
            params: p,
            tok_emb,
            pos_emb,
            seg_emb,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        })
    }

    /// Rebuilds an encoder around an existing parameter set; shapes must
    /// match what `config` and `head` prescribe.
    pub fn from_params(
        config: EncoderConfig,
        head: HeadKind,
        params: ParamStore<S>,
    ) -> Result<Self> {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut enc = Self::new(config, head, &mut rng)?;
        enc.replace_params(params)?;
        Ok(enc)
    }

    pub fn replace_params(&mut self, params: ParamStore<S>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for (i, (a, b)) in self
            .params
            .tensors()
            .iter()
            .zip(params.tensors())
            .enumerate()
        {
            if a.shape() != b.shape() || self.params.names()[i] != params.names()[i] {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {} has shape {:?}, config expects {} {:?}",
                    params.names()[i],
                    b.shape(),
                    self.params.names()[i],
                    a.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadKind::Classifier => self.config.num_classes,
            HeadKind::MaskedLm => self.config.vocab_size,
        }
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if self.config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match vocabulary of {} tokens",
                self.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(())
    }

    fn check_layout(&self, seqs: &[TokenSequence]) -> Result<usize> {
        let first = seqs
            .first()
            .ok_or_else(|| Error::Shape("empty batch".into()))?;
        let len = first.len();
        if len == 0 {
            return Err(Error::Shape("zero-length sequence".into()));
        }
        if len > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        for s in seqs {
            if s.len() != len {
                return Err(Error::Shape(
                    "sequences in a batch must share one length".into(),
                ));
            }
            if let Some(&bad) = s.ids.iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(Error::TokenOutOfRange {
                    id: bad,
                    size: self.config.vocab_size,
                });
            }
        }
        Ok(len)
    }

    /// Builds the forward pass. `bound` comes from `params().bind(..)`.
    /// With `dropout_rng` set, dropout is active (training mode).
    ///
    /// Returns `batch × C` logits for a classifier and `(batch·len) × K`
    /// logits for a masked LM.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        bound: &[NodeId],
        input: EncoderInput<'_>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        assert_eq!(
            bound.len(),
            self.params.len(),
            "bound parameters do not belong to this encoder"
        );
        let seqs = input.layout();
        let len = self.check_layout(seqs)?;
        let batch = seqs.len();
        let n = batch * len;
        let p = |i: usize| bound[i];

        let tok = match input {
            EncoderInput::Hard(_) => {
                let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
                g.select_rows(p(self.tok_emb), &ids)
            }
            EncoderInput::Relaxed { rows, .. } => {
                let rv = g.value(rows);
                if rv.cols() != self.config.vocab_size {
                    return Err(Error::Shape(format!(
                        "relaxed row length {} does not match vocabulary size {}",
                        rv.cols(),
                        self.config.vocab_size
                    )));
                }
                if rv.rows() != n {
                    return Err(Error::Shape(format!(
                        "relaxed input has {} rows, layout needs {n}",
                        rv.rows()
                    )));
                }
                g.matmul(rows, p(self.tok_emb))
            }
        };
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = g.select_rows(p(self.pos_emb), &positions);
        let segs: Vec<usize> = seqs
            .iter()
            .flat_map(|s| s.segments.iter().map(|&x| usize::from(x.min(1))))
            .collect();
        let seg = g.select_rows(p(self.seg_emb), &segs);
        let x = g.add(tok, pos);
        let x = g.add(x, seg);
        let mut x = self.dropout(g, x, dropout_rng.as_deref_mut());

        let key_valid: Vec<bool> = seqs.iter().flat_map(|s| s.attendable()).collect::<Vec<_>>();
        for l in &self.layers {
            let h = g.layer_norm(x, p(l.ln1_g), p(l.ln1_b));
            let q = affine(g, h, p(l.wq), p(l.bq));
            let k = affine(g, h, p(l.wk), p(l.bk));
            let v = affine(g, h, p(l.wv), p(l.bv));
            let a = g.attention(q, k, v, self.config.num_heads, len, &key_valid);
            let a = affine(g, a, p(l.wo), p(l.bo));
            let a = self.dropout(g, a, dropout_rng.as_deref_mut());
            x = g.add(x, a);
            let h = g.layer_norm(x, p(l.ln2_g), p(l.ln2_b));
            let f = affine(g, h, p(l.w1), p(l.b1));
            let f = g.gelu(f);
            let f = affine(g, f, p(l.w2), p(l.b2));
            let f = self.dropout(g, f, dropout_rng.as_deref_mut());
            x = g.add(x, f);
        }
        let x = g.layer_norm(x, p(self.lnf_g), p(self.lnf_b));
        let x = match self.head {
            HeadKind::Classifier => {
                let cls_rows: Vec<usize> = (0..batch).map(|b| b * len).collect();
                debug_assert!(seqs.iter().all(|s| s.ids[0] == CLS || s.ids.is_empty()));
                g.select_rows(x, &cls_rows)
            }
            HeadKind::MaskedLm => x,
        };
        Ok(affine(g, x, p(self.head_w), p(self.head_b)))
    }

    fn dropout(&self, g: &mut Graph<S>, x: NodeId, rng: Option<&mut ChaCha8Rng>) -> NodeId {
        let rate = self.config.dropout;
        match rng {
            Some(rng) if rate > 0.0 => {
                let (r, c) = g.value(x).shape();
                let keep = S::of(1.0 / (1.0 - rate));
                let mask = (0..r * c)
                    .map(|_| {
                        if rng.gen::<f64>() < rate {
                            S::zero()
                        } else {
                            keep
                        }
                    })
                    .collect();
                let m = g.constant(Tensor::from_vec(r, c, mask));
                g.mul(x, m)
            }
            _ => x,
        }
    }

    /// Eval-mode logits on hard ids, outside any caller graph.
    pub fn logits(&self, seqs: &[TokenSequence]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &bound, EncoderInput::Hard(seqs), None)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode logits on relaxed rows given as a plain tensor.
    pub fn logits_relaxed(&self, rows: &Tensor<S>, layout: &[TokenSequence]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let r = g.constant(rows.clone());
        let out = self.forward(
            &mut g,
            &bound,
            EncoderInput::Relaxed { rows: r, layout },
            None,
        )?;
        Ok(g.value(out).clone())
    }
}

fn affine<S: Scalar>(g: &mut Graph<S>, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

/// Frozen classifier reachable only through its output logits.
#[derive(Clone, Debug)]
pub struct Teacher<S> {
    model: Encoder<S>,
}

impl<S: Scalar> Teacher<S> {
    pub fn new(model: Encoder<S>) -> Result<Self> {
        if model.head() != HeadKind::Classifier {
            return Err(Error::Config("teacher must have a classifier head".into()));
        }
        Ok(Self { model })
    }

    /// Plain values, detached from every graph.
    pub fn logits(&self, seqs: &[TokenSequence]) -> Result<Tensor<S>> {
        self.model.logits(seqs)
    }

    pub fn num_classes(&self) -> usize {
        self.model.config().num_classes
    }

    pub fn config(&self) -> &EncoderConfig {
        self.model.config()
    }

    pub fn param_hash(&self) -> String {
        self.model.params().hash()
    }

    /// Read-only access for checkpointing.
    pub fn encoder(&self) -> &Encoder<S> {
        &self.model
    }
}

/// Teacher, student and generator over one shared vocabulary.
#[derive(Clone, Debug)]
pub struct ModelBundle<S> {
    pub vocab: Vocabulary,
    pub teacher: Teacher<S>,
    pub student: Encoder<S>,
    pub generator: Encoder<S>,
}

impl<S: Scalar> ModelBundle<S> {
    pub fn new(
        vocab: Vocabulary,
        teacher: Teacher<S>,
        student: Encoder<S>,
        generator: Encoder<S>,
    ) -> Result<Self> {
        teacher.encoder().check_vocab(&vocab)?;
        student.check_vocab(&vocab)?;
        generator.check_vocab(&vocab)?;
        if student.head() != HeadKind::Classifier || generator.head() != HeadKind::MaskedLm {
            return Err(Error::Config(
                "student needs a classifier head and generator a masked-LM head".into(),
            ));
        }
        if student.config().num_classes != teacher.num_classes() {
            return Err(Error::Config(
                "teacher and student disagree on the number of classes".into(),
            ));
        }
        Ok(Self {
            vocab,
            teacher,
            student,
            generator,
        })
    }
}
