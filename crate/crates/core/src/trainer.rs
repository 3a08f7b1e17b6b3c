//! Training loops: teacher pretraining, masked-LM generator pretraining,
//! the KD baseline and the adversarial minimax loop.
//!
//! Every loop draws batches from one shuffled stream per epoch. In the
//! minimax loop the stream is consumed by maximization and minimization
//! steps alike, in blocks of `n_g` then `n_s`. The block pattern runs on
//! across epoch boundaries, so only the last cycle of a run can be cut
//! short.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::evalsuite::Metric;
use crate::losses::{graph as lg, LossConfig};
use crate::models::{save_checkpoint, Encoder, EncoderInput, HeadKind, Teacher};
use crate::optim::{lr_schedule, AdamW, AdamWConfig};
use crate::perturb::{flat_positions, generate_pseudo, mask_tokens, PerturbConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vocab::{encode, TokenSequence, Vocabulary, NUM_SPECIALS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Masking probability.
    pub rho: f64,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// Distillation temperature.
    pub temperature: f64,
    /// Distillation weight of the KD baseline.
    pub lambda: f64,
    /// Use `temperature` instead of 1 for the adversarial and generator terms.
    pub adv_shares_temperature: bool,
    /// Generator steps per cycle.
    pub n_g: usize,
    /// Student steps per cycle.
    pub n_s: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Constant generator learning rate; `lr` when unset.
    pub generator_lr: Option<f64>,
    pub weight_decay: f64,
    /// Set per run rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Evaluate on dev every this many epochs (and always after the last).
    pub eval_every: usize,
    /// Where the retained checkpoint and history go; nothing is saved when unset.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rho: 0.3,
            tau: 1.0,
            temperature: 2.0,
            lambda: 0.5,
            adv_shares_temperature: false,
            n_g: 10,
            n_s: 100,
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            generator_lr: None,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 1,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.n_s == 0 {
            return bad("n_s must be at least 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return bad("epochs, batch_size and eval_every must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if let Some(glr) = self.generator_lr {
            if !(glr > 0.0 && glr.is_finite()) {
                return bad(format!("generator_lr must be positive, got {glr}"));
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        self.loss_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            lambda: self.lambda,
            adv_temperature: if self.adv_shares_temperature {
                self.temperature
            } else {
                1.0
            },
        }
    }

    pub fn perturb_config(&self) -> PerturbConfig {
        PerturbConfig {
            rho: self.rho,
            tau: self.tau,
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Max,
    Min,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    /// The optimized quantity (negated objective for max-steps).
    pub loss: f64,
    pub ce: Option<f64>,
    pub kd: Option<f64>,
    pub adv: Option<f64>,
    pub gen_objective: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: usize,
    pub metric: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Index into `evals` of the retained checkpoint.
    pub best: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Line {
    Step(StepRecord),
    Eval(EvalRecord),
    Best { eval: usize },
}

impl TrainHistory {
    pub fn best_eval(&self) -> Option<&EvalRecord> {
        self.best.map(|i| &self.evals[i])
    }

    pub fn phases(&self) -> Vec<Phase> {
        self.steps.iter().map(|s| s.phase).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = self
            .steps
            .iter()
            .cloned()
            .map(Line::Step)
            .chain(self.evals.iter().cloned().map(Line::Eval))
            .chain(self.best.map(|eval| Line::Best { eval }));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("history records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let mut h = TrainHistory::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match serde_json::from_str(line)? {
                Line::Step(s) => h.steps.push(s),
                Line::Eval(e) => h.evals.push(e),
                Line::Best { eval } => h.best = Some(eval),
            }
        }
        Ok(h)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// A split encoded once up front.
#[derive(Clone, Debug)]
pub struct EncodedSplit {
    pub seqs: Vec<TokenSequence>,
    pub labels: Vec<usize>,
}

impl EncodedSplit {
    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> (Vec<TokenSequence>, Vec<usize>) {
        (
            idx.iter().map(|&i| self.seqs[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// A task tokenized against a fixed vocabulary and sequence length.
#[derive(Clone, Debug)]
pub struct EncodedTask {
    pub name: String,
    pub vocab: Vocabulary,
    pub max_len: usize,
    pub num_classes: usize,
    pub metric: Metric,
    pub train: EncodedSplit,
    pub dev: EncodedSplit,
}

impl EncodedTask {
    pub fn new(task: &TaskData, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        if task.train.is_empty() || task.dev.is_empty() {
            return Err(Error::InvalidArgument(
                "task needs non-empty train and dev splits".into(),
            ));
        }
        let split = |d: &crate::data::Dataset| EncodedSplit {
            seqs: d
                .examples
                .iter()
                .map(|e| encode(e, vocab, max_len))
                .collect(),
            labels: d.examples.iter().map(|e| e.label).collect(),
        };
        Ok(Self {
            name: task.name.clone(),
            vocab: vocab.clone(),
            max_len,
            num_classes: task.num_classes(),
            metric: task.dev.metric.parse()?,
            train: split(&task.train),
            dev: split(&task.dev),
        })
    }

    fn check_model<S: Scalar>(&self, model: &Encoder<S>, head: HeadKind, role: &str) -> Result<()> {
        model.check_vocab(&self.vocab)?;
        if model.head() != head {
            return Err(Error::Config(format!("{role} has the wrong head kind")));
        }
        if model.config().max_len < self.max_len {
            return Err(Error::Config(format!(
                "{role} max_len {} is shorter than the encoded length {}",
                model.config().max_len,
                self.max_len
            )));
        }
        if head == HeadKind::Classifier && model.config().num_classes != self.num_classes {
            return Err(Error::Config(format!(
                "{role} has {} classes, task has {}",
                model.config().num_classes,
                self.num_classes
            )));
        }
        Ok(())
    }
}

const EVAL_CHUNK: usize = 256;

/// Eval-mode class predictions.
pub fn predict<S: Scalar>(model: &Encoder<S>, seqs: &[TokenSequence]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_CHUNK) {
        out.extend(model.logits(chunk)?.argmax_rows());
    }
    Ok(out)
}

/// Dev-split score of a classifier under the task metric.
pub fn dev_score<S: Scalar>(model: &Encoder<S>, task: &EncodedTask) -> Result<f64> {
    let preds: Vec<f64> = predict(model, &task.dev.seqs)?
        .into_iter()
        .map(|p| p as f64)
        .collect();
    let refs: Vec<f64> = task.dev.labels.iter().map(|&y| y as f64).collect();
    task.metric.compute(&preds, &refs)
}

fn teacher_logits_all<S: Scalar>(
    teacher: &Teacher<S>,
    seqs: &[TokenSequence],
) -> Result<Tensor<S>> {
    let c = teacher.num_classes();
    let mut data = Vec::with_capacity(seqs.len() * c);
    for chunk in seqs.chunks(EVAL_CHUNK) {
        data.extend_from_slice(teacher.logits(chunk)?.data());
    }
    Ok(Tensor::from_vec(seqs.len(), c, data))
}

fn rows_of<S: Scalar>(t: &Tensor<S>, idx: &[usize]) -> Tensor<S> {
    let mut out = Tensor::zeros(idx.len(), t.cols());
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).copy_from_slice(t.row(i));
    }
    out
}

/// Independent random streams derived from one seed.
struct Streams {
    shuffle: ChaCha8Rng,
    dropout: ChaCha8Rng,
    mask: ChaCha8Rng,
    noise: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        Self {
            shuffle: stream(1),
            dropout: stream(2),
            mask: stream(3),
            noise: stream(4),
        }
    }

    fn epoch_batches(&mut self, n: usize, batch_size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle);
        order.chunks(batch_size).map(<[usize]>::to_vec).collect()
    }
}

fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

fn is_max_step(pos: usize, n_g: usize, n_s: usize) -> bool {
    pos % (n_g + n_s) < n_g
}

fn finite(step: usize, what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            step,
            what: what.to_string(),
        })
    }
}

/// Tracks the best dev score and keeps a copy of the winning parameters.
struct BestKeeper<S: Scalar> {
    best: Option<(f64, Encoder<S>)>,
}

impl<S: Scalar> BestKeeper<S> {
    fn new() -> Self {
        Self { best: None }
    }

    fn eval(
        &mut self,
        history: &mut TrainHistory,
        model: &Encoder<S>,
        epoch: usize,
        step: usize,
        score: f64,
    ) {
        history.evals.push(EvalRecord {
            epoch,
            step,
            metric: score,
        });
        // Ties keep the earlier checkpoint.
        if self.best.as_ref().is_none_or(|(b, _)| score > *b) {
            self.best = Some((score, model.clone()));
            history.best = Some(history.evals.len() - 1);
        }
    }

    fn finish(self, fallback: Encoder<S>) -> Encoder<S> {
        self.best.map_or(fallback, |(_, m)| m)
    }
}

fn should_eval(epoch: usize, cfg: &TrainConfig) -> bool {
    (epoch + 1).is_multiple_of(cfg.eval_every) || epoch + 1 == cfg.epochs
}

fn save_best<S: Scalar>(
    cfg: &TrainConfig,
    name: &str,
    model: &Encoder<S>,
    vocab: &Vocabulary,
    history: &TrainHistory,
) -> Result<()> {
    if let Some(dir) = &cfg.checkpoint_dir {
        let (step, metric) = history
            .best_eval()
            .map_or((history.steps.len(), None), |e| (e.step, Some(e.metric)));
        save_checkpoint(model, vocab, step, metric, &dir.join(name))?;
        history.write(&dir.join(format!("{name}.history.jsonl")))?;
    }
    Ok(())
}

/// A finished run: the retained (best-dev) model and its history.
#[derive(Clone, Debug)]
pub struct TrainOutcome<S> {
    pub model: Encoder<S>,
    pub history: TrainHistory,
}

/// A finished minimax run.
#[derive(Clone, Debug)]
pub struct MateOutcome<S> {
    pub student: Encoder<S>,
    /// The generator as it stood when training ended.
    pub generator: Encoder<S>,
    pub history: TrainHistory,
}

enum Objective<'a, S> {
    Ce,
    Kd {
        teacher: &'a Tensor<S>,
        loss: LossConfig,
    },
}

fn supervised<S: Scalar>(
    mut model: Encoder<S>,
    task: &EncodedTask,
    cfg: &TrainConfig,
    objective: Objective<'_, S>,
    ckpt_name: &str,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    task.check_model(&model, HeadKind::Classifier, ckpt_name)?;
    let mut rngs = Streams::new(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw(), model.params());
    let total = batches_per_epoch(task.train.len(), cfg.batch_size) * cfg.epochs;
    let mut history = TrainHistory::default();
    let mut keeper = BestKeeper::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for idx in rngs.epoch_batches(task.train.len(), cfg.batch_size) {
            let lr = lr_schedule(step, total, cfg.lr)?;
            let (seqs, labels) = task.train.gather(&idx);
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g, true);
            let logits = model.forward(
                &mut g,
                &bound,
                EncoderInput::Hard(&seqs),
                Some(&mut rngs.dropout),
            )?;
            let ce = lg::ce(&mut g, logits, &labels)?;
            let (root, kd) = match &objective {
                Objective::Ce => (ce, None),
                Objective::Kd { teacher, loss } => {
                    let t = rows_of(teacher, &idx);
                    let kd = lg::kl_from_teacher(&mut g, &t, logits, loss.temperature)?;
                    (lg::kd_baseline(&mut g, ce, kd, loss.lambda), Some(kd))
                }
            };
            let value = finite(step, "training loss", g.value(root).scalar().f64())?;
            let mut grads = g.backward(root);
            let grads = model.params().collect_grads(&mut grads, &bound);
            opt.step(model.params_mut(), &grads, lr);
            history.steps.push(StepRecord {
                step,
                phase: Phase::Min,
                loss: value,
                ce: Some(g.value(ce).scalar().f64()),
                kd: kd.map(|k| g.value(k).scalar().f64()),
                adv: None,
                gen_objective: None,
                lr,
            });
            step += 1;
        }
        if should_eval(epoch, cfg) {
            keeper.eval(&mut history, &model, epoch, step, dev_score(&model, task)?);
        }
    }
    let model = keeper.finish(model);
    save_best(cfg, ckpt_name, &model, &task.vocab, &history)?;
    Ok(TrainOutcome { model, history })
}

/// Trains a classifier with cross-entropy only and wraps the best-dev
/// checkpoint as a frozen teacher.
pub fn pretrain_teacher<S: Scalar>(
    model: Encoder<S>,
    task: &EncodedTask,
    cfg: &TrainConfig,
) -> Result<(Teacher<S>, TrainHistory)> {
    let out = supervised(model, task, cfg, Objective::Ce, "teacher")?;
    Ok((Teacher::new(out.model)?, out.history))
}

/// Cross-entropy-only training of a student (the no-teacher reference).
pub fn train_ce<S: Scalar>(
    student: Encoder<S>,
    task: &EncodedTask,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    supervised(student, task, cfg, Objective::Ce, "student")
}

/// `(1 − λ)·CE + λ·KD` against a frozen teacher.
pub fn train_kd_baseline<S: Scalar>(
    teacher: &Teacher<S>,
    student: Encoder<S>,
    task: &EncodedTask,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    check_teacher(teacher, task)?;
    let t = teacher_logits_all(teacher, &task.train.seqs)?;
    supervised(
        student,
        task,
        cfg,
        Objective::Kd {
            teacher: &t,
            loss: cfg.loss_config(),
        },
        "student",
    )
}

fn check_teacher<S: Scalar>(teacher: &Teacher<S>, task: &EncodedTask) -> Result<()> {
    task.check_model(teacher.encoder(), HeadKind::Classifier, "teacher")
}

/// Mean masked-position cross-entropy of one generator batch.
fn mlm_loss<S: Scalar>(
    g: &mut Graph<S>,
    generator: &Encoder<S>,
    bound: &[crate::autograd::NodeId],
    seqs: &[TokenSequence],
    rho: f64,
    mask_rng: &mut ChaCha8Rng,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Option<crate::autograd::NodeId>> {
    let len = seqs.first().map_or(0, TokenSequence::len);
    let mut masked = Vec::with_capacity(seqs.len());
    let mut plans = Vec::with_capacity(seqs.len());
    for s in seqs {
        let (m, p) = mask_tokens(s, rho, mask_rng)?;
        masked.push(m);
        plans.push(p);
    }
    let flat = flat_positions(&plans, len);
    if flat.is_empty() {
        return Ok(None);
    }
    let targets: Vec<usize> = flat.iter().map(|&f| seqs[f / len].ids[f % len]).collect();
    let logits = generator.forward(g, bound, EncoderInput::Hard(&masked), dropout_rng)?;
    let at_mask = g.select_rows(logits, &flat);
    Ok(Some(lg::ce(g, at_mask, &targets)?))
}

/// Fraction of masked positions whose original token is the generator's
/// top non-special prediction.
pub fn mlm_recovery_accuracy<S: Scalar>(
    generator: &Encoder<S>,
    seqs: &[TokenSequence],
    rho: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let len = chunk[0].len();
        let mut masked = Vec::with_capacity(chunk.len());
        let mut plans = Vec::with_capacity(chunk.len());
        for s in chunk {
            let (m, p) = mask_tokens(s, rho, &mut rng)?;
            masked.push(m);
            plans.push(p);
        }
        let logits = generator.logits(&masked)?;
        for f in flat_positions(&plans, len) {
            let row = &logits.row(f)[NUM_SPECIALS..];
            let guess = crate::tensor::argmax(row) + NUM_SPECIALS;
            hit += usize::from(guess == chunk[f / len].ids[f % len]);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::InvalidArgument(
            "no maskable positions to score".into(),
        ));
    }
    Ok(hit as f64 / total as f64)
}

/// Trains a masked-LM generator to reconstruct masked training tokens.
/// The retained checkpoint maximizes dev recovery accuracy.
pub fn pretrain_generator_mlm<S: Scalar>(
    mut generator: Encoder<S>,
    task: &EncodedTask,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    task.check_model(&generator, HeadKind::MaskedLm, "generator")?;
    if cfg.rho == 0.0 {
        return Err(Error::Config("generator pretraining needs rho > 0".into()));
    }
    let mut rngs = Streams::new(cfg.seed);
    let mut opt = AdamW::new(cfg.adamw(), generator.params());
    let total = batches_per_epoch(task.train.len(), cfg.batch_size) * cfg.epochs;
    let mut history = TrainHistory::default();
    let mut keeper = BestKeeper::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for idx in rngs.epoch_batches(task.train.len(), cfg.batch_size) {
            let lr = lr_schedule(step, total, cfg.lr)?;
            let (seqs, _) = task.train.gather(&idx);
            let mut g = Graph::new();
            let bound = generator.params().bind(&mut g, true);
            let Some(loss) = mlm_loss(
                &mut g,
                &generator,
                &bound,
                &seqs,
                cfg.rho,
                &mut rngs.mask,
                Some(&mut rngs.dropout),
            )?
            else {
                continue;
            };
            let value = finite(step, "masked-LM loss", g.value(loss).scalar().f64())?;
            let mut grads = g.backward(loss);
            let grads = generator.params().collect_grads(&mut grads, &bound);
            opt.step(generator.params_mut(), &grads, lr);
            history.steps.push(StepRecord {
                step,
                phase: Phase::Min,
                loss: value,
                ce: Some(value),
                kd: None,
                adv: None,
                gen_objective: None,
                lr,
            });
            step += 1;
        }
        if should_eval(epoch, cfg) {
            let score = mlm_recovery_accuracy(&generator, &task.dev.seqs, cfg.rho, cfg.seed)?;
            keeper.eval(&mut history, &generator, epoch, step, score);
        }
    }
    let generator = keeper.finish(generator);
    save_best(cfg, "generator", &generator, &task.vocab, &history)?;
    Ok(TrainOutcome {
        model: generator,
        history,
    })
}

/// What an observer sees after each minimax step.
pub struct StepView<'a, S> {
    pub record: &'a StepRecord,
    pub student: &'a Encoder<S>,
    pub generator: &'a Encoder<S>,
}

/// State shared by maximization and minimization steps.
struct Minimax<'a, S: Scalar> {
    teacher: &'a Teacher<S>,
    task: &'a EncodedTask,
    cfg: &'a TrainConfig,
    loss: LossConfig,
    student: Encoder<S>,
    generator: Encoder<S>,
    student_opt: AdamW<S>,
    generator_opt: AdamW<S>,
    teacher_train: Tensor<S>,
    rngs: Streams,
}

impl<'a, S: Scalar> Minimax<'a, S> {
    fn new(
        teacher: &'a Teacher<S>,
        student: Encoder<S>,
        generator: Encoder<S>,
        task: &'a EncodedTask,
        cfg: &'a TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        check_teacher(teacher, task)?;
        task.check_model(&student, HeadKind::Classifier, "student")?;
        task.check_model(&generator, HeadKind::MaskedLm, "generator")?;
        Ok(Self {
            teacher,
            task,
            cfg,
            loss: cfg.loss_config(),
            student_opt: AdamW::new(cfg.adamw(), student.params()),
            generator_opt: AdamW::new(cfg.adamw(), generator.params()),
            teacher_train: teacher_logits_all(teacher, &task.train.seqs)?,
            student,
            generator,
            rngs: Streams::new(cfg.seed),
        })
    }

    /// One generator update on `−KL(teacher ‖ student)` over fresh pseudo
    /// samples. The student runs in eval mode with constant parameters.
    fn max_step(&mut self, idx: &[usize], step: usize, update: bool) -> Result<StepRecord> {
        let (seqs, _) = self.task.train.gather(idx);
        let mut g = Graph::new();
        let gen_bound = self.generator.params().bind(&mut g, true);
        let pb = generate_pseudo(
            &mut g,
            &self.generator,
            &gen_bound,
            &seqs,
            self.cfg.perturb_config(),
            &mut self.rngs.mask,
            &mut self.rngs.noise,
            Some(&mut self.rngs.dropout),
        )?;
        let t_adv = self.teacher.logits(&pb.hard)?;
        let stu_bound = self.student.params().bind(&mut g, false);
        let s_adv = self.student.forward(
            &mut g,
            &stu_bound,
            EncoderInput::Relaxed {
                rows: pb.rows,
                layout: &pb.hard,
            },
            None,
        )?;
        let obj = lg::kl_from_teacher(&mut g, &t_adv, s_adv, self.loss.adv_temperature)?;
        let neg = g.scale(obj, -S::one());
        let value = finite(step, "generator objective", g.value(obj).scalar().f64())?;
        let lr = self.cfg.generator_lr.unwrap_or(self.cfg.lr);
        if update {
            let mut grads = g.backward(neg);
            let grads = self
                .generator
                .params()
                .collect_grads(&mut grads, &gen_bound);
            self.generator_opt
                .step(self.generator.params_mut(), &grads, lr);
        }
        Ok(StepRecord {
            step,
            phase: Phase::Max,
            loss: -value,
            ce: None,
            kd: None,
            adv: None,
            gen_objective: Some(value),
            lr,
        })
    }

    /// One student update on `(CE + KD + ADV) / 3`. The generator runs in
    /// eval mode on its own graph, so nothing flows back into it.
    fn min_step(&mut self, idx: &[usize], step: usize, lr: f64) -> Result<StepRecord> {
        let (seqs, labels) = self.task.train.gather(idx);
        let hard = {
            let mut gg = Graph::new();
            let gen_bound = self.generator.params().bind(&mut gg, false);
            generate_pseudo(
                &mut gg,
                &self.generator,
                &gen_bound,
                &seqs,
                self.cfg.perturb_config(),
                &mut self.rngs.mask,
                &mut self.rngs.noise,
                None,
            )?
            .hard
        };
        let t_orig = rows_of(&self.teacher_train, idx);
        let t_adv = self.teacher.logits(&hard)?;
        let b = seqs.len();
        let mut both = seqs;
        both.extend(hard);
        let mut g = Graph::new();
        let bound = self.student.params().bind(&mut g, true);
        let logits = self.student.forward(
            &mut g,
            &bound,
            EncoderInput::Hard(&both),
            Some(&mut self.rngs.dropout),
        )?;
        let orig_rows: Vec<usize> = (0..b).collect();
        let adv_rows: Vec<usize> = (b..2 * b).collect();
        let s_orig = g.select_rows(logits, &orig_rows);
        let s_adv = g.select_rows(logits, &adv_rows);
        let ce = lg::ce(&mut g, s_orig, &labels)?;
        let kd = lg::kl_from_teacher(&mut g, &t_orig, s_orig, self.loss.temperature)?;
        let adv = lg::kl_from_teacher(&mut g, &t_adv, s_adv, self.loss.adv_temperature)?;
        let loss = lg::mate_kd(&mut g, ce, kd, adv);
        let value = finite(step, "student loss", g.value(loss).scalar().f64())?;
        let mut grads = g.backward(loss);
        let grads = self.student.params().collect_grads(&mut grads, &bound);
        self.student_opt.step(self.student.params_mut(), &grads, lr);
        let v = |n| g.value(n).scalar().f64();
        Ok(StepRecord {
            step,
            phase: Phase::Min,
            loss: value,
            ce: Some(v(ce)),
            kd: Some(v(kd)),
            adv: Some(v(adv)),
            gen_objective: None,
            lr,
        })
    }
}

/// Number of student updates the minimax loop will perform.
pub fn minimax_student_steps(n_train: usize, cfg: &TrainConfig) -> usize {
    let batches = batches_per_epoch(n_train, cfg.batch_size) * cfg.epochs;
    (0..batches)
        .filter(|&i| !is_max_step(i, cfg.n_g, cfg.n_s))
        .count()
}

/// The adversarial minimax loop. With `n_g = 0` the generator stays at
/// its initial weights while its pseudo samples still feed the loss.
pub fn train_mate_kd<S: Scalar>(
    teacher: &Teacher<S>,
    student: Encoder<S>,
    generator: Encoder<S>,
    task: &EncodedTask,
    cfg: &TrainConfig,
) -> Result<MateOutcome<S>> {
    train_mate_kd_observed(teacher, student, generator, task, cfg, |_| {})
}

/// [`train_mate_kd`] with a callback after every step.
pub fn train_mate_kd_observed<S: Scalar>(
    teacher: &Teacher<S>,
    student: Encoder<S>,
    generator: Encoder<S>,
    task: &EncodedTask,
    cfg: &TrainConfig,
    mut observe: impl FnMut(StepView<'_, S>),
) -> Result<MateOutcome<S>> {
    let mut mm = Minimax::new(teacher, student, generator, task, cfg)?;
    let total = minimax_student_steps(task.train.len(), cfg);
    let mut history = TrainHistory::default();
    let mut keeper = BestKeeper::new();
    let (mut step, mut student_step) = (0, 0);
    for epoch in 0..cfg.epochs {
        let batches = mm.rngs.epoch_batches(task.train.len(), cfg.batch_size);
        for idx in &batches {
            let record = if is_max_step(step, cfg.n_g, cfg.n_s) {
                mm.max_step(idx, step, true)?
            } else {
                let lr = lr_schedule(student_step, total, cfg.lr)?;
                student_step += 1;
                mm.min_step(idx, step, lr)?
            };
            observe(StepView {
                record: &record,
                student: &mm.student,
                generator: &mm.generator,
            });
            history.steps.push(record);
            step += 1;
        }
        if should_eval(epoch, cfg) {
            keeper.eval(
                &mut history,
                &mm.student,
                epoch,
                step,
                dev_score(&mm.student, task)?,
            );
        }
    }
    let student = keeper.finish(mm.student);
    save_best(cfg, "student", &student, &task.vocab, &history)?;
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(
            &mm.generator,
            &task.vocab,
            step,
            None,
            &dir.join("generator-adv"),
        )?;
    }
    Ok(MateOutcome {
        student,
        generator: mm.generator,
        history,
    })
}

/// Runs `steps` consecutive maximization steps against a student that is
/// never updated, returning the generator objective of each step.
pub fn generator_ascent<S: Scalar>(
    teacher: &Teacher<S>,
    student: Encoder<S>,
    generator: Encoder<S>,
    task: &EncodedTask,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<f64>> {
    let mut mm = Minimax::new(teacher, student, generator, task, cfg)?;
    let mut out = Vec::with_capacity(steps);
    while out.len() < steps {
        for idx in mm.rngs.epoch_batches(task.train.len(), cfg.batch_size) {
            if out.len() == steps {
                break;
            }
            let rec = mm.max_step(&idx, out.len(), true)?;
            out.push(rec.gen_objective.expect("max-steps record the objective"));
        }
    }
    Ok(out)
}
