#![allow(dead_code)]

use mate_kd::models::{Encoder, EncoderConfig, HeadKind, Teacher};
use mate_kd::scalar::Scalar;
use mate_kd::synthetic::{make_synthetic_task, SyntheticSpec};
use mate_kd::trainer::{pretrain_generator_mlm, pretrain_teacher, EncodedTask, TrainConfig};
use mate_kd::vocab::{build_vocab, NUM_SPECIALS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TASK_SEED: u64 = 0;
pub const TEACHER_INIT: u64 = 100;
pub const GENERATOR_INIT: u64 = 200;
pub const STUDENT_INIT: u64 = 1000;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Keyword-majority task with the full vocabulary kept.
pub fn synthetic_task(n_train: usize, n_dev: usize, seed: u64) -> EncodedTask {
    let spec = SyntheticSpec {
        n_train,
        n_dev,
        ..SyntheticSpec::default()
    };
    let task = make_synthetic_task(&spec, seed).unwrap();
    let texts: Vec<&str> = task.train.texts().collect();
    let vocab = build_vocab(&texts, spec.vocab_content_size + NUM_SPECIALS).unwrap();
    EncodedTask::new(&task, &vocab, spec.encoded_len()).unwrap()
}

pub fn desk_task() -> EncodedTask {
    let spec = SyntheticSpec::default();
    synthetic_task(spec.n_train, spec.n_dev, TASK_SEED)
}

pub fn teacher_model<S: Scalar>(task: &EncodedTask, seed: u64) -> Encoder<S> {
    let cfg = EncoderConfig::teacher(task.vocab.len(), task.max_len, task.num_classes);
    Encoder::new(cfg, HeadKind::Classifier, &mut rng(seed)).unwrap()
}

pub fn student_model<S: Scalar>(task: &EncodedTask, seed: u64) -> Encoder<S> {
    let cfg = EncoderConfig::student(task.vocab.len(), task.max_len, task.num_classes);
    Encoder::new(cfg, HeadKind::Classifier, &mut rng(seed)).unwrap()
}

pub fn generator_model<S: Scalar>(task: &EncodedTask, seed: u64) -> Encoder<S> {
    let cfg = EncoderConfig::generator(task.vocab.len(), task.max_len);
    Encoder::new(cfg, HeadKind::MaskedLm, &mut rng(seed)).unwrap()
}

/// One layer, width 16: for tests that only need the plumbing.
pub fn tiny_model<S: Scalar>(task: &EncodedTask, head: HeadKind, seed: u64) -> Encoder<S> {
    let cfg = EncoderConfig {
        num_layers: 1,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: task.vocab.len(),
        max_len: task.max_len,
        num_classes: if head == HeadKind::MaskedLm {
            1
        } else {
            task.num_classes
        },
        dropout: 0.1,
    };
    Encoder::new(cfg, head, &mut rng(seed)).unwrap()
}

pub fn pretrain_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

/// Pretrained teacher and generator on the default synthetic task.
pub struct Desk {
    pub task: EncodedTask,
    pub teacher: Teacher<f32>,
    pub generator: Encoder<f32>,
    pub teacher_dev: f64,
    pub generator_recovery: f64,
}

impl Desk {
    pub fn build() -> Self {
        let task = desk_task();
        let (teacher, th) = pretrain_teacher(
            teacher_model(&task, TEACHER_INIT),
            &task,
            &pretrain_config(10),
        )
        .unwrap();
        let gen = pretrain_generator_mlm(
            generator_model(&task, GENERATOR_INIT),
            &task,
            &pretrain_config(10),
        )
        .unwrap();
        Self {
            teacher_dev: th.best_eval().unwrap().metric,
            generator_recovery: gen.history.best_eval().unwrap().metric,
            generator: gen.model,
            teacher,
            task,
        }
    }

    pub fn student(&self, seed: u64) -> Encoder<f32> {
        student_model(&self.task, STUDENT_INIT + seed)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    mate_kd::evalsuite::median(xs)
}
