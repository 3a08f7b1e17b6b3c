//! Command-line entry points. Every subcommand writes `manifest.toml`
//! into its `--out` directory before producing anything else.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, ScalarKind};
use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::evalsuite::{dump_generated, evaluate, run_ablation, sweep_rho, Metric, MetricsReport};
use crate::models::{load_checkpoint, Encoder, HeadKind, Teacher};
use crate::scalar::Scalar;
use crate::synthetic::make_synthetic_task;
use crate::trainer::{
    mlm_recovery_accuracy, pretrain_generator_mlm, pretrain_teacher, train_kd_baseline,
    train_mate_kd, EncodedTask,
};
use crate::vocab::{build_vocab, Vocabulary};

#[derive(Debug, Parser)]
#[command(
    name = "mate-kd",
    version,
    about = "Adversarial masked-LM distillation at desk scale"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed; shorthand for `--override seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory for every artifact of the run.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dotted-path config override, e.g. `trainer.rho=0.4`. Repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic task and its vocabulary.
    MakeData,
    /// Train the teacher with cross-entropy.
    PretrainTeacher(DataArgs),
    /// Train the masked-LM generator on the training texts.
    PretrainGenerator(DataArgs),
    /// Train a student with the KD baseline objective.
    TrainKd(TeacherArgs),
    /// Train a student with the adversarial minimax loop.
    TrainMateKd(PipelineArgs),
    /// Run the three-way ablation over `eval.seeds`.
    Ablate(PipelineArgs),
    /// Sweep the masking probability over `eval.rho_values`.
    SweepRho(PipelineArgs),
    /// Score a classifier checkpoint.
    Evaluate(EvaluateArgs),
    /// Write generated pseudo samples next to their originals.
    DumpSamples(DumpArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory with train.tsv, dev.tsv and optionally vocab.txt.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct TeacherArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Teacher checkpoint stem (path without extension).
    #[arg(long, value_name = "STEM")]
    pub teacher: PathBuf,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub base: TeacherArgs,
    /// Generator checkpoint stem.
    #[arg(long, value_name = "STEM")]
    pub generator: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Classifier checkpoint stem.
    #[arg(long, value_name = "STEM")]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Number of rows; `eval.dump_n` when omitted.
    #[arg(long)]
    pub n: Option<usize>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MakeData => "make-data",
            Command::PretrainTeacher(_) => "pretrain-teacher",
            Command::PretrainGenerator(_) => "pretrain-generator",
            Command::TrainKd(_) => "train-kd",
            Command::TrainMateKd(_) => "train-mate-kd",
            Command::Ablate(_) => "ablate",
            Command::SweepRho(_) => "sweep-rho",
            Command::Evaluate(_) => "evaluate",
            Command::DumpSamples(_) => "dump-samples",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub source_revision: String,
    pub output_dir: PathBuf,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    /// `ok`, or the error that ended the run.
    pub status: Option<String>,
    pub config: toml::Table,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.toml";

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(Self::FILE);
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(Self::FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: p,
            msg: e.to_string(),
        })
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Parses `args` (program name first) and runs the command, returning
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let raw: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match run(&cli, raw) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

pub fn run(cli: &Cli, raw_args: Vec<String>) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = Config::load(cli.config.as_deref(), &overrides)?;
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out DIR is required".into()))?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut manifest = RunManifest {
        command: cli.command.name().to_string(),
        args: raw_args,
        config_path: cli.config.clone(),
        seed: cfg.seed,
        source_revision: concat!("mate-kd ", env!("CARGO_PKG_VERSION")).to_string(),
        output_dir: out.clone(),
        started_unix: unix_now(),
        finished_unix: None,
        status: None,
        config: cfg.to_table(),
    };
    manifest.write(&out)?;
    let result = match cfg.models.scalar {
        ScalarKind::F32 => dispatch::<f32>(&cli.command, &cfg, &out),
        ScalarKind::F64 => dispatch::<f64>(&cli.command, &cfg, &out),
    };
    manifest.finished_unix = Some(unix_now());
    manifest.status = Some(match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => e.to_string(),
    });
    manifest.write(&out)?;
    result
}

const TEACHER_INIT: u64 = 101;
const STUDENT_INIT: u64 = 102;
const GENERATOR_INIT: u64 = 103;

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Loads a task directory. The vocabulary comes from `vocab.txt` when the
/// directory has one and is built from the training texts otherwise.
fn load_task(dir: &Path, cfg: &Config) -> Result<EncodedTask> {
    let name = dir
        .file_name()
        .map_or("task".to_string(), |n| n.to_string_lossy().into_owned());
    let task = TaskData::load_dir(dir, &name, &cfg.data.columns, &cfg.data.metric)?;
    let vocab_path = dir.join("vocab.txt");
    let vocab = if vocab_path.exists() {
        Vocabulary::load(&vocab_path)?
    } else {
        let texts: Vec<&str> = task.train.texts().collect();
        build_vocab(&texts, cfg.data.max_vocab)?
    };
    let max_len = cfg.data.max_len.unwrap_or_else(|| natural_len(&task));
    EncodedTask::new(&task, &vocab, max_len)
}

/// Longest untruncated encoding over both splits.
fn natural_len(task: &TaskData) -> usize {
    task.train
        .examples
        .iter()
        .chain(&task.dev.examples)
        .map(|e| {
            let a = e.text_a.split_whitespace().count();
            match &e.text_b {
                Some(b) => a + b.split_whitespace().count() + 3,
                None => a + 2,
            }
        })
        .max()
        .unwrap_or(0)
        .max(4)
}

fn new_student<S: Scalar>(cfg: &Config, task: &EncodedTask, seed: u64) -> Result<Encoder<S>> {
    let c = cfg
        .models
        .student
        .encoder(task.vocab.len(), task.max_len, task.num_classes);
    Encoder::new(c, HeadKind::Classifier, &mut init_rng(seed, STUDENT_INIT))
}

fn load_teacher<S: Scalar>(stem: &Path, task: &EncodedTask) -> Result<Teacher<S>> {
    Teacher::new(load_checkpoint::<S>(stem, &task.vocab)?.0)
}

fn load_generator<S: Scalar>(stem: &Path, task: &EncodedTask) -> Result<Encoder<S>> {
    let (g, _) = load_checkpoint::<S>(stem, &task.vocab)?;
    if g.head() != HeadKind::MaskedLm {
        return Err(Error::CheckpointMismatch(format!(
            "{} is not a masked-LM checkpoint",
            stem.display()
        )));
    }
    Ok(g)
}

fn finish_report(report: &MetricsReport, out: &Path) -> Result<()> {
    report.write(&out.join("report.toml"))?;
    println!(
        "{} {} {} = {:.4}",
        report.task, report.split, report.metric, report.value
    );
    Ok(())
}

fn dispatch<S: Scalar>(command: &Command, cfg: &Config, out: &Path) -> Result<()> {
    let started = Instant::now();
    let snapshot = cfg.to_table();
    match command {
        Command::MakeData => {
            let task = make_synthetic_task(&cfg.data.synthetic, cfg.seed)?;
            task.write_dir(out)?;
            let texts: Vec<&str> = task.train.texts().collect();
            build_vocab(&texts, cfg.data.max_vocab)?.save(&out.join("vocab.txt"))?;
            println!(
                "wrote {} train / {} dev examples to {}",
                task.train.len(),
                task.dev.len(),
                out.display()
            );
        }
        Command::PretrainTeacher(a) => {
            let task = load_task(&a.data, cfg)?;
            let c = cfg
                .models
                .teacher
                .encoder(task.vocab.len(), task.max_len, task.num_classes);
            let model = Encoder::<S>::new(
                c,
                HeadKind::Classifier,
                &mut init_rng(cfg.seed, TEACHER_INIT),
            )?;
            let (teacher, _) = pretrain_teacher(model, &task, &cfg.stage(&cfg.teacher, Some(out)))?;
            finish_report(
                &evaluate(teacher.encoder(), &task, "dev", cfg.seed, snapshot)?,
                out,
            )?;
        }
        Command::PretrainGenerator(a) => {
            let task = load_task(&a.data, cfg)?;
            let c = cfg
                .models
                .generator
                .encoder(task.vocab.len(), task.max_len, 1);
            let model = Encoder::<S>::new(
                c,
                HeadKind::MaskedLm,
                &mut init_rng(cfg.seed, GENERATOR_INIT),
            )?;
            let stage = cfg.stage(&cfg.generator, Some(out));
            let trained = pretrain_generator_mlm(model, &task, &stage)?;
            let value = mlm_recovery_accuracy(&trained.model, &task.dev.seqs, stage.rho, cfg.seed)?;
            let report = MetricsReport {
                task: format!("{}-masked-lm", task.name),
                split: "dev".into(),
                metric: Metric::Accuracy,
                value,
                seed: cfg.seed,
                runtime_seconds: started.elapsed().as_secs_f64(),
                config: snapshot,
            };
            finish_report(&report, out)?;
        }
        Command::TrainKd(a) => {
            let task = load_task(&a.data.data, cfg)?;
            let teacher = load_teacher::<S>(&a.teacher, &task)?;
            let student = new_student::<S>(cfg, &task, cfg.seed)?;
            let trained = train_kd_baseline(
                &teacher,
                student,
                &task,
                &cfg.stage(&cfg.trainer, Some(out)),
            )?;
            finish_report(
                &evaluate(&trained.model, &task, "dev", cfg.seed, snapshot)?,
                out,
            )?;
        }
        Command::TrainMateKd(a) => {
            let task = load_task(&a.base.data.data, cfg)?;
            let teacher = load_teacher::<S>(&a.base.teacher, &task)?;
            let generator = load_generator::<S>(&a.generator, &task)?;
            let student = new_student::<S>(cfg, &task, cfg.seed)?;
            let trained = train_mate_kd(
                &teacher,
                student,
                generator,
                &task,
                &cfg.stage(&cfg.trainer, Some(out)),
            )?;
            finish_report(
                &evaluate(&trained.student, &task, "dev", cfg.seed, snapshot)?,
                out,
            )?;
        }
        Command::Ablate(a) => {
            let task = load_task(&a.base.data.data, cfg)?;
            let teacher = load_teacher::<S>(&a.base.teacher, &task)?;
            let generator = load_generator::<S>(&a.generator, &task)?;
            let result = run_ablation(
                &teacher,
                &generator,
                |seed| new_student::<S>(cfg, &task, seed),
                &task,
                &cfg.stage(&cfg.trainer, None),
                &cfg.eval.seeds,
            )?;
            let table = result.table();
            table.write(&out.join("ablation"))?;
            print!("{}", table.to_text());
        }
        Command::SweepRho(a) => {
            let task = load_task(&a.base.data.data, cfg)?;
            let teacher = load_teacher::<S>(&a.base.teacher, &task)?;
            let generator = load_generator::<S>(&a.generator, &task)?;
            let result = sweep_rho(
                &teacher,
                &generator,
                |seed| new_student::<S>(cfg, &task, seed),
                &task,
                &cfg.stage(&cfg.trainer, None),
                &cfg.eval.rho_values,
                &cfg.eval.seeds,
            )?;
            let table = result.table();
            table.write(&out.join("sweep"))?;
            print!("{}", table.to_text());
        }
        Command::Evaluate(a) => {
            let task = load_task(&a.data.data, cfg)?;
            let (model, _) = load_checkpoint::<S>(&a.model, &task.vocab)?;
            finish_report(
                &evaluate(&model, &task, &cfg.eval.split, cfg.seed, snapshot)?,
                out,
            )?;
        }
        Command::DumpSamples(a) => {
            let p = &a.pipeline;
            let task = load_task(&p.base.data.data, cfg)?;
            let teacher = load_teacher::<S>(&p.base.teacher, &task)?;
            let generator = load_generator::<S>(&p.generator, &task)?;
            let source = match cfg.eval.split.as_str() {
                "train" => &task.train.seqs,
                "dev" => &task.dev.seqs,
                other => {
                    return Err(Error::Config(format!(
                        "eval.split must be train or dev, got {other:?}"
                    )))
                }
            };
            let n = a.n.unwrap_or(cfg.eval.dump_n);
            let path = out.join("samples.tsv");
            let rows = dump_generated(
                &generator,
                &teacher,
                &task,
                source,
                &cfg.trainer,
                n,
                cfg.seed,
                &path,
            )?;
            println!("wrote {} samples to {}", rows.len(), path.display());
        }
    }
    Ok(())
}
