//! Metrics, reports, the three-way ablation, the masking-rate sweep and
//! pseudo-sample dumps.

mod metrics;

pub use metrics::{compute_metric, Metric};

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::models::{Encoder, HeadKind, Teacher};
use crate::perturb::generate_pseudo;
use crate::scalar::Scalar;
use crate::trainer::{
    predict, train_kd_baseline, train_mate_kd, EncodedSplit, EncodedTask, TrainConfig, TrainHistory,
};
use crate::vocab::{decode, TokenSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub split: String,
    pub metric: Metric,
    pub value: f64,
    pub seed: u64,
    pub runtime_seconds: f64,
    /// Resolved configuration the model was produced with.
    pub config: toml::Table,
}

impl MetricsReport {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("reports serialize")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

fn split_of<'a>(task: &'a EncodedTask, split: &str) -> Result<&'a EncodedSplit> {
    match split {
        "train" => Ok(&task.train),
        "dev" => Ok(&task.dev),
        other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
    }
}

/// Scores a classifier in eval mode on one split under the task metric.
pub fn evaluate<S: Scalar>(
    model: &Encoder<S>,
    task: &EncodedTask,
    split: &str,
    seed: u64,
    config: toml::Table,
) -> Result<MetricsReport> {
    let start = Instant::now();
    if model.head() != HeadKind::Classifier {
        return Err(Error::Config("only classifiers can be evaluated".into()));
    }
    model.check_vocab(&task.vocab)?;
    let data = split_of(task, split)?;
    let preds: Vec<f64> = predict(model, &data.seqs)?
        .into_iter()
        .map(|p| p as f64)
        .collect();
    let refs: Vec<f64> = data.labels.iter().map(|&y| y as f64).collect();
    let value = task.metric.compute(&preds, &refs)?;
    Ok(MetricsReport {
        task: task.name.clone(),
        split: split.to_string(),
        metric: task.metric,
        value,
        seed,
        runtime_seconds: start.elapsed().as_secs_f64(),
        config,
    })
}

/// A rectangular table emitted as aligned text or CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_text(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| {
                std::iter::once(&self.header)
                    .chain(&self.rows)
                    .map(|r| r[c].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |r: &[String]| {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, &w))| {
                    if i == 0 {
                        format!("{s:<w$}")
                    } else {
                        format!("{s:>w$}")
                    }
                })
                .collect();
            cells.join("  ").trim_end().to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(
            &"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)),
        );
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
    }

    /// Writes `<stem>.txt` and `<stem>.csv`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        for (ext, text) in [("txt", self.to_text()), ("csv", self.to_csv())] {
            let p = stem.with_extension(ext);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn fmt_score(x: f64) -> String {
    format!("{x:.4}")
}

/// Median with the two middle values averaged for even counts.
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "median of nothing");
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Generator trained adversarially.
    Full,
    /// Generator frozen at its masked-LM weights; pseudo samples still used.
    NoAdv,
    /// No generator: the KD baseline.
    NoGen,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoAdv, Variant::NoGen];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "MATE-KD",
            Variant::NoAdv => "- Adv train",
            Variant::NoGen => "- Generator",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub score: f64,
    pub history: TrainHistory,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub metric: Metric,
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
}

impl AblationResult {
    pub fn scores(&self, variant: Variant) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.score)
            .collect()
    }

    pub fn median(&self, variant: Variant) -> f64 {
        median(&self.scores(variant))
    }

    pub fn run(&self, variant: Variant, seed: u64) -> Option<&AblationRun> {
        self.runs
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn table(&self) -> Table {
        let mut header = vec!["variant".to_string()];
        header.extend(self.seeds.iter().map(|s| format!("seed {s}")));
        header.push(format!("median {}", self.metric));
        let rows = Variant::ALL
            .iter()
            .map(|&v| {
                let mut row = vec![v.label().to_string()];
                row.extend(self.scores(v).into_iter().map(fmt_score));
                row.push(fmt_score(self.median(v)));
                row
            })
            .collect();
        Table { header, rows }
    }
}

/// One run of `variant` with the given seed. The student comes fresh from
/// `make_student(seed)`, so paired runs share their initialization.
pub fn run_variant<S: Scalar>(
    variant: Variant,
    teacher: &Teacher<S>,
    generator: &Encoder<S>,
    student: Encoder<S>,
    task: &EncodedTask,
    cfg: &TrainConfig,
) -> Result<(Encoder<S>, TrainHistory)> {
    match variant {
        Variant::Full => {
            let out = train_mate_kd(teacher, student, generator.clone(), task, cfg)?;
            Ok((out.student, out.history))
        }
        Variant::NoAdv => {
            let frozen = TrainConfig {
                n_g: 0,
                ..cfg.clone()
            };
            let out = train_mate_kd(teacher, student, generator.clone(), task, &frozen)?;
            Ok((out.student, out.history))
        }
        Variant::NoGen => {
            let out = train_kd_baseline(teacher, student, task, cfg)?;
            Ok((out.model, out.history))
        }
    }
}

/// Runs every variant once per seed. Checkpointing is disabled for the
/// individual runs.
pub fn run_ablation<S: Scalar>(
    teacher: &Teacher<S>,
    generator: &Encoder<S>,
    make_student: impl Fn(u64) -> Result<Encoder<S>>,
    task: &EncodedTask,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "ablation needs at least one seed".into(),
        ));
    }
    let mut runs = Vec::with_capacity(3 * seeds.len());
    for &variant in &Variant::ALL {
        for &seed in seeds {
            let run_cfg = TrainConfig {
                seed,
                checkpoint_dir: None,
                ..cfg.clone()
            };
            let (_, history) = run_variant(
                variant,
                teacher,
                generator,
                make_student(seed)?,
                task,
                &run_cfg,
            )?;
            let score = history
                .best_eval()
                .map(|e| e.metric)
                .expect("every run evaluates at least once");
            runs.push(AblationRun {
                variant,
                seed,
                score,
                history,
            });
        }
    }
    Ok(AblationResult {
        metric: task.metric,
        seeds: seeds.to_vec(),
        runs,
    })
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub metric: Metric,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `scores[i][j]`: seed `i`, value `j`.
    pub scores: Vec<Vec<f64>>,
}

impl SweepResult {
    pub fn medians(&self) -> Vec<f64> {
        (0..self.values.len())
            .map(|j| median(&self.scores.iter().map(|r| r[j]).collect::<Vec<_>>()))
            .collect()
    }

    pub fn table(&self) -> Table {
        let mut header = vec!["rho".to_string()];
        header.extend(self.values.iter().map(|v| format!("{v}")));
        let mut rows: Vec<Vec<String>> = self
            .seeds
            .iter()
            .zip(&self.scores)
            .map(|(s, r)| {
                std::iter::once(format!("seed {s}"))
                    .chain(r.iter().copied().map(fmt_score))
                    .collect()
            })
            .collect();
        rows.push(
            std::iter::once(format!("median {}", self.metric))
                .chain(self.medians().into_iter().map(fmt_score))
                .collect(),
        );
        Table { header, rows }
    }
}

pub const DEFAULT_RHO_VALUES: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// One full minimax run per masking rate and seed, all else fixed.
pub fn sweep_rho<S: Scalar>(
    teacher: &Teacher<S>,
    generator: &Encoder<S>,
    make_student: impl Fn(u64) -> Result<Encoder<S>>,
    task: &EncodedTask,
    cfg: &TrainConfig,
    values: &[f64],
    seeds: &[u64],
) -> Result<SweepResult> {
    if values.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "sweep needs at least one value and one seed".into(),
        ));
    }
    if let Some(v) = values.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(Error::InvalidArgument(format!(
            "rho value {v} outside (0, 1]"
        )));
    }
    let mut scores = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut row = Vec::with_capacity(values.len());
        for &rho in values {
            let run_cfg = TrainConfig {
                seed,
                rho,
                checkpoint_dir: None,
                ..cfg.clone()
            };
            let out = train_mate_kd(
                teacher,
                make_student(seed)?,
                generator.clone(),
                task,
                &run_cfg,
            )?;
            row.push(
                out.history
                    .best_eval()
                    .map(|e| e.metric)
                    .expect("every run evaluates at least once"),
            );
        }
        scores.push(row);
    }
    Ok(SweepResult {
        metric: task.metric,
        values: values.to_vec(),
        seeds: seeds.to_vec(),
        scores,
    })
}

/// One line of a sample dump.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DumpRow {
    pub original: String,
    pub generated: String,
    pub teacher_label: usize,
    /// Sequence positions chosen by the mask plan.
    pub masked_positions: Vec<usize>,
}

/// A dumped pair together with the token sequences behind it.
#[derive(Clone, Debug)]
pub struct DumpedSample {
    pub row: DumpRow,
    pub original: TokenSequence,
    pub generated: TokenSequence,
}

const DUMP_HEADER: [&str; 4] = ["original", "generated", "teacher_label", "masked_positions"];

/// Generates pseudo samples for the first `n` sequences of `source`
/// (cycling when `n` exceeds it), labels them with the teacher's argmax,
/// and writes them as TSV to `out_path`. The generator runs in eval mode.
#[allow(clippy::too_many_arguments)]
pub fn dump_generated<S: Scalar>(
    generator: &Encoder<S>,
    teacher: &Teacher<S>,
    task: &EncodedTask,
    source: &[TokenSequence],
    cfg: &TrainConfig,
    n: usize,
    seed: u64,
    out_path: &Path,
) -> Result<Vec<DumpedSample>> {
    if n == 0 {
        return Err(Error::InvalidArgument("dump needs n >= 1".into()));
    }
    if source.is_empty() {
        return Err(Error::InvalidArgument("nothing to dump from".into()));
    }
    cfg.validate()?;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let picks: Vec<TokenSequence> = source.iter().cycle().take(n).cloned().collect();
    let mut out = Vec::with_capacity(n);
    for chunk in picks.chunks(64) {
        let mut g = Graph::new();
        let bound = generator.params().bind(&mut g, false);
        let pb = generate_pseudo(
            &mut g,
            generator,
            &bound,
            chunk,
            cfg.perturb_config(),
            &mut mask_rng,
            &mut noise_rng,
            None,
        )?;
        let labels = teacher.logits(&pb.hard)?.argmax_rows();
        for ((orig, gen), (plan, label)) in chunk
            .iter()
            .zip(pb.hard)
            .zip(pb.plans.into_iter().zip(labels))
        {
            out.push(DumpedSample {
                row: DumpRow {
                    original: decode(&orig.ids, &task.vocab)?,
                    generated: decode(&gen.ids, &task.vocab)?,
                    teacher_label: label,
                    masked_positions: plan.positions,
                },
                original: orig.clone(),
                generated: gen,
            });
        }
    }
    write_dump(out_path, out.iter().map(|s| &s.row))?;
    Ok(out)
}

fn positions_field(p: &[usize]) -> String {
    p.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn write_dump<'a>(path: &Path, rows: impl IntoIterator<Item = &'a DumpRow>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_path(path)
        .map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
    let err = |e: csv::Error| Error::Parse {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    w.write_record(DUMP_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            &r.original,
            &r.generated,
            &r.teacher_label.to_string(),
            &positions_field(&r.masked_positions),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<Vec<DumpRow>> {
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(DUMP_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let masked_positions = if rec[3].is_empty() {
            Vec::new()
        } else {
            rec[3]
                .split(',')
                .map(|p| p.parse().map_err(|_| bad(format!("bad position {p:?}"))))
                .collect::<Result<_>>()?
        };
        rows.push(DumpRow {
            original: rec[0].to_string(),
            generated: rec[1].to_string(),
            teacher_label: rec[2]
                .parse()
                .map_err(|_| bad(format!("bad label {:?}", &rec[2])))?,
            masked_positions,
        });
    }
    Ok(rows)
}
