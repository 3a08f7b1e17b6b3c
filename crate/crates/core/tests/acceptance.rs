//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 4`.

mod common;

use std::cell::OnceCell;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use mate_kd::autograd::Graph;
use mate_kd::evalsuite::{
    self, dump_generated, read_dump, run_ablation, run_variant, sweep_rho, Variant,
};
use mate_kd::losses::{ce_loss, kd_loss, kl_div};
use mate_kd::models::{Encoder, EncoderConfig, EncoderInput, HeadKind, Teacher};
use mate_kd::perturb::{
    flat_positions, generate_pseudo, gumbel_softmax, mask_tokens, sample_gumbel, PerturbConfig,
};
use mate_kd::tensor::{argmax, softmax, Tensor};
use mate_kd::trainer::{
    generator_ascent, pretrain_teacher, train_kd_baseline, train_mate_kd, train_mate_kd_observed,
    EncodedTask, Phase, TrainConfig,
};
use mate_kd::vocab::{TokenSequence, Vocabulary, CLS, PAD, SEP};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Criterion<'a> = (usize, &'static str, Duration, Box<dyn Fn() -> Verdict + 'a>);
type EntryPoint<'a> = (&'static str, Box<dyn Fn() + 'a>);

fn main() {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let desk: OnceCell<Desk> = OnceCell::new();
    let desk = || desk.get_or_init(Desk::build);
    let secs = Duration::from_secs;
    let criteria: Vec<Criterion> = vec![
        (1, "loss oracles", secs(10), Box::new(loss_oracles)),
        (
            2,
            "finite-difference gradients",
            secs(120),
            Box::new(gradients),
        ),
        (3, "gumbel sampling", secs(30), Box::new(gumbel)),
        (4, "masking statistics", secs(5), Box::new(masking)),
        (5, "scoping and phase blocks", secs(120), Box::new(scoping)),
        (
            6,
            "ablation equivalence",
            secs(120),
            Box::new(ablation_equivalence),
        ),
        (
            7,
            "directional ablation",
            secs(30 * 60),
            Box::new(|| directional(desk())),
        ),
        (
            8,
            "generator ascent",
            secs(5 * 60),
            Box::new(|| ascent(desk())),
        ),
        (
            9,
            "sample dump integrity",
            secs(60),
            Box::new(|| dump_integrity(desk())),
        ),
    ];
    let mut failed = 0;
    for (n, name, budget, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| verdict(false, format!("panicked: {}", panic_message(&e))));
        let took = start.elapsed();
        let in_time = took <= budget;
        let pass = v.pass && in_time;
        if !pass {
            failed += 1;
        }
        let timing = if in_time {
            String::new()
        } else {
            format!(", over budget {}s", budget.as_secs())
        };
        println!(
            "criterion {n} [{name}]: {} - {} ({:.1}s{timing})",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

// ---------------------------------------------------------------- 1

fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn naive_kl(p: &[f64], q: &[f64]) -> f64 {
    let (p, q) = (naive_softmax(p), naive_softmax(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn loss_oracles() -> Verdict {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    let mut bad_sign = 0;
    let mut bad_shift = 0;
    let t = 2.0;
    for _ in 0..1000 {
        let c = r.gen_range(2..=5);
        let mut draw = || (0..c).map(|_| r.gen_range(-5.0..5.0)).collect::<Vec<f64>>();
        let (a, b) = (draw(), draw());
        let y = r.gen_range(0..c);
        let shift = r.gen_range(-10.0..10.0);

        let kl = kl_div(&a, &b).unwrap();
        let ce = ce_loss(&a, y).unwrap();
        let kd = kd_loss(&a, &b, t).unwrap();
        let scaled = |v: &[f64]| v.iter().map(|x| x / t).collect::<Vec<_>>();
        let oracle_kd = t * t * naive_kl(&scaled(&a), &scaled(&b));
        let oracle_ce = -naive_softmax(&a)[y].ln();
        for (got, want) in [(kl, naive_kl(&a, &b)), (ce, oracle_ce), (kd, oracle_kd)] {
            worst = worst.max((got - want).abs());
        }
        if kl < 0.0 || ce < 0.0 || kd < 0.0 {
            bad_sign += 1;
        }
        let sh = |v: &[f64]| v.iter().map(|x| x + shift).collect::<Vec<_>>();
        let (sa, sb) = (sh(&a), sh(&b));
        let shift_err = (kl_div(&sa, &sb).unwrap() - kl)
            .abs()
            .max((ce_loss(&sa, y).unwrap() - ce).abs())
            .max((kd_loss(&sa, &sb, t).unwrap() - kd).abs());
        if shift_err > 1e-6 {
            bad_shift += 1;
        }
    }
    verdict(
        worst <= 1e-6 && bad_sign == 0 && bad_shift == 0,
        format!(
            "1000 cases, max |err| {worst:.2e}, {bad_sign} negative, {bad_shift} shift-variant"
        ),
    )
}

// ---------------------------------------------------------------- 2

const FD_STEP: f64 = 1e-3;
const FD_REL_TOL: f64 = 1e-3;
const FD_FLOOR: f64 = 1e-7;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

fn dot(t: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn normal_tensor(rows: usize, cols: usize, r: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| StandardNormal.sample(r)).collect(),
    )
}

/// Picks `n` (tensor, element) pairs uniformly among the entries whose
/// analytic gradient is not exactly zero.
fn pick_probes(grads: &[Tensor<f64>], n: usize, r: &mut impl Rng) -> Vec<(usize, usize)> {
    let nonzero: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(t, g)| {
            g.data()
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(move |(i, _)| (t, i))
        })
        .collect();
    (0..n)
        .map(|_| nonzero[r.gen_range(0..nonzero.len())])
        .collect()
}

fn central_difference(
    model: &Encoder<f64>,
    (t, i): (usize, usize),
    f: &dyn Fn(&Encoder<f64>) -> f64,
) -> f64 {
    let mut m = model.clone();
    let x0 = m.params().get(t).data()[i];
    m.params_mut().tensors_mut()[t].data_mut()[i] = x0 + FD_STEP;
    let up = f(&m);
    m.params_mut().tensors_mut()[t].data_mut()[i] = x0 - FD_STEP;
    let down = f(&m);
    (up - down) / (2.0 * FD_STEP)
}

fn gradients() -> Verdict {
    let task = synthetic_task(64, 16, 5);
    let arch = EncoderConfig {
        num_layers: 2,
        hidden_dim: 32,
        num_heads: 2,
        ffn_dim: 64,
        vocab_size: task.vocab.len(),
        max_len: task.max_len,
        num_classes: task.num_classes,
        dropout: 0.0,
    };
    let student = Encoder::<f64>::new(arch.clone(), HeadKind::Classifier, &mut rng(11)).unwrap();
    let generator = Encoder::<f64>::new(
        EncoderConfig {
            num_classes: 1,
            ..arch
        },
        HeadKind::MaskedLm,
        &mut rng(12),
    )
    .unwrap();
    let seqs: Vec<TokenSequence> = task.train.seqs[..4].to_vec();
    let len = task.max_len;
    let pc = PerturbConfig { rho: 0.3, tau: 1.0 };
    let (mask_rng, noise_rng) = (rng(21), rng(22));
    let mut r = rng(23);

    // Reference pseudo batch at the initial generator weights.
    let pseudo = |gen: &Encoder<f64>| {
        let mut g = Graph::new();
        let bound = gen.params().bind(&mut g, false);
        let pb = generate_pseudo(
            &mut g,
            gen,
            &bound,
            &seqs,
            pc,
            &mut mask_rng.clone(),
            &mut noise_rng.clone(),
            None,
        )
        .unwrap();
        let y = g
            .value(pb.relaxed.expect("rho 0.3 masks something"))
            .clone();
        (g.value(pb.rows).clone(), y, pb.hard, pb.plans)
    };
    let (rows0, y0, hard0, plans0) = pseudo(&generator);
    let flat = flat_positions(&plans0, len);
    let w = normal_tensor(seqs.len(), task.num_classes, &mut r);

    // Student: relaxed input with soft rows at the masked positions.
    let mut soft = rows0.clone();
    for (k, &f) in flat.iter().enumerate() {
        soft.row_mut(f).copy_from_slice(y0.row(k));
    }
    let f_student = |m: &Encoder<f64>| dot(&m.logits_relaxed(&soft, &hard0).unwrap(), &w);
    let student_grads = {
        let mut g = Graph::new();
        let bound = student.params().bind(&mut g, true);
        let rows = g.constant(soft.clone());
        let out = student
            .forward(
                &mut g,
                &bound,
                EncoderInput::Relaxed {
                    rows,
                    layout: &hard0,
                },
                None,
            )
            .unwrap();
        let wc = g.constant(w.clone());
        let prod = g.mul(out, wc);
        let root = g.sum(prod);
        student
            .params()
            .collect_grads(&mut g.backward(root), &bound)
    };

    // Generator: straight-through has identity backward, so its gradient
    // equals that of the surrogate rows0 + (y(θ) − y(θ0)) at masked rows.
    let f_generator = |m: &Encoder<f64>| {
        let (_, y, _, plans) = pseudo(m);
        assert_eq!(
            plans, plans0,
            "mask plans must not depend on generator weights"
        );
        let mut rows = rows0.clone();
        for (k, &f) in flat.iter().enumerate() {
            for (c, v) in rows.row_mut(f).iter_mut().enumerate() {
                *v += y.get(k, c) - y0.get(k, c);
            }
        }
        dot(&student.logits_relaxed(&rows, &hard0).unwrap(), &w)
    };
    let generator_grads = {
        let mut g = Graph::new();
        let gen_bound = generator.params().bind(&mut g, true);
        let pb = generate_pseudo(
            &mut g,
            &generator,
            &gen_bound,
            &seqs,
            pc,
            &mut mask_rng.clone(),
            &mut noise_rng.clone(),
            None,
        )
        .unwrap();
        let stu_bound = student.params().bind(&mut g, false);
        let out = student
            .forward(
                &mut g,
                &stu_bound,
                EncoderInput::Relaxed {
                    rows: pb.rows,
                    layout: &pb.hard,
                },
                None,
            )
            .unwrap();
        let wc = g.constant(w.clone());
        let prod = g.mul(out, wc);
        let root = g.sum(prod);
        generator
            .params()
            .collect_grads(&mut g.backward(root), &gen_bound)
    };

    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut check =
        |model: &Encoder<f64>, grads: &[Tensor<f64>], f: &dyn Fn(&Encoder<f64>) -> f64| {
            for probe in pick_probes(grads, 20, &mut r) {
                let e = rel_err(
                    grads[probe.0].data()[probe.1],
                    central_difference(model, probe, f),
                );
                worst = worst.max(e);
                if e > FD_REL_TOL {
                    failures += 1;
                }
            }
        };
    check(&student, &student_grads, &f_student);
    check(&generator, &generator_grads, &f_generator);
    verdict(
        failures == 0,
        format!(
            "40 probes (20 student, 20 generator), max rel err {worst:.2e}, {failures} over 1e-3"
        ),
    )
}

// ---------------------------------------------------------------- 3

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

fn gumbel() -> Verdict {
    // Noise-free, unit temperature: plain softmax of generator rows.
    let task = synthetic_task(32, 8, 6);
    let gen: Encoder<f64> = tiny_model(&task, HeadKind::MaskedLm, 7);
    let logits = gen.logits(&task.train.seqs[..4]).unwrap();
    let zeros = vec![0.0; logits.cols()];
    let mut softmax_err: f64 = 0.0;
    for row in 0..logits.rows() {
        let got = gumbel_softmax(logits.row(row), &zeros, 1.0).unwrap();
        for (a, b) in got.iter().zip(softmax(logits.row(row))) {
            softmax_err = softmax_err.max((a - b).abs());
        }
    }

    let n = 1_000_000;
    let draws = sample_gumbel::<f64>(1, n, &mut rng(8));
    let mean = draws.data().iter().sum::<f64>() / n as f64;
    let var = draws.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;

    // Fixed noise, tau = 0.01. A row puts at least 1/(1 + (K−1)e^(−gap/τ))
    // on its top entry, which exceeds 0.999 once gap > τ·ln(999·(K−1)).
    let tau = 0.01;
    let k = 37;
    let gap_needed = tau * (999.0 * (k as f64 - 1.0)).ln();
    let mut r = rng(9);
    let (mut wrong_argmax, mut eligible, mut concentrated, mut eligible_missed) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let l: Vec<f64> = (0..k)
            .map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut r))
            .collect();
        let g = sample_gumbel::<f64>(1, k, &mut r).into_vec();
        let y = gumbel_softmax(&l, &g, tau).unwrap();
        let ls = mate_kd::tensor::log_softmax(&l);
        let z: Vec<f64> = ls.iter().zip(&g).map(|(a, b)| a + b).collect();
        let top = argmax(&z);
        let second = z
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != top)
            .map(|(_, v)| *v)
            .fold(f64::MIN, f64::max);
        if argmax(&y) != top {
            wrong_argmax += 1;
        }
        let max = y[top];
        if max > 0.999 {
            concentrated += 1;
        }
        if z[top] - second > gap_needed {
            eligible += 1;
            if max <= 0.999 {
                eligible_missed += 1;
            }
        }
    }
    let pass = softmax_err <= 1e-6
        && (mean - EULER_GAMMA).abs() <= 0.01
        && (var - PI * PI / 6.0).abs() <= 0.05
        && wrong_argmax == 0
        && eligible_missed == 0;
    verdict(
        pass,
        format!(
            "softmax err {softmax_err:.1e}; mean {mean:.4}, var {var:.4} over 1e6 draws; \
             tau 0.01: {concentrated}/1000 rows > 0.999, {eligible_missed} of {eligible} separated rows missed, \
             {wrong_argmax} argmax mismatches"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn masking() -> Verdict {
    let task = synthetic_task(1000, 10, 10);
    let seqs = &task.train.seqs;
    let maskable: usize = seqs.iter().map(|s| s.maskable_positions().count()).sum();
    let mut r = rng(11);
    let mut masked = 0;
    let mut special_hits = 0;
    for s in seqs {
        let (_, plan) = mask_tokens(s, 0.3, &mut r).unwrap();
        masked += plan.len();
        special_hits += plan
            .positions
            .iter()
            .filter(|&&p| matches!(s.ids[p], PAD | CLS | SEP))
            .count();
    }
    let expected = 0.3 * maskable as f64;
    let band = 3.0 * (maskable as f64 * 0.3 * 0.7).sqrt();
    let mut exact = true;
    for s in seqs.iter().take(200) {
        let (m0, p0) = mask_tokens(s, 0.0, &mut r).unwrap();
        let (_, p1) = mask_tokens(s, 1.0, &mut r).unwrap();
        exact &=
            m0 == *s && p0.is_empty() && p1.positions == s.maskable_positions().collect::<Vec<_>>();
    }
    verdict(
        maskable == 10_000 && (masked as f64 - expected).abs() <= band && special_hits == 0 && exact,
        format!(
            "{masked} of {maskable} masked (allowed {expected:.0} ± {band:.0}), {special_hits} specials masked, \
             rho 0/1 exact: {exact}"
        ),
    )
}

// ---------------------------------------------------------------- 5

fn small_setup(n_train: usize) -> (EncodedTask, Teacher<f32>, Encoder<f32>) {
    let task = synthetic_task(n_train, 32, 12);
    let (teacher, _) = pretrain_teacher(
        tiny_model(&task, HeadKind::Classifier, 1),
        &task,
        &pretrain_config(1),
    )
    .unwrap();
    let gen = tiny_model(&task, HeadKind::MaskedLm, 2);
    (task, teacher, gen)
}

fn scoping() -> Verdict {
    let mut problems = Vec::new();

    // A 50-step minimax run at n_G = 10, n_S = 100.
    let (task, teacher, gen) = small_setup(800);
    let cfg = TrainConfig {
        n_g: 10,
        n_s: 100,
        epochs: 1,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let teacher_hash = teacher.param_hash();
    let student: Encoder<f32> = tiny_model(&task, HeadKind::Classifier, 3);
    let mut prev = (student.params().hash(), gen.params().hash());
    let mut scope_violations = 0;
    let out = train_mate_kd_observed(&teacher, student, gen.clone(), &task, &cfg, |v| {
        let now = (v.student.params().hash(), v.generator.params().hash());
        let frozen_held = match v.record.phase {
            Phase::Max => now.0 == prev.0,
            Phase::Min => now.1 == prev.1,
        };
        if !frozen_held {
            scope_violations += 1;
        }
        prev = now;
    })
    .unwrap();
    let phases = out.history.phases();
    let want: Vec<Phase> = (0..50)
        .map(|i| if i < 10 { Phase::Max } else { Phase::Min })
        .collect();
    if phases != want {
        problems.push("50-step phase pattern is not 10 max then 40 min".to_string());
    }
    if scope_violations > 0 {
        problems.push(format!(
            "{scope_violations} steps changed the frozen network"
        ));
    }

    // Full blocks: 230 single-example steps give 10/100/10/100/10.
    let (task2, teacher2, gen2) = small_setup(230);
    let cfg2 = TrainConfig {
        batch_size: 1,
        ..cfg.clone()
    };
    let out2 = train_mate_kd(
        &teacher2,
        tiny_model(&task2, HeadKind::Classifier, 4),
        gen2,
        &task2,
        &cfg2,
    )
    .unwrap();
    let blocks = run_lengths(&out2.history.phases());
    let want_blocks = vec![
        (Phase::Max, 10),
        (Phase::Min, 100),
        (Phase::Max, 10),
        (Phase::Min, 100),
        (Phase::Max, 10),
    ];
    if blocks != want_blocks {
        problems.push(format!("phase blocks {blocks:?}"));
    }

    // Every entry point that receives the teacher leaves it untouched.
    let small_cfg = TrainConfig {
        epochs: 1,
        n_g: 2,
        n_s: 4,
        ..TrainConfig::default()
    };
    let mk = |s: u64| Ok(tiny_model::<f32>(&task, HeadKind::Classifier, 10 + s));
    let dir = tempfile::tempdir().unwrap();
    let entry_points: Vec<EntryPoint<'_>> = vec![
        (
            "train_kd_baseline",
            Box::new(|| {
                drop(train_kd_baseline(&teacher, mk(0).unwrap(), &task, &small_cfg).unwrap())
            }),
        ),
        (
            "train_mate_kd",
            Box::new(|| {
                drop(
                    train_mate_kd(&teacher, mk(0).unwrap(), gen.clone(), &task, &small_cfg)
                        .unwrap(),
                )
            }),
        ),
        (
            "generator_ascent",
            Box::new(|| {
                drop(
                    generator_ascent(&teacher, mk(0).unwrap(), gen.clone(), &task, &small_cfg, 5)
                        .unwrap(),
                )
            }),
        ),
        (
            "run_ablation",
            Box::new(|| drop(run_ablation(&teacher, &gen, mk, &task, &small_cfg, &[0]).unwrap())),
        ),
        (
            "sweep_rho",
            Box::new(|| {
                drop(sweep_rho(&teacher, &gen, mk, &task, &small_cfg, &[0.2], &[0]).unwrap())
            }),
        ),
        (
            "dump_generated",
            Box::new(|| {
                let p = dir.path().join("d.tsv");
                drop(
                    dump_generated(&gen, &teacher, &task, &task.dev.seqs, &small_cfg, 8, 0, &p)
                        .unwrap(),
                )
            }),
        ),
        (
            "evaluate",
            Box::new(|| {
                drop(
                    evalsuite::evaluate(teacher.encoder(), &task, "dev", 0, toml::Table::new())
                        .unwrap(),
                )
            }),
        ),
    ];
    for (name, run) in &entry_points {
        run();
        if teacher.param_hash() != teacher_hash {
            problems.push(format!("teacher changed in {name}"));
        }
    }
    let detail = if problems.is_empty() {
        format!(
            "50-step run 10 max + 40 min with frozen hashes held; 230-step blocks {:?}; teacher hash fixed across {} entry points",
            blocks.iter().map(|b| b.1).collect::<Vec<_>>(),
            entry_points.len()
        )
    } else {
        problems.join("; ")
    };
    verdict(problems.is_empty(), detail)
}

fn run_lengths(phases: &[Phase]) -> Vec<(Phase, usize)> {
    let mut out: Vec<(Phase, usize)> = Vec::new();
    for &p in phases {
        match out.last_mut() {
            Some((q, n)) if *q == p => *n += 1,
            _ => out.push((p, 1)),
        }
    }
    out
}

// ---------------------------------------------------------------- 6

fn ablation_equivalence() -> Verdict {
    let (task, teacher, gen) = small_setup(256);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut same_len = true;
    let mut steps = 0;
    for seed in [3u64, 4] {
        let cfg = TrainConfig {
            seed,
            ..cfg.clone()
        };
        let mk = |s: u64| Ok(tiny_model::<f32>(&task, HeadKind::Classifier, 50 + s));
        let base = train_kd_baseline(&teacher, mk(seed).unwrap(), &task, &cfg)
            .unwrap()
            .history
            .losses();
        let (_, direct) = run_variant(
            Variant::NoGen,
            &teacher,
            &gen,
            mk(seed).unwrap(),
            &task,
            &cfg,
        )
        .unwrap();
        let ablation = run_ablation(&teacher, &gen, mk, &task, &cfg, &[seed]).unwrap();
        let via_ablation = ablation.run(Variant::NoGen, seed).unwrap().history.losses();
        for other in [direct.losses(), via_ablation] {
            same_len &= other.len() == base.len();
            for (a, b) in other.iter().zip(&base) {
                worst = worst.max((a - b).abs());
            }
        }
        steps += base.len();
    }
    verdict(
        same_len && worst <= 1e-6,
        format!(
            "{steps} steps over 2 seeds, max |loss diff| {worst:.1e}, equal lengths: {same_len}"
        ),
    )
}

// ---------------------------------------------------------------- 7

const C7_SEEDS: [u64; 7] = [0, 1, 2, 3, 4, 5, 6];

fn directional(desk: &Desk) -> Verdict {
    let mut ok = desk.teacher_dev >= 0.95;
    let mut parts = vec![format!("teacher dev {:.3}", desk.teacher_dev)];
    for epochs in [3, 10] {
        let cfg = TrainConfig {
            epochs,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let res = run_ablation(
            &desk.teacher,
            &desk.generator,
            |s| Ok(desk.student(s)),
            &desk.task,
            &cfg,
            &C7_SEEDS,
        )
        .unwrap();
        let (full, adv, kd) = (
            res.median(Variant::Full),
            res.median(Variant::NoAdv),
            res.median(Variant::NoGen),
        );
        let holds = full >= adv - 0.01 && adv >= kd - 0.01 && full - kd >= 0.0;
        ok &= holds;
        parts.push(format!(
            "{epochs} epochs: MATE-KD {full:.4} / -Adv {adv:.4} / KD {kd:.4}"
        ));
    }
    verdict(ok, parts.join("; "))
}

// ---------------------------------------------------------------- 8

fn ascent(desk: &Desk) -> Verdict {
    let mut diffs = Vec::new();
    for seed in 0..5u64 {
        let cfg = TrainConfig {
            epochs: 3,
            lr: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        let student = train_kd_baseline(&desk.teacher, desk.student(seed), &desk.task, &cfg)
            .unwrap()
            .model;
        let objs = generator_ascent(
            &desk.teacher,
            student,
            desk.generator.clone(),
            &desk.task,
            &cfg,
            50,
        )
        .unwrap();
        let first = objs[..3].iter().sum::<f64>() / 3.0;
        let last = objs[47..].iter().sum::<f64>() / 3.0;
        diffs.push(last - first);
    }
    let med = median(&diffs);
    verdict(
        med >= 0.0,
        format!(
            "median (last3 − first3) {med:.4}; per seed {:?}",
            diffs
                .iter()
                .map(|d| (d * 1e4).round() / 1e4)
                .collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn dump_integrity(desk: &Desk) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.tsv");
    let cfg = TrainConfig::default();
    let n = 200;
    let samples = dump_generated(
        &desk.generator,
        &desk.teacher,
        &desk.task,
        &desk.task.dev.seqs,
        &cfg,
        n,
        0,
        &path,
    )
    .unwrap();
    let mut local = 0;
    let mut immune = 0;
    let mut text_local = 0;
    let mut changed = 0;
    for s in &samples {
        let diff: Vec<usize> = (0..s.original.len())
            .filter(|&i| s.original.ids[i] != s.generated.ids[i])
            .collect();
        changed += diff.len();
        if diff.iter().all(|p| s.row.masked_positions.contains(p)) {
            local += 1;
        }
        let specials_kept = (0..s.original.len())
            .filter(|&i| !s.original.maskable[i])
            .all(|i| {
                s.generated.ids[i] == s.original.ids[i]
                    && Vocabulary::is_special(s.generated.ids[i])
            })
            && s.row
                .masked_positions
                .iter()
                .all(|&p| !Vocabulary::is_special(s.generated.ids[p]));
        if specials_kept {
            immune += 1;
        }
        // Word i of the decoded text sits at position i + 1 (after CLS).
        let a: Vec<&str> = s.row.original.split(' ').collect();
        let b: Vec<&str> = s.row.generated.split(' ').collect();
        if a.len() == b.len()
            && a.iter()
                .zip(&b)
                .enumerate()
                .all(|(i, (x, y))| x == y || s.row.masked_positions.contains(&(i + 1)))
        {
            text_local += 1;
        }
    }
    let parsed = read_dump(&path).unwrap();
    let rows: Vec<_> = samples.iter().map(|s| s.row.clone()).collect();
    let lossless = parsed == rows;
    let mean_changed = changed as f64 / n as f64;
    let bound = 3.0 + 3.0 * (10.0f64 * 0.3 * 0.7).sqrt() / (n as f64).sqrt();
    verdict(
        samples.len() == n && local == n && immune == n && text_local == n && lossless && mean_changed <= bound,
        format!(
            "{local}/{n} local, {immune}/{n} special-immune, {text_local}/{n} local as text, lossless parse: {lossless}, \
             mean changed tokens {mean_changed:.2} (≤ {bound:.2})"
        ),
    )
}
