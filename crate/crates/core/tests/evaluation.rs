mod common;

use common::*;
use mate_kd::evalsuite::{
    dump_generated, evaluate, read_dump, run_ablation, sweep_rho, MetricsReport, Variant,
};
use mate_kd::models::HeadKind;
use mate_kd::trainer::{pretrain_teacher, EncodedTask, TrainConfig};

#[test]
fn untrained_students_score_near_chance() {
    let task = desk_task();
    let scores: Vec<f64> = (0..5)
        .map(|seed| {
            let s = student_model::<f32>(&task, 500 + seed);
            evaluate(&s, &task, "dev", seed, toml::Table::new())
                .unwrap()
                .value
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05, "scores {scores:?}");
}

#[test]
fn evaluation_is_repeatable_and_reports_round_trip() {
    let task = synthetic_task(64, 48, 1);
    let model = tiny_model::<f32>(&task, HeadKind::Classifier, 3);
    let mut cfg = toml::Table::new();
    cfg.insert("note".into(), toml::Value::String("x".into()));
    let a = evaluate(&model, &task, "dev", 3, cfg.clone()).unwrap();
    let b = evaluate(&model, &task, "dev", 3, cfg).unwrap();
    assert_eq!(a.value, b.value);
    assert_eq!(a.metric.name(), "accuracy");
    assert!(evaluate(&model, &task, "test", 3, toml::Table::new()).is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("report.toml");
    a.write(&p).unwrap();
    let back: MetricsReport = toml::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(back.value, a.value);
    assert_eq!(back.config, a.config);
}

fn small_pipeline() -> (
    EncodedTask,
    mate_kd::models::Teacher<f32>,
    mate_kd::models::Encoder<f32>,
) {
    let task = synthetic_task(64, 32, 2);
    let (teacher, _) = pretrain_teacher(
        tiny_model(&task, HeadKind::Classifier, 1),
        &task,
        &pretrain_config(1),
    )
    .unwrap();
    let gen = tiny_model(&task, HeadKind::MaskedLm, 2);
    (task, teacher, gen)
}

fn quick() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        n_g: 1,
        n_s: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn ablation_table_has_one_row_per_variant() {
    let (task, teacher, gen) = small_pipeline();
    let res = run_ablation(
        &teacher,
        &gen,
        |s| Ok(tiny_model(&task, HeadKind::Classifier, 10 + s)),
        &task,
        &quick(),
        &[0, 1],
    )
    .unwrap();
    assert_eq!(res.runs.len(), 6);
    let table = res.table();
    let labels: Vec<&str> = table.rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["MATE-KD", "- Adv train", "- Generator"]);
    assert!(table.rows.iter().all(|r| r.len() == table.header.len()));
    for v in Variant::ALL {
        assert!(res.scores(v).iter().all(|s| (0.0..=1.0).contains(s)));
    }
    let dir = tempfile::tempdir().unwrap();
    table.write(&dir.path().join("ablation")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn rho_sweep_has_one_column_per_value() {
    let (task, teacher, gen) = small_pipeline();
    let values = [0.1, 0.3, 0.5];
    let res = sweep_rho(
        &teacher,
        &gen,
        |s| Ok(tiny_model(&task, HeadKind::Classifier, 10 + s)),
        &task,
        &quick(),
        &values,
        &[0],
    )
    .unwrap();
    let table = res.table();
    assert_eq!(table.header.len(), 1 + values.len());
    assert_eq!(res.medians().len(), values.len());
    assert!(res.medians().iter().all(|m| (0.0..=1.0).contains(m)));
    assert!(sweep_rho(
        &teacher,
        &gen,
        |s| Ok(tiny_model(&task, HeadKind::Classifier, s)),
        &task,
        &quick(),
        &[0.0],
        &[0]
    )
    .is_err());
}

#[test]
fn dumps_are_reproducible_for_a_seed() {
    let (task, teacher, gen) = small_pipeline();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tsv"), dir.path().join("b.tsv"));
    let cfg = TrainConfig::default();
    dump_generated(&gen, &teacher, &task, &task.dev.seqs, &cfg, 40, 5, &a).unwrap();
    dump_generated(&gen, &teacher, &task, &task.dev.seqs, &cfg, 40, 5, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_dump(&a).unwrap().len(), 40);
    assert!(dump_generated(&gen, &teacher, &task, &task.dev.seqs, &cfg, 0, 5, &a).is_err());
}
