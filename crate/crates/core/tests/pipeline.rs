//! End-to-end library behaviour: training, checkpoints, evaluation, export
//! and ablation variants.

mod common;

use common::{bits, corpus, small_config};
use emofuse::checkpoint::{self, ModelKind};
use emofuse::config::{Branches, Modality, SmoothingForm};
use emofuse::data::utterance_count;
use emofuse::model::{AnyModel, StudentModel, TeacherModel};
use emofuse::train::{
    evaluate, export_embeddings, split_for_config, step_seed, train_student, train_teacher, StudentTrainer,
    TrainOptions,
};
use emofuse::{Error, ModelConfig};

fn frozen_teacher(cfg: &ModelConfig) -> TeacherModel {
    let data = corpus(cfg);
    let mut c = cfg.clone();
    c.optim.epochs = 3;
    train_teacher(&c, &data, &[], &TrainOptions::default()).unwrap().teacher
}

#[test]
fn teacher_checkpoint_round_trip_preserves_predictions() {
    let cfg = small_config(3);
    let data = corpus(&cfg);
    let s = split_for_config(&cfg, &data).unwrap();
    let run = train_teacher(&cfg, &s.train, &s.val, &TrainOptions::default()).unwrap();
    assert!(run.teacher.is_frozen());
    assert!((1..=cfg.optim.epochs).contains(&run.best_epoch));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("teacher.ckpt");
    checkpoint::save_teacher(&path, &run.teacher, run.best_epoch as u64).unwrap();
    let (back, meta) = checkpoint::load(&path).unwrap();
    assert_eq!(meta.kind, ModelKind::Teacher);
    assert!(meta.frozen);
    assert_eq!(meta.epoch, run.best_epoch as u64);
    assert_eq!(back.params().checksum(), run.teacher.params.checksum());
    for d in &s.test {
        assert_eq!(back.infer(d).unwrap().0, run.teacher.predict(d).unwrap());
    }
    let a = evaluate(&run.teacher, &s.test).unwrap();
    let b = evaluate(&back, &s.test).unwrap();
    assert_eq!(a, b);
}

#[test]
fn best_epoch_is_the_strict_validation_maximum() {
    let cfg = small_config(4);
    let data = corpus(&cfg);
    let s = split_for_config(&cfg, &data).unwrap();
    let run = train_teacher(&cfg, &s.train, &s.val, &TrainOptions::default()).unwrap();
    let scores: Vec<f64> = run.history.iter().map(|h| h.log.val_wf1.unwrap()).collect();
    let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first_best = scores.iter().position(|&v| v == best).unwrap() + 1;
    assert_eq!(run.best_epoch, first_best);
}

#[test]
fn student_steps_never_touch_the_teacher() {
    let cfg = small_config(5);
    let teacher = frozen_teacher(&cfg);
    let before = teacher.params.checksum();
    let data = corpus(&cfg);
    let mut trainer = StudentTrainer::new(&cfg, Some(&teacher)).unwrap();
    for step in 0..5 {
        let batch: Vec<_> = data.iter().skip(step).take(3).collect();
        let seeds: Vec<u64> = (0..batch.len()).map(|k| step_seed(1, 0, step, k)).collect();
        let report = trainer.step(&batch, &seeds).unwrap();
        assert!(!report.teacher_grad_leak);
        assert!(report.breakdown.l_cross >= 0.0);
    }
    assert_eq!(teacher.params.checksum(), before);
}

#[test]
fn unfrozen_teacher_is_rejected() {
    let cfg = small_config(5);
    let teacher = TeacherModel::new(&cfg);
    assert!(matches!(StudentTrainer::new(&cfg, Some(&teacher)), Err(Error::Contract(_))));
}

#[test]
fn zero_cross_weight_reproduces_the_no_distillation_run() {
    let mut cfg = small_config(6);
    cfg.ikd.kappa1 = 0.0;
    cfg.ikd.kappa2 = 1.0;
    cfg.ikd.kappa3 = 0.0;
    cfg.optim.epochs = 4;
    let teacher = frozen_teacher(&cfg);
    let data = corpus(&cfg);
    let with = train_student(&cfg, Some(&teacher), &data, &[], &TrainOptions::default()).unwrap();
    let mut off = cfg.clone();
    off.ablation.ikd = false;
    let without = train_student(&off, None, &data, &[], &TrainOptions::default()).unwrap();
    let curve = |h: &[emofuse::train::EpochSummary]| h.iter().map(|e| e.log.l_align.to_bits()).collect::<Vec<_>>();
    assert_eq!(curve(&with.history), curve(&without.history));
    for h in &with.history {
        assert_eq!(h.log.total.to_bits(), h.log.l_align.to_bits());
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = small_config(7);
    let teacher = frozen_teacher(&cfg);
    let data = corpus(&cfg);
    let run = || train_student(&cfg, Some(&teacher), &data, &[], &TrainOptions::default()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.student.params.checksum(), b.student.params.checksum());
    let logs = |r: &emofuse::train::StudentRun| r.history.iter().map(|h| h.log.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(logs(&a), logs(&b));
}

#[test]
fn different_seeds_give_different_runs() {
    let a = StudentModel::new(&small_config(1), None);
    let b = StudentModel::new(&small_config(2), None);
    assert_ne!(a.params.checksum(), b.params.checksum());
}

#[test]
fn ablation_variants_share_initializations() {
    let cfg = small_config(8);
    let full = StudentModel::new(&cfg, Some(cfg.model.d_s));
    let mut c = cfg.clone();
    c.ablation.hcmf = false;
    let no_hcmf = StudentModel::new(&c.resolved().unwrap(), Some(cfg.model.d_s));
    for (name, t) in full.params.iter() {
        if let Some(other) = no_hcmf.params.by_name(name) {
            assert_eq!(bits(t), bits(other), "{name}");
        }
    }
    assert!(no_hcmf.params.by_name("student.classifier.weight").is_some());
}

#[test]
fn every_ablation_variant_trains_and_evaluates() {
    let base = small_config(9);
    let teacher = frozen_teacher(&base);
    let data = corpus(&base);
    let variants: Vec<(&str, Box<dyn Fn(&mut ModelConfig)>)> = vec![
        ("full", Box::new(|_| {})),
        ("no sdmoe", Box::new(|c| c.ablation.sdmoe = false)),
        ("no hcmf", Box::new(|c| c.ablation.hcmf = false)),
        ("no ikd", Box::new(|c| c.ablation.ikd = false)),
        ("baseline", Box::new(|c| {
            c.ablation.sdmoe = false;
            c.ablation.hcmf = false;
            c.ablation.ikd = false;
        })),
        ("text branch", Box::new(|c| c.ablation.branches = Branches::Text)),
        ("literal smoothing", Box::new(|c| c.ikd.smoothing = SmoothingForm::Literal)),
        ("text and audio", Box::new(|c| c.ablation.modalities = vec![Modality::Text, Modality::Audio])),
        ("text only", Box::new(|c| c.ablation.modalities = vec![Modality::Text])),
        ("one-sided band", Box::new(|c| c.sdmoe.one_sided = true)),
    ];
    for (name, tweak) in variants {
        let mut c = base.clone();
        c.optim.epochs = 2;
        tweak(&mut c);
        let c = c.resolved().unwrap();
        let t = c.ablation.ikd.then_some(&teacher);
        let run = train_student(&c, t, &data, &[], &TrainOptions::default()).unwrap_or_else(|e| panic!("{name}: {e}"));
        let report = evaluate(&run.student, &data).unwrap();
        assert_eq!(report.total(), utterance_count(&data) as u64, "{name}");
        for h in &run.history {
            assert!(h.log.total.is_finite(), "{name}");
            assert_eq!(h.breakdown().recombined().to_bits(), h.log.total.to_bits(), "{name}");
        }
    }
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let cfg = small_config(10);
    let teacher = frozen_teacher(&cfg);
    let mut other = cfg.clone();
    other.model.num_classes = 4;
    other.model.labels = None;
    let other = other.resolved().unwrap();
    assert!(matches!(StudentTrainer::new(&other, Some(&teacher)), Err(Error::Config(_))));
}

#[test]
fn export_writes_one_row_per_utterance() {
    let cfg = small_config(11);
    let teacher = frozen_teacher(&cfg);
    let data = corpus(&cfg);
    let run = train_student(&cfg, Some(&teacher), &data[..4], &[], &TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    let model = AnyModel::Student(run.student);
    let rows = export_embeddings(&model, &data[..4], &path).unwrap();
    assert_eq!(rows, utterance_count(&data[..4]));
    let mut reader = csv::Reader::from_path(&path).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(&header[..4], ["dialogue_id", "index", "label", "predicted"]);
    assert_eq!(header.len(), 4 + cfg.model.d_s);
    assert_eq!(header[4], "e0");
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), rows);
    let (_, fused) = model.infer(&data[0]).unwrap();
    let first: Vec<f64> = records[0].iter().skip(4).map(|v| v.parse().unwrap()).collect();
    assert_eq!(first, fused.row_slice(0));
}

#[test]
fn evaluating_nothing_is_an_error() {
    let cfg = small_config(12);
    let teacher = TeacherModel::new(&cfg);
    assert!(evaluate(&teacher, &[]).is_err());
}

#[test]
fn overlong_dialogue_is_rejected_at_inference() {
    let mut cfg = small_config(13);
    cfg.model.max_positions = Some(2);
    let cfg = cfg.resolved().unwrap();
    let data = corpus(&cfg);
    let long = data.iter().find(|d| d.len() > 2).unwrap();
    let teacher = TeacherModel::new(&cfg);
    assert!(matches!(teacher.predict(long), Err(Error::Bounds { .. })));
}
