//! Training loops, evaluation and embedding export.
//!
//! A batch is a group of whole dialogues. Each dialogue runs through the
//! network separately inside one graph and the per-utterance rows of all
//! dialogues are stacked before the losses, so every loss averages over
//! the real utterances of the batch and no padding is ever created.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{split_dataset, utterance_count, DialogueRecord, Splits};
use crate::embed::positions_for;
use crate::error::{Error, Result};
use crate::ikd::{align_loss, cross_kd_loss, ikd_objective, ikd_total, label_smooth_loss, LossBreakdown};
use crate::metrics::EvalReport;
use crate::model::{AnyModel, StudentModel, TeacherModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamStore, Scope};
use crate::sdmoe::Mode;
use crate::seeds::{self, Seeds};
use crate::tensor::{finite_difference_check, GradCheckReport, Graph, Tensor, Var};

/// Loss weights used for the teacher: supervision and smoothing, equally weighted.
pub const TEACHER_KAPPA: [f64; 3] = [0.0, 1.0, 1.0];

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_cross: f64,
    pub l_align: f64,
    pub l_smooth: f64,
    pub total: f64,
    /// Validation weighted F1; `null` when there is no validation data.
    pub val_wf1: Option<f64>,
}

/// Per-epoch record kept in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub log: EpochLog,
    pub kappa: [f64; 3],
    pub val_accuracy: Option<f64>,
    /// Eval-mode accuracy on the training set, when tracking is enabled.
    pub train_accuracy: Option<f64>,
}

impl EpochSummary {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_cross: self.log.l_cross,
            l_align: self.log.l_align,
            l_smooth: self.log.l_smooth,
            total: self.log.total,
            kappa: self.kappa,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Evaluate the training set after every epoch.
    pub track_train_accuracy: bool,
    /// Stop once tracked training accuracy exceeds this value.
    pub stop_at_train_accuracy: Option<f64>,
}

/// Result of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub breakdown: LossBreakdown,
    pub utterances: usize,
    /// True if the backward pass touched any teacher parameter.
    pub teacher_grad_leak: bool,
}

/// Class predictions for every utterance of a dialogue.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn predict(&self, dialogue: &DialogueRecord) -> Result<Vec<usize>>;
}

impl Predictor for TeacherModel {
    fn num_classes(&self) -> usize {
        self.config.model.num_classes
    }
    fn predict(&self, dialogue: &DialogueRecord) -> Result<Vec<usize>> {
        TeacherModel::predict(self, dialogue)
    }
}

impl Predictor for StudentModel {
    fn num_classes(&self) -> usize {
        self.config.model.num_classes
    }
    fn predict(&self, dialogue: &DialogueRecord) -> Result<Vec<usize>> {
        StudentModel::predict(self, dialogue)
    }
}

impl Predictor for AnyModel {
    fn num_classes(&self) -> usize {
        self.config().model.num_classes
    }
    fn predict(&self, dialogue: &DialogueRecord) -> Result<Vec<usize>> {
        Ok(self.infer(dialogue)?.0)
    }
}

/// Eval-mode metrics over every utterance of `data`.
pub fn evaluate<P: Predictor + ?Sized>(model: &P, data: &[DialogueRecord]) -> Result<EvalReport> {
    if utterance_count(data) == 0 {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    let mut predicted = Vec::new();
    let mut labels = Vec::new();
    for d in data {
        for (u, p) in d.utterances.iter().zip(model.predict(d)?) {
            if u.label >= model.num_classes() {
                return Err(Error::Config(format!(
                    "label {} exceeds the model's {} classes",
                    u.label,
                    model.num_classes()
                )));
            }
            labels.push(u.label);
            predicted.push(p);
        }
    }
    EvalReport::from_predictions(&predicted, &labels, model.num_classes())
}

/// Dialogue order for one epoch, cut into batches.
pub fn epoch_batches(count: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut seeds::rng(seeds::derive(shuffle_seed, &[epoch as u64])));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Routing-noise seed for dialogue `slot` of a batch.
pub fn step_seed(noise_seed: u64, epoch: usize, batch: usize, slot: usize) -> u64 {
    seeds::derive(noise_seed, &[epoch as u64, batch as u64, slot as u64])
}

fn stack_labels(batch: &[&DialogueRecord]) -> Vec<usize> {
    batch.iter().flat_map(|d| d.labels()).collect()
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    g.value(v).item()
}

const SPLIT: u64 = 0x7370_6c69;

/// Train/validation/test partition of a corpus, fixed by the config's
/// data seed and split fractions.
pub fn split_for_config(cfg: &ModelConfig, records: &[DialogueRecord]) -> Result<Splits> {
    split_dataset(records, cfg.data.split, seeds::derive(Seeds::from_config(cfg).data, &[SPLIT]))
}

/// Fills `max_positions` from the corpus when it is unset.
pub fn with_positions(cfg: &ModelConfig, corpora: &[&[DialogueRecord]]) -> ModelConfig {
    let mut cfg = cfg.clone();
    if cfg.model.max_positions.is_none() {
        let all: Vec<DialogueRecord> = corpora.iter().flat_map(|c| c.iter().cloned()).collect();
        cfg.model.max_positions = Some(positions_for(&all));
    }
    cfg
}

/// Optimizes a teacher on supervision plus label smoothing.
pub struct TeacherTrainer {
    pub teacher: TeacherModel,
    adam: Adam,
}

impl TeacherTrainer {
    pub fn new(cfg: &ModelConfig) -> Self {
        let teacher = TeacherModel::new(cfg);
        let adam = Adam::new(AdamConfig::from(&cfg.optim), &teacher.params);
        Self { teacher, adam }
    }

    pub fn step(&mut self, batch: &[&DialogueRecord], seeds: &[u64]) -> Result<StepReport> {
        let cfg = &self.teacher.config;
        let labels = stack_labels(batch);
        let (breakdown, grads) = {
            let mut g = Graph::new();
            let mut scope = Scope::trainable(&self.teacher.params);
            let mut logits = Vec::with_capacity(batch.len());
            for (d, &seed) in batch.iter().zip(seeds) {
                logits.push(self.teacher.forward(&mut g, &mut scope, d, Mode::Train, seed)?.logits);
            }
            let logits = g.concat_rows(&logits)?;
            let p = g.softmax(logits, 1, 1.0)?;
            let la = align_loss(&mut g, p, &labels)?;
            let ls = label_smooth_loss(&mut g, p, &labels, cfg.ikd.epsilon, cfg.ikd.smoothing)?;
            let lc = g.constant(Tensor::scalar(0.0));
            let obj = ikd_objective(&mut g, [lc, la, ls], TEACHER_KAPPA)?;
            g.backward(obj)?;
            let b = ikd_total(0.0, scalar(&g, la)?, scalar(&g, ls)?, TEACHER_KAPPA);
            (b, scope.gradients(&g))
        };
        self.adam.step(&mut self.teacher.params, &grads)?;
        Ok(StepReport {
            breakdown,
            utterances: labels.len(),
            teacher_grad_leak: false,
        })
    }
}

/// Optimizes a student under the weighted distillation objective.
pub struct StudentTrainer<'t> {
    pub student: StudentModel,
    teacher: Option<&'t TeacherModel>,
    kappa: [f64; 3],
    adam: Adam,
}

impl<'t> StudentTrainer<'t> {
    /// With distillation enabled the teacher must be present, frozen and
    /// agree on the class count.
    pub fn new(cfg: &ModelConfig, teacher: Option<&'t TeacherModel>) -> Result<Self> {
        let teacher = if cfg.ablation.ikd {
            let t = teacher.ok_or_else(|| Error::Config("teacher checkpoint required".into()))?;
            if !t.is_frozen() {
                return Err(Error::Contract("teacher must be frozen before student training".into()));
            }
            if t.num_classes() != cfg.model.num_classes {
                return Err(Error::Config(format!(
                    "teacher has {} classes, student config has {}",
                    t.num_classes(),
                    cfg.model.num_classes
                )));
            }
            Some(t)
        } else {
            None
        };
        let student = StudentModel::new(cfg, teacher.map(TeacherModel::width));
        let adam = Adam::new(AdamConfig::from(&cfg.optim), &student.params);
        let mut kappa = cfg.ikd.kappa();
        if teacher.is_none() {
            kappa[0] = 0.0;
        }
        Ok(Self {
            student,
            teacher,
            kappa,
            adam,
        })
    }

    pub fn kappa(&self) -> [f64; 3] {
        self.kappa
    }

    pub fn step(&mut self, batch: &[&DialogueRecord], seeds: &[u64]) -> Result<StepReport> {
        let labels = stack_labels(batch);
        let (breakdown, grads, leak) = {
            let mut g = Graph::new();
            let mut scope = Scope::trainable(&self.student.params);
            let mut teacher_scope = self.teacher.map(|t| Scope::frozen(&t.params));
            let teacher = self.teacher.zip(teacher_scope.as_mut());
            let loss = student_objective(&mut g, &mut scope, &self.student, teacher, batch, seeds, self.kappa)?;
            g.backward(loss.objective)?;
            let [lc, la, ls] = loss.parts;
            let b = ikd_total(scalar(&g, lc)?, scalar(&g, la)?, scalar(&g, ls)?, self.kappa);
            let leak = teacher_scope.as_ref().is_some_and(|ts| ts.any_gradient(&g));
            (b, scope.gradients(&g), leak)
        };
        self.adam.step(&mut self.student.params, &grads)?;
        Ok(StepReport {
            breakdown,
            utterances: labels.len(),
            teacher_grad_leak: leak,
        })
    }
}

/// Graph nodes of the student objective for one batch.
#[derive(Clone, Copy, Debug)]
pub struct StudentLoss {
    pub objective: Var,
    /// Cross distillation, supervision and smoothing terms, in that order.
    pub parts: [Var; 3],
}

/// Builds the weighted student objective on `g`.
///
/// `teacher` carries the frozen teacher and its scope; without it the
/// cross term is a constant zero. `seeds[k]` drives the routing noise of
/// `batch[k]`.
pub fn student_objective(
    g: &mut Graph,
    scope: &mut Scope<'_>,
    student: &StudentModel,
    mut teacher: Option<(&TeacherModel, &mut Scope<'_>)>,
    batch: &[&DialogueRecord],
    seeds: &[u64],
    kappa: [f64; 3],
) -> Result<StudentLoss> {
    if seeds.len() != batch.len() {
        return Err(Error::Contract(format!("{} seeds for {} dialogues", seeds.len(), batch.len())));
    }
    let cfg = &student.config;
    let labels = stack_labels(batch);
    let mut logits = Vec::with_capacity(batch.len());
    let mut teacher_rows = Vec::new();
    let mut student_rows = Vec::new();
    for (d, &seed) in batch.iter().zip(seeds) {
        let out = student.forward(g, scope, d, Mode::Train, seed)?;
        logits.push(out.logits);
        if let Some((t, ts)) = teacher.as_mut() {
            let own = t.forward(g, ts, d, Mode::Eval, 0)?;
            teacher_rows.push(own.logits);
            let adapted = student.adapt(g, scope, out.fused)?;
            student_rows.push(t.logits_on_student(g, ts, adapted)?);
        }
    }
    let logits = g.concat_rows(&logits)?;
    let p = g.softmax(logits, 1, 1.0)?;
    let la = align_loss(g, p, &labels)?;
    let ls = label_smooth_loss(g, p, &labels, cfg.ikd.epsilon, cfg.ikd.smoothing)?;
    let lc = if teacher_rows.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let t = g.concat_rows(&teacher_rows)?;
        let pt = g.softmax(t, 1, 1.0)?;
        let s = g.concat_rows(&student_rows)?;
        let ps = g.softmax(s, 1, 1.0)?;
        cross_kd_loss(g, pt, ps)?
    };
    let objective = ikd_objective(g, [lc, la, ls], kappa)?;
    Ok(StudentLoss {
        objective,
        parts: [lc, la, ls],
    })
}

/// Finite-difference check of the full student objective on `batch`
/// against the analytic gradient of every student parameter.
///
/// With distillation enabled and no teacher supplied, a freshly
/// initialized teacher is frozen and used. Routing noise is fixed per
/// dialogue so the loss is deterministic.
pub fn check_student_gradients(
    cfg: &ModelConfig,
    teacher: Option<&TeacherModel>,
    batch: &[DialogueRecord],
    eps: f64,
) -> Result<GradCheckReport> {
    let cfg = with_positions(cfg, &[batch]);
    let fresh;
    let teacher = match teacher {
        Some(t) => Some(t),
        None if cfg.ablation.ikd => {
            let mut t = TeacherModel::new(&cfg);
            t.freeze();
            fresh = t;
            Some(&fresh)
        }
        None => None,
    };
    let trainer = StudentTrainer::new(&cfg, teacher)?;
    let noise = Seeds::from_config(&cfg).noise;
    let refs: Vec<&DialogueRecord> = batch.iter().collect();
    let seeds: Vec<u64> = (0..refs.len()).map(|k| step_seed(noise, 0, 0, k)).collect();
    let student = &trainer.student;
    finite_difference_check(&student.params, eps, |g, scope| {
        let mut ts = teacher.map(|t| Scope::frozen(&t.params));
        let t = teacher.zip(ts.as_mut());
        Ok(student_objective(g, scope, student, t, &refs, &seeds, trainer.kappa)?.objective)
    })
}

/// Averages step components weighted by utterance count.
fn epoch_breakdown(steps: &[StepReport], kappa: [f64; 3]) -> LossBreakdown {
    let n: usize = steps.iter().map(|s| s.utterances).sum();
    let mean = |f: fn(&LossBreakdown) -> f64| {
        steps.iter().map(|s| f(&s.breakdown) * s.utterances as f64).sum::<f64>() / n as f64
    };
    ikd_total(mean(|b| b.l_cross), mean(|b| b.l_align), mean(|b| b.l_smooth), kappa)
}

/// Shared epoch loop: optimization, validation, best-epoch tracking.
struct Loop<'a> {
    cfg: &'a ModelConfig,
    train: &'a [DialogueRecord],
    val: &'a [DialogueRecord],
    options: &'a TrainOptions,
}

struct LoopOutcome {
    history: Vec<EpochSummary>,
    best_epoch: usize,
    best_params: ParamStore,
}

impl Loop<'_> {
    fn run<M: Predictor>(
        &self,
        kappa: [f64; 3],
        mut step: impl FnMut(&[&DialogueRecord], &[u64]) -> Result<StepReport>,
        model: impl Fn() -> (ParamStore, M),
    ) -> Result<LoopOutcome> {
        if utterance_count(self.train) == 0 {
            return Err(Error::Validation("training set is empty".into()));
        }
        let seeds = Seeds::from_config(self.cfg);
        let mut history = Vec::new();
        let mut best: Option<(f64, usize, ParamStore)> = None;
        for epoch in 1..=self.cfg.optim.epochs {
            let mut steps = Vec::new();
            let batches = epoch_batches(self.train.len(), self.cfg.optim.batch_size, seeds.shuffle, epoch);
            for (b, idx) in batches.iter().enumerate() {
                let batch: Vec<&DialogueRecord> = idx.iter().map(|&i| &self.train[i]).collect();
                let noise: Vec<u64> = (0..batch.len()).map(|k| step_seed(seeds.noise, epoch, b, k)).collect();
                steps.push(step(&batch, &noise)?);
            }
            let breakdown = epoch_breakdown(&steps, kappa);
            let (params, predictor) = model();
            let val = if utterance_count(self.val) > 0 {
                Some(evaluate(&predictor, self.val)?)
            } else {
                None
            };
            let train_accuracy = if self.options.track_train_accuracy {
                Some(evaluate(&predictor, self.train)?.accuracy)
            } else {
                None
            };
            let score = val.as_ref().map_or(f64::NEG_INFINITY, |r| r.w_f1);
            let improves = match &best {
                None => true,
                Some((s, _, _)) => score > *s || (val.is_none()),
            };
            if improves {
                best = Some((score, epoch, params));
            }
            let summary = EpochSummary {
                log: EpochLog {
                    epoch,
                    l_cross: breakdown.l_cross,
                    l_align: breakdown.l_align,
                    l_smooth: breakdown.l_smooth,
                    total: breakdown.total,
                    val_wf1: val.as_ref().map(|r| r.w_f1),
                },
                kappa,
                val_accuracy: val.as_ref().map(|r| r.accuracy),
                train_accuracy,
            };
            log::info!(
                "epoch {epoch}: total {:.6} (cross {:.6}, align {:.6}, smooth {:.6}), val w-F1 {}, train acc {}",
                summary.log.total,
                summary.log.l_cross,
                summary.log.l_align,
                summary.log.l_smooth,
                summary.log.val_wf1.map_or("n/a".to_string(), |v| format!("{v:.4}")),
                train_accuracy.map_or("n/a".to_string(), |v| format!("{v:.4}")),
            );
            history.push(summary);
            if let (Some(limit), Some(acc)) = (self.options.stop_at_train_accuracy, train_accuracy) {
                if acc > limit {
                    break;
                }
            }
        }
        let (_, best_epoch, best_params) = best.ok_or_else(|| Error::Config("epochs must be > 0".into()))?;
        Ok(LoopOutcome {
            history,
            best_epoch,
            best_params,
        })
    }
}

pub struct TeacherRun {
    /// Parameters of the best epoch, frozen.
    pub teacher: TeacherModel,
    pub history: Vec<EpochSummary>,
    pub best_epoch: usize,
}

/// Trains a teacher, keeps the epoch with the best validation weighted F1
/// (the last epoch without validation data) and freezes it.
pub fn train_teacher(
    cfg: &ModelConfig,
    train: &[DialogueRecord],
    val: &[DialogueRecord],
    options: &TrainOptions,
) -> Result<TeacherRun> {
    let cfg = with_positions(cfg, &[train, val]);
    let trainer = std::cell::RefCell::new(TeacherTrainer::new(&cfg));
    let outcome = Loop {
        cfg: &cfg,
        train,
        val,
        options,
    }
    .run(
        TEACHER_KAPPA,
        |batch, noise| trainer.borrow_mut().step(batch, noise),
        || {
            let t = trainer.borrow().teacher.clone();
            (t.params.clone(), t)
        },
    )?;
    let mut teacher = trainer.into_inner().teacher;
    teacher.params.load_values_from(&outcome.best_params)?;
    teacher.freeze();
    Ok(TeacherRun {
        teacher,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
    })
}

pub struct StudentRun {
    /// Parameters of the best epoch.
    pub student: StudentModel,
    pub history: Vec<EpochSummary>,
    pub best_epoch: usize,
}

/// Trains a student; `teacher` is required unless distillation is ablated.
pub fn train_student(
    cfg: &ModelConfig,
    teacher: Option<&TeacherModel>,
    train: &[DialogueRecord],
    val: &[DialogueRecord],
    options: &TrainOptions,
) -> Result<StudentRun> {
    let cfg = with_positions(cfg, &[train, val]);
    let trainer = std::cell::RefCell::new(StudentTrainer::new(&cfg, teacher)?);
    let kappa = trainer.borrow().kappa();
    let outcome = Loop {
        cfg: &cfg,
        train,
        val,
        options,
    }
    .run(
        kappa,
        |batch, noise| {
            let report = trainer.borrow_mut().step(batch, noise)?;
            if report.teacher_grad_leak {
                return Err(Error::Contract("a gradient reached a frozen teacher parameter".into()));
            }
            Ok(report)
        },
        || {
            let s = trainer.borrow().student.clone();
            (s.params.clone(), s)
        },
    )?;
    let mut student = trainer.into_inner().student;
    student.params.load_values_from(&outcome.best_params)?;
    Ok(StudentRun {
        student,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
    })
}

/// Writes one JSON object per epoch.
pub fn write_loss_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in logs {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<EpochLog>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// CSV with header `dialogue_id,index,label,predicted,e0,…`, one row per
/// utterance holding the representation the classifier reads.
pub fn export_embeddings(model: &AnyModel, data: &[DialogueRecord], path: &Path) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let width = model.config().model.d_s;
    let mut header = vec!["dialogue_id".to_string(), "index".into(), "label".into(), "predicted".into()];
    header.extend((0..width).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    let mut rows = 0;
    for d in data {
        let (predicted, fused) = model.infer(d)?;
        for (i, u) in d.utterances.iter().enumerate() {
            let mut record = vec![
                d.dialogue_id.clone(),
                i.to_string(),
                u.label.to_string(),
                predicted[i].to_string(),
            ];
            record.extend(fused.row_slice(i).iter().map(f64::to_string));
            w.write_record(&record)?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.model.d_t = 4;
        c.model.d_a = 3;
        c.model.d_v = 2;
        c.model.d_s = 4;
        c.model.heads = 1;
        c.model.fusion_layers = 1;
        c.model.ffn_hidden = Some(8);
        c.model.num_classes = 3;
        c.sdmoe.experts = 2;
        c.optim.lr = 1e-2;
        c.optim.batch_size = 2;
        c.optim.epochs = 2;
        c.data.synthetic_utterances = 16;
        c.data.dialogue_min_len = 2;
        c.data.dialogue_max_len = 4;
        c.resolved().unwrap()
    }

    #[test]
    fn batches_cover_every_dialogue_once() {
        let b = epoch_batches(7, 3, 11, 1);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(7, 3, 11, 1));
        assert_ne!(b, epoch_batches(7, 3, 11, 2));
    }

    #[test]
    fn epoch_totals_recombine_bitwise() {
        let cfg = tiny();
        let data = generate_synthetic(&cfg, 1).unwrap();
        let run = train_teacher(&cfg, &data, &data, &TrainOptions::default()).unwrap();
        assert!(run.teacher.is_frozen());
        assert_eq!(run.history.len(), 2);
        for h in &run.history {
            assert_eq!(h.breakdown().recombined().to_bits(), h.log.total.to_bits());
            assert_eq!(h.log.l_cross, 0.0);
            assert!(h.log.val_wf1.is_some());
        }
        let student = train_student(&cfg, Some(&run.teacher), &data, &[], &TrainOptions::default()).unwrap();
        for h in &student.history {
            assert_eq!(h.breakdown().recombined().to_bits(), h.log.total.to_bits());
            assert!(h.log.l_cross >= 0.0);
            assert!(h.log.val_wf1.is_none());
        }
        assert_eq!(student.best_epoch, 2);
    }

    #[test]
    fn student_requires_frozen_matching_teacher() {
        let cfg = tiny();
        assert!(matches!(StudentTrainer::new(&cfg, None), Err(Error::Config(m)) if m == "teacher checkpoint required"));
        let mut t = TeacherModel::new(&cfg);
        assert!(matches!(StudentTrainer::new(&cfg, Some(&t)), Err(Error::Contract(_))));
        let mut other = cfg.clone();
        other.model.num_classes = 4;
        other.model.labels = None;
        let other = other.resolved().unwrap();
        t.freeze();
        assert!(matches!(StudentTrainer::new(&other, Some(&t)), Err(Error::Config(_))));
        let mut no_ikd = cfg.clone();
        no_ikd.ablation.ikd = false;
        assert_eq!(StudentTrainer::new(&no_ikd, None).unwrap().kappa(), [0.0, 0.3, 0.3]);
    }

    #[test]
    fn loss_log_round_trips() {
        let logs = vec![
            EpochLog {
                epoch: 1,
                l_cross: 0.1,
                l_align: 1.0 / 3.0,
                l_smooth: 2.5,
                total: 0.9,
                val_wf1: Some(0.25),
            },
            EpochLog {
                epoch: 2,
                l_cross: 0.0,
                l_align: 1e-300,
                l_smooth: 7.0,
                total: 2.1,
                val_wf1: None,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.jsonl");
        write_loss_log(&path, &logs).unwrap();
        assert_eq!(read_loss_log(&path).unwrap(), logs);
        let first = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for k in ["epoch", "l_cross", "l_align", "l_smooth", "total", "val_wf1"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn evaluate_rejects_empty_data() {
        let cfg = tiny();
        let t = TeacherModel::new(&cfg);
        assert!(evaluate(&t, &[]).is_err());
    }
}
