//! Teacher and student networks.
//!
//! Sequences run over the utterances of one dialogue: row `i` of every
//! intermediate tensor belongs to utterance `i`, and the classifier maps
//! each row of the fused sequence to that utterance's class logits.
//!
//! * Teacher: text embedding → text expert mixture → self-attention
//!   encoder → classifier.
//! * Student: per-modality embedding → per-modality expert mixture →
//!   cross-modal fusion → classifier, plus an adapter that feeds the fused
//!   rows to the teacher's classifier for distillation.
//!
//! Ablation switches replace the expert mixture by the identity and
//! fusion by concatenation followed by a linear map.

use crate::config::{Modality, ModelConfig};
use crate::data::DialogueRecord;
use crate::embed::{EmbeddingParams, MIN_POSITIONS};
use crate::error::{Error, Result};
use crate::hcmf::{ConcatFusion, FusionStack, Hcmf};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamStore, Scope};
use crate::sdmoe::{GateDecision, Mode, RoutingParams, Sdmoe};
use crate::seeds::{self, Seeds};
use crate::tensor::{Graph, Tensor, Var};

const EMBED: u64 = 1;
const EXPERTS: u64 = 2;
const FUSION: u64 = 3;
const CLASSIFIER: u64 = 4;
const ADAPTER: u64 = 5;
const ENCODER: u64 = 6;

fn routing(cfg: &ModelConfig) -> RoutingParams {
    RoutingParams {
        tau: cfg.sdmoe.tau,
        alpha: cfg.sdmoe.alpha,
        one_sided: cfg.sdmoe.one_sided,
    }
}

/// Routing-noise seed for one modality of one forward pass.
pub fn modality_seed(seed: u64, m: Modality) -> u64 {
    seeds::derive(seed, &[m.code()])
}

fn max_positions(cfg: &ModelConfig) -> usize {
    cfg.model.max_positions.unwrap_or(MIN_POSITIONS)
}

/// Row-wise argmax.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    t.to_rows()
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect()
}

/// Outputs of one teacher forward pass.
pub struct TeacherOutput {
    /// Encoder output, one row per utterance (`l × d_s`).
    pub features: Var,
    pub logits: Var,
    pub decision: GateDecision,
}

/// Text-only network that guides the student once trained.
#[derive(Clone, Debug)]
pub struct TeacherModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embed: EmbeddingParams,
    pub sdmoe: Sdmoe,
    pub encoder: FusionStack,
    pub final_norm: LayerNorm,
    pub classifier: Linear,
    frozen: bool,
}

impl TeacherModel {
    pub fn new(cfg: &ModelConfig) -> Self {
        let root = Seeds::from_config(cfg).teacher_init;
        let rng = |part: u64| seeds::rng(seeds::derive(root, &[part]));
        let m = &cfg.model;
        let mut params = ParamStore::new();
        let embed = EmbeddingParams::new(
            &mut params,
            &mut rng(EMBED),
            "teacher.embed",
            cfg,
            &[Modality::Text],
            max_positions(cfg),
        );
        let sdmoe = Sdmoe::new(
            &mut params,
            &mut rng(EXPERTS),
            "teacher.sdmoe.text",
            cfg.sdmoe.experts,
            m.d_s,
            m.gru_hidden(),
        );
        let encoder = FusionStack::new(&mut params, &mut rng(ENCODER), "teacher.encoder", cfg, m.teacher_layers());
        let final_norm = LayerNorm::new(&mut params, "teacher.final_norm", m.d_s);
        let classifier = Linear::new(
            &mut params,
            &mut rng(CLASSIFIER),
            "teacher.classifier",
            m.d_s,
            m.num_classes,
            true,
        );
        Self {
            config: cfg.clone(),
            params,
            embed,
            sdmoe,
            encoder,
            final_norm,
            classifier,
            frozen: false,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn width(&self) -> usize {
        self.config.model.d_s
    }

    pub fn num_classes(&self) -> usize {
        self.config.model.num_classes
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        scope: &mut Scope<'_>,
        dialogue: &DialogueRecord,
        mode: Mode,
        seed: u64,
    ) -> Result<TeacherOutput> {
        let u = self.embed.embed_modality(g, scope, dialogue, Modality::Text)?;
        let (h, decision) = self.sdmoe.forward(
            g,
            scope,
            u,
            routing(&self.config),
            mode,
            modality_seed(seed, Modality::Text),
        )?;
        let h = self.encoder.self_attention(g, scope, h)?;
        let features = self.final_norm.forward(g, scope, h)?;
        let logits = self.classifier.forward(g, scope, features)?;
        Ok(TeacherOutput {
            features,
            logits,
            decision,
        })
    }

    /// Teacher classifier applied to (already adapted) student features.
    /// The teacher must be frozen and bound through a frozen scope.
    pub fn logits_on_student(&self, g: &mut Graph, scope: &mut Scope<'_>, features: Var) -> Result<Var> {
        if !self.frozen || scope.is_trainable() {
            return Err(Error::Contract(
                "teacher must be frozen before guiding a student".into(),
            ));
        }
        self.classifier.forward(g, scope, features)
    }

    /// Eval-mode class predictions for every utterance of a dialogue.
    pub fn predict(&self, dialogue: &DialogueRecord) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let mut scope = Scope::frozen(&self.params);
        let out = self.forward(&mut g, &mut scope, dialogue, Mode::Eval, 0)?;
        Ok(argmax_rows(g.value(out.logits)))
    }
}

/// Fusion used by the student.
#[derive(Clone, Debug)]
pub enum Fusion {
    Hierarchical(Hcmf),
    Concat(ConcatFusion),
}

/// Outputs of one student forward pass.
pub struct StudentOutput {
    /// Fused sequence, one row per utterance (`l × d_s`).
    pub fused: Var,
    pub logits: Var,
    pub decisions: Vec<(Modality, GateDecision)>,
}

/// Multimodal network trained under distillation.
#[derive(Clone, Debug)]
pub struct StudentModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub modalities: Vec<Modality>,
    pub embed: EmbeddingParams,
    pub experts: Vec<(Modality, Sdmoe)>,
    pub fusion: Fusion,
    pub classifier: Linear,
    /// Maps fused rows to the teacher's width; identity-initialized when
    /// the widths agree. Absent when distillation is disabled.
    pub adapter: Option<Linear>,
}

impl StudentModel {
    /// `teacher_width` is the teacher's model width, used to size the adapter.
    pub fn new(cfg: &ModelConfig, teacher_width: Option<usize>) -> Self {
        let root = Seeds::from_config(cfg).init;
        let rng = |part: &[u64]| seeds::rng(seeds::derive(root, part));
        let m = &cfg.model;
        let modalities = cfg.active_modalities();
        let mut params = ParamStore::new();
        let embed = EmbeddingParams::new(
            &mut params,
            &mut rng(&[EMBED]),
            "student.embed",
            cfg,
            &modalities,
            max_positions(cfg),
        );
        let experts = if cfg.ablation.sdmoe {
            modalities
                .iter()
                .map(|&md| {
                    let moe = Sdmoe::new(
                        &mut params,
                        &mut rng(&[EXPERTS, md.code()]),
                        &format!("student.sdmoe.{md}"),
                        cfg.sdmoe.experts,
                        m.d_s,
                        m.gru_hidden(),
                    );
                    (md, moe)
                })
                .collect()
        } else {
            Vec::new()
        };
        let fusion = if cfg.ablation.hcmf {
            Fusion::Hierarchical(Hcmf::new(
                &mut params,
                &mut rng(&[FUSION]),
                "student.hcmf",
                cfg,
                &modalities,
                cfg.ablation.branches,
            ))
        } else {
            Fusion::Concat(ConcatFusion::new(
                &mut params,
                &mut rng(&[FUSION]),
                "student.concat",
                m.d_s,
                &modalities,
            ))
        };
        let classifier = Linear::new(
            &mut params,
            &mut rng(&[CLASSIFIER]),
            "student.classifier",
            m.d_s,
            m.num_classes,
            true,
        );
        let adapter = cfg.ablation.ikd.then(|| {
            let width = teacher_width.unwrap_or(m.d_s);
            let weight = if width == m.d_s {
                Tensor::identity(width)
            } else {
                Init::new(&mut rng(&[ADAPTER])).uniform(&[m.d_s, width], 1.0 / (m.d_s as f64).sqrt())
            };
            Linear::from_weight(&mut params, "student.adapter", weight, None)
        });
        Self {
            config: cfg.clone(),
            params,
            modalities,
            embed,
            experts,
            fusion,
            classifier,
            adapter,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        scope: &mut Scope<'_>,
        dialogue: &DialogueRecord,
        mode: Mode,
        seed: u64,
    ) -> Result<StudentOutput> {
        let embedded = self.embed.embed_utterances(g, scope, dialogue)?;
        let mut encoded = Vec::with_capacity(embedded.len());
        let mut decisions = Vec::new();
        for (m, u) in embedded {
            match self.experts.iter().find(|(k, _)| *k == m) {
                Some((_, moe)) => {
                    let (h, d) = moe.forward(g, scope, u, routing(&self.config), mode, modality_seed(seed, m))?;
                    decisions.push((m, d));
                    encoded.push((m, h));
                }
                None => encoded.push((m, u)),
            }
        }
        let fused = match &self.fusion {
            Fusion::Hierarchical(h) => h.forward(g, scope, &encoded)?.0,
            Fusion::Concat(c) => c.forward(g, scope, &encoded)?,
        };
        let logits = self.classifier.forward(g, scope, fused)?;
        Ok(StudentOutput {
            fused,
            logits,
            decisions,
        })
    }

    /// Adapter image of the fused rows; the fused rows themselves when no adapter exists.
    pub fn adapt(&self, g: &mut Graph, scope: &mut Scope<'_>, fused: Var) -> Result<Var> {
        match &self.adapter {
            Some(a) => a.forward(g, scope, fused),
            None => Ok(fused),
        }
    }

    /// Eval-mode predictions and fused rows for one dialogue.
    pub fn infer(&self, dialogue: &DialogueRecord) -> Result<(Vec<usize>, Tensor)> {
        let mut g = Graph::new();
        let mut scope = Scope::frozen(&self.params);
        let out = self.forward(&mut g, &mut scope, dialogue, Mode::Eval, 0)?;
        Ok((argmax_rows(g.value(out.logits)), g.value(out.fused).clone()))
    }

    pub fn predict(&self, dialogue: &DialogueRecord) -> Result<Vec<usize>> {
        Ok(self.infer(dialogue)?.0)
    }

    /// Eval-mode logits for one dialogue.
    pub fn logits(&self, dialogue: &DialogueRecord) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut scope = Scope::frozen(&self.params);
        let out = self.forward(&mut g, &mut scope, dialogue, Mode::Eval, 0)?;
        Ok(g.value(out.logits).clone())
    }
}

/// Either trained network, for commands that accept both.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Teacher(TeacherModel),
    Student(StudentModel),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Teacher(t) => &t.config,
            AnyModel::Student(s) => &s.config,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            AnyModel::Teacher(t) => &t.params,
            AnyModel::Student(s) => &s.params,
        }
    }

    /// Eval-mode predictions and the per-utterance representation fed to the classifier.
    pub fn infer(&self, dialogue: &DialogueRecord) -> Result<(Vec<usize>, Tensor)> {
        match self {
            AnyModel::Student(s) => s.infer(dialogue),
            AnyModel::Teacher(t) => {
                let mut g = Graph::new();
                let mut scope = Scope::frozen(&t.params);
                let out = t.forward(&mut g, &mut scope, dialogue, Mode::Eval, 0)?;
                Ok((argmax_rows(g.value(out.logits)), g.value(out.features).clone()))
            }
        }
    }
}
