//! Model and training configuration.
//!
//! The on-disk format is TOML with one table per concern
//! (`model`, `sdmoe`, `ikd`, `optim`, `ablation`, `data`, `run`).
//! Missing keys take the defaults below; unknown keys are rejected.
//! Environment variables `SUMMER_<SECTION>_<KEY>` override file values,
//! e.g. `SUMMER_OPTIM_LR=1e-3`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ENV_PREFIX: &str = "SUMMER_";

const IEMOCAP_LABELS: [&str; 6] = ["happy", "sad", "neutral", "anger", "excitement", "frustration"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
    Visual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Visual];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Audio => "audio",
            Modality::Visual => "visual",
        }
    }

    /// Stable small integer used in seed derivation.
    pub fn code(self) -> u64 {
        match self {
            Modality::Text => 0,
            Modality::Audio => 1,
            Modality::Visual => 2,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which fusion branches run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branches {
    /// Text, audio and visual anchors, outputs averaged.
    All,
    /// Text anchor only: text→audio, then →visual.
    Text,
}

/// Form of the label-smoothing term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingForm {
    /// Cross-entropy against smoothed targets: −Σ q·log p.
    Standard,
    /// Prediction weighted log of smoothed targets: −Σ p·log q.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    /// Shared embedding width.
    pub d_s: usize,
    pub heads: usize,
    /// Per-head width; defaults to `d_s / heads`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    pub fusion_layers: usize,
    /// Self-attention layers in the teacher encoder; defaults to `fusion_layers`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_layers: Option<usize>,
    /// BiGRU hidden width per direction; defaults to `d_s`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gru_hidden: Option<usize>,
    /// Feed-forward hidden width; defaults to `4 * d_s`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_hidden: Option<usize>,
    pub num_classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    pub num_speakers: usize,
    /// Position table rows; resolved from the training corpus when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_positions: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_t: 100,
            d_a: 100,
            d_v: 256,
            d_s: 100,
            heads: 4,
            head_dim: None,
            fusion_layers: 6,
            teacher_layers: None,
            gru_hidden: None,
            ffn_hidden: None,
            num_classes: 6,
            labels: None,
            num_speakers: 2,
            max_positions: None,
        }
    }
}

impl ModelSection {
    pub fn input_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.d_t,
            Modality::Audio => self.d_a,
            Modality::Visual => self.d_v,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim.unwrap_or(self.d_s / self.heads.max(1))
    }

    pub fn teacher_layers(&self) -> usize {
        self.teacher_layers.unwrap_or(self.fusion_layers)
    }

    pub fn gru_hidden(&self) -> usize {
        self.gru_hidden.unwrap_or(self.d_s)
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.d_s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdmoeSection {
    pub experts: usize,
    pub tau: f64,
    pub alpha: f64,
    /// Deactivate only low outliers instead of both tails.
    pub one_sided: bool,
    /// Routing-noise seed; derived from `run.seed` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
}

impl Default for SdmoeSection {
    fn default() -> Self {
        Self {
            experts: 4,
            tau: 0.5,
            alpha: 2.0,
            one_sided: false,
            noise_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IkdSection {
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa3: f64,
    pub epsilon: f64,
    pub smoothing: SmoothingForm,
}

impl Default for IkdSection {
    fn default() -> Self {
        Self {
            kappa1: 0.4,
            kappa2: 0.3,
            kappa3: 0.3,
            epsilon: 0.1,
            smoothing: SmoothingForm::Standard,
        }
    }
}

impl IkdSection {
    pub fn kappa(&self) -> [f64; 3] {
        [self.kappa1, self.kappa2, self.kappa3]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    /// Dialogues per optimization step.
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            epochs: 50,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub sdmoe: bool,
    pub hcmf: bool,
    pub ikd: bool,
    pub branches: Branches,
    pub modalities: Vec<Modality>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            sdmoe: true,
            hcmf: true,
            ikd: true,
            branches: Branches::All,
            modalities: Modality::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synthetic_utterances: usize,
    pub dialogue_min_len: usize,
    pub dialogue_max_len: usize,
    /// Ratio between the most and least frequent class; 1 is balanced.
    pub imbalance_ratio: f64,
    pub noise_std: f64,
    /// Distance of each class prototype from the origin, per modality.
    pub text_separation: f64,
    pub audio_separation: f64,
    pub visual_separation: f64,
    /// Train / validation / test fractions of dialogues.
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            synthetic_utterances: 200,
            dialogue_min_len: 4,
            dialogue_max_len: 12,
            imbalance_ratio: 1.0,
            noise_std: 1.0,
            text_separation: 4.0,
            audio_separation: 2.0,
            visual_separation: 1.5,
            split: [0.8, 0.1, 0.1],
        }
    }
}

impl DataSection {
    pub fn separation(&self, m: Modality) -> f64 {
        match m {
            Modality::Text => self.text_separation,
            Modality::Audio => self.audio_separation,
            Modality::Visual => self.visual_separation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Root seed; data, initialization, shuffling and routing noise derive from it.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 42 }
    }
}

/// Every architecture and training hyperparameter in one validated record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub model: ModelSection,
    pub sdmoe: SdmoeSection,
    pub ikd: IkdSection,
    pub optim: OptimSection,
    pub ablation: AblationSection,
    pub data: DataSection,
    pub run: RunSection,
}

impl ModelConfig {
    /// Fills derived defaults and checks every invariant.
    pub fn resolved(mut self) -> Result<Self> {
        let m = &mut self.model;
        if m.heads > 0 && m.head_dim.is_none() {
            if m.d_s % m.heads != 0 {
                return Err(Error::Config(format!(
                    "head_dim must be set when d_s ({}) is not divisible by heads ({})",
                    m.d_s, m.heads
                )));
            }
            m.head_dim = Some(m.d_s / m.heads);
        }
        m.teacher_layers.get_or_insert(m.fusion_layers);
        m.gru_hidden.get_or_insert(m.d_s);
        m.ffn_hidden.get_or_insert(4 * m.d_s);
        if m.labels.is_none() {
            m.labels = Some(if m.num_classes == IEMOCAP_LABELS.len() {
                IEMOCAP_LABELS.iter().map(|s| s.to_string()).collect()
            } else {
                (0..m.num_classes).map(|c| format!("class{c}")).collect()
            });
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("d_t", m.d_t),
            ("d_a", m.d_a),
            ("d_v", m.d_v),
            ("d_s", m.d_s),
            ("heads", m.heads),
            ("head_dim", m.head_dim()),
            ("fusion_layers", m.fusion_layers),
            ("teacher_layers", m.teacher_layers()),
            ("gru_hidden", m.gru_hidden()),
            ("ffn_hidden", m.ffn_hidden()),
            ("num_classes", m.num_classes),
            ("num_speakers", m.num_speakers),
            ("experts", self.sdmoe.experts),
            ("batch_size", self.optim.batch_size),
            ("synthetic_utterances", self.data.synthetic_utterances),
            ("dialogue_min_len", self.data.dialogue_min_len),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be > 0")));
            }
        }
        if m.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if let Some(p) = m.max_positions {
            if p == 0 {
                return Err(Error::Config("max_positions must be > 0".into()));
            }
        }
        if let Some(labels) = &m.labels {
            if labels.len() != m.num_classes {
                return Err(Error::Config(format!(
                    "labels must list num_classes ({}) names, got {}",
                    m.num_classes,
                    labels.len()
                )));
            }
        }
        let s = &self.sdmoe;
        if !(s.tau > 0.0 && s.tau.is_finite()) {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if !(s.alpha > 0.0 && s.alpha.is_finite()) {
            return Err(Error::Config("alpha must be > 0".into()));
        }
        let k = &self.ikd;
        for (key, v) in [("kappa1", k.kappa1), ("kappa2", k.kappa2), ("kappa3", k.kappa3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{key} must be >= 0")));
            }
        }
        if !(k.epsilon > 0.0 && k.epsilon < 1.0) {
            return Err(Error::Config("epsilon must be in (0, 1)".into()));
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        for (key, v) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{key} must be in [0, 1)")));
            }
        }
        if !(o.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be > 0".into()));
        }
        let a = &self.ablation;
        if a.modalities.is_empty() {
            return Err(Error::Config("modalities must name at least one modality".into()));
        }
        let mut seen = a.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != a.modalities.len() {
            return Err(Error::Config("modalities must not repeat".into()));
        }
        let d = &self.data;
        if d.dialogue_max_len < d.dialogue_min_len {
            return Err(Error::Config("dialogue_max_len must be >= dialogue_min_len".into()));
        }
        if !(d.imbalance_ratio >= 1.0) {
            return Err(Error::Config("imbalance_ratio must be >= 1".into()));
        }
        if !(d.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if d.split.iter().any(|&f| !(f >= 0.0)) || (d.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split must be nonnegative fractions summing to 1".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<String> {
        self.model
            .labels
            .clone()
            .unwrap_or_else(|| (0..self.model.num_classes).map(|c| format!("class{c}")).collect())
    }

    /// Modalities the student consumes, in canonical text/audio/visual order.
    pub fn active_modalities(&self) -> Vec<Modality> {
        Modality::ALL
            .into_iter()
            .filter(|m| self.ablation.modalities.contains(m))
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses TOML text, applies environment overrides, resolves and validates.
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {}", e.message())))?;
        check_known_keys(&table)?;
        apply_env(&mut table, env)?;
        let cfg: ModelConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {}", e.message())))?;
        cfg.resolved()
    }
}

/// Reads a config file, applying `SUMMER_*` environment overrides.
pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ModelConfig::from_toml_with_env(&text, std::env::vars())
}

fn key_template() -> toml::Table {
    let mut cfg = ModelConfig::default();
    let m = &mut cfg.model;
    m.head_dim = Some(0);
    m.teacher_layers = Some(0);
    m.gru_hidden = Some(0);
    m.ffn_hidden = Some(0);
    m.labels = Some(Vec::new());
    m.max_positions = Some(0);
    cfg.sdmoe.noise_seed = Some(0);
    toml::Value::try_from(&cfg)
        .expect("config serializes")
        .as_table()
        .cloned()
        .expect("table")
}

fn check_known_keys(table: &toml::Table) -> Result<()> {
    let template = key_template();
    for (section, value) in table {
        let Some(known) = template.get(section).and_then(toml::Value::as_table) else {
            return Err(Error::Config(format!("unknown config key `{section}`")));
        };
        let Some(entries) = value.as_table() else {
            return Err(Error::Config(format!("config key `{section}` must be a table")));
        };
        for key in entries.keys() {
            if !known.contains_key(key) {
                return Err(Error::Config(format!("unknown config key `{section}.{key}`")));
            }
        }
    }
    Ok(())
}

fn apply_env<I>(table: &mut toml::Table, env: I) -> Result<()>
where
    I: IntoIterator<Item = (String, String)>,
{
    let template = key_template();
    let mut vars: Vec<(String, String)> = env
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    for (name, raw) in vars {
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let (section, key) = rest.split_once('_').unwrap_or((rest.as_str(), ""));
        let known = template
            .get(section)
            .and_then(toml::Value::as_table)
            .is_some_and(|t| t.contains_key(key));
        if !known {
            return Err(Error::Config(format!(
                "unknown config key `{section}.{key}` (from environment variable {name})"
            )));
        }
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(raw));
        table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("config key `{section}` must be a table")))?
            .insert(key.to_string(), value);
    }
    Ok(())
}
