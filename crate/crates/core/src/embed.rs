//! Utterance-speaker embedding: projected features plus a learned speaker
//! vector plus an absolute position vector, per modality.

use rand_chacha::ChaCha8Rng;

use crate::config::{Modality, ModelConfig};
use crate::data::DialogueRecord;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamId, ParamStore, Scope};
use crate::tensor::{Graph, Tensor, Var};

/// Smallest position table ever allocated.
pub const MIN_POSITIONS: usize = 64;

const TABLE_INIT_STD: f64 = 0.02;

/// Position-table size for a corpus: its longest dialogue, at least [`MIN_POSITIONS`].
pub fn positions_for(records: &[DialogueRecord]) -> usize {
    records
        .iter()
        .map(DialogueRecord::len)
        .max()
        .unwrap_or(0)
        .max(MIN_POSITIONS)
}

#[derive(Clone, Debug)]
pub struct ModalityEmbedding {
    pub modality: Modality,
    /// `d_m → d_s`, no bias.
    pub projection: Linear,
    /// `num_speakers × d_s`.
    pub speakers: ParamId,
}

#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub modalities: Vec<ModalityEmbedding>,
    /// `max_positions × d_s`, shared by all modalities.
    pub positions: ParamId,
    pub max_positions: usize,
}

impl EmbeddingParams {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &ModelConfig,
        modalities: &[Modality],
        max_positions: usize,
    ) -> Self {
        let d_s = cfg.model.d_s;
        let modalities = modalities
            .iter()
            .map(|&m| {
                let name = format!("{prefix}.{m}");
                let projection = Linear::new(
                    store,
                    rng,
                    &format!("{name}.proj"),
                    cfg.model.input_dim(m),
                    d_s,
                    false,
                );
                let table = Init::new(rng).normal(&[cfg.model.num_speakers, d_s], TABLE_INIT_STD);
                ModalityEmbedding {
                    modality: m,
                    projection,
                    speakers: store.add(format!("{name}.speakers"), table),
                }
            })
            .collect();
        let table = Init::new(rng).normal(&[max_positions, d_s], TABLE_INIT_STD);
        Self {
            modalities,
            positions: store.add(format!("{prefix}.positions"), table),
            max_positions,
        }
    }

    pub fn get(&self, m: Modality) -> Option<&ModalityEmbedding> {
        self.modalities.iter().find(|e| e.modality == m)
    }

    /// `U_e` for one modality of a dialogue: `l × d_s`.
    pub fn embed_modality(
        &self,
        g: &mut Graph,
        scope: &mut Scope<'_>,
        dialogue: &DialogueRecord,
        m: Modality,
    ) -> Result<Var> {
        let e = self
            .get(m)
            .ok_or_else(|| Error::Config(format!("no embedding for modality {m}")))?;
        let len = dialogue.len();
        if len == 0 {
            return Err(Error::Contract(format!(
                "dialogue {} has no utterances",
                dialogue.dialogue_id
            )));
        }
        if len > self.max_positions {
            return Err(Error::Bounds {
                what: "position",
                index: len - 1,
                len: self.max_positions,
            });
        }
        let rows: Vec<Vec<f64>> = dialogue
            .utterances
            .iter()
            .map(|u| u.features(m).to_vec())
            .collect();
        let x = g.constant(Tensor::from_rows(&rows));
        let projected = e.projection.forward(g, scope, x)?;
        let speakers = scope.get(g, e.speakers);
        let speaker_rows = g.gather_rows(speakers, &dialogue.speakers())?;
        let positions = scope.get(g, self.positions);
        let index: Vec<usize> = (0..len).collect();
        let position_rows = g.gather_rows(positions, &index)?;
        g.add_all(&[projected, speaker_rows, position_rows])
    }

    /// `U_e` for every configured modality, in configuration order.
    pub fn embed_utterances(
        &self,
        g: &mut Graph,
        scope: &mut Scope<'_>,
        dialogue: &DialogueRecord,
    ) -> Result<Vec<(Modality, Var)>> {
        self.modalities
            .iter()
            .map(|e| Ok((e.modality, self.embed_modality(g, scope, dialogue, e.modality)?)))
            .collect()
    }
}
