//! Hierarchical cross-modal fusion.
//!
//! Each branch takes one modality as the anchor (query stream) and
//! attends to the other modalities one at a time: the anchor fuses with
//! the first partner through a stack of attention layers, the result fuses
//! with the second partner through another stack, and a feed-forward
//! sublayer finishes the branch. Branch outputs are averaged.
//!
//! | anchor | first partner | second partner |
//! |--------|---------------|----------------|
//! | text   | audio         | visual         |
//! | audio  | visual        | text           |
//! | visual | text          | audio          |
//!
//! All branches share one set of stage parameters, so the text-only
//! configuration and the three-branch configuration have the same
//! parameter count and differ only in which anchors are evaluated.

use rand_chacha::ChaCha8Rng;

use crate::config::{Branches, Modality, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore, Scope};
use crate::tensor::{Graph, Tensor, Var};

/// Multi-head attention with a learnable scale `φ_h` on each head, followed
/// by a feed-forward sublayer. Both sublayers are pre-norm residual.
#[derive(Clone, Debug)]
pub struct DynAttn {
    pub norm: LayerNorm,
    /// `d_s → heads·head_dim` each; columns `h·head_dim..(h+1)·head_dim` belong to head `h`.
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    /// `1 × heads`, initialized to 1.
    pub phi: ParamId,
    /// `heads·head_dim → d_s`.
    pub output: Linear,
    pub ffn: FeedForward,
    pub heads: usize,
    pub head_dim: usize,
}

impl DynAttn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        heads: usize,
        head_dim: usize,
        ffn_hidden: usize,
    ) -> Self {
        let inner = heads * head_dim;
        Self {
            norm: LayerNorm::new(store, &format!("{name}.attn_norm"), width),
            query: Linear::new(store, rng, &format!("{name}.query"), width, inner, false),
            key: Linear::new(store, rng, &format!("{name}.key"), width, inner, false),
            value: Linear::new(store, rng, &format!("{name}.value"), width, inner, false),
            phi: store.add(format!("{name}.phi"), Tensor::filled(&[1, heads], 1.0)),
            output: Linear::new(store, rng, &format!("{name}.out"), inner, width, false),
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), width, ffn_hidden),
            heads,
            head_dim,
        }
    }

    /// `query + W_o · concat_h(φ_h · softmax(Q_h K_hᵀ / √d_head) V_h)`, with
    /// queries, keys and values read from layer-normalized inputs.
    pub fn attention(
        &self,
        g: &mut Graph,
        scope: &mut Scope<'_>,
        query_seq: Var,
        key_seq: Var,
        value_seq: Var,
    ) -> Result<Var> {
        let (lk, lv) = (g.value(key_seq).rows(), g.value(value_seq).rows());
        if lk != lv {
            return Err(Error::Contract(format!(
                "key length {lk} differs from value length {lv}"
            )));
        }
        let qn = self.norm.forward(g, scope, query_seq)?;
        let kn = if key_seq == query_seq { qn } else { self.norm.forward(g, scope, key_seq)? };
        let vn = if value_seq == key_seq { kn } else { self.norm.forward(g, scope, value_seq)? };
        let q = self.query.forward(g, scope, qn)?;
        let k = self.key.forward(g, scope, kn)?;
        let v = self.value.forward(g, scope, vn)?;
        let phi = scope.get(g, self.phi);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let start = h * self.head_dim;
            let qh = g.slice_cols(q, start, self.head_dim)?;
            let kh = g.slice_cols(k, start, self.head_dim)?;
            let vh = g.slice_cols(v, start, self.head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores, 1, 1.0)?;
            let mixed = g.matmul(weights, vh)?;
            let phi_h = g.slice_cols(phi, h, 1)?;
            heads.push(g.scale_by(mixed, phi_h)?);
        }
        let cat = g.concat_cols(&heads)?;
        let projected = self.output.forward(g, scope, cat)?;
        g.add(query_seq, projected)
    }

    /// Attention sublayer followed by the feed-forward sublayer.
    pub fn forward(
        &self,
        g: &mut Graph,
        scope: &mut Scope<'_>,
        query_seq: Var,
        key_seq: Var,
        value_seq: Var,
    ) -> Result<Var> {
        let h = self.attention(g, scope, query_seq, key_seq, value_seq)?;
        self.ffn.forward(g, scope, h)
    }
}

/// `L` attention layers applied with a fixed key/value stream.
#[derive(Clone, Debug)]
pub struct FusionStack {
    pub layers: Vec<DynAttn>,
}

impl FusionStack {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig, layers: usize) -> Self {
        let m = &cfg.model;
        Self {
            layers: (0..layers)
                .map(|i| {
                    DynAttn::new(
                        store,
                        rng,
                        &format!("{name}.layer{i}"),
                        m.d_s,
                        m.heads,
                        m.head_dim(),
                        m.ffn_hidden(),
                    )
                })
                .collect(),
        }
    }

    /// Anchor as query, `other` as keys and values, through every layer.
    /// The output has the anchor's length.
    pub fn fuse_stage(&self, g: &mut Graph, scope: &mut Scope<'_>, anchor: Var, other: Var) -> Result<Var> {
        let mut h = anchor;
        for layer in &self.layers {
            h = layer.forward(g, scope, h, other, other)?;
        }
        Ok(h)
    }

    /// Self-attention encoder: every layer attends over its own input.
    pub fn self_attention(&self, g: &mut Graph, scope: &mut Scope<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, scope, h, h, h)?;
        }
        Ok(h)
    }
}

/// Partner order for an anchor.
pub fn partners(anchor: Modality) -> [Modality; 2] {
    match anchor {
        Modality::Text => [Modality::Audio, Modality::Visual],
        Modality::Audio => [Modality::Visual, Modality::Text],
        Modality::Visual => [Modality::Text, Modality::Audio],
    }
}

/// Shared stage parameters plus the set of anchors to evaluate.
#[derive(Clone, Debug)]
pub struct Hcmf {
    pub modalities: Vec<Modality>,
    pub anchors: Vec<Modality>,
    /// Absent when a single modality bypasses fusion.
    pub stage1: Option<FusionStack>,
    /// Present only with three modalities.
    pub stage2: Option<FusionStack>,
    pub ffn: Option<FeedForward>,
    pub final_norm: Option<LayerNorm>,
}

impl Hcmf {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
        modalities: &[Modality],
        branches: Branches,
    ) -> Self {
        let modalities: Vec<Modality> = Modality::ALL
            .into_iter()
            .filter(|m| modalities.contains(m))
            .collect();
        let anchors = match branches {
            Branches::All => modalities.clone(),
            Branches::Text => modalities.first().copied().into_iter().collect(),
        };
        let layers = cfg.model.fusion_layers;
        let d_s = cfg.model.d_s;
        let fused = modalities.len() > 1;
        Self {
            stage1: fused.then(|| FusionStack::new(store, rng, &format!("{name}.stage1"), cfg, layers)),
            stage2: (modalities.len() > 2)
                .then(|| FusionStack::new(store, rng, &format!("{name}.stage2"), cfg, layers)),
            ffn: fused.then(|| FeedForward::new(store, rng, &format!("{name}.ffn"), d_s, cfg.model.ffn_hidden())),
            final_norm: fused.then(|| LayerNorm::new(store, &format!("{name}.final_norm"), d_s)),
            modalities,
            anchors,
        }
    }

    fn lookup(inputs: &[(Modality, Var)], m: Modality) -> Result<Var> {
        inputs
            .iter()
            .find(|(k, _)| *k == m)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::Config(format!("fusion input for modality {m} is missing")))
    }

    /// One branch: stage 1 with the first available partner, stage 2 with
    /// the second, then the feed-forward sublayer and final normalization.
    pub fn branch(
        &self,
        g: &mut Graph,
        scope: &mut Scope<'_>,
        inputs: &[(Modality, Var)],
        anchor: Modality,
    ) -> Result<Var> {
        let mut h = Self::lookup(inputs, anchor)?;
        let order: Vec<Modality> = partners(anchor)
            .into_iter()
            .filter(|m| self.modalities.contains(m))
            .collect();
        let stages = [self.stage1.as_ref(), self.stage2.as_ref()];
        for (partner, stack) in order.iter().zip(stages) {
            let stack = stack.ok_or_else(|| Error::Config("fusion stage missing".into()))?;
            let other = Self::lookup(inputs, *partner)?;
            h = stack.fuse_stage(g, scope, h, other)?;
        }
        if let (Some(ffn), Some(norm)) = (&self.ffn, &self.final_norm) {
            h = ffn.forward(g, scope, h)?;
            h = norm.forward(g, scope, h)?;
        }
        Ok(h)
    }

    /// Fused sequence (mean of branch outputs) and each branch's output.
    pub fn forward(
        &self,
        g: &mut Graph,
        scope: &mut Scope<'_>,
        inputs: &[(Modality, Var)],
    ) -> Result<(Var, Vec<(Modality, Var)>)> {
        for &m in &self.modalities {
            Self::lookup(inputs, m)?;
        }
        if self.modalities.len() == 1 {
            let only = Self::lookup(inputs, self.modalities[0])?;
            return Ok((only, vec![(self.modalities[0], only)]));
        }
        let outputs = self
            .anchors
            .iter()
            .map(|&a| Ok((a, self.branch(g, scope, inputs, a)?)))
            .collect::<Result<Vec<_>>>()?;
        let vars: Vec<Var> = outputs.iter().map(|&(_, v)| v).collect();
        let sum = g.add_all(&vars)?;
        let fused = if vars.len() == 1 { sum } else { g.scale(sum, 1.0 / vars.len() as f64) };
        Ok((fused, outputs))
    }
}

/// Replacement for fusion when it is ablated: concatenate modality
/// sequences column-wise and project back to `d_s`.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    pub modalities: Vec<Modality>,
    pub projection: Linear,
}

impl ConcatFusion {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_s: usize, modalities: &[Modality]) -> Self {
        let modalities: Vec<Modality> = Modality::ALL
            .into_iter()
            .filter(|m| modalities.contains(m))
            .collect();
        let projection = Linear::new(store, rng, &format!("{name}.proj"), modalities.len() * d_s, d_s, true);
        Self { modalities, projection }
    }

    pub fn forward(&self, g: &mut Graph, scope: &mut Scope<'_>, inputs: &[(Modality, Var)]) -> Result<Var> {
        let parts = self
            .modalities
            .iter()
            .map(|&m| Hcmf::lookup(inputs, m))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_cols(&parts)?;
        self.projection.forward(g, scope, cat)
    }
}

/// Mean over sequence positions: `l × d → 1 × d`.
pub fn pool_utterance(g: &mut Graph, fused_seq: Var) -> Result<Var> {
    g.mean_rows(fused_seq)
}
