//! Small building blocks shared by the model components.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore, Scope};
use crate::tensor::{Graph, Tensor, Var};

/// Affine map `x·W (+ b)` acting on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights uniform in ±1/√fan_in, zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Init::new(rng).uniform(&[fan_in, fan_out], bound),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])));
        Self { weight, bias }
    }

    pub fn from_weight(store: &mut ParamStore, name: &str, weight: Tensor, bias: Option<Tensor>) -> Self {
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = bias.map(|b| store.add(format!("{name}.bias"), b));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, scope: &mut Scope<'_>, x: Var) -> Result<Var> {
        let w = scope.get(g, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = scope.get(g, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[1, width], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, width])),
        }
    }

    pub fn forward(&self, g: &mut Graph, scope: &mut Scope<'_>, x: Var) -> Result<Var> {
        let gamma = scope.get(g, self.gamma);
        let beta = scope.get(g, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Pre-norm feed-forward sublayer: `x + W₂·gelu(W₁·LN(x))`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
            up: Linear::new(store, rng, &format!("{name}.up"), width, hidden, true),
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, width, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, scope: &mut Scope<'_>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, scope, x)?;
        let h = self.up.forward(g, scope, h)?;
        let h = g.gelu(h);
        let h = self.down.forward(g, scope, h)?;
        g.add(x, h)
    }
}
