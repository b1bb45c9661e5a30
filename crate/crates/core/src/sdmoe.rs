//! Sparse dynamic mixture of experts.
//!
//! A bank of bidirectional GRU experts encodes an embedded sequence. A
//! gating network maps the mean-pooled sequence to one weight per expert;
//! experts whose weight falls outside `(μ − ασ, μ + ασ)` are switched off,
//! and the rest are mixed by a temperature softmax of the weights plus
//! Gumbel noise (training) or of the bare weights (evaluation).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Init, ParamStore, Scope};
use crate::seeds;
use crate::tensor::{Graph, Tensor, Var};

/// Whether routing noise is injected.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Gated recurrent unit, PyTorch gate convention:
///
/// ```text
/// r = σ(x·W_xr + b_xr + h·W_hr + b_hr)
/// z = σ(x·W_xz + b_xz + h·W_hz + b_hz)
/// n = tanh(x·W_xn + b_xn + r ⊙ (h·W_hn + b_hn))
/// h' = n + z ⊙ (h − n)
/// ```
#[derive(Clone, Debug)]
pub struct Gru {
    /// Input maps for the r, z, n gates, each `d_in × hidden`, with bias.
    pub input: [Linear; 3],
    /// Recurrent maps for the r, z, n gates, each `hidden × hidden`, with bias.
    pub recurrent: [Linear; 3],
    pub hidden: usize,
}

impl Gru {
    /// All weights and biases uniform in ±1/√hidden.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut make = |part: &str, fan_in: usize| {
            let w = Init::new(rng).uniform(&[fan_in, hidden], bound);
            let b = Init::new(rng).uniform(&[1, hidden], bound);
            Linear::from_weight(store, &format!("{name}.{part}"), w, Some(b))
        };
        let input = [make("x_r", d_in), make("x_z", d_in), make("x_n", d_in)];
        let recurrent = [make("h_r", hidden), make("h_z", hidden), make("h_n", hidden)];
        Self {
            input,
            recurrent,
            hidden,
        }
    }

    /// Hidden states for every step of `x` (`l × d_in`), in processing
    /// order, starting from a zero state.
    pub fn run(&self, g: &mut Graph, scope: &mut Scope<'_>, x: Var, steps: &[usize]) -> Result<Vec<Var>> {
        let [xr, xz, xn] = [0, 1, 2].map(|k| self.input[k].forward(g, scope, x));
        let (xr, xz, xn) = (xr?, xz?, xn?);
        let mut h = g.constant(Tensor::zeros(&[1, self.hidden]));
        let mut out = Vec::with_capacity(steps.len());
        for &t in steps {
            let hr = self.recurrent[0].forward(g, scope, h)?;
            let hz = self.recurrent[1].forward(g, scope, h)?;
            let hn = self.recurrent[2].forward(g, scope, h)?;
            let xr_t = g.gather_rows(xr, &[t])?;
            let xz_t = g.gather_rows(xz, &[t])?;
            let xn_t = g.gather_rows(xn, &[t])?;
            let r = g.add(xr_t, hr)?;
            let r = g.sigmoid(r);
            let z = g.add(xz_t, hz)?;
            let z = g.sigmoid(z);
            let rn = g.mul(r, hn)?;
            let n = g.add(xn_t, rn)?;
            let n = g.tanh(n);
            let diff = g.sub(h, n)?;
            let gated = g.mul(z, diff)?;
            h = g.add(n, gated)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Forward and backward GRUs whose concatenated states are projected back
/// to the model width.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward: Gru,
    pub backward: Gru,
    /// `2·hidden → d_s`, with bias.
    pub projection: Linear,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, hidden: usize) -> Self {
        Self {
            forward: Gru::new(store, rng, &format!("{name}.fwd"), width, hidden),
            backward: Gru::new(store, rng, &format!("{name}.bwd"), width, hidden),
            projection: Linear::new(store, rng, &format!("{name}.proj"), 2 * hidden, width, true),
        }
    }

    pub fn encode(&self, g: &mut Graph, scope: &mut Scope<'_>, x: Var) -> Result<Var> {
        let len = g.value(x).rows();
        let order: Vec<usize> = (0..len).collect();
        let reversed: Vec<usize> = (0..len).rev().collect();
        let fwd = self.forward.run(g, scope, x, &order)?;
        let mut bwd = self.backward.run(g, scope, x, &reversed)?;
        bwd.reverse();
        let fwd = g.concat_rows(&fwd)?;
        let bwd = g.concat_rows(&bwd)?;
        let both = g.concat_cols(&[fwd, bwd])?;
        self.projection.forward(g, scope, both)
    }
}

/// Independently initialized BiGRU experts sharing input and output width.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub experts: Vec<BiGru>,
}

impl ExpertBank {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        count: usize,
        width: usize,
        hidden: usize,
    ) -> Self {
        Self {
            experts: (0..count)
                .map(|i| BiGru::new(store, rng, &format!("{name}.expert{i}"), width, hidden))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Every expert's encoding of `sequence` (`l × d_s` each).
    pub fn expert_forward(&self, g: &mut Graph, scope: &mut Scope<'_>, sequence: Var) -> Result<Vec<Var>> {
        ensure_nonempty(g, sequence)?;
        self.experts.iter().map(|e| e.encode(g, scope, sequence)).collect()
    }
}

fn ensure_nonempty(g: &Graph, sequence: Var) -> Result<()> {
    let v = g.value(sequence);
    v.dims2()?;
    if v.rows() == 0 {
        return Err(Error::Contract("expert input sequence is empty".into()));
    }
    Ok(())
}

/// Mean, population standard deviation and activity mask of gate weights.
#[derive(Clone, Debug, PartialEq)]
pub struct GateStatistics {
    pub mean: f64,
    pub std: f64,
    pub active: Vec<bool>,
}

/// Deactivates weights outside `(μ − ασ, μ + ασ)` (or only below
/// `μ − ασ` when `one_sided`). If σ is zero or nothing survives, every
/// expert stays active.
pub fn gate_statistics(w_g: &[f64], alpha: f64, one_sided: bool) -> GateStatistics {
    let n = w_g.len() as f64;
    let mean = w_g.iter().sum::<f64>() / n;
    let std = (w_g.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = (mean - alpha * std, mean + alpha * std);
    let mut active: Vec<bool> = w_g
        .iter()
        .map(|&w| lo < w && (one_sided || w < hi))
        .collect();
    if std == 0.0 || !active.iter().any(|&a| a) {
        active.iter_mut().for_each(|a| *a = true);
    }
    GateStatistics { mean, std, active }
}

/// `g = −ln(−ln R)` for each `R` in the open unit interval.
pub fn gumbel_noise(uniform: &[f64]) -> Result<Vec<f64>> {
    uniform
        .iter()
        .map(|&r| {
            if r > 0.0 && r < 1.0 {
                Ok(-(-r.ln()).ln())
            } else {
                Err(Error::Domain(format!("Gumbel sample needs R in (0, 1), got {r}")))
            }
        })
        .collect()
}

/// Gumbel noise for `n` experts drawn from `seed`.
pub fn routing_noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = seeds::rng(seed);
    let uniform: Vec<f64> = (0..n)
        .map(|_| loop {
            let r: f64 = rng.gen();
            if r > 0.0 {
                break r;
            }
        })
        .collect();
    gumbel_noise(&uniform).expect("samples lie in (0, 1)")
}

/// Routing outcome of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecision {
    /// Noiseless gate weights `W_g`.
    pub raw_weights: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub active_mask: Vec<bool>,
    /// Gumbel noise added before the softmax; zeros in evaluation mode.
    pub noise: Vec<f64>,
    /// Final mixing weights; zero for inactive experts.
    pub routing: Vec<f64>,
}

impl GateDecision {
    pub fn active_count(&self) -> usize {
        self.active_mask.iter().filter(|&&a| a).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingParams {
    pub tau: f64,
    pub alpha: f64,
    pub one_sided: bool,
}

/// Expert bank plus gating network for one modality.
#[derive(Clone, Debug)]
pub struct Sdmoe {
    pub bank: ExpertBank,
    /// `d_s → n`; weight and bias start at zero so initial routing is uniform.
    pub gate: Linear,
}

impl Sdmoe {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        experts: usize,
        width: usize,
        hidden: usize,
    ) -> Self {
        let bank = ExpertBank::new(store, rng, name, experts, width, hidden);
        let gate = Linear::from_weight(
            store,
            &format!("{name}.gate"),
            Tensor::zeros(&[width, experts]),
            Some(Tensor::zeros(&[1, experts])),
        );
        Self { bank, gate }
    }

    pub fn gate_weights(&self, g: &mut Graph, scope: &mut Scope<'_>, sequence: Var) -> Result<Var> {
        let pooled = g.mean_rows(sequence)?;
        self.gate.forward(g, scope, pooled)
    }

    /// Routed mixture `Σ_i Ĝ_i · E_i(sequence)` and the routing decision.
    /// `seed` fixes the Gumbel noise in training mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        scope: &mut Scope<'_>,
        sequence: Var,
        routing: RoutingParams,
        mode: Mode,
        seed: u64,
    ) -> Result<(Var, GateDecision)> {
        if !(routing.tau > 0.0) {
            return Err(Error::Parameter(format!("tau must be > 0, got {}", routing.tau)));
        }
        ensure_nonempty(g, sequence)?;
        let n = self.bank.len();
        let w_g = self.gate_weights(g, scope, sequence)?;
        let raw = g.value(w_g).data().to_vec();
        let stats = gate_statistics(&raw, routing.alpha, routing.one_sided);
        let noise = match mode {
            Mode::Train => routing_noise(seed, n),
            Mode::Eval => vec![0.0; n],
        };
        let logits = if mode == Mode::Train {
            let nv = g.constant(Tensor::row(&noise));
            g.add(w_g, nv)?
        } else {
            w_g
        };
        let dist = g.masked_softmax(logits, &stats.active, routing.tau)?;

        let mut terms = Vec::new();
        for (i, expert) in self.bank.experts.iter().enumerate() {
            if !stats.active[i] {
                continue;
            }
            let out = expert.encode(g, scope, sequence)?;
            let weight = g.slice_cols(dist, i, 1)?;
            terms.push(g.scale_by(out, weight)?);
        }
        let mixed = g.add_all(&terms)?;
        let decision = GateDecision {
            raw_weights: raw,
            mean: stats.mean,
            std: stats.std,
            active_mask: stats.active,
            noise,
            routing: g.value(dist).data().to_vec(),
        };
        Ok((mixed, decision))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn gate_statistics_examples() {
        let s = gate_statistics(&[1.0; 4], 0.3, false);
        assert_eq!(s.std, 0.0);
        assert!(s.active.iter().all(|&a| a));

        let s = gate_statistics(&[0.1, 0.2, 0.3, 0.4], 2.0, false);
        assert!((s.mean - 0.25).abs() < 1e-15);
        assert!((s.std - 0.0125f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.active, vec![true; 4]);

        let s = gate_statistics(&[0.0, 0.0, 0.0, 1.0], 1.0, false);
        assert!((s.std - 0.1875f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.active, vec![true, true, true, false]);

        // A high outlier survives when only the low tail is cut.
        let s = gate_statistics(&[0.0, 0.0, 0.0, 1.0], 1.0, true);
        assert_eq!(s.active, vec![true; 4]);
    }

    #[test]
    fn gumbel_examples() {
        let e = std::f64::consts::E;
        let g = gumbel_noise(&[1.0 / e, (-e).exp(), (-1.0 / e).exp()]).unwrap();
        assert!(g[0].abs() < 1e-15);
        assert!((g[1] + 1.0).abs() < 1e-12);
        assert!((g[2] - 1.0).abs() < 1e-12);
        for bad in [0.0, 1.0, -0.5, 2.0] {
            assert!(matches!(gumbel_noise(&[bad]), Err(Error::Domain(_))));
        }
    }

    fn zero_store(store: &mut ParamStore) {
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut store = ParamStore::new();
        let bank = ExpertBank::new(&mut store, &mut seeds::rng(1), "b", 1, 3, 3);
        zero_store(&mut store);
        let mut g = Graph::new();
        let mut scope = Scope::frozen(&store);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]));
        let out = bank.expert_forward(&mut g, &mut scope, x).unwrap();
        assert!(g.value(out[0]).data().iter().all(|&v| v == 0.0));
    }

    /// Step-by-step scalar GRU recurrence.
    fn scalar_gru(store: &ParamStore, gru: &Gru, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let hdim = gru.hidden;
        let w = |l: &Linear| store.get(l.weight).clone();
        let b = |l: &Linear| store.get(l.bias.unwrap()).clone();
        let affine = |l: &Linear, v: &[f64], j: usize| -> f64 {
            let wt = w(l);
            let mut s = b(l).data()[j];
            for (i, vi) in v.iter().enumerate() {
                s += vi * wt.get(i, j);
            }
            s
        };
        let mut h = vec![0.0; hdim];
        let mut out = Vec::new();
        for x in xs {
            let mut next = vec![0.0; hdim];
            for j in 0..hdim {
                let r = sigmoid(affine(&gru.input[0], x, j) + affine(&gru.recurrent[0], &h, j));
                let z = sigmoid(affine(&gru.input[1], x, j) + affine(&gru.recurrent[1], &h, j));
                let n = (affine(&gru.input[2], x, j) + r * affine(&gru.recurrent[2], &h, j)).tanh();
                next[j] = (1.0 - z) * n + z * h[j];
            }
            h = next;
            out.push(h.clone());
        }
        out
    }

    #[test]
    fn gru_matches_scalar_recurrence() {
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, &mut seeds::rng(4), "g", 2, 2);
        let xs = vec![vec![0.7, -1.3], vec![0.2, 0.9]];
        let mut g = Graph::new();
        let mut scope = Scope::frozen(&store);
        let x = g.constant(Tensor::from_rows(&xs));
        let hs = gru.run(&mut g, &mut scope, x, &[0, 1]).unwrap();
        let oracle = scalar_gru(&store, &gru, &xs);
        for (h, o) in hs.iter().zip(&oracle) {
            for (a, b) in g.value(*h).data().iter().zip(o) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn single_step_sequence_sees_same_input_both_ways() {
        let mut store = ParamStore::new();
        let bi = BiGru::new(&mut store, &mut seeds::rng(5), "e", 2, 2);
        let xs = vec![vec![0.4, -0.1]];
        let mut g = Graph::new();
        let mut scope = Scope::frozen(&store);
        let x = g.constant(Tensor::from_rows(&xs));
        let f = bi.forward.run(&mut g, &mut scope, x, &[0]).unwrap();
        let b = bi.backward.run(&mut g, &mut scope, x, &[0]).unwrap();
        for (h, gru) in [(f[0], &bi.forward), (b[0], &bi.backward)] {
            let oracle = scalar_gru(&store, gru, &xs);
            for (a, o) in g.value(h).data().iter().zip(&oracle[0]) {
                assert!((a - o).abs() < 1e-12);
            }
        }
    }

    fn routing() -> RoutingParams {
        RoutingParams {
            tau: 0.5,
            alpha: 2.0,
            one_sided: false,
        }
    }

    #[test]
    fn single_expert_returns_its_output() {
        let mut store = ParamStore::new();
        let moe = Sdmoe::new(&mut store, &mut seeds::rng(6), "m", 1, 3, 2);
        let mut g = Graph::new();
        let mut scope = Scope::frozen(&store);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]]));
        let (out, d) = moe.forward(&mut g, &mut scope, x, routing(), Mode::Train, 9).unwrap();
        assert_eq!(d.routing, vec![1.0]);
        let direct = moe.bank.experts[0].encode(&mut g, &mut scope, x).unwrap();
        assert_eq!(g.value(out), g.value(direct));
    }

    #[test]
    fn zero_gate_in_eval_routes_uniformly() {
        let mut store = ParamStore::new();
        let moe = Sdmoe::new(&mut store, &mut seeds::rng(6), "m", 2, 3, 2);
        let mut g = Graph::new();
        let mut scope = Scope::frozen(&store);
        let x = g.constant(Tensor::row(&[0.3, 0.1, -0.2]));
        let (_, d) = moe.forward(&mut g, &mut scope, x, routing(), Mode::Eval, 0).unwrap();
        assert_eq!(d.raw_weights, vec![0.0, 0.0]);
        assert_eq!(d.routing, vec![0.5, 0.5]);
        assert_eq!(d.noise, vec![0.0, 0.0]);
    }

    #[test]
    fn train_mode_matches_scripted_recomputation() {
        let mut store = ParamStore::new();
        let moe = Sdmoe::new(&mut store, &mut seeds::rng(7), "m", 4, 3, 2);
        let gw = moe.gate.weight;
        *store.get_mut(gw) = Init::new(&mut seeds::rng(70)).uniform(&[3, 4], 2.0);
        let rows = vec![vec![0.5, -1.0, 2.0], vec![1.5, 0.0, -0.5], vec![0.1, 0.2, 0.3]];
        let params = RoutingParams {
            tau: 0.5,
            alpha: 1.0,
            one_sided: false,
        };
        let mut g = Graph::new();
        let mut scope = Scope::frozen(&store);
        let x = g.constant(Tensor::from_rows(&rows));
        let (out, d) = moe.forward(&mut g, &mut scope, x, params, Mode::Train, 1234).unwrap();
        let experts = moe.bank.expert_forward(&mut g, &mut scope, x).unwrap();

        // W_g from the pooled sequence.
        let w = store.get(gw);
        let pooled: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 3.0).collect();
        let w_g: Vec<f64> = (0..4)
            .map(|k| (0..3).map(|j| pooled[j] * w.get(j, k)).sum::<f64>())
            .collect();
        for (a, b) in w_g.iter().zip(&d.raw_weights) {
            assert!((a - b).abs() < 1e-12);
        }
        let stats = gate_statistics(&w_g, 1.0, false);
        let noise = routing_noise(1234, 4);
        assert_eq!(noise, d.noise);
        let exps: Vec<f64> = (0..4)
            .map(|k| if stats.active[k] { ((w_g[k] + noise[k]) / 0.5).exp() } else { 0.0 })
            .collect();
        let z: f64 = exps.iter().sum();
        let expected_routing: Vec<f64> = exps.iter().map(|e| e / z).collect();
        assert!((d.routing.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for k in 0..4 {
            assert!((expected_routing[k] - d.routing[k]).abs() < 1e-12);
            if !d.active_mask[k] {
                assert_eq!(d.routing[k], 0.0);
            }
        }
        let got = g.value(out);
        for idx in 0..got.len() {
            let want: f64 = (0..4)
                .map(|k| expected_routing[k] * g.value(experts[k]).data()[idx])
                .sum();
            assert!((got.data()[idx] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_output_and_zero_length_rejected() {
        let mut store = ParamStore::new();
        let moe = Sdmoe::new(&mut store, &mut seeds::rng(8), "m", 3, 2, 2);
        let run = |seed| {
            let mut g = Graph::new();
            let mut scope = Scope::frozen(&store);
            let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -4.0]]));
            let (out, d) = moe.forward(&mut g, &mut scope, x, routing(), Mode::Train, seed).unwrap();
            (g.value(out).clone(), d)
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5).1.noise, run(6).1.noise);
    }

    #[test]
    fn gradients_reach_gate_and_experts() {
        let mut store = ParamStore::new();
        let moe = Sdmoe::new(&mut store, &mut seeds::rng(9), "m", 3, 2, 2);
        let gw = moe.gate.weight;
        *store.get_mut(gw) = Init::new(&mut seeds::rng(90)).uniform(&[2, 3], 0.5);
        let report = finite_difference_check(&store, 1e-5, |g, scope| {
            let x = g.constant(Tensor::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.4]]));
            let (out, _) = moe.forward(g, scope, x, routing(), Mode::Train, 77)?;
            let sq = g.mul(out, out)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
        assert!(report.worst_for("gate").is_some());
    }
}
