//! Inspect the statistics-based expert gate: which experts survive the
//! band around the mean, how Gumbel noise perturbs training-time routing,
//! and how a low temperature makes evaluation routing nearly one-hot.
//!
//! Run with `cargo run --example dynamic_routing`.

use emofuse::params::{ParamStore, Scope};
use emofuse::sdmoe::{gate_statistics, Mode, RoutingParams, Sdmoe};
use emofuse::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> emofuse::Result<()> {
    for (w, alpha) in [
        (vec![0.1, 0.2, 0.3, 0.4], 2.0),
        (vec![0.0, 0.0, 0.0, 1.0], 1.0),
        (vec![-1.5, 0.2, 0.3, 0.25, 2.0], 1.0),
        (vec![0.5, 0.5, 0.5], 1.0),
    ] {
        let s = gate_statistics(&w, alpha, false);
        println!("W_g {w:?} alpha {alpha}: mean {:.3} std {:.3} active {:?}", s.mean, s.std, s.active);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let moe = Sdmoe::new(&mut store, &mut rng, "moe", 4, 6, 6);
    // The gate starts at zero; script its bias so the routing is visible.
    *store.get_mut(moe.gate.bias.unwrap()) = Tensor::row(&[0.9, 0.1, -0.4, 0.6]);
    let sequence = Tensor::filled(&[5, 6], 0.1);

    for (mode, tau, seed) in [(Mode::Train, 0.5, 1), (Mode::Train, 0.5, 2), (Mode::Eval, 0.5, 0), (Mode::Eval, 0.01, 0)] {
        let mut g = Graph::new();
        let mut scope = Scope::frozen(&store);
        let x = g.constant(sequence.clone());
        let params = RoutingParams { tau, alpha: 1.0, one_sided: false };
        let (out, d) = moe.forward(&mut g, &mut scope, x, params, mode, seed)?;
        let routing: Vec<String> = d.routing.iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "{mode:?} tau {tau}: active {}/{} routing [{}] output {:?}",
            d.active_count(),
            d.active_mask.len(),
            routing.join(", "),
            g.value(out).shape()
        );
    }
    Ok(())
}
