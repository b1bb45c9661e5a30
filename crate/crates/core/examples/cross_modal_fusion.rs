//! Fuse three modality sequences with the hierarchical cross-attention
//! stack and compare against plain concatenation.
//!
//! Run with `cargo run --example cross_modal_fusion`.

use emofuse::config::{Branches, Modality};
use emofuse::hcmf::{pool_utterance, ConcatFusion, Hcmf};
use emofuse::params::{ParamStore, Scope};
use emofuse::{Graph, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> emofuse::Result<()> {
    let mut cfg = ModelConfig::default();
    cfg.model.d_s = 16;
    cfg.model.heads = 4;
    cfg.model.fusion_layers = 2;
    let cfg = cfg.resolved()?;
    let d_s = cfg.model.d_s;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let hcmf = Hcmf::new(&mut store, &mut rng, "hcmf", &cfg, &Modality::ALL, Branches::All);
    let concat = ConcatFusion::new(&mut store, &mut rng, "concat", d_s, &Modality::ALL);
    println!("{} parameter tensors, {} scalars", store.len(), store.num_scalars());

    let mut g = Graph::new();
    let mut scope = Scope::frozen(&store);
    let inputs: Vec<(Modality, _)> = Modality::ALL
        .into_iter()
        .map(|m| {
            let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..d_s).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            (m, g.constant(Tensor::from_rows(&rows)))
        })
        .collect();

    let (fused, branches) = hcmf.forward(&mut g, &mut scope, &inputs)?;
    for (anchor, out) in &branches {
        println!("branch anchored on {anchor}: shape {:?}", g.value(*out).shape());
    }
    let pooled = pool_utterance(&mut g, fused)?;
    println!("fused utterance vector: {:?}", &g.value(pooled).data()[..4]);

    let baseline = concat.forward(&mut g, &mut scope, &inputs)?;
    println!("concatenation baseline shape: {:?}", g.value(baseline).shape());
    Ok(())
}
