//! Build a tiny two-layer network on the autodiff graph, backpropagate a
//! cross-entropy loss and compare every analytic gradient with central
//! finite differences.
//!
//! Run with `cargo run --example autodiff_gradcheck`.

use emofuse::params::{ParamStore, Scope};
use emofuse::tensor::finite_difference_check;
use emofuse::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_rows(&(0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect::<Vec<_>>())
}

fn main() -> emofuse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", random(&mut rng, 4, 6));
    let b1 = store.add("b1", random(&mut rng, 1, 6));
    let w2 = store.add("w2", random(&mut rng, 6, 3));
    let x = random(&mut rng, 5, 4);
    let targets = Tensor::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.0],
        vec![1.0, 0.0, 0.0],
    ]);

    let loss = |g: &mut Graph, scope: &mut Scope<'_>| {
        let xv = g.constant(x.clone());
        let (w1, b1, w2) = (scope.get(g, w1), scope.get(g, b1), scope.get(g, w2));
        let h = g.matmul(xv, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let logits = g.matmul(h, w2)?;
        let p = g.softmax(logits, 1, 1.0)?;
        let logp = g.ln(p)?;
        let t = g.constant(targets.clone());
        let picked = g.mul(logp, t)?;
        let total = g.sum_all(picked);
        Ok(g.scale(total, -1.0 / 5.0))
    };

    let mut g = Graph::new();
    let mut scope = Scope::trainable(&store);
    let l = loss(&mut g, &mut scope)?;
    g.backward(l)?;
    println!("loss = {:.6}", g.value(l).item()?);
    for (name, grad) in store.iter().map(|(n, _)| n).zip(scope.gradients(&g)) {
        println!("|d loss / d {name}|_max = {:.4e}", grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    let report = finite_difference_check(&store, 1e-5, loss)?;
    println!(
        "checked {} scalars, max relative error {:.2e}",
        report.scalars_checked, report.max_relative_error
    );
    Ok(())
}
