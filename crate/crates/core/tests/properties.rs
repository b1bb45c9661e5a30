//! Property tests over randomized inputs.

mod common;

use common::{random_distribution, random_tensor, rng};
use emofuse::data::{load_dialogues, split_dataset, write_dialogues, DialogueRecord, UtteranceRecord};
use emofuse::ikd::{align_loss, cross_kd_loss};
use emofuse::params::{ParamStore, Scope};
use emofuse::sdmoe::gate_statistics;
use emofuse::tensor::finite_difference_check;
use emofuse::train::{read_loss_log, write_loss_log, EpochLog};
use emofuse::{Graph, ModelConfig, Result, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// Builds `Σ W ⊙ op(inputs)` with a fixed random weighting `W` and returns
/// the worst finite-difference relative error over all inputs.
fn op_gradient_error(
    seed: u64,
    inputs: Vec<Tensor>,
    op: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t))
        .collect();
    let mut weights: Option<Tensor> = None;
    let report = finite_difference_check(&store, 1e-5, |g: &mut Graph, scope: &mut Scope<'_>| {
        let vars: Vec<Var> = ids.iter().map(|&id| scope.get(g, id)).collect();
        let out = op(g, &vars)?;
        let shape = g.value(out).shape().to_vec();
        let w = weights
            .get_or_insert_with(|| {
                let mut r = rng(seed ^ 0x5eed);
                let data = (0..shape.iter().product()).map(|_| r.gen_range(-1.0..1.0)).collect();
                Tensor::new(shape.clone(), data).unwrap()
            })
            .clone();
        let w = g.constant(w);
        let prod = g.mul(out, w)?;
        Ok(g.sum_all(prod))
    })
    .unwrap();
    report.max_relative_error
}

fn dims(seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed);
    (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5))
}

proptest! {
    #![proptest_config(config(128))]

    #[test]
    fn elementwise_and_linear_ops_match_finite_differences(seed in any::<u64>()) {
        let (m, n, k) = dims(seed);
        let mut r = rng(seed);
        let a = random_tensor(&mut r, m, n, 1.5);
        let b = random_tensor(&mut r, m, n, 1.5);
        let c = random_tensor(&mut r, n, k, 1.5);
        let row = random_tensor(&mut r, 1, n, 1.5);
        let s = random_tensor(&mut r, 1, 1, 1.5);
        let tol = 1e-4;
        prop_assert!(op_gradient_error(seed, vec![a.clone(), c.clone()], |g, v| g.matmul(v[0], v[1])) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1])) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone(), row], |g, v| g.add_row(v[0], v[1])) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone(), s], |g, v| g.scale_by(v[0], v[1])) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| Ok(g.scale(v[0], -2.5))) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| Ok(g.add_scalar(v[0], 0.7))) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| g.transpose(v[0])) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| g.mean_rows(v[0])) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone(), b.clone()], |g, v| g.add_all(&[v[0], v[1], v[0]])) < tol);
    }

    #[test]
    fn nonlinear_ops_match_finite_differences(seed in any::<u64>()) {
        let (m, n, _) = dims(seed);
        let mut r = rng(seed);
        let a = random_tensor(&mut r, m, n, 2.0);
        let pos = Tensor::new(vec![m, n], (0..m * n).map(|_| r.gen_range(0.2..3.0)).collect()).unwrap();
        // Keep clamp inputs away from the kink at the threshold.
        let away = Tensor::new(
            vec![m, n],
            (0..m * n).map(|_| if r.gen_bool(0.5) { r.gen_range(0.1..2.0) } else { r.gen_range(-2.0..-0.1) }).collect(),
        )
        .unwrap();
        let tol = 1e-4;
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| Ok(g.sigmoid(v[0]))) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| Ok(g.tanh(v[0]))) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| Ok(g.gelu(v[0]))) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| Ok(g.exp(v[0]))) < tol);
        prop_assert!(op_gradient_error(seed, vec![pos], |g, v| g.ln(v[0])) < tol);
        prop_assert!(op_gradient_error(seed, vec![away], |g, v| Ok(g.clamp_min(v[0], 0.0))) < tol);
    }

    #[test]
    fn normalizing_ops_match_finite_differences(seed in any::<u64>(), tau in 0.2f64..5.0) {
        let (m, n, _) = dims(seed);
        let n = n + 1;
        let mut r = rng(seed);
        let a = random_tensor(&mut r, m, n, 2.0);
        let gamma = random_tensor(&mut r, 1, n, 1.5);
        let beta = random_tensor(&mut r, 1, n, 1.5);
        let row = random_tensor(&mut r, 1, n, 2.0);
        let mut mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.7)).collect();
        mask[r.gen_range(0..n)] = true;
        let tol = 1e-4;
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| g.softmax(v[0], 1, tau)) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| g.softmax(v[0], 0, tau)) < tol);
        prop_assert!(op_gradient_error(seed, vec![row], |g, v| g.masked_softmax(v[0], &mask, tau)) < tol);
        prop_assert!(op_gradient_error(seed, vec![a, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2])) < tol);
    }

    #[test]
    fn indexing_ops_match_finite_differences(seed in any::<u64>()) {
        let (m, n, k) = dims(seed);
        let mut r = rng(seed);
        let a = random_tensor(&mut r, m, n + 1, 2.0);
        let b = random_tensor(&mut r, m, k, 2.0);
        let c = random_tensor(&mut r, k, n + 1, 2.0);
        let idx: Vec<usize> = (0..r.gen_range(1..6)).map(|_| r.gen_range(0..m)).collect();
        let start = r.gen_range(0..n);
        let tol = 1e-4;
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| g.gather_rows(v[0], &idx)) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone()], |g, v| g.slice_cols(v[0], start, 1)) < tol);
        prop_assert!(op_gradient_error(seed, vec![a.clone(), b], |g, v| g.concat_cols(&[v[0], v[1]])) < tol);
        prop_assert!(op_gradient_error(seed, vec![a, c], |g, v| g.concat_rows(&[v[0], v[1]])) < tol);
        prop_assert!(op_gradient_error(seed, vec![random_tensor(&mut r, m, n, 2.0)], |g, v| Ok(g.sum_all(v[0]))) < tol);
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), tau in 1e-3f64..=10.0) {
        let (m, n, _) = dims(seed);
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&mut r, m, n, 50.0));
        let p = g.softmax(x, 1, tau).unwrap();
        for row in g.value(p).to_rows() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn masked_routing_is_a_distribution_over_active_experts(seed in any::<u64>(), tau in 1e-3f64..=10.0) {
        let mut r = rng(seed);
        let n = r.gen_range(1..9);
        let mut mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.6)).collect();
        mask[r.gen_range(0..n)] = true;
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&mut r, 1, n, 5.0));
        let p = g.masked_softmax(x, &mask, tau).unwrap();
        let v = g.value(p).data();
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (w, &on) in v.iter().zip(&mask) {
            if !on {
                prop_assert_eq!(*w, 0.0);
            }
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let (m, n, k) = dims(seed);
        let mut r = rng(seed);
        let l = r.gen_range(1..5);
        let (a, b, c) = (random_tensor(&mut r, m, n, 1.0), random_tensor(&mut r, n, k, 1.0), random_tensor(&mut r, k, l, 1.0));
        let mut g = Graph::new();
        let (a, b, c) = (g.constant(a), g.constant(b), g.constant(c));
        let ab = g.matmul(a, b).unwrap();
        let left = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let right = g.matmul(a, bc).unwrap();
        for (x, y) in g.value(left).data().iter().zip(g.value(right).data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn widening_the_band_never_deactivates_more_experts(seed in any::<u64>(), a1 in 0.0f64..4.0, extra in 0.0f64..4.0, one_sided in any::<bool>()) {
        let mut r = rng(seed);
        let n = r.gen_range(2..10);
        let w: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let narrow = gate_statistics(&w, a1, one_sided);
        let wide = gate_statistics(&w, a1 + extra, one_sided);
        let count = |s: &emofuse::sdmoe::GateStatistics| s.active.iter().filter(|&&x| x).count();
        let (lo, hi) = (narrow.mean - a1 * narrow.std, narrow.mean + a1 * narrow.std);
        let band_empty = !w.iter().any(|&x| lo < x && (one_sided || x < hi));
        if band_empty {
            // Degenerate rule: an empty band re-activates every expert.
            prop_assert_eq!(count(&narrow), n);
        } else {
            prop_assert!(count(&wide) >= count(&narrow));
        }
        prop_assert!(count(&narrow) >= 1);
    }

    #[test]
    fn an_empty_band_falls_back_to_all_experts(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(2..10);
        let w: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
        prop_assert_eq!(gate_statistics(&w, 0.0, false).active, vec![true; n]);
    }

    #[test]
    fn kl_divergence_is_nonnegative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (rows, n) = (r.gen_range(1..5), r.gen_range(2..7));
        let p: Vec<Vec<f64>> = (0..rows).map(|_| random_distribution(&mut r, n)).collect();
        let q: Vec<Vec<f64>> = (0..rows).map(|_| random_distribution(&mut r, n)).collect();
        let mut g = Graph::new();
        let (pv, qv) = (g.constant(Tensor::from_rows(&p)), g.constant(Tensor::from_rows(&q)));
        let kl = cross_kd_loss(&mut g, pv, qv).unwrap();
        prop_assert!(g.value(kl).item().unwrap() >= -1e-15);
        let self_kl = cross_kd_loss(&mut g, pv, pv).unwrap();
        prop_assert!(g.value(self_kl).item().unwrap().abs() < 1e-12);
    }

    #[test]
    fn supervision_loss_falls_as_true_class_probability_rises(seed in any::<u64>(), classes in 2usize..8) {
        let mut r = rng(seed);
        let y = r.gen_range(0..classes);
        let lo = r.gen_range(0.01..0.98);
        let hi = r.gen_range(lo..0.99);
        let row = |p: f64| (0..classes).map(|j| if j == y { p } else { (1.0 - p) / (classes - 1) as f64 }).collect::<Vec<_>>();
        let mut g = Graph::new();
        let (a, b) = (g.constant(Tensor::row(&row(lo))), g.constant(Tensor::row(&row(hi))));
        let la = align_loss(&mut g, a, &[y]).unwrap();
        let lb = align_loss(&mut g, b, &[y]).unwrap();
        prop_assert!(g.value(lb).item().unwrap() <= g.value(la).item().unwrap());
    }

    #[test]
    fn splits_are_disjoint_and_cover_the_corpus(n in 3usize..60, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let fractions = [lo, hi - lo, 1.0 - hi];
        let records: Vec<DialogueRecord> = (0..n).map(|i| DialogueRecord { dialogue_id: format!("d{i}"), utterances: Vec::new() }).collect();
        let s = split_dataset(&records, fractions, seed).unwrap();
        let mut ids: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).map(|d| d.dialogue_id.clone()).collect();
        prop_assert_eq!(ids.len(), n);
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), n);
    }
}

proptest! {
    #![proptest_config(config(1000))]

    #[test]
    fn gibbs_inequality_holds(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(2..10);
        let p = random_distribution(&mut r, n);
        let q = random_distribution(&mut r, n);
        let cross: f64 = -p.iter().zip(&q).map(|(a, b)| a * b.ln()).sum::<f64>();
        let entropy: f64 = -p.iter().map(|a| a * a.ln()).sum::<f64>();
        prop_assert!(cross >= entropy - 1e-12);
    }
}

fn record_strategy() -> impl Strategy<Value = Vec<DialogueRecord>> {
    let utterance = (0usize..6, 0usize..2, prop::collection::vec(-1e6f64..1e6, 3), prop::collection::vec(-1e3f64..1e3, 2), prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 2))
        .prop_map(|(label, speaker, text, audio, visual)| UtteranceRecord { speaker, label, text, audio, visual });
    prop::collection::vec(prop::collection::vec(utterance, 1..5), 0..5).prop_map(|ds| {
        ds.into_iter()
            .enumerate()
            .map(|(i, utterances)| DialogueRecord { dialogue_id: format!("dlg-{i}"), utterances })
            .collect()
    })
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn dialogue_jsonl_round_trips_exactly(records in record_strategy()) {
        let mut cfg = ModelConfig::default();
        cfg.model.d_t = 3;
        cfg.model.d_a = 2;
        cfg.model.d_v = 2;
        cfg.model.d_s = 4;
        cfg.model.heads = 2;
        let cfg = cfg.resolved().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dialogues(&path, &records).unwrap();
        let back = load_dialogues(&path, &cfg).unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn loss_log_round_trips_exactly(values in prop::collection::vec((0.0f64..1e3, 0.0f64..1e3, 0.0f64..1e3, prop::option::of(0.0f64..=1.0)), 0..20)) {
        let logs: Vec<EpochLog> = values
            .into_iter()
            .enumerate()
            .map(|(i, (a, b, c, v))| EpochLog { epoch: i + 1, l_cross: a, l_align: b, l_smooth: c, total: 0.4 * a + 0.3 * b + 0.3 * c, val_wf1: v })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.jsonl");
        write_loss_log(&path, &logs).unwrap();
        prop_assert_eq!(read_loss_log(&path).unwrap(), logs);
    }
}
