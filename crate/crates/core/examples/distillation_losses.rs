//! Evaluate the three distillation terms on hand-made distributions and
//! combine them with the configured weights.
//!
//! Run with `cargo run --example distillation_losses`.

use emofuse::config::SmoothingForm;
use emofuse::ikd::{align_loss, cross_kd_loss, ikd_total, label_smooth_loss, smoothed_labels};
use emofuse::{Graph, ModelConfig, Tensor};

fn main() -> emofuse::Result<()> {
    let cfg = ModelConfig::default().resolved()?;
    let teacher = Tensor::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.1, 0.8]]);
    let student = Tensor::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.2, 0.2, 0.6]]);
    let labels = [0, 2];

    let mut g = Graph::new();
    let pt = g.constant(teacher);
    let ps = g.constant(student);
    let lc = cross_kd_loss(&mut g, pt, ps)?;
    let la = align_loss(&mut g, ps, &labels)?;
    let ls = label_smooth_loss(&mut g, ps, &labels, cfg.ikd.epsilon, SmoothingForm::Standard)?;
    let ls_literal = label_smooth_loss(&mut g, ps, &labels, cfg.ikd.epsilon, SmoothingForm::Literal)?;
    let [lc, la, ls, ls_literal] = [lc, la, ls, ls_literal].map(|v| g.value(v).item().unwrap());

    println!("KL(teacher || student)      = {lc:.6}");
    println!("cross-entropy to labels     = {la:.6}");
    println!("smoothed cross-entropy      = {ls:.6}");
    println!("smoothed (literal form)     = {ls_literal:.6}");
    println!("smoothed targets: {:?}", smoothed_labels(&labels, 3, cfg.ikd.epsilon)?.to_rows());

    let b = ikd_total(lc, la, ls, cfg.ikd.kappa());
    println!("weights {:?} -> total {:.6}", b.kappa, b.total);
    Ok(())
}
