//! Train a text-only teacher, freeze it, then distill it into the
//! multimodal student and evaluate both on the held-out split.
//!
//! Run with `cargo run --release --example train_teacher_student`.

use emofuse::data::generate_synthetic;
use emofuse::seeds::Seeds;
use emofuse::train::{evaluate, split_for_config, train_student, train_teacher, TrainOptions};
use emofuse::ModelConfig;

fn main() -> emofuse::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = ModelConfig::default();
    cfg.model.d_t = 16;
    cfg.model.d_a = 16;
    cfg.model.d_v = 16;
    cfg.model.d_s = 16;
    cfg.model.fusion_layers = 2;
    cfg.optim.lr = 3e-3;
    cfg.optim.batch_size = 4;
    cfg.optim.epochs = 12;
    let cfg = cfg.resolved()?;

    let data = generate_synthetic(&cfg, Seeds::from_config(&cfg).data)?;
    let s = split_for_config(&cfg, &data)?;

    let teacher = train_teacher(&cfg, &s.train, &s.val, &TrainOptions::default())?;
    println!("teacher best epoch {}", teacher.best_epoch);
    let student = train_student(&cfg, Some(&teacher.teacher), &s.train, &s.val, &TrainOptions::default())?;
    for h in &student.history {
        println!(
            "epoch {:>2}: cross {:.4} align {:.4} smooth {:.4} total {:.4} val w-F1 {:.4}",
            h.log.epoch,
            h.log.l_cross,
            h.log.l_align,
            h.log.l_smooth,
            h.log.total,
            h.log.val_wf1.unwrap_or(f64::NAN)
        );
    }

    let t = evaluate(&teacher.teacher, &s.test)?;
    let st = evaluate(&student.student, &s.test)?;
    println!("test teacher: acc {:.4} w-F1 {:.4}", t.accuracy, t.w_f1);
    println!("test student: acc {:.4} w-F1 {:.4}", st.accuracy, st.w_f1);
    Ok(())
}
