//! Train the student with each component switched off in turn and
//! report validation weighted F1 at the selected epoch.
//!
//! Run with `cargo run --release --example ablation_sweep`.

use emofuse::data::generate_synthetic;
use emofuse::seeds::Seeds;
use emofuse::train::{split_for_config, train_student, train_teacher, TrainOptions};
use emofuse::ModelConfig;

fn main() -> emofuse::Result<()> {
    let mut cfg = ModelConfig::default();
    cfg.model.d_t = 12;
    cfg.model.d_a = 12;
    cfg.model.d_v = 12;
    cfg.model.d_s = 12;
    cfg.model.heads = 2;
    cfg.model.fusion_layers = 1;
    cfg.sdmoe.experts = 3;
    cfg.optim.lr = 3e-3;
    cfg.optim.batch_size = 4;
    cfg.optim.epochs = 6;
    cfg.data.text_separation = 1.5;
    let cfg = cfg.resolved()?;

    let data = generate_synthetic(&cfg, Seeds::from_config(&cfg).data)?;
    let s = split_for_config(&cfg, &data)?;
    let teacher = train_teacher(&cfg, &s.train, &s.val, &TrainOptions::default())?.teacher;

    let variants: [(&str, fn(&mut ModelConfig)); 5] = [
        ("full", |_| {}),
        ("no routing", |c| c.ablation.sdmoe = false),
        ("no fusion", |c| c.ablation.hcmf = false),
        ("no distillation", |c| c.ablation.ikd = false),
        ("text branch only", |c| c.ablation.branches = emofuse::config::Branches::Text),
    ];
    for (name, tweak) in variants {
        let mut c = cfg.clone();
        tweak(&mut c);
        let c = c.resolved()?;
        let t = c.ablation.ikd.then_some(&teacher);
        let run = train_student(&c, t, &s.train, &s.val, &TrainOptions::default())?;
        let best = &run.history[run.best_epoch - 1];
        println!("{name:<18} best epoch {:>2}  val w-F1 {:.4}", run.best_epoch, best.log.val_wf1.unwrap());
    }
    Ok(())
}
