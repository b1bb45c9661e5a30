//! Train a small student without distillation, save it, reload the
//! checkpoint and export fused utterance embeddings to CSV.
//!
//! Run with `cargo run --example export_embeddings [-- out.csv]`.

use emofuse::checkpoint;
use emofuse::data::generate_synthetic;
use emofuse::seeds::Seeds;
use emofuse::train::{export_embeddings, train_student, TrainOptions};
use emofuse::ModelConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ModelConfig::default();
    cfg.model.d_t = 8;
    cfg.model.d_a = 8;
    cfg.model.d_v = 8;
    cfg.model.d_s = 8;
    cfg.model.heads = 2;
    cfg.model.fusion_layers = 1;
    cfg.optim.lr = 3e-3;
    cfg.optim.batch_size = 8;
    cfg.optim.epochs = 3;
    cfg.ablation.ikd = false;
    cfg.data.synthetic_utterances = 60;
    let cfg = cfg.resolved()?;

    let data = generate_synthetic(&cfg, Seeds::from_config(&cfg).data)?;
    let run = train_student(&cfg, None, &data, &[], &TrainOptions::default())?;

    let dir = std::env::temp_dir().join("emofuse-export-example");
    std::fs::create_dir_all(&dir)?;
    let ckpt = dir.join("student.ckpt");
    checkpoint::save_student(&ckpt, &run.student, run.best_epoch as u64)?;
    let (model, meta) = checkpoint::load(&ckpt)?;
    println!("reloaded {:?} checkpoint from epoch {}", meta.kind, meta.epoch);

    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| dir.join("embeddings.csv"));
    let rows = export_embeddings(&model, &data, &out)?;
    println!("wrote {rows} rows of {}-dimensional embeddings to {}", cfg.model.d_s, out.display());
    Ok(())
}
