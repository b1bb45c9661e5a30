//! Generate a synthetic conversation corpus, split it by dialogue and
//! write it as JSON lines.
//!
//! Run with `cargo run --example synthetic_data [-- out.jsonl]`.

use emofuse::data::{generate_synthetic, utterance_count, write_dialogues};
use emofuse::seeds::Seeds;
use emofuse::train::split_for_config;
use emofuse::ModelConfig;

fn main() -> emofuse::Result<()> {
    let cfg = ModelConfig::default().resolved()?;
    let data = generate_synthetic(&cfg, Seeds::from_config(&cfg).data)?;
    println!("{} dialogues, {} utterances", data.len(), utterance_count(&data));

    let mut counts = vec![0usize; cfg.model.num_classes];
    for d in &data {
        for y in d.labels() {
            counts[y] += 1;
        }
    }
    for (label, n) in cfg.labels().iter().zip(&counts) {
        println!("  {label:<10} {n}");
    }

    let splits = split_for_config(&cfg, &data)?;
    println!(
        "split: train {} / val {} / test {} dialogues",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );

    let first = &data[0].utterances[0];
    println!(
        "first utterance: speaker {}, label {}, text dim {}, audio dim {}, visual dim {}",
        first.speaker,
        first.label,
        first.text.len(),
        first.audio.len(),
        first.visual.len()
    );

    if let Some(path) = std::env::args().nth(1) {
        write_dialogues(std::path::Path::new(&path), &data)?;
        println!("wrote {path}");
    }
    Ok(())
}
