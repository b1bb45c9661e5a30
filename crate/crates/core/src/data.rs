//! Dialogue records, the JSON Lines feature-file format, a seeded
//! synthetic corpus generator and dialogue-level dataset splits.
//!
//! Feature file: one dialogue per line,
//!
//! ```text
//! {"dialogue_id": "d1", "utterances": [{"speaker": 0, "label": 2,
//!   "text": [..], "audio": [..], "visual": [..]}, ...]}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{Modality, ModelConfig};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub speaker: usize,
    pub label: usize,
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
    pub visual: Vec<f64>,
}

impl UtteranceRecord {
    pub fn features(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Text => &self.text,
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRecord {
    pub dialogue_id: String,
    pub utterances: Vec<UtteranceRecord>,
}

impl DialogueRecord {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }

    pub fn speakers(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.speaker).collect()
    }

    /// Checks lengths, labels and speakers against the configuration.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let id = &self.dialogue_id;
        if self.utterances.is_empty() {
            return Err(Error::Validation(format!("dialogue {id}: no utterances")));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            for m in Modality::ALL {
                let expected = cfg.model.input_dim(m);
                let actual = u.features(m).len();
                if actual != expected {
                    return Err(Error::Validation(format!(
                        "dialogue {id}, utterance {i}: {m}_features length {actual}, expected {expected}"
                    )));
                }
                if u.features(m).iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "dialogue {id}, utterance {i}: non-finite {m}_features value"
                    )));
                }
            }
            if u.label >= cfg.model.num_classes {
                return Err(Error::Validation(format!(
                    "dialogue {id}, utterance {i}: unknown label {}, expected < {}",
                    u.label, cfg.model.num_classes
                )));
            }
            if u.speaker >= cfg.model.num_speakers {
                return Err(Error::Validation(format!(
                    "dialogue {id}, utterance {i}: speaker {} out of range, expected < {}",
                    u.speaker, cfg.model.num_speakers
                )));
            }
        }
        Ok(())
    }
}

/// Total utterances across dialogues.
pub fn utterance_count(records: &[DialogueRecord]) -> usize {
    records.iter().map(DialogueRecord::len).sum()
}

/// Reads and validates a JSON Lines feature file. Blank lines are skipped;
/// an empty file yields an empty list with a warning.
pub fn load_dialogues(path: &Path, cfg: &ModelConfig) -> Result<Vec<DialogueRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        record.validate(cfg)?;
        out.push(record);
    }
    if out.is_empty() {
        log::warn!("{}: no dialogues found", path.display());
    }
    Ok(out)
}

/// Writes dialogues as JSON Lines with round-trip float precision.
pub fn write_dialogues(path: &Path, records: &[DialogueRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-class utterance counts from geometric class weights spanning
/// `imbalance_ratio`, rounded by largest remainder so they sum to `total`.
fn class_counts(total: usize, classes: usize, imbalance_ratio: f64) -> Vec<usize> {
    let weights: Vec<f64> = (0..classes)
        .map(|c| imbalance_ratio.powf(-(c as f64) / (classes - 1) as f64))
        .collect();
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &c in order.iter().take(missing) {
        counts[c] += 1;
    }
    counts
}

/// Seeded synthetic corpus. Each class has a prototype per modality at
/// distance `<modality>_separation` from the origin; features are the
/// prototype plus isotropic Gaussian noise, so text features are linearly
/// separable at the default separations.
pub fn generate_synthetic(cfg: &ModelConfig, seed: u64) -> Result<Vec<DialogueRecord>> {
    cfg.validate()?;
    let d = &cfg.data;
    let classes = cfg.model.num_classes;
    let mut rng = seeds::rng(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let prototypes: Vec<Vec<Vec<f64>>> = Modality::ALL
        .iter()
        .map(|&m| {
            let dim = cfg.model.input_dim(m);
            (0..classes)
                .map(|_| {
                    let v: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.iter().map(|x| x / norm * d.separation(m)).collect()
                })
                .collect()
        })
        .collect();

    let total = d.synthetic_utterances;
    let counts = class_counts(total, classes, d.imbalance_ratio);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat(c).take(k))
        .collect();
    labels.shuffle(&mut rng);

    let noise = Normal::new(0.0, d.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut dialogues = Vec::new();
    let mut cursor = 0;
    while cursor < total {
        let len = rng
            .gen_range(d.dialogue_min_len..=d.dialogue_max_len)
            .min(total - cursor);
        let utterances = labels[cursor..cursor + len]
            .iter()
            .map(|&label| {
                let speaker = rng.gen_range(0..cfg.model.num_speakers);
                let mut feats = Modality::ALL.iter().map(|&m| {
                    prototypes[m.code() as usize][label]
                        .iter()
                        .map(|p| p + noise.sample(&mut rng))
                        .collect::<Vec<f64>>()
                });
                UtteranceRecord {
                    speaker,
                    label,
                    text: feats.next().expect("text"),
                    audio: feats.next().expect("audio"),
                    visual: feats.next().expect("visual"),
                }
            })
            .collect();
        dialogues.push(DialogueRecord {
            dialogue_id: format!("syn{seed}_{:04}", dialogues.len()),
            utterances,
        });
        cursor += len;
    }
    Ok(dialogues)
}

/// Train / validation / test partition at dialogue granularity.
#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<DialogueRecord>,
    pub val: Vec<DialogueRecord>,
    pub test: Vec<DialogueRecord>,
}

/// Shuffles dialogues with `seed` and cuts them by `fractions`.
pub fn split_dataset(records: &[DialogueRecord], fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|&f| !(f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "split fractions must be nonnegative and sum to 1, got {fractions:?}"
        )));
    }
    let n = records.len();
    let nonzero = fractions.iter().filter(|&&f| f > 0.0).count();
    if n < nonzero {
        return Err(Error::Validation(format!(
            "{n} dialogues cannot fill {nonzero} nonzero splits"
        )));
    }
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|&f| if f > 0.0 { ((f * n as f64).round() as usize).max(1) } else { 0 })
        .collect();
    // Absorb rounding drift in the largest split.
    while sizes.iter().sum::<usize>() != n {
        let largest = (0..3).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).expect("3 splits");
        if sizes.iter().sum::<usize>() > n {
            sizes[largest] -= 1;
        } else {
            sizes[largest] += 1;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seed));
    let take = |range: std::ops::Range<usize>| -> Vec<DialogueRecord> {
        order[range].iter().map(|&i| records[i].clone()).collect()
    };
    Ok(Splits {
        train: take(0..sizes[0]),
        val: take(sizes[0]..sizes[0] + sizes[1]),
        test: take(sizes[0] + sizes[1]..n),
    })
}
