//! Command-line front end.
//!
//! Every command prints the fully resolved configuration before doing any
//! work. Failures print one `ERROR: ...` line on stderr and exit with 1
//! for invalid input or 2 for I/O, serialization and checkpoint failures.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::{load_config, Branches, ModelConfig, SmoothingForm};
use crate::data::{generate_synthetic, load_dialogues, utterance_count, write_dialogues, DialogueRecord};
use crate::error::{Error, Result};
use crate::model::AnyModel;
use crate::seeds::Seeds;
use crate::train::{
    self, check_student_gradients, evaluate, export_embeddings, split_for_config, train_student, train_teacher,
    write_loss_log, TrainOptions,
};

#[derive(Debug, Parser)]
#[command(name = "emofuse", version, about = "Multimodal emotion recognition in conversations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file; missing keys take built-in defaults [default: built-in defaults]
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed for data, initialization, routing noise and shuffling [default: run.seed from the config]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Text,
    All,
}

#[derive(Clone, Debug, Args)]
pub struct AblationArgs {
    /// Skip the expert banks and feed embedded features straight to fusion [default: off]
    #[arg(long, default_value_t = false)]
    pub no_sdmoe: bool,
    /// Fuse modalities by concatenation and a linear projection [default: off]
    #[arg(long, default_value_t = false)]
    pub no_hcmf: bool,
    /// Train the student on supervision and smoothing only, without a teacher [default: off]
    #[arg(long, default_value_t = false)]
    pub no_ikd: bool,
    /// Fusion anchors [default: ablation.branches from the config]
    #[arg(long, value_enum)]
    pub branches: Option<BranchArg>,
    /// Use the literal smoothing term -mean(sum p log q) instead of smoothed cross-entropy [default: off]
    #[arg(long, default_value_t = false)]
    pub literal_eq9: bool,
    /// Seed of the routing noise stream [default: derived from the root seed]
    #[arg(long)]
    pub noise_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic corpus as JSON lines
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output JSONL file
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the text-only teacher and save it frozen
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        ablation: AblationArgs,
        /// JSONL corpus; split into train/val/test by data.split
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log (JSON lines) [default: not written]
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Train the multimodal student under a frozen teacher
    TrainStudent {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        ablation: AblationArgs,
        /// Frozen teacher checkpoint; required unless --no-ikd [default: none]
        #[arg(long)]
        teacher_checkpoint: Option<PathBuf>,
        /// JSONL corpus; split into train/val/test by data.split
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to write
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss log (JSON lines) [default: not written]
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and report accuracy and F1
    Eval {
        /// Teacher or student checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL corpus
        #[arg(long)]
        data: PathBuf,
        /// Part of the corpus to evaluate, split with the checkpoint's config
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Write the report as JSON here [default: stdout only]
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the per-utterance representation the classifier reads as CSV
    ExportEmbeddings {
        /// Teacher or student checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL corpus
        #[arg(long)]
        data: PathBuf,
        /// Part of the corpus to export, split with the checkpoint's config
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Output CSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the student objective
    CheckGrads {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        ablation: AblationArgs,
        /// JSONL corpus [default: synthetic dialogues from the config]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of dialogues in the checked batch
        #[arg(long, default_value_t = 2)]
        dialogues: usize,
        /// Central-difference step
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Largest accepted relative error
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Shrink every model width to this value for the check; 0 keeps the config's sizes
        #[arg(long, default_value_t = 4)]
        width: usize,
    },
}

/// Loads the config (or defaults), applies `SUMMER_*` environment
/// overrides and the command-line flags, and validates the result.
pub fn resolve_config(args: &ConfigArgs, ablation: Option<&AblationArgs>) -> Result<ModelConfig> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => ModelConfig::from_toml_with_env("", std::env::vars())?,
    };
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    if let Some(a) = ablation {
        cfg.ablation.sdmoe &= !a.no_sdmoe;
        cfg.ablation.hcmf &= !a.no_hcmf;
        cfg.ablation.ikd &= !a.no_ikd;
        if let Some(b) = a.branches {
            cfg.ablation.branches = match b {
                BranchArg::Text => Branches::Text,
                BranchArg::All => Branches::All,
            };
        }
        if a.literal_eq9 {
            cfg.ikd.smoothing = SmoothingForm::Literal;
        }
        if a.noise_seed.is_some() {
            cfg.sdmoe.noise_seed = a.noise_seed;
        }
    }
    cfg.resolved()
}

fn shrink(cfg: &ModelConfig, width: usize) -> Result<ModelConfig> {
    if width == 0 {
        return Ok(cfg.clone());
    }
    let mut c = cfg.clone();
    let m = &mut c.model;
    m.d_t = m.d_t.min(width + 1);
    m.d_a = m.d_a.min(width);
    m.d_v = m.d_v.min(width.saturating_sub(1).max(1));
    m.d_s = width;
    m.heads = m.heads.min(2).max(1);
    m.head_dim = Some(width.div_ceil(m.heads));
    m.fusion_layers = m.fusion_layers.min(2);
    m.teacher_layers = Some(m.fusion_layers);
    m.gru_hidden = Some(width);
    m.ffn_hidden = Some(2 * width);
    c.sdmoe.experts = c.sdmoe.experts.min(3);
    c.resolved()
}

fn print_config(out: &mut dyn Write, cfg: &ModelConfig) -> Result<()> {
    let text = format!("# resolved config\n{}\n", cfg.to_toml());
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

macro_rules! say {
    ($out:expr, $($t:tt)*) => {
        writeln!($out, $($t)*).map_err(|e| Error::io("<stdout>", e))?
    };
}

fn select(cfg: &ModelConfig, records: Vec<DialogueRecord>, split: SplitArg) -> Result<Vec<DialogueRecord>> {
    if split == SplitArg::All {
        return Ok(records);
    }
    let s = split_for_config(cfg, &records)?;
    Ok(match split {
        SplitArg::Train => s.train,
        SplitArg::Val => s.val,
        SplitArg::Test | SplitArg::All => s.test,
    })
}

fn load_checkpoint(out: &mut dyn Write, path: &Path) -> Result<AnyModel> {
    let (model, meta) = checkpoint::load(path)?;
    print_config(out, model.config())?;
    say!(out, "loaded {:?} checkpoint from epoch {} ({})", meta.kind, meta.epoch, path.display());
    Ok(model)
}

fn training_data(out: &mut dyn Write, cfg: &ModelConfig, path: &Path) -> Result<(Vec<DialogueRecord>, Vec<DialogueRecord>)> {
    let records = load_dialogues(path, cfg)?;
    let s = split_for_config(cfg, &records)?;
    say!(
        out,
        "data: {} dialogues; train {} / val {} / test {} utterances",
        records.len(),
        utterance_count(&s.train),
        utterance_count(&s.val),
        utterance_count(&s.test)
    );
    Ok((s.train, s.val))
}

fn report_history(out: &mut dyn Write, history: &[train::EpochSummary], best: usize) -> Result<()> {
    for h in history {
        let l = &h.log;
        say!(
            out,
            "epoch {:>4}  total {:.6}  cross {:.6}  align {:.6}  smooth {:.6}  val_wf1 {}",
            l.epoch,
            l.total,
            l.l_cross,
            l.l_align,
            l.l_smooth,
            l.val_wf1.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
    }
    say!(out, "selected epoch {best}");
    Ok(())
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData { config, out: path } => {
            let cfg = resolve_config(&config, None)?;
            print_config(out, &cfg)?;
            let records = generate_synthetic(&cfg, Seeds::from_config(&cfg).data)?;
            write_dialogues(&path, &records)?;
            say!(
                out,
                "wrote {} dialogues ({} utterances) to {}",
                records.len(),
                utterance_count(&records),
                path.display()
            );
        }
        Command::TrainTeacher {
            config,
            ablation,
            data,
            out: path,
            loss_log,
        } => {
            let cfg = resolve_config(&config, Some(&ablation))?;
            print_config(out, &cfg)?;
            let (train, val) = training_data(out, &cfg, &data)?;
            let run = train_teacher(&cfg, &train, &val, &TrainOptions::default())?;
            report_history(out, &run.history, run.best_epoch)?;
            checkpoint::save_teacher(&path, &run.teacher, run.best_epoch as u64)?;
            if let Some(p) = loss_log {
                write_loss_log(&p, &run.history.iter().map(|h| h.log.clone()).collect::<Vec<_>>())?;
            }
            say!(out, "teacher checksum {}", run.teacher.params.checksum());
            say!(out, "saved frozen teacher to {}", path.display());
        }
        Command::TrainStudent {
            config,
            ablation,
            teacher_checkpoint,
            data,
            out: path,
            loss_log,
        } => {
            let cfg = resolve_config(&config, Some(&ablation))?;
            print_config(out, &cfg)?;
            let teacher = match (&teacher_checkpoint, cfg.ablation.ikd) {
                (Some(p), true) => Some(checkpoint::load_teacher(p)?),
                (None, true) => return Err(Error::Config("teacher checkpoint required".into())),
                (_, false) => None,
            };
            let before = teacher.as_ref().map(|t| t.params.checksum());
            let (train, val) = training_data(out, &cfg, &data)?;
            let run = train_student(&cfg, teacher.as_ref(), &train, &val, &TrainOptions::default())?;
            if let (Some(t), Some(b)) = (&teacher, &before) {
                if &t.params.checksum() != b {
                    return Err(Error::Contract("teacher parameters changed during student training".into()));
                }
                say!(out, "teacher checksum unchanged: {b}");
            }
            report_history(out, &run.history, run.best_epoch)?;
            checkpoint::save_student(&path, &run.student, run.best_epoch as u64)?;
            if let Some(p) = loss_log {
                write_loss_log(&p, &run.history.iter().map(|h| h.log.clone()).collect::<Vec<_>>())?;
            }
            say!(out, "saved student to {}", path.display());
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            split,
            report,
        } => {
            let model = load_checkpoint(out, &ckpt)?;
            let records = select(model.config(), load_dialogues(&data, model.config())?, split)?;
            let r = evaluate(&model, &records)?;
            let json = r.to_json()?;
            say!(out, "{json}");
            if let Some(p) = report {
                std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
            }
        }
        Command::ExportEmbeddings {
            checkpoint: ckpt,
            data,
            split,
            out: path,
        } => {
            let model = load_checkpoint(out, &ckpt)?;
            let records = select(model.config(), load_dialogues(&data, model.config())?, split)?;
            let rows = export_embeddings(&model, &records, &path)?;
            say!(out, "wrote {rows} rows to {}", path.display());
        }
        Command::CheckGrads {
            config,
            ablation,
            data,
            dialogues,
            eps,
            tolerance,
            width,
        } => {
            let cfg = shrink(&resolve_config(&config, Some(&ablation))?, width)?;
            print_config(out, &cfg)?;
            if dialogues == 0 {
                return Err(Error::Parameter("--dialogues must be > 0".into()));
            }
            let mut records = match &data {
                Some(p) => load_dialogues(p, &cfg)?,
                None => generate_synthetic(&cfg, Seeds::from_config(&cfg).data)?,
            };
            records.truncate(dialogues);
            let report = check_student_gradients(&cfg, None, &records, eps)?;
            for (name, err) in &report.per_param {
                say!(out, "{err:.3e}  {name}");
            }
            say!(
                out,
                "checked {} scalars, max relative error {:.3e}",
                report.scalars_checked,
                report.max_relative_error
            );
            if !(report.max_relative_error < tolerance) {
                let (name, idx, a, n) = report.worst.unwrap_or_default();
                return Err(Error::Domain(format!(
                    "gradient check failed: relative error {:.3e} exceeds {tolerance:e} at {name}[{idx}] (analytic {a:e}, numeric {n:e})",
                    report.max_relative_error
                )));
            }
            say!(out, "gradient check passed");
        }
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(err, "ERROR: {}", line.trim_start_matches("error: "));
            return 1;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "ERROR: {}", e.to_string().replace('\n', " "));
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}
