//! Command-line entry point.
//!
//! Exit status: 0 success, 1 usage error, 2 data error, 3 numeric failure
//! (non-finite loss or a failed gradient check).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{synth_dataset, write_atomic, Clip, Entry, Manifest, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::model::{self, Architecture, InferOptions, TraitVector, TRAITS, TRAIT_NAMES};
use crate::optim::LrSchedule;
use crate::rnn_head::{self, RnnCheckpoint, RnnConfig, RnnTrainConfig, Sequence};
use crate::train::{self, load_checkpoint, Target, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "avtrait", version, about = "Audiovisual residual networks for apparent personality traits")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every stochastic step of the command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (falls back to DI_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// `key = value` file of default flags; explicit flags win.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct Schedule {
    /// Initial Adam step size.
    #[arg(long, default_value_t = 2e-4)]
    alpha: f64,
    /// Divide the step size by 10 every this many epochs.
    #[arg(long, default_value_t = 300)]
    decay_period: usize,
}

impl Schedule {
    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial_alpha: self.alpha,
            period: self.decay_period,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug, Clone)]
struct Inference {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// train, validation or test; all entries when omitted.
    #[arg(long)]
    split: Option<Split>,
    /// Use every n-th frame of each clip.
    #[arg(long, default_value_t = 1)]
    frame_stride: usize,
    /// Trait of a single-output fine-tuned checkpoint (name or 0-4).
    #[arg(long = "trait", value_name = "TRAIT")]
    trait_name: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with a manifest.
    Synth {
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// How many of the clips go to the validation split.
        #[arg(long, default_value_t = 0)]
        validation: usize,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the network on the train split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 900)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Miniature network for desk-scale runs.
        #[arg(long)]
        mini: bool,
        /// Save a checkpoint every this many epochs (0: final only).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        schedule: Schedule,
        #[command(flatten)]
        common: Common,
    },
    /// Report per-trait accuracy (1 - MAE) over a split.
    Eval {
        #[command(flatten)]
        inference: Inference,
        /// Report file; defaults to eval-<split>.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print one prediction line per clip.
    Predict {
        #[command(flatten)]
        inference: Inference,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a single-trait network from a trained checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "trait", value_name = "TRAIT")]
        trait_name: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 900)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        #[command(flatten)]
        schedule: Schedule,
        #[command(flatten)]
        common: Common,
    },
    /// Cache per-second features of every clip for the recurrent head.
    ExtractFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the recurrent head on cached features.
    TrainRnn {
        #[arg(long)]
        features: PathBuf,
        /// Labels come from the train split of this manifest.
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        dropout: f64,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        schedule: Schedule,
        #[command(flatten)]
        common: Common,
    },
    /// Print time-averaged recurrent-head predictions.
    PredictRnn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        head: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks of every layer and the miniature network.
    Gradcheck {
        /// Accepted for symmetry; the network check always uses the miniature network.
        #[arg(long)]
        mini: bool,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Predict { common, .. }
            | Command::Finetune { common, .. }
            | Command::ExtractFeatures { common, .. }
            | Command::TrainRnn { common, .. }
            | Command::PredictRnn { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

/// Failures that map to an exit status.
enum Failure {
    Usage(String),
    Lib(Error),
    GradcheckFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `key = value` lines into long flags. `true` / `false` values
/// toggle switches.
pub fn config_args(text: &str, path: &Path) -> Result<Vec<OsString>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::invalid(format!("{}:{}: expected key = value", path.display(), i + 1)));
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key == "config" {
            return Err(Error::invalid(format!("{}:{}: bad key", path.display(), i + 1)));
        }
        match value {
            "true" => out.push(format!("--{key}").into()),
            "false" => {}
            v => {
                out.push(format!("--{key}").into());
                out.push(v.into());
            }
        }
    }
    Ok(out)
}

/// Splices config-file flags in front of the explicit ones so the explicit
/// flags take precedence.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            let p = it.next().ok_or_else(|| Error::invalid("--config needs a file"))?;
            config = Some(PathBuf::from(p));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let extra = config_args(&text, &path)?;
    // rest[0] is the program name and rest[1] the subcommand.
    let at = rest.len().min(2);
    rest.splice(at..at, extra);
    Ok(rest)
}

fn thread_count(common: &Common) -> std::result::Result<Option<usize>, String> {
    if let Some(n) = common.threads {
        return if n == 0 {
            Err("--threads must be at least 1".into())
        } else {
            Ok(Some(n))
        };
    }
    match std::env::var("DI_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| format!("DI_THREADS={v} is not a positive integer")),
        Err(_) => Ok(None),
    }
}

/// Runs one command; returns the exit status.
pub fn run(argv: Vec<OsString>, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let threads = match thread_count(cli.command.common()) {
        Ok(t) => t,
        Err(msg) => {
            let _ = writeln!(err, "error: {msg}");
            return EXIT_USAGE;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let result = pool.install(|| dispatch(cli.command, out, err));
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Lib(e)) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
        Err(Failure::GradcheckFailed) => EXIT_NUMERIC,
    }
}

fn parse_trait(s: &str) -> std::result::Result<usize, Failure> {
    if let Ok(k) = s.parse::<usize>() {
        if k < TRAITS {
            return Ok(k);
        }
    }
    TRAIT_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(s))
        .ok_or_else(|| Failure::Usage(format!("unknown trait {s}; use a name or an index in 0..{TRAITS}")))
}

fn entries(manifest: &Manifest, split: Option<Split>) -> Vec<&Entry> {
    match split {
        Some(s) => manifest.split(s).collect(),
        None => manifest.entries.iter().collect(),
    }
}

fn load_training_clips(manifest: &Manifest) -> Result<Vec<Clip>> {
    manifest.split(Split::Train).map(|e| manifest.load_clip(e)).collect()
}

fn target_for(arch: &Architecture, trait_name: Option<&str>) -> std::result::Result<Target, Failure> {
    match (arch.outputs, trait_name) {
        (TRAITS, None) => Ok(Target::AllTraits),
        (TRAITS, Some(_)) => Err(Failure::Usage("--trait applies only to single-output checkpoints".into())),
        (1, Some(t)) => Ok(Target::Trait(parse_trait(t)?)),
        (1, None) => Err(Failure::Usage("single-output checkpoint: pass --trait".into())),
        (n, _) => Err(Failure::Lib(Error::ManifestMismatch(format!("checkpoint has {n} outputs")))),
    }
}

fn prediction_line(id: &str, values: &[f32]) -> String {
    let mut s = id.to_string();
    for v in values {
        let _ = write!(s, ",{v:.6}");
    }
    s
}

fn progress(err: &mut (dyn Write + Send), l: &train::EpochLoss) {
    let _ = writeln!(err, "epoch {} alpha {:e} train_mae {:.6}", l.epoch, l.alpha, l.train_mae);
}

fn dispatch(command: Command, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> std::result::Result<(), Failure> {
    match command {
        Command::Synth {
            n,
            validation,
            seconds,
            out: dir,
            common,
        } => {
            let path = synth_dataset(
                &SynthConfig {
                    count: n,
                    validation,
                    seed: common.seed,
                    seconds,
                },
                &dir,
            )?;
            let _ = writeln!(out, "{}", path.display());
        }
        Command::Train {
            manifest,
            out: dir,
            epochs,
            batch_size,
            mini,
            checkpoint_every,
            resume,
            schedule,
            common,
        } => {
            let manifest = Manifest::load(&manifest)?;
            let clips = load_training_clips(&manifest)?;
            let (arch, state) = match resume {
                Some(p) => {
                    let (ck, arch) = load_checkpoint(&p, None)?;
                    if mini != (arch.variant == model::Variant::Mini) {
                        return Err(Failure::Usage("--mini does not match the resumed checkpoint".into()));
                    }
                    (arch, ck)
                }
                None => {
                    let arch = if mini { Architecture::mini() } else { Architecture::full() };
                    let ck = train::fresh_checkpoint(&arch, common.seed);
                    (arch, ck)
                }
            };
            let config = TrainConfig {
                epochs,
                batch_size,
                schedule: schedule.schedule(),
                seed: common.seed,
                checkpoint_every,
                out_dir: Some(dir.clone()),
            };
            train::train(&arch, &clips, &config, state, Target::AllTraits, |l| progress(err, l))?;
            let _ = writeln!(out, "{}", dir.join("final.ckpt").display());
        }
        Command::Eval { inference, out: report, .. } => {
            let (ck, arch) = load_checkpoint(&inference.checkpoint, None)?;
            let target = target_for(&arch, inference.trait_name.as_deref())?;
            let manifest = Manifest::load(&inference.manifest)?;
            let opts = InferOptions {
                frame_stride: inference.frame_stride,
            };
            let r = match inference.split {
                Some(split) => train::evaluate(&arch, &ck.params, &manifest, split, target, opts)?,
                None => {
                    let mut all = Vec::new();
                    let mut failures = Vec::new();
                    for e in &manifest.entries {
                        match manifest.load_clip(e) {
                            Ok(c) => all.push((e.clip_id.clone(), c)),
                            Err(x) => failures.push((e.clip_id.clone(), x.to_string())),
                        }
                    }
                    let mut r = train::evaluate_clips(&arch, &ck.params, &all, target, opts)?;
                    r.excluded = failures.len();
                    r.failures = failures;
                    r
                }
            };
            for (id, reason) in &r.failures {
                let _ = writeln!(err, "excluded {id}: {reason}");
            }
            let csv = r.to_csv();
            let path = report.unwrap_or_else(|| {
                let name = match inference.split {
                    Some(s) => format!("eval-{s}.csv"),
                    None => "eval-all.csv".into(),
                };
                inference.checkpoint.parent().unwrap_or(Path::new(".")).join(name)
            });
            write_atomic(&path, csv.as_bytes())?;
            let _ = write!(out, "{csv}");
        }
        Command::Predict { inference, .. } => {
            let (ck, arch) = load_checkpoint(&inference.checkpoint, None)?;
            target_for(&arch, inference.trait_name.as_deref())?;
            let manifest = Manifest::load(&inference.manifest)?;
            let opts = InferOptions {
                frame_stride: inference.frame_stride,
            };
            for e in entries(&manifest, inference.split) {
                let clip = manifest.load_clip(e)?;
                let values = model::predict(&arch, &ck.params, &clip, opts)?;
                let _ = writeln!(out, "{}", prediction_line(&e.clip_id, &values));
            }
        }
        Command::Finetune {
            checkpoint,
            trait_name,
            manifest,
            out: dir,
            epochs,
            batch_size,
            checkpoint_every,
            schedule,
            common,
        } => {
            let k = parse_trait(&trait_name)?;
            let (base, base_arch) = load_checkpoint(&checkpoint, None)?;
            if base_arch.outputs != TRAITS {
                return Err(Failure::Usage("fine-tuning starts from a five-output checkpoint".into()));
            }
            let manifest = Manifest::load(&manifest)?;
            let clips = load_training_clips(&manifest)?;
            let config = TrainConfig {
                epochs,
                batch_size,
                schedule: schedule.schedule(),
                seed: common.seed,
                checkpoint_every,
                out_dir: Some(dir.clone()),
            };
            train::finetune_per_trait(&base, &base_arch, k, &clips, &config, |l| progress(err, l))?;
            let _ = writeln!(out, "{}", dir.join("final.ckpt").display());
        }
        Command::ExtractFeatures {
            checkpoint,
            manifest,
            split,
            out: path,
            ..
        } => {
            let (ck, arch) = load_checkpoint(&checkpoint, None)?;
            let manifest = Manifest::load(&manifest)?;
            let mut feats = Vec::new();
            for e in entries(&manifest, split) {
                let clip = manifest.load_clip(e)?;
                feats.push((e.clip_id.clone(), rnn_head::extract_features(&arch, &ck.params, &clip)?));
            }
            rnn_head::save_feature_cache(&path, &feats)?;
            let _ = writeln!(out, "{}", path.display());
        }
        Command::TrainRnn {
            features,
            manifest,
            out: dir,
            epochs,
            dropout,
            resume,
            schedule,
            common,
        } => {
            let manifest = Manifest::load(&manifest)?;
            let cache = rnn_head::load_feature_cache(&features)?;
            let labels: std::collections::HashMap<&str, TraitVector> =
                manifest.split(Split::Train).map(|e| (e.clip_id.as_str(), e.label)).collect();
            let sequences: Vec<Sequence> = cache
                .into_iter()
                .filter_map(|(id, f)| {
                    let label = *labels.get(id.as_str())?;
                    Some(Sequence { id, features: f, label })
                })
                .collect();
            let input = match sequences.first() {
                Some(s) => s.features.shape()[1],
                None => return Err(Failure::Usage("no cached features for train-split clips".into())),
            };
            let (state, config) = match resume {
                Some(p) => {
                    let (ck, cfg) = RnnCheckpoint::load(&p)?;
                    (ck, RnnConfig { dropout, ..cfg })
                }
                None => {
                    let config = RnnConfig {
                        dropout,
                        ..RnnConfig::standard(input)
                    };
                    (RnnCheckpoint::fresh(&config, common.seed)?, config)
                }
            };
            let train = RnnTrainConfig {
                epochs,
                schedule: schedule.schedule(),
            };
            let (ck, losses) = rnn_head::train_rnn(&config, &sequences, &train, state, |e, l| {
                let _ = writeln!(err, "epoch {e} train_mae {l:.6}");
            })?;
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let first = ck.epoch as usize - losses.len();
            let mut log = String::from("epoch,train_mae\n");
            for (i, l) in losses.iter().enumerate() {
                let _ = writeln!(log, "{},{l:.9}", first + i);
            }
            write_atomic(&dir.join("rnn_loss.csv"), log.as_bytes())?;
            let path = dir.join("head.ckpt");
            ck.save(&path)?;
            let _ = writeln!(out, "{}", path.display());
        }
        Command::PredictRnn {
            checkpoint,
            head,
            manifest,
            split,
            ..
        } => {
            let (base, arch) = load_checkpoint(&checkpoint, None)?;
            let (h, config) = RnnCheckpoint::load(&head)?;
            let manifest = Manifest::load(&manifest)?;
            for e in entries(&manifest, split) {
                let clip = manifest.load_clip(e)?;
                let values = rnn_head::predict_rnn(&arch, &base.params, &config, &h.params, &clip)?;
                let _ = writeln!(out, "{}", prediction_line(&e.clip_id, &values));
            }
        }
        Command::Gradcheck { common, .. } => {
            let rows = gradcheck::suite(common.seed)?;
            let _ = writeln!(out, "{:<26} {:>14} {:>10}  result", "check", "max_rel_err", "tolerance");
            let mut ok = true;
            for r in &rows {
                let pass = r.passed();
                ok &= pass;
                let _ = writeln!(
                    out,
                    "{:<26} {:>14.3e} {:>10.0e}  {}",
                    r.name,
                    r.max_relative_error,
                    r.tolerance,
                    if pass { "PASS" } else { "FAIL" }
                );
            }
            if !ok {
                return Err(Failure::GradcheckFailed);
            }
        }
    }
    Ok(())
}
