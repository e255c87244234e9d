//! `hmn`: generate synthetic feature records, train, evaluate and inspect
//! hierarchical memory network detectors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

use crate::config::{Preset, Settings, UsageError};

#[derive(Parser, Debug)]
#[command(name = "hmn", version, about = "Hierarchical memory network for face-sequence tamper detection")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Size preset; `full` unless given.
    #[arg(long, value_enum, global = true)]
    preset: Option<Preset>,
    /// File of `key=value` lines applied after the preset and before flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    knobs: Knobs,
    #[command(subcommand)]
    command: Command,
}

/// Settings that can also appear in the config file under the same name.
#[derive(Args, Debug, Default)]
struct Knobs {
    /// Memory slots L.
    #[arg(long, global = true)]
    memory_len: Option<usize>,
    /// Patches per frame K.
    #[arg(long, global = true)]
    patches: Option<usize>,
    /// Feature width per patch d.
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// GRU hidden size H.
    #[arg(long, global = true)]
    hidden: Option<usize>,
    /// Frames between an input and its future target.
    #[arg(long, global = true)]
    delta: Option<usize>,
    /// Source frames between sampled frames.
    #[arg(long, global = true)]
    stride: Option<usize>,
    #[arg(long, global = true)]
    noise: Option<f64>,
    #[arg(long, global = true)]
    world_seed: Option<u64>,
    #[arg(long, global = true)]
    data_seed: Option<u64>,
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Sampled frames per episode.
    #[arg(long, global = true)]
    frames: Option<usize>,
    /// Comma-separated tamper modes: temporal-break, patch-splice.
    #[arg(long, global = true)]
    tamper: Option<String>,
    /// Train,val,test ratios, e.g. 0.7,0.1,0.2.
    #[arg(long, global = true)]
    split: Option<String>,
    #[arg(long, global = true)]
    split_seed: Option<u64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    d_lr: Option<f64>,
    /// Episodes per generator step.
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Frames per episode per generator step.
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    lambda_adv: Option<f64>,
    #[arg(long, global = true)]
    lambda_cls: Option<f64>,
    #[arg(long, global = true)]
    lambda_mse: Option<f64>,
    #[arg(long, global = true)]
    d_steps: Option<usize>,
    /// Fake-probability cut-off for frame decisions.
    #[arg(long, global = true)]
    threshold: Option<f64>,
}

impl Knobs {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        fn put<V: ToString>(out: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<V>) {
            if let Some(v) = v {
                out.push((key, v.to_string()));
            }
        }
        let mut out = Vec::new();
        put(&mut out, "memory-len", &self.memory_len);
        put(&mut out, "patches", &self.patches);
        put(&mut out, "dim", &self.dim);
        put(&mut out, "hidden", &self.hidden);
        put(&mut out, "delta", &self.delta);
        put(&mut out, "stride", &self.stride);
        put(&mut out, "noise", &self.noise);
        put(&mut out, "world-seed", &self.world_seed);
        put(&mut out, "data-seed", &self.data_seed);
        put(&mut out, "episodes", &self.episodes);
        put(&mut out, "frames", &self.frames);
        put(&mut out, "tamper", &self.tamper);
        put(&mut out, "split", &self.split);
        put(&mut out, "split-seed", &self.split_seed);
        put(&mut out, "lr", &self.lr);
        put(&mut out, "d-lr", &self.d_lr);
        put(&mut out, "batch-size", &self.batch_size);
        put(&mut out, "window", &self.window);
        put(&mut out, "steps", &self.steps);
        put(&mut out, "seed", &self.seed);
        put(&mut out, "lambda-adv", &self.lambda_adv);
        put(&mut out, "lambda-cls", &self.lambda_cls);
        put(&mut out, "lambda-mse", &self.lambda_mse);
        put(&mut out, "d-steps", &self.d_steps);
        put(&mut out, "threshold", &self.threshold);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    MemoryLen,
    Patches,
    Delta,
    Episodes,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic episodes to an FGR1 file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train a variant on the training split and save a checkpoint.
    Train {
        /// FGR1 file or directory of FGR1 files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step losses as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// full, no-<alpha|beta|gamma|gan|eta...>, ntm[+eta|+gan+eta], dmn[...].
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Score a checkpoint on one split and print the metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
        /// Per-frame scores as CSV.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate several variants; writes a CSV table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "full,no-eta,no-gan,ntm+gan+eta")]
        variants: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Vary one setting over fresh synthetic data; writes a CSV table.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare backpropagated gradients with central differences.
    GradCheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Frames of the example episode to run.
        #[arg(long, default_value_t = 2)]
        check_frames: usize,
        /// Fail when the maximum relative error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Project memory outputs onto their top two principal directions (CSV).
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-frame attention weights as JSON lines.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
        /// Only this episode id.
        #[arg(long)]
        episode: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve(cli: &Cli, default_preset: Preset) -> anyhow::Result<Settings> {
    let mut s = Settings::from_preset(cli.preset.unwrap_or(default_preset));
    if let Some(path) = &cli.config {
        s.apply_file(path)?;
    }
    for (k, v) in cli.knobs.pairs() {
        s.set(k, &v)?;
    }
    s.validate()?;
    Ok(s)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let default_preset = match cli.command {
        Command::GradCheck { .. } => Preset::Tiny,
        _ => Preset::Full,
    };
    let mut s = resolve(&cli, default_preset)?;
    log::info!("settings: {}", s.describe());
    match cli.command {
        Command::GenData { out, jobs } => commands::gen_data(&s, &out, jobs),
        Command::Train {
            data,
            out,
            loss_csv,
            variant,
        } => commands::train(&mut s, &data, &out, loss_csv.as_deref(), &variant),
        Command::Eval {
            checkpoint,
            data,
            part,
            scores,
            out,
        } => commands::eval(&s, &checkpoint, &data, part, scores.as_deref(), out.as_deref()),
        Command::Ablate {
            data,
            variants,
            out,
            jobs,
        } => commands::ablate(&mut s, &data, &variants, out.as_deref(), jobs),
        Command::Sweep {
            param,
            values,
            variant,
            out,
            jobs,
        } => commands::sweep(&s, param, &values, &variant, out.as_deref(), jobs),
        Command::GradCheck { eps, check_frames, tol } => commands::grad_check(&s, eps, check_frames, tol),
        Command::Project {
            checkpoint,
            data,
            part,
            out,
        } => commands::project(&s, &checkpoint, &data, part, &out),
        Command::Trace {
            checkpoint,
            data,
            part,
            episode,
            out,
        } => commands::trace(&s, &checkpoint, &data, part, episode, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
