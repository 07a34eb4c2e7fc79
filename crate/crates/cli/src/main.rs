//! `ldct`: synthesize phantoms, train, denoise, evaluate and cluster.

mod commands;
mod exit;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use ldct_core::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "ldct", version, about = "Low-dose CT denoising toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

// Parsed once per process; boxing the train flags buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom pairs (NNNN_ldct.slice / NNNN_ndct.slice).
    Synth(SynthArgs),
    /// Train the denoiser jointly with the contrastive network.
    Train(TrainArgs),
    /// Denoise one slice with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Cluster denoiser features of one slice into a label map.
    Cluster(ClusterArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Flags that override fields of the training config. Each flag's name is
/// the config field name with `_` replaced by `-`.
#[derive(Debug, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub global_weight: Option<f64>,
    #[arg(long)]
    pub local_weight: Option<f64>,
    #[arg(long)]
    pub ema_momentum: Option<f64>,
    #[arg(long)]
    pub pixel_queries: Option<usize>,
    #[arg(long)]
    pub patch_queries: Option<usize>,
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub negative_radius: Option<usize>,
    #[arg(long)]
    pub negative_pool: Option<usize>,
    #[arg(long)]
    pub window_lo: Option<f64>,
    #[arg(long)]
    pub window_hi: Option<f64>,
    #[arg(long)]
    pub foreground_hu: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a training checkpoint; its embedded config is used.
    #[arg(long, conflicts_with = "config")]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the windowed result as a 16-bit PNG.
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Also write a one-row CSV table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value = "ldct")]
    pub method: String,
    /// Lesion ROI as `row,col,height,width`; needs --background.
    #[arg(long, requires = "background", value_parser = commands::parse_roi)]
    pub lesion: Option<ldct_core::metrics::Roi>,
    /// Background ROI as `row,col,height,width`.
    #[arg(long, requires = "lesion", value_parser = commands::parse_roi)]
    pub background: Option<ldct_core::metrics::Roi>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = ldct_core::interpret::DEFAULT_CLUSTERS)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = ldct_core::interpret::DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// JSON sidecar path; defaults to the PNG path with a `.json` extension.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

/// The clap command with each override flag's help showing the built-in
/// config default.
pub fn command() -> clap::Command {
    let defaults = serde_json::to_value(TrainConfig::default()).expect("config serialises");
    Cli::command().mut_subcommand("train", |mut train| {
        let ids: Vec<String> = train
            .get_arguments()
            .map(|a| a.get_id().to_string())
            .filter(|id| defaults.get(id).is_some())
            .collect();
        for id in ids {
            let default = &defaults[&id];
            train = train.mut_arg(&id, |a| {
                a.help(format!("Override `{id}` [config default: {default}]"))
            });
        }
        train
    })
}

fn run(args: Vec<OsString>) -> u8 {
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let first = e.to_string();
            let first = first
                .lines()
                .next()
                .unwrap_or("usage error")
                .trim_start_matches("error: ");
            exit::report(exit::USAGE, "usage", first);
            return exit::USAGE;
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from this parser");
    // A panic is a bug, but it still gets the one-line report.
    std::panic::set_hook(Box::new(|_| {}));
    match std::panic::catch_unwind(|| commands::dispatch(cli.command)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            let (code, kind) = exit::classify(&e);
            exit::report(code, kind, &e.to_string());
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| payload.downcast_ref::<&str>().copied())
                .unwrap_or("internal error");
            exit::report(exit::OTHER, "internal", msg);
            exit::OTHER
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os().collect()))
}
