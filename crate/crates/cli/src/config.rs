//! Command-line arguments. Every subcommand's argument struct doubles as its
//! `run.json` record, so a run can be replayed from the file alone.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use restdyn_core::baselines::BaselineMethod;
use restdyn_core::data::{Group, SynthConfig};
use restdyn_core::models::{ModelKind, SkipMode};
use restdyn_core::ops::Activation;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "restdyn", version, about = "Learn normal spatiotemporal dynamics and score deviations from them")]
pub struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = "RESTDYN_THREADS")]
    pub threads: Option<usize>,

    /// Raise log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Write a seeded synthetic cohort with a manifest.
    Synth(SynthArgs),
    /// Train a model on the clips of a cohort.
    Train(TrainArgs),
    /// Score a cohort with a non-learned baseline.
    Baseline(BaselineArgs),
    /// Score a cohort with trained weights.
    Score(ScoreArgs),
    /// Group comparison of subject scores.
    Stats(StatsArgs),
    /// Per-region group comparison with FDR control.
    Regional(RegionalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Re-run a recorded run.json.
    #[serde(skip)]
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Baseline(_) => "baseline",
            Command::Score(_) => "score",
            Command::Stats(_) => "stats",
            Command::Regional(_) => "regional",
            Command::Gradcheck(_) => "gradcheck",
            Command::Replay(_) => "replay",
        }
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: String,
    pub verbose: u8,
    pub run: Command,
}

/// Parses a snake_case enum through its serde representation.
fn parse_snake<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    parse_snake(s)
}

fn parse_skip_mode(s: &str) -> Result<SkipMode, String> {
    parse_snake(s)
}

/// Which subjects of a cohort a command uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GroupFilter {
    Control,
    Patient,
    All,
}

impl GroupFilter {
    pub fn admits(self, g: Group) -> bool {
        match self {
            GroupFilter::All => true,
            GroupFilter::Control => g == Group::Control,
            GroupFilter::Patient => g == Group::Patient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().n_control)]
    pub controls: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_patient)]
    pub patients: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().x)]
    pub x: usize,
    #[arg(long, default_value_t = SynthConfig::default().y)]
    pub y: usize,
    #[arg(long, default_value_t = SynthConfig::default().z)]
    pub z: usize,
    /// Frames per subject.
    #[arg(long, default_value_t = SynthConfig::default().n)]
    pub frames: usize,
    #[arg(long, default_value_t = SynthConfig::default().anomaly_strength)]
    pub anomaly_strength: f64,
    #[arg(long, default_value_t = SynthConfig::default().blobs)]
    pub blobs: usize,
    /// Atlas blocks along x,y,z.
    #[arg(long, value_delimiter = ',', default_values_t = SynthConfig::default().atlas_blocks)]
    pub atlas_blocks: Vec<usize>,
    #[arg(long, default_value_t = SynthConfig::default().anomalous_regions)]
    pub anomalous_regions: usize,
    #[arg(long, default_value_t = SynthConfig::default().signal_amplitude)]
    pub signal_amplitude: f64,
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Cohort directory or manifest CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// recurrent_unet, unet2d or autoencoder.
    #[arg(long)]
    pub model: ModelKind,
    /// Input sequence length.
    #[arg(long, default_value_t = 20)]
    pub t: usize,
    #[arg(long, default_value_t = 150)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_split: f64,
    /// Seeds weight init and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Subjects to train on.
    #[arg(long, value_enum, default_value_t = GroupFilter::Control)]
    pub group: GroupFilter,
    /// Restrict to these subject ids (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub subjects: Vec<String>,
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    /// Feature count per encoder level (comma separated).
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32])]
    pub channels: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    pub bottleneck: usize,
    /// convlstm_last or last_frame.
    #[arg(long, value_parser = parse_skip_mode, default_value = "convlstm_last")]
    pub skip_mode: SkipMode,
    /// Drop the U-Net skip concatenations.
    #[arg(long)]
    pub no_skips: bool,
    /// relu, tanh, sigmoid or linear.
    #[arg(long, value_parser = parse_activation, default_value = "relu")]
    pub hidden_activation: Activation,
    #[arg(long, value_parser = parse_activation, default_value = "linear")]
    pub output_activation: Activation,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    /// Global gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 5.0)]
    pub grad_clip: f64,
    /// Plain Adam instead of AMSGrad.
    #[arg(long)]
    pub no_amsgrad: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// copy, extrapolate or interpolate.
    #[arg(long)]
    pub method: BaselineMethod,
    #[arg(long, default_value_t = 20)]
    pub t: usize,
    #[arg(long, value_enum, default_value_t = GroupFilter::All)]
    pub group: GroupFilter,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreArgs {
    /// Weight file written by `train`.
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Score at a different sequence length (recurrent models only).
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, value_enum, default_value_t = GroupFilter::All)]
    pub group: GroupFilter,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsArgs {
    /// scores.csv from `score` or `baseline`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Welch's unequal-variance t-test.
    #[arg(long)]
    pub welch: bool,
    /// Embed a regional.json from `regional`.
    #[arg(long)]
    pub regional: Option<PathBuf>,
    /// Embed a motion.json from `score` or `baseline`.
    #[arg(long)]
    pub motion: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionalArgs {
    /// Output directory of `score` or `baseline`.
    #[arg(long)]
    pub scores_dir: PathBuf,
    /// Cohort the scores came from (for the atlas).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub fdr_q: f64,
    #[arg(long)]
    pub welch: bool,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct ReplayArgs {
    /// A run.json written by an earlier invocation.
    pub run: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
