//! Command-line flags and how they override a [`RunConfig`].

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Parser, Subcommand, ValueEnum};
use clusterseg_core::predictor::BoundMode;

use crate::config::RunConfig;

fn d() -> RunConfig {
    RunConfig::default()
}

#[derive(Debug, Parser)]
#[command(
    name = "clusterseg",
    version,
    about = "Instance segmentation of synthetic RGB-D frames by clustering per-pixel object features",
    after_help = "Exit codes: 0 success, 1 usage error, 2 data error, 3 check failed."
)]
pub struct Cli {
    /// JSON run configuration; flags given on the command line override it
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Worker threads, 0 for one per core
    #[arg(long, global = true, env = "CLUSTERSEG_JOBS", default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of rendered frames and annotations
    Gen(GenArgs),
    /// Predict and segment every frame of a dataset
    Infer(InferArgs),
    /// Score segmentations against a dataset
    Eval(EvalArgs),
    /// Check analytic loss gradients against central differences
    Gradcheck(GradcheckArgs),
    /// Train the per-pixel MLP predictor
    Train(TrainArgs),
    /// Print the resolved run configuration as JSON
    Config(ConfigArgs),
}

/// Image size written as `WIDTHxHEIGHT`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        Ok(Self {
            width: parse(w)?,
            height: parse(h)?,
        })
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Inclusive range written as `MIN..MAX` or a single number.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CountRange(pub usize, pub usize);

impl FromStr for CountRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
        match s.split_once("..") {
            Some((a, b)) => Ok(Self(parse(a)?, parse(b.trim_start_matches('='))?)),
            None => parse(s).map(|n| Self(n, n)),
        }
    }
}

impl fmt::Display for CountRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.0, self.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PredictorKind {
    /// Ground truth restated as a prediction
    Oracle,
    /// Ground truth plus configured noise
    Noisy,
    /// A trained MLP checkpoint
    Mlp,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Run seed
    #[arg(long, default_value_t = d().seed)]
    pub seed: u64,
    /// Number of frames
    #[arg(long, default_value_t = d().count)]
    pub count: usize,
    /// Image size
    #[arg(long, default_value_t = Resolution { width: d().generator.width, height: d().generator.height })]
    pub res: Resolution,
    /// Focal length in pixels; when omitted it scales with the width
    #[arg(long)]
    pub focal: Option<f64>,
    /// Inclusive object count range per scene
    #[arg(long, default_value_t = CountRange(d().generator.objects[0], d().generator.objects[1]))]
    pub objects: CountRange,
    /// Share of each object's pixels marked as centroid candidates
    #[arg(long, default_value_t = d().annotation.fraction)]
    pub fraction: f64,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Dataset directory written by `gen`
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for segmentation bundles
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PredictorKind::Oracle)]
    pub predictor: PredictorKind,
    /// Model checkpoint for the mlp predictor
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Run seed, used for noise
    #[arg(long, default_value_t = d().seed)]
    pub seed: u64,
    /// Foreground probability threshold
    #[arg(long, default_value_t = d().fg_threshold)]
    pub fg_threshold: f64,
    /// Feature noise standard deviation (gaussian mode)
    #[arg(long, default_value_t = d().noise.sigma_xi)]
    pub sigma_xi: f64,
    /// Enclosing radius noise standard deviation
    #[arg(long, default_value_t = d().noise.sigma_b)]
    pub sigma_b: f64,
    /// Centroid probability noise standard deviation
    #[arg(long, default_value_t = d().noise.sigma_eta)]
    pub sigma_eta: f64,
    /// Probability of flipping each pixel's foreground probability
    #[arg(long, default_value_t = d().noise.flip_rate)]
    pub flip_rate: f64,
    /// Uniform-ball feature noise of this absolute radius
    #[arg(long, conflicts_with = "ball_factor")]
    pub ball_radius: Option<f64>,
    /// Uniform-ball feature noise of radius FACTOR times each frame's smallest enclosing radius
    #[arg(long, value_name = "FACTOR")]
    pub ball_factor: Option<f64>,
    /// Comma-separated feature noise levels to sweep with the noisy predictor
    #[arg(long, value_delimiter = ',', requires = "sweep_out")]
    pub sweep_sigma: Vec<f64>,
    /// CSV file receiving one `sigma_xi,ap,...` row per swept level
    #[arg(long, requires = "sweep_sigma")]
    pub sweep_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory written by `gen`
    #[arg(long)]
    pub dataset: PathBuf,
    /// Segmentation directory written by `infer`
    #[arg(long)]
    pub segs: PathBuf,
    /// JSON report path
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run seed; frame f uses seed + f
    #[arg(long, default_value_t = d().seed)]
    pub seed: u64,
    /// Coordinates sampled per frame
    #[arg(long, default_value_t = d().gradcheck.samples)]
    pub samples: usize,
    /// Number of random frames
    #[arg(long, default_value_t = d().gradcheck.frames)]
    pub frames: usize,
    /// Frame side length in pixels
    #[arg(long, default_value_t = d().gradcheck.size)]
    pub size: usize,
    /// Central-difference step
    #[arg(long, default_value_t = d().gradcheck.epsilon)]
    pub epsilon: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = d().gradcheck.tolerance)]
    pub tolerance: f64,
    /// Variance loss weight
    #[arg(long, default_value_t = d().loss.lambda_var)]
    pub lambda_var: f64,
    /// Violation loss weight
    #[arg(long, default_value_t = d().loss.lambda_vio)]
    pub lambda_vio: f64,
    /// JSON report path
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Multiply the analytic gradient by this factor before checking
    #[arg(long, hide = true)]
    pub corrupt_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint written after the last epoch
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV log; defaults to the checkpoint path with a .csv extension
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total number of epochs
    #[arg(long, default_value_t = d().train.epochs)]
    pub epochs: usize,
    /// Images per mini-batch
    #[arg(long, default_value_t = d().train.batch_size)]
    pub batch: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = d().train.learning_rate)]
    pub lr: f64,
    /// Seed for initialization and shuffling
    #[arg(long, default_value_t = d().seed)]
    pub seed: u64,
    /// Foreground probability threshold used for the per-epoch AP
    #[arg(long, default_value_t = d().fg_threshold)]
    pub fg_threshold: f64,
    /// Keep the variance and violation weights fixed for all epochs
    #[arg(long)]
    pub no_schedule: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Write to this file instead of standard output
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// True when `id` was given on the command line or through the environment.
fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(
        m.value_source(id),
        Some(ValueSource::CommandLine | ValueSource::EnvVariable)
    )
}

fn set<T: Clone>(m: &ArgMatches, id: &str, value: &T, target: &mut T) {
    if given(m, id) {
        *target = value.clone();
    }
}

impl GenArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut RunConfig) {
        set(m, "seed", &self.seed, &mut cfg.seed);
        set(m, "count", &self.count, &mut cfg.count);
        let g = &mut cfg.generator;
        if given(m, "res") {
            let scale = g.focal / g.width as f64;
            g.width = self.res.width;
            g.height = self.res.height;
            g.focal = scale * g.width as f64;
        }
        if let Some(f) = self.focal {
            g.focal = f;
        }
        if given(m, "objects") {
            g.objects = [self.objects.0, self.objects.1];
        }
        set(m, "fraction", &self.fraction, &mut cfg.annotation.fraction);
    }
}

impl InferArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut RunConfig) {
        set(m, "seed", &self.seed, &mut cfg.seed);
        set(m, "fg_threshold", &self.fg_threshold, &mut cfg.fg_threshold);
        set(m, "sigma_xi", &self.sigma_xi, &mut cfg.noise.sigma_xi);
        set(m, "sigma_b", &self.sigma_b, &mut cfg.noise.sigma_b);
        set(m, "sigma_eta", &self.sigma_eta, &mut cfg.noise.sigma_eta);
        set(m, "flip_rate", &self.flip_rate, &mut cfg.noise.flip_rate);
        if let Some(radius) = self.ball_radius {
            cfg.noise.bound = BoundMode::UniformBall { radius };
            cfg.ball_factor = None;
        }
        if self.ball_factor.is_some() {
            cfg.ball_factor = self.ball_factor;
        }
    }
}

impl GradcheckArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut RunConfig) {
        set(m, "seed", &self.seed, &mut cfg.seed);
        let g = &mut cfg.gradcheck;
        set(m, "samples", &self.samples, &mut g.samples);
        set(m, "frames", &self.frames, &mut g.frames);
        set(m, "size", &self.size, &mut g.size);
        set(m, "epsilon", &self.epsilon, &mut g.epsilon);
        set(m, "tolerance", &self.tolerance, &mut g.tolerance);
        set(m, "lambda_var", &self.lambda_var, &mut cfg.loss.lambda_var);
        set(m, "lambda_vio", &self.lambda_vio, &mut cfg.loss.lambda_vio);
    }
}

impl TrainArgs {
    pub fn apply(&self, m: &ArgMatches, cfg: &mut RunConfig) {
        set(m, "seed", &self.seed, &mut cfg.seed);
        set(m, "epochs", &self.epochs, &mut cfg.train.epochs);
        set(m, "batch", &self.batch, &mut cfg.train.batch_size);
        set(m, "lr", &self.lr, &mut cfg.train.learning_rate);
        set(m, "fg_threshold", &self.fg_threshold, &mut cfg.fg_threshold);
        if self.no_schedule {
            cfg.train.schedule = None;
        }
    }
}
