//! `cassi` command-line driver.
//!
//! Exit codes: 0 on success, 1 on runtime errors (bad files, numerical
//! failures), 2 on usage errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "cassi",
    version,
    about = "Coded-aperture spectral imaging: simulate, reconstruct, train, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Project a cube through a coded mask and disperser into a 2-D measurement.
    Simulate(SimulateArgs),
    /// Recover a cube from a measurement with the unfolding network.
    Reconstruct(ReconstructArgs),
    /// Fit network weights to one or more scenes.
    Train(TrainArgs),
    /// Compare two cubes band by band (PSNR and SSIM).
    Eval(EvalArgs),
    /// Write one band of a cube as a binary PGM image.
    ExportBand(ExportBandArgs),
    /// Print a scan order as one index per line.
    DumpScanOrder(DumpScanOrderArgs),
    /// Write a synthetic scene and a random coded mask.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Dispersion shift in pixels per band.
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Detector bit depth for shot noise; noiseless when omitted.
    #[arg(long)]
    pub noise_bits: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub meas: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Trained weights; without them every stage uses an identity denoiser.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Network profile (`key=value` lines).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the profile's stage count.
    #[arg(long)]
    pub stages: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    /// Band count; derived from the measurement width when omitted.
    #[arg(long)]
    pub bands: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training scene (repeatable).
    #[arg(long = "scene")]
    pub scenes: Vec<PathBuf>,
    /// Directory of `.hsic` scenes, cropped to `--crop` and `--bands`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub bands: Option<usize>,
    /// Seed for random crops; center crops when omitted.
    #[arg(long)]
    pub crop_seed: Option<u64>,
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub d: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Global gradient-norm limit.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long)]
    pub noise_bits: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Weight initialization seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-step `step loss grad_norm` log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Peak value; defaults to the reference maximum.
    #[arg(long)]
    pub data_range: Option<f64>,
    /// Aligned table instead of key=value records.
    #[arg(long)]
    pub table: bool,
}

#[derive(Args, Debug)]
pub struct ExportBandArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub band: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OrderKind {
    Global,
    Local,
    Cross,
    Spectral,
}

#[derive(Args, Debug)]
pub struct DumpScanOrderArgs {
    #[arg(long, value_enum)]
    pub order: OrderKind,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub patch: usize,
    /// Cross-scan cube as `hxwxc`.
    #[arg(long, default_value = "2x2x1")]
    pub cube: String,
    #[arg(long)]
    pub reverse: bool,
    /// Print the inverse permutation instead.
    #[arg(long)]
    pub inverse: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub bands: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub mask_seed: u64,
    #[arg(long)]
    pub out_cube: PathBuf,
    #[arg(long)]
    pub out_mask: PathBuf,
}

/// Failure of a command, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<cassi_core::Error> for CliError {
    fn from(e: cassi_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the exit code.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match commands::dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}\n\nFor more information, try '--help'.");
            EXIT_USAGE
        }
        Err(CliError::Runtime(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

/// [`run_with`] on the process's standard streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}
