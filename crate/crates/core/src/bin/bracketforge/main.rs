mod commands;
mod params;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bracketforge::Error;

#[derive(Parser, Debug)]
#[command(name = "bracketforge", version, about = "Bracket-consistent HDR sampling with LDR diffusion priors")]
pub struct Cli {
    /// Random seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (sampling commands) or file (merge, train-toy, eval report).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON run config, or a manifest from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    pub serial: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample an exposure stack from noise.
    Generate(SamplingArgs),
    /// Hallucinate the other brackets around a fixed EV+0 image.
    Reconstruct(ReconstructArgs),
    /// Sample a stack whose EV+0 bracket follows a target histogram.
    HistGenerate(HistArgs),
    /// Merge a bracket directory into a PFM.
    Merge(MergeArgs),
    /// Evaluation helpers.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Train the toy denoiser on synthetic scenes.
    TrainToy(TrainArgs),
}

#[derive(Args, Debug, Default)]
pub struct SamplingArgs {
    /// `toy:<file>` or `analytic:gauss:...`
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated exposure values, e.g. -4,-2,0,2,4
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub evs: Option<Vec<f64>>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// constant | time-quadratic
    #[arg(long)]
    pub lambda_mode: Option<String>,
    #[arg(long)]
    pub lambda0: Option<f64>,
    /// estimate | score
    #[arg(long)]
    pub form: Option<String>,
    /// gamma:<d> | param:<beta>,<gamma> | identity
    #[arg(long)]
    pub crf: Option<String>,
    /// Conditioning token passed to the model.
    #[arg(long)]
    pub prompt: Option<String>,
    /// File name stem of the outputs.
    #[arg(long)]
    pub stem: Option<String>,
    /// Canvas width; wider than the model runs overlapping tiles.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub overlap: Option<usize>,
    /// Preview exposure multiplier.
    #[arg(long)]
    pub exposure: Option<f64>,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// LDR image to keep as EV+0.
    #[arg(long)]
    pub input: Option<String>,
    /// error | resize
    #[arg(long)]
    pub on_size_mismatch: Option<String>,
}

#[derive(Args, Debug)]
pub struct HistArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Target histogram JSON.
    #[arg(long)]
    pub histogram: Option<String>,
    /// Take the target histogram from an image.
    #[arg(long)]
    pub from_image: Option<String>,
    /// Synthetic target with this fraction in the top bin.
    #[arg(long)]
    pub saturated_frac: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    pub brackets: Option<String>,
    #[arg(long)]
    pub stem: Option<String>,
    #[arg(long)]
    pub crf: Option<String>,
    /// hat | trapezoid
    #[arg(long)]
    pub weight: Option<String>,
    #[arg(long)]
    pub low_cut: Option<f64>,
    #[arg(long)]
    pub high_cut: Option<f64>,
    /// Also write a tone-mapped PNG next to the PFM.
    #[arg(long)]
    pub preview: bool,
    #[arg(long)]
    pub exposure: Option<f64>,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Bracket-consistency PSNR of a bracket directory.
    Consistency {
        #[arg(long)]
        brackets: Option<String>,
        #[arg(long)]
        stem: Option<String>,
        #[arg(long)]
        crf: Option<String>,
    },
    /// Same-location crops of every bracket for external scoring.
    Crops {
        #[arg(long)]
        brackets: Option<String>,
        #[arg(long)]
        stem: Option<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Render brackets from a PFM.
    Extract {
        #[arg(long)]
        hdr: Option<String>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        evs: Option<Vec<f64>>,
        #[arg(long)]
        crf: Option<String>,
        /// Use the radiance as given instead of auto-exposing it.
        #[arg(long)]
        no_auto_ev0: bool,
        #[arg(long)]
        stem: Option<String>,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Number of synthetic scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Image side length.
    #[arg(long)]
    pub size: Option<usize>,
    /// linear_beta | cosine
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub schedule_steps: Option<usize>,
}

/// Exit status per error kind; clap itself exits with 2 on bad usage.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Io { .. } => 4,
        Error::Format { .. } | Error::Json(_) => 5,
        Error::Capability(_) => 6,
        Error::Contract(_) | Error::Shape { .. } | Error::Domain(_) => 7,
        Error::NonFinite(_) => 8,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Format { .. } | Error::Json(_) => "format",
        Error::Capability(_) => "capability",
        Error::Contract(_) | Error::Shape { .. } | Error::Domain(_) => "contract",
        Error::NonFinite(_) => "non_finite",
    }
}

/// Prints to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(report) => {
            emit(&serde_json::to_string_pretty(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let report = serde_json::json!({ "ok": false, "error_kind": error_kind(&e), "message": e.to_string() });
            emit(&report.to_string());
            ExitCode::from(exit_code(&e))
        }
    }
}
