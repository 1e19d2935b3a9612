//! `bridge-ebm` command-line front end.
//!
//! Every command resolves an effective configuration (defaults, then an
//! optional `--config` file, then `EBM_THREADS`, then flags) and writes it
//! as `effective-config.txt` next to its outputs.

pub mod commands;
pub mod error;
pub mod settings;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::{CliError, ExitCode};
use settings::Settings;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  usage or configuration error
  2  I/O failure (dataset, outputs)
  3  training or sampling divergence (non-finite loss or gradient)
  4  checkpoint load or save failure
  5  verification failure";

#[derive(Debug, Parser)]
#[command(name = "bridge-ebm", version, about = "Energy-based generative model of bridge facades", after_help = EXIT_CODES)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every command.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// `key = value` file; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for matrix products (also settable via EBM_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Pin every computation to one thread.
    #[arg(long, global = true)]
    pub strict_determinism: bool,
}

impl Common {
    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("seed", self.seed.map(|v| v.to_string())),
            ("threads", self.threads.map(|v| v.to_string())),
            ("strict-determinism", self.strict_determinism.then(|| "true".into())),
        ]
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the bridge facade dataset.
    GenDataset(GenDatasetArgs),
    /// Train the energy network with contrastive divergence.
    Train(TrainArgs),
    /// Draw samples by Langevin dynamics from uniform noise.
    Sample(SampleArgs),
    /// Record snapshots of one Langevin chain.
    Trace(TraceArgs),
    /// Run the analytic-energy and gradient-check suites.
    Verify(VerifyArgs),
    /// Print the layer table and parameter counts.
    Info(InfoArgs),
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(|v| v.to_string())
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub per_subtype: Option<usize>,
    /// Compare an existing dataset with a fresh build instead of writing.
    #[arg(long)]
    pub verify: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub reg_weight: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Langevin steps per training batch.
    #[arg(long)]
    pub langevin_steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub real_noise: Option<f64>,
    #[arg(long)]
    pub buffer_capacity: Option<usize>,
    #[arg(long)]
    pub fresh_fraction: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Comma-separated sub-type names, or `all`.
    #[arg(long)]
    pub subtypes: Option<String>,
    /// Use at most this many images per sub-type (`all` for every one).
    #[arg(long)]
    pub per_subtype: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub trace_every: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// toy, grad or all.
    #[arg(long)]
    pub suite: Option<String>,
    /// Directory for the report, CSV and heatmaps (optional).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    /// Checkpoint to inspect; a freshly initialized network otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

fn path(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenDataset(_) => "gen-dataset",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Trace(_) => "trace",
            Command::Verify(_) => "verify",
            Command::Info(_) => "info",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenDataset(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Sample(a) => &a.common,
            Command::Trace(a) => &a.common,
            Command::Verify(a) => &a.common,
            Command::Info(a) => &a.common,
        }
    }

    fn own_flags(&self) -> Vec<(&'static str, Option<String>)> {
        match self {
            Command::GenDataset(a) => vec![
                ("out", path(&a.out)),
                ("per-subtype", s(&a.per_subtype)),
                ("verify", a.verify.then(|| "true".into())),
            ],
            Command::Train(a) => vec![
                ("data", path(&a.data)),
                ("out", path(&a.out)),
                ("epochs", s(&a.epochs)),
                ("batch", s(&a.batch)),
                ("reg-weight", s(&a.reg_weight)),
                ("lr", s(&a.lr)),
                ("langevin-steps", s(&a.langevin_steps)),
                ("step-size", s(&a.step_size)),
                ("noise", s(&a.noise)),
                ("grad-clip", s(&a.grad_clip)),
                ("real-noise", s(&a.real_noise)),
                ("buffer-capacity", s(&a.buffer_capacity)),
                ("fresh-fraction", s(&a.fresh_fraction)),
                ("checkpoint-every", s(&a.checkpoint_every)),
                ("subtypes", a.subtypes.clone()),
                ("per-subtype", a.per_subtype.clone()),
                ("resume", path(&a.resume)),
            ],
            Command::Sample(a) => vec![
                ("model", path(&a.model)),
                ("count", s(&a.count)),
                ("steps", s(&a.steps)),
                ("step-size", s(&a.step_size)),
                ("noise", s(&a.noise)),
                ("grad-clip", s(&a.grad_clip)),
                ("out", path(&a.out)),
            ],
            Command::Trace(a) => vec![
                ("model", path(&a.model)),
                ("steps", s(&a.steps)),
                ("trace-every", s(&a.trace_every)),
                ("step-size", s(&a.step_size)),
                ("noise", s(&a.noise)),
                ("grad-clip", s(&a.grad_clip)),
                ("out", path(&a.out)),
            ],
            Command::Verify(a) => vec![("suite", a.suite.clone()), ("out", path(&a.out))],
            Command::Info(a) => vec![("model", path(&a.model))],
        }
    }

    pub fn settings(&self) -> Result<Settings, CliError> {
        let mut flags = self.common().flags();
        flags.extend(self.own_flags());
        Settings::resolve(self.name(), commands::defaults(self.name()), self.common().config.as_deref(), flags)
    }
}

/// Execute one parsed command line, writing progress to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let settings = cli.command.settings()?;
    commands::dispatch(&settings, out)
}

/// Parse `args` (program name first), run, and return the exit status.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { ExitCode::Usage as i32 } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match run(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code as i32
        }
    }
}
