//! `snse` command-line runner. Exit codes: 0 ok, 1 failed check or runtime
//! error, 2 usage error, 3 invalid configuration.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod selftest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{ControlArgs, ControlMode, CouplingArgs, ToyArgs};

/// Thread-count override for the rayon pool.
pub const THREADS_ENV: &str = "SNSE_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(String),
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Failure(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Failure(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<snse_core::Error> for CliError {
    fn from(e: snse_core::Error) -> Self {
        use snse_core::Error as E;
        match e {
            E::EmptyModeSet
            | E::OriginMode
            | E::Config(_)
            | E::ModeOutsideTruncation { .. }
            | E::Budget(_)
            | E::SupportCap { .. } => CliError::Config(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "snse", version, about = "Stochastic 2D Navier-Stokes lab with degenerate forcing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify a forcing set and report the lattice it generates.
    AnalyzeForcing {
        /// Modes as "k1,k2;k1,k2;..."
        #[arg(long, allow_hyphen_values = true)]
        modes: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 12.0)]
        radius: f64,
        /// Print the report as JSON on stdout.
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate one replica; writes diagnostics CSV and optionally the trajectory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Binary trajectory with states and noise increments.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "diagnostics.csv")]
        csv: PathBuf,
        #[arg(long, default_value_t = 0)]
        replica: u64,
        /// Diagnostics row stride in steps.
        #[arg(long, default_value_t = 1)]
        every: usize,
    },
    /// Eigenvalues of the β-shifted Malliavin matrix over [s, t].
    MalliavinSpectrum {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        s: f64,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, default_value = "spectrum.csv")]
        out: PathBuf,
        /// Also write the full matrix as CSV.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Run the elliptic or hypoelliptic control and record the residual decay.
    ControlExperiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = ControlMode::Hypo)]
        mode: ControlMode,
        /// Comma-separated β values; more than one scans.
        #[arg(long, value_delimiter = ',')]
        beta: Option<Vec<f64>>,
        /// Number of control intervals.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        cut: Option<usize>,
        /// Add the Skorokhod correction under the cost budget.
        #[arg(long)]
        skorokhod: bool,
        /// Check operator-norm bounds and β-monotonicity.
        #[arg(long)]
        verify: bool,
        #[arg(long, default_value = "decay.csv")]
        out: PathBuf,
    },
    /// Pathwise vs finite-difference derivative of P_t φ with the bound's terms.
    GradientBound {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long, default_value = "gradient.csv")]
        out: PathBuf,
    },
    /// Empirical d_ε coupling distance between two laws at time T.
    CouplingDistance {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        w0a: PathBuf,
        #[arg(long)]
        w0b: PathBuf,
        #[arg(long = "T", value_delimiter = ',')]
        times: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long)]
        ensemble: Option<usize>,
        /// Largest ensemble fed to the exact transport solver.
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long, default_value = "coupling.csv")]
        out: PathBuf,
    },
    /// Gradient and coupling probes on the low-dimensional toy systems.
    AsfToy {
        /// sde1, sde2 or ou-chain
        #[arg(long)]
        system: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Option<Vec<f64>>,
        #[arg(long = "T", value_delimiter = ',')]
        times: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        gamma: Option<Vec<f64>>,
        #[arg(long)]
        ensemble: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "asf-toy")]
        out: PathBuf,
    },
    /// Quick invariant suite; exits 1 on any failure.
    Selftest,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    // a pool already built in this process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<String, CliError> {
    match cmd {
        Command::AnalyzeForcing {
            modes,
            config,
            radius,
            json,
            out,
        } => commands::analyze_forcing(modes.as_deref(), config.as_deref(), radius, json, out.as_deref()),
        Command::Simulate {
            config,
            out,
            csv,
            replica,
            every,
        } => commands::simulate(&config, out.as_deref(), &csv, replica, every),
        Command::MalliavinSpectrum {
            traj,
            s,
            t,
            beta,
            out,
            matrix,
        } => commands::malliavin_spectrum(&traj, s, t, beta, &out, matrix.as_deref()),
        Command::ControlExperiment {
            config,
            mode,
            beta,
            steps,
            replicas,
            cut,
            skorokhod,
            verify,
            out,
        } => commands::control_experiment(ControlArgs {
            config: &config,
            mode,
            betas: beta,
            steps,
            replicas,
            cut,
            skorokhod,
            verify,
            out: &out,
        }),
        Command::GradientBound {
            config,
            beta,
            steps,
            replicas,
            out,
        } => commands::gradient_bound(&config, beta, steps, replicas, &out),
        Command::CouplingDistance {
            config,
            w0a,
            w0b,
            times,
            eps,
            ensemble,
            cap,
            out,
        } => commands::coupling_distance(CouplingArgs {
            config: &config,
            w0a: &w0a,
            w0b: &w0b,
            times,
            eps,
            ensemble,
            cap,
            out: &out,
        }),
        Command::AsfToy {
            system,
            x0,
            times,
            eps,
            gamma,
            ensemble,
            seed,
            out,
        } => commands::asf_toy(ToyArgs {
            system: &system,
            x0,
            times,
            eps,
            gammas: gamma,
            ensemble,
            seed,
            out: &out,
        }),
        Command::Selftest => selftest::run(),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = init_threads().and_then(|_| dispatch(cli.command));
    match result {
        Ok(summary) => {
            if !summary.is_empty() {
                println!("{summary}");
            }
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
