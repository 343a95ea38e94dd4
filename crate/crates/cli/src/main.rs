//! `gauss-squeeze`: run a named scenario, write its CSV and print a summary.
//!
//! Exit status is 2 for invalid parameters, 1 for failures while running and
//! 0 otherwise. `GAUSS_SQUEEZE_THREADS` caps the worker pool.

mod config;
mod scenarios;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Runtime(String),
}

impl From<gauss_squeeze::Error> for CliError {
    fn from(e: gauss_squeeze::Error) -> Self {
        use gauss_squeeze::Error as E;
        match e {
            E::InvalidParameter(m) => CliError::Invalid(m),
            E::Dimension(_) => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid parameters: {m}"),
            CliError::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "gauss-squeeze", version, about = "Gaussian-state simulations of OPO squeezing, filter cavities and magnetometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options every scenario takes.
#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// INI file with parameters; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV output path [default: <scenario>.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Segment duration τ in s.
    #[arg(long)]
    pub tau: Option<f64>,
}

/// OPO parameters.
#[derive(Args, Debug, Default, Clone)]
pub struct OpoArgs {
    /// Cavity decay rate Γ in s⁻¹ [default: 2π × 6e6].
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Parametric gain g in s⁻¹ [default: 0.2 Γ].
    #[arg(long)]
    pub g: Option<f64>,
}

#[derive(Args, Debug, Default, Clone)]
pub struct TimeArgs {
    /// Final time in s.
    #[arg(long)]
    pub t_max: Option<f64>,
    /// Output spacing in s.
    #[arg(long)]
    pub dt_out: Option<f64>,
}

/// Intracavity variances against time, unconditioned and with p detected.
#[derive(Args, Debug, Default, Clone)]
pub struct OpoVariancesArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opo: OpoArgs,
    /// [defaults: t_max = 20/Γ, dt_out = 0.1/Γ, τ = 1e-3/Γ]
    #[command(flatten)]
    pub time: TimeArgs,
}

/// Collective output variances var(x_T), var(p_T) against window length T.
#[derive(Args, Debug, Default, Clone)]
pub struct CollectiveArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opo: OpoArgs,
    /// [defaults: t_max = 10/Γ, dt_out = 0.1/Γ, τ = 1e-3/Γ]
    #[command(flatten)]
    pub time: TimeArgs,
    /// Also write the uncorrected closed form for var(p_T) as `var_pT_eq58`.
    #[arg(long)]
    pub show_paper_eq58: bool,
}

/// Analysis-cavity V_min, V_max against detuning.
#[derive(Args, Debug, Default, Clone)]
pub struct FilterScanArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opo: OpoArgs,
    /// Analysis-cavity decay rate Γ₂ in s⁻¹ [default: Γ].
    #[arg(long)]
    pub gamma2: Option<f64>,
    /// Lowest detuning in s⁻¹ [default: −5 Γ].
    #[arg(long, allow_hyphen_values = true)]
    pub delta_min: Option<f64>,
    /// Highest detuning in s⁻¹ [default: 5 Γ].
    #[arg(long, allow_hyphen_values = true)]
    pub delta_max: Option<f64>,
    /// Number of grid points [default: 101].
    #[arg(long)]
    pub delta_steps: Option<usize>,
}

/// Atom-light coupling parameters.
#[derive(Args, Debug, Default, Clone)]
pub struct MagnetArgs {
    /// κ² in s⁻¹ [default: 1.83e6].
    #[arg(long)]
    pub kappa_sq: Option<f64>,
    /// μ in s⁻¹ pT⁻¹ [default: 8.79e4].
    #[arg(long)]
    pub mu: Option<f64>,
    /// Prior variance of B in pT² [default: 1].
    #[arg(long)]
    pub var_b0: Option<f64>,
    /// Broadband squeezing ratio r [default: ((Γ+4g)/(Γ−4g))²].
    #[arg(long)]
    pub r: Option<f64>,
}

/// var(B) against time for coherent, OPO and broadband-squeezed probes.
#[derive(Args, Debug, Default, Clone)]
pub struct MagnetometryArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opo: OpoArgs,
    #[command(flatten)]
    pub magnet: MagnetArgs,
    /// [defaults: t_max = 1e-5 s, dt_out = t_max/100]
    #[command(flatten)]
    pub time: TimeArgs,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    Coherent,
    Squeezed,
    Opo,
}

impl std::str::FromStr for ProbeKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Self as clap::ValueEnum>::from_str(s, true)
    }
}

/// Ensemble of seeded estimation runs against a fixed true field.
#[derive(Args, Debug, Default, Clone)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opo: OpoArgs,
    #[command(flatten)]
    pub magnet: MagnetArgs,
    /// [defaults: t_max = 1e-4 s, dt_out = t_max/5, τ = 1e-2/κ² (1e-3/Γ for opo)]
    #[command(flatten)]
    pub time: TimeArgs,
    /// Probe light [default: coherent].
    #[arg(long, value_enum)]
    pub probe: Option<ProbeKind>,
    /// True field in pT [default: 1].
    #[arg(long, allow_hyphen_values = true)]
    pub true_b: Option<f64>,
    /// Base seed; trajectory i uses stream i [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of trajectories [default: 1000].
    #[arg(long)]
    pub trajectories: Option<usize>,
}

/// Runs whichever scenario the config file names.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// INI file with a top-level `scenario = <name>` entry.
    #[arg(long)]
    pub config: PathBuf,
    /// CSV output path [default: <scenario>.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    OpoVariances(OpoVariancesArgs),
    Collective(CollectiveArgs),
    FilterScan(FilterScanArgs),
    Magnetometry(MagnetometryArgs),
    Montecarlo(MonteCarloArgs),
    Run(RunArgs),
}

fn dispatch(command: Command) -> Result<(), CliError> {
    let common = |config: PathBuf, out: Option<PathBuf>| Common {
        config: Some(config),
        out,
        tau: None,
    };
    match command {
        Command::OpoVariances(a) => scenarios::opo_variances(&a),
        Command::Collective(a) => scenarios::collective(&a),
        Command::FilterScan(a) => scenarios::filter_scan(&a),
        Command::Magnetometry(a) => scenarios::magnetometry(&a),
        Command::Montecarlo(a) => scenarios::montecarlo(&a),
        Command::Run(r) => {
            let cfg = Config::load(&r.config)?;
            let c = common(r.config.clone(), r.out.clone());
            match cfg.scenario() {
                Some("opo-variances") => scenarios::opo_variances(&OpoVariancesArgs { common: c, ..Default::default() }),
                Some("collective") => scenarios::collective(&CollectiveArgs { common: c, ..Default::default() }),
                Some("filter-scan") => scenarios::filter_scan(&FilterScanArgs { common: c, ..Default::default() }),
                Some("magnetometry") => scenarios::magnetometry(&MagnetometryArgs { common: c, ..Default::default() }),
                Some("montecarlo") => scenarios::montecarlo(&MonteCarloArgs { common: c, ..Default::default() }),
                Some(other) => Err(CliError::Invalid(format!(
                    "unknown scenario `{other}` (expected opo-variances, collective, filter-scan, magnetometry or montecarlo)"
                ))),
                None => Err(CliError::Invalid("config has no `scenario` entry".into())),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(raw) = std::env::var("GAUSS_SQUEEZE_THREADS") {
        match raw.trim().parse::<usize>() {
            Ok(n) if n > 0 => {
                gauss_squeeze::par::configure_threads(n);
            }
            _ => {
                eprintln!("error: invalid parameters: GAUSS_SQUEEZE_THREADS must be a positive integer, got `{raw}`");
                return ExitCode::from(2);
            }
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
