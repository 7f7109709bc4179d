//! Command-line driver for the lrdfield experiments.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error, 3 domain
//! error, 4 resource or accuracy budget exceeded, 5 acceptance threshold
//! missed under `--check`.

mod commands;
mod config;
mod params;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use config::{ConfigFile, RunSettings};
use params::*;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Lib(#[from] lrdfield::Error),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use lrdfield::Error as E;
        match self {
            CliError::Config(_) | CliError::Lib(E::Format(_)) => 2,
            CliError::Lib(E::Domain(_)) => 3,
            CliError::Lib(E::Resource(_) | E::Numerical(_)) => 4,
            CliError::Lib(E::Io(_)) => 1,
            CliError::Check(_) => 5,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lrdfield", version, about = "Anisotropic long-range dependence experiments on Z^2")]
struct Cli {
    /// Master seed of every random stream
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Exit with status 5 when an acceptance threshold is missed
    #[arg(long, global = true)]
    check: bool,
    /// Numerical tolerance of the subcommand
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// TOML file with a [run] section and one section per subcommand
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    #[command(subcommand)]
    Green(GreenCmd),
    #[command(subcommand)]
    Spectra(SpectraCmd),
    #[command(subcommand)]
    Limits(LimitsCmd),
    #[command(subcommand)]
    Cov(CovCmd),
    #[command(subcommand)]
    Sim(SimCmd),
    #[command(subcommand)]
    Estimate(EstimateCmd),
    #[command(subcommand)]
    Report(ReportCmd),
    /// Re-run the command recorded in a manifest with its resolved parameters
    Replay { manifest: PathBuf },
}

#[derive(Debug, Subcommand)]
enum GreenCmd {
    /// Green function window, FFT against series, and the mass identity
    Eval(GreenEvalArgs),
    /// Rescaled Green functions against the limit kernel
    Limit(GreenLimitArgs),
}

#[derive(Debug, Subcommand)]
enum SpectraCmd {
    /// Partial-sum variances normalized by n^{2H}
    Var(SpectraVarArgs),
    /// kappa^2(d) closed form against its defining integral
    Kappa(SpectraKappaArgs),
    /// Spectral density on a frequency grid
    Density(SpectraDensityArgs),
}

#[derive(Debug, Subcommand)]
enum LimitsCmd {
    /// Lattice functional ladder against the limit functional
    Jgamma(LimitsJgammaArgs),
    /// Exponent table H(gamma)
    Htable(LimitsHtableArgs),
}

#[derive(Debug, Subcommand)]
enum CovCmd {
    /// Scaled covariances of the aggregated Gaussian field against their limit
    Asym(CovAsymArgs),
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    /// Gaussian fields with a given spectral density
    Gauss(SimGaussArgs),
    /// Aggregated random-coefficient autoregressive fields
    Aggregate(SimAggregateArgs),
}

#[derive(Debug, Subcommand)]
enum EstimateCmd {
    /// Scaling exponent from saved fields
    Hurst(EstimateHurstArgs),
}

#[derive(Debug, Subcommand)]
enum ReportCmd {
    /// Type I / Type II classification from dependence probes and exponents
    Classify(ReportClassifyArgs),
}

/// A leaf subcommand with its flags.
enum Leaf {
    GreenEval(GreenEvalArgs),
    GreenLimit(GreenLimitArgs),
    SpectraVar(SpectraVarArgs),
    SpectraKappa(SpectraKappaArgs),
    SpectraDensity(SpectraDensityArgs),
    LimitsJgamma(LimitsJgammaArgs),
    LimitsHtable(LimitsHtableArgs),
    CovAsym(CovAsymArgs),
    SimGauss(SimGaussArgs),
    SimAggregate(SimAggregateArgs),
    EstimateHurst(EstimateHurstArgs),
    ReportClassify(ReportClassifyArgs),
}

const LEAVES: [&str; 12] = [
    "green eval",
    "green limit",
    "spectra var",
    "spectra kappa",
    "spectra density",
    "limits jgamma",
    "limits htable",
    "cov asym",
    "sim gauss",
    "sim aggregate",
    "estimate hurst",
    "report classify",
];

impl Leaf {
    fn name(&self) -> &'static str {
        LEAVES[match self {
            Leaf::GreenEval(_) => 0,
            Leaf::GreenLimit(_) => 1,
            Leaf::SpectraVar(_) => 2,
            Leaf::SpectraKappa(_) => 3,
            Leaf::SpectraDensity(_) => 4,
            Leaf::LimitsJgamma(_) => 5,
            Leaf::LimitsHtable(_) => 6,
            Leaf::CovAsym(_) => 7,
            Leaf::SimGauss(_) => 8,
            Leaf::SimAggregate(_) => 9,
            Leaf::EstimateHurst(_) => 10,
            Leaf::ReportClassify(_) => 11,
        }]
    }

    /// The leaf named `name` with no flags set.
    fn bare(name: &str) -> Option<Leaf> {
        Some(match name {
            "green eval" => Leaf::GreenEval(Default::default()),
            "green limit" => Leaf::GreenLimit(Default::default()),
            "spectra var" => Leaf::SpectraVar(Default::default()),
            "spectra kappa" => Leaf::SpectraKappa(Default::default()),
            "spectra density" => Leaf::SpectraDensity(Default::default()),
            "limits jgamma" => Leaf::LimitsJgamma(Default::default()),
            "limits htable" => Leaf::LimitsHtable(Default::default()),
            "cov asym" => Leaf::CovAsym(Default::default()),
            "sim gauss" => Leaf::SimGauss(Default::default()),
            "sim aggregate" => Leaf::SimAggregate(Default::default()),
            "estimate hurst" => Leaf::EstimateHurst(Default::default()),
            "report classify" => Leaf::ReportClassify(Default::default()),
            _ => return None,
        })
    }
}

fn section(name: &str) -> String {
    name.replace(' ', "_")
}

/// Resolve parameters, write the manifest, run the experiment.
fn execute<P, F>(
    leaf: &str,
    file: &ConfigFile,
    run: &RunSettings,
    flags: &F,
    body: impl FnOnce(&RunSettings, &P) -> Result<commands::Outcome, CliError>,
) -> Result<commands::Outcome, CliError>
where
    P: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let sec = section(leaf);
    let params: P = config::resolve(&sec, file, flags, run.tol)?;
    std::fs::create_dir_all(&run.out).map_err(|e| CliError::Lib(e.into()))?;
    config::write_manifest(run, leaf, &sec, &params)?;
    body(run, &params)
}

fn dispatch(leaf: Leaf, file: &ConfigFile, run: &RunSettings) -> Result<commands::Outcome, CliError> {
    let name = leaf.name();
    match &leaf {
        Leaf::GreenEval(a) => execute(name, file, run, a, commands::green_eval),
        Leaf::GreenLimit(a) => execute(name, file, run, a, commands::green_limit),
        Leaf::SpectraVar(a) => execute(name, file, run, a, commands::spectra_var),
        Leaf::SpectraKappa(a) => execute(name, file, run, a, commands::spectra_kappa),
        Leaf::SpectraDensity(a) => execute(name, file, run, a, commands::spectra_density),
        Leaf::LimitsJgamma(a) => execute(name, file, run, a, commands::limits_jgamma),
        Leaf::LimitsHtable(a) => execute(name, file, run, a, commands::limits_htable),
        Leaf::CovAsym(a) => execute(name, file, run, a, commands::cov_asym),
        Leaf::SimGauss(a) => execute(name, file, run, a, commands::sim_gauss),
        Leaf::SimAggregate(a) => execute(name, file, run, a, commands::sim_aggregate),
        Leaf::EstimateHurst(a) => execute(name, file, run, a, commands::estimate_hurst),
        Leaf::ReportClassify(a) => execute(name, file, run, a, commands::report_classify),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (leaf, file) = match cli.command {
        Command::Replay { manifest } => {
            let file = ConfigFile::load(&manifest)?;
            let name = config::manifest_command(&file)?;
            let leaf =
                Leaf::bare(&name).ok_or_else(|| CliError::Config(format!("manifest names unknown command `{name}`")))?;
            (leaf, file)
        }
        command => {
            let file = match &cli.config {
                Some(path) => ConfigFile::load(path)?,
                None => ConfigFile::default(),
            };
            let leaf = match command {
                Command::Green(GreenCmd::Eval(a)) => Leaf::GreenEval(a),
                Command::Green(GreenCmd::Limit(a)) => Leaf::GreenLimit(a),
                Command::Spectra(SpectraCmd::Var(a)) => Leaf::SpectraVar(a),
                Command::Spectra(SpectraCmd::Kappa(a)) => Leaf::SpectraKappa(a),
                Command::Spectra(SpectraCmd::Density(a)) => Leaf::SpectraDensity(a),
                Command::Limits(LimitsCmd::Jgamma(a)) => Leaf::LimitsJgamma(a),
                Command::Limits(LimitsCmd::Htable(a)) => Leaf::LimitsHtable(a),
                Command::Cov(CovCmd::Asym(a)) => Leaf::CovAsym(a),
                Command::Sim(SimCmd::Gauss(a)) => Leaf::SimGauss(a),
                Command::Sim(SimCmd::Aggregate(a)) => Leaf::SimAggregate(a),
                Command::Estimate(EstimateCmd::Hurst(a)) => Leaf::EstimateHurst(a),
                Command::Report(ReportCmd::Classify(a)) => Leaf::ReportClassify(a),
                Command::Replay { .. } => unreachable!("handled above"),
            };
            (leaf, file)
        }
    };
    let settings = RunSettings {
        seed: match cli.seed {
            Some(s) => s,
            None => file.run_value::<u64>("seed")?.unwrap_or(0),
        },
        out: match cli.out {
            Some(o) => o,
            None => file.run_value::<String>("out")?.map_or_else(|| PathBuf::from("out"), PathBuf::from),
        },
        check: cli.check || file.run_value::<bool>("check")?.unwrap_or(false),
        tol: match cli.tol {
            Some(t) => Some(t),
            None => file.run_value::<f64>("tol")?,
        },
    };
    let outcome = dispatch(leaf, &file, &settings)?;
    println!("{}", outcome.summary);
    match outcome.check {
        Some((false, what)) if settings.check => Err(CliError::Check(what)),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lrdfield: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
