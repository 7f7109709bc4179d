//! Flag and config-file parameters of every subcommand.
//!
//! Each subcommand has an `*Args` struct of optional flags and a `*Params`
//! struct of resolved values with built-in defaults; both are generated from
//! one field list so the two cannot drift apart.

use serde::{Deserialize, Serialize};

use lrdfield::green::WalkModel;
use lrdfield::spectra::SpectralModel;

use crate::CliError;

macro_rules! params {
    (
        $(#[$meta:meta])*
        $args:ident => $params:ident {
            $( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, clap::Args, Serialize)]
        pub struct $args {
            $( $(#[doc = $doc])* #[arg(long, value_delimiter = ',')] pub $field: Option<$ty>, )*
        }

        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $params {
            $( pub $field: $ty, )*
        }

        impl Default for $params {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }
    };
}

params! {
    GreenEvalArgs => GreenEvalParams {
        /// Walk model: 3n or 4n
        model: String = "3n".into(),
        /// Autoregressive coefficient in [0, 1)
        a: f64 = 0.9,
        /// fft, series, or both (compares the two)
        backend: String = "both".into(),
        /// Window half width |t|, |s| <= half_width
        half_width: u64 = 32,
        /// Truncation tolerance of either backend
        tol: f64 = 1e-12,
    }
}

params! {
    GreenLimitArgs => GreenLimitParams {
        model: String = "3n".into(),
        t: f64 = 1.0,
        s: f64 = 1.0,
        z: f64 = 1.0,
        lambdas: Vec<f64> = vec![100.0, 400.0, 1600.0, 6400.0],
        /// Series truncation tolerance
        tol: f64 = 1e-15,
    }
}

params! {
    SpectraVarArgs => SpectraVarParams {
        /// type_i, type_ii, lavancier or white
        model: String = "type_ii".into(),
        h1: f64 = 0.5,
        h2: f64 = 0.5,
        c: f64 = 1.0,
        d1: f64 = 0.2,
        d2: f64 = 0.2,
        theta1: f64 = 1.0,
        theta2: f64 = 1.0,
        d: f64 = 0.2,
        ns: Vec<u64> = vec![256, 1024, 4096],
        gammas: Vec<f64> = vec![0.5, 1.0, 2.0],
    }
}

params! {
    SpectraKappaArgs => SpectraKappaParams {
        ds: Vec<f64> = vec![0.1, 0.25, 0.4],
    }
}

params! {
    SpectraDensityArgs => SpectraDensityParams {
        model: String = "type_i".into(),
        h1: f64 = 0.5,
        h2: f64 = 0.5,
        c: f64 = 1.0,
        d1: f64 = 0.2,
        d2: f64 = 0.2,
        theta1: f64 = 1.0,
        theta2: f64 = 1.0,
        d: f64 = 0.2,
        /// Cells per side of the frequency grid
        grid: u64 = 128,
    }
}

params! {
    LimitsJgammaArgs => LimitsJgammaParams {
        model: String = "3n".into(),
        alpha: f64 = 2.0,
        beta: f64 = 0.3,
        /// Aspect exponent; defaults to the balanced one of the model
        gamma: Option<f64> = None,
        ns: Vec<u64> = vec![16, 32, 64, 128],
        /// Relative tolerance of the limit functional
        tol: f64 = 1e-4,
    }
}

params! {
    LimitsHtableArgs => LimitsHtableParams {
        /// 3n, 4n, type_i, type_ii, lavancier or white
        model: String = "4n".into(),
        alpha: f64 = 2.0,
        beta: f64 = 0.4,
        h1: f64 = 0.5,
        h2: f64 = 0.5,
        c: f64 = 1.0,
        d1: f64 = 0.2,
        d2: f64 = 0.2,
        theta1: f64 = 1.0,
        theta2: f64 = 1.0,
        d: f64 = 0.2,
        gammas: Vec<f64> = vec![0.5, 1.0, 2.0],
    }
}

params! {
    CovAsymArgs => CovAsymParams {
        model: String = "4n".into(),
        beta: f64 = 0.3,
        t: f64 = 1.0,
        s: f64 = 1.0,
        lambdas: Vec<f64> = vec![8.0, 16.0, 32.0],
    }
}

params! {
    SimGaussArgs => SimGaussParams {
        model: String = "type_ii".into(),
        h1: f64 = 0.5,
        h2: f64 = 0.5,
        c: f64 = 1.0,
        d1: f64 = 0.2,
        d2: f64 = 0.2,
        theta1: f64 = 1.0,
        theta2: f64 = 1.0,
        d: f64 = 0.2,
        width: u64 = 256,
        height: u64 = 256,
        fields: u64 = 1,
        /// spectral or cholesky
        method: String = "spectral".into(),
        /// Frequency refinement of spectral synthesis
        refine: u64 = 2,
    }
}

params! {
    SimAggregateArgs => SimAggregateParams {
        model: String = "3n".into(),
        alpha: f64 = 2.0,
        beta: f64 = 0.3,
        components: u64 = 100,
        width: u64 = 64,
        height: u64 = 64,
        fields: u64 = 1,
        /// standard, gaussian, exact_stable or pareto_tail
        innovations: String = "standard".into(),
    }
}

params! {
    EstimateHurstArgs => EstimateHurstParams {
        /// Directory of saved fields; empty means <out>/fields
        input: String = String::new(),
        /// Only fields whose file name starts with this
        prefix: String = String::new(),
        gamma: f64 = 1.0,
        ns: Vec<u64> = vec![8, 16, 32, 64],
        /// Expected exponent checked in --check mode
        expect: Option<f64> = None,
        h_tol: f64 = 0.05,
    }
}

params! {
    ReportClassifyArgs => ReportClassifyParams {
        /// 3n, 4n, type_i, type_ii, lavancier or white
        model: String = "3n".into(),
        alpha: f64 = 2.0,
        beta: f64 = 0.3,
        h1: f64 = 0.5,
        h2: f64 = 0.5,
        c: f64 = 1.0,
        d1: f64 = 0.2,
        d2: f64 = 0.2,
        theta1: f64 = 1.0,
        theta2: f64 = 1.0,
        d: f64 = 0.2,
        gammas: Vec<f64> = vec![0.25, 0.5, 1.0, 2.0],
        /// Correlation or drift below this counts as zero
        probe_tol: f64 = 1e-3,
        /// Relative tolerance of the stable functionals
        tol: f64 = 1e-3,
        /// Simulated fields for exponent estimates; 0 skips them
        fields: u64 = 0,
        /// Side of the simulated square fields
        size: u64 = 256,
        refine: u64 = 2,
        components: u64 = 200,
        /// Width of the estimate interval in standard errors
        z: f64 = 3.0,
        /// Allowance for estimator bias added to the interval
        h_slack: f64 = 0.05,
        /// Verdict required in --check mode
        expect: Option<String> = None,
    }
}

/// A model named in a parameter section.
#[derive(Debug, Clone)]
pub enum Model {
    Walk { model: WalkModel, alpha: f64, beta: f64 },
    Spectral { id: String, model: SpectralModel },
}

impl Model {
    pub fn id(&self) -> String {
        match self {
            Model::Walk { model, .. } => model.tag().to_string(),
            Model::Spectral { id, .. } => id.clone(),
        }
    }
}

pub struct ModelFields<'a> {
    pub name: &'a str,
    pub alpha: f64,
    pub beta: f64,
    pub h1: f64,
    pub h2: f64,
    pub c: f64,
    pub d1: f64,
    pub d2: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub d: f64,
}

impl ModelFields<'_> {
    pub fn build(&self) -> Result<Model, CliError> {
        let spectral = |m: lrdfield::Result<SpectralModel>| {
            Ok(Model::Spectral { id: self.name.to_string(), model: m.map_err(CliError::Lib)? })
        };
        match self.name {
            "3n" | "4n" => Ok(Model::Walk { model: walk(self.name)?, alpha: self.alpha, beta: self.beta }),
            "type_i" => spectral(SpectralModel::type_i(self.h1, self.h2, self.c)),
            "type_ii" => spectral(SpectralModel::type_ii(self.d1, self.d2)),
            "lavancier" => spectral(SpectralModel::lavancier(self.theta1, self.theta2, self.d)),
            "white" => spectral(Ok(lrdfield::fields::white_noise_model())),
            other => Err(CliError::Config(format!("unknown model `{other}`"))),
        }
    }

    pub fn spectral(&self) -> Result<(String, SpectralModel), CliError> {
        match self.build()? {
            Model::Spectral { id, model } => Ok((id, model)),
            Model::Walk { .. } => Err(CliError::Config(format!("`{}` is not a spectral model", self.name))),
        }
    }
}

macro_rules! model_fields {
    ($p:expr, walk) => {
        ModelFields {
            name: &$p.model, alpha: $p.alpha, beta: $p.beta, h1: $p.h1, h2: $p.h2, c: $p.c,
            d1: $p.d1, d2: $p.d2, theta1: $p.theta1, theta2: $p.theta2, d: $p.d,
        }
    };
    ($p:expr) => {
        ModelFields {
            name: &$p.model, alpha: f64::NAN, beta: f64::NAN, h1: $p.h1, h2: $p.h2, c: $p.c,
            d1: $p.d1, d2: $p.d2, theta1: $p.theta1, theta2: $p.theta2, d: $p.d,
        }
    };
}
pub(crate) use model_fields;

pub fn walk(name: &str) -> Result<WalkModel, CliError> {
    name.parse().map_err(|_| CliError::Config(format!("unknown walk model `{name}`; use 3n or 4n")))
}
