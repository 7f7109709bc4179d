//! Operational Type I / Type II classification.
//!
//! For each aspect exponent on a finite ladder the scaling limit is probed in
//! the horizontal and vertical directions with a pair of adjacent unit squares.
//! The covariance-type functionals `c11, c22, c12` of the pair give a
//! correlation `c12 / sqrt(c11 c22)` (zero for independent increments) and a
//! drift `(c11 + c22 - 2 c12) / (c11 + c22)` (zero for invariant increments).
//! Dependence in both directions at exactly one ladder point and
//! semi-dependence elsewhere is Type I; dependence everywhere is Type II.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::green::WalkModel;
use crate::par::Exec;
use crate::spectra::{self, CovKernel, Rectangle, Regime, SpectralModel};
use crate::stable_limits::{exponent_law, kernel_overlap, FunctionalOptions, StableLimitSpec};

/// Behaviour of rectangular increments along one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Increments {
    Independent,
    Invariant,
    Dependent,
    /// The probe could not be evaluated.
    Unavailable,
}

/// Probe of one direction: the functionals of a pair of adjacent unit squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionProbe {
    pub correlation: f64,
    pub drift: f64,
    pub increments: Increments,
}

impl DirectionProbe {
    /// Classify from the functionals of the first square, the second, and the pair.
    pub fn from_functionals(c11: f64, c22: f64, c12: f64, tol: f64) -> Self {
        let correlation = c12 / (c11 * c22).sqrt();
        let drift = (c11 + c22 - 2.0 * c12) / (c11 + c22);
        let increments = if !(correlation.is_finite() && drift.is_finite()) {
            Increments::Unavailable
        } else if correlation.abs() <= tol {
            Increments::Independent
        } else if drift.abs() <= tol {
            Increments::Invariant
        } else {
            Increments::Dependent
        };
        Self { correlation, drift, increments }
    }

    fn unavailable() -> Self {
        Self { correlation: f64::NAN, drift: f64::NAN, increments: Increments::Unavailable }
    }
}

/// Increment structure of the limit field at one aspect exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Dependent,
    SemiDependent,
    Independent,
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceProbe {
    pub gamma: f64,
    pub horizontal: DirectionProbe,
    pub vertical: DirectionProbe,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl DependenceProbe {
    pub fn structure(&self) -> Structure {
        use Increments::*;
        match (self.horizontal.increments, self.vertical.increments) {
            (Unavailable, _) | (_, Unavailable) => Structure::Unresolved,
            (Dependent, Dependent) => Structure::Dependent,
            (Dependent, _) | (_, Dependent) => Structure::SemiDependent,
            (Independent, Independent) => Structure::Independent,
            _ => Structure::Unresolved,
        }
    }
}

/// Relative threshold below which a correlation or drift counts as zero.
pub const DEFAULT_PROBE_TOL: f64 = 1e-3;

fn unit_pairs() -> [(Rectangle, Rectangle); 2] {
    let k = Rectangle::unit_at(0.0, 0.0);
    [(k, k.shifted(1.0, 0.0)), (k, k.shifted(0.0, 1.0))]
}

/// Probe the stable limit of the aggregated 3N / 4N field.
pub fn probe_walk(
    model: WalkModel,
    alpha: f64,
    beta: f64,
    gamma: f64,
    tol: f64,
    opts: FunctionalOptions,
) -> Result<DependenceProbe> {
    let spec = StableLimitSpec::standard(model, alpha, beta, gamma)?;
    let mut probes = [DirectionProbe::unavailable(); 2];
    let mut note = None;
    for (slot, (k, k2)) in probes.iter_mut().zip(unit_pairs()) {
        let pair = (|| {
            Ok::<_, crate::Error>((
                kernel_overlap(&spec, &k, &k, opts)?,
                kernel_overlap(&spec, &k2, &k2, opts)?,
                kernel_overlap(&spec, &k, &k2, opts)?,
            ))
        })();
        match pair {
            Ok((c11, c22, c12)) => *slot = DirectionProbe::from_functionals(c11, c22, c12, tol),
            Err(e) => note = Some(e.to_string()),
        }
    }
    Ok(DependenceProbe { gamma, horizontal: probes[0], vertical: probes[1], note })
}

/// Probe the Gaussian scaling limit of a spectral model.
///
/// Limits of the form `x Z(y)` have no planar spectral kernel. They are
/// invariant along the linear coordinate, and adjacent increments of the
/// fractional process `Z` have correlation `2^p - 1`.
pub fn probe_gaussian(model: &SpectralModel, gamma: f64, tol: f64, exec: Exec) -> Result<DependenceProbe> {
    if let Some((linear_in_first, p)) = spectra::line_limit(model, gamma)? {
        let invariant = DirectionProbe { correlation: 1.0, drift: 0.0, increments: Increments::Invariant };
        let rho = p.exp2() - 1.0;
        let other = DirectionProbe::from_functionals(1.0, 1.0, rho, tol);
        let (horizontal, vertical) = if linear_in_first { (invariant, other) } else { (other, invariant) };
        return Ok(DependenceProbe {
            gamma,
            horizontal,
            vertical,
            note: Some("limit driven by one-dimensional noise".into()),
        });
    }
    let kernel = CovKernel::Limit { model: model.clone(), gamma };
    let mut probes = [DirectionProbe::unavailable(); 2];
    for (slot, (k, k2)) in probes.iter_mut().zip(unit_pairs()) {
        let c11 = spectra::increment_cov_functional(&kernel, &k, &k, exec)?.value;
        let c22 = spectra::increment_cov_functional(&kernel, &k2, &k2, exec)?.value;
        let c12 = spectra::increment_cov_functional(&kernel, &k, &k2, exec)?.value;
        *slot = DirectionProbe::from_functionals(c11, c22, c12, tol);
    }
    Ok(DependenceProbe { gamma, horizontal: probes[0], vertical: probes[1], note: None })
}

/// Theory exponent at one ladder point, with an optional field estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HurstPoint {
    pub gamma: f64,
    #[serde(rename = "H_theory")]
    pub theory: f64,
    pub regime: Regime,
    #[serde(rename = "H_hat")]
    pub estimate: Option<f64>,
    pub stderr: Option<f64>,
    /// Whether the estimate's interval covers the theory value.
    pub consistent: bool,
}

impl HurstPoint {
    pub fn theory_only(law: spectra::ScalingLaw) -> Self {
        Self { gamma: law.gamma, theory: law.h, regime: law.regime, estimate: None, stderr: None, consistent: true }
    }

    /// Covered when `|H_hat - H| <= z stderr + slack`; the slack absorbs the
    /// finite-size bias of the estimator.
    pub fn with_estimate(law: spectra::ScalingLaw, h_hat: f64, stderr: f64, z: f64, slack: f64) -> Self {
        let consistent = (h_hat - law.h).abs() <= z * stderr + slack;
        Self { estimate: Some(h_hat), stderr: Some(stderr), consistent, ..Self::theory_only(law) }
    }
}

pub fn walk_theory(model: WalkModel, alpha: f64, beta: f64, gamma: f64) -> Result<spectra::ScalingLaw> {
    exponent_law(model, alpha, beta, gamma)
}

pub fn gaussian_theory(model: &SpectralModel, gamma: f64) -> Result<spectra::ScalingLaw> {
    spectra::H_of_gamma(model, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "TypeI_isotropic")]
    TypeIIsotropic,
    #[serde(rename = "TypeI_anisotropic")]
    TypeIAnisotropic,
    #[serde(rename = "TypeII")]
    TypeII,
    Undetermined,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::TypeIIsotropic => "TypeI_isotropic",
            Verdict::TypeIAnisotropic => "TypeI_anisotropic",
            Verdict::TypeII => "TypeII",
            Verdict::Undetermined => "Undetermined",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub model: String,
    pub gammas: Vec<f64>,
    pub hurst: Vec<HurstPoint>,
    pub probes: Vec<DependenceProbe>,
    pub gamma0: Option<f64>,
    /// Ladder interval attributed to `gamma0`: geometric midpoints to its neighbours.
    pub gamma0_interval: Option<(f64, f64)>,
    pub verdict: Verdict,
    pub reason: String,
}

/// Verdict from probes and exponent checks on a common ladder.
pub fn classify(model: impl Into<String>, probes: Vec<DependenceProbe>, hurst: Vec<HurstPoint>) -> ClassificationReport {
    let mut probes = probes;
    probes.sort_by(|a, b| a.gamma.total_cmp(&b.gamma));
    let gammas: Vec<f64> = probes.iter().map(|p| p.gamma).collect();
    let mut report = ClassificationReport {
        model: model.into(),
        gammas: gammas.clone(),
        hurst,
        probes,
        gamma0: None,
        gamma0_interval: None,
        verdict: Verdict::Undetermined,
        reason: String::new(),
    };
    if gammas.len() < 2 {
        report.reason = "a ladder of at least two aspect exponents is needed".into();
        return report;
    }
    if let Some(bad) = report.hurst.iter().find(|h| !h.consistent) {
        report.reason = format!(
            "estimate at gamma = {} misses the theory value {}",
            bad.gamma, bad.theory
        );
        return report;
    }
    let structures: Vec<Structure> = report.probes.iter().map(|p| p.structure()).collect();
    if let Some(i) = structures.iter().position(|s| matches!(s, Structure::Unresolved | Structure::Independent)) {
        report.reason = format!("probe at gamma = {} is {:?}", gammas[i], structures[i]);
        return report;
    }
    let dependent: Vec<usize> = (0..gammas.len()).filter(|&i| structures[i] == Structure::Dependent).collect();
    match dependent.len() {
        n if n == gammas.len() => {
            report.verdict = Verdict::TypeII;
            report.reason = "dependent rectangular increments at every probed gamma".into();
        }
        1 => {
            let i = dependent[0];
            let lo = if i > 0 { (gammas[i - 1] * gammas[i]).sqrt() } else { 0.0 };
            let hi = if i + 1 < gammas.len() { (gammas[i] * gammas[i + 1]).sqrt() } else { f64::INFINITY };
            report.gamma0 = Some(gammas[i]);
            report.gamma0_interval = Some((lo, hi));
            report.verdict = if lo < 1.0 && 1.0 < hi { Verdict::TypeIIsotropic } else { Verdict::TypeIAnisotropic };
            report.reason = format!("dependent only at gamma = {}, semi-dependent elsewhere", gammas[i]);
        }
        0 => report.reason = "no probed gamma has dependent increments".into(),
        n => report.reason = format!("{n} of {} probed gammas are dependent", gammas.len()),
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probe(gamma: f64, h: Increments, v: Increments) -> DependenceProbe {
        let d = |increments| DirectionProbe { correlation: 0.5, drift: 0.5, increments };
        DependenceProbe { gamma, horizontal: d(h), vertical: d(v), note: None }
    }

    use Increments::*;

    #[test]
    fn direction_probe_thresholds() {
        assert_eq!(DirectionProbe::from_functionals(1.0, 1.0, 0.0, 1e-3).increments, Independent);
        assert_eq!(DirectionProbe::from_functionals(1.0, 1.0, 1.0, 1e-3).increments, Invariant);
        assert_eq!(DirectionProbe::from_functionals(1.0, 1.0, 0.3, 1e-3).increments, Dependent);
        assert_eq!(DirectionProbe::from_functionals(0.0, 0.0, 0.0, 1e-3).increments, Unavailable);
    }

    #[test]
    fn single_dependent_point_is_type_one() {
        let probes = vec![
            probe(0.25, Dependent, Invariant),
            probe(0.5, Dependent, Dependent),
            probe(1.0, Dependent, Independent),
            probe(2.0, Dependent, Independent),
        ];
        let r = classify("m", probes, vec![]);
        assert_eq!(r.verdict, Verdict::TypeIAnisotropic);
        assert_eq!(r.gamma0, Some(0.5));

        let probes = vec![probe(0.5, Independent, Dependent), probe(1.0, Dependent, Dependent), probe(2.0, Dependent, Independent)];
        assert_eq!(classify("m", probes, vec![]).verdict, Verdict::TypeIIsotropic);
    }

    #[test]
    fn all_dependent_is_type_two() {
        let probes = vec![probe(0.5, Dependent, Dependent), probe(2.0, Dependent, Dependent)];
        assert_eq!(classify("m", probes, vec![]).verdict, Verdict::TypeII);
    }

    #[test]
    fn inconsistent_inputs_are_undetermined() {
        let two_dependent = vec![
            probe(0.5, Dependent, Dependent),
            probe(1.0, Dependent, Dependent),
            probe(2.0, Dependent, Independent),
        ];
        assert_eq!(classify("m", two_dependent, vec![]).verdict, Verdict::Undetermined);

        let unavailable = vec![probe(0.5, Dependent, Dependent), probe(1.0, Unavailable, Dependent)];
        assert_eq!(classify("m", unavailable, vec![]).verdict, Verdict::Undetermined);

        let law = spectra::ScalingLaw { gamma: 1.0, h: 1.4, regime: Regime::Product, gamma0: None };
        let off = HurstPoint::with_estimate(law, 1.6, 0.01, 3.0, 0.05);
        assert!(!off.consistent);
        let probes = vec![probe(0.5, Dependent, Dependent), probe(1.0, Dependent, Dependent)];
        assert_eq!(classify("m", probes, vec![off]).verdict, Verdict::Undetermined);
    }

    #[test]
    fn walk_probes_find_the_balanced_exponent() {
        let opts = FunctionalOptions { tol: 1e-3, exec: Exec::default() };
        // 4N strips above the balanced exponent need beta > (alpha - 1)/2
        for (model, beta, gamma0) in [(WalkModel::ThreeN, 0.3, 0.5), (WalkModel::FourN, 0.6, 1.0)] {
            let probes: Vec<_> = [0.25, 0.5, 1.0, 2.0]
                .iter()
                .map(|&g| probe_walk(model, 2.0, beta, g, DEFAULT_PROBE_TOL, opts).unwrap())
                .collect();
            let r = classify(model.tag(), probes, vec![]);
            assert_eq!(r.gamma0, Some(gamma0), "{r:#?}");
        }
    }

    #[test]
    fn line_limits_are_invariant_along_the_linear_axis() {
        let model = SpectralModel::type_i(1.2, 1.5, 1.0).unwrap();
        // gamma0 = 0.8; above it the limit is linear in the first coordinate
        let p = probe_gaussian(&model, 2.0, DEFAULT_PROBE_TOL, Exec::default()).unwrap();
        assert_eq!(p.horizontal.increments, Invariant);
        assert_eq!(p.vertical.increments, Dependent);
    }
}
