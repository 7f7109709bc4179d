//! Gaussian fields with Type I, Type II and line-degenerate spectral densities:
//! densities, their scaling limits, Fejér-kernel variances of rectangular sums,
//! second-order structure of the limit fields, and increment covariances.
//!
//! Convention: `E Y(0,0) Y(t,s) = int_{[-pi,pi]^2} e^{i(tx+sy)} f(x,y) dx dy`.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::par::Exec;
use crate::quad::{tanh_sinh_rule, GaussLegendre};
use crate::specfun::{beta_fn, gamma as gamma_fn};

/// Parametric family of a spectral density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SpectralKind {
    /// `g / (|x|^2 + c |y|^{2 h2/h1})^{h1/2}`.
    TypeI { h1: f64, h2: f64, c: f64 },
    /// `g / (|x|^{2 d1} |y|^{2 d2})`.
    TypeII { d1: f64, d2: f64 },
    /// `g / |theta1 x + theta2 y|^{2 d}`.
    Lavancier { theta1: f64, theta2: f64, d: f64 },
}

/// Bounded positive multiplier of the density, normalized to 1 at the origin.
#[derive(Clone, Default)]
pub struct GFactor(Option<Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>>);

impl GFactor {
    pub fn new(f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self(Some(Arc::new(f)))
    }

    pub fn is_constant(&self) -> bool {
        self.0.is_none()
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.0.as_ref().map_or(1.0, |g| g(x, y))
    }
}

impl fmt::Debug for GFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.0.is_some() { "GFactor(custom)" } else { "GFactor(1)" })
    }
}

/// A spectral density on `[-pi, pi]^2`.
#[derive(Debug, Clone)]
pub struct SpectralModel {
    pub kind: SpectralKind,
    pub g: GFactor,
}

impl SpectralModel {
    pub fn type_i(h1: f64, h2: f64, c: f64) -> Result<Self> {
        if !(h1 > 0.0 && h1 <= h2 && h2 < 2.0) {
            return domain(format!("Type I needs 0 < h1 <= h2 < 2, got ({h1}, {h2})"));
        }
        if !(c > 0.0 && c.is_finite()) {
            return domain(format!("Type I scale c must be positive, got {c}"));
        }
        Ok(Self { kind: SpectralKind::TypeI { h1, h2, c }, g: GFactor::default() })
    }

    /// Exponents in `[0, 1/2)`; zero gives a factor without singularity.
    pub fn type_ii(d1: f64, d2: f64) -> Result<Self> {
        for d in [d1, d2] {
            if !(0.0..0.5).contains(&d) {
                return domain(format!("Type II memory parameter {d} outside [0, 1/2)"));
            }
        }
        Ok(Self { kind: SpectralKind::TypeII { d1, d2 }, g: GFactor::default() })
    }

    pub fn lavancier(theta1: f64, theta2: f64, d: f64) -> Result<Self> {
        if !(d > 0.0 && d < 0.5) {
            return domain(format!("memory parameter {d} outside (0, 1/2)"));
        }
        if theta1 == 0.0 && theta2 == 0.0 || !theta1.is_finite() || !theta2.is_finite() {
            return domain("line direction (theta1, theta2) must be finite and nonzero");
        }
        Ok(Self { kind: SpectralKind::Lavancier { theta1, theta2, d }, g: GFactor::default() })
    }

    pub fn with_g(mut self, g: GFactor) -> Self {
        self.g = g;
        self
    }

    /// Distinguished aspect exponent, if the family has one.
    pub fn gamma0(&self) -> Option<f64> {
        match self.kind {
            SpectralKind::TypeI { h1, h2, .. } => Some(h1 / h2),
            SpectralKind::TypeII { .. } => None,
            SpectralKind::Lavancier { .. } => Some(1.0),
        }
    }

    /// Density without the multiplier; infinite on the singular set.
    #[inline]
    fn shape(&self, x: f64, y: f64) -> f64 {
        match self.kind {
            SpectralKind::TypeI { h1, h2, c } => (x * x + c * y.abs().powf(2.0 * h2 / h1)).powf(-0.5 * h1),
            SpectralKind::TypeII { d1, d2 } => pow_neg(x, 2.0 * d1) * pow_neg(y, 2.0 * d2),
            SpectralKind::Lavancier { theta1, theta2, d } => pow_neg(theta1 * x + theta2 * y, 2.0 * d),
        }
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: f64, y: f64) -> f64 {
        self.shape(x, y) * self.g.eval(x, y)
    }
}

/// `|x|^{-p}`, with `|0|^0 = 1`.
#[inline]
fn pow_neg(x: f64, p: f64) -> f64 {
    if p == 0.0 { 1.0 } else { x.abs().powf(-p) }
}

/// Spectral density at `(x, y)` in `[-pi, pi]^2`.
pub fn density(model: &SpectralModel, x: f64, y: f64) -> Result<f64> {
    if !(x.abs() <= PI && y.abs() <= PI) {
        return domain(format!("frequency ({x}, {y}) outside [-pi, pi]^2"));
    }
    let v = model.eval_unchecked(x, y);
    if !v.is_finite() {
        return domain(format!("({x}, {y}) lies on the singular set of the density"));
    }
    Ok(v)
}

/// Limit of the rescaled density seen by partial sums over `n x n^gamma` boxes.
///
/// Fails where the limit field is driven by one-dimensional noise (no planar
/// spectral limit), at the origin, and for boundary exponents equal to 1.
pub fn limit_function(model: &SpectralModel, x: f64, y: f64, gamma: f64) -> Result<f64> {
    if x == 0.0 && y == 0.0 {
        return domain("the limit function is singular at the origin");
    }
    if !(gamma > 0.0) {
        return domain(format!("aspect exponent {gamma} must be positive"));
    }
    match limit_spectrum(model, gamma)? {
        LimitSpectrum::Planar(k) => Ok(k.eval(x, y)),
        LimitSpectrum::Line { .. } => {
            domain("in this regime the limit field is driven by one-dimensional noise; no planar limit function")
        }
    }
}

/// Planar limit spectra either factorize or keep their full two-dimensional form.
#[derive(Debug, Clone, Copy, PartialEq)]
enum PlanarLimit {
    /// `scale |u|^{-p} |v|^{-q}`.
    Separable { scale: f64, p: f64, q: f64 },
    TypeI { h1: f64, h2: f64, c: f64 },
    Line { theta1: f64, theta2: f64, d: f64 },
}

impl PlanarLimit {
    fn eval(&self, u: f64, v: f64) -> f64 {
        match *self {
            PlanarLimit::Separable { scale, p, q } => scale * pow_neg(u, p) * pow_neg(v, q),
            PlanarLimit::TypeI { h1, h2, c } => (u * u + c * v.abs().powf(2.0 * h2 / h1)).powf(-0.5 * h1),
            PlanarLimit::Line { theta1, theta2, d } => pow_neg(theta1 * u + theta2 * v, 2.0 * d),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LimitSpectrum {
    Planar(PlanarLimit),
    /// `E V(x, y)^2 = scale_sq x^2 int |1 - e^{ivy}|^2 |v|^{-2-p} dv` when
    /// `linear_in_first`, and the same with the axes swapped otherwise.
    Line { scale_sq: f64, p: f64, linear_in_first: bool },
}

fn limit_spectrum(model: &SpectralModel, gamma: f64) -> Result<LimitSpectrum> {
    let g0 = model.g.eval(0.0, 0.0);
    match model.kind {
        SpectralKind::TypeI { h1, h2, c } => {
            let g0_ratio = gamma / (h1 / h2);
            if (g0_ratio - 1.0).abs() <= 1e-12 {
                return Ok(LimitSpectrum::Planar(PlanarLimit::TypeI { h1, h2, c }));
            }
            check_type_i_boundary(h1, h2)?;
            if gamma > h1 / h2 {
                if h1 < 1.0 {
                    Ok(LimitSpectrum::Planar(PlanarLimit::Separable { scale: g0, p: h1, q: 0.0 }))
                } else {
                    Ok(LimitSpectrum::Line {
                        scale_sq: g0 * rho1_sq(h1) * c.powf(0.5 * (1.0 - h1)),
                        p: (h1 * h2 - h2) / h1,
                        linear_in_first: true,
                    })
                }
            } else if h2 < 1.0 {
                Ok(LimitSpectrum::Planar(PlanarLimit::Separable { scale: g0, p: 0.0, q: h2 }))
            } else {
                Ok(LimitSpectrum::Line {
                    scale_sq: g0 * rho2_sq(h1, h2) * c.powf(-0.5 * h1 / h2),
                    p: (h1 * h2 - h1) / h2,
                    linear_in_first: false,
                })
            }
        }
        SpectralKind::TypeII { d1, d2 } => {
            Ok(LimitSpectrum::Planar(PlanarLimit::Separable { scale: g0, p: 2.0 * d1, q: 2.0 * d2 }))
        }
        SpectralKind::Lavancier { theta1, theta2, d } => {
            let horizontal = |t: f64| PlanarLimit::Separable { scale: g0 * t.abs().powf(-2.0 * d), p: 2.0 * d, q: 0.0 };
            let vertical = |t: f64| PlanarLimit::Separable { scale: g0 * t.abs().powf(-2.0 * d), p: 0.0, q: 2.0 * d };
            let lim = if theta2 == 0.0 {
                horizontal(theta1)
            } else if theta1 == 0.0 {
                vertical(theta2)
            } else if (gamma - 1.0).abs() <= 1e-12 {
                PlanarLimit::Line { theta1, theta2, d }
            } else if gamma > 1.0 {
                horizontal(theta1)
            } else {
                vertical(theta2)
            };
            Ok(LimitSpectrum::Planar(lim))
        }
    }
}

/// For scaling limits of the form `x Z(y)` (or `y Z(x)`): whether the limit is
/// linear in the first coordinate and the exponent `p` with
/// `E (Z(y) - Z(0))^2` proportional to `y^{1 + p}`. `None` for planar limits.
pub fn line_limit(model: &SpectralModel, gamma: f64) -> Result<Option<(bool, f64)>> {
    Ok(match limit_spectrum(model, gamma)? {
        LimitSpectrum::Line { p, linear_in_first, .. } => Some((linear_in_first, p)),
        LimitSpectrum::Planar(_) => None,
    })
}

fn check_type_i_boundary(h1: f64, h2: f64) -> Result<()> {
    if h1 == 1.0 || h2 == 1.0 {
        return domain(format!(
            "Type I exponents ({h1}, {h2}): the value 1 is a boundary case with no scaling law"
        ));
    }
    Ok(())
}

/// `int_R (1 + |w|^{2 h2/h1})^{-h1/2} dw`.
fn rho2_sq(h1: f64, h2: f64) -> f64 {
    h1 / h2 * beta_fn(0.5 * h1 / h2, 0.5 * (h1 * h2 - h1) / h2)
}

/// `int_R (1 + u^2)^{-h1/2} du`.
fn rho1_sq(h1: f64) -> f64 {
    beta_fn(0.5, 0.5 * (h1 - 1.0))
}

/// Fejér kernel `|sum_{t=1}^n e^{itu}|^2`, exact at multiples of `2 pi`.
pub fn fejer_sq(n: u64, u: f64) -> f64 {
    let r = u - 2.0 * PI * (u / (2.0 * PI)).round();
    let den = (0.5 * r).sin();
    if den == 0.0 {
        return (n as f64) * (n as f64);
    }
    let num = (0.5 * n as f64 * r).sin();
    (num / den) * (num / den)
}

/// Number of oscillation cells resolved exactly before switching to the
/// period-averaged weight.
const NEAR_CELLS: usize = 200;
const CELL_NODES: usize = 8;
const FAR_NODES: usize = 16;
const SINGULAR_STEP: f64 = 1.0 / 8.0;
/// Nodes closer to a singular axis are dropped; squares of larger values stay normal.
const SMALLEST_NODE: f64 = 1e-150;

/// Nodes and (complex) weights of a rule on the line, ready for tensor products.
#[derive(Debug, Clone, Default)]
pub(crate) struct LineRule {
    pub nodes: Vec<f64>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl LineRule {
    fn push(&mut self, x: f64, re: f64, im: f64) {
        self.nodes.push(x);
        self.re.push(re);
        self.im.push(im);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Mirror a half-line rule onto the whole line with conjugate weights.
    fn mirrored(half: LineRule) -> LineRule {
        let mut out = LineRule::default();
        for i in (0..half.len()).rev() {
            out.push(-half.nodes[i], half.re[i], -half.im[i]);
        }
        for i in 0..half.len() {
            out.push(half.nodes[i], half.re[i], half.im[i]);
        }
        out
    }

    /// `sum_i w_i phi(x_i)` (real part of the weights only).
    pub fn apply(&self, phi: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.re).map(|(&x, &w)| w * phi(x)).sum()
    }
}

/// Resolution knobs shared by the oscillatory rules.
#[derive(Debug, Clone, Copy)]
struct RuleShape {
    near_cells: usize,
    cell_nodes: usize,
    far_nodes: usize,
    singular_step: f64,
}

const FINE: RuleShape =
    RuleShape { near_cells: NEAR_CELLS, cell_nodes: CELL_NODES, far_nodes: FAR_NODES, singular_step: SINGULAR_STEP };
const COARSE: RuleShape = RuleShape { near_cells: NEAR_CELLS / 2, cell_nodes: 6, far_nodes: 10, singular_step: 0.25 };

/// Rule for `int_{-pi}^{pi} D_n^2(x) phi(x) dx` with `phi` possibly singular at 0.
pub(crate) fn fejer_rule(n: u64) -> LineRule {
    fejer_rule_shaped(n, FINE)
}

fn fejer_rule_shaped(n: u64, shape: RuleShape) -> LineRule {
    let period = 2.0 * PI / n as f64;
    let mut half = LineRule::default();
    let first_end = period.min(PI);
    for (x, w) in tanh_sinh_rule(0.0, first_end, shape.singular_step, SMALLEST_NODE) {
        half.push(x, w * fejer_sq(n, x), 0.0);
    }
    let gl = GaussLegendre::new(shape.cell_nodes);
    let mut k = 1;
    while (k as f64) * period < PI && k < shape.near_cells {
        let a = k as f64 * period;
        let b = ((k + 1) as f64 * period).min(PI);
        for (x, w) in gl.mapped(a, b) {
            half.push(x, w * fejer_sq(n, x), 0.0);
        }
        k += 1;
    }
    let mut a = k as f64 * period;
    if a < PI {
        // sin^2(nx/2) averages to 1/2 over each cell; the cell edges sit on its zeros
        let glf = GaussLegendre::new(shape.far_nodes);
        while a < PI {
            let b = (2.0 * a).min(PI);
            for (x, w) in glf.mapped(a, b) {
                let s = (0.5 * x).sin();
                half.push(x, w * 0.5 / (s * s), 0.0);
            }
            a = b;
        }
    }
    LineRule::mirrored(half)
}

/// Frequencies of `A conj(A')` for two intervals, with `A(u) = (e^{iux} - e^{iu xi})/(iu)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct IntervalPair {
    /// Midpoint difference.
    delta: f64,
    width: f64,
    width2: f64,
}

impl IntervalPair {
    pub fn new(a: (f64, f64), b: (f64, f64)) -> Self {
        Self { delta: 0.5 * (a.0 + a.1) - 0.5 * (b.0 + b.1), width: a.1 - a.0, width2: b.1 - b.0 }
    }

    pub fn same(width: f64) -> Self {
        Self { delta: 0.0, width, width2: width }
    }

    fn weight(&self, u: f64) -> (f64, f64) {
        let amp = self.width * self.width2 * sinc(0.5 * u * self.width) * sinc(0.5 * u * self.width2);
        let (s, c) = (u * self.delta).sin_cos();
        (amp * c, amp * s)
    }

    /// `(frequency, coefficient)` of `u^2 A conj(A')`.
    fn terms(&self) -> [(f64, f64); 4] {
        let hd = 0.5 * (self.width - self.width2);
        let hs = 0.5 * (self.width + self.width2);
        [(self.delta + hd, 1.0), (self.delta - hd, 1.0), (self.delta + hs, -1.0), (self.delta - hs, -1.0)]
    }
}

#[inline]
fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// Rule for `int_R A(u) conj(A'(u)) phi(u) du` for the interval pair, with
/// `phi` possibly singular at 0 and decaying or slowly growing at infinity.
fn interval_rule_shaped(pair: IntervalPair, shape: RuleShape) -> Result<LineRule> {
    let terms = pair.terms();
    let w_max = terms.iter().map(|t| t.0.abs()).fold(0.0, f64::max);
    let scale = w_max.max(f64::MIN_POSITIVE);
    let zero_tol = 1e-12 * scale;
    let w_min = terms.iter().map(|t| t.0.abs()).filter(|&w| w > zero_tol).fold(f64::INFINITY, f64::min);
    let c0: f64 = terms.iter().filter(|t| t.0.abs() <= zero_tol).map(|t| t.1).sum();
    let period = 2.0 * PI / scale;
    let cells = ((shape.near_cells as f64) * w_max / w_min).ceil();
    if cells > 400_000.0 {
        return Err(Error::Numerical(format!(
            "rectangle geometry needs {cells} oscillation cells (frequency ratio {:.3e})",
            w_max / w_min
        )));
    }
    let cells = cells as usize;
    let mut half = LineRule::default();
    for (x, w) in tanh_sinh_rule(0.0, period, shape.singular_step, SMALLEST_NODE) {
        let (re, im) = pair.weight(x);
        half.push(x, w * re, w * im);
    }
    let gl = GaussLegendre::new(shape.cell_nodes);
    for k in 1..cells {
        for (x, w) in gl.mapped(k as f64 * period, (k + 1) as f64 * period) {
            let (re, im) = pair.weight(x);
            half.push(x, w * re, w * im);
        }
    }
    if c0 != 0.0 {
        // beyond the resolved cells only zero-frequency terms survive averaging:
        // c0 int_U^inf phi(u)/u^2 du = (c0/U) int_0^1 phi(U/t) dt
        let edge = cells as f64 * period;
        for (t, w) in tanh_sinh_rule(0.0, 1.0, shape.singular_step, SMALLEST_NODE) {
            half.push(edge / t, c0 / edge * w, 0.0);
        }
    }
    Ok(LineRule::mirrored(half))
}

/// `sum_{i,j} wx_i wy_j f(x_i, y_j)` as a complex number, rows reduced in order.
pub(crate) fn tensor_sum(
    rx: &LineRule,
    ry: &LineRule,
    f: impl Fn(f64, f64) -> f64 + Sync + Send,
    exec: Exec,
) -> (f64, f64) {
    let rows = exec.map(rx.len(), |i| {
        let x = rx.nodes[i];
        let (mut sr, mut si) = (0.0, 0.0);
        for j in 0..ry.len() {
            let v = f(x, ry.nodes[j]);
            sr += ry.re[j] * v;
            si += ry.im[j] * v;
        }
        (rx.re[i] * sr - rx.im[i] * si, rx.re[i] * si + rx.im[i] * sr)
    });
    rows.iter().fold((0.0, 0.0), |acc, r| (acc.0 + r.0, acc.1 + r.1))
}

/// Relative discrepancy between fine and coarse rules above which a
/// quadrature is reported as unconverged.
const CONVERGENCE_GATE: f64 = 1e-2;

/// `E S_n(gamma)^2 = int D_n^2(x) D_m^2(y) f(x, y) dx dy`, `m = floor(n^gamma)`.
pub fn variance_partial_sum(model: &SpectralModel, n: u64, gamma: f64, exec: Exec) -> Result<f64> {
    if n == 0 {
        return domain("box size n must be positive");
    }
    if !(gamma > 0.0) {
        return domain(format!("aspect exponent {gamma} must be positive"));
    }
    let m = box_height(n, gamma);
    if m == 0 {
        return domain(format!("n^gamma = {}^{gamma} rounds down to an empty box", n));
    }
    let run = |shape: RuleShape| -> f64 {
        let rx = fejer_rule_shaped(n, shape);
        let ry = fejer_rule_shaped(m, shape);
        match model.kind {
            SpectralKind::TypeII { d1, d2 } if model.g.is_constant() => {
                rx.apply(|x| pow_neg(x, 2.0 * d1)) * ry.apply(|y| pow_neg(y, 2.0 * d2))
            }
            _ => tensor_sum(&rx, &ry, |x, y| model.eval_unchecked(x, y), exec).0,
        }
    };
    let fine = run(FINE);
    let coarse = run(COARSE);
    let rel = ((fine - coarse) / fine).abs();
    if !fine.is_finite() || rel > CONVERGENCE_GATE {
        return Err(Error::Numerical(format!(
            "Fejér quadrature unconverged for n={n}, gamma={gamma}: fine {fine:e}, coarse {coarse:e}, rel diff {rel:.2e}"
        )));
    }
    Ok(fine)
}

/// `floor(n^gamma)`, guarded against `n^gamma` landing a hair below an integer.
pub fn box_height(n: u64, gamma: f64) -> u64 {
    let v = (n as f64).powf(gamma);
    let r = v.round();
    if (v - r).abs() <= 1e-9 * r.max(1.0) { r as u64 } else { v.floor() as u64 }
}

/// One row of a variance ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: u64,
    pub gamma: f64,
    pub raw_variance: f64,
    pub normalized: f64,
}

pub fn write_variance_csv<W: Write>(rows: &[VarianceRow], mut out: W) -> Result<()> {
    writeln!(out, "n,gamma,raw_variance,normalized")?;
    for r in rows {
        writeln!(out, "{},{},{:.17e},{:.17e}", r.n, r.gamma, r.raw_variance, r.normalized)?;
    }
    Ok(())
}

/// `int_R |1 - e^{ix}|^2 |x|^{-2-2d} dx = 2 Gamma(1-2d) sin(pi d) / (d (1+2d))`.
pub fn kappa_sq(d: f64) -> Result<f64> {
    if !(d > 0.0 && d < 0.5) {
        return domain(format!("kappa^2 needs d in (0, 1/2), got {d}"));
    }
    Ok(kappa_sq_ext(d))
}

/// Same integral for `d` in `(-1/2, 1/2)`, including the `2 pi` limit at 0.
fn kappa_sq_ext(d: f64) -> f64 {
    if d == 0.0 {
        return 2.0 * PI;
    }
    2.0 * gamma_fn(1.0 - 2.0 * d) * (PI * d).sin() / (d * (1.0 + 2.0 * d))
}

/// The defining integral of `kappa^2(d)` by quadrature: tanh-sinh over the
/// first period, Gauss-Legendre over the next periods, asymptotic tail.
pub fn kappa_sq_quadrature(d: f64) -> Result<f64> {
    if !(d > 0.0 && d < 0.5) {
        return domain(format!("kappa^2 needs d in (0, 1/2), got {d}"));
    }
    let s = 2.0 + 2.0 * d;
    let f = |x: f64| 4.0 * (0.5 * x).sin().powi(2) * x.powf(-s);
    let period = 2.0 * PI;
    let head = crate::quad::tanh_sinh(f, 0.0, period, crate::quad::Tol::rel(1e-15));
    let gl = GaussLegendre::new(24);
    let periods = 4000;
    let mut body = 0.0;
    for k in 1..periods {
        body += gl.integrate(f, k as f64 * period, (k + 1) as f64 * period);
    }
    // int_X^inf 2(1 - cos x) x^{-s} dx with X a multiple of 2 pi
    let x0 = periods as f64 * period;
    let mut cos_tail = 0.0;
    let mut coef = s;
    let mut pow = x0.powf(-s - 1.0);
    for j in 0..6 {
        cos_tail += if j % 2 == 0 { coef * pow } else { -coef * pow };
        coef *= (s + 2.0 * j as f64 + 1.0) * (s + 2.0 * j as f64 + 2.0);
        pow /= x0 * x0;
    }
    let tail = 2.0 * (x0.powf(1.0 - s) / (s - 1.0) - cos_tail);
    Ok(2.0 * (head.value + body + tail))
}

/// Which branch of an exponent table applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// At the distinguished aspect exponent.
    Balanced,
    /// Above it, limit driven by planar noise.
    AbovePlanar,
    /// Above it, limit linear in the first coordinate.
    AboveLine,
    BelowPlanar,
    BelowLine,
    /// Fractional Brownian sheet law, affine in the aspect exponent.
    Product,
    /// Aggregated random-field tables.
    Gaussian,
    Stable,
    Degenerate,
}

/// Self-similarity exponent of the scaling limit at a given aspect exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingLaw {
    pub gamma: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub regime: Regime,
    pub gamma0: Option<f64>,
}

/// Exponent `H(gamma)` with `S_{n, n^gamma}` growing like `n^{H}`.
#[allow(non_snake_case)]
pub fn H_of_gamma(model: &SpectralModel, gamma: f64) -> Result<ScalingLaw> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return domain(format!("aspect exponent {gamma} must be positive"));
    }
    let gamma0 = model.gamma0();
    let (h, regime) = match model.kind {
        SpectralKind::TypeI { h1, h2, .. } => {
            check_type_i_boundary(h1, h2)?;
            let g0 = h1 / h2;
            if (gamma / g0 - 1.0).abs() <= 1e-12 {
                ((h1 + h2 + h1 * h2) / (2.0 * h2), Regime::Balanced)
            } else if gamma > g0 {
                if h1 < 1.0 {
                    ((1.0 + gamma + h1) / 2.0, Regime::AbovePlanar)
                } else {
                    ((gamma * h1 + gamma * h1 * h2 - gamma * h2 + 2.0 * h1) / (2.0 * h1), Regime::AboveLine)
                }
            } else if h2 < 1.0 {
                ((1.0 + gamma + gamma * h2) / 2.0, Regime::BelowPlanar)
            } else {
                ((h2 + h1 * h2 - h1 + 2.0 * gamma * h2) / (2.0 * h2), Regime::BelowLine)
            }
        }
        SpectralKind::TypeII { d1, d2 } => ((1.0 + gamma) / 2.0 + d1 + d2 * gamma, Regime::Product),
        SpectralKind::Lavancier { theta1, theta2, d } => {
            if theta2 == 0.0 || (theta1 != 0.0 && gamma > 1.0 + 1e-12) {
                ((1.0 + gamma) / 2.0 + d, Regime::AbovePlanar)
            } else if theta1 == 0.0 || gamma < 1.0 - 1e-12 {
                ((1.0 + gamma) / 2.0 + d * gamma, Regime::BelowPlanar)
            } else {
                (1.0 + d, Regime::Balanced)
            }
        }
    };
    Ok(ScalingLaw { gamma, h, regime, gamma0 })
}

/// `int_R |1 - e^{iux}|^2 |u|^{-2-p} du = x^{1+p} kappa^2(p/2)` for `p` in `(-1, 1)`.
fn increment_energy(x: f64, p: f64) -> f64 {
    x.abs().powf(1.0 + p) * kappa_sq_ext(0.5 * p)
}

/// `E V_gamma(x, y)^2` for the scaling limit of partial sums.
pub fn limit_variance(model: &SpectralModel, gamma: f64, x: f64, y: f64, exec: Exec) -> Result<f64> {
    if !(x >= 0.0 && y >= 0.0) {
        return domain(format!("limit field lives on the closed positive quadrant, got ({x}, {y})"));
    }
    if !(gamma > 0.0) {
        return domain(format!("aspect exponent {gamma} must be positive"));
    }
    let spectrum = limit_spectrum(model, gamma)?;
    if x == 0.0 || y == 0.0 {
        return Ok(0.0);
    }
    match spectrum {
        LimitSpectrum::Planar(PlanarLimit::Separable { scale, p, q }) => {
            Ok(scale * increment_energy(x, p) * increment_energy(y, q))
        }
        LimitSpectrum::Planar(k) => {
            let run = |shape: RuleShape| -> Result<f64> {
                let rx = interval_rule_shaped(IntervalPair::same(x), shape)?;
                let ry = interval_rule_shaped(IntervalPair::same(y), shape)?;
                Ok(tensor_sum(&rx, &ry, |u, v| k.eval(u, v), exec).0)
            };
            let fine = run(FINE)?;
            let coarse = run(COARSE)?;
            let rel = ((fine - coarse) / fine).abs();
            if !fine.is_finite() || rel > CONVERGENCE_GATE {
                return Err(Error::Numerical(format!(
                    "limit variance quadrature unconverged: fine {fine:e}, coarse {coarse:e}"
                )));
            }
            Ok(fine * model.g.eval(0.0, 0.0))
        }
        LimitSpectrum::Line { scale_sq, p, linear_in_first } => {
            let (lin, other) = if linear_in_first { (x, y) } else { (y, x) };
            Ok(lin * lin * scale_sq * increment_energy(other, p))
        }
    }
}

/// Axis-parallel rectangle `(lo.0, hi.0] x (lo.1, hi.1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rectangle {
    pub lo: (f64, f64),
    pub hi: (f64, f64),
}

impl Rectangle {
    pub fn new(lo: (f64, f64), hi: (f64, f64)) -> Result<Self> {
        if !(lo.0 < hi.0 && lo.1 < hi.1) {
            return domain(format!("degenerate rectangle {lo:?} - {hi:?}"));
        }
        Ok(Self { lo, hi })
    }

    pub fn unit_at(u: f64, v: f64) -> Self {
        Self { lo: (u, v), hi: (u + 1.0, v + 1.0) }
    }

    pub fn shifted(&self, du: f64, dv: f64) -> Self {
        Self { lo: (self.lo.0 + du, self.lo.1 + dv), hi: (self.hi.0 + du, self.hi.1 + dv) }
    }

    fn in_quadrant(&self) -> bool {
        self.lo.0 >= 0.0 && self.lo.1 >= 0.0
    }

    fn x_span(&self) -> (f64, f64) {
        (self.lo.0, self.hi.0)
    }

    fn y_span(&self) -> (f64, f64) {
        (self.lo.1, self.hi.1)
    }
}

/// Covariance of increments of fractional Brownian motion over two intervals.
fn fbm_increment_cov(h: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let p = 2.0 * h;
    let e = |z: f64| z.abs().powf(p);
    0.5 * (e(a.1 - b.0) + e(a.0 - b.1) - e(a.1 - b.1) - e(a.0 - b.0))
}

/// `E B(K) B(K')` for the fractional Brownian sheet with indices `(h1, h2)`.
pub fn fbs_increment_cov(h1: f64, h2: f64, k: &Rectangle, k2: &Rectangle) -> Result<f64> {
    for h in [h1, h2] {
        if !(h > 0.0 && h <= 1.0) {
            return domain(format!("sheet index {h} outside (0, 1]"));
        }
    }
    if !(k.in_quadrant() && k2.in_quadrant()) {
        return domain("the sheet is indexed by the closed positive quadrant");
    }
    Ok(fbm_increment_cov(h1, k.x_span(), k2.x_span()) * fbm_increment_cov(h2, k.y_span(), k2.y_span()))
}

/// Spectral kernel of a field with stationary rectangular increments.
#[derive(Clone)]
pub enum CovKernel {
    /// `scale |u|^{-p} |v|^{-q}`; both exponents must lie in `(-1, 1)`.
    Separable { scale: f64, p: f64, q: f64 },
    /// Planar scaling limit of a spectral model.
    Limit { model: SpectralModel, gamma: f64 },
    Custom(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for CovKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovKernel::Separable { scale, p, q } => write!(f, "Separable({scale}, {p}, {q})"),
            CovKernel::Limit { model, gamma } => write!(f, "Limit({:?}, {gamma})", model.kind),
            CovKernel::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Real and imaginary parts of an increment covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovValue {
    pub value: f64,
    pub imag_residue: f64,
}

/// `int 1_K^(u,v) conj(1_K'^(u,v)) k(u,v) du dv`: the covariance of the
/// increments over `K` and `K'` of the field with spectral kernel `k`.
pub fn increment_cov_functional(kernel: &CovKernel, k: &Rectangle, k2: &Rectangle, exec: Exec) -> Result<CovValue> {
    if !(k.in_quadrant() && k2.in_quadrant()) {
        return domain("rectangles must lie in the closed positive quadrant");
    }
    let separable = match kernel {
        CovKernel::Separable { scale, p, q } => Some((*scale, *p, *q)),
        CovKernel::Limit { model, gamma } => match limit_spectrum(model, *gamma)? {
            LimitSpectrum::Planar(PlanarLimit::Separable { scale, p, q }) => Some((scale, p, q)),
            LimitSpectrum::Planar(_) => None,
            LimitSpectrum::Line { .. } => {
                return domain("limit driven by one-dimensional noise has no planar spectral kernel")
            }
        },
        CovKernel::Custom(_) => None,
    };
    if let Some((scale, p, q)) = separable {
        for e in [p, q] {
            if !(e > -1.0 && e < 1.0) {
                return domain(format!(
                    "kernel exponent {e} violates int k/((1+u^2)(1+v^2)) < inf (needs -1 < exponent < 1)"
                ));
            }
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return domain(format!("kernel scale {scale} must be finite and nonnegative"));
        }
        // 2 pi times the covariance of fBm increments with index (1+p)/2
        let factor = |e: f64, a: (f64, f64), b: (f64, f64)| {
            kappa_sq_ext(0.5 * e) * fbm_increment_cov(0.5 * (1.0 + e), a, b)
        };
        let value = scale * factor(p, k.x_span(), k2.x_span()) * factor(q, k.y_span(), k2.y_span());
        return Ok(CovValue { value, imag_residue: 0.0 });
    }
    let eval: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync> = match kernel {
        CovKernel::Limit { model, gamma } => {
            let PlanarKernel(lim) = planar_kernel(model, *gamma)?;
            let g0 = model.g.eval(0.0, 0.0);
            Arc::new(move |u, v| g0 * lim.eval(u, v))
        }
        CovKernel::Custom(f) => f.clone(),
        CovKernel::Separable { .. } => unreachable!(),
    };
    check_integrability(eval.as_ref(), exec)?;
    let run = |shape: RuleShape| -> Result<(f64, f64)> {
        let rx = interval_rule_shaped(IntervalPair::new(k.x_span(), k2.x_span()), shape)?;
        let ry = interval_rule_shaped(IntervalPair::new(k.y_span(), k2.y_span()), shape)?;
        Ok(tensor_sum(&rx, &ry, |u, v| eval(u, v), exec))
    };
    let (re, im) = run(FINE)?;
    let (re_c, _) = run(COARSE)?;
    let scale = re.abs().max(re_c.abs());
    if !re.is_finite() || (re - re_c).abs() > CONVERGENCE_GATE * scale + 1e-9 {
        return Err(Error::Numerical(format!(
            "increment covariance quadrature unconverged: fine {re:e}, coarse {re_c:e}"
        )));
    }
    Ok(CovValue { value: re, imag_residue: im })
}

struct PlanarKernel(PlanarLimit);

fn planar_kernel(model: &SpectralModel, gamma: f64) -> Result<PlanarKernel> {
    match limit_spectrum(model, gamma)? {
        LimitSpectrum::Planar(k) => Ok(PlanarKernel(k)),
        LimitSpectrum::Line { .. } => domain("limit driven by one-dimensional noise has no planar spectral kernel"),
    }
}

/// Rule for `int_R phi(u) / (1 + u^2) du` truncated at `min_offset` next to 0 and
/// at `1/min_offset` at infinity.
fn kfin_rule(min_offset: f64) -> LineRule {
    let mut half = LineRule::default();
    for (u, w) in tanh_sinh_rule(0.0, 1.0, 0.125, min_offset) {
        half.push(u, w / (1.0 + u * u), 0.0);
    }
    for (t, w) in tanh_sinh_rule(0.0, 1.0, 0.125, min_offset) {
        half.push(1.0 / t, w / (1.0 + t * t), 0.0);
    }
    LineRule::mirrored(half)
}

/// Probe `int k / ((1+u^2)(1+v^2)) < inf`: the kernel must be finite and
/// nonnegative off the axes, and the truncated integral must not move when
/// the truncation next to the axes and at infinity is pushed much further.
fn check_integrability(k: &(dyn Fn(f64, f64) -> f64 + Send + Sync), exec: Exec) -> Result<()> {
    let shallow = kfin_rule(1e-20);
    let deep = kfin_rule(1e-40);
    let bad = exec.map(shallow.len(), |i| {
        let u = shallow.nodes[i];
        shallow.nodes.iter().any(|&v| {
            let val = k(u, v);
            val.is_nan() || val < 0.0 || val == f64::INFINITY
        })
    });
    if bad.iter().any(|&b| b) {
        return domain("kernel is negative, infinite or NaN off the coordinate axes");
    }
    let a = tensor_sum(&shallow, &shallow, k, exec).0;
    let b = tensor_sum(&deep, &deep, k, exec).0;
    if !b.is_finite() || (b - a).abs() > 1e-2 * a.abs() {
        return domain(format!(
            "kernel fails int k/((1+u^2)(1+v^2)) < inf: truncated integrals {a:e} and {b:e} disagree"
        ));
    }
    Ok(())
}
