//! Stable limit fields of the aggregated nearest-neighbour autoregressions.
//!
//! A limit field is a stochastic integral of a kernel `F(x, y; u, v, z)`
//! against a stable random measure with control `phi1 z^beta du dv dz`. This
//! module evaluates the kernels, the characteristic functional
//! `J = int F^alpha d(mu)` of the unit rectangle, its lattice prelimit, the
//! exponent tables and the large-lag covariance of the Gaussian case.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::cell::Cell;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::green::{fft_extent, invert_on_grid, LineSymbol, WalkModel};
use crate::par::Exec;
use crate::quad::{exp_sinh, gauss_kronrod, tanh_sinh, tanh_sinh_rule, Estimate, GaussLegendre, Tol};
use crate::specfun::{beta_fn, erf, erfc, gamma, lower_incomplete_gamma};
use crate::spectra::{box_height, fejer_rule, Rectangle, Regime, ScalingLaw};

/// Two aspect exponents closer than this are the same.
const SAME_GAMMA: f64 = 1e-12;

type DensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Law of the autoregressive coefficient, with density regularly varying at 1:
/// `phi(a) ~ phi1 (1 - a)^beta`.
#[derive(Clone)]
pub struct MixingLaw {
    beta: f64,
    phi1: f64,
    /// `None` is the standard density `(1 + beta)(1 - a)^beta`.
    density: Option<DensityFn>,
}

impl fmt::Debug for MixingLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MixingLaw")
            .field("beta", &self.beta)
            .field("phi1", &self.phi1)
            .field("standard", &self.density.is_none())
            .finish()
    }
}

impl MixingLaw {
    /// The density `(1 + beta)(1 - a)^beta` on `[0, 1)`.
    pub fn standard(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return domain(format!("mixing exponent beta = {beta} must be positive"));
        }
        Ok(Self { beta, phi1: 1.0 + beta, density: None })
    }

    /// A user density; it must integrate to one, stay bounded and behave like
    /// `phi1 (1 - a)^beta` next to 1.
    pub fn custom(beta: f64, phi1: f64, density: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        let mut law = Self::standard(beta)?;
        if !(phi1 > 0.0 && phi1.is_finite()) {
            return domain(format!("density slope phi1 = {phi1} must be positive"));
        }
        law.phi1 = phi1;
        law.density = Some(Arc::new(density));
        let total = law.expect(|_| 1.0, Tol::rel(1e-13));
        if !((total.value - 1.0).abs() <= 1e-10) {
            return domain(format!("mixing density integrates to {} instead of 1", total.value));
        }
        for k in 0..=200 {
            let v = law.density(k as f64 / 200.0 * (1.0 - 1e-9));
            if !(v >= 0.0 && v.is_finite()) {
                return domain(format!("mixing density is negative or unbounded near a = {}", k as f64 / 200.0));
            }
        }
        let last = law.slope_ratio(1e-9);
        if !((last - 1.0).abs() <= 1e-3) {
            return domain(format!(
                "phi(a) / (phi1 (1-a)^beta) = {last} at 1 - a = 1e-9; the density slope does not match phi1"
            ));
        }
        Ok(law)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn phi1(&self) -> f64 {
        self.phi1
    }

    pub fn is_standard(&self) -> bool {
        self.density.is_none()
    }

    pub fn density(&self, a: f64) -> f64 {
        if !(0.0..1.0).contains(&a) {
            return 0.0;
        }
        match &self.density {
            None => (1.0 + self.beta) * (1.0 - a).powf(self.beta),
            Some(f) => f(a),
        }
    }

    /// `phi(1 - gap) / (phi1 gap^beta)`, which tends to 1 as the gap closes.
    pub fn slope_ratio(&self, gap: f64) -> f64 {
        self.density(1.0 - gap) / (self.phi1 * gap.powf(self.beta))
    }

    /// Density of `xi = gap^{1+beta}`; identically 1 for the standard law.
    fn xi_weight(&self, gap: f64) -> f64 {
        match &self.density {
            None => 1.0,
            Some(f) => f(1.0 - gap) / ((1.0 + self.beta) * gap.powf(self.beta)),
        }
    }

    /// `P(1 - A <= gap)`.
    pub fn gap_probability(&self, gap: f64) -> f64 {
        let gap = gap.clamp(0.0, 1.0);
        let xi = gap.powf(1.0 + self.beta);
        if self.density.is_none() || xi == 0.0 {
            return xi;
        }
        let p = 1.0 / (1.0 + self.beta);
        tanh_sinh(|x| self.xi_weight(x.powf(p)), 0.0, xi, Tol::rel(1e-12)).value.clamp(0.0, 1.0)
    }

    /// `E f(1 - A)`, integrated in `xi = (1 - A)^{1+beta}` where the standard
    /// density is flat.
    pub fn expect(&self, f: impl Fn(f64) -> f64, tol: Tol) -> Estimate {
        let p = 1.0 / (1.0 + self.beta);
        tanh_sinh(
            |xi| {
                let gap = xi.powf(p);
                self.xi_weight(gap) * f(gap)
            },
            0.0,
            1.0,
            tol,
        )
    }

    /// As [`MixingLaw::expect`], splitting the range at `gap = knee` where the
    /// integrand changes scale.
    pub fn expect_split(&self, f: impl Fn(f64) -> f64, knee: f64, tol: Tol) -> Estimate {
        if !(knee > 0.0 && knee < 1.0) {
            return self.expect(f, tol);
        }
        let p = 1.0 / (1.0 + self.beta);
        let g = |xi: f64| {
            let gap = xi.powf(p);
            self.xi_weight(gap) * f(gap)
        };
        let cut = knee.powf(1.0 + self.beta);
        let a = tanh_sinh(g, 0.0, cut, tol);
        let b = tanh_sinh(g, cut, 1.0, tol);
        Estimate {
            value: a.value + b.value,
            error: a.error + b.error,
            evals: a.evals + b.evals,
            converged: a.converged && b.converged,
        }
    }
}

/// Control measure `phi1 z^beta du dv dz` of the limit random measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlMeasure {
    pub phi1: f64,
    pub beta: f64,
}

impl ControlMeasure {
    pub fn density(&self, z: f64) -> f64 {
        self.phi1 * z.powf(self.beta)
    }
}

/// Which form the limit kernel takes for a given aspect exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelCase {
    /// Full box integral of the continuum Green function.
    Balanced,
    /// Above the balanced exponent: indicator of `0 < v < y`.
    VerticalStrip,
    /// Below it with heavy mixing tails: indicator of `0 < u < x`.
    HorizontalStrip,
    /// Below it with light mixing tails: linear in the box height.
    LinearInHeight,
}

/// Parameters of one limit theorem.
#[derive(Debug, Clone)]
pub struct StableLimitSpec {
    model: WalkModel,
    alpha: f64,
    mixing: MixingLaw,
    gamma: f64,
}

impl StableLimitSpec {
    pub fn new(model: WalkModel, alpha: f64, mixing: MixingLaw, gamma: f64) -> Result<Self> {
        check_parameters(model, alpha, mixing.beta, gamma)?;
        Ok(Self { model, alpha, mixing, gamma })
    }

    /// Standard mixing law with exponent `beta`.
    pub fn standard(model: WalkModel, alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        Self::new(model, alpha, MixingLaw::standard(beta)?, gamma)
    }

    pub fn model(&self) -> WalkModel {
        self.model
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.mixing.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn mixing(&self) -> &MixingLaw {
        &self.mixing
    }

    pub fn control(&self) -> ControlMeasure {
        ControlMeasure { phi1: self.mixing.phi1, beta: self.mixing.beta }
    }

    pub fn kernel_case(&self) -> KernelCase {
        kernel_case(self.model, self.alpha, self.mixing.beta, self.gamma)
    }

    pub fn law(&self) -> ScalingLaw {
        exponent_law(self.model, self.alpha, self.mixing.beta, self.gamma)
            .expect("parameters were validated on construction")
    }
}

fn on_balance(model: WalkModel, gamma: f64) -> bool {
    (gamma - model.gamma0()).abs() <= SAME_GAMMA
}

fn check_parameters(model: WalkModel, alpha: f64, beta: f64, gamma: f64) -> Result<()> {
    if !(alpha > 1.0 && alpha <= 2.0) {
        return domain(format!("stability index alpha = {alpha} must lie in (1, 2]"));
    }
    if !(beta > 0.0 && beta < alpha - 1.0) {
        return domain(format!("mixing exponent beta = {beta} must lie in (0, alpha - 1) = (0, {})", alpha - 1.0));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return domain(format!("aspect exponent gamma = {gamma} must be positive"));
    }
    let critical = 0.5 * (alpha - 1.0);
    if gamma < model.gamma0() && !on_balance(model, gamma) && (beta - critical).abs() <= 1e-12 {
        return domain(format!(
            "beta = (alpha - 1)/2 = {critical} with gamma = {gamma} below {}: no scaling limit is known in this case",
            model.gamma0()
        ));
    }
    Ok(())
}

fn kernel_case(model: WalkModel, alpha: f64, beta: f64, gamma: f64) -> KernelCase {
    if on_balance(model, gamma) {
        KernelCase::Balanced
    } else if gamma > model.gamma0() {
        KernelCase::VerticalStrip
    } else if beta > 0.5 * (alpha - 1.0) {
        KernelCase::HorizontalStrip
    } else {
        KernelCase::LinearInHeight
    }
}

/// Exponent `H(gamma)` of the stable limit: partial sums over `n x n^gamma`
/// boxes grow like `n^H`.
pub fn exponent_law(model: WalkModel, alpha: f64, beta: f64, gamma: f64) -> Result<ScalingLaw> {
    check_parameters(model, alpha, beta, gamma)?;
    let case = kernel_case(model, alpha, beta, gamma);
    let h = match (model, case) {
        (WalkModel::ThreeN, KernelCase::Balanced | KernelCase::VerticalStrip) => (gamma + alpha - beta) / alpha,
        (WalkModel::FourN, KernelCase::Balanced | KernelCase::VerticalStrip) => {
            (gamma - 1.0 + 2.0 * (alpha - beta)) / alpha
        }
        (_, KernelCase::HorizontalStrip) => (1.0 - gamma + 2.0 * gamma * (alpha - beta)) / alpha,
        (WalkModel::ThreeN, KernelCase::LinearInHeight) => (alpha * gamma + 0.5 * (alpha + 1.0) - beta) / alpha,
        (WalkModel::FourN, KernelCase::LinearInHeight) => (alpha * gamma + alpha - 2.0 * beta) / alpha,
    };
    let regime = match case {
        KernelCase::Balanced => Regime::Balanced,
        KernelCase::VerticalStrip => Regime::AbovePlanar,
        KernelCase::HorizontalStrip => Regime::BelowPlanar,
        KernelCase::LinearInHeight => Regime::BelowLine,
    };
    Ok(ScalingLaw { gamma, h, regime, gamma0: Some(model.gamma0()) })
}

// ---------------------------------------------------------------------------
// kernels

const KERNEL_TOL: Tol = Tol::new(1e-300, 1e-9);
const KERNEL_SEGMENTS: usize = 200;

/// `erf(a + d) - erf(a)` for `d >= 0`, accurate for narrow windows and in both tails.
fn erf_window(a: f64, d: f64) -> f64 {
    if d <= 0.0 {
        return 0.0;
    }
    let h = 0.5 * d;
    let m = a + h;
    if h * (1.0 + m.abs()) < 1e-3 {
        return 4.0 * h / PI.sqrt() * (-m * m).exp() * (1.0 + (2.0 * m * m - 1.0) * h * h / 3.0);
    }
    let b = a + d;
    if a >= 0.0 {
        erfc(a) - erfc(b)
    } else if b <= 0.0 {
        erfc(-b) - erfc(-a)
    } else {
        erf(b) - erf(a)
    }
}

/// `int_lo^{lo + width} e^{-c |r|} dr`.
fn exp_window(c: f64, lo: f64, width: f64) -> f64 {
    if width <= 0.0 {
        return 0.0;
    }
    let hi = lo + width;
    if lo >= 0.0 {
        (-c * lo).exp() * -(-c * width).exp_m1() / c
    } else if hi <= 0.0 {
        (c * hi).exp() * -(-c * width).exp_m1() / c
    } else {
        (-(c * lo).exp_m1() - (-c * hi).exp_m1()) / c
    }
}

/// Horizontal travel times from a source at `u` into `[0, x]`: `(start, width)`.
fn travel(x: f64, u: f64) -> (f64, f64) {
    if u < 0.0 { (-u, x) } else { (0.0, x - u) }
}

/// `int_0^y` of a heat kernel of variance `2 tau` centred at `v`.
fn heat_strip(y: f64, v: f64, tau: f64) -> f64 {
    let r = 0.5 / tau.sqrt();
    erf_window(-v * r, y * r)
}

/// `int_0^inf f` through `x = scale r / (1 - r)`.
fn half_line(f: impl Fn(f64) -> f64 + Sync, scale: f64, tol: Tol) -> Estimate {
    gauss_kronrod(
        |r| {
            let q = 1.0 - r;
            if q <= 0.0 {
                return 0.0;
            }
            let v = f(scale * r / q) * scale / (q * q);
            if v.is_finite() { v } else { 0.0 }
        },
        0.0,
        1.0,
        &[],
        tol,
        KERNEL_SEGMENTS,
    )
}

/// Breakpoints `c / scale` inside `(0, end)` that steer an adaptive rule onto a
/// peak of width `1 / scale` at the origin.
fn peak_breaks(scale: f64, end: f64) -> Vec<f64> {
    [0.25, 1.0, 4.0, 16.0, 64.0].iter().map(|c| c / scale).filter(|&b| b < end).collect()
}

/// `int_{start}^{start + width} f(tau) dtau` where `f` carries a factor
/// `e^{-rate (tau - start)}`; in `sqrt(tau)` when the window starts at 0 where
/// `f` has square-root behaviour.
fn travel_integral(start: f64, width: f64, rate: f64, f: impl Fn(f64) -> f64 + Sync) -> f64 {
    if start > 0.0 {
        let breaks = peak_breaks(rate, width);
        gauss_kronrod(|s| f(start + s), 0.0, width, &breaks, KERNEL_TOL, KERNEL_SEGMENTS).value
    } else {
        let breaks = peak_breaks(rate.sqrt(), width.sqrt());
        let g = |sigma: f64| if sigma > 0.0 { 2.0 * sigma * f(sigma * sigma) } else { 0.0 };
        gauss_kronrod(g, 0.0, width.sqrt(), &breaks, KERNEL_TOL, KERNEL_SEGMENTS).value
    }
}

/// The 3N kernel over the box `[0, x] x [0, y]`.
fn kernel_3n(case: KernelCase, x: f64, y: f64, u: f64, v: f64, z: f64) -> f64 {
    let (start, width) = travel(x, u);
    match case {
        KernelCase::Balanced if width > 0.0 => {
            (-3.0 * z * start).exp()
                * travel_integral(start, width, 3.0 * z, |tau| {
                    1.5 * (-3.0 * z * (tau - start)).exp() * heat_strip(y, v, tau)
                })
        }
        KernelCase::LinearInHeight if width > 0.0 => {
            y * (-3.0 * z * start).exp()
                * travel_integral(start, width, 3.0 * z, |tau| {
                    1.5 / (PI * tau).sqrt() * (-3.0 * z * (tau - start) - v * v / (4.0 * tau)).exp()
                })
        }
        KernelCase::VerticalStrip if width > 0.0 && v > 0.0 && v < y => {
            (-3.0 * z * start).exp() * -(-3.0 * z * width).exp_m1() / z
        }
        KernelCase::HorizontalStrip if u > 0.0 && u < x => {
            0.5 * 3f64.sqrt() / z.sqrt() * exp_window((3.0 * z).sqrt(), -v, y)
        }
        _ => 0.0,
    }
}

/// `erf((x - u)/q) + erf(u/q)`: the box profile of a Gaussian with variance `q^2/2`.
fn gauss_box(x: f64, u: f64, q: f64) -> f64 {
    erf_window(-u / q, x / q)
}

/// The 4N kernel over the box `[0, x] x [0, y]`.
fn kernel_4n(case: KernelCase, x: f64, y: f64, u: f64, v: f64, z: f64) -> f64 {
    let root = z.sqrt();
    // h4 = (1/pi) int_0^inf exp(-z w - r^2/w) dw/w, integrated over the box, with w = q^2
    let q_integral = |f: &(dyn Fn(f64) -> f64 + Sync)| {
        let reach = (u.abs() + v.abs() + x + y).max(1.0);
        let near = gauss_kronrod(f, 0.0, reach, &peak_breaks(root, reach), KERNEL_TOL, KERNEL_SEGMENTS).value;
        near + half_line(|q| f(reach + q), 1.0 / root, KERNEL_TOL).value
    };
    match case {
        KernelCase::Balanced => q_integral(&|q: f64| {
            if q <= 0.0 {
                return 0.0;
            }
            0.5 * q * (-z * q * q).exp() * gauss_box(x, u, q) * gauss_box(y, v, q)
        }),
        KernelCase::LinearInHeight => {
            y * q_integral(&|q: f64| {
                if q <= 0.0 {
                    return 0.0;
                }
                (-z * q * q - v * v / (q * q)).exp() * gauss_box(x, u, q) / PI.sqrt()
            })
        }
        KernelCase::VerticalStrip if v > 0.0 && v < y => exp_window(2.0 * root, -u, x) / root,
        KernelCase::HorizontalStrip if u > 0.0 && u < x => exp_window(2.0 * root, -v, y) / root,
        _ => 0.0,
    }
}

fn kernel_value(model: WalkModel, case: KernelCase, x: f64, y: f64, u: f64, v: f64, z: f64) -> f64 {
    match model {
        WalkModel::ThreeN => kernel_3n(case, x, y, u, v, z),
        WalkModel::FourN => kernel_4n(case, x, y, u, v, z),
    }
}

/// Limit kernel `F(x, y; u, v, z)` of the box `[0, x] x [0, y]`.
pub fn limit_kernel(spec: &StableLimitSpec, x: f64, y: f64, u: f64, v: f64, z: f64) -> Result<f64> {
    if !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()) {
        return domain(format!("box sides ({x}, {y}) must be positive"));
    }
    if !(z > 0.0 && z.is_finite()) || !u.is_finite() || !v.is_finite() {
        return domain(format!("kernel argument (u, v, z) = ({u}, {v}, {z}) needs finite u, v and z > 0"));
    }
    Ok(kernel_value(spec.model, spec.kernel_case(), x, y, u, v, z))
}

// ---------------------------------------------------------------------------
// double-exponential tensor rules

/// Reach in `t` of the tanh-sinh rules; end offsets fall to ~1e-17 of the interval.
const FINITE_REACH: f64 = 3.2;
/// Reach in `t` of the exp-sinh rules: `scale e^{+-70}`, wide enough for algebraic tails.
const HALF_REACH: f64 = 4.5;
const FIRST_STEP: f64 = 0.5;
const LAST_STEP: f64 = 1.0 / 32.0;

/// Tanh-sinh nodes on `[a, b]` at step `h`.
fn de_finite(a: f64, b: f64, h: f64) -> Vec<(f64, f64)> {
    let half = 0.5 * (b - a);
    let kmax = (FINITE_REACH / h).floor() as i64;
    let mut out = Vec::with_capacity(2 * kmax as usize + 1);
    for k in -kmax..=kmax {
        let t = k as f64 * h;
        let s = 0.5 * PI * t.sinh();
        let e = (-2.0 * s.abs()).exp();
        let offset = 2.0 * half * e / (1.0 + e);
        let w = h * half * 0.5 * PI * t.cosh() * 4.0 * e / ((1.0 + e) * (1.0 + e));
        if offset <= 0.0 || w <= 0.0 {
            continue;
        }
        let x = match k.signum() {
            -1 => a + offset,
            1 => b - offset,
            _ => 0.5 * (a + b),
        };
        out.push((x, w));
    }
    out
}

/// Exp-sinh offsets `r > 0` and weights for `int_0^inf` at step `h`.
fn de_half(scale: f64, h: f64) -> Vec<(f64, f64)> {
    let kmax = (HALF_REACH / h).floor() as i64;
    (-kmax..=kmax)
        .map(|k| {
            let t = k as f64 * h;
            let r = scale * (0.5 * PI * t.sinh()).exp();
            (r, h * 0.5 * PI * t.cosh() * r)
        })
        .collect()
}

/// `ln` range of the offsets on a layered half-line, relative to its scale:
/// from well inside the `LARGE_Z` layer to beyond the `SMALL_Z` spread.
const LN_THINNEST_LAYER: f64 = -28.0;
const LN_FARTHEST_OFFSET: f64 = 60.0;

/// Integration range along one spatial axis.
#[derive(Debug, Clone)]
struct Axis {
    /// Finite breakpoints, increasing.
    breaks: Vec<f64>,
    open_left: bool,
    open_right: bool,
    /// Reflection centre: only the right half is integrated and doubled.
    mirror: Option<f64>,
    /// Length scale of the half-line rules.
    scale: f64,
    /// Half-lines carry the whole integrand in a layer of width `z^{-1/2}` at
    /// their end: integrate them trapezoidally in the log of the offset.
    layered: bool,
}

impl Axis {
    /// A single point carrying unit weight (an indicator integrated out).
    fn point(at: f64) -> Self {
        Self { breaks: vec![at], open_left: false, open_right: false, mirror: None, scale: 1.0, layered: false }
    }

    fn line(mut breaks: Vec<f64>, scale: f64) -> Self {
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        Self { breaks, open_left: true, open_right: true, mirror: None, scale, layered: false }
    }

    fn left(mut breaks: Vec<f64>, scale: f64) -> Self {
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        Self { breaks, open_left: true, open_right: false, mirror: None, scale, layered: false }
    }

    fn mirrored(mut self, centre: f64) -> Self {
        self.mirror = Some(centre);
        self
    }

    fn layered(mut self) -> Self {
        self.layered = true;
        self
    }

    fn half_line(&self, h: f64) -> Vec<(f64, f64)> {
        if !self.layered {
            return de_half(self.scale, h);
        }
        let step = 4.0 * h;
        let lo = (LN_THINNEST_LAYER / step).floor() as i64;
        let hi = (LN_FARTHEST_OFFSET / step).ceil() as i64;
        (lo..=hi)
            .map(|k| {
                let r = self.scale * (k as f64 * step).exp();
                (r, step * r)
            })
            .collect()
    }

    fn nodes(&self, h: f64) -> Vec<(f64, f64)> {
        if self.breaks.len() == 1 && !self.open_left && !self.open_right {
            return vec![(self.breaks[0], 1.0)];
        }
        let mut breaks = self.breaks.clone();
        let mut open_left = self.open_left;
        let mut factor = 1.0;
        if let Some(c) = self.mirror {
            breaks.retain(|&b| b > c);
            breaks.insert(0, c);
            open_left = false;
            factor = 2.0;
        }
        let mut out = Vec::new();
        let first = breaks[0];
        let last = *breaks.last().unwrap();
        if open_left {
            out.extend(self.half_line(h).into_iter().rev().map(|(r, w)| (first - r, w)));
        }
        for w in breaks.windows(2) {
            out.extend(de_finite(w[0], w[1], h));
        }
        if self.open_right {
            out.extend(self.half_line(h).into_iter().map(|(r, w)| (last + r, w)));
        }
        out.iter_mut().for_each(|n| n.1 *= factor);
        out
    }
}

/// A kernel at fixed `(u, v)` as a function of `z`.
#[derive(Debug, Clone, PartialEq)]
enum Profile {
    Zero,
    /// `sum_k c_k e^{-z lambda_k}` as `(lambda_k, c_k)`.
    Laplace(Vec<(f64, f64)>),
    /// `(e^{-3 z start} - e^{-3 z (start + width)}) / z`.
    Ramp { start: f64, width: f64 },
    /// `scale z^{-1/2} int_lo^{lo + width} e^{-rate sqrt(z) |r|} dr`.
    Window { lo: f64, width: f64, rate: f64, scale: f64 },
}

impl Profile {
    fn eval(&self, z: f64) -> f64 {
        match self {
            Profile::Zero => 0.0,
            Profile::Laplace(terms) => {
                // rates ascend, so the tail below e^{-100} of every weight is skipped
                let mut acc = 0.0;
                for &(l, c) in terms {
                    let e = z * l;
                    if e > 100.0 {
                        break;
                    }
                    acc += c * (-e).exp();
                }
                acc
            }
            Profile::Ramp { start, width } => (-3.0 * z * start).exp() * -(-3.0 * z * width).exp_m1() / z,
            Profile::Window { lo, width, rate, scale } => {
                let r = z.sqrt();
                scale / r * exp_window(rate * r, *lo, *width)
            }
        }
    }
}

// The Laplace representations must hold uniformly for SMALL_Z <= z <= LARGE_Z,
// so their rules are trapezoidal in logarithmic variables: a DE rule would leave
// gaps of several e-folds exactly where e^{-z lambda} cuts off at large z.

/// `ln` of the shortest travel time resolved; the part cut off is a share
/// `~3 z e^-55 < 1e-6` of the kernel even at `LARGE_Z`.
const LN_SHORTEST_TRAVEL: f64 = -55.0;
/// `ln` range of the Gaussian widths `q`: below `e^{-30}` lies a share
/// `~z e^-60 < 1e-8` of the kernel at `LARGE_Z`, and `e^{28}` reaches `z = SMALL_Z`.
const LN_NARROWEST_WIDTH: f64 = -30.0;
const LN_WIDEST_WIDTH: f64 = 28.0;

/// Travel-time rule `(tau, weight)` over `[start, start + width]`: trapezoidal in
/// `s` with `tau - start = width / (1 + e^{-s})`.
fn travel_nodes(start: f64, width: f64, h: f64) -> Vec<(f64, f64)> {
    let step = 4.0 * h;
    let lo = ((LN_SHORTEST_TRAVEL - width.ln()) / step).floor() as i64;
    let hi = (36.0 / step).ceil() as i64;
    (lo..=hi)
        .map(|k| {
            let s = k as f64 * step;
            // logistic and its complement without cancellation
            let (p, q) = if s < 0.0 {
                let e = s.exp();
                (e / (1.0 + e), 1.0 / (1.0 + e))
            } else {
                let e = (-s).exp();
                (1.0 / (1.0 + e), e / (1.0 + e))
            };
            (start + width * p, step * width * p * q)
        })
        .collect()
}

/// Width rule `(q, weight)` over `(0, inf)`, trapezoidal in `ln q`; far sources
/// at distance `reach` stretch the upper end.
fn width_nodes(reach: f64, h: f64) -> Vec<(f64, f64)> {
    let step = 2.0 * h;
    let top = LN_WIDEST_WIDTH.max(reach.ln() + 5.0);
    let lo = (LN_NARROWEST_WIDTH / step).floor() as i64;
    let hi = (top / step).ceil() as i64;
    (lo..=hi)
        .map(|k| {
            let q = (k as f64 * step).exp();
            (q, step * q)
        })
        .collect()
}

/// The kernel of the box `[0, x] x [0, y]` at `(u, v)` as a function of `z`,
/// discretized at step `h`.
fn profile(model: WalkModel, case: KernelCase, x: f64, y: f64, u: f64, v: f64, h: f64) -> Profile {
    let (start, width) = travel(x, u);
    let laplace = |terms: Vec<(f64, f64)>| {
        let mut terms: Vec<(f64, f64)> = terms.into_iter().filter(|t| t.1 > 0.0).collect();
        terms.sort_by(|a, b| a.0.total_cmp(&b.0));
        if terms.is_empty() { Profile::Zero } else { Profile::Laplace(terms) }
    };
    match (model, case) {
        (WalkModel::ThreeN, KernelCase::Balanced) if width > 0.0 => laplace(
            travel_nodes(start, width, h)
                .into_iter()
                .map(|(tau, w)| (3.0 * tau, 1.5 * heat_strip(y, v, tau) * w))
                .collect(),
        ),
        (WalkModel::ThreeN, KernelCase::LinearInHeight) if width > 0.0 => laplace(
            travel_nodes(start, width, h)
                .into_iter()
                .map(|(tau, w)| (3.0 * tau, y * 1.5 / (PI * tau).sqrt() * (-v * v / (4.0 * tau)).exp() * w))
                .collect(),
        ),
        (WalkModel::ThreeN, KernelCase::VerticalStrip) if width > 0.0 && v > 0.0 && v < y => {
            Profile::Ramp { start, width }
        }
        (WalkModel::ThreeN, KernelCase::HorizontalStrip) if u > 0.0 && u < x => {
            Profile::Window { lo: -v, width: y, rate: 3f64.sqrt(), scale: 0.5 * 3f64.sqrt() }
        }
        (WalkModel::FourN, KernelCase::Balanced) => {
            let reach = (u - 0.5 * x).abs() + (v - 0.5 * y).abs() + 0.5 * (x + y);
            laplace(
                width_nodes(reach, h)
                    .into_iter()
                    .map(|(q, w)| (q * q, 0.5 * q * gauss_box(x, u, q) * gauss_box(y, v, q) * w))
                    .collect(),
            )
        }
        (WalkModel::FourN, KernelCase::LinearInHeight) => {
            let reach = (u - 0.5 * x).abs() + v.abs() + 0.5 * x;
            laplace(
                width_nodes(reach, h)
                    .into_iter()
                    .map(|(q, w)| (q * q, y / PI.sqrt() * (-v * v / (q * q)).exp() * gauss_box(x, u, q) * w))
                    .collect(),
            )
        }
        (WalkModel::FourN, KernelCase::VerticalStrip) if v > 0.0 && v < y => {
            Profile::Window { lo: -u, width: x, rate: 2.0, scale: 1.0 }
        }
        (WalkModel::FourN, KernelCase::HorizontalStrip) if u > 0.0 && u < x => {
            Profile::Window { lo: -v, width: y, rate: 2.0, scale: 1.0 }
        }
        _ => Profile::Zero,
    }
}

// ---------------------------------------------------------------------------
// the limit functional

/// Accuracy and scheduling of the limit functionals.
#[derive(Debug, Clone, Copy)]
pub struct FunctionalOptions {
    /// Relative agreement required between successive step halvings.
    pub tol: f64,
    pub exec: Exec,
}

impl Default for FunctionalOptions {
    fn default() -> Self {
        Self { tol: 1e-4, exec: Exec::default() }
    }
}

/// Spatial domain of a functional.
struct SpatialPlan {
    u: Axis,
    v: Axis,
    /// Length of an indicator support already integrated out.
    factor: f64,
}

fn spatial_plan(model: WalkModel, case: KernelCase, xs: &[(f64, f64)], ys: &[(f64, f64)]) -> SpatialPlan {
    let ub: Vec<f64> = xs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let vb: Vec<f64> = ys.iter().flat_map(|&(a, b)| [a, b]).collect();
    let span = |s: &[(f64, f64)]| s.iter().map(|p| p.1 - p.0).fold(0.0, f64::max);
    let (su, sv) = (span(xs), span(ys));
    let overlap = |spans: &[(f64, f64)]| -> (f64, f64) {
        let lo = spans.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        let hi = spans.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        (lo, hi.max(lo))
    };
    // a single box is symmetric about its centre line(s)
    let sym = |axis: Axis, spans: &[(f64, f64)]| {
        if spans.len() == 1 { axis.mirrored(0.5 * (spans[0].0 + spans[0].1)) } else { axis }
    };
    let horizontal = |model: WalkModel| match model {
        WalkModel::ThreeN => Axis::left(ub.clone(), su),
        WalkModel::FourN => sym(Axis::line(ub.clone(), su), xs),
    };
    match case {
        KernelCase::Balanced => SpatialPlan { u: horizontal(model), v: sym(Axis::line(vb, sv), ys), factor: 1.0 },
        KernelCase::LinearInHeight => {
            SpatialPlan { u: horizontal(model), v: Axis::line(vec![0.0], sv).mirrored(0.0).layered(), factor: 1.0 }
        }
        KernelCase::VerticalStrip => {
            let (lo, hi) = overlap(ys);
            SpatialPlan { u: horizontal(model), v: Axis::point(lo), factor: hi - lo }
        }
        KernelCase::HorizontalStrip => {
            let (lo, hi) = overlap(xs);
            SpatialPlan { u: Axis::point(lo), v: sym(Axis::line(vb, sv), ys), factor: hi - lo }
        }
    }
}

/// Strip cases keep the indicator's coordinate out of the kernel: move it
/// inside the strip of a box `[0, x] x [0, y]`.
fn strip_point(case: KernelCase, x: f64, y: f64, u: f64, v: f64) -> (f64, f64) {
    match case {
        KernelCase::VerticalStrip => (u, 0.5 * y),
        KernelCase::HorizontalStrip => (0.5 * x, v),
        _ => (u, v),
    }
}

/// Largest `z` node kept; past it the integrand has been reduced to below 1e-20
/// of its peak by subtracting the large-`z` model.
const LARGE_Z: f64 = 2.353_852_668_370_2e17; // e^40
/// Smallest `z` node kept; below it `z^(beta + 1) P(z)` is under e^-22.
const SMALL_Z: f64 = 1.928_749_847_963_918e-22; // e^-50

/// Leading large-`z` behaviour `coef z^{-power}` of `int F_1 ... F_k du dv`
/// where the `F_i` are kernels of boxes spanning `xs` by `ys`, raised to `powers`.
struct LargeZ {
    coef: f64,
    power: f64,
}

impl LargeZ {
    fn new(model: WalkModel, case: KernelCase, xs: &[(f64, f64)], ys: &[(f64, f64)], powers: &[f64]) -> Self {
        let meet = |s: &[(f64, f64)]| {
            let lo = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let hi = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            (hi - lo).max(0.0)
        };
        let total: f64 = powers.iter().sum();
        match case {
            // inside the box the kernel tends to 1/z
            KernelCase::Balanced | KernelCase::VerticalStrip | KernelCase::HorizontalStrip => {
                Self { coef: meet(xs) * meet(ys), power: total }
            }
            // y c z^{-1/2} e^{-k sqrt(z) |v|} across the horizontal span
            KernelCase::LinearInHeight => {
                let (c, k) = match model {
                    WalkModel::ThreeN => (0.5 * 3f64.sqrt(), 3f64.sqrt()),
                    WalkModel::FourN => (1.0, 2.0),
                };
                let heights: f64 = ys.iter().zip(powers).map(|(&(a, b), &p)| (b - a).powf(p)).product();
                Self { coef: meet(xs) * heights * c.powf(total) * 2.0 / (k * total), power: 0.5 * (total + 1.0) }
            }
        }
    }

    /// `coef (1 + z)^{-power}`: same decay, bounded at 0.
    fn model(&self, z: f64) -> f64 {
        self.coef * (1.0 + z).powf(-self.power)
    }

    /// `int_0^inf phi1 z^beta model(z) dz`.
    fn integral(&self, control: ControlMeasure) -> f64 {
        control.phi1 * self.coef * beta_fn(control.beta + 1.0, self.power - control.beta - 1.0)
    }
}

/// `int phi1 z^beta integrand(profiles at (u, v), z) du dv dz` at step `h`.
///
/// The spatial sums are formed per `z` node so that the slowly decaying
/// large-`z` model can be subtracted before the `z` sum and added back exactly.
fn tensor_sum(
    plan: &SpatialPlan,
    control: ControlMeasure,
    tail: &LargeZ,
    h: f64,
    exec: Exec,
    profiles: &(dyn Fn(f64, f64, f64) -> Vec<Profile> + Sync),
    combine: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> f64 {
    let un = plan.u.nodes(h);
    let vn = plan.v.nodes(h);
    let zn: Vec<(f64, f64)> = de_half(1.0, h)
        .into_iter()
        .filter(|&(z, w)| (SMALL_Z..=LARGE_Z).contains(&z) && w > 0.0)
        .map(|(z, w)| (z, w * control.density(z)))
        .collect();
    let rows = exec.map(un.len(), |i| {
        let (u, wu) = un[i];
        let mut row = vec![0.0; zn.len()];
        let mut vals = Vec::new();
        for &(v, wv) in &vn {
            let ps = profiles(u, v, h);
            if ps.contains(&Profile::Zero) {
                continue;
            }
            for (k, &(z, _)) in zn.iter().enumerate() {
                vals.clear();
                vals.extend(ps.iter().map(|p| p.eval(z)));
                let c = combine(&vals);
                if c.is_finite() {
                    row[k] += wu * wv * c;
                }
            }
        }
        row
    });
    let mut total = tail.integral(control);
    for (k, &(z, wz)) in zn.iter().enumerate() {
        let spatial: f64 = plan.factor * rows.iter().map(|r| r[k]).sum::<f64>();
        total += wz * (spatial - tail.model(z));
    }
    total
}

/// Halve the step until two successive tensor sums agree to `tol`.
fn refine(tol: f64, mut at: impl FnMut(f64) -> f64) -> Result<Estimate> {
    let mut h = FIRST_STEP;
    let mut prev = at(h);
    let mut evals = 1;
    loop {
        h *= 0.5;
        let cur = at(h);
        evals += 1;
        let err = (cur - prev).abs();
        if h <= 0.125 && err <= tol * cur.abs() {
            return Ok(Estimate { value: cur, error: err, evals, converged: true });
        }
        if h <= LAST_STEP || !cur.is_finite() {
            return Err(Error::Numerical(format!(
                "limit functional did not settle: successive values {prev} and {cur} at step {h}"
            )));
        }
        prev = cur;
    }
}

/// The 4N vertical-strip kernel decays only like `e^{-2 sqrt(z) |u|} / sqrt(z)`, so
/// its functionals diverge at small `z` unless `beta > (alpha - 1)/2`.
fn check_finite(spec: &StableLimitSpec) -> Result<()> {
    let edge = 0.5 * (spec.alpha - 1.0);
    if spec.model == WalkModel::FourN && spec.kernel_case() == KernelCase::VerticalStrip && spec.mixing.beta <= edge {
        return domain(format!(
            "4N functional with gamma = {} > 1 diverges for beta = {} <= (alpha - 1)/2 = {edge}",
            spec.gamma, spec.mixing.beta
        ));
    }
    Ok(())
}

/// `J(x, y) = int F(x, y; u, v, z)^alpha phi1 z^beta du dv dz`, the exponent of
/// the characteristic function of the limit field at `(x, y)`.
pub fn limit_functional(spec: &StableLimitSpec, x: f64, y: f64, opts: FunctionalOptions) -> Result<Estimate> {
    if !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()) {
        return domain(format!("box sides ({x}, {y}) must be positive"));
    }
    check_finite(spec)?;
    let case = spec.kernel_case();
    let model = spec.model;
    let alpha = spec.alpha;
    let plan = spatial_plan(model, case, &[(0.0, x)], &[(0.0, y)]);
    let profiles = |u: f64, v: f64, h: f64| {
        let (u, v) = strip_point(case, x, y, u, v);
        vec![profile(model, case, x, y, u, v, h)]
    };
    let combine = |f: &[f64]| f[0].powf(alpha);
    let tail = LargeZ::new(model, case, &[(0.0, x)], &[(0.0, y)], &[alpha]);
    refine(opts.tol, |h| tensor_sum(&plan, spec.control(), &tail, h, opts.exec, &profiles, &combine))
}

/// `int F_K F_K' d(mu)`: the covariance-type overlap of the kernels of two
/// rectangles. It vanishes identically when the kernels have disjoint supports.
pub fn kernel_overlap(spec: &StableLimitSpec, k: &Rectangle, k2: &Rectangle, opts: FunctionalOptions) -> Result<f64> {
    check_finite(spec)?;
    let case = spec.kernel_case();
    let xs = [(k.lo.0, k.hi.0), (k2.lo.0, k2.hi.0)];
    let ys = [(k.lo.1, k.hi.1), (k2.lo.1, k2.hi.1)];
    let disjoint = |a: (f64, f64), b: (f64, f64)| a.1 <= b.0 || b.1 <= a.0;
    match case {
        KernelCase::VerticalStrip if disjoint(ys[0], ys[1]) => return Ok(0.0),
        KernelCase::HorizontalStrip if disjoint(xs[0], xs[1]) => return Ok(0.0),
        _ => {}
    }
    let model = spec.model;
    let plan = spatial_plan(model, case, &xs, &ys);
    let (k, k2) = (*k, *k2);
    let one = move |r: &Rectangle, u: f64, v: f64, h: f64| {
        let (w, ht) = (r.hi.0 - r.lo.0, r.hi.1 - r.lo.1);
        // the linear case does not see the rectangle's vertical position
        let dv = if case == KernelCase::LinearInHeight { 0.0 } else { r.lo.1 };
        let (uu, vv) = strip_point(case, w, ht, u - r.lo.0, v - dv);
        profile(model, case, w, ht, uu, vv, h)
    };
    let profiles = |u: f64, v: f64, h: f64| vec![one(&k, u, v, h), one(&k2, u, v, h)];
    let combine = |f: &[f64]| f[0] * f[1];
    // the linear case lines both boxes up at v = 0
    let ys_tail = if case == KernelCase::LinearInHeight { [(0.0, ys[0].1 - ys[0].0), (0.0, ys[1].1 - ys[1].0)] } else { ys };
    let tail = LargeZ::new(model, case, &xs, &ys_tail, &[1.0, 1.0]);
    Ok(refine(opts.tol, |h| tensor_sum(&plan, spec.control(), &tail, h, opts.exec, &profiles, &combine))?.value)
}

/// `J(x, y)` for `alpha = 2` on the balanced exponent from the limit covariance:
/// `int_{[0,x]^2 x [0,y]^2} r(t - t', s - s')`, an independent route to
/// [`limit_functional`].
pub fn limit_functional_gaussian(spec: &StableLimitSpec, x: f64, y: f64) -> Result<f64> {
    if spec.alpha != 2.0 || spec.kernel_case() != KernelCase::Balanced {
        return domain("the covariance route needs alpha = 2 and the balanced aspect exponent");
    }
    let control = spec.control();
    let model = spec.model;
    let inner_tol = Tol::new(1e-300, 1e-11);
    let failure = Cell::new(None);
    let outer = tanh_sinh(
        |p| {
            let brk = match model {
                WalkModel::ThreeN => p.sqrt(),
                WalkModel::FourN => p,
            };
            let f = |q: f64| (y - q) * covariance_limit_value(model, control, p, q);
            let est = if brk < y {
                let a = tanh_sinh(f, 0.0, brk, inner_tol);
                let b = tanh_sinh(f, brk, y, inner_tol);
                Estimate { value: a.value + b.value, error: a.error + b.error, evals: 0, converged: a.converged && b.converged }
            } else {
                tanh_sinh(f, 0.0, y, inner_tol)
            };
            if !est.converged && est.error > 1e-8 * est.value.abs() {
                failure.set(Some(est.error));
            }
            (x - p) * est.value
        },
        0.0,
        x,
        Tol::rel(1e-10),
    );
    if let Some(e) = failure.get().filter(|_| !outer.converged) {
        return Err(Error::Numerical(format!("covariance route did not converge (inner error {e:e})")));
    }
    Ok(4.0 * outer.value)
}

// ---------------------------------------------------------------------------
// covariance

/// `lim lambda^{...} r(lambda t, lambda^{gamma0} s)` with unit innovation variance.
fn covariance_limit_value(model: WalkModel, control: ControlMeasure, t: f64, s: f64) -> f64 {
    let beta = control.beta;
    let (t, s) = (t.abs(), s.abs());
    match model {
        WalkModel::FourN => control.phi1 * gamma(beta + 1.0) * gamma(beta) / PI * (t * t + s * s).powf(-beta),
        WalkModel::ThreeN => {
            let c3 = three_n_cov_constant(control);
            if s == 0.0 {
                c3 * 4f64.powf(-0.5 - beta) / (0.5 + beta) * t.powf(-beta - 0.5)
            } else if t == 0.0 {
                c3 * s.powf(-2.0 * beta - 1.0) * gamma(beta + 0.5)
            } else {
                let inc = lower_incomplete_gamma(beta + 0.5, s * s / (4.0 * t)).unwrap_or(f64::NAN);
                c3 * s.powf(-2.0 * beta - 1.0) * inc
            }
        }
    }
}

fn three_n_cov_constant(control: ControlMeasure) -> f64 {
    let beta = control.beta;
    PI.powf(-0.5) * 2f64.powf(2.0 * beta - 1.0) * 3f64.powf(1.0 - beta) * control.phi1 * gamma(beta + 1.0)
}

/// Large-lag limit of the scaled covariance at direction `(t, s)`.
pub fn covariance_limit(model: WalkModel, mixing: &MixingLaw, t: f64, s: f64) -> Result<f64> {
    if (t == 0.0 && s == 0.0) || !t.is_finite() || !s.is_finite() {
        return domain(format!("direction ({t}, {s}) must be finite and nonzero"));
    }
    Ok(covariance_limit_value(model, ControlMeasure { phi1: mixing.phi1, beta: mixing.beta }, t, s))
}

/// Exponent `kappa` with `lambda^kappa r(...)` converging.
fn covariance_scaling(model: WalkModel, beta: f64) -> f64 {
    match model {
        WalkModel::ThreeN => beta + 0.5,
        WalkModel::FourN => 2.0 * beta,
    }
}

/// `R^{|t|} sum` pieces of `sum_u ghat(t+u) ghat(u)` for the line transform.
pub(crate) fn lag_sum(model: WalkModel, ls: LineSymbol, t: u64) -> f64 {
    let omr = ls.one_minus_ratio;
    let r = ls.ratio;
    let rt = if t == 0 { 1.0 } else { (t as f64 * (-omr).ln_1p()).exp() };
    let one_minus_r2 = omr * (1.0 + r);
    match model {
        WalkModel::ThreeN => rt / one_minus_r2,
        WalkModel::FourN => rt * (t as f64 + (1.0 + r * r) / one_minus_r2),
    }
}

/// Nodes and weights for `int_0^pi cos(s y) phi(y) dy` with `phi` singular at 0.
fn cosine_rule(cells: u64) -> Vec<(f64, f64)> {
    let width = PI / cells.max(1) as f64;
    let mut out = tanh_sinh_rule(0.0, width, 1.0 / 8.0, SMALLEST_FREQUENCY);
    let gl = GaussLegendre::new(16);
    for k in 1..cells.max(1) {
        let a = k as f64 * width;
        out.extend(gl.mapped(a, (a + width).min(PI)));
    }
    out
}

/// Frequencies below this are dropped: the integrands grow at most like
/// `y^{2 beta - 1}`, so the loss is of order `1e-100^{2 beta}`, and the
/// coefficient integral can still be split at `gap = y^2`.
const SMALLEST_FREQUENCY: f64 = 1e-100;

const MIXING_TOL: Tol = Tol::new(1e-300, 1e-10);

/// Covariance `r(t, s) = E X(t, s) X(0, 0)` of the aggregated Gaussian field with
/// unit innovation variance, from the line transform of the Green function.
pub fn covariance(model: WalkModel, mixing: &MixingLaw, t: i64, s: i64, exec: Exec) -> Result<f64> {
    let cells = (t.unsigned_abs().max(s.unsigned_abs()) + 1).min(1 << 16);
    let rule = cosine_rule(cells);
    let lag = t.unsigned_abs();
    let values = exec.map(rule.len(), |i| {
        let (y, w) = rule[i];
        let est = mixing.expect_split(
            |gap| {
                let ls = model.line_symbol(gap, y);
                ls.amp * ls.amp * lag_sum(model, ls, lag)
            },
            y * y,
            MIXING_TOL,
        );
        (w * (s as f64 * y).cos() * est.value, est)
    });
    check_mixing(values.iter().map(|v| v.1))?;
    Ok(values.iter().map(|v| v.0).sum::<f64>() / PI)
}

fn check_mixing(ests: impl Iterator<Item = Estimate>) -> Result<()> {
    for e in ests {
        if !e.value.is_finite() || (!e.converged && e.error > 1e-5 * e.value.abs()) {
            return Err(Error::Numerical(format!(
                "mixing expectation did not converge: value {} error {:e}",
                e.value, e.error
            )));
        }
    }
    Ok(())
}

/// One rung of a covariance ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovRow {
    pub lambda: f64,
    pub lag_t: i64,
    pub lag_s: i64,
    pub scaled: f64,
    pub limit: f64,
    pub rel_err: f64,
}

/// Scaled covariances against their large-lag limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovLadder {
    pub model: WalkModel,
    pub beta: f64,
    pub t: f64,
    pub s: f64,
    pub rows: Vec<CovRow>,
}

impl CovLadder {
    pub fn non_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].rel_err <= w[0].rel_err)
    }

    pub fn final_rel_err(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.rel_err)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "lambda,lag_t,lag_s,scaled,limit,rel_err")?;
        for r in &self.rows {
            writeln!(out, "{},{},{},{:.12e},{:.12e},{:.6e}", r.lambda, r.lag_t, r.lag_s, r.scaled, r.limit, r.rel_err)?;
        }
        Ok(())
    }
}

/// Compare `lambda^kappa r([lambda t], [lambda^{gamma0} s])` with its limit along `lambdas`.
pub fn cov_asymptotics(
    model: WalkModel,
    mixing: &MixingLaw,
    t: f64,
    s: f64,
    lambdas: &[f64],
    exec: Exec,
) -> Result<CovLadder> {
    if !(mixing.beta < 1.0) {
        return domain(format!("Gaussian aggregation needs beta < 1, got {}", mixing.beta));
    }
    let limit = covariance_limit(model, mixing, t, s)?;
    let kappa = covariance_scaling(model, mixing.beta);
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if !(lambda >= 1.0 && lambda.is_finite()) {
            return domain(format!("scale {lambda} must be at least 1"));
        }
        let lag_t = (lambda * t).floor() as i64;
        let lag_s = (lambda.powf(model.gamma0()) * s).floor() as i64;
        if lag_t == 0 && lag_s == 0 {
            return Err(Error::Resource(format!(
                "scale {lambda} maps direction ({t}, {s}) to the zero lag; use larger scales"
            )));
        }
        let scaled = lambda.powf(kappa) * covariance(model, mixing, lag_t, lag_s, exec)?;
        rows.push(CovRow { lambda, lag_t, lag_s, scaled, limit, rel_err: (scaled / limit - 1.0).abs() });
    }
    Ok(CovLadder { model, beta: mixing.beta, t, s, rows })
}

// ---------------------------------------------------------------------------
// the lattice prelimit

/// How [`discrete_functional`] evaluates the lattice sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeRoute {
    /// Line transform for `alpha = 2`, lattice grids otherwise.
    #[default]
    Auto,
    /// Parseval in the vertical coordinate; exact, `alpha = 2` only.
    LineTransform,
    /// Box sums on periodic Green grids.
    Grid,
}

/// Budget and accuracy for [`discrete_functional`].
#[derive(Debug, Clone, Copy)]
pub struct DiscreteOptions {
    /// Largest horizontal box side accepted.
    pub max_n: u64,
    /// Cell budget per Green grid.
    pub max_cells: usize,
    /// Aliasing tolerance of a Green grid value.
    pub grid_tol: f64,
    /// Relative accuracy of the integral over the coefficient.
    pub tol: f64,
    pub route: LatticeRoute,
    pub exec: Exec,
}

impl Default for DiscreteOptions {
    fn default() -> Self {
        Self { max_n: 256, max_cells: 1 << 20, grid_tol: 1e-11, tol: 1e-6, route: LatticeRoute::Auto, exec: Exec::default() }
    }
}

/// Value of the lattice functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteValue {
    pub n: u64,
    pub value: f64,
    /// Share of the value extrapolated below the smallest coefficient gap a grid
    /// could resolve (0 on the line-transform route).
    pub tail_fraction: f64,
}

/// `sum_u (sum_{t=1}^n ghat(t - u))^2` with `ghat(t) = ratio^{|t|}` (one-sided for 3N).
fn box_line_energy(model: WalkModel, ls: LineSymbol, n: u64) -> f64 {
    let omr = ls.one_minus_ratio;
    let r = ls.ratio;
    let ln_r = (-omr).ln_1p();
    let geo = |j: u64| -> f64 {
        if omr >= 1.0 { 1.0 } else { -(j as f64 * ln_r).exp_m1() / omr }
    };
    let full = geo(n);
    let far = (full * r) * (full * r) / (omr * (1.0 + r));
    match model {
        WalkModel::ThreeN => (1..=n).map(|j| geo(j) * geo(j)).sum::<f64>() + far,
        WalkModel::FourN => {
            let mut sum = 0.0;
            for u in 1..=n {
                let t = geo(u) + geo(n - u + 1) - 1.0;
                sum += t * t;
            }
            sum + 2.0 * far
        }
    }
}

/// `y`-nodes of `(1/2 pi) int D_m^2(y) phi(y) dy` for even `phi`, folded onto `y > 0`.
fn folded_fejer(m: u64) -> Vec<(f64, f64)> {
    let rule = fejer_rule(m);
    rule.nodes
        .iter()
        .zip(&rule.re)
        .filter(|(&y, _)| y > SMALLEST_FREQUENCY)
        .map(|(&y, &w)| (y, 2.0 * w / (2.0 * PI)))
        .collect()
}

/// `sum_{(u,v)} G(u, v, a)^2` for one coefficient gap, `G` the box sum of `g`.
fn box_energy(model: WalkModel, gap: f64, n: u64, rule: &[(f64, f64)]) -> f64 {
    rule.iter()
        .map(|&(y, w)| {
            let ls = model.line_symbol(gap, y);
            w * ls.amp * ls.amp * box_line_energy(model, ls, n)
        })
        .sum()
}

/// `n^{-alpha H} sum_{(u,v)} E G_n(u, v, A)^alpha`, the lattice functional that
/// converges to [`limit_functional`] at `(1, 1)`.
pub fn discrete_functional(spec: &StableLimitSpec, n: u64, opts: DiscreteOptions) -> Result<DiscreteValue> {
    if n == 0 {
        return domain("box side n must be positive");
    }
    if n > opts.max_n {
        return Err(Error::Resource(format!("box side {n} exceeds the configured cap {}", opts.max_n)));
    }
    let route = match opts.route {
        LatticeRoute::Auto if spec.alpha == 2.0 => LatticeRoute::LineTransform,
        LatticeRoute::Auto => LatticeRoute::Grid,
        r => r,
    };
    let m = box_height(n, spec.gamma);
    let norm = (n as f64).powf(-spec.alpha * spec.law().h);
    match route {
        LatticeRoute::LineTransform => {
            if spec.alpha != 2.0 {
                return domain("the line-transform route needs alpha = 2");
            }
            let rule = folded_fejer(m);
            let model = spec.model;
            let tol = Tol::new(1e-300, opts.tol * 1e-3);
            let values = opts.exec.map(rule.len(), |i| {
                let (y, w) = rule[i];
                let est = spec.mixing.expect_split(
                    |gap| {
                        let ls = model.line_symbol(gap, y);
                        ls.amp * ls.amp * box_line_energy(model, ls, n)
                    },
                    y * y,
                    tol,
                );
                (w * est.value, est)
            });
            check_mixing(values.iter().map(|v| v.1))?;
            let total: f64 = values.iter().map(|v| v.0).sum();
            Ok(DiscreteValue { n, value: norm * total, tail_fraction: 0.0 })
        }
        _ => grid_functional(spec, n, m, opts).map(|(main, tail)| DiscreteValue {
            n,
            value: norm * (main + tail),
            tail_fraction: tail / (main + tail),
        }),
    }
}

/// Grid side needed for box sums at this gap.
fn grid_shape(model: WalkModel, gap: f64, n: u64, m: u64, tol: f64) -> (usize, usize) {
    let half = (n.max(m) as usize).next_power_of_two();
    fft_extent(model, gap, half, tol)
}

/// `sum G^alpha` over a periodic grid for one gap.
fn grid_power_sum(model: WalkModel, gap: f64, n: u64, m: u64, alpha: f64, opts: &DiscreteOptions) -> Result<f64> {
    let (m_t, m_s) = grid_shape(model, gap, n, m, opts.grid_tol);
    if m_t.saturating_mul(m_s) > opts.max_cells {
        return Err(Error::Resource(format!("Green grid {m_t} x {m_s} exceeds the cell budget {}", opts.max_cells)));
    }
    let g = invert_on_grid(model, gap, m_t, m_s, opts.exec);
    // window sums over s = 1..m, then over t = 1..n, cyclically
    let (n, m) = (n as usize, m as usize);
    let mut rows = vec![0.0; m_t * m_s];
    opts.exec.for_chunks(&mut rows, m_s, |i, out| {
        let row = &g[i * m_s..(i + 1) * m_s];
        // out[v] = sum_{s=1}^m g(i, s - v)
        let mut acc: f64 = (1..=m).map(|s| row[s % m_s]).sum();
        for (v, o) in out.iter_mut().enumerate() {
            *o = acc;
            // shift v -> v + 1: drop s - v = m - v, add s - v = -v
            let drop = (m as i64 - v as i64).rem_euclid(m_s as i64) as usize;
            let add = (-(v as i64)).rem_euclid(m_s as i64) as usize;
            acc += row[add] - row[drop];
        }
    });
    let alpha_sum = opts.exec.map(m_s, |v| {
        let col = |t: usize| rows[t * m_s + v];
        let mut acc: f64 = (1..=n).map(|t| col(t % m_t)).sum();
        let mut s = 0.0;
        for u in 0..m_t {
            s += acc.max(0.0).powf(alpha);
            let drop = (n as i64 - u as i64).rem_euclid(m_t as i64) as usize;
            let add = (-(u as i64)).rem_euclid(m_t as i64) as usize;
            acc += col(add) - col(drop);
        }
        s
    });
    Ok(alpha_sum.iter().sum())
}

/// Smallest gap whose grid fits the budget.
fn smallest_gap(model: WalkModel, n: u64, m: u64, opts: &DiscreteOptions) -> Result<f64> {
    let fits = |gap: f64| {
        let (a, b) = grid_shape(model, gap, n, m, opts.grid_tol);
        a.saturating_mul(b) <= opts.max_cells
    };
    if !fits(1.0) {
        return Err(Error::Resource(format!("box {n} x {m} does not fit the cell budget {}", opts.max_cells)));
    }
    let (mut lo, mut hi) = (-40.0f64, 0.0f64);
    if fits(lo.exp()) {
        return Ok(lo.exp());
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if fits(mid.exp()) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi.exp())
}

/// `(main, tail)` parts of `sum E G^alpha` on the grid route.
///
/// Gaps too small for the grid are covered by `rho U(gap)`, where
/// `U = (sum G)^{2-alpha} (sum G^2)^{alpha-1}` bounds `sum G^alpha` by
/// interpolation, both sums are exact, and `rho` is the ratio at the smallest
/// resolved gap; the ratio is scale free once the Green function is much wider
/// than the box.
fn grid_functional(spec: &StableLimitSpec, n: u64, m: u64, opts: DiscreteOptions) -> Result<(f64, f64)> {
    let model = spec.model;
    let alpha = spec.alpha;
    let gap_min = smallest_gap(model, n, m, &opts)?;
    let mass = (n * m) as f64;
    let rule = folded_fejer(m);
    let bound = |gap: f64| (mass / gap).powf(2.0 - alpha) * box_energy(model, gap, n, &rule).powf(alpha - 1.0);
    let mixing = &spec.mixing;
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let main = gauss_kronrod(
        |lg: f64| {
            let gap = lg.exp();
            match grid_power_sum(model, gap, n, m, alpha, &opts) {
                Ok(v) => mixing.density(1.0 - gap) * gap * v,
                Err(e) => {
                    failure.lock().unwrap().get_or_insert(e);
                    0.0
                }
            }
        },
        gap_min.ln(),
        0.0,
        &[],
        Tol::new(1e-300, opts.tol),
        64,
    );
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    if !main.converged {
        return Err(Error::Numerical(format!(
            "coefficient integral on the grid route reached {:e}, target {:e}",
            main.error / main.value.abs(),
            opts.tol
        )));
    }
    let at_min = grid_power_sum(model, gap_min, n, m, alpha, &opts)?;
    let rho = at_min / bound(gap_min);
    let tail = if gap_min <= 0.0 {
        0.0
    } else {
        rho * exp_sinh(
            |r| {
                let gap = gap_min * (-r).exp();
                mixing.density(1.0 - gap) * gap * bound(gap)
            },
            0.0,
            1.0 / spec.mixing.beta,
            Tol::new(1e-300, 1e-6),
        )
        .value
    };
    Ok((main.value, tail))
}

/// Characteristic function at `theta` of `n^{-H} S_n` for the aggregate of
/// `n_components` independent components with unit stable innovations,
///
/// `(E exp(-|theta|^alpha n^{-alpha H} sum_u G_u(A)^alpha / N))^N`,
///
/// where `G_u(A)` is the box sum of the Green function seen from `u`. It tends to
/// `exp(-|theta|^alpha J_n)` as `N` grows. Gaps below the grid's reach use the
/// same interpolation bound as [`discrete_functional`]; their share is at most
/// `P(1 - A < gap_min)`.
pub fn aggregate_cf(
    spec: &StableLimitSpec,
    n: u64,
    n_components: usize,
    theta: f64,
    opts: DiscreteOptions,
) -> Result<f64> {
    if n == 0 || n_components == 0 {
        return domain("box side and component count must be positive");
    }
    if n > opts.max_n {
        return Err(Error::Resource(format!("box side {n} exceeds the configured cap {}", opts.max_n)));
    }
    let (model, alpha) = (spec.model, spec.alpha);
    let m = box_height(n, spec.gamma);
    let scale = theta.abs().powf(alpha) * (n as f64).powf(-alpha * spec.law().h) / n_components as f64;
    if scale == 0.0 {
        return Ok(1.0);
    }
    let gap_min = smallest_gap(model, n, m, &opts)?;
    let mixing = &spec.mixing;
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let main = gauss_kronrod(
        |lg: f64| {
            let gap = lg.exp();
            match grid_power_sum(model, gap, n, m, alpha, &opts) {
                Ok(v) => mixing.density(1.0 - gap) * gap * -(-scale * v).exp_m1(),
                Err(e) => {
                    failure.lock().unwrap().get_or_insert(e);
                    0.0
                }
            }
        },
        gap_min.ln(),
        0.0,
        &[],
        Tol::new(1e-300, opts.tol),
        64,
    );
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    if !main.converged {
        return Err(Error::Numerical(format!("coefficient integral stalled at error {:e}", main.error)));
    }
    let mass = (n * m) as f64;
    let rule = folded_fejer(m);
    let bound = |gap: f64| (mass / gap).powf(2.0 - alpha) * box_energy(model, gap, n, &rule).powf(alpha - 1.0);
    let rho = grid_power_sum(model, gap_min, n, m, alpha, &opts)? / bound(gap_min);
    let tail = exp_sinh(
        |r| {
            let gap = gap_min * (-r).exp();
            mixing.density(1.0 - gap) * gap * -(-scale * rho * bound(gap)).exp_m1()
        },
        0.0,
        1.0 / mixing.beta,
        Tol::new(1e-300, 1e-8),
    )
    .value;
    Ok((n_components as f64 * (-(main.value + tail)).ln_1p()).exp())
}

// ---------------------------------------------------------------------------
// reports

/// One rung of a lattice ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub n: u64,
    pub value: f64,
    pub rel_gap: f64,
}

/// JSON summary of a limit-theorem run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StableReport {
    pub model: WalkModel,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub regime: Regime,
    #[serde(rename = "J_gamma")]
    pub j_gamma: f64,
    #[serde(rename = "J_n")]
    pub j_n: Vec<LadderRow>,
}

impl StableReport {
    /// Gaps non-increasing along the ladder.
    pub fn monotone(&self) -> bool {
        self.j_n.windows(2).all(|w| w[1].rel_gap <= w[0].rel_gap)
    }

    pub fn final_gap(&self) -> f64 {
        self.j_n.last().map_or(f64::NAN, |r| r.rel_gap)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,value,rel_gap")?;
        for r in &self.j_n {
            writeln!(out, "{},{:.12e},{:.6e}", r.n, r.value, r.rel_gap)?;
        }
        Ok(())
    }
}

/// Evaluate the limit functional and the lattice ladder over `ns`.
pub fn functional_ladder(
    spec: &StableLimitSpec,
    ns: &[u64],
    limit_opts: FunctionalOptions,
    opts: DiscreteOptions,
) -> Result<StableReport> {
    let j = limit_functional(spec, 1.0, 1.0, limit_opts)?.value;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let v = discrete_functional(spec, n, opts)?.value;
        rows.push(LadderRow { n, value: v, rel_gap: (v / j - 1.0).abs() });
    }
    let law = spec.law();
    Ok(StableReport {
        model: spec.model,
        alpha: spec.alpha,
        beta: spec.mixing.beta,
        gamma: spec.gamma,
        h: law.h,
        regime: law.regime,
        j_gamma: j,
        j_n: rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(model: WalkModel, alpha: f64, beta: f64, gamma: f64) -> StableLimitSpec {
        StableLimitSpec::standard(model, alpha, beta, gamma).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a / b - 1.0).abs()
    }

    #[test]
    fn exponent_tables() {
        let h = |m, a, b, g| exponent_law(m, a, b, g).unwrap().h;
        assert!((h(WalkModel::ThreeN, 2.0, 0.4, 0.5) - 1.05).abs() < 1e-14);
        assert!((h(WalkModel::ThreeN, 2.0, 0.6, 0.25) - 0.725).abs() < 1e-14);
        assert!((h(WalkModel::FourN, 2.0, 0.4, 1.0) - 1.6).abs() < 1e-14);
        // below the planar edge both models carry alpha gamma in the numerator
        assert!((h(WalkModel::ThreeN, 2.0, 0.2, 0.25) - (0.5 + 1.5 - 0.2) / 2.0).abs() < 1e-14);
        assert!((h(WalkModel::FourN, 2.0, 0.2, 0.5) - (1.0 + 2.0 - 0.4) / 2.0).abs() < 1e-14);
        assert_eq!(exponent_law(WalkModel::FourN, 2.0, 0.3, 2.0).unwrap().regime, Regime::AbovePlanar);
        assert_eq!(exponent_law(WalkModel::ThreeN, 2.0, 0.3, 0.5).unwrap().regime, Regime::Balanced);
    }

    #[test]
    fn excluded_line_is_rejected() {
        assert!(exponent_law(WalkModel::ThreeN, 2.0, 0.5, 0.25).is_err());
        assert!(exponent_law(WalkModel::FourN, 1.5, 0.25, 0.5).is_err());
        assert!(StableLimitSpec::standard(WalkModel::FourN, 2.0, 0.5, 0.9).is_err());
        // on or above the balance point the line is harmless
        assert!(exponent_law(WalkModel::ThreeN, 2.0, 0.5, 0.5).is_ok());
        assert!(exponent_law(WalkModel::FourN, 2.0, 0.5, 3.0).is_ok());
        // outside 0 < beta < alpha - 1 < 1
        assert!(exponent_law(WalkModel::ThreeN, 2.0, 1.0, 1.0).is_err());
        assert!(exponent_law(WalkModel::ThreeN, 1.0, 0.0, 1.0).is_err());
        assert!(exponent_law(WalkModel::FourN, 2.5, 0.3, 1.0).is_err());
    }

    #[test]
    fn mixing_laws() {
        let std = MixingLaw::standard(0.3).unwrap();
        assert!((std.phi1() - 1.3).abs() < 1e-15);
        assert!((std.expect(|_| 1.0, Tol::rel(1e-13)).value - 1.0).abs() < 1e-12);
        assert!(MixingLaw::standard(0.0).is_err());

        // (1 - a)^beta (1 + a), normalized; slope 2c at a = 1
        let beta = 0.4;
        let c = 1.0 / (1.0 / (beta + 1.0) + 1.0 / ((beta + 1.0) * (beta + 2.0)));
        let law = MixingLaw::custom(beta, 2.0 * c, move |a: f64| c * (1.0 - a).powf(beta) * (1.0 + a)).unwrap();
        assert!(!law.is_standard());
        assert!((law.slope_ratio(1e-6) - 1.0).abs() < 1e-5);
        let mean = law.expect(|gap| 1.0 - gap, Tol::rel(1e-12)).value;
        let exact = c * (1.0 / ((beta + 1.0) * (beta + 2.0)) + 2.0 / ((beta + 1.0) * (beta + 2.0) * (beta + 3.0)));
        assert!(rel(mean, exact) < 1e-10, "{mean} {exact}");

        assert!(MixingLaw::custom(beta, 2.0 * c, move |a: f64| 1.1 * c * (1.0 - a).powf(beta) * (1.0 + a)).is_err());
        assert!(MixingLaw::custom(beta, c, move |a: f64| c * (1.0 - a).powf(beta) * (1.0 + a)).is_err());
        assert!(MixingLaw::custom(beta, 1.0, |a: f64| if a < 0.5 { -1.0 } else { 3.0 }).is_err());
    }

    #[test]
    fn erf_windows() {
        for &a in &[-6.0, -2.0, -0.3, 0.0, 0.4, 1.5, 3.0] {
            for &d in &[1e-9, 1e-5, 1e-3, 0.1, 1.0, 4.0] {
                let direct = erf(a + d) - erf(a);
                let w = erf_window(a, d);
                // the direct difference loses digits for narrow windows
                assert!((w - direct).abs() <= 1e-10 * w + 4e-16, "a={a} d={d} {w} {direct}");
            }
        }
        // deep tails, where the difference of erf values is all rounding
        let w = erf_window(8.0, 0.5);
        assert!(rel(w, erfc(8.0) - erfc(8.5)) < 1e-13);
        assert!(rel(erf_window(-9.0, 0.25), erfc(8.75) - erfc(9.0)) < 1e-13);
        assert_eq!(erf_window(1.0, 0.0), 0.0);
    }

    #[test]
    fn exp_windows() {
        let c = 1.7;
        for &(lo, width) in &[(-3.0, 1.0), (-0.5, 2.0), (0.25, 0.5), (-40.0, 0.01)] {
            let q = gauss_kronrod(|r: f64| (-c * r.abs()).exp(), lo, lo + width, &[0.0], Tol::rel(1e-14), 100).value;
            assert!(rel(exp_window(c, lo, width), q) < 1e-12, "{lo} {width}");
        }
    }

    #[test]
    fn kernels_match_direct_quadrature() {
        // values from two-dimensional quadrature of h3 and of (2/pi) K0
        let k4 = spec(WalkModel::FourN, 2.0, 0.3, 1.0);
        let k3 = spec(WalkModel::ThreeN, 2.0, 0.3, 0.5);
        let cases = [
            (limit_kernel(&k4, 1.0, 1.0, 0.5, 0.5, 1.0), 0.446_760_498_246_554_85),
            (limit_kernel(&k4, 1.0, 1.0, -2.0, 3.0, 0.5), 0.002_554_941_996_990_711_5),
            (limit_kernel(&k3, 1.0, 1.0, 0.25, 0.5, 1.0), 0.550_636_246_025_708_6),
            (
                limit_kernel(&spec(WalkModel::ThreeN, 2.0, 0.3, 0.25), 1.0, 1.0, -0.5, 0.3, 0.7),
                0.135_754_319_335_673_17,
            ),
            (
                limit_kernel(&spec(WalkModel::FourN, 2.0, 0.3, 0.5), 1.0, 1.0, 0.2, 0.4, 2.0),
                0.143_304_570_344_346_34,
            ),
        ];
        for (i, (got, want)) in cases.into_iter().enumerate() {
            let got = got.unwrap();
            assert!(rel(got, want) < 1e-7, "case {i}: {got} vs {want}");
        }
    }

    #[test]
    fn strip_kernels() {
        // above the balance point the kernel sees v only through 1(0 < v < y)
        let s3 = spec(WalkModel::ThreeN, 2.0, 0.3, 1.0);
        assert_eq!(limit_kernel(&s3, 1.0, 1.0, -0.3, -0.1, 1.0).unwrap(), 0.0);
        assert_eq!(limit_kernel(&s3, 1.0, 1.0, -0.3, 1.2, 1.0).unwrap(), 0.0);
        let inside = limit_kernel(&s3, 1.0, 1.0, -0.3, 0.2, 1.0).unwrap();
        assert!(inside > 0.0 && inside == limit_kernel(&s3, 1.0, 1.0, -0.3, 0.9, 1.0).unwrap());

        // the 4N strips are mirror images under (u, v, x, y, gamma) -> (v, u, y, x, 1/gamma)
        let wide = spec(WalkModel::FourN, 2.0, 0.8, 2.0);
        let tall = spec(WalkModel::FourN, 2.0, 0.8, 0.5);
        for &(x, y, u, v, z) in &[(1.0, 2.0, -0.4, 0.7, 0.3), (0.5, 1.0, 0.2, 0.1, 2.0), (2.0, 1.0, 3.0, 0.5, 1.0)] {
            let a = limit_kernel(&wide, x, y, u, v, z).unwrap();
            let b = limit_kernel(&tall, y, x, v, u, z).unwrap();
            assert!(a > 0.0 && rel(a, b) < 1e-14);
        }
    }

    #[test]
    fn linear_kernel_scales_with_height() {
        for m in [WalkModel::ThreeN, WalkModel::FourN] {
            let s = spec(m, 2.0, 0.2, 0.25);
            assert_eq!(s.kernel_case(), KernelCase::LinearInHeight);
            let one = limit_kernel(&s, 1.0, 1.0, 0.3, 0.6, 0.8).unwrap();
            let three = limit_kernel(&s, 1.0, 3.0, 0.3, 0.6, 0.8).unwrap();
            assert!(rel(three, 3.0 * one) < 1e-13, "{m}");
        }
    }

    #[test]
    fn far_kernel_decays() {
        let s = spec(WalkModel::ThreeN, 2.0, 0.3, 0.5);
        let ladder: Vec<f64> =
            [1.0, 2.0, 4.0, 8.0, 16.0].iter().map(|&z| limit_kernel(&s, 1.0, 1.0, -5.0, 0.5, z).unwrap()).collect();
        assert!(ladder.windows(2).all(|w| w[1] < w[0]), "{ladder:?}");
        assert!(ladder[4] < 1e-30);
        // nothing flows backwards in time
        assert_eq!(limit_kernel(&s, 1.0, 1.0, 1.5, 0.5, 1.0).unwrap(), 0.0);
        assert!(limit_kernel(&s, 0.0, 1.0, 0.5, 0.5, 1.0).is_err());
        assert!(limit_kernel(&s, 1.0, 1.0, 0.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn laplace_profiles_track_the_kernels() {
        let configs = [
            (WalkModel::ThreeN, 0.3, 0.5),
            (WalkModel::ThreeN, 0.2, 0.25),
            (WalkModel::ThreeN, 0.3, 2.0),
            (WalkModel::ThreeN, 0.8, 0.25),
            (WalkModel::FourN, 0.3, 1.0),
            (WalkModel::FourN, 0.2, 0.25),
            (WalkModel::FourN, 0.8, 2.0),
            (WalkModel::FourN, 0.8, 0.5),
        ];
        let points = [(0.3, 0.4), (-0.7, 0.1), (0.999, 0.5), (-30.0, 4.0), (0.5, -2.0)];
        for &(m, beta, gamma) in &configs {
            let s = spec(m, 2.0, beta, gamma);
            let case = s.kernel_case();
            for &(u, v) in &points {
                let coarse = profile(m, case, 1.0, 1.0, u, v, 0.125);
                let fine = profile(m, case, 1.0, 1.0, u, v, 0.0625);
                for &z in &[1e-8, 0.01, 1.0, 30.0, 1e6, 1e14] {
                    let want = kernel_value(m, case, 1.0, 1.0, u, v, z);
                    // far sources see narrow peaks that only matter relative to the box itself
                    let centre = kernel_value(m, case, 1.0, 1.0, 0.5, 0.5, z) + kernel_value(m, case, 1.0, 1.0, 0.5, 0.0, z);
                    for (p, tol) in [(&coarse, 1e-4), (&fine, 1e-8)] {
                        let got = p.eval(z);
                        let err = (got - want).abs();
                        assert!(err <= tol * (want + 1e-3 * centre), "{m} {case:?} ({u}, {v}) z={z}: {got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn de_rules_integrate_polynomials_and_tails() {
        let w: f64 = de_finite(-1.0, 2.0, 0.125).iter().map(|&(x, w)| w * x * x).sum();
        assert!((w - 3.0).abs() < 1e-14);
        let t: f64 = de_half(2.0, 0.125).iter().map(|&(r, w)| w * (-r).exp() / (1.0 + r).sqrt()).sum();
        let q = half_line(|r| (-r).exp() / (1.0 + r).sqrt(), 1.0, Tol::rel(1e-14)).value;
        assert!(rel(t, q) < 1e-10);
        // logistic travel rule: int_2^5 tau^{-1/2} dtau, starting inside and at 0
        let sum: f64 = travel_nodes(2.0, 3.0, 0.125).iter().map(|&(tau, w)| w / tau.sqrt()).sum();
        assert!(rel(sum, 2.0 * (5f64.sqrt() - 2f64.sqrt())) < 1e-12);
        // less the piece below the shortest resolved travel time
        let sum: f64 = travel_nodes(0.0, 3.0, 0.125).iter().map(|&(tau, w)| w / tau.sqrt()).sum();
        let cut = 2.0 * (0.5 * LN_SHORTEST_TRAVEL).exp();
        assert!((sum + cut - 2.0 * 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn strip_functionals_scale_and_grow() {
        let opts = FunctionalOptions::default();
        for (m, beta, gamma) in [(WalkModel::ThreeN, 0.3, 2.0), (WalkModel::ThreeN, 0.8, 0.25), (WalkModel::FourN, 0.8, 2.0)] {
            let s = spec(m, 2.0, beta, gamma);
            let j = |x: f64, y: f64| limit_functional(&s, x, y, opts).unwrap().value;
            let base = j(1.0, 1.0);
            let ah = s.alpha() * s.law().h;
            for lambda in [2.0f64, 4.0] {
                let scaled = j(lambda, lambda.powf(gamma));
                let off = (scaled.ln() - base.ln() - ah * lambda.ln()).abs();
                assert!(off < 1e-3, "{m} gamma={gamma} lambda={lambda}: {off}");
            }
            let xs = [0.5, 1.0, 2.0].map(|x| j(x, 1.0));
            assert!(xs[0] < xs[1] && xs[1] < xs[2], "{xs:?}");
        }
    }

    #[test]
    fn divergent_four_n_strips_are_refused() {
        let s = spec(WalkModel::FourN, 2.0, 0.3, 2.0);
        assert!(limit_functional(&s, 1.0, 1.0, FunctionalOptions::default()).is_err());
        let k = Rectangle::new((0.0, 0.0), (1.0, 1.0)).unwrap();
        assert!(kernel_overlap(&s, &k, &k, FunctionalOptions::default()).is_err());
    }

    #[test]
    fn overlap_matches_the_functional_on_the_diagonal() {
        let s = spec(WalkModel::ThreeN, 2.0, 0.3, 2.0);
        let k = Rectangle::new((0.0, 0.0), (1.0, 1.0)).unwrap();
        let opts = FunctionalOptions::default();
        let j = limit_functional(&s, 1.0, 1.0, opts).unwrap().value;
        let o = kernel_overlap(&s, &k, &k, opts).unwrap();
        assert!(rel(o, j) < 1e-4, "{o} {j}");
        // shifting both boxes together changes nothing
        let k1 = Rectangle::new((3.0, -2.0), (4.0, -1.0)).unwrap();
        assert!(rel(kernel_overlap(&s, &k1, &k1, opts).unwrap(), o) < 1e-4);
    }

    #[test]
    fn strips_separated_across_their_indicator_are_independent() {
        let opts = FunctionalOptions::default();
        let a = Rectangle::new((0.0, 0.0), (1.0, 1.0)).unwrap();
        let above = Rectangle::new((0.0, 2.0), (1.0, 3.0)).unwrap();
        let beside = Rectangle::new((2.0, 0.0), (3.0, 1.0)).unwrap();
        let s3 = spec(WalkModel::ThreeN, 2.0, 0.3, 2.0);
        assert_eq!(kernel_overlap(&s3, &a, &above, opts).unwrap(), 0.0);
        assert!(kernel_overlap(&s3, &a, &beside, opts).unwrap() > 1e-3);
        let s4 = spec(WalkModel::FourN, 2.0, 0.8, 0.5);
        assert_eq!(kernel_overlap(&s4, &a, &beside, opts).unwrap(), 0.0);
        assert!(kernel_overlap(&s4, &a, &above, opts).unwrap() > 1e-3);
    }

    #[test]
    fn covariance_limit_branches_join_continuously() {
        let mix = MixingLaw::standard(0.3).unwrap();
        let c = |t, s| covariance_limit(WalkModel::ThreeN, &mix, t, s).unwrap();
        assert!(rel(c(1e-9, 1.0), c(0.0, 1.0)) < 1e-8);
        assert!(rel(c(1.0, 1e-7), c(1.0, 0.0)) < 1e-8);
        assert!(rel(c(-1.0, 0.0), c(1.0, 0.0)) < 1e-15);
        // the 3N covariance only looks forward in time through |t|, and is even in s
        assert!(rel(c(2.0, -1.0), c(2.0, 1.0)) < 1e-15);
        let four = |t, s| covariance_limit(WalkModel::FourN, &mix, t, s).unwrap();
        assert!(rel(four(3.0, 4.0), four(5.0, 0.0)) < 1e-14);
        assert!(covariance_limit(WalkModel::FourN, &mix, 0.0, 0.0).is_err());
    }

    #[test]
    fn covariance_is_symmetric_and_decays() {
        let mix = MixingLaw::standard(0.3).unwrap();
        let r = |m, t, s| covariance(m, &mix, t, s, Exec::Sequential).unwrap();
        for m in [WalkModel::ThreeN, WalkModel::FourN] {
            let r0 = r(m, 0, 0);
            let r1 = r(m, 2, 1);
            assert!(r0 > r1 && r1 > 0.0, "{m}");
            assert!(rel(r(m, -2, -1), r1) < 1e-12, "{m}");
            assert!(rel(r(m, 2, -1), r1) < 1e-12, "{m}");
        }
        assert!(rel(r(WalkModel::FourN, 1, 2), r(WalkModel::FourN, 2, 1)) < 1e-12);
    }

    #[test]
    fn covariance_ladder_output() {
        let mix = MixingLaw::standard(0.3).unwrap();
        let ladder = cov_asymptotics(WalkModel::FourN, &mix, 1.0, 1.0, &[4.0, 8.0], Exec::Sequential).unwrap();
        assert_eq!(ladder.rows.len(), 2);
        assert_eq!(ladder.rows[1].lag_t, 8);
        let mut buf = Vec::new();
        ladder.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("lambda,lag_t,lag_s,scaled,limit,rel_err\n"));
        assert_eq!(text.lines().count(), 3);
        assert!(cov_asymptotics(WalkModel::FourN, &mix, 0.0, 0.0, &[4.0], Exec::Sequential).is_err());
    }

    #[test]
    fn lattice_routes_agree() {
        for (m, gamma) in [(WalkModel::FourN, 1.0), (WalkModel::ThreeN, 0.5)] {
            let s = spec(m, 2.0, 0.3, gamma);
            for n in [1, 2, 4] {
                let line = discrete_functional(&s, n, DiscreteOptions { route: LatticeRoute::LineTransform, ..Default::default() })
                    .unwrap();
                let grid =
                    discrete_functional(&s, n, DiscreteOptions { route: LatticeRoute::Grid, ..Default::default() }).unwrap();
                assert!(line.value > 0.0 && line.tail_fraction == 0.0);
                assert!(rel(grid.value, line.value) < 1e-4, "{m} n={n}: {} vs {}", grid.value, line.value);
            }
        }
    }

    #[test]
    fn lattice_functional_limits() {
        let s = spec(WalkModel::FourN, 2.0, 0.3, 1.0);
        let opts = DiscreteOptions { max_n: 8, ..Default::default() };
        assert!(discrete_functional(&s, 9, opts).is_err());
        assert!(discrete_functional(&s, 0, opts).is_err());
        // the line transform is exact only for alpha = 2
        let s15 = spec(WalkModel::FourN, 1.5, 0.2, 1.0);
        let line = DiscreteOptions { route: LatticeRoute::LineTransform, ..Default::default() };
        assert!(discrete_functional(&s15, 2, line).is_err());
        let v = discrete_functional(&s15, 1, DiscreteOptions::default()).unwrap();
        assert!(v.value.is_finite() && v.value > 0.0);
    }

    #[test]
    fn report_serialization() {
        let report = StableReport {
            model: WalkModel::FourN,
            alpha: 2.0,
            beta: 0.3,
            gamma: 1.0,
            h: 1.7,
            regime: Regime::Balanced,
            j_gamma: 1.96,
            j_n: vec![LadderRow { n: 4, value: 1.89, rel_gap: 0.037 }, LadderRow { n: 8, value: 1.93, rel_gap: 0.016 }],
        };
        assert!(report.monotone());
        assert!((report.final_gap() - 0.016).abs() < 1e-15);
        let json = serde_json::to_value(&report).unwrap();
        for key in ["model", "alpha", "beta", "gamma", "H", "J_gamma", "J_n"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let back: StableReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, report);
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("n,value,rel_gap\n4,"));
    }
}
