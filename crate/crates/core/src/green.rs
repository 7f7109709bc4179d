//! Lattice Green functions of the 3N and 4N walks and their scaling limits.
//!
//! `g(t, s, a) = sum_k a^k p_k(t, s)` where `p_k` is the k-step law of the
//! walk. Two backends: a streaming series with a certified tail bound, and
//! inversion of `1 / (1 - a p^(x, y))` by a 2D FFT whose size is fixed by a
//! Chernoff bound on the aliased mass. A third representation (transform in
//! `s` only, exact geometric dependence on `t`) backs the lattice functionals
//! in [`crate::stable_limits`].

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::par::Exec;
use crate::specfun::{bessel_k0, binom_ln_pmf, rw1d_ln_pmf, BinomialQuery};

/// Nearest-neighbour walk driving the autoregression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WalkModel {
    /// Steps (1,0), (0,1), (0,-1) with probability 1/3 each.
    ThreeN,
    /// Steps (±1,0), (0,±1) with probability 1/4 each.
    FourN,
}

const THREE_N_STEPS: [(i64, i64, f64); 3] = [(1, 0, 1.0 / 3.0), (0, 1, 1.0 / 3.0), (0, -1, 1.0 / 3.0)];
const FOUR_N_STEPS: [(i64, i64, f64); 4] =
    [(1, 0, 0.25), (-1, 0, 0.25), (0, 1, 0.25), (0, -1, 0.25)];

impl WalkModel {
    pub fn steps(self) -> &'static [(i64, i64, f64)] {
        match self {
            WalkModel::ThreeN => &THREE_N_STEPS,
            WalkModel::FourN => &FOUR_N_STEPS,
        }
    }

    /// Aspect exponent at which increments of the scaling limit are fully dependent.
    pub fn gamma0(self) -> f64 {
        match self {
            WalkModel::ThreeN => 0.5,
            WalkModel::FourN => 1.0,
        }
    }

    /// `min(q1, q2)` with `q1` the vertical and `q2` the horizontal step mass.
    pub fn q_min(self) -> f64 {
        let vertical: f64 = self.steps().iter().filter(|s| s.0 == 0).map(|s| s.2).sum();
        vertical.min(1.0 - vertical)
    }

    pub fn tag(self) -> &'static str {
        match self {
            WalkModel::ThreeN => "3n",
            WalkModel::FourN => "4n",
        }
    }

    /// `p^(x, y) = sum p(t, s) e^{i(tx + sy)}`.
    pub fn symbol(self, x: f64, y: f64) -> Complex64 {
        self.steps()
            .iter()
            .map(|&(t, s, p)| Complex64::from_polar(p, t as f64 * x + s as f64 * y))
            .sum()
    }

    /// `1 - a p^(x, y)` evaluated without cancellation near the origin.
    pub fn resolvent_denominator(self, gap: f64, x: f64, y: f64) -> Complex64 {
        let a = 1.0 - gap;
        let sx = (0.5 * x).sin();
        let sy = (0.5 * y).sin();
        match self {
            WalkModel::ThreeN => {
                let re = (2.0 * sx * sx + 4.0 * sy * sy) / 3.0;
                let im = -x.sin() / 3.0;
                Complex64::new(gap + a * re, a * im)
            }
            WalkModel::FourN => Complex64::new(gap + a * (sx * sx + sy * sy), 0.0),
        }
    }

    /// Transform of `g(t, ., a)` in the second coordinate: `amp * ratio^|t|`
    /// (for 3N only `t >= 0` carries mass).
    pub fn line_symbol(self, gap: f64, y: f64) -> LineSymbol {
        let a = 1.0 - gap;
        if a <= 0.0 {
            return LineSymbol { amp: 1.0, ratio: 0.0, one_minus_ratio: 1.0 };
        }
        let sy = (0.5 * y).sin();
        let s2 = sy * sy;
        match self {
            WalkModel::ThreeN => {
                let den = (1.0 + 2.0 * gap) / 3.0 + 4.0 * a / 3.0 * s2;
                LineSymbol {
                    amp: 1.0 / den,
                    ratio: a / 3.0 / den,
                    one_minus_ratio: (gap + 4.0 * a / 3.0 * s2) / den,
                }
            }
            WalkModel::FourN => {
                let c2 = 1.0 - s2;
                let bm1 = 2.0 * (gap * c2 + s2) / a;
                let bp1 = bm1 + 2.0;
                let root = (bm1 * bp1).sqrt();
                // rationalized: no cancellation for b near 1 or b large
                let omr = 2.0 * bm1.sqrt() / (bp1.sqrt() + bm1.sqrt());
                let ratio = 1.0 / (1.0 + bm1 + root);
                LineSymbol { amp: 2.0 / a / root, ratio, one_minus_ratio: omr }
            }
        }
    }

    /// Log moment generating function pieces `1 - a E e^{theta X}` for one step
    /// coordinate; `horizontal` selects the first coordinate.
    fn killed_mgf_gap(self, gap: f64, theta: f64, horizontal: bool) -> f64 {
        let a = 1.0 - gap;
        let sh = (0.5 * theta).sinh();
        match (self, horizontal) {
            (WalkModel::ThreeN, true) => gap - a * theta.exp_m1() / 3.0,
            (WalkModel::ThreeN, false) => gap - 4.0 * a / 3.0 * sh * sh,
            (WalkModel::FourN, _) => gap - a * sh * sh,
        }
    }
}

impl fmt::Display for WalkModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for WalkModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "3n" | "threen" | "three_n" => Ok(WalkModel::ThreeN),
            "4n" | "fourn" | "four_n" => Ok(WalkModel::FourN),
            other => domain(format!("unknown walk model '{other}' (expected 3n or 4n)")),
        }
    }
}

/// `amp(y) * ratio(y)^|t|` form of the line transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSymbol {
    pub amp: f64,
    pub ratio: f64,
    pub one_minus_ratio: f64,
}

/// Probability that the walk sits at `(t, s)` after `k` steps.
pub fn pk(model: WalkModel, k: u64, t: i64, s: i64) -> f64 {
    ln_pk(model, k, t, s).exp()
}

fn ln_pk(model: WalkModel, k: u64, t: i64, s: i64) -> f64 {
    match model {
        WalkModel::ThreeN => {
            if t < 0 || t as u64 > k {
                return f64::NEG_INFINITY;
            }
            let rest = k - t as u64;
            let lb = binom_ln_pmf(BinomialQuery { successes: t as u64, trials: k, success_prob: 1.0 / 3.0 });
            lb + rw1d_ln_pmf(rest, s)
        }
        WalkModel::FourN => rw1d_ln_pmf(k, t + s) + rw1d_ln_pmf(k, t - s),
    }
}

/// Which evaluation route a [`GreenKernel`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    Series,
    FftInversion,
}

/// Default ceiling on series terms.
pub const DEFAULT_MAX_TERMS: u64 = 10_000_000;
/// Default ceiling on FFT grid cells.
pub const DEFAULT_MAX_CELLS: usize = 1 << 24;

/// Green function of `model` at coefficient `a = 1 - gap`.
///
/// The coefficient is stored through its distance to the unit root so that
/// near-unit-root kernels keep full relative precision in `1 - a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreenKernel {
    pub model: WalkModel,
    gap: f64,
    pub truncation_tol: f64,
    pub backend: Backend,
    pub max_terms: u64,
    pub max_cells: usize,
    pub exec: Exec,
}

impl GreenKernel {
    /// Kernel at coefficient `a` in `[0, 1)`.
    pub fn new(model: WalkModel, a: f64, truncation_tol: f64, backend: Backend) -> Result<Self> {
        if !(0.0..1.0).contains(&a) {
            return domain(format!("autoregressive coefficient {a} outside [0,1)"));
        }
        Self::with_gap(model, 1.0 - a, truncation_tol, backend)
    }

    /// Kernel at coefficient `a = 1 - gap`, `gap` in `(0, 1]`.
    pub fn with_gap(model: WalkModel, gap: f64, truncation_tol: f64, backend: Backend) -> Result<Self> {
        if !(gap > 0.0 && gap <= 1.0) {
            return domain(format!("unit-root gap {gap} outside (0,1]"));
        }
        if !(truncation_tol > 0.0 && truncation_tol <= 1e-3) {
            return domain(format!("truncation tolerance {truncation_tol} outside (0, 1e-3]"));
        }
        Ok(Self {
            model,
            gap,
            truncation_tol,
            backend,
            max_terms: DEFAULT_MAX_TERMS,
            max_cells: DEFAULT_MAX_CELLS,
            exec: Exec::default(),
        })
    }

    pub fn a(&self) -> f64 {
        1.0 - self.gap
    }

    pub fn gap(&self) -> f64 {
        self.gap
    }

    pub fn with_max_terms(mut self, max_terms: u64) -> Self {
        self.max_terms = max_terms;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }
}

/// A series evaluation with its certified truncation bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesValue {
    pub value: f64,
    pub tail_bound: f64,
    pub terms: u64,
}

const BLOCK: u64 = 2048;
const UNDERFLOW_LN: f64 = -700.0;

/// `g(t, s, a)` by direct summation of the walk series.
///
/// Terms are generated by their two-step ratio and re-anchored from the
/// log-space pmf at the start of every block, so blocks are independent and
/// their sums are combined in index order.
pub fn green_series(kern: &GreenKernel, t: i64, s: i64) -> Result<SeriesValue> {
    if kern.backend != Backend::Series {
        return domain("green_series called on a kernel configured for FFT inversion");
    }
    let gap = kern.gap;
    let a = 1.0 - gap;
    let k0 = match kern.model {
        WalkModel::ThreeN => {
            if t < 0 {
                return Ok(SeriesValue { value: 0.0, tail_bound: 0.0, terms: 0 });
            }
            (t + s.abs()) as u64
        }
        WalkModel::FourN => (t.abs() + s.abs()) as u64,
    };
    if a == 0.0 {
        let v = if k0 == 0 { 1.0 } else { 0.0 };
        return Ok(SeriesValue { value: v, tail_bound: 0.0, terms: 1 });
    }
    let ln_a = (-gap).ln_1p();
    let tol = kern.truncation_tol;
    // tail after index K: a^{K+1} / (1-a) times a bound on the k-step mass
    let tail = |k: u64| -> f64 {
        let kk = (k + 1) as f64;
        let mass = match kern.model {
            WalkModel::ThreeN => 1.0,
            WalkModel::FourN => (1.0 / (PI * (kk * 0.5).floor().max(1.0))).min(1.0),
        };
        (kk * ln_a).exp() / gap * mass
    };
    let mut k_end = k0;
    if tail(k_end) > tol {
        let mut lo = k0;
        let mut hi = k0.max(1);
        while tail(hi) > tol {
            lo = hi;
            hi = hi.saturating_mul(2);
            if hi > u64::MAX / 4 {
                return Err(Error::Resource("series truncation index overflows".into()));
            }
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if tail(mid) > tol {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        k_end = hi;
    }
    let steps = (k_end - k0) / 2 + 1;
    if steps > kern.max_terms {
        return Err(Error::Resource(format!(
            "series needs {steps} terms (cap {}); use the FFT backend or raise the cap",
            kern.max_terms
        )));
    }
    let n_blocks = steps.div_ceil(BLOCK);
    let model = kern.model;
    let a2 = a * a;
    let block_sums = kern.exec.map(n_blocks as usize, |b| {
        let first = k0 + 2 * BLOCK * b as u64;
        let count = BLOCK.min(steps - BLOCK * b as u64);
        // far from the diagonal the leading terms underflow; walk them in log space
        let mut ln_term = first as f64 * ln_a + ln_pk(model, first, t, s);
        let mut term = 0.0;
        let mut linear = false;
        let mut sum = 0.0;
        let mut comp = 0.0;
        let mut k = first;
        for _ in 0..count {
            if !linear && ln_term > UNDERFLOW_LN {
                linear = true;
                term = ln_term.exp();
            }
            if linear {
                let y = term - comp;
                let z = sum + y;
                comp = (z - sum) - y;
                sum = z;
            }
            let kf = k as f64;
            let ratio = match model {
                WalkModel::ThreeN => {
                    let j = (k - t as u64) as f64;
                    let sf = s as f64;
                    let tf = t as f64;
                    (kf + 2.0) * (kf + 1.0) / ((kf + 2.0 - tf) * (kf + 1.0 - tf)) * (4.0 / 9.0)
                        * (j + 2.0) * (j + 1.0)
                        / (4.0 * (0.5 * (j + sf) + 1.0) * (0.5 * (j - sf) + 1.0))
                }
                WalkModel::FourN => {
                    let u = (t + s) as f64;
                    let v = (t - s) as f64;
                    let c = (kf + 2.0) * (kf + 1.0) * 0.25;
                    c / ((0.5 * (kf + u) + 1.0) * (0.5 * (kf - u) + 1.0)) * c
                        / ((0.5 * (kf + v) + 1.0) * (0.5 * (kf - v) + 1.0))
                }
            };
            if !linear {
                ln_term += (a2 * ratio).ln();
            } else {
                term *= a2 * ratio;
            }
            k += 2;
        }
        sum
    });
    let value = block_sums.iter().sum();
    Ok(SeriesValue { value, tail_bound: tail(k_end), terms: steps })
}

/// FFT-inverted Green function on a periodic `m_t x m_s` grid.
#[derive(Debug, Clone)]
pub struct GreenGrid {
    pub model: WalkModel,
    pub half_width: usize,
    pub m_t: usize,
    pub m_s: usize,
    /// Certified bound on the aliasing error of every window value.
    pub aliasing_bound: f64,
    values: Vec<f64>,
}

impl GreenGrid {
    /// `g(t, s)` read from the periodic grid (exact up to the aliasing bound
    /// inside the window).
    pub fn get(&self, t: i64, s: i64) -> f64 {
        let i = t.rem_euclid(self.m_t as i64) as usize;
        let j = s.rem_euclid(self.m_s as i64) as usize;
        self.values[i * self.m_s + j]
    }

    /// Sum over the whole torus, which equals the sum of `g` over `Z^2`.
    pub fn total_mass(&self) -> f64 {
        let rows: Vec<f64> = self.values.chunks(self.m_s).map(|r| r.iter().sum::<f64>()).collect();
        rows.iter().sum()
    }

    /// Window values for `|t|, |s| <= half_width` in row-major `(t, s)` order.
    pub fn window(&self) -> Vec<(i64, i64, f64)> {
        let w = self.half_width as i64;
        let mut out = Vec::with_capacity(((2 * w + 1) * (2 * w + 1)) as usize);
        for t in -w..=w {
            for s in -w..=w {
                out.push((t, s, self.get(t, s)));
            }
        }
        out
    }

    /// CSV dump of the window with header `t,s,value`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t,s,value")?;
        for (t, s, v) in self.window() {
            writeln!(out, "{t},{s},{v:e}")?;
        }
        Ok(())
    }
}

/// Smallest distance `D` with `min_theta e^{-theta D} / (1 - a m(theta)) <= budget`.
pub(crate) fn chernoff_distance(model: WalkModel, gap: f64, horizontal: bool, budget: f64) -> f64 {
    let a = 1.0 - gap;
    if a == 0.0 {
        return 1.0;
    }
    // largest theta with a m(theta) < 1
    let theta_max = match (model, horizontal) {
        (WalkModel::ThreeN, true) => (3.0 * gap / a).ln_1p(),
        (WalkModel::ThreeN, false) => 2.0 * (3.0 * gap / (4.0 * a)).sqrt().asinh(),
        (WalkModel::FourN, _) => 2.0 * (gap / a).sqrt().asinh(),
    };
    let ln_bound = |d: f64, th: f64| -> f64 { -th * d - model.killed_mgf_gap(gap, th, horizontal).ln() };
    let best = |d: f64| -> f64 {
        let (mut lo, mut hi) = (0.0, theta_max);
        for _ in 0..200 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if ln_bound(d, m1) < ln_bound(d, m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        ln_bound(d, 0.5 * (lo + hi))
    };
    let target = budget.ln();
    let mut hi = 1.0;
    while best(hi) > target {
        hi *= 2.0;
        if hi > 1e15 {
            return f64::INFINITY;
        }
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if best(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Grid extents `(m_t, m_s)` that keep the aliasing error of the window
/// `|t|, |s| <= half_width` below `tol`.
pub fn fft_extent(model: WalkModel, gap: f64, half_width: usize, tol: f64) -> (usize, usize) {
    let w = half_width as f64;
    let d_t = chernoff_distance(model, gap, true, tol / 4.0);
    let d_s = chernoff_distance(model, gap, false, tol / 4.0);
    let need = |d: f64| -> usize {
        let m = (d + w + 1.0).max(2.0 * w + 2.0);
        if m > 1e15 { usize::MAX } else { (m.ceil() as usize).next_power_of_two() }
    };
    (need(d_t), need(d_s))
}

/// `g(t, s, a)` for `|t|, |s| <= half_width` by inverse FFT of the resolvent symbol.
pub fn green_fft(kern: &GreenKernel, half_width: usize) -> Result<GreenGrid> {
    if kern.backend != Backend::FftInversion {
        return domain("green_fft called on a kernel configured for the series backend");
    }
    if !half_width.is_power_of_two() {
        return domain(format!("half_width {half_width} is not a power of two"));
    }
    let (m_t, m_s) = fft_extent(kern.model, kern.gap, half_width, kern.truncation_tol);
    let cells = m_t.saturating_mul(m_s);
    if cells > kern.max_cells {
        return Err(Error::Resource(format!(
            "FFT grid {m_t} x {m_s} needed for tolerance {:e} exceeds the cell budget {}",
            kern.truncation_tol, kern.max_cells
        )));
    }
    let values = invert_on_grid(kern.model, kern.gap, m_t, m_s, kern.exec);
    Ok(GreenGrid {
        model: kern.model,
        half_width,
        m_t,
        m_s,
        aliasing_bound: kern.truncation_tol,
        values,
    })
}

pub(crate) fn invert_on_grid(model: WalkModel, gap: f64, m_t: usize, m_s: usize, exec: Exec) -> Vec<f64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); m_t * m_s];
    exec.for_chunks(&mut buf, m_s, |j, row| {
        let x = 2.0 * PI * j as f64 / m_t as f64;
        for (k, c) in row.iter_mut().enumerate() {
            let y = 2.0 * PI * k as f64 / m_s as f64;
            *c = model.resolvent_denominator(gap, x, y).inv();
        }
    });
    fft2_forward(&mut buf, m_t, m_s, exec);
    let norm = 1.0 / (m_t * m_s) as f64;
    buf.iter().map(|c| c.re * norm).collect()
}

/// In-place forward 2D FFT of a row-major `rows x cols` array.
pub(crate) fn fft2_forward(buf: &mut [Complex64], rows: usize, cols: usize, exec: Exec) {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(cols);
    exec.for_chunks(buf, cols, |_, row| row_fft.process(row));
    let col_fft = planner.plan_fft_forward(rows);
    let mut t = transpose(buf, rows, cols);
    exec.for_chunks(&mut t, rows, |_, col| col_fft.process(col));
    let back = transpose(&t, cols, rows);
    buf.copy_from_slice(&back);
}

fn transpose(src: &[Complex64], rows: usize, cols: usize) -> Vec<Complex64> {
    let mut dst = vec![Complex64::new(0.0, 0.0); rows * cols];
    const TILE: usize = 32;
    for i0 in (0..rows).step_by(TILE) {
        for j0 in (0..cols).step_by(TILE) {
            for i in i0..(i0 + TILE).min(rows) {
                for j in j0..(j0 + TILE).min(cols) {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
    }
    dst
}

/// `g(t, s, a)` by the trapezoid rule on the line transform with `nodes` points;
/// exponentially convergent in `nodes` for `a < 1`.
pub fn green_line(model: WalkModel, gap: f64, t: i64, s: i64, nodes: usize) -> f64 {
    if model == WalkModel::ThreeN && t < 0 {
        return 0.0;
    }
    let tt = t.unsigned_abs() as i32;
    let mut sum = 0.0;
    for k in 0..nodes {
        let y = 2.0 * PI * (k as f64 + 0.5) / nodes as f64 - PI;
        let ls = model.line_symbol(gap, y);
        sum += (s as f64 * y).cos() * ls.amp * ls.ratio.powi(tt);
    }
    sum / nodes as f64
}

/// Limit kernel of the rescaled 3N Green function (one-dimensional heat kernel
/// with killing); zero for `t <= 0`.
pub fn h3(t: f64, s: f64, z: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    1.5 / (PI * t).sqrt() * (-3.0 * z * t - s * s / (4.0 * t)).exp()
}

/// Limit kernel of the rescaled 4N Green function, `(2/pi) K_0(2 sqrt(z (t^2+s^2)))`.
pub fn h4(t: f64, s: f64, z: f64) -> Result<f64> {
    if t == 0.0 && s == 0.0 {
        return domain("h4 is logarithmically singular at the origin");
    }
    if !(z > 0.0) {
        return domain(format!("h4 needs z > 0, got {z}"));
    }
    Ok(2.0 / PI * bessel_k0(2.0 * (z * (t * t + s * s)).sqrt())?)
}

/// Dominating envelope `t^{-1/2} exp(-z t - s^2 / (16 t))` of the rescaled 3N kernel.
pub fn h3_bound(t: f64, s: f64, z: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    (-z * t - s * s / (16.0 * t)).exp() / t.sqrt()
}

/// One rung of a scaling-limit ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub lambda: f64,
    pub rescaled_green: f64,
    pub limit_kernel: f64,
    pub rel_err: f64,
}

/// Rescaled Green functions against their limit kernel along a ladder of scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLadder {
    pub model: WalkModel,
    pub t: f64,
    pub s: f64,
    pub z: f64,
    pub rows: Vec<ProbeRow>,
}

impl ProbeLadder {
    pub fn strictly_decreasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].rel_err < w[0].rel_err)
    }

    /// Non-increasing up to an absolute slack.
    pub fn non_increasing(&self, slack: f64) -> bool {
        self.rows.windows(2).all(|w| w[1].rel_err <= w[0].rel_err + slack)
    }

    pub fn final_rel_err(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.rel_err)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "lambda,rescaled_green,limit_kernel,rel_err")?;
        for r in &self.rows {
            writeln!(out, "{},{:.17e},{:.17e},{:.6e}", r.lambda, r.rescaled_green, r.limit_kernel, r.rel_err)?;
        }
        Ok(())
    }
}

/// Options for [`scaling_limit_probe`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    pub truncation_tol: f64,
    pub max_terms: u64,
    pub exec: Exec,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { truncation_tol: 1e-15, max_terms: 4_000_000_000, exec: Exec::default() }
    }
}

/// `sqrt(lambda) g3([lambda t], [sqrt(lambda) s], 1 - z/lambda)` or
/// `g4([lambda t], [lambda s], 1 - z/lambda^2)` against `h3` / `h4`.
///
/// Uses the series backend, whose cost grows like `1/(1-a)` but needs no grid;
/// at these scales an FFT grid would have to span the full decay length.
pub fn scaling_limit_probe(
    model: WalkModel,
    t: f64,
    s: f64,
    z: f64,
    lambdas: &[f64],
    opts: ProbeOptions,
) -> Result<ProbeLadder> {
    if !(z > 0.0) {
        return domain(format!("z must be positive, got {z}"));
    }
    let limit = match model {
        WalkModel::ThreeN => {
            if !(t > 0.0) {
                return domain("the 3N limit kernel lives on t > 0");
            }
            h3(t, s, z)
        }
        WalkModel::FourN => h4(t, s, z)?,
    };
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let (gap, ti, si, scale) = match model {
            WalkModel::ThreeN => (z / lambda, (lambda * t).floor(), (lambda.sqrt() * s).floor(), lambda.sqrt()),
            WalkModel::FourN => (z / (lambda * lambda), (lambda * t).floor(), (lambda * s).floor(), 1.0),
        };
        if !(gap > 0.0 && gap < 1.0) {
            return domain(format!("scale {lambda} puts the coefficient 1 - {gap} outside (0,1)"));
        }
        let kern = GreenKernel::with_gap(model, gap, opts.truncation_tol.max(f64::MIN_POSITIVE), Backend::Series)?
            .with_max_terms(opts.max_terms)
            .with_exec(opts.exec);
        let g = green_series(&kern, ti as i64, si as i64)?;
        let rescaled = scale * g.value;
        rows.push(ProbeRow {
            lambda,
            rescaled_green: rescaled,
            limit_kernel: limit,
            rel_err: ((rescaled - limit) / limit).abs(),
        });
    }
    Ok(ProbeLadder { model, t, s, z, rows })
}
