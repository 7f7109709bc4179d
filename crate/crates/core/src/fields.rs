//! Field simulation and scaling estimators.
//!
//! Random-coefficient autoregressive fields are moving averages of the lattice
//! Green function, realized as FFT convolutions on a torus padded by a certified
//! tail radius. Gaussian fields with a spectral density come either from an
//! exact Cholesky factor of the covariance or from spectral synthesis with cell
//! masses of the density. Estimators pool box sums over non-overlapping
//! translates and over fields.
//!
//! Layout: `values[s * width + t]`, `t` horizontal in `0..width`, `s` vertical.
//! Every random number comes from a ChaCha stream keyed by the master seed, a
//! component index and a lane (one lane per row), so no draw depends on how
//! work is scheduled.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{domain, Error, Result};
use crate::green::{chernoff_distance, fft2_forward, WalkModel};
use crate::par::Exec;
use crate::quad::{gauss_kronrod, tanh_sinh_rule, GaussLegendre, Tol};
use crate::spectra::{box_height, fejer_sq, GFactor, SpectralKind, SpectralModel};
use crate::stable_limits::{lag_sum, MixingLaw, StableLimitSpec};

/// Environment variable naming the scratch directory for intermediate files.
pub const SCRATCH_ENV: &str = "LRDFIELD_SCRATCH";

/// Scratch directory: `$LRDFIELD_SCRATCH`, else the system temp directory.
pub fn scratch_dir() -> PathBuf {
    std::env::var_os(SCRATCH_ENV).map(PathBuf::from).unwrap_or_else(std::env::temp_dir)
}

// ---------------------------------------------------------------- randomness

/// Words reserved per lane of a stream.
const LANE_BITS: u32 = 40;

/// Master seed from which every random stream is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterSeed(pub u64);

impl MasterSeed {
    /// Generator for lane `lane` of component `component`. Distinct pairs give
    /// non-overlapping ChaCha keystreams.
    pub fn stream(self, component: u64, lane: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(component);
        rng.set_word_pos(u128::from(lane) << LANE_BITS);
        rng
    }

    /// Independent seed for the `index`-th replicate, drawn from a stream no
    /// simulation routine uses.
    pub fn child(self, index: u64) -> MasterSeed {
        MasterSeed(self.stream(u64::MAX, index).next_u64())
    }
}

/// Uniform on the open interval `(0, 1)`.
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

// ---------------------------------------------------------------- innovations

/// Shape of the innovation law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "flavor")]
pub enum InnovationFlavor {
    /// `N(0, sigma^2)`; only with `alpha = 2`.
    Gaussian { sigma: f64 },
    /// Symmetric stable with characteristic function `exp(-|scale theta|^alpha)`.
    ExactStable { scale: f64 },
    /// `+-R` with `P(R > x) = x^{-alpha}` for `x >= 1`.
    ParetoTail,
}

/// Law of the innovations, in the normal domain of attraction of a symmetric
/// `alpha`-stable law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnovationLaw {
    alpha: f64,
    flavor: InnovationFlavor,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 1.0 && alpha <= 2.0) {
        return domain(format!("stability index {alpha} outside (1, 2]"));
    }
    Ok(())
}

impl InnovationLaw {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return domain(format!("innovation scale {sigma} must be positive"));
        }
        Ok(Self { alpha: 2.0, flavor: InnovationFlavor::Gaussian { sigma } })
    }

    pub fn exact_stable(alpha: f64, scale: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return domain(format!("innovation scale {scale} must be positive"));
        }
        Ok(Self { alpha, flavor: InnovationFlavor::ExactStable { scale } })
    }

    pub fn pareto_tail(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { alpha, flavor: InnovationFlavor::ParetoTail })
    }

    /// Unit Gaussian at `alpha = 2`, unit exact stable below.
    pub fn standard(alpha: f64) -> Result<Self> {
        if alpha == 2.0 { Self::gaussian(1.0) } else { Self::exact_stable(alpha, 1.0) }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn flavor(&self) -> InnovationFlavor {
        self.flavor
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.flavor {
            InnovationFlavor::Gaussian { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            }
            InnovationFlavor::ExactStable { scale } => scale * stable_draw(self.alpha, rng),
            InnovationFlavor::ParetoTail => {
                let r = open_unit(rng).powf(-1.0 / self.alpha);
                if rng.random::<bool>() { r } else { -r }
            }
        }
    }
}

/// Chambers-Mallows-Stuck transform for the standard symmetric law.
fn stable_draw<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let u = PI * (open_unit(rng) - 0.5);
    let e: f64 = Exp1.sample(rng);
    let e = e.max(f64::MIN_POSITIVE);
    (alpha * u).sin() / u.cos().powf(1.0 / alpha) * (((1.0 - alpha) * u).cos() / e).powf((1.0 - alpha) / alpha)
}

pub fn sample_innovation<R: Rng + ?Sized>(law: &InnovationLaw, rng: &mut R) -> f64 {
    law.sample(rng)
}

// ---------------------------------------------------------------- coefficients

/// A realization of the autoregressive coefficient, stored by its distance to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientDraw {
    gap: f64,
}

impl CoefficientDraw {
    pub fn new(a: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&a) {
            return domain(format!("coefficient a = {a} outside [0, 1)"));
        }
        Ok(Self { gap: 1.0 - a })
    }

    /// From `1 - a`, without the rounding of forming `a` first.
    pub fn from_gap(gap: f64) -> Result<Self> {
        if !(gap > 0.0 && gap <= 1.0) {
            return domain(format!("coefficient gap 1 - a = {gap} outside (0, 1]"));
        }
        Ok(Self { gap })
    }

    pub fn a(&self) -> f64 {
        1.0 - self.gap
    }

    pub fn gap(&self) -> f64 {
        self.gap
    }
}

/// Inverse-CDF draw from the mixing law.
pub fn sample_mixing<R: Rng + ?Sized>(law: &MixingLaw, rng: &mut R) -> CoefficientDraw {
    let u: f64 = rng.random();
    mixing_quantile(law, u)
}

/// Coefficient with `P(A <= a) = u`.
pub fn mixing_quantile(law: &MixingLaw, u: f64) -> CoefficientDraw {
    // P(1 - A <= gap) = 1 - u
    let target = 1.0 - u.clamp(0.0, 1.0);
    let p = 1.0 / (1.0 + law.beta());
    let gap = if law.is_standard() {
        target.powf(p)
    } else {
        // bisection in xi = gap^{1+beta}, where the probability is nearly linear
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if law.gap_probability(mid.powf(p)) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi.powf(p)
    };
    CoefficientDraw { gap: gap.clamp(f64::MIN_POSITIVE, 1.0) }
}

// ---------------------------------------------------------------- fields

/// Provenance of a field: enough to regenerate it bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub seed: u64,
    pub generator: String,
    pub params: serde_json::Value,
}

impl FieldMeta {
    pub fn new(seed: u64, generator: impl Into<String>, params: serde_json::Value) -> Self {
        Self { seed, generator: generator.into(), params }
    }
}

/// Real values on `0..width x 0..height`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeField {
    width: usize,
    height: usize,
    values: Vec<f64>,
    pub meta: FieldMeta,
}

const MAGIC: &[u8; 8] = b"LRDFIELD";
const DTYPE_F64: u64 = 1;

#[derive(Serialize, Deserialize)]
struct Sidecar {
    width: usize,
    height: usize,
    dtype: String,
    meta: FieldMeta,
}

impl LatticeField {
    pub fn new(width: usize, height: usize, values: Vec<f64>, meta: FieldMeta) -> Result<Self> {
        if width == 0 || height == 0 {
            return domain("field extent must be positive");
        }
        if values.len() != width * height {
            return domain(format!("{} values for a {width} x {height} field", values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite value at cell ({}, {})", i % width, i / width)));
        }
        Ok(Self { width, height, values, meta })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, t: usize, s: usize) -> f64 {
        self.values[s * self.width + t]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        writeln!(out, "t,s,value")?;
        for s in 0..self.height {
            for t in 0..self.width {
                writeln!(out, "{t},{s},{:e}", self.get(t, s))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads `t,s,value` rows; every cell of the bounding box must appear once.
    pub fn read_csv<R: Read>(input: R, meta: FieldMeta) -> Result<Self> {
        let mut cells = Vec::new();
        for (k, line) in BufReader::new(input).lines().enumerate() {
            let line = line?;
            if k == 0 || line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("line {}: expected t,s,value", k + 1));
            let mut parts = line.split(',');
            let t: usize = parts.next().and_then(|p| p.trim().parse().ok()).ok_or_else(bad)?;
            let s: usize = parts.next().and_then(|p| p.trim().parse().ok()).ok_or_else(bad)?;
            let v: f64 = parts.next().and_then(|p| p.trim().parse().ok()).ok_or_else(bad)?;
            cells.push((t, s, v));
        }
        let width = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
        let height = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        if cells.len() != width * height {
            return Err(Error::Format(format!("{} rows for a {width} x {height} field", cells.len())));
        }
        let mut values = vec![f64::NAN; width * height];
        for (t, s, v) in cells {
            values[s * width + t] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Format("duplicate or missing cells".into()));
        }
        Self::new(width, height, values, meta)
    }

    /// Raw little-endian `f64` values after a 32-byte header
    /// `{magic, width, height, dtype}`.
    pub fn write_binary<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        out.write_all(MAGIC)?;
        out.write_all(&(self.width as u64).to_le_bytes())?;
        out.write_all(&(self.height as u64).to_le_bytes())?;
        out.write_all(&DTYPE_F64.to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(input: R, meta: FieldMeta) -> Result<Self> {
        let mut input = BufReader::new(input);
        let mut header = [0u8; 32];
        input.read_exact(&mut header)?;
        if &header[..8] != MAGIC {
            return Err(Error::Format("not a field file (bad magic)".into()));
        }
        let word = |i: usize| u64::from_le_bytes(header[i..i + 8].try_into().expect("8-byte slice"));
        let (width, height, dtype) = (word(8) as usize, word(16) as usize, word(24));
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("unsupported dtype code {dtype}")));
        }
        let cells = width
            .checked_mul(height)
            .filter(|&c| c > 0 && c <= 1 << 32)
            .ok_or_else(|| Error::Format(format!("implausible extent {width} x {height}")))?;
        let mut bytes = vec![0u8; cells * 8];
        input.read_exact(&mut bytes)?;
        let values = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        Self::new(width, height, values, meta)
    }

    /// Writes `path` (binary) and `path` with extension `json` (metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_binary(File::create(path)?)?;
        let side = Sidecar { width: self.width, height: self.height, dtype: "f64".into(), meta: self.meta.clone() };
        let text = serde_json::to_string_pretty(&side).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path.with_extension("json"), text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path.with_extension("json"))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let field = Self::read_binary(File::open(path)?, side.meta)?;
        if field.width != side.width || field.height != side.height {
            return Err(Error::Format("sidecar extent does not match the binary header".into()));
        }
        Ok(field)
    }
}

// ---------------------------------------------------------------- autoregressive fields

#[derive(Debug, Clone, Copy)]
pub struct ArOptions {
    /// Bound on `|X - X_exact| / max|eps|` per cell.
    pub tol: f64,
    /// Largest padded torus, in cells.
    pub max_cells: usize,
    pub exec: Exec,
}

impl Default for ArOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_cells: 1 << 22, exec: Exec::default() }
    }
}

/// Moving-average filter `eps -> sum g(t - u, s - v) eps(u, v)` on a torus.
///
/// The torus covers the field plus the lags where the Green function keeps
/// all but `tol / 2` of its mass. Innovations on the torus stand in for the
/// lattice ones; the cells they alias sit beyond that radius, so each output
/// differs from the exact moving average by at most `tol * max|eps|`.
#[derive(Debug, Clone)]
pub struct ArFilter {
    model: WalkModel,
    draw: CoefficientDraw,
    width: usize,
    height: usize,
    m_t: usize,
    m_s: usize,
    offset_t: usize,
    offset_s: usize,
    transfer: Vec<Complex64>,
    exec: Exec,
}

impl ArFilter {
    pub fn new(model: WalkModel, draw: CoefficientDraw, width: usize, height: usize, opts: ArOptions) -> Result<Self> {
        if width == 0 || height == 0 {
            return domain("field extent must be positive");
        }
        if !(opts.tol > 0.0 && opts.tol < 1.0) {
            return domain(format!("truncation tolerance {} outside (0, 1)", opts.tol));
        }
        let gap = draw.gap;
        let budget = opts.tol / 8.0;
        let reach = |horizontal: bool| -> Result<usize> {
            let d = chernoff_distance(model, gap, horizontal, budget).ceil();
            if !(d <= opts.max_cells as f64) {
                return Err(Error::Resource(format!(
                    "a = {} needs a padding radius beyond the cell budget {}",
                    draw.a(),
                    opts.max_cells
                )));
            }
            Ok(d as usize)
        };
        let (d_t, d_s) = (reach(true)?, reach(false)?);
        // 3N moves only forward in t, so no lags below 0 there
        let back_t = if model == WalkModel::ThreeN { 0 } else { d_t };
        let m_t = (width + d_t + back_t).next_power_of_two();
        let m_s = (height + 2 * d_s).next_power_of_two();
        if m_t.saturating_mul(m_s) > opts.max_cells {
            return Err(Error::Resource(format!(
                "a = {} needs a {m_t} x {m_s} torus, beyond the cell budget {}",
                draw.a(),
                opts.max_cells
            )));
        }
        let mut transfer = vec![Complex64::new(0.0, 0.0); m_t * m_s];
        opts.exec.for_chunks(&mut transfer, m_s, |j, row| {
            let x = -2.0 * PI * j as f64 / m_t as f64;
            for (k, c) in row.iter_mut().enumerate() {
                let y = -2.0 * PI * k as f64 / m_s as f64;
                *c = model.resolvent_denominator(gap, x, y).inv();
            }
        });
        Ok(Self { model, draw, width, height, m_t, m_s, offset_t: d_t, offset_s: d_s, transfer, exec: opts.exec })
    }

    pub fn model(&self) -> WalkModel {
        self.model
    }

    pub fn draw(&self) -> CoefficientDraw {
        self.draw
    }

    /// Torus extent `(m_t, m_s)`.
    pub fn padded_extent(&self) -> (usize, usize) {
        (self.m_t, self.m_s)
    }

    /// Torus index `t * m_s + s` of the lattice cell `(t, s)` (field origin at 0).
    pub fn torus_index(&self, t: i64, s: i64) -> usize {
        let i = (t + self.offset_t as i64).rem_euclid(self.m_t as i64) as usize;
        let j = (s + self.offset_s as i64).rem_euclid(self.m_s as i64) as usize;
        i * self.m_s + j
    }

    /// Filters innovations given on the torus (layout `t * m_s + s`) and returns
    /// the field window in field layout.
    pub fn apply(&self, innovations: &[f64]) -> Result<Vec<f64>> {
        let (m_t, m_s) = (self.m_t, self.m_s);
        if innovations.len() != m_t * m_s {
            return domain(format!("{} innovations for a {m_t} x {m_s} torus", innovations.len()));
        }
        let mut buf: Vec<Complex64> = innovations.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft2_forward(&mut buf, m_t, m_s, self.exec);
        // multiply and conjugate, so a second forward transform inverts
        self.exec.for_chunks(&mut buf, m_s, |j, row| {
            let h = &self.transfer[j * m_s..(j + 1) * m_s];
            for (c, g) in row.iter_mut().zip(h) {
                *c = (*c * g).conj();
            }
        });
        fft2_forward(&mut buf, m_t, m_s, self.exec);
        let norm = 1.0 / (m_t * m_s) as f64;
        let mut out = vec![0.0; self.width * self.height];
        for s in 0..self.height {
            for t in 0..self.width {
                out[s * self.width + t] = buf[self.torus_index(t as i64, s as i64)].re * norm;
            }
        }
        Ok(out)
    }
}

/// Innovation grid on the torus of `filter`, one stream lane per torus row.
fn torus_innovations(filter: &ArFilter, law: &InnovationLaw, seed: MasterSeed, component: u64) -> Vec<f64> {
    let (m_t, m_s) = filter.padded_extent();
    let mut eps = vec![0.0; m_t * m_s];
    filter.exec.for_chunks(&mut eps, m_s, |i, row| {
        let mut rng = seed.stream(component, 1 + i as u64);
        for v in row.iter_mut() {
            *v = law.sample(&mut rng);
        }
    });
    eps
}

fn model_params(model: WalkModel, draw: CoefficientDraw, law: &InnovationLaw, tol: f64) -> serde_json::Value {
    json!({ "model": model.tag(), "a": draw.a(), "gap": draw.gap(), "innovations": law, "tol": tol })
}

/// Stationary autoregressive field with coefficient `draw`, using stream
/// component `component` of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ar_field(
    model: WalkModel,
    draw: CoefficientDraw,
    law: &InnovationLaw,
    width: usize,
    height: usize,
    seed: MasterSeed,
    component: u64,
    opts: ArOptions,
) -> Result<LatticeField> {
    let filter = ArFilter::new(model, draw, width, height, opts)?;
    let eps = torus_innovations(&filter, law, seed, component);
    let values = filter.apply(&eps)?;
    let mut params = model_params(model, draw, law, opts.tol);
    params["component"] = json!(component);
    LatticeField::new(width, height, values, FieldMeta::new(seed.0, "ar", params))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AggregateOptions {
    pub ar: ArOptions,
    /// Innovation law; `None` picks [`InnovationLaw::standard`].
    pub innovations: Option<InnovationLaw>,
}


/// `N^{-1/alpha} sum_i X_i` over independent components with coefficients
/// drawn from the mixing law of `spec`. Component `i` draws its coefficient
/// from lane 0 and its innovations from lanes `1..` of stream `i`.
pub fn aggregate_field(
    spec: &StableLimitSpec,
    n_components: usize,
    width: usize,
    height: usize,
    seed: MasterSeed,
    opts: AggregateOptions,
) -> Result<LatticeField> {
    if n_components == 0 {
        return domain("at least one component is needed");
    }
    let law = match opts.innovations {
        Some(l) => l,
        None => InnovationLaw::standard(spec.alpha())?,
    };
    if law.alpha != spec.alpha() {
        return domain(format!("innovation index {} differs from the limit index {}", law.alpha, spec.alpha()));
    }
    let model = spec.model();
    let mut acc = vec![0.0; width * height];
    for i in 0..n_components as u64 {
        let draw = sample_mixing(spec.mixing(), &mut seed.stream(i, 0));
        let filter = ArFilter::new(model, draw, width, height, opts.ar)?;
        let eps = torus_innovations(&filter, &law, seed, i);
        for (a, v) in acc.iter_mut().zip(filter.apply(&eps)?) {
            *a += v;
        }
    }
    let norm = (n_components as f64).powf(-1.0 / spec.alpha());
    acc.iter_mut().for_each(|v| *v *= norm);
    let params = json!({
        "model": model.tag(),
        "alpha": spec.alpha(),
        "beta": spec.beta(),
        "mixing_standard": spec.mixing().is_standard(),
        "n_components": n_components,
        "innovations": law,
        "tol": opts.ar.tol,
    });
    LatticeField::new(width, height, acc, FieldMeta::new(seed.0, "aggregate", params))
}

/// `sum_{t,s} g(t, s, a)^2`, by Parseval on the line transform.
pub fn green_energy(model: WalkModel, gap: f64) -> f64 {
    let f = |y: f64| {
        let ls = model.line_symbol(gap, y);
        ls.amp * ls.amp * lag_sum(model, ls, 0)
    };
    let root = gap.sqrt();
    let breaks: Vec<f64> = [0.25, 1.0, 4.0, 16.0].iter().map(|k| k * root).filter(|&b| b < PI).collect();
    gauss_kronrod(f, 0.0, PI, &breaks, Tol::rel(1e-12), 2000).value / PI
}

// ---------------------------------------------------------------- Gaussian spectral fields

/// How a Gaussian field with a given spectral density is generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method")]
pub enum SynthesisMethod {
    /// Dense Cholesky factor of the quadrature covariance; at most
    /// [`MAX_CHOLESKY_CELLS`] cells.
    ExactCholesky,
    /// Random-phase synthesis on a frequency grid `refine` times finer than
    /// the field.
    SpectralFft { refine: usize },
}

pub const MAX_CHOLESKY_CELLS: usize = 4096;

/// Quadrature nodes stay this far from a singular axis, so squares do not
/// underflow; the mass dropped is of order `1e-100^{1 - 2 d}`.
const SINGULAR_OFFSET: f64 = 1e-100;

/// Relative jitter tried, in order, on the covariance diagonal.
const JITTERS: [f64; 4] = [0.0, 1e-14, 1e-12, 1e-10];

fn model_json(model: &SpectralModel) -> serde_json::Value {
    json!({ "kind": model.kind, "g_constant": model.g.is_constant() })
}

/// Covariances `r(t, s) = int e^{i(tx + sy)} f` for `0 <= t <= max_t`,
/// `|s| <= max_s`, by one tensor rule shared by all lags.
#[derive(Debug, Clone)]
pub struct CovarianceTable {
    max_t: usize,
    max_s: usize,
    values: Vec<f64>,
}

impl CovarianceTable {
    pub fn new(model: &SpectralModel, max_t: usize, max_s: usize, exec: Exec) -> Self {
        let xs = oscillation_rule(max_t.max(max_s));
        let ys = xs.clone();
        let n_s = 2 * max_s + 1;
        // inner sums over y for every x node and every s
        let inner: Vec<Vec<Complex64>> = exec.map(xs.len(), |i| {
            let x = xs[i].0;
            let mut acc = vec![Complex64::new(0.0, 0.0); n_s];
            for &(y, w) in &ys {
                let fw = w * model.eval_unchecked(x, y);
                let step = Complex64::from_polar(1.0, y);
                let mut phase = Complex64::from_polar(1.0, -(max_s as f64) * y);
                for a in acc.iter_mut() {
                    *a += fw * phase;
                    phase *= step;
                }
            }
            acc
        });
        let rows = exec.map(max_t + 1, |t| {
            let mut row = vec![0.0; n_s];
            for (i, &(x, w)) in xs.iter().enumerate() {
                let e = Complex64::from_polar(w, t as f64 * x);
                for (r, a) in row.iter_mut().zip(&inner[i]) {
                    *r += (e * a).re;
                }
            }
            row
        });
        Self { max_t, max_s, values: rows.concat() }
    }

    pub fn get(&self, t: i64, s: i64) -> f64 {
        let (t, s) = if t < 0 { (-t, -s) } else { (t, s) };
        assert!(t as usize <= self.max_t && s.unsigned_abs() as usize <= self.max_s, "lag ({t}, {s}) outside the table");
        self.values[t as usize * (2 * self.max_s + 1) + (s + self.max_s as i64) as usize]
    }
}

/// Nodes on `[-pi, pi]` for `int e^{i l x} phi(x) dx`, `|l| <= max_lag`, with
/// `phi` allowed an integrable singularity at 0: tanh-sinh on the two panels at
/// 0 and 8-point Gauss-Legendre on the rest, four panels per period.
fn oscillation_rule(max_lag: usize) -> Vec<(f64, f64)> {
    let panels = 2 * max_lag.max(4);
    let width = PI / panels as f64;
    let gl = GaussLegendre::new(8);
    let mut half = tanh_sinh_rule(0.0, width, 1.0 / 16.0, SINGULAR_OFFSET);
    for k in 1..panels {
        half.extend(gl.mapped(k as f64 * width, (k + 1) as f64 * width));
    }
    let mut out: Vec<(f64, f64)> = half.iter().rev().map(|&(x, w)| (-x, w)).collect();
    out.extend(half);
    out
}

/// Exact-law sampler: `X = L z` with `L L^T` the covariance matrix.
#[derive(Debug, Clone)]
pub struct CholeskySampler {
    model_params: serde_json::Value,
    width: usize,
    height: usize,
    factor: DMatrix<f64>,
    /// Diagonal jitter that made the factorization succeed, relative to `r(0, 0)`.
    pub jitter: f64,
}

impl CholeskySampler {
    pub fn new(model: &SpectralModel, width: usize, height: usize, exec: Exec) -> Result<Self> {
        let cells = width * height;
        if cells == 0 {
            return domain("field extent must be positive");
        }
        if cells > MAX_CHOLESKY_CELLS {
            return Err(Error::Resource(format!(
                "{cells} cells exceed the dense-factor limit {MAX_CHOLESKY_CELLS}"
            )));
        }
        let table = CovarianceTable::new(model, width - 1, height - 1, exec);
        let cov = DMatrix::from_fn(cells, cells, |i, j| {
            let (ti, si) = ((i % width) as i64, (i / width) as i64);
            let (tj, sj) = ((j % width) as i64, (j / width) as i64);
            table.get(ti - tj, si - sj)
        });
        let scale = table.get(0, 0);
        for jitter in JITTERS {
            let mut m = cov.clone();
            for i in 0..cells {
                m[(i, i)] += jitter * scale;
            }
            if let Some(ch) = m.cholesky() {
                return Ok(Self { model_params: model_json(model), width, height, factor: ch.unpack(), jitter });
            }
        }
        Err(Error::Numerical(format!(
            "covariance matrix not positive definite after relative jitter {:e}",
            JITTERS[JITTERS.len() - 1]
        )))
    }

    pub fn sample(&self, seed: MasterSeed) -> Result<LatticeField> {
        let mut z = vec![0.0; self.width * self.height];
        for (s, row) in z.chunks_mut(self.width).enumerate() {
            let mut rng = seed.stream(0, 1 + s as u64);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        let x = &self.factor * nalgebra::DVector::from_vec(z);
        let params = json!({ "model": self.model_params, "method": SynthesisMethod::ExactCholesky, "jitter": self.jitter });
        LatticeField::new(self.width, self.height, x.data.into(), FieldMeta::new(seed.0, "gaussian", params))
    }
}

/// Random-phase synthesis `X(t) = Re sum_k sqrt(m_k) (a_k + i b_k) e^{-i w_k . t}`
/// on an `m_t x m_s` frequency grid, where `m_k` is the mass of `f` on the
/// cell around `w_k` and `a_k, b_k` are independent standard normals.
///
/// The covariance of the output is `sum_k m_k cos(w_k . lag)`: the quadrature
/// of `int f cos(w . lag)` that puts each cell's mass at its centre. For box
/// sums of side `n` the relative bias of the variance falls like `(n / m)^2`
/// once `m` is several times `n` (below 0.1% at `m = 16 n` for Type II,
/// `d = 0.2`), so doubling `refine` cuts it by about four;
/// [`SpectralSynthesizer::box_variance`] gives the exact synthesized value.
#[derive(Debug, Clone)]
pub struct SpectralSynthesizer {
    model_params: serde_json::Value,
    width: usize,
    height: usize,
    refine: usize,
    m_t: usize,
    m_s: usize,
    masses: Vec<f64>,
    exec: Exec,
}

impl SpectralSynthesizer {
    pub fn new(model: &SpectralModel, width: usize, height: usize, refine: usize, exec: Exec) -> Result<Self> {
        if width == 0 || height == 0 || refine == 0 {
            return domain("field extent and refinement must be positive");
        }
        let m_t = (width * refine).next_power_of_two();
        let m_s = (height * refine).next_power_of_two();
        let masses = cell_masses(model, m_t, m_s, exec);
        Ok(Self { model_params: model_json(model), width, height, refine, m_t, m_s, masses, exec })
    }

    /// Frequency grid `(m_t, m_s)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.m_t, self.m_s)
    }

    /// Mass of the cell at frequency index `(j, k)`.
    pub fn mass(&self, j: usize, k: usize) -> f64 {
        self.masses[j * self.m_s + k]
    }

    /// Covariance of the synthesized field at lag `(t, s)`.
    pub fn covariance(&self, t: i64, s: i64) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.m_t {
            let x = 2.0 * PI * j as f64 / self.m_t as f64;
            for k in 0..self.m_s {
                let y = 2.0 * PI * k as f64 / self.m_s as f64;
                acc += self.mass(j, k) * (t as f64 * x + s as f64 * y).cos();
            }
        }
        acc
    }

    /// Variance of the synthesized `n x m` box sum.
    pub fn box_variance(&self, n: u64, m: u64) -> f64 {
        let fx: Vec<f64> = (0..self.m_t).map(|j| fejer_sq(n, 2.0 * PI * j as f64 / self.m_t as f64)).collect();
        let fy: Vec<f64> = (0..self.m_s).map(|k| fejer_sq(m, 2.0 * PI * k as f64 / self.m_s as f64)).collect();
        let rows = self.exec.map(self.m_t, |j| {
            (0..self.m_s).map(|k| self.masses[j * self.m_s + k] * fy[k]).sum::<f64>() * fx[j]
        });
        rows.iter().sum()
    }

    pub fn sample(&self, seed: MasterSeed) -> Result<LatticeField> {
        let (m_t, m_s) = (self.m_t, self.m_s);
        let mut buf = vec![Complex64::new(0.0, 0.0); m_t * m_s];
        self.exec.for_chunks(&mut buf, m_s, |j, row| {
            let mut rng = seed.stream(0, 1 + j as u64);
            for (k, c) in row.iter_mut().enumerate() {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                *c = Complex64::new(re, im) * self.masses[j * m_s + k].sqrt();
            }
        });
        fft2_forward(&mut buf, m_t, m_s, self.exec);
        let mut values = vec![0.0; self.width * self.height];
        for s in 0..self.height {
            for t in 0..self.width {
                values[s * self.width + t] = buf[t * m_s + s].re;
            }
        }
        let params = json!({
            "model": self.model_params,
            "method": SynthesisMethod::SpectralFft { refine: self.refine },
        });
        LatticeField::new(self.width, self.height, values, FieldMeta::new(seed.0, "gaussian", params))
    }
}

/// Masses of `f` on the cells `[w - d/2, w + d/2]` around the grid frequencies,
/// layout `j * m_s + k`. The cell at `pi` wraps to `-pi`.
fn cell_masses(model: &SpectralModel, m_t: usize, m_s: usize, exec: Exec) -> Vec<f64> {
    let cells_x = axis_cells(m_t);
    let cells_y = axis_cells(m_s);
    if let (SpectralKind::TypeII { d1, d2 }, true) = (model.kind, model.g.is_constant()) {
        let mx: Vec<f64> = cells_x.iter().map(|c| c.iter().map(|&(a, b)| power_mass(a, b, 2.0 * d1)).sum()).collect();
        let my: Vec<f64> = cells_y.iter().map(|c| c.iter().map(|&(a, b)| power_mass(a, b, 2.0 * d2)).sum()).collect();
        let mut out = vec![0.0; m_t * m_s];
        exec.for_chunks(&mut out, m_s, |j, row| {
            for (k, v) in row.iter_mut().enumerate() {
                *v = mx[j] * my[k];
            }
        });
        return out;
    }
    let gl = GaussLegendre::new(3);
    let rule = |pieces: &[(f64, f64)]| -> Vec<(f64, f64)> {
        let mut nodes = Vec::new();
        for &(a, b) in pieces {
            if a == 0.0 {
                nodes.extend(tanh_sinh_rule(0.0, b, 1.0 / 4.0, SINGULAR_OFFSET));
            } else if b == 0.0 {
                nodes.extend(tanh_sinh_rule(0.0, -a, 1.0 / 4.0, SINGULAR_OFFSET).into_iter().map(|(x, w)| (-x, w)));
            } else {
                nodes.extend(gl.mapped(a, b));
            }
        }
        nodes
    };
    let rules_x: Vec<Vec<(f64, f64)>> = cells_x.iter().map(|c| rule(c)).collect();
    let rules_y: Vec<Vec<(f64, f64)>> = cells_y.iter().map(|c| rule(c)).collect();
    let mut out = vec![0.0; m_t * m_s];
    exec.for_chunks(&mut out, m_s, |j, row| {
        for (k, v) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &(x, wx) in &rules_x[j] {
                for &(y, wy) in &rules_y[k] {
                    acc += wx * wy * model.eval_unchecked(x, y);
                }
            }
            *v = acc;
        }
    });
    out
}

/// Pieces of each frequency cell on one axis, split at 0.
fn axis_cells(m: usize) -> Vec<Vec<(f64, f64)>> {
    let d = 2.0 * PI / m as f64;
    (0..m)
        .map(|j| {
            let idx = if j < m / 2 { j as f64 } else { j as f64 - m as f64 };
            let c = idx * d;
            if j == 0 {
                vec![(-0.5 * d, 0.0), (0.0, 0.5 * d)]
            } else if m > 1 && j == m / 2 {
                vec![(-PI, -PI + 0.5 * d), (PI - 0.5 * d, PI)]
            } else {
                vec![(c - 0.5 * d, c + 0.5 * d)]
            }
        })
        .collect()
}

/// `int_a^b |x|^{-p}` for an interval not straddling 0.
fn power_mass(a: f64, b: f64, p: f64) -> f64 {
    if p == 0.0 {
        return b - a;
    }
    let prim = |x: f64| x.signum() * x.abs().powf(1.0 - p) / (1.0 - p);
    prim(b) - prim(a)
}

/// Gaussian field with spectral density `model`; SpectralFft refinement 0 is rejected.
pub fn simulate_gaussian_spectral(
    model: &SpectralModel,
    width: usize,
    height: usize,
    seed: MasterSeed,
    method: SynthesisMethod,
    exec: Exec,
) -> Result<LatticeField> {
    match method {
        SynthesisMethod::ExactCholesky => CholeskySampler::new(model, width, height, exec)?.sample(seed),
        SynthesisMethod::SpectralFft { refine } => {
            SpectralSynthesizer::new(model, width, height, refine, exec)?.sample(seed)
        }
    }
}

/// Flat density with unit variance per cell.
pub fn white_noise_model() -> SpectralModel {
    let unit = 1.0 / (4.0 * PI * PI);
    SpectralModel::type_ii(0.0, 0.0).expect("zero exponents are valid").with_g(GFactor::new(move |_, _| unit))
}

// ---------------------------------------------------------------- estimators

/// Two-dimensional prefix sums for O(1) rectangle sums.
#[derive(Debug, Clone)]
pub struct PrefixSums {
    width: usize,
    height: usize,
    sums: Vec<f64>,
}

impl PrefixSums {
    pub fn new(field: &LatticeField) -> Self {
        let (w, h) = (field.width, field.height);
        let mut sums = vec![0.0; (w + 1) * (h + 1)];
        for s in 0..h {
            let mut row = 0.0;
            for t in 0..w {
                row += field.get(t, s);
                sums[(s + 1) * (w + 1) + t + 1] = sums[s * (w + 1) + t + 1] + row;
            }
        }
        Self { width: w, height: h, sums }
    }

    /// Sum over `t0 .. t0 + w` by `s0 .. s0 + h`.
    pub fn rect(&self, t0: usize, s0: usize, w: usize, h: usize) -> Result<f64> {
        if t0 + w > self.width || s0 + h > self.height {
            return domain(format!(
                "rectangle [{t0}, {}) x [{s0}, {}) exceeds the {} x {} field",
                t0 + w,
                s0 + h,
                self.width,
                self.height
            ));
        }
        let at = |t: usize, s: usize| self.sums[s * (self.width + 1) + t];
        Ok(at(t0 + w, s0 + h) - at(t0, s0 + h) - at(t0 + w, s0) + at(t0, s0))
    }
}

/// Sum over the cells `1..=floor(n x)` by `1..=floor(n^gamma y)`.
pub fn partial_sum(field: &LatticeField, n: u64, gamma: f64, x: f64, y: f64) -> Result<f64> {
    if n == 0 || !(gamma > 0.0) || !(x > 0.0) || !(y > 0.0) {
        return domain("n, gamma, x and y must be positive");
    }
    let w = (n as f64 * x).floor() as usize;
    let h = ((n as f64).powf(gamma) * y).floor() as usize;
    PrefixSums::new(field).rect(0, 0, w, h)
}

/// Pooled box-sum variance at one side length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: u64,
    pub height: u64,
    pub variance: f64,
    pub stderr: f64,
    pub translates: usize,
}

/// Slope of `log Var S_n` against `2 log n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HurstEstimate {
    pub gamma: f64,
    #[serde(rename = "H_hat")]
    pub h: f64,
    pub stderr: f64,
    pub rows: Vec<VarianceRow>,
}

impl HurstEstimate {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,height,variance,stderr,translates")?;
        for r in &self.rows {
            writeln!(out, "{},{},{:e},{:e},{}", r.n, r.height, r.variance, r.stderr, r.translates)?;
        }
        Ok(())
    }
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Scaling exponent from box sums of side `n x floor(n^gamma)`.
///
/// Means are known to be zero, so variances are mean squares. Each field
/// contributes its non-overlapping translates; the standard error is a
/// leave-one-field-out jackknife, or with a single field the delta method over
/// its translates.
#[allow(non_snake_case)]
pub fn estimate_H(fields: &[LatticeField], gamma: f64, ns: &[u64], exec: Exec) -> Result<HurstEstimate> {
    let mut ladder = ns.to_vec();
    ladder.sort_unstable();
    ladder.dedup();
    if ladder.len() < 3 {
        return domain(format!("{} distinct ladder points; at least 3 are needed", ladder.len()));
    }
    if fields.is_empty() {
        return domain("no fields to estimate from");
    }
    if !(gamma > 0.0) {
        return domain(format!("aspect exponent {gamma} must be positive"));
    }
    let shapes: Vec<(u64, u64)> = ladder.iter().map(|&n| (n, box_height(n, gamma))).collect();
    for f in fields {
        for &(n, m) in &shapes {
            if n == 0 || m == 0 || n as usize > f.width || m as usize > f.height {
                return domain(format!("box {n} x {m} does not fit a {} x {} field", f.width, f.height));
            }
        }
    }
    // per field and side: (mean square, mean fourth power, translates)
    let per_field: Vec<Vec<(f64, f64, usize)>> = exec.map(fields.len(), |i| {
        let f = &fields[i];
        let pre = PrefixSums::new(f);
        shapes
            .iter()
            .map(|&(n, m)| {
                let (n, m) = (n as usize, m as usize);
                let (kx, ky) = (f.width / n, f.height / m);
                let (mut s2, mut s4) = (0.0, 0.0);
                for by in 0..ky {
                    for bx in 0..kx {
                        let v = pre.rect(bx * n, by * m, n, m).expect("tile inside the field");
                        s2 += v * v;
                        s4 += v * v * v * v;
                    }
                }
                let k = (kx * ky) as f64;
                (s2 / k, s4 / k, kx * ky)
            })
            .collect()
    });
    let nf = fields.len();
    let xs: Vec<f64> = ladder.iter().map(|&n| 2.0 * (n as f64).ln()).collect();
    let pooled: Vec<f64> = (0..shapes.len()).map(|j| per_field.iter().map(|p| p[j].0).sum::<f64>() / nf as f64).collect();
    let rows: Vec<VarianceRow> = shapes
        .iter()
        .enumerate()
        .map(|(j, &(n, m))| {
            let translates: usize = per_field.iter().map(|p| p[j].2).sum();
            let stderr = if nf > 1 {
                let var = per_field.iter().map(|p| (p[j].0 - pooled[j]).powi(2)).sum::<f64>() / (nf - 1) as f64;
                (var / nf as f64).sqrt()
            } else {
                let (m2, m4, k) = per_field[0][j];
                ((m4 - m2 * m2).max(0.0) / k as f64).sqrt()
            };
            VarianceRow { n, height: m, variance: pooled[j], stderr, translates }
        })
        .collect();
    if let Some(r) = rows.iter().find(|r| !(r.variance > 0.0)) {
        return Err(Error::Numerical(format!("zero box-sum variance at n = {}", r.n)));
    }
    let ys: Vec<f64> = pooled.iter().map(|v| v.ln()).collect();
    let h = ols_slope(&xs, &ys);
    let stderr = if nf > 1 {
        let drops: Vec<f64> = (0..nf)
            .map(|i| {
                let ys: Vec<f64> = (0..shapes.len())
                    .map(|j| ((nf as f64 * pooled[j] - per_field[i][j].0) / (nf - 1) as f64).ln())
                    .collect();
                ols_slope(&xs, &ys)
            })
            .collect();
        let mean = drops.iter().sum::<f64>() / nf as f64;
        ((nf - 1) as f64 / nf as f64 * drops.iter().map(|d| (d - mean).powi(2)).sum::<f64>()).sqrt()
    } else {
        let k = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / k;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let var: f64 =
            xs.iter().zip(&rows).map(|(x, r)| ((x - mx) * r.stderr / r.variance).powi(2)).sum::<f64>();
        var.sqrt() / sxx
    };
    Ok(HurstEstimate { gamma, h, stderr, rows })
}

/// `E X(t, s) X(t + dt, s + ds)` averaged over all cell pairs inside the field,
/// with the mean known to be zero.
pub fn lag_covariance(field: &LatticeField, dt: i64, ds: i64) -> Result<f64> {
    let (w, h) = (field.width as i64, field.height as i64);
    if dt.abs() >= w || ds.abs() >= h {
        return domain(format!("lag ({dt}, {ds}) does not fit a {w} x {h} field"));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for s in 0.max(-ds)..h.min(h - ds) {
        for t in 0.max(-dt)..w.min(w - dt) {
            acc += field.get(t as usize, s as usize) * field.get((t + dt) as usize, (s + ds) as usize);
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Mean of `cos(theta x)` with its standard error: the empirical characteristic
/// function of a symmetric law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfEstimate {
    pub theta: f64,
    pub value: f64,
    pub stderr: f64,
}

pub fn empirical_cf(samples: &[f64], theta: f64) -> Result<CfEstimate> {
    if samples.len() < 2 {
        return domain("at least two samples are needed");
    }
    let k = samples.len() as f64;
    let vals: Vec<f64> = samples.iter().map(|x| (theta * x).cos()).collect();
    let mean = vals.iter().sum::<f64>() / k;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(CfEstimate { theta, value: mean, stderr: (var / k).sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::green::{green_fft, Backend, GreenKernel};

    fn seed() -> MasterSeed {
        MasterSeed(20240611)
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let draw = |c, l| {
            let mut r = seed().stream(c, l);
            (0..4).map(|_| r.random::<u64>()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3, 7), draw(3, 7));
        assert_ne!(draw(3, 7), draw(3, 8));
        assert_ne!(draw(3, 7), draw(4, 7));
    }

    #[test]
    fn mixing_draws() {
        let law = MixingLaw::standard(0.3).unwrap();
        assert_eq!(mixing_quantile(&law, 0.0).a(), 0.0);
        let n = 1_000_000;
        let mut rng = seed().stream(0, 0);
        let draws: Vec<f64> = (0..n).map(|_| sample_mixing(&law, &mut rng).a()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let want = 1.0 / 2.3;
        assert!((mean - want).abs() < 3.0 * sd / (n as f64).sqrt(), "mean {mean} vs {want}");
        let tail = draws.iter().filter(|&&a| 1.0 - a < 0.01).count() as f64 / n as f64;
        let p = 0.01f64.powf(1.3);
        assert!((tail - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "tail {tail} vs {p}");
    }

    #[test]
    fn custom_mixing_quantiles_invert_the_distribution() {
        // phi(a) = 2 (1 - a): the standard law with beta = 1, given as a closure
        let law = MixingLaw::custom(1.0, 2.0, |a| 2.0 * (1.0 - a)).unwrap();
        let std = MixingLaw::standard(1.0).unwrap();
        for &u in &[0.0, 0.1, 0.5, 0.9, 0.999] {
            let (a, b) = (mixing_quantile(&law, u).gap(), mixing_quantile(&std, u).gap());
            assert!((a - b).abs() < 1e-9 * b.max(1e-3), "u={u}: {a} vs {b}");
        }
    }

    #[test]
    fn innovation_laws() {
        let n = 1_000_000;
        let mut rng = seed().stream(1, 0);
        let g = InnovationLaw::gaussian(1.5).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| g.sample(&mut rng)).collect();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!((var / 2.25 - 1.0).abs() < 0.01, "variance {var}");

        let st = InnovationLaw::exact_stable(1.5, 0.8).unwrap();
        let xs: Vec<f64> = (0..n).map(|_| st.sample(&mut rng)).collect();
        let cf = empirical_cf(&xs, 1.0).unwrap();
        let want = (-(0.8f64).powf(1.5)).exp();
        assert!((cf.value - want).abs() < 3.0 * cf.stderr, "cf {cf:?} vs {want}");

        let pt = InnovationLaw::pareto_tail(1.5).unwrap();
        let n = 10_000_000;
        let big = (0..n).filter(|_| pt.sample(&mut rng).abs() > 100.0).count() as f64 / n as f64;
        assert!((big * 100f64.powf(1.5) - 1.0).abs() < 0.1, "tail ratio {}", big * 1000.0);

        assert!(InnovationLaw::exact_stable(1.0, 1.0).is_err());
        assert!(InnovationLaw::pareto_tail(2.5).is_err());
    }

    #[test]
    fn impulse_response_is_the_green_function() {
        for model in [WalkModel::ThreeN, WalkModel::FourN] {
            let draw = CoefficientDraw::new(0.5).unwrap();
            let filter = ArFilter::new(model, draw, 16, 16, ArOptions::default()).unwrap();
            let (m_t, m_s) = filter.padded_extent();
            let mut eps = vec![0.0; m_t * m_s];
            eps[filter.torus_index(0, 0)] = 1.0;
            let x = filter.apply(&eps).unwrap();
            let k = GreenKernel::new(model, 0.5, 1e-14, Backend::FftInversion).unwrap();
            let grid = green_fft(&k, 16).unwrap();
            for s in 0..16 {
                for t in 0..16 {
                    let got = x[s * 16 + t];
                    assert!((got - grid.get(t as i64, s as i64)).abs() < 1e-12, "{model} ({t},{s}) {got}");
                }
            }
        }
    }

    #[test]
    fn zero_coefficient_returns_the_innovations() {
        let law = InnovationLaw::standard(1.7).unwrap();
        let draw = CoefficientDraw::new(0.0).unwrap();
        let opts = ArOptions::default();
        let f = simulate_ar_field(WalkModel::FourN, draw, &law, 8, 6, seed(), 2, opts).unwrap();
        let filter = ArFilter::new(WalkModel::FourN, draw, 8, 6, opts).unwrap();
        let eps = torus_innovations(&filter, &law, seed(), 2);
        for s in 0..6 {
            for t in 0..8 {
                let e = eps[filter.torus_index(t as i64, s as i64)];
                assert!((f.get(t, s) - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn constant_innovations_give_the_green_mass() {
        for model in [WalkModel::ThreeN, WalkModel::FourN] {
            for &a in &[0.5, 0.9, 0.99] {
                let draw = CoefficientDraw::new(a).unwrap();
                let opts = ArOptions { tol: 1e-9, ..ArOptions::default() };
                let filter = ArFilter::new(model, draw, 8, 8, opts).unwrap();
                let (m_t, m_s) = filter.padded_extent();
                let x = filter.apply(&vec![1.0; m_t * m_s]).unwrap();
                let want = 1.0 / (1.0 - a);
                for v in x {
                    assert!((v - want).abs() <= 1e-9 * want, "{model} a={a}: {v} vs {want}");
                }
            }
        }
    }

    #[test]
    fn near_unit_root_is_a_resource_error() {
        let draw = CoefficientDraw::from_gap(1e-4).unwrap();
        let err = ArFilter::new(WalkModel::ThreeN, draw, 64, 64, ArOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Resource(_)), "{err}");
    }

    #[test]
    fn fields_do_not_depend_on_the_execution_policy() {
        let law = InnovationLaw::standard(1.5).unwrap();
        let draw = CoefficientDraw::new(0.8).unwrap();
        let run = |exec| {
            let opts = ArOptions { exec, ..ArOptions::default() };
            simulate_ar_field(WalkModel::ThreeN, draw, &law, 20, 12, seed(), 5, opts).unwrap()
        };
        let (a, b) = (run(Exec::Sequential), run(Exec::Parallel));
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let model = SpectralModel::type_ii(0.2, 0.1).unwrap();
        let g = |exec| simulate_gaussian_spectral(&model, 24, 16, seed(), SynthesisMethod::SpectralFft { refine: 2 }, exec);
        let (a, b) = (g(Exec::Sequential).unwrap(), g(Exec::Parallel).unwrap());
        assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn green_energy_matches_the_grid() {
        for model in [WalkModel::ThreeN, WalkModel::FourN] {
            let k = GreenKernel::new(model, 0.7, 1e-14, Backend::FftInversion).unwrap();
            let grid = green_fft(&k, 64).unwrap();
            let direct: f64 = grid.window().iter().map(|c| c.2 * c.2).sum();
            let e = green_energy(model, 0.3);
            assert!((e - direct).abs() < 1e-10 * direct, "{model}: {e} vs {direct}");
        }
    }

    #[test]
    fn cell_masses_add_up_to_the_variance() {
        // Type I needs the generic cell rule; the total is r(0, 0)
        let model = SpectralModel::type_i(0.6, 1.2, 1.0).unwrap();
        let synth = SpectralSynthesizer::new(&model, 16, 16, 2, Exec::Sequential).unwrap();
        let table = CovarianceTable::new(&model, 0, 0, Exec::Sequential);
        let total: f64 = synth.masses.iter().sum();
        assert!((total / table.get(0, 0) - 1.0).abs() < 1e-3, "{total} vs {}", table.get(0, 0));
        let wn = SpectralSynthesizer::new(&white_noise_model(), 8, 8, 1, Exec::Sequential).unwrap();
        assert!((wn.covariance(0, 0) - 1.0).abs() < 1e-12);
        assert!(wn.covariance(1, 0).abs() < 1e-12 && wn.covariance(2, 3).abs() < 1e-12);
    }

    #[test]
    fn covariance_table_matches_closed_forms() {
        // r(t, 0) for |x|^{-2d} alone: 2 int_0^pi cos(tx) x^{-2d} dx times 2 pi
        // (flat in y); frozen from mpmath quad
        let model = SpectralModel::type_ii(0.2, 0.0).unwrap();
        let table = CovarianceTable::new(&model, 16, 3, Exec::Sequential);
        let want = [(0, 41.624_452_799_028_83), (1, 11.831941585746154), (7, 3.442_836_512_861_661), (16, 2.0800975036846717)];
        for (t, w) in want {
            let got = table.get(t, 0);
            assert!((got - w).abs() < 1e-9 * w, "t={t}: {got} vs {w}");
        }
        assert!(table.get(3, 2).abs() < 1e-10 && table.get(-3, 1).abs() < 1e-10);
    }

    #[test]
    fn synthesis_bias_shrinks_with_refinement() {
        let model = SpectralModel::type_ii(0.2, 0.2).unwrap();
        let table = CovarianceTable::new(&model, 16, 16, Exec::Sequential);
        let exact = |n: i64| -> f64 {
            let mut v = 0.0;
            for t in 0..n {
                for u in 0..n {
                    for s in 0..n {
                        for w in 0..n {
                            v += table.get(t - u, s - w);
                        }
                    }
                }
            }
            v
        };
        let want = exact(16);
        let errs: Vec<f64> = [1, 2, 4, 8]
            .iter()
            .map(|&r| {
                let synth = SpectralSynthesizer::new(&model, 32, 32, r, Exec::Sequential).unwrap();
                (synth.box_variance(16, 16) / want - 1.0).abs()
            })
            .collect();
        assert!(errs.windows(2).all(|p| p[1] < p[0]) && errs[3] < 1e-3, "{errs:?}");
    }

    #[test]
    fn cholesky_is_limited_and_matches_its_covariance() {
        let model = SpectralModel::type_ii(0.2, 0.2).unwrap();
        assert!(matches!(CholeskySampler::new(&model, 65, 64, Exec::Sequential), Err(Error::Resource(_))));
        let sampler = CholeskySampler::new(&model, 4, 3, Exec::Sequential).unwrap();
        let table = CovarianceTable::new(&model, 3, 2, Exec::Sequential);
        let l = &sampler.factor;
        let c = l * l.transpose();
        for i in 0..12 {
            for j in 0..12 {
                let want = table.get((i % 4) as i64 - (j % 4) as i64, (i / 4) as i64 - (j / 4) as i64);
                assert!((c[(i, j)] - want).abs() < 1e-10 * table.get(0, 0));
            }
        }
    }

    #[test]
    fn prefix_sums() {
        let values: Vec<f64> = (0..30).map(|i| (i * 7 % 11) as f64 - 5.0).collect();
        let f = LatticeField::new(6, 5, values, FieldMeta::new(0, "test", json!({}))).unwrap();
        let pre = PrefixSums::new(&f);
        assert_eq!(pre.rect(0, 0, 6, 5).unwrap(), f.total());
        assert_eq!(partial_sum(&f, 1, 3.7, 1.0, 1.0).unwrap(), f.get(0, 0));
        let whole = pre.rect(1, 1, 4, 3).unwrap();
        let split = pre.rect(1, 1, 2, 3).unwrap() + pre.rect(3, 1, 2, 1).unwrap() + pre.rect(3, 2, 2, 2).unwrap();
        assert!((whole - split).abs() < 1e-12);
        assert!(pre.rect(3, 0, 4, 1).is_err());
        assert!(partial_sum(&f, 4, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn hurst_ladder_needs_three_points() {
        let f = LatticeField::new(8, 8, vec![1.0; 64], FieldMeta::new(0, "test", json!({}))).unwrap();
        assert!(estimate_H(&[f], 1.0, &[2, 4, 4], Exec::Sequential).is_err());
    }

    #[test]
    fn white_noise_scaling_recovers_half_sum() {
        let model = white_noise_model();
        let synth = SpectralSynthesizer::new(&model, 256, 256, 1, Exec::default()).unwrap();
        let fields: Vec<LatticeField> = (0..8).map(|k| synth.sample(MasterSeed(100 + k)).unwrap()).collect();
        for (gamma, ns) in [(0.5, vec![16u64, 36, 64, 144]), (1.0, vec![4, 8, 16, 32]), (2.0, vec![2, 4, 8, 16])] {
            let est = estimate_H(&fields, gamma, &ns, Exec::default()).unwrap();
            let want = 0.5 * (1.0 + gamma);
            assert!((est.h - want).abs() < 2.0 * est.stderr.max(1e-3), "gamma={gamma}: {est:?}");
        }
    }

    #[test]
    fn field_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let meta = FieldMeta::new(9, "test", json!({"x": 0.1}));
        let f = LatticeField::new(3, 2, vec![0.1, -2.5, 1e-300, 3.0, 7.0, -0.0], meta.clone()).unwrap();
        let path = dir.path().join("f.bin");
        f.save(&path).unwrap();
        assert_eq!(LatticeField::load(&path).unwrap(), f);
        let mut csv = Vec::new();
        f.write_csv(&mut csv).unwrap();
        let back = LatticeField::read_csv(&csv[..], meta).unwrap();
        assert!(back.values().iter().zip(f.values()).all(|(a, b)| a == b));
        let mut bin = Vec::new();
        f.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 32 + 6 * 8);
        bin[0] = b'X';
        assert!(matches!(LatticeField::read_binary(&bin[..], f.meta.clone()), Err(Error::Format(_))));
    }
}
