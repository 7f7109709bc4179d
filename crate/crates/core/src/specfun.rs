//! Special functions and binomial probabilities.
//!
//! Binomial masses use Loader's saddle-point form (Stirling remainder plus
//! the deviance term), which keeps relative accuracy near machine precision
//! for trial counts far beyond what differences of log-gamma values allow.

use crate::error::{domain, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const LN_2PI: f64 = 1.837_877_066_409_345_5;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// A binomial point query `b(t; k, p)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinomialQuery {
    pub successes: u64,
    pub trials: u64,
    pub success_prob: f64,
}

impl BinomialQuery {
    pub fn new(successes: u64, trials: u64, success_prob: f64) -> Result<Self> {
        if successes > trials {
            return domain(format!("successes {successes} exceed trials {trials}"));
        }
        if !(success_prob > 0.0 && success_prob < 1.0) {
            return domain(format!("success probability {success_prob} outside (0,1)"));
        }
        Ok(Self { successes, trials, success_prob })
    }
}

/// Natural log of the gamma function for `x > 0`.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return domain(format!("log_gamma needs a positive finite argument, got {x}"));
    }
    Ok(libm::lgamma(x))
}

/// Gamma function for positive arguments.
pub fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

/// Log of the beta function `B(a, b)`.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    libm::lgamma(a) + libm::lgamma(b) - libm::lgamma(a + b)
}

/// Beta function `B(a, b)`.
pub fn beta_fn(a: f64, b: f64) -> f64 {
    ln_beta(a, b).exp()
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Remainder of Stirling's series: `ln n! - (n + 1/2) ln n + n - ln sqrt(2 pi)`.
pub(crate) fn stirlerr(n: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n < 15.0 {
        return libm::lgamma(n + 1.0) - (n + 0.5) * n.ln() + n - LN_SQRT_2PI;
    }
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance `x ln(x / m) + m - x`, accurate when `x` is close to `m`.
pub(crate) fn bd0(x: f64, m: f64) -> f64 {
    if (x - m).abs() < 0.1 * (x + m) {
        let mut v = (x - m) / (x + m);
        let mut s = (x - m) * v;
        let mut ej = 2.0 * x * v;
        v *= v;
        for j in 1..1000 {
            ej *= v;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        s
    } else {
        x * (x / m).ln() + m - x
    }
}

/// Natural log of `b(t; k, p)`; finite for every valid query.
pub fn binom_ln_pmf(q: BinomialQuery) -> f64 {
    let (t, k, p) = (q.successes as f64, q.trials as f64, q.success_prob);
    let r = 1.0 - p;
    if q.successes == 0 {
        return k * (-p).ln_1p();
    }
    if q.successes == q.trials {
        return k * p.ln();
    }
    let lc = stirlerr(k) - stirlerr(t) - stirlerr(k - t) - bd0(t, k * p) - bd0(k - t, k * r);
    let lf = LN_2PI + t.ln() + (-t / k).ln_1p();
    lc - 0.5 * lf
}

/// Binomial probability `b(t; k, p)`.
pub fn binom_pmf(q: BinomialQuery) -> f64 {
    binom_ln_pmf(q).exp()
}

/// Probability that a simple symmetric walk started at 0 sits at `v` after `u` steps.
pub fn rw1d_pmf(u: u64, v: i64) -> f64 {
    let av = v.unsigned_abs();
    if av > u || !(u + av).is_multiple_of(2) {
        return 0.0;
    }
    let succ = (u + av) / 2;
    binom_pmf(BinomialQuery { successes: succ, trials: u, success_prob: 0.5 })
}

/// Log of `rw1d_pmf`, `-inf` off the support.
pub fn rw1d_ln_pmf(u: u64, v: i64) -> f64 {
    let av = v.unsigned_abs();
    if av > u || !(u + av).is_multiple_of(2) {
        return f64::NEG_INFINITY;
    }
    binom_ln_pmf(BinomialQuery { successes: (u + av) / 2, trials: u, success_prob: 0.5 })
}

/// Argument at which `bessel_k0` switches from the power series to the continued fraction.
pub const K0_SWITCH: f64 = 2.0;

/// Modified Bessel function of the second kind of order zero.
///
/// Power series for `x <= 2`; for larger `x` Steed's continued fraction for
/// `K_0(x) e^x sqrt(2x/pi)`, which converges to full precision for all `x >= 2`
/// where the plain asymptotic series cannot.
pub fn bessel_k0(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return domain(format!("bessel_k0 needs a positive finite argument, got {x}"));
    }
    Ok(if x <= K0_SWITCH { k0_series(x) } else { k0_scaled_cf(x) * (-x).exp() })
}

/// `K_0(x) e^x`, finite for large arguments.
pub fn bessel_k0_scaled(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return domain(format!("bessel_k0 needs a positive finite argument, got {x}"));
    }
    Ok(if x <= K0_SWITCH { k0_series(x) * x.exp() } else { k0_scaled_cf(x) })
}

pub(crate) fn k0_series(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let lead = -((0.5 * x).ln() + EULER_GAMMA);
    let mut term = 1.0;
    let mut harmonic = 0.0;
    let mut i0 = 1.0;
    let mut tail = 0.0;
    for k in 1..60 {
        let kf = k as f64;
        term *= q / (kf * kf);
        harmonic += 1.0 / kf;
        i0 += term;
        tail += term * harmonic;
        if term < 1e-18 * i0 {
            break;
        }
    }
    lead * i0 + tail
}

pub(crate) fn k0_scaled_cf(x: f64) -> f64 {
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut h = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..10_000 {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < 1e-17 {
            break;
        }
    }
    let _ = h;
    (std::f64::consts::PI / (2.0 * x)).sqrt() / s
}

/// Lower incomplete gamma `gamma(a, x) = int_0^x y^{a-1} e^{-y} dy`.
///
/// Series for `x < a + 1`, Lentz continued fraction for the complement otherwise.
pub fn lower_incomplete_gamma(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() || !(x >= 0.0) || x.is_nan() {
        return domain(format!("lower_incomplete_gamma needs a > 0, x >= 0; got a={a}, x={x}"));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(gamma(a));
    }
    let lnpre = a * x.ln() - x;
    if x < a + 1.0 {
        let mut ap = a;
        let mut del = 1.0 / a;
        let mut sum = del;
        for _ in 0..10_000 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        Ok(sum * lnpre.exp())
    } else {
        Ok(gamma(a) - upper_gamma_cf(a, x, lnpre))
    }
}

fn upper_gamma_cf(a: f64, x: f64, lnpre: f64) -> f64 {
    let tiny = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / tiny;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..10_000 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    lnpre.exp() * h
}

/// Upper incomplete gamma `Gamma(a, x)`.
pub fn upper_incomplete_gamma(a: f64, x: f64) -> Result<f64> {
    if !(a > 0.0) || !(x >= 0.0) {
        return domain(format!("upper_incomplete_gamma needs a > 0, x >= 0; got a={a}, x={x}"));
    }
    if x < a + 1.0 {
        Ok(gamma(a) - lower_incomplete_gamma(a, x)?)
    } else {
        Ok(upper_gamma_cf(a, x, a * x.ln() - x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn log_gamma_values() {
        assert_eq!(log_gamma(1.0).unwrap(), 0.0);
        assert!(log_gamma(2.0).unwrap().abs() < 1e-15);
        assert!((log_gamma(0.5).unwrap() - 0.572_364_942_924_700_1).abs() < 1e-14);
        // frozen high-precision values
        assert!((log_gamma(7.3).unwrap() - 7.147_892_523_022_249).abs() < 1e-12);
        assert!(rel(log_gamma(1e6).unwrap(), 12_815_504.569_147_612) < 1e-15);
        assert!(log_gamma(0.0).is_err());
        assert!(log_gamma(-1.0).is_err());
    }

    #[test]
    fn binomial_spot_values() {
        let b = |t, k, p| binom_pmf(BinomialQuery::new(t, k, p).unwrap());
        assert_eq!(b(0, 0, 0.3), 1.0);
        assert!((b(1, 2, 0.5) - 0.5).abs() < 1e-15);
        assert!(rel(b(3, 10, 1.0 / 3.0), 120.0 * (1.0f64 / 3.0).powi(3) * (2.0f64 / 3.0).powi(7)) < 1e-13);
        // frozen high-precision values
        assert!(rel(b(333_333, 1_000_000, 1.0 / 3.0), 8.462_841_284_887_981e-4) < 1e-10);
        assert!(rel(b(500_300, 1_000_000, 0.5), 6.664_491_519_344_462e-4) < 1e-10);
        assert!(BinomialQuery::new(4, 3, 0.5).is_err());
    }

    #[test]
    fn binomial_log_space_is_finite_far_in_tails() {
        let l = binom_ln_pmf(BinomialQuery::new(1_000_000, 1_000_000, 1.0 / 3.0).unwrap());
        assert!(l.is_finite());
        assert!(rel(l, 1e6 * (1.0f64 / 3.0).ln()) < 1e-14);
    }

    #[test]
    fn binomial_normalization() {
        for &p in &[0.25, 1.0 / 3.0, 0.5] {
            for k in 0..=200u64 {
                let s: f64 = (0..=k).map(|t| binom_pmf(BinomialQuery::new(t, k, p).unwrap())).sum();
                assert!((s - 1.0).abs() < 1e-12, "k={k} p={p} sum={s}");
            }
        }
    }

    #[test]
    fn walk_pmf() {
        assert_eq!(rw1d_pmf(0, 0), 1.0);
        assert_eq!(rw1d_pmf(1, 0), 0.0);
        assert!((rw1d_pmf(2, 0) - 0.5).abs() < 1e-15);
        assert!((rw1d_pmf(2, 2) - 0.25).abs() < 1e-15);
        assert_eq!(rw1d_pmf(2, 4), 0.0);
    }

    #[test]
    fn hoeffding_tail_bound() {
        for &p in &[0.25, 1.0 / 3.0, 0.5] {
            for k in 1..=500u64 {
                for &tau in &[0.5, 1.0, 2.0, 3.0] {
                    let kf = k as f64;
                    let tail: f64 = (0..=k)
                        .filter(|&t| (t as f64 - kf * p).abs() > tau * kf.sqrt())
                        .map(|t| binom_pmf(BinomialQuery::new(t, k, p).unwrap()))
                        .sum();
                    assert!(tail <= 2.0 * (-2.0 * tau * tau).exp(), "k={k} tau={tau}");
                }
            }
        }
    }

    #[test]
    fn walk_pmf_gaussian_envelope() {
        for u in 0..=300u64 {
            for v in -(u as i64)..=(u as i64) {
                let bound = if u == 0 { 2.0 } else { 2.0 * (-(v * v) as f64 / (2.0 * u as f64)).exp() };
                assert!(rw1d_pmf(u, v) <= bound, "u={u} v={v}");
            }
        }
    }

    #[test]
    fn de_moivre_laplace_ratio() {
        // local limit: b(t;k,1/2) against the normal density, in the window K|t-k/2|^3 < k^2
        let big_k = 50.0;
        let mut worst: f64 = 0.0;
        for k in 50..=500u64 {
            let kf = k as f64;
            let var = kf * 0.25;
            for t in 0..=k {
                let dev = t as f64 - 0.5 * kf;
                if big_k * dev.abs().powi(3) >= kf * kf {
                    continue;
                }
                let gauss = (-dev * dev / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
                let b = binom_pmf(BinomialQuery::new(t, k, 0.5).unwrap());
                worst = worst.max((b / gauss - 1.0).abs());
            }
        }
        let c = worst * big_k;
        assert!(c <= 10.0, "recorded constant {c}");
    }

    #[test]
    fn k0_values() {
        assert!(rel(bessel_k0(1.0).unwrap(), 0.421_024_438_240_708_3) < 1e-13);
        assert!(rel(bessel_k0(2.0).unwrap(), 0.113_893_872_749_533_4) < 1e-13);
        // frozen values from the integral representation int_0^inf exp(-x cosh t) dt
        assert!(rel(bessel_k0(1e-6).unwrap(), 13.931_442_073_626_42) < 1e-12);
        assert!(rel(bessel_k0(0.3).unwrap(), 1.372_460_060_544_297) < 1e-12);
        assert!(rel(bessel_k0(7.5).unwrap(), 2.491_776_163_561_144e-4) < 1e-12);
        assert!(rel(bessel_k0(40.0).unwrap(), 8.392_861_100_099_567e-19) < 1e-12);
        assert!(rel(bessel_k0(700.0).unwrap(), 4.669_776_431_685_377e-306) < 1e-10);
        let x: f64 = 500.0;
        let lead = bessel_k0_scaled(x).unwrap() * (2.0 * x / std::f64::consts::PI).sqrt();
        assert!((lead - 1.0).abs() < 1e-3);
        assert!(bessel_k0(0.0).is_err());
    }

    #[test]
    fn k0_branches_agree_near_switch() {
        let mut x = 1.5;
        while x <= 2.5 {
            let s = k0_series(x);
            let c = k0_scaled_cf(x) * (-x).exp();
            assert!(rel(s, c) < 1e-12, "x={x}");
            x += 0.05;
        }
    }

    #[test]
    fn incomplete_gamma_values() {
        assert!(rel(lower_incomplete_gamma(1.0, 1.0).unwrap(), 1.0 - (-1.0f64).exp()) < 1e-14);
        assert_eq!(lower_incomplete_gamma(0.8, 0.0).unwrap(), 0.0);
        // frozen quadrature values
        assert!(rel(lower_incomplete_gamma(0.8, 0.25).unwrap(), 0.369_996_309_609_967_6) < 1e-9);
        assert!(rel(lower_incomplete_gamma(0.8, 5.0).unwrap(), 1.159_507_766_894_105) < 1e-9);
        assert!(rel(lower_incomplete_gamma(2.5, 1.0).unwrap(), 0.200_537_596_290_034_7) < 1e-9);
        assert!(rel(lower_incomplete_gamma(0.8, 1e6).unwrap(), gamma(0.8)) < 1e-12);
        assert!(lower_incomplete_gamma(0.0, 1.0).is_err());
        assert!(lower_incomplete_gamma(1.0, -1.0).is_err());
    }
}
