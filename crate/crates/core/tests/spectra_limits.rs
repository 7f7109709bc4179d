use lrdfield::spectra::*;
use lrdfield::Exec;

#[test]
fn type_ii_partial_sum_variance_reaches_sheet_constant() {
    for &(d1, d2) in &[(0.2, 0.2), (0.1, 0.4)] {
        let m = SpectralModel::type_ii(d1, d2).unwrap();
        let target = kappa_sq(d1).unwrap() * kappa_sq(d2).unwrap();
        for &gamma in &[0.5, 1.0, 2.0] {
            let h = H_of_gamma(&m, gamma).unwrap().h;
            let raw = variance_partial_sum(&m, 4096, gamma, Exec::Parallel).unwrap();
            let norm = raw / 4096f64.powf(2.0 * h);
            assert!((norm / target - 1.0).abs() < 0.02, "({d1},{d2}) gamma={gamma} {norm} {target}");
        }
    }
}

#[test]
fn non_constant_multiplier_goes_through_the_planar_rule() {
    let m = SpectralModel::type_ii(0.2, 0.2).unwrap().with_g(GFactor::new(|x, y| 1.0 / (1.0 + x * x + y * y)));
    let h = H_of_gamma(&m, 1.0).unwrap().h;
    let target = kappa_sq(0.2).unwrap().powi(2);
    let norm = variance_partial_sum(&m, 512, 1.0, Exec::Parallel).unwrap() / 512f64.powf(2.0 * h);
    assert!((norm / target - 1.0).abs() < 0.05, "{norm} {target}");
}

#[test]
fn type_i_partial_sum_variance_approaches_limit_field() {
    let m = SpectralModel::type_i(0.5, 0.5, 1.0).unwrap();
    let limit = limit_variance(&m, 1.0, 1.0, 1.0, Exec::Parallel).unwrap();
    let h = H_of_gamma(&m, 1.0).unwrap().h;
    let mut prev = f64::INFINITY;
    for &n in &[64u64, 256, 1024] {
        let norm = variance_partial_sum(&m, n, 1.0, Exec::Parallel).unwrap() / (n as f64).powf(2.0 * h);
        let err = (norm / limit - 1.0).abs();
        assert!(err < prev, "n={n} err={err}");
        prev = err;
    }
    assert!(prev < 0.02, "{prev}");
}

#[test]
fn partial_sum_variance_is_identical_across_execution_policies() {
    let m = SpectralModel::type_i(0.6, 1.2, 1.0).unwrap();
    let a = variance_partial_sum(&m, 100, 0.5, Exec::Parallel).unwrap();
    let b = variance_partial_sum(&m, 100, 0.5, Exec::Sequential).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn degenerate_kernel_has_orthogonal_horizontal_increments() {
    let k = CovKernel::Separable { scale: 1.0, p: 0.0, q: 0.4 };
    for &(gap, dv) in &[(0.0, 0.0), (0.5, 1.0), (3.0, -0.5)] {
        let a = Rectangle::new((0.0, 1.0), (1.0, 2.0)).unwrap();
        let b = a.shifted(1.0 + gap, dv);
        let v = increment_cov_functional(&k, &a, &b, Exec::Sequential).unwrap();
        assert!(v.value.abs() <= 1e-8, "gap={gap} {v:?}");
    }
}

#[test]
fn type_i_limit_has_dependent_adjacent_increments() {
    let m = SpectralModel::type_i(0.5, 0.8, 1.0).unwrap();
    let kernel = CovKernel::Limit { model: m, gamma: 0.5 / 0.8 };
    let a = Rectangle::unit_at(0.0, 0.0);
    for b in [Rectangle::unit_at(1.0, 0.0), Rectangle::unit_at(0.0, 1.0)] {
        let v = increment_cov_functional(&kernel, &a, &b, Exec::Parallel).unwrap();
        assert!(v.value.abs() > 1e-4, "{v:?}");
        assert!(v.imag_residue.abs() <= 1e-9 * v.value.abs() + 1e-12);
    }
}

#[test]
fn self_covariance_matches_limit_variance() {
    let m = SpectralModel::type_i(0.5, 0.5, 1.0).unwrap();
    let var = limit_variance(&m, 1.0, 1.0, 1.0, Exec::Parallel).unwrap();
    let unit = Rectangle::unit_at(0.0, 0.0);
    let v = increment_cov_functional(&CovKernel::Limit { model: m, gamma: 1.0 }, &unit, &unit, Exec::Parallel).unwrap();
    assert!((v.value / var - 1.0).abs() < 1e-6, "{} {var}", v.value);
    let t2 = SpectralModel::type_ii(0.2, 0.3).unwrap();
    let var2 = limit_variance(&t2, 1.0, 1.0, 1.0, Exec::Parallel).unwrap();
    let v2 = increment_cov_functional(&CovKernel::Limit { model: t2, gamma: 1.0 }, &unit, &unit, Exec::Parallel).unwrap();
    assert!((v2.value / var2 - 1.0).abs() < 1e-12);
}

#[test]
fn far_shifted_increments_decorrelate() {
    let m = SpectralModel::type_i(0.5, 0.5, 1.0).unwrap();
    let kernel = CovKernel::Limit { model: m, gamma: 1.0 };
    let a = Rectangle::unit_at(0.0, 0.0);
    let mut prev = f64::INFINITY;
    for &shift in &[4.0, 8.0, 16.0] {
        let v = increment_cov_functional(&kernel, &a, &a.shifted(shift, 0.0), Exec::Parallel).unwrap();
        assert!(v.value.abs() < prev, "shift={shift} {v:?}");
        prev = v.value.abs();
    }
}

#[test]
fn variance_csv_header() {
    let rows = [VarianceRow { n: 8, gamma: 1.0, raw_variance: 2.0, normalized: 0.5 }];
    let mut buf = Vec::new();
    write_variance_csv(&rows, &mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("n,gamma,raw_variance,normalized\n8,1,"));
}
