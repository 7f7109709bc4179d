use lrdfield::green::*;
use lrdfield::Exec;

fn series(model: WalkModel, a: f64, t: i64, s: i64) -> f64 {
    let k = GreenKernel::new(model, a, 1e-13, Backend::Series).unwrap().with_max_terms(u64::MAX);
    green_series(&k, t, s).unwrap().value
}

#[test]
fn backends_agree_on_the_window() {
    for m in [WalkModel::ThreeN, WalkModel::FourN] {
        for &a in &[0.5, 0.9, 0.99] {
            let tol = 1e-10;
            let k = GreenKernel::new(m, a, tol, Backend::FftInversion).unwrap();
            let grid = green_fft(&k, 32).unwrap();
            let mut worst: f64 = 0.0;
            for t in -32..=32 {
                for s in -32..=32 {
                    worst = worst.max((grid.get(t, s) - series(m, a, t, s)).abs());
                }
            }
            assert!(worst <= (1e-8f64).max(3.0 * tol), "{m} a={a} worst={worst}");
            let mass = grid.total_mass() * (1.0 - a);
            assert!((mass - 1.0).abs() < 1e-6, "{m} a={a} mass={mass}");
        }
    }
}

#[test]
fn three_n_ladder_converges() {
    let ladder =
        scaling_limit_probe(WalkModel::ThreeN, 1.0, 1.0, 1.0, &[100.0, 400.0, 1600.0, 6400.0], ProbeOptions::default())
            .unwrap();
    assert!(ladder.strictly_decreasing(), "{:?}", ladder.rows);
    assert!(ladder.final_rel_err() < 0.05);
}

#[test]
fn four_n_ladder_converges() {
    let ladder =
        scaling_limit_probe(WalkModel::FourN, 1.0, 0.0, 1.0, &[100.0, 400.0, 1600.0, 6400.0], ProbeOptions::default())
            .unwrap();
    assert!(ladder.non_increasing(1e-6), "{:?}", ladder.rows);
    assert!(ladder.final_rel_err() < 0.05);
}

#[test]
fn probe_is_identical_across_execution_policies() {
    let run = |exec| {
        let opts = ProbeOptions { exec, ..ProbeOptions::default() };
        scaling_limit_probe(WalkModel::FourN, 0.5, 0.5, 2.0, &[200.0], opts).unwrap().rows[0].rescaled_green
    };
    assert_eq!(run(Exec::Parallel).to_bits(), run(Exec::Sequential).to_bits());
}

#[test]
fn rescaled_three_n_green_is_dominated() {
    let (big_c, c) = (10.0, 0.05);
    for &lambda in &[400.0f64, 1600.0] {
        for &t in &[0.05, 0.3, 1.0, 2.5] {
            for &s in &[-2.0, -0.4, 0.0, 0.7, 3.0] {
                for &z in &[0.5, 1.0, 2.0] {
                    let ti = (lambda * t).floor();
                    let si = (lambda.sqrt() * s).floor();
                    let g = lambda.sqrt() * series(WalkModel::ThreeN, 1.0 - z / lambda, ti as i64, si as i64);
                    let bound = big_c
                        * (h3_bound(t, s, z)
                            + lambda.sqrt()
                                * (-z * t - c * (lambda * t).powf(1.0 / 3.0) - c * (lambda.sqrt() * s.abs()).sqrt()).exp());
                    assert!(g <= bound, "lambda={lambda} ({t},{s},{z}) g={g} bound={bound}");
                }
            }
        }
    }
}

#[test]
fn rescaled_four_n_green_is_dominated() {
    let (big_c, c) = (10.0, 0.05);
    for &lambda in &[400.0f64, 1600.0] {
        for &t in &[0.05, 0.3, 1.0, 2.0] {
            for &s in &[0.0, 0.4, 1.5] {
                for &z in &[0.5, 1.0, 2.0] {
                    let ti = (lambda * t).floor();
                    let si = (lambda * s).floor();
                    let g = series(WalkModel::FourN, 1.0 - z / (lambda * lambda), ti as i64, si as i64);
                    let bound = big_c
                        * (h4(t, s, z).unwrap() + (-c * lambda.sqrt() * (t.abs().sqrt() + s.abs().sqrt())).exp());
                    assert!(g <= bound, "lambda={lambda} ({t},{s},{z}) g={g} bound={bound}");
                }
            }
        }
    }
}

#[test]
fn csv_window_has_header_and_all_cells() {
    let k = GreenKernel::new(WalkModel::FourN, 0.5, 1e-10, Backend::FftInversion).unwrap();
    let grid = green_fft(&k, 4).unwrap();
    let mut buf = Vec::new();
    grid.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,s,value"));
    assert_eq!(lines.count(), 81);
}
