use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lrdfield(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrdfield")).arg("--out").arg(out).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn green_limit_check_passes_and_writes_the_ladder() {
    let dir = tempfile::tempdir().unwrap();
    let o = lrdfield(
        dir.path(),
        &["green", "limit", "--model", "3n", "--t", "1", "--s", "1", "--z", "1", "--lambdas", "100,400,1600,6400", "--check"],
    );
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(stdout(&o).lines().count(), 1);
    let csv = fs::read_to_string(dir.path().join("green_limit_3n.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("lambda,rescaled_green,limit_kernel,rel_err"));
    assert_eq!(lines.count(), 4);
    assert!(dir.path().join("green_limit.manifest.toml").exists());
}

#[test]
fn four_n_exponent_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = lrdfield(dir.path(), &["limits", "htable", "--model", "4n", "--alpha", "2", "--beta", "0.4", "--gammas", "0.5,1,2"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let csv = fs::read_to_string(dir.path().join("limits_htable_4n.csv")).unwrap();
    let rows: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect();
    // (alpha gamma + alpha - 2 beta)/alpha below 1, (gamma - 1 + 2(alpha - beta))/alpha from 1 on
    let want = [(0.5, 1.1), (1.0, 1.6), (2.0, 2.1)];
    for ((g, h), (wg, wh)) in rows.iter().zip(want) {
        assert_eq!(*g, wg);
        assert!((h - wh).abs() < 1e-12, "gamma={g}: {h}");
    }
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    // unknown config key
    let cfg = p.join("bad.toml");
    fs::write(&cfg, "[green_limit]\nbogus = 1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lrdfield"))
        .args(["--config", cfg.to_str().unwrap(), "--out", p.to_str().unwrap(), "green", "limit"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{o:?}");
    assert_eq!(code(&lrdfield(p, &["green", "limit", "--model", "5n"])), 2);
    assert_eq!(code(&lrdfield(p, &["spectra", "kappa", "--ds", "0.7"])), 3);
    assert_eq!(code(&lrdfield(p, &["green", "limit", "--z=-1"])), 3);
    // both rungs land on the zero lag
    assert_eq!(code(&lrdfield(p, &["cov", "asym", "--t", "0.01", "--s", "0", "--lambdas", "8"])), 4);
    // an increasing ladder misses the threshold only under --check
    let rising = ["green", "limit", "--lambdas", "6400,100"];
    assert_eq!(code(&lrdfield(p, &rising)), 0);
    let mut checked = rising.to_vec();
    checked.push("--check");
    assert_eq!(code(&lrdfield(p, &checked)), 5);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[run]\nseed = 11\n\n[spectra_kappa]\nds = [0.1, 0.2]\n\n[green_limit]\nlambdas = [100, 400]\nz = 2\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lrdfield"))
        .args(["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .args(["green", "limit", "--z", "0.5"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{o:?}");
    let manifest: toml::Table = fs::read_to_string(dir.path().join("green_limit.manifest.toml")).unwrap().parse().unwrap();
    let sec = manifest["green_limit"].as_table().unwrap();
    assert_eq!(sec["z"].as_float(), Some(0.5));
    assert_eq!(sec["lambdas"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["run"]["seed"].as_integer(), Some(11));
    assert_eq!(manifest["run"]["command"].as_str(), Some("green limit"));
}

fn replay_matches(args: &[&str], outputs: &[&str]) {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let o = lrdfield(first.path(), args);
    assert_eq!(code(&o), 0, "{o:?}");
    let section = format!("{}_{}", args[0], args[1]);
    let manifest = first.path().join(format!("{section}.manifest.toml"));
    let o = lrdfield(second.path(), &["replay", manifest.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{o:?}");
    for name in outputs {
        let a = fs::read(first.path().join(name)).unwrap();
        let b = fs::read(second.path().join(name)).unwrap();
        assert!(a == b, "{name} differs after replay");
    }
    let m1 = fs::read_to_string(&manifest).unwrap().replace(first.path().to_str().unwrap(), "");
    let m2 = fs::read_to_string(second.path().join(format!("{section}.manifest.toml")))
        .unwrap()
        .replace(second.path().to_str().unwrap(), "");
    assert_eq!(m1, m2);
}

#[test]
fn manifests_replay_bit_exactly() {
    replay_matches(&["spectra", "var", "--ns", "64,256", "--gammas", "0.5,2", "--d2", "0.3"], &["spectra_var_type_ii.csv"]);
    replay_matches(&["green", "eval", "--model", "4n", "--a", "0.7", "--half-width", "4"], &["green_eval_4n.csv"]);
    replay_matches(&["cov", "asym", "--lambdas", "8,16"], &["cov_asym_4n.csv"]);
    replay_matches(
        &["sim", "gauss", "--fields", "2", "--width", "32", "--height", "16", "--seed", "42"],
        &["fields/gauss_type_ii_0000.bin", "fields/gauss_type_ii_0001.bin"],
    );
    replay_matches(
        &["sim", "aggregate", "--components", "5", "--width", "16", "--height", "16", "--beta", "0.6", "--seed", "3"],
        &["fields/aggregate_3n_0000.bin"],
    );
}

#[test]
fn seeds_change_simulations() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["sim", "gauss", "--width", "16", "--height", "16"];
    lrdfield(a.path(), &[&args[..], &["--seed", "1"]].concat());
    lrdfield(b.path(), &[&args[..], &["--seed", "2"]].concat());
    let name = "fields/gauss_type_ii_0000.bin";
    assert_ne!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
}

#[test]
fn simulated_white_noise_estimates_unit_exponent() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = lrdfield(p, &["sim", "gauss", "--model", "white", "--fields", "8", "--width", "256", "--height", "256", "--refine", "1"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let o = lrdfield(p, &["estimate", "hurst", "--prefix", "gauss_white", "--ns", "4,8,16,32", "--expect", "1", "--h-tol", "0.05", "--check"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("estimate_hurst.json")).unwrap()).unwrap();
    assert!((json["H_hat"].as_f64().unwrap() - 1.0).abs() < 0.05);
    let csv = fs::read_to_string(p.join("estimate_hurst.csv")).unwrap();
    assert!(csv.starts_with("n,height,variance,stderr,translates\n"));
}

#[test]
fn gaussian_type_ii_probes_classify_without_fields() {
    let dir = tempfile::tempdir().unwrap();
    let o = lrdfield(dir.path(), &["report", "classify", "--model", "type_ii", "--expect", "TypeII", "--check"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).contains("verdict TypeII"));
    let csv = fs::read_to_string(dir.path().join("report_classify_type_ii.csv")).unwrap();
    assert!(csv.starts_with("gamma,H_theory,H_hat,stderr,consistent,horizontal,vertical\n"));
}

#[test]
fn type_i_gaussian_is_type_one_at_its_exponent_ratio() {
    // gamma0 = H1/H2 = 0.5; off it the limits are degenerate in one direction
    let dir = tempfile::tempdir().unwrap();
    let o = lrdfield(
        dir.path(),
        &["report", "classify", "--model", "type_i", "--h1", "0.4", "--h2", "0.8", "--gammas", "0.25,0.5,1", "--expect", "TypeI_anisotropic", "--check"],
    );
    assert_eq!(code(&o), 0, "{o:?}");
}

#[test]
fn density_surface_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = lrdfield(dir.path(), &["spectra", "density", "--model", "type_ii", "--grid", "8"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let csv = fs::read_to_string(dir.path().join("spectra_density_type_ii.csv")).unwrap();
    assert_eq!(csv.lines().count(), 65);
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap() > 0.0));
}
