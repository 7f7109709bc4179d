//! The experiments behind each subcommand.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use lrdfield::classify::{self, DependenceProbe, HurstPoint};
use lrdfield::fields::{
    aggregate_field, estimate_H, AggregateOptions, ArOptions, CholeskySampler, InnovationLaw, LatticeField,
    MasterSeed, SpectralSynthesizer,
};
use lrdfield::green::{green_fft, green_series, scaling_limit_probe, Backend, GreenKernel, ProbeOptions};
use lrdfield::spectra::{
    self, density, kappa_sq, kappa_sq_quadrature, limit_variance, variance_partial_sum, write_variance_csv,
    ScalingLaw, SpectralModel, VarianceRow,
};
use lrdfield::stable_limits::{
    cov_asymptotics, exponent_law, functional_ladder, DiscreteOptions, FunctionalOptions, MixingLaw,
    StableLimitSpec,
};
use lrdfield::{Error, Exec};

use crate::config::RunSettings;
use crate::params::*;
use crate::CliError;

/// What a subcommand reports back.
pub struct Outcome {
    pub summary: String,
    /// Acceptance verdict and its description, for commands with thresholds.
    pub check: Option<(bool, String)>,
}

impl Outcome {
    fn plain(summary: String) -> Self {
        Self { summary, check: None }
    }

    fn checked(summary: String, pass: bool, what: String) -> Self {
        Self { summary, check: Some((pass, what)) }
    }
}

fn create(run: &RunSettings, name: &str) -> Result<BufWriter<File>, CliError> {
    fs::create_dir_all(&run.out).map_err(lib)?;
    Ok(BufWriter::new(File::create(run.out.join(name)).map_err(lib)?))
}

fn write_json(run: &RunSettings, name: &str, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = create(run, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Lib(Error::Format(e.to_string())))?;
    writeln!(w).map_err(lib)?;
    w.flush().map_err(lib)
}

fn lib(e: impl Into<Error>) -> CliError {
    CliError::Lib(e.into())
}

fn finish(mut w: BufWriter<File>) -> Result<(), CliError> {
    w.flush().map_err(lib)
}

fn exec() -> Exec {
    Exec::default()
}

fn usize_of(v: u64, what: &str) -> Result<usize, CliError> {
    usize::try_from(v).map_err(|_| CliError::Config(format!("{what} = {v} is too large")))
}

pub fn green_eval(run: &RunSettings, p: &GreenEvalParams) -> Result<Outcome, CliError> {
    let model = walk(&p.model)?;
    let half = usize_of(p.half_width, "half_width")?;
    let mut w = create(run, &format!("green_eval_{}.csv", model.tag()))?;
    let series_kernel = || GreenKernel::new(model, p.a, p.tol, Backend::Series).map(|k| k.with_exec(exec()));
    let series_window = || -> Result<Vec<(i64, i64, f64)>, CliError> {
        let k = series_kernel().map_err(CliError::Lib)?;
        let hw = half as i64;
        let points: Vec<(i64, i64)> = (-hw..=hw).flat_map(|t| (-hw..=hw).map(move |s| (t, s))).collect();
        let values = exec().map(points.len(), |i| green_series(&k, points[i].0, points[i].1).map(|v| v.value));
        points.iter().zip(values).map(|(&(t, s), v)| Ok((t, s, v?))).collect()
    };
    let inverse_gap = 1.0 / (1.0 - p.a);
    match p.backend.as_str() {
        "series" => {
            writeln!(w, "t,s,value").map_err(lib)?;
            for (t, s, v) in series_window()? {
                writeln!(w, "{t},{s},{v:e}").map_err(lib)?;
            }
            finish(w)?;
            Ok(Outcome::plain(format!("green eval: {} a={} series window |t|,|s|<={half}", model.tag(), p.a)))
        }
        "fft" | "both" => {
            let k = GreenKernel::new(model, p.a, p.tol, Backend::FftInversion)?.with_exec(exec());
            let grid = green_fft(&k, half)?;
            let mass_err = (grid.total_mass() / inverse_gap - 1.0).abs();
            if p.backend == "fft" {
                grid.write_csv(&mut w)?;
                finish(w)?;
                let pass = mass_err <= 1e-6;
                return Ok(Outcome::checked(
                    format!("green eval: {} a={} mass rel err {mass_err:.2e}", model.tag(), p.a),
                    pass,
                    "grid mass within 1e-6 of 1/(1-a)".into(),
                ));
            }
            writeln!(w, "t,s,fft,series,abs_diff").map_err(lib)?;
            let mut max_diff: f64 = 0.0;
            for (t, s, v) in series_window()? {
                let f = grid.get(t, s);
                let diff = (f - v).abs();
                max_diff = max_diff.max(diff);
                writeln!(w, "{t},{s},{f:e},{v:e},{diff:e}").map_err(lib)?;
            }
            finish(w)?;
            let agree = 1e-8_f64.max(3.0 * p.tol);
            Ok(Outcome::checked(
                format!(
                    "green eval: {} a={} max |fft - series| {max_diff:.2e}, mass rel err {mass_err:.2e}",
                    model.tag(),
                    p.a
                ),
                max_diff <= agree && mass_err <= 1e-6,
                format!("backends within {agree:e} and mass within 1e-6"),
            ))
        }
        other => Err(CliError::Config(format!("unknown backend `{other}`; use fft, series or both"))),
    }
}

pub fn green_limit(run: &RunSettings, p: &GreenLimitParams) -> Result<Outcome, CliError> {
    let model = walk(&p.model)?;
    let opts = ProbeOptions { truncation_tol: p.tol, exec: exec(), ..ProbeOptions::default() };
    let ladder = scaling_limit_probe(model, p.t, p.s, p.z, &p.lambdas, opts)?;
    let mut w = create(run, &format!("green_limit_{}.csv", model.tag()))?;
    ladder.write_csv(&mut w)?;
    finish(w)?;
    let last = ladder.final_rel_err();
    let decreasing = ladder.strictly_decreasing();
    Ok(Outcome::checked(
        format!(
            "green limit: {} at ({}, {}, {}) final rel err {last:.3e}, strictly decreasing: {decreasing}",
            model.tag(),
            p.t,
            p.s,
            p.z
        ),
        decreasing && last < 0.05,
        "strictly decreasing errors with final < 0.05".into(),
    ))
}

pub fn spectra_var(run: &RunSettings, p: &SpectraVarParams) -> Result<Outcome, CliError> {
    let (id, model) = model_fields!(p).spectral()?;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for &gamma in &p.gammas {
        let h = spectra::H_of_gamma(&model, gamma)?.h;
        for &n in &p.ns {
            let raw = variance_partial_sum(&model, n, gamma, exec())?;
            rows.push(VarianceRow { n, gamma, raw_variance: raw, normalized: raw / (n as f64).powf(2.0 * h) });
        }
        if let Some(last) = rows.last() {
            let limit = limit_variance(&model, gamma, 1.0, 1.0, exec())?;
            worst = worst.max((last.normalized / limit - 1.0).abs());
        }
    }
    let mut w = create(run, &format!("spectra_var_{id}.csv"))?;
    write_variance_csv(&rows, &mut w)?;
    finish(w)?;
    Ok(Outcome::checked(
        format!("spectra var: {id} {} rows, worst rel gap to the limit at the largest n {worst:.3e}", rows.len()),
        worst <= 0.02,
        "normalized variance within 2% of the limit at the largest n".into(),
    ))
}

pub fn spectra_kappa(run: &RunSettings, p: &SpectraKappaParams) -> Result<Outcome, CliError> {
    let mut w = create(run, "spectra_kappa.csv")?;
    writeln!(w, "d,closed_form,quadrature,rel_err").map_err(lib)?;
    let mut worst: f64 = 0.0;
    for &d in &p.ds {
        let closed = kappa_sq(d)?;
        let quad = kappa_sq_quadrature(d)?;
        let rel = (quad / closed - 1.0).abs();
        worst = worst.max(rel);
        writeln!(w, "{d},{closed:.17e},{quad:.17e},{rel:.6e}").map_err(lib)?;
    }
    finish(w)?;
    Ok(Outcome::checked(
        format!("spectra kappa: {} values, worst rel err {worst:.3e}", p.ds.len()),
        worst <= 1e-6,
        "closed form within 1e-6 of the quadrature".into(),
    ))
}

pub fn spectra_density(run: &RunSettings, p: &SpectraDensityParams) -> Result<Outcome, CliError> {
    let (id, model) = model_fields!(p).spectral()?;
    if p.grid == 0 {
        return Err(CliError::Config("grid must be positive".into()));
    }
    let mut w = create(run, &format!("spectra_density_{id}.csv"))?;
    writeln!(w, "x,y,density").map_err(lib)?;
    // cell centres keep the singular axes off the grid
    let step = 2.0 * PI / p.grid as f64;
    let at = |j: u64| -PI + (j as f64 + 0.5) * step;
    let mut peak: f64 = 0.0;
    for j in 0..p.grid {
        for k in 0..p.grid {
            let (x, y) = (at(j), at(k));
            let f = density(&model, x, y)?;
            peak = peak.max(f);
            writeln!(w, "{x:.12e},{y:.12e},{f:.12e}").map_err(lib)?;
        }
    }
    finish(w)?;
    Ok(Outcome::plain(format!("spectra density: {id} on {0}x{0} cell centres, peak {peak:.4e}", p.grid)))
}

pub fn limits_jgamma(run: &RunSettings, p: &LimitsJgammaParams) -> Result<Outcome, CliError> {
    let model = walk(&p.model)?;
    let gamma = p.gamma.unwrap_or_else(|| model.gamma0());
    let spec = StableLimitSpec::standard(model, p.alpha, p.beta, gamma)?;
    let report = functional_ladder(
        &spec,
        &p.ns,
        FunctionalOptions { tol: p.tol, exec: exec() },
        DiscreteOptions { exec: exec(), ..DiscreteOptions::default() },
    )?;
    let mut w = create(run, &format!("limits_jgamma_{}.csv", model.tag()))?;
    report.write_csv(&mut w)?;
    finish(w)?;
    write_json(run, &format!("limits_jgamma_{}.json", model.tag()), &report)?;
    let gap = report.final_gap();
    Ok(Outcome::checked(
        format!(
            "limits jgamma: {} gamma={gamma} J={:.6e} final rel gap {gap:.3e}, non-increasing: {}",
            model.tag(),
            report.j_gamma,
            report.monotone()
        ),
        gap <= 0.10 && report.monotone(),
        "final gap within 10% and gaps non-increasing".into(),
    ))
}

fn regime_tag(law: &ScalingLaw) -> String {
    serde_json::to_value(law.regime).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

pub fn limits_htable(run: &RunSettings, p: &LimitsHtableParams) -> Result<Outcome, CliError> {
    let model = model_fields!(p, walk).build()?;
    let id = model.id();
    let laws = p
        .gammas
        .iter()
        .map(|&g| match &model {
            Model::Walk { model, alpha, beta } => exponent_law(*model, *alpha, *beta, g),
            Model::Spectral { model, .. } => spectra::H_of_gamma(model, g),
        })
        .collect::<lrdfield::Result<Vec<_>>>()?;
    let mut w = create(run, &format!("limits_htable_{id}.csv"))?;
    writeln!(w, "gamma,H,regime,gamma0").map_err(lib)?;
    for law in &laws {
        let g0 = law.gamma0.map(|g| g.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{g0}", law.gamma, law.h, regime_tag(law)).map_err(lib)?;
    }
    finish(w)?;
    write_json(run, &format!("limits_htable_{id}.json"), &laws)?;
    let listing: Vec<String> = laws.iter().map(|l| format!("H({})={}", l.gamma, l.h)).collect();
    Ok(Outcome::plain(format!("limits htable: {id} {}", listing.join(" "))))
}

pub fn cov_asym(run: &RunSettings, p: &CovAsymParams) -> Result<Outcome, CliError> {
    let model = walk(&p.model)?;
    let mixing = MixingLaw::standard(p.beta)?;
    let ladder = cov_asymptotics(model, &mixing, p.t, p.s, &p.lambdas, exec())?;
    let mut w = create(run, &format!("cov_asym_{}.csv", model.tag()))?;
    ladder.write_csv(&mut w)?;
    finish(w)?;
    let last = ladder.final_rel_err();
    Ok(Outcome::checked(
        format!(
            "cov asym: {} beta={} at ({}, {}) final rel err {last:.3e}, non-increasing: {}",
            model.tag(),
            p.beta,
            p.t,
            p.s,
            ladder.non_increasing()
        ),
        last <= 0.10 && ladder.non_increasing(),
        "final error within 10% and errors non-increasing".into(),
    ))
}

fn fields_dir(run: &RunSettings) -> PathBuf {
    run.out.join("fields")
}

fn save_field(dir: &Path, name: &str, field: &LatticeField) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(lib)?;
    field.save(&dir.join(format!("{name}.bin")))?;
    Ok(())
}

fn sample_variance(field: &LatticeField) -> f64 {
    field.values().iter().map(|v| v * v).sum::<f64>() / field.values().len() as f64
}

enum GaussSampler {
    Spectral(SpectralSynthesizer),
    Cholesky(CholeskySampler),
}

impl GaussSampler {
    fn new(model: &SpectralModel, width: usize, height: usize, method: &str, refine: u64) -> Result<Self, CliError> {
        match method {
            "spectral" => Ok(Self::Spectral(SpectralSynthesizer::new(
                model,
                width,
                height,
                usize_of(refine, "refine")?,
                exec(),
            )?)),
            "cholesky" => Ok(Self::Cholesky(CholeskySampler::new(model, width, height, exec())?)),
            other => Err(CliError::Config(format!("unknown method `{other}`; use spectral or cholesky"))),
        }
    }

    fn sample(&self, seed: MasterSeed) -> lrdfield::Result<LatticeField> {
        match self {
            Self::Spectral(s) => s.sample(seed),
            Self::Cholesky(c) => c.sample(seed),
        }
    }
}

pub fn sim_gauss(run: &RunSettings, p: &SimGaussParams) -> Result<Outcome, CliError> {
    let (id, model) = model_fields!(p).spectral()?;
    let (width, height) = (usize_of(p.width, "width")?, usize_of(p.height, "height")?);
    let sampler = GaussSampler::new(&model, width, height, &p.method, p.refine)?;
    let dir = fields_dir(run);
    let mut mean_var = 0.0;
    for i in 0..p.fields {
        let field = sampler.sample(MasterSeed(run.seed).child(i))?;
        mean_var += sample_variance(&field) / p.fields as f64;
        save_field(&dir, &format!("gauss_{id}_{i:04}"), &field)?;
    }
    Ok(Outcome::plain(format!(
        "sim gauss: {} {id} fields of {width}x{height} by {} in {}, mean cell variance {mean_var:.4e}",
        p.fields,
        p.method,
        dir.display()
    )))
}

fn innovation_law(name: &str, alpha: f64) -> Result<InnovationLaw, CliError> {
    Ok(match name {
        "standard" => InnovationLaw::standard(alpha)?,
        "gaussian" => InnovationLaw::gaussian(1.0)?,
        "exact_stable" => InnovationLaw::exact_stable(alpha, 1.0)?,
        "pareto_tail" => InnovationLaw::pareto_tail(alpha)?,
        other => {
            return Err(CliError::Config(format!(
                "unknown innovations `{other}`; use standard, gaussian, exact_stable or pareto_tail"
            )))
        }
    })
}

fn aggregate_options(innovations: InnovationLaw) -> AggregateOptions {
    AggregateOptions { ar: ArOptions { exec: exec(), ..ArOptions::default() }, innovations: Some(innovations) }
}

pub fn sim_aggregate(run: &RunSettings, p: &SimAggregateParams) -> Result<Outcome, CliError> {
    let model = walk(&p.model)?;
    // the aspect exponent plays no part in the simulation itself
    let spec = StableLimitSpec::standard(model, p.alpha, p.beta, model.gamma0())?;
    let law = innovation_law(&p.innovations, p.alpha)?;
    let (width, height) = (usize_of(p.width, "width")?, usize_of(p.height, "height")?);
    let components = usize_of(p.components, "components")?;
    let dir = fields_dir(run);
    for i in 0..p.fields {
        let seed = MasterSeed(run.seed).child(i);
        let field = aggregate_field(&spec, components, width, height, seed, aggregate_options(law))?;
        save_field(&dir, &format!("aggregate_{}_{i:04}", model.tag()), &field)?;
    }
    Ok(Outcome::plain(format!(
        "sim aggregate: {} {} fields of {width}x{height} from {components} components in {}",
        p.fields,
        model.tag(),
        dir.display()
    )))
}

fn load_fields(dir: &Path, prefix: &str) -> Result<Vec<LatticeField>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::Config(format!("cannot read {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "bin")
                && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("no fields matching `{prefix}*.bin` in {}", dir.display())));
    }
    paths.iter().map(|p| LatticeField::load(p).map_err(CliError::Lib)).collect()
}

pub fn estimate_hurst(run: &RunSettings, p: &EstimateHurstParams) -> Result<Outcome, CliError> {
    let dir = if p.input.is_empty() { fields_dir(run) } else { PathBuf::from(&p.input) };
    let fields = load_fields(&dir, &p.prefix)?;
    let est = estimate_H(&fields, p.gamma, &p.ns, exec())?;
    let mut w = create(run, "estimate_hurst.csv")?;
    est.write_csv(&mut w)?;
    finish(w)?;
    write_json(run, "estimate_hurst.json", &est)?;
    let summary = format!(
        "estimate hurst: {} fields, gamma={} H_hat={:.4} +- {:.4}",
        fields.len(),
        p.gamma,
        est.h,
        est.stderr
    );
    Ok(match p.expect {
        Some(h) => Outcome::checked(
            summary,
            (est.h - h).abs() <= p.h_tol,
            format!("H_hat within {} of {h}", p.h_tol),
        ),
        None => Outcome::plain(summary),
    })
}

/// Box sides `n` with integer heights `n^gamma`, spaced by at least a factor
/// 1.5 down from the largest that fits, heights and widths at least 4.
pub fn estimation_ladder(gamma: f64, size: u64) -> Vec<u64> {
    let cap = size / 2;
    let fits = |n: u64| {
        let m = (n as f64).powf(gamma);
        let r = m.round();
        (m - r).abs() <= 1e-9 * r.max(1.0) && r >= 4.0 && r <= cap as f64
    };
    let mut out = Vec::new();
    let mut bound = cap as f64;
    for n in (4..=cap).rev() {
        if (n as f64) <= bound && fits(n) {
            out.push(n);
            bound = n as f64 / 1.5;
            if out.len() == 5 {
                break;
            }
        }
    }
    out.reverse();
    out
}

pub fn report_classify(run: &RunSettings, p: &ReportClassifyParams) -> Result<Outcome, CliError> {
    let model = model_fields!(p, walk).build()?;
    let id = model.id();
    let mut gammas = p.gammas.clone();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    let opts = FunctionalOptions { tol: p.tol, exec: exec() };
    let mut probes: Vec<DependenceProbe> = Vec::with_capacity(gammas.len());
    let mut laws = Vec::with_capacity(gammas.len());
    for &g in &gammas {
        match &model {
            Model::Walk { model, alpha, beta } => {
                probes.push(classify::probe_walk(*model, *alpha, *beta, g, p.probe_tol, opts)?);
                laws.push(classify::walk_theory(*model, *alpha, *beta, g)?);
            }
            Model::Spectral { model, .. } => {
                probes.push(classify::probe_gaussian(model, g, p.probe_tol, exec())?);
                laws.push(classify::gaussian_theory(model, g)?);
            }
        }
    }
    let fields = simulate_for_classification(run, p, &model)?;
    let mut hurst = Vec::with_capacity(laws.len());
    for law in laws {
        let ladder = estimation_ladder(law.gamma, p.size);
        if fields.is_empty() || ladder.len() < 3 {
            hurst.push(HurstPoint::theory_only(law));
            continue;
        }
        let est = estimate_H(&fields, law.gamma, &ladder, exec())?;
        hurst.push(HurstPoint::with_estimate(law, est.h, est.stderr, p.z, p.h_slack));
    }
    let report = classify::classify(id.clone(), probes, hurst);
    write_json(run, &format!("report_classify_{id}.json"), &report)?;
    let mut w = create(run, &format!("report_classify_{id}.csv"))?;
    writeln!(w, "gamma,H_theory,H_hat,stderr,consistent,horizontal,vertical").map_err(lib)?;
    let tag = |i: classify::Increments| {
        serde_json::to_value(i).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
    };
    for (h, pr) in report.hurst.iter().zip(&report.probes) {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            h.gamma,
            h.theory,
            opt(h.estimate),
            opt(h.stderr),
            h.consistent,
            tag(pr.horizontal.increments),
            tag(pr.vertical.increments)
        )
        .map_err(lib)?;
    }
    finish(w)?;
    let verdict = report.verdict.to_string();
    let gamma0 = report.gamma0.map(|g| format!(" gamma0={g}")).unwrap_or_default();
    let summary = format!("report classify: {id} verdict {verdict}{gamma0} ({})", report.reason);
    Ok(match &p.expect {
        Some(want) => Outcome::checked(summary, &verdict == want, format!("verdict {want}")),
        None => Outcome::checked(
            summary,
            report.verdict != classify::Verdict::Undetermined,
            "a determined verdict".into(),
        ),
    })
}

fn simulate_for_classification(
    run: &RunSettings,
    p: &ReportClassifyParams,
    model: &Model,
) -> Result<Vec<LatticeField>, CliError> {
    let side = usize_of(p.size, "size")?;
    let seeds = (0..p.fields).map(|i| MasterSeed(run.seed).child(i));
    match model {
        Model::Spectral { model, .. } => {
            let sampler = SpectralSynthesizer::new(model, side, side, usize_of(p.refine, "refine")?, exec())?;
            seeds.map(|s| sampler.sample(s).map_err(CliError::Lib)).collect()
        }
        Model::Walk { model, alpha, beta } => {
            let spec = StableLimitSpec::standard(*model, *alpha, *beta, model.gamma0())?;
            let law = InnovationLaw::standard(*alpha)?;
            let components = usize_of(p.components, "components")?;
            seeds
                .map(|s| aggregate_field(&spec, components, side, side, s, aggregate_options(law)).map_err(CliError::Lib))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladders_have_integer_heights() {
        assert_eq!(estimation_ladder(1.0, 256), vec![24, 37, 56, 85, 128]);
        assert_eq!(estimation_ladder(0.5, 256), vec![16, 36, 64, 121]);
        assert_eq!(estimation_ladder(2.0, 256), vec![4, 7, 11]);
        assert!(estimation_ladder(0.25, 256).is_empty());
    }
}
