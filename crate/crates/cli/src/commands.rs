use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use simdiag::apps::{markov_pipeline, var_pipeline, PipelineOptions};
use simdiag::estimators::{mean_estimator, MatrixEstimate};
use simdiag::hypothesis::{
    commutator_test, llr_test, multi_eig_gamma_test, multi_eig_test, pairwise_pvalue_matrix, partial_test,
    Epsilon, EstimateBundle, PartialVariant,
};
use simdiag::linalg::Mat;
use simdiag::optim::{estimate_partial_structure, joint_diagonalize, OptimOptions};
use simdiag::simharness::{histogram_csv, run_replicates, Design, SimConfig, Snr};

use crate::io;
use crate::report::ReportDocument;
use crate::{CliError, DesignArg, MarkovArgs, MethodArg, SimulateArgs, TestArgs, VarArgs, VariantArg};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn parse_epsilon(raw: &str) -> Result<Epsilon, CliError> {
    if raw.eq_ignore_ascii_case("auto") {
        return Ok(Epsilon::Auto);
    }
    match raw.parse::<f64>() {
        Ok(e) if e >= 0.0 && e.is_finite() => Ok(Epsilon::Fixed(e)),
        _ => Err(usage(format!(
            "--epsilon must be `auto` or a non-negative number, got `{raw}`"
        ))),
    }
}

pub fn parse_snr(raw: &str) -> Result<Snr, CliError> {
    if raw.eq_ignore_ascii_case("inf") {
        return Ok(Snr::Infinite);
    }
    match raw.parse::<f64>() {
        Ok(s) if s.is_infinite() && s > 0.0 => Ok(Snr::Infinite),
        Ok(s) if s > 0.0 => Ok(Snr::Finite(s)),
        _ => Err(usage(format!(
            "--snr must be `inf` or a positive number, got `{raw}`"
        ))),
    }
}

fn check_alpha(alpha: f64) -> Result<(), CliError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("--alpha must lie in (0, 1), got {alpha}")))
    }
}

fn emit(doc: &ReportDocument, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(doc).map_err(|e| CliError::Input(e.to_string()))?;
    match out {
        Some(path) => {
            fs::write(path, text + "\n").map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn epsilon_json(e: Epsilon) -> serde_json::Value {
    match e {
        Epsilon::Auto => json!("auto"),
        Epsilon::Fixed(x) => json!(x),
    }
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let snr = parse_snr(&a.snr)?;
    let epsilon = parse_epsilon(&a.epsilon)?;
    let (design, p, k) = match a.design {
        DesignArg::TwoSample => (Design::TwoSample, 2, 0),
        DesignArg::Multi => (
            Design::Multi,
            a.p.ok_or_else(|| usage("--design multi requires --p"))?,
            0,
        ),
        DesignArg::Partial => (
            Design::Partial,
            a.p.ok_or_else(|| usage("--design partial requires --p"))?,
            a.k.ok_or_else(|| usage("--design partial requires --k"))?,
        ),
    };
    let config = SimConfig {
        design,
        d: a.d,
        p,
        k,
        n: a.n,
        replicates: a.replicates,
        snr,
        epsilon,
        seed: a.seed,
        alpha: a.alpha,
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let result = run_replicates(&config)?;

    let config_json = serde_json::to_value(&config).map_err(|e| CliError::Input(e.to_string()))?;
    let digest = io::digest_bytes(config_json.to_string().as_bytes());
    let mut doc = ReportDocument::new("simulate", digest, config_json);
    doc.scalars
        .insert("mean_runtime_secs".into(), result.mean_runtime_secs);
    doc.scalars
        .insert("failed_replicates".into(), result.failures.len() as f64);
    doc.warnings = result
        .failures
        .iter()
        .map(|f| format!("replicate {}: {}", f.replicate, f.message))
        .collect();

    fs::create_dir_all(&a.out).map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    for v in &result.variants {
        doc.labels.push(v.name.clone());
        doc.vectors
            .insert(format!("p_values/{}", v.name), v.p_values.clone());
        doc.scalars
            .insert(format!("rejection_rate/{}", v.name), v.rejection_rate);
        let dir = a.out.join(&v.name);
        fs::create_dir_all(&dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        let path = dir.join("histogram.csv");
        fs::write(&path, histogram_csv(&v.histogram))
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        println!(
            "{}: rejection rate {:.4} at alpha {}",
            v.name, v.rejection_rate, a.alpha
        );
    }
    emit(&doc, Some(&a.out.join("result.json")))
}

fn load_estimates(a: &TestArgs) -> Result<Vec<MatrixEstimate>, CliError> {
    if a.covs.len() != a.estimates.len() {
        return Err(usage(format!(
            "{} --estimate but {} --cov values",
            a.estimates.len(),
            a.covs.len()
        )));
    }
    if a.ns.len() > 1 && a.ns.len() != a.estimates.len() {
        return Err(usage("give --n once or once per --estimate"));
    }
    let mut out = Vec::with_capacity(a.estimates.len());
    for (i, (path, cov)) in a.estimates.iter().zip(&a.covs).enumerate() {
        if cov == "empirical" {
            let samples = io::sample_files(path)?
                .iter()
                .map(|f| io::read_matrix(f))
                .collect::<Result<Vec<_>, _>>()?;
            out.push(mean_estimator(&samples)?);
            continue;
        }
        let n = *a
            .ns
            .get(i)
            .or(a.ns.first())
            .ok_or_else(|| usage("--n is required unless every --cov is `empirical`"))?;
        let m = io::read_matrix(path)?;
        let sigma = io::read_matrix(Path::new(cov))?;
        let d = m.nrows();
        if sigma.nrows() != d * d {
            return Err(CliError::Input(format!(
                "{cov}: covariance is {0}x{0}, expected {1}x{1} for a {d}x{d} estimate",
                sigma.nrows(),
                d * d
            )));
        }
        out.push(MatrixEstimate::new(m, sigma, (n as f64).sqrt(), n)?);
    }
    let d = out[0].dim();
    if out.iter().any(|e| e.dim() != d) {
        return Err(CliError::Input("estimates differ in dimension".into()));
    }
    Ok(out)
}

fn test_inputs(a: &TestArgs) -> Vec<PathBuf> {
    let mut paths = a.estimates.clone();
    paths.extend(a.covs.iter().filter(|c| *c != "empirical").map(PathBuf::from));
    paths.extend(a.references.iter().cloned());
    paths.extend([&a.v, &a.q, &a.v_tilde].into_iter().flatten().cloned());
    paths
}

pub fn test(a: &TestArgs) -> Result<(), CliError> {
    let epsilon = parse_epsilon(&a.epsilon)?;
    check_alpha(a.alpha)?;
    let count = a.estimates.len();
    match a.method {
        MethodArg::Commutator | MethodArg::Llr if count != 2 => {
            return Err(usage("this method takes exactly 2 estimates"))
        }
        MethodArg::Pairwise | MethodArg::Multi if count < 2 => {
            return Err(usage("this method takes at least 2 estimates"))
        }
        MethodArg::Llr if a.references.len() != 2 => {
            return Err(usage("--method llr requires two --reference matrices"))
        }
        MethodArg::Partial if a.k.is_none() => return Err(usage("--method partial requires --k")),
        MethodArg::Partial if a.q.is_some() != a.v_tilde.is_some() => {
            return Err(usage("--q and --v-tilde must be given together"))
        }
        _ => {}
    }
    let estimates = load_estimates(a)?;
    let opts = OptimOptions {
        seed: a.seed,
        ..OptimOptions::default()
    };
    let config = json!({
        "method": method_name(a.method),
        "estimates": a.estimates,
        "covs": a.covs,
        "n": a.ns,
        "k": a.k,
        "variant": if a.variant == VariantArg::Chi2 { "chi2" } else { "gamma" },
        "epsilon": epsilon_json(epsilon),
        "alpha": a.alpha,
        "seed": a.seed,
    });
    let mut doc = ReportDocument::new("test", io::digest_files(&test_inputs(a))?, config);

    match a.method {
        MethodArg::Commutator => {
            doc.report(
                "commutator",
                commutator_test(&estimates[0], &estimates[1], epsilon)?,
            );
        }
        MethodArg::Llr => {
            let r1 = io::read_matrix(&a.references[0])?;
            let r2 = io::read_matrix(&a.references[1])?;
            doc.report("llr", llr_test(&estimates[0], &estimates[1], &r1, &r2, epsilon)?);
        }
        MethodArg::Pairwise => {
            let bundle = EstimateBundle::new(estimates)?;
            doc.matrix("pvalue_matrix", &pairwise_pvalue_matrix(&bundle, epsilon)?);
        }
        MethodArg::Multi => {
            let bundle = EstimateBundle::new(estimates)?;
            let v = match &a.v {
                Some(path) => io::read_matrix(path)?,
                None => {
                    let jd = joint_diagonalize(&bundle.matrices(), opts)?;
                    doc.warnings.extend(jd.warnings.iter().cloned());
                    jd.v_hat
                }
            };
            let report = match a.variant {
                VariantArg::Chi2 => multi_eig_test(&bundle, &v, epsilon)?,
                VariantArg::Gamma => multi_eig_gamma_test(&bundle, &v)?,
            };
            doc.report(format!("multi_{}", variant_name(a.variant)), report);
            doc.matrix("v", &v);
        }
        MethodArg::Partial => {
            let k = a.k.unwrap_or_default();
            let bundle = EstimateBundle::new(estimates)?;
            let d = bundle.dim();
            if k == 0 || k >= d {
                return Err(usage(format!("--k must satisfy 1 <= k < d = {d}")));
            }
            let (q, v_tilde): (Mat, Mat) = match (&a.q, &a.v_tilde) {
                (Some(q), Some(vt)) => (io::read_matrix(q)?, io::read_matrix(vt)?),
                _ => estimate_partial_structure(&bundle.matrices(), k, opts)?,
            };
            let variant = match a.variant {
                VariantArg::Chi2 => PartialVariant::Chi2,
                VariantArg::Gamma => PartialVariant::Gamma,
            };
            let report = partial_test(&bundle, &q, k, &v_tilde, epsilon, variant)?;
            doc.report(format!("partial_{}", variant_name(a.variant)), report);
            doc.matrix("q", &q);
            doc.matrix("v_tilde", &v_tilde);
        }
    }
    if let Some(r) = doc.reports.first() {
        doc.flags.insert("rejects".into(), r.report.rejects(a.alpha));
    }
    emit(&doc, a.out.as_deref())
}

fn method_name(m: MethodArg) -> &'static str {
    match m {
        MethodArg::Commutator => "commutator",
        MethodArg::Llr => "llr",
        MethodArg::Multi => "multi",
        MethodArg::Partial => "partial",
        MethodArg::Pairwise => "pairwise",
    }
}

fn variant_name(v: VariantArg) -> &'static str {
    match v {
        VariantArg::Chi2 => "chi2",
        VariantArg::Gamma => "gamma",
    }
}

pub fn var(a: &VarArgs) -> Result<(), CliError> {
    let epsilon = parse_epsilon(&a.epsilon)?;
    check_alpha(a.alpha)?;
    if a.series.len() < 2 {
        return Err(usage("var needs at least 2 --series"));
    }
    if a.order == 0 {
        return Err(usage("--order must be positive"));
    }
    let series = a
        .series
        .iter()
        .map(|p| io::read_series(p))
        .collect::<Result<Vec<_>, _>>()?;
    let opts = PipelineOptions {
        epsilon,
        alpha: a.alpha,
        include_intercept: !a.no_intercept,
        optim: OptimOptions {
            seed: a.seed,
            ..OptimOptions::default()
        },
    };
    let out = var_pipeline(&series, a.order, opts)?;

    let config = json!({
        "series": a.series,
        "order": a.order,
        "intercept": !a.no_intercept,
        "epsilon": epsilon_json(epsilon),
        "alpha": a.alpha,
        "seed": a.seed,
    });
    let mut doc = ReportDocument::new("var", io::digest_files(&a.series)?, config);
    doc.report("multi_gamma", out.gamma.clone());
    for pr in &out.partial {
        doc.report(format!("partial_k{}_chi2", pr.k), pr.chi2.clone());
        doc.report(format!("partial_k{}_gamma", pr.k), pr.gamma.clone());
        doc.matrix(format!("q_hat_k{}", pr.k), &pr.q_hat);
        doc.matrix(format!("v_tilde_k{}", pr.k), &pr.v_tilde);
    }
    doc.matrix("pairwise", &out.pairwise);
    doc.matrix("v_hat", &out.v_hat);
    doc.matrix("transform", &out.transform);
    let mut i = 0;
    for fit in &out.fits {
        for phi in &fit.coefficients {
            doc.matrix(format!("phi/{}", out.labels[i]), phi);
            i += 1;
        }
    }
    doc.labels = out.labels.clone();
    doc.flags.insert("decoupled".into(), out.decoupled.is_some());

    if let (Some(dir), Some(z)) = (&a.decoupled_dir, &out.decoupled) {
        fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        for (i, zi) in z.iter().enumerate() {
            io::write_series(&dir.join(format!("z_s{}.csv", i + 1)), zi)?;
        }
    }
    emit(&doc, a.out.as_deref())
}

fn check_levels(levels: &[f64]) -> Result<(), CliError> {
    let inside = levels.iter().all(|&q| q > 0.0 && q < 1.0);
    let increasing = levels.windows(2).all(|w| w[0] < w[1]);
    if levels.is_empty() || !inside || !increasing {
        return Err(usage(
            "--bins must be increasing probability levels inside (0, 1)",
        ));
    }
    Ok(())
}

pub fn markov(a: &MarkovArgs) -> Result<(), CliError> {
    let epsilon = parse_epsilon(&a.epsilon)?;
    check_alpha(a.alpha)?;
    if a.chains.len() < 2 {
        return Err(usage("markov needs at least 2 --chain"));
    }
    let mut thresholds = None;
    let chains: Vec<Vec<usize>> = match &a.bins {
        Some(levels) => {
            check_levels(levels)?;
            let values = a
                .chains
                .iter()
                .map(|p| io::read_column(p))
                .collect::<Result<Vec<_>, _>>()?;
            let pooled: Vec<f64> = values.iter().flatten().copied().collect();
            let t = io::quantile_thresholds(&pooled, levels);
            let chains = values.iter().map(|v| io::discretize(v, &t)).collect();
            thresholds = Some(t);
            chains
        }
        None => a
            .chains
            .iter()
            .map(|p| io::read_labels(p))
            .collect::<Result<Vec<_>, _>>()?,
    };
    let max_label = chains.iter().flatten().copied().max().unwrap_or(0);
    let d = match (a.d, &a.bins) {
        (Some(d), Some(levels)) if d != levels.len() + 1 => {
            return Err(usage(format!(
                "--d {d} conflicts with {} bin levels",
                levels.len()
            )))
        }
        (Some(d), _) => d,
        (None, Some(levels)) => levels.len() + 1,
        (None, None) => max_label,
    };
    let opts = PipelineOptions {
        epsilon,
        alpha: a.alpha,
        ..PipelineOptions::default()
    };
    let out = markov_pipeline(&chains, d, opts)?;

    let config = json!({
        "chains": a.chains,
        "d": d,
        "bins": a.bins,
        "epsilon": epsilon_json(epsilon),
        "alpha": a.alpha,
    });
    let mut doc = ReportDocument::new("markov", io::digest_files(&a.chains)?, config);
    doc.report("partial_chi2", out.chi2.clone());
    doc.report("partial_gamma", out.gamma.clone());
    doc.vector("pi_common", &out.pi_common);
    doc.matrix("q_hat", &out.q_hat);
    doc.scalars.insert("qp_objective".into(), out.qp_objective);
    doc.flags.insert("qp_converged".into(), out.qp_converged);
    for (i, fit) in out.fits.iter().enumerate() {
        doc.matrix(format!("p_hat/c{}", i + 1), &fit.p_hat);
        doc.vector(format!("pi_hat/c{}", i + 1), &fit.pi_hat);
    }
    if let Some(t) = thresholds {
        doc.vectors.insert("thresholds".into(), t);
    }
    emit(&doc, a.out.as_deref())
}
