//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria listed in `KNOWN_FAILURES` are reported but do not fail the run;
//! any other failure, or a known failure that starts passing, exits non-zero.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simdiag::apps::{markov_pipeline, simulate_markov_chain, simulate_var, var_pipeline, PipelineOptions};
use simdiag::estimators::MatrixEstimate;
use simdiag::hypothesis::{
    commutator_covariance, commutator_test, generalized_wald, multi_eig_gamma_test, multi_eig_test,
    partial_test, Epsilon, EstimateBundle, PartialVariant,
};
use simdiag::linalg::{numerical_rank, truncated_svd, vec, Mat, Vector};
use simdiag::optim::{
    joint_diagonalize, off_criterion, partial_objective, partial_subspace, simplex_qp_stationary,
    OptimOptions, SimplexOptions,
};
use simdiag::simharness::{
    gen_multi, gen_partial, gen_two_sample, ks_uniform, run_replicates, wishart_identity, Design, SimConfig,
    Snr,
};
use simdiag::statdist::{box_gamma_params, RefDistribution};

const SEED: u64 = 1;
const ALPHA: f64 = 0.05;

const KNOWN_FAILURES: &[&str] = &["multi_gamma_estimated_v", "partial_tests"];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn config(design: Design, d: usize, p: usize, k: usize, n: usize, replicates: usize, snr: Snr) -> SimConfig {
    SimConfig {
        design,
        d,
        p,
        k,
        n,
        replicates,
        snr,
        epsilon: Epsilon::Auto,
        seed: SEED,
        alpha: ALPHA,
    }
}

fn rate(cfg: &SimConfig, variant: &str) -> f64 {
    let res = run_replicates(cfg).expect("simulation runs");
    assert!(
        res.failures.is_empty(),
        "{} failed replicates",
        res.failures.len()
    );
    res.variant(variant).expect("variant present").rejection_rate
}

fn two_sample_calibration() -> Outcome {
    let r = rate(
        &config(Design::TwoSample, 5, 2, 0, 250, 500, Snr::Infinite),
        "commutator",
    );
    Outcome {
        name: "two_sample_calibration",
        pass: (0.03..=0.08).contains(&r),
        detail: format!("d=5 n=250 500 reps: type-I {r:.3} (band [0.03, 0.08])"),
    }
}

fn two_sample_power() -> Outcome {
    let snr1 = rate(
        &config(Design::TwoSample, 5, 2, 0, 250, 500, Snr::Finite(1.0)),
        "commutator",
    );
    let at50 = |snr| rate(&config(Design::TwoSample, 5, 2, 0, 50, 500, snr), "commutator");
    let (inf, s50, s1) = (
        at50(Snr::Infinite),
        at50(Snr::Finite(50.0)),
        at50(Snr::Finite(1.0)),
    );
    Outcome {
        name: "two_sample_power",
        pass: snr1 >= 0.9 && inf < s50 && s50 < s1,
        detail: format!(
            "n=250 snr=1: {snr1:.3} (>= 0.90); n=50: inf {inf:.3} < snr50 {s50:.3} < snr1 {s1:.3}"
        ),
    }
}

fn multi_exact_v_uniform() -> Outcome {
    let res = run_replicates(&config(Design::Multi, 4, 8, 0, 10_000, 200, Snr::Infinite)).unwrap();
    let ks = ks_uniform(&res.variant("multi_chi2_exact_v").unwrap().p_values);
    Outcome {
        name: "multi_exact_v_uniform",
        pass: ks < 0.08 && res.failures.is_empty(),
        detail: format!("d=4 p=8 n=1e4 200 reps: KS {ks:.3} (< 0.08)"),
    }
}

fn multi_gamma_estimated_v() -> Outcome {
    let ns = [100, 1_000, 10_000, 100_000];
    let mut size = Vec::new();
    let mut power = Vec::new();
    for &n in &ns {
        if n <= 10_000 {
            size.push(rate(
                &config(Design::Multi, 4, 8, 0, n, 200, Snr::Infinite),
                "multi_gamma_estimated_v",
            ));
        }
        power.push(rate(
            &config(Design::Multi, 4, 8, 0, n, 200, Snr::Finite(10.0)),
            "multi_gamma_estimated_v",
        ));
    }
    let size_ok = size.iter().all(|&r| r <= 0.10);
    let monotone = power.windows(2).all(|w| w[1] >= w[0]);
    let final_ok = power[3] >= 0.9;
    Outcome {
        name: "multi_gamma_estimated_v",
        pass: size_ok && monotone && final_ok,
        detail: format!(
            "type-I at n=1e2,1e3,1e4: {size:.3?} (<= 0.10); power snr=10 at n=1e2..1e5: {power:.3?} (non-decreasing, >= 0.9)"
        ),
    }
}

fn partial_tests() -> Outcome {
    let mut size = Vec::new();
    for n in [100, 1_000, 10_000] {
        let res = run_replicates(&config(Design::Partial, 4, 8, 2, n, 200, Snr::Infinite)).unwrap();
        size.push((
            res.variant("partial_chi2").unwrap().rejection_rate,
            res.variant("partial_gamma").unwrap().rejection_rate,
        ));
    }
    let res = run_replicates(&config(Design::Partial, 4, 8, 2, 10_000, 200, Snr::Finite(10.0))).unwrap();
    let pw = (
        res.variant("partial_chi2").unwrap().rejection_rate,
        res.variant("partial_gamma").unwrap().rejection_rate,
    );
    let size_ok = size.iter().all(|&(a, b)| a <= 0.10 && b <= 0.10);
    let power_ok = pw.0 >= 0.9 && pw.1 >= 0.9;
    Outcome {
        name: "partial_tests",
        pass: size_ok && power_ok,
        detail: format!(
            "d=4 p=8 k=2: type-I (chi2, gamma) at n=1e2,1e3,1e4: {size:.3?} (<= 0.10); power snr=10 n=1e4: {pw:.3?} (>= 0.9)"
        ),
    }
}

fn noisy_cov(rng: &mut ChaCha8Rng, d: usize) -> Mat {
    wishart_identity(d * d, d * d + 5, rng).unwrap() / (d * d + 5) as f64
}

fn complete_orthogonal(shared: &Mat, rng: &mut ChaCha8Rng) -> (Mat, Mat) {
    let (d, k) = shared.shape();
    let mut full = Mat::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    full.columns_mut(0, k).copy_from(shared);
    let qr = full.qr();
    let (q, r) = (qr.q(), qr.r());
    let r_k = r.view((0, 0), (k, k)).into_owned();
    let v_tilde = r_k.transpose().try_inverse().unwrap();
    (q, v_tilde)
}

fn exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst_stat: f64 = 0.0;
    let mut worst_null: f64 = 0.0;
    let mut rank_ok = true;
    for _ in 0..20 {
        let d = 4;
        let (m1, m2, _) = gen_two_sample(d, Snr::Infinite, &mut rng).unwrap();
        let e1 = MatrixEstimate::new(m1, noisy_cov(&mut rng, d), 10.0, 100).unwrap();
        let e2 = MatrixEstimate::new(m2, noisy_cov(&mut rng, d), 10.0, 100).unwrap();
        let r = commutator_test(&e1, &e2, Epsilon::Auto).unwrap();
        worst_stat = worst_stat.max(r.statistic.abs() + (1.0 - r.p_value).abs());
        let sigma_eta = commutator_covariance(&e1, &e2).unwrap();
        let vec_i = vec(&Mat::identity(d, d));
        worst_null = worst_null.max((&sigma_eta * &vec_i).amax());
        rank_ok &= numerical_rank(&sigma_eta, 1e-12).unwrap() < d * d;

        let draw = gen_multi(d, 8, Snr::Infinite, &mut rng).unwrap();
        let bundle = EstimateBundle::new(
            draw.matrices
                .iter()
                .map(|m| MatrixEstimate::new(m.clone(), noisy_cov(&mut rng, d), 100.0, 10_000).unwrap())
                .collect(),
        )
        .unwrap();
        for r in [
            multi_eig_test(&bundle, &draw.v, Epsilon::Auto).unwrap(),
            multi_eig_gamma_test(&bundle, &draw.v).unwrap(),
        ] {
            worst_stat = worst_stat.max(r.statistic.abs() + (1.0 - r.p_value).abs());
        }

        let k = 2;
        let draw = gen_partial(d, 8, k, Snr::Infinite, &mut rng).unwrap();
        let (q, v_tilde) = complete_orthogonal(&draw.shared, &mut rng);
        let bundle = EstimateBundle::new(
            draw.matrices
                .iter()
                .map(|m| MatrixEstimate::new(m.clone(), noisy_cov(&mut rng, d), 100.0, 10_000).unwrap())
                .collect(),
        )
        .unwrap();
        for variant in [PartialVariant::Chi2, PartialVariant::Gamma] {
            let r = partial_test(&bundle, &q, k, &v_tilde, Epsilon::Auto, variant).unwrap();
            worst_stat = worst_stat.max(r.statistic.abs() + (1.0 - r.p_value).abs());
        }
    }
    Outcome {
        name: "exactness",
        pass: worst_stat == 0.0 && worst_null <= 1e-10 && rank_ok,
        detail: format!(
            "20 draws, 5 statistics each: max |T| + |1 - p| = {worst_stat:e}; max |Sigma_eta vec(I)| = {worst_null:e}; rank < d^2: {rank_ok}"
        ),
    }
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize, ridge: f64) -> Mat {
    let b = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() + Mat::identity(n, n) * ridge
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut wald_err: f64 = 0.0;
    let mut gamma_err: f64 = 0.0;
    let mut mp_err: f64 = 0.0;
    for _ in 0..50 {
        let s = random_psd(&mut rng, 2, 0.5);
        let r = Vector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let c_n: f64 = 3.0;
        let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
        let hand =
            c_n * c_n * (s[(1, 1)] * r[0] * r[0] - 2.0 * s[(0, 1)] * r[0] * r[1] + s[(0, 0)] * r[1] * r[1])
                / det;
        let got = generalized_wald(&r, &s, c_n, 0.0).unwrap();
        wald_err = wald_err.max(rel_err(got.statistic, hand));

        let s3 = random_psd(&mut rng, 3, 0.5);
        let r3 = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let inv = s3.clone().try_inverse().unwrap();
        let mut brute = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                brute += r3[i] * inv[(i, j)] * r3[j];
            }
        }
        let got = generalized_wald(&r3, &s3, 1.0, 0.0).unwrap();
        wald_err = wald_err.max(rel_err(got.statistic, brute));

        let n = rng.random_range(2..8);
        let theta = random_psd(&mut rng, n, 0.0);
        if let RefDistribution::Gamma(g) = box_gamma_params(&theta).unwrap() {
            let tr = theta.trace();
            let tr2 = (&theta * &theta).trace();
            gamma_err = gamma_err
                .max(rel_err(g.mean(), tr))
                .max(rel_err(g.variance(), 2.0 * tr2));
        } else {
            gamma_err = f64::INFINITY;
        }

        let a = Mat::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        for eps in [0.0, 0.5] {
            let t = truncated_svd(&a, eps).unwrap();
            let (p, x) = (t.truncated(), t.pseudo_inverse());
            let px = &p * &x;
            let xp = &x * &p;
            mp_err = mp_err
                .max((&px * &p - &p).amax())
                .max((&xp * &x - &x).amax())
                .max((&px - px.transpose()).amax())
                .max((&xp - xp.transpose()).amax());
        }
    }
    Outcome {
        name: "oracles",
        pass: wald_err <= 1e-10 && gamma_err <= 1e-10 && mp_err <= 1e-8,
        detail: format!(
            "Wald vs hand/brute force {wald_err:e} (<= 1e-10); Box gamma moments {gamma_err:e} (<= 1e-10); Moore-Penrose {mp_err:e} (<= 1e-8)"
        ),
    }
}

fn lazy_towards(pi: &Vector, a: f64) -> Mat {
    let d = pi.len();
    Mat::from_fn(d, d, |r, s| a * pi[s] + if r == s { 1.0 - a } else { 0.0 })
}

fn random_simplex(rng: &mut ChaCha8Rng, d: usize) -> Vector {
    let x = Vector::from_fn(d, |_, _| rng.random_range(0.05..1.0));
    let s = x.sum();
    x / s
}

fn random_stochastic(rng: &mut ChaCha8Rng, d: usize) -> Mat {
    let mut p = Mat::from_fn(d, d, |_, _| rng.random_range(0.05..1.0));
    for mut row in p.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    p
}

fn optimizer_recovery() -> Outcome {
    let mut joint_ok = 0;
    let mut partial_ok = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = OptimOptions {
            seed,
            ..OptimOptions::default()
        };
        let draw = gen_multi(4, 8, Snr::Infinite, &mut rng).unwrap();
        let jd = joint_diagonalize(&draw.matrices, opts).unwrap();
        if off_criterion(&jd.v_hat, &draw.matrices) < 1e-8 {
            joint_ok += 1;
        }
        let draw = gen_partial(4, 8, 2, Snr::Infinite, &mut rng).unwrap();
        let sub = partial_subspace(&draw.matrices, 2, opts).unwrap();
        if partial_objective(&sub.q_hat, &draw.matrices, 2) < 1e-8 {
            partial_ok += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut shared_err: f64 = 0.0;
    for _ in 0..20 {
        let pi = random_simplex(&mut rng, 4);
        let pair = [lazy_towards(&pi, 0.3), lazy_towards(&pi, 0.9)];
        let res = simplex_qp_stationary(&pair, SimplexOptions::default()).unwrap();
        shared_err = shared_err.max((&res.x - &pi).amax());
    }

    let mut grid_gap = f64::NEG_INFINITY;
    for _ in 0..5 {
        let pair = [random_stochastic(&mut rng, 3), random_stochastic(&mut rng, 3)];
        let res = simplex_qp_stationary(&pair, SimplexOptions::default()).unwrap();
        let objective = |x: &Vector| {
            pair.iter()
                .map(|p| ((p.transpose() - Mat::identity(3, 3)) * x).norm_squared())
                .sum::<f64>()
        };
        let mut best = f64::INFINITY;
        for i in 0..=1000 {
            for j in 0..=(1000 - i) {
                let x = Vector::from_row_slice(&[i as f64, j as f64, (1000 - i - j) as f64]) / 1000.0;
                best = best.min(objective(&x));
            }
        }
        grid_gap = grid_gap.max(res.objective - best);
    }

    Outcome {
        name: "optimizer_recovery",
        pass: joint_ok >= 95 && partial_ok >= 90 && shared_err <= 1e-6 && grid_gap <= 1e-12,
        detail: format!(
            "joint off < 1e-8 in {joint_ok}/100 (>= 95); partial f < 1e-8 in {partial_ok}/100 (>= 90); shared pi error {shared_err:e} (<= 1e-6); QP objective minus 1e-3 grid minimum {grid_gap:e} (<= 0)"
        ),
    }
}

fn shared_phis(rng: &mut ChaCha8Rng, subjects: usize) -> Vec<Mat> {
    let v = loop {
        let v = Mat::from_fn(
            3,
            3,
            |i, j| if i == j { 1.0 } else { rng.random_range(-0.4..0.4) },
        );
        if simdiag::linalg::condition_number(&v).unwrap() < 5.0 {
            break v;
        }
    };
    let v_inv = v.clone().try_inverse().unwrap();
    (0..subjects)
        .map(|_| {
            let dg = Vector::from_fn(3, |_, _| rng.random_range(-0.7..0.7));
            &v * Mat::from_diagonal(&dg) * &v_inv
        })
        .collect()
}

fn apps_synthetic() -> Outcome {
    let seeds = 100u64;
    let opts = PipelineOptions::default();
    let mut var_keep = 0;
    let mut var_reject = 0;
    let mut markov_keep = 0;
    let mut markov_reject = 0;
    let pi = Vector::from_row_slice(&[0.5, 0.25, 0.25]);
    let pi_other = Vector::from_row_slice(&[0.3, 0.3, 0.4]);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu = Vector::zeros(3);
        let series: Vec<Mat> = shared_phis(&mut rng, 3)
            .iter()
            .map(|phi| simulate_var(std::slice::from_ref(phi), &mu, 2000, 200, &mut rng))
            .collect();
        if var_pipeline(&series, 1, opts).unwrap().gamma.p_value >= ALPHA {
            var_keep += 1;
        }
        let unrelated: Vec<Mat> = (0..3)
            .map(|_| {
                let phi = Mat::from_fn(3, 3, |_, _| rng.random_range(-0.35..0.35));
                simulate_var(&[phi], &mu, 2000, 200, &mut rng)
            })
            .collect();
        if var_pipeline(&unrelated, 1, opts).unwrap().gamma.rejects(ALPHA) {
            var_reject += 1;
        }

        let a = rng.random_range(0.2..0.5);
        let b = rng.random_range(0.7..1.0);
        let chains = vec![
            simulate_markov_chain(&lazy_towards(&pi, a), 2001, 1, &mut rng),
            simulate_markov_chain(&lazy_towards(&pi, b), 2001, 1, &mut rng),
        ];
        let out = markov_pipeline(&chains, 3, opts).unwrap();
        if out.chi2.p_value >= ALPHA && out.gamma.p_value >= ALPHA {
            markov_keep += 1;
        }
        let chains = vec![
            simulate_markov_chain(&lazy_towards(&pi, a), 2001, 1, &mut rng),
            simulate_markov_chain(&lazy_towards(&pi_other, b), 2001, 1, &mut rng),
        ];
        let out = markov_pipeline(&chains, 3, opts).unwrap();
        if out.chi2.rejects(ALPHA) && out.gamma.rejects(ALPHA) {
            markov_reject += 1;
        }
    }
    let pct = |c: i32| c as f64 / seeds as f64;
    Outcome {
        name: "apps_synthetic",
        pass: pct(var_keep) >= 0.9 && pct(markov_keep) >= 0.9 && pct(var_reject) >= 0.9 && pct(markov_reject) >= 0.9,
        detail: format!(
            "T=2000, {seeds} seeds: VAR shared kept {:.2}, unrelated rejected {:.2}; Markov shared kept {:.2}, different rejected {:.2} (all >= 0.90)",
            pct(var_keep),
            pct(var_reject),
            pct(markov_keep),
            pct(markov_reject)
        ),
    }
}

fn main() -> ExitCode {
    let checks: [fn() -> Outcome; 9] = [
        two_sample_calibration,
        two_sample_power,
        multi_exact_v_uniform,
        multi_gamma_estimated_v,
        partial_tests,
        exactness,
        oracles,
        optimizer_recovery,
        apps_synthetic,
    ];
    let mut unexpected = Vec::new();
    for check in checks {
        let start = Instant::now();
        let o = check();
        let known = KNOWN_FAILURES.contains(&o.name);
        let tag = match (o.pass, known) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!(
            "{tag} {}: {} [{:.1}s]",
            o.name,
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if o.pass == known {
            unexpected.push(o.name);
        }
    }
    if unexpected.is_empty() {
        println!("acceptance: all outcomes as recorded");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: unexpected outcome for {unexpected:?}");
        ExitCode::FAILURE
    }
}
