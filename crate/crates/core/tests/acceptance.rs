//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line; the process fails if any criterion
//! fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ikrr::actions::{apply_action, GroupActionSpec};
use ikrr::harness::{
    configure_threads, gain_report, gen_target, Experiment, ExperimentConfig, RateReport, Sweep,
};
use ikrr::kernels::{build_kernel, haar_average_kernel, space_complexity};
use ikrr::regress::{excess_risk_exact, excess_risk_mc, fit, Dataset};
use ikrr::spectra::{enumerate_eigenbasis, uniform_sample, ManifoldSpec};

// Pinned tolerances.
const WEYL_T2: (f64, f64) = (0.999, 1.001);
const WEYL_T2_SECONDS: u64 = 30;
const CIRCLE_REFLECTION: (f64, f64) = (0.995, 1.005);
const T2_HALF_SHIFT: (f64, f64) = (0.998, 1.002);
const T2_SUBTORUS: (f64, f64) = (0.999, 1.001);
const SPHERE_AXISROT: (f64, f64) = (0.98, 1.02);
const SPHERE_ANTIPODAL_FRACTION: (f64, f64) = (0.49, 0.51);
const INVARIANCE_REL: f64 = 1e-10;
const HAAR_FINITE: f64 = 1e-10;
const HAAR_CONTINUOUS: f64 = 1e-6;
const PAIRS: usize = 1000;
const RATE_SLOPE: (f64, f64) = (-0.95, -0.65);
const RATE_SINGLE_THREAD_MINUTES: u64 = 20;
const RISK_BOUND_CEILING: f64 = 10.0;
const SLOPE_DIFFERENCE: f64 = 0.08;
const GAIN: (f64, f64) = (4.0, 16.0);
const RAYLEIGH_SLACK: f64 = 1e-9;
const RANDOM_SUBSPACES: usize = 100;
const MC_RELATIVE: f64 = 0.02;
const MC_STDERRS: f64 = 3.0;
const MC_SMALL_RISK: f64 = 1e-6;
const MC_POINTS: usize = 100_000;
const MC_MODELS: usize = 20;

/// Every built-in action kind, on the manifolds it applies to.
const ACTIONS: &[(&str, &str)] = &[
    ("circle", "trivial"),
    ("circle", "reflect:0"),
    ("circle", "shift:pi/4"),
    ("circle", "signflip:0"),
    ("torus:2", "shift:pi,0"),
    ("torus:2", "perm:(0 1)"),
    ("torus:2", "reflect:0,1@pi/2"),
    ("torus:2", "signflip:0,1"),
    ("torus:2", "subtorus:[1,0]"),
    ("torus:2", "subtorus:[1,1]"),
    ("torus:2", "perm:(0 1)+shift:pi,pi"),
    ("torus:2", "subtorus:[1,0]+signflip:1"),
    ("torus:3", "perm:(0 1 2)"),
    ("torus:3", "subtorus:[1,1,0]"),
    ("sphere2", "trivial"),
    ("sphere2", "antipodal"),
    ("sphere2", "axisrot"),
    ("sphere2", "antipodal+axisrot"),
];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn within(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

fn action(manifold: &str, spec: &str) -> GroupActionSpec {
    let m: ManifoldSpec = manifold.parse().expect("manifold");
    GroupActionSpec::parse(&m, spec).expect("action")
}

/// Lattice points of `Z²` in the disc `|k|² <= r2` with `k_0` restricted by `keep`.
fn disc_count(r2: u64, keep: impl Fn(i64) -> bool) -> u64 {
    let r = r2.isqrt() as i64;
    (-r..=r)
        .filter(|&a| keep(a))
        .map(|a| 2 * (r2 - (a * a) as u64).isqrt() + 1)
        .sum()
}

fn weyl_baseline() -> Outcome {
    let start = Instant::now();
    let lambda = 1e6;
    let c = action("torus:2", "trivial").count_invariant(lambda).expect("count");
    let elapsed = start.elapsed();
    let oracle = disc_count(1_000_000, |_| true);
    let ratio = c.count as f64 / (PI * lambda);
    Outcome {
        name: "Weyl baseline T^2 trivial, lambda=1e6",
        pass: c.count == oracle && within(ratio, WEYL_T2) && elapsed <= Duration::from_secs(WEYL_T2_SECONDS),
        detail: format!(
            "N={} oracle={oracle} N/(pi*lambda)={ratio:.6} in {WEYL_T2:?}, {:.2}s <= {WEYL_T2_SECONDS}s",
            c.count,
            elapsed.as_secs_f64()
        ),
    }
}

fn finite_group_counts() -> Outcome {
    let lambda = 1e6;
    let circle = action("circle", "reflect:0").count_invariant(lambda).expect("count");
    // One invariant function per eigenvalue k², k = 0..=1000.
    let circle_oracle = 1001;
    let r1 = circle.count as f64 / lambda.sqrt();
    let torus = action("torus:2", "shift:pi,0").count_invariant(lambda).expect("count");
    let torus_oracle = disc_count(1_000_000, |a| a % 2 == 0);
    let r2 = torus.count as f64 / (PI * lambda / 2.0);
    let pred_ok = (circle.prediction.unwrap_or(f64::NAN) - lambda.sqrt()).abs() < 1e-9 * lambda.sqrt()
        && (torus.prediction.unwrap_or(f64::NAN) - PI * lambda / 2.0).abs() < 1e-9 * lambda;
    Outcome {
        name: "finite-group counts (circle reflection, T^2 shift(pi,0)), lambda=1e6",
        pass: circle.count == circle_oracle
            && torus.count == torus_oracle
            && within(r1, CIRCLE_REFLECTION)
            && within(r2, T2_HALF_SHIFT)
            && pred_ok,
        detail: format!(
            "circle N={} (oracle {circle_oracle}) N/sqrt(lambda)={r1:.6} in {CIRCLE_REFLECTION:?}; \
             T^2 N={} (oracle {torus_oracle}) N/(pi*lambda/2)={r2:.6} in {T2_HALF_SHIFT:?}",
            circle.count, torus.count
        ),
    }
}

fn continuous_group_counts() -> Outcome {
    let t = action("torus:2", "subtorus:[1,0]").count_invariant(1e6).expect("count");
    // Invariant frequencies have k_0 = 0.
    let t_oracle = 2 * 1_000_000u64.isqrt() + 1;
    let r1 = t.count as f64 / (2.0 * 1e6f64.sqrt());
    let s = action("sphere2", "axisrot").count_invariant(1e4).expect("count");
    // Zonal harmonics: one per degree with l(l+1) <= 1e4.
    let s_oracle = (0u64..).take_while(|l| l * (l + 1) <= 10_000).count() as u64;
    let r2 = s.count as f64 / 1e4f64.sqrt();
    Outcome {
        name: "continuous-group counts (T^2 subtorus, sphere axisrot)",
        pass: t.count == t_oracle && s.count == s_oracle && within(r1, T2_SUBTORUS) && within(r2, SPHERE_AXISROT),
        detail: format!(
            "T^2 N={} (oracle {t_oracle}) N/(2 sqrt(lambda))={r1:.6} in {T2_SUBTORUS:?}; \
             sphere N={} (oracle {s_oracle}) N/sqrt(lambda)={r2:.4} in {SPHERE_AXISROT:?}",
            t.count, s.count
        ),
    }
}

fn sphere_antipodal_halving() -> Outcome {
    let inv = action("sphere2", "antipodal").count_invariant(1e4).expect("count").count;
    let all = action("sphere2", "trivial").count_invariant(1e4).expect("count").count;
    let degrees: Vec<u64> = (0u64..).take_while(|l| l * (l + 1) <= 10_000).collect();
    let even: u64 = degrees.iter().filter(|l| *l % 2 == 0).map(|l| 2 * l + 1).sum();
    let total: u64 = degrees.iter().map(|l| 2 * l + 1).sum();
    let ratio = inv as f64 / all as f64;
    Outcome {
        name: "sphere antipodal halving, lambda=1e4",
        pass: inv == even && all == total && within(ratio, SPHERE_ANTIPODAL_FRACTION),
        detail: format!("N(G)={inv} (oracle {even}) N={all} (oracle {total}) ratio={ratio:.5} in {SPHERE_ANTIPODAL_FRACTION:?}"),
    }
}

fn invariance() -> Outcome {
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (k, &(manifold, spec)) in ACTIONS.iter().enumerate() {
        let a = action(manifold, spec);
        let m = a.manifold().clone();
        let lambda_max = if manifold == "torus:3" { 20.0 } else { 100.0 };
        let kernel = Arc::new(build_kernel(&m, &a, "sobolev:s=2".parse().unwrap(), Some(lambda_max)).expect("kernel"));
        let target = gen_target(&a, 2.0, 1.0, lambda_max, 100 + k as u64).expect("target");
        let data = Dataset::sample(&target, 150, 0.1, 200 + k as u64, 300 + k as u64).expect("data");
        let model = fit(&kernel, &data, 1e-3).expect("fit");
        let mut rng = ChaCha8Rng::seed_from_u64(400 + k as u64);
        let xs = uniform_sample(&m, 500 + k as u64, PAIRS).expect("points");
        let mut max_abs = 0.0f64;
        let mut max_diff = 0.0f64;
        for x in &xs {
            let tau = a.sample_element(&mut rng);
            let tx = apply_action(&a, &tau, x).expect("apply");
            let (fx, ftx) = (model.predict(x).unwrap(), model.predict(&tx).unwrap());
            max_abs = max_abs.max(fx.abs()).max(ftx.abs());
            max_diff = max_diff.max((fx - ftx).abs());
        }
        let rel = max_diff / max_abs;
        if rel > worst.0 {
            worst = (rel, spec);
        }
        if !(rel <= INVARIANCE_REL) {
            failures.push(format!("{manifold} {spec}: {rel:.2e}"));
        }
    }
    Outcome {
        name: "orbit invariance of fitted models, all built-in actions",
        pass: failures.is_empty(),
        detail: format!(
            "{} actions x {PAIRS} pairs, worst max|f(tx)-f(x)|/max|f| = {:.2e} ({}) <= {INVARIANCE_REL:e}{}",
            ACTIONS.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    }
}

fn haar_equals_projection() -> Outcome {
    let mut failures = Vec::new();
    let (mut worst_finite, mut worst_cont) = (0.0f64, 0.0f64);
    for (k, &(manifold, spec)) in ACTIONS.iter().enumerate() {
        let a = action(manifold, spec);
        let m = a.manifold().clone();
        let profile = "sobolev:s=2".parse().unwrap();
        let triv = GroupActionSpec::trivial(&m).unwrap();
        let base = build_kernel(&m, &triv, profile, Some(100.0)).expect("base kernel");
        let inv = build_kernel(&m, &a, profile, Some(100.0)).expect("invariant kernel");
        let xs = uniform_sample(&m, 600 + k as u64, PAIRS).expect("points");
        let ys = uniform_sample(&m, 700 + k as u64, PAIRS).expect("points");
        let mut worst = 0.0f64;
        for (x, y) in xs.iter().zip(&ys) {
            let h = haar_average_kernel(&base, &a, x, y, None).expect("haar");
            let p = inv.eval(x, y).expect("eval");
            worst = worst.max((h - p).abs());
        }
        let tol = if a.is_finite() { HAAR_FINITE } else { HAAR_CONTINUOUS };
        if a.is_finite() {
            worst_finite = worst_finite.max(worst);
        } else {
            worst_cont = worst_cont.max(worst);
        }
        if !(worst <= tol) {
            failures.push(format!("{manifold} {spec}: {worst:.2e}"));
        }
    }
    Outcome {
        name: "Haar average = invariant projection, lambda_max=100",
        pass: failures.is_empty(),
        detail: format!(
            "worst |diff| finite {worst_finite:.2e} <= {HAAR_FINITE:e}, continuous {worst_cont:.2e} <= {HAAR_CONTINUOUS:e}{}",
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    }
}

fn rate_config(manifold: &str, action: &str, lambda_max: Option<f64>, band: f64, target_action: Option<&str>) -> ExperimentConfig {
    let lm = lambda_max.map(|l| format!(r#""lambda_max": {l},"#)).unwrap_or_default();
    let ta = target_action.map(|t| format!(r#", "action": "{t}""#)).unwrap_or_default();
    ExperimentConfig::from_json(&format!(
        r#"{{
            "manifold": "{manifold}", "action": "{action}", "kernel": "sobolev:s=2", {lm}
            "target": {{ "s": 2.0, "norm": 1.0, "lambda_band": {band}, "seed": 1{ta} }},
            "sigma": 0.5,
            "n_grid": {{ "min": 32, "max": 4096, "factor": 2.0 }},
            "trials": 50,
            "eta": {{ "policy": "auto" }},
            "master_seed": 1,
            "aggregation": "median"
        }}"#
    ))
    .expect("acceptance config")
}

struct Run {
    experiment: Experiment,
    sweep: Sweep,
    report: RateReport,
    seconds: f64,
}

fn run(config: ExperimentConfig) -> Run {
    let start = Instant::now();
    let experiment = Experiment::new(config).expect("experiment");
    let sweep = experiment.run().expect("sweep");
    let report = RateReport::new(&experiment, &sweep).expect("report");
    Run {
        experiment,
        sweep,
        report,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn sanity(report: &RateReport) -> (bool, String) {
    let ratio = report.max_risk_to_bound.unwrap_or(f64::INFINITY);
    (
        ratio <= RISK_BOUND_CEILING,
        format!("max risk/bound {ratio:.3} <= {RISK_BOUND_CEILING}"),
    )
}

fn rate_exponent(circle: &Run) -> Outcome {
    let slope = circle.report.fit.slope;
    let (ok, sanity) = sanity(&circle.report);
    Outcome {
        name: "rate exponent, circle reflection s=2 sigma=0.5 auto eta",
        pass: within(slope, RATE_SLOPE) && ok && circle.seconds <= (RATE_SINGLE_THREAD_MINUTES * 60) as f64,
        detail: format!(
            "slope {slope:.4} (stderr {:.4}, theory {:.3}) in {RATE_SLOPE:?}; {sanity}; {:.1}s single-threaded <= {RATE_SINGLE_THREAD_MINUTES} min",
            circle.report.fit.stderr_slope,
            circle.report.theory_slope.unwrap_or(f64::NAN),
            circle.seconds
        ),
    }
}

fn dimension_reduction(inv: &Run, triv: &Run) -> Outcome {
    let (si, st) = (inv.report.fit.slope, triv.report.fit.slope);
    let diff = si.abs() - st.abs();
    let (ok_i, s_i) = sanity(&inv.report);
    let (ok_t, s_t) = sanity(&triv.report);
    Outcome {
        name: "dimension-reduction exponent, T^2 subtorus vs trivial",
        pass: diff >= SLOPE_DIFFERENCE && si < st && ok_i && ok_t,
        detail: format!(
            "invariant slope {si:.4} (theory {:.3}), trivial {st:.4} (theory {:.3}), |inv|-|triv| = {diff:.4} >= {SLOPE_DIFFERENCE}; \
             invariant {s_i}; trivial {s_t}; {:.1}s",
            inv.report.theory_slope.unwrap_or(f64::NAN),
            triv.report.theory_slope.unwrap_or(f64::NAN),
            inv.seconds + triv.seconds
        ),
    }
}

fn effective_gain(inv: &Run, triv: &Run) -> Outcome {
    let agg = inv.experiment.config.aggregation;
    let report = gain_report(&inv.sweep.records, &triv.sweep.records, agg).expect("gain report");
    Outcome {
        name: "effective-samples gain, circle Z_8 rotations vs trivial",
        pass: within(report.gain, GAIN),
        detail: format!(
            "g = {:.3} (theory 8) in {GAIN:?} over {} overlapping points",
            report.gain, report.overlap_points
        ),
    }
}

fn residual_contract(runs: &[(&str, &Run)]) -> Outcome {
    let parts: Vec<String> = runs
        .iter()
        .map(|(name, r)| format!("{name}: {} violations, {} failed", r.report.residual_violations, r.report.failed_trials))
        .collect();
    let pass = runs
        .iter()
        .all(|(_, r)| r.report.residual_violations == 0 && r.report.failed_trials == 0);
    Outcome {
        name: "residual contract on every acceptance run",
        pass,
        detail: parts.join("; "),
    }
}

fn space_complexity_criterion() -> Outcome {
    let a = action("circle", "reflect:0");
    let m = a.manifold().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut pass = true;
    let mut parts = Vec::new();
    for d in [1usize, 3, 10] {
        // Invariant functions on the circle under reflection: one per eigenvalue k².
        let lambda_d = ((d - 1) * (d - 1)) as f64;
        let kernel = build_kernel(&m, &a, format!("bandlimited:D={d}").parse().unwrap(), None).expect("kernel");
        let own = space_complexity(&kernel).expect("complexity");

        let pool_size = 3 * d + 3;
        let basis = enumerate_eigenbasis(&m, ((pool_size - 1) * (pool_size - 1)) as f64).expect("basis");
        let pool = a.invariant_functions(&basis).expect("invariant functions");
        assert_eq!(pool.len(), pool_size);
        let own_basis = energy_max(&pool, &basis, &DMatrix::identity(pool_size, d));
        let mut min_random = f64::INFINITY;
        for _ in 0..RANDOM_SUBSPACES {
            let g = DMatrix::from_fn(pool_size, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let q = g.qr().q();
            min_random = min_random.min(energy_max(&pool, &basis, &q));
        }
        let ok = own == lambda_d
            && (own_basis - lambda_d).abs() <= RAYLEIGH_SLACK
            && min_random >= lambda_d - RAYLEIGH_SLACK;
        pass &= ok;
        parts.push(format!(
            "D={d}: space_complexity {own} = lambda_(D-1) {lambda_d}, H_G basis {own_basis:.12}, min over {RANDOM_SUBSPACES} random {min_random:.4}"
        ));
    }
    Outcome {
        name: "space complexity vs random invariant subspaces, circle reflection",
        pass,
        detail: parts.join("; "),
    }
}

/// Max Rayleigh energy `Σ λ⟨f,φ⟩²` over unit `f` in the span of `Σ_i q_ij ψ_i`.
fn energy_max(
    pool: &[ikrr::actions::InvariantFunction],
    basis: &ikrr::spectra::EigenBasis,
    q: &DMatrix<f64>,
) -> f64 {
    let dim = q.ncols();
    let coeffs: Vec<BTreeMap<usize, f64>> = (0..dim)
        .map(|j| {
            let mut c = BTreeMap::new();
            for (i, f) in pool.iter().enumerate() {
                for &(e, t) in &f.terms {
                    *c.entry(e).or_insert(0.0) += q[(i, j)] * t;
                }
            }
            c
        })
        .collect();
    let energy = DMatrix::from_fn(dim, dim, |a, b| {
        coeffs[a]
            .iter()
            .filter_map(|(e, va)| coeffs[b].get(e).map(|vb| basis.entries()[*e].eigenvalue() * va * vb))
            .sum::<f64>()
    });
    let gram = DMatrix::from_fn(dim, dim, |a, b| {
        coeffs[a].iter().filter_map(|(e, va)| coeffs[b].get(e).map(|vb| va * vb)).sum::<f64>()
    });
    assert!((gram - DMatrix::identity(dim, dim)).amax() < 1e-10, "subspace basis is orthonormal");
    SymmetricEigen::new(energy).eigenvalues.max()
}

fn exact_vs_mc() -> Outcome {
    let families = [("circle", "reflect:0"), ("torus:2", "subtorus:[1,0]"), ("torus:2", "shift:pi,0"), ("sphere2", "antipodal")];
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..MC_MODELS {
        let (manifold, spec) = families[i % families.len()];
        let a = action(manifold, spec);
        let m = a.manifold().clone();
        let kernel = Arc::new(build_kernel(&m, &a, "sobolev:s=2".parse().unwrap(), Some(100.0)).expect("kernel"));
        let target = gen_target(&a, 2.0, 1.0, 100.0, rng.random()).expect("target");
        let n = rng.random_range(32..=512);
        let eta = 10f64.powf(rng.random_range(-4.0..-1.0));
        let data = Dataset::sample(&target, n, 0.5, rng.random(), rng.random()).expect("data");
        let model = fit(&kernel, &data, eta).expect("fit");
        let exact = excess_risk_exact(&model, &target);
        let mc = excess_risk_mc(&model, &target, rng.random(), MC_POINTS).expect("mc");
        let rel = (exact - mc.mean).abs() / exact;
        let ok = if exact < MC_SMALL_RISK {
            (exact - mc.mean).abs() <= MC_STDERRS * mc.stderr
        } else {
            rel <= MC_RELATIVE
        };
        worst = worst.max(rel);
        if !ok {
            failures.push(format!("#{i} {manifold} {spec} n={n}: exact {exact:.4e} mc {:.4e} ± {:.1e}", mc.mean, mc.stderr));
        }
    }
    Outcome {
        name: "exact vs Monte-Carlo excess risk, 20 models, 1e5 points",
        pass: failures.is_empty(),
        detail: format!(
            "worst relative gap {worst:.4} <= {MC_RELATIVE}{}",
            if failures.is_empty() { String::new() } else { format!("; failed: {}", failures.join(", ")) }
        ),
    }
}

fn report(o: &Outcome) {
    println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
}

fn main() {
    configure_threads(Some(1)).expect("thread pool");
    let mut outcomes = Vec::new();
    let mut step = |o: Outcome| {
        report(&o);
        outcomes.push(o.pass);
    };
    step(weyl_baseline());
    step(finite_group_counts());
    step(continuous_group_counts());
    step(sphere_antipodal_halving());
    step(invariance());
    step(haar_equals_projection());

    let circle = run(rate_config("circle", "reflect:0", None, 400.0, None));
    step(rate_exponent(&circle));
    let t2_inv = run(rate_config("torus:2", "subtorus:[1,0]", Some(200.0), 200.0, Some("subtorus:[1,0]")));
    let t2_triv = run(rate_config("torus:2", "trivial", Some(200.0), 200.0, Some("subtorus:[1,0]")));
    step(dimension_reduction(&t2_inv, &t2_triv));
    let z8 = run(rate_config("circle", "shift:pi/4", None, 400.0, Some("shift:pi/4")));
    let z8_triv = run(rate_config("circle", "trivial", None, 400.0, Some("shift:pi/4")));
    step(effective_gain(&z8, &z8_triv));
    step(residual_contract(&[
        ("circle reflection", &circle),
        ("T^2 subtorus", &t2_inv),
        ("T^2 trivial", &t2_triv),
        ("circle Z_8", &z8),
        ("circle trivial", &z8_triv),
    ]));

    step(space_complexity_criterion());
    step(exact_vs_mc());

    let failed = outcomes.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
