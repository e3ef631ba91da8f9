//! Experiment orchestration: targets, seeded trials, sweeps and fits.

mod counts;
mod rate;
mod records;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use counts::{count_sweep, geometric_grid, read_counts, write_basis, write_counts, CountRow};
pub use rate::{aggregate, fit_rate, gain_report, horizontal_shift, Aggregation, GainReport, RateFit};
pub use records::{read_records, write_records, RunRecord};

use crate::actions::GroupActionSpec;
use crate::error::{Error, Result};
use crate::kernels::{build_kernel, select_lambda_max, SpectralKernel, SpectralProfile};
use crate::regress::{
    eta_floor, excess_risk_exact, excess_risk_mc, fit, optimal_eta, risk_bound, Dataset, TargetFunction,
};
use crate::spectra::{enumerate_eigenbasis, ManifoldSpec};

/// Default target band.
pub const DEFAULT_LAMBDA_BAND: f64 = 400.0;

/// Sweeps fail when more than this fraction of trials fail.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// Declarative experiment description, read from JSON.
///
/// ```json
/// {
///   "manifold": "circle",
///   "action": "reflect:0",
///   "kernel": "sobolev:s=2",
///   "target": { "s": 2.0, "norm": 1.0, "lambda_band": 400.0, "seed": 7 },
///   "sigma": 0.5,
///   "n_grid": { "min": 32, "max": 4096, "factor": 2.0 },
///   "trials": 50,
///   "eta": { "policy": "auto" },
///   "master_seed": 1
/// }
/// ```
///
/// Optional fields: `lambda_max` (kernel cutoff; default is the larger of the
/// automatic cutoff and the target band), `target.action` (group the target
/// is invariant under; default `action`), `mc_test_points` (0 disables the
/// Monte-Carlo risk), `record_timing` (default false, which writes 0 to
/// `wall_ms` so outputs are reproducible byte for byte) and `aggregation`
/// (`median` or `mean`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifold: String,
    pub action: String,
    pub kernel: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_max: Option<f64>,
    pub target: TargetConfig,
    pub sigma: f64,
    pub n_grid: NGrid,
    pub trials: usize,
    #[serde(default)]
    pub eta: EtaPolicy,
    pub master_seed: u64,
    #[serde(default)]
    pub mc_test_points: usize,
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default)]
    pub aggregation: Aggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub s: f64,
    pub norm: f64,
    #[serde(default = "default_band")]
    pub lambda_band: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<String>,
}

fn default_band() -> f64 {
    DEFAULT_LAMBDA_BAND
}

/// Geometric sample-size grid `min, min·factor, ...` up to `max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NGrid {
    pub min: usize,
    pub max: usize,
    pub factor: f64,
}

impl NGrid {
    pub fn values(&self) -> Result<Vec<usize>> {
        if self.min == 0 || self.max < self.min || !(self.factor > 1.0) {
            return Err(Error::config(format!(
                "n grid needs 1 <= min <= max and factor > 1 (got {self:?})"
            )));
        }
        let mut out: Vec<usize> = Vec::new();
        let mut k = 0i32;
        loop {
            let v = (self.min as f64 * self.factor.powi(k)).round();
            if v > self.max as f64 * (1.0 + 1e-9) {
                break;
            }
            let v = v as usize;
            if out.last() != Some(&v) {
                out.push(v);
            }
            k += 1;
        }
        Ok(out)
    }
}

/// Regularization policy. `grid` picks, per trial, the grid value with the
/// smallest exact excess risk (an oracle choice).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase", deny_unknown_fields)]
pub enum EtaPolicy {
    #[default]
    Auto,
    Fixed {
        value: f64,
    },
    Grid {
        values: Vec<f64>,
    },
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Stable 64-bit seed for one trial.
pub fn trial_seed(master: u64, n: usize, trial: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"ikrr/trial");
    h.update(master.to_le_bytes());
    h.update((n as u64).to_le_bytes());
    h.update((trial as u64).to_le_bytes());
    first_u64(&h.finalize())
}

/// Labelled seed derived from a trial seed (`points`, `noise`, `mc`).
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"ikrr/sub/");
    h.update(label.as_bytes());
    h.update(seed.to_le_bytes());
    first_u64(&h.finalize())
}

fn first_u64(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(bytes[..8].try_into().expect("digest has 32 bytes"))
}

/// Random invariant Sobolev target: standard normal coefficients on the
/// invariant functions with eigenvalue `<= lambda_band`, scaled by
/// `max(1, λ)^{-s/2}·(1 + rank)^{-0.51}`, then rescaled to Sobolev norm `norm`.
pub fn gen_target(action: &GroupActionSpec, s_target: f64, norm: f64, lambda_band: f64, seed: u64) -> Result<TargetFunction> {
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::config(format!("target norm must be > 0 (got {norm})")));
    }
    if !(lambda_band >= 0.0 && lambda_band.is_finite()) {
        return Err(Error::config(format!("target band must be finite and >= 0 (got {lambda_band})")));
    }
    let manifold = action.manifold().clone();
    let basis = enumerate_eigenbasis(&manifold, lambda_band)?;
    let functions = action.invariant_functions(&basis)?;
    if functions.is_empty() {
        return Err(Error::config("no invariant eigenfunctions within the target band"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coefficients = std::collections::BTreeMap::new();
    for (rank, f) in functions.iter().enumerate() {
        let g: f64 = StandardNormal.sample(&mut rng);
        let scale = (f.lambda as f64).max(1.0).powf(-s_target / 2.0) * (1.0 + rank as f64).powf(-0.51);
        for &(i, c) in &f.terms {
            *coefficients.entry(basis.entries()[i].clone()).or_insert(0.0) += g * scale * c;
        }
    }
    let raw = TargetFunction::new(manifold.clone(), coefficients, s_target);
    let factor = norm / raw.sobolev_norm;
    let scaled = raw.coefficients.into_iter().map(|(k, v)| (k, v * factor)).collect();
    let mut out = TargetFunction::new(manifold, scaled, s_target);
    out.sobolev_norm = norm;
    Ok(out)
}

/// A validated experiment with its kernel and target built once.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub kernel: Arc<SpectralKernel>,
    pub target: TargetFunction,
    pub n_values: Vec<usize>,
}

/// Per-trial facts kept beside the persisted record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialDiagnostics {
    pub n: usize,
    pub trial: usize,
    pub residual_ok: bool,
    pub jitter: f64,
    pub eta_floor: f64,
    pub below_eta_floor: bool,
    /// Expected-risk bound at this `n`, when the policy is `auto`.
    pub risk_bound: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub records: Vec<RunRecord>,
    pub diagnostics: Vec<TrialDiagnostics>,
}

impl Sweep {
    pub fn failures(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.error.is_some()).count()
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let manifold: ManifoldSpec = config.manifold.parse()?;
        let action = GroupActionSpec::parse(&manifold, &config.action)?;
        let profile: SpectralProfile = config.kernel.parse()?;
        profile.validate(action.effective_dimension())?;
        if config.trials == 0 {
            return Err(Error::config("trials must be >= 1"));
        }
        if !(config.sigma >= 0.0 && config.sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be finite and >= 0 (got {})", config.sigma)));
        }
        let n_values = config.n_grid.values()?;
        match &config.eta {
            EtaPolicy::Auto => {
                if !matches!(profile, SpectralProfile::Sobolev { .. }) {
                    return Err(Error::config("automatic eta needs a Sobolev kernel"));
                }
                if !(config.sigma > 0.0) {
                    return Err(Error::config("automatic eta needs sigma > 0"));
                }
                action.quotient_invariants()?;
            }
            EtaPolicy::Fixed { value } => check_eta(*value)?,
            EtaPolicy::Grid { values } => {
                if values.is_empty() {
                    return Err(Error::config("eta grid is empty"));
                }
                values.iter().try_for_each(|v| check_eta(*v))?;
            }
        }
        let target_action = match &config.target.action {
            Some(spec) => GroupActionSpec::parse(&manifold, spec)?,
            None => action.clone(),
        };
        let target = gen_target(
            &target_action,
            config.target.s,
            config.target.norm,
            config.target.lambda_band,
            config.target.seed,
        )?;
        let lambda_max = match (config.lambda_max, profile) {
            (Some(l), _) => Some(l),
            (None, SpectralProfile::Bandlimited { .. }) => None,
            (None, p) => Some(select_lambda_max(&manifold, p).max(config.target.lambda_band)),
        };
        let kernel = Arc::new(build_kernel(&manifold, &action, profile, lambda_max)?);
        Ok(Experiment {
            config_hash: config.config_hash(),
            config,
            kernel,
            target,
            n_values,
        })
    }

    fn auto_eta(&self, n: usize) -> Result<(f64, f64)> {
        let SpectralProfile::Sobolev { s } = self.kernel.profile() else {
            return Err(Error::config("automatic eta needs a Sobolev kernel"));
        };
        let q = self.kernel.action().quotient_invariants()?;
        let theta = (self.config.target.s / s).min(1.0);
        let sigma2 = self.config.sigma * self.config.sigma;
        let norm = self.target.sobolev_norm;
        let eta = optimal_eta(s, theta, q.d_eff, q.quotient_volume, sigma2, n, norm)?;
        let bound = risk_bound(s, theta, q.d_eff, q.quotient_volume, sigma2, n, norm)?;
        Ok((eta, bound))
    }

    /// Runs one `(n, trial)` job; depends only on the config and these indices.
    pub fn run_trial(&self, n: usize, trial: usize) -> (RunRecord, TrialDiagnostics) {
        let seed = trial_seed(self.config.master_seed, n, trial);
        let start = Instant::now();
        let mut diag = TrialDiagnostics {
            n,
            trial,
            residual_ok: false,
            jitter: 0.0,
            eta_floor: eta_floor(&self.kernel, n),
            below_eta_floor: false,
            risk_bound: None,
            error: None,
        };
        let outcome = self.trial_body(n, seed, &mut diag);
        let wall_ms = if self.config.record_timing {
            start.elapsed().as_millis() as u64
        } else {
            0
        };
        let (eta, risk_exact, risk_mc) = match outcome {
            Ok(v) => v,
            Err(e) => {
                log::warn!("trial n={n} #{trial} failed: {e}");
                diag.error = Some(e.to_string());
                (f64::NAN, f64::NAN, None)
            }
        };
        (
            RunRecord {
                config_hash: self.config_hash.clone(),
                n,
                trial,
                eta,
                risk_exact,
                risk_mc,
                wall_ms,
                seed,
            },
            diag,
        )
    }

    fn trial_body(&self, n: usize, seed: u64, diag: &mut TrialDiagnostics) -> Result<(f64, f64, Option<f64>)> {
        let data = Dataset::sample(
            &self.target,
            n,
            self.config.sigma,
            sub_seed(seed, "points"),
            sub_seed(seed, "noise"),
        )?;
        let candidates = match &self.config.eta {
            EtaPolicy::Auto => {
                let (eta, bound) = self.auto_eta(n)?;
                diag.risk_bound = Some(bound);
                vec![eta]
            }
            EtaPolicy::Fixed { value } => vec![*value],
            EtaPolicy::Grid { values } => values.clone(),
        };
        let mut best: Option<(f64, f64, crate::regress::KrrModel)> = None;
        for eta in candidates {
            let model = fit(&self.kernel, &data, eta)?;
            let risk = excess_risk_exact(&model, &self.target);
            if best.as_ref().is_none_or(|b| risk < b.1) {
                best = Some((eta, risk, model));
            }
        }
        let (eta, risk, model) = best.expect("at least one eta candidate");
        let d = model.diagnostics();
        diag.residual_ok = d.residual_ok;
        diag.jitter = d.jitter;
        diag.below_eta_floor = eta < diag.eta_floor;
        let mc = if self.config.mc_test_points > 0 {
            Some(excess_risk_mc(&model, &self.target, sub_seed(seed, "mc"), self.config.mc_test_points)?.mean)
        } else {
            None
        };
        Ok((eta, risk, mc))
    }

    /// All `(n, trial)` jobs, executed on the current rayon pool. Output order
    /// is `(n, trial)` regardless of scheduling.
    pub fn run(&self) -> Result<Sweep> {
        let jobs: Vec<(usize, usize)> = self
            .n_values
            .iter()
            .flat_map(|&n| (0..self.config.trials).map(move |t| (n, t)))
            .collect();
        let results: Vec<(RunRecord, TrialDiagnostics)> =
            jobs.par_iter().map(|&(n, t)| self.run_trial(n, t)).collect();
        let (records, diagnostics): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let sweep = Sweep { records, diagnostics };
        let failures = sweep.failures();
        if failures as f64 > MAX_FAILURE_FRACTION * jobs.len() as f64 {
            let first = sweep.diagnostics.iter().find_map(|d| d.error.clone()).unwrap_or_default();
            return Err(Error::numerical(format!(
                "{failures} of {} trials failed (first: {first})",
                jobs.len()
            )));
        }
        Ok(sweep)
    }
}

fn check_eta(v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::config(format!("eta values must be finite and > 0 (got {v})")));
    }
    Ok(())
}

pub fn run_sweep(config: &ExperimentConfig) -> Result<Sweep> {
    Experiment::new(config.clone())?.run()
}

/// Theoretical slope `-θs/(θs + d/2)` for a Sobolev experiment.
pub fn theory_slope(experiment: &Experiment) -> Option<f64> {
    let SpectralProfile::Sobolev { s } = experiment.kernel.profile() else {
        return None;
    };
    let theta = (experiment.config.target.s / s).min(1.0);
    let d = experiment.kernel.action().effective_dimension() as f64;
    Some(-theta * s / (theta * s + d / 2.0))
}

/// Contents of `rate.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateReport {
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub kernel: crate::kernels::KernelMetadata,
    pub aggregation: Aggregation,
    pub theory_slope: Option<f64>,
    pub fit: RateFit,
    /// `(n, aggregated risk)` pairs used by the fit.
    pub points: Vec<(usize, f64)>,
    pub failed_trials: usize,
    pub residual_violations: usize,
    pub below_eta_floor: usize,
    /// Largest ratio of measured risk to the expected-risk bound, when known.
    pub max_risk_to_bound: Option<f64>,
}

impl RateReport {
    pub fn new(experiment: &Experiment, sweep: &Sweep) -> Result<Self> {
        let agg = experiment.config.aggregation;
        let fit = fit_rate(&sweep.records, agg)?;
        let max_ratio = sweep
            .records
            .iter()
            .zip(&sweep.diagnostics)
            .filter_map(|(r, d)| d.risk_bound.map(|b| r.risk_exact / b))
            .filter(|v| v.is_finite())
            .reduce(f64::max);
        Ok(RateReport {
            version: crate::VERSION.to_string(),
            config_hash: experiment.config_hash.clone(),
            config: experiment.config.clone(),
            kernel: experiment.kernel.metadata(),
            aggregation: agg,
            theory_slope: theory_slope(experiment),
            points: aggregate(&sweep.records, agg),
            fit,
            failed_trials: sweep.failures(),
            residual_violations: sweep
                .diagnostics
                .iter()
                .filter(|d| d.error.is_none() && !d.residual_ok)
                .count(),
            below_eta_floor: sweep.diagnostics.iter().filter(|d| d.below_eta_floor).count(),
            max_risk_to_bound: max_ratio,
        })
    }
}

/// Runs both arms of a gain experiment after checking they are comparable.
pub fn run_gain(invariant: &ExperimentConfig, trivial: &ExperimentConfig) -> Result<(Sweep, Sweep, GainReport)> {
    if invariant.manifold.parse::<ManifoldSpec>()? != trivial.manifold.parse::<ManifoldSpec>()? {
        return Err(Error::config("gain configs use different manifolds"));
    }
    let (pi, pt): (SpectralProfile, SpectralProfile) = (invariant.kernel.parse()?, trivial.kernel.parse()?);
    if std::mem::discriminant(&pi) != std::mem::discriminant(&pt) || pi.to_string() != pt.to_string() {
        return Err(Error::config("gain configs use different kernel profiles"));
    }
    if invariant.target != trivial.target || invariant.sigma != trivial.sigma {
        return Err(Error::config("gain configs need the same target and noise level"));
    }
    let inv = run_sweep(invariant)?;
    let triv = run_sweep(trivial)?;
    let agg = invariant.aggregation;
    let report = gain_report(&inv.records, &triv.records, agg)?;
    Ok((inv, triv, report))
}

/// Sizes the global rayon pool from `threads` or `IKRR_THREADS`. Calling it
/// after the pool exists has no effect.
pub fn configure_threads(threads: Option<usize>) -> Result<()> {
    let n = match threads {
        Some(n) => Some(n),
        None => match std::env::var("IKRR_THREADS") {
            Ok(v) => Some(
                v.parse()
                    .map_err(|_| Error::config(format!("IKRR_THREADS must be an integer (got `{v}`)")))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::config("thread count must be >= 1"));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
