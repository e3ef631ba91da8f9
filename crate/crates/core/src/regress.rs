//! Kernel ridge regression with truncated spectral kernels.
//!
//! The estimator minimizes `(1/n) Σ (y_i - f(x_i))² + η ‖f‖²_H`, whose
//! solution is `f̂ = Σ a_i K(x_i, ·)` with `a = (K + nηI)^{-1} y`. Because the
//! kernel has finite rank `p`, the fitted function is also stored by its
//! coefficients `β = W Φᵀ a` on the invariant eigenfunctions, where `Φ` is the
//! `n × p` feature matrix and `W = diag(μ)`.
//!
//! Eigenfunctions are orthonormal for the Riemannian volume, so risks under the
//! uniform probability carry a factor `1/vol(M)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{SpectralKernel, SpectralProfile};
use crate::spectra::{eval_eigenfunction, unit_ball_volume, validate_point, EigenIndex, ManifoldSpec, Point};

/// Residual tolerance `‖(K + nηI)a − y‖_∞ ≤ RESIDUAL_TOLERANCE·‖y‖_∞`.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

const JITTER_SCALE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Vec<Point>,
    pub labels: Vec<f64>,
    pub noise_sigma: f64,
}

impl Dataset {
    pub fn new(points: Vec<Point>, labels: Vec<f64>, noise_sigma: f64) -> Result<Self> {
        if points.len() != labels.len() {
            return Err(Error::config(format!(
                "{} points but {} labels",
                points.len(),
                labels.len()
            )));
        }
        if !(noise_sigma >= 0.0) {
            return Err(Error::config("noise sigma must be >= 0"));
        }
        Ok(Dataset {
            points,
            labels,
            noise_sigma,
        })
    }

    /// `y_i = f⋆(x_i) + ε_i` with `x_i` uniform and `ε_i ~ N(0, σ²)`.
    pub fn sample(target: &TargetFunction, n: usize, sigma: f64, point_seed: u64, noise_seed: u64) -> Result<Self> {
        let points = crate::spectra::uniform_sample(&target.manifold, point_seed, n)?;
        let clean = target.eval_many(&points)?;
        let labels = if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            clean.iter().map(|f| f + normal.sample(&mut rng)).collect()
        } else {
            clean
        };
        Dataset::new(points, labels, sigma)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Linear-algebra route for the regularized solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    /// Feature space when `p < n`, otherwise dense.
    Auto,
    /// Cholesky factorization of the `n × n` matrix `K + nηI`.
    Dense,
    /// Cholesky factorization of the `p × p` matrix `W^{1/2}ΦᵀΦW^{1/2} + nηI`.
    Feature,
}

/// Diagnostics recorded at fit time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub solver: Solver,
    /// Diagonal jitter added after a failed factorization (0 if none).
    pub jitter: f64,
    /// `‖(K + nηI)a − y‖_∞ / ‖y‖_∞`.
    pub relative_residual: f64,
    pub residual_ok: bool,
}

#[derive(Clone, Debug)]
pub struct KrrModel {
    kernel: Arc<SpectralKernel>,
    support_points: Vec<Point>,
    weights: Vec<f64>,
    coefficients: Vec<f64>,
    eta: f64,
    diagnostics: FitDiagnostics,
}

impl KrrModel {
    pub fn kernel(&self) -> &SpectralKernel {
        &self.kernel
    }

    pub fn support_points(&self) -> &[Point] {
        &self.support_points
    }

    /// Representer weights `a`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Coefficients `β` on the kernel's invariant functions.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn diagnostics(&self) -> FitDiagnostics {
        self.diagnostics
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        let f = self.kernel.features(x)?;
        Ok(f.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum())
    }

    /// `Σ a_i K(x_i, x)`, evaluated through the kernel directly.
    pub fn predict_representer(&self, x: &[f64]) -> Result<f64> {
        let fx = self.kernel.features(x)?;
        let mut total = 0.0;
        for (xi, ai) in self.support_points.iter().zip(&self.weights) {
            total += ai * self.kernel.eval_features(&self.kernel.features(xi)?, &fx);
        }
        Ok(total)
    }

    /// The fitted function as full-basis coefficients.
    pub fn expansion(&self) -> BTreeMap<EigenIndex, f64> {
        self.kernel.expand(&self.coefficients)
    }
}

/// `n × p` feature matrix, rows computed in parallel.
pub fn feature_matrix(kernel: &SpectralKernel, points: &[Point]) -> Result<DMatrix<f64>> {
    let rows: Vec<Vec<f64>> = points.par_iter().map(|x| kernel.features(x)).collect::<Result<_>>()?;
    let p = kernel.len();
    Ok(DMatrix::from_fn(points.len(), p, |i, j| rows[i][j]))
}

/// Gram matrix `K_ij = K(x_i, x_j)`; each unordered pair is computed once.
pub fn gram_matrix(kernel: &SpectralKernel, points: &[Point]) -> Result<DMatrix<f64>> {
    let phi = feature_matrix(kernel, points)?;
    Ok(gram_from_features(kernel, &phi))
}

fn scaled_features(kernel: &SpectralKernel, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut b = phi.clone();
    for (j, w) in kernel.weights().iter().enumerate() {
        let r = w.sqrt();
        b.column_mut(j).scale_mut(r);
    }
    b
}

fn gram_from_features(kernel: &SpectralKernel, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let b = scaled_features(kernel, phi);
    let mut k = &b * b.transpose();
    let n = k.nrows();
    for i in 0..n {
        for j in i + 1..n {
            k[(i, j)] = k[(j, i)];
        }
    }
    k
}

/// Fits `a = (K + nηI)^{-1} y`.
pub fn fit(kernel: &Arc<SpectralKernel>, data: &Dataset, eta: f64) -> Result<KrrModel> {
    fit_with(kernel, data, eta, Solver::Auto)
}

pub fn fit_with(kernel: &Arc<SpectralKernel>, data: &Dataset, eta: f64, solver: Solver) -> Result<KrrModel> {
    let n = data.len();
    if n == 0 {
        return Err(Error::config("cannot fit on an empty dataset"));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::config(format!("eta must be finite and > 0 (got {eta})")));
    }
    for x in &data.points {
        validate_point(kernel.action().chart(), x)?;
    }
    let phi = feature_matrix(kernel, &data.points)?;
    let y = DVector::from_column_slice(&data.labels);
    let p = kernel.len();
    let route = match solver {
        Solver::Auto if p < n => Solver::Feature,
        Solver::Auto => Solver::Dense,
        other => other,
    };
    let mut result = match route {
        Solver::Feature => solve_feature(kernel, &phi, &y, eta)?,
        _ => solve_dense(kernel, &phi, &y, eta)?,
    };
    if !result.2.residual_ok && route == Solver::Feature {
        log::debug!("feature-space solve missed the residual contract; retrying densely");
        let dense = solve_dense(kernel, &phi, &y, eta)?;
        if dense.2.relative_residual < result.2.relative_residual {
            result = dense;
        }
    }
    let (weights, coefficients, diagnostics) = result;
    if !diagnostics.residual_ok {
        log::warn!(
            "fit residual {:e} exceeds the {RESIDUAL_TOLERANCE:e} contract (n = {n}, eta = {eta:e})",
            diagnostics.relative_residual
        );
    }
    Ok(KrrModel {
        kernel: Arc::clone(kernel),
        support_points: data.points.clone(),
        weights,
        coefficients,
        eta,
        diagnostics,
    })
}

type Solution = (Vec<f64>, Vec<f64>, FitDiagnostics);

/// Cholesky with one jittered retry.
fn factor(mut m: DMatrix<f64>, jitter: f64) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    Cholesky::new(m)
        .map(|c| (c, jitter))
        .ok_or_else(|| Error::numerical("regularized system is not positive definite after jitter"))
}

fn residual(b: &DMatrix<f64>, a: &DVector<f64>, y: &DVector<f64>, shift: f64) -> f64 {
    let ka = b * (b.transpose() * a);
    let r = ka + a * shift - y;
    let scale = y.amax().max(f64::MIN_POSITIVE);
    r.amax() / scale
}

fn solve_dense(kernel: &SpectralKernel, phi: &DMatrix<f64>, y: &DVector<f64>, eta: f64) -> Result<Solution> {
    let n = phi.nrows();
    let b = scaled_features(kernel, phi);
    let k = gram_from_features(kernel, phi);
    let shift = n as f64 * eta;
    let jitter = JITTER_SCALE * k.trace() / n as f64;
    let mut m = k;
    for i in 0..n {
        m[(i, i)] += shift;
    }
    let (chol, used) = factor(m, jitter)?;
    let a = chol.solve(y);
    let coefficients = b.transpose() * &a;
    let beta: Vec<f64> = coefficients
        .iter()
        .zip(kernel.weights())
        .map(|(c, w)| c * w.sqrt())
        .collect();
    let rel = residual(&b, &a, y, shift);
    Ok((
        a.iter().copied().collect(),
        beta,
        FitDiagnostics {
            solver: Solver::Dense,
            jitter: used,
            relative_residual: rel,
            residual_ok: rel <= RESIDUAL_TOLERANCE,
        },
    ))
}

fn solve_feature(kernel: &SpectralKernel, phi: &DMatrix<f64>, y: &DVector<f64>, eta: f64) -> Result<Solution> {
    let n = phi.nrows();
    let p = phi.ncols();
    let b = scaled_features(kernel, phi);
    let shift = n as f64 * eta;
    let mut m = b.transpose() * &b;
    let jitter = JITTER_SCALE * m.trace() / n as f64;
    for i in 0..p {
        m[(i, i)] += shift;
    }
    let (chol, used) = factor(m, jitter)?;
    let z = chol.solve(&(b.transpose() * y));
    let a = (y - &b * &z) / shift;
    let beta: Vec<f64> = z.iter().zip(kernel.weights()).map(|(c, w)| c * w.sqrt()).collect();
    let rel = residual(&b, &a, y, shift);
    Ok((
        a.iter().copied().collect(),
        beta,
        FitDiagnostics {
            solver: Solver::Feature,
            jitter: used,
            relative_residual: rel,
            residual_ok: rel <= RESIDUAL_TOLERANCE,
        },
    ))
}

pub fn predict(model: &KrrModel, x: &[f64]) -> Result<f64> {
    model.predict(x)
}

/// A target function given by coefficients on the full eigenbasis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetFunction {
    pub manifold: ManifoldSpec,
    #[serde(with = "coefficient_list")]
    pub coefficients: BTreeMap<EigenIndex, f64>,
    pub sobolev_s: f64,
    pub sobolev_norm: f64,
}

mod coefficient_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &BTreeMap<EigenIndex, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<EigenIndex, f64>, D::Error> {
        let v: Vec<(EigenIndex, f64)> = Vec::deserialize(d)?;
        Ok(v.into_iter().collect())
    }
}

/// `Σ max(1, λ^s) α²`.
pub fn sobolev_norm_squared(coefficients: &BTreeMap<EigenIndex, f64>, s: f64) -> f64 {
    coefficients
        .iter()
        .map(|(k, a)| k.eigenvalue().powf(s).max(1.0) * a * a)
        .sum()
}

impl TargetFunction {
    pub fn new(manifold: ManifoldSpec, coefficients: BTreeMap<EigenIndex, f64>, sobolev_s: f64) -> Self {
        let sobolev_norm = sobolev_norm_squared(&coefficients, sobolev_s).sqrt();
        TargetFunction {
            manifold,
            coefficients,
            sobolev_s,
            sobolev_norm,
        }
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for (k, a) in &self.coefficients {
            total += a * eval_eigenfunction(&self.manifold, k, x)?;
        }
        Ok(total)
    }

    pub fn eval_many(&self, points: &[Point]) -> Result<Vec<f64>> {
        points.par_iter().map(|x| self.eval(x)).collect()
    }

    /// `(1/vol) Σ α²`, the mean square under the uniform probability.
    pub fn mean_square(&self) -> f64 {
        self.coefficients.values().map(|a| a * a).sum::<f64>() / self.manifold.volume()
    }
}

/// `(1/vol(M)) [Σ_ℓ (β̂_ℓ − α_ℓ)² + Σ_{out of band} α²]`.
pub fn excess_risk_exact(model: &KrrModel, target: &TargetFunction) -> f64 {
    let kernel = model.kernel();
    let basis = kernel.basis();
    let fitted = model.expansion();
    let mut total = 0.0;
    let mut out_of_band = 0.0;
    for (k, a) in &target.coefficients {
        if basis.position(k).is_none() {
            out_of_band += a * a;
        } else if !fitted.contains_key(k) {
            total += a * a;
        }
    }
    for (k, b) in &fitted {
        let a = target.coefficients.get(k).copied().unwrap_or(0.0);
        total += (b - a) * (b - a);
    }
    if out_of_band > 0.0 {
        log::warn!(
            "target has energy {out_of_band:e} beyond the kernel cutoff {}; included in the risk",
            kernel.lambda_max()
        );
    }
    (total + out_of_band) / kernel.manifold().volume()
}

/// Monte-Carlo estimate of the excess risk and its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRisk {
    pub mean: f64,
    pub stderr: f64,
    pub n_test: usize,
}

pub fn excess_risk_mc(model: &KrrModel, target: &TargetFunction, seed: u64, n_test: usize) -> Result<McRisk> {
    if n_test == 0 {
        return Err(Error::config("n_test must be >= 1"));
    }
    let points = crate::spectra::uniform_sample(model.kernel().manifold(), seed, n_test)?;
    let sq: Vec<f64> = points
        .par_iter()
        .map(|x| {
            let e = model.predict(x)? - target.eval(x)?;
            Ok(e * e)
        })
        .collect::<Result<_>>()?;
    let n = n_test as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = if n_test > 1 {
        sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(McRisk {
        mean,
        stderr: (var / n).sqrt(),
        n_test,
    })
}

fn theorem_constants(s: f64, theta: f64, d_eff: usize, target_norm: f64, n: usize) -> Result<(f64, f64)> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::config(format!("theta must lie in (0, 1] (got {theta})")));
    }
    if n == 0 || !(target_norm > 0.0) {
        return Err(Error::config("optimal eta needs n >= 1 and a positive target norm"));
    }
    let d = d_eff as f64;
    if d_eff == 0 {
        return Err(Error::config("optimal eta needs a positive effective dimension"));
    }
    let kappa = 2.0 * s / d - 1.0;
    if !(kappa > 0.0) {
        return Err(Error::config(format!(
            "optimal eta needs s > d/2 (s = {s}, d = {d_eff}, kappa = {kappa})"
        )));
    }
    let exponent = theta * s / (theta * s + d / 2.0);
    Ok((kappa, exponent))
}

/// `η = ((1/(2κθ‖f⋆‖²))·(ω_d/(2π)^d)·(σ² vol(M/G)/n))^{θs/(θs+d/2)}` with
/// `κ = 2s/d − 1`.
pub fn optimal_eta(
    s: f64,
    theta: f64,
    d_eff: usize,
    quotient_volume: f64,
    sigma2: f64,
    n: usize,
    target_norm: f64,
) -> Result<f64> {
    let (kappa, exponent) = theorem_constants(s, theta, d_eff, target_norm, n)?;
    let c = unit_ball_volume(d_eff) / (2.0 * PI).powi(d_eff as i32);
    let base = c * sigma2 * quotient_volume / n as f64 / (2.0 * kappa * theta * target_norm * target_norm);
    Ok(base.powf(exponent))
}

/// Expected excess-risk bound
/// `32·((1/(κθ))·(ω_d/(2π)^d)·σ² vol(M/G)/n)^{θs/(θs+d/2)}·‖f⋆‖^{d/(θs+d/2)}`.
pub fn risk_bound(
    s: f64,
    theta: f64,
    d_eff: usize,
    quotient_volume: f64,
    sigma2: f64,
    n: usize,
    target_norm: f64,
) -> Result<f64> {
    let (kappa, exponent) = theorem_constants(s, theta, d_eff, target_norm, n)?;
    let d = d_eff as f64;
    let c = unit_ball_volume(d_eff) / (2.0 * PI).powi(d_eff as i32);
    let base = c * sigma2 * quotient_volume / n as f64 / (kappa * theta);
    Ok(32.0 * base.powf(exponent) * target_norm.powf(d / (theta * s + d / 2.0)))
}

/// The validity floor `5 R² log(n) / n` on `η`, with `R² = sup K(x, x)`.
pub fn eta_floor(kernel: &SpectralKernel, n: usize) -> f64 {
    let n = n.max(1) as f64;
    5.0 * kernel.diagonal_bound() * n.ln() / n
}

/// The population estimator `Σ μ_ℓ/(μ_ℓ + η)·⟨f⋆, ψ_ℓ⟩ ψ_ℓ`.
pub fn effective_estimator(target: &TargetFunction, kernel: &SpectralKernel, eta: f64) -> Result<TargetFunction> {
    if !(eta > 0.0) {
        return Err(Error::config(format!("eta must be > 0 (got {eta})")));
    }
    let c = kernel.project(&target.coefficients);
    let beta: Vec<f64> = c
        .iter()
        .zip(kernel.weights())
        .map(|(c, mu)| mu / (mu + eta) * c)
        .collect();
    Ok(TargetFunction::new(
        target.manifold.clone(),
        kernel.expand(&beta),
        target.sobolev_s,
    ))
}

/// Kernel smoothness `s` of a Sobolev profile.
pub fn sobolev_order(profile: SpectralProfile) -> Option<f64> {
    match profile {
        SpectralProfile::Sobolev { s } => Some(s),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actions::{apply_action, GroupActionSpec};
    use crate::kernels::build_kernel;
    use crate::spectra::{uniform_sample, Parity};
    use proptest::prelude::*;
    use rand::Rng;

    fn kernel(manifold: &str, action: &str, profile: &str, lambda_max: Option<f64>) -> Arc<SpectralKernel> {
        let m: ManifoldSpec = manifold.parse().unwrap();
        let a = GroupActionSpec::parse(&m, action).unwrap();
        Arc::new(build_kernel(&m, &a, profile.parse().unwrap(), lambda_max).unwrap())
    }

    /// Smooth invariant target: random coefficients on the kernel's functions.
    fn random_target(k: &SpectralKernel, seed: u64) -> TargetFunction {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<f64> = k
            .eigenvalues()
            .map(|l| rng.random_range(-1.0..1.0) * (1.0 + l).powf(-1.5))
            .collect();
        TargetFunction::new(k.manifold().clone(), k.expand(&beta), 2.0)
    }

    #[test]
    fn one_point_closed_form() {
        let k = kernel("circle", "trivial", "sobolev:s=2", Some(4.0));
        let x = vec![0.9];
        let c = k.eval(&x, &x).unwrap();
        let eta = 0.3;
        for solver in [Solver::Dense, Solver::Feature] {
            let m = fit_with(&k, &Dataset::new(vec![x.clone()], vec![1.0], 0.0).unwrap(), eta, solver).unwrap();
            assert!((m.weights()[0] - 1.0 / (c + eta)).abs() < 1e-12);
            assert!((m.predict(&x).unwrap() - c / (c + eta)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_fits_are_rejected() {
        let k = kernel("circle", "trivial", "sobolev:s=2", Some(4.0));
        let empty = Dataset::new(vec![], vec![], 0.0).unwrap();
        assert!(fit(&k, &empty, 0.1).is_err());
        let one = Dataset::new(vec![vec![0.1]], vec![1.0], 0.0).unwrap();
        assert!(fit(&k, &one, 0.0).is_err());
        assert!(Dataset::new(vec![vec![0.1]], vec![], 0.0).is_err());
    }

    #[test]
    fn solvers_agree() {
        let k = kernel("torus:2", "perm:(0 1)", "sobolev:s=2", Some(30.0));
        let target = random_target(&k, 1);
        for n in [10usize, 40, 200] {
            let data = Dataset::sample(&target, n, 0.3, 2, 3).unwrap();
            let a = fit_with(&k, &data, 0.01, Solver::Dense).unwrap();
            let b = fit_with(&k, &data, 0.01, Solver::Feature).unwrap();
            for (u, v) in a.coefficients().iter().zip(b.coefficients()) {
                assert!((u - v).abs() < 1e-9);
            }
            assert!(a.diagnostics().residual_ok && b.diagnostics().residual_ok);
            assert_eq!(a.diagnostics().jitter, 0.0);
            let x = [0.3, 2.2];
            assert!((a.predict(&x).unwrap() - a.predict_representer(&x).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_gram_is_handled_by_regularization() {
        // repeated points make K singular; nη keeps the system definite
        let k = kernel("circle", "trivial", "sobolev:s=2", Some(100.0));
        let pts = vec![vec![1.0]; 30];
        let data = Dataset::new(pts, vec![0.5; 30], 0.0).unwrap();
        let m = fit_with(&k, &data, 1e-6, Solver::Dense).unwrap();
        assert!(m.diagnostics().residual_ok);
    }

    #[test]
    fn noiseless_near_interpolation() {
        let k = kernel("circle", "trivial", "sobolev:s=2", None);
        let target = random_target(&k, 4);
        let data = Dataset::sample(&target, 20, 0.0, 5, 6).unwrap();
        let m = fit(&k, &data, 1e-10).unwrap();
        for (x, y) in data.points.iter().zip(&data.labels) {
            assert!((m.predict(x).unwrap() - y).abs() <= 1e-3);
        }
    }

    #[test]
    fn heavy_regularization_shrinks_to_zero() {
        let k = kernel("circle", "trivial", "sobolev:s=2", Some(50.0));
        let target = random_target(&k, 7);
        let data = Dataset::sample(&target, 50, 0.1, 8, 9).unwrap();
        let m = fit(&k, &data, 1e12).unwrap();
        assert!(m.weights().iter().all(|a| a.abs() < 1e-10));
        assert!(m.predict(&[1.0]).unwrap().abs() < 1e-10);
    }

    #[test]
    fn training_residual_grows_with_eta() {
        let k = kernel("torus:2", "shift:pi,0", "sobolev:s=2", Some(40.0));
        let target = random_target(&k, 10);
        let data = Dataset::sample(&target, 150, 0.5, 11, 12).unwrap();
        let mut last = -1.0;
        for i in 0..10 {
            let eta = 1e-6 * 10f64.powf(i as f64 * 0.8);
            let m = fit(&k, &data, eta).unwrap();
            let mse: f64 = data
                .points
                .iter()
                .zip(&data.labels)
                .map(|(x, y)| (m.predict(x).unwrap() - y).powi(2))
                .sum::<f64>()
                / 150.0;
            assert!(mse >= last - 1e-12, "eta {eta}: {mse} < {last}");
            last = mse;
        }
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let k = kernel("sphere2", "antipodal", "sobolev:s=2", Some(42.0));
        let pts = uniform_sample(k.manifold(), 13, 120).unwrap();
        let g = gram_matrix(&k, &pts).unwrap();
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn predictions_are_orbit_invariant() {
        let k = kernel("torus:2", "perm:(0 1)+shift:pi,pi", "sobolev:s=2", Some(50.0));
        let target = random_target(&k, 14);
        let data = Dataset::sample(&target, 100, 0.2, 15, 16).unwrap();
        let m = fit(&k, &data, 1e-3).unwrap();
        let pts = uniform_sample(k.manifold(), 17, 200).unwrap();
        for x in &pts {
            let f = m.predict(x).unwrap();
            for h in k.action().finite_handles() {
                let tx = apply_action(k.action(), &h, x).unwrap();
                assert!((m.predict(&tx).unwrap() - f).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn excess_risk_examples() {
        let k = kernel("circle", "trivial", "sobolev:s=2", Some(4.0));
        let target = TargetFunction::new(
            ManifoldSpec::circle(),
            BTreeMap::from([(EigenIndex::torus(vec![1], Parity::Cos).unwrap(), 1.0)]),
            2.0,
        );
        let data = Dataset::new(vec![vec![0.0]], vec![0.0], 0.0).unwrap();
        let zero = fit(&k, &data, 1.0).unwrap();
        assert!((excess_risk_exact(&zero, &target) - 1.0 / (2.0 * PI)).abs() < 1e-15);

        let exact = KrrModel {
            coefficients: k.project(&target.coefficients),
            ..zero.clone()
        };
        assert!(excess_risk_exact(&exact, &target).abs() < 1e-30);
        let mc = excess_risk_mc(&exact, &target, 1, 1000).unwrap();
        assert!(mc.mean < 1e-28);

        let one = excess_risk_mc(&zero, &target, 5, 1).unwrap();
        let x = &uniform_sample(&ManifoldSpec::circle(), 5, 1).unwrap()[0];
        assert!((one.mean - x[0].cos().powi(2) / PI).abs() < 1e-15);

        // out-of-band energy is counted
        let far = TargetFunction::new(
            ManifoldSpec::circle(),
            BTreeMap::from([(EigenIndex::torus(vec![5], Parity::Sin).unwrap(), 2.0)]),
            2.0,
        );
        assert!((excess_risk_exact(&zero, &far) - 4.0 / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn exact_and_monte_carlo_risks_agree() {
        let k = kernel("torus:2", "signflip:0,1", "sobolev:s=2", Some(30.0));
        for seed in 0..5u64 {
            let target = random_target(&k, 100 + seed);
            let data = Dataset::sample(&target, 60, 0.5, seed, seed + 50).unwrap();
            let m = fit(&k, &data, 1e-3).unwrap();
            let exact = excess_risk_exact(&m, &target);
            let mc = excess_risk_mc(&m, &target, seed + 7, 20_000).unwrap();
            assert!((exact - mc.mean).abs() <= 4.0 * mc.stderr, "{exact} vs {mc:?}");
        }
    }

    #[test]
    fn optimal_eta_example() {
        let eta = optimal_eta(2.0, 1.0, 1, 2.0 * PI, 1.0, 100, 1.0).unwrap();
        assert!((eta - (1.0f64 / 300.0).powf(0.8)).abs() < 1e-15);
        assert!((eta - 0.01043).abs() < 1e-5);
        assert!(optimal_eta(0.5, 1.0, 1, 1.0, 1.0, 10, 1.0).is_err());
        assert!(optimal_eta(2.0, 1.5, 1, 1.0, 1.0, 10, 1.0).is_err());
        let base = optimal_eta(2.0, 1.0, 2, 1.0, 0.3, 100, 1.0).unwrap();
        let doubled = optimal_eta(2.0, 1.0, 2, 1.0, 0.3, 100, 2f64.sqrt()).unwrap();
        assert!((doubled / base - 2f64.powf(-2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn effective_estimator_shrinks() {
        let k = kernel("circle", "trivial", "sobolev:s=2", Some(1.0));
        let c = EigenIndex::torus_const(1);
        let target = TargetFunction::new(ManifoldSpec::circle(), BTreeMap::from([(c.clone(), 1.0)]), 2.0);
        let eff = effective_estimator(&target, &k, 1.0).unwrap();
        assert!((eff.coefficients[&c] - 0.5).abs() < 1e-15);
        let tiny = effective_estimator(&target, &k, 1e-14).unwrap();
        assert!((tiny.coefficients[&c] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_risk_is_not_below_the_bias_floor() {
        let k = kernel("circle", "reflect:0", "sobolev:s=2", None);
        let target = random_target(&k, 21);
        let eta = 1e-3;
        let eff = effective_estimator(&target, &k, eta).unwrap();
        let floor = {
            let model = KrrModel {
                kernel: Arc::clone(&k),
                support_points: vec![],
                weights: vec![],
                coefficients: k.project(&eff.coefficients),
                eta,
                diagnostics: FitDiagnostics {
                    solver: Solver::Dense,
                    jitter: 0.0,
                    relative_residual: 0.0,
                    residual_ok: true,
                },
            };
            excess_risk_exact(&model, &target)
        };
        let mut risks: Vec<f64> = (0..20u64)
            .map(|t| {
                let data = Dataset::sample(&target, 64, 0.5, 200 + t, 300 + t).unwrap();
                excess_risk_exact(&fit(&k, &data, eta).unwrap(), &target)
            })
            .collect();
        risks.sort_by(f64::total_cmp);
        let median = 0.5 * (risks[9] + risks[10]);
        assert!(median >= 0.5 * floor, "{median} < 0.5 * {floor}");
    }

    #[test]
    fn target_serializes() {
        let k = kernel("sphere2", "trivial", "sobolev:s=2", Some(6.0));
        let t = random_target(&k, 3);
        let json = serde_json::to_string(&t).unwrap();
        let back: TargetFunction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn eta_decreases_with_n(n in 1usize..100_000, s in 0.6f64..4.0, vol in 0.1f64..50.0) {
            let a = optimal_eta(s, 1.0, 1, vol, 0.25, n, 1.0).unwrap();
            let b = optimal_eta(s, 1.0, 1, vol, 0.25, n + 1, 1.0).unwrap();
            prop_assert!(b < a);
        }

        #[test]
        fn target_norm_is_consistent(coeffs in proptest::collection::vec(-2.0f64..2.0, 1..8)) {
            let k = kernel("circle", "trivial", "sobolev:s=2", Some(16.0));
            let t = TargetFunction::new(k.manifold().clone(), k.expand(&coeffs), 2.0);
            let direct: f64 = k.eigenvalues().zip(&coeffs).map(|(l, c)| l.powf(2.0).max(1.0) * c * c).sum();
            prop_assert!((t.sobolev_norm * t.sobolev_norm - direct).abs() <= 1e-12 * direct.max(1.0));
        }
    }
}
