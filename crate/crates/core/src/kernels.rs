//! Truncated spectral kernels over invariant eigenfunctions.
//!
//! A kernel stores an orthonormal invariant sub-basis `ψ_1, ..., ψ_p` and
//! weights `μ_ℓ`, and evaluates `K(x, y) = Σ μ_ℓ ψ_ℓ(x) ψ_ℓ(y)` through the
//! feature map `x ↦ (ψ_ℓ(x))_ℓ`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_ur};

use crate::actions::{ElementHandle, GroupActionSpec, InvariantFunction};
use crate::error::{Error, Result};
use crate::spectra::{enumerate_eigenbasis, unit_ball_volume, EigenBasis, EigenIndex, ManifoldSpec};

/// Largest cutoff chosen automatically.
pub const LAMBDA_MAX_CAP: f64 = 1e4;

/// Relative truncation target used when choosing a cutoff automatically.
pub const TAIL_FRACTION: f64 = 1e-3;

/// Spectral weight profile. Spec strings: `sobolev:s=2`, `bandlimited:D=50`,
/// `heat:t=0.1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SpectralProfile {
    Sobolev { s: f64 },
    Bandlimited { dim: usize },
    Heat { t: f64 },
}

impl SpectralProfile {
    /// `μ(λ)`; bandlimited profiles weight every retained entry by 1.
    pub fn weight(&self, lambda: f64) -> f64 {
        match *self {
            SpectralProfile::Sobolev { s } => {
                if lambda <= 1.0 {
                    1.0
                } else {
                    lambda.powf(-s)
                }
            }
            SpectralProfile::Bandlimited { .. } => 1.0,
            SpectralProfile::Heat { t } => (-lambda * t).exp(),
        }
    }

    pub(crate) fn validate(&self, d_eff: usize) -> Result<()> {
        match *self {
            SpectralProfile::Sobolev { s } => {
                if !s.is_finite() || 2.0 * s <= d_eff as f64 {
                    return Err(Error::config(format!(
                        "Sobolev kernel needs s > d/2 to define an RKHS (s = {s}, d = {d_eff})"
                    )));
                }
            }
            SpectralProfile::Bandlimited { dim } => {
                if dim == 0 {
                    return Err(Error::config("bandlimited kernel needs D >= 1"));
                }
            }
            SpectralProfile::Heat { t } => {
                if !(t.is_finite() && t > 0.0) {
                    return Err(Error::config(format!("heat kernel needs t > 0 (t = {t})")));
                }
            }
        }
        Ok(())
    }

    /// `∫_{λ_max}^∞ μ(λ) d(λ^{n/2})`, infinite when divergent.
    fn tail_integral(&self, n: usize, lambda_max: f64) -> f64 {
        let h = n as f64 / 2.0;
        let l = lambda_max.max(0.0);
        match *self {
            SpectralProfile::Sobolev { s } => {
                if s <= h {
                    return f64::INFINITY;
                }
                let beyond_one = h / (s - h) * l.max(1.0).powf(h - s);
                if l < 1.0 {
                    (1.0 - l.powf(h)) + beyond_one
                } else {
                    beyond_one
                }
            }
            SpectralProfile::Bandlimited { .. } => 0.0,
            SpectralProfile::Heat { t } => {
                let upper = if l == 0.0 { 1.0 } else { gamma_ur(h, t * l) };
                t.powf(-h) * gamma(h + 1.0) * upper
            }
        }
    }
}

impl fmt::Display for SpectralProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpectralProfile::Sobolev { s } => write!(f, "sobolev:s={s}"),
            SpectralProfile::Bandlimited { dim } => write!(f, "bandlimited:D={dim}"),
            SpectralProfile::Heat { t } => write!(f, "heat:t={t}"),
        }
    }
}

impl FromStr for SpectralProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("bad kernel spec `{s}` (expected sobolev:s=.., bandlimited:D=.., heat:t=..)"));
        let (kind, arg) = s.trim().split_once(':').ok_or_else(bad)?;
        let (key, value) = arg.split_once('=').ok_or_else(bad)?;
        match (kind, key) {
            ("sobolev", "s") => Ok(SpectralProfile::Sobolev {
                s: value.parse().map_err(|_| bad())?,
            }),
            ("bandlimited", "D") => Ok(SpectralProfile::Bandlimited {
                dim: value.parse().map_err(|_| bad())?,
            }),
            ("heat", "t") => Ok(SpectralProfile::Heat {
                t: value.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

impl From<SpectralProfile> for String {
    fn from(p: SpectralProfile) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for SpectralProfile {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A truncated kernel `Σ μ_ℓ ψ_ℓ(x) ψ_ℓ(y)` over invariant eigenfunctions.
#[derive(Clone, Debug)]
pub struct SpectralKernel {
    action: GroupActionSpec,
    profile: SpectralProfile,
    basis: EigenBasis,
    functions: Vec<InvariantFunction>,
    weights: Vec<f64>,
    lambda_max: f64,
    tail_bound: f64,
    /// Sorted basis entries referenced by some function.
    referenced: Vec<usize>,
    /// `functions[i].terms` with entry indices replaced by positions in `referenced`.
    local_terms: Vec<Vec<(usize, f64)>>,
}

/// Serializable summary of a kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMetadata {
    pub manifold: String,
    pub action: String,
    pub profile: String,
    pub lambda_max: f64,
    pub basis_size: usize,
    /// `None` when the tail estimate diverges.
    pub tail_bound: Option<f64>,
    pub effective_dimension: usize,
}

/// Builds the invariant kernel. `lambda_max = None` selects the cutoff
/// automatically (for bandlimited profiles: the smallest cutoff holding `D`
/// invariant functions).
pub fn build_kernel(
    manifold: &ManifoldSpec,
    action: &GroupActionSpec,
    profile: SpectralProfile,
    lambda_max: Option<f64>,
) -> Result<SpectralKernel> {
    if action.manifold() != manifold {
        return Err(Error::config(format!(
            "action `{action}` is bound to {}, not {manifold}",
            action.manifold()
        )));
    }
    profile.validate(action.effective_dimension())?;
    let lambda_max = match (lambda_max, profile) {
        (Some(l), _) => {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::config(format!("lambda_max must be finite and >= 0 (got {l})")));
            }
            l
        }
        (None, SpectralProfile::Bandlimited { dim }) => bandlimited_cutoff(action, dim)?,
        (None, _) => select_lambda_max(manifold, profile),
    };
    let basis = enumerate_eigenbasis(manifold, lambda_max)?;
    let mut functions = action.invariant_functions(&basis)?;
    if let SpectralProfile::Bandlimited { dim } = profile {
        if dim > functions.len() {
            return Err(Error::config(format!(
                "bandlimited D = {dim} exceeds the {} invariant eigenfunctions with eigenvalue <= {lambda_max}",
                functions.len()
            )));
        }
        functions.truncate(dim);
    }
    let weights = functions.iter().map(|f| profile.weight(f.lambda as f64)).collect();
    let tail_bound = tail_bound(manifold, profile, lambda_max);

    let mut referenced: Vec<usize> = functions.iter().flat_map(|f| f.terms.iter().map(|t| t.0)).collect();
    referenced.sort_unstable();
    referenced.dedup();
    let local_terms = functions
        .iter()
        .map(|f| {
            f.terms
                .iter()
                .map(|&(i, c)| (referenced.binary_search(&i).expect("referenced entry"), c))
                .collect()
        })
        .collect();
    Ok(SpectralKernel {
        action: action.clone(),
        profile,
        basis,
        functions,
        weights,
        lambda_max,
        tail_bound,
        referenced,
        local_terms,
    })
}

/// Upper bound on `sup_x Σ_{λ>λ_max} μ(λ) Σ_{φ∈V_λ} φ(x)²`: twice the Weyl
/// estimate `(ω_n/(2π)^n) ∫_{λ_max}^∞ μ d(λ^{n/2})`. On these homogeneous
/// manifolds the inner sum is `dim V_λ / vol(M)` at every point, and any
/// invariant sub-basis contributes no more than the full eigenspace.
pub fn tail_bound(manifold: &ManifoldSpec, profile: SpectralProfile, lambda_max: f64) -> f64 {
    if matches!(profile, SpectralProfile::Bandlimited { .. }) {
        return 0.0;
    }
    let n = manifold.dim();
    2.0 * unit_ball_volume(n) / (2.0 * PI).powi(n as i32) * profile.tail_integral(n, lambda_max)
}

/// Smallest cutoff whose tail bound is at most `TAIL_FRACTION` of the mean
/// kernel diagonal estimate `(ω_n/(2π)^n) ∫_0^∞ μ d(λ^{n/2})`, capped at
/// `LAMBDA_MAX_CAP`. Divergent tails fall back to the cap.
pub fn select_lambda_max(manifold: &ManifoldSpec, profile: SpectralProfile) -> f64 {
    let n = manifold.dim();
    let c = unit_ball_volume(n) / (2.0 * PI).powi(n as i32);
    let diagonal = (c * profile.tail_integral(n, 0.0)).max(1.0 / manifold.volume());
    let target = TAIL_FRACTION * diagonal;
    let tail = |l: f64| tail_bound(manifold, profile, l);
    if !tail(LAMBDA_MAX_CAP).is_finite() || tail(LAMBDA_MAX_CAP) > target {
        log::warn!("tail bound for {profile} on {manifold} not met below {LAMBDA_MAX_CAP}; using the cap");
        return LAMBDA_MAX_CAP;
    }
    if tail(0.0) <= target {
        return 0.0;
    }
    // Eigenvalues are integers: bisect on the integer cutoff.
    let (mut lo, mut hi) = (0u64, LAMBDA_MAX_CAP as u64);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if tail(mid as f64) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi as f64
}

fn bandlimited_cutoff(action: &GroupActionSpec, dim: usize) -> Result<f64> {
    let mut lambda = 1.0;
    loop {
        let dims = action.invariant_dimensions(lambda)?;
        let mut total = 0u64;
        for (l, d) in dims {
            total += d;
            if total >= dim as u64 {
                return Ok(l as f64);
            }
        }
        lambda *= 2.0;
    }
}

impl SpectralKernel {
    pub fn action(&self) -> &GroupActionSpec {
        &self.action
    }

    pub fn manifold(&self) -> &ManifoldSpec {
        self.action.manifold()
    }

    pub fn profile(&self) -> SpectralProfile {
        self.profile
    }

    /// The full eigenbasis up to `lambda_max` that the invariant functions are
    /// expressed in.
    pub fn basis(&self) -> &EigenBasis {
        &self.basis
    }

    pub fn functions(&self) -> &[InvariantFunction] {
        &self.functions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of invariant functions `p`.
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn tail_bound(&self) -> f64 {
        self.tail_bound
    }

    pub fn eigenvalues(&self) -> impl Iterator<Item = f64> + '_ {
        self.functions.iter().map(|f| f.lambda as f64)
    }

    /// Invariant eigenfunction values `(ψ_ℓ(x))_ℓ`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let values = self.basis.evaluate(&self.referenced, x)?;
        Ok(self
            .local_terms
            .iter()
            .map(|terms| terms.iter().map(|&(j, c)| c * values[j]).sum())
            .collect())
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let fx = self.features(x)?;
        let fy = self.features(y)?;
        Ok(self.eval_features(&fx, &fy))
    }

    /// `Σ μ_ℓ a_ℓ b_ℓ` in a fixed left-to-right order.
    pub fn eval_features(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (u, v))| w * (u * v))
            .sum()
    }

    /// Upper bound on `sup_x K(x, x)`: `Σ_λ μ(λ)·mult(λ)/vol(M)` over retained
    /// eigenvalues.
    pub fn diagonal_bound(&self) -> f64 {
        let mut by_lambda: BTreeMap<u64, f64> = BTreeMap::new();
        for (f, w) in self.functions.iter().zip(&self.weights) {
            by_lambda.entry(f.lambda).or_insert(*w);
        }
        by_lambda
            .iter()
            .map(|(&l, &w)| {
                let m = self.basis.eigenspace(l).map_or(0, |s| s.multiplicity());
                w * m as f64
            })
            .sum::<f64>()
            / self.manifold().volume()
    }

    /// Coefficients of `Σ β_ℓ ψ_ℓ` over the full-basis entries.
    pub fn expand(&self, beta: &[f64]) -> BTreeMap<EigenIndex, f64> {
        let mut out = BTreeMap::new();
        for (f, b) in self.functions.iter().zip(beta) {
            for &(i, c) in &f.terms {
                *out.entry(self.basis.entries()[i].clone()).or_insert(0.0) += b * c;
            }
        }
        out
    }

    /// `⟨g, ψ_ℓ⟩` for a function given by full-basis coefficients.
    pub fn project(&self, coefficients: &BTreeMap<EigenIndex, f64>) -> Vec<f64> {
        let entries = self.basis.entries();
        self.functions
            .iter()
            .map(|f| {
                f.terms
                    .iter()
                    .map(|&(i, c)| c * coefficients.get(&entries[i]).copied().unwrap_or(0.0))
                    .sum()
            })
            .collect()
    }

    pub fn metadata(&self) -> KernelMetadata {
        KernelMetadata {
            manifold: self.manifold().to_string(),
            action: self.action.to_string(),
            profile: self.profile.to_string(),
            lambda_max: self.lambda_max,
            basis_size: self.len(),
            tail_bound: self.tail_bound.is_finite().then_some(self.tail_bound),
            effective_dimension: self.action.effective_dimension(),
        }
    }
}

pub fn kernel_eval(kernel: &SpectralKernel, x: &[f64], y: &[f64]) -> Result<f64> {
    kernel.eval(x, y)
}

/// `∫_G K(τx, y) dτ` for a base kernel. Finite groups are averaged exactly;
/// continuous parts use a trapezoidal grid with `order` nodes per dimension
/// (default: 4 times the largest frequency the group sees in the base basis).
pub fn haar_average_kernel(
    base: &SpectralKernel,
    action: &GroupActionSpec,
    x: &[f64],
    y: &[f64],
    order: Option<usize>,
) -> Result<f64> {
    if action.manifold() != base.manifold() {
        return Err(Error::config(format!(
            "action on {} cannot average a kernel on {}",
            action.manifold(),
            base.manifold()
        )));
    }
    let fy = base.features(y)?;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut add = |handle: ElementHandle, total: &mut f64| -> Result<()> {
        let tx = crate::actions::apply_action(action, &handle, x)?;
        *total += base.eval_features(&base.features(&tx)?, &fy);
        count += 1;
        Ok(())
    };
    if action.is_finite() {
        for h in action.finite_handles() {
            add(h, &mut total)?;
        }
    } else {
        let needed = 4 * action.max_continuous_frequency(base.basis(), 0..base.basis().len());
        let order = order.unwrap_or(needed.max(1));
        if order < needed {
            return Err(Error::numerical(format!(
                "quadrature order {order} below the required {needed}"
            )));
        }
        let nodes = action.quadrature_nodes(order);
        for finite in 0..action.finite_len() {
            for params in &nodes {
                add(
                    ElementHandle::Continuous {
                        finite,
                        params: params.clone(),
                    },
                    &mut total,
                )?;
            }
        }
    }
    Ok(total / count as f64)
}

/// `Σ λ α²`.
pub fn dirichlet_energy(coefficients: &BTreeMap<EigenIndex, f64>) -> f64 {
    coefficients.iter().map(|(k, a)| k.eigenvalue() * a * a).sum()
}

/// Largest eigenvalue among the retained invariant functions of a
/// bandlimited kernel: the maximal Dirichlet energy of a unit-norm element.
pub fn space_complexity(kernel: &SpectralKernel) -> Result<f64> {
    match kernel.profile {
        SpectralProfile::Bandlimited { .. } => Ok(kernel
            .functions
            .last()
            .map(|f| f.lambda as f64)
            .expect("bandlimited kernels hold at least one function")),
        other => Err(Error::config(format!("space complexity needs a bandlimited kernel, got {other}"))),
    }
}
