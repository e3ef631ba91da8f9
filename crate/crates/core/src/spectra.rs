//! Closed-form Laplace–Beltrami spectra.
//!
//! The supported manifolds are the flat torus `T^d = R^d / 2πZ^d` (the circle
//! is `T^1`), finite products of tori (which are again tori), and the round
//! unit 2-sphere. Every eigenvalue on these spaces is an integer, so bases are
//! stored with exact `u64` eigenvalues and counted exactly.
//!
//! Eigenfunctions are real and orthonormal with respect to the Riemannian
//! volume `dvol` (not the normalized probability measure).

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the manifold's coordinate chart: angles on a torus, a unit
/// 3-vector on the sphere.
pub type Point = Vec<f64>;

/// Default cap on the number of basis entries a single enumeration may hold.
pub const DEFAULT_ENTRY_CAP: usize = 10_000_000;

/// Allowed deviation of a sphere point from unit norm.
pub const SPHERE_TOLERANCE: f64 = 1e-9;

const TWO_PI: f64 = 2.0 * PI;

/// The manifolds with a closed-form spectrum.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ManifoldKind {
    /// Flat torus of side 2π in `d >= 1` dimensions.
    Torus(usize),
    /// Round unit sphere in R^3.
    Sphere2,
    /// Riemannian product of the factors.
    Product(Vec<ManifoldSpec>),
}

/// A compact boundaryless manifold. Serializes as its spec string
/// (`torus:2`, `sphere2`, `torus:1*torus:1`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct ManifoldSpec {
    kind: ManifoldKind,
}

/// The coordinate chart a manifold resolves to for spectral computations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Chart {
    Torus(usize),
    Sphere2,
}

impl ManifoldSpec {
    pub fn circle() -> Self {
        Self::torus(1)
    }

    /// # Panics
    /// Panics if `d == 0`.
    pub fn torus(d: usize) -> Self {
        assert!(d >= 1, "torus dimension must be positive");
        ManifoldSpec {
            kind: ManifoldKind::Torus(d),
        }
    }

    pub fn sphere2() -> Self {
        ManifoldSpec {
            kind: ManifoldKind::Sphere2,
        }
    }

    pub fn product(factors: Vec<ManifoldSpec>) -> Self {
        ManifoldSpec {
            kind: ManifoldKind::Product(factors),
        }
    }

    pub fn kind(&self) -> &ManifoldKind {
        &self.kind
    }

    /// Intrinsic dimension.
    pub fn dim(&self) -> usize {
        match &self.kind {
            ManifoldKind::Torus(d) => *d,
            ManifoldKind::Sphere2 => 2,
            ManifoldKind::Product(fs) => fs.iter().map(ManifoldSpec::dim).sum(),
        }
    }

    /// Riemannian volume.
    pub fn volume(&self) -> f64 {
        match &self.kind {
            ManifoldKind::Torus(d) => TWO_PI.powi(*d as i32),
            ManifoldKind::Sphere2 => 4.0 * PI,
            ManifoldKind::Product(fs) => fs.iter().map(ManifoldSpec::volume).product(),
        }
    }

    /// Resolves the manifold to a chart with a closed-form eigenbasis.
    /// Products of tori flatten to a single torus; anything else is unsupported.
    pub fn chart(&self) -> Result<Chart> {
        match &self.kind {
            ManifoldKind::Torus(d) => Ok(Chart::Torus(*d)),
            ManifoldKind::Sphere2 => Ok(Chart::Sphere2),
            ManifoldKind::Product(fs) => {
                let mut d = 0;
                for f in fs {
                    match f.chart()? {
                        Chart::Torus(k) => d += k,
                        Chart::Sphere2 => {
                            return Err(Error::Unsupported(format!(
                                "product manifold {self} contains a sphere factor; only products of tori have a built-in eigenbasis"
                            )))
                        }
                    }
                }
                if d == 0 {
                    return Err(Error::Unsupported("empty product manifold".into()));
                }
                Ok(Chart::Torus(d))
            }
        }
    }
}

impl fmt::Display for ManifoldSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ManifoldKind::Torus(d) => write!(f, "torus:{d}"),
            ManifoldKind::Sphere2 => write!(f, "sphere2"),
            ManifoldKind::Product(fs) => {
                for (i, m) in fs.iter().enumerate() {
                    if i > 0 {
                        write!(f, "*")?;
                    }
                    write!(f, "{m}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for ManifoldSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains('*') {
            let factors = s
                .split('*')
                .map(str::parse)
                .collect::<Result<Vec<ManifoldSpec>>>()?;
            return Ok(ManifoldSpec::product(factors));
        }
        match s {
            "circle" => Ok(ManifoldSpec::circle()),
            "sphere2" => Ok(ManifoldSpec::sphere2()),
            _ => {
                let d = s
                    .strip_prefix("torus:")
                    .ok_or_else(|| Error::config(format!("unknown manifold `{s}` (expected torus:d, circle or sphere2)")))?;
                let d: usize = d
                    .parse()
                    .map_err(|_| Error::config(format!("bad torus dimension in `{s}`")))?;
                if d == 0 {
                    return Err(Error::config("torus dimension must be positive"));
                }
                Ok(ManifoldSpec::torus(d))
            }
        }
    }
}

impl From<ManifoldSpec> for String {
    fn from(m: ManifoldSpec) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for ManifoldSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Trigonometric type of a torus eigenfunction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Const,
    Cos,
    Sin,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EigenLabel {
    /// `cos(k·x)` / `sin(k·x)` with `k` a canonical half-lattice representative
    /// (first nonzero coordinate positive), or the constant for `k = 0`.
    Torus { k: Vec<i64>, parity: Parity },
    /// Real spherical harmonic: `m > 0` carries `cos(mφ)`, `m < 0` carries `sin(|m|φ)`.
    Sphere { degree: u32, order: i32 },
}

/// A labeled eigenfunction. Ordering is by eigenvalue, then label, which is the
/// canonical basis order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EigenIndex {
    pub lambda: u64,
    pub label: EigenLabel,
}

impl EigenIndex {
    pub fn eigenvalue(&self) -> f64 {
        self.lambda as f64
    }

    pub fn torus_const(d: usize) -> Self {
        EigenIndex {
            lambda: 0,
            label: EigenLabel::Torus {
                k: vec![0; d],
                parity: Parity::Const,
            },
        }
    }

    /// Torus eigenfunction for a canonical frequency vector.
    pub fn torus(k: Vec<i64>, parity: Parity) -> Result<Self> {
        let lambda = k.iter().map(|&v| (v * v) as u64).sum::<u64>();
        let zero = lambda == 0;
        if zero != (parity == Parity::Const) {
            return Err(Error::config("parity `const` is used exactly for k = 0"));
        }
        if !zero && !is_canonical(&k) {
            return Err(Error::config(format!(
                "frequency {k:?} is not canonical (first nonzero coordinate must be positive)"
            )));
        }
        Ok(EigenIndex {
            lambda,
            label: EigenLabel::Torus { k, parity },
        })
    }

    pub fn sphere(degree: u32, order: i32) -> Result<Self> {
        if order.unsigned_abs() > degree {
            return Err(Error::config(format!("order {order} outside [-{degree}, {degree}]")));
        }
        let l = degree as u64;
        Ok(EigenIndex {
            lambda: l * (l + 1),
            label: EigenLabel::Sphere { degree, order },
        })
    }

    /// Kind tag used in CSV output: `const`, `cos`, `sin` or `ylm`.
    pub fn kind_tag(&self) -> &'static str {
        match &self.label {
            EigenLabel::Torus { parity, .. } => match parity {
                Parity::Const => "const",
                Parity::Cos => "cos",
                Parity::Sin => "sin",
            },
            EigenLabel::Sphere { .. } => "ylm",
        }
    }

    /// Space-separated frequency vector, or `l m` for a harmonic.
    pub fn k_or_lm(&self) -> String {
        match &self.label {
            EigenLabel::Torus { k, .. } => k
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" "),
            EigenLabel::Sphere { degree, order } => format!("{degree} {order}"),
        }
    }
}

/// First nonzero coordinate positive.
pub fn is_canonical(k: &[i64]) -> bool {
    k.iter().find(|&&v| v != 0).is_some_and(|&v| v > 0)
}

/// All eigenfunctions with eigenvalue at most `lambda_max`, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenBasis {
    manifold: ManifoldSpec,
    chart: Chart,
    lambda_max: f64,
    entries: Vec<EigenIndex>,
}

/// A maximal run of basis entries sharing one eigenvalue.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Eigenspace {
    pub lambda: u64,
    pub range: Range<usize>,
}

impl Eigenspace {
    pub fn multiplicity(&self) -> usize {
        self.range.len()
    }
}

impl EigenBasis {
    pub fn manifold(&self) -> &ManifoldSpec {
        &self.manifold
    }

    pub fn chart(&self) -> Chart {
        self.chart
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn entries(&self) -> &[EigenIndex] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn position(&self, index: &EigenIndex) -> Option<usize> {
        self.entries.binary_search(index).ok()
    }

    pub fn eigenspaces(&self) -> Vec<Eigenspace> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.entries.len() {
            let lambda = self.entries[start].lambda;
            let end = start + self.entries[start..].partition_point(|e| e.lambda == lambda);
            out.push(Eigenspace {
                lambda,
                range: start..end,
            });
            start = end;
        }
        out
    }

    /// The eigenspace of an exact eigenvalue, if present in the basis.
    pub fn eigenspace(&self, lambda: u64) -> Option<Eigenspace> {
        let start = self.entries.partition_point(|e| e.lambda < lambda);
        let end = self.entries.partition_point(|e| e.lambda <= lambda);
        (start < end).then_some(Eigenspace {
            lambda,
            range: start..end,
        })
    }

    /// Values of the selected entries at `x`, in the order of `indices`.
    pub fn evaluate(&self, indices: &[usize], x: &[f64]) -> Result<Vec<f64>> {
        validate_point(self.chart, x)?;
        let mut out = Vec::with_capacity(indices.len());
        match self.chart {
            Chart::Torus(d) => {
                let c0 = TWO_PI.powf(-(d as f64) / 2.0);
                let c1 = std::f64::consts::SQRT_2 * c0;
                let mut cached: Option<(&[i64], f64, f64)> = None;
                for &i in indices {
                    let EigenLabel::Torus { k, parity } = &self.entries[i].label else {
                        unreachable!("torus basis holds torus labels")
                    };
                    if *parity == Parity::Const {
                        out.push(c0);
                        continue;
                    }
                    let (s, c) = match cached {
                        Some((ck, s, c)) if ck == k.as_slice() => (s, c),
                        _ => {
                            let (s, c) = phase(k, x).sin_cos();
                            cached = Some((k.as_slice(), s, c));
                            (s, c)
                        }
                    };
                    out.push(c1 * if *parity == Parity::Cos { c } else { s });
                }
            }
            Chart::Sphere2 => {
                let lmax = indices
                    .iter()
                    .map(|&i| match self.entries[i].label {
                        EigenLabel::Sphere { degree, .. } => degree,
                        _ => unreachable!("sphere basis holds sphere labels"),
                    })
                    .max()
                    .unwrap_or(0);
                let table = harmonics_table(lmax, x);
                for &i in indices {
                    let EigenLabel::Sphere { degree, order } = self.entries[i].label else {
                        unreachable!()
                    };
                    out.push(table[harmonic_slot(degree, order)]);
                }
            }
        }
        Ok(out)
    }

    pub fn evaluate_all(&self, x: &[f64]) -> Result<Vec<f64>> {
        let all: Vec<usize> = (0..self.entries.len()).collect();
        self.evaluate(&all, x)
    }
}

/// Exhaustive enumeration with the default entry cap.
pub fn enumerate_eigenbasis(manifold: &ManifoldSpec, lambda_max: f64) -> Result<EigenBasis> {
    enumerate_eigenbasis_capped(manifold, lambda_max, DEFAULT_ENTRY_CAP)
}

pub fn enumerate_eigenbasis_capped(
    manifold: &ManifoldSpec,
    lambda_max: f64,
    cap: usize,
) -> Result<EigenBasis> {
    let chart = manifold.chart()?;
    let bound = eigenvalue_bound(lambda_max)?;
    let count = checked_count(chart, bound, cap)?;
    let mut entries = Vec::with_capacity(count as usize);
    match chart {
        Chart::Torus(d) => {
            let mut k = vec![0i64; d];
            for_each_lattice_point(&mut k, 0, bound, &mut |k, lambda| {
                if lambda == 0 {
                    entries.push(EigenIndex::torus_const(d));
                } else if is_canonical(k) {
                    for parity in [Parity::Cos, Parity::Sin] {
                        entries.push(EigenIndex {
                            lambda,
                            label: EigenLabel::Torus {
                                k: k.to_vec(),
                                parity,
                            },
                        });
                    }
                }
            });
            entries.sort_unstable();
        }
        Chart::Sphere2 => {
            let mut l: u32 = 0;
            while (l as u64) * (l as u64 + 1) <= bound {
                for m in -(l as i32)..=(l as i32) {
                    entries.push(EigenIndex {
                        lambda: l as u64 * (l as u64 + 1),
                        label: EigenLabel::Sphere {
                            degree: l,
                            order: m,
                        },
                    });
                }
                l += 1;
            }
        }
    }
    debug_assert_eq!(entries.len() as u128, count);
    Ok(EigenBasis {
        manifold: manifold.clone(),
        chart,
        lambda_max,
        entries,
    })
}

/// Exact eigenvalue count and the leading Weyl term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeylCount {
    pub count: u64,
    pub prediction: f64,
}

impl WeylCount {
    pub fn ratio(&self) -> f64 {
        self.count as f64 / self.prediction
    }
}

pub fn weyl_count(manifold: &ManifoldSpec, lambda: f64) -> Result<WeylCount> {
    weyl_count_capped(manifold, lambda, DEFAULT_ENTRY_CAP)
}

pub fn weyl_count_capped(manifold: &ManifoldSpec, lambda: f64, cap: usize) -> Result<WeylCount> {
    let chart = manifold.chart()?;
    let bound = eigenvalue_bound(lambda)?;
    let count = checked_count(chart, bound, cap)? as u64;
    Ok(WeylCount {
        count,
        prediction: weyl_prediction(manifold.dim(), manifold.volume(), lambda),
    })
}

/// Leading Weyl term `ω_d / (2π)^d · vol · λ^{d/2}`.
pub fn weyl_prediction(dim: usize, volume: f64, lambda: f64) -> f64 {
    unit_ball_volume(dim) / TWO_PI.powi(dim as i32) * volume * lambda.powf(dim as f64 / 2.0)
}

/// Volume of the unit ball in R^d, `π^{d/2} / Γ(d/2 + 1)`.
pub fn unit_ball_volume(d: usize) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => TWO_PI / d as f64 * unit_ball_volume(d - 2),
    }
}

/// `n` i.i.d. points from the normalized volume measure, deterministic in `seed`.
pub fn uniform_sample(manifold: &ManifoldSpec, seed: u64, n: usize) -> Result<Vec<Point>> {
    let chart = manifold.chart()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_chart(chart, &mut rng, n))
}

pub(crate) fn sample_chart<R: Rng>(chart: Chart, rng: &mut R, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| match chart {
            Chart::Torus(d) => (0..d).map(|_| rng.random::<f64>() * TWO_PI).collect(),
            Chart::Sphere2 => loop {
                let v: [f64; 3] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if norm > 1e-12 {
                    break v.iter().map(|c| c / norm).collect();
                }
            },
        })
        .collect()
}

/// Evaluates a single eigenfunction at `x`.
pub fn eval_eigenfunction(manifold: &ManifoldSpec, index: &EigenIndex, x: &[f64]) -> Result<f64> {
    let chart = manifold.chart()?;
    validate_point(chart, x)?;
    match (chart, &index.label) {
        (Chart::Torus(d), EigenLabel::Torus { k, parity }) if k.len() == d => {
            let c0 = TWO_PI.powf(-(d as f64) / 2.0);
            Ok(match parity {
                Parity::Const => c0,
                Parity::Cos => std::f64::consts::SQRT_2 * c0 * phase(k, x).cos(),
                Parity::Sin => std::f64::consts::SQRT_2 * c0 * phase(k, x).sin(),
            })
        }
        (Chart::Sphere2, EigenLabel::Sphere { degree, order }) => {
            Ok(real_harmonic(*degree, *order, x))
        }
        _ => Err(Error::config(format!(
            "eigen index {index:?} does not belong to manifold {manifold}"
        ))),
    }
}

/// Checks that `x` lies in the chart: `d` finite angles, or a unit 3-vector.
pub fn validate_point(chart: Chart, x: &[f64]) -> Result<()> {
    match chart {
        Chart::Torus(d) => {
            if x.len() != d || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "expected {d} finite torus coordinates, got {x:?}"
                )));
            }
        }
        Chart::Sphere2 => {
            if x.len() != 3 {
                return Err(Error::Domain(format!("expected a 3-vector, got {x:?}")));
            }
            let norm = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            if !((norm - 1.0).abs() <= SPHERE_TOLERANCE) {
                return Err(Error::Domain(format!(
                    "point {x:?} is off the unit sphere (norm {norm})"
                )));
            }
        }
    }
    Ok(())
}

/// Geodesic distance in the flat or round metric.
pub fn geodesic_distance(chart: Chart, x: &[f64], y: &[f64]) -> f64 {
    match chart {
        Chart::Torus(_) => x
            .iter()
            .zip(y)
            .map(|(a, b)| {
                let d = (a - b).rem_euclid(TWO_PI);
                let d = d.min(TWO_PI - d);
                d * d
            })
            .sum::<f64>()
            .sqrt(),
        Chart::Sphere2 => {
            let dot = x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
            let cross = [
                x[1] * y[2] - x[2] * y[1],
                x[2] * y[0] - x[0] * y[2],
                x[0] * y[1] - x[1] * y[0],
            ];
            let cn = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            cn.atan2(dot)
        }
    }
}

/// Visits every `k` in Z^d with `|k|^2 <= bound`, together with `|k|^2`.
pub(crate) fn for_each_lattice_point<F: FnMut(&[i64], u64)>(
    k: &mut [i64],
    axis: usize,
    bound: u64,
    visit: &mut F,
) {
    fn go<F: FnMut(&[i64], u64)>(k: &mut [i64], axis: usize, used: u64, bound: u64, visit: &mut F) {
        if axis == k.len() {
            visit(k, used);
            return;
        }
        let r = (bound - used).isqrt() as i64;
        for v in -r..=r {
            k[axis] = v;
            go(k, axis + 1, used + (v * v) as u64, bound, visit);
        }
        k[axis] = 0;
    }
    go(k, axis, 0, bound, visit);
}

/// Number of integer points in the closed ball of squared radius `bound` in Z^d.
pub fn lattice_ball_count(d: usize, bound: u64) -> u128 {
    match d {
        0 => 1,
        1 => 2 * bound.isqrt() as u128 + 1,
        _ => {
            let r = bound.isqrt();
            (0..=r)
                .map(|v| {
                    let c = lattice_ball_count(d - 1, bound - v * v);
                    if v == 0 {
                        c
                    } else {
                        2 * c
                    }
                })
                .sum()
        }
    }
}

pub(crate) fn eigenvalue_bound(lambda: f64) -> Result<u64> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if lambda >= u64::MAX as f64 / 4.0 {
        return Err(Error::ResourceLimit {
            what: "eigenvalue range".into(),
            requested: u128::MAX,
            cap: 0,
        });
    }
    Ok(lambda.floor() as u64)
}

/// Exact count of entries with eigenvalue `<= bound`, refused above `cap`.
pub(crate) fn checked_count(chart: Chart, bound: u64, cap: usize) -> Result<u128> {
    let (estimate, what) = match chart {
        Chart::Torus(d) => (unit_ball_volume(d) * (bound as f64).powf(d as f64 / 2.0), "torus eigenbasis"),
        Chart::Sphere2 => (bound as f64, "sphere eigenbasis"),
    };
    // Skip the exact scan when even the Weyl estimate is far over the cap.
    if estimate > 2.0 * cap as f64 + 1e4 {
        return Err(Error::ResourceLimit {
            what: what.into(),
            requested: estimate as u128,
            cap,
        });
    }
    let count = match chart {
        Chart::Torus(d) => lattice_ball_count(d, bound),
        Chart::Sphere2 => {
            let lmax = sphere_max_degree(bound) as u128;
            (lmax + 1) * (lmax + 1)
        }
    };
    if count > cap as u128 {
        return Err(Error::ResourceLimit {
            what: what.into(),
            requested: count,
            cap,
        });
    }
    Ok(count)
}

/// Largest `l` with `l(l+1) <= bound`.
pub(crate) fn sphere_max_degree(bound: u64) -> u64 {
    let mut l = ((bound as f64).sqrt() as u64).saturating_sub(1);
    while (l + 1) * (l + 2) <= bound {
        l += 1;
    }
    while l > 0 && l * (l + 1) > bound {
        l -= 1;
    }
    l
}

fn phase(k: &[i64], x: &[f64]) -> f64 {
    k.iter()
        .zip(x)
        .map(|(&kv, &xv)| kv as f64 * xv.rem_euclid(TWO_PI))
        .sum()
}

pub(crate) fn harmonic_slot(degree: u32, order: i32) -> usize {
    let l = degree as i64;
    (l * l + l + order as i64) as usize
}

/// All real orthonormal harmonics of degree `<= lmax` at the unit vector `x`,
/// indexed by `l^2 + l + m`.
///
/// Uses the fully normalized associated Legendre functions with the standard
/// upward recurrence in `l`, which stays bounded for large degrees.
pub(crate) fn harmonics_table(lmax: u32, x: &[f64]) -> Vec<f64> {
    let lmax = lmax as usize;
    let size = (lmax + 1) * (lmax + 1);
    let mut out = vec![0.0; size];
    let z = x[2].clamp(-1.0, 1.0);
    let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
    let phi = x[1].atan2(x[0]);
    let sqrt2 = std::f64::consts::SQRT_2;

    // pmm = P̄_m^m(z), normalized so that 2π ∫ P̄² dz = 1.
    let mut pmm = 1.0 / (4.0 * PI).sqrt();
    for m in 0..=lmax {
        if m > 0 {
            pmm *= ((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * rho;
        }
        let (s, c) = (m as f64 * phi).sin_cos();
        let mut put = |l: usize, p: f64| {
            let centre = l * l + l;
            if m == 0 {
                out[centre] = p;
            } else {
                out[centre + m] = sqrt2 * p * c;
                out[centre - m] = sqrt2 * p * s;
            }
        };
        put(m, pmm);
        if m == lmax {
            break;
        }
        let mut p_prev = pmm;
        let mut p_curr = ((2 * m + 3) as f64).sqrt() * z * pmm;
        put(m + 1, p_curr);
        for l in m + 2..=lmax {
            let lf = l as f64;
            let mf = m as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            let p_next = a * (z * p_curr - b * p_prev);
            p_prev = p_curr;
            p_curr = p_next;
            put(l, p_curr);
        }
    }
    out
}

fn real_harmonic(degree: u32, order: i32, x: &[f64]) -> f64 {
    let m = order.unsigned_abs() as usize;
    let l = degree as usize;
    let z = x[2].clamp(-1.0, 1.0);
    let rho = (x[0] * x[0] + x[1] * x[1]).sqrt();
    let mut p = 1.0 / (4.0 * PI).sqrt();
    for i in 1..=m {
        p *= ((2 * i + 1) as f64 / (2 * i) as f64).sqrt() * rho;
    }
    if l > m {
        let mut p_prev = p;
        let mut p_curr = ((2 * m + 3) as f64).sqrt() * z * p;
        for ll in m + 2..=l {
            let lf = ll as f64;
            let mf = m as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            let p_next = a * (z * p_curr - b * p_prev);
            p_prev = p_curr;
            p_curr = p_next;
        }
        p = p_curr;
    }
    if order == 0 {
        return p;
    }
    let phi = x[1].atan2(x[0]);
    let (s, c) = (m as f64 * phi).sin_cos();
    std::f64::consts::SQRT_2 * p * if order > 0 { c } else { s }
}
