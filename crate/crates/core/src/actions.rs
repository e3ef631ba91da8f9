//! Isometric group actions on the built-in manifolds.
//!
//! Finite parts of a group are enumerated exactly: on a torus every element is
//! an affine map `x ↦ A x + 2π b` with `A` a signed permutation matrix and `b`
//! an exact rational vector of turns. Continuous parts (a subtorus of
//! translations, or the full rotation group about the sphere's z-axis) are
//! handled by exact frequency selection rules, with a trapezoidal Haar
//! quadrature kept as an independent cross-check.
//!
//! Dimension counts use the character formula
//! `dim V_{λ,G} = (1/|F|) Σ_{σ∈F} tr(σ* | V_λ ∩ ker P_S)`, evaluated on complex
//! Fourier modes (torus) or per degree (sphere).

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use num_integer::Integer;
use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::{
    checked_count, eigenvalue_bound, for_each_lattice_point, geodesic_distance, is_canonical,
    sphere_max_degree, unit_ball_volume, validate_point, Chart, EigenBasis, EigenLabel, Eigenspace,
    ManifoldSpec, Point, DEFAULT_ENTRY_CAP,
};

/// Exact fraction of a full turn (2π), kept in `[0, 1)` once reduced.
pub type Turns = Ratio<i64>;

/// Default cap on the number of enumerated finite group elements.
pub const DEFAULT_GROUP_CAP: usize = 10_000_000;

const TWO_PI: f64 = 2.0 * PI;
const PROJECTOR_TOLERANCE: f64 = 1e-10;
const TRACE_TOLERANCE: f64 = 1e-8;

/// The action kinds and their spec-string grammar.
///
/// | kind | grammar | meaning |
/// |------|---------|---------|
/// | trivial | `trivial` | identity only |
/// | shift | `shift:pi,0;0,pi/2` | translations generating a finite group |
/// | permutation | `perm:(0 1)(2 3);(0 1 2)` | coordinate permutations in cycle notation |
/// | reflection | `reflect:0` or `reflect:0@pi/2,1` | one element `θ_i ↦ c_i − θ_i` (`c` defaults to π) |
/// | sign flip | `signflip:0,1` | one element `θ_i ↦ −θ_i` on the listed coordinates |
/// | subtorus | `subtorus:[1,0];[1,1]` | continuous translations along integer directions |
/// | antipodal | `antipodal` | `x ↦ −x` on the sphere |
/// | axis rotation | `axisrot` | all rotations about the z-axis |
///
/// Parts joined by `+` form a composite: the group generated by all parts.
/// Angles are `0`, or `[p]pi[/q]` with optional sign.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ActionKind {
    Trivial,
    TorusShift(Vec<Vec<Turns>>),
    /// Each generator maps coordinate `source[i]` to position `i`.
    CoordinatePermutation(Vec<Vec<usize>>),
    CoordinateReflection(Vec<(usize, Turns)>),
    SignFlip(Vec<usize>),
    ContinuousSubtorus(Vec<Vec<i64>>),
    SphereAntipodal,
    SphereAxisRotation,
    Composite(Vec<ActionKind>),
}

/// `|G|` for a finite group, or a marker for a positive-dimensional one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupOrder {
    Finite(usize),
    Continuous,
}

/// Handle to a group element. Finite elements are indexed in enumeration
/// order with the identity at 0. A continuous element composes finite element
/// `finite` with the continuous part at `params` (subtorus coordinates, or the
/// rotation angle), in radians.
#[derive(Clone, Debug, PartialEq)]
pub enum ElementHandle {
    Finite(usize),
    Continuous { finite: usize, params: Vec<f64> },
}

impl ElementHandle {
    pub fn identity() -> Self {
        ElementHandle::Finite(0)
    }
}

/// An exact affine isometry of the flat torus:
/// `(τx)_i = sign_i · x_{source_i} + 2π shift_i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct TorusAffine {
    source: Vec<usize>,
    sign: Vec<i8>,
    shift: Vec<Turns>,
}

impl TorusAffine {
    fn identity(d: usize) -> Self {
        TorusAffine {
            source: (0..d).collect(),
            sign: vec![1; d],
            shift: vec![Turns::from_integer(0); d],
        }
    }

    /// `self ∘ other`.
    fn compose(&self, other: &TorusAffine) -> TorusAffine {
        let d = self.source.len();
        let mut out = TorusAffine::identity(d);
        for i in 0..d {
            let p = self.source[i];
            out.source[i] = other.source[p];
            out.sign[i] = self.sign[i] * other.sign[p];
            let moved = if self.sign[i] > 0 {
                other.shift[p]
            } else {
                -other.shift[p]
            };
            out.shift[i] = wrap_turns(moved + self.shift[i]);
        }
        out
    }

    /// Applies the linear part to a frequency vector: `k' = A^T k`.
    fn pull_frequency(&self, k: &[i64], out: &mut [i64]) {
        for (i, &ki) in k.iter().enumerate() {
            out[self.source[i]] = self.sign[i] as i64 * ki;
        }
    }

    fn is_identity_linear(&self) -> bool {
        self.sign.iter().all(|&s| s == 1) && self.source.iter().enumerate().all(|(i, &p)| i == p)
    }
}

fn wrap_turns(r: Turns) -> Turns {
    r - r.floor()
}

/// `(sin 2πr, cos 2πr)`, exact at quarter turns.
fn sincos_turns(r: Turns) -> (f64, f64) {
    let r = wrap_turns(r);
    let quarter = r * 4;
    if quarter.is_integer() {
        return match quarter.to_integer() {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        };
    }
    (TWO_PI * (*r.numer() as f64) / (*r.denom() as f64)).sin_cos()
}

/// Continuous part of the group after closing under the finite part.
#[derive(Clone, Debug, PartialEq)]
enum Continuous {
    None,
    /// `directions` is closed under the finite linear parts; `basis` is a
    /// linearly independent subset spanning the same subspace.
    Subtorus {
        directions: Vec<Vec<i64>>,
        basis: Vec<Vec<i64>>,
    },
    AxisRotation,
}

#[derive(Clone, Debug, PartialEq)]
enum FiniteElements {
    Torus(Vec<TorusAffine>),
    /// Sphere finite parts are `{I}` or `{I, -I}`; each entry is the inversion flag.
    Sphere(Vec<bool>),
}

/// A group acting isometrically on a manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupActionSpec {
    manifold: ManifoldSpec,
    chart: Chart,
    kind: ActionKind,
    finite: FiniteElements,
    continuous: Continuous,
}

/// Closed-form data of the quotient `M/G`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuotientInvariants {
    pub d_eff: usize,
    pub quotient_volume: f64,
    pub effective_sample_factor: f64,
}

/// Orthogonal projector onto the invariant part of one eigenspace.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantProjector {
    pub lambda: u64,
    /// Basis entries spanning the eigenspace, in canonical order.
    pub space: Eigenspace,
    pub matrix: DMatrix<f64>,
    pub rank: usize,
}

/// A unit-norm invariant eigenfunction: a fixed combination of basis entries
/// of one eigenspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantFunction {
    pub lambda: u64,
    /// `(basis entry index, coefficient)` pairs.
    pub terms: Vec<(usize, f64)>,
}

/// Exact invariant count and the leading counting-law term, when the quotient
/// is known in closed form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantCount {
    pub count: u64,
    pub prediction: Option<f64>,
}

impl InvariantCount {
    pub fn ratio(&self) -> Option<f64> {
        self.prediction.map(|p| self.count as f64 / p)
    }
}

impl GroupActionSpec {
    pub fn new(manifold: &ManifoldSpec, kind: ActionKind) -> Result<Self> {
        Self::with_cap(manifold, kind, DEFAULT_GROUP_CAP)
    }

    pub fn parse(manifold: &ManifoldSpec, spec: &str) -> Result<Self> {
        Self::new(manifold, spec.parse()?)
    }

    pub fn trivial(manifold: &ManifoldSpec) -> Result<Self> {
        Self::new(manifold, ActionKind::Trivial)
    }

    /// Builds the action, enumerating at most `cap` finite elements.
    pub fn with_cap(manifold: &ManifoldSpec, kind: ActionKind, cap: usize) -> Result<Self> {
        let chart = manifold.chart()?;
        let mut parts = Vec::new();
        flatten(&kind, &mut parts);
        match chart {
            Chart::Torus(d) => {
                let padded = pad_permutations(kind.clone(), d);
                parts.clear();
                flatten(&padded, &mut parts);
                let mut gens = Vec::new();
                let mut dirs: Vec<Vec<i64>> = Vec::new();
                for part in parts {
                    torus_generators(part, d, &mut gens, &mut dirs)?;
                }
                let elements = close_group(TorusAffine::identity(d), &gens, cap, |a, b| a.compose(b))?;
                let continuous = if dirs.is_empty() {
                    Continuous::None
                } else {
                    close_directions(&elements, &dirs)
                };
                Ok(GroupActionSpec {
                    manifold: manifold.clone(),
                    chart,
                    kind,
                    finite: FiniteElements::Torus(elements),
                    continuous,
                })
            }
            Chart::Sphere2 => {
                let mut inversion = false;
                let mut axis = false;
                for part in parts {
                    match part {
                        ActionKind::Trivial => {}
                        ActionKind::SphereAntipodal => inversion = true,
                        ActionKind::SphereAxisRotation => axis = true,
                        other => {
                            return Err(Error::config(format!(
                                "action `{other}` acts on tori, not on {manifold}"
                            )))
                        }
                    }
                }
                let finite = if inversion { vec![false, true] } else { vec![false] };
                if finite.len() > cap {
                    return Err(Error::ResourceLimit {
                        what: "group elements".into(),
                        requested: finite.len() as u128,
                        cap,
                    });
                }
                Ok(GroupActionSpec {
                    manifold: manifold.clone(),
                    chart,
                    kind,
                    finite: FiniteElements::Sphere(finite),
                    continuous: if axis {
                        Continuous::AxisRotation
                    } else {
                        Continuous::None
                    },
                })
            }
        }
    }

    pub fn manifold(&self) -> &ManifoldSpec {
        &self.manifold
    }

    pub fn chart(&self) -> Chart {
        self.chart
    }

    pub fn kind(&self) -> &ActionKind {
        &self.kind
    }

    /// Number of enumerated finite elements (the finite part of a continuous group).
    pub fn finite_len(&self) -> usize {
        match &self.finite {
            FiniteElements::Torus(e) => e.len(),
            FiniteElements::Sphere(e) => e.len(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.continuous == Continuous::None
    }

    pub fn is_trivial(&self) -> bool {
        self.is_finite() && self.finite_len() == 1
    }

    pub fn order(&self) -> GroupOrder {
        if self.is_finite() {
            GroupOrder::Finite(self.finite_len())
        } else {
            GroupOrder::Continuous
        }
    }

    /// Dimension of the group.
    pub fn group_dim(&self) -> usize {
        match &self.continuous {
            Continuous::None => 0,
            Continuous::Subtorus { basis, .. } => basis.len(),
            Continuous::AxisRotation => 1,
        }
    }

    /// Number of continuous parameters an element handle carries.
    pub fn continuous_params(&self) -> usize {
        self.group_dim()
    }

    /// Effective dimension `dim(M) - dim(G) + min_x dim(G_x)` of the quotient.
    ///
    /// Translations act freely, finite groups have discrete stabilizers, and
    /// rotations about the z-axis have a free orbit through every non-pole point,
    /// so the minimal isotropy dimension is zero for every built-in action.
    pub fn effective_dimension(&self) -> usize {
        self.manifold.dim() - self.group_dim()
    }

    /// Closed-form quotient data. Composites mixing a nontrivial finite part with
    /// a continuous part have no stored closed form.
    pub fn quotient_invariants(&self) -> Result<QuotientInvariants> {
        let dim = self.manifold.dim();
        let vol = self.manifold.volume();
        let (d_eff, quotient_volume) = match &self.continuous {
            Continuous::None => (dim, vol / self.finite_len() as f64),
            _ if self.finite_len() > 1 => {
                return Err(Error::UnknownQuotient(format!(
                    "action `{}` mixes finite and continuous parts",
                    self.kind
                )))
            }
            Continuous::Subtorus { basis, .. } => {
                let r = basis.len();
                let covolume = saturated_covolume(basis);
                (dim - r, TWO_PI.powi((dim - r) as i32) / covolume)
            }
            // Orbits are latitude circles; the quotient is a meridian of length π.
            Continuous::AxisRotation => (1, PI),
        };
        Ok(QuotientInvariants {
            d_eff,
            quotient_volume,
            effective_sample_factor: effective_sample_factor(dim, vol, d_eff, quotient_volume),
        })
    }

    fn check_finite_index(&self, i: usize) -> Result<()> {
        if i >= self.finite_len() {
            return Err(Error::config(format!(
                "element handle {i} out of range (group has {} finite elements)",
                self.finite_len()
            )));
        }
        Ok(())
    }

    /// Draws a Haar-random element.
    pub fn sample_element<R: Rng>(&self, rng: &mut R) -> ElementHandle {
        let finite = rng.random_range(0..self.finite_len());
        let r = self.continuous_params();
        if r == 0 {
            ElementHandle::Finite(finite)
        } else {
            ElementHandle::Continuous {
                finite,
                params: (0..r).map(|_| rng.random::<f64>() * TWO_PI).collect(),
            }
        }
    }

    /// Handles for every finite element.
    pub fn finite_handles(&self) -> impl Iterator<Item = ElementHandle> {
        (0..self.finite_len()).map(ElementHandle::Finite)
    }

    #[cfg(test)]
    fn torus_elements(&self) -> &[TorusAffine] {
        match &self.finite {
            FiniteElements::Torus(e) => e,
            FiniteElements::Sphere(_) => &[],
        }
    }

    fn subtorus_directions(&self) -> &[Vec<i64>] {
        match &self.continuous {
            Continuous::Subtorus { directions, .. } => directions,
            _ => &[],
        }
    }

    /// Whether a torus frequency survives averaging over the continuous part.
    fn frequency_selected(&self, k: &[i64]) -> bool {
        self.subtorus_directions()
            .iter()
            .all(|v| v.iter().zip(k).map(|(a, b)| a * b).sum::<i64>() == 0)
    }

    /// Resolves a handle to a concrete isometry.
    fn resolve(&self, handle: &ElementHandle) -> Result<Isometry> {
        let (finite, params): (usize, &[f64]) = match handle {
            ElementHandle::Finite(i) => (*i, &[]),
            ElementHandle::Continuous { finite, params } => (*finite, params.as_slice()),
        };
        self.check_finite_index(finite)?;
        let expected = if matches!(handle, ElementHandle::Finite(_)) {
            0
        } else {
            self.continuous_params()
        };
        if params.len() != expected || (expected == 0 && matches!(handle, ElementHandle::Continuous { .. })) {
            return Err(Error::config(format!(
                "element handle carries {} continuous parameters, action `{}` expects {}",
                params.len(),
                self.kind,
                self.continuous_params()
            )));
        }
        Ok(match &self.finite {
            FiniteElements::Torus(elements) => {
                let e = &elements[finite];
                let d = e.source.len();
                let mut translation = vec![0.0; d];
                if let Continuous::Subtorus { basis, .. } = &self.continuous {
                    for (t, v) in params.iter().zip(basis) {
                        for i in 0..d {
                            translation[i] += t * v[i] as f64;
                        }
                    }
                }
                let shift = (0..d)
                    .map(|i| {
                        let base = TWO_PI * (*e.shift[i].numer() as f64) / (*e.shift[i].denom() as f64);
                        base + e.sign[i] as f64 * translation[e.source[i]]
                    })
                    .collect();
                Isometry::Torus {
                    source: e.source.clone(),
                    sign: e.sign.clone(),
                    shift,
                }
            }
            FiniteElements::Sphere(elements) => Isometry::Sphere {
                inversion: elements[finite],
                angle: params.first().copied().unwrap_or(0.0),
            },
        })
    }

    // --- projectors ------------------------------------------------------

    /// Exact projector onto `V_{λ,G}`: the finite part is averaged element by
    /// element, the continuous part by its selection rule.
    pub fn invariant_projector(&self, lambda: u64, basis: &EigenBasis) -> Result<InvariantProjector> {
        let space = self.eigenspace_of(lambda, basis)?;
        let m = space.multiplicity();
        let mut p = DMatrix::zeros(m, m);
        let weight = 1.0 / self.finite_len() as f64;
        match &self.finite {
            FiniteElements::Torus(elements) => {
                let lookup = TorusLookup::new(basis, &space);
                for e in elements {
                    let mut pulled = vec![0i64; e.source.len()];
                    accumulate_torus_pullback(basis, &space, &lookup, weight, &mut p, |k| {
                        e.pull_frequency(k, &mut pulled);
                        let r: Turns = k
                            .iter()
                            .zip(&e.shift)
                            .map(|(&ki, s)| s * ki)
                            .fold(Turns::from_integer(0), |a, b| a + b);
                        (pulled.clone(), sincos_turns(r))
                    });
                }
            }
            FiniteElements::Sphere(elements) => {
                for &inv in elements {
                    accumulate_sphere_pullback(basis, &space, inv, 0.0, weight, &mut p);
                }
            }
        }
        let mask = self.continuous_mask(basis, &space);
        if let Some(mask) = mask {
            apply_mask(&mut p, &mask);
        }
        finish_projector(lambda, space, p)
    }

    /// Independent projector that replaces the continuous selection rule by a
    /// trapezoidal Haar quadrature with `order` nodes per continuous dimension.
    /// The order must be at least 4 times the largest frequency the continuous
    /// part sees on this eigenspace.
    pub fn invariant_projector_quadrature(
        &self,
        lambda: u64,
        basis: &EigenBasis,
        order: usize,
    ) -> Result<InvariantProjector> {
        let space = self.eigenspace_of(lambda, basis)?;
        let needed = 4 * self.max_continuous_frequency(basis, space.range.clone());
        if self.is_finite() {
            return self.invariant_projector(lambda, basis);
        }
        if order < needed.max(1) {
            return Err(Error::numerical(format!(
                "quadrature order {order} below the required {needed} for eigenvalue {lambda}"
            )));
        }
        let m = space.multiplicity();
        let mut p = DMatrix::zeros(m, m);
        let nodes = self.quadrature_nodes(order);
        let weight = 1.0 / (self.finite_len() * nodes.len()) as f64;
        for finite in 0..self.finite_len() {
            for params in &nodes {
                let iso = self.resolve(&ElementHandle::Continuous {
                    finite,
                    params: params.clone(),
                })?;
                match iso {
                    Isometry::Torus { source, sign, shift } => {
                        let lookup = TorusLookup::new(basis, &space);
                        let d = source.len();
                        accumulate_torus_pullback(basis, &space, &lookup, weight, &mut p, |k| {
                            let mut pulled = vec![0i64; d];
                            for i in 0..d {
                                pulled[source[i]] = sign[i] as i64 * k[i];
                            }
                            let phase: f64 = k.iter().zip(&shift).map(|(&ki, s)| ki as f64 * s).sum();
                            (pulled, phase.sin_cos())
                        });
                    }
                    Isometry::Sphere { inversion, angle } => {
                        accumulate_sphere_pullback(basis, &space, inversion, angle, weight, &mut p);
                    }
                }
            }
        }
        finish_projector(lambda, space, p)
    }

    /// Uniform tensor grid of continuous parameters, `order` nodes per dimension.
    pub(crate) fn quadrature_nodes(&self, order: usize) -> Vec<Vec<f64>> {
        let r = self.continuous_params();
        let mut nodes = vec![Vec::new()];
        for _ in 0..r {
            let mut next = Vec::with_capacity(nodes.len() * order);
            for prefix in &nodes {
                for j in 0..order {
                    let mut p = prefix.clone();
                    p.push(TWO_PI * j as f64 / order as f64);
                    next.push(p);
                }
            }
            nodes = next;
        }
        nodes
    }

    /// Largest `|k·v|` (subtorus) or degree (axis rotation) over the entries.
    pub(crate) fn max_continuous_frequency(&self, basis: &EigenBasis, range: std::ops::Range<usize>) -> usize {
        let mut max = 0u64;
        for e in &basis.entries()[range] {
            match (&self.continuous, &e.label) {
                (Continuous::Subtorus { basis: dirs, .. }, EigenLabel::Torus { k, .. }) => {
                    for v in dirs {
                        let dot: i64 = v.iter().zip(k).map(|(a, b)| a * b).sum();
                        max = max.max(dot.unsigned_abs());
                    }
                }
                (Continuous::AxisRotation, EigenLabel::Sphere { degree, .. }) => {
                    max = max.max(*degree as u64);
                }
                _ => {}
            }
        }
        max as usize
    }

    fn eigenspace_of(&self, lambda: u64, basis: &EigenBasis) -> Result<Eigenspace> {
        if basis.chart() != self.chart || basis.manifold().dim() != self.manifold.dim() {
            return Err(Error::config(format!(
                "basis on {} does not match action manifold {}",
                basis.manifold(),
                self.manifold
            )));
        }
        basis
            .eigenspace(lambda)
            .ok_or_else(|| Error::config(format!("{lambda} is not an eigenvalue in the basis")))
    }

    fn continuous_mask(&self, basis: &EigenBasis, space: &Eigenspace) -> Option<Vec<bool>> {
        match &self.continuous {
            Continuous::None => None,
            Continuous::Subtorus { .. } => Some(
                basis.entries()[space.range.clone()]
                    .iter()
                    .map(|e| match &e.label {
                        EigenLabel::Torus { k, .. } => self.frequency_selected(k),
                        _ => false,
                    })
                    .collect(),
            ),
            Continuous::AxisRotation => Some(
                basis.entries()[space.range.clone()]
                    .iter()
                    .map(|e| matches!(e.label, EigenLabel::Sphere { order: 0, .. }))
                    .collect(),
            ),
        }
    }

    /// Orthonormal invariant eigenfunctions of every eigenspace in `basis`,
    /// obtained by Gram-Schmidt on the projector columns in canonical order.
    pub fn invariant_functions(&self, basis: &EigenBasis) -> Result<Vec<InvariantFunction>> {
        let mut out = Vec::new();
        for space in basis.eigenspaces() {
            if self.is_trivial() {
                out.extend(space.range.clone().map(|i| InvariantFunction {
                    lambda: space.lambda,
                    terms: vec![(i, 1.0)],
                }));
                continue;
            }
            let proj = self.invariant_projector(space.lambda, basis)?;
            out.extend(orthonormal_columns(&proj)?);
        }
        Ok(out)
    }

    // --- counting ----------------------------------------------------------

    /// Invariant dimension of every eigenspace with eigenvalue `<= lambda_max`.
    /// Eigenvalues whose invariant part is trivial are omitted.
    pub fn invariant_dimensions(&self, lambda_max: f64) -> Result<BTreeMap<u64, u64>> {
        self.invariant_dimensions_capped(lambda_max, DEFAULT_ENTRY_CAP)
    }

    pub fn invariant_dimensions_capped(&self, lambda_max: f64, cap: usize) -> Result<BTreeMap<u64, u64>> {
        let mut acc: BTreeMap<u64, f64> = BTreeMap::new();
        self.visit_characters(lambda_max, cap, |lambda, c| *acc.entry(lambda).or_insert(0.0) += c)?;
        let mut out = BTreeMap::new();
        for (lambda, v) in acc {
            let dim = round_dimension(v, lambda)?;
            if dim > 0 {
                out.insert(lambda, dim);
            }
        }
        Ok(out)
    }

    pub fn count_invariant(&self, lambda: f64) -> Result<InvariantCount> {
        self.count_invariant_capped(lambda, DEFAULT_ENTRY_CAP)
    }

    pub fn count_invariant_capped(&self, lambda: f64, cap: usize) -> Result<InvariantCount> {
        let mut total = 0.0;
        self.visit_characters(lambda, cap, |_, c| total += c)?;
        let count = round_dimension(total, lambda as u64)?;
        let prediction = self.quotient_invariants().ok().map(|q| {
            unit_ball_volume(q.d_eff) / TWO_PI.powi(q.d_eff as i32)
                * q.quotient_volume
                * lambda.powf(q.d_eff as f64 / 2.0)
        });
        Ok(InvariantCount { count, prediction })
    }

    /// Calls `visit(λ, c)` with character contributions that sum, per
    /// eigenvalue, to `dim V_{λ,G}`.
    fn visit_characters<F: FnMut(u64, f64)>(&self, lambda: f64, cap: usize, mut visit: F) -> Result<()> {
        let bound = eigenvalue_bound(lambda)?;
        checked_count(self.chart, bound, cap)?;
        match &self.finite {
            FiniteElements::Torus(elements) => {
                let d = elements[0].source.len();
                let weight = 1.0 / elements.len() as f64;
                let (prepared, table) = prepare_elements(elements);
                let all_translations = elements.iter().all(TorusAffine::is_identity_linear);
                let mut k = vec![0i64; d];
                for_each_lattice_point(&mut k, 0, bound, &mut |k, lam| {
                    if !self.frequency_selected(k) {
                        return;
                    }
                    let mut sum = 0.0;
                    for e in &prepared {
                        if all_translations || e.fixes(k) {
                            sum += e.character(k, &table);
                        }
                    }
                    visit(lam, sum * weight);
                });
            }
            FiniteElements::Sphere(elements) => {
                let weight = 1.0 / elements.len() as f64;
                let axis = self.continuous == Continuous::AxisRotation;
                for l in 0..=sphere_max_degree(bound) {
                    let trace = if axis { 1.0 } else { (2 * l + 1) as f64 };
                    let sum: f64 = elements
                        .iter()
                        .map(|&inv| if inv && l % 2 == 1 { -trace } else { trace })
                        .sum();
                    visit(l * (l + 1), sum * weight);
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for GroupActionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)
    }
}

/// Multiplier on the number of samples gained by exploiting invariance:
/// `(ω_n/(2π)^n) / (ω_d/(2π)^d) · vol(M)/vol(M/G)`.
pub fn effective_sample_factor(dim: usize, volume: f64, d_eff: usize, quotient_volume: f64) -> f64 {
    let cn = unit_ball_volume(dim) / TWO_PI.powi(dim as i32);
    let cd = unit_ball_volume(d_eff) / TWO_PI.powi(d_eff as i32);
    cn / cd * volume / quotient_volume
}

/// Applies a group element to a point. Torus coordinates come back in `[0, 2π)`.
pub fn apply_action(action: &GroupActionSpec, element: &ElementHandle, x: &[f64]) -> Result<Point> {
    validate_point(action.chart, x)?;
    Ok(action.resolve(element)?.apply(x))
}

pub fn invariant_projector(action: &GroupActionSpec, lambda: u64, basis: &EigenBasis) -> Result<InvariantProjector> {
    action.invariant_projector(lambda, basis)
}

pub fn count_invariant(action: &GroupActionSpec, lambda: f64) -> Result<InvariantCount> {
    action.count_invariant(lambda)
}

pub fn quotient_invariants(action: &GroupActionSpec) -> Result<QuotientInvariants> {
    action.quotient_invariants()
}

/// Largest `|d(τx, τy) - d(x, y)|` over the finite elements and the given pairs.
pub fn isometry_defect(action: &GroupActionSpec, pairs: &[(Point, Point)]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for h in action.finite_handles() {
        let iso = action.resolve(&h)?;
        for (x, y) in pairs {
            let before = geodesic_distance(action.chart, x, y);
            let after = geodesic_distance(action.chart, &iso.apply(x), &iso.apply(y));
            worst = worst.max((before - after).abs());
        }
    }
    Ok(worst)
}

/// A resolved group element.
#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Isometry {
    Torus {
        source: Vec<usize>,
        sign: Vec<i8>,
        shift: Vec<f64>,
    },
    Sphere {
        inversion: bool,
        angle: f64,
    },
}

impl Isometry {
    pub(crate) fn apply(&self, x: &[f64]) -> Point {
        match self {
            Isometry::Torus { source, sign, shift } => (0..source.len())
                .map(|i| (sign[i] as f64 * x[source[i]] + shift[i]).rem_euclid(TWO_PI))
                .collect(),
            Isometry::Sphere { inversion, angle } => {
                let (s, c) = angle.sin_cos();
                let r = [c * x[0] - s * x[1], s * x[0] + c * x[1], x[2]];
                let sign = if *inversion { -1.0 } else { 1.0 };
                r.iter().map(|v| sign * v).collect()
            }
        }
    }
}

impl ActionKind {
    fn is_composite(&self) -> bool {
        matches!(self, ActionKind::Composite(_))
    }
}

fn flatten<'a>(kind: &'a ActionKind, out: &mut Vec<&'a ActionKind>) {
    match kind {
        ActionKind::Composite(parts) => parts.iter().for_each(|p| flatten(p, out)),
        other => out.push(other),
    }
}

fn check_coordinate(i: usize, d: usize) -> Result<()> {
    if i >= d {
        return Err(Error::config(format!("coordinate {i} out of range for torus:{d}")));
    }
    Ok(())
}

fn torus_generators(
    part: &ActionKind,
    d: usize,
    gens: &mut Vec<TorusAffine>,
    dirs: &mut Vec<Vec<i64>>,
) -> Result<()> {
    match part {
        ActionKind::Trivial => {}
        ActionKind::TorusShift(offsets) => {
            for off in offsets {
                if off.len() != d {
                    return Err(Error::config(format!(
                        "shift vector of length {} on torus:{d}",
                        off.len()
                    )));
                }
                let mut g = TorusAffine::identity(d);
                g.shift = off.iter().map(|&t| wrap_turns(t)).collect();
                gens.push(g);
            }
        }
        ActionKind::CoordinatePermutation(perms) => {
            for p in perms {
                if p.len() != d {
                    return Err(Error::config(format!("permutation of length {} on torus:{d}", p.len())));
                }
                let mut seen = vec![false; d];
                for &i in p {
                    check_coordinate(i, d)?;
                    if std::mem::replace(&mut seen[i], true) {
                        return Err(Error::config(format!("{p:?} is not a permutation")));
                    }
                }
                let mut g = TorusAffine::identity(d);
                g.source = p.clone();
                gens.push(g);
            }
        }
        ActionKind::CoordinateReflection(maps) => {
            let mut g = TorusAffine::identity(d);
            for &(i, c) in maps {
                check_coordinate(i, d)?;
                g.sign[i] = -1;
                g.shift[i] = wrap_turns(c);
            }
            gens.push(g);
        }
        ActionKind::SignFlip(coords) => {
            let mut g = TorusAffine::identity(d);
            for &i in coords {
                check_coordinate(i, d)?;
                g.sign[i] = -1;
            }
            gens.push(g);
        }
        ActionKind::ContinuousSubtorus(vs) => {
            for v in vs {
                if v.len() != d || v.iter().all(|&c| c == 0) {
                    return Err(Error::config(format!("bad subtorus direction {v:?} on torus:{d}")));
                }
                dirs.push(v.clone());
            }
        }
        ActionKind::SphereAntipodal | ActionKind::SphereAxisRotation => {
            return Err(Error::config(format!("action `{part}` acts on sphere2, not on torus:{d}")));
        }
        ActionKind::Composite(_) => unreachable!("composites are flattened"),
    }
    Ok(())
}

/// Breadth-first closure of the generators; the identity comes first.
fn close_group<T, F>(identity: T, gens: &[T], cap: usize, compose: F) -> Result<Vec<T>>
where
    T: Clone + Eq + std::hash::Hash,
    F: Fn(&T, &T) -> T,
{
    let mut seen: HashSet<T> = HashSet::new();
    let mut order = Vec::new();
    let mut queue = VecDeque::new();
    seen.insert(identity.clone());
    order.push(identity.clone());
    queue.push_back(identity);
    while let Some(g) = queue.pop_front() {
        for h in gens {
            let next = compose(h, &g);
            if seen.insert(next.clone()) {
                if order.len() >= cap {
                    return Err(Error::ResourceLimit {
                        what: "group elements".into(),
                        requested: order.len() as u128 + 1,
                        cap,
                    });
                }
                order.push(next.clone());
                queue.push_back(next);
            }
        }
    }
    Ok(order)
}

/// Closes the subtorus directions under the finite linear parts, which makes
/// the subtorus normal in the generated group.
fn close_directions(elements: &[TorusAffine], dirs: &[Vec<i64>]) -> Continuous {
    let mut directions: Vec<Vec<i64>> = Vec::new();
    for e in elements {
        for v in dirs {
            let mut w = vec![0i64; v.len()];
            for i in 0..v.len() {
                w[i] = e.sign[i] as i64 * v[e.source[i]];
            }
            if !is_canonical(&w) {
                w.iter_mut().for_each(|c| *c = -*c);
            }
            if !directions.contains(&w) {
                directions.push(w);
            }
        }
    }
    let basis = independent_subset(&directions);
    Continuous::Subtorus { directions, basis }
}

/// Greedy linearly independent subset, by exact fraction-free elimination.
fn independent_subset(vectors: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut chosen: Vec<Vec<i64>> = Vec::new();
    for v in vectors {
        let mut candidate = chosen.clone();
        candidate.push(v.clone());
        if integer_rank(&candidate) == candidate.len() {
            chosen.push(v.clone());
        }
    }
    chosen
}

fn integer_rank(rows: &[Vec<i64>]) -> usize {
    let mut m: Vec<Vec<i128>> = rows.iter().map(|r| r.iter().map(|&v| v as i128).collect()).collect();
    let cols = m.first().map_or(0, Vec::len);
    let mut rank = 0;
    for c in 0..cols {
        let Some(pivot) = (rank..m.len()).find(|&r| m[r][c] != 0) else {
            continue;
        };
        m.swap(rank, pivot);
        for r in 0..m.len() {
            if r != rank && m[r][c] != 0 {
                let (a, b) = (m[rank][c], m[r][c]);
                for j in 0..cols {
                    m[r][j] = m[r][j] * a - m[rank][j] * b;
                }
                let g = m[r].iter().fold(0i128, |g, &v| g.gcd(&v));
                if g > 1 {
                    m[r].iter_mut().for_each(|v| *v /= g);
                }
            }
        }
        rank += 1;
    }
    rank
}

fn integer_det(mut m: Vec<Vec<i128>>) -> i128 {
    // Bareiss elimination.
    let n = m.len();
    let mut sign = 1;
    let mut prev = 1i128;
    for k in 0..n {
        if m[k][k] == 0 {
            let Some(swap) = (k + 1..n).find(|&r| m[r][k] != 0) else {
                return 0;
            };
            m.swap(k, swap);
            sign = -sign;
        }
        for i in k + 1..n {
            for j in k + 1..n {
                m[i][j] = (m[i][j] * m[k][k] - m[i][k] * m[k][j]) / prev;
            }
        }
        prev = m[k][k];
    }
    sign * m[n - 1][n - 1]
}

/// Covolume of `span(basis) ∩ Z^d`: `sqrt(det(B Bᵀ))` divided by the gcd of
/// the maximal minors of `B`.
fn saturated_covolume(basis: &[Vec<i64>]) -> f64 {
    let r = basis.len();
    let d = basis[0].len();
    let gram: Vec<Vec<i128>> = (0..r)
        .map(|i| {
            (0..r)
                .map(|j| basis[i].iter().zip(&basis[j]).map(|(&a, &b)| a as i128 * b as i128).sum())
                .collect()
        })
        .collect();
    let det = integer_det(gram) as f64;
    let mut g = 0i128;
    let mut cols: Vec<usize> = (0..r).collect();
    loop {
        let minor: Vec<Vec<i128>> = basis
            .iter()
            .map(|row| cols.iter().map(|&c| row[c] as i128).collect())
            .collect();
        g = g.gcd(&integer_det(minor));
        // Next r-combination of 0..d.
        let Some(i) = (0..r).rev().find(|&i| cols[i] < d - r + i) else {
            break;
        };
        cols[i] += 1;
        for j in i + 1..r {
            cols[j] = cols[j - 1] + 1;
        }
    }
    det.sqrt() / g as f64
}

/// Per-element data for the character sum on complex Fourier modes. Shifts
/// are written over the common denominator of the whole group.
struct PreparedElement<'a> {
    element: &'a TorusAffine,
    numerators: Vec<i64>,
}

/// `cos(2π r/q)` for `r = 0..q`, with `q` the common shift denominator.
struct CosTable(Vec<f64>);

fn prepare_elements(elements: &[TorusAffine]) -> (Vec<PreparedElement<'_>>, CosTable) {
    let denom = elements
        .iter()
        .flat_map(|e| e.shift.iter())
        .fold(1i64, |acc, s| acc.lcm(s.denom()));
    let table = CosTable((0..denom).map(|r| sincos_turns(Turns::new(r, denom)).1).collect());
    let prepared = elements
        .iter()
        .map(|element| PreparedElement {
            element,
            numerators: element.shift.iter().map(|s| s.numer() * (denom / s.denom())).collect(),
        })
        .collect();
    (prepared, table)
}

impl PreparedElement<'_> {
    /// `A^T k = k`.
    fn fixes(&self, k: &[i64]) -> bool {
        let e = self.element;
        (0..k.len()).all(|i| k[e.source[i]] == e.sign[i] as i64 * k[i])
    }

    /// `Re e^{i k·b}`.
    fn character(&self, k: &[i64], table: &CosTable) -> f64 {
        let q = table.0.len() as i64;
        let r = k
            .iter()
            .zip(&self.numerators)
            .fold(0i64, |acc, (a, b)| (acc + (a * b).rem_euclid(q)) % q);
        table.0[r as usize]
    }
}

fn round_dimension(v: f64, lambda: u64) -> Result<u64> {
    let r = v.round();
    if (v - r).abs() > 1e-6 * r.max(1.0) || r < 0.0 {
        return Err(Error::numerical(format!(
            "character sum {v} at eigenvalue {lambda} is not a dimension"
        )));
    }
    Ok(r as u64)
}

/// Canonical frequency → index of its `cos` entry within an eigenspace.
struct TorusLookup {
    cos_index: HashMap<Vec<i64>, usize>,
}

impl TorusLookup {
    fn new(basis: &EigenBasis, space: &Eigenspace) -> Self {
        let mut cos_index = HashMap::new();
        for (local, e) in basis.entries()[space.range.clone()].iter().enumerate() {
            if let EigenLabel::Torus { k, parity } = &e.label {
                if *parity != crate::spectra::Parity::Sin {
                    cos_index.insert(k.clone(), local);
                }
            }
        }
        TorusLookup { cos_index }
    }
}

/// Adds `weight · M` to `p`, where column `j` of `M` holds the coefficients of
/// `φ_j ∘ τ`. `pull(k)` returns `(A^T k, (sin φ, cos φ))` with phase `φ = k·b`.
fn accumulate_torus_pullback<F>(
    basis: &EigenBasis,
    space: &Eigenspace,
    lookup: &TorusLookup,
    weight: f64,
    p: &mut DMatrix<f64>,
    mut pull: F,
) where
    F: FnMut(&[i64]) -> (Vec<i64>, (f64, f64)),
{
    use crate::spectra::Parity;
    for (j, e) in basis.entries()[space.range.clone()].iter().enumerate() {
        let EigenLabel::Torus { k, parity } = &e.label else {
            unreachable!()
        };
        if *parity == Parity::Const {
            p[(j, j)] += weight;
            continue;
        }
        let (mut kp, (s, c)) = pull(k);
        let flip = !is_canonical(&kp);
        if flip {
            kp.iter_mut().for_each(|v| *v = -*v);
        }
        let ci = lookup.cos_index[&kp];
        let si = ci + 1;
        // f∘τ = cos(k'·x + φ) or sin(k'·x + φ), rewritten on the canonical pair.
        let (a_cos, a_sin) = match (*parity, flip) {
            (Parity::Cos, false) => (c, -s),
            (Parity::Sin, false) => (s, c),
            (Parity::Cos, true) => (c, s),
            (Parity::Sin, true) => (s, -c),
            (Parity::Const, _) => unreachable!(),
        };
        p[(ci, j)] += weight * a_cos;
        p[(si, j)] += weight * a_sin;
    }
}

/// Sphere counterpart of [`accumulate_torus_pullback`] for `x ↦ ±R_z(angle) x`.
fn accumulate_sphere_pullback(
    basis: &EigenBasis,
    space: &Eigenspace,
    inversion: bool,
    angle: f64,
    weight: f64,
    p: &mut DMatrix<f64>,
) {
    let EigenLabel::Sphere { degree, .. } = basis.entries()[space.range.start].label else {
        unreachable!()
    };
    let l = degree as i32;
    let parity = if inversion && l % 2 == 1 { -1.0 } else { 1.0 };
    let slot = |m: i32| (m + l) as usize;
    for m in -l..=l {
        let j = slot(m);
        if m == 0 {
            p[(j, j)] += weight * parity;
            continue;
        }
        let mu = m.abs();
        let (s, c) = (mu as f64 * angle).sin_cos();
        if m > 0 {
            p[(slot(mu), j)] += weight * parity * c;
            p[(slot(-mu), j)] -= weight * parity * s;
        } else {
            p[(slot(mu), j)] += weight * parity * s;
            p[(slot(-mu), j)] += weight * parity * c;
        }
    }
}

fn apply_mask(p: &mut DMatrix<f64>, mask: &[bool]) {
    let m = mask.len();
    for i in 0..m {
        for j in 0..m {
            if !mask[i] || !mask[j] {
                p[(i, j)] = 0.0;
            }
        }
    }
}

fn finish_projector(lambda: u64, space: Eigenspace, p: DMatrix<f64>) -> Result<InvariantProjector> {
    let asym = (&p - p.transpose()).abs().max();
    let idem = (&p * &p - &p).abs().max();
    if asym > PROJECTOR_TOLERANCE || idem > PROJECTOR_TOLERANCE {
        return Err(Error::numerical(format!(
            "averaged operator at eigenvalue {lambda} is not an orthogonal projector (asymmetry {asym:e}, idempotency defect {idem:e})"
        )));
    }
    let trace = p.trace();
    let rank = trace.round();
    if (trace - rank).abs() > TRACE_TOLERANCE {
        return Err(Error::numerical(format!("projector trace {trace} is not an integer")));
    }
    Ok(InvariantProjector {
        lambda,
        space,
        matrix: p,
        rank: rank as usize,
    })
}

/// Modified Gram-Schmidt (with one reorthogonalization pass) over the columns
/// of the projector, in canonical order.
fn orthonormal_columns(proj: &InvariantProjector) -> Result<Vec<InvariantFunction>> {
    let m = proj.matrix.nrows();
    let mut accepted: Vec<DVector<f64>> = Vec::with_capacity(proj.rank);
    for j in 0..m {
        if accepted.len() == proj.rank {
            break;
        }
        let mut v = proj.matrix.column(j).into_owned();
        for _ in 0..2 {
            for q in &accepted {
                let dot = q.dot(&v);
                v.axpy(-dot, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-7 {
            accepted.push(v / norm);
        }
    }
    if accepted.len() != proj.rank {
        return Err(Error::numerical(format!(
            "found {} invariant directions at eigenvalue {}, projector rank is {}",
            accepted.len(),
            proj.lambda,
            proj.rank
        )));
    }
    Ok(accepted
        .into_iter()
        .map(|q| InvariantFunction {
            lambda: proj.lambda,
            terms: q
                .iter()
                .enumerate()
                .filter(|(_, c)| c.abs() > 1e-14)
                .map(|(i, &c)| (proj.space.range.start + i, c))
                .collect(),
        })
        .collect())
}

// --- spec-string grammar ------------------------------------------------

/// Parses an angle `0`, `pi`, `-pi/2`, `3pi/4`, ... into turns.
pub fn parse_angle(s: &str) -> Result<Turns> {
    let s = s.trim();
    let bad = || Error::config(format!("bad angle `{s}` (expected 0 or [p]pi[/q])"));
    if s == "0" {
        return Ok(Turns::from_integer(0));
    }
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s),
    };
    let at = body.find("pi").ok_or_else(bad)?;
    let coeff: i64 = match &body[..at] {
        "" => 1,
        c => c.parse().map_err(|_| bad())?,
    };
    let denom: i64 = match &body[at + 2..] {
        "" => 1,
        rest => rest
            .strip_prefix('/')
            .and_then(|q| q.parse().ok())
            .filter(|&q: &i64| q > 0)
            .ok_or_else(bad)?,
    };
    let turns = Turns::new(if neg { -coeff } else { coeff }, 2 * denom);
    Ok(wrap_turns(turns))
}

/// Formats turns as a canonical angle string.
pub fn format_angle(t: Turns) -> String {
    let angle = wrap_turns(t) * 2; // multiples of π
    let (p, q) = (*angle.numer(), *angle.denom());
    match (p, q) {
        (0, _) => "0".into(),
        (1, 1) => "pi".into(),
        (p, 1) => format!("{p}pi"),
        (1, q) => format!("pi/{q}"),
        (p, q) => format!("{p}pi/{q}"),
    }
}

fn parse_int_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::config(format!("bad {what} `{t}` in `{s}`")))
        })
        .collect()
}

fn parse_cycles(s: &str, d_hint: Option<usize>) -> Result<Vec<Vec<usize>>> {
    let s = s.trim();
    let mut cycles = Vec::new();
    let mut rest = s;
    while !rest.is_empty() {
        let body = rest
            .strip_prefix('(')
            .ok_or_else(|| Error::config(format!("bad cycle notation `{s}`")))?;
        let close = body
            .find(')')
            .ok_or_else(|| Error::config(format!("unclosed cycle in `{s}`")))?;
        let cycle: Vec<usize> = body[..close]
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::config(format!("bad coordinate `{t}` in `{s}`"))))
            .collect::<Result<_>>()?;
        cycles.push(cycle);
        rest = body[close + 1..].trim_start();
    }
    let _ = d_hint;
    Ok(cycles)
}

/// Cycles → `source` array on `d` coordinates. `(a b c)` moves the value at
/// coordinate `a` to `b`, `b` to `c`, `c` to `a`.
fn cycles_to_source(cycles: &[Vec<usize>], d: usize) -> Vec<usize> {
    let mut source: Vec<usize> = (0..d).collect();
    for cycle in cycles {
        for (j, &a) in cycle.iter().enumerate() {
            let b = cycle[(j + 1) % cycle.len()];
            source[b] = a;
        }
    }
    source
}

fn source_to_cycles(source: &[usize]) -> String {
    // position i receives coordinate source[i]: a -> i where source[i] = a
    let d = source.len();
    let mut target = vec![0; d];
    for (i, &a) in source.iter().enumerate() {
        target[a] = i;
    }
    let mut seen = vec![false; d];
    let mut out = String::new();
    for start in 0..d {
        if seen[start] || target[start] == start {
            seen[start] = true;
            continue;
        }
        let mut cycle = vec![start];
        seen[start] = true;
        let mut cur = target[start];
        while cur != start {
            seen[cur] = true;
            cycle.push(cur);
            cur = target[cur];
        }
        out.push('(');
        out.push_str(&cycle.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" "));
        out.push(')');
    }
    if out.is_empty() {
        out.push_str("()");
    }
    out
}

impl FromStr for ActionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.contains('+') {
            let parts = s.split('+').map(str::parse).collect::<Result<Vec<ActionKind>>>()?;
            return Ok(ActionKind::Composite(parts));
        }
        let (head, body) = match s.split_once(':') {
            Some((h, b)) => (h, Some(b)),
            None => (s, None),
        };
        let need = || body.ok_or_else(|| Error::config(format!("action `{head}` needs an argument")));
        match head {
            "trivial" => Ok(ActionKind::Trivial),
            "antipodal" => Ok(ActionKind::SphereAntipodal),
            "axisrot" => Ok(ActionKind::SphereAxisRotation),
            "shift" => {
                let gens = need()?
                    .split(';')
                    .map(|v| v.split(',').map(parse_angle).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                Ok(ActionKind::TorusShift(gens))
            }
            "perm" => {
                // Dimension is unknown until the manifold is bound; store the
                // cycle form sized to the largest coordinate mentioned.
                let gens = need()?
                    .split(';')
                    .map(|g| parse_cycles(g, None))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ActionKind::CoordinatePermutation(
                    gens.iter()
                        .map(|cycles| {
                            let d = cycles.iter().flatten().max().map_or(0, |m| m + 1);
                            cycles_to_source(cycles, d)
                        })
                        .collect(),
                ))
            }
            "reflect" => {
                let maps = need()?
                    .split(',')
                    .map(|item| {
                        let (coord, c) = match item.split_once('@') {
                            Some((i, c)) => (i, parse_angle(c)?),
                            None => (item, Turns::new(1, 2)),
                        };
                        let coord = coord
                            .trim()
                            .parse()
                            .map_err(|_| Error::config(format!("bad coordinate `{coord}`")))?;
                        Ok((coord, c))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ActionKind::CoordinateReflection(maps))
            }
            "signflip" => Ok(ActionKind::SignFlip(parse_int_list(need()?, "coordinate")?)),
            "subtorus" => {
                let dirs = need()?
                    .split(';')
                    .map(|v| {
                        let v = v.trim();
                        let inner = v
                            .strip_prefix('[')
                            .and_then(|r| r.strip_suffix(']'))
                            .ok_or_else(|| Error::config(format!("subtorus direction `{v}` must be bracketed")))?;
                        parse_int_list(inner, "direction component")
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ActionKind::ContinuousSubtorus(dirs))
            }
            _ => Err(Error::config(format!("unknown action `{s}`"))),
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |items: Vec<String>, sep: &str| items.join(sep);
        match self {
            ActionKind::Trivial => write!(f, "trivial"),
            ActionKind::SphereAntipodal => write!(f, "antipodal"),
            ActionKind::SphereAxisRotation => write!(f, "axisrot"),
            ActionKind::TorusShift(gens) => write!(
                f,
                "shift:{}",
                join(
                    gens.iter()
                        .map(|v| join(v.iter().map(|&t| format_angle(t)).collect(), ","))
                        .collect(),
                    ";"
                )
            ),
            ActionKind::CoordinatePermutation(gens) => write!(
                f,
                "perm:{}",
                join(gens.iter().map(|g| source_to_cycles(g)).collect(), ";")
            ),
            ActionKind::CoordinateReflection(maps) => write!(
                f,
                "reflect:{}",
                join(
                    maps.iter()
                        .map(|&(i, c)| {
                            if c == Turns::new(1, 2) {
                                i.to_string()
                            } else {
                                format!("{i}@{}", format_angle(c))
                            }
                        })
                        .collect(),
                    ","
                )
            ),
            ActionKind::SignFlip(coords) => write!(
                f,
                "signflip:{}",
                join(coords.iter().map(|c| c.to_string()).collect(), ",")
            ),
            ActionKind::ContinuousSubtorus(dirs) => write!(
                f,
                "subtorus:{}",
                join(
                    dirs.iter()
                        .map(|v| format!("[{}]", join(v.iter().map(|c| c.to_string()).collect(), ",")))
                        .collect(),
                    ";"
                )
            ),
            ActionKind::Composite(parts) => {
                debug_assert!(parts.iter().all(|p| !p.is_composite()));
                write!(f, "{}", join(parts.iter().map(|p| p.to_string()).collect(), "+"))
            }
        }
    }
}

/// Pads permutation generators parsed without a manifold to dimension `d`.
pub(crate) fn pad_permutations(kind: ActionKind, d: usize) -> ActionKind {
    match kind {
        ActionKind::CoordinatePermutation(gens) => ActionKind::CoordinatePermutation(
            gens.into_iter()
                .map(|mut g| {
                    let start = g.len();
                    g.extend(start..d);
                    g
                })
                .collect(),
        ),
        ActionKind::Composite(parts) => {
            ActionKind::Composite(parts.into_iter().map(|p| pad_permutations(p, d)).collect())
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::{enumerate_eigenbasis, Parity};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn action(manifold: &str, spec: &str) -> GroupActionSpec {
        let m: ManifoldSpec = manifold.parse().unwrap();
        GroupActionSpec::parse(&m, spec).unwrap()
    }

    #[test]
    fn angle_grammar() {
        assert_eq!(parse_angle("pi").unwrap(), Turns::new(1, 2));
        assert_eq!(parse_angle("pi/4").unwrap(), Turns::new(1, 8));
        assert_eq!(parse_angle("-pi/2").unwrap(), Turns::new(3, 4));
        assert_eq!(parse_angle("2pi").unwrap(), Turns::from_integer(0));
        assert_eq!(parse_angle("3pi/4").unwrap(), Turns::new(3, 8));
        assert!(parse_angle("1.5").is_err());
        assert!(parse_angle("pi/0").is_err());
        for t in [Turns::new(1, 8), Turns::new(1, 2), Turns::new(3, 8), Turns::new(0, 1)] {
            assert_eq!(parse_angle(&format_angle(t)).unwrap(), t);
        }
    }

    #[test]
    fn spec_strings_round_trip() {
        for s in [
            "trivial",
            "shift:pi,0",
            "shift:pi/4",
            "perm:(0 1)",
            "perm:(0 1 2);(0 1)",
            "reflect:0",
            "reflect:0@pi/2,1",
            "signflip:0,1",
            "subtorus:[1,0]",
            "subtorus:[1,1];[0,1]",
            "antipodal",
            "axisrot",
            "perm:(0 1)+shift:pi,0",
            "antipodal+axisrot",
        ] {
            let k: ActionKind = s.parse().unwrap();
            assert_eq!(k.to_string(), s);
        }
        assert!("bogus".parse::<ActionKind>().is_err());
        assert!("subtorus:1,0".parse::<ActionKind>().is_err());
        assert!("perm:(0 1".parse::<ActionKind>().is_err());
    }

    #[test]
    fn apply_examples() {
        let refl = action("circle", "reflect:0");
        let y = apply_action(&refl, &ElementHandle::Finite(1), &[0.3]).unwrap();
        assert!((y[0] - (PI - 0.3)).abs() < 1e-12);

        let shift = action("torus:2", "shift:pi,0");
        let y = apply_action(&shift, &ElementHandle::Finite(1), &[0.5, 1.0]).unwrap();
        assert!((y[0] - (0.5 + PI)).abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-15);

        for a in [&refl, &shift] {
            let x = vec![0.25; a.manifold().dim()];
            assert_eq!(apply_action(a, &ElementHandle::identity(), &x).unwrap(), x);
        }
        assert!(apply_action(&refl, &ElementHandle::Finite(2), &[0.3]).is_err());
        assert!(apply_action(
            &refl,
            &ElementHandle::Continuous {
                finite: 0,
                params: vec![1.0]
            },
            &[0.3]
        )
        .is_err());
    }

    #[test]
    fn group_closure() {
        let z8 = action("circle", "shift:pi/4");
        assert_eq!(z8.order(), GroupOrder::Finite(8));
        let s3 = action("torus:3", "perm:(0 1 2);(0 1)");
        assert_eq!(s3.order(), GroupOrder::Finite(6));
        let dihedral = action("circle", "shift:pi/2+reflect:0");
        assert_eq!(dihedral.order(), GroupOrder::Finite(8));
        // closure: every product is an enumerated element
        let elems = dihedral.torus_elements();
        for a in elems {
            for b in elems {
                assert!(elems.contains(&a.compose(b)));
            }
        }
        assert_eq!(elems[0], TorusAffine::identity(1));
        let err = GroupActionSpec::with_cap(&ManifoldSpec::circle(), "shift:pi/64".parse().unwrap(), 10).unwrap_err();
        assert!(matches!(err, Error::ResourceLimit { .. }));
    }

    #[test]
    fn incompatible_actions_are_rejected() {
        let t = ManifoldSpec::torus(2);
        assert!(GroupActionSpec::parse(&t, "antipodal").is_err());
        assert!(GroupActionSpec::parse(&t, "reflect:2").is_err());
        assert!(GroupActionSpec::parse(&t, "shift:pi").is_err());
        assert!(GroupActionSpec::parse(&t, "subtorus:[0,0]").is_err());
        assert!(GroupActionSpec::parse(&ManifoldSpec::sphere2(), "shift:pi").is_err());
    }

    #[test]
    fn isometries_preserve_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (m, spec) in [
            ("circle", "reflect:0"),
            ("torus:2", "perm:(0 1)+shift:pi/3,0"),
            ("torus:3", "signflip:0,2+perm:(0 1 2)"),
            ("sphere2", "antipodal"),
        ] {
            let a = action(m, spec);
            let pts = crate::spectra::sample_chart(a.chart(), &mut rng, 2000);
            let pairs: Vec<_> = pts.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect();
            assert!(isometry_defect(&a, &pairs).unwrap() <= 1e-9, "{spec}");
        }
    }

    #[test]
    fn reflection_projector_keeps_expected_functions() {
        let a = action("circle", "reflect:0");
        let basis = enumerate_eigenbasis(a.manifold(), 9.0).unwrap();
        let p4 = a.invariant_projector(4, &basis).unwrap();
        assert_eq!(p4.rank, 1);
        let f = orthonormal_columns(&p4).unwrap();
        let e = &basis.entries()[f[0].terms[0].0];
        assert_eq!(e.label, EigenLabel::Torus { k: vec![2], parity: Parity::Cos });
        let p1 = a.invariant_projector(1, &basis).unwrap();
        let f = orthonormal_columns(&p1).unwrap();
        assert_eq!(
            basis.entries()[f[0].terms[0].0].label,
            EigenLabel::Torus { k: vec![1], parity: Parity::Sin }
        );
        assert!(a.invariant_projector(5, &basis).is_err());
    }

    #[test]
    fn half_shift_kills_odd_first_frequency() {
        let a = action("torus:2", "shift:pi,0");
        let basis = enumerate_eigenbasis(a.manifold(), 2.0).unwrap();
        assert_eq!(a.invariant_projector(2, &basis).unwrap().rank, 0);
        assert_eq!(a.invariant_projector(1, &basis).unwrap().rank, 2);
    }

    #[test]
    fn trivial_projector_is_identity() {
        let a = action("torus:2", "trivial");
        let basis = enumerate_eigenbasis(a.manifold(), 25.0).unwrap();
        for space in basis.eigenspaces() {
            let p = a.invariant_projector(space.lambda, &basis).unwrap();
            assert_eq!(p.rank, space.multiplicity());
            assert_eq!(p.matrix, DMatrix::identity(space.multiplicity(), space.multiplicity()));
        }
    }

    #[test]
    fn counts_match_worked_examples() {
        let c = action("circle", "reflect:0").count_invariant(4.0).unwrap();
        assert_eq!(c.count, 3);
        assert!((c.prediction.unwrap() - 2.0).abs() < 1e-12);

        let c = action("torus:2", "subtorus:[1,0]").count_invariant(4.0).unwrap();
        assert_eq!(c.count, 5);
        assert!((c.prediction.unwrap() - 4.0).abs() < 1e-12);

        let c = action("sphere2", "antipodal").count_invariant(6.0).unwrap();
        assert_eq!(c.count, 6);
        assert!((c.prediction.unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn quotient_examples() {
        let q = action("torus:2", "trivial").quotient_invariants().unwrap();
        assert_eq!(q.d_eff, 2);
        assert!((q.quotient_volume - 4.0 * PI * PI).abs() < 1e-12);
        assert!((q.effective_sample_factor - 1.0).abs() < 1e-12);

        let q = action("circle", "reflect:0").quotient_invariants().unwrap();
        assert_eq!(q.d_eff, 1);
        assert!((q.quotient_volume - PI).abs() < 1e-12);
        assert!((q.effective_sample_factor - 2.0).abs() < 1e-12);

        let q = action("sphere2", "axisrot").quotient_invariants().unwrap();
        assert_eq!(q.d_eff, 1);
        assert!((q.quotient_volume - PI).abs() < 1e-12);

        let q = action("torus:2", "subtorus:[1,1]").quotient_invariants().unwrap();
        assert_eq!(q.d_eff, 1);
        assert!((q.quotient_volume - TWO_PI / 2f64.sqrt()).abs() < 1e-12);

        let q = action("torus:3", "subtorus:[2,0,0];[0,1,1]").quotient_invariants().unwrap();
        assert_eq!(q.d_eff, 1);
        assert!((q.quotient_volume - TWO_PI / 2f64.sqrt()).abs() < 1e-12);

        assert!(matches!(
            action("sphere2", "antipodal+axisrot").quotient_invariants(),
            Err(Error::UnknownQuotient(_))
        ));
        let mixed = action("torus:2", "perm:(0 1)+subtorus:[1,1]");
        assert!(mixed.quotient_invariants().is_err());
        assert_eq!(mixed.effective_dimension(), 1);
        assert!(mixed.count_invariant(50.0).unwrap().prediction.is_none());
    }

    #[test]
    fn subtorus_closes_under_finite_part() {
        let a = action("torus:2", "perm:(0 1)+subtorus:[1,0]");
        assert_eq!(a.group_dim(), 2);
        assert_eq!(a.count_invariant(100.0).unwrap().count, 1);
    }

    #[test]
    fn covolume_of_saturation() {
        assert!((saturated_covolume(&[vec![2, 0]]) - 1.0).abs() < 1e-15);
        assert!((saturated_covolume(&[vec![1, 1]]) - 2f64.sqrt()).abs() < 1e-15);
        assert!((saturated_covolume(&[vec![1, 0, 0], vec![0, 1, 0]]) - 1.0).abs() < 1e-15);
        assert!((saturated_covolume(&[vec![2, 2, 0], vec![0, 0, 3]]) - 2f64.sqrt()).abs() < 1e-15);
    }
}
