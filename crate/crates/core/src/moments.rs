//! Moment-function families `{v_γ}` evaluated at atoms.
//!
//! Members are stored with the sign flipped relative to the restriction they
//! encode: a restriction `∫ f_γ dP ≤ 0` is carried as `v_γ = -f_γ`, so every
//! constraint reads `∫ v_γ p dQ ≥ 0`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::measure::{integrate, DiscreteMeasure};

/// Right-continuous step CDF given by `(location, cumulative value)` knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCdf {
    knots: Vec<(f64, f64)>,
}

impl StepCdf {
    /// Locations must be strictly increasing and values nondecreasing in `[0, 1]`.
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.is_empty() {
            return Err(invalid("step CDF needs at least one knot"));
        }
        let mut prev: Option<(f64, f64)> = None;
        for (i, &(x, c)) in knots.iter().enumerate() {
            if !x.is_finite() || !c.is_finite() || !(0.0..=1.0 + 1e-12).contains(&c) {
                return Err(invalid(format!("knot {i} = ({x}, {c}) is not a valid CDF point")));
            }
            if let Some((px, pc)) = prev {
                if x <= px {
                    return Err(invalid(format!("knot locations must increase (knot {i})")));
                }
                if c < pc {
                    return Err(invalid(format!("cumulative values must not decrease (knot {i})")));
                }
            }
            prev = Some((x, c));
        }
        Ok(Self { knots })
    }

    /// Empirical CDF of coordinate `coord` under `q`.
    pub fn empirical(q: &DiscreteMeasure, coord: usize) -> Self {
        let mut pts: Vec<(f64, f64)> = q
            .atoms()
            .iter()
            .zip(q.weights())
            .map(|(a, &w)| (a[coord], w))
            .collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut knots: Vec<(f64, f64)> = Vec::new();
        let mut acc = crate::numeric::Compensated::new();
        for (x, w) in pts {
            acc.add(w);
            match knots.last_mut() {
                Some(last) if last.0 == x => last.1 = acc.value().min(1.0),
                _ => knots.push((x, acc.value().min(1.0))),
            }
        }
        Self { knots }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.knots.partition_point(|&(loc, _)| loc <= x);
        if k == 0 {
            0.0
        } else {
            self.knots[k - 1].1
        }
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }
}

/// Reference CDF `G` of the marginal-order family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cdf {
    /// `G(x) = x` on `[0, 1]`.
    Uniform,
    Step(StepCdf),
}

impl Cdf {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Cdf::Uniform => x.clamp(0.0, 1.0),
            Cdf::Step(s) => s.eval(x),
        }
    }

    /// Points where `G` jumps.
    pub fn knot_locations(&self) -> Vec<f64> {
        match self {
            Cdf::Uniform => Vec::new(),
            Cdf::Step(s) => s.knots().iter().map(|k| k.0).collect(),
        }
    }
}

/// Dyadic-style cube `Π_u ((a_u - 1)/(2r), a_u/(2r)]` in `[0, 1]^{d_Z}`.
///
/// The first cube along each axis also holds `z_u = 0`, so the cubes at a
/// fixed `r` partition the closed unit cube.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CubeIndex {
    pub a: Vec<u32>,
    pub r: u32,
}

/// Position of `z ∈ [0, 1]` among the `2r` intervals of width `1/(2r)`.
pub(crate) fn cube_coord(z: f64, r: u32) -> u32 {
    let m = 2 * r as u64;
    let mf = m as f64;
    let mut c = (z * mf).ceil().clamp(1.0, mf) as u64;
    // Boundaries are compared as the rounded quotients so membership agrees
    // with `(a-1)/(2r) < z <= a/(2r)` evaluated in floating point.
    while c > 1 && z <= (c - 1) as f64 / mf {
        c -= 1;
    }
    while c < m && z > c as f64 / mf {
        c += 1;
    }
    c as u32
}

impl CubeIndex {
    pub fn new(a: Vec<u32>, r: u32) -> Result<Self> {
        if r == 0 {
            return Err(invalid("cube resolution r must be at least 1"));
        }
        if a.is_empty() || a.iter().any(|&au| au == 0 || au > 2 * r) {
            return Err(Error::OutOfDomain(format!("cube coordinates {a:?} not in 1..={}", 2 * r)));
        }
        Ok(Self { a, r })
    }

    /// The cube at resolution `r` holding `z`.
    pub fn containing(z: &[f64], r: u32) -> Self {
        Self { a: z.iter().map(|&zu| cube_coord(zu, r)).collect(), r }
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        self.a.len() == z.len() && self.a.iter().zip(z).all(|(&au, &zu)| cube_coord(zu, self.r) == au)
    }

    /// All `(2r)^{d_Z}` cubes at resolution `r`, lexicographic in `a`.
    pub fn all(d_z: usize, r: u32) -> Vec<Self> {
        let side = 2 * r;
        let count = (side as usize).pow(d_z as u32);
        let mut out = Vec::with_capacity(count);
        let mut a = vec![1u32; d_z];
        for _ in 0..count {
            out.push(Self { a: a.clone(), r });
            for u in (0..d_z).rev() {
                if a[u] < side {
                    a[u] += 1;
                    break;
                }
                a[u] = 1;
            }
        }
        out
    }
}

/// Augmentation `K - |f_γ|^{1+δ}` added alongside every member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailConfig {
    pub k: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Gamma {
    Threshold { value: f64 },
    Instrumented { threshold: f64, cube: CubeIndex },
    Member { index: usize },
}

/// One element of the index set, optionally selecting the tail member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentIndex {
    pub gamma: Gamma,
    #[serde(default)]
    pub tail: bool,
}

impl MomentIndex {
    pub fn threshold(value: f64) -> Self {
        Self { gamma: Gamma::Threshold { value }, tail: false }
    }

    pub fn instrumented(threshold: f64, cube: CubeIndex) -> Self {
        Self { gamma: Gamma::Instrumented { threshold, cube }, tail: false }
    }

    pub fn member(index: usize) -> Self {
        Self { gamma: Gamma::Member { index }, tail: false }
    }

    pub fn with_tail(mut self) -> Self {
        self.tail = true;
        self
    }

    /// Scalar threshold part of the index, if any.
    pub fn threshold_value(&self) -> Option<f64> {
        match self.gamma {
            Gamma::Threshold { value } => Some(value),
            Gamma::Instrumented { threshold, .. } => Some(threshold),
            Gamma::Member { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FamilyKind {
    /// `v_γ(x1, x2) = 1[x1 ≤ γ] - 1[x2 ≤ γ]`, `γ ∈ [lower, upper]`.
    UnconditionalFsd { lower: f64, upper: f64 },
    /// `v_γ(x1, x2, z) = (1[x1 ≤ γ1] - 1[x2 ≤ γ1]) 1[z ∈ C]` over cubes `C`
    /// at resolutions `1..=r_max` (verification grid).
    ConditionalFsd { lower: f64, upper: f64, d_z: usize, r_max: u32 },
    /// `v_γ(ω) = G(γ) - 1[ω ≤ γ]`, `γ ∈ [0, upper]`.
    MarginalGivenG { upper: f64, cdf: Cdf },
    /// Finite list of member vectors on a fixed support.
    Custom { support: Vec<Vec<f64>>, members: Vec<Vec<f64>> },
}

#[derive(Debug, Clone)]
pub struct MomentFamily {
    kind: FamilyKind,
    tail: Option<TailConfig>,
    lookup: HashMap<Vec<u64>, usize>,
}

fn atom_key(atom: &[f64]) -> Vec<u64> {
    atom.iter()
        .map(|&x| if x == 0.0 { 0u64 } else { x.to_bits() })
        .collect()
}

#[inline]
fn ind(x: f64, g: f64) -> f64 {
    if x <= g {
        1.0
    } else {
        0.0
    }
}

impl MomentFamily {
    pub fn unconditional_fsd(lower: f64, upper: f64) -> Result<Self> {
        check_interval(lower, upper)?;
        Ok(Self::from_kind(FamilyKind::UnconditionalFsd { lower, upper }))
    }

    pub fn conditional_fsd(lower: f64, upper: f64, d_z: usize, r_max: u32) -> Result<Self> {
        check_interval(lower, upper)?;
        if d_z == 0 || r_max == 0 {
            return Err(invalid("conditional family needs d_z >= 1 and r_max >= 1"));
        }
        Ok(Self::from_kind(FamilyKind::ConditionalFsd { lower, upper, d_z, r_max }))
    }

    pub fn marginal_given_g(upper: f64, cdf: Cdf) -> Result<Self> {
        if !(upper > 0.0 && upper <= 1.0) {
            return Err(invalid(format!("upper threshold must lie in (0, 1], got {upper}")));
        }
        Ok(Self::from_kind(FamilyKind::MarginalGivenG { upper, cdf }))
    }

    /// Custom family from restriction functions `f_k` (constraint `∫ f_k dP ≤ 0`)
    /// tabulated on `support`. Members are stored as `-f_k`.
    pub fn custom(support: Vec<Vec<f64>>, f_members: Vec<Vec<f64>>) -> Result<Self> {
        if support.is_empty() || f_members.is_empty() {
            return Err(invalid("custom family needs a support and at least one member"));
        }
        let dim = support[0].len();
        for (k, f) in f_members.iter().enumerate() {
            if f.len() != support.len() {
                return Err(Error::LengthMismatch { expected: support.len(), got: f.len() });
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(invalid(format!("custom member {k} has a non-finite value")));
            }
        }
        if support.iter().any(|s| s.len() != dim) {
            return Err(invalid("custom support points must share one dimension"));
        }
        let members = f_members
            .into_iter()
            .map(|f| f.into_iter().map(|x| -x).collect())
            .collect();
        Ok(Self::from_kind(FamilyKind::Custom { support, members }))
    }

    fn from_kind(kind: FamilyKind) -> Self {
        let lookup = match &kind {
            FamilyKind::Custom { support, .. } => {
                support.iter().enumerate().map(|(j, s)| (atom_key(s), j)).collect()
            }
            _ => HashMap::new(),
        };
        Self { kind, tail: None, lookup }
    }

    pub fn with_tail(mut self, tail: TailConfig) -> Result<Self> {
        if !(tail.k > 0.0 && tail.delta > 0.0 && tail.k.is_finite() && tail.delta.is_finite()) {
            return Err(invalid("tail parameters K and δ must be positive"));
        }
        self.tail = Some(tail);
        Ok(self)
    }

    pub fn kind(&self) -> &FamilyKind {
        &self.kind
    }

    pub fn tail(&self) -> Option<TailConfig> {
        self.tail
    }

    /// Number of coordinates each atom must carry.
    pub fn dimension(&self) -> usize {
        match &self.kind {
            FamilyKind::UnconditionalFsd { .. } => 2,
            FamilyKind::ConditionalFsd { d_z, .. } => 2 + d_z,
            FamilyKind::MarginalGivenG { .. } => 1,
            FamilyKind::Custom { support, .. } => support[0].len(),
        }
    }

    /// Whether `|v_γ| ≤ 2` holds for every member by construction.
    pub fn is_bounded_by_two(&self) -> bool {
        self.tail.is_none() && !matches!(self.kind, FamilyKind::Custom { .. })
    }

    pub fn check_measure(&self, q: &DiscreteMeasure) -> Result<()> {
        if q.dim() != self.dimension() {
            return Err(Error::DimensionMismatch { expected: self.dimension(), got: q.dim() });
        }
        if let FamilyKind::ConditionalFsd { d_z, .. } = self.kind {
            for (j, atom) in q.atoms().iter().enumerate() {
                if atom[2..2 + d_z].iter().any(|z| !(0.0..=1.0).contains(z)) {
                    return Err(Error::OutOfDomain(format!(
                        "instrument coordinates of atom {j} fall outside [0,1]; rescale Z first"
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_index(&self, idx: &MomentIndex) -> Result<()> {
        if idx.tail && self.tail.is_none() {
            return Err(Error::OutOfDomain("tail member requested but family has no tail".into()));
        }
        let in_range = |g: f64, lo: f64, hi: f64| {
            if (lo..=hi).contains(&g) {
                Ok(())
            } else {
                Err(Error::OutOfDomain(format!("threshold {g} outside [{lo}, {hi}]")))
            }
        };
        match (&self.kind, &idx.gamma) {
            (FamilyKind::UnconditionalFsd { lower, upper }, Gamma::Threshold { value }) => {
                in_range(*value, *lower, *upper)
            }
            (
                FamilyKind::ConditionalFsd { lower, upper, d_z, .. },
                Gamma::Instrumented { threshold, cube },
            ) => {
                in_range(*threshold, *lower, *upper)?;
                CubeIndex::new(cube.a.clone(), cube.r)?;
                if cube.a.len() != *d_z {
                    return Err(Error::DimensionMismatch { expected: *d_z, got: cube.a.len() });
                }
                Ok(())
            }
            (FamilyKind::MarginalGivenG { upper, .. }, Gamma::Threshold { value }) => {
                in_range(*value, 0.0, *upper)
            }
            (FamilyKind::Custom { members, .. }, Gamma::Member { index }) => {
                if *index < members.len() {
                    Ok(())
                } else {
                    Err(Error::OutOfDomain(format!("member {index} of {}", members.len())))
                }
            }
            _ => Err(Error::OutOfDomain(format!("index {:?} does not fit this family", idx.gamma))),
        }
    }

    /// Base member value, before the tail transform; `idx` must be valid.
    fn base_value(&self, gamma: &Gamma, omega: &[f64]) -> Result<f64> {
        Ok(match (&self.kind, gamma) {
            (FamilyKind::UnconditionalFsd { .. }, Gamma::Threshold { value }) => {
                ind(omega[0], *value) - ind(omega[1], *value)
            }
            (FamilyKind::ConditionalFsd { d_z, .. }, Gamma::Instrumented { threshold, cube }) => {
                let z = &omega[2..2 + d_z];
                if z.iter().any(|zu| !(0.0..=1.0).contains(zu)) {
                    return Err(Error::OutOfDomain(
                        "instrument coordinates must lie in [0,1]; rescale Z first".into(),
                    ));
                }
                if cube.contains(z) {
                    ind(omega[0], *threshold) - ind(omega[1], *threshold)
                } else {
                    0.0
                }
            }
            (FamilyKind::MarginalGivenG { cdf, .. }, Gamma::Threshold { value }) => {
                cdf.eval(*value) - ind(omega[0], *value)
            }
            (FamilyKind::Custom { members, .. }, Gamma::Member { index }) => {
                let j = self
                    .lookup
                    .get(&atom_key(omega))
                    .ok_or_else(|| Error::OutOfDomain(format!("{omega:?} is not in the custom support")))?;
                members[*index][*j]
            }
            _ => unreachable!("index checked against family"),
        })
    }

    fn finish(&self, idx: &MomentIndex, base: f64) -> f64 {
        match (idx.tail, self.tail) {
            (true, Some(t)) => t.k - base.abs().powf(1.0 + t.delta),
            _ => base,
        }
    }

    /// `v_γ(ω)`.
    pub fn evaluate(&self, idx: &MomentIndex, omega: &[f64]) -> Result<f64> {
        if omega.len() != self.dimension() {
            return Err(Error::DimensionMismatch { expected: self.dimension(), got: omega.len() });
        }
        self.check_index(idx)?;
        Ok(self.finish(idx, self.base_value(&idx.gamma, omega)?))
    }

    /// `v_γ` at every atom of `q`.
    pub fn values(&self, idx: &MomentIndex, q: &DiscreteMeasure) -> Result<Vec<f64>> {
        if q.dim() != self.dimension() {
            return Err(Error::DimensionMismatch { expected: self.dimension(), got: q.dim() });
        }
        self.check_index(idx)?;
        q.atoms()
            .iter()
            .map(|a| Ok(self.finish(idx, self.base_value(&idx.gamma, a)?)))
            .collect()
    }

    /// Member vectors for a list of indices, evaluated in parallel.
    pub fn values_matrix(&self, indices: &[MomentIndex], q: &DiscreteMeasure) -> Result<Vec<Vec<f64>>> {
        indices.par_iter().map(|idx| self.values(idx, q)).collect()
    }

    /// `∫ v_γ dQ`.
    pub fn family_mean(&self, idx: &MomentIndex, q: &DiscreteMeasure) -> Result<f64> {
        integrate(q, &self.values(idx, q)?)
    }

    /// Finite probing grid of the index set.
    ///
    /// Interval parts use the atom coordinates in range together with
    /// `resolution + 1` equally spaced points; since members only change at
    /// atom coordinates (and at knots of `G`), this grid carries every
    /// distinct restriction of the built-in families. Conditional families
    /// take the product with every cube at resolutions `1..=r_max`.
    pub fn index_grid(&self, q: &DiscreteMeasure, resolution: usize) -> Vec<MomentIndex> {
        let resolution = resolution.max(1);
        let base: Vec<MomentIndex> = match &self.kind {
            FamilyKind::UnconditionalFsd { lower, upper } => {
                let coords = q.atoms().iter().flat_map(|a| [a[0], a[1]]);
                threshold_grid(*lower, *upper, coords, resolution)
                    .into_iter()
                    .map(MomentIndex::threshold)
                    .collect()
            }
            FamilyKind::ConditionalFsd { lower, upper, d_z, r_max } => {
                let coords = q.atoms().iter().flat_map(|a| [a[0], a[1]]);
                let ts = threshold_grid(*lower, *upper, coords, resolution);
                let cubes: Vec<CubeIndex> = (1..=*r_max).flat_map(|r| CubeIndex::all(*d_z, r)).collect();
                ts.iter()
                    .flat_map(|&t| cubes.iter().map(move |c| MomentIndex::instrumented(t, c.clone())))
                    .collect()
            }
            FamilyKind::MarginalGivenG { upper, cdf } => {
                let coords = q.atoms().iter().map(|a| a[0]).chain(cdf.knot_locations());
                threshold_grid(0.0, *upper, coords, resolution)
                    .into_iter()
                    .map(MomentIndex::threshold)
                    .collect()
            }
            FamilyKind::Custom { members, .. } => (0..members.len()).map(MomentIndex::member).collect(),
        };
        self.augment(base)
    }

    /// Adds the tail member after each base index when a tail is configured.
    pub fn augment(&self, base: Vec<MomentIndex>) -> Vec<MomentIndex> {
        if self.tail.is_none() {
            return base;
        }
        base.into_iter()
            .flat_map(|idx| {
                let t = idx.clone().with_tail();
                [idx, t]
            })
            .collect()
    }
}

fn check_interval(lower: f64, upper: f64) -> Result<()> {
    if !(lower.is_finite() && upper.is_finite() && lower < upper) {
        return Err(invalid(format!("need finite lower < upper, got [{lower}, {upper}]")));
    }
    Ok(())
}

/// Sorted distinct thresholds in `[lo, hi]`: the endpoints, `resolution + 1`
/// equally spaced points and every in-range coordinate.
pub(crate) fn threshold_grid(
    lo: f64,
    hi: f64,
    coords: impl IntoIterator<Item = f64>,
    resolution: usize,
) -> Vec<f64> {
    let mut ts: Vec<f64> = (0..=resolution)
        .map(|k| lo + (hi - lo) * k as f64 / resolution as f64)
        .collect();
    ts.push(hi);
    ts.extend(coords.into_iter().filter(|x| (lo..=hi).contains(x)));
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}
