//! Discrete probability measures on `R^d` and the integral primitives used
//! everywhere else: `∫ f dQ`, the `L1(Q)` distance and the KL divergence of a
//! `Q`-density.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, invalid, Error, Result};
use crate::numeric::compensated_sum;

/// Tolerance on `Σ q_j = 1` after construction.
pub const MASS_TOL: f64 = 1e-12;
/// Tolerance on `Σ p_j q_j = 1` for a density.
pub const DENSITY_TOL: f64 = 1e-10;

/// Finite measure with pairwise distinct atoms and weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
    dim: usize,
}

fn atom_key(atom: &[f64]) -> Vec<u64> {
    // -0.0 and 0.0 are the same point.
    atom.iter()
        .map(|&x| if x == 0.0 { 0u64 } else { x.to_bits() })
        .collect()
}

impl DiscreteMeasure {
    /// Builds a measure from atoms and nonnegative weights.
    ///
    /// Duplicate atoms are merged (weights summed, first occurrence keeps its
    /// position) and the weights are rescaled to sum to one.
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        ensure_len(atoms.len(), weights.len())?;
        if atoms.is_empty() {
            return Err(invalid("a measure needs at least one atom"));
        }
        let dim = atoms[0].len();
        if dim == 0 {
            return Err(invalid("atoms must have at least one coordinate"));
        }
        for (j, (atom, &w)) in atoms.iter().zip(&weights).enumerate() {
            if atom.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: atom.len() });
            }
            if let Some(x) = atom.iter().find(|x| !x.is_finite()) {
                return Err(invalid(format!("atom {j} has non-finite coordinate {x}")));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(invalid(format!("weight {j} must be finite and nonnegative, got {w}")));
            }
        }

        let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(atoms.len());
        let mut merged_atoms: Vec<Vec<f64>> = Vec::with_capacity(atoms.len());
        let mut merged_weights: Vec<Vec<f64>> = Vec::with_capacity(atoms.len());
        for (atom, w) in atoms.into_iter().zip(weights) {
            match index.get(&atom_key(&atom)) {
                Some(&slot) => merged_weights[slot].push(w),
                None => {
                    index.insert(atom_key(&atom), merged_atoms.len());
                    merged_atoms.push(atom);
                    merged_weights.push(vec![w]);
                }
            }
        }
        let weights: Vec<f64> = merged_weights.into_iter().map(compensated_sum).collect();
        let total = compensated_sum(weights.iter().copied());
        if total <= 0.0 {
            return Err(invalid("total weight must be positive"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { atoms: merged_atoms, weights, dim })
    }

    /// Equal weights on the given atoms (after merging duplicates).
    pub fn uniform(atoms: Vec<Vec<f64>>) -> Result<Self> {
        let n = atoms.len();
        Self::new(atoms, vec![1.0; n])
    }

    /// One-dimensional measure from scalar locations.
    pub fn on_line(points: &[f64], weights: Vec<f64>) -> Result<Self> {
        Self::new(points.iter().map(|&x| vec![x]).collect(), weights)
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Values of coordinate `k` across atoms.
    pub fn coordinate(&self, k: usize) -> Vec<f64> {
        self.atoms.iter().map(|a| a[k]).collect()
    }

    /// Mass of atoms satisfying `pred`.
    pub fn mass_where(&self, mut pred: impl FnMut(&[f64]) -> bool) -> f64 {
        compensated_sum(
            self.atoms
                .iter()
                .zip(&self.weights)
                .filter(|(a, _)| pred(a))
                .map(|(_, &w)| w),
        )
    }

    /// Same atoms, weights proportional to `q_j · exp(log_tilt_j)`.
    pub fn tilted(&self, log_tilt: &[f64]) -> Result<Self> {
        ensure_len(self.len(), log_tilt.len())?;
        let m = log_tilt
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&t, _)| t)
            .fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(invalid("tilt must be finite on the support"));
        }
        let weights = self
            .weights
            .iter()
            .zip(log_tilt)
            .map(|(&w, &t)| if w > 0.0 { w * (t - m).exp() } else { 0.0 })
            .collect();
        Self::new(self.atoms.clone(), weights)
    }
}

/// A `Q`-density: `p_j ≥ 0` with `Σ p_j q_j = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DensityVector {
    values: Vec<f64>,
}

impl DensityVector {
    pub fn new(values: Vec<f64>, q: &DiscreteMeasure) -> Result<Self> {
        ensure_len(q.len(), values.len())?;
        if let Some((j, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(invalid(format!("density value {j} must be finite and nonnegative, got {v}")));
        }
        let mass = integrate(q, &values)?;
        if (mass - 1.0).abs() > DENSITY_TOL {
            return Err(invalid(format!("density integrates to {mass}, expected 1")));
        }
        Ok(Self { values })
    }

    /// Density of `Q` with respect to itself.
    pub fn ones(n: usize) -> Self {
        Self { values: vec![1.0; n] }
    }

    /// Density from probability masses `P({ω_j})`.
    pub fn from_masses(masses: &[f64], q: &DiscreteMeasure) -> Result<Self> {
        ensure_len(q.len(), masses.len())?;
        let mut values = Vec::with_capacity(masses.len());
        for (j, (&m, &w)) in masses.iter().zip(q.weights()).enumerate() {
            if w == 0.0 {
                if m != 0.0 {
                    return Err(invalid(format!("mass on null atom {j}")));
                }
                values.push(0.0);
            } else {
                values.push(m / w);
            }
        }
        Self::new(values, q)
    }

    pub(crate) fn from_values_unchecked(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Probability masses `p_j q_j`.
    pub fn masses(&self, q: &DiscreteMeasure) -> Vec<f64> {
        self.values.iter().zip(q.weights()).map(|(p, w)| p * w).collect()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// `∫ f dQ = Σ_j f_j q_j`.
pub fn integrate(q: &DiscreteMeasure, f: &[f64]) -> Result<f64> {
    ensure_len(q.len(), f.len())?;
    Ok(compensated_sum(f.iter().zip(q.weights()).map(|(f, w)| f * w)))
}

/// `m(p) = ∫ p log p dQ` in nats, with `0 log 0 = 0`.
pub fn kl_divergence(p: &DensityVector, q: &DiscreteMeasure) -> Result<f64> {
    ensure_len(q.len(), p.len())?;
    Ok(compensated_sum(p.values().iter().zip(q.weights()).map(|(&p, &w)| {
        if p == 0.0 || w == 0.0 {
            0.0
        } else {
            w * p * p.ln()
        }
    })))
}

/// `∫ |f − g| dQ`.
pub fn l1_distance(f: &[f64], g: &[f64], q: &DiscreteMeasure) -> Result<f64> {
    ensure_len(f.len(), g.len())?;
    ensure_len(q.len(), f.len())?;
    Ok(compensated_sum(
        f.iter().zip(g).zip(q.weights()).map(|((a, b), w)| (a - b).abs() * w),
    ))
}
