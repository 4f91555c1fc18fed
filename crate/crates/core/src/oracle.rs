//! Reference solvers that share no code path with the partition/dual scheme
//! beyond the measure primitives: cyclic KL projections onto halfspaces,
//! the isotonic closed form of the marginal-order projection, and cyclic
//! block descent for two marginal orders.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dualsolver::{self, SolverConfig};
use crate::error::{ensure_len, invalid, Error, Result};
use crate::measure::{kl_divergence, l1_distance, DensityVector, DiscreteMeasure};
use crate::moments::{threshold_grid, Cdf};
use crate::numeric::{compensated_sum, log_sum_exp};

/// Primal restriction `∫ v p dQ ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfspaceConstraint {
    pub v: Vec<f64>,
}

impl HalfspaceConstraint {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid("constraint values must be finite"));
        }
        Ok(Self { v })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleResult {
    pub density: DensityVector,
    pub kl: f64,
    /// Full cycles performed.
    pub iterations: usize,
    /// `L1(Q)` change of the density over the last cycle.
    pub last_change: f64,
    pub converged: bool,
}

/// Sign of `Σ_j q_j v_j e^{base_j + λ v_j}`, computed after a max-shift.
fn tilt_derivative(logq: &[f64], base: &[f64], v: &[f64], lambda: f64) -> f64 {
    let a: Vec<f64> = logq
        .iter()
        .zip(base)
        .zip(v)
        .map(|((l, b), v)| l + b + lambda * v)
        .collect();
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    compensated_sum(a.iter().zip(v).map(|(a, v)| v * (a - m).exp()))
}

/// `λ ≥ 0` solving the single-halfspace projection of `e^{base}` onto
/// `∫ v p dQ ≥ 0`, or `None` when the halfspace misses the support.
fn tilt_parameter(logq: &[f64], base: &[f64], v: &[f64]) -> Option<f64> {
    if tilt_derivative(logq, base, v, 0.0) >= 0.0 {
        return Some(0.0);
    }
    let vmax = v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let has_positive = v.iter().zip(logq).any(|(v, l)| *v > 0.0 && *l > f64::NEG_INFINITY);
    if !has_positive || vmax == 0.0 {
        return None;
    }
    let mut lo = 0.0;
    let mut hi = 50.0 / vmax;
    let mut expansions = 0;
    while tilt_derivative(logq, base, v, hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > 60 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if tilt_derivative(logq, base, v, mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn normalized_density(logq: &[f64], y: &[f64]) -> Vec<f64> {
    let a: Vec<f64> = logq.iter().zip(y).map(|(l, y)| l + y).collect();
    let lv = log_sum_exp(&a);
    y.iter().map(|y| (y - lv).exp()).collect()
}

/// Cyclic KL projections with Dykstra's correction onto the halfspaces.
///
/// For halfspaces the corrected cycle keeps one multiplier `λ_i ≥ 0` per
/// constraint and the log-density `y = Σ_i λ_i v_i`; visiting constraint `i`
/// removes its own contribution and re-projects, which is the exponential
/// tilt `p ∝ e^{y - λ_i v_i + λ v_i}` with `λ` found by bisection.
pub fn bregman_dykstra(
    q: &DiscreteMeasure,
    constraints: &[HalfspaceConstraint],
    tol: f64,
    max_iter: usize,
) -> Result<OracleResult> {
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    for c in constraints {
        ensure_len(q.len(), c.v.len())?;
    }
    let n = q.len();
    let logq: Vec<f64> = q.weights().iter().map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY }).collect();
    let mut lambda = vec![0.0; constraints.len()];
    let mut y = vec![0.0; n];
    let mut p = vec![1.0; n];
    let mut iterations = 0;
    let mut last_change = f64::INFINITY;
    let mut converged = constraints.is_empty();

    while !converged && iterations < max_iter {
        for (i, c) in constraints.iter().enumerate() {
            let base: Vec<f64> = y.iter().zip(&c.v).map(|(y, v)| y - lambda[i] * v).collect();
            let new = tilt_parameter(&logq, &base, &c.v).ok_or_else(|| {
                Error::Infeasible(format!(
                    "constraint {i} is nonpositive on the whole support, so no strictly feasible density exists"
                ))
            })?;
            lambda[i] = new;
            y = base.iter().zip(&c.v).map(|(b, v)| b + new * v).collect();
        }
        iterations += 1;
        let next = normalized_density(&logq, &y);
        last_change = l1_distance(&next, &p, q)?;
        p = next;
        if last_change <= tol {
            converged = true;
        }
    }
    let density = DensityVector::from_values_unchecked(p);
    let kl = kl_divergence(&density, q)?;
    Ok(OracleResult { density, kl, iterations, last_change, converged })
}

/// Weighted least-squares nondecreasing fit (pool adjacent violators).
pub fn isotonic_nondecreasing(values: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    ensure_len(values.len(), weights.len())?;
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(invalid("isotonic weights must be positive"));
    }
    // Blocks as (weighted mean, total weight, count).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, c2) = blocks[blocks.len() - 1];
            let (m1, w1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            *blocks.last_mut().unwrap() = ((m1 * w1 + m2 * w2) / w, w, c1 + c2);
        }
    }
    Ok(blocks.into_iter().flat_map(|(m, _, c)| std::iter::repeat_n(m, c)).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PavaResult {
    /// `dG/dQ` per atom (in the order of `Q`'s atoms).
    pub ratio: Vec<f64>,
    /// Its nondecreasing least-squares projection under `Q`.
    pub isotonic: Vec<f64>,
    /// `y_0 = ln iso - ∫ ln iso dG`, `-∞` where the projection vanishes.
    pub y0: Vec<f64>,
}

/// Closed-form dual of the marginal-order projection with `γ̄ = 1` on a
/// one-dimensional `Q`: the isotonic regression of `dG/dQ`.
///
/// The `G`-mass of `(x_(k-1), x_(k)]` is attributed to the atom `x_(k)`
/// (any mass above the largest atom goes to that atom).
pub fn pava_closed_form(q: &DiscreteMeasure, cdf: &Cdf) -> Result<PavaResult> {
    if q.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: q.dim() });
    }
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| q.atom(a)[0].total_cmp(&q.atom(b)[0]));
    let mut g_mass = vec![0.0; q.len()];
    let mut prev = 0.0;
    for &j in &order {
        let c = cdf.eval(q.atom(j)[0]);
        g_mass[j] = (c - prev).max(0.0);
        prev = c;
    }
    let last = *order.last().expect("measure is nonempty");
    g_mass[last] += (1.0 - prev).max(0.0);

    let w = q.weights();
    if order.iter().any(|&j| w[j] == 0.0 && g_mass[j] > 0.0) {
        return Err(invalid("G puts mass where Q has none; dG/dQ does not exist"));
    }
    let kept: Vec<usize> = order.iter().copied().filter(|&j| w[j] > 0.0).collect();
    let ratio_sorted: Vec<f64> = kept.iter().map(|&j| g_mass[j] / w[j]).collect();
    let w_sorted: Vec<f64> = kept.iter().map(|&j| w[j]).collect();
    let iso_sorted = isotonic_nondecreasing(&ratio_sorted, &w_sorted)?;

    let mut ratio = vec![0.0; q.len()];
    let mut isotonic = vec![0.0; q.len()];
    for (k, &j) in kept.iter().enumerate() {
        ratio[j] = ratio_sorted[k];
        isotonic[j] = iso_sorted[k];
    }
    let offset = compensated_sum(
        (0..q.len())
            .filter(|&j| g_mass[j] > 0.0)
            .map(|j| g_mass[j] * isotonic[j].ln()),
    );
    let y0 = isotonic
        .iter()
        .map(|&v| if v > 0.0 { v.ln() - offset } else { f64::NEG_INFINITY })
        .collect();
    Ok(PavaResult { ratio, isotonic, y0 })
}

/// Members `G(t) - 1[x_coord ≤ t]` on the lossless threshold grid.
fn marginal_members(q: &DiscreteMeasure, coord: usize, cdf: &Cdf) -> Vec<Vec<f64>> {
    let coords: Vec<f64> = q.atoms().iter().map(|a| a[coord]).chain(cdf.knot_locations()).collect();
    let lo = coords.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = coords.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ts = if lo < hi { threshold_grid(lo, hi, coords, 1) } else { vec![lo] };
    ts.par_iter()
        .map(|&t| {
            let gt = cdf.eval(t);
            q.atoms().iter().map(|a| gt - if a[coord] <= t { 1.0 } else { 0.0 }).collect()
        })
        .collect()
}

/// Halfspaces `P(X_i ≤ t) ≤ G_i(t)` for both coordinates at every threshold
/// where either side can change.
pub fn two_marginal_constraints(q: &DiscreteMeasure, g1: &Cdf, g2: &Cdf) -> Result<Vec<HalfspaceConstraint>> {
    if q.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: q.dim() });
    }
    Ok(marginal_members(q, 0, g1)
        .into_iter()
        .chain(marginal_members(q, 1, g2))
        .map(|v| HalfspaceConstraint { v })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CyclicResult {
    pub y: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    /// `∫ e^{y1 + y2} dQ` after every completed cycle, starting from 1.
    pub objective_trace: Vec<f64>,
    pub cycles: usize,
    pub converged: bool,
}

/// Alternating minimization of `∫ e^{y1 + y2} dQ` with `y_i` in the cone of
/// the `i`-th marginal family. Each block is the finite program over that
/// family's members under the reference tilted by the other block.
pub fn cyclic_descent_two_marginals(
    q: &DiscreteMeasure,
    g1: &Cdf,
    g2: &Cdf,
    tol: f64,
    max_cycles: usize,
) -> Result<CyclicResult> {
    if q.dim() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: q.dim() });
    }
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let blocks = [marginal_members(q, 0, g1), marginal_members(q, 1, g2)];
    let n = q.len();
    let mut ys = [vec![0.0; n], vec![0.0; n]];
    let config = SolverConfig { grad_tol: 1e-12, ..SolverConfig::default() };
    let mut trace = vec![1.0];
    let mut converged = false;
    let mut solver_ok = true;
    let mut cycles = 0;

    while cycles < max_cycles {
        for b in 0..2 {
            let other = &ys[1 - b];
            let tilted = q.tilted(other)?;
            let sol = dualsolver::solve_finite_program(&tilted, &blocks[b], &config)?;
            solver_ok &= sol.converged;
            ys[b] = sol.y;
        }
        cycles += 1;
        let y: Vec<f64> = ys[0].iter().zip(&ys[1]).map(|(a, b)| a + b).collect();
        let value = dualsolver::log_integral_exp(q, &y)?.exp();
        let prev = *trace.last().unwrap();
        trace.push(value);
        if prev - value <= tol {
            converged = solver_ok;
            break;
        }
    }
    let y = ys[0].iter().zip(&ys[1]).map(|(a, b)| a + b).collect();
    let [y1, y2] = ys;
    Ok(CyclicResult { y, y1, y2, objective_trace: trace, cycles, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dualsolver::density_from_dual;
    use crate::moments::StepCdf;
    use proptest::prelude::*;

    fn two_atom() -> DiscreteMeasure {
        DiscreteMeasure::on_line(&[0.0, 1.0], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn dykstra_two_atom_tilt() {
        let q = two_atom();
        let c = vec![HalfspaceConstraint::new(vec![1.0, -2.0]).unwrap()];
        let r = bregman_dykstra(&q, &c, 1e-14, 1000).unwrap();
        assert!(r.converged);
        let m = r.density.masses(&q);
        assert!((m[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((m[1] - 1.0 / 3.0).abs() < 1e-12);

        let doubled = vec![c[0].clone(), c[0].clone()];
        let r2 = bregman_dykstra(&q, &doubled, 1e-14, 1000).unwrap();
        assert!(l1_distance(r.density.values(), r2.density.values(), &q).unwrap() < 1e-10);
    }

    #[test]
    fn dykstra_feasible_reference_is_fixed() {
        let q = two_atom();
        let c = vec![HalfspaceConstraint::new(vec![1.0, 0.5]).unwrap()];
        let r = bregman_dykstra(&q, &c, 1e-14, 1000).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.density.values(), &[1.0, 1.0]);
    }

    #[test]
    fn single_tilt_binds_violated_constraint() {
        let q = DiscreteMeasure::on_line(&[0.0, 1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = vec![2.0, 1.0, -0.5, -1.0];
        let logq: Vec<f64> = q.weights().iter().map(|w| w.ln()).collect();
        let lambda = tilt_parameter(&logq, &[0.0; 4], &v).unwrap();
        let y: Vec<f64> = v.iter().map(|x| lambda * x).collect();
        let p = normalized_density(&logq, &y);
        let slack = crate::measure::integrate(&q, &p.iter().zip(&v).map(|(p, v)| p * v).collect::<Vec<_>>()).unwrap();
        assert!(slack.abs() < 1e-12);
    }

    #[test]
    fn pava_examples() {
        let q = DiscreteMeasure::on_line(&[0.25, 0.75], vec![1.0, 1.0]).unwrap();
        // dG/dQ = (2, 0): all G-mass on the first atom.
        let g = Cdf::Step(StepCdf::new(vec![(0.25, 1.0)]).unwrap());
        let r = pava_closed_form(&q, &g).unwrap();
        assert_eq!(r.ratio, vec![2.0, 0.0]);
        assert_eq!(r.isotonic, vec![1.0, 1.0]);
        assert_eq!(r.y0, vec![0.0, 0.0]);

        // G equal to Q's own CDF.
        let g = Cdf::Step(StepCdf::empirical(&q, 0));
        let r = pava_closed_form(&q, &g).unwrap();
        assert!(r.y0.iter().all(|y| y.abs() < 1e-15));

        // Nondecreasing ratio is a fixed point.
        let q = DiscreteMeasure::on_line(&[0.1, 0.2, 0.3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = Cdf::Step(StepCdf::new(vec![(0.1, 0.2), (0.2, 0.5), (0.3, 1.0)]).unwrap());
        let r = pava_closed_form(&q, &g).unwrap();
        for (a, b) in r.ratio.iter().zip(&r.isotonic) {
            assert!((a - b).abs() < 1e-12);
        }
        let p = density_from_dual(&q, &r.y0).unwrap();
        for (a, b) in p.values().iter().zip(&r.isotonic) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cyclic_descent_with_own_marginals_is_zero() {
        let q = DiscreteMeasure::uniform(vec![vec![0.1, 0.7], vec![0.4, 0.2], vec![0.9, 0.5]]).unwrap();
        let g1 = Cdf::Step(StepCdf::empirical(&q, 0));
        let g2 = Cdf::Step(StepCdf::empirical(&q, 1));
        let r = cyclic_descent_two_marginals(&q, &g1, &g2, 1e-13, 100).unwrap();
        assert!(r.converged);
        assert!(r.y.iter().all(|y| y.abs() < 1e-9));
    }

    #[test]
    fn cyclic_descent_matches_dykstra_on_product() {
        let xs = [0.1, 0.3, 0.5, 0.7, 0.9];
        let atoms: Vec<Vec<f64>> = xs.iter().flat_map(|&a| xs.iter().map(move |&b| vec![a, b])).collect();
        let q = DiscreteMeasure::uniform(atoms).unwrap();
        // G1 shifts mass upward in x1; G2 is Q's own x2 marginal.
        let g1 = Cdf::Step(StepCdf::new(vec![(0.1, 0.05), (0.3, 0.15), (0.5, 0.3), (0.7, 0.55), (0.9, 1.0)]).unwrap());
        let g2 = Cdf::Step(StepCdf::empirical(&q, 1));
        let r = cyclic_descent_two_marginals(&q, &g1, &g2, 1e-14, 500).unwrap();
        assert!(r.converged);
        for w in r.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
        // y depends on x1 only.
        for a in q.atoms().iter().enumerate() {
            for b in q.atoms().iter().enumerate() {
                if a.1[0] == b.1[0] {
                    assert!((r.y[a.0] - r.y[b.0]).abs() < 1e-7);
                }
            }
        }
        let cons = two_marginal_constraints(&q, &g1, &g2).unwrap();
        let d = bregman_dykstra(&q, &cons, 1e-13, 100_000).unwrap();
        let p = density_from_dual(&q, &r.y).unwrap();
        assert!(l1_distance(p.values(), d.density.values(), &q).unwrap() < 1e-6);
    }

    fn exhaustive_best(values: &[f64], weights: &[f64], levels: &[f64]) -> f64 {
        fn rec(k: usize, lo: usize, values: &[f64], weights: &[f64], levels: &[f64], acc: f64, best: &mut f64) {
            if k == values.len() {
                *best = best.min(acc);
                return;
            }
            for li in lo..levels.len() {
                let d = values[k] - levels[li];
                rec(k + 1, li, values, weights, levels, acc + weights[k] * d * d, best);
            }
        }
        let mut best = f64::INFINITY;
        rec(0, 0, values, weights, levels, 0.0, &mut best);
        best
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn pava_is_monotone_mean_preserving_and_optimal(
            pts in prop::collection::vec((0u8..6, 1u8..4), 1..7),
        ) {
            let values: Vec<f64> = pts.iter().map(|p| p.0 as f64).collect();
            let weights: Vec<f64> = pts.iter().map(|p| p.1 as f64).collect();
            let fit = isotonic_nondecreasing(&values, &weights).unwrap();
            for w in fit.windows(2) {
                prop_assert!(w[0] <= w[1] + 1e-12);
            }
            let total = |xs: &[f64]| xs.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>();
            prop_assert!((total(&fit) - total(&values)).abs() < 1e-9);
            let loss: f64 = fit.iter().zip(&values).zip(&weights).map(|((f, v), w)| w * (f - v).powi(2)).sum();
            // Any least-squares monotone fit is constant on blocks at their
            // weighted means, so the block means form an exhaustive level set.
            let mut levels: Vec<f64> = Vec::new();
            for a in 0..values.len() {
                for b in a..values.len() {
                    let num: f64 = (a..=b).map(|k| values[k] * weights[k]).sum();
                    let den: f64 = (a..=b).map(|k| weights[k]).sum();
                    levels.push(num / den);
                }
            }
            levels.extend(fit.iter().copied());
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            prop_assert!(loss <= exhaustive_best(&values, &weights, &levels) + 1e-9);
        }
    }
}
