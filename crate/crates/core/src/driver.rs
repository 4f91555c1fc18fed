//! The refinement scheme: for each accuracy `ε_m` of a decreasing schedule,
//! partition the family, keep one representative per cell, solve the finite
//! program and map its solution to a density. Also numeric diagnostics of the
//! standing assumptions and a posteriori constraint verification.

use serde::{Deserialize, Serialize};

use crate::dualsolver::{self, density_from_dual, duality_gap, DualSolution, SolverConfig, SolverStatus};
use crate::error::{invalid, Error, Result};
use crate::measure::{integrate, kl_divergence, DensityVector, DiscreteMeasure};
use crate::moments::{FamilyKind, MomentFamily, MomentIndex};
use crate::numeric::compensated_sum;
use crate::partition::{self, Partition};

/// Accuracy used for the precompactness diagnostic.
pub const PRECOMPACT_EPS: f64 = 0.1;

/// `ε_m = eps0 · decay^m`, `m = 0..stages`.
pub fn geometric_schedule(eps0: f64, decay: f64, stages: usize) -> Vec<f64> {
    (0..stages).map(|m| eps0 * decay.powi(m as i32)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectOptions {
    pub schedule: Vec<f64>,
    /// Stop once two successive stage values differ by at most this much
    /// and the stage density is feasible on the verification grid.
    pub value_tol: f64,
    pub binding_tol: f64,
    /// Resolution of the verification grid (see `MomentFamily::index_grid`).
    pub resolution: usize,
    pub solver: SolverConfig,
}

impl Default for ProjectOptions {
    fn default() -> Self {
        Self {
            schedule: geometric_schedule(0.5, 0.5, 12),
            value_tol: 1e-10,
            binding_tol: 1e-6,
            resolution: 100,
            solver: SolverConfig::default(),
        }
    }
}

impl ProjectOptions {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(invalid("schedule must contain at least one accuracy"));
        }
        if self.schedule.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return Err(invalid("schedule accuracies must be positive"));
        }
        if self.schedule.windows(2).any(|w| w[1] >= w[0]) {
            return Err(invalid("schedule must be strictly decreasing"));
        }
        if !(self.value_tol > 0.0 && self.binding_tol > 0.0) {
            return Err(invalid("value_tol and binding_tol must be positive"));
        }
        if self.resolution == 0 {
            return Err(invalid("resolution must be at least 1"));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub epsilon: f64,
    /// Cells in the partition.
    pub cells: usize,
    /// Representatives passed to the solver (identically zero ones dropped).
    pub active: usize,
    pub achieved_epsilon: f64,
    pub r0: Option<u32>,
    pub value: f64,
    pub iterations: usize,
    pub alpha: f64,
    pub residual: f64,
    pub duality_gap: f64,
    /// Largest `∫ f p dQ` over the verification grid for this stage's density.
    pub max_slack: f64,
    pub status: SolverStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub density: DensityVector,
    pub kl: f64,
    /// Dual value of the stage the density comes from.
    pub value: f64,
    pub duality_gap: f64,
    pub stages: Vec<StageRecord>,
    /// Verification-grid indices with `|∫ v p dQ| ≤ binding_tol`.
    pub binding_set: Vec<MomentIndex>,
    pub max_slack: f64,
    pub converged: bool,
    /// Index into `stages` of the reported stage.
    pub reported_stage: usize,
    /// Representatives of the reported stage and their coefficients.
    pub representatives: Vec<MomentIndex>,
    pub beta: Vec<f64>,
    pub y: Vec<f64>,
    pub grid_size: usize,
}

/// Partition of `family` at accuracy `epsilon`, dispatched on the family kind.
pub fn stage_partition(q: &DiscreteMeasure, family: &MomentFamily, epsilon: f64, resolution: usize) -> Result<Partition> {
    if family.tail().is_some() {
        let grid = family.index_grid(q, resolution);
        return partition::build_greedy_partition(q, family, &grid, epsilon);
    }
    match family.kind() {
        FamilyKind::UnconditionalFsd { lower, upper } => partition::build_fsd_partition(q, *lower, *upper, epsilon),
        FamilyKind::ConditionalFsd { lower, upper, d_z, .. } => {
            let r0 = match partition::choose_r0(q, *d_z, epsilon) {
                Ok(r) => r,
                Err(Error::Infeasible(msg)) => {
                    let r = partition::separating_r(q, *d_z)?;
                    log::info!("{msg}; using the separating cube resolution r = {r}");
                    r
                }
                Err(e) => return Err(e),
            };
            partition::build_conditional_fsd_partition_with_r0(q, *lower, *upper, epsilon, *d_z, r0)
        }
        FamilyKind::MarginalGivenG { upper, cdf } => partition::build_marginal_partition(q, cdf, *upper, epsilon),
        FamilyKind::Custom { .. } => {
            let grid = family.index_grid(q, resolution);
            partition::build_greedy_partition(q, family, &grid, epsilon)
        }
    }
}

struct Stage {
    record: StageRecord,
    solution: DualSolution,
    density: DensityVector,
    reps: Vec<MomentIndex>,
}

/// Runs the approximation scheme over `options.schedule`.
pub fn project(q: &DiscreteMeasure, family: &MomentFamily, options: &ProjectOptions) -> Result<ProjectionResult> {
    options.validate()?;
    family.check_measure(q)?;
    let grid = family.index_grid(q, options.resolution);
    let grid_values = family.values_matrix(&grid, q)?;

    let mut stages: Vec<Stage> = Vec::new();
    let mut stopped_early = false;
    let mut diverged = false;
    for &epsilon in &options.schedule {
        let part = stage_partition(q, family, epsilon, options.resolution)?;
        let (reps, vectors): (Vec<MomentIndex>, Vec<Vec<f64>>) = part
            .cells
            .iter()
            .filter(|c| c.values.iter().any(|&x| x != 0.0))
            .map(|c| (part.grid[c.representative].clone(), c.values.clone()))
            .unzip();
        let solution = if vectors.is_empty() {
            trivial_solution(q.len())
        } else {
            dualsolver::solve_finite_program(q, &vectors, &options.solver)?
        };
        let density = density_from_dual(q, &solution.y)?;
        let gap = duality_gap(q, &density, solution.value)?;
        let max_slack = slacks(&density, &grid_values, q)?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        let record = StageRecord {
            epsilon,
            cells: part.len(),
            active: vectors.len(),
            achieved_epsilon: part.achieved_epsilon,
            r0: part.r0,
            value: solution.value,
            iterations: solution.iterations,
            alpha: solution.alpha,
            residual: solution.residual,
            duality_gap: gap,
            max_slack,
            status: solution.status,
        };
        log::debug!(
            "stage eps={epsilon:.3e}: {} cells, value {:.12}, {} iterations, status {:?}",
            record.cells,
            record.value,
            record.iterations,
            record.status
        );
        let ok = solution.converged;
        let prev_value = stages.last().map(|s| s.record.value);
        stages.push(Stage { record, solution, density, reps });
        if !ok {
            diverged = solution_diverged(&stages);
            break;
        }
        if let Some(prev) = prev_value {
            let stage = stages.last().unwrap();
            if (stage.record.value - prev).abs() <= options.value_tol && stage.record.max_slack <= options.binding_tol {
                stopped_early = true;
                break;
            }
        }
    }

    let last_ok = stages.iter().rposition(|s| s.solution.converged);
    let reported_stage = last_ok.unwrap_or(stages.len() - 1);
    let value_stable = stages.len() >= 2 && {
        let n = stages.len();
        (stages[n - 1].record.value - stages[n - 2].record.value).abs() <= options.value_tol
    };
    let converged = !diverged
        && stages.last().map(|s| s.solution.converged).unwrap_or(false)
        && (stopped_early || value_stable);

    let chosen = &stages[reported_stage];
    let density = chosen.density.clone();
    let kl = kl_divergence(&density, q)?;
    let slack = slacks(&density, &grid_values, q)?;
    let max_slack = slack.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let binding_set = grid
        .iter()
        .zip(&slack)
        .filter(|(_, s)| s.abs() <= options.binding_tol)
        .map(|(g, _)| g.clone())
        .collect();
    Ok(ProjectionResult {
        kl,
        value: chosen.solution.value,
        duality_gap: chosen.record.duality_gap,
        binding_set,
        max_slack,
        converged,
        reported_stage,
        representatives: chosen.reps.clone(),
        beta: chosen.solution.beta.clone(),
        y: chosen.solution.y.clone(),
        grid_size: grid.len(),
        density,
        stages: stages.into_iter().map(|s| s.record).collect(),
    })
}

fn solution_diverged(stages: &[Stage]) -> bool {
    stages
        .last()
        .map(|s| s.solution.status == SolverStatus::BetaCapExceeded)
        .unwrap_or(false)
        || stages.last().map(|s| !s.solution.converged).unwrap_or(false)
}

fn trivial_solution(n: usize) -> DualSolution {
    DualSolution {
        beta: Vec::new(),
        alpha: 0.0,
        mu: Vec::new(),
        y: vec![0.0; n],
        value: 1.0,
        log_value: 0.0,
        residual: 0.0,
        iterations: 0,
        converged: true,
        status: SolverStatus::Converged,
        trace: Vec::new(),
    }
}

/// `∫ f_γ p dQ = -∫ v_γ p dQ` for every member vector.
fn slacks(p: &DensityVector, members: &[Vec<f64>], q: &DiscreteMeasure) -> Result<Vec<f64>> {
    let w: Vec<f64> = p.masses(q);
    members
        .iter()
        .map(|v| {
            if v.len() != w.len() {
                return Err(Error::LengthMismatch { expected: w.len(), got: v.len() });
            }
            Ok(-compensated_sum(v.iter().zip(&w).map(|(v, w)| v * w)))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Verification {
    /// `max_γ ∫ f_γ p dQ`; `≤ 0` means feasible.
    pub max_slack: f64,
    pub argmax: Option<MomentIndex>,
    /// Indices with `|∫ f_γ p dQ| ≤ binding_tol`.
    pub binding_set: Vec<MomentIndex>,
    /// `∫ f_γ p dQ` per grid index.
    pub slacks: Vec<f64>,
}

/// Checks `p` against every index of `grid`.
pub fn verify_constraints(
    p: &DensityVector,
    family: &MomentFamily,
    q: &DiscreteMeasure,
    grid: &[MomentIndex],
    binding_tol: f64,
) -> Result<Verification> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch { expected: q.len(), got: p.len() });
    }
    let members = family.values_matrix(grid, q)?;
    let slacks = slacks(p, &members, q)?;
    let mut max_slack = f64::NEG_INFINITY;
    let mut argmax = None;
    for (g, &s) in grid.iter().zip(&slacks) {
        if s > max_slack {
            max_slack = s;
            argmax = Some(g.clone());
        }
    }
    let binding_set = grid
        .iter()
        .zip(&slacks)
        .filter(|(_, s)| s.abs() <= binding_tol)
        .map(|(g, _)| g.clone())
        .collect();
    Ok(Verification { max_slack, argmax, binding_set, slacks })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `∫ e^{-α f_γ} dQ` is finite at the witness.
    pub laplace_ok: bool,
    pub laplace_witness: Option<MomentIndex>,
    pub laplace_alpha: f64,
    pub laplace_value: f64,
    /// `max_γ ∫ |f_γ|^{1+δ} dQ` over the grid.
    pub tail_sup: f64,
    pub delta: f64,
    /// `Q({ω : v_γ(ω) > 0 for every grid γ})`.
    pub strict_mass: f64,
    /// Greedy cell count at `PRECOMPACT_EPS`, when the grid is small enough
    /// to cluster.
    pub precompact_cells: Option<usize>,
}

/// Largest grid the precompactness diagnostic will cluster.
const PRECOMPACT_MAX_GRID: usize = 20_000;

pub fn check_assumptions(
    q: &DiscreteMeasure,
    family: &MomentFamily,
    grid: &[MomentIndex],
    delta: f64,
) -> Result<AssumptionReport> {
    if grid.is_empty() {
        return Err(invalid("assumption checks need a nonempty grid"));
    }
    if !(delta > 0.0) {
        return Err(invalid("δ must be positive"));
    }
    let members = family.values_matrix(grid, q)?;

    let laplace_alpha = 1.0;
    // -α f = α v.
    let laplace_value = integrate(q, &members[0].iter().map(|v| (laplace_alpha * v).exp()).collect::<Vec<_>>())?;

    let mut tail_sup = 0.0f64;
    for v in &members {
        let t = integrate(q, &v.iter().map(|x| x.abs().powf(1.0 + delta)).collect::<Vec<_>>())?;
        tail_sup = tail_sup.max(t);
    }

    let strict_mass = compensated_sum(
        (0..q.len())
            .filter(|&j| members.iter().all(|v| v[j] > 0.0))
            .map(|j| q.weights()[j]),
    )
    .clamp(0.0, 1.0);

    let precompact_cells = if grid.len() <= PRECOMPACT_MAX_GRID {
        Some(partition::build_greedy_partition(q, family, grid, PRECOMPACT_EPS)?.len())
    } else {
        None
    };

    Ok(AssumptionReport {
        laplace_ok: laplace_value.is_finite(),
        laplace_witness: Some(grid[0].clone()),
        laplace_alpha,
        laplace_value,
        tail_sup,
        delta,
        strict_mass,
        precompact_cells,
    })
}

/// Both sides of the lower bound
/// `∫ e^{α y'} dQ ≥ α (e² - βk)((k+1)β - e²)/(βk)` with `β = ∫ e^{y'} dQ`
/// and `k` the midpoint of `(e²/β - 1, e²/β)`.
///
/// The right side is linear in `α`, so the bound cannot hold for every
/// `α` when `∫ e^{α y'} dQ` stays bounded (e.g. `y' ≡ 0`); callers get both
/// numbers and decide.
pub fn coercivity_bound_check(q: &DiscreteMeasure, y_prime: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if y_prime.len() != q.len() {
        return Err(Error::LengthMismatch { expected: q.len(), got: y_prime.len() });
    }
    if y_prime.iter().any(|v| !(-2.0..=2.0).contains(v)) {
        return Err(invalid("y' must take values in [-2, 2]"));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(invalid("α must be finite and nonnegative"));
    }
    let e2 = std::f64::consts::E.powi(2);
    let beta = integrate(q, &y_prime.iter().map(|v| v.exp()).collect::<Vec<_>>())?;
    let k = e2 / beta - 0.5;
    let lhs = integrate(q, &y_prime.iter().map(|v| (alpha * v).exp()).collect::<Vec<_>>())?;
    let rhs = alpha * (e2 - beta * k) * ((k + 1.0) * beta - e2) / (beta * k);
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::{Cdf, StepCdf};
    use crate::oracle::{bregman_dykstra, HalfspaceConstraint};
    use crate::synth;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_atom_custom() -> (DiscreteMeasure, MomentFamily) {
        let q = DiscreteMeasure::on_line(&[0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let fam = MomentFamily::custom(vec![vec![0.0], vec![1.0]], vec![vec![-1.0, 2.0]]).unwrap();
        (q, fam)
    }

    #[test]
    fn feasible_reference_is_returned() {
        // x1 ≤ x2 pointwise, so 1[x1 ≤ γ] ≥ 1[x2 ≤ γ] and every mean is ≥ 0.
        let q = DiscreteMeasure::uniform(vec![vec![0.1, 0.4], vec![0.3, 0.9], vec![0.5, 0.5]]).unwrap();
        let fam = MomentFamily::unconditional_fsd(0.0, 1.0).unwrap();
        let r = project(&q, &fam, &ProjectOptions::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.kl, 0.0);
        assert!(r.density.values().iter().all(|&p| p == 1.0));
        assert!(r.stages.iter().all(|s| s.value == 1.0));
    }

    #[test]
    fn custom_two_atom_projection() {
        let (q, fam) = two_atom_custom();
        let r = project(&q, &fam, &ProjectOptions::default()).unwrap();
        assert!(r.converged);
        for s in &r.stages {
            assert!((s.value - 1.5 * 2f64.powf(-2.0 / 3.0)).abs() < 1e-12);
        }
        assert!((r.kl - 0.056633).abs() < 1e-6);
        assert!(r.duality_gap <= 1e-8);
        assert_eq!(r.binding_set.len(), 1);
    }

    #[test]
    fn fsd_stage_values_approach_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // The atom (0, 1) keeps every constraint strictly satisfiable.
        let mut atoms = synth::fsd_instance(&mut rng, 50, 1.5).atoms().to_vec();
        atoms.push(vec![0.0, 1.0]);
        let q = DiscreteMeasure::uniform(atoms).unwrap();
        let fam = MomentFamily::unconditional_fsd(0.0, 1.0).unwrap();
        let r = project(&q, &fam, &ProjectOptions::default()).unwrap();
        assert!(r.converged, "{:?}", r.stages);
        let grid = fam.index_grid(&q, 1);
        let cons: Vec<HalfspaceConstraint> = fam
            .values_matrix(&grid, &q)
            .unwrap()
            .into_iter()
            .map(|v| HalfspaceConstraint { v })
            .collect();
        let o = bregman_dykstra(&q, &cons, 1e-13, 200_000).unwrap();
        let oracle_value = (-o.kl).exp();
        for s in &r.stages {
            assert!(s.value >= oracle_value - 1e-9);
        }
        assert!((r.value - oracle_value).abs() <= 1e-4);
        assert!(r.max_slack <= 1e-6);
        assert!(r.duality_gap <= 1e-8);
    }

    #[test]
    fn verify_examples() {
        let (q, fam) = two_atom_custom();
        let grid = vec![MomentIndex::member(0)];
        let p = DensityVector::new(vec![4.0 / 3.0, 2.0 / 3.0], &q).unwrap();
        let v = verify_constraints(&p, &fam, &q, &grid, 1e-6).unwrap();
        assert!(v.max_slack.abs() < 1e-15);
        assert_eq!(v.binding_set.len(), 1);

        let fsd = MomentFamily::unconditional_fsd(0.0, 1.0).unwrap();
        let q = DiscreteMeasure::uniform(vec![vec![0.2, 0.6], vec![0.7, 0.3]]).unwrap();
        let grid = fsd.index_grid(&q, 1);
        // All mass on the atom with x2 < x1 violates exactly at γ ∈ [0.3, 0.7).
        let p = DensityVector::new(vec![0.0, 2.0], &q).unwrap();
        let v = verify_constraints(&p, &fsd, &q, &grid, 1e-6).unwrap();
        assert!(v.max_slack > 0.0);
        let t = v.argmax.unwrap().threshold_value().unwrap();
        assert!((0.3..0.7).contains(&t));
    }

    #[test]
    fn assumption_examples() {
        let q = synth::unit_grid(11);
        let g = Cdf::Step(StepCdf::empirical(&q, 0));
        let fam = MomentFamily::marginal_given_g(0.8, g.clone()).unwrap();
        let rep = check_assumptions(&q, &fam, &fam.index_grid(&q, 20), 1.0).unwrap();
        let tail = q.mass_where(|a| a[0] > 0.8);
        assert!((rep.strict_mass - tail).abs() < 1e-12);
        assert!(rep.laplace_ok);

        let fam = MomentFamily::marginal_given_g(1.0, g).unwrap();
        let rep = check_assumptions(&q, &fam, &fam.index_grid(&q, 20), 1.0).unwrap();
        assert_eq!(rep.strict_mass, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = synth::fsd_instance(&mut rng, 20, 1.5);
        let fam = MomentFamily::unconditional_fsd(0.0, 1.0).unwrap();
        let rep = check_assumptions(&q, &fam, &fam.index_grid(&q, 10), 1.0).unwrap();
        assert!(rep.tail_sup <= 4.0);
        assert!(rep.precompact_cells.unwrap() >= 1);
    }

    #[test]
    fn coercivity_examples() {
        let q = synth::unit_grid(5);
        let zero = vec![0.0; 5];
        let (lhs, rhs) = coercivity_bound_check(&q, &zero, 0.0).unwrap();
        assert_eq!((lhs, rhs), (1.0, 0.0));
        let (lhs, rhs) = coercivity_bound_check(&q, &zero, 0.01).unwrap();
        assert_eq!(lhs, 1.0);
        let e2 = std::f64::consts::E.powi(2);
        let k = e2 - 0.5;
        assert!((rhs - 0.01 * (e2 - k) * ((k + 1.0) - e2) / k).abs() < 1e-15);
        assert!(lhs >= rhs);
        assert!(coercivity_bound_check(&q, &[3.0, 0.0, 0.0, 0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn coercivity_bound_fails_for_large_alpha_at_zero() {
        // rhs = α β² / (4e² - 2β) grows linearly while lhs stays 1.
        let q = synth::unit_grid(5);
        let (lhs, rhs) = coercivity_bound_check(&q, &[0.0; 5], 30.0).unwrap();
        assert_eq!(lhs, 1.0);
        assert!(rhs > lhs);
    }

    proptest! {
        #[test]
        fn coercivity_bound_holds_for_unit_alpha(
            y in prop::collection::vec(-1.0f64..1.0, 6),
            alpha in 1e-6f64..1.0,
        ) {
            let q = synth::unit_grid(6);
            let (lhs, rhs) = coercivity_bound_check(&q, &y, alpha).unwrap();
            prop_assert!(lhs >= rhs);
        }
    }
}
