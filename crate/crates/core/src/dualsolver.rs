//! The finite exponential program
//!
//! ```text
//! minimize g(β) = ∫ exp(Σ_i β_i v_i) dQ   over β ≥ 0
//! ```
//!
//! over a fixed list of representatives `v_i`, and the map from its solution
//! to the projected density `p ∝ e^y`.
//!
//! The solver works with `L = log g`, which has the same minimizers on the
//! orthant and whose gradient `E_π[v_i]` (with the tilted probabilities
//! `π_j ∝ q_j e^{y_j}`) stays well scaled. Each iteration first tries a
//! damped projected Newton step on the coordinates that are not held at zero
//! (Hessian `Cov_π(v)`, which is singular when representatives are
//! redundant), and falls back to a projected Barzilai-Borwein step. Both use
//! monotone Armijo backtracking along the projection arc; the decrease
//! `L(β + Δβ) - L(β) = log Σ_j π_j e^{Δy_j}` is evaluated through
//! `log1p`/`expm1` so that tiny improvements near the optimum are not lost.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, invalid, Result};
use crate::measure::{kl_divergence, DensityVector, DiscreteMeasure};
use crate::numeric::{compensated_sum, log_sum_exp, Compensated};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Threshold on `‖β - max(0, β - ∇g(β))‖_∞`.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Any `β_i` above this stops the solver as divergent.
    pub beta_cap: f64,
    pub armijo_c: f64,
    pub backtrack: f64,
    /// Keep the objective value of every accepted iterate.
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-10,
            max_iter: 50_000,
            beta_cap: 1e3,
            armijo_c: 1e-4,
            backtrack: 0.5,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.grad_tol > 0.0
            && self.max_iter > 0
            && self.beta_cap > 0.0
            && self.armijo_c > 0.0
            && self.armijo_c < 1.0
            && self.backtrack > 0.0
            && self.backtrack < 1.0;
        if ok {
            Ok(())
        } else {
            Err(invalid("solver tolerances must be positive (Armijo constants in (0,1))"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    /// Some coefficient exceeded `beta_cap`: the program is likely not
    /// coercive (no strictly positive region shared by the members).
    BetaCapExceeded,
    /// The line search could not make progress before reaching tolerance.
    Stalled,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualSolution {
    pub beta: Vec<f64>,
    /// `Σ_i β_i`.
    pub alpha: f64,
    /// `β / α`, or uniform when `α = 0`.
    pub mu: Vec<f64>,
    /// `y = Σ_i β_i v_i` at the atoms.
    pub y: Vec<f64>,
    /// `∫ e^y dQ`.
    pub value: f64,
    pub log_value: f64,
    /// Projected-gradient residual at exit.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: SolverStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

fn check_reps(q: &DiscreteMeasure, reps: &[Vec<f64>]) -> Result<()> {
    if reps.is_empty() {
        return Err(invalid("at least one representative is required"));
    }
    for (i, v) in reps.iter().enumerate() {
        ensure_len(q.len(), v.len())?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(invalid(format!("representative {i} has a non-finite value")));
        }
    }
    Ok(())
}

fn check_beta(reps: &[Vec<f64>], beta: &[f64]) -> Result<()> {
    ensure_len(reps.len(), beta.len())?;
    if beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(invalid("β must be finite and nonnegative"));
    }
    Ok(())
}

/// `y_j = Σ_i β_i v_ij`.
pub fn combine(reps: &[Vec<f64>], beta: &[f64], n: usize) -> Vec<f64> {
    let mut acc = vec![Compensated::new(); n];
    for (v, &b) in reps.iter().zip(beta) {
        if b == 0.0 {
            continue;
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            a.add(b * x);
        }
    }
    acc.iter().map(|a| a.value()).collect()
}

fn log_weights(q: &DiscreteMeasure) -> Vec<f64> {
    q.weights().iter().map(|&w| if w > 0.0 { w.ln() } else { f64::NEG_INFINITY }).collect()
}

fn log_value_of(logq: &[f64], y: &[f64]) -> f64 {
    let a: Vec<f64> = logq.iter().zip(y).map(|(l, y)| l + y).collect();
    log_sum_exp(&a)
}

/// `log ∫ e^y dQ` for arbitrary finite `y`.
pub fn log_integral_exp(q: &DiscreteMeasure, y: &[f64]) -> Result<f64> {
    ensure_len(q.len(), y.len())?;
    Ok(log_value_of(&log_weights(q), y))
}

/// `log g(β)`, evaluated without overflow.
pub fn log_objective(q: &DiscreteMeasure, reps: &[Vec<f64>], beta: &[f64]) -> Result<f64> {
    check_reps(q, reps)?;
    check_beta(reps, beta)?;
    Ok(log_value_of(&log_weights(q), &combine(reps, beta, q.len())))
}

/// `g(β) = ∫ exp(Σ_i β_i v_i) dQ`; `+∞` signals overflow.
pub fn objective(q: &DiscreteMeasure, reps: &[Vec<f64>], beta: &[f64]) -> Result<f64> {
    Ok(log_objective(q, reps, beta)?.exp())
}

/// `∂g/∂β_i = ∫ v_i exp(Σ_k β_k v_k) dQ`.
pub fn gradient(q: &DiscreteMeasure, reps: &[Vec<f64>], beta: &[f64]) -> Result<Vec<f64>> {
    check_reps(q, reps)?;
    check_beta(reps, beta)?;
    let state = State::new(&log_weights(q), reps, beta.to_vec());
    let g = state.log_value.exp();
    Ok(state.ghat.iter().map(|x| g * x).collect())
}

struct State {
    beta: Vec<f64>,
    y: Vec<f64>,
    log_value: f64,
    pi: Vec<f64>,
    /// `E_π[v_i] = ∇_i log g`.
    ghat: Vec<f64>,
}

impl State {
    fn new(logq: &[f64], reps: &[Vec<f64>], beta: Vec<f64>) -> Self {
        let y = combine(reps, &beta, logq.len());
        Self::from_y(logq, reps, beta, y)
    }

    fn from_y(logq: &[f64], reps: &[Vec<f64>], beta: Vec<f64>, y: Vec<f64>) -> Self {
        let log_value = log_value_of(logq, &y);
        let pi: Vec<f64> = logq
            .iter()
            .zip(&y)
            .map(|(l, y)| if *l == f64::NEG_INFINITY { 0.0 } else { (l + y - log_value).exp() })
            .collect();
        let ghat = reps
            .iter()
            .map(|v| compensated_sum(v.iter().zip(&pi).map(|(v, p)| v * p)))
            .collect();
        Self { beta, y, log_value, pi, ghat }
    }

    /// `‖β - max(0, β - ∇g)‖_∞` with the true gradient `∇g = g·E_π[v]`.
    fn residual(&self) -> f64 {
        let g = self.log_value.exp();
        self.beta
            .iter()
            .zip(&self.ghat)
            .map(|(&b, &gh)| (b - (b - g * gh).max(0.0)).abs())
            .fold(0.0, f64::max)
    }
}

/// Solves the finite program from `β = 0`.
pub fn solve_finite_program(q: &DiscreteMeasure, reps: &[Vec<f64>], config: &SolverConfig) -> Result<DualSolution> {
    solve_from(q, reps, config, &vec![0.0; reps.len()])
}

/// Solves the finite program from the feasible start `beta0`.
pub fn solve_from(
    q: &DiscreteMeasure,
    reps: &[Vec<f64>],
    config: &SolverConfig,
    beta0: &[f64],
) -> Result<DualSolution> {
    config.validate()?;
    check_reps(q, reps)?;
    check_beta(reps, beta0)?;
    let logq = log_weights(q);
    let m = reps.len();

    let mut state = State::new(&logq, reps, beta0.to_vec());
    let mut trace = Vec::new();
    if config.record_trace {
        trace.push(state.log_value.exp());
    }
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut iterations = 0;
    let mut status = SolverStatus::MaxIterations;

    while iterations < config.max_iter {
        if state.residual() <= config.grad_tol {
            status = SolverStatus::Converged;
            break;
        }
        if m <= NEWTON_MAX_FREE {
            if let Some(trial) = newton_trial(&state, reps, config) {
                let old = std::mem::replace(&mut state, State::new(&logq, reps, trial));
                prev = Some((old.beta, old.ghat));
                iterations += 1;
                if config.record_trace {
                    trace.push(state.log_value.exp());
                }
                if state.beta.iter().any(|&b| b > config.beta_cap) {
                    status = SolverStatus::BetaCapExceeded;
                    log::warn!(
                        "dual coefficients exceeded {} after {iterations} iterations; the program may not be coercive",
                        config.beta_cap
                    );
                    break;
                }
                continue;
            }
        }
        let mut step = match &prev {
            Some((b_old, g_old)) => {
                let mut ss = Compensated::new();
                let mut sd = Compensated::new();
                for i in 0..m {
                    let s = state.beta[i] - b_old[i];
                    let d = state.ghat[i] - g_old[i];
                    ss.add(s * s);
                    sd.add(s * d);
                }
                let (ss, sd) = (ss.value(), sd.value());
                if sd > 0.0 && ss > 0.0 {
                    ss / sd
                } else {
                    curvature_step(&state, reps)
                }
            }
            None => curvature_step(&state, reps),
        }
        .clamp(1e-12, 1e12);

        let mut accepted = None;
        for _ in 0..200 {
            let trial: Vec<f64> = state
                .beta
                .iter()
                .zip(&state.ghat)
                .map(|(&b, &g)| (b - step * g).max(0.0))
                .collect();
            let delta: Vec<f64> = trial.iter().zip(&state.beta).map(|(t, b)| t - b).collect();
            let predicted = compensated_sum(delta.iter().zip(&state.ghat).map(|(d, g)| d * g));
            if predicted == 0.0 {
                break;
            }
            let dy = combine(reps, &delta, q.len());
            let change = compensated_sum(
                state
                    .pi
                    .iter()
                    .zip(&dy)
                    .filter(|(p, _)| **p > 0.0)
                    .map(|(p, d)| p * d.exp_m1()),
            )
            .ln_1p();
            if change.is_finite() && change <= config.armijo_c * predicted {
                accepted = Some(trial);
                break;
            }
            step *= config.backtrack;
        }

        let Some(trial) = accepted else {
            status = SolverStatus::Stalled;
            break;
        };
        let old = std::mem::replace(&mut state, State::new(&logq, reps, trial));
        prev = Some((old.beta, old.ghat));
        iterations += 1;
        if config.record_trace {
            trace.push(state.log_value.exp());
        }
        if state.beta.iter().any(|&b| b > config.beta_cap) {
            status = SolverStatus::BetaCapExceeded;
            log::warn!(
                "dual coefficients exceeded {} after {iterations} iterations; the program may not be coercive",
                config.beta_cap
            );
            break;
        }
    }
    if status == SolverStatus::MaxIterations && state.residual() <= config.grad_tol {
        status = SolverStatus::Converged;
    }
    let residual = state.residual();
    if status == SolverStatus::Stalled && residual <= config.grad_tol {
        status = SolverStatus::Converged;
    }

    let alpha = compensated_sum(state.beta.iter().copied());
    let mu = if alpha > 0.0 {
        state.beta.iter().map(|b| b / alpha).collect()
    } else {
        vec![1.0 / m as f64; m]
    };
    Ok(DualSolution {
        alpha,
        mu,
        value: state.log_value.exp(),
        log_value: state.log_value,
        residual,
        iterations,
        converged: status == SolverStatus::Converged,
        status,
        trace,
        y: state.y,
        beta: state.beta,
    })
}

/// Reciprocal of the largest diagonal entry `E_π[v_i²]` of the Hessian bound.
const NEWTON_MAX_FREE: usize = 600;

/// Armijo decrease `L(β + Δβ) - L(β)` as `log Σ_j π_j e^{Δy_j}`.
fn log_change(state: &State, reps: &[Vec<f64>], delta: &[f64]) -> f64 {
    let dy = combine(reps, delta, state.pi.len());
    compensated_sum(
        state
            .pi
            .iter()
            .zip(&dy)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, d)| p * d.exp_m1()),
    )
    .ln_1p()
}

/// One projected Newton step with an ε-active set, or `None` if the
/// direction does not yield an Armijo decrease.
fn newton_trial(state: &State, reps: &[Vec<f64>], config: &SolverConfig) -> Option<Vec<f64>> {
    let m = reps.len();
    let w = state
        .beta
        .iter()
        .zip(&state.ghat)
        .map(|(&b, &g)| (b - (b - g).max(0.0)).abs())
        .fold(0.0, f64::max);
    let eps_a = w.min(1e-3);
    let free: Vec<usize> = (0..m)
        .filter(|&i| !(state.beta[i] <= eps_a && state.ghat[i] > 0.0))
        .collect();
    if free.is_empty() {
        return None;
    }
    let k = free.len();
    let support: Vec<usize> = (0..state.pi.len()).filter(|&j| state.pi[j] > 0.0).collect();
    let centered: Vec<Vec<f64>> = free
        .iter()
        .map(|&i| support.iter().map(|&j| (reps[i][j] - state.ghat[i]) * state.pi[j].sqrt()).collect())
        .collect();
    let mut h = nalgebra::DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for b in 0..=a {
            let x = compensated_sum(centered[a].iter().zip(&centered[b]).map(|(u, v)| u * v));
            h[(a, b)] = x;
            h[(b, a)] = x;
        }
    }
    let gnorm = free.iter().map(|&i| state.ghat[i].abs()).fold(0.0, f64::max);
    let max_diag = (0..k).map(|a| h[(a, a)]).fold(0.0, f64::max);
    let mu = gnorm.min(1.0) + 1e-12 * max_diag.max(1e-300);
    for a in 0..k {
        h[(a, a)] += mu;
    }
    let rhs = nalgebra::DVector::from_iterator(k, free.iter().map(|&i| -state.ghat[i]));
    let d_free = h.cholesky()?.solve(&rhs);
    if d_free.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let mut dir: Vec<f64> = state.ghat.iter().map(|g| -g).collect();
    for (a, &i) in free.iter().enumerate() {
        dir[i] = d_free[a];
    }

    let mut t = 1.0;
    for _ in 0..40 {
        let trial: Vec<f64> = state.beta.iter().zip(&dir).map(|(&b, &d)| (b + t * d).max(0.0)).collect();
        let delta: Vec<f64> = trial.iter().zip(&state.beta).map(|(t, b)| t - b).collect();
        let predicted = compensated_sum(delta.iter().zip(&state.ghat).map(|(d, g)| d * g));
        if !(predicted < 0.0) {
            return None;
        }
        let change = log_change(state, reps, &delta);
        if change.is_finite() && change <= config.armijo_c * predicted {
            return Some(trial);
        }
        t *= config.backtrack;
    }
    None
}

fn curvature_step(state: &State, reps: &[Vec<f64>]) -> f64 {
    let h = reps
        .iter()
        .map(|v| compensated_sum(v.iter().zip(&state.pi).map(|(v, p)| v * v * p)))
        .fold(0.0, f64::max);
    if h > 0.0 {
        1.0 / h
    } else {
        1.0
    }
}

/// `p_j = e^{y_j} / ∫ e^y dQ`. Entries equal to `-∞` get zero density.
pub fn density_from_dual(q: &DiscreteMeasure, y: &[f64]) -> Result<DensityVector> {
    ensure_len(q.len(), y.len())?;
    if y.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(invalid("dual variable must be finite or -inf"));
    }
    let log_value = log_value_of(&log_weights(q), y);
    if !log_value.is_finite() {
        return Err(invalid("dual variable puts no mass on the support"));
    }
    let values = y.iter().map(|&v| (v - log_value).exp()).collect();
    Ok(DensityVector::from_values_unchecked(values))
}

/// `|m(p) + log value|`, zero at an exact primal-dual pair.
pub fn duality_gap(q: &DiscreteMeasure, p: &DensityVector, value: f64) -> Result<f64> {
    if !(value > 0.0 && value.is_finite()) {
        return Err(invalid(format!("dual value must be positive and finite, got {value}")));
    }
    Ok((kl_divergence(p, q)? + value.ln()).abs())
}
