use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use iproject::driver::{geometric_schedule, stage_partition, AssumptionReport};
use iproject::io::{self, CdfSpec, FamilySpec, PartitionReport};
use iproject::measure::l1_distance;
use iproject::oracle::{
    bregman_dykstra, cyclic_descent_two_marginals, pava_closed_form, two_marginal_constraints, HalfspaceConstraint,
};
use iproject::{
    check_assumptions, kl_divergence, project, synth, verify_constraints, DensityVector, DiscreteMeasure, FamilyKind,
    MomentFamily, MomentIndex, ProjectOptions, ProjectionResult,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum-KL projection of a discrete distribution onto moment inequality sets.
#[derive(Parser)]
#[command(name = "iproject", version)]
struct Cli {
    /// Worker threads for partition building and member evaluation.
    #[arg(long, global = true, env = "IPROJECT_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the refinement schedule and write the projected density.
    Project {
        #[command(flatten)]
        run: RunArgs,
        /// CSV convergence trace (one row per stage).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Build the partition used at a single accuracy.
    Partition {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        epsilon: f64,
    },
    /// Check a result file's density against the family on the verification grid.
    Verify {
        #[command(flatten)]
        run: RunArgs,
        /// Result JSON written by `project`.
        #[arg(long)]
        result: PathBuf,
    },
    /// Run a reference solver next to the scheme.
    Oracle {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = OracleMethod::Dykstra)]
        method: OracleMethod,
        /// `{"g1": ..., "g2": ...}` marginal CDFs for `--method cyclic`.
        #[arg(long)]
        marginals: Option<PathBuf>,
    },
    /// Scheme against Bregman-Dykstra on the verification grid.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        /// Largest admissible |value_scheme - value_oracle|.
        #[arg(long, default_value_t = 1e-4)]
        gap_tol: f64,
        #[arg(long, default_value_t = 500)]
        max_atoms: usize,
        #[arg(long, default_value_t = 200)]
        max_constraints: usize,
    },
    /// Write a seeded synthetic instance.
    Gen {
        #[arg(long, value_enum)]
        kind: GenKind,
        #[arg(long, default_value_t = 50)]
        n: usize,
        /// Exponent applied to the second coordinate (dominance instances).
        #[arg(long, default_value_t = 1.5)]
        power: f64,
        #[arg(long, default_value_t = 1)]
        d_z: usize,
        /// Jumps of the generated CDF (marginal instances).
        #[arg(long, default_value_t = 10)]
        knots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add an atom at (0, 1) so that every dominance constraint is
        /// strictly satisfiable (needed by the reference solvers).
        #[arg(long)]
        interior: bool,
        /// Atoms CSV to write.
        #[arg(long)]
        output: PathBuf,
        /// Matching family JSON to write.
        #[arg(long)]
        family_out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleMethod {
    Dykstra,
    Pava,
    Cyclic,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Fsd,
    Conditional,
    Marginal,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Atoms CSV (`w,x1,...`).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Family JSON.
    #[arg(long)]
    family: Option<PathBuf>,
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    value_tol: Option<f64>,
    #[arg(long)]
    grad_tol: Option<f64>,
    #[arg(long)]
    binding_tol: Option<f64>,
    /// Verification grid resolution.
    #[arg(long)]
    resolution: Option<usize>,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// JSON file with the same fields; its values override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Settings of one run. Every field is optional in the config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    input: Option<PathBuf>,
    family: Option<PathBuf>,
    eps0: Option<f64>,
    decay: Option<f64>,
    stages: Option<usize>,
    value_tol: Option<f64>,
    grad_tol: Option<f64>,
    binding_tol: Option<f64>,
    resolution: Option<usize>,
    output: Option<PathBuf>,
}

struct Run {
    q: DiscreteMeasure,
    family: MomentFamily,
    options: ProjectOptions,
    output: Option<PathBuf>,
}

impl RunArgs {
    fn merged(&self) -> Result<RunConfig> {
        let mut c = RunConfig {
            input: self.input.clone(),
            family: self.family.clone(),
            eps0: self.eps0,
            decay: self.decay,
            stages: self.stages,
            value_tol: self.value_tol,
            grad_tol: self.grad_tol,
            binding_tol: self.binding_tol,
            resolution: self.resolution,
            output: self.output.clone(),
        };
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let f: RunConfig = serde_json::from_str(&text)
                .map_err(|e| anyhow!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))?;
            macro_rules! take {
                ($($field:ident),*) => { $(if f.$field.is_some() { c.$field = f.$field; })* };
            }
            take!(input, family, eps0, decay, stages, value_tol, grad_tol, binding_tol, resolution, output);
        }
        Ok(c)
    }

    fn load(&self) -> Result<Run> {
        let c = self.merged()?;
        let input = c.input.ok_or_else(|| anyhow!("--input is required"))?;
        let family_path = c.family.ok_or_else(|| anyhow!("--family is required"))?;
        let q = io::read_atoms_csv(&input).with_context(|| format!("reading {}", input.display()))?;
        let spec = io::read_family_json(&family_path).with_context(|| format!("reading {}", family_path.display()))?;
        let family = spec.build(&q)?;
        family.check_measure(&q)?;

        let mut options = ProjectOptions::default();
        let eps0 = c.eps0.unwrap_or(0.5);
        let decay = c.decay.unwrap_or(0.5);
        let stages = c.stages.unwrap_or(12);
        if !(decay > 0.0 && decay < 1.0) {
            bail!("decay must lie in (0, 1), got {decay}");
        }
        options.schedule = geometric_schedule(eps0, decay, stages);
        if let Some(v) = c.value_tol {
            options.value_tol = v;
        }
        if let Some(v) = c.grad_tol {
            options.solver.grad_tol = v;
        }
        if let Some(v) = c.binding_tol {
            options.binding_tol = v;
        }
        if let Some(v) = c.resolution {
            options.resolution = v;
        }
        options.validate()?;
        Ok(Run { q, family, options, output: c.output })
    }
}

fn emit<T: Serialize>(output: Option<&Path>, value: &T) -> Result<()> {
    let text = io::to_json_string(value)?;
    match output {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct ProjectOutput<'a> {
    #[serde(flatten)]
    result: &'a ProjectionResult,
    assumptions: AssumptionReport,
}

#[derive(Serialize)]
struct VerifyOutput {
    kl: f64,
    max_slack: f64,
    argmax: Option<MomentIndex>,
    binding_set: Vec<MomentIndex>,
    feasible: bool,
    grid_size: usize,
}

#[derive(Serialize)]
struct Comparison {
    method: &'static str,
    scheme_kl: f64,
    oracle_kl: f64,
    scheme_value: f64,
    oracle_value: f64,
    value_gap: f64,
    density_l1: f64,
    scheme_converged: bool,
    oracle_converged: bool,
    constraints: usize,
}

/// Exit status for a run that completed but did not meet its tolerance.
const NOT_CONVERGED: u8 = 2;

fn cmd_project(run: &RunArgs, trace: Option<&Path>) -> Result<u8> {
    let r = run.load()?;
    let result = project(&r.q, &r.family, &r.options)?;
    let grid = r.family.index_grid(&r.q, r.options.resolution);
    let assumptions = check_assumptions(&r.q, &r.family, &grid, 1.0)?;
    emit(r.output.as_deref(), &ProjectOutput { result: &result, assumptions })?;
    if let Some(path) = trace {
        std::fs::write(path, io::trace_csv(&result.stages)).with_context(|| format!("writing {}", path.display()))?;
    }
    if !result.converged {
        log::warn!("the schedule ended before the stage values settled");
        return Ok(NOT_CONVERGED);
    }
    Ok(0)
}

fn cmd_partition(run: &RunArgs, epsilon: f64) -> Result<u8> {
    let r = run.load()?;
    let p = stage_partition(&r.q, &r.family, epsilon, r.options.resolution)?;
    emit(r.output.as_deref(), &PartitionReport::from(&p))?;
    Ok(0)
}

fn cmd_verify(run: &RunArgs, result: &Path) -> Result<u8> {
    let r = run.load()?;
    let saved = io::read_result_json(result).with_context(|| format!("reading {}", result.display()))?;
    let p = DensityVector::new(saved.density.values().to_vec(), &r.q)?;
    let grid = r.family.index_grid(&r.q, r.options.resolution);
    let v = verify_constraints(&p, &r.family, &r.q, &grid, r.options.binding_tol)?;
    let out = VerifyOutput {
        kl: kl_divergence(&p, &r.q)?,
        max_slack: v.max_slack,
        argmax: v.argmax,
        binding_set: v.binding_set,
        feasible: v.max_slack <= r.options.binding_tol,
        grid_size: grid.len(),
    };
    emit(r.output.as_deref(), &out)?;
    Ok(if out.feasible { 0 } else { NOT_CONVERGED })
}

fn grid_constraints(run: &Run) -> Result<Vec<HalfspaceConstraint>> {
    let grid = run.family.index_grid(&run.q, run.options.resolution);
    Ok(run
        .family
        .values_matrix(&grid, &run.q)?
        .into_iter()
        .map(|v| HalfspaceConstraint { v })
        .collect())
}

fn comparison(
    method: &'static str,
    q: &DiscreteMeasure,
    scheme: &ProjectionResult,
    oracle_density: &[f64],
    oracle_kl: f64,
    oracle_converged: bool,
    constraints: usize,
) -> Result<Comparison> {
    let oracle_value = (-oracle_kl).exp();
    Ok(Comparison {
        method,
        scheme_kl: scheme.kl,
        oracle_kl,
        scheme_value: scheme.value,
        oracle_value,
        value_gap: (scheme.value - oracle_value).abs(),
        density_l1: l1_distance(scheme.density.values(), oracle_density, q)?,
        scheme_converged: scheme.converged,
        oracle_converged,
        constraints,
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Marginals {
    g1: CdfSpec,
    g2: CdfSpec,
}

fn cmd_oracle(run: &RunArgs, method: OracleMethod, marginals: Option<&Path>) -> Result<u8> {
    let out = match method {
        OracleMethod::Dykstra => {
            let r = run.load()?;
            let cons = grid_constraints(&r)?;
            let scheme = project(&r.q, &r.family, &r.options)?;
            let o = bregman_dykstra(&r.q, &cons, 1e-12, 100_000)?;
            comparison("dykstra", &r.q, &scheme, o.density.values(), o.kl, o.converged, cons.len())?
        }
        OracleMethod::Pava => {
            let r = run.load()?;
            let FamilyKind::MarginalGivenG { upper, cdf } = r.family.kind() else {
                bail!("--method pava needs a marginal_given_g family");
            };
            if *upper != 1.0 {
                bail!("--method pava needs upper = 1, got {upper}");
            }
            let pava = pava_closed_form(&r.q, cdf)?;
            let scheme = project(&r.q, &r.family, &r.options)?;
            let p = DensityVector::from_masses(
                &pava.isotonic.iter().zip(r.q.weights()).map(|(d, w)| d * w).collect::<Vec<_>>(),
                &r.q,
            )?;
            let kl = kl_divergence(&p, &r.q)?;
            comparison("pava", &r.q, &scheme, p.values(), kl, true, 0)?
        }
        OracleMethod::Cyclic => {
            let c = run.merged()?;
            let input = c.input.ok_or_else(|| anyhow!("--input is required"))?;
            let path = marginals.ok_or_else(|| anyhow!("--method cyclic needs --marginals"))?;
            let q = io::read_atoms_csv(&input).with_context(|| format!("reading {}", input.display()))?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let m: Marginals = serde_json::from_str(&text)
                .map_err(|e| anyhow!("{}: line {}, column {}: {e}", path.display(), e.line(), e.column()))?;
            let (g1, g2) = (m.g1.build()?, m.g2.build()?);
            let cyc = cyclic_descent_two_marginals(&q, &g1, &g2, 1e-12, 10_000)?;
            // The scheme sees the same finite constraint list as a custom family.
            let cons = two_marginal_constraints(&q, &g1, &g2)?;
            let f: Vec<Vec<f64>> = cons.iter().map(|c| c.v.iter().map(|x| -x).collect()).collect();
            let family = MomentFamily::custom(q.atoms().to_vec(), f)?;
            let options = ProjectOptions { schedule: geometric_schedule(c.eps0.unwrap_or(0.5), 0.5, 12), ..Default::default() };
            let scheme = project(&q, &family, &options)?;
            let e: Vec<f64> = cyc.y.iter().map(|y| y.exp()).collect();
            let p = DensityVector::from_masses(&e.iter().zip(q.weights()).map(|(a, w)| a * w).collect::<Vec<_>>(), &q)?;
            let kl = kl_divergence(&p, &q)?;
            let out = comparison("cyclic", &q, &scheme, p.values(), kl, cyc.converged, cons.len())?;
            emit(c.output.as_deref(), &out)?;
            return Ok(if out.oracle_converged { 0 } else { NOT_CONVERGED });
        }
    };
    emit(run.merged()?.output.as_deref(), &out)?;
    Ok(if out.oracle_converged { 0 } else { NOT_CONVERGED })
}

fn cmd_compare(run: &RunArgs, gap_tol: f64, max_atoms: usize, max_constraints: usize) -> Result<u8> {
    let r = run.load()?;
    if r.q.len() > max_atoms {
        bail!("{} atoms exceed the oracle limit of {max_atoms} (see --max-atoms)", r.q.len());
    }
    let cons = grid_constraints(&r)?;
    if cons.len() > max_constraints {
        bail!("{} constraints exceed the oracle limit of {max_constraints} (see --max-constraints)", cons.len());
    }
    let scheme = project(&r.q, &r.family, &r.options)?;
    let o = bregman_dykstra(&r.q, &cons, 1e-12, 100_000)?;
    let out = comparison("dykstra", &r.q, &scheme, o.density.values(), o.kl, o.converged, cons.len())?;
    emit(r.output.as_deref(), &out)?;
    Ok(if out.oracle_converged && out.value_gap <= gap_tol { 0 } else { NOT_CONVERGED })
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    kind: GenKind,
    n: usize,
    power: f64,
    d_z: usize,
    knots: usize,
    seed: u64,
    interior: bool,
    output: &Path,
    family_out: Option<&Path>,
) -> Result<u8> {
    if n == 0 {
        bail!("--n must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, spec) = match kind {
        GenKind::Fsd => (
            synth::fsd_instance(&mut rng, n, power),
            FamilySpec::UnconditionalFsd { lower: 0.0, upper: 1.0, tail: None },
        ),
        GenKind::Conditional => (
            synth::conditional_instance(&mut rng, n, d_z, power),
            FamilySpec::ConditionalFsd { lower: 0.0, upper: 1.0, d_z, r_max: 4, tail: None },
        ),
        GenKind::Marginal => {
            let (q, cdf) = synth::marginal_instance(&mut rng, n, knots);
            let g = match cdf {
                iproject::Cdf::Step(s) => CdfSpec::Knots(s.knots().to_vec()),
                iproject::Cdf::Uniform => CdfSpec::Named("uniform".into()),
            };
            (q, FamilySpec::MarginalGivenG { upper: 1.0, g, tail: None })
        }
    };
    let q = if interior && !matches!(kind, GenKind::Marginal) {
        let mut atoms = q.atoms().to_vec();
        let mut extra = vec![0.0, 1.0];
        extra.resize(q.dim(), 0.5);
        atoms.push(extra);
        DiscreteMeasure::uniform(atoms)?
    } else {
        q
    };
    io::write_atoms_csv(output, &q).with_context(|| format!("writing {}", output.display()))?;
    if let Some(path) = family_out {
        io::write_json(path, &spec).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(0)
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Project { run, trace } => cmd_project(run, trace.as_deref()),
        Command::Partition { run, epsilon } => cmd_partition(run, *epsilon),
        Command::Verify { run, result } => cmd_verify(run, result),
        Command::Oracle { run, method, marginals } => cmd_oracle(run, *method, marginals.as_deref()),
        Command::Compare { run, gap_tol, max_atoms, max_constraints } => {
            cmd_compare(run, *gap_tol, *max_atoms, *max_constraints)
        }
        Command::Gen { kind, n, power, d_z, knots, seed, interior, output, family_out } => {
            cmd_gen(*kind, *n, *power, *d_z, *knots, *seed, *interior, output, family_out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        log::warn!("could not size the thread pool: {e}");
    }
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
