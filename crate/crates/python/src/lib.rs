//! Python bindings: `import iproject_py`.

use iproject::driver::{geometric_schedule, stage_partition};
use iproject::io::{self, PartitionReport};
use iproject::oracle::{self, HalfspaceConstraint};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: iproject::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Finitely supported reference distribution.
#[pyclass(name = "DiscreteMeasure", frozen)]
struct PyMeasure {
    inner: iproject::DiscreteMeasure,
}

#[pymethods]
impl PyMeasure {
    /// Atoms (one list of coordinates each) and nonnegative weights; the
    /// weights are renormalized and duplicate atoms merged.
    #[new]
    fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: iproject::DiscreteMeasure::new(atoms, weights).map_err(err)? })
    }

    #[staticmethod]
    fn uniform(atoms: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: iproject::DiscreteMeasure::uniform(atoms).map_err(err)? })
    }

    /// Reads a `w,x1,...` CSV file.
    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(Self { inner: io::read_atoms_csv(path).map_err(err)? })
    }

    #[getter]
    fn atoms(&self) -> Vec<Vec<f64>> {
        self.inner.atoms().to_vec()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("DiscreteMeasure(atoms={}, dim={})", self.inner.len(), self.inner.dim())
    }
}

/// A family of moment restrictions `∫ f_γ dP ≤ 0`.
#[pyclass(name = "MomentFamily", frozen)]
struct PyFamily {
    inner: iproject::MomentFamily,
}

fn cdf_from(knots: Option<Vec<(f64, f64)>>) -> PyResult<iproject::Cdf> {
    Ok(match knots {
        None => iproject::Cdf::Uniform,
        Some(k) => iproject::Cdf::Step(iproject::StepCdf::new(k).map_err(err)?),
    })
}

#[pymethods]
impl PyFamily {
    /// `P(X1 ≤ γ) ≥ P(X2 ≤ γ)` for `γ ∈ [lower, upper]`.
    #[staticmethod]
    fn unconditional_fsd(lower: f64, upper: f64) -> PyResult<Self> {
        Ok(Self { inner: iproject::MomentFamily::unconditional_fsd(lower, upper).map_err(err)? })
    }

    /// Dominance on every instrument cube of level at most `r_max`.
    #[staticmethod]
    #[pyo3(signature = (lower, upper, d_z, r_max = 4))]
    fn conditional_fsd(lower: f64, upper: f64, d_z: usize, r_max: u32) -> PyResult<Self> {
        Ok(Self { inner: iproject::MomentFamily::conditional_fsd(lower, upper, d_z, r_max).map_err(err)? })
    }

    /// `P(X ≤ γ) ≤ G(γ)` on `[0, upper]`; `knots=None` is the uniform CDF,
    /// otherwise `[(location, cumulative), ...]` of a step CDF.
    #[staticmethod]
    #[pyo3(signature = (upper, knots = None))]
    fn marginal_given_g(upper: f64, knots: Option<Vec<(f64, f64)>>) -> PyResult<Self> {
        Ok(Self { inner: iproject::MomentFamily::marginal_given_g(upper, cdf_from(knots)?).map_err(err)? })
    }

    /// Finite family of functions `f_k` tabulated on `support`.
    #[staticmethod]
    fn custom(support: Vec<Vec<f64>>, f_members: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: iproject::MomentFamily::custom(support, f_members).map_err(err)? })
    }

    /// Family JSON as accepted by the command-line tool.
    #[staticmethod]
    fn from_json(text: &str, q: &PyMeasure) -> PyResult<Self> {
        let spec = io::parse_family_json(text).map_err(err)?;
        Ok(Self { inner: spec.build(&q.inner).map_err(err)? })
    }

    /// `∫ f_γ dQ` over the verification grid of `q`.
    #[pyo3(signature = (q, resolution = 100))]
    fn grid_means(&self, q: &PyMeasure, resolution: usize) -> PyResult<Vec<f64>> {
        let grid = self.inner.index_grid(&q.inner, resolution);
        grid.iter()
            .map(|g| self.inner.family_mean(g, &q.inner).map(|m| -m).map_err(err))
            .collect()
    }
}

/// Output of [`project`].
#[pyclass(name = "ProjectionResult", frozen)]
struct PyResultObj {
    inner: iproject::ProjectionResult,
}

#[pymethods]
impl PyResultObj {
    /// Density `dP/dQ` per atom.
    #[getter]
    fn density(&self) -> Vec<f64> {
        self.inner.density.values().to_vec()
    }

    #[getter]
    fn kl(&self) -> f64 {
        self.inner.kl
    }

    #[getter]
    fn value(&self) -> f64 {
        self.inner.value
    }

    #[getter]
    fn duality_gap(&self) -> f64 {
        self.inner.duality_gap
    }

    #[getter]
    fn max_slack(&self) -> f64 {
        self.inner.max_slack
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    /// `(epsilon, cells, value, iterations, duality_gap)` per stage.
    #[getter]
    fn stages(&self) -> Vec<(f64, usize, f64, usize, f64)> {
        self.inner
            .stages
            .iter()
            .map(|s| (s.epsilon, s.cells, s.value, s.iterations, s.duality_gap))
            .collect()
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    fn to_json(&self) -> PyResult<String> {
        io::to_json_string(&self.inner).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ProjectionResult(kl={:.6e}, converged={}, stages={})",
            self.inner.kl,
            self.inner.converged,
            self.inner.stages.len()
        )
    }
}

/// I-projection of `q` onto the family along the schedule
/// `eps0 · decay^m`, `m < stages`.
#[pyfunction]
#[pyo3(signature = (q, family, eps0 = 0.5, decay = 0.5, stages = 12, value_tol = 1e-10, binding_tol = 1e-6, resolution = 100))]
#[allow(clippy::too_many_arguments)]
fn project(
    q: &PyMeasure,
    family: &PyFamily,
    eps0: f64,
    decay: f64,
    stages: usize,
    value_tol: f64,
    binding_tol: f64,
    resolution: usize,
) -> PyResult<PyResultObj> {
    let opts = iproject::ProjectOptions {
        schedule: geometric_schedule(eps0, decay, stages),
        value_tol,
        binding_tol,
        resolution,
        ..Default::default()
    };
    let inner = iproject::project(&q.inner, &family.inner, &opts).map_err(err)?;
    Ok(PyResultObj { inner })
}

/// Partition at accuracy `epsilon`, as JSON.
#[pyfunction]
#[pyo3(signature = (q, family, epsilon, resolution = 100))]
fn partition(q: &PyMeasure, family: &PyFamily, epsilon: f64, resolution: usize) -> PyResult<String> {
    let p = stage_partition(&q.inner, &family.inner, epsilon, resolution).map_err(err)?;
    io::to_json_string(&PartitionReport::from(&p)).map_err(err)
}

/// `KL(P‖Q)` for the density `dP/dQ`.
#[pyfunction]
fn kl_divergence(density: Vec<f64>, q: &PyMeasure) -> PyResult<f64> {
    let p = iproject::DensityVector::new(density, &q.inner).map_err(err)?;
    iproject::kl_divergence(&p, &q.inner).map_err(err)
}

/// Reference projection onto `∫ v_i p dQ ≥ 0`; returns `(density, kl, converged)`.
#[pyfunction]
#[pyo3(signature = (q, constraints, tol = 1e-12, max_iter = 100_000))]
fn bregman_dykstra(q: &PyMeasure, constraints: Vec<Vec<f64>>, tol: f64, max_iter: usize) -> PyResult<(Vec<f64>, f64, bool)> {
    let cons: Vec<HalfspaceConstraint> = constraints
        .into_iter()
        .map(HalfspaceConstraint::new)
        .collect::<iproject::Result<_>>()
        .map_err(err)?;
    let o = oracle::bregman_dykstra(&q.inner, &cons, tol, max_iter).map_err(err)?;
    Ok((o.density.values().to_vec(), o.kl, o.converged))
}

/// Closed form for the marginal order with `upper = 1`; returns
/// `(ratio, isotonic)`, both per atom.
#[pyfunction]
#[pyo3(signature = (q, knots = None))]
fn pava_closed_form(q: &PyMeasure, knots: Option<Vec<(f64, f64)>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let r = oracle::pava_closed_form(&q.inner, &cdf_from(knots)?).map_err(err)?;
    Ok((r.ratio, r.isotonic))
}

#[pymodule]
fn iproject_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMeasure>()?;
    m.add_class::<PyFamily>()?;
    m.add_class::<PyResultObj>()?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(bregman_dykstra, m)?)?;
    m.add_function(wrap_pyfunction!(pava_closed_form, m)?)?;
    Ok(())
}
