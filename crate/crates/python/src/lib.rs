//! Python bindings: kernels, measures, MDPs, projections and the DP / TD
//! engines.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::mvdrl::dp::{self, EwpConfig};
use ::mvdrl::eval::{self, ScalarDist};
use ::mvdrl::kernels;
use ::mvdrl::mdp::{self as mdpmod, RngStream};
use ::mvdrl::projections;
use ::mvdrl::td::{self, TdConfig};
use ::mvdrl::{AtomSet, DiscreteMeasure, Error, KernelSpec, ReturnDistFn, SupportMap, TabularMdp};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numerical(_) | Error::SupportCapExceeded { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for ::mvdrl::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Energy-distance kernel `κ(y1, y2) = ½(ρ(y1,y0) + ρ(y2,y0) − ρ(y1,y2))`.
#[pyclass(name = "Kernel", module = "mvdrl", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyKernel {
    inner: KernelSpec,
}

#[pymethods]
impl PyKernel {
    #[new]
    #[pyo3(signature = (alpha = 1.0, dim = None, y0 = None))]
    fn new(alpha: f64, dim: Option<usize>, y0: Option<Vec<f64>>) -> PyResult<Self> {
        let y0 = match (y0, dim) {
            (Some(y), _) => y,
            (None, Some(d)) => vec![0.0; d],
            (None, None) => return Err(PyValueError::new_err("give dim or y0")),
        };
        Ok(Self {
            inner: KernelSpec::new(alpha, y0).py()?,
        })
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __call__(&self, y1: Vec<f64>, y2: Vec<f64>) -> PyResult<f64> {
        kernels::kernel_eval(&self.inner, &y1, &y2).py()
    }

    fn __repr__(&self) -> String {
        format!("Kernel(alpha={}, dim={})", self.inner.alpha(), self.inner.dim())
    }
}

/// Finite signed measure with unit total mass.
#[pyclass(name = "Measure", module = "mvdrl", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMeasure {
    inner: DiscreteMeasure,
}

#[pymethods]
impl PyMeasure {
    #[new]
    fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: DiscreteMeasure::from_rows(&atoms, weights).py()?,
        })
    }

    #[staticmethod]
    fn dirac(point: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: DiscreteMeasure::dirac(&point).py()?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: DiscreteMeasure = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn atoms(&self) -> Vec<Vec<f64>> {
        self.inner.atoms().to_rows()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn mean(&self) -> Vec<f64> {
        self.inner.mean()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Measure(dim={}, atoms={})", self.inner.dim(), self.inner.len())
    }
}

/// Tabular MDP with vector cumulants.
#[pyclass(name = "Mdp", module = "mvdrl", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMdp {
    inner: TabularMdp,
}

#[pymethods]
impl PyMdp {
    #[new]
    #[pyo3(signature = (transition, cumulants, gamma, r_max = 1.0))]
    fn new(transition: Vec<Vec<f64>>, cumulants: Vec<Vec<f64>>, gamma: f64, r_max: f64) -> PyResult<Self> {
        Ok(Self {
            inner: TabularMdp::new(transition, cumulants, gamma, r_max).py()?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (n_states, d, gamma, seed, concentration = 1.0, r_max = 1.0))]
    fn random(n_states: usize, d: usize, gamma: f64, seed: u64, concentration: f64, r_max: f64) -> PyResult<Self> {
        let mut rng = RngStream::new(seed, 1).rng();
        Ok(Self {
            inner: mdpmod::random_mdp(n_states, d, gamma, concentration, r_max, &mut rng).py()?,
        })
    }

    /// Cumulants `(1−γ) e_x`: returns are discounted state occupancies.
    #[staticmethod]
    fn dsm(transition: Vec<Vec<f64>>, gamma: f64) -> PyResult<Self> {
        Ok(Self {
            inner: mdpmod::dsm_mdp(transition, gamma).py()?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TabularMdp::from_json(text).py()?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().py()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma()
    }

    #[getter]
    fn return_bound(&self) -> f64 {
        self.inner.return_bound()
    }

    fn successor_features(&self) -> PyResult<Vec<Vec<f64>>> {
        self.inner.successor_features().py()
    }

    fn __repr__(&self) -> String {
        format!("Mdp(n_states={}, d={}, gamma={})", self.inner.n_states(), self.inner.dim(), self.inner.gamma())
    }
}

fn measures_of(eta: &ReturnDistFn) -> Vec<PyMeasure> {
    eta.states().iter().map(|m| PyMeasure { inner: m.clone() }).collect()
}

fn return_fn(states: &[PyRef<'_, PyMeasure>]) -> PyResult<ReturnDistFn> {
    ReturnDistFn::new(states.iter().map(|m| m.inner.clone()).collect()).py()
}

fn shared_support(atoms: Vec<Vec<f64>>, n: usize) -> PyResult<SupportMap> {
    SupportMap::shared(AtomSet::from_rows(&atoms).py()?, n).py()
}

#[pyfunction]
fn mmd_squared(p: PyRef<'_, PyMeasure>, q: PyRef<'_, PyMeasure>, kernel: PyRef<'_, PyKernel>) -> PyResult<f64> {
    kernels::mmd_squared(&p.inner, &q.inner, &kernel.inner).py()
}

#[pyfunction]
fn mmd(p: PyRef<'_, PyMeasure>, q: PyRef<'_, PyMeasure>, kernel: PyRef<'_, PyKernel>) -> PyResult<f64> {
    kernels::mmd(&p.inner, &q.inner, &kernel.inner).py()
}

/// MMD projection onto probability vectors over `support`.
#[pyfunction]
fn project_simplex(target: PyRef<'_, PyMeasure>, support: Vec<Vec<f64>>, kernel: PyRef<'_, PyKernel>) -> PyResult<PyMeasure> {
    let atoms = AtomSet::from_rows(&support).py()?;
    Ok(PyMeasure {
        inner: projections::project_simplex(&target.inner, &atoms, &kernel.inner).py()?,
    })
}

/// MMD projection onto signed unit-mass vectors over `support`.
#[pyfunction]
fn project_signed(target: PyRef<'_, PyMeasure>, support: Vec<Vec<f64>>, kernel: PyRef<'_, PyKernel>) -> PyResult<PyMeasure> {
    let atoms = AtomSet::from_rows(&support).py()?;
    Ok(PyMeasure {
        inner: projections::project_signed(&target.inner, &atoms, &kernel.inner).py()?,
    })
}

/// Exact distributional Bellman backup of one return-distribution function.
#[pyfunction]
#[pyo3(signature = (states, mdp, max_atoms = None))]
fn bellman(states: Vec<PyRef<'_, PyMeasure>>, mdp: PyRef<'_, PyMdp>, max_atoms: Option<usize>) -> PyResult<Vec<PyMeasure>> {
    Ok(measures_of(&dp::exact_bellman(&return_fn(&states)?, &mdp.inner, max_atoms).py()?))
}

fn dp_dict<'py>(py: Python<'py>, rep: dp::DpReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("distances", rep.distances)?;
    d.set_item("iterations", rep.iterations)?;
    d.set_item("converged", rep.converged)?;
    d.set_item("diagnostics", rep.diagnostics)?;
    d.set_item("estimate", measures_of(&rep.estimate))?;
    Ok(d)
}

/// Categorical DP on a support shared by all states.
#[pyfunction]
#[pyo3(signature = (mdp, support, kernel, tol = 1e-8, max_iter = 1000, signed = false))]
fn categorical_dp<'py>(
    py: Python<'py>,
    mdp: PyRef<'_, PyMdp>,
    support: Vec<Vec<f64>>,
    kernel: PyRef<'_, PyKernel>,
    tol: f64,
    max_iter: usize,
    signed: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let support = shared_support(support, mdp.inner.n_states())?;
    let rep = if signed {
        dp::signed_dp_solve(&mdp.inner, &support, &kernel.inner, tol, max_iter)
    } else {
        dp::categorical_dp_solve(&mdp.inner, &support, &kernel.inner, tol, max_iter)
    }
    .py()?;
    dp_dict(py, rep)
}

/// Randomized particle DP with `m` particles per state.
#[pyfunction]
#[pyo3(signature = (mdp, m, kernel, seed = 0, iterations = None))]
fn ewp_dp<'py>(
    py: Python<'py>,
    mdp: PyRef<'_, PyMdp>,
    m: usize,
    kernel: PyRef<'_, PyKernel>,
    seed: u64,
    iterations: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = EwpConfig { m, iterations, seed };
    dp_dict(py, dp::ewp_random_solve(&mdp.inner, &cfg, &kernel.inner, None, false).py()?)
}

/// Signed categorical TD; distances are reported to `reference` when given.
#[pyfunction]
#[pyo3(signature = (mdp, support, kernel, steps, seed = 0, reference = None))]
fn categorical_td<'py>(
    py: Python<'py>,
    mdp: PyRef<'_, PyMdp>,
    support: Vec<Vec<f64>>,
    kernel: PyRef<'_, PyKernel>,
    steps: u64,
    seed: u64,
    reference: Option<Vec<PyRef<'_, PyMeasure>>>,
) -> PyResult<Bound<'py, PyDict>> {
    let support = shared_support(support, mdp.inner.n_states())?;
    let reference = reference.map(|r| return_fn(&r)).transpose()?;
    let run = td::categorical_td_run(&mdp.inner, &support, &kernel.inner, &TdConfig::new(steps), reference.as_ref(), &RngStream::new(seed, 3)).py()?;
    let d = PyDict::new(py);
    d.set_item("steps", run.report.steps)?;
    d.set_item("distances", run.report.distances)?;
    d.set_item("mean_step_sizes", run.report.mean_step_sizes)?;
    d.set_item("visits", run.state.visits)?;
    d.set_item("estimate", measures_of(&run.state.estimate))?;
    Ok(d)
}

/// Empirical measure of `n` truncated rollout returns from `state`.
#[pyfunction]
#[pyo3(signature = (mdp, state, n, tail_tol = 1e-4, seed = 0))]
fn mc_oracle(mdp: PyRef<'_, PyMdp>, state: usize, n: usize, tail_tol: f64, seed: u64) -> PyResult<PyMeasure> {
    Ok(PyMeasure {
        inner: eval::mc_oracle(&mdp.inner, state, n, tail_tol, &RngStream::new(seed, 4)).py()?,
    })
}

/// `(atoms, weights)` of the law of `⟨G, w⟩`.
#[pyfunction]
fn zeroshot(measure: PyRef<'_, PyMeasure>, w: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = eval::zeroshot_scalar(&measure.inner, &w).py()?;
    Ok((s.atoms().to_vec(), s.weights().to_vec()))
}

/// L2 distance between the CDFs of two scalar distributions.
#[pyfunction]
fn cramer(p_atoms: Vec<f64>, p_weights: Vec<f64>, q_atoms: Vec<f64>, q_weights: Vec<f64>) -> PyResult<f64> {
    let p = ScalarDist::new(p_atoms, p_weights).py()?;
    let q = ScalarDist::new(q_atoms, q_weights).py()?;
    Ok(eval::cramer_distance(&p, &q))
}

/// Table showing the simplex projection is not affine.
#[pyfunction]
fn cert_nonaffine<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
    let t = ::mvdrl::cli::cert_nonaffine().py()?;
    let d = PyDict::new(py);
    d.set_item("atoms", t.atoms.to_rows())?;
    d.set_item("q1", t.q1)?;
    d.set_item("q2", t.q2)?;
    d.set_item("mmd", t.mmd)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "mvdrl")]
fn mvdrl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_class::<PyMeasure>()?;
    m.add_class::<PyMdp>()?;
    m.add_function(wrap_pyfunction!(mmd_squared, m)?)?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(project_simplex, m)?)?;
    m.add_function(wrap_pyfunction!(project_signed, m)?)?;
    m.add_function(wrap_pyfunction!(bellman, m)?)?;
    m.add_function(wrap_pyfunction!(categorical_dp, m)?)?;
    m.add_function(wrap_pyfunction!(ewp_dp, m)?)?;
    m.add_function(wrap_pyfunction!(categorical_td, m)?)?;
    m.add_function(wrap_pyfunction!(mc_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(zeroshot, m)?)?;
    m.add_function(wrap_pyfunction!(cramer, m)?)?;
    m.add_function(wrap_pyfunction!(cert_nonaffine, m)?)?;
    Ok(())
}
