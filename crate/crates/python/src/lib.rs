//! Python bindings: `import pyvilds`.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use vilds::btd::{self, LowerBlockBiDiag, Side, SymBlockTriDiag};
use vilds::dense::{mat_from_rows, mat_to_rows, Mat};
use vilds::model::{Family, GenerativeParams};
use vilds::posterior::{GaussianPosterior, NetShape, PosteriorKind};
use vilds::train::{self, FitConfig};

type Rows = Vec<Vec<f64>>;

fn err(e: vilds::Error) -> PyErr {
    match e {
        vilds::Error::NotPositiveDefinite { .. } | vilds::Error::NonFiniteElbo { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_mat(rows: &Rows) -> PyResult<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(PyValueError::new_err("expected a non-empty rectangular matrix"));
    }
    Ok(mat_from_rows(&rows.concat(), r, c))
}

fn from_mat(m: &Mat) -> Rows {
    let flat = mat_to_rows(m);
    flat.chunks(m.ncols().max(1)).map(<[f64]>::to_vec).collect()
}

fn blocks(list: &[Rows]) -> PyResult<Vec<Mat>> {
    list.iter().map(to_mat).collect()
}

fn parse_family(name: &str) -> PyResult<Family> {
    match name {
        "lds" => Ok(Family::Lds),
        "plds" => Ok(Family::Plds),
        "nonlin" => Ok(Family::Nonlin),
        _ => Err(PyValueError::new_err(format!("unknown family '{name}' (lds, plds, nonlin)"))),
    }
}

fn parse_kind(name: &str) -> PyResult<PosteriorKind> {
    match name {
        "mf" => Ok(PosteriorKind::Mf),
        "vildsblk" => Ok(PosteriorKind::Vildsblk),
        "vildsmult" => Ok(PosteriorKind::Vildsmult),
        _ => Err(PyValueError::new_err(format!("unknown posterior '{name}' (mf, vildsblk, vildsmult)"))),
    }
}

/// Generative model parameters θ.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel(GenerativeParams);

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (family, n=2, m=20, seed=0))]
    fn random(family: &str, n: usize, m: usize, seed: u64) -> PyResult<Self> {
        Ok(Self(match parse_family(family)? {
            Family::Lds => GenerativeParams::lds_random(n, m, seed),
            Family::Plds => GenerativeParams::plds_random(n, m, seed),
            Family::Nonlin => GenerativeParams::nonlin_default(),
        }))
    }

    #[staticmethod]
    #[pyo3(signature = (family, x, n=2))]
    fn from_data(family: &str, x: Rows, n: usize) -> PyResult<Self> {
        GenerativeParams::init_from_data(parse_family(family)?, &x, n).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let theta: GenerativeParams = serde_json::from_str(text).map_err(json_err)?;
        theta.validate().map_err(err)?;
        Ok(Self(theta))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(json_err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.0.latent_dim()
    }

    #[getter]
    fn obs_dim(&self) -> usize {
        self.0.obs_dim()
    }

    /// Returns `(x, z_true)` as lists of rows.
    fn simulate(&self, length: usize, seed: u64) -> PyResult<(Rows, Rows)> {
        let d = self.0.simulate(length, seed).map_err(err)?;
        Ok((d.x, d.z_true.unwrap_or_default()))
    }

    /// `log p(x, z)` with `z` flattened time-major.
    fn log_joint(&self, x: Rows, z: Vec<f64>) -> PyResult<f64> {
        self.0.log_joint(&x, &z).map_err(err)
    }

    /// Exact smoothing moments for LDS models: `(means, var, cross, log_evidence)`.
    fn kalman_smoother(&self, x: Rows) -> PyResult<(Rows, Vec<Rows>, Vec<Rows>, f64)> {
        let e = vilds::oracle::kalman_smoother(&self.0, &x).map_err(err)?;
        Ok((
            e.means.iter().map(|v| v.as_slice().to_vec()).collect(),
            e.var.iter().map(from_mat).collect(),
            e.cross.iter().map(from_mat).collect(),
            e.log_evidence,
        ))
    }
}

/// Variational parameters φ.
#[pyclass(name = "Recognition", from_py_object)]
#[derive(Clone)]
struct PyRecognition(vilds::posterior::Recognition);

#[pymethods]
impl PyRecognition {
    #[new]
    #[pyo3(signature = (kind, obs_dim, latent_dim, hidden=64, layers=5, alpha=0.1, seed=0))]
    fn new(kind: &str, obs_dim: usize, latent_dim: usize, hidden: usize, layers: usize, alpha: f64, seed: u64) -> PyResult<Self> {
        let shape = NetShape { hidden, layers };
        vilds::posterior::Recognition::init(parse_kind(kind)?, obs_dim, latent_dim, shape, alpha, seed)
            .map(Self)
            .map_err(err)
    }

    /// Initialization used by `fit` on the command line: hidden units are
    /// made active on the inputs of `x`.
    #[staticmethod]
    #[pyo3(signature = (kind, x, latent_dim, hidden=64, layers=5, alpha=0.1, seed=0))]
    fn from_data(kind: &str, x: Rows, latent_dim: usize, hidden: usize, layers: usize, alpha: f64, seed: u64) -> PyResult<Self> {
        let shape = NetShape { hidden, layers };
        vilds::posterior::Recognition::init_on_data(parse_kind(kind)?, &x, latent_dim, shape, alpha, seed)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        serde_json::from_str(text).map(Self).map_err(json_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(json_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.0.params()
    }

    fn set_params(&mut self, flat: Vec<f64>) -> PyResult<()> {
        self.0.set_params(&flat).map_err(err)
    }

    fn posterior(&self, x: Rows) -> PyResult<PyPosterior> {
        train::build_with_jitter(&self.0, &x, false).map(|(p, _, _)| PyPosterior(p)).map_err(err)
    }
}

/// A posterior built on one series.
#[pyclass(name = "Posterior")]
struct PyPosterior(GaussianPosterior);

#[pymethods]
impl PyPosterior {
    #[staticmethod]
    fn from_moments(mu: Vec<f64>, diag: Vec<Rows>, lower: Vec<Rows>) -> PyResult<Self> {
        let h = SymBlockTriDiag::new(blocks(&diag)?, blocks(&lower)?).map_err(err)?;
        GaussianPosterior::from_moments(mu, h).map(Self).map_err(err)
    }

    #[getter]
    fn mu(&self) -> Vec<f64> {
        self.0.mu.clone()
    }

    fn sample(&self, eps: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.sample(&eps).map_err(err)
    }

    fn entropy(&self) -> f64 {
        self.0.entropy()
    }

    /// `(means, var, cross)`
    fn marginals(&self) -> PyResult<(Rows, Vec<Rows>, Vec<Rows>)> {
        let mm = self.0.marginals().map_err(err)?;
        Ok((
            mm.means.iter().map(|v| v.as_slice().to_vec()).collect(),
            mm.var.iter().map(from_mat).collect(),
            mm.cross.iter().map(from_mat).collect(),
        ))
    }
}

/// Block Cholesky of a symmetric block tri-diagonal matrix given by its
/// diagonal blocks and sub-diagonal blocks `(t+1, t)`. Returns the factor's
/// `(diag, lower)` blocks.
#[pyfunction]
fn btd_cholesky(diag: Vec<Rows>, lower: Vec<Rows>) -> PyResult<(Vec<Rows>, Vec<Rows>)> {
    let h = SymBlockTriDiag::new(blocks(&diag)?, blocks(&lower)?).map_err(err)?;
    let r = btd::cholesky(&h).map_err(err)?;
    Ok((r.diag.iter().map(from_mat).collect(), r.lower.iter().map(from_mat).collect()))
}

/// Solves `R x = v` (or `Rᵀ x = v` with `transpose=True`).
#[pyfunction]
#[pyo3(signature = (diag, lower, v, transpose=false))]
fn btd_solve(diag: Vec<Rows>, lower: Vec<Rows>, v: Vec<f64>, transpose: bool) -> PyResult<Vec<f64>> {
    let r = LowerBlockBiDiag::new(blocks(&diag)?, blocks(&lower)?).map_err(err)?;
    btd::solve(&r, &v, if transpose { Side::Upper } else { Side::Lower }).map_err(err)
}

/// `log det (R Rᵀ)⁻¹`
#[pyfunction]
fn btd_logdet_sigma(diag: Vec<Rows>, lower: Vec<Rows>) -> PyResult<f64> {
    let r = LowerBlockBiDiag::new(blocks(&diag)?, blocks(&lower)?).map_err(err)?;
    Ok(btd::logdet_sigma(&r))
}

/// Trains `recognition` (and `model` unless `learn_theta=False`) on `x`.
/// Returns the fitted model, recognition parameters and the per-epoch ELBO.
#[pyfunction]
#[pyo3(signature = (model, recognition, x, epochs=100, window=100, batches_per_epoch=100, samples=1, seed=0, learn_theta=true))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    model: PyModel,
    recognition: PyRecognition,
    x: Rows,
    epochs: usize,
    window: usize,
    batches_per_epoch: usize,
    samples: usize,
    seed: u64,
    learn_theta: bool,
) -> PyResult<(PyModel, PyRecognition, Vec<f64>)> {
    let config = FitConfig {
        kind: recognition.0.kind(),
        epochs,
        window,
        batches_per_epoch,
        samples,
        seed,
        alpha: recognition.0.alpha(),
        learn_theta,
        ..FitConfig::default()
    };
    let r = py
        .detach(|| train::fit(&config, &x, model.0, recognition.0))
        .map_err(err)?;
    Ok((PyModel(r.theta), PyRecognition(r.phi), r.elbo))
}

/// Runs the command-line tool with `args` (without the program name) and
/// returns its exit status.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    vilds::cli::run(std::iter::once("vilds".to_string()).chain(args))
}

#[pymodule]
fn pyvilds(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", vilds::io::VERSION)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyRecognition>()?;
    m.add_class::<PyPosterior>()?;
    m.add_function(wrap_pyfunction!(btd_cholesky, m)?)?;
    m.add_function(wrap_pyfunction!(btd_solve, m)?)?;
    m.add_function(wrap_pyfunction!(btd_logdet_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
