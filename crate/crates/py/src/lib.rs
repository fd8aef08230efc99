//! Python bindings for the lab: policies, DPO gradients, selection rules,
//! bound checks, worlds and whole experiment runs.
//!
//! Structured results (metric rows, ledgers, summaries) cross the boundary as
//! JSON and come back to Python as plain dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use tsr_lab::curation::{self, Pick, PreferencePair};
use tsr_lab::diagnostics::{self, BoundCheck, RelaxedToken};
use tsr_lab::dpo;
use tsr_lab::harness::{self, ExperimentConfig, Method};
use tsr_lab::policy::{GaussianPolicy, Payload, Policy as CorePolicy, Response, Role, TokenPolicy};
use tsr_lab::rng;
use tsr_lab::verify;
use tsr_lab::world::{Pool, Prompt, World as CoreWorld, WorldConfig};

create_exception!(tsr_lab_py, LabError, PyException, "Any error raised by the lab.");

fn lab(e: tsr_lab::LabError) -> PyErr {
    LabError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| LabError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn prompt(features: Vec<f64>) -> Prompt {
    Prompt {
        id: 0,
        features,
        pool: Pool::Iteration(0),
    }
}

/// A Gaussian or token policy.
#[pyclass(frozen, module = "tsr_lab_py")]
struct Policy {
    inner: CorePolicy,
}

impl Policy {
    fn payload(&self, y: &Bound<'_, PyAny>) -> PyResult<Payload> {
        Ok(match self.inner {
            CorePolicy::Gaussian(_) => Payload::Latent(y.extract()?),
            CorePolicy::Token(_) => Payload::Tokens(y.extract()?),
        })
    }

    fn response(&self, x: &Prompt, y: &Bound<'_, PyAny>) -> PyResult<Response> {
        Response::new(&self.inner, x, self.payload(y)?, Role::Current).map_err(lab)
    }
}

#[pymethods]
impl Policy {
    /// Diagonal Gaussian with mean `W x`; `weights` is `W` in row-major order.
    #[staticmethod]
    #[pyo3(signature = (dim, weights, log_sd, learn_scale = true))]
    fn gaussian(dim: usize, weights: Vec<f64>, log_sd: Vec<f64>, learn_scale: bool) -> PyResult<Self> {
        let g = GaussianPolicy::new(dim, weights, log_sd, learn_scale).map_err(lab)?;
        Ok(Self {
            inner: CorePolicy::Gaussian(g),
        })
    }

    /// Autoregressive token policy with i.i.d. `Normal(0, init_sd^2)` parameters.
    #[staticmethod]
    #[pyo3(signature = (dim, vocab, length, init_sd = 0.1, seed = 0))]
    fn token(dim: usize, vocab: usize, length: usize, init_sd: f64, seed: u64) -> Self {
        let t = TokenPolicy::init(dim, vocab, length, init_sd, &mut rng::stream(seed, &[]));
        Self {
            inner: CorePolicy::Token(t),
        }
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.inner.family()
    }

    fn params(&self) -> Vec<f64> {
        self.inner.params()
    }

    fn with_params(&self, params: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_params(&params).map_err(lab)?,
        })
    }

    fn log_prob(&self, x: Vec<f64>, y: &Bound<'_, PyAny>) -> PyResult<f64> {
        self.inner.log_prob(&prompt(x), &self.payload(y)?).map_err(lab)
    }

    fn log_prob_grad(&self, x: Vec<f64>, y: &Bound<'_, PyAny>) -> PyResult<Vec<f64>> {
        self.inner.log_prob_grad(&prompt(x), &self.payload(y)?).map_err(lab)
    }

    /// One draw: a latent list or a token list.
    #[pyo3(signature = (x, seed = 0))]
    fn sample<'py>(&self, py: Python<'py>, x: Vec<f64>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        match self.inner.sample(&prompt(x), &mut rng::stream(seed, &[])) {
            Payload::Latent(h) => to_py(py, &h),
            Payload::Tokens(t) => to_py(py, &t),
        }
    }

    fn __repr__(&self) -> String {
        format!("Policy(family={}, params={})", self.inner.family(), self.inner.param_count())
    }
}

fn pair(policy: &Policy, x: Vec<f64>, y_w: &Bound<'_, PyAny>, y_l: &Bound<'_, PyAny>) -> PyResult<PreferencePair> {
    let x = prompt(x);
    let w = policy.response(&x, y_w)?;
    let l = policy.response(&x, y_l)?;
    Ok(PreferencePair::new(x, w, l, None, None, 0, curation::Phase::SelfRewarding))
}

/// Implicit reward, adaptive weight, direction and full gradient of the DPO
/// loss on one pair.
#[pyfunction]
#[pyo3(signature = (policy, reference, x, y_w, y_l, beta = 0.1))]
fn dpo_grad_decomposed<'py>(
    py: Python<'py>,
    policy: &Policy,
    reference: &Policy,
    x: Vec<f64>,
    y_w: &Bound<'py, PyAny>,
    y_l: &Bound<'py, PyAny>,
    beta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let p = pair(policy, x, y_w, y_l)?;
    let g = dpo::dpo_grad_decomposed(&policy.inner, &reference.inner, &p, beta).map_err(lab)?;
    let d = PyDict::new(py);
    d.set_item("r_hat", g.reward.r_hat)?;
    d.set_item("adaptive_weight", g.adaptive_weight)?;
    d.set_item("direction", g.direction)?;
    d.set_item("full_grad", g.full_grad)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (policy, reference, x, y_w, y_l, beta = 0.1))]
fn dpo_loss(
    policy: &Policy,
    reference: &Policy,
    x: Vec<f64>,
    y_w: &Bound<'_, PyAny>,
    y_l: &Bound<'_, PyAny>,
    beta: f64,
) -> PyResult<f64> {
    let p = pair(policy, x, y_w, y_l)?;
    dpo::dpo_loss(&policy.inner, &reference.inner, &[p], beta).map_err(lab)
}

fn pick(p: Pick) -> (&'static str, usize) {
    match p {
        Pick::Current(i) => ("current", i),
        Pick::Anchor(i) => ("anchor", i),
        Pick::Future(i) => ("future", i),
    }
}

/// `(chosen index, (source, rejected index))`, or None for empty inputs.
#[pyfunction]
fn select_phase1(s_current: Vec<f64>, s_anchor: Vec<f64>) -> Option<(usize, (&'static str, usize))> {
    curation::select_phase1(&s_current, &s_anchor).map(|s| (s.chosen, pick(s.rejected)))
}

#[pyfunction]
fn select_phase2(s_future: Vec<f64>, s_current: Vec<f64>) -> Option<(&'static str, usize)> {
    curation::select_phase2(&s_future, &s_current).map(pick)
}

#[pyfunction]
fn select_sr(scores: Vec<f64>) -> Option<(usize, usize)> {
    curation::select_sr(&scores)
}

/// Directional-guidance bound on one pair. Token policies are checked through
/// their soft one-hot relaxation, so `h_w`/`h_l` are flattened weight vectors.
#[pyfunction]
#[pyo3(signature = (policy, x, h_w, h_l, n_grid = 16))]
fn lipschitz_bound_check<'py>(
    py: Python<'py>,
    policy: &Policy,
    x: Vec<f64>,
    h_w: Vec<f64>,
    h_l: Vec<f64>,
    n_grid: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let x = prompt(x);
    let b: BoundCheck = match &policy.inner {
        CorePolicy::Gaussian(g) => diagnostics::lipschitz_bound_check(g, &x, &h_w, &h_l, n_grid),
        CorePolicy::Token(t) => diagnostics::lipschitz_bound_check(&RelaxedToken(t), &x, &h_w, &h_l, n_grid),
    }
    .map_err(lab)?;
    to_py(py, &b)
}

/// A synthetic world with a known quality function.
#[pyclass(frozen, module = "tsr_lab_py")]
struct World {
    inner: CoreWorld,
}

#[pymethods]
impl World {
    /// `config_toml` holds `WorldConfig` keys; omitted keys take defaults.
    #[new]
    #[pyo3(signature = (seed = 0, config_toml = None))]
    fn new(seed: u64, config_toml: Option<&str>) -> PyResult<Self> {
        let config: WorldConfig = match config_toml {
            Some(t) => toml::from_str(t).map_err(|e| LabError::new_err(e.to_string()))?,
            None => WorldConfig::default(),
        };
        Ok(Self {
            inner: CoreWorld::new(config, seed).map_err(lab)?,
        })
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn n_prompts(&self) -> usize {
        self.inner.prompts().len()
    }

    fn prompt_features(&self, index: usize) -> PyResult<Vec<f64>> {
        self.inner
            .prompts()
            .get(index)
            .map(|p| p.features.clone())
            .ok_or_else(|| LabError::new_err(format!("no prompt at index {index}")))
    }

    /// Ground-truth quality of a latent response to prompt `index`.
    fn true_quality(&self, index: usize, h: Vec<f64>) -> PyResult<f64> {
        let p = self
            .inner
            .prompts()
            .get(index)
            .ok_or_else(|| LabError::new_err(format!("no prompt at index {index}")))?;
        self.inner.payload_quality(p, &Payload::Latent(h)).map_err(lab)
    }

    /// Mean expected true quality of `policy` on the held-out prompts.
    fn heldout_quality(&self, policy: &Policy) -> PyResult<f64> {
        diagnostics::policy_true_quality(&self.inner, &policy.inner, self.inner.heldout()).map_err(lab)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(lab)
    }
}

fn load_config(config_toml: Option<&str>) -> PyResult<ExperimentConfig> {
    match config_toml {
        Some(t) => ExperimentConfig::from_toml_str(t).map_err(lab),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Runs one method and writes its run directory to `out_dir`. Returns
/// `{"rows": [...], "ledger": {...}}`.
#[pyfunction]
#[pyo3(signature = (out_dir, config_toml = None, method = None, seed = None, iterations = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    config_toml: Option<&str>,
    method: Option<&str>,
    seed: Option<u64>,
    iterations: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = load_config(config_toml)?;
    cfg.output_dir = out_dir;
    if let Some(m) = method {
        cfg.method = Method::parse(m).map_err(lab)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if iterations.is_some() {
        cfg.iterations = iterations;
    }
    let log = py.detach(|| harness::run_experiment(&cfg)).map_err(lab)?;
    let d = PyDict::new(py);
    d.set_item("rows", to_py(py, &log.rows)?)?;
    d.set_item("ledger", to_py(py, &log.ledger)?)?;
    Ok(d)
}

/// Every method on every seed at one DPO budget; returns the summary rows.
#[pyfunction]
#[pyo3(signature = (out_dir, methods, seeds, budget = 4, config_toml = None))]
fn compare_methods<'py>(
    py: Python<'py>,
    out_dir: PathBuf,
    methods: Vec<String>,
    seeds: Vec<u64>,
    budget: u64,
    config_toml: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load_config(config_toml)?;
    let methods = methods.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>, _>>().map_err(lab)?;
    let cmp = py
        .detach(|| harness::compare_methods(&cfg, &methods, &seeds, budget, &out_dir))
        .map_err(lab)?;
    to_py(py, &cmp.summary)
}

/// The built-in check suites as `(name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (cases = 1000, seed = 0))]
fn run_checks(py: Python<'_>, cases: usize, seed: u64) -> Vec<(String, bool, String)> {
    py.detach(|| verify::run_all(cases, seed))
        .into_iter()
        .map(|c| (c.name, c.passed, c.detail))
        .collect()
}

#[pymodule]
fn tsr_lab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LabError", m.py().get_type::<LabError>())?;
    m.add_class::<Policy>()?;
    m.add_class::<World>()?;
    m.add_function(wrap_pyfunction!(dpo_grad_decomposed, m)?)?;
    m.add_function(wrap_pyfunction!(dpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(select_phase1, m)?)?;
    m.add_function(wrap_pyfunction!(select_phase2, m)?)?;
    m.add_function(wrap_pyfunction!(select_sr, m)?)?;
    m.add_function(wrap_pyfunction!(lipschitz_bound_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(compare_methods, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    Ok(())
}
