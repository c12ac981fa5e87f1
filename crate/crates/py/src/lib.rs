//! Python bindings: wave accounting, chunk plans, the calibrated latency
//! estimator, trace generation and whole simulations.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;
use smshare_core::config::ExperimentConfig;
use smshare_core::engine::{self, report, CalibrationPlan, GroundTruthOracle, OracleConfig, Policy, SimOutput};
use smshare_core::perf_model::{self, Estimator as CoreEstimator, ExecutionState, GpuSpec, Phase};
use smshare_core::workload::{self, LengthSampler, ModelSpec, Tiling};
use std::path::PathBuf;

fn err(e: smshare_core::Error) -> PyErr {
    if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(a) => {
            let l = PyList::empty(py);
            for x in a {
                l.append(to_py(py, x)?)?;
            }
            l.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn dict<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &v)
}

fn gpu(name: &str) -> PyResult<GpuSpec> {
    GpuSpec::preset(name).ok_or_else(|| PyValueError::new_err(format!("unknown gpu preset `{name}`")))
}

fn model(name: &str) -> PyResult<ModelSpec> {
    ModelSpec::preset(name).ok_or_else(|| PyValueError::new_err(format!("unknown model preset `{name}`")))
}

/// Wave-quantization stats: waves, tail_sms, idle_ratio.
#[pyfunction]
fn wave_stats(py: Python<'_>, grid_blocks: u64, blocks_per_sm: u64, num_sms: u64) -> PyResult<Bound<'_, PyAny>> {
    dict(
        py,
        &perf_model::wave_stats(grid_blocks, blocks_per_sm, num_sms).map_err(err)?,
    )
}

/// Per-kernel idle ratios of one prefill layer.
#[pyfunction]
#[pyo3(signature = (seq_len, model_name = "llama3-8b", gpu_name = "a100"))]
fn wave_profile<'py>(py: Python<'py>, seq_len: u64, model_name: &str, gpu_name: &str) -> PyResult<Bound<'py, PyAny>> {
    let p = workload::wave_profile(&model(model_name)?, &Tiling::default(), &gpu(gpu_name)?, seq_len).map_err(err)?;
    dict(py, &p)
}

#[pyfunction]
#[pyo3(signature = (sl, cs, ds = 0))]
fn chunk_plan(py: Python<'_>, sl: u64, cs: u64, ds: u64) -> PyResult<Bound<'_, PyAny>> {
    dict(py, &workload::chunk_plan(sl, cs, ds).map_err(err)?)
}

/// Compute / memory / network peaks on `n_p` SMs.
#[pyfunction]
#[pyo3(signature = (n_p, gpu_name = "a100"))]
fn scaled_peaks<'py>(py: Python<'py>, n_p: u32, gpu_name: &str) -> PyResult<Bound<'py, PyAny>> {
    dict(py, &perf_model::scaled_peaks(&gpu(gpu_name)?, n_p).map_err(err)?)
}

/// Poisson arrivals with preset length distributions, as a list of dicts.
#[pyfunction]
#[pyo3(signature = (rate, duration_s, preset = "sharegpt-like", seed = 0))]
fn gen_poisson_trace<'py>(
    py: Python<'py>,
    rate: f64,
    duration_s: f64,
    preset: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let lens = LengthSampler::preset(preset)
        .ok_or_else(|| PyValueError::new_err(format!("unknown length preset `{preset}`")))?;
    dict(
        py,
        &workload::gen_poisson_trace(rate, duration_s, &lens, seed).map_err(err)?,
    )
}

/// Latency estimator calibrated from sparse samples of the ground-truth
/// oracle.
#[pyclass(frozen)]
struct Estimator {
    inner: std::sync::RwLock<CoreEstimator>,
    oracle: GroundTruthOracle,
}

#[pymethods]
impl Estimator {
    /// `budget` is `"default"` (two samples per token decade) or `"all"`
    /// (every point of the evaluation grid).
    #[new]
    #[pyo3(signature = (gpu_name = "a100", model_name = "llama3-8b", budget = "default", noise_sigma = 0.0, seed = 0))]
    fn new(gpu_name: &str, model_name: &str, budget: &str, noise_sigma: f64, seed: u64) -> PyResult<Self> {
        let (g, m) = (gpu(gpu_name)?, model(model_name)?);
        let plan = match budget {
            "default" => CalibrationPlan::default_for(&g),
            "all" => CalibrationPlan::dense_for(&g, 1),
            other => return Err(PyValueError::new_err(format!("unknown budget `{other}`"))),
        };
        if !(noise_sigma >= 0.0) {
            return Err(PyValueError::new_err("noise_sigma must be >= 0"));
        }
        let oracle = GroundTruthOracle::new(g.clone(), m.clone(), OracleConfig::default(), noise_sigma);
        let store = engine::profile(&oracle, &plan, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        Ok(Estimator {
            inner: std::sync::RwLock::new(CoreEstimator::new(g, m, store)),
            oracle: GroundTruthOracle {
                noise_sigma: 0.0,
                ..oracle
            },
        })
    }

    /// `(prefill_layer_s, decode_step_s)` for the given execution state.
    #[pyo3(signature = (prefill_lens = vec![], decode_ctx_lens = vec![], prefill_sms = 0, decode_sms = 0))]
    fn estimate(
        &self,
        prefill_lens: Vec<u64>,
        decode_ctx_lens: Vec<u64>,
        prefill_sms: u32,
        decode_sms: u32,
    ) -> PyResult<(f64, f64)> {
        let es = ExecutionState {
            prefill_lens,
            prefill_prefix: vec![],
            prefill_sms,
            decode_ctx_lens,
            decode_sms,
        };
        let l = self
            .inner
            .read()
            .expect("estimator lock")
            .estimate_latency(&es)
            .map_err(err)?;
        Ok((l.prefill_layer_s, l.decode_step_s))
    }

    /// Noise-free oracle latency for the same state.
    #[pyo3(signature = (prefill_lens = vec![], decode_ctx_lens = vec![], prefill_sms = 0, decode_sms = 0))]
    fn oracle(
        &self,
        prefill_lens: Vec<u64>,
        decode_ctx_lens: Vec<u64>,
        prefill_sms: u32,
        decode_sms: u32,
    ) -> PyResult<(f64, f64)> {
        let es = ExecutionState {
            prefill_lens,
            prefill_prefix: vec![],
            prefill_sms,
            decode_ctx_lens,
            decode_sms,
        };
        let l = self.oracle.exact(&es).map_err(err)?;
        Ok((l.prefill_layer_s, l.decode_step_s))
    }

    /// Fold one measurement of `phase` ("prefill" or "decode") back in.
    fn update_online(&self, phase: &str, lens: Vec<u64>, sms: u32, measured_s: f64) -> PyResult<()> {
        let (phase, es) = match phase {
            "prefill" => (Phase::Prefill, ExecutionState::prefill_only(lens, sms)),
            "decode" => (Phase::Decode, ExecutionState::decode_only(lens, sms)),
            other => return Err(PyValueError::new_err(format!("unknown phase `{other}`"))),
        };
        self.inner
            .write()
            .expect("estimator lock")
            .update_online(phase, &es, measured_s)
            .map_err(err)
    }

    /// Prefill and decode MAPE against the oracle over the dense grid.
    #[pyo3(signature = (sm_step = 2))]
    fn mape<'py>(&self, py: Python<'py>, sm_step: u32) -> PyResult<Bound<'py, PyAny>> {
        let (p, d) = engine::dense_grid(&self.oracle.gpu, sm_step);
        let est = self.inner.read().expect("estimator lock");
        dict(py, &engine::evaluate(&est, &self.oracle, &p, &d).map_err(err)?)
    }
}

/// Outcome of one simulation.
#[pyclass(frozen)]
struct SimResult {
    out: SimOutput,
}

#[pymethods]
impl SimResult {
    #[getter]
    fn summary(&self) -> String {
        self.out.metrics.summary_line()
    }

    /// Aggregate metrics as a dict.
    #[getter]
    fn aggregates<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        dict(py, &self.out.metrics.aggregates)
    }

    #[getter]
    fn decisions<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        dict(py, &self.out.decisions)
    }

    fn metrics_json(&self) -> String {
        report::metrics_json(&self.out.metrics)
    }

    fn requests_csv(&self) -> String {
        report::requests_csv(&self.out.metrics)
    }

    fn timeline_csv(&self) -> String {
        report::timeline_csv(&self.out.timeline)
    }

    fn write_reports(&self, dir: PathBuf) -> PyResult<()> {
        report::write_reports(&dir, &self.out).map_err(err)
    }
}

/// Run the experiment described by `config` (TOML text). `policy` and
/// `seed` override the file, as on the command line.
#[pyfunction]
#[pyo3(signature = (config, policy = None, seed = None))]
fn simulate(py: Python<'_>, config: &str, policy: Option<&str>, seed: Option<u64>) -> PyResult<SimResult> {
    let mut cfg = ExperimentConfig::from_toml_str(config, "<config>").map_err(err)?;
    if let Some(p) = policy {
        cfg.policy = p.parse::<Policy>().map_err(err)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
        if let Some(t) = cfg.trace.as_mut() {
            t.seed = Some(s);
        }
    }
    let sim = cfg.sim_config().map_err(err)?;
    let trace = cfg.load_trace().map_err(err)?;
    let out = py.detach(|| engine::run(&sim, &trace)).map_err(err)?;
    Ok(SimResult { out })
}

#[pymodule]
fn smshare(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(wave_stats, m)?)?;
    m.add_function(wrap_pyfunction!(wave_profile, m)?)?;
    m.add_function(wrap_pyfunction!(chunk_plan, m)?)?;
    m.add_function(wrap_pyfunction!(scaled_peaks, m)?)?;
    m.add_function(wrap_pyfunction!(gen_poisson_trace, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_class::<Estimator>()?;
    m.add_class::<SimResult>()?;
    Ok(())
}
