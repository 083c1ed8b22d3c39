//! Python module `tcpllm_py`.
//!
//! Configuration is passed as TOML text in the same schema the CLI reads;
//! `None` means the built-in defaults.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use tcpllm::config::RunConfig;
use tcpllm::control::{oracle_pool, Scenario};
use tcpllm::model::{Calibration, TcpLlm, Window};
use tcpllm::simnet::{run_scenario, CcaId, MetricSample};
use tcpllm::telemetry::{self, ExperiencePool};
use tcpllm::trainer::{self, EvalSettings, Mode};
use tcpllm::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFiniteGradient { .. } | Error::Degenerate(_) | Error::Decision(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config(toml: Option<&str>) -> PyResult<RunConfig> {
    toml.map_or_else(|| Ok(RunConfig::default()), RunConfig::parse).map_err(py_err)
}

/// `thr / (rtt_ms + 1) − loss`.
#[pyfunction]
fn reward(throughput_mbps: f64, rtt_ms: f64, loss_rate: f64) -> f64 {
    telemetry::reward(throughput_mbps, rtt_ms, loss_rate)
}

#[pyfunction]
fn jains_index(x: Vec<f64>) -> PyResult<f64> {
    telemetry::jains_index(&x).map_err(py_err)
}

#[pyfunction]
fn scenario_names() -> Vec<&'static str> {
    Scenario::ALL.iter().map(|s| s.name()).collect()
}

type Row = (f64, usize, String, f64, f64, f64, f64);

/// Runs the configured flows and returns
/// `(time_s, flow_id, cca, throughput_mbps, loss_rate, rtt_ms, sending_rate_mbps)` rows.
#[pyfunction]
#[pyo3(signature = (config_toml=None, seed=None))]
fn simulate(config_toml: Option<&str>, seed: Option<u64>) -> PyResult<Vec<Row>> {
    let cfg = config(config_toml)?;
    let trace = run_scenario(&cfg.link, &cfg.flows(), &cfg.sim, seed.unwrap_or(cfg.seed)).map_err(py_err)?;
    Ok(trace
        .rows()
        .into_iter()
        .map(|r| (r.time_s, r.flow_id, r.cca.name().to_string(), r.throughput_mbps, r.loss_rate, r.rtt_ms, r.sending_rate_mbps))
        .collect())
}

#[pyclass(name = "Pool", module = "tcpllm_py")]
struct PyPool(ExperiencePool);

#[pymethods]
impl PyPool {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperiencePool::load(&path).map(Self).map_err(py_err)
    }

    /// Oracle-labeled closed-loop episodes.
    #[staticmethod]
    #[pyo3(signature = (config_toml=None))]
    fn oracle(py: Python<'_>, config_toml: Option<&str>) -> PyResult<Self> {
        let cfg = config(config_toml)?;
        py.detach(|| oracle_pool(&cfg.link, &cfg.sim, &cfg.pool, &cfg.oracle)).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    fn counts_by_source(&self) -> std::collections::BTreeMap<String, usize> {
        self.0.counts_by_source()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Model", module = "tcpllm_py")]
struct PyModel(TcpLlm);

#[pymethods]
impl PyModel {
    /// Freshly initialized model from the `[model]` section.
    #[new]
    #[pyo3(signature = (config_toml=None))]
    fn new(config_toml: Option<&str>) -> PyResult<Self> {
        TcpLlm::new(config(config_toml)?.model).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        trainer::load_checkpoint(&path).map(|(m, _)| Self(m)).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.0, None, &path).map(drop).map_err(py_err)
    }

    #[getter]
    fn frozen_hash(&self) -> String {
        self.0.frozen_hash().to_string()
    }

    /// Trainable parameter counts per component.
    fn trainable_parameters(&self) -> Vec<(&'static str, usize)> {
        self.0.trainable_breakdown().to_vec()
    }

    /// Chooses a CCA for one flow from its recent
    /// `(throughput_mbps, loss_rate, rtt_ms, sending_rate_mbps, cca)` samples,
    /// oldest first. Returns the CCA name and the three logits.
    fn decide(&self, samples: Vec<(f64, f64, f64, f64, String)>) -> PyResult<(String, Vec<f32>)> {
        let cal: &Calibration =
            self.0.calibration.as_ref().ok_or_else(|| PyValueError::new_err("model has no calibration; train it first"))?;
        let mut rows = Vec::with_capacity(samples.len());
        for (i, (thr, loss, rtt, send, cca)) in samples.into_iter().enumerate() {
            let cca: CcaId = cca.parse().map_err(py_err)?;
            rows.push(MetricSample {
                time_s: i as f64 + 1.0,
                flow_id: 0,
                cca,
                throughput_mbps: thr,
                loss_rate: loss,
                rtt_ms: rtt,
                sending_rate_mbps: send,
            });
        }
        if rows.is_empty() {
            return Err(PyValueError::new_err("no samples"));
        }
        let window = Window::from_samples(&rows, self.0.config.context_steps, cal);
        let d = self.0.decide(0, rows.len() as f64, &window).map_err(py_err)?;
        Ok((d.chosen.name().to_string(), d.logits.to_vec()))
    }
}

/// Fine-tunes a fresh model on `pool`; `mode` is `"rl"` or `"sl"`.
/// Returns the model and the per-epoch records as JSON strings.
#[pyfunction]
#[pyo3(signature = (pool, mode="rl", config_toml=None))]
fn train(py: Python<'_>, pool: &PyPool, mode: &str, config_toml: Option<&str>) -> PyResult<(PyModel, Vec<String>)> {
    let mut cfg = config(config_toml)?;
    cfg.train.mode = match mode {
        "rl" => Mode::Rl,
        "sl" => Mode::Sl,
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    };
    cfg.model.task = cfg.train.task();
    cfg.validate().map_err(py_err)?;
    let pool = &pool.0;
    let trained = py
        .detach(|| match cfg.train.mode {
            Mode::Rl => trainer::train_rl(pool, &cfg.model, &cfg.train),
            Mode::Sl => {
                let ds = trainer::SlDataset::from_pool(pool, cfg.model.context_steps, cfg.train.sl_target, cfg.train.window_stride)?;
                trainer::train_sl(&ds, &cfg.model, &cfg.train)
            }
        })
        .map_err(py_err)?;
    let epochs = trained.report.epochs.iter().map(|e| serde_json::to_string(e).expect("epoch record serializes")).collect();
    Ok((PyModel(trained.model), epochs))
}

/// Runs the policy on a scenario; returns its arm report as JSON.
#[pyfunction]
#[pyo3(signature = (model, scenario, config_toml=None, seed=None))]
fn evaluate(py: Python<'_>, model: &PyModel, scenario: &str, config_toml: Option<&str>, seed: Option<u64>) -> PyResult<String> {
    let cfg = config(config_toml)?;
    let scenario: Scenario = scenario.parse().map_err(py_err)?;
    let settings = EvalSettings {
        link: &cfg.link,
        sim: &cfg.sim,
        seed: seed.unwrap_or(cfg.seed),
        switch_interval_s: cfg.eval.switch_interval_s,
        detectors: &cfg.detectors,
        settle_s: cfg.eval.settle_s,
    };
    let model = &model.0;
    let eval = py.detach(|| trainer::evaluate_policy(model, scenario, &settings)).map_err(py_err)?;
    Ok(serde_json::to_string(&eval.report).expect("arm report serializes"))
}

#[pymodule]
fn tcpllm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(reward, m)?)?;
    m.add_function(wrap_pyfunction!(jains_index, m)?)?;
    m.add_function(wrap_pyfunction!(scenario_names, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<PyPool>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
