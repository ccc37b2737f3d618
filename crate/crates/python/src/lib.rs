//! Python bindings. Parameters are a class; everything else crosses the
//! boundary as plain dicts and lists.

use std::str::FromStr;

use pyo3::exceptions::{PyAttributeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyTuple};

use dlcz_core::correlator::{estimate_metrics_with, CountTable, ErrorMethod, Estimate};
use dlcz_core::event_sim::{simulate_counts as sim_counts, SessionSpec};
use dlcz_core::model_fit::{self, Bounds, Dataset, FitOptions};
use dlcz_core::params::PARAM_KEYS;
use dlcz_core::{DetectionConfig, DetectionMode};

fn err(e: dlcz_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mode(s: &str) -> PyResult<DetectionMode> {
    DetectionMode::from_str(s).map_err(err)
}

#[pyclass(name = "ModelParams", module = "dlcz", from_py_object)]
#[derive(Clone)]
struct ModelParams {
    inner: dlcz_core::ModelParams,
}

#[pymethods]
impl ModelParams {
    /// Keyword arguments override the defaults.
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = dlcz_core::ModelParams::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                inner.set(&k.extract::<String>()?, v.extract()?).map_err(err)?;
            }
        }
        inner.validate().map_err(err)?;
        Ok(ModelParams { inner })
    }

    #[staticmethod]
    fn reference_regime() -> Self {
        ModelParams {
            inner: dlcz_core::ModelParams::reference_regime(),
        }
    }

    #[staticmethod]
    fn from_document(text: &str) -> PyResult<Self> {
        Ok(ModelParams {
            inner: text.parse().map_err(err)?,
        })
    }

    fn to_document(&self) -> String {
        self.inner.to_document_string()
    }

    fn with_chi(&self, chi: f64) -> PyResult<Self> {
        let inner = self.inner.with_chi(chi);
        inner.validate().map_err(err)?;
        Ok(ModelParams { inner })
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for k in PARAM_KEYS {
            d.set_item(k, self.inner.get(k))?;
        }
        Ok(d)
    }

    fn __getattr__(&self, key: &str) -> PyResult<f64> {
        self.inner
            .get(key)
            .ok_or_else(|| PyAttributeError::new_err(format!("no parameter `{key}`")))
    }

    fn __setattr__(&mut self, key: &str, value: f64) -> PyResult<()> {
        let mut next = self.inner;
        next.set(key, value).map_err(err)?;
        next.validate().map_err(err)?;
        self.inner = next;
        Ok(())
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let body: Vec<String> = PARAM_KEYS
            .iter()
            .map(|k| format!("{k}={}", self.inner.get(k).unwrap()))
            .collect();
        format!("ModelParams({})", body.join(", "))
    }
}

/// Exact click probabilities.
#[pyfunction]
#[pyo3(signature = (params, mode = "single"))]
fn click_statistics<'py>(py: Python<'py>, params: &ModelParams, mode: &str) -> PyResult<Bound<'py, PyDict>> {
    let s = dlcz_core::click_statistics(&params.inner, &DetectionConfig::new(self::mode(mode)?)).map_err(err)?;
    let d = PyDict::new(py);
    for (k, v) in s.fields() {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Derived correlation metrics; undefined values are `None`.
#[pyfunction]
#[pyo3(signature = (params, mode = "single"))]
fn derived_metrics<'py>(py: Python<'py>, params: &ModelParams, mode: &str) -> PyResult<Bound<'py, PyDict>> {
    let s = dlcz_core::click_statistics(&params.inner, &DetectionConfig::new(self::mode(mode)?)).map_err(err)?;
    let m = dlcz_core::derived_metrics(&s, &params.inner);
    let d = PyDict::new(py);
    d.set_item("g12", m.g12)?;
    d.set_item("pc", m.pc)?;
    d.set_item("qc", m.qc)?;
    d.set_item("w", m.w)?;
    d.set_item("p12", m.p12)?;
    d.set_item("naive_ratio", m.naive_ratio)?;
    Ok(d)
}

fn counts_dict<'py>(py: Python<'py>, t: &CountTable) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mode", t.mode.to_string())?;
    d.set_item("n_trials", t.n_trials)?;
    for (k, v) in t.named_counts() {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Monte Carlo coincidence counts for one session.
#[pyfunction]
#[pyo3(signature = (params, n_trials, seed = 1, mode = "single"))]
fn simulate_counts<'py>(
    py: Python<'py>,
    params: &ModelParams,
    n_trials: u64,
    seed: u64,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = SessionSpec::new(params.inner, self::mode(mode)?, n_trials, seed);
    let table = py.detach(|| sim_counts(&spec)).map_err(err)?;
    counts_dict(py, &table)
}

fn table_from_dict(counts: &Bound<'_, PyDict>) -> PyResult<CountTable> {
    let get = |k: &str| -> PyResult<u64> {
        match counts.get_item(k)? {
            Some(v) => v.extract(),
            None => Ok(0),
        }
    };
    let m: String = counts
        .get_item("mode")?
        .ok_or_else(|| PyValueError::new_err("counts need a `mode` entry"))?
        .extract()?;
    let mut t = CountTable::with_trials(mode(&m)?, get("n_trials")?);
    t.n1 = get("n1")?;
    t.n2 = get("n2")?;
    t.n12 = get("n12")?;
    t.n2a = get("n2a")?;
    t.n2b = get("n2b")?;
    t.n2a_2b = get("n2a_2b")?;
    t.n1_2a = get("n1_2a")?;
    t.n1_2b = get("n1_2b")?;
    t.n1_2a_2b = get("n1_2a_2b")?;
    Ok(t)
}

fn pair<'py>(py: Python<'py>, e: Estimate) -> PyResult<Bound<'py, PyTuple>> {
    PyTuple::new(py, [e.value, e.se])
}

/// Metric estimates from a counts dict as produced by `simulate_counts`.
/// Each metric maps to `(value, standard_error)`; undefined entries are `None`.
#[pyfunction]
#[pyo3(signature = (counts, eta2, method = "delta", replicates = 1000, seed = 0))]
fn estimate<'py>(
    py: Python<'py>,
    counts: &Bound<'py, PyDict>,
    eta2: f64,
    method: &str,
    replicates: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let table = table_from_dict(counts)?;
    let method = match method {
        "delta" => ErrorMethod::Delta,
        "bootstrap" => ErrorMethod::Bootstrap { replicates, seed },
        other => return Err(PyValueError::new_err(format!("unknown error method `{other}`"))),
    };
    let m = py.detach(|| estimate_metrics_with(&table, eta2, method)).map_err(err)?;
    let d = PyDict::new(py);
    for (k, e) in m.named() {
        d.set_item(k, pair(py, e)?)?;
    }
    d.set_item("low_counts", m.low_counts.clone())?;
    Ok(d)
}

/// Model curves over a list of drive strengths.
#[pyfunction]
#[pyo3(signature = (params, chis, mode = "single"))]
fn predict_curves<'py>(
    py: Python<'py>,
    params: &ModelParams,
    chis: Vec<f64>,
    mode: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = model_fit::predict_curves(&params.inner, &chis, self::mode(mode)?).map_err(err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("chi", r.chi)?;
            d.set_item("p1", r.p1)?;
            d.set_item("g12", r.g12)?;
            d.set_item("qc", r.qc)?;
            d.set_item("p12", r.p12)?;
            d.set_item("w", r.w)?;
            Ok(d)
        })
        .collect()
}

/// Simulated dataset as CSV text, in the format `fit` reads.
#[pyfunction]
#[pyo3(signature = (params, chis, trials_per_point, seed = 0, mode = "split"))]
fn synthetic_dataset(
    py: Python<'_>,
    params: &ModelParams,
    chis: Vec<f64>,
    trials_per_point: u64,
    seed: u64,
    mode: &str,
) -> PyResult<String> {
    let mode = self::mode(mode)?;
    let ds = py
        .detach(|| model_fit::synthetic_dataset(&params.inner, &chis, mode, trials_per_point, seed))
        .map_err(err)?;
    Ok(ds.to_csv_string())
}

/// Global fit of a CSV dataset. `bounds` maps a key to `(lo, hi)` to free it
/// or to a number to fix it.
#[pyfunction]
#[pyo3(signature = (dataset_csv, init = None, bounds = None, mode = "single", starts = 16, seed = 0))]
fn fit<'py>(
    py: Python<'py>,
    dataset_csv: &str,
    init: Option<&ModelParams>,
    bounds: Option<&Bound<'py, PyDict>>,
    mode: &str,
    starts: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let ds = Dataset::from_csv_str(dataset_csv).map_err(err)?;
    let init = init.map(|p| p.inner).unwrap_or_default();
    let mut b = Bounds::default();
    if let Some(bd) = bounds {
        for (k, v) in bd.iter() {
            let key: String = k.extract()?;
            let bound = match v.extract::<(f64, f64)>() {
                Ok((lo, hi)) => model_fit::Bound::Range { lo, hi },
                Err(_) => model_fit::Bound::Fixed(v.extract()?),
            };
            b.set(&key, bound);
        }
    }
    let opts = FitOptions {
        mode: self::mode(mode)?,
        starts,
        seed,
        ..FitOptions::default()
    };
    let r = py.detach(|| model_fit::fit(&ds, &init, &b, &opts)).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("params", ModelParams { inner: r.params })?;
    let values = PyDict::new(py);
    for (i, k) in r.free.iter().enumerate() {
        values.set_item(k, PyTuple::new(py, [r.values[i], r.std_errors[i]])?)?;
    }
    d.set_item("free", values)?;
    d.set_item("covariance", r.covariance.clone())?;
    d.set_item("objective", r.objective)?;
    d.set_item("dof", r.dof)?;
    d.set_item("chi", r.chi.clone())?;
    d.set_item("converged", r.converged)?;
    d.set_item("flagged", r.flagged)?;
    d.set_item("warnings", r.warnings.clone())?;
    d.set_item("report", r.to_document_string())?;
    Ok(d)
}

#[pymodule]
fn dlcz(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<ModelParams>()?;
    m.add_function(wrap_pyfunction!(click_statistics, m)?)?;
    m.add_function(wrap_pyfunction!(derived_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_counts, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(predict_curves, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    Ok(())
}
