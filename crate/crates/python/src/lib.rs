//! Python module `pyrevq`.
//!
//! Frames are passed as lists of equal-length lists of floats (`T x D`);
//! expert ids are 1-based, as in the Rust API.

use std::collections::HashMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use revq::bitstream::combinatorics;
use revq::config::KeyValues;
use revq::trainer::{self, ModelConfig, SynthSpec, TrainConfig};
use revq::{FrameBatch, QuantizedWindow, RevqModel, RoutingMask};

fn err(e: revq::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn frames(rows: Vec<Vec<f64>>) -> PyResult<FrameBatch> {
    FrameBatch::from_rows(&rows).map_err(err)
}

fn to_rows(fb: &FrameBatch) -> Vec<Vec<f64>> {
    fb.iter_rows().map(<[f64]>::to_vec).collect()
}

#[pyclass(name = "QuantizedWindow", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyWindow {
    inner: QuantizedWindow,
}

#[pymethods]
impl PyWindow {
    #[new]
    fn new(n_experts: usize, selected: Vec<usize>, shared_codes: Vec<u32>, expert_codes: Vec<Vec<u32>>) -> PyResult<Self> {
        Ok(Self {
            inner: QuantizedWindow {
                mask: RoutingMask::new(n_experts, selected).map_err(err)?,
                shared_codes,
                expert_codes,
            },
        })
    }

    #[getter]
    fn selected(&self) -> Vec<usize> {
        self.inner.mask.selected().to_vec()
    }

    #[getter]
    fn shared_codes(&self) -> Vec<u32> {
        self.inner.shared_codes.clone()
    }

    #[getter]
    fn expert_codes(&self) -> Vec<Vec<u32>> {
        self.inner.expert_codes.clone()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "QuantizedWindow(selected={:?}, frames={})",
            self.inner.mask.selected(),
            self.inner.frames()
        )
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: RevqModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RevqModel::load(path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: RevqModel::from_bytes(data).map_err(err)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_bytes().map_err(err)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn n_experts(&self) -> usize {
        self.inner.n_experts()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn shared_size(&self) -> usize {
        self.inner.shared_size()
    }

    #[getter]
    fn expert_size(&self) -> usize {
        self.inner.expert_size()
    }

    /// Router affinity scores for a window.
    fn affinity(&self, window: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(self.inner.affinity(&frames(window)?).map_err(err)?.0)
    }

    /// Ascending 1-based ids of the `k_r` experts the router picks.
    fn route(&self, window: Vec<Vec<f64>>, k_r: usize) -> PyResult<Vec<usize>> {
        Ok(self.inner.route(&frames(window)?, k_r).map_err(err)?.selected().to_vec())
    }

    /// Returns `(codes, reconstruction)`.
    fn quantize(&self, window: Vec<Vec<f64>>, k_r: usize) -> PyResult<(PyWindow, Vec<Vec<f64>>)> {
        let (qw, recon) = self.inner.quantize(&frames(window)?, k_r).map_err(err)?;
        Ok((PyWindow { inner: qw }, to_rows(&recon)))
    }

    fn dequantize(&self, codes: &PyWindow) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.dequantize(&codes.inner).map_err(err)?))
    }

    /// Best `k_r`-subset by exhaustive search: `(ids, mse)`.
    fn oracle_select(&self, window: Vec<Vec<f64>>, k_r: usize) -> PyResult<(Vec<usize>, f64)> {
        let (mask, mse) = self.inner.oracle_select(&frames(window)?, k_r).map_err(err)?;
        Ok((mask.selected().to_vec(), mse))
    }

    /// Encodes PCM samples in [-1, 1] into an RVQ1 stream.
    #[pyo3(signature = (samples, sample_rate, k_r, frames_per_window = 16, block_size = None))]
    fn encode<'py>(
        &self,
        py: Python<'py>,
        samples: Vec<f64>,
        sample_rate: u32,
        k_r: usize,
        frames_per_window: usize,
        block_size: Option<usize>,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let sig = revq::frontend::PcmSignal::new(samples, sample_rate).map_err(err)?;
        let block = block_size.unwrap_or(self.inner.dim());
        let bytes = revq::codec::encode_signal(&self.inner, &sig, block, frames_per_window, k_r).map_err(err)?;
        Ok(PyBytes::new(py, &bytes))
    }

    /// Decodes a stream: `(samples, sample_rate)`.
    fn decode(&self, data: &[u8]) -> PyResult<(Vec<f64>, u32)> {
        let sig = revq::codec::decode_stream(&self.inner, data).map_err(err)?;
        Ok((sig.samples, sig.sample_rate))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(n_experts={}, dim={}, shared_size={}, expert_size={})",
            self.inner.n_experts(),
            self.inner.dim(),
            self.inner.shared_size(),
            self.inner.expert_size()
        )
    }
}

#[pyfunction]
fn binomial(n: usize, k: usize) -> u64 {
    combinatorics::binomial(n, k)
}

#[pyfunction]
fn mask_bits(n: usize, k: usize) -> PyResult<u32> {
    combinatorics::mask_bits(n, k).map_err(err)
}

#[pyfunction]
fn subset_rank(selected: Vec<usize>, n: usize) -> PyResult<u64> {
    combinatorics::subset_rank(&selected, n).map_err(err)
}

#[pyfunction]
fn subset_unrank(rank: u64, n: usize, k: usize) -> PyResult<Vec<usize>> {
    combinatorics::subset_unrank(rank, n, k).map_err(err)
}

/// Routing side information in bits per second: `(ceiled, exact)`.
#[pyfunction]
fn overhead_bps(n: usize, k: usize, window_seconds: f64) -> PyResult<(f64, f64)> {
    let o = combinatorics::overhead_bps(n, k, window_seconds).map_err(err)?;
    Ok((o.ceiled_bps, o.exact_bps))
}

/// Windows drawn from `modes` Gaussian clusters.
#[pyfunction]
#[pyo3(signature = (modes, dim, frames_per_window, n_windows, seed = 0, subspace_rank = 0, spread = 3.0))]
fn synth_windows(
    modes: usize,
    dim: usize,
    frames_per_window: usize,
    n_windows: usize,
    seed: u64,
    subspace_rank: usize,
    spread: f64,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let spec = SynthSpec::clustered(modes, dim, frames_per_window, spread, (1.0, 1.0), seed)
        .map_err(err)?
        .with_subspaces(subspace_rank, seed + 1);
    let data = trainer::synth_dataset(&spec, n_windows, seed + 2).map_err(err)?;
    Ok(data.iter().map(to_rows).collect())
}

/// Initializes and trains a model. `config` takes the same keys as the
/// command-line config file. Returns `(model, per-step batch mse)`.
#[pyfunction]
#[pyo3(signature = (windows, config = None))]
fn train(windows: Vec<Vec<Vec<f64>>>, config: Option<HashMap<String, String>>) -> PyResult<(PyModel, Vec<f64>)> {
    let mut kv = KeyValues::default();
    for (k, v) in config.unwrap_or_default() {
        kv.set(&k, v);
    }
    let data = windows.into_iter().map(frames).collect::<PyResult<Vec<_>>>()?;
    if let Some(first) = data.first() {
        if kv.get_str("frames_per_window").is_none() {
            kv.set("frames_per_window", first.rows());
        }
    }
    let mc = ModelConfig::from_key_values(&kv).map_err(err)?;
    let tc = TrainConfig::from_key_values(&kv).map_err(err)?;
    let init = trainer::init_model(&data, &mc).map_err(err)?;
    let (model, history) = trainer::train(&tc, &data, init).map_err(err)?;
    Ok((PyModel { inner: model }, history.records.iter().map(|r| r.mse).collect()))
}

#[pymodule]
fn pyrevq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyWindow>()?;
    m.add_function(wrap_pyfunction!(binomial, m)?)?;
    m.add_function(wrap_pyfunction!(mask_bits, m)?)?;
    m.add_function(wrap_pyfunction!(subset_rank, m)?)?;
    m.add_function(wrap_pyfunction!(subset_unrank, m)?)?;
    m.add_function(wrap_pyfunction!(overhead_bps, m)?)?;
    m.add_function(wrap_pyfunction!(synth_windows, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
