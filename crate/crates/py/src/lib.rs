//! Python bindings. Images and features cross the boundary as nested lists;
//! configurations cross as JSON strings so every field stays reachable
//! without a parallel Python schema.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

use lodisc::data::{Dataset, SyntheticSpec};
use lodisc::eval::{self, FeatureBank, ProbeConfig, Split};
use lodisc::masking::{self, FusedImportance};
use lodisc::numerics::{Tape, Tensor};
use lodisc::pipeline::{PretrainConfig, Trainer};
use lodisc::{checkpoint, losses, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Index(msg) => PyIndexError::new_err(msg),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, json_to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py, S: Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<(usize, usize, Vec<f64>)> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("{what} rows have unequal lengths")));
    }
    Ok((rows.len(), d, rows.concat()))
}

fn bank(rows: &[Vec<f64>], labels: Vec<usize>, split: Split) -> PyResult<FeatureBank> {
    let (_, d, flat) = matrix(rows, "feature")?;
    FeatureBank::new(flat.into_iter().map(|v| v as f32).collect(), d, labels, split).map_err(py_err)
}

/// Number of patches kept at masking ratio `r` over `n` patches.
#[pyfunction]
fn kept_count(n: usize, r: f64) -> PyResult<usize> {
    masking::kept_count(n, r).map_err(py_err)
}

/// Log-domain fusion of per-layer class-attention vectors for one view.
#[pyfunction]
fn fuse_attention(vectors: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    Ok(masking::fuse_attention(&vectors, 0).map_err(py_err)?.log_weights)
}

/// Kept patch indices and the log threshold for fused weights at ratio `r`.
#[pyfunction]
fn select_pivotal(log_weights: Vec<f64>, r: f64) -> PyResult<(Vec<usize>, Option<f64>)> {
    let fi = FusedImportance {
        log_weights,
        view_index: 0,
    };
    let mask = masking::select_pivotal(&fi, r).map_err(py_err)?;
    Ok((mask.kept_indices(), mask.threshold()))
}

fn loss_of(rows: &[&[Vec<f64>]], tau: f64) -> PyResult<f64> {
    let tape = Tape::<f64>::new();
    let mut vars = Vec::with_capacity(rows.len());
    for r in rows {
        let (b, d, flat) = matrix(r, "representation")?;
        vars.push(tape.constant(Tensor::new(&[b, d], flat).map_err(py_err)?));
    }
    let out = match vars.as_slice() {
        [q, k] => losses::info_nce(*q, *k, tau),
        [q1, q2, k1, k2] => losses::symmetric_loss(*q1, *q2, *k1, *k2, tau),
        _ => unreachable!("callers pass two or four matrices"),
    }
    .map_err(py_err)?;
    Ok(out.value().data()[0])
}

/// Contrastive loss of queries `q` against keys `k`, matched by row.
#[pyfunction]
fn info_nce(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    loss_of(&[&q, &k], tau)
}

#[pyfunction]
fn symmetric_loss(
    q1: Vec<Vec<f64>>,
    q2: Vec<Vec<f64>>,
    k1: Vec<Vec<f64>>,
    k2: Vec<Vec<f64>>,
    tau: f64,
) -> PyResult<f64> {
    loss_of(&[&q1, &q2, &k1, &k2], tau)
}

#[pyfunction]
#[pyo3(signature = (queries, query_labels, gallery, gallery_labels, same_bank = false))]
fn retrieve<'py>(
    py: Python<'py>,
    queries: Vec<Vec<f64>>,
    query_labels: Vec<usize>,
    gallery: Vec<Vec<f64>>,
    gallery_labels: Vec<usize>,
    same_bank: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let q = bank(&queries, query_labels, Split::Test)?;
    let g = bank(&gallery, gallery_labels, Split::Train)?;
    to_py(py, &eval::retrieve(&q, &g, same_bank).map_err(py_err)?)
}

#[pyfunction]
#[pyo3(signature = (train, train_labels, test, test_labels, epochs = 100, seed = 0))]
fn linear_probe<'py>(
    py: Python<'py>,
    train: Vec<Vec<f64>>,
    train_labels: Vec<usize>,
    test: Vec<Vec<f64>>,
    test_labels: Vec<usize>,
    epochs: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = ProbeConfig {
        epochs,
        seed,
        ..ProbeConfig::default()
    };
    let tr = bank(&train, train_labels, Split::Train)?;
    let te = bank(&test, test_labels, Split::Test)?;
    to_py(py, &eval::linear_probe(&tr, &te, &cfg).map_err(py_err)?)
}

#[pyclass(name = "Dataset", module = "lodisc")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generated shapes over noise, with foreground masks.
    #[staticmethod]
    #[pyo3(signature = (num_classes = 2, images_per_class = 128, image_size = 32, seed = 0))]
    fn synthetic(num_classes: usize, images_per_class: usize, image_size: usize, seed: u64) -> PyResult<Self> {
        let spec = SyntheticSpec {
            num_classes,
            images_per_class,
            image_size,
            seed,
            ..SyntheticSpec::default()
        };
        Ok(Self {
            inner: spec.generate().map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.inner.len()) {
            return Err(PyIndexError::new_err(format!("image {i} out of range")));
        }
        Ok(Self {
            inner: self.inner.subset(&indices),
        })
    }

    /// Image `i` flattened channel-major.
    fn image(&self, i: usize) -> PyResult<Vec<f32>> {
        self.check(i)?;
        Ok(self.inner.image(i).to_vec())
    }

    fn foreground(&self, i: usize) -> PyResult<Option<Vec<u8>>> {
        self.check(i)?;
        Ok(self.inner.foreground(i).map(<[u8]>::to_vec))
    }

    /// Standardizes channels in place and returns `(mean, std)`.
    fn normalize(&mut self) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let stats = self.inner.normalize().map_err(py_err)?;
        Ok((stats.mean, stats.std))
    }
}

impl PyDataset {
    fn check(&self, i: usize) -> PyResult<()> {
        if i >= self.inner.len() {
            return Err(PyIndexError::new_err(format!("image {i} out of range")));
        }
        Ok(())
    }
}

/// Dual-encoder pre-training state.
#[pyclass(name = "Trainer", module = "lodisc")]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    /// `config` is a JSON object; omitted fields take their defaults.
    #[new]
    #[pyo3(signature = (dataset_len, config = None))]
    fn new(dataset_len: usize, config: Option<&str>) -> PyResult<Self> {
        let cfg: PretrainConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => PretrainConfig::default(),
        };
        Ok(Self {
            inner: Trainer::new(cfg, dataset_len).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.inner, &path).map_err(py_err)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step()
    }

    #[getter]
    fn epoch(&self) -> u64 {
        self.inner.epoch()
    }

    fn train_step<'py>(&mut self, py: Python<'py>, data: &PyDataset, batch: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
        let report = self.inner.train_step(&data.inner, &batch).map_err(py_err)?;
        to_py(py, &report)
    }

    fn train_epoch<'py>(&mut self, py: Python<'py>, data: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        let report = self.inner.train_epoch(&data.inner, |_| {}).map_err(py_err)?;
        to_py(py, &report)
    }

    /// Kept patch indices of the first views in the last step, if masked.
    fn last_masks(&self) -> Option<Vec<Vec<usize>>> {
        self.inner
            .last_masks()
            .map(|ms| ms.iter().map(|m| m.kept_indices()).collect())
    }

    /// Query-encoder features of every image, one row per image.
    fn features(&self, data: &PyDataset) -> PyResult<Vec<Vec<f32>>> {
        let bank = eval::extract_features(&self.inner.encoder, &data.inner, Split::Train).map_err(py_err)?;
        Ok((0..bank.len()).map(|i| bank.row(i).to_vec()).collect())
    }
}

#[pymodule(name = "lodisc")]
fn lodisc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kept_count, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_attention, m)?)?;
    m.add_function(wrap_pyfunction!(select_pivotal, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(symmetric_loss, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve, m)?)?;
    m.add_function(wrap_pyfunction!(linear_probe, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    Ok(())
}
