//! Python bindings: models, datasets, training, cost accounting and the
//! pruning loop. Tensors cross the boundary as flat lists plus a shape.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use gcp_core::cost::{Objective, ObjectiveKind};
use gcp_core::data::{synthetic_cifar, Dataset, Normalization, SyntheticSpec};
use gcp_core::gcp::{self, GcpConfig, PruneHistory};
use gcp_core::io::{self, Checkpoint};
use gcp_core::network::{self, Model};
use gcp_core::tensor::{soft_threshold_scalar, BnMode, Tensor};
use gcp_core::train::{self, TrainConfig};

create_exception!(gcp_py, GcpError, PyException);

fn err(e: gcp_core::error::Error) -> PyErr {
    GcpError::new_err(e.to_string())
}

fn objective(name: &str, table: Option<PathBuf>) -> PyResult<Objective> {
    let kind: ObjectiveKind = name.parse().map_err(err)?;
    io::load_objective(kind, table.as_deref()).map_err(err)
}

#[pyclass(name = "Dataset", module = "gcp_py")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Train and test splits of the synthetic 32×32 RGB texture task with
    /// ten classes, both normalized with the training statistics.
    #[staticmethod]
    #[pyo3(signature = (train, test, seed=0))]
    fn synthetic(train: usize, test: usize, seed: u64) -> PyResult<(Self, Self)> {
        let make = |samples, seed| {
            synthetic_cifar(&SyntheticSpec {
                samples,
                seed,
                ..SyntheticSpec::default()
            })
        };
        let (a, b) = (make(train, 2 * seed + 1), make(test, 2 * seed + 2));
        let norm = Normalization::fit(&a).map_err(err)?;
        let wrap = |raw| -> PyResult<Self> {
            Ok(Self {
                inner: Dataset::from_raw(raw, &norm, 10).map_err(err)?,
            })
        };
        Ok((wrap(&a)?, wrap(&b)?))
    }

    /// Already-normalized NCHW images as a flat list.
    #[staticmethod]
    fn from_flat(images: Vec<f32>, shape: [usize; 4], labels: Vec<usize>, classes: usize) -> PyResult<Self> {
        let t = Tensor::new(shape.to_vec(), images).map_err(err)?;
        Ok(Self {
            inner: Dataset::from_tensor(&t, labels, classes).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }
}

#[pyclass(name = "Model", module = "gcp_py")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Randomly initialized built-in architecture (`resnet8` or `convnet6`).
    #[new]
    #[pyo3(signature = (arch="resnet8", seed=0, channels=3, height=32, width=32, classes=10))]
    fn new(arch: &str, seed: u64, channels: usize, height: usize, width: usize, classes: usize) -> PyResult<Self> {
        let spec = network::builtin(arch, channels, height, width, classes).map_err(err)?;
        Ok(Self {
            inner: Model::init(spec, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_model(&path).map_err(err)?.model,
        })
    }

    #[pyo3(signature = (path, seed=0))]
    fn save(&self, path: PathBuf, seed: u64) -> PyResult<()> {
        io::save_model(&path, &Checkpoint::new(self.inner.clone(), seed)).map_err(err)
    }

    /// Logits in FrozenStats mode for flat NCHW input, row-major.
    fn logits(&self, images: Vec<f32>, shape: [usize; 4]) -> PyResult<Vec<f32>> {
        let x = Tensor::new(shape.to_vec(), images).map_err(err)?;
        Ok(network::predict(&self.inner, &x, BnMode::FrozenStats)
            .map_err(err)?
            .into_data())
    }

    /// Kept channels per channel group.
    fn kept_per_group(&self) -> Vec<usize> {
        self.inner.groups().iter().map(|g| g.kept_count()).collect()
    }

    /// Total cost of the network the model computes.
    #[pyo3(signature = (objective="flops", latency_table=None))]
    fn cost(&self, objective: &str, latency_table: Option<PathBuf>) -> PyResult<f64> {
        let obj = self::objective(objective, latency_table)?;
        Ok(gcp::model_cost(&self.inner, &obj).map_err(err)?.total)
    }

    /// The smaller dense model equivalent to the masked one.
    fn materialize(&self) -> PyResult<Self> {
        let mask = network::PruneMask::current(&self.inner);
        Ok(Self {
            inner: network::materialize(&self.inner, &mask).map_err(err)?,
        })
    }

    /// `layer,kernel,original,kept` rows for every convolution.
    fn pattern_csv(&self) -> String {
        io::pattern_csv(&io::pattern_of(&self.inner))
    }

    /// Mean kept fraction over the first and the last half of the convolutions.
    fn half_keep_fractions(&self) -> (f64, f64) {
        gcp::half_keep_fractions(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, kept={:?})", self.inner.spec().name, self.kept_per_group())
    }
}

/// Trains with SGD in BatchStats mode; returns `(epoch, train_loss)` pairs.
#[pyfunction]
#[pyo3(signature = (model, data, epochs=10, lr=0.05, batch_size=64, seed=0))]
fn train_model(
    py: Python<'_>,
    model: &mut PyModel,
    data: &PyDataset,
    epochs: usize,
    lr: f32,
    batch_size: usize,
    seed: u64,
) -> PyResult<Vec<(usize, f64)>> {
    let cfg = TrainConfig {
        epochs,
        lr,
        batch_size,
        seed,
        ..TrainConfig::default()
    };
    let (m, d) = (&mut model.inner, &data.inner);
    let recs = py
        .detach(|| train::train(m, d, None, &cfg, |_| {}))
        .map_err(err)?;
    Ok(recs.into_iter().map(|r| (r.epoch, r.train_loss)).collect())
}

/// `(top1, top5)`; top-5 is `None` below five classes.
#[pyfunction]
fn evaluate(model: &PyModel, data: &PyDataset) -> PyResult<(f64, Option<f64>)> {
    let r = train::evaluate(&model.inner, &data.inner, 256).map_err(err)?;
    Ok((r.top1, r.top5))
}

/// Runs the pruning loop in place and returns the history as JSON.
#[pyfunction]
#[pyo3(signature = (model, data, objective="flops", eta=0.5, iterations=5, lam=None, finetune_epochs=None, seed=0, latency_table=None))]
#[allow(clippy::too_many_arguments)]
fn prune(
    py: Python<'_>,
    model: &mut PyModel,
    data: &PyDataset,
    objective: &str,
    eta: f64,
    iterations: usize,
    lam: Option<f64>,
    finetune_epochs: Option<usize>,
    seed: u64,
    latency_table: Option<PathBuf>,
) -> PyResult<String> {
    let obj = self::objective(objective, latency_table)?;
    let mut cfg = GcpConfig {
        objective: obj.kind(),
        eta,
        iterations,
        seed,
        ..GcpConfig::default()
    };
    if let Some(l) = lam {
        cfg.lambda = l;
    }
    if let Some(e) = finetune_epochs {
        cfg.finetune.epochs = e;
    }
    let mut history = PruneHistory::default();
    let (m, d) = (&mut model.inner, &data.inner);
    let r = py.detach(|| gcp::run_gcp(m, d, &cfg, &obj, &mut history, |_| {}));
    r.map_err(err)?;
    history.to_json().map_err(err)
}

/// Soft-thresholding `sign(x)·max(|x| − t, 0)`.
#[pyfunction]
fn soft_threshold(x: f64, t: f64) -> PyResult<f64> {
    soft_threshold_scalar(x, t).map_err(err)
}

/// FLOPs of one convolution: two per multiply-accumulate.
#[pyfunction]
fn layer_flops(n: usize, m: usize, k: usize, out_h: usize, out_w: usize) -> u64 {
    gcp_core::cost::layer_flops(n, m, k, out_h, out_w)
}

#[pymodule]
fn gcp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add("GcpError", m.py().get_type::<GcpError>())?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(layer_flops, m)?)?;
    Ok(())
}
