//! Python bindings: dataset generation, the MIL loss, mean IU and a
//! checkpoint-backed segmenter.

use std::collections::BTreeMap;
use std::path::PathBuf;

use milfcn::data::synth::{generate_dataset as generate, DatasetSpec};
use milfcn::mil::{infer_mask, mil_loss_from_scores};
use milfcn::train::{load_checkpoint, mean_iu as iu, save_checkpoint, OptimState};
use milfcn::{build_network, Graph, LabelBag, Network, NetworkConfig, SegmentationMask, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: milfcn::Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Writes a synthetic dataset under `root`.
#[pyfunction]
#[pyo3(signature = (root, seed=1, num_train=500, num_val=100, size=64))]
fn generate_dataset(root: PathBuf, seed: u64, num_train: usize, num_val: usize, size: usize) -> PyResult<()> {
    let spec = DatasetSpec {
        num_train,
        num_val,
        height: size,
        width: size,
        seed,
        ..DatasetSpec::default()
    };
    generate(&spec, &root).map_err(to_py)
}

/// MIL loss of a `(classes, height, width)` score map, flattened row-major.
/// Returns the loss and the selected `(y, x)` point for each bag label.
#[pyfunction]
fn mil_loss(
    scores: Vec<f64>,
    shape: (usize, usize, usize),
    bag: Vec<usize>,
) -> PyResult<(f64, BTreeMap<usize, (usize, usize)>)> {
    let (c, h, w) = shape;
    let scores = Tensor::new(&[c, h, w], scores).map_err(to_py)?;
    let bag = LabelBag::new(bag, c.saturating_sub(1)).map_err(to_py)?;
    let mut g = Graph::new();
    let s = g.leaf(scores);
    let out = mil_loss_from_scores(&mut g, s, &bag).map_err(to_py)?;
    let points = out.points.iter().map(|(&l, p)| (l, (p.y, p.x))).collect();
    Ok((g.value(out.loss).data()[0], points))
}

/// Mean IU of one predicted mask against its ground truth.
#[pyfunction]
fn mean_iu(pred: Vec<u8>, truth: Vec<u8>, height: usize, width: usize, num_classes: usize) -> PyResult<f64> {
    let pred = SegmentationMask::new(height, width, pred).map_err(to_py)?;
    let truth = SegmentationMask::new(height, width, truth).map_err(to_py)?;
    Ok(iu(&[pred], &[truth], num_classes).map_err(to_py)?.mean)
}

#[pyclass]
struct Segmenter {
    net: Network,
}

#[pymethods]
impl Segmenter {
    /// A freshly initialized network with the default architecture.
    #[new]
    #[pyo3(signature = (seed=0, num_fg_classes=4))]
    fn new(seed: u64, num_fg_classes: usize) -> PyResult<Self> {
        let net = build_network(NetworkConfig::with_classes(num_fg_classes), seed).map_err(to_py)?;
        Ok(Segmenter { net })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (net, _) = load_checkpoint(&path).map_err(to_py)?;
        Ok(Segmenter { net })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.net, &OptimState::for_network(&self.net), &path).map_err(to_py)
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.net.config().num_classes()
    }

    #[getter]
    fn downsample(&self) -> usize {
        self.net.config().downsample
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Label per pixel for a `(3, height, width)` image in `[0, 1]`, flattened row-major.
    fn predict(&self, image: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<u8>> {
        let image = Tensor::new(&[3, height, width], image).map_err(to_py)?;
        let scores = self.net.predict(&image).map_err(to_py)?;
        let mask = infer_mask(&scores, height, width).map_err(to_py)?;
        Ok(mask.labels().to_vec())
    }
}

#[pymodule]
fn milfcn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(mil_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mean_iu, m)?)?;
    m.add_class::<Segmenter>()?;
    Ok(())
}
