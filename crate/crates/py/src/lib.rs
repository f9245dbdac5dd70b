//! Python bindings. Arrays cross the boundary as flat lists plus a shape.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;

use medformer::bench::{self, BenchShape, Variant};
use medformer::data::{self, mft, MftData, MftFile, SegSample};
use medformer::labels::LabelMap;
use medformer::model::{load_checkpoint, save_checkpoint};
use medformer::train::{self, Preprocess, RunConfig};
use medformer::{metrics, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for medformer::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// An f32 MedFormer with the metadata of the checkpoint it came from.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    inner: medformer::model::Model<f32>,
    meta: BTreeMap<String, String>,
}

#[pymethods]
impl PyModel {
    /// Builds a fresh model from `key=value` model keys (defaults fill the rest).
    #[new]
    #[pyo3(signature = (config = "", seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg = RunConfig::parse(config).py()?;
        Ok(PyModel {
            inner: medformer::model::Model::build(&cfg.model, seed).py()?,
            meta: BTreeMap::new(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint::<f32>(&path).py()?;
        Ok(PyModel {
            inner: ck.model,
            meta: ck.meta,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, &self.meta).py()
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn config(&self) -> BTreeMap<String, String> {
        self.inner.cfg.to_kv()
    }

    fn meta(&self) -> BTreeMap<String, String> {
        self.meta.clone()
    }

    /// Logits `[classes, H, W]` for one `[C, H, W]` image.
    fn forward(&self, image: Vec<f32>, shape: (usize, usize, usize)) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let x = Tensor::from_vec(&[shape.0, shape.1, shape.2], image).py()?;
        let _g = medformer::tensor::no_grad();
        let out = self.inner.forward(&x).py()?.logits;
        Ok((out.shape().to_vec(), out.to_vec()))
    }

    /// Sliding-window label map of an already preprocessed image.
    #[pyo3(signature = (image, shape, window = None))]
    fn predict(&self, image: Vec<f32>, shape: (usize, usize, usize), window: Option<(usize, usize)>) -> PyResult<Vec<u8>> {
        let x = Tensor::from_vec(&[shape.0, shape.1, shape.2], image).py()?;
        let probs = data::sliding_window_infer(&self.inner, &x, window.unwrap_or((shape.1, shape.2)), true).py()?;
        Ok(LabelMap::argmax(&probs).py()?.data)
    }
}

/// `(dtype, shape, values)`; every dtype comes back as floats.
#[pyfunction]
fn read_mft(path: PathBuf) -> PyResult<(String, Vec<usize>, Vec<f64>)> {
    let f = mft::read_mft(&path).py()?;
    let dtype = format!("{:?}", f.dtype()).to_lowercase();
    let values = match f.data {
        MftData::F32(v) => v.into_iter().map(f64::from).collect(),
        MftData::F64(v) => v,
        MftData::U8(v) => v.into_iter().map(f64::from).collect(),
    };
    Ok((dtype, f.shape, values))
}

#[pyfunction]
#[pyo3(signature = (path, shape, values, dtype = "f32"))]
fn write_mft(path: PathBuf, shape: Vec<usize>, values: Vec<f64>, dtype: &str) -> PyResult<()> {
    if shape.iter().product::<usize>() != values.len() {
        return Err(PyValueError::new_err(format!("{} values for shape {shape:?}", values.len())));
    }
    let data = match dtype {
        "f32" => MftData::F32(values.iter().map(|&v| v as f32).collect()),
        "f64" => MftData::F64(values),
        "u8" => MftData::U8(values.iter().map(|&v| v as u8).collect()),
        _ => return Err(PyValueError::new_err(format!("unknown dtype `{dtype}`"))),
    };
    mft::write_mft(&path, &MftFile { shape, data }).py()
}

fn masks(pred: Vec<u8>, gt: Vec<u8>, h: usize, w: usize) -> PyResult<(LabelMap, LabelMap)> {
    Ok((LabelMap::new(h, w, pred).py()?, LabelMap::new(h, w, gt).py()?))
}

#[pyfunction]
fn dsc(pred: Vec<u8>, gt: Vec<u8>, h: usize, w: usize, class: u8) -> PyResult<f64> {
    let (p, g) = masks(pred, gt, h, w)?;
    metrics::dsc(&p, &g, class).py()
}

#[pyfunction]
#[pyo3(signature = (pred, gt, h, w, class, spacing = (1.0, 1.0)))]
fn hd95(pred: Vec<u8>, gt: Vec<u8>, h: usize, w: usize, class: u8, spacing: (f64, f64)) -> PyResult<f64> {
    let (p, g) = masks(pred, gt, h, w)?;
    metrics::hd95(&p, &g, class, spacing).py()
}

#[pyfunction]
fn formula_macs(variant: &str, h: u64, w: u64, d: u64, k: u64, m: u64, hw: u64) -> PyResult<u64> {
    let v: Variant = variant.parse().py()?;
    Ok(bench::formula_macs(v, h, w, d, k, m, hw))
}

/// Counted MACs of one forward pass of `variant` on an `h×w` map.
#[pyfunction]
#[pyo3(signature = (variant, h, w, d = 8))]
fn measured_macs(variant: &str, h: usize, w: usize, d: usize) -> PyResult<u64> {
    let v: Variant = variant.parse().py()?;
    let s = BenchShape { h, w, d, ..bench::default_shape() };
    bench::measured_macs(v, &s).py()
}

#[pyfunction]
#[pyo3(signature = (out, n_train, n_val, size = 64, classes = 2, seed = 0))]
fn synth_dataset(out: PathBuf, n_train: usize, n_val: usize, size: usize, classes: usize, seed: u64) -> PyResult<usize> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let samples = data::synth_task(&mut rng, n_train + n_val, size, size, classes).py()?;
    let tagged: Vec<(SegSample, String)> = samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, if i < n_train { "train" } else { "val" }.to_string()))
        .collect();
    data::write_dataset(&out, classes, &tagged).py()?;
    Ok(tagged.len())
}

/// Trains on a dataset directory and returns per-epoch metrics.
#[pyfunction]
fn train_run(config: &str, data_dir: PathBuf, out: PathBuf) -> PyResult<Vec<BTreeMap<String, f64>>> {
    let cfg = RunConfig::parse(config).py()?;
    let ds = data::Dataset::open(&data_dir).py()?;
    let (_, report) = train::run_training(&cfg, &ds, &out).py()?;
    Ok(report
        .history
        .iter()
        .map(|e| {
            let mut m = BTreeMap::new();
            m.insert("epoch".to_string(), e.epoch as f64);
            m.insert("lr".to_string(), e.lr);
            m.insert("loss".to_string(), e.loss);
            m.insert("grad_norm".to_string(), e.grad_norm);
            m.insert("val_dsc".to_string(), e.val_dsc.unwrap_or(f64::NAN));
            m.insert("val_hd95".to_string(), e.val_hd95.unwrap_or(f64::NAN));
            m
        })
        .collect())
}

/// `(case_id, class, dsc, hd95)` for every foreground class of every case in `split`.
#[pyfunction]
#[pyo3(signature = (checkpoint, data_dir, split = "val", window = None))]
fn evaluate(checkpoint: PathBuf, data_dir: PathBuf, split: &str, window: Option<(usize, usize)>) -> PyResult<Vec<(String, u8, f64, f64)>> {
    let ck = load_checkpoint::<f32>(&checkpoint).py()?;
    let pre = Preprocess::from_meta(&ck.meta).py()?;
    let cases = data::Dataset::open(&data_dir).py()?.load_split(split).py()?;
    let cases = cases.iter().map(|s| pre.apply(s)).collect::<medformer::Result<Vec<_>>>().py()?;
    let recs = train::evaluate(&ck.model, &cases, window).py()?;
    Ok(recs.into_iter().map(|r| (r.case_id, r.class, r.dsc, r.hd95)).collect())
}

#[pymodule]
fn medformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(read_mft, m)?)?;
    m.add_function(wrap_pyfunction!(write_mft, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(hd95, m)?)?;
    m.add_function(wrap_pyfunction!(formula_macs, m)?)?;
    m.add_function(wrap_pyfunction!(measured_macs, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
