//! Python bindings: configs travel as JSON strings, tensors as flat lists.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use saccade::cost::{self, ModelSpec};
use saccade::data::gen_shapes;
use saccade::harness::{heatmap_bytes, Checkpoint, ExperimentConfig};
use saccade::rollout::{attention_rollout, cls_heat, fuse_heads, HeadFusion, HeatMap};
use saccade::san::{self, SelectorConfig};
use saccade::sanvit::{self, SanVitConfig};
use saccade::vit::{self, AttentionStack, ViTConfig};
use saccade::{Error, Rng, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn image(pixels: Vec<f32>, size: usize) -> PyResult<Tensor<f32>> {
    Tensor::new(vec![3, size, size], pixels).map_err(py_err)
}

/// Query-key score count of one attention map over `seq` tokens.
#[pyfunction]
fn attention_comparisons(seq: u64) -> u64 {
    cost::attention_comparisons(seq)
}

/// The `k` largest entries, as ascending indices; ties go to the lower index.
#[pyfunction]
fn topk_indices(values: Vec<f64>, k: usize) -> PyResult<Vec<usize>> {
    saccade::rollout::topk_indices(&values, k).map_err(py_err)
}

/// Rollout of a flat `L×H×S×S` attention stack; returns the flat `S×S` product.
#[pyfunction]
#[pyo3(signature = (probs, layers, heads, seq, fusion = "mean"))]
fn rollout(probs: Vec<f32>, layers: usize, heads: usize, seq: usize, fusion: &str) -> PyResult<Vec<f64>> {
    let mode = match fusion {
        "mean" => HeadFusion::Mean,
        "max" => HeadFusion::Max,
        "min" => HeadFusion::Min,
        other => return Err(PyValueError::new_err(format!("unknown fusion '{other}'"))),
    };
    let stack = AttentionStack::new(layers, heads, seq, probs).map_err(py_err)?;
    Ok(attention_rollout(&fuse_heads(&stack, mode)).map_err(py_err)?.into_data())
}

/// CLS heat (patch columns of row 0) from a flat `S×S` rollout.
#[pyfunction]
fn cls_heat_from(rollout: Vec<f64>, seq: usize) -> PyResult<Vec<f64>> {
    let t = Tensor::new(vec![seq, seq], rollout).map_err(py_err)?;
    Ok(cls_heat(&t).map_err(py_err)?.heat)
}

/// Binary PGM bytes for a square heat map.
#[pyfunction]
fn heatmap_pgm<'py>(py: Python<'py>, heat: Vec<f64>) -> PyResult<Bound<'py, PyBytes>> {
    let h = HeatMap::new(heat).map_err(py_err)?;
    Ok(PyBytes::new(py, &heatmap_bytes(&h)))
}

/// `n` synthetic shape images as `(pixels, label, id)` with flat `3×S×S` pixels.
#[pyfunction]
fn shapes(n: usize, seed: u64, image_size: usize) -> Vec<(Vec<f32>, usize, u32)> {
    gen_shapes(n, seed, image_size)
        .into_iter()
        .map(|r| (r.pixels.into_data(), r.label, r.id))
        .collect()
}

/// Cost report JSON for a model spec JSON (`{"kind": "vit", ...}` etc.).
#[pyfunction]
#[pyo3(signature = (spec_json, seq_len = None))]
fn cost_report(spec_json: &str, seq_len: Option<u64>) -> PyResult<String> {
    let spec: ModelSpec = from_json(spec_json)?;
    let r = cost::count_flops(&spec, seq_len).map_err(py_err)?;
    Ok(serde_json::to_string(&r).expect("report serializes"))
}

/// `(per_patch_accuracy, sensitivity, specificity, overlap_at_k)`.
#[pyfunction]
fn selection_metrics(
    logits: Vec<f32>,
    multi_hot: Vec<u8>,
    k: usize,
) -> PyResult<(f64, Option<f64>, Option<f64>, f64)> {
    let m = san::selection_metrics(&logits, &multi_hot, k).map_err(py_err)?;
    Ok((m.per_patch_accuracy, m.sensitivity, m.specificity, m.overlap_at_k))
}

/// A vision transformer with freshly initialised weights.
#[pyclass(name = "ViT")]
struct PyVit {
    config: ViTConfig,
    params: saccade::params::ParamSet,
}

#[pymethods]
impl PyVit {
    #[new]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let config: ViTConfig = from_json(config_json)?;
        let params = vit::init_params(&config, &mut Rng::new(seed)).map_err(py_err)?;
        Ok(Self { config, params })
    }

    #[getter]
    fn num_params(&self) -> u64 {
        self.params.scalar_count()
    }

    /// Logits and the flat `L×H×S×S` attention stack.
    fn forward(&self, pixels: Vec<f32>) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let img = image(pixels, self.config.image_size)?;
        let (logits, stack) = vit::vit_forward(&img, &self.params, &self.config).map_err(py_err)?;
        Ok((logits.into_data(), stack.probs))
    }

    /// Per-patch rollout heat for one image.
    fn heat(&self, pixels: Vec<f32>) -> PyResult<Vec<f64>> {
        let img = image(pixels, self.config.image_size)?;
        let (_, stack) = vit::vit_forward(&img, &self.params, &self.config).map_err(py_err)?;
        Ok(saccade::rollout::heat_from_attention(&stack).map_err(py_err)?.heat)
    }

    /// A student sharing these weights, attending over `indices` only.
    fn student_logits(&self, pixels: Vec<f32>, indices: Vec<usize>) -> PyResult<Vec<f32>> {
        let cfg = SanVitConfig {
            base: self.config.clone(),
            k: indices.len(),
            pe_variant: sanvit::PeVariant::SinFullPreslice,
            index_source: sanvit::IndexSource::GroundTruth,
        };
        let img = image(pixels, self.config.image_size)?;
        Ok(sanvit::sanvit_forward(&img, &indices, &self.params, &cfg)
            .map_err(py_err)?
            .into_data())
    }
}

/// The residual CNN patch selector.
#[pyclass(name = "Selector")]
struct PySelector {
    config: SelectorConfig,
    params: saccade::params::ParamSet,
}

#[pymethods]
impl PySelector {
    #[new]
    fn new(config_json: &str, seed: u64) -> PyResult<Self> {
        let config: SelectorConfig = from_json(config_json)?;
        let params = san::init_params(&config, &mut Rng::new(seed)).map_err(py_err)?;
        Ok(Self { config, params })
    }

    #[getter]
    fn num_params(&self) -> u64 {
        self.params.scalar_count()
    }

    fn logits(&self, pixels: Vec<f32>) -> PyResult<Vec<f32>> {
        let img = image(pixels, self.config.input_size)?;
        Ok(san::selector_forward(&img, &self.params, &self.config)
            .map_err(py_err)?
            .into_data())
    }

    fn topk(&self, pixels: Vec<f32>) -> PyResult<Vec<usize>> {
        let z = self.logits(pixels)?;
        san::predict_topk(&z, self.config.k).map_err(py_err)
    }
}

/// A saved model: named tensors plus its experiment config.
#[pyclass(name = "Checkpoint")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::load(path.as_ref()).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: Checkpoint::from_bytes(data).map_err(py_err)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &self.inner.to_bytes().map_err(py_err)?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(py_err)
    }

    fn names(&self) -> Vec<String> {
        self.inner.params.names().cloned().collect()
    }

    /// `(shape, flat data)` of one tensor.
    fn tensor(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self.inner.params.get(name).map_err(py_err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    #[getter]
    fn config_json(&self) -> String {
        self.inner.config.to_json()
    }
}

/// Desk-scale experiment config JSON for `teacher_vit`, `simple_vit`, `selector` or `sanvit`.
#[pyfunction]
fn desk_config(model: &str) -> PyResult<String> {
    let kind = from_json(&format!("\"{model}\""))?;
    Ok(ExperimentConfig::desk(kind).to_json())
}

#[pymodule]
fn saccade_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(attention_comparisons, m)?)?;
    m.add_function(wrap_pyfunction!(topk_indices, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(cls_heat_from, m)?)?;
    m.add_function(wrap_pyfunction!(heatmap_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(shapes, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(selection_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(desk_config, m)?)?;
    m.add_class::<PyVit>()?;
    m.add_class::<PySelector>()?;
    m.add_class::<PyCheckpoint>()?;
    Ok(())
}
