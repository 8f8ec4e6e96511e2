//! Python bindings: the pure operations (quantization, masking, schedules,
//! logit filtering, rearrangement), config-driven training entry points,
//! and a `Pipeline` class wrapping trained checkpoints for sampling and
//! reconstruction.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mqvq_core::config::RunConfig;
use mqvq_core::error::Error;
use mqvq_core::mqvae::MqVae;
use mqvq_core::quantizer::{quantize, Codebook};
use mqvq_core::rng::stream_rng;
use mqvq_core::sampler::{sample as run_sampler, SamplerConfig};
use mqvq_core::stackformer::Stackformer;
use mqvq_core::tensor::Tensor;
use mqvq_core::train;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::UnknownConfigKey { .. } | Error::InvalidConfigValue { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config_from_sets(sets: Vec<String>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    for s in &sets {
        cfg.apply_line(s).map_err(to_py)?;
    }
    Ok(cfg)
}

/// Deterministic synthetic shape corpus. Returns (images, labels) where each
/// image is a flat row-major [c, h, w] list in [-1, 1].
#[pyfunction]
fn generate_synthetic(
    count: usize,
    resolution: usize,
    channels: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f32>>, Vec<usize>)> {
    let ds = mqvq_core::data::generate_synthetic::<f32>(count, resolution, channels, seed);
    let images = ds.images.iter().map(|t| t.to_vec()).collect();
    Ok((images, ds.labels.unwrap_or_default()))
}

/// Nearest-neighbor codes for feature rows against a codebook (squared
/// Euclidean distance, ties to the smaller index).
#[pyfunction]
fn quantize_rows(features: Vec<Vec<f32>>, codebook: Vec<Vec<f32>>) -> PyResult<Vec<usize>> {
    if codebook.is_empty() {
        return Err(to_py(Error::EmptyCodebook));
    }
    let d = codebook[0].len();
    let flat_cb: Vec<f32> = codebook.iter().flatten().copied().collect();
    let cb = Codebook::<f32> {
        embeddings: Tensor::param(vec![codebook.len(), d], flat_cb).map_err(to_py)?,
        mask_embedding: Tensor::param(vec![d], vec![0.0; d]).map_err(to_py)?,
    };
    let n = features.len();
    let flat: Vec<f32> = features.into_iter().flatten().collect();
    let feats = Tensor::from_vec(vec![n, d], flat).map_err(to_py)?;
    Ok(quantize(&feats, &cb).map_err(to_py)?.codes)
}

/// Percentage of distinct codes used over the given lists.
#[pyfunction]
fn codebook_usage(code_lists: Vec<Vec<usize>>, k: usize) -> PyResult<f64> {
    mqvq_core::quantizer::codebook_usage(&code_lists, k).map_err(to_py)
}

/// Masked-key attention scale per de-mask sub-module.
#[pyfunction]
fn mask_scale_schedule(epsilon: f64, h_sub: usize) -> Vec<f64> {
    mqvq_core::mqvae::mask_scale_schedule(epsilon, h_sub)
}

/// Indices of the top floor(alpha * len) scores, ties to the smaller index.
#[pyfunction]
fn top_n_positions(scores: Vec<f64>, alpha: f64) -> PyResult<Vec<usize>> {
    mqvq_core::mqvae::top_n_positions(&scores, alpha).map_err(to_py)
}

/// Temperature, top-k, then top-p filtering into a probability vector.
#[pyfunction]
fn filter_logits(logits: Vec<f64>, top_k: usize, top_p: f64, temperature: f64) -> Vec<f64> {
    mqvq_core::sampler::filter_logits(&logits, top_k, top_p, temperature)
}

/// Sort (code, position) pairs by ascending position.
#[pyfunction]
fn rearrange(codes: Vec<usize>, positions: Vec<usize>) -> PyResult<(Vec<usize>, Vec<usize>)> {
    mqvq_core::stackformer::rearrange(&codes, &positions).map_err(to_py)
}

/// Train stage 1 from `key=value` settings. Returns
/// (checkpoint_path, metrics_path, steps_run, final_eval_mse).
#[pyfunction]
fn train_vae(sets: Vec<String>) -> PyResult<(String, String, usize, f64)> {
    let cfg = config_from_sets(sets)?;
    let out = train::train_stage1::<f32>(&cfg).map_err(to_py)?;
    Ok((
        out.checkpoint.display().to_string(),
        out.metrics.display().to_string(),
        out.steps_run,
        out.final_eval_mse,
    ))
}

/// Train stage 2 from `key=value` settings. Returns
/// (checkpoint_path, metrics_path, steps_run, final_joint_nll).
#[pyfunction]
fn train_ar(sets: Vec<String>) -> PyResult<(String, String, usize, f64)> {
    let cfg = config_from_sets(sets)?;
    let out = train::train_stage2::<f32>(&cfg).map_err(to_py)?;
    Ok((
        out.checkpoint.display().to_string(),
        out.metrics.display().to_string(),
        out.steps_run,
        out.final_joint_nll,
    ))
}

/// Reconstruction MSE and codebook usage for a trained stage-1 checkpoint.
#[pyfunction]
fn evaluate(sets: Vec<String>) -> PyResult<(f64, f64)> {
    let cfg = config_from_sets(sets)?;
    let report = train::evaluate::<f32>(&cfg).map_err(to_py)?;
    Ok((report.mse, report.usage))
}

/// Trained stage-1 + stage-2 pair loaded from checkpoints.
#[pyclass(unsendable)]
struct Pipeline {
    vae: MqVae<f32>,
    model: Stackformer<f32>,
}

#[pymethods]
impl Pipeline {
    #[new]
    fn new(vae_checkpoint: &str, ar_checkpoint: &str) -> PyResult<Self> {
        let (vae, vae_cfg) =
            train::load_vae_self_describing::<f32>(Path::new(vae_checkpoint)).map_err(to_py)?;
        let (model, ar_cfg) =
            train::load_stackformer_self_describing::<f32>(PathBuf::from(ar_checkpoint).as_path())
                .map_err(to_py)?;
        if vae_cfg.arch_digest() != ar_cfg.arch_digest() {
            return Err(to_py(Error::ConfigDigestMismatch {
                stored: vae_cfg.arch_digest(),
                current: ar_cfg.arch_digest(),
            }));
        }
        Ok(Pipeline { vae, model })
    }

    /// Image geometry as (channels, height, width).
    fn image_shape(&self) -> (usize, usize, usize) {
        (
            self.vae.cfg.in_channels,
            self.vae.cfg.resolution,
            self.vae.cfg.resolution,
        )
    }

    /// Draw one sample. Returns (image_flat, codes, positions); the image is
    /// a flat [c, h, w] list in [-1, 1]. class_id -1 means unconditional.
    #[pyo3(signature = (seed, index=0, steps=0, top_k=0, top_p=1.0, temperature=1.0, greedy=false, class_id=-1))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        seed: u64,
        index: u64,
        steps: usize,
        top_k: usize,
        top_p: f64,
        temperature: f64,
        greedy: bool,
        class_id: i64,
    ) -> PyResult<(Vec<f32>, Vec<usize>, Vec<usize>)> {
        let cfg = SamplerConfig {
            steps,
            top_k,
            top_p,
            temperature,
            seed,
            greedy,
        };
        let condition = if class_id >= 0 {
            Some(class_id as usize)
        } else {
            None
        };
        let mut rng = stream_rng(seed, "sample", index);
        let out = run_sampler(&self.model, &self.vae, &cfg, condition, &mut rng).map_err(to_py)?;
        Ok((
            out.image.to_vec(),
            out.sequence.payload_codes().to_vec(),
            out.sequence.payload_positions().to_vec(),
        ))
    }

    /// Push one image (flat [c, h, w] in [-1, 1]) through the masked
    /// pipeline. Returns (reconstruction_flat, importance_scores).
    fn reconstruct(&self, image: Vec<f32>) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let c = self.vae.cfg.in_channels;
        let r = self.vae.cfg.resolution;
        let tensor = Tensor::from_vec(vec![c, r, r], image).map_err(to_py)?;
        let out = self.vae.forward(&tensor).map_err(to_py)?;
        Ok((
            out.reconstruction.to_vec(),
            out.selection.scores.to_vec(),
        ))
    }
}

#[pymodule]
fn mqvq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_rows, m)?)?;
    m.add_function(wrap_pyfunction!(codebook_usage, m)?)?;
    m.add_function(wrap_pyfunction!(mask_scale_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(top_n_positions, m)?)?;
    m.add_function(wrap_pyfunction!(filter_logits, m)?)?;
    m.add_function(wrap_pyfunction!(rearrange, m)?)?;
    m.add_function(wrap_pyfunction!(train_vae, m)?)?;
    m.add_function(wrap_pyfunction!(train_ar, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
