//! Interleaved next-code / next-position sampling with conflict masking,
//! top-k / top-p logit filtering, and decoding through the stage-1 model.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mqvae::MqVae;
use crate::rng;
use crate::stackformer::{Stackformer, TokenPositionSequence};
use crate::tensor::{Scalar, Tensor};

/// Sampling knobs. `top_k == 0` and `top_p == 1.0` disable those filters;
/// `greedy` excludes both.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Number of (code, position) pairs to draw; must not exceed L.
    pub steps: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
    pub greedy: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 0,
            top_k: 0,
            top_p: 1.0,
            temperature: 1.0,
            seed: 42,
            greedy: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::InvalidSamplerConfig {
                reason: format!("temperature must be positive, got {}", self.temperature),
            });
        }
        if !(0.0 < self.top_p && self.top_p <= 1.0) {
            return Err(Error::InvalidSamplerConfig {
                reason: format!("top_p must lie in (0, 1], got {}", self.top_p),
            });
        }
        if self.greedy && (self.top_k > 0 || self.top_p < 1.0) {
            return Err(Error::InvalidSamplerConfig {
                reason: "greedy decoding excludes top-k/top-p filtering".into(),
            });
        }
        Ok(())
    }
}

/// Turn logits into a filtered, renormalized probability vector.
///
/// Filter order: divide by temperature, softmax, keep the `top_k` largest
/// (renormalize), then keep the smallest sorted prefix whose cumulative mass
/// reaches `top_p` (renormalize again). Ties order by ascending index. If
/// everything is filtered away the argmax keeps probability one.
pub fn filter_logits(logits: &[f64], top_k: usize, top_p: f64, temperature: f64) -> Vec<f64> {
    let n = logits.len();
    debug_assert!(temperature > 0.0);
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = scaled.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));

    let mut keep = vec![true; n];
    if top_k > 0 && top_k < n {
        for &i in &order[top_k..] {
            keep[i] = false;
        }
        let mass: f64 = order[..top_k].iter().map(|&i| probs[i]).sum();
        if mass > 0.0 {
            for (i, p) in probs.iter_mut().enumerate() {
                *p = if keep[i] { *p / mass } else { 0.0 };
            }
        }
    }
    if top_p < 1.0 {
        let mut cum = 0.0;
        let mut boundary_reached = false;
        for &i in &order {
            if !keep[i] {
                continue;
            }
            if boundary_reached {
                keep[i] = false;
                continue;
            }
            cum += probs[i];
            if cum >= top_p {
                boundary_reached = true;
            }
        }
        let mass: f64 = probs
            .iter()
            .enumerate()
            .filter(|(i, _)| keep[*i])
            .map(|(_, &p)| p)
            .sum();
        if mass > 0.0 {
            for (i, p) in probs.iter_mut().enumerate() {
                *p = if keep[i] { *p / mass } else { 0.0 };
            }
        }
    }

    if probs.iter().sum::<f64>() <= 0.0 {
        // nothing survived: fall back to a point mass at the argmax
        let argmax = order[0];
        let mut out = vec![0.0; n];
        out[argmax] = 1.0;
        return out;
    }
    probs
}

/// One generated sample: the decoded image and the token sequence that
/// produced it (prefix included, generation order preserved).
pub struct SampleOutput<T: Scalar> {
    pub image: Tensor<T>,
    pub sequence: TokenPositionSequence,
}

/// Algorithm-1 generation: alternate next-code and next-position sampling,
/// masking already-used positions, then scatter the codes into the grid,
/// fill the rest with the mask embedding, de-mask, and decode.
pub fn sample<T: Scalar>(
    model: &Stackformer<T>,
    vae: &MqVae<T>,
    cfg: &SamplerConfig,
    condition: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<SampleOutput<T>> {
    cfg.validate()?;
    let l = model.cfg.grid_len;
    if l != vae.cfg.grid_len() {
        return Err(Error::DimensionMismatch {
            what: "sampler grid length",
            expected: vae.cfg.grid_len(),
            got: l,
        });
    }
    if model.cfg.codebook_size != vae.cfg.codebook_size {
        return Err(Error::DimensionMismatch {
            what: "sampler codebook size",
            expected: vae.cfg.codebook_size,
            got: model.cfg.codebook_size,
        });
    }
    let steps = if cfg.steps == 0 { vae.cfg.keep_count() } else { cfg.steps };
    if steps > l {
        return Err(Error::SampleStepsExceedGrid { steps, grid: l });
    }

    let prefix = match condition {
        Some(c) => model.cfg.class_token(c)?,
        None => model.cfg.sos_code(),
    };
    let mut codes = vec![prefix];
    let mut positions = vec![model.cfg.sos_pos()];
    let mut used = vec![false; l];

    for _ in 0..steps {
        let seq = TokenPositionSequence {
            codes: codes.clone(),
            positions: positions.clone(),
            n_c: 1,
        };
        let h_c = model.code_forward(&seq)?;

        // next code: specials are never valid payload
        let last = h_c.slice_rows(seq.len() - 1, 1)?;
        let mut code_logits: Vec<f64> = model
            .code_head
            .forward(&last)?
            .values()
            .iter()
            .map(|v| v.as_f64())
            .collect();
        for logit in code_logits.iter_mut().skip(model.cfg.codebook_size) {
            *logit = f64::NEG_INFINITY;
        }
        let next_code = pick(&code_logits, cfg, rng);
        codes.push(next_code);

        // next position: H_c rows from the pre-append forward plus the
        // embeddings of all payload codes including the one just drawn
        let h_p = model.position_hidden(&h_c, 1, &codes[1..])?;
        let last = h_p.slice_rows(h_p.shape()[0] - 1, 1)?;
        let mut pos_logits: Vec<f64> = model
            .pos_head
            .forward(&last)?
            .values()
            .iter()
            .map(|v| v.as_f64())
            .collect();
        pos_logits[model.cfg.sos_pos()] = f64::NEG_INFINITY;
        for (p, &taken) in used.iter().enumerate() {
            if taken {
                pos_logits[p] = f64::NEG_INFINITY;
            }
        }
        let next_pos = pick(&pos_logits, cfg, rng);
        used[next_pos] = true;
        positions.push(next_pos);
    }

    // re-map to the 2D grid: code embeddings at sampled positions, mask code
    // everywhere else, then de-mask and decode
    let vectors = vae
        .codebook
        .embeddings
        .index_rows(&codes[1..])?
        .detach();
    let demasked = vae.fill_and_demask(&vectors, &positions[1..])?;
    let image = vae.decode(&demasked)?;
    Ok(SampleOutput {
        image,
        sequence: TokenPositionSequence {
            codes,
            positions,
            n_c: 1,
        },
    })
}

/// Draw a token: argmax when greedy, otherwise from the filtered
/// distribution. Masked entries carry -inf and can never win.
fn pick(logits: &[f64], cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> usize {
    if cfg.greedy {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best;
    }
    // -inf logits survive filtering as exact zeros, so replace them only
    // for the exp; they can never be drawn
    let probs = filter_logits(logits, cfg.top_k, cfg.top_p, cfg.temperature);
    rng::categorical(rng, &probs)
}
