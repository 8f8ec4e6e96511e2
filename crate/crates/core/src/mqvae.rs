//! Stage 1: the masked VQ autoencoder.
//!
//! Pipeline per image: convolutional encoder -> flatten to raster-scan rows
//! -> adaptive mask (score, keep top-N) -> vector quantization of the kept
//! rows -> fill the grid back (mask embedding elsewhere) -> de-mask stack of
//! direction-constrained attention + residual conv blocks -> decoder.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{chw_to_rows, rows_to_chw, Conv2d, GroupNorm, LayerNorm, Linear, NamedParams};
use crate::quantizer::{quantize, vq_loss, Codebook, QuantizationResult};
use crate::tensor::{mse, neg_mask, Scalar, Tensor};

/// Stage-1 architecture settings.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    /// Image channels (1 grayscale, 3 RGB).
    pub in_channels: usize,
    /// Square input resolution H0 = W0.
    pub resolution: usize,
    /// Downsampling factor; the feature grid is (H0/f) x (W0/f).
    pub f: usize,
    /// Channel width after each stride-2 stage; length must be log2(f).
    pub widths: Vec<usize>,
    /// Code dimension.
    pub n_z: usize,
    /// Codebook size K.
    pub codebook_size: usize,
    /// Fraction 1 - alpha of grid positions dropped before quantization.
    pub mask_ratio: f64,
    /// Number of de-mask sub-modules.
    pub h_sub: usize,
    /// Initial masked-key attention scale (0 only in the strict test mode).
    pub epsilon_mask: f64,
    /// Commitment weight in the quantization loss.
    pub beta: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            in_channels: 1,
            resolution: 32,
            f: 8,
            widths: vec![8, 16, 32],
            n_z: 8,
            codebook_size: 64,
            mask_ratio: 0.25,
            h_sub: 8,
            epsilon_mask: 0.02,
            beta: 0.25,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.widths.len();
        if ![4usize, 8, 16].contains(&self.f) || self.f != 1 << stages {
            return Err(Error::InvalidConfigValue {
                key: "f".into(),
                value: self.f.to_string(),
                reason: format!(
                    "downsampling factor must be 4, 8 or 16 with log2(f) channel widths (got {stages} widths)"
                ),
            });
        }
        if self.resolution == 0 || self.resolution % self.f != 0 {
            return Err(Error::InvalidConfigValue {
                key: "resolution".into(),
                value: self.resolution.to_string(),
                reason: format!("must be a positive multiple of f = {}", self.f),
            });
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidConfigValue {
                key: "mask_ratio".into(),
                value: self.mask_ratio.to_string(),
                reason: "must lie in [0, 1)".into(),
            });
        }
        if self.h_sub == 0 {
            return Err(Error::InvalidConfigValue {
                key: "h_sub".into(),
                value: "0".into(),
                reason: "at least one de-mask sub-module is required".into(),
            });
        }
        if !(0.0..1.0).contains(&self.epsilon_mask) {
            return Err(Error::InvalidConfigValue {
                key: "epsilon_mask".into(),
                value: self.epsilon_mask.to_string(),
                reason: "must lie in [0, 1); 0 is the strict test mode".into(),
            });
        }
        if !(1..=3).contains(&self.in_channels) || self.in_channels == 2 {
            return Err(Error::InvalidConfigValue {
                key: "channels".into(),
                value: self.in_channels.to_string(),
                reason: "must be 1 (grayscale) or 3 (RGB)".into(),
            });
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.resolution / self.f
    }

    /// L = (H0/f) * (W0/f).
    pub fn grid_len(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn alpha(&self) -> f64 {
        1.0 - self.mask_ratio
    }

    /// N = floor(alpha * L), the kept-feature count.
    pub fn keep_count(&self) -> usize {
        keep_count(self.alpha(), self.grid_len())
    }
}

/// floor(alpha * l), guarded against representation error in the product.
pub fn keep_count(alpha: f64, l: usize) -> usize {
    ((alpha * l as f64) + 1e-9).floor() as usize
}

/// Indices of the top-N scores, N = floor(alpha * len). Sorted by score
/// descending; equal scores break toward the smaller original index.
pub fn top_n_positions(scores: &[f64], alpha: f64) -> Result<Vec<usize>> {
    let l = scores.len();
    let n = keep_count(alpha, l).min(l);
    if n == 0 {
        return Err(Error::EmptySelection { alpha, len: l });
    }
    let mut idx: Vec<usize> = (0..l).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

/// Masked-key attention scale per sub-module: starts at epsilon and takes a
/// square root after each sub-module, so it climbs toward 1.
pub fn mask_scale_schedule(epsilon: f64, h_sub: usize) -> Vec<f64> {
    let mut b = epsilon;
    (0..h_sub)
        .map(|_| {
            let cur = b;
            b = b.sqrt();
            cur
        })
        .collect()
}

/// Outcome of adaptive masking.
pub struct MaskSelection<T: Scalar> {
    /// Kept features after LayerNorm * score modulation, [N x n_z], in
    /// score-descending order.
    pub kept: Tensor<T>,
    /// Original flat grid index of each kept row, aligned with `kept`.
    pub positions: Vec<usize>,
    /// Pre-selection scores for all L positions, [L x 1].
    pub scores: Tensor<T>,
    /// Keep fraction.
    pub alpha: f64,
}

impl<T: Scalar> MaskSelection<T> {
    pub fn n(&self) -> usize {
        self.positions.len()
    }

    pub fn mask_ratio(&self) -> f64 {
        1.0 - self.alpha
    }
}

/// Scoring network (two-layer MLP with a sigmoid head) plus the
/// normalization applied to kept features before score modulation.
pub struct AdaptiveMask<T: Scalar> {
    pub score1: Linear<T>,
    pub score2: Linear<T>,
    pub norm: LayerNorm<T>,
}

impl<T: Scalar> AdaptiveMask<T> {
    pub fn new(n_z: usize, rng: &mut ChaCha8Rng) -> Self {
        AdaptiveMask {
            score1: Linear::new(n_z, n_z, 0.02, rng),
            score2: Linear::new(n_z, 1, 0.02, rng),
            norm: LayerNorm::new(n_z),
        }
    }

    /// Importance score per row, [L x 1], in (0, 1).
    pub fn scores(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.score1.forward(features)?.tanh();
        Ok(self.score2.forward(&h)?.sigmoid())
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.score1.params(&format!("{prefix}.score1"), out);
        self.score2.params(&format!("{prefix}.score2"), out);
        self.norm.params(&format!("{prefix}.ln"), out);
    }
}

struct EncoderStage<T: Scalar> {
    conv: Conv2d<T>,
    gn: GroupNorm<T>,
}

/// Stride-2 convolutional encoder down to the n_z-channel feature grid.
pub struct Encoder<T: Scalar> {
    stages: Vec<EncoderStage<T>>,
    out: Conv2d<T>,
}

impl<T: Scalar> Encoder<T> {
    fn new(cfg: &VaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::new();
        let mut c_in = cfg.in_channels;
        for &w in &cfg.widths {
            stages.push(EncoderStage {
                conv: Conv2d::new(c_in, w, 4, 2, 1, rng),
                gn: GroupNorm::new(w),
            });
            c_in = w;
        }
        Encoder {
            stages,
            out: Conv2d::new(c_in, cfg.n_z, 3, 1, 1, rng),
        }
    }

    fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = image.clone();
        for stage in &self.stages {
            x = stage.gn.forward(&stage.conv.forward(&x)?)?.silu();
        }
        self.out.forward(&x)
    }

    fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        for (i, stage) in self.stages.iter().enumerate() {
            stage.conv.params(&format!("{prefix}.stage{i}.conv"), out);
            stage.gn.params(&format!("{prefix}.stage{i}.gn"), out);
        }
        self.out.params(&format!("{prefix}.out"), out);
    }
}

struct DecoderStage<T: Scalar> {
    gn: GroupNorm<T>,
    conv: Conv2d<T>,
}

/// Upsampling decoder back to image space, tanh output in [-1, 1].
pub struct Decoder<T: Scalar> {
    conv_in: Conv2d<T>,
    stages: Vec<DecoderStage<T>>,
    gn_out: GroupNorm<T>,
    conv_out: Conv2d<T>,
}

impl<T: Scalar> Decoder<T> {
    fn new(cfg: &VaeConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = cfg.widths.len();
        let conv_in = Conv2d::new(cfg.n_z, cfg.widths[s - 1], 3, 1, 1, rng);
        let mut stages = Vec::new();
        for j in 0..s {
            let cur = cfg.widths[s - 1 - j];
            let next = if j + 1 < s { cfg.widths[s - 2 - j] } else { cfg.widths[0] };
            stages.push(DecoderStage {
                gn: GroupNorm::new(cur),
                conv: Conv2d::new(cur, next, 3, 1, 1, rng),
            });
        }
        Decoder {
            conv_in,
            stages,
            gn_out: GroupNorm::new(cfg.widths[0]),
            conv_out: Conv2d::new(cfg.widths[0], cfg.in_channels, 3, 1, 1, rng),
        }
    }

    fn forward(&self, grid_chw: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = self.conv_in.forward(grid_chw)?;
        for stage in &self.stages {
            x = stage.gn.forward(&x)?.silu().upsample_nearest2x()?;
            x = stage.conv.forward(&x)?;
        }
        Ok(self.conv_out.forward(&self.gn_out.forward(&x)?.silu())?.tanh())
    }

    fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.conv_in.params(&format!("{prefix}.in"), out);
        for (i, stage) in self.stages.iter().enumerate() {
            stage.gn.params(&format!("{prefix}.stage{i}.gn"), out);
            stage.conv.params(&format!("{prefix}.stage{i}.conv"), out);
        }
        self.gn_out.params(&format!("{prefix}.out.gn"), out);
        self.conv_out.params(&format!("{prefix}.out.conv"), out);
    }
}

/// One de-mask sub-module: direction-constrained attention followed by a
/// residual conv block.
pub struct DemaskSub<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    gn1: GroupNorm<T>,
    conv1: Conv2d<T>,
    gn2: GroupNorm<T>,
    conv2: Conv2d<T>,
}

impl<T: Scalar> DemaskSub<T> {
    fn new(n_z: usize, rng: &mut ChaCha8Rng) -> Self {
        // Wv starts near identity so the non-residual attention map carries
        // the grid through the stack at initialization.
        let wv = Tensor::normal(vec![n_z, n_z], 0.02, rng, true);
        wv.with_data_mut(|d| {
            for i in 0..n_z {
                d[i * n_z + i] = d[i * n_z + i] + T::one();
            }
        });
        DemaskSub {
            wq: Tensor::normal(vec![n_z, n_z], 0.02, rng, true),
            wk: Tensor::normal(vec![n_z, n_z], 0.02, rng, true),
            wv,
            gn1: GroupNorm::new(n_z),
            conv1: Conv2d::new(n_z, n_z, 3, 1, 1, rng),
            gn2: GroupNorm::new(n_z),
            conv2: Conv2d::new(n_z, n_z, 3, 1, 1, rng),
        }
    }

    fn resnet(&self, grid: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
        let x = rows_to_chw(grid, h, w)?;
        let y = self.conv1.forward(&self.gn1.forward(&x)?.silu())?;
        let y = self.conv2.forward(&self.gn2.forward(&y)?.silu())?;
        chw_to_rows(&x.add(&y)?)
    }

    fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.wq"), self.wq.clone()));
        out.push((format!("{prefix}.wk"), self.wk.clone()));
        out.push((format!("{prefix}.wv"), self.wv.clone()));
        self.gn1.params(&format!("{prefix}.gn1"), out);
        self.conv1.params(&format!("{prefix}.conv1"), out);
        self.gn2.params(&format!("{prefix}.gn2"), out);
        self.conv2.params(&format!("{prefix}.conv2"), out);
    }
}

/// The de-mask stack: H identical sub-modules with the square-root
/// mask-update schedule.
pub struct Demask<T: Scalar> {
    pub subs: Vec<DemaskSub<T>>,
    pub epsilon: f64,
    pub n_e: usize,
}

impl<T: Scalar> Demask<T> {
    fn new(cfg: &VaeConfig, rng: &mut ChaCha8Rng) -> Self {
        Demask {
            subs: (0..cfg.h_sub).map(|_| DemaskSub::new(cfg.n_z, rng)).collect(),
            epsilon: cfg.epsilon_mask,
            n_e: cfg.n_z,
        }
    }

    /// One direction-constrained attention block. `key_scale[l]` is the
    /// column scale B_h at position l (1 at kept positions). Columns whose
    /// scale is exactly 0 are excluded from the softmax normalization as
    /// well, so a fully blocked key contributes nothing at all.
    pub fn attention(
        &self,
        sub_index: usize,
        grid: &Tensor<T>,
        key_scale: &[f64],
    ) -> Result<Tensor<T>> {
        let l = grid.shape()[0];
        if key_scale.len() != l {
            return Err(Error::LengthMismatch {
                what: "attention key scales",
                left: key_scale.len(),
                right: l,
            });
        }
        let sub = &self.subs[sub_index];
        let q = grid.matmul(&sub.wq)?;
        let k = grid.matmul(&sub.wk)?;
        let v = grid.matmul(&sub.wv)?;
        let mut logits = q
            .matmul(&k.transpose()?)?
            .mul_scalar(T::from_f64(1.0 / (self.n_e as f64).sqrt()));
        if key_scale.iter().any(|&b| b == 0.0) {
            let mut mask = vec![T::zero(); l * l];
            for (j, &b) in key_scale.iter().enumerate() {
                if b == 0.0 {
                    for i in 0..l {
                        mask[i * l + j] = neg_mask::<T>();
                    }
                }
            }
            logits = logits.add(&Tensor::from_vec(vec![l, l], mask)?)?;
        }
        let attn = logits.softmax(1)?;
        let scales: Vec<T> = key_scale.iter().map(|&b| T::from_f64(b)).collect();
        let attn = attn.scale_cols(&Tensor::from_vec(vec![l], scales)?)?;
        attn.matmul(&v)
    }

    /// Per-sub-module key-column scales: the schedule value at masked
    /// positions, exactly 1 at kept positions.
    pub fn key_scales(&self, masked: &[bool]) -> Vec<Vec<f64>> {
        mask_scale_schedule(self.epsilon, self.subs.len())
            .into_iter()
            .map(|b| masked.iter().map(|&m| if m { b } else { 1.0 }).collect())
            .collect()
    }

    /// Run all sub-modules over a filled grid. `masked[l]` marks positions
    /// holding the mask embedding.
    pub fn forward(
        &self,
        grid: &Tensor<T>,
        masked: &[bool],
        h: usize,
        w: usize,
    ) -> Result<Tensor<T>> {
        let mut x = grid.clone();
        for (i, key_scale) in self.key_scales(masked).iter().enumerate() {
            x = self.attention(i, &x, key_scale)?;
            x = self.subs[i].resnet(&x, h, w)?;
        }
        Ok(x)
    }

    fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        for (i, sub) in self.subs.iter().enumerate() {
            sub.params(&format!("{prefix}.sub{i}"), out);
        }
    }
}

/// Everything produced by one stage-1 forward pass.
pub struct Stage1Forward<T: Scalar> {
    pub selection: MaskSelection<T>,
    pub quantization: QuantizationResult<T>,
    pub reconstruction: Tensor<T>,
    pub recon_mse: Tensor<T>,
    pub vq: Tensor<T>,
    pub loss: Tensor<T>,
}

/// The full stage-1 model.
pub struct MqVae<T: Scalar> {
    pub cfg: VaeConfig,
    pub encoder: Encoder<T>,
    pub mask: AdaptiveMask<T>,
    pub codebook: Codebook<T>,
    pub demask: Demask<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> MqVae<T> {
    pub fn new(cfg: VaeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(MqVae {
            encoder: Encoder::new(&cfg, rng),
            mask: AdaptiveMask::new(cfg.n_z, rng),
            codebook: Codebook::new(cfg.codebook_size, cfg.n_z, rng)?,
            demask: Demask::new(&cfg, rng),
            decoder: Decoder::new(&cfg, rng),
            cfg,
        })
    }

    fn check_image(&self, image: &Tensor<T>) -> Result<()> {
        let want = (self.cfg.in_channels, self.cfg.resolution, self.cfg.resolution);
        let s = image.shape();
        if s.len() != 3 || (s[0], s[1], s[2]) != want {
            let got = if s.len() == 3 { (s[0], s[1], s[2]) } else { (0, 0, 0) };
            return Err(Error::ResolutionMismatch { expected: want, got });
        }
        Ok(())
    }

    /// Encode an image into L raster-scan feature rows.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        chw_to_rows(&self.encoder.forward(image)?)
    }

    /// Score all rows, keep the top N = floor(alpha * L), and modulate the
    /// kept rows by their scores so the scoring network receives gradient.
    pub fn adaptive_mask(&self, features: &Tensor<T>) -> Result<MaskSelection<T>> {
        self.adaptive_mask_with_alpha(features, self.cfg.alpha())
    }

    pub fn adaptive_mask_with_alpha(
        &self,
        features: &Tensor<T>,
        alpha: f64,
    ) -> Result<MaskSelection<T>> {
        let scores = self.mask.scores(features)?;
        let score_values: Vec<f64> = scores.values().iter().map(|v| v.as_f64()).collect();
        let positions = top_n_positions(&score_values, alpha)?;
        let kept_raw = features.index_rows(&positions)?;
        let normed = self.mask.norm.forward(&kept_raw)?;
        let kept_scores = scores.index_rows(&positions)?;
        let kept = normed.scale_rows(&kept_scores.reshape(vec![positions.len()])?)?;
        Ok(MaskSelection {
            kept,
            positions,
            scores,
            alpha,
        })
    }

    /// Scatter quantized rows back into the L-slot grid; all other slots
    /// receive the learnable mask embedding.
    pub fn fill_grid(&self, quantized: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>> {
        quantized.scatter_rows_with_fill(positions, &self.codebook.mask_embedding, self.cfg.grid_len())
    }

    /// Fill and run the de-mask stack.
    pub fn fill_and_demask(
        &self,
        quantized: &Tensor<T>,
        positions: &[usize],
    ) -> Result<Tensor<T>> {
        let grid = self.fill_grid(quantized, positions)?;
        let mut masked = vec![true; self.cfg.grid_len()];
        for &p in positions {
            masked[p] = false;
        }
        self.demask
            .forward(&grid, &masked, self.cfg.grid_side(), self.cfg.grid_side())
    }

    /// Decode an L-row grid back to an image in [-1, 1].
    pub fn decode(&self, grid: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = grid.shape();
        if shape.len() != 2 || shape[0] != self.cfg.grid_len() || shape[1] != self.cfg.n_z {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: shape.to_vec(),
                right: vec![self.cfg.grid_len(), self.cfg.n_z],
            });
        }
        let side = self.cfg.grid_side();
        self.decoder.forward(&rows_to_chw(grid, side, side)?)
    }

    /// Full stage-1 pass with losses.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Stage1Forward<T>> {
        let features = self.encode(image)?;
        let selection = self.adaptive_mask(&features)?;
        let quantization = quantize(&selection.kept, &self.codebook)?;
        let demasked = self.fill_and_demask(&quantization.quantized, &selection.positions)?;
        let reconstruction = self.decode(&demasked)?;
        let recon_mse = mse(&reconstruction, image)?;
        let vq = vq_loss(&selection.kept, &quantization, self.cfg.beta)?;
        let loss = stage1_loss(&recon_mse, &vq)?;
        Ok(Stage1Forward {
            selection,
            quantization,
            reconstruction,
            recon_mse,
            vq,
            loss,
        })
    }

    pub fn parameters(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        self.encoder.params("enc", &mut out);
        self.mask.params("mask", &mut out);
        self.codebook.params("codebook", &mut out);
        self.demask.params("demask", &mut out);
        self.decoder.params("dec", &mut out);
        out
    }
}

/// Stage-1 objective: reconstruction MSE plus the quantization loss.
pub fn stage1_loss<T: Scalar>(recon_mse: &Tensor<T>, vq: &Tensor<T>) -> Result<Tensor<T>> {
    recon_mse.add(vq)
}
