//! Stage 2: joint autoregressive model of quantized codes and their grid
//! positions.
//!
//! A Code-Transformer predicts the next code from all previous codes and
//! positions; a Position-Transformer stacked on top predicts that code's
//! position from the previous steps plus the current code. Sequences are
//! rearranged into raster-scan position order before training.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, NamedParams};
use crate::tensor::{neg_mask, Scalar, Tensor};

/// Stage-2 architecture settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub code_blocks: usize,
    pub pos_blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// Codebook size K; payload code tokens live in [0, K).
    pub codebook_size: usize,
    /// Grid length L; payload position tokens live in [0, L).
    pub grid_len: usize,
    /// Number of class-condition tokens appended to the code vocabulary.
    pub num_classes: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            code_blocks: 4,
            pos_blocks: 2,
            d_model: 128,
            heads: 4,
            ff_mult: 4,
            codebook_size: 64,
            grid_len: 16,
            num_classes: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::InvalidConfigValue {
                key: "heads".into(),
                value: self.heads.to_string(),
                reason: format!("d_model {} must be divisible by the head count", self.d_model),
            });
        }
        if self.code_blocks == 0 || self.pos_blocks == 0 {
            return Err(Error::InvalidConfigValue {
                key: "code_blocks".into(),
                value: "0".into(),
                reason: "both transformers need at least one block".into(),
            });
        }
        Ok(())
    }

    /// Code vocabulary: K codes, one start token, then class tokens.
    pub fn code_vocab(&self) -> usize {
        self.codebook_size + 1 + self.num_classes
    }

    /// Position vocabulary: L grid slots plus the start-position token.
    pub fn pos_vocab(&self) -> usize {
        self.grid_len + 1
    }

    pub fn sos_code(&self) -> usize {
        self.codebook_size
    }

    pub fn class_token(&self, class_id: usize) -> Result<usize> {
        if class_id >= self.num_classes {
            return Err(Error::IndexOutOfRange {
                what: "class id",
                index: class_id,
                bound: self.num_classes,
            });
        }
        Ok(self.codebook_size + 1 + class_id)
    }

    pub fn sos_pos(&self) -> usize {
        self.grid_len
    }

    pub fn max_seq(&self) -> usize {
        1 + self.grid_len
    }
}

/// Paired (code, position) sequences with a one-token condition prefix
/// (start token, or a class token for conditional models).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPositionSequence {
    pub codes: Vec<usize>,
    pub positions: Vec<usize>,
    /// Condition prefix length; losses skip these steps.
    pub n_c: usize,
}

impl TokenPositionSequence {
    /// Build a training sequence from payload pairs: rearranges into
    /// raster-scan order and prepends the prefix token pair.
    pub fn from_payload(
        payload_codes: &[usize],
        payload_positions: &[usize],
        class_id: Option<usize>,
        cfg: &TransformerConfig,
    ) -> Result<Self> {
        let (codes, positions) = rearrange(payload_codes, payload_positions)?;
        for &c in &codes {
            if c >= cfg.codebook_size {
                return Err(Error::TokenOutOfVocab {
                    head: "code",
                    token: c,
                    vocab: cfg.codebook_size,
                });
            }
        }
        for &p in &positions {
            if p >= cfg.grid_len {
                return Err(Error::TokenOutOfVocab {
                    head: "position",
                    token: p,
                    vocab: cfg.grid_len,
                });
            }
        }
        let prefix = match class_id {
            Some(c) => cfg.class_token(c)?,
            None => cfg.sos_code(),
        };
        let mut all_codes = vec![prefix];
        all_codes.extend_from_slice(&codes);
        let mut all_positions = vec![cfg.sos_pos()];
        all_positions.extend_from_slice(&positions);
        Ok(TokenPositionSequence {
            codes: all_codes,
            positions: all_positions,
            n_c: 1,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn payload_len(&self) -> usize {
        self.len() - self.n_c
    }

    pub fn payload_codes(&self) -> &[usize] {
        &self.codes[self.n_c..]
    }

    pub fn payload_positions(&self) -> &[usize] {
        &self.positions[self.n_c..]
    }
}

/// Sort (code, position) pairs by ascending position, preserving pairing.
pub fn rearrange(codes: &[usize], positions: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if codes.len() != positions.len() {
        return Err(Error::LengthMismatch {
            what: "rearrange",
            left: codes.len(),
            right: positions.len(),
        });
    }
    let mut order: Vec<usize> = (0..codes.len()).collect();
    order.sort_by_key(|&i| positions[i]);
    for w in order.windows(2) {
        if positions[w[0]] == positions[w[1]] {
            return Err(Error::DuplicatePosition {
                position: positions[w[0]],
            });
        }
    }
    Ok((
        order.iter().map(|&i| codes[i]).collect(),
        order.iter().map(|&i| positions[i]).collect(),
    ))
}

struct MultiHeadAttention<T: Scalar> {
    wq: Linear<T>,
    wk: Linear<T>,
    wv: Linear<T>,
    wo: Linear<T>,
    heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    fn new(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        MultiHeadAttention {
            wq: Linear::new(d, d, 0.02, rng),
            wk: Linear::new(d, d, 0.02, rng),
            wv: Linear::new(d, d, 0.02, rng),
            wo: Linear::new(d, d, 0.02, rng),
            heads,
        }
    }

    fn forward(&self, x: &Tensor<T>, causal_mask: &Tensor<T>) -> Result<Tensor<T>> {
        let d = x.shape()[1];
        let dh = d / self.heads;
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, dh)?;
            let kh = k.slice_cols(h * dh, dh)?;
            let vh = v.slice_cols(h * dh, dh)?;
            let logits = qh.matmul(&kh.transpose()?)?.mul_scalar(scale);
            let attn = logits.add(causal_mask)?.softmax(1)?;
            head_outs.push(attn.matmul(&vh)?);
        }
        self.wo.forward(&Tensor::concat_cols(&head_outs)?)
    }

    fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

struct Block<T: Scalar> {
    ln1: LayerNorm<T>,
    attn: MultiHeadAttention<T>,
    ln2: LayerNorm<T>,
    fc1: Linear<T>,
    fc2: Linear<T>,
}

impl<T: Scalar> Block<T> {
    fn new(d: usize, heads: usize, ff_mult: usize, rng: &mut ChaCha8Rng) -> Self {
        Block {
            ln1: LayerNorm::new(d),
            attn: MultiHeadAttention::new(d, heads, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::new(d, d * ff_mult, 0.02, rng),
            fc2: Linear::new(d * ff_mult, d, 0.02, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>, causal_mask: &Tensor<T>) -> Result<Tensor<T>> {
        let x = x.add(&self.attn.forward(&self.ln1.forward(x)?, causal_mask)?)?;
        let ff = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu())?;
        x.add(&ff)
    }

    fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.ln1.params(&format!("{prefix}.ln1"), out);
        self.attn.params(&format!("{prefix}.attn"), out);
        self.ln2.params(&format!("{prefix}.ln2"), out);
        self.fc1.params(&format!("{prefix}.fc1"), out);
        self.fc2.params(&format!("{prefix}.fc2"), out);
    }
}

/// Strictly causal additive mask: 0 at or below the diagonal, the large
/// negative constant above it.
fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let mut m = vec![T::zero(); len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            m[i * len + j] = neg_mask::<T>();
        }
    }
    Tensor::from_vec(vec![len, len], m).unwrap()
}

/// The stacked Code-Transformer / Position-Transformer pair.
pub struct Stackformer<T: Scalar> {
    pub cfg: TransformerConfig,
    code_embed: Tensor<T>,
    pos_embed: Tensor<T>,
    abs_embed: Tensor<T>,
    code_blocks: Vec<Block<T>>,
    code_ln: LayerNorm<T>,
    pub code_head: Linear<T>,
    pos_blocks: Vec<Block<T>>,
    pos_ln: LayerNorm<T>,
    pub pos_head: Linear<T>,
}

impl<T: Scalar> Stackformer<T> {
    pub fn new(cfg: TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(Stackformer {
            code_embed: Tensor::normal(vec![cfg.code_vocab(), d], 0.02, rng, true),
            pos_embed: Tensor::normal(vec![cfg.pos_vocab(), d], 0.02, rng, true),
            abs_embed: Tensor::normal(vec![cfg.max_seq(), d], 0.02, rng, true),
            code_blocks: (0..cfg.code_blocks)
                .map(|_| Block::new(d, cfg.heads, cfg.ff_mult, rng))
                .collect(),
            code_ln: LayerNorm::new(d),
            code_head: Linear::new(d, cfg.code_vocab(), 0.02, rng),
            pos_blocks: (0..cfg.pos_blocks)
                .map(|_| Block::new(d, cfg.heads, cfg.ff_mult, rng))
                .collect(),
            pos_ln: LayerNorm::new(d),
            pos_head: Linear::new(d, cfg.pos_vocab(), 0.02, rng),
            cfg,
        })
    }

    fn check_tokens(&self, seq: &TokenPositionSequence) -> Result<()> {
        if seq.codes.len() != seq.positions.len() {
            return Err(Error::LengthMismatch {
                what: "token/position sequences",
                left: seq.codes.len(),
                right: seq.positions.len(),
            });
        }
        for &c in &seq.codes {
            if c >= self.cfg.code_vocab() {
                return Err(Error::TokenOutOfVocab {
                    head: "code",
                    token: c,
                    vocab: self.cfg.code_vocab(),
                });
            }
        }
        for &p in &seq.positions {
            if p >= self.cfg.pos_vocab() {
                return Err(Error::TokenOutOfVocab {
                    head: "position",
                    token: p,
                    vocab: self.cfg.pos_vocab(),
                });
            }
        }
        if seq.len() > self.cfg.max_seq() {
            return Err(Error::LengthMismatch {
                what: "sequence vs max length",
                left: seq.len(),
                right: self.cfg.max_seq(),
            });
        }
        Ok(())
    }

    /// Code-Transformer hidden states, one row per input step. Input
    /// embedding is code + code-position + learned absolute position.
    pub fn code_forward(&self, seq: &TokenPositionSequence) -> Result<Tensor<T>> {
        self.check_tokens(seq)?;
        let len = seq.len();
        let abs_idx: Vec<usize> = (0..len).collect();
        let mut x = self
            .code_embed
            .index_rows(&seq.codes)?
            .add(&self.pos_embed.index_rows(&seq.positions)?)?
            .add(&self.abs_embed.index_rows(&abs_idx)?)?;
        let mask = causal_mask::<T>(len);
        for block in &self.code_blocks {
            x = block.forward(&x, &mask)?;
        }
        self.code_ln.forward(&x)
    }

    /// Mean NLL of the payload codes under the code head, teacher forced.
    pub fn code_nll(&self, h_c: &Tensor<T>, seq: &TokenPositionSequence) -> Result<Tensor<T>> {
        let n = seq.payload_len();
        let hidden = h_c.slice_rows(seq.n_c - 1, n)?;
        let logits = self.code_head.forward(&hidden)?;
        logits.cross_entropy_rows(seq.payload_codes())
    }

    /// Position-Transformer hidden states: step input is the code hidden
    /// that predicted the step's code plus the embedding of that code.
    pub fn position_forward(
        &self,
        h_c: &Tensor<T>,
        seq: &TokenPositionSequence,
    ) -> Result<Tensor<T>> {
        self.position_hidden(h_c, seq.n_c, seq.payload_codes())
    }

    /// Core of the position stack. `payload_codes` may contain one more code
    /// than `h_c` has hidden rows past the prefix — the sampler calls this
    /// right after drawing a code, before the matching position exists.
    pub fn position_hidden(
        &self,
        h_c: &Tensor<T>,
        n_c: usize,
        payload_codes: &[usize],
    ) -> Result<Tensor<T>> {
        let n = payload_codes.len();
        if n == 0 {
            return Err(Error::LengthMismatch {
                what: "position forward payload",
                left: 0,
                right: 1,
            });
        }
        if n_c - 1 + n > h_c.shape()[0] {
            return Err(Error::LengthMismatch {
                what: "position forward hidden rows",
                left: n_c - 1 + n,
                right: h_c.shape()[0],
            });
        }
        let hidden = h_c.slice_rows(n_c - 1, n)?;
        let current_codes = self.code_embed.index_rows(payload_codes)?;
        let mut x = hidden.add(&current_codes)?;
        let mask = causal_mask::<T>(n);
        for block in &self.pos_blocks {
            x = block.forward(&x, &mask)?;
        }
        self.pos_ln.forward(&x)
    }

    /// Mean NLL of the payload positions, teacher forced.
    pub fn position_nll(&self, h_p: &Tensor<T>, seq: &TokenPositionSequence) -> Result<Tensor<T>> {
        let logits = self.pos_head.forward(h_p)?;
        logits.cross_entropy_rows(seq.payload_positions())
    }

    /// Both losses for one sequence: (code NLL, position NLL).
    pub fn losses(&self, seq: &TokenPositionSequence) -> Result<(Tensor<T>, Tensor<T>)> {
        let h_c = self.code_forward(seq)?;
        let code = self.code_nll(&h_c, seq)?;
        let h_p = self.position_forward(&h_c, seq)?;
        let pos = self.position_nll(&h_p, seq)?;
        Ok((code, pos))
    }

    pub fn parameters(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        out.push(("ar.code_embed".into(), self.code_embed.clone()));
        out.push(("ar.pos_embed".into(), self.pos_embed.clone()));
        out.push(("ar.abs_embed".into(), self.abs_embed.clone()));
        for (i, b) in self.code_blocks.iter().enumerate() {
            b.params(&format!("ar.code.block{i}"), &mut out);
        }
        self.code_ln.params("ar.code.ln", &mut out);
        self.code_head.params("ar.code.head", &mut out);
        for (i, b) in self.pos_blocks.iter().enumerate() {
            b.params(&format!("ar.pos.block{i}"), &mut out);
        }
        self.pos_ln.params("ar.pos.ln", &mut out);
        self.pos_head.params("ar.pos.head", &mut out);
        out
    }
}

/// Total stage-2 objective: unweighted sum of the two NLL terms.
pub fn total_loss<T: Scalar>(code_nll: &Tensor<T>, position_nll: &Tensor<T>) -> Result<Tensor<T>> {
    code_nll.add(position_nll)
}
