//! Adam with decoupled weight decay, plus the warmup-then-cosine learning
//! rate schedule used for the transformer stage.
//!
//! Moment buffers are kept in the parameter dtype so that checkpointed
//! optimizer state round-trips bit-exactly; the update arithmetic itself
//! runs in f64 and is deterministic.

use crate::nn::NamedParams;
use crate::tensor::{Scalar, Tensor};

pub struct AdamW<T: Scalar> {
    pub params: NamedParams<T>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of `step` calls applied so far (bias-correction time).
    pub steps_done: usize,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: NamedParams<T>, weight_decay: f64) -> Self {
        let m = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        let v = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
        AdamW {
            params,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay,
            steps_done: 0,
            m,
            v,
        }
    }

    /// One update with the given learning rate. Parameters without a
    /// gradient this step are left untouched.
    pub fn step(&mut self, lr: f64) {
        self.steps_done += 1;
        let t = self.steps_done as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, (_, param)) in self.params.iter().enumerate() {
            let Some(grad) = param.grad_vec() else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            param.with_data_mut(|data| {
                for i in 0..data.len() {
                    let g = grad[i].as_f64();
                    let mi = self.beta1 * m[i].as_f64() + (1.0 - self.beta1) * g;
                    let vi = self.beta2 * v[i].as_f64() + (1.0 - self.beta2) * g * g;
                    m[i] = T::from_f64(mi);
                    v[i] = T::from_f64(vi);
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    let p = data[i].as_f64();
                    let update = mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p;
                    data[i] = T::from_f64(p - lr * update);
                }
            });
        }
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Moment buffers as named tensors (`opt.m.*` / `opt.v.*`) for
    /// checkpointing.
    pub fn state_tensors(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        for (idx, (name, p)) in self.params.iter().enumerate() {
            out.push((
                format!("opt.m.{name}"),
                Tensor::from_vec(p.shape().to_vec(), self.m[idx].clone()).unwrap(),
            ));
            out.push((
                format!("opt.v.{name}"),
                Tensor::from_vec(p.shape().to_vec(), self.v[idx].clone()).unwrap(),
            ));
        }
        out
    }

    /// Restore moment buffers and step count saved by `state_tensors`.
    pub fn load_state(&mut self, mut lookup: impl FnMut(&str) -> Option<Vec<T>>, steps_done: usize) {
        for (idx, (name, _)) in self.params.iter().enumerate() {
            if let Some(m) = lookup(&format!("opt.m.{name}")) {
                self.m[idx] = m;
            }
            if let Some(v) = lookup(&format!("opt.v.{name}")) {
                self.v[idx] = v;
            }
        }
        self.steps_done = steps_done;
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then cosine decay to
    /// `min_factor * base`.
    WarmupCosine {
        warmup: usize,
        total: usize,
        min_factor: f64,
    },
}

pub fn lr_at(schedule: LrSchedule, base: f64, step: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::WarmupCosine {
            warmup,
            total,
            min_factor,
        } => {
            if warmup > 0 && step < warmup {
                return base * (step + 1) as f64 / warmup as f64;
            }
            let span = total.saturating_sub(warmup).max(1);
            let progress = (step.saturating_sub(warmup)) as f64 / span as f64;
            let progress = progress.min(1.0);
            let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            base * (min_factor + (1.0 - min_factor) * cos)
        }
    }
}
