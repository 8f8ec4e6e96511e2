//! Small parameterized building blocks shared by the stage-1 and stage-2
//! networks: linear layers, layer-norm parameter bundles, and the named
//! parameter lists used by the optimizer and checkpoints.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Named trainable tensors, in registration order.
pub type NamedParams<T> = Vec<(String, Tensor<T>)>;

/// Fully connected layer: `x [n x in] -> x . w + b [n x out]`.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(fan_in: usize, fan_out: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Tensor::normal(vec![fan_in, fan_out], std, rng, true),
            bias: Tensor::new(vec![fan_out], vec![T::zero(); fan_out], true).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add_bias(&self.bias)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Learnable gain/bias for layer normalization over the last dimension.
pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Tensor::new(vec![dim], vec![T::one(); dim], true).unwrap(),
            bias: Tensor::new(vec![dim], vec![T::zero(); dim], true).unwrap(),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.gain, &self.bias, self.eps)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Learnable gain/bias for group normalization of `[c x h x w]`.
pub struct GroupNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub groups: usize,
    pub eps: f64,
}

impl<T: Scalar> GroupNorm<T> {
    /// Largest of {8, 4, 2, 1} dividing `channels` is used as the group count.
    pub fn new(channels: usize) -> Self {
        let groups = [8usize, 4, 2, 1]
            .into_iter()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        GroupNorm {
            gain: Tensor::new(vec![channels], vec![T::one(); channels], true).unwrap(),
            bias: Tensor::new(vec![channels], vec![T::zero(); channels], true).unwrap(),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.group_norm(self.groups, &self.gain, &self.bias, self.eps)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Convolution weights with bias.
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // He-style scale for the fan-in of a kernel
        let std = (2.0 / (c_in * kernel * kernel) as f64).sqrt();
        Conv2d {
            weight: Tensor::normal(vec![c_out, c_in, kernel, kernel], std, rng, true),
            bias: Tensor::new(vec![c_out], vec![T::zero(); c_out], true).unwrap(),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Flatten `[d x h x w]` features into `[h*w x d]` raster-scan rows.
pub fn chw_to_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    x.reshape(vec![d, h * w])?.transpose()?.reshape(vec![h * w, d])
}

/// Inverse of [`chw_to_rows`].
pub fn rows_to_chw<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let shape = x.shape().to_vec();
    let d = shape[1];
    x.transpose()?.reshape(vec![d, h, w])
}
