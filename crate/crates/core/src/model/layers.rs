//! Individual layers: valid cross-correlation with ReLU, per-channel batch
//! normalization, and non-overlapping max-pooling. Forward and backward are
//! hand-derived; everything is f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Channels-first activation tensor, row-major within each channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ChannelStack {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        ChannelStack { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.index(c, y, x);
        &mut self.data[i]
    }

    pub fn spatial_len(&self) -> usize {
        self.height * self.width
    }
}

/// Convolution kernels and biases. Weights are indexed
/// `[out_channel][in_channel][ky][kx]`, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        ConvLayer {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            weights: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            biases: vec![0.0; out_channels],
        }
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx
    }
}

/// Valid cross-correlation at stride 1, summing over input channels, plus
/// bias and ReLU. Output spatial dims are (h-kh+1, w-kw+1).
pub fn conv_forward(input: &ChannelStack, layer: &ConvLayer) -> Result<ChannelStack> {
    if input.channels != layer.in_channels {
        return Err(Error::shape(format!(
            "conv_forward: input has {} channels, layer expects {}",
            input.channels, layer.in_channels
        )));
    }
    if layer.kernel_h > input.height || layer.kernel_w > input.width {
        return Err(Error::shape(format!(
            "conv_forward: kernel {}x{} larger than input {}x{}",
            layer.kernel_h, layer.kernel_w, input.height, input.width
        )));
    }
    let out_h = input.height - layer.kernel_h + 1;
    let out_w = input.width - layer.kernel_w + 1;
    let mut out = ChannelStack::zeros(layer.out_channels, out_h, out_w);
    for o in 0..layer.out_channels {
        for y in 0..out_h {
            for x in 0..out_w {
                let mut acc = layer.biases[o];
                for i in 0..layer.in_channels {
                    for ky in 0..layer.kernel_h {
                        for kx in 0..layer.kernel_w {
                            acc += layer.weights[layer.weight_index(o, i, ky, kx)]
                                * input.at(i, y + ky, x + kx);
                        }
                    }
                }
                *out.at_mut(o, y, x) = acc.max(0.0);
            }
        }
    }
    Ok(out)
}

/// Backward through the convolution given the gradient w.r.t. the
/// *pre-activation* (the ReLU mask is applied by the caller). Returns kernel
/// and bias gradients, plus the input gradient when requested.
pub fn conv_backward(
    input: &ChannelStack,
    layer: &ConvLayer,
    d_pre: &ChannelStack,
    want_d_input: bool,
) -> (Vec<f64>, Vec<f64>, Option<ChannelStack>) {
    let mut d_weights = vec![0.0; layer.weights.len()];
    let mut d_biases = vec![0.0; layer.biases.len()];
    let mut d_input = if want_d_input {
        Some(ChannelStack::zeros(input.channels, input.height, input.width))
    } else {
        None
    };
    for o in 0..layer.out_channels {
        for y in 0..d_pre.height {
            for x in 0..d_pre.width {
                let g = d_pre.at(o, y, x);
                if g == 0.0 {
                    continue;
                }
                d_biases[o] += g;
                for i in 0..layer.in_channels {
                    for ky in 0..layer.kernel_h {
                        for kx in 0..layer.kernel_w {
                            let wi = layer.weight_index(o, i, ky, kx);
                            d_weights[wi] += g * input.at(i, y + ky, x + kx);
                            if let Some(di) = d_input.as_mut() {
                                *di.at_mut(i, y + ky, x + kx) += g * layer.weights[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (d_weights, d_biases, d_input)
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel scale/shift with running statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Batch statistics captured by a Train-mode forward pass. The forward pass
/// itself never mutates the layer; the training loop commits these into the
/// running statistics explicitly.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Train mode normalizes each channel with statistics over that channel's
/// spatial positions and returns them in the cache; Eval mode uses the
/// layer's running statistics and returns no cache.
pub fn batchnorm_forward(
    input: &ChannelStack,
    layer: &BatchNormLayer,
    mode: Mode,
) -> Result<(ChannelStack, Option<BnCache>)> {
    if input.channels != layer.channels() {
        return Err(Error::shape(format!(
            "batchnorm_forward: {} channels vs layer {}",
            input.channels,
            layer.channels()
        )));
    }
    let n = input.spatial_len() as f64;
    let mut out = ChannelStack::zeros(input.channels, input.height, input.width);
    let mut cache = None;
    match mode {
        Mode::Train => {
            let mut means = Vec::with_capacity(input.channels);
            let mut vars = Vec::with_capacity(input.channels);
            for c in 0..input.channels {
                let base = c * input.spatial_len();
                let slice = &input.data[base..base + input.spatial_len()];
                let mean = slice.iter().sum::<f64>() / n;
                let var = slice.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                let inv_std = 1.0 / (var + BN_EPSILON).sqrt();
                for (k, &x) in slice.iter().enumerate() {
                    out.data[base + k] = layer.gamma[c] * (x - mean) * inv_std + layer.beta[c];
                }
                means.push(mean);
                vars.push(var);
            }
            cache = Some(BnCache { mean: means, var: vars });
        }
        Mode::Eval => {
            for c in 0..input.channels {
                let base = c * input.spatial_len();
                let inv_std = 1.0 / (layer.running_var[c] + BN_EPSILON).sqrt();
                for k in 0..input.spatial_len() {
                    let x = input.data[base + k];
                    out.data[base + k] =
                        layer.gamma[c] * (x - layer.running_mean[c]) * inv_std + layer.beta[c];
                }
            }
        }
    }
    Ok((out, cache))
}

/// Full batch-statistics gradient: mean and variance are functions of the
/// input, so their contributions are included.
pub fn batchnorm_backward(
    input: &ChannelStack,
    layer: &BatchNormLayer,
    cache: &BnCache,
    d_out: &ChannelStack,
) -> (ChannelStack, Vec<f64>, Vec<f64>) {
    let n = input.spatial_len() as f64;
    let spatial = input.spatial_len();
    let mut d_input = ChannelStack::zeros(input.channels, input.height, input.width);
    let mut d_gamma = vec![0.0; input.channels];
    let mut d_beta = vec![0.0; input.channels];
    for c in 0..input.channels {
        let base = c * spatial;
        let mean = cache.mean[c];
        let inv_std = 1.0 / (cache.var[c] + BN_EPSILON).sqrt();
        let x = &input.data[base..base + spatial];
        let dy = &d_out.data[base..base + spatial];

        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for k in 0..spatial {
            let xhat = (x[k] - mean) * inv_std;
            sum_dy += dy[k];
            sum_dy_xhat += dy[k] * xhat;
        }
        d_gamma[c] = sum_dy_xhat;
        d_beta[c] = sum_dy;

        // dx = gamma * inv_std / n * (n*dy - sum(dy) - xhat * sum(dy*xhat))
        let scale = layer.gamma[c] * inv_std / n;
        for k in 0..spatial {
            let xhat = (x[k] - mean) * inv_std;
            d_input.data[base + k] = scale * (n * dy[k] - sum_dy - xhat * sum_dy_xhat);
        }
    }
    (d_input, d_gamma, d_beta)
}

/// Non-overlapping max pooling, stride = window. Trailing rows/cols that do
/// not fill a window are dropped. Ties take the first element in row-major
/// order so backward routing is deterministic. The returned indices are flat
/// positions into the input, one per output element.
pub fn maxpool_forward(
    input: &ChannelStack,
    pool_h: usize,
    pool_w: usize,
) -> Result<(ChannelStack, Vec<usize>)> {
    if pool_h == 0 || pool_w == 0 || pool_h > input.height || pool_w > input.width {
        return Err(Error::shape(format!(
            "maxpool_forward: window {}x{} on input {}x{}",
            pool_h, pool_w, input.height, input.width
        )));
    }
    let out_h = input.height / pool_h;
    let out_w = input.width / pool_w;
    let mut out = ChannelStack::zeros(input.channels, out_h, out_w);
    let mut argmax = Vec::with_capacity(input.channels * out_h * out_w);
    for c in 0..input.channels {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for wy in 0..pool_h {
                    for wx in 0..pool_w {
                        let y = oy * pool_h + wy;
                        let x = ox * pool_w + wx;
                        let v = input.at(c, y, x);
                        if v > best {
                            best = v;
                            best_idx = input.index(c, y, x);
                        }
                    }
                }
                *out.at_mut(c, oy, ox) = best;
                argmax.push(best_idx);
            }
        }
    }
    Ok((out, argmax))
}

/// Route output gradients back to the recorded argmax positions.
pub fn maxpool_backward(
    input_shape: (usize, usize, usize),
    argmax: &[usize],
    d_out: &ChannelStack,
) -> ChannelStack {
    let (c, h, w) = input_shape;
    let mut d_input = ChannelStack::zeros(c, h, w);
    for (k, &idx) in argmax.iter().enumerate() {
        d_input.data[idx] += d_out.data[k];
    }
    d_input
}
