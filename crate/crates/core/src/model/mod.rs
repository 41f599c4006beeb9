//! The CNN rating regressor: stacked conv/batchnorm/pool blocks over the
//! matching matrix, a dense ReLU layer, and a linear regression head.

pub mod checkpoint;
pub mod layers;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchingMatrix;
pub use layers::{
    batchnorm_backward, batchnorm_forward, conv_backward, conv_forward, maxpool_backward,
    maxpool_forward, BatchNormLayer, BnCache, ChannelStack, ConvLayer, Mode,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockConfig {
    pub kernels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pool_h: usize,
    pub pool_w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_max: usize,
    pub m_max: usize,
    pub conv_blocks: Vec<ConvBlockConfig>,
    pub dense_units: usize,
    pub use_batchnorm: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_max: 256,
            m_max: 256,
            conv_blocks: vec![
                ConvBlockConfig { kernels: 8, kernel_h: 3, kernel_w: 3, pool_h: 2, pool_w: 2 },
                ConvBlockConfig { kernels: 16, kernel_h: 3, kernel_w: 3, pool_h: 2, pool_w: 2 },
            ],
            dense_units: 32,
            use_batchnorm: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Output (channels, height, width) after each block. Errors name the
    /// block whose convolution or pooling collapses a dimension below 1.
    pub fn block_output_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        if self.conv_blocks.is_empty() {
            return Err(Error::invalid_config("at least one conv block is required"));
        }
        if self.dense_units == 0 {
            return Err(Error::invalid_config("dense_units must be >= 1"));
        }
        let mut h = self.n_max;
        let mut w = self.m_max;
        let mut shapes = Vec::with_capacity(self.conv_blocks.len());
        for (b, blk) in self.conv_blocks.iter().enumerate() {
            if blk.kernels == 0 || blk.kernel_h == 0 || blk.kernel_w == 0
                || blk.pool_h == 0 || blk.pool_w == 0
            {
                return Err(Error::invalid_config(format!(
                    "block {b}: kernel and pool dims must be >= 1"
                )));
            }
            if blk.kernel_h > h || blk.kernel_w > w {
                return Err(Error::invalid_config(format!(
                    "block {b}: kernel {}x{} exceeds input {}x{}",
                    blk.kernel_h, blk.kernel_w, h, w
                )));
            }
            h = h - blk.kernel_h + 1;
            w = w - blk.kernel_w + 1;
            h /= blk.pool_h;
            w /= blk.pool_w;
            if h == 0 || w == 0 {
                return Err(Error::invalid_config(format!(
                    "block {b}: pooling {}x{} collapses the feature map below 1x1",
                    blk.pool_h, blk.pool_w
                )));
            }
            shapes.push((blk.kernels, h, w));
        }
        Ok(shapes)
    }

    /// Flattened length of the last block's output.
    pub fn flatten_len(&self) -> Result<usize> {
        let (c, h, w) = *self.block_output_shapes()?.last().unwrap();
        Ok(c * h * w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub bn: Option<BatchNormLayer>,
}

/// Full parameter set of the regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnRegressor {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlock>,
    /// `[dense_units][flatten_len]`, row-major.
    pub dense_weights: Vec<f64>,
    pub dense_biases: Vec<f64>,
    pub reg_weights: Vec<f64>,
    pub reg_bias: f64,
}

/// He-style initialization: weights ~ Normal(0, sqrt(2/fan_in)), biases 0,
/// batchnorm gamma 1 / beta 0. Deterministic per seed.
pub fn init_params(config: &ModelConfig) -> Result<CnnRegressor> {
    config.block_output_shapes()?; // validates the shape pipeline
    let flatten = config.flatten_len()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut he = |fan_in: usize, count: usize| -> Vec<f64> {
        let std = (2.0 / fan_in as f64).sqrt();
        (0..count).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect()
    };

    let mut blocks = Vec::with_capacity(config.conv_blocks.len());
    let mut in_channels = 1;
    for blk in &config.conv_blocks {
        let mut conv = ConvLayer::zeros(in_channels, blk.kernels, blk.kernel_h, blk.kernel_w);
        let fan_in = in_channels * blk.kernel_h * blk.kernel_w;
        conv.weights = he(fan_in, conv.weights.len());
        let bn = config.use_batchnorm.then(|| BatchNormLayer::new(blk.kernels));
        blocks.push(ConvBlock { conv, bn });
        in_channels = blk.kernels;
    }

    let dense_weights = he(flatten, config.dense_units * flatten);
    let reg_weights = he(config.dense_units, config.dense_units);
    Ok(CnnRegressor {
        config: config.clone(),
        blocks,
        dense_weights,
        dense_biases: vec![0.0; config.dense_units],
        reg_weights,
        reg_bias: 0.0,
    })
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub mode: Mode,
    pub block_inputs: Vec<ChannelStack>,
    /// Post-ReLU conv outputs (also the batchnorm inputs).
    pub conv_outputs: Vec<ChannelStack>,
    pub bn_caches: Vec<Option<BnCache>>,
    pub pool_argmax: Vec<Vec<usize>>,
    pub pool_outputs: Vec<ChannelStack>,
    pub dense_input: Vec<f64>,
    /// Post-ReLU dense activations (the regression head's input O).
    pub dense_output: Vec<f64>,
    pub prediction: f64,
}

/// Flat gradient vector aligned with [`CnnRegressor::flat_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub flat: Vec<f64>,
}

impl CnnRegressor {
    /// Forward pass. Never mutates the model; Train-mode batch statistics
    /// land in the trace and are committed via [`commit_batch_stats`].
    ///
    /// [`commit_batch_stats`]: CnnRegressor::commit_batch_stats
    pub fn predict_rating(
        &self,
        matrix: &MatchingMatrix,
        mode: Mode,
    ) -> Result<(f64, ForwardTrace)> {
        if matrix.n_max != self.config.n_max || matrix.m_max != self.config.m_max {
            return Err(Error::shape(format!(
                "matrix {}x{} does not match model input {}x{}",
                matrix.n_max, matrix.m_max, self.config.n_max, self.config.m_max
            )));
        }
        let mut stack = ChannelStack {
            channels: 1,
            height: matrix.n_max,
            width: matrix.m_max,
            data: matrix.values.clone(),
        };

        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut conv_outputs = Vec::with_capacity(self.blocks.len());
        let mut bn_caches = Vec::with_capacity(self.blocks.len());
        let mut pool_argmax = Vec::with_capacity(self.blocks.len());
        let mut pool_outputs = Vec::with_capacity(self.blocks.len());

        for (block, cfg) in self.blocks.iter().zip(&self.config.conv_blocks) {
            let conv_out = conv_forward(&stack, &block.conv)?;
            let (bn_out, cache) = match &block.bn {
                Some(bn) => batchnorm_forward(&conv_out, bn, mode)?,
                None => (conv_out.clone(), None),
            };
            let (pool_out, argmax) = maxpool_forward(&bn_out, cfg.pool_h, cfg.pool_w)?;
            block_inputs.push(stack);
            conv_outputs.push(conv_out);
            bn_caches.push(cache);
            pool_argmax.push(argmax);
            pool_outputs.push(pool_out.clone());
            stack = pool_out;
        }

        let dense_input = stack.data.clone();
        let flatten = dense_input.len();
        let mut dense_output = vec![0.0; self.config.dense_units];
        for u in 0..self.config.dense_units {
            let mut acc = self.dense_biases[u];
            let row = &self.dense_weights[u * flatten..(u + 1) * flatten];
            for (w, x) in row.iter().zip(&dense_input) {
                acc += w * x;
            }
            dense_output[u] = acc.max(0.0);
        }

        let mut prediction = self.reg_bias;
        for (w, o) in self.reg_weights.iter().zip(&dense_output) {
            prediction += w * o;
        }

        Ok((
            prediction,
            ForwardTrace {
                mode,
                block_inputs,
                conv_outputs,
                bn_caches,
                pool_argmax,
                pool_outputs,
                dense_input,
                dense_output,
                prediction,
            },
        ))
    }

    /// Fold the trace's batch statistics into the running statistics.
    pub fn commit_batch_stats(&mut self, trace: &ForwardTrace) {
        use layers::BN_MOMENTUM;
        for (block, cache) in self.blocks.iter_mut().zip(&trace.bn_caches) {
            if let (Some(bn), Some(cache)) = (block.bn.as_mut(), cache) {
                for c in 0..bn.channels() {
                    bn.running_mean[c] =
                        (1.0 - BN_MOMENTUM) * bn.running_mean[c] + BN_MOMENTUM * cache.mean[c];
                    bn.running_var[c] =
                        (1.0 - BN_MOMENTUM) * bn.running_var[c] + BN_MOMENTUM * cache.var[c];
                }
            }
        }
    }

    /// Exact gradients of `d_pred * prediction` w.r.t. every trainable
    /// parameter, in [`flat_params`] order. The input gradient stops at the
    /// first block: embeddings are frozen so it is never needed.
    ///
    /// [`flat_params`]: CnnRegressor::flat_params
    pub fn backward(&self, trace: &ForwardTrace, d_pred: f64) -> Result<Gradients> {
        if trace.mode != Mode::Train {
            return Err(Error::invalid_input(
                "backward requires a trace produced in Train mode",
            ));
        }
        if trace.block_inputs.len() != self.blocks.len()
            || trace.dense_output.len() != self.config.dense_units
            || trace.dense_input.len() != self.config.flatten_len()?
        {
            return Err(Error::invalid_input(
                "stale trace: shapes do not match this model",
            ));
        }
        for (b, (block, cache)) in self.blocks.iter().zip(&trace.bn_caches).enumerate() {
            if block.bn.is_some() != cache.is_some() {
                return Err(Error::invalid_input(format!(
                    "stale trace: batchnorm cache mismatch at block {b}"
                )));
            }
        }

        let flatten = trace.dense_input.len();

        // regression head
        let d_reg_bias = d_pred;
        let d_reg_weights: Vec<f64> = trace.dense_output.iter().map(|o| d_pred * o).collect();

        // dense layer (ReLU)
        let mut d_dense_pre = vec![0.0; self.config.dense_units];
        for u in 0..self.config.dense_units {
            if trace.dense_output[u] > 0.0 {
                d_dense_pre[u] = d_pred * self.reg_weights[u];
            }
        }
        let mut d_dense_weights = vec![0.0; self.dense_weights.len()];
        for u in 0..self.config.dense_units {
            let g = d_dense_pre[u];
            if g != 0.0 {
                for i in 0..flatten {
                    d_dense_weights[u * flatten + i] = g * trace.dense_input[i];
                }
            }
        }
        let d_dense_biases = d_dense_pre.clone();

        let mut d_flat = vec![0.0; flatten];
        for u in 0..self.config.dense_units {
            let g = d_dense_pre[u];
            if g != 0.0 {
                let row = &self.dense_weights[u * flatten..(u + 1) * flatten];
                for (i, w) in row.iter().enumerate() {
                    d_flat[i] += g * w;
                }
            }
        }

        // walk the blocks backwards
        let last = self.blocks.len() - 1;
        let last_out = &trace.pool_outputs[last];
        let mut d_stack = ChannelStack {
            channels: last_out.channels,
            height: last_out.height,
            width: last_out.width,
            data: d_flat,
        };

        struct BlockGrads {
            d_weights: Vec<f64>,
            d_biases: Vec<f64>,
            d_gamma: Option<Vec<f64>>,
            d_beta: Option<Vec<f64>>,
        }
        let mut block_grads: Vec<Option<BlockGrads>> = (0..self.blocks.len()).map(|_| None).collect();

        for b in (0..self.blocks.len()).rev() {
            let block = &self.blocks[b];
            let conv_out = &trace.conv_outputs[b];

            // pool backward into the pool input's shape
            let pool_in_shape = (conv_out.channels, conv_out.height, conv_out.width);
            let mut d_bn_out = maxpool_backward(pool_in_shape, &trace.pool_argmax[b], &d_stack);

            // batchnorm backward (input was the post-ReLU conv output)
            let (d_conv_out, d_gamma, d_beta) = match (&block.bn, &trace.bn_caches[b]) {
                (Some(bn), Some(cache)) => {
                    let (dx, dg, db) = batchnorm_backward(conv_out, bn, cache, &d_bn_out);
                    (dx, Some(dg), Some(db))
                }
                _ => (std::mem::replace(&mut d_bn_out, ChannelStack::zeros(0, 0, 0)), None, None),
            };

            // ReLU mask, then conv backward
            let mut d_pre = d_conv_out;
            for (g, &out) in d_pre.data.iter_mut().zip(&conv_out.data) {
                if out <= 0.0 {
                    *g = 0.0;
                }
            }
            let want_d_input = b > 0;
            let (d_weights, d_biases, d_input) =
                conv_backward(&trace.block_inputs[b], &block.conv, &d_pre, want_d_input);
            block_grads[b] = Some(BlockGrads { d_weights, d_biases, d_gamma, d_beta });
            if let Some(di) = d_input {
                d_stack = di;
            }
        }

        // flatten in layout order
        let mut flat = Vec::with_capacity(self.param_count());
        for g in block_grads.into_iter().flatten() {
            flat.extend(g.d_weights);
            flat.extend(g.d_biases);
            if let Some(dg) = g.d_gamma {
                flat.extend(dg);
            }
            if let Some(db) = g.d_beta {
                flat.extend(db);
            }
        }
        flat.extend(d_dense_weights);
        flat.extend(d_dense_biases);
        flat.extend(d_reg_weights);
        flat.push(d_reg_bias);
        debug_assert_eq!(flat.len(), self.param_count());
        Ok(Gradients { flat })
    }

    /// Named trainable tensors in flat-params order.
    pub fn param_layout(&self) -> Vec<(String, usize)> {
        let mut layout = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            layout.push((format!("block{b}.conv.weights"), block.conv.weights.len()));
            layout.push((format!("block{b}.conv.biases"), block.conv.biases.len()));
            if let Some(bn) = &block.bn {
                layout.push((format!("block{b}.bn.gamma"), bn.gamma.len()));
                layout.push((format!("block{b}.bn.beta"), bn.beta.len()));
            }
        }
        layout.push(("dense.weights".to_string(), self.dense_weights.len()));
        layout.push(("dense.biases".to_string(), self.dense_biases.len()));
        layout.push(("regression.weights".to_string(), self.reg_weights.len()));
        layout.push(("regression.bias".to_string(), 1));
        layout
    }

    pub fn param_count(&self) -> usize {
        self.param_layout().iter().map(|(_, n)| n).sum()
    }

    /// Trainable tensor name containing the given flat-params index.
    pub fn param_name(&self, index: usize) -> String {
        let mut offset = 0;
        for (name, len) in self.param_layout() {
            if index < offset + len {
                return name;
            }
            offset += len;
        }
        "unknown".to_string()
    }

    /// All trainable parameters as one flat vector (running statistics are
    /// not trainable and are excluded).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        for block in &self.blocks {
            flat.extend_from_slice(&block.conv.weights);
            flat.extend_from_slice(&block.conv.biases);
            if let Some(bn) = &block.bn {
                flat.extend_from_slice(&bn.gamma);
                flat.extend_from_slice(&bn.beta);
            }
        }
        flat.extend_from_slice(&self.dense_weights);
        flat.extend_from_slice(&self.dense_biases);
        flat.extend_from_slice(&self.reg_weights);
        flat.push(self.reg_bias);
        flat
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut pos = 0;
        let mut take = |len: usize| -> &[f64] {
            let s = &flat[pos..pos + len];
            pos += len;
            s
        };
        for block in &mut self.blocks {
            let n = block.conv.weights.len();
            block.conv.weights.copy_from_slice(take(n));
            let n = block.conv.biases.len();
            block.conv.biases.copy_from_slice(take(n));
            if let Some(bn) = &mut block.bn {
                let n = bn.gamma.len();
                bn.gamma.copy_from_slice(take(n));
                let n = bn.beta.len();
                bn.beta.copy_from_slice(take(n));
            }
        }
        let n = self.dense_weights.len();
        self.dense_weights.copy_from_slice(take(n));
        let n = self.dense_biases.len();
        self.dense_biases.copy_from_slice(take(n));
        let n = self.reg_weights.len();
        self.reg_weights.copy_from_slice(take(n));
        self.reg_bias = take(1)[0];
        Ok(())
    }
}

/// Clamp a raw prediction into the rating scale for reporting. Training never
/// clamps: that would zero the gradients.
pub fn clamp_rating(raw: f64) -> f64 {
    raw.clamp(1.0, 5.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::MatchingMatrix;
    use rand::Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            n_max: 12,
            m_max: 12,
            conv_blocks: vec![ConvBlockConfig {
                kernels: 2,
                kernel_h: 3,
                kernel_w: 3,
                pool_h: 2,
                pool_w: 2,
            }],
            dense_units: 4,
            use_batchnorm: true,
            init_seed: 1,
        }
    }

    fn random_matrix(n: usize, m: usize, rng: &mut impl Rng) -> MatchingMatrix {
        let mut mat = MatchingMatrix::zeros(n, m);
        for v in mat.values.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        mat.valid_rows = n;
        mat.valid_cols = m;
        mat
    }

    #[test]
    fn shape_pipeline() {
        let cfg = toy_config();
        // 12 -> conv3 -> 10 -> pool2 -> 5
        assert_eq!(cfg.block_output_shapes().unwrap(), vec![(2, 5, 5)]);
        assert_eq!(cfg.flatten_len().unwrap(), 50);
    }

    #[test]
    fn collapsing_pipeline_names_block() {
        let mut cfg = toy_config();
        cfg.conv_blocks.push(ConvBlockConfig {
            kernels: 2,
            kernel_h: 3,
            kernel_w: 3,
            pool_h: 8,
            pool_w: 8,
        });
        let err = init_params(&cfg).unwrap_err();
        assert!(err.to_string().contains("block 1"), "{err}");
    }

    #[test]
    fn init_deterministic_and_biases_zero() {
        let cfg = toy_config();
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.blocks[0].conv.biases.iter().all(|&x| x == 0.0));
        assert!(a.dense_biases.iter().all(|&x| x == 0.0));
        assert_eq!(a.reg_bias, 0.0);
        let bn = a.blocks[0].bn.as_ref().unwrap();
        assert!(bn.gamma.iter().all(|&g| g == 1.0));
        assert!(bn.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_he_std() {
        // fan_in 9 over many kernels: empirical std within 5% of sqrt(2/9)
        let cfg = ModelConfig {
            n_max: 8,
            m_max: 8,
            conv_blocks: vec![ConvBlockConfig {
                kernels: 1200,
                kernel_h: 3,
                kernel_w: 3,
                pool_h: 2,
                pool_w: 2,
            }],
            dense_units: 1,
            use_batchnorm: false,
            init_seed: 5,
        };
        let model = init_params(&cfg).unwrap();
        let w = &model.blocks[0].conv.weights;
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / w.len() as f64).sqrt();
        let expect = (2.0f64 / 9.0).sqrt();
        assert!((std - expect).abs() / expect < 0.05, "std {std} vs {expect}");
    }

    #[test]
    fn constant_head_prediction() {
        let cfg = toy_config();
        let mut model = init_params(&cfg).unwrap();
        let zeros = vec![0.0; model.param_count()];
        model.set_flat_params(&zeros).unwrap();
        model.reg_bias = 3.7;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mat = random_matrix(12, 12, &mut rng);
        let (pred, _) = model.predict_rating(&mat, Mode::Eval).unwrap();
        assert_eq!(pred, 3.7);
    }

    #[test]
    fn zero_input_predicts_reg_bias() {
        let cfg = ModelConfig { use_batchnorm: false, ..toy_config() };
        let mut model = init_params(&cfg).unwrap();
        model.reg_bias = 2.5;
        let mat = MatchingMatrix::zeros(12, 12);
        let (pred, _) = model.predict_rating(&mat, Mode::Eval).unwrap();
        // zero input, zero conv biases -> dense input all zeros -> g
        assert_eq!(pred, 2.5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let model = init_params(&toy_config()).unwrap();
        let mat = MatchingMatrix::zeros(10, 12);
        assert!(model.predict_rating(&mat, Mode::Eval).is_err());
    }

    #[test]
    fn eval_mode_bitwise_deterministic() {
        let model = init_params(&toy_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mat = random_matrix(12, 12, &mut rng);
        let (a, _) = model.predict_rating(&mat, Mode::Eval).unwrap();
        let (b, _) = model.predict_rating(&mat, Mode::Eval).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn relu_makes_conv_output_nonnegative() {
        let model = init_params(&toy_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mat = random_matrix(12, 12, &mut rng);
        let (_, trace) = model.predict_rating(&mat, Mode::Train).unwrap();
        assert!(trace.conv_outputs[0].data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_loss_gives_zero_gradients() {
        let model = init_params(&toy_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mat = random_matrix(12, 12, &mut rng);
        let (_, trace) = model.predict_rating(&mat, Mode::Train).unwrap();
        let grads = model.backward(&trace, 0.0).unwrap();
        assert!(grads.flat.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn reg_bias_gradient_is_d_pred() {
        let model = init_params(&toy_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mat = random_matrix(12, 12, &mut rng);
        let (_, trace) = model.predict_rating(&mat, Mode::Train).unwrap();
        let grads = model.backward(&trace, 1.75).unwrap();
        assert_eq!(*grads.flat.last().unwrap(), 1.75);
    }

    #[test]
    fn backward_rejects_eval_trace() {
        let model = init_params(&toy_config()).unwrap();
        let mat = MatchingMatrix::zeros(12, 12);
        let (_, trace) = model.predict_rating(&mat, Mode::Eval).unwrap();
        assert!(model.backward(&trace, 1.0).is_err());
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences against the analytic gradient.
    fn check_gradients(cfg: &ModelConfig, seed: u64) -> f64 {
        let mut cfg = cfg.clone();
        cfg.init_seed = seed;
        let model = init_params(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
        let mat = random_matrix(cfg.n_max, cfg.m_max, &mut rng);

        let (pred, trace) = model.predict_rating(&mat, Mode::Train).unwrap();
        let target = 3.0;
        let d_pred = 2.0 * (pred - target);
        let grads = model.backward(&trace, d_pred).unwrap();

        let params = model.flat_params();
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for k in 0..params.len() {
            let mut plus = model.clone();
            let mut p = params.clone();
            p[k] += h;
            plus.set_flat_params(&p).unwrap();
            let (fp, _) = plus.predict_rating(&mat, Mode::Train).unwrap();
            let mut minus = model.clone();
            p[k] = params[k] - h;
            minus.set_flat_params(&p).unwrap();
            let (fm, _) = minus.predict_rating(&mat, Mode::Train).unwrap();
            let loss = |f: f64| (f - target) * (f - target);
            let numeric = (loss(fp) - loss(fm)) / (2.0 * h);
            let analytic = grads.flat[k];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            max_rel = max_rel.max((numeric - analytic).abs() / denom);
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ModelConfig {
            n_max: 8,
            m_max: 8,
            conv_blocks: vec![ConvBlockConfig {
                kernels: 2,
                kernel_h: 3,
                kernel_w: 3,
                pool_h: 2,
                pool_w: 2,
            }],
            dense_units: 3,
            use_batchnorm: true,
            init_seed: 0,
        };
        for seed in 0..3 {
            let err = check_gradients(&cfg, seed);
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_two_blocks_no_bn() {
        let cfg = ModelConfig {
            n_max: 10,
            m_max: 10,
            conv_blocks: vec![
                ConvBlockConfig { kernels: 2, kernel_h: 3, kernel_w: 3, pool_h: 2, pool_w: 2 },
                ConvBlockConfig { kernels: 3, kernel_h: 2, kernel_w: 2, pool_h: 1, pool_w: 1 },
            ],
            dense_units: 3,
            use_batchnorm: false,
            init_seed: 0,
        };
        for seed in 0..3 {
            let err = check_gradients(&cfg, seed);
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn commit_batch_stats_moves_running_stats() {
        let mut model = init_params(&toy_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mat = random_matrix(12, 12, &mut rng);
        let (_, trace) = model.predict_rating(&mat, Mode::Train).unwrap();
        let before = model.blocks[0].bn.as_ref().unwrap().running_mean.clone();
        model.commit_batch_stats(&trace);
        let after = &model.blocks[0].bn.as_ref().unwrap().running_mean;
        assert_ne!(&before, after);
    }
}
