use alloc::format;
use alloc::vec::Vec;

use crate::qlinear::{self, LayerConfig, LayerContext};
use crate::rng::{streams, CounterRng};
use crate::{Error, Matrix, Result};

/// Bias-free MLP: `relu(... relu(x W_1^T) ...) W_L^T`. Weights are `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub weights: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub contexts: Vec<LayerContext>,
    /// Pre-activation output of every layer; the last one is the model output.
    pub outputs: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("model has at least one layer")
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    /// `inputs[k]` is the gradient w.r.t. the input of layer `L - 1 - k`,
    /// i.e. after backpropagating through `k + 1` layers.
    pub inputs: Vec<Matrix>,
}

impl Model {
    /// He-initialized model with layer widths `dims` (`dims[0]` = input).
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig("need at least two widths".into()));
        }
        if let Some(d) = dims.iter().find(|&&d| d == 0 || d % 32 != 0) {
            return Err(Error::InvalidConfig(format!("width {d} is not a positive multiple of 32")));
        }
        let rng = CounterRng::new(seed);
        let weights = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = libm::sqrt(2.0 / fan_in as f64);
                let mut s = rng.stream(streams::INIT, l as u64);
                Matrix::from_fn(fan_out, fan_in, |_, _| std * s.next_gaussian())
            })
            .collect();
        Ok(Self { weights })
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map(|w| w.rows()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
    }

    /// Per-layer configs with forward SR seeds derived from `seed`.
    fn layer_cfg(cfg: &LayerConfig, seed: u64, layer: usize) -> LayerConfig {
        let mut c = *cfg;
        c.forward = c
            .forward
            .map(|s| s.reseeded(CounterRng::new(seed).derive(&[layer as u64, 0]).seed()));
        c
    }

    pub fn forward(&self, x: &Matrix, cfg: &LayerConfig, seed: u64) -> Result<ForwardTrace> {
        let mut contexts = Vec::with_capacity(self.depth());
        let mut outputs = Vec::with_capacity(self.depth());
        let mut h = x.clone();
        for (l, w) in self.weights.iter().enumerate() {
            let (y, ctx) = qlinear::forward(&h, w, &Self::layer_cfg(cfg, seed, l))?;
            if l + 1 < self.depth() {
                h = y.map(|v| v.max(0.0));
            }
            contexts.push(ctx);
            outputs.push(y);
        }
        Ok(ForwardTrace { contexts, outputs })
    }

    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_out: &Matrix,
        cfg: &LayerConfig,
        seed: u64,
    ) -> Result<Gradients> {
        let depth = self.depth();
        let rng = CounterRng::new(seed);
        let mut weights = alloc::vec![Matrix::zeros(0, 0); depth];
        let mut inputs = Vec::with_capacity(depth);
        let mut dy = grad_out.clone();
        for l in (0..depth).rev() {
            let layer_seed = rng.derive(&[l as u64, 1]).seed();
            let (dx, dw) = qlinear::backward(&dy, &trace.contexts[l], &Self::layer_cfg(cfg, seed, l), layer_seed)?;
            weights[l] = dw;
            if l > 0 {
                let pre = &trace.outputs[l - 1];
                dy = Matrix::from_fn(dx.rows(), dx.cols(), |i, j| {
                    if pre.get(i, j) > 0.0 {
                        dx.get(i, j)
                    } else {
                        0.0
                    }
                });
            }
            inputs.push(dx);
        }
        Ok(Gradients { weights, inputs })
    }
}
