//! Parameter storage and the conv / batch-norm / linear layer primitives.
//!
//! Parameters live in a flat `ParamSet`; layers hold `ParamId` handles.
//! Each tape forward copies parameter values onto the tape as bound leaves,
//! and the optimizer later pairs gradients back up through those bindings.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradTape, NodeId};
use crate::error::Result;
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One trainable tensor plus its optimizer state.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub momentum: Tensor,
    /// Weight decay applies (false for batch-norm scale/shift).
    pub decay: bool,
    /// Per-element freeze flags; frozen entries are skipped entirely by the
    /// optimizer. Used to pin the parameters of masked channels.
    pub frozen: Option<Vec<bool>>,
}

#[derive(Debug, Default, Clone)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Tensor, decay: bool) -> ParamId {
        let id = ParamId(self.params.len());
        let momentum = Tensor::zeros(value.shape());
        self.params.push(Param { value, momentum, decay, frozen: None });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_index(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Freeze the given flat element indices of a parameter.
    pub fn freeze_elements(&mut self, id: ParamId, indices: impl IntoIterator<Item = usize>) {
        let p = &mut self.params[id.0];
        let frozen = p
            .frozen
            .get_or_insert_with(|| vec![false; p.value.numel()]);
        for i in indices {
            frozen[i] = true;
        }
    }

    /// Number of elements the optimizer may still update.
    pub fn unfrozen_count(&self, id: ParamId) -> usize {
        let p = &self.params[id.0];
        match &p.frozen {
            None => p.value.numel(),
            Some(f) => f.iter().filter(|&&x| !x).count(),
        }
    }
}

/// Bias-free 2-D convolution layer.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    /// He-normal initialization over fan-in.
    pub fn new(
        params: &mut ParamSet,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f32;
        let std = (2.0 / fan_in).sqrt();
        let weight = params.add(
            Tensor::randn(&[out_channels, in_channels, kernel, kernel], std, rng),
            true,
        );
        ConvLayer { weight, out_channels, in_channels, kernel, stride, pad }
    }

    pub fn forward_tape(&self, params: &ParamSet, tape: &mut GradTape, x: NodeId) -> Result<NodeId> {
        let w = tape.leaf_bound(self.weight.index(), params.get(self.weight).value.clone());
        tape.conv2d(x, w, self.stride, self.pad)
    }

    pub fn forward_eval(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        kernels::conv2d_forward(x, &params.get(self.weight).value, self.stride, self.pad)
    }

    pub fn param_count(&self) -> u64 {
        (self.out_channels * self.in_channels * self.kernel * self.kernel) as u64
    }
}

/// Batch normalization with running statistics (owned here, not trainable).
#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

impl BnLayer {
    pub fn new(params: &mut ParamSet, channels: usize) -> Self {
        let gamma = params.add(Tensor::ones(&[channels]), false);
        let beta = params.add(Tensor::zeros(&[channels]), false);
        BnLayer {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// Tape forward. Train mode normalizes by batch statistics and refreshes
    /// the running estimates; eval mode normalizes by the running estimates.
    pub fn forward_tape(
        &mut self,
        params: &ParamSet,
        tape: &mut GradTape,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let g = tape.leaf_bound(self.gamma.index(), params.get(self.gamma).value.clone());
        let b = tape.leaf_bound(self.beta.index(), params.get(self.beta).value.clone());
        if train {
            let count = {
                let t = tape.value(x);
                let (n, _, h, w) = t.dims4();
                (n * h * w) as f32
            };
            let (id, mean, var) = tape.batch_norm_train(x, g, b, self.eps)?;
            // Running variance keeps the unbiased estimate.
            let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for c in 0..self.channels {
                self.running_mean[c] =
                    (1.0 - self.momentum) * self.running_mean[c] + self.momentum * mean[c];
                self.running_var[c] = (1.0 - self.momentum) * self.running_var[c]
                    + self.momentum * var[c] * correction;
            }
            Ok(id)
        } else {
            tape.batch_norm_eval(x, g, b, &self.running_mean, &self.running_var, self.eps)
        }
    }

    pub fn forward_eval(&self, params: &ParamSet, x: &Tensor) -> Tensor {
        kernels::batchnorm_apply(
            x,
            &self.running_mean,
            &self.running_var,
            params.get(self.gamma).value.data(),
            params.get(self.beta).value.data(),
            self.eps,
        )
    }

    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }
}

/// Fully connected layer with bias.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearLayer {
    pub fn new(params: &mut ParamSet, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / d_in as f32).sqrt();
        let weight = params.add(Tensor::randn(&[d_out, d_in], std, rng), true);
        let bias = params.add(Tensor::zeros(&[d_out]), true);
        LinearLayer { weight, bias, d_in, d_out }
    }

    pub fn forward_tape(&self, params: &ParamSet, tape: &mut GradTape, x: NodeId) -> Result<NodeId> {
        let w = tape.leaf_bound(self.weight.index(), params.get(self.weight).value.clone());
        let b = tape.leaf_bound(self.bias.index(), params.get(self.bias).value.clone());
        tape.linear(x, w, b)
    }

    pub fn forward_eval(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        kernels::linear_forward(x, &params.get(self.weight).value, &params.get(self.bias).value)
    }

    pub fn param_count(&self) -> u64 {
        (self.d_out * self.d_in + self.d_out) as u64
    }
}

/// Elementwise ReLU for the tape-free eval path.
pub fn relu_eval(mut x: Tensor) -> Tensor {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    x
}

/// Per-channel scaling for the tape-free eval path.
pub fn scale_channels_eval(mut x: Tensor, scales: &[f32]) -> Tensor {
    let (n, c, h, w) = x.dims4();
    debug_assert_eq!(scales.len(), c);
    let hw = h * w;
    for ni in 0..n {
        for ch in 0..c {
            let s = scales[ch];
            for v in &mut x.data_mut()[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                *v *= s;
            }
        }
    }
    x
}
