//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A tape records one forward pass; `backward` sweeps it once in reverse
//! topological order (nodes only ever reference earlier nodes) and
//! accumulates gradients additively, so fan-out just works. A tape is a
//! single-threaded unit of work and is spent after one backward pass.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f32>,
        var: Vec<f32>,
        eps: f32,
        train: bool,
    },
    Relu {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: NodeId,
        k: usize,
        stride: usize,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    ConcatChannels {
        parts: Vec<NodeId>,
    },
    ScaleChannels {
        input: NodeId,
        scales: Vec<f32>,
    },
    SumAll {
        input: NodeId,
    },
    Square {
        input: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f32,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Tape of executed operations with stored activations and gradients.
pub struct GradTape {
    nodes: Vec<Node>,
    bindings: Vec<(usize, NodeId)>,
    consumed: bool,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new(), bindings: Vec::new(), consumed: false }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, grad: None, op });
        id
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Leaf tied to an external parameter slot; `backward` leaves the
    /// gradient here for the optimizer to collect via `bindings`.
    pub fn leaf_bound(&mut self, key: usize, value: Tensor) -> NodeId {
        let id = self.leaf(value);
        self.bindings.push((key, id));
        id
    }

    pub fn bindings(&self) -> &[(usize, NodeId)] {
        &self.bindings
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Forward operations ──────────────────────────────────────────

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let out = kernels::conv2d_forward(self.value(input), self.value(weight), stride, pad)?;
        Ok(self.push(out, Op::Conv2d { input, weight, stride, pad }))
    }

    /// Train-mode batch norm; returns the node plus the batch statistics so
    /// the owning layer can update its running estimates.
    pub fn batch_norm_train(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<(NodeId, Vec<f32>, Vec<f32>)> {
        let c = self.value(input).extent(1);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "batch_norm: {c} channels but gamma/beta have {}/{}",
                self.value(gamma).numel(),
                self.value(beta).numel()
            )));
        }
        let (mean, var) = kernels::batch_stats(self.value(input));
        let out = kernels::batchnorm_apply(
            self.value(input),
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let id = self.push(
            out,
            Op::BatchNorm { input, gamma, beta, mean: mean.clone(), var: var.clone(), eps, train: true },
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<NodeId> {
        let c = self.value(input).extent(1);
        if self.value(gamma).numel() != c || running_mean.len() != c {
            return Err(Error::Shape(format!(
                "batch_norm: {c} channels but gamma/stats have {}/{}",
                self.value(gamma).numel(),
                running_mean.len()
            )));
        }
        let out = kernels::batchnorm_apply(
            self.value(input),
            running_mean,
            running_var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                var: running_var.to_vec(),
                eps,
                train: false,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f32> = self.value(input).data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(input).shape().to_vec();
        let t = Tensor::new(&shape, out).expect("relu shape");
        self.push(t, Op::Relu { input })
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let out = kernels::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Linear { input, weight, bias }))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> NodeId {
        let out = kernels::global_avg_pool_forward(self.value(input));
        self.push(out, Op::GlobalAvgPool { input })
    }

    pub fn max_pool(&mut self, input: NodeId, k: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let (out, argmax) = kernels::max_pool_forward(self.value(input), k, stride, pad)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn avg_pool(&mut self, input: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let out = kernels::avg_pool_forward(self.value(input), k, stride)?;
        Ok(self.push(out, Op::AvgPool { input, k, stride }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (loss, probs) = kernels::softmax_cross_entropy_forward(self.value(logits), labels)?;
        let t = Tensor::new(&[1], vec![loss])?;
        Ok(self.push(t, Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.value(lhs).shape(),
                self.value(rhs).shape()
            )));
        }
        let out: Vec<f32> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.value(lhs).shape().to_vec();
        let t = Tensor::new(&shape, out).expect("add shape");
        Ok(self.push(t, Op::Add { lhs, rhs }))
    }

    /// Concatenate NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_channels: no parts".into()));
        }
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut ctotal = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels: incompatible {:?}",
                    self.value(p).shape()
                )));
            }
            ctotal += pc;
        }
        let hw = h * w;
        let mut out = vec![0.0f32; n * ctotal * hw];
        for ni in 0..n {
            let mut coff = 0;
            for &p in parts {
                let pc = self.value(p).extent(1);
                let src = &self.value(p).data()[ni * pc * hw..(ni + 1) * pc * hw];
                out[(ni * ctotal + coff) * hw..(ni * ctotal + coff + pc) * hw].copy_from_slice(src);
                coff += pc;
            }
        }
        let t = Tensor::new(&[n, ctotal, h, w], out)?;
        Ok(self.push(t, Op::ConcatChannels { parts: parts.to_vec() }))
    }

    /// Multiply each channel by a fixed factor (0/1 factors implement masks).
    pub fn scale_channels(&mut self, input: NodeId, scales: Vec<f32>) -> Result<NodeId> {
        let (n, c, h, w) = self.value(input).dims4();
        if scales.len() != c {
            return Err(Error::Shape(format!(
                "scale_channels: {c} channels, {} scales",
                scales.len()
            )));
        }
        let hw = h * w;
        let mut out = vec![0.0f32; self.value(input).numel()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * hw;
                let s = scales[ch];
                for (o, &v) in out[base..base + hw].iter_mut().zip(&self.value(input).data()[base..base + hw]) {
                    *o = v * s;
                }
            }
        }
        let shape = self.value(input).shape().to_vec();
        let t = Tensor::new(&shape, out).expect("scale_channels shape");
        Ok(self.push(t, Op::ScaleChannels { input, scales }))
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let s: f64 = self.value(input).data().iter().map(|&v| v as f64).sum();
        let t = Tensor::new(&[1], vec![s as f32]).expect("sum shape");
        self.push(t, Op::SumAll { input })
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        let out: Vec<f32> = self.value(input).data().iter().map(|&v| v * v).collect();
        let shape = self.value(input).shape().to_vec();
        let t = Tensor::new(&shape, out).expect("square shape");
        self.push(t, Op::Square { input })
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let out: Vec<f32> = self.value(input).data().iter().map(|&v| v * factor).collect();
        let shape = self.value(input).shape().to_vec();
        let t = Tensor::new(&shape, out).expect("scale shape");
        self.push(t, Op::Scale { input, factor })
    }

    // ── Backward ────────────────────────────────────────────────────

    fn add_grad(&mut self, id: NodeId, delta: &Tensor) {
        let g = self.nodes[id.0].grad.as_mut().expect("grad allocated");
        for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
            *a += b;
        }
    }

    fn add_grad_vec(&mut self, id: NodeId, delta: &[f32]) {
        let g = self.nodes[id.0].grad.as_mut().expect("grad allocated");
        for (a, &b) in g.data_mut().iter_mut().zip(delta) {
            *a += b;
        }
    }

    /// Populate every node's gradient from a scalar loss node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "backward called twice on the same tape; re-run the forward pass first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        for node in &mut self.nodes {
            node.grad = Some(Tensor::zeros(node.value.shape()));
        }
        self.nodes[loss.0].grad.as_mut().unwrap().data_mut()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let _id = NodeId(i);
            // Skip nodes the loss never reached; their gradient stays zero.
            let gnorm_zero = self.nodes[i]
                .grad
                .as_ref()
                .map(|g| g.data().iter().all(|&v| v == 0.0))
                .unwrap_or(true);
            if gnorm_zero {
                continue;
            }
            let grad = self.nodes[i].grad.clone().unwrap();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d { input, weight, stride, pad } => {
                    let (input, weight, stride, pad) = (*input, *weight, *stride, *pad);
                    let (dx, dw) = kernels::conv2d_backward(
                        self.value(input),
                        self.value(weight),
                        stride,
                        pad,
                        &grad,
                    )?;
                    self.add_grad(input, &dx);
                    self.add_grad(weight, &dw);
                }
                Op::BatchNorm { input, gamma, beta, mean, var, eps, train } => {
                    let (input, gamma, beta, eps, train) = (*input, *gamma, *beta, *eps, *train);
                    let (mean, var) = (mean.clone(), var.clone());
                    let (dx, dgamma, dbeta) = if train {
                        kernels::batchnorm_backward_train(
                            self.value(input),
                            &mean,
                            &var,
                            self.value(gamma).data(),
                            eps,
                            &grad,
                        )
                    } else {
                        kernels::batchnorm_backward_eval(
                            self.value(input),
                            &mean,
                            &var,
                            self.value(gamma).data(),
                            eps,
                            &grad,
                        )
                    };
                    self.add_grad(input, &dx);
                    self.add_grad_vec(gamma, &dgamma);
                    self.add_grad_vec(beta, &dbeta);
                }
                Op::Relu { input } => {
                    let input = *input;
                    let dx: Vec<f32> = grad
                        .data()
                        .iter()
                        .zip(self.value(input).data())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.add_grad_vec(input, &dx);
                }
                Op::Linear { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let (dx, dw, db) =
                        kernels::linear_backward(self.value(input), self.value(weight), &grad);
                    self.add_grad(input, &dx);
                    self.add_grad(weight, &dw);
                    self.add_grad(bias, &db);
                }
                Op::GlobalAvgPool { input } => {
                    let input = *input;
                    let dx = kernels::global_avg_pool_backward(self.value(input).shape(), &grad);
                    self.add_grad(input, &dx);
                }
                Op::MaxPool { input, argmax } => {
                    let input = *input;
                    let argmax = argmax.clone();
                    let dx = kernels::max_pool_backward(self.value(input).shape(), &argmax, &grad);
                    self.add_grad(input, &dx);
                }
                Op::AvgPool { input, k, stride } => {
                    let (input, k, stride) = (*input, *k, *stride);
                    let dx = kernels::avg_pool_backward(self.value(input).shape(), k, stride, &grad);
                    self.add_grad(input, &dx);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let logits = *logits;
                    let dl = kernels::softmax_cross_entropy_backward(probs, labels, grad.scalar());
                    self.add_grad(logits, &dl);
                }
                Op::Add { lhs, rhs } => {
                    let (lhs, rhs) = (*lhs, *rhs);
                    self.add_grad(lhs, &grad);
                    self.add_grad(rhs, &grad);
                }
                Op::ConcatChannels { parts } => {
                    let parts = parts.clone();
                    let (n, ctotal, h, w) = grad.dims4();
                    let hw = h * w;
                    let mut coff = 0;
                    for p in parts {
                        let pc = self.value(p).extent(1);
                        let mut dpart = vec![0.0f32; n * pc * hw];
                        for ni in 0..n {
                            let src = &grad.data()
                                [(ni * ctotal + coff) * hw..(ni * ctotal + coff + pc) * hw];
                            dpart[ni * pc * hw..(ni + 1) * pc * hw].copy_from_slice(src);
                        }
                        self.add_grad_vec(p, &dpart);
                        coff += pc;
                    }
                }
                Op::ScaleChannels { input, scales } => {
                    let input = *input;
                    let scales = scales.clone();
                    let (n, c, h, w) = grad.dims4();
                    let hw = h * w;
                    let mut dx = vec![0.0f32; grad.numel()];
                    for ni in 0..n {
                        for ch in 0..c {
                            let base = (ni * c + ch) * hw;
                            let s = scales[ch];
                            for (d, &g) in dx[base..base + hw].iter_mut().zip(&grad.data()[base..base + hw]) {
                                *d = g * s;
                            }
                        }
                    }
                    self.add_grad_vec(input, &dx);
                }
                Op::SumAll { input } => {
                    let input = *input;
                    let g = grad.scalar();
                    let dx = vec![g; self.value(input).numel()];
                    self.add_grad_vec(input, &dx);
                }
                Op::Square { input } => {
                    let input = *input;
                    let dx: Vec<f32> = grad
                        .data()
                        .iter()
                        .zip(self.value(input).data())
                        .map(|(&g, &x)| g * 2.0 * x)
                        .collect();
                    self.add_grad_vec(input, &dx);
                }
                Op::Scale { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    let dx: Vec<f32> = grad.data().iter().map(|&g| g * factor).collect();
                    self.add_grad_vec(input, &dx);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_backward_is_all_ones() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.5]).unwrap());
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn half_sum_of_squares_backward_is_identity() {
        let vals = vec![1.0f32, -2.0, 3.0, 0.5];
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(&[4], vals.clone()).unwrap());
        let sq = tape.square(x);
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        for (g, v) in tape.grad(x).unwrap().data().iter().zip(&vals) {
            assert!((g - v).abs() < 1e-6);
        }
    }

    #[test]
    fn relu_values() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(relu(x)) + sum(x^2): dx = relu'(x) + 2x.
        let vals = vec![1.5f32, -0.5, 2.0];
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(&[3], vals.clone()).unwrap());
        let a = tape.relu(x);
        let b = tape.square(x);
        let sa = tape.sum_all(a);
        let sb = tape.sum_all(b);
        let loss = tape.add(sa, sb).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().data();
        for (i, &v) in vals.iter().enumerate() {
            let expect = if v > 0.0 { 1.0 } else { 0.0 } + 2.0 * v;
            assert!((g[i] - expect).abs() < 1e-6, "{} vs {}", g[i], expect);
        }
    }

    #[test]
    fn backward_twice_is_a_state_error() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    /// Central finite differences with respect to one tensor: the forward
    /// runs in f32, the loss reduction over the raw outputs runs in f64 to
    /// keep the difference quotient out of the f32 rounding floor.
    fn finite_diff(
        forward: &dyn Fn(&Tensor) -> Tensor,
        reduce: &dyn Fn(&[f32]) -> f64,
        x: &Tensor,
        eps: f32,
    ) -> Vec<f64> {
        let mut grads = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            let lp = reduce(forward(&plus).data());
            let lm = reduce(forward(&minus).data());
            grads.push((lp - lm) / (2.0 * eps as f64));
        }
        grads
    }

    fn sum64(v: &[f32]) -> f64 {
        v.iter().map(|&x| x as f64).sum()
    }

    fn assert_close_to_fd(analytic: &Tensor, fd: &[f64], what: &str) {
        for (i, (&a, &f)) in analytic.data().iter().zip(fd).enumerate() {
            let err = (a as f64 - f).abs() / (a as f64).abs().max(f.abs()).max(0.1);
            assert!(err < 1e-2, "{what}[{i}]: analytic {a} vs fd {f} (rel {err:.2e})");
        }
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng);
        let mut tape = GradTape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(w.clone());
        let c = tape.conv2d(xi, wi, 1, 1).unwrap();
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        let forward =
            |wt: &Tensor| crate::kernels::conv2d_forward(&x, wt, 1, 1).unwrap();
        let fd = finite_diff(&forward, &sum64, &w, 1e-3);
        assert_close_to_fd(tape.grad(wi).unwrap(), &fd, "conv dW");
    }

    #[test]
    fn batchnorm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let gamma = Tensor::randn(&[3], 0.3, &mut rng);
        let beta = Tensor::randn(&[3], 0.3, &mut rng);
        let mut tape = GradTape::new();
        let xi = tape.leaf(x.clone());
        let g = tape.leaf(gamma.clone());
        let b = tape.leaf(beta.clone());
        let (y, _, _) = tape.batch_norm_train(xi, g, b, 1e-5).unwrap();
        let sq = tape.square(y);
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        let forward = |xt: &Tensor| {
            let (mean, var) = crate::kernels::batch_stats(xt);
            crate::kernels::batchnorm_apply(xt, &mean, &var, gamma.data(), beta.data(), 1e-5)
        };
        let half_sq = |v: &[f32]| 0.5 * v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        let fd = finite_diff(&forward, &half_sq, &x, 1e-3);
        assert_close_to_fd(tape.grad(xi).unwrap(), &fd, "bn dx");
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 6], 0.5, &mut rng);
        let b = Tensor::randn(&[4], 0.5, &mut rng);
        let labels = vec![0usize, 2, 3];
        let mut tape = GradTape::new();
        let xi = tape.leaf(x.clone());
        let wi = tape.leaf(w.clone());
        let bi = tape.leaf(b.clone());
        let y = tape.linear(xi, wi, bi).unwrap();
        let loss = tape.softmax_cross_entropy(y, &labels).unwrap();
        tape.backward(loss).unwrap();
        let forward =
            |wt: &Tensor| crate::kernels::linear_forward(&x, wt, &b).unwrap();
        let ce64 = |v: &[f32]| {
            // batch-averaged cross entropy in f64 over raw logits
            let classes = 4;
            let mut total = 0.0f64;
            for (ni, &lab) in labels.iter().enumerate() {
                let row = &v[ni * classes..(ni + 1) * classes];
                let maxv = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                let denom: f64 = row.iter().map(|&l| ((l as f64) - maxv).exp()).sum();
                total -= (row[lab] as f64 - maxv) - denom.ln();
            }
            total / labels.len() as f64
        };
        let fd = finite_diff(&forward, &ce64, &w, 1e-3);
        assert_close_to_fd(tape.grad(wi).unwrap(), &fd, "linear dW");
    }

    #[test]
    fn gradients_match_value_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng));
        let w = tape.leaf(Tensor::randn(&[4, 3, 3, 3], 0.5, &mut rng));
        let c = tape.conv2d(x, w, 1, 1).unwrap();
        let r = tape.relu(c);
        let p = tape.global_avg_pool(r);
        let loss = tape.sum_all(p);
        tape.backward(loss).unwrap();
        for id in [x, w, c, r, p] {
            assert_eq!(tape.grad(id).unwrap().shape(), tape.value(id).shape());
        }
    }
}
