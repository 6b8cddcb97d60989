//! From-scratch and fine-tune training: SGD with momentum and weight decay,
//! stepped learning-rate schedules, and deterministic evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::GradTape;
use crate::blocks::ActivationHooks;
use crate::data::{DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::net::Network;
use crate::saliency::FisherAccumulator;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: bool,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    /// Desk-scale recipe: 30 epochs at LR 0.1 stepped by 0.2 at 15 and 23,
    /// momentum 0.9, weight decay 5e-4.
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 64,
            lr: 0.1,
            milestones: vec![15, 23],
            decay_factor: 0.2,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            augment: true,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.decay_factor <= 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("training rates must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly increasing".into()));
        }
        Ok(())
    }

    /// LR at epoch e: base * factor^(number of milestones <= e).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.decay_factor.powi(hits as i32)
    }

    /// The smallest LR the schedule ever reaches (the fine-tune default).
    pub fn final_lr(&self) -> f64 {
        self.lr * self.decay_factor.powi(self.milestones.len() as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_error_percent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,test_error_percent\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{:.6},{:.4}\n",
                e.epoch, e.lr, e.train_loss, e.test_error_percent
            ));
        }
        out
    }

    pub fn final_error(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_error_percent)
    }
}

/// One SGD step over every parameter bound on the tape:
/// buffer <- momentum * buffer + grad + wd * w; w <- w - lr * buffer.
/// Frozen elements (masked channels) are skipped entirely, and weight
/// decay never touches batch-norm parameters.
pub fn sgd_step(
    params: &mut ParamSet,
    tape: &GradTape,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for &(key, node) in tape.bindings() {
        let grad = tape
            .grad(node)
            .ok_or_else(|| Error::State("sgd_step before backward".into()))?;
        let param = params.by_index_mut(key);
        let wd = if param.decay { weight_decay as f32 } else { 0.0 };
        let (lr, mu) = (lr as f32, momentum as f32);
        match param.frozen.clone() {
            None => {
                for ((w, m), &g) in param
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(param.momentum.data_mut())
                    .zip(grad.data())
                {
                    *m = mu * *m + g + wd * *w;
                    *w -= lr * *m;
                }
            }
            Some(frozen) => {
                for (((w, m), &g), &skip) in param
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(param.momentum.data_mut())
                    .zip(grad.data())
                    .zip(&frozen)
                {
                    if skip {
                        continue;
                    }
                    *m = mu * *m + g + wd * *w;
                    *w -= lr * *m;
                }
            }
        }
    }
    Ok(())
}

/// Forward/backward/update on one minibatch. When a Fisher accumulator is
/// supplied, the per-block prunable activations and their gradients are
/// folded into it after the backward pass. Returns the minibatch loss.
pub fn train_minibatch(
    network: &mut Network,
    images: Tensor,
    labels: &[usize],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    fisher: Option<&mut FisherAccumulator>,
) -> Result<f32> {
    let mut tape = GradTape::new();
    let mut hooks = ActivationHooks::new();
    let want_hooks = fisher.is_some();
    let logits = network.forward_tape(
        &mut tape,
        images,
        true,
        if want_hooks { Some(&mut hooks) } else { None },
    )?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_val = tape.value(loss).scalar();
    if !loss_val.is_finite() {
        return Err(Error::Numeric(format!(
            "training loss diverged to {loss_val}"
        )));
    }
    tape.backward(loss)?;
    if let Some(acc) = fisher {
        for &(block, node) in hooks.entries() {
            let grad = tape
                .grad(node)
                .ok_or_else(|| Error::State("hook node has no gradient".into()))?;
            acc.update(block, tape.value(node), grad)?;
        }
    }
    sgd_step(&mut network.params, &tape, lr, momentum, weight_decay)?;
    Ok(loss_val)
}

/// Full from-scratch training with the stepped schedule and augmentation.
pub fn train(network: &mut Network, config: &TrainConfig, data: &DatasetHandle) -> Result<TrainLog> {
    config.validate()?;
    let n = data.len(Split::Train);
    if n == 0 {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut log = TrainLog::default();
    for epoch in 0..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9)),
        );
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch) {
            let (images, labels) = if config.augment {
                data.augmented_batch(chunk, &mut rng)
            } else {
                data.batch(Split::Train, chunk)
            };
            let loss = train_minibatch(
                network,
                images,
                &labels,
                lr,
                config.momentum,
                config.weight_decay,
                None,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "epoch {epoch}, batch {batches}: {msg} (lr={lr})"
                )),
                other => other,
            })?;
            loss_sum += loss as f64;
            batches += 1;
        }
        let test_error = evaluate(network, data, Split::Test)?;
        log.epochs.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            test_error_percent: test_error,
        });
    }
    Ok(log)
}

/// Correct-prediction count over an index range of a split.
pub fn evaluate_range(
    network: &Network,
    data: &DatasetHandle,
    split: Split,
    start: usize,
    end: usize,
) -> Result<(u64, u64)> {
    let mut correct = 0u64;
    let mut total = 0u64;
    let indices: Vec<usize> = (start..end).collect();
    for chunk in indices.chunks(128) {
        let (images, labels) = data.batch(split, chunk);
        let logits = network.forward_eval(&images)?;
        let classes = logits.extent(1);
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * classes..(i + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(c, _)| c)
                .unwrap();
            if pred == label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok((correct, total))
}

/// Eval-mode error percent over a whole split: 100 * (1 - correct/total).
pub fn evaluate(network: &Network, data: &DatasetHandle, split: Split) -> Result<f64> {
    let (correct, total) = evaluate_range(network, data, split, 0, data.len(split))?;
    if total == 0 {
        return Err(Error::Config("evaluation split is empty".into()));
    }
    Ok(100.0 * (1.0 - correct as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::make_wrn;
    use crate::data::make_synthetic;
    use crate::net::{BuildMode, Network};

    #[test]
    fn lr_schedule_arithmetic() {
        let cfg = TrainConfig { lr: 0.1, milestones: vec![15, 23], decay_factor: 0.2, ..TrainConfig::default() };
        assert!((cfg.lr_at_epoch(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at_epoch(14) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at_epoch(15) - 0.02).abs() < 1e-12);
        assert!((cfg.lr_at_epoch(23) - 0.004).abs() < 1e-12);
        assert!((cfg.final_lr() - 0.004).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        cfg.milestones = vec![5, 5];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.batch = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_lr_leaves_weights_unchanged() {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let mut net = Network::build(&desc, BuildMode::Masked, 5).unwrap();
        let before: Vec<Vec<f32>> = (0..net.params.len())
            .map(|i| net.params.by_index(i).value.data().to_vec())
            .collect();
        let data = make_synthetic(10, 8, 32, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch: 16,
            lr: 0.0,
            milestones: vec![],
            weight_decay: 0.0,
            momentum: 0.9,
            augment: false,
            ..TrainConfig::default()
        };
        train(&mut net, &cfg, &data).unwrap();
        for i in 0..net.params.len() {
            assert_eq!(before[i], net.params.by_index(i).value.data(), "param {i}");
        }
    }

    #[test]
    fn weight_decay_skips_batchnorm_params() {
        // zero gradients: only decay moves anything
        let mut params = ParamSet::new();
        let w = params.add(Tensor::full(&[4], 1.0), true);
        let g = params.add(Tensor::full(&[4], 1.0), false);
        let mut tape = GradTape::new();
        let wn = tape.leaf_bound(w.index(), params.get(w).value.clone());
        let gn = tape.leaf_bound(g.index(), params.get(g).value.clone());
        let z = tape.add(wn, gn).unwrap();
        let zz = tape.scale(z, 0.0);
        let loss = tape.sum_all(zz);
        tape.backward(loss).unwrap();
        sgd_step(&mut params, &tape, 0.1, 0.0, 0.5).unwrap();
        // decaying param moved: w -= lr * wd * w = 1 - 0.05
        for &v in params.get(w).value.data() {
            assert!((v - 0.95).abs() < 1e-6);
        }
        // bn-style param untouched
        for &v in params.get(g).value.data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn single_sample_overfit() {
        // a tiny net drives the loss near zero on one example
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let mut net = Network::build(&desc, BuildMode::Masked, 3).unwrap();
        let data = make_synthetic(10, 2, 16, 9).unwrap();
        let (images, labels) = data.batch(Split::Train, &[0]);
        let mut last = f32::MAX;
        for step in 0..500 {
            last = train_minibatch(&mut net, images.clone(), &labels, 0.05, 0.9, 0.0, None).unwrap();
            if last < 0.01 {
                break;
            }
            assert!(last.is_finite(), "diverged at step {step}");
        }
        assert!(last < 0.01, "loss stuck at {last}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let data = make_synthetic(10, 10, 16, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 25,
            lr: 0.05,
            milestones: vec![1],
            seed: 11,
            ..TrainConfig::default()
        };
        let mut a = Network::build(&desc, BuildMode::Masked, 11).unwrap();
        let log_a = train(&mut a, &cfg, &data).unwrap();
        let mut b = Network::build(&desc, BuildMode::Masked, 11).unwrap();
        let log_b = train(&mut b, &cfg, &data).unwrap();
        assert_eq!(log_a, log_b);
        for i in 0..a.params.len() {
            assert_eq!(a.params.by_index(i).value.data(), b.params.by_index(i).value.data());
        }
    }

    #[test]
    fn constant_predictor_error_is_90_percent() {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let mut net = Network::build(&desc, BuildMode::Masked, 2).unwrap();
        // zero classifier weight, bias all zero except class 3: always 3
        let head_w = net.head.linear.weight;
        let head_b = net.head.linear.bias;
        net.params.get_mut(head_w).value.data_mut().fill(0.0);
        let b = net.params.get_mut(head_b);
        b.value.data_mut().fill(0.0);
        b.value.data_mut()[3] = 1.0;
        let data = make_synthetic(10, 10, 16, 6).unwrap();
        let err = evaluate(&net, &data, Split::Test).unwrap();
        assert!((err - 90.0).abs() < 1e-9, "{err}");
    }

    #[test]
    fn sharded_evaluation_merges_exactly() {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let net = Network::build(&desc, BuildMode::Masked, 8).unwrap();
        let data = make_synthetic(10, 10, 16, 5).unwrap();
        let nt = data.len(Split::Test);
        let (c, t) = evaluate_range(&net, &data, Split::Test, 0, nt).unwrap();
        let (c1, t1) = evaluate_range(&net, &data, Split::Test, 0, nt / 2).unwrap();
        let (c2, t2) = evaluate_range(&net, &data, Split::Test, nt / 2, nt).unwrap();
        assert_eq!(c, c1 + c2);
        assert_eq!(t, t1 + t2);
    }
}
