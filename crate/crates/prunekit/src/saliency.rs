//! Channel saliency: l1-norm of filters and Fisher estimates of the loss
//! change on channel removal, plus the global ranking used by the pruner.

use std::collections::BTreeMap;

use crate::blocks::BlockId;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One pruning candidate: the estimated loss change if this channel goes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaliencyRecord {
    pub block: BlockId,
    pub channel: usize,
    pub delta: f64,
}

/// Per output channel, the sum of absolute filter weights.
pub fn l1_saliency(weight: &Tensor) -> Result<Vec<f64>> {
    if weight.rank() != 4 {
        return Err(Error::Shape(format!(
            "l1_saliency expects a 4-D weight, got {:?}",
            weight.shape()
        )));
    }
    let (co, ci, kh, kw) = weight.dims4();
    let fsz = ci * kh * kw;
    Ok((0..co)
        .map(|c| {
            weight.data()[c * fsz..(c + 1) * fsz]
                .iter()
                .map(|&v| v.abs() as f64)
                .sum()
        })
        .collect())
}

/// Accumulates, per (block, channel), the squared spatial inner products of
/// activations with their gradients across every example seen since the
/// last reset.
#[derive(Debug, Default, Clone)]
pub struct FisherAccumulator {
    sums: BTreeMap<BlockId, Vec<f64>>,
    examples: BTreeMap<BlockId, u64>,
}

impl FisherAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold in one minibatch of activations and gradients for a block.
    /// Shapes must agree; the batch axis contributes one squared term per
    /// example and the example count rises by the batch size.
    pub fn update(&mut self, block: BlockId, activation: &Tensor, gradient: &Tensor) -> Result<()> {
        if activation.shape() != gradient.shape() {
            return Err(Error::Shape(format!(
                "fisher update: activation {:?} vs gradient {:?}",
                activation.shape(),
                gradient.shape()
            )));
        }
        let (n, c, h, w) = activation.dims4();
        let hw = h * w;
        let sums = self.sums.entry(block).or_insert_with(|| vec![0.0; c]);
        if sums.len() != c {
            return Err(Error::Shape(format!(
                "fisher update: block {} has {} channels, saw {c}",
                block.0,
                sums.len()
            )));
        }
        for ch in 0..c {
            let mut acc = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ch) * hw;
                let mut inner = 0.0f64;
                for (a, g) in activation.data()[base..base + hw]
                    .iter()
                    .zip(&gradient.data()[base..base + hw])
                {
                    inner += (*a as f64) * (*g as f64);
                }
                acc += inner * inner;
            }
            sums[ch] += acc;
        }
        *self.examples.entry(block).or_insert(0) += n as u64;
        Ok(())
    }

    /// Delta_c = accumulated sum / (2 * examples seen). The accumulator is
    /// left intact; call `reset` to start a new window.
    pub fn finalize(&self) -> Result<Vec<SaliencyRecord>> {
        if self.examples.values().all(|&n| n == 0) || self.sums.is_empty() {
            return Err(Error::State("fisher finalize on an empty accumulator".into()));
        }
        let mut records = Vec::new();
        for (&block, sums) in &self.sums {
            let n = *self.examples.get(&block).unwrap_or(&0);
            if n == 0 {
                return Err(Error::State(format!(
                    "fisher finalize: block {} has sums but no examples",
                    block.0
                )));
            }
            for (channel, &s) in sums.iter().enumerate() {
                records.push(SaliencyRecord { block, channel, delta: s / (2.0 * n as f64) });
            }
        }
        Ok(records)
    }

    pub fn reset(&mut self) {
        self.sums.clear();
        self.examples.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }
}

/// Total order over the prunable channels, ascending by saliency with ties
/// broken by (block, channel). `active` lists the channels that must be
/// covered — live channels in blocks above the one-channel floor.
pub fn rank_channels(
    records: &[SaliencyRecord],
    active: &[(BlockId, usize)],
) -> Result<Vec<SaliencyRecord>> {
    let mut by_key: BTreeMap<(BlockId, usize), f64> = BTreeMap::new();
    for r in records {
        if !r.delta.is_finite() || r.delta < 0.0 {
            return Err(Error::Numeric(format!(
                "saliency for block {} channel {} is {}",
                r.block.0, r.channel, r.delta
            )));
        }
        by_key.insert((r.block, r.channel), r.delta);
    }
    let mut ranked = Vec::with_capacity(active.len());
    for &(block, channel) in active {
        match by_key.get(&(block, channel)) {
            Some(&delta) => ranked.push(SaliencyRecord { block, channel, delta }),
            None => {
                return Err(Error::Integrity(format!(
                    "no saliency record for active channel {} of block {}",
                    channel, block.0
                )))
            }
        }
    }
    ranked.sort_by(|a, b| {
        a.delta
            .partial_cmp(&b.delta)
            .unwrap()
            .then(a.block.cmp(&b.block))
            .then(a.channel.cmp(&b.channel))
    });
    Ok(ranked)
}
