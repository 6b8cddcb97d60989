//! Concrete networks instantiated from descriptors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{skeleton, ArchDescriptor, Family, SkeletonItem};
use crate::autodiff::{GradTape, NodeId};
use crate::blocks::{
    copy_bn, copy_conv, copy_linear, ActivationHooks, BlockId, DenseBottleneckBlock,
    ResidualBlock, TransitionLayer,
};
use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::{relu_eval, BnLayer, ConvLayer, LinearLayer, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Whether a descriptor with `n_m < n_o` is realized with masked slots or
/// with the dead slots physically absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildMode {
    /// Allocate all `n_o` slots and mask the `n_o - n_m` highest-index ones.
    Masked,
    /// Allocate only the `n_m` live channels.
    Compacted,
}

#[derive(Debug, Clone)]
pub struct Stem {
    pub conv: ConvLayer,
    pub bn: Option<BnLayer>,
    pub pool: Option<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub enum BodyLayer {
    Residual(ResidualBlock),
    Dense(DenseBottleneckBlock),
    Transition(TransitionLayer),
}

#[derive(Debug, Clone)]
pub struct Head {
    pub final_bn: Option<BnLayer>,
    pub linear: LinearLayer,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub descriptor: ArchDescriptor,
    pub params: ParamSet,
    pub stem: Stem,
    pub body: Vec<BodyLayer>,
    pub head: Head,
}

impl Network {
    /// Instantiate a descriptor with seed-deterministic initial weights.
    pub fn build(desc: &ArchDescriptor, mode: BuildMode, seed: u64) -> Result<Network> {
        let items = skeleton(desc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut stem: Option<Stem> = None;
        let mut body = Vec::new();
        let mut head: Option<Head> = None;
        let mut final_bn: Option<BnLayer> = None;
        let mut to_mask: Vec<(usize, usize)> = Vec::new(); // (body index, slots to keep)

        for item in &items {
            match *item {
                SkeletonItem::StemConv { c_in, c_out, k, stride, pad, bn } => {
                    let conv = ConvLayer::new(&mut params, c_in, c_out, k, stride, pad, &mut rng);
                    let bn = bn.then(|| BnLayer::new(&mut params, c_out));
                    stem = Some(Stem { conv, bn, pool: None });
                }
                SkeletonItem::MaxPool { k, stride, pad } => {
                    if let Some(s) = stem.as_mut() {
                        s.pool = Some((k, stride, pad));
                    }
                }
                SkeletonItem::Block { entry, out_width } => {
                    let slots = match mode {
                        BuildMode::Masked => entry.n_o,
                        BuildMode::Compacted => entry.n_m,
                    };
                    let id = BlockId(entry.block);
                    let layer = match desc.family {
                        Family::Wrn | Family::ResNet => BodyLayer::Residual(ResidualBlock::new(
                            &mut params,
                            id,
                            entry.n_i,
                            slots,
                            out_width,
                            entry.stride,
                            &mut rng,
                        )),
                        Family::DenseNetBc => BodyLayer::Dense(DenseBottleneckBlock::new(
                            &mut params,
                            id,
                            entry.n_i,
                            slots,
                            out_width,
                            &mut rng,
                        )),
                    };
                    if mode == BuildMode::Masked && entry.n_m < entry.n_o {
                        to_mask.push((body.len(), entry.n_m));
                    }
                    body.push(layer);
                }
                SkeletonItem::Transition { c_in, c_out } => {
                    body.push(BodyLayer::Transition(TransitionLayer::new(
                        &mut params,
                        c_in,
                        c_out,
                        &mut rng,
                    )));
                }
                SkeletonItem::FinalBn { channels } => {
                    final_bn = Some(BnLayer::new(&mut params, channels));
                }
                SkeletonItem::Classifier { d_in } => {
                    let linear = LinearLayer::new(&mut params, d_in, desc.classes, &mut rng);
                    head = Some(Head { final_bn: final_bn.take(), linear });
                }
            }
        }

        let mut descriptor = desc.clone();
        if mode == BuildMode::Compacted {
            for e in descriptor.profile.iter_mut() {
                e.n_o = e.n_m;
            }
        }
        let mut net = Network {
            descriptor,
            params,
            stem: stem.ok_or_else(|| Error::Config("descriptor produced no stem".into()))?,
            body,
            head: head.ok_or_else(|| Error::Config("descriptor produced no classifier".into()))?,
        };
        // Masked build keeps the lowest-index channels live.
        for (bi, keep) in to_mask {
            let slots = match &net.body[bi] {
                BodyLayer::Residual(b) => b.mask.slots(),
                BodyLayer::Dense(b) => b.mask.slots(),
                BodyLayer::Transition(_) => unreachable!(),
            };
            for ch in keep..slots {
                match &mut net.body[bi] {
                    BodyLayer::Residual(b) => b.apply_mask(&mut net.params, ch)?,
                    BodyLayer::Dense(b) => b.apply_mask(&mut net.params, ch)?,
                    BodyLayer::Transition(_) => unreachable!(),
                }
            }
        }
        Ok(net)
    }

    /// Forward through the tape. `train` selects batch-norm mode; `hooks`
    /// captures every block's prunable activation for saliency.
    pub fn forward_tape(
        &mut self,
        tape: &mut GradTape,
        input: Tensor,
        train: bool,
        mut hooks: Option<&mut ActivationHooks>,
    ) -> Result<NodeId> {
        let mut x = tape.leaf(input);
        x = self.stem.conv.forward_tape(&self.params, tape, x)?;
        if let Some(bn) = self.stem.bn.as_mut() {
            x = bn.forward_tape(&self.params, tape, x, train)?;
            x = tape.relu(x);
        }
        if let Some((k, s, p)) = self.stem.pool {
            x = tape.max_pool(x, k, s, p)?;
        }
        for layer in self.body.iter_mut() {
            x = match layer {
                BodyLayer::Residual(b) => {
                    b.forward_tape(&self.params, tape, x, train, hooks.as_deref_mut())?
                }
                BodyLayer::Dense(b) => {
                    b.forward_tape(&self.params, tape, x, train, hooks.as_deref_mut())?
                }
                BodyLayer::Transition(t) => t.forward_tape(&self.params, tape, x, train)?,
            };
        }
        if let Some(bn) = self.head.final_bn.as_mut() {
            x = bn.forward_tape(&self.params, tape, x, train)?;
            x = tape.relu(x);
        }
        x = tape.global_avg_pool(x);
        self.head.linear.forward_tape(&self.params, tape, x)
    }

    /// Tape-free eval-mode forward returning logits.
    pub fn forward_eval(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = self.stem.conv.forward_eval(&self.params, input)?;
        if let Some(bn) = &self.stem.bn {
            x = relu_eval(bn.forward_eval(&self.params, &x));
        }
        if let Some((k, s, p)) = self.stem.pool {
            x = kernels::max_pool_forward(&x, k, s, p)?.0;
        }
        for layer in &self.body {
            x = match layer {
                BodyLayer::Residual(b) => b.forward_eval(&self.params, &x)?,
                BodyLayer::Dense(b) => b.forward_eval(&self.params, &x)?,
                BodyLayer::Transition(t) => t.forward_eval(&self.params, &x)?,
            };
        }
        if let Some(bn) = &self.head.final_bn {
            x = relu_eval(bn.forward_eval(&self.params, &x));
        }
        let pooled = kernels::global_avg_pool_forward(&x);
        self.head.linear.forward_eval(&self.params, &pooled)
    }

    /// Maskable blocks in id order as (slot count, active count).
    pub fn mask_summary(&self) -> Vec<(usize, usize)> {
        self.maskable().map(|(_, m)| (m.slots(), m.active_count())).collect()
    }

    fn maskable(&self) -> impl Iterator<Item = (BlockId, &crate::blocks::ChannelMask)> {
        self.body.iter().filter_map(|l| match l {
            BodyLayer::Residual(b) => Some((b.id, &b.mask)),
            BodyLayer::Dense(b) => Some((b.id, &b.mask)),
            BodyLayer::Transition(_) => None,
        })
    }

    pub fn block_count(&self) -> usize {
        self.maskable().count()
    }

    /// Mask state of every maskable block.
    pub fn masks(&self) -> Vec<crate::blocks::ChannelMask> {
        self.maskable().map(|(_, m)| m.clone()).collect()
    }

    /// Channels currently prunable: live channels of blocks above the
    /// one-channel floor.
    pub fn prunable_channels(&self) -> Vec<(BlockId, usize)> {
        let mut out = Vec::new();
        for (id, mask) in self.maskable() {
            if mask.active_count() <= 1 {
                continue;
            }
            for c in mask.active_indices() {
                out.push((id, c));
            }
        }
        out
    }

    /// All live channels, including those in blocks at the floor.
    pub fn active_channels(&self) -> Vec<(BlockId, usize)> {
        let mut out = Vec::new();
        for (id, mask) in self.maskable() {
            for c in mask.active_indices() {
                out.push((id, c));
            }
        }
        out
    }

    /// Mask one intermediate channel, keeping the descriptor in sync.
    pub fn apply_mask(&mut self, block: BlockId, channel: usize) -> Result<()> {
        let params = &mut self.params;
        let mut found = false;
        for layer in self.body.iter_mut() {
            match layer {
                BodyLayer::Residual(b) if b.id == block => {
                    b.apply_mask(params, channel)?;
                    found = true;
                }
                BodyLayer::Dense(b) if b.id == block => {
                    b.apply_mask(params, channel)?;
                    found = true;
                }
                _ => {}
            }
            if found {
                break;
            }
        }
        if !found {
            return Err(Error::Integrity(format!("no maskable block with id {}", block.0)));
        }
        let actives = self.mask_summary();
        for (entry, (_, active)) in self.descriptor.profile.iter_mut().zip(actives) {
            entry.n_m = active;
        }
        Ok(())
    }

    /// The weight producing each block's prunable channels (first conv).
    pub fn block_conv1(&self, block: BlockId) -> Option<(ParamId, &crate::blocks::ChannelMask)> {
        self.body.iter().find_map(|l| match l {
            BodyLayer::Residual(b) if b.id == block => Some((b.conv1.weight, &b.mask)),
            BodyLayer::Dense(b) if b.id == block => Some((b.conv1.weight, &b.mask)),
            _ => None,
        })
    }

    /// Blocks in id order with their first-conv weight ids.
    pub fn conv1_weights(&self) -> Vec<(BlockId, ParamId)> {
        self.body
            .iter()
            .filter_map(|l| match l {
                BodyLayer::Residual(b) => Some((b.id, b.conv1.weight)),
                BodyLayer::Dense(b) => Some((b.id, b.conv1.weight)),
                BodyLayer::Transition(_) => None,
            })
            .collect()
    }

    /// Parameters currently in effect (masked channels excluded).
    pub fn active_param_count(&self) -> u64 {
        let mut total = self.stem.conv.param_count();
        if let Some(bn) = &self.stem.bn {
            total += bn.param_count();
        }
        for layer in &self.body {
            total += match layer {
                BodyLayer::Residual(b) => b.active_param_count(),
                BodyLayer::Dense(b) => b.active_param_count(),
                BodyLayer::Transition(t) => t.bn.param_count() + t.conv.param_count(),
            };
        }
        if let Some(bn) = &self.head.final_bn {
            total += bn.param_count();
        }
        total + self.head.linear.param_count()
    }

    /// Physically delete every masked channel. The new network's descriptor
    /// has `n_o == n_m` everywhere and forwards identically.
    pub fn compact(&self) -> Network {
        let mut params = ParamSet::new();
        let stem = Stem {
            conv: copy_conv(&self.params, &mut params, &self.stem.conv),
            bn: self.stem.bn.as_ref().map(|b| copy_bn(&self.params, &mut params, b)),
            pool: self.stem.pool,
        };
        let body = self
            .body
            .iter()
            .map(|l| match l {
                BodyLayer::Residual(b) => BodyLayer::Residual(b.compact(&self.params, &mut params)),
                BodyLayer::Dense(b) => BodyLayer::Dense(b.compact(&self.params, &mut params)),
                BodyLayer::Transition(t) => BodyLayer::Transition(TransitionLayer {
                    bn: copy_bn(&self.params, &mut params, &t.bn),
                    conv: copy_conv(&self.params, &mut params, &t.conv),
                }),
            })
            .collect();
        let head = Head {
            final_bn: self.head.final_bn.as_ref().map(|b| copy_bn(&self.params, &mut params, b)),
            linear: copy_linear(&self.params, &mut params, &self.head.linear),
        };
        let mut descriptor = self.descriptor.clone();
        for e in descriptor.profile.iter_mut() {
            e.n_o = e.n_m;
        }
        Network { descriptor, params, stem, body, head }
    }

    /// All batch-norm layers in allocation order (for checkpointing).
    pub fn bn_layers(&self) -> Vec<&BnLayer> {
        let mut out = Vec::new();
        if let Some(bn) = &self.stem.bn {
            out.push(bn);
        }
        for layer in &self.body {
            match layer {
                BodyLayer::Residual(b) => {
                    out.push(&b.bn_mid);
                    out.push(&b.bn_out);
                }
                BodyLayer::Dense(b) => {
                    out.push(&b.bn_in);
                    out.push(&b.bn_mid);
                }
                BodyLayer::Transition(t) => out.push(&t.bn),
            }
        }
        if let Some(bn) = &self.head.final_bn {
            out.push(bn);
        }
        out
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BnLayer> {
        let mut out = Vec::new();
        if let Some(bn) = self.stem.bn.as_mut() {
            out.push(bn);
        }
        for layer in self.body.iter_mut() {
            match layer {
                BodyLayer::Residual(b) => {
                    out.push(&mut b.bn_mid);
                    out.push(&mut b.bn_out);
                }
                BodyLayer::Dense(b) => {
                    out.push(&mut b.bn_in);
                    out.push(&mut b.bn_mid);
                }
                BodyLayer::Transition(t) => out.push(&mut t.bn),
            }
        }
        if let Some(bn) = self.head.final_bn.as_mut() {
            out.push(bn);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{extract_profile, make_densenet_bc, make_resnet, make_wrn};

    #[test]
    fn descriptor_network_profile_roundtrip_is_identity() {
        for desc in [
            make_wrn(10, 1.0, 1.0).unwrap(),
            make_wrn(16, 2.0, 0.5).unwrap(),
            make_densenet_bc(10, 6, 0.5).unwrap(),
        ] {
            let net = Network::build(&desc, BuildMode::Masked, 1).unwrap();
            let profile = extract_profile(&net);
            for (e, s) in desc.profile.iter().zip(&profile.entries) {
                assert_eq!((e.n_m, e.n_o), (s.n_m, s.n_o), "{}", desc.name());
            }
        }
    }

    #[test]
    fn masked_and_compacted_builds_agree_on_active_params() {
        let desc = make_wrn(16, 1.0, 0.5).unwrap();
        let masked = Network::build(&desc, BuildMode::Masked, 3).unwrap();
        let compacted = Network::build(&desc, BuildMode::Compacted, 3).unwrap();
        assert_eq!(masked.active_param_count(), compacted.active_param_count());
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let net = Network::build(&desc, BuildMode::Masked, 7).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng);
        let a = net.forward_eval(&x).unwrap();
        let b = net.forward_eval(&x).unwrap();
        assert_eq!(a.shape(), &[2, 10]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn same_seed_same_weights() {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let a = Network::build(&desc, BuildMode::Masked, 42).unwrap();
        let b = Network::build(&desc, BuildMode::Masked, 42).unwrap();
        for i in 0..a.params.len() {
            assert_eq!(a.params.by_index(i).value.data(), b.params.by_index(i).value.data());
        }
        let c = Network::build(&desc, BuildMode::Masked, 43).unwrap();
        assert_ne!(
            a.params.by_index(0).value.data(),
            c.params.by_index(0).value.data()
        );
    }

    #[test]
    fn densenet_forward_runs() {
        let desc = make_densenet_bc(10, 4, 0.5).unwrap();
        let net = Network::build(&desc, BuildMode::Masked, 5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng);
        let y = net.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
    }

    #[test]
    fn resnet_stem_depends_on_resolution() {
        let big = make_resnet(18, 1000, 224).unwrap();
        let net = Network::build(&big, BuildMode::Masked, 1).unwrap();
        assert!(net.stem.pool.is_some());
        assert_eq!(net.stem.conv.kernel, 7);
        let small = make_resnet(18, 10, 32).unwrap();
        let net = Network::build(&small, BuildMode::Masked, 1).unwrap();
        assert!(net.stem.pool.is_none());
        assert_eq!(net.stem.conv.kernel, 3);
    }

    #[test]
    fn network_compact_matches_masked_forward() {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let mut net = Network::build(&desc, BuildMode::Masked, 9).unwrap();
        net.apply_mask(BlockId(0), 3).unwrap();
        net.apply_mask(BlockId(0), 7).unwrap();
        net.apply_mask(BlockId(2), 0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 32, 32], 1.0, &mut rng);
        let masked = net.forward_eval(&x).unwrap();
        let compacted = net.compact();
        let out = compacted.forward_eval(&x).unwrap();
        for (a, b) in masked.data().iter().zip(out.data()) {
            assert!(crate::tensor::rel_err(*a, *b, 1e-3) <= 1e-5, "{a} vs {b}");
        }
        assert_eq!(net.active_param_count(), compacted.active_param_count());
        // pruned channel totals carried into the descriptor
        let profile = extract_profile(&net);
        assert_eq!(profile.total_pruned(), 3);
    }
}
