//! Maskable residual and DenseNet bottleneck blocks.
//!
//! Both block kinds expose the same prune surface: the activation between
//! their two convolutions. Masking a channel zeroes it in place; compaction
//! physically deletes the dead filters, the dead batch-norm parameters, and
//! the dead input columns of the second convolution.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradTape, NodeId};
use crate::error::{Error, Result};
use crate::layers::{relu_eval, scale_channels_eval, BnLayer, ConvLayer, LinearLayer, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId(pub usize);

/// Capture registry for the prunable activations seen during one forward
/// pass. After `backward`, each entry's node holds both the activation and
/// its gradient, which is exactly what Fisher saliency consumes.
#[derive(Debug, Default)]
pub struct ActivationHooks {
    entries: Vec<(BlockId, NodeId)>,
}

impl ActivationHooks {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, block: BlockId, node: NodeId) {
        self.entries.push((block, node));
    }

    pub fn entries(&self) -> &[(BlockId, NodeId)] {
        &self.entries
    }
}

/// Which intermediate channels of a block are still present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask {
    pub block: BlockId,
    active: Vec<bool>,
}

impl ChannelMask {
    pub fn all_on(block: BlockId, slots: usize) -> Self {
        assert!(slots >= 1, "a mask needs at least one slot");
        ChannelMask { block, active: vec![true; slots] }
    }

    pub fn slots(&self) -> usize {
        self.active.len()
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    pub fn is_active(&self, channel: usize) -> bool {
        self.active[channel]
    }

    pub fn all_active(&self) -> bool {
        self.active.iter().all(|&a| a)
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&c| self.active[c]).collect()
    }

    /// 1.0 for live channels, 0.0 for masked ones.
    pub fn scales(&self) -> Vec<f32> {
        self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }

    /// Turn a channel off. Refuses to kill an already-dead channel or the
    /// last live one (a zero-channel block would change the topology).
    pub fn deactivate(&mut self, channel: usize) -> Result<()> {
        if channel >= self.active.len() {
            return Err(Error::Shape(format!(
                "channel {channel} out of range for {} slots",
                self.active.len()
            )));
        }
        if !self.active[channel] {
            return Err(Error::State(format!(
                "channel {channel} of block {} is already pruned",
                self.block.0
            )));
        }
        if self.active_count() == 1 {
            return Err(Error::State(format!(
                "refusing to prune the last active channel of block {}",
                self.block.0
            )));
        }
        self.active[channel] = false;
        Ok(())
    }

    pub fn as_bools(&self) -> &[bool] {
        &self.active
    }

    pub fn from_bools(block: BlockId, active: Vec<bool>) -> Result<Self> {
        if !active.iter().any(|&a| a) {
            return Err(Error::State(format!("mask for block {} is all-false", block.0)));
        }
        Ok(ChannelMask { block, active })
    }
}

/// Residual block: conv1 -> bn -> relu -> [prune point] -> conv2 -> bn,
/// plus an identity or 1x1-conv shortcut. No activation after the sum, so a
/// block with zero conv weights and identity shortcut is exactly identity.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub id: BlockId,
    pub conv1: ConvLayer,
    pub bn_mid: BnLayer,
    pub conv2: ConvLayer,
    pub bn_out: BnLayer,
    pub shortcut: Option<ConvLayer>,
    pub mask: ChannelMask,
    pub stride: usize,
}

impl ResidualBlock {
    pub fn new(
        params: &mut ParamSet,
        id: BlockId,
        in_channels: usize,
        slots: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let conv1 = ConvLayer::new(params, in_channels, slots, 3, stride, 1, rng);
        let bn_mid = BnLayer::new(params, slots);
        let conv2 = ConvLayer::new(params, slots, out_channels, 3, 1, 1, rng);
        let bn_out = BnLayer::new(params, out_channels);
        let shortcut = (stride != 1 || in_channels != out_channels)
            .then(|| ConvLayer::new(params, in_channels, out_channels, 1, stride, 0, rng));
        ResidualBlock {
            id,
            conv1,
            bn_mid,
            conv2,
            bn_out,
            shortcut,
            mask: ChannelMask::all_on(id, slots),
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels
    }

    pub fn forward_tape(
        &mut self,
        params: &ParamSet,
        tape: &mut GradTape,
        x: NodeId,
        train: bool,
        hooks: Option<&mut ActivationHooks>,
    ) -> Result<NodeId> {
        let mut h = self.conv1.forward_tape(params, tape, x)?;
        h = self.bn_mid.forward_tape(params, tape, h, train)?;
        h = tape.relu(h);
        if !self.mask.all_active() {
            h = tape.scale_channels(h, self.mask.scales())?;
        }
        if let Some(hooks) = hooks {
            hooks.register(self.id, h);
        }
        let mut y = self.conv2.forward_tape(params, tape, h)?;
        y = self.bn_out.forward_tape(params, tape, y, train)?;
        let s = match &self.shortcut {
            Some(conv) => conv.forward_tape(params, tape, x)?,
            None => x,
        };
        tape.add(y, s)
    }

    pub fn forward_eval(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv1.forward_eval(params, x)?;
        h = self.bn_mid.forward_eval(params, &h);
        h = relu_eval(h);
        if !self.mask.all_active() {
            h = scale_channels_eval(h, &self.mask.scales());
        }
        let mut y = self.conv2.forward_eval(params, &h)?;
        y = self.bn_out.forward_eval(params, &y);
        let s = match &self.shortcut {
            Some(conv) => conv.forward_eval(params, x)?,
            None => x.clone(),
        };
        if y.shape() != s.shape() {
            return Err(Error::Shape(format!(
                "residual add: conv path {:?} vs shortcut {:?}",
                y.shape(),
                s.shape()
            )));
        }
        for (o, &sv) in y.data_mut().iter_mut().zip(s.data()) {
            *o += sv;
        }
        Ok(y)
    }

    /// Mask one intermediate channel and freeze everything it owns: its
    /// conv1 filter, its bn parameters, and its conv2 input columns.
    pub fn apply_mask(&mut self, params: &mut ParamSet, channel: usize) -> Result<()> {
        self.mask.deactivate(channel)?;
        let fsz = self.conv1.in_channels * 9;
        params.freeze_elements(self.conv1.weight, channel * fsz..(channel + 1) * fsz);
        params.freeze_elements(self.bn_mid.gamma, [channel]);
        params.freeze_elements(self.bn_mid.beta, [channel]);
        let slots = self.conv2.in_channels;
        let col = (0..self.conv2.out_channels)
            .flat_map(|o| (o * slots + channel) * 9..(o * slots + channel + 1) * 9);
        params.freeze_elements(self.conv2.weight, col);
        Ok(())
    }

    /// Physically delete the masked channels. Forward output is unchanged.
    pub fn compact(&self, src: &ParamSet, dst: &mut ParamSet) -> ResidualBlock {
        let keep = self.mask.active_indices();
        let conv1 = compact_conv_rows(src, dst, &self.conv1, &keep);
        let bn_mid = compact_bn(src, dst, &self.bn_mid, &keep);
        let conv2 = compact_conv_cols(src, dst, &self.conv2, &keep);
        let bn_out = copy_bn(src, dst, &self.bn_out);
        let shortcut = self.shortcut.as_ref().map(|c| copy_conv(src, dst, c));
        ResidualBlock {
            id: self.id,
            conv1,
            bn_mid,
            conv2,
            bn_out,
            shortcut,
            mask: ChannelMask::all_on(self.id, keep.len()),
            stride: self.stride,
        }
    }

    /// Parameters still in effect (masked filters excluded).
    pub fn active_param_count(&self) -> u64 {
        let nm = self.mask.active_count() as u64;
        let ni = self.conv1.in_channels as u64;
        let no = self.conv2.out_channels as u64;
        let mut total = 9 * ni * nm + 2 * nm + 9 * nm * no + 2 * no;
        if let Some(s) = &self.shortcut {
            total += s.param_count();
        }
        total
    }
}

/// DenseNet-BC bottleneck: bn -> relu -> 1x1 conv -> bn -> relu ->
/// [prune point] -> 3x3 conv, output concatenated onto the block input.
#[derive(Debug, Clone)]
pub struct DenseBottleneckBlock {
    pub id: BlockId,
    pub bn_in: BnLayer,
    pub conv1: ConvLayer,
    pub bn_mid: BnLayer,
    pub conv2: ConvLayer,
    pub mask: ChannelMask,
    pub growth: usize,
}

impl DenseBottleneckBlock {
    pub fn new(
        params: &mut ParamSet,
        id: BlockId,
        in_channels: usize,
        slots: usize,
        growth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bn_in = BnLayer::new(params, in_channels);
        let conv1 = ConvLayer::new(params, in_channels, slots, 1, 1, 0, rng);
        let bn_mid = BnLayer::new(params, slots);
        let conv2 = ConvLayer::new(params, slots, growth, 3, 1, 1, rng);
        DenseBottleneckBlock {
            id,
            bn_in,
            conv1,
            bn_mid,
            conv2,
            mask: ChannelMask::all_on(id, slots),
            growth,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels
    }

    /// Channels after concatenation.
    pub fn out_channels(&self) -> usize {
        self.in_channels() + self.growth
    }

    pub fn forward_tape(
        &mut self,
        params: &ParamSet,
        tape: &mut GradTape,
        x: NodeId,
        train: bool,
        hooks: Option<&mut ActivationHooks>,
    ) -> Result<NodeId> {
        let mut h = self.bn_in.forward_tape(params, tape, x, train)?;
        h = tape.relu(h);
        h = self.conv1.forward_tape(params, tape, h)?;
        h = self.bn_mid.forward_tape(params, tape, h, train)?;
        h = tape.relu(h);
        if !self.mask.all_active() {
            h = tape.scale_channels(h, self.mask.scales())?;
        }
        if let Some(hooks) = hooks {
            hooks.register(self.id, h);
        }
        let fresh = self.conv2.forward_tape(params, tape, h)?;
        tape.concat_channels(&[x, fresh])
    }

    pub fn forward_eval(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut h = self.bn_in.forward_eval(params, x);
        h = relu_eval(h);
        h = self.conv1.forward_eval(params, &h)?;
        h = self.bn_mid.forward_eval(params, &h);
        h = relu_eval(h);
        if !self.mask.all_active() {
            h = scale_channels_eval(h, &self.mask.scales());
        }
        let fresh = self.conv2.forward_eval(params, &h)?;
        // concat(x, fresh) along channels
        let (n, cx, hh, ww) = x.dims4();
        let cf = fresh.extent(1);
        let hw = hh * ww;
        let mut out = vec![0.0f32; n * (cx + cf) * hw];
        for ni in 0..n {
            out[ni * (cx + cf) * hw..(ni * (cx + cf) + cx) * hw]
                .copy_from_slice(&x.data()[ni * cx * hw..(ni + 1) * cx * hw]);
            out[(ni * (cx + cf) + cx) * hw..(ni + 1) * (cx + cf) * hw]
                .copy_from_slice(&fresh.data()[ni * cf * hw..(ni + 1) * cf * hw]);
        }
        Tensor::new(&[n, cx + cf, hh, ww], out)
    }

    pub fn apply_mask(&mut self, params: &mut ParamSet, channel: usize) -> Result<()> {
        self.mask.deactivate(channel)?;
        let fsz = self.conv1.in_channels; // 1x1 kernel
        params.freeze_elements(self.conv1.weight, channel * fsz..(channel + 1) * fsz);
        params.freeze_elements(self.bn_mid.gamma, [channel]);
        params.freeze_elements(self.bn_mid.beta, [channel]);
        let slots = self.conv2.in_channels;
        let col = (0..self.conv2.out_channels)
            .flat_map(|o| (o * slots + channel) * 9..(o * slots + channel + 1) * 9);
        params.freeze_elements(self.conv2.weight, col);
        Ok(())
    }

    pub fn compact(&self, src: &ParamSet, dst: &mut ParamSet) -> DenseBottleneckBlock {
        let keep = self.mask.active_indices();
        let bn_in = copy_bn(src, dst, &self.bn_in);
        let conv1 = compact_conv_rows(src, dst, &self.conv1, &keep);
        let bn_mid = compact_bn(src, dst, &self.bn_mid, &keep);
        let conv2 = compact_conv_cols(src, dst, &self.conv2, &keep);
        DenseBottleneckBlock {
            id: self.id,
            bn_in,
            conv1,
            bn_mid,
            conv2,
            mask: ChannelMask::all_on(self.id, keep.len()),
            growth: self.growth,
        }
    }

    pub fn active_param_count(&self) -> u64 {
        let nm = self.mask.active_count() as u64;
        let ni = self.conv1.in_channels as u64;
        let k = self.growth as u64;
        2 * ni + ni * nm + 2 * nm + 9 * nm * k
    }
}

/// DenseNet transition: bn -> relu -> 1x1 conv -> 2x2 average pool.
#[derive(Debug, Clone)]
pub struct TransitionLayer {
    pub bn: BnLayer,
    pub conv: ConvLayer,
}

impl TransitionLayer {
    pub fn new(params: &mut ParamSet, in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        TransitionLayer {
            bn: BnLayer::new(params, in_channels),
            conv: ConvLayer::new(params, in_channels, out_channels, 1, 1, 0, rng),
        }
    }

    pub fn forward_tape(
        &mut self,
        params: &ParamSet,
        tape: &mut GradTape,
        x: NodeId,
        train: bool,
    ) -> Result<NodeId> {
        let mut h = self.bn.forward_tape(params, tape, x, train)?;
        h = tape.relu(h);
        h = self.conv.forward_tape(params, tape, h)?;
        tape.avg_pool(h, 2, 2)
    }

    pub fn forward_eval(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut h = self.bn.forward_eval(params, x);
        h = relu_eval(h);
        h = self.conv.forward_eval(params, &h)?;
        crate::kernels::avg_pool_forward(&h, 2, 2)
    }
}

// ── Compaction helpers ──────────────────────────────────────────────

pub(crate) fn copy_conv(src: &ParamSet, dst: &mut ParamSet, conv: &ConvLayer) -> ConvLayer {
    let weight = dst.add(src.get(conv.weight).value.clone(), true);
    ConvLayer { weight, ..*conv }
}

pub(crate) fn copy_bn(src: &ParamSet, dst: &mut ParamSet, bn: &BnLayer) -> BnLayer {
    let gamma = dst.add(src.get(bn.gamma).value.clone(), false);
    let beta = dst.add(src.get(bn.beta).value.clone(), false);
    BnLayer {
        gamma,
        beta,
        running_mean: bn.running_mean.clone(),
        running_var: bn.running_var.clone(),
        channels: bn.channels,
        eps: bn.eps,
        momentum: bn.momentum,
    }
}

pub(crate) fn copy_linear(src: &ParamSet, dst: &mut ParamSet, lin: &LinearLayer) -> LinearLayer {
    let weight = dst.add(src.get(lin.weight).value.clone(), true);
    let bias = dst.add(src.get(lin.bias).value.clone(), true);
    LinearLayer { weight, bias, ..*lin }
}

/// Keep only the given output-channel rows of a conv weight.
fn compact_conv_rows(src: &ParamSet, dst: &mut ParamSet, conv: &ConvLayer, keep: &[usize]) -> ConvLayer {
    let w = &src.get(conv.weight).value;
    let fsz = conv.in_channels * conv.kernel * conv.kernel;
    let mut data = Vec::with_capacity(keep.len() * fsz);
    for &c in keep {
        data.extend_from_slice(&w.data()[c * fsz..(c + 1) * fsz]);
    }
    let weight = dst.add(
        Tensor::new(&[keep.len(), conv.in_channels, conv.kernel, conv.kernel], data)
            .expect("compact rows shape"),
        true,
    );
    ConvLayer { weight, out_channels: keep.len(), ..*conv }
}

/// Keep only the given input-channel columns of a conv weight.
fn compact_conv_cols(src: &ParamSet, dst: &mut ParamSet, conv: &ConvLayer, keep: &[usize]) -> ConvLayer {
    let w = &src.get(conv.weight).value;
    let ksz = conv.kernel * conv.kernel;
    let mut data = Vec::with_capacity(conv.out_channels * keep.len() * ksz);
    for o in 0..conv.out_channels {
        for &c in keep {
            let base = (o * conv.in_channels + c) * ksz;
            data.extend_from_slice(&w.data()[base..base + ksz]);
        }
    }
    let weight = dst.add(
        Tensor::new(&[conv.out_channels, keep.len(), conv.kernel, conv.kernel], data)
            .expect("compact cols shape"),
        true,
    );
    ConvLayer { weight, in_channels: keep.len(), ..*conv }
}

/// Keep only the given channels of a batch-norm layer.
fn compact_bn(src: &ParamSet, dst: &mut ParamSet, bn: &BnLayer, keep: &[usize]) -> BnLayer {
    let pick = |t: &Tensor| -> Vec<f32> { keep.iter().map(|&c| t.data()[c]).collect() };
    let gamma = dst.add(
        Tensor::new(&[keep.len()], pick(&src.get(bn.gamma).value)).expect("bn gamma"),
        false,
    );
    let beta = dst.add(
        Tensor::new(&[keep.len()], pick(&src.get(bn.beta).value)).expect("bn beta"),
        false,
    );
    BnLayer {
        gamma,
        beta,
        running_mean: keep.iter().map(|&c| bn.running_mean[c]).collect(),
        running_var: keep.iter().map(|&c| bn.running_var[c]).collect(),
        channels: keep.len(),
        eps: bn.eps,
        momentum: bn.momentum,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_err;
    use rand::SeedableRng;

    fn residual_fixture(
        in_ch: usize,
        slots: usize,
        out_ch: usize,
        stride: usize,
        seed: u64,
    ) -> (ParamSet, ResidualBlock) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = ResidualBlock::new(&mut params, BlockId(0), in_ch, slots, out_ch, stride, &mut rng);
        (params, block)
    }

    #[test]
    fn zero_weights_identity_shortcut_is_identity() {
        let (mut params, block) = residual_fixture(8, 8, 8, 1, 1);
        for id in [block.conv1.weight, block.conv2.weight] {
            let p = params.get_mut(id);
            p.value.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 8, 5, 5], 1.0, &mut rng);
        let y = block.forward_eval(&params, &x).unwrap();
        // conv path: conv1 of zeros -> bn(0)=0 -> relu(0)=0 -> conv2 of zeros -> bn(0)=0
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn masking_a_zero_filter_changes_nothing() {
        let (mut params, mut block) = residual_fixture(4, 6, 4, 1, 3);
        // Zero out channel 2's filter in conv1 and its bn params so the
        // channel contributes nothing even unmasked.
        let fsz = 4 * 9;
        {
            let w = params.get_mut(block.conv1.weight);
            w.value.data_mut()[2 * fsz..3 * fsz].fill(0.0);
        }
        {
            let g = params.get_mut(block.bn_mid.gamma);
            g.value.data_mut()[2] = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 4, 6, 6], 1.0, &mut rng);
        let before = block.forward_eval(&params, &x).unwrap();
        block.apply_mask(&mut params, 2).unwrap();
        let after = block.forward_eval(&params, &x).unwrap();
        let max = before.max_abs_diff(&after);
        assert!(max < 1e-6, "masking a dead channel changed output by {max}");
    }

    #[test]
    fn mask_then_compact_matches_masked_forward() {
        let (mut params, mut block) = residual_fixture(6, 10, 12, 2, 7);
        for ch in [1, 4, 7] {
            block.apply_mask(&mut params, ch).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn(&[3, 6, 8, 8], 1.0, &mut rng);
        let masked = block.forward_eval(&params, &x).unwrap();
        let mut dst = ParamSet::new();
        let compacted = block.compact(&params, &mut dst);
        let compact_out = compacted.forward_eval(&dst, &x).unwrap();
        assert_eq!(masked.shape(), compact_out.shape());
        for (a, b) in masked.data().iter().zip(compact_out.data()) {
            assert!(rel_err(*a, *b, 1e-3) <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn compact_param_drop_matches_block_arithmetic() {
        // N_i=16, N_o=32: one pruned channel frees 9*16 + 9*32 = 432 conv
        // parameters plus 2 bn parameters.
        let (mut params, mut block) = residual_fixture(16, 32, 32, 1, 9);
        let before = block.active_param_count();
        block.apply_mask(&mut params, 5).unwrap();
        let after = block.active_param_count();
        assert_eq!(before - after, 9 * 16 + 9 * 32 + 2);
        let mut dst = ParamSet::new();
        let compacted = block.compact(&params, &mut dst);
        assert_eq!(compacted.active_param_count(), after);
    }

    #[test]
    fn mask_lifecycle_errors() {
        let (mut params, mut block) = residual_fixture(4, 3, 4, 1, 10);
        block.apply_mask(&mut params, 1).unwrap();
        assert!(matches!(block.apply_mask(&mut params, 1), Err(Error::State(_))));
        block.apply_mask(&mut params, 0).unwrap();
        // one channel left: further pruning refused
        assert!(matches!(block.apply_mask(&mut params, 2), Err(Error::State(_))));
        assert_eq!(block.mask.active_count(), 1);
    }

    #[test]
    fn masked_filters_receive_zero_gradient() {
        let (mut params, mut block) = residual_fixture(4, 6, 4, 1, 11);
        block.apply_mask(&mut params, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng);
        let mut tape = GradTape::new();
        let xid = tape.leaf(x);
        let out = block.forward_tape(&params, &mut tape, xid, true, None).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        // find the tape leaf bound to conv1's weight
        let conv1_grad = tape
            .bindings()
            .iter()
            .find(|(k, _)| *k == block.conv1.weight.index())
            .map(|&(_, node)| tape.grad(node).unwrap())
            .expect("conv1 bound");
        let fsz = 4 * 9;
        assert!(conv1_grad.data()[3 * fsz..4 * fsz].iter().all(|&g| g == 0.0));
        // an active filter should see gradient somewhere
        assert!(conv1_grad.data()[..fsz].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn dense_block_concat_extent_is_input_plus_growth() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut block = DenseBottleneckBlock::new(&mut params, BlockId(1), 10, 16, 4, &mut rng);
        let x = Tensor::randn(&[2, 10, 8, 8], 1.0, &mut rng);
        let y = block.forward_eval(&params, &x).unwrap();
        assert_eq!(y.shape(), &[2, 14, 8, 8]);
        for ch in [0, 5, 9] {
            block.apply_mask(&mut params, ch).unwrap();
        }
        let y2 = block.forward_eval(&params, &x).unwrap();
        assert_eq!(y2.shape(), &[2, 14, 8, 8]);
    }

    #[test]
    fn dense_mask_compact_equivalence() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut block = DenseBottleneckBlock::new(&mut params, BlockId(2), 8, 12, 6, &mut rng);
        for ch in [0, 3, 11] {
            block.apply_mask(&mut params, ch).unwrap();
        }
        let x = Tensor::randn(&[2, 8, 6, 6], 1.0, &mut rng);
        let masked = block.forward_eval(&params, &x).unwrap();
        let mut dst = ParamSet::new();
        let compacted = block.compact(&params, &mut dst);
        let out = compacted.forward_eval(&dst, &x).unwrap();
        for (a, b) in masked.data().iter().zip(out.data()) {
            assert!(rel_err(*a, *b, 1e-3) <= 1e-5);
        }
        assert_eq!(
            block.active_param_count(),
            compacted.active_param_count()
        );
    }

    #[test]
    fn compact_of_unmasked_block_is_parameter_identical() {
        let (params, block) = residual_fixture(5, 7, 9, 1, 15);
        let mut dst = ParamSet::new();
        let compacted = block.compact(&params, &mut dst);
        assert_eq!(
            params.get(block.conv1.weight).value.data(),
            dst.get(compacted.conv1.weight).value.data()
        );
        assert_eq!(
            params.get(block.conv2.weight).value.data(),
            dst.get(compacted.conv2.weight).value.data()
        );
        assert_eq!(block.active_param_count(), compacted.active_param_count());
    }
}
