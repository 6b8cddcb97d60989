//! Architecture descriptors: declarative network specifications from which
//! both concrete networks and cost reports are derived.
//!
//! The JSON schema is versioned. The per-block channel profile is an array
//! of objects `{block, n_i, n_o, n_m, stride}` where `n_o` counts the
//! intermediate channel slots of a block and `n_m` counts the live ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Network;

pub const DESCRIPTOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "wrn")]
    Wrn,
    #[serde(rename = "densenet-bc")]
    DenseNetBc,
    #[serde(rename = "resnet")]
    ResNet,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Family::Wrn => write!(f, "wrn"),
            Family::DenseNetBc => write!(f, "densenet-bc"),
            Family::ResNet => write!(f, "resnet"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub block: usize,
    pub n_i: usize,
    pub n_o: usize,
    pub n_m: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub version: u32,
    pub family: Family,
    pub depth: usize,
    pub width: Option<f64>,
    pub growth_rate: Option<usize>,
    pub transition_rate: Option<f64>,
    pub bottleneck: Option<f64>,
    pub input_resolution: usize,
    pub classes: usize,
    pub profile: Vec<ProfileEntry>,
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.profile.is_empty() {
            return Err(Error::Config("descriptor has no blocks".into()));
        }
        for e in &self.profile {
            if e.n_m < 1 || e.n_m > e.n_o {
                return Err(Error::Config(format!(
                    "block {}: n_m={} outside 1..={}",
                    e.block, e.n_m, e.n_o
                )));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: ArchDescriptor = serde_json::from_str(s)?;
        d.validate()?;
        Ok(d)
    }

    /// Short human-readable identity, e.g. `wrn-40-2` or `resnet18`.
    pub fn name(&self) -> String {
        match self.family {
            Family::Wrn => {
                let w = self.width.unwrap_or(1.0);
                let ws = if (w - w.round()).abs() < 1e-9 {
                    format!("{}", w.round() as i64)
                } else {
                    format!("{w}")
                };
                format!("wrn-{}-{}", self.depth, ws)
            }
            Family::DenseNetBc => {
                format!("densenet-bc-{}-{}", self.depth, self.growth_rate.unwrap_or(0))
            }
            Family::ResNet => format!("resnet{}", self.depth),
        }
    }
}

/// Half-up rounding clamped below by one, the convention for every channel
/// count derived from a real-valued multiplier.
pub fn round_channels(x: f64) -> usize {
    ((x + 0.5).floor() as i64).max(1) as usize
}

/// Stage widths for a WideResNet with the given width multiplier (ceiling).
pub fn wrn_stage_widths(width: f64) -> [usize; 3] {
    [
        (16.0 * width).ceil() as usize,
        (32.0 * width).ceil() as usize,
        (64.0 * width).ceil() as usize,
    ]
}

/// WRN-d-w with an optional uniform bottleneck multiplier z: each block's
/// live intermediate channels become round(z * n_o).
pub fn make_wrn(depth: usize, width: f64, z: f64) -> Result<ArchDescriptor> {
    if depth < 10 || (depth - 4) % 6 != 0 {
        return Err(Error::Config(format!(
            "wrn depth must be 6n+4 with n>=1, got {depth}"
        )));
    }
    if width <= 0.0 {
        return Err(Error::Config(format!("wrn width must be positive, got {width}")));
    }
    if z <= 0.0 || z > 1.0 {
        return Err(Error::Config(format!("bottleneck z must lie in (0,1], got {z}")));
    }
    let per_stage = (depth - 4) / 6;
    let widths = wrn_stage_widths(width);
    let mut profile = Vec::new();
    let mut n_i = 16usize;
    let mut block = 0usize;
    for (stage, &w) in widths.iter().enumerate() {
        for b in 0..per_stage {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            profile.push(ProfileEntry {
                block,
                n_i,
                n_o: w,
                n_m: round_channels(z * w as f64).min(w),
                stride,
            });
            n_i = w;
            block += 1;
        }
    }
    Ok(ArchDescriptor {
        version: DESCRIPTOR_VERSION,
        family: Family::Wrn,
        depth,
        width: Some(width),
        growth_rate: None,
        transition_rate: None,
        bottleneck: Some(z),
        input_resolution: 32,
        classes: 10,
        profile,
    })
}

/// DenseNet-BC with bottleneck blocks: three dense stages separated by
/// compressing transitions.
pub fn make_densenet_bc(depth: usize, growth: usize, transition_rate: f64) -> Result<ArchDescriptor> {
    if depth < 10 || (depth - 4) % 6 != 0 {
        return Err(Error::Config(format!(
            "densenet-bc depth must be 6n+4 with n>=1, got {depth}"
        )));
    }
    if growth == 0 {
        return Err(Error::Config("growth rate must be positive".into()));
    }
    if transition_rate <= 0.0 || transition_rate > 1.0 {
        return Err(Error::Config(format!(
            "transition rate must lie in (0,1], got {transition_rate}"
        )));
    }
    let per_stage = (depth - 4) / 6;
    let slots = 4 * growth;
    let mut profile = Vec::new();
    let mut channels = 2 * growth;
    let mut block = 0usize;
    for stage in 0..3 {
        for _ in 0..per_stage {
            profile.push(ProfileEntry { block, n_i: channels, n_o: slots, n_m: slots, stride: 1 });
            channels += growth;
            block += 1;
        }
        if stage < 2 {
            channels = ((channels as f64) * transition_rate).floor() as usize;
        }
    }
    Ok(ArchDescriptor {
        version: DESCRIPTOR_VERSION,
        family: Family::DenseNetBc,
        depth,
        width: None,
        growth_rate: Some(growth),
        transition_rate: Some(transition_rate),
        bottleneck: None,
        input_resolution: 32,
        classes: 10,
        profile,
    })
}

/// Basic-block ResNets. 18 and 34 use the standard stage layouts; 9 is the
/// count-calibrated [1,1,1,1] reconstruction.
pub fn make_resnet(variant: usize, classes: usize, resolution: usize) -> Result<ArchDescriptor> {
    let stages: [usize; 4] = match variant {
        9 => [1, 1, 1, 1],
        18 => [2, 2, 2, 2],
        34 => [3, 4, 6, 3],
        other => {
            return Err(Error::Config(format!(
                "unknown resnet variant {other}; supported: 9, 18, 34"
            )))
        }
    };
    let widths = [64usize, 128, 256, 512];
    let mut profile = Vec::new();
    let mut n_i = 64usize;
    let mut block = 0usize;
    for (stage, (&count, &w)) in stages.iter().zip(&widths).enumerate() {
        for b in 0..count {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            profile.push(ProfileEntry { block, n_i, n_o: w, n_m: w, stride });
            n_i = w;
            block += 1;
        }
    }
    Ok(ArchDescriptor {
        version: DESCRIPTOR_VERSION,
        family: Family::ResNet,
        depth: variant,
        width: None,
        growth_rate: None,
        transition_rate: None,
        bottleneck: None,
        input_resolution: resolution,
        classes,
        profile,
    })
}

// ── Structural skeleton ─────────────────────────────────────────────

/// One structural element of a network, in forward order. Derived entirely
/// from a descriptor; the network builder and the cost accountant both walk
/// this same sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum SkeletonItem {
    /// Stem convolution; `bn` marks whether conv/bn/relu or a bare conv.
    StemConv { c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, bn: bool },
    MaxPool { k: usize, stride: usize, pad: usize },
    /// A maskable block; `out_width` is the block's output channel count,
    /// which pruning never changes.
    Block { entry: ProfileEntry, out_width: usize },
    Transition { c_in: usize, c_out: usize },
    FinalBn { channels: usize },
    Classifier { d_in: usize },
}

/// Block output widths for the stage-structured families.
fn stage_out_widths(desc: &ArchDescriptor) -> Result<Vec<usize>> {
    match desc.family {
        Family::Wrn => {
            let per_stage = desc.profile.len() / 3;
            if per_stage * 3 != desc.profile.len() {
                return Err(Error::Config("wrn profile must have 3 equal stages".into()));
            }
            let widths = wrn_stage_widths(desc.width.unwrap_or(1.0));
            Ok((0..desc.profile.len()).map(|j| widths[j / per_stage]).collect())
        }
        Family::ResNet => {
            let stages: [usize; 4] = match desc.depth {
                9 => [1, 1, 1, 1],
                18 => [2, 2, 2, 2],
                34 => [3, 4, 6, 3],
                other => return Err(Error::Config(format!("unknown resnet depth {other}"))),
            };
            let widths = [64usize, 128, 256, 512];
            let mut out = Vec::new();
            for (count, width) in stages.iter().zip(&widths) {
                out.extend(std::iter::repeat(*width).take(*count));
            }
            if out.len() != desc.profile.len() {
                return Err(Error::Config(format!(
                    "resnet-{} expects {} blocks, profile has {}",
                    desc.depth,
                    out.len(),
                    desc.profile.len()
                )));
            }
            Ok(out)
        }
        Family::DenseNetBc => Err(Error::Config("densenet blocks have no stage width".into())),
    }
}

pub fn skeleton(desc: &ArchDescriptor) -> Result<Vec<SkeletonItem>> {
    desc.validate()?;
    let mut items = Vec::new();
    match desc.family {
        Family::Wrn | Family::ResNet => {
            let widths = stage_out_widths(desc)?;
            let stem_out = if desc.family == Family::Wrn { 16 } else { 64 };
            // Large-resolution inputs get the strided 7x7 stem with max
            // pooling; small inputs the 3x3 stem.
            if desc.family == Family::ResNet && desc.input_resolution >= 64 {
                items.push(SkeletonItem::StemConv {
                    c_in: 3,
                    c_out: stem_out,
                    k: 7,
                    stride: 2,
                    pad: 3,
                    bn: true,
                });
                items.push(SkeletonItem::MaxPool { k: 3, stride: 2, pad: 1 });
            } else {
                items.push(SkeletonItem::StemConv {
                    c_in: 3,
                    c_out: stem_out,
                    k: 3,
                    stride: 1,
                    pad: 1,
                    bn: true,
                });
            }
            for (entry, &out_width) in desc.profile.iter().zip(&widths) {
                items.push(SkeletonItem::Block { entry: *entry, out_width });
            }
            items.push(SkeletonItem::Classifier { d_in: *widths.last().unwrap() });
        }
        Family::DenseNetBc => {
            let growth = desc
                .growth_rate
                .ok_or_else(|| Error::Config("densenet descriptor needs growth_rate".into()))?;
            let per_stage = desc.profile.len() / 3;
            if per_stage * 3 != desc.profile.len() {
                return Err(Error::Config("densenet profile must have 3 equal stages".into()));
            }
            items.push(SkeletonItem::StemConv {
                c_in: 3,
                c_out: 2 * growth,
                k: 3,
                stride: 1,
                pad: 1,
                bn: false,
            });
            for (j, entry) in desc.profile.iter().enumerate() {
                items.push(SkeletonItem::Block { entry: *entry, out_width: growth });
                let stage_end = (j + 1) % per_stage == 0;
                let channels_now = entry.n_i + growth;
                if stage_end && j + 1 < desc.profile.len() {
                    items.push(SkeletonItem::Transition {
                        c_in: channels_now,
                        c_out: desc.profile[j + 1].n_i,
                    });
                } else if j + 1 == desc.profile.len() {
                    items.push(SkeletonItem::FinalBn { channels: channels_now });
                    items.push(SkeletonItem::Classifier { d_in: channels_now });
                }
            }
        }
    }
    Ok(items)
}

// ── Channel profiles ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSnapshot {
    pub block: usize,
    pub n_m: usize,
    pub n_o: usize,
    pub ratio: f64,
}

/// Per-block channel counts of a (possibly pruned) network, together with
/// the descriptor they came from so the architecture can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileVector {
    pub base: ArchDescriptor,
    pub entries: Vec<ProfileSnapshot>,
}

impl ProfileVector {
    pub fn from_descriptor(desc: &ArchDescriptor) -> Self {
        let entries = desc
            .profile
            .iter()
            .map(|e| ProfileSnapshot {
                block: e.block,
                n_m: e.n_m,
                n_o: e.n_o,
                ratio: e.n_m as f64 / e.n_o as f64,
            })
            .collect();
        ProfileVector { base: desc.clone(), entries }
    }

    /// Descriptor of the compacted architecture this profile describes.
    pub fn to_descriptor(&self) -> ArchDescriptor {
        self.base.clone()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ProfileVector = serde_json::from_str(s)?;
        p.base.validate()?;
        if p.entries.len() != p.base.profile.len() {
            return Err(Error::Integrity(format!(
                "profile has {} entries but base descriptor {} blocks",
                p.entries.len(),
                p.base.profile.len()
            )));
        }
        Ok(p)
    }

    pub fn total_pruned(&self) -> usize {
        self.entries.iter().map(|e| e.n_o - e.n_m).sum()
    }
}

/// Snapshot the live/slot channel counts of every maskable block.
pub fn extract_profile(network: &Network) -> ProfileVector {
    let mut desc = network.descriptor.clone();
    for (entry, (slots, active)) in desc.profile.iter_mut().zip(network.mask_summary()) {
        entry.n_o = slots;
        entry.n_m = active;
    }
    ProfileVector::from_descriptor(&desc)
}

/// Scale a pruning profile: each block's live channel count becomes
/// round(alpha * n_m). For alpha > 1 the slot count rises with it so the
/// descriptor stays valid; block input/output widths are untouched.
pub fn make_copycat(profile: &ProfileVector, alpha: f64) -> Result<ArchDescriptor> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let mut desc = profile.base.clone();
    for (entry, snap) in desc.profile.iter_mut().zip(&profile.entries) {
        let scaled = round_channels(alpha * snap.n_m as f64);
        entry.n_m = scaled;
        entry.n_o = snap.n_o.max(scaled);
    }
    desc.validate()?;
    Ok(desc)
}
