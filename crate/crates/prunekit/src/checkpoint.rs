//! Checkpoints: a JSON manifest (descriptor, masks, optimizer metadata,
//! tensor index) next to a single blob file of raw little-endian f32
//! tensors. Parameter order is the network's deterministic allocation
//! order, so loading rebuilds the exact network.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arch::ArchDescriptor;
use crate::error::{Error, Result};
use crate::net::{BuildMode, Network};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorIndexEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element (not byte) offset into the blob file.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub label: String,
    pub final_test_error: Option<f64>,
    /// Lowest learning rate the training schedule reached; the fine-tune
    /// default for later pruning.
    pub final_lr: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub descriptor: ArchDescriptor,
    /// Live/dead flags per maskable block, in block-id order.
    pub masks: Vec<Vec<bool>>,
    /// Optimizer state stored alongside the weights.
    pub optimizer: OptimizerState,
    pub tensors: Vec<TensorIndexEntry>,
    pub meta: CheckpointMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: String,
    pub momentum_buffers: bool,
}

fn write_f32s(buf: &mut Vec<u8>, data: &[f32]) {
    buf.reserve(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f32s(bytes: &[u8], offset: usize, len: usize, name: &str) -> Result<Vec<f32>> {
    let start = offset * 4;
    let end = start + len * 4;
    if end > bytes.len() {
        return Err(Error::Format(format!(
            "tensor {name}: blob range {start}..{end} exceeds file of {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Write `dir/manifest.json` and `dir/weights.bin`.
pub fn save(dir: &Path, network: &Network, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors: Vec<TensorIndexEntry> = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, shape: &[usize], data: &[f32], blob: &mut Vec<u8>, tensors: &mut Vec<TensorIndexEntry>| {
        tensors.push(TensorIndexEntry {
            name,
            shape: shape.to_vec(),
            offset,
            len: data.len(),
        });
        write_f32s(blob, data);
        offset += data.len();
    };

    for i in 0..network.params.len() {
        let p = network.params.by_index(i);
        push(format!("param{i}.value"), p.value.shape(), p.value.data(), &mut blob, &mut tensors);
        push(format!("param{i}.momentum"), p.momentum.shape(), p.momentum.data(), &mut blob, &mut tensors);
    }
    for (j, bn) in network.bn_layers().iter().enumerate() {
        push(format!("bn{j}.running_mean"), &[bn.channels], &bn.running_mean, &mut blob, &mut tensors);
        push(format!("bn{j}.running_var"), &[bn.channels], &bn.running_var, &mut blob, &mut tensors);
    }

    let manifest = CheckpointManifest {
        version: 1,
        descriptor: network.descriptor.clone(),
        masks: network.masks().iter().map(|m| m.as_bools().to_vec()).collect(),
        optimizer: OptimizerState { kind: "sgd-momentum".into(), momentum_buffers: true },
        tensors,
        meta: meta.clone(),
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join(WEIGHTS_FILE), blob)?;
    Ok(())
}

/// Rebuild a network (weights, momentum, running stats, masks) from a
/// checkpoint directory.
pub fn load(dir: &Path) -> Result<(Network, CheckpointMeta)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: CheckpointManifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Format(format!("{}: {e}", manifest_path.display()))
        })?)?;
    if manifest.version != 1 {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let blob = std::fs::read(dir.join(WEIGHTS_FILE))?;

    // Build with every slot live, then re-apply the stored masks so the
    // mask identity (not just the count) survives the round trip.
    let mut full = manifest.descriptor.clone();
    for e in full.profile.iter_mut() {
        e.n_m = e.n_o;
    }
    let mut network = Network::build(&full, BuildMode::Masked, 0)?;
    let mask_vectors = manifest.masks.clone();
    if mask_vectors.len() != network.block_count() {
        return Err(Error::Format(format!(
            "checkpoint has {} masks for {} blocks",
            mask_vectors.len(),
            network.block_count()
        )));
    }
    for (mask, current) in mask_vectors.iter().zip(network.masks()) {
        if mask.len() != current.slots() {
            return Err(Error::Format(format!(
                "mask length {} does not match {} slots of block {}",
                mask.len(),
                current.slots(),
                current.block.0
            )));
        }
        for (c, &alive) in mask.iter().enumerate() {
            if !alive {
                network.apply_mask(current.block, c)?;
            }
        }
    }

    let mut index = std::collections::HashMap::new();
    for t in &manifest.tensors {
        index.insert(t.name.clone(), t.clone());
    }
    let fetch = |name: String, shape: &[usize]| -> Result<Vec<f32>> {
        let entry = index
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name}")))?;
        if entry.shape != shape {
            return Err(Error::Format(format!(
                "tensor {name}: checkpoint shape {:?} vs network {:?}",
                entry.shape, shape
            )));
        }
        read_f32s(&blob, entry.offset, entry.len, &name)
    };

    for i in 0..network.params.len() {
        let shape = network.params.by_index(i).value.shape().to_vec();
        let value = fetch(format!("param{i}.value"), &shape)?;
        let momentum = fetch(format!("param{i}.momentum"), &shape)?;
        let p = network.params.by_index_mut(i);
        p.value = Tensor::new(&shape, value)?;
        p.momentum = Tensor::new(&shape, momentum)?;
    }
    let channels: Vec<usize> = network.bn_layers().iter().map(|b| b.channels).collect();
    let mut stats = Vec::with_capacity(channels.len());
    for (j, ch) in channels.iter().enumerate() {
        let mean = fetch(format!("bn{j}.running_mean"), &[*ch])?;
        let var = fetch(format!("bn{j}.running_var"), &[*ch])?;
        stats.push((mean, var));
    }
    for (bn, (mean, var)) in network.bn_layers_mut().into_iter().zip(stats) {
        bn.running_mean = mean;
        bn.running_var = var;
    }
    // descriptor n_m already synced by apply_mask; sanity-check profile
    if network.descriptor.profile != manifest.descriptor.profile {
        return Err(Error::Integrity(
            "checkpoint masks disagree with its descriptor profile".into(),
        ));
    }
    Ok((network, manifest.meta))
}

/// Conventional location of a checkpoint inside a run output directory.
pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoint")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::make_wrn;
    use crate::blocks::BlockId;
    use crate::data::{make_synthetic, Split};
    use crate::net::BuildMode;
    use crate::train::evaluate;

    #[test]
    fn roundtrip_preserves_forward_behavior() {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let mut net = Network::build(&desc, BuildMode::Masked, 17).unwrap();
        net.apply_mask(BlockId(1), 3).unwrap();
        net.apply_mask(BlockId(2), 10).unwrap();
        // perturb running stats so the roundtrip is non-trivial
        for bn in net.bn_layers_mut() {
            for v in bn.running_mean.iter_mut() {
                *v += 0.25;
            }
        }
        let data = make_synthetic(10, 5, 16, 1).unwrap();
        let before = evaluate(&net, &data, Split::Test).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            label: "test".into(),
            final_test_error: Some(before),
            final_lr: Some(0.004),
            seed: Some(17),
        };
        save(dir.path(), &net, &meta).unwrap();
        let (loaded, meta2) = load(dir.path()).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(loaded.descriptor, net.descriptor);
        let after = evaluate(&loaded, &data, Split::Test).unwrap();
        assert_eq!(before, after);
        // bit-identical logits
        let (images, _) = data.batch(Split::Test, &[0, 3]);
        assert_eq!(
            net.forward_eval(&images).unwrap().data(),
            loaded.forward_eval(&images).unwrap().data()
        );
        // masks carried over exactly
        assert_eq!(
            net.masks().iter().map(|m| m.as_bools().to_vec()).collect::<Vec<_>>(),
            loaded.masks().iter().map(|m| m.as_bools().to_vec()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let desc = make_wrn(10, 1.0, 1.0).unwrap();
        let net = Network::build(&desc, BuildMode::Masked, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &net, &CheckpointMeta::default()).unwrap();
        let blob = std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
        std::fs::write(dir.path().join(WEIGHTS_FILE), &blob[..blob.len() / 2]).unwrap();
        assert!(matches!(load(dir.path()), Err(Error::Format(_))));
    }
}
