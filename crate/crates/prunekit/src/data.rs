//! Dataset ingestion: the CIFAR-10 binary format, seeded class-balanced
//! subsets, and a synthetic class-conditional generator so everything runs
//! with zero downloads.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed standardization constants for CIFAR-10 (per-channel mean/std of
/// the training set in [0,1] scale). Fixed rather than recomputed so runs
/// are bit-exact reproducible.
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 3072;
const CIFAR_BATCH_RECORDS: usize = 10000;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Cifar10 { root: PathBuf },
    Synthetic { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetSpec {
    pub seed: u64,
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone)]
enum ImageStore {
    /// Raw CIFAR pixel bytes (R plane, G plane, B plane per image);
    /// standardized on read.
    RawU8(Vec<u8>),
    /// Already-standardized floats, 3*res*res per image.
    F32(Vec<f32>),
}

#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub source: DataSource,
    pub classes: usize,
    pub resolution: usize,
    pub subset: Option<SubsetSpec>,
    train_images: ImageStore,
    train_labels: Vec<u8>,
    test_images: ImageStore,
    test_labels: Vec<u8>,
}

impl DatasetHandle {
    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_labels.len(),
            Split::Test => self.test_labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.train_labels.is_empty()
    }

    pub fn label(&self, split: Split, index: usize) -> usize {
        match split {
            Split::Train => self.train_labels[index] as usize,
            Split::Test => self.test_labels[index] as usize,
        }
    }

    fn image_size(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    /// Write one standardized CHW image into `out`.
    fn image_into(&self, split: Split, index: usize, out: &mut [f32]) {
        let sz = self.image_size();
        let store = match split {
            Split::Train => &self.train_images,
            Split::Test => &self.test_images,
        };
        match store {
            ImageStore::RawU8(bytes) => {
                let plane = self.resolution * self.resolution;
                let src = &bytes[index * sz..(index + 1) * sz];
                for ch in 0..3 {
                    let (mean, std) = (CIFAR10_MEAN[ch], CIFAR10_STD[ch]);
                    for i in 0..plane {
                        out[ch * plane + i] =
                            (src[ch * plane + i] as f32 / 255.0 - mean) / std;
                    }
                }
            }
            ImageStore::F32(data) => {
                out.copy_from_slice(&data[index * sz..(index + 1) * sz]);
            }
        }
    }

    /// Assemble a batch in the given index order, without augmentation.
    pub fn batch(&self, split: Split, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sz = self.image_size();
        let mut data = vec![0.0f32; indices.len() * sz];
        let mut labels = Vec::with_capacity(indices.len());
        for (i, &idx) in indices.iter().enumerate() {
            self.image_into(split, idx, &mut data[i * sz..(i + 1) * sz]);
            labels.push(self.label(split, idx));
        }
        let t = Tensor::new(
            &[indices.len(), 3, self.resolution, self.resolution],
            data,
        )
        .expect("batch shape");
        (t, labels)
    }

    /// Training batch with pad-4 reflect, random crop, and p=0.5 flip.
    pub fn augmented_batch(
        &self,
        indices: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> (Tensor, Vec<usize>) {
        let (mut batch, labels) = self.batch(Split::Train, indices);
        augment_in_place(&mut batch, rng);
        (batch, labels)
    }

    /// Deterministic class-balanced subset (train and test independently).
    pub fn subset(&self, seed: u64, train: usize, test: usize) -> Result<DatasetHandle> {
        let pick = |labels: &[u8], want: usize, stream: u64| -> Result<Vec<usize>> {
            if want > labels.len() {
                return Err(Error::Config(format!(
                    "subset of {want} from split of {}",
                    labels.len()
                )));
            }
            let per_class = want / self.classes;
            let mut chosen = Vec::with_capacity(want);
            for class in 0..self.classes {
                let mut members: Vec<usize> = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l as usize == class)
                    .map(|(i, _)| i)
                    .collect();
                if members.len() < per_class {
                    return Err(Error::Config(format!(
                        "class {class} has only {} members, need {per_class}",
                        members.len()
                    )));
                }
                let mut rng =
                    ChaCha8Rng::seed_from_u64(seed ^ stream ^ ((class as u64) << 32));
                members.shuffle(&mut rng);
                chosen.extend_from_slice(&members[..per_class]);
            }
            chosen.sort_unstable();
            Ok(chosen)
        };
        let train_idx = pick(&self.train_labels, train, 0x1)?;
        let test_idx = pick(&self.test_labels, test, 0x2)?;

        let sz = self.image_size();
        let gather = |store: &ImageStore, idx: &[usize]| -> ImageStore {
            match store {
                ImageStore::RawU8(b) => {
                    let mut out = Vec::with_capacity(idx.len() * sz);
                    for &i in idx {
                        out.extend_from_slice(&b[i * sz..(i + 1) * sz]);
                    }
                    ImageStore::RawU8(out)
                }
                ImageStore::F32(d) => {
                    let mut out = Vec::with_capacity(idx.len() * sz);
                    for &i in idx {
                        out.extend_from_slice(&d[i * sz..(i + 1) * sz]);
                    }
                    ImageStore::F32(out)
                }
            }
        };
        Ok(DatasetHandle {
            source: self.source.clone(),
            classes: self.classes,
            resolution: self.resolution,
            subset: Some(SubsetSpec { seed, train, test }),
            train_images: gather(&self.train_images, &train_idx),
            train_labels: train_idx.iter().map(|&i| self.train_labels[i]).collect(),
            test_images: gather(&self.test_images, &test_idx),
            test_labels: test_idx.iter().map(|&i| self.test_labels[i]).collect(),
        })
    }
}

/// Reflect index i into [0, n) for pad-4 reflect padding.
fn reflect(i: isize, n: isize) -> usize {
    let r = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    r as usize
}

/// Pad-4 reflect + random 32x32-equivalent crop + horizontal flip p=0.5.
pub fn augment_in_place(batch: &mut Tensor, rng: &mut ChaCha8Rng) {
    const PAD: usize = 4;
    let (n, c, h, w) = batch.dims4();
    let mut scratch = vec![0.0f32; c * h * w];
    for ni in 0..n {
        let oy = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
        let ox = rng.gen_range(0..=2 * PAD) as isize - PAD as isize;
        let flip: bool = rng.gen_bool(0.5);
        let img = &mut batch.data_mut()[ni * c * h * w..(ni + 1) * c * h * w];
        scratch.copy_from_slice(img);
        for ch in 0..c {
            let src = &scratch[ch * h * w..(ch + 1) * h * w];
            let dst = &mut img[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                let sy = reflect(y as isize + oy, h as isize);
                for x in 0..w {
                    let sx0 = if flip { w - 1 - x } else { x };
                    let sx = reflect(sx0 as isize + ox, w as isize);
                    dst[y * w + x] = src[sy * w + sx];
                }
            }
        }
    }
}

/// Parse one CIFAR-10 binary batch file body into (labels, pixel bytes).
fn parse_cifar_batch(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let expected = CIFAR_RECORD * CIFAR_BATCH_RECORDS;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes ({CIFAR_BATCH_RECORDS} records of {CIFAR_RECORD}), got {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut labels = Vec::with_capacity(CIFAR_BATCH_RECORDS);
    let mut pixels = Vec::with_capacity(CIFAR_BATCH_RECORDS * CIFAR_PIXELS);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!(
                "{}: label {} out of range 0..=9",
                path.display(),
                rec[0]
            )));
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Load the six standard CIFAR-10 binary batch files from a directory.
pub fn load_cifar10(root: &Path) -> Result<DatasetHandle> {
    let mut train_labels = Vec::new();
    let mut train_pixels = Vec::new();
    for i in 1..=5 {
        let path = root.join(format!("data_batch_{i}.bin"));
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (l, p) = parse_cifar_batch(&bytes, &path)?;
        train_labels.extend(l);
        train_pixels.extend(p);
    }
    let test_path = root.join("test_batch.bin");
    let bytes = std::fs::read(&test_path)
        .map_err(|e| Error::Format(format!("{}: {e}", test_path.display())))?;
    let (test_labels, test_pixels) = parse_cifar_batch(&bytes, &test_path)?;
    Ok(DatasetHandle {
        source: DataSource::Cifar10 { root: root.to_path_buf() },
        classes: 10,
        resolution: 32,
        subset: None,
        train_images: ImageStore::RawU8(train_pixels),
        train_labels,
        test_images: ImageStore::RawU8(test_pixels),
        test_labels,
    })
}

/// Procedurally generated class-conditional images: each class is a fixed
/// arrangement of Gaussian blobs, jittered per image and buried in noise.
/// The test split holds per_class/5 images per class (at least one).
pub fn make_synthetic(
    classes: usize,
    per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<DatasetHandle> {
    if classes < 2 || per_class == 0 || resolution < 8 {
        return Err(Error::Config(format!(
            "synthetic dataset needs classes>=2, per_class>=1, resolution>=8; got {classes}/{per_class}/{resolution}"
        )));
    }
    struct Blob {
        cx: f32,
        cy: f32,
        sigma: f32,
        amp: [f32; 3],
    }
    let signatures: Vec<Vec<Blob>> = (0..classes)
        .map(|class| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(class as u64),
            );
            let r = resolution as f32;
            (0..3)
                .map(|_| Blob {
                    cx: rng.gen_range(0.2 * r..0.8 * r),
                    cy: rng.gen_range(0.2 * r..0.8 * r),
                    sigma: rng.gen_range(r / 10.0..r / 4.0),
                    amp: [
                        rng.gen_range(-1.2..1.2),
                        rng.gen_range(-1.2..1.2),
                        rng.gen_range(-1.2..1.2),
                    ],
                })
                .collect()
        })
        .collect();

    let plane = resolution * resolution;
    let render = |count_per_class: usize, stream: u64| -> (Vec<f32>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
        let mut images = Vec::with_capacity(classes * count_per_class * 3 * plane);
        let mut labels = Vec::with_capacity(classes * count_per_class);
        for class in 0..classes {
            for _ in 0..count_per_class {
                let jx: f32 = rng.gen_range(-2.0..2.0);
                let jy: f32 = rng.gen_range(-2.0..2.0);
                let gain: f32 = rng.gen_range(0.8..1.2);
                let mut img = vec![0.0f32; 3 * plane];
                for blob in &signatures[class] {
                    let (cx, cy) = (blob.cx + jx, blob.cy + jy);
                    let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
                    for y in 0..resolution {
                        let dy = y as f32 - cy;
                        for x in 0..resolution {
                            let dx = x as f32 - cx;
                            let e = (-(dx * dx + dy * dy) * inv).exp() * gain;
                            for ch in 0..3 {
                                img[ch * plane + y * resolution + x] += blob.amp[ch] * e;
                            }
                        }
                    }
                }
                for v in &mut img {
                    *v += rng.gen_range(-0.75..0.75);
                }
                images.extend_from_slice(&img);
                labels.push(class as u8);
            }
        }
        (images, labels)
    };

    let (train_images, train_labels) = render(per_class, 0x7E57_0001);
    let (test_images, test_labels) = render((per_class / 5).max(1), 0x7E57_0002);
    Ok(DatasetHandle {
        source: DataSource::Synthetic { seed },
        classes,
        resolution,
        subset: None,
        train_images: ImageStore::F32(train_images),
        train_labels,
        test_images: ImageStore::F32(test_images),
        test_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_bit_identical_for_same_seed() {
        let a = make_synthetic(10, 20, 16, 7).unwrap();
        let b = make_synthetic(10, 20, 16, 7).unwrap();
        let (ta, la) = a.batch(Split::Train, &[0, 5, 199]);
        let (tb, lb) = b.batch(Split::Train, &[0, 5, 199]);
        assert_eq!(ta.data(), tb.data());
        assert_eq!(la, lb);
        let c = make_synthetic(10, 20, 16, 8).unwrap();
        let (tc, _) = c.batch(Split::Train, &[0]);
        let (ta1, _) = a.batch(Split::Train, &[0]);
        assert_ne!(ta1.data(), tc.data());
    }

    #[test]
    fn synthetic_counts_and_labels() {
        let d = make_synthetic(10, 100, 16, 3).unwrap();
        assert_eq!(d.len(Split::Train), 1000);
        assert_eq!(d.len(Split::Test), 200);
        assert!((0..d.len(Split::Train)).all(|i| d.label(Split::Train, i) < 10));
    }

    #[test]
    fn cifar_format_arithmetic_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        // well-formed files: 10000 records of 3073 bytes
        let mut body = vec![0u8; CIFAR_RECORD * CIFAR_BATCH_RECORDS];
        for r in 0..CIFAR_BATCH_RECORDS {
            body[r * CIFAR_RECORD] = (r % 10) as u8;
        }
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), &body).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), &body).unwrap();
        let d = load_cifar10(dir.path()).unwrap();
        assert_eq!(d.len(Split::Train), 50000);
        assert_eq!(d.len(Split::Test), 10000);
        assert!(d.label(Split::Train, 0) <= 9);

        // truncated file -> format error naming the byte counts
        std::fs::write(dir.path().join("test_batch.bin"), &body[..1234]).unwrap();
        match load_cifar10(dir.path()) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains("30730000") && msg.contains("1234"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn cifar_rejects_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = vec![0u8; CIFAR_RECORD * CIFAR_BATCH_RECORDS];
        body[0] = 11;
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), &body).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), &body).unwrap();
        assert!(matches!(load_cifar10(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn subset_is_balanced_and_deterministic() {
        let d = make_synthetic(10, 50, 16, 1).unwrap();
        let s1 = d.subset(99, 100, 20).unwrap();
        let s2 = d.subset(99, 100, 20).unwrap();
        assert_eq!(s1.len(Split::Train), 100);
        assert_eq!(s1.len(Split::Test), 20);
        let counts = |h: &DatasetHandle| {
            let mut c = vec![0usize; 10];
            for i in 0..h.len(Split::Train) {
                c[h.label(Split::Train, i)] += 1;
            }
            c
        };
        assert!(counts(&s1).iter().all(|&c| c == 10));
        let (a, _) = s1.batch(Split::Train, &[3]);
        let (b, _) = s2.batch(Split::Train, &[3]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn augmentation_only_moves_pixels() {
        let d = make_synthetic(4, 10, 16, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (plain, _) = d.batch(Split::Train, &[0, 1]);
        let (aug, _) = d.augmented_batch(&[0, 1], &mut rng);
        assert_eq!(plain.shape(), aug.shape());
        // augmented pixels are a rearrangement-with-reflection; the value
        // multiset can change at borders but the extent never does
        assert!(aug.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 32), 1);
        assert_eq!(reflect(-4, 32), 4);
        assert_eq!(reflect(0, 32), 0);
        assert_eq!(reflect(31, 32), 31);
        assert_eq!(reflect(32, 32), 30);
        assert_eq!(reflect(35, 32), 27);
    }
}
