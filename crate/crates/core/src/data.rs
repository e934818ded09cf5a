//! CIFAR-10 binary ingestion, normalization, deterministic batching, and a
//! synthetic blob dataset for fast end-to-end tests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_IMAGE_BYTES: usize = 3072;
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_SIDE: usize = 32;

/// Images (N x 3 x H x W, values scaled to [0,1] at load) plus labels.
#[derive(Debug, Clone)]
pub struct LabeledImageSet<E: Element> {
    pub images: Tensor<E>,
    pub labels: Vec<u8>,
}

impl<E: Element> LabeledImageSet<E> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gather a batch by index list.
    pub fn select(&self, indices: &[u32]) -> (Tensor<E>, Vec<u8>) {
        let (c, h, w) = self.image_dims();
        let img_len = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * img_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let i = i as usize;
            data.extend_from_slice(&self.images.data()[i * img_len..(i + 1) * img_len]);
            labels.push(self.labels[i]);
        }
        let batch = Tensor::from_vec(&[indices.len(), c, h, w], data).expect("gathered batch");
        (batch, labels)
    }

    /// Fixed-seed shuffle followed by truncation to `size` records.
    pub fn subset(&self, size: usize, seed: u64) -> LabeledImageSet<E> {
        let n = self.len();
        if size >= n {
            return self.clone();
        }
        let mut indices: Vec<u32> = (0..n as u32).collect();
        SeededRng::new(seed).derive("subset").shuffle(&mut indices);
        indices.truncate(size);
        let (images, labels) = self.select(&indices);
        LabeledImageSet { images, labels }
    }
}

/// Parse one CIFAR-10 binary batch file: records of 3073 bytes, one label
/// byte then 3072 pixel bytes (three 1024-byte channel planes, row-major).
pub fn load_cifar10_batchfile<E: Element>(path: &Path) -> Result<LabeledImageSet<E>> {
    let bytes = std::fs::read(path)?;
    parse_cifar10_bytes(&bytes)
}

/// Parse CIFAR-10 records from raw bytes (see [`load_cifar10_batchfile`]).
pub fn parse_cifar10_bytes<E: Element>(bytes: &[u8]) -> Result<LabeledImageSet<E>> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::data(format!(
            "truncated batch file: {} bytes is not a positive multiple of {CIFAR_RECORD_BYTES}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_IMAGE_BYTES);
    let scale = 1.0 / 255.0;
    for rec in 0..n {
        let base = rec * CIFAR_RECORD_BYTES;
        let label = bytes[base];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::data(format!(
                "label byte {label} out of range [0,9] in record {rec}"
            )));
        }
        labels.push(label);
        for &b in &bytes[base + 1..base + CIFAR_RECORD_BYTES] {
            data.push(E::from_f64(b as f64 * scale));
        }
    }
    Ok(LabeledImageSet {
        images: Tensor::from_vec(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
    })
}

/// Load the standard five training batch files and the test batch.
pub fn load_cifar10_dir<E: Element>(
    dir: &Path,
) -> Result<(LabeledImageSet<E>, LabeledImageSet<E>)> {
    let mut data: Vec<E> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for i in 1..=5 {
        let part = load_cifar10_batchfile::<E>(&dir.join(format!("data_batch_{i}.bin")))?;
        data.extend_from_slice(part.images.data());
        labels.extend_from_slice(&part.labels);
    }
    let train = LabeledImageSet {
        images: Tensor::from_vec(&[labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
    };
    let test = load_cifar10_batchfile(&dir.join("test_batch.bin"))?;
    Ok((train, test))
}

/// Per-channel standardization statistics, persisted in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standardize images per channel: `x <- (x - mean_c) / std_c`.
///
/// With `stats: None` the statistics are computed from this set (the
/// training split) and returned for reuse on other splits.
pub fn normalize_images<E: Element>(
    set: &mut LabeledImageSet<E>,
    stats: Option<&ChannelStats>,
) -> Result<ChannelStats> {
    let (n, c, h, w) = set.images.dims4()?;
    let stats = match stats {
        Some(s) => {
            if s.mean.len() != c || s.std.len() != c {
                return Err(Error::data(format!(
                    "stats carry {} channels, images have {c}",
                    s.mean.len()
                )));
            }
            s.clone()
        }
        None => {
            let plane = h * w;
            let count = (n * plane) as f64;
            let mut mean = vec![0.0f64; c];
            let mut std = vec![0.0f64; c];
            for ch in 0..c {
                let mut sum = 0.0f64;
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for &v in &set.images.data()[base..base + plane] {
                        sum += v.to_f64();
                    }
                }
                mean[ch] = sum / count;
                let mut acc = 0.0f64;
                for img in 0..n {
                    let base = (img * c + ch) * plane;
                    for &v in &set.images.data()[base..base + plane] {
                        let d = v.to_f64() - mean[ch];
                        acc += d * d;
                    }
                }
                std[ch] = (acc / count).sqrt();
            }
            ChannelStats { mean, std }
        }
    };
    // A (numerically) constant channel cannot be standardized.
    if stats.std.iter().any(|&s| !s.is_finite() || s < 1e-9) {
        return Err(Error::numeric(format!(
            "zero per-channel std {:?}: cannot standardize",
            stats.std
        )));
    }
    let plane = h * w;
    for ch in 0..c {
        let m = E::from_f64(stats.mean[ch]);
        let inv = E::from_f64(1.0 / stats.std[ch]);
        for img in 0..n {
            let base = (img * c + ch) * plane;
            for v in &mut set.images.data_mut()[base..base + plane] {
                *v = (*v - m) * inv;
            }
        }
    }
    Ok(stats)
}

/// Batching policy.
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub drop_last: bool,
}

/// Deterministic epoch batching: a permutation seeded by (seed, epoch),
/// split into `batch_size` chunks.
pub fn make_minibatches(n: usize, plan: &BatchPlan, epoch: u64) -> Vec<Vec<u32>> {
    let mut indices: Vec<u32> = (0..n as u32).collect();
    let mut rng = SeededRng::new(plan.seed).derive_indexed("shuffle", epoch);
    rng.shuffle(&mut indices);
    let mut batches = Vec::new();
    let mut i = 0;
    while i < n {
        let end = (i + plan.batch_size).min(n);
        if end - i < plan.batch_size && plan.drop_last {
            break;
        }
        batches.push(indices[i..end].to_vec());
        i = end;
    }
    batches
}

/// Synthetic dataset: `classes` Gaussian-blob prototypes at distinct image
/// positions and channel amplitudes, plus per-pixel noise. Linearly
/// separable at zero noise, which makes full-pipeline smoke runs fast.
pub fn synth_dataset<E: Element>(
    classes: usize,
    per_class: usize,
    size: usize,
    noise: f64,
    rng: &mut SeededRng,
) -> Result<LabeledImageSet<E>> {
    if classes < 2 {
        return Err(Error::config("synthetic dataset needs at least 2 classes"));
    }
    let channels = 3usize;
    let mut proto = vec![0.0f64; classes * channels * size * size];
    let sigma = size as f64 / 6.0;
    for cls in 0..classes {
        let angle = std::f64::consts::TAU * cls as f64 / classes as f64;
        let r = size as f64 / 4.0;
        let cx = size as f64 / 2.0 + r * angle.cos();
        let cy = size as f64 / 2.0 + r * angle.sin();
        let amp: Vec<f64> = (0..channels).map(|_| 0.3 + 0.5 * rng.uniform_f64()).collect();
        for ch in 0..channels {
            for y in 0..size {
                for x in 0..size {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    proto[((cls * channels + ch) * size + y) * size + x] =
                        amp[ch] * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    let n = classes * per_class;
    let img_len = channels * size * size;
    let mut data = Vec::with_capacity(n * img_len);
    let mut labels = Vec::with_capacity(n);
    for cls in 0..classes {
        for _ in 0..per_class {
            labels.push(cls as u8);
            let base = cls * img_len;
            for i in 0..img_len {
                let v = proto[base + i] + noise * rng.normal_f64();
                data.push(E::from_f64(v.clamp(0.0, 1.0)));
            }
        }
    }
    Ok(LabeledImageSet {
        images: Tensor::from_vec(&[n, channels, size, size], data)?,
        labels,
    })
}

/// Random horizontal flip plus 4-pixel pad-and-crop, applied per image.
/// Off by default in every reproduction config.
pub fn augment_batch<E: Element>(batch: &Tensor<E>, rng: &mut SeededRng) -> Result<Tensor<E>> {
    let (b, c, h, w) = batch.dims4()?;
    let pad = 4usize;
    let mut out = Tensor::zeros(batch.shape());
    for img in 0..b {
        let flip = rng.uniform_below(2) == 1;
        let dy = rng.uniform_below(2 * pad as u64 + 1) as isize - pad as isize;
        let dx = rng.uniform_below(2 * pad as u64 + 1) as isize - pad as isize;
        for ch in 0..c {
            let src_base = (img * c + ch) * h * w;
            let dst_base = src_base;
            for y in 0..h {
                let sy = y as isize + dy;
                for x in 0..w {
                    let sx0 = if flip { w - 1 - x } else { x };
                    let sx = sx0 as isize + dx;
                    let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        batch.data()[src_base + sy as usize * w + sx as usize]
                    } else {
                        E::ZERO
                    };
                    out.data_mut()[dst_base + y * w + x] = v;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend(std::iter::repeat(fill).take(CIFAR_IMAGE_BYTES));
        r
    }

    #[test]
    fn parses_hand_built_record() {
        let set = parse_cifar10_bytes::<f64>(&record(3, 255)).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.labels, vec![3]);
        assert!(set.images.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_truncated_file() {
        let bytes = vec![0u8; CIFAR_IMAGE_BYTES]; // one byte short
        let err = parse_cifar10_bytes::<f32>(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_bad_label() {
        let err = parse_cifar10_bytes::<f32>(&record(10, 0)).unwrap_err();
        assert!(err.to_string().contains("label"), "{err}");
    }

    #[test]
    fn reparse_is_bitwise_deterministic() {
        let mut bytes = Vec::new();
        for i in 0..5 {
            bytes.extend(record(i % 10, i.wrapping_mul(37)));
        }
        let a = parse_cifar10_bytes::<f32>(&bytes).unwrap();
        let b = parse_cifar10_bytes::<f32>(&bytes).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn identity_stats_do_nothing() {
        let mut set = parse_cifar10_bytes::<f64>(&record(1, 128)).unwrap();
        let before = set.images.clone();
        let stats = ChannelStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        normalize_images(&mut set, Some(&stats)).unwrap();
        assert!(set.images.bit_eq(&before));
    }

    #[test]
    fn constant_set_yields_zero_std_error() {
        let mut set = LabeledImageSet {
            images: Tensor::<f64>::full(&[2, 3, 4, 4], 0.5),
            labels: vec![0, 1],
        };
        assert!(matches!(
            normalize_images(&mut set, None),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn computed_stats_standardize() {
        let mut rng = SeededRng::new(7);
        let mut set = synth_dataset::<f64>(4, 32, 8, 0.3, &mut rng).unwrap();
        let stats = normalize_images(&mut set, None).unwrap();
        // Post-hoc moments: mean ~ 0, std ~ 1.
        let (n, c, h, w) = set.images.dims4().unwrap();
        let plane = h * w;
        for ch in 0..c {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for &v in &set.images.data()[base..base + plane] {
                    sum += v;
                    sq += v * v;
                }
            }
            let count = (n * plane) as f64;
            let mean = sum / count;
            let std = (sq / count - mean * mean).sqrt();
            assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
            assert!((std - 1.0).abs() < 1e-4, "channel {ch} std {std}");
        }
        // Invertibility given the persisted stats.
        let mut rng2 = SeededRng::new(7);
        let original = synth_dataset::<f64>(4, 32, 8, 0.3, &mut rng2).unwrap();
        for ch in 0..c {
            for img in 0..n {
                let base = (img * c + ch) * plane;
                for (i, &v) in set.images.data()[base..base + plane].iter().enumerate() {
                    let reconstructed = v * stats.std[ch] + stats.mean[ch];
                    let orig = original.images.data()[base + i];
                    assert!((reconstructed - orig).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn batching_covers_exactly_once() {
        let plan = BatchPlan {
            batch_size: 128,
            seed: 1,
            drop_last: false,
        };
        let batches = make_minibatches(256, &plan, 0);
        assert_eq!(batches.len(), 2);
        let mut seen: Vec<u32> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..256).collect::<Vec<_>>());
    }

    #[test]
    fn batching_is_deterministic_per_epoch() {
        let plan = BatchPlan {
            batch_size: 32,
            seed: 9,
            drop_last: true,
        };
        assert_eq!(make_minibatches(100, &plan, 3), make_minibatches(100, &plan, 3));
        assert_ne!(make_minibatches(100, &plan, 3), make_minibatches(100, &plan, 4));
    }

    #[test]
    fn ragged_tail_handling() {
        let mut plan = BatchPlan {
            batch_size: 128,
            seed: 1,
            drop_last: true,
        };
        assert_eq!(make_minibatches(130, &plan, 0).len(), 1);
        plan.drop_last = false;
        let batches = make_minibatches(130, &plan, 0);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 128);
        assert_eq!(batches[1].len(), 2);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let make = || {
            let mut rng = SeededRng::new(11);
            synth_dataset::<f32>(5, 7, 12, 0.2, &mut rng).unwrap()
        };
        let a = make();
        let b = make();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        let mut hist = [0usize; 5];
        for &l in &a.labels {
            hist[l as usize] += 1;
        }
        assert!(hist.iter().all(|&c| c == 7));
    }

    #[test]
    fn subset_is_seed_stable() {
        let mut rng = SeededRng::new(13);
        let set = synth_dataset::<f32>(4, 25, 8, 0.1, &mut rng).unwrap();
        let a = set.subset(40, 5);
        let b = set.subset(40, 5);
        assert_eq!(a.len(), 40);
        assert!(a.images.bit_eq(&b.images));
    }
}
