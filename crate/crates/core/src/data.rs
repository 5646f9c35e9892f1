//! Datasets: a synthetic class-pattern generator for controlled
//! experiments and a loader for the IDX binary image/label format.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::config::DatasetConfig;
use crate::error::{Error, Result};
use crate::rng::{self, StreamKey};
use crate::tensor::Tensor;

pub const PATTERN_SIZE: usize = 4;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// [N, C, S, S] images in [0, 1]-ish range.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the given sample indices into one contiguous batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let shape = self.images.shape();
        let sample_len: usize = shape[1..].iter().product();
        let data = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * sample_len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("batch", format!("sample index {i} out of range ({})", self.len())));
            }
            out.extend_from_slice(&data[i * sample_len..(i + 1) * sample_len]);
            labels.push(self.labels[i]);
        }
        let mut bshape = vec![indices.len()];
        bshape.extend_from_slice(&shape[1..]);
        Ok((Tensor::new(bshape, out)?, labels))
    }
}

/// Deterministic sample order for one epoch.
pub fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::shuffle_stream(seed, epoch);
    idx.shuffle(&mut rng);
    idx
}

/// Square-pattern position for a class on an `size`-pixel image.
fn class_position(class: usize, size: usize) -> Result<(usize, usize)> {
    let cells = size / PATTERN_SIZE;
    if cells == 0 {
        return Err(Error::invalid(
            "synthetic_dataset",
            format!("image size {size} cannot fit a {PATTERN_SIZE}x{PATTERN_SIZE} pattern"),
        ));
    }
    if class >= cells * cells {
        return Err(Error::invalid(
            "synthetic_dataset",
            format!("image size {size} fits only {} distinct class patterns", cells * cells),
        ));
    }
    Ok(((class / cells) * PATTERN_SIZE, (class % cells) * PATTERN_SIZE))
}

/// Class-conditional images: class k is a bright 4x4 square at a
/// class-determined grid cell (strongest in channel k mod 3) over a
/// dark background, plus Gaussian pixel noise. Returns (train, eval)
/// split 80/20 by the index rule `i % 5 == 4 -> eval`; labels are laid
/// out in contiguous class blocks so the split stays class-balanced.
pub fn generate_synthetic(
    num_classes: usize,
    samples_per_class: usize,
    image_size: usize,
    noise_sigma: f32,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if num_classes < 2 {
        return Err(Error::invalid("synthetic_dataset", "need at least 2 classes"));
    }
    class_position(num_classes - 1, image_size)?;

    let channels = 3usize;
    let sample_len = channels * image_size * image_size;
    let n = num_classes * samples_per_class;
    let mut images = vec![0.0f32; n * sample_len];
    let mut labels = vec![0usize; n];

    for i in 0..n {
        let class = i / samples_per_class;
        labels[i] = class;
        let (r0, c0) = class_position(class, image_size)?;
        let img = &mut images[i * sample_len..(i + 1) * sample_len];
        for ch in 0..channels {
            let level = if ch == class % channels { 1.0 } else { 0.6 };
            for r in r0..r0 + PATTERN_SIZE {
                for c in c0..c0 + PATTERN_SIZE {
                    img[(ch * image_size + r) * image_size + c] = level;
                }
            }
        }
        if noise_sigma > 0.0 {
            // Per-sample stream: the dataset is identical regardless of
            // generation order or batching.
            let mut rng = rng::stream(seed, StreamKey::with("synthetic-sample", i as u64, 0, 0));
            for v in img.iter_mut() {
                *v += (rng::standard_normal(&mut rng) as f32) * noise_sigma;
            }
        }
    }

    let all = Dataset {
        images: Tensor::new(vec![n, channels, image_size, image_size], images)?,
        labels,
        num_classes,
    };
    split_80_20(&all)
}

/// Index-rule split: every fifth sample (i % 5 == 4) goes to eval.
pub fn split_80_20(ds: &Dataset) -> Result<(Dataset, Dataset)> {
    let train_idx: Vec<usize> = (0..ds.len()).filter(|i| i % 5 != 4).collect();
    let eval_idx: Vec<usize> = (0..ds.len()).filter(|i| i % 5 == 4).collect();
    if train_idx.is_empty() || eval_idx.is_empty() {
        return Err(Error::invalid("split", format!("{} samples is too few for an 80/20 split", ds.len())));
    }
    let (ti, tl) = ds.batch(&train_idx)?;
    let (ei, el) = ds.batch(&eval_idx)?;
    Ok((
        Dataset { images: ti, labels: tl, num_classes: ds.num_classes },
        Dataset { images: ei, labels: el, num_classes: ds.num_classes },
    ))
}

/// Builds the dataset a config describes.
pub fn load(config: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    match config {
        DatasetConfig::Synthetic { num_classes, samples_per_class, image_size, noise_sigma, seed } => {
            generate_synthetic(*num_classes, *samples_per_class, *image_size, *noise_sigma, *seed)
        }
        DatasetConfig::Idx { images, labels } => {
            let all = load_idx(images, labels)?;
            split_80_20(&all)
        }
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            needed: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parses an IDX image/label file pair (big-endian magic + dims +
/// unsigned bytes); pixels are scaled to [0, 1] and emitted as
/// single-channel [N, 1, H, W] images.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let lbl_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let magic = be_u32(images_path, &img_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images_path.display().to_string(),
            expected: IDX_IMAGES_MAGIC,
            got: magic,
        });
    }
    let n = be_u32(images_path, &img_bytes, 4)? as usize;
    let h = be_u32(images_path, &img_bytes, 8)? as usize;
    let w = be_u32(images_path, &img_bytes, 12)? as usize;
    let needed = 16 + n * h * w;
    if img_bytes.len() < needed {
        return Err(Error::Truncated {
            path: images_path.display().to_string(),
            needed,
            got: img_bytes.len(),
        });
    }

    let magic = be_u32(labels_path, &lbl_bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels_path.display().to_string(),
            expected: IDX_LABELS_MAGIC,
            got: magic,
        });
    }
    let n_labels = be_u32(labels_path, &lbl_bytes, 4)? as usize;
    let needed = 8 + n_labels;
    if lbl_bytes.len() < needed {
        return Err(Error::Truncated {
            path: labels_path.display().to_string(),
            needed,
            got: lbl_bytes.len(),
        });
    }
    if n != n_labels {
        return Err(Error::CountMismatch { images: n, labels: n_labels });
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::invalid("load_idx", "empty dataset"));
    }

    let pixels: Vec<f32> = img_bytes[16..16 + n * h * w].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], pixels)?,
        labels,
        num_classes,
    })
}
