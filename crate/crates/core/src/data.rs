//! Deterministic synthetic dataset generation and IDX ingestion.
//!
//! The synthetic set renders anti-aliased geometric glyphs (five shapes,
//! solid or outlined stroke) with seeded jitter in position, scale,
//! rotation, and intensity. It is the desk-scale stand-in for a natural
//! image corpus: small enough to train classifiers from scratch in
//! seconds, structured enough that transfer between topologies is
//! non-trivial.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::checkpoint::{ArchDescriptor, Checkpoint, TrainMeta};
use crate::error::{Error, Result};
use crate::rng::{shuffled_indices, uniform_in, RngStream};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const MAX_SYNTH_CLASSES: usize = 10;

/// Labeled image collection, pixels in `[0, 255]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Shape `[count, channels, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Content hash over images and labels; stable under regeneration
    /// with the same seed.
    pub dataset_id: String,
}

fn content_hash(images: &Tensor, labels: &[usize], num_classes: usize) -> String {
    let mut h = Sha256::new();
    h.update((num_classes as u64).to_le_bytes());
    for d in images.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in images.data() {
        h.update(v.to_le_bytes());
    }
    for &l in labels {
        h.update((l as u64).to_le_bytes());
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        if images.shape().len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "dataset images must be [count, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if images
            .data()
            .iter()
            .any(|&v| !(crate::PIXEL_MIN..=crate::PIXEL_MAX).contains(&v))
        {
            return Err(Error::InvalidArgument(
                "dataset pixels must lie in [0, 255]".into(),
            ));
        }
        let dataset_id = content_hash(&images, &labels, num_classes);
        Ok(Dataset {
            images,
            labels,
            num_classes,
            dataset_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of a single image: `[C, H, W]`.
    pub fn image_shape(&self) -> Vec<usize> {
        self.images.shape()[1..].to_vec()
    }

    /// Copy of the i-th image as a `[C, H, W]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let shape = self.image_shape();
        let n: usize = shape.iter().product();
        Tensor::new(shape, self.images.data()[i * n..(i + 1) * n].to_vec()).expect("image slice")
    }

    /// All images as individual tensors.
    pub fn image_vec(&self) -> Vec<Tensor> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    /// Dataset subset in index order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let shape = self.image_shape();
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
            labels.push(self.labels[i]);
        }
        let mut full = vec![indices.len()];
        full.extend_from_slice(&shape);
        Dataset::new(Tensor::new(full, data)?, labels, self.num_classes)
    }

    /// Export in the checkpoint container format (labels stored widened
    /// to f32; exact for any realistic class count).
    pub fn save(&self, path: &Path) -> Result<()> {
        let labels = Tensor::new(
            vec![self.labels.len()],
            self.labels.iter().map(|&l| l as f32).collect(),
        )?;
        Checkpoint {
            descriptor: ArchDescriptor::Dataset {
                num_classes: self.num_classes,
                shape: self.images.shape().to_vec(),
            },
            tensors: vec![
                ("images".into(), self.images.clone()),
                ("labels".into(), labels),
            ],
            metadata: TrainMeta {
                seed: None,
                epochs: None,
                dataset_id: Some(self.dataset_id.clone()),
            },
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let ckpt = Checkpoint::load(path)?;
        let num_classes = match ckpt.descriptor {
            ArchDescriptor::Dataset { num_classes, .. } => num_classes,
            ref other => {
                return Err(Error::KindMismatch {
                    expected: "dataset".into(),
                    found: other.kind().into(),
                })
            }
        };
        let images = ckpt
            .tensor("images")
            .ok_or_else(|| Error::CorruptHeader("dataset container missing 'images'".into()))?
            .clone();
        let labels = ckpt
            .tensor("labels")
            .ok_or_else(|| Error::CorruptHeader("dataset container missing 'labels'".into()))?
            .data()
            .iter()
            .map(|&v| v as usize)
            .collect();
        let ds = Dataset::new(images, labels, num_classes)?;
        if let Some(stored) = ckpt.metadata.dataset_id {
            if stored != ds.dataset_id {
                return Err(Error::CorruptHeader(format!(
                    "dataset content hash mismatch: stored {stored}, recomputed {}",
                    ds.dataset_id
                )));
            }
        }
        Ok(ds)
    }
}

// ── Synthetic renderer ──────────────────────────────────────────────────

/// Signed distance to the glyph boundary, in pixels, local coords already
/// rotated and centered. Negative inside.
fn shape_sdf(shape: usize, u: f32, v: f32, r: f32) -> f32 {
    match shape {
        // ring/disk
        0 => (u * u + v * v).sqrt() - r,
        // square
        1 => u.abs().max(v.abs()) - 0.82 * r,
        // diamond
        2 => (u.abs() + v.abs()) * std::f32::consts::FRAC_1_SQRT_2 - 0.9 * r,
        // cross
        3 => {
            let arm = 0.38 * r;
            let horiz = (v.abs() - arm).max(u.abs() - r);
            let vert = (u.abs() - arm).max(v.abs() - r);
            horiz.min(vert)
        }
        // triangle (equilateral, pointing up)
        _ => {
            let k = 3.0f32.sqrt();
            let d1 = v - 0.5 * r;
            let d2 = (k * u - v) * 0.5 - 0.5 * r;
            let d3 = (-k * u - v) * 0.5 - 0.5 * r;
            d1.max(d2).max(d3)
        }
    }
}

/// Procedurally rendered grayscale glyph dataset. Class identity is
/// (shape type, stroke pattern); images carry seeded jitter in position,
/// scale, rotation, and intensity plus light pixel noise.
pub fn synth_dataset(seed: u64, count: usize, num_classes: usize, side: usize) -> Result<Dataset> {
    if num_classes < 2 || num_classes > MAX_SYNTH_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "num_classes must lie in [2, {MAX_SYNTH_CLASSES}], got {num_classes}"
        )));
    }
    if count < num_classes {
        return Err(Error::InvalidArgument(format!(
            "count {count} must be >= num_classes {num_classes}"
        )));
    }
    if side < 16 {
        return Err(Error::InvalidArgument(format!(
            "side must be >= 16, got {side}"
        )));
    }

    let stream = RngStream::new(seed);
    let mut data = Vec::with_capacity(count * side * side);
    let mut labels = Vec::with_capacity(count);
    let s = side as f32;

    for i in 0..count {
        let class = i % num_classes;
        labels.push(class);
        let shape = class % 5;
        let outlined = (class / 5) % 2 == 1;

        let mut rng = stream.rng_at(i as u64);
        let cx = s * 0.5 + uniform_in(&mut rng, -0.12, 0.12) * s;
        let cy = s * 0.5 + uniform_in(&mut rng, -0.12, 0.12) * s;
        let radius = uniform_in(&mut rng, 0.26, 0.38) * s;
        let rot = uniform_in(&mut rng, -0.4, 0.4);
        let fg = uniform_in(&mut rng, 190.0, 255.0);
        let (sin, cos) = rot.sin_cos();
        let stroke = (0.10 * radius).max(1.4);
        let aa = 1.2;

        for py in 0..side {
            for px in 0..side {
                let dx = px as f32 + 0.5 - cx;
                let dy = py as f32 + 0.5 - cy;
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                let d = shape_sdf(shape, u, v, radius);
                let d = if outlined { d.abs() - stroke } else { d };
                let coverage = (0.5 - d / aa).clamp(0.0, 1.0);
                let noise = uniform_in(&mut rng, 0.0, 14.0);
                data.push((coverage * fg + noise).clamp(crate::PIXEL_MIN, crate::PIXEL_MAX));
            }
        }
    }

    Dataset::new(
        Tensor::new(vec![count, 1, side, side], data)?,
        labels,
        num_classes,
    )
}

// ── IDX ingestion ───────────────────────────────────────────────────────

fn read_be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::CorruptHeader(format!("{path}: truncated at byte {offset}")))
}

/// Parse big-endian IDX image/label file pairs; pixels widen to f32 on
/// `[0, 255]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes =
        fs::read(images_path).map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let lbl_bytes =
        fs::read(labels_path).map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let ip = images_path.display().to_string();
    let lp = labels_path.display().to_string();

    let magic = read_be_u32(&img_bytes, 0, &ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::WrongMagic {
            path: ip,
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_be_u32(&img_bytes, 4, &ip)? as usize;
    let rows = read_be_u32(&img_bytes, 8, &ip)? as usize;
    let cols = read_be_u32(&img_bytes, 12, &ip)? as usize;
    let need = 16 + count * rows * cols;
    if img_bytes.len() < need {
        return Err(Error::TruncatedBlob {
            name: ip,
            needed: need,
            available: img_bytes.len(),
        });
    }

    let magic = read_be_u32(&lbl_bytes, 0, &lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::WrongMagic {
            path: lp,
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let lbl_count = read_be_u32(&lbl_bytes, 4, &lp)? as usize;
    if lbl_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: lbl_count,
        });
    }
    if lbl_bytes.len() < 8 + count {
        return Err(Error::TruncatedBlob {
            name: lp,
            needed: 8 + count,
            available: lbl_bytes.len(),
        });
    }

    let data: Vec<f32> = img_bytes[16..need].iter().map(|&b| b as f32).collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + count].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(
        Tensor::new(vec![count, 1, rows, cols], data)?,
        labels,
        num_classes.max(2),
    )
}

/// Seeded shuffle-then-split into disjoint train/eval halves.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie strictly in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let mut rng = RngStream::new(seed).next_rng();
    let idx = shuffled_indices(&mut rng, n);
    let train = dataset.subset(&idx[..n_train])?;
    let eval = dataset.subset(&idx[n_train..])?;
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset_id() {
        let a = synth_dataset(7, 40, 10, 16).unwrap();
        let b = synth_dataset(7, 40, 10, 16).unwrap();
        assert_eq!(a.dataset_id, b.dataset_id);
        let c = synth_dataset(8, 40, 10, 16).unwrap();
        assert_ne!(a.dataset_id, c.dataset_id);
    }

    #[test]
    fn round_robin_gives_one_image_per_class() {
        let ds = synth_dataset(1, 10, 10, 16).unwrap();
        let mut seen = vec![0usize; 10];
        for &l in &ds.labels {
            seen[l] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1), "{seen:?}");
    }

    #[test]
    fn pixels_stay_in_range() {
        let ds = synth_dataset(2, 30, 10, 20).unwrap();
        assert!(ds
            .images
            .data()
            .iter()
            .all(|&v| (0.0..=255.0).contains(&v)));
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(synth_dataset(1, 5, 10, 16).is_err()); // count < classes
        assert!(synth_dataset(1, 20, 1, 16).is_err()); // too few classes
        assert!(synth_dataset(1, 20, 11, 16).is_err()); // too many classes
        assert!(synth_dataset(1, 20, 10, 8).is_err()); // side too small
    }

    #[test]
    fn idx_fixture_roundtrips_known_bytes() {
        // two 2x3 images and two labels, built byte by byte
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lbl_path = dir.path().join("lbls.idx");

        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&3u32.to_be_bytes());
        img.extend_from_slice(&[0, 128, 255, 1, 2, 3, 10, 20, 30, 40, 50, 60]);
        fs::write(&img_path, &img).unwrap();

        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&2u32.to_be_bytes());
        lbl.extend_from_slice(&[7, 3]);
        fs::write(&lbl_path, &lbl).unwrap();

        let ds = load_idx(&img_path, &lbl_path).unwrap();
        assert_eq!(ds.images.shape(), &[2, 1, 2, 3]);
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(
            ds.images.data(),
            &[0.0, 128.0, 255.0, 1.0, 2.0, 3.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0]
        );
    }

    #[test]
    fn idx_wrong_magic_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("imgs.idx");
        let lbl_path = dir.path().join("lbls.idx");

        // label magic in the image slot
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.push(0);
        fs::write(&img_path, &img).unwrap();
        let mut lbl = Vec::new();
        lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lbl.extend_from_slice(&1u32.to_be_bytes());
        lbl.push(0);
        fs::write(&lbl_path, &lbl).unwrap();
        let err = load_idx(&img_path, &lbl_path).unwrap_err();
        assert!(matches!(err, Error::WrongMagic { .. }), "{err:?}");

        // count mismatch
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&1u32.to_be_bytes());
        img.extend_from_slice(&[0, 0]);
        fs::write(&img_path, &img).unwrap();
        let err = load_idx(&img_path, &lbl_path).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { images: 2, labels: 1 }), "{err:?}");
    }

    #[test]
    fn split_is_seeded_disjoint_and_complete() {
        let ds = synth_dataset(3, 100, 10, 16).unwrap();
        let (tr1, ev1) = split(&ds, 0.5, 9).unwrap();
        let (tr2, _) = split(&ds, 0.5, 9).unwrap();
        assert_eq!(tr1.len(), 50);
        assert_eq!(ev1.len(), 50);
        assert_eq!(tr1.dataset_id, tr2.dataset_id);

        // union preserves the multiset of (image, label) pairs
        let key = |ds: &Dataset, i: usize| {
            let img = ds.image(i);
            let mut bits: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
            bits.push(ds.labels[i] as u32);
            bits
        };
        let mut all: Vec<Vec<u32>> = (0..tr1.len())
            .map(|i| key(&tr1, i))
            .chain((0..ev1.len()).map(|i| key(&ev1, i)))
            .collect();
        let mut orig: Vec<Vec<u32>> = (0..ds.len()).map(|i| key(&ds, i)).collect();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_rejects_degenerate_fractions() {
        let ds = synth_dataset(4, 20, 10, 16).unwrap();
        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn dataset_container_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = synth_dataset(5, 24, 10, 16).unwrap();
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.dataset_id, ds.dataset_id);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.images.data(), ds.images.data());
    }
}
