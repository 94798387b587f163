//! Dataset ingestion: IDX files (big-endian, standard magic numbers) and a
//! seed-deterministic synthetic 10-class generator.

use crate::rng::{self, standard_normal, stream};
use std::io::Read;
use std::path::Path;
use thiserror::Error;

/// IDX magic for a 3-dimensional unsigned-byte tensor (images).
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// IDX magic for a 1-dimensional unsigned-byte tensor (labels).
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad IDX magic {got:#010x}, expected {expected:#010x}")]
    BadMagic { got: u32, expected: u32 },
    #[error("IDX file truncated: expected {expected} bytes of payload, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

/// A labeled set of single-channel byte images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `count * h * w` bytes, row-major per image.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub count: usize,
    pub h: usize,
    pub w: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn image(&self, i: usize) -> &[u8] {
        let len = self.h * self.w;
        &self.images[i * len..(i + 1) * len]
    }

    pub fn image_refs(&self) -> Vec<&[u8]> {
        (0..self.count).map(|i| self.image(i)).collect()
    }

    /// Split off the first `head` samples; the remainder becomes the
    /// second set. Used to carve train/test out of one generated pool.
    pub fn split(self, head: usize) -> (Dataset, Dataset) {
        assert!(head <= self.count);
        let len = self.h * self.w;
        let (img_a, img_b) = self.images.split_at(head * len);
        let (lab_a, lab_b) = self.labels.split_at(head);
        (
            Dataset {
                images: img_a.to_vec(),
                labels: lab_a.to_vec(),
                count: head,
                h: self.h,
                w: self.w,
                classes: self.classes,
            },
            Dataset {
                images: img_b.to_vec(),
                labels: lab_b.to_vec(),
                count: self.count - head,
                h: self.h,
                w: self.w,
                classes: self.classes,
            },
        )
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(bytes)
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32, DatasetError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DatasetError::Truncated {
            expected: offset + 4,
            got: bytes.len(),
        })
}

/// Parse an IDX image file: magic 0x00000803, then count/rows/cols as
/// big-endian u32, then `count * rows * cols` unsigned bytes.
pub fn load_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize), DatasetError> {
    let bytes = read_file(path)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::BadMagic {
            got: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_u32_be(&bytes, 4)? as usize;
    let rows = read_u32_be(&bytes, 8)? as usize;
    let cols = read_u32_be(&bytes, 12)? as usize;
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    Ok((payload[..expected].to_vec(), count, rows, cols))
}

/// Parse an IDX label file: magic 0x00000801, count, then bytes.
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>, DatasetError> {
    let bytes = read_file(path)?;
    let magic = read_u32_be(&bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DatasetError::BadMagic {
            got: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let count = read_u32_be(&bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(DatasetError::Truncated {
            expected: count,
            got: payload.len(),
        });
    }
    Ok(payload[..count].to_vec())
}

/// Load a paired image/label set.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DatasetError> {
    let (images, count, h, w) = load_idx_images(images_path)?;
    let labels = load_idx_labels(labels_path)?;
    if labels.len() != count {
        return Err(DatasetError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    Ok(Dataset {
        images,
        labels,
        count,
        h,
        w,
        classes,
    })
}

/// Generate a synthetic 28x28 dataset: one random prototype image per
/// class, samples are the prototype plus Gaussian pixel noise, labels
/// cycle through the classes. Fully determined by the seed.
pub fn generate_synthetic(seed: u64, classes: usize, count: usize) -> Dataset {
    const H: usize = 28;
    const W: usize = 28;
    const NOISE_SIGMA: f64 = 80.0;
    assert!(classes > 0 && classes <= 256);

    let mut proto_rng = rng::seeded(seed, stream::SYNTH_PROTO);
    let protos: Vec<Vec<u8>> = (0..classes)
        .map(|_| {
            (0..H * W)
                .map(|_| rng::draw_below(&mut proto_rng, 256) as u8)
                .collect()
        })
        .collect();

    let mut sample_rng = rng::seeded(seed, stream::SYNTH_SAMPLE);
    let mut images = Vec::with_capacity(count * H * W);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % classes;
        labels.push(class as u8);
        for &px in &protos[class] {
            let noisy = px as f64 + standard_normal(&mut sample_rng) * NOISE_SIGMA;
            images.push(noisy.round().clamp(0.0, 255.0) as u8);
        }
    }
    Dataset {
        images,
        labels,
        count,
        h: H,
        w: W,
        classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, count: u32, rows: u32, cols: u32, payload: &[u8]) {
        let mut f = std::fs::File::create(path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&count.to_be_bytes()).unwrap();
        f.write_all(&rows.to_be_bytes()).unwrap();
        f.write_all(&cols.to_be_bytes()).unwrap();
        f.write_all(payload).unwrap();
    }

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("images.idx");
        let lab_path = dir.path().join("labels.idx");
        let payload: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8).collect();
        write_idx_images(&img_path, 2, 3, 3, &payload);
        let mut f = std::fs::File::create(&lab_path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&2u32.to_be_bytes()).unwrap();
        f.write_all(&[1, 0]).unwrap();
        drop(f);

        let ds = load_idx(&img_path, &lab_path).unwrap();
        assert_eq!((ds.count, ds.h, ds.w), (2, 3, 3));
        assert_eq!(ds.labels, vec![1, 0]);
        assert_eq!(ds.image(1), &payload[9..18]);
        assert_eq!(ds.classes, 2);
    }

    #[test]
    fn idx_bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(&0x1234_5678u32.to_be_bytes()).unwrap();
        drop(f);
        assert!(matches!(
            load_idx_images(&path),
            Err(DatasetError::BadMagic {
                got: 0x1234_5678,
                ..
            })
        ));
    }

    #[test]
    fn idx_truncated_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx");
        write_idx_images(&path, 4, 3, 3, &[0u8; 10]);
        assert!(matches!(
            load_idx_images(&path),
            Err(DatasetError::Truncated {
                expected: 36,
                got: 10
            })
        ));
        // Header itself cut off.
        let path = dir.path().join("header.idx");
        std::fs::write(&path, IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        assert!(matches!(
            load_idx_images(&path),
            Err(DatasetError::Truncated { .. })
        ));
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let a = generate_synthetic(42, 10, 50);
        let b = generate_synthetic(42, 10, 50);
        assert_eq!(a, b);
        let c = generate_synthetic(43, 10, 50);
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn synthetic_labels_cover_classes() {
        let ds = generate_synthetic(1, 10, 40);
        assert_eq!(ds.count, 40);
        for class in 0..10u8 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == class).count(), 4);
        }
    }

    #[test]
    fn split_partitions_samples() {
        let ds = generate_synthetic(2, 10, 30);
        let full_images = ds.images.clone();
        let (train, test) = ds.split(20);
        assert_eq!(train.count, 20);
        assert_eq!(test.count, 10);
        assert_eq!(
            [train.images.as_slice(), test.images.as_slice()].concat(),
            full_images
        );
    }
}
