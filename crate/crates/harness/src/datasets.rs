//! Dataset sources: seeded synthetic blobs, IDX image/label pairs and
//! CIFAR-10 binary batches. Pixels are scaled from bytes to `[0, 1]`.

use crate::digits::{quantize, synthetic_digits, DigitStyle};
use crate::error::{HarnessError, Result};
use ibrar_core::{Dataset, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3072;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DatasetSource {
    SyntheticBlobs {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        size: usize,
        noise: f64,
        seed: u64,
    },
    IdxPair {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
    },
    CifarBinary {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
    },
    /// Rendered stroke digits, ten classes, one channel.
    SyntheticDigits {
        train: usize,
        test: usize,
        size: usize,
        seed: u64,
    },
}

impl DatasetSource {
    /// `(c, h, w)` of one image. File-backed sources read only the header.
    pub fn image_shape(&self) -> Result<[usize; 3]> {
        match self {
            DatasetSource::SyntheticBlobs { size, .. } | DatasetSource::SyntheticDigits { size, .. } => {
                Ok([1, *size, *size])
            }
            DatasetSource::IdxPair { train_images, .. } => {
                let mut header = [0u8; 16];
                let mut f = fs::File::open(train_images).map_err(|e| HarnessError::io(train_images, e))?;
                let n = read_prefix(&mut f, &mut header).map_err(|e| HarnessError::io(train_images, e))?;
                let dims = parse_idx_header(train_images, &header[..n], IDX_IMAGES_MAGIC)?;
                Ok([1, dims[1], dims[2]])
            }
            DatasetSource::CifarBinary { .. } => Ok([3, 32, 32]),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetSource::SyntheticBlobs { classes, .. } | DatasetSource::IdxPair { classes, .. } => *classes,
            DatasetSource::CifarBinary { .. } | DatasetSource::SyntheticDigits { .. } => 10,
        }
    }
}

fn read_prefix(f: &mut fs::File, buf: &mut [u8]) -> std::io::Result<usize> {
    use std::io::Read;
    let mut n = 0;
    while n < buf.len() {
        match f.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Test images of the digits source are drawn from a seed derived from the
/// training seed so the two splits never share samples.
const DIGITS_TEST_SALT: u64 = 0x7e57_0000_0000;

/// Loads `(train, test)`.
pub fn load_dataset(src: &DatasetSource) -> Result<(Dataset, Dataset)> {
    let (train, test) = match src {
        DatasetSource::SyntheticBlobs {
            classes,
            per_class,
            test_per_class,
            size,
            noise,
            seed,
        } => {
            let protos = blob_prototypes(*classes, *size, *seed);
            (
                blobs_from(&protos, *per_class, *size, *noise, *seed, 1)?,
                blobs_from(&protos, *test_per_class, *size, *noise, *seed, 2)?,
            )
        }
        DatasetSource::IdxPair {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
        } => (
            load_idx_pair(train_images, train_labels, *classes)?,
            load_idx_pair(test_images, test_labels, *classes)?,
        ),
        DatasetSource::CifarBinary { train, test } => (load_cifar(train)?, load_cifar(test)?),
        DatasetSource::SyntheticDigits {
            train,
            test,
            size,
            seed,
        } => {
            let style = DigitStyle::default();
            (
                synthetic_digits(*train, *size, &style, *seed),
                synthetic_digits(*test, *size, &style, *seed ^ DIGITS_TEST_SALT),
            )
        }
    };
    if !test.is_empty() && train.image_shape() != test.image_shape() {
        return Err(HarnessError::SplitShapeMismatch {
            train: train.image_shape(),
            test: test.image_shape(),
        });
    }
    Ok((train, test))
}

/// One smooth random pattern per class: a sum of three Gaussian bumps.
fn blob_prototypes(classes: usize, size: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..classes)
        .map(|_| {
            let bumps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.15..0.85),
                        rng.random_range(0.15..0.85),
                        rng.random_range(0.08..0.25),
                    )
                })
                .collect();
            let mut img = vec![0.0; size * size];
            for (i, v) in img.iter_mut().enumerate() {
                let (y, x) = (
                    ((i / size) as f64 + 0.5) / size as f64,
                    ((i % size) as f64 + 0.5) / size as f64,
                );
                let s: f64 = bumps
                    .iter()
                    .map(|&(cx, cy, w)| (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp())
                    .sum();
                *v = s.min(1.0);
            }
            img
        })
        .collect()
}

fn blobs_from(
    protos: &[Vec<f64>],
    per_class: usize,
    size: usize,
    noise: f64,
    seed: u64,
    stream: u64,
) -> Result<Dataset> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(HarnessError::Config(format!(
            "blob noise must be non-negative, got {noise}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, noise).expect("finite sigma");
    let classes = protos.len();
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * size * size);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        labels.push(y);
        data.extend(protos[y].iter().map(|&p| {
            if noise > 0.0 {
                (p + normal.sample(&mut rng)).clamp(0.0, 1.0)
            } else {
                p
            }
        }));
    }
    Ok(Dataset::new(
        Tensor::new(vec![n, 1, size, size], data)?,
        labels,
        classes,
    )?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

/// Header dimensions and payload of an unsigned-byte IDX file.
pub fn parse_idx(path: &Path, bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let dims = parse_idx_header(path, bytes, expected_magic)?;
    let header = 4 + 4 * dims.len();
    let expected: usize = dims.iter().product();
    let found = bytes.len() - header;
    if found < expected {
        return Err(HarnessError::IdxPayloadTruncated {
            path: path.into(),
            expected,
            found,
        });
    }
    if found > expected {
        return Err(HarnessError::IdxTrailing {
            path: path.into(),
            extra: found - expected,
        });
    }
    Ok((dims, bytes[header..].to_vec()))
}

fn parse_idx_header(path: &Path, bytes: &[u8], expected_magic: u32) -> Result<Vec<usize>> {
    let expected_rank = (expected_magic & 0xff) as u8;
    if bytes.len() < 4 {
        return Err(HarnessError::IdxHeaderTruncated {
            path: path.into(),
            len: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(HarnessError::IdxBadMagic {
            path: path.into(),
            observed: magic,
            expected: expected_magic,
        });
    }
    if bytes[2] != 0x08 {
        return Err(HarnessError::IdxBadType {
            path: path.into(),
            observed: bytes[2],
            magic,
        });
    }
    if bytes[3] != expected_rank {
        return Err(HarnessError::IdxBadRank {
            path: path.into(),
            found: bytes[3],
            expected: expected_rank,
            magic,
        });
    }
    let header = 4 + 4 * expected_rank as usize;
    if bytes.len() < header {
        return Err(HarnessError::IdxHeaderTruncated {
            path: path.into(),
            len: bytes.len(),
        });
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if let Some(index) = dims.iter().position(|&d| d == 0) {
        return Err(HarnessError::IdxZeroDim {
            path: path.into(),
            index,
        });
    }
    Ok(dims)
}

pub fn load_idx_pair(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let (dims, pixels) = parse_idx(images, &read(images)?, IDX_IMAGES_MAGIC)?;
    let (ldims, lbytes) = parse_idx(labels, &read(labels)?, IDX_LABELS_MAGIC)?;
    if dims[0] != ldims[0] {
        return Err(HarnessError::CountMismatch {
            images: images.into(),
            image_count: dims[0],
            labels: labels.into(),
            label_count: ldims[0],
        });
    }
    let labels_vec = check_labels(labels, &lbytes, classes)?;
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let t = Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)?;
    Ok(Dataset::new(t, labels_vec, classes)?)
}

fn check_labels(path: &Path, bytes: &[u8], classes: usize) -> Result<Vec<usize>> {
    bytes
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            if (label as usize) < classes {
                Ok(label as usize)
            } else {
                Err(HarnessError::LabelOutOfRange {
                    path: path.into(),
                    index,
                    label,
                    classes,
                })
            }
        })
        .collect()
}

fn idx_bytes(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Writes a single-channel dataset as an IDX image file and label file.
pub fn write_idx_pair(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(HarnessError::Config(format!(
            "IDX images hold one channel, dataset has {c}"
        )));
    }
    let pixels: Vec<u8> = ds.images().data().iter().map(|&v| quantize(v)).collect();
    let lbytes: Vec<u8> = ds.labels().iter().map(|&l| l as u8).collect();
    fs::write(images, idx_bytes(IDX_IMAGES_MAGIC, &[ds.len(), h, w], &pixels))
        .map_err(|e| HarnessError::io(images, e))?;
    fs::write(labels, idx_bytes(IDX_LABELS_MAGIC, &[ds.len()], &lbytes)).map_err(|e| HarnessError::io(labels, e))
}

/// Concatenates CIFAR-10 binary batches (label byte + 3×32×32 planes).
pub fn load_cifar(paths: &[PathBuf]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        parse_cifar(path, &bytes, &mut data, &mut labels)?;
    }
    let n = labels.len();
    Ok(Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10)?)
}

pub fn parse_cifar(path: &Path, bytes: &[u8], data: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.is_empty() {
        return Err(HarnessError::CifarEmpty { path: path.into() });
    }
    let rem = bytes.len() % CIFAR_RECORD;
    if rem != 0 {
        return Err(HarnessError::CifarTruncated {
            path: path.into(),
            len: bytes.len(),
            rem,
        });
    }
    for (index, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(HarnessError::LabelOutOfRange {
                path: path.into(),
                index,
                label: rec[0],
                classes: 10,
            });
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}
