//! Dataset ingestion: MNIST IDX files and the CIFAR-10 binary format.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

/// An in-memory labelled image set, immutable once loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Per-sample dims `[C, H, W]`.
    pub sample_dims: Vec<usize>,
    pub pixels: Vec<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(sample_dims: Vec<usize>, pixels: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = sample_dims.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} pixels cannot hold {} samples of {sample_dims:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            sample_dims,
            pixels,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_dims.iter().product()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
        }
        let mut dims = vec![indices.len()];
        dims.extend_from_slice(&self.sample_dims);
        Batch {
            images: Tensor::new(dims, data).expect("consistent batch dims"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn range_batch(&self, range: std::ops::Range<usize>) -> Batch {
        let idx: Vec<usize> = range.collect();
        self.batch(&idx)
    }

    /// The first `n` samples (all of them when `n == 0` or `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let per = self.sample_len();
        Dataset {
            sample_dims: self.sample_dims.clone(),
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Mini-batches of a seeded permutation of all samples. The last batch
    /// may be short.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// 2x2 average pooling of every image (used to fit 32x32 CIFAR images to
    /// the 16x16 tiny residual network).
    pub fn avg_pool2(&self) -> Dataset {
        let [c, h, w] = [self.sample_dims[0], self.sample_dims[1], self.sample_dims[2]];
        let (oh, ow) = (h / 2, w / 2);
        let per = self.sample_len();
        let mut out = Vec::with_capacity(self.len() * c * oh * ow);
        for s in 0..self.len() {
            let img = &self.pixels[s * per..(s + 1) * per];
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let at = |dy: usize, dx: usize| img[(ch * h + 2 * y + dy) * w + 2 * x + dx];
                        out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
                    }
                }
            }
        }
        Dataset {
            sample_dims: vec![c, oh, ow],
            pixels: out,
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: file ends before header field at byte {offset}")))
}

/// Parses an IDX3 image file into `[0,1]`-normalized pixels.
pub fn parse_idx_images(bytes: &[u8], what: &str) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{what}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Length(format!("{what}: header dims overflow")))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Length(format!(
            "{what}: header declares {need} pixel bytes but only {} follow",
            body.len()
        )));
    }
    let pixels = body[..need].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8], what: &str) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("{what}: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, what)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Length(format!(
            "{what}: header declares {n} labels but only {} bytes follow",
            body.len()
        )));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

fn load_idx_pair(dir: &Path, prefix: &str) -> Result<Dataset> {
    let img_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lbl_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(&img_path)?, &img_path.display().to_string())?;
    let labels = parse_idx_labels(&read_file(&lbl_path)?, &lbl_path.display().to_string())?;
    if labels.len() != n {
        return Err(Error::Data(format!("{prefix}: {n} images but {} labels", labels.len())));
    }
    Dataset::new(vec![1, rows, cols], pixels, labels, 10)
}

/// Loads `train-*` and `t10k-*` IDX files from `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<Splits> {
    let dir = dir.as_ref();
    Ok(Splits {
        train: load_idx_pair(dir, "train")?,
        test: load_idx_pair(dir, "t10k")?,
    })
}

/// Parses label-prefixed 3073-byte CIFAR-10 records (3x32x32 planes).
pub fn parse_cifar(bytes: &[u8], what: &str) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Length(format!(
            "{what}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Format {
                offset: i * CIFAR_RECORD,
                msg: format!("{what}: label byte {} out of range", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Dataset::new(vec![3, 32, 32], pixels, labels, 10)
}

/// Loads `data_batch_*.bin` / `test_batch.bin` from a CIFAR-10 binary
/// directory.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<Splits> {
    let dir = dir.as_ref();
    let mut train_bytes = Vec::new();
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if p.exists() {
            train_bytes.extend(read_file(&p)?);
        }
    }
    if train_bytes.is_empty() {
        return Err(Error::Data(format!("no data_batch_*.bin files in {}", dir.display())));
    }
    let test_path = dir.join("test_batch.bin");
    Ok(Splits {
        train: parse_cifar(&train_bytes, "cifar train")?,
        test: parse_cifar(&read_file(&test_path)?, &test_path.display().to_string())?,
    })
}

/// Writes an IDX image/label pair; used to build fixtures.
pub fn write_idx(
    dir: impl AsRef<Path>,
    prefix: &str,
    rows: usize,
    cols: usize,
    images: &[u8],
    labels: &[u8],
) -> Result<()> {
    let dir = dir.as_ref();
    let mut img = Vec::with_capacity(16 + images.len());
    img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend((labels.len() as u32).to_be_bytes());
    img.extend((rows as u32).to_be_bytes());
    img.extend((cols as u32).to_be_bytes());
    img.extend_from_slice(images);
    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.extend(IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend((labels.len() as u32).to_be_bytes());
    lbl.extend_from_slice(labels);
    let ip = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lp = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    fs::write(&ip, img).map_err(|e| Error::io(&ip, e))?;
    fs::write(&lp, lbl).map_err(|e| Error::io(&lp, e))?;
    Ok(())
}
