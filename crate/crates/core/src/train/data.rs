//! MNIST (IDX) and CIFAR-10 (binary batch) readers.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, RealTensor, Shape4};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn image_shape(self) -> Shape4 {
        match self {
            DatasetKind::Mnist => Shape4 { n: 1, c: 1, h: 28, w: 28 },
            DatasetKind::Cifar10 => Shape4 { n: 1, c: 3, h: 32, w: 32 },
        }
    }

    /// Standard per-channel normalization constants of each dataset.
    pub fn normalization(self) -> (Vec<Real>, Vec<Real>) {
        match self {
            DatasetKind::Mnist => (vec![0.1307], vec![0.3081]),
            DatasetKind::Cifar10 => (vec![0.4914, 0.4822, 0.4465], vec![0.2470, 0.2435, 0.2616]),
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::InvalidArgument(format!("unknown dataset `{other}`"))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

/// Raw 8-bit images with labels; normalization is applied per batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub split: Split,
    image: Shape4,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    mean: Vec<Real>,
    std: Vec<Real>,
}

impl Dataset {
    pub fn from_raw(kind: DatasetKind, split: Split, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let image = kind.image_shape();
        if pixels.len() != labels.len() * image.item() {
            return Err(Error::DatasetMismatch(format!(
                "{} pixels for {} images of {}",
                pixels.len(),
                labels.len(),
                image
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::LabelOutOfRange {
                path: PathBuf::new(),
                label: l,
                classes: CLASSES,
            });
        }
        let (mean, std) = kind.normalization();
        Ok(Dataset {
            kind,
            split,
            image,
            pixels,
            labels,
            mean,
            std,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> Shape4 {
        self.image
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn raw_image(&self, i: usize) -> &[u8] {
        let n = self.image.item();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn normalization(&self) -> (&[Real], &[Real]) {
        (&self.mean, &self.std)
    }

    /// First `n` records (or all, if fewer).
    pub fn truncated(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.labels.truncate(n);
        self.pixels.truncate(n * self.image.item());
        self
    }

    /// Normalized `(N, C, H, W)` batch of the given records.
    pub fn batch(&self, indices: &[usize]) -> Result<(RealTensor, Vec<usize>)> {
        self.batch_augmented(indices, None)
    }

    /// Like `batch`; `aug[i] = (flip, dy, dx)` mirrors record `i`
    /// horizontally and then shifts it by `(dy, dx)` with zero fill.
    pub fn batch_augmented(
        &self,
        indices: &[usize],
        aug: Option<&[(bool, isize, isize)]>,
    ) -> Result<(RealTensor, Vec<usize>)> {
        let s = self.image;
        let shape = s.with_n(indices.len());
        shape.validate()?;
        let mut data = Vec::with_capacity(shape.len());
        for (bi, &i) in indices.iter().enumerate() {
            let img = self.raw_image(i);
            let (flip, dy, dx) = aug.map_or((false, 0, 0), |a| a[bi]);
            for c in 0..s.c {
                let (m, sd) = (self.mean[c], self.std[c]);
                for y in 0..s.h {
                    for x in 0..s.w {
                        let sx = if flip { s.w - 1 - x } else { x } as isize + dx;
                        let sy = y as isize + dy;
                        let v = if sy >= 0 && sx >= 0 && (sy as usize) < s.h && (sx as usize) < s.w {
                            img[(c * s.h + sy as usize) * s.w + sx as usize] as Real / 255.0
                        } else {
                            0.0
                        };
                        data.push((v - m) / sd);
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.label(i)).collect();
        Ok((RealTensor::from_vec(shape, data)?, labels))
    }

    /// Random horizontal flip and up-to-4-pixel translation per record.
    pub fn random_augmentation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<(bool, isize, isize)> {
        (0..n)
            .map(|_| (rng.random::<bool>(), rng.random_range(-4i32..=4) as isize, rng.random_range(-4i32..=4) as isize))
            .collect()
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: file not found", path.display()),
        )),
        _ => Error::Io(e),
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: "header".into(),
        })
}

/// Parses an IDX image file and its label file.
pub fn load_mnist_files(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let ib = read(images)?;
    let magic = be_u32(&ib, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = be_u32(&ib, 4, images)? as usize;
    let (rows, cols) = (be_u32(&ib, 8, images)? as usize, be_u32(&ib, 12, images)? as usize);
    if (rows, cols) != (28, 28) {
        return Err(Error::DatasetMismatch(format!(
            "{}: images are {rows}×{cols}, expected 28×28",
            images.display()
        )));
    }
    let need = 16 + count * rows * cols;
    if ib.len() < need {
        return Err(Error::Truncated {
            path: images.to_path_buf(),
            detail: format!("{} bytes, header promises {need}", ib.len()),
        });
    }
    let lb = read(labels)?;
    let magic = be_u32(&lb, 0, labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let lcount = be_u32(&lb, 4, labels)? as usize;
    if lcount != count {
        return Err(Error::DatasetMismatch(format!("{count} images but {lcount} labels")));
    }
    if lb.len() < 8 + count {
        return Err(Error::Truncated {
            path: labels.to_path_buf(),
            detail: format!("{} bytes, header promises {}", lb.len(), 8 + count),
        });
    }
    let label_bytes = lb[8..8 + count].to_vec();
    if let Some(&l) = label_bytes.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(Error::LabelOutOfRange {
            path: labels.to_path_buf(),
            label: l,
            classes: CLASSES,
        });
    }
    Dataset::from_raw(DatasetKind::Mnist, split, ib[16..need].to_vec(), label_bytes)
}

/// Parses and concatenates CIFAR-10 binary batch files.
pub fn load_cifar_files(paths: &[PathBuf], split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Truncated {
                path: path.clone(),
                detail: format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] as usize >= CLASSES {
                return Err(Error::LabelOutOfRange {
                    path: path.clone(),
                    label: rec[0],
                    classes: CLASSES,
                });
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Dataset::from_raw(DatasetKind::Cifar10, split, pixels, labels)
}

fn first_existing(candidates: &[PathBuf]) -> Option<PathBuf> {
    candidates.iter().find(|p| p.exists()).cloned()
}

/// Loads a split from the standard file layout under `root`. MNIST expects
/// `{train,t10k}-{images-idx3,labels-idx1}-ubyte` (optionally inside `mnist/`);
/// CIFAR-10 expects `data_batch_{1..5}.bin` / `test_batch.bin` (optionally
/// inside `cifar-10-batches-bin/`).
pub fn load_dataset(root: &Path, kind: DatasetKind, split: Split) -> Result<Dataset> {
    match kind {
        DatasetKind::Mnist => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            let find = |suffix: &str| {
                let name = format!("{prefix}-{suffix}-ubyte");
                first_existing(&[root.join(&name), root.join("mnist").join(&name)]).unwrap_or_else(|| root.join(&name))
            };
            load_mnist_files(&find("images-idx3"), &find("labels-idx1"), split)
        }
        DatasetKind::Cifar10 => {
            let dir = first_existing(&[root.join("cifar-10-batches-bin")])
                .filter(|d| d.is_dir())
                .unwrap_or_else(|| root.to_path_buf());
            let files: Vec<PathBuf> = match split {
                Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
                Split::Test => vec![dir.join("test_batch.bin")],
            };
            load_cifar_files(&files, split)
        }
    }
}

/// Writers for small synthetic datasets in the on-disk formats. Each class
/// has a fixed random template; records are the template plus noise, so the
/// tasks are learnable.
pub mod synthetic {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn templates(kind: DatasetKind, seed: u64) -> Vec<Vec<u8>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = kind.image_shape().item();
        (0..CLASSES)
            .map(|_| (0..n).map(|_| if rng.random::<bool>() { 200 } else { 40 }).collect())
            .collect()
    }

    /// `count` records as `(label, pixels)`; `noise` is the maximum
    /// per-pixel perturbation.
    pub fn records(kind: DatasetKind, count: usize, noise: u8, seed: u64) -> Vec<(u8, Vec<u8>)> {
        let t = templates(kind, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        (0..count)
            .map(|i| {
                let label = (i % CLASSES) as u8;
                let px = t[label as usize]
                    .iter()
                    .map(|&v| {
                        let d = rng.random_range(-(noise as i16)..=noise as i16);
                        (v as i16 + d).clamp(0, 255) as u8
                    })
                    .collect();
                (label, px)
            })
            .collect()
    }

    pub fn write_cifar_batch(path: &Path, records: &[(u8, Vec<u8>)]) -> Result<()> {
        let mut out = Vec::with_capacity(records.len() * CIFAR_RECORD);
        for (label, px) in records {
            out.push(*label);
            out.extend_from_slice(px);
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn write_mnist(images: &Path, labels: &Path, records: &[(u8, Vec<u8>)]) -> Result<()> {
        let mut ib = Vec::new();
        for v in [IDX_IMAGES_MAGIC, records.len() as u32, 28, 28] {
            ib.extend_from_slice(&v.to_be_bytes());
        }
        let mut lb = Vec::new();
        for v in [IDX_LABELS_MAGIC, records.len() as u32] {
            lb.extend_from_slice(&v.to_be_bytes());
        }
        for (label, px) in records {
            ib.extend_from_slice(px);
            lb.push(*label);
        }
        std::fs::write(images, ib)?;
        std::fs::write(labels, lb)?;
        Ok(())
    }

    /// Writes a CIFAR-10 directory (`data_batch_1..5.bin`, `test_batch.bin`)
    /// with `train` records split over the five batches and `test` records.
    pub fn write_cifar_dir(root: &Path, train: usize, test: usize, noise: u8, seed: u64) -> Result<()> {
        std::fs::create_dir_all(root)?;
        let recs = records(DatasetKind::Cifar10, train + test, noise, seed);
        let (tr, te) = recs.split_at(train);
        let per = train.div_ceil(5).max(1);
        for i in 0..5 {
            let lo = (i * per).min(tr.len());
            let hi = ((i + 1) * per).min(tr.len());
            let chunk = if lo < hi { &tr[lo..hi] } else { &tr[..0] };
            // An empty batch file would be rejected as truncated; repeat the
            // first record instead so tiny sets still load.
            let chunk: Vec<_> = if chunk.is_empty() { tr[..1].to_vec() } else { chunk.to_vec() };
            write_cifar_batch(&root.join(format!("data_batch_{}.bin", i + 1)), &chunk)?;
        }
        write_cifar_batch(&root.join("test_batch.bin"), te)
    }

    /// Writes the four MNIST IDX files under `root`.
    pub fn write_mnist_dir(root: &Path, train: usize, test: usize, noise: u8, seed: u64) -> Result<()> {
        std::fs::create_dir_all(root)?;
        let recs = records(DatasetKind::Mnist, train + test, noise, seed);
        let (tr, te) = recs.split_at(train);
        write_mnist(&root.join("train-images-idx3-ubyte"), &root.join("train-labels-idx1-ubyte"), tr)?;
        write_mnist(&root.join("t10k-images-idx3-ubyte"), &root.join("t10k-labels-idx1-ubyte"), te)
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::*;
    use super::*;

    #[test]
    fn mnist_round_trip_and_header_constants() {
        let dir = tempfile::tempdir().unwrap();
        write_mnist_dir(dir.path(), 30, 10, 20, 1).unwrap();
        let ds = load_dataset(dir.path(), DatasetKind::Mnist, Split::Train).unwrap();
        assert_eq!(ds.len(), 30);
        assert_eq!(ds.image_shape(), Shape4::new(1, 1, 28, 28).unwrap());
        let recs = records(DatasetKind::Mnist, 40, 20, 1);
        assert_eq!(ds.raw_image(3), recs[3].1.as_slice());
        assert_eq!(ds.label(3), 3);
        let test = load_dataset(dir.path(), DatasetKind::Mnist, Split::Test).unwrap();
        assert_eq!(test.len(), 10);
    }

    #[test]
    fn bad_magic_and_truncation_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_mnist_dir(dir.path(), 5, 5, 0, 2).unwrap();
        let img = dir.path().join("train-images-idx3-ubyte");
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x02;
        std::fs::write(&img, &bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), DatasetKind::Mnist, Split::Train),
            Err(Error::BadMagic { found: 0x802, .. })
        ));
        bytes[3] = 0x03;
        bytes.truncate(bytes.len() - 1);
        std::fs::write(&img, &bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), DatasetKind::Mnist, Split::Train),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn cifar_records_and_label_range() {
        let dir = tempfile::tempdir().unwrap();
        write_cifar_dir(dir.path(), 20, 7, 10, 3).unwrap();
        let ds = load_dataset(dir.path(), DatasetKind::Cifar10, Split::Train).unwrap();
        assert_eq!(ds.len(), 20);
        assert_eq!(load_dataset(dir.path(), DatasetKind::Cifar10, Split::Test).unwrap().len(), 7);
        let bad = dir.path().join("test_batch.bin");
        let mut bytes = std::fs::read(&bad).unwrap();
        bytes[0] = 10;
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), DatasetKind::Cifar10, Split::Test),
            Err(Error::LabelOutOfRange { label: 10, .. })
        ));
        std::fs::write(&bad, &bytes[..100]).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), DatasetKind::Cifar10, Split::Test),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn cifar_batch_file_holds_ten_thousand_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        let recs = vec![(4u8, vec![7u8; 3072]); 10_000];
        write_cifar_batch(&path, &recs).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 30_730_000);
        let ds = load_cifar_files(&[path], Split::Train).unwrap();
        assert_eq!(ds.len(), 10_000);
    }

    #[test]
    fn batches_are_normalized_per_channel() {
        let ds = Dataset::from_raw(DatasetKind::Cifar10, Split::Test, vec![255; 3072], vec![1]).unwrap();
        let (x, labels) = ds.batch(&[0]).unwrap();
        assert_eq!(labels, vec![1]);
        let (m, s) = DatasetKind::Cifar10.normalization();
        for c in 0..3 {
            assert!((x.channel(0, c)[0] - (1.0 - m[c]) / s[c]).abs() < 1e-12);
        }
        let (flipped, _) = ds.batch_augmented(&[0], Some(&[(true, 0, 40)])).unwrap();
        assert!((flipped.at(0, 0, 0, 0) - (0.0 - m[0]) / s[0]).abs() < 1e-12);
    }
}
