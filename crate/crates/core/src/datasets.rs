//! Labeled datasets: MNIST-style IDX files, CIFAR-10 binary batches,
//! synthetic two-moons, and seeded minibatch iteration.

use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3072;

/// `N × d` inputs in `[0, 1]` with labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    name: String,
}

impl LabeledDataset {
    pub fn new(
        inputs: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 && !labels.is_empty() {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if inputs.len() != dim * labels.len() {
            return Err(Error::invalid(format!(
                "{} input values for {} examples of width {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&v) = inputs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("input value {v} outside [0, 1]")));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(LabeledDataset {
            inputs,
            dim,
            labels,
            num_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// All inputs as an `N × d` tensor.
    pub fn inputs(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.inputs.clone()).expect("dataset shape")
    }

    /// Inputs and labels of the given examples, in order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.input(i));
        }
        let x = Tensor::matrix(indices.len(), self.dim, data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let (x, labels) = self.gather(indices);
        LabeledDataset {
            inputs: x.into_data(),
            dim: self.dim,
            labels,
            num_classes: self.num_classes,
            name: self.name.clone(),
        }
    }

    /// First `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Keeps examples whose label is in `classes`, relabelled to their
    /// position in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Result<LabeledDataset> {
        if classes.is_empty() {
            return Err(Error::invalid("class filter is empty"));
        }
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..self.len() {
            if let Some(pos) = classes.iter().position(|&c| c == self.labels[i]) {
                inputs.extend_from_slice(self.input(i));
                labels.push(pos);
            }
        }
        Ok(LabeledDataset {
            inputs,
            dim: self.dim,
            labels,
            num_classes: classes.len(),
            name: format!("{}[{:?}]", self.name, classes),
        })
    }

    /// Seeded shuffled split into `(train, test)` with `test_fraction` of the
    /// examples held out.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid(format!("test fraction {test_fraction} not in [0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(format!("{what} header")))
}

/// Loads an IDX image file (`0x00000803`) and label file (`0x00000801`).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = read_file(images_path.as_ref())?;
    let labels = read_file(labels_path.as_ref())?;

    let magic = be_u32(&images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n_images = be_u32(&images, 4, "images")? as usize;
    let rows = be_u32(&images, 8, "images")? as usize;
    let cols = be_u32(&images, 12, "images")? as usize;
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() < n_images * dim {
        return Err(Error::Truncated(format!(
            "images: expected {} pixel bytes, found {}",
            n_images * dim,
            pixels.len()
        )));
    }

    let magic = be_u32(&labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n_labels = be_u32(&labels, 4, "labels")? as usize;
    let label_bytes = &labels[8..];
    if label_bytes.len() < n_labels {
        return Err(Error::Truncated(format!(
            "labels: expected {n_labels} bytes, found {}",
            label_bytes.len()
        )));
    }
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let labels: Vec<usize> = label_bytes[..n_labels].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let inputs = pixels[..n_images * dim].iter().map(|&b| b as f64 / 255.0).collect();
    LabeledDataset::new(inputs, dim, labels, num_classes, "idx")
}

/// Writes an IDX image file and matching label file.
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    if pixels.len() != labels.len() * rows * cols {
        return Err(Error::invalid("pixel count does not match labels × rows × cols"));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for word in [IDX_IMAGES_MAGIC, labels.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&word.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for word in [IDX_LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&word.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))
}

/// Loads a CIFAR-10 binary batch: records of one label byte followed by
/// 3072 channel-major pixel bytes.
pub fn load_cifar_bin(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let bytes = read_file(path.as_ref())?;
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::Truncated(format!(
            "CIFAR batch length {} is not a multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        )));
    }
    if bytes.is_empty() {
        warn!("{}: empty CIFAR batch", path.as_ref().display());
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut inputs = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        labels.push(record[0] as usize);
        inputs.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    LabeledDataset::new(inputs, 3072, labels, 10, "cifar10")
}

/// Two interleaved half-circles before rescaling: class 0 on
/// `(cos t, sin t)`, class 1 on `(1 − cos t, 0.5 − sin t)`, `t ∈ [0, π]`.
pub(crate) fn two_moons_raw(n: usize, noise: f64, seed: u64) -> Result<(Vec<[f64; 2]>, Vec<usize>)> {
    if n % 2 != 0 {
        return Err(Error::invalid(format!("two-moons needs an even count, got {n}")));
    }
    if !(noise >= 0.0) {
        return Err(Error::invalid(format!("noise must be nonnegative, got {noise}")));
    }
    let half = n / 2;
    let angle = |i: usize| {
        if half > 1 {
            std::f64::consts::PI * i as f64 / (half - 1) as f64
        } else {
            0.0
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        for i in 0..half {
            let t = angle(i);
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let (nx, ny): (f64, f64) = (normal.sample(&mut rng), normal.sample(&mut rng));
            points.push([x + noise * nx, y + noise * ny]);
            labels.push(class);
        }
    }
    Ok((points, labels))
}

/// Two-moons with `n / 2` points per class, rescaled coordinate-wise into
/// `[0, 1]²` by the dataset's own min/max.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    let (points, labels) = two_moons_raw(n, noise, seed)?;
    let mut inputs = Vec::with_capacity(2 * n);
    let bounds: Vec<(f64, f64)> = (0..2)
        .map(|c| {
            points
                .iter()
                .map(|p| p[c])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect();
    for p in &points {
        for (c, &(lo, hi)) in bounds.iter().enumerate() {
            let v = if hi > lo { (p[c] - lo) / (hi - lo) } else { 0.5 };
            inputs.push(v.clamp(0.0, 1.0));
        }
    }
    LabeledDataset::new(inputs, 2, labels, 2, "two_moons")
}

/// One minibatch drawn from an epoch permutation.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Seeded epoch-permutation minibatches. The final batch of an epoch may be
/// short.
pub struct BatchIterator<'a> {
    dataset: &'a LabeledDataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    permutation: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a LabeledDataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        let mut it = BatchIterator {
            dataset,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            permutation: (0..dataset.len()).collect(),
            cursor: 0,
        };
        it.reshuffle();
        Ok(it)
    }

    /// Draws the next epoch's permutation and rewinds.
    pub fn reshuffle(&mut self) {
        self.permutation = (0..self.dataset.len()).collect();
        self.permutation.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len().div_ceil(self.batch_size)
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.cursor >= self.permutation.len() {
            return Err(Error::EpochExhausted);
        }
        let end = (self.cursor + self.batch_size).min(self.permutation.len());
        let indices = self.permutation[self.cursor..end].to_vec();
        self.cursor = end;
        let (inputs, labels) = self.dataset.gather(&indices);
        Ok(Batch {
            inputs,
            labels,
            indices,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn idx_fixture_loads_with_exact_scaling() {
        let dir = fixture_dir();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let pixels: Vec<u8> = (0..4 * 784).map(|i| (i % 256) as u8).collect();
        write_idx(&ip, &lp, 28, 28, &pixels, &[3, 1, 4, 1]).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.dim(), 784);
        assert_eq!(ds.labels(), &[3, 1, 4, 1]);
        for (i, &b) in pixels.iter().enumerate() {
            assert_eq!(ds.input(i / 784)[i % 784], b as f64 / 255.0);
        }
        assert_eq!(ds.input(0)[255], 1.0);
        assert_eq!(ds.input(0)[0], 0.0);
    }

    #[test]
    fn idx_errors() {
        let dir = fixture_dir();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        write_idx(&ip, &lp, 2, 2, &[0; 8], &[0, 1]).unwrap();
        // labels path pointing at an image file
        assert!(matches!(
            load_idx(&ip, &ip),
            Err(Error::BadMagic {
                expected: IDX_LABELS_MAGIC,
                found: IDX_IMAGES_MAGIC
            })
        ));
        let msg = load_idx(&ip, &ip).unwrap_err().to_string();
        assert!(msg.contains("bad magic"), "{msg}");

        let bytes = fs::read(&ip).unwrap();
        fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Truncated(_))));

        write_idx(&ip, &lp, 2, 2, &[0; 12], &[0, 1, 2]).unwrap();
        let mut lab = fs::read(&lp).unwrap();
        lab[7] = 2;
        lab.pop();
        fs::write(&lp, lab).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(Error::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn cifar_records() {
        let dir = fixture_dir();
        let path = dir.path().join("batch.bin");
        let mut bytes = vec![7u8];
        bytes.extend((0..3072).map(|i| (i % 256) as u8));
        bytes.push(2);
        bytes.extend(std::iter::repeat_n(255u8, 3072));
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar_bin(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 3072);
        assert!(ds.num_classes() <= 10);
        assert_eq!(ds.labels(), &[7, 2]);
        // channel-major: red plane first
        assert_eq!(ds.input(0)[1024], (1024 % 256) as f64 / 255.0);
        assert_eq!(ds.input(1)[3071], 1.0);

        fs::write(&path, []).unwrap();
        assert_eq!(load_cifar_bin(&path).unwrap().len(), 0);

        fs::write(&path, vec![0u8; 3072]).unwrap();
        assert!(matches!(load_cifar_bin(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn two_moons_construction() {
        let ds = gen_two_moons(4, 0.0, 1).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.labels(), &[0, 0, 1, 1]);
        assert!(matches!(gen_two_moons(5, 0.1, 1), Err(Error::InvalidArgument(_))));

        let (points, labels) = two_moons_raw(40, 0.0, 3).unwrap();
        for (p, &l) in points.iter().zip(&labels) {
            let (cx, cy) = if l == 0 { (0.0, 0.0) } else { (1.0, 0.5) };
            let r = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
            if l == 0 {
                assert!(p[1] >= -1e-12);
            } else {
                assert!(p[1] <= 0.5 + 1e-12);
            }
        }
        assert_eq!(gen_two_moons(100, 0.2, 9).unwrap(), gen_two_moons(100, 0.2, 9).unwrap());
        assert_ne!(
            gen_two_moons(100, 0.2, 9).unwrap(),
            gen_two_moons(100, 0.2, 10).unwrap()
        );
    }

    #[test]
    fn batches_cover_epoch() {
        let ds = gen_two_moons(10, 0.1, 0).unwrap();
        let mut it = BatchIterator::new(&ds, 4, 11).unwrap();
        let sizes: Vec<usize> = (0..3).map(|_| it.next_batch().unwrap().labels.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(matches!(it.next_batch(), Err(Error::EpochExhausted)));

        let mut a = BatchIterator::new(&ds, 3, 5).unwrap();
        let mut b = BatchIterator::new(&ds, 3, 5).unwrap();
        for _ in 0..a.batches_per_epoch() {
            assert_eq!(a.next_batch().unwrap().indices, b.next_batch().unwrap().indices);
        }
    }

    proptest! {
        #[test]
        fn epoch_is_a_permutation(n in 1usize..60, m in 1usize..17, seed in any::<u64>()) {
            let n = n * 2;
            let ds = gen_two_moons(n, 0.1, 0).unwrap();
            let mut it = BatchIterator::new(&ds, m, seed).unwrap();
            let mut seen = Vec::new();
            while let Ok(batch) = it.next_batch() {
                prop_assert!(batch.labels.len() <= m);
                seen.extend(batch.indices);
            }
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
