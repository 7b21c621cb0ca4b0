//! Datasets: the CIFAR-10 binary batch format, a two-spirals surrogate task,
//! and train-time augmentation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte followed by 32×32 R, G and B planes.
pub const CIFAR_RECORD_BYTES: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORDS_PER_BATCH: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Data(format!("images must be [N,C,H,W], got {:?}", images.shape())));
        }
        if images.dim(0) != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.dim(0), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.select_rows(idx)?;
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::Data("empty subset".into()));
        }
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx)?;
        Dataset::new(images, labels, self.num_classes, self.split)
    }
}

/// Parses whole CIFAR-10 records, mapping pixel bytes to `[0, 1]`.
pub fn parse_cifar_records(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Data(format!("record {i}: label byte {label} > 9")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    let images = Tensor::new([n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, CIFAR_CLASSES, split)
}

/// Serializes a dataset of `[N,3,32,32]` images in `[0,1]` back to records.
pub fn encode_cifar_records(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.sample_shape() != [CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(Error::Data(format!("not CIFAR-shaped: {:?}", ds.images.shape())));
    }
    let per = CIFAR_RECORD_BYTES - 1;
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_BYTES);
    for (img, &label) in ds.images.data().chunks_exact(per).zip(&ds.labels) {
        out.push(label as u8);
        out.extend(img.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

fn read_batch_file(path: &Path, split: Split, keep: usize) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = CIFAR_RECORDS_PER_BATCH * CIFAR_RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: expected {expected} bytes ({CIFAR_RECORDS_PER_BATCH} records), found {}",
            path.display(),
            bytes.len()
        )));
    }
    let keep = keep.min(CIFAR_RECORDS_PER_BATCH);
    parse_cifar_records(&bytes[..keep * CIFAR_RECORD_BYTES], split)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn concat(parts: Vec<Dataset>, split: Split) -> Result<Dataset> {
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        labels.extend_from_slice(&p.labels);
        data.extend(p.images.into_data());
    }
    Dataset::new(
        Tensor::new([n, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
        CIFAR_CLASSES,
        split,
    )
}

/// Per-channel standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let (n, c) = (ds.images.dim(0), ds.images.dim(1));
        let plane = ds.images.numel() / (n * c);
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for sample in ds.images.data().chunks_exact(c * plane) {
            for ch in 0..c {
                mean[ch] += sample[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for sample in ds.images.data().chunks_exact(c * plane) {
            for ch in 0..c {
                let mu = mean[ch];
                sq[ch] += sample[ch * plane..(ch + 1) * plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
        }
        let std: Vec<f64> = sq.iter().map(|s| (s / count).sqrt()).collect();
        if let Some(ch) = std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::Data(format!("channel {ch} is constant; cannot standardize")));
        }
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let (n, c) = (ds.images.dim(0), ds.images.dim(1));
        let plane = ds.images.numel() / (n * c);
        for sample in ds.images.data_mut().chunks_exact_mut(c * plane) {
            for ch in 0..c {
                let (mu, sd) = (self.mean[ch], self.std[ch]);
                sample[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = (*v - mu) / sd);
            }
        }
    }
}

/// Loads the five training batches and the test batch from `dir`,
/// standardizing both with statistics of the training split.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    load_cifar10_subset(dir, usize::MAX, usize::MAX)
}

/// Like [`load_cifar10`] but keeps only the first `n_train` / `n_test`
/// records; standardization statistics come from the kept training records.
pub fn load_cifar10_subset(dir: &Path, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("CIFAR-10 directory {} does not exist", dir.display())));
    }
    let mut parts = Vec::new();
    let mut remaining = n_train;
    for name in CIFAR_TRAIN_FILES {
        if remaining == 0 {
            break;
        }
        let part = read_batch_file(&dir.join(name), Split::Train, remaining)?;
        remaining -= part.len();
        parts.push(part);
    }
    let mut train = concat(parts, Split::Train)?;
    let mut test = read_batch_file(&dir.join(CIFAR_TEST_FILE), Split::Test, n_test)?;
    let st = Standardizer::fit(&train)?;
    st.apply(&mut train);
    st.apply(&mut test);
    Ok((train, test))
}

/// Writes a full-size CIFAR-10 directory of class-dependent synthetic images
/// (five training batches and one test batch). Useful where the real dataset
/// is unavailable; the byte format is identical.
pub fn write_synthetic_cifar10(dir: &Path, seed: u64) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // class prototypes: base colour and an oriented stripe pattern
    let protos: Vec<([f64; 3], f64, f64)> = (0..CIFAR_CLASSES)
        .map(|_| {
            (
                [rng.gen_range(60.0..196.0), rng.gen_range(60.0..196.0), rng.gen_range(60.0..196.0)],
                rng.gen_range(0.0..std::f64::consts::PI),
                rng.gen_range(0.2..0.9),
            )
        })
        .collect();
    let files = CIFAR_TRAIN_FILES.iter().chain(std::iter::once(&CIFAR_TEST_FILE));
    for name in files {
        let mut bytes = Vec::with_capacity(CIFAR_RECORDS_PER_BATCH * CIFAR_RECORD_BYTES);
        for _ in 0..CIFAR_RECORDS_PER_BATCH {
            let label = rng.gen_range(0..CIFAR_CLASSES);
            let (colour, angle, freq) = protos[label];
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            bytes.push(label as u8);
            for base in colour {
                for i in 0..CIFAR_SIDE {
                    for j in 0..CIFAR_SIDE {
                        let u = i as f64 * angle.cos() + j as f64 * angle.sin();
                        let v = base + 45.0 * (freq * u + phase).sin() + rng.gen_range(-40.0..40.0);
                        bytes.push(v.round().clamp(0.0, 255.0) as u8);
                    }
                }
            }
        }
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Spatial side of the spirals embedding.
pub const SPIRAL_SIDE: usize = 8;
const SPIRAL_TURNS: f64 = 1.25;

/// Two interleaved spirals, `n_per_class` points each, embedded as
/// `[N, 3, 8, 8]` images whose channels are the constant maps `x`, `y` and
/// `1`. Arc positions are drawn uniformly, so different seeds give different
/// points even without noise.
pub fn make_spirals(n_per_class: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Data("spirals need at least one point per class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| Error::Data(e.to_string()))?;
    let plane = SPIRAL_SIDE * SPIRAL_SIDE;
    let n = 2 * n_per_class;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let r: f64 = rng.gen_range(0.15..1.0);
        let theta = r * SPIRAL_TURNS * std::f64::consts::TAU + class as f64 * std::f64::consts::PI;
        let x = 2.0 * r * theta.cos() + noise.sample(&mut rng);
        let y = 2.0 * r * theta.sin() + noise.sample(&mut rng);
        for v in [x, y, 1.0] {
            data.extend(std::iter::repeat(v).take(plane));
        }
        labels.push(class);
    }
    let images = Tensor::new([n, 3, SPIRAL_SIDE, SPIRAL_SIDE], data)?;
    Dataset::new(images, labels, 2, Split::Train)
}

/// Train and test spirals drawn from independent streams of `seed`.
pub fn spirals_split(n_per_class: usize, n_test_per_class: usize, noise_std: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = substream(seed, Stream::Data);
    let train = make_spirals(n_per_class, noise_std, rng.gen())?;
    let mut test = make_spirals(n_test_per_class, noise_std, rng.gen())?;
    test.split = Split::Test;
    Ok((train, test))
}

/// Mirrors one `[C, H, W]` image left to right in place.
pub fn hflip(image: &mut [f64], c: usize, h: usize, w: usize) {
    for row in image[..c * h * w].chunks_exact_mut(w) {
        row.reverse();
    }
}

/// Random horizontal flip (p = 0.5) and random crop after zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub pad: usize,
}

impl Augment {
    pub const NONE: Augment = Augment { flip: false, pad: 0 };
    pub const STANDARD: Augment = Augment { flip: true, pad: 4 };

    pub fn is_identity(&self) -> bool {
        !self.flip && self.pad == 0
    }

    pub fn apply(&self, batch: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        if self.is_identity() {
            return Ok(batch.clone());
        }
        let [b, c, h, w] = *batch.shape() else {
            return Err(Error::shape("augment", format!("expected [B,C,H,W], got {:?}", batch.shape())));
        };
        let mut out = batch.clone();
        let per = c * h * w;
        let p = self.pad as isize;
        for n in 0..b {
            let img = &mut out.data_mut()[n * per..(n + 1) * per];
            if self.flip && rng.gen_bool(0.5) {
                hflip(img, c, h, w);
            }
            if self.pad > 0 {
                let di = rng.gen_range(-p..=p);
                let dj = rng.gen_range(-p..=p);
                let src = img.to_vec();
                for ch in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let si = i as isize + di;
                            let sj = j as isize + dj;
                            img[(ch * h + i) * w + j] = if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                0.0
                            } else {
                                src[(ch * h + si as usize) * w + sj as usize]
                            };
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// A seeded permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_RECORD_BYTES - 1).map(fill));
        r
    }

    #[test]
    fn two_records_round_trip() {
        let mut bytes = record(3, |i| (i % 251) as u8);
        bytes.extend(record(9, |i| (i * 7 % 256) as u8));
        let ds = parse_cifar_records(&bytes, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![3, 9]);
        assert_eq!(ds.images.shape(), &[2, 3, 32, 32]);
        // R plane first, row-major
        assert_eq!(ds.images.data()[1024 + 5], (1029 % 251) as f64 / 255.0);
        assert_eq!(encode_cifar_records(&ds).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_label_and_partial_record() {
        let bytes = record(10, |_| 0);
        let err = parse_cifar_records(&bytes, Split::Train).unwrap_err().to_string();
        assert!(err.contains("label byte 10"), "{err}");
        let err = parse_cifar_records(&bytes[..100], Split::Train).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn standardizer_formula() {
        let mut bytes = record(0, |_| 255);
        bytes.extend(record(1, |i| (i % 200) as u8));
        let mut ds = parse_cifar_records(&bytes, Split::Train).unwrap();
        let st = Standardizer::fit(&ds).unwrap();
        st.apply(&mut ds);
        for ch in 0..3 {
            let want = (1.0 - st.mean[ch]) / st.std[ch];
            assert!((ds.images.data()[ch * 1024 + 17] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn spirals_are_balanced_and_seeded() {
        let a = make_spirals(50, 0.0, 7).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 50);
        assert_eq!(a, make_spirals(50, 0.0, 7).unwrap());
        assert_ne!(a, make_spirals(50, 0.0, 8).unwrap());
        assert_eq!(a.images.shape(), &[100, 3, 8, 8]);
        assert!(make_spirals(0, 0.0, 1).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut img: Vec<f64> = (0..2 * 3 * 4).map(f64::from).collect();
        let orig = img.clone();
        hflip(&mut img, 2, 3, 4);
        assert_ne!(img, orig);
        assert_eq!(&img[..4], &[3.0, 2.0, 1.0, 0.0]);
        hflip(&mut img, 2, 3, 4);
        assert_eq!(img, orig);
    }

    #[test]
    fn augment_preserves_shape_and_none_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new([3, 2, 6, 6], (0..216).map(f64::from).collect()).unwrap();
        assert_eq!(Augment::NONE.apply(&x, &mut rng).unwrap(), x);
        let y = Augment::STANDARD.apply(&x, &mut rng).unwrap();
        assert_eq!(y.shape(), x.shape());
    }
}
