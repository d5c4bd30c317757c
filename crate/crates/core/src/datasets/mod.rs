//! MNIST / CIFAR-10 loading, normalization, augmentation and batch plans.

mod cifar;
mod mnist;

pub use cifar::{check_cifar10, encode_cifar_records, load_cifar10, CIFAR_RECORD};
pub use mnist::{check_mnist, encode_idx_images, encode_idx_labels, load_mnist};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::mix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    Cifar10,
}

impl DatasetId {
    /// `(channels, height, width)` of one image.
    pub fn image_shape(self) -> (usize, usize, usize) {
        match self {
            DatasetId::Mnist => (1, 28, 28),
            DatasetId::Cifar10 => (3, 32, 32),
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            DatasetId::Mnist => Normalization {
                mean: vec![0.1307],
                std: vec![0.3081],
            },
            DatasetId::Cifar10 => Normalization {
                mean: vec![0.4914, 0.4822, 0.4465],
                std: vec![0.2470, 0.2435, 0.2616],
            },
        }
    }

    /// Directory holding this dataset's files under a data root. Accepts the
    /// conventional subdirectory names or the root itself.
    pub fn resolve_dir(self, root: &Path) -> PathBuf {
        let candidates: &[&str] = match self {
            DatasetId::Mnist => &["mnist", "MNIST"],
            DatasetId::Cifar10 => &["cifar-10-batches-bin", "cifar10", "cifar-10"],
        };
        candidates
            .iter()
            .map(|c| root.join(c))
            .find(|p| p.is_dir())
            .unwrap_or_else(|| root.to_path_buf())
    }

    pub fn load(self, root: &Path) -> Result<DatasetPair> {
        let dir = self.resolve_dir(root);
        match self {
            DatasetId::Mnist => load_mnist(&dir),
            DatasetId::Cifar10 => load_cifar10(&dir),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel `(x / 255 - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn apply(&self, channel: usize, raw: u8) -> f32 {
        (f32::from(raw) / 255.0 - self.mean[channel]) / self.std[channel]
    }
}

/// One split of an image classification dataset. Pixels stay as raw bytes
/// and are normalized when batches are gathered.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub id: DatasetId,
    pub split: Split,
    pixels: Vec<u8>,
    labels: Vec<u8>,
    pub norm: Normalization,
}

#[derive(Debug, Clone)]
pub struct DatasetPair {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(id: DatasetId, split: Split, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let (c, h, w) = id.image_shape();
        if pixels.len() != labels.len() * c * h * w {
            return Err(Error::Dimension(format!(
                "{} pixel bytes for {} labels of {c}x{h}x{w}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Input(format!("label {bad} outside [0, 10)")));
        }
        Ok(Self {
            id,
            split,
            pixels,
            labels,
            norm: id.normalization(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn raw_pixels(&self) -> &[u8] {
        &self.pixels
    }

    fn sample_len(&self) -> usize {
        let (c, h, w) = self.id.image_shape();
        c * h * w
    }

    /// Normalized images `[idx.len(), c, h, w]` and their labels.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = self.id.image_shape();
        let plane = h * w;
        let len = self.sample_len();
        let mut data = Vec::with_capacity(idx.len() * len);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Usage(format!(
                    "index {i} outside dataset of {}",
                    self.len()
                )));
            }
            let px = &self.pixels[i * len..(i + 1) * len];
            data.extend(px.iter().enumerate().map(|(j, &p)| self.norm.apply(j / plane, p)));
            labels.push(usize::from(self.labels[i]));
        }
        Ok((Tensor::new(vec![idx.len(), c, h, w], data)?, labels))
    }

    /// Per-class example counts.
    pub fn label_histogram(&self) -> [usize; 10] {
        let mut h = [0; 10];
        for &l in &self.labels {
            h[usize::from(l)] += 1;
        }
        h
    }

    /// Keeps the first `n` examples (for quick experiments).
    pub fn truncate(&mut self, n: usize) {
        let n = n.min(self.len());
        self.pixels.truncate(n * self.sample_len());
        self.labels.truncate(n);
    }
}

/// Shuffled mini-batch order: epoch `e` is a permutation drawn from a stream
/// seeded by `(seed, e)` only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
    pub n: usize,
}

impl BatchPlan {
    pub fn new(seed: u64, batch_size: usize, n: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(Self { seed, batch_size, n })
    }

    pub fn permutation(&self, epoch: u32) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed ^ mix64(u64::from(epoch) + 1)));
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Index batches of one epoch; the last one may be short.
    pub fn batches(&self, epoch: u32) -> Vec<Vec<usize>> {
        self.permutation(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }
}

/// Mirrors one `[c, h, w]` image left-right in place.
pub fn flip_horizontal(img: &mut [f32], c: usize, h: usize, w: usize) {
    for row in img[..c * h * w].chunks_mut(w) {
        row.reverse();
    }
}

/// Shifts one `[c, h, w]` image by `(dy, dx)` with zero fill: output pixel
/// `(y, x)` reads input `(y + dy, x + dx)`. This is a crop of the padded
/// image at offset `(pad + dy, pad + dx)`.
pub fn shift_crop(img: &[f32], c: usize, h: usize, w: usize, dy: isize, dx: isize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

pub const CROP_PAD: i32 = 4;

/// Random horizontal flip (p = 0.5) then a random crop from a 4-pixel zero
/// border, independently for every sample of `x: [b, c, h, w]`.
pub fn augment<R: Rng>(x: &Tensor, rng: &mut R) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("augment expects [b,c,h,w], got {s:?}")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let len = c * h * w;
    let mut out = Vec::with_capacity(x.len());
    for img in x.data().chunks(len) {
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(-CROP_PAD..=CROP_PAD) as isize;
        let dx = rng.random_range(-CROP_PAD..=CROP_PAD) as isize;
        let mut img = img.to_vec();
        if flip {
            flip_horizontal(&mut img, c, h, w);
        }
        out.extend(shift_crop(&img, c, h, w, dy, dx));
    }
    Tensor::new(s.to_vec(), out)
}

/// Fixed, augmentation-free batch used for activation statistics.
pub fn stats_batch(ds: &Dataset, size: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    if size > ds.len() {
        return Err(Error::Usage(format!(
            "stats batch of {size} from a dataset of {}",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = rand::seq::index::sample(&mut rng, ds.len(), size).into_vec();
    ds.gather(&idx)
}

/// Indices chosen by [`stats_batch`].
pub fn stats_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, n, size.min(n)).into_vec()
}


/// Outcome of validating one dataset file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileReport {
    pub path: PathBuf,
    pub ok: bool,
    pub records: usize,
    pub detail: String,
}

impl FileReport {
    fn from_result(path: PathBuf, r: Result<usize>) -> Self {
        match r {
            Ok(n) => Self {
                path,
                ok: true,
                records: n,
                detail: format!("{n} records"),
            },
            Err(e) => Self {
                path,
                ok: false,
                records: 0,
                detail: match e {
                    Error::Format { msg, .. } => msg,
                    other => other.to_string(),
                },
            },
        }
    }
}
