//! Datasets: a deterministic synthetic shape generator, an IDX reader and
//! Gaussian noise sampling.

pub mod idx;
mod noise;
pub mod seed;
mod synthetic;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels};
pub use noise::{gaussian_noise, NoisySample};
pub use synthetic::{generate_synthetic, SyntheticSpec, PATTERN_COUNT};

use crate::error::{Error, Result};
use crate::numerics::{Checkpoint, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn code(self) -> f64 {
        match self {
            Split::Train => 0.0,
            Split::Test => 1.0,
        }
    }
}

/// Labelled images `(N, C, H, W)` with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub seed: u64,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split, seed: u64) -> Result<Self> {
        images.dims4("dataset")?;
        if images.batch() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {classes})")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.item(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The first `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset {
            images: self.images.gather(&idx),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
            split: self.split,
            seed: self.seed,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("images", self.images.clone());
        ck.push(
            "labels",
            Tensor::new(vec![self.len()], self.labels.iter().map(|&l| l as f64).collect())
                .expect("label count"),
        );
        let meta = vec![
            self.classes as f64,
            self.split.code(),
            (self.seed >> 32) as f64,
            (self.seed & 0xFFFF_FFFF) as f64,
        ];
        ck.push("meta", Tensor::new(vec![4], meta).expect("meta"));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ck.get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("dataset container lacks {name:?}")))
        };
        let images = get("images")?.clone();
        let labels = get("labels")?.data().iter().map(|&v| v as usize).collect();
        let meta = get("meta")?.data();
        if meta.len() != 4 {
            return Err(Error::InvalidArgument("malformed dataset meta".into()));
        }
        let split = if meta[1] == 0.0 { Split::Train } else { Split::Test };
        let seed = ((meta[2] as u64) << 32) | meta[3] as u64;
        Self::new(images, labels, meta[0] as usize, split, seed)
    }
}

/// Splits a permutation into minibatches of `batch` examples; a trailing
/// singleton is merged into the previous batch so every batch has at least
/// two examples whenever `order.len() >= 2`.
pub fn minibatches(order: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let batch = batch.max(1);
    let mut out: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if out.len() >= 2 && out.last().map_or(false, |b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Deterministic permutation of `0..n` for `epoch`.
pub fn epoch_order(n: usize, root_seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::substream(root_seed, &[seed::tag::SHUFFLE, epoch as u64]));
    order
}
