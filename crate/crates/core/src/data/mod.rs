//! Datasets, the binary container, synthetic data, bagging splits,
//! preprocessing and batching.

mod container;
mod preprocess;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub use container::{decode_dataset, encode_dataset, load_dataset, save_dataset};
pub use preprocess::{channel_stats, preprocess, PreprocessSpec, ResizeKernel};
pub use split::{semantic_split_override, stratified_disjoint_split, SplitPlan};
pub use synthetic::generate_synthetic;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    #[default]
    Train,
    Valid,
    Test,
}

/// Labelled 8-bit images stored `[N,C,H,W]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<u8>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(shape_err!("dataset must hold at least one sample"));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(shape_err!(
                "image dims must be positive, got {channels}x{height}x{width}"
            ));
        }
        if pixels.len() != labels.len() * channels * height * width {
            return Err(shape_err!(
                "{} pixels do not fit {} images of {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label(format!("label {bad} outside [0,{class_count})")));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
            labels,
            class_count,
            split: SplitTag::Train,
        })
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * self.image_len()..(i + 1) * self.image_len()]
    }

    /// Samples per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// New dataset holding the listed samples, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(shape_err!("sample {i} outside dataset of {}", self.len()));
            }
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok(Self::new(
            (self.channels, self.height, self.width),
            pixels,
            labels,
            self.class_count,
        )?
        .with_split(self.split))
    }
}

/// Index batches over `len` samples; the last batch may be short.
pub fn batch_iter(len: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    if batch_size == 0 {
        return Err(Error::Contract("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes_include_partial_tail() {
        let batches = batch_iter(10, 4, false, 0).unwrap();
        let sizes: Vec<_> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(batches.concat(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn shuffled_batches_are_seeded() {
        let a = batch_iter(37, 5, true, 9).unwrap();
        let b = batch_iter(37, 5, true, 9).unwrap();
        let c = batch_iter(37, 5, true, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mut all = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        assert!(batch_iter(3, 0, false, 0).is_err());
    }

    #[test]
    fn dataset_validates_labels() {
        let err = Dataset::new((1, 1, 1), vec![0, 0], vec![0, 3], 3).unwrap_err();
        assert!(matches!(err, Error::Label(_)));
        assert!(Dataset::new((1, 1, 1), vec![], vec![], 3).is_err());
    }
}
