//! Built-in synthetic classification set: a Gaussian mixture over images.

use rand::seq::index;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::rng::{self, Role};
use crate::tensor::{Scalar, Tensor};

const MEANS: u64 = u64::MAX;
const SAMPLES: u64 = u64::MAX - 1;

/// Fixed training set, fully determined by its seed.
pub struct SyntheticDataset<T: Scalar> {
    images: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
    seed: u64,
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn generate(
        cfg: &DataConfig,
        image_size: usize,
        chans: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        if classes == 0 || cfg.samples == 0 {
            return Err(Error::Config(
                "dataset needs at least one class and one sample".into(),
            ));
        }
        let pixels = image_size * image_size * chans;
        let means = rng::normal::<f64>(
            &[classes, pixels],
            cfg.separation.max(f64::MIN_POSITIVE),
            &mut rng::rng_from(rng::stream_seed(seed, MEANS, 0, Role::Data)),
        );
        let noise = rng::normal::<f64>(
            &[cfg.samples, pixels],
            cfg.noise.max(f64::MIN_POSITIVE),
            &mut rng::rng_from(rng::stream_seed(seed, SAMPLES, 0, Role::Data)),
        );
        let labels: Vec<usize> = (0..cfg.samples).map(|i| i % classes).collect();
        let images = Tensor::from_fn(&[cfg.samples, image_size, image_size, chans], |i| {
            let (s, p) = (i / pixels, i % pixels);
            T::of(means.data()[labels[s] * pixels + p] + noise.data()[i])
        });
        Ok(Self {
            images,
            labels,
            classes,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn gather(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let shape = self.images.shape();
        let per: usize = shape[1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let src = self.images.data();
        let images = Tensor::from_fn(&out_shape, |i| src[indices[i / per] * per + i % per]);
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Minibatch drawn without replacement for `step`; depends only on the
    /// dataset seed and the step.
    pub fn batch(&self, step: u64, batch: usize) -> (Tensor<T>, Vec<usize>) {
        let mut r = rng::rng_from(rng::stream_seed(self.seed, step, 0, Role::Data));
        let n = batch.min(self.len());
        let idx = index::sample(&mut r, self.len(), n).into_vec();
        self.gather(&idx)
    }

    /// Contiguous chunks covering the whole set, for evaluation.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (Tensor<T>, Vec<usize>)> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
            self.gather(&idx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig {
            samples: 20,
            ..DataConfig::default()
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = SyntheticDataset::<f32>::generate(&small(), 4, 3, 4, 1).unwrap();
        let b = SyntheticDataset::<f32>::generate(&small(), 4, 3, 4, 1).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels.iter().filter(|&&l| l == 3).count(), 5);
        let (x, y) = a.batch(7, 6);
        let (x2, y2) = b.batch(7, 6);
        assert!(x.bit_eq(&x2));
        assert_eq!(y, y2);
        assert_eq!(x.shape(), &[6, 4, 4, 3]);
    }

    #[test]
    fn batches_vary_by_step() {
        let a = SyntheticDataset::<f32>::generate(&small(), 4, 3, 4, 1).unwrap();
        assert_ne!(a.batch(0, 8).1, a.batch(1, 8).1);
    }

    #[test]
    fn chunks_cover_everything() {
        let a = SyntheticDataset::<f32>::generate(&small(), 4, 3, 4, 1).unwrap();
        assert_eq!(a.chunks(7).map(|(_, y)| y.len()).sum::<usize>(), 20);
    }
}
