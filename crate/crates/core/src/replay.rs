//! Replay buffer of past Langevin samples used to restart chains.

use std::collections::VecDeque;

use rand::Rng;

use crate::langevin::{latent_init, SampleError};
use crate::tensor::{Float, Tensor};

/// Probability that a drawn slot is fresh noise rather than a stored sample.
pub const FRESH_FRACTION: f64 = 0.05;
pub const DEFAULT_CAPACITY: usize = 8192;

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    image_shape: Vec<usize>,
    items: VecDeque<Vec<Float>>,
    pub fresh_fraction: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

/// Chain starts returned by [`ReplayBuffer::draw`].
#[derive(Clone, Debug)]
pub struct Draw {
    pub images: Tensor,
    /// How many slots came from fresh noise.
    pub fresh: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, image_shape: &[usize]) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        ReplayBuffer {
            capacity,
            image_shape: image_shape.to_vec(),
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            fresh_fraction: FRESH_FRACTION,
            clamp_lo: 0.0,
            clamp_hi: 1.0,
        }
    }

    pub fn with_fresh_fraction(mut self, fraction: f64) -> Self {
        self.fresh_fraction = fraction.clamp(0.0, 1.0);
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.image_shape
    }

    pub fn get(&self, i: usize) -> Option<&[Float]> {
        self.items.get(i).map(|v| v.as_slice())
    }

    /// Each slot is independently fresh uniform noise with probability
    /// `fresh_fraction`, otherwise a uniformly chosen stored sample. An empty
    /// buffer (or `fresh_fraction == 1`) yields exactly [`latent_init`].
    pub fn draw<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Draw, SampleError> {
        if batch_size == 0 {
            return Err(SampleError::Config("batch_size must be at least 1".into()));
        }
        if self.items.is_empty() || self.fresh_fraction >= 1.0 {
            return Ok(Draw {
                images: latent_init(batch_size, &self.image_shape, rng)?,
                fresh: batch_size,
            });
        }
        let per: usize = self.image_shape.iter().product();
        let mut data = Vec::with_capacity(per * batch_size);
        let mut fresh = 0;
        for _ in 0..batch_size {
            if rng.random::<f64>() < self.fresh_fraction {
                fresh += 1;
                data.extend((0..per).map(|_| rng.random_range(0.0..1.0 as Float)));
            } else {
                let i = rng.random_range(0..self.items.len());
                data.extend_from_slice(&self.items[i]);
            }
        }
        let mut shape = vec![batch_size];
        shape.extend_from_slice(&self.image_shape);
        Ok(Draw {
            images: Tensor::new(shape, data)?,
            fresh,
        })
    }

    /// Append every batch item, evicting the oldest beyond capacity. The
    /// whole batch is rejected if any pixel is out of range.
    pub fn push(&mut self, batch: &Tensor) -> Result<(), SampleError> {
        if batch.shape()[1..] != self.image_shape[..] {
            return Err(SampleError::Config(format!(
                "buffer holds {:?} images, got batch {:?}",
                self.image_shape,
                batch.shape()
            )));
        }
        for i in 0..batch.batch() {
            if let Some(&v) = batch
                .row(i)
                .iter()
                .find(|&&v| !((v as f64) >= self.clamp_lo && (v as f64) <= self.clamp_hi))
            {
                return Err(SampleError::OutOfRange {
                    index: i,
                    value: v as f64,
                    lo: self.clamp_lo,
                    hi: self.clamp_hi,
                });
            }
        }
        for i in 0..batch.batch() {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(batch.row(i).to_vec());
        }
        Ok(())
    }
}
