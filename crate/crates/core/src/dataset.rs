//! Labeled datasets and the synthetic blob generator used for desk-scale runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inputs of shape `[n, ...]` with one class label per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = *inputs.dims().first().unwrap_or(&0);
        if n != labels.len() {
            return Err(Error::InvalidArg(format!(
                "{} labels for {n} samples",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArg(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Dataset { inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Elements per sample.
    pub fn sample_width(&self) -> usize {
        if self.is_empty() { 0 } else { self.inputs.len() / self.len() }
    }

    /// Flat view of sample `i`.
    pub fn sample(&self, i: usize) -> &[f32] {
        let w = self.sample_width();
        &self.inputs.data()[i * w..(i + 1) * w]
    }

    /// First `n` samples as their own dataset (used to carve a calibration
    /// subset out of the training split).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let w = self.sample_width();
        let mut dims = self.inputs.dims().to_vec();
        dims[0] = n;
        Dataset {
            inputs: Tensor::new(dims, self.inputs.data()[..n * w].to_vec())
                .expect("prefix of a valid tensor is valid"),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

/// Deterministic class-conditional Gaussian blobs.
///
/// Class `c` is centered at `separation` along input axis `c % d` (scaled up
/// each time the axes wrap), with unit-variance noise. Labels cycle round
/// robin so every class has within-one-sample balance. Reruns with the same
/// arguments produce identical bytes; the stream comes from `ChaCha8Rng`.
pub fn gen_synthetic(seed: u64, n: usize, d: usize, classes: usize, separation: f64) -> Result<Dataset> {
    if classes == 0 || d == 0 {
        return Err(Error::InvalidArg("classes and dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = vec![vec![0.0f32; d]; classes];
    for (c, mean) in means.iter_mut().enumerate() {
        let axis = c % d;
        let ring = (c / d) as f32;
        mean[axis] = separation as f32 * (1.0 + ring);
    }

    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &mean in &means[c] {
            let noise: f32 = rng.sample(StandardNormal);
            data.push(mean + noise);
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![n, d], data)?, labels, classes)
}
