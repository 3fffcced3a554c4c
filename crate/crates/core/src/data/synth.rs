use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{LabError, Result};
use crate::matrix::Matrix;

/// Isotropic Gaussian class clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub class_count: usize,
    pub input_dim: usize,
    pub per_class: usize,
    /// Distance of each class mean from the origin, in noise standard deviations.
    pub separation: f64,
    pub seed: u64,
}

/// Class `c` is centred at `separation · u_c` with `u_c` a seeded random unit
/// direction; samples add unit isotropic noise. The whole dataset is then
/// rescaled by one affine map onto `[0, 1]`. Samples are emitted class by class.
pub fn synth_gaussian(spec: &GaussianSpec) -> Result<LabeledDataset> {
    if spec.class_count < 2 {
        return Err(LabError::Config("synthetic data needs at least 2 classes".into()));
    }
    if spec.per_class == 0 || spec.input_dim == 0 {
        return Err(LabError::Config("per_class and input_dim must be at least 1".into()));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(LabError::Config("separation must be finite and >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centres: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|_| {
            let mut dir: Vec<f64> = (0..spec.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|v| *v *= spec.separation / norm);
            dir
        })
        .collect();

    let n = spec.class_count * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.input_dim);
    let mut labels = Vec::with_capacity(n);
    for (class, centre) in centres.iter().enumerate() {
        for _ in 0..spec.per_class {
            data.extend(centre.iter().map(|&c| {
                let noise: f64 = StandardNormal.sample(&mut rng);
                c + noise
            }));
            labels.push(class);
        }
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut data {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
    LabeledDataset::new(Matrix::from_vec(n, spec.input_dim, data)?, labels, spec.class_count)
}
