//! Gaussian-cluster task generator: the desk-scale stand-in for image
//! benchmark datasets. Each class is an isotropic cluster around a fixed
//! seed-derived center on the sphere of radius `center_scale`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, seed_rng, stream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSource {
    pub input_dim: usize,
    pub class_pool_size: usize,
    /// Standard deviation of the isotropic within-class noise. Zero is
    /// allowed and collapses every class onto its center.
    pub cluster_spread: f64,
    /// Norm of every class center.
    pub center_scale: f64,
    pub seed: u64,
}

impl SyntheticTaskSource {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("synthetic input_dim must be positive".into()));
        }
        if self.class_pool_size == 0 {
            return Err(Error::Config("synthetic class_pool_size must be positive".into()));
        }
        if !(self.center_scale > 0.0) {
            return Err(Error::Config(format!(
                "synthetic center_scale must be positive, got {}",
                self.center_scale
            )));
        }
        if !(self.cluster_spread >= 0.0) {
            return Err(Error::Config(format!(
                "synthetic cluster_spread must be non-negative, got {}",
                self.cluster_spread
            )));
        }
        Ok(())
    }

    /// Fixed center of a class: a seed-derived direction scaled to
    /// `center_scale`. Depends only on `(self.seed, class_id)`.
    pub fn center(&self, class_id: usize) -> Result<Vec<f64>> {
        if class_id >= self.class_pool_size {
            return Err(Error::Index(format!(
                "class {class_id} out of pool of {}",
                self.class_pool_size
            )));
        }
        let mut rng = seed_rng(self.seed, derive_seed(stream::CLASS_CENTER, class_id as u64));
        let mut v: Vec<f64> = (0..self.input_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        debug_assert!(norm > 0.0);
        for x in &mut v {
            *x *= self.center_scale / norm;
        }
        Ok(v)
    }

    /// Draws `center(class_id) + cluster_spread * standard normal noise`.
    pub fn sample(&self, class_id: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let mut v = self.center(class_id)?;
        if self.cluster_spread > 0.0 {
            for x in &mut v {
                *x += self.cluster_spread * rng.sample::<f64, _>(StandardNormal);
            }
        } else {
            // keep the rng stream position independent of the spread value
            for _ in 0..v.len() {
                let _: f64 = rng.sample(StandardNormal);
            }
        }
        Ok(v)
    }
}
