use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Gaussian blobs: one mean per class drawn uniformly on a sphere of `radius`,
/// isotropic noise `sigma`. Values are rounded to `f32` so that in-memory data
/// matches what the tensor file format stores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    pub dims: Vec<usize>,
    pub radius: f64,
    pub sigma: f64,
    pub seed: u64,
}

fn default_test_per_class() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub means: Vec<Vec<f64>>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if !(self.sigma > 0.0) || !(self.radius > 0.0) {
            return Err(Error::Config("synthetic sigma and radius must be > 0".into()));
        }
        if self.per_class == 0 || self.test_per_class == 0 || self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::Config("synthetic sizes and dims must be positive".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SyntheticData> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let dim: usize = self.dims.iter().product();
        let means: Vec<Vec<f64>> = (0..self.classes)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| self.radius * x / norm).collect()
            })
            .collect();
        let mut draw = |count: usize| -> Result<LabeledDataset> {
            let n = count * self.classes;
            let mut data = Vec::with_capacity(n * dim);
            let mut labels = Vec::with_capacity(n);
            for (c, mean) in means.iter().enumerate() {
                for _ in 0..count {
                    for m in mean {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        data.push((m + self.sigma * noise) as f32 as f64);
                    }
                    labels.push(c);
                }
            }
            let mut shape = vec![n];
            shape.extend(&self.dims);
            LabeledDataset::new(Tensor::new(shape, data)?, labels, self.classes)
        };
        let train = draw(self.per_class)?;
        let test = draw(self.test_per_class)?;
        Ok(SyntheticData { train, test, means })
    }
}
