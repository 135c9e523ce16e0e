//! Synthetic heterogeneous pairs drawn from a shared latent space.
//!
//! Each pair shares one latent point `z = mu_k + sigma_w * eps` seen through two
//! fixed random linear maps, `vec_a = A1 z` and `vec_b = A2 z` (plus optional
//! noise). With `dim_a >= latent_dim` the map `A2 A1^+` aligns the two
//! modalities exactly, so a single affine head is sufficient.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedstore::{PairDataset, PairRecord};
use crate::error::{Error, Result};
use crate::projhead::{Activation, AffineLayer, ProjectionHead};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub latent_dim: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub n_classes: usize,
    pub n_pairs: usize,
    pub within_class_sigma: f64,
    pub noise_sigma: f64,
    /// Apply `tanh` elementwise to `vec_a`.
    pub nonlinear: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            dim_a: 32,
            dim_b: 64,
            n_classes: 8,
            n_pairs: 2000,
            within_class_sigma: 0.3,
            noise_sigma: 0.0,
            nonlinear: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.n_classes == 0 || self.n_pairs == 0 {
            return Err(Error::InvalidArgument(
                "latent_dim, n_classes and n_pairs must be positive".into(),
            ));
        }
        if self.dim_a < self.latent_dim || self.dim_b < self.latent_dim {
            return Err(Error::InvalidArgument(format!(
                "dim_a ({}) and dim_b ({}) must be >= latent_dim ({})",
                self.dim_a, self.dim_b, self.latent_dim
            )));
        }
        if self.n_classes > i32::MAX as usize {
            return Err(Error::InvalidArgument("too many classes".into()));
        }
        for (name, s) in [
            ("within_class_sigma", self.within_class_sigma),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// What the generator knows and a learner has to recover.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `n_classes x latent_dim`
    pub centers: Array2<f64>,
    /// `dim_a x latent_dim`
    pub mix_a: Array2<f64>,
    /// `dim_b x latent_dim`
    pub mix_b: Array2<f64>,
    /// `n_pairs x latent_dim`, the exact latent point behind each record.
    pub latents: Array2<f64>,
}

impl GroundTruth {
    /// Modality-A vectors in f64, before tanh and noise and before f32 storage.
    pub fn clean_a(&self) -> Array2<f64> {
        self.latents.dot(&self.mix_a.t())
    }

    pub fn clean_b(&self) -> Array2<f64> {
        self.latents.dot(&self.mix_b.t())
    }

    /// The latent-to-A map as a single identity-activation layer.
    pub fn mix_a_head(&self) -> ProjectionHead {
        linear_head(&self.mix_a)
    }

    pub fn mix_b_head(&self) -> ProjectionHead {
        linear_head(&self.mix_b)
    }
}

fn linear_head(weights: &Array2<f64>) -> ProjectionHead {
    let mut head = ProjectionHead::identity(1);
    head.layers = vec![AffineLayer {
        weights: weights.clone(),
        bias: Array1::zeros(weights.nrows()),
        activation: Activation::Identity,
    }];
    head
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = StandardNormal.sample(rng);
        scale * v
    })
}

pub fn generate(config: &SynthConfig) -> Result<(PairDataset, GroundTruth)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let latent = config.latent_dim;
    let mix_scale = 1.0 / (latent as f64).sqrt();

    let centers = gaussian(&mut rng, (config.n_classes, latent), 1.0);
    let mix_a = gaussian(&mut rng, (config.dim_a, latent), mix_scale);
    let mix_b = gaussian(&mut rng, (config.dim_b, latent), mix_scale);

    let mut records = Vec::with_capacity(config.n_pairs);
    let mut latents = Array2::zeros((config.n_pairs, latent));
    for i in 0..config.n_pairs {
        let label = rng.random_range(0..config.n_classes);
        let eps = gaussian(&mut rng, (latent, 1), config.within_class_sigma);
        let z = &centers.row(label).insert_axis(ndarray::Axis(1)) + &eps;
        latents.row_mut(i).assign(&z.column(0));
        let mut a = mix_a.dot(&z) + gaussian(&mut rng, (config.dim_a, 1), config.noise_sigma);
        let b = mix_b.dot(&z) + gaussian(&mut rng, (config.dim_b, 1), config.noise_sigma);
        if config.nonlinear {
            a.mapv_inplace(f64::tanh);
        }
        records.push(PairRecord {
            pair_id: i as u64,
            label: label as i32,
            vec_a: a.iter().map(|&v| v as f32).collect(),
            vec_b: b.iter().map(|&v| v as f32).collect(),
        });
    }

    let dataset = PairDataset {
        dim_a: config.dim_a,
        dim_b: config.dim_b,
        labeled: true,
        records,
    };
    dataset.validate()?;
    Ok((
        dataset,
        GroundTruth {
            centers,
            mix_a,
            mix_b,
            latents,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn defaults_are_valid_and_labeled() {
        let (d, truth) = generate(&SynthConfig::default()).unwrap();
        assert_eq!((d.dim_a, d.dim_b, d.len()), (32, 64, 2000));
        assert!(d.labeled);
        d.validate().unwrap();
        assert_eq!(truth.centers.dim(), (8, 16));
        assert_eq!(truth.mix_a_head().in_dim(), 16);
        assert_eq!(truth.mix_b_head().out_dim(), 64);
    }

    #[test]
    fn degenerate_generator_gives_one_point_per_class() {
        let cfg = SynthConfig {
            within_class_sigma: 0.0,
            n_pairs: 500,
            ..SynthConfig::default()
        };
        let (d, _) = generate(&cfg).unwrap();
        let distinct: HashSet<Vec<u32>> = d
            .records
            .iter()
            .map(|r| r.vec_a.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), cfg.n_classes);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig {
            n_pairs: 50,
            noise_sigma: 0.1,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig { seed: 1, ..cfg.clone() };
        assert_ne!(generate(&cfg).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn label_balance_within_five_sigma() {
        let cfg = SynthConfig { seed: 3, ..SynthConfig::default() };
        let (d, _) = generate(&cfg).unwrap();
        let p = 1.0 / cfg.n_classes as f64;
        let expected = cfg.n_pairs as f64 * p;
        let sigma = (cfg.n_pairs as f64 * p * (1.0 - p)).sqrt();
        for k in 0..cfg.n_classes as i32 {
            let count = d.records.iter().filter(|r| r.label == k).count() as f64;
            assert!((count - expected).abs() <= 5.0 * sigma, "class {k}: {count}");
        }
    }

    #[test]
    fn nonlinear_bounds_a() {
        let cfg = SynthConfig {
            nonlinear: true,
            n_pairs: 100,
            ..SynthConfig::default()
        };
        let (d, _) = generate(&cfg).unwrap();
        assert!(d.records.iter().flat_map(|r| &r.vec_a).all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn config_errors() {
        let bad = SynthConfig { dim_a: 8, ..SynthConfig::default() };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig { noise_sigma: -0.1, ..SynthConfig::default() };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig { n_classes: 0, ..SynthConfig::default() };
        assert!(generate(&bad).is_err());
    }
}
