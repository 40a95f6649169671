use rand::seq::{index, SliceRandom};

use super::{loss_distribution, loss_reconstruction, sample_noise, Vae, VaeArchitecture, LATENT};
use crate::error::{Error, Result};
use crate::hsi_io::{FeatureMatrix, PixelCubes};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, BnMode, Tape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Train on a seeded random subset of at most this many cubes; 0 uses
    /// every cube. Features are always exported for every pixel.
    pub max_cubes: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 5e-4,
            max_cubes: 0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Parameter(format!(
                "VAE batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!(
                "VAE learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Parameter(format!(
                "VAE weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Mean per-batch losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub distribution: f64,
    pub reconstruction: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub vae: Vae,
    pub features: FeatureMatrix,
    pub history: Vec<EpochLoss>,
}

/// Indices of the cubes used for training.
fn training_set(n: usize, config: &PretrainConfig) -> Vec<usize> {
    if config.max_cubes == 0 || config.max_cubes >= n {
        return (0..n).collect();
    }
    let mut rng = rng::stream(config.seed, rng::VAE_SUBSET);
    let mut picked = index::sample(&mut rng, n, config.max_cubes).into_vec();
    picked.sort_unstable();
    picked
}

impl Vae {
    /// One optimization step on the given cubes; returns the losses before
    /// the update.
    pub fn train_step(
        &mut self,
        cubes: &PixelCubes,
        batch: &[usize],
        noise_rng: &mut rng::Rng,
        adam: &mut Adam,
    ) -> Result<EpochLoss> {
        let mut tape = Tape::new();
        let x = tape.constant(cubes.batch(batch));
        let noise = sample_noise(&[batch.len(), LATENT], noise_rng);
        let out = self.forward(&mut tape, x, &noise, BnMode::Train)?;
        let dist = loss_distribution(&mut tape, out.mu, out.logvar)?;
        let recon = loss_reconstruction(&mut tape, x, out.recon)?;
        let total = tape.add(dist, recon)?;
        let grads = tape.backward(total)?;
        let grads: Vec<_> = out.params.iter().map(|&v| grads.get(v)).collect();
        adam.step(self.params_mut(), &grads)?;
        Ok(EpochLoss {
            distribution: tape.value(dist).item(),
            reconstruction: tape.value(recon).item(),
            total: tape.value(total).item(),
        })
    }
}

/// Trains a fresh model on shuffled mini-batches with Adam and exports the
/// pooled features of every pixel.
pub fn pretrain(cubes: &PixelCubes, config: &PretrainConfig) -> Result<Pretrained> {
    let (mut vae, history) = train_model(cubes, config)?;
    let features = vae.pixel_features(cubes, config.batch_size)?;
    Ok(Pretrained { vae, features, history })
}

/// The training half of [`pretrain`], without the feature export.
pub fn train_model(cubes: &PixelCubes, config: &PretrainConfig) -> Result<(Vae, Vec<EpochLoss>)> {
    config.validate()?;
    let arch = VaeArchitecture::new(cubes.bands(), cubes.window())?;
    let mut vae = Vae::new(arch, config.seed);
    let mut order = training_set(cubes.len(), config);
    if order.len() < 2 {
        return Err(Error::Parameter("VAE pre-training needs at least two cubes".into()));
    }
    let mut adam = Adam::new(AdamConfig::new(config.lr, config.weight_decay));
    let mut shuffle_rng = rng::stream(config.seed, rng::VAE_SHUFFLE);
    let mut noise_rng = rng::stream(config.seed, rng::VAE_NOISE);
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0;
        // a trailing batch of one cannot be batch-normalized in train mode
        for batch in order.chunks(config.batch_size).filter(|b| b.len() >= 2) {
            let l = vae.train_step(cubes, batch, &mut noise_rng, &mut adam)?;
            sums.0 += l.distribution;
            sums.1 += l.reconstruction;
            sums.2 += l.total;
            batches += 1;
        }
        let n = batches as f64;
        history.push(EpochLoss {
            distribution: sums.0 / n,
            reconstruction: sums.1 / n,
            total: sums.2 / n,
        });
    }
    Ok((vae, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi_io::{extract_pixel_cubes, HsiCube};

    #[test]
    fn subset_is_sorted_and_seeded() {
        let config = PretrainConfig {
            max_cubes: 5,
            seed: 3,
            ..PretrainConfig::default()
        };
        let a = training_set(100, &config);
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(a, training_set(100, &config));
        assert_eq!(training_set(4, &config), vec![0, 1, 2, 3]);
    }

    #[test]
    fn tiny_pretraining_is_deterministic() {
        let values = (0..6 * 6 * 2).map(|i| ((i * 7) % 11) as f64 / 11.0).collect();
        let cube = HsiCube::new(6, 6, 2, values).unwrap();
        let cubes = extract_pixel_cubes(&cube, 9).unwrap();
        let config = PretrainConfig {
            epochs: 1,
            batch_size: 8,
            max_cubes: 16,
            seed: 5,
            ..PretrainConfig::default()
        };
        let a = pretrain(&cubes, &config).unwrap();
        let b = pretrain(&cubes, &config).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.features.rows(), 36);
        assert_eq!(a.features.cols(), 1024);
        assert!(a.history[0].total.is_finite());
        assert!(pretrain(
            &cubes,
            &PretrainConfig {
                batch_size: 1,
                ..config
            }
        )
        .is_err());
    }
}
