//! Hybrid 3-D/2-D convolutional variational autoencoder over pixel cubes.
//!
//! The encoder runs three valid 3-D convolutions (3x3 spatial kernels, depth
//! kernels shrinking along the spectral axis), folds the remaining spectral
//! depth into channels, applies one 3x3 2-D convolution and pools to a 4x4
//! grid. The flattened pooling output is the pixel feature; two linear heads
//! on top of a 512-unit layer give the latent mean and log-variance. The
//! decoder mirrors the encoder with transposed convolutions.

mod train;

pub use train::{pretrain, train_model, EpochLoss, PretrainConfig, Pretrained};

use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::hsi_io::{FeatureMatrix, PixelCubes};
use crate::rng::{self, Rng};
use crate::tensor::{BatchNormStats, BnMode, Tape, Tensor, Var};

const CHANNELS_3D: [usize; 3] = [8, 16, 32];
const CHANNELS_2D: usize = 64;
const POOL: usize = 4;
const HIDDEN: usize = 512;
const DECODER_HIDDEN: usize = 256;
/// Latent dimension of the mean and log-variance heads.
pub const LATENT: usize = 128;
/// Reference depth kernels for the three 3-D stages.
pub const DEPTH_KERNELS: [usize; 3] = [7, 5, 3];
/// Clamp range of the log-variance head.
pub const LOGVAR_RANGE: (f64, f64) = (-10.0, 10.0);

/// Number of leading parameters needed to compute pooled features.
const ENCODER_CONV_PARAMS: usize = 16;

/// Layer sizes derived from the band count and window of the input cubes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VaeArchitecture {
    pub bands: usize,
    pub window: usize,
    pub depth_kernels: [usize; 3],
}

impl VaeArchitecture {
    /// Each depth kernel is the reference kernel, or the largest odd size
    /// that still fits the remaining spectral depth.
    pub fn new(bands: usize, window: usize) -> Result<Self> {
        if bands == 0 {
            return Err(Error::Parameter("VAE needs at least one band".into()));
        }
        if window < 9 || window.is_multiple_of(2) {
            return Err(Error::Parameter(format!(
                "VAE window must be odd and at least 9, got {window}"
            )));
        }
        let mut depth = bands;
        let mut depth_kernels = [0; 3];
        for (k, &reference) in depth_kernels.iter_mut().zip(&DEPTH_KERNELS) {
            let fit = if depth % 2 == 1 { depth } else { depth - 1 };
            *k = reference.min(fit);
            depth = depth - *k + 1;
        }
        Ok(Self {
            bands,
            window,
            depth_kernels,
        })
    }

    /// Spectral depth before and after each 3-D stage.
    pub fn depths(&self) -> [usize; 4] {
        let mut d = [self.bands; 4];
        for i in 0..3 {
            d[i + 1] = d[i] - self.depth_kernels[i] + 1;
        }
        d
    }

    /// Spatial side before the first stage and after each of the four
    /// convolutions.
    pub fn sides(&self) -> [usize; 5] {
        std::array::from_fn(|i| self.window - 2 * i)
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        CHANNELS_2D * POOL * POOL
    }

    /// Channels after folding spectral depth into the channel axis.
    pub fn folded_channels(&self) -> usize {
        CHANNELS_3D[2] * self.depths()[3]
    }

    fn decoder_fc_out(&self) -> usize {
        let s = self.sides()[4];
        CHANNELS_2D * s * s
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let k = self.depth_kernels;
        let mut shapes = Vec::new();
        let mut conv_block = |w: Vec<usize>, out: usize| {
            shapes.push(w);
            shapes.extend([vec![out], vec![out], vec![out]]);
        };
        let ins = [1, CHANNELS_3D[0], CHANNELS_3D[1]];
        for i in 0..3 {
            conv_block(vec![CHANNELS_3D[i], ins[i], k[i], 3, 3], CHANNELS_3D[i]);
        }
        conv_block(vec![CHANNELS_2D, self.folded_channels(), 3, 3], CHANNELS_2D);
        // deconv weights are [cin, cout, ...]
        conv_block(vec![CHANNELS_2D, self.folded_channels(), 3, 3], self.folded_channels());
        conv_block(vec![CHANNELS_3D[2], CHANNELS_3D[1], k[2], 3, 3], CHANNELS_3D[1]);
        conv_block(vec![CHANNELS_3D[1], CHANNELS_3D[0], k[1], 3, 3], CHANNELS_3D[0]);
        conv_block(vec![CHANNELS_3D[0], 1, k[0], 3, 3], 1);
        let dense = [
            (self.feature_dim(), HIDDEN),
            (HIDDEN, LATENT),
            (HIDDEN, LATENT),
            (LATENT, DECODER_HIDDEN),
            (DECODER_HIDDEN, self.decoder_fc_out()),
        ];
        // encoder blocks first, then dense layers, then decoder blocks
        let decoder_blocks = shapes.split_off(ENCODER_CONV_PARAMS);
        for (i, o) in dense {
            shapes.push(vec![i, o]);
            shapes.push(vec![o]);
        }
        shapes.extend(decoder_blocks);
        shapes
    }

    fn bn_channels(&self) -> Vec<usize> {
        vec![
            CHANNELS_3D[0],
            CHANNELS_3D[1],
            CHANNELS_3D[2],
            CHANNELS_2D,
            self.folded_channels(),
            CHANNELS_3D[1],
            CHANNELS_3D[0],
            1,
        ]
    }
}

/// Named stage shapes recorded during a forward pass.
pub type ShapeTrace = Vec<(&'static str, Vec<usize>)>;

/// Tape handles produced by [`Vae::forward`].
#[derive(Clone, Debug)]
pub struct VaeOutput {
    pub params: Vec<Var>,
    pub pooled: Var,
    pub mu: Var,
    pub logvar: Var,
    pub latent: Var,
    pub recon: Var,
    pub trace: ShapeTrace,
}

#[derive(Clone, Debug)]
pub struct Vae {
    arch: VaeArchitecture,
    params: Vec<Tensor>,
    stats: Vec<BatchNormStats>,
}

fn fan_in(shape: &[usize], transposed: bool) -> usize {
    match shape.len() {
        2 => shape[0],
        _ if transposed => shape[1] * shape[2..].iter().product::<usize>(),
        _ => shape[1..].iter().product(),
    }
}

impl Vae {
    /// Kaiming-uniform weights, zero biases, unit batch-norm scales.
    pub fn new(arch: VaeArchitecture, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::VAE_INIT);
        let shapes = arch.param_shapes();
        let decoder_start = shapes.len() - 16;
        let mut params = Vec::with_capacity(shapes.len());
        let mut i = 0;
        while i < shapes.len() {
            let shape = &shapes[i];
            if shape.len() >= 4 {
                let transposed = i >= decoder_start;
                params.push(kaiming(shape, fan_in(shape, transposed), &mut rng));
                params.push(Tensor::zeros(&shapes[i + 1]));
                params.push(Tensor::full(&shapes[i + 2], 1.0));
                params.push(Tensor::zeros(&shapes[i + 3]));
                i += 4;
            } else {
                params.push(kaiming(shape, fan_in(shape, false), &mut rng));
                params.push(Tensor::zeros(&shapes[i + 1]));
                i += 2;
            }
        }
        let stats = arch.bn_channels().into_iter().map(BatchNormStats::new).collect();
        Self { arch, params, stats }
    }

    /// Reassembles a model from stored tensors, checking every shape.
    pub fn from_parts(arch: VaeArchitecture, params: Vec<Tensor>, stats: Vec<BatchNormStats>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(Error::Validation(format!(
                "VAE weights do not match the architecture for {} bands, window {}",
                arch.bands, arch.window
            )));
        }
        let channels = arch.bn_channels();
        if stats.len() != channels.len() || stats.iter().zip(&channels).any(|(s, &c)| s.mean.len() != c) {
            return Err(Error::Validation("VAE batch-norm statistics do not match".into()));
        }
        Ok(Self { arch, params, stats })
    }

    pub fn architecture(&self) -> &VaeArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn stats(&self) -> &[BatchNormStats] {
        &self.stats
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_tensors(path, &self.params, &self.stats)
    }

    pub fn load(path: impl AsRef<Path>, arch: VaeArchitecture) -> Result<Self> {
        let (params, stats) = checkpoint::load_tensors(path)?;
        Self::from_parts(arch, params, stats)
    }

    fn register(&self, tape: &mut Tape, count: usize, trainable: bool) -> Vec<Var> {
        self.params[..count]
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    fn conv_block(
        &mut self,
        tape: &mut Tape,
        x: Var,
        p: &[Var],
        layer: usize,
        mode: BnMode,
        deconv: bool,
    ) -> Result<Var> {
        let y = match (deconv, tape.shape(x).len()) {
            (false, 5) => tape.conv3d(x, p[0], p[1])?,
            (false, _) => tape.conv2d(x, p[0], p[1])?,
            (true, 5) => tape.deconv3d(x, p[0], p[1])?,
            (true, _) => tape.deconv2d(x, p[0], p[1])?,
        };
        tape.batchnorm(y, p[2], p[3], &mut self.stats[layer], mode)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (h, w) = (self.arch.bands, self.arch.window);
        if shape.len() != 5 || shape[1] != 1 || shape[2] != h || shape[3] != w || shape[4] != w {
            return Err(Error::dim(
                "vae",
                format!("expected cubes [B, 1, {h}, {w}, {w}], got {shape:?}"),
            ));
        }
        Ok(())
    }

    fn encode_pooled(
        &mut self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        mode: BnMode,
        trace: &mut ShapeTrace,
    ) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let batch = tape.shape(x)[0];
        let mut h = x;
        for (i, name) in ["conv3d_1", "conv3d_2", "conv3d_3"].into_iter().enumerate() {
            h = self.conv_block(tape, h, &p[4 * i..], i, mode, false)?;
            h = tape.relu(h);
            trace.push((name, tape.shape(h).to_vec()));
        }
        let s3 = self.arch.sides()[3];
        h = tape.reshape(h, &[batch, self.arch.folded_channels(), s3, s3])?;
        trace.push(("fold", tape.shape(h).to_vec()));
        h = self.conv_block(tape, h, &p[12..], 3, mode, false)?;
        h = tape.relu(h);
        trace.push(("conv2d", tape.shape(h).to_vec()));
        h = tape.adaptive_avg_pool2d(h, POOL, POOL)?;
        trace.push(("pool", tape.shape(h).to_vec()));
        let pooled = tape.reshape(h, &[batch, self.arch.feature_dim()])?;
        trace.push(("flatten", tape.shape(pooled).to_vec()));
        Ok(pooled)
    }

    /// Full pass: encoder, reparameterization with the given standard-normal
    /// `noise` (shape `[B, 128]`) and decoder. Parameters are registered as
    /// trainable leaves in the order of [`Vae::params`].
    pub fn forward(&mut self, tape: &mut Tape, x: Var, noise: &Tensor, mode: BnMode) -> Result<VaeOutput> {
        let p = self.register(tape, self.params.len(), true);
        let mut trace = ShapeTrace::new();
        let pooled = self.encode_pooled(tape, &p, x, mode, &mut trace)?;
        let batch = tape.shape(x)[0];

        let d = &p[ENCODER_CONV_PARAMS..];
        let hidden = tape.linear(pooled, d[0], d[1])?;
        let hidden = tape.relu(hidden);
        trace.push(("fc", tape.shape(hidden).to_vec()));
        let mu = tape.linear(hidden, d[2], d[3])?;
        let logvar = tape.linear(hidden, d[4], d[5])?;
        let logvar = tape.clamp(logvar, LOGVAR_RANGE.0, LOGVAR_RANGE.1);
        trace.push(("mu", tape.shape(mu).to_vec()));
        let eps = tape.constant(noise.clone());
        let latent = reparameterize(tape, mu, logvar, eps)?;

        let mut h = tape.linear(latent, d[6], d[7])?;
        h = tape.relu(h);
        trace.push(("dec_fc1", tape.shape(h).to_vec()));
        h = tape.linear(h, d[8], d[9])?;
        h = tape.relu(h);
        trace.push(("dec_fc2", tape.shape(h).to_vec()));
        let [_, _, _, s3, s4] = self.arch.sides();
        h = tape.reshape(h, &[batch, CHANNELS_2D, s4, s4])?;
        trace.push(("dec_unflatten", tape.shape(h).to_vec()));

        let q = &d[10..];
        h = self.conv_block(tape, h, q, 4, mode, true)?;
        h = tape.relu(h);
        trace.push(("deconv2d", tape.shape(h).to_vec()));
        h = tape.reshape(h, &[batch, CHANNELS_3D[2], self.arch.depths()[3], s3, s3])?;
        trace.push(("unfold", tape.shape(h).to_vec()));
        for (i, name) in ["deconv3d_1", "deconv3d_2", "deconv3d_3"].into_iter().enumerate() {
            h = self.conv_block(tape, h, &q[4 * (i + 1)..], 5 + i, mode, true)?;
            if i < 2 {
                h = tape.relu(h);
            }
            trace.push((name, tape.shape(h).to_vec()));
        }
        Ok(VaeOutput {
            params: p,
            pooled,
            mu,
            logvar,
            latent,
            recon: h,
            trace,
        })
    }

    /// Pooled encoder features of every cube, computed in evaluation mode.
    pub fn pixel_features(&mut self, cubes: &PixelCubes, batch: usize) -> Result<FeatureMatrix> {
        if cubes.window() != self.arch.window || cubes.bands() != self.arch.bands {
            return Err(Error::dim(
                "vae",
                format!(
                    "cubes are {}x{}x{}, model expects {}x{}x{}",
                    cubes.window(),
                    cubes.window(),
                    cubes.bands(),
                    self.arch.window,
                    self.arch.window,
                    self.arch.bands
                ),
            ));
        }
        let d = self.arch.feature_dim();
        let mut values = Vec::with_capacity(cubes.len() * d);
        let indices: Vec<usize> = (0..cubes.len()).collect();
        for chunk in indices.chunks(batch.max(1)) {
            let mut tape = Tape::new();
            let p = self.register(&mut tape, ENCODER_CONV_PARAMS, false);
            let x = tape.constant(cubes.batch(chunk));
            let pooled = self.encode_pooled(&mut tape, &p, x, BnMode::Eval, &mut ShapeTrace::new())?;
            values.extend_from_slice(tape.value(pooled).data());
        }
        FeatureMatrix::from_f64(cubes.len(), d, &values)
    }
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Standard-normal noise of the given shape.
pub fn sample_noise(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `q = mu + eps * exp(logvar / 2)`; `eps` should be a constant leaf.
pub fn reparameterize(tape: &mut Tape, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.scale(logvar, 0.5);
    let sigma = tape.exp(half);
    let spread = tape.mul(eps, sigma)?;
    tape.add(mu, spread)
}

/// `1/2 sum(mu^2 + exp(logvar) - logvar - 1)`, averaged over the batch axis.
pub fn loss_distribution(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let batch = tape.shape(mu).first().copied().unwrap_or(1).max(1);
    let mu_sq = tape.mul(mu, mu)?;
    let var = tape.exp(logvar);
    let a = tape.add(mu_sq, var)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum(c);
    Ok(tape.scale(s, 0.5 / batch as f64))
}

/// `1/2 ||p - recon||^2`, averaged over the batch axis.
pub fn loss_reconstruction(tape: &mut Tape, p: Var, recon: Var) -> Result<Var> {
    let batch = tape.shape(p).first().copied().unwrap_or(1).max(1);
    let f = tape.frobenius_sq_diff(p, recon)?;
    Ok(tape.scale(f, 0.5 / batch as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_kernels_follow_band_count() {
        assert_eq!(VaeArchitecture::new(30, 27).unwrap().depth_kernels, [7, 5, 3]);
        assert_eq!(VaeArchitecture::new(30, 27).unwrap().depths(), [30, 24, 20, 18]);
        assert_eq!(VaeArchitecture::new(15, 27).unwrap().depth_kernels, [7, 5, 3]);
        assert_eq!(VaeArchitecture::new(8, 13).unwrap().depth_kernels, [7, 1, 1]);
        assert_eq!(VaeArchitecture::new(2, 9).unwrap().depth_kernels, [1, 1, 1]);
        assert!(VaeArchitecture::new(8, 7).is_err());
        assert!(VaeArchitecture::new(8, 14).is_err());
    }

    #[test]
    fn reference_architecture_dimensions() {
        let arch = VaeArchitecture::new(30, 27).unwrap();
        assert_eq!(arch.folded_channels(), 576);
        assert_eq!(arch.decoder_fc_out(), 23104);
        assert_eq!(arch.feature_dim(), 1024);
        let shapes = arch.param_shapes();
        assert_eq!(shapes[0], vec![8, 1, 7, 3, 3]);
        assert_eq!(shapes[12], vec![64, 576, 3, 3]);
        assert_eq!(shapes[16], vec![1024, 512]);
        assert_eq!(shapes[24], vec![256, 23104]);
        assert_eq!(shapes[26], vec![64, 576, 3, 3]);
        assert_eq!(shapes.last().unwrap(), &vec![1]);
    }

    #[test]
    fn small_model_round_trips_through_checkpoint() {
        let arch = VaeArchitecture::new(3, 9).unwrap();
        let vae = Vae::new(arch, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vae.spgv");
        vae.save(&path).unwrap();
        let back = Vae::load(&path, arch).unwrap();
        assert_eq!(back.params(), vae.params());
        let other = VaeArchitecture::new(4, 9).unwrap();
        assert!(Vae::load(&path, other).is_err());
    }

    #[test]
    fn distribution_loss_identities() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::zeros(&[1, 3]));
        let lv = tape.constant(Tensor::zeros(&[1, 3]));
        let l = loss_distribution(&mut tape, mu, lv).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let mu = tape.constant(Tensor::full(&[1, 1], 1.0));
        let lv = tape.constant(Tensor::zeros(&[1, 1]));
        let l = loss_distribution(&mut tape, mu, lv).unwrap();
        assert_eq!(tape.value(l).item(), 0.5);
    }
}
