use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hsi_io::{HsiCube, LabelRaster};
use crate::rng;

/// Class spectra are redrawn until every pair is below this cosine.
pub const MAX_COSINE: f64 = 0.9;
const MAX_DRAWS: usize = 1000;

/// A blocky synthetic scene: the image is tiled by a near-square grid with
/// one tile per class (2x2 quadrants for four classes), each class a random
/// non-negative unit spectrum, plus Gaussian noise. When the grid has more
/// tiles than classes the spare tiles cycle through the classes again.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            bands: 8,
            classes: 4,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SynthSpec {
    /// Tile grid as (rows, columns).
    fn grid(&self) -> (usize, usize) {
        let cols = (1..=self.classes).find(|c| c * c >= self.classes).unwrap_or(1);
        (self.classes.div_ceil(cols), cols)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::Parameter("synthetic sizes must be positive".into()));
        }
        if self.classes == 0 || self.classes > u32::MAX as usize {
            return Err(Error::Parameter(format!("invalid class count {}", self.classes)));
        }
        if self.bands < 2 && self.classes > 1 {
            return Err(Error::Parameter("distinct unit spectra need at least 2 bands".into()));
        }
        let (rows, cols) = self.grid();
        if rows > self.height || cols > self.width {
            return Err(Error::Parameter(format!(
                "a {}x{} image cannot hold a {rows}x{cols} grid of class tiles",
                self.height, self.width
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Parameter(format!(
                "noise level must be non-negative, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    /// Class id (1-based) of a pixel.
    pub fn class_at(&self, row: usize, col: usize) -> u32 {
        let (rows, cols) = self.grid();
        let tr = row * rows / self.height;
        let tc = col * cols / self.width;
        ((tr * cols + tc) % self.classes) as u32 + 1
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn draw_spectra(spec: &SynthSpec, rng: &mut rng::Rng) -> Result<Vec<Vec<f64>>> {
    for _ in 0..MAX_DRAWS {
        let spectra: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| {
                let v: Vec<f64> = (0..spec.bands).map(|_| rng.random_range(0.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let separated =
            (0..spec.classes).all(|i| (i + 1..spec.classes).all(|j| cosine(&spectra[i], &spectra[j]) < MAX_COSINE));
        if separated {
            return Ok(spectra);
        }
    }
    Err(Error::Parameter(format!(
        "no {} spectra with pairwise cosine below {MAX_COSINE} in {MAX_DRAWS} draws",
        spec.classes
    )))
}

/// Returns the scene and its ground truth, plus the class spectra.
pub fn synthesize(spec: &SynthSpec) -> Result<(HsiCube, LabelRaster, Vec<Vec<f64>>)> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::SYNTH);
    let spectra = draw_spectra(spec, &mut rng)?;
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut values = Vec::with_capacity(spec.height * spec.width * spec.bands);
    let mut ids = Vec::with_capacity(spec.height * spec.width);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let k = spec.class_at(r, c);
            ids.push(k);
            for &s in &spectra[k as usize - 1] {
                values.push(s + normal.sample(&mut rng));
            }
        }
    }
    let cube = HsiCube::new(spec.height, spec.width, spec.bands, values)?;
    let labels = LabelRaster::new(spec.height, spec.width, ids)?;
    Ok((cube, labels, spectra))
}
