use super::HsiCube;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reflects `i` into `0..n` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
pub fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// One `w x w x h` cube per pixel, centered on it, with mirrored borders.
///
/// Cubes are materialized on demand; the collection only keeps the source
/// cube, so memory stays linear in the image size.
#[derive(Clone, Debug)]
pub struct PixelCubes {
    cube: HsiCube,
    window: usize,
}

/// Prepares per-pixel cubes of odd side `window` over a (reduced) cube.
pub fn extract_pixel_cubes(cube: &HsiCube, window: usize) -> Result<PixelCubes> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Parameter(format!("window size must be odd, got {window}")));
    }
    Ok(PixelCubes {
        cube: cube.clone(),
        window,
    })
}

impl PixelCubes {
    pub fn len(&self) -> usize {
        self.cube.pixels()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn bands(&self) -> usize {
        self.cube.bands()
    }

    pub fn cube_len(&self) -> usize {
        self.window * self.window * self.cube.bands()
    }

    /// Row and column of the pixel at the center of cube `i`.
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i / self.cube.width(), i % self.cube.width())
    }

    /// Writes cube `i` into `out` laid out `[band][row][col]`.
    pub fn fill(&self, i: usize, out: &mut [f64]) {
        let (w, bands) = (self.window, self.cube.bands());
        let half = (w / 2) as isize;
        let (r0, c0) = self.coords(i);
        let (h_img, w_img) = (self.cube.height(), self.cube.width());
        for dr in 0..w {
            let r = mirror_index(r0 as isize + dr as isize - half, h_img);
            for dc in 0..w {
                let c = mirror_index(c0 as isize + dc as isize - half, w_img);
                let spectrum = self.cube.spectrum(r * w_img + c);
                for (b, &v) in spectrum.iter().enumerate() {
                    out[(b * w + dr) * w + dc] = v;
                }
            }
        }
        debug_assert_eq!(out.len(), bands * w * w);
    }

    pub fn get(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.cube_len()];
        self.fill(i, &mut out);
        out
    }

    /// Stacks the selected cubes into a network input `[B, 1, h, w, w]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let len = self.cube_len();
        let mut data = vec![0.0; indices.len() * len];
        for (slot, &i) in data.chunks_mut(len).zip(indices) {
            self.fill(i, slot);
        }
        Tensor::new(vec![indices.len(), 1, self.bands(), self.window, self.window], data).expect("batch shape")
    }
}
