use super::{check_target, Segmentation, Segmenter};
use crate::error::Result;
use crate::hsi_io::HsiCube;

/// Regular rectangular blocks, ignoring spectra.
#[derive(Clone, Copy, Debug, Default)]
pub struct GridSegmenter;

/// Seed grid `(rows, cols)` whose product approximates `target` while
/// following the image aspect ratio.
pub(crate) fn grid_shape(height: usize, width: usize, target: usize) -> (usize, usize) {
    let rows = ((target as f64 * height as f64 / width as f64).sqrt().round() as usize).clamp(1, height);
    let cols = ((target as f64 / rows as f64).round() as usize).clamp(1, width);
    (rows, cols)
}

impl Segmenter for GridSegmenter {
    fn segment(&self, cube: &HsiCube, target: usize) -> Result<Segmentation> {
        check_target(cube, target)?;
        let (h, w) = (cube.height(), cube.width());
        let (rows, cols) = grid_shape(h, w, target);
        let labels = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                ((r * rows / h) * cols + c * cols / w) as u32
            })
            .collect();
        Segmentation::from_labels(h, w, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_tile_the_image() {
        let cube = HsiCube::new(10, 10, 1, vec![0.0; 100]).unwrap();
        let seg = GridSegmenter.segment(&cube, 4).unwrap();
        assert_eq!(seg.count(), 4);
        assert!((0..4).all(|i| seg.members(i).len() == 25));
        assert!(seg.is_four_connected());
    }

    #[test]
    fn grid_shape_tracks_aspect() {
        assert_eq!(grid_shape(48, 48, 64), (8, 8));
        assert_eq!(grid_shape(145, 145, 1100), (33, 33));
        assert_eq!(grid_shape(10, 40, 16), (2, 8));
        assert_eq!(grid_shape(3, 3, 9), (3, 3));
    }
}
