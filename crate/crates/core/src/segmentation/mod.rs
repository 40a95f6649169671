//! Superpixel segmentation of the image plane.
//!
//! Two backends implement [`Segmenter`]: [`Slic`], a localized k-means in
//! joint spectral/spatial space, and [`GridSegmenter`], regular blocks.

mod grid;
mod slic;

pub use grid::GridSegmenter;
pub use slic::Slic;

use std::path::Path;

use crate::error::{Error, Result};
use crate::hsi_io::{self, HsiCube, LabelRaster};
use crate::sparse::CsrMatrix;

/// A partition of the `H x W` raster into `M` non-empty superpixels with ids
/// `0..M`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    members: Vec<Vec<usize>>,
}

pub trait Segmenter {
    /// Splits `cube` into roughly `target` superpixels.
    fn segment(&self, cube: &HsiCube, target: usize) -> Result<Segmentation>;
}

/// SLIC segmentation with the given compactness and the default iteration
/// count.
pub fn segment(cube: &HsiCube, target: usize, compactness: f64) -> Result<Segmentation> {
    Slic::new(compactness).segment(cube, target)
}

pub(crate) fn check_target(cube: &HsiCube, target: usize) -> Result<()> {
    if target == 0 || target > cube.pixels() {
        return Err(Error::Parameter(format!(
            "superpixel count {target} must lie in 1..={}",
            cube.pixels()
        )));
    }
    Ok(())
}

impl Segmentation {
    /// Builds a segmentation from a raster of ids that must cover `0..M`
    /// with no gaps.
    pub fn from_labels(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width || labels.is_empty() {
            return Err(Error::dim(
                "segmentation",
                format!("{height}x{width} raster with {} labels", labels.len()),
            ));
        }
        let count = labels.iter().copied().max().expect("non-empty") as usize + 1;
        let mut members = vec![Vec::new(); count];
        for (i, &l) in labels.iter().enumerate() {
            members[l as usize].push(i);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::Validation(format!("superpixel {empty} has no pixels")));
        }
        Ok(Self {
            height,
            width,
            labels,
            members,
        })
    }

    /// Reads a segmentation stored as a label raster with ids shifted by one.
    pub fn from_label_raster(raster: &LabelRaster) -> Result<Self> {
        if raster.ids().contains(&0) {
            return Err(Error::Validation(
                "segmentation raster contains id 0; ids are stored shifted by +1".into(),
            ));
        }
        let labels = raster.ids().iter().map(|&id| id - 1).collect();
        Self::from_labels(raster.height(), raster.width(), labels)
    }

    pub fn to_label_raster(&self) -> LabelRaster {
        let ids = self.labels.iter().map(|&l| l + 1).collect();
        LabelRaster::new(self.height, self.width, ids).expect("matching size")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        hsi_io::save_labels(path, &self.to_label_raster())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_label_raster(&hsi_io::load_labels(path)?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    /// Number of superpixels `M`.
    pub fn count(&self) -> usize {
        self.members.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, pixel: usize) -> usize {
        self.labels[pixel] as usize
    }

    /// Pixel indices (row-major) belonging to superpixel `i`, ascending.
    pub fn members(&self, i: usize) -> &[usize] {
        &self.members[i]
    }

    /// The binary `M x N` map matrix and its row-normalized form.
    pub fn map_matrix(&self) -> (CsrMatrix, CsrMatrix) {
        let triplets = self
            .labels
            .iter()
            .enumerate()
            .map(|(j, &l)| (l as usize, j, 1.0))
            .collect();
        let t = CsrMatrix::from_triplets(self.count(), self.pixels(), triplets).expect("labels index superpixels");
        let normalized = t.row_normalized();
        (t, normalized)
    }

    /// True when every superpixel is a single 4-connected region.
    pub fn is_four_connected(&self) -> bool {
        let components = connected_components(&self.labels, self.height, self.width);
        let mut seen = vec![u32::MAX; self.count()];
        for (i, &c) in components.iter().enumerate() {
            let l = self.labels[i] as usize;
            if seen[l] == u32::MAX {
                seen[l] = c;
            } else if seen[l] != c {
                return false;
            }
        }
        true
    }
}

/// 4-connected component ids (dense, in raster order of first pixel) of
/// equal-label regions, computed with two-pass union-find labeling.
pub(crate) fn connected_components(labels: &[u32], height: usize, width: usize) -> Vec<u32> {
    let n = labels.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if c > 0 && labels[i - 1] == labels[i] {
                let (a, b) = (find(&mut parent, i - 1), find(&mut parent, i));
                parent[a.max(b)] = a.min(b);
            }
            if r > 0 && labels[i - width] == labels[i] {
                let (a, b) = (find(&mut parent, i - width), find(&mut parent, i));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut ids = vec![u32::MAX; n];
    let mut next = 0u32;
    let mut out = vec![0u32; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        if ids[root] == u32::MAX {
            ids[root] = next;
            next += 1;
        }
        out[i] = ids[root];
    }
    out
}

/// Share of labeled pixels that carry the dominant class of their
/// superpixel, as a percentage. Superpixels without labeled pixels are left
/// out of both sums.
pub fn sp_segmentation_accuracy(seg: &Segmentation, labels: &LabelRaster) -> Result<f64> {
    if labels.height() != seg.height() || labels.width() != seg.width() {
        return Err(Error::PairMismatch(format!(
            "labels are {}x{}, segmentation is {}x{}",
            labels.height(),
            labels.width(),
            seg.height(),
            seg.width()
        )));
    }
    let classes = labels.max_id() as usize;
    let (mut dominant, mut labeled) = (0usize, 0usize);
    let mut counts = vec![0usize; classes + 1];
    for i in 0..seg.count() {
        counts.iter_mut().for_each(|c| *c = 0);
        for &p in seg.members(i) {
            counts[labels.ids()[p] as usize] += 1;
        }
        let here: usize = counts[1..].iter().sum();
        if here > 0 {
            labeled += here;
            dominant += counts[1..].iter().copied().max().unwrap_or(0);
        }
    }
    if labeled == 0 {
        return Err(Error::Validation("no labeled pixels to score segmentation".into()));
    }
    Ok(100.0 * dominant as f64 / labeled as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_matrix_of_two_pixels_in_one_superpixel() {
        let seg = Segmentation::from_labels(1, 2, vec![0, 0]).unwrap();
        let (t, tn) = seg.map_matrix();
        assert_eq!(t.to_dense(), vec![1.0, 1.0]);
        assert_eq!(tn.to_dense(), vec![0.5, 0.5]);
    }

    #[test]
    fn singleton_superpixels_have_identical_maps() {
        let seg = Segmentation::from_labels(2, 2, vec![2, 0, 3, 1]).unwrap();
        let (t, tn) = seg.map_matrix();
        assert_eq!(t, tn);
    }

    #[test]
    fn gaps_in_ids_are_rejected() {
        assert!(Segmentation::from_labels(1, 3, vec![0, 2, 2]).is_err());
    }

    #[test]
    fn accuracy_counts_dominant_class() {
        // one superpixel with three pixels of class 1 and one of class 2
        let seg = Segmentation::from_labels(1, 4, vec![0; 4]).unwrap();
        let labels = LabelRaster::new(1, 4, vec![1, 2, 1, 1]).unwrap();
        assert_eq!(sp_segmentation_accuracy(&seg, &labels).unwrap(), 75.0);

        let seg6 = Segmentation::from_labels(1, 6, vec![0, 0, 0, 0, 1, 1]).unwrap();
        let with_unlabeled = LabelRaster::new(1, 6, vec![1, 2, 1, 1, 0, 0]).unwrap();
        assert_eq!(sp_segmentation_accuracy(&seg6, &with_unlabeled).unwrap(), 75.0);

        let none = LabelRaster::new(1, 4, vec![0; 4]).unwrap();
        assert!(sp_segmentation_accuracy(&seg, &none).is_err());
    }

    #[test]
    fn raster_round_trip_shifts_ids() {
        let seg = Segmentation::from_labels(2, 2, vec![0, 0, 1, 1]).unwrap();
        let raster = seg.to_label_raster();
        assert_eq!(raster.ids(), &[1, 1, 2, 2]);
        assert_eq!(Segmentation::from_label_raster(&raster).unwrap(), seg);
    }

    #[test]
    fn components_split_disconnected_regions() {
        let labels = [0, 1, 0, 0, 1, 1, 1, 1, 0];
        let comps = connected_components(&labels, 3, 3);
        assert_eq!(comps, vec![0, 1, 2, 0, 1, 1, 1, 1, 3]);
        let seg = Segmentation::from_labels(3, 3, labels.to_vec()).unwrap();
        assert!(!seg.is_four_connected());
    }
}
