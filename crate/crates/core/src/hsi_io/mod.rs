//! Hyperspectral cubes, label rasters, feature caches, PCA band reduction and
//! pixel-cube extraction.
//!
//! All three on-disk formats are little-endian: a four-byte magic, `u32`
//! dimensions, then a dense payload.
//!
//! | magic  | header          | payload                          |
//! |--------|-----------------|----------------------------------|
//! | `HSIF` | `H`, `W`, `C`   | `H*W*C` `f32`, pixel-major        |
//! | `HSIL` | `H`, `W`        | `H*W` `u32` class ids (0 = none) |
//! | `SPGF` | `N`, `d`        | `N*d` `f32`, row-major            |

mod cubes;
mod pca;

pub use cubes::{extract_pixel_cubes, mirror_index, PixelCubes};
pub use pca::{pca_reduce, symmetric_eigen, Pca, SymmetricEigen};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CUBE_MAGIC: [u8; 4] = *b"HSIF";
pub const LABEL_MAGIC: [u8; 4] = *b"HSIL";
pub const FEATURE_MAGIC: [u8; 4] = *b"SPGF";

/// An `H x W x C` reflectance volume stored pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Parameter(format!(
                "cube dimensions must be positive, got {height}x{width}x{bands}"
            )));
        }
        if values.len() != height * width * bands {
            return Err(Error::dim(
                "hsi_cube",
                format!(
                    "{height}x{width}x{bands} needs {} values, got {}",
                    height * width * bands,
                    values.len()
                ),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Spectrum of pixel `index` (row-major pixel order).
    pub fn spectrum(&self, index: usize) -> &[f64] {
        &self.values[index * self.bands..(index + 1) * self.bands]
    }

    pub fn at(&self, row: usize, col: usize, band: usize) -> f64 {
        self.values[(row * self.width + col) * self.bands + band]
    }
}

/// Per-pixel class ids; 0 marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRaster {
    height: usize,
    width: usize,
    ids: Vec<u32>,
}

impl LabelRaster {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::dim(
                "label_raster",
                format!("{height}x{width} needs {} ids, got {}", height * width, ids.len()),
            ));
        }
        Ok(Self { height, width, ids })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn max_id(&self) -> u32 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    pub fn labeled_count(&self) -> usize {
        self.ids.iter().filter(|&&id| id != 0).count()
    }

    /// Rejects rasters whose ids exceed `classes`.
    pub fn validate(&self, classes: u32) -> Result<()> {
        match self.ids.iter().position(|&id| id > classes) {
            Some(i) => Err(Error::Validation(format!(
                "label {} at pixel {i} exceeds class count {classes}",
                self.ids[i]
            ))),
            None => Ok(()),
        }
    }

    /// Rejects a raster whose size differs from `cube`.
    pub fn check_pair(&self, cube: &HsiCube) -> Result<()> {
        if self.height != cube.height() || self.width != cube.width() {
            return Err(Error::PairMismatch(format!(
                "labels are {}x{}, cube is {}x{}",
                self.height,
                self.width,
                cube.height(),
                cube.width()
            )));
        }
        Ok(())
    }
}

/// `N x d` pixel features as stored in the feature cache.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dim(
                "feature_matrix",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(rows, cols, values.iter().map(|&v| v as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path, magic: [u8; 4], header_words: usize) -> Result<(Self, Vec<usize>)> {
        let bytes = fs::read(path)?;
        let header_len = 4 + 4 * header_words;
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: header_len as u64,
                found: bytes.len() as u64,
            });
        }
        let found: [u8; 4] = bytes[..4].try_into().expect("four bytes");
        if found != magic {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: magic,
                found,
            });
        }
        if bytes.len() < header_len {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: header_len as u64,
                found: bytes.len() as u64,
            });
        }
        let mut reader = Self { path, bytes, pos: 4 };
        let dims = (0..header_words).map(|_| reader.u32() as usize).collect();
        Ok((reader, dims))
    }

    fn expect_payload(&self, words: usize) -> Result<()> {
        let expected = (self.pos + 4 * words) as u64;
        let found = self.bytes.len() as u64;
        let path = self.path.to_path_buf();
        match found.cmp(&expected) {
            std::cmp::Ordering::Less => Err(Error::Truncated { path, expected, found }),
            std::cmp::Ordering::Greater => Err(Error::TrailingBytes { path, expected, found }),
            std::cmp::Ordering::Equal => Ok(()),
        }
    }

    fn u32(&mut self) -> u32 {
        let v = u32::from_le_bytes(self.bytes[self.pos..self.pos + 4].try_into().expect("4 bytes"));
        self.pos += 4;
        v
    }

    fn f32(&mut self) -> f32 {
        f32::from_bits(self.u32())
    }
}

fn write_file(path: &Path, magic: [u8; 4], header: &[usize], payload: impl Iterator<Item = [u8; 4]>) -> Result<()> {
    let mut buf = Vec::with_capacity(4 + 4 * header.len());
    buf.extend_from_slice(&magic);
    for &h in header {
        let h = u32::try_from(h).map_err(|_| Error::Parameter(format!("dimension {h} exceeds u32")))?;
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for word in payload {
        buf.extend_from_slice(&word);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_hsi(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let (mut r, dims) = Reader::open(path, CUBE_MAGIC, 3)?;
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    r.expect_payload(h * w * c)?;
    let values = (0..h * w * c).map(|_| r.f32() as f64).collect();
    HsiCube::new(h, w, c, values)
}

/// Writes the cube with values rounded to `f32`.
pub fn save_hsi(path: impl AsRef<Path>, cube: &HsiCube) -> Result<()> {
    write_file(
        path.as_ref(),
        CUBE_MAGIC,
        &[cube.height, cube.width, cube.bands],
        cube.values.iter().map(|&v| (v as f32).to_le_bytes()),
    )
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelRaster> {
    let path = path.as_ref();
    let (mut r, dims) = Reader::open(path, LABEL_MAGIC, 2)?;
    let (h, w) = (dims[0], dims[1]);
    r.expect_payload(h * w)?;
    let ids = (0..h * w).map(|_| r.u32()).collect();
    LabelRaster::new(h, w, ids)
}

/// Loads a label raster and rejects ids above `classes`.
pub fn load_labels_checked(path: impl AsRef<Path>, classes: u32) -> Result<LabelRaster> {
    let labels = load_labels(path)?;
    labels.validate(classes)?;
    Ok(labels)
}

pub fn save_labels(path: impl AsRef<Path>, labels: &LabelRaster) -> Result<()> {
    write_file(
        path.as_ref(),
        LABEL_MAGIC,
        &[labels.height, labels.width],
        labels.ids.iter().map(|id| id.to_le_bytes()),
    )
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let (mut r, dims) = Reader::open(path, FEATURE_MAGIC, 2)?;
    let (n, d) = (dims[0], dims[1]);
    r.expect_payload(n * d)?;
    let values = (0..n * d).map(|_| r.f32()).collect();
    FeatureMatrix::new(n, d, values)
}

pub fn save_features(path: impl AsRef<Path>, features: &FeatureMatrix) -> Result<()> {
    write_file(
        path.as_ref(),
        FEATURE_MAGIC,
        &[features.rows, features.cols],
        features.values.iter().map(|v| v.to_le_bytes()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hsif");
        let values: Vec<f64> = (0..12).map(|i| (i as f32 * 0.37 - 1.0) as f64).collect();
        let cube = HsiCube::new(2, 2, 3, values).unwrap();
        save_hsi(&path, &cube).unwrap();
        assert_eq!(load_hsi(&path).unwrap(), cube);
        assert_eq!(fs::metadata(&path).unwrap().len(), 16 + 48);
    }

    #[test]
    fn truncated_and_oversized_payloads_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hsif");
        let cube = HsiCube::new(2, 2, 3, vec![0.5; 12]).unwrap();
        save_hsi(&path, &cube).unwrap();
        let bytes = fs::read(&path).unwrap();

        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_hsi(&path).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
        assert!(err.to_string().contains("truncated payload"));

        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        fs::write(&path, &long).unwrap();
        assert!(matches!(load_hsi(&path), Err(Error::TrailingBytes { .. })));

        fs::write(&path, &bytes[..6]).unwrap();
        assert!(matches!(load_hsi(&path), Err(Error::Truncated { .. })));

        let mut bad = bytes;
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(load_hsi(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn labels_validate_against_class_count_and_cube() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.hsil");
        let labels = LabelRaster::new(2, 3, vec![0, 1, 2, 3, 1, 0]).unwrap();
        save_labels(&path, &labels).unwrap();
        assert_eq!(load_labels(&path).unwrap(), labels);
        assert!(load_labels_checked(&path, 3).is_ok());
        assert!(matches!(load_labels_checked(&path, 2), Err(Error::Validation(_))));

        let cube = HsiCube::new(3, 2, 1, vec![0.0; 6]).unwrap();
        assert!(matches!(labels.check_pair(&cube), Err(Error::PairMismatch(_))));
    }

    #[test]
    fn feature_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.spgf");
        let values: Vec<f32> = (0..15).map(|i| (i as f32).sin() * 1e-3).collect();
        let features = FeatureMatrix::new(5, 3, values).unwrap();
        save_features(&path, &features).unwrap();
        let back = load_features(&path).unwrap();
        let bits = |f: &FeatureMatrix| f.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&features));
        // a label file is not a feature cache
        let lpath = dir.path().join("l.hsil");
        save_labels(&lpath, &LabelRaster::new(1, 1, vec![1]).unwrap()).unwrap();
        assert!(matches!(load_features(&lpath), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn cube_rejects_non_finite_values() {
        assert!(HsiCube::new(1, 1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(HsiCube::new(0, 1, 1, vec![]).is_err());
    }
}
