//! Superpixel features and the spatial superpixel graph.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::segmentation::Segmentation;
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

/// Pixel neighborhood used to decide whether two superpixels touch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            4 => Ok(Self::Four),
            8 => Ok(Self::Eight),
            other => Err(Error::Parameter(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }

    /// Forward half of the neighborhood, so each unordered pixel pair is
    /// visited once.
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Self::Four => &[(0, 1), (1, 0)],
            Self::Eight => &[(0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Binary adjacency, its renormalized propagation matrix and node features.
#[derive(Clone, Debug)]
pub struct SuperpixelGraph {
    pub adjacency: CsrMatrix,
    pub propagation: CsrMatrix,
    pub features: Tensor,
}

impl SuperpixelGraph {
    pub fn new(seg: &Segmentation, pixel_features: &Tensor, connectivity: Connectivity) -> Result<Self> {
        let (_, t_norm) = seg.map_matrix();
        let features = superpixel_features(&t_norm, pixel_features)?;
        let adjacency = build_adjacency(seg, connectivity);
        let propagation = normalize_adjacency(&adjacency)?;
        Ok(Self {
            adjacency,
            propagation,
            features,
        })
    }

    pub fn nodes(&self) -> usize {
        self.adjacency.rows()
    }
}

/// Mean pixel feature of every superpixel: `T~ X`.
pub fn superpixel_features(t_norm: &CsrMatrix, pixel_features: &Tensor) -> Result<Tensor> {
    let shape = pixel_features.shape();
    if shape.len() != 2 || shape[0] != t_norm.cols() {
        return Err(Error::dim(
            "superpixel_features",
            format!(
                "map matrix has {} columns, features have shape {shape:?}",
                t_norm.cols()
            ),
        ));
    }
    let d = shape[1];
    let data = t_norm.matmul_dense(pixel_features.data(), d)?;
    Tensor::new(vec![t_norm.rows(), d], data)
}

/// Symmetric binary adjacency between superpixels whose pixels are
/// neighbors in the raster.
pub fn build_adjacency(seg: &Segmentation, connectivity: Connectivity) -> CsrMatrix {
    let (h, w) = (seg.height() as isize, seg.width() as isize);
    let labels = seg.labels();
    let mut edges = BTreeSet::new();
    for r in 0..h {
        for c in 0..w {
            let a = labels[(r * w + c) as usize];
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nr >= h || nc < 0 || nc >= w {
                    continue;
                }
                let b = labels[(nr * w + nc) as usize];
                if a != b {
                    edges.insert((a.min(b) as usize, a.max(b) as usize));
                }
            }
        }
    }
    let triplets = edges
        .into_iter()
        .flat_map(|(m, n)| [(m, n, 1.0), (n, m, 1.0)])
        .collect();
    CsrMatrix::from_triplets(seg.count(), seg.count(), triplets).expect("edges index superpixels")
}

/// `D^-1/2 (A + I) D^-1/2` with degrees taken from `A + I`.
pub fn normalize_adjacency(adjacency: &CsrMatrix) -> Result<CsrMatrix> {
    let n = adjacency.rows();
    if adjacency.cols() != n {
        return Err(Error::dim(
            "normalize_adjacency",
            format!("adjacency must be square, got {}x{}", n, adjacency.cols()),
        ));
    }
    if (0..n).any(|i| adjacency.get(i, i) != 0.0) || !adjacency.is_symmetric(0.0) {
        return Err(Error::Validation(
            "adjacency must be symmetric with a zero diagonal".into(),
        ));
    }
    let mut triplets: Vec<_> = adjacency.triplets().collect();
    triplets.extend((0..n).map(|i| (i, i, 1.0)));
    let looped = CsrMatrix::from_triplets(n, n, triplets)?;
    let degree = looped.row_sums();
    let scaled = looped
        .triplets()
        .map(|(i, j, v)| (i, j, v / (degree[i] * degree[j]).sqrt()))
        .collect();
    CsrMatrix::from_triplets(n, n, scaled)
}

/// Upper-triangle edges `(m, n)` with `m < n`, sorted.
pub fn edge_list(adjacency: &CsrMatrix) -> Vec<(usize, usize)> {
    adjacency
        .triplets()
        .filter(|&(i, j, v)| i < j && v != 0.0)
        .map(|(i, j, _)| (i, j))
        .collect()
}

/// Writes the edges as text, one `m n` pair per line.
pub fn save_edge_list(path: impl AsRef<Path>, adjacency: &CsrMatrix) -> Result<()> {
    let mut text = String::new();
    for (m, n) in edge_list(adjacency) {
        writeln!(text, "{m} {n}").expect("writing to a string");
    }
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads an edge list written by [`save_edge_list`] into an `n x n`
/// symmetric adjacency.
pub fn load_edge_list(path: impl AsRef<Path>, nodes: usize) -> Result<CsrMatrix> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut triplets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let mut next = || -> Result<usize> {
            parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Validation(format!("edge list line {}: expected `m n`", lineno + 1)))
        };
        let (m, n) = (next()?, next()?);
        if m == n || m >= nodes || n >= nodes {
            return Err(Error::Validation(format!(
                "edge list line {}: invalid edge {m} {n} for {nodes} nodes",
                lineno + 1
            )));
        }
        triplets.push((m, n, 1.0));
        triplets.push((n, m, 1.0));
    }
    let summed = CsrMatrix::from_triplets(nodes, nodes, triplets)?;
    // duplicate lines would sum to 2; keep the matrix binary
    let binary = summed.triplets().map(|(i, j, _)| (i, j, 1.0)).collect();
    CsrMatrix::from_triplets(nodes, nodes, binary)
}
