use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::segmentation::Segmentation;
use crate::sparse::CsrMatrix;
use crate::tensor::{Tape, Tensor, Var};

/// Layer sizes of the dual-branch GCN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GcnShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// Total depth including the branch layer; at least 2.
    pub layers: usize,
}

/// Shared weights `W_1 .. W_{L-1}` and the two branch weights of layer `L`.
/// Layers have no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    pub shape: GcnShape,
    /// Shared layers followed by branch 1 and branch 2.
    pub weights: Vec<Tensor>,
}

impl GcnParams {
    /// Glorot-uniform initialization.
    pub fn new(shape: GcnShape, seed: u64) -> Result<Self> {
        if shape.layers < 2 {
            return Err(Error::Parameter(format!(
                "GCN needs at least 2 layers, got {}",
                shape.layers
            )));
        }
        if shape.input == 0 || shape.hidden == 0 || shape.output == 0 {
            return Err(Error::Parameter("GCN layer widths must be positive".into()));
        }
        let mut rng = rng::stream(seed, rng::GCN_INIT);
        let weights = Self::dims(shape)
            .into_iter()
            .map(|(i, o)| glorot(i, o, &mut rng))
            .collect();
        Ok(Self { shape, weights })
    }

    fn dims(shape: GcnShape) -> Vec<(usize, usize)> {
        let mut dims = vec![(shape.input, shape.hidden)];
        dims.extend(std::iter::repeat_n((shape.hidden, shape.hidden), shape.layers - 2));
        dims.push((shape.hidden, shape.output));
        dims.push((shape.hidden, shape.output));
        dims
    }

    pub fn from_weights(weights: Vec<Tensor>) -> Result<Self> {
        let bad = || Error::Validation("GCN checkpoint layers do not chain".into());
        if weights.len() < 3 || weights.iter().any(|w| w.shape().len() != 2) {
            return Err(bad());
        }
        let shape = GcnShape {
            input: weights[0].shape()[0],
            hidden: weights[0].shape()[1],
            output: weights[weights.len() - 1].shape()[1],
            layers: weights.len() - 1,
        };
        let expected = Self::dims(shape);
        if weights.iter().zip(&expected).any(|(w, &(i, o))| w.shape() != [i, o]) {
            return Err(bad());
        }
        Ok(Self { shape, weights })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save_matrices(path, &self.weights)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weights(checkpoint::load_matrices(path)?)
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.weights.iter().map(|w| tape.param(w.clone())).collect()
    }
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-bound..bound))
}

/// The four unit-row embeddings of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingViews {
    pub sp1: Var,
    pub sp2: Var,
    pub p1: Var,
    pub p2: Var,
}

/// `ReLU(P H W)` through the shared layers, then `P H W_L^b` for both
/// branches, each row-normalized. Returns the two branch outputs.
fn branches(tape: &mut Tape, p: &Arc<CsrMatrix>, x: Var, weights: &[Var]) -> Result<(Var, Var)> {
    let (shared, heads) = weights.split_at(weights.len() - 2);
    let mut h = x;
    for &w in shared {
        let hw = tape.matmul(h, w)?;
        let phw = tape.spmm(Arc::clone(p), hw)?;
        h = tape.relu(phw);
    }
    let mut out = [h; 2];
    for (slot, &w) in out.iter_mut().zip(heads) {
        let hw = tape.matmul(h, w)?;
        let phw = tape.spmm(Arc::clone(p), hw)?;
        *slot = tape.l2_normalize_rows(phw)?;
    }
    Ok((out[0], out[1]))
}

/// Runs superpixel features and sampled pixel features through the same
/// graph and weights.
pub fn gcn_forward(
    tape: &mut Tape,
    propagation: &Arc<CsrMatrix>,
    x_sp: Var,
    x_p: Var,
    weights: &[Var],
) -> Result<EmbeddingViews> {
    if weights.len() < 3 {
        return Err(Error::Parameter(
            "GCN needs at least one shared layer and two branches".into(),
        ));
    }
    for x in [x_sp, x_p] {
        if tape.shape(x).first() != Some(&propagation.rows()) {
            return Err(Error::dim(
                "gcn_forward",
                format!("graph has {} nodes, features {:?}", propagation.rows(), tape.shape(x)),
            ));
        }
    }
    let (sp1, sp2) = branches(tape, propagation, x_sp, weights)?;
    let (p1, p2) = branches(tape, propagation, x_p, weights)?;
    Ok(EmbeddingViews { sp1, sp2, p1, p2 })
}

/// One uniformly drawn member pixel's feature per superpixel.
pub fn sample_pixels(seg: &Segmentation, pixel_features: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let shape = pixel_features.shape();
    if shape.len() != 2 || shape[0] != seg.pixels() {
        return Err(Error::dim(
            "sample_pixels",
            format!("{} pixels but features of shape {shape:?}", seg.pixels()),
        ));
    }
    let d = shape[1];
    let mut out = Vec::with_capacity(seg.count() * d);
    for i in 0..seg.count() {
        let members = seg.members(i);
        let pick = members[rng.random_range(0..members.len())];
        out.extend_from_slice(&pixel_features.data()[pick * d..(pick + 1) * d]);
    }
    Tensor::new(vec![seg.count(), d], out)
}
