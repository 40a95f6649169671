//! Contrastive clustering of the superpixel graph.
//!
//! Each epoch feeds the superpixel features and one randomly sampled member
//! pixel per superpixel through a GCN whose last layer has two independently
//! weighted branches, giving four row-normalized views. The loss aligns all
//! six view pairs and contrasts cluster centers recomputed from the
//! high-confidence members found by periodic k-means.

mod gcn;
mod kmeans;

pub use gcn::{gcn_forward, sample_pixels, EmbeddingViews, GcnParams, GcnShape};
pub use kmeans::{confidence_select, kmeans, kmeans_restarts, Confidence, KMeans, MAX_ITERATIONS};

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::SuperpixelGraph;
use crate::rng;
use crate::segmentation::Segmentation;
use crate::sparse::CsrMatrix;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

/// Rows of a center mean shorter than this are treated as zero.
const ZERO_MEAN: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    /// Number of clusters K.
    pub clusters: usize,
    pub hidden: usize,
    pub output: usize,
    pub layers: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the center contrast in the total loss.
    pub alpha: f64,
    /// Fraction of superpixels kept as high-confidence samples.
    pub lambda: f64,
    pub tau: f64,
    pub epochs: usize,
    pub kmeans_interval: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clusters: 16,
            hidden: 1024,
            output: 512,
            layers: 3,
            lr: 1e-5,
            weight_decay: 5e-4,
            alpha: 0.1,
            lambda: 0.75,
            tau: 0.5,
            epochs: 200,
            kmeans_interval: 5,
            kmeans_restarts: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Parameter(msg));
        if self.clusters == 0 {
            return fail("cluster count must be positive".into());
        }
        if self.layers < 2 {
            return fail(format!("GCN depth must be at least 2, got {}", self.layers));
        }
        if self.hidden == 0 || self.output == 0 {
            return fail("GCN widths must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return fail(format!("lambda must lie in (0, 1], got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.kmeans_interval == 0 {
            return fail("k-means interval must be at least 1".into());
        }
        Ok(())
    }
}

/// Sample-level alignment: the six pairwise squared Frobenius distances
/// between the views, averaged over pairs and rows.
pub fn loss_sla(tape: &mut Tape, v: &EmbeddingViews) -> Result<Var> {
    let rows = tape.shape(v.sp1)[0].max(1);
    let pairs = [
        (v.sp1, v.sp2),
        (v.p1, v.p2),
        (v.sp1, v.p1),
        (v.sp2, v.p2),
        (v.sp1, v.p2),
        (v.sp2, v.p1),
    ];
    let mut total = None;
    for (a, b) in pairs {
        let f = tape.frobenius_sq_diff(a, b)?;
        total = Some(match total {
            None => f,
            Some(t) => tape.add(t, f)?,
        });
    }
    Ok(tape.scale(total.expect("six terms"), 1.0 / (6.0 * rows as f64)))
}

/// Symmetric center-level InfoNCE. For view 1, center `k` is attracted to
/// its view-2 counterpart against all view-1 centers; view 2 mirrors this.
/// The result averages both directions over the `K` centers.
pub fn loss_clc(tape: &mut Tape, c1: Var, c2: Var, tau: f64) -> Result<Var> {
    let k = tape.shape(c1)[0];
    if k < 2 {
        return Err(Error::Parameter(format!(
            "center contrast needs at least 2 centers, got {k}"
        )));
    }
    let positive = tape.row_dot(c1, c2)?;
    let mut total = None;
    for c in [c1, c2] {
        let ct = tape.transpose(c)?;
        let sim = tape.matmul(c, ct)?;
        let logits = tape.scale(sim, 1.0 / tau);
        let lse = tape.logsumexp_rows(logits)?;
        let pos = tape.scale(positive, 1.0 / tau);
        let term = tape.sub(lse, pos)?;
        let s = tape.sum(term);
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    Ok(tape.scale(total.expect("two directions"), 0.5 / k as f64))
}

/// `sla + alpha * clc`, or `sla` alone when the contrast is unavailable.
pub fn total_loss(tape: &mut Tape, sla: Var, clc: Option<Var>, alpha: f64) -> Result<Var> {
    match clc {
        Some(c) => {
            let weighted = tape.scale(c, alpha);
            tape.add(sla, weighted)
        }
        None => Ok(sla),
    }
}

/// Normalized per-class means of two views over the confident members.
#[derive(Clone, Debug)]
pub struct Centers {
    pub c1: Var,
    pub c2: Var,
    /// Cluster ids of the rows of `c1` and `c2`.
    pub classes: Vec<usize>,
    /// Classes whose mean vanished in either view.
    pub degenerate: Vec<usize>,
}

fn averaging_matrix(groups: &[Vec<usize>], classes: &[usize], n: usize) -> Result<Arc<CsrMatrix>> {
    let mut triplets = Vec::new();
    for (row, &k) in classes.iter().enumerate() {
        let w = 1.0 / groups[k].len() as f64;
        triplets.extend(groups[k].iter().map(|&i| (row, i, w)));
    }
    Ok(Arc::new(CsrMatrix::from_triplets(classes.len(), n, triplets)?))
}

/// Differentiable recomputation of the centers from the current views.
/// Classes without confident members, or whose mean is zero in either view,
/// are left out.
pub fn recompute_centers(tape: &mut Tape, z1: Var, z2: Var, groups: &[Vec<usize>]) -> Result<Centers> {
    let n = tape.shape(z1)[0];
    let mut classes: Vec<usize> = (0..groups.len()).filter(|&k| !groups[k].is_empty()).collect();
    let mut degenerate = Vec::new();
    for _ in 0..2 {
        let s = averaging_matrix(groups, &classes, n)?;
        let m1 = tape.spmm(Arc::clone(&s), z1)?;
        let m2 = tape.spmm(s, z2)?;
        let width = tape.shape(z1)[1];
        let norm = |t: &Tensor, r: usize| {
            t.data()[r * width..(r + 1) * width]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
        };
        let bad: Vec<usize> = (0..classes.len())
            .filter(|&r| norm(tape.value(m1), r) <= ZERO_MEAN || norm(tape.value(m2), r) <= ZERO_MEAN)
            .collect();
        if bad.is_empty() {
            let c1 = tape.l2_normalize_rows(m1)?;
            let c2 = tape.l2_normalize_rows(m2)?;
            return Ok(Centers {
                c1,
                c2,
                classes,
                degenerate,
            });
        }
        degenerate.extend(bad.iter().map(|&r| classes[r]));
        classes = classes
            .into_iter()
            .enumerate()
            .filter(|(r, _)| !bad.contains(r))
            .map(|(_, k)| k)
            .collect();
    }
    // the second pass only sees classes with non-zero means
    unreachable!("degenerate classes removed in the first pass")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub sla: f64,
    /// `None` when fewer than two valid centers were available.
    pub clc: Option<f64>,
    pub total: f64,
}

/// One `epoch<TAB>sla<TAB>clc<TAB>total` line per epoch; a skipped contrast
/// prints as `nan`.
pub fn format_log(log: &[EpochLog]) -> String {
    let mut out = String::new();
    for e in log {
        let clc = e.clc.unwrap_or(f64::NAN);
        writeln!(out, "{}\t{:.9}\t{:.9}\t{:.9}", e.epoch, e.sla, clc, e.total).expect("string write");
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: GcnParams,
    /// Final cluster of every superpixel, `0..K`.
    pub superpixel_labels: Vec<usize>,
    /// Final cluster of every pixel, `1..=K`.
    pub pixel_labels: Vec<u32>,
    pub log: Vec<EpochLog>,
    pub diagnostics: Vec<String>,
}

/// Concatenated superpixel views `[Z_sp1 | Z_sp2]` as plain values.
fn concat_views(tape: &mut Tape, v: &EmbeddingViews) -> Result<Vec<f64>> {
    let z = tape.concat_cols(v.sp1, v.sp2)?;
    Ok(tape.value(z).data().to_vec())
}

fn cluster(z: &[f64], m: usize, config: &TrainConfig, rng: &mut rng::Rng) -> Result<KMeans> {
    kmeans_restarts(z, m, z.len() / m, config.clusters, config.kmeans_restarts, rng)
}

/// Trains the GCN on a superpixel graph and returns pixel-level clusters.
pub fn train(
    graph: &SuperpixelGraph,
    pixel_features: &Tensor,
    seg: &Segmentation,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let m = graph.nodes();
    if seg.count() != m {
        return Err(Error::PairMismatch(format!(
            "graph has {m} nodes but segmentation has {} superpixels",
            seg.count()
        )));
    }
    if config.clusters > m {
        return Err(Error::Parameter(format!(
            "cannot form {} clusters from {m} superpixels",
            config.clusters
        )));
    }
    let d = graph.features.shape()[1];
    let mut params = GcnParams::new(
        GcnShape {
            input: d,
            hidden: config.hidden,
            output: config.output,
            layers: config.layers,
        },
        config.seed,
    )?;
    let propagation = Arc::new(graph.propagation.clone());
    let mut adam = Adam::new(AdamConfig::new(config.lr, config.weight_decay));
    let mut sample_rng = rng::stream(config.seed, rng::PIXEL_SAMPLING);
    let mut kmeans_rng = rng::stream(config.seed, rng::KMEANS);
    let mut confident: Option<Confidence> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut diagnostics = Vec::new();

    for epoch in 0..config.epochs {
        let sampled = sample_pixels(seg, pixel_features, &mut sample_rng)?;
        let mut tape = Tape::new();
        let weights = params.register(&mut tape);
        let x_sp = tape.constant(graph.features.clone());
        let x_p = tape.constant(sampled);
        let views = gcn_forward(&mut tape, &propagation, x_sp, x_p, &weights)?;
        if epoch % config.kmeans_interval == 0 {
            let z = concat_views(&mut tape, &views)?;
            let km = cluster(&z, m, config, &mut kmeans_rng)?;
            confident = Some(confidence_select(&z, &km, config.lambda)?);
        }
        let groups = &confident.as_ref().expect("set at epoch 0").groups;
        let sla = loss_sla(&mut tape, &views)?;
        let centers = recompute_centers(&mut tape, views.sp1, views.sp2, groups)?;
        for k in &centers.degenerate {
            diagnostics.push(format!(
                "epoch {epoch}: cluster {k} has a zero mean and is left out of the contrast"
            ));
        }
        let clc = if centers.classes.len() >= 2 {
            Some(loss_clc(&mut tape, centers.c1, centers.c2, config.tau)?)
        } else {
            diagnostics.push(format!(
                "epoch {epoch}: only {} valid centers, contrast skipped",
                centers.classes.len()
            ));
            None
        };
        let total = total_loss(&mut tape, sla, clc, config.alpha)?;
        log.push(EpochLog {
            epoch,
            sla: tape.value(sla).item(),
            clc: clc.map(|c| tape.value(c).item()),
            total: tape.value(total).item(),
        });
        let grads = tape.backward(total)?;
        let grads: Vec<_> = weights.iter().map(|&w| Some(grads.wrt(w))).collect();
        adam.step(&mut params.weights, &grads)?;
    }

    let mut tape = Tape::new();
    let weights: Vec<Var> = params.weights.iter().map(|w| tape.constant(w.clone())).collect();
    let x_sp = tape.constant(graph.features.clone());
    let views = gcn_forward(&mut tape, &propagation, x_sp, x_sp, &weights)?;
    let z = concat_views(&mut tape, &views)?;
    let km = cluster(&z, m, config, &mut kmeans_rng)?;
    let pixel_labels = seg
        .labels()
        .iter()
        .map(|&l| km.assignments[l as usize] as u32 + 1)
        .collect();
    Ok(TrainOutcome {
        params,
        superpixel_labels: km.assignments,
        pixel_labels,
        log,
        diagnostics,
    })
}
