//! Check suites shared by the integration tests and the acceptance runner.
//! Each suite returns its measurements so callers decide how to report them.

#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng as _;
use spgcc::graph::normalize_adjacency;
use spgcc::hsi_io::{HsiCube, LabelRaster};
use spgcc::metrics::{ari, hungarian_match, matched_mass, nmi, ContingencyTable};
use spgcc::rng::{stream, Rng};
use spgcc::segmentation::{segment, sp_segmentation_accuracy};
use spgcc::sparse::CsrMatrix;
use spgcc::tensor::gradcheck::check;
use spgcc::tensor::{BatchNormStats, BnMode, Tape, Tensor, Var};
use spgcc::trainer::{
    confidence_select, gcn_forward, kmeans, loss_clc, loss_sla, recompute_centers, total_loss, KMeans,
};
use spgcc::vae::{loss_distribution, loss_reconstruction, reparameterize, Vae, VaeArchitecture};
use spgcc::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 20;

pub fn rng(seed: u64) -> Rng {
    stream(seed, 0)
}

pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Entries with magnitude in `[margin, 1)` and random sign, so kinks and
/// clamp bounds stay outside the finite-difference stencil.
pub fn away_from(rng: &mut Rng, shape: &[usize], center: f64, margin: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            center + m
        } else {
            center - m
        }
    })
}

fn size(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Reduces any output to a scalar with fixed, index-dependent weights so
/// every output entry contributes a distinct gradient.
pub fn probe(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let weights = Tensor::from_fn(&shape, |i| (0.37 * i as f64 + 0.2).cos() + 0.1);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Instance = (Vec<Tensor>, Build);

#[derive(Clone, Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.worst <= TOLERANCE
    }
}

fn run_op(name: &'static str, seed: u64, make: impl Fn(&mut Rng) -> Instance) -> OpCheck {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..INSTANCES {
        let (inputs, build) = make(&mut r);
        let result = check(&inputs, STEP, build);
        let err = match result {
            Ok(g) if g.max_rel_error.is_finite() => g.max_rel_error,
            _ => f64::INFINITY,
        };
        worst = worst.max(err);
    }
    OpCheck {
        name,
        instances: INSTANCES,
        worst,
    }
}

fn conv_case(rng: &mut Rng, spatial: usize, transposed: bool) -> Instance {
    let (n, cin, cout) = (size(rng, 1, 2), size(rng, 1, 2), size(rng, 1, 3));
    let dims: Vec<usize> = (0..spatial).map(|_| size(rng, 2, 4)).collect();
    let kernel: Vec<usize> = dims.iter().map(|&d| size(rng, 1, d.min(3))).collect();
    let mut xs = vec![n, cin];
    xs.extend(&dims);
    let mut ws = if transposed { vec![cin, cout] } else { vec![cout, cin] };
    ws.extend(&kernel);
    let x = uniform(rng, &xs, -1.0, 1.0);
    let w = uniform(rng, &ws, -1.0, 1.0);
    let b = uniform(rng, &[cout], -1.0, 1.0);
    let build: Build = Box::new(move |t, v| {
        let y = match (spatial, transposed) {
            (3, false) => t.conv3d(v[0], v[1], v[2])?,
            (2, false) => t.conv2d(v[0], v[1], v[2])?,
            (3, true) => t.deconv3d(v[0], v[1], v[2])?,
            _ => t.deconv2d(v[0], v[1], v[2])?,
        };
        probe(t, y)
    });
    (vec![x, w, b], build)
}

fn unary(rng: &mut Rng, x: Tensor, f: fn(&mut Tape, Var) -> Result<Var>) -> Instance {
    let _ = rng;
    let build: Build = Box::new(move |t, v| {
        let y = f(t, v[0])?;
        probe(t, y)
    });
    (vec![x], build)
}

fn binary(a: Tensor, b: Tensor, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Instance {
    let build: Build = Box::new(move |t, v| {
        let y = f(t, v[0], v[1])?;
        probe(t, y)
    });
    (vec![a, b], build)
}

fn matrix(rng: &mut Rng) -> [usize; 2] {
    [size(rng, 1, 4), size(rng, 1, 5)]
}

/// A connected random graph: a ring plus random chords.
pub fn random_graph(rng: &mut Rng, n: usize) -> Arc<CsrMatrix> {
    let mut edges = Vec::new();
    for i in 0..n {
        edges.push((i, (i + 1) % n));
    }
    for _ in 0..n {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.push((a, b));
        }
    }
    let mut triplets = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (a, b) in edges {
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            triplets.push((key.0, key.1, 1.0));
            triplets.push((key.1, key.0, 1.0));
        }
    }
    let adjacency = CsrMatrix::from_triplets(n, n, triplets).expect("valid triplets");
    Arc::new(normalize_adjacency(&adjacency).expect("symmetric"))
}

type GcnCase = (Vec<Tensor>, Arc<CsrMatrix>, Vec<Vec<usize>>);

/// Inputs `[x_sp, x_p, W_1 .. W_{L-1}, W_L^1, W_L^2]` for a small random GCN
/// and a random partition into confident groups.
///
/// Draws where ReLU leaves fewer than two live hidden units are rejected.
/// With one live unit every embedding row is a rescaled copy of the same
/// vector, the row normalization removes the scale, and the gradient through
/// the shared layers is exactly zero, so finite differences would only
/// measure round-off.
fn gcn_case(rng: &mut Rng) -> GcnCase {
    loop {
        let case = gcn_draw(rng);
        let (inputs, p, _) = &case;
        let layers = inputs.len() - 3;
        let live = |x: &Tensor| -> bool {
            let mut h = x.clone();
            for w in &inputs[2..2 + layers] {
                let mut t = Tape::new();
                let (hv, wv) = (t.constant(h), t.constant(w.clone()));
                let hw = t.matmul(hv, wv).expect("shapes");
                let phw = t.spmm(Arc::clone(p), hw).expect("shapes");
                let a = t.relu(phw);
                h = t.value(a).clone();
                let width = h.shape()[1];
                let active = (0..width)
                    .filter(|&c| h.data().iter().skip(c).step_by(width).any(|&v| v > 0.0))
                    .count();
                if active < 2 {
                    return false;
                }
            }
            true
        };
        if live(&inputs[0]) && live(&inputs[1]) {
            return case;
        }
    }
}

fn gcn_draw(rng: &mut Rng) -> GcnCase {
    let n = size(rng, 5, 8);
    let (din, hidden, out) = (size(rng, 2, 4), size(rng, 3, 6), size(rng, 2, 4));
    let layers = size(rng, 2, 3);
    let p = random_graph(rng, n);
    let mut inputs = vec![uniform(rng, &[n, din], -1.0, 1.0), uniform(rng, &[n, din], -1.0, 1.0)];
    let mut fan_in = din;
    for _ in 0..layers - 1 {
        inputs.push(uniform(rng, &[fan_in, hidden], -1.0, 1.0));
        fan_in = hidden;
    }
    inputs.push(uniform(rng, &[fan_in, out], -1.0, 1.0));
    inputs.push(uniform(rng, &[fan_in, out], -1.0, 1.0));
    let k = size(rng, 2, 3);
    let mut groups = vec![Vec::new(); k];
    for i in 0..n {
        // every group gets one member first
        let g = if i < k { i } else { rng.random_range(0..k) };
        if rng.random_bool(0.8) || i < k {
            groups[g].push(i);
        }
    }
    (inputs, p, groups)
}

fn gcn_loss(
    t: &mut Tape,
    v: &[Var],
    p: &Arc<CsrMatrix>,
    groups: &[Vec<usize>],
    alpha: Option<f64>,
    sla_weight: f64,
) -> Result<Var> {
    let views = gcn_forward(t, p, v[0], v[1], &v[2..])?;
    let sla = loss_sla(t, &views)?;
    let centers = recompute_centers(t, views.sp1, views.sp2, groups)?;
    let clc = loss_clc(t, centers.c1, centers.c2, 0.5)?;
    match alpha {
        Some(a) => total_loss(t, sla, Some(clc), a),
        None if sla_weight > 0.0 => Ok(sla),
        None => Ok(clc),
    }
}

fn gcn_instance(rng: &mut Rng, alpha: Option<f64>, sla_weight: f64) -> Instance {
    let (inputs, p, groups) = gcn_case(rng);
    let build: Build = Box::new(move |t, v| gcn_loss(t, v, &p, &groups, alpha, sla_weight));
    (inputs, build)
}

/// Finite-difference checks of every differentiable op and composite loss.
pub fn gradient_suite() -> Vec<OpCheck> {
    let mut out = Vec::new();
    let mut seed = 100;
    let mut op = |name: &'static str, make: &dyn Fn(&mut Rng) -> Instance| {
        seed += 1;
        out.push(run_op(name, seed, make));
    };

    op("conv3d", &|r| conv_case(r, 3, false));
    op("conv2d", &|r| conv_case(r, 2, false));
    op("deconv3d", &|r| conv_case(r, 3, true));
    op("deconv2d", &|r| conv_case(r, 2, true));
    op("batchnorm_train", &|r| {
        let c = size(r, 1, 3);
        let shape = [size(r, 2, 3), c, size(r, 1, 3), 2];
        let x = uniform(r, &shape, -2.0, 2.0);
        let g = uniform(r, &[c], 0.5, 1.5);
        let b = uniform(r, &[c], -0.5, 0.5);
        let build: Build = Box::new(move |t, v| {
            let mut stats = BatchNormStats::new(c);
            let y = t.batchnorm(v[0], v[1], v[2], &mut stats, BnMode::Train)?;
            probe(t, y)
        });
        (vec![x, g, b], build)
    });
    op("batchnorm_eval", &|r| {
        let c = size(r, 1, 3);
        let shape = [size(r, 1, 3), c, 2, 2];
        let x = uniform(r, &shape, -2.0, 2.0);
        let g = uniform(r, &[c], 0.5, 1.5);
        let b = uniform(r, &[c], -0.5, 0.5);
        let mut stats = BatchNormStats::new(c);
        stats.mean = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        stats.var = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
        let build: Build = Box::new(move |t, v| {
            let mut s = stats.clone();
            let y = t.batchnorm(v[0], v[1], v[2], &mut s, BnMode::Eval)?;
            probe(t, y)
        });
        (vec![x, g, b], build)
    });
    op("relu", &|r| {
        let s = matrix(r);
        let x = away_from(r, &s, 0.0, 1e-3);
        unary(r, x, |t, x| Ok(t.relu(x)))
    });
    op("adaptive_avg_pool2d", &|r| {
        let shape = [size(r, 1, 2), size(r, 1, 2), size(r, 4, 7), size(r, 4, 7)];
        let x = uniform(r, &shape, -1.0, 1.0);
        let (oh, ow) = (size(r, 1, 4), size(r, 1, 4));
        let build: Build = Box::new(move |t, v| {
            let y = t.adaptive_avg_pool2d(v[0], oh, ow)?;
            probe(t, y)
        });
        (vec![x], build)
    });
    op("linear", &|r| {
        let (n, k, m) = (size(r, 1, 4), size(r, 1, 5), size(r, 1, 4));
        let x = uniform(r, &[n, k], -1.0, 1.0);
        let w = uniform(r, &[k, m], -1.0, 1.0);
        let b = uniform(r, &[m], -1.0, 1.0);
        let build: Build = Box::new(|t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            probe(t, y)
        });
        (vec![x, w, b], build)
    });
    op("matmul", &|r| {
        let (m, k, n) = (size(r, 1, 4), size(r, 1, 5), size(r, 1, 4));
        binary(
            uniform(r, &[m, k], -1.0, 1.0),
            uniform(r, &[k, n], -1.0, 1.0),
            |t, a, b| t.matmul(a, b),
        )
    });
    op("transpose", &|r| {
        let s = matrix(r);
        let x = uniform(r, &s, -1.0, 1.0);
        unary(r, x, |t, x| t.transpose(x))
    });
    op("spmm", &|r| {
        let (rows, cols, d) = (size(r, 1, 5), size(r, 1, 5), size(r, 1, 3));
        let mut triplets = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                if r.random_bool(0.4) {
                    triplets.push((i, j, r.random_range(-1.0..1.0)));
                }
            }
        }
        let m = Arc::new(CsrMatrix::from_triplets(rows, cols, triplets).expect("in range"));
        let x = uniform(r, &[cols, d], -1.0, 1.0);
        let build: Build = Box::new(move |t, v| {
            let y = t.spmm(Arc::clone(&m), v[0])?;
            probe(t, y)
        });
        (vec![x], build)
    });
    op("reshape", &|r| {
        let [a, b] = matrix(r);
        let x = uniform(r, &[a, b], -1.0, 1.0);
        let build: Build = Box::new(move |t, v| {
            let y = t.reshape(v[0], &[b, a])?;
            probe(t, y)
        });
        (vec![x], build)
    });
    op("concat_cols", &|r| {
        let m = size(r, 1, 4);
        let (p, q) = (size(r, 1, 3), size(r, 1, 3));
        let a = uniform(r, &[m, p], -1.0, 1.0);
        let b = uniform(r, &[m, q], -1.0, 1.0);
        binary(a, b, |t, a, b| t.concat_cols(a, b))
    });
    op("l2_normalize_rows", &|r| {
        let s = matrix(r);
        let x = away_from(r, &s, 0.0, 0.1);
        unary(r, x, |t, x| t.l2_normalize_rows(x))
    });
    op("frobenius_sq_diff", &|r| {
        let s = matrix(r);
        binary(uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0), |t, a, b| {
            t.frobenius_sq_diff(a, b)
        })
    });
    op("add", &|r| {
        let s = matrix(r);
        binary(uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0), |t, a, b| {
            t.add(a, b)
        })
    });
    op("sub", &|r| {
        let s = matrix(r);
        binary(uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0), |t, a, b| {
            t.sub(a, b)
        })
    });
    op("mul", &|r| {
        let s = matrix(r);
        binary(uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0), |t, a, b| {
            t.mul(a, b)
        })
    });
    op("scale", &|r| {
        let s = matrix(r);
        let x = uniform(r, &s, -1.0, 1.0);
        let k = r.random_range(-3.0..3.0);
        let build: Build = Box::new(move |t, v| {
            let y = t.scale(v[0], k);
            probe(t, y)
        });
        (vec![x], build)
    });
    op("add_scalar", &|r| {
        let s = matrix(r);
        let x = uniform(r, &s, -1.0, 1.0);
        let k = r.random_range(-3.0..3.0);
        let build: Build = Box::new(move |t, v| {
            let y = t.add_scalar(v[0], k);
            // squared so the gradient depends on the shift
            let y2 = t.mul(y, y)?;
            probe(t, y2)
        });
        (vec![x], build)
    });
    op("exp", &|r| {
        let s = matrix(r);
        let x = uniform(r, &s, -2.0, 2.0);
        unary(r, x, |t, x| Ok(t.exp(x)))
    });
    op("clamp", &|r| {
        let s = matrix(r);
        // entries sit at least 1e-3 from either bound of [-0.5, 0.5]
        let x = Tensor::from_fn(&s, |_| {
            let side = [-0.5, 0.5][r.random_range(0..2)];
            let off: f64 = r.random_range(1e-3..0.45);
            side + if r.random_bool(0.5) { off } else { -off }
        });
        unary(r, x, |t, x| Ok(t.clamp(x, -0.5, 0.5)))
    });
    op("sum", &|r| {
        let s = matrix(r);
        let x = uniform(r, &s, -1.0, 1.0);
        let build: Build = Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        });
        (vec![x], build)
    });
    op("mean", &|r| {
        let s = matrix(r);
        let x = uniform(r, &s, -1.0, 1.0);
        let build: Build = Box::new(|t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.mean(sq))
        });
        (vec![x], build)
    });
    op("logsumexp_rows", &|r| {
        let s = matrix(r);
        let x = uniform(r, &s, -3.0, 3.0);
        unary(r, x, |t, x| t.logsumexp_rows(x))
    });
    op("row_dot", &|r| {
        let s = matrix(r);
        binary(uniform(r, &s, -1.0, 1.0), uniform(r, &s, -1.0, 1.0), |t, a, b| {
            t.row_dot(a, b)
        })
    });
    op("reparameterize", &|r| {
        let s = matrix(r);
        let mu = uniform(r, &s, -1.0, 1.0);
        let logvar = uniform(r, &s, -1.0, 1.0);
        let eps = uniform(r, &s, -2.0, 2.0);
        let build: Build = Box::new(move |t, v| {
            let e = t.constant(eps.clone());
            let q = reparameterize(t, v[0], v[1], e)?;
            probe(t, q)
        });
        (vec![mu, logvar], build)
    });
    op("vae_loss", &|r| {
        let (b, latent, out) = (size(r, 1, 3), size(r, 1, 3), size(r, 2, 5));
        let mu = uniform(r, &[b, latent], -1.0, 1.0);
        let logvar = uniform(r, &[b, latent], -1.0, 1.0);
        let w = uniform(r, &[latent, out], -1.0, 1.0);
        let bias = uniform(r, &[out], -1.0, 1.0);
        let p = uniform(r, &[b, out], -1.0, 1.0);
        let eps = uniform(r, &[b, latent], -2.0, 2.0);
        let build: Build = Box::new(move |t, v| {
            let e = t.constant(eps.clone());
            let q = reparameterize(t, v[0], v[1], e)?;
            let recon = t.linear(q, v[2], v[3])?;
            let dist = loss_distribution(t, v[0], v[1])?;
            let rec = loss_reconstruction(t, v[4], recon)?;
            t.add(dist, rec)
        });
        (vec![mu, logvar, w, bias, p], build)
    });
    op("gcn_sla", &|r| gcn_instance(r, None, 1.0));
    op("gcn_clc", &|r| gcn_instance(r, None, 0.0));
    op("gcn_total", &|r| gcn_instance(r, Some(0.7), 1.0));
    out
}

/// Max deviation between `grad(sla + alpha clc)` and
/// `grad(sla) + alpha grad(clc)` over random GCN instances.
pub fn total_gradient_linearity(instances: usize, alpha: f64) -> f64 {
    let mut r = rng(77);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (inputs, p, groups) = gcn_case(&mut r);
        let grads = |mode: Option<f64>, sla_weight: f64| -> Vec<Tensor> {
            let mut t = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
            let loss = gcn_loss(&mut t, &vars, &p, &groups, mode, sla_weight).expect("loss");
            let g = t.backward(loss).expect("backward");
            vars.iter().map(|&v| g.wrt(v)).collect()
        };
        let total = grads(Some(alpha), 1.0);
        let sla = grads(None, 1.0);
        let clc = grads(None, 0.0);
        for ((t, s), c) in total.iter().zip(&sla).zip(&clc) {
            for ((a, b), d) in t.data().iter().zip(s.data()).zip(c.data()) {
                worst = worst.max((a - (b + alpha * d)).abs());
            }
        }
    }
    worst
}

/// Expected stage shapes for a `[1, 1, 30, 27, 27]` input.
pub const REFERENCE_SHAPES: [(&str, &[usize]); 17] = [
    ("conv3d_1", &[1, 8, 24, 25, 25]),
    ("conv3d_2", &[1, 16, 20, 23, 23]),
    ("conv3d_3", &[1, 32, 18, 21, 21]),
    ("fold", &[1, 576, 21, 21]),
    ("conv2d", &[1, 64, 19, 19]),
    ("pool", &[1, 64, 4, 4]),
    ("flatten", &[1, 1024]),
    ("fc", &[1, 512]),
    ("mu", &[1, 128]),
    ("dec_fc1", &[1, 256]),
    ("dec_fc2", &[1, 23104]),
    ("dec_unflatten", &[1, 64, 19, 19]),
    ("deconv2d", &[1, 576, 21, 21]),
    ("unfold", &[1, 32, 18, 21, 21]),
    ("deconv3d_1", &[1, 16, 20, 23, 23]),
    ("deconv3d_2", &[1, 8, 24, 25, 25]),
    ("deconv3d_3", &[1, 1, 30, 27, 27]),
];

/// Stage-shape trace of one forward pass at the 30-band, 27-pixel setting.
pub fn reference_trace() -> Result<Vec<(String, Vec<usize>)>> {
    let arch = VaeArchitecture::new(30, 27)?;
    let mut vae = Vae::new(arch, 0);
    let mut tape = Tape::new();
    let x = tape.constant(uniform(&mut rng(3), &[1, 1, 30, 27, 27], -1.0, 1.0));
    let noise = Tensor::zeros(&[1, 128]);
    let out = vae.forward(&mut tape, x, &noise, BnMode::Eval)?;
    Ok(out.trace.into_iter().map(|(n, s)| (n.to_owned(), s)).collect())
}

/// Returns a description of the first disagreement with the reference shapes.
pub fn reference_shape_mismatch() -> Option<String> {
    let trace = match reference_trace() {
        Ok(t) => t,
        Err(e) => return Some(format!("forward failed: {e}")),
    };
    if trace.len() != REFERENCE_SHAPES.len() {
        return Some(format!(
            "{} traced stages, expected {}",
            trace.len(),
            REFERENCE_SHAPES.len()
        ));
    }
    for ((name, shape), (want_name, want)) in trace.iter().zip(REFERENCE_SHAPES) {
        if name != want_name || shape != want {
            return Some(format!("{name} {shape:?}, expected {want_name} {want:?}"));
        }
    }
    None
}

/// `(name, measured, expected)` for the closed-form loss values.
pub fn loss_identities() -> Vec<(&'static str, f64, f64)> {
    let mut out = Vec::new();

    let mut t = Tape::new();
    let z = uniform(&mut rng(9), &[6, 4], -1.0, 1.0);
    let z = t.constant(z);
    let z = t.l2_normalize_rows(z).expect("rank 2");
    let views = spgcc::trainer::EmbeddingViews {
        sp1: z,
        sp2: z,
        p1: z,
        p2: z,
    };
    let sla = loss_sla(&mut t, &views).expect("same shapes");
    out.push(("sla_identical_views", t.value(sla).item(), 0.0));

    for (name, mu, expected) in [("kl_standard_normal", 0.0, 0.0), ("kl_unit_shift", 1.0, 0.5)] {
        let mut t = Tape::new();
        let m = t.constant(Tensor::full(&[1, 1], mu));
        let lv = t.constant(Tensor::zeros(&[1, 1]));
        let kl = loss_distribution(&mut t, m, lv).expect("same shapes");
        out.push((name, t.value(kl).item(), expected));
    }

    let mut t = Tape::new();
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).expect("2x2");
    let c = t.constant(eye);
    let clc = loss_clc(&mut t, c, c, 0.5).expect("two centers");
    out.push((
        "clc_orthonormal_pair",
        t.value(clc).item(),
        (1.0 + (-2.0f64).exp()).ln(),
    ));
    out
}

/// Piecewise-constant cube whose `grid x grid` tiles each get a random
/// spectrum; returns the cube and the tile labels `1..=grid^2`.
pub fn tiled_scene(rng: &mut Rng, side: usize, grid: usize, bands: usize) -> (HsiCube, LabelRaster) {
    let tiles = grid * grid;
    let spectra: Vec<Vec<f64>> = (0..tiles)
        .map(|_| (0..bands).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let mut values = Vec::with_capacity(side * side * bands);
    let mut ids = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let tile = (r * grid / side) * grid + c * grid / side;
            values.extend(&spectra[tile]);
            ids.push(tile as u32 + 1);
        }
    }
    (
        HsiCube::new(side, side, bands, values).expect("sized"),
        LabelRaster::new(side, side, ids).expect("sized"),
    )
}

#[derive(Clone, Debug)]
pub struct HomogeneityCase {
    pub side: usize,
    pub grid: usize,
    pub target: usize,
    pub produced: usize,
    pub accuracy: f64,
}

/// Segments tiled scenes whose tiles hold at least `4 N / M` pixels.
pub fn homogeneity_cases() -> Vec<HomogeneityCase> {
    let settings = [
        (48, 2, 64),
        (48, 2, 16),
        (60, 3, 36),
        (64, 4, 64),
        (40, 2, 25),
        (72, 3, 81),
    ];
    let mut r = rng(21);
    settings
        .iter()
        .map(|&(side, grid, target)| {
            let tile = (side / grid) * (side / grid);
            assert!(
                tile * target >= 4 * side * side,
                "setting violates the region-size premise"
            );
            let (cube, labels) = tiled_scene(&mut r, side, grid, 5);
            let seg = segment(&cube, target, 1.0).expect("segmentation");
            HomogeneityCase {
                side,
                grid,
                target,
                produced: seg.count(),
                accuracy: sp_segmentation_accuracy(&seg, &labels).expect("labeled"),
            }
        })
        .collect()
}

/// Direct six-loop valid 3-D correlation.
pub fn conv3d_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, cin, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (cout, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let (od, oh, ow) = (d - kd + 1, h - kh + 1, wd - kw + 1);
    let xi = |a, c, i, j, k| x.data()[(((a * cin + c) * d + i) * h + j) * wd + k];
    let wi = |o, c, i, j, k| w.data()[(((o * cin + c) * kd + i) * kh + j) * kw + k];
    let mut y = vec![0.0; n * cout * od * oh * ow];
    for a in 0..n {
        for o in 0..cout {
            for i in 0..od {
                for j in 0..oh {
                    for k in 0..ow {
                        let mut s = b.data()[o];
                        for c in 0..cin {
                            for p in 0..kd {
                                for q in 0..kh {
                                    for u in 0..kw {
                                        s += xi(a, c, i + p, j + q, k + u) * wi(o, c, p, q, u);
                                    }
                                }
                            }
                        }
                        y[(((a * cout + o) * od + i) * oh + j) * ow + k] = s;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, od, oh, ow], y).expect("sized")
}

/// Max absolute gap between the tape's conv3d and the direct loop.
pub fn conv3d_oracle_gap(instances: usize) -> f64 {
    let mut r = rng(31);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (n, cin, cout) = (size(&mut r, 1, 2), size(&mut r, 1, 3), size(&mut r, 1, 4));
        let dims = [size(&mut r, 3, 8), size(&mut r, 3, 7), size(&mut r, 3, 7)];
        let k = [size(&mut r, 1, dims[0]), size(&mut r, 1, 3), size(&mut r, 1, 3)];
        let x = uniform(&mut r, &[n, cin, dims[0], dims[1], dims[2]], -1.0, 1.0);
        let w = uniform(&mut r, &[cout, cin, k[0], k[1], k[2]], -1.0, 1.0);
        let b = uniform(&mut r, &[cout], -1.0, 1.0);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv3d(xv, wv, bv).expect("valid shapes");
        let want = conv3d_oracle(&x, &w, &b);
        if t.value(y).shape() != want.shape() {
            return f64::INFINITY;
        }
        for (a, e) in t.value(y).data().iter().zip(want.data()) {
            worst = worst.max((a - e).abs());
        }
    }
    worst
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Counts tables where the Hungarian matched mass differs from the best of
/// all `K!` permutations.
pub fn hungarian_mismatches(tables: usize) -> usize {
    let mut r = rng(41);
    let mut bad = 0;
    for _ in 0..tables {
        let k = size(&mut r, 1, 6);
        let counts: Vec<u64> = (0..k * k).map(|_| r.random_range(0..50)).collect();
        let mut counts = counts;
        counts[0] += 1;
        let table = ContingencyTable::from_counts(k, k, counts.clone()).expect("square");
        let mapping = hungarian_match(&table).expect("square table");
        let got = matched_mass(&table, &mapping);
        let best = permutations(k)
            .iter()
            .map(|p| (0..k).map(|i| counts[i * k + p[i]]).sum::<u64>())
            .max()
            .expect("k >= 1");
        if got != best {
            bad += 1;
        }
    }
    bad
}

fn entropy_of(labels: &[u32]) -> f64 {
    let n = labels.len() as f64;
    let mut counts = std::collections::HashMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.values().map(|&c| -(c as f64 / n) * (c as f64 / n).ln()).sum()
}

/// NMI from label arrays with arithmetic-mean normalization.
pub fn nmi_direct(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len() as f64;
    let (ha, hb) = (entropy_of(a), entropy_of(b));
    if ha == 0.0 && hb == 0.0 {
        return 1.0;
    }
    let mut joint = std::collections::HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0usize) += 1;
    }
    let pa = |x: u32| a.iter().filter(|&&v| v == x).count() as f64 / n;
    let pb = |y: u32| b.iter().filter(|&&v| v == y).count() as f64 / n;
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let p = c as f64 / n;
            p * (p / (pa(x) * pb(y))).ln()
        })
        .sum();
    (mi / ((ha + hb) / 2.0)).clamp(0.0, 1.0)
}

/// ARI by enumerating every pair of points.
pub fn ari_direct(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let (sa, sb) = (a[i] == a[j], b[i] == b[j]);
            pairs += 1.0;
            if sa && sb {
                both += 1.0;
            }
            if sa {
                only_a += 1.0;
            }
            if sb {
                only_b += 1.0;
            }
        }
    }
    let expected = only_a * only_b / pairs;
    let max = (only_a + only_b) / 2.0;
    if max == expected {
        return if both == max { 1.0 } else { 0.0 };
    }
    (both - expected) / (max - expected)
}

/// Worst absolute NMI and ARI gaps against the direct formulas.
pub fn nmi_ari_gaps(labelings: usize) -> (f64, f64) {
    let mut r = rng(51);
    let (mut nmi_gap, mut ari_gap): (f64, f64) = (0.0, 0.0);
    for _ in 0..labelings {
        let n = size(&mut r, 2, 120);
        let (ka, kb) = (size(&mut r, 1, 6), size(&mut r, 1, 6));
        let a: Vec<u32> = (0..n).map(|_| r.random_range(1..=ka as u32)).collect();
        let b: Vec<u32> = (0..n).map(|_| r.random_range(1..=kb as u32)).collect();
        let table = ContingencyTable::from_labels(&a, &b).expect("same length");
        nmi_gap = nmi_gap.max((nmi(&table) - nmi_direct(&a, &b)).abs());
        ari_gap = ari_gap.max((ari(&table) - ari_direct(&a, &b)).abs());
    }
    (nmi_gap, ari_gap)
}

fn random_blobs(rng: &mut Rng) -> (Vec<f64>, usize, usize, usize) {
    let (n, dim, k) = (size(rng, 10, 60), size(rng, 1, 4), size(rng, 2, 5));
    let data = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    (data, n, dim, k)
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center index by brute force, ties to the lower index.
pub fn brute_nearest(point: &[f64], km: &KMeans) -> (usize, f64) {
    (0..km.k)
        .map(|c| (c, sq(point, km.center(c))))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

#[derive(Clone, Debug, Default)]
pub struct KMeansFindings {
    pub runs: usize,
    pub increases: usize,
    pub misassigned: usize,
    pub selection_mismatches: usize,
}

/// Objective monotonicity, nearest-center fixpoint and confidence selection
/// against a full sort, over random instances.
pub fn kmeans_invariants(instances: usize) -> KMeansFindings {
    let mut r = rng(61);
    let mut f = KMeansFindings::default();
    for _ in 0..instances {
        let (data, n, dim, k) = random_blobs(&mut r);
        let km = kmeans(&data, n, dim, k, &mut r).expect("n >= k");
        f.runs += 1;
        let obj = &km.objective;
        f.increases += obj.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-12) + 1e-15).count();
        if km.converged {
            for i in 0..n {
                let p = &data[i * dim..(i + 1) * dim];
                let (best, d) = brute_nearest(p, &km);
                let own = sq(p, km.center(km.assignments[i]));
                if km.assignments[i] != best && own > d {
                    f.misassigned += 1;
                }
            }
        } else {
            f.misassigned += 1;
        }
        let lambda = r.random_range(0.05..=1.0);
        let sel = confidence_select(&data, &km, lambda).expect("valid lambda");
        let mut order: Vec<(f64, usize)> = (0..n)
            .map(|i| (brute_nearest(&data[i * dim..(i + 1) * dim], &km).1, i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keep = ((lambda * n as f64).round() as usize).min(n);
        let mut want = vec![Vec::new(); k];
        for &(_, i) in &order[..keep] {
            want[km.assignments[i]].push(i);
        }
        want.iter_mut().for_each(|g| g.sort_unstable());
        let mut got = sel.groups.clone();
        got.iter_mut().for_each(|g| g.sort_unstable());
        if got != want {
            f.selection_mismatches += 1;
        }
    }
    f
}
