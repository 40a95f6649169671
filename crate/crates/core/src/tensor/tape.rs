use std::sync::Arc;

use super::conv::{self, ConvGeometry};
use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    // geom describes the forward correlation whose input adjoint this op computes
    Deconv {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        inner: usize,
        mode: BnMode,
    },
    Relu(Var),
    AdaptivePool {
        x: Var,
        out: [usize; 2],
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    Transpose(Var),
    SpMM {
        m: Arc<CsrMatrix>,
        x: Var,
    },
    Reshape(Var),
    ConcatCols(Var, Var),
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    FrobSqDiff(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    LogSumExpRows(Var),
    RowDot(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation in topological order for reverse-mode
/// differentiation. Nodes are appended by each op, so every node's inputs
/// precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    zero_norm_rows: usize,
}

/// Gradients of a scalar loss with respect to every node on a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, zero when `v` is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::dim(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

const SPATIAL_AXES: [&str; 3] = ["depth", "height", "width"];

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of all-zero rows passed through unchanged by
    /// [`Tape::l2_normalize_rows`] so far.
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn conv_geometry(
        &self,
        op: &'static str,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        rank: usize,
        transposed: bool,
    ) -> Result<ConvGeometry> {
        expect_rank(op, x, rank)?;
        expect_rank(op, w, rank)?;
        expect_rank(op, b, 1)?;
        let spatial = rank - 2;
        let lift = |dims: &[usize]| -> [usize; 3] {
            let mut out = [1usize; 3];
            out[3 - spatial..].copy_from_slice(dims);
            out
        };
        let (xs, ws) = (x.shape(), w.shape());
        let kernel = lift(&ws[2..]);
        let spatial_in = lift(&xs[2..]);
        // For transposed convolution the weight is laid out [cin, cout, k...].
        let (w_in, w_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xs[1] != w_in {
            return Err(Error::dim(
                op,
                format!("channel axis: input has {} channels, kernel expects {w_in}", xs[1]),
            ));
        }
        if b.shape()[0] != w_out {
            return Err(Error::dim(
                op,
                format!("bias axis: {} values for {w_out} output channels", b.shape()[0]),
            ));
        }
        if kernel.contains(&0) {
            return Err(Error::dim(op, "kernel axes must be non-empty"));
        }
        if transposed {
            let full = [
                spatial_in[0] + kernel[0] - 1,
                spatial_in[1] + kernel[1] - 1,
                spatial_in[2] + kernel[2] - 1,
            ];
            Ok(ConvGeometry {
                batch: xs[0],
                cin: w_out,
                cout: w_in,
                input: full,
                kernel,
            })
        } else {
            for axis in 0..3 {
                if kernel[axis] > spatial_in[axis] {
                    return Err(Error::dim(
                        op,
                        format!(
                            "{} axis: kernel {} does not fit input {}",
                            SPATIAL_AXES[axis], kernel[axis], spatial_in[axis]
                        ),
                    ));
                }
            }
            Ok(ConvGeometry {
                batch: xs[0],
                cin: w_in,
                cout: w_out,
                input: spatial_in,
                kernel,
            })
        }
    }

    fn spatial_shape(batch: usize, channels: usize, dims: [usize; 3], rank: usize) -> Vec<usize> {
        let mut shape = vec![batch, channels];
        shape.extend_from_slice(&dims[3 - (rank - 2)..]);
        shape
    }

    fn add_channel_bias(y: &mut [f64], bias: &[f64], batch: usize) {
        let channels = bias.len();
        let inner = y.len() / (batch * channels).max(1);
        for (chunk, i) in y.chunks_mut(inner).zip(0..) {
            let bv = bias[i % channels];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }

    fn conv_nd(&mut self, op: &'static str, x: Var, w: Var, b: Var, rank: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geom = self.conv_geometry(op, xv, wv, bv, rank, false)?;
        let mut y = vec![0.0; geom.output_numel()];
        conv::correlate(xv.data(), wv.data(), &geom, &mut y);
        Self::add_channel_bias(&mut y, bv.data(), geom.batch);
        let shape = Self::spatial_shape(geom.batch, geom.cout, geom.output(), rank);
        let value = Tensor::new(shape, y)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    fn deconv_nd(&mut self, op: &'static str, x: Var, w: Var, b: Var, rank: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let geom = self.conv_geometry(op, xv, wv, bv, rank, true)?;
        let mut y = vec![0.0; geom.input_numel()];
        conv::correlate_input_adjoint(xv.data(), wv.data(), &geom, &mut y);
        Self::add_channel_bias(&mut y, bv.data(), geom.batch);
        let shape = Self::spatial_shape(geom.batch, geom.cin, geom.input, rank);
        let value = Tensor::new(shape, y)?;
        Ok(self.push(value, Op::Deconv { x, w, b, geom }, &[x, w, b]))
    }

    /// Valid 3-D convolution: `x[N,Cin,D,H,W]`, `w[Cout,Cin,kd,kh,kw]`, `b[Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv_nd("conv3d", x, w, b, 5)
    }

    /// Valid 2-D convolution: `x[N,Cin,H,W]`, `w[Cout,Cin,kh,kw]`, `b[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.conv_nd("conv2d", x, w, b, 4)
    }

    /// Transposed 3-D convolution: `x[N,Cin,D,H,W]`, `w[Cin,Cout,kd,kh,kw]`,
    /// output `[N,Cout,D+kd-1,H+kh-1,W+kw-1]`.
    pub fn deconv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.deconv_nd("deconv3d", x, w, b, 5)
    }

    /// Transposed 2-D convolution: `x[N,Cin,H,W]`, `w[Cin,Cout,kh,kw]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.deconv_nd("deconv2d", x, w, b, 4)
    }

    /// Per-channel batch normalization over axis 1 with a learned affine.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: BnMode,
    ) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("batchnorm", format!("need [N, C, ...], got {shape:?}")));
        }
        let (batch, channels) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for (name, t) in [("gamma", self.value(gamma)), ("beta", self.value(beta))] {
            if t.shape() != [channels] {
                return Err(Error::dim(
                    "batchnorm",
                    format!("{name} has shape {:?}, expected [{channels}]", t.shape()),
                ));
            }
        }
        if stats.mean.len() != channels || stats.var.len() != channels {
            return Err(Error::dim("batchnorm", "running statistics channel count"));
        }
        if mode == BnMode::Train && batch < 2 {
            return Err(Error::Parameter(
                "batchnorm in train mode needs a batch of at least 2".into(),
            ));
        }
        let data = xv.data();
        let count = (batch * inner) as f64;
        let mut inv_std = vec![0.0; channels];
        let mut xhat = vec![0.0; data.len()];
        for c in 0..channels {
            let slices = (0..batch).map(|n| &data[(n * channels + c) * inner..][..inner]);
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mean = slices.clone().flatten().sum::<f64>() / count;
                    let var = slices.flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
                    let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                    stats.mean[c] = (1.0 - stats.momentum) * stats.mean[c] + stats.momentum * mean;
                    stats.var[c] = (1.0 - stats.momentum) * stats.var[c] + stats.momentum * unbiased;
                    (mean, var)
                }
                BnMode::Eval => (stats.mean[c], stats.var[c]),
            };
            inv_std[c] = 1.0 / (var + stats.eps).sqrt();
            for n in 0..batch {
                let off = (n * channels + c) * inner;
                for i in off..off + inner {
                    xhat[i] = (data[i] - mean) * inv_std[c];
                }
            }
        }
        let (g, bta) = (self.value(gamma).data(), self.value(beta).data());
        let y: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let c = (i / inner) % channels;
                g[c] * h + bta[c]
            })
            .collect();
        let value = Tensor::new(shape, y)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            inner,
            mode,
        };
        Ok(self.push(value, op, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    /// Averages `x[N,C,H,W]` over an `out_h x out_w` grid of near-equal cells.
    /// Cell `i` spans rows `floor(i*H/out_h) .. ceil((i+1)*H/out_h)`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("adaptive_avg_pool2d", xv, 4)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("adaptive_avg_pool2d", "output grid must be non-empty"));
        }
        let s = xv.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut y = vec![0.0; planes * out_h * out_w];
        for p in 0..planes {
            let plane = &xv.data()[p * h * w..][..h * w];
            for i in 0..out_h {
                let (r0, r1) = pool_span(i, h, out_h);
                for j in 0..out_w {
                    let (c0, c1) = pool_span(j, w, out_w);
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        acc += plane[r * w + c0..r * w + c1].iter().sum::<f64>();
                    }
                    y[(p * out_h + i) * out_w + j] = acc / ((r1 - r0) * (c1 - c0)) as f64;
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], out_h, out_w], y)?;
        Ok(self.push(value, Op::AdaptivePool { x, out: [out_h, out_w] }, &[x]))
    }

    /// Fully connected layer `x[N,in] * w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        expect_rank("linear", xv, 2)?;
        expect_rank("linear", wv, 2)?;
        let (n, k, m) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
        if wv.shape()[0] != k {
            return Err(Error::dim(
                "linear",
                format!("input width {k} vs weight rows {}", wv.shape()[0]),
            ));
        }
        if bv.shape() != [m] {
            return Err(Error::dim(
                "linear",
                format!("bias shape {:?}, expected [{m}]", bv.shape()),
            ));
        }
        let mut y = vec![0.0; n * m];
        for row in y.chunks_mut(m) {
            row.copy_from_slice(bv.data());
        }
        kernels::matmul_acc(xv.data(), wv.data(), n, k, m, &mut y);
        let value = Tensor::new(vec![n, m], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("matmul", av, 2)?;
        expect_rank("matmul", bv, 2)?;
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        if bv.shape()[0] != k {
            return Err(Error::dim("matmul", format!("inner axis: {k} vs {}", bv.shape()[0])));
        }
        let mut y = vec![0.0; m * n];
        kernels::matmul_acc(av.data(), bv.data(), m, k, n, &mut y);
        let value = Tensor::new(vec![m, n], y)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("transpose", xv, 2)?;
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let d = xv.data();
        let y = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        let value = Tensor::new(vec![c, r], y)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Sparse-dense product `m * x` for a constant sparse matrix `m`.
    pub fn spmm(&mut self, m: Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("spmm", xv, 2)?;
        if xv.shape()[0] != m.cols() {
            return Err(Error::dim(
                "spmm",
                format!("matrix has {} columns, operand {} rows", m.cols(), xv.shape()[0]),
            ));
        }
        let width = xv.shape()[1];
        let y = m.matmul_dense(xv.data(), width)?;
        let value = Tensor::new(vec![m.rows(), width], y)?;
        Ok(self.push(value, Op::SpMM { m, x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[a | b]` for `a[m,p]`, `b[m,q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("concat_cols", av, 2)?;
        expect_rank("concat_cols", bv, 2)?;
        let (m, p, q) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        if bv.shape()[0] != m {
            return Err(Error::dim(
                "concat_cols",
                format!("row counts {m} and {}", bv.shape()[0]),
            ));
        }
        let mut y = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            y.extend_from_slice(&av.data()[r * p..(r + 1) * p]);
            y.extend_from_slice(&bv.data()[r * q..(r + 1) * q]);
        }
        let value = Tensor::new(vec![m, p + q], y)?;
        Ok(self.push(value, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Scales every row of `x[m,n]` to unit L2 norm. Rows of norm zero pass
    /// through unchanged and are counted in [`Tape::zero_norm_rows`].
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("l2_normalize_rows", xv, 2)?;
        let n = xv.shape()[1];
        let mut y = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.shape()[0]);
        let mut zero_rows = 0;
        for row in y.chunks_mut(n.max(1)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            } else {
                zero_rows += 1;
            }
            norms.push(norm);
        }
        let value = Tensor::new(xv.shape().to_vec(), y)?;
        self.zero_norm_rows += zero_rows;
        Ok(self.push(value, Op::L2NormRows { x, norms }, &[x]))
    }

    /// `||a - b||_F^2` as a scalar.
    pub fn frobenius_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("frobenius_sq_diff", av, bv)?;
        let s = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(s), Op::FrobSqDiff(a, b), &[a, b]))
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map_op(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map_op(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map_op(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map_op(x, f64::exp, Op::Exp(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map_op(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Row-wise `log(sum_j exp(x[i,j]))` of `x[m,n]`, shape `[m]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        expect_rank("logsumexp_rows", xv, 2)?;
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        if n == 0 {
            return Err(Error::dim("logsumexp_rows", "rows must be non-empty"));
        }
        let y = xv.data().chunks(n).map(logsumexp).collect();
        let value = Tensor::new(vec![m], y)?;
        Ok(self.push(value, Op::LogSumExpRows(x), &[x]))
    }

    /// Row-wise dot products of `a[m,n]` and `b[m,n]`, shape `[m]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        expect_rank("row_dot", av, 2)?;
        same_shape("row_dot", av, bv)?;
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let y = (0..m)
            .map(|i| {
                av.data()[i * n..(i + 1) * n]
                    .iter()
                    .zip(&bv.data()[i * n..(i + 1) * n])
                    .map(|(x, z)| x * z)
                    .sum()
            })
            .collect();
        let value = Tensor::new(vec![m], y)?;
        Ok(self.push(value, Op::RowDot(a, b), &[a, b]))
    }

    /// Differentiates the scalar `loss` with respect to every node it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // only nodes that take part in differentiation report gradients
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if let Some(gx) = self.slot(grads, *x) {
                    conv::correlate_input_adjoint(g, self.value(*w).data(), geom, gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    conv::correlate_kernel_adjoint(self.value(*x).data(), g, geom, gw);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    channel_sums_acc(g, geom.batch, gb);
                }
            }
            Op::Deconv { x, w, b, geom } => {
                if let Some(gx) = self.slot(grads, *x) {
                    conv::correlate(g, self.value(*w).data(), geom, gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    conv::correlate_kernel_adjoint(g, self.value(*x).data(), geom, gw);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    channel_sums_acc(g, geom.batch, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                inner,
                mode,
            } => {
                let channels = inv_std.len();
                let inner = *inner;
                let batch = xhat.len() / (channels * inner).max(1);
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                    let c = (i / inner) % channels;
                    sum_g[c] += gv;
                    sum_gx[c] += gv * h;
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
                let gamma_v = self.value(*gamma).data().to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let count = (batch * inner) as f64;
                    for (i, d) in gx.iter_mut().enumerate() {
                        let c = (i / inner) % channels;
                        let scale = gamma_v[c] * inv_std[c];
                        *d += match mode {
                            BnMode::Train => scale * (g[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count),
                            BnMode::Eval => scale * g[i],
                        };
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::AdaptivePool { x, out } => {
                let s = self.shape(*x).to_vec();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let [oh, ow] = *out;
                if let Some(gx) = self.slot(grads, *x) {
                    for p in 0..planes {
                        for i in 0..oh {
                            let (r0, r1) = pool_span(i, h, oh);
                            for j in 0..ow {
                                let (c0, c1) = pool_span(j, w, ow);
                                let share = g[(p * oh + i) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                                for r in r0..r1 {
                                    gx[p * h * w + r * w + c0..p * h * w + r * w + c1]
                                        .iter_mut()
                                        .for_each(|d| *d += share);
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, k, m) = (xs[0], xs[1], ws[1]);
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::matmul_a_bt_acc(g, self.value(*w).data(), n, k, m, gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    kernels::matmul_at_b_acc(self.value(*x).data(), g, n, k, m, gw);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_a_bt_acc(g, self.value(*b).data(), m, k, n, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_at_b_acc(self.value(*a).data(), g, m, k, n, gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::SpMM { m, x } => {
                let width = self.shape(*x)[1];
                if let Some(gx) = self.slot(grads, *x) {
                    m.transpose_matmul_dense_acc(g, width, gx);
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.shape(*a)[1], self.shape(*b)[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, row) in ga.chunks_mut(p.max(1)).enumerate() {
                        row.iter_mut()
                            .zip(&g[r * (p + q)..r * (p + q) + p])
                            .for_each(|(d, v)| *d += v);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (r, row) in gb.chunks_mut(q.max(1)).enumerate() {
                        row.iter_mut()
                            .zip(&g[r * (p + q) + p..(r + 1) * (p + q)])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::L2NormRows { x, norms } => {
                let n = self.shape(*x)[1].max(1);
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let span = r * n..(r + 1) * n;
                        let (gr, yr) = (&g[span.clone()], &y[span.clone()]);
                        let dst = &mut gx[span];
                        if norm > 0.0 {
                            let proj: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                                *d += (gv - yv * proj) / norm;
                            }
                        } else {
                            dst.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                        }
                    }
                }
            }
            Op::FrobSqDiff(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = 2.0 * g[0];
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *d += s * (x - y);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *d -= s * (x - y);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gv), y) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += gv * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, gv), x) in gb.iter_mut().zip(g).zip(&av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
                }
            }
            Op::Exp(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += gv * yv;
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                        if v >= lo && v <= hi {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::LogSumExpRows(x) => {
                let n = self.shape(*x)[1];
                let xv = self.value(*x).data();
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, (&lse, &gv)) in y.iter().zip(g).enumerate() {
                        for j in 0..n {
                            gx[r * n + j] += gv * (xv[r * n + j] - lse).exp();
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let n = self.shape(*a)[1];
                let (av, bv) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i / n] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (i, d) in gb.iter_mut().enumerate() {
                        *d += g[i / n] * av[i];
                    }
                }
            }
        }
    }
}

fn pool_span(i: usize, len: usize, cells: usize) -> (usize, usize) {
    let start = i * len / cells;
    let end = ((i + 1) * len).div_ceil(cells);
    (start, end)
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn channel_sums_acc(g: &[f64], batch: usize, gb: &mut [f64]) {
    let channels = gb.len();
    let inner = g.len() / (batch * channels).max(1);
    for (chunk, i) in g.chunks(inner.max(1)).zip(0..) {
        gb[i % channels] += chunk.iter().sum::<f64>();
    }
}
