//! Valid (unpadded, stride-1) correlation kernels in three spatial dimensions.
//!
//! 2-D convolutions run through the same code with a unit depth axis.
//! Transposed convolution is the input-gradient of the forward correlation,
//! so the three kernels below cover conv, deconv, and both backward passes.

use super::kernels;

/// Shapes of one valid correlation `x[n, cin, D, H, W] * w[cout, cin, kd, kh, kw]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
}

impl ConvGeometry {
    pub fn output(&self) -> [usize; 3] {
        [
            self.input[0] + 1 - self.kernel[0],
            self.input[1] + 1 - self.kernel[1],
            self.input[2] + 1 - self.kernel[2],
        ]
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output().iter().product()
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn input_numel(&self) -> usize {
        self.batch * self.cin * self.in_len()
    }

    pub fn output_numel(&self) -> usize {
        self.batch * self.cout * self.out_len()
    }

    pub fn kernel_numel(&self) -> usize {
        self.cout * self.cin * self.k_len()
    }
}

/// Unfolds one batch item `x[cin, D, H, W]` into `cols[cin * k_len, out_len]`
/// so the correlation becomes a matrix product.
fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let [_, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output();
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * in_len..][..in_len];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let dst = &mut cols[row * out_len..][..out_len];
                    for z in 0..od {
                        for r in 0..oh {
                            let src = &xc[((z + a) * ih + r + b) * iw + c..][..ow];
                            dst[(z * oh + r) * ow..][..ow].copy_from_slice(src);
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `x`, accumulating.
fn col2im(cols: &[f64], g: &ConvGeometry, x: &mut [f64]) {
    let [_, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output();
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut x[ci * in_len..][..in_len];
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    let src = &cols[row * out_len..][..out_len];
                    for z in 0..od {
                        for r in 0..oh {
                            let dst = &mut xc[((z + a) * ih + r + b) * iw + c..][..ow];
                            for (d, s) in dst.iter_mut().zip(&src[(z * oh + r) * ow..][..ow]) {
                                *d += s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `y[n,co,o] += sum_{ci,k} w[co,ci,k] * x[n,ci,o+k]`
pub(crate) fn correlate(x: &[f64], w: &[f64], g: &ConvGeometry, y: &mut [f64]) {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let rows = g.cin * g.k_len();
    let mut cols = vec![0.0; rows * out_len];
    for n in 0..g.batch {
        im2col(&x[n * g.cin * in_len..][..g.cin * in_len], g, &mut cols);
        let yn = &mut y[n * g.cout * out_len..][..g.cout * out_len];
        kernels::matmul_acc(w, &cols, g.cout, rows, out_len, yn);
    }
}

/// Adjoint of [`correlate`] with respect to `x`:
/// `gx[n,ci,o+k] += sum_co w[co,ci,k] * gy[n,co,o]`.
pub(crate) fn correlate_input_adjoint(gy: &[f64], w: &[f64], g: &ConvGeometry, gx: &mut [f64]) {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let rows = g.cin * g.k_len();
    let mut cols = vec![0.0; rows * out_len];
    for n in 0..g.batch {
        cols.iter_mut().for_each(|v| *v = 0.0);
        let gyn = &gy[n * g.cout * out_len..][..g.cout * out_len];
        kernels::matmul_at_b_acc(w, gyn, g.cout, rows, out_len, &mut cols);
        col2im(&cols, g, &mut gx[n * g.cin * in_len..][..g.cin * in_len]);
    }
}

/// Adjoint of [`correlate`] with respect to `w`:
/// `gw[co,ci,k] += sum_{n,o} gy[n,co,o] * x[n,ci,o+k]`.
pub(crate) fn correlate_kernel_adjoint(x: &[f64], gy: &[f64], g: &ConvGeometry, gw: &mut [f64]) {
    let (in_len, out_len) = (g.in_len(), g.out_len());
    let rows = g.cin * g.k_len();
    let mut cols = vec![0.0; rows * out_len];
    for n in 0..g.batch {
        im2col(&x[n * g.cin * in_len..][..g.cin * in_len], g, &mut cols);
        let gyn = &gy[n * g.cout * out_len..][..g.cout * out_len];
        kernels::matmul_a_bt_acc(gyn, &cols, g.cout, rows, out_len, gw);
    }
}
