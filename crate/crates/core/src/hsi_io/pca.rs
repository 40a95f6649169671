use super::HsiCube;
use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Eigenvalues in non-increasing order.
    pub values: Vec<f64>,
    /// `vectors[i]` is the unit eigenvector of `values[i]`.
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigensolver for a dense symmetric `n x n` row-major matrix.
///
/// Sweeps stop once the off-diagonal Frobenius norm falls to `1e-12` times the
/// matrix norm, or after 100 sweeps. Each eigenvector is signed so that its
/// largest-magnitude entry is positive.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<SymmetricEigen> {
    if matrix.len() != n * n {
        return Err(Error::dim(
            "symmetric_eigen",
            format!("{} values for {n}x{n}", matrix.len()),
        ));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let off = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while sweeps < JACOBI_MAX_SWEEPS && off(&a) > JACOBI_TOL * norm {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&col| {
            let mut vec: Vec<f64> = (0..n).map(|k| v[k * n + col]).collect();
            let lead = vec
                .iter()
                .enumerate()
                .fold(0, |best, (i, x)| if x.abs() > vec[best].abs() { i } else { best });
            if vec[lead] < 0.0 {
                vec.iter_mut().for_each(|x| *x = -*x);
            }
            vec
        })
        .collect();
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

/// Result of projecting a cube onto its leading principal components.
#[derive(Clone, Debug)]
pub struct Pca {
    pub cube: HsiCube,
    pub mean: Vec<f64>,
    /// All band-covariance eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// The retained unit components, one per output band.
    pub components: Vec<Vec<f64>>,
}

/// Centers the bands and projects every pixel onto the top `bands`
/// eigenvectors of the band covariance. No whitening is applied.
pub fn pca_reduce(cube: &HsiCube, bands: usize) -> Result<Pca> {
    let c = cube.bands();
    if bands == 0 || bands > c {
        return Err(Error::Parameter(format!(
            "target band count {bands} must lie in 1..={c}"
        )));
    }
    let n = cube.pixels();
    let mut mean = vec![0.0; c];
    for p in 0..n {
        mean.iter_mut().zip(cube.spectrum(p)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; c * c];
    let mut centered = vec![0.0; c];
    for p in 0..n {
        centered
            .iter_mut()
            .zip(cube.spectrum(p))
            .zip(&mean)
            .for_each(|((d, v), m)| *d = v - m);
        for i in 0..c {
            let ci = centered[i];
            for j in i..c {
                cov[i * c + j] += ci * centered[j];
            }
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    for i in 0..c {
        for j in i..c {
            cov[i * c + j] /= denom;
            cov[j * c + i] = cov[i * c + j];
        }
    }
    let eig = symmetric_eigen(&cov, c)?;
    let components: Vec<Vec<f64>> = eig.vectors[..bands].to_vec();

    let mut values = Vec::with_capacity(n * bands);
    for p in 0..n {
        let s = cube.spectrum(p);
        for comp in &components {
            values.push(comp.iter().zip(s).zip(&mean).map(|((w, v), m)| w * (v - m)).sum());
        }
    }
    Ok(Pca {
        cube: HsiCube::new(cube.height(), cube.width(), bands, values)?,
        mean,
        eigenvalues: eig.values,
        components,
    })
}
