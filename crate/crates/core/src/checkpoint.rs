//! Binary weight checkpoints.
//!
//! Both formats are little-endian and start with a four-byte magic and a
//! `u32` tensor count. `SPGW` stores matrices as `u32 rows, u32 cols` followed
//! by `rows * cols` f64 values. `SPGV` stores tensors of any rank as
//! `u32 rank, rank x u32 dims` followed by the f64 values, and then a `u32`
//! count of batch-normalization layers, each `u32 channels` followed by the
//! running means and running variances.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Tensor};

pub const GCN_MAGIC: [u8; 4] = *b"SPGW";
pub const VAE_MAGIC: [u8; 4] = *b"SPGV";

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Parameter(format!("dimension {v} exceeds u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn f64s(&mut self, values: &[f64]) {
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn finish(self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.0)?;
        Ok(())
    }
}

struct Reader {
    path: PathBuf,
    bytes: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn open(path: &Path, magic: [u8; 4]) -> Result<Self> {
        let bytes = fs::read(path)?;
        let mut r = Self {
            path: path.to_path_buf(),
            bytes,
            pos: 0,
        };
        let found: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if found != magic {
            return Err(Error::BadMagic {
                path: r.path,
                expected: magic,
                found,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.clone(),
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.overflow())?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn overflow(&self) -> Error {
        Error::Validation(format!("{}: declared sizes overflow", self.path.display()))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::TrailingBytes {
                path: self.path,
                expected: self.pos as u64,
                found: self.bytes.len() as u64,
            });
        }
        Ok(())
    }
}

/// Writes a list of matrices in the `SPGW` format.
pub fn save_matrices(path: impl AsRef<Path>, matrices: &[Tensor]) -> Result<()> {
    let mut w = Writer(GCN_MAGIC.to_vec());
    w.u32(matrices.len())?;
    for m in matrices {
        if m.shape().len() != 2 {
            return Err(Error::dim(
                "save_matrices",
                format!("expected a matrix, got {:?}", m.shape()),
            ));
        }
        w.u32(m.shape()[0])?;
        w.u32(m.shape()[1])?;
        w.f64s(m.data());
    }
    w.finish(path.as_ref())
}

pub fn load_matrices(path: impl AsRef<Path>) -> Result<Vec<Tensor>> {
    let mut r = Reader::open(path.as_ref(), GCN_MAGIC)?;
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (rows, cols) = (r.u32()?, r.u32()?);
        let n = rows.checked_mul(cols).ok_or_else(|| r.overflow())?;
        out.push(Tensor::new(vec![rows, cols], r.f64s(n)?)?);
    }
    r.finish()?;
    Ok(out)
}

/// Writes tensors plus batch-normalization running statistics in the `SPGV`
/// format.
pub fn save_tensors(path: impl AsRef<Path>, tensors: &[Tensor], stats: &[BatchNormStats]) -> Result<()> {
    let mut w = Writer(VAE_MAGIC.to_vec());
    w.u32(tensors.len())?;
    for t in tensors {
        w.u32(t.shape().len())?;
        for &d in t.shape() {
            w.u32(d)?;
        }
        w.f64s(t.data());
    }
    w.u32(stats.len())?;
    for s in stats {
        w.u32(s.mean.len())?;
        w.f64s(&s.mean);
        w.f64s(&s.var);
    }
    w.finish(path.as_ref())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<(Vec<Tensor>, Vec<BatchNormStats>)> {
    let mut r = Reader::open(path.as_ref(), VAE_MAGIC)?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| r.overflow())?;
        tensors.push(Tensor::new(shape, r.f64s(n)?)?);
    }
    let layers = r.u32()?;
    let mut stats = Vec::with_capacity(layers.min(1024));
    for _ in 0..layers {
        let channels = r.u32()?;
        let mut s = BatchNormStats::new(channels);
        s.mean = r.f64s(channels)?;
        s.var = r.f64s(channels)?;
        stats.push(s);
    }
    r.finish()?;
    Ok((tensors, stats))
}
