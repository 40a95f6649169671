//! C ABI for the spgcc pipeline.
//!
//! Objects cross the boundary as opaque heap handles created by a
//! `spgcc_*_load` / `spgcc_*_new` call and released with the matching
//! `spgcc_*_free`. Every fallible function returns an [`SpgccStatus`]; on
//! failure the message is available from [`spgcc_last_error`] until the
//! next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use spgcc::cli::{self, PipelineConfig};
use spgcc::hsi_io::{self, HsiCube, LabelRaster};
use spgcc::metrics::{compute_metrics, MetricReport};
use spgcc::segmentation::{self, Segmentation};
use spgcc::Error;

/// Result codes. Values 1 to 12 mirror the library error kinds.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpgccStatus {
    Ok = 0,
    Dimension = 1,
    Parameter = 2,
    BadMagic = 3,
    Truncated = 4,
    TrailingBytes = 5,
    PairMismatch = 6,
    Validation = 7,
    NonScalarLoss = 8,
    MissingGradient = 9,
    MissingArtifact = 10,
    Config = 11,
    Io = 12,
    NullArgument = 100,
    InvalidString = 101,
    BufferTooSmall = 102,
    Panic = 103,
}

impl SpgccStatus {
    fn from_error(e: &Error) -> Self {
        match e.code() {
            1 => Self::Dimension,
            2 => Self::Parameter,
            3 => Self::BadMagic,
            4 => Self::Truncated,
            5 => Self::TrailingBytes,
            6 => Self::PairMismatch,
            7 => Self::Validation,
            8 => Self::NonScalarLoss,
            9 => Self::MissingGradient,
            10 => Self::MissingArtifact,
            11 => Self::Config,
            _ => Self::Io,
        }
    }
}

/// The nine clustering metrics, as percentages.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SpgccMetrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub nmi: f64,
    pub ari: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub purity: f64,
}

impl From<&MetricReport> for SpgccMetrics {
    fn from(r: &MetricReport) -> Self {
        Self {
            oa: r.oa,
            aa: r.aa,
            kappa: r.kappa,
            nmi: r.nmi,
            ari: r.ari,
            f1: r.f1,
            precision: r.precision,
            recall: r.recall,
            purity: r.purity,
        }
    }
}

/// Opaque hyperspectral cube.
pub struct SpgccCube(HsiCube);
/// Opaque label raster (ground truth or cluster map).
pub struct SpgccLabels(LabelRaster);
/// Opaque superpixel segmentation.
pub struct SpgccSegmentation(Segmentation);
/// Opaque pipeline configuration with its pending overrides.
pub struct SpgccConfig {
    path: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    resolved: PipelineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    String(&'static str),
    Buffer { needed: usize },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpgccStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpgccStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            SpgccStatus::from_error(&e)
        }
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("argument {name} is null"));
            SpgccStatus::NullArgument
        }
        Ok(Err(Failure::String(name))) => {
            set_error(format!("argument {name} is not valid UTF-8"));
            SpgccStatus::InvalidString
        }
        Ok(Err(Failure::Buffer { needed })) => {
            set_error(format!("output buffer too small, {needed} elements needed"));
            SpgccStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            SpgccStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::String(name))
}

unsafe fn read_ref<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out<T: Copy>(src: &[T], buf: *mut T, len: usize) -> Result<(), Failure> {
    if buf.is_null() {
        return Err(Failure::Null("buf"));
    }
    if len < src.len() {
        return Err(Failure::Buffer { needed: src.len() });
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    Ok(())
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn spgcc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spgcc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- cubes ----

/// Copies `height * width * bands` pixel-major values into a new cube.
///
/// # Safety
/// `values` must point to that many readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spgcc_cube_new(
    height: usize,
    width: usize,
    bands: usize,
    values: *const f64,
    out: *mut *mut SpgccCube,
) -> SpgccStatus {
    guard(|| {
        if values.is_null() {
            return Err(Failure::Null("values"));
        }
        let n = height
            .checked_mul(width)
            .and_then(|p| p.checked_mul(bands))
            .ok_or_else(|| Error::Parameter("cube size overflows".into()))?;
        let data = std::slice::from_raw_parts(values, n).to_vec();
        write_out(out, SpgccCube(HsiCube::new(height, width, bands, data)?))
    })
}

/// Reads an HSIF file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spgcc_cube_load(path: *const c_char, out: *mut *mut SpgccCube) -> SpgccStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        write_out(out, SpgccCube(hsi_io::load_hsi(path)?))
    })
}

/// # Safety
/// `cube` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spgcc_cube_save(cube: *const SpgccCube, path: *const c_char) -> SpgccStatus {
    guard(|| {
        let cube = read_ref(cube, "cube")?;
        hsi_io::save_hsi(read_str(path, "path")?, &cube.0)?;
        Ok(())
    })
}

/// Writes the cube dimensions; any output pointer may be null.
///
/// # Safety
/// `cube` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn spgcc_cube_dims(
    cube: *const SpgccCube,
    height: *mut usize,
    width: *mut usize,
    bands: *mut usize,
) -> SpgccStatus {
    guard(|| {
        let c = &read_ref(cube, "cube")?.0;
        for (p, v) in [(height, c.height()), (width, c.width()), (bands, c.bands())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `cube` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spgcc_cube_free(cube: *mut SpgccCube) {
    if !cube.is_null() {
        drop(Box::from_raw(cube));
    }
}

// ---- labels ----

/// Copies `height * width` class ids (0 = unlabeled) into a new raster.
///
/// # Safety
/// `ids` must point to that many readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spgcc_labels_new(
    height: usize,
    width: usize,
    ids: *const u32,
    out: *mut *mut SpgccLabels,
) -> SpgccStatus {
    guard(|| {
        if ids.is_null() {
            return Err(Failure::Null("ids"));
        }
        let n = height
            .checked_mul(width)
            .ok_or_else(|| Error::Parameter("raster size overflows".into()))?;
        let data = std::slice::from_raw_parts(ids, n).to_vec();
        write_out(out, SpgccLabels(LabelRaster::new(height, width, data)?))
    })
}

/// Reads an HSIL file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spgcc_labels_load(path: *const c_char, out: *mut *mut SpgccLabels) -> SpgccStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        write_out(out, SpgccLabels(hsi_io::load_labels(path)?))
    })
}

/// # Safety
/// `labels` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spgcc_labels_save(labels: *const SpgccLabels, path: *const c_char) -> SpgccStatus {
    guard(|| {
        let labels = read_ref(labels, "labels")?;
        hsi_io::save_labels(read_str(path, "path")?, &labels.0)?;
        Ok(())
    })
}

/// # Safety
/// `labels` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn spgcc_labels_dims(
    labels: *const SpgccLabels,
    height: *mut usize,
    width: *mut usize,
) -> SpgccStatus {
    guard(|| {
        let l = &read_ref(labels, "labels")?.0;
        for (p, v) in [(height, l.height()), (width, l.width())] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copies the ids into `buf`, which must hold `height * width` values.
///
/// # Safety
/// `labels` must be a live handle; `buf` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn spgcc_labels_copy(labels: *const SpgccLabels, buf: *mut u32, len: usize) -> SpgccStatus {
    guard(|| copy_out(read_ref(labels, "labels")?.0.ids(), buf, len))
}

/// # Safety
/// `labels` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spgcc_labels_free(labels: *mut SpgccLabels) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

// ---- segmentation ----

/// SLIC superpixels of `cube` with about `target` regions.
///
/// # Safety
/// `cube` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spgcc_segment(
    cube: *const SpgccCube,
    target: usize,
    compactness: f64,
    out: *mut *mut SpgccSegmentation,
) -> SpgccStatus {
    guard(|| {
        let cube = read_ref(cube, "cube")?;
        write_out(
            out,
            SpgccSegmentation(segmentation::segment(&cube.0, target, compactness)?),
        )
    })
}

/// Number of superpixels, or 0 for a null handle.
///
/// # Safety
/// `seg` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn spgcc_segmentation_count(seg: *const SpgccSegmentation) -> usize {
    seg.as_ref().map_or(0, |s| s.0.count())
}

/// Copies the per-pixel superpixel ids (`0..count`) into `buf`.
///
/// # Safety
/// `seg` must be a live handle; `buf` must have room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn spgcc_segmentation_copy(
    seg: *const SpgccSegmentation,
    buf: *mut u32,
    len: usize,
) -> SpgccStatus {
    guard(|| copy_out(read_ref(seg, "seg")?.0.labels(), buf, len))
}

/// # Safety
/// `seg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spgcc_segmentation_free(seg: *mut SpgccSegmentation) {
    if !seg.is_null() {
        drop(Box::from_raw(seg));
    }
}

// ---- metrics ----

/// Scores `pred` against `truth` over pixels with a non-zero truth id.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spgcc_compute_metrics(
    pred: *const SpgccLabels,
    truth: *const SpgccLabels,
    out: *mut SpgccMetrics,
) -> SpgccStatus {
    guard(|| {
        let pred = read_ref(pred, "pred")?;
        let truth = read_ref(truth, "truth")?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        *out = SpgccMetrics::from(&compute_metrics(&pred.0, &truth.0)?);
        Ok(())
    })
}

// ---- pipeline ----

/// Loads a TOML config; a null path selects the built-in desk config.
///
/// # Safety
/// `path` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spgcc_config_load(path: *const c_char, out: *mut *mut SpgccConfig) -> SpgccStatus {
    guard(|| {
        let path = if path.is_null() {
            None
        } else {
            Some(PathBuf::from(read_str(path, "path")?))
        };
        let resolved = PipelineConfig::resolve(path.as_deref(), &[])?;
        write_out(
            out,
            SpgccConfig {
                path,
                overrides: Vec::new(),
                resolved,
            },
        )
    })
}

/// Sets a dotted key (e.g. `train.lr`) from its TOML or bare-string form.
/// The configuration is unchanged if the result does not validate.
///
/// # Safety
/// `config` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn spgcc_config_set(
    config: *mut SpgccConfig,
    key: *const c_char,
    value: *const c_char,
) -> SpgccStatus {
    guard(|| {
        let config = config.as_mut().ok_or(Failure::Null("config"))?;
        let mut overrides = config.overrides.clone();
        overrides.push((read_str(key, "key")?.to_owned(), read_str(value, "value")?.to_owned()));
        config.resolved = PipelineConfig::resolve(config.path.as_deref(), &overrides)?;
        config.overrides = overrides;
        Ok(())
    })
}

/// Writes the resolved configuration as TOML into `buf` (NUL-terminated).
/// `needed`, when non-null, receives the required size including the NUL.
///
/// # Safety
/// `config` must be a live handle; `buf` must have room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn spgcc_config_to_toml(
    config: *const SpgccConfig,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> SpgccStatus {
    guard(|| {
        let text = read_ref(config, "config")?.resolved.to_toml();
        let mut bytes = text.into_bytes();
        bytes.push(0);
        if let Some(n) = needed.as_mut() {
            *n = bytes.len();
        }
        copy_out(&bytes, buf.cast::<u8>(), len)
    })
}

/// Writes the synthetic scene into the configured output directory, using
/// the configured seed and class count.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spgcc_synth(
    config: *const SpgccConfig,
    height: usize,
    width: usize,
    bands: usize,
    noise: f64,
) -> SpgccStatus {
    guard(|| {
        let config = &read_ref(config, "config")?.resolved;
        let spec = cli::SynthSpec {
            height,
            width,
            bands,
            classes: config.clusters,
            noise,
            seed: config.seed,
        };
        cli::cmd_synth(config, &spec)?;
        Ok(())
    })
}

/// Runs every stage. When ground truth exists and `metrics` is non-null the
/// scores are written there.
///
/// # Safety
/// `config` must be a live handle; `metrics` null or writable.
#[no_mangle]
pub unsafe extern "C" fn spgcc_run_all(config: *const SpgccConfig, metrics: *mut SpgccMetrics) -> SpgccStatus {
    guard(|| {
        let config = &read_ref(config, "config")?.resolved;
        cli::cmd_run_all(config, |_| {})?;
        if let Some(m) = metrics.as_mut() {
            let path = config.artifact(cli::artifacts::METRICS);
            if Path::new(&path).is_file() {
                *m = SpgccMetrics::from(&MetricReport::load(path)?);
            }
        }
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spgcc_config_free(config: *mut SpgccConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}
