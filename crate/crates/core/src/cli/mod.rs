//! Pipeline stages as file-to-file commands.
//!
//! Every stage reads its inputs from the output directory, writes its
//! artifacts there and reports a [`Summary`]. `run_all` chains them.

mod config;
mod render;
mod synth;

pub use config::{
    apply_override, parse_flag, DatasetConfig, GcnSection, PipelineConfig, TrainSection, VaeSection, DESK_CONFIG,
    INDIAN_PINES_CONFIG, SYNTH_CUBE, SYNTH_LABELS,
};
pub use render::{palette, render_ppm, save_ppm};
pub use synth::{cosine, synthesize, SynthSpec, MAX_COSINE};

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{save_edge_list, SuperpixelGraph};
use crate::hsi_io::{self, extract_pixel_cubes, pca_reduce, HsiCube, LabelRaster, PixelCubes};
use crate::metrics::compute_metrics;
use crate::segmentation::{self, sp_segmentation_accuracy, Segmentation};
use crate::tensor::Tensor;
use crate::trainer::{self, format_log};
use crate::vae::{self, Vae};

/// File names of the stage artifacts inside the output directory.
pub mod artifacts {
    pub const VAE: &str = "vae.spgv";
    pub const PRETRAIN_LOG: &str = "pretrain_log.tsv";
    pub const SEGMENTATION: &str = "segmentation.hsil";
    pub const FEATURES: &str = "pixel_features.spgf";
    pub const GRAPH: &str = "superpixel_graph.txt";
    pub const GCN: &str = "gcn.spgw";
    pub const TRAIN_LOG: &str = "train_log.tsv";
    pub const CLUSTERS: &str = "cluster_labels.hsil";
    pub const METRICS: &str = "metrics.txt";
    pub const MAP: &str = "cluster_map.ppm";
    pub const CONFIG: &str = "config.toml";
}

/// The `DONE stage=<name> key=value ...` line a command prints on success.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub stage: &'static str,
    pub fields: Vec<(&'static str, String)>,
}

impl Summary {
    fn new(stage: &'static str) -> Self {
        Self {
            stage,
            fields: Vec::new(),
        }
    }

    fn with(mut self, key: &'static str, value: impl fmt::Display) -> Self {
        self.fields.push((key, value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str())
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DONE stage={}", self.stage)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

fn require(path: &Path, command: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            command,
        })
    }
}

fn prepare_output(config: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&config.output_dir)?;
    Ok(())
}

/// Loads the input cube, checks the data-dependent limits and reduces it.
fn reduced_cube(config: &PipelineConfig) -> Result<HsiCube> {
    let cube = hsi_io::load_hsi(require(&config.cube_path(), "synth")?)?;
    if config.pca_bands > cube.bands() {
        return Err(Error::Config(format!(
            "pca_bands = {} exceeds the {} bands of the input",
            config.pca_bands,
            cube.bands()
        )));
    }
    if config.num_superpixels > cube.pixels() {
        return Err(Error::Config(format!(
            "num_superpixels = {} exceeds the {} pixels of the input",
            config.num_superpixels,
            cube.pixels()
        )));
    }
    Ok(pca_reduce(&cube, config.pca_bands)?.cube)
}

fn pixel_cubes(config: &PipelineConfig) -> Result<PixelCubes> {
    extract_pixel_cubes(&reduced_cube(config)?, config.window)
}

/// Writes the synthetic scene and its ground truth.
pub fn cmd_synth(config: &PipelineConfig, spec: &SynthSpec) -> Result<Summary> {
    prepare_output(config)?;
    let (cube, labels, spectra) = synthesize(spec)?;
    let max_cos = (0..spectra.len())
        .flat_map(|i| (i + 1..spectra.len()).map(move |j| (i, j)))
        .map(|(i, j)| cosine(&spectra[i], &spectra[j]))
        .fold(f64::NEG_INFINITY, f64::max);
    hsi_io::save_hsi(config.artifact(SYNTH_CUBE), &cube)?;
    hsi_io::save_labels(config.artifact(SYNTH_LABELS), &labels)?;
    Ok(Summary::new("synth")
        .with("height", spec.height)
        .with("width", spec.width)
        .with("bands", spec.bands)
        .with("classes", spec.classes)
        .with("max_cosine", format!("{max_cos:.4}")))
}

pub fn cmd_pretrain(config: &PipelineConfig) -> Result<Summary> {
    prepare_output(config)?;
    let cubes = pixel_cubes(config)?;
    let (model, history) = vae::train_model(&cubes, &config.pretrain_config())?;
    model.save(config.artifact(artifacts::VAE))?;
    let mut log = String::new();
    for (i, e) in history.iter().enumerate() {
        writeln!(
            log,
            "{i}\t{:.9}\t{:.9}\t{:.9}",
            e.distribution, e.reconstruction, e.total
        )
        .expect("string write");
    }
    fs::write(config.artifact(artifacts::PRETRAIN_LOG), log)?;
    let last = history.last().map_or(f64::NAN, |e| e.total);
    Ok(Summary::new("pretrain")
        .with("epochs", history.len())
        .with("cubes", cubes.len())
        .with("loss", format!("{last:.6}")))
}

pub fn cmd_segment(config: &PipelineConfig) -> Result<Summary> {
    prepare_output(config)?;
    let reduced = reduced_cube(config)?;
    let seg = segmentation::segment(&reduced, config.num_superpixels, config.compactness)?;
    seg.save(config.artifact(artifacts::SEGMENTATION))?;
    let mut summary = Summary::new("segment").with("superpixels", seg.count());
    let labels_path = config.labels_path();
    if labels_path.is_file() {
        let labels = hsi_io::load_labels(&labels_path)?;
        labels.check_pair(&reduced)?;
        if labels.labeled_count() > 0 {
            summary = summary.with(
                "sp_accuracy",
                format!("{:.2}", sp_segmentation_accuracy(&seg, &labels)?),
            );
        }
    }
    Ok(summary)
}

pub fn cmd_features(config: &PipelineConfig) -> Result<Summary> {
    prepare_output(config)?;
    let vae_path = require(&config.artifact(artifacts::VAE), "pretrain")?;
    let cubes = pixel_cubes(config)?;
    let mut model = Vae::load(vae_path, config.architecture()?)?;
    let features = model.pixel_features(&cubes, config.vae.batch_size)?;
    hsi_io::save_features(config.artifact(artifacts::FEATURES), &features)?;
    Ok(Summary::new("features")
        .with("pixels", features.rows())
        .with("dim", features.cols()))
}

pub fn cmd_cluster(config: &PipelineConfig) -> Result<Summary> {
    prepare_output(config)?;
    let features = hsi_io::load_features(require(&config.artifact(artifacts::FEATURES), "features")?)?;
    let seg = Segmentation::load(require(&config.artifact(artifacts::SEGMENTATION), "segment")?)?;
    if features.rows() != seg.pixels() {
        return Err(Error::PairMismatch(format!(
            "{} feature rows for a {}-pixel segmentation",
            features.rows(),
            seg.pixels()
        )));
    }
    let x = Tensor::new(vec![features.rows(), features.cols()], features.to_f64())?;
    let graph = SuperpixelGraph::new(&seg, &x, config.connectivity()?)?;
    save_edge_list(config.artifact(artifacts::GRAPH), &graph.adjacency)?;
    let outcome = trainer::train(&graph, &x, &seg, &config.train_config())?;
    outcome.params.save(config.artifact(artifacts::GCN))?;
    fs::write(config.artifact(artifacts::TRAIN_LOG), format_log(&outcome.log))?;
    let labels = LabelRaster::new(seg.height(), seg.width(), outcome.pixel_labels)?;
    hsi_io::save_labels(config.artifact(artifacts::CLUSTERS), &labels)?;
    for d in &outcome.diagnostics {
        eprintln!("note: {d}");
    }
    let last = outcome.log.last().map_or(f64::NAN, |e| e.total);
    Ok(Summary::new("cluster")
        .with("epochs", outcome.log.len())
        .with("superpixels", graph.nodes())
        .with("edges", graph.adjacency.nnz() / 2)
        .with("loss", format!("{last:.6}")))
}

pub fn cmd_evaluate(config: &PipelineConfig) -> Result<Summary> {
    prepare_output(config)?;
    let pred = hsi_io::load_labels(require(&config.artifact(artifacts::CLUSTERS), "cluster")?)?;
    let truth = hsi_io::load_labels(require(&config.labels_path(), "synth")?)?;
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::PairMismatch(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let report = compute_metrics(&pred, &truth)?;
    report.save(config.artifact(artifacts::METRICS))?;
    Ok(Summary::new("evaluate")
        .with("OA", format!("{:.2}", report.oa))
        .with("AA", format!("{:.2}", report.aa))
        .with("Kappa", format!("{:.2}", report.kappa))
        .with("NMI", format!("{:.2}", report.nmi)))
}

/// Renders `labels` (default: the cluster labels) to `out` (default: the
/// map artifact) with `classes` colors (default: the configured K).
pub fn cmd_render_map(
    config: &PipelineConfig,
    labels: Option<&Path>,
    classes: Option<u32>,
    out: Option<&Path>,
) -> Result<Summary> {
    prepare_output(config)?;
    let default_labels = config.artifact(artifacts::CLUSTERS);
    let labels_path = require(labels.unwrap_or(&default_labels), "cluster")?;
    let raster = hsi_io::load_labels(labels_path)?;
    let k = classes.unwrap_or(config.clusters as u32);
    let out = out.map_or_else(|| config.artifact(artifacts::MAP), Path::to_path_buf);
    save_ppm(&out, &raster, k)?;
    Ok(Summary::new("render-map")
        .with("path", out.display())
        .with("width", raster.width())
        .with("height", raster.height()))
}

/// Runs every stage in order, reporting each summary as it completes.
/// Evaluation is skipped when no ground truth exists.
pub fn cmd_run_all(config: &PipelineConfig, mut report: impl FnMut(&Summary)) -> Result<Summary> {
    config.validate()?;
    prepare_output(config)?;
    fs::write(config.artifact(artifacts::CONFIG), config.to_toml())?;
    let stages: [fn(&PipelineConfig) -> Result<Summary>; 4] = [cmd_segment, cmd_pretrain, cmd_features, cmd_cluster];
    for stage in stages {
        report(&stage(config)?);
    }
    let mut done = Summary::new("run-all");
    if config.labels_path().is_file() {
        let eval = cmd_evaluate(config)?;
        report(&eval);
        for key in ["OA", "Kappa"] {
            done = done.with(key, eval.get(key).expect("evaluate reports OA and Kappa"));
        }
    }
    report(&cmd_render_map(config, None, None, None)?);
    Ok(done.with("output_dir", config.output_dir.display()))
}
