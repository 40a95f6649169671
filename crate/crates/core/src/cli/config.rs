use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Connectivity;
use crate::trainer::TrainConfig;
use crate::vae::{PretrainConfig, VaeArchitecture};

/// The configuration shipped for the 48x48x8 synthetic dataset.
pub const DESK_CONFIG: &str = include_str!("../../configs/desk.toml");
/// Settings for Indian Pines (30 PCA bands, 27x27 cubes, 1100 superpixels).
pub const INDIAN_PINES_CONFIG: &str = include_str!("../../configs/indian_pines.toml");

/// Input files. Unset paths fall back to the files written by `synth` in
/// the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub cube: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Cap on training cubes; 0 trains on all of them.
    pub max_cubes: usize,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 5e-4,
            max_cubes: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnSection {
    pub hidden: usize,
    pub output: usize,
    pub layers: usize,
}

impl Default for GcnSection {
    fn default() -> Self {
        Self {
            hidden: 256,
            output: 128,
            layers: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub tau: f64,
    pub epochs: usize,
    pub kmeans_interval: usize,
    pub kmeans_restarts: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            alpha: 10.0,
            lambda: 0.75,
            tau: 0.5,
            epochs: 100,
            kmeans_interval: 5,
            kmeans_restarts: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Number of clusters K.
    pub clusters: usize,
    pub pca_bands: usize,
    pub window: usize,
    pub num_superpixels: usize,
    pub compactness: f64,
    /// Pixel neighborhood for superpixel adjacency, 4 or 8.
    pub connectivity: u32,
    pub dataset: DatasetConfig,
    pub vae: VaeSection,
    pub gcn: GcnSection,
    pub train: TrainSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: PathBuf::from("out"),
            clusters: 4,
            pca_bands: 8,
            window: 13,
            num_superpixels: 64,
            compactness: 1.0,
            connectivity: 8,
            dataset: DatasetConfig::default(),
            vae: VaeSection::default(),
            gcn: GcnSection::default(),
            train: TrainSection::default(),
        }
    }
}

/// Parses a flag value as a TOML value, falling back to a bare string so
/// that paths need no quoting.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    }
}

/// Sets a dotted key such as `train.lr` in a TOML table.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let leaf = parts.pop().expect("split yields one part");
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{part} in {key:?} is not a section")))?;
    }
    node.insert(leaf.to_owned(), parse_value(raw));
    Ok(())
}

/// Splits `--key=value` into its parts.
pub fn parse_flag(flag: &str) -> Result<(String, String)> {
    let body = flag
        .strip_prefix("--")
        .ok_or_else(|| Error::Config(format!("expected --key=value, got {flag:?}")))?;
    let (k, v) = body
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected --key=value, got {flag:?}")))?;
    Ok((k.replace('-', "_"), v.to_owned()))
}

impl PipelineConfig {
    /// Reads a TOML document; missing keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(text.parse().map_err(|e| Error::Config(format!("{e}")))?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        table.try_into().map_err(|e| Error::Config(format!("{e}")))
    }

    /// Loads the file at `path` (or the built-in desk config), applies the
    /// overrides in order and validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => {
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?
            }
            None => DESK_CONFIG.to_owned(),
        };
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let config = Self::from_table(table)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn architecture(&self) -> Result<VaeArchitecture> {
        VaeArchitecture::new(self.pca_bands, self.window)
    }

    pub fn connectivity(&self) -> Result<Connectivity> {
        Connectivity::from_count(self.connectivity)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.vae.epochs,
            batch_size: self.vae.batch_size,
            lr: self.vae.lr,
            weight_decay: self.vae.weight_decay,
            max_cubes: self.vae.max_cubes,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            clusters: self.clusters,
            hidden: self.gcn.hidden,
            output: self.gcn.output,
            layers: self.gcn.layers,
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            alpha: self.train.alpha,
            lambda: self.train.lambda,
            tau: self.train.tau,
            epochs: self.train.epochs,
            kmeans_interval: self.train.kmeans_interval,
            kmeans_restarts: self.train.kmeans_restarts,
            seed: self.seed,
        }
    }

    /// Checks every field against its consumer's constraints. Limits that
    /// depend on the data (band and pixel counts) are checked when the cube
    /// is loaded.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.clusters == 0 {
            return fail("clusters must be positive".into());
        }
        if self.num_superpixels < self.clusters {
            return fail(format!(
                "num_superpixels ({}) must be at least clusters ({})",
                self.num_superpixels, self.clusters
            ));
        }
        if !(self.compactness >= 0.0 && self.compactness.is_finite()) {
            return fail(format!("compactness must be non-negative, got {}", self.compactness));
        }
        if self.vae.epochs == 0 || self.train.epochs == 0 {
            return fail("epoch counts must be positive".into());
        }
        self.connectivity()?;
        self.architecture()?;
        self.pretrain_config().validate()?;
        self.train_config().validate()
    }

    pub fn cube_path(&self) -> PathBuf {
        self.dataset
            .cube
            .clone()
            .unwrap_or_else(|| self.output_dir.join(SYNTH_CUBE))
    }

    pub fn labels_path(&self) -> PathBuf {
        self.dataset
            .labels
            .clone()
            .unwrap_or_else(|| self.output_dir.join(SYNTH_LABELS))
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}

pub const SYNTH_CUBE: &str = "synth_cube.hsif";
pub const SYNTH_LABELS: &str = "synth_labels.hsil";
