//! Pipeline configuration: a flat TOML file with one section per stage,
//! overridable by command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Deserialize;

use cloudpatch::indices::{IndexKind, NdciOrientation};
use cloudpatch::maskgen::GrfConfig;
use cloudpatch::models::ModelKind;
use cloudpatch::synth::SceneConfig;
use cloudpatch::train::TrainConfig;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub paths: PathsSection,
    pub scene: SceneSection,
    pub mask: MaskSection,
    pub train: TrainSection,
    pub indices: IndicesSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Output directory root; `--out` overrides.
    pub out: Option<PathBuf>,
    /// Input series manifest; defaults to `<out>/scene/manifest.txt`.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    pub height: usize,
    pub width: usize,
    pub n_dates: usize,
    pub seed: u64,
    pub bloom_amplitude: f64,
    pub noise_sd: f64,
    pub wave_amplitude: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let c = SceneConfig::default();
        Self {
            height: c.height,
            width: c.width,
            n_dates: c.n_dates,
            seed: c.seed,
            bloom_amplitude: c.bloom_amplitude,
            noise_sd: c.noise_sd,
            wave_amplitude: c.wave_amplitude,
        }
    }
}

impl SceneSection {
    pub fn to_scene_config(&self) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            n_dates: self.n_dates,
            seed: self.seed,
            bloom_amplitude: self.bloom_amplitude,
            noise_sd: self.noise_sd,
            wave_amplitude: self.wave_amplitude,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    pub ratio: f64,
    pub seed: u64,
    pub sigma2: f64,
    pub range: f64,
}

impl Default for MaskSection {
    fn default() -> Self {
        let g = GrfConfig::default();
        Self {
            ratio: 0.1,
            seed: 1,
            sigma2: g.sigma2,
            range: g.range,
        }
    }
}

impl MaskSection {
    pub fn grf_config(&self) -> GrfConfig {
        GrfConfig {
            sigma2: self.sigma2,
            range: self.range,
            ..GrfConfig::default()
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub n_runs: usize,
    pub base_seed: u64,
    pub split_fractions: [f64; 3],
    /// Methods the pipeline runs: model kinds plus optionally "baseline".
    pub models: Vec<String>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        Self {
            max_epochs: c.max_epochs,
            lr: c.lr,
            batch_size: c.batch_size,
            early_stop_patience: c.early_stop_patience,
            n_runs: c.n_runs,
            base_seed: c.base_seed,
            split_fractions: [
                c.split_fractions.0,
                c.split_fractions.1,
                c.split_fractions.2,
            ],
            models: vec!["cnn".into(), "baseline".into()],
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            early_stop_patience: self.early_stop_patience,
            n_runs: self.n_runs,
            split_fractions: (
                self.split_fractions[0],
                self.split_fractions[1],
                self.split_fractions[2],
            ),
            base_seed: self.base_seed,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndicesSection {
    pub kind: String,
    pub orientation: String,
}

impl Default for IndicesSection {
    fn default() -> Self {
        Self {
            kind: "ndci".into(),
            orientation: "standard".into(),
        }
    }
}

/// An imputation method selectable on the command line or in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Baseline,
    Kind(ModelKind),
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        if s == "baseline" {
            return Ok(Method::Baseline);
        }
        ModelKind::from_str(s).map(Method::Kind).map_err(|_| {
            CliError::User(format!(
                "unknown model '{s}' (expected cnn, autoencoder_cnn, cnn_lstm, \
                 autoencoder_lstm, or baseline)"
            ))
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Kind(k) => k.name(),
        }
    }
}

pub fn parse_index_kind(s: &str) -> Result<IndexKind, CliError> {
    IndexKind::from_str(s).map_err(CliError::User)
}

pub fn parse_orientation(s: &str) -> Result<NdciOrientation, CliError> {
    NdciOrientation::from_str(s).map_err(CliError::User)
}

/// Load the config file, or defaults when no path is given.
pub fn load_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::User(format!("reading config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| CliError::User(format!("config {}: {e}", path.display())))
}
