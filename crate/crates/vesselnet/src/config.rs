//! Run configuration: a TOML file with sections of key = value pairs,
//! overridable by CLI flags (flags win). Every command writes the resolved
//! snapshot next to its outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PoolingMode};
use crate::optim::adam::AdamConfig;
use crate::optim::train::TrainSettings;
use crate::synthgen::SynthConfig;
use crate::types::ScenarioId;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            sample_rate: 16000,
            clip_seconds: 1.0,
            manifest: None,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendSection {
    pub n_filters: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub kernel_width: usize,
    pub hop_ms: f64,
}

impl Default for FrontendSection {
    fn default() -> Self {
        FrontendSection {
            n_filters: 32,
            f_min_hz: 60.0,
            f_max_hz: 8000.0,
            kernel_width: 401,
            hop_ms: 10.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub channels: Vec<usize>,
    pub attention_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            channels: vec![16, 32, 64],
            attention_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub pooling: PoolingMode,
    pub use_ctdsv: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            pooling: PoolingMode::Attention,
            use_ctdsv: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Scenario subset used for training and evaluation filtering.
    pub scenarios: Vec<String>,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            scenarios: vec!["S1".into(), "S2".into(), "S3".into()],
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    /// Epochs per ablation run; falls back to `[train] epochs`.
    pub epochs: Option<usize>,
    /// Scenario subsets to sweep, e.g. `[["S1","S2","S3"]]`.
    pub subsets: Vec<Vec<String>>,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            seeds: vec![0, 1, 2],
            epochs: None,
            subsets: vec![vec!["S1".into(), "S2".into(), "S3".into()]],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub clips_per_cell: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            clips_per_cell: 200,
            seed: 0,
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub frontend: FrontendSection,
    pub encoder: EncoderSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub ablate: AblateSection,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    pub fn n_samples(&self) -> usize {
        (self.data.sample_rate as f64 * self.data.clip_seconds).round() as usize
    }

    pub fn hop(&self) -> usize {
        ((self.data.sample_rate as f64 * self.frontend.hop_ms / 1000.0).round() as usize).max(1)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mc = ModelConfig {
            sample_rate: self.data.sample_rate,
            n_samples: self.n_samples(),
            n_filters: self.frontend.n_filters,
            f_min_hz: self.frontend.f_min_hz,
            f_max_hz: self.frontend.f_max_hz,
            kernel_width: self.frontend.kernel_width,
            hop: self.hop(),
            encoder_channels: self.encoder.channels.clone(),
            attention_dim: self.encoder.attention_dim,
            pooling: self.model.pooling,
            use_ctdsv: self.model.use_ctdsv,
        };
        mc.validate()?;
        Ok(mc)
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            adam: AdamConfig {
                lr: self.train.lr,
                beta1: self.train.beta1,
                beta2: self.train.beta2,
                eps: self.train.eps,
            },
            seed: self.train.seed,
        }
    }

    pub fn scenario_subset(&self) -> Result<Vec<ScenarioId>> {
        parse_scenarios(&self.train.scenarios)
    }

    pub fn synth_config(&self) -> SynthConfig {
        let mut cfg = SynthConfig::new(
            self.data.sample_rate,
            self.synth.clips_per_cell,
            self.synth.seed,
        );
        cfg.clip_seconds = self.data.clip_seconds;
        cfg
    }
}

/// Parses scenario names, rejecting unknown and duplicate entries.
pub fn parse_scenarios(names: &[String]) -> Result<Vec<ScenarioId>> {
    if names.is_empty() {
        return Err(Error::Config("scenario subset is empty".into()));
    }
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let s = ScenarioId::parse(name)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{name}`")))?;
        if out.contains(&s) {
            return Err(Error::Config(format!("duplicate scenario `{name}`")));
        }
        out.push(s);
    }
    Ok(out)
}

/// Canonical `S1+S2` style tag for a subset.
pub fn subset_tag(subset: &[ScenarioId]) -> String {
    subset
        .iter()
        .map(|s| s.name())
        .collect::<Vec<_>>()
        .join("+")
}
