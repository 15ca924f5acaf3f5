//! Run configuration: one JSON document, unknown keys rejected.
//!
//! Step counts left out of the document fall back to the preset. The config
//! hash is taken over the fully resolved document (output directory
//! excluded), so `{}` and the same defaults spelled out hash identically.

use std::fs;
use std::path::{Path, PathBuf};

use pirtune_core::estimator::EstimatorConfig;
use pirtune_core::gan::GanConfig;
use pirtune_core::nets::{PresetName, ScalePreset};
use pirtune_core::objectives::{DEFAULT_IMAGES, DEFAULT_IMPRESSIONS};
use pirtune_core::tuning::{IterationConfig, TuningConfig, DEFAULT_W_PIR};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Either a fixed descriptor (`"R"`, `"GB"`, `"conv3:1,4"`) or a layer plus
/// a filter count, the set then drawn with the objective-sampling seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ObjectiveSpec {
    Descriptor(String),
    Sampled {
        layer: String,
        filters: usize,
    },
}

impl ObjectiveSpec {
    pub fn is_filter(&self) -> bool {
        match self {
            ObjectiveSpec::Descriptor(s) => s.contains(':'),
            ObjectiveSpec::Sampled { .. } => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub corpus: u64,
    pub pretrain: u64,
    pub objective: u64,
    pub dataset: u64,
    pub estimator: u64,
    pub tuning: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            corpus: 0,
            pretrain: 1,
            objective: 2,
            dataset: 3,
            estimator: 4,
            tuning: 5,
            eval: 6,
        }
    }
}

impl Seeds {
    pub const NAMES: [&'static str; 7] = ["corpus", "pretrain", "objective", "dataset", "estimator", "tuning", "eval"];

    fn slot(&mut self, name: &str) -> Option<&mut u64> {
        Some(match name {
            "corpus" => &mut self.corpus,
            "pretrain" => &mut self.pretrain,
            "objective" => &mut self.objective,
            "dataset" => &mut self.dataset,
            "estimator" => &mut self.estimator,
            "tuning" => &mut self.tuning,
            "eval" => &mut self.eval,
            _ => return None,
        })
    }

    /// Applies a `name=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (name, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("seed override `{spec}` is not of the form name=value")))?;
        let value: u64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("seed override `{spec}`: value is not a u64")))?;
        let slot = self.slot(name.trim()).ok_or_else(|| {
            CliError::Config(format!(
                "unknown seed `{name}` (expected one of {})",
                Self::NAMES.join(", ")
            ))
        })?;
        *slot = value;
        Ok(())
    }
}

/// Step counts; `None` takes the preset's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Steps {
    pub pretrain: Option<usize>,
    pub oracle: Option<usize>,
    pub estimator: Option<usize>,
    pub tune: Option<usize>,
    pub iterate_estimator: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningRates {
    pub pretrain: f64,
    pub tune: f64,
    pub estimator: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            pretrain: 1e-5,
            tune: 1e-6,
            estimator: EstimatorConfig::default().learning_rate,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Noise-free objective values.
    #[default]
    True,
    /// Binomial draws at the dataset's impression count.
    Observed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: PresetName,
    /// Class-conditional (auxiliary classifier) GAN.
    pub conditional: bool,
    pub objective: ObjectiveSpec,
    pub seeds: Seeds,
    pub corpus_size: usize,
    pub steps: Steps,
    pub n_images: usize,
    pub n_impressions: u64,
    pub eval_samples: usize,
    pub eval_target: EvalMode,
    pub w_pir: f64,
    pub temperature: f64,
    pub learning_rates: LearningRates,
    pub batch_size: usize,
    pub log_interval: usize,
    /// Run directory whose pretrain stage is reused instead of training a
    /// fresh GAN. Its preset and GAN mode must match.
    pub pretrained_from: Option<PathBuf>,
    /// Root under which `runs/<hash>/` is created. Not part of the hash.
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: PresetName::Desk,
            conditional: true,
            objective: ObjectiveSpec::Descriptor("R".into()),
            seeds: Seeds::default(),
            corpus_size: 2000,
            steps: Steps::default(),
            n_images: DEFAULT_IMAGES,
            n_impressions: DEFAULT_IMPRESSIONS,
            eval_samples: 1000,
            eval_target: EvalMode::True,
            w_pir: DEFAULT_W_PIR,
            temperature: pirtune_core::estimator::DECODE_TEMPERATURE,
            learning_rates: LearningRates::default(),
            batch_size: 32,
            log_interval: 100,
            pretrained_from: None,
            output_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn preset(&self) -> ScalePreset {
        ScalePreset::by_name(self.preset)
    }

    /// Copy with every optional field filled from the preset.
    pub fn resolved(&self) -> Self {
        let p = self.preset();
        let mut out = self.clone();
        let s = &mut out.steps;
        s.pretrain.get_or_insert(p.pretrain_steps);
        s.oracle.get_or_insert(p.oracle_steps);
        s.estimator.get_or_insert(p.estimator_steps);
        s.tune.get_or_insert(p.tune_steps);
        s.iterate_estimator.get_or_insert(p.iterate_estimator_steps);
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(CliError::Config(msg.to_string()));
        if self.corpus_size < 2 {
            return bad("corpus_size must be at least 2");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.n_images < 2 || self.eval_samples < 2 {
            return bad("n_images and eval_samples must be at least 2");
        }
        if self.n_impressions == 0 {
            return bad("n_impressions must be positive");
        }
        if !(self.w_pir.is_finite() && self.w_pir >= 0.0) {
            return bad("w_pir must be finite and non-negative");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        let lr = &self.learning_rates;
        if [lr.pretrain, lr.tune, lr.estimator].iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.log_interval == 0 {
            return bad("log_interval must be positive");
        }
        if let ObjectiveSpec::Descriptor(d) = &self.objective {
            d.parse::<pirtune_core::objectives::PirObjective>()
                .map_err(|e| CliError::Config(format!("objective: {e}")))?;
        }
        if let ObjectiveSpec::Sampled { filters: 0, .. } = self.objective {
            return bad("sampled objective needs at least one filter");
        }
        Ok(())
    }

    /// Canonical JSON of the resolved config without the output directory.
    pub fn canonical_json(&self) -> String {
        let mut value = serde_json::to_value(self.resolved()).expect("config serialises");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        serde_json::to_string(&value).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(self.hash())
    }

    fn steps(&self) -> Steps {
        self.resolved().steps
    }

    pub fn pretrain_steps(&self) -> usize {
        self.steps().pretrain.unwrap_or_default()
    }

    pub fn oracle_steps(&self) -> usize {
        self.steps().oracle.unwrap_or_default()
    }

    pub fn gan_config(&self) -> GanConfig {
        GanConfig {
            batch_size: self.batch_size,
            d_learning_rate: self.learning_rates.pretrain,
            g_learning_rate: self.learning_rates.pretrain,
            log_interval: self.log_interval,
            ..GanConfig::default()
        }
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            steps: self.steps().estimator.unwrap_or_default(),
            learning_rate: self.learning_rates.estimator,
            batch_size: self.batch_size,
            log_interval: self.log_interval,
            ..EstimatorConfig::default()
        }
    }

    pub fn tuning_config(&self) -> TuningConfig {
        TuningConfig {
            w_pir: self.w_pir,
            g_learning_rate: self.learning_rates.tune,
            d_learning_rate: self.learning_rates.tune,
            batch_size: self.batch_size,
            steps: self.steps().tune.unwrap_or_default(),
            temperature: self.temperature,
            log_interval: self.log_interval,
            ..TuningConfig::default()
        }
    }

    pub fn iteration_config(&self) -> IterationConfig {
        IterationConfig {
            n_images: self.n_images,
            n_impressions: self.n_impressions,
            eval_samples: self.eval_samples,
            estimator: EstimatorConfig {
                steps: self.steps().iterate_estimator.unwrap_or_default(),
                ..self.estimator_config()
            },
            tuning: self.tuning_config(),
        }
    }
}
