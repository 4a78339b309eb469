use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::ObjectiveConfig;
use crate::data::{LabelEncoding, SplitFractions, SynthConfig};
use crate::gradcore::AdamConfig;
use crate::oracle::OracleConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthConfig),
    File(FileSource),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    pub path: PathBuf,
    #[serde(default)]
    pub labels: LabelEncoding,
    /// Take the partition from the file's `split` column instead of splitting.
    #[serde(default)]
    pub use_split_column: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub fractions: SplitFractions,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: SplitFractions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: vec![32],
            embedding_dim: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Passes over the labeled pool per active-learning iteration.
    pub epochs: usize,
    /// Continue from the previous iteration's parameters instead of re-initializing.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            warm_start: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionMode {
    /// Highest predictive entropy first.
    Entropy,
    /// Uniformly at random.
    Random,
    /// Train once on the initial labeled pool, never query.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    /// `ratio_percent` of the whole dataset per iteration.
    Fixed,
    /// `ratio_percent` of the current unlabeled pool per iteration.
    Fraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    pub mode: AcquisitionMode,
    pub ratio_percent: f64,
    pub count_mode: CountMode,
    /// Labeled-percentage checkpoints; the run stops at the largest.
    pub budgets: Vec<f64>,
    /// Extension: score by `entropy × (1 − r_eeg)` instead of entropy alone.
    pub reliability_weighted: bool,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            mode: AcquisitionMode::Entropy,
            ratio_percent: 5.0,
            count_mode: CountMode::Fixed,
            budgets: vec![10.0, 30.0, 50.0, 70.0, 100.0],
            reliability_weighted: false,
            seed: 0,
        }
    }
}

impl AcquisitionConfig {
    pub fn final_budget(&self) -> f64 {
        self.budgets.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub split: SplitConfig,
    pub model: ModelSection,
    pub objective: ObjectiveConfig,
    pub optimizer: AdamConfig,
    pub training: TrainingConfig,
    pub acquisition: AcquisitionConfig,
    pub oracle: OracleConfig,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        // Relative data paths are resolved against the config file.
        if let DataSource::File(f) = &mut cfg.data {
            if f.path.is_relative() {
                if let Some(dir) = path.parent() {
                    f.path = dir.join(&f.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sets every seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        if let DataSource::Synthetic(s) = &mut self.data {
            s.seed = seed;
        }
        self.split.seed = seed;
        self.model.seed = seed;
        self.training.seed = seed;
        self.acquisition.seed = seed;
        self.oracle.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let cfg_err = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        if let DataSource::Synthetic(s) = &self.data {
            s.validate().map_err(|e| cfg_err(&e))?;
        }
        self.split.fractions.validate().map_err(|e| cfg_err(&e))?;
        self.objective.validate().map_err(|e| cfg_err(&e))?;
        self.oracle.validate().map_err(|e| cfg_err(&e))?;
        if self.model.embedding_dim == 0 || self.model.hidden.contains(&0) {
            return bad("model widths must be at least 1".into());
        }
        if self.training.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2 for the alignment losses, got {}",
                self.training.batch_size
            ));
        }
        let opt = &self.optimizer;
        if !(opt.lr > 0.0 && (0.0..1.0).contains(&opt.beta1) && (0.0..1.0).contains(&opt.beta2) && opt.eps > 0.0) {
            return bad(format!("invalid optimizer settings {opt:?}"));
        }
        let acq = &self.acquisition;
        if !(acq.ratio_percent > 0.0 && acq.ratio_percent <= 100.0) {
            return bad(format!("ratio_percent must lie in (0, 100], got {}", acq.ratio_percent));
        }
        if acq.budgets.is_empty() || acq.budgets.iter().any(|b| !(*b > 0.0 && *b <= 100.0)) {
            return bad(format!("budgets must be non-empty percentages in (0, 100], got {:?}", acq.budgets));
        }
        let initial = self.split.fractions.labeled * 100.0;
        if !matches!(self.data, DataSource::File(FileSource { use_split_column: true, .. }))
            && acq.final_budget() + 1e-9 < initial
        {
            return bad(format!(
                "final budget {}% is below the initial labeled share {initial}%",
                acq.final_budget()
            ));
        }
        Ok(())
    }

    /// Digest of every setting that affects results (the output directory excluded).
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
