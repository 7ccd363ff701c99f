//! Experiment configuration: one TOML file holding every module config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PairLayout, Split};
use crate::error::{Error, Result};
use crate::judge::{RemoteJudgeConfig, SimJudgeConfig};
use crate::rff::{Encoder, EncoderConfig, RandomFeatureMap};
use crate::rloo::AlignConfig;
use crate::router::{RouterConfig, RoutingMode, SWEEP_THRESHOLDS};
use crate::sngp::{GpHead, GpHeadConfig, TrainReport};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub num_features: usize,
    pub sigma_k: f64,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            num_features: 512,
            sigma_k: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum JudgeBackend {
    #[default]
    Sim,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct JudgeSection {
    pub backend: JudgeBackend,
    pub sim: SimJudgeConfig,
    pub remote: RemoteJudgeConfig,
}

/// Candidate pools for the alignment loop. Shift and spread come from `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptPoolConfig {
    pub n_prompts: usize,
    pub candidates: usize,
    pub ood_fraction: f64,
    pub seed: u64,
}

impl Default for PromptPoolConfig {
    fn default() -> Self {
        Self {
            n_prompts: 512,
            candidates: 16,
            ood_fraction: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
    pub modes: Vec<RoutingMode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            thresholds: SWEEP_THRESHOLDS.to_vec(),
            modes: vec![RoutingMode::Uncertainty, RoutingMode::Random],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub data: crate::data::GenConfig,
    pub encoder: EncoderConfig,
    pub features: FeatureConfig,
    pub head: GpHeadConfig,
    pub router: RouterConfig,
    pub judge: JudgeSection,
    pub prompts: PromptPoolConfig,
    pub align: AlignConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            out_dir: PathBuf::from("runs/default"),
            data: Default::default(),
            encoder: Default::default(),
            features: Default::default(),
            head: Default::default(),
            router: Default::default(),
            judge: Default::default(),
            prompts: Default::default(),
            align: Default::default(),
            sweep: Default::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Schema(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Schema(format!("config: {e}")))
    }

    /// Writes the resolved config into `dir` and returns its path.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }

    /// Derives every section seed from one value.
    pub fn with_seed(mut self, seed: u64) -> Self {
        // Distinct stream per section so one global seed never reuses a stream.
        let s = |k: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k);
        self.data.seed = seed;
        self.encoder.seed = s(1);
        self.features.seed = s(2);
        self.head.seed = s(3);
        self.router.seed = s(4);
        self.judge.sim.seed = s(5);
        self.prompts.seed = s(6);
        self.align.seed = s(7);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.head.validate()?;
        self.router.validate()?;
        self.judge.sim.validate()?;
        if self.judge.backend == JudgeBackend::Remote {
            self.judge.remote.validate()?;
        }
        self.align.validate()?;
        if self.features.num_features == 0 || !(self.features.sigma_k > 0.0 && self.features.sigma_k.is_finite()) {
            return Err(Error::invalid("features need num_features >= 1 and a positive finite sigma_k"));
        }
        if self.prompts.n_prompts == 0 || self.prompts.candidates < self.align.k {
            return Err(Error::invalid("prompt pool needs >= 1 prompt and at least K candidates"));
        }
        if self.sweep.thresholds.iter().any(|t| t.is_nan()) || self.sweep.modes.is_empty() {
            return Err(Error::invalid("sweep needs non-NaN thresholds and at least one mode"));
        }
        Ok(())
    }

    /// Untrained head sized for `layout`; the encoder input width follows the data.
    pub fn build_head(&self, layout: &PairLayout) -> Result<GpHead> {
        let encoder = Encoder::new(EncoderConfig {
            input_dim: layout.pair_dim(),
            ..self.encoder.clone()
        })?;
        let features = RandomFeatureMap::new(
            encoder.output_dim(),
            self.features.num_features,
            self.features.sigma_k,
            self.features.seed,
        )?;
        GpHead::new(encoder, features, self.head.clone())
    }

    /// Trains on the swap-augmented training split and runs the covariance pass.
    pub fn train_head(&self, dataset: &Dataset) -> Result<(GpHead, TrainReport)> {
        let train = dataset.filter_split(Split::IdTrain).augment_swap()?;
        let mut head = self.build_head(&dataset.layout())?;
        let report = head.train(&train.records)?;
        head.compute_covariance(&train.records)?;
        Ok((head, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::default().with_seed(17);
        cfg.name = "rt".into();
        cfg.align.clip_ratio = Some(0.2);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn infinite_threshold_survives_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.router = RouterConfig::no_routing();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back.router.threshold, f64::INFINITY);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("name = \"x\"\n[data]\nn_prompts = 50\n").unwrap();
        assert_eq!(cfg.data.n_prompts, 50);
        assert_eq!(cfg.features.num_features, 512);
        assert_eq!(cfg.sweep.thresholds, SWEEP_THRESHOLDS.to_vec());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml_str("nmae = \"x\"\n"), Err(Error::Schema(_))));
        assert!(matches!(
            ExperimentConfig::from_toml_str("[router]\nepsilon = 0.7\n"),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn seeds_are_distinct_per_section() {
        let cfg = ExperimentConfig::default().with_seed(3);
        let seeds = [cfg.encoder.seed, cfg.features.seed, cfg.head.seed, cfg.router.seed, cfg.align.seed];
        let mut sorted = seeds.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), seeds.len());
        assert_ne!(ExperimentConfig::default().with_seed(4).head.seed, cfg.head.seed);
    }
}
