//! Experiment configuration: one TOML file covering data generation, model
//! dims, loss, sampler, optimizer schedule, downstream-protocol budgets and
//! ablation switches, with `TRIMODAL_`-prefixed environment overrides.

use crate::error::{Error, Result};
use crate::eval::probes::{FtConfig, HeadConfig, LpConfig};
use crate::eval::retrieval::RetrievalConfig;
use crate::eval::uniformity::KdeConfig;
use crate::maninneg::ManiNegConfig;
use crate::model::ModelDims;
use crate::objectives::LossConfig;
use crate::synthdata::{GenConfig, VOCAB};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Pretraining schedule: linear warmup to the peak rate, then cosine
/// annealing down to the minimum by the final step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            min_lr: 1e-7,
            warmup_steps: 300,
            total_steps: 9000,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !(self.min_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.min_lr > self.peak_lr {
            return Err(Error::Config(format!(
                "min_lr {} above peak_lr {}",
                self.min_lr, self.peak_lr
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// How negatives enter a pretraining batch.
///
/// `ce_weighted` denotes the no-selection baseline in which every uniformly
/// drawn candidate already contributes to the loss through its softmax
/// weight; batch construction is therefore identical to `uniform`, and the
/// mode exists as a separately labeled ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Maninneg,
    Uniform,
    CeWeighted,
}

impl SamplingMode {
    /// Whether batch candidates are drawn uniformly (no hardness control).
    pub fn is_uniform(self) -> bool {
        matches!(self, SamplingMode::Uniform | SamplingMode::CeWeighted)
    }
}

/// Which ingredients of the objective a run uses. Defaults are the full
/// trimodal recipe; switches exist for the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSwitches {
    pub text: bool,
    pub mani: bool,
    pub label_smoothing: bool,
    pub sampling: SamplingMode,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self { text: true, mani: true, label_smoothing: true, sampling: SamplingMode::Maninneg }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Training seed: parameter init, batch draws, augmentation, dropout.
    pub seed: u64,
    /// View-augmentation strength during pretraining (0 disables).
    pub augment_strength: f64,
    /// Emit an intermediate checkpoint every this many steps (0 = final
    /// checkpoint only).
    pub checkpoint_every: u64,
    pub data: GenConfig,
    pub model: ModelDims,
    pub loss: LossConfig,
    pub maninneg: ManiNegConfig,
    pub optimizer: OptimizerConfig,
    pub lp: LpConfig,
    pub le: HeadConfig,
    pub ft: FtConfig,
    pub retrieval: RetrievalConfig,
    pub kde: KdeConfig,
    pub ablation: AblationSwitches,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            augment_strength: 1.0,
            checkpoint_every: 0,
            data: GenConfig::default(),
            model: ModelDims::default(),
            loss: LossConfig::default(),
            maninneg: ManiNegConfig::default(),
            optimizer: OptimizerConfig::default(),
            lp: LpConfig::default(),
            le: HeadConfig::default(),
            ft: FtConfig::default(),
            retrieval: RetrievalConfig::default(),
            kde: KdeConfig::default(),
            ablation: AblationSwitches::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.maninneg.validate()?;
        self.optimizer.validate()?;
        self.retrieval.validate()?;
        self.kde.validate()?;
        if !(0.0..=1.0).contains(&self.augment_strength) {
            return Err(Error::Config(format!(
                "augment_strength {} outside [0, 1]",
                self.augment_strength
            )));
        }
        if self.model.view_size != self.data.view_size {
            return Err(Error::Config(format!(
                "model.view_size {} disagrees with data.view_size {}",
                self.model.view_size, self.data.view_size
            )));
        }
        if self.model.vocab != VOCAB {
            return Err(Error::Config(format!(
                "model.vocab {} must equal the report vocabulary size {VOCAB}",
                self.model.vocab
            )));
        }
        if self.maninneg.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::Parse(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse TOML, then apply `(key, value)` overrides of the form produced
    /// by environment variables: `TRIMODAL_OPTIMIZER_PEAK_LR=2e-4` sets
    /// `optimizer.peak_lr`, `TRIMODAL_SEED=7` sets the top-level `seed`.
    /// The section is recognized as the longest leading segment naming an
    /// existing table (or known section); the rest is the key.
    pub fn from_toml_with_overrides<I>(text: &str, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Parse(format!("experiment config: {e}")))?;
        for (key, value) in vars {
            let Some(rest) = key.strip_prefix("TRIMODAL_") else { continue };
            let path = rest.to_ascii_lowercase();
            apply_override(&mut table, &path, &value)?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e| Error::Parse(format!("experiment config after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file and apply any `TRIMODAL_*` variables from the
    /// process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_with_overrides(&text, std::env::vars())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(format!("serialize config: {e}")))
    }

    /// Digest of the canonical serialized form; stored in checkpoints so a
    /// resume under a different configuration is rejected.
    pub fn config_hash(&self) -> Result<[u8; 32]> {
        let text = self.to_toml_string()?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        Ok(h.finalize().into())
    }
}

const SECTIONS: [&str; 12] = [
    "data",
    "model",
    "loss",
    "maninneg",
    "optimizer",
    "lp",
    "le",
    "ft",
    "retrieval",
    "kde",
    "ablation",
    "", // sentinel: top level
];

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    toml::Value::String(raw.to_string())
}

fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let value = parse_override_value(raw);
    // Longest matching section first, so e.g. `maninneg_mu_max` never
    // shadows a hypothetical top-level `maninneg_mu` key.
    let mut sections: Vec<&str> = SECTIONS.into_iter().filter(|s| !s.is_empty()).collect();
    sections.sort_by_key(|s| std::cmp::Reverse(s.len()));
    for section in sections {
        if let Some(key) = path.strip_prefix(section).and_then(|r| r.strip_prefix('_')) {
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let Some(sub) = entry.as_table_mut() else {
                return Err(Error::Parse(format!("config section {section} is not a table")));
            };
            sub.insert(key.to_string(), value);
            return Ok(());
        }
    }
    table.insert(path.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.config_hash().unwrap(), back.config_hash().unwrap());
    }

    #[test]
    fn partial_file_fills_in_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 9\n[optimizer]\ntotal_steps = 500\n[maninneg]\nbatch_size = 16\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.optimizer.total_steps, 500);
        assert_eq!(cfg.optimizer.peak_lr, 1e-4);
        assert_eq!(cfg.maninneg.batch_size, 16);
        assert_eq!(cfg.maninneg.sigma, 3.0);
    }

    #[test]
    fn env_style_overrides_reach_nested_sections() {
        let vars = [
            ("TRIMODAL_SEED".to_string(), "42".to_string()),
            ("TRIMODAL_OPTIMIZER_PEAK_LR".to_string(), "0.002".to_string()),
            ("TRIMODAL_MANINNEG_ANNEAL_END_STEP".to_string(), "80".to_string()),
            ("TRIMODAL_ABLATION_SAMPLING".to_string(), "ce_weighted".to_string()),
            ("TRIMODAL_ABLATION_TEXT".to_string(), "false".to_string()),
            ("TRIMODAL_AUGMENT_STRENGTH".to_string(), "0.25".to_string()),
            ("UNRELATED".to_string(), "ignored".to_string()),
        ];
        let cfg = ExperimentConfig::from_toml_with_overrides("", vars).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.optimizer.peak_lr, 0.002);
        assert_eq!(cfg.maninneg.anneal_end_step, 80);
        assert_eq!(cfg.ablation.sampling, SamplingMode::CeWeighted);
        assert!(!cfg.ablation.text);
        assert_eq!(cfg.augment_strength, 0.25);
    }

    #[test]
    fn override_with_bad_value_fails_to_parse() {
        let vars = [("TRIMODAL_OPTIMIZER_PEAK_LR".to_string(), "not_a_rate".to_string())];
        let err = ExperimentConfig::from_toml_with_overrides("", vars).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn cross_field_validation_catches_mismatches() {
        let err = ExperimentConfig::from_toml_str("[optimizer]\nwarmup_steps = 9000\n")
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err =
            ExperimentConfig::from_toml_str("[model]\nview_size = 16\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "view size mismatch must fail: {err}");
        let err = ExperimentConfig::from_toml_str("[model]\nvocab = 50\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("learning_rate = 0.1\n"),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_toml_str("[optimizer]\nmomentum = 0.9\n"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn sampling_modes_parse_from_snake_case() {
        for (name, mode, uniform) in [
            ("maninneg", SamplingMode::Maninneg, false),
            ("uniform", SamplingMode::Uniform, true),
            ("ce_weighted", SamplingMode::CeWeighted, true),
        ] {
            let cfg = ExperimentConfig::from_toml_str(&format!(
                "[ablation]\nsampling = \"{name}\"\n"
            ))
            .unwrap();
            assert_eq!(cfg.ablation.sampling, mode);
            assert_eq!(cfg.ablation.sampling.is_uniform(), uniform);
        }
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.config_hash().unwrap(), b.config_hash().unwrap());
    }
}
