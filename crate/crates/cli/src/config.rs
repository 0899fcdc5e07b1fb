//! Experiment configuration: strict JSON with every violation reported at
//! once, plus the environment seed override.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use lrsl_core::adapters::AdapterConfig;
use lrsl_core::nn::Placement;
use lrsl_core::trainer::{TaskSpec, TrainConfig};
use lrsl_core::TransformerConfig;

use crate::CliError;

/// Name of the environment variable that, when set to a decimal integer,
/// replaces every seed in the configuration.
pub const SEED_ENV_VAR: &str = "LRSL_SEED";

/// One pipeline stage: what data to generate and how to optimize on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
}

fn flag_on() -> bool {
    true
}

/// Which analyses the experiment runner emits after finetuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisFlags {
    #[serde(default = "flag_on")]
    pub similarity: bool,
    #[serde(default = "flag_on")]
    pub projection: bool,
    #[serde(default = "flag_on")]
    pub forgetting: bool,
}

impl Default for AnalysisFlags {
    fn default() -> Self {
        AnalysisFlags { similarity: true, projection: true, forgetting: true }
    }
}

/// The one-shot experiment: pretrain fully, finetune each scheme, analyze.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: TransformerConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub schemes: Vec<AdapterConfig>,
    #[serde(default)]
    pub analyses: AnalysisFlags,
    pub output_dir: PathBuf,
    /// Run finetuning of the schemes on separate threads. Outputs are
    /// identical either way; this only trades wall time for cores.
    #[serde(default)]
    pub parallel_schemes: bool,
}

/// Shape a placement's weight takes under a model config.
pub fn placement_shape(cfg: &TransformerConfig, p: Placement) -> Option<(usize, usize)> {
    match p {
        Placement::Query | Placement::Key | Placement::Value | Placement::Output => {
            Some((cfg.d_model, cfg.d_model))
        }
        Placement::Gate | Placement::MlpUp => Some((cfg.d_ff, cfg.d_model)),
        Placement::MlpDown => Some((cfg.d_model, cfg.d_ff)),
        Placement::Embed | Placement::Head => Some((cfg.vocab_size, cfg.d_model)),
        Placement::Norm => None,
    }
}

impl ExperimentConfig {
    /// Parses strict JSON: unknown keys anywhere are errors.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config error: {e}")))
    }

    /// Collects every violation across the nested configs.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut problems = Vec::new();
        if let Err(e) = self.model.validate() {
            problems.push(format!("model: {e}"));
        }
        for (label, stage) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if let Err(e) = stage.task.validate() {
                problems.push(format!("{label}.task: {e}"));
            }
            if let Err(e) = stage.train.validate() {
                problems.push(format!("{label}.train: {e}"));
            }
            if stage.task.vocab_size > self.model.vocab_size {
                problems.push(format!(
                    "{label}.task: vocab_size {} exceeds the model's {}",
                    stage.task.vocab_size, self.model.vocab_size
                ));
            }
            let seq = stage.task.sequence_len();
            if seq > self.model.max_seq_len {
                problems.push(format!(
                    "{label}.task: sequences of length {seq} exceed the model's max_seq_len {}",
                    self.model.max_seq_len
                ));
            }
            if seq > stage.train.max_seq_len {
                problems.push(format!(
                    "{label}.train: max_seq_len {} is below the task's sequence length {seq}",
                    stage.train.max_seq_len
                ));
            }
        }
        if self.schemes.is_empty() {
            problems.push("schemes: at least one adapter scheme is required".to_string());
        }
        let mut seen = BTreeMap::new();
        for (i, scheme) in self.schemes.iter().enumerate() {
            let label = format!("schemes[{i}] ({})", scheme.scheme);
            if let Some(prev) = seen.insert(scheme.scheme, i) {
                problems.push(format!(
                    "{label}: duplicate of schemes[{prev}]; scheme directories would collide"
                ));
            }
            if scheme.rank == 0 {
                problems.push(format!("{label}: rank must be at least 1"));
            }
            if !(0.0..1.0).contains(&scheme.dropout) {
                problems.push(format!("{label}: dropout must lie in [0, 1), got {}", scheme.dropout));
            }
            if scheme.placement.is_empty() {
                problems.push(format!("{label}: placement set is empty"));
            }
            if scheme.placement.contains(&Placement::Norm) {
                problems.push(format!("{label}: norm gains cannot take adapters"));
            }
            if scheme.scheme.split_mode().is_some() && scheme.alpha != scheme.rank as f64 {
                problems.push(format!(
                    "{label}: spectral schemes need alpha == rank, got alpha {} with rank {}",
                    scheme.alpha, scheme.rank
                ));
            }
            for &p in &scheme.placement {
                if let Some((rows, cols)) = placement_shape(&self.model, p) {
                    let k = rows.min(cols);
                    if scheme.rank > k {
                        problems.push(format!(
                            "{label}: rank {} exceeds min dimension {k} of {p} weights ({rows}x{cols})",
                            scheme.rank
                        ));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "invalid experiment config ({} problem{}):\n  - {}",
                problems.len(),
                if problems.len() == 1 { "" } else { "s" },
                problems.join("\n  - ")
            )))
        }
    }

    /// Replaces every seed in the config with `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        self.model.seed = seed;
        self.pretrain.task.seed = seed;
        self.pretrain.train.seed = seed;
        self.finetune.task.seed = seed;
        self.finetune.train.seed = seed;
        for scheme in &mut self.schemes {
            scheme.seed = seed;
        }
    }

    /// The seeds a run will actually use, for the manifest.
    pub fn effective_seeds(&self) -> BTreeMap<String, u64> {
        let mut seeds = BTreeMap::from([
            ("model".to_string(), self.model.seed),
            ("pretrain.task".to_string(), self.pretrain.task.seed),
            ("pretrain.train".to_string(), self.pretrain.train.seed),
            ("finetune.task".to_string(), self.finetune.task.seed),
            ("finetune.train".to_string(), self.finetune.train.seed),
        ]);
        for scheme in &self.schemes {
            seeds.insert(format!("scheme.{}", scheme.scheme), scheme.seed);
        }
        seeds
    }
}

/// Reads `LRSL_SEED`; `Ok(None)` when unset, usage error when unparseable.
pub fn seed_override_from_env() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV_VAR) {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| {
                CliError::Usage(format!(
                    "{SEED_ENV_VAR} must be a decimal unsigned integer, got `{text}`"
                ))
            }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Usage(format!("{SEED_ENV_VAR}: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lrsl_core::adapters::Scheme;
    use lrsl_core::trainer::TaskKind;

    fn valid_config() -> ExperimentConfig {
        ExperimentConfig {
            model: TransformerConfig {
                vocab_size: 10,
                d_model: 16,
                n_heads: 2,
                n_layers: 1,
                d_ff: 24,
                max_seq_len: 16,
                seed: 1,
            },
            pretrain: StageConfig {
                task: TaskSpec {
                    kind: TaskKind::Copy,
                    vocab_size: 10,
                    seq_len: 3,
                    num_train: 30,
                    num_eval: 10,
                    seed: 2,
                },
                train: TrainConfig { total_steps: 10, warmup_steps: 2, ..TrainConfig::default() },
            },
            finetune: StageConfig {
                task: TaskSpec {
                    kind: TaskKind::Reverse,
                    vocab_size: 10,
                    seq_len: 3,
                    num_train: 30,
                    num_eval: 10,
                    seed: 3,
                },
                train: TrainConfig { total_steps: 10, warmup_steps: 2, ..TrainConfig::default() },
            },
            schemes: vec![AdapterConfig {
                scheme: Scheme::Milora,
                rank: 2,
                alpha: 2.0,
                dropout: 0.0,
                placement: [Placement::Query, Placement::Value].into_iter().collect(),
                seed: 4,
            }],
            analyses: AnalysisFlags::default(),
            output_dir: PathBuf::from("out"),
            parallel_schemes: false,
        }
    }

    #[test]
    fn valid_config_passes_and_round_trips() {
        let cfg = valid_config();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let mut value: serde_json::Value =
            serde_json::to_value(valid_config()).unwrap();
        value["typo_key"] = serde_json::json!(1);
        let err = ExperimentConfig::from_json(&value.to_string()).unwrap_err();
        assert!(err.to_string().contains("typo_key"), "{err}");

        let mut value: serde_json::Value = serde_json::to_value(valid_config()).unwrap();
        value["model"]["d_modle"] = serde_json::json!(8);
        let err = ExperimentConfig::from_json(&value.to_string()).unwrap_err();
        assert!(err.to_string().contains("d_modle"), "{err}");
    }

    #[test]
    fn validation_lists_every_violation_at_once() {
        let mut cfg = valid_config();
        cfg.schemes.clear();
        cfg.model.d_model = 15; // not divisible by n_heads = 2
        cfg.pretrain.task.seq_len = 0;
        cfg.finetune.train.batch_size = 0;
        let msg = cfg.validate().unwrap_err().to_string();
        for needle in ["d_model", "seq_len", "batch_size", "at least one adapter scheme"] {
            assert!(msg.contains(needle), "missing `{needle}` in:\n{msg}");
        }
    }

    #[test]
    fn oversized_rank_is_caught_per_placement() {
        let mut cfg = valid_config();
        cfg.schemes[0].rank = 17;
        cfg.schemes[0].alpha = 17.0;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("rank 17 exceeds min dimension 16"), "{msg}");
    }

    #[test]
    fn duplicate_schemes_are_rejected() {
        let mut cfg = valid_config();
        let mut copy = cfg.schemes[0].clone();
        copy.rank = 4;
        copy.alpha = 4.0;
        cfg.schemes.push(copy);
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("duplicate"), "{msg}");
    }

    #[test]
    fn seed_override_reaches_every_component() {
        let mut cfg = valid_config();
        cfg.override_seeds(99);
        let seeds = cfg.effective_seeds();
        assert!(seeds.values().all(|&s| s == 99), "{seeds:?}");
        assert_eq!(cfg.model.seed, 99);
        assert_eq!(cfg.schemes[0].seed, 99);
    }

    #[test]
    fn task_too_long_for_the_model_is_flagged() {
        let mut cfg = valid_config();
        cfg.pretrain.task.seq_len = 8; // sequence length 17 > max_seq_len 16
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("exceed the model's max_seq_len"), "{msg}");
    }
}
