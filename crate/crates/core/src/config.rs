//! Run-level configuration: one TOML file describing model, data, training,
//! and evaluation, with environment-variable overrides and a lossless echo
//! for run manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::ModelConfig;
use crate::eval::{ConversationConfig, DiarConfig};
use crate::synth::dataset::TrialSetConfig;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;

/// Environment prefix recognized for configuration overrides.
pub const ENV_PREFIX: &str = "ME_";

/// Errors raised while loading, overriding, or echoing run configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// The config file could not be read.
    #[error("failed to read config file: {0}")]
    Io(#[from] std::io::Error),
    /// The TOML text failed to parse or named an unknown key.
    #[error("invalid config: {0}")]
    Parse(String),
    /// An environment override was malformed.
    #[error("invalid override {name}: {what}")]
    Override {
        /// Full environment variable name.
        name: String,
        /// What was wrong with it.
        what: String,
    },
    /// A value failed a sanity check after parsing.
    #[error("invalid config value: {0}")]
    Value(String),
    /// Serializing the echoed config failed.
    #[error("failed to serialize config: {0}")]
    Echo(String),
}

/// Synthetic data settings: signal generation plus verification trial lists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Signal synthesis parameters.
    pub synth: SynthConfig,
    /// Verification trial-list parameters.
    pub trials: TrialSetConfig,
}

/// Evaluation settings: diarization, duration sweep, and bootstrap resampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Sliding-window diarization parameters, including the clustering threshold.
    pub diar: DiarConfig,
    /// Synthetic conversations generated for diarization scoring.
    pub conversations: ConversationConfig,
    /// Non-target duration multipliers for the sweep command.
    pub m_values: Vec<f64>,
    /// Resample count for paired bootstrap comparisons.
    pub n_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            diar: DiarConfig {
                window_s: 10.0,
                shift_s: 1.0,
                ahc_threshold: 0.35,
            },
            conversations: ConversationConfig::default(),
            m_values: vec![0.0, 1.0, 2.0, 3.0, 5.0],
            n_resamples: 1000,
        }
    }
}

/// Complete description of a run; every artifact is reproducible from this plus a seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Encoder architecture and guidance flags.
    pub model: ModelConfig,
    /// Synthetic data generation settings.
    pub data: DataConfig,
    /// Optimizer, schedule, and loop settings.
    pub train: TrainConfig,
    /// Scoring, sweep, and diarization settings.
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Checks cross-field constraints not enforced by individual commands.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.eval.m_values.is_empty() {
            return Err(ConfigError::Value("eval.m_values must not be empty".into()));
        }
        for &m in &self.eval.m_values {
            if !m.is_finite() || m < 0.0 {
                return Err(ConfigError::Value(format!(
                    "eval.m_values entries must be finite and non-negative, got {m}"
                )));
            }
        }
        if self.eval.n_resamples == 0 {
            return Err(ConfigError::Value("eval.n_resamples must be positive".into()));
        }
        let conv = &self.eval.conversations;
        if conv.count == 0 || conv.speakers == 0 || conv.turns == 0 {
            return Err(ConfigError::Value(
                "eval.conversations count, speakers, and turns must all be positive".into(),
            ));
        }
        if conv.turns < conv.speakers {
            return Err(ConfigError::Value(format!(
                "eval.conversations.turns ({}) must be at least eval.conversations.speakers ({})",
                conv.turns, conv.speakers
            )));
        }
        Ok(())
    }
}

/// Parses a TOML string into a run configuration, rejecting unknown keys.
pub fn parse_run_config(text: &str) -> Result<RunConfig, ConfigError> {
    from_text_with_overrides(text, &[])
}

/// Loads a run configuration from a TOML file.
pub fn load_run_config(path: &Path) -> Result<RunConfig, ConfigError> {
    load_with_overrides(path, &[])
}

/// Loads a config file, then applies environment overrides before validation.
pub fn load_with_overrides(
    path: &Path,
    vars: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    from_text_with_overrides(&text, vars)
}

/// Parses config text, applies overrides, and validates the result.
pub fn from_text_with_overrides(
    text: &str,
    vars: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let mut root: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    apply_env_overrides(&mut root, vars)?;
    let cfg = RunConfig::deserialize(toml::Value::Table(root))
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `ME_`-prefixed overrides onto a parsed TOML tree.
///
/// Nesting levels are separated by `__` and lowercased to match field names,
/// so `ME_TRAIN__LR__BASE_LR=1e-4` sets `train.lr.base_lr`. Values are parsed
/// as TOML scalars where possible and fall back to strings. Variables without
/// the prefix are ignored; paths that name no real field are rejected when the
/// tree is deserialized.
pub fn apply_env_overrides(
    root: &mut toml::Table,
    vars: &[(String, String)],
) -> Result<(), ConfigError> {
    for (name, raw) in vars {
        let Some(path) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let segments: Vec<String> = path.split("__").map(|s| s.to_ascii_lowercase()).collect();
        if segments.iter().any(String::is_empty) {
            return Err(ConfigError::Override {
                name: name.clone(),
                what: "empty path segment".into(),
            });
        }
        let (leaf, parents) = segments.split_last().expect("segments is non-empty");
        let mut table = &mut *root;
        for seg in parents {
            let entry = table
                .entry(seg.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry.as_table_mut().ok_or_else(|| ConfigError::Override {
                name: name.clone(),
                what: format!("`{seg}` is not a table"),
            })?;
        }
        table.insert(leaf.clone(), parse_override_value(raw));
    }
    Ok(())
}

/// Interprets an override value as a TOML scalar, falling back to a string.
fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(table) = wrapped.parse::<toml::Table>() {
        if table.len() == 1 {
            if let Some(v) = table.get("v") {
                return v.clone();
            }
        }
    }
    toml::Value::String(raw.to_string())
}

/// Serializes the configuration to canonical TOML for run manifests.
pub fn to_toml_string(cfg: &RunConfig) -> Result<String, ConfigError> {
    toml::to_string_pretty(cfg).map_err(|e| ConfigError::Echo(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_losslessly() {
        let cfg = RunConfig::default();
        let echoed = to_toml_string(&cfg).unwrap();
        let reparsed = parse_run_config(&echoed).unwrap();
        assert_eq!(reparsed, cfg);
        let echoed_again = to_toml_string(&reparsed).unwrap();
        assert_eq!(echoed_again, echoed);
    }

    #[test]
    fn file_round_trip_preserves_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig::proposed(crate::encoder::Family::CamppMini);
        cfg.train.epochs = 3;
        cfg.train.lr.base_lr = 3e-5;
        cfg.eval.diar.ahc_threshold = 0.41;
        cfg.data.trials.n_trials = 77;
        std::fs::write(&path, to_toml_string(&cfg).unwrap()).unwrap();
        let loaded = load_run_config(&path).unwrap();
        assert_eq!(loaded, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let top = parse_run_config("bogus = 1\n");
        assert!(matches!(top, Err(ConfigError::Parse(ref m)) if m.contains("bogus")));
        let nested = parse_run_config("[model]\nbogus = 1\n");
        assert!(matches!(nested, Err(ConfigError::Parse(ref m)) if m.contains("bogus")));
        let deep = parse_run_config("[train.lr]\nbogus = 1\n");
        assert!(matches!(deep, Err(ConfigError::Parse(ref m)) if m.contains("bogus")));
    }

    #[test]
    fn env_overrides_reach_nested_fields() {
        let vars = vec![
            ("ME_TRAIN__LR__BASE_LR".to_string(), "1e-4".to_string()),
            ("ME_MODEL__FAMILY".to_string(), "campp-mini".to_string()),
            ("ME_DATA__TRIALS__N_TRIALS".to_string(), "50".to_string()),
            ("ME_EVAL__DIAR__AHC_THRESHOLD".to_string(), "0.5".to_string()),
            ("ME_MODEL__GUIDE_INPUT".to_string(), "true".to_string()),
            ("PATH".to_string(), "/usr/bin".to_string()),
        ];
        let cfg = from_text_with_overrides("", &vars).unwrap();
        assert_eq!(cfg.train.lr.base_lr, 1e-4);
        assert_eq!(cfg.model.family, crate::encoder::Family::CamppMini);
        assert_eq!(cfg.data.trials.n_trials, 50);
        assert_eq!(cfg.eval.diar.ahc_threshold, 0.5);
        assert!(cfg.model.guide_input);
    }

    #[test]
    fn overrides_layer_on_top_of_file_values() {
        let text = "[train]\nepochs = 9\n\n[train.lr]\nbase_lr = 2e-5\n";
        let vars = vec![("ME_TRAIN__LR__BASE_LR".to_string(), "4e-5".to_string())];
        let cfg = from_text_with_overrides(text, &vars).unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.train.lr.base_lr, 4e-5);
    }

    #[test]
    fn unknown_override_paths_are_rejected() {
        let bad_leaf = from_text_with_overrides(
            "",
            &[("ME_TRAIN__BOGUS".to_string(), "1".to_string())],
        );
        assert!(matches!(bad_leaf, Err(ConfigError::Parse(ref m)) if m.contains("bogus")));
        let bad_table = from_text_with_overrides(
            "",
            &[("ME_NOPE__X".to_string(), "1".to_string())],
        );
        assert!(matches!(bad_table, Err(ConfigError::Parse(ref m)) if m.contains("nope")));
        let empty_segment = from_text_with_overrides(
            "",
            &[("ME_TRAIN____LR".to_string(), "1".to_string())],
        );
        assert!(matches!(empty_segment, Err(ConfigError::Override { .. })));
    }

    #[test]
    fn override_values_keep_their_types() {
        assert_eq!(parse_override_value("7"), toml::Value::Integer(7));
        assert_eq!(parse_override_value("1e-4"), toml::Value::Float(1e-4));
        assert_eq!(parse_override_value("true"), toml::Value::Boolean(true));
        assert_eq!(
            parse_override_value("ecapa-mini"),
            toml::Value::String("ecapa-mini".into())
        );
        assert_eq!(
            parse_override_value("[0, 1, 5]"),
            toml::Value::Array(vec![
                toml::Value::Integer(0),
                toml::Value::Integer(1),
                toml::Value::Integer(5),
            ])
        );
        // A value that would smuggle in a second key stays a plain string.
        assert_eq!(
            parse_override_value("1\nother = 2"),
            toml::Value::String("1\nother = 2".into())
        );
    }

    #[test]
    fn validation_catches_bad_eval_settings() {
        let empty_m = from_text_with_overrides("[eval]\nm_values = []\n", &[]);
        assert!(matches!(empty_m, Err(ConfigError::Value(_))));
        let negative_m = from_text_with_overrides("[eval]\nm_values = [-1.0]\n", &[]);
        assert!(matches!(negative_m, Err(ConfigError::Value(_))));
        let zero_resamples = from_text_with_overrides("[eval]\nn_resamples = 0\n", &[]);
        assert!(matches!(zero_resamples, Err(ConfigError::Value(_))));
    }
}
