//! Run configuration: one JSON file, dotted-key command-line overrides,
//! unknown keys rejected, and the fully resolved config echoed next to every
//! artifact a command produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use disn::error::{Error, Result};
use disn::eval::ProbeConfig;
use disn::model::ModelConfig;
use disn::sampler::SynthWorld;
use disn::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub input_dim: usize,
    pub code_dim: usize,
    pub env_hidden_dim: usize,
    pub env_out_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            input_dim: 64,
            code_dim: 32,
            env_hidden_dim: 32,
            env_out_dim: 32,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self, n_speakers: usize) -> ModelConfig {
        ModelConfig {
            input_dim: self.input_dim,
            code_dim: self.code_dim,
            n_speakers,
            env_hidden_dim: self.env_hidden_dim,
            env_out_dim: self.env_out_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Trials generated when no trial list is supplied.
    pub n_trials: usize,
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    /// Also write DET-curve CSVs next to the metrics report.
    pub det_curve: bool,
    /// Train the four disentanglement probes and include them in the report.
    pub probes: bool,
    pub probe: ProbeConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_trials: 2000,
            p_target: disn::eval::DCF_P_TARGET,
            c_miss: disn::eval::DCF_C_MISS,
            c_fa: disn::eval::DCF_C_FA,
            det_curve: false,
            probes: true,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// All relative paths resolve against the output directory.
    pub dataset_dir: String,
    pub checkpoint: String,
    pub loss_csv: String,
    pub metrics: String,
    /// Optional externally provided trial list.
    pub trials: Option<String>,
    /// Create missing output directories instead of failing.
    pub create_dirs: bool,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset_dir: "dataset".into(),
            checkpoint: "model.ckpt".into(),
            loss_csv: "loss_history.csv".into(),
            metrics: "metrics.json".into(),
            trials: None,
            create_dirs: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: SynthWorld,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Loads the optional config file, applies `--set key=value` overrides
    /// onto the JSON tree, then deserializes strictly (unknown keys are
    /// rejected).
    pub fn resolve(config_path: Option<&Path>, sets: &[String], seed_flag: Option<u64>) -> Result<RunConfig> {
        let mut tree: serde_json::Value = match config_path {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
            }
            None => serde_json::json!({}),
        };
        for set in sets {
            apply_override(&mut tree, set)?;
        }
        let mut config: RunConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        if let Some(seed) = seed_flag {
            config.seed = seed;
        }
        if config.seed == 0 && seed_flag.is_none() {
            config.seed = 42;
        }
        config.train.validate()?;
        config.world.validate()?;
        Ok(config)
    }

    /// Writes the fully resolved configuration next to the run's artifacts.
    pub fn echo(&self, out_dir: &Path, command: &str) -> Result<PathBuf> {
        let path = out_dir.join(format!("config.{command}.json"));
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, json)?;
        Ok(path)
    }

    pub fn resolve_path(&self, out_dir: &Path, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out_dir.join(p)
        }
    }
}

/// Applies one `dotted.key=value` override; the value is parsed as JSON and
/// falls back to a plain string.
fn apply_override(tree: &mut serde_json::Value, set: &str) -> Result<()> {
    let (key, raw_value) = set
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key=value, got {set:?}")))?;
    if key.is_empty() {
        return Err(Error::Config("--set key must not be empty".into()));
    }
    let value: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!("--set {key}: {part} is not an object")));
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!("--set {key}: parent is not an object"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_without_a_file() {
        let cfg = RunConfig::resolve(None, &[], None).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.world.n_speakers, 50);
        assert_eq!(cfg.train.weights.lambda_adv, 0.5);
    }

    #[test]
    fn set_overrides_apply_with_json_values() {
        let sets = vec![
            "train.epochs=5".to_string(),
            "world.n_speakers=7".to_string(),
            "train.weights.lambda_adv=0.25".to_string(),
            "paths.dataset_dir=elsewhere".to_string(),
        ];
        let cfg = RunConfig::resolve(None, &sets, Some(9)).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.world.n_speakers, 7);
        assert_eq!(cfg.train.weights.lambda_adv, 0.25);
        assert_eq!(cfg.paths.dataset_dir, "elsewhere");
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let sets = vec!["train.no_such_option=1".to_string()];
        assert!(matches!(RunConfig::resolve(None, &sets, None), Err(Error::Config(_))));
        let sets = vec!["world.seed=3".to_string()];
        assert!(
            matches!(RunConfig::resolve(None, &sets, None), Err(Error::Config(_))),
            "the world seed is derived from the run seed and must not be set directly"
        );
    }
}
