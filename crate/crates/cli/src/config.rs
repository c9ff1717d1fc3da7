//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use advreg::dataset::{default_spec, generate, ChangingPriorsSpec, DatasetBundle};
use advreg::model::ModelConfig;
use advreg::schedule::{ScheduleSpec, StaticSchedule};
use advreg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "no_reversal")]
    pub schedule: ScheduleSpec,
    /// Output directory, relative to the config file.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Seeds both parameter initialization and batch order.
    #[serde(default)]
    pub seed: u64,
}

fn no_reversal() -> ScheduleSpec {
    ScheduleSpec::Static(StaticSchedule { value: 0.0 })
}

/// Where the examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    /// A directory written by `generate`, or a spec JSON file.
    Path(PathBuf),
    /// One of the built-in specs.
    Version(DefaultVersion),
    Inline(Box<ChangingPriorsSpec>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefaultVersion {
    pub version: u8,
}

/// Architecture sizes; vocabularies and the image width come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub question_hidden_dim: usize,
    pub fused_dim: usize,
    pub adversary_hidden_layers: usize,
    pub adversary_hidden_units: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { embed_dim: 16, question_hidden_dim: 32, fused_dim: 32, adversary_hidden_layers: 2, adversary_hidden_units: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda_adv: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_iterations: usize,
    pub eval_every: usize,
    /// `null` disables early stopping.
    pub patience: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { lambda_adv: 0.0, batch_size: 128, learning_rate: 0.001, max_iterations: 3000, eval_every: 100, patience: Some(10) }
    }
}

/// Dataset location after path resolution.
#[derive(Clone, Debug, PartialEq)]
pub enum ResolvedDataset {
    Dir(PathBuf),
    Spec(ChangingPriorsSpec),
}

impl ResolvedDataset {
    pub fn spec(&self) -> CliResult<ChangingPriorsSpec> {
        match self {
            ResolvedDataset::Dir(dir) => read_spec(&dir.join("spec.json")),
            ResolvedDataset::Spec(s) => Ok(s.clone()),
        }
    }

    pub fn load(&self) -> CliResult<DatasetBundle> {
        match self {
            ResolvedDataset::Dir(dir) => DatasetBundle::load(dir)
                .map_err(|e| CliError::Io(format!("loading dataset {}: {e}", dir.display()))),
            ResolvedDataset::Spec(s) => Ok(generate(s)?),
        }
    }
}

pub fn read_spec(path: &Path) -> CliResult<ChangingPriorsSpec> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let spec: ChangingPriorsSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

/// A validated config with every path resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: ResolvedDataset,
    pub spec: ChangingPriorsSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    /// Reads and validates `path`; `seed` overrides the file's seed.
    pub fn load(path: &Path, seed: Option<u64>) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let file: RunConfigFile =
            serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::resolve(file, base, seed).map_err(|e| match e {
            CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn resolve(file: RunConfigFile, base: &Path, seed: Option<u64>) -> CliResult<Self> {
        let config_err = |e: advreg::Error| CliError::Io(e.to_string());
        let dataset = match file.dataset {
            DatasetSource::Path(p) => {
                let p = base.join(p);
                if p.is_dir() {
                    ResolvedDataset::Dir(p)
                } else if p.is_file() {
                    ResolvedDataset::Spec(read_spec(&p)?)
                } else {
                    return Err(CliError::Io(format!("dataset path {} does not exist", p.display())));
                }
            }
            DatasetSource::Version(v) => ResolvedDataset::Spec(default_spec(v.version).map_err(config_err)?),
            DatasetSource::Inline(s) => {
                s.validate().map_err(config_err)?;
                ResolvedDataset::Spec(*s)
            }
        };
        let spec = dataset.spec()?;
        let seed = seed.unwrap_or(file.seed);
        let layout = spec.layout();
        let m = &file.model;
        let model = ModelConfig {
            question_vocab_size: layout.num_tokens(),
            embed_dim: m.embed_dim,
            question_hidden_dim: m.question_hidden_dim,
            image_input_dim: spec.image_feature_dim,
            fused_dim: m.fused_dim,
            answer_vocab_size: layout.num_answers(),
            adversary_hidden_layers: m.adversary_hidden_layers,
            adversary_hidden_units: m.adversary_hidden_units,
            seed,
        };
        model.validate().map_err(config_err)?;
        let t = &file.train;
        let train = TrainConfig {
            lambda_adv: t.lambda_adv,
            schedule: file.schedule.params().map_err(config_err)?,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            max_iterations: t.max_iterations,
            eval_every: t.eval_every,
            patience: t.patience,
            seed,
        };
        train.validate().map_err(config_err)?;
        Ok(Self { dataset, spec, model, train, out: file.out.map(|o| base.join(o)) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use advreg::schedule::{static_schedule, ScheduleParams};

    fn parse(json: &str) -> CliResult<RunConfig> {
        let file: RunConfigFile = serde_json::from_str(json).map_err(|e| CliError::Io(e.to_string()))?;
        RunConfig::resolve(file, Path::new("."), None)
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse(r#"{"dataset": {"version": 1}}"#).unwrap();
        assert_eq!(c.train.lambda_adv, 0.0);
        assert_eq!(c.train.schedule, static_schedule(0.0));
        assert_eq!(c.model.answer_vocab_size, c.spec.layout().num_answers());
        assert_eq!(c.train.batch_size, 128);
        assert!(c.out.is_none());
    }

    #[test]
    fn schedule_forms_and_seed() {
        let c = parse(r#"{"dataset": {"version": 2}, "schedule": {"mu": 10, "w": 20, "c": 1}, "seed": 7}"#).unwrap();
        assert_eq!(c.train.schedule, ScheduleParams { mu: 10, w: 20, c: 1.0 });
        assert_eq!((c.train.seed, c.model.seed), (7, 7));
        let c = parse(r#"{"dataset": {"version": 2}, "schedule": {"static": 0.5}}"#).unwrap();
        assert_eq!(c.train.schedule, static_schedule(0.5));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(parse(r#"{"dataset": {"version": 1}, "extra": 1}"#).is_err());
        assert!(parse(r#"{"dataset": {"version": 1}, "train": {"lr": 0.1}}"#).is_err());
        assert!(parse(r#"{"dataset": {"version": 1}, "model": {"width": 3}}"#).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(parse(r#"{"dataset": {"version": 3}}"#).is_err());
        assert!(parse(r#"{"dataset": {"version": 1}, "train": {"lambda_adv": -1}}"#).is_err());
        assert!(parse(r#"{"dataset": {"version": 1}, "train": {"batch_size": 0}}"#).is_err());
        assert!(parse(r#"{"dataset": {"version": 1}, "schedule": {"mu": 0, "w": 0, "c": 1}}"#).is_err());
        assert!(parse(r#"{"dataset": {"version": 1}, "model": {"adversary_hidden_layers": 5}}"#).is_err());
    }

    #[test]
    fn missing_dataset_path_rejected() {
        let err = parse(r#"{"dataset": "no/such/dir"}"#).unwrap_err();
        assert!(err.to_string().contains("does not exist"));
    }

    #[test]
    fn inline_spec_accepted() {
        let spec = serde_json::to_string(&default_spec(1).unwrap()).unwrap();
        let c = parse(&format!(r#"{{"dataset": {spec}}}"#)).unwrap();
        assert_eq!(c.spec, default_spec(1).unwrap());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let spec_path = dir.path().join("s.json");
        fs::write(&spec_path, serde_json::to_string(&default_spec(1).unwrap()).unwrap()).unwrap();
        let cfg = dir.path().join("run.json");
        fs::write(&cfg, r#"{"dataset": "s.json", "out": "runs/a"}"#).unwrap();
        let c = RunConfig::load(&cfg, Some(3)).unwrap();
        assert_eq!(c.out, Some(dir.path().join("runs/a")));
        assert_eq!(c.train.seed, 3);
    }
}
