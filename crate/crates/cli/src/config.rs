//! Resolved run configuration: defaults < config file < `--set` overrides < `KDSEG_SEED`.

use std::fs;
use std::path::Path;

use kdseg::data::{Modality, Preprocess};
use kdseg::losses::LossWeights;
use kdseg::network::NetworkConfig;
use kdseg::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub depth: usize,
    pub base_filters: usize,
    pub skip_connections: usize,
    pub negative_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub folds: usize,
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub enable_kd: bool,
    pub enable_kl: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub student_modality: Modality,
    /// Edge of the central crop cube; 0 keeps the full volume.
    pub crop: usize,
    pub subsample: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResolvedConfig {
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub loss: LossSection,
    pub data: DataSection,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let n = NetworkConfig::default();
        NetworkSection {
            depth: n.depth,
            base_filters: n.base_filters,
            skip_connections: n.skip_connections,
            negative_slope: f64::from(n.negative_slope),
        }
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            epochs: t.epochs,
            lr: t.lr,
            plateau_patience: t.plateau_patience,
            plateau_factor: t.plateau_factor,
            batch_size: t.batch_size,
            seed: t.seed,
            folds: t.folds,
            augment: t.augment,
        }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            lambda: w.lambda,
            temperature: w.temperature,
            alpha: w.alpha,
            enable_kd: w.enable_kd,
            enable_kl: w.enable_kl,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let p = Preprocess::brats();
        DataSection {
            student_modality: TrainConfig::default().student_modality,
            crop: p.crop.map_or(0, |c| c[0]),
            subsample: p.subsample,
        }
    }
}

const SECTIONS: [(&str, &[&str]); 4] = [
    (
        "network",
        &["depth", "base_filters", "skip_connections", "negative_slope"],
    ),
    (
        "training",
        &[
            "epochs",
            "lr",
            "plateau_patience",
            "plateau_factor",
            "batch_size",
            "seed",
            "folds",
            "augment",
        ],
    ),
    ("loss", &["lambda", "temperature", "alpha", "enable_kd", "enable_kl"]),
    ("data", &["student_modality", "crop", "subsample"]),
];

const FLOAT_KEYS: [&str; 6] = [
    "negative_slope",
    "lr",
    "plateau_factor",
    "lambda",
    "temperature",
    "alpha",
];

fn section_of(key: &str) -> Option<&'static str> {
    SECTIONS.iter().find(|(_, keys)| keys.contains(&key)).map(|(s, _)| *s)
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let (section, name) = match key.split_once('.') {
        Some((s, n)) => (s, n),
        None => (
            section_of(key).ok_or_else(|| CliError::Validation(format!("unknown config key `{key}`")))?,
            key,
        ),
    };
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(sec) = entry else {
        return Err(CliError::Validation(format!("`{section}` is not a section")));
    };
    sec.insert(name.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Integers are accepted wherever a real number is expected.
fn coerce_floats(table: &mut toml::Table) {
    for (_, sec) in table.iter_mut() {
        if let toml::Value::Table(sec) = sec {
            for key in FLOAT_KEYS {
                if let Some(toml::Value::Integer(i)) = sec.get(key) {
                    let f = *i as f64;
                    sec.insert(key.to_string(), toml::Value::Float(f));
                }
            }
        }
    }
}

/// Merges the config file (if any) and `key=value` overrides over the defaults,
/// then applies `KDSEG_SEED` and validates everything.
pub fn resolve_config(config_path: Option<&Path>, overrides: &[String]) -> Result<ResolvedConfig, CliError> {
    let mut table = match config_path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str::<toml::Table>(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    coerce_floats(&mut table);
    let mut cfg: ResolvedConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Validation(e.message().to_string()))?;
    let mut train = cfg.train_config();
    train.apply_seed_env().map_err(CliError::from)?;
    cfg.training.seed = train.seed;
    cfg.validate()?;
    Ok(cfg)
}

impl ResolvedConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.loss.lambda,
            alpha: self.loss.alpha,
            temperature: self.loss.temperature,
            enable_kd: self.loss.enable_kd,
            enable_kl: self.loss.enable_kl,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            batch_size: t.batch_size,
            weights: self.weights(),
            seed: t.seed,
            student_modality: self.data.student_modality,
            augment: t.augment,
            folds: t.folds,
        }
    }

    /// Architecture with `in_channels` inputs.
    pub fn network_config(&self, in_channels: usize) -> NetworkConfig {
        NetworkConfig {
            in_channels,
            depth: self.network.depth,
            base_filters: self.network.base_filters,
            skip_connections: self.network.skip_connections,
            negative_slope: self.network.negative_slope as f32,
            ..NetworkConfig::default()
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            crop: (self.data.crop > 0).then_some([self.data.crop; 3]),
            subsample: self.data.subsample,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config().validate()?;
        self.network_config(1).validate()?;
        if self.data.subsample == 0 {
            return Err(CliError::Validation("subsample: must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn empty_file_gives_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.toml");
        fs::write(&path, "").unwrap();
        let cfg = resolve_config(Some(&path), &[]).unwrap();
        assert_eq!(
            (cfg.loss.lambda, cfg.loss.temperature, cfg.loss.alpha),
            (0.75, 5.0, 10.0)
        );
        assert_eq!((cfg.training.lr, cfg.training.epochs), (1e-4, 500));
        assert_eq!((cfg.training.plateau_patience, cfg.training.plateau_factor), (50, 0.2));
    }

    #[test]
    fn precedence_file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[loss]\ntemperature = 5\n[data]\nstudent_modality = \"Flair\"\n").unwrap();
        let cfg = resolve_config(Some(&path), &overrides(&["temperature=1"])).unwrap();
        assert_eq!(cfg.loss.temperature, 1.0);
        assert_eq!(cfg.data.student_modality, Modality::Flair);
        let cfg = resolve_config(
            Some(&path),
            &overrides(&["loss.temperature=2.5", "student_modality=T1ce"]),
        )
        .unwrap();
        assert_eq!(cfg.loss.temperature, 2.5);
        assert_eq!(cfg.data.student_modality, Modality::T1ce);
    }

    #[test]
    fn invalid_values_name_the_key() {
        let err = resolve_config(None, &overrides(&["lambda=1.5"])).unwrap_err();
        assert!(
            matches!(&err, CliError::Validation(m) | CliError::Core(kdseg::Error::Config(m)) if m.contains("lambda")),
            "{err}"
        );
        assert_eq!(err.exit_code(), 3);
        let err = resolve_config(None, &overrides(&["bogus=1"])).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[training]\nlearning_rate = 1\n").unwrap();
        let err = resolve_config(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn resolved_config_roundtrips() {
        let cfg = resolve_config(
            None,
            &overrides(&["depth=2", "skip_connections=2", "crop=0", "subsample=1"]),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frozen.toml");
        fs::write(&path, cfg.to_toml()).unwrap();
        assert_eq!(resolve_config(Some(&path), &[]).unwrap(), cfg);
        assert_eq!(cfg.preprocess(), Preprocess::identity());
    }
}
