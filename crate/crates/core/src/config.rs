//! Structured-text configuration. Every key of every section is required;
//! loading reports all missing, unknown and ill-typed keys at once.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chook::AugmentConfig;
use crate::encoders::BackboneConfig;
use crate::evalkit::EvalConfig;
use crate::model::{LevelOrder, ModelConfig, Scorer, TemporalMode};
use crate::objective::ObjectiveConfig;
use crate::trainer::TrainConfig;

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "REFERTRACK_CONFIG";
pub const DEFAULT_CONFIG_PATH: &str = "configs/default.toml";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("configuration syntax error: {0}")]
    Syntax(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

/// Model keys of the configuration file. Segment length, slot count,
/// reference points and token length live under `[train]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub channels: usize,
    pub image_size: [usize; 2],
    pub grid_shapes: Vec<[usize; 2]>,
    pub backbone_widths: [usize; 4],
    pub backbone_bias: bool,
    pub coord_channels: bool,
    pub text_layers: usize,
    /// 0 selects `max(1, channels / 16)`.
    pub heads: usize,
    pub tied_levels: bool,
    pub level_order: LevelOrder,
    pub temporal: TemporalMode,
    pub scorer: Scorer,
    pub normalize_displacement: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            channels: m.channels,
            image_size: [m.image_size.0, m.image_size.1],
            grid_shapes: m.grid_shapes.iter().map(|&(h, w)| [h, w]).collect(),
            backbone_widths: m.backbone.widths,
            backbone_bias: m.backbone.bias,
            coord_channels: m.backbone.coord_channels,
            text_layers: m.text_layers,
            heads: 0,
            tied_levels: m.tied_levels,
            level_order: m.level_order,
            temporal: m.temporal,
            scorer: m.scorer,
            normalize_displacement: m.normalize_displacement,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub objective: ObjectiveConfig,
    pub eval: EvalConfig,
}

const SECTIONS: [&str; 5] = ["model", "train", "augment", "objective", "eval"];

fn section<T: DeserializeOwned>(name: &str, table: &toml::Table, problems: &mut Vec<String>) -> Option<T> {
    let value = table.get(name)?;
    match value.clone().try_into::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            problems.push(format!("[{name}]: {}", e.message().trim()));
            None
        }
    }
}

impl Config {
    /// Model configuration for a vocabulary of `vocab_size` ids.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        let t = &self.train;
        ModelConfig {
            channels: m.channels,
            p: t.p,
            slots: t.slots,
            ref_points: t.ref_points,
            max_tokens: t.max_tokens,
            vocab_size,
            image_size: (m.image_size[0], m.image_size[1]),
            grid_shapes: m.grid_shapes.iter().map(|g| (g[0], g[1])).collect(),
            backbone: BackboneConfig { widths: m.backbone_widths, bias: m.backbone_bias, coord_channels: m.coord_channels },
            text_layers: m.text_layers,
            heads: (m.heads > 0).then_some(m.heads),
            tied_levels: m.tied_levels,
            level_order: m.level_order,
            temporal: m.temporal,
            scorer: m.scorer,
            normalize_displacement: m.normalize_displacement,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    /// Parse and validate, collecting every problem before failing.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let reference = toml::Table::try_from(Config::default()).expect("serializable defaults");
        let mut problems = Vec::new();
        for key in table.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                problems.push(format!("unknown section or key '{key}'"));
            }
        }
        for name in SECTIONS {
            let want = reference[name].as_table().expect("section table");
            match table.get(name) {
                None => problems.push(format!("missing section [{name}]")),
                Some(toml::Value::Table(got)) => {
                    for k in want.keys() {
                        if !got.contains_key(k) {
                            problems.push(format!("missing key {name}.{k}"));
                        }
                    }
                    for k in got.keys() {
                        if !want.contains_key(k) {
                            problems.push(format!("unknown key {name}.{k}"));
                        }
                    }
                }
                Some(_) => problems.push(format!("'{name}' must be a table")),
            }
        }
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        let model = section::<ModelSection>("model", &table, &mut problems);
        let train = section::<TrainConfig>("train", &table, &mut problems);
        let augment = section::<AugmentConfig>("augment", &table, &mut problems);
        let objective = section::<ObjectiveConfig>("objective", &table, &mut problems);
        let eval = section::<EvalConfig>("eval", &table, &mut problems);
        let (Some(model), Some(train), Some(augment), Some(objective), Some(eval)) = (model, train, augment, objective, eval)
        else {
            return Err(ConfigError::Invalid(problems));
        };
        let cfg = Config { model, train, augment, objective, eval };
        cfg.validate()?;
        Ok(cfg)
    }

    // `!(x >= 0.0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.model_config(2).validate() {
            problems.push(e.to_string());
        }
        let a = &self.augment;
        for (k, v) in [("drop_prob", a.drop_prob), ("swap_prob", a.swap_prob)] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("augment.{k} must lie in [0, 1] (got {v})"));
            }
        }
        if !(a.noise_sigma >= 0.0) {
            problems.push(format!("augment.noise_sigma must be >= 0 (got {})", a.noise_sigma));
        }
        let o = &self.objective;
        if !(o.lambda >= 0.0 && o.alpha_sharp > 0.0 && o.gamma_focal >= 0.0 && (0.0..=1.0).contains(&o.alpha_focal)) {
            problems.push("objective: need lambda >= 0, alpha_sharp > 0, gamma_focal >= 0, alpha_focal in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) || self.eval.window_stride == 0 {
            problems.push("eval: threshold must lie in [0, 1] and window_stride must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Path from the environment variable, else the in-repo default.
    pub fn default_path() -> PathBuf {
        std::env::var_os(CONFIG_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_CONFIG_PATH))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = Config::default();
        assert_eq!(Config::parse(&cfg.to_toml()).unwrap(), cfg);
        let mc = cfg.model_config(40);
        assert_eq!(mc, ModelConfig { vocab_size: 40, ..ModelConfig::default() });
    }

    #[test]
    fn shipped_default_matches_code() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(DEFAULT_CONFIG_PATH);
        assert_eq!(Config::load(&path).unwrap(), Config::default());
    }

    #[test]
    fn every_missing_key_is_named() {
        let text = Config::default().to_toml().replace("epochs = 20\n", "").replace("lambda = 0.01\n", "");
        let Err(ConfigError::Invalid(p)) = Config::parse(&text) else { panic!("expected failure") };
        assert!(p.contains(&"missing key train.epochs".to_string()), "{p:?}");
        assert!(p.contains(&"missing key objective.lambda".to_string()), "{p:?}");
    }

    #[test]
    fn unknown_and_ill_typed_keys() {
        let text = Config::default().to_toml().replace("epochs = 20", "epochs = 20\nepochz = 1");
        let Err(ConfigError::Invalid(p)) = Config::parse(&text) else { panic!() };
        assert_eq!(p, vec!["unknown key train.epochs".replace("epochs", "epochz")]);
        let text = Config::default().to_toml().replace("epochs = 20", "epochs = \"many\"");
        assert!(matches!(Config::parse(&text), Err(ConfigError::Invalid(_))));
        let text = Config::default().to_toml().replace("pos_fraction = 0.25", "pos_fraction = 1.5");
        assert!(matches!(Config::parse(&text), Err(ConfigError::Invalid(_))));
    }
}
