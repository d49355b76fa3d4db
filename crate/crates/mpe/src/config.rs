//! Run configuration: plain `key = value` lines grouped into
//! `[sections]`. Parsing is strict — unknown sections or keys are errors
//! so that a misspelled hyperparameter can never silently fall back to a
//! default. `#` starts a comment.

use crate::corpus::SynthConfig;
use crate::error::ConfigError;
use crate::model::{CrfScope, ModelConfig, TaggerKind};
use crate::proto::InterMode;
use crate::train::TrainConfig;

/// Episode shape used by `eval`, `dump`, and validation inside `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSection {
    pub n_way: usize,
    pub k_shot: usize,
    pub r_query: usize,
    pub episodes: usize,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        EpisodeSection {
            n_way: 5,
            k_shot: 5,
            r_query: 5,
            episodes: 500,
        }
    }
}

/// Synthetic-corpus generation plus its relation split.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSection {
    pub synth: SynthConfig,
    pub n_train_relations: usize,
    pub n_valid_relations: usize,
    pub n_test_relations: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            synth: SynthConfig::default(),
            n_train_relations: 10,
            n_valid_relations: 5,
            n_test_relations: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub episode: EpisodeSection,
    pub synth: SynthSection,
}

impl RunConfig {
    /// The training seed doubles as the global seed; `--seed` and
    /// MPE_SEED override it.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

fn parse_value<T: std::str::FromStr>(
    section: &str,
    key: &str,
    value: &str,
) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        section: section.to_string(),
        key: key.to_string(),
        message: format!("cannot parse `{value}`"),
    })
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            section: section.to_string(),
            key: key.to_string(),
            message: format!("expected a boolean, got `{value}`"),
        }),
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or(ConfigError::Syntax {
                line: lineno,
                message: "unterminated section header".into(),
            })?;
            section = name.trim().to_string();
            if !matches!(section.as_str(), "model" | "train" | "episode" | "synth") {
                return Err(ConfigError::UnknownSection(section));
            }
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax {
            line: lineno,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if section.is_empty() {
            return Err(ConfigError::Syntax {
                line: lineno,
                message: "key outside any [section]".into(),
            });
        }
        apply_key(&mut cfg, &section, key, value)?;
    }
    Ok(cfg)
}

fn apply_key(cfg: &mut RunConfig, section: &str, key: &str, value: &str) -> Result<(), ConfigError> {
    let unknown = || ConfigError::UnknownKey {
        section: section.to_string(),
        key: key.to_string(),
    };
    let bad = |message: String| ConfigError::BadValue {
        section: section.to_string(),
        key: key.to_string(),
        message,
    };
    match section {
        "model" => match key {
            "width" => cfg.model.encoder.width = parse_value(section, key, value)?,
            "heads" => cfg.model.encoder.heads = parse_value(section, key, value)?,
            "layers" => cfg.model.encoder.layers = parse_value(section, key, value)?,
            "dropout" => cfg.model.encoder.dropout = parse_value(section, key, value)?,
            "max_len" => cfg.model.encoder.max_len = parse_value(section, key, value)?,
            "attention" => cfg.model.attention = parse_bool(section, key, value)?,
            "kg" => cfg.model.use_kg = parse_bool(section, key, value)?,
            "intra" => cfg.model.use_intra = parse_bool(section, key, value)?,
            "inter" => cfg.model.use_inter = parse_bool(section, key, value)?,
            "tagger" => {
                cfg.model.tagger = match value {
                    "crf" => TaggerKind::Crf,
                    "softmax" => TaggerKind::Softmax,
                    _ => return Err(bad(format!("expected crf|softmax, got `{value}`"))),
                }
            }
            "inter_mode" => {
                cfg.model.inter_mode = match value {
                    "paper" => InterMode::Paper,
                    "repel" => InterMode::Repel,
                    _ => return Err(bad(format!("expected paper|repel, got `{value}`"))),
                }
            }
            "crf_scope" => {
                cfg.model.crf_scope = match value {
                    "support" => CrfScope::Support,
                    "query" => CrfScope::Query,
                    "both" => CrfScope::Both,
                    _ => return Err(bad(format!("expected support|query|both, got `{value}`"))),
                }
            }
            "variant" => {
                // convenience presets for the published model family
                match value {
                    "mpe" => {
                        cfg.model.attention = true;
                        cfg.model.use_kg = true;
                    }
                    "proto" => {
                        cfg.model.attention = false;
                        cfg.model.use_kg = false;
                    }
                    "proto_att" => {
                        cfg.model.attention = true;
                        cfg.model.use_kg = false;
                    }
                    _ => return Err(bad(format!("expected mpe|proto|proto_att, got `{value}`"))),
                }
            }
            _ => return Err(unknown()),
        },
        "train" => match key {
            "alpha" => cfg.model.weights.alpha = parse_value(section, key, value)?,
            "beta" => cfg.model.weights.beta = parse_value(section, key, value)?,
            "gamma" => cfg.model.weights.gamma = parse_value(section, key, value)?,
            "delta" => cfg.model.weights.delta = parse_value(section, key, value)?,
            "lr_proto" => cfg.train.lr_proto = parse_value(section, key, value)?,
            "lr_encoder" => cfg.train.lr_encoder = parse_value(section, key, value)?,
            "decay_every" => cfg.train.decay_every = parse_value(section, key, value)?,
            "decay_factor" => cfg.train.decay_factor = parse_value(section, key, value)?,
            "steps" => cfg.train.steps = parse_value(section, key, value)?,
            "n_train" => cfg.train.n_train = parse_value(section, key, value)?,
            "k_shot" => cfg.train.k_shot = parse_value(section, key, value)?,
            "r_query" => cfg.train.r_query = parse_value(section, key, value)?,
            "seed" => cfg.train.seed = parse_value(section, key, value)?,
            "eval_every" => cfg.train.eval_every = parse_value(section, key, value)?,
            "val_episodes" => cfg.train.val_episodes = parse_value(section, key, value)?,
            "val_n_way" => cfg.train.val_n_way = parse_value(section, key, value)?,
            "val_k_shot" => cfg.train.val_k_shot = parse_value(section, key, value)?,
            "val_r_query" => cfg.train.val_r_query = parse_value(section, key, value)?,
            _ => return Err(unknown()),
        },
        "episode" => match key {
            "n_way" => cfg.episode.n_way = parse_value(section, key, value)?,
            "k_shot" => cfg.episode.k_shot = parse_value(section, key, value)?,
            "r_query" => cfg.episode.r_query = parse_value(section, key, value)?,
            "episodes" => cfg.episode.episodes = parse_value(section, key, value)?,
            _ => return Err(unknown()),
        },
        "synth" => match key {
            "relations" => cfg.synth.synth.relations = parse_value(section, key, value)?,
            "per_relation" => cfg.synth.synth.per_relation = parse_value(section, key, value)?,
            "vocab_size" => cfg.synth.synth.vocab_size = parse_value(section, key, value)?,
            "noise" => cfg.synth.synth.noise = parse_value(section, key, value)?,
            "n_train_relations" => {
                cfg.synth.n_train_relations = parse_value(section, key, value)?
            }
            "n_valid_relations" => {
                cfg.synth.n_valid_relations = parse_value(section, key, value)?
            }
            "n_test_relations" => cfg.synth.n_test_relations = parse_value(section, key, value)?,
            _ => return Err(unknown()),
        },
        _ => return Err(ConfigError::UnknownSection(section.to_string())),
    }
    Ok(())
}

pub fn load_config(path: impl AsRef<std::path::Path>) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Sanity bound on encoder/episode fields the parser cannot judge alone.
pub fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let check = |ok: bool, section: &str, key: &str, message: &str| {
        if ok {
            Ok(())
        } else {
            Err(ConfigError::BadValue {
                section: section.into(),
                key: key.into(),
                message: message.into(),
            })
        }
    };
    check(
        cfg.model.encoder.heads > 0 && cfg.model.encoder.width % cfg.model.encoder.heads == 0,
        "model",
        "width",
        "must be a positive multiple of heads",
    )?;
    check(
        (0.0..1.0).contains(&cfg.model.encoder.dropout),
        "model",
        "dropout",
        "must lie in [0, 1)",
    )?;
    check(cfg.episode.n_way >= 2, "episode", "n_way", "must be at least 2")?;
    check(
        cfg.episode.k_shot >= 1 && cfg.episode.r_query >= 1,
        "episode",
        "k_shot",
        "k_shot and r_query must be at least 1",
    )?;
    check(cfg.train.steps >= 1, "train", "steps", "must be at least 1")?;
    Ok(())
}

/// Fuzzing entry point for the config format.
pub fn parse_config_bytes(bytes: &[u8]) -> Result<RunConfig, ConfigError> {
    let text = std::str::from_utf8(bytes).map_err(|_| ConfigError::Syntax {
        line: 0,
        message: "config is not utf-8".into(),
    })?;
    let cfg = parse_config(text)?;
    validate(&cfg)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "\
# run configuration
[model]
width = 32
heads = 4
dropout = 0.2
tagger = crf
inter_mode = repel

[train]
alpha = 0.75
beta = 0.5
gamma = 0.8
delta = 1
steps = 3000
seed = 42

[episode]
n_way = 5
k_shot = 5
episodes = 100

[synth]
relations = 20
noise = 0.05
";

    #[test]
    fn parses_a_full_sample() {
        let cfg = parse_config(SAMPLE).unwrap();
        assert_eq!(cfg.model.encoder.width, 32);
        assert_eq!(cfg.model.weights.alpha, 0.75);
        assert_eq!(cfg.train.steps, 3000);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.episode.episodes, 100);
        assert_eq!(cfg.synth.synth.relations, 20);
        validate(&cfg).unwrap();
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = parse_config("[train]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }), "{err}");
    }

    #[test]
    fn unknown_section_is_an_error() {
        let err = parse_config("[optimizer]\nlr = 0.1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownSection(_)), "{err}");
    }

    #[test]
    fn key_outside_section_is_an_error() {
        let err = parse_config("width = 32\n").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }), "{err}");
    }

    #[test]
    fn bad_value_names_section_and_key() {
        let err = parse_config("[model]\nwidth = banana\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("width") && msg.contains("model"), "{msg}");
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_config("\n# hello\n[train]\nsteps = 7 # trailing\n").unwrap();
        assert_eq!(cfg.train.steps, 7);
    }

    #[test]
    fn defaults_match_the_published_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.weights.alpha, 0.75);
        assert_eq!(cfg.model.weights.beta, 0.5);
        assert_eq!(cfg.model.weights.gamma, 0.8);
        assert_eq!(cfg.model.weights.delta, 1.0);
        assert_eq!(cfg.train.lr_proto, 0.1);
        assert_eq!(cfg.train.lr_encoder, 5e-4);
        assert_eq!(cfg.train.decay_every, 2000);
        assert_eq!(cfg.train.n_train, 20);
        assert_eq!(cfg.train.r_query, 5);
        assert_eq!(cfg.model.encoder.dropout, 0.2);
    }

    #[test]
    fn variant_presets() {
        let proto = parse_config("[model]\nvariant = proto\n").unwrap();
        assert!(!proto.model.attention && !proto.model.use_kg);
        let proto_att = parse_config("[model]\nvariant = proto_att\n").unwrap();
        assert!(proto_att.model.attention && !proto_att.model.use_kg);
        let mpe = parse_config("[model]\nvariant = mpe\n").unwrap();
        assert!(mpe.model.attention && mpe.model.use_kg);
    }
}
