//! Run configuration: built-in profile defaults, then a TOML file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use semrec::dataset::SplitSpec;
use semrec::fsq::{FsqConfig, DESK_LEVELS, FULL_LEVELS};
use semrec::model::{EarlyStop, ModelConfig, ModelTraining};
use semrec::optim::AdamSettings;
use semrec::tokenizer::{QuantizerTraining, ReconDecoderConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Full-size settings (768-dim embeddings, 15,360-code vocabulary).
    Full,
    /// Small settings that train on one CPU core in minutes.
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSettings {
    /// d_L
    pub dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FsqSettings {
    /// K
    pub sub_vectors: usize,
    pub levels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub decoder_width: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// T
    pub max_positions: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSettings {
    pub width: usize,
    pub top_n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSettings {
    pub fractions: Vec<f64>,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_relative_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub embedding: EmbeddingSettings,
    pub fsq: FsqSettings,
    pub quantizer: QuantizerSettings,
    pub model: ModelSettings,
    pub training: TrainingSettings,
    pub split: SplitSpec,
    pub beam: BeamSettings,
    pub eval: EvalSettings,
    pub scaling: ScalingSettings,
}

impl RunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let q = QuantizerTraining::default();
        let adam = AdamSettings::default();
        let t = ModelTraining::default();
        let stop = EarlyStop::default();
        let (dim, levels, model) = match profile {
            Profile::Full => (768, FULL_LEVELS.to_vec(), ModelConfig::full(0, 0)),
            Profile::Desk => (64, DESK_LEVELS.to_vec(), ModelConfig::desk(0, 0)),
        };
        Self {
            profile,
            embedding: EmbeddingSettings { dim, seed: 7 },
            fsq: FsqSettings {
                sub_vectors: model.tokens_per_item,
                levels,
            },
            quantizer: QuantizerSettings {
                epochs: q.epochs,
                batch_size: q.batch_size,
                learning_rate: q.learning_rate,
                seed: q.seed,
                decoder_width: q.decoder.width,
                decoder_layers: q.decoder.layers,
                decoder_heads: q.decoder.heads,
            },
            model: ModelSettings {
                d_model: model.d_model,
                n_layers: model.n_layers,
                n_heads: model.n_heads,
                max_positions: model.max_positions,
                seed: 3,
            },
            training: TrainingSettings {
                epochs: t.epochs,
                batch_size: t.batch_size,
                learning_rate: adam.learning_rate,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                clip_norm: adam.clip_norm,
                seed: t.seed,
            },
            split: SplitSpec::default(),
            beam: BeamSettings { width: 10, top_n: 10 },
            eval: EvalSettings { seed: 5 },
            scaling: ScalingSettings {
                fractions: semrec::eval::DEFAULT_FRACTIONS.to_vec(),
                max_epochs: 40,
                patience: stop.patience,
                min_relative_improvement: stop.min_relative_improvement,
            },
        }
    }

    /// Profile defaults overlaid with the file's keys. The profile is taken
    /// from `profile_flag`, else the file's `profile` key, else desk.
    pub fn resolve(file: Option<&Path>, profile_flag: Option<Profile>) -> CliResult<Self> {
        let overlay = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                Some(
                    text.parse::<toml::Table>()
                        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
                )
            }
            None => None,
        };
        let file_profile = match overlay.as_ref().and_then(|t| t.get("profile")) {
            Some(v) => Some(
                Profile::deserialize(v.clone())
                    .map_err(|e| CliError::Config(format!("profile: {e}")))?,
            ),
            None => None,
        };
        let profile = profile_flag.or(file_profile).unwrap_or(Profile::Desk);
        let mut base = toml::Table::try_from(Self::defaults(profile))
            .map_err(|e| CliError::Other(format!("serializing defaults: {e}")))?;
        if let Some(overlay) = overlay {
            merge(&mut base, overlay);
        }
        base.insert("profile".into(), toml::Value::try_from(profile).expect("profile serializes"));
        let config: Self = base
            .try_into()
            .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.fsq_config()?;
        self.model_config(1, 1)?;
        let positive = [
            ("quantizer.batch_size", self.quantizer.batch_size),
            ("training.batch_size", self.training.batch_size),
            ("beam.width", self.beam.width),
            ("beam.top_n", self.beam.top_n),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Config(format!("{name} must be positive")));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(CliError::Config("split.train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn fsq_config(&self) -> CliResult<FsqConfig> {
        Ok(FsqConfig::new(
            self.fsq.sub_vectors,
            self.embedding.dim,
            self.fsq.levels.clone(),
        )?)
    }

    pub fn model_config(&self, vocab: usize, sub_dim: usize) -> CliResult<ModelConfig> {
        let c = ModelConfig {
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            max_positions: self.model.max_positions,
            tokens_per_item: self.fsq.sub_vectors,
            vocab,
            sub_dim,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn quantizer_training(&self) -> QuantizerTraining {
        let q = &self.quantizer;
        QuantizerTraining {
            epochs: q.epochs,
            batch_size: q.batch_size,
            learning_rate: q.learning_rate,
            seed: q.seed,
            decoder: ReconDecoderConfig {
                width: q.decoder_width,
                layers: q.decoder_layers,
                heads: q.decoder_heads,
            },
        }
    }

    pub fn model_training(&self) -> ModelTraining {
        let t = &self.training;
        ModelTraining {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamSettings {
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                clip_norm: t.clip_norm,
            },
            seed: t.seed,
            early_stop: None,
        }
    }

    pub fn scaling_training(&self) -> ModelTraining {
        ModelTraining {
            epochs: self.scaling.max_epochs,
            early_stop: Some(EarlyStop {
                patience: self.scaling.patience,
                min_relative_improvement: self.scaling.min_relative_improvement,
            }),
            ..self.model_training()
        }
    }
}

/// Recursively overlays `top` onto `base`; tables merge, other values replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn profiles_validate() {
        for p in [Profile::Full, Profile::Desk] {
            RunConfig::defaults(p).validate().unwrap();
        }
        assert_eq!(RunConfig::defaults(Profile::Full).fsq_config().unwrap().codebook_size(), 15_360);
        assert_eq!(RunConfig::defaults(Profile::Full).model.max_positions, 1024);
    }

    #[test]
    fn file_overrides_defaults_and_flag_overrides_file_profile() {
        let f = file("profile = \"full\"\n[training]\nepochs = 3\n");
        let c = RunConfig::resolve(Some(f.path()), None).unwrap();
        assert_eq!((c.profile, c.training.epochs, c.embedding.dim), (Profile::Full, 3, 768));
        let c = RunConfig::resolve(Some(f.path()), Some(Profile::Desk)).unwrap();
        assert_eq!((c.profile, c.training.epochs, c.embedding.dim), (Profile::Desk, 3, 64));
    }

    #[test]
    fn unknown_or_invalid_keys_are_config_errors() {
        let f = file("[training]\nepoch = 3\n");
        assert!(matches!(RunConfig::resolve(Some(f.path()), None), Err(CliError::Config(_))));
        let f = file("[fsq]\nsub_vectors = 5\n");
        assert_eq!(RunConfig::resolve(Some(f.path()), None).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::defaults(Profile::Desk);
        let text = toml::to_string(&c).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
