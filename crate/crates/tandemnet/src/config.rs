//! One flat key=value text format for everything a run needs: model
//! dimensions, encoder layout, optimizer recipe, corpus generator and
//! caption fine-tune settings. The same format is echoed into checkpoints
//! and accepted as CLI overrides, so a run is reproducible from its own
//! output.

use crate::captioner::CaptionConfig;
use crate::corpus::{canonical_vocab, GeneratorSpec};
use crate::encoder::EncoderArch;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Which preset the overrides started from: "desk", "paper" or "toy".
    pub preset: String,
    /// Seed for model init and training shuffles (the generator carries its
    /// own).
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorSpec,
    pub caption: CaptionConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let vocab = canonical_vocab().len();
        let model = match name {
            "desk" => ModelConfig::desk(vocab),
            "paper" => ModelConfig::paper_scale(vocab),
            "toy" => ModelConfig::toy(vocab),
            other => {
                return Err(Error::config("preset", format!("unknown preset {other:?}; expected desk, paper or toy")))
            }
        };
        Ok(RunConfig {
            preset: name.to_string(),
            seed: 0,
            model,
            train: TrainConfig::default(),
            generator: GeneratorSpec::default(),
            caption: CaptionConfig::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.generator.validate()?;
        self.caption.validate()
    }

    /// Applies one `key=value` override. Architecture-specific encoder keys
    /// require `model.encoder.arch` to already hold the matching variant, so
    /// ordered application (file order, CLI order) stays unambiguous.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::config(key.to_string(), format!("cannot parse {value:?}")))
        }
        fn list(key: &str, value: &str) -> Result<Vec<usize>> {
            value.split(',').map(|p| num::<usize>(key, p.trim())).collect()
        }
        match key {
            "preset" => {
                *self = RunConfig::preset(value)?;
            }
            "seed" => self.seed = num(key, value)?,

            "model.lstm_dim" => self.model.lstm_dim = num(key, value)?,
            "model.attention_dim" => self.model.attention_dim = num(key, value)?,
            "model.embed_dim" => self.model.embed_dim = num(key, value)?,
            "model.sentences" => self.model.sentences = num(key, value)?,
            "model.classes" => self.model.classes = num(key, value)?,
            "model.drop_rate" => self.model.drop_rate = num(key, value)?,
            "model.vocab_size" => self.model.vocab_size = num(key, value)?,
            "model.encoder.input_size" => self.model.encoder.input_size = num(key, value)?,
            "model.encoder.dropout" => self.model.encoder.dropout = num(key, value)?,
            "model.encoder.arch" => {
                self.model.encoder.arch = match value {
                    "residual" => EncoderArch::Residual {
                        stem_channels: 16,
                        stem_stride: 1,
                        stage_channels: vec![16, 32, 64],
                        blocks_per_stage: 2,
                    },
                    "convstack" => EncoderArch::ConvStack { channels: vec![4, 4], strides: vec![2, 2] },
                    other => {
                        return Err(Error::config(key.to_string(), format!("unknown architecture {other:?}")))
                    }
                };
            }
            "model.encoder.stem_channels" => match &mut self.model.encoder.arch {
                EncoderArch::Residual { stem_channels, .. } => *stem_channels = num(key, value)?,
                _ => return Err(arch_mismatch(key, "residual")),
            },
            "model.encoder.stem_stride" => match &mut self.model.encoder.arch {
                EncoderArch::Residual { stem_stride, .. } => *stem_stride = num(key, value)?,
                _ => return Err(arch_mismatch(key, "residual")),
            },
            "model.encoder.stage_channels" => match &mut self.model.encoder.arch {
                EncoderArch::Residual { stage_channels, .. } => *stage_channels = list(key, value)?,
                _ => return Err(arch_mismatch(key, "residual")),
            },
            "model.encoder.blocks_per_stage" => match &mut self.model.encoder.arch {
                EncoderArch::Residual { blocks_per_stage, .. } => *blocks_per_stage = num(key, value)?,
                _ => return Err(arch_mismatch(key, "residual")),
            },
            "model.encoder.channels" => match &mut self.model.encoder.arch {
                EncoderArch::ConvStack { channels, .. } => *channels = list(key, value)?,
                _ => return Err(arch_mismatch(key, "convstack")),
            },
            "model.encoder.strides" => match &mut self.model.encoder.arch {
                EncoderArch::ConvStack { strides, .. } => *strides = list(key, value)?,
                _ => return Err(arch_mismatch(key, "convstack")),
            },

            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.validation_fraction" => self.train.validation_fraction = num(key, value)?,
            "train.train_eval_cap" => self.train.train_eval_cap = num(key, value)?,
            "train.optimizer.cnn_lr" => self.train.optimizer.cnn_lr = num(key, value)?,
            "train.optimizer.attention_lr" => self.train.optimizer.attention_lr = num(key, value)?,
            "train.optimizer.beta1" => self.train.optimizer.beta1 = num(key, value)?,
            "train.optimizer.beta2" => self.train.optimizer.beta2 = num(key, value)?,
            "train.optimizer.epsilon" => self.train.optimizer.epsilon = num(key, value)?,
            "train.optimizer.decay" => self.train.optimizer.decay = num(key, value)?,
            "train.optimizer.clip_norm" => self.train.optimizer.clip_norm = num(key, value)?,

            "generator.num_patients" => self.generator.num_patients = num(key, value)?,
            "generator.samples_per_patient" => self.generator.samples_per_patient = num(key, value)?,
            "generator.image_size" => self.generator.image_size = num(key, value)?,
            "generator.feature_jitter" => self.generator.feature_jitter = num(key, value)?,
            "generator.background_noise" => self.generator.background_noise = num(key, value)?,
            "generator.report_variants" => self.generator.report_variants = num(key, value)?,
            "generator.seed" => self.generator.seed = num(key, value)?,

            "caption.freeze_attention_epochs" => self.caption.freeze_attention_epochs = num(key, value)?,
            "caption.finetune_lr" => self.caption.finetune_lr = num(key, value)?,
            "caption.max_decode_length" => self.caption.max_decode_length = num(key, value)?,

            other => return Err(Error::config(other.to_string(), "unknown configuration key".to_string())),
        }
        Ok(())
    }

    /// Applies `key=value` strings in order (CLI `--set` arguments).
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for pair in pairs {
            let pair = pair.as_ref();
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::config(pair.to_string(), "expected key=value".to_string()))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Full echo: every key, one per line, in an order `from_text` replays
    /// cleanly (preset first, arch before arch-specific fields). Float
    /// formatting uses the shortest round-trip representation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("preset", self.preset.clone());
        kv("seed", self.seed.to_string());

        kv("model.encoder.input_size", self.model.encoder.input_size.to_string());
        kv("model.encoder.dropout", self.model.encoder.dropout.to_string());
        match &self.model.encoder.arch {
            EncoderArch::Residual { stem_channels, stem_stride, stage_channels, blocks_per_stage } => {
                kv("model.encoder.arch", "residual".to_string());
                kv("model.encoder.stem_channels", stem_channels.to_string());
                kv("model.encoder.stem_stride", stem_stride.to_string());
                kv("model.encoder.stage_channels", join_list(stage_channels));
                kv("model.encoder.blocks_per_stage", blocks_per_stage.to_string());
            }
            EncoderArch::ConvStack { channels, strides } => {
                kv("model.encoder.arch", "convstack".to_string());
                kv("model.encoder.channels", join_list(channels));
                kv("model.encoder.strides", join_list(strides));
            }
        }
        kv("model.lstm_dim", self.model.lstm_dim.to_string());
        kv("model.attention_dim", self.model.attention_dim.to_string());
        kv("model.embed_dim", self.model.embed_dim.to_string());
        kv("model.sentences", self.model.sentences.to_string());
        kv("model.classes", self.model.classes.to_string());
        kv("model.drop_rate", self.model.drop_rate.to_string());
        kv("model.vocab_size", self.model.vocab_size.to_string());

        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.validation_fraction", self.train.validation_fraction.to_string());
        kv("train.train_eval_cap", self.train.train_eval_cap.to_string());
        kv("train.optimizer.cnn_lr", self.train.optimizer.cnn_lr.to_string());
        kv("train.optimizer.attention_lr", self.train.optimizer.attention_lr.to_string());
        kv("train.optimizer.beta1", self.train.optimizer.beta1.to_string());
        kv("train.optimizer.beta2", self.train.optimizer.beta2.to_string());
        kv("train.optimizer.epsilon", self.train.optimizer.epsilon.to_string());
        kv("train.optimizer.decay", self.train.optimizer.decay.to_string());
        kv("train.optimizer.clip_norm", self.train.optimizer.clip_norm.to_string());

        kv("generator.num_patients", self.generator.num_patients.to_string());
        kv("generator.samples_per_patient", self.generator.samples_per_patient.to_string());
        kv("generator.image_size", self.generator.image_size.to_string());
        kv("generator.feature_jitter", self.generator.feature_jitter.to_string());
        kv("generator.background_noise", self.generator.background_noise.to_string());
        kv("generator.report_variants", self.generator.report_variants.to_string());
        kv("generator.seed", self.generator.seed.to_string());

        kv("caption.freeze_attention_epochs", self.caption.freeze_attention_epochs.to_string());
        kv("caption.finetune_lr", self.caption.finetune_lr.to_string());
        kv("caption.max_decode_length", self.caption.max_decode_length.to_string());
        out
    }

    /// Parses key=value lines. `#` comments and blank lines are skipped;
    /// keys apply in file order on top of the named preset (default desk).
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::preset("desk")?;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line.to_string(), "expected key=value".to_string()))?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }
}

fn arch_mismatch(key: &str, wanted: &str) -> Error {
    Error::config(key.to_string(), format!("only valid after model.encoder.arch={wanted}"))
}

fn join_list(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}
