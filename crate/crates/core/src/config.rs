//! Experiment configuration as flat `section.key = value` text.
//!
//! Every key has a default; unknown keys and malformed values are errors.
//! `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::DataConfig;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode};
use crate::harness::TrainConfig;
use crate::lm::{LmConfig, LmTrainConfig};
use crate::rnnt::RnntConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub penalties: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            betas: vec![0.1, 0.2, 0.3, 0.5],
            penalties: vec![0.0, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathConfig {
    pub data: String,
    pub lm: String,
    pub model: String,
    /// Which split `decode` reads: dev, head_test or tail_test.
    pub decode_set: String,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            data: "data".into(),
            lm: "lm/lm.ckpt".into(),
            model: "model/model.ckpt".into(),
            decode_set: "tail_test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: RnntConfig,
    /// Prediction-network depth of the LPN row.
    pub lpn_pred_layers: usize,
    pub lm: LmConfig,
    pub lm_training: LmTrainConfig,
    /// Weight of the transcribed text in the LM mixture; the rest is split
    /// evenly over `lm_text_shards` shards of the text-only corpus.
    pub lm_transcribed_weight: f64,
    pub lm_text_shards: usize,
    pub fusion_mode: FusionMode,
    pub fusion: FusionConfig,
    pub training: TrainConfig,
    pub esf_training: TrainConfig,
    /// LM weight inside the prediction path while ESF is fine-tuned.
    pub esf_beta: f64,
    pub decode: DecoderConfig,
    pub sweep: SweepConfig,
    pub data: DataConfig,
    pub paths: PathConfig,
    pub matrix_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = DataConfig::default();
        let vocab = data.language.words + 1;
        Self {
            seed: 1,
            model: RnntConfig {
                vocab_size: vocab,
                feature_dim: data.acoustics.feature_dim,
                ..RnntConfig::default()
            },
            lpn_pred_layers: 2,
            lm: LmConfig {
                vocab_size: vocab,
                ..LmConfig::default()
            },
            lm_training: LmTrainConfig::default(),
            lm_transcribed_weight: 0.6,
            lm_text_shards: 4,
            fusion_mode: FusionMode::None,
            fusion: FusionConfig::default(),
            training: TrainConfig::default(),
            esf_training: TrainConfig {
                steps: 500,
                eval_every: 250,
                ..TrainConfig::default()
            },
            esf_beta: 0.3,
            decode: DecoderConfig::default(),
            sweep: SweepConfig::default(),
            data,
            paths: PathConfig::default(),
            matrix_seeds: vec![1, 2, 3, 4, 5],
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(Error::Config(format!("`{key}` needs at least one value")));
    }
    items.into_iter().map(|v| parse(key, v)).collect()
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Declares every key once: how to read it and how to set it.
macro_rules! keys {
    ($self:ident, $key:ident, $value:ident; $( $name:literal => $field:expr, $kind:ident; )*) => {
        fn entries(&$self) -> Vec<(&'static str, String)> {
            vec![ $( ($name, keys!(@show $kind, &$field)) ),* ]
        }

        fn set(&mut $self, $key: &str, $value: &str) -> Result<()> {
            match $key {
                $( $name => { $field = keys!(@parse $kind, $key, $value); } )*
                other => return Err(Error::Config(format!("unknown key `{other}`"))),
            }
            Ok(())
        }
    };
    (@show scalar, $f:expr) => { $f.to_string() };
    (@show list, $f:expr) => { list($f) };
    (@parse scalar, $k:expr, $v:expr) => { parse($k, $v)? };
    (@parse list, $k:expr, $v:expr) => { parse_list($k, $v)? };
}

impl ExperimentConfig {
    keys! { self, key, value;
        "seed" => self.seed, scalar;
        "model.feature_dim" => self.model.feature_dim, scalar;
        "model.encoder_layers" => self.model.encoder_layers, scalar;
        "model.encoder_hidden" => self.model.encoder_hidden, scalar;
        "model.encoder_proj" => self.model.encoder_proj, scalar;
        "model.stack_after_layer" => self.model.stack_after_layer, scalar;
        "model.stack_stride" => self.model.stack_stride, scalar;
        "model.pred_layers" => self.model.pred_layers, scalar;
        "model.pred_hidden" => self.model.pred_hidden, scalar;
        "model.pred_proj" => self.model.pred_proj, scalar;
        "model.joint_hidden" => self.model.joint_hidden, scalar;
        "model.vocab_size" => self.model.vocab_size, scalar;
        "model.lpn_pred_layers" => self.lpn_pred_layers, scalar;
        "lm.embed_dim" => self.lm.embed_dim, scalar;
        "lm.layers" => self.lm.layers, scalar;
        "lm.hidden" => self.lm.hidden, scalar;
        "lm.vocab_size" => self.lm.vocab_size, scalar;
        "lm.steps" => self.lm_training.steps, scalar;
        "lm.batch_size" => self.lm_training.batch_size, scalar;
        "lm.learning_rate" => self.lm_training.learning_rate, scalar;
        "lm.clip" => self.lm_training.clip, scalar;
        "lm.eval_every" => self.lm_training.eval_every, scalar;
        "lm.transcribed_weight" => self.lm_transcribed_weight, scalar;
        "lm.text_shards" => self.lm_text_shards, scalar;
        "fusion.mode" => self.fusion_mode, scalar;
        "fusion.lm_feature_dim" => self.fusion.lm_feature_dim, scalar;
        "fusion.identity_init" => self.fusion.identity_init, scalar;
        "fusion.lm_input_scale" => self.fusion.lm_input_scale, scalar;
        "fusion.lm_output_scale" => self.fusion.lm_output_scale, scalar;
        "training.steps" => self.training.steps, scalar;
        "training.batch_size" => self.training.batch_size, scalar;
        "training.learning_rate" => self.training.learning_rate, scalar;
        "training.clip" => self.training.clip, scalar;
        "training.eval_every" => self.training.eval_every, scalar;
        "training.eval_utterances" => self.training.eval_utterances, scalar;
        "esf.steps" => self.esf_training.steps, scalar;
        "esf.batch_size" => self.esf_training.batch_size, scalar;
        "esf.learning_rate" => self.esf_training.learning_rate, scalar;
        "esf.clip" => self.esf_training.clip, scalar;
        "esf.eval_every" => self.esf_training.eval_every, scalar;
        "esf.eval_utterances" => self.esf_training.eval_utterances, scalar;
        "esf.beta" => self.esf_beta, scalar;
        "decode.beam_size" => self.decode.beam_size, scalar;
        "decode.blank_penalty" => self.decode.blank_penalty, scalar;
        "decode.beta" => self.decode.beta, scalar;
        "decode.max_symbols_per_frame" => self.decode.max_symbols_per_frame, scalar;
        "decode.sf_renormalize" => self.decode.sf_renormalize, scalar;
        "sweep.betas" => self.sweep.betas, list;
        "sweep.penalties" => self.sweep.penalties, list;
        "data.words" => self.data.language.words, scalar;
        "data.successors" => self.data.language.successors, scalar;
        "data.zipf_exponent" => self.data.language.zipf_exponent, scalar;
        "data.min_len" => self.data.language.min_len, scalar;
        "data.max_len" => self.data.language.max_len, scalar;
        "data.stop_prob" => self.data.language.stop_prob, scalar;
        "data.corpus_size" => self.data.corpus_size, scalar;
        "data.feature_dim" => self.data.acoustics.feature_dim, scalar;
        "data.noise" => self.data.acoustics.noise, scalar;
        "data.min_frames" => self.data.acoustics.min_frames, scalar;
        "data.max_frames" => self.data.acoustics.max_frames, scalar;
        "data.tail_offset" => self.data.acoustics.tail_offset, scalar;
        "data.head_fraction" => self.data.split.head_fraction, scalar;
        "data.paired_train" => self.data.split.paired_train, scalar;
        "data.lm_text" => self.data.split.lm_text, scalar;
        "data.dev" => self.data.split.dev, scalar;
        "data.head_test" => self.data.split.head_test, scalar;
        "data.tail_test" => self.data.split.tail_test, scalar;
        "paths.data" => self.paths.data, scalar;
        "paths.lm" => self.paths.lm, scalar;
        "paths.model" => self.paths.model, scalar;
        "paths.decode_set" => self.paths.decode_set, scalar;
        "matrix.seeds" => self.matrix_seeds, list;
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lm.validate()?;
        self.training.validate()?;
        self.esf_training.validate()?;
        self.decode.validate()?;
        self.data.acoustics.validate()?;
        let v = self.data.language.words + 1;
        if self.model.vocab_size != v || self.lm.vocab_size != v {
            return Err(Error::Config(format!(
                "model.vocab_size and lm.vocab_size must equal data.words + 1 = {v}"
            )));
        }
        if self.model.feature_dim != self.data.acoustics.feature_dim {
            return Err(Error::Config("model.feature_dim must equal data.feature_dim".into()));
        }
        if self.lpn_pred_layers == 0 {
            return Err(Error::Config("model.lpn_pred_layers must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lm_transcribed_weight) || self.lm_text_shards == 0 {
            return Err(Error::Config(
                "lm.transcribed_weight must lie in [0, 1] and lm.text_shards be positive".into(),
            ));
        }
        if self.sweep.betas.iter().any(|b| !(*b >= 0.0)) || !(self.esf_beta >= 0.0) {
            return Err(Error::Config("sweep.betas and esf.beta must be non-negative".into()));
        }
        Ok(())
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
