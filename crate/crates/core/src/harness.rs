//! Training loops for the transducer variants and ESF fine-tuning.

use rand::Rng;

use crate::decoder::{evaluate_wer, Decoder, DecoderConfig};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::lm::RnnLm;
use crate::rnnt::RnntModel;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip: f64,
    /// Dev WER is measured every `eval_every` steps (and at the end).
    pub eval_every: usize,
    /// Number of dev utterances used for checkpoint selection.
    pub eval_utterances: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            learning_rate: 0.5,
            clip: 1.0,
            eval_every: 500,
            eval_utterances: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("training batch_size and eval_every must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("training learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub step: usize,
    /// Mean per-utterance loss over the steps since the previous log.
    pub train_loss: f64,
    pub dev_wer: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: RnntModel,
    pub best_step: usize,
    pub best_dev_wer: f64,
    pub history: Vec<TrainLog>,
}

/// Per-utterance LM logits after each transcript prefix.
pub fn lm_logit_cache(lm: &RnnLm, utts: &[Utterance]) -> Result<Vec<Vec<Vec<f64>>>> {
    utts.iter().map(|u| lm.prefix_logits(&u.transcript)).collect()
}

/// Mean loss over a fixed set of utterances, without updating anything.
pub fn mean_loss(model: &RnntModel, utts: &[Utterance], lm: Option<&RnnLm>, beta: f64) -> Result<f64> {
    if utts.is_empty() {
        return Err(Error::Data("mean loss needs utterances".into()));
    }
    let mut total = 0.0;
    for u in utts {
        let logits = match lm {
            Some(lm) if model.needs_lm() => Some(lm.prefix_logits(&u.transcript)?),
            _ => None,
        };
        let mut tape = crate::autodiff::Tape::new();
        let loss = model.loss_on_tape(&mut tape, &u.features, &u.transcript, logits.as_deref(), beta)?;
        total += tape.scalar_value(loss);
    }
    Ok(total / utts.len() as f64)
}

fn dev_wer(model: &RnntModel, lm: Option<&RnnLm>, decode: &DecoderConfig, dev: &[Utterance]) -> Result<f64> {
    let cfg = DecoderConfig {
        fusion_mode: model.mode(),
        ..decode.clone()
    };
    let dec = Decoder::new(model, lm, &cfg)?;
    Ok(evaluate_wer(&dec, dev)?.wer())
}

/// SGD on the transducer loss over `train`, keeping the checkpoint with the
/// lowest dev WER (measured at step 0, every `eval_every` steps and at the
/// end). Models with a fusion attachment need `lm`, whose parameters are
/// only read.
pub fn train_rnnt(
    mut model: RnntModel,
    train: &[Utterance],
    dev: &[Utterance],
    lm: Option<&RnnLm>,
    cfg: &TrainConfig,
    decode: &DecoderConfig,
    rng: &mut impl Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("dev set is empty".into()));
    }
    if model.needs_lm() && lm.is_none() {
        return Err(Error::Contract(format!("{} training requires a trained LM", model.mode())));
    }
    let lm = if model.needs_lm() { lm } else { None };
    let cache = match lm {
        Some(lm) => Some(lm_logit_cache(lm, train)?),
        None => None,
    };
    let beta = decode.beta;
    let dev = &dev[..dev.len().min(cfg.eval_utterances.max(1))];

    let mut best = model.clone();
    let mut best_wer = dev_wer(&model, lm, decode, dev)?;
    let mut best_step = 0;
    let mut history = vec![TrainLog {
        step: 0,
        train_loss: f64::NAN,
        dev_wer: best_wer,
    }];
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);

    for step in 1..=cfg.steps {
        model.store.zero_grad();
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..train.len());
            let u = &train[i];
            let logits = cache.as_ref().map(|c| c[i].as_slice());
            let mut tape = crate::autodiff::Tape::new();
            let loss = model.loss_on_tape(&mut tape, &u.features, &u.transcript, logits, beta)?;
            let value = tape.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("loss {value} on utterance {}", u.id),
                });
            }
            loss_sum += value;
            loss_n += 1;
            let grads = tape.backward(loss)?;
            model.store.accumulate(&grads);
        }
        model.store.scale_grads(1.0 / cfg.batch_size as f64);
        let norm = model.store.sgd_step(cfg.learning_rate, cfg.clip);
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("gradient norm {norm}"),
            });
        }

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let wer = dev_wer(&model, lm, decode, dev)?;
            history.push(TrainLog {
                step,
                train_loss: loss_sum / loss_n.max(1) as f64,
                dev_wer: wer,
            });
            loss_sum = 0.0;
            loss_n = 0;
            if wer < best_wer {
                best_wer = wer;
                best_step = step;
                best = model.clone();
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        best_step,
        best_dev_wer: best_wer,
        history,
    })
}

/// Attaches the ESF layers to a trained plain model and continues training
/// with the LM fused into the prediction path.
pub fn fine_tune_esf(
    base: &RnntModel,
    lm: &RnnLm,
    train: &[Utterance],
    dev: &[Utterance],
    cfg: &TrainConfig,
    decode: &DecoderConfig,
    rng: &mut impl Rng,
) -> Result<TrainOutcome> {
    let mut model = base.clone();
    model.attach_early_shallow(rng)?;
    let decode = DecoderConfig {
        fusion_mode: FusionMode::EarlyShallow,
        ..decode.clone()
    };
    train_rnnt(model, train, dev, Some(lm), cfg, &decode, rng)
}
