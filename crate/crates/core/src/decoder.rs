//! Frame-synchronous streaming beam search with blank penalty and fusion.
//!
//! At each encoder frame every hypothesis may emit up to
//! `max_symbols_per_frame` labels and then must emit exactly one blank,
//! which closes the frame. Hypotheses that close a frame with the same
//! labels are merged by summing their probabilities.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::log_add;
use crate::data::{Utterance, Vocab};
use crate::error::{Error, Result};
use crate::fusion::{shallow_fuse, FusionMode};
use crate::lm::{LmOutput, LmState, RnnLm};
use crate::rnnt::{EncoderState, PredictionState, RnntModel};
use crate::tensor::Tensor;
use crate::wer::{align, EditCounts};

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub beam_size: usize,
    /// Subtracted from the blank log-score.
    pub blank_penalty: f64,
    pub fusion_mode: FusionMode,
    pub beta: f64,
    pub max_symbols_per_frame: usize,
    /// Renormalise the non-blank block under shallow fusion.
    pub sf_renormalize: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            blank_penalty: 0.0,
            fusion_mode: FusionMode::None,
            beta: 0.0,
            max_symbols_per_frame: 4,
            sf_renormalize: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("decode.beam_size must be at least 1".into()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::Config("decode.max_symbols_per_frame must be at least 1".into()));
        }
        if !self.blank_penalty.is_finite() {
            return Err(Error::Config("decode.blank_penalty must be finite".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("decode.beta must be finite and non-negative, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Lowers the blank log-score by `penalty`; other entries are untouched.
pub fn apply_blank_penalty(log_probs: &[f64], penalty: f64, blank: usize) -> Vec<f64> {
    let mut out = log_probs.to_vec();
    if penalty != 0.0 {
        out[blank] -= penalty;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub labels: Vec<usize>,
    pub log_score: f64,
    pub pred_state: PredictionState,
    pub lm_state: Option<LmState>,
    /// Labels emitted at each encoder frame along the best-scoring path.
    pub emissions: Vec<usize>,
}

impl Hypothesis {
    /// Blanks emitted: one per encoder frame.
    pub fn blanks(&self) -> usize {
        self.emissions.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub best: Hypothesis,
    pub nbest: Vec<Hypothesis>,
}

/// Everything a hypothesis needs to score its next symbol.
#[derive(Debug)]
struct Context {
    pred_state: PredictionState,
    pred_side: Vec<f64>,
    lm_state: Option<LmState>,
    lm_out: Option<LmOutput>,
}

#[derive(Clone, Debug)]
enum Ctx {
    Ready(Arc<Context>),
    Pending { parent: Arc<Context>, label: usize },
}

#[derive(Clone, Debug)]
struct Hyp {
    labels: Vec<usize>,
    score: f64,
    ctx: Ctx,
    emissions: Vec<usize>,
}

fn rank(a: &Hyp, b: &Hyp) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.labels.cmp(&b.labels))
}

/// A model, an optional LM and a decoding configuration, checked for
/// consistency.
#[derive(Clone, Copy, Debug)]
pub struct Decoder<'a> {
    pub model: &'a RnntModel,
    pub lm: Option<&'a RnnLm>,
    pub config: &'a DecoderConfig,
}

impl<'a> Decoder<'a> {
    pub fn new(model: &'a RnntModel, lm: Option<&'a RnnLm>, config: &'a DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mode = config.fusion_mode;
        let arch = model.mode();
        let consistent = match mode {
            FusionMode::None | FusionMode::Shallow => arch == FusionMode::None,
            other => arch == other,
        };
        if !consistent {
            return Err(Error::Contract(format!(
                "fusion mode {mode} cannot decode a model built for {arch}"
            )));
        }
        if mode.uses_lm() {
            let lm = lm.ok_or_else(|| Error::Contract(format!("fusion mode {mode} requires a language model")))?;
            if lm.config.vocab_size != model.config.vocab_size {
                return Err(Error::Contract(format!(
                    "LM vocabulary {} differs from transducer vocabulary {}",
                    lm.config.vocab_size, model.config.vocab_size
                )));
            }
        }
        let lm = if mode.uses_lm() { lm } else { None };
        Ok(Self { model, lm, config })
    }

    fn context(&self, label: usize, pred_state: &PredictionState, lm_state: Option<&LmState>) -> Result<Context> {
        let (pred_out, pred_state) = self.model.predict_step(label, pred_state)?;
        let (lm_out, lm_state) = match (self.lm, lm_state) {
            (Some(lm), Some(st)) => {
                let (o, s) = lm.lm_step(label, st)?;
                (Some(o), Some(s))
            }
            _ => (None, None),
        };
        let fused_pred = matches!(self.config.fusion_mode, FusionMode::EarlyShallow | FusionMode::EarlyCold);
        let lm_logits = if fused_pred { lm_out.as_ref().map(|o| o.logits.as_slice()) } else { None };
        let pred_side = self.model.pred_side(&pred_out, lm_logits, self.config.beta)?;
        Ok(Context {
            pred_state,
            pred_side,
            lm_state,
            lm_out,
        })
    }

    fn root(&self) -> Result<Hyp> {
        let lm_state = self.lm.map(|lm| lm.initial_state());
        let ctx = self.context(
            self.model.config.start(),
            &self.model.initial_prediction_state(),
            lm_state.as_ref(),
        )?;
        Ok(Hyp {
            labels: Vec::new(),
            score: 0.0,
            ctx: Ctx::Ready(Arc::new(ctx)),
            emissions: Vec::new(),
        })
    }

    fn resolve(&self, h: &mut Hyp) -> Result<Arc<Context>> {
        let ready = match &h.ctx {
            Ctx::Ready(c) => return Ok(Arc::clone(c)),
            Ctx::Pending { parent, label } => {
                Arc::new(self.context(*label, &parent.pred_state, parent.lm_state.as_ref())?)
            }
        };
        h.ctx = Ctx::Ready(Arc::clone(&ready));
        Ok(ready)
    }

    /// Decoding scores over `V + 1` for one hypothesis at one frame.
    fn scores(&self, ctx: &Context, enc_side: &[f64]) -> Result<Vec<f64>> {
        let mode = self.config.fusion_mode;
        let lm_logits = if mode == FusionMode::Cold {
            ctx.lm_out.as_ref().map(|o| o.logits.as_slice())
        } else {
            None
        };
        let mut lp = self.model.output_log_probs(enc_side, &ctx.pred_side, lm_logits)?;
        if mode == FusionMode::Shallow {
            let lm = ctx.lm_out.as_ref().expect("shallow fusion carries an LM");
            lp = shallow_fuse(&lp, &lm.log_probs, self.config.beta, self.config.sf_renormalize)?.log_scores;
        }
        Ok(apply_blank_penalty(&lp, self.config.blank_penalty, self.model.blank()))
    }

    /// Advances a beam by one encoder frame.
    fn step(&self, beam: Vec<Hyp>, enc_t: &[f64]) -> Result<Vec<Hyp>> {
        let enc_side = self.model.enc_side(enc_t)?;
        let blank = self.model.blank();
        let v = self.model.config.vocab_size;
        let width = self.config.beam_size;
        let mut closed: BTreeMap<Vec<usize>, Hyp> = BTreeMap::new();
        let mut frontier: Vec<Hyp> = beam.into_iter().map(|mut h| {
            h.emissions.push(0);
            h
        }).collect();

        for level in 0..=self.config.max_symbols_per_frame {
            let mut grown = Vec::new();
            for mut h in frontier {
                let ctx = self.resolve(&mut h)?;
                let scores = self.scores(&ctx, &enc_side)?;

                if level < self.config.max_symbols_per_frame {
                    let mut order: Vec<usize> = (0..v).collect();
                    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                    for &y in order.iter().take(width) {
                        if scores[y] == f64::NEG_INFINITY {
                            continue;
                        }
                        let mut labels = h.labels.clone();
                        labels.push(y);
                        let mut emissions = h.emissions.clone();
                        *emissions.last_mut().expect("frame opened") += 1;
                        grown.push(Hyp {
                            labels,
                            score: h.score + scores[y],
                            ctx: Ctx::Pending {
                                parent: Arc::clone(&ctx),
                                label: y,
                            },
                            emissions,
                        });
                    }
                }

                let score = h.score + scores[blank];
                match closed.get_mut(&h.labels) {
                    Some(existing) => {
                        let merged = log_add(existing.score, score);
                        if score > existing.score {
                            existing.emissions = h.emissions.clone();
                        }
                        existing.score = merged;
                        if matches!(existing.ctx, Ctx::Pending { .. }) {
                            existing.ctx = Ctx::Ready(ctx);
                        }
                    }
                    None => {
                        let labels = h.labels.clone();
                        closed.insert(labels, Hyp { score, ..h });
                    }
                }
            }
            grown.sort_by(rank);
            grown.truncate(width);
            frontier = grown;
            if frontier.is_empty() {
                break;
            }
        }

        let mut next: Vec<Hyp> = closed.into_values().collect();
        next.sort_by(rank);
        next.truncate(width);
        Ok(next)
    }

    fn publish(&self, h: &mut Hyp) -> Result<Hypothesis> {
        let ctx = self.resolve(h)?;
        Ok(Hypothesis {
            labels: h.labels.clone(),
            log_score: h.score,
            pred_state: ctx.pred_state.clone(),
            lm_state: ctx.lm_state.clone(),
            emissions: h.emissions.clone(),
        })
    }

    pub fn session(&self) -> Result<StreamSession<'a>> {
        Ok(StreamSession {
            decoder: *self,
            encoder: self.model.initial_encoder_state(),
            beam: vec![self.root()?],
            frames_consumed: 0,
            encoder_frames: 0,
            finished: false,
        })
    }

    /// Decodes a whole feature matrix through a streaming session.
    pub fn decode(&self, features: &Tensor) -> Result<DecodeResult> {
        let (rows, cols) = features.rows_cols();
        let mut s = self.session()?;
        for r in 0..rows {
            s.push_frame(&features.values()[r * cols..(r + 1) * cols])?;
        }
        s.finish()
    }

    /// Decodes frames given one at a time; no frames yields the empty
    /// hypothesis with score 0.
    pub fn decode_frames<'f>(&self, frames: impl IntoIterator<Item = &'f [f64]>) -> Result<DecodeResult> {
        let mut s = self.session()?;
        for f in frames {
            s.push_frame(f)?;
        }
        s.finish()
    }

    /// Decodes precomputed encoder outputs (`T × encoder_proj`).
    pub fn decode_encodings(&self, encodings: &Tensor) -> Result<DecodeResult> {
        let (rows, cols) = encodings.rows_cols();
        let mut beam = vec![self.root()?];
        for r in 0..rows {
            beam = self.step(beam, &encodings.values()[r * cols..(r + 1) * cols])?;
        }
        self.result(beam)
    }

    fn result(&self, mut beam: Vec<Hyp>) -> Result<DecodeResult> {
        let nbest: Vec<Hypothesis> = beam.iter_mut().map(|h| self.publish(h)).collect::<Result<_>>()?;
        let best = nbest.first().cloned().ok_or_else(|| Error::Contract("beam is empty".into()))?;
        Ok(DecodeResult { best, nbest })
    }
}

/// Incremental decoding of one utterance.
#[derive(Debug)]
pub struct StreamSession<'a> {
    decoder: Decoder<'a>,
    encoder: EncoderState,
    beam: Vec<Hyp>,
    frames_consumed: usize,
    encoder_frames: usize,
    finished: bool,
}

impl StreamSession<'_> {
    pub fn push_frame(&mut self, frame: &[f64]) -> Result<()> {
        if self.finished {
            return Err(Error::Contract("session already finished".into()));
        }
        if let Some(enc) = self.decoder.model.encoder_push(&mut self.encoder, frame)? {
            self.advance(&enc)?;
        }
        self.frames_consumed += 1;
        Ok(())
    }

    fn advance(&mut self, enc: &[f64]) -> Result<()> {
        let beam = std::mem::take(&mut self.beam);
        self.beam = self.decoder.step(beam, enc)?;
        self.encoder_frames += 1;
        Ok(())
    }

    pub fn frames_consumed(&self) -> usize {
        self.frames_consumed
    }

    pub fn encoder_frames(&self) -> usize {
        self.encoder_frames
    }

    /// Current best partial hypothesis.
    pub fn partial(&mut self) -> Result<Hypothesis> {
        let d = self.decoder;
        let h = self.beam.first_mut().ok_or_else(|| Error::Contract("beam is empty".into()))?;
        d.publish(h)
    }

    /// Flushes the encoder and returns the final n-best list.
    pub fn finish(mut self) -> Result<DecodeResult> {
        if let Some(enc) = self.decoder.model.encoder_finish(&mut self.encoder)? {
            self.advance(&enc)?;
        }
        self.finished = true;
        let beam = std::mem::take(&mut self.beam);
        self.decoder.result(beam)
    }
}

/// `utterance-id \t rank \t score \t tokens` per hypothesis.
pub fn format_nbest(id: &str, nbest: &[Hypothesis], vocab: &Vocab) -> String {
    let mut out = String::new();
    for (rank, h) in nbest.iter().enumerate() {
        out.push_str(&format!("{id}\t{}\t{:.6}\t{}\n", rank + 1, h.log_score, vocab.join(&h.labels)));
    }
    out
}

/// Corpus edit counts of best hypotheses against transcripts.
pub fn evaluate_wer(decoder: &Decoder<'_>, utts: &[Utterance]) -> Result<EditCounts> {
    let mut total = EditCounts::default();
    for u in utts {
        let r = decoder.decode(&u.features)?;
        total.add(&align(&r.best.labels, &u.transcript)?);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub beta: f64,
    pub blank_penalty: f64,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub best_beta: f64,
    pub best_penalty: f64,
    pub table: Vec<SweepPoint>,
    /// False for cold-fused models, which are never swept.
    pub evaluated: bool,
}

/// Grid search of β and blank penalty on `dev`. Ties go to the smallest β,
/// then the smallest penalty.
pub fn sweep(
    beta_grid: &[f64],
    penalty_grid: &[f64],
    dev: &[Utterance],
    model: &RnntModel,
    lm: Option<&RnnLm>,
    base: &DecoderConfig,
) -> Result<SweepResult> {
    if matches!(base.fusion_mode, FusionMode::Cold | FusionMode::EarlyCold) {
        return Ok(SweepResult {
            best_beta: 0.0,
            best_penalty: 0.0,
            table: Vec::new(),
            evaluated: false,
        });
    }
    if beta_grid.is_empty() || penalty_grid.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("sweep needs a non-empty dev set".into()));
    }
    let mut table = Vec::with_capacity(beta_grid.len() * penalty_grid.len());
    let mut best: Option<(usize, f64, f64)> = None;
    for &beta in beta_grid {
        for &penalty in penalty_grid {
            let cfg = DecoderConfig {
                beta,
                blank_penalty: penalty,
                ..base.clone()
            };
            let dec = Decoder::new(model, lm, &cfg)?;
            let counts = evaluate_wer(&dec, dev)?;
            table.push(SweepPoint {
                beta,
                blank_penalty: penalty,
                wer: counts.wer(),
            });
            let key = (counts.errors(), beta, penalty);
            let better = match best {
                None => true,
                Some(b) => {
                    key.0 < b.0
                        || (key.0 == b.0 && (key.1 < b.1 || (key.1 == b.1 && key.2 < b.2)))
                }
            };
            if better {
                best = Some(key);
            }
        }
    }
    let (_, best_beta, best_penalty) = best.expect("grid is non-empty");
    Ok(SweepResult {
        best_beta,
        best_penalty,
        table,
        evaluated: true,
    })
}
