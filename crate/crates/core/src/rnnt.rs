//! The streaming transducer: causal LSTM encoder with frame stacking, LSTM
//! prediction network, and a feed-forward joint network over `V + 1`
//! outputs (blank is id `V`).

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{
    cold_fuse_forward, early_cold_fuse, early_shallow_fuse, ColdFusionParams, EarlyColdParams,
    EarlyShallowParams, FusionConfig, FusionMode,
};
use crate::lattice::transducer_nll;
use crate::nn::{lstm_step, LayerState, LayerVars, Linear, LstmCell};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct RnntConfig {
    pub feature_dim: usize,
    pub encoder_layers: usize,
    pub encoder_hidden: usize,
    pub encoder_proj: usize,
    /// Number of encoder layers that run at the input frame rate.
    pub stack_after_layer: usize,
    pub stack_stride: usize,
    pub pred_layers: usize,
    pub pred_hidden: usize,
    pub pred_proj: usize,
    pub joint_hidden: usize,
    /// Output vocabulary size, blank excluded.
    pub vocab_size: usize,
}

impl Default for RnntConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            encoder_layers: 2,
            encoder_hidden: 64,
            encoder_proj: 32,
            stack_after_layer: 1,
            stack_stride: 2,
            pred_layers: 1,
            pred_hidden: 64,
            pred_proj: 32,
            joint_hidden: 64,
            vocab_size: 48,
        }
    }
}

impl RnntConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("encoder_layers", self.encoder_layers),
            ("encoder_hidden", self.encoder_hidden),
            ("encoder_proj", self.encoder_proj),
            ("stack_stride", self.stack_stride),
            ("pred_layers", self.pred_layers),
            ("pred_hidden", self.pred_hidden),
            ("pred_proj", self.pred_proj),
            ("joint_hidden", self.joint_hidden),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if self.stack_after_layer >= self.encoder_layers {
            return Err(Error::Config(format!(
                "model.stack_after_layer ({}) must be below model.encoder_layers ({})",
                self.stack_after_layer, self.encoder_layers
            )));
        }
        Ok(())
    }

    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    /// Start-of-sequence sentinel fed to the prediction network.
    pub fn start(&self) -> usize {
        self.vocab_size + 1
    }

    /// Encoder frames produced from `raw` input frames.
    pub fn output_frames(&self, raw: usize) -> usize {
        raw.div_ceil(self.stack_stride)
    }

    fn lower_layers(&self) -> usize {
        if self.stack_stride > 1 {
            self.stack_after_layer
        } else {
            self.encoder_layers
        }
    }
}

/// LSTM followed by a linear projection.
#[derive(Clone, Debug)]
struct RecurrentLayer {
    cell: LstmCell,
    proj: Linear,
}

impl RecurrentLayer {
    fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, proj: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            cell: LstmCell::new(store, &format!("{name}.lstm"), input, hidden, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), hidden, proj, true, rng)?,
        })
    }

    fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, state: &mut LayerVars) -> Result<Var> {
        let vars = self.cell.vars(tape, store);
        let (h, c) = lstm_step(tape, x, state.h, state.c, &vars)?;
        *state = LayerVars { h, c };
        self.proj.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub enum Attachment {
    None,
    EarlyShallow(EarlyShallowParams),
    Cold(ColdFusionParams),
    EarlyCold(EarlyColdParams),
}

/// Causal encoder state: per-layer LSTM states plus the stacking buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderState {
    pub layers: Vec<LayerState>,
    pub buffer: Vec<Vec<f64>>,
    pub frames_in: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionState {
    pub layers: Vec<LayerState>,
}

struct EncoderTape {
    layers: Vec<LayerVars>,
    buffer: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct RnntModel {
    pub config: RnntConfig,
    pub store: ParamStore,
    encoder: Vec<RecurrentLayer>,
    embed: ParamId,
    prediction: Vec<RecurrentLayer>,
    joint_enc: Linear,
    joint_pred: Linear,
    joint_out: Option<Linear>,
    attachment: Attachment,
}

impl RnntModel {
    /// Builds a randomly initialised model. `mode` selects the trainable
    /// fusion layers: CF replaces the joint output layer, ECF widens the
    /// joint's prediction input, ESF adds its projection pair. SF adds none.
    pub fn new(config: RnntConfig, mode: FusionMode, fusion: &FusionConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();

        let mut encoder = Vec::with_capacity(c.encoder_layers);
        for i in 0..c.encoder_layers {
            let mut input = if i == 0 { c.feature_dim } else { c.encoder_proj };
            if c.stack_stride > 1 && i == c.stack_after_layer {
                input *= c.stack_stride;
            }
            encoder.push(RecurrentLayer::new(
                &mut store,
                &format!("encoder.l{i}"),
                input,
                c.encoder_hidden,
                c.encoder_proj,
                rng,
            )?);
        }

        // rows 0..V are labels, row V is the start sentinel
        let embed = store.add_uniform("pred.embed", vec![c.vocab_size + 1, c.pred_proj], 1.0, rng)?;
        let mut prediction = Vec::with_capacity(c.pred_layers);
        for i in 0..c.pred_layers {
            prediction.push(RecurrentLayer::new(
                &mut store,
                &format!("pred.l{i}"),
                c.pred_proj,
                c.pred_hidden,
                c.pred_proj,
                rng,
            )?);
        }

        let pred_width = if mode == FusionMode::EarlyCold {
            c.pred_proj + fusion.lm_feature_dim
        } else {
            c.pred_proj
        };
        let joint_enc = Linear::new(&mut store, "joint.enc", c.encoder_proj, c.joint_hidden, false, rng)?;
        let joint_pred = Linear::new(&mut store, "joint.pred", pred_width, c.joint_hidden, true, rng)?;
        let joint_out = if mode == FusionMode::Cold {
            None
        } else {
            Some(Linear::new(&mut store, "joint.out", c.joint_hidden, c.vocab_size + 1, true, rng)?)
        };

        let attachment = match mode {
            FusionMode::None | FusionMode::Shallow => Attachment::None,
            FusionMode::Cold => Attachment::Cold(ColdFusionParams::new(
                &mut store,
                c.joint_hidden,
                c.vocab_size,
                fusion,
                rng,
            )?),
            FusionMode::EarlyCold => Attachment::EarlyCold(EarlyColdParams::new(
                &mut store,
                c.pred_proj,
                c.vocab_size,
                fusion,
                rng,
            )?),
            FusionMode::EarlyShallow => {
                let mut model = Self {
                    config: config.clone(),
                    store,
                    encoder,
                    embed,
                    prediction,
                    joint_enc,
                    joint_pred,
                    joint_out,
                    attachment: Attachment::None,
                };
                model.attach_early_shallow(rng)?;
                return Ok(model);
            }
        };

        Ok(Self {
            config,
            store,
            encoder,
            embed,
            prediction,
            joint_enc,
            joint_pred,
            joint_out,
            attachment,
        })
    }

    /// Turns a plain model into an ESF model. The new projection is
    /// initialised from the joint network's prediction path.
    pub fn attach_early_shallow(&mut self, rng: &mut impl Rng) -> Result<()> {
        if !matches!(self.attachment, Attachment::None) {
            return Err(Error::Contract("early shallow fusion needs a plain transducer".into()));
        }
        let out = self
            .joint_out
            .clone()
            .ok_or_else(|| Error::Contract("model has no joint output layer".into()))?;
        let w_pred = self.store.get(self.joint_pred.weight).tensor.clone();
        let b_pred = self.store.get(self.joint_pred.bias.expect("bias")).tensor.clone();
        let w_out = self.store.get(out.weight).tensor.clone();
        let b_out = self.store.get(out.bias.expect("bias")).tensor.clone();
        let params = EarlyShallowParams::new(
            &mut self.store,
            self.config.pred_proj,
            self.config.joint_hidden,
            self.config.vocab_size,
            Some((&w_pred, &b_pred, &w_out, &b_out)),
            rng,
        )?;
        self.attachment = Attachment::EarlyShallow(params);
        Ok(())
    }

    /// Architecture-level fusion mode (never `Shallow`).
    pub fn mode(&self) -> FusionMode {
        match self.attachment {
            Attachment::None => FusionMode::None,
            Attachment::EarlyShallow(_) => FusionMode::EarlyShallow,
            Attachment::Cold(_) => FusionMode::Cold,
            Attachment::EarlyCold(_) => FusionMode::EarlyCold,
        }
    }

    pub fn attachment(&self) -> &Attachment {
        &self.attachment
    }

    /// Whether the forward pass needs LM logits.
    pub fn needs_lm(&self) -> bool {
        !matches!(self.attachment, Attachment::None)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_values()
    }

    pub fn blank(&self) -> usize {
        self.config.blank()
    }

    // ----- encoder -------------------------------------------------------

    pub fn initial_encoder_state(&self) -> EncoderState {
        EncoderState {
            layers: (0..self.config.encoder_layers)
                .map(|_| LayerState::zeros(self.config.encoder_hidden))
                .collect(),
            buffer: Vec::new(),
            frames_in: 0,
        }
    }

    fn new_encoder_tape(&self, tape: &mut Tape, state: &EncoderState) -> EncoderTape {
        EncoderTape {
            layers: state.layers.iter().map(|s| LayerVars::from_state(tape, s)).collect(),
            buffer: state.buffer.iter().map(|b| tape.vector(b.clone())).collect(),
        }
    }

    fn save_encoder_tape(&self, tape: &Tape, et: &EncoderTape, state: &mut EncoderState) {
        state.layers = et.layers.iter().map(|v| v.to_state(tape)).collect();
        state.buffer = et.buffer.iter().map(|&b| tape.value(b).to_vec()).collect();
    }

    fn encoder_upper(&self, tape: &mut Tape, et: &mut EncoderTape, x: Var) -> Result<Var> {
        let lower = self.config.lower_layers();
        let mut h = x;
        for (i, layer) in self.encoder.iter().enumerate().skip(lower) {
            h = layer.step(tape, &self.store, h, &mut et.layers[i])?;
        }
        Ok(h)
    }

    fn encoder_frame(&self, tape: &mut Tape, et: &mut EncoderTape, x: Var) -> Result<Option<Var>> {
        let lower = self.config.lower_layers();
        let mut h = x;
        for (i, layer) in self.encoder.iter().enumerate().take(lower) {
            h = layer.step(tape, &self.store, h, &mut et.layers[i])?;
        }
        if self.config.stack_stride == 1 {
            return Ok(Some(h));
        }
        et.buffer.push(h);
        if et.buffer.len() < self.config.stack_stride {
            return Ok(None);
        }
        self.stack_and_finish(tape, et).map(Some)
    }

    fn stack_and_finish(&self, tape: &mut Tape, et: &mut EncoderTape) -> Result<Var> {
        let buffered = std::mem::take(&mut et.buffer);
        let width = tape.shape(buffered[0])[0];
        let mut stacked = buffered[0];
        for k in 1..self.config.stack_stride {
            let next = match buffered.get(k) {
                Some(&v) => v,
                None => tape.vector(vec![0.0; width]),
            };
            stacked = tape.concat_cols(stacked, next)?;
        }
        self.encoder_upper(tape, et, stacked)
    }

    fn encoder_flush(&self, tape: &mut Tape, et: &mut EncoderTape) -> Result<Option<Var>> {
        if et.buffer.is_empty() {
            return Ok(None);
        }
        self.stack_and_finish(tape, et).map(Some)
    }

    fn check_frame(&self, frame: &[f64]) -> Result<()> {
        if frame.len() != self.config.feature_dim {
            return Err(Error::Shape {
                op: "encoder frame",
                left: vec![frame.len()],
                right: vec![self.config.feature_dim],
            });
        }
        Ok(())
    }

    /// Feeds one raw frame; returns an encoder output when one is complete.
    pub fn encoder_push(&self, state: &mut EncoderState, frame: &[f64]) -> Result<Option<Vec<f64>>> {
        self.check_frame(frame)?;
        let mut tape = Tape::new();
        let mut et = self.new_encoder_tape(&mut tape, state);
        let x = tape.vector(frame.to_vec());
        let out = self.encoder_frame(&mut tape, &mut et, x)?;
        self.save_encoder_tape(&tape, &et, state);
        state.frames_in += 1;
        Ok(out.map(|v| tape.value(v).to_vec()))
    }

    /// Flushes a partially filled stacking buffer, zero-padding the tail.
    pub fn encoder_finish(&self, state: &mut EncoderState) -> Result<Option<Vec<f64>>> {
        let mut tape = Tape::new();
        let mut et = self.new_encoder_tape(&mut tape, state);
        let out = self.encoder_flush(&mut tape, &mut et)?;
        self.save_encoder_tape(&tape, &et, state);
        Ok(out.map(|v| tape.value(v).to_vec()))
    }

    /// Encodes a whole `T_raw × d` feature matrix into `T × encoder_proj`.
    pub fn encode_utterance(&self, features: &Tensor) -> Result<Tensor> {
        let (rows, cols) = self.feature_dims(features)?;
        let mut state = self.initial_encoder_state();
        let mut out = Vec::new();
        for r in 0..rows {
            if let Some(e) = self.encoder_push(&mut state, &features.values()[r * cols..(r + 1) * cols])? {
                out.push(e);
            }
        }
        if let Some(e) = self.encoder_finish(&mut state)? {
            out.push(e);
        }
        let t = out.len();
        Tensor::matrix(t, self.config.encoder_proj, out.concat())
    }

    fn feature_dims(&self, features: &Tensor) -> Result<(usize, usize)> {
        if features.shape().len() != 2 {
            return Err(Error::EmptyUtterance);
        }
        let (rows, cols) = features.rows_cols();
        if cols != self.config.feature_dim {
            return Err(Error::Shape {
                op: "encode_utterance",
                left: features.shape().to_vec(),
                right: vec![rows, self.config.feature_dim],
            });
        }
        Ok((rows, cols))
    }

    /// Encoder on a training tape: returns the `T × encoder_proj` output.
    pub fn encode_on_tape(&self, tape: &mut Tape, features: &Tensor) -> Result<Var> {
        let (rows, cols) = self.feature_dims(features)?;
        let state = self.initial_encoder_state();
        let mut et = self.new_encoder_tape(tape, &state);
        let mut outs = Vec::new();
        for r in 0..rows {
            let x = tape.vector(features.values()[r * cols..(r + 1) * cols].to_vec());
            if let Some(e) = self.encoder_frame(tape, &mut et, x)? {
                outs.push(e);
            }
        }
        if let Some(e) = self.encoder_flush(tape, &mut et)? {
            outs.push(e);
        }
        tape.stack_rows(&outs)
    }

    // ----- prediction network ------------------------------------------

    pub fn initial_prediction_state(&self) -> PredictionState {
        PredictionState {
            layers: (0..self.config.pred_layers)
                .map(|_| LayerState::zeros(self.config.pred_hidden))
                .collect(),
        }
    }

    fn embed_row(&self, label: usize) -> Result<usize> {
        let c = &self.config;
        if label == c.blank() {
            return Err(Error::Contract("blank cannot be fed to the prediction network".into()));
        }
        if label == c.start() {
            Ok(c.vocab_size)
        } else if label < c.vocab_size {
            Ok(label)
        } else {
            Err(Error::Contract(format!("label {label} outside vocabulary")))
        }
    }

    fn predict_on(&self, tape: &mut Tape, label: usize, layers: &mut [LayerVars]) -> Result<Var> {
        let row = self.embed_row(label)?;
        let table = tape.param(&self.store, self.embed);
        let at: Vec<(usize, usize)> = (0..self.config.pred_proj).map(|j| (row, j)).collect();
        let mut h = tape.select(table, &at)?;
        for (layer, st) in self.prediction.iter().zip(layers.iter_mut()) {
            h = layer.step(tape, &self.store, h, st)?;
        }
        Ok(h)
    }

    /// Advances the prediction network by one label (or the start sentinel).
    pub fn predict_step(&self, prev_label: usize, state: &PredictionState) -> Result<(Vec<f64>, PredictionState)> {
        let mut tape = Tape::new();
        let mut layers: Vec<LayerVars> = state.layers.iter().map(|s| LayerVars::from_state(&mut tape, s)).collect();
        let out = self.predict_on(&mut tape, prev_label, &mut layers)?;
        let next = PredictionState {
            layers: layers.iter().map(|v| v.to_state(&tape)).collect(),
        };
        Ok((tape.value(out).to_vec(), next))
    }

    /// Prediction outputs for contexts `<s>`, `<s> y1`, …, `<s> y1..yU`.
    pub fn predict_on_tape(&self, tape: &mut Tape, targets: &[usize]) -> Result<Var> {
        let state = self.initial_prediction_state();
        let mut layers: Vec<LayerVars> = state.layers.iter().map(|s| LayerVars::from_state(tape, s)).collect();
        let mut outs = Vec::with_capacity(targets.len() + 1);
        outs.push(self.predict_on(tape, self.config.start(), &mut layers)?);
        for &y in targets {
            outs.push(self.predict_on(tape, y, &mut layers)?);
        }
        tape.stack_rows(&outs)
    }

    // ----- joint network -----------------------------------------------

    /// Encoder contribution to the joint pre-activation.
    pub fn joint_enc_on_tape(&self, tape: &mut Tape, enc: Var) -> Result<Var> {
        self.joint_enc.forward(tape, &self.store, enc)
    }

    /// Prediction-side contribution to the joint pre-activation, including
    /// the ESF/ECF fusion when attached. `lm_logits` has one row per
    /// prediction row.
    pub fn joint_pred_on_tape(&self, tape: &mut Tape, pred: Var, lm_logits: Option<Var>, beta: f64) -> Result<Var> {
        match &self.attachment {
            Attachment::None | Attachment::Cold(_) => self.joint_pred.forward(tape, &self.store, pred),
            Attachment::EarlyCold(p) => {
                let lm = lm_logits.ok_or_else(|| missing_lm("early cold fusion"))?;
                let fused = early_cold_fuse(tape, &self.store, p, pred, lm)?;
                self.joint_pred.forward(tape, &self.store, fused)
            }
            Attachment::EarlyShallow(p) => {
                let lm = lm_logits.ok_or_else(|| missing_lm("early shallow fusion"))?;
                let base = self.joint_pred.forward(tape, &self.store, pred)?;
                let fused = early_shallow_fuse(tape, &self.store, p, pred, lm, beta)?;
                let extra = p.back.forward(tape, &self.store, fused)?;
                tape.add(base, extra)
            }
        }
    }

    /// From pre-activation rows to log-probabilities over `V + 1`.
    /// Cold fusion needs the LM logits aligned row for row.
    pub fn joint_output_on_tape(&self, tape: &mut Tape, pre: Var, lm_rows: Option<Var>) -> Result<Var> {
        let s = tape.tanh(pre)?;
        match (&self.attachment, &self.joint_out) {
            (Attachment::Cold(p), _) => {
                let lm = lm_rows.ok_or_else(|| missing_lm("cold fusion"))?;
                cold_fuse_forward(tape, &self.store, p, s, lm)
            }
            (_, Some(out)) => {
                let logits = out.forward(tape, &self.store, s)?;
                tape.log_softmax_rows(logits)
            }
            (_, None) => Err(Error::Contract("model has no output layer".into())),
        }
    }

    /// Joint pre-activation `W_e·enc + W_p·pred + b` for a plain model.
    pub fn joint_preactivation(&self, enc_t: &[f64], pred_u: &[f64]) -> Result<Vec<f64>> {
        self.check_joint_inputs(enc_t, pred_u)?;
        let mut tape = Tape::new();
        let e = tape.vector(enc_t.to_vec());
        let p = tape.vector(pred_u.to_vec());
        let es = self.joint_enc.forward(&mut tape, &self.store, e)?;
        let ps = self.joint_pred.forward(&mut tape, &self.store, p)?;
        let pre = tape.add(es, ps)?;
        Ok(tape.value(pre).to_vec())
    }

    /// Output logits (before softmax) of the plain joint network.
    pub fn joint(&self, enc_t: &[f64], pred_u: &[f64]) -> Result<Vec<f64>> {
        let out = self
            .joint_out
            .as_ref()
            .ok_or_else(|| Error::Contract("cold-fused models have no plain joint output".into()))?;
        let pre = self.joint_preactivation(enc_t, pred_u)?;
        let mut tape = Tape::new();
        let pre = tape.vector(pre);
        let s = tape.tanh(pre)?;
        let logits = out.forward(&mut tape, &self.store, s)?;
        Ok(tape.value(logits).to_vec())
    }

    fn check_joint_inputs(&self, enc_t: &[f64], pred_u: &[f64]) -> Result<()> {
        if enc_t.len() != self.config.encoder_proj || pred_u.len() != self.config.pred_proj {
            return Err(Error::Shape {
                op: "joint",
                left: vec![enc_t.len(), pred_u.len()],
                right: vec![self.config.encoder_proj, self.config.pred_proj],
            });
        }
        Ok(())
    }

    /// Encoder side of the joint for one frame (decoder cache).
    pub fn enc_side(&self, enc_t: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let e = tape.vector(enc_t.to_vec());
        let v = self.joint_enc_on_tape(&mut tape, e)?;
        Ok(tape.value(v).to_vec())
    }

    /// Prediction side of the joint for one context (decoder cache).
    pub fn pred_side(&self, pred_out: &[f64], lm_logits: Option<&[f64]>, beta: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.vector(pred_out.to_vec());
        let lm = lm_logits.map(|l| tape.vector(l.to_vec()));
        let v = self.joint_pred_on_tape(&mut tape, p, lm, beta)?;
        Ok(tape.value(v).to_vec())
    }

    /// Log-distribution over `V + 1` for one lattice node.
    pub fn output_log_probs(&self, enc_side: &[f64], pred_side: &[f64], lm_logits: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let e = tape.vector(enc_side.to_vec());
        let p = tape.vector(pred_side.to_vec());
        let pre = tape.add(e, p)?;
        let lm = lm_logits.map(|l| tape.vector(l.to_vec()));
        let v = self.joint_output_on_tape(&mut tape, pre, lm)?;
        Ok(tape.value(v).to_vec())
    }

    // ----- loss --------------------------------------------------------

    /// Lattice log-probabilities for a whole utterance:
    /// `(T·(U+1)) × (V+1)`. Returns the node and the frame count.
    pub fn lattice_on_tape(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        targets: &[usize],
        lm_logits: Option<&[Vec<f64>]>,
        beta: f64,
    ) -> Result<(Var, usize)> {
        if let Some(&y) = targets.iter().find(|&&y| y >= self.config.vocab_size) {
            return Err(Error::Contract(format!("target symbol {y} is blank or out of range")));
        }
        let enc = self.encode_on_tape(tape, features)?;
        let frames = tape.shape(enc)[0];
        let pred = self.predict_on_tape(tape, targets)?;
        let u1 = targets.len() + 1;
        let lm = match lm_logits {
            Some(rows) => {
                if rows.len() != u1 || rows.iter().any(|r| r.len() != self.config.vocab_size) {
                    return Err(Error::Shape {
                        op: "lm logits",
                        left: vec![rows.len(), rows.first().map_or(0, |r| r.len())],
                        right: vec![u1, self.config.vocab_size],
                    });
                }
                Some(tape.matrix(u1, self.config.vocab_size, rows.concat()))
            }
            None => None,
        };
        if self.needs_lm() && lm.is_none() {
            return Err(missing_lm(self.mode().as_str()));
        }
        let es = self.joint_enc_on_tape(tape, enc)?;
        let ps = self.joint_pred_on_tape(tape, pred, lm, beta)?;
        let pre = tape.pair_sum(es, ps)?;
        let lm_rows = match (&self.attachment, lm) {
            (Attachment::Cold(_), Some(lm)) => {
                let rows: Vec<usize> = (0..frames).flat_map(|_| 0..u1).collect();
                Some(tape.gather_rows(lm, &rows)?)
            }
            _ => None,
        };
        let lp = self.joint_output_on_tape(tape, pre, lm_rows)?;
        Ok((lp, frames))
    }

    /// `−log P(targets | features)` on a tape, differentiable with respect to
    /// every trainable parameter.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        targets: &[usize],
        lm_logits: Option<&[Vec<f64>]>,
        beta: f64,
    ) -> Result<Var> {
        let (lp, frames) = self.lattice_on_tape(tape, features, targets, lm_logits, beta)?;
        transducer_nll(tape, lp, frames, targets, self.blank())
    }

    /// Loss value and gradients, accumulated into the model's parameters.
    pub fn rnnt_loss(
        &mut self,
        features: &Tensor,
        targets: &[usize],
        lm_logits: Option<&[Vec<f64>]>,
        beta: f64,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss_on_tape(&mut tape, features, targets, lm_logits, beta)?;
        let grads = tape.backward(loss)?;
        self.store.accumulate(&grads);
        Ok(tape.scalar_value(loss))
    }
}

fn missing_lm(what: &str) -> Error {
    Error::Contract(format!("{what} requires LM logits"))
}
