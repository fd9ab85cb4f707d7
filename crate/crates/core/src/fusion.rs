//! Language-model fusion: shallow (SF), early shallow (ESF), cold (CF) and
//! early cold (ECF).
//!
//! The LM never sees the blank symbol. Wherever its scores meet the
//! transducer's, the blank coordinate comes from the transducer alone, and
//! the LM state only advances on non-blank emissions.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{log_sum_exp, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum FusionMode {
    #[default]
    None,
    Shallow,
    EarlyShallow,
    Cold,
    EarlyCold,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::None,
        FusionMode::Shallow,
        FusionMode::EarlyShallow,
        FusionMode::Cold,
        FusionMode::EarlyCold,
    ];

    /// Whether decoding consults the LM.
    pub fn uses_lm(self) -> bool {
        self != FusionMode::None
    }

    /// Whether the LM is part of the training graph from the start.
    pub fn trains_with_lm(self) -> bool {
        matches!(self, FusionMode::Cold | FusionMode::EarlyCold)
    }

    /// Whether LM weight and blank penalty are tuned by sweeping.
    pub fn needs_sweep(self) -> bool {
        matches!(self, FusionMode::Shallow | FusionMode::EarlyShallow)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::None => "none",
            FusionMode::Shallow => "sf",
            FusionMode::EarlyShallow => "esf",
            FusionMode::Cold => "cf",
            FusionMode::EarlyCold => "ecf",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "baseline" => Ok(FusionMode::None),
            "sf" | "shallow" => Ok(FusionMode::Shallow),
            "esf" | "early-shallow" => Ok(FusionMode::EarlyShallow),
            "cf" | "cold" => Ok(FusionMode::Cold),
            "ecf" | "early-cold" => Ok(FusionMode::EarlyCold),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Shapes and initialisation of the trainable fusion layers.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    /// Width of `h^LM`, the projected LM feature (and of the gate).
    pub lm_feature_dim: usize,
    /// When `lm_feature_dim` equals the vocabulary size, start the LM
    /// feature path as a scaled identity so that each LM logit initially
    /// feeds its own output symbol.
    pub identity_init: bool,
    /// Diagonal of the initial LM-logit projection.
    pub lm_input_scale: f64,
    /// Diagonal of the initial LM-feature → output-logit block (CF).
    pub lm_output_scale: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            lm_feature_dim: 48,
            identity_init: true,
            lm_input_scale: 0.5,
            lm_output_scale: 4.0,
        }
    }
}

/// A score vector over `V` symbols followed by blank.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedDistribution {
    pub log_scores: Vec<f64>,
    pub normalized: bool,
}

impl FusedDistribution {
    pub fn blank(&self) -> f64 {
        *self.log_scores.last().expect("non-empty distribution")
    }
}

/// Shallow fusion of one output distribution.
///
/// Non-blank scores are `log P_rnnt(y) + β·log P_lm(y)`. The blank keeps
/// its transducer log-probability. With `renormalize`, the non-blank block
/// is rescaled to carry mass `1 − P_rnnt(blank)`, making the result a proper
/// distribution; `β = 0` returns the input unchanged.
pub fn shallow_fuse(
    rnnt_log_probs: &[f64],
    lm_log_probs: &[f64],
    beta: f64,
    renormalize: bool,
) -> Result<FusedDistribution> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Config(format!("LM weight must be finite and non-negative, got {beta}")));
    }
    if rnnt_log_probs.len() != lm_log_probs.len() + 1 || lm_log_probs.is_empty() {
        return Err(shape_err("shallow_fuse", &[rnnt_log_probs.len()], &[lm_log_probs.len()]));
    }
    if beta == 0.0 {
        return Ok(FusedDistribution {
            log_scores: rnnt_log_probs.to_vec(),
            normalized: true,
        });
    }
    let v = lm_log_probs.len();
    let blank = rnnt_log_probs[v];
    let mut out: Vec<f64> = rnnt_log_probs[..v]
        .iter()
        .zip(lm_log_probs)
        .map(|(r, l)| r + beta * l)
        .collect();
    if renormalize {
        let z = log_sum_exp(&out);
        let mass = (-blank.exp_m1()).ln();
        if z.is_finite() {
            out.iter_mut().for_each(|s| *s = *s - z + mass);
        } else {
            out.iter_mut().for_each(|s| *s = f64::NEG_INFINITY);
        }
    }
    out.push(blank);
    Ok(FusedDistribution {
        log_scores: out,
        normalized: renormalize,
    })
}

/// ESF attachment: `l^Pred = proj(h^Pred)` over `V+1` symbols and a map of
/// the fused vector into the joint network's hidden pre-activation.
#[derive(Clone, Debug)]
pub struct EarlyShallowParams {
    pub proj: Linear,
    pub back: Linear,
}

/// CF attachment: `h^LM = tanh(lm_proj(l^LM))`, a gate over
/// `[s^jn; h^LM]`, and the output layer over `[s^jn; g⊙h^LM]`.
#[derive(Clone, Debug)]
pub struct ColdFusionParams {
    pub lm_proj: Linear,
    pub gate: Linear,
    pub out: Linear,
}

/// ECF attachment: `h^LM` and a gate over `[h^Pred; h^LM]`.
#[derive(Clone, Debug)]
pub struct EarlyColdParams {
    pub lm_proj: Linear,
    pub gate: Linear,
}

fn lm_projection(
    store: &mut ParamStore,
    name: &str,
    vocab: usize,
    cfg: &FusionConfig,
    rng: &mut impl Rng,
) -> Result<Linear> {
    let lin = Linear::new(store, name, vocab, cfg.lm_feature_dim, true, rng)?;
    if cfg.identity_init && cfg.lm_feature_dim == vocab {
        store.get_mut(lin.weight).tensor = scaled_identity(vocab, vocab, 0, cfg.lm_input_scale);
    }
    Ok(lin)
}

/// `rows × cols` zeros with `scale` on the diagonal starting at `row_offset`.
fn scaled_identity(rows: usize, cols: usize, row_offset: usize, scale: f64) -> Tensor {
    let mut m = vec![0.0; rows * cols];
    for i in 0..cols.min(rows.saturating_sub(row_offset)) {
        m[(row_offset + i) * cols + i] = scale;
    }
    Tensor::from_parts(vec![rows, cols], m)
}

impl EarlyShallowParams {
    /// `proj` starts as the linearised prediction path of the joint network
    /// (`W_pred · W_out`, bias `b_pred · W_out + b_out`); `back` starts at
    /// zero so an un-tuned ESF model decodes exactly like its base model.
    pub fn new(
        store: &mut ParamStore,
        pred_proj: usize,
        joint_hidden: usize,
        vocab: usize,
        init_from: Option<(&Tensor, &Tensor, &Tensor, &Tensor)>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let proj = Linear::new(store, "fusion.esf_proj", pred_proj, vocab + 1, true, rng)?;
        let back = Linear::new(store, "fusion.esf_back", vocab + 1, joint_hidden, false, rng)?;
        store.get_mut(back.weight).tensor.values_mut().iter_mut().for_each(|x| *x = 0.0);
        if let Some((w_pred, b_pred, w_out, b_out)) = init_from {
            let (w, b) = compose_linear(w_pred, b_pred, w_out, b_out)?;
            store.get_mut(proj.weight).tensor = w;
            store.get_mut(proj.bias.expect("bias")).tensor = b;
        }
        Ok(Self { proj, back })
    }
}

/// `(x·W1 + b1)·W2 + b2` folded into a single affine map.
fn compose_linear(w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<(Tensor, Tensor)> {
    let (i, h) = w1.rows_cols();
    let (h2, o) = w2.rows_cols();
    if h != h2 || b1.len() != h || b2.len() != o {
        return Err(shape_err("compose_linear", w1.shape(), w2.shape()));
    }
    let (a, bm) = (w1.values(), w2.values());
    let mut w = vec![0.0; i * o];
    for r in 0..i {
        for k in 0..h {
            let x = a[r * h + k];
            for c in 0..o {
                w[r * o + c] += x * bm[k * o + c];
            }
        }
    }
    let mut b = b2.values().to_vec();
    for k in 0..h {
        for c in 0..o {
            b[c] += b1.values()[k] * bm[k * o + c];
        }
    }
    Ok((Tensor::from_parts(vec![i, o], w), Tensor::from_parts(vec![o], b)))
}

impl ColdFusionParams {
    pub fn new(
        store: &mut ParamStore,
        joint_hidden: usize,
        vocab: usize,
        cfg: &FusionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hl = cfg.lm_feature_dim;
        let lm_proj = lm_projection(store, "fusion.lm_proj", vocab, cfg, rng)?;
        let gate = Linear::new(store, "fusion.gate", joint_hidden + hl, hl, true, rng)?;
        let out = Linear::new(store, "fusion.out", joint_hidden + hl, vocab + 1, true, rng)?;
        if cfg.identity_init && hl == vocab {
            let w = store.get_mut(out.weight).tensor.values_mut();
            let cols = vocab + 1;
            for r in 0..hl {
                for c in 0..cols {
                    w[(joint_hidden + r) * cols + c] = if r == c { cfg.lm_output_scale } else { 0.0 };
                }
            }
        }
        Ok(Self { lm_proj, gate, out })
    }
}

impl EarlyColdParams {
    pub fn new(
        store: &mut ParamStore,
        pred_proj: usize,
        vocab: usize,
        cfg: &FusionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hl = cfg.lm_feature_dim;
        let lm_proj = lm_projection(store, "fusion.lm_proj", vocab, cfg, rng)?;
        let gate = Linear::new(store, "fusion.gate", pred_proj + hl, hl, true, rng)?;
        Ok(Self { lm_proj, gate })
    }
}

/// `h^LM = tanh(lm_proj(l^LM))`.
pub fn lm_features(tape: &mut Tape, store: &ParamStore, lm_proj: &Linear, lm_logits: Var) -> Result<Var> {
    let z = lm_proj.forward(tape, store, lm_logits)?;
    tape.tanh(z)
}

/// Fine-grained gate `g = σ(W[left; h^LM] + b)`, returned together with
/// the gated concatenation `[left; g⊙h^LM]`.
pub fn gated_concat(
    tape: &mut Tape,
    store: &ParamStore,
    gate: &Linear,
    left: Var,
    h_lm: Var,
) -> Result<(Var, Var)> {
    let joined = tape.concat_cols(left, h_lm)?;
    let z = gate.forward(tape, store, joined)?;
    let g = tape.sigmoid(z)?;
    let gh = tape.mul(g, h_lm)?;
    let fused = tape.concat_cols(left, gh)?;
    Ok((g, fused))
}

/// Appends a zero blank coordinate to LM logits (vector or row matrix).
fn with_blank_column(tape: &mut Tape, lm_logits: Var) -> Result<Var> {
    let shape = tape.shape(lm_logits).to_vec();
    let zeros = match shape.as_slice() {
        [_] => tape.vector(vec![0.0]),
        [r, _] => tape.matrix(*r, 1, vec![0.0; *r]),
        _ => return Err(shape_err("with_blank_column", &shape, &[])),
    };
    tape.concat_cols(lm_logits, zeros)
}

/// ESF: `h^ESF = proj(h^Pred) + β·[l^LM; 0]`.
pub fn early_shallow_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EarlyShallowParams,
    pred_hidden: Var,
    lm_logits: Var,
    beta: f64,
) -> Result<Var> {
    let l_pred = params.proj.forward(tape, store, pred_hidden)?;
    let lm = with_blank_column(tape, lm_logits)?;
    if tape.shape(lm) != tape.shape(l_pred) {
        return Err(shape_err("early_shallow_fuse", tape.shape(l_pred), tape.shape(lm)));
    }
    let lm = tape.scale(lm, beta)?;
    tape.add(l_pred, lm)
}

/// CF: returns log-probabilities `log softmax(out([s^jn; g⊙h^LM]))`.
pub fn cold_fuse_forward(
    tape: &mut Tape,
    store: &ParamStore,
    params: &ColdFusionParams,
    joint_state: Var,
    lm_logits: Var,
) -> Result<Var> {
    let h_lm = lm_features(tape, store, &params.lm_proj, lm_logits)?;
    if tape.shape(h_lm).len() != tape.shape(joint_state).len() {
        return Err(shape_err("cold_fuse_forward", tape.shape(joint_state), tape.shape(h_lm)));
    }
    let (_, fused) = gated_concat(tape, store, &params.gate, joint_state, h_lm)?;
    let r = params.out.forward(tape, store, fused)?;
    tape.log_softmax_rows(r)
}

/// ECF: returns `h^ECF = [h^Pred; g⊙h^LM]`.
pub fn early_cold_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    params: &EarlyColdParams,
    pred_hidden: Var,
    lm_logits: Var,
) -> Result<Var> {
    let h_lm = lm_features(tape, store, &params.lm_proj, lm_logits)?;
    let (_, fused) = gated_concat(tape, store, &params.gate, pred_hidden, h_lm)?;
    Ok(fused)
}
