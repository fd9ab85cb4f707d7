//! Layers built from tape ops: affine maps and the LSTM cell.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{ParamId, ParamStore};

/// `y = x·W + b` with `W` stored input-major (`[input, output]`).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let scale = 1.0 / (input as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), vec![input, output], scale, rng)?;
        let bias = if bias {
            Some(store.add_filled(format!("{name}.bias"), vec![output], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_values(&self) -> usize {
        self.input * self.output + if self.bias.is_some() { self.output } else { 0 }
    }
}

/// Weights of one LSTM cell; gate blocks are laid out `[i | f | g | o]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Tape handles for an [`LstmCell`]'s weights.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub bias: Var,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let scale = 1.0 / (hidden as f64).sqrt();
        let wx = store.add_uniform(format!("{name}.wx"), vec![input, 4 * hidden], scale, rng)?;
        let wh = store.add_uniform(format!("{name}.wh"), vec![hidden, 4 * hidden], scale, rng)?;
        let mut b = vec![0.0; 4 * hidden];
        // forget-gate bias starts open
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        let bias = store.add(
            format!("{name}.bias"),
            crate::tensor::Tensor::vector(b),
            true,
        )?;
        Ok(Self {
            wx,
            wh,
            bias,
            input,
            hidden,
        })
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> LstmVars {
        LstmVars {
            wx: tape.param(store, self.wx),
            wh: tape.param(store, self.wh),
            bias: tape.param(store, self.bias),
            hidden: self.hidden,
        }
    }

    pub fn num_values(&self) -> usize {
        (self.input + self.hidden + 1) * 4 * self.hidden
    }
}

/// One LSTM step: `i, f, o = σ(·)`, `g = tanh(·)`, `c' = f⊙c + i⊙g`,
/// `h' = o⊙tanh(c')`. Returns `(h', c')`.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, p: &LstmVars) -> Result<(Var, Var)> {
    let n = p.hidden;
    if tape.shape(h) != tape.shape(c) || tape.shape(h).last() != Some(&n) {
        return Err(shape_err("lstm_step", tape.shape(h), tape.shape(c)));
    }
    let zx = tape.matmul(x, p.wx)?;
    let zh = tape.matmul(h, p.wh)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, p.bias)?;
    let i = tape.slice_cols(z, 0, n)?;
    let f = tape.slice_cols(z, n, n)?;
    let g = tape.slice_cols(z, 2 * n, n)?;
    let o = tape.slice_cols(z, 3 * n, n)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Per-layer `(h, c)` values carried between steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LayerState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Tape-level state of one layer during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub h: Var,
    pub c: Var,
}

impl LayerVars {
    pub fn from_state(tape: &mut Tape, s: &LayerState) -> Self {
        Self {
            h: tape.vector(s.h.clone()),
            c: tape.vector(s.c.clone()),
        }
    }

    pub fn to_state(self, tape: &Tape) -> LayerState {
        LayerState {
            h: tape.value(self.h).to_vec(),
            c: tape.value(self.c).to_vec(),
        }
    }
}
