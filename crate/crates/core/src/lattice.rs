//! Forward-backward over the transducer alignment lattice.
//!
//! Node `(t, u)` holds the output distribution after `t` encoder frames and
//! `u` emitted labels. A blank moves `t → t+1`; emitting `y[u]` moves
//! `u → u+1`. Every complete alignment ends with a blank out of
//! `(T-1, U)`.

use crate::autodiff::{log_add, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LossLattice {
    pub frames: usize,
    pub target_len: usize,
    /// `T × (U+1)` forward log-probabilities of reaching each node.
    pub log_alpha: Vec<f64>,
    /// `T × (U+1)` log-probabilities of completing from each node.
    pub log_beta: Vec<f64>,
    pub log_likelihood: f64,
}

fn check(log_probs: &[f64], frames: usize, targets: &[usize], width: usize, blank: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::EmptyUtterance);
    }
    if blank >= width {
        return Err(Error::Contract(format!("blank id {blank} outside width {width}")));
    }
    if let Some(&y) = targets.iter().find(|&&y| y == blank || y >= width) {
        return Err(Error::Contract(format!("target symbol {y} is blank or out of range")));
    }
    let expected = frames * (targets.len() + 1) * width;
    if log_probs.len() != expected {
        return Err(Error::Shape {
            op: "transducer lattice",
            left: vec![frames, targets.len() + 1, width],
            right: vec![log_probs.len()],
        });
    }
    Ok(())
}

impl LossLattice {
    /// Runs both recursions. `log_probs` is `(T·(U+1)) × width`, row-major,
    /// with node `(t, u)` at row `t·(U+1) + u`.
    pub fn compute(log_probs: &[f64], frames: usize, targets: &[usize], width: usize, blank: usize) -> Result<Self> {
        check(log_probs, frames, targets, width, blank)?;
        let u1 = targets.len() + 1;
        let lp = |t: usize, u: usize, k: usize| log_probs[(t * u1 + u) * width + k];
        let at = |t: usize, u: usize| t * u1 + u;

        let mut alpha = vec![f64::NEG_INFINITY; frames * u1];
        alpha[0] = 0.0;
        for t in 0..frames {
            for u in 0..u1 {
                if t == 0 && u == 0 {
                    continue;
                }
                let mut a = f64::NEG_INFINITY;
                if t > 0 {
                    a = log_add(a, alpha[at(t - 1, u)] + lp(t - 1, u, blank));
                }
                if u > 0 {
                    a = log_add(a, alpha[at(t, u - 1)] + lp(t, u - 1, targets[u - 1]));
                }
                alpha[at(t, u)] = a;
            }
        }

        let mut beta = vec![f64::NEG_INFINITY; frames * u1];
        for t in (0..frames).rev() {
            for u in (0..u1).rev() {
                let b = if t == frames - 1 && u == u1 - 1 {
                    lp(t, u, blank)
                } else {
                    let mut b = f64::NEG_INFINITY;
                    if t + 1 < frames {
                        b = log_add(b, beta[at(t + 1, u)] + lp(t, u, blank));
                    }
                    if u + 1 < u1 {
                        b = log_add(b, beta[at(t, u + 1)] + lp(t, u, targets[u]));
                    }
                    b
                };
                beta[at(t, u)] = b;
            }
        }

        let log_likelihood = alpha[at(frames - 1, u1 - 1)] + lp(frames - 1, u1 - 1, blank);
        Ok(Self {
            frames,
            target_len: targets.len(),
            log_alpha: alpha,
            log_beta: beta,
            log_likelihood,
        })
    }

    /// d(−log P)/d(log_probs), same layout as the input.
    pub fn nll_grad(&self, log_probs: &[f64], targets: &[usize], width: usize, blank: usize) -> Vec<f64> {
        let (frames, u1) = (self.frames, self.target_len + 1);
        let ll = self.log_likelihood;
        let mut grad = vec![0.0; log_probs.len()];
        if !ll.is_finite() {
            return grad;
        }
        for t in 0..frames {
            for u in 0..u1 {
                let node = t * u1 + u;
                let a = self.log_alpha[node];
                if a == f64::NEG_INFINITY {
                    continue;
                }
                let row = node * width;
                let next_blank = if t + 1 < frames {
                    self.log_beta[node + u1]
                } else if u + 1 == u1 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                };
                grad[row + blank] = -(a + log_probs[row + blank] + next_blank - ll).exp();
                if u + 1 < u1 {
                    let y = targets[u];
                    grad[row + y] = -(a + log_probs[row + y] + self.log_beta[node + 1] - ll).exp();
                }
            }
        }
        grad
    }
}

/// Negative log-likelihood of `targets` given the lattice of per-node
/// log-distributions on the tape (`(T·(U+1)) × width`).
pub fn transducer_nll(tape: &mut Tape, log_probs: Var, frames: usize, targets: &[usize], blank: usize) -> Result<Var> {
    let shape = tape.shape(log_probs).to_vec();
    let width = *shape.last().ok_or(Error::NonScalarLoss(shape.clone()))?;
    let values = tape.value(log_probs).to_vec();
    let lattice = LossLattice::compute(&values, frames, targets, width, blank)?;
    let grad = lattice.nll_grad(&values, targets, width, blank);
    tape.fixed_scalar(log_probs, -lattice.log_likelihood, grad)
}
