#![allow(dead_code)]

pub mod grad;

use rand::Rng;
use rnnt_fusion::autodiff::{Tape, Var};
use rnnt_fusion::lm::{LmConfig, RnnLm};
use rnnt_fusion::autodiff::{log_softmax, log_sum_exp};
use rnnt_fusion::params::ParamStore;
use rnnt_fusion::rnnt::RnntModel;
use rnnt_fusion::rnnt::RnntConfig;
use rnnt_fusion::tensor::Tensor;
use rnnt_fusion::Result;

pub fn tiny_config(vocab_size: usize, stride: usize) -> RnntConfig {
    RnntConfig {
        feature_dim: 3,
        encoder_layers: 2,
        encoder_hidden: 4,
        encoder_proj: 3,
        stack_after_layer: 1,
        stack_stride: stride,
        pred_layers: 1,
        pred_hidden: 4,
        pred_proj: 3,
        joint_hidden: 5,
        vocab_size,
    }
}

pub fn tiny_lm(vocab_size: usize, rng: &mut impl Rng) -> RnnLm {
    let mut lm = RnnLm::new(
        LmConfig {
            embed_dim: 3,
            layers: 1,
            hidden: 4,
            vocab_size,
        },
        rng,
    )
    .unwrap();
    randomize(&mut lm.store, 0.8, rng);
    lm
}

/// Overwrites every parameter with uniform values in `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore, scale: f64, rng: &mut impl Rng) {
    for p in store.iter_mut() {
        for v in p.tensor.values_mut() {
            *v = rng.gen_range(-scale..=scale);
        }
    }
}

pub fn features(frames: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(frames, dim, (0..frames * dim).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

pub fn random_rows(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..=scale)).collect())
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between backprop and central differences over up
/// to `per_param` random entries of every trainable parameter.
pub fn grad_check<M>(
    m: &mut M,
    store: impl Fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M, &mut Tape) -> Result<Var>,
    per_param: usize,
    rng: &mut impl Rng,
) -> f64 {
    let mut tape = Tape::new();
    let out = loss(m, &mut tape).unwrap();
    let grads = tape.backward(out).unwrap();
    let names: Vec<(String, usize, bool)> = store(m)
        .iter()
        .map(|p| (p.name.clone(), p.tensor.len(), p.trainable))
        .collect();
    let eval = |m: &M| {
        let mut tape = Tape::new();
        let v = loss(m, &mut tape).unwrap();
        tape.scalar_value(v)
    };
    // five-point stencil: truncation error O(h^4), roundoff about eps·|f|/h
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for (name, len, trainable) in names {
        if !trainable {
            continue;
        }
        let id = store(m).id_of(&name).unwrap();
        let analytic: Vec<f64> = grads
            .get(store(m), id)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let picks: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            (0..per_param).map(|_| rng.gen_range(0..len)).collect()
        };
        for i in picks {
            let orig = store(m).get(id).tensor.values()[i];
            let mut at = |d: f64| {
                store(m).get_mut(id).tensor.values_mut()[i] = orig + d;
                eval(m)
            };
            let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            store(m).get_mut(id).tensor.values_mut()[i] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let e = rel_err(analytic[i], numeric);
            if std::env::var_os("GRAD_DEBUG").is_some() && e > 1e-5 {
                eprintln!("{name}[{i}] analytic {:e} numeric {:e}", analytic[i], numeric);
            }
            assert!(e.is_finite(), "{name}[{i}]");
            worst = worst.max(e);
        }
    }
    worst
}

/// Every alignment as the list of labels emitted before each frame's blank.
pub fn alignments(frames: usize, labels: usize, cap: usize) -> Vec<Vec<usize>> {
    fn rec(t: usize, left: usize, cap: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if t == 0 {
            if left == 0 {
                out.push(cur.clone());
            }
            return;
        }
        for c in 0..=left.min(cap) {
            cur.push(c);
            rec(t - 1, left - c, cap, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(frames, labels, cap, &mut Vec::new(), &mut out);
    out
}

/// Exact label-sequence scores of a plain model: the log-sum over every
/// alignment with at most `cap` labels per frame.
pub fn exact_scores(model: &RnntModel, enc: &[Vec<f64>], cap: usize) -> Vec<(Vec<usize>, f64)> {
    let v = model.config.vocab_size;
    let blank = model.blank();
    let t = enc.len();
    let mut out = Vec::new();
    let mut seqs: Vec<Vec<usize>> = vec![vec![]];
    for len in 0..=t * cap {
        for y in &seqs {
            // prediction outputs after start, y0, ..., y_{n-1}
            let mut preds = Vec::new();
            let mut state = model.initial_prediction_state();
            for &tok in std::iter::once(&model.config.start()).chain(y.iter()) {
                let (p, s) = model.predict_step(tok, &state).unwrap();
                preds.push(p);
                state = s;
            }
            let lp = |frame: usize, u: usize| log_softmax(&model.joint(&enc[frame], &preds[u]).unwrap());
            let scores: Vec<f64> = alignments(t, len, cap)
                .iter()
                .map(|counts| {
                    let mut s = 0.0;
                    let mut pos = 0;
                    for (frame, &c) in counts.iter().enumerate() {
                        for _ in 0..c {
                            s += lp(frame, pos)[y[pos]];
                            pos += 1;
                        }
                        s += lp(frame, pos)[blank];
                    }
                    s
                })
                .collect();
            out.push((y.clone(), log_sum_exp(&scores)));
        }
        seqs = seqs
            .iter()
            .flat_map(|y| {
                (0..v).map(move |k| {
                    let mut z = y.clone();
                    z.push(k);
                    z
                })
            })
            .collect();
    }
    out
}


/// Exhaustive search over edit scripts: `(errors, substitutions, insertions,
/// deletions)` with the fewest errors and, among those, the most
/// substitutions.
pub fn brute_edit(hyp: &[u8], reference: &[u8]) -> (usize, usize, usize, usize) {
    match (hyp.split_first(), reference.split_first()) {
        (None, None) => (0, 0, 0, 0),
        (Some(_), None) => (hyp.len(), 0, hyp.len(), 0),
        (None, Some(_)) => (reference.len(), 0, 0, reference.len()),
        (Some((h, hs)), Some((r, rs))) => {
            let mut options = Vec::new();
            let d = brute_edit(hs, rs);
            options.push(if h == r { d } else { (d.0 + 1, d.1 + 1, d.2, d.3) });
            let i = brute_edit(hs, reference);
            options.push((i.0 + 1, i.1, i.2 + 1, i.3));
            let del = brute_edit(hyp, rs);
            options.push((del.0 + 1, del.1, del.2, del.3 + 1));
            options.into_iter().min_by_key(|c| (c.0, usize::MAX - c.1)).unwrap()
        }
    }
}
