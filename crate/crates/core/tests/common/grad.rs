//! Finite-difference checks shared by the gradient and acceptance suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnnt_fusion::autodiff::{Tape, Var};
use rnnt_fusion::fusion::{cold_fuse_forward, early_cold_fuse, early_shallow_fuse, FusionConfig, FusionMode};
use rnnt_fusion::lattice::transducer_nll;
use rnnt_fusion::params::{ParamId, ParamStore};
use rnnt_fusion::rnnt::{Attachment, RnntModel};
use rnnt_fusion::tensor::Tensor;
use rnnt_fusion::Result;

use super::{features, grad_check, random_rows, randomize, tiny_config, tiny_lm};

pub const TOL: f64 = 1e-4;

/// A store of random inputs plus a random weighting that turns any op's
/// output into a scalar.
struct OpCase {
    store: ParamStore,
    ids: Vec<ParamId>,
    weights: Vec<f64>,
}

impl OpCase {
    fn new(shapes: &[Vec<usize>], out_len: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| store.add_uniform(format!("x{i}"), s.clone(), 1.5, rng).unwrap())
            .collect();
        let weights = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self { store, ids, weights }
    }

    fn inputs(&self, tape: &mut Tape) -> Vec<Var> {
        self.ids.iter().map(|&id| tape.param(&self.store, id)).collect()
    }

    fn reduce(&self, tape: &mut Tape, out: Var) -> Result<Var> {
        let shape = tape.shape(out).to_vec();
        let w = tape.constant(&Tensor::new(shape, self.weights.clone())?);
        let prod = tape.mul(out, w)?;
        tape.sum(prod)
    }
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Every differentiable tape op: name, input shapes, output size, op.
pub fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, usize, OpFn)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], 12, |t, x| t.add(x[0], x[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], 12, |t, x| t.sub(x[0], x[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], 12, |t, x| t.mul(x[0], x[1])),
        ("scale", vec![vec![5]], 5, |t, x| t.scale(x[0], -0.7)),
        ("sigmoid", vec![vec![2, 5]], 10, |t, x| t.sigmoid(x[0])),
        ("tanh", vec![vec![2, 5]], 10, |t, x| t.tanh(x[0])),
        ("add_row", vec![vec![3, 4], vec![4]], 12, |t, x| t.add_row(x[0], x[1])),
        ("matmul", vec![vec![3, 4], vec![4, 2]], 6, |t, x| t.matmul(x[0], x[1])),
        ("matmul_vec", vec![vec![4], vec![4, 2]], 2, |t, x| t.matmul(x[0], x[1])),
        ("concat_cols", vec![vec![2, 3], vec![2, 2]], 10, |t, x| t.concat_cols(x[0], x[1])),
        ("slice_cols", vec![vec![3, 5]], 6, |t, x| t.slice_cols(x[0], 1, 2)),
        ("gather_rows", vec![vec![3, 2]], 10, |t, x| t.gather_rows(x[0], &[2, 0, 2, 1, 2])),
        ("stack_rows", vec![vec![3], vec![3]], 9, |t, x| t.stack_rows(&[x[0], x[1], x[0]])),
        ("pair_sum", vec![vec![3, 2], vec![2, 2]], 12, |t, x| t.pair_sum(x[0], x[1])),
        ("log_softmax_rows", vec![vec![3, 4]], 12, |t, x| t.log_softmax_rows(x[0])),
        ("select", vec![vec![3, 4]], 4, |t, x| t.select(x[0], &[(0, 1), (2, 3), (0, 1), (1, 0)])),
        ("sum", vec![vec![2, 3]], 1, |t, x| t.sum(x[0])),
        // lattice of T=3 frames, U=2 labels over 4 symbols (blank = 3)
        ("transducer_nll", vec![vec![9, 4]], 1, |t, x| {
            let lp = t.log_softmax_rows(x[0])?;
            transducer_nll(t, lp, 3, &[0, 2], 3)
        }),
    ]
}

/// Worst relative error of one op over `seeds` random instances.
pub fn op_worst(shapes: &[Vec<usize>], out_len: usize, op: OpFn, seeds: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut case = OpCase::new(shapes, out_len, &mut rng);
        let e = grad_check(
            &mut case,
            |c| &mut c.store,
            |c, tape| {
                let xs = c.inputs(tape);
                let out = op(tape, &xs)?;
                c.reduce(tape, out)
            },
            64,
            &mut rng,
        );
        worst = worst.max(e);
    }
    worst
}

/// A randomised model; odd seeds use an LM feature width different from V.
pub fn model(mode: FusionMode, seed: u64, stride: usize) -> (RnntModel, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = 4;
    let fusion = FusionConfig {
        lm_feature_dim: if seed % 2 == 0 { v } else { 3 },
        ..FusionConfig::default()
    };
    let mut m = if mode == FusionMode::EarlyShallow {
        let mut m = RnntModel::new(tiny_config(v, stride), FusionMode::None, &fusion, &mut rng).unwrap();
        m.attach_early_shallow(&mut rng).unwrap();
        m
    } else {
        RnntModel::new(tiny_config(v, stride), mode, &fusion, &mut rng).unwrap()
    };
    randomize(&mut m.store, 0.6, &mut rng);
    (m, rng)
}

/// Worst relative error of the full transducer loss (through any fusion
/// attachment) over `instances` random models and utterances.
pub fn model_worst(mode: FusionMode, instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let stride = 1 + (seed as usize % 2);
        let (mut m, mut rng) = model(mode, seed, stride);
        let frames = rng.gen_range(2..=5);
        let x = features(frames, 3, &mut rng);
        let u = rng.gen_range(0..=3);
        let y: Vec<usize> = (0..u).map(|_| rng.gen_range(0..4)).collect();
        let lm = mode.uses_lm().then(|| random_rows(u + 1, 4, 3.0, &mut rng));
        let beta = rng.gen_range(0.1..1.0);
        let e = grad_check(
            &mut m,
            |m| &mut m.store,
            |m, tape| m.loss_on_tape(tape, &x, &y, lm.as_deref(), beta),
            6,
            &mut rng,
        );
        worst = worst.max(e);
    }
    worst
}

/// Worst relative errors of the CF, ECF and ESF layers on their own.
pub fn fusion_layers_worst(instances: u64) -> [f64; 3] {
    let mut worst = [0.0f64; 3];
    for seed in 0..instances {
        let (mut m, mut rng) = model(FusionMode::Cold, seed, 1);
        let s = random_rows(1, 5, 1.0, &mut rng).concat();
        let l = random_rows(1, 4, 3.0, &mut rng).concat();
        let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = grad_check(
            &mut m,
            |m| &mut m.store,
            |m, tape| {
                let Attachment::Cold(p) = m.attachment() else { unreachable!() };
                let s = tape.vector(s.clone());
                let l = tape.vector(l.clone());
                let lp = cold_fuse_forward(tape, &m.store, p, s, l)?;
                let w = tape.vector(w.clone());
                let prod = tape.mul(lp, w)?;
                tape.sum(prod)
            },
            8,
            &mut rng,
        );
        worst[0] = worst[0].max(e);

        let (mut m, mut rng) = model(FusionMode::EarlyCold, seed, 1);
        let h = random_rows(1, 3, 1.0, &mut rng).concat();
        let e = grad_check(
            &mut m,
            |m| &mut m.store,
            |m, tape| {
                let Attachment::EarlyCold(p) = m.attachment() else { unreachable!() };
                let h = tape.vector(h.clone());
                let l = tape.vector(l.clone());
                let f = early_cold_fuse(tape, &m.store, p, h, l)?;
                let f = tape.tanh(f)?;
                tape.sum(f)
            },
            8,
            &mut rng,
        );
        worst[1] = worst[1].max(e);

        let (mut m, mut rng) = model(FusionMode::EarlyShallow, seed, 1);
        let e = grad_check(
            &mut m,
            |m| &mut m.store,
            |m, tape| {
                let Attachment::EarlyShallow(p) = m.attachment() else { unreachable!() };
                let h = tape.vector(h.clone());
                let l = tape.vector(l.clone());
                let f = early_shallow_fuse(tape, &m.store, p, h, l, 0.4)?;
                let f = tape.tanh(f)?;
                tape.sum(f)
            },
            8,
            &mut rng,
        );
        worst[2] = worst[2].max(e);
    }
    worst
}

/// Worst relative error of the LM's teacher-forced loss.
pub fn lm_worst(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lm = tiny_lm(4, &mut rng);
        let n = rng.gen_range(0..5);
        let sentence: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let e = grad_check(&mut lm, |l| &mut l.store, |l, tape| l.loss_on_tape(tape, &sentence, 3), 6, &mut rng);
        worst = worst.max(e);
    }
    worst
}
