mod common;

use common::{features, randomize, tiny_config, tiny_lm};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnnt_fusion::autodiff::{log_softmax, Tape};
use rnnt_fusion::decoder::{Decoder, DecoderConfig, Hypothesis};
use rnnt_fusion::fusion::{shallow_fuse, FusionConfig, FusionMode};
use rnnt_fusion::lm::{sample_mixture, RnnLm, TextSource};
use rnnt_fusion::rnnt::RnntModel;

const V: usize = 4;

fn plain(seed: u64, stride: usize) -> RnntModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = RnntModel::new(tiny_config(V, stride), FusionMode::None, &FusionConfig::default(), &mut rng).unwrap();
    randomize(&mut m.store, 1.0, &mut rng);
    m
}

/// A model of the given architecture plus a matching LM, both randomised.
fn fused(mode: FusionMode, seed: u64) -> (RnntModel, RnnLm) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lm = tiny_lm(V, &mut rng);
    let mut m = match mode {
        FusionMode::EarlyShallow => {
            let mut m = RnntModel::new(tiny_config(V, 2), FusionMode::None, &FusionConfig::default(), &mut rng).unwrap();
            m.attach_early_shallow(&mut rng).unwrap();
            m
        }
        FusionMode::Shallow => RnntModel::new(tiny_config(V, 2), FusionMode::None, &FusionConfig::default(), &mut rng).unwrap(),
        other => RnntModel::new(tiny_config(V, 2), other, &FusionConfig::default(), &mut rng).unwrap(),
    };
    randomize(&mut m.store, 1.0, &mut rng);
    (m, lm)
}

fn decode_cfg(mode: FusionMode, beam: usize, beta: f64) -> DecoderConfig {
    DecoderConfig {
        beam_size: beam,
        fusion_mode: mode,
        beta,
        max_symbols_per_frame: 2,
        ..DecoderConfig::default()
    }
}

fn replay(lm: &RnnLm, labels: &[usize]) -> rnnt_fusion::lm::LmState {
    let (_, mut state) = lm.start().unwrap();
    for &y in labels {
        state = lm.lm_step(y, &state).unwrap().1;
    }
    state
}

const LM_MODES: [FusionMode; 4] = [FusionMode::Shallow, FusionMode::EarlyShallow, FusionMode::Cold, FusionMode::EarlyCold];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-40.0f64..40.0, 1..12)) {
        let p: Vec<f64> = log_softmax(&xs).iter().map(|l| l.exp()).collect();
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn shallow_fusion_keeps_blank_mass(
        xs in prop::collection::vec(-6.0f64..6.0, V + 1),
        ls in prop::collection::vec(-6.0f64..6.0, V),
        beta in 0.0f64..2.0,
    ) {
        let rnnt = log_softmax(&xs);
        let lm = log_softmax(&ls);
        let f = shallow_fuse(&rnnt, &lm, beta, true).unwrap();
        prop_assert!((f.blank().exp() - rnnt[V].exp()).abs() <= 1e-12);
        let total: f64 = f.log_scores.iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn encoder_streams_bitwise(seed in 0u64..1000, frames in 1usize..9, split in 0usize..9, stride in 1usize..3) {
        let m = plain(seed, stride);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        let x = features(frames, 3, &mut rng);
        let batch = m.encode_utterance(&x).unwrap();
        let split = split.min(frames);
        let mut state = m.initial_encoder_state();
        let mut out = Vec::new();
        for r in 0..frames {
            if r == split {
                // a suspended session resumes from a cloned state
                state = state.clone();
            }
            if let Some(e) = m.encoder_push(&mut state, &x.values()[r * 3..(r + 1) * 3]).unwrap() {
                out.extend(e);
            }
        }
        if let Some(e) = m.encoder_finish(&mut state).unwrap() {
            out.extend(e);
        }
        prop_assert_eq!(out.as_slice(), batch.values());
    }

    #[test]
    fn frame_by_frame_decoding_equals_batch(seed in 0u64..1000, frames in 1usize..8, mode in 0usize..5) {
        let mode = [FusionMode::None, LM_MODES[0], LM_MODES[1], LM_MODES[2], LM_MODES[3]][mode];
        let (m, lm) = fused(mode, seed);
        let cfg = decode_cfg(mode, 3, 0.4);
        let dec = Decoder::new(&m, Some(&lm), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = features(frames, 3, &mut rng);
        let streamed = dec.decode(&x).unwrap();
        let batch = dec.decode_encodings(&m.encode_utterance(&x).unwrap()).unwrap();
        prop_assert_eq!(streamed, batch);
    }

    #[test]
    fn lm_advances_once_per_label(seed in 0u64..1000, frames in 1usize..8, mode in 0usize..4) {
        let mode = LM_MODES[mode];
        let (m, lm) = fused(mode, seed);
        let cfg = decode_cfg(mode, 4, 0.5);
        let dec = Decoder::new(&m, Some(&lm), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = features(frames, 3, &mut rng);
        let r = dec.decode(&x).unwrap();
        for h in &r.nbest {
            let state = h.lm_state.as_ref().expect("fused decoding carries an LM state");
            // one step for the start symbol, then one per emitted label
            prop_assert_eq!(state.steps, 1 + h.labels.len());
            prop_assert_eq!(state, &replay(&lm, &h.labels));
        }
    }

    #[test]
    fn one_blank_per_encoder_frame(seed in 0u64..1000, frames in 1usize..10) {
        let m = plain(seed, 2);
        let cfg = decode_cfg(FusionMode::None, 3, 0.0);
        let dec = Decoder::new(&m, None, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = features(frames, 3, &mut rng);
        let mut session = dec.session().unwrap();
        for r in 0..frames {
            session.push_frame(&x.values()[r * 3..(r + 1) * 3]).unwrap();
        }
        let r = session.finish().unwrap();
        let t = m.config.output_frames(frames);
        for h in &r.nbest {
            prop_assert_eq!(h.blanks(), t);
            prop_assert_eq!(h.emissions.iter().sum::<usize>(), h.labels.len());
            prop_assert!(h.emissions.iter().all(|&c| c <= cfg.max_symbols_per_frame));
        }
    }

    /// Every hypothesis pays the blank penalty once per frame, so it shifts scores without reordering them.
    #[test]
    fn blank_penalty_shifts_every_hypothesis_equally(seed in 0u64..1000, frames in 1usize..8, penalty in -3.0f64..10.0) {
        let (m, lm) = fused(LM_MODES[0], seed);
        let cfg = decode_cfg(LM_MODES[0], 4, 0.4);
        let shifted = DecoderConfig { blank_penalty: penalty, ..cfg.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = features(frames, 3, &mut rng);
        let a = Decoder::new(&m, Some(&lm), &cfg).unwrap().decode(&x).unwrap();
        let b = Decoder::new(&m, Some(&lm), &shifted).unwrap().decode(&x).unwrap();
        let t = m.config.output_frames(frames) as f64;
        prop_assert_eq!(a.nbest.len(), b.nbest.len());
        for (ha, hb) in a.nbest.iter().zip(&b.nbest) {
            prop_assert_eq!(&ha.labels, &hb.labels);
            prop_assert!((ha.log_score - t * penalty - hb.log_score).abs() <= 1e-9);
        }
    }

    #[test]
    fn fused_outputs_are_distributions(seed in 0u64..1000, mode in 0usize..3) {
        let mode = LM_MODES[mode + 1];
        let (m, lm) = fused(mode, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = features(4, 3, &mut rng);
        let y: Vec<usize> = (0..2).map(|_| rng.gen_range(0..V)).collect();
        let lm_rows = lm.prefix_logits(&y).unwrap();
        let mut tape = Tape::new();
        let (lp, _) = m.lattice_on_tape(&mut tape, &x, &y, Some(&lm_rows), 0.7).unwrap();
        for row in tape.value(lp).chunks(V + 1) {
            let total: f64 = row.iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixture_sampling_is_reproducible(seed in 0u64..1000, n in 1usize..40) {
        let sources = vec![
            TextSource { name: "a".into(), weight: 0.7, sentences: vec![vec![0, 1], vec![2]] },
            TextSource { name: "b".into(), weight: 0.3, sentences: vec![vec![3, 3, 1]] },
        ];
        let a = sample_mixture(&sources, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = sample_mixture(&sources, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}

fn best_model_score(dec: &Decoder<'_>, x: &rnnt_fusion::tensor::Tensor) -> (Hypothesis, f64) {
    let r = dec.decode(x).unwrap();
    (r.best.clone(), r.best.log_score)
}

/// Exhaustively checkable instances: the best hypothesis's score never drops
/// when the beam widens.
#[test]
fn wider_beams_never_score_worse() {
    let mut violations = Vec::new();
    for seed in 0..200 {
        let m = plain(seed, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rng.gen_range(1..=3);
        let x = features(frames, 3, &mut rng);
        let mut prev = f64::NEG_INFINITY;
        for beam in 1..=12 {
            let cfg = DecoderConfig {
                beam_size: beam,
                max_symbols_per_frame: 2,
                ..DecoderConfig::default()
            };
            let dec = Decoder::new(&m, None, &cfg).unwrap();
            let (h, score) = best_model_score(&dec, &x);
            if score < prev - 1e-12 {
                violations.push((seed, beam, h.labels, prev, score));
            }
            prev = prev.max(score);
        }
    }
    assert!(violations.is_empty(), "{} violations, first {:?}", violations.len(), violations.first());
}

#[test]
fn shallow_fusion_at_zero_weight_is_the_baseline() {
    for seed in 0..20 {
        let (m, lm) = fused(FusionMode::Shallow, seed);
        let base_cfg = decode_cfg(FusionMode::None, 4, 0.0);
        let sf_cfg = decode_cfg(FusionMode::Shallow, 4, 0.0);
        let base = Decoder::new(&m, None, &base_cfg).unwrap();
        let sf = Decoder::new(&m, Some(&lm), &sf_cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = features(rng.gen_range(1..9), 3, &mut rng);
        let a = base.decode(&x).unwrap();
        let b = sf.decode(&x).unwrap();
        let strip = |r: &rnnt_fusion::decoder::DecodeResult| -> Vec<(Vec<usize>, u64)> {
            r.nbest.iter().map(|h| (h.labels.clone(), h.log_score.to_bits())).collect()
        };
        assert_eq!(strip(&a), strip(&b), "seed {seed}");
    }
}

#[test]
fn swapping_targets_changes_the_loss() {
    let m = plain(3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = features(6, 3, &mut rng);
    let mut tape = Tape::new();
    let a = m.loss_on_tape(&mut tape, &x, &[0, 1, 2], None, 0.0).unwrap();
    let b = m.loss_on_tape(&mut tape, &x, &[1, 0, 2], None, 0.0).unwrap();
    assert_ne!(tape.scalar_value(a), tape.scalar_value(b));
}

#[test]
fn frozen_parameters_survive_updates() {
    let mut m = plain(5, 1);
    let names: Vec<String> = m.store.iter().map(|p| p.name.clone()).step_by(2).collect();
    for n in &names {
        let id = m.store.id_of(n).unwrap();
        m.store.get_mut(id).trainable = false;
    }
    let before: Vec<Vec<u64>> = names
        .iter()
        .map(|n| m.store.by_name(n).unwrap().tensor.values().iter().map(|v| v.to_bits()).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x = features(5, 3, &mut rng);
        m.rnnt_loss(&x, &[1, 2], None, 0.0).unwrap();
        m.store.sgd_step(0.5, 1.0);
    }
    let after: Vec<Vec<u64>> = names
        .iter()
        .map(|n| m.store.by_name(n).unwrap().tensor.values().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(before, after);
}
