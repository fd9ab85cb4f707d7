//! The six-row comparison (Baseline, LPN, SF, CF, ESF, ECF) and its report.
//!
//! Every stage draws from its own ChaCha stream of the seed, so a row can be
//! rerun on its own and reproduce the matrix numbers.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{generate_dataset, Dataset, TailSplit, Utterance};
use crate::decoder::{evaluate_wer, sweep, Decoder, DecoderConfig, SweepResult};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::harness::{fine_tune_esf, train_rnnt, TrainOutcome};
use crate::lm::{train_lm, LmTrainResult, RnnLm, TextSource};
use crate::rnnt::RnntModel;

/// Stream ids of the pipeline stages.
pub mod stage {
    pub const DATA: u64 = 0;
    pub const LM: u64 = 1;
    pub const BASELINE: u64 = 2;
    pub const LPN: u64 = 3;
    pub const CF: u64 = 4;
    pub const ECF: u64 = 5;
    pub const ESF: u64 = 6;
}

pub fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

pub const ROWS: [&str; 6] = ["Baseline", "LPN", "SF", "CF", "ESF", "ECF"];
pub const BASELINE: &str = "Baseline";

pub fn make_data(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    generate_dataset(&cfg.data, &mut stage_rng(seed, stage::DATA))
}

/// Transcribed text plus equal shares of the text-only corpus.
pub fn lm_sources(cfg: &ExperimentConfig, split: &TailSplit) -> Result<Vec<TextSource>> {
    let shards = cfg.lm_text_shards;
    if split.lm_text.len() < shards {
        return Err(Error::Data(format!(
            "{} text-only sentences cannot fill {shards} shards",
            split.lm_text.len()
        )));
    }
    let mut sources = vec![TextSource {
        name: "transcribed".into(),
        sentences: split.paired_train.clone(),
        weight: cfg.lm_transcribed_weight,
    }];
    let size = split.lm_text.len() / shards;
    for k in 0..shards {
        let end = if k + 1 == shards { split.lm_text.len() } else { (k + 1) * size };
        sources.push(TextSource {
            name: format!("text-{k}"),
            sentences: split.lm_text[k * size..end].to_vec(),
            weight: (1.0 - cfg.lm_transcribed_weight) / shards as f64,
        });
    }
    Ok(sources)
}

/// Trains the LM on the mixture, selecting on dev transcripts.
pub fn train_language_model(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<LmTrainResult> {
    let mut rng = stage_rng(seed, stage::LM);
    let lm = RnnLm::new(cfg.lm.clone(), &mut rng)?;
    let sources = lm_sources(cfg, &data.split)?;
    let mut res = train_lm(lm, &sources, &data.split.dev, data.vocab.eos(), &cfg.lm_training, &mut rng)?;
    res.lm.store.set_trainable(false);
    Ok(res)
}

fn stage_of(mode: FusionMode, lpn: bool) -> u64 {
    match mode {
        FusionMode::Cold => stage::CF,
        FusionMode::EarlyCold => stage::ECF,
        FusionMode::EarlyShallow => stage::ESF,
        _ if lpn => stage::LPN,
        _ => stage::BASELINE,
    }
}

/// Trains one transducer architecture (`None`, `Cold` or `EarlyCold`); `lpn`
/// swaps in the deeper prediction network.
pub fn train_transducer(
    cfg: &ExperimentConfig,
    mode: FusionMode,
    lpn: bool,
    data: &Dataset,
    lm: Option<&RnnLm>,
    seed: u64,
) -> Result<TrainOutcome> {
    if matches!(mode, FusionMode::Shallow | FusionMode::EarlyShallow) {
        return Err(Error::Config(format!(
            "{mode} is not trained from scratch; train a baseline and sweep or fine-tune it"
        )));
    }
    let mut rng = stage_rng(seed, stage_of(mode, lpn));
    let mut model_cfg = cfg.model.clone();
    if lpn {
        model_cfg.pred_layers = cfg.lpn_pred_layers;
    }
    let model = RnntModel::new(model_cfg, mode, &cfg.fusion, &mut rng)?;
    let decode = DecoderConfig {
        fusion_mode: mode,
        beta: 0.0,
        ..cfg.decode.clone()
    };
    train_rnnt(model, &data.paired_train, &data.dev, lm, &cfg.training, &decode, &mut rng)
}

pub fn fine_tune(cfg: &ExperimentConfig, base: &RnntModel, data: &Dataset, lm: &RnnLm, seed: u64) -> Result<TrainOutcome> {
    let mut rng = stage_rng(seed, stage::ESF);
    let decode = DecoderConfig {
        beta: cfg.esf_beta,
        ..cfg.decode.clone()
    };
    fine_tune_esf(base, lm, &data.paired_train, &data.dev, &cfg.esf_training, &decode, &mut rng)
}

pub fn wer_on(model: &RnntModel, lm: Option<&RnnLm>, decode: &DecoderConfig, utts: &[Utterance]) -> Result<f64> {
    let dec = Decoder::new(model, lm, decode)?;
    Ok(evaluate_wer(&dec, utts)?.wer())
}

/// Relative change against a baseline WER; undefined when the baseline is 0.
pub fn relative_change(wer: f64, base: f64) -> Option<f64> {
    (base > 0.0).then(|| (wer - base) / base)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRecord {
    pub beta: f64,
    pub blank_penalty: f64,
    pub wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowResult {
    pub seed: u64,
    pub model: String,
    pub status: String,
    pub error: Option<String>,
    /// Transducer parameters plus the LM's for rows that use one.
    pub params: Option<usize>,
    pub dev_wer: Option<f64>,
    pub head_wer: Option<f64>,
    pub tail_wer: Option<f64>,
    pub head_rel: Option<f64>,
    pub tail_rel: Option<f64>,
    pub beta: f64,
    pub blank_penalty: f64,
    pub best_step: Option<usize>,
    pub sweep: Vec<SweepRecord>,
}

impl RowResult {
    fn failed(seed: u64, model: &str, err: &Error) -> Self {
        Self {
            seed,
            model: model.into(),
            status: "failed".into(),
            error: Some(format!("{}: {err}", err.kind())),
            params: None,
            dev_wer: None,
            head_wer: None,
            tail_wer: None,
            head_rel: None,
            tail_rel: None,
            beta: 0.0,
            blank_penalty: 0.0,
            best_step: None,
            sweep: Vec::new(),
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeanRow {
    pub model: String,
    /// Seeds on which the row succeeded.
    pub seeds: usize,
    pub params: Option<usize>,
    pub head_wer: Option<f64>,
    pub tail_wer: Option<f64>,
    /// Relative change of the mean WERs.
    pub head_rel: Option<f64>,
    pub tail_rel: Option<f64>,
    /// Mean of the per-seed relative changes.
    pub mean_head_rel: Option<f64>,
    pub mean_tail_rel: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LmRecord {
    pub seed: u64,
    pub params: usize,
    pub best_step: usize,
    pub log_perplexity: f64,
    pub uniform: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub baseline: String,
    pub lm: Vec<LmRecord>,
    pub rows: Vec<RowResult>,
    pub seconds: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Report {
    pub fn rows_for(&self, model: &str) -> impl Iterator<Item = &RowResult> + '_ {
        let model = model.to_string();
        self.rows.iter().filter(move |r| r.model == model)
    }

    /// Means over the seeds where both the row and the baseline succeeded.
    pub fn means(&self) -> Vec<MeanRow> {
        let base = |seed: u64| self.rows.iter().find(|r| r.model == self.baseline && r.seed == seed && r.ok());
        let base_head = mean(self.rows_for(&self.baseline).filter(|r| r.ok()).filter_map(|r| r.head_wer));
        let base_tail = mean(self.rows_for(&self.baseline).filter(|r| r.ok()).filter_map(|r| r.tail_wer));
        let mut names: Vec<&str> = ROWS.to_vec();
        for r in &self.rows {
            if !names.contains(&r.model.as_str()) {
                names.push(&r.model);
            }
        }
        names
            .into_iter()
            .filter(|name| self.rows.iter().any(|r| r.model == *name))
            .map(|name| {
                let ok: Vec<&RowResult> = self.rows_for(name).filter(|r| r.ok() && base(r.seed).is_some()).collect();
                let head = mean(ok.iter().filter_map(|r| r.head_wer));
                let tail = mean(ok.iter().filter_map(|r| r.tail_wer));
                MeanRow {
                    model: name.to_string(),
                    seeds: ok.len(),
                    params: ok.first().and_then(|r| r.params),
                    head_wer: head,
                    tail_wer: tail,
                    head_rel: head.zip(base_head).and_then(|(w, b)| relative_change(w, b)),
                    tail_rel: tail.zip(base_tail).and_then(|(w, b)| relative_change(w, b)),
                    mean_head_rel: mean(ok.iter().filter_map(|r| r.head_rel)),
                    mean_tail_rel: mean(ok.iter().filter_map(|r| r.tail_rel)),
                }
            })
            .collect()
    }

    /// Result table: WER in percent,
    /// relative change in brackets (negative is an improvement).
    pub fn to_table(&self) -> String {
        let pct = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        let rel = |x: Option<f64>| x.map_or(String::new(), |x| format!(" ({:+.2}%)", 100.0 * x));
        let mut out = String::new();
        let seeds: Vec<u64> = self.lm.iter().map(|l| l.seed).collect();
        let _ = writeln!(out, "seeds {seeds:?}, relative change against {}", self.baseline);
        for l in &self.lm {
            let _ = writeln!(
                out,
                "seed {}: LM log perplexity {:.4} (uniform {:.4}), {} params",
                l.seed, l.log_perplexity, l.uniform, l.params
            );
        }
        let _ = writeln!(out, "{:<9} {:>8} {:>5}  {:<20} {:<20}", "Model", "#params", "seeds", "head_test", "tail_test");
        for m in self.means() {
            let _ = writeln!(
                out,
                "{:<9} {:>8} {:>5}  {:<20} {:<20}",
                m.model,
                m.params.map_or("-".into(), |p| p.to_string()),
                m.seeds,
                format!("{}{}", pct(m.head_wer), if m.model == self.baseline { String::new() } else { rel(m.head_rel) }),
                format!("{}{}", pct(m.tail_wer), if m.model == self.baseline { String::new() } else { rel(m.tail_rel) }),
            );
        }
        let failed: Vec<&RowResult> = self.rows.iter().filter(|r| !r.ok()).collect();
        for r in failed {
            let _ = writeln!(out, "FAILED {} seed {}: {}", r.model, r.seed, r.error.as_deref().unwrap_or(""));
        }
        for r in self.rows.iter().filter(|r| !r.sweep.is_empty()) {
            let _ = writeln!(
                out,
                "sweep {} seed {}: best beta {} penalty {} ({})",
                r.model,
                r.seed,
                r.beta,
                r.blank_penalty,
                r.sweep
                    .iter()
                    .map(|p| format!("{}/{}:{:.2}", p.beta, p.blank_penalty, 100.0 * p.wer))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
        }
        let _ = writeln!(out, "elapsed {:.1}s", self.seconds);
        out
    }

    /// One JSON object per line, tagged by `record`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.lm {
            out.push_str(&tagged("lm", l));
        }
        for r in &self.rows {
            out.push_str(&tagged("row", r));
        }
        for m in self.means() {
            out.push_str(&tagged("mean", &m));
        }
        out
    }
}

fn tagged<T: Serialize>(record: &str, body: &T) -> String {
    let mut value = serde_json::to_value(body).expect("serializable record");
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("record".into(), record.into());
    }
    format!("{value}\n")
}

fn sweep_records(s: &SweepResult) -> Vec<SweepRecord> {
    s.table
        .iter()
        .map(|p| SweepRecord {
            beta: p.beta,
            blank_penalty: p.blank_penalty,
            wer: p.wer,
        })
        .collect()
}

/// Outcome of one row before relative changes are filled in.
struct Scored {
    params: usize,
    dev_wer: f64,
    head_wer: f64,
    tail_wer: f64,
    beta: f64,
    blank_penalty: f64,
    best_step: Option<usize>,
    sweep: Vec<SweepRecord>,
}

fn score(model: &RnntModel, lm: Option<&RnnLm>, decode: &DecoderConfig, data: &Dataset) -> Result<(f64, f64, f64)> {
    Ok((
        wer_on(model, lm, decode, &data.dev)?,
        wer_on(model, lm, decode, &data.head_test)?,
        wer_on(model, lm, decode, &data.tail_test)?,
    ))
}

fn scored(
    model: &RnntModel,
    lm: Option<&RnnLm>,
    decode: &DecoderConfig,
    data: &Dataset,
    lm_params: usize,
    best_step: Option<usize>,
    sweep: Vec<SweepRecord>,
) -> Result<Scored> {
    let (dev_wer, head_wer, tail_wer) = score(model, lm, decode, data)?;
    Ok(Scored {
        params: model.num_params() + lm_params,
        dev_wer,
        head_wer,
        tail_wer,
        beta: decode.beta,
        blank_penalty: decode.blank_penalty,
        best_step,
        sweep,
    })
}

/// Sweeps β and blank penalty on dev for an SF or ESF decode of `model`.
pub fn sweep_decode(cfg: &ExperimentConfig, model: &RnntModel, lm: &RnnLm, mode: FusionMode, dev: &[Utterance]) -> Result<(DecoderConfig, SweepResult)> {
    let base = DecoderConfig {
        fusion_mode: mode,
        ..cfg.decode.clone()
    };
    let s = sweep(&cfg.sweep.betas, &cfg.sweep.penalties, dev, model, Some(lm), &base)?;
    let chosen = if s.evaluated {
        DecoderConfig {
            beta: s.best_beta,
            blank_penalty: s.best_penalty,
            ..base
        }
    } else {
        base
    };
    Ok((chosen, s))
}

/// Decode settings for rows that are not swept.
fn plain_decode(cfg: &ExperimentConfig, mode: FusionMode) -> DecoderConfig {
    DecoderConfig {
        fusion_mode: mode,
        beta: 0.0,
        ..cfg.decode.clone()
    }
}

/// Trains and scores the baseline on its own; the matrix's baseline row uses
/// exactly this computation.
pub fn standalone_baseline(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<(TrainOutcome, f64, f64)> {
    let out = train_transducer(cfg, FusionMode::None, false, data, None, seed)?;
    let decode = plain_decode(cfg, FusionMode::None);
    let head = wer_on(&out.model, None, &decode, &data.head_test)?;
    let tail = wer_on(&out.model, None, &decode, &data.tail_test)?;
    Ok((out, head, tail))
}

/// Trained models of one seed, kept for checkpointing.
#[derive(Clone, Debug, Default)]
pub struct SeedModels {
    pub lm: Option<RnnLm>,
    pub models: Vec<(String, RnntModel)>,
}

/// Runs all six rows on one seed. A failing row is recorded and the rest go
/// on; rows built on the baseline fail with it.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, mut log: impl FnMut(&str)) -> Result<(Vec<RowResult>, LmRecord, SeedModels)> {
    let data = make_data(cfg, seed)?;
    log(&format!(
        "seed {seed}: {} head / {} tail words, {} paired utterances",
        data.split.head.len(),
        data.split.tail.len(),
        data.paired_train.len()
    ));
    let lm_res = train_language_model(cfg, &data, seed)?;
    let lm = lm_res.lm;
    let lm_params = lm.num_params();
    let lm_record = LmRecord {
        seed,
        params: lm_params,
        best_step: lm_res.best_step,
        log_perplexity: lm_res.best_log_perplexity,
        uniform: (cfg.lm.vocab_size as f64).ln(),
    };
    log(&format!("seed {seed}: LM log perplexity {:.4}", lm_record.log_perplexity));

    let mut kept = SeedModels {
        lm: Some(lm.clone()),
        models: Vec::new(),
    };
    let mut results: Vec<(String, Result<Scored>)> = Vec::new();

    let baseline = train_transducer(cfg, FusionMode::None, false, &data, None, seed);
    let base_scored = baseline.as_ref().map_err(clone_err).and_then(|out| {
        kept.models.push(("Baseline".into(), out.model.clone()));
        scored(&out.model, None, &plain_decode(cfg, FusionMode::None), &data, 0, Some(out.best_step), Vec::new())
    });
    results.push(("Baseline".into(), base_scored));
    log(&format!("seed {seed}: Baseline done"));

    let lpn = train_transducer(cfg, FusionMode::None, true, &data, None, seed).and_then(|out| {
        kept.models.push(("LPN".into(), out.model.clone()));
        scored(&out.model, None, &plain_decode(cfg, FusionMode::None), &data, 0, Some(out.best_step), Vec::new())
    });
    results.push(("LPN".into(), lpn));
    log(&format!("seed {seed}: LPN done"));

    let sf = baseline.as_ref().map_err(clone_err).and_then(|out| {
        let (decode, s) = sweep_decode(cfg, &out.model, &lm, FusionMode::Shallow, &data.dev)?;
        kept.models.push(("SF".into(), out.model.clone()));
        scored(&out.model, Some(&lm), &decode, &data, lm_params, Some(out.best_step), sweep_records(&s))
    });
    results.push(("SF".into(), sf));
    log(&format!("seed {seed}: SF done"));

    for (name, mode) in [("CF", FusionMode::Cold), ("ESF", FusionMode::EarlyShallow), ("ECF", FusionMode::EarlyCold)] {
        let row = if mode == FusionMode::EarlyShallow {
            baseline.as_ref().map_err(clone_err).and_then(|base| {
                let out = fine_tune(cfg, &base.model, &data, &lm, seed)?;
                let (decode, s) = sweep_decode(cfg, &out.model, &lm, mode, &data.dev)?;
                kept.models.push((name.into(), out.model.clone()));
                scored(&out.model, Some(&lm), &decode, &data, lm_params, Some(out.best_step), sweep_records(&s))
            })
        } else {
            train_transducer(cfg, mode, false, &data, Some(&lm), seed).and_then(|out| {
                kept.models.push((name.into(), out.model.clone()));
                scored(&out.model, Some(&lm), &plain_decode(cfg, mode), &data, lm_params, Some(out.best_step), Vec::new())
            })
        };
        results.push((name.into(), row));
        log(&format!("seed {seed}: {name} done"));
    }

    let base = results[0].1.as_ref().ok().map(|s| (s.head_wer, s.tail_wer));
    let rows = results
        .into_iter()
        .map(|(name, r)| match r {
            Ok(s) => RowResult {
                seed,
                model: name,
                status: "ok".into(),
                error: None,
                params: Some(s.params),
                dev_wer: Some(s.dev_wer),
                head_wer: Some(s.head_wer),
                tail_wer: Some(s.tail_wer),
                head_rel: base.and_then(|(h, _)| relative_change(s.head_wer, h)),
                tail_rel: base.and_then(|(_, t)| relative_change(s.tail_wer, t)),
                beta: s.beta,
                blank_penalty: s.blank_penalty,
                best_step: s.best_step,
                sweep: s.sweep,
            },
            Err(e) => RowResult::failed(seed, &name, &e),
        })
        .collect();
    Ok((rows, lm_record, kept))
}

fn clone_err(e: &Error) -> Error {
    Error::Contract(format!("baseline failed: {e}"))
}

/// Runs the matrix for every seed in `cfg.matrix_seeds`. A seed whose data
/// or LM cannot be built marks all its rows failed.
pub fn run_experiment_matrix(
    cfg: &ExperimentConfig,
    mut log: impl FnMut(&str),
    mut keep: impl FnMut(u64, &SeedModels) -> Result<()>,
) -> Result<Report> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let mut report = Report {
        baseline: BASELINE.into(),
        ..Report::default()
    };
    for &seed in &cfg.matrix_seeds {
        match run_seed(cfg, seed, &mut log) {
            Ok((rows, lm, models)) => {
                report.rows.extend(rows);
                report.lm.push(lm);
                keep(seed, &models)?;
            }
            Err(e) => {
                log(&format!("seed {seed} failed: {e}"));
                report.rows.extend(ROWS.iter().map(|name| RowResult::failed(seed, name, &e)));
            }
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
