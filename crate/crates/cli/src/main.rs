use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rnnt_fusion::checkpoint::{load_lm, load_rnnt, save_lm, save_rnnt};
use rnnt_fusion::config::ExperimentConfig;
use rnnt_fusion::data::{load_dataset, save_dataset, Dataset, Utterance};
use rnnt_fusion::decoder::{evaluate_wer, format_nbest, Decoder, DecoderConfig};
use rnnt_fusion::experiment::{self, Report};
use rnnt_fusion::fusion::FusionMode;
use rnnt_fusion::lm::RnnLm;
use rnnt_fusion::rnnt::RnntModel;
use rnnt_fusion::{Error, Result};

#[derive(Parser)]
#[command(name = "rnnt-fusion", version, about = "RNN-T training, LM fusion and evaluation on a toy tail-word task")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines; defaults apply otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` (and, for `matrix`, runs only this seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy corpus, split and features into the output directory.
    GenData,
    /// Train the RNN-LM on the text mixture of `paths.data`.
    TrainLm,
    /// Train a transducer; `fusion.mode` picks none, cf or ecf.
    TrainRnnt {
        /// Use the deeper prediction network (`model.lpn_pred_layers`).
        #[arg(long)]
        lpn: bool,
    },
    /// Attach ESF layers to the model at `paths.model` and fine-tune them.
    FineTuneEsf,
    /// Grid-search LM weight and blank penalty on dev (sf, esf).
    Sweep,
    /// Write n-best lists for `paths.decode_set`.
    Decode,
    /// Report WER on dev, head_test and tail_test.
    Evaluate,
    /// Run all six rows over `matrix.seeds`.
    Matrix {
        /// Also save every trained model under `<out>/models`.
        #[arg(long)]
        save_models: bool,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn data(cfg: &ExperimentConfig) -> Result<Dataset> {
    load_dataset(Path::new(&cfg.paths.data))
}

fn lm(cfg: &ExperimentConfig) -> Result<RnnLm> {
    Ok(load_lm(Path::new(&cfg.paths.lm))?.0)
}

fn model(cfg: &ExperimentConfig) -> Result<RnntModel> {
    Ok(load_rnnt(Path::new(&cfg.paths.model))?.0)
}

/// `fusion.mode`, or the model's own architecture when the config says none.
fn decode_config(cfg: &ExperimentConfig, model: &RnntModel) -> DecoderConfig {
    let mode = match cfg.fusion_mode {
        FusionMode::None => model.mode(),
        m => m,
    };
    DecoderConfig {
        fusion_mode: mode,
        ..cfg.decode.clone()
    }
}

fn lm_if_needed(cfg: &ExperimentConfig, mode: FusionMode) -> Result<Option<RnnLm>> {
    if mode.uses_lm() {
        lm(cfg).map(Some)
    } else {
        Ok(None)
    }
}

fn decode_set<'a>(cfg: &ExperimentConfig, data: &'a Dataset) -> Result<&'a [Utterance]> {
    match cfg.paths.decode_set.as_str() {
        "dev" => Ok(&data.dev),
        "head_test" => Ok(&data.head_test),
        "tail_test" => Ok(&data.tail_test),
        "train" => Ok(&data.paired_train),
        other => Err(Error::Config(format!("unknown decode set `{other}`"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    cfg.validate()?;
    let out = &cli.common.out;
    let seed = cfg.seed;
    match cli.command {
        Command::GenData => {
            let data = experiment::make_data(&cfg, seed)?;
            save_dataset(out, &data)?;
            write_file(&out.join("config.txt"), &cfg.to_text())?;
            println!(
                "wrote {}: {} head and {} tail words, {} train / {} dev / {} head_test / {} tail_test utterances, {} text sentences",
                out.display(),
                data.split.head.len(),
                data.split.tail.len(),
                data.paired_train.len(),
                data.dev.len(),
                data.head_test.len(),
                data.tail_test.len(),
                data.split.lm_text.len()
            );
        }
        Command::TrainLm => {
            let data = data(&cfg)?;
            let res = experiment::train_language_model(&cfg, &data, seed)?;
            for (step, ppl) in &res.history {
                println!("step {step} dev log perplexity {ppl:.4}");
            }
            let path = out.join("lm.ckpt");
            save_lm(&path, &res.lm, &cfg, res.best_step as u64)?;
            println!(
                "best step {} log perplexity {:.4} (uniform {:.4}); wrote {}",
                res.best_step,
                res.best_log_perplexity,
                (cfg.lm.vocab_size as f64).ln(),
                path.display()
            );
        }
        Command::TrainRnnt { lpn } => {
            let data = data(&cfg)?;
            let lm = lm_if_needed(&cfg, cfg.fusion_mode)?;
            let res = experiment::train_transducer(&cfg, cfg.fusion_mode, lpn, &data, lm.as_ref(), seed)?;
            for log in &res.history {
                println!("step {} train loss {:.4} dev WER {:.4}", log.step, log.train_loss, log.dev_wer);
            }
            let path = out.join("model.ckpt");
            save_rnnt(&path, &res.model, &cfg, res.best_step as u64)?;
            println!(
                "{} model, {} params, best step {} dev WER {:.4}; wrote {}",
                res.model.mode(),
                res.model.num_params(),
                res.best_step,
                res.best_dev_wer,
                path.display()
            );
        }
        Command::FineTuneEsf => {
            let data = data(&cfg)?;
            let base = model(&cfg)?;
            let lm = lm(&cfg)?;
            let res = experiment::fine_tune(&cfg, &base, &data, &lm, seed)?;
            for log in &res.history {
                println!("step {} train loss {:.4} dev WER {:.4}", log.step, log.train_loss, log.dev_wer);
            }
            let path = out.join("esf.ckpt");
            save_rnnt(&path, &res.model, &cfg, res.best_step as u64)?;
            println!("best step {} dev WER {:.4}; wrote {}", res.best_step, res.best_dev_wer, path.display());
        }
        Command::Sweep => {
            let data = data(&cfg)?;
            let model = model(&cfg)?;
            let mode = decode_config(&cfg, &model).fusion_mode;
            let lm = lm(&cfg)?;
            let (chosen, s) = experiment::sweep_decode(&cfg, &model, &lm, mode, &data.dev)?;
            if !s.evaluated {
                println!("{mode}: no sweep (beta 0, blank penalty 0)");
            }
            let mut jsonl = String::new();
            for p in &s.table {
                println!("beta {} blank_penalty {} dev WER {:.4}", p.beta, p.blank_penalty, p.wer);
                jsonl.push_str(&format!(
                    "{{\"beta\":{},\"blank_penalty\":{},\"wer\":{}}}\n",
                    p.beta, p.blank_penalty, p.wer
                ));
            }
            write_file(&out.join("sweep.jsonl"), &jsonl)?;
            println!("best beta {} blank penalty {}", chosen.beta, chosen.blank_penalty);
        }
        Command::Decode => {
            let data = data(&cfg)?;
            let model = model(&cfg)?;
            let decode = decode_config(&cfg, &model);
            let lm = lm_if_needed(&cfg, decode.fusion_mode)?;
            let dec = Decoder::new(&model, lm.as_ref(), &decode)?;
            let path = out.join("nbest.tsv");
            fs::create_dir_all(out)?;
            let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
            let utts = decode_set(&cfg, &data)?;
            for u in utts {
                let r = dec.decode(&u.features)?;
                w.write_all(format_nbest(&u.id, &r.nbest, &data.vocab).as_bytes())?;
            }
            w.flush()?;
            println!("decoded {} utterances; wrote {}", utts.len(), path.display());
        }
        Command::Evaluate => {
            let data = data(&cfg)?;
            let model = model(&cfg)?;
            let decode = decode_config(&cfg, &model);
            let lm = lm_if_needed(&cfg, decode.fusion_mode)?;
            let dec = Decoder::new(&model, lm.as_ref(), &decode)?;
            for (name, utts) in [("dev", &data.dev), ("head_test", &data.head_test), ("tail_test", &data.tail_test)] {
                let c = evaluate_wer(&dec, utts)?;
                println!(
                    "{{\"set\":\"{name}\",\"mode\":\"{}\",\"wer\":{},\"substitutions\":{},\"insertions\":{},\"deletions\":{},\"reference_len\":{}}}",
                    decode.fusion_mode,
                    c.wer(),
                    c.substitutions,
                    c.insertions,
                    c.deletions,
                    c.reference_len
                );
            }
        }
        Command::Matrix { save_models } => {
            let mut cfg = cfg;
            if let Some(seed) = cli.common.seed {
                cfg.matrix_seeds = vec![seed];
            }
            let report: Report = experiment::run_experiment_matrix(
                &cfg,
                |msg| eprintln!("{msg}"),
                |seed, models| {
                    if !save_models {
                        return Ok(());
                    }
                    let dir = out.join("models").join(format!("seed-{seed}"));
                    if let Some(lm) = &models.lm {
                        save_lm(&dir.join("lm.ckpt"), lm, &cfg, 0)?;
                    }
                    for (name, m) in &models.models {
                        save_rnnt(&dir.join(format!("{}.ckpt", name.to_lowercase())), m, &cfg, 0)?;
                    }
                    Ok(())
                },
            )?;
            let table = report.to_table();
            print!("{table}");
            write_file(&out.join("report.txt"), &table)?;
            write_file(&out.join("report.jsonl"), &report.to_jsonl())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
