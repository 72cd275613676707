//! Command-line entry points: corpus generation, training, single-sample
//! extraction, split evaluation, and the gradient verification suite.

use anyhow::Context;
use clap::{Parser, Subcommand};
use neurex::error::Error;
use neurex::gradcheck;
use neurex::model::{Extractor, ModelConfig};
use neurex::optim::Adam;
use neurex::rng::rng_labeled;
use neurex::synth::{self, CorpusSpec, SplitKind};
use neurex::tensor::{Graph, Mode, Tensor};
use neurex::trainer::{self, evaluate, load_corpus};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "neurex",
    about = "EEG-cued target speaker extraction at desk scale",
    version
)]
struct Cli {
    /// Size of the compute thread pool (defaults to all cores).
    #[arg(long, global = true)]
    device_threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a corpus spec file.
    Gen {
        /// Corpus spec (JSON).
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for samples and the manifest.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a generated corpus.
    Train {
        /// Model config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Corpus directory (with manifest.json).
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for checkpoints and the metric log.
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Extract the attended speaker from one mixture + EEG recording.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Mixture waveform (16-bit PCM mono WAV).
        #[arg(long)]
        mixture: PathBuf,
        /// EEG file (NXE1 binary or headerless CSV, channels as rows).
        #[arg(long)]
        eeg: PathBuf,
        /// Output WAV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Which split to evaluate: train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Skip the STOI computation (it dominates evaluation time).
        #[arg(long)]
        no_stoi: bool,
        /// Optional path for the JSON report (also printed to stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck {
        /// Model config (JSON); defaults to the built-in toy config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.device_threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("neurex: could not size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("neurex: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

/// Distinct exit codes per failure class: 2 file/IO, 3 config or data
/// mismatch, 4 corrupted file, 5 broken contract, 6 numeric failure.
fn classify(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Io(_)) => 2,
        Some(Error::Config(_)) | Some(Error::Data(_)) => 3,
        Some(Error::Parse { .. }) => 4,
        Some(Error::Contract(_)) | Some(Error::Shape(_)) | Some(Error::Domain(_)) => 5,
        Some(Error::Numeric { .. }) => 6,
        None => {
            if e.downcast_ref::<std::io::Error>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn read_to_string(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path)
        .map_err(Error::Io)
        .with_context(|| format!("reading {}", path.display()))
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Gen { spec, out, seed } => {
            let text = read_to_string(&spec)?;
            let mut spec: CorpusSpec = serde_json::from_str(&text)
                .map_err(|e| Error::config(format!("bad corpus spec: {e}")))?;
            if let Some(s) = seed {
                spec.master_seed = s;
            }
            let manifest = synth::write_corpus(&spec, &out)?;
            println!(
                "{}",
                serde_json::json!({
                    "samples": manifest.samples.len(),
                    "out": out,
                    "seed": spec.master_seed,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            corpus,
            out,
            seed,
            resume,
        } => {
            let corpus = load_corpus(&corpus)?;
            let (cfg, mut model, mut adam, start_step) = match resume {
                Some(ckpt) => {
                    let (cfg, model, adam, step, _) = trainer::load_checkpoint(&ckpt)?;
                    (cfg, model, adam, step)
                }
                None => {
                    let mut cfg = ModelConfig::from_json(&read_to_string(&config)?)?;
                    if let Some(s) = seed {
                        cfg.seed = s;
                    }
                    let model = Extractor::init(&cfg)?;
                    (cfg, model, Adam::default(), 0)
                }
            };
            if corpus.spec.n_channels != cfg.eeg_channels {
                return Err(Error::data(format!(
                    "corpus has {} EEG channels but the model config expects {}",
                    corpus.spec.n_channels, cfg.eeg_channels
                ))
                .into());
            }
            let report =
                trainer::train(&mut model, &mut adam, &corpus, &cfg, start_step, None, Some(&out))?;
            println!(
                "{}",
                serde_json::json!({
                    "steps": report.steps,
                    "total_steps": report.total_steps,
                    "best_val_sisdr": report.best_val_sisdr,
                    "stopped_early": report.stopped_early,
                    "out": out,
                })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Extract {
            checkpoint,
            mixture,
            eeg,
            out,
        } => {
            let (cfg, model, _, _, _) = trainer::load_checkpoint(&checkpoint)?;
            let (wave, sr) = synth::wav_read(&mixture)?;
            if sr as usize != cfg.sample_rate {
                return Err(Error::data(format!(
                    "mixture is {sr} Hz but the model was trained at {} Hz",
                    cfg.sample_rate
                ))
                .into());
            }
            let eeg_mat = synth::eeg_read(&eeg)?;
            if eeg_mat.channels != cfg.eeg_channels {
                return Err(Error::data(format!(
                    "EEG file has {} channels but the model expects {}",
                    eeg_mat.channels, cfg.eeg_channels
                ))
                .into());
            }
            let t = wave.len();
            let mix = Tensor::from_vec(vec![1, t], wave);
            let eeg_t = Tensor::from_vec(
                vec![1, eeg_mat.channels, eeg_mat.frames],
                eeg_mat.to_f64(),
            );
            let g = Graph::inference();
            let mut drng = rng_labeled(0, "extract", &[]);
            let est = model.forward(&g, &mix, &eeg_t, Mode::Eval, &mut drng)?;
            // normalize into the 16-bit range if the mask overshoots
            let peak = est.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = if peak > 1.0 { 0.99 / peak } else { 1.0 };
            let samples: Vec<f64> = est.data().iter().map(|v| v * scale).collect();
            let tmp = out.with_extension("wav.tmp");
            synth::wav_write(&tmp, &samples, sr)?;
            std::fs::rename(&tmp, &out).map_err(Error::Io)?;
            println!(
                "{}",
                serde_json::json!({ "out": out, "samples": samples.len() })
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            corpus,
            split,
            no_stoi,
            out,
        } => {
            let (cfg, model, _, _, _) = trainer::load_checkpoint(&checkpoint)?;
            let corpus = load_corpus(&corpus)?;
            if corpus.spec.n_channels != cfg.eeg_channels {
                return Err(Error::data(format!(
                    "corpus has {} EEG channels but the model expects {}",
                    corpus.spec.n_channels, cfg.eeg_channels
                ))
                .into());
            }
            let split: SplitKind = split.parse()?;
            let samples = match split {
                SplitKind::Train => &corpus.train,
                SplitKind::Val => &corpus.val,
                SplitKind::Test => &corpus.test,
            };
            let summary = evaluate(&model, samples, cfg.batch_size, !no_stoi)?;
            let json = serde_json::to_string_pretty(&summary)
                .map_err(|e| Error::config(e.to_string()))?;
            println!("{json}");
            if let Some(path) = out {
                let tmp = path.with_extension("json.tmp");
                std::fs::write(&tmp, &json).map_err(Error::Io)?;
                std::fs::rename(&tmp, &path).map_err(Error::Io)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { config } => {
            let cfg = match config {
                Some(path) => ModelConfig::from_json(&read_to_string(&path)?)?,
                None => gradcheck::toy_config(),
            };
            let results = gradcheck::run_all(&cfg)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{} {:<28} rel_err {: <12.3e} tol {:.0e}",
                    if r.pass() { "PASS" } else { "FAIL" },
                    r.name,
                    r.rel_err,
                    r.tol
                );
                ok &= r.pass();
            }
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
    }
}
