//! Training loop, evaluation, and checkpoint persistence.

use crate::error::{Error, Result};
use crate::loss::{neg_si_sdr_loss, si_sdr};
use crate::model::{Extractor, ModelConfig};
use crate::nn::{attach_params, collect_grads, collect_params, load_params};
use crate::optim::{clip_grad_norm, Adam, Schedule};
use crate::rng::rng_labeled;
use crate::stoi::stoi;
use crate::synth::{load_sample, read_manifest, Sample, SplitKind};
use crate::tensor::{read_tensor, write_tensor, Graph, Mode, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// One metric-log line. Validation fields appear on evaluation steps only.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_sisdr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_selection: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_margin_db: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub total_steps: usize,
    pub records: Vec<MetricRecord>,
    pub best_val_sisdr: Option<f64>,
    pub stopped_early: bool,
}

/// In-memory corpus split.
pub struct LoadedCorpus {
    pub spec: crate::synth::CorpusSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_corpus(dir: &Path) -> Result<LoadedCorpus> {
    let manifest = read_manifest(dir)?;
    let mut out = LoadedCorpus {
        spec: manifest.spec.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for meta in &manifest.samples {
        let s = load_sample(dir, meta, &manifest.spec)?;
        match meta.split {
            SplitKind::Train => out.train.push(s),
            SplitKind::Val => out.val.push(s),
            SplitKind::Test => out.test.push(s),
        }
    }
    Ok(out)
}

/// Stack samples into batch tensors (mixture, attended, eeg).
pub fn batch_tensors(samples: &[&Sample]) -> Result<(Tensor, Tensor, Tensor)> {
    let b = samples.len();
    if b == 0 {
        return Err(Error::contract("empty batch"));
    }
    let t = samples[0].mixture.len();
    let c = samples[0].n_channels;
    let te = samples[0].eeg.len() / c;
    let mut mix = Vec::with_capacity(b * t);
    let mut att = Vec::with_capacity(b * t);
    let mut eeg = Vec::with_capacity(b * c * te);
    for s in samples {
        if s.mixture.len() != t || s.eeg.len() != c * te {
            return Err(Error::data(
                "batch mixes samples of different durations".to_string(),
            ));
        }
        mix.extend_from_slice(&s.mixture);
        att.extend_from_slice(&s.attended);
        eeg.extend_from_slice(&s.eeg);
    }
    Ok((
        Tensor::from_vec(vec![b, t], mix),
        Tensor::from_vec(vec![b, t], att),
        Tensor::from_vec(vec![b, c, te], eeg),
    ))
}

/// Evaluation summary over a sample set.
#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub n: usize,
    pub sisdr_mean: f64,
    pub sisdr_std: f64,
    pub mixture_sisdr_mean: f64,
    pub stoi_mean: Option<f64>,
    pub stoi_std: Option<f64>,
    /// Fraction of samples whose extraction is closer (by SI-SDR) to the
    /// attended source than to the unattended one.
    pub selection_rate: f64,
}

/// Run the model over samples in eval mode and score against both sources.
pub fn evaluate(
    model: &Extractor,
    samples: &[Sample],
    batch_size: usize,
    with_stoi: bool,
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::contract("evaluate: empty sample set"));
    }
    let mut sisdrs = Vec::with_capacity(samples.len());
    let mut mix_sisdrs = Vec::with_capacity(samples.len());
    let mut stois = Vec::new();
    let mut selected = 0usize;
    let sr = model.cfg.sample_rate;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (mix, _, eeg) = batch_tensors(&refs)?;
        let g = Graph::inference();
        let mut drng = rng_labeled(0, "eval-dropout", &[]);
        let est = model.forward(&g, &mix, &eeg, Mode::Eval, &mut drng)?;
        let t = est.shape()[1];
        for (i, s) in chunk.iter().enumerate() {
            let e = &est.data()[i * t..(i + 1) * t];
            let att = si_sdr(e, &s.attended, true)?;
            let unatt = si_sdr(e, &s.unattended, true)?;
            sisdrs.push(att);
            mix_sisdrs.push(si_sdr(&s.mixture, &s.attended, true)?);
            if att > unatt {
                selected += 1;
            }
            if with_stoi {
                stois.push(stoi(e, &s.attended, sr)?);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let std = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    };
    Ok(EvalSummary {
        n: samples.len(),
        sisdr_mean: mean(&sisdrs),
        sisdr_std: std(&sisdrs),
        mixture_sisdr_mean: mean(&mix_sisdrs),
        stoi_mean: with_stoi.then(|| mean(&stois)),
        stoi_std: with_stoi.then(|| std(&stois)),
        selection_rate: selected as f64 / samples.len() as f64,
    })
}

/// Total optimizer steps for a run: epochs x batches per epoch, capped by
/// `max_steps` when set.
pub fn planned_steps(cfg: &ModelConfig, n_train: usize) -> usize {
    let spe = n_train.div_ceil(cfg.batch_size.max(1));
    let planned = cfg.epochs.saturating_mul(spe);
    match cfg.max_steps {
        Some(cap) => planned.min(cap),
        None => planned,
    }
}

/// Train `model` in place. `start_step` > 0 resumes a run mid-schedule
/// (the optimizer state must come from the matching checkpoint);
/// `stop_after` bounds this invocation without shortening the schedule.
/// Metric records cover steps start_step+1..=steps_run; when `out_dir` is
/// given, checkpoints and a JSONL metric log land there.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &mut Extractor,
    adam: &mut Adam,
    corpus: &LoadedCorpus,
    cfg: &ModelConfig,
    start_step: usize,
    stop_after: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    if corpus.train.is_empty() {
        return Err(Error::data("corpus has no training samples"));
    }
    let n_train = corpus.train.len();
    let batch = cfg.batch_size.max(1);
    let spe = n_train.div_ceil(batch);
    let total = planned_steps(cfg, n_train);
    let sched = Schedule::new(cfg.lr_max, total, cfg.warmup_fraction);
    let mut records = Vec::new();
    let mut best_val: Option<f64> = None;
    let mut stopped_early = false;
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };

    // rewind to the epoch boundary; batches up to start_step replay as
    // no-ops so the resumed run sees the same shuffle positions
    let start_epoch = start_step / spe.max(1);
    let mut step = start_epoch * spe;
    'outer: for epoch in start_epoch.. {
        if step >= total {
            break;
        }
        // deterministic per-epoch shuffle
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut srng = rng_labeled(cfg.seed, "shuffle", &[epoch as u64]);
        order.shuffle(&mut srng);
        for bstart in (0..n_train).step_by(batch) {
            let next_step = step + 1;
            if next_step <= start_step {
                step = next_step;
                continue; // replayed batch from before the resume point
            }
            if next_step > total || stop_after.map(|s| next_step > s).unwrap_or(false) {
                break 'outer;
            }
            step = next_step;
            let idxs = &order[bstart..(bstart + batch).min(n_train)];
            let refs: Vec<&Sample> = idxs.iter().map(|&i| &corpus.train[i]).collect();
            let (mix, att, eeg) = batch_tensors(&refs)?;
            let g = Graph::new();
            attach_params(model, &g);
            let mut drng = rng_labeled(cfg.seed, "dropout", &[step as u64]);
            let est = model.forward(&g, &mix, &eeg, Mode::Train, &mut drng)?;
            let loss = neg_si_sdr_loss(&g, &est, &att)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric {
                    batch_id: step,
                    msg: format!(
                        "loss became {loss_val} at step {step} (epoch {epoch}, samples {idxs:?})"
                    ),
                });
            }
            let grads = g.backward(&loss)?;
            let mut gvec = collect_grads(model, &grads)?;
            clip_grad_norm(&mut gvec, cfg.grad_clip);
            let pvec = collect_params(model);
            let lr = sched.lr_at(step);
            let updated = adam.step(&pvec, &gvec, lr)?;
            let map: BTreeMap<String, Tensor> = updated.into_iter().collect();
            let missing = load_params(model, &map);
            debug_assert!(missing.is_empty());

            let mut rec = MetricRecord {
                step,
                lr,
                train_loss: loss_val,
                val_sisdr: None,
                val_selection: None,
                train_margin_db: None,
            };

            let epoch_end = bstart + batch >= n_train;
            let eval_due = cfg
                .eval_every
                .map(|k| k > 0 && step % k == 0)
                .unwrap_or(false)
                || epoch_end
                || step == total;
            if eval_due {
                if !corpus.val.is_empty() {
                    let summary = evaluate(model, &corpus.val, batch, false)?;
                    rec.val_sisdr = Some(summary.sisdr_mean);
                    rec.val_selection = Some(summary.selection_rate);
                    let improved = best_val.map(|b| summary.sisdr_mean > b).unwrap_or(true);
                    if improved {
                        best_val = Some(summary.sisdr_mean);
                        if let Some(dir) = out_dir {
                            save_checkpoint(
                                &dir.join("best.ckpt"),
                                cfg,
                                model,
                                adam,
                                step,
                                total,
                            )?;
                        }
                    }
                    if let Some(target) = cfg.early_stop_selection_rate {
                        if summary.selection_rate >= target {
                            stopped_early = true;
                        }
                    }
                }
                if let Some(target) = cfg.early_stop_margin_db {
                    let summary = evaluate(model, &corpus.train, batch, false)?;
                    let margin = summary.sisdr_mean - summary.mixture_sisdr_mean;
                    rec.train_margin_db = Some(margin);
                    if margin >= target {
                        stopped_early = true;
                    }
                }
            }
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec).map_err(json_err)?)?;
            }
            records.push(rec);
            if stopped_early {
                break 'outer;
            }
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&dir.join("last.ckpt"), cfg, model, adam, step, total)?;
    }
    Ok(TrainReport {
        steps: step,
        total_steps: total,
        records,
        best_val_sisdr: best_val,
        stopped_early,
    })
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

// ---------------------------------------------------------------------
// checkpoints: manifest JSON + named tensors in the NXT1 format
// ---------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"NXCK";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptManifest {
    config: ModelConfig,
    step: usize,
    total_steps: usize,
    adam_step: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
}

/// Serialize config, parameters, and optimizer moments. The write goes to
/// a temp file first and is renamed into place.
pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    model: &Extractor,
    adam: &Adam,
    step: usize,
    total_steps: usize,
) -> Result<()> {
    let mut m = model.clone();
    let params = collect_params(&mut m);
    let manifest = CkptManifest {
        config: cfg.clone(),
        step,
        total_steps,
        adam_step: adam.step,
        adam_beta1: adam.beta1,
        adam_beta2: adam.beta2,
        adam_eps: adam.eps,
    };
    let mjson = serde_json::to_vec(&manifest).map_err(json_err)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    buf.extend_from_slice(&mjson);
    let mut entries: Vec<(String, Tensor)> = Vec::new();
    for (path, t) in &params {
        entries.push((format!("p.{path}"), t.clone()));
    }
    for (path, (mbuf, vbuf)) in &adam.moments {
        let shape = params
            .iter()
            .find(|(p, _)| p == path)
            .map(|(_, t)| t.shape().to_vec())
            .unwrap_or_else(|| vec![mbuf.len()]);
        entries.push((format!("m.{path}"), Tensor::from_vec(shape.clone(), mbuf.clone())));
        entries.push((format!("v.{path}"), Tensor::from_vec(shape, vbuf.clone())));
    }
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tensor(&mut buf, t)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint into a fresh model + optimizer.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Extractor, Adam, usize, usize)> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, 0)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "not a checkpoint (bad magic)".to_string(),
        });
    }
    let version = read_u32(&mut r, 4)?;
    if version != CKPT_VERSION {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let mlen = read_u64(&mut r, 8)? as usize;
    let mut mjson = vec![0u8; mlen];
    read_exact(&mut r, &mut mjson, 16)?;
    let manifest: CkptManifest = serde_json::from_slice(&mjson).map_err(|e| Error::Parse {
        offset: 16,
        msg: format!("bad checkpoint manifest: {e}"),
    })?;
    let n_entries = read_u32(&mut r, 16 + mlen as u64)? as usize;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..n_entries {
        let nlen = read_u32(&mut r, 0)? as usize;
        let mut name = vec![0u8; nlen];
        read_exact(&mut r, &mut name, 0)?;
        let name = String::from_utf8(name).map_err(|_| Error::Parse {
            offset: 0,
            msg: "bad tensor name encoding".to_string(),
        })?;
        let t = read_tensor(&mut r)?;
        tensors.insert(name, t);
    }
    let mut model = Extractor::init(&manifest.config)?;
    let params: BTreeMap<String, Tensor> = tensors
        .iter()
        .filter(|(k, _)| k.starts_with("p."))
        .map(|(k, v)| (k[2..].to_string(), v.clone()))
        .collect();
    let missing = load_params(&mut model, &params);
    if !missing.is_empty() {
        return Err(Error::Parse {
            offset: 0,
            msg: format!("checkpoint is missing parameters: {missing:?}"),
        });
    }
    let mut adam = Adam {
        beta1: manifest.adam_beta1,
        beta2: manifest.adam_beta2,
        eps: manifest.adam_eps,
        step: manifest.adam_step,
        moments: BTreeMap::new(),
    };
    for (k, t) in &tensors {
        if let Some(path) = k.strip_prefix("m.") {
            let v = tensors.get(&format!("v.{path}")).ok_or_else(|| Error::Parse {
                offset: 0,
                msg: format!("checkpoint has first moment but no second for {path}"),
            })?;
            adam
                .moments
                .insert(path.to_string(), (t.data().to_vec(), v.data().to_vec()));
        }
    }
    Ok((
        manifest.config,
        model,
        adam,
        manifest.step,
        manifest.total_steps,
    ))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Parse {
        offset,
        msg: format!("checkpoint truncated: {e}"),
    })
}

fn read_u32(r: &mut &[u8], offset: u64) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, offset)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8], offset: u64) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, offset)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_sample, split_of, CorpusSpec};
    use tempfile::tempdir;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_state: 2,
            n_repeats: 1,
            eeg_channels: 4,
            cmca_layers: 1,
            mask_blocks: 2,
            kan_grid: 4,
            chunk_len: 16,
            chunk_hop: 8,
            batch_size: 2,
            epochs: 2,
            lr_max: 1e-3,
            dropout_p: 0.2,
            seed: 5,
            ..Default::default()
        }
    }

    fn tiny_corpus() -> LoadedCorpus {
        let spec = CorpusSpec {
            n_samples: 5,
            duration_s: 0.5,
            n_channels: 4,
            eeg_snr_db: 30.0,
            ..Default::default()
        };
        let mut c = LoadedCorpus {
            spec: spec.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for i in 0..spec.n_samples {
            let s = make_sample(&spec, i).unwrap();
            match split_of(i, spec.n_samples) {
                SplitKind::Train => c.train.push(s),
                SplitKind::Val => c.val.push(s),
                SplitKind::Test => c.test.push(s),
            }
        }
        c
    }

    #[test]
    fn replay_oracle_first_batch_loss() {
        // the first step's logged loss equals an independent forward+loss
        // recomputation from the initial parameters
        let cfg = tiny_cfg();
        let corpus = tiny_corpus();
        let mut model = Extractor::init(&cfg).unwrap();
        let initial = Extractor::init(&cfg).unwrap();
        let mut adam = Adam::default();
        let report = train(&mut model, &mut adam, &corpus, &cfg, 0, None, None).unwrap();
        assert!(!report.records.is_empty());

        // reconstruct batch 1 of epoch 0
        let n = corpus.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut srng = rng_labeled(cfg.seed, "shuffle", &[0]);
        order.shuffle(&mut srng);
        let idxs = &order[..cfg.batch_size.min(n)];
        let refs: Vec<&Sample> = idxs.iter().map(|&i| &corpus.train[i]).collect();
        let (mix, att, eeg) = batch_tensors(&refs).unwrap();
        let g = Graph::inference();
        let mut drng = rng_labeled(cfg.seed, "dropout", &[1]);
        let est = initial.forward(&g, &mix, &eeg, Mode::Train, &mut drng).unwrap();
        let loss = neg_si_sdr_loss(&g, &est, &att).unwrap().item();
        assert_eq!(
            loss, report.records[0].train_loss,
            "replayed first-batch loss must match the log"
        );
    }

    #[test]
    fn fixed_seed_runs_are_bit_identical() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus();
        let run = || {
            let mut model = Extractor::init(&cfg).unwrap();
            let mut adam = Adam::default();
            train(&mut model, &mut adam, &corpus, &cfg, 0, None, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.records.len(), b.records.len());
        for (ra, rb) in a.records.iter().zip(&b.records) {
            assert_eq!(ra, rb, "metric records must be bit-identical");
        }
    }

    #[test]
    fn checkpoint_round_trip_bitwise_forward() {
        let cfg = tiny_cfg();
        let corpus = tiny_corpus();
        let mut model = Extractor::init(&cfg).unwrap();
        let mut adam = Adam::default();
        train(&mut model, &mut adam, &corpus, &cfg, 0, None, None).unwrap();

        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &cfg, &model, &adam, 4, 10).unwrap();
        let (cfg2, model2, adam2, step, total) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 4);
        assert_eq!(total, 10);
        assert_eq!(cfg2.to_json(), cfg.to_json());
        assert_eq!(adam2.step, adam.step);

        let refs: Vec<&Sample> = corpus.train.iter().collect();
        let (mix, _, eeg) = batch_tensors(&refs).unwrap();
        let g = Graph::inference();
        let mut r1 = rng_labeled(0, "d", &[]);
        let y1 = model.forward(&g, &mix, &eeg, Mode::Eval, &mut r1).unwrap();
        let y2 = model2.forward(&g, &mix, &eeg, Mode::Eval, &mut r1).unwrap();
        assert_eq!(y1.data(), y2.data(), "loaded model must forward bit-identically");
    }

    #[test]
    fn resume_reproduces_uninterrupted_trajectory() {
        let cfg = ModelConfig {
            max_steps: Some(6),
            ..tiny_cfg()
        };
        let corpus = tiny_corpus();
        // uninterrupted
        let mut m_full = Extractor::init(&cfg).unwrap();
        let mut a_full = Adam::default();
        let full = train(&mut m_full, &mut a_full, &corpus, &cfg, 0, None, None).unwrap();

        // interrupted after 3 steps, checkpointed, resumed
        let mut m_half = Extractor::init(&cfg).unwrap();
        let mut a_half = Adam::default();
        let first = train(&mut m_half, &mut a_half, &corpus, &cfg, 0, Some(3), None).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        save_checkpoint(&path, &cfg, &m_half, &a_half, 3, full.total_steps).unwrap();
        let (cfg_l, mut m_res, mut a_res, step, _) = load_checkpoint(&path).unwrap();
        let rest = train(&mut m_res, &mut a_res, &corpus, &cfg_l, step, None, None).unwrap();

        let mut combined = first.records.clone();
        combined.extend(rest.records.clone());
        assert_eq!(combined.len(), full.records.len());
        for (a, b) in combined.iter().zip(&full.records) {
            assert_eq!(a, b, "resumed trajectory must match uninterrupted run");
        }
    }

    #[test]
    fn nan_loss_aborts_with_batch_id() {
        // poison the model with a weight that overflows the decoder
        let cfg = tiny_cfg();
        let corpus = tiny_corpus();
        let mut model = Extractor::init(&cfg).unwrap();
        model.decoder_w = Tensor::full(&[8, 1, 16], f64::NAN);
        let mut adam = Adam::default();
        match train(&mut model, &mut adam, &corpus, &cfg, 0, None, None) {
            Err(Error::Numeric { batch_id, .. }) => assert_eq!(batch_id, 1),
            other => panic!("expected numeric abort, got {other:?}"),
        }
    }
}
