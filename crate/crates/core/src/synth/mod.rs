//! Deterministic synthetic corpus: two-speaker mixtures plus surrogate
//! EEG whose channels embed the attended source's envelope in noise.
//! Every sample is a pure function of (spec, index), so a deleted corpus
//! regenerates bit-identically.

mod eeg_file;
mod wav;

pub use eeg_file::{eeg_read, eeg_write, EegMatrix};
pub use wav::{wav_read, wav_write};

use crate::error::{Error, Result};
use crate::rng::{derive, rng_from, tag};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const EEG_RATE: usize = 128;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_samples: usize,
    pub duration_s: f64,
    pub sample_rate: usize,
    pub n_channels: usize,
    /// Envelope-to-noise ratio of the surrogate EEG, in dB.
    pub eeg_snr_db: f64,
    /// Uniform range for the attended-to-unattended mixing SNR, in dB.
    pub mix_snr_db: (f64, f64),
    pub master_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_samples: 250,
            duration_s: 1.0,
            sample_rate: 8000,
            n_channels: 16,
            eeg_snr_db: 20.0,
            mix_snr_db: (-3.0, 3.0),
            master_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

/// One training item. `mixture == attended + unattended` holds exactly by
/// construction; `eeg` is channels x frames at 128 Hz.
#[derive(Clone, Debug)]
pub struct Sample {
    pub mixture: Vec<f64>,
    pub attended: Vec<f64>,
    pub unattended: Vec<f64>,
    pub eeg: Vec<f64>,
    pub n_channels: usize,
    pub attended_side: Side,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::config(format!(
                "unknown split {other:?}; expected train, val or test"
            ))),
        }
    }
}

/// 80/10/10 assignment by sample index.
pub fn split_of(index: usize, n_samples: usize) -> SplitKind {
    let train_end = n_samples * 8 / 10;
    let val_end = n_samples * 9 / 10;
    if index < train_end {
        SplitKind::Train
    } else if index < val_end {
        SplitKind::Val
    } else {
        SplitKind::Test
    }
}

/// Speech-like surrogate: white noise shaped by speaker-specific
/// resonators, amplitude-modulated by a smooth 2-8 Hz random envelope,
/// normalized to unit RMS. Bit-deterministic in (seed, speaker_id).
pub fn gen_source(
    seed: u64,
    duration_s: f64,
    sample_rate: usize,
    speaker_id: u64,
) -> Result<Vec<f64>> {
    if duration_s < 0.5 {
        return Err(Error::contract(format!(
            "gen_source: duration {duration_s}s below the 0.5s minimum"
        )));
    }
    let n = (duration_s * sample_rate as f64).round() as usize;
    // speaker profile depends only on the speaker id
    let mut spk_rng = rng_from(derive(0x5eed, &[tag("speaker"), speaker_id]), &[]);
    let n_res = 3;
    let fmax = (sample_rate as f64 * 0.45).min(3400.0);
    let resonators: Vec<(f64, f64)> = (0..n_res)
        .map(|_| {
            let f = 300.0 + (fmax - 300.0) * spk_rng.random::<f64>();
            let bw = 100.0 + 300.0 * spk_rng.random::<f64>();
            let theta = 2.0 * std::f64::consts::PI * f / sample_rate as f64;
            let r = (-std::f64::consts::PI * bw / sample_rate as f64).exp();
            (2.0 * r * theta.cos(), -r * r)
        })
        .collect();

    let mut sig_rng = rng_from(derive(seed, &[tag("carrier"), speaker_id]), &[]);
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut sig_rng);
            z
        })
        .collect();
    let mut carrier = vec![0.0; n];
    for &(a1, a2) in &resonators {
        let (mut y1, mut y2) = (0.0, 0.0);
        for i in 0..n {
            let y = noise[i] + a1 * y1 + a2 * y2;
            carrier[i] += y;
            y2 = y1;
            y1 = y;
        }
    }

    // smooth positive envelope from a handful of 2-8 Hz sinusoids
    let mut env_rng = rng_from(derive(seed, &[tag("envelope"), speaker_id]), &[]);
    let parts: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                0.5 + 0.5 * env_rng.random::<f64>(),
                2.0 + 6.0 * env_rng.random::<f64>(),
                2.0 * std::f64::consts::PI * env_rng.random::<f64>(),
            )
        })
        .collect();
    let mut mod_sig = vec![0.0; n];
    let mut peak = 0.0f64;
    for (i, m) in mod_sig.iter_mut().enumerate() {
        let t = i as f64 / sample_rate as f64;
        let mut acc = 0.0;
        for &(a, f, ph) in &parts {
            acc += a * (2.0 * std::f64::consts::PI * f * t + ph).sin();
        }
        *m = acc;
        peak = peak.max(acc.abs());
    }
    let depth = 0.85 / peak.max(1e-12);
    let mut out: Vec<f64> = carrier
        .iter()
        .zip(&mod_sig)
        .map(|(c, m)| c * (1.0 + depth * m))
        .collect();
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        for v in out.iter_mut() {
            *v /= rms;
        }
    }
    Ok(out)
}

/// Rectify, low-pass at 8 Hz (windowed-sinc FIR on a decimated grid),
/// resample to 128 Hz, normalize to unit RMS.
pub fn extract_envelope(wav: &[f64], sample_rate: usize) -> Vec<f64> {
    let t_eeg = ((wav.len() as f64 / sample_rate as f64) * EEG_RATE as f64).round() as usize;
    if wav.iter().all(|&v| v == 0.0) {
        return vec![0.0; t_eeg];
    }
    // mean-pool |x| down to roughly 1 kHz
    let pool = (sample_rate / 1000).max(1);
    let pooled_rate = sample_rate as f64 / pool as f64;
    let pooled: Vec<f64> = wav
        .chunks(pool)
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>() / c.len() as f64)
        .collect();
    // windowed-sinc low-pass, cutoff 8 Hz
    let half = (0.2 * pooled_rate).round() as usize; // 400 ms filter
    let taps = 2 * half + 1;
    let nu = 8.0 / pooled_rate;
    let mut h: Vec<f64> = (0..taps)
        .map(|i| {
            let x = i as f64 - half as f64;
            let sinc = if x == 0.0 {
                2.0 * nu
            } else {
                (2.0 * std::f64::consts::PI * nu * x).sin() / (std::f64::consts::PI * x)
            };
            let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (taps - 1) as f64).cos();
            sinc * w
        })
        .collect();
    let s: f64 = h.iter().sum();
    for v in h.iter_mut() {
        *v /= s;
    }
    // reflect-pad and convolve
    let p = pooled.len();
    let fetch = |i: isize| -> f64 {
        let idx = if i < 0 {
            (-i) as usize % p
        } else if i as usize >= p {
            let over = i as usize - p + 1;
            p - 1 - (over % p)
        } else {
            i as usize
        };
        pooled[idx.min(p - 1)]
    };
    let smooth: Vec<f64> = (0..p)
        .map(|i| {
            let mut acc = 0.0;
            for (j, &hv) in h.iter().enumerate() {
                acc += hv * fetch(i as isize + j as isize - half as isize);
            }
            acc
        })
        .collect();
    // linear resample to exactly t_eeg frames
    let mut env = vec![0.0; t_eeg];
    if t_eeg == 1 {
        env[0] = smooth[0];
    } else {
        for (t, e) in env.iter_mut().enumerate() {
            let num = t * (p - 1);
            let den = t_eeg - 1;
            let i0 = (num / den).min(p.saturating_sub(2));
            let w = (num - i0 * den) as f64 / den as f64;
            *e = (1.0 - w) * smooth[i0] + w * smooth[i0 + 1];
        }
    }
    let rms = (env.iter().map(|v| v * v).sum::<f64>() / t_eeg.max(1) as f64).sqrt();
    if rms > 0.0 {
        for v in env.iter_mut() {
            *v /= rms;
        }
    }
    env
}

/// Surrogate EEG: channel c = w_c * env + sigma * noise_c, with sigma set
/// so the total envelope-to-noise power ratio equals `eeg_snr_db` exactly.
pub fn gen_surrogate_eeg(
    att_env: &[f64],
    channels: usize,
    eeg_snr_db: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if channels == 0 {
        return Err(Error::contract("gen_surrogate_eeg: need at least 1 channel"));
    }
    let t = att_env.len();
    let mut rng = rng_from(derive(seed, &[tag("eeg")]), &[]);
    let weights: Vec<f64> = (0..channels).map(|_| 0.5 + rng.random::<f64>()).collect();
    let noise: Vec<f64> = (0..channels * t)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z
        })
        .collect();
    let env_pow: f64 = att_env.iter().map(|v| v * v).sum();
    let sig_pow: f64 = weights.iter().map(|w| w * w * env_pow).sum();
    let noise_pow: f64 = noise.iter().map(|v| v * v).sum();
    let sigma = if noise_pow > 0.0 && sig_pow > 0.0 {
        (sig_pow / noise_pow).sqrt() / 10f64.powf(eeg_snr_db / 20.0)
    } else {
        0.0
    };
    let mut out = vec![0.0; channels * t];
    for c in 0..channels {
        for i in 0..t {
            out[c * t + i] = weights[c] * att_env[i] + sigma * noise[c * t + i];
        }
    }
    Ok(out)
}

/// Build sample `index` of the corpus: two fresh speakers, a uniform
/// random mixing SNR, a pseudo-random attended side, and surrogate EEG
/// from the attended envelope.
pub fn make_sample(spec: &CorpusSpec, index: usize) -> Result<Sample> {
    if index >= spec.n_samples {
        return Err(Error::contract(format!(
            "make_sample: index {index} out of range ({} samples)",
            spec.n_samples
        )));
    }
    let idx = index as u64;
    let seed = derive(spec.master_seed, &[tag("sample"), idx]);
    let spk_a = derive(spec.master_seed, &[tag("speaker-pool"), 2 * idx]);
    let spk_b = derive(spec.master_seed, &[tag("speaker-pool"), 2 * idx + 1]);
    let src_a = gen_source(derive(seed, &[0]), spec.duration_s, spec.sample_rate, spk_a)?;
    let src_b = gen_source(derive(seed, &[1]), spec.duration_s, spec.sample_rate, spk_b)?;

    let mut mix_rng = rng_from(derive(seed, &[tag("mix")]), &[]);
    let (lo, hi) = spec.mix_snr_db;
    let snr = lo + (hi - lo) * mix_rng.random::<f64>();
    let attended_side = if mix_rng.random::<f64>() < 0.5 {
        Side::A
    } else {
        Side::B
    };
    let (att_raw, unatt_raw) = match attended_side {
        Side::A => (src_a, src_b),
        Side::B => (src_b, src_a),
    };
    let gain = 10f64.powf(-snr / 20.0);

    // headroom so the 16-bit files never clip: scale both sources by the
    // same factor, then form the mixture from the scaled signals
    let mut peak = 0.0f64;
    for (a, u) in att_raw.iter().zip(&unatt_raw) {
        peak = peak.max((a + gain * u).abs()).max(a.abs()).max((gain * u).abs());
    }
    let scale = 0.95 / peak.max(1e-9);
    let attended: Vec<f64> = att_raw.iter().map(|v| v * scale).collect();
    let unattended: Vec<f64> = unatt_raw.iter().map(|v| v * gain * scale).collect();
    let mixture: Vec<f64> = attended
        .iter()
        .zip(&unattended)
        .map(|(a, u)| a + u)
        .collect();

    let env = extract_envelope(&attended, spec.sample_rate);
    let eeg = gen_surrogate_eeg(&env, spec.n_channels, spec.eeg_snr_db, derive(seed, &[2]))?;
    Ok(Sample {
        mixture,
        attended,
        unattended,
        eeg,
        n_channels: spec.n_channels,
        attended_side,
        seed,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: usize,
    pub split: SplitKind,
    pub seed: u64,
    pub attended_side: Side,
    pub mixture: PathBuf,
    pub attended: PathBuf,
    pub unattended: PathBuf,
    pub eeg: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CorpusSpec,
    pub samples: Vec<SampleMeta>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Generate and write the whole corpus; the manifest lands last so a
/// directory with a manifest is always complete.
pub fn write_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest> {
    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir)?;
    let mut metas = Vec::with_capacity(spec.n_samples);
    for index in 0..spec.n_samples {
        let s = make_sample(spec, index)?;
        let base = format!("s{index:05}");
        let meta = SampleMeta {
            index,
            split: split_of(index, spec.n_samples),
            seed: s.seed,
            attended_side: s.attended_side,
            mixture: PathBuf::from(format!("samples/{base}_mix.wav")),
            attended: PathBuf::from(format!("samples/{base}_att.wav")),
            unattended: PathBuf::from(format!("samples/{base}_unatt.wav")),
            eeg: PathBuf::from(format!("samples/{base}_eeg.nxe")),
        };
        wav_write(&out_dir.join(&meta.mixture), &s.mixture, spec.sample_rate as u32)?;
        wav_write(&out_dir.join(&meta.attended), &s.attended, spec.sample_rate as u32)?;
        wav_write(
            &out_dir.join(&meta.unattended),
            &s.unattended,
            spec.sample_rate as u32,
        )?;
        let t_eeg = s.eeg.len() / spec.n_channels;
        eeg_write(
            &out_dir.join(&meta.eeg),
            &EegMatrix::from_f64(spec.n_channels, t_eeg, &s.eeg),
        )?;
        metas.push(meta);
    }
    let manifest = Manifest {
        spec: spec.clone(),
        samples: metas,
    };
    let tmp = out_dir.join(format!("{MANIFEST_NAME}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest).map_err(to_io)?)?;
    fs::rename(&tmp, out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = fs::read(&path).map_err(|e| {
        Error::data(format!("no corpus manifest at {}: {e}", path.display()))
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        offset: 0,
        msg: format!("bad manifest: {e}"),
    })
}

/// Load one sample back from disk (file-quantized waveforms).
pub fn load_sample(dir: &Path, meta: &SampleMeta, spec: &CorpusSpec) -> Result<Sample> {
    let (mixture, _) = wav_read(&dir.join(&meta.mixture))?;
    let (attended, _) = wav_read(&dir.join(&meta.attended))?;
    let (unattended, _) = wav_read(&dir.join(&meta.unattended))?;
    let eeg = eeg_read(&dir.join(&meta.eeg))?;
    if eeg.channels != spec.n_channels {
        return Err(Error::data(format!(
            "eeg file {} has {} channels but the corpus spec says {}",
            meta.eeg.display(),
            eeg.channels,
            spec.n_channels
        )));
    }
    Ok(Sample {
        mixture,
        attended,
        unattended,
        eeg: eeg.to_f64(),
        n_channels: eeg.channels,
        attended_side: meta.attended_side,
        seed: meta.seed,
    })
}

fn to_io(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Pearson correlation of two equal-length signals.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}
