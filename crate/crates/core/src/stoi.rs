//! Short-time objective intelligibility, following the one-third-octave
//! band correlation construction. Simplified relative to the reference
//! implementation in one place: resampling to the 10 kHz analysis rate
//! uses linear interpolation rather than a polyphase filter bank.

use crate::error::{Error, Result};
use rustfft::{num_complex::Complex64, FftPlanner};

const FS_ANALYSIS: f64 = 10_000.0;
const FRAME: usize = 256;
const HOP: usize = 128;
const NFFT: usize = 512;
const N_BANDS: usize = 15;
const FIRST_CF: f64 = 150.0;
const SEG: usize = 30; // 384 ms of frames
const DYN_RANGE_DB: f64 = 40.0;
const CLIP_DB: f64 = -15.0;

/// STOI score in [0, 1]; higher is more intelligible.
pub fn stoi(est: &[f64], reference: &[f64], sample_rate: usize) -> Result<f64> {
    if sample_rate < 8000 {
        return Err(Error::contract(format!(
            "stoi: sample rate {sample_rate} below 8000 Hz"
        )));
    }
    if est.len() != reference.len() {
        return Err(Error::contract(format!(
            "stoi: length mismatch ({} vs {})",
            est.len(),
            reference.len()
        )));
    }
    let min_len = (0.384 * sample_rate as f64).ceil() as usize;
    if reference.len() < min_len {
        return Err(Error::contract(format!(
            "stoi: need at least 384 ms of signal ({min_len} samples at {sample_rate} Hz), got {}",
            reference.len()
        )));
    }
    let x = resample_linear(reference, sample_rate as f64, FS_ANALYSIS);
    let y = resample_linear(est, sample_rate as f64, FS_ANALYSIS);

    // frame both, drop frames where the reference is silent
    let window: Vec<f64> = (0..FRAME)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / (FRAME - 1) as f64).cos()))
        .collect();
    let frames = (x.len().saturating_sub(FRAME)) / HOP + 1;
    if frames < SEG {
        return Err(Error::contract(
            "stoi: too few analysis frames after resampling",
        ));
    }
    let mut energies = Vec::with_capacity(frames);
    for m in 0..frames {
        let e: f64 = (0..FRAME)
            .map(|n| {
                let v = x[m * HOP + n] * window[n];
                v * v
            })
            .sum();
        energies.push(10.0 * (e + 1e-300).log10());
    }
    let emax = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..frames)
        .filter(|&m| energies[m] > emax - DYN_RANGE_DB)
        .collect();
    if keep.len() < SEG {
        return Err(Error::contract(
            "stoi: fewer than 30 active frames in the reference",
        ));
    }

    // one-third-octave band magnitudes per kept frame
    let bands = third_octave_bins();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(NFFT);
    let mut xb = vec![0.0; keep.len() * N_BANDS];
    let mut yb = vec![0.0; keep.len() * N_BANDS];
    let mut buf = vec![Complex64::default(); NFFT];
    for (mi, &m) in keep.iter().enumerate() {
        for (sig, out) in [(&x, &mut xb), (&y, &mut yb)] {
            for (n, b) in buf.iter_mut().enumerate() {
                *b = if n < FRAME {
                    Complex64::new(sig[m * HOP + n] * window[n], 0.0)
                } else {
                    Complex64::default()
                };
            }
            fft.process(&mut buf);
            for (j, (lo, hi)) in bands.iter().enumerate() {
                let p: f64 = (*lo..*hi).map(|k| buf[k].norm_sqr()).sum();
                out[mi * N_BANDS + j] = p.sqrt();
            }
        }
    }

    // short-time segment correlations with normalization and clipping
    let clip_factor = 1.0 + 10.0_f64.powf(-CLIP_DB / 20.0);
    let mut acc = 0.0;
    let mut count = 0usize;
    let mut xs = [0.0; SEG];
    let mut ys = [0.0; SEG];
    for m in SEG - 1..keep.len() {
        for j in 0..N_BANDS {
            for s in 0..SEG {
                xs[s] = xb[(m + 1 - SEG + s) * N_BANDS + j];
                ys[s] = yb[(m + 1 - SEG + s) * N_BANDS + j];
            }
            let xn: f64 = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let yn: f64 = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            if xn <= 0.0 {
                continue;
            }
            let scale = if yn > 0.0 { xn / yn } else { 0.0 };
            let mut yc = [0.0; SEG];
            for s in 0..SEG {
                yc[s] = (ys[s] * scale).min(clip_factor * xs[s]);
            }
            let xm: f64 = xs.iter().sum::<f64>() / SEG as f64;
            let ym: f64 = yc.iter().sum::<f64>() / SEG as f64;
            let mut num = 0.0;
            let mut dx = 0.0;
            let mut dy = 0.0;
            for s in 0..SEG {
                let a = xs[s] - xm;
                let b = yc[s] - ym;
                num += a * b;
                dx += a * a;
                dy += b * b;
            }
            if dx > 0.0 && dy > 0.0 {
                acc += num / (dx * dy).sqrt();
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::contract("stoi: no valid segments"));
    }
    Ok((acc / count as f64).clamp(0.0, 1.0))
}

fn resample_linear(x: &[f64], from: f64, to: f64) -> Vec<f64> {
    if (from - to).abs() < 1e-9 {
        return x.to_vec();
    }
    let out_len = ((x.len() as f64) * to / from).round() as usize;
    let ratio = from / to;
    (0..out_len)
        .map(|i| {
            let p = i as f64 * ratio;
            let i0 = (p.floor() as usize).min(x.len() - 1);
            let i1 = (i0 + 1).min(x.len() - 1);
            let w = p - i0 as f64;
            (1.0 - w) * x[i0] + w * x[i1]
        })
        .collect()
}

/// FFT bin ranges [lo, hi) of 15 one-third-octave bands from 150 Hz at the
/// 10 kHz analysis rate.
fn third_octave_bins() -> Vec<(usize, usize)> {
    let bin_hz = FS_ANALYSIS / NFFT as f64;
    (0..N_BANDS)
        .map(|j| {
            let cf = FIRST_CF * 2f64.powf(j as f64 / 3.0);
            let lo = cf * 2f64.powf(-1.0 / 6.0);
            let hi = cf * 2f64.powf(1.0 / 6.0);
            let lo_bin = (lo / bin_hz).round() as usize;
            let hi_bin = ((hi / bin_hz).round() as usize).min(NFFT / 2);
            (lo_bin, hi_bin.max(lo_bin + 1))
        })
        .collect()
}
