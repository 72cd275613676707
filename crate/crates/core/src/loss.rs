//! Scale-invariant SDR: the reported metric and its differentiable
//! negative-mean batch loss.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

/// Hard clamp bounds for the reported metric, in dB.
pub const SI_SDR_CLAMP_DB: f64 = 60.0;
const ENERGY_EPS: f64 = 1e-12;

/// Scale-invariant signal-to-distortion ratio in dB.
///
/// target = (<est, ref>/||ref||^2) ref;
/// value = 10 log10(||target||^2 / ||est - target||^2), clamped to
/// [-60, +60] when either energy underflows 1e-12. `remove_mean` subtracts
/// each signal's mean first (the training convention); the raw form keeps
/// the signals as given.
pub fn si_sdr(est: &[f64], reference: &[f64], remove_mean: bool) -> Result<f64> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::contract(format!(
            "si_sdr: length mismatch ({} vs {})",
            est.len(),
            reference.len()
        )));
    }
    let n = est.len() as f64;
    let (e_off, r_off) = if remove_mean {
        (
            est.iter().sum::<f64>() / n,
            reference.iter().sum::<f64>() / n,
        )
    } else {
        (0.0, 0.0)
    };
    let mut dot = 0.0;
    let mut rr = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let (e, r) = (e - e_off, r - r_off);
        dot += e * r;
        rr += r * r;
    }
    if rr <= ENERGY_EPS {
        return Err(Error::contract("si_sdr: reference signal has zero energy"));
    }
    let alpha = dot / rr;
    let mut tp = 0.0;
    let mut rp = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let (e, r) = (e - e_off, r - r_off);
        let t = alpha * r;
        tp += t * t;
        rp += (e - t) * (e - t);
    }
    if rp <= ENERGY_EPS {
        return Ok(SI_SDR_CLAMP_DB);
    }
    if tp <= ENERGY_EPS {
        return Ok(-SI_SDR_CLAMP_DB);
    }
    Ok((10.0 * (tp / rp).log10()).clamp(-SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))
}

/// Differentiable batch loss: mean over items of -SI-SDR(est, ref), means
/// removed. Instead of the metric's hard clamp, each log gets a smooth
/// floor of 1e-6 * (target energy + residual energy), which saturates the
/// value at +-60 dB without killing gradients.
pub fn neg_si_sdr_loss(g: &Graph, est: &Tensor, reference: &Tensor) -> Result<Tensor> {
    if est.shape() != reference.shape() || est.rank() != 2 {
        return Err(Error::contract(format!(
            "neg_si_sdr_loss: need matching [B, T] shapes, got {:?} vs {:?}",
            est.shape(),
            reference.shape()
        )));
    }
    let t_len = est.shape()[1];
    if t_len == 0 {
        return Err(Error::contract("neg_si_sdr_loss: empty signals"));
    }
    // reference is a constant: center it up front
    let rm = {
        let b = reference.shape()[0];
        let mut data = reference.data().to_vec();
        for row in data.chunks_mut(t_len) {
            let mu = row.iter().sum::<f64>() / t_len as f64;
            for v in row.iter_mut() {
                *v -= mu;
            }
        }
        for row in data.chunks(t_len) {
            let rr: f64 = row.iter().map(|v| v * v).sum();
            if rr <= ENERGY_EPS {
                return Err(Error::contract(
                    "neg_si_sdr_loss: a reference item has zero energy",
                ));
            }
        }
        Tensor::from_vec(vec![b, t_len], data)
    };
    let em = g.sub(est, &g.mean_axis(est, 1, true)?)?;
    let dot = g.sum_axis(&g.mul(&em, &rm)?, 1, true)?; // [B,1]
    let rr = g.sum_axis(&g.mul(&rm, &rm)?, 1, true)?; // [B,1] constant
    let alpha = g.div(&dot, &rr)?;
    let target = g.mul(&alpha, &rm)?;
    let resid = g.sub(&em, &target)?;
    let tp = g.sum_axis(&g.mul(&target, &target)?, 1, false)?; // [B]
    let rp = g.sum_axis(&g.mul(&resid, &resid)?, 1, false)?; // [B]
    let eps_s = g.add_scalar(&g.scale(&g.add(&tp, &rp)?, 1e-6)?, 1e-300)?;
    let num = g.log(&g.add(&tp, &eps_s)?)?;
    let den = g.log(&g.add(&rp, &eps_s)?)?;
    let sisdr = g.scale(&g.sub(&num, &den)?, 10.0 / std::f64::consts::LN_10)?;
    g.neg(&g.mean_all(&sisdr)?)
}
