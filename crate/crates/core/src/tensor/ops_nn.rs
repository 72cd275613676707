//! Softmax, layer normalization, and dropout.

use super::graph::Graph;
use super::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use rayon::prelude::*;
use std::sync::Arc;

/// Train/eval switch for stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Graph {
    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(Error::shape(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let parents = self.parent_ids(&[x])?;
        let sh = x.shape();
        let outer: usize = sh[..axis].iter().product();
        let mid = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let mut data = vec![0.0; x.len()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| (o * mid + m) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for m in 0..mid {
                    mx = mx.max(xd[at(m)]);
                }
                let mut z = 0.0;
                for m in 0..mid {
                    let e = (xd[at(m)] - mx).exp();
                    data[at(m)] = e;
                    z += e;
                }
                for m in 0..mid {
                    data[at(m)] /= z;
                }
            }
        }
        let out = Tensor::from_vec(sh.to_vec(), data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let yd = out.data_arc();
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                // dx = y * (g - sum(g*y) along axis)
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |m: usize| (o * mid + m) * inner + i;
                        let mut dot = 0.0;
                        for m in 0..mid {
                            dot += g[at(m)] * yd[at(m)];
                        }
                        for m in 0..mid {
                            dx[at(m)] = yd[at(m)] * (g[at(m)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    /// The pre-affine output has mean 0 and variance 1 per position (up to
    /// the eps regularizer).
    pub fn layer_norm(
        &self,
        x: &Tensor,
        gain: &Tensor,
        bias: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm: scalar input".to_string()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(super::shape_err("layer_norm", x.shape(), gain.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm: eps must be positive"));
        }
        let parents = self.parent_ids(&[x, gain, bias])?;
        let rows = x.len() / d;
        let xd = x.data();
        let gd = gain.data();
        let bd = bias.data();
        let mut data = vec![0.0; x.len()];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for j in 0..d {
                data[r * d + j] = (row[j] - mu) * rs * gd[j] + bd[j];
            }
        }
        let out = Tensor::from_vec(x.shape().to_vec(), data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let xd = x.data_arc();
        let gd = gain.data_arc();
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let xrow = &xd[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xrow[j] - mu) * rs;
                        let dxhat = grow[j] * gd[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let xhat = (xrow[j] - mu) * rs;
                        let dxhat = grow[j] * gd[j];
                        dx[r * d + j] =
                            rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                    }
                }
                vec![Some(dx), Some(dgain), Some(dbias)]
            }),
        ))
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-p) at train time so
    /// the expectation matches the input; eval mode is the identity.
    pub fn dropout(
        &self,
        x: &Tensor,
        p: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!(
                "dropout: p must satisfy 0 <= p < 1, got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            // identity, but still pass gradients through
            return self.scale(x, 1.0);
        }
        let parents = self.parent_ids(&[x])?;
        let keep = 1.0 / (1.0 - p);
        let mask: Arc<Vec<f64>> = Arc::new(
            (0..x.len())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect(),
        );
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let dx = g.iter().zip(mask.iter()).map(|(gi, m)| gi * m).collect();
                vec![Some(dx)]
            }),
        ))
    }
}

const ATTN_BLOCK: usize = 128;

impl Graph {
    /// Multi-head scaled dot-product attention, fused: per head,
    /// softmax(Q K^T / sqrt(dh)) V. Attention weights are recomputed in the
    /// backward pass instead of being saved, so memory stays linear in the
    /// sequence length. Head outputs land interleaved in the model axis;
    /// projections around this op live in the calling layer.
    pub fn attention(&self, q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
        if q.rank() != 3 || k.rank() != 3 || v.rank() != 3 {
            return Err(super::shape_err("attention", q.shape(), k.shape()));
        }
        let (b, tq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let (bk, tk, dk) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        if bk != b || dk != d || v.shape() != [b, tk, d] {
            return Err(super::shape_err("attention", q.shape(), k.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!(
                "attention: model width {d} not divisible by {heads} heads"
            )));
        }
        let parents = self.parent_ids(&[q, k, v])?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut data = vec![0.0; b * tq * d];
        data.par_chunks_mut(tq * d).enumerate().for_each(|(bi, out)| {
            attn_forward_item(
                &qd[bi * tq * d..],
                &kd[bi * tk * d..],
                &vd[bi * tk * d..],
                out,
                tq,
                tk,
                d,
                heads,
                scale,
            );
        });
        let out = Tensor::from_vec(vec![b, tq, d], data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let (qd, kd, vd) = (q.data_arc(), k.data_arc(), v.data_arc());
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let mut dq = vec![0.0; qd.len()];
                let mut dkk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let items: Vec<(&mut [f64], (&mut [f64], &mut [f64]))> = dq
                    .chunks_mut(tq * d)
                    .zip(dkk.chunks_mut(tk * d).zip(dv.chunks_mut(tk * d)))
                    .collect();
                items
                    .into_par_iter()
                    .enumerate()
                    .for_each(|(bi, (dqb, (dkb, dvb)))| {
                        attn_backward_item(
                            &qd[bi * tq * d..],
                            &kd[bi * tk * d..],
                            &vd[bi * tk * d..],
                            &g[bi * tq * d..],
                            dqb,
                            dkb,
                            dvb,
                            tq,
                            tk,
                            d,
                            heads,
                            scale,
                        );
                    });
                vec![Some(dq), Some(dkk), Some(dv)]
            }),
        ))
    }
}

/// One batch item of the attention forward pass, all heads.
#[allow(clippy::too_many_arguments)]
fn attn_forward_item(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &mut [f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    scale: f64,
) {
    use super::ops_linalg::gemm_strided;
    let dh = d / heads;
    let mut scores = vec![0.0; ATTN_BLOCK.min(tq) * tk];
    for h in 0..heads {
        let ho = h * dh;
        let mut i0 = 0;
        while i0 < tq {
            let bs = ATTN_BLOCK.min(tq - i0);
            // S = scale * Q_blk @ K^T
            gemm_strided(
                bs,
                dh,
                tk,
                scale,
                &q[i0 * d + ho..],
                d as isize,
                1,
                &k[ho..],
                1,
                d as isize,
                0.0,
                &mut scores,
                tk as isize,
                1,
            );
            softmax_rows(&mut scores[..bs * tk], tk);
            // O_blk = P @ V
            gemm_strided(
                bs,
                tk,
                dh,
                1.0,
                &scores,
                tk as isize,
                1,
                &v[ho..],
                d as isize,
                1,
                0.0,
                &mut out[i0 * d + ho..],
                d as isize,
                1,
            );
            i0 += bs;
        }
    }
}

/// One batch item of the attention backward pass; recomputes the softmax
/// weights per query block.
#[allow(clippy::too_many_arguments)]
fn attn_backward_item(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    g: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
    tq: usize,
    tk: usize,
    d: usize,
    heads: usize,
    scale: f64,
) {
    use super::ops_linalg::gemm_strided;
    let dh = d / heads;
    let blk = ATTN_BLOCK.min(tq);
    let mut scores = vec![0.0; blk * tk];
    let mut dp = vec![0.0; blk * tk];
    for h in 0..heads {
        let ho = h * dh;
        let mut i0 = 0;
        while i0 < tq {
            let bs = ATTN_BLOCK.min(tq - i0);
            gemm_strided(
                bs,
                dh,
                tk,
                scale,
                &q[i0 * d + ho..],
                d as isize,
                1,
                &k[ho..],
                1,
                d as isize,
                0.0,
                &mut scores,
                tk as isize,
                1,
            );
            softmax_rows(&mut scores[..bs * tk], tk);
            // dV += P^T @ dO
            gemm_strided(
                tk,
                bs,
                dh,
                1.0,
                &scores,
                1,
                tk as isize,
                &g[i0 * d + ho..],
                d as isize,
                1,
                1.0,
                &mut dv[ho..],
                d as isize,
                1,
            );
            // dP = dO @ V^T
            gemm_strided(
                bs,
                dh,
                tk,
                1.0,
                &g[i0 * d + ho..],
                d as isize,
                1,
                &v[ho..],
                1,
                d as isize,
                0.0,
                &mut dp,
                tk as isize,
                1,
            );
            // dS = P .* (dP - rowsum(dP .* P)), then scale
            for r in 0..bs {
                let p = &scores[r * tk..(r + 1) * tk];
                let dpr = &mut dp[r * tk..(r + 1) * tk];
                let dot: f64 = p.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                for (pi, di) in p.iter().zip(dpr.iter_mut()) {
                    *di = pi * (*di - dot) * scale;
                }
            }
            // dQ_blk = dS @ K
            gemm_strided(
                bs,
                tk,
                dh,
                1.0,
                &dp,
                tk as isize,
                1,
                &k[ho..],
                d as isize,
                1,
                0.0,
                &mut dq[i0 * d + ho..],
                d as isize,
                1,
            );
            // dK += dS^T @ Q_blk
            gemm_strided(
                tk,
                bs,
                dh,
                1.0,
                &dp,
                1,
                tk as isize,
                &q[i0 * d + ho..],
                d as isize,
                1,
                1.0,
                &mut dk[ho..],
                d as isize,
                1,
            );
            i0 += bs;
        }
    }
}

fn softmax_rows(scores: &mut [f64], width: usize) {
    for row in scores.chunks_mut(width) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s - mx).exp();
            z += *s;
        }
        for s in row.iter_mut() {
            *s /= z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform_on_constant() {
        let g = Graph::new();
        let x = Tensor::full(&[5], 3.7);
        let y = g.softmax(&x, 0).unwrap();
        for v in y.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let s: f64 = y.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_saturates_on_large_margin() {
        let g = Graph::new();
        let x = Tensor::from_vec(vec![3], vec![1e3, 0.0, 0.0]);
        let y = g.softmax(&x, 0).unwrap();
        assert!(y.data()[0] >= 1.0 - 1e-12);
    }

    #[test]
    fn layer_norm_constant_input_is_bias() {
        let g = Graph::new();
        let x = Tensor::full(&[2, 4], 5.0);
        let gain = Tensor::ones(&[4]);
        let bias = Tensor::zeros(&[4]);
        let y = g.layer_norm(&x, &gain, &bias, 1e-5).unwrap();
        for v in y.data() {
            assert!(v.abs() < 1e-9, "zero-variance rows normalize to zero");
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&mut rng, &[3, 16], 2.5);
        let gain = Tensor::ones(&[16]);
        let bias = Tensor::zeros(&[16]);
        let y = g.layer_norm(&x, &gain, &bias, 1e-12).unwrap();
        for r in 0..3 {
            let row = &y.data()[r * 16..(r + 1) * 16];
            let mu = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_p0() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_vec(vec![4], vec![1., -2., 3., 4.]);
        let y = g.dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        let z = g.dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(z.data(), x.data());
        assert!(g.dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn attention_uniform_when_keys_identical() {
        // all keys equal -> uniform weights -> output is the mean of values
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = Tensor::from_vec(vec![1, 3, 4], [1.0, -0.5, 2.0, 0.3].repeat(3));
        let q = Tensor::randn(&mut rng, &[1, 2, 4], 1.0);
        let v = Tensor::randn(&mut rng, &[1, 3, 4], 1.0);
        let y = g.attention(&q, &k, &v, 2).unwrap();
        let mean: Vec<f64> = (0..4)
            .map(|j| (0..3).map(|t| v.at(&[0, t, j])).sum::<f64>() / 3.0)
            .collect();
        for r in 0..2 {
            for j in 0..4 {
                assert!((y.at(&[0, r, j]) - mean[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_saturates_on_dominant_key() {
        // one key aligned with the query at huge magnitude -> output ~ its value
        let g = Graph::new();
        let q = Tensor::from_vec(vec![1, 1, 2], vec![1e3, 0.0]);
        let k = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 0.0, -1.0, 0.0]);
        let v = Tensor::from_vec(vec![1, 2, 2], vec![7.0, -3.0, 100.0, 100.0]);
        let y = g.attention(&q, &k, &v, 1).unwrap();
        assert!((y.at(&[0, 0, 0]) - 7.0).abs() < 1e-9);
        assert!((y.at(&[0, 0, 1]) + 3.0).abs() < 1e-9);
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let g = Graph::new();
        let q = Tensor::zeros(&[1, 2, 6]);
        assert!(g.attention(&q, &q, &q, 4).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let g = Graph::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::full(&[1], 2.0);
        let trials = 100_000;
        let mut acc = 0.0;
        for _ in 0..trials {
            acc += g.dropout(&x, 0.3, Mode::Train, &mut rng).unwrap().item();
        }
        let mean = acc / trials as f64;
        assert!(
            (mean - 2.0).abs() / 2.0 < 0.01,
            "empirical mean {mean} deviates more than 1%"
        );
    }
}
