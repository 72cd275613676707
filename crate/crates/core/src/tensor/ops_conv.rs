//! 1-D convolutions: strided cross-correlation, its adjoint (transposed
//! convolution), and the causal depthwise variant used inside Mamba blocks.

use super::graph::Graph;
use super::Tensor;
use crate::error::{Error, Result};
use rayon::prelude::*;

impl Graph {
    /// Strided 1-D convolution in the cross-correlation convention (no
    /// kernel flip). x: [B, C_in, T], w: [C_out, C_in, L].
    pub fn conv1d(&self, x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
        if x.rank() != 3 || w.rank() != 3 {
            return Err(super::shape_err("conv1d", x.shape(), w.shape()));
        }
        let (b, c_in, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, w_cin, l) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if c_in != w_cin {
            return Err(super::shape_err("conv1d", x.shape(), w.shape()));
        }
        if stride == 0 {
            return Err(Error::config("conv1d: stride must be >= 1"));
        }
        if t < l {
            return Err(Error::data(format!(
                "conv1d: input length {t} shorter than kernel {l}"
            )));
        }
        let t_out = (t - l) / stride + 1;
        let parents = self.parent_ids(&[x, w])?;
        let xd = x.data();
        let wd = w.data();
        let mut data = vec![0.0; b * c_out * t_out];
        data.par_chunks_mut(t_out).enumerate().for_each(|(row, out)| {
            let bi = row / c_out;
            let co = row % c_out;
            for (ti, o) in out.iter_mut().enumerate() {
                let start = ti * stride;
                let mut acc = 0.0;
                for ci in 0..c_in {
                    let xrow = &xd[(bi * c_in + ci) * t + start..];
                    let wrow = &wd[(co * c_in + ci) * l..(co * c_in + ci) * l + l];
                    for (xi, wi) in xrow[..l].iter().zip(wrow) {
                        acc += xi * wi;
                    }
                }
                *o = acc;
            }
        });
        let out = Tensor::from_vec(vec![b, c_out, t_out], data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let xd = x.data_arc();
        let wd = w.data_arc();
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                // dx: gather over every (t_out, l) pair hitting each input position
                let mut dx = vec![0.0; xd.len()];
                dx.par_chunks_mut(t).enumerate().for_each(|(row, dxrow)| {
                    let bi = row / c_in;
                    let ci = row % c_in;
                    for (u, slot) in dxrow.iter_mut().enumerate() {
                        let t_lo = if u + 1 >= l { (u + 1 - l) / stride + usize::from((u + 1 - l) % stride != 0) } else { 0 };
                        let t_hi = (u / stride).min(t_out.saturating_sub(1));
                        let mut acc = 0.0;
                        for ti in t_lo..=t_hi.min(t_out - 1) {
                            let li = u - ti * stride;
                            if li < l {
                                for co in 0..c_out {
                                    acc += g[(bi * c_out + co) * t_out + ti]
                                        * wd[(co * c_in + ci) * l + li];
                                }
                            }
                        }
                        *slot = acc;
                    }
                });
                // dw: accumulate over batch and time
                let mut dw = vec![0.0; wd.len()];
                for bi in 0..b {
                    for co in 0..c_out {
                        let grow = &g[(bi * c_out + co) * t_out..(bi * c_out + co + 1) * t_out];
                        for ci in 0..c_in {
                            let xrow = &xd[(bi * c_in + ci) * t..(bi * c_in + ci + 1) * t];
                            let wbase = (co * c_in + ci) * l;
                            for li in 0..l {
                                let mut acc = 0.0;
                                for (ti, gv) in grow.iter().enumerate() {
                                    acc += gv * xrow[ti * stride + li];
                                }
                                dw[wbase + li] += acc;
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dw)]
            }),
        ))
    }

    /// Transposed convolution, the exact adjoint of [`Graph::conv1d`] with
    /// respect to its input: <conv1d(x,w), y> == <x, conv_transpose1d(y,w)>.
    /// x: [B, C_out, T_in], w: [C_out, C_in, L] -> [B, C_in, (T_in-1)*stride + L].
    pub fn conv_transpose1d(&self, x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
        if x.rank() != 3 || w.rank() != 3 {
            return Err(super::shape_err("conv_transpose1d", x.shape(), w.shape()));
        }
        let (b, c_out, t_in) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (w_cout, c_in, l) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        if c_out != w_cout {
            return Err(super::shape_err("conv_transpose1d", x.shape(), w.shape()));
        }
        if stride == 0 {
            return Err(Error::config("conv_transpose1d: stride must be >= 1"));
        }
        if t_in == 0 {
            return Err(Error::data("conv_transpose1d: empty input".to_string()));
        }
        let t_out = (t_in - 1) * stride + l;
        let parents = self.parent_ids(&[x, w])?;
        let xd = x.data();
        let wd = w.data();
        let mut data = vec![0.0; b * c_in * t_out];
        data.par_chunks_mut(t_out).enumerate().for_each(|(row, out)| {
            let bi = row / c_in;
            let ci = row % c_in;
            for (u, slot) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                let t_lo = if u + 1 >= l { (u + 1 - l).div_ceil(stride) } else { 0 };
                let t_hi = (u / stride).min(t_in - 1);
                for ti in t_lo..=t_hi {
                    let li = u - ti * stride;
                    if li < l {
                        for co in 0..c_out {
                            acc += xd[(bi * c_out + co) * t_in + ti]
                                * wd[(co * c_in + ci) * l + li];
                        }
                    }
                }
                *slot = acc;
            }
        });
        let out = Tensor::from_vec(vec![b, c_in, t_out], data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let xd = x.data_arc();
        let wd = w.data_arc();
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                // adjoint of the adjoint: dx is a plain strided conv of g with w
                let mut dx = vec![0.0; xd.len()];
                dx.par_chunks_mut(t_in).enumerate().for_each(|(row, dxrow)| {
                    let bi = row / c_out;
                    let co = row % c_out;
                    for (ti, slot) in dxrow.iter_mut().enumerate() {
                        let start = ti * stride;
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            let grow = &g[(bi * c_in + ci) * t_out + start..];
                            let wrow = &wd[(co * c_in + ci) * l..(co * c_in + ci) * l + l];
                            for (gv, wv) in grow[..l].iter().zip(wrow) {
                                acc += gv * wv;
                            }
                        }
                        *slot = acc;
                    }
                });
                let mut dw = vec![0.0; wd.len()];
                for bi in 0..b {
                    for co in 0..c_out {
                        let xrow = &xd[(bi * c_out + co) * t_in..(bi * c_out + co + 1) * t_in];
                        for ci in 0..c_in {
                            let grow = &g[(bi * c_in + ci) * t_out..(bi * c_in + ci + 1) * t_out];
                            let wbase = (co * c_in + ci) * l;
                            for li in 0..l {
                                let mut acc = 0.0;
                                for (ti, xv) in xrow.iter().enumerate() {
                                    acc += xv * grow[ti * stride + li];
                                }
                                dw[wbase + li] += acc;
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dw)]
            }),
        ))
    }

    /// Causal depthwise convolution over the time axis of [B, T, C] input,
    /// with left zero padding of L-1. w: [C, L], bias: [C].
    pub fn conv1d_depthwise_causal(
        &self,
        x: &Tensor,
        w: &Tensor,
        bias: &Tensor,
    ) -> Result<Tensor> {
        if x.rank() != 3 || w.rank() != 2 {
            return Err(super::shape_err("conv1d_depthwise_causal", x.shape(), w.shape()));
        }
        let (b, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (w_c, l) = (w.shape()[0], w.shape()[1]);
        if w_c != c || bias.shape() != [c] {
            return Err(super::shape_err("conv1d_depthwise_causal", x.shape(), w.shape()));
        }
        let parents = self.parent_ids(&[x, w, bias])?;
        let xd = x.data();
        let wd = w.data();
        let bd = bias.data();
        let mut data = vec![0.0; b * t * c];
        data.par_chunks_mut(t * c).enumerate().for_each(|(bi, out)| {
            let xrow = &xd[bi * t * c..(bi + 1) * t * c];
            for ti in 0..t {
                for ci in 0..c {
                    let mut acc = bd[ci];
                    // y[t] = sum_l x[t - (L-1) + l] * w[l]
                    for li in 0..l {
                        let src = ti as isize - (l as isize - 1) + li as isize;
                        if src >= 0 {
                            acc += xrow[src as usize * c + ci] * wd[ci * l + li];
                        }
                    }
                    out[ti * c + ci] = acc;
                }
            }
        });
        let out = Tensor::from_vec(vec![b, t, c], data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let xd = x.data_arc();
        let wd = w.data_arc();
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let mut dx = vec![0.0; xd.len()];
                dx.par_chunks_mut(t * c).enumerate().for_each(|(bi, dxr)| {
                    let grow = &g[bi * t * c..(bi + 1) * t * c];
                    for ti in 0..t {
                        for ci in 0..c {
                            // positions t' whose window includes ti: t' = ti + (L-1) - l
                            let mut acc = 0.0;
                            for li in 0..l {
                                let dst = ti + (l - 1) - li;
                                if dst < t {
                                    acc += grow[dst * c + ci] * wd[ci * l + li];
                                }
                            }
                            dxr[ti * c + ci] = acc;
                        }
                    }
                });
                let mut dw = vec![0.0; wd.len()];
                let mut dbias = vec![0.0; c];
                for bi in 0..b {
                    let xrow = &xd[bi * t * c..(bi + 1) * t * c];
                    let grow = &g[bi * t * c..(bi + 1) * t * c];
                    for ti in 0..t {
                        for ci in 0..c {
                            let gv = grow[ti * c + ci];
                            dbias[ci] += gv;
                            for li in 0..l {
                                let src = ti as isize - (l as isize - 1) + li as isize;
                                if src >= 0 {
                                    dw[ci * l + li] += gv * xrow[src as usize * c + ci];
                                }
                            }
                        }
                    }
                }
                vec![Some(dx), Some(dw), Some(dbias)]
            }),
        ))
    }
}
