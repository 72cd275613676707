//! Elementwise and reduction operations with analytic backward passes.

use super::graph::Graph;
use super::shape::{broadcast_shape, numel, reduce_to_shape, zip_broadcast2};
use super::Tensor;
use crate::error::{Error, Result};

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable softplus: ln(1 + e^x) without overflow.
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    fn unary<F, D>(&self, x: &Tensor, f: F, df: D) -> Result<Tensor>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let parents = self.parent_ids(&[x])?;
        let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_vec(x.shape().to_vec(), data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let xd = x.data_arc();
        let yd = out.data_arc();
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let dx = g
                    .iter()
                    .zip(xd.iter().zip(yd.iter()))
                    .map(|(gi, (xi, yi))| gi * df(*xi, *yi))
                    .collect();
                vec![Some(dx)]
            }),
        ))
    }

    fn binary<F>(&self, op: &str, a: &Tensor, b: &Tensor, f: F, kind: BinaryKind) -> Result<Tensor>
    where
        F: Fn(f64, f64) -> f64,
    {
        let parents = self.parent_ids(&[a, b])?;
        let oshape = broadcast_shape(a.shape(), b.shape())
            .map_err(|_| super::shape_err(op, a.shape(), b.shape()))?;
        let mut data = vec![0.0; numel(&oshape)];
        zip_broadcast2(a.shape(), b.shape(), &oshape, |o, ai, bi| {
            data[o] = f(a.data()[ai], b.data()[bi]);
        });
        let out = Tensor::from_vec(oshape.clone(), data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let (ad, bd) = (a.data_arc(), b.data_arc());
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                zip_broadcast2(&ash, &bsh, &oshape, |o, ai, bi| {
                    let (x, y, gi) = (ad[ai], bd[bi], g[o]);
                    match kind {
                        BinaryKind::Add => {
                            ga[o] = gi;
                            gb[o] = gi;
                        }
                        BinaryKind::Sub => {
                            ga[o] = gi;
                            gb[o] = -gi;
                        }
                        BinaryKind::Mul => {
                            ga[o] = gi * y;
                            gb[o] = gi * x;
                        }
                        BinaryKind::Div => {
                            ga[o] = gi / y;
                            gb[o] = -gi * x / (y * y);
                        }
                    }
                });
                vec![
                    Some(reduce_to_shape(&ga, &oshape, &ash)),
                    Some(reduce_to_shape(&gb, &oshape, &bsh)),
                ]
            }),
        ))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, BinaryKind::Add)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, BinaryKind::Sub)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, BinaryKind::Mul)
    }

    /// Elementwise division. The caller keeps the denominator away from zero;
    /// the loss paths in this crate do so with an epsilon floor.
    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("div", a, b, |x, y| x / y, BinaryKind::Div)
    }

    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(x, |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.unary(x, |v| v + c, |_, _| 1.0)
    }

    pub fn neg(&self, x: &Tensor) -> Result<Tensor> {
        self.scale(x, -1.0)
    }

    /// Exponential. Inputs above 700 would overflow f64 and are rejected.
    pub fn exp(&self, x: &Tensor) -> Result<Tensor> {
        if x.data().iter().any(|&v| v > 700.0) {
            return Err(Error::domain("exp: input exceeds 700, would overflow"));
        }
        self.unary(x, |v| v.exp(), |_, y| y)
    }

    /// Natural logarithm; errors on any non-positive element.
    pub fn log(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(v) = x.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::domain(format!("log of non-positive value {v}")));
        }
        self.unary(x, |v| v.ln(), |xv, _| 1.0 / xv)
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    /// SiLU gating: x * sigmoid(x).
    pub fn silu(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, |v| v * sigmoid_scalar(v), |xv, _| {
            let s = sigmoid_scalar(xv);
            s * (1.0 + xv * (1.0 - s))
        })
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, |v| v.max(0.0), |xv, _| if xv > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&self, x: &Tensor) -> Result<Tensor> {
        self.unary(x, softplus_scalar, |xv, _| sigmoid_scalar(xv))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self, x: &Tensor) -> Result<Tensor> {
        let parents = self.parent_ids(&[x])?;
        let s: f64 = x.data().iter().sum();
        let out = Tensor::scalar(s);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let n = x.len();
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        ))
    }

    pub fn mean_all(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.len().max(1) as f64;
        let s = self.sum_all(x)?;
        self.scale(&s, 1.0 / n)
    }

    /// Sum along one axis. `keepdim` keeps a size-1 axis in place.
    pub fn sum_axis(&self, x: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(Error::shape(format!(
                "sum_axis: axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let parents = self.parent_ids(&[x])?;
        let sh = x.shape();
        let outer: usize = sh[..axis].iter().product();
        let mid = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    data[obase + i] += xd[base + i];
                }
            }
        }
        let mut oshape: Vec<usize> = sh.to_vec();
        if keepdim {
            oshape[axis] = 1;
        } else {
            oshape.remove(axis);
        }
        let out = Tensor::from_vec(oshape, data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let xlen = x.len();
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let mut dx = vec![0.0; xlen];
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        let gbase = o * inner;
                        for i in 0..inner {
                            dx[base + i] = g[gbase + i];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Mean along one axis.
    pub fn mean_axis(&self, x: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = x.shape()[axis] as f64;
        let s = self.sum_axis(x, axis, keepdim)?;
        self.scale(&s, 1.0 / n)
    }
}

#[derive(Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}
