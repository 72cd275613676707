//! Data-movement operations: reshape, transpose, flip, concat, slice.

use super::graph::Graph;
use super::shape::strides;
use super::Tensor;
use crate::error::{Error, Result};

impl Graph {
    /// Reinterpret the shape; element count must be preserved.
    pub fn reshape(&self, x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != x.len() {
            return Err(super::shape_err("reshape", x.shape(), new_shape));
        }
        let parents = self.parent_ids(&[x])?;
        let out = Tensor::from_vec(new_shape.to_vec(), x.data().to_vec());
        if !self.tracks(&parents) {
            return Ok(out);
        }
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| vec![Some(g.to_vec())]),
        ))
    }

    /// Swap two axes, materializing the permuted copy.
    pub fn transpose(&self, x: &Tensor, ax0: usize, ax1: usize) -> Result<Tensor> {
        let rank = x.rank();
        if ax0 >= rank || ax1 >= rank {
            return Err(Error::shape(format!(
                "transpose: axes ({ax0},{ax1}) out of range for shape {:?}",
                x.shape()
            )));
        }
        let parents = self.parent_ids(&[x])?;
        let mut oshape = x.shape().to_vec();
        oshape.swap(ax0, ax1);
        let data = permute_swap(x.data(), x.shape(), ax0, ax1);
        let out = Tensor::from_vec(oshape.clone(), data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| vec![Some(permute_swap(g, &oshape, ax0, ax1))]),
        ))
    }

    /// Reverse the order of elements along one axis. An involution.
    pub fn flip(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(Error::shape(format!(
                "flip: axis {axis} out of range for shape {:?}",
                x.shape()
            )));
        }
        let parents = self.parent_ids(&[x])?;
        let sh = x.shape().to_vec();
        let data = flip_data(x.data(), &sh, axis);
        let out = Tensor::from_vec(sh.clone(), data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| vec![Some(flip_data(g, &sh, axis))]),
        ))
    }

    /// Concatenate along an axis; all other extents must agree.
    pub fn concat(&self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::contract("concat of zero tensors"));
        }
        let rank = xs[0].rank();
        if axis >= rank {
            return Err(Error::shape(format!(
                "concat: axis {axis} out of range for shape {:?}",
                xs[0].shape()
            )));
        }
        let mut oshape = xs[0].shape().to_vec();
        let mut axis_total = 0;
        for t in xs {
            if t.rank() != rank {
                return Err(super::shape_err("concat", xs[0].shape(), t.shape()));
            }
            for d in 0..rank {
                if d != axis && t.shape()[d] != oshape[d] {
                    return Err(super::shape_err("concat", xs[0].shape(), t.shape()));
                }
            }
            axis_total += t.shape()[axis];
        }
        oshape[axis] = axis_total;
        let parents = self.parent_ids(xs)?;

        let outer: usize = oshape[..axis].iter().product();
        let inner: usize = oshape[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        let mut extents = Vec::with_capacity(xs.len());
        for t in xs {
            let e = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * e * inner..(o + 1) * e * inner];
                let dst_base = (o * axis_total + offset) * inner;
                data[dst_base..dst_base + e * inner].copy_from_slice(src);
            }
            extents.push(e);
            offset += e;
        }
        let out = Tensor::from_vec(oshape, data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let mut contribs = Vec::with_capacity(extents.len());
                let mut offset = 0;
                for &e in &extents {
                    let mut dx = vec![0.0; outer * e * inner];
                    for o in 0..outer {
                        let src_base = (o * axis_total + offset) * inner;
                        dx[o * e * inner..(o + 1) * e * inner]
                            .copy_from_slice(&g[src_base..src_base + e * inner]);
                    }
                    contribs.push(Some(dx));
                    offset += e;
                }
                contribs
            }),
        ))
    }

    /// Contiguous sub-range along one axis.
    pub fn slice(&self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= x.rank() || start + len > x.shape()[axis] {
            return Err(Error::shape(format!(
                "slice: range {start}..{} out of bounds on axis {axis} of {:?}",
                start + len,
                x.shape()
            )));
        }
        let parents = self.parent_ids(&[x])?;
        let sh = x.shape();
        let outer: usize = sh[..axis].iter().product();
        let mid = sh[axis];
        let inner: usize = sh[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * mid + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&x.data()[src_base..src_base + len * inner]);
        }
        let mut oshape = sh.to_vec();
        oshape[axis] = len;
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
                    let dst_base = (o * mid + start) * inner;
                    dx[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(dx)]
            }),
        ))
    }
}

fn permute_swap(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f64> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let rank = shape.len();
    let mut oshape = shape.to_vec();
    oshape.swap(ax0, ax1);
    let in_st = strides(shape);
    // walk the output in order, computing the source index incrementally
    let mut src_st = vec![0usize; rank];
    for d in 0..rank {
        let sd = if d == ax0 {
            ax1
        } else if d == ax1 {
            ax0
        } else {
            d
        };
        src_st[d] = in_st[sd];
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    let mut si = 0usize;
    for item in out.iter_mut() {
        *item = data[si];
        for d in (0..rank).rev() {
            idx[d] += 1;
            si += src_st[d];
            if idx[d] < oshape[d] {
                break;
            }
            idx[d] = 0;
            si -= src_st[d] * oshape[d];
        }
    }
    out
}

fn flip_data(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for m in 0..mid {
            let src = (o * mid + m) * inner;
            let dst = (o * mid + (mid - 1 - m)) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_is_involution() {
        let g = Graph::new();
        let x = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let y = g.flip(&g.flip(&x, 1).unwrap(), 1).unwrap();
        assert_eq!(y.data(), x.data());
        let z = g.flip(&x, 0).unwrap();
        assert_eq!(z.data(), &[4., 5., 6., 1., 2., 3.]);
    }

    #[test]
    fn concat_shapes_and_single() {
        let g = Graph::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 5]);
        let y = g.concat(&[&a, &b], 1).unwrap();
        assert_eq!(y.shape(), &[2, 8]);
        let solo = g.concat(&[&a], 1).unwrap();
        assert_eq!(solo.shape(), a.shape());
        assert_eq!(solo.data(), a.data());
    }

    #[test]
    fn axis_out_of_range_errors() {
        let g = Graph::new();
        let x = Tensor::zeros(&[2, 2]);
        assert!(g.flip(&x, 2).is_err());
        assert!(g.transpose(&x, 0, 3).is_err());
    }

    #[test]
    fn transpose_swaps() {
        let g = Graph::new();
        let x = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let y = g.transpose(&x, 0, 1).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn slice_and_backward_scatter() {
        let g = Graph::new();
        let x = g.leaf(&Tensor::from_vec(vec![2, 4], vec![0., 1., 2., 3., 4., 5., 6., 7.]));
        let s = g.slice(&x, 1, 1, 2).unwrap();
        assert_eq!(s.data(), &[1., 2., 5., 6.]);
        let loss = g.sum_all(&s).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(
            grads.wrt(&x).unwrap().data(),
            &[0., 1., 1., 0., 0., 1., 1., 0.]
        );
    }

    #[test]
    fn concat_order_preserved_and_grad_splits() {
        let g = Graph::new();
        let a = g.leaf(&Tensor::from_vec(vec![2, 2], vec![1., 2., 3., 4.]));
        let b = g.leaf(&Tensor::from_vec(vec![2, 1], vec![9., 8.]));
        let y = g.concat(&[&a, &b], 1).unwrap();
        assert_eq!(y.data(), &[1., 2., 9., 3., 4., 8.]);
        let w = Tensor::from_vec(vec![2, 3], vec![1., 1., 5., 1., 1., 7.]);
        let loss = g.sum_all(&g.mul(&y, &w).unwrap()).unwrap();
        let grads = g.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap().data(), &[1., 1., 1., 1.]);
        assert_eq!(grads.wrt(&b).unwrap().data(), &[5., 7.]);
    }
}
