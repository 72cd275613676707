//! Shape arithmetic: strides, broadcasting, and index iteration helpers.

use crate::error::{Error, Result};

/// Row-major strides for a shape. A scalar (rank 0) has no strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut st = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        st[d] = st[d + 1] * shape[d + 1];
    }
    st
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// NumPy-style broadcast of two shapes, aligned at the trailing axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let db = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` expanded to `out_shape`, with 0 on broadcast axes.
pub fn bcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides(shape);
    let mut st = vec![0usize; rank];
    for d in 0..shape.len() {
        let od = rank - shape.len() + d;
        st[od] = if shape[d] == 1 && out_shape[od] != 1 {
            0
        } else {
            own[d]
        };
    }
    st
}

/// Visit every element of the broadcast result, yielding flat indices
/// (out, a, b). The fast paths cover identical shapes and tail-suffix
/// broadcasts, which is nearly everything the model does.
pub fn zip_broadcast2(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    if a_shape == b_shape {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    // suffix fast path: one operand's shape is a tail of the output shape
    if is_tail_of(b_shape, out_shape) && a_shape == out_shape {
        let bl = numel(b_shape).max(1);
        for i in 0..n {
            f(i, i, i % bl);
        }
        return;
    }
    if is_tail_of(a_shape, out_shape) && b_shape == out_shape {
        let al = numel(a_shape).max(1);
        for i in 0..n {
            f(i, i % al, i);
        }
        return;
    }
    let rank = out_shape.len();
    let sa = bcast_strides(a_shape, out_shape);
    let sb = bcast_strides(b_shape, out_shape);
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..n {
        f(oi, ai, bi);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ai -= sa[d] * out_shape[d];
            bi -= sb[d] * out_shape[d];
        }
    }
}

fn is_tail_of(inner: &[usize], outer: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape` by adding over
/// broadcast axes. Used by backward passes of broadcasting operations.
pub fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let mut out = vec![0.0; numel(target_shape)];
    if is_tail_of(target_shape, grad_shape) {
        let tl = numel(target_shape).max(1);
        for (i, g) in grad.iter().enumerate() {
            out[i % tl] += g;
        }
        return out;
    }
    let rank = grad_shape.len();
    let st = bcast_strides(target_shape, grad_shape);
    let mut idx = vec![0usize; rank];
    let mut ti = 0usize;
    for g in grad.iter() {
        out[ti] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            ti += st[d];
            if idx[d] < grad_shape[d] {
                break;
            }
            idx[d] = 0;
            ti -= st[d] * grad_shape[d];
        }
    }
    out
}
