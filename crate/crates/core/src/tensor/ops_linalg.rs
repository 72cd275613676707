//! Batched matrix multiplication on top of a blocked f64 gemm kernel.

use super::graph::Graph;
use super::shape::{bcast_strides, broadcast_shape, numel};
use super::Tensor;
use crate::error::Result;
use rayon::prelude::*;

/// Plain row-major gemm: C[m,n] = alpha * A[m,k] @ B[k,n] + beta * C.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] += A[m,k] @ B^T where B is stored row-major [n,k].
pub(crate) fn gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] += A^T @ B where A is stored row-major [k,m].
pub(crate) fn gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully strided gemm on raw slices: C = alpha * A @ B + beta * C with
/// explicit row/column strides for each operand. Callers guarantee the
/// strided footprints stay inside the slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Row-blocked parallel gemm with thread-count independent results: the
/// split is by fixed 256-row chunks, and each output row is produced by
/// exactly one kernel call.
pub(crate) fn par_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const CHUNK: usize = 256;
    if m * k * n < 1 << 20 || m <= CHUNK {
        gemm(m, k, n, 1.0, a, b, 0.0, c);
        return;
    }
    c.par_chunks_mut(CHUNK * n)
        .zip(a.par_chunks(CHUNK * k))
        .for_each(|(cb, ab)| {
            let rows = cb.len() / n;
            gemm(rows, k, n, 1.0, ab, b, 0.0, cb);
        });
}

/// Parallel form of [`gemm_bt`], partitioned over output rows.
pub(crate) fn par_gemm_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const CHUNK: usize = 256;
    if m * k * n < 1 << 20 || m <= CHUNK {
        gemm_bt(m, k, n, a, b, c);
        return;
    }
    c.par_chunks_mut(CHUNK * n)
        .zip(a.par_chunks(CHUNK * k))
        .for_each(|(cb, ab)| {
            let rows = cb.len() / n;
            gemm_bt(rows, k, n, ab, b, cb);
        });
}

/// Parallel form of [`gemm_at`] (C[m,n] += A^T B with A stored [k,m]),
/// partitioned over output rows, i.e. over columns of A.
pub(crate) fn par_gemm_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    const CHUNK: usize = 128;
    if m * k * n < 1 << 20 || m <= CHUNK {
        gemm_at(m, k, n, a, b, c);
        return;
    }
    let chunks: Vec<(usize, &mut [f64])> = c
        .chunks_mut(CHUNK * n)
        .enumerate()
        .map(|(i, cb)| (i * CHUNK, cb))
        .collect();
    chunks.into_par_iter().for_each(|(m0, cb)| {
        let rows = cb.len() / n;
        // A^T rows m0..m0+rows live at column offset m0 of A
        gemm_strided(
            rows,
            k,
            n,
            1.0,
            &a[m0..],
            1,
            m as isize,
            b,
            n as isize,
            1,
            1.0,
            cb,
            n as isize,
            1,
        );
    });
}

impl Graph {
    /// Batched matrix product. Trailing two axes contract as [m,k] x [k,n];
    /// leading axes broadcast. The common `x @ weight` case (2-D right hand
    /// side) collapses to a single gemm over the flattened rows.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() < 2 || b.rank() < 2 {
            return Err(super::shape_err("matmul", a.shape(), b.shape()));
        }
        let (m, ka) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let (kb, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        if ka != kb {
            return Err(super::shape_err("matmul", a.shape(), b.shape()));
        }
        let k = ka;
        let parents = self.parent_ids(&[a, b])?;

        if b.rank() == 2 {
            // flatten leading axes of a into rows
            let rows: usize = a.shape()[..a.rank() - 1].iter().product::<usize>() / m * m;
            let mut data = vec![0.0; rows * n];
            par_gemm(rows, k, n, a.data(), b.data(), &mut data);
            let mut oshape = a.shape().to_vec();
            *oshape.last_mut().unwrap() = n;
            let out = Tensor::from_vec(oshape, data);
            if !self.tracks(&parents) {
                return Ok(out);
            }
            let (ad, bd) = (a.data_arc(), b.data_arc());
            let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
            return Ok(self.record(
                out,
                parents,
                Box::new(move |g| {
                    // da = g @ b^T, db = a^T @ g
                    let mut da = vec![0.0; ad.len()];
                    par_gemm_bt(rows, n, k, g, &bd, &mut da);
                    let mut db = vec![0.0; bd.len()];
                    par_gemm_at(k, rows, n, &ad, g, &mut db);
                    debug_assert_eq!(ash.last(), Some(&k));
                    debug_assert_eq!(bsh, vec![k, n]);
                    vec![Some(da), Some(db)]
                }),
            ));
        }

        // general broadcast-batched case
        let a_batch = &a.shape()[..a.rank() - 2];
        let b_batch = &b.shape()[..b.rank() - 2];
        let batch = broadcast_shape(a_batch, b_batch)
            .map_err(|_| super::shape_err("matmul", a.shape(), b.shape()))?;
        let nb = numel(&batch);
        let sa = bcast_strides(a_batch, &batch);
        let sb = bcast_strides(b_batch, &batch);
        let (a_off, b_off) = batch_offsets(&batch, &sa, &sb, m * k, k * n);
        let mut data = vec![0.0; nb * m * n];
        for i in 0..nb {
            gemm(
                m,
                k,
                n,
                1.0,
                &a.data()[a_off[i]..],
                &b.data()[b_off[i]..],
                0.0,
                &mut data[i * m * n..],
            );
        }
        let mut oshape = batch.clone();
        oshape.push(m);
        oshape.push(n);
        let out = Tensor::from_vec(oshape, data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let (ad, bd) = (a.data_arc(), b.data_arc());
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for i in 0..nb {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    gemm_bt(
                        m,
                        n,
                        k,
                        gi,
                        &bd[b_off[i]..b_off[i] + k * n],
                        &mut da[a_off[i]..a_off[i] + m * k],
                    );
                    gemm_at(
                        k,
                        m,
                        n,
                        &ad[a_off[i]..a_off[i] + m * k],
                        gi,
                        &mut db[b_off[i]..b_off[i] + k * n],
                    );
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }
}

/// Per-batch-item element offsets into a and b, honoring broadcast strides.
fn batch_offsets(
    batch: &[usize],
    sa: &[usize],
    sb: &[usize],
    a_item: usize,
    b_item: usize,
) -> (Vec<usize>, Vec<usize>) {
    let nb = numel(batch);
    let rank = batch.len();
    let mut a_off = Vec::with_capacity(nb);
    let mut b_off = Vec::with_capacity(nb);
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for _ in 0..nb {
        a_off.push(ai * a_item);
        b_off.push(bi * b_item);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
            ai -= sa[d] * batch[d];
            bi -= sb[d] * batch[d];
        }
    }
    (a_off, b_off)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let g = Graph::new();
        let a = Tensor::from_vec(vec![2, 2], vec![1., 0., 0., 1.]);
        let b = Tensor::from_vec(vec![2, 2], vec![3., 4., 5., 6.]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[3., 4., 5., 6.]);
    }

    #[test]
    fn dot_product_case() {
        // [[1,2]] @ [[3],[4]] = [[11]]
        let g = Graph::new();
        let a = Tensor::from_vec(vec![1, 2], vec![1., 2.]);
        let b = Tensor::from_vec(vec![2, 1], vec![3., 4.]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[1, 1]);
        assert_eq!(y.item(), 11.0);
    }

    #[test]
    fn mismatch_reports_both_shapes() {
        let g = Graph::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = g.matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn batched_broadcast_matmul() {
        let g = Graph::new();
        // a: [2,1,2,2] batch of two identity-ish, b: [2,2] shared
        let a = Tensor::from_vec(vec![2, 2, 2], vec![1., 0., 0., 1., 2., 0., 0., 2.]);
        let b = Tensor::from_vec(vec![2, 2, 2], vec![1., 2., 3., 4., 1., 2., 3., 4.]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_eq!(y.data(), &[1., 2., 3., 4., 2., 4., 6., 8.]);
    }

    #[test]
    fn flattened_fast_path_matches_loop() {
        let g = Graph::new();
        let a = Tensor::from_vec(vec![2, 2, 3], (0..12).map(|v| v as f64).collect());
        let b = Tensor::from_vec(vec![3, 2], vec![1., -1., 0.5, 2., -0.25, 0.0]);
        let y = g.matmul(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        // manual check of one element: row [3,4,5] . col0 [1,0.5,-0.25] = 3+2-1.25
        assert!((y.at(&[0, 1, 0]) - 3.75).abs() < 1e-12);
    }
}
