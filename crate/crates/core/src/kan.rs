//! Kolmogorov-Arnold layers: a learnable B-spline activation on every
//! edge, plain summation at nodes, plus a SiLU base path for trainability.
//!
//! Spline bases are evaluated with the de Boor triangular scheme over a
//! fixed uniform knot grid; outside the grid the boundary polynomial
//! pieces extrapolate.

use crate::error::{Error, Result};
use crate::nn::{join_path, Module, ParamVisitor};
use crate::tensor::{Graph, Tensor};
use rand::Rng;

/// Extended uniform knot vector: G intervals over [-range, range], padded
/// by k extra knots on each side. Length G + 2k + 1.
pub fn uniform_knots(range: f64, grid: usize, k: usize) -> Vec<f64> {
    let h = 2.0 * range / grid as f64;
    (0..=grid + 2 * k)
        .map(|i| -range + (i as f64 - k as f64) * h)
        .collect()
}

/// Number of B-spline basis functions for G intervals and order k.
pub fn basis_count(grid: usize, k: usize) -> usize {
    grid + k
}

/// Largest span index j with knots[j] <= x, clamped to the valid range
/// [k, len-k-2] so boundary pieces extrapolate.
fn find_span(knots: &[f64], k: usize, x: f64) -> usize {
    let lo = k;
    let hi = knots.len() - k - 2;
    if x <= knots[lo] {
        return lo;
    }
    if x >= knots[hi] {
        return hi;
    }
    // binary search for the half-open interval [knots[j], knots[j+1])
    let mut a = lo;
    let mut b = hi;
    while a < b {
        let mid = (a + b + 1) / 2;
        if knots[mid] <= x {
            a = mid;
        } else {
            b = mid - 1;
        }
    }
    a
}

/// The k+1 possibly-nonzero basis values B_{span-k..=span, k}(x),
/// triangular de Boor scheme. Sums to exactly 1 by construction inside
/// the grid.
fn basis_nonzero(knots: &[f64], k: usize, span: usize, x: f64) -> Vec<f64> {
    let mut vals = vec![0.0; k + 1];
    vals[0] = 1.0;
    for d in 1..=k {
        let mut saved = 0.0;
        for r in 0..d {
            let denom = knots[span + r + 1] - knots[span + r + 1 - d];
            let term = vals[r] / denom;
            vals[r] = saved + (knots[span + r + 1] - x) * term;
            saved = (x - knots[span + r + 1 - d]) * term;
        }
        vals[d] = saved;
    }
    vals
}

/// Derivatives of the same k+1 basis functions at x.
fn basis_nonzero_deriv(knots: &[f64], k: usize, span: usize, x: f64) -> Vec<f64> {
    if k == 0 {
        return vec![0.0];
    }
    // degree k-1 nonzero values: B_{span-(k-1)..=span, k-1}
    let lower = basis_nonzero(knots, k - 1, span, x);
    let mut out = vec![0.0; k + 1];
    let kf = k as f64;
    for r in 0..=k {
        let i = span - k + r; // full basis index
        // B'_{i,k} = k * ( B_{i,k-1}/(t[i+k]-t[i]) - B_{i+1,k-1}/(t[i+k+1]-t[i+1]) )
        let first = if i >= span - (k - 1) && i <= span {
            lower[i - (span - k + 1)] / (knots[i + k] - knots[i])
        } else {
            0.0
        };
        let second = if i + 1 >= span - (k - 1) && i + 1 <= span {
            lower[i + 1 - (span - k + 1)] / (knots[i + k + 1] - knots[i + 1])
        } else {
            0.0
        };
        out[r] = kf * (first - second);
    }
    out
}

/// Dense basis row of length G+k for one scalar input.
pub fn bspline_basis_row(knots: &[f64], k: usize, x: f64) -> Vec<f64> {
    let m = knots.len() - 1 - 2 * k + k; // G + k
    let span = find_span(knots, k, x);
    let nz = basis_nonzero(knots, k, span, x);
    let mut row = vec![0.0; m];
    for (r, v) in nz.iter().enumerate() {
        row[span - k + r] = *v;
    }
    row
}

impl Graph {
    /// B-spline basis expansion: every element of x becomes its G+k basis
    /// values on the trailing axis. Differentiable in x.
    pub fn bspline_basis(&self, x: &Tensor, knots: &[f64], k: usize) -> Result<Tensor> {
        if knots.len() < 2 * k + 2 {
            return Err(Error::config(format!(
                "bspline_basis: {} knots too few for order {k}",
                knots.len()
            )));
        }
        let m = knots.len() - 1 - k; // number of basis functions = G + k
        let parents = self.parent_ids(&[x])?;
        let n = x.len();
        let mut data = vec![0.0; n * m];
        for (e, &xv) in x.data().iter().enumerate() {
            let span = find_span(knots, k, xv);
            let nz = basis_nonzero(knots, k, span, xv);
            for (r, v) in nz.iter().enumerate() {
                data[e * m + span - k + r] = *v;
            }
        }
        let mut oshape = x.shape().to_vec();
        oshape.push(m);
        let out = Tensor::from_vec(oshape, data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        let xd = x.data_arc();
        let knots = knots.to_vec();
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let mut dx = vec![0.0; n];
                for (e, &xv) in xd.iter().enumerate() {
                    let span = find_span(&knots, k, xv);
                    let dnz = basis_nonzero_deriv(&knots, k, span, xv);
                    let mut acc = 0.0;
                    for (r, dv) in dnz.iter().enumerate() {
                        acc += g[e * m + span - k + r] * dv;
                    }
                    dx[e] = acc;
                }
                vec![Some(dx)]
            }),
        ))
    }
}

/// One KAN layer. Edge (j,i) applies scale * spline_ji(x_i) plus a shared
/// SiLU base path; node j sums its incoming edges.
#[derive(Clone)]
pub struct KanLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub knots: Vec<f64>,
    pub k: usize,
    /// [d_out, d_in, G+k]
    pub spline_coef: Tensor,
    /// [d_out, d_in]
    pub base_weight: Tensor,
    /// [d_out, d_in]
    pub scale_spline: Tensor,
}

impl KanLayer {
    /// Fresh layer: small random spline coefficients, Kaiming-scaled base
    /// weights, uniform grid on [-range, range].
    pub fn init(
        rng: &mut impl Rng,
        d_in: usize,
        d_out: usize,
        grid: usize,
        k: usize,
        range: f64,
    ) -> Result<Self> {
        if grid < 2 || k < 1 {
            return Err(Error::config(format!(
                "kan_init: need G >= 2 and k >= 1, got G={grid}, k={k}"
            )));
        }
        let m = basis_count(grid, k);
        let coef_std = 0.1 / (d_in as f64).sqrt();
        let base_std = (2.0 / d_in as f64).sqrt();
        Ok(KanLayer {
            d_in,
            d_out,
            knots: uniform_knots(range, grid, k),
            k,
            spline_coef: Tensor::randn(rng, &[d_out, d_in, m], coef_std),
            base_weight: Tensor::randn(rng, &[d_out, d_in], base_std),
            scale_spline: Tensor::ones(&[d_out, d_in]),
        })
    }

    pub fn basis_len(&self) -> usize {
        self.knots.len() - 1 - self.k
    }

    /// x: [R, d_in] -> [R, d_out];
    /// out_j = sum_i [ base_w_ji * silu(x_i) + scale_ji * spline_ji(x_i) ].
    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.shape()[1] != self.d_in {
            return Err(Error::shape(format!(
                "kan forward: input {:?} does not match d_in {}",
                x.shape(),
                self.d_in
            )));
        }
        let rows = x.shape()[0];
        let m = self.basis_len();
        // base path
        let base = g.matmul(&g.silu(x)?, &g.transpose(&self.base_weight, 0, 1)?)?;
        // spline path: contract basis [R, d_in*M] with scaled coefficients
        let basis = g.bspline_basis(x, &self.knots, self.k)?;
        let basis_flat = g.reshape(&basis, &[rows, self.d_in * m])?;
        let scaled = g.mul(
            &self.spline_coef,
            &g.reshape(&self.scale_spline, &[self.d_out, self.d_in, 1])?,
        )?;
        let w = g.transpose(&g.transpose(&scaled, 0, 1)?, 1, 2)?; // [d_in, M, d_out]
        let w_flat = g.reshape(&w, &[self.d_in * m, self.d_out])?;
        let spline = g.matmul(&basis_flat, &w_flat)?;
        g.add(&base, &spline)
    }
}

impl Module for KanLayer {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&join_path(prefix, "spline_coef"), &mut self.spline_coef);
        v.visit(&join_path(prefix, "base_weight"), &mut self.base_weight);
        v.visit(&join_path(prefix, "scale_spline"), &mut self.scale_spline);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Naive Cox-de Boor recursion, the independent oracle.
    fn cox_de_boor(knots: &[f64], i: usize, k: usize, x: f64) -> f64 {
        if k == 0 {
            return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
        }
        let left_den = knots[i + k] - knots[i];
        let right_den = knots[i + k + 1] - knots[i + 1];
        let mut v = 0.0;
        if left_den > 0.0 {
            v += (x - knots[i]) / left_den * cox_de_boor(knots, i, k - 1, x);
        }
        if right_den > 0.0 {
            v += (knots[i + k + 1] - x) / right_den * cox_de_boor(knots, i + 1, k - 1, x);
        }
        v
    }

    #[test]
    fn partition_of_unity_and_nonnegativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for &k in &[1usize, 2, 3] {
            for &grid in &[4usize, 5, 8] {
                let knots = uniform_knots(1.0, grid, k);
                for _ in 0..200 {
                    let x = rng.random::<f64>() * 2.0 - 1.0;
                    let row = bspline_basis_row(&knots, k, x);
                    assert_eq!(row.len(), basis_count(grid, k));
                    let sum: f64 = row.iter().sum();
                    assert!(
                        (sum - 1.0).abs() <= 1e-12,
                        "k={k} G={grid} x={x}: sum {sum}"
                    );
                    assert!(row.iter().all(|&v| v >= -1e-15), "negative basis inside grid");
                }
            }
        }
    }

    #[test]
    fn order_zero_is_indicator() {
        let knots = uniform_knots(1.0, 4, 0);
        let row = bspline_basis_row(&knots, 0, -0.3);
        let ones: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ones.len(), 1);
        assert_eq!(row[ones[0]], 1.0);
        // -0.3 lies in interval [-0.5, 0.0), the second of four
        assert_eq!(ones[0], 1);
    }

    #[test]
    fn matches_cox_de_boor_recursion() {
        let k = 3;
        let grid = 5;
        let knots = uniform_knots(1.0, grid, k);
        let m = basis_count(grid, k);
        // probe interior knots and random interior points
        let mut probes: Vec<f64> = knots[k + 1..knots.len() - k - 1].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..50 {
            probes.push(rng.random::<f64>() * 1.98 - 0.99);
        }
        for &x in &probes {
            let row = bspline_basis_row(&knots, k, x);
            for i in 0..m {
                let want = cox_de_boor(&knots, i, k, x);
                assert!(
                    (row[i] - want).abs() < 1e-12,
                    "basis {i} at x={x}: {} vs {want}",
                    row[i]
                );
            }
        }
    }

    #[test]
    fn extrapolates_outside_grid() {
        // outside the grid the basis row follows the boundary polynomial:
        // still sums to 1 (polynomial partition extends) but values may
        // leave [0, 1]
        let knots = uniform_knots(1.0, 5, 3);
        for &x in &[-1.5, 1.5, 2.0] {
            let row = bspline_basis_row(&knots, 3, x);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "x={x}: sum {sum}");
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut layer = KanLayer::init(&mut rng, 3, 2, 5, 3, 1.0).unwrap();
        layer.spline_coef = Tensor::zeros(&[2, 3, 8]);
        layer.base_weight = Tensor::zeros(&[2, 3]);
        let x = Tensor::randn(&mut rng, &[4, 3], 1.0);
        let y = layer.forward(&g, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coefficient_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let layer = KanLayer::init(&mut rng, 4, 6, 5, 3, 1.0).unwrap();
        assert_eq!(layer.spline_coef.shape(), &[6, 4, 8]);
        // deterministic for a fixed seed
        let mut rng2 = ChaCha8Rng::seed_from_u64(43);
        let layer2 = KanLayer::init(&mut rng2, 4, 6, 5, 3, 1.0).unwrap();
        assert_eq!(layer.spline_coef.data(), layer2.spline_coef.data());
        assert_eq!(layer.base_weight.data(), layer2.base_weight.data());
    }

    #[test]
    fn spline_fit_reproduces_identity_function() {
        // least-squares fit of f(x) = x on the grid, then check the layer
        let (grid, k, range) = (5usize, 3usize, 1.0f64);
        let knots = uniform_knots(range, grid, k);
        let m = basis_count(grid, k);
        let n_fit = 200;
        let xs: Vec<f64> = (0..n_fit)
            .map(|i| -range + 2.0 * range * i as f64 / (n_fit - 1) as f64)
            .collect();
        // normal equations
        let mut ata = vec![0.0; m * m];
        let mut atb = vec![0.0; m];
        for &x in &xs {
            let row = bspline_basis_row(&knots, k, x);
            for a in 0..m {
                atb[a] += row[a] * x;
                for b in 0..m {
                    ata[a * m + b] += row[a] * row[b];
                }
            }
        }
        let coef = solve_dense(&mut ata, &mut atb, m);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut layer = KanLayer::init(&mut rng, 1, 1, grid, k, range).unwrap();
        layer.base_weight = Tensor::zeros(&[1, 1]);
        layer.scale_spline = Tensor::ones(&[1, 1]);
        layer.spline_coef = Tensor::from_vec(vec![1, 1, m], coef);
        let g = Graph::inference();
        for i in 0..101 {
            let x = -range + 2.0 * range * i as f64 / 100.0;
            let xt = Tensor::from_vec(vec![1, 1], vec![x]);
            let y = layer.forward(&g, &xt).unwrap().item();
            assert!(
                (y - x).abs() < 1e-3,
                "fit error at x={x}: got {y}"
            );
        }

        fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Vec<f64> {
            // Gaussian elimination with partial pivoting
            for col in 0..n {
                let mut piv = col;
                for r in col + 1..n {
                    if a[r * n + col].abs() > a[piv * n + col].abs() {
                        piv = r;
                    }
                }
                for j in 0..n {
                    a.swap(col * n + j, piv * n + j);
                }
                b.swap(col, piv);
                let p = a[col * n + col];
                for r in col + 1..n {
                    let f = a[r * n + col] / p;
                    for j in col..n {
                        a[r * n + j] -= f * a[col * n + j];
                    }
                    b[r] -= f * b[col];
                }
            }
            let mut x = vec![0.0; n];
            for r in (0..n).rev() {
                let mut acc = b[r];
                for j in r + 1..n {
                    acc -= a[r * n + j] * x[j];
                }
                x[r] = acc / a[r * n + r];
            }
            x
        }
    }

    #[test]
    fn linear_in_spline_coefficients() {
        // with the base path zeroed, doubling coefficients doubles output
        let g = Graph::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let mut layer = KanLayer::init(&mut rng, 3, 2, 5, 3, 1.0).unwrap();
        layer.base_weight = Tensor::zeros(&[2, 3]);
        let x = Tensor::randn(&mut rng, &[5, 3], 0.5);
        let y1 = layer.forward(&g, &x).unwrap();
        let doubled: Vec<f64> = layer.spline_coef.data().iter().map(|v| 2.0 * v).collect();
        layer.spline_coef = Tensor::from_vec(vec![2, 3, 8], doubled);
        let y2 = layer.forward(&g, &x).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert_eq!(2.0 * a, *b, "spline path must be exactly linear in coef");
        }
    }

    #[test]
    fn initialized_output_std_in_range() {
        let g = Graph::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let layer = KanLayer::init(&mut rng, 16, 16, 5, 3, 1.0).unwrap();
        let x = Tensor::randn(&mut rng, &[512, 16], 1.0);
        let y = layer.forward(&g, &x).unwrap();
        let n = y.len() as f64;
        let mean = y.data().iter().sum::<f64>() / n;
        let var = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (0.1..=2.0).contains(&std),
            "init output std {std} outside [0.1, 2.0]"
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let layer = KanLayer::init(&mut rng, 3, 2, 4, 3, 1.0).unwrap();
        let x0 = Tensor::randn(&mut rng, &[4, 3], 0.6);

        // w.r.t. the input
        let lc = layer.clone();
        let err = finite_diff_check(
            &move |g, x| {
                let y = lc.forward(g, x)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &x0,
        )
        .unwrap();
        assert!(err < 1e-4, "kan dx rel err {err}");

        // w.r.t. coefficients, base weights and scales
        let x = x0.clone();
        for which in 0..3 {
            let lc = layer.clone();
            let xc = x.clone();
            let param = match which {
                0 => layer.spline_coef.clone(),
                1 => layer.base_weight.clone(),
                _ => layer.scale_spline.clone(),
            };
            let err = finite_diff_check(
                &move |g, p| {
                    let mut l = lc.clone();
                    match which {
                        0 => l.spline_coef = p.clone(),
                        1 => l.base_weight = p.clone(),
                        _ => l.scale_spline = p.clone(),
                    }
                    let y = l.forward(g, &xc)?;
                    g.sum_all(&g.mul(&y, &y)?)
                },
                &param,
            )
            .unwrap();
            assert!(err < 1e-4, "kan param {which} rel err {err}");
        }
    }
}
