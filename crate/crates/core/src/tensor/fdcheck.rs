//! Central finite-difference oracle for gradient verification.

use super::graph::Graph;
use super::Tensor;
use crate::error::Result;

/// Compare the reverse-mode gradient of `f` at `x` against central finite
/// differences with step `h`, returning the maximum relative error over all
/// coordinates. `f` must evaluate to a scalar and be deterministic.
///
/// The relative error for coordinate i is |a_i - n_i| / max(|a_i|, |n_i|, 1e-6),
/// which keeps near-zero gradients from inflating the ratio with pure
/// round-off noise.
pub fn finite_diff_check_h(
    f: &dyn Fn(&Graph, &Tensor) -> Result<Tensor>,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    let g = Graph::new();
    let xv = g.leaf(x);
    let loss = f(&g, &xv)?;
    let grads = g.backward(&loss)?;
    let analytic = grads.wrt(&xv)?;

    let mut max_rel: f64 = 0.0;
    let mut probe = x.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval_scalar(f, x.shape(), &probe)?;
        probe[i] = orig - h;
        let fm = eval_scalar(f, x.shape(), &probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}

/// [`finite_diff_check_h`] with the default step h = 1e-5.
pub fn finite_diff_check(
    f: &dyn Fn(&Graph, &Tensor) -> Result<Tensor>,
    x: &Tensor,
) -> Result<f64> {
    finite_diff_check_h(f, x, 1e-5)
}

/// Like [`finite_diff_check_h`], but the error is normalized by the
/// infinity norm of the whole gradient instead of per coordinate. This is
/// the right metric for deep compositions, where some coordinates carry
/// gradients at the round-off noise floor of the loss evaluation.
pub fn finite_diff_check_norm(
    f: &dyn Fn(&Graph, &Tensor) -> Result<Tensor>,
    x: &Tensor,
    h: f64,
) -> Result<f64> {
    let g = Graph::new();
    let xv = g.leaf(x);
    let loss = f(&g, &xv)?;
    let grads = g.backward(&loss)?;
    let analytic = grads.wrt(&xv)?;
    let mut numeric = vec![0.0; x.len()];
    let mut probe = x.data().to_vec();
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = eval_scalar(f, x.shape(), &probe)?;
        probe[i] = orig - h;
        let fm = eval_scalar(f, x.shape(), &probe)?;
        probe[i] = orig;
        *slot = (fp - fm) / (2.0 * h);
    }
    Ok(rel_error_inf(analytic.data(), &numeric))
}

/// Tensor-level relative error: worst absolute deviation normalized by the
/// infinity norm of either gradient. Coordinates whose true gradient sits
/// at the finite-difference noise floor then cannot dominate the check.
pub fn rel_error_inf(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

fn eval_scalar(
    f: &dyn Fn(&Graph, &Tensor) -> Result<Tensor>,
    shape: &[usize],
    data: &[f64],
) -> Result<f64> {
    let g = Graph::inference();
    let t = Tensor::from_vec(shape.to_vec(), data.to_vec());
    Ok(f(&g, &t)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_nearly_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&mut rng, &[6], 1.0);
        let err = finite_diff_check(
            &|g, x| {
                let sq = g.mul(x, x)?;
                g.sum_all(&sq)
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-9, "rel err {err}");
    }

    #[test]
    fn silu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(&mut rng, &[8], 1.0);
        let err = finite_diff_check(
            &|g, x| {
                let a = g.silu(x)?;
                let b = g.silu(&a)?;
                g.sum_all(&g.mul(&b, &b)?)
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn elementwise_suite_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // keep inputs positive for log
        let x = Tensor::from_vec(
            vec![5],
            (0..5).map(|_| 0.5 + rng.random::<f64>()).collect(),
        );
        type F = dyn Fn(&Graph, &Tensor) -> Result<Tensor>;
        let cases: Vec<Box<F>> = vec![
            Box::new(|g: &Graph, x: &Tensor| g.sum_all(&g.exp(x)?)),
            Box::new(|g: &Graph, x: &Tensor| g.sum_all(&g.log(x)?)),
            Box::new(|g: &Graph, x: &Tensor| g.sum_all(&g.sigmoid(x)?)),
            Box::new(|g: &Graph, x: &Tensor| g.sum_all(&g.softplus(x)?)),
            Box::new(|g: &Graph, x: &Tensor| g.sum_all(&g.relu(x)?)),
            Box::new(|g: &Graph, x: &Tensor| {
                let y = g.softmax(x, 0)?;
                g.sum_all(&g.mul(&y, &y)?)
            }),
        ];
        for (i, f) in cases.iter().enumerate() {
            let err = finite_diff_check(f.as_ref(), &x).unwrap();
            assert!(err < 1e-6, "case {i}: rel err {err}");
        }
    }

    #[test]
    fn matmul_gradient_vs_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = Tensor::randn(&mut rng, &[3, 4], 1.0);
        let b = Tensor::randn(&mut rng, &[4, 2], 1.0);
        // d sum(a@b) / da
        let bc = b.clone();
        let err = finite_diff_check(
            &move |g, x| g.sum_all(&g.matmul(x, &bc)?),
            &a,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
        // and w.r.t. b
        let ac = a.clone();
        let err = finite_diff_check(
            &move |g, x| g.sum_all(&g.matmul(&ac, x)?),
            &b,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::randn(&mut rng, &[2, 6], 1.0);
        let err = finite_diff_check_h(
            &|g, x| {
                let gain = Tensor::from_vec(vec![6], vec![1.0, 0.5, 2.0, 1.0, -1.0, 0.7]);
                let bias = Tensor::from_vec(vec![6], vec![0.1, 0.0, -0.2, 0.3, 0.0, 0.0]);
                let y = g.layer_norm(x, &gain, &bias, 1e-5)?;
                let w = Tensor::from_vec(vec![6], vec![1., 2., 3., -1., 0.5, 1.]);
                g.sum_all(&g.mul(&y, &w)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = Tensor::randn(&mut rng, &[1, 2, 10], 1.0);
        let w = Tensor::randn(&mut rng, &[3, 2, 3], 1.0);
        let wc = w.clone();
        let err = finite_diff_check(
            &move |g, x| g.sum_all(&g.mul(&g.conv1d(x, &wc, 2)?, &g.conv1d(x, &wc, 2)?)?),
            &x,
        )
        .unwrap();
        assert!(err < 1e-6, "conv1d dx rel err {err}");
        let xc = x.clone();
        let err = finite_diff_check(
            &move |g, w| g.sum_all(&g.mul(&g.conv1d(&xc, w, 2)?, &g.conv1d(&xc, w, 2)?)?),
            &w,
        )
        .unwrap();
        assert!(err < 1e-6, "conv1d dw rel err {err}");
        let y = Tensor::randn(&mut rng, &[1, 3, 4], 1.0);
        let wc = w.clone();
        let err = finite_diff_check(
            &move |g, y| {
                let z = g.conv_transpose1d(y, &wc, 2)?;
                g.sum_all(&g.mul(&z, &z)?)
            },
            &y,
        )
        .unwrap();
        assert!(err < 1e-6, "conv_transpose1d dx rel err {err}");
    }

    #[test]
    fn attention_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q = Tensor::randn(&mut rng, &[2, 3, 4], 1.0);
        let k = Tensor::randn(&mut rng, &[2, 5, 4], 1.0);
        let v = Tensor::randn(&mut rng, &[2, 5, 4], 1.0);
        let (kc, vc) = (k.clone(), v.clone());
        let err = finite_diff_check(
            &move |g, q| {
                let y = g.attention(q, &kc, &vc, 2)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &q,
        )
        .unwrap();
        assert!(err < 1e-6, "attention dq rel err {err}");
        let (qc, vc) = (q.clone(), v.clone());
        let err = finite_diff_check(
            &move |g, k| {
                let y = g.attention(&qc, k, &vc, 2)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &k,
        )
        .unwrap();
        assert!(err < 1e-6, "attention dk rel err {err}");
        let (qc, kc) = (q.clone(), k.clone());
        let err = finite_diff_check(
            &move |g, v| {
                let y = g.attention(&qc, &kc, v, 2)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &v,
        )
        .unwrap();
        assert!(err < 1e-6, "attention dv rel err {err}");
    }
}
