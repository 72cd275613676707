//! Shared layer plumbing: parameter traversal, linear maps, layer norm
//! wrappers, multi-head attention, and positional encodings.

use crate::error::Result;
use crate::tensor::{Gradients, Graph, Tensor};
use rand::Rng;
use std::collections::BTreeMap;

/// Receives every learnable tensor of a module tree, depth first, with a
/// dotted path. Paths are the stable identity used by checkpoints and the
/// optimizer.
pub trait ParamVisitor {
    fn visit(&mut self, path: &str, t: &mut Tensor);
}

/// Anything holding learnable parameters.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor);
}

pub fn join_path(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Register every parameter of `m` as a leaf on `graph` (in place), so the
/// next forward pass is differentiable with respect to all of them.
pub fn attach_params(m: &mut impl Module, graph: &Graph) {
    struct Attach<'g>(&'g Graph);
    impl ParamVisitor for Attach<'_> {
        fn visit(&mut self, _path: &str, t: &mut Tensor) {
            *t = self.0.leaf(t);
        }
    }
    m.visit_params("", &mut Attach(graph));
}

/// Snapshot all parameters as (path, detached tensor), sorted by path.
pub fn collect_params(m: &mut impl Module) -> Vec<(String, Tensor)> {
    struct Collect(Vec<(String, Tensor)>);
    impl ParamVisitor for Collect {
        fn visit(&mut self, path: &str, t: &mut Tensor) {
            self.0.push((path.to_string(), t.detach()));
        }
    }
    let mut c = Collect(Vec::new());
    m.visit_params("", &mut c);
    c.0
}

/// Gradients for every parameter, aligned with [`collect_params`] order.
pub fn collect_grads(m: &mut impl Module, grads: &Gradients) -> Result<Vec<(String, Tensor)>> {
    struct Collect<'a> {
        grads: &'a Gradients,
        out: Vec<(String, Tensor)>,
        err: Option<crate::error::Error>,
    }
    impl ParamVisitor for Collect<'_> {
        fn visit(&mut self, path: &str, t: &mut Tensor) {
            if self.err.is_some() {
                return;
            }
            match self.grads.wrt(t) {
                Ok(g) => self.out.push((path.to_string(), g)),
                Err(e) => self.err = Some(e),
            }
        }
    }
    let mut c = Collect {
        grads,
        out: Vec::new(),
        err: None,
    };
    m.visit_params("", &mut c);
    match c.err {
        Some(e) => Err(e),
        None => Ok(c.out),
    }
}

/// Overwrite parameters from a path-indexed map. Returns the list of paths
/// that were present in the module but missing from the map.
pub fn load_params(m: &mut impl Module, map: &BTreeMap<String, Tensor>) -> Vec<String> {
    struct Load<'a> {
        map: &'a BTreeMap<String, Tensor>,
        missing: Vec<String>,
    }
    impl ParamVisitor for Load<'_> {
        fn visit(&mut self, path: &str, t: &mut Tensor) {
            match self.map.get(path) {
                Some(new) if new.shape() == t.shape() => *t = new.detach(),
                _ => self.missing.push(path.to_string()),
            }
        }
    }
    let mut l = Load {
        map,
        missing: Vec::new(),
    };
    m.visit_params("", &mut l);
    l.missing
}

pub fn param_count(m: &mut impl Module) -> usize {
    collect_params(m).iter().map(|(_, t)| t.len()).sum()
}

/// Dense affine map y = x W + b with W stored [d_in, d_out].
#[derive(Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn init(rng: &mut impl Rng, d_in: usize, d_out: usize, bias: bool) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Linear {
            w: Tensor::randn(rng, &[d_in, d_out], std),
            b: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    /// Zero-initialized variant, used where a block should start as a no-op.
    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            w: Tensor::zeros(&[d_in, d_out]),
            b: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let y = g.matmul(x, &self.w)?;
        match &self.b {
            Some(b) => g.add(&y, b),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&join_path(prefix, "w"), &mut self.w);
        if let Some(b) = &mut self.b {
            v.visit(&join_path(prefix, "b"), b);
        }
    }
}

/// Learned gain/bias around the layer_norm op.
#[derive(Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::ones(&[d]),
            bias: Tensor::zeros(&[d]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        g.layer_norm(x, &self.gain, &self.bias, self.eps)
    }
}

impl Module for LayerNorm {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&join_path(prefix, "gain"), &mut self.gain);
        v.visit(&join_path(prefix, "bias"), &mut self.bias);
    }
}

/// Multi-head attention: per-head scaled dot-product over linear q/k/v
/// projections, heads concatenated and projected back to the model width.
#[derive(Clone)]
pub struct Mha {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Mha {
    pub fn init(rng: &mut impl Rng, d_model: usize, heads: usize) -> Self {
        Mha {
            wq: Linear::init(rng, d_model, d_model, true),
            wk: Linear::init(rng, d_model, d_model, true),
            wv: Linear::init(rng, d_model, d_model, true),
            wo: Linear::init(rng, d_model, d_model, true),
            heads,
        }
    }

    /// q: [B,Tq,d], k/v: [B,Tk,d] -> [B,Tq,d].
    pub fn forward(&self, g: &Graph, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let qp = self.wq.forward(g, q)?;
        let kp = self.wk.forward(g, k)?;
        let vp = self.wv.forward(g, v)?;
        let ctx = g.attention(&qp, &kp, &vp, self.heads)?;
        self.wo.forward(g, &ctx)
    }
}

impl Module for Mha {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.wq.visit_params(&join_path(prefix, "wq"), v);
        self.wk.visit_params(&join_path(prefix, "wk"), v);
        self.wv.visit_params(&join_path(prefix, "wv"), v);
        self.wo.visit_params(&join_path(prefix, "wo"), v);
    }
}

/// Fixed sinusoidal positional encoding, [T, d].
pub fn sinusoidal_pe(t_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t_len * d];
    for t in 0..t_len {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let rate = 1.0 / 10000f64.powf(2.0 * pair / d as f64);
            let angle = t as f64 * rate;
            data[t * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(vec![t_len, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_forward_and_visit() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lin = Linear::init(&mut rng, 3, 2, true);
        let x = Tensor::from_vec(vec![1, 3], vec![1., 0., -1.]);
        let y = lin.forward(&g, &x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        let params = collect_params(&mut lin);
        assert_eq!(params.len(), 2);
        assert_eq!(params[0].0, "w");
        assert_eq!(params[1].0, "b");
    }

    #[test]
    fn mha_identical_keys_average_values() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mha = Mha::init(&mut rng, 4, 2);
        let q = Tensor::randn(&mut rng, &[1, 2, 4], 1.0);
        let k = Tensor::from_vec(vec![1, 3, 4], [0.5, 1.0, -1.0, 0.0].repeat(3));
        let v = Tensor::randn(&mut rng, &[1, 3, 4], 1.0);
        let y = mha.forward(&g, &q, &k, &v).unwrap();
        // both query positions see the same uniform attention -> equal rows
        for j in 0..4 {
            assert!((y.at(&[0, 0, j]) - y.at(&[0, 1, j])).abs() < 1e-12);
        }
    }

    #[test]
    fn attach_and_grads_round_trip() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut lin = Linear::init(&mut rng, 2, 2, true);
        attach_params(&mut lin, &g);
        let x = Tensor::from_vec(vec![1, 2], vec![1., 2.]);
        let y = lin.forward(&g, &x).unwrap();
        let loss = g.sum_all(&y).unwrap();
        let grads = g.backward(&loss).unwrap();
        let gs = collect_grads(&mut lin, &grads).unwrap();
        assert_eq!(gs.len(), 2);
        // d loss / d b = ones
        assert_eq!(gs[1].1.data(), &[1.0, 1.0]);
        // d loss / d w rows = x broadcast
        assert_eq!(gs[0].1.data(), &[1., 1., 2., 2.]);
    }

    #[test]
    fn sinusoidal_pe_shape_and_range() {
        let pe = sinusoidal_pe(16, 8);
        assert_eq!(pe.shape(), &[16, 8]);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        // position 0: sin terms 0, cos terms 1
        assert_eq!(pe.at(&[0, 0]), 0.0);
        assert_eq!(pe.at(&[0, 1]), 1.0);
    }
}
