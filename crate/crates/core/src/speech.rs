//! Speech encoder: strided Conv1D front-end followed by dual-path
//! bidirectional Mamba over segmented chunks — intra-chunk passes model
//! local structure, inter-chunk passes model global structure, both run
//! forward and time-flipped.

use crate::error::{Error, Result};
use crate::nn::{join_path, LayerNorm, Linear, Module, ParamVisitor};
use crate::ssm::MambaBlock;
use crate::tensor::{Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpeechEncoderConfig {
    pub sample_rate: usize,
    pub frame_len: usize,
    pub frame_stride: usize,
    pub d_model: usize,
    pub chunk_len: usize,
    pub chunk_hop: usize,
    pub n_repeats: usize,
    pub d_state: usize,
}

impl Default for SpeechEncoderConfig {
    fn default() -> Self {
        SpeechEncoderConfig {
            sample_rate: 8000,
            frame_len: 16,
            frame_stride: 8,
            d_model: 64,
            chunk_len: 50,
            chunk_hop: 25,
            n_repeats: 4,
            d_state: 16,
        }
    }
}

impl SpeechEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_stride == 0 || self.frame_stride > self.frame_len {
            return Err(Error::config(format!(
                "frame_stride {} must be in 1..=frame_len {}",
                self.frame_stride, self.frame_len
            )));
        }
        if self.chunk_hop == 0 || self.chunk_hop > self.chunk_len {
            return Err(Error::config(format!(
                "chunk_hop {} must be in 1..=chunk_len {}",
                self.chunk_hop, self.chunk_len
            )));
        }
        if self.n_repeats == 0 {
            return Err(Error::config("n_repeats must be >= 1"));
        }
        Ok(())
    }

    pub fn frames_for(&self, t_samples: usize) -> Result<usize> {
        if t_samples < self.frame_len {
            return Err(Error::data(format!(
                "waveform of {t_samples} samples shorter than one frame ({})",
                self.frame_len
            )));
        }
        Ok((t_samples - self.frame_len) / self.frame_stride + 1)
    }
}

/// Number of chunks produced by [`Graph::segment`]: every hop-multiple
/// start position below T opens a chunk.
pub fn num_chunks(t: usize, hop: usize) -> usize {
    t.div_ceil(hop)
}

/// Positions covered by `s`-th chunk: [s*hop, s*hop + chunk).
fn coverage(t: usize, chunk: usize, hop: usize, pos: usize) -> usize {
    let s_max = num_chunks(t, hop) - 1;
    let lo = if pos >= chunk { (pos - chunk) / hop + 1 } else { 0 };
    let hi = (pos / hop).min(s_max);
    hi.saturating_sub(lo) + usize::from(hi >= lo)
}

impl Graph {
    /// Segment [B, T, d] into overlapping chunks [B, S, K, d] with zero
    /// padding at the tail; S = ceil(T / hop).
    pub fn segment(&self, x: &Tensor, chunk: usize, hop: usize) -> Result<Tensor> {
        if x.rank() != 3 {
            return Err(Error::shape(format!("segment: expected [B,T,d], got {:?}", x.shape())));
        }
        if hop == 0 || hop > chunk {
            return Err(Error::config(format!("segment: need 1 <= hop <= chunk, got K={chunk}, P={hop}")));
        }
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let s = num_chunks(t, hop);
        let parents = self.parent_ids(&[x])?;
        let xd = x.data();
        let mut data = vec![0.0; b * s * chunk * d];
        for bi in 0..b {
            for si in 0..s {
                for kk in 0..chunk {
                    let src_t = si * hop + kk;
                    if src_t < t {
                        let src = (bi * t + src_t) * d;
                        let dst = ((bi * s + si) * chunk + kk) * d;
                        data[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                    }
                }
            }
        }
        let out = Tensor::from_vec(vec![b, s, chunk, d], data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let mut dx = vec![0.0; b * t * d];
                for bi in 0..b {
                    for si in 0..s {
                        for kk in 0..chunk {
                            let src_t = si * hop + kk;
                            if src_t < t {
                                let dst = (bi * t + src_t) * d;
                                let src = ((bi * s + si) * chunk + kk) * d;
                                for j in 0..d {
                                    dx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Overlap-add inverse of [`Graph::segment`]: positions covered by
    /// several chunks are averaged over their coverage count, so
    /// merge(segment(x)) == x exactly.
    pub fn overlap_merge(&self, xseg: &Tensor, t_out: usize, hop: usize) -> Result<Tensor> {
        if xseg.rank() != 4 {
            return Err(Error::shape(format!(
                "overlap_merge: expected [B,S,K,d], got {:?}",
                xseg.shape()
            )));
        }
        let (b, s, chunk, d) = (
            xseg.shape()[0],
            xseg.shape()[1],
            xseg.shape()[2],
            xseg.shape()[3],
        );
        if num_chunks(t_out, hop) != s {
            return Err(Error::shape(format!(
                "overlap_merge: {s} chunks at hop {hop} cannot produce length {t_out}"
            )));
        }
        let parents = self.parent_ids(&[xseg])?;
        let xd = xseg.data();
        let mut data = vec![0.0; b * t_out * d];
        for bi in 0..b {
            for si in 0..s {
                for kk in 0..chunk {
                    let dst_t = si * hop + kk;
                    if dst_t < t_out {
                        let src = ((bi * s + si) * chunk + kk) * d;
                        let dst = (bi * t_out + dst_t) * d;
                        for j in 0..d {
                            data[dst + j] += xd[src + j];
                        }
                    }
                }
            }
        }
        for bi in 0..b {
            for ti in 0..t_out {
                let c = coverage(t_out, chunk, hop, ti) as f64;
                for j in 0..d {
                    data[(bi * t_out + ti) * d + j] /= c;
                }
            }
        }
        let out = Tensor::from_vec(vec![b, t_out, d], data);
        if !self.tracks(&parents) {
            return Ok(out);
        }
        Ok(self.record(
            out,
            parents,
            Box::new(move |g| {
                let mut dx = vec![0.0; b * s * chunk * d];
                for bi in 0..b {
                    for si in 0..s {
                        for kk in 0..chunk {
                            let src_t = si * hop + kk;
                            if src_t < t_out {
                                let c = coverage(t_out, chunk, hop, src_t) as f64;
                                let dst = ((bi * s + si) * chunk + kk) * d;
                                let src = (bi * t_out + src_t) * d;
                                for j in 0..d {
                                    dx[dst + j] = g[src + j] / c;
                                }
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

/// Bidirectional Mamba: one block reads the sequence as-is, the other
/// reads it flipped; outputs are concatenated on the feature axis and
/// merged back to d_model.
#[derive(Clone)]
pub struct BiMamba {
    pub fwd: MambaBlock,
    pub bwd: MambaBlock,
    pub merge: Linear,
}

impl BiMamba {
    pub fn init(rng: &mut impl Rng, d_model: usize, d_state: usize) -> Self {
        BiMamba {
            fwd: MambaBlock::init(rng, d_model, d_state),
            bwd: MambaBlock::init(rng, d_model, d_state),
            merge: Linear::init(rng, 2 * d_model, d_model, true),
        }
    }

    /// x: [B, T, d] -> [B, T, d].
    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        self.forward_ordered(g, x, false)
    }

    /// `swap_concat` reverses the feature-concatenation order of the two
    /// directions; with swapped blocks this realizes the exact mirror
    /// symmetry bimamba(flip(x); bwd, fwd) == flip(bimamba(x; fwd, bwd)).
    pub fn forward_ordered(&self, g: &Graph, x: &Tensor, swap_concat: bool) -> Result<Tensor> {
        let time_axis = x.rank() - 2;
        let u = self.fwd.forward(g, x)?;
        let flipped = g.flip(x, time_axis)?;
        let v = g.flip(&self.bwd.forward(g, &flipped)?, time_axis)?;
        let feat_axis = x.rank() - 1;
        let z = if swap_concat {
            g.concat(&[&v, &u], feat_axis)?
        } else {
            g.concat(&[&u, &v], feat_axis)?
        };
        self.merge.forward(g, &z)
    }
}

impl Module for BiMamba {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.fwd.visit_params(&join_path(prefix, "fwd"), v);
        self.bwd.visit_params(&join_path(prefix, "bwd"), v);
        self.merge.visit_params(&join_path(prefix, "merge"), v);
    }
}

/// One dual-path repeat: local (intra-chunk) then global (inter-chunk)
/// bidirectional passes, each followed by LayerNorm and a residual add.
#[derive(Clone)]
pub struct DualPathRepeat {
    pub intra: BiMamba,
    pub inter: BiMamba,
    pub ln_intra: LayerNorm,
    pub ln_inter: LayerNorm,
}

impl DualPathRepeat {
    pub fn init(rng: &mut impl Rng, d_model: usize, d_state: usize) -> Self {
        DualPathRepeat {
            intra: BiMamba::init(rng, d_model, d_state),
            inter: BiMamba::init(rng, d_model, d_state),
            ln_intra: LayerNorm::new(d_model),
            ln_inter: LayerNorm::new(d_model),
        }
    }
}

impl Module for DualPathRepeat {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.intra.visit_params(&join_path(prefix, "intra"), v);
        self.inter.visit_params(&join_path(prefix, "inter"), v);
        self.ln_intra.visit_params(&join_path(prefix, "ln_intra"), v);
        self.ln_inter.visit_params(&join_path(prefix, "ln_inter"), v);
    }
}

/// Conv front-end plus N dual-path repeats.
#[derive(Clone)]
pub struct SpeechEncoder {
    pub cfg: SpeechEncoderConfig,
    pub front_w: Tensor,
    pub repeats: Vec<DualPathRepeat>,
}

impl SpeechEncoder {
    pub fn init(rng: &mut impl Rng, cfg: &SpeechEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let front_w = Tensor::randn(
            rng,
            &[cfg.d_model, 1, cfg.frame_len],
            (2.0 / cfg.frame_len as f64).sqrt(),
        );
        let repeats = (0..cfg.n_repeats)
            .map(|_| DualPathRepeat::init(rng, cfg.d_model, cfg.d_state))
            .collect();
        Ok(SpeechEncoder {
            cfg: cfg.clone(),
            front_w,
            repeats,
        })
    }

    /// wav: [B, T_samples] -> frame embedding [B, T_frames, d_model].
    pub fn encode_waveform(&self, g: &Graph, wav: &Tensor) -> Result<Tensor> {
        if wav.rank() != 2 {
            return Err(Error::shape(format!(
                "encode_waveform: expected [B, T], got {:?}",
                wav.shape()
            )));
        }
        let (b, t) = (wav.shape()[0], wav.shape()[1]);
        self.cfg.frames_for(t)?;
        let x = g.reshape(wav, &[b, 1, t])?;
        let conv = g.conv1d(&x, &self.front_w, self.cfg.frame_stride)?;
        let act = g.relu(&conv)?;
        g.transpose(&act, 1, 2)
    }

    /// Dual-path modeling, shape preserving on [B, T, d].
    pub fn model_sequence(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = self.cfg.chunk_len.min(t);
        let hop = self.cfg.chunk_hop.min(k);
        let mut cur = x.clone();
        for rep in &self.repeats {
            let seg = g.segment(&cur, k, hop)?;
            let s = seg.shape()[1];
            // local pass over each chunk
            let flat = g.reshape(&seg, &[b * s, k, d])?;
            let intra = rep.intra.forward(g, &flat)?;
            let a = g.add(&flat, &rep.ln_intra.forward(g, &intra)?)?;
            // global pass across chunks at each within-chunk offset
            let a4 = g.reshape(&a, &[b, s, k, d])?;
            let sw = g.transpose(&a4, 1, 2)?; // [B, K, S, d]
            let flat2 = g.reshape(&sw, &[b * k, s, d])?;
            let inter = rep.inter.forward(g, &flat2)?;
            let bseq = g.add(&flat2, &rep.ln_inter.forward(g, &inter)?)?;
            let b4 = g.reshape(&bseq, &[b, k, s, d])?;
            let back = g.transpose(&b4, 1, 2)?; // [B, S, K, d]
            cur = g.overlap_merge(&back, t, hop)?;
        }
        Ok(cur)
    }

    /// Full speech path: waveform in, contextual frame embeddings out.
    pub fn forward(&self, g: &Graph, wav: &Tensor) -> Result<Tensor> {
        let emb = self.encode_waveform(g, wav)?;
        self.model_sequence(g, &emb)
    }
}

impl Module for SpeechEncoder {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&join_path(prefix, "front_w"), &mut self.front_w);
        for (i, rep) in self.repeats.iter_mut().enumerate() {
            rep.visit_params(&join_path(prefix, &format!("repeat{i}")), v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, max_abs_diff};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> SpeechEncoderConfig {
        SpeechEncoderConfig {
            sample_rate: 8000,
            frame_len: 8,
            frame_stride: 4,
            d_model: 6,
            chunk_len: 4,
            chunk_hop: 2,
            n_repeats: 1,
            d_state: 2,
        }
    }

    #[test]
    fn frame_count_contract() {
        let cfg = SpeechEncoderConfig::default();
        assert_eq!(cfg.frames_for(8000).unwrap(), 999);
        assert!(cfg.frames_for(random_len_too_short()).is_err());
        fn random_len_too_short() -> usize {
            7
        }
    }

    #[test]
    fn zero_waveform_gives_zero_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let enc = SpeechEncoder::init(&mut rng, &toy_cfg()).unwrap();
        let g = Graph::inference();
        let wav = Tensor::zeros(&[2, 64]);
        let emb = enc.encode_waveform(&g, &wav).unwrap();
        assert!(emb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn segment_counts_and_exact_round_trip() {
        let g = Graph::inference();
        // K=4, P=2, T=6 -> 3 chunks
        let x = Tensor::from_vec(vec![1, 6, 1], vec![1., 2., 3., 4., 5., 6.]);
        let seg = g.segment(&x, 4, 2).unwrap();
        assert_eq!(seg.shape(), &[1, 3, 4, 1]);
        // chunk 2 starts at position 4 and is zero padded
        assert_eq!(seg.at(&[0, 2, 0, 0]), 5.0);
        assert_eq!(seg.at(&[0, 2, 1, 0]), 6.0);
        assert_eq!(seg.at(&[0, 2, 2, 0]), 0.0);

        // merge(segment(x)) == x for random input
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x = Tensor::randn(&mut rng, &[2, 11, 3], 1.0);
        let seg = g.segment(&x, 4, 2).unwrap();
        let back = g.overlap_merge(&seg, 11, 2).unwrap();
        assert!(max_abs_diff(&x, &back) < 1e-12);

        // no overlap, T divisible by K: pure reshape both ways
        let x = Tensor::randn(&mut rng, &[1, 8, 2], 1.0);
        let seg = g.segment(&x, 4, 4).unwrap();
        assert_eq!(seg.shape(), &[1, 2, 4, 2]);
        assert_eq!(seg.data(), x.data());
        let back = g.overlap_merge(&seg, 8, 4).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn segment_and_merge_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let x = Tensor::randn(&mut rng, &[1, 7, 2], 1.0);
        let err = finite_diff_check(
            &|g, x| {
                let seg = g.segment(x, 4, 2)?;
                let m = g.overlap_merge(&seg, 7, 2)?;
                let y = g.mul(&m, &m)?;
                g.sum_all(&y)
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-6, "segment/merge grad rel err {err}");
    }

    #[test]
    fn bimamba_swap_symmetry_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let bm = BiMamba::init(&mut rng, 6, 2);
        let swapped = BiMamba {
            fwd: bm.bwd.clone(),
            bwd: bm.fwd.clone(),
            merge: bm.merge.clone(),
        };
        let g = Graph::inference();
        let x = Tensor::randn(&mut rng, &[2, 9, 6], 1.0);
        let y = bm.forward(&g, &x).unwrap();
        let want = g.flip(&y, 1).unwrap();
        let got = swapped
            .forward_ordered(&g, &g.flip(&x, 1).unwrap(), true)
            .unwrap();
        assert_eq!(want.data(), got.data(), "swap symmetry must be bit exact");
    }

    #[test]
    fn bimamba_shape_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let bm = BiMamba::init(&mut rng, 4, 2);
        let g = Graph::inference();
        let x = Tensor::randn(&mut rng, &[2, 37, 4], 1.0);
        let y = bm.forward(&g, &x).unwrap();
        assert_eq!(y.shape(), x.shape());

        let x = Tensor::randn(&mut rng, &[1, 5, 4], 1.0);
        let err = finite_diff_check(
            &move |g, x| {
                let y = bm.forward(g, x)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-4, "bimamba grad rel err {err}");
    }

    #[test]
    fn degenerate_chunking_equals_single_global_pass() {
        // N=1, K=T, P=K: the dual path reduces to intra over one chunk
        // plus inter over chunk-index sequences of length 1
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let mut cfg = toy_cfg();
        cfg.chunk_len = 10;
        cfg.chunk_hop = 10;
        let enc = SpeechEncoder::init(&mut rng, &cfg).unwrap();
        let g = Graph::inference();
        let x = Tensor::randn(&mut rng, &[1, 10, 6], 1.0);
        let y = enc.model_sequence(&g, &x).unwrap();

        // manual single-pass computation
        let rep = &enc.repeats[0];
        let a = g
            .add(&x, &rep.ln_intra.forward(&g, &rep.intra.forward(&g, &x).unwrap()).unwrap())
            .unwrap();
        let a2 = g.reshape(&a, &[10, 1, 6]).unwrap();
        let inter = rep.inter.forward(&g, &a2).unwrap();
        let b = g
            .add(&a2, &rep.ln_inter.forward(&g, &inter).unwrap())
            .unwrap();
        let want = g.reshape(&b, &[1, 10, 6]).unwrap();
        assert!(max_abs_diff(&y, &want) < 1e-12);
    }

    #[test]
    fn dual_path_is_noncausal_in_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        let enc = SpeechEncoder::init(&mut rng, &toy_cfg()).unwrap();
        let g = Graph::inference();
        let x = Tensor::randn(&mut rng, &[1, 12, 6], 1.0);
        let y = enc.model_sequence(&g, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        let mut xp = x.data().to_vec();
        let t_mid = 6;
        for j in 0..6 {
            xp[t_mid * 6 + j] += 0.5;
        }
        let yp = enc
            .model_sequence(&g, &Tensor::from_vec(vec![1, 12, 6], xp))
            .unwrap();
        let before: f64 = (0..t_mid)
            .map(|t| (0..6).map(|j| (y.at(&[0, t, j]) - yp.at(&[0, t, j])).abs()).sum::<f64>())
            .sum();
        let after: f64 = (t_mid + 1..12)
            .map(|t| (0..6).map(|j| (y.at(&[0, t, j]) - yp.at(&[0, t, j])).abs()).sum::<f64>())
            .sum();
        assert!(before > 0.0, "perturbation must reach earlier frames");
        assert!(after > 0.0, "perturbation must reach later frames");
    }

    #[test]
    fn full_encoder_gradient_on_toy_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let enc = SpeechEncoder::init(&mut rng, &toy_cfg()).unwrap();
        let wav0 = Tensor::randn(&mut rng, &[1, 32], 0.5);
        let err = finite_diff_check(
            &move |g, wav| {
                let y = enc.forward(g, wav)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &wav0,
        )
        .unwrap();
        assert!(err < 1e-4, "speech encoder grad rel err {err}");
    }
}
