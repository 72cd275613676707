//! Cross-modal fusion and extraction: align EEG embeddings to the speech
//! frame rate, fuse with stacked bidirectional cross-attention (layer-wise
//! accumulated, spliced with the originals), estimate a non-negative mask,
//! and decode the masked embedding back to a waveform.

use crate::error::{Error, Result};
use crate::nn::{join_path, LayerNorm, Linear, Mha, Module, ParamVisitor};
use crate::tensor::{Graph, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

impl Graph {
    /// Linear interpolation along the time axis of [B, T_in, d] to exactly
    /// `t_out` positions; endpoints map to endpoints. Differentiable.
    pub fn time_interp(&self, x: &Tensor, t_out: usize) -> Result<Tensor> {
        if x.rank() != 3 {
            return Err(Error::shape(format!(
                "time_interp: expected [B,T,d], got {:?}",
                x.shape()
            )));
        }
        let (b, t_in, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if t_in < 2 {
            return Err(Error::data(format!(
                "time_interp: need at least 2 input frames, got {t_in}"
            )));
        }
        if t_out == 0 {
            return Err(Error::data("time_interp: zero output frames".to_string()));
        }
        let parents = self.parent_ids(&[x])?;
        // integer-exact sample positions: pos(t) = t*(t_in-1)/(t_out-1)
        let weights: Vec<(usize, f64)> = (0..t_out)
            .map(|t| {
                if t_out == 1 {
                    return (0, 0.0);
                }
                let num = t * (t_in - 1);
                let den = t_out - 1;
                let i0 = (num / den).min(t_in - 2);
                let w = (num - i0 * den) as f64 / den as f64;
                (i0, w)
            })
            .collect();
        let xd = x.data();
        let mut data = vec![0.0; b * t_out * d];
        for bi in 0..b {
            for (t, &(i0, w)) in weights.iter().enumerate() {
                let lo = (bi * t_in + i0) * d;
                let hi = lo + d;
                let dst = (bi * t_out + t) * d;
                for j in 0..d {
                    data[dst + j] = (1.0 - w) * xd[lo + j] + w * xd[hi + j];
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
                let mut dx = vec![0.0; b * t_in * d];
                for bi in 0..b {
                    for (t, &(i0, w)) in weights.iter().enumerate() {
                        let src = (bi * t_out + t) * d;
                        let lo = (bi * t_in + i0) * d;
                        for j in 0..d {
                            dx[lo + j] += (1.0 - w) * g[src + j];
                            dx[lo + d + j] += w * g[src + j];
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CmcaConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
}

impl Default for CmcaConfig {
    fn default() -> Self {
        CmcaConfig {
            n_layers: 3,
            d_model: 64,
            n_heads: 2,
        }
    }
}

/// One bidirectional cross-attention layer with post-norm residuals.
#[derive(Clone)]
struct CmcaLayer {
    s_from_e: Mha,
    e_from_s: Mha,
    ln_s: LayerNorm,
    ln_e: LayerNorm,
}

/// Convolutional multi-layer cross-attention fusion. Per layer, each
/// branch cross-attends into the other; branch outputs accumulate into
/// running sums, and the final feature is the splice
/// [sum_s, sum_e, s_0, e_0] projected back to d_model.
#[derive(Clone)]
pub struct Cmca {
    pub cfg: CmcaConfig,
    layers: Vec<CmcaLayer>,
    pub out_proj: Linear,
}

impl Cmca {
    pub fn init(rng: &mut impl Rng, cfg: &CmcaConfig) -> Result<Self> {
        if cfg.n_layers == 0 {
            return Err(Error::config("cmca: n_layers must be >= 1"));
        }
        if cfg.d_model % cfg.n_heads != 0 {
            return Err(Error::config(format!(
                "cmca: d_model {} not divisible by heads {}",
                cfg.d_model, cfg.n_heads
            )));
        }
        let layers = (0..cfg.n_layers)
            .map(|_| CmcaLayer {
                s_from_e: Mha::init(rng, cfg.d_model, cfg.n_heads),
                e_from_s: Mha::init(rng, cfg.d_model, cfg.n_heads),
                ln_s: LayerNorm::new(cfg.d_model),
                ln_e: LayerNorm::new(cfg.d_model),
            })
            .collect();
        Ok(Cmca {
            cfg: cfg.clone(),
            layers,
            out_proj: Linear::init(rng, 4 * cfg.d_model, cfg.d_model, true),
        })
    }

    /// speech/eeg embeddings, both [B, T, d] -> fused [B, T, d].
    pub fn forward(&self, g: &Graph, speech: &Tensor, eeg: &Tensor) -> Result<Tensor> {
        if speech.shape() != eeg.shape() {
            return Err(Error::contract(format!(
                "cmca: speech {:?} and eeg {:?} must be time-aligned; call time_interp first",
                speech.shape(),
                eeg.shape()
            )));
        }
        let mut s = speech.clone();
        let mut e = eeg.clone();
        let mut s_acc: Option<Tensor> = None;
        let mut e_acc: Option<Tensor> = None;
        for layer in &self.layers {
            let s_new = layer
                .ln_s
                .forward(g, &g.add(&s, &layer.s_from_e.forward(g, &s, &e, &e)?)?)?;
            let e_new = layer
                .ln_e
                .forward(g, &g.add(&e, &layer.e_from_s.forward(g, &e, &s, &s)?)?)?;
            s_acc = Some(match s_acc {
                Some(acc) => g.add(&acc, &s_new)?,
                None => s_new.clone(),
            });
            e_acc = Some(match e_acc {
                Some(acc) => g.add(&acc, &e_new)?,
                None => e_new.clone(),
            });
            s = s_new;
            e = e_new;
        }
        let spliced = g.concat(
            &[&s_acc.unwrap(), &e_acc.unwrap(), speech, eeg],
            speech.rank() - 1,
        )?;
        self.out_proj.forward(g, &spliced)
    }
}

impl Module for Cmca {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.s_from_e
                .visit_params(&join_path(prefix, &format!("layer{i}.s_from_e")), v);
            l.e_from_s
                .visit_params(&join_path(prefix, &format!("layer{i}.e_from_s")), v);
            l.ln_s
                .visit_params(&join_path(prefix, &format!("layer{i}.ln_s")), v);
            l.ln_e
                .visit_params(&join_path(prefix, &format!("layer{i}.ln_e")), v);
        }
        self.out_proj.visit_params(&join_path(prefix, "out_proj"), v);
    }
}

/// Final mask nonlinearity. ReLU is the default (unbounded gain suits
/// SI-SDR training); sigmoid is available as a config switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskActivation {
    Relu,
    Sigmoid,
}

/// Pointwise conv + PReLU + LayerNorm blocks, then a non-negative output
/// activation: the mask that lets only the target speech pass.
#[derive(Clone)]
pub struct MaskNet {
    blocks: Vec<MaskBlock>,
    pub activation: MaskActivation,
}

#[derive(Clone)]
struct MaskBlock {
    lin: Linear,
    prelu_alpha: Tensor,
    ln: LayerNorm,
}

impl MaskNet {
    pub fn init(rng: &mut impl Rng, d: usize, depth: usize, activation: MaskActivation) -> Self {
        let blocks = (0..depth.max(1))
            .map(|_| MaskBlock {
                lin: Linear::init(rng, d, d, true),
                prelu_alpha: Tensor::full(&[d], 0.25),
                ln: LayerNorm::new(d),
            })
            .collect();
        MaskNet { blocks, activation }
    }

    /// fused: [B, T, d] -> mask [B, T, d], elementwise >= 0.
    pub fn forward(&self, g: &Graph, fused: &Tensor) -> Result<Tensor> {
        let mut x = fused.clone();
        for blk in &self.blocks {
            let z = blk.lin.forward(g, &x)?;
            // PReLU: relu(z) - alpha .* relu(-z)
            let neg = g.mul(&blk.prelu_alpha, &g.relu(&g.neg(&z)?)?)?;
            let act = g.sub(&g.relu(&z)?, &neg)?;
            x = blk.ln.forward(g, &act)?;
        }
        match self.activation {
            MaskActivation::Relu => g.relu(&x),
            MaskActivation::Sigmoid => g.sigmoid(&x),
        }
    }
}

impl Module for MaskNet {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.lin
                .visit_params(&join_path(prefix, &format!("block{i}.lin")), v);
            v.visit(
                &join_path(prefix, &format!("block{i}.prelu_alpha")),
                &mut b.prelu_alpha,
            );
            b.ln
                .visit_params(&join_path(prefix, &format!("block{i}.ln")), v);
        }
    }
}

/// Apply the mask to the speech embedding and decode to `t_samples` with a
/// transposed convolution, trimming or zero-padding the tail as needed.
pub fn apply_and_decode(
    g: &Graph,
    speech_emb: &Tensor,
    mask: &Tensor,
    decoder_w: &Tensor,
    stride: usize,
    t_samples: usize,
) -> Result<Tensor> {
    if speech_emb.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "apply_and_decode: embedding {:?} vs mask {:?}",
            speech_emb.shape(),
            mask.shape()
        )));
    }
    let masked = g.mul(speech_emb, mask)?;
    let chans = g.transpose(&masked, 1, 2)?; // [B, d, T]
    let wav = g.conv_transpose1d(&chans, decoder_w, stride)?; // [B, 1, T_dec]
    let b = wav.shape()[0];
    let t_dec = wav.shape()[2];
    let flat = g.reshape(&wav, &[b, t_dec])?;
    if t_dec == t_samples {
        Ok(flat)
    } else if t_dec > t_samples {
        g.slice(&flat, 1, 0, t_samples)
    } else {
        let pad = Tensor::zeros(&[b, t_samples - t_dec]);
        g.concat(&[&flat, &pad], 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, finite_diff_check_norm, max_abs_diff};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn time_interp_identity_and_endpoints() {
        let g = Graph::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let x = Tensor::randn(&mut rng, &[2, 5, 3], 1.0);
        let same = g.time_interp(&x, 5).unwrap();
        assert!(max_abs_diff(&x, &same) < 1e-15, "equal length must be identity");

        // constant in time stays constant
        let c = Tensor::from_vec(vec![1, 2, 2], vec![3.0, -1.0, 3.0, -1.0]);
        let up = g.time_interp(&c, 7).unwrap();
        for t in 0..7 {
            assert_eq!(up.at(&[0, t, 0]), 3.0);
            assert_eq!(up.at(&[0, t, 1]), -1.0);
        }

        // [0, 1] upsampled to 3 frames -> [0, 0.5, 1]
        let ramp = Tensor::from_vec(vec![1, 2, 1], vec![0.0, 1.0]);
        let up = g.time_interp(&ramp, 3).unwrap();
        assert_eq!(up.data(), &[0.0, 0.5, 1.0]);

        // too-short input is a data error
        let short = Tensor::zeros(&[1, 1, 2]);
        assert!(matches!(g.time_interp(&short, 4), Err(Error::Data(_))));
    }

    #[test]
    fn time_interp_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let x = Tensor::randn(&mut rng, &[1, 4, 2], 1.0);
        let err = finite_diff_check(
            &|g, x| {
                let y = g.time_interp(x, 9)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &x,
        )
        .unwrap();
        assert!(err < 1e-6, "time_interp grad rel err {err}");
    }

    #[test]
    fn cmca_shape_and_zero_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let cfg = CmcaConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
        };
        let cmca = Cmca::init(&mut rng, &cfg).unwrap();
        let g = Graph::inference();
        let s = Tensor::randn(&mut rng, &[2, 20, 8], 1.0);
        let e = Tensor::randn(&mut rng, &[2, 20, 8], 1.0);
        let y = cmca.forward(&g, &s, &e).unwrap();
        assert_eq!(y.shape(), &[2, 20, 8]);

        // length mismatch is a contract error
        let e_short = Tensor::randn(&mut rng, &[2, 10, 8], 1.0);
        assert!(matches!(
            cmca.forward(&g, &s, &e_short),
            Err(Error::Contract(_))
        ));

        // single layer, zero eeg, zero-initialized attention: the fused
        // output is just a projection of the splice [LN(s), 0, s, 0]
        let mut cmca1 = Cmca::init(
            &mut rng,
            &CmcaConfig {
                n_layers: 1,
                d_model: 8,
                n_heads: 2,
            },
        )
        .unwrap();
        for l in &mut cmca1.layers {
            l.s_from_e = zeroed_mha(8, 2);
            l.e_from_s = zeroed_mha(8, 2);
        }
        let zero_e = Tensor::zeros(&[1, 6, 8]);
        let s1 = Tensor::randn(&mut rng, &[1, 6, 8], 1.0);
        let y = cmca1.forward(&g, &s1, &zero_e).unwrap();
        let s_ln = cmca1.layers[0].ln_s.forward(&g, &s1).unwrap();
        let want = cmca1
            .out_proj
            .forward(
                &g,
                &g.concat(&[&s_ln, &Tensor::zeros(&[1, 6, 8]), &s1, &zero_e], 2)
                    .unwrap(),
            )
            .unwrap();
        assert!(max_abs_diff(&y, &want) < 1e-12);

        fn zeroed_mha(d: usize, heads: usize) -> Mha {
            Mha {
                wq: Linear::zeros(d, d, true),
                wk: Linear::zeros(d, d, true),
                wv: Linear::zeros(d, d, true),
                wo: Linear::zeros(d, d, true),
                heads,
            }
        }
    }

    #[test]
    fn cmca_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let cfg = CmcaConfig {
            n_layers: 2,
            d_model: 4,
            n_heads: 2,
        };
        let cmca = Cmca::init(&mut rng, &cfg).unwrap();
        let e = Tensor::randn(&mut rng, &[1, 5, 4], 1.0);
        let s0 = Tensor::randn(&mut rng, &[1, 5, 4], 1.0);
        let err = finite_diff_check_norm(
            &move |g, s| {
                let y = cmca.forward(g, s, &e)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &s0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "cmca grad rel err {err}");
    }

    #[test]
    fn mask_is_nonnegative_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let net = MaskNet::init(&mut rng, 6, 4, MaskActivation::Relu);
        let g = Graph::inference();
        // ~10^4 probed values across several random batches
        for _ in 0..10 {
            let fused = Tensor::randn(&mut rng, &[4, 50, 6], 2.0);
            let mask = net.forward(&g, &fused).unwrap();
            assert!(mask.data().iter().all(|&v| v >= 0.0));
        }
        let sig = MaskNet::init(&mut rng, 6, 4, MaskActivation::Sigmoid);
        let fused = Tensor::randn(&mut rng, &[2, 10, 6], 2.0);
        let m = sig.forward(&g, &fused).unwrap();
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let net = MaskNet::init(&mut rng, 6, 4, MaskActivation::Relu);
        let g = Graph::inference();
        let fused = Tensor::zeros(&[1, 8, 6]);
        let mask = net.forward(&g, &fused).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masknet_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(76);
        let net = MaskNet::init(&mut rng, 4, 2, MaskActivation::Relu);
        let x0 = Tensor::randn(&mut rng, &[1, 6, 4], 1.0);
        let err = finite_diff_check_norm(
            &move |g, x| {
                let m = net.forward(g, x)?;
                g.sum_all(&g.mul(&m, &m)?)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "masknet grad rel err {err}");
    }

    #[test]
    fn decode_mask_semantics_and_length() {
        let g = Graph::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (d, l, stride) = (4usize, 8usize, 4usize);
        let w = Tensor::randn(&mut rng, &[d, 1, l], 1.0);
        let emb = Tensor::randn(&mut rng, &[2, 10, d], 1.0);

        // ones mask: decoder sees the unmasked embedding; natural decode
        // length is (10-1)*4 + 8 = 44, so asking for 47 pads three zeros
        let ones = Tensor::ones(&[2, 10, d]);
        let y1 = apply_and_decode(&g, &emb, &ones, &w, stride, 47).unwrap();
        let direct = g
            .conv_transpose1d(&g.transpose(&emb, 1, 2).unwrap(), &w, stride)
            .unwrap();
        let direct = g.reshape(&direct, &[2, 44]).unwrap();
        for b in 0..2 {
            for t in 0..44 {
                assert_eq!(y1.at(&[b, t]), direct.at(&[b, t]));
            }
            for t in 44..47 {
                assert_eq!(y1.at(&[b, t]), 0.0, "tail must be zero padded");
            }
        }

        // zero mask: silence
        let zeros = Tensor::zeros(&[2, 10, d]);
        let y0 = apply_and_decode(&g, &emb, &zeros, &w, stride, 44).unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));

        // exact output length across parameterizations
        for &(t_frames, l, stride, t_samples) in &[
            (10usize, 8usize, 4usize, 44usize),
            (5, 16, 8, 48),
            (7, 4, 4, 28),
            (9, 6, 2, 22),
            (3, 12, 6, 30),
            (12, 2, 1, 13),
            (4, 16, 16, 64),
        ] {
            let w = Tensor::randn(&mut rng, &[d, 1, l], 1.0);
            let emb = Tensor::randn(&mut rng, &[1, t_frames, d], 1.0);
            let mask = Tensor::ones(&[1, t_frames, d]);
            let y = apply_and_decode(&g, &emb, &mask, &w, stride, t_samples).unwrap();
            assert_eq!(y.shape(), &[1, t_samples]);
        }
    }
}
