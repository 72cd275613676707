//! EEG encoder: channel stem with sinusoidal positions, then stacked
//! EEGKAN layers — two-head self-attention and a three-layer KAN stack,
//! each sub-block wrapped in dropout, LayerNorm and a residual.

use crate::error::{Error, Result};
use crate::kan::KanLayer;
use crate::nn::{join_path, sinusoidal_pe, LayerNorm, Linear, Mha, Module, ParamVisitor};
use crate::tensor::{Graph, Mode, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EegEncoderConfig {
    pub n_channels: usize,
    pub eeg_rate: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kan_layers: usize,
    pub dropout_p: f64,
    pub n_layers: usize,
    pub kan_grid: usize,
    pub kan_order: usize,
    pub kan_range: f64,
}

impl Default for EegEncoderConfig {
    fn default() -> Self {
        EegEncoderConfig {
            n_channels: 16,
            eeg_rate: 128,
            d_model: 64,
            n_heads: 2,
            n_kan_layers: 3,
            dropout_p: 0.5,
            n_layers: 1,
            kan_grid: 5,
            kan_order: 3,
            // LayerNorm feeds the KAN stack, so inputs live around [-3, 3]
            kan_range: 3.0,
        }
    }
}

impl EegEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.n_channels == 0 || self.n_layers == 0 || self.n_kan_layers == 0 {
            return Err(Error::config("eeg encoder sizes must be positive"));
        }
        Ok(())
    }
}

/// One EEGKAN layer; input and output are both [B, T, d].
#[derive(Clone)]
pub struct EegKanLayer {
    pub mha: Mha,
    pub ln_attn: LayerNorm,
    pub ln_kan: LayerNorm,
    pub kans: Vec<KanLayer>,
    pub dropout_p: f64,
}

impl EegKanLayer {
    pub fn init(rng: &mut impl Rng, cfg: &EegEncoderConfig) -> Result<Self> {
        let kans = (0..cfg.n_kan_layers)
            .map(|_| {
                KanLayer::init(
                    rng,
                    cfg.d_model,
                    cfg.d_model,
                    cfg.kan_grid,
                    cfg.kan_order,
                    cfg.kan_range,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EegKanLayer {
            mha: Mha::init(rng, cfg.d_model, cfg.n_heads),
            ln_attn: LayerNorm::new(cfg.d_model),
            ln_kan: LayerNorm::new(cfg.d_model),
            kans,
            dropout_p: cfg.dropout_p,
        })
    }

    /// y1 = LN(x + dropout(MHA(x,x,x)));
    /// y  = LN(y1 + dropout(KAN3(KAN2(KAN1(y1))))).
    pub fn forward(
        &self,
        g: &Graph,
        x: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let (b, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let attn = self.mha.forward(g, x, x, x)?;
        let attn = g.dropout(&attn, self.dropout_p, mode, rng)?;
        let y1 = self.ln_attn.forward(g, &g.add(x, &attn)?)?;
        // KAN stack applies per frame
        let mut z = g.reshape(&y1, &[b * t, d])?;
        for kan in &self.kans {
            z = kan.forward(g, &z)?;
        }
        let z = g.reshape(&z, &[b, t, d])?;
        let z = g.dropout(&z, self.dropout_p, mode, rng)?;
        self.ln_kan.forward(g, &g.add(&y1, &z)?)
    }
}

impl Module for EegKanLayer {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.mha.visit_params(&join_path(prefix, "mha"), v);
        self.ln_attn.visit_params(&join_path(prefix, "ln_attn"), v);
        self.ln_kan.visit_params(&join_path(prefix, "ln_kan"), v);
        for (i, kan) in self.kans.iter_mut().enumerate() {
            kan.visit_params(&join_path(prefix, &format!("kan{i}")), v);
        }
    }
}

/// Stem projection plus the EEGKAN stack.
#[derive(Clone)]
pub struct EegEncoder {
    pub cfg: EegEncoderConfig,
    pub stem: Linear,
    pub layers: Vec<EegKanLayer>,
}

impl EegEncoder {
    pub fn init(rng: &mut impl Rng, cfg: &EegEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Linear::init(rng, cfg.n_channels, cfg.d_model, true);
        let layers = (0..cfg.n_layers)
            .map(|_| EegKanLayer::init(rng, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(EegEncoder {
            cfg: cfg.clone(),
            stem,
            layers,
        })
    }

    /// eeg: [B, C, T_eeg] -> per-frame tokens [B, T_eeg, d_model] with
    /// sinusoidal positions added.
    pub fn project(&self, g: &Graph, eeg: &Tensor) -> Result<Tensor> {
        if eeg.rank() != 3 || eeg.shape()[1] != self.cfg.n_channels {
            return Err(Error::data(format!(
                "eeg input {:?} does not match configured channel count {}",
                eeg.shape(),
                self.cfg.n_channels
            )));
        }
        let t = eeg.shape()[2];
        let x = g.transpose(eeg, 1, 2)?; // [B, T, C]
        let tok = self.stem.forward(g, &x)?;
        let pe = sinusoidal_pe(t, self.cfg.d_model);
        g.add(&tok, &pe)
    }

    pub fn forward(
        &self,
        g: &Graph,
        eeg: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let mut x = self.project(g, eeg)?;
        for layer in &self.layers {
            x = layer.forward(g, &x, mode, rng)?;
        }
        Ok(x)
    }
}

impl Module for EegEncoder {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.stem.visit_params(&join_path(prefix, "stem"), v);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&join_path(prefix, &format!("layer{i}")), v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_labeled;
    use crate::tensor::finite_diff_check_norm;
    use rand::SeedableRng;

    fn toy_cfg() -> EegEncoderConfig {
        EegEncoderConfig {
            n_channels: 4,
            d_model: 8,
            kan_grid: 4,
            ..Default::default()
        }
    }

    #[test]
    fn zero_eeg_projects_to_positional_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let enc = EegEncoder::init(&mut rng, &toy_cfg()).unwrap();
        let g = Graph::inference();
        let eeg = Tensor::zeros(&[2, 4, 10]);
        let tok = enc.project(&g, &eeg).unwrap();
        let pe = sinusoidal_pe(10, 8);
        for b in 0..2 {
            for t in 0..10 {
                for j in 0..8 {
                    assert_eq!(tok.at(&[b, t, j]), pe.at(&[t, j]));
                }
            }
        }
    }

    #[test]
    fn projection_shape_contract() {
        let cfg = EegEncoderConfig {
            n_channels: 64,
            d_model: 64,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let enc = EegEncoder::init(&mut rng, &cfg).unwrap();
        let g = Graph::inference();
        let eeg = Tensor::randn(&mut rng, &[2, 64, 128], 1.0);
        let tok = enc.project(&g, &eeg).unwrap();
        assert_eq!(tok.shape(), &[2, 128, 64]);
        // channel-count mismatch is a data error naming the counts
        let bad = Tensor::zeros(&[2, 32, 128]);
        let err = enc.project(&g, &bad).unwrap_err().to_string();
        assert!(err.contains("64") && err.contains("32"), "{err}");
    }

    #[test]
    fn eval_mode_is_deterministic_and_shape_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let enc = EegEncoder::init(&mut rng, &toy_cfg()).unwrap();
        let g = Graph::inference();
        let eeg = Tensor::randn(&mut rng, &[2, 4, 16], 1.0);
        let mut r1 = rng_labeled(7, "dropout", &[0]);
        let y1 = enc.forward(&g, &eeg, Mode::Eval, &mut r1).unwrap();
        let mut r2 = rng_labeled(8, "dropout", &[1]);
        let y2 = enc.forward(&g, &eeg, Mode::Eval, &mut r2).unwrap();
        assert_eq!(y1.shape(), &[2, 16, 8]);
        assert_eq!(y1.data(), y2.data(), "eval mode must ignore the rng");
    }

    #[test]
    fn train_mode_varies_only_with_dropout_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let enc = EegEncoder::init(&mut rng, &toy_cfg()).unwrap();
        let g = Graph::inference();
        let eeg = Tensor::randn(&mut rng, &[1, 4, 12], 1.0);
        let mut ra = rng_labeled(1, "dropout", &[]);
        let ya = enc.forward(&g, &eeg, Mode::Train, &mut ra).unwrap();
        let mut rb = rng_labeled(1, "dropout", &[]);
        let yb = enc.forward(&g, &eeg, Mode::Train, &mut rb).unwrap();
        assert_eq!(ya.data(), yb.data(), "same dropout seed, same output");
        let mut rc = rng_labeled(2, "dropout", &[]);
        let yc = enc.forward(&g, &eeg, Mode::Train, &mut rc).unwrap();
        assert_ne!(ya.data(), yc.data(), "different dropout seed must differ");
    }

    #[test]
    fn channel_permutation_with_matching_stem_rows_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut enc = EegEncoder::init(&mut rng, &toy_cfg()).unwrap();
        let g = Graph::inference();
        let eeg = Tensor::randn(&mut rng, &[1, 4, 9], 1.0);
        let mut drng = rng_labeled(0, "dropout", &[]);
        let y = enc.forward(&g, &eeg, Mode::Eval, &mut drng).unwrap();

        // permute channels and the stem weight rows the same way
        let perm = [2usize, 0, 3, 1];
        let mut eeg_p = vec![0.0; eeg.len()];
        for (new_c, &old_c) in perm.iter().enumerate() {
            for t in 0..9 {
                eeg_p[new_c * 9 + t] = eeg.at(&[0, old_c, t]);
            }
        }
        let w = enc.stem.w.clone(); // [C, d]
        let mut w_p = vec![0.0; w.len()];
        for (new_c, &old_c) in perm.iter().enumerate() {
            for j in 0..8 {
                w_p[new_c * 8 + j] = w.at(&[old_c, j]);
            }
        }
        enc.stem.w = Tensor::from_vec(vec![4, 8], w_p);
        let yp = enc
            .forward(
                &g,
                &Tensor::from_vec(vec![1, 4, 9], eeg_p),
                Mode::Eval,
                &mut drng,
            )
            .unwrap();
        for (a, b) in y.data().iter().zip(yp.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn eegkan_gradient_in_eval_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let cfg = EegEncoderConfig {
            n_channels: 3,
            d_model: 4,
            kan_grid: 4,
            ..Default::default()
        };
        let enc = EegEncoder::init(&mut rng, &cfg).unwrap();
        let eeg0 = Tensor::randn(&mut rng, &[1, 3, 6], 1.0);
        let err = finite_diff_check_norm(
            &move |g, eeg| {
                let mut drng = rng_labeled(0, "dropout", &[]);
                let y = enc.forward(g, eeg, Mode::Eval, &mut drng)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &eeg0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "eeg encoder grad rel err {err}");
    }
}
