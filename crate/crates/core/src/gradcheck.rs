//! The finite-difference verification suite: per-layer checks at 1e-4 and
//! a whole-model sweep over every parameter at 1e-3. Run by the
//! `gradcheck` CLI command and by the acceptance tests.

use crate::eeg::{EegEncoder, EegEncoderConfig};
use crate::error::Result;
use crate::fusion::{Cmca, CmcaConfig, MaskActivation, MaskNet};
use crate::kan::KanLayer;
use crate::loss::neg_si_sdr_loss;
use crate::model::{Extractor, ModelConfig};
use crate::nn::{attach_params, collect_grads, collect_params, Module, ParamVisitor};
use crate::rng::rng_labeled;
use crate::speech::{SpeechEncoder, SpeechEncoderConfig};
use crate::ssm::MambaBlock;
use crate::synth;
use crate::tensor::{finite_diff_check_norm, rel_error_inf, Graph, Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.rel_err < self.tol
    }
}

/// The toy configuration pinned by the acceptance criteria: 512-sample
/// input, d_model 8, d_state 4, one dual-path repeat, one CMCA layer,
/// KAN grid 4 of order 3.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_state: 4,
        n_repeats: 1,
        cmca_layers: 1,
        kan_grid: 4,
        kan_order: 3,
        eeg_channels: 4,
        eeg_layers: 1,
        mask_blocks: 2,
        chunk_len: 16,
        chunk_hop: 8,
        frame_len: 16,
        frame_stride: 8,
        ..Default::default()
    }
}

const LAYER_TOL: f64 = 1e-4;
pub const FULL_MODEL_TOL: f64 = 1e-3;

/// Per-layer gradient checks, each against central finite differences.
pub fn run_layer_checks() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut out = Vec::new();
    let mut push = |name: &str, err: f64| {
        out.push(CheckResult {
            name: name.to_string(),
            rel_err: err,
            tol: LAYER_TOL,
        })
    };

    // matmul
    {
        let b = Tensor::randn(&mut rng, &[5, 3], 1.0);
        let x = Tensor::randn(&mut rng, &[4, 5], 1.0);
        let bc = b.clone();
        let err = finite_diff_check_norm(
            &move |g, x| g.sum_all(&g.mul(&g.matmul(x, &bc)?, &g.matmul(x, &bc)?)?),
            &x,
            1e-5,
        )?;
        push("matmul", err);
    }
    // conv1d + transpose
    {
        let w = Tensor::randn(&mut rng, &[3, 2, 4], 1.0);
        let x = Tensor::randn(&mut rng, &[1, 2, 14], 1.0);
        let wc = w.clone();
        let err = finite_diff_check_norm(
            &move |g, x| {
                let y = g.conv1d(x, &wc, 2)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &x,
            1e-5,
        )?;
        push("conv1d", err);
        let y0 = Tensor::randn(&mut rng, &[1, 3, 6], 1.0);
        let wc = w.clone();
        let err = finite_diff_check_norm(
            &move |g, y| {
                let z = g.conv_transpose1d(y, &wc, 2)?;
                g.sum_all(&g.mul(&z, &z)?)
            },
            &y0,
            1e-5,
        )?;
        push("conv_transpose1d", err);
    }
    // depthwise causal conv
    {
        let x = Tensor::randn(&mut rng, &[1, 9, 4], 1.0);
        let w = Tensor::randn(&mut rng, &[4, 3], 1.0);
        let b = Tensor::randn(&mut rng, &[4], 0.2);
        let err = finite_diff_check_norm(
            &move |g, x| {
                let y = g.conv1d_depthwise_causal(x, &w, &b)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &x,
            1e-5,
        )?;
        push("conv1d_depthwise_causal", err);
    }
    // elementwise chain, softmax, layer_norm
    {
        let x = Tensor::randn(&mut rng, &[12], 0.8);
        let err = finite_diff_check_norm(
            &|g, x| {
                let y = g.silu(&g.softplus(&g.sigmoid(x)?)?)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &x,
            1e-5,
        )?;
        push("elementwise_chain", err);
        let err = finite_diff_check_norm(
            &|g, x| {
                let y = g.softmax(x, 0)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &x,
            1e-5,
        )?;
        push("softmax", err);
        let x2 = Tensor::randn(&mut rng, &[3, 8], 1.0);
        let gain = Tensor::randn(&mut rng, &[8], 0.3);
        let bias = Tensor::randn(&mut rng, &[8], 0.3);
        let err = finite_diff_check_norm(
            &move |g, x| {
                let y = g.layer_norm(x, &gain, &bias, 1e-5)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &x2,
            1e-5,
        )?;
        push("layer_norm", err);
    }
    // attention
    {
        let k = Tensor::randn(&mut rng, &[1, 6, 4], 1.0);
        let v = Tensor::randn(&mut rng, &[1, 6, 4], 1.0);
        let q = Tensor::randn(&mut rng, &[1, 5, 4], 1.0);
        let (kc, vc) = (k.clone(), v.clone());
        let err = finite_diff_check_norm(
            &move |g, q| {
                let y = g.attention(q, &kc, &vc, 2)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &q,
            1e-5,
        )?;
        push("attention_q", err);
        let (qc, vc) = (q.clone(), v.clone());
        let err = finite_diff_check_norm(
            &move |g, k| {
                let y = g.attention(&qc, k, &vc, 2)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &k,
            1e-5,
        )?;
        push("attention_k", err);
    }
    // fused selective scan, every input
    {
        let (bsz, t, d, n) = (1usize, 6usize, 3usize, 4usize);
        let u = Tensor::randn(&mut rng, &[bsz, t, d], 1.0);
        let draw = Tensor::randn(&mut rng, &[bsz, t, d], 0.5);
        let a_log = Tensor::randn(&mut rng, &[d, n], 0.3);
        let b = Tensor::randn(&mut rng, &[bsz, t, n], 1.0);
        let c = Tensor::randn(&mut rng, &[bsz, t, n], 1.0);
        let dsk = Tensor::randn(&mut rng, &[d], 1.0);
        let names = [
            "selective_scan_u",
            "selective_scan_delta",
            "selective_scan_a_log",
            "selective_scan_b",
            "selective_scan_c",
            "selective_scan_d_skip",
        ];
        for (which, name) in names.iter().enumerate() {
            let (u, draw, a_log, b, c, dsk) = (
                u.clone(),
                draw.clone(),
                a_log.clone(),
                b.clone(),
                c.clone(),
                dsk.clone(),
            );
            let probe = match which {
                0 => u.clone(),
                1 => draw.clone(),
                2 => a_log.clone(),
                3 => b.clone(),
                4 => c.clone(),
                _ => dsk.clone(),
            };
            let err = finite_diff_check_norm(
                &move |g, x| {
                    let pick = |i: usize, t: &Tensor| {
                        if which == i {
                            x.clone()
                        } else {
                            t.detach()
                        }
                    };
                    let delta = g.softplus(&pick(1, &draw))?;
                    let y = g.selective_scan(
                        &pick(0, &u),
                        &delta,
                        &pick(2, &a_log),
                        &pick(3, &b),
                        &pick(4, &c),
                        &pick(5, &dsk),
                    )?;
                    g.sum_all(&g.mul(&y, &y)?)
                },
                &probe,
                1e-5,
            )?;
            push(name, err);
        }
    }
    // kan layer
    {
        let layer = KanLayer::init(&mut rng, 3, 2, 4, 3, 1.0)?;
        let x = Tensor::randn(&mut rng, &[4, 3], 0.6);
        let err = finite_diff_check_norm(
            &move |g, x| {
                let y = layer.forward(g, x)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &x,
            1e-5,
        )?;
        push("kan_layer", err);
    }
    // mamba block
    {
        let block = MambaBlock::init(&mut rng, 4, 2);
        let x = Tensor::randn(&mut rng, &[1, 6, 4], 1.0);
        let err = finite_diff_check_norm(
            &move |g, x| {
                let y = block.forward(g, x)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &x,
            1e-5,
        )?;
        push("mamba_block", err);
    }
    // speech encoder (dual path, toy)
    {
        let cfg = SpeechEncoderConfig {
            frame_len: 8,
            frame_stride: 4,
            d_model: 6,
            chunk_len: 4,
            chunk_hop: 2,
            n_repeats: 1,
            d_state: 2,
            ..Default::default()
        };
        let enc = SpeechEncoder::init(&mut rng, &cfg)?;
        let wav = Tensor::randn(&mut rng, &[1, 32], 0.5);
        let err = finite_diff_check_norm(
            &move |g, wav| {
                let y = enc.forward(g, wav)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &wav,
            1e-5,
        )?;
        push("speech_encoder", err);
    }
    // eegkan layer stack
    {
        let cfg = EegEncoderConfig {
            n_channels: 3,
            d_model: 4,
            kan_grid: 4,
            ..Default::default()
        };
        let enc = EegEncoder::init(&mut rng, &cfg)?;
        let eeg = Tensor::randn(&mut rng, &[1, 3, 6], 1.0);
        let err = finite_diff_check_norm(
            &move |g, eeg| {
                let mut drng = rng_labeled(0, "dropout", &[]);
                let y = enc.forward(g, eeg, Mode::Eval, &mut drng)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &eeg,
            1e-5,
        )?;
        push("eegkan_layer", err);
    }
    // cmca
    {
        let cmca = Cmca::init(
            &mut rng,
            &CmcaConfig {
                n_layers: 2,
                d_model: 4,
                n_heads: 2,
            },
        )?;
        let e = Tensor::randn(&mut rng, &[1, 5, 4], 1.0);
        let s = Tensor::randn(&mut rng, &[1, 5, 4], 1.0);
        let err = finite_diff_check_norm(
            &move |g, s| {
                let y = cmca.forward(g, s, &e)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &s,
            1e-5,
        )?;
        push("cmca", err);
    }
    // mask net
    {
        let net = MaskNet::init(&mut rng, 4, 2, MaskActivation::Relu);
        let x = Tensor::randn(&mut rng, &[1, 6, 4], 1.0);
        let err = finite_diff_check_norm(
            &move |g, x| {
                let m = net.forward(g, x)?;
                g.sum_all(&g.mul(&m, &m)?)
            },
            &x,
            1e-5,
        )?;
        push("mask_net", err);
    }
    // time alignment and loss
    {
        let x = Tensor::randn(&mut rng, &[1, 4, 3], 1.0);
        let err = finite_diff_check_norm(
            &|g, x| {
                let y = g.time_interp(x, 9)?;
                g.sum_all(&g.mul(&y, &y)?)
            },
            &x,
            1e-5,
        )?;
        push("time_interp", err);
        let r = Tensor::randn(&mut rng, &[2, 24], 1.0);
        let e0 = {
            let g = Graph::inference();
            g.add(&r, &Tensor::randn(&mut rng, &[2, 24], 0.4))?
        };
        let rc = r.clone();
        let err = finite_diff_check_norm(&move |g, e| neg_si_sdr_loss(g, e, &rc), &e0, 1e-5)?;
        push("neg_si_sdr_loss", err);
    }
    Ok(out)
}

/// Whole-model check on the toy configuration: every parameter of every
/// module, against central finite differences of the extraction loss.
pub fn run_full_model_check(cfg: &ModelConfig) -> Result<CheckResult> {
    let model = Extractor::init(cfg)?;
    // a deterministic synthetic sample, truncated to the pinned 512-sample
    // probe length (the generator's minimum duration is longer than that)
    let spec = synth::CorpusSpec {
        n_samples: 1,
        duration_s: 0.5,
        sample_rate: cfg.sample_rate,
        n_channels: cfg.eeg_channels,
        eeg_snr_db: 30.0,
        mix_snr_db: (0.0, 0.0),
        master_seed: 7,
    };
    let sample = synth::make_sample(&spec, 0)?;
    let t = 512.min(sample.mixture.len());
    let t_eeg = ((t as f64 / cfg.sample_rate as f64) * synth::EEG_RATE as f64).round() as usize;
    let full_t_eeg = sample.eeg.len() / cfg.eeg_channels;
    let mix = Tensor::from_vec(vec![1, t], sample.mixture[..t].to_vec());
    let att = Tensor::from_vec(vec![1, t], sample.attended[..t].to_vec());
    let mut eeg_data = Vec::with_capacity(cfg.eeg_channels * t_eeg);
    for c in 0..cfg.eeg_channels {
        eeg_data.extend_from_slice(&sample.eeg[c * full_t_eeg..c * full_t_eeg + t_eeg]);
    }
    let eeg = Tensor::from_vec(vec![1, cfg.eeg_channels, t_eeg], eeg_data);

    // analytic gradients for every parameter
    let mut train_model = model.clone();
    let g = Graph::new();
    attach_params(&mut train_model, &g);
    let mut drng = rng_labeled(cfg.seed, "dropout", &[]);
    let est = train_model.forward(&g, &mix, &eeg, Mode::Eval, &mut drng)?;
    let loss = neg_si_sdr_loss(&g, &est, &att)?;
    let grads = g.backward(&loss)?;
    let analytic = collect_grads(&mut train_model, &grads)?;
    let params = collect_params(&mut train_model);

    struct SetPath<'a> {
        path: &'a str,
        value: &'a Tensor,
    }
    impl ParamVisitor for SetPath<'_> {
        fn visit(&mut self, p: &str, t: &mut Tensor) {
            if p == self.path {
                *t = self.value.detach();
            }
        }
    }
    let eval_loss = |path: &str, value: &Tensor| -> Result<f64> {
        let mut m = model.clone();
        m.visit_params("", &mut SetPath { path, value });
        let g = Graph::inference();
        let mut drng = rng_labeled(cfg.seed, "dropout", &[]);
        let est = m.forward(&g, &mix, &eeg, Mode::Eval, &mut drng)?;
        Ok(neg_si_sdr_loss(&g, &est, &att)?.item())
    };

    // Every coordinate of every parameter is probed; the error is
    // normalized by the infinity norm of the whole gradient vector.
    // Parameters whose true gradient is identically zero (the attention
    // key biases, by softmax shift invariance) produce nothing but
    // round-off noise in the numerator and cannot be judged against
    // themselves.
    let h = 1e-5;
    let mut an_all = Vec::new();
    let mut nu_all = Vec::new();
    for ((path, p), (_, a)) in params.iter().zip(&analytic) {
        for i in 0..p.len() {
            let mut d = p.data().to_vec();
            d[i] += h;
            let fp = eval_loss(path, &Tensor::from_vec(p.shape().to_vec(), d.clone()))?;
            d[i] -= 2.0 * h;
            let fm = eval_loss(path, &Tensor::from_vec(p.shape().to_vec(), d))?;
            nu_all.push((fp - fm) / (2.0 * h));
            an_all.push(a.data()[i]);
        }
    }
    Ok(CheckResult {
        name: format!("full_model({} params)", an_all.len()),
        rel_err: rel_error_inf(&an_all, &nu_all),
        tol: FULL_MODEL_TOL,
    })
}

/// Layer checks plus the whole-model sweep.
pub fn run_all(cfg: &ModelConfig) -> Result<Vec<CheckResult>> {
    let mut results = run_layer_checks()?;
    results.push(run_full_model_check(cfg)?);
    Ok(results)
}
