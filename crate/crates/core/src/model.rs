//! The full extraction model and its centralized configuration.

use crate::eeg::{EegEncoder, EegEncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{apply_and_decode, Cmca, CmcaConfig, MaskActivation, MaskNet};
use crate::nn::{join_path, Module, ParamVisitor};
use crate::rng::rng_labeled;
use crate::speech::{SpeechEncoder, SpeechEncoderConfig};
use crate::tensor::{Graph, Mode, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Encoder variants; the reduced forms exist for ablation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeechEncoderKind {
    Bimamba,
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EegEncoderKind {
    Eegkan,
    Linear,
}

/// Every dimension and hyperparameter left open by the architecture,
/// centralized. Serialized into checkpoints; unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    // speech path
    pub sample_rate: usize,
    pub frame_len: usize,
    pub frame_stride: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub chunk_len: usize,
    pub chunk_hop: usize,
    pub n_repeats: usize,
    pub speech_encoder: SpeechEncoderKind,
    // eeg path
    pub eeg_channels: usize,
    pub eeg_heads: usize,
    pub eeg_kan_layers: usize,
    pub eeg_layers: usize,
    pub dropout_p: f64,
    pub kan_grid: usize,
    pub kan_order: usize,
    pub kan_range: f64,
    pub eeg_encoder: EegEncoderKind,
    // fusion and mask
    pub cmca_layers: usize,
    pub cmca_heads: usize,
    pub mask_blocks: usize,
    pub mask_activation: MaskActivation,
    // training
    pub lr_max: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub max_steps: Option<usize>,
    pub eval_every: Option<usize>,
    /// Stop once the train-set SI-SDR improvement over the mixture
    /// baseline reaches this many dB.
    pub early_stop_margin_db: Option<f64>,
    /// Stop once the validation attended-vs-unattended selection rate
    /// reaches this fraction.
    pub early_stop_selection_rate: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sample_rate: 8000,
            frame_len: 16,
            frame_stride: 8,
            d_model: 64,
            d_state: 16,
            chunk_len: 50,
            chunk_hop: 25,
            n_repeats: 4,
            speech_encoder: SpeechEncoderKind::Bimamba,
            eeg_channels: 16,
            eeg_heads: 2,
            eeg_kan_layers: 3,
            eeg_layers: 1,
            dropout_p: 0.5,
            kan_grid: 5,
            kan_order: 3,
            kan_range: 3.0,
            eeg_encoder: EegEncoderKind::Eegkan,
            cmca_layers: 3,
            cmca_heads: 2,
            mask_blocks: 4,
            mask_activation: MaskActivation::Relu,
            lr_max: 2e-4,
            warmup_fraction: 0.05,
            epochs: 300,
            batch_size: 8,
            grad_clip: 5.0,
            seed: 0,
            max_steps: None,
            eval_every: None,
            early_stop_margin_db: None,
            early_stop_selection_rate: None,
        }
    }
}

impl ModelConfig {
    pub fn speech_cfg(&self) -> SpeechEncoderConfig {
        SpeechEncoderConfig {
            sample_rate: self.sample_rate,
            frame_len: self.frame_len,
            frame_stride: self.frame_stride,
            d_model: self.d_model,
            chunk_len: self.chunk_len,
            chunk_hop: self.chunk_hop,
            n_repeats: self.n_repeats,
            d_state: self.d_state,
        }
    }

    pub fn eeg_cfg(&self) -> EegEncoderConfig {
        EegEncoderConfig {
            n_channels: self.eeg_channels,
            eeg_rate: crate::synth::EEG_RATE,
            d_model: self.d_model,
            n_heads: self.eeg_heads,
            n_kan_layers: self.eeg_kan_layers,
            dropout_p: self.dropout_p,
            n_layers: self.eeg_layers,
            kan_grid: self.kan_grid,
            kan_order: self.kan_order,
            kan_range: self.kan_range,
        }
    }

    pub fn cmca_cfg(&self) -> CmcaConfig {
        CmcaConfig {
            n_layers: self.cmca_layers,
            d_model: self.d_model,
            n_heads: self.cmca_heads,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("bad model config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Speech encoder, EEG encoder, cross-modal fusion, mask estimation, and
/// waveform decoding, end to end.
#[derive(Clone)]
pub struct Extractor {
    pub cfg: ModelConfig,
    pub speech: SpeechEncoder,
    pub eeg: EegEncoder,
    pub cmca: Cmca,
    pub mask: MaskNet,
    pub decoder_w: Tensor,
}

impl Extractor {
    /// Deterministic initialization from the config seed.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        let mut rng = rng_labeled(cfg.seed, "init", &[]);
        let mut speech = SpeechEncoder::init(&mut rng, &cfg.speech_cfg())?;
        if cfg.speech_encoder == SpeechEncoderKind::Conv {
            speech.repeats.clear();
        }
        let mut eeg = EegEncoder::init(&mut rng, &cfg.eeg_cfg())?;
        if cfg.eeg_encoder == EegEncoderKind::Linear {
            eeg.layers.clear();
        }
        let cmca = Cmca::init(&mut rng, &cfg.cmca_cfg())?;
        let mask = MaskNet::init(&mut rng, cfg.d_model, cfg.mask_blocks, cfg.mask_activation);
        let decoder_w = Tensor::randn(
            &mut rng,
            &[cfg.d_model, 1, cfg.frame_len],
            (1.0 / cfg.d_model as f64).sqrt(),
        );
        Ok(Extractor {
            cfg: cfg.clone(),
            speech,
            eeg,
            cmca,
            mask,
            decoder_w,
        })
    }

    /// mixture: [B, T_samples], eeg: [B, C, T_eeg] -> extracted waveform
    /// [B, T_samples].
    pub fn forward(
        &self,
        g: &Graph,
        mixture: &Tensor,
        eeg: &Tensor,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let t_samples = mixture.shape()[1];
        let semb = self.speech.forward(g, mixture)?;
        let eemb = self.eeg.forward(g, eeg, mode, rng)?;
        let aligned = g.time_interp(&eemb, semb.shape()[1])?;
        let fused = self.cmca.forward(g, &semb, &aligned)?;
        let mask = self.mask.forward(g, &fused)?;
        apply_and_decode(
            g,
            &semb,
            &mask,
            &self.decoder_w,
            self.cfg.frame_stride,
            t_samples,
        )
    }
}

impl Module for Extractor {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.speech.visit_params(&join_path(prefix, "speech"), v);
        self.eeg.visit_params(&join_path(prefix, "eeg"), v);
        self.cmca.visit_params(&join_path(prefix, "cmca"), v);
        self.mask.visit_params(&join_path(prefix, "mask"), v);
        v.visit(&join_path(prefix, "decoder_w"), &mut self.decoder_w);
    }
}
