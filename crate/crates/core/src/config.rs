//! Model and training configuration. Two named profiles exist everywhere:
//! `compact` fits a single CPU for tests and demos, `full` is the
//! publication-scale layout.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::Result;

/// Architecture hyperparameters shared by the restorer, the prior encoders,
/// and the diffusion samplers. `channels[0]` must be divisible by 4 at every
/// level and the per-level attention width `channels[l] / 4` divisible by
/// `heads[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Base width of the illumination prior; the reflectance prior is 3x.
    pub c_prime: usize,
    pub channels: [usize; 4],
    pub blocks: [usize; 4],
    pub heads: [usize; 4],
    /// Scale attention logits by 1/sqrt(full attention width) instead of the
    /// per-head default 1/sqrt(head width).
    #[serde(default)]
    pub full_width_attn_scale: bool,
    /// Spatial downscale factor applied before the prior encoder stems.
    pub prior_unshuffle: usize,
    /// Stem width multiplier of the prior encoders, relative to the encoded
    /// vector length.
    pub prior_stem_mult: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub time_embed_dim: usize,
    /// Denoiser hidden width as a multiple of the latent length.
    pub denoiser_hidden_mult: usize,
    /// Inject fresh noise on the final reverse step during training-time
    /// sampling. Inference always runs the deterministic variant.
    pub train_inject_final_noise: bool,
    /// Ablation switches; all true in the full model.
    pub use_rg_mca: bool,
    pub use_dfa: bool,
    pub use_aux_decoder: bool,
    pub use_diffusion: bool,
}

impl ModelConfig {
    pub fn compact() -> Self {
        ModelConfig {
            c_prime: 16,
            channels: [16, 32, 64, 128],
            blocks: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            full_width_attn_scale: false,
            prior_unshuffle: 8,
            prior_stem_mult: 2,
            diffusion_steps: 4,
            beta_start: 0.1,
            beta_end: 0.99,
            time_embed_dim: 32,
            denoiser_hidden_mult: 4,
            train_inject_final_noise: true,
            use_rg_mca: true,
            use_dfa: true,
            use_aux_decoder: true,
            use_diffusion: true,
        }
    }

    pub fn full() -> Self {
        ModelConfig {
            c_prime: 64,
            channels: [64, 128, 256, 512],
            blocks: [3, 3, 3, 3],
            heads: [1, 2, 4, 8],
            ..Self::compact()
        }
    }

    /// Attention width at a level: a quarter of the feature channels, the
    /// same width the key/value branch carries.
    pub fn attn_dim(&self, level: usize) -> usize {
        self.channels[level] / 4
    }

    pub fn head_dim(&self, level: usize) -> usize {
        self.attn_dim(level) / self.heads[level]
    }

    pub fn attn_scale(&self, level: usize) -> f64 {
        if self.full_width_attn_scale {
            1.0 / (self.channels[level] as f64).sqrt()
        } else {
            1.0 / (self.head_dim(level) as f64).sqrt()
        }
    }

    pub fn refl_prior_len(&self) -> usize {
        3 * self.c_prime
    }

    pub fn illum_prior_len(&self) -> usize {
        self.c_prime
    }

    pub fn validate(&self) -> Result<()> {
        for l in 0..4 {
            if self.channels[l] % 4 != 0 {
                return Err(Error::Config(format!(
                    "channels[{l}]={} must be divisible by 4",
                    self.channels[l]
                )));
            }
            if self.attn_dim(l) % self.heads[l] != 0 {
                return Err(Error::Config(format!(
                    "attention width {} at level {l} not divisible by {} heads",
                    self.attn_dim(l),
                    self.heads[l]
                )));
            }
            if self.blocks[l] == 0 {
                return Err(Error::Config(format!("blocks[{l}] must be at least 1")));
            }
        }
        if self.c_prime == 0 {
            return Err(Error::Config("c_prime must be positive".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::Config("diffusion_steps must be at least 1".into()));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range ({}, {}) must satisfy 0 < start <= end < 1",
                self.beta_start, self.beta_end
            )));
        }
        if self.prior_unshuffle == 0 || self.prior_stem_mult == 0 {
            return Err(Error::Config("prior encoder factors must be positive".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be positive and even".into()));
        }
        Ok(())
    }
}

/// One training phase. Phase 1 fits the restorer against ground-truth priors;
/// phase 2 fits the prior samplers (and, when `joint`, keeps refining the
/// rest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub phase: u8,
    pub iterations: usize,
    pub batch: usize,
    pub patch: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Loss weights: reconstruction-phase retinex weight, then the phase-2
    /// reconstruction and retinex weights next to the diffusion term.
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub augment: bool,
    pub seed: u64,
    /// Phase 2 only: keep restorer and encoder weights trainable alongside
    /// the samplers.
    pub joint: bool,
    /// Backpropagate through every step of the unrolled sampler. When false,
    /// only the final step carries gradient.
    pub full_unroll: bool,
    pub log_every: usize,
    pub eval_every: usize,
    /// Stop once train PSNR (phase 1) or prior cosine similarity (phase 2)
    /// clears the threshold. When the SSIM bar is also set, phase 1 stops
    /// only once PSNR and SSIM clear together.
    pub early_stop_psnr: Option<f64>,
    #[serde(default)]
    pub early_stop_ssim: Option<f64>,
    pub early_stop_cosine: Option<f64>,
}

impl TrainConfig {
    pub fn compact(phase: u8) -> Self {
        TrainConfig {
            model: ModelConfig::compact(),
            phase,
            iterations: 2000,
            batch: 4,
            patch: 64,
            lr_start: 1e-3,
            lr_end: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            augment: true,
            seed: 0,
            joint: true,
            full_unroll: true,
            log_every: 25,
            eval_every: 50,
            early_stop_psnr: None,
            early_stop_ssim: None,
            early_stop_cosine: None,
        }
    }

    pub fn full(phase: u8) -> Self {
        TrainConfig {
            model: ModelConfig::full(),
            iterations: 300_000,
            batch: 8,
            patch: 128,
            lr_start: 2e-4,
            ..Self::compact(phase)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.phase == 1 || self.phase == 2) {
            return Err(Error::Config(format!("phase must be 1 or 2, got {}", self.phase)));
        }
        if self.batch == 0 || self.iterations == 0 {
            return Err(Error::Config("batch and iterations must be positive".into()));
        }
        if self.patch % 8 != 0 || self.patch == 0 {
            return Err(Error::Config(format!(
                "patch {} must be a positive multiple of 8",
                self.patch
            )));
        }
        if self.lr_start <= 0.0 || self.lr_end <= 0.0 || self.lr_end > self.lr_start {
            return Err(Error::Config(format!(
                "learning rate range ({}, {}) must be positive and non-increasing",
                self.lr_start, self.lr_end
            )));
        }
        if self.log_every == 0 || self.eval_every == 0 {
            return Err(Error::Config("log_every and eval_every must be positive".into()));
        }
        if let Some(s) = self.early_stop_ssim {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::Config(format!("early_stop_ssim {s} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    /// Stable digest of the whole config; checkpoints record it so resuming
    /// with different settings is caught early.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let d = h.finalize();
        let mut out = String::with_capacity(64);
        for b in d {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}
