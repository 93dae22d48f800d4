//! The channel-adaptive encoder: a channel-independent convolutional
//! front-end, adaptive average pooling over (channel, time), a convolutional
//! positional encoder, and a transformer stack, plus the projection and
//! classification heads, parameter accounting, checkpointing, and the Adam
//! optimizer.
//!
//! The encoder accepts any channel count C in 1..=12 and always emits a
//! fixed (B, L, D) token matrix; the zero-padding baseline is a data-level
//! transform ([`zero_pad_batch`]) feeding the very same network.

mod backbone;
mod optim;
mod params;

pub use backbone::{
    backbone_forward, classify, count_parameters, feature_encoder_forward, gradient_check,
    project, zero_pad_batch, zero_pad_window, CheckLoss, GradCheckReport, ParamCount, BN_MOMENTUM,
};
pub use optim::{AdamConfig, AdamState};
pub use params::{init_params, load_checkpoint, save_checkpoint, ParamEntry, ParameterStore};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Hyperparameters of the encoder and its heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Preset tag, "full" or "tiny" (informational; fields carry the truth).
    pub preset: String,
    /// Convolutional feature channels F.
    pub conv_channels: usize,
    /// Token count L produced by the adaptive pooling.
    pub dap_out_len: usize,
    /// Transformer embedding width D.
    pub embed_dim: usize,
    /// Feed-forward inner width.
    pub ffn_dim: usize,
    /// Number of transformer blocks.
    pub n_blocks: usize,
    /// Attention heads per block.
    pub n_heads: usize,
    /// Dropout probability used throughout.
    pub dropout: f64,
    /// Positional convolution kernel width (even; padding is kernel/2).
    pub pos_conv_kernel: usize,
    /// Positional convolution group count.
    pub pos_conv_groups: usize,
    /// Epsilon for all normalization layers.
    pub norm_eps: f64,
    /// Nominal input length T the architecture is sized for.
    pub nominal_t: usize,
    /// Contrastive projection output width.
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// The full-scale configuration (90M-parameter encoder).
    pub fn full() -> Self {
        Self {
            preset: "full".to_string(),
            conv_channels: 256,
            dap_out_len: 156,
            embed_dim: 768,
            ffn_dim: 3072,
            n_blocks: 12,
            n_heads: 12,
            dropout: 0.1,
            pos_conv_kernel: 128,
            pos_conv_groups: 16,
            norm_eps: 1e-5,
            nominal_t: 2500,
            proj_dim: 256,
        }
    }

    /// A functionally identical miniature for fast tests and desk-scale
    /// experiments.
    pub fn tiny() -> Self {
        Self {
            preset: "tiny".to_string(),
            conv_channels: 16,
            dap_out_len: 12,
            embed_dim: 64,
            ffn_dim: 256,
            n_blocks: 2,
            n_heads: 4,
            dropout: 0.1,
            pos_conv_kernel: 8,
            pos_conv_groups: 16,
            norm_eps: 1e-5,
            nominal_t: 192,
            proj_dim: 32,
        }
    }

    /// Time length after the four stride-2 convolution stages.
    pub fn conv_out_len(&self, t: usize) -> usize {
        t / 2 / 2 / 2 / 2
    }

    /// Padding of the positional convolution (half the even kernel).
    pub fn pos_conv_pad(&self) -> usize {
        self.pos_conv_kernel / 2
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("conv_channels", self.conv_channels),
            ("dap_out_len", self.dap_out_len),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("n_blocks", self.n_blocks),
            ("n_heads", self.n_heads),
            ("pos_conv_kernel", self.pos_conv_kernel),
            ("pos_conv_groups", self.pos_conv_groups),
            ("nominal_t", self.nominal_t),
            ("proj_dim", self.proj_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(CoreError::validation(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(CoreError::validation(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.embed_dim % self.pos_conv_groups != 0 {
            return Err(CoreError::validation(format!(
                "embed_dim {} not divisible by pos_conv_groups {}",
                self.embed_dim, self.pos_conv_groups
            )));
        }
        if self.pos_conv_kernel % 2 != 0 {
            return Err(CoreError::validation(
                "pos_conv_kernel must be even (padding produces exactly one surplus step)"
                    .to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::validation(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return Err(CoreError::validation("norm_eps must be positive".to_string()));
        }
        let l = self.conv_out_len(self.nominal_t);
        if l != self.dap_out_len {
            return Err(CoreError::validation(format!(
                "dap_out_len {} does not match the conv output length {} for nominal_t {}",
                self.dap_out_len, l, self.nominal_t
            )));
        }
        Ok(())
    }
}
