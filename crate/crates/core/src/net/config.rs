use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    pub d_ff: usize,
    pub max_slots: usize,
    pub hist_len: usize,
    pub pred_len: usize,
    /// Inverted dropout on every sublayer output during training.
    pub dropout: f64,
    /// Queries and keys of cross-attention come from the encoder memory and
    /// values from the decoder stream. Requires equal encoder and decoder
    /// lengths.
    pub paper_cross_wiring: bool,
    /// Extra projection from encoder memory back to frame tokens, used by
    /// the auxiliary masked-frame reconstruction loss.
    pub aux_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// Small CPU-trainable configuration.
    pub fn desk() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_enc: 2,
            n_dec: 2,
            d_ff: 128,
            max_slots: 10,
            hist_len: 20,
            pred_len: 10,
            dropout: 0.0,
            paper_cross_wiring: false,
            aux_head: false,
        }
    }

    /// Full-size 6+6 layer configuration with `d_model = 1024`.
    pub fn paper() -> Self {
        ModelConfig {
            d_model: 1024,
            n_heads: 8,
            n_enc: 6,
            n_dec: 6,
            d_ff: 2048,
            ..ModelConfig::desk()
        }
    }

    pub fn token_dim(&self) -> usize {
        4 * self.max_slots
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::config("model.d_model", "must be >= 1"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "model.n_heads",
                "must be >= 1 and divide d_model",
            ));
        }
        if self.d_ff == 0 {
            return Err(Error::config("model.d_ff", "must be >= 1"));
        }
        if self.max_slots == 0 {
            return Err(Error::config("model.max_slots", "must be >= 1"));
        }
        if self.hist_len == 0 || self.pred_len == 0 {
            return Err(Error::config("model.hist_len", "sequence lengths must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub(crate) fn attn_size(&self) -> usize {
        4 * (self.d_model * self.d_model + self.d_model)
    }

    pub(crate) fn ffn_size(&self) -> usize {
        2 * self.d_model * self.d_ff + self.d_ff + self.d_model
    }

    pub fn enc_layer_size(&self) -> usize {
        self.attn_size() + self.ffn_size() + 2 * 2 * self.d_model
    }

    pub fn dec_layer_size(&self) -> usize {
        2 * self.attn_size() + self.ffn_size() + 3 * 2 * self.d_model
    }
}

/// Number of learnable scalars. Positional encodings are fixed and count
/// zero.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let t = cfg.token_dim();
    let embed = t * d + d;
    let mask = d;
    let out = d * t + t;
    let aux = if cfg.aux_head { d * t + t } else { 0 };
    embed + mask + cfg.n_enc * cfg.enc_layer_size() + cfg.n_dec * cfg.dec_layer_size() + out + aux
}
