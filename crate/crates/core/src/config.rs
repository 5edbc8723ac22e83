//! Architecture hyperparameters and MoE layer placement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Encoder => "encoder",
            Side::Decoder => "decoder",
        }
    }

    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "encoder" => Some(Side::Encoder),
            "decoder" => Some(Side::Decoder),
            _ => None,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Transformer block `l` (1-indexed) uses an MoE FFN iff `l % moe_frequency == 0`.
    pub moe_frequency: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub beam_size: usize,
    pub label_smoothing: f64,
    pub lb_loss_coeff: f64,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
}

fn default_max_positions() -> usize {
    64
}

/// One MoE layer of the model. `id` numbers MoE layers across the whole
/// model, encoder layers first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoeLayerInfo {
    pub id: usize,
    pub side: Side,
    /// 0-based transformer block index within its side.
    pub block: usize,
}

impl ModelConfig {
    /// Desk-scale configuration trained in the test suite and the pipeline.
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            d_ffn: 128,
            n_heads: 2,
            enc_layers: 4,
            dec_layers: 4,
            moe_frequency: 2,
            num_experts: 8,
            top_k: 2,
            beam_size: 4,
            label_smoothing: 0.1,
            lb_loss_coeff: 0.01,
            max_positions: 64,
        }
    }

    /// The 54.5B-parameter NLLB-200 MoE architecture. Only used for layer
    /// bookkeeping and budget arithmetic; never instantiated.
    pub fn nllb_moe() -> Self {
        Self {
            vocab_size: 256_206,
            d_model: 2048,
            d_ffn: 8192,
            n_heads: 16,
            enc_layers: 24,
            dec_layers: 24,
            moe_frequency: 4,
            num_experts: 128,
            top_k: 2,
            beam_size: 4,
            label_smoothing: 0.1,
            lb_loss_coeff: 0.01,
            max_positions: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.moe_frequency == 0 {
            return bad("moe_frequency must be at least 1");
        }
        if self.top_k != 2 {
            return bad("only top-2 gating is supported");
        }
        if self.num_experts < self.top_k {
            return bad("num_experts must be at least top_k");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ffn == 0 {
            return bad("vocab_size, d_model and d_ffn must be positive");
        }
        if self.beam_size == 0 {
            return bad("beam_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must be in [0, 1)");
        }
        if self.lb_loss_coeff < 0.0 {
            return bad("lb_loss_coeff must be nonnegative");
        }
        Ok(())
    }

    pub fn is_moe_block(&self, block: usize) -> bool {
        (block + 1).is_multiple_of(self.moe_frequency)
    }

    pub fn moe_layers(&self) -> Vec<MoeLayerInfo> {
        let mut out = Vec::new();
        for (side, n) in [(Side::Encoder, self.enc_layers), (Side::Decoder, self.dec_layers)] {
            for block in 0..n {
                if self.is_moe_block(block) {
                    out.push(MoeLayerInfo {
                        id: out.len(),
                        side,
                        block,
                    });
                }
            }
        }
        out
    }

    pub fn num_moe_layers(&self) -> usize {
        self.moe_layers().len()
    }

    pub fn moe_layers_on(&self, side: Side) -> Vec<MoeLayerInfo> {
        self.moe_layers().into_iter().filter(|l| l.side == side).collect()
    }

    pub fn total_experts(&self) -> usize {
        self.num_moe_layers() * self.num_experts
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
