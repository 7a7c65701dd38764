//! Exact multiply-accumulate counts of a forward pass, derived from shapes.
//!
//! Counted: matrix products, pairwise token distances used for pruning, and
//! the four taps of every bilinear output sample. Normalization, softmax and
//! activations are not counted. The instrumented kernels in `tensor` and
//! `dpc` use the same rules, so a measured count must equal these figures.

use serde::{Deserialize, Serialize};

use crate::attention::MLP_RATIO;
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub backbone: u64,
    pub low_res: u64,
    pub high_res: u64,
    pub fusion: u64,
    pub decode: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.backbone + self.low_res + self.high_res + self.fusion + self.decode
    }
}

/// One pre-norm transformer block over `n` tokens of width `c`.
pub fn block_macs(n: u64, c: u64) -> u64 {
    let mlp = MLP_RATIO as u64;
    4 * n * c * c + 2 * n * n * c + 2 * mlp * n * c * c
}

/// Attention with `m` queries over `l` context tokens.
pub fn attention_macs(m: u64, l: u64, c: u64) -> u64 {
    2 * m * c * c + 2 * l * c * c + 2 * m * l * c
}

/// Pairwise distances for scoring `n` tokens; ratio 1 skips scoring.
pub fn pruning_macs(n: u64, c: u64, epsilon: usize) -> u64 {
    if epsilon == 1 {
        0
    } else {
        n * n.saturating_sub(1) / 2 * c
    }
}

pub fn forward_macs(cfg: &ModelConfig, variant: Variant) -> MacBreakdown {
    let c = cfg.embed_dim as u64;
    let blocks = cfg.blocks as u64;
    let t = cfg.tokens_per_frame() as u64;
    let g = cfg.hr_tokens() as u64;
    let ledger = cfg.token_ledger();

    let backbone = 3 * (t * cfg.patch_dim() as u64 * c + blocks * block_macs(t, c));

    let temporal = 3 * t;
    let kept_c = ledger.temporal_kept as u64;
    let low_res = block_macs(temporal, c)
        + pruning_macs(temporal, c, cfg.lr.epsilon)
        + blocks * block_macs(kept_c, c);

    let upsample = 4 * g * c;
    let mlp = MLP_RATIO as u64;
    let decode = 2 * mlp * g * c * c + g * c * cfg.joints as u64;

    let (high_res, fusion) = match variant {
        Variant::LowResOnly => (upsample, 0),
        Variant::MultiGrained => {
            let kept_f = ledger.high_res_kept as u64;
            let hr = upsample + pruning_macs(g, c, cfg.hr.epsilon) + blocks * block_macs(kept_f, c);
            (hr, attention_macs(kept_f, kept_c, c))
        }
    };
    MacBreakdown {
        backbone,
        low_res,
        high_res,
        fusion,
        decode,
    }
}
