//! Residual RWKV blocks: time mixing, channel mixing, per-head normalization.
//!
//! Parameters live in a [`ParamStore`](crate::params::ParamStore); the
//! structs here only record which entries belong to which symbol. Two
//! evaluation paths share those ids: a one-token recurrent step over a
//! [`BlockState`] and a taped sequence form used for training.

mod init;
mod seq;
mod step;

pub use init::{
    BlockDims, BlockParams, BranchIds, ChannelMixParams, DecayIds, LoraIds, MixIds, TimeMixParams,
};
pub use seq::{block_seq, channel_mix_seq, time_mix_seq, ParamVars};
pub use step::{
    block_forward, block_step, channel_mix_forward, channel_mix_step, head_norm, layer_norm,
    time_mix_forward, time_mix_step,
};

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::kernels::WkvState;
use crate::Real;

/// Recurrence flavour of the time-mixing sub-block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Static shift ratios and per-channel decay.
    Di,
    /// Input-conditioned shift ratios and decay.
    Dd,
}

/// Per-block carry-over for recurrent inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState<T> {
    /// Last (normalized) input seen by time mixing.
    pub tm_shift: Array1<T>,
    /// Last (normalized) input seen by channel mixing.
    pub cm_shift: Array1<T>,
    pub wkv: Vec<WkvState<T>>,
}

impl<T: Real> BlockState<T> {
    pub fn zeros(d_model: usize, n_heads: usize, head_dim: usize) -> Self {
        Self {
            tm_shift: Array1::zeros(d_model),
            cm_shift: Array1::zeros(d_model),
            wkv: (0..n_heads).map(|_| WkvState::zeros(head_dim)).collect(),
        }
    }

    /// `2·d_model + n_heads·head_dim²`
    pub fn numel(&self) -> usize {
        self.tm_shift.len()
            + self.cm_shift.len()
            + self.wkv.iter().map(WkvState::numel).sum::<usize>()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * std::mem::size_of::<T>()
    }
}
