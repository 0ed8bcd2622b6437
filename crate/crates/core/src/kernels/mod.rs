//! Numerical primitives of RWKV time mixing.
//!
//! Every forward operation is a pure function of its inputs. Vectors are row
//! vectors: a projection is `x · W` with `W` of shape `D_in × D_out`, and the
//! WKV key/value outer product is `kᵀ · v`.
//!
//! The WKV operators come in two evaluation forms that must agree: a
//! constant-state recurrent step ([`wkv_di_step`], [`wkv_dd_step`]) and a
//! chunked sequence form ([`wkv_di_parallel`], [`wkv_dd_parallel`]). Both
//! use the distance-based decay product `∏_{j=i+1}^{t-1} w_j`, which admits
//! the recurrence `S_t = diag(w_t)·S_{t-1} + k_tᵀ·v_t`.

mod backward;
mod decay;
mod shift;
mod wkv;

pub use backward::{kernel_backward, kernel_forward, KernelOp, TensorMap};
pub use decay::{decay_transform, decay_transform_scalar, dynamic_decay};
pub use shift::{ddlerp, lora_eval, token_shift, token_shift_dd, token_shift_di};
pub use wkv::{
    wkv_dd_parallel, wkv_dd_step, wkv_di_parallel, wkv_di_step, wkv_sequence,
    wkv_sequence_backward, wkv_step_inplace, WkvSeqGrads, WkvSeqTrace, WKV_CHUNK,
};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::dim_err;
use crate::{Real, Result};

/// Low-rank gate `λ + tanh(x·A)·B`.
#[derive(Debug, Clone, Copy)]
pub struct LoraParams<'a, T> {
    pub lambda: ArrayView1<'a, T>,
    /// `D × r`
    pub a: ArrayView2<'a, T>,
    /// `r × D`
    pub b: ArrayView2<'a, T>,
}

impl<T: Real> LoraParams<'_, T> {
    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub(crate) fn check(&self, op: &'static str) -> Result<()> {
        let d = self.dim();
        let r = self.rank();
        if r == 0 || r > d {
            return Err(dim_err(op, format!("lora rank {r} must be in 1..={d}")));
        }
        if self.a.nrows() != d || self.b.dim() != (r, d) {
            return Err(dim_err(
                op,
                format!(
                    "lora A {:?} / B {:?} do not match λ of length {d}",
                    self.a.dim(),
                    self.b.dim()
                ),
            ));
        }
        Ok(())
    }
}

/// How a token-shift branch mixes the current and previous inputs.
#[derive(Debug, Clone, Copy)]
pub enum ShiftMix<'a, T> {
    /// Data-independent ratio `μ`.
    Static { mu: ArrayView1<'a, T> },
    /// Data-dependent interpolation: `ddlerp` with inner ratio `μ_x`.
    Dynamic {
        mu_x: ArrayView1<'a, T>,
        lora: LoraParams<'a, T>,
    },
}

/// One token-shift branch followed by its projection `W` (`D × D_out`).
#[derive(Debug, Clone, Copy)]
pub struct ShiftParams<'a, T> {
    pub mix: ShiftMix<'a, T>,
    pub w: ArrayView2<'a, T>,
}

/// Per-head bonus `u` and untransformed decay `w_raw`.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams<'a, T> {
    pub u: ArrayView1<'a, T>,
    pub w_raw: ArrayView1<'a, T>,
}

/// Outer-product accumulator of one WKV head (`head_dim × head_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct WkvState<T> {
    pub s: Array2<T>,
}

impl<T: Real> WkvState<T> {
    pub fn zeros(head_dim: usize) -> Self {
        Self {
            s: Array2::zeros((head_dim, head_dim)),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.s.nrows()
    }

    /// Number of scalars held by the state.
    pub fn numel(&self) -> usize {
        self.s.len()
    }

    pub fn bytes(&self) -> usize {
        self.numel() * std::mem::size_of::<T>()
    }
}

/// `x · W` for a row vector `x` and a row-major matrix `W`.
pub fn vec_mat<T: Real>(x: ArrayView1<'_, T>, w: ArrayView2<'_, T>) -> Array1<T> {
    let mut out = Array1::zeros(w.ncols());
    for (xi, row) in x.iter().zip(w.rows()) {
        if *xi != T::zero() {
            out.scaled_add(*xi, &row);
        }
    }
    out
}

pub(crate) fn check_len<T>(
    op: &'static str,
    what: &str,
    v: &ArrayView1<'_, T>,
    len: usize,
) -> Result<()> {
    if v.len() != len {
        return Err(dim_err(
            op,
            format!("{what} has length {}, expected {len}", v.len()),
        ));
    }
    Ok(())
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}
