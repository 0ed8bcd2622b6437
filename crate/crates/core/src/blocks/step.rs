use ndarray::{s, Array1, ArrayView1, Axis, Zip};

use super::{BlockParams, BlockState, ChannelMixParams, DecayIds, TimeMixParams, Variant};
use crate::autograd::group_norm;
use crate::error::dim_err;
use crate::kernels::{
    decay_transform, dynamic_decay, sigmoid, silu, token_shift, token_shift_di, vec_mat,
    wkv_dd_step, wkv_di_step, wkv_step_inplace, HeadParams,
};
use crate::params::ParamStore;
use crate::{Error, Real, Result};

fn grouped_norm<T: Real>(
    x: ArrayView1<'_, T>,
    gamma: ArrayView1<'_, T>,
    beta: ArrayView1<'_, T>,
    groups: usize,
) -> Result<Array1<T>> {
    let d = x.len();
    if groups == 0 || d % groups != 0 {
        return Err(dim_err(
            "norm",
            format!("{d} channels do not split into {groups} groups"),
        ));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(dim_err(
            "norm",
            format!("γ/β lengths {}/{} vs {d}", gamma.len(), beta.len()),
        ));
    }
    let (y, _, _) = group_norm(x.insert_axis(Axis(0)), gamma, beta, groups);
    Ok(y.row(0).to_owned())
}

/// Layer norm applied to each head slice independently (ε = 1e−5).
pub fn head_norm<T: Real>(
    x: ArrayView1<'_, T>,
    gamma: ArrayView1<'_, T>,
    beta: ArrayView1<'_, T>,
    n_heads: usize,
) -> Result<Array1<T>> {
    if n_heads > 0 && x.len() % n_heads == 0 && x.len() / n_heads < 2 {
        return Err(Error::DegenerateNorm(x.len() / n_heads));
    }
    grouped_norm(x, gamma, beta, n_heads)
}

/// Full-width layer norm (ε = 1e−5).
pub fn layer_norm<T: Real>(
    x: ArrayView1<'_, T>,
    gamma: ArrayView1<'_, T>,
    beta: ArrayView1<'_, T>,
) -> Result<Array1<T>> {
    grouped_norm(x, gamma, beta, 1)
}

struct Branches<T> {
    r: Array1<T>,
    k: Array1<T>,
    v: Array1<T>,
    g: Array1<T>,
    w: Array1<T>,
}

fn branches<T: Real>(
    x: ArrayView1<'_, T>,
    prev: ArrayView1<'_, T>,
    store: &ParamStore<T>,
    p: &TimeMixParams,
    variant: Variant,
) -> Result<Branches<T>> {
    if p.variant() != variant {
        return Err(Error::Config(format!(
            "time mix called as {variant:?} with {:?} parameters",
            p.variant()
        )));
    }
    let shift = |b: &super::BranchIds| token_shift(x, prev, &b.view(store));
    let w = match p.decay {
        DecayIds::Static { w_raw } => decay_transform(store.vec(w_raw)),
        DecayIds::Dynamic { mu_x, ddlerp, lora } => dynamic_decay(
            x,
            prev,
            store.vec(mu_x),
            &ddlerp.view(store),
            &lora.view(store),
        )?,
    };
    Ok(Branches {
        r: shift(&p.r)?,
        k: shift(&p.k)?,
        v: shift(&p.v)?,
        g: shift(&p.g)?,
        w,
    })
}

fn finish<T: Real>(
    y: Array1<T>,
    g: &Array1<T>,
    store: &ParamStore<T>,
    p: &TimeMixParams,
) -> Result<Array1<T>> {
    let normed = head_norm(
        y.view(),
        store.vec(p.ln_x_weight),
        store.vec(p.ln_x_bias),
        p.n_heads,
    )?;
    let gated = Zip::from(&normed).and(g).map_collect(|&n, &g| silu(g) * n);
    Ok(vec_mat(gated.view(), store.mat(p.w_o)))
}

fn check_state<T: Real>(
    x: &ArrayView1<'_, T>,
    state: &BlockState<T>,
    n_heads: usize,
) -> Result<()> {
    let d = x.len();
    let ok = state.tm_shift.len() == d
        && state.cm_shift.len() == d
        && state.wkv.len() == n_heads
        && state.wkv.iter().all(|s| s.head_dim() * n_heads == d);
    if ok {
        Ok(())
    } else {
        Err(Error::State(format!(
            "block state does not match d_model={d}, n_heads={n_heads}"
        )))
    }
}

/// One time-mixing step on an already normalized input. Returns the output
/// and the advanced state; the input state is left untouched.
pub fn time_mix_forward<T: Real>(
    x_t: ArrayView1<'_, T>,
    state: &BlockState<T>,
    store: &ParamStore<T>,
    p: &TimeMixParams,
    variant: Variant,
) -> Result<(Array1<T>, BlockState<T>)> {
    check_state(&x_t, state, p.n_heads)?;
    let b = branches(x_t, state.tm_shift.view(), store, p, variant)?;
    let d = x_t.len();
    let n = d / p.n_heads;
    let u = store.vec(p.u);
    let mut next = state.clone();
    let mut y = Array1::zeros(d);
    for h in 0..p.n_heads {
        let cols = s![h * n..(h + 1) * n];
        let (k, v) = (b.k.slice(cols), b.v.slice(cols));
        let (wkv, new_state) = match p.decay {
            DecayIds::Static { w_raw } => wkv_di_step(
                &state.wkv[h],
                k,
                v,
                &HeadParams {
                    u: u.slice(cols),
                    w_raw: store.vec(w_raw).slice(cols),
                },
            )?,
            DecayIds::Dynamic { .. } => {
                wkv_dd_step(&state.wkv[h], k, v, u.slice(cols), b.w.slice(cols))?
            }
        };
        y.slice_mut(cols)
            .assign(&vec_mat(b.r.slice(cols), wkv.view()));
        next.wkv[h] = new_state;
    }
    next.tm_shift = x_t.to_owned();
    Ok((finish(y, &b.g, store, p)?, next))
}

/// In-place counterpart of [`time_mix_forward`] for the inference hot path.
pub fn time_mix_step<T: Real>(
    x_t: ArrayView1<'_, T>,
    state: &mut BlockState<T>,
    store: &ParamStore<T>,
    p: &TimeMixParams,
    variant: Variant,
) -> Result<Array1<T>> {
    check_state(&x_t, state, p.n_heads)?;
    let b = branches(x_t, state.tm_shift.view(), store, p, variant)?;
    let d = x_t.len();
    let n = d / p.n_heads;
    let u = store.vec(p.u);
    let mut y = Array1::zeros(d);
    for (h, head) in state.wkv.iter_mut().enumerate() {
        let cols = s![h * n..(h + 1) * n];
        let out = wkv_step_inplace(
            head,
            b.r.slice(cols),
            b.k.slice(cols),
            b.v.slice(cols),
            u.slice(cols),
            b.w.slice(cols),
        );
        y.slice_mut(cols).assign(&out);
    }
    state.tm_shift.assign(&x_t);
    finish(y, &b.g, store, p)
}

/// `sigmoid(r) ⊙ (max(k, 0)² · W_v)` with static token shift.
pub fn channel_mix_forward<T: Real>(
    x_t: ArrayView1<'_, T>,
    state: &BlockState<T>,
    store: &ParamStore<T>,
    p: &ChannelMixParams,
) -> Result<(Array1<T>, BlockState<T>)> {
    let mut next = state.clone();
    let y = channel_mix_step(x_t, &mut next, store, p)?;
    Ok((y, next))
}

pub fn channel_mix_step<T: Real>(
    x_t: ArrayView1<'_, T>,
    state: &mut BlockState<T>,
    store: &ParamStore<T>,
    p: &ChannelMixParams,
) -> Result<Array1<T>> {
    let prev = state.cm_shift.view();
    let r = token_shift_di(x_t, prev, &p.r.view(store))?;
    let k = token_shift_di(x_t, prev, &p.k.view(store))?;
    let w_v = store.mat(p.w_v);
    if w_v.nrows() != k.len() {
        return Err(dim_err(
            "channel_mix",
            format!("W_v has {} rows, expected {}", w_v.nrows(), k.len()),
        ));
    }
    let hidden = k.mapv(|x| {
        let x = x.max(T::zero());
        x * x
    });
    let value = vec_mat(hidden.view(), w_v);
    state.cm_shift.assign(&x_t);
    Ok(Zip::from(&r)
        .and(&value)
        .map_collect(|&r, &v| sigmoid(r) * v))
}

/// Pre-norm residual block: `x + tm(LN₁ x)`, then `+ cm(LN₂ ·)`.
pub fn block_forward<T: Real>(
    x_t: ArrayView1<'_, T>,
    state: &BlockState<T>,
    store: &ParamStore<T>,
    p: &BlockParams,
    variant: Variant,
) -> Result<(Array1<T>, BlockState<T>)> {
    let mut next = state.clone();
    let y = block_step(x_t, &mut next, store, p, variant)?;
    Ok((y, next))
}

pub fn block_step<T: Real>(
    x_t: ArrayView1<'_, T>,
    state: &mut BlockState<T>,
    store: &ParamStore<T>,
    p: &BlockParams,
    variant: Variant,
) -> Result<Array1<T>> {
    let a = layer_norm(x_t, store.vec(p.ln1_weight), store.vec(p.ln1_bias))?;
    let mut x = &x_t + &time_mix_step(a.view(), state, store, &p.att, variant)?;
    let c = layer_norm(x.view(), store.vec(p.ln2_weight), store.vec(p.ln2_bias))?;
    x += &channel_mix_step(c.view(), state, store, &p.ffn)?;
    Ok(x)
}
