use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use super::{check_len, decay_transform, HeadParams, WkvState};
use crate::error::dim_err;
use crate::{Error, Real, Result};

/// Chunk length of the sequence-parallel WKV evaluation.
pub const WKV_CHUNK: usize = 16;

fn check_contraction<T: Real>(w: &ArrayView1<'_, T>) -> Result<()> {
    for (index, &wi) in w.iter().enumerate() {
        if !(wi > T::zero() && wi < T::one()) {
            return Err(Error::Contraction {
                index,
                value: wi.f64(),
            });
        }
    }
    Ok(())
}

/// `diag(u)·kᵀ·v + S` and `diag(w)·S + kᵀ·v`.
fn step_matrices<T: Real>(
    state: &WkvState<T>,
    k: ArrayView1<'_, T>,
    v: ArrayView1<'_, T>,
    u: ArrayView1<'_, T>,
    w: ArrayView1<'_, T>,
) -> (Array2<T>, WkvState<T>) {
    let n = state.head_dim();
    let mut wkv = state.s.clone();
    let mut next = state.s.clone();
    for c in 0..n {
        for j in 0..n {
            let kv = k[c] * v[j];
            wkv[[c, j]] = wkv[[c, j]] + u[c] * kv;
            next[[c, j]] = w[c] * next[[c, j]] + kv;
        }
    }
    (wkv, WkvState { s: next })
}

fn check_step_shapes<T>(
    op: &'static str,
    state: &WkvState<T>,
    k: &ArrayView1<'_, T>,
    v: &ArrayView1<'_, T>,
    u: &ArrayView1<'_, T>,
    w: &ArrayView1<'_, T>,
) -> Result<()> {
    let n = state.s.nrows();
    if state.s.ncols() != n {
        return Err(dim_err(
            op,
            format!("state is {:?}, expected square", state.s.dim()),
        ));
    }
    check_len(op, "k", k, n)?;
    check_len(op, "v", v, n)?;
    check_len(op, "u", u, n)?;
    check_len(op, "w", w, n)
}

/// One step of the data-independent WKV operator.
///
/// Returns `wkv_t = diag(u)·k_tᵀ·v_t + S` and the advanced state
/// `diag(w)·S + k_tᵀ·v_t` with `w = exp(−exp(w_raw))`.
pub fn wkv_di_step<T: Real>(
    state: &WkvState<T>,
    k_t: ArrayView1<'_, T>,
    v_t: ArrayView1<'_, T>,
    p: &HeadParams<'_, T>,
) -> Result<(Array2<T>, WkvState<T>)> {
    check_step_shapes("wkv_di_step", state, &k_t, &v_t, &p.u, &p.w_raw)?;
    let w = decay_transform(p.w_raw);
    Ok(step_matrices(state, k_t, v_t, p.u, w.view()))
}

/// One step of the data-dependent WKV operator with an already transformed
/// decay `w_t`.
pub fn wkv_dd_step<T: Real>(
    state: &WkvState<T>,
    k_t: ArrayView1<'_, T>,
    v_t: ArrayView1<'_, T>,
    u: ArrayView1<'_, T>,
    w_t: ArrayView1<'_, T>,
) -> Result<(Array2<T>, WkvState<T>)> {
    check_step_shapes("wkv_dd_step", state, &k_t, &v_t, &u, &w_t)?;
    check_contraction(&w_t)?;
    Ok(step_matrices(state, k_t, v_t, u, w_t))
}

/// Fused inference step: returns `r·wkv_t` and advances `state` in place.
///
/// Shapes are the caller's responsibility; this is the hot path of recurrent
/// inference.
pub fn wkv_step_inplace<T: Real>(
    state: &mut WkvState<T>,
    r: ArrayView1<'_, T>,
    k: ArrayView1<'_, T>,
    v: ArrayView1<'_, T>,
    u: ArrayView1<'_, T>,
    w: ArrayView1<'_, T>,
) -> Array1<T> {
    let n = state.head_dim();
    debug_assert!(r.len() == n && k.len() == n && v.len() == n && u.len() == n && w.len() == n);
    let s = state.s.as_slice_mut().expect("contiguous state");
    let mut bonus = T::zero();
    for c in 0..n {
        bonus = bonus + r[c] * u[c] * k[c];
    }
    let mut y: Array1<T> = v.mapv(|vj| bonus * vj);
    let ys = y.as_slice_mut().expect("fresh array");
    for c in 0..n {
        let (rc, wc, kc) = (r[c], w[c], k[c]);
        let row = &mut s[c * n..(c + 1) * n];
        for j in 0..n {
            ys[j] = ys[j] + rc * row[j];
            row[j] = wc * row[j] + kc * v[j];
        }
    }
    y
}

fn check_seq<T>(op: &'static str, k: &ArrayView2<'_, T>, v: &ArrayView2<'_, T>) -> Result<()> {
    if k.nrows() == 0 || k.ncols() == 0 {
        return Err(dim_err(op, "empty sequence"));
    }
    if k.dim() != v.dim() {
        return Err(dim_err(op, format!("K {:?} vs V {:?}", k.dim(), v.dim())));
    }
    Ok(())
}

/// Chunked evaluation of the WKV trace with per-step decays `w` (`T × n`).
///
/// Inside a chunk every `wkv_t` is summed directly from the chunk's keys and
/// values with decay products taken from log-space prefix sums; the state is
/// only materialized at chunk boundaries.
fn chunked_trace<T: Real>(
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    u: ArrayView1<'_, T>,
    w: ArrayView2<'_, T>,
) -> Vec<Array2<T>> {
    let (len, n) = k.dim();
    let log_w = w.mapv(|x| x.ln());
    let mut state = Array2::<T>::zeros((n, n));
    let mut out = Vec::with_capacity(len);
    for start in (0..len).step_by(WKV_CHUNK) {
        let end = (start + WKV_CHUNK).min(len);
        let m = end - start;
        // cum[q] = Σ_{j=start}^{start+q-1} ln w_j
        let mut cum = Array2::<T>::zeros((m + 1, n));
        for q in 0..m {
            let next = &cum.row(q) + &log_w.row(start + q);
            cum.row_mut(q + 1).assign(&next);
        }
        let outer = |i: usize| -> Array2<T> {
            let ki = k.row(i).insert_axis(ndarray::Axis(1));
            let vi = v.row(i).insert_axis(ndarray::Axis(0));
            ki.dot(&vi)
        };
        let outers: Vec<Array2<T>> = (start..end).map(outer).collect();
        for q in 0..m {
            let mut wkv = &outers[q] * &u.insert_axis(ndarray::Axis(1));
            let carry = cum.row(q).mapv(|x| x.exp());
            wkv = wkv + &(&state * &carry.insert_axis(ndarray::Axis(1)));
            for (p, kv) in outers.iter().enumerate().take(q) {
                let decay = (&cum.row(q) - &cum.row(p + 1)).mapv(|x| x.exp());
                wkv = wkv + &(kv * &decay.insert_axis(ndarray::Axis(1)));
            }
            out.push(wkv);
        }
        let total = cum.row(m).mapv(|x| x.exp());
        let mut next = &state * &total.insert_axis(ndarray::Axis(1));
        for (p, kv) in outers.iter().enumerate() {
            let decay = (&cum.row(m) - &cum.row(p + 1)).mapv(|x| x.exp());
            next = next + &(kv * &decay.insert_axis(ndarray::Axis(1)));
        }
        state = next;
    }
    out
}

/// Sequence-parallel data-independent WKV trace from a zero state.
pub fn wkv_di_parallel<T: Real>(
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    p: &HeadParams<'_, T>,
) -> Result<Vec<Array2<T>>> {
    const OP: &str = "wkv_di_parallel";
    check_seq(OP, &k, &v)?;
    let n = k.ncols();
    check_len(OP, "u", &p.u, n)?;
    check_len(OP, "w_raw", &p.w_raw, n)?;
    let w = decay_transform(p.w_raw);
    let w_seq = w.broadcast((k.nrows(), n)).expect("row broadcast");
    Ok(chunked_trace(k, v, p.u, w_seq))
}

/// Sequence-parallel data-dependent WKV trace from a zero state; `w` holds the
/// per-step decays (`T × head_dim`), each strictly inside `(0, 1)`.
pub fn wkv_dd_parallel<T: Real>(
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    u: ArrayView1<'_, T>,
    w: ArrayView2<'_, T>,
) -> Result<Vec<Array2<T>>> {
    const OP: &str = "wkv_dd_parallel";
    check_seq(OP, &k, &v)?;
    check_len(OP, "u", &u, k.ncols())?;
    if w.dim() != k.dim() {
        return Err(dim_err(OP, format!("W {:?} vs K {:?}", w.dim(), k.dim())));
    }
    for row in w.rows() {
        check_contraction(&row)?;
    }
    Ok(chunked_trace(k, v, u, w))
}

/// Forward record of [`wkv_sequence`], kept for the backward pass.
#[derive(Debug, Clone)]
pub struct WkvSeqTrace<T> {
    /// `r_t · wkv_t`, shape `T × n`.
    pub y: Array2<T>,
    /// State before step `t`, flattened to `n²` per row.
    pub states: Array2<T>,
}

#[derive(Debug, Clone)]
pub struct WkvSeqGrads<T> {
    pub r: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub u: Array1<T>,
    pub w: Array2<T>,
}

/// Runs one head over a whole sequence from a zero state, producing the
/// receptance-weighted outputs `r_t·wkv_t` and the per-step states.
pub fn wkv_sequence<T: Real>(
    r: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    u: ArrayView1<'_, T>,
    w: ArrayView2<'_, T>,
) -> WkvSeqTrace<T> {
    let (len, n) = k.dim();
    let mut state = WkvState::zeros(n);
    let mut y = Array2::zeros((len, n));
    let mut states = Array2::zeros((len, n * n));
    for t in 0..len {
        states.row_mut(t).assign(&ndarray::ArrayView1::from(
            state.s.as_slice().expect("contiguous"),
        ));
        let yt = wkv_step_inplace(&mut state, r.row(t), k.row(t), v.row(t), u, w.row(t));
        y.row_mut(t).assign(&yt);
    }
    WkvSeqTrace { y, states }
}

/// Reverse-time scan for [`wkv_sequence`] given `dy = ∂L/∂y`.
pub fn wkv_sequence_backward<T: Real>(
    trace: &WkvSeqTrace<T>,
    r: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    u: ArrayView1<'_, T>,
    w: ArrayView2<'_, T>,
    dy: ArrayView2<'_, T>,
) -> WkvSeqGrads<T> {
    let (len, n) = k.dim();
    let mut g = WkvSeqGrads {
        r: Array2::zeros((len, n)),
        k: Array2::zeros((len, n)),
        v: Array2::zeros((len, n)),
        u: Array1::zeros(n),
        w: Array2::zeros((len, n)),
    };
    // ∂L/∂S_t where S_t is the state after step t.
    let mut ds = vec![T::zero(); n * n];
    for t in (0..len).rev() {
        let prev = trace.states.row(t);
        let prev = prev.as_slice().expect("contiguous");
        let (rt, kt, vt, wt, dyt) = (r.row(t), k.row(t), v.row(t), w.row(t), dy.row(t));
        let mut bonus = T::zero();
        let mut dbonus = T::zero();
        for c in 0..n {
            bonus = bonus + rt[c] * u[c] * kt[c];
        }
        for j in 0..n {
            dbonus = dbonus + vt[j] * dyt[j];
        }
        for c in 0..n {
            let row_ds = &mut ds[c * n..(c + 1) * n];
            let row_prev = &prev[c * n..(c + 1) * n];
            let mut dk = rt[c] * u[c] * dbonus;
            let mut dr = u[c] * kt[c] * dbonus;
            let mut dw = T::zero();
            for j in 0..n {
                dk = dk + row_ds[j] * vt[j];
                dr = dr + row_prev[j] * dyt[j];
                dw = dw + row_ds[j] * row_prev[j];
                g.v[[t, j]] = g.v[[t, j]] + kt[c] * row_ds[j];
                // ∂L/∂S_{t-1}
                row_ds[j] = wt[c] * row_ds[j] + rt[c] * dyt[j];
            }
            g.k[[t, c]] = dk;
            g.r[[t, c]] = dr;
            g.w[[t, c]] = dw;
            g.u[c] = g.u[c] + rt[c] * kt[c] * dbonus;
        }
        for j in 0..n {
            g.v[[t, j]] = g.v[[t, j]] + bonus * dyt[j];
        }
    }
    g
}
