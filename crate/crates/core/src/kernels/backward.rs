//! Analytic backward passes for every kernel forward operation.
//!
//! The dynamic entry points [`kernel_forward`] / [`kernel_backward`] take
//! named tensors so one finite-difference harness can check every operation.

use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2, Zip};

use super::{
    ddlerp, decay_transform, decay_transform_scalar, dynamic_decay, lora_eval, token_shift_dd,
    token_shift_di, vec_mat, wkv_dd_step, wkv_di_step, wkv_sequence, wkv_sequence_backward,
    HeadParams, LoraParams, ShiftMix, ShiftParams, WkvState,
};
use crate::error::dim_err;
use crate::{Error, Real, Result};

pub type TensorMap<T> = BTreeMap<String, ArrayD<T>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelOp {
    TokenShiftDi,
    LoraEval,
    Ddlerp,
    TokenShiftDd,
    DecayTransform,
    WkvDiStep,
    WkvDdStep,
    DynamicDecay,
    WkvSequence,
}

impl KernelOp {
    pub const ALL: [KernelOp; 9] = [
        KernelOp::TokenShiftDi,
        KernelOp::LoraEval,
        KernelOp::Ddlerp,
        KernelOp::TokenShiftDd,
        KernelOp::DecayTransform,
        KernelOp::WkvDiStep,
        KernelOp::WkvDdStep,
        KernelOp::DynamicDecay,
        KernelOp::WkvSequence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            KernelOp::TokenShiftDi => "token_shift_di",
            KernelOp::LoraEval => "lora_eval",
            KernelOp::Ddlerp => "ddlerp",
            KernelOp::TokenShiftDd => "token_shift_dd",
            KernelOp::DecayTransform => "decay_transform",
            KernelOp::WkvDiStep => "wkv_di_step",
            KernelOp::WkvDdStep => "wkv_dd_step",
            KernelOp::DynamicDecay => "dynamic_decay",
            KernelOp::WkvSequence => "wkv_sequence",
        }
    }

    /// Input names in the order the operation consumes them.
    pub fn inputs(self) -> &'static [&'static str] {
        match self {
            KernelOp::TokenShiftDi => &["x_t", "x_prev", "mu", "w"],
            KernelOp::LoraEval => &["x", "lambda", "a", "b"],
            KernelOp::Ddlerp => &["a", "b", "mu_x", "lambda", "lora_a", "lora_b"],
            KernelOp::TokenShiftDd => &["x_t", "x_prev", "mu_x", "lambda", "lora_a", "lora_b", "w"],
            KernelOp::DecayTransform => &["d"],
            KernelOp::WkvDiStep => &["state", "k", "v", "u", "w_raw"],
            KernelOp::WkvDdStep => &["state", "k", "v", "u", "w_t"],
            KernelOp::DynamicDecay => &[
                "x_t",
                "x_prev",
                "mu_x",
                "ddlerp_lambda",
                "ddlerp_a",
                "ddlerp_b",
                "decay_lambda",
                "decay_a",
                "decay_b",
            ],
            KernelOp::WkvSequence => &["r", "k", "v", "u", "w"],
        }
    }

    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            KernelOp::WkvDiStep | KernelOp::WkvDdStep => &["wkv", "state"],
            KernelOp::DecayTransform | KernelOp::DynamicDecay => &["w"],
            _ => &["y"],
        }
    }
}

impl FromStr for KernelOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::UnsupportedOp(s.to_string()))
    }
}

fn get1<'a, T: Real>(m: &'a TensorMap<T>, op: KernelOp, name: &str) -> Result<ArrayView1<'a, T>> {
    m.get(name)
        .ok_or_else(|| dim_err("kernel", format!("{} is missing input `{name}`", op.name())))?
        .view()
        .into_dimensionality::<Ix1>()
        .map_err(|_| {
            dim_err(
                "kernel",
                format!("`{name}` of {} must be a vector", op.name()),
            )
        })
}

fn get2<'a, T: Real>(m: &'a TensorMap<T>, op: KernelOp, name: &str) -> Result<ArrayView2<'a, T>> {
    m.get(name)
        .ok_or_else(|| dim_err("kernel", format!("{} is missing input `{name}`", op.name())))?
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| {
            dim_err(
                "kernel",
                format!("`{name}` of {} must be a matrix", op.name()),
            )
        })
}

fn lora<'a, T: Real>(
    m: &'a TensorMap<T>,
    op: KernelOp,
    names: [&str; 3],
) -> Result<LoraParams<'a, T>> {
    Ok(LoraParams {
        lambda: get1(m, op, names[0])?,
        a: get2(m, op, names[1])?,
        b: get2(m, op, names[2])?,
    })
}

fn single<T: Real>(name: &str, value: ArrayD<T>) -> TensorMap<T> {
    let mut out = TensorMap::new();
    out.insert(name.to_string(), value);
    out
}

/// Evaluates a kernel operation on named inputs.
pub fn kernel_forward<T: Real>(op: KernelOp, inputs: &TensorMap<T>) -> Result<TensorMap<T>> {
    match op {
        KernelOp::TokenShiftDi => {
            let p = ShiftParams {
                mix: ShiftMix::Static {
                    mu: get1(inputs, op, "mu")?,
                },
                w: get2(inputs, op, "w")?,
            };
            let y = token_shift_di(get1(inputs, op, "x_t")?, get1(inputs, op, "x_prev")?, &p)?;
            Ok(single("y", y.into_dyn()))
        }
        KernelOp::LoraEval => {
            let p = lora(inputs, op, ["lambda", "a", "b"])?;
            Ok(single(
                "y",
                lora_eval(get1(inputs, op, "x")?, &p)?.into_dyn(),
            ))
        }
        KernelOp::Ddlerp => {
            let p = lora(inputs, op, ["lambda", "lora_a", "lora_b"])?;
            let y = ddlerp(
                get1(inputs, op, "a")?,
                get1(inputs, op, "b")?,
                get1(inputs, op, "mu_x")?,
                &p,
            )?;
            Ok(single("y", y.into_dyn()))
        }
        KernelOp::TokenShiftDd => {
            let p = ShiftParams {
                mix: ShiftMix::Dynamic {
                    mu_x: get1(inputs, op, "mu_x")?,
                    lora: lora(inputs, op, ["lambda", "lora_a", "lora_b"])?,
                },
                w: get2(inputs, op, "w")?,
            };
            let y = token_shift_dd(get1(inputs, op, "x_t")?, get1(inputs, op, "x_prev")?, &p)?;
            Ok(single("y", y.into_dyn()))
        }
        KernelOp::DecayTransform => Ok(single(
            "w",
            decay_transform(get1(inputs, op, "d")?).into_dyn(),
        )),
        KernelOp::WkvDiStep | KernelOp::WkvDdStep => {
            let state = WkvState {
                s: get2(inputs, op, "state")?.to_owned(),
            };
            let (k, v, u) = (
                get1(inputs, op, "k")?,
                get1(inputs, op, "v")?,
                get1(inputs, op, "u")?,
            );
            let (wkv, next) = if op == KernelOp::WkvDiStep {
                let p = HeadParams {
                    u,
                    w_raw: get1(inputs, op, "w_raw")?,
                };
                wkv_di_step(&state, k, v, &p)?
            } else {
                wkv_dd_step(&state, k, v, u, get1(inputs, op, "w_t")?)?
            };
            let mut out = single("wkv", wkv.into_dyn());
            out.insert("state".into(), next.s.into_dyn());
            Ok(out)
        }
        KernelOp::DynamicDecay => {
            let w = dynamic_decay(
                get1(inputs, op, "x_t")?,
                get1(inputs, op, "x_prev")?,
                get1(inputs, op, "mu_x")?,
                &lora(inputs, op, ["ddlerp_lambda", "ddlerp_a", "ddlerp_b"])?,
                &lora(inputs, op, ["decay_lambda", "decay_a", "decay_b"])?,
            )?;
            Ok(single("w", w.into_dyn()))
        }
        KernelOp::WkvSequence => {
            let (r, k, v, u, w) = seq_inputs(inputs, op)?;
            Ok(single("y", wkv_sequence(r, k, v, u, w).y.into_dyn()))
        }
    }
}

type SeqInputs<'a, T> = (
    ArrayView2<'a, T>,
    ArrayView2<'a, T>,
    ArrayView2<'a, T>,
    ArrayView1<'a, T>,
    ArrayView2<'a, T>,
);

fn seq_inputs<'a, T: Real>(inputs: &'a TensorMap<T>, op: KernelOp) -> Result<SeqInputs<'a, T>> {
    let r = get2(inputs, op, "r")?;
    let k = get2(inputs, op, "k")?;
    let v = get2(inputs, op, "v")?;
    let u = get1(inputs, op, "u")?;
    let w = get2(inputs, op, "w")?;
    if k.nrows() == 0
        || r.dim() != k.dim()
        || v.dim() != k.dim()
        || w.dim() != k.dim()
        || u.len() != k.ncols()
    {
        return Err(dim_err(
            "wkv_sequence",
            "r, k, v, w must share shape T × n and u length n",
        ));
    }
    Ok((r, k, v, u, w))
}

fn outer<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Array2<T> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

/// Gradients of `λ + tanh(x·A)·B`: `(dx, dλ, dA, dB)`.
pub(crate) fn lora_backward<T: Real>(
    x: ArrayView1<'_, T>,
    p: &LoraParams<'_, T>,
    dy: ArrayView1<'_, T>,
) -> (Array1<T>, Array1<T>, Array2<T>, Array2<T>) {
    let hidden = vec_mat(x, p.a).mapv(|h| h.tanh());
    let d_b = outer(hidden.view(), dy);
    let d_hidden = p.b.dot(&dy);
    let d_pre = Zip::from(&d_hidden)
        .and(&hidden)
        .map_collect(|&g, &t| g * (T::one() - t * t));
    let d_a = outer(x, d_pre.view());
    let dx = p.a.dot(&d_pre);
    (dx, dy.to_owned(), d_a, d_b)
}

struct DdlerpGrads<T> {
    a: Array1<T>,
    b: Array1<T>,
    mu_x: Array1<T>,
    lambda: Array1<T>,
    lora_a: Array2<T>,
    lora_b: Array2<T>,
}

fn ddlerp_backward<T: Real>(
    a: ArrayView1<'_, T>,
    b: ArrayView1<'_, T>,
    mu_x: ArrayView1<'_, T>,
    p: &LoraParams<'_, T>,
    dy: ArrayView1<'_, T>,
) -> Result<DdlerpGrads<T>> {
    let delta = &b - &a;
    let inner = &a + &(&delta * &mu_x);
    let gate = lora_eval(inner.view(), p)?;
    let d_gate = &dy * &delta;
    let (d_inner, lambda, lora_a, lora_b) = lora_backward(inner.view(), p, d_gate.view());
    let d_delta = &(&dy * &gate) + &(&d_inner * &mu_x);
    let d_mu = &d_inner * &delta;
    let da = &(&dy + &d_inner) - &d_delta;
    Ok(DdlerpGrads {
        a: da,
        b: d_delta,
        mu_x: d_mu,
        lambda,
        lora_a,
        lora_b,
    })
}

/// Gradients of the WKV step given `∂L/∂wkv` and `∂L/∂S'`.
/// Returns `(dS, dk, dv, du, dw)` where `dw` is w.r.t. the transformed decay.
#[allow(clippy::type_complexity)]
fn wkv_step_backward<T: Real>(
    s: ArrayView2<'_, T>,
    k: ArrayView1<'_, T>,
    v: ArrayView1<'_, T>,
    u: ArrayView1<'_, T>,
    w: ArrayView1<'_, T>,
    d_wkv: ArrayView2<'_, T>,
    d_next: ArrayView2<'_, T>,
) -> (Array2<T>, Array1<T>, Array1<T>, Array1<T>, Array1<T>) {
    let n = k.len();
    let mut ds = d_wkv.to_owned();
    let mut g = Array2::zeros((n, n));
    let mut du = Array1::zeros(n);
    let mut dw = Array1::zeros(n);
    for c in 0..n {
        for j in 0..n {
            ds[[c, j]] = ds[[c, j]] + w[c] * d_next[[c, j]];
            g[[c, j]] = u[c] * d_wkv[[c, j]] + d_next[[c, j]];
            du[c] = du[c] + d_wkv[[c, j]] * k[c] * v[j];
            dw[c] = dw[c] + d_next[[c, j]] * s[[c, j]];
        }
    }
    let dk = g.dot(&v);
    let dv = g.t().dot(&k);
    (ds, dk, dv, du, dw)
}

fn upstream1<'a, T: Real>(
    g: &'a TensorMap<T>,
    op: KernelOp,
    name: &str,
) -> Result<ArrayView1<'a, T>> {
    get1(g, op, name)
}

/// Gradients of a scalar loss with respect to every input of `op`, given the
/// upstream gradients of its outputs. Missing upstream entries of
/// multi-output operations are treated as zero.
pub fn kernel_backward<T: Real>(
    op: KernelOp,
    inputs: &TensorMap<T>,
    upstream: &TensorMap<T>,
) -> Result<TensorMap<T>> {
    let mut out = TensorMap::new();
    let mut put = |name: &str, g: ArrayD<T>| {
        out.insert(name.to_string(), g);
    };
    match op {
        KernelOp::TokenShiftDi => {
            let (x, xp, mu, w) = (
                get1(inputs, op, "x_t")?,
                get1(inputs, op, "x_prev")?,
                get1(inputs, op, "mu")?,
                get2(inputs, op, "w")?,
            );
            // Validates shapes.
            token_shift_di(
                x,
                xp,
                &ShiftParams {
                    mix: ShiftMix::Static { mu },
                    w,
                },
            )?;
            let dy = upstream1(upstream, op, "y")?;
            let mixed = Zip::from(&x)
                .and(&xp)
                .and(&mu)
                .map_collect(|&a, &b, &m| m * a + (T::one() - m) * b);
            let dm = w.dot(&dy);
            put("w", outer(mixed.view(), dy).into_dyn());
            put("x_t", (&dm * &mu).into_dyn());
            put("x_prev", (&dm * &mu.mapv(|m| T::one() - m)).into_dyn());
            put("mu", (&dm * &(&x - &xp)).into_dyn());
        }
        KernelOp::LoraEval => {
            let p = lora(inputs, op, ["lambda", "a", "b"])?;
            let x = get1(inputs, op, "x")?;
            lora_eval(x, &p)?;
            let (dx, dl, da, db) = lora_backward(x, &p, upstream1(upstream, op, "y")?);
            put("x", dx.into_dyn());
            put("lambda", dl.into_dyn());
            put("a", da.into_dyn());
            put("b", db.into_dyn());
        }
        KernelOp::Ddlerp => {
            let p = lora(inputs, op, ["lambda", "lora_a", "lora_b"])?;
            let g = ddlerp_backward(
                get1(inputs, op, "a")?,
                get1(inputs, op, "b")?,
                get1(inputs, op, "mu_x")?,
                &p,
                upstream1(upstream, op, "y")?,
            )?;
            put("a", g.a.into_dyn());
            put("b", g.b.into_dyn());
            put("mu_x", g.mu_x.into_dyn());
            put("lambda", g.lambda.into_dyn());
            put("lora_a", g.lora_a.into_dyn());
            put("lora_b", g.lora_b.into_dyn());
        }
        KernelOp::TokenShiftDd => {
            let p = lora(inputs, op, ["lambda", "lora_a", "lora_b"])?;
            let (x, xp, mu_x, w) = (
                get1(inputs, op, "x_t")?,
                get1(inputs, op, "x_prev")?,
                get1(inputs, op, "mu_x")?,
                get2(inputs, op, "w")?,
            );
            let mixed = ddlerp(x, xp, mu_x, &p)?;
            if w.nrows() != mixed.len() {
                return Err(dim_err("token_shift_dd", "W rows do not match input width"));
            }
            let dy = upstream1(upstream, op, "y")?;
            let dm = w.dot(&dy);
            let g = ddlerp_backward(x, xp, mu_x, &p, dm.view())?;
            put("w", outer(mixed.view(), dy).into_dyn());
            put("x_t", g.a.into_dyn());
            put("x_prev", g.b.into_dyn());
            put("mu_x", g.mu_x.into_dyn());
            put("lambda", g.lambda.into_dyn());
            put("lora_a", g.lora_a.into_dyn());
            put("lora_b", g.lora_b.into_dyn());
        }
        KernelOp::DecayTransform => {
            let d = get1(inputs, op, "d")?;
            let dw = upstream1(upstream, op, "w")?;
            let dd = Zip::from(&d)
                .and(&dw)
                .map_collect(|&di, &g| g * -(di.exp()) * decay_transform_scalar(di));
            put("d", dd.into_dyn());
        }
        KernelOp::WkvDiStep | KernelOp::WkvDdStep => {
            let s = get2(inputs, op, "state")?;
            let (k, v, u) = (
                get1(inputs, op, "k")?,
                get1(inputs, op, "v")?,
                get1(inputs, op, "u")?,
            );
            let n = k.len();
            let raw = if op == KernelOp::WkvDiStep {
                Some(get1(inputs, op, "w_raw")?)
            } else {
                None
            };
            let w = match raw {
                Some(r) => decay_transform(r),
                None => get1(inputs, op, "w_t")?.to_owned(),
            };
            // Validates shapes and contraction.
            let state = WkvState { s: s.to_owned() };
            wkv_dd_step(&state, k, v, u, w.view())?;
            let zeros = Array2::zeros((n, n));
            let d_wkv = match upstream.get("wkv") {
                Some(_) => get2(upstream, op, "wkv")?,
                None => zeros.view(),
            };
            let d_next = match upstream.get("state") {
                Some(_) => get2(upstream, op, "state")?,
                None => zeros.view(),
            };
            if d_wkv.dim() != (n, n) || d_next.dim() != (n, n) {
                return Err(dim_err(
                    "wkv_step_backward",
                    "upstream gradients must be n × n",
                ));
            }
            let (ds, dk, dv, du, dw) = wkv_step_backward(s, k, v, u, w.view(), d_wkv, d_next);
            put("state", ds.into_dyn());
            put("k", dk.into_dyn());
            put("v", dv.into_dyn());
            put("u", du.into_dyn());
            match raw {
                Some(r) => {
                    let d_raw = Zip::from(&r)
                        .and(&dw)
                        .and(&w)
                        .map_collect(|&ri, &g, &wi| g * -(ri.exp()) * wi);
                    put("w_raw", d_raw.into_dyn());
                }
                None => put("w_t", dw.into_dyn()),
            }
        }
        KernelOp::DynamicDecay => {
            let (x, xp, mu_x) = (
                get1(inputs, op, "x_t")?,
                get1(inputs, op, "x_prev")?,
                get1(inputs, op, "mu_x")?,
            );
            let inner = lora(inputs, op, ["ddlerp_lambda", "ddlerp_a", "ddlerp_b"])?;
            let outer_lora = lora(inputs, op, ["decay_lambda", "decay_a", "decay_b"])?;
            let mixed = ddlerp(x, xp, mu_x, &inner)?;
            let d = lora_eval(mixed.view(), &outer_lora)?;
            let dw = upstream1(upstream, op, "w")?;
            let dd = Zip::from(&d)
                .and(&dw)
                .map_collect(|&di, &g| g * -(di.exp()) * decay_transform_scalar(di));
            let (d_mixed, dl2, da2, db2) = lora_backward(mixed.view(), &outer_lora, dd.view());
            let g = ddlerp_backward(x, xp, mu_x, &inner, d_mixed.view())?;
            put("x_t", g.a.into_dyn());
            put("x_prev", g.b.into_dyn());
            put("mu_x", g.mu_x.into_dyn());
            put("ddlerp_lambda", g.lambda.into_dyn());
            put("ddlerp_a", g.lora_a.into_dyn());
            put("ddlerp_b", g.lora_b.into_dyn());
            put("decay_lambda", dl2.into_dyn());
            put("decay_a", da2.into_dyn());
            put("decay_b", db2.into_dyn());
        }
        KernelOp::WkvSequence => {
            let (r, k, v, u, w) = seq_inputs(inputs, op)?;
            let dy = get2(upstream, op, "y")?;
            if dy.dim() != k.dim() {
                return Err(dim_err("wkv_sequence", "upstream gradient must be T × n"));
            }
            let trace = wkv_sequence(r, k, v, u, w);
            let g = wkv_sequence_backward(&trace, r, k, v, u, w, dy);
            put("r", g.r.into_dyn());
            put("k", g.k.into_dyn());
            put("v", g.v.into_dyn());
            put("u", g.u.into_dyn());
            put("w", g.w.into_dyn());
        }
    }
    Ok(out)
}
