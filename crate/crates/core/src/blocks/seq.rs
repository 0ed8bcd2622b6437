use super::{
    BlockParams, BranchIds, ChannelMixParams, DecayIds, LoraIds, MixIds, TimeMixParams, Variant,
};
use crate::autograd::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::{Error, Real, Result};

/// Tape leaves for every entry of a parameter store.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Creates one leaf per parameter; `trainable` decides which leaves
    /// receive gradients.
    pub fn bind<T: Real>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        trainable: impl Fn(ParamId) -> bool,
    ) -> Self {
        let vars = store
            .entries()
            .map(|(id, e)| tape.leaf(e.value.clone(), trainable(id)))
            .collect();
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }
}

fn lora<T: Real>(tape: &mut Tape<T>, pv: &ParamVars, ids: &LoraIds, x: Var) -> Var {
    let h = tape.matmul(x, pv.get(ids.a));
    let h = tape.tanh(h);
    let h = tape.matmul(h, pv.get(ids.b));
    tape.add_row(h, pv.get(ids.lambda))
}

/// Mixed branch input for every row of `x`, given the shifted sequence `prev`.
fn mix<T: Real>(tape: &mut Tape<T>, pv: &ParamVars, m: &MixIds, x: Var, prev: Var) -> Var {
    match m {
        MixIds::Static { mu } => {
            let diff = tape.sub(x, prev);
            let scaled = tape.mul_row(diff, pv.get(*mu));
            tape.add(prev, scaled)
        }
        MixIds::Dynamic { mu_x, lora: ids } => ddlerp(tape, pv, *mu_x, ids, x, prev),
    }
}

fn ddlerp<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    mu_x: ParamId,
    ids: &LoraIds,
    x: Var,
    prev: Var,
) -> Var {
    let diff = tape.sub(prev, x);
    let inner = tape.mul_row(diff, pv.get(mu_x));
    let inner = tape.add(x, inner);
    let gate = lora(tape, pv, ids, inner);
    let step = tape.mul(diff, gate);
    tape.add(x, step)
}

fn branch<T: Real>(tape: &mut Tape<T>, pv: &ParamVars, b: &BranchIds, x: Var, prev: Var) -> Var {
    let mixed = mix(tape, pv, &b.mix, x, prev);
    tape.matmul(mixed, pv.get(b.w))
}

/// Time mixing over a whole (normalized) sequence `x` (`T × D`), starting
/// from a zero state.
pub fn time_mix_seq<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    p: &TimeMixParams,
    variant: Variant,
    x: Var,
) -> Result<Var> {
    if p.variant() != variant {
        return Err(Error::Config(format!(
            "time mix called as {variant:?} with {:?} parameters",
            p.variant()
        )));
    }
    let prev = tape.shift_rows(x);
    let r = branch(tape, pv, &p.r, x, prev);
    let k = branch(tape, pv, &p.k, x, prev);
    let v = branch(tape, pv, &p.v, x, prev);
    let g = branch(tape, pv, &p.g, x, prev);
    let w = match &p.decay {
        DecayIds::Static { w_raw } => tape.decay(pv.get(*w_raw)),
        DecayIds::Dynamic {
            mu_x,
            ddlerp: dl,
            lora: dec,
        } => {
            let mixed = ddlerp(tape, pv, *mu_x, dl, x, prev);
            let d = lora(tape, pv, dec, mixed);
            tape.decay(d)
        }
    };
    let y = tape.wkv(r, k, v, pv.get(p.u), w, p.n_heads);
    let normed = tape.norm(y, pv.get(p.ln_x_weight), pv.get(p.ln_x_bias), p.n_heads);
    let gate = tape.silu(g);
    let gated = tape.mul(gate, normed);
    Ok(tape.matmul(gated, pv.get(p.w_o)))
}

pub fn channel_mix_seq<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    p: &ChannelMixParams,
    x: Var,
) -> Var {
    let prev = tape.shift_rows(x);
    let r = branch(tape, pv, &p.r, x, prev);
    let k = branch(tape, pv, &p.k, x, prev);
    let hidden = tape.sq_relu(k);
    let value = tape.matmul(hidden, pv.get(p.w_v));
    let gate = tape.sigmoid(r);
    tape.mul(gate, value)
}

pub fn block_seq<T: Real>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    p: &BlockParams,
    variant: Variant,
    x: Var,
) -> Result<Var> {
    let a = tape.norm(x, pv.get(p.ln1_weight), pv.get(p.ln1_bias), 1);
    let tm = time_mix_seq(tape, pv, &p.att, variant, a)?;
    let x = tape.add(x, tm);
    let c = tape.norm(x, pv.get(p.ln2_weight), pv.get(p.ln2_bias), 1);
    let cm = channel_mix_seq(tape, pv, &p.ffn, c);
    Ok(tape.add(x, cm))
}
