use ndarray::{Array2, ArrayView2};

use super::{Model, ModelInput, Slot, TinyAttentionIds};
use crate::autograd::{causal_probs, Tape, Var};
use crate::blocks::{block_seq, ParamVars};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::vision::{inverse_permutation, scan_permutation, span_gather, ScanDirection};
use crate::{Error, Real, Result};

/// Causal single-head attention at width `d_tiny`, without the residual:
/// `softmax(Q·Kᵀ/√d_tiny + mask)·V·W_out`.
pub fn tiny_attention<T: Real>(
    x: ArrayView2<'_, T>,
    store: &ParamStore<T>,
    p: &TinyAttentionIds,
) -> Array2<T> {
    let q = x.dot(&store.mat(p.w_q));
    let k = x.dot(&store.mat(p.w_k));
    let v = x.dot(&store.mat(p.w_v));
    causal_probs(q.view(), k.view())
        .dot(&v)
        .dot(&store.mat(p.w_out))
}

pub struct LossOutput<T> {
    pub loss: T,
    pub grads: Gradients<T>,
}

impl<T: Real> Model<T> {
    /// Records the whole forward pass on `tape`; returns the `T × vocab`
    /// logits.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        pv: &ParamVars,
        input: &ModelInput<T>,
    ) -> Result<Var> {
        if input.is_empty() {
            return Err(Error::Layout("empty input".into()));
        }
        input.check()?;
        let span = input.layout.image_span.clone();
        let text_ids = |range: std::ops::Range<usize>| -> Result<Vec<usize>> {
            input.layout.items[range]
                .iter()
                .map(|s| match s {
                    Slot::Text(t) if (*t as usize) < self.config.vocab_size => Ok(*t as usize),
                    Slot::Text(t) => {
                        Err(Error::Argument(format!("token {t} outside the vocabulary")))
                    }
                    Slot::Image(_) => unreachable!("checked layout"),
                })
                .collect()
        };
        let emb = pv.get(self.ids.emb);
        let mut parts = Vec::new();
        let before = text_ids(0..span.start)?;
        if !before.is_empty() {
            parts.push(tape.gather_rows(emb, before));
        }
        if let Some(grid) = &input.image {
            let p = &self.ids.projector;
            let tokens = tape.constant(grid.tokens.clone());
            let h = tape.matmul(tokens, pv.get(p.w1));
            let h = tape.add_row(h, pv.get(p.b1));
            let h = tape.gelu(h);
            let h = tape.matmul(h, pv.get(p.w2));
            parts.push(tape.add_row(h, pv.get(p.b2)));
        }
        let after = text_ids(span.end..input.len())?;
        if !after.is_empty() {
            parts.push(tape.gather_rows(emb, after));
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(parts)
        };
        let mut x = tape.norm(x, pv.get(self.ids.ln0_weight), pv.get(self.ids.ln0_bias), 1);
        let schedule = self.schedule();
        let (gh, gw) = input.image.as_ref().map_or((0, 0), |g| (g.h, g.w));
        for (block, dir) in self.ids.blocks.iter().zip(&schedule.directions) {
            let permuted = !span.is_empty() && *dir != ScanDirection::Forward;
            if permuted {
                let perm = scan_permutation(*dir, gh, gw);
                let fwd = span_gather(input.len(), &span, &perm)?;
                let inv = span_gather(input.len(), &span, &inverse_permutation(&perm))?;
                let xp = tape.gather_rows(x, fwd);
                let y = block_seq(tape, pv, block, self.config.recurrence, xp)?;
                x = tape.gather_rows(y, inv);
            } else {
                x = block_seq(tape, pv, block, self.config.recurrence, x)?;
            }
        }
        if let Some(t) = &self.ids.tiny {
            let q = tape.matmul(x, pv.get(t.w_q));
            let k = tape.matmul(x, pv.get(t.w_k));
            let v = tape.matmul(x, pv.get(t.w_v));
            let a = tape.causal_attention(q, k, v);
            let o = tape.matmul(a, pv.get(t.w_out));
            x = tape.add(x, o);
        }
        let x = tape.norm(
            x,
            pv.get(self.ids.ln_out_weight),
            pv.get(self.ids.ln_out_bias),
            1,
        );
        Ok(tape.matmul(x, pv.get(self.ids.head)))
    }

    /// Sequence-parallel evaluation; returns `T × vocab` logits.
    pub fn forward_parallel(&self, input: &ModelInput<T>) -> Result<Array2<T>> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &self.store, |_| false);
        let logits = self.forward_tape(&mut tape, &pv, input)?;
        Ok(tape.value(logits).clone())
    }

    /// Loss of one sample given its per-answer-token weights, with gradients
    /// for the parameters selected by `trainable`.
    pub fn sample_loss(
        &self,
        input: &ModelInput<T>,
        token_weights: &[T],
        trainable: impl Fn(ParamId) -> bool,
    ) -> Result<LossOutput<T>> {
        sample_loss(self, input, token_weights, trainable)
    }
}

pub fn sample_loss<T: Real>(
    model: &Model<T>,
    input: &ModelInput<T>,
    token_weights: &[T],
    trainable: impl Fn(ParamId) -> bool,
) -> Result<LossOutput<T>> {
    let span = input.layout.target_span.clone();
    if span.is_empty() {
        return Err(Error::EmptyTarget);
    }
    if span.start == 0 {
        return Err(Error::Layout(
            "the first position cannot be a target".into(),
        ));
    }
    if token_weights.len() != span.len() {
        return Err(Error::Argument(format!(
            "{} weights for {} target tokens",
            token_weights.len(),
            span.len()
        )));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, &model.store, &trainable);
    let logits = model.forward_tape(&mut tape, &pv, input)?;
    let n = input.len();
    let mut targets = vec![0usize; n];
    let mut weights = vec![T::zero(); n];
    for (p, &w) in span.clone().zip(token_weights) {
        let Slot::Text(t) = input.layout.items[p] else {
            return Err(Error::Layout("image slot inside the answer span".into()));
        };
        targets[p - 1] = t as usize;
        weights[p - 1] = w;
    }
    let loss = tape.cross_entropy(logits, targets, weights);
    let value = tape.value(loss)[[0, 0]];
    let mut tg = tape.backward(loss);
    let mut grads = Gradients::new(model.store.len());
    for (id, _) in model.store.entries() {
        if trainable(id) {
            if let Some(g) = tg.take(pv.get(id)) {
                grads.set(id, g);
            }
        }
    }
    Ok(LossOutput { loss: value, grads })
}
