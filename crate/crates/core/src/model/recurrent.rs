use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{Model, ModelConfig, ModelInput, Slot};
use crate::blocks::{block_step, layer_norm, BlockState};
use crate::kernels::vec_mat;
use crate::prompting::EOS;
use crate::vision::{project_visual, scan_permutation, ScanDirection};
use crate::{Error, Real, Result};

/// Keys and values seen so far by the tiny-attention layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionCache<T> {
    pub keys: Vec<Array1<T>>,
    pub values: Vec<Array1<T>>,
}

impl<T: Real> AttentionCache<T> {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.keys.iter().chain(&self.values).map(Array1::len).sum()
    }
}

/// Per-session inference state: one [`BlockState`] per layer, plus the
/// attention cache when the hybrid layer is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<T> {
    pub layers: Vec<BlockState<T>>,
    pub position: usize,
    pub attention: Option<AttentionCache<T>>,
}

impl<T: Real> RecurrentState<T> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            layers: (0..config.n_layers)
                .map(|_| BlockState::zeros(config.d_model, config.n_heads, config.head_dim))
                .collect(),
            position: 0,
            attention: config.tiny_attention.then(AttentionCache::default),
        }
    }

    /// Scalars in the recurrent part: `n_layers·(2·d_model + n_heads·head_dim²)`.
    pub fn numel(&self) -> usize {
        self.layers.iter().map(BlockState::numel).sum()
    }

    /// Bytes of the recurrent part plus any attention cache.
    pub fn bytes(&self) -> usize {
        let cache = self.attention.as_ref().map_or(0, AttentionCache::numel);
        (self.numel() + cache) * std::mem::size_of::<T>()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let ok = self.layers.len() == config.n_layers
            && self.layers.iter().all(|l| {
                l.tm_shift.len() == config.d_model
                    && l.cm_shift.len() == config.d_model
                    && l.wkv.len() == config.n_heads
                    && l.wkv.iter().all(|s| s.head_dim() == config.head_dim)
            })
            && self.attention.is_some() == config.tiny_attention;
        if ok {
            Ok(())
        } else {
            Err(Error::State(
                "recurrent state does not match the model configuration".into(),
            ))
        }
    }
}

impl<T: Real> Model<T> {
    pub fn new_state(&self) -> RecurrentState<T> {
        RecurrentState::new(&self.config)
    }

    /// One-token advance; the given state is left untouched.
    pub fn forward_step(
        &self,
        token: u32,
        state: &RecurrentState<T>,
    ) -> Result<(Array1<T>, RecurrentState<T>)> {
        let mut next = state.clone();
        let logits = self.step_token(token, &mut next)?;
        Ok((logits, next))
    }

    pub fn step_token(&self, token: u32, state: &mut RecurrentState<T>) -> Result<Array1<T>> {
        if token as usize >= self.config.vocab_size {
            return Err(Error::Argument(format!(
                "token {token} outside the vocabulary"
            )));
        }
        let emb = self.store.mat(self.ids.emb);
        self.step_embedding(emb.row(token as usize), state)
    }

    /// Advances by one already embedded (pre-`ln0`) position.
    pub fn step_embedding(
        &self,
        x: ArrayView1<'_, T>,
        state: &mut RecurrentState<T>,
    ) -> Result<Array1<T>> {
        state.check(&self.config)?;
        let mut x = layer_norm(
            x,
            self.store.vec(self.ids.ln0_weight),
            self.store.vec(self.ids.ln0_bias),
        )?;
        for (block, layer) in self.ids.blocks.iter().zip(state.layers.iter_mut()) {
            x = block_step(x.view(), layer, &self.store, block, self.config.recurrence)?;
        }
        state.position += 1;
        self.finish_position(x, state)
    }

    /// Hybrid layer, final norm and head for one position in canonical order.
    fn finish_position(
        &self,
        mut x: Array1<T>,
        state: &mut RecurrentState<T>,
    ) -> Result<Array1<T>> {
        if let (Some(t), Some(cache)) = (&self.ids.tiny, state.attention.as_mut()) {
            let q = vec_mat(x.view(), self.store.mat(t.w_q));
            cache.keys.push(vec_mat(x.view(), self.store.mat(t.w_k)));
            cache.values.push(vec_mat(x.view(), self.store.mat(t.w_v)));
            let scale = T::one() / T::from_usize(q.len()).expect("width").sqrt();
            let scores: Vec<T> = cache.keys.iter().map(|k| q.dot(k) * scale).collect();
            let max = scores.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
            let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
            let z: T = exps.iter().copied().sum();
            let mut mixed = Array1::zeros(q.len());
            for (e, v) in exps.iter().zip(&cache.values) {
                mixed.scaled_add(*e / z, v);
            }
            x += &vec_mat(mixed.view(), self.store.mat(t.w_out));
        }
        let x = layer_norm(
            x.view(),
            self.store.vec(self.ids.ln_out_weight),
            self.store.vec(self.ids.ln_out_bias),
        )?;
        Ok(vec_mat(x.view(), self.store.mat(self.ids.head)))
    }

    /// Processes a whole image span: each layer consumes the buffered span
    /// in its own scan order, outputs are restored to grid order, then the
    /// positions are finished in grid order. Returns one logits row per
    /// token.
    pub fn step_image(
        &self,
        embeds: ArrayView2<'_, T>,
        h: usize,
        w: usize,
        state: &mut RecurrentState<T>,
    ) -> Result<Array2<T>> {
        state.check(&self.config)?;
        let n = embeds.nrows();
        if n != h * w {
            return Err(Error::Layout(format!(
                "{n} image embeddings for a {h}×{w} grid"
            )));
        }
        let (g0, b0) = (
            self.store.vec(self.ids.ln0_weight),
            self.store.vec(self.ids.ln0_bias),
        );
        let mut xs: Vec<Array1<T>> = embeds
            .rows()
            .into_iter()
            .map(|r| layer_norm(r, g0, b0))
            .collect::<Result<_>>()?;
        let schedule = self.schedule();
        for ((block, layer), dir) in self
            .ids
            .blocks
            .iter()
            .zip(state.layers.iter_mut())
            .zip(&schedule.directions)
        {
            let order = if *dir == ScanDirection::Forward {
                (0..n).collect()
            } else {
                scan_permutation(*dir, h, w)
            };
            let mut out = vec![Array1::zeros(0); n];
            for &i in &order {
                out[i] = block_step(
                    xs[i].view(),
                    layer,
                    &self.store,
                    block,
                    self.config.recurrence,
                )?;
            }
            xs = out;
        }
        state.position += n;
        let mut logits = Array2::zeros((n, self.config.vocab_size));
        for (i, x) in xs.into_iter().enumerate() {
            logits.row_mut(i).assign(&self.finish_position(x, state)?);
        }
        Ok(logits)
    }

    /// Streams a full input through a fresh state; returns every position's
    /// logits.
    pub fn forward_recurrent(&self, input: &ModelInput<T>) -> Result<Array2<T>> {
        let mut session = Session::new(self);
        session.feed(input)
    }

    /// Greedy decoding after the prompt until EOS or `max_new` tokens.
    pub fn generate(&self, prompt: &ModelInput<T>, max_new: usize) -> Result<Vec<u32>> {
        let mut session = Session::new(self);
        let logits = session.feed(prompt)?;
        let mut last = logits.row(logits.nrows() - 1).to_owned();
        let mut out = Vec::new();
        for _ in 0..max_new {
            let next = argmax(last.view()) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            last = session.step_token(next)?;
        }
        Ok(out)
    }
}

pub(crate) fn argmax<T: Real>(x: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// One inference session: a model reference and the state it owns.
pub struct Session<'m, T> {
    model: &'m Model<T>,
    state: RecurrentState<T>,
}

impl<'m, T: Real> Session<'m, T> {
    pub fn new(model: &'m Model<T>) -> Self {
        Self {
            model,
            state: model.new_state(),
        }
    }

    pub fn state(&self) -> &RecurrentState<T> {
        &self.state
    }

    pub fn step_token(&mut self, token: u32) -> Result<Array1<T>> {
        self.model.step_token(token, &mut self.state)
    }

    /// Feeds every position of `input` (answer span included when present).
    pub fn feed(&mut self, input: &ModelInput<T>) -> Result<Array2<T>> {
        input.check()?;
        let span = input.layout.image_span.clone();
        let mut logits = Array2::zeros((input.len(), self.model.config.vocab_size));
        let mut pos = 0;
        while pos < input.len() {
            if pos == span.start && !span.is_empty() {
                let grid = input.image.as_ref().expect("checked layout");
                let embeds = project_visual(grid, &self.model.projector_view())?;
                let rows = self
                    .model
                    .step_image(embeds.view(), grid.h, grid.w, &mut self.state)?;
                logits
                    .slice_mut(ndarray::s![span.clone(), ..])
                    .assign(&rows);
                pos = span.end;
                continue;
            }
            let Slot::Text(t) = input.layout.items[pos] else {
                unreachable!("checked layout")
            };
            logits
                .index_axis_mut(Axis(0), pos)
                .assign(&self.step_token(t)?);
            pos += 1;
        }
        Ok(logits)
    }
}
