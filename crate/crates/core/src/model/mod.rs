//! Whole-model assembly: configuration, parameter layout, parallel and
//! recurrent execution, losses, optimizer and checkpoint I/O.

mod checkpoint;
mod forward;
mod loss;
mod optim;
mod recurrent;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use forward::{sample_loss, tiny_attention, LossOutput};
pub use loss::{cross_entropy, loss_weights, Reduction};
pub use optim::{freeze_mask, lr_at, AdamW, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use recurrent::{AttentionCache, RecurrentState, Session};

use ndarray::{Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockDims, BlockParams, Variant};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::prompting::{
    truncation_indices, PromptLayout, PromptStrategy, PromptTemplate, BOS, EOS,
};
use crate::vision::{
    grid_position_codes, layer_direction_schedule, patch_embed, ImageGrid, ProjectorView, ScanMode,
    ScanSchedule,
};
use crate::{Error, Real, Result};

/// Colour channels of input images.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub d_vision: usize,
    pub patch: usize,
    pub lora_rank: usize,
    pub recurrence: Variant,
    pub scan_mode: ScanMode,
    pub prompt: PromptStrategy,
    #[serde(default)]
    pub tiny_attention: bool,
    #[serde(default)]
    pub tiny_attention_dim: Option<usize>,
}

impl ModelConfig {
    /// 64-wide, 4-layer configuration used by the harness.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            head_dim: 16,
            d_ffn: 256,
            vocab_size: crate::prompting::VOCAB_SIZE,
            d_vision: 48,
            patch: 4,
            lora_rank: 4,
            recurrence: Variant::Dd,
            scan_mode: ScanMode::Bi,
            prompt: PromptStrategy::Sandwich,
            tiny_attention: false,
            tiny_attention_dim: None,
        }
    }

    /// 16-wide, 2-layer configuration for fast numerical checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            head_dim: 8,
            d_ffn: 32,
            vocab_size: crate::prompting::VOCAB_SIZE,
            d_vision: 12,
            patch: 2,
            lora_rank: 1,
            ..Self::desk()
        }
    }

    /// `max(d_model / 16, 1)`, rounded up.
    pub fn default_lora_rank(d_model: usize) -> usize {
        d_model.div_ceil(16).max(1)
    }

    pub fn tiny_dim(&self) -> usize {
        self.tiny_attention_dim.unwrap_or((self.d_model / 4).max(1))
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            head_dim: self.head_dim,
            d_ffn: self.d_ffn,
            lora_rank: self.lora_rank,
        }
    }

    pub fn schedule(&self) -> ScanSchedule {
        layer_direction_schedule(self.scan_mode, self.n_layers)
    }

    /// Scalars held by a recurrent state (excluding any attention cache).
    pub fn state_numel(&self) -> usize {
        self.n_layers * (2 * self.d_model + self.n_heads * self.head_dim * self.head_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
            ("d_vision", self.d_vision),
            ("patch", self.patch),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_heads * self.head_dim != self.d_model {
            return Err(Error::Config(format!(
                "n_heads·head_dim = {}·{} does not equal d_model = {}",
                self.n_heads, self.head_dim, self.d_model
            )));
        }
        if self.head_dim < 2 {
            return Err(Error::DegenerateNorm(self.head_dim));
        }
        if self.lora_rank > self.d_model {
            return Err(Error::Config("lora_rank exceeds d_model".into()));
        }
        if self.d_ffn < self.d_model {
            return Err(Error::Config("d_ffn must be at least d_model".into()));
        }
        if self.vocab_size <= EOS as usize {
            return Err(Error::Config(
                "vocab_size must cover bytes and special tokens".into(),
            ));
        }
        if self.tiny_attention {
            let t = self.tiny_dim();
            if t == 0 || t >= self.d_model {
                return Err(Error::Config(format!(
                    "tiny attention width {t} must be in 1..{}",
                    self.d_model
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectorIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct TinyAttentionIds {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_out: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub patch_proj: ParamId,
    pub projector: ProjectorIds,
    pub emb: ParamId,
    pub ln0_weight: ParamId,
    pub ln0_bias: ParamId,
    pub blocks: Vec<BlockParams>,
    pub tiny: Option<TinyAttentionIds>,
    pub ln_out_weight: ParamId,
    pub ln_out_bias: ParamId,
    pub head: ParamId,
}

/// One position of a model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Text(u32),
    /// Row of the input's vision tokens.
    Image(usize),
}

/// A prompt with its (pre-projector) vision tokens.
#[derive(Debug, Clone)]
pub struct ModelInput<T> {
    pub layout: PromptLayout<Slot>,
    pub image: Option<ImageGrid<T>>,
}

impl<T: Real> ModelInput<T> {
    pub fn text(tokens: &[u32]) -> Self {
        let items: Vec<Slot> = tokens.iter().map(|&t| Slot::Text(t)).collect();
        let n = items.len();
        Self {
            layout: PromptLayout {
                items,
                image_span: 0..0,
                target_span: n..n,
            },
            image: None,
        }
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    /// Target token ids of the answer span.
    pub fn targets(&self) -> Vec<u32> {
        self.layout.items[self.layout.target_span.clone()]
            .iter()
            .map(|s| match s {
                Slot::Text(t) => *t,
                Slot::Image(_) => unreachable!("image slot inside the answer span"),
            })
            .collect()
    }

    pub(crate) fn check(&self) -> Result<()> {
        let span = &self.layout.image_span;
        let n_img = self.image.as_ref().map_or(0, ImageGrid::len);
        if span.len() != n_img {
            return Err(Error::Layout(format!(
                "image span {span:?} holds {} positions but {n_img} vision tokens were given",
                span.len()
            )));
        }
        for (i, s) in self.layout.items.iter().enumerate() {
            let inside = span.contains(&i);
            match s {
                Slot::Image(j) if !inside || *j != i - span.start => {
                    return Err(Error::Layout(format!(
                        "image slot {j} at position {i} outside canonical span order"
                    )));
                }
                Slot::Text(_) if inside => {
                    return Err(Error::Layout(format!(
                        "text slot at position {i} inside the image span"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub ids: ModelIds,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = register(&mut store, &mut rng, &config);
        Ok(Self { config, store, ids })
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_tensors(
        config: ModelConfig,
        tensors: Vec<(String, Vec<usize>, Vec<T>)>,
    ) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, configuration expects {}",
                tensors.len(),
                model.store.len()
            )));
        }
        for (name, shape, data) in tensors {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            let entry = model.store.entry(id);
            if entry.shape != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {shape:?}, configuration expects {:?}",
                    entry.shape
                )));
            }
            let dim = entry.value.dim();
            *model.store.get_mut(id) =
                Array2::from_shape_vec(dim, data).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(model)
    }

    pub fn schedule(&self) -> ScanSchedule {
        self.config.schedule()
    }

    pub fn projector_view(&self) -> ProjectorView<'_, T> {
        let p = &self.ids.projector;
        ProjectorView {
            w1: self.store.mat(p.w1),
            b1: self.store.vec(p.b1),
            w2: self.store.mat(p.w2),
            b2: self.store.vec(p.b2),
        }
    }

    /// Frozen patch embedding plus fixed grid position codes for an
    /// `h_px × w_px × 3` image.
    pub fn encode_image(&self, image: ArrayView3<'_, T>) -> Result<ImageGrid<T>> {
        if image.dim().2 != IMAGE_CHANNELS {
            return Err(crate::error::dim_err(
                "encode_image",
                format!("expected {IMAGE_CHANNELS} channels"),
            ));
        }
        let mut grid = patch_embed(
            image,
            self.config.patch,
            self.store.mat(self.ids.patch_proj),
        )?;
        grid.tokens += &grid_position_codes::<T>(grid.h, grid.w, self.config.d_vision);
        Ok(grid)
    }

    /// Builds `BOS + prompt` for an instruction template, optional vision
    /// tokens and optional answer (the answer is followed by EOS).
    pub fn build_input(
        &self,
        strategy: PromptStrategy,
        template: &str,
        image: Option<ImageGrid<T>>,
        answer: Option<&[u8]>,
    ) -> Result<ModelInput<T>> {
        let template = PromptTemplate::parse(template)?;
        let n_img = image.as_ref().map_or(0, ImageGrid::len);
        let vision: Vec<Slot> = (0..n_img).map(Slot::Image).collect();
        let answer: Vec<Slot> = match answer {
            Some(a) => a
                .iter()
                .map(|&b| Slot::Text(u32::from(b)))
                .chain(std::iter::once(Slot::Text(EOS)))
                .collect(),
            None => Vec::new(),
        };
        let encode = |s: &str| {
            s.bytes()
                .map(|b| Slot::Text(u32::from(b)))
                .collect::<Vec<_>>()
        };
        let layout = template
            .assemble(strategy, encode, &vision, &answer)?
            .prepend(Slot::Text(BOS));
        Ok(ModelInput { layout, image })
    }
}

/// Keeps `n` grid tokens by uniform stride. The subsampled tokens no longer
/// form a rectangle and are treated as a single `1 × n` row.
pub fn truncate_grid<T: Real>(grid: &ImageGrid<T>, n: usize) -> Result<ImageGrid<T>> {
    if n == grid.len() {
        return Ok(grid.clone());
    }
    let idx = truncation_indices(grid.len(), n)?;
    Ok(ImageGrid {
        h: 1,
        w: n,
        tokens: grid.tokens.select(ndarray::Axis(0), &idx),
    })
}

/// Converts an `h × w × 3` image to another element type.
pub fn cast_image<T: Real>(image: &Array3<f32>) -> Array3<T> {
    image.mapv(|v| T::of(f64::from(v)))
}

fn uniform<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::of(rng.gen_range(-bound..bound)))
}

fn register<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, c: &ModelConfig) -> ModelIds {
    let d = c.d_model;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let flat = c.patch * c.patch * IMAGE_CHANNELS;
    let patch_proj = store.add(
        "vision.patch_proj",
        ParamKind::Linear,
        uniform(rng, flat, c.d_vision, fan(flat)),
        2,
    );
    let projector = ProjectorIds {
        w1: store.add(
            "projector.w1",
            ParamKind::Linear,
            uniform(rng, c.d_vision, d, fan(c.d_vision)),
            2,
        ),
        b1: store.add("projector.b1", ParamKind::Bias, Array2::zeros((1, d)), 1),
        w2: store.add(
            "projector.w2",
            ParamKind::Linear,
            uniform(rng, d, d, fan(d)),
            2,
        ),
        b2: store.add("projector.b2", ParamKind::Bias, Array2::zeros((1, d)), 1),
    };
    let emb = store.add(
        "emb.weight",
        ParamKind::Embedding,
        uniform(rng, c.vocab_size, d, 1.0),
        2,
    );
    let ln0_weight = store.add("ln0.weight", ParamKind::Norm, Array2::ones((1, d)), 1);
    let ln0_bias = store.add("ln0.bias", ParamKind::Norm, Array2::zeros((1, d)), 1);
    let blocks = (0..c.n_layers)
        .map(|l| BlockParams::init(store, rng, &format!("blocks.{l}"), c.dims(), c.recurrence))
        .collect();
    let tiny = c.tiny_attention.then(|| {
        let t = c.tiny_dim();
        TinyAttentionIds {
            w_q: store.add(
                "tiny_attn.q.weight",
                ParamKind::Linear,
                uniform(rng, d, t, fan(d)),
                2,
            ),
            w_k: store.add(
                "tiny_attn.k.weight",
                ParamKind::Linear,
                uniform(rng, d, t, fan(d)),
                2,
            ),
            w_v: store.add(
                "tiny_attn.v.weight",
                ParamKind::Linear,
                uniform(rng, d, t, fan(d)),
                2,
            ),
            w_out: store.add(
                "tiny_attn.out.weight",
                ParamKind::Linear,
                uniform(rng, t, d, fan(t)),
                2,
            ),
        }
    });
    let ln_out_weight = store.add("ln_out.weight", ParamKind::Norm, Array2::ones((1, d)), 1);
    let ln_out_bias = store.add("ln_out.bias", ParamKind::Norm, Array2::zeros((1, d)), 1);
    let head = store.add(
        "head.weight",
        ParamKind::Linear,
        uniform(rng, d, c.vocab_size, fan(d)),
        2,
    );
    ModelIds {
        patch_proj,
        projector,
        emb,
        ln0_weight,
        ln0_bias,
        blocks,
        tiny,
        ln_out_weight,
        ln_out_bias,
        head,
    }
}
