use ndarray::Array2;
use rand::Rng;

use super::Variant;
use crate::kernels::{LoraParams, ShiftMix, ShiftParams};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::Real;

/// Shape parameters shared by every block of a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_ffn: usize,
    pub lora_rank: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LoraIds {
    pub lambda: ParamId,
    pub a: ParamId,
    pub b: ParamId,
}

impl LoraIds {
    pub fn view<'a, T: Real>(&self, store: &'a ParamStore<T>) -> LoraParams<'a, T> {
        LoraParams {
            lambda: store.vec(self.lambda),
            a: store.mat(self.a),
            b: store.mat(self.b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum MixIds {
    Static { mu: ParamId },
    Dynamic { mu_x: ParamId, lora: LoraIds },
}

/// One token-shift branch and its projection.
#[derive(Debug, Clone, Copy)]
pub struct BranchIds {
    pub mix: MixIds,
    pub w: ParamId,
}

impl BranchIds {
    pub fn view<'a, T: Real>(&self, store: &'a ParamStore<T>) -> ShiftParams<'a, T> {
        let mix = match self.mix {
            MixIds::Static { mu } => ShiftMix::Static { mu: store.vec(mu) },
            MixIds::Dynamic { mu_x, lora } => ShiftMix::Dynamic {
                mu_x: store.vec(mu_x),
                lora: lora.view(store),
            },
        };
        ShiftParams {
            mix,
            w: store.mat(self.w),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum DecayIds {
    /// Untransformed per-channel decay, all heads concatenated.
    Static { w_raw: ParamId },
    /// `decay(lora_d(ddlerp_d(x_t, x_prev)))`
    Dynamic {
        mu_x: ParamId,
        ddlerp: LoraIds,
        lora: LoraIds,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct TimeMixParams {
    pub r: BranchIds,
    pub k: BranchIds,
    pub v: BranchIds,
    pub g: BranchIds,
    /// Bonus, all heads concatenated.
    pub u: ParamId,
    pub decay: DecayIds,
    pub ln_x_weight: ParamId,
    pub ln_x_bias: ParamId,
    pub w_o: ParamId,
    pub n_heads: usize,
}

impl TimeMixParams {
    pub fn variant(&self) -> Variant {
        match self.decay {
            DecayIds::Static { .. } => Variant::Di,
            DecayIds::Dynamic { .. } => Variant::Dd,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelMixParams {
    pub r: BranchIds,
    pub k: BranchIds,
    pub w_v: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub ln1_weight: ParamId,
    pub ln1_bias: ParamId,
    pub att: TimeMixParams,
    pub ln2_weight: ParamId,
    pub ln2_bias: ParamId,
    pub ffn: ChannelMixParams,
}

fn row<T: Real>(values: impl IntoIterator<Item = f64>) -> Array2<T> {
    let v: Vec<T> = values.into_iter().map(T::of).collect();
    let n = v.len();
    Array2::from_shape_vec((1, n), v).expect("row shape")
}

/// Uniform `±1/sqrt(fan_in)` projection.
pub(crate) fn uniform_linear<T: Real>(
    rng: &mut impl Rng,
    fan_in: usize,
    fan_out: usize,
) -> Array2<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| T::of(rng.gen_range(-bound..bound)))
}

struct Builder<'s, T, R> {
    store: &'s mut ParamStore<T>,
    rng: &'s mut R,
    prefix: String,
    dims: BlockDims,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    fn vector(&mut self, suffix: &str, kind: ParamKind, values: Array2<T>) -> ParamId {
        let name = self.name(suffix);
        self.store.add(name, kind, values, 1)
    }

    fn linear(&mut self, suffix: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let w = uniform_linear(self.rng, fan_in, fan_out);
        let name = self.name(suffix);
        self.store.add(name, ParamKind::Linear, w, 2)
    }

    /// Per-channel ratios `i / d`.
    fn ramp(&self) -> Array2<T> {
        let d = self.dims.d_model;
        row((0..d).map(|i| i as f64 / d as f64))
    }

    fn lora(&mut self, suffix: &str, lambda: Array2<T>) -> LoraIds {
        let (d, r) = (self.dims.d_model, self.dims.lora_rank);
        let scale = 0.1 / (d as f64).sqrt();
        let a = Array2::from_shape_fn((d, r), |_| T::of(self.rng.gen_range(-scale..scale)));
        let lambda = self.vector(&format!("{suffix}.lambda"), ParamKind::Vector, lambda);
        let a = self
            .store
            .add(self.name(&format!("{suffix}.a")), ParamKind::Lora, a, 2);
        let b = self.store.add(
            self.name(&format!("{suffix}.b")),
            ParamKind::Lora,
            Array2::zeros((r, d)),
            2,
        );
        LoraIds { lambda, a, b }
    }

    fn mix(&mut self, branch: &str, variant: Variant) -> MixIds {
        let d = self.dims.d_model;
        match variant {
            Variant::Di => MixIds::Static {
                mu: self.vector(&format!("{branch}.mu"), ParamKind::Vector, self.ramp()),
            },
            Variant::Dd => {
                let mu_x = self.vector(&format!("{branch}.mu_x"), ParamKind::Vector, self.ramp());
                let lambda = row((0..d).map(|i| 1.0 - i as f64 / d as f64));
                let lora = self.lora(&format!("{branch}.lora"), lambda);
                MixIds::Dynamic { mu_x, lora }
            }
        }
    }

    fn branch(&mut self, branch: &str, variant: Variant, fan_out: usize) -> BranchIds {
        let mix = self.mix(branch, variant);
        let w = self.linear(&format!("{branch}.weight"), self.dims.d_model, fan_out);
        BranchIds { mix, w }
    }

    fn norm(&mut self, suffix: &str, width: usize) -> (ParamId, ParamId) {
        let w = self.vector(
            &format!("{suffix}.weight"),
            ParamKind::Norm,
            Array2::ones((1, width)),
        );
        let b = self.vector(
            &format!("{suffix}.bias"),
            ParamKind::Norm,
            Array2::zeros((1, width)),
        );
        (w, b)
    }
}

/// Untransformed decays whose transformed values sweep `(0.3, 0.99)`
/// across channels.
fn decay_init(d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let frac = if d > 1 {
                i as f64 / (d - 1) as f64
            } else {
                0.5
            };
            let w = 0.3 + 0.69 * (0.02 + 0.96 * frac);
            (-w.ln()).ln()
        })
        .collect()
}

impl BlockParams {
    /// Registers one block's tensors under `prefix` (e.g. `blocks.0`).
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        dims: BlockDims,
        variant: Variant,
    ) -> Self {
        assert_eq!(dims.n_heads * dims.head_dim, dims.d_model, "head layout");
        let mut b = Builder {
            store,
            rng,
            prefix: prefix.to_string(),
            dims,
        };
        let d = dims.d_model;
        let (ln1_weight, ln1_bias) = b.norm("ln1", d);
        let r = b.branch("att.r", variant, d);
        let k = b.branch("att.k", variant, d);
        let v = b.branch("att.v", variant, d);
        let g = b.branch("att.g", variant, d);
        let hd = dims.head_dim;
        let u = b.vector(
            "att.u",
            ParamKind::Vector,
            row((0..d).map(|i| 0.1 + 0.4 * (i % hd) as f64 / hd as f64)),
        );
        let decay = match variant {
            Variant::Di => DecayIds::Static {
                w_raw: b.vector("att.w_raw", ParamKind::Vector, row(decay_init(d))),
            },
            Variant::Dd => {
                let mu_x = b.vector("att.decay.mu_x", ParamKind::Vector, b.ramp());
                let lambda = row((0..d).map(|i| 1.0 - i as f64 / d as f64));
                let ddlerp = b.lora("att.decay.ddlerp", lambda);
                let lora = b.lora("att.decay.lora", row(decay_init(d)));
                DecayIds::Dynamic { mu_x, ddlerp, lora }
            }
        };
        let (ln_x_weight, ln_x_bias) = b.norm("att.ln_x", d);
        let w_o = b.linear("att.output.weight", d, d);
        let (ln2_weight, ln2_bias) = b.norm("ln2", d);
        let fr = b.branch("ffn.r", Variant::Di, d);
        let fk = b.branch("ffn.k", Variant::Di, dims.d_ffn);
        let w_v = b.linear("ffn.value.weight", dims.d_ffn, d);
        BlockParams {
            ln1_weight,
            ln1_bias,
            att: TimeMixParams {
                r,
                k,
                v,
                g,
                u,
                decay,
                ln_x_weight,
                ln_x_bias,
                w_o,
                n_heads: dims.n_heads,
            },
            ln2_weight,
            ln2_bias,
            ffn: ChannelMixParams { r: fr, k: fk, w_v },
        }
    }

    /// Looks up the ids of a block previously registered under `prefix`.
    pub fn bind<T: Real>(
        store: &ParamStore<T>,
        prefix: &str,
        dims: BlockDims,
        variant: Variant,
    ) -> Option<Self> {
        let id = |s: &str| store.id(&format!("{prefix}.{s}"));
        let lora = |s: &str| -> Option<LoraIds> {
            Some(LoraIds {
                lambda: id(&format!("{s}.lambda"))?,
                a: id(&format!("{s}.a"))?,
                b: id(&format!("{s}.b"))?,
            })
        };
        let branch = |s: &str, variant: Variant| -> Option<BranchIds> {
            let mix = match variant {
                Variant::Di => MixIds::Static {
                    mu: id(&format!("{s}.mu"))?,
                },
                Variant::Dd => MixIds::Dynamic {
                    mu_x: id(&format!("{s}.mu_x"))?,
                    lora: lora(&format!("{s}.lora"))?,
                },
            };
            Some(BranchIds {
                mix,
                w: id(&format!("{s}.weight"))?,
            })
        };
        let decay = match variant {
            Variant::Di => DecayIds::Static {
                w_raw: id("att.w_raw")?,
            },
            Variant::Dd => DecayIds::Dynamic {
                mu_x: id("att.decay.mu_x")?,
                ddlerp: lora("att.decay.ddlerp")?,
                lora: lora("att.decay.lora")?,
            },
        };
        Some(BlockParams {
            ln1_weight: id("ln1.weight")?,
            ln1_bias: id("ln1.bias")?,
            att: TimeMixParams {
                r: branch("att.r", variant)?,
                k: branch("att.k", variant)?,
                v: branch("att.v", variant)?,
                g: branch("att.g", variant)?,
                u: id("att.u")?,
                decay,
                ln_x_weight: id("att.ln_x.weight")?,
                ln_x_bias: id("att.ln_x.bias")?,
                w_o: id("att.output.weight")?,
                n_heads: dims.n_heads,
            },
            ln2_weight: id("ln2.weight")?,
            ln2_bias: id("ln2.bias")?,
            ffn: ChannelMixParams {
                r: branch("ffn.r", Variant::Di)?,
                k: branch("ffn.k", Variant::Di)?,
                w_v: id("ffn.value.weight")?,
            },
        })
    }
}
