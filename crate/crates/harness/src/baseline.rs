//! Naive causal-attention language model with a growing KV cache, used as
//! the comparison target for constant-state inference.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visualrwkv::kernels::vec_mat;
use visualrwkv::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ffn + self.d_ffn + d + 4 * d;
        2 * self.vocab_size * d + self.n_layers * per_layer + 2 * d
    }

    /// Same width, depth and heads as `rwkv`, with the feed-forward width
    /// chosen so the parameter count is as close as possible to the RWKV
    /// language model's (vision and projector excluded).
    pub fn matched(rwkv: &ModelConfig) -> Self {
        let target = rwkv_language_params(rwkv);
        let mut best = Self {
            d_model: rwkv.d_model,
            n_layers: rwkv.n_layers,
            n_heads: rwkv.n_heads,
            d_ffn: rwkv.d_model,
            vocab_size: rwkv.vocab_size,
        };
        let mut best_gap = usize::MAX;
        for d_ffn in rwkv.d_model..=16 * rwkv.d_ffn {
            let c = Self { d_ffn, ..best };
            let gap = c.param_count().abs_diff(target);
            if gap < best_gap {
                best_gap = gap;
                best = c;
            }
        }
        best
    }
}

/// Parameters of the RWKV language model: everything except the patch
/// embedder and the projector.
pub fn rwkv_language_params(config: &ModelConfig) -> usize {
    let model =
        visualrwkv::model::Model::<f32>::new(config.clone(), 0).expect("valid configuration");
    model
        .store
        .entries()
        .filter(|(_, e)| !e.name.starts_with("vision.") && !e.name.starts_with("projector."))
        .map(|(_, e)| e.value.len())
        .sum()
}

struct Layer {
    ln1: (Array1<f32>, Array1<f32>),
    w_q: Array2<f32>,
    w_k: Array2<f32>,
    w_v: Array2<f32>,
    w_o: Array2<f32>,
    ln2: (Array1<f32>, Array1<f32>),
    w_1: Array2<f32>,
    b_1: Array1<f32>,
    w_2: Array2<f32>,
    b_2: Array1<f32>,
}

pub struct AttentionModel {
    pub config: AttentionConfig,
    emb: Array2<f32>,
    layers: Vec<Layer>,
    ln_out: (Array1<f32>, Array1<f32>),
    head: Array2<f32>,
}

/// Keys and values of every processed position, per layer, row-major
/// `t × d_model`.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> usize {
        self.keys
            .iter()
            .chain(&self.values)
            .map(Vec::len)
            .sum::<usize>()
            * std::mem::size_of::<f32>()
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    let b = 1.0 / (rows as f32).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-b..b))
}

fn norm_params(d: usize) -> (Array1<f32>, Array1<f32>) {
    (Array1::ones(d), Array1::zeros(d))
}

fn layer_norm(x: &Array1<f32>, (g, b): &(Array1<f32>, Array1<f32>)) -> Array1<f32> {
    let n = x.len() as f32;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.mapv(|v| (v - mean) * inv) * g + b
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

impl AttentionModel {
    pub fn new(config: AttentionConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                ln1: norm_params(d),
                w_q: uniform(&mut rng, d, d),
                w_k: uniform(&mut rng, d, d),
                w_v: uniform(&mut rng, d, d),
                w_o: uniform(&mut rng, d, d),
                ln2: norm_params(d),
                w_1: uniform(&mut rng, d, config.d_ffn),
                b_1: Array1::zeros(config.d_ffn),
                w_2: uniform(&mut rng, config.d_ffn, d),
                b_2: Array1::zeros(d),
            })
            .collect();
        Self {
            config,
            emb: Array2::from_shape_fn((config.vocab_size, d), |_| rng.gen_range(-1.0..1.0)),
            layers,
            ln_out: norm_params(d),
            head: uniform(&mut rng, d, config.vocab_size),
        }
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache {
            keys: vec![Vec::new(); self.config.n_layers],
            values: vec![Vec::new(); self.config.n_layers],
            len: 0,
        }
    }

    /// Processes one token, appending its keys and values to the cache.
    /// Returns the logits and the number of multiply-adds performed.
    pub fn step(&self, cache: &mut KvCache, token: u32) -> (Array1<f32>, u64) {
        let c = &self.config;
        let (d, hd) = (c.d_model, c.head_dim());
        let mut ops = 0u64;
        let mut x = self.emb.row(token as usize).to_owned();
        let t = cache.len + 1;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut scores = vec![0.0f32; t];
        for (l, layer) in self.layers.iter().enumerate() {
            let h = layer_norm(&x, &layer.ln1);
            let q = vec_mat(h.view(), layer.w_q.view());
            let k = vec_mat(h.view(), layer.w_k.view());
            let v = vec_mat(h.view(), layer.w_v.view());
            ops += 3 * (d * d) as u64;
            cache.keys[l].extend(k.iter());
            cache.values[l].extend(v.iter());
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let mut att = Array1::<f32>::zeros(d);
            for head in 0..c.n_heads {
                let off = head * hd;
                let qh = &q.as_slice().expect("contiguous")[off..off + hd];
                let mut max = f32::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + off..j * d + off + hd];
                    *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let out = &mut att.as_slice_mut().expect("contiguous")[off..off + hd];
                for (j, s) in scores.iter().enumerate() {
                    let p = s / z;
                    let vj = &values[j * d + off..j * d + off + hd];
                    for (o, v) in out.iter_mut().zip(vj) {
                        *o += p * v;
                    }
                }
                ops += 2 * (t * hd) as u64;
            }
            x = x + vec_mat(att.view(), layer.w_o.view());
            let h = layer_norm(&x, &layer.ln2);
            let hidden = (vec_mat(h.view(), layer.w_1.view()) + &layer.b_1).mapv(gelu);
            x = x + vec_mat(hidden.view(), layer.w_2.view()) + &layer.b_2;
            ops += (d * d + 2 * d * c.d_ffn) as u64;
        }
        cache.len = t;
        let logits = vec_mat(layer_norm(&x, &self.ln_out).view(), self.head.view());
        ops += (d * c.vocab_size) as u64;
        (logits, ops)
    }

    /// Bytes of per-step temporaries at cache length `t`.
    pub fn activation_bytes(&self, t: usize) -> usize {
        let c = &self.config;
        (6 * c.d_model + t + c.d_ffn + c.vocab_size) * std::mem::size_of::<f32>()
    }
}
