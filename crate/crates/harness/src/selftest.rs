//! Fast oracle checks over the kernels, blocks, scans, loss weights,
//! checkpoint format and whole-model equivalences.

use anyhow::{ensure, Context};
use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visualrwkv::autograd::Tape;
use visualrwkv::blocks::{block_seq, BlockDims, BlockParams, ParamVars, Variant};
use visualrwkv::kernels::{
    decay_transform, decay_transform_scalar, kernel_backward, kernel_forward, wkv_dd_parallel,
    wkv_dd_step, wkv_di_parallel, wkv_di_step, HeadParams, KernelOp, TensorMap, WkvState,
};
use visualrwkv::model::{
    loss_weights, read_checkpoint, write_checkpoint, Model, ModelConfig, Reduction,
};
use visualrwkv::params::ParamStore;
use visualrwkv::prompting::PromptStrategy;
use visualrwkv::vision::{inverse_permutation, scan_permutation, ScanDirection, ScanMode};

#[derive(Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub outcome: Result<String, String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }
}

type Check = fn(&mut ChaCha8Rng) -> anyhow::Result<String>;

const CHECKS: [(&str, Check); 10] = [
    ("wkv parallel vs recurrent vs direct sum", wkv_equivalence),
    ("constant decay reduces dd to di", dd_reduces_to_di),
    ("kernel gradients", kernel_gradients),
    ("block gradients", block_gradients),
    ("decay contraction", decay_contraction),
    ("scan permutations", scan_permutations),
    ("loss weights", loss_weight_golden),
    ("model recurrent vs parallel", model_equivalence),
    ("checkpoint round trip", checkpoint_round_trip),
    ("hybrid with zero output projection", hybrid_zero_output),
];

/// Runs every check with a fixed seed.
pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|&(name, check)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let outcome =
                std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut rng)))
                    .unwrap_or_else(|_| Err(anyhow::anyhow!("panicked")));
            CheckResult {
                name,
                outcome: outcome.map_err(|e| format!("{e:#}")),
            }
        })
        .collect()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.gen_range(lo..hi))
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(lo..hi))
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// `diag(u)·k_tᵀv_t + Σ_{i<t} diag(Π_{i<j<t} w_j)·k_iᵀv_i`, summed directly.
fn direct_wkv(
    k: &Array2<f64>,
    v: &Array2<f64>,
    u: &Array1<f64>,
    w: &Array2<f64>,
) -> Vec<Array2<f64>> {
    let (len, n) = k.dim();
    (0..len)
        .map(|t| {
            Array2::from_shape_fn((n, n), |(c, j)| {
                let mut acc = u[c] * k[[t, c]] * v[[t, j]];
                for i in 0..t {
                    let decay: f64 = (i + 1..t).map(|s| w[[s, c]]).product();
                    acc += decay * k[[i, c]] * v[[i, j]];
                }
                acc
            })
        })
        .collect()
}

fn wkv_equivalence(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let len = rng.gen_range(1..48);
        let n = rng.gen_range(1..9);
        let k = rand_mat(rng, len, n, -1.0, 1.0);
        let v = rand_mat(rng, len, n, -1.0, 1.0);
        let u = rand_vec(rng, n, -1.0, 1.0);
        let w_raw = rand_vec(rng, n, -3.0, 1.0);
        let w_dd = rand_mat(rng, len, n, 0.05, 0.999);

        let p = HeadParams {
            u: u.view(),
            w_raw: w_raw.view(),
        };
        let parallel = wkv_di_parallel(k.view(), v.view(), &p)?;
        let w_const = decay_transform(w_raw.view());
        let w_rows = Array2::from_shape_fn((len, n), |(_, c)| w_const[c]);
        let direct = direct_wkv(&k, &v, &u, &w_rows);
        let mut s = WkvState::zeros(n);
        for t in 0..len {
            let (out, next) = wkv_di_step(&s, k.row(t), v.row(t), &p)?;
            worst = worst
                .max(max_abs_diff(&out, &parallel[t]))
                .max(max_abs_diff(&out, &direct[t]));
            s = next;
        }

        let parallel = wkv_dd_parallel(k.view(), v.view(), u.view(), w_dd.view())?;
        let direct = direct_wkv(&k, &v, &u, &w_dd);
        let mut s = WkvState::zeros(n);
        for t in 0..len {
            let (out, next) = wkv_dd_step(&s, k.row(t), v.row(t), u.view(), w_dd.row(t))?;
            worst = worst
                .max(max_abs_diff(&out, &parallel[t]))
                .max(max_abs_diff(&out, &direct[t]));
            s = next;
        }
    }
    ensure!(worst <= 1e-10, "max abs difference {worst:e}");
    Ok(format!("max abs difference {worst:.2e}"))
}

fn dd_reduces_to_di(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let mut worst = 0.0_f64;
    for _ in 0..10 {
        let len = rng.gen_range(1..64);
        let n = rng.gen_range(1..9);
        let k = rand_mat(rng, len, n, -1.0, 1.0);
        let v = rand_mat(rng, len, n, -1.0, 1.0);
        let u = rand_vec(rng, n, -1.0, 1.0);
        let w_raw = rand_vec(rng, n, -3.0, 1.0);
        let w = decay_transform(w_raw.view());
        let w_rows = Array2::from_shape_fn((len, n), |(_, c)| w[c]);
        let di = wkv_di_parallel(
            k.view(),
            v.view(),
            &HeadParams {
                u: u.view(),
                w_raw: w_raw.view(),
            },
        )?;
        let dd = wkv_dd_parallel(k.view(), v.view(), u.view(), w_rows.view())?;
        for (a, b) in di.iter().zip(&dd) {
            worst = worst.max(max_abs_diff(a, b));
        }
    }
    ensure!(worst <= 1e-12, "max abs difference {worst:e}");
    Ok(format!("max abs difference {worst:.2e}"))
}

fn dyn_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> ArrayD<f64> {
    rand_vec(rng, n, lo, hi).into_dyn()
}

fn dyn_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> ArrayD<f64> {
    rand_mat(rng, r, c, lo, hi).into_dyn()
}

fn kernel_inputs(op: KernelOp, rng: &mut ChaCha8Rng) -> TensorMap<f64> {
    let n = rng.gen_range(2..6);
    let rank = rng.gen_range(1..=n);
    let m = rng.gen_range(1..5);
    let len = rng.gen_range(1..7);
    let mut map = TensorMap::new();
    for &name in op.inputs() {
        let value = match (op, name) {
            (_, "w") if op == KernelOp::WkvSequence => dyn_mat(rng, len, n, 0.1, 0.95),
            (_, "w") => dyn_mat(rng, n, m, -1.0, 1.0),
            (_, "r" | "k" | "v") if op == KernelOp::WkvSequence => dyn_mat(rng, len, n, -1.0, 1.0),
            (_, "a" | "lora_a" | "ddlerp_a" | "decay_a")
                if op != KernelOp::Ddlerp || name != "a" =>
            {
                dyn_mat(rng, n, rank, -1.0, 1.0)
            }
            (_, "b" | "lora_b" | "ddlerp_b" | "decay_b")
                if op != KernelOp::Ddlerp || name != "b" =>
            {
                dyn_mat(rng, rank, n, -1.0, 1.0)
            }
            (_, "state") => dyn_mat(rng, n, n, -1.0, 1.0),
            (_, "w_t") => dyn_vec(rng, n, 0.1, 0.95),
            (_, "d" | "w_raw") => dyn_vec(rng, n, -2.0, 1.0),
            _ => dyn_vec(rng, n, -1.0, 1.0),
        };
        map.insert(name.to_string(), value);
    }
    map
}

fn weighted_output(
    op: KernelOp,
    inputs: &TensorMap<f64>,
    weights: &TensorMap<f64>,
) -> anyhow::Result<f64> {
    let out = kernel_forward(op, inputs)?;
    Ok(weights.iter().map(|(name, c)| (&out[name] * c).sum()).sum())
}

/// Norm-wise relative error between analytic and central-difference
/// gradients of a random linear functional of the outputs.
pub fn kernel_gradient_error(op: KernelOp, rng: &mut ChaCha8Rng, h: f64) -> anyhow::Result<f64> {
    let inputs = kernel_inputs(op, rng);
    let out = kernel_forward(op, &inputs)?;
    let weights: TensorMap<f64> = out
        .iter()
        .map(|(name, y)| {
            (
                name.clone(),
                ArrayD::from_shape_fn(y.raw_dim(), |_| rng.gen_range(-1.0..1.0)),
            )
        })
        .collect();
    let analytic = kernel_backward(op, &inputs, &weights)?;
    let (mut diff, mut scale) = (0.0_f64, 0.0_f64);
    for (name, x) in &inputs {
        let g = analytic
            .get(name)
            .with_context(|| format!("{} has no gradient for {name}", op.name()))?;
        ensure!(
            g.shape() == x.shape(),
            "{}: gradient shape of {name}",
            op.name()
        );
        for idx in ndarray::indices(x.raw_dim()) {
            let idx: IxDyn = idx;
            let mut probe = inputs.clone();
            let at = |p: &mut TensorMap<f64>, delta: f64| {
                p.get_mut(name).expect("input")[idx.clone()] = x[idx.clone()] + delta;
            };
            at(&mut probe, h);
            let plus = weighted_output(op, &probe, &weights)?;
            at(&mut probe, -h);
            let minus = weighted_output(op, &probe, &weights)?;
            let numeric = (plus - minus) / (2.0 * h);
            diff += (g[idx.clone()] - numeric).powi(2);
            scale += g[idx].powi(2).max(numeric.powi(2));
        }
    }
    Ok(diff.sqrt() / scale.sqrt().max(1e-12))
}

fn kernel_gradients(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let mut worst = 0.0_f64;
    for op in KernelOp::ALL {
        for _ in 0..5 {
            let e = kernel_gradient_error(op, rng, 1e-5)?;
            ensure!(e <= 1e-4, "{}: relative error {e:e}", op.name());
            worst = worst.max(e);
        }
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

/// Relative error of taped block gradients against central differences on
/// `probes` random parameter entries.
pub fn block_gradient_error(
    variant: Variant,
    rng: &mut ChaCha8Rng,
    probes: usize,
    h: f64,
) -> anyhow::Result<f64> {
    let n_heads = rng.gen_range(1..3);
    let head_dim = rng.gen_range(2..5);
    let d_model = n_heads * head_dim;
    let dims = BlockDims {
        d_model,
        n_heads,
        head_dim,
        d_ffn: d_model + rng.gen_range(0..5),
        lora_rank: rng.gen_range(1..=d_model),
    };
    let mut store = ParamStore::<f64>::new();
    let params = BlockParams::init(&mut store, rng, "b", dims, variant);
    let ids: Vec<_> = store.entries().map(|(id, _)| id).collect();
    for &id in &ids {
        let v = store.get_mut(id);
        let noise = Array2::from_shape_fn(v.dim(), |_| rng.gen_range(-0.3..0.3));
        *v += &noise;
    }
    let len = rng.gen_range(1..7);
    let x = rand_mat(rng, len, d_model, -1.0, 1.0);
    let c = rand_mat(rng, len, d_model, -1.0, 1.0);
    let loss =
        |store: &ParamStore<f64>, grads: bool| -> anyhow::Result<(f64, Option<Vec<Array2<f64>>>)> {
            let mut tape = Tape::new();
            let pv = ParamVars::bind(&mut tape, store, |_| grads);
            let xv = tape.constant(x.clone());
            let y = block_seq(&mut tape, &pv, &params, variant, xv)?;
            let l = tape.weighted_sum(y, c.clone());
            let value = tape.value(l)[[0, 0]];
            if !grads {
                return Ok((value, None));
            }
            let g = tape.backward(l);
            let all = ids
                .iter()
                .map(|&id| {
                    g.get(pv.get(id))
                        .cloned()
                        .unwrap_or_else(|| Array2::zeros(store.get(id).dim()))
                })
                .collect();
            Ok((value, Some(all)))
        };
    let (_, grads) = loss(&store, true)?;
    let grads = grads.expect("gradients");
    let (mut diff, mut scale) = (0.0_f64, 0.0_f64);
    for _ in 0..probes {
        let which = rng.gen_range(0..ids.len());
        let id = ids[which];
        let (r, col) = {
            let (nr, nc) = store.get(id).dim();
            (rng.gen_range(0..nr), rng.gen_range(0..nc))
        };
        let mut probe = store.clone();
        probe.get_mut(id)[[r, col]] += h;
        let plus = loss(&probe, false)?.0;
        probe.get_mut(id)[[r, col]] -= 2.0 * h;
        let minus = loss(&probe, false)?.0;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[which][[r, col]];
        diff += (analytic - numeric).powi(2);
        scale += analytic.powi(2).max(numeric.powi(2));
    }
    Ok(diff.sqrt() / scale.sqrt().max(1e-12))
}

fn block_gradients(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let mut worst = 0.0_f64;
    for variant in [Variant::Di, Variant::Dd] {
        for _ in 0..3 {
            let e = block_gradient_error(variant, rng, 20, 1e-5)?;
            ensure!(e <= 1e-4, "{variant:?} block: relative error {e:e}");
            worst = worst.max(e);
        }
    }
    Ok(format!("worst relative error {worst:.2e}"))
}

fn decay_contraction(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let n = 100_000;
    for _ in 0..n {
        let d: f64 = rng.gen_range(-1.0..1.0) * 10f64.powi(rng.gen_range(-10..300));
        let w = decay_transform_scalar(d);
        ensure!(w > 0.0 && w < 1.0, "d = {d:e} maps to {w:e}");
        let w32 = decay_transform_scalar(d as f32);
        ensure!(w32 > 0.0 && w32 < 1.0, "d = {d:e} maps to {w32:e} in f32");
    }
    Ok(format!("{n} inputs"))
}

fn scan_permutations(_: &mut ChaCha8Rng) -> anyhow::Result<String> {
    for h in 1..=16 {
        for w in 1..=16 {
            let perm = |d| scan_permutation(d, h, w);
            for d in ScanDirection::ALL {
                let p = perm(d);
                let mut sorted = p.clone();
                sorted.sort_unstable();
                ensure!(
                    sorted == (0..h * w).collect::<Vec<_>>(),
                    "{d:?} on {h}×{w} is not a bijection"
                );
                let inv = inverse_permutation(&p);
                ensure!(
                    p.iter().map(|&i| inv[i]).eq(0..h * w),
                    "{d:?} inverse on {h}×{w}"
                );
            }
            let rev = |mut v: Vec<usize>| {
                v.reverse();
                v
            };
            ensure!(
                perm(ScanDirection::Backward) == rev(perm(ScanDirection::Forward)),
                "backward on {h}×{w}"
            );
            ensure!(
                perm(ScanDirection::Upward) == rev(perm(ScanDirection::Downward)),
                "upward on {h}×{w}"
            );
        }
    }
    Ok("h, w ≤ 16".into())
}

fn loss_weight_golden(_: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let lengths = [100, 200, 300, 400];
    let pairs = |r: Reduction| -> anyhow::Result<Vec<(u64, u64)>> {
        Ok(loss_weights(&lengths, r, 4)?
            .iter()
            .map(|w| (*w.numer(), *w.denom()))
            .collect())
    };
    let batch = pairs(Reduction::Batch)?;
    ensure!(batch == vec![(1, 1000); 4], "batch weights {batch:?}");
    let sample = pairs(Reduction::Sample)?;
    ensure!(
        sample == vec![(1, 400), (1, 800), (1, 1200), (1, 1600)],
        "sample weights {sample:?}"
    );
    Ok("exact".into())
}

fn scrambled(config: ModelConfig, rng: &mut ChaCha8Rng) -> anyhow::Result<Model<f64>> {
    let mut model = Model::<f64>::new(config, rng.gen())?;
    let ids: Vec<_> = model.store.entries().map(|(id, _)| id).collect();
    for id in ids {
        let v = model.store.get_mut(id);
        let noise = Array2::from_shape_fn(v.dim(), |_| rng.gen_range(-0.2..0.2));
        *v += &noise;
    }
    Ok(model)
}

fn model_equivalence(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let mut worst = 0.0_f64;
    for mode in ScanMode::ALL {
        for strategy in PromptStrategy::ALL {
            let config = ModelConfig {
                scan_mode: mode,
                prompt: strategy,
                ..ModelConfig::tiny()
            };
            let model = scrambled(config, rng)?;
            let side = model.config.patch;
            let image = Array3::from_shape_fn((3 * side, 2 * side, 3), |_| rng.gen_range(0.0..1.0));
            let grid = model.encode_image(image.view())?;
            let input =
                model.build_input(strategy, "cell <image> colour?", Some(grid), Some(b"red"))?;
            let parallel = model.forward_parallel(&input)?;
            let recurrent = model.forward_recurrent(&input)?;
            worst = worst.max(max_abs_diff(&parallel, &recurrent));
        }
    }
    ensure!(worst <= 1e-8, "max abs logit difference {worst:e}");
    Ok(format!("max abs logit difference {worst:.2e}"))
}

fn checkpoint_round_trip(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let model = Model::<f32>::new(ModelConfig::desk(), rng.gen())?;
    let mut bytes = Vec::new();
    write_checkpoint(&mut bytes, &model)?;
    let back: Model<f32> = read_checkpoint(bytes.as_slice())?;
    ensure!(back.config == model.config, "configuration changed");
    for ((_, a), (_, b)) in model.store.entries().zip(back.store.entries()) {
        ensure!(
            a.name == b.name && a.shape == b.shape,
            "tensor table changed at {}",
            a.name
        );
        ensure!(
            a.value
                .iter()
                .zip(&b.value)
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "{} differs",
            a.name
        );
    }
    Ok(format!("{} bytes", bytes.len()))
}

fn hybrid_zero_output(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let config = ModelConfig {
        tiny_attention: true,
        ..ModelConfig::tiny()
    };
    let mut hybrid = scrambled(config.clone(), rng)?;
    let out = hybrid
        .ids
        .tiny
        .context("hybrid model has no attention layer")?
        .w_out;
    hybrid.store.get_mut(out).fill(0.0);
    let tensors = hybrid
        .store
        .entries()
        .filter(|(_, e)| !e.name.starts_with("tiny_attn."))
        .map(|(_, e)| {
            (
                e.name.clone(),
                e.shape.clone(),
                e.value.iter().copied().collect(),
            )
        })
        .collect();
    let plain = Model::<f64>::from_tensors(
        ModelConfig {
            tiny_attention: false,
            ..config
        },
        tensors,
    )?;
    let tokens: Vec<u32> = (0..24).map(|_| rng.gen_range(0..256)).collect();
    let input = visualrwkv::model::ModelInput::text(&tokens);
    let a = hybrid.forward_parallel(&input)?;
    let b = plain.forward_parallel(&input)?;
    ensure!(a == b, "max abs difference {:e}", max_abs_diff(&a, &b));
    Ok("bit-identical logits".into())
}
