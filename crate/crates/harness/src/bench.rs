//! Per-token latency and memory sweeps for the recurrent model and the
//! attention baseline.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;
use visualrwkv::model::{Model, ModelConfig};

use crate::baseline::{AttentionConfig, AttentionModel};
use crate::eval::argmax;

/// Sequence lengths of the default sweep.
pub const LENGTHS: [usize; 9] = [128, 256, 512, 1024, 2048, 4096, 8192, 16384, 24576];

/// Per-token latency is the median over this many most recent steps.
pub const LATENCY_WINDOW: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Rwkv,
    Attention,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rwkv => "rwkv",
            Self::Attention => "attention",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rwkv" => Ok(Self::Rwkv),
            "attention" => Ok(Self::Attention),
            other => Err(format!(
                "unknown model kind {other:?} (expected rwkv or attention)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    #[serde(rename = "model")]
    pub model_kind: String,
    pub seq_len: usize,
    #[serde(rename = "per_token_ns")]
    pub per_token_latency_ns: u64,
    #[serde(rename = "cum_ms")]
    pub cumulative_time_ms: f64,
    pub state_bytes: usize,
    pub activation_bytes: usize,
}

/// The default ladder cut at `max_len`, with `max_len` itself appended when
/// it is not a rung.
pub fn lengths_up_to(max_len: usize) -> Vec<usize> {
    let mut v: Vec<usize> = LENGTHS.iter().copied().filter(|&l| l <= max_len).collect();
    if v.last() != Some(&max_len) && max_len > 0 {
        v.push(max_len);
    }
    v
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    let n = xs.len();
    if n == 0 {
        0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

/// Generates one greedy stream up to the longest length, recording a row at
/// every requested length. `lengths` must be ascending.
pub fn bench_sweep(
    kind: ModelKind,
    lengths: &[usize],
    config: &ModelConfig,
    seed: u64,
) -> anyhow::Result<Vec<BenchRecord>> {
    anyhow::ensure!(
        lengths.windows(2).all(|w| w[0] < w[1]),
        "lengths must be ascending"
    );
    let Some(&max_len) = lengths.last() else {
        return Ok(Vec::new());
    };
    let mut durations = Vec::with_capacity(max_len);
    let mut records = Vec::with_capacity(lengths.len());
    let mut next = lengths.iter().peekable();
    let mut token = visualrwkv::prompting::BOS;
    let record = |t: usize, durations: &Vec<u64>, state_bytes: usize, activation_bytes: usize| {
        let window = durations[t.saturating_sub(LATENCY_WINDOW)..t].to_vec();
        BenchRecord {
            model_kind: kind.name().to_string(),
            seq_len: t,
            per_token_latency_ns: median(window),
            cumulative_time_ms: durations[..t].iter().sum::<u64>() as f64 / 1e6,
            state_bytes,
            activation_bytes,
        }
    };
    match kind {
        ModelKind::Rwkv => {
            let model = Model::<f32>::new(config.clone(), seed)?;
            let mut state = model.new_state();
            let c = &model.config;
            let activation = (7 * c.d_model + c.d_ffn + c.vocab_size) * std::mem::size_of::<f32>();
            for t in 1..=max_len {
                let start = Instant::now();
                let logits = model.step_token(token, &mut state)?;
                token = argmax(logits.view());
                durations.push(start.elapsed().as_nanos() as u64);
                if next.peek() == Some(&&t) {
                    next.next();
                    records.push(record(t, &durations, state.bytes(), activation));
                }
            }
        }
        ModelKind::Attention => {
            let model = AttentionModel::new(AttentionConfig::matched(config), seed);
            let mut cache = model.new_cache();
            for t in 1..=max_len {
                let start = Instant::now();
                let (logits, _) = model.step(&mut cache, token);
                token = argmax(logits.view());
                durations.push(start.elapsed().as_nanos() as u64);
                if next.peek() == Some(&&t) {
                    next.next();
                    records.push(record(
                        t,
                        &durations,
                        cache.bytes(),
                        model.activation_bytes(t),
                    ));
                }
            }
        }
    }
    Ok(records)
}

/// Writes records with the header `model,seq_len,per_token_ns,cum_ms,state_bytes,activation_bytes`.
pub fn write_csv(out: impl Write, records: &[BenchRecord]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
