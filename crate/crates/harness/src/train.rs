//! Two-stage training on synthetic samples.

use std::time::Instant;

use anyhow::Context;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use visualrwkv::model::{
    cast_image, freeze_mask, loss_weights, lr_at, AdamW, Model, ModelInput, Reduction,
};
use visualrwkv::params::{Gradients, ParamId};
use visualrwkv::prompting::PromptStrategy;
use visualrwkv::vision::ImageGrid;

use crate::config::{RunConfig, TrainConfig};
use crate::data::SyntheticSample;
use crate::parallel::map_ordered;

/// A sample turned into model inputs: the full sequence for training and
/// the answer-free prompt for generation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub grid: ImageGrid<f32>,
    pub instruction: String,
    pub answer: String,
}

impl Prepared {
    pub fn training_input(
        &self,
        model: &Model<f32>,
        strategy: PromptStrategy,
    ) -> visualrwkv::Result<ModelInput<f32>> {
        model.build_input(
            strategy,
            &self.instruction,
            Some(self.grid.clone()),
            Some(self.answer.as_bytes()),
        )
    }

    pub fn prompt(
        &self,
        model: &Model<f32>,
        strategy: PromptStrategy,
        grid: Option<ImageGrid<f32>>,
    ) -> visualrwkv::Result<ModelInput<f32>> {
        model.build_input(
            strategy,
            &self.instruction,
            Some(grid.unwrap_or_else(|| self.grid.clone())),
            None,
        )
    }
}

/// Encodes every image with the model's frozen patch embedder.
pub fn prepare(
    model: &Model<f32>,
    samples: &[SyntheticSample],
) -> visualrwkv::Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                grid: model.encode_image(cast_image::<f32>(&s.image).view())?,
                instruction: s.instruction.clone(),
                answer: s.answer.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Loss of every optimizer step, stage 1 first.
    pub losses: Vec<f64>,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub threads: usize,
    /// Stops after this many optimizer steps in total without changing the
    /// learning-rate schedule.
    pub max_steps: Option<usize>,
    pub verbose: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            max_steps: None,
            verbose: false,
        }
    }
}

pub fn stage_steps(epochs: f64, n_train: usize, t: &TrainConfig) -> usize {
    let per_step = t.batch_size * t.grad_accum;
    ((epochs * n_train as f64) / per_step as f64).ceil() as usize
}

/// Endless shuffled sample order, reshuffled every epoch.
struct Order {
    rng: ChaCha8Rng,
    n: usize,
    queue: Vec<usize>,
}

impl Order {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            queue: Vec::new(),
        }
    }

    fn next(&mut self) -> usize {
        if self.queue.is_empty() {
            self.queue = (0..self.n).collect();
            self.queue.shuffle(&mut self.rng);
            self.queue.reverse();
        }
        self.queue.pop().expect("non-empty dataset")
    }
}

/// Runs stage 1 (projector only) then stage 2 (everything except the patch
/// embedder) on freshly initialized parameters.
pub fn train(
    run: &RunConfig,
    train_set: &[SyntheticSample],
    opts: TrainOptions,
) -> anyhow::Result<(Model<f32>, TrainReport)> {
    let mut model =
        Model::<f32>::new(run.model.clone(), run.train.seed).context("initializing the model")?;
    let prepared = prepare(&model, train_set)?;
    let report = train_prepared(&mut model, &prepared, &run.train, opts)?;
    Ok((model, report))
}

pub fn train_prepared(
    model: &mut Model<f32>,
    prepared: &[Prepared],
    t: &TrainConfig,
    opts: TrainOptions,
) -> anyhow::Result<TrainReport> {
    anyhow::ensure!(!prepared.is_empty(), "no training samples");
    let start = Instant::now();
    let mut report = TrainReport::default();
    let strategy = model.config.prompt;
    let inputs: Vec<ModelInput<f32>> = prepared
        .iter()
        .map(|p| p.training_input(model, strategy))
        .collect::<visualrwkv::Result<_>>()?;
    let mut budget = opts.max_steps.unwrap_or(usize::MAX);
    for (stage, epochs) in [(1u8, t.epochs_stage1), (2u8, t.epochs_stage2)] {
        let steps = stage_steps(epochs, inputs.len(), t);
        let run_steps = steps.min(budget);
        budget -= run_steps;
        let losses = run_stage(model, &inputs, stage, steps, run_steps, t, opts)?;
        if stage == 1 {
            report.stage1_steps = losses.len();
        } else {
            report.stage2_steps = losses.len();
        }
        report.losses.extend(losses);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Fine-tunes with the stage-2 mask for `steps` steps.
pub fn finetune(
    model: &mut Model<f32>,
    prepared: &[Prepared],
    t: &TrainConfig,
    steps: usize,
    opts: TrainOptions,
) -> anyhow::Result<Vec<f64>> {
    let strategy = model.config.prompt;
    let inputs: Vec<ModelInput<f32>> = prepared
        .iter()
        .map(|p| p.training_input(model, strategy))
        .collect::<visualrwkv::Result<_>>()?;
    run_stage(model, &inputs, 2, steps, steps, t, opts)
}

fn run_stage(
    model: &mut Model<f32>,
    inputs: &[ModelInput<f32>],
    stage: u8,
    total_steps: usize,
    run_steps: usize,
    t: &TrainConfig,
    opts: TrainOptions,
) -> anyhow::Result<Vec<f64>> {
    let names = freeze_mask(stage, &model.config)?;
    let trainable: Vec<bool> = model
        .store
        .entries()
        .map(|(_, e)| names.contains(&e.name))
        .collect();
    let mut opt = AdamW::<f32>::new(model.store.len(), t.weight_decay);
    let mut order = Order::new(
        inputs.len(),
        t.seed.wrapping_mul(31).wrapping_add(u64::from(stage)),
    );
    let group = t.batch_size * t.grad_accum;
    let mut losses = Vec::with_capacity(run_steps);
    for step in 0..run_steps {
        let lr = lr_at(step, total_steps, t.lr_init, t.lr_end);
        let mut grads = Gradients::new(model.store.len());
        let mut loss = 0.0;
        for _ in 0..t.grad_accum {
            let batch: Vec<usize> = (0..t.batch_size).map(|_| order.next()).collect();
            let lengths: Vec<usize> = batch
                .iter()
                .map(|&i| inputs[i].layout.target_span.len())
                .collect();
            let mut weights: Vec<f32> = loss_weights(&lengths, t.reduction, group)?
                .into_iter()
                .map(|r| (*r.numer() as f64 / *r.denom() as f64) as f32)
                .collect();
            if t.reduction == Reduction::Batch {
                let g = t.grad_accum as f32;
                weights.iter_mut().for_each(|w| *w /= g);
            }
            let model_ref: &Model<f32> = model;
            let outs = map_ordered(&batch, opts.threads, |k, &i| {
                let w = vec![weights[k]; lengths[k]];
                model_ref.sample_loss(&inputs[i], &w, |id: ParamId| trainable[id.index()])
            });
            for out in outs {
                let out = out?;
                loss += f64::from(out.loss);
                grads.merge(&out.grads);
            }
        }
        opt.step(&mut model.store, &grads, lr)?;
        if opts.verbose && (step % 25 == 0 || step + 1 == run_steps) {
            eprintln!("stage {stage} step {step}/{total_steps} lr {lr:.2e} loss {loss:.4}");
        }
        losses.push(loss);
    }
    Ok(losses)
}
