//! Argument parsing and subcommand dispatch for the `visualrwkv` binary.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::Serialize;
use visualrwkv::model::{load_checkpoint, save_checkpoint, Model};
use visualrwkv::prompting::{detokenize, EOS};

use crate::ablate::{run_ablation, AblationOptions, Axis};
use crate::bench::{bench_sweep, lengths_up_to, write_csv, ModelKind};
use crate::config::RunConfig;
use crate::data::{eval_seed, gen_synthetic, IMAGE_SIZE};
use crate::eval::evaluate;
use crate::selftest::run_selftest;
use crate::train::{prepare, train, TrainOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "visualrwkv",
    version,
    about = "Visual RWKV training, inference, ablations and benchmarks"
)]
pub struct Cli {
    /// Run configuration (JSON with `model`, `train` and `data` sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Checkpoint written by `train` and read by `infer` and `ablate`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output file; standard output when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_model_kind)]
    pub model: Option<ModelKind>,
    #[arg(long = "max-len", global = true)]
    pub max_len: Option<usize>,
    #[arg(long, global = true, value_parser = parse_axis)]
    pub axis: Option<Axis>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Two-stage training, then held-out accuracy.
    Train,
    /// Greedy answer for an image and an instruction.
    Infer {
        /// Instruction text; `<image>` marks the split point of sandwich prompts.
        #[arg(long)]
        prompt: String,
        /// PPM or PNG image, resized to the training resolution.
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Per-token latency and state size sweep.
    Bench,
    /// Accuracy sweep along one axis.
    Ablate,
    /// Runs the built-in oracle checks.
    Selftest,
    /// Writes synthetic samples as JSON lines.
    GenData {
        /// Number of samples; defaults to the configured training set size.
        #[arg(long)]
        n: Option<usize>,
    },
}

fn parse_model_kind(s: &str) -> Result<ModelKind, String> {
    s.parse()
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    s.parse()
}

/// Invalid invocations that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parses `argv` and runs the subcommand, returning the process exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Train => cmd_train(cli),
        Command::Infer { prompt, image } => cmd_infer(cli, prompt, image.as_deref()),
        Command::Bench => cmd_bench(cli),
        Command::Ablate => cmd_ablate(cli),
        Command::Selftest => cmd_selftest(cli),
        Command::GenData { n } => cmd_gen_data(cli, *n),
    }
}

fn run_config(cli: &Cli, required: bool) -> anyhow::Result<RunConfig> {
    let mut run = match &cli.config {
        Some(path) if !path.exists() => {
            return Err(usage(format!(
                "config file {} does not exist",
                path.display()
            )))
        }
        Some(path) => RunConfig::load(path)?,
        None if required => return Err(usage("--config is required")),
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        run.train.seed = seed;
    }
    Ok(run)
}

fn output(cli: &Cli) -> anyhow::Result<Box<dyn Write>> {
    Ok(match &cli.out {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).with_context(|| format!("creating {}", path.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn checkpoint_path(cli: &Cli) -> anyhow::Result<&Path> {
    cli.checkpoint
        .as_deref()
        .ok_or_else(|| usage("--checkpoint is required"))
}

#[derive(Serialize)]
struct TrainSummary {
    stage1_steps: usize,
    stage2_steps: usize,
    seconds: f64,
    accuracy: f64,
    n_eval: usize,
    losses: Vec<f64>,
}

fn cmd_train(cli: &Cli) -> anyhow::Result<i32> {
    let run = run_config(cli, true)?;
    let d = &run.data;
    let train_set = gen_synthetic(run.train.seed, d.n_train, d.grid, d.palette);
    let eval_set = gen_synthetic(eval_seed(run.train.seed), d.n_eval, d.grid, d.palette);
    let opts = TrainOptions {
        threads: cli.threads,
        verbose: true,
        ..TrainOptions::default()
    };
    let (model, report) = train(&run, &train_set, opts)?;
    if let Some(path) = &cli.checkpoint {
        save_checkpoint(path, &model).with_context(|| format!("writing {}", path.display()))?;
    }
    let acc = evaluate(&model, &prepare(&model, &eval_set)?, cli.threads)?;
    eprintln!(
        "trained {} + {} steps in {:.1}s; held-out accuracy {:.3} ({}/{})",
        report.stage1_steps,
        report.stage2_steps,
        report.seconds,
        acc.value(),
        acc.correct,
        acc.n
    );
    if cli.out.is_some() {
        let summary = TrainSummary {
            stage1_steps: report.stage1_steps,
            stage2_steps: report.stage2_steps,
            seconds: report.seconds,
            accuracy: acc.value(),
            n_eval: acc.n,
            losses: report.losses,
        };
        let mut out = output(cli)?;
        serde_json::to_writer_pretty(&mut out, &summary)?;
        writeln!(out)?;
    }
    Ok(EXIT_OK)
}

fn load_image(path: &Path) -> anyhow::Result<ndarray::Array3<f32>> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    let size = IMAGE_SIZE as u32;
    let img = if img.dimensions() == (size, size) {
        img
    } else {
        image::imageops::resize(&img, size, size, image::imageops::FilterType::Nearest)
    };
    Ok(ndarray::Array3::from_shape_fn(
        (IMAGE_SIZE, IMAGE_SIZE, 3),
        |(y, x, c)| f32::from(img.get_pixel(x as u32, y as u32)[c]) / 255.0,
    ))
}

fn cmd_infer(cli: &Cli, prompt: &str, image: Option<&Path>) -> anyhow::Result<i32> {
    let model: Model<f32> = load_checkpoint(checkpoint_path(cli)?)?;
    let grid = image
        .map(|p| {
            model
                .encode_image(load_image(p)?.view())
                .map_err(anyhow::Error::from)
        })
        .transpose()?;
    let input = model.build_input(model.config.prompt, prompt, grid, None)?;
    let max_new = cli.max_len.unwrap_or(32);
    let mut session = visualrwkv::model::Session::new(&model);
    let logits = session.feed(&input)?;
    let mut next = crate::eval::argmax(logits.row(logits.nrows() - 1));
    let mut out = output(cli)?;
    for _ in 0..max_new {
        if next == EOS {
            break;
        }
        out.write_all(&detokenize(&[next]))?;
        out.flush()?;
        let logits = session.step_token(next)?;
        next = crate::eval::argmax(logits.view());
    }
    writeln!(out)?;
    Ok(EXIT_OK)
}

fn cmd_bench(cli: &Cli) -> anyhow::Result<i32> {
    let run = run_config(cli, false)?;
    let kind = cli.model.unwrap_or(ModelKind::Rwkv);
    let max_len = cli
        .max_len
        .unwrap_or(crate::bench::LENGTHS[crate::bench::LENGTHS.len() - 1]);
    if max_len == 0 {
        return Err(usage("--max-len must be positive"));
    }
    let records = bench_sweep(kind, &lengths_up_to(max_len), &run.model, run.train.seed)?;
    write_csv(output(cli)?, &records)?;
    Ok(EXIT_OK)
}

fn cmd_ablate(cli: &Cli) -> anyhow::Result<i32> {
    let axis = cli.axis.ok_or_else(|| usage("--axis is required"))?;
    let path = checkpoint_path(cli)?;
    let run = run_config(cli, false)?;
    let model: Model<f32> =
        load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let d = &run.data;
    let eval = prepare(
        &model,
        &gen_synthetic(eval_seed(run.train.seed), d.n_eval, d.grid, d.palette),
    )?;
    let train = if axis == Axis::Reduction {
        prepare(
            &model,
            &gen_synthetic(run.train.seed, d.n_train, d.grid, d.palette),
        )?
    } else {
        Vec::new()
    };
    let opts = AblationOptions {
        threads: cli.threads,
        ..AblationOptions::default()
    };
    let rows = run_ablation(axis, &model, &run.train, &train, &eval, opts)?;
    let mut out = output(cli)?;
    serde_json::to_writer_pretty(&mut out, &rows)?;
    writeln!(out)?;
    Ok(EXIT_OK)
}

fn cmd_selftest(cli: &Cli) -> anyhow::Result<i32> {
    let results = run_selftest(cli.seed.unwrap_or(0));
    let mut out = output(cli)?;
    for r in &results {
        match &r.outcome {
            Ok(detail) => writeln!(out, "PASS {}: {detail}", r.name)?,
            Err(detail) => writeln!(out, "FAIL {}: {detail}", r.name)?,
        }
    }
    Ok(if results.iter().all(|r| r.passed()) {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    index: usize,
    seed: u64,
    instruction: &'a str,
    answer: &'a str,
    shape: [usize; 3],
    pixels: Vec<f32>,
}

fn cmd_gen_data(cli: &Cli, n: Option<usize>) -> anyhow::Result<i32> {
    let run = run_config(cli, false)?;
    let d = &run.data;
    let samples = gen_synthetic(run.train.seed, n.unwrap_or(d.n_train), d.grid, d.palette);
    let mut out = output(cli)?;
    for s in &samples {
        let (h, w, c) = s.image.dim();
        let record = SampleRecord {
            index: s.index,
            seed: s.seed,
            instruction: &s.instruction,
            answer: &s.answer,
            shape: [h, w, c],
            pixels: s.image.iter().copied().collect(),
        };
        serde_json::to_writer(&mut out, &record)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(EXIT_OK)
}
