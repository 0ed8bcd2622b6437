//! Accuracy sweeps over prompt layout, scan mode, loss reduction and the
//! number of image tokens.

use serde::{Deserialize, Serialize};
use visualrwkv::model::{truncate_grid, Model, Reduction};
use visualrwkv::prompting::PromptStrategy;
use visualrwkv::vision::ScanMode;

use crate::config::TrainConfig;
use crate::eval::evaluate_with;
use crate::train::{finetune, Prepared, TrainOptions};

/// Image-token counts of the `image_tokens` sweep; `None` keeps the full grid.
pub const IMAGE_TOKEN_LADDER: [Option<usize>; 8] = [
    Some(1),
    Some(5),
    Some(10),
    Some(17),
    Some(37),
    Some(65),
    Some(145),
    None,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Prompt,
    Scan,
    Reduction,
    ImageTokens,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Self::Prompt, Self::Scan, Self::Reduction, Self::ImageTokens];

    pub fn name(self) -> &'static str {
        match self {
            Self::Prompt => "prompt",
            Self::Scan => "scan",
            Self::Reduction => "reduction",
            Self::ImageTokens => "image_tokens",
        }
    }

    /// Labels of the swept values, in output order.
    pub fn values(self) -> Vec<String> {
        match self {
            Self::Prompt => PromptStrategy::ALL
                .iter()
                .map(|s| s.name().to_string())
                .collect(),
            Self::Scan => ScanMode::ALL.iter().map(|s| s.name().to_string()).collect(),
            Self::Reduction => [Reduction::Sample, Reduction::Batch]
                .iter()
                .map(|r| r.name().to_string())
                .collect(),
            Self::ImageTokens => IMAGE_TOKEN_LADDER
                .iter()
                .map(|n| n.map_or_else(|| "full".to_string(), |n| n.to_string()))
                .collect(),
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                format!("unknown axis {s:?} (expected prompt, scan, reduction or image_tokens)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub axis_value: String,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AblationOptions {
    pub threads: usize,
    /// Stage-2 steps run under each reduction before evaluating.
    pub finetune_steps: usize,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            threads: 1,
            finetune_steps: 50,
        }
    }
}

/// Evaluates `model` on `eval` for every value of `axis`.
///
/// Prompt and scan rows reuse the trained weights unchanged. Reduction rows
/// fine-tune a copy on `train` first. Image-token counts beyond the grid size
/// keep every token.
pub fn run_ablation(
    axis: Axis,
    model: &Model<f32>,
    train_cfg: &TrainConfig,
    train: &[Prepared],
    eval: &[Prepared],
    opts: AblationOptions,
) -> anyhow::Result<Vec<AblationRow>> {
    let labels = axis.values();
    let mut rows = Vec::with_capacity(labels.len());
    let full = |m: &Model<f32>, strategy| {
        evaluate_with(m, eval, strategy, opts.threads, |g| Ok(g.clone()))
    };
    match axis {
        Axis::Prompt => {
            for (label, strategy) in labels.into_iter().zip(PromptStrategy::ALL) {
                let acc = full(model, strategy)?;
                rows.push(row(label, acc.value(), acc.n));
            }
        }
        Axis::Scan => {
            for (label, mode) in labels.into_iter().zip(ScanMode::ALL) {
                let mut m = model.clone();
                m.config.scan_mode = mode;
                let acc = full(&m, m.config.prompt)?;
                rows.push(row(label, acc.value(), acc.n));
            }
        }
        Axis::Reduction => {
            anyhow::ensure!(
                !train.is_empty(),
                "the reduction sweep needs training samples"
            );
            for (label, reduction) in labels
                .into_iter()
                .zip([Reduction::Sample, Reduction::Batch])
            {
                let mut m = model.clone();
                let t = TrainConfig {
                    reduction,
                    ..train_cfg.clone()
                };
                let topts = TrainOptions {
                    threads: opts.threads,
                    ..TrainOptions::default()
                };
                finetune(&mut m, train, &t, opts.finetune_steps, topts)?;
                let acc = full(&m, m.config.prompt)?;
                rows.push(row(label, acc.value(), acc.n));
            }
        }
        Axis::ImageTokens => {
            for (label, count) in labels.into_iter().zip(IMAGE_TOKEN_LADDER) {
                let acc = evaluate_with(model, eval, model.config.prompt, opts.threads, |g| {
                    truncate_grid(g, count.map_or(g.len(), |n| n.min(g.len())))
                })?;
                rows.push(row(label, acc.value(), acc.n));
            }
        }
    }
    Ok(rows)
}

fn row(axis_value: String, accuracy: f64, n: usize) -> AblationRow {
    AblationRow {
        axis_value,
        accuracy,
        n,
    }
}
