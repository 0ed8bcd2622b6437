use visualrwkv::model::Model;
use visualrwkv::prompting::PromptStrategy;
use visualrwkv::vision::ImageGrid;

use crate::parallel::map_ordered;
use crate::train::Prepared;

/// Longest answer the decoder may produce.
pub const MAX_ANSWER: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub correct: usize,
    pub n: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }
}

/// Exact-match accuracy of greedy answers. `transform` may replace each
/// sample's vision tokens (e.g. truncation).
pub fn evaluate_with(
    model: &Model<f32>,
    samples: &[Prepared],
    strategy: PromptStrategy,
    threads: usize,
    transform: impl Fn(&ImageGrid<f32>) -> visualrwkv::Result<ImageGrid<f32>> + Sync,
) -> visualrwkv::Result<Accuracy> {
    let hits = map_ordered(samples, threads, |_, s| -> visualrwkv::Result<bool> {
        let prompt = s.prompt(model, strategy, Some(transform(&s.grid)?))?;
        let out = model.generate(&prompt, MAX_ANSWER)?;
        Ok(out == s.answer.bytes().map(u32::from).collect::<Vec<_>>())
    });
    let mut correct = 0;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(Accuracy {
        correct,
        n: samples.len(),
    })
}

pub fn evaluate(
    model: &Model<f32>,
    samples: &[Prepared],
    threads: usize,
) -> visualrwkv::Result<Accuracy> {
    evaluate_with(model, samples, model.config.prompt, threads, |g| {
        Ok(g.clone())
    })
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(logits: ndarray::ArrayView1<'_, f32>) -> u32 {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as u32
}
