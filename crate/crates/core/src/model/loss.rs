use ndarray::ArrayView2;
use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Cross-entropy normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Each sample is normalized by its own target length and by the number
    /// of samples in its accumulation group.
    Sample,
    /// Every target token in the batch is normalized by the batch's total
    /// target count.
    Batch,
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sample => "sample",
            Self::Batch => "batch",
        }
    }
}

/// Exact per-token weight for each sample, given each sample's count of
/// target tokens.
pub fn loss_weights(
    lengths: &[usize],
    reduction: Reduction,
    accum_group: usize,
) -> Result<Vec<Ratio<u64>>> {
    if accum_group == 0 {
        return Err(Error::Argument(
            "accumulation group must hold at least one sample".into(),
        ));
    }
    match reduction {
        Reduction::Batch => {
            let total: usize = lengths.iter().sum();
            if total == 0 {
                return Err(Error::EmptyTarget);
            }
            Ok(vec![Ratio::new(1, total as u64); lengths.len()])
        }
        Reduction::Sample => lengths
            .iter()
            .map(|&n| {
                if n == 0 {
                    Err(Error::EmptyTarget)
                } else {
                    Ok(Ratio::new(1, (n * accum_group) as u64))
                }
            })
            .collect(),
    }
}

pub(crate) fn ratio_to<T: Real>(r: Ratio<u64>) -> T {
    T::of(*r.numer() as f64 / *r.denom() as f64)
}

/// Weighted token cross-entropy over a batch. `targets[i][t]` is the token
/// predicted by row `t` of `logits[i]`; `masks[i][t]` selects rows that
/// contribute. Returns the loss and the per-row weights (zero where masked).
pub fn cross_entropy<T: Real>(
    logits: &[ArrayView2<'_, T>],
    targets: &[Vec<usize>],
    masks: &[Vec<bool>],
    reduction: Reduction,
    accum_group: usize,
) -> Result<(T, Vec<Vec<T>>)> {
    if logits.len() != targets.len() || logits.len() != masks.len() {
        return Err(Error::Argument(
            "logits, targets and masks must cover the same samples".into(),
        ));
    }
    let lengths: Vec<usize> = masks
        .iter()
        .map(|m| m.iter().filter(|&&b| b).count())
        .collect();
    let per_sample = loss_weights(&lengths, reduction, accum_group)?;
    let mut loss = T::zero();
    let mut weights = Vec::with_capacity(logits.len());
    for (((l, tg), m), w) in logits.iter().zip(targets).zip(masks).zip(per_sample) {
        if l.nrows() != tg.len() || l.nrows() != m.len() {
            return Err(Error::Argument(
                "targets and mask must have one entry per logits row".into(),
            ));
        }
        let w: T = ratio_to(w);
        let mut row_w = vec![T::zero(); l.nrows()];
        for (t, row) in l.rows().into_iter().enumerate() {
            if !m[t] {
                continue;
            }
            let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
            let z: T = row.iter().map(|&x| (x - max).exp()).sum();
            loss = loss - w * (row[tg[t]] - max - z.ln());
            row_w[t] = w;
        }
        weights.push(row_w);
    }
    Ok((loss, weights))
}
