//! Byte-level vocabulary and multimodal prompt assembly.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const SEP: u32 = 258;
pub const VOCAB_SIZE: usize = 259;

/// Placeholder marking the image position inside a prompt template.
pub const IMAGE_PLACEHOLDER: &str = "<image>";

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

/// Inverse of [`tokenize`]; special tokens carry no bytes and are skipped.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter_map(|&id| u8::try_from(id).ok()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptStrategy {
    /// `[V, I, A]`
    #[serde(rename = "first")]
    ImageFirst,
    /// `[I, V, A]`
    #[serde(rename = "last")]
    ImageLast,
    /// `[I, V, I, A]`
    #[serde(rename = "sandwich")]
    Sandwich,
}

impl PromptStrategy {
    pub const ALL: [PromptStrategy; 3] = [Self::ImageFirst, Self::ImageLast, Self::Sandwich];

    pub fn name(self) -> &'static str {
        match self {
            Self::ImageFirst => "first",
            Self::ImageLast => "last",
            Self::Sandwich => "sandwich",
        }
    }
}

/// An assembled sequence with its image and answer spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout<E> {
    pub items: Vec<E>,
    pub image_span: Range<usize>,
    pub target_span: Range<usize>,
}

impl<E> PromptLayout<E> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Prepends `item` (e.g. BOS), shifting both spans.
    pub fn prepend(mut self, item: E) -> Self {
        self.items.insert(0, item);
        self.image_span = self.image_span.start + 1..self.image_span.end + 1;
        self.target_span = self.target_span.start + 1..self.target_span.end + 1;
        self
    }
}

pub fn assemble_prompt<E: Clone>(
    strategy: PromptStrategy,
    instruction: &[E],
    image: &[E],
    answer: &[E],
) -> Result<PromptLayout<E>> {
    match strategy {
        PromptStrategy::Sandwich => assemble_split(instruction, image, instruction, answer),
        PromptStrategy::ImageLast => assemble_split(instruction, image, &[], answer),
        PromptStrategy::ImageFirst => assemble_split(&[], image, instruction, answer),
    }
    .and_then(|layout| {
        if strategy == PromptStrategy::Sandwich && instruction.is_empty() {
            Err(Error::Layout(
                "sandwich prompt needs a non-empty instruction".into(),
            ))
        } else {
            Ok(layout)
        }
    })
}

/// `[before, V, after, A]`
fn assemble_split<E: Clone>(
    before: &[E],
    image: &[E],
    after: &[E],
    answer: &[E],
) -> Result<PromptLayout<E>> {
    let mut items = Vec::with_capacity(before.len() + image.len() + after.len() + answer.len());
    items.extend_from_slice(before);
    let image_span = items.len()..items.len() + image.len();
    items.extend_from_slice(image);
    items.extend_from_slice(after);
    let target_span = items.len()..items.len() + answer.len();
    items.extend_from_slice(answer);
    Ok(PromptLayout {
        items,
        image_span,
        target_span,
    })
}

/// Text around the image placeholder of a template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub before: String,
    pub after: String,
}

impl PromptTemplate {
    /// Splits at the single `<image>` placeholder; a template without one is
    /// all instruction.
    pub fn parse(text: &str) -> Result<Self> {
        match text.matches(IMAGE_PLACEHOLDER).count() {
            0 => Ok(Self {
                before: text.to_string(),
                after: String::new(),
            }),
            1 => {
                let (a, b) = text.split_once(IMAGE_PLACEHOLDER).expect("one placeholder");
                Ok(Self {
                    before: a.to_string(),
                    after: b.to_string(),
                })
            }
            n => Err(Error::Layout(format!(
                "template has {n} image placeholders; one image is supported"
            ))),
        }
    }

    /// The instruction with the placeholder removed.
    pub fn instruction(&self) -> String {
        format!("{}{}", self.before, self.after)
    }

    /// Assembles tokens for `strategy`. First/Last place the image by
    /// strategy; Sandwich uses the placeholder split when both halves are
    /// non-empty and otherwise repeats the whole instruction around the image.
    pub fn assemble<E: Clone>(
        &self,
        strategy: PromptStrategy,
        encode: impl Fn(&str) -> Vec<E>,
        image: &[E],
        answer: &[E],
    ) -> Result<PromptLayout<E>> {
        if strategy == PromptStrategy::Sandwich && !self.before.is_empty() && !self.after.is_empty()
        {
            return assemble_split(&encode(&self.before), image, &encode(&self.after), answer);
        }
        assemble_prompt(strategy, &encode(&self.instruction()), image, answer)
    }
}

/// Uniform-stride pick of `n` indices out of `len`: `round(k·len/n)`.
pub fn truncation_indices(len: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > len {
        return Err(Error::Argument(format!(
            "cannot keep {n} of {len} image tokens"
        )));
    }
    let mut idx: Vec<usize> = (0..n)
        .map(|k| ((k * len) as f64 / n as f64).round() as usize)
        .map(|i| i.min(len - 1))
        .collect();
    idx.dedup();
    // Fill any collisions with the first unused indices so exactly n remain.
    let mut next = 0;
    while idx.len() < n {
        while idx.binary_search(&next).is_ok() {
            next += 1;
        }
        let pos = idx.binary_search(&next).unwrap_err();
        idx.insert(pos, next);
    }
    Ok(idx)
}

pub fn truncate_image_tokens<E: Clone>(image: &[E], n: usize) -> Result<Vec<E>> {
    Ok(truncation_indices(image.len(), n)?
        .into_iter()
        .map(|i| image[i].clone())
        .collect())
}
