//! Synthetic visual question answering: coloured grids and "what colour is
//! this cell" questions.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Image side in pixels.
pub const IMAGE_SIZE: usize = 32;

pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `IMAGE_SIZE × IMAGE_SIZE × 3`, values in `[0, 1]`.
    pub image: Array3<f32>,
    pub instruction: String,
    pub answer: String,
    /// Generator seed and index within the generated set.
    pub seed: u64,
    pub index: usize,
}

pub fn instruction_for(row: usize, col: usize) -> String {
    format!("what color is cell ({row},{col})?")
}

/// Deterministic dataset of `n` samples over a `grid × grid` board using the
/// first `palette_size` colours. Answers cycle through the palette before
/// shuffling, so every colour is equally frequent up to rounding.
pub fn gen_synthetic(
    seed: u64,
    n: usize,
    grid_size: usize,
    palette_size: usize,
) -> Vec<SyntheticSample> {
    assert!(
        (1..=PALETTE.len()).contains(&palette_size),
        "palette size out of range"
    );
    assert!(
        (1..=IMAGE_SIZE).contains(&grid_size),
        "grid size out of range"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut answers: Vec<usize> = (0..n).map(|i| i % palette_size).collect();
    answers.shuffle(&mut rng);
    answers
        .into_iter()
        .enumerate()
        .map(|(index, answer)| {
            let cells: Vec<usize> = (0..grid_size * grid_size)
                .map(|_| rng.gen_range(0..palette_size))
                .collect();
            let (row, col) = (rng.gen_range(0..grid_size), rng.gen_range(0..grid_size));
            let mut cells = cells;
            cells[row * grid_size + col] = answer;
            let image = Array3::from_shape_fn((IMAGE_SIZE, IMAGE_SIZE, 3), |(y, x, ch)| {
                let cell = (y * grid_size / IMAGE_SIZE) * grid_size + x * grid_size / IMAGE_SIZE;
                PALETTE[cells[cell]].1[ch]
            });
            SyntheticSample {
                image,
                instruction: instruction_for(row, col),
                answer: PALETTE[answer].0.to_string(),
                seed,
                index,
            }
        })
        .collect()
}

/// Held-out samples come from a different seed stream than training data.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}
