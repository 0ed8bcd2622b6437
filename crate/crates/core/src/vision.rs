//! Image-token handling: toy patch embedding, the two-layer projector, and
//! scan-direction permutations over the image span.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::gelu_scalar;
use crate::error::dim_err;
use crate::{Error, Real, Result};

/// Traversal order imposed on the image grid before a layer processes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanDirection {
    /// Row-major.
    Forward,
    /// Reverse row-major.
    Backward,
    /// Reverse column-major.
    Upward,
    /// Column-major: top to bottom within a column, columns left to right.
    Downward,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] =
        [Self::Forward, Self::Backward, Self::Upward, Self::Downward];
}

/// How scan directions are arranged over the layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    Uni,
    Bi,
    Multi,
}

impl ScanMode {
    pub const ALL: [ScanMode; 3] = [Self::Uni, Self::Bi, Self::Multi];

    pub fn name(self) -> &'static str {
        match self {
            Self::Uni => "uni",
            Self::Bi => "bi",
            Self::Multi => "multi",
        }
    }
}

/// Visiting order over a row-major `h × w` grid: entry `i` is the grid index
/// processed at scan position `i`.
pub fn scan_permutation(dir: ScanDirection, h: usize, w: usize) -> Vec<usize> {
    let n = h * w;
    let column_major = || (0..w).flat_map(move |c| (0..h).map(move |r| r * w + c));
    match dir {
        ScanDirection::Forward => (0..n).collect(),
        ScanDirection::Backward => (0..n).rev().collect(),
        ScanDirection::Downward => column_major().collect(),
        ScanDirection::Upward => {
            let mut p: Vec<usize> = column_major().collect();
            p.reverse();
            p
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Full-sequence gather indices that permute only `span` by `perm`.
pub fn span_gather(len: usize, span: &Range<usize>, perm: &[usize]) -> Result<Vec<usize>> {
    if span.end > len || span.start > span.end || span.len() != perm.len() {
        return Err(Error::Layout(format!(
            "image span {span:?} does not fit a permutation of {} over a sequence of {len}",
            perm.len()
        )));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    for (i, &p) in perm.iter().enumerate() {
        idx[span.start + i] = span.start + p;
    }
    Ok(idx)
}

/// Reorders the rows of `seq` inside `span` so that row `span.start + i`
/// becomes the former row `span.start + perm[i]`.
pub fn apply_scan<T: Real>(
    seq: ArrayView2<'_, T>,
    span: &Range<usize>,
    perm: &[usize],
) -> Result<Array2<T>> {
    let idx = span_gather(seq.nrows(), span, perm)?;
    Ok(seq.select(Axis(0), &idx))
}

/// Per-layer scan directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanSchedule {
    pub directions: Vec<ScanDirection>,
}

pub fn layer_direction_schedule(mode: ScanMode, n_layers: usize) -> ScanSchedule {
    use ScanDirection::*;
    let cycle: &[ScanDirection] = match mode {
        ScanMode::Uni => &[Forward],
        ScanMode::Bi => &[Forward, Backward],
        ScanMode::Multi => &[Forward, Backward, Upward, Downward],
    };
    ScanSchedule {
        directions: (0..n_layers).map(|l| cycle[l % cycle.len()]).collect(),
    }
}

/// Vision tokens laid out on an `h × w` patch grid in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid<T> {
    pub h: usize,
    pub w: usize,
    /// `h·w × d`
    pub tokens: Array2<T>,
}

impl<T: Real> ImageGrid<T> {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits an `h_px × w_px × c` image into non-overlapping `p × p` patches,
/// flattens each as `(row, col, channel)` and projects it with `W_e`
/// (`p·p·c × d_vision`).
pub fn patch_embed<T: Real>(
    image: ArrayView3<'_, T>,
    patch: usize,
    w_e: ArrayView2<'_, T>,
) -> Result<ImageGrid<T>> {
    let (hp, wp, c) = image.dim();
    if patch == 0 || hp % patch != 0 || wp % patch != 0 || hp == 0 || wp == 0 {
        return Err(dim_err(
            "patch_embed",
            format!("{hp}×{wp} image is not divisible into {patch}×{patch} patches"),
        ));
    }
    let flat = patch * patch * c;
    if w_e.nrows() != flat {
        return Err(dim_err(
            "patch_embed",
            format!(
                "projection has {} rows, patches have {flat} values",
                w_e.nrows()
            ),
        ));
    }
    let (h, w) = (hp / patch, wp / patch);
    let mut patches = Array2::zeros((h * w, flat));
    for gr in 0..h {
        for gc in 0..w {
            let block = image.slice(s![
                gr * patch..(gr + 1) * patch,
                gc * patch..(gc + 1) * patch,
                ..
            ]);
            let mut row = patches.row_mut(gr * w + gc);
            for (dst, &v) in row.iter_mut().zip(block.iter()) {
                *dst = v;
            }
        }
    }
    Ok(ImageGrid {
        h,
        w,
        tokens: patches.dot(&w_e),
    })
}

/// Fixed 2-D sinusoidal position codes: the first half of the channels
/// encodes the patch row, the second half the patch column.
pub fn grid_position_codes<T: Real>(h: usize, w: usize, d: usize) -> Array2<T> {
    let half = d / 2;
    let mut codes = Array2::zeros((h * w, d));
    let encode = |pos: usize, width: usize, out: &mut [T]| {
        for (i, o) in out.iter_mut().enumerate().take(width) {
            let freq = 1.0 / 100f64.powf((i / 2 * 2) as f64 / width.max(1) as f64);
            let angle = pos as f64 * freq;
            *o = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    };
    for r in 0..h {
        for c in 0..w {
            let mut row = codes.row_mut(r * w + c);
            let slice = row.as_slice_mut().expect("contiguous row");
            let (a, b) = slice.split_at_mut(half);
            encode(r, half, a);
            encode(c, d - half, b);
        }
    }
    codes
}

/// Borrowed projector weights: `Linear(d_vision → d_model)`, GELU,
/// `Linear(d_model → d_model)`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectorView<'a, T> {
    pub w1: ArrayView2<'a, T>,
    pub b1: ArrayView1<'a, T>,
    pub w2: ArrayView2<'a, T>,
    pub b2: ArrayView1<'a, T>,
}

pub fn project_visual<T: Real>(grid: &ImageGrid<T>, p: &ProjectorView<'_, T>) -> Result<Array2<T>> {
    let d_vision = grid.tokens.ncols();
    if p.w1.nrows() != d_vision
        || p.b1.len() != p.w1.ncols()
        || p.w2.nrows() != p.w1.ncols()
        || p.b2.len() != p.w2.ncols()
    {
        return Err(dim_err(
            "project_visual",
            format!(
                "tokens of width {d_vision} vs projector {:?} / {:?}",
                p.w1.dim(),
                p.w2.dim()
            ),
        ));
    }
    let hidden = (grid.tokens.dot(&p.w1) + &p.b1).mapv(gelu_scalar);
    Ok(hidden.dot(&p.w2) + &p.b2)
}
