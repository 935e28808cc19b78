//! Image/patch conversion, random mask plans and fixed 2D sine-cosine
//! positional tables.
//!
//! Patch indices are zero-based throughout the crate: patch `i` occupies
//! token position `i + 1`, position 0 being the `[CLS]` token.

use rand::seq::index;
use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `N x D_x` matrix of flattened patches in row-major grid order.
///
/// Within a patch, values are flattened in (row, column, channel) order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub patches: Matrix,
    pub grid: (usize, usize),
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchSequence {
    pub fn n_patches(&self) -> usize {
        self.patches.rows()
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }
}

pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchSequence> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 || h == 0 || w == 0 {
        return Err(Error::NonDivisibleSize {
            height: h,
            width: w,
            patch_size,
        });
    }
    let (gr, gc) = (h / patch_size, w / patch_size);
    let dim = patch_size * patch_size * c;
    let mut data = Vec::with_capacity(gr * gc * dim);
    for pr in 0..gr {
        for pc in 0..gc {
            for y in 0..patch_size {
                let start = ((pr * patch_size + y) * w + pc * patch_size) * c;
                data.extend_from_slice(&image.data()[start..start + patch_size * c]);
            }
        }
    }
    Ok(PatchSequence {
        patches: Matrix::from_vec(gr * gc, dim, data),
        grid: (gr, gc),
        patch_size,
        channels: c,
    })
}

pub fn unpatchify(seq: &PatchSequence) -> Result<Image> {
    let (gr, gc) = seq.grid;
    let p = seq.patch_size;
    let c = seq.channels;
    if seq.patches.rows() != gr * gc || seq.patches.cols() != p * p * c {
        return Err(Error::ShapeMismatch(format!(
            "{:?} patches for grid {gr}x{gc} with patch {p} and {c} channels",
            seq.patches.shape()
        )));
    }
    let (h, w) = (gr * p, gc * p);
    let mut img = Image::zeros(h, w, c);
    for pr in 0..gr {
        for pc in 0..gc {
            let patch = seq.patches.row(pr * gc + pc);
            for y in 0..p {
                let start = ((pr * p + y) * w + pc * p) * c;
                img.data_mut()[start..start + p * c].copy_from_slice(&patch[y * p * c..(y + 1) * p * c]);
            }
        }
    }
    Ok(img)
}

/// Disjoint visible/masked index sets covering `0..n_patches`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    visible: Vec<usize>,
    masked: Vec<usize>,
    ratio: f64,
}

impl MaskPlan {
    /// Builds a plan from an explicit masked set; indices must be distinct and `< n`.
    pub fn from_masked(n_patches: usize, masked: &[usize]) -> Result<Self> {
        let mut flags = vec![false; n_patches];
        for &m in masked {
            if m >= n_patches || flags[m] {
                return Err(Error::InvalidArgument(format!(
                    "masked index {m} repeated or outside 0..{n_patches}"
                )));
            }
            flags[m] = true;
        }
        let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n_patches).partition(|&i| flags[i]);
        let ratio = masked.len() as f64 / n_patches.max(1) as f64;
        Ok(Self {
            visible,
            masked,
            ratio,
        })
    }

    /// Plan with every patch visible, used for feature extraction.
    pub fn full_visibility(n_patches: usize) -> Self {
        Self {
            visible: (0..n_patches).collect(),
            masked: Vec::new(),
            ratio: 0.0,
        }
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn n_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }
}

/// `round(ratio * n)` with halves rounded up.
pub fn masked_count(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64 + 0.5).floor() as usize
}

/// Uniformly samples `round(ratio * n)` patches to mask, without replacement.
pub fn sample_mask(n_patches: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    let degenerate = Error::DegenerateRatio { ratio, n_patches };
    if !(ratio > 0.0 && ratio < 1.0) || n_patches < 2 {
        return Err(degenerate);
    }
    let n_mask = masked_count(n_patches, ratio);
    if n_mask == 0 || n_mask >= n_patches {
        return Err(degenerate);
    }
    let mut flags = vec![false; n_patches];
    for i in index::sample(rng, n_patches, n_mask) {
        flags[i] = true;
    }
    let (masked, visible): (Vec<usize>, Vec<usize>) = (0..n_patches).partition(|&i| flags[i]);
    Ok(MaskPlan {
        visible,
        masked,
        ratio,
    })
}

/// `(N + 1) x dim` table: row 0 belongs to `[CLS]` and is zero, row `i + 1`
/// encodes grid cell `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTable {
    table: Matrix,
    grid: (usize, usize),
}

impl PositionalTable {
    pub fn table(&self) -> &Matrix {
        &self.table
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn n_patches(&self) -> usize {
        self.table.rows() - 1
    }

    /// Row for token position `token` (0 = `[CLS]`).
    pub fn token_row(&self, token: usize) -> &[f64] {
        self.table.row(token)
    }
}

/// Fixed 2D sine-cosine embedding. The first half of the channels encodes the
/// grid row, the second half the grid column; within each half, channel `j`
/// uses frequency `10000^(-2 floor(j/2) / half)`, sine for even `j`, cosine for odd.
pub fn positional_table(grid: (usize, usize), dim: usize) -> Result<PositionalTable> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(Error::OddDim(dim));
    }
    let (rows, cols) = grid;
    let half = dim / 2;
    let encode = |pos: usize, out: &mut [f64]| {
        let width = out.len();
        for (j, v) in out.iter_mut().enumerate() {
            let omega = 10000f64.powf(-((2 * (j / 2)) as f64) / width as f64);
            let angle = pos as f64 * omega;
            *v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    };
    let mut table = Matrix::zeros(rows * cols + 1, dim);
    for r in 0..rows {
        for c in 0..cols {
            let row = table.row_mut(1 + r * cols + c);
            let (a, b) = row.split_at_mut(half);
            encode(r, a);
            encode(c, b);
        }
    }
    Ok(PositionalTable { table, grid })
}
