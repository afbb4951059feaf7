//! Position encodings for latent-grid tokens.
//!
//! Relative offsets between 2-D grid coordinates are clipped to an
//! l1 diamond of radius h: offsets inside the diamond each get their
//! own learned key embedding, everything outside shares one sentinel
//! embedding stored at offset (h,h). The bias added to attention
//! logits is q_i . p(i,j) / sqrt(d_k), so logits decompose exactly as
//! Q K^T / sqrt(d_k) + bias.
//!
//! Because the table is indexed by relative offset, one trained table
//! serves any grid size; the absolute sinusoidal encoding exists as
//! an ablation baseline without that property.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use std::rc::Rc;

/// Raster-ordered latent grid: flat token index i maps to row-major
/// coordinates (i / width, i % width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PositionGrid {
    pub height: usize,
    pub width: usize,
}

impl PositionGrid {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "PositionGrid: empty grid {height}x{width}");
        PositionGrid { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coord(&self, i: usize) -> (i64, i64) {
        debug_assert!(i < self.len());
        ((i / self.width) as i64, (i % self.width) as i64)
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }
}

/// Clips a relative offset to the l1 diamond of radius h: offsets
/// with |dr| + |dc| <= h pass through, everything else maps to the
/// shared sentinel coordinate (h, h). Total function.
pub fn diamond_clip(offset: (i64, i64), h: i64) -> (i64, i64) {
    debug_assert!(h >= 1, "diamond_clip: h must be >= 1");
    if offset.0.abs() + offset.1.abs() <= h {
        offset
    } else {
        (h, h)
    }
}

/// Number of distinct in-diamond offsets for radius h.
pub fn diamond_size(h: usize) -> usize {
    2 * h * h + 2 * h + 1
}

/// Learned relative-position key embeddings, stored as a dense
/// (2h+1) x (2h+1) grid of d_k-vectors. Rows inside the diamond are
/// each addressable by exactly one offset; the row at (h,h) is the
/// sentinel shared by every out-of-diamond offset; the remaining
/// corner rows are allocated but unreachable.
pub struct RpeTable<T: Scalar> {
    h: usize,
    d_k: usize,
    pub table: Tensor<T>,
}

impl<T: Scalar> RpeTable<T> {
    /// Wraps an existing parameter tensor of shape [(2h+1)^2, d_k].
    pub fn from_tensor(h: usize, d_k: usize, table: Tensor<T>) -> Self {
        assert!(h >= 1, "RpeTable: h must be >= 1");
        let side = 2 * h + 1;
        assert_eq!(
            table.shape(),
            &[side * side, d_k],
            "RpeTable: table shape vs h={h}, d_k={d_k}"
        );
        RpeTable { h, d_k, table }
    }

    pub fn zeros(h: usize, d_k: usize) -> Self {
        let side = 2 * h + 1;
        Self::from_tensor(h, d_k, Tensor::zeros(&[side * side, d_k]))
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    /// Table row index for an arbitrary offset (after clipping).
    pub fn row_of(&self, offset: (i64, i64)) -> usize {
        dense_row_of(self.h, offset)
    }

    /// Row of the shared out-of-diamond embedding.
    pub fn sentinel_row(&self) -> usize {
        sentinel_row(self.h)
    }

    /// Row index of every ordered token pair (i, j) of the grid,
    /// flattened row-major: entry i*n + j holds row_of(coord_i - coord_j).
    pub fn pair_rows(&self, grid: &PositionGrid) -> Vec<usize> {
        RpeMap::aligned(self.h, grid).rows.as_ref().clone()
    }
}

fn dense_row_of(h: usize, offset: (i64, i64)) -> usize {
    let h = h as i64;
    let (dr, dc) = diamond_clip(offset, h);
    ((dr + h) * (2 * h + 1) + (dc + h)) as usize
}

/// Ablation baseline: clamp each coordinate to [-h, h] independently
/// instead of the l1 diamond, so every row of the dense table is live.
fn dense_row_of_rect(h: usize, offset: (i64, i64)) -> usize {
    let h = h as i64;
    let dr = offset.0.clamp(-h, h);
    let dc = offset.1.clamp(-h, h);
    ((dr + h) * (2 * h + 1) + (dc + h)) as usize
}

fn sentinel_row(h: usize) -> usize {
    dense_row_of(h, (h as i64 + 1, h as i64 + 1))
}

/// Query/key to table-row pairing for one token sequence, precomputed
/// so attention layers need no geometry of their own. Aligned maps put
/// token t at grid position t. Shifted maps serve causal decoding over
/// a sequence [start, value_0, .., value_{n-2}]: slot 0 is the
/// position-less start token (paired through the sentinel row) and
/// slot t >= 1 carries the value of grid position t-1, while query
/// slot i predicts grid position i.
#[derive(Debug, Clone)]
pub struct RpeMap {
    n: usize,
    rows: Rc<Vec<usize>>,
}

/// How an offset lands in the dense table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClipRule {
    Diamond,
    Rect,
}

impl RpeMap {
    pub fn aligned(h: usize, grid: &PositionGrid) -> Self {
        Self::build(ClipRule::Diamond, h, grid, false)
    }

    pub fn shifted(h: usize, grid: &PositionGrid) -> Self {
        Self::build(ClipRule::Diamond, h, grid, true)
    }

    pub fn build(rule: ClipRule, h: usize, grid: &PositionGrid, shifted: bool) -> Self {
        Self::build_prefix(rule, h, grid, shifted, grid.len())
    }

    /// Pairing over the first `tokens` slots only, for step-by-step
    /// causal decoding where the sequence grows one slot at a time.
    pub fn build_prefix(rule: ClipRule, h: usize, grid: &PositionGrid, shifted: bool, tokens: usize) -> Self {
        assert!(tokens <= grid.len(), "prefix longer than grid");
        let row_of = |off: (i64, i64)| match rule {
            ClipRule::Diamond => dense_row_of(h, off),
            ClipRule::Rect => dense_row_of_rect(h, off),
        };
        let n = tokens;
        let sentinel = sentinel_row(h);
        let mut rows = Vec::with_capacity(n * n);
        for i in 0..n {
            let (ri, ci) = grid.coord(i);
            for t in 0..n {
                if shifted && t == 0 {
                    rows.push(sentinel);
                } else {
                    let back = if shifted { t - 1 } else { t };
                    let (rt, ct) = grid.coord(back);
                    rows.push(row_of((ri - rt, ci - ct)));
                }
            }
        }
        RpeMap { n, rows: Rc::new(rows) }
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Additive attention bias from relative positions, single head:
/// queries are already projected, [n, d_k]; output is [n, n] with
/// B[i][j] = q_i . p(i,j) / sqrt(d_k).
pub fn build_rpe_bias<T: Scalar>(
    grid: &PositionGrid,
    table: &RpeTable<T>,
    queries: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = grid.len();
    if queries.shape() != [n, table.d_k] {
        return Err(Error::Config(format!(
            "rpe bias: queries {:?} vs grid tokens {} x d_k {}",
            queries.shape(),
            n,
            table.d_k
        )));
    }
    let q3 = queries.reshape(&[1, n, table.d_k]);
    let map = RpeMap::aligned(table.h, grid);
    Ok(build_rpe_bias_heads(&map, table, &q3)?.reshape(&[n, n]))
}

/// Multi-head variant: queries [heads, n, d_k] -> bias [heads, n, n].
/// One table serves all heads of a layer.
pub fn build_rpe_bias_heads<T: Scalar>(
    map: &RpeMap,
    table: &RpeTable<T>,
    queries: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = map.n();
    let qs = queries.shape().to_vec();
    if qs.len() != 3 || qs[1] != n || qs[2] != table.d_k {
        return Err(Error::Config(format!(
            "rpe bias: queries {qs:?} vs paired tokens {n} x d_k {}",
            table.d_k
        )));
    }
    let heads = qs[0];
    let rows = map.rows.as_ref();
    let t_rows = table.table.shape()[0];
    // scores[hd, i, r] = q[hd, i] . table[r] / sqrt(d_k)
    let scale = T::from_f64(1.0 / (table.d_k as f64).sqrt());
    let scores = queries
        .matmul(&table.table.transpose_last2())
        .mul_scalar(scale); // [heads, n, t_rows]
    let mut map = Vec::with_capacity(heads * n * n);
    for hd in 0..heads {
        for i in 0..n {
            let base = (hd * n + i) * t_rows;
            for j in 0..n {
                map.push(base + rows[i * n + j]);
            }
        }
    }
    Ok(scores.gather_map(&[heads, n, n], Rc::new(map)))
}

/// Fixed 2-D sinusoidal encoding, [tokens, dim]: the first dim/2
/// channels encode the row coordinate, the rest the column, each with
/// the standard sin/cos frequency ladder. Ablation baseline only.
pub fn absolute_pe<T: Scalar>(grid: &PositionGrid, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!(
            "absolute_pe: dim must be even and positive, got {dim}"
        )));
    }
    let n = grid.len();
    let half = dim / 2;
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        let (r, c) = grid.coord(i);
        for (axis_val, _) in [(r as f64, 0), (c as f64, 1)] {
            for ch in 0..half {
                let freq_idx = (ch / 2) as f64;
                let angle = axis_val / 10000f64.powf(2.0 * freq_idx / half as f64);
                let v = if ch % 2 == 0 { angle.sin() } else { angle.cos() };
                data.push(T::from_f64(v));
            }
        }
    }
    Ok(Tensor::from_vec(data, &[n, dim]))
}
