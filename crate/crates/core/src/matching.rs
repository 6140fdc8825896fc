//! Score matrix, dustbin augmentation, dual-softmax normalization and top-N
//! correspondence sampling.
//!
//! Rows index aerial cells and columns index ground cells, both flattened
//! row-major from their grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lifting::{AerialLayout, AerialMeta, RayModel};
use crate::par;

/// Score written into masked columns; `exp` of it underflows to exactly zero.
pub const MASK_SCORE: f64 = -1e9;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::LengthMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Aerial,
    Ground,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridMeta {
    Aerial(AerialMeta),
    Ground(RayModel),
}

/// A rows x cols grid of `dim`-dimensional features with geometric metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub data: Vec<f64>,
    pub meta: GridMeta,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, dim: usize, data: Vec<f64>, meta: GridMeta) -> Result<Self> {
        if data.len() != rows * cols * dim {
            return Err(Error::LengthMismatch {
                expected: rows * cols * dim,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed("non-finite feature value".into()));
        }
        match &meta {
            GridMeta::Aerial(m) if !(m.meters_per_cell > 0.0) => {
                return Err(Error::InvalidConfig("meters_per_cell must be positive".into()))
            }
            GridMeta::Ground(r) if r.rows != rows || r.cols != cols => {
                return Err(Error::LengthMismatch {
                    expected: rows * cols,
                    got: r.rows * r.cols,
                })
            }
            _ => {}
        }
        Ok(Self {
            rows,
            cols,
            dim,
            data,
            meta,
        })
    }

    pub fn kind(&self) -> GridKind {
        match self.meta {
            GridMeta::Aerial(_) => GridKind::Aerial,
            GridMeta::Ground(_) => GridKind::Ground,
        }
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn feature(&self, cell: usize) -> &[f64] {
        &self.data[cell * self.dim..(cell + 1) * self.dim]
    }

    pub fn aerial_layout(&self) -> Option<AerialLayout> {
        match self.meta {
            GridMeta::Aerial(m) => Some(AerialLayout::new(self.rows, self.cols, m)),
            GridMeta::Ground(_) => None,
        }
    }

    pub fn rays(&self) -> Option<&RayModel> {
        match &self.meta {
            GridMeta::Ground(r) => Some(r),
            GridMeta::Aerial(_) => None,
        }
    }
}

/// Cosine similarities divided by the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Matrix,
    pub tau: f64,
}

/// Dual-softmax probabilities with the dustbin row and column removed.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchProbabilities(pub Matrix);

/// A sampled (aerial cell, ground cell) match with its probability weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub aerial: usize,
    pub ground: usize,
    pub w: f64,
}

fn normalized_rows(grid: &FeatureGrid, cells: &[usize]) -> Result<Vec<f64>> {
    let dim = grid.dim;
    let mut out = Vec::with_capacity(cells.len() * dim);
    for &cell in cells {
        let f = grid.feature(cell);
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::ZeroNormFeature(cell));
        }
        out.extend(f.iter().map(|v| v / norm));
    }
    Ok(out)
}

/// Scores for the listed ground columns only; entry `(i, k)` pairs aerial
/// cell `i` with ground cell `ground_cells[k]`.
pub fn score_columns(aerial: &FeatureGrid, ground: &FeatureGrid, tau: f64, ground_cells: &[usize]) -> Result<ScoreMatrix> {
    if aerial.dim != ground.dim {
        return Err(Error::DimensionMismatch(aerial.dim, ground.dim));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig("temperature must be positive".into()));
    }
    let dim = aerial.dim;
    let all_aerial: Vec<usize> = (0..aerial.cells()).collect();
    let a = normalized_rows(aerial, &all_aerial)?;
    let g = normalized_rows(ground, ground_cells)?;
    let n_g = ground_cells.len();
    let mut data = vec![0.0; aerial.cells() * n_g];
    let inv_tau = 1.0 / tau;
    par::for_each_chunk_mut(&mut data, n_g, |i, row| {
        let ai = &a[i * dim..(i + 1) * dim];
        for (k, out) in row.iter_mut().enumerate() {
            let gk = &g[k * dim..(k + 1) * dim];
            let dot: f64 = ai.iter().zip(gk).map(|(x, y)| x * y).sum();
            *out = dot * inv_tau;
        }
    });
    Ok(ScoreMatrix {
        scores: Matrix {
            rows: aerial.cells(),
            cols: n_g,
            data,
        },
        tau,
    })
}

/// `M[i][j] = cos(a_i, g_j) / tau` over every aerial and ground cell.
pub fn score_matrix(aerial: &FeatureGrid, ground: &FeatureGrid, tau: f64) -> Result<ScoreMatrix> {
    let all: Vec<usize> = (0..ground.cells()).collect();
    score_columns(aerial, ground, tau, &all)
}

/// Appends a dustbin row and column, both filled with `z` (corner included).
pub fn augment_dustbin(scores: &Matrix, z: f64) -> Matrix {
    let (r, c) = (scores.rows, scores.cols);
    let mut out = Matrix::filled(r + 1, c + 1, z);
    for i in 0..r {
        out.data[i * (c + 1)..i * (c + 1) + c].copy_from_slice(scores.row(i));
    }
    out
}

/// Row softmax and column softmax of `m`, each with max subtraction.
pub fn softmax_parts(m: &Matrix) -> (Matrix, Matrix) {
    let (rows, cols) = (m.rows, m.cols);
    let mut row_sm = m.data.clone();
    par::for_each_chunk_mut(&mut row_sm, cols, |_, row| {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    });

    let mut col_max = vec![f64::NEG_INFINITY; cols];
    for r in 0..rows {
        for (mx, &v) in col_max.iter_mut().zip(m.row(r)) {
            *mx = mx.max(v);
        }
    }
    let mut col_sm = m.data.clone();
    par::for_each_chunk_mut(&mut col_sm, cols, |_, row| {
        for (v, mx) in row.iter_mut().zip(&col_max) {
            *v = (*v - mx).exp();
        }
    });
    let mut col_sum = vec![0.0; cols];
    for r in 0..rows {
        for (s, v) in col_sum.iter_mut().zip(&col_sm[r * cols..(r + 1) * cols]) {
            *s += v;
        }
    }
    let inv: Vec<f64> = col_sum.iter().map(|s| 1.0 / s).collect();
    par::for_each_chunk_mut(&mut col_sm, cols, |_, row| {
        row.iter_mut().zip(&inv).for_each(|(v, k)| *v *= k);
    });
    (
        Matrix {
            rows,
            cols,
            data: row_sm,
        },
        Matrix {
            rows,
            cols,
            data: col_sm,
        },
    )
}

/// Elementwise product of the row softmax and the column softmax.
pub fn dual_softmax(m: &Matrix) -> Matrix {
    let (a, b) = softmax_parts(m);
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Matrix {
        rows: m.rows,
        cols: m.cols,
        data,
    }
}

/// Removes the last row and column.
pub fn drop_dustbin(extended: &Matrix) -> Result<MatchProbabilities> {
    if extended.rows < 2 || extended.cols < 2 {
        return Err(Error::TooSmall {
            rows: extended.rows,
            cols: extended.cols,
        });
    }
    let (r, c) = (extended.rows - 1, extended.cols - 1);
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        data.extend_from_slice(&extended.row(i)[..c]);
    }
    Ok(MatchProbabilities(Matrix { rows: r, cols: c, data }))
}

/// Replaces every score in columns with `valid[j] == false` by [`MASK_SCORE`].
pub fn mask_ground_columns(scores: &ScoreMatrix, valid: &[bool]) -> Result<ScoreMatrix> {
    if valid.len() != scores.scores.cols {
        return Err(Error::LengthMismatch {
            expected: scores.scores.cols,
            got: valid.len(),
        });
    }
    let mut out = scores.clone();
    let cols = out.scores.cols;
    for (k, v) in out.scores.data.iter_mut().enumerate() {
        if !valid[k % cols] {
            *v = MASK_SCORE;
        }
    }
    Ok(out)
}

/// Flat indices of the `n` largest entries, ordered by value descending and
/// then by index ascending.
pub fn top_n_indices(values: &[f64], n: usize) -> Vec<usize> {
    let cmp = |a: &usize, b: &usize| values[*b].total_cmp(&values[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let n = n.min(idx.len());
    if n == 0 {
        return Vec::new();
    }
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, cmp);
        idx.truncate(n);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// The `n` most probable (aerial, ground) pairs, weight = probability.
pub fn sample_correspondences(probs: &MatchProbabilities, n: usize) -> Vec<Correspondence> {
    let m = &probs.0;
    top_n_indices(&m.data, n)
        .into_iter()
        .map(|k| Correspondence {
            aerial: k / m.cols,
            ground: k % m.cols,
            w: m.data[k],
        })
        .collect()
}
