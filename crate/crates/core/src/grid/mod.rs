//! Scalar grids, convolution kernels and the zero-padded "same" 2D convolution.
//!
//! A grid is stored row-major. Convolution follows the center-aligned form
//!
//! ```text
//! out[i, j] = sum_{a, b} g[a, b] * x[i + a - c, j + b - c],   c = k / 2
//! ```
//!
//! with out-of-range samples of `x` treated as zero. Viewed as a linear map on
//! `vec(x)` this is a block-Toeplitz matrix `L`; [`conv2d_adjoint`] applies `L^T`,
//! which is the same convolution with the kernel rotated by 180 degrees.

mod io;

pub use io::{read_grid, read_grid_binary, read_grid_csv, write_grid, write_grid_binary, write_grid_csv};

use std::cell::Cell;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest `rows * cols` for which dense oracle matrices are built.
pub const ORACLE_MAX_CELLS: usize = 4096;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid has {len} values but shape {rows}x{cols} needs {expected}")]
    LengthMismatch {
        rows: usize,
        cols: usize,
        len: usize,
        expected: usize,
    },
    #[error("grid dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("cell size must be positive and finite, got {0}")]
    BadCellSize(f64),
    #[error("non-finite value at cell ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("kernel size must be odd and positive, got {0}")]
    EvenKernel(usize),
    #[error("kernel of size {size} needs {expected} weights, got {len}")]
    KernelLength {
        size: usize,
        len: usize,
        expected: usize,
    },
    #[error("kernel contains a non-finite weight")]
    NonFiniteKernel,
    #[error("gaussian bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
    #[error("kernel of size {size} is too large for a {rows}x{cols} grid (max {max})")]
    KernelTooLarge {
        size: usize,
        rows: usize,
        cols: usize,
        max: usize,
    },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("oracle-scale only: {cells} cells exceeds the dense limit of {max}")]
    OracleScale { cells: usize, max: usize },
    #[error("malformed grid file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GridError> = std::result::Result<T, E>;

/// Row-major grid of finite scalars with a metric cell size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarGrid {
    rows: usize,
    cols: usize,
    cell_size: f64,
    values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(rows: usize, cols: usize, cell_size: f64, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(GridError::EmptyShape { rows, cols });
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(GridError::BadCellSize(cell_size));
        }
        if values.len() != rows * cols {
            return Err(GridError::LengthMismatch {
                rows,
                cols,
                len: values.len(),
                expected: rows * cols,
            });
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite {
                row: idx / cols,
                col: idx % cols,
            });
        }
        Ok(Self {
            rows,
            cols,
            cell_size,
            values,
        })
    }

    pub fn filled(rows: usize, cols: usize, cell_size: f64, value: f64) -> Result<Self> {
        Self::new(rows, cols, cell_size, vec![value; rows * cols])
    }

    pub fn zeros(rows: usize, cols: usize, cell_size: f64) -> Result<Self> {
        Self::filled(rows, cols, cell_size, 0.0)
    }

    /// Builds a grid by evaluating `f(row, col)` at every cell.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        cell_size: f64,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self::new(rows, cols, cell_size, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Returns a grid of the same shape and cell size holding `values`.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.rows, self.cols, self.cell_size, values)
    }

    /// Applies `f` to every value, keeping shape and cell size.
    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn ensure_shape(&self, rows: usize, cols: usize) -> Result<()> {
        if self.shape() != (rows, cols) {
            return Err(GridError::ShapeMismatch {
                expected: (rows, cols),
                got: self.shape(),
            });
        }
        Ok(())
    }
}

/// Square convolution kernel of odd size, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(GridError::EvenKernel(size));
        }
        if weights.len() != size * size {
            return Err(GridError::KernelLength {
                size,
                len: weights.len(),
                expected: size * size,
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(GridError::NonFiniteKernel);
        }
        Ok(Self { size, weights })
    }

    /// The `size x size` kernel with a single unit weight at the center.
    pub fn delta(size: usize) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(GridError::EvenKernel(size));
        }
        let mut weights = vec![0.0; size * size];
        weights[(size / 2) * size + size / 2] = 1.0;
        Self::new(size, weights)
    }

    /// The 1x1 identity kernel.
    pub fn identity() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.weights[a * self.size + b]
    }

    /// Kernel rotated by 180 degrees.
    pub fn flipped(&self) -> Self {
        let mut weights = self.weights.clone();
        weights.reverse();
        Self {
            size: self.size,
            weights,
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// True when the only nonzero weight is the center one.
    pub fn is_delta(&self) -> bool {
        let c = self.radius() * self.size + self.radius();
        self.weights
            .iter()
            .enumerate()
            .all(|(i, &w)| if i == c { w != 0.0 } else { w == 0.0 })
    }

    /// Largest kernel accepted for a `rows x cols` grid.
    pub fn max_size_for(rows: usize, cols: usize) -> usize {
        2 * rows.min(cols) + 1
    }

    fn check_fits(&self, rows: usize, cols: usize) -> Result<()> {
        let max = Self::max_size_for(rows, cols);
        if self.size > max {
            return Err(GridError::KernelTooLarge {
                size: self.size,
                rows,
                cols,
                max,
            });
        }
        Ok(())
    }
}

/// Isotropic Gaussian kernel of odd size `size` and `bandwidth` (in cells),
/// normalized to unit L2 norm.
pub fn gaussian_kernel(size: usize, bandwidth: f64) -> Result<Kernel> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(GridError::EvenKernel(size));
    }
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(GridError::BadBandwidth(bandwidth));
    }
    let c = (size / 2) as f64;
    let denom = 2.0 * bandwidth * bandwidth;
    let mut weights = Vec::with_capacity(size * size);
    for a in 0..size {
        for b in 0..size {
            let da = a as f64 - c;
            let db = b as f64 - c;
            weights.push((-(da * da + db * db) / denom).exp());
        }
    }
    let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
    weights.iter_mut().for_each(|w| *w /= norm);
    Kernel::new(size, weights)
}

thread_local! {
    static CONVOLUTIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of grid convolutions performed on the current thread.
pub fn convolution_count() -> u64 {
    CONVOLUTIONS.with(Cell::get)
}

pub fn reset_convolution_count() {
    CONVOLUTIONS.with(|c| c.set(0));
}

/// Zero-padded "same" convolution on raw row-major buffers. With `adjoint`
/// set the kernel is applied rotated by 180 degrees (the transpose operator).
///
/// `out` is overwritten. The caller guarantees `input.len() == out.len() ==
/// rows * cols` and that the kernel fits.
pub(crate) fn convolve_into(
    input: &[f64],
    rows: usize,
    cols: usize,
    kernel: &Kernel,
    adjoint: bool,
    out: &mut [f64],
) {
    debug_assert_eq!(input.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    CONVOLUTIONS.with(|c| c.set(c.get() + 1));

    let k = kernel.size;
    let r = kernel.radius() as isize;
    let w = &kernel.weights;
    for i in 0..rows {
        let out_row = &mut out[i * cols..(i + 1) * cols];
        out_row.iter_mut().for_each(|v| *v = 0.0);
        for a in 0..k {
            // forward: source row = i + a - r; adjoint: i - a + r
            let src_i = if adjoint {
                i as isize - a as isize + r
            } else {
                i as isize + a as isize - r
            };
            if src_i < 0 || src_i >= rows as isize {
                continue;
            }
            let src_row = &input[src_i as usize * cols..(src_i as usize + 1) * cols];
            for b in 0..k {
                let weight = w[a * k + b];
                if weight == 0.0 {
                    continue;
                }
                let shift = if adjoint { r - b as isize } else { b as isize - r };
                // out[j] += weight * src[j + shift] for valid j
                let j_lo = (-shift).max(0) as usize;
                let j_hi = (cols as isize - shift).min(cols as isize).max(0) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                let s_lo = (j_lo as isize + shift) as usize;
                let src = &src_row[s_lo..s_lo + (j_hi - j_lo)];
                for (o, &s) in out_row[j_lo..j_hi].iter_mut().zip(src) {
                    *o += weight * s;
                }
            }
        }
    }
}

fn convolve(x: &ScalarGrid, kernel: &Kernel, adjoint: bool) -> Result<ScalarGrid> {
    kernel.check_fits(x.rows, x.cols)?;
    let mut out = vec![0.0; x.len()];
    convolve_into(&x.values, x.rows, x.cols, kernel, adjoint, &mut out);
    x.with_values(out)
}

/// `g * x` with zero padding; equals `L vec(x)`.
pub fn conv2d(x: &ScalarGrid, kernel: &Kernel) -> Result<ScalarGrid> {
    convolve(x, kernel, false)
}

/// `L^T vec(x)`: convolution with the 180-degree rotated kernel.
pub fn conv2d_adjoint(x: &ScalarGrid, kernel: &Kernel) -> Result<ScalarGrid> {
    convolve(x, kernel, true)
}

/// Dense matrix `L` of the zero-padded convolution on a `rows x cols` grid.
///
/// Oracle-scale only: refuses grids with more than [`ORACLE_MAX_CELLS`] cells.
pub fn toeplitz_dense(kernel: &Kernel, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if rows == 0 || cols == 0 {
        return Err(GridError::EmptyShape { rows, cols });
    }
    let n = rows * cols;
    if n > ORACLE_MAX_CELLS {
        return Err(GridError::OracleScale {
            cells: n,
            max: ORACLE_MAX_CELLS,
        });
    }
    kernel.check_fits(rows, cols)?;
    let k = kernel.size as isize;
    let c = kernel.radius() as isize;
    let mut l = DMatrix::zeros(n, n);
    for i in 0..rows as isize {
        for j in 0..cols as isize {
            let row = (i * cols as isize + j) as usize;
            for a in 0..k {
                for b in 0..k {
                    let p = i + a - c;
                    let q = j + b - c;
                    if p < 0 || q < 0 || p >= rows as isize || q >= cols as isize {
                        continue;
                    }
                    let col = (p * cols as isize + q) as usize;
                    l[(row, col)] += kernel.weight(a as usize, b as usize);
                }
            }
        }
    }
    Ok(l)
}
