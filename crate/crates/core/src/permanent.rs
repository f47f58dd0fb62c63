//! Matrix permanent by Ryser's inclusion-exclusion formula.
//!
//! Subsets of columns are visited in Gray-code order so each step updates the
//! running row sums with a single column, giving `O(2ⁿ·n)` work.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{dim, Error, Result};
use crate::linalg::{ComplexMatrix, ONE, ZERO};

/// Largest matrix size accepted by [`permanent`].
pub const MAX_PERMANENT_SIZE: usize = 24;

pub fn permanent(m: &ComplexMatrix) -> Result<Complex64> {
    if !m.is_square() {
        return Err(dim(format!("permanent needs a square matrix, got {}x{}", m.rows(), m.cols())));
    }
    permanent_of(m.as_dmatrix())
}

/// Permanent of a raw square matrix; an empty matrix has permanent 1.
pub(crate) fn permanent_of(a: &DMatrix<Complex64>) -> Result<Complex64> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(dim(format!("permanent needs a square matrix, got {}x{}", n, a.ncols())));
    }
    if n > MAX_PERMANENT_SIZE {
        return Err(Error::Capacity(format!("permanent of size {n} exceeds the limit of {MAX_PERMANENT_SIZE}")));
    }
    Ok(match n {
        0 => ONE,
        1 => a[(0, 0)],
        2 => a[(0, 0)] * a[(1, 1)] + a[(0, 1)] * a[(1, 0)],
        _ => ryser(a),
    })
}

fn ryser(a: &DMatrix<Complex64>) -> Complex64 {
    let n = a.nrows();
    let mut row_sums = vec![ZERO; n];
    let mut total = ZERO;
    let mut gray: u32 = 0;
    for k in 1u32..(1u32 << n) {
        let col = k.trailing_zeros() as usize;
        gray ^= 1 << col;
        if gray & (1 << col) != 0 {
            for (i, s) in row_sums.iter_mut().enumerate() {
                *s += a[(i, col)];
            }
        } else {
            for (i, s) in row_sums.iter_mut().enumerate() {
                *s -= a[(i, col)];
            }
        }
        let prod = row_sums.iter().fold(ONE, |acc, s| acc * s);
        if gray.count_ones() % 2 == 1 {
            total -= prod;
        } else {
            total += prod;
        }
    }
    if n % 2 == 1 {
        -total
    } else {
        total
    }
}
