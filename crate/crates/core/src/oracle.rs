//! Slow reference implementations used to cross-check the fast paths.
//!
//! Nothing here shares code with the routines it checks: the permanent is a
//! plain sum over permutations, the exponential is a truncated Taylor series,
//! and the species sampler draws every species' photons one group at a time
//! instead of summing decompositions.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{ComplexMatrix, ONE};

/// `Σ_σ Π_i a_{i,σ(i)}` over all `n!` permutations (Heap's algorithm).
pub fn naive_permanent(m: &ComplexMatrix) -> Complex64 {
    let n = m.rows();
    assert_eq!(n, m.cols(), "naive permanent needs a square matrix");
    let mut perm: Vec<usize> = (0..n).collect();
    let term = |p: &[usize]| p.iter().enumerate().fold(ONE, |acc, (i, &j)| acc * m.get(i, j));
    let mut total = term(&perm);
    let mut c = vec![0usize; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            total += term(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    total
}

/// `e^{A}` for a general complex matrix by Taylor series with scaling and squaring.
pub fn expm_series(a: &ComplexMatrix) -> ComplexMatrix {
    let n = a.rows();
    let a = a.as_dmatrix();
    let norm: f64 = a.iter().map(|z| z.norm()).sum();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a.map(|z| z / 2f64.powi(squarings));
    let mut result = DMatrix::<Complex64>::identity(n, n);
    let mut term = DMatrix::<Complex64>::identity(n, n);
    for k in 1..=30 {
        term = (&term * &scaled).map(|z| z / k as f64);
        result += &term;
    }
    for _ in 0..squarings {
        result = &result * &result;
    }
    ComplexMatrix::from_dmatrix(result).expect("finite series")
}

/// Mode index drawn from `|column|²` of a unitary; the last mode absorbs rounding.
fn draw_mode(weights: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Output patterns of independent (fully distinguishable) photons entering
/// the modes listed in `input_modes` (zero-based), one draw per shot.
pub fn sample_independent_photons(
    u: &ComplexMatrix,
    input_modes: &[usize],
    shots: usize,
    seed: u64,
) -> Vec<Vec<usize>> {
    let m = u.rows();
    let columns: Vec<Vec<f64>> =
        input_modes.iter().map(|&j| (0..m).map(|i| u.get(i, j).norm_sqr()).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..shots)
        .map(|_| {
            let mut out = vec![0; m];
            for col in &columns {
                out[draw_mode(col, &mut rng)] += 1;
            }
            out
        })
        .collect()
}

/// Output pattern of a group of mutually indistinguishable photons, sampled
/// exactly by drawing from the full list of `(pattern, probability)` pairs.
fn draw_pattern(table: &[(Vec<usize>, f64)], rng: &mut impl Rng) -> Vec<usize> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (pattern, p) in table {
        acc += p;
        if u < acc {
            return pattern.clone();
        }
    }
    table.last().expect("non-empty table").0.clone()
}

/// Probability table of one indistinguishable group computed from first
/// principles: amplitude `perm(U[d(s), d(r)]) / √(Πr!Πs!)` with the permanent
/// taken by [`naive_permanent`].
pub fn indistinguishable_table(u: &ComplexMatrix, input: &[usize]) -> Vec<(Vec<usize>, f64)> {
    let m = u.rows();
    let n: usize = input.iter().sum();
    let fact = |k: usize| (1..=k).product::<usize>() as f64;
    let assign = |occ: &[usize]| -> Vec<usize> {
        occ.iter().enumerate().flat_map(|(j, &c)| std::iter::repeat_n(j, c)).collect()
    };
    let cols = assign(input);
    let rin: f64 = input.iter().map(|&c| fact(c)).product();
    all_patterns(n, m)
        .into_iter()
        .map(|s| {
            let rows = assign(&s);
            let amp = if n == 0 {
                ONE
            } else {
                let sub = ComplexMatrix::from_fn(n, n, |a, b| u.get(rows[a], cols[b])).unwrap();
                naive_permanent(&sub)
            };
            let rout: f64 = s.iter().map(|&c| fact(c)).product();
            let p = amp.norm_sqr() / (rin * rout);
            (s, p)
        })
        .collect()
}

fn all_patterns(n: usize, m: usize) -> Vec<Vec<usize>> {
    if m == 1 {
        return vec![vec![n]];
    }
    let mut out = Vec::new();
    for first in 0..=n {
        for mut rest in all_patterns(n - first, m - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Monte Carlo shots of a species-partitioned input: each species evolves as
/// its own indistinguishable group and the detected pattern is the sum.
pub fn sample_species(u: &ComplexMatrix, species: &[Vec<usize>], shots: usize, seed: u64) -> Vec<Vec<usize>> {
    let tables: Vec<_> = species.iter().map(|s| indistinguishable_table(u, s)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = u.rows();
    (0..shots)
        .map(|_| {
            let mut out = vec![0; m];
            for t in &tables {
                for (o, x) in out.iter_mut().zip(draw_pattern(t, &mut rng)) {
                    *o += x;
                }
            }
            out
        })
        .collect()
}

/// Largest squared Schmidt coefficient of a pure state given as a dense
/// amplitude matrix, by power iteration on `A A†`.
pub fn max_schmidt_power_iteration(a: &DMatrix<Complex64>) -> f64 {
    let g = a * a.adjoint();
    let n = g.nrows();
    let mut v = nalgebra::DVector::from_fn(n, |i, _| Complex64::new(1.0 + i as f64 * 0.37, 0.1 * i as f64));
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w = &g * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w / Complex64::new(norm, 0.0);
        let new_lambda = (next.adjoint() * &g * &next)[(0, 0)].re;
        v = next;
        if (new_lambda - lambda).abs() < 1e-15 {
            return new_lambda;
        }
        lambda = new_lambda;
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::ZERO;

    #[test]
    fn naive_permanent_small() {
        let m = ComplexMatrix::from_real_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!((naive_permanent(&m) - Complex64::new(10.0, 0.0)).norm() < 1e-14);
        let ones = ComplexMatrix::from_fn(4, 4, |_, _| ONE).unwrap();
        assert!((naive_permanent(&ones) - Complex64::new(24.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn series_exp_of_zero_is_identity() {
        let z = ComplexMatrix::from_fn(3, 3, |_, _| ZERO).unwrap();
        assert!(expm_series(&z).max_abs_diff(&ComplexMatrix::identity(3)).unwrap() < 1e-15);
    }
}
