//! Oracle checks runnable from the command line.

use std::fmt;

use photherm::apparatus::{compose, mesh_decompose};
use photherm::certify::{forbidden_patterns, lambda_coefficients, periodic_input};
use photherm::fock::{prob_distinguishable, prob_indistinguishable};
use photherm::hamiltonian::{build, evolution, HamiltonianSpec};
use photherm::linalg::{expm, fourier, haar_random, logm_unitary, unitarity_error};
use photherm::oracle::{expm_series, naive_permanent, sample_species};
use photherm::permanent::permanent;
use photherm::{ComplexMatrix, ModeOccupation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub residual: f64,
    pub tolerance: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag}  {:<44} residual {:.3e} (tol {:.0e})", self.name, self.residual, self.tolerance)
    }
}

fn check(name: impl Into<String>, residual: f64, tolerance: f64) -> Check {
    Check { name: name.into(), passed: residual < tolerance, residual, tolerance }
}

#[derive(Debug, Clone)]
pub struct Report {
    pub checks: Vec<Check>,
    /// `(class label, exact λ, Monte Carlo frequency)`
    pub lambdas: Vec<(String, f64, f64)>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        writeln!(f, "lambda table (n=3, m=4):")?;
        for (label, exact, mc) in &self.lambdas {
            writeln!(f, "  {label:<8} {exact:.10}  monte carlo {mc:.4}")?;
        }
        Ok(())
    }
}

fn random_matrix(n: usize, rng: &mut ChaCha8Rng) -> ComplexMatrix {
    ComplexMatrix::from_fn(n, n, |_, _| {
        num_complex::Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    })
    .expect("square")
}

pub fn run() -> photherm::Result<Report> {
    let mut checks = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let a = random_matrix(1 + k % 6, &mut rng);
        worst = worst.max((permanent(&a)? - naive_permanent(&a)).norm());
    }
    checks.push(check("ryser permanent vs naive sum (200, n<=6)", worst, 1e-12));

    let bs = fourier(2, 2)?;
    let one_one = ModeOccupation::new(vec![1, 1])?;
    checks.push(check("HOM suppression", prob_indistinguishable(&bs, &one_one, &one_one)?, 1e-14));
    checks.push(check("HOM distinguishable 1/2", (prob_distinguishable(&bs, &one_one, &one_one)? - 0.5).abs(), 1e-14));

    let mut worst: f64 = 0.0;
    for n in 2..=4 {
        let f = fourier(n, n + 1)?;
        let input = periodic_input(n, n + 1, 1)?;
        for s in &forbidden_patterns(n, n + 1, 1)?.patterns {
            worst = worst.max(prob_indistinguishable(&f, &input, s)?);
        }
    }
    checks.push(check("suppression law, n = 2..4", worst, 1e-12));

    let f = fourier(3, 4)?;
    let fs = forbidden_patterns(3, 4, 1)?;
    let shots = 100_000;
    let mut lambdas = Vec::new();
    for class in lambda_coefficients(3, 4)? {
        // photons in modes 1, 2, 3; the first block holds the largest part
        let mut species = Vec::new();
        let mut mode = 0;
        for &size in &class.sizes {
            let mut occ = vec![0; 4];
            for o in occ.iter_mut().skip(mode).take(size) {
                *o = 1;
            }
            mode += size;
            species.push(occ);
        }
        let samples = sample_species(&f, &species, shots, 7);
        let freq = samples.iter().filter(|s| fs.contains(&ModeOccupation::new(s.to_vec()).expect("pattern"))).count()
            as f64
            / shots as f64;
        let sigma = (class.lambda * (1.0 - class.lambda) / shots as f64).sqrt();
        checks.push(check(
            format!("lambda {} vs monte carlo (3 sigma)", class.label()),
            (freq - class.lambda).abs() / sigma,
            3.0,
        ));
        checks.push(check(format!("lambda {} placement spread", class.label()), class.max - class.min, 1e-12));
        lambdas.push((class.label(), class.lambda, freq));
    }

    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let h = build(&HamiltonianSpec::LongRangeFromHaar { m: 5, seed })?;
        let a = h.matrix().scale(num_complex::Complex64::new(0.0, -0.7));
        worst = worst.max(expm(&h, 0.7).max_abs_diff(&expm_series(&a))?);
    }
    checks.push(check("expm vs power series", worst, 1e-10));

    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let v = haar_random(6, seed)?;
        worst = worst.max(unitarity_error(&v)?);
        let back = expm(&logm_unitary(&v)?, 1.0);
        worst = worst.max(back.max_abs_diff(&v)?);
        worst = worst.max(compose(&mesh_decompose(&v)?)?.max_abs_diff(&v)?);
        let u = evolution(&HamiltonianSpec::hopping(6), seed as f64)?;
        worst = worst.max(unitarity_error(&u)?);
    }
    checks.push(check("unitary round trips (haar, log, mesh)", worst, 1e-9));

    Ok(Report { checks, lambdas })
}
