//! Two-setting fidelity certification.
//!
//! Setting 1 undoes the evolution and counts revivals of the input pattern
//! (`p₁`). Setting 2 undoes the evolution, applies a discrete Fourier
//! transform on the occupied block and counts suppressed ("forbidden")
//! patterns (`p₂`), which only partially distinguishable photons can reach.
//! With `λ_min` the smallest forbidden-pattern probability over the
//! distinguishable species classes,
//!
//! ```text
//! F ≥ p₁ − p₂/λ_min − δ(ε₁) − δ(ε₂).
//! ```

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::apparatus::{simulate_chain_with, Apparatus};
use crate::error::{dim, domain, Error, Result};
use crate::exec::{derive_seed, Execution};
use crate::fock::{
    enumerate_basis, output_distribution_with, prob_species, sample_indices, state_vector_with, Distinguishability,
    ModeOccupation, PatternCounts, SpeciesPartition,
};
use crate::hamiltonian::{evolution, HamiltonianSpec};
use crate::linalg::{fourier, ComplexMatrix};

/// Largest Fourier size for which [`lambda_coefficients`] enumerates every placement.
pub const MAX_LAMBDA_SIZE: usize = 6;

/// One photon in modes `1, 1+p, 1+2p, … ≤ n` of `m`.
pub fn periodic_input(n: usize, m: usize, period: usize) -> Result<ModeOccupation> {
    if n == 0 || period == 0 || !n.is_multiple_of(period) {
        return Err(domain(format!("period {period} must divide the Fourier size {n}")));
    }
    if n > m {
        return Err(dim(format!("Fourier size {n} exceeds {m} modes")));
    }
    ModeOccupation::new((0..m).map(|j| usize::from(j < n && j % period == 0)).collect())
}

/// `mod(p·Σ_j d_j(s), n) == 0`: the pattern survives the Fourier transform.
pub fn suppression_allowed(pattern: &ModeOccupation, n: usize, period: usize) -> bool {
    (period * pattern.assignment().sum()).is_multiple_of(n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForbiddenSet {
    pub n: usize,
    pub m: usize,
    pub period: usize,
    pub patterns: Vec<ModeOccupation>,
}

impl ForbiddenSet {
    pub fn contains(&self, pattern: &ModeOccupation) -> bool {
        self.patterns.binary_search(pattern).is_ok()
    }
}

/// Patterns of the `n/period` photons confined to the first `n` modes that the
/// suppression law forbids. Patterns reaching modes beyond `n` are neither
/// forbidden nor allowed and are left out.
pub fn forbidden_patterns(n: usize, m: usize, period: usize) -> Result<ForbiddenSet> {
    let input = periodic_input(n, m, period)?;
    let photons = input.total();
    let mut patterns: Vec<ModeOccupation> = enumerate_basis(photons, m)
        .into_iter()
        .filter(|s| s.counts()[n..].iter().all(|&c| c == 0))
        .filter(|s| !suppression_allowed(s, n, period))
        .collect();
    patterns.sort();
    Ok(ForbiddenSet { n, m, period, patterns })
}

/// Forbidden-pattern probability of one species-size class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaClass {
    /// Species sizes, descending.
    pub sizes: Vec<usize>,
    /// Mean over placements of the species on the input photons.
    pub lambda: f64,
    pub min: f64,
    pub max: f64,
    pub placements: usize,
}

impl LambdaClass {
    pub fn placement_independent(&self) -> bool {
        self.max - self.min <= 1e-12
    }

    pub fn label(&self) -> String {
        let parts: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        parts.join("+")
    }
}

/// `λ` for every partition of the input photons into at least two species,
/// through `fourier(n, m)` from the one-periodic input.
pub fn lambda_coefficients(n: usize, m: usize) -> Result<Vec<LambdaClass>> {
    lambda_coefficients_periodic(n, m, 1, Execution::default())
}

pub fn lambda_coefficients_periodic(n: usize, m: usize, period: usize, exec: Execution) -> Result<Vec<LambdaClass>> {
    if n > MAX_LAMBDA_SIZE {
        return Err(Error::Capacity(format!("λ enumeration limited to n ≤ {MAX_LAMBDA_SIZE}, got {n}")));
    }
    let input = periodic_input(n, m, period)?;
    let fs = forbidden_patterns(n, m, period)?;
    let f = fourier(n, m)?;
    let photons = input.total();
    let labelings = set_partitions(photons);
    let mut classes = Vec::new();
    for sizes in integer_partitions(photons).into_iter().filter(|p| p.len() >= 2) {
        let members: Vec<&Vec<usize>> = labelings.iter().filter(|l| block_sizes(l) == sizes).collect();
        let values: Vec<f64> = exec
            .map(members.len(), |i| {
                let partition = SpeciesPartition::from_labels(&input, members[i])?;
                fs.patterns.iter().map(|s| prob_species(&f, &partition, s)).sum::<Result<f64>>()
            })
            .into_iter()
            .collect::<Result<_>>()?;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lambda = values.iter().sum::<f64>() / values.len() as f64;
        classes.push(LambdaClass { sizes, lambda, min, max, placements: values.len() });
    }
    Ok(classes)
}

/// Smallest λ over classes and placements.
pub fn lambda_min(classes: &[LambdaClass]) -> Result<f64> {
    classes
        .iter()
        .map(|c| c.min)
        .reduce(f64::min)
        .ok_or_else(|| domain("no λ classes: at least two photons are needed"))
}

/// Partitions of `k` as descending part lists, largest first.
fn integer_partitions(k: usize) -> Vec<Vec<usize>> {
    fn rec(rem: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rem == 0 {
            out.push(cur.clone());
            return;
        }
        for part in (1..=rem.min(max)).rev() {
            cur.push(part);
            rec(rem - part, part, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, k, &mut Vec::new(), &mut out);
    out
}

/// Restricted-growth strings: every set partition of `k` labelled items once.
fn set_partitions(k: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, k: usize, blocks: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == k {
            out.push(cur.clone());
            return;
        }
        for b in 0..=blocks {
            cur.push(b);
            rec(i + 1, k, blocks.max(b + 1), cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, k, 0, &mut Vec::new(), &mut out);
    out
}

fn block_sizes(labels: &[usize]) -> Vec<usize> {
    let blocks = labels.iter().max().map_or(0, |b| b + 1);
    let mut sizes = vec![0; blocks];
    for &l in labels {
        sizes[l] += 1;
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    sizes
}

/// Observed fraction and the number of samples behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub p: f64,
    pub k: u64,
}

/// Fraction of samples equal to `target`.
pub fn estimate_p1(samples: &[ModeOccupation], target: &ModeOccupation) -> Result<Estimate> {
    estimate_counts(&PatternCounts::from_samples(samples), |s| s == target, |_| 1.0)
}

/// Fraction of samples in the forbidden set.
pub fn estimate_p2(samples: &[ModeOccupation], fs: &ForbiddenSet) -> Result<Estimate> {
    estimate_counts(&PatternCounts::from_samples(samples), |s| fs.contains(s), |_| 1.0)
}

/// Weighted fraction `Σ_hit w·c / Σ w·c`; `k` is the raw record count.
pub fn estimate_counts(
    counts: &PatternCounts,
    hit: impl Fn(&ModeOccupation) -> bool,
    weight: impl Fn(&ModeOccupation) -> f64,
) -> Result<Estimate> {
    if counts.total() == 0 {
        return Err(domain("no samples to estimate from"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (s, c) in counts.iter() {
        let w = weight(s) * c as f64;
        den += w;
        if hit(s) {
            num += w;
        }
    }
    if !(den > 0.0) {
        return Err(domain("all samples carry zero weight"));
    }
    Ok(Estimate { p: num / den, k: counts.total() })
}

/// `δ = √(2Σ / (k·ln(1/ε)))`
pub fn chebyshev_delta(variance: f64, k: u64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(domain(format!("ε = {epsilon} outside (0, 1)")));
    }
    if !(variance >= 0.0) {
        return Err(domain(format!("variance {variance} is negative")));
    }
    if k == 0 {
        return Err(domain("penalty needs at least one sample"));
    }
    Ok((2.0 * variance / (k as f64 * (1.0 / epsilon).ln())).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Worst case for a Bernoulli variable, `Σ = 1/4`.
    #[default]
    Bernoulli,
    /// Plug-in `p(1 − p)` from the estimate itself.
    Empirical,
}

impl VarianceMode {
    fn variance(self, p: f64) -> f64 {
        match self {
            VarianceMode::Bernoulli => 0.25,
            VarianceMode::Empirical => p * (1.0 - p),
        }
    }
}

/// Ways to read the two confidence parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpsilonReadings {
    /// `ε₁ε₂`, taking each `ε` as a confidence level.
    pub as_confidence: f64,
    /// `(1−ε₁)(1−ε₂)`, taking each `ε` as an error probability.
    pub as_error_probability: f64,
    /// `Π (1 − Σ/(k_i δ_i²))`, the joint coverage Chebyshev's inequality
    /// guarantees for the penalties actually used, floored at 0.
    pub chebyshev_coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationResult {
    pub p1: f64,
    pub k1: u64,
    pub p2: f64,
    pub k2: u64,
    pub epsilon1: f64,
    pub epsilon2: f64,
    /// `ε₁ε₂`
    pub epsilon: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta: f64,
    pub variance: VarianceMode,
    pub lambda_min: f64,
    pub f_lower: f64,
    pub witness_threshold: Option<f64>,
    pub entangled: Option<bool>,
    pub epsilon_readings: EpsilonReadings,
}

impl CertificationResult {
    /// Attach the witness threshold `λ²_max`; entanglement is certified when `f_lower` exceeds it.
    pub fn with_witness(mut self, threshold: f64) -> Self {
        self.witness_threshold = Some(threshold);
        self.entangled = Some(self.f_lower > threshold);
        self
    }
}

/// `f_lower = p₁ − p₂/min λ − δ(ε₁) − δ(ε₂)`
pub fn fidelity_bound(
    p1: Estimate,
    p2: Estimate,
    lambdas: &[f64],
    epsilon1: f64,
    epsilon2: f64,
    variance: VarianceMode,
) -> Result<CertificationResult> {
    let lambda_min = lambdas.iter().copied().reduce(f64::min).ok_or_else(|| domain("empty λ list"))?;
    if !(lambda_min > 0.0) {
        return Err(domain(format!("λ_min = {lambda_min} must be positive")));
    }
    for (name, e) in [("p1", p1.p), ("p2", p2.p)] {
        if !(0.0..=1.0).contains(&e) {
            return Err(domain(format!("{name} = {e} is not a probability")));
        }
    }
    let (s1, s2) = (variance.variance(p1.p), variance.variance(p2.p));
    let delta1 = chebyshev_delta(s1, p1.k, epsilon1)?;
    let delta2 = chebyshev_delta(s2, p2.k, epsilon2)?;
    let coverage = |s: f64, k: u64, d: f64| if d > 0.0 { (1.0 - s / (k as f64 * d * d)).max(0.0) } else { 1.0 };
    let readings = EpsilonReadings {
        as_confidence: epsilon1 * epsilon2,
        as_error_probability: (1.0 - epsilon1) * (1.0 - epsilon2),
        chebyshev_coverage: coverage(s1, p1.k, delta1) * coverage(s2, p2.k, delta2),
    };
    Ok(CertificationResult {
        p1: p1.p,
        k1: p1.k,
        p2: p2.p,
        k2: p2.k,
        epsilon1,
        epsilon2,
        epsilon: epsilon1 * epsilon2,
        delta1,
        delta2,
        delta: delta1 + delta2,
        variance,
        lambda_min,
        f_lower: p1.p - p2.p / lambda_min - delta1 - delta2,
        witness_threshold: None,
        entangled: None,
        epsilon_readings: readings,
    })
}

/// Three photons with the fixed weight `9/4` on `p₂` (`λ = 4/9`), smaller than the exact
/// `λ_min = 2/3` and therefore a looser but still valid bound.
pub fn fidelity_bound_three_photons(
    p1: Estimate,
    p2: Estimate,
    epsilon1: f64,
    epsilon2: f64,
    variance: VarianceMode,
) -> Result<CertificationResult> {
    fidelity_bound(p1, p2, &[4.0 / 9.0], epsilon1, epsilon2, variance)
}

/// `λ²_max` for the bipartition {modes `1..=k`} | rest.
pub fn witness_threshold(u: &ComplexMatrix, r: &ModeOccupation, partition_mode: usize) -> Result<f64> {
    let a: Vec<usize> = (1..=partition_mode).collect();
    witness_threshold_for(u, r, &a)
}

/// Largest squared Schmidt coefficient of `U|r⟩` across the split between the
/// one-based modes in `a_modes` and all other modes.
pub fn witness_threshold_for(u: &ComplexMatrix, r: &ModeOccupation, a_modes: &[usize]) -> Result<f64> {
    let m = r.modes();
    let mut in_a = vec![false; m];
    for &k in a_modes {
        if k == 0 || k > m {
            return Err(domain(format!("mode {k} outside 1..={m}")));
        }
        in_a[k - 1] = true;
    }
    let na = in_a.iter().filter(|x| **x).count();
    if na == 0 || na == m {
        return Err(domain("bipartition leaves one side empty"));
    }
    let amps = state_vector_with(u, r, Execution::Sequential)?;
    let basis = enumerate_basis(r.total(), m);
    // amplitudes split by photon number on side A; each block is a matrix
    type Block = (HashMap<Vec<usize>, usize>, HashMap<Vec<usize>, usize>, Vec<(usize, usize, Complex64)>);
    let mut blocks: HashMap<usize, Block> = HashMap::new();
    for (s, amp) in basis.iter().zip(amps) {
        if amp == Complex64::new(0.0, 0.0) {
            continue;
        }
        let a: Vec<usize> = (0..m).filter(|&j| in_a[j]).map(|j| s.get(j)).collect();
        let b: Vec<usize> = (0..m).filter(|&j| !in_a[j]).map(|j| s.get(j)).collect();
        let block = blocks.entry(a.iter().sum()).or_default();
        let next = block.0.len();
        let i = *block.0.entry(a).or_insert(next);
        let next = block.1.len();
        let j = *block.1.entry(b).or_insert(next);
        block.2.push((i, j, amp));
    }
    let mut best: f64 = 0.0;
    for (rows, cols, entries) in blocks.values() {
        let mut mat = DMatrix::<Complex64>::zeros(rows.len(), cols.len());
        for &(i, j, z) in entries {
            mat[(i, j)] = z;
        }
        let top = mat.singular_values().iter().copied().fold(0.0, f64::max);
        best = best.max(top * top);
    }
    Ok(best)
}

/// Shot budget and statistical settings of one certification run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertifyOptions {
    pub shots: usize,
    /// Interleaved batches; each re-draws the chip imperfections.
    pub batches: usize,
    pub seed: u64,
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub variance: VarianceMode,
    /// Witness side A is modes `1..=bipartition`.
    pub bipartition: usize,
    pub period: usize,
    #[serde(skip)]
    pub exec: Execution,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self {
            shots: 100_000,
            batches: 1,
            seed: 0,
            epsilon1: 0.9,
            epsilon2: 0.9,
            variance: VarianceMode::Bernoulli,
            bipartition: 1,
            period: 1,
            exec: Execution::default(),
        }
    }
}

/// Raw pattern histograms of one batch, both settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BatchCounts {
    pub setting1: PatternCounts,
    pub setting2: PatternCounts,
}

/// Cumulative certification after the first `batches` batches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergencePoint {
    pub batches: usize,
    pub records1: u64,
    pub records2: u64,
    /// `1/√T` with `T` the cumulative shot count.
    pub inv_sqrt_t: f64,
    pub p1: f64,
    pub p2: f64,
    pub f_lower: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificationRun {
    pub result: CertificationResult,
    pub lambdas: Vec<LambdaClass>,
    pub convergence: Vec<ConvergencePoint>,
}

/// Prepared protocol for one evolution: unitaries, input, forbidden set and λ.
struct Protocol<'a> {
    u: ComplexMatrix,
    input: ModeOccupation,
    fs: ForbiddenSet,
    lambdas: Vec<LambdaClass>,
    model: &'a Distinguishability,
    apparatus: Option<&'a Apparatus>,
    opts: &'a CertifyOptions,
}

impl Protocol<'_> {
    fn sections(&self, setting: usize) -> Result<Vec<ComplexMatrix>> {
        let back = self.u.dagger();
        Ok(match setting {
            1 => vec![self.u.clone(), back],
            _ => vec![self.u.clone(), &fourier(self.fs.n, self.u.rows())? * &back],
        })
    }

    fn batch(&self, shots: usize, seed: u64) -> Result<BatchCounts> {
        let mut out = BatchCounts::default();
        for setting in [1, 2] {
            let sections = self.sections(setting)?;
            let stream = derive_seed(seed, setting as u64);
            let counts = match self.apparatus {
                None => {
                    let total = sections.iter().fold(ComplexMatrix::identity(self.u.rows()), |acc, s| s * &acc);
                    let dist = output_distribution_with(&total, &self.input, self.model, self.opts.exec)?;
                    let mut c = PatternCounts::default();
                    for i in sample_indices(&dist, shots, stream, self.opts.exec) {
                        c.add(dist.basis()[i].clone());
                    }
                    c
                }
                Some(app) => {
                    // blinding only bites on the concentrated revival of setting 1
                    let target = (setting == 1).then_some(&self.input);
                    let records = simulate_chain_with(
                        &sections,
                        &self.input,
                        self.model,
                        app,
                        target,
                        shots,
                        stream,
                        self.opts.exec,
                    )?;
                    app.detection.postselect(&records, self.input.total())?
                }
            };
            match setting {
                1 => out.setting1 = counts,
                _ => out.setting2 = counts,
            }
        }
        Ok(out)
    }

    fn bound(&self, counts: &BatchCounts) -> Result<CertificationResult> {
        let weight = |s: &ModeOccupation| match self.apparatus {
            None => 1.0,
            Some(app) => app.detection.correction_weight(s),
        };
        let p1 = estimate_counts(&counts.setting1, |s| *s == self.input, weight)?;
        let p2 = estimate_counts(&counts.setting2, |s| self.fs.contains(s), weight)?;
        let lambdas: Vec<f64> = self.lambdas.iter().map(|c| c.min).collect();
        fidelity_bound(p1, p2, &lambdas, self.opts.epsilon1, self.opts.epsilon2, self.opts.variance)
    }
}

/// End-to-end certification of `e^{-iHt}|input⟩`, noiseless unless an
/// apparatus is supplied.
pub fn certify(
    spec: &HamiltonianSpec,
    t: f64,
    input: &ModeOccupation,
    model: &Distinguishability,
    opts: &CertifyOptions,
    apparatus: Option<&Apparatus>,
) -> Result<CertificationResult> {
    Ok(certify_run(spec, t, input, model, opts, apparatus)?.result)
}

/// [`certify`] plus the batch-by-batch convergence of the bound.
pub fn certify_run(
    spec: &HamiltonianSpec,
    t: f64,
    input: &ModeOccupation,
    model: &Distinguishability,
    opts: &CertifyOptions,
    apparatus: Option<&Apparatus>,
) -> Result<CertificationRun> {
    if opts.shots == 0 || opts.batches == 0 || opts.batches > opts.shots {
        return Err(domain("certification needs shots ≥ batches ≥ 1"));
    }
    let m = input.modes();
    if spec.modes() != m {
        return Err(dim(format!("{}-mode Hamiltonian with a {m}-mode input", spec.modes())));
    }
    let n = input.total() * opts.period;
    if *input != periodic_input(n, m, opts.period)? {
        return Err(domain(format!("input {input} is not the {}-periodic pattern on {n} modes", opts.period)));
    }
    let protocol = Protocol {
        u: evolution(spec, t)?,
        input: input.clone(),
        fs: forbidden_patterns(n, m, opts.period)?,
        lambdas: lambda_coefficients_periodic(n, m, opts.period, opts.exec)?,
        model,
        apparatus,
        opts,
    };
    let threshold = witness_threshold(&protocol.u, input, opts.bipartition)?;
    let mut total = BatchCounts::default();
    let mut convergence = Vec::with_capacity(opts.batches);
    let mut shots_so_far = 0usize;
    for b in 0..opts.batches {
        let shots = opts.shots / opts.batches + usize::from(b < opts.shots % opts.batches);
        let batch = protocol.batch(shots, derive_seed(opts.seed, b as u64))?;
        total.setting1.merge(&batch.setting1);
        total.setting2.merge(&batch.setting2);
        shots_so_far += shots;
        let r = protocol.bound(&total)?;
        convergence.push(ConvergencePoint {
            batches: b + 1,
            records1: r.k1,
            records2: r.k2,
            inv_sqrt_t: 1.0 / (shots_so_far as f64).sqrt(),
            p1: r.p1,
            p2: r.p2,
            f_lower: r.f_lower,
        });
    }
    let result = protocol.bound(&total)?.with_witness(threshold);
    Ok(CertificationRun { result, lambdas: protocol.lambdas, convergence })
}
