//! Fock-space bookkeeping and exact multi-photon transition probabilities.
//!
//! Convention: a passive transformation `U` sends the creation operator of
//! input mode `j` to `Σ_i U_ij a†_i`. The transition amplitude between
//! occupations `r` (input) and `s` (output) is the permanent of the
//! `n×n` matrix whose rows are picked by the mode assignment of `s` and whose
//! columns are picked by the mode assignment of `r`.
//!
//! Patterns of `n` photons in `m` modes are enumerated in colexicographic
//! order (last mode varies slowest); every distribution and sampler shares
//! that order.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{dim, domain, Error, Result};
use crate::exec::{derive_seed, Execution};
use crate::linalg::ComplexMatrix;
use crate::permanent::{permanent_of, MAX_PERMANENT_SIZE};

/// Tolerance on the total probability of a distribution.
pub const NORM_TOL: f64 = 1e-9;

/// Photon counts per mode, `(n₁, …, n_m)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct ModeOccupation(Vec<usize>);

impl ModeOccupation {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(dim("occupation needs at least one mode"));
        }
        Ok(Self(counts))
    }

    pub fn vacuum(m: usize) -> Result<Self> {
        Self::new(vec![0; m])
    }

    /// One photon in each of the first `n` of `m` modes.
    pub fn ones(n: usize, m: usize) -> Result<Self> {
        if n > m {
            return Err(dim(format!("{n} single photons do not fit in {m} modes")));
        }
        Self::new((0..m).map(|j| usize::from(j < n)).collect())
    }

    pub fn counts(&self) -> &[usize] {
        &self.0
    }

    pub fn modes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn get(&self, mode: usize) -> usize {
        self.0[mode]
    }

    pub fn assignment(&self) -> ModeAssignment {
        ModeAssignment(self.0.iter().enumerate().flat_map(|(j, &c)| std::iter::repeat_n(j + 1, c)).collect())
    }

    /// `Π_j n_j!`
    pub fn factorial_product(&self) -> f64 {
        self.0.iter().map(|&c| factorial(c)).product()
    }

    /// Compact key used in CSV files: counts joined by `:`.
    pub fn key(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        parts.join(":")
    }
}

impl fmt::Display for ModeOccupation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl FromStr for ModeOccupation {
    type Err = Error;

    /// Accepts `1:1:1:0`, `1,1,1,0` or `(1,1,1,0)`.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let counts = inner
            .split([':', ','])
            .map(|p| p.trim().parse::<usize>().map_err(|e| Error::Parse(format!("bad pattern {s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(counts)
    }
}

impl<'de> Deserialize<'de> for ModeOccupation {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        ModeOccupation::new(Vec::deserialize(d)?).map_err(D::Error::custom)
    }
}

/// Photon-indexed list of occupied modes, one-based and non-decreasing:
/// `(2,0,0,1) ↦ (1,1,4)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModeAssignment(Vec<usize>);

impl ModeAssignment {
    /// Build from one-based mode labels; they are sorted on the way in.
    pub fn new(mut modes: Vec<usize>, m: usize) -> Result<Self> {
        if modes.iter().any(|&k| k == 0 || k > m) {
            return Err(domain(format!("mode labels must lie in 1..={m}")));
        }
        modes.sort_unstable();
        Ok(Self(modes))
    }

    pub fn modes(&self) -> &[usize] {
        &self.0
    }

    pub fn occupation(&self, m: usize) -> Result<ModeOccupation> {
        let mut counts = vec![0; m];
        for &k in &self.0 {
            if k == 0 || k > m {
                return Err(domain(format!("mode label {k} outside 1..={m}")));
            }
            counts[k - 1] += 1;
        }
        ModeOccupation::new(counts)
    }

    pub fn sum(&self) -> usize {
        self.0.iter().sum()
    }
}

pub(crate) fn factorial(k: usize) -> f64 {
    (1..=k).map(|x| x as f64).product()
}

/// Grouping of the input photons into mutually distinguishable species.
/// Photons within one species are perfectly indistinguishable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeciesPartition {
    species: Vec<ModeOccupation>,
}

impl SpeciesPartition {
    pub fn new(species: Vec<ModeOccupation>) -> Result<Self> {
        let Some(first) = species.first() else {
            return Err(domain("partition needs at least one species"));
        };
        let m = first.modes();
        if species.iter().any(|s| s.modes() != m) {
            return Err(dim("species occupations must share the mode count"));
        }
        if species.iter().any(|s| s.total() == 0) {
            return Err(domain("every species needs at least one photon"));
        }
        let mut species = species;
        species.sort();
        Ok(Self { species })
    }

    /// All photons in one species.
    pub fn single(input: &ModeOccupation) -> Result<Self> {
        Self::new(vec![input.clone()])
    }

    /// Every photon its own species.
    pub fn singletons(input: &ModeOccupation) -> Result<Self> {
        let m = input.modes();
        Self::new(
            input
                .assignment()
                .modes()
                .iter()
                .map(|&k| {
                    let mut c = vec![0; m];
                    c[k - 1] = 1;
                    ModeOccupation(c)
                })
                .collect(),
        )
    }

    /// Species from a label per photon, photons ordered as in the mode assignment of `input`.
    pub fn from_labels(input: &ModeOccupation, labels: &[usize]) -> Result<Self> {
        let assignment = input.assignment();
        if labels.len() != assignment.modes().len() {
            return Err(dim(format!("{} labels for {} photons", labels.len(), assignment.modes().len())));
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (&mode, &label) in assignment.modes().iter().zip(labels) {
            groups.entry(label).or_insert_with(|| vec![0; input.modes()])[mode - 1] += 1;
        }
        Self::new(groups.into_values().map(ModeOccupation).collect())
    }

    pub fn species(&self) -> &[ModeOccupation] {
        &self.species
    }

    pub fn modes(&self) -> usize {
        self.species[0].modes()
    }

    /// Element-wise sum of the species occupations.
    pub fn total_occupation(&self) -> ModeOccupation {
        let mut counts = vec![0; self.modes()];
        for s in &self.species {
            for (c, x) in counts.iter_mut().zip(s.counts()) {
                *c += x;
            }
        }
        ModeOccupation(counts)
    }

    /// Species sizes, descending.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.species.iter().map(ModeOccupation::total).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        sizes
    }
}

impl<'de> Deserialize<'de> for SpeciesPartition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Repr {
            species: Vec<ModeOccupation>,
        }
        SpeciesPartition::new(Repr::deserialize(d)?.species).map_err(D::Error::custom)
    }
}

/// One weighted term of a [`Distinguishability::Mixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub partition: SpeciesPartition,
}

/// Internal-state model of the input photons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distinguishability {
    Indistinguishable,
    Distinguishable,
    Species {
        partition: SpeciesPartition,
    },
    /// Convex combination of species configurations.
    Mixture {
        components: Vec<MixtureComponent>,
    },
}

impl Distinguishability {
    /// Mixture in which every photon independently sits in a shared internal
    /// state with probability `q = √overlap` and is otherwise distinguishable
    /// from all others. Any two photons then have mean squared overlap
    /// `q² = overlap`.
    pub fn from_overlap(input: &ModeOccupation, overlap: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&overlap) {
            return Err(domain(format!("overlap {overlap} outside [0, 1]")));
        }
        Self::from_photon_purities(input, &vec![overlap.sqrt(); input.total()])
    }

    /// Photon `i` (in mode-assignment order) sits in the shared internal state
    /// with probability `q[i]`, independently of the others; the pairwise
    /// overlap of photons `i` and `j` is then `q[i]·q[j]`.
    pub fn from_photon_purities(input: &ModeOccupation, q: &[f64]) -> Result<Self> {
        let n = input.total();
        if n == 0 {
            return Err(domain("overlap model needs at least one photon"));
        }
        if q.len() != n {
            return Err(dim(format!("{} purities for {n} photons", q.len())));
        }
        if let Some(x) = q.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(domain(format!("purity {x} outside [0, 1]")));
        }
        if n > 20 {
            return Err(Error::Capacity(format!("overlap mixture over {n} photons")));
        }
        let mut components: Vec<MixtureComponent> = Vec::new();
        for mask in 0u32..(1 << n) {
            let weight: f64 = (0..n).map(|k| if mask & (1 << k) != 0 { q[k] } else { 1.0 - q[k] }).product();
            if weight == 0.0 {
                continue;
            }
            let labels: Vec<usize> = (0..n).map(|k| if mask & (1 << k) != 0 { 0 } else { k + 1 }).collect();
            let partition = SpeciesPartition::from_labels(input, &labels)?;
            match components.iter_mut().find(|c| c.partition == partition) {
                Some(c) => c.weight += weight,
                None => components.push(MixtureComponent { weight, partition }),
            }
        }
        Ok(Distinguishability::Mixture { components })
    }

    /// Purities fitted to pairwise overlaps `o[i][j]` (photons in
    /// mode-assignment order) by least squares on `ln q_i + ln q_j = ln o_ij`,
    /// which is exact for three photons.
    pub fn from_pairwise_overlaps(input: &ModeOccupation, overlaps: &[Vec<f64>]) -> Result<Self> {
        let q = purities_from_overlaps(overlaps)?;
        if input.total() != q.len() {
            return Err(dim(format!("{} overlaps rows for {} photons", q.len(), input.total())));
        }
        Self::from_photon_purities(input, &q)
    }

    /// Short name used in file names and reports.
    pub fn label(&self) -> &'static str {
        match self {
            Distinguishability::Indistinguishable => "indistinguishable",
            Distinguishability::Distinguishable => "distinguishable",
            Distinguishability::Species { .. } => "species",
            Distinguishability::Mixture { .. } => "mixture",
        }
    }

    fn validate(&self, input: &ModeOccupation) -> Result<()> {
        match self {
            Distinguishability::Indistinguishable | Distinguishability::Distinguishable => Ok(()),
            Distinguishability::Species { partition } => check_partition(partition, input),
            Distinguishability::Mixture { components } => {
                if components.is_empty() {
                    return Err(domain("mixture needs at least one component"));
                }
                let mut sum = 0.0;
                for c in components {
                    if !(c.weight >= 0.0) {
                        return Err(domain(format!("mixture weight {} is negative", c.weight)));
                    }
                    sum += c.weight;
                    check_partition(&c.partition, input)?;
                }
                if (sum - 1.0).abs() > NORM_TOL {
                    return Err(domain(format!("mixture weights sum to {sum}, expected 1")));
                }
                Ok(())
            }
        }
    }
}

/// Per-photon purities whose products best match the pairwise overlaps.
pub fn purities_from_overlaps(overlaps: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = overlaps.len();
    if n < 2 || overlaps.iter().any(|r| r.len() != n) {
        return Err(dim("overlap matrix must be square with at least two photons"));
    }
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let o = overlaps[i][j];
            if !(o > 0.0 && o <= 1.0) || (overlaps[j][i] - o).abs() > 1e-12 {
                return Err(domain(format!("overlap ({},{}) = {o} must be symmetric and in (0, 1]", i + 1, j + 1)));
            }
            let mut row = vec![0.0; n];
            row[i] = 1.0;
            row[j] = 1.0;
            rows.push(row);
            rhs.push(o.ln());
        }
    }
    let q: Vec<f64> = if n == 2 {
        vec![(0.5 * rhs[0]).exp(); 2]
    } else {
        let a = nalgebra::DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
        let b = nalgebra::DVector::from_vec(rhs);
        let x = a.svd(true, true).solve(&b, 1e-14).map_err(|e| domain(e.to_string()))?;
        x.iter().map(|v| v.exp()).collect()
    };
    if let Some(x) = q.iter().find(|x| **x > 1.0 + 1e-12) {
        return Err(domain(format!("overlaps imply a purity {x} above 1")));
    }
    Ok(q.into_iter().map(|x| x.min(1.0)).collect())
}

fn check_partition(partition: &SpeciesPartition, input: &ModeOccupation) -> Result<()> {
    if partition.total_occupation() != *input {
        return Err(domain(format!("species sum to {} but the input is {}", partition.total_occupation(), input)));
    }
    Ok(())
}

/// All weak compositions of `n` into `m` parts, colexicographic order.
pub fn enumerate_basis(n: usize, m: usize) -> Vec<ModeOccupation> {
    assert!(m >= 1, "basis needs at least one mode");
    let mut out = Vec::with_capacity(basis_size(n, m));
    let mut current = vec![0; m];
    fill_colex(n, m, &mut current, &mut out);
    out
}

fn fill_colex(remaining: usize, modes: usize, current: &mut Vec<usize>, out: &mut Vec<ModeOccupation>) {
    if modes == 1 {
        current[0] = remaining;
        out.push(ModeOccupation(current.clone()));
        return;
    }
    for last in 0..=remaining {
        current[modes - 1] = last;
        fill_colex(remaining - last, modes - 1, current, out);
    }
    current[modes - 1] = 0;
}

/// `C(n+m−1, n)`
pub fn basis_size(n: usize, m: usize) -> usize {
    let mut acc: u128 = 1;
    for k in 1..=n as u128 {
        acc = acc * (m as u128 - 1 + k) / k;
    }
    acc as usize
}

/// Patterns `t ≤ bound` (element-wise) with `Σt = n`, colexicographic order.
pub(crate) fn bounded_patterns(n: usize, bound: &[usize]) -> Vec<Vec<usize>> {
    fn rec(rem: usize, k: usize, bound: &[usize], cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 0 {
            if rem == 0 {
                out.push(cur.clone());
            }
            return;
        }
        let capacity: usize = bound[..k - 1].iter().sum();
        let lo = rem.saturating_sub(capacity);
        for last in lo..=rem.min(bound[k - 1]) {
            cur[k - 1] = last;
            rec(rem - last, k - 1, bound, cur, out);
        }
        cur[k - 1] = 0;
    }
    let mut out = Vec::new();
    let mut cur = vec![0; bound.len()];
    rec(n, bound.len(), bound, &mut cur, &mut out);
    out
}

fn check_transition(u: &ComplexMatrix, r: &ModeOccupation, s: &ModeOccupation) -> Result<()> {
    if !u.is_square() {
        return Err(dim(format!("transfer matrix must be square, got {}x{}", u.rows(), u.cols())));
    }
    if r.modes() != u.rows() || s.modes() != u.rows() {
        return Err(dim(format!(
            "occupations of length {} and {} on a {}-mode transformation",
            r.modes(),
            s.modes(),
            u.rows()
        )));
    }
    if r.total() != s.total() {
        return Err(domain(format!("photon numbers differ: {} in, {} out", r.total(), s.total())));
    }
    if r.total() > MAX_PERMANENT_SIZE {
        return Err(Error::Capacity(format!("{} photons exceed the permanent limit", r.total())));
    }
    Ok(())
}

/// `M_ab = U[d(s)_a, d(r)_b]`, repeating rows/columns for multiply occupied modes.
pub fn submatrix(u: &ComplexMatrix, r: &ModeOccupation, s: &ModeOccupation) -> Result<nalgebra::DMatrix<Complex64>> {
    check_transition(u, r, s)?;
    Ok(raw_submatrix(u, r, s))
}

fn raw_submatrix(u: &ComplexMatrix, r: &ModeOccupation, s: &ModeOccupation) -> nalgebra::DMatrix<Complex64> {
    let rows = s.assignment();
    let cols = r.assignment();
    let n = cols.modes().len();
    nalgebra::DMatrix::from_fn(n, n, |a, b| u.get(rows.modes()[a] - 1, cols.modes()[b] - 1))
}

/// `⟨s|U(V)|r⟩ = perm(M) / √(Πr! Πs!)`
pub fn amplitude(u: &ComplexMatrix, r: &ModeOccupation, s: &ModeOccupation) -> Result<Complex64> {
    check_transition(u, r, s)?;
    let perm = permanent_of(&raw_submatrix(u, r, s))?;
    Ok(perm / (r.factorial_product() * s.factorial_product()).sqrt())
}

/// `|perm(M)|² / (Πr! Πs!)`
pub fn prob_indistinguishable(u: &ComplexMatrix, r: &ModeOccupation, s: &ModeOccupation) -> Result<f64> {
    check_transition(u, r, s)?;
    let perm = permanent_of(&raw_submatrix(u, r, s))?;
    Ok(perm.norm_sqr() / (r.factorial_product() * s.factorial_product()))
}

/// `perm(|M|²) / Πs!`
pub fn prob_distinguishable(u: &ComplexMatrix, r: &ModeOccupation, s: &ModeOccupation) -> Result<f64> {
    check_transition(u, r, s)?;
    let m = raw_submatrix(u, r, s).map(|z| Complex64::new(z.norm_sqr(), 0.0));
    // the permanent of a non-negative matrix is non-negative; Ryser's signed sum may leave rounding residue
    Ok(permanent_of(&m)?.re.max(0.0) / s.factorial_product())
}

/// Sum over all decompositions `s = Σᵢ s⁽ⁱ⁾` of `Πᵢ P_indist(r⁽ⁱ⁾ → s⁽ⁱ⁾)`.
pub fn prob_species(u: &ComplexMatrix, partition: &SpeciesPartition, s: &ModeOccupation) -> Result<f64> {
    let total = partition.total_occupation();
    check_transition(u, &total, s)?;
    let species = partition.species();
    if species.len() == 1 {
        return prob_indistinguishable(u, &species[0], s);
    }
    species_sum(u, species, s.counts().to_vec())
}

fn species_sum(u: &ComplexMatrix, species: &[ModeOccupation], remaining: Vec<usize>) -> Result<f64> {
    let (head, tail) = species.split_first().expect("non-empty species list");
    if tail.is_empty() {
        return prob_indistinguishable(u, head, &ModeOccupation(remaining));
    }
    let mut total = 0.0;
    for part in bounded_patterns(head.total(), &remaining) {
        let p = prob_indistinguishable(u, head, &ModeOccupation(part.clone()))?;
        if p == 0.0 {
            continue;
        }
        let rest: Vec<usize> = remaining.iter().zip(&part).map(|(a, b)| a - b).collect();
        total += p * species_sum(u, tail, rest)?;
    }
    Ok(total)
}

/// Probability distribution over the canonical `n`-photon basis of `m` modes.
#[derive(Debug, Clone, Serialize)]
pub struct FockDistribution {
    n: usize,
    m: usize,
    basis: Vec<ModeOccupation>,
    probs: Vec<f64>,
    #[serde(skip)]
    index: HashMap<ModeOccupation, usize>,
}

impl PartialEq for FockDistribution {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n && self.m == other.m && self.basis == other.basis && self.probs == other.probs
    }
}

impl FockDistribution {
    /// Probabilities listed in canonical basis order.
    pub fn new(n: usize, m: usize, probs: Vec<f64>) -> Result<Self> {
        if m == 0 {
            return Err(dim("distribution needs at least one mode"));
        }
        let basis = enumerate_basis(n, m);
        Self::from_parts(basis, probs)
    }

    /// Validate a `(basis, probs)` pair; the basis must be the canonical one.
    pub fn from_parts(basis: Vec<ModeOccupation>, probs: Vec<f64>) -> Result<Self> {
        let first = basis.first().ok_or_else(|| dim("empty basis"))?;
        let (n, m) = (first.total(), first.modes());
        if basis != enumerate_basis(n, m) {
            return Err(domain("basis is not the canonical colexicographic enumeration"));
        }
        if probs.len() != basis.len() {
            return Err(dim(format!("{} probabilities for {} patterns", probs.len(), basis.len())));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(domain(format!("invalid probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(domain(format!("probabilities sum to {sum}")));
        }
        let index = basis.iter().cloned().enumerate().map(|(i, b)| (b, i)).collect();
        Ok(Self { n, m, basis, probs, index })
    }

    /// Normalise non-negative weights over the canonical basis.
    pub fn from_weights(n: usize, m: usize, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) {
            return Err(domain("weights have no mass"));
        }
        Self::new(n, m, weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn point_mass(pattern: &ModeOccupation) -> Self {
        let basis = enumerate_basis(pattern.total(), pattern.modes());
        let probs = basis.iter().map(|b| if b == pattern { 1.0 } else { 0.0 }).collect();
        Self::from_parts(basis, probs).expect("point mass is valid")
    }

    pub fn photons(&self) -> usize {
        self.n
    }

    pub fn modes(&self) -> usize {
        self.m
    }

    pub fn basis(&self) -> &[ModeOccupation] {
        &self.basis
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn index_of(&self, pattern: &ModeOccupation) -> Option<usize> {
        self.index.get(pattern).copied()
    }

    /// Zero for patterns outside the basis.
    pub fn prob(&self, pattern: &ModeOccupation) -> f64 {
        self.index_of(pattern).map_or(0.0, |i| self.probs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModeOccupation, f64)> {
        self.basis.iter().zip(self.probs.iter().copied())
    }

    /// Patterns with probability above `threshold`.
    pub fn support(&self, threshold: f64) -> Vec<&ModeOccupation> {
        self.iter().filter(|(_, p)| *p > threshold).map(|(b, _)| b).collect()
    }

    /// Empirical distribution of samples, all of which must carry `n` photons in `m` modes.
    pub fn empirical(n: usize, m: usize, samples: &[ModeOccupation]) -> Result<Self> {
        if samples.is_empty() {
            return Err(domain("no samples"));
        }
        let basis = enumerate_basis(n, m);
        let index: HashMap<&ModeOccupation, usize> = basis.iter().enumerate().map(|(i, b)| (b, i)).collect();
        let mut counts = vec![0usize; basis.len()];
        for s in samples {
            let i =
                index.get(s).ok_or_else(|| domain(format!("sample {s} is not an {n}-photon pattern on {m} modes")))?;
            counts[*i] += 1;
        }
        let k = samples.len() as f64;
        Self::from_parts(basis, counts.into_iter().map(|c| c as f64 / k).collect())
    }

    /// `pattern,probability` rows with a header; probabilities in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pattern,probability\n");
        for (b, p) in self.iter() {
            out.push_str(&format!("{},{}\n", b.key(), p));
        }
        out
    }

    /// Parse the output of [`FockDistribution::to_csv`]; `#` lines are ignored.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "pattern,probability" => {}
            other => return Err(Error::Parse(format!("unexpected CSV header {other:?}"))),
        }
        let mut rows = Vec::new();
        for line in lines {
            let (pat, p) = line.split_once(',').ok_or_else(|| Error::Parse(format!("malformed row {line:?}")))?;
            let p: f64 = p.trim().parse().map_err(|e| Error::Parse(format!("bad probability in {line:?}: {e}")))?;
            rows.push((pat.parse::<ModeOccupation>()?, p));
        }
        let (basis, probs) = rows.into_iter().unzip();
        Self::from_parts(basis, probs)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("distribution serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

impl<'de> Deserialize<'de> for FockDistribution {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        #[derive(Deserialize)]
        struct Repr {
            n: usize,
            m: usize,
            basis: Vec<ModeOccupation>,
            probs: Vec<f64>,
        }
        let r = Repr::deserialize(d)?;
        let dist = FockDistribution::from_parts(r.basis, r.probs).map_err(D::Error::custom)?;
        if dist.n != r.n || dist.m != r.m {
            return Err(D::Error::custom("n/m do not match the basis"));
        }
        Ok(dist)
    }
}

/// Histogram of observed patterns; merging is associative, so batches can be
/// counted independently and combined in any grouping.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PatternCounts {
    counts: BTreeMap<ModeOccupation, u64>,
    total: u64,
}

impl PatternCounts {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a ModeOccupation>) -> Self {
        let mut out = Self::default();
        for s in samples {
            out.add(s.clone());
        }
        out
    }

    pub fn add(&mut self, pattern: ModeOccupation) {
        *self.counts.entry(pattern).or_insert(0) += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &PatternCounts) {
        for (p, c) in &other.counts {
            *self.counts.entry(p.clone()).or_insert(0) += c;
        }
        self.total += other.total;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, pattern: &ModeOccupation) -> u64 {
        self.counts.get(pattern).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ModeOccupation, u64)> {
        self.counts.iter().map(|(p, c)| (p, *c))
    }
}

fn check_input(u: &ComplexMatrix, r: &ModeOccupation) -> Result<()> {
    check_transition(u, r, r)
}

/// Exact output distribution of input `r` through `u` under `model`.
pub fn output_distribution(
    u: &ComplexMatrix,
    r: &ModeOccupation,
    model: &Distinguishability,
) -> Result<FockDistribution> {
    output_distribution_with(u, r, model, Execution::default())
}

pub fn output_distribution_with(
    u: &ComplexMatrix,
    r: &ModeOccupation,
    model: &Distinguishability,
    exec: Execution,
) -> Result<FockDistribution> {
    check_input(u, r)?;
    model.validate(r)?;
    let (n, m) = (r.total(), r.modes());
    let basis = enumerate_basis(n, m);
    let probs: Vec<f64> = match model {
        Distinguishability::Indistinguishable => {
            exec.map(basis.len(), |i| prob_indistinguishable(u, r, &basis[i])).into_iter().collect::<Result<_>>()?
        }
        Distinguishability::Distinguishable => {
            exec.map(basis.len(), |i| prob_distinguishable(u, r, &basis[i])).into_iter().collect::<Result<_>>()?
        }
        Distinguishability::Species { partition } => {
            exec.map(basis.len(), |i| prob_species(u, partition, &basis[i])).into_iter().collect::<Result<_>>()?
        }
        Distinguishability::Mixture { components } => {
            let mut acc = vec![0.0; basis.len()];
            for c in components.iter().filter(|c| c.weight > 0.0) {
                let part: Vec<f64> = exec
                    .map(basis.len(), |i| prob_species(u, &c.partition, &basis[i]))
                    .into_iter()
                    .collect::<Result<_>>()?;
                for (a, p) in acc.iter_mut().zip(part) {
                    *a += c.weight * p;
                }
            }
            acc
        }
    };
    FockDistribution::from_parts(basis, probs)
}

/// Amplitudes `⟨s|U(V)|r⟩` over `enumerate_basis(n, m)`.
pub fn state_vector(u: &ComplexMatrix, r: &ModeOccupation) -> Result<Vec<Complex64>> {
    state_vector_with(u, r, Execution::default())
}

pub fn state_vector_with(u: &ComplexMatrix, r: &ModeOccupation, exec: Execution) -> Result<Vec<Complex64>> {
    check_input(u, r)?;
    let basis = enumerate_basis(r.total(), r.modes());
    exec.map(basis.len(), |i| amplitude(u, r, &basis[i])).into_iter().collect()
}

const SAMPLE_CHUNK: usize = 8192;

/// Basis indices of i.i.d. draws by inverse CDF. Chunk `c` of the output uses
/// its own generator seeded from `(seed, c)`, so the result does not depend on
/// the execution policy.
pub fn sample_indices(dist: &FockDistribution, count: usize, seed: u64, exec: Execution) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(dist.probs.len());
    let mut acc = 0.0;
    for p in &dist.probs {
        acc += p;
        cdf.push(acc);
    }
    // the last pattern with nonzero mass absorbs rounding in the tail
    let last = dist.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    let chunks = count.div_ceil(SAMPLE_CHUNK);
    exec.map(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
        let len = SAMPLE_CHUNK.min(count - c * SAMPLE_CHUNK);
        (0..len)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                cdf.partition_point(|&x| x <= u).min(last)
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// `count` i.i.d. patterns from `dist`, deterministic per seed.
pub fn sample(dist: &FockDistribution, count: usize, seed: u64) -> Vec<ModeOccupation> {
    sample_indices(dist, count, seed, Execution::default()).into_iter().map(|i| dist.basis[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{fourier, haar_random};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn occ(c: &[usize]) -> ModeOccupation {
        ModeOccupation::new(c.to_vec()).unwrap()
    }

    fn splitter() -> ComplexMatrix {
        fourier(2, 2).unwrap()
    }

    #[test]
    fn basis_enumeration() {
        assert_eq!(enumerate_basis(0, 3), vec![occ(&[0, 0, 0])]);
        assert_eq!(enumerate_basis(1, 2), vec![occ(&[1, 0]), occ(&[0, 1])]);
        assert_eq!(enumerate_basis(3, 4).len(), 20);
        assert_eq!(basis_size(3, 4), 20);
        let b = enumerate_basis(4, 5);
        assert_eq!(b.len(), basis_size(4, 5));
        let mut sorted = b.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), b.len());
        // colexicographic: compare reversed tuples
        for w in b.windows(2) {
            let a: Vec<_> = w[0].counts().iter().rev().collect();
            let c: Vec<_> = w[1].counts().iter().rev().collect();
            assert!(a < c);
        }
    }

    #[test]
    fn assignment_lists() {
        assert_eq!(occ(&[2, 0, 0, 1]).assignment().modes(), &[1, 1, 4]);
        assert_eq!(occ(&[1, 1, 1, 0]).assignment().sum(), 6);
        let a = ModeAssignment::new(vec![4, 1, 1], 4).unwrap();
        assert_eq!(a.occupation(4).unwrap(), occ(&[2, 0, 0, 1]));
        assert!(ModeAssignment::new(vec![5], 4).is_err());
    }

    #[test]
    fn pattern_parsing() {
        assert_eq!("1:1:1:0".parse::<ModeOccupation>().unwrap(), occ(&[1, 1, 1, 0]));
        assert_eq!("(2,0,1)".parse::<ModeOccupation>().unwrap(), occ(&[2, 0, 1]));
        assert!("1:x".parse::<ModeOccupation>().is_err());
        assert_eq!(occ(&[1, 0]).to_string(), "(1,0)");
    }

    #[test]
    fn submatrix_rules() {
        let id = ComplexMatrix::identity(3);
        let m = submatrix(&id, &occ(&[1, 0, 0]), &occ(&[1, 0, 0])).unwrap();
        assert_eq!(m.nrows(), 1);
        assert_abs_diff_eq!(m[(0, 0)].re, 1.0);

        let bs = splitter();
        let m = submatrix(&bs, &occ(&[1, 1]), &occ(&[2, 0])).unwrap();
        assert_eq!(m.row(0), m.row(1));
        assert_eq!(m[(0, 0)], bs.get(0, 0));
        assert_eq!(m[(0, 1)], bs.get(0, 1));

        let u = haar_random(4, 2).unwrap();
        let m = submatrix(&u, &occ(&[1, 1, 1, 0]), &occ(&[1, 1, 1, 0])).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m[(i, j)], u.get(i, j));
            }
        }
        assert!(matches!(submatrix(&u, &occ(&[1, 1, 1, 0]), &occ(&[1, 0, 0, 0])), Err(Error::Domain(_))));
    }

    #[test]
    fn hong_ou_mandel() {
        let bs = splitter();
        let r = occ(&[1, 1]);
        assert!(prob_indistinguishable(&bs, &r, &occ(&[1, 1])).unwrap() < 1e-30);
        assert_abs_diff_eq!(prob_indistinguishable(&bs, &r, &occ(&[2, 0])).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(prob_distinguishable(&bs, &r, &occ(&[1, 1])).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(prob_distinguishable(&bs, &r, &occ(&[2, 0])).unwrap(), 0.25, epsilon = 1e-15);
        let id = ComplexMatrix::identity(4);
        let r = occ(&[1, 1, 1, 0]);
        assert_abs_diff_eq!(prob_indistinguishable(&id, &r, &r).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(prob_distinguishable(&id, &r, &r).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn species_reductions() {
        let bs = splitter();
        let r = occ(&[1, 1]);
        let singles = SpeciesPartition::singletons(&r).unwrap();
        assert_abs_diff_eq!(prob_species(&bs, &singles, &occ(&[1, 1])).unwrap(), 0.5, epsilon = 1e-15);

        let u = haar_random(5, 9).unwrap();
        let r = occ(&[1, 2, 0, 1, 0]);
        let one = SpeciesPartition::single(&r).unwrap();
        let all = SpeciesPartition::singletons(&r).unwrap();
        for s in enumerate_basis(4, 5) {
            let a = prob_species(&u, &one, &s).unwrap();
            let b = prob_indistinguishable(&u, &r, &s).unwrap();
            assert_eq!(a, b);
            let c = prob_species(&u, &all, &s).unwrap();
            let d = prob_distinguishable(&u, &r, &s).unwrap();
            assert!((c - d).abs() < 1e-12, "{s}: {c} vs {d}");
        }
    }

    #[test]
    fn species_validation() {
        assert!(SpeciesPartition::new(vec![]).is_err());
        assert!(SpeciesPartition::new(vec![occ(&[0, 0])]).is_err());
        assert!(SpeciesPartition::new(vec![occ(&[1, 0]), occ(&[1, 0, 0])]).is_err());
        let p = SpeciesPartition::from_labels(&occ(&[1, 1, 1, 0]), &[0, 0, 1]).unwrap();
        assert_eq!(p.sizes(), vec![2, 1]);
        assert_eq!(p.total_occupation(), occ(&[1, 1, 1, 0]));
        let u = ComplexMatrix::identity(4);
        assert!(prob_species(&u, &p, &occ(&[1, 1, 0, 0])).is_err());
    }

    #[test]
    fn fourier_support() {
        let f = fourier(3, 4).unwrap();
        let r = occ(&[1, 1, 1, 0]);
        let d = output_distribution(&f, &r, &Distinguishability::Indistinguishable).unwrap();
        let mut support: Vec<_> = d.support(1e-12).into_iter().cloned().collect();
        support.sort();
        let mut want = vec![occ(&[1, 1, 1, 0]), occ(&[3, 0, 0, 0]), occ(&[0, 3, 0, 0]), occ(&[0, 0, 3, 0])];
        want.sort();
        assert_eq!(support, want);
    }

    #[test]
    fn distributions_normalised_over_haar() {
        for seed in 0..50u64 {
            let m = 2 + (seed as usize % 5);
            let n = 1 + (seed as usize % 4);
            let u = haar_random(m, seed).unwrap();
            let mut counts = vec![0; m];
            for k in 0..n {
                counts[k % m] += 1;
            }
            let r = occ(&counts);
            let labels: Vec<usize> = (0..n).map(|k| k % 2).collect();
            let models = [
                Distinguishability::Indistinguishable,
                Distinguishability::Distinguishable,
                Distinguishability::Species { partition: SpeciesPartition::from_labels(&r, &labels).unwrap() },
            ];
            for model in &models {
                let d = output_distribution(&u, &r, model).unwrap();
                let sum: f64 = d.probs().iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "seed {seed} {model:?}");
            }
        }
    }

    #[test]
    fn reversibility() {
        let u = haar_random(5, 21).unwrap();
        let r = occ(&[1, 1, 1, 0, 0]);
        let back = &u.dagger() * &u;
        let d = output_distribution(&back, &r, &Distinguishability::Indistinguishable).unwrap();
        assert!((d.prob(&r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn state_vector_cases() {
        let r = occ(&[1, 1, 1, 0]);
        let amps = state_vector(&ComplexMatrix::identity(4), &r).unwrap();
        let basis = enumerate_basis(3, 4);
        for (b, a) in basis.iter().zip(&amps) {
            let want = if *b == r { 1.0 } else { 0.0 };
            assert_abs_diff_eq!(a.norm(), want, epsilon = 1e-15);
        }

        let amps = state_vector(&splitter(), &occ(&[1, 1])).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert_abs_diff_eq!(amps[0].re, s, epsilon = 1e-15);
        assert_abs_diff_eq!(amps[1].norm(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(amps[2].re, -s, epsilon = 1e-15);

        let u = haar_random(4, 5).unwrap();
        let amps = state_vector(&u, &r).unwrap();
        let norm: f64 = amps.iter().map(|a| a.norm_sqr()).sum();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-9);
        let d = output_distribution(&u, &r, &Distinguishability::Indistinguishable).unwrap();
        for (a, p) in amps.iter().zip(d.probs()) {
            assert!((a.norm_sqr() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn distinguishable_matches_independent_photons() {
        let u = haar_random(4, 13).unwrap();
        let r = occ(&[1, 1, 1, 0]);
        let d = output_distribution(&u, &r, &Distinguishability::Distinguishable).unwrap();
        let shots = 100_000;
        let samples = crate::oracle::sample_independent_photons(&u, &[0, 1, 2], shots, 4);
        for (b, p) in d.iter() {
            let freq = samples.iter().filter(|s| s.as_slice() == b.counts()).count() as f64 / shots as f64;
            let sigma = (p * (1.0 - p) / shots as f64).sqrt().max(1e-6);
            assert!((freq - p).abs() < 4.0 * sigma, "{b}: {freq} vs {p}");
        }
    }

    #[test]
    fn mixture_validation_and_combination() {
        let u = haar_random(4, 1).unwrap();
        let r = occ(&[1, 1, 1, 0]);
        let bad = Distinguishability::Mixture {
            components: vec![MixtureComponent { weight: 0.7, partition: SpeciesPartition::single(&r).unwrap() }],
        };
        assert!(matches!(output_distribution(&u, &r, &bad), Err(Error::Domain(_))));

        let mix = Distinguishability::Mixture {
            components: vec![
                MixtureComponent { weight: 0.25, partition: SpeciesPartition::single(&r).unwrap() },
                MixtureComponent { weight: 0.75, partition: SpeciesPartition::singletons(&r).unwrap() },
            ],
        };
        let dm = output_distribution(&u, &r, &mix).unwrap();
        let di = output_distribution(&u, &r, &Distinguishability::Indistinguishable).unwrap();
        let dd = output_distribution(&u, &r, &Distinguishability::Distinguishable).unwrap();
        for i in 0..dm.probs().len() {
            assert!((dm.probs()[i] - 0.25 * di.probs()[i] - 0.75 * dd.probs()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn overlap_mixture_weights() {
        let r = occ(&[1, 1, 1, 0]);
        let Distinguishability::Mixture { components } = Distinguishability::from_overlap(&r, 0.81).unwrap() else {
            panic!("expected a mixture");
        };
        let sum: f64 = components.iter().map(|c| c.weight).sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        let all_good = components.iter().find(|c| c.partition.species().len() == 1).unwrap();
        assert_abs_diff_eq!(all_good.weight, 0.9f64.powi(3), epsilon = 1e-12);
        let singles = components.iter().find(|c| c.partition.species().len() == 3).unwrap();
        // zero or one photon in the shared state
        assert_abs_diff_eq!(singles.weight, 0.1f64.powi(3) + 3.0 * 0.9 * 0.01, epsilon = 1e-12);
        assert!(Distinguishability::from_overlap(&r, 1.5).is_err());
    }

    #[test]
    fn pairwise_overlaps_fit() {
        let o = [vec![1.0, 0.932, 0.885], vec![0.932, 1.0, 0.885], vec![0.885, 0.885, 1.0]];
        let q = purities_from_overlaps(&o).unwrap();
        assert_abs_diff_eq!(q[0] * q[1], 0.932, epsilon = 1e-12);
        assert_abs_diff_eq!(q[0] * q[2], 0.885, epsilon = 1e-12);
        assert_abs_diff_eq!(q[1] * q[2], 0.885, epsilon = 1e-12);
        let r = occ(&[1, 1, 1, 0]);
        let Distinguishability::Mixture { components } = Distinguishability::from_pairwise_overlaps(&r, &o).unwrap()
        else {
            panic!("expected a mixture");
        };
        let all_good = components.iter().find(|c| c.partition.species().len() == 1).unwrap();
        assert_abs_diff_eq!(all_good.weight, q[0] * q[1] * q[2], epsilon = 1e-12);
        assert!(purities_from_overlaps(&[vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
        // overlaps that no product model can reach
        let bad = [vec![1.0, 0.99, 0.2], vec![0.99, 1.0, 0.99], vec![0.2, 0.99, 1.0]];
        assert!(purities_from_overlaps(&bad).is_err());
    }

    #[test]
    fn sampling() {
        let r = occ(&[1, 1, 1, 0]);
        let pm = FockDistribution::point_mass(&r);
        assert!(sample(&pm, 1000, 3).iter().all(|s| *s == r));

        let mut probs = vec![0.0; 3];
        probs[0] = 0.5;
        probs[2] = 0.5;
        let d = FockDistribution::new(1, 3, probs).unwrap();
        let s = sample(&d, 100_000, 1);
        let f0 = s.iter().filter(|x| **x == d.basis()[0]).count() as f64 / 1e5;
        assert!((f0 - 0.5).abs() < 0.01);
        assert!(s.iter().all(|x| *x != d.basis()[1]));
        assert_eq!(s, sample(&d, 100_000, 1));
        assert_eq!(
            sample_indices(&d, 50_000, 9, Execution::Sequential),
            sample_indices(&d, 50_000, 9, Execution::Parallel)
        );
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let u = haar_random(3, 4).unwrap();
        let d = output_distribution(&u, &occ(&[1, 1, 0]), &Distinguishability::Indistinguishable).unwrap();
        let back = FockDistribution::from_csv(&d.to_csv()).unwrap();
        assert_eq!(d, back);
        assert!(FockDistribution::from_csv("a,b\n").is_err());
        assert!(FockDistribution::new(1, 2, vec![0.5, 0.4]).is_err());
        assert!(FockDistribution::new(1, 2, vec![1.5, -0.5]).is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(seed in 0u64..1000, n in 0usize..4, m in 1usize..5) {
            let u = haar_random(m, seed).unwrap();
            let mut counts = vec![0; m];
            for k in 0..n { counts[k % m] += 1; }
            let d = output_distribution(&u, &occ(&counts), &Distinguishability::Indistinguishable).unwrap();
            let back = FockDistribution::from_json(&d.to_json()).unwrap();
            prop_assert_eq!(d.probs().iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
                            back.probs().iter().map(|p| p.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(d, back);
        }
    }
}
