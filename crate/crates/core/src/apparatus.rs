//! Measurement chain of a heralded three-photon experiment on a programmable
//! interferometer.
//!
//! Two down-conversion crystals emit photon pairs with the two-mode squeezed
//! vacuum law. Both photons of crystal 1 enter modes 1 and 2, the signal of
//! crystal 2 enters mode 3 and its idler goes to a herald detector. Every
//! output mode is split over three threshold detectors (quasi photon-number
//! resolution), and events are kept when the herald fired and exactly as many
//! detectors clicked as photons were intended.
//!
//! The programmed unitary is realised as a rectangular mesh of Mach-Zehnder
//! interferometers whose phases may carry Gaussian control errors.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim, domain, Error, Result};
use crate::exec::{derive_seed, Execution};
use crate::fock::{
    enumerate_basis, factorial, output_distribution_with, Distinguishability, FockDistribution, ModeOccupation,
    PatternCounts,
};
use crate::hamiltonian::{evolution, HamiltonianSpec};
use crate::linalg::{amplitude_fidelity, haar_random, is_unitary, ComplexMatrix, UNITARY_TOL};

/// Threshold detectors behind each output mode.
pub const CHANNELS_PER_MODE: usize = 3;

/// Pair probability per pulse and per mW of pump, `λ² ≈ 10⁻³·P`.
pub const PAIR_PROBABILITY_PER_MW: f64 = 1e-3;

const SHOT_CHUNK: usize = 8192;

/// Pairwise overlap of the internal states of the photons entering two modes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeOverlap {
    /// One-based input modes.
    pub modes: [usize; 2],
    pub overlap: f64,
}

fn default_max_pairs() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceModel {
    /// `λ` of the two-mode squeezed vacuum, identical for both crystals.
    pub squeezing: f64,
    pub pump_power_mw: f64,
    pub heralding_efficiency: f64,
    #[serde(default)]
    pub pairwise_overlaps: Vec<ModeOverlap>,
    /// Pair numbers per crystal are enumerated up to this cap.
    #[serde(default = "default_max_pairs")]
    pub max_pairs: usize,
}

impl SourceModel {
    /// Squeezing from the pump power via [`PAIR_PROBABILITY_PER_MW`].
    pub fn at_pump_power(pump_power_mw: f64, heralding_efficiency: f64) -> Self {
        Self {
            squeezing: (PAIR_PROBABILITY_PER_MW * pump_power_mw).sqrt(),
            pump_power_mw,
            heralding_efficiency,
            pairwise_overlaps: Vec::new(),
            max_pairs: default_max_pairs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.squeezing) {
            return Err(domain(format!("squeezing {} outside [0, 1)", self.squeezing)));
        }
        if !(self.pump_power_mw >= 0.0) {
            return Err(domain(format!("pump power {} is negative", self.pump_power_mw)));
        }
        if !(0.0..=1.0).contains(&self.heralding_efficiency) {
            return Err(domain(format!("heralding efficiency {} outside [0, 1]", self.heralding_efficiency)));
        }
        if self.max_pairs == 0 {
            return Err(domain("max_pairs must be at least 1"));
        }
        for o in &self.pairwise_overlaps {
            if !(0.0..=1.0).contains(&o.overlap) || o.modes[0] == o.modes[1] || o.modes.contains(&0) {
                return Err(domain(format!("bad overlap entry {o:?}")));
            }
        }
        Ok(())
    }

    /// `(1 − λ²)·λ^{2n}`
    pub fn pair_probability(&self, n: usize) -> f64 {
        let l2 = self.squeezing * self.squeezing;
        (1.0 - l2) * l2.powi(n as i32)
    }

    /// Probability that a herald detector of the given efficiency sees at least one of `n` idlers.
    pub fn herald_probability(&self, n: usize) -> f64 {
        1.0 - (1.0 - self.heralding_efficiency).powi(n as i32)
    }

    /// Mixture model for the nominal input from the pairwise overlaps, or
    /// `None` when no overlaps are configured.
    pub fn distinguishability(&self, nominal: &ModeOccupation) -> Result<Option<Distinguishability>> {
        if self.pairwise_overlaps.is_empty() {
            return Ok(None);
        }
        let modes: Vec<usize> = nominal.assignment().modes().to_vec();
        let n = modes.len();
        let mut o = vec![vec![1.0; n]; n];
        let mut seen = vec![vec![false; n]; n];
        for e in &self.pairwise_overlaps {
            let i = modes.iter().position(|&k| k == e.modes[0]);
            let j = modes.iter().position(|&k| k == e.modes[1]);
            let (Some(i), Some(j)) = (i, j) else {
                return Err(domain(format!("overlap names modes {:?} that carry no photon", e.modes)));
            };
            o[i][j] = e.overlap;
            o[j][i] = e.overlap;
            seen[i][j] = true;
            seen[j][i] = true;
        }
        if (0..n).any(|i| (0..n).any(|j| i != j && !seen[i][j])) {
            return Err(domain("overlaps must be given for every pair of input photons"));
        }
        Distinguishability::from_pairwise_overlaps(nominal, &o).map(Some)
    }
}

/// Injected occupation `(n₁, n₁, n₂, 0, …)` from pair numbers `n₁`, `n₂`.
fn injected(m: usize, n1: usize, n2: usize) -> Result<ModeOccupation> {
    if m < 3 {
        return Err(dim(format!("the heralded source needs 3 modes, got {m}")));
    }
    let mut c = vec![0; m];
    c[0] = n1;
    c[1] = n1;
    c[2] = n2;
    ModeOccupation::new(c)
}

/// The intended heralded input `(1, 1, 1, 0, …)`.
pub fn nominal_input(m: usize) -> Result<ModeOccupation> {
    injected(m, 1, 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeraldEvent {
    pub pairs: [usize; 2],
    pub input: ModeOccupation,
    pub accepted: bool,
}

/// One unconditioned source pulse into a 4-mode chip.
pub fn herald_input(src: &SourceModel, seed: u64) -> Result<HeraldEvent> {
    src.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || {
        // geometric law: P(n) = (1 − λ²)λ^{2n}
        let l2 = src.squeezing * src.squeezing;
        let mut n = 0;
        while rng.random::<f64>() < l2 {
            n += 1;
        }
        n
    };
    let (n1, n2) = (draw(), draw());
    let accepted = rng.random::<f64>() < src.herald_probability(n2);
    Ok(HeraldEvent { pairs: [n1, n2], input: injected(4, n1, n2)?, accepted })
}

fn default_slope() -> f64 {
    -0.0020
}

fn default_intercept() -> f64 {
    0.9534
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionModel {
    /// Relative efficiency of every channel, [`CHANNELS_PER_MODE`] consecutive
    /// channels per mode; per-mode sums may not exceed 1.
    pub weights: Vec<f64>,
    #[serde(default = "default_slope")]
    pub blinding_slope: f64,
    #[serde(default = "default_intercept")]
    pub blinding_intercept: f64,
    #[serde(default)]
    pub dark_count_prob: f64,
}

impl DetectionModel {
    /// Equal splitting `(1 − loss)/3` on every channel.
    pub fn uniform(modes: usize, loss: f64) -> Result<Self> {
        let det = Self {
            weights: vec![(1.0 - loss) / CHANNELS_PER_MODE as f64; modes * CHANNELS_PER_MODE],
            blinding_slope: default_slope(),
            blinding_intercept: default_intercept(),
            dark_count_prob: 0.0,
        };
        det.validate()?;
        Ok(det)
    }

    /// Weights from `channel,weight` rows (one-based channels, any order, `#` comments allowed).
    pub fn weights_from_csv(text: &str) -> Result<Vec<f64>> {
        let mut rows: Vec<(usize, f64)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("channel") {
                continue;
            }
            let err = || Error::Parse(format!("weights line {}: {line:?}", lineno + 1));
            let (c, w) = line.split_once(',').ok_or_else(err)?;
            let c: usize = c.trim().parse().map_err(|_| err())?;
            let w: f64 = w.trim().parse().map_err(|_| err())?;
            rows.push((c, w));
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 != i + 1) {
            return Err(Error::Parse("weight channels must be 1..=N without gaps or repeats".into()));
        }
        Ok(rows.into_iter().map(|r| r.1).collect())
    }

    pub fn modes(&self) -> usize {
        self.weights.len() / CHANNELS_PER_MODE
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || !self.weights.len().is_multiple_of(CHANNELS_PER_MODE) {
            return Err(dim(format!("{} weights is not a multiple of {CHANNELS_PER_MODE}", self.weights.len())));
        }
        if let Some(w) = self.weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(domain(format!("weight {w} outside [0, 1]")));
        }
        for (i, c) in self.weights.chunks(CHANNELS_PER_MODE).enumerate() {
            let s: f64 = c.iter().sum();
            if s > 1.0 + 1e-12 {
                return Err(domain(format!("weights of mode {} sum to {s} > 1", i + 1)));
            }
        }
        if !(0.0..=1.0).contains(&self.dark_count_prob) {
            return Err(domain(format!("dark count probability {} outside [0, 1]", self.dark_count_prob)));
        }
        Ok(())
    }

    fn mode_weights(&self, mode: usize) -> &[f64] {
        &self.weights[mode * CHANNELS_PER_MODE..(mode + 1) * CHANNELS_PER_MODE]
    }

    /// `P_i(n|n) = n!·e_n(w)`: all `n` photons in mode `i` hit distinct channels.
    pub fn resolution_probability(&self, mode: usize, n: usize) -> f64 {
        let w = self.mode_weights(mode);
        // elementary symmetric polynomials by the product expansion
        let mut e = vec![0.0; w.len() + 1];
        e[0] = 1.0;
        for &x in w {
            for k in (1..e.len()).rev() {
                e[k] += e[k - 1] * x;
            }
        }
        if n >= e.len() {
            return 0.0;
        }
        factorial(n) * e[n]
    }

    /// `1/Π_i P_i(n_i|n_i)`, zero for patterns the detectors cannot resolve.
    pub fn correction_weight(&self, pattern: &ModeOccupation) -> f64 {
        let p: f64 = (0..pattern.modes()).map(|i| self.resolution_probability(i, pattern.get(i))).product();
        if p > 0.0 {
            1.0 / p
        } else {
            0.0
        }
    }

    /// Herald fired and exactly `photons` channels clicked; histogram of the click patterns.
    pub fn postselect(&self, records: &[ClickRecord], photons: usize) -> Result<PatternCounts> {
        let mut out = PatternCounts::default();
        for r in records.iter().filter(|r| r.herald && r.fired.len() == photons) {
            out.add(r.pattern(self.modes())?);
        }
        Ok(out)
    }
}

/// Fired detector channels (zero-based, sorted) and the herald outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClickRecord {
    pub fired: Vec<usize>,
    pub herald: bool,
}

impl ClickRecord {
    pub fn new(mut fired: Vec<usize>, herald: bool) -> Result<Self> {
        fired.sort_unstable();
        if fired.windows(2).any(|w| w[0] == w[1]) {
            return Err(domain("channel listed twice"));
        }
        Ok(Self { fired, herald })
    }

    /// Clicks per mode.
    pub fn pattern(&self, modes: usize) -> Result<ModeOccupation> {
        let mut c = vec![0; modes];
        for &ch in &self.fired {
            let mode = ch / CHANNELS_PER_MODE;
            if mode >= modes {
                return Err(domain(format!("channel {ch} beyond {modes} modes")));
            }
            c[mode] += 1;
        }
        ModeOccupation::new(c)
    }

    pub fn to_ndjson(records: &[ClickRecord]) -> String {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_ndjson(text: &str) -> Result<Vec<ClickRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                let r: ClickRecord =
                    serde_json::from_str(l).map_err(|e| Error::Parse(format!("record {}: {e}", i + 1)))?;
                ClickRecord::new(r.fired, r.herald)
            })
            .collect()
    }
}

fn detect_with(pattern: &ModeOccupation, det: &DetectionModel, rng: &mut impl Rng) -> Vec<usize> {
    let mut hit = vec![false; det.weights.len()];
    for mode in 0..pattern.modes() {
        let w = det.mode_weights(mode);
        for _ in 0..pattern.get(mode) {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, x) in w.iter().enumerate() {
                acc += x;
                if u < acc {
                    hit[mode * CHANNELS_PER_MODE + k] = true;
                    break;
                }
            }
        }
    }
    if det.dark_count_prob > 0.0 {
        for h in hit.iter_mut() {
            if !*h && rng.random::<f64>() < det.dark_count_prob {
                *h = true;
            }
        }
    }
    hit.iter().enumerate().filter(|(_, h)| **h).map(|(i, _)| i).collect()
}

/// Route every photon to one of its mode's channels (or lose it) and report
/// the channels that saw at least one photon. The herald flag is set.
pub fn qpnr_detect(pattern: &ModeOccupation, det: &DetectionModel, seed: u64) -> Result<ClickRecord> {
    det.validate()?;
    if pattern.modes() != det.modes() {
        return Err(domain(format!("{}-mode pattern for a {}-mode detector bank", pattern.modes(), det.modes())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ClickRecord { fired: detect_with(pattern, det, &mut rng), herald: true })
}

/// Three-photon estimate of the output distribution from click records.
pub fn correct_counts(records: &[ClickRecord], det: &DetectionModel) -> Result<FockDistribution> {
    correct_counts_with(records, det, 3)
}

/// Post-select on herald and `photons` clicks, divide each pattern count by
/// `Π_i P_i(n_i|n_i)` and renormalise.
pub fn correct_counts_with(records: &[ClickRecord], det: &DetectionModel, photons: usize) -> Result<FockDistribution> {
    det.validate()?;
    let counts = det.postselect(records, photons)?;
    if counts.total() == 0 {
        return Err(domain("no records survive post-selection"));
    }
    let basis = enumerate_basis(photons, det.modes());
    let weights = basis.iter().map(|b| counts.count(b) as f64 * det.correction_weight(b)).collect();
    FockDistribution::from_weights(photons, det.modes(), weights)
}

/// Uncorrected relative frequencies of the post-selected click patterns.
pub fn raw_frequencies(records: &[ClickRecord], det: &DetectionModel, photons: usize) -> Result<FockDistribution> {
    let counts = det.postselect(records, photons)?;
    if counts.total() == 0 {
        return Err(domain("no records survive post-selection"));
    }
    let basis = enumerate_basis(photons, det.modes());
    let weights = basis.iter().map(|b| counts.count(b) as f64).collect();
    FockDistribution::from_weights(photons, det.modes(), weights)
}

/// Survival factor of revival events, `clamp(slope·P + intercept, 0, 1)`.
pub fn blinding_probability(pump_power_mw: f64, det: &DetectionModel) -> f64 {
    (det.blinding_slope * pump_power_mw + det.blinding_intercept).clamp(0.0, 1.0)
}

/// One Mach-Zehnder cell acting on adjacent modes `(mode, mode + 1)`, zero-based:
/// `[[e^{iφ}cos θ, −sin θ], [e^{iφ}sin θ, cos θ]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mzi {
    pub mode: usize,
    pub theta: f64,
    pub phi: f64,
}

/// Rectangular mesh; `cells` are listed in the order light meets them and the
/// output phase screen acts last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshParams {
    pub m: usize,
    pub cells: Vec<Mzi>,
    pub output_phases: Vec<f64>,
}

fn apply_left(v: &mut nalgebra::DMatrix<Complex64>, cell: &Mzi) {
    let (c, s) = (cell.theta.cos(), cell.theta.sin());
    let e = Complex64::from_polar(1.0, cell.phi);
    let (a, b) = (cell.mode, cell.mode + 1);
    for col in 0..v.ncols() {
        let (x, y) = (v[(a, col)], v[(b, col)]);
        v[(a, col)] = e * c * x - s * y;
        v[(b, col)] = e * s * x + c * y;
    }
}

/// `V ← V·T†` on columns `(mode, mode+1)`.
fn apply_right_inverse(v: &mut nalgebra::DMatrix<Complex64>, cell: &Mzi) {
    let (c, s) = (cell.theta.cos(), cell.theta.sin());
    let e = Complex64::from_polar(1.0, -cell.phi);
    let (a, b) = (cell.mode, cell.mode + 1);
    for row in 0..v.nrows() {
        let (x, y) = (v[(row, a)], v[(row, b)]);
        v[(row, a)] = e * c * x - s * y;
        v[(row, b)] = e * s * x + c * y;
    }
}

fn wrap(phi: f64) -> f64 {
    let p = phi.rem_euclid(TAU);
    if p >= TAU {
        0.0
    } else {
        p
    }
}

/// Decompose a unitary into `m(m−1)/2` cells plus output phases.
pub fn mesh_decompose(u: &ComplexMatrix) -> Result<MeshParams> {
    if !u.is_square() {
        return Err(dim("mesh decomposition needs a square matrix"));
    }
    if !is_unitary(u, UNITARY_TOL)? {
        return Err(domain("mesh decomposition needs a unitary matrix"));
    }
    let m = u.rows();
    let mut v = u.as_dmatrix().clone();
    let mut right: Vec<Mzi> = Vec::new();
    let mut left: Vec<Mzi> = Vec::new();
    for ii in 0..m.saturating_sub(1) {
        if ii % 2 == 0 {
            for jj in 0..=ii {
                let (row, col) = (m - 1 - jj, ii - jj);
                let (x, y) = (v[(row, col)], v[(row, col + 1)]);
                let cell = Mzi { mode: col, theta: x.norm().atan2(y.norm()), phi: wrap(x.arg() - y.arg()) };
                apply_right_inverse(&mut v, &cell);
                right.push(cell);
            }
        } else {
            for jj in 0..=ii {
                let (row, col) = (m + jj - ii - 1, jj);
                let (x, y) = (v[(row, col)], v[(row - 1, col)]);
                let cell = Mzi { mode: row - 1, theta: x.norm().atan2(y.norm()), phi: wrap((-x).arg() - y.arg()) };
                apply_left(&mut v, &cell);
                left.push(cell);
            }
        }
    }
    // v = L_k ⋯ L_1 · U · R_1† ⋯ R_j† is diagonal; push it through the left cells
    let mut phases: Vec<f64> = (0..m).map(|i| v[(i, i)].arg()).collect();
    let mut moved: Vec<Mzi> = Vec::with_capacity(left.len());
    for cell in left.iter().rev() {
        let (a, b) = (phases[cell.mode], phases[cell.mode + 1]);
        moved.push(Mzi { mode: cell.mode, theta: cell.theta, phi: wrap(a - b + PI) });
        phases[cell.mode] = b - cell.phi + PI;
    }
    // U = D · T'_1 ⋯ T'_k · R_j ⋯ R_1: light meets R_1 first and T'_1 last
    let mut cells = right;
    cells.extend(moved);
    Ok(MeshParams { m, cells, output_phases: phases.into_iter().map(wrap).collect() })
}

/// Transfer matrix of a mesh.
pub fn compose(params: &MeshParams) -> Result<ComplexMatrix> {
    if params.output_phases.len() != params.m || params.cells.iter().any(|c| c.mode + 1 >= params.m) {
        return Err(dim("mesh parameters do not fit the mode count"));
    }
    let mut v = nalgebra::DMatrix::<Complex64>::identity(params.m, params.m);
    for cell in &params.cells {
        apply_left(&mut v, cell);
    }
    for (i, p) in params.output_phases.iter().enumerate() {
        let e = Complex64::from_polar(1.0, *p);
        for col in 0..params.m {
            v[(i, col)] *= e;
        }
    }
    ComplexMatrix::from_dmatrix(v)
}

/// Recompose after adding `N(0, sd²)` to every cell's `θ` and `φ`.
pub fn mesh_perturb(params: &MeshParams, sd: f64, seed: u64) -> Result<ComplexMatrix> {
    if !(sd >= 0.0) {
        return Err(domain(format!("jitter {sd} is negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = params.clone();
    for cell in &mut noisy.cells {
        let (a, b): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
        cell.theta += sd * a;
        cell.phi += sd * b;
    }
    compose(&noisy)
}

/// Programmed-versus-realised fidelity averaged over `samples` Haar targets.
pub fn mean_jitter_fidelity(m: usize, sd: f64, samples: usize, seed: u64, exec: Execution) -> Result<f64> {
    if samples == 0 {
        return Err(domain("need at least one sample"));
    }
    let values: Vec<f64> = exec
        .map(samples, |i| {
            let s = derive_seed(seed, i as u64);
            let u = haar_random(m, s)?;
            let mesh = mesh_decompose(&u)?;
            amplitude_fidelity(&u, &mesh_perturb(&mesh, sd, derive_seed(s, 1))?)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / samples as f64)
}

/// Jitter at which the mean amplitude fidelity over Haar targets equals
/// `target`. The same targets and noise draws are reused for every trial value.
pub fn calibrate_jitter(m: usize, target: f64, samples: usize, seed: u64, exec: Execution) -> Result<f64> {
    if !(0.0 < target && target < 1.0) {
        return Err(domain(format!("target fidelity {target} outside (0, 1)")));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    if mean_jitter_fidelity(m, hi, samples, seed, exec)? > target {
        return Err(domain(format!("fidelity {target} not reached with jitter up to {hi}")));
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if mean_jitter_fidelity(m, mid, samples, seed, exec)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Source, detectors and control noise of the full chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Apparatus {
    pub source: SourceModel,
    pub detection: DetectionModel,
    /// Standard deviation of every mesh phase, radians.
    #[serde(default)]
    pub mesh_jitter: f64,
}

impl Apparatus {
    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.detection.validate()?;
        if !(self.mesh_jitter >= 0.0) {
            return Err(domain(format!("mesh jitter {} is negative", self.mesh_jitter)));
        }
        Ok(())
    }
}

/// Pair-number configurations `(n₁, n₂)` weighted by their probability of
/// occurring with the herald firing, restricted to those able to produce
/// `photons` clicks. Zero squeezing is read as the weak-pump limit, where only
/// `(1, 1)` survives the conditioning.
fn conditioned_pairs(src: &SourceModel, photons: usize, dark: bool) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for n1 in 0..=src.max_pairs {
        for n2 in 1..=src.max_pairs {
            if !dark && 2 * n1 + n2 < photons {
                continue;
            }
            let w = src.pair_probability(n1) * src.pair_probability(n2) * src.herald_probability(n2);
            if w > 0.0 {
                out.push((n1, n2, w));
            }
        }
    }
    out
}

fn cdf_draw(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let total = *cdf.last().expect("non-empty cdf");
    let u = rng.random::<f64>() * total;
    cdf.partition_point(|&x| x <= u).min(cdf.len() - 1)
}

fn cumulative(w: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    w.map(|x| {
        acc += x;
        acc
    })
    .collect()
}

/// Heralded shots through the mesh realisations of `sections` (applied in
/// order), each an independently perturbed mesh. `shots` counts heralded
/// source events; the returned records are not yet post-selected. Events whose
/// output equals `blinding_target` survive with [`blinding_probability`];
/// otherwise one photon lands in a uniformly chosen other mode.
#[allow(clippy::too_many_arguments)]
pub fn simulate_chain_with(
    sections: &[ComplexMatrix],
    nominal: &ModeOccupation,
    model: &Distinguishability,
    app: &Apparatus,
    blinding_target: Option<&ModeOccupation>,
    shots: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<ClickRecord>> {
    app.validate()?;
    let m = nominal.modes();
    if *nominal != nominal_input(m)? {
        return Err(domain(format!("the heralded source prepares {}, not {nominal}", nominal_input(m)?)));
    }
    if app.detection.modes() != m {
        return Err(dim(format!("{}-mode detector bank on a {m}-mode chip", app.detection.modes())));
    }
    let mut realised = ComplexMatrix::identity(m);
    for (k, section) in sections.iter().enumerate() {
        if section.rows() != m {
            return Err(dim(format!("section {k} has {} modes, expected {m}", section.rows())));
        }
        let get = if app.mesh_jitter > 0.0 {
            mesh_perturb(&mesh_decompose(section)?, app.mesh_jitter, derive_seed(seed, 1_000 + k as u64))?
        } else {
            section.clone()
        };
        realised = &get * &realised;
    }
    let photons = nominal.total();
    let pairs = conditioned_pairs(&app.source, photons, app.detection.dark_count_prob > 0.0);
    let pairs = if app.source.squeezing == 0.0 { vec![(1, 1, 1.0)] } else { pairs };
    if pairs.is_empty() {
        return Err(domain("the source never heralds"));
    }
    let pair_cdf = cumulative(pairs.iter().map(|p| p.2));
    let mut outputs: HashMap<(usize, usize), (FockDistribution, Vec<f64>)> = HashMap::new();
    for &(n1, n2, _) in &pairs {
        let input = injected(m, n1, n2)?;
        let dist = if input == *nominal {
            output_distribution_with(&realised, &input, model, exec)?
        } else {
            output_distribution_with(&realised, &input, &Distinguishability::Indistinguishable, exec)?
        };
        let cdf = cumulative(dist.probs().iter().copied());
        outputs.insert((n1, n2), (dist, cdf));
    }
    let survive = blinding_probability(app.source.pump_power_mw, &app.detection);
    let chunks = shots.div_ceil(SHOT_CHUNK);
    let records = exec.map(chunks, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, c as u64));
        let len = SHOT_CHUNK.min(shots - c * SHOT_CHUNK);
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let (n1, n2, _) = pairs[cdf_draw(&pair_cdf, &mut rng)];
            let (dist, cdf) = &outputs[&(n1, n2)];
            let mut pattern = dist.basis()[cdf_draw(cdf, &mut rng)].clone();
            if blinding_target == Some(&pattern) && rng.random::<f64>() >= survive {
                pattern = displace_photon(&pattern, &mut rng);
            }
            out.push(ClickRecord { fired: detect_with(&pattern, &app.detection, &mut rng), herald: true });
        }
        out
    });
    Ok(records.into_iter().flatten().collect())
}

/// [`simulate_chain_with`] with blinding acting on revivals of the nominal input.
pub fn simulate_chain(
    sections: &[ComplexMatrix],
    nominal: &ModeOccupation,
    model: &Distinguishability,
    app: &Apparatus,
    shots: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<ClickRecord>> {
    simulate_chain_with(sections, nominal, model, app, Some(nominal), shots, seed, exec)
}

fn displace_photon(pattern: &ModeOccupation, rng: &mut impl Rng) -> ModeOccupation {
    let photons = pattern.assignment();
    let from = photons.modes()[rng.random_range(0..photons.modes().len())] - 1;
    let m = pattern.modes();
    let mut to = rng.random_range(0..m - 1);
    if to >= from {
        to += 1;
    }
    let mut c = pattern.counts().to_vec();
    c[from] -= 1;
    c[to] += 1;
    ModeOccupation::new(c).expect("same mode count")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<ClickRecord>,
    pub corrected: FockDistribution,
}

/// Heralded source, realised `e^{-iHt}`, detection, post-selection and correction.
pub fn run_experiment(
    spec: &HamiltonianSpec,
    t: f64,
    model: &Distinguishability,
    app: &Apparatus,
    shots: usize,
    seed: u64,
) -> Result<ExperimentOutput> {
    if shots == 0 {
        return Err(domain("shots must be at least 1"));
    }
    let u = evolution(spec, t)?;
    let nominal = nominal_input(u.rows())?;
    let records = simulate_chain(&[u], &nominal, model, app, shots, seed, Execution::default())?;
    let corrected = correct_counts_with(&records, &app.detection, nominal.total())?;
    Ok(ExperimentOutput { records, corrected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::output_distribution;
    use crate::gge::joint_tvd;
    use crate::linalg::fourier;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn occ(c: &[usize]) -> ModeOccupation {
        ModeOccupation::new(c.to_vec()).unwrap()
    }

    fn quiet(det: DetectionModel) -> Apparatus {
        Apparatus {
            source: SourceModel {
                squeezing: 0.0,
                pump_power_mw: 0.0,
                heralding_efficiency: 1.0,
                pairwise_overlaps: vec![],
                max_pairs: 3,
            },
            detection: DetectionModel { blinding_intercept: 1.0, blinding_slope: 0.0, ..det },
            mesh_jitter: 0.0,
        }
    }

    #[test]
    fn tmsv_law() {
        let src = SourceModel::at_pump_power(10.0, 0.4);
        let total: f64 = (0..200).map(|n| src.pair_probability(n)).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        let l2 = src.squeezing.powi(2);
        let two_or_more = 1.0 - src.pair_probability(0) - src.pair_probability(1);
        assert_abs_diff_eq!(two_or_more, l2 * l2, epsilon = 1e-15);
        assert_abs_diff_eq!(l2, 0.01, epsilon = 1e-15);
    }

    #[test]
    fn herald_cases() {
        let mut src = SourceModel::at_pump_power(5.0, 0.0);
        assert!((0..500).all(|s| !herald_input(&src, s).unwrap().accepted));
        src.heralding_efficiency = 1.0;
        src.squeezing = 0.3;
        let ev: Vec<_> = (0..20_000).map(|s| herald_input(&src, s).unwrap()).collect();
        let acc = ev.iter().filter(|e| e.accepted).count() as f64 / ev.len() as f64;
        assert!((acc - 0.09).abs() < 0.01, "{acc}");
        assert!(ev.iter().filter(|e| e.accepted).all(|e| e.pairs[1] >= 1));

        // weak pumping: the conditioned three-photon configurations are dominated by the nominal one
        for lam in [0.1, 0.03, 0.01] {
            let s = SourceModel { squeezing: lam, ..src.clone() };
            let pairs = conditioned_pairs(&s, 3, false);
            let total: f64 = pairs.iter().map(|p| p.2).sum();
            let nominal = pairs.iter().find(|p| p.0 == 1 && p.1 == 1).unwrap().2 / total;
            assert!(nominal > 1.0 - 3.0 * lam * lam, "λ={lam}: {nominal}");
        }
    }

    #[test]
    fn overlaps_to_model() {
        let mut src = SourceModel::at_pump_power(5.0, 0.4);
        let nominal = occ(&[1, 1, 1, 0]);
        assert_eq!(src.distinguishability(&nominal).unwrap(), None);
        src.pairwise_overlaps = vec![
            ModeOverlap { modes: [1, 2], overlap: 0.932 },
            ModeOverlap { modes: [1, 3], overlap: 0.885 },
            ModeOverlap { modes: [2, 3], overlap: 0.885 },
        ];
        assert!(matches!(src.distinguishability(&nominal).unwrap(), Some(Distinguishability::Mixture { .. })));
        src.pairwise_overlaps.pop();
        assert!(src.distinguishability(&nominal).is_err());
    }

    #[test]
    fn resolution_probabilities() {
        let det = DetectionModel::uniform(4, 0.0).unwrap();
        assert_abs_diff_eq!(det.resolution_probability(0, 0), 1.0);
        assert_abs_diff_eq!(det.resolution_probability(0, 1), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(det.resolution_probability(0, 2), 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(det.resolution_probability(0, 3), 2.0 / 9.0, epsilon = 1e-15);
        assert_eq!(det.resolution_probability(0, 4), 0.0);
        let w = DetectionModel { weights: vec![0.3, 0.25, 0.2, 0.3, 0.3, 0.3, 0.1, 0.2, 0.3, 0.33, 0.33, 0.33], ..det };
        assert_abs_diff_eq!(
            w.resolution_probability(0, 2),
            2.0 * (0.3 * 0.25 + 0.25 * 0.2 + 0.3 * 0.2),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(w.resolution_probability(0, 3), 6.0 * 0.3 * 0.25 * 0.2, epsilon = 1e-15);
    }

    #[test]
    fn detection_statistics_match_closed_forms() {
        let det = DetectionModel {
            weights: vec![0.3, 0.25, 0.2, 0.3, 0.3, 0.3, 0.1, 0.2, 0.3, 0.33, 0.33, 0.33],
            ..DetectionModel::uniform(4, 0.0).unwrap()
        };
        let trials = 40_000;
        for n in 1..=3 {
            let pattern = occ(&[n, 0, 0, 0]);
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let hits = (0..trials).filter(|_| detect_with(&pattern, &det, &mut rng).len() == n).count() as f64;
            let p = det.resolution_probability(0, n);
            let sigma = (p * (1.0 - p) / trials as f64).sqrt();
            assert!((hits / trials as f64 - p).abs() < 3.0 * sigma, "n={n}");
        }
        let one = qpnr_detect(&occ(&[1, 0, 0, 0]), &DetectionModel::uniform(4, 0.0).unwrap(), 3).unwrap();
        assert_eq!(one.fired.len(), 1);
        assert!(qpnr_detect(&occ(&[1, 0, 0]), &det, 3).is_err());
    }

    #[test]
    fn dark_counts_add_clicks() {
        let det = DetectionModel { dark_count_prob: 1.0, ..DetectionModel::uniform(4, 0.0).unwrap() };
        assert_eq!(qpnr_detect(&occ(&[0, 0, 0, 0]), &det, 1).unwrap().fired.len(), 12);
    }

    #[test]
    fn records_round_trip() {
        let recs = vec![ClickRecord::new(vec![4, 0, 7], true).unwrap(), ClickRecord::new(vec![], false).unwrap()];
        assert_eq!(recs[0].fired, vec![0, 4, 7]);
        assert_eq!(recs[0].pattern(4).unwrap(), occ(&[1, 1, 1, 0]));
        let text = ClickRecord::to_ndjson(&recs);
        assert_eq!(text.lines().next().unwrap(), r#"{"fired":[0,4,7],"herald":true}"#);
        assert_eq!(ClickRecord::from_ndjson(&text).unwrap(), recs);
        assert!(ClickRecord::new(vec![1, 1], true).is_err());
        assert!(ClickRecord::from_ndjson("{\"fired\":[1],\"herald\":true,\"x\":1}").is_err());
    }

    #[test]
    fn weights_csv() {
        let w = DetectionModel::weights_from_csv("channel,weight\n2,0.5\n1,0.25\n# note\n3,0.1\n").unwrap();
        assert_eq!(w, vec![0.25, 0.5, 0.1]);
        assert!(DetectionModel::weights_from_csv("1,0.2\n3,0.1\n").is_err());
        assert!(DetectionModel { weights: vec![0.5, 0.5, 0.5], ..DetectionModel::uniform(1, 0.0).unwrap() }
            .validate()
            .is_err());
    }

    #[test]
    fn correction_removes_bias() {
        let det = DetectionModel {
            weights: vec![0.3, 0.25, 0.2, 0.3, 0.3, 0.3, 0.1, 0.2, 0.3, 0.33, 0.33, 0.33],
            ..DetectionModel::uniform(4, 0.0).unwrap()
        };
        let truth =
            output_distribution(&fourier(4, 4).unwrap(), &occ(&[1, 1, 1, 0]), &Distinguishability::Indistinguishable)
                .unwrap();
        let n = 100_000;
        let patterns = crate::fock::sample(&truth, n, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let recs: Vec<ClickRecord> =
            patterns.iter().map(|p| ClickRecord { fired: detect_with(p, &det, &mut rng), herald: true }).collect();
        let corrected = correct_counts(&recs, &det).unwrap();
        let raw = raw_frequencies(&recs, &det, 3).unwrap();
        let dc = joint_tvd(&corrected, &truth).unwrap();
        let dr = joint_tvd(&raw, &truth).unwrap();
        assert!(dc < 0.02, "{dc}");
        assert!(dr > 2.0 * dc, "{dr} vs {dc}");
        let bunched = occ(&[2, 1, 0, 0]);
        let within = (corrected.prob(&bunched) - truth.prob(&bunched)).abs();
        assert!(within < 3.0 * (truth.prob(&bunched) / (0.4 * n as f64)).sqrt());
        assert!(correct_counts(&[], &det).is_err());
    }

    #[test]
    fn blinding_line() {
        let det = DetectionModel::uniform(4, 0.0).unwrap();
        assert_abs_diff_eq!(blinding_probability(0.0, &det), 0.9534, epsilon = 1e-15);
        assert_abs_diff_eq!(blinding_probability(40.0, &det), 0.8734, epsilon = 1e-12);
        assert_eq!(blinding_probability(1e4, &det), 0.0);
    }

    #[test]
    fn mesh_special_cases() {
        let id = mesh_decompose(&ComplexMatrix::identity(5)).unwrap();
        assert_eq!(id.cells.len(), 10);
        assert!(id.cells.iter().all(|c| c.theta.abs() < 1e-15));
        let bs = mesh_decompose(&fourier(2, 2).unwrap()).unwrap();
        assert_eq!(bs.cells.len(), 1);
        assert_abs_diff_eq!(bs.cells[0].theta, PI / 4.0, epsilon = 1e-12);
        let rect = ComplexMatrix::from_real_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert!(mesh_decompose(&rect).is_err());
        let u = haar_random(4, 3).unwrap();
        let mesh = mesh_decompose(&u).unwrap();
        assert_eq!(mesh_perturb(&mesh, 0.0, 1).unwrap().max_abs_diff(&compose(&mesh).unwrap()).unwrap(), 0.0);
        assert!(mesh_perturb(&mesh, -1.0, 1).is_err());
    }

    #[test]
    fn mesh_round_trip_up_to_twelve_modes() {
        for m in 2..=12 {
            for seed in 0..3 {
                let u = haar_random(m, seed).unwrap();
                let mesh = mesh_decompose(&u).unwrap();
                assert_eq!(mesh.cells.len(), m * (m - 1) / 2);
                for c in &mesh.cells {
                    assert!((0.0..=PI / 2.0).contains(&c.theta));
                    assert!((0.0..TAU).contains(&c.phi));
                }
                assert!(mesh.output_phases.iter().all(|p| (0.0..TAU).contains(p)));
                let err = compose(&mesh).unwrap().max_abs_diff(&u).unwrap();
                assert!(err < 1e-8, "m={m} seed={seed}: {err}");
            }
        }
    }

    #[test]
    fn jitter_lowers_fidelity() {
        let exec = Execution::default();
        let f0 = mean_jitter_fidelity(6, 0.0, 20, 1, exec).unwrap();
        let f1 = mean_jitter_fidelity(6, 0.05, 20, 1, exec).unwrap();
        let f2 = mean_jitter_fidelity(6, 0.2, 20, 1, exec).unwrap();
        assert_abs_diff_eq!(f0, 1.0, epsilon = 1e-12);
        assert!(f0 > f1 && f1 > f2);
        assert_eq!(f1, mean_jitter_fidelity(6, 0.05, 20, 1, Execution::Sequential).unwrap());
        let sd = calibrate_jitter(6, 0.98, 20, 1, exec).unwrap();
        assert_abs_diff_eq!(mean_jitter_fidelity(6, sd, 20, 1, exec).unwrap(), 0.98, epsilon = 1e-6);
    }

    #[test]
    fn noiseless_chain_matches_exact() {
        let det = DetectionModel::uniform(4, 0.1).unwrap();
        let app = quiet(det);
        let spec = HamiltonianSpec::hopping(4);
        let out = run_experiment(&spec, 1.0, &Distinguishability::Indistinguishable, &app, 200_000, 4).unwrap();
        let exact = output_distribution(
            &evolution(&spec, 1.0).unwrap(),
            &occ(&[1, 1, 1, 0]),
            &Distinguishability::Indistinguishable,
        )
        .unwrap();
        let d = joint_tvd(&out.corrected, &exact).unwrap();
        assert!(d < 0.02, "{d}");
        let again = run_experiment(&spec, 1.0, &Distinguishability::Indistinguishable, &app, 200_000, 4).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn blinding_depresses_revivals() {
        let det = DetectionModel::uniform(4, 0.0).unwrap();
        let app = Apparatus {
            source: SourceModel {
                squeezing: 0.0,
                pump_power_mw: 40.0,
                heralding_efficiency: 1.0,
                pairwise_overlaps: vec![],
                max_pairs: 3,
            },
            detection: det,
            mesh_jitter: 0.0,
        };
        let spec = HamiltonianSpec::Explicit { matrix: crate::linalg::HermitianMatrix::zeros(4) };
        let out = run_experiment(&spec, 1.0, &Distinguishability::Indistinguishable, &app, 100_000, 2).unwrap();
        let p = out.corrected.prob(&occ(&[1, 1, 1, 0]));
        // blinded events that keep three distinct clicks are re-weighted by the correction
        let survive = blinding_probability(40.0, &app.detection);
        let moved = (1.0 - survive) * (2.0 / 3.0);
        let expect = survive / (survive + moved * 1.5);
        assert!((p - expect).abs() < 0.01, "{p} vs {expect}");
        assert!(p < 0.9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn correction_is_consistent(w in proptest::collection::vec(0.05f64..0.33, 12), seed in 0u64..1000) {
            let det = DetectionModel { weights: w, ..DetectionModel::uniform(4, 0.0).unwrap() };
            let truth = output_distribution(&haar_random(4, seed).unwrap(), &occ(&[1, 1, 1, 0]), &Distinguishability::Indistinguishable).unwrap();
            let patterns = crate::fock::sample(&truth, 100_000, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let recs: Vec<ClickRecord> = patterns.iter().map(|p| ClickRecord { fired: detect_with(p, &det, &mut rng), herald: true }).collect();
            let corrected = correct_counts(&recs, &det).unwrap();
            // Kolmogorov-Smirnov distance over the canonical order
            let (mut a, mut b, mut ks) = (0.0, 0.0, 0.0f64);
            for (x, y) in corrected.probs().iter().zip(truth.probs()) {
                a += x;
                b += y;
                ks = ks.max((a - b).abs());
            }
            prop_assert!(ks < 0.03, "KS {}", ks);
        }
    }
}
