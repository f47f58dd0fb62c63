//! Local equilibration observables: single-mode photon-number marginals,
//! momentum-mode occupations, the geometric generalized-Gibbs marginal and
//! total variation distances between them.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{dim, domain, Result};
use crate::exec::Execution;
use crate::fock::{
    enumerate_basis, output_distribution_with, Distinguishability, FockDistribution, ModeOccupation, NORM_TOL,
};
use crate::hamiltonian::{evolution, HamiltonianSpec};
use crate::linalg::ComplexMatrix;

/// Photon-number law `p(0..=n)` of one mode. `mode` is one-based; model
/// predictions that hold for every mode carry `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalDistribution {
    pub mode: Option<usize>,
    pub probs: Vec<f64>,
}

impl MarginalDistribution {
    pub fn new(mode: Option<usize>, probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(dim("marginal needs at least p(0)"));
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= 0.0)) {
            return Err(domain(format!("negative probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > NORM_TOL {
            return Err(domain(format!("marginal sums to {sum}")));
        }
        Ok(Self { mode, probs })
    }

    pub fn photons(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }
}

/// `p(k) = Σ_{μ: μ_mode = k} P(μ)`, `mode` one-based.
pub fn marginal(dist: &FockDistribution, mode: usize) -> Result<MarginalDistribution> {
    if mode == 0 || mode > dist.modes() {
        return Err(domain(format!("mode {mode} outside 1..={}", dist.modes())));
    }
    let mut probs = vec![0.0; dist.photons() + 1];
    for (b, p) in dist.iter() {
        probs[b.get(mode - 1)] += p;
    }
    Ok(MarginalDistribution { mode: Some(mode), probs })
}

/// Untruncated geometric law `D^k/(D+1)^{k+1}`, `D = n/m`, for `k = 0..=n`.
pub fn gge_untruncated(n: usize, m: usize) -> Vec<f64> {
    assert!(m >= 1, "density needs at least one mode");
    let d = n as f64 / m as f64;
    (0..=n).map(|k| d.powi(k as i32) / (d + 1.0).powi(k as i32 + 1)).collect()
}

/// Geometric law truncated at `k = n` and renormalised over `0..=n`.
pub fn gge_marginal(n: usize, m: usize) -> MarginalDistribution {
    let raw = gge_untruncated(n, m);
    let total: f64 = raw.iter().sum();
    MarginalDistribution { mode: None, probs: raw.into_iter().map(|p| p / total).collect() }
}

/// Both forms of the generalized-Gibbs single-mode prediction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GgePrediction {
    pub density: f64,
    pub truncated: Vec<f64>,
    pub untruncated: Vec<f64>,
}

pub fn gge_prediction(n: usize, m: usize) -> GgePrediction {
    GgePrediction {
        density: n as f64 / m as f64,
        truncated: gge_marginal(n, m).probs,
        untruncated: gge_untruncated(n, m),
    }
}

/// The generalized-Gibbs state restricted to exactly `n` photons. A product
/// of identical geometric laws conditioned on the total weighs every pattern
/// by `x^n`, so this is the uniform distribution over the basis.
pub fn gge_joint(n: usize, m: usize) -> Result<FockDistribution> {
    let size = enumerate_basis(n, m).len();
    FockDistribution::from_weights(n, m, vec![1.0; size])
}

/// Expectations `⟨N̂_k⟩`, `k = 0..m−1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentumOccupations {
    pub values: Vec<f64>,
}

impl MomentumOccupations {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `⟨b†_x b_y⟩` after the passive transformation `u` applied to the Fock state `r`.
pub fn correlation_matrix(u: &ComplexMatrix, r: &ModeOccupation) -> Result<DMatrix<Complex64>> {
    let m = r.modes();
    if u.rows() != m || u.cols() != m {
        return Err(dim(format!("{}x{} transformation on {m} modes", u.rows(), u.cols())));
    }
    Ok(DMatrix::from_fn(m, m, |x, y| (0..m).map(|j| u.get(x, j).conj() * u.get(y, j) * r.get(j) as f64).sum()))
}

/// `⟨N̂_k⟩ = (1/m) Σ_{x,y} e^{2πik(y−x)/m} C_xy`.
pub fn momentum_from_correlations(c: &DMatrix<Complex64>) -> Result<MomentumOccupations> {
    let m = c.nrows();
    if m == 0 || c.ncols() != m {
        return Err(dim("correlation matrix must be square and non-empty"));
    }
    let values = (0..m)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            for x in 0..m {
                for y in 0..m {
                    let phase = 2.0 * PI * (k * (y + m - x) % m) as f64 / m as f64;
                    acc += Complex64::from_polar(1.0, phase) * c[(x, y)];
                }
            }
            acc.re / m as f64
        })
        .collect();
    Ok(MomentumOccupations { values })
}

/// Momentum occupations of the Fock state `r`; uniform `n/m`.
pub fn momentum_occupations(r: &ModeOccupation) -> MomentumOccupations {
    let c =
        DMatrix::from_fn(r.modes(), r.modes(), |x, y| Complex64::new(if x == y { r.get(x) as f64 } else { 0.0 }, 0.0));
    momentum_from_correlations(&c).expect("square by construction")
}

/// `½ Σ_k |p(k) − q(k)|`
pub fn tvd(p: &MarginalDistribution, q: &MarginalDistribution) -> Result<f64> {
    tvd_slices(&p.probs, &q.probs)
}

/// Total variation distance between two full output distributions.
pub fn joint_tvd(p: &FockDistribution, q: &FockDistribution) -> Result<f64> {
    if p.basis() != q.basis() {
        return Err(domain("distributions live on different bases"));
    }
    tvd_slices(p.probs(), q.probs())
}

pub(crate) fn tvd_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(domain(format!("support lengths differ: {} vs {}", p.len(), q.len())));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TracePoint {
    pub t: f64,
    pub marginal: MarginalDistribution,
    /// Distance from the truncated generalized-Gibbs marginal.
    pub tvd: f64,
}

/// Mode-1 marginal and its distance from the generalized-Gibbs law at each time.
pub fn equilibration_trace(
    spec: &HamiltonianSpec,
    r: &ModeOccupation,
    times: &[f64],
    model: &Distinguishability,
) -> Result<Vec<TracePoint>> {
    equilibration_trace_with(spec, r, times, model, 1, Execution::default())
}

pub fn equilibration_trace_with(
    spec: &HamiltonianSpec,
    r: &ModeOccupation,
    times: &[f64],
    model: &Distinguishability,
    mode: usize,
    exec: Execution,
) -> Result<Vec<TracePoint>> {
    if times.is_empty() {
        return Err(domain("trace needs at least one time"));
    }
    if spec.modes() != r.modes() {
        return Err(dim(format!("{}-mode Hamiltonian with a {}-mode input", spec.modes(), r.modes())));
    }
    let gge = gge_marginal(r.total(), r.modes());
    exec.map(times.len(), |i| {
        let t = times[i];
        let marginal = mode_marginal_at(spec, r, model, mode, t)?;
        let tvd = tvd(&marginal, &gge)?;
        Ok(TracePoint { t, marginal, tvd })
    })
    .into_iter()
    .collect()
}

fn mode_marginal_at(
    spec: &HamiltonianSpec,
    r: &ModeOccupation,
    model: &Distinguishability,
    mode: usize,
    t: f64,
) -> Result<MarginalDistribution> {
    let u = evolution(spec, t)?;
    // time points are already spread over threads
    let dist = output_distribution_with(&u, r, model, Execution::Sequential)?;
    marginal(&dist, mode)
}

/// Grid scan parameters for [`find_recurrence`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecurrenceScan {
    pub t_max: f64,
    pub points: usize,
    /// The marginal must first move at least this far (TVD) from its initial value.
    pub depart: f64,
    /// Grid minima farther than this from the initial marginal are ignored.
    pub accept: f64,
    pub mode: usize,
}

impl Default for RecurrenceScan {
    fn default() -> Self {
        Self { t_max: 10.0, points: 2000, depart: 0.1, accept: 0.05, mode: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recurrence {
    pub t: f64,
    /// TVD between the marginal at `t` and at `t = 0`.
    pub distance: f64,
}

/// First time after departure at which the single-mode marginal returns to
/// its initial value: a grid scan followed by golden-section refinement of the
/// first qualifying local minimum. `None` if no return is found in `(0, t_max]`.
pub fn find_recurrence(
    spec: &HamiltonianSpec,
    r: &ModeOccupation,
    model: &Distinguishability,
    scan: RecurrenceScan,
    exec: Execution,
) -> Result<Option<Recurrence>> {
    if !(scan.t_max > 0.0) || scan.points < 3 {
        return Err(domain("recurrence scan needs t_max > 0 and at least 3 points"));
    }
    let start = mode_marginal_at(spec, r, model, scan.mode, 0.0)?;
    let distance = |t: f64| -> Result<f64> { tvd(&mode_marginal_at(spec, r, model, scan.mode, t)?, &start) };
    let step = scan.t_max / scan.points as f64;
    let grid: Vec<f64> = exec.map(scan.points + 1, |i| distance(i as f64 * step)).into_iter().collect::<Result<_>>()?;
    let Some(left) = grid.iter().position(|&d| d > scan.depart) else {
        return Ok(None);
    };
    for i in left.max(1)..scan.points {
        if grid[i] <= grid[i - 1] && grid[i] <= grid[i + 1] && grid[i] < scan.accept {
            let (t, d) = golden_min(&distance, (i - 1) as f64 * step, (i + 1) as f64 * step, 1e-12)?;
            return Ok(Some(Recurrence { t, distance: d }));
        }
    }
    Ok(None)
}

fn golden_min(f: &dyn Fn(f64) -> Result<f64>, mut a: f64, mut b: f64, tol: f64) -> Result<(f64, f64)> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    let t = 0.5 * (a + b);
    Ok((t, f(t)?))
}

/// Trace rows `t,k,p_k,tvd`, one per photon number.
pub fn trace_csv(points: &[TracePoint]) -> String {
    let mut out = String::from("t,k,p_k,tvd\n");
    for p in points {
        for (k, pk) in p.marginal.probs.iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", p.t, k, pk, p.tvd));
        }
    }
    out
}
