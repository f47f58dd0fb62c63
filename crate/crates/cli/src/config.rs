//! Experiment configuration: TOML on disk, resolved into a self-contained
//! JSON record that is hashed, embedded in every output and used to name the
//! run directory.

use std::path::Path;

use photherm::apparatus::{
    calibrate_jitter, Apparatus, DetectionModel, ModeOverlap, SourceModel, PAIR_PROBABILITY_PER_MW,
};
use photherm::certify::VarianceMode;
use photherm::gge::RecurrenceScan;
use photherm::hamiltonian::HamiltonianSpec;
use photherm::{Distinguishability, Execution, ModeOccupation, SpeciesPartition};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Haar targets averaged when calibrating the mesh jitter.
pub const CALIBRATION_MODES: usize = 12;

fn one() -> usize {
    1
}

fn default_shots() -> usize {
    100_000
}

fn default_models() -> Vec<ModelConfig> {
    vec![ModelConfig::Indistinguishable, ModelConfig::Distinguishable]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub hamiltonian: HamiltonianSpec,
    /// Number of Haar-generated Hamiltonians, seeds `seed, seed + 1, …`
    /// (`long_range_from_haar` only).
    #[serde(default = "one")]
    pub instances: usize,
    pub times: Times,
    #[serde(default = "default_models")]
    pub models: Vec<ModelConfig>,
    /// Input occupation; `(1, 1, 1, 0, …)` by default.
    #[serde(default)]
    pub input: Option<Vec<usize>>,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub gge: GgeConfig,
    #[serde(default)]
    pub apparatus: Option<ApparatusConfig>,
    #[serde(default)]
    pub certification: Option<CertificationConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Times {
    List(Vec<f64>),
    Grid(TimeGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub start: f64,
    pub stop: f64,
    pub points: usize,
}

impl Times {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Times::List(v) => v.clone(),
            Times::Grid(g) if g.points == 1 => vec![g.start],
            Times::Grid(g) => {
                let step = (g.stop - g.start) / (g.points - 1) as f64;
                (0..g.points).map(|i| g.start + step * i as f64).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Indistinguishable,
    Distinguishable,
    /// Every pair of photons has this mean squared overlap.
    Overlap {
        overlap: f64,
    },
    /// Probability of each photon to occupy the shared internal state.
    Purities {
        purities: Vec<f64>,
    },
    /// Photons with equal labels are identical, others distinguishable.
    Species {
        labels: Vec<usize>,
    },
    /// Pairwise overlaps of the apparatus source.
    Source,
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Indistinguishable => "indistinguishable",
            ModelConfig::Distinguishable => "distinguishable",
            ModelConfig::Overlap { .. } => "overlap",
            ModelConfig::Purities { .. } => "purities",
            ModelConfig::Species { .. } => "species",
            ModelConfig::Source => "source",
        }
    }

    fn build(&self, input: &ModeOccupation, apparatus: Option<&Apparatus>) -> photherm::Result<Distinguishability> {
        Ok(match self {
            ModelConfig::Indistinguishable => Distinguishability::Indistinguishable,
            ModelConfig::Distinguishable => Distinguishability::Distinguishable,
            ModelConfig::Overlap { overlap } => Distinguishability::from_overlap(input, *overlap)?,
            ModelConfig::Purities { purities } => Distinguishability::from_photon_purities(input, purities)?,
            ModelConfig::Species { labels } => {
                Distinguishability::Species { partition: SpeciesPartition::from_labels(input, labels)? }
            }
            ModelConfig::Source => {
                let src = apparatus
                    .map(|a| &a.source)
                    .ok_or_else(|| photherm::Error::Domain("model `source` needs an apparatus block".into()))?;
                src.distinguishability(input)?
                    .ok_or_else(|| photherm::Error::Domain("model `source` needs apparatus.pairwise_overlaps".into()))?
            }
        })
    }
}

fn default_mode() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_t_max() -> f64 {
    RecurrenceScan::default().t_max
}

fn default_points() -> usize {
    RecurrenceScan::default().points
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GgeConfig {
    /// One-based mode whose marginal is traced.
    #[serde(default = "default_mode")]
    pub mode: usize,
    #[serde(default = "default_true")]
    pub recurrence: bool,
    #[serde(default = "default_t_max")]
    pub recurrence_t_max: f64,
    #[serde(default = "default_points")]
    pub recurrence_points: usize,
}

impl Default for GgeConfig {
    fn default() -> Self {
        Self { mode: 1, recurrence: true, recurrence_t_max: default_t_max(), recurrence_points: default_points() }
    }
}

fn default_efficiency() -> f64 {
    0.425
}

fn default_max_pairs() -> usize {
    3
}

fn default_slope() -> f64 {
    -0.0020
}

fn default_intercept() -> f64 {
    0.9534
}

fn default_calibration_samples() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApparatusConfig {
    pub pump_power_mw: f64,
    /// Defaults to `√(10⁻³·pump_power_mw)`.
    #[serde(default)]
    pub squeezing: Option<f64>,
    #[serde(default = "default_efficiency")]
    pub heralding_efficiency: f64,
    #[serde(default)]
    pub pairwise_overlaps: Vec<ModeOverlap>,
    #[serde(default = "default_max_pairs")]
    pub max_pairs: usize,
    /// Per-channel weights; equal `(1 − loss)/3` splitting when absent.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// `channel,weight` CSV, relative to the config file.
    #[serde(default)]
    pub weights_file: Option<String>,
    #[serde(default)]
    pub loss: f64,
    #[serde(default = "default_slope")]
    pub blinding_slope: f64,
    #[serde(default = "default_intercept")]
    pub blinding_intercept: f64,
    #[serde(default)]
    pub dark_count_prob: f64,
    /// Phase noise in radians; calibrated from `target_fidelity` when absent.
    #[serde(default)]
    pub mesh_jitter: Option<f64>,
    #[serde(default)]
    pub target_fidelity: Option<f64>,
    #[serde(default = "default_calibration_samples")]
    pub calibration_samples: usize,
}

fn default_epsilons() -> Vec<f64> {
    vec![0.7, 0.8, 0.9]
}

fn default_batches() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificationConfig {
    /// Each value is used for both settings.
    #[serde(default = "default_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default = "default_batches")]
    pub batches: usize,
    /// Witness side A is modes `1..=bipartition`.
    #[serde(default = "one")]
    pub bipartition: usize,
    #[serde(default = "one")]
    pub period: usize,
    #[serde(default)]
    pub variance: VarianceMode,
}

impl Default for CertificationConfig {
    fn default() -> Self {
        Self {
            epsilons: default_epsilons(),
            batches: default_batches(),
            bipartition: 1,
            period: 1,
            variance: VarianceMode::default(),
        }
    }
}

/// Fully resolved run: config with flag overrides applied, external weight
/// files inlined and the mesh jitter calibrated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub command: String,
    pub config: ExperimentConfig,
}

impl Resolved {
    pub fn json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }

    /// Single-line JSON of the resolved config.
    pub fn compact(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of [`Resolved::compact`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.compact().as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub fn parse(text: &str, origin: &str) -> Result<ExperimentConfig, CliError> {
    toml::from_str(text).map_err(|e| invalid(format!("{origin}: {e}")))
}

pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, &path.display().to_string())
}

/// Apply overrides, inline external files and check every invariant.
pub fn resolve(
    command: &str,
    mut config: ExperimentConfig,
    seed: Option<u64>,
    base_dir: &Path,
) -> Result<Resolved, CliError> {
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(app) = config.apparatus.as_mut() {
        if let Some(file) = app.weights_file.take() {
            if app.weights.is_some() {
                return Err(invalid("apparatus: give either weights or weights_file"));
            }
            let path = base_dir.join(&file);
            let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            app.weights =
                Some(DetectionModel::weights_from_csv(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?);
        }
        if app.mesh_jitter.is_none() {
            if let Some(target) = app.target_fidelity {
                let sd = calibrate_jitter(CALIBRATION_MODES, target, app.calibration_samples, 0, Execution::default())
                    .map_err(|e| invalid(format!("apparatus.target_fidelity: {e}")))?;
                app.mesh_jitter = Some(sd);
            }
        }
    }
    let resolved = Resolved { command: command.to_string(), config };
    Plan::new(&resolved)?;
    Ok(resolved)
}

/// Everything the commands need, built from a resolved config.
pub struct Plan {
    pub hamiltonians: Vec<HamiltonianSpec>,
    pub times: Vec<f64>,
    pub input: ModeOccupation,
    pub models: Vec<(String, Distinguishability)>,
    pub apparatus: Option<Apparatus>,
}

impl Plan {
    pub fn new(resolved: &Resolved) -> Result<Self, CliError> {
        let c = &resolved.config;
        c.hamiltonian.validate().map_err(|e| invalid(format!("hamiltonian: {e}")))?;
        let m = c.hamiltonian.modes();
        let hamiltonians = match (&c.hamiltonian, c.instances) {
            (_, 0) => return Err(invalid("instances must be at least 1")),
            (HamiltonianSpec::LongRangeFromHaar { m, seed }, k) => {
                (0..k as u64).map(|i| HamiltonianSpec::LongRangeFromHaar { m: *m, seed: seed + i }).collect()
            }
            (h, 1) => vec![h.clone()],
            _ => return Err(invalid("instances > 1 needs a long_range_from_haar hamiltonian")),
        };
        let times = c.times.values();
        if times.is_empty() {
            return Err(invalid("times: at least one time is needed"));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(invalid(format!("times: {t} is not finite")));
        }
        if c.shots == 0 {
            return Err(invalid("shots must be at least 1"));
        }
        let input = match &c.input {
            Some(v) => ModeOccupation::new(v.clone()).map_err(|e| invalid(format!("input: {e}")))?,
            None if m >= 3 => photherm::apparatus::nominal_input(m).map_err(|e| invalid(e.to_string()))?,
            None => ModeOccupation::ones(m, m).map_err(|e| invalid(e.to_string()))?,
        };
        if input.modes() != m {
            return Err(invalid(format!("input has {} modes, hamiltonian {m}", input.modes())));
        }
        if input.total() == 0 {
            return Err(invalid("input: at least one photon is needed"));
        }
        let apparatus = c.apparatus.as_ref().map(|a| build_apparatus(a, m)).transpose()?;
        if apparatus.is_some() && Some(&input) != photherm::apparatus::nominal_input(m).ok().as_ref() {
            return Err(invalid(format!("input: the heralded source only prepares (1,1,1,0,…), not {input}")));
        }
        if c.models.is_empty() {
            return Err(invalid("models: at least one model is needed"));
        }
        let mut models = Vec::new();
        for (i, mc) in c.models.iter().enumerate() {
            let model = mc.build(&input, apparatus.as_ref()).map_err(|e| invalid(format!("models[{i}]: {e}")))?;
            let clash = c.models.iter().filter(|o| o.name() == mc.name()).count() > 1;
            let name = if clash { format!("{}{}", mc.name(), i) } else { mc.name().to_string() };
            models.push((name, model));
        }
        if let Some(cert) = &c.certification {
            if cert.epsilons.is_empty() || cert.epsilons.iter().any(|e| !(0.0 < *e && *e < 1.0)) {
                return Err(invalid("certification.epsilons must be non-empty and inside (0, 1)"));
            }
            if cert.batches == 0 || cert.batches > c.shots {
                return Err(invalid("certification.batches must lie in 1..=shots"));
            }
            if cert.bipartition == 0 || cert.bipartition >= m {
                return Err(invalid(format!("certification.bipartition must lie in 1..{m}")));
            }
        }
        if c.gge.mode == 0 || c.gge.mode > m {
            return Err(invalid(format!("gge.mode must lie in 1..={m}")));
        }
        Ok(Self { hamiltonians, times, input, models, apparatus })
    }
}

fn build_apparatus(a: &ApparatusConfig, m: usize) -> Result<Apparatus, CliError> {
    let source = SourceModel {
        squeezing: a.squeezing.unwrap_or_else(|| (PAIR_PROBABILITY_PER_MW * a.pump_power_mw.max(0.0)).sqrt()),
        pump_power_mw: a.pump_power_mw,
        heralding_efficiency: a.heralding_efficiency,
        pairwise_overlaps: a.pairwise_overlaps.clone(),
        max_pairs: a.max_pairs,
    };
    let mut detection = match &a.weights {
        Some(w) => DetectionModel {
            weights: w.clone(),
            ..DetectionModel::uniform(m, 0.0).map_err(|e| invalid(e.to_string()))?
        },
        None => DetectionModel::uniform(m, a.loss).map_err(|e| invalid(format!("apparatus.loss: {e}")))?,
    };
    detection.blinding_slope = a.blinding_slope;
    detection.blinding_intercept = a.blinding_intercept;
    detection.dark_count_prob = a.dark_count_prob;
    if detection.modes() != m {
        return Err(invalid(format!("apparatus: {} weights for {m} modes", detection.weights.len())));
    }
    let app = Apparatus { source, detection, mesh_jitter: a.mesh_jitter.unwrap_or(0.0) };
    app.validate().map_err(|e| invalid(format!("apparatus: {e}")))?;
    Ok(app)
}
