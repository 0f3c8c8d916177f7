//! Experiment configuration: one JSON file, validated on load.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::Grid;
use crate::fields::{Bump, LorenzParams};
use crate::integrate::StepPolicy;
use crate::regularize::{RegularizationMode, RegularizationSpec, SamplerFamily, SamplerSpec};

pub const EXPERIMENTS: [&str; 9] = [
    "blowup",
    "trajectories",
    "density",
    "nu-convergence",
    "sampler-independence",
    "srb-predict",
    "self-similarity",
    "perturbation",
    "det-sensitivity",
];

/// Invalid or unreadable configuration; `path` locates the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "config error: {}", self.message)
        } else {
            write!(f, "config error at {}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldName {
    Planar,
    Lorenz4d,
}

impl FieldName {
    pub fn dim(self) -> usize {
        match self {
            FieldName::Planar => 2,
            FieldName::Lorenz4d => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub name: FieldName,
    /// Lorenz parameters; only meaningful for `lorenz4d`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<LorenzParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub bounds: [f64; 4],
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    pub fn grid(&self) -> Result<Grid, String> {
        Grid::new(self.bounds, self.nx, self.ny).map_err(|e| e.to_string())
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            bounds: [-4.0, 4.0, -4.0, 4.0],
            nx: 64,
            ny: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub t_targets: Vec<f64>,
    pub grid: GridSpec,
    /// Per-target grids overriding `grid`, one per target time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grids: Option<Vec<GridSpec>>,
    pub dims: [usize; 2],
    /// Bootstrap resample pairs for noise floors.
    pub bootstrap: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub policy: StepPolicy,
    pub t_max: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            t_targets: vec![1.6, 2.0],
            grid: GridSpec::default(),
            grids: None,
            dims: [0, 1],
            bootstrap: 20,
            workers: None,
            policy: StepPolicy::default(),
            t_max: 100.0,
        }
    }
}

impl EnsembleConfig {
    pub fn grid_for(&self, target: usize) -> GridSpec {
        self.grids.as_ref().map_or(self.grid, |g| g[target])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub s_burn: f64,
    /// Length of the orbit used to estimate `F_m`, `F_M`.
    pub s_total: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub stride: f64,
    pub tolerance: f64,
    pub dt: f64,
    /// Relative widening of the empirical radial bounds.
    pub margin: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f_m: Option<f64>,
    /// Start of the long orbit; the direction of the first ensemble sample when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            s_burn: 100.0,
            s_total: 2e4,
            m: 10_000,
            stride: 1.0,
            tolerance: 1e-8,
            dt: 1e-2,
            margin: 0.1,
            f_m: None,
            y0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderConfig {
    /// Regularization scales compared by `nu-convergence`.
    pub nus: Vec<f64>,
    /// Scales visited by `det-sensitivity`.
    pub sensitivity: Vec<f64>,
}

impl Default for LadderConfig {
    fn default() -> Self {
        let s = 10f64.sqrt();
        Self {
            nus: vec![1e-4, 1e-6],
            sensitivity: vec![1e-4, 1e-4 / s, 1e-5, 1e-5 / s, 1e-6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoriesConfig {
    pub count: usize,
    pub sample_dt: f64,
    /// Defaults to the last target time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_end: Option<f64>,
}

impl Default for TrajectoriesConfig {
    fn default() -> Self {
        Self {
            count: 3,
            sample_dt: 0.01,
            t_end: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PullbackConfig {
    /// Grid over `(w, coordinate)`.
    pub grid: GridSpec,
    /// Stereographic coordinate (lorenz4d) or sphere component (planar).
    pub coordinate: usize,
}

impl Default for PullbackConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec {
                bounds: [0.0, 5.0, -1.0, 1.0],
                nx: 32,
                ny: 32,
            },
            coordinate: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Checks {
    /// Allowed L1 distance in units of the bootstrap floor.
    pub l1_factor: f64,
    /// Same, for the SRB′ prediction.
    pub predict_factor: f64,
    /// Minimum direction change (radians) for `det-sensitivity`.
    pub sensitivity_angle: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_b_range: Option<[f64; 2]>,
    /// Optional bound on the perturbation L1 ratio; reported only when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perturbation_factor: Option<f64>,
}

impl Default for Checks {
    fn default() -> Self {
        Self {
            l1_factor: 2.0,
            predict_factor: 3.0,
            sensitivity_angle: 0.5,
            t_b_range: None,
            perturbation_factor: None,
        }
    }
}

fn default_regularization() -> RegularizationSpec {
    RegularizationSpec::direct(1e-5, 0)
}

fn default_output() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub field: FieldConfig,
    pub x0: Vec<f64>,
    #[serde(default = "default_regularization")]
    pub regularization: RegularizationSpec,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub ladder: LadderConfig,
    /// Second escape sampler for `sampler-independence`; a Gaussian with
    /// the primary sampler's center and cone when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_sampler: Option<SamplerSpec>,
    #[serde(default)]
    pub trajectories: TrajectoriesConfig,
    #[serde(default)]
    pub pullback: PullbackConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<Bump>,
    #[serde(default)]
    pub checks: Checks,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: String,
}

/// Reads, parses and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::at("", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::at(path, e.into_inner().to_string())
    })?;
    if cfg.regularization.seed != 0 && cfg.regularization.seed != cfg.seed {
        return Err(ConfigError::at("regularization.seed", "conflicts with the top-level seed"));
    }
    cfg.regularization.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::at(path, format!("must be positive and finite, got {v}")))
    }
}

fn length(path: &str, v: &[f64], d: usize) -> Result<(), ConfigError> {
    if v.len() != d {
        return Err(ConfigError::at(path, format!("needs {d} components, got {}", v.len())));
    }
    if v.iter().any(|c| !c.is_finite()) {
        return Err(ConfigError::at(path, "components must be finite"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn dim(&self) -> usize {
        self.field.name.dim()
    }

    pub fn lorenz_params(&self) -> LorenzParams {
        self.field.params.unwrap_or_default()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return Err(ConfigError::at(
                "experiment",
                format!("unknown experiment {:?}; expected one of {}", self.experiment, EXPERIMENTS.join(", ")),
            ));
        }
        let d = self.dim();
        if self.field.name == FieldName::Planar && self.field.params.is_some() {
            return Err(ConfigError::at("field.params", "the planar field takes no parameters"));
        }
        length("x0", &self.x0, d)?;
        if self.x0.iter().all(|c| *c == 0.0) {
            return Err(ConfigError::at("x0", "must be nonzero"));
        }
        let reg = &self.regularization;
        reg.validate().map_err(|e| ConfigError::at("regularization", e.to_string()))?;
        if let Some(h0) = &reg.h0 {
            length("regularization.h0", h0, d)?;
        }
        if let Some(o) = &reg.h0_offset {
            length("regularization.h0_offset", o, d)?;
        }
        if reg.mode == RegularizationMode::MapStochastic || self.experiment == "sampler-independence" {
            check_sampler("regularization.sampler", &reg.sampler, d)?;
        }
        if let Some(s) = &self.compare_sampler {
            check_sampler("compare_sampler", s, d)?;
        }
        let e = &self.ensemble;
        if e.n == 0 {
            return Err(ConfigError::at("ensemble.N", "must be at least 1"));
        }
        if e.t_targets.is_empty() || e.t_targets.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(ConfigError::at("ensemble.t_targets", "must be nonempty and strictly ascending"));
        }
        for (k, t) in e.t_targets.iter().enumerate() {
            positive(&format!("ensemble.t_targets[{k}]"), *t)?;
        }
        e.grid.grid().map_err(|m| ConfigError::at("ensemble.grid", m))?;
        if let Some(gs) = &e.grids {
            if gs.len() != e.t_targets.len() {
                return Err(ConfigError::at("ensemble.grids", "needs one grid per target time"));
            }
            for (k, g) in gs.iter().enumerate() {
                g.grid().map_err(|m| ConfigError::at(format!("ensemble.grids[{k}]"), m))?;
            }
        }
        if e.dims[0] >= d || e.dims[1] >= d || e.dims[0] == e.dims[1] {
            return Err(ConfigError::at("ensemble.dims", format!("need two distinct indices below {d}")));
        }
        if e.bootstrap < 10 {
            return Err(ConfigError::at("ensemble.bootstrap", "must be at least 10"));
        }
        if e.workers == Some(0) {
            return Err(ConfigError::at("ensemble.workers", "must be at least 1"));
        }
        e.policy.validate().map_err(|err| ConfigError::at("ensemble.policy", err.to_string()))?;
        positive("ensemble.t_max", e.t_max)?;
        let a = &self.analysis;
        if !(a.s_burn >= 0.0) {
            return Err(ConfigError::at("analysis.s_burn", "must be nonnegative"));
        }
        positive("analysis.s_total", a.s_total)?;
        positive("analysis.stride", a.stride)?;
        positive("analysis.tolerance", a.tolerance)?;
        positive("analysis.dt", a.dt)?;
        if !(0.0..1.0).contains(&a.margin) {
            return Err(ConfigError::at("analysis.margin", "must lie in [0, 1)"));
        }
        if a.m == 0 {
            return Err(ConfigError::at("analysis.M", "must be at least 1"));
        }
        if let Some(f) = a.f_m {
            positive("analysis.f_m", f)?;
        }
        if let Some(y) = &a.y0 {
            length("analysis.y0", y, d)?;
        }
        for (name, nus) in [("ladder.nus", &self.ladder.nus), ("ladder.sensitivity", &self.ladder.sensitivity)] {
            if nus.is_empty() {
                return Err(ConfigError::at(name, "must be nonempty"));
            }
            for (k, v) in nus.iter().enumerate() {
                positive(&format!("{name}[{k}]"), *v)?;
            }
        }
        if self.experiment == "nu-convergence" && self.ladder.nus.len() < 2 {
            return Err(ConfigError::at("ladder.nus", "needs at least two scales"));
        }
        if self.experiment == "det-sensitivity" && self.ladder.sensitivity.len() < 2 {
            return Err(ConfigError::at("ladder.sensitivity", "needs at least two scales"));
        }
        if self.experiment == "self-similarity" && e.t_targets.len() < 2 {
            return Err(ConfigError::at("ensemble.t_targets", "self-similarity needs two target times"));
        }
        let t = &self.trajectories;
        if t.count == 0 {
            return Err(ConfigError::at("trajectories.count", "must be at least 1"));
        }
        positive("trajectories.sample_dt", t.sample_dt)?;
        if let Some(te) = t.t_end {
            positive("trajectories.t_end", te)?;
        }
        self.pullback.grid.grid().map_err(|m| ConfigError::at("pullback.grid", m))?;
        let coords = if self.field.name == FieldName::Lorenz4d { 3 } else { d };
        if self.pullback.coordinate >= coords {
            return Err(ConfigError::at("pullback.coordinate", format!("must be below {coords}")));
        }
        match &self.perturbation {
            Some(b) => {
                length("perturbation.center", &b.center, d)?;
                length("perturbation.tangent_direction", &b.tangent_direction, d)?;
                positive("perturbation.width", b.width)?;
            }
            None if self.experiment == "perturbation" => {
                return Err(ConfigError::at("perturbation", "required by the perturbation experiment"));
            }
            None => {}
        }
        let c = &self.checks;
        positive("checks.l1_factor", c.l1_factor)?;
        positive("checks.predict_factor", c.predict_factor)?;
        positive("checks.sensitivity_angle", c.sensitivity_angle)?;
        if let Some([lo, hi]) = c.t_b_range {
            if !(lo < hi) {
                return Err(ConfigError::at("checks.t_b_range", "needs lo < hi"));
            }
        }
        if let Some(f) = c.perturbation_factor {
            positive("checks.perturbation_factor", f)?;
        }
        Ok(())
    }

    /// Sampler for `sampler-independence`'s second ensemble.
    pub fn comparison_sampler(&self) -> SamplerSpec {
        self.compare_sampler.clone().unwrap_or_else(|| SamplerSpec {
            family: SamplerFamily::Gaussian,
            ..self.regularization.sampler.clone()
        })
    }

    /// Hex SHA-256 of the canonical JSON of the config, with the output
    /// location and worker count excluded since neither changes the results.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir.clear();
        canon.ensemble.workers = None;
        let text = serde_json::to_string(&canon).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn check_sampler(path: &str, s: &SamplerSpec, d: usize) -> Result<(), ConfigError> {
    length(&format!("{path}.cap_center"), &s.cap_center, d)?;
    match d {
        2 => crate::regularize::EscapeSampler::<2>::from_spec(s).map(|_| ()),
        _ => crate::regularize::EscapeSampler::<4>::from_spec(s).map(|_| ()),
    }
    .map_err(|e| ConfigError::at(path, e.to_string()))
}
