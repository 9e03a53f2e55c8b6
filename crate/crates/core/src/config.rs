//! Run configuration: JSON schema, defaults, and validation.
//!
//! Unknown keys are rejected and every error carries a JSON path such as
//! `$.noise.alpha`.

use std::f64::consts::PI;
use std::path::PathBuf;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::TimeGrid;
use crate::field::{ComplexField, GridSpec, SobolevIndex};
use crate::holder::MIN_POINTS;
use crate::ldp::{EventKind, EventSpec, OptimizerBudget};
use crate::noise::{alpha_window, check_alpha_window, decay_threshold, DEFAULT_SUBSTEPS};
use crate::nonlinearity::NonlinearitySpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Fbm,
    Convolution,
    Solve,
    Skeleton,
    Ldp,
    Holder,
    Support,
    OracleSuite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FbmMethod {
    /// Cholesky factor of the exact covariance.
    #[default]
    Exact,
    /// Circulant embedding (falls back to Cholesky when not PSD).
    Circulant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvolutionMethod {
    /// Cell integrals of the kernel transfer function.
    #[default]
    Cell,
    /// Recursion on circulant fBm increments; suited to long paths.
    Increment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Defaults to the midpoint of the admissible window for `H`.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_r")]
    pub r: f64,
    /// Keep only this many lowest-frequency modes.
    #[serde(default)]
    pub modes: Option<usize>,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    #[serde(default)]
    pub method: ConvolutionMethod,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            r: default_r(),
            modes: None,
            substeps: default_substeps(),
            method: ConvolutionMethod::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_grid_n")]
    pub n: usize,
    /// Half-width of the periodic box `[-L, L)^d`.
    #[serde(default = "default_half_width")]
    pub l: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            d: default_d(),
            n: default_grid_n(),
            l: default_half_width(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCondition {
    Zero,
    /// `a exp(-|x|^2 / w^2)`.
    Gaussian { amplitude: f64, width: f64 },
    /// `a sech(|x|)`.
    Sech { amplitude: f64 },
    /// `a e^{i k x_1}`.
    PlaneWave { amplitude: f64, k: i64 },
    /// A field CSV as written by the runner.
    Csv { path: PathBuf },
}

impl Default for InitialCondition {
    fn default() -> Self {
        InitialCondition::Gaussian {
            amplitude: 1.0,
            width: 1.0,
        }
    }
}

impl InitialCondition {
    pub fn build(&self, grid: GridSpec) -> Result<ComplexField> {
        let r2 = |x: [f64; 2]| x[..grid.d].iter().map(|v| v * v).sum::<f64>();
        Ok(match self {
            InitialCondition::Zero => ComplexField::zeros(grid),
            InitialCondition::Gaussian { amplitude, width } => {
                ComplexField::from_fn(grid, |x| Complex64::new(amplitude * (-r2(x) / (width * width)).exp(), 0.0))
            }
            InitialCondition::Sech { amplitude } => {
                ComplexField::from_fn(grid, |x| Complex64::new(amplitude / r2(x).sqrt().cosh(), 0.0))
            }
            InitialCondition::PlaneWave { amplitude, k } => {
                let slots = [grid.slot(*k), 0];
                ComplexField::plane_wave(grid, grid.flatten(slots), Complex64::new(*amplitude, 0.0))
            }
            InitialCondition::Csv { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                ComplexField::from_csv(grid, &text)?
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    /// Defaults to `1e3 |u_0|_{H^1}`.
    #[serde(default)]
    pub blowup_threshold: Option<f64>,
    #[serde(default = "default_substep_tolerance")]
    pub substep_tolerance: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Write every k-th field; none writes diagnostics only.
    #[serde(default)]
    pub snapshot_every: Option<usize>,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            blowup_threshold: None,
            substep_tolerance: default_substep_tolerance(),
            epsilon: default_epsilon(),
            snapshot_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlSource {
    #[default]
    Zero,
    /// The `index`-th discrete white-noise control of the run seed.
    Random { index: usize },
    /// A control JSON file.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdpConfig {
    #[serde(default = "default_event")]
    pub event: EventSpec,
    #[serde(default = "default_ladder")]
    pub eps_ladder: Vec<f64>,
    /// Hat functions per mode in the optimizer basis.
    #[serde(default = "default_time_functions")]
    pub time_functions: usize,
    /// Noise modes in the optimizer basis; defaults to as many as fit in 64 dimensions.
    #[serde(default)]
    pub basis_modes: Option<usize>,
    #[serde(default)]
    pub budget: OptimizerBudget,
}

impl Default for LdpConfig {
    fn default() -> Self {
        Self {
            event: default_event(),
            eps_ladder: default_ladder(),
            time_functions: default_time_functions(),
            basis_modes: None,
            budget: OptimizerBudget::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HolderTarget {
    #[default]
    Fbm,
    Convolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HolderConfig {
    #[serde(default)]
    pub target: HolderTarget,
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Norm for convolution paths.
    #[serde(default = "default_holder_norm")]
    pub norm: SobolevIndex,
}

impl Default for HolderConfig {
    fn default() -> Self {
        Self {
            target: HolderTarget::default(),
            paths: default_paths(),
            norm: default_holder_norm(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportConfig {
    #[serde(default = "default_support_samples")]
    pub samples: usize,
    #[serde(default = "default_family_sizes")]
    pub family_sizes: Vec<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for SupportConfig {
    fn default() -> Self {
        Self {
            samples: default_support_samples(),
            family_sizes: default_family_sizes(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Smaller Monte Carlo sizes; tolerances are unchanged.
    #[serde(default)]
    pub quick: bool,
}

/// A fully resolved run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub kind: Option<ExperimentKind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "H", alias = "hurst", default = "default_hurst")]
    pub hurst: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Time steps.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub fbm_method: FbmMethod,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub initial: InitialCondition,
    #[serde(default = "NonlinearitySpec::linear")]
    pub nonlinearity: NonlinearitySpec,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub control: ControlSource,
    #[serde(default)]
    pub ldp: LdpConfig,
    #[serde(default)]
    pub holder: HolderConfig,
    #[serde(default)]
    pub support: SupportConfig,
    #[serde(default)]
    pub oracles: OracleConfig,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_hurst() -> f64 {
    0.5
}
fn default_horizon() -> f64 {
    1.0
}
fn default_n() -> usize {
    256
}
fn default_replicates() -> usize {
    1000
}
fn default_r() -> f64 {
    8.0
}
fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS
}
fn default_d() -> usize {
    1
}
fn default_grid_n() -> usize {
    64
}
fn default_half_width() -> f64 {
    PI
}
fn default_substep_tolerance() -> f64 {
    crate::solver::DEFAULT_SUBSTEP_TOLERANCE
}
fn default_epsilon() -> f64 {
    1.0
}
fn default_event() -> EventSpec {
    EventSpec {
        kind: EventKind::TerminalBallExit,
        threshold: 0.7,
        norm: SobolevIndex::L2,
    }
}
fn default_ladder() -> Vec<f64> {
    vec![0.25, 0.16, 0.09, 0.04]
}
fn default_time_functions() -> usize {
    4
}
fn default_paths() -> usize {
    20
}
fn default_holder_norm() -> SobolevIndex {
    SobolevIndex::H1
}
fn default_support_samples() -> usize {
    50
}
fn default_family_sizes() -> Vec<usize> {
    vec![8, 16, 32, 64]
}

/// Parse, fill defaults, and validate.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "$".to_string() } else { format!("$.{path}") };
        Error::validation(path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Defaults only, for the given kind.
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut cfg = parse_config("{}").expect("defaults are valid");
        cfg.kind = Some(kind);
        cfg
    }

    pub fn alpha(&self) -> f64 {
        self.noise.alpha.unwrap_or_else(|| {
            let (lo, hi) = alpha_window(self.hurst);
            0.5 * (lo + hi)
        })
    }

    pub fn timegrid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.n).map_err(|e| Error::validation("$.n", e.to_string()))
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid.d, self.grid.n, self.grid.l).map_err(|e| Error::validation("$.grid", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hurst > 0.0 && self.hurst < 1.0) {
            return Err(Error::validation("$.H", format!("H must lie in (0,1), got {}", self.hurst)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::validation("$.horizon", "horizon must be positive"));
        }
        if self.n == 0 {
            return Err(Error::validation("$.n", "need at least one time step"));
        }
        if self.replicates == 0 {
            return Err(Error::validation("$.replicates", "need at least one replicate"));
        }
        if self.threads == Some(0) {
            return Err(Error::validation("$.threads", "thread count must be positive"));
        }
        self.grid()?;
        check_alpha_window(self.hurst, self.alpha()).map_err(|e| Error::validation("$.noise.alpha", inner(e)))?;
        let bound = decay_threshold(self.hurst, self.alpha(), self.grid.d);
        if !(self.noise.r > bound) {
            return Err(Error::validation(
                "$.noise.r",
                format!("r={} too small: need r > 1 + 2(H + alpha) + d/2 = {bound}", self.noise.r),
            ));
        }
        if self.noise.modes == Some(0) {
            return Err(Error::validation("$.noise.modes", "need at least one mode"));
        }
        if self.noise.substeps == 0 {
            return Err(Error::validation("$.noise.substeps", "need at least one substep"));
        }
        self.nonlinearity
            .validate()
            .map_err(|e| Error::validation("$.nonlinearity", inner(e)))?;
        if !(self.solver.substep_tolerance > 0.0) {
            return Err(Error::validation("$.solver.substep_tolerance", "must be positive"));
        }
        if !(self.solver.epsilon >= 0.0 && self.solver.epsilon.is_finite()) {
            return Err(Error::validation("$.solver.epsilon", "must be nonnegative"));
        }
        if self.solver.blowup_threshold.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::validation("$.solver.blowup_threshold", "must be positive"));
        }
        if self.solver.snapshot_every == Some(0) {
            return Err(Error::validation("$.solver.snapshot_every", "must be positive"));
        }
        match self.kind {
            Some(ExperimentKind::Ldp) => self.validate_ldp()?,
            Some(ExperimentKind::Holder) => {
                if self.n + 1 < MIN_POINTS {
                    return Err(Error::validation(
                        "$.n",
                        format!("Hölder estimates need n + 1 >= {MIN_POINTS} time points, got n = {}", self.n),
                    ));
                }
                if self.holder.paths == 0 {
                    return Err(Error::validation("$.holder.paths", "need at least one path"));
                }
            }
            Some(ExperimentKind::Support) => {
                let s = &self.support.family_sizes;
                if s.is_empty() || s[0] == 0 || s.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::validation(
                        "$.support.family_sizes",
                        "family sizes must be positive and strictly increasing",
                    ));
                }
                if self.support.samples == 0 {
                    return Err(Error::validation("$.support.samples", "need at least one sample"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn validate_ldp(&self) -> Result<()> {
        if self.replicates < 100 {
            return Err(Error::validation(
                "$.replicates",
                format!("need at least 100 replicates per ladder rung, got {}", self.replicates),
            ));
        }
        if self.ldp.eps_ladder.is_empty() || self.ldp.eps_ladder.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::validation("$.ldp.eps_ladder", "ladder must be nonempty and positive"));
        }
        if self.ldp.time_functions < 2 {
            return Err(Error::validation("$.ldp.time_functions", "need at least two hat functions"));
        }
        if self.ldp.event.kind != EventKind::BlowUpBeforeT && !(self.ldp.event.threshold >= 0.0) {
            return Err(Error::validation("$.ldp.event.threshold", "threshold must be nonnegative"));
        }
        Ok(())
    }
}

fn inner(e: Error) -> String {
    match e {
        Error::Domain(m) => m,
        other => other.to_string(),
    }
}
