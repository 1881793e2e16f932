//! Scenario schema. Every knob has a default; unknown keys are rejected.

use std::f64::consts::TAU;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use skeld::basis::{uniform_times, ControlField, SpectralBasis};
use skeld::grid::{Field, Grid, GridSpec};
use skeld::io::{read_field, read_spectral_control};
use skeld::nonlinearity::NonlinearitySpec;
use skeld::rate::OptimizerConfig;
use skeld::solver::SolverConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SolveSkeleton,
    SimulateSpde,
    EvaluateRate,
    MinimizeAction,
    GammaSweep,
    CheckAssumptions,
    LdpMc,
    CriticalityScan,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::SolveSkeleton => "solve-skeleton",
            Self::SimulateSpde => "simulate-spde",
            Self::EvaluateRate => "evaluate-rate",
            Self::MinimizeAction => "minimize-action",
            Self::GammaSweep => "gamma-sweep",
            Self::CheckAssumptions => "check-assumptions",
            Self::LdpMc => "ldp-mc",
            Self::CriticalityScan => "criticality-scan",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: NonlinearitySpec,
    #[serde(default = "default_grid")]
    pub grid: GridSpec,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default)]
    pub initial: InitialSpec,
    #[serde(default)]
    pub control: ControlSpec,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub contraction: Option<InitialSpec>,
    #[serde(default)]
    pub rate: RateSection,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub action: ActionSection,
    #[serde(default)]
    pub gamma: GammaSection,
    #[serde(default)]
    pub assumptions: AssumptionSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub criticality: CriticalitySection,
}

fn default_nonlinearity() -> NonlinearitySpec {
    NonlinearitySpec::power(1.0).expect("valid exponent")
}

fn default_grid() -> GridSpec {
    GridSpec { d: 1, n: 64 }
}

fn default_t_end() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSpec {
    Constant {
        #[serde(default = "one")]
        value: f64,
    },
    /// `mean + amplitude prod_i cos(2 pi frequency x_i)`.
    CosineBump {
        #[serde(default = "one")]
        mean: f64,
        #[serde(default = "half")]
        amplitude: f64,
        #[serde(default = "one_usize")]
        frequency: usize,
    },
    /// `base` plus two periodic Gaussians.
    TwoBump {
        #[serde(default = "tenth")]
        base: f64,
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "default_width")]
        width: f64,
        #[serde(default = "default_centers")]
        centers: [[f64; 2]; 2],
    },
    File { path: PathBuf },
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn tenth() -> f64 {
    0.1
}
fn one_usize() -> usize {
    1
}
fn default_width() -> f64 {
    0.08
}
fn default_centers() -> [[f64; 2]; 2] {
    [[0.25, 0.5], [0.75, 0.5]]
}

impl Default for InitialSpec {
    fn default() -> Self {
        InitialSpec::CosineBump { mean: 1.0, amplitude: 0.5, frequency: 1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlSpec {
    #[default]
    Zero,
    Constant { velocity: [f64; 2] },
    /// One coefficient list per slice; slices are uniform in time unless `times`
    /// (left endpoints, starting at 0) is given.
    Spectral {
        coefficients: Vec<Vec<f64>>,
        #[serde(default)]
        times: Option<Vec<f64>>,
    },
    /// Coefficient file with rows `t,k,coefficient`.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub modes: usize,
    pub epsilon: f64,
    pub eta: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { modes: 4, epsilon: 0.05, eta: 0.1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Write a field file every this many output nodes (0 disables).
    pub snapshot_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateSection {
    pub weight_floor: f64,
}

impl Default for RateSection {
    fn default() -> Self {
        Self { weight_floor: skeld::rate::DEFAULT_WEIGHT_FLOOR }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    /// Endpoint of the uncontrolled flow.
    Uncontrolled,
    /// Endpoint of the flow driven by the configured control.
    Driven,
    /// Endpoint read from a field file.
    File { path: PathBuf },
    /// `||rho(T) - rho_bar(T)||_1 >= delta` against the uncontrolled flow.
    L1Deviation { delta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionSection {
    pub target: TargetSpec,
    /// Spectral modes; absent means grid controls.
    pub modes: Option<usize>,
    pub eta: f64,
}

impl Default for ActionSection {
    fn default() -> Self {
        Self { target: TargetSpec::Driven, modes: None, eta: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GammaSection {
    pub k_list: Vec<usize>,
}

impl Default for GammaSection {
    fn default() -> Self {
        Self { k_list: vec![2, 4, 8, 16] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssumptionSection {
    pub m_level: f64,
    pub delta_grid: Vec<f64>,
    pub samples: usize,
}

impl Default for AssumptionSection {
    fn default() -> Self {
        Self { m_level: 10.0, delta_grid: vec![0.5, 0.25, 0.1, 0.05, 0.025, 0.01], samples: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub epsilons: Vec<f64>,
    pub replicas: usize,
    pub common_random_numbers: bool,
    /// Event threshold on `||rho(T) - rho_bar(T)||_1`.
    pub delta: f64,
    /// Also minimize the action for the event and report it next to the table.
    pub compare_action: bool,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { epsilons: vec![0.1, 0.05, 0.025], replicas: 64, common_random_numbers: true, delta: 0.05, compare_action: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CriticalitySection {
    pub m_values: Vec<f64>,
    pub dimensions: Vec<usize>,
    /// Time exponent.
    pub p: f64,
    /// Space exponent.
    pub q: f64,
    pub r_values: Vec<f64>,
    pub etas: Vec<f64>,
}

impl Default for CriticalitySection {
    fn default() -> Self {
        Self {
            m_values: vec![1.0, 2.0],
            dimensions: vec![1, 2],
            p: 2.0,
            q: 2.0,
            r_values: vec![1.0, 2.0],
            etas: vec![0.5, 0.25, 0.125],
        }
    }
}

/// Parses a scenario; errors name the offending key.
pub fn parse_scenario(text: &str) -> Result<Scenario, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let s: Scenario = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config { key: if path == "." { "<root>".into() } else { path }, message: e.inner().to_string() }
    })?;
    Ok(s)
}

fn config_err(key: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config { key: key.into(), message: e.to_string() }
}

/// Resolved inputs shared by the experiments.
pub struct Prepared {
    pub spec: NonlinearitySpec,
    pub grid: Grid,
    pub rho0: Field,
    pub control: ControlField,
    pub solver: SolverConfig,
}

impl Scenario {
    fn resolve(&self, base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    pub fn build_initial(&self, spec: &InitialSpec, grid: Grid, base: &Path, key: &str) -> Result<Field, CliError> {
        let f = match spec {
            InitialSpec::Constant { value } => Field::constant(grid, *value),
            InitialSpec::CosineBump { mean, amplitude, frequency } => {
                let d = grid.d();
                let k = *frequency as f64;
                Field::from_fn(grid, |x| mean + amplitude * (0..d).map(|i| (TAU * k * x[i]).cos()).product::<f64>())
            }
            InitialSpec::TwoBump { base: b, amplitude, width, centers } => {
                if !(*width > 0.0) {
                    return Err(config_err(&format!("{key}.width"), "must be positive"));
                }
                let d = grid.d();
                Field::from_fn(grid, |x| {
                    let bump = |c: &[f64; 2]| {
                        let r2: f64 = (0..d)
                            .map(|i| {
                                let dx = (x[i] - c[i]).rem_euclid(1.0);
                                dx.min(1.0 - dx).powi(2)
                            })
                            .sum();
                        (-r2 / (2.0 * width * width)).exp()
                    };
                    b + amplitude * (bump(&centers[0]) + bump(&centers[1]))
                })
            }
            InitialSpec::File { path } => {
                let path = self.resolve(base, path);
                let file = File::open(&path).map_err(|e| config_err(&format!("{key}.path"), format!("{}: {e}", path.display())))?;
                let (f, _) = read_field(file).map_err(|e| config_err(&format!("{key}.path"), e))?;
                if f.grid() != grid {
                    return Err(config_err(&format!("{key}.path"), "field file does not match the grid"));
                }
                f
            }
        };
        if let Some(v) = f.values().iter().find(|v| !v.is_finite()) {
            return Err(config_err(key, format!("profile takes the non-finite value {v}")));
        }
        if f.min() < 0.0 {
            return Err(config_err(key, format!("profile takes negative values (minimum {:e})", f.min())));
        }
        if f.mass() <= 0.0 {
            return Err(config_err(key, "profile has zero mass"));
        }
        Ok(f)
    }

    pub fn build_control(&self, grid: Grid, base: &Path) -> Result<ControlField, CliError> {
        let t = self.t_end;
        match &self.control {
            ControlSpec::Zero => Ok(ControlField::zero(grid, t)),
            ControlSpec::Constant { velocity } => Ok(ControlField::constant(grid, t, *velocity)),
            ControlSpec::Spectral { coefficients, times } => {
                if coefficients.is_empty() || coefficients[0].is_empty() {
                    return Err(config_err("control.coefficients", "at least one slice with one mode is required"));
                }
                let k = coefficients[0].len();
                if coefficients.iter().any(|c| c.len() != k) {
                    return Err(config_err("control.coefficients", "every slice needs the same number of modes"));
                }
                let basis = SpectralBasis::shared(grid, k).map_err(|e| config_err("control.coefficients", e))?;
                let times = match times {
                    None => uniform_times(t, coefficients.len()),
                    Some(ts) => {
                        if ts.len() != coefficients.len() || ts.first() != Some(&0.0) {
                            return Err(config_err("control.times", "one left endpoint per slice, starting at 0"));
                        }
                        let mut ts = ts.clone();
                        ts.push(t);
                        ts
                    }
                };
                ControlField::spectral(basis, times, coefficients.clone()).map_err(|e| config_err("control", e))
            }
            ControlSpec::File { path } => {
                let path = self.resolve(base, path);
                let file = File::open(&path).map_err(|e| config_err("control.path", format!("{}: {e}", path.display())))?;
                read_spectral_control(file, grid, t).map_err(|e| config_err("control.path", e))
            }
        }
    }

    /// Validates the shared inputs; `base` resolves relative file paths.
    pub fn prepare(&self, base: &Path) -> Result<Prepared, CliError> {
        let grid = Grid::try_from(self.grid).map_err(|e| config_err("grid", e))?;
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(config_err("t_end", "must be positive and finite"));
        }
        self.solver.validate().map_err(|e| config_err("solver", e))?;
        let rho0 = self.build_initial(&self.initial, grid, base, "initial")?;
        let control = self.build_control(grid, base)?;
        self.optimizer.validate().map_err(|e| config_err("optimizer", e))?;
        if !(self.rate.weight_floor >= 0.0) {
            return Err(config_err("rate.weight_floor", "must be nonnegative"));
        }
        Ok(Prepared { spec: self.nonlinearity.clone(), grid, rho0, control, solver: self.solver.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_uses_defaults() {
        let s = parse_scenario(r#"{"experiment": "solve-skeleton"}"#).unwrap();
        assert_eq!(s.grid, GridSpec { d: 1, n: 64 });
        assert_eq!(s.initial, InitialSpec::default());
        assert_eq!(s.gamma.k_list, vec![2, 4, 8, 16]);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let e = parse_scenario(r#"{"experiment": "gamma-sweep", "solver": {"dt": 1e-3, "bogus": 1}}"#).unwrap_err();
        match e {
            CliError::Config { key, message } => {
                assert_eq!(key, "solver.bogus");
                assert!(message.contains("bogus"));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn negative_profiles_are_rejected() {
        let s = parse_scenario(
            r#"{"experiment": "solve-skeleton", "initial": {"profile": "cosine-bump", "mean": 0.2, "amplitude": 1.0}}"#,
        )
        .unwrap();
        match s.prepare(Path::new(".")) {
            Err(CliError::Config { key, .. }) => assert_eq!(key, "initial"),
            _ => panic!("expected a config error"),
        }
    }

    #[test]
    fn spectral_controls_need_resolved_modes() {
        let s = parse_scenario(
            r#"{"experiment": "solve-skeleton", "grid": {"d": 1, "n": 8}, "control": {"kind": "spectral", "coefficients": [[1, 2, 3, 4, 5, 6]]}}"#,
        )
        .unwrap();
        assert!(matches!(s.prepare(Path::new(".")), Err(CliError::Config { .. })));
    }
}
