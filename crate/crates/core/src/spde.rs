//! Euler-Maruyama simulation of the conservative SPDE
//! `d rho = Lap Phi(rho) dt - div(sigma(rho) P_K g) dt - sqrt(eps) sum_k div(sigma(rho) e_k) dB^k
//!          + (eps/2) sum_k div(sigma'(rho) e_k div(sigma(rho) e_k)) dt`
//! with `sigma = Phi^{1/2,eta}`, and Monte Carlo ensembles on top of it.
//!
//! A step that violates the CFL bound or fails is split at its midpoint and the
//! Brownian increment is refined by a bridge sample, so a path is a function of
//! its seed alone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{project_pk, Control, ControlField, SpectralBasis};
use crate::error::{Error, Result};
use crate::grid::{Field, Grid, VectorField};
use crate::nonlinearity::{NonlinearitySpec, RegularizationParams, RegularizedSqrtPhi};
use crate::rng::NoiseStream;
use crate::solver::{
    failure_error, node_times, validate_initial, Model, Recorder, SolverConfig, Stepper, Trajectory, MAX_HALVINGS,
};

/// `eps K^3` above which the run is outside the small-noise regime.
pub const REGIME_WARNING: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Number of spectral noise modes `K`.
    pub modes: usize,
    pub epsilon: f64,
    /// Flux regularization; 0 keeps the solver's flux.
    pub eta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub replica: u64,
}

impl NoiseConfig {
    pub fn validate(&self, grid: Grid) -> Result<()> {
        if self.modes == 0 || self.modes > SpectralBasis::capacity(grid) {
            return Err(Error::Resolution(format!(
                "{} noise modes on a grid resolving {}",
                self.modes,
                SpectralBasis::capacity(grid)
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!("epsilon = {} must be nonnegative", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::InvalidArgument(format!("eta = {} must lie in [0, 1)", self.eta)));
        }
        Ok(())
    }

    /// `eps K^3`.
    pub fn regime(&self) -> f64 {
        self.epsilon * (self.modes as f64).powi(3)
    }
}

/// A simulated path with its noise bookkeeping.
#[derive(Clone, Debug)]
pub struct SpdePath {
    pub trajectory: Trajectory,
    /// Sum of the Brownian increments of each nominal step (0 at the first node).
    pub increment_checksums: Vec<f64>,
    /// L1 norm of the correction term (without `eps/2`) at every node.
    pub correction_norms: Vec<f64>,
    /// Number of bridge refinements taken.
    pub splits: usize,
}

/// `sum_k div(sigma'(rho) e_k div(sigma(rho) e_k))` with face averages of the
/// cell quantities; `flux` returns `(sigma, sigma')`.
pub fn ito_correction_with(rho: &Field, modes: &[VectorField], flux: impl Fn(f64) -> (f64, f64)) -> Result<Field> {
    let g = rho.grid();
    let mut out = vec![0.0; g.cells()];
    let mut work = CorrectionWork::new(g);
    work.eval(rho.values(), modes, &flux, &mut out);
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Singular { xi: rho.values()[i], what: "correction term needs a finite flux derivative" });
    }
    Field::new(g, out)
}

/// The correction term for the first `k` basis modes and the flux `Phi^{1/2,eta}`
/// (the bare flux when `eta = 0`).
pub fn ito_correction(spec: &NonlinearitySpec, rho: &Field, eta: f64, k: usize) -> Result<Field> {
    let g = rho.grid();
    if let Some((i, v)) = rho.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::Domain(format!("negative density {v} at cell {i}")));
    }
    let basis = SpectralBasis::new(g, k)?;
    let modes: Vec<VectorField> = (1..=k).map(|j| basis.basis_mode(j)).collect::<Result<_>>()?;
    let model = flux_model(spec, eta, &SolverConfig::default())?;
    ito_correction_with(rho, &modes, |x| model.flux(x))
}

struct CorrectionWork {
    grid: Grid,
    s: Vec<f64>,
    ds: Vec<f64>,
    div: Vec<f64>,
}

impl CorrectionWork {
    fn new(grid: Grid) -> Self {
        let n = grid.cells();
        Self { grid, s: vec![0.0; n], ds: vec![0.0; n], div: vec![0.0; n] }
    }

    fn eval(&mut self, rho: &[f64], modes: &[VectorField], flux: &impl Fn(f64) -> (f64, f64), out: &mut [f64]) {
        let g = self.grid;
        let inv_h = 1.0 / g.h();
        for ((s, ds), &r) in self.s.iter_mut().zip(self.ds.iter_mut()).zip(rho) {
            (*s, *ds) = flux(r);
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for e in modes {
            self.div.iter_mut().for_each(|v| *v = 0.0);
            for a in 0..g.d() {
                let ea = e.component(a);
                for c in 0..g.cells() {
                    let p = g.plus(c, a);
                    let f = 0.5 * (self.s[c] + self.s[p]) * ea[c] * inv_h;
                    self.div[c] += f;
                    self.div[p] -= f;
                }
            }
            for a in 0..g.d() {
                let ea = e.component(a);
                for c in 0..g.cells() {
                    let p = g.plus(c, a);
                    let f = 0.5 * (self.ds[c] * self.div[c] + self.ds[p] * self.div[p]) * ea[c] * inv_h;
                    out[c] += f;
                    out[p] -= f;
                }
            }
        }
    }
}

fn flux_model(spec: &NonlinearitySpec, eta: f64, config: &SolverConfig) -> Result<Model> {
    let model = Model::new(spec, config)?;
    Ok(if eta > 0.0 {
        let reg = RegularizedSqrtPhi::new(spec, RegularizationParams::new(eta)?);
        model.with_flux(Some(reg))
    } else {
        model
    })
}

/// Shared, read-only ingredients of a family of paths.
struct Setup {
    grid: Grid,
    model: Model,
    modes: Vec<VectorField>,
    /// `sum_k max |e_k|^2`.
    mode_sup: f64,
    control: Option<ControlField>,
    fingerprint: u64,
}

impl Setup {
    fn new(
        spec: &NonlinearitySpec,
        grid: Grid,
        noise: &NoiseConfig,
        control: Option<&ControlField>,
        config: &SolverConfig,
    ) -> Result<Self> {
        config.validate()?;
        noise.validate(grid)?;
        let model = flux_model(spec, noise.eta, config)?;
        let basis = SpectralBasis::shared(grid, noise.modes)?;
        let modes: Vec<VectorField> = (1..=noise.modes).map(|j| basis.basis_mode(j)).collect::<Result<_>>()?;
        let mode_sup = modes.iter().map(|e| e.max_abs().powi(2)).sum();
        let (control, fingerprint) = match control {
            Some(g) => {
                grid.check_same(&g.grid())?;
                let p = project_pk(g, noise.modes)?;
                let f = p.fingerprint();
                (Some(p), f)
            }
            None => (None, ControlField::zero(grid, 1.0).fingerprint()),
        };
        Ok(Self { grid, model, modes, mode_sup, control, fingerprint })
    }
}

struct Sim<'a> {
    setup: &'a Setup,
    eps: f64,
    step: u64,
    stepper: Stepper,
    rec: Recorder,
    stream: NoiseStream,
    work: CorrectionWork,
    rho: Field,
    v: VectorField,
    v_ctrl: VectorField,
    corr: Vec<f64>,
    splits: usize,
}

impl Sim<'_> {
    /// Largest step keeping the explicit correction term stable.
    fn correction_limit(&self, cfl: f64) -> f64 {
        if self.eps == 0.0 {
            return f64::INFINITY;
        }
        let smax = self
            .rho
            .values()
            .iter()
            .map(|&r| self.setup.model.flux(r).1)
            .fold(0.0f64, f64::max);
        let a = self.eps * smax * smax * self.setup.mode_sup * self.setup.grid.d() as f64;
        if a == 0.0 {
            f64::INFINITY
        } else {
            cfl * self.setup.grid.h().powi(2) / a
        }
    }

    fn advance(&mut self, s: f64, dt: f64, inc: &[f64], id: u64, depth: usize, cfl: f64) -> Result<()> {
        if let Some(ctrl) = &self.setup.control {
            if let Some(c) = ctrl.next_change(s) {
                if c > s + 1e-13 * dt && c < s + dt * (1.0 - 1e-13) {
                    return self.split(s, dt, inc, id, depth, (c - s) / dt, None, cfl);
                }
            }
        }
        match &self.setup.control {
            Some(ctrl) => ctrl.velocity_into(s, &self.rho, &mut self.v_ctrl),
            None => self.v_ctrl.scale(0.0),
        }
        self.v.clone_from(&self.v_ctrl);
        if self.eps > 0.0 {
            let w = self.eps.sqrt() / dt;
            for (e, &b) in self.setup.modes.iter().zip(inc) {
                self.v.add_scaled(w * b, e)?;
            }
        }
        let lim = self.stepper.cfl_limit(self.rho.values(), &self.v).min(self.correction_limit(cfl));
        if lim < dt {
            return self.split(s, dt, inc, id, depth, 0.5, None, cfl);
        }
        let extra = if self.eps > 0.0 {
            self.work.eval(self.rho.values(), &self.setup.modes, &|x| self.setup.model.flux(x), &mut self.corr);
            let half = 0.5 * self.eps;
            self.corr.iter_mut().for_each(|c| *c *= half);
            Some(self.corr.as_slice())
        } else {
            None
        };
        match self.stepper.step(self.rho.values(), &self.v, dt, extra) {
            Ok(next) => {
                self.rec.accumulate(&self.setup.model, self.rho.values(), &self.v_ctrl, dt);
                self.rho.values_mut().copy_from_slice(&next);
                Ok(())
            }
            Err(f) => self.split(s, dt, inc, id, depth, 0.5, Some(f), cfl),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn split(
        &mut self,
        s: f64,
        dt: f64,
        inc: &[f64],
        id: u64,
        depth: usize,
        theta: f64,
        failure: Option<crate::solver::StepFailure>,
        cfl: f64,
    ) -> Result<()> {
        if depth == MAX_HALVINGS {
            return Err(match failure {
                Some(f) => failure_error(f, s),
                None => Error::StepCollapse { t: s, dt_min: dt },
            });
        }
        self.splits += 1;
        let k = inc.len();
        let mut z = vec![0.0; k];
        if self.eps > 0.0 {
            self.stream.normals(self.step, 2 * id, &mut z);
        }
        let sd = (theta * (1.0 - theta) * dt).sqrt();
        let left: Vec<f64> = inc.iter().zip(&z).map(|(b, z)| theta * b + sd * z).collect();
        let right: Vec<f64> = inc.iter().zip(&left).map(|(b, l)| b - l).collect();
        self.advance(s, theta * dt, &left, 2 * id, depth + 1, cfl)?;
        self.advance(s + theta * dt, (1.0 - theta) * dt, &right, 2 * id + 1, depth + 1, cfl)
    }

    fn correction_norm(&mut self) -> f64 {
        let mut out = vec![0.0; self.setup.grid.cells()];
        self.work.eval(self.rho.values(), &self.setup.modes, &|x| self.setup.model.flux(x), &mut out);
        out.iter().map(|v| v.abs()).sum::<f64>() * self.setup.grid.cell_volume()
    }
}

fn simulate_with(
    setup: &Setup,
    spec: &NonlinearitySpec,
    rho0: &Field,
    noise: &NoiseConfig,
    t_end: f64,
    config: &SolverConfig,
) -> Result<SpdePath> {
    validate_initial(spec, setup.grid, rho0)?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!("final time {t_end} must be positive")));
    }
    let grid = setup.grid;
    let mut sim = Sim {
        setup,
        eps: noise.epsilon,
        step: 0,
        stepper: Stepper::new(setup.model.clone(), grid, config),
        rec: Recorder::new(grid, config.snapshot_stride),
        stream: NoiseStream::new(noise.seed, noise.replica),
        work: CorrectionWork::new(grid),
        rho: rho0.clone(),
        v: VectorField::zeros(grid),
        v_ctrl: VectorField::zeros(grid),
        corr: vec![0.0; grid.cells()],
        splits: 0,
    };
    let times = node_times(t_end, config.dt);
    let k = noise.modes;
    let mut checksums = vec![0.0];
    let mut norms = vec![sim.correction_norm()];
    sim.rec.record(&setup.model, 0.0, rho0.values(), false);
    let mut inc = vec![0.0; k];
    for (step, w) in times.windows(2).enumerate() {
        let dt = w[1] - w[0];
        sim.step = step as u64;
        if sim.eps > 0.0 {
            sim.stream.normals(step as u64, 1, &mut inc);
            let sd = dt.sqrt();
            inc.iter_mut().for_each(|b| *b *= sd);
        }
        sim.advance(w[0], dt, &inc, 1, 0, config.cfl_factor)?;
        checksums.push(inc.iter().sum());
        norms.push(sim.correction_norm());
        let last = step + 2 == times.len();
        let rho = std::mem::replace(&mut sim.rho, Field::zeros(grid));
        sim.rec.record(&setup.model, w[1], rho.values(), last);
        sim.rho = rho;
    }
    let splits = sim.splits;
    let trajectory = Trajectory::assemble(grid, spec, config, setup.fingerprint, sim.rec);
    Ok(SpdePath { trajectory, increment_checksums: checksums, correction_norms: norms, splits })
}

/// Simulates one path. With `epsilon = 0` and no control the result coincides
/// bit for bit with the deterministic solve.
pub fn simulate_spde(
    spec: &NonlinearitySpec,
    grid: Grid,
    rho0: &Field,
    noise: &NoiseConfig,
    g: Option<&ControlField>,
    t_end: f64,
    config: &SolverConfig,
) -> Result<SpdePath> {
    let setup = Setup::new(spec, grid, noise, g, config)?;
    if noise.regime() > REGIME_WARNING {
        log::warn!("eps K^3 = {} is outside the small-noise regime", noise.regime());
    }
    simulate_with(&setup, spec, rho0, noise, t_end, config)
}

/// One replica of an ensemble.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicaRecord {
    pub epsilon: f64,
    pub replica: u64,
    pub seed: u64,
    pub event_hit: bool,
    /// `||rho(T) - rho_bar(T)||_{L1}` against the noise-free path.
    pub l1_deviation: f64,
    pub rejected: bool,
}

/// A Monte Carlo sweep over noise intensities.
#[derive(Clone, Debug)]
pub struct Ensemble<'a> {
    pub spec: &'a NonlinearitySpec,
    pub grid: Grid,
    pub rho0: &'a Field,
    /// Template; `epsilon` and `replica` are overwritten per path.
    pub noise: NoiseConfig,
    pub control: Option<&'a ControlField>,
    pub t_end: f64,
    pub config: SolverConfig,
    pub epsilons: Vec<f64>,
    pub replicas: usize,
    /// Reuse the increments of replica `r` for every `eps`.
    pub common_random_numbers: bool,
}

fn mix(seed: u64, i: u64) -> u64 {
    let mut z = seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Ensemble<'_> {
    /// The noise-free path every replica is compared with.
    pub fn reference(&self) -> Result<SpdePath> {
        let noise = NoiseConfig { epsilon: 0.0, ..self.noise.clone() };
        simulate_spde(self.spec, self.grid, self.rho0, &noise, self.control, self.t_end, &self.config)
    }

    /// Runs every `(eps, replica)` pair; records are ordered by `eps` then replica.
    pub fn run(&self, event: &(dyn Fn(&Trajectory) -> bool + Sync)) -> Result<Vec<ReplicaRecord>> {
        if self.replicas == 0 || self.epsilons.is_empty() {
            return Err(Error::InvalidArgument("ensemble needs replicas and noise levels".into()));
        }
        let setup = Setup::new(self.spec, self.grid, &self.noise, self.control, &self.config)?;
        let reference = self.reference()?;
        let target = reference.trajectory.final_field();
        let mut config = self.config.clone();
        // only the endpoints are needed
        config.snapshot_stride = usize::MAX;
        let mut out = Vec::with_capacity(self.replicas * self.epsilons.len());
        for (i, &eps) in self.epsilons.iter().enumerate() {
            let seed = if self.common_random_numbers { self.noise.seed } else { mix(self.noise.seed, i as u64 + 1) };
            let noise = NoiseConfig { epsilon: eps, seed, ..self.noise.clone() };
            noise.validate(self.grid)?;
            if noise.regime() > REGIME_WARNING {
                log::warn!("eps K^3 = {} is outside the small-noise regime", noise.regime());
            }
            let records: Vec<Result<ReplicaRecord>> = (0..self.replicas as u64)
                .into_par_iter()
                .map(|r| {
                    let noise = NoiseConfig { replica: r, ..noise.clone() };
                    match simulate_with(&setup, self.spec, self.rho0, &noise, self.t_end, &config) {
                        Ok(p) => Ok(ReplicaRecord {
                            epsilon: eps,
                            replica: r,
                            seed,
                            event_hit: event(&p.trajectory),
                            l1_deviation: p.trajectory.final_field().l1_distance(target)?,
                            rejected: false,
                        }),
                        Err(e) if e.is_numerical() => {
                            log::info!("replica {r} at eps = {eps} (seed {seed}) rejected: {e}");
                            Ok(ReplicaRecord {
                                epsilon: eps,
                                replica: r,
                                seed,
                                event_hit: false,
                                l1_deviation: f64::NAN,
                                rejected: true,
                            })
                        }
                        Err(e) => Err(e),
                    }
                })
                .collect();
            for r in records {
                out.push(r?);
            }
        }
        Ok(out)
    }
}

/// Monte Carlo estimate at one noise level.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbabilityRow {
    pub epsilon: f64,
    pub trials: usize,
    pub hits: usize,
    pub rejected: usize,
    pub p_hat: f64,
    /// Wilson 95% half-width divided by 1.96.
    pub stderr: f64,
    /// Upper end of the Wilson 95% interval.
    pub upper_bound: f64,
    /// `-eps log p_hat`, absent when nothing was observed.
    pub neg_eps_log_p: Option<f64>,
}

const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval `(centre, half-width)` at 95%.
pub fn wilson(hits: usize, trials: usize) -> (f64, f64) {
    let n = trials as f64;
    let p = hits as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    (centre, half)
}

/// Aggregates replica records into one row per noise level, in input order.
pub fn summarize(records: &[ReplicaRecord]) -> Vec<ProbabilityRow> {
    let mut eps: Vec<f64> = Vec::new();
    for r in records {
        if !eps.contains(&r.epsilon) {
            eps.push(r.epsilon);
        }
    }
    eps.into_iter()
        .map(|e| {
            let rows: Vec<_> = records.iter().filter(|r| r.epsilon == e).collect();
            let rejected = rows.iter().filter(|r| r.rejected).count();
            let trials = rows.len() - rejected;
            let hits = rows.iter().filter(|r| !r.rejected && r.event_hit).count();
            let (p_hat, stderr, upper) = if trials == 0 {
                (f64::NAN, f64::NAN, 1.0)
            } else {
                let (c, h) = wilson(hits, trials);
                (hits as f64 / trials as f64, h / Z95, (c + h).min(1.0))
            };
            let neg_eps_log_p = (hits > 0).then(|| {
                let v = -e * p_hat.ln();
                if v == 0.0 {
                    0.0
                } else {
                    v
                }
            });
            ProbabilityRow { epsilon: e, trials, hits, rejected, p_hat, stderr, upper_bound: upper, neg_eps_log_p }
        })
        .collect()
}

/// Runs the ensemble and tabulates the event frequencies.
pub fn estimate_event_probability(
    ensemble: &Ensemble<'_>,
    event: &(dyn Fn(&Trajectory) -> bool + Sync),
) -> Result<(Vec<ReplicaRecord>, Vec<ProbabilityRow>)> {
    let records = ensemble.run(event)?;
    let table = summarize(&records);
    Ok((records, table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::solve_skeleton;
    use std::f64::consts::PI;

    fn setup() -> (NonlinearitySpec, Grid, Field) {
        let spec = NonlinearitySpec::power(1.0).unwrap();
        let grid = Grid::new(1, 32).unwrap();
        let rho0 = Field::from_fn(grid, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).cos());
        (spec, grid, rho0)
    }

    #[test]
    fn zero_noise_matches_the_deterministic_solver_bitwise() {
        let (spec, grid, rho0) = setup();
        let cfg = SolverConfig::new(1e-3);
        let noise = NoiseConfig { modes: 4, epsilon: 0.0, eta: 0.1, seed: 9, replica: 2 };
        let p = simulate_spde(&spec, grid, &rho0, &noise, None, 0.02, &cfg).unwrap();
        let d = solve_skeleton(&spec, grid, &rho0, &ControlField::zero(grid, 0.02), 0.02, &cfg).unwrap();
        assert_eq!(p.trajectory.nodes(), d.nodes());
        for (a, b) in p.trajectory.snapshots().iter().zip(d.snapshots()) {
            assert_eq!(a.field.values(), b.field.values());
        }
    }

    #[test]
    fn noisy_paths_conserve_mass_and_replay() {
        let (spec, grid, rho0) = setup();
        let cfg = SolverConfig::new(1e-4);
        let noise = NoiseConfig { modes: 4, epsilon: 0.05, eta: 0.1, seed: 1, replica: 0 };
        let a = simulate_spde(&spec, grid, &rho0, &noise, None, 0.01, &cfg).unwrap();
        let b = simulate_spde(&spec, grid, &rho0, &noise, None, 0.01, &cfg).unwrap();
        assert!(a.trajectory.mass_drift_per_step() < 1e-12);
        assert_eq!(a.trajectory.final_field(), b.trajectory.final_field());
        assert_eq!(a.increment_checksums, b.increment_checksums);
        let c = simulate_spde(&spec, grid, &rho0, &NoiseConfig { replica: 1, ..noise }, None, 0.01, &cfg).unwrap();
        assert_ne!(a.trajectory.final_field(), c.trajectory.final_field());
    }

    #[test]
    fn correction_vanishes_for_constant_data_and_mode() {
        let (spec, grid, _) = setup();
        let c = ito_correction(&spec, &Field::constant(grid, 2.0), 0.1, 1).unwrap();
        assert!(c.values().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn correction_is_conservative() {
        let (spec, _, rho0) = setup();
        let c = ito_correction(&spec, &rho0, 0.1, 9).unwrap();
        assert!(c.mass().abs() < 1e-11 * c.l1());
    }

    #[test]
    fn wilson_interval() {
        let (c, h) = wilson(0, 100);
        assert!(c > 0.0 && (c + h) > 0.03 && (c + h) < 0.05);
        let (c, h) = wilson(50, 100);
        assert!((c - 0.5).abs() < 1e-12 && (h - 0.0962).abs() < 1e-3);
    }

    #[test]
    fn certain_and_impossible_events() {
        let (spec, grid, rho0) = setup();
        let ens = Ensemble {
            spec: &spec,
            grid,
            rho0: &rho0,
            noise: NoiseConfig { modes: 4, epsilon: 0.0, eta: 0.1, seed: 3, replica: 0 },
            control: None,
            t_end: 0.005,
            config: SolverConfig::new(5e-4),
            epsilons: vec![0.1, 0.05],
            replicas: 16,
            common_random_numbers: true,
        };
        let (_, table) = estimate_event_probability(&ens, &|_| true).unwrap();
        assert!(table.iter().all(|r| r.neg_eps_log_p == Some(0.0) && r.rejected == 0));
        let m0 = rho0.mass();
        let (_, table) =
            estimate_event_probability(&ens, &|t: &Trajectory| (t.final_field().mass() - m0).abs() > 1e-6).unwrap();
        assert!(table.iter().all(|r| r.p_hat == 0.0 && r.neg_eps_log_p.is_none()));
    }
}
