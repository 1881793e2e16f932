//! Rate functional: control energies, minimal-control recovery from a path,
//! adjoint-based action minimization and the recovery-sequence sweep.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{project_pk, Control, ControlField, SpectralBasis};
use crate::error::{Error, Result};
use crate::grid::{laplacian_into, Field, Grid, VectorField};
use crate::lbfgs::{self, LbfgsConfig};
use crate::linalg::pcg;
use crate::nonlinearity::{NonlinearitySpec, RegularizationParams, RegularizedSqrtPhi};
use crate::solver::{node_times, solve_skeleton, validate_initial, Model, SolverConfig, Stepper, Trajectory};

/// Default relative floor added to the Poisson weights.
pub const DEFAULT_WEIGHT_FLOOR: f64 = 1e-10;
/// Feasibility: `constraint_residual <= FEASIBILITY_TOL * mass * T`.
pub const FEASIBILITY_TOL: f64 = 1e-6;
const CG_TOL: f64 = 1e-8;
const MAX_UPWIND_SWEEPS: usize = 50;
const ABS_SMOOTHING: f64 = 1e-8;

/// `1/2 int_0^T ||g||^2`.
pub fn control_energy(g: &ControlField) -> f64 {
    g.energy()
}

#[derive(Clone, Debug)]
pub struct RateEvaluation {
    /// `J = 1/2 ||control||^2`.
    pub value: f64,
    pub control: ControlField,
    /// Time-integrated L1 residual of the controlled equation.
    pub constraint_residual: f64,
    pub feasibility_tolerance: f64,
    pub feasible: bool,
    pub iterations: usize,
    /// Penalty weight of the reported iterate (minimization only).
    pub mu: Option<f64>,
    /// L1 distance to the target event (minimization only).
    pub target_gap: Option<f64>,
    pub line_search_failed: bool,
    /// Objective after every accepted iterate of the reported run.
    pub objective_history: Vec<f64>,
}

impl RateEvaluation {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "J": self.value,
            "residual": self.constraint_residual,
            "iterations": self.iterations,
            "feasible": self.feasible,
            "mu": self.mu,
        })
    }
}

// ---------------------------------------------------------------------------
// minimal control of a given path

struct SliceControl {
    field: VectorField,
    residual: f64,
    iterations: usize,
}

/// Squared mobility `sigma(rho)^2` per cell.
fn mobility_sq(model: &Model, rho: &[f64]) -> Vec<f64> {
    rho.iter().map(|&r| model.flux(r).0.powi(2)).collect()
}

/// Upwind face weights for the potential `u`: the flux `w grad u` leaves the
/// cell it points away from, so that cell's mobility is used. Flat faces take
/// the larger neighbour. Returns the number of faces whose choice changed.
fn upwind_weights(grid: Grid, s2: &[f64], u: &[f64], floor: f64, w: &mut [Vec<f64>]) -> usize {
    let mut changed = 0;
    for (a, wa) in w.iter_mut().enumerate() {
        for c in 0..grid.cells() {
            let p = grid.plus(c, a);
            let du = u[p] - u[c];
            let v = floor
                + if du > 0.0 {
                    s2[c]
                } else if du < 0.0 {
                    s2[p]
                } else {
                    s2[c].max(s2[p])
                };
            if v != wa[c] {
                changed += 1;
                wa[c] = v;
            }
        }
    }
    changed
}

/// `out = -div(w grad u)` on the staggered grid.
fn weighted_laplacian(grid: Grid, w: &[Vec<f64>], u: &[f64], out: &mut [f64]) {
    let ih2 = 1.0 / (grid.h() * grid.h());
    out.fill(0.0);
    for (a, wa) in w.iter().enumerate() {
        for c in 0..grid.cells() {
            let p = grid.plus(c, a);
            let f = wa[c] * (u[p] - u[c]) * ih2;
            out[c] -= f;
            out[p] += f;
        }
    }
}

fn recover_slice(model: &Model, grid: Grid, pre: &[f64], post: &[f64], dt: f64, floor: f64) -> Result<SliceControl> {
    let n = grid.cells();
    let eta2 = model.viscosity;
    let phi: Vec<f64> = post.iter().map(|&r| model.diffusion(r).0 + eta2 * r).collect();
    let mut lap = vec![0.0; n];
    laplacian_into(grid, &phi, &mut lap);
    let r: Vec<f64> = (0..n).map(|i| (post[i] - pre[i]) / dt - lap[i]).collect();
    let mean = r.iter().sum::<f64>() / n as f64;
    let r0: Vec<f64> = r.iter().map(|v| v - mean).collect();
    let cell = grid.cell_volume();
    let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>() * cell;

    let s2 = mobility_sq(model, pre);
    let smax = s2.iter().fold(0.0f64, |a, &b| a.max(b));
    if smax == 0.0 {
        return Ok(SliceControl { field: VectorField::zeros(grid), residual: l1(&r), iterations: 0 });
    }
    let floor = floor * smax;
    let ih2 = 1.0 / (grid.h() * grid.h());
    let mut w = vec![vec![f64::NAN; n]; grid.d()];
    let mut hpot = vec![0.0; n];
    let mut iterations = 0;
    // active-set iteration on the upwind choice, starting from flat faces
    for _ in 0..MAX_UPWIND_SWEEPS {
        if upwind_weights(grid, &s2, &hpot, floor, &mut w) == 0 {
            break;
        }
        let mut diag = vec![0.0; n];
        for (a, wa) in w.iter().enumerate() {
            for c in 0..n {
                diag[c] += wa[c] * ih2;
                diag[grid.plus(c, a)] += wa[c] * ih2;
            }
        }
        let inv: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();
        iterations +=
            pcg(|x, out| weighted_laplacian(grid, &w, x, out), &inv, &r0, &mut hpot, CG_TOL, 20 * n + 100)?;
    }

    let mut field = VectorField::zeros(grid);
    for (a, wa) in w.iter().enumerate() {
        let ga = field.component_mut(a);
        for c in 0..n {
            ga[c] = wa[c].sqrt() * (hpot[grid.plus(c, a)] - hpot[c]) / grid.h();
        }
    }
    // r + div(sqrt(w) G) = r - (-div(w grad H))
    let mut back = vec![0.0; n];
    weighted_laplacian(grid, &w, &hpot, &mut back);
    let res: Vec<f64> = r.iter().zip(&back).map(|(a, b)| a - b).collect();
    Ok(SliceControl { field, residual: l1(&res), iterations })
}

/// Minimal-energy control reproducing a stride-1 trajectory.
///
/// Each slice solves `-div(w grad H) = r` with `r = d_t rho - Lap Phi(rho)`
/// (mean removed) and face weights `w = sigma(rho_up)^2` taken at the left
/// node, upwinded along `grad H` as the transport step does, then sets
/// `G = sqrt(w) grad H`. The upwind choice is iterated to a fixed point.
pub fn recover_minimal_control(traj: &Trajectory, weight_floor: f64) -> Result<RateEvaluation> {
    if !(weight_floor >= 0.0 && weight_floor.is_finite()) {
        return Err(Error::InvalidArgument(format!("weight_floor = {weight_floor}")));
    }
    let grid = traj.grid();
    let times = traj.times();
    let fields: Vec<&Field> = (0..times.len())
        .map(|j| {
            traj.field_at_node(j).ok_or_else(|| {
                Error::InvalidArgument("minimal-control recovery needs snapshot_stride = 1".into())
            })
        })
        .collect::<Result<_>>()?;
    let model = Model::new(traj.spec(), traj.config())?;
    let slices: Vec<SliceControl> = (0..times.len() - 1)
        .into_par_iter()
        .map(|j| {
            let dt = times[j + 1] - times[j];
            recover_slice(&model, grid, fields[j].values(), fields[j + 1].values(), dt, weight_floor).map_err(|e| match e {
                Error::CgStagnation { residual, .. } => Error::CgStagnation { slice: Some(j), residual },
                e => e,
            })
        })
        .collect::<Result<_>>()?;
    let mut residual = 0.0;
    let mut iterations = 0;
    for (j, s) in slices.iter().enumerate() {
        residual += (times[j + 1] - times[j]) * s.residual;
        iterations += s.iterations;
    }
    let control = ControlField::from_slices(times.clone(), slices.into_iter().map(|s| s.field).collect())?;
    let tol = FEASIBILITY_TOL * traj.initial().mass().max(f64::MIN_POSITIVE) * traj.t_end();
    Ok(RateEvaluation {
        value: control.energy(),
        control,
        constraint_residual: residual,
        feasibility_tolerance: tol,
        feasible: residual <= tol,
        iterations,
        mu: None,
        target_gap: None,
        line_search_failed: false,
        objective_history: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// action minimization

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Penalty weights, swept in order with warm starts.
    pub mu: Vec<f64>,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub memory: usize,
    pub armijo: f64,
    pub backtrack: f64,
    pub max_line_search: usize,
    /// Largest accepted L1 target gap relative to the mass.
    pub gap_tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let l = LbfgsConfig::default();
        Self {
            mu: vec![1e2, 1e3, 1e4],
            max_iter: l.max_iter,
            grad_tol: l.grad_tol,
            memory: l.memory,
            armijo: l.armijo,
            backtrack: l.backtrack,
            max_line_search: l.max_line_search,
            gap_tolerance: 1e-3,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str| Err(Error::InvalidArgument(format!("optimizer.{k} must be positive")));
        if self.mu.is_empty() || self.mu.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return bad("mu");
        }
        for (k, v) in [("grad_tol", self.grad_tol), ("armijo", self.armijo), ("gap_tolerance", self.gap_tolerance)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(k);
            }
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) {
            return Err(Error::InvalidArgument("optimizer.backtrack must lie in (0, 1)".into()));
        }
        if self.max_iter == 0 || self.memory == 0 || self.max_line_search == 0 {
            return bad("max_iter/memory/max_line_search");
        }
        Ok(())
    }

    pub fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            memory: self.memory,
            armijo: self.armijo,
            backtrack: self.backtrack,
            max_line_search: self.max_line_search,
        }
    }
}

/// What the controlled path should reach.
#[derive(Clone, Debug)]
pub enum ActionTarget {
    /// Penalize `||rho(T) - target||_2^2`.
    Endpoint(Field),
    /// Penalize `sum_j dt ||rho(t_j) - path(t_j)||_2^2`; the path must share
    /// the time nodes and have stride-1 snapshots.
    Path(Trajectory),
    /// Penalize `max(0, delta - ||rho(T) - reference||_1)^2`.
    L1Deviation { reference: Field, delta: f64 },
}

/// Parametrization of the control.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ControlSpace {
    /// One value per face and time step, bare or configured flux.
    Grid,
    /// The first `k` modes per time step with flux `Phi^{1/2,eta}` (`eta = 0`
    /// keeps the configured flux).
    Spectral { k: usize, eta: f64 },
}

enum Params {
    Grid,
    Spectral(Arc<SpectralBasis>),
}

/// Discrete action functional of the fixed-step IMEX scheme with its adjoint
/// gradient.
pub struct ActionProblem {
    grid: Grid,
    times: Vec<f64>,
    rho0: Vec<f64>,
    target: ActionTarget,
    params: Params,
    stepper: Stepper,
    /// Penalty weight.
    pub mu: f64,
}

struct Forward {
    states: Vec<Vec<f64>>,
    velocities: Vec<VectorField>,
}

impl ActionProblem {
    pub fn new(
        spec: &NonlinearitySpec,
        rho0: &Field,
        target: ActionTarget,
        t_end: f64,
        config: &SolverConfig,
        space: ControlSpace,
    ) -> Result<Self> {
        config.validate()?;
        let grid = rho0.grid();
        validate_initial(spec, grid, rho0)?;
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!("t_end = {t_end}")));
        }
        let times = node_times(t_end, config.dt);
        let mass = rho0.mass();
        let mass_ok = |f: &Field, what: &str| -> Result<()> {
            grid.check_same(&f.grid())?;
            if f.min() < 0.0 {
                return Err(Error::Infeasible(format!("{what} has negative values")));
            }
            if (f.mass() - mass).abs() > 1e-9 * mass.max(1.0) {
                return Err(Error::Infeasible(format!(
                    "{what} has mass {} but the initial datum has mass {mass}",
                    f.mass()
                )));
            }
            Ok(())
        };
        match &target {
            ActionTarget::Endpoint(f) => mass_ok(f, "target")?,
            ActionTarget::L1Deviation { reference, delta } => {
                mass_ok(reference, "reference")?;
                if !(*delta > 0.0 && *delta < 2.0 * mass) {
                    return Err(Error::Infeasible(format!("deviation {delta} is out of reach for mass {mass}")));
                }
            }
            ActionTarget::Path(p) => {
                let pt = p.times();
                if pt.len() != times.len() || pt.iter().zip(&times).any(|(a, b)| (a - b).abs() > 1e-12 * t_end) {
                    return Err(Error::InvalidArgument("target path does not share the time nodes".into()));
                }
                for j in 0..pt.len() {
                    let f = p
                        .field_at_node(j)
                        .ok_or_else(|| Error::InvalidArgument("target path needs snapshot_stride = 1".into()))?;
                    mass_ok(f, "target path")?;
                }
            }
        }
        let mut model = Model::new(spec, config)?;
        let params = match space {
            ControlSpace::Grid => Params::Grid,
            ControlSpace::Spectral { k, eta } => {
                if k == 0 {
                    return Err(Error::InvalidArgument("at least one mode is required".into()));
                }
                if eta > 0.0 {
                    model = model.with_flux(Some(RegularizedSqrtPhi::new(spec, RegularizationParams::new(eta)?)));
                } else if eta < 0.0 || !eta.is_finite() {
                    return Err(Error::InvalidArgument(format!("eta = {eta}")));
                }
                Params::Spectral(SpectralBasis::shared(grid, k)?)
            }
        };
        Ok(Self {
            grid,
            rho0: rho0.values().to_vec(),
            target,
            params,
            stepper: Stepper::new(model, grid, config),
            times,
            mu: 1.0,
        })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    fn block(&self) -> usize {
        match &self.params {
            Params::Grid => self.grid.d() * self.grid.cells(),
            Params::Spectral(b) => b.len(),
        }
    }

    /// Number of optimization variables.
    pub fn num_params(&self) -> usize {
        self.block() * self.steps()
    }

    fn velocity(&self, x: &[f64], j: usize) -> VectorField {
        let m = self.block();
        let xj = &x[j * m..(j + 1) * m];
        match &self.params {
            Params::Grid => {
                let n = self.grid.cells();
                VectorField::new(self.grid, xj.chunks(n).map(|c| c.to_vec()).collect()).expect("sized by construction")
            }
            Params::Spectral(b) => b.synthesize(xj),
        }
    }

    fn forward(&mut self, x: &[f64]) -> Option<Forward> {
        let mut states = Vec::with_capacity(self.times.len());
        let mut velocities = Vec::with_capacity(self.steps());
        states.push(self.rho0.clone());
        for j in 0..self.steps() {
            let dt = self.times[j + 1] - self.times[j];
            let v = self.velocity(x, j);
            self.stepper.transport(&states[j], &v, dt, None);
            let next = self.stepper.implicit(dt).ok()?;
            states.push(next);
            velocities.push(v);
        }
        Some(Forward { states, velocities })
    }

    /// Control energy `sum_j dt_j 1/2 ||v_j||^2`.
    fn energy(&self, x: &[f64]) -> f64 {
        let m = self.block();
        let w = match self.params {
            Params::Grid => self.grid.cell_volume(),
            Params::Spectral(_) => 1.0,
        };
        (0..self.steps())
            .map(|j| {
                let dt = self.times[j + 1] - self.times[j];
                0.5 * dt * w * x[j * m..(j + 1) * m].iter().map(|v| v * v).sum::<f64>()
            })
            .sum()
    }

    /// Penalty and, if requested, its gradient with respect to every node state.
    fn penalty(&self, states: &[Vec<f64>], mut grads: Option<&mut [Vec<f64>]>) -> f64 {
        let cell = self.grid.cell_volume();
        let last = states.len() - 1;
        match &self.target {
            ActionTarget::Endpoint(t) => {
                let mut p = 0.0;
                for (i, (&r, &s)) in states[last].iter().zip(t.values()).enumerate() {
                    p += cell * (r - s) * (r - s);
                    if let Some(g) = grads.as_deref_mut() {
                        g[last][i] += 2.0 * cell * (r - s);
                    }
                }
                p
            }
            ActionTarget::Path(path) => {
                let mut p = 0.0;
                for j in 1..states.len() {
                    let dt = self.times[j] - self.times[j - 1];
                    let t = path.field_at_node(j).expect("checked in new");
                    for (i, (&r, &s)) in states[j].iter().zip(t.values()).enumerate() {
                        p += dt * cell * (r - s) * (r - s);
                        if let Some(g) = grads.as_deref_mut() {
                            g[j][i] += 2.0 * dt * cell * (r - s);
                        }
                    }
                }
                p
            }
            ActionTarget::L1Deviation { reference, delta } => {
                let s2 = ABS_SMOOTHING * ABS_SMOOTHING;
                let dev: f64 = states[last]
                    .iter()
                    .zip(reference.values())
                    .map(|(r, s)| ((r - s).powi(2) + s2).sqrt() - ABS_SMOOTHING)
                    .sum::<f64>()
                    * cell;
                let short = (delta - dev).max(0.0);
                if let Some(g) = grads.as_mut() {
                    for (i, (r, s)) in states[last].iter().zip(reference.values()).enumerate() {
                        let x = r - s;
                        g[last][i] -= 2.0 * short * cell * x / (x * x + s2).sqrt();
                    }
                }
                short * short
            }
        }
    }

    /// L1 distance to the event: endpoint or path distance, or the deviation shortfall.
    fn gap(&self, states: &[Vec<f64>]) -> f64 {
        let cell = self.grid.cell_volume();
        let l1 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * cell;
        let last = states.len() - 1;
        match &self.target {
            ActionTarget::Endpoint(t) => l1(&states[last], t.values()),
            ActionTarget::Path(path) => (1..states.len())
                .map(|j| (self.times[j] - self.times[j - 1]) * l1(&states[j], path.field_at_node(j).unwrap().values()))
                .sum(),
            ActionTarget::L1Deviation { reference, delta } => (delta - l1(&states[last], reference.values())).max(0.0),
        }
    }

    /// Objective `energy + mu * penalty`; `+inf` when the scheme fails.
    pub fn objective(&mut self, x: &[f64]) -> Result<f64> {
        self.check_len(x)?;
        Ok(match self.forward(x) {
            Some(fw) => self.energy(x) + self.mu * self.penalty(&fw.states, None),
            None => f64::INFINITY,
        })
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.num_params() {
            return Err(Error::InvalidArgument(format!("{} parameters, expected {}", x.len(), self.num_params())));
        }
        Ok(())
    }

    /// Objective and discrete-adjoint gradient; `+inf` (gradient untouched)
    /// when the forward or adjoint solve fails.
    pub fn value_and_gradient(&mut self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.check_len(x)?;
        let Some(fw) = self.forward(x) else {
            return Ok(f64::INFINITY);
        };
        let g = self.grid;
        let n = g.cells();
        let m = self.block();
        let mut dpen = vec![vec![0.0; n]; fw.states.len()];
        let pen = self.penalty(&fw.states, Some(&mut dpen));
        let value = self.energy(x) + self.mu * pen;

        let inv_h = 1.0 / g.h();
        let cell = g.cell_volume();
        let mut lambda: Vec<f64> = dpen[self.steps()].iter().map(|v| self.mu * v).collect();
        let mut deriv = vec![0.0; n];
        let mut lap = vec![0.0; n];
        let mut sigma = vec![(0.0, 0.0); n];
        for j in (0..self.steps()).rev() {
            let dt = self.times[j + 1] - self.times[j];
            let post = &fw.states[j + 1];
            let pre = &fw.states[j];
            // y = (I - dt D Lap)^{-1} lambda through the forward-form solve
            self.stepper.diffusion_derivative(post, &mut deriv);
            laplacian_into(g, &lambda, &mut lap);
            let Some(w) = self.stepper.solve_shifted(&deriv, dt, &lap) else {
                return Ok(f64::INFINITY);
            };
            let mut q = vec![0.0; n];
            laplacian_into(g, &w, &mut q);
            let y: Vec<f64> = (0..n).map(|i| lambda[i] + dt * deriv[i] * (lap[i] + dt * q[i])).collect();

            // transport adjoint
            for (s, &r) in sigma.iter_mut().zip(pre) {
                *s = self.stepper.model.flux(r);
            }
            let v = &fw.velocities[j];
            let mut next = y.clone();
            let mut gv = VectorField::zeros(g);
            for a in 0..g.d() {
                let va = v.component(a);
                let ga = gv.component_mut(a);
                for c in 0..n {
                    let p = g.plus(c, a);
                    let vf = va[c];
                    let up = if vf > 0.0 { c } else { p };
                    let gf = (y[p] - y[c]) * dt * inv_h;
                    if vf != 0.0 {
                        next[up] += gf * sigma[up].1 * vf;
                    }
                    ga[c] = gf * sigma[up].0;
                }
            }
            let gj = &mut grad[j * m..(j + 1) * m];
            let xj = &x[j * m..(j + 1) * m];
            match &self.params {
                Params::Grid => {
                    for a in 0..g.d() {
                        for c in 0..n {
                            gj[a * n + c] = dt * cell * xj[a * n + c] + gv.component(a)[c];
                        }
                    }
                }
                Params::Spectral(b) => {
                    for (k, mode) in b.modes().iter().enumerate() {
                        let s: f64 = gv.component(mode.direction).iter().zip(b.samples(k)).map(|(u, e)| u * e).sum();
                        gj[k] = dt * xj[k] + s;
                    }
                }
            }
            for (l, (nv, dp)) in lambda.iter_mut().zip(next.iter().zip(&dpen[j])) {
                *l = nv + self.mu * dp;
            }
        }
        Ok(value)
    }

    /// Control field for a parameter vector.
    pub fn control(&self, x: &[f64]) -> Result<ControlField> {
        self.check_len(x)?;
        let m = self.block();
        match &self.params {
            Params::Grid => ControlField::from_slices(self.times.clone(), (0..self.steps()).map(|j| self.velocity(x, j)).collect()),
            Params::Spectral(b) => {
                ControlField::spectral(b.clone(), self.times.clone(), x.chunks(m).map(|c| c.to_vec()).collect())
            }
        }
    }

    /// Time-integrated L1 residual of the controlled scheme along `x`.
    fn constraint_residual(&mut self, fw: &Forward) -> f64 {
        let mut total = 0.0;
        let cell = self.grid.cell_volume();
        let mut lap = vec![0.0; self.grid.cells()];
        for j in 0..self.steps() {
            let dt = self.times[j + 1] - self.times[j];
            self.stepper.transport(&fw.states[j], &fw.velocities[j], dt, None);
            let post = &fw.states[j + 1];
            let eta2 = self.stepper.model.viscosity;
            let phi: Vec<f64> = post.iter().map(|&r| self.stepper.model.diffusion(r).0 + eta2 * r).collect();
            laplacian_into(self.grid, &phi, &mut lap);
            let l1: f64 = (0..post.len()).map(|i| (post[i] - dt * lap[i] - self.stepper.b[i]).abs()).sum();
            total += l1 * cell;
        }
        total
    }

    fn initial_guess(&self) -> Vec<f64> {
        match self.target {
            // the deviation penalty is flat at the reference path
            ActionTarget::L1Deviation { .. } => {
                (0..self.num_params()).map(|i| 1e-3 * (1.0 + 0.7 * i as f64).sin()).collect()
            }
            _ => vec![0.0; self.num_params()],
        }
    }
}

/// Minimizes `1/2 ||g||^2 + mu * penalty` over the chosen control space,
/// sweeping `opt.mu` with warm starts, and reports the largest `mu` whose
/// L1 target gap is within `opt.gap_tolerance * mass`.
pub fn minimize_action(
    spec: &NonlinearitySpec,
    rho0: &Field,
    target: ActionTarget,
    t_end: f64,
    config: &SolverConfig,
    space: ControlSpace,
    opt: &OptimizerConfig,
) -> Result<RateEvaluation> {
    opt.validate()?;
    let mass = rho0.mass();
    let mut problem = ActionProblem::new(spec, rho0, target, t_end, config, space)?;
    let lcfg = opt.lbfgs();
    let mut x = problem.initial_guess();
    let mut iterations = 0;
    let mut best: Option<(f64, lbfgs::LbfgsResult, f64)> = None;
    let mut last: Option<(f64, lbfgs::LbfgsResult, f64)> = None;
    for &mu in &opt.mu {
        problem.mu = mu;
        let mut probe = vec![0.0; x.len()];
        if !problem.value_and_gradient(&x, &mut probe)?.is_finite() {
            return Err(Error::NewtonDivergence { t: 0.0, halvings: 0 });
        }
        let res = lbfgs::minimize(x.clone(), &lcfg, |p, g| problem.value_and_gradient(p, g))?;
        iterations += res.iterations;
        let fw = problem.forward(&res.x).ok_or(Error::NewtonDivergence { t: 0.0, halvings: 0 })?;
        let gap = problem.gap(&fw.states);
        log::debug!("mu = {mu:e}: objective {:.6e}, gap {gap:.3e}, {} iterations", res.f, res.iterations);
        x = res.x.clone();
        if gap <= opt.gap_tolerance * mass {
            best = Some((mu, res.clone(), gap));
        }
        last = Some((mu, res, gap));
    }
    let feasible_gap = best.is_some();
    let (mu, res, gap) = best.or(last).expect("at least one penalty weight");
    problem.mu = mu;
    let fw = problem.forward(&res.x).ok_or(Error::NewtonDivergence { t: 0.0, halvings: 0 })?;
    let residual = problem.constraint_residual(&fw);
    let tol = FEASIBILITY_TOL * mass.max(f64::MIN_POSITIVE) * t_end;
    let control = problem.control(&res.x)?;
    Ok(RateEvaluation {
        value: problem.energy(&res.x),
        control,
        constraint_residual: residual,
        feasibility_tolerance: tol,
        feasible: feasible_gap && residual <= tol,
        iterations,
        mu: Some(mu),
        target_gap: Some(gap),
        line_search_failed: res.line_search_failed,
        objective_history: res.history,
    })
}

// ---------------------------------------------------------------------------
// recovery sequence

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GammaRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub eta: f64,
    #[serde(rename = "J_etaK")]
    pub j_eta_k: f64,
    #[serde(rename = "J_ref")]
    pub j_ref: f64,
    pub l1_dist: f64,
}

/// `int_0^T ||a(t) - b(t)||_1 dt` by the trapezoidal rule over shared snapshots.
fn l1_time_distance(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    let (sa, sb) = (a.snapshots(), b.snapshots());
    if sa.len() != sb.len() || sa.iter().zip(sb).any(|(x, y)| x.node != y.node) {
        return Err(Error::InvalidArgument("trajectories do not share snapshot nodes".into()));
    }
    let d: Vec<f64> = sa.iter().zip(sb).map(|(x, y)| x.field.l1_distance(&y.field)).collect::<Result<_>>()?;
    Ok((1..d.len()).map(|i| 0.5 * (sa[i].t - sa[i - 1].t) * (d[i] + d[i - 1])).sum())
}

/// For each `K`: solve with `P_K g_ref` and flux `Phi^{1/2,1/K}`, and compare
/// with the run driven by `g_ref` under the configured flux.
pub fn gamma_sweep(
    spec: &NonlinearitySpec,
    rho0: &Field,
    g_ref: &ControlField,
    k_list: &[usize],
    t_end: f64,
    config: &SolverConfig,
) -> Result<Vec<GammaRow>> {
    if k_list.is_empty() || k_list.windows(2).any(|w| w[1] <= w[0]) || k_list[0] < 2 {
        return Err(Error::InvalidArgument("K list must be increasing and start at 2 or more".into()));
    }
    let grid = rho0.grid();
    let reference = solve_skeleton(spec, grid, rho0, g_ref, t_end, config)?;
    let j_ref = g_ref.energy();
    k_list
        .iter()
        .map(|&k| {
            let eta = 1.0 / k as f64;
            let gk = project_pk(g_ref, k)?;
            let cfg = SolverConfig { flux_regularization: eta, ..config.clone() };
            let run = solve_skeleton(spec, grid, rho0, &gk as &dyn Control, t_end, &cfg)?;
            Ok(GammaRow { k, eta, j_eta_k: gk.energy(), j_ref, l1_dist: l1_time_distance(&run, &reference)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::uniform_times;
    use std::f64::consts::TAU;

    fn power(m: f64) -> NonlinearitySpec {
        NonlinearitySpec::power(m).unwrap()
    }

    #[test]
    fn energy_of_a_unit_mode() {
        let g = Grid::new(1, 32).unwrap();
        let b = SpectralBasis::shared(g, 3).unwrap();
        let c = ControlField::spectral(b, vec![0.0, 1.0], vec![vec![0.0, 1.0, 0.0]]).unwrap();
        assert!((control_energy(&c) - 0.5).abs() < 1e-14);
        assert!((control_energy(&c.to_grid()) - 0.5).abs() < 1e-10);
        assert_eq!(control_energy(&ControlField::zero(g, 1.0)), 0.0);
    }

    #[test]
    fn uncontrolled_path_has_zero_rate() {
        let g = Grid::new(1, 64).unwrap();
        let rho0 = Field::from_fn(g, |x| 1.0 + 0.5 * (TAU * x[0]).cos());
        let cfg = SolverConfig::new(1e-3);
        let traj = solve_skeleton(&power(2.0), g, &rho0, &ControlField::zero(g, 0.05), 0.05, &cfg).unwrap();
        let r = recover_minimal_control(&traj, DEFAULT_WEIGHT_FLOOR).unwrap();
        assert!(r.value <= 1e-8, "{}", r.value);
        assert!(r.feasible);
    }

    #[test]
    fn recovery_needs_every_node() {
        let g = Grid::new(1, 32).unwrap();
        let rho0 = Field::constant(g, 1.0);
        let cfg = SolverConfig { snapshot_stride: 2, ..SolverConfig::new(1e-2) };
        let traj = solve_skeleton(&power(1.0), g, &rho0, &ControlField::zero(g, 0.1), 0.1, &cfg).unwrap();
        assert!(matches!(recover_minimal_control(&traj, 1e-10), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn recovered_control_stays_below_the_generating_one() {
        let g = Grid::new(1, 64).unwrap();
        let rho0 = Field::from_fn(g, |x| 1.0 + 0.3 * (TAU * x[0]).sin());
        let t = 0.02;
        let cfg = SolverConfig::new(1e-3);
        let gen = ControlField::from_fn(g, uniform_times(t, 4), |x, s, _| 0.5 + (TAU * x[0]).cos() + 10.0 * s).unwrap();
        let traj = solve_skeleton(&power(2.0), g, &rho0, &gen, t, &cfg).unwrap();
        let r = recover_minimal_control(&traj, DEFAULT_WEIGHT_FLOOR).unwrap();
        assert!(r.feasible, "{r:?}");
        assert!(r.value <= gen.energy() * 1.01, "{} vs {}", r.value, gen.energy());
        assert!(r.value > 0.0);
    }

    fn check_gradient(problem: &mut ActionProblem, seed: u64) {
        use rand_chacha::ChaCha8Rng;
        use rand_core::{RngCore, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uni = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 - 0.5;
        let n = problem.num_params();
        let x: Vec<f64> = (0..n).map(|_| 0.4 + uni()).collect();
        let mut grad = vec![0.0; n];
        problem.value_and_gradient(&x, &mut grad).unwrap();
        for _ in 0..10 {
            let dir: Vec<f64> = (0..n).map(|_| uni()).collect();
            let eps = 1e-5;
            let xp: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + eps * b).collect();
            let xm: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a - eps * b).collect();
            let fd = (problem.objective(&xp).unwrap() - problem.objective(&xm).unwrap()) / (2.0 * eps);
            let ad: f64 = grad.iter().zip(&dir).map(|(a, b)| a * b).sum();
            assert!((fd - ad).abs() <= 1e-4 * ad.abs().max(1e-8), "fd {fd} adjoint {ad}");
        }
    }

    #[test]
    fn adjoint_matches_finite_differences_on_grid_controls() {
        let g = Grid::new(1, 32).unwrap();
        let rho0 = Field::from_fn(g, |x| 1.0 + 0.4 * (TAU * x[0]).cos());
        let target = Field::from_fn(g, |x| 1.0 + 0.4 * (TAU * x[0]).sin());
        let cfg = SolverConfig { newton_tol: 1e-14, ..SolverConfig::new(1e-3) };
        for m in [1.0, 2.0] {
            let mut p = ActionProblem::new(&power(m), &rho0, ActionTarget::Endpoint(target.clone()), 0.02, &cfg, ControlSpace::Grid)
                .unwrap();
            assert_eq!(p.steps(), 20);
            p.mu = 10.0;
            check_gradient(&mut p, 1);
        }
    }

    #[test]
    fn adjoint_matches_finite_differences_on_spectral_controls() {
        let g = Grid::new(1, 32).unwrap();
        let rho0 = Field::from_fn(g, |x| 1.0 + 0.4 * (TAU * x[0]).cos());
        let reference = rho0.clone();
        let cfg = SolverConfig { newton_tol: 1e-14, ..SolverConfig::new(1e-3) };
        let mut p = ActionProblem::new(
            &power(1.0),
            &rho0,
            ActionTarget::L1Deviation { reference, delta: 0.3 },
            0.02,
            &cfg,
            ControlSpace::Spectral { k: 4, eta: 0.1 },
        )
        .unwrap();
        p.mu = 100.0;
        check_gradient(&mut p, 2);
    }

    #[test]
    fn zero_control_is_optimal_for_the_free_endpoint() {
        let g = Grid::new(1, 32).unwrap();
        let rho0 = Field::from_fn(g, |x| 1.0 + 0.4 * (TAU * x[0]).cos());
        let cfg = SolverConfig::new(2e-3);
        let free = solve_skeleton(&power(2.0), g, &rho0, &ControlField::zero(g, 0.02), 0.02, &cfg).unwrap();
        let r = minimize_action(
            &power(2.0),
            &rho0,
            ActionTarget::Endpoint(free.final_field().clone()),
            0.02,
            &cfg,
            ControlSpace::Grid,
            &OptimizerConfig::default(),
        )
        .unwrap();
        assert!(r.value <= 1e-6, "{}", r.value);
        assert!(r.feasible);
    }

    #[test]
    fn minimization_reaches_a_shifted_endpoint() {
        let g = Grid::new(1, 32).unwrap();
        let rho0 = Field::from_fn(g, |x| 1.0 + 0.4 * (TAU * x[0]).cos());
        let cfg = SolverConfig::new(5e-3);
        let t = 0.05;
        let drive = ControlField::constant(g, t, [1.0, 0.0]);
        let pushed = solve_skeleton(&power(1.0), g, &rho0, &drive, t, &cfg).unwrap();
        let r = minimize_action(
            &power(1.0),
            &rho0,
            ActionTarget::Endpoint(pushed.final_field().clone()),
            t,
            &cfg,
            ControlSpace::Spectral { k: 3, eta: 0.0 },
            &OptimizerConfig::default(),
        )
        .unwrap();
        assert!(r.objective_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.target_gap.unwrap() <= 1e-3, "{r:?}");
        assert!(r.value <= drive.energy() * 1.05, "{} vs {}", r.value, drive.energy());
    }

    #[test]
    fn mass_mismatch_is_infeasible() {
        let g = Grid::new(1, 32).unwrap();
        let rho0 = Field::constant(g, 1.0);
        let e = ActionProblem::new(
            &power(1.0),
            &rho0,
            ActionTarget::Endpoint(Field::constant(g, 2.0)),
            0.1,
            &SolverConfig::new(1e-2),
            ControlSpace::Grid,
        );
        assert!(matches!(e, Err(Error::Infeasible(_))));
    }

    #[test]
    fn gamma_rows_grow_towards_the_full_energy() {
        let g = Grid::new(1, 64).unwrap();
        let rho0 = Field::from_fn(g, |x| 1.0 + 0.5 * (TAU * x[0]).cos());
        let basis = SpectralBasis::shared(g, 8).unwrap();
        let coeffs = vec![(1..=8).map(|k| 1.0 / k as f64).collect()];
        let g_ref = ControlField::spectral(basis, vec![0.0, 0.02], coeffs).unwrap();
        let rows = gamma_sweep(&power(1.0), &rho0, &g_ref, &[2, 4, 8], 0.02, &SolverConfig::new(1e-3)).unwrap();
        assert!(rows.windows(2).all(|w| w[1].j_eta_k >= w[0].j_eta_k));
        assert!((rows[2].j_eta_k - rows[2].j_ref).abs() < 1e-12);
        assert!(rows.windows(2).all(|w| w[1].l1_dist < w[0].l1_dist), "{rows:?}");
    }
}
