//! Deterministic IMEX solver for the controlled equation
//! `d_t rho = Lap(Phi(rho) + eta2 rho) - div(Phi^{1/2}(rho) g)`.
//!
//! Each step applies the upwind transport explicitly and then solves the
//! implicit diffusion problem `rho - dt Lap(Phi(rho) + eta2 rho) = b` by Newton's
//! method. The output nodes are the multiples of the nominal step `dt`; the CFL
//! restriction and failed Newton solves subdivide a nominal step internally.

use serde::{Deserialize, Serialize};

use crate::basis::Control;
use crate::error::{Error, Result};
use crate::grid::{laplacian_into, Field, Grid, VectorField};
use crate::linalg::{cyclic_tridiagonal, pcg};
use crate::nonlinearity::{NonlinearitySpec, RegularizationParams, RegularizedSqrtPhi};
use crate::quadrature::{gauss_legendre8, integrate_adaptive};

/// Step halvings allowed before a step is declared failed.
pub const MAX_HALVINGS: usize = 10;

const INNER_TOL: f64 = 1e-12;

fn default_dt() -> f64 {
    1e-4
}
fn default_cfl() -> f64 {
    0.5
}
fn default_newton_tol() -> f64 {
    1e-10
}
fn default_newton_max_iter() -> usize {
    50
}
fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_cfl")]
    pub cfl_factor: f64,
    /// Tolerance on the L1 norm of the Newton residual.
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_newton_max_iter")]
    pub newton_max_iter: usize,
    /// `eta2`, extra linear diffusion.
    #[serde(default)]
    pub viscosity: f64,
    /// `eta3`; 0 uses the bare flux `Phi^{1/2}`.
    #[serde(default)]
    pub flux_regularization: f64,
    /// `eta1`; 0 uses the bare `Phi`, otherwise `(Phi^{1/2,eta1})^2`.
    #[serde(default)]
    pub diffusion_regularization: f64,
    /// Keep every `snapshot_stride`-th node (the last node is always kept).
    #[serde(default = "default_stride")]
    pub snapshot_stride: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::new(default_dt())
    }
}

impl SolverConfig {
    pub fn new(dt: f64) -> Self {
        Self {
            dt,
            cfl_factor: default_cfl(),
            newton_tol: default_newton_tol(),
            newton_max_iter: default_newton_max_iter(),
            viscosity: 0.0,
            flux_regularization: 0.0,
            diffusion_regularization: 0.0,
            snapshot_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.cfl_factor > 0.0 && self.cfl_factor <= 1.0) {
            return bad("cfl_factor must lie in (0, 1]");
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 {
            return bad("newton_tol and newton_max_iter must be positive");
        }
        if !(self.viscosity >= 0.0 && self.viscosity.is_finite()) {
            return bad("viscosity must be nonnegative");
        }
        for (name, v) in [
            ("flux_regularization", self.flux_regularization),
            ("diffusion_regularization", self.diffusion_regularization),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.snapshot_stride == 0 {
            return bad("snapshot_stride must be at least 1");
        }
        Ok(())
    }
}

/// Cell-wise `Psi_Phi`; tables are integrated once on a fine partition.
#[derive(Clone, Debug)]
struct Entropy {
    spec: NonlinearitySpec,
    nodes: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Entropy {
    fn new(spec: &NonlinearitySpec) -> Self {
        let mut out = Self { spec: spec.clone(), nodes: Vec::new(), cumulative: Vec::new() };
        if spec.exponent().is_some() {
            return out;
        }
        let knots = spec.knots();
        let mut nodes = vec![0.0];
        for w in knots.windows(2) {
            for i in 1..=32 {
                nodes.push(w[0] + (w[1] - w[0]) * i as f64 / 32.0);
            }
        }
        let mut cumulative = vec![0.0];
        for w in nodes.windows(2) {
            let piece = integrate_adaptive(w[0], w[1], 1e-12, |x| spec.phi_raw(x).ln()).unwrap_or(f64::NAN);
            cumulative.push(cumulative.last().unwrap() + piece);
        }
        out.nodes = nodes;
        out.cumulative = cumulative;
        out
    }

    fn eval(&self, xi: f64) -> f64 {
        let xi = xi.max(0.0);
        if self.nodes.is_empty() {
            return self.spec.entropy_density_raw(xi);
        }
        let i = self.nodes.partition_point(|&v| v <= xi).saturating_sub(1);
        let x0 = self.nodes[i];
        if xi == x0 {
            return self.cumulative[i];
        }
        let rest = if i == 0 {
            integrate_adaptive(0.0, xi, 1e-12, |x| self.spec.phi_raw(x).ln()).unwrap_or(f64::NAN)
        } else {
            gauss_legendre8(x0, xi, |x| self.spec.phi_raw(x).ln())
        };
        self.cumulative[i] + rest
    }

    fn total(&self, rho: &[f64], cell: f64) -> f64 {
        rho.iter().map(|&r| self.eval(r)).sum::<f64>() * cell
    }
}

/// The scalar functions entering one configuration of the scheme.
#[derive(Clone, Debug)]
pub(crate) struct Model {
    pub(crate) spec: NonlinearitySpec,
    diffusion_reg: Option<RegularizedSqrtPhi>,
    flux_reg: Option<RegularizedSqrtPhi>,
    pub(crate) viscosity: f64,
    entropy: Entropy,
}

impl Model {
    pub(crate) fn new(spec: &NonlinearitySpec, config: &SolverConfig) -> Result<Self> {
        let reg = |eta: f64| -> Result<Option<RegularizedSqrtPhi>> {
            if eta == 0.0 {
                Ok(None)
            } else {
                Ok(Some(RegularizedSqrtPhi::new(spec, RegularizationParams::new(eta)?)))
            }
        };
        Ok(Self {
            spec: spec.clone(),
            diffusion_reg: reg(config.diffusion_regularization)?,
            flux_reg: reg(config.flux_regularization)?,
            viscosity: config.viscosity,
            entropy: Entropy::new(spec),
        })
    }

    /// Replaces the transport flux by a prebuilt regularized one.
    pub(crate) fn with_flux(mut self, flux: Option<RegularizedSqrtPhi>) -> Self {
        self.flux_reg = flux;
        self
    }

    /// Diffusion nonlinearity and its derivative, continued as an odd function
    /// so Newton iterates may cross zero.
    #[inline]
    pub(crate) fn diffusion(&self, xi: f64) -> (f64, f64) {
        let a = xi.abs();
        let (v, d) = match &self.diffusion_reg {
            None => self.spec.phi_and_dphi_raw(a),
            Some(r) => {
                let (s, ds) = r.eval(a);
                (s * s, 2.0 * s * ds)
            }
        };
        (v.copysign(xi), d)
    }

    /// Transport flux and its derivative; nonpositive densities carry no flux.
    #[inline]
    pub(crate) fn flux(&self, xi: f64) -> (f64, f64) {
        if xi <= 0.0 {
            return (0.0, 0.0);
        }
        match &self.flux_reg {
            None => (self.spec.sqrt_phi_raw(xi), self.spec.dsqrt_phi_raw(xi)),
            Some(r) => r.eval(xi),
        }
    }
}

/// Why a single step attempt was rejected.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum StepFailure {
    Newton,
    Negative { cell: usize, value: f64 },
}

/// One IMEX step with reusable work arrays.
pub(crate) struct Stepper {
    pub(crate) model: Model,
    grid: Grid,
    cfl: f64,
    newton_tol: f64,
    newton_max_iter: usize,
    pub(crate) b: Vec<f64>,
    flux: Vec<f64>,
    phi: Vec<f64>,
    deriv: Vec<f64>,
    lap: Vec<f64>,
    res: Vec<f64>,
    /// Newton iterations used by the last successful solve.
    pub(crate) last_iterations: usize,
}

impl Stepper {
    pub(crate) fn new(model: Model, grid: Grid, config: &SolverConfig) -> Self {
        let n = grid.cells();
        Self {
            model,
            grid,
            cfl: config.cfl_factor,
            newton_tol: config.newton_tol,
            newton_max_iter: config.newton_max_iter,
            b: vec![0.0; n],
            flux: vec![0.0; n],
            phi: vec![0.0; n],
            deriv: vec![0.0; n],
            lap: vec![0.0; n],
            res: vec![0.0; n],
            last_iterations: 0,
        }
    }

    /// Largest step for which the explicit transport keeps every cell nonnegative
    /// with margin `1 - cfl`.
    pub(crate) fn cfl_limit(&self, rho: &[f64], v: &VectorField) -> f64 {
        let g = self.grid;
        let mut speed: f64 = 0.0;
        for (c, &r) in rho.iter().enumerate() {
            if r <= 0.0 {
                continue;
            }
            let mut out = 0.0;
            for a in 0..g.d() {
                let va = v.component(a);
                out += va[c].max(0.0) + (-va[g.minus(c, a)]).max(0.0);
            }
            if out == 0.0 {
                continue;
            }
            let (s, ds) = self.model.flux(r);
            speed = speed.max(ds.max(s / r) * out);
        }
        if speed == 0.0 {
            f64::INFINITY
        } else {
            self.cfl * g.h() / speed
        }
    }

    /// `b = rho - dt div(sigma_up v) + dt extra`.
    pub(crate) fn transport(&mut self, rho: &[f64], v: &VectorField, dt: f64, extra: Option<&[f64]>) {
        let g = self.grid;
        let inv_h = 1.0 / g.h();
        for (f, &r) in self.flux.iter_mut().zip(rho) {
            *f = self.model.flux(r).0;
        }
        self.b.copy_from_slice(rho);
        for a in 0..g.d() {
            let va = v.component(a);
            // face flux between c and c + e_a
            for c in 0..g.cells() {
                let p = g.plus(c, a);
                let vf = va[c];
                if vf == 0.0 {
                    continue;
                }
                let f = (if vf > 0.0 { self.flux[c] } else { self.flux[p] }) * vf * dt * inv_h;
                self.b[c] -= f;
                self.b[p] += f;
            }
        }
        if let Some(e) = extra {
            for (b, x) in self.b.iter_mut().zip(e) {
                *b += dt * x;
            }
        }
    }

    /// `Phi_D'(rho) + eta2` cell-wise.
    pub(crate) fn diffusion_derivative(&self, rho: &[f64], out: &mut [f64]) {
        for (d, &r) in out.iter_mut().zip(rho) {
            *d = self.model.diffusion(r).1 + self.model.viscosity;
        }
    }

    fn eval_nonlinearity(&mut self, rho: &[f64]) {
        let eta2 = self.model.viscosity;
        for ((p, d), &r) in self.phi.iter_mut().zip(self.deriv.iter_mut()).zip(rho) {
            let (v, dv) = self.model.diffusion(r);
            *p = v + eta2 * r;
            *d = dv + eta2;
        }
    }

    /// Solves `A w = r` with `A = diag(1/D) - dt Lap`, `D` floored at `1e-12 max D`.
    pub(crate) fn solve_shifted(&self, deriv: &[f64], dt: f64, r: &[f64]) -> Option<Vec<f64>> {
        let g = self.grid;
        let dmax = deriv.iter().fold(0.0f64, |a, &b| a.max(b));
        let floor = if dmax > 0.0 { 1e-12 * dmax } else { 1.0 };
        let inv_d: Vec<f64> = deriv.iter().map(|&d| 1.0 / d.max(floor)).collect();
        let k = dt / (g.h() * g.h());
        if g.d() == 1 {
            let n = g.cells();
            let diag: Vec<f64> = inv_d.iter().map(|v| v + 2.0 * k).collect();
            let off = vec![-k; n];
            cyclic_tridiagonal(&off, &diag, &off, r).ok()
        } else {
            let pre: Vec<f64> = inv_d.iter().map(|v| 1.0 / (v + 4.0 * k)).collect();
            let mut w = vec![0.0; r.len()];
            let mut tmp = vec![0.0; r.len()];
            let apply = |x: &[f64], out: &mut [f64]| {
                laplacian_into(g, x, &mut tmp);
                for i in 0..x.len() {
                    out[i] = inv_d[i] * x[i] - dt * tmp[i];
                }
            };
            pcg(apply, &pre, r, &mut w, INNER_TOL, 20 * r.len()).ok()?;
            Some(w)
        }
    }

    /// Newton solve of `rho - dt Lap(Phi(rho) + eta2 rho) = b` starting from `b`.
    pub(crate) fn implicit(&mut self, dt: f64) -> std::result::Result<Vec<f64>, StepFailure> {
        let g = self.grid;
        let cell = g.cell_volume();
        let mut rho = self.b.clone();
        let scale = (self.b.iter().map(|v| v.abs()).sum::<f64>() * cell).max(1.0);
        let mut first = f64::NAN;
        for it in 0..=self.newton_max_iter {
            self.eval_nonlinearity(&rho);
            laplacian_into(g, &self.phi, &mut self.lap);
            let mut l1 = 0.0;
            for i in 0..rho.len() {
                self.res[i] = rho[i] - dt * self.lap[i] - self.b[i];
                l1 += self.res[i].abs();
            }
            l1 *= cell;
            if !l1.is_finite() {
                return Err(StepFailure::Newton);
            }
            if l1 <= self.newton_tol * scale {
                self.last_iterations = it;
                return Ok(rho);
            }
            if it == 0 {
                first = l1;
            } else if l1 > 1e3 * first {
                return Err(StepFailure::Newton);
            }
            if it == self.newton_max_iter {
                break;
            }
            let w = self.solve_shifted(&self.deriv, dt, &self.res).ok_or(StepFailure::Newton)?;
            // delta = r + dt Lap w keeps the update exactly mass neutral
            laplacian_into(g, &w, &mut self.lap);
            for i in 0..rho.len() {
                rho[i] -= self.res[i] + dt * self.lap[i];
            }
        }
        Err(StepFailure::Newton)
    }

    /// One full step; the result is nonnegative up to `1e-12 max(1, max rho)`.
    pub(crate) fn step(
        &mut self,
        rho: &[f64],
        v: &VectorField,
        dt: f64,
        extra: Option<&[f64]>,
    ) -> std::result::Result<Vec<f64>, StepFailure> {
        self.transport(rho, v, dt, extra);
        let out = self.implicit(dt)?;
        check_nonnegative(&out)?;
        Ok(out)
    }
}

pub(crate) fn check_nonnegative(rho: &[f64]) -> std::result::Result<(), StepFailure> {
    let max = rho.iter().fold(1.0f64, |a, &b| a.max(b));
    let tol = -1e-12 * max;
    match rho.iter().enumerate().find(|(_, &v)| v < tol || !v.is_finite()) {
        Some((cell, &value)) => Err(StepFailure::Negative { cell, value }),
        None => Ok(()),
    }
}

pub(crate) fn failure_error(f: StepFailure, t: f64) -> Error {
    match f {
        StepFailure::Newton => Error::NewtonDivergence { t, halvings: MAX_HALVINGS },
        StepFailure::Negative { cell, value } => Error::Nonnegativity { cell, value, t },
    }
}

/// Diagnostics at one output node. Time integrals use the left endpoint of
/// every internal step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NodeDiagnostics {
    pub t: f64,
    pub mass: f64,
    pub entropy: f64,
    /// `2 int int |grad Phi^{1/2}(rho)|^2` up to `t`.
    pub dissipation_cum: f64,
    /// `1/2 int int |g|^2` up to `t`.
    pub control_energy_cum: f64,
    /// Smallest internal step used to reach this node (0 at the first node).
    pub dt: f64,
    pub substeps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub node: usize,
    pub t: f64,
    pub field: Field,
}

/// Output of a deterministic solve.
#[derive(Clone, Debug)]
pub struct Trajectory {
    grid: Grid,
    spec: NonlinearitySpec,
    config: SolverConfig,
    control_fingerprint: u64,
    nodes: Vec<NodeDiagnostics>,
    snapshots: Vec<Snapshot>,
}

impl Trajectory {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn spec(&self) -> &NonlinearitySpec {
        &self.spec
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn control_fingerprint(&self) -> u64 {
        self.control_fingerprint
    }

    pub fn nodes(&self) -> &[NodeDiagnostics] {
        &self.nodes
    }

    pub fn times(&self) -> Vec<f64> {
        self.nodes.iter().map(|n| n.t).collect()
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn field_at_node(&self, node: usize) -> Option<&Field> {
        self.snapshots
            .binary_search_by_key(&node, |s| s.node)
            .ok()
            .map(|i| &self.snapshots[i].field)
    }

    pub fn initial(&self) -> &Field {
        &self.snapshots[0].field
    }

    pub fn final_field(&self) -> &Field {
        &self.snapshots.last().unwrap().field
    }

    pub fn t_end(&self) -> f64 {
        self.nodes.last().unwrap().t
    }

    /// Largest `|mass(t_j) - mass(0)| / (j mass(0))` over the nodes.
    pub fn mass_drift_per_step(&self) -> f64 {
        let m0 = self.nodes[0].mass;
        self.nodes
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, n)| (n.mass - m0).abs() / (j as f64 * m0.abs().max(f64::MIN_POSITIVE)))
            .fold(0.0, f64::max)
    }
}

/// Accumulates the node diagnostics of a run.
pub(crate) struct Recorder {
    grid: Grid,
    stride: usize,
    pub(crate) nodes: Vec<NodeDiagnostics>,
    pub(crate) snapshots: Vec<Snapshot>,
    dissipation: f64,
    energy: f64,
    min_dt: f64,
    substeps: usize,
    sqrt_phi: Vec<f64>,
}

impl Recorder {
    pub(crate) fn new(grid: Grid, stride: usize) -> Self {
        Self {
            grid,
            stride,
            nodes: Vec::new(),
            snapshots: Vec::new(),
            dissipation: 0.0,
            energy: 0.0,
            min_dt: f64::INFINITY,
            substeps: 0,
            sqrt_phi: vec![0.0; grid.cells()],
        }
    }

    /// Adds the dissipation at `rho` and the energy of `control` over a step `dt`.
    pub(crate) fn accumulate(&mut self, model: &Model, rho: &[f64], control: &VectorField, dt: f64) {
        let g = self.grid;
        for (s, &r) in self.sqrt_phi.iter_mut().zip(rho) {
            *s = model.spec.sqrt_phi_raw(r.max(0.0));
        }
        let inv_h = 1.0 / g.h();
        let mut grad2 = 0.0;
        for a in 0..g.d() {
            for c in 0..g.cells() {
                let d = (self.sqrt_phi[g.plus(c, a)] - self.sqrt_phi[c]) * inv_h;
                grad2 += d * d;
            }
        }
        self.dissipation += 2.0 * dt * grad2 * g.cell_volume();
        self.energy += 0.5 * dt * control.squared_l2();
        self.min_dt = self.min_dt.min(dt);
        self.substeps += 1;
    }

    pub(crate) fn record(&mut self, model: &Model, t: f64, rho: &[f64], last: bool) {
        let node = self.nodes.len();
        let cell = self.grid.cell_volume();
        self.nodes.push(NodeDiagnostics {
            t,
            mass: rho.iter().sum::<f64>() * cell,
            entropy: model.entropy.total(rho, cell),
            dissipation_cum: self.dissipation,
            control_energy_cum: self.energy,
            dt: if node == 0 { 0.0 } else { self.min_dt },
            substeps: self.substeps,
        });
        self.min_dt = f64::INFINITY;
        self.substeps = 0;
        if node.is_multiple_of(self.stride) || last {
            self.snapshots.push(Snapshot { node, t, field: Field::from_vec_unchecked(self.grid, rho.to_vec()) });
        }
    }
}

/// Output node times: multiples of `dt`, the last one clipped to `t_end`.
pub(crate) fn node_times(t_end: f64, dt: f64) -> Vec<f64> {
    let steps = ((t_end / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    (0..=steps).map(|k| if k == steps { t_end } else { k as f64 * dt }).collect()
}

pub(crate) fn validate_initial(spec: &NonlinearitySpec, grid: Grid, rho0: &Field) -> Result<()> {
    grid.check_same(&rho0.grid())?;
    if let Some((i, v)) = rho0.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::InvalidArgument(format!("initial density is negative at cell {i} ({v})")));
    }
    let ent = Entropy::new(spec).total(rho0.values(), grid.cell_volume());
    if !ent.is_finite() {
        return Err(Error::InvalidArgument("initial density has infinite entropy".into()));
    }
    Ok(())
}

/// Solves the controlled equation on `[0, t_end]`.
pub fn solve_skeleton(
    spec: &NonlinearitySpec,
    grid: Grid,
    rho0: &Field,
    g: &dyn Control,
    t_end: f64,
    config: &SolverConfig,
) -> Result<Trajectory> {
    config.validate()?;
    validate_initial(spec, grid, rho0)?;
    grid.check_same(&g.grid())?;
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidArgument(format!("final time {t_end} must be positive")));
    }
    let model = Model::new(spec, config)?;
    let mut stepper = Stepper::new(model, grid, config);
    let mut rec = Recorder::new(grid, config.snapshot_stride);
    let times = node_times(t_end, config.dt);
    let mut rho = rho0.clone();
    let mut v = VectorField::zeros(grid);
    let dt_min = config.dt * 0.5f64.powi(40);
    rec.record(&stepper.model, 0.0, rho.values(), false);
    for (k, w) in times.windows(2).enumerate() {
        let end = w[1];
        let mut s = w[0];
        while end - s > 1e-13 * end {
            g.velocity_into(s, &rho, &mut v);
            let stop = match g.next_change(s) {
                Some(c) if c > s && c < end - 1e-13 * end => c,
                _ => end,
            };
            let span = stop - s;
            let lim = stepper.cfl_limit(rho.values(), &v);
            let dt = if lim >= span { span } else { span / (span / lim).ceil() };
            if dt < dt_min {
                return Err(Error::StepCollapse { t: s, dt_min: dt });
            }
            attempt(&mut stepper, &mut rec, g, &mut rho, &mut v, s, dt, 0)?;
            s = if stop - (s + dt) <= 1e-13 * stop { stop } else { s + dt };
        }
        rec.record(&stepper.model, end, rho.values(), k + 2 == times.len());
    }
    Ok(Trajectory {
        grid,
        spec: spec.clone(),
        config: config.clone(),
        control_fingerprint: g.fingerprint(),
        nodes: rec.nodes,
        snapshots: rec.snapshots,
    })
}

/// Steps over `[s, s + dt]`, splitting in halves on failure.
#[allow(clippy::too_many_arguments)]
fn attempt(
    stepper: &mut Stepper,
    rec: &mut Recorder,
    g: &dyn Control,
    rho: &mut Field,
    v: &mut VectorField,
    s: f64,
    dt: f64,
    depth: usize,
) -> Result<()> {
    if depth > 0 {
        g.velocity_into(s, rho, v);
    }
    match stepper.step(rho.values(), v, dt, None) {
        Ok(next) => {
            rec.accumulate(&stepper.model, rho.values(), v, dt);
            rho.values_mut().copy_from_slice(&next);
            Ok(())
        }
        Err(f) if depth == MAX_HALVINGS => Err(failure_error(f, s)),
        Err(f) => {
            log::debug!("step at t = {s} with dt = {dt} rejected: {f:?}");
            attempt(stepper, rec, g, rho, v, s, 0.5 * dt, depth + 1)?;
            attempt(stepper, rec, g, rho, v, s + 0.5 * dt, 0.5 * dt, depth + 1)
        }
    }
}

impl Trajectory {
    pub(crate) fn assemble(
        grid: Grid,
        spec: &NonlinearitySpec,
        config: &SolverConfig,
        control_fingerprint: u64,
        rec: Recorder,
    ) -> Self {
        Self {
            grid,
            spec: spec.clone(),
            config: config.clone(),
            control_fingerprint,
            nodes: rec.nodes,
            snapshots: rec.snapshots,
        }
    }
}

/// Both sides of the entropy-dissipation inequality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EntropyReport {
    /// `Ent(T) - Ent(0) + 2 int int |grad Phi^{1/2}|^2`.
    pub lhs: f64,
    /// `1/2 int int |g|^2`.
    pub rhs: f64,
    pub margin: f64,
}

pub fn entropy_report(traj: &Trajectory) -> EntropyReport {
    let first = traj.nodes[0];
    let last = *traj.nodes.last().unwrap();
    let lhs = last.entropy - first.entropy + last.dissipation_cum;
    let rhs = last.control_energy_cum;
    EntropyReport { lhs, rhs, margin: rhs - lhs }
}

/// Cell-wise `4 Phi/Phi' |grad Phi^{1/2}(rho)|^2`, with the squared gradient at
/// a cell taken as the mean over its two faces in each direction.
pub fn defect_field(spec: &NonlinearitySpec, rho: &Field) -> Result<Field> {
    let g = rho.grid();
    if let Some((i, v)) = rho.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(Error::Domain(format!("negative density {v} at cell {i}")));
    }
    let s: Vec<f64> = rho.values().iter().map(|&r| spec.sqrt_phi_raw(r)).collect();
    let inv_h = 1.0 / g.h();
    let mut out = vec![0.0; g.cells()];
    for a in 0..g.d() {
        for c in 0..g.cells() {
            let p = g.plus(c, a);
            let d = (s[p] - s[c]) * inv_h;
            out[c] += 0.5 * d * d;
            out[p] += 0.5 * d * d;
        }
    }
    for (o, &r) in out.iter_mut().zip(rho.values()) {
        *o *= spec.defect_coeff_raw(r);
    }
    Field::new(g, out)
}

/// L1 distances between two runs at their common output nodes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionSeries {
    pub times: Vec<f64>,
    pub distances: Vec<f64>,
    /// Some node exceeds the initial distance by more than `1e-3` relative.
    pub violation: bool,
}

pub const CONTRACTION_TOLERANCE: f64 = 1e-3;

pub fn contraction_distance(a: &Trajectory, b: &Trajectory) -> Result<ContractionSeries> {
    a.grid.check_same(&b.grid)?;
    if a.control_fingerprint != b.control_fingerprint {
        return Err(Error::InvalidArgument("trajectories were driven by different controls".into()));
    }
    if a.config != b.config || a.spec != b.spec {
        return Err(Error::InvalidArgument("trajectories use different solver settings".into()));
    }
    if a.nodes.len() != b.nodes.len() {
        return Err(Error::InvalidArgument("trajectories have different output nodes".into()));
    }
    let mut times = Vec::new();
    let mut distances = Vec::new();
    for s in &a.snapshots {
        if let Some(f) = b.field_at_node(s.node) {
            times.push(s.t);
            distances.push(s.field.l1_distance(f)?);
        }
    }
    let d0 = distances[0];
    let violation = distances.iter().any(|&d| d > d0 * (1.0 + CONTRACTION_TOLERANCE));
    Ok(ContractionSeries { times, distances, violation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::ControlField;
    use std::f64::consts::PI;

    fn cos_mode(f: &Field) -> f64 {
        let g = f.grid();
        f.values()
            .iter()
            .enumerate()
            .map(|(c, v)| v * (2.0 * PI * g.center(c)[0]).cos())
            .sum::<f64>()
            * 2.0
            * g.cell_volume()
    }

    #[test]
    fn heat_kernel_decay() {
        let spec = NonlinearitySpec::power(1.0).unwrap();
        let grid = Grid::new(1, 256).unwrap();
        let rho0 = Field::from_fn(grid, |x| 1.0 + (2.0 * PI * x[0]).cos());
        let t = 0.05;
        let traj = solve_skeleton(&spec, grid, &rho0, &ControlField::zero(grid, t), t, &SolverConfig::new(1e-5)).unwrap();
        let amp = cos_mode(traj.final_field()) / cos_mode(&rho0);
        let exact = (-4.0 * PI * PI * t).exp();
        assert!((amp / exact - 1.0).abs() < 0.01, "{amp} vs {exact}");
        assert!(traj.mass_drift_per_step() < 1e-12);
    }

    #[test]
    fn constant_state_is_stationary_under_constant_drift() {
        for m in [1.0, 2.0, 3.0] {
            let spec = NonlinearitySpec::power(m).unwrap();
            let grid = Grid::new(1, 32).unwrap();
            let rho0 = Field::constant(grid, 0.7);
            let g = ControlField::constant(grid, 1.0, [2.5, 0.0]);
            let traj = solve_skeleton(&spec, grid, &rho0, &g, 0.1, &SolverConfig::new(1e-3)).unwrap();
            for v in traj.final_field().values() {
                assert!((v - 0.7).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn mass_and_entropy_for_a_bump() {
        let spec = NonlinearitySpec::power(2.0).unwrap();
        let grid = Grid::new(2, 32).unwrap();
        let rho0 = Field::from_fn(grid, |x| {
            let r2 = (x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2);
            (1.0 - r2 / 0.04).max(0.0)
        });
        let traj = solve_skeleton(&spec, grid, &rho0, &ControlField::zero(grid, 0.01), 0.01, &SolverConfig::new(5e-4)).unwrap();
        assert!(traj.mass_drift_per_step() < 1e-12);
        for w in traj.nodes().windows(2) {
            assert!(w[1].entropy <= w[0].entropy + 1e-13);
        }
        let rep = entropy_report(&traj);
        assert!(rep.lhs <= 1e-12 && rep.rhs == 0.0);
    }

    #[test]
    fn defect_identity_integrates_to_twice_the_dissipation() {
        let spec = NonlinearitySpec::power(1.0).unwrap();
        let grid = Grid::new(1, 64).unwrap();
        let rho0 = Field::from_fn(grid, |x| 1.0 + (2.0 * PI * x[0]).cos());
        let traj = solve_skeleton(&spec, grid, &rho0, &ControlField::zero(grid, 0.01), 0.01, &SolverConfig::new(1e-4)).unwrap();
        let mut integral = 0.0;
        for w in traj.snapshots().windows(2) {
            let dt = w[1].t - w[0].t;
            let f = defect_field(&spec, &w[0].field).unwrap();
            integral += dt
                * f.values()
                    .iter()
                    .zip(w[0].field.values())
                    .map(|(d, r)| d / r)
                    .sum::<f64>()
                * grid.cell_volume();
        }
        let diss = traj.nodes().last().unwrap().dissipation_cum;
        assert!((integral - 2.0 * diss).abs() < 1e-10 * diss.max(1.0), "{integral} vs {diss}");
    }

    #[test]
    fn cfl_subdivides_the_step() {
        let spec = NonlinearitySpec::power(2.0).unwrap();
        let grid = Grid::new(1, 32).unwrap();
        let rho0 = Field::from_fn(grid, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).sin());
        let g = ControlField::from_fn(grid, vec![0.0, 0.1], |x, _, _| 40.0 * (2.0 * PI * x[0]).cos()).unwrap();
        let traj = solve_skeleton(&spec, grid, &rho0, &g, 0.1, &SolverConfig::new(0.01)).unwrap();
        assert!(traj.nodes()[1].substeps > 1);
        assert!(traj.final_field().min() >= 0.0);
        assert!(traj.mass_drift_per_step() < 1e-12);
    }

    #[test]
    fn contraction_of_identical_data_is_zero() {
        let spec = NonlinearitySpec::power(2.0).unwrap();
        let grid = Grid::new(1, 32).unwrap();
        let rho0 = Field::from_fn(grid, |x| 1.0 + 0.5 * (2.0 * PI * x[0]).sin());
        let g = ControlField::constant(grid, 0.05, [1.0, 0.0]);
        let cfg = SolverConfig::new(1e-3);
        let a = solve_skeleton(&spec, grid, &rho0, &g, 0.05, &cfg).unwrap();
        let b = solve_skeleton(&spec, grid, &rho0, &g, 0.05, &cfg).unwrap();
        let s = contraction_distance(&a, &b).unwrap();
        assert!(s.distances.iter().all(|&d| d == 0.0));
        assert!(!s.violation);
    }

    #[test]
    fn negative_initial_data_is_rejected() {
        let spec = NonlinearitySpec::power(2.0).unwrap();
        let grid = Grid::new(1, 16).unwrap();
        let mut rho0 = Field::constant(grid, 1.0);
        rho0.values_mut()[3] = -0.1;
        let r = solve_skeleton(&spec, grid, &rho0, &ControlField::zero(grid, 1.0), 0.1, &SolverConfig::new(1e-3));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn regularized_flux_converges_to_the_bare_flux() {
        let spec = NonlinearitySpec::power(2.0).unwrap();
        let grid = Grid::new(1, 64).unwrap();
        let rho0 = Field::from_fn(grid, |x| 0.01 + (1.0 + (2.0 * PI * x[0]).cos()).powi(2));
        let g = ControlField::from_fn(grid, vec![0.0, 0.02], |x, _, _| 2.0 * (2.0 * PI * x[0]).sin()).unwrap();
        let run = |eta3: f64| {
            let cfg = SolverConfig { flux_regularization: eta3, ..SolverConfig::new(1e-4) };
            solve_skeleton(&spec, grid, &rho0, &g, 0.02, &cfg).unwrap().final_field().clone()
        };
        let bare = run(0.0);
        let errs: Vec<f64> = [0.1, 0.01, 0.001].iter().map(|&e| run(e).l1_distance(&bare).unwrap()).collect();
        assert!(errs[0] > 0.0 && errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    }

    #[test]
    fn node_times_land_on_the_final_time() {
        let t = node_times(0.05, 1e-5);
        assert_eq!(t.len(), 5001);
        assert_eq!(*t.last().unwrap(), 0.05);
        let t = node_times(0.1, 0.03);
        assert_eq!(t, vec![0.0, 0.03, 0.06, 0.09, 0.1]);
    }
}
