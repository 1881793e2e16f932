//! Experiment drivers. Each writes its artifacts plus `result.json` into the
//! run directory and returns the list of files written.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use skeld::assumptions::check_assumptions;
use skeld::basis::ControlField;
use skeld::criticality::{criticality_exponent, fitted_exponent, zoomable_control, ScalingExponents};
use skeld::grid::{Field, Grid};
use skeld::io;
use skeld::rate::{
    gamma_sweep, minimize_action, recover_minimal_control, ActionTarget, ControlSpace, RateEvaluation,
};
use skeld::solver::{contraction_distance, entropy_report, solve_skeleton, SolverConfig, Trajectory};
use skeld::spde::{estimate_event_probability, simulate_spde, Ensemble, NoiseConfig};

use crate::config::{ControlSpec, ExperimentKind, Prepared, Scenario, TargetSpec};
use crate::error::CliError;

/// Entropy margins above `-(ENTROPY_REL_TOL rhs + ENTROPY_ABS_TOL)` count as satisfied.
pub const ENTROPY_REL_TOL: f64 = 0.05;
pub const ENTROPY_ABS_TOL: f64 = 1e-6;

pub struct RunDir {
    root: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn write(&mut self, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> skeld::Result<()>) -> Result<(), CliError> {
        let path = self.root.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &Value) -> Result<(), CliError> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| skeld::Error::Io(e.into()))?;
            writeln!(w)?;
            Ok(())
        })
    }
}

/// Finite numbers as JSON numbers, the rest as null.
fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

fn rate_json(r: &RateEvaluation) -> Value {
    let mut v = r.to_json();
    v["J"] = num(r.value);
    v["residual"] = num(r.constraint_residual);
    v
}

pub fn run(kind: ExperimentKind, s: &Scenario, base: &Path, out: &mut RunDir) -> Result<(), CliError> {
    if kind == ExperimentKind::CheckAssumptions {
        return check(s, out);
    }
    if kind == ExperimentKind::CriticalityScan {
        return criticality(s, out);
    }
    let p = s.prepare(base)?;
    match kind {
        ExperimentKind::SolveSkeleton => skeleton(s, base, &p, out),
        ExperimentKind::SimulateSpde => spde(s, &p, out),
        ExperimentKind::EvaluateRate => evaluate(s, &p, out),
        ExperimentKind::MinimizeAction => minimize(s, base, &p, out),
        ExperimentKind::GammaSweep => gamma(s, &p, out),
        ExperimentKind::LdpMc => ldp(s, &p, out),
        ExperimentKind::CheckAssumptions | ExperimentKind::CriticalityScan => unreachable!(),
    }
}

fn snapshot_config(s: &Scenario, p: &Prepared) -> SolverConfig {
    let stride = if s.output.snapshot_every == 0 { usize::MAX } else { s.output.snapshot_every };
    SolverConfig { snapshot_stride: stride, ..p.solver.clone() }
}

fn write_trajectory(out: &mut RunDir, traj: &Trajectory, fields: bool) -> Result<(), CliError> {
    out.write("diagnostics.csv", |w| io::write_diagnostics(w, traj.nodes()))?;
    if fields {
        for snap in traj.snapshots() {
            out.write(&format!("fields/field_{:06}.csv", snap.node), |w| io::write_field(w, &snap.field, snap.t))?;
        }
    }
    out.write("final.csv", |w| io::write_field(w, traj.final_field(), traj.t_end()))
}

fn skeleton(s: &Scenario, base: &Path, p: &Prepared, out: &mut RunDir) -> Result<(), CliError> {
    let cfg = snapshot_config(s, p);
    let traj = solve_skeleton(&p.spec, p.grid, &p.rho0, &p.control, s.t_end, &cfg)?;
    write_trajectory(out, &traj, s.output.snapshot_every > 0)?;
    let ent = entropy_report(&traj);
    let mut result = json!({
        "experiment": "solve-skeleton",
        "entropy": {
            "lhs": num(ent.lhs),
            "rhs": num(ent.rhs),
            "margin": num(ent.margin),
            "ok": ent.margin >= -(ENTROPY_REL_TOL * ent.rhs + ENTROPY_ABS_TOL),
        },
        "mass_drift_per_step": num(traj.mass_drift_per_step()),
        "mass_ok": traj.mass_drift_per_step() <= 1e-12 * traj.initial().mass(),
        "nodes": traj.nodes().len(),
    });
    if let Some(other) = &s.contraction {
        let rho1 = s.build_initial(other, p.grid, base, "contraction")?;
        let cfg = SolverConfig { snapshot_stride: 1, ..p.solver.clone() };
        let a = solve_skeleton(&p.spec, p.grid, &p.rho0, &p.control, s.t_end, &cfg)?;
        let b = solve_skeleton(&p.spec, p.grid, &rho1, &p.control, s.t_end, &cfg)?;
        let series = contraction_distance(&a, &b)?;
        let pts: Vec<(f64, f64)> = series.times.iter().copied().zip(series.distances.iter().copied()).collect();
        out.write("contraction.csv", |w| io::write_series(w, "t", "l1_distance", &pts))?;
        result["contraction"] = json!({
            "initial_distance": num(series.distances[0]),
            "final_distance": num(*series.distances.last().unwrap()),
            "ok": !series.violation,
        });
    }
    out.write_json("result.json", &result)
}

fn noise_config(s: &Scenario, epsilon: f64) -> NoiseConfig {
    NoiseConfig { modes: s.noise.modes, epsilon, eta: s.noise.eta, seed: s.seed, replica: 0 }
}

fn optional_control<'a>(s: &Scenario, p: &'a Prepared) -> Option<&'a ControlField> {
    (s.control != ControlSpec::Zero).then_some(&p.control)
}

fn spde(s: &Scenario, p: &Prepared, out: &mut RunDir) -> Result<(), CliError> {
    let noise = noise_config(s, s.noise.epsilon);
    noise.validate(p.grid).map_err(|e| CliError::Config { key: "noise".into(), message: e.to_string() })?;
    let cfg = snapshot_config(s, p);
    let path = simulate_spde(&p.spec, p.grid, &p.rho0, &noise, optional_control(s, p), s.t_end, &cfg)?;
    write_trajectory(out, &path.trajectory, s.output.snapshot_every > 0)?;
    let times = path.trajectory.times();
    let inc: Vec<(f64, f64)> = times.iter().copied().zip(path.increment_checksums.iter().copied()).collect();
    out.write("increments.csv", |w| io::write_series(w, "t", "increment_sum", &inc))?;
    let corr: Vec<(f64, f64)> = times.iter().copied().zip(path.correction_norms.iter().copied()).collect();
    out.write("correction.csv", |w| io::write_series(w, "t", "correction_l1", &corr))?;
    let traj = &path.trajectory;
    let result = json!({
        "experiment": "simulate-spde",
        "epsilon": noise.epsilon,
        "regime": num(noise.regime()),
        "splits": path.splits,
        "mass_drift_per_step": num(traj.mass_drift_per_step()),
        "mass_ok": traj.mass_drift_per_step() <= 1e-12 * traj.initial().mass(),
    });
    out.write_json("result.json", &result)
}

fn evaluate(s: &Scenario, p: &Prepared, out: &mut RunDir) -> Result<(), CliError> {
    let cfg = SolverConfig { snapshot_stride: 1, ..p.solver.clone() };
    let traj = solve_skeleton(&p.spec, p.grid, &p.rho0, &p.control, s.t_end, &cfg)?;
    out.write("diagnostics.csv", |w| io::write_diagnostics(w, traj.nodes()))?;
    let rate = recover_minimal_control(&traj, s.rate.weight_floor)?;
    out.write_json("rate.json", &rate_json(&rate))?;
    let generating = p.control.energy();
    let result = json!({
        "experiment": "evaluate-rate",
        "J": num(rate.value),
        "generating_energy": num(generating),
        "feasible": rate.feasible,
        "below_generating": rate.value <= generating * 1.01 + 1e-12,
    });
    out.write_json("result.json", &result)
}

fn final_of(p: &Prepared, control: &ControlField, t_end: f64) -> Result<Field, CliError> {
    let cfg = SolverConfig { snapshot_stride: usize::MAX, ..p.solver.clone() };
    Ok(solve_skeleton(&p.spec, p.grid, &p.rho0, control, t_end, &cfg)?.final_field().clone())
}

fn space(modes: Option<usize>, eta: f64) -> ControlSpace {
    match modes {
        Some(k) => ControlSpace::Spectral { k, eta },
        None => ControlSpace::Grid,
    }
}

fn minimize(s: &Scenario, base: &Path, p: &Prepared, out: &mut RunDir) -> Result<(), CliError> {
    let zero = ControlField::zero(p.grid, s.t_end);
    let target = match &s.action.target {
        TargetSpec::Uncontrolled => ActionTarget::Endpoint(final_of(p, &zero, s.t_end)?),
        TargetSpec::Driven => ActionTarget::Endpoint(final_of(p, &p.control, s.t_end)?),
        TargetSpec::File { path } => {
            let path = if path.is_absolute() { path.clone() } else { base.join(path) };
            let file = File::open(&path).map_err(|e| CliError::Config {
                key: "action.target.path".into(),
                message: format!("{}: {e}", path.display()),
            })?;
            let (f, _) = io::read_field(file)
                .map_err(|e| CliError::Config { key: "action.target.path".into(), message: e.to_string() })?;
            ActionTarget::Endpoint(f)
        }
        TargetSpec::L1Deviation { delta } => {
            ActionTarget::L1Deviation { reference: final_of(p, &zero, s.t_end)?, delta: *delta }
        }
    };
    let rate =
        minimize_action(&p.spec, &p.rho0, target, s.t_end, &p.solver, space(s.action.modes, s.action.eta), &s.optimizer)?;
    out.write_json("rate.json", &rate_json(&rate))?;
    let hist: Vec<(f64, f64)> = rate.objective_history.iter().enumerate().map(|(i, f)| (i as f64, *f)).collect();
    out.write("history.csv", |w| io::write_series(w, "iteration", "objective", &hist))?;
    if rate.control.is_spectral() {
        out.write("control_spectral.csv", |w| io::write_spectral_control(w, &rate.control))?;
    }
    let result = json!({
        "experiment": "minimize-action",
        "J": num(rate.value),
        "mu": rate.mu,
        "target_gap": rate.target_gap.map(num),
        "feasible": rate.feasible,
        "line_search_failed": rate.line_search_failed,
        "objective_nonincreasing": rate.objective_history.windows(2).all(|w| w[1] <= w[0]),
    });
    out.write_json("result.json", &result)
}

fn gamma(s: &Scenario, p: &Prepared, out: &mut RunDir) -> Result<(), CliError> {
    let rows = gamma_sweep(&p.spec, &p.rho0, &p.control, &s.gamma.k_list, s.t_end, &p.solver)?;
    out.write("gamma.csv", |w| io::write_gamma(w, &rows))?;
    let last = rows.last().expect("nonempty K list");
    let rel = if last.j_ref > 0.0 { (last.j_eta_k - last.j_ref).abs() / last.j_ref } else { last.j_eta_k };
    let result = json!({
        "experiment": "gamma-sweep",
        "J_ref": num(last.j_ref),
        "monotone_J": rows.windows(2).all(|w| w[1].j_eta_k >= w[0].j_eta_k),
        "final_relative_gap": num(rel),
        "l1_strictly_decreasing": rows.windows(2).all(|w| w[1].l1_dist < w[0].l1_dist),
    });
    out.write_json("result.json", &result)
}

fn ldp(s: &Scenario, p: &Prepared, out: &mut RunDir) -> Result<(), CliError> {
    let e = &s.ensemble;
    if e.epsilons.is_empty() || e.replicas == 0 {
        return Err(CliError::Config { key: "ensemble".into(), message: "needs noise levels and replicas".into() });
    }
    if !(e.delta > 0.0) {
        return Err(CliError::Config { key: "ensemble.delta".into(), message: "must be positive".into() });
    }
    let template = noise_config(s, e.epsilons[0]);
    template.validate(p.grid).map_err(|err| CliError::Config { key: "noise".into(), message: err.to_string() })?;
    let cfg = SolverConfig { snapshot_stride: usize::MAX, ..p.solver.clone() };
    let ens = Ensemble {
        spec: &p.spec,
        grid: p.grid,
        rho0: &p.rho0,
        noise: template,
        control: optional_control(s, p),
        t_end: s.t_end,
        config: cfg,
        epsilons: e.epsilons.clone(),
        replicas: e.replicas,
        common_random_numbers: e.common_random_numbers,
    };
    let reference = ens.reference()?.trajectory.final_field().clone();
    let delta = e.delta;
    let event = |t: &Trajectory| t.final_field().l1_distance(&reference).map(|d| d >= delta).unwrap_or(false);
    let (records, table) = estimate_event_probability(&ens, &event)?;
    out.write("ensemble.csv", |w| io::write_ensemble(w, &records))?;
    out.write("probability.csv", |w| io::write_probability_table(w, &table))?;
    let rejected: usize = table.iter().map(|r| r.rejected).sum();
    let mut result = json!({
        "experiment": "ldp-mc",
        "delta": delta,
        "rows": table.len(),
        "rejected": rejected,
        "rejection_rate": rejected as f64 / records.len() as f64,
        "table": table.iter().map(|r| json!({
            "epsilon": r.epsilon,
            "p_hat": num(r.p_hat),
            "stderr": num(r.stderr),
            "hits": r.hits,
            "trials": r.trials,
            "neg_eps_log_p": r.neg_eps_log_p.map(num),
        })).collect::<Vec<_>>(),
        "mean_l1_deviation": table.iter().map(|r| {
            let v: Vec<f64> = records.iter().filter(|x| x.epsilon == r.epsilon && !x.rejected).map(|x| x.l1_deviation).collect();
            num(v.iter().sum::<f64>() / v.len().max(1) as f64)
        }).collect::<Vec<_>>(),
    });
    if e.compare_action {
        let target = ActionTarget::L1Deviation { reference: final_of(p, &ControlField::zero(p.grid, s.t_end), s.t_end)?, delta };
        let rate = minimize_action(
            &p.spec,
            &p.rho0,
            target,
            s.t_end,
            &p.solver,
            ControlSpace::Spectral { k: s.noise.modes, eta: s.noise.eta },
            &s.optimizer,
        )?;
        out.write_json("rate.json", &rate_json(&rate))?;
        result["rate_estimate"] = num(rate.value);
    }
    out.write_json("result.json", &result)
}

fn check(s: &Scenario, out: &mut RunDir) -> Result<(), CliError> {
    let a = &s.assumptions;
    let report = check_assumptions(&s.nonlinearity, a.m_level, &a.delta_grid, a.samples)
        .map_err(|e| CliError::Config { key: "assumptions".into(), message: e.to_string() })?;
    out.write("assumptions.json", |w| {
        w.write_all(report.to_json().as_bytes())?;
        writeln!(w)?;
        Ok(())
    })?;
    let result = json!({
        "experiment": "check-assumptions",
        "all_pass": report.all_pass(),
        "checks": report.checks.iter().map(|c| json!({
            "name": c.name,
            "status": c.status,
            "fitted_constant": c.fitted_constant.map(num),
        })).collect::<Vec<_>>(),
    });
    out.write_json("result.json", &result)
}

fn criticality(s: &Scenario, out: &mut RunDir) -> Result<(), CliError> {
    let c = &s.criticality;
    let cfg_err = |key: &str, e: &dyn std::fmt::Display| CliError::Config { key: format!("criticality.{key}"), message: e.to_string() };
    let min_eta = c.etas.iter().copied().fold(f64::INFINITY, f64::min);
    let zoom = (1.0 / min_eta).round();
    if c.etas.len() < 2 || !(min_eta > 0.0) || (zoom * min_eta - 1.0).abs() > 1e-12 {
        return Err(cfg_err("etas", &"need at least two zooms of the form 1/integer"));
    }
    let mut lines = Vec::new();
    let mut rows = Vec::new();
    for &d in &c.dimensions {
        let grid = Grid::new(d, s.grid.n).map_err(|e| cfg_err("dimensions", &e))?;
        let g = zoomable_control(grid, zoom as usize).map_err(|e| cfg_err("etas", &e))?;
        for &m in &c.m_values {
            for &r in &c.r_values {
                let ex = ScalingExponents { m, r, p: c.p, q: c.q };
                let predicted = criticality_exponent(m, d, c.p, c.q, r).map_err(|e| cfg_err("m_values", &e))?;
                let fitted = fitted_exponent(&g, &c.etas, ex)?;
                lines.push((m, d, c.p, c.q, r, predicted, fitted));
                rows.push(json!({"m": m, "d": d, "r": r, "predicted": num(predicted), "fitted": num(fitted)}));
            }
        }
    }
    out.write("criticality.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["m", "d", "p", "q", "r", "predicted", "fitted"])?;
        for l in &lines {
            csv.serialize(l)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    let max_err = lines.iter().map(|l| (l.6 - l.5).abs()).fold(0.0, f64::max);
    let result = json!({"experiment": "criticality-scan", "rows": rows, "max_abs_error": num(max_err)});
    out.write_json("result.json", &result)
}
