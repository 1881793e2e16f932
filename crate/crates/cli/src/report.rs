//! Aggregates a finished run directory into `summary.json` and plot series.

use std::fs::{self, File};
use std::path::Path;

use serde_json::{json, Value};
use skeld::io::write_series;

use crate::error::CliError;
use crate::experiments::RunDir;

/// Plot series `(source file, x column, y column, output name)`.
const SERIES: &[(&str, &str, &str, &str)] = &[
    ("diagnostics.csv", "t", "mass", "plot_mass.csv"),
    ("diagnostics.csv", "t", "entropy", "plot_entropy.csv"),
    ("diagnostics.csv", "t", "dissipation_cum", "plot_dissipation.csv"),
    ("contraction.csv", "t", "l1_distance", "plot_contraction.csv"),
    ("history.csv", "iteration", "objective", "plot_objective.csv"),
    ("gamma.csv", "K", "J_etaK", "plot_gamma_J.csv"),
    ("gamma.csv", "K", "l1_dist", "plot_gamma_l1.csv"),
    ("probability.csv", "epsilon", "neg_eps_log_p", "plot_ldp.csv"),
    ("probability.csv", "epsilon", "p_hat", "plot_p_hat.csv"),
];

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|_| CliError::MissingArtifact(path.display().to_string()))?;
    serde_json::from_str(&text).map_err(|e| CliError::MissingArtifact(format!("{}: {e}", path.display())))
}

fn series(path: &Path, x: &str, y: &str) -> Result<Vec<(f64, f64)>, CliError> {
    let broken = |e: &dyn std::fmt::Display| CliError::MissingArtifact(format!("{}: {e}", path.display()));
    let mut rd = csv::Reader::from_path(path).map_err(|e| broken(&e))?;
    let headers = rd.headers().map_err(|e| broken(&e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| broken(&format!("no column `{name}`")));
    let (ix, iy) = (col(x)?, col(y)?);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| broken(&e))?;
        if let (Ok(a), Ok(b)) = (rec[ix].parse::<f64>(), rec[iy].parse::<f64>()) {
            if a.is_finite() && b.is_finite() {
                out.push((a, b));
            }
        }
    }
    Ok(out)
}

fn flag(result: &Value, path: &[&str]) -> Value {
    let mut v = result;
    for k in path {
        match v.get(k) {
            Some(x) => v = x,
            None => return Value::Null,
        }
    }
    v.clone()
}

pub fn report(dir: &Path) -> Result<Value, CliError> {
    let manifest = read_json(&dir.join("manifest.json"))?;
    let files: Vec<String> = manifest["files"]
        .as_array()
        .ok_or_else(|| CliError::MissingArtifact("manifest.json lists no files".into()))?
        .iter()
        .filter_map(|v| v.as_str().map(str::to_string))
        .collect();
    for f in &files {
        if !dir.join(f).is_file() {
            return Err(CliError::MissingArtifact(dir.join(f).display().to_string()));
        }
    }
    if manifest["status"] != "ok" {
        return Err(CliError::MissingArtifact(format!("run in {} did not complete", dir.display())));
    }
    let result = read_json(&dir.join("result.json"))?;
    let mut out = RunDir::create(dir)?;
    let mut plots = Vec::new();
    for (src, x, y, name) in SERIES {
        if files.iter().any(|f| f == src) {
            let pts = series(&dir.join(src), x, y)?;
            out.write(name, |w| write_series(w, x, y, &pts))?;
            plots.push(name.to_string());
        }
    }
    let table = if files.iter().any(|f| f == "probability.csv") { flag(&result, &["table"]) } else { Value::Null };
    let summary = json!({
        "experiment": manifest["experiment"],
        "entropy_margin": flag(&result, &["entropy", "margin"]),
        "entropy_margin_ok": flag(&result, &["entropy", "ok"]),
        "mass_drift_per_step": flag(&result, &["mass_drift_per_step"]),
        "mass_ok": flag(&result, &["mass_ok"]),
        "contraction_ok": flag(&result, &["contraction", "ok"]),
        "J": flag(&result, &["J"]),
        "feasible": flag(&result, &["feasible"]),
        "monotone_J": flag(&result, &["monotone_J"]),
        "l1_strictly_decreasing": flag(&result, &["l1_strictly_decreasing"]),
        "mc_table": table,
        "plots": plots,
        "result": result,
    });
    out.write_json("summary.json", &summary)?;
    Ok(summary)
}

/// Writes the manifest that `report` later checks.
pub fn write_manifest(dir: &Path, experiment: &str, status: &str, files: &[String]) -> Result<(), CliError> {
    let v = json!({"experiment": experiment, "status": status, "files": files});
    let f = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &v).map_err(std::io::Error::from)?;
    Ok(())
}
