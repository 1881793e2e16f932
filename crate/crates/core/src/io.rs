//! CSV formats for fields, diagnostics, ensembles, sweeps and spectral controls.
//!
//! Every file has a header row; fields additionally carry a leading
//! `# SKELD v1 d=<d> n=<n> t=<time>` line.

use std::io::{BufRead, BufReader, Read, Write};

use crate::basis::{ControlField, SpectralBasis};
use crate::error::{Error, Result};
use crate::grid::{Field, Grid};
use crate::rate::GammaRow;
use crate::solver::NodeDiagnostics;
use crate::spde::{ProbabilityRow, ReplicaRecord};

const MAGIC: &str = "# SKELD v1";

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

/// Writes one field snapshot, one row per cell in row-major order.
pub fn write_field<W: Write>(mut w: W, field: &Field, t: f64) -> Result<()> {
    let g = field.grid();
    writeln!(w, "{MAGIC} d={} n={} t={t:?}", g.d(), g.n())?;
    let mut csv = csv::Writer::from_writer(w);
    if g.d() == 1 {
        csv.write_record(["i", "value"])?;
        for (i, v) in field.values().iter().enumerate() {
            csv.serialize((i, v))?;
        }
    } else {
        csv.write_record(["i", "j", "value"])?;
        for (c, v) in field.values().iter().enumerate() {
            let [i, j] = g.multi_index(c);
            csv.serialize((i, j, v))?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Reads a field snapshot and its time.
pub fn read_field<R: Read>(r: R) -> Result<(Field, f64)> {
    let mut r = BufReader::new(r);
    let mut first = String::new();
    r.read_line(&mut first)?;
    let rest = first
        .trim_end()
        .strip_prefix(MAGIC)
        .ok_or_else(|| parse_err(format!("missing `{MAGIC}` header")))?;
    let (mut d, mut n, mut t) = (None, None, None);
    for tok in rest.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| parse_err(format!("bad header token `{tok}`")))?;
        let bad = || parse_err(format!("bad header value `{tok}`"));
        match k {
            "d" => d = Some(v.parse::<usize>().map_err(|_| bad())?),
            "n" => n = Some(v.parse::<usize>().map_err(|_| bad())?),
            "t" => t = Some(v.parse::<f64>().map_err(|_| bad())?),
            _ => return Err(parse_err(format!("unknown header key `{k}`"))),
        }
    }
    let (Some(d), Some(n), Some(t)) = (d, n, t) else {
        return Err(parse_err("header needs d, n and t"));
    };
    let grid = Grid::new(d, n)?;
    let mut values = vec![f64::NAN; grid.cells()];
    let mut seen = vec![false; grid.cells()];
    let mut csv = csv::Reader::from_reader(r);
    for rec in csv.records() {
        let rec = rec?;
        if rec.len() != d + 1 {
            return Err(parse_err(format!("expected {} columns, found {}", d + 1, rec.len())));
        }
        let idx = |k: usize| -> Result<usize> {
            let v: usize = rec[k].trim().parse().map_err(|_| parse_err(format!("bad index `{}`", &rec[k])))?;
            if v >= n {
                return Err(parse_err(format!("index {v} outside 0..{n}")));
            }
            Ok(v)
        };
        let c = if d == 1 { idx(0)? } else { grid.index(idx(0)?, idx(1)?) };
        let v: f64 = rec[d].trim().parse().map_err(|_| parse_err(format!("bad value `{}`", &rec[d])))?;
        if seen[c] {
            return Err(parse_err(format!("cell {c} listed twice")));
        }
        seen[c] = true;
        values[c] = v;
    }
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(parse_err(format!("cell {c} is missing")));
    }
    Ok((Field::new(grid, values)?, t))
}

pub fn write_diagnostics<W: Write>(w: W, nodes: &[NodeDiagnostics]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for n in nodes {
        csv.serialize(n)?;
    }
    if nodes.is_empty() {
        csv.write_record(["t", "mass", "entropy", "dissipation_cum", "control_energy_cum", "dt", "substeps"])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_ensemble<W: Write>(w: W, records: &[ReplicaRecord]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["epsilon", "replica", "event_hit", "l1_deviation", "rejected"])?;
    for r in records {
        csv.serialize((r.epsilon, r.replica, r.event_hit as u8, r.l1_deviation, r.rejected as u8))?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_probability_table<W: Write>(w: W, rows: &[ProbabilityRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["epsilon", "trials", "hits", "rejected", "p_hat", "stderr", "upper_bound", "neg_eps_log_p"])?;
    for r in rows {
        csv.serialize((r.epsilon, r.trials, r.hits, r.rejected, r.p_hat, r.stderr, r.upper_bound, r.neg_eps_log_p))?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_gamma<W: Write>(w: W, rows: &[GammaRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["K", "eta", "J_etaK", "J_ref", "l1_dist"])?;
    for r in rows {
        csv.serialize((r.k, r.eta, r.j_eta_k, r.j_ref, r.l1_dist))?;
    }
    csv.flush()?;
    Ok(())
}

/// Two-column series for plotting.
pub fn write_series<W: Write>(w: W, x_name: &str, y_name: &str, points: &[(f64, f64)]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record([x_name, y_name])?;
    for p in points {
        csv.serialize(p)?;
    }
    csv.flush()?;
    Ok(())
}

/// Rows `(t_j, k, coefficient)` with 1-based `k`; grid controls are rejected.
pub fn write_spectral_control<W: Write>(w: W, g: &ControlField) -> Result<()> {
    let coeffs = g
        .coefficients()
        .ok_or_else(|| Error::InvalidArgument("only spectral controls have a coefficient file".into()))?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["t", "k", "coefficient"])?;
    for (t, c) in g.times().iter().zip(coeffs) {
        for (k, v) in c.iter().enumerate() {
            csv.serialize((t, k + 1, v))?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Reads a coefficient file; slice `j` lasts until the next listed time or `t_end`.
/// Modes not listed for a time are zero.
pub fn read_spectral_control<R: Read>(r: R, grid: Grid, t_end: f64) -> Result<ControlField> {
    let mut csv = csv::Reader::from_reader(r);
    let mut rows: Vec<(f64, usize, f64)> = Vec::new();
    for rec in csv.deserialize() {
        let (t, k, c): (f64, usize, f64) = rec?;
        if k == 0 {
            return Err(parse_err("mode indices start at 1"));
        }
        if !t.is_finite() || !c.is_finite() {
            return Err(parse_err(format!("non-finite entry at t = {t}, k = {k}")));
        }
        rows.push((t, k, c));
    }
    if rows.is_empty() {
        return Err(parse_err("empty control file"));
    }
    let kmax = rows.iter().map(|r| r.1).max().unwrap_or(1);
    let mut times: Vec<f64> = Vec::new();
    let mut coeffs: Vec<Vec<f64>> = Vec::new();
    for (t, k, c) in rows {
        if times.last() != Some(&t) {
            if times.last().is_some_and(|&l| t < l) {
                return Err(parse_err("control times must be nondecreasing"));
            }
            times.push(t);
            coeffs.push(vec![0.0; kmax]);
        }
        coeffs.last_mut().unwrap()[k - 1] = c;
    }
    if times[0] != 0.0 {
        return Err(parse_err("the first control time must be 0"));
    }
    if !(t_end > *times.last().unwrap()) {
        return Err(parse_err(format!("control times must end before t_end = {t_end}")));
    }
    times.push(t_end);
    ControlField::spectral(SpectralBasis::shared(grid, kmax)?, times, coeffs)
}
