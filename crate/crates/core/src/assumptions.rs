//! Sample-based certification of the structural assumptions on `Phi`.
//!
//! Every check estimates an essential supremum over quasi-random samples (plus
//! the knots of a tabulated `Phi` and their `delta`-neighbours) at a sequence of
//! scales, divides by the admissible growth (`delta`, `M`, or a constant) and
//! asks whether the resulting quotients stay bounded. The constant `c` is fitted
//! on the coarse half of the scale sequence; the check passes when no quotient
//! exceeds `1.05 c`. Sampling cannot prove a bound, so a pass is evidence, not a
//! certificate.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nonlinearity::NonlinearitySpec;
use crate::quadrature::gauss_legendre8;

/// Tolerance on the quotient between the empirical sup and the fitted bound.
pub const FIT_TOLERANCE: f64 = 1.05;

/// Relative chord deviation below which `Phi^{1/2}` counts as straight.
const SHAPE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
}

/// A pair of arguments at which a sampled supremum was attained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub xi: f64,
    pub xi_prime: f64,
    pub value: f64,
}

/// Outcome of a single assumption check.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub status: Status,
    /// Which alternative of a two-branch assumption was checked.
    pub branch: Option<&'static str>,
    pub fitted_constant: Option<f64>,
    /// Scale parameter of each sampled supremum (`delta`, `M` or the sampled range).
    pub scales: Vec<f64>,
    pub sups: Vec<f64>,
    /// `sups` divided by the admissible growth at each scale.
    pub quotients: Vec<f64>,
    /// For failures, the worst offender; for passes, where the largest quotient was seen.
    pub witness: Witness,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub m_level: f64,
    pub delta_grid: Vec<f64>,
    pub sample_count: usize,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status == Status::Pass)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Copy, Debug)]
struct Sup {
    value: f64,
    xi: f64,
    xi_prime: f64,
}

impl Sup {
    fn new() -> Self {
        Self { value: f64::NEG_INFINITY, xi: f64::NAN, xi_prime: f64::NAN }
    }

    fn offer(&mut self, value: f64, xi: f64, xi_prime: f64) {
        let v = if value.is_nan() { f64::INFINITY } else { value };
        if v > self.value {
            *self = Self { value: v, xi, xi_prime };
        }
    }
}

/// Quasi-random points in `[lo, hi]`: half from a Kronecker sequence, half
/// log-uniform so the neighbourhood of the lower end is resolved.
fn samples(lo: f64, hi: f64, count: usize, extra: &[f64]) -> Vec<f64> {
    const ALPHA: f64 = 0.618_033_988_749_894_9;
    let mut out = Vec::with_capacity(count + extra.len() + 2);
    out.push(lo);
    out.push(hi);
    let half = count / 2;
    let log_lo = if lo > 0.0 { lo } else { hi * 1e-9 };
    for i in 0..count {
        let u = (0.5 + i as f64 * ALPHA).fract();
        let x = if i < half {
            lo + (hi - lo) * u
        } else {
            log_lo * (hi / log_lo).powf(u)
        };
        out.push(x);
    }
    out.extend(extra.iter().copied().filter(|x| (lo..=hi).contains(x)));
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.dedup();
    out
}

/// Knots of a table together with points just beside them.
fn knot_points(spec: &NonlinearitySpec, offsets: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for &k in spec.knots() {
        out.push(k);
        for &o in offsets {
            out.push(k - o);
            out.push(k + o);
        }
    }
    out
}

/// Fit `c` on the coarse half of the scale sequence and judge boundedness.
fn verdict(
    name: &'static str,
    branch: Option<&'static str>,
    scales: Vec<f64>,
    sups: Vec<Sup>,
    growth: impl Fn(f64) -> f64,
) -> AssumptionCheck {
    let quotients: Vec<f64> = scales
        .iter()
        .zip(&sups)
        .map(|(&s, sup)| sup.value.max(0.0) / growth(s))
        .collect();
    let coarse = quotients.len().div_ceil(2);
    let c = quotients[..coarse].iter().copied().fold(0.0, f64::max);
    let finite = quotients.iter().all(|q| q.is_finite());
    let pass = finite && quotients.iter().all(|&q| q <= FIT_TOLERANCE * c);
    // worst quotient relative to the fitted constant
    let worst = quotients
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let s = sups[worst];
    AssumptionCheck {
        name,
        status: if pass { Status::Pass } else { Status::Fail },
        branch,
        fitted_constant: if finite { Some(c) } else { None },
        scales,
        sups: sups.iter().map(|s| s.value).collect(),
        quotients,
        witness: Witness { xi: s.xi, xi_prime: s.xi_prime, value: s.value },
    }
}

fn failed(name: &'static str, branch: Option<&'static str>, sup: Sup) -> AssumptionCheck {
    AssumptionCheck {
        name,
        status: Status::Fail,
        branch,
        fitted_constant: None,
        scales: Vec::new(),
        sups: vec![sup.value],
        quotients: Vec::new(),
        witness: Witness { xi: sup.xi, xi_prime: sup.xi_prime, value: sup.value },
    }
}

/// Sampled certification of the assumptions on `Phi`.
///
/// `m_level` is the range parameter `M > 1`, `delta_grid` a descending list of
/// moduli in `(0, 1)` and `sample_count` the number of quasi-random base points
/// per scale (at least 1000).
pub fn check_assumptions(
    spec: &NonlinearitySpec,
    m_level: f64,
    delta_grid: &[f64],
    sample_count: usize,
) -> Result<AssumptionReport> {
    if !(m_level > 1.0 && m_level.is_finite()) {
        return Err(Error::InvalidArgument(format!("M = {m_level} must exceed 1")));
    }
    if delta_grid.len() < 2 {
        return Err(Error::InvalidArgument("delta grid needs at least two entries".into()));
    }
    if delta_grid.iter().any(|&d| !(d > 0.0 && d < 1.0)) || delta_grid.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::InvalidArgument(
            "delta grid must be strictly descending inside (0, 1)".into(),
        ));
    }
    if sample_count < 1000 {
        return Err(Error::InvalidArgument(format!("sample_count = {sample_count} is below 1000")));
    }
    if spec.range_max() < m_level {
        return Err(Error::InvalidArgument(format!(
            "M = {m_level} exceeds the tabulated range {}",
            spec.range_max()
        )));
    }
    certify_monotone(spec, sample_count)?;

    let ctx = Ctx { spec, m: m_level, n: sample_count };
    let checks = vec![
        ctx.phi_zero(),
        ctx.sqrt_phi_modulus(delta_grid),
        ctx.sqrt_dphi_modulus(delta_grid),
        ctx.mixed_ratio_growth(),
        ctx.phi_over_dphi_growth(),
        ctx.velocity_cutoff(),
        ctx.entropy_lower_bound(),
        ctx.interpolation_inequality(),
        ctx.weak_ldp_derivative_bounds(),
        ctx.weak_ldp_integrability(),
    ];
    Ok(AssumptionReport {
        m_level,
        delta_grid: delta_grid.to_vec(),
        sample_count,
        checks,
    })
}

fn certify_monotone(spec: &NonlinearitySpec, count: usize) -> Result<()> {
    let top = spec.range_max().min(1e3);
    let xs = samples(0.0, top, count, spec.knots());
    for w in xs.windows(2) {
        if !(spec.phi_raw(w[1]) > spec.phi_raw(w[0])) {
            return Err(Error::InvalidNonlinearity(format!(
                "Phi is not strictly increasing between {} and {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

struct Ctx<'a> {
    spec: &'a NonlinearitySpec,
    m: f64,
    n: usize,
}

impl Ctx<'_> {
    fn phi(&self, x: f64) -> f64 {
        self.spec.phi_raw(x)
    }

    fn dphi(&self, x: f64) -> f64 {
        self.spec.dphi_raw(x)
    }

    fn sqrt_phi(&self, x: f64) -> f64 {
        self.spec.sqrt_phi_raw(x)
    }

    /// Growing ranges `[.., M 10^j]`, truncated to the sampled range of a table.
    fn ranges(&self) -> Vec<f64> {
        let top = self.spec.range_max();
        let mut out: Vec<f64> = (0..4).map(|j| self.m * 10f64.powi(j)).filter(|&x| x <= top).collect();
        if out.len() < 4 {
            // a table: refine the available range instead
            out = (0..4).map(|j| self.m + (top - self.m) * j as f64 / 3.0).collect();
            out.dedup();
        }
        out
    }

    /// Sup over `|xi - xi'| < delta`, both in `[1/M, M]`, of `f(xi, xi')`.
    fn pair_sup(&self, delta: f64, f: impl Fn(f64, f64) -> f64) -> Sup {
        let (lo, hi) = (1.0 / self.m, self.m);
        let extra = knot_points(self.spec, &[delta, 0.5 * delta, 1e-9]);
        let xs = samples(lo, hi, self.n, &extra);
        let reach = delta * (1.0 - 1e-9);
        let mut sup = Sup::new();
        for &x in &xs {
            for step in [-reach, -0.5 * reach, 0.5 * reach, reach] {
                let y = x + step;
                if (lo..=hi).contains(&y) {
                    sup.offer(f(x, y), x, y);
                }
            }
        }
        sup
    }

    fn phi_zero(&self) -> AssumptionCheck {
        let v = self.phi(0.0);
        let sup = Sup { value: v.abs(), xi: 0.0, xi_prime: 0.0 };
        if v == 0.0 {
            AssumptionCheck {
                name: "phi_vanishes_at_zero",
                status: Status::Pass,
                branch: None,
                fitted_constant: None,
                scales: Vec::new(),
                sups: vec![0.0],
                quotients: Vec::new(),
                witness: Witness { xi: 0.0, xi_prime: 0.0, value: 0.0 },
            }
        } else {
            failed("phi_vanishes_at_zero", None, sup)
        }
    }

    fn sqrt_phi_modulus(&self, deltas: &[f64]) -> AssumptionCheck {
        let sups = deltas
            .iter()
            .map(|&d| {
                self.pair_sup(d, |x, y| {
                    let s = self.sqrt_phi(x);
                    (s / self.dphi(x) * (s - self.sqrt_phi(y))).abs()
                })
            })
            .collect();
        verdict("sqrt_phi_modulus", None, deltas.to_vec(), sups, |d| d)
    }

    fn sqrt_dphi_modulus(&self, deltas: &[f64]) -> AssumptionCheck {
        let sups = deltas
            .iter()
            .map(|&d| {
                self.pair_sup(d, |x, y| {
                    let (dx, dy) = (self.dphi(x), self.dphi(y));
                    let diff = dx.sqrt() - dy.sqrt();
                    (self.sqrt_phi(x) * self.sqrt_phi(y) / (dx * dy) * diff * diff).abs()
                })
            })
            .collect();
        verdict("sqrt_dphi_modulus", None, deltas.to_vec(), sups, |d| d)
    }

    fn m_grid(&self) -> Vec<f64> {
        let top = self.spec.range_max();
        let grid: Vec<f64> = (0..4).map(|j| self.m * 2f64.powi(j)).filter(|&x| x <= top).collect();
        if grid.len() >= 2 {
            grid
        } else {
            vec![self.m * 0.5 + 0.5, self.m]
        }
    }

    fn mixed_ratio_growth(&self) -> AssumptionCheck {
        let grid = self.m_grid();
        let sups = grid
            .iter()
            .map(|&mm| {
                let sub = Ctx { spec: self.spec, m: mm, n: self.n };
                sub.pair_sup(0.5 / mm, |x, y| (self.sqrt_phi(x) * self.sqrt_phi(y) / self.dphi(x)).abs())
            })
            .collect();
        verdict("mixed_ratio_growth", None, grid, sups, |m| m)
    }

    fn phi_over_dphi_growth(&self) -> AssumptionCheck {
        let grid = self.m_grid();
        let sups = grid
            .iter()
            .map(|&mm| {
                let mut sup = Sup::new();
                for x in samples(0.0, mm, self.n, &knot_points(self.spec, &[1e-9])) {
                    if x > 0.0 {
                        sup.offer((self.phi(x) / self.dphi(x)).abs(), x, x);
                    }
                }
                sup
            })
            .collect();
        verdict("phi_over_dphi_growth", None, grid, sups, |m| m)
    }

    /// Concavity (`Some(true)`), convexity (`Some(false)`) of `Phi^{1/2}`, or a
    /// pair of points where the second differences disagree in sign.
    fn sqrt_phi_shape(&self) -> std::result::Result<bool, Sup> {
        let top = *self.ranges().last().unwrap();
        let xs = samples(0.0, top, self.n, &knot_points(self.spec, &[1e-6]));
        let (mut concave, mut convex) = (None, None);
        for w in xs.windows(3) {
            let (a, b, c) = (w[0], w[1], w[2]);
            let (fa, fb, fc) = (self.sqrt_phi(a), self.sqrt_phi(b), self.sqrt_phi(c));
            // deviation of the middle value from the chord, relative to the value
            let chord = ((c - b) * fa + (b - a) * fc) / (c - a);
            let second = chord - fb;
            let scale = SHAPE_TOLERANCE * fb.abs().max(1e-300);
            if second > scale {
                convex.get_or_insert(b);
            } else if second < -scale {
                concave.get_or_insert(b);
            }
        }
        match (concave, convex) {
            (Some(x), Some(y)) => Err(Sup { value: f64::INFINITY, xi: x, xi_prime: y }),
            (None, Some(_)) => Ok(false),
            _ => Ok(true),
        }
    }

    fn velocity_cutoff(&self) -> AssumptionCheck {
        let ranges = self.ranges();
        match self.sqrt_phi_shape() {
            Err(sup) => failed("velocity_cutoff", Some("neither concave nor convex"), sup),
            Ok(true) => {
                // (Phi^{1/2}/Phi')^2 <= c (xi + 1)
                let sups = ranges
                    .iter()
                    .map(|&top| {
                        let mut sup = Sup::new();
                        for x in samples(0.0, top, self.n, &knot_points(self.spec, &[1e-9])) {
                            let d = self.dphi(x);
                            let r = if x == 0.0 && d == 0.0 { 0.0 } else { self.sqrt_phi(x) / d };
                            sup.offer(r * r / (x + 1.0), x, x);
                        }
                        sup
                    })
                    .collect();
                verdict("velocity_cutoff", Some("concave"), ranges, sups, |_| 1.0)
            }
            Ok(false) => {
                let floor = 1.0 / self.m;
                let sups = ranges
                    .iter()
                    .map(|&top| {
                        let mut sup = Sup::new();
                        for x in samples(floor, top, self.n, &knot_points(self.spec, &[1e-9])) {
                            sup.offer(self.sqrt_phi(x) / self.dphi(x), x, x);
                            if x >= 1.0 && x + 1.0 <= self.spec.range_max() {
                                sup.offer(self.phi(x + 1.0) / self.phi(x), x, x + 1.0);
                            }
                        }
                        sup
                    })
                    .collect();
                verdict("velocity_cutoff", Some("convex"), ranges, sups, |_| 1.0)
            }
        }
    }

    /// `(x, Psi(x))` along sorted points, integrating `log Phi` piecewise.
    fn cumulative(&self, xs: &[f64], f: impl Fn(f64) -> f64, singular_at_zero: bool) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(xs.len());
        let mut prev = 0.0;
        for &x in xs {
            if x > prev {
                acc += if prev == 0.0 && singular_at_zero {
                    // x = t^2 removes the logarithmic singularity
                    gauss_legendre8(0.0, x.sqrt(), |t| 2.0 * t * f(t * t))
                } else {
                    gauss_legendre8(prev, x, &f)
                };
                prev = x;
            }
            out.push(acc);
        }
        out
    }

    fn entropy_lower_bound(&self) -> AssumptionCheck {
        let ranges = self.ranges();
        let sups = ranges
            .iter()
            .map(|&top| {
                let xs = samples(0.0, top, self.n, self.spec.knots());
                let psi: Vec<f64> = match self.spec.exponent() {
                    Some(_) => xs.iter().map(|&x| self.spec.entropy_density_raw(x)).collect(),
                    None => self.cumulative(&xs, |x| self.phi(x).ln(), true),
                };
                let mut sup = Sup::new();
                for (&x, &p) in xs.iter().zip(&psi) {
                    sup.offer(-p, x, x);
                }
                sup
            })
            .collect();
        verdict("entropy_lower_bound", None, ranges, sups, |_| 1.0)
    }

    /// `||Phi^{1/2}(rho)||_2 <= c (||grad Phi^{1/2}(rho)||_2 + ||rho||_1^{c2})` over
    /// scaled bumps `rho = a b((x - 1/2)/s)` on the unit circle. The witness pair
    /// is `(a, s)`.
    fn interpolation_inequality(&self) -> AssumptionCheck {
        let c2 = 0.5 * self.growth_exponent();
        let amplitudes = self.ranges();
        let widths = [1.0, 0.5, 0.25, 0.125, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
        let cells = 4096;
        let h = 1.0 / cells as f64;
        let sups = amplitudes
            .iter()
            .map(|&a| {
                let mut sup = Sup::new();
                for &s in &widths {
                    let (mut l2, mut grad, mut l1) = (0.0, 0.0, 0.0);
                    let mut prev = None;
                    let mut first = 0.0;
                    for i in 0..cells {
                        let x = (i as f64 + 0.5) * h;
                        let z = (x - 0.5) / s;
                        let b = if z.abs() < 0.5 { (std::f64::consts::PI * z).cos().powi(2) } else { 0.0 };
                        let rho = a * b;
                        let sp = self.sqrt_phi(rho);
                        l1 += rho * h;
                        l2 += sp * sp * h;
                        if let Some(p) = prev {
                            let g: f64 = (sp - p) / h;
                            grad += g * g * h;
                        } else {
                            first = sp;
                        }
                        prev = Some(sp);
                    }
                    let g = (first - prev.unwrap()) / h;
                    grad += g * g * h;
                    let q = l2.sqrt() / (grad.sqrt() + l1.powf(c2));
                    sup.offer(q, a, s);
                }
                sup
            })
            .collect();
        verdict("interpolation_inequality", None, amplitudes, sups, |_| 1.0)
    }

    /// Largest local exponent `x Phi'(x) / Phi(x)` seen on `(0, M]`.
    fn growth_exponent(&self) -> f64 {
        if let Some(m) = self.spec.exponent() {
            return m;
        }
        samples(1e-3, self.m, self.n, self.spec.knots())
            .into_iter()
            .map(|x| x * self.dphi(x) / self.phi(x))
            .fold(0.0, f64::max)
    }

    fn theta_sqrt_dphi(&self, xs: &[f64]) -> Vec<f64> {
        match self.spec.exponent() {
            Some(m) => xs.iter().map(|&x| 2.0 * m.sqrt() / (m + 1.0) * x.powf(0.5 * (m + 1.0))).collect(),
            None => self.cumulative(xs, |x| self.dphi(x).max(0.0).sqrt(), false),
        }
    }

    fn weak_ldp_derivative_bounds(&self) -> AssumptionCheck {
        let d0 = self.dphi(0.0);
        if !d0.is_finite() {
            return failed(
                "weak_ldp_derivative_bounds",
                None,
                Sup { value: f64::INFINITY, xi: 0.0, xi_prime: 0.0 },
            );
        }
        let p = self.growth_exponent().max(2.0);
        let ranges = self.ranges();
        let sups = ranges
            .iter()
            .map(|&top| {
                let mut sup = Sup::new();
                sup.offer(d0.sqrt(), 0.0, 0.0);
                let xs = samples(0.0, top, self.n / 4, self.spec.knots());
                let theta = self.theta_sqrt_dphi(&xs);
                for (i, &x) in xs.iter().enumerate() {
                    if x >= 1.0 {
                        sup.offer(1.0 / self.dphi(x).sqrt(), x, x);
                    }
                    // pair against a thinned set of partners
                    for j in (0..i).step_by(1 + xs.len() / 200) {
                        let y = xs[j];
                        let dtheta = (theta[i] - theta[j]).abs();
                        let gap = x - y;
                        let need = if x.max(y) >= 1.0 { gap } else { gap.powf(0.5 * (p + 1.0)) };
                        sup.offer(need / dtheta, x, y);
                    }
                }
                sup
            })
            .collect();
        verdict("weak_ldp_derivative_bounds", None, ranges, sups, |_| 1.0)
    }

    fn weak_ldp_integrability(&self) -> AssumptionCheck {
        let ranges = self.ranges();
        let bounded: Vec<Sup> = ranges
            .iter()
            .map(|&top| {
                let mut sup = Sup::new();
                for x in samples(0.0, top, self.n, self.spec.knots()) {
                    sup.offer(self.dphi(x), x, x);
                }
                sup
            })
            .collect();
        let first = verdict("weak_ldp_integrability", Some("bounded derivative"), ranges.clone(), bounded, |_| 1.0);
        if first.status == Status::Pass {
            return first;
        }
        // int (Phi'(rho) + Theta_Phi(rho)) <= c (int Phi(rho))^theta over two-level densities
        let m_eff = self.growth_exponent();
        let theta_exp = (m_eff - 1.0) / m_eff;
        let fractions = [1.0, 0.5, 0.1, 0.01];
        let d0 = self.dphi(0.0);
        let sups = ranges
            .iter()
            .map(|&top| {
                let xs = samples(1e-3, top, self.n, self.spec.knots());
                let theta: Vec<f64> = match self.spec.exponent() {
                    Some(m) => xs.iter().map(|&x| m * m / (m - 1.0) * x.powf(m - 1.0)).collect(),
                    None => {
                        let base = self.spec.theta(crate::nonlinearity::ThetaFunction::Phi, xs[0]).unwrap_or(f64::INFINITY);
                        self.cumulative(&xs, |x| self.dphi(x).powi(2) / self.phi(x), false)
                            .into_iter()
                            .map(|v| v + base)
                            .collect()
                    }
                };
                let mut sup = Sup::new();
                for (&x, &t) in xs.iter().zip(&theta) {
                    for &a in &fractions {
                        let lhs = a * (self.dphi(x) + t) + (1.0 - a) * d0;
                        let rhs = (a * self.phi(x)).powf(theta_exp);
                        sup.offer(lhs / rhs, x, a);
                    }
                }
                sup
            })
            .collect();
        verdict("weak_ldp_integrability", Some("power bound"), ranges, sups, |_| 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deltas() -> Vec<f64> {
        vec![0.5, 0.25, 0.1, 0.05, 0.025, 0.01]
    }

    #[test]
    fn power_laws_pass_everything() {
        for m in [1.0, 2.0, 3.0] {
            let spec = NonlinearitySpec::power(m).unwrap();
            let r = check_assumptions(&spec, 10.0, &deltas(), 2000).unwrap();
            for c in &r.checks {
                assert_eq!(c.status, Status::Pass, "m={m}: {c:?}");
                if let Some(k) = c.fitted_constant {
                    assert!(k.is_finite());
                }
            }
        }
    }

    #[test]
    fn phi_over_dphi_sup_for_linear_phi() {
        let spec = NonlinearitySpec::power(1.0).unwrap();
        let r = check_assumptions(&spec, 10.0, &deltas(), 1000).unwrap();
        let c = r.check("phi_over_dphi_growth").unwrap();
        assert_eq!(c.scales[0], 10.0);
        assert!((c.sups[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn branches_follow_the_shape_of_sqrt_phi() {
        let r = |m| check_assumptions(&NonlinearitySpec::power(m).unwrap(), 10.0, &deltas(), 1000).unwrap();
        assert_eq!(r(1.0).check("velocity_cutoff").unwrap().branch, Some("concave"));
        assert_eq!(r(3.0).check("velocity_cutoff").unwrap().branch, Some("convex"));
        assert_eq!(r(1.0).check("weak_ldp_integrability").unwrap().branch, Some("bounded derivative"));
        assert_eq!(r(3.0).check("weak_ldp_integrability").unwrap().branch, Some("power bound"));
    }

    #[test]
    fn near_step_table_fails_with_straddling_witness() {
        let spec = NonlinearitySpec::table(vec![[0.0, 0.0], [1.0, 1.0], [1.0 + 1e-6, 4.0], [20.0, 5.0]]).unwrap();
        let r = check_assumptions(&spec, 10.0, &deltas(), 1000).unwrap();
        let c = r.check("sqrt_phi_modulus").unwrap();
        assert_eq!(c.status, Status::Fail);
        let (a, b) = (c.witness.xi.min(c.witness.xi_prime), c.witness.xi.max(c.witness.xi_prime));
        assert!(a <= 1.0 && b >= 1.0 + 1e-6, "{:?}", c.witness);
    }

    #[test]
    fn argument_validation() {
        let spec = NonlinearitySpec::power(2.0).unwrap();
        assert!(check_assumptions(&spec, 0.5, &deltas(), 1000).is_err());
        assert!(check_assumptions(&spec, 10.0, &[0.01, 0.5], 1000).is_err());
        assert!(check_assumptions(&spec, 10.0, &deltas(), 10).is_err());
    }

    #[test]
    fn json_keys_are_in_declaration_order() {
        let spec = NonlinearitySpec::power(2.0).unwrap();
        let json = check_assumptions(&spec, 10.0, &deltas(), 1000).unwrap().to_json();
        let a = json.find("\"m_level\"").unwrap();
        let b = json.find("\"delta_grid\"").unwrap();
        let c = json.find("\"checks\"").unwrap();
        assert!(a < b && b < c);
    }
}
