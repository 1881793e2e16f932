//! The nonlinearity `Phi` and the scalar functions derived from it.
//!
//! A [`NonlinearitySpec`] is either a power law `Phi(x) = x^m` or a monotone
//! table interpolated by a shape-preserving cubic. Everything the solvers need
//! (`Phi`, `Phi'`, `Phi^{1/2}`, the entropy density `Psi_Phi`, the truncation
//! `Phi_n`, the `Theta` functions and the defect coefficient) is derived here.
//!
//! [`RegularizedSqrtPhi`] builds the smooth, bounded flux `Phi^{1/2,eta}`:
//! `Phi^{1/2}` is capped at `Phi(1/eta)` and averaged against a cubic B-spline
//! kernel supported on `(-eps, 0)`, so only values to the left of `x` enter and
//! the regularized flux vanishes at the origin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::MonotoneCubic;
use crate::quadrature::{gauss_legendre8, integrate_adaptive};

/// Serialized form: `{"kind":"power","m":2.0}` or `{"kind":"table","points":[[x,phi],...]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NonlinearityConfig {
    Power { m: f64 },
    Table { points: Vec<[f64; 2]> },
}

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Power(f64),
    Table(MonotoneCubic),
}

/// A validated nonlinearity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NonlinearityConfig", into = "NonlinearityConfig")]
pub struct NonlinearitySpec {
    kind: Kind,
    config: NonlinearityConfig,
}

impl TryFrom<NonlinearityConfig> for NonlinearitySpec {
    type Error = Error;

    fn try_from(config: NonlinearityConfig) -> Result<Self> {
        let kind = match &config {
            NonlinearityConfig::Power { m } => {
                if !(m.is_finite() && *m > 0.0) {
                    return Err(Error::InvalidNonlinearity(format!("exponent m = {m} must be positive")));
                }
                Kind::Power(*m)
            }
            NonlinearityConfig::Table { points } => {
                let first = points.first().ok_or_else(|| Error::InvalidNonlinearity("empty table".into()))?;
                if first[0] != 0.0 || first[1] != 0.0 {
                    return Err(Error::InvalidNonlinearity("table must start at (0, 0)".into()));
                }
                Kind::Table(MonotoneCubic::new(points)?)
            }
        };
        Ok(Self { kind, config })
    }
}

impl From<NonlinearitySpec> for NonlinearityConfig {
    fn from(spec: NonlinearitySpec) -> Self {
        spec.config
    }
}

/// Which of the basic functions [`NonlinearitySpec::phi_eval`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhiFunction {
    Phi,
    DPhi,
    SqrtPhi,
    DSqrtPhi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThetaFunction {
    /// `Theta_{sqrt(Phi')}`, antiderivative of `sqrt(Phi')` vanishing at 0.
    SqrtDPhi,
    /// `Theta_{Phi_n}`, antiderivative of `Phi'^2 / Phi` vanishing at 0.
    Phi,
}

fn check_domain(xi: f64) -> Result<()> {
    if xi.is_nan() || xi < 0.0 {
        Err(Error::Domain(format!("xi = {xi} must be nonnegative")))
    } else {
        Ok(())
    }
}

impl NonlinearitySpec {
    pub fn power(m: f64) -> Result<Self> {
        NonlinearityConfig::Power { m }.try_into()
    }

    pub fn table(points: Vec<[f64; 2]>) -> Result<Self> {
        NonlinearityConfig::Table { points }.try_into()
    }

    pub fn config(&self) -> &NonlinearityConfig {
        &self.config
    }

    /// Exponent of the power law, `None` for tables.
    pub fn exponent(&self) -> Option<f64> {
        match self.kind {
            Kind::Power(m) => Some(m),
            Kind::Table(_) => None,
        }
    }

    /// Upper end of the sampled range (infinite for power laws).
    pub fn range_max(&self) -> f64 {
        match &self.kind {
            Kind::Power(_) => f64::INFINITY,
            Kind::Table(t) => t.x_max(),
        }
    }

    /// Knots of a tabulated nonlinearity (empty for power laws).
    pub fn knots(&self) -> &[f64] {
        match &self.kind {
            Kind::Power(_) => &[],
            Kind::Table(t) => t.knots(),
        }
    }

    fn check_range(&self, xi: f64) -> Result<()> {
        check_domain(xi)?;
        if xi > self.range_max() {
            return Err(Error::Domain(format!(
                "xi = {xi} exceeds the tabulated range [0, {}]",
                self.range_max()
            )));
        }
        Ok(())
    }

    /// `Phi` and `Phi'` without range checks. Tables are continued linearly past
    /// their last knot; negative arguments are not allowed.
    #[inline]
    pub(crate) fn phi_and_dphi_raw(&self, xi: f64) -> (f64, f64) {
        match &self.kind {
            Kind::Power(m) => {
                let m = *m;
                if m == 1.0 {
                    (xi, 1.0)
                } else if m == 2.0 {
                    (xi * xi, 2.0 * xi)
                } else if m == 3.0 {
                    (xi * xi * xi, 3.0 * xi * xi)
                } else if xi == 0.0 {
                    (0.0, if m < 1.0 { f64::INFINITY } else { 0.0 })
                } else {
                    let p = xi.powf(m - 1.0);
                    (p * xi, m * p)
                }
            }
            Kind::Table(t) => {
                let xmax = t.x_max();
                if xi <= xmax {
                    t.eval(xi)
                } else {
                    let (v, d) = t.eval(xmax);
                    (v + d * (xi - xmax), d)
                }
            }
        }
    }

    #[inline]
    pub(crate) fn phi_raw(&self, xi: f64) -> f64 {
        self.phi_and_dphi_raw(xi).0
    }

    #[inline]
    pub(crate) fn dphi_raw(&self, xi: f64) -> f64 {
        self.phi_and_dphi_raw(xi).1
    }

    #[inline]
    pub(crate) fn sqrt_phi_raw(&self, xi: f64) -> f64 {
        match &self.kind {
            Kind::Power(m) => {
                if *m == 1.0 {
                    xi.sqrt()
                } else if *m == 2.0 {
                    xi
                } else {
                    xi.powf(0.5 * m)
                }
            }
            Kind::Table(_) => self.phi_raw(xi).max(0.0).sqrt(),
        }
    }

    /// `(Phi^{1/2})'`, infinite where the derivative blows up.
    #[inline]
    pub(crate) fn dsqrt_phi_raw(&self, xi: f64) -> f64 {
        match &self.kind {
            Kind::Power(m) => {
                let a = 0.5 * m;
                if a == 1.0 {
                    1.0
                } else if xi == 0.0 {
                    if a > 1.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    a * xi.powf(a - 1.0)
                }
            }
            Kind::Table(_) => {
                let (v, d) = self.phi_and_dphi_raw(xi);
                if v <= 0.0 {
                    if d == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    }
                } else {
                    0.5 * d / v.sqrt()
                }
            }
        }
    }

    /// Evaluate `Phi`, `Phi'`, `Phi^{1/2}` or `(Phi^{1/2})'` at `xi >= 0`.
    ///
    /// Derivatives at the degenerate point return the one-sided limit when it is
    /// finite; otherwise a [`Error::Singular`] is raised so callers route through
    /// the regularized flux instead.
    pub fn phi_eval(&self, which: PhiFunction, xi: f64) -> Result<f64> {
        self.check_range(xi)?;
        let v = match which {
            PhiFunction::Phi => self.phi_raw(xi),
            PhiFunction::DPhi => self.dphi_raw(xi),
            PhiFunction::SqrtPhi => self.sqrt_phi_raw(xi),
            PhiFunction::DSqrtPhi => {
                let d = self.dsqrt_phi_raw(xi);
                if xi == 0.0 {
                    if let Kind::Table(_) = self.kind {
                        // sqrt of a tabulated function has no reliable one-sided limit at 0
                        return Err(Error::Singular { xi, what: "(Phi^{1/2})' of a table at 0" });
                    }
                }
                d
            }
        };
        if !v.is_finite() {
            return Err(Error::Singular { xi, what: "derivative is unbounded" });
        }
        Ok(v)
    }

    /// Entropy density `Psi_Phi(xi) = int_0^xi log Phi`.
    pub fn entropy_density(&self, xi: f64) -> Result<f64> {
        self.check_range(xi)?;
        match &self.kind {
            Kind::Power(m) => Ok(power_entropy(*m, xi)),
            Kind::Table(_) => integrate_adaptive(0.0, xi, 1e-10, |x| self.phi_raw(x).ln()),
        }
    }

    /// Entropy density without checks (closed form or quadrature).
    pub(crate) fn entropy_density_raw(&self, xi: f64) -> f64 {
        match &self.kind {
            Kind::Power(m) => power_entropy(*m, xi.max(0.0)),
            Kind::Table(_) => integrate_adaptive(0.0, xi.max(0.0), 1e-10, |x| self.phi_raw(x).ln())
                .unwrap_or(f64::NAN),
        }
    }

    /// `Phi_n(xi) = Phi(min(xi, n)) + Phi'(n) (xi - n)_+`.
    pub fn truncate_phi(&self, n: u32, xi: f64) -> Result<f64> {
        check_domain(xi)?;
        if n == 0 {
            return Err(Error::InvalidArgument("truncation level n must be >= 1".into()));
        }
        let nf = n as f64;
        if xi <= nf {
            self.check_range(xi)?;
            Ok(self.phi_raw(xi))
        } else {
            self.check_range(nf)?;
            let (v, d) = self.phi_and_dphi_raw(nf);
            Ok(v + d * (xi - nf))
        }
    }

    /// The `Theta` functions of the weak-LDP assumptions.
    pub fn theta(&self, which: ThetaFunction, xi: f64) -> Result<f64> {
        self.check_range(xi)?;
        if xi == 0.0 {
            return Ok(0.0);
        }
        match (&self.kind, which) {
            (Kind::Power(m), ThetaFunction::SqrtDPhi) => {
                Ok(2.0 * m.sqrt() / (m + 1.0) * xi.powf(0.5 * (m + 1.0)))
            }
            (Kind::Power(m), ThetaFunction::Phi) => {
                if *m == 1.0 {
                    Err(Error::DivisionByZero(
                        "Theta_Phi diverges for m = 1; use the bounded-derivative branch".into(),
                    ))
                } else if *m < 1.0 {
                    Err(Error::Domain(format!("Theta_Phi is not integrable at 0 for m = {m}")))
                } else {
                    Ok(m * m / (m - 1.0) * xi.powf(m - 1.0))
                }
            }
            (Kind::Table(_), ThetaFunction::SqrtDPhi) => {
                integrate_adaptive(0.0, xi, 1e-10, |x| self.dphi_raw(x).max(0.0).sqrt())
            }
            (Kind::Table(_), ThetaFunction::Phi) => integrate_adaptive(0.0, xi, 1e-10, |x| {
                let (v, d) = self.phi_and_dphi_raw(x);
                d * d / v
            })
            .map_err(|_| Error::DivisionByZero("Theta_Phi diverges at 0 for this table".into())),
        }
    }

    /// Coefficient `4 Phi / Phi'` of the parabolic defect density, extended by 0 at the origin.
    pub fn defect_coeff(&self, xi: f64) -> Result<f64> {
        self.check_range(xi)?;
        Ok(self.defect_coeff_raw(xi))
    }

    #[inline]
    pub(crate) fn defect_coeff_raw(&self, xi: f64) -> f64 {
        if xi <= 0.0 {
            return 0.0;
        }
        match &self.kind {
            Kind::Power(m) => 4.0 / m * xi,
            Kind::Table(_) => {
                let (v, d) = self.phi_and_dphi_raw(xi);
                4.0 * v / d
            }
        }
    }
}

fn power_entropy(m: f64, xi: f64) -> f64 {
    if xi == 0.0 {
        0.0
    } else {
        m * (xi * xi.ln() - xi)
    }
}

/// Cap level and mollifier width of the regularized flux.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationParams {
    pub eta: f64,
    pub mollifier_width: f64,
}

impl RegularizationParams {
    /// Width defaults to `eta^2`.
    pub fn new(eta: f64) -> Result<Self> {
        Self::with_width(eta, eta * eta)
    }

    pub fn with_width(eta: f64, mollifier_width: f64) -> Result<Self> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::InvalidArgument(format!("eta = {eta} must lie in (0, 1)")));
        }
        if !(mollifier_width > 0.0 && mollifier_width < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mollifier width {mollifier_width} must lie in (0, 1)"
            )));
        }
        Ok(Self { eta, mollifier_width })
    }

    /// `Phi(1/eta)`.
    pub fn cap_level(&self, spec: &NonlinearitySpec) -> f64 {
        spec.phi_raw(1.0 / self.eta)
    }
}

/// Cubic B-spline on `[0, 4]` and its derivative.
#[inline]
fn bspline(t: f64) -> (f64, f64) {
    if !(0.0..=4.0).contains(&t) {
        (0.0, 0.0)
    } else if t < 1.0 {
        (t * t * t / 6.0, 0.5 * t * t)
    } else if t < 2.0 {
        (
            (-3.0 * t * t * t + 12.0 * t * t - 12.0 * t + 4.0) / 6.0,
            (-9.0 * t * t + 24.0 * t - 12.0) / 6.0,
        )
    } else if t < 3.0 {
        (
            (3.0 * t * t * t - 24.0 * t * t + 60.0 * t - 44.0) / 6.0,
            (9.0 * t * t - 48.0 * t + 60.0) / 6.0,
        )
    } else {
        let u = 4.0 - t;
        (u * u * u / 6.0, -0.5 * u * u)
    }
}

/// The smooth bounded flux `Phi^{1/2,eta}` and its derivative.
///
/// Evaluation goes through a cubic Hermite table (dense near the origin and the
/// cap, geometric in between); [`RegularizedSqrtPhi::eval_exact`] performs the
/// mollification integral directly.
#[derive(Clone, Debug)]
pub struct RegularizedSqrtPhi {
    spec: NonlinearitySpec,
    params: RegularizationParams,
    cap: f64,
    /// Smallest argument at which `Phi^{1/2}` reaches the cap.
    y_cap: f64,
    nodes: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

const TABLE_LIMIT: f64 = 1.0e6;

impl RegularizedSqrtPhi {
    pub fn new(spec: &NonlinearitySpec, params: RegularizationParams) -> Self {
        let mut out = Self::untabulated(spec, params);
        out.build_table();
        out
    }

    fn untabulated(spec: &NonlinearitySpec, params: RegularizationParams) -> Self {
        let cap = params.cap_level(spec);
        Self {
            spec: spec.clone(),
            params,
            cap,
            y_cap: cap_argument(spec, cap),
            nodes: Vec::new(),
            values: Vec::new(),
            slopes: Vec::new(),
        }
    }

    pub fn params(&self) -> RegularizationParams {
        self.params
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    fn build_table(&mut self) {
        let eps = self.params.mollifier_width;
        let fine = eps / 512.0;
        let x_end = (self.y_cap + eps).min(TABLE_LIMIT);
        let mut nodes = Vec::new();
        let mut x = 0.0;
        while x < 2.0 * eps && x < x_end {
            nodes.push(x);
            x += fine;
        }
        let cap_zone = self.y_cap - 2.0 * eps;
        let mut x = 2.0 * eps;
        while x < x_end.min(cap_zone) {
            nodes.push(x);
            x *= 1.004;
        }
        if cap_zone < x_end {
            let mut x = cap_zone.max(2.0 * eps);
            while x < x_end {
                nodes.push(x);
                x += fine;
            }
        }
        nodes.push(x_end);
        nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        nodes.dedup();
        self.values = nodes.iter().map(|&x| self.mollify(x, false)).collect();
        self.slopes = nodes.iter().map(|&x| self.mollify(x, true)).collect();
        self.nodes = nodes;
    }

    fn capped(&self, y: f64) -> f64 {
        if y <= 0.0 {
            0.0
        } else if y >= self.y_cap {
            self.cap
        } else {
            self.spec.sqrt_phi_raw(y).min(self.cap)
        }
    }

    /// `int f(x+s) k(s) ds` (or `-int f(x+s) k'(s) ds`) over `s in (-eps, 0)`.
    fn mollify(&self, xi: f64, derivative: bool) -> f64 {
        let eps = self.params.mollifier_width;
        let mut total = 0.0;
        for piece in 0..4 {
            let s0 = -eps + piece as f64 * 0.25 * eps;
            let s1 = s0 + 0.25 * eps;
            let (ya, yb) = (xi + s0, xi + s1);
            let mut cuts = vec![ya];
            for c in [0.0, self.y_cap] {
                if c > ya && c < yb {
                    cuts.push(c);
                }
            }
            cuts.push(yb);
            for w in cuts.windows(2) {
                let (lo, hi) = (w[0], w[1]);
                if hi <= 0.0 {
                    continue;
                }
                let kernel = |y: f64| {
                    let t = 4.0 * (y - xi + eps) / eps;
                    let (b, db) = bspline(t.clamp(0.0, 4.0));
                    if derivative {
                        -16.0 / (eps * eps) * db
                    } else {
                        4.0 / eps * b
                    }
                };
                if lo >= self.y_cap {
                    total += self.cap * gauss_legendre8(lo, hi, kernel);
                } else if lo <= 0.0 {
                    // y = u^4 absorbs the power-type behaviour at the origin
                    let top = hi.sqrt().sqrt();
                    for panel in 0..4 {
                        let (ua, ub) = (top * panel as f64 / 4.0, top * (panel + 1) as f64 / 4.0);
                        total += gauss_legendre8(ua, ub, |u| {
                            let u2 = u * u;
                            let y = u2 * u2;
                            self.capped(y) * kernel(y) * 4.0 * u2 * u
                        });
                    }
                } else {
                    let (ua, ub) = (lo.sqrt(), hi.sqrt());
                    total += gauss_legendre8(ua, ub, |u| {
                        let y = u * u;
                        self.capped(y) * kernel(y) * 2.0 * u
                    });
                }
            }
        }
        total
    }

    /// Direct evaluation of the mollification integral.
    pub fn eval_exact(&self, xi: f64, derivative: bool) -> f64 {
        if xi >= self.y_cap + self.params.mollifier_width {
            return if derivative { 0.0 } else { self.cap };
        }
        self.mollify(xi, derivative)
    }

    /// Tabulated value and derivative at `xi` (negative arguments give 0).
    #[inline]
    pub fn eval(&self, xi: f64) -> (f64, f64) {
        if xi <= 0.0 {
            return (0.0, 0.0);
        }
        if xi >= self.y_cap + self.params.mollifier_width {
            return (self.cap, 0.0);
        }
        let last = *self.nodes.last().unwrap();
        // the flux grows like xi^{m/2+4} at the origin, which no cubic on the
        // first cell follows monotonically
        if xi >= last || xi < self.nodes[1] {
            return (self.mollify(xi, false), self.mollify(xi, true));
        }
        let i = match self.nodes.binary_search_by(|v| v.partial_cmp(&xi).unwrap()) {
            Ok(i) => i.min(self.nodes.len() - 2),
            Err(i) => i - 1,
        };
        let h = self.nodes[i + 1] - self.nodes[i];
        let t = (xi - self.nodes[i]) / h;
        let (y0, y1, m0, m1) = (self.values[i], self.values[i + 1], self.slopes[i], self.slopes[i + 1]);
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * h * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * h * m1;
        let d = ((6.0 * t2 - 6.0 * t) * (y0 - y1)) / h
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (3.0 * t2 - 2.0 * t) * m1;
        (v, d)
    }
}

/// `Phi^{1/2,eta}(xi)` or its derivative, evaluated by direct quadrature.
pub fn regularized_sqrt_phi(
    spec: &NonlinearitySpec,
    params: RegularizationParams,
    xi: f64,
    derivative: bool,
) -> Result<f64> {
    check_domain(xi)?;
    // only the sampled part of a table is trustworthy
    if xi > spec.range_max() {
        return Err(Error::Domain(format!("xi = {xi} outside the tabulated range")));
    }
    Ok(RegularizedSqrtPhi::untabulated(spec, params).eval_exact(xi, derivative))
}

/// Smallest `y` with `Phi^{1/2}(y) >= cap`.
fn cap_argument(spec: &NonlinearitySpec, cap: f64) -> f64 {
    if let Some(m) = spec.exponent() {
        return cap.powf(2.0 / m);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while spec.sqrt_phi_raw(hi) < cap {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if spec.sqrt_phi_raw(mid) < cap {
            lo = mid
        } else {
            hi = mid
        }
    }
    hi
}
