//! Scaling of controls under the zoom `rho -> lambda rho(eta x, tau t)`.
//!
//! Keeping the diffusion fixed forces `tau = eta^2 lambda^(m-1)` and keeping
//! the `L^r` norm of the data fixed forces `lambda = eta^(d/r)`. The control
//! then transforms as `g~(x,t) = tau / (eta lambda^(m/2-1)) g(eta x, tau t)` and
//! its `L^p_t L^q_x` norm picks up the factor `eta^E` with
//!
//! `E = 1 - 2/p - d/q + (d/r) (m/2 - (m-1)/p)`.
//!
//! The measured ratio integrates `g~` over the preimage `[0, 1/eta]^d x [0, T/tau]`
//! of the unit cell, the torus stand-in for the whole-space computation.

use crate::basis::{factor_frequency, project_pk, ControlField, SpectralBasis};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Exponents of the mixed norm: `p` in time, `q` in space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingExponents {
    pub m: f64,
    pub r: f64,
    pub p: f64,
    pub q: f64,
}

impl ScalingExponents {
    fn validate(&self) -> Result<()> {
        if !(self.m >= 1.0 && self.r >= 1.0 && self.p >= 1.0 && self.q >= 1.0)
            || ![self.m, self.r, self.p, self.q].iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "need m, r, p, q >= 1 and finite, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `(tau, lambda)` for a zoom factor `eta`.
    pub fn scales(&self, d: usize, eta: f64) -> (f64, f64) {
        let lambda = eta.powf(d as f64 / self.r);
        (eta * eta * lambda.powf(self.m - 1.0), lambda)
    }
}

/// `E` such that `||g~||_{L^p_t L^q_x} = eta^E ||g||_{L^p_t L^q_x}`.
pub fn criticality_exponent(m: f64, d: usize, p: f64, q: f64, r: f64) -> Result<f64> {
    ScalingExponents { m, r, p, q }.validate()?;
    if d != 1 && d != 2 {
        return Err(Error::InvalidArgument(format!("dimension d = {d} must be 1 or 2")));
    }
    let d = d as f64;
    Ok(1.0 - 2.0 / p - d / q + d / r * (0.5 * m - (m - 1.0) / p))
}

/// Point evaluation of a spectral control on slice `j`.
fn eval(g: &ControlField, basis: &SpectralBasis, j: usize, x: [f64; 2]) -> [f64; 2] {
    let d = basis.grid().d();
    let mut v = [0.0; 2];
    for (m, &c) in basis.modes().iter().zip(&g.coefficients().unwrap()[j]) {
        if c != 0.0 {
            v[m.direction] += c * m.value(d, x);
        }
    }
    v
}

/// `||g||_{L^p_t L^q_x}` with `g(x, t) = amp * g0(eta x, t tau)` over
/// `[0, 1/eta]^d x [0, T/tau]`, midpoint rule of spacing `h` in space.
fn mixed_norm(g: &ControlField, basis: &SpectralBasis, ex: ScalingExponents, eta: f64, tau: f64, amp: f64) -> f64 {
    let grid = basis.grid();
    let h = grid.h();
    let per_axis = (1.0 / (eta * h)).round() as usize;
    let d = grid.d();
    let cell = h.powi(d as i32);
    let mut total = 0.0;
    for j in 0..g.num_slices() {
        let dt = (g.times()[j + 1] - g.times()[j]) / tau;
        let mut space = 0.0;
        let ny = if d == 1 { 1 } else { per_axis };
        for i in 0..per_axis {
            for k in 0..ny {
                let x = [eta * (i as f64 + 0.5) * h, eta * (k as f64 + 0.5) * h];
                let v = eval(g, basis, j, x);
                let norm = (v[0] * v[0] + v[1] * v[1]).sqrt() * amp.abs();
                space += norm.powf(ex.q) * cell;
            }
        }
        total += dt * space.powf(ex.p / ex.q);
    }
    total.powf(1.0 / ex.p)
}

/// Rescales `g` by the zoom `eta`. Returns `g~` on the unit torus together with
/// the measured norm ratio `||g~|| / ||g||`.
///
/// Grid controls are first projected onto every resolved mode, which is exact
/// for band-limited fields. `g~` is representable on the unit torus only if
/// every active frequency times `eta` is an integer no larger than `n/4`.
pub fn rescale_control(g: &ControlField, eta: f64, ex: ScalingExponents) -> Result<(ControlField, f64)> {
    ex.validate()?;
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::InvalidArgument(format!("eta = {eta} must lie in (0, 1]")));
    }
    let g = if g.is_spectral() {
        g.clone()
    } else {
        project_pk(g, SpectralBasis::capacity(g.grid()))?
    };
    let basis = g.basis().unwrap().clone();
    let grid = basis.grid();
    let d = grid.d();
    let (tau, lambda) = ex.scales(d, eta);
    let amp = tau / (eta * lambda.powf(0.5 * ex.m - 1.0));

    // map every active mode onto the mode with frequencies scaled by eta
    let coeffs = g.coefficients().unwrap();
    let cap = SpectralBasis::capacity(grid);
    let full = SpectralBasis::new(grid, cap)?;
    let mut target = vec![vec![0.0; cap]; coeffs.len()];
    for (k, m) in basis.modes().iter().enumerate() {
        if coeffs.iter().all(|c| c[k] == 0.0) {
            continue;
        }
        let mut factors = [0usize; 2];
        for (axis, &a) in m.factors.iter().enumerate().take(d) {
            let f = crate::basis::factor_frequency(a) as f64 * eta;
            if (f - f.round()).abs() > 1e-9 {
                return Err(Error::Resolution(format!(
                    "frequency {} scaled by eta = {eta} is not an integer",
                    crate::basis::factor_frequency(a)
                )));
            }
            let f = f.round() as usize;
            factors[axis] = if f == 0 { 0 } else if a % 2 == 1 { 2 * f - 1 } else { 2 * f };
        }
        let idx = full
            .modes()
            .iter()
            .position(|mm| mm.factors == factors && mm.direction == m.direction)
            .ok_or_else(|| Error::Resolution("rescaled mode exceeds n/4".into()))?;
        for (t, c) in target.iter_mut().zip(coeffs) {
            t[idx] += amp * c[k];
        }
    }
    let used = target
        .iter()
        .map(|c| c.iter().rposition(|&v| v != 0.0).map_or(0, |i| i + 1))
        .max()
        .unwrap_or(0)
        .max(1);
    let out_basis = SpectralBasis::shared(grid, used)?;
    let times: Vec<f64> = g.times().iter().map(|t| t / tau).collect();
    let out_coeffs = target.into_iter().map(|mut c| {
        c.truncate(used);
        c
    });
    let rescaled = ControlField::spectral(out_basis, times, out_coeffs.collect())?;

    let before = mixed_norm(&g, &basis, ex, 1.0, 1.0, 1.0);
    let after = mixed_norm(&g, &basis, ex, eta, tau, amp);
    if before == 0.0 {
        return Err(Error::InvalidArgument("the zero control has no norm ratio".into()));
    }
    Ok((rescaled, after / before))
}

/// Least-squares slope of `log(ratio)` against `log(eta)`.
pub fn fitted_exponent(g: &ControlField, etas: &[f64], ex: ScalingExponents) -> Result<f64> {
    if etas.len() < 2 {
        return Err(Error::InvalidArgument("need at least two zoom factors".into()));
    }
    let pts: Vec<(f64, f64)> = etas
        .iter()
        .map(|&eta| rescale_control(g, eta, ex).map(|(_, r)| (eta.ln(), r.ln())))
        .collect::<Result<_>>()?;
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// A two-slice spectral control whose modes survive every zoom `1/z` with
/// `z` dividing `max_zoom`: all frequencies are nonzero multiples of
/// `max_zoom` with total at most `2 max_zoom`.
pub fn zoomable_control(grid: Grid, max_zoom: usize) -> Result<ControlField> {
    if max_zoom == 0 || 2 * max_zoom > grid.n() / 4 {
        return Err(Error::Resolution(format!("zoom {max_zoom} is not resolved on n = {}", grid.n())));
    }
    let basis = SpectralBasis::shared(grid, SpectralBasis::capacity(grid))?;
    let mut c0 = vec![0.0; basis.len()];
    let mut c1 = vec![0.0; basis.len()];
    for (k, m) in basis.modes().iter().enumerate() {
        let f = [factor_frequency(m.factors[0]), factor_frequency(m.factors[1])];
        let total = m.total_frequency();
        if f.iter().all(|v| v % max_zoom == 0) && total <= 2 * max_zoom && total > 0 {
            c0[k] = 1.0 / (1.0 + k as f64);
            c1[k] = if k % 2 == 0 { 0.5 } else { -0.25 };
        }
    }
    ControlField::spectral(basis, vec![0.0, 0.5, 1.0], vec![c0, c1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn control(d: usize) -> ControlField {
        zoomable_control(Grid::new(d, 64).unwrap(), 8).unwrap()
    }

    #[test]
    fn exponent_vanishes_at_the_critical_pair() {
        for m in [1.0, 2.0, 3.0] {
            for d in [1, 2] {
                assert!(criticality_exponent(m, d, 2.0, 2.0, 1.0).unwrap().abs() < 1e-15);
                assert!(criticality_exponent(m, d, 2.0, 2.0, 2.0).unwrap() < 0.0);
            }
        }
    }

    #[test]
    fn identity_zoom() {
        let g = control(1);
        let ex = ScalingExponents { m: 2.0, r: 1.0, p: 2.0, q: 2.0 };
        let (h, ratio) = rescale_control(&g, 1.0, ex).unwrap();
        assert!((ratio - 1.0).abs() < 1e-12);
        assert!((h.energy() - g.energy()).abs() < 1e-12);
    }

    #[test]
    fn measured_ratio_follows_the_exponent() {
        for d in [1, 2] {
            let g = control(d);
            for (m, r, p, q) in [(1.0, 1.0, 2.0, 2.0), (2.0, 2.0, 2.0, 2.0), (3.0, 1.5, 3.0, 4.0)] {
                let ex = ScalingExponents { m, r, p, q };
                let slope = fitted_exponent(&g, &[0.5, 0.25, 0.125], ex).unwrap();
                let e = criticality_exponent(m, d, p, q, r).unwrap();
                assert!((slope - e).abs() < 0.05, "d={d} {ex:?}: {slope} vs {e}");
            }
        }
    }

    #[test]
    fn non_integer_frequency_is_a_resolution_error() {
        let grid = Grid::new(1, 32).unwrap();
        let basis = SpectralBasis::shared(grid, 3).unwrap();
        let g = ControlField::spectral(basis, vec![0.0, 1.0], vec![vec![0.0, 1.0, 0.0]]).unwrap();
        let ex = ScalingExponents { m: 1.0, r: 1.0, p: 2.0, q: 2.0 };
        assert!(matches!(rescale_control(&g, 0.5, ex), Err(Error::Resolution(_))));
    }
}
