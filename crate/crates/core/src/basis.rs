//! The trigonometric vector basis `{e_k}`, controls built on it, and the
//! Fourier projection `P_K`.
//!
//! In 1D the modes are `e_1 = 1`, `e_{2j} = sqrt(2) sin(2 pi j x)`,
//! `e_{2j+1} = sqrt(2) cos(2 pi j x)`. In 2D they are products of two such
//! factors paired with a coordinate direction, ordered by total frequency, then
//! direction, then factor indices. Modes are sampled on the staggered faces,
//! where cell sums make the first `K` modes exactly orthonormal as long as no
//! frequency exceeds `n/4`.

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::{PI, SQRT_2};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Field, Grid, VectorField};

/// One basis vector: factor indices along x and y plus its direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Mode {
    pub factors: [usize; 2],
    pub direction: usize,
}

/// Frequency of 1D factor `a` (0 for the constant, `j` for the `j`-th sine/cosine pair).
#[inline]
pub fn factor_frequency(a: usize) -> usize {
    a.div_ceil(2)
}

/// Value and derivative of the 1D factor `a` at `x`.
#[inline]
pub fn factor(a: usize, x: f64) -> (f64, f64) {
    if a == 0 {
        return (1.0, 0.0);
    }
    let w = 2.0 * PI * factor_frequency(a) as f64;
    let (s, c) = (w * x).sin_cos();
    if a % 2 == 1 {
        (SQRT_2 * s, SQRT_2 * w * c)
    } else {
        (SQRT_2 * c, -SQRT_2 * w * s)
    }
}

impl Mode {
    /// Largest frequency along either axis.
    pub fn max_frequency(&self) -> usize {
        factor_frequency(self.factors[0]).max(factor_frequency(self.factors[1]))
    }

    pub fn total_frequency(&self) -> usize {
        factor_frequency(self.factors[0]) + factor_frequency(self.factors[1])
    }

    /// Nonzero component of the mode at `x` (the component index is `direction`).
    pub fn value(&self, d: usize, x: [f64; 2]) -> f64 {
        let fx = factor(self.factors[0], x[0]).0;
        if d == 1 {
            fx
        } else {
            fx * factor(self.factors[1], x[1]).0
        }
    }

    /// Analytic divergence at `x`.
    pub fn divergence(&self, d: usize, x: [f64; 2]) -> f64 {
        let (fx, dfx) = factor(self.factors[0], x[0]);
        if d == 1 {
            return dfx;
        }
        let (fy, dfy) = factor(self.factors[1], x[1]);
        if self.direction == 0 {
            dfx * fy
        } else {
            fx * dfy
        }
    }
}

/// All modes up to total frequency `fmax`, in basis order.
fn enumerate_modes(d: usize, fmax: usize) -> Vec<Mode> {
    if d == 1 {
        return (0..=2 * fmax).map(|a| Mode { factors: [a, 0], direction: 0 }).collect();
    }
    let mut modes = Vec::new();
    for a in 0..=2 * fmax {
        for b in 0..=2 * fmax {
            for direction in 0..2 {
                let m = Mode { factors: [a, b], direction };
                if m.total_frequency() <= fmax {
                    modes.push(m);
                }
            }
        }
    }
    modes.sort_by_key(|m| (m.total_frequency(), m.direction, m.factors[0], m.factors[1]));
    modes
}

/// The first `K` basis modes, sampled on a grid.
#[derive(Debug)]
pub struct SpectralBasis {
    grid: Grid,
    modes: Vec<Mode>,
    samples: Vec<Vec<f64>>,
}

impl SpectralBasis {
    /// Number of modes whose frequencies stay within `n/4`.
    pub fn capacity(grid: Grid) -> usize {
        enumerate_modes(grid.d(), grid.n() / 4).len()
    }

    pub fn new(grid: Grid, k: usize) -> Result<Self> {
        let cap = Self::capacity(grid);
        if k > cap {
            return Err(Error::Resolution(format!(
                "{k} modes requested but only {cap} are resolved on n = {}",
                grid.n()
            )));
        }
        let modes: Vec<Mode> = enumerate_modes(grid.d(), grid.n() / 4).into_iter().take(k).collect();
        let samples = modes
            .iter()
            .map(|m| (0..grid.cells()).map(|c| m.value(grid.d(), grid.face(c, m.direction))).collect())
            .collect();
        Ok(Self { grid, modes, samples })
    }

    pub fn shared(grid: Grid, k: usize) -> Result<Arc<Self>> {
        Self::new(grid, k).map(Arc::new)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    /// Face samples of the nonzero component of mode `k` (0-based).
    pub fn samples(&self, k: usize) -> &[f64] {
        &self.samples[k]
    }

    /// Mode `k` (1-based, as in `e_1, e_2, ...`) as a staggered vector field.
    pub fn basis_mode(&self, k: usize) -> Result<VectorField> {
        if k == 0 || k > self.len() {
            return Err(Error::Resolution(format!("mode {k} is outside 1..={}", self.len())));
        }
        let m = self.modes[k - 1];
        let mut v = VectorField::zeros(self.grid);
        v.component_mut(m.direction).copy_from_slice(&self.samples[k - 1]);
        Ok(v)
    }

    /// `sum_k c_k e_k` into `out`.
    pub fn synthesize_into(&self, coeffs: &[f64], out: &mut VectorField) {
        for a in 0..self.grid.d() {
            out.component_mut(a).fill(0.0);
        }
        for ((m, s), &c) in self.modes.iter().zip(&self.samples).zip(coeffs) {
            if c != 0.0 {
                out.component_mut(m.direction).iter_mut().zip(s).for_each(|(o, e)| *o += c * e);
            }
        }
    }

    pub fn synthesize(&self, coeffs: &[f64]) -> VectorField {
        let mut v = VectorField::zeros(self.grid);
        self.synthesize_into(coeffs, &mut v);
        v
    }

    /// Coefficients `<v, e_k>` under cell quadrature.
    pub fn analyze(&self, v: &VectorField) -> Result<Vec<f64>> {
        self.grid.check_same(&v.grid())?;
        let w = self.grid.cell_volume();
        Ok(self
            .modes
            .iter()
            .zip(&self.samples)
            .map(|(m, s)| v.component(m.direction).iter().zip(s).map(|(x, e)| x * e).sum::<f64>() * w)
            .collect())
    }

    /// Discrete Gram matrix of the modes.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let w = self.grid.cell_volume();
        (0..self.len())
            .map(|i| {
                (0..self.len())
                    .map(|j| {
                        if self.modes[i].direction != self.modes[j].direction {
                            0.0
                        } else {
                            self.samples[i].iter().zip(&self.samples[j]).map(|(a, b)| a * b).sum::<f64>() * w
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Exact divergence of mode `k` (0-based) at the cell centres.
    pub fn analytic_divergence(&self, k: usize) -> Field {
        let m = self.modes[k];
        Field::from_fn(self.grid, |x| m.divergence(self.grid.d(), x))
    }
}

/// Source of the control acting in the solver; may depend on the state.
pub trait Control: Sync {
    fn grid(&self) -> Grid;

    /// The vector field acting at time `t` given the current density.
    fn velocity_into(&self, t: f64, rho: &Field, out: &mut VectorField);

    /// Earliest time after `t` at which the control changes, if any; the solver
    /// never steps across it.
    fn next_change(&self, _t: f64) -> Option<f64> {
        None
    }

    /// Identity used to check that two runs share a control.
    fn fingerprint(&self) -> u64;
}

#[derive(Clone, Debug)]
enum Repr {
    Grid(Vec<VectorField>),
    Spectral { basis: Arc<SpectralBasis>, coeffs: Vec<Vec<f64>> },
}

/// A piecewise-constant-in-time control: slice `j` acts on `[t_j, t_{j+1})`.
#[derive(Clone, Debug)]
pub struct ControlField {
    grid: Grid,
    times: Vec<f64>,
    repr: Repr,
}

fn check_times(times: &[f64], slices: usize) -> Result<()> {
    if times.len() != slices + 1 || slices == 0 {
        return Err(Error::InvalidArgument(format!(
            "{} time nodes for {slices} slices",
            times.len()
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) || !times[0].is_finite() {
        return Err(Error::InvalidArgument("time nodes must be strictly increasing".into()));
    }
    Ok(())
}

/// Uniform time nodes `0, T/N, ..., T`.
pub fn uniform_times(t_end: f64, slices: usize) -> Vec<f64> {
    (0..=slices).map(|j| t_end * j as f64 / slices as f64).collect()
}

impl ControlField {
    pub fn zero(grid: Grid, t_end: f64) -> Self {
        Self::constant(grid, t_end, [0.0, 0.0])
    }

    pub fn constant(grid: Grid, t_end: f64, v: [f64; 2]) -> Self {
        Self { grid, times: vec![0.0, t_end], repr: Repr::Grid(vec![VectorField::constant(grid, v)]) }
    }

    pub fn from_slices(times: Vec<f64>, slices: Vec<VectorField>) -> Result<Self> {
        check_times(&times, slices.len())?;
        let grid = slices[0].grid();
        for s in &slices {
            grid.check_same(&s.grid())?;
        }
        Ok(Self { grid, times, repr: Repr::Grid(slices) })
    }

    /// Samples `f(x, t, axis)` on the faces at the left end of every slice.
    pub fn from_fn(grid: Grid, times: Vec<f64>, f: impl Fn([f64; 2], f64, usize) -> f64) -> Result<Self> {
        let slices = times
            .iter()
            .take(times.len().saturating_sub(1))
            .map(|&t| VectorField::from_fn(grid, |x, a| f(x, t, a)))
            .collect();
        Self::from_slices(times, slices)
    }

    pub fn spectral(basis: Arc<SpectralBasis>, times: Vec<f64>, coeffs: Vec<Vec<f64>>) -> Result<Self> {
        check_times(&times, coeffs.len())?;
        if coeffs.iter().any(|c| c.len() != basis.len()) {
            return Err(Error::InvalidArgument(format!(
                "every slice needs {} coefficients",
                basis.len()
            )));
        }
        Ok(Self { grid: basis.grid(), times, repr: Repr::Spectral { basis, coeffs } })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn num_slices(&self) -> usize {
        self.times.len() - 1
    }

    pub fn is_spectral(&self) -> bool {
        matches!(self.repr, Repr::Spectral { .. })
    }

    /// Spectral coefficients per slice, if spectral.
    pub fn coefficients(&self) -> Option<&[Vec<f64>]> {
        match &self.repr {
            Repr::Spectral { coeffs, .. } => Some(coeffs),
            Repr::Grid(_) => None,
        }
    }

    pub fn basis(&self) -> Option<&Arc<SpectralBasis>> {
        match &self.repr {
            Repr::Spectral { basis, .. } => Some(basis),
            Repr::Grid(_) => None,
        }
    }

    /// Slice active at time `t` (the last slice for `t >= T`).
    pub fn slice_index(&self, t: f64) -> usize {
        let j = self.times.partition_point(|&s| s <= t);
        j.saturating_sub(1).min(self.num_slices() - 1)
    }

    pub fn slice_into(&self, j: usize, out: &mut VectorField) {
        match &self.repr {
            Repr::Grid(s) => {
                for a in 0..self.grid.d() {
                    out.component_mut(a).copy_from_slice(s[j].component(a));
                }
            }
            Repr::Spectral { basis, coeffs } => basis.synthesize_into(&coeffs[j], out),
        }
    }

    pub fn slice(&self, j: usize) -> VectorField {
        let mut v = VectorField::zeros(self.grid);
        self.slice_into(j, &mut v);
        v
    }

    /// `1/2 int_0^T int |g|^2`; spectral controls use coefficient sums.
    pub fn energy(&self) -> f64 {
        (0..self.num_slices())
            .map(|j| {
                let dt = self.times[j + 1] - self.times[j];
                let sq = match &self.repr {
                    Repr::Grid(s) => s[j].squared_l2(),
                    Repr::Spectral { coeffs, .. } => coeffs[j].iter().map(|c| c * c).sum(),
                };
                0.5 * dt * sq
            })
            .sum()
    }

    /// The same control in grid representation.
    pub fn to_grid(&self) -> ControlField {
        let slices = (0..self.num_slices()).map(|j| self.slice(j)).collect();
        ControlField { grid: self.grid, times: self.times.clone(), repr: Repr::Grid(slices) }
    }

    /// Scales the control by `s`.
    pub fn scaled(&self, s: f64) -> ControlField {
        let repr = match &self.repr {
            Repr::Grid(sl) => Repr::Grid(
                sl.iter()
                    .map(|v| {
                        let mut v = v.clone();
                        v.scale(s);
                        v
                    })
                    .collect(),
            ),
            Repr::Spectral { basis, coeffs } => Repr::Spectral {
                basis: basis.clone(),
                coeffs: coeffs.iter().map(|c| c.iter().map(|x| x * s).collect()).collect(),
            },
        };
        ControlField { grid: self.grid, times: self.times.clone(), repr }
    }
}

impl Control for ControlField {
    fn grid(&self) -> Grid {
        self.grid
    }

    fn velocity_into(&self, t: f64, _rho: &Field, out: &mut VectorField) {
        self.slice_into(self.slice_index(t), out)
    }

    fn next_change(&self, t: f64) -> Option<f64> {
        let j = self.slice_index(t);
        if j + 1 < self.num_slices() {
            Some(self.times[j + 1])
        } else {
            None
        }
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.grid.hash(&mut h);
        for t in &self.times {
            t.to_bits().hash(&mut h);
        }
        match &self.repr {
            Repr::Grid(s) => s.iter().flat_map(|v| v.components().iter().flatten()).for_each(|x| x.to_bits().hash(&mut h)),
            Repr::Spectral { basis, coeffs } => {
                basis.len().hash(&mut h);
                coeffs.iter().flatten().for_each(|x| x.to_bits().hash(&mut h));
            }
        }
        h.finish()
    }
}

/// Spectral projection onto the first `k` modes, slice by slice.
pub fn project_pk(g: &ControlField, k: usize) -> Result<ControlField> {
    let basis = SpectralBasis::shared(g.grid(), k)?;
    project_onto(g, basis)
}

/// Projection onto an existing basis (shared between controls).
pub fn project_onto(g: &ControlField, basis: Arc<SpectralBasis>) -> Result<ControlField> {
    basis.grid().check_same(&g.grid())?;
    let coeffs = match &g.repr {
        // both use the same mode ordering, so projection is truncation or padding
        Repr::Spectral { coeffs, .. } => {
            coeffs.iter().map(|c| (0..basis.len()).map(|i| c.get(i).copied().unwrap_or(0.0)).collect()).collect()
        }
        Repr::Grid(s) => s.iter().map(|v| basis.analyze(v)).collect::<Result<Vec<_>>>()?,
    };
    ControlField::spectral(basis, g.times.clone(), coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_modes_in_one_dimension() {
        let g = Grid::new(1, 32).unwrap();
        let b = SpectralBasis::new(g, 5).unwrap();
        let e1 = b.basis_mode(1).unwrap();
        assert!(e1.component(0).iter().all(|&v| v == 1.0));
        let x = g.face(3, 0)[0];
        assert!((b.basis_mode(2).unwrap().component(0)[3] - SQRT_2 * (2.0 * PI * x).sin()).abs() < 1e-15);
        assert!((b.basis_mode(3).unwrap().component(0)[3] - SQRT_2 * (2.0 * PI * x).cos()).abs() < 1e-15);
        assert!((b.basis_mode(5).unwrap().component(0)[3] - SQRT_2 * (4.0 * PI * x).cos()).abs() < 1e-15);
    }

    #[test]
    fn capacity_and_resolution_error() {
        let g = Grid::new(1, 32).unwrap();
        assert_eq!(SpectralBasis::capacity(g), 17);
        assert!(matches!(SpectralBasis::new(g, 18), Err(Error::Resolution(_))));
        let g2 = Grid::new(2, 16).unwrap();
        let b = SpectralBasis::new(g2, SpectralBasis::capacity(g2)).unwrap();
        assert!(b.modes().iter().all(|m| m.max_frequency() <= 4));
    }

    #[test]
    fn two_dimensional_ordering() {
        let g = Grid::new(2, 32).unwrap();
        let b = SpectralBasis::new(g, 12).unwrap();
        let m = b.modes();
        assert_eq!(m[0], Mode { factors: [0, 0], direction: 0 });
        assert_eq!(m[1], Mode { factors: [0, 0], direction: 1 });
        assert!(m.windows(2).all(|w| w[0].total_frequency() <= w[1].total_frequency()));
    }

    #[test]
    fn spectral_and_grid_energy_agree() {
        let g = Grid::new(1, 64).unwrap();
        let basis = SpectralBasis::shared(g, 9).unwrap();
        let coeffs = vec![vec![0.3, -1.0, 0.5, 0.0, 0.25, 0.1, 0.0, 0.0, 2.0], vec![1.0; 9]];
        let c = ControlField::spectral(basis, vec![0.0, 0.5, 1.0], coeffs).unwrap();
        assert!((c.energy() - c.to_grid().energy()).abs() < 1e-12);
    }

    #[test]
    fn projection_of_a_mode() {
        let g = Grid::new(2, 32).unwrap();
        let basis = SpectralBasis::new(g, 20).unwrap();
        for j in [1, 7, 20] {
            let e = basis.basis_mode(j).unwrap();
            let c = ControlField::from_slices(vec![0.0, 1.0], vec![e]).unwrap();
            let p = project_pk(&c, 10).unwrap();
            let coeffs = &p.coefficients().unwrap()[0];
            for (i, v) in coeffs.iter().enumerate() {
                let expect = if i + 1 == j { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn slice_lookup() {
        let g = Grid::new(1, 8).unwrap();
        let c = ControlField::from_fn(g, vec![0.0, 0.25, 0.5, 1.0], |_, t, _| t).unwrap();
        assert_eq!(c.slice_index(0.0), 0);
        assert_eq!(c.slice_index(0.25), 1);
        assert_eq!(c.slice_index(0.9), 2);
        assert_eq!(c.slice_index(2.0), 2);
        assert_eq!(c.next_change(0.3), Some(0.5));
        assert_eq!(c.next_change(0.7), None);
    }
}
