//! Periodic cell-centred grids on the unit torus and finite-volume operators.
//!
//! Scalar fields live at cell centres `(i + 1/2) h`. Vector fields are
//! staggered: component `a` of cell `c` sits on the face `x_c + (h/2) e_a`
//! between `c` and its `+e_a` neighbour. With this layout the gradient maps
//! cells to faces, the divergence maps faces back to cells, their composition
//! is the compact second-order Laplacian, and the cell sum of any divergence
//! telescopes to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    d: usize,
    n: usize,
    shift: u32,
}

/// Serialized form of a [`Grid`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub d: usize,
    pub n: usize,
}

impl TryFrom<GridSpec> for Grid {
    type Error = Error;

    fn try_from(s: GridSpec) -> Result<Self> {
        Grid::new(s.d, s.n)
    }
}

impl From<Grid> for GridSpec {
    fn from(g: Grid) -> Self {
        GridSpec { d: g.d, n: g.n }
    }
}

impl Grid {
    /// `d` must be 1 or 2, `n` a power of two no smaller than 8.
    pub fn new(d: usize, n: usize) -> Result<Self> {
        if d != 1 && d != 2 {
            return Err(Error::InvalidArgument(format!("dimension d = {d} must be 1 or 2")));
        }
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::InvalidArgument(format!("n = {n} must be a power of two >= 8")));
        }
        Ok(Self { d, n, shift: n.trailing_zeros() })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Number of cells, `n^d`.
    #[inline]
    pub fn cells(&self) -> usize {
        if self.d == 1 {
            self.n
        } else {
            self.n * self.n
        }
    }

    /// Quadrature weight of one cell, `h^d`.
    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.d as i32)
    }

    /// Index of the cell with multi-index `(i, j)` (`j` ignored in 1D).
    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        if self.d == 1 {
            i
        } else {
            (i << self.shift) | j
        }
    }

    /// Multi-index of cell `c`.
    #[inline]
    pub fn multi_index(&self, c: usize) -> [usize; 2] {
        if self.d == 1 {
            [c, 0]
        } else {
            [c >> self.shift, c & (self.n - 1)]
        }
    }

    /// Cell centre of `c`.
    #[inline]
    pub fn center(&self, c: usize) -> [f64; 2] {
        let h = self.h();
        let [i, j] = self.multi_index(c);
        if self.d == 1 {
            [(i as f64 + 0.5) * h, 0.0]
        } else {
            [(i as f64 + 0.5) * h, (j as f64 + 0.5) * h]
        }
    }

    /// Position of the face carrying component `axis` of cell `c`.
    #[inline]
    pub fn face(&self, c: usize, axis: usize) -> [f64; 2] {
        let mut x = self.center(c);
        x[axis] += 0.5 * self.h();
        x
    }

    /// Neighbour of `c` one step in the positive `axis` direction.
    #[inline]
    pub fn plus(&self, c: usize, axis: usize) -> usize {
        let m = self.n - 1;
        if self.d == 1 {
            (c + 1) & m
        } else if axis == 0 {
            (c + self.n) & (self.cells() - 1)
        } else {
            (c & !m) | ((c + 1) & m)
        }
    }

    /// Neighbour of `c` one step in the negative `axis` direction.
    #[inline]
    pub fn minus(&self, c: usize, axis: usize) -> usize {
        let m = self.n - 1;
        if self.d == 1 {
            (c + m) & m
        } else if axis == 0 {
            (c + self.cells() - self.n) & (self.cells() - 1)
        } else {
            (c & !m) | ((c + m) & m)
        }
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "d={} n={} vs d={} n={}",
                self.d, self.n, other.d, other.n
            )));
        }
        Ok(())
    }
}

/// A scalar field of cell averages.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    grid: Grid,
    values: Vec<f64>,
}

impl Field {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.cells() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} cells",
                values.len(),
                grid.cells()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite value at cell {i}")));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_vec_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.cells());
        Self { grid, values }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self { grid, values: vec![c; grid.cells()] }
    }

    /// Samples `f` at cell centres.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.cells()).map(|c| f(grid.center(c))).collect();
        Self { grid, values }
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `int rho`.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn l1(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn l2(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `||self - other||_{L^1}`.
    pub fn l1_distance(&self, other: &Field) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.grid.cell_volume())
    }

    /// `self + a * other`.
    pub fn axpy(&self, a: f64, other: &Field) -> Result<Field> {
        self.grid.check_same(&other.grid)?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| x + a * y).collect();
        Ok(Field { grid: self.grid, values })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn norms(&self) -> Norms {
        Norms { l1: self.l1(), l2: self.l2(), mass: self.mass() }
    }
}

/// Discrete norms of a scalar field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub mass: f64,
}

/// A staggered vector field: `d` face-valued components.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, comps: vec![vec![0.0; grid.cells()]; grid.d()] }
    }

    pub fn new(grid: Grid, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.d() || comps.iter().any(|c| c.len() != grid.cells()) {
            return Err(Error::GridMismatch("vector field components do not match the grid".into()));
        }
        Ok(Self { grid, comps })
    }

    /// Samples component `a` of `f` on its faces.
    pub fn from_fn(grid: Grid, f: impl Fn([f64; 2], usize) -> f64) -> Self {
        let comps = (0..grid.d())
            .map(|a| (0..grid.cells()).map(|c| f(grid.face(c, a), a)).collect())
            .collect();
        Self { grid, comps }
    }

    /// Constant vector field.
    pub fn constant(grid: Grid, v: [f64; 2]) -> Self {
        let comps = (0..grid.d()).map(|a| vec![v[a]; grid.cells()]).collect();
        Self { grid, comps }
    }

    #[inline]
    pub fn grid(&self) -> Grid {
        self.grid
    }

    #[inline]
    pub fn component(&self, a: usize) -> &[f64] {
        &self.comps[a]
    }

    #[inline]
    pub fn component_mut(&mut self, a: usize) -> &mut [f64] {
        &mut self.comps[a]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.comps
    }

    /// `int |v|^2`.
    pub fn squared_l2(&self) -> f64 {
        self.comps.iter().flatten().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()
    }

    pub fn l2(&self) -> f64 {
        self.squared_l2().sqrt()
    }

    /// `1/2 int |v|^2`.
    pub fn energy_density(&self) -> f64 {
        0.5 * self.squared_l2()
    }

    /// `int v . w`.
    pub fn dot(&self, other: &VectorField) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        let s: f64 = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>())
            .sum();
        Ok(s * self.grid.cell_volume())
    }

    pub fn scale(&mut self, s: f64) {
        self.comps.iter_mut().flatten().for_each(|v| *v *= s);
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &VectorField) -> Result<()> {
        self.grid.check_same(&other.grid)?;
        for (x, y) in self.comps.iter_mut().zip(&other.comps) {
            x.iter_mut().zip(y).for_each(|(x, y)| *x += a * y);
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Face gradient `(u[c + e_a] - u[c]) / h`.
pub fn grad(u: &Field) -> VectorField {
    let g = u.grid;
    let inv_h = 1.0 / g.h();
    let comps = (0..g.d())
        .map(|a| (0..g.cells()).map(|c| (u.values[g.plus(c, a)] - u.values[c]) * inv_h).collect())
        .collect();
    VectorField { grid: g, comps }
}

/// Cell divergence `sum_a (v_a[c] - v_a[c - e_a]) / h`.
pub fn div(v: &VectorField) -> Field {
    let g = v.grid;
    let inv_h = 1.0 / g.h();
    let mut out = vec![0.0; g.cells()];
    for a in 0..g.d() {
        let va = &v.comps[a];
        for (c, o) in out.iter_mut().enumerate() {
            *o += (va[c] - va[g.minus(c, a)]) * inv_h;
        }
    }
    Field { grid: g, values: out }
}

/// Compact Laplacian, `div(grad u)`.
pub fn laplacian(u: &Field) -> Field {
    let mut out = vec![0.0; u.grid.cells()];
    laplacian_into(u.grid, &u.values, &mut out);
    Field { grid: u.grid, values: out }
}

pub(crate) fn laplacian_into(g: Grid, u: &[f64], out: &mut [f64]) {
    let inv_h2 = 1.0 / (g.h() * g.h());
    for (c, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for a in 0..g.d() {
            s += u[g.plus(c, a)] + u[g.minus(c, a)] - 2.0 * u[c];
        }
        *o = s * inv_h2;
    }
}

/// Upwind flux `q_up v` on every face, where `q_up` is taken from the cell
/// the velocity points away from.
pub fn upwind_flux(q: &Field, v: &VectorField) -> Result<VectorField> {
    q.grid.check_same(&v.grid)?;
    let g = q.grid;
    let comps = (0..g.d())
        .map(|a| {
            v.comps[a]
                .iter()
                .enumerate()
                .map(|(c, &vf)| {
                    let up = if vf > 0.0 { c } else { g.plus(c, a) };
                    q.values[up] * vf
                })
                .collect()
        })
        .collect();
    Ok(VectorField { grid: g, comps })
}

/// Conservative upwind transport `div(q_up v)`.
pub fn div_upwind(q: &Field, v: &VectorField) -> Result<Field> {
    Ok(div(&upwind_flux(q, v)?))
}

/// Operand or result of [`apply_diff_operator`].
#[derive(Clone, Debug, PartialEq)]
pub enum Operand {
    Scalar(Field),
    Vector(VectorField),
}

#[derive(Clone, Debug, PartialEq)]
pub enum DiffOperator {
    GradCentered,
    DivCentered,
    /// Upwind divergence of `q v` for the given advecting field `v`.
    DivUpwind(VectorField),
    Laplacian,
}

/// Dispatches to [`grad`], [`div`], [`div_upwind`] or [`laplacian`].
pub fn apply_diff_operator(op: &DiffOperator, input: &Operand) -> Result<Operand> {
    match (op, input) {
        (DiffOperator::GradCentered, Operand::Scalar(u)) => Ok(Operand::Vector(grad(u))),
        (DiffOperator::DivCentered, Operand::Vector(v)) => Ok(Operand::Scalar(div(v))),
        (DiffOperator::DivUpwind(v), Operand::Scalar(q)) => Ok(Operand::Scalar(div_upwind(q, v)?)),
        (DiffOperator::Laplacian, Operand::Scalar(u)) => Ok(Operand::Scalar(laplacian(u))),
        _ => Err(Error::InvalidArgument("operator applied to the wrong kind of field".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn grid_validation() {
        assert!(Grid::new(3, 16).is_err());
        assert!(Grid::new(1, 12).is_err());
        assert!(Grid::new(1, 4).is_err());
        let g = Grid::new(2, 8).unwrap();
        assert_eq!(g.cells(), 64);
        assert_eq!(g.center(g.index(0, 7)), [0.0625, 0.9375]);
    }

    #[test]
    fn neighbours_wrap() {
        for d in [1, 2] {
            let g = Grid::new(d, 8).unwrap();
            for c in 0..g.cells() {
                for a in 0..d {
                    assert_eq!(g.minus(g.plus(c, a), a), c);
                    let [i, j] = g.multi_index(c);
                    let [ip, jp] = g.multi_index(g.plus(c, a));
                    if a == 0 {
                        assert_eq!((ip, jp), ((i + 1) % 8, j));
                    } else {
                        assert_eq!((ip, jp), (i, (j + 1) % 8));
                    }
                }
            }
        }
    }

    #[test]
    fn constant_has_zero_gradient_and_its_mass() {
        let g = Grid::new(2, 16).unwrap();
        let u = Field::constant(g, 2.5);
        assert_eq!(grad(&u).max_abs(), 0.0);
        assert!((u.mass() - 2.5).abs() < 1e-14);
    }

    #[test]
    fn laplacian_is_div_of_grad() {
        let g = Grid::new(2, 16).unwrap();
        let u = Field::from_fn(g, |x| (2.0 * PI * x[0]).sin() * (4.0 * PI * x[1]).cos() + x[0]);
        let a = laplacian(&u);
        let b = div(&grad(&u));
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn operator_dispatch() {
        let g = Grid::new(1, 8).unwrap();
        let u = Field::constant(g, 1.0);
        assert!(apply_diff_operator(&DiffOperator::DivCentered, &Operand::Scalar(u.clone())).is_err());
        let Operand::Vector(v) = apply_diff_operator(&DiffOperator::GradCentered, &Operand::Scalar(u)).unwrap() else {
            panic!()
        };
        assert_eq!(v.max_abs(), 0.0);
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let a = Field::zeros(Grid::new(1, 8).unwrap());
        let b = Field::zeros(Grid::new(1, 16).unwrap());
        assert!(matches!(a.l1_distance(&b), Err(Error::GridMismatch(_))));
        let v = VectorField::zeros(Grid::new(1, 16).unwrap());
        assert!(div_upwind(&a, &v).is_err());
    }
}
