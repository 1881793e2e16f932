//! Limited-memory BFGS with Armijo backtracking.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsConfig {
    pub max_iter: usize,
    /// Stop when `||grad||_2 <= grad_tol`.
    pub grad_tol: f64,
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor of the backtracking.
    pub backtrack: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { max_iter: 200, grad_tol: 1e-8, memory: 10, armijo: 1e-4, backtrack: 0.5, max_line_search: 40 }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub history: Vec<f64>,
    pub converged: bool,
    pub line_search_failed: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f`; `eval(x, grad)` returns `f(x)` and writes the gradient.
/// Evaluation errors abort the run.
pub fn minimize<E>(
    x0: Vec<f64>,
    cfg: &LbfgsConfig,
    mut eval: impl FnMut(&[f64], &mut [f64]) -> Result<f64, E>,
) -> Result<LbfgsResult, E> {
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = eval(&x, &mut g)?;
    let mut history = vec![f];
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut line_search_failed = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        if dot(&g, &g).sqrt() <= cfg.grad_tol {
            break;
        }
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &d);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut step = if mem.is_empty() { 1.0 / dot(&g, &g).sqrt().max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..cfg.max_line_search {
            for i in 0..n {
                x_new[i] = x[i] + step * d[i];
            }
            let f_new = eval(&x_new, &mut g_new)?;
            if f_new.is_finite() && f_new <= f + cfg.armijo * step * slope {
                accepted = Some(f_new);
                break;
            }
            step *= cfg.backtrack;
        }
        let Some(f_new) = accepted else {
            line_search_failed = true;
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if mem.len() == cfg.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        history.push(f);
        iterations += 1;
    }
    let grad_norm = dot(&g, &g).sqrt();
    Ok(LbfgsResult {
        x,
        f,
        grad_norm,
        iterations,
        history,
        converged: grad_norm <= cfg.grad_tol,
        line_search_failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let cfg = LbfgsConfig { max_iter: 500, ..Default::default() };
        let r = minimize(vec![-1.2, 1.0], &cfg, |x, g| {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            Ok::<_, ()>((1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2))
        })
        .unwrap();
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_in_many_dimensions() {
        let n = 50;
        let r = minimize(vec![1.0; n], &LbfgsConfig::default(), |x, g| {
            let mut f = 0.0;
            for i in 0..n {
                let c = 1.0 + i as f64;
                g[i] = c * (x[i] - 0.5);
                f += 0.5 * c * (x[i] - 0.5).powi(2);
            }
            Ok::<_, ()>(f)
        })
        .unwrap();
        assert!(r.converged);
        assert!(r.x.iter().all(|v| (v - 0.5).abs() < 1e-8));
    }
}
