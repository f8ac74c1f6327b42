//! Box-constrained quasi-Newton minimisation.
//!
//! BFGS on the inverse Hessian with a backtracking Armijo search along the
//! projected path. Variables sitting on a bound with the gradient pushing
//! outward are held fixed for the step. Near the optimum, objective
//! differences drown in rounding long before the gradient does, so a
//! Newton polish driven by the gradient norm finishes the job.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 30;

/// Objective returning `(f, ∇f)`; errors are treated as an infinite value.
pub trait Objective {
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>> Objective for F {
    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

#[derive(Clone, Debug)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    fn project(&self, x: &mut [f64]) {
        for i in 0..x.len() {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    /// Variables held at a bound by the gradient.
    fn active(&self, x: &[f64], g: &[f64]) -> Vec<bool> {
        (0..x.len())
            .map(|i| (x[i] <= self.lower[i] && g[i] > 0.0) || (x[i] >= self.upper[i] && g[i] < 0.0))
            .collect()
    }

    /// Max-norm of the projected gradient.
    pub fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        let active = self.active(x, g);
        g.iter()
            .zip(active)
            .filter(|(_, a)| !a)
            .fold(0.0, |m, (v, _)| m.max(v.abs()))
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective values at accepted iterates, starting point first.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimises `obj` from `x0` until the projected gradient max-norm drops
/// below `tol`, the line search stalls, or `max_iter` iterations pass.
pub fn minimize_bfgs(obj: &impl Objective, x0: &[f64], bounds: &Bounds, tol: f64, max_iter: usize) -> Result<Outcome> {
    minimize_bfgs_with(obj, x0, bounds, tol, max_iter, None)
}

/// As [`minimize_bfgs`], starting from the inverse Hessian `h0` when given.
pub fn minimize_bfgs_with(
    obj: &impl Objective,
    x0: &[f64],
    bounds: &Bounds,
    tol: f64,
    max_iter: usize,
    h0: Option<&DMatrix<f64>>,
) -> Result<Outcome> {
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut f, mut g) = obj.eval(&x)?;
    let seeded = h0.filter(|h| h.nrows() == n && h.ncols() == n);
    let mut h = seeded.cloned().unwrap_or_else(|| DMatrix::<f64>::identity(n, n));
    let mut scaled = seeded.is_some();
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        if bounds.projected_gradient_norm(&x, &g) < tol {
            converged = true;
            break;
        }
        let active = bounds.active(&x, &g);
        let mut d = vec![0.0; n];
        let direction = |h: &DMatrix<f64>, d: &mut [f64]| {
            for i in 0..n {
                d[i] = if active[i] {
                    0.0
                } else {
                    -(0..n).filter(|&k| !active[k]).map(|k| h[(i, k)] * g[k]).sum::<f64>()
                };
            }
        };
        direction(&h, &mut d);
        if !(dot(&d, &g) < 0.0) {
            h = DMatrix::identity(n, n);
            scaled = false;
            direction(&h, &mut d);
        }
        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut step = if scaled { 1.0 } else { (1.0 / dmax).min(1.0) };

        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            bounds.project(&mut trial);
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if moved.iter().all(|m| *m == 0.0) {
                break;
            }
            if let Ok((f_new, g_new)) = obj.eval(&trial) {
                let armijo = f_new <= f + ARMIJO_C1 * dot(&g, &moved);
                // within rounding of f, a smaller gradient is progress
                let flat = f_new <= f + 1e-12 * f.abs().max(1.0)
                    && bounds.projected_gradient_norm(&trial, &g_new) < bounds.projected_gradient_norm(&x, &g);
                if f_new.is_finite() && (armijo || flat) {
                    accepted = Some((trial, f_new, g_new, moved));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new, s)) = accepted else {
            break;
        };
        iterations += 1;
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if !scaled {
                h = DMatrix::identity(n, n) * (sy / dot(&y, &y));
                scaled = true;
            }
            let sv = DVector::from_vec(s);
            let yv = DVector::from_vec(y);
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            h -= (&hy * sv.transpose() + &sv * hy.transpose()) * rho;
            h += (&sv * sv.transpose()) * (rho * rho * yhy + rho);
        }
        x = x_new;
        f = f_new;
        g = g_new;
        trace.push(f);
    }
    if !converged && bounds.projected_gradient_norm(&x, &g) < tol {
        converged = true;
    }
    Ok(Outcome {
        x,
        f,
        g,
        iterations,
        converged,
        trace,
    })
}

/// Central-difference Hessian of `obj` built from its analytic gradient,
/// symmetrised.
pub fn numerical_hessian(obj: &impl Objective, x: &[f64]) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = 1e-5 * x[k].abs().max(1.0);
        let mut up = x.to_vec();
        let mut dn = x.to_vec();
        up[k] += h;
        dn[k] -= h;
        let (_, gu) = obj.eval(&up)?;
        let (_, gd) = obj.eval(&dn)?;
        for i in 0..n {
            hess[(i, k)] = (gu[i] - gd[i]) / (2.0 * h);
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// Newton steps on the free variables using a numerical Hessian, accepted
/// while they shrink the projected gradient. Stops at `tol` or when the
/// Hessian is not positive definite.
pub fn newton_polish(
    obj: &impl Objective,
    mut out: Outcome,
    bounds: &Bounds,
    tol: f64,
    max_steps: usize,
) -> Result<Outcome> {
    for _ in 0..max_steps {
        let norm = bounds.projected_gradient_norm(&out.x, &out.g);
        if norm < tol {
            out.converged = true;
            break;
        }
        let active = bounds.active(&out.x, &out.g);
        let hess = numerical_hessian(obj, &out.x)?;
        // flat directions (unidentified parameters) stay where they are
        let scale = hess.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let free: Vec<usize> = (0..out.x.len())
            .filter(|&i| !active[i] && hess[(i, i)].abs() > 1e-10 * scale)
            .collect();
        let sub = DMatrix::from_fn(free.len(), free.len(), |a, b| hess[(free[a], free[b])]);
        let Some(chol) = sub.cholesky() else {
            break;
        };
        let rhs = DVector::from_fn(free.len(), |a, _| -out.g[free[a]]);
        let step = chol.solve(&rhs);
        let mut improved = false;
        let mut scale = 1.0;
        for _ in 0..8 {
            let mut trial = out.x.clone();
            for (a, &i) in free.iter().enumerate() {
                trial[i] += scale * step[a];
            }
            bounds.project(&mut trial);
            if let Ok((f_new, g_new)) = obj.eval(&trial) {
                let slack = 1e-12 * out.f.abs().max(1.0);
                if f_new.is_finite() && f_new <= out.f + slack && bounds.projected_gradient_norm(&trial, &g_new) < norm
                {
                    out.x = trial;
                    out.f = f_new;
                    out.g = g_new;
                    out.iterations += 1;
                    out.trace.push(f_new);
                    improved = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }
    if bounds.projected_gradient_norm(&out.x, &out.g) < tol {
        out.converged = true;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let out = minimize_bfgs(&rosenbrock, &[-1.2, 1.0], &Bounds::unbounded(2), 1e-8, 500).unwrap();
        let out = newton_polish(&rosenbrock, out, &Bounds::unbounded(2), 1e-8, 10).unwrap();
        assert!(out.converged);
        assert!((out.x[0] - 1.0).abs() < 1e-6 && (out.x[1] - 1.0).abs() < 1e-6);
        assert!(out.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn respects_bounds() {
        // minimum of (x - 2)^2 + (y + 1)^2 on [0, 1] x [0, 1] is (1, 0)
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((
                (x[0] - 2.0).powi(2) + (x[1] + 1.0).powi(2),
                vec![2.0 * (x[0] - 2.0), 2.0 * (x[1] + 1.0)],
            ))
        };
        let bounds = Bounds {
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
        };
        let out = minimize_bfgs(&obj, &[0.5, 0.5], &bounds, 1e-10, 100).unwrap();
        assert!(out.converged);
        assert_eq!(out.x, vec![1.0, 0.0]);
    }

    #[test]
    fn hessian_of_quadratic() {
        let obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            Ok((
                x[0] * x[0] + 3.0 * x[0] * x[1],
                vec![2.0 * x[0] + 3.0 * x[1], 3.0 * x[0]],
            ))
        };
        let h = numerical_hessian(&obj, &[0.3, -2.0]).unwrap();
        assert!((h[(0, 0)] - 2.0).abs() < 1e-8);
        assert!((h[(0, 1)] - 3.0).abs() < 1e-8);
        assert!(h[(1, 1)].abs() < 1e-8);
    }
}
