//! Full-batch damped Newton minimization with Armijo backtracking.
//!
//! Used for the logistic risk model and the softmax policies. Both objectives
//! are smooth and convex, so Newton converges in a handful of iterations and
//! the backtracking line search keeps the loss trace non-increasing.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub trait Objective {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn hessian(&self, x: &[f64]) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonConfig {
    /// Stop when the gradient ∞-norm falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    /// Objective value at the start and after every accepted step.
    pub loss_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves `(h + shift I) d = rhs`, raising the shift until Cholesky succeeds.
fn damped_solve(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = h.diagonal().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let mut shift = 0.0;
    for _ in 0..30 {
        let mut m = h.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += shift;
        }
        if let Some(chol) = m.cholesky() {
            return Some(chol.solve(rhs));
        }
        shift = if shift == 0.0 { 1e-12 * scale } else { shift * 10.0 };
    }
    None
}

pub fn minimize(obj: &impl Objective, x0: Vec<f64>, cfg: NewtonConfig) -> Result<NewtonResult> {
    let mut x = x0;
    let mut f = obj.value(&x);
    if !f.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let g = obj.gradient(&x);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss);
        }
        if inf_norm(&g) < cfg.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let gv = DVector::from_column_slice(&g);
        let dir = match damped_solve(&obj.hessian(&x), &(-&gv)) {
            Some(d) if d.dot(&gv) < 0.0 => d,
            _ => -gv.clone(),
        };
        let slope = dir.dot(&gv);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, d)| a + step * d).collect();
            let fc = obj.value(&cand);
            if fc.is_finite() && fc <= f + ARMIJO_C * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some((cand, fc)) => {
                x = cand;
                f = fc;
                trace.push(f);
            }
            // No representable decrease left: we are at the optimum to machine precision.
            None => {
                converged = inf_norm(&g) < cfg.tol.sqrt();
                break;
            }
        }
    }
    Ok(NewtonResult {
        x,
        loss_trace: trace,
        converged,
        iterations,
    })
}

/// ln(1 + e^z) without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Logistic function, stable for large |z|.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
