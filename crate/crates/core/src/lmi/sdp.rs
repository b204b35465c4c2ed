//! Primal log-det barrier method for small dense LMI problems
//! `maximize c'y  s.t.  F_j(y) = F_j0 + sum_i y_i F_ji > 0`, `b_k + a_k'y > 0`.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::linalg::{lstsq, Matrix, Vector};

/// One symmetric affine constraint `F0 + sum_i y_i F_i > 0`.
#[derive(Debug, Clone)]
pub struct AffineBlock {
    pub f0: Matrix,
    pub coeffs: Vec<Matrix>,
}

impl AffineBlock {
    pub fn size(&self) -> usize {
        self.f0.nrows()
    }

    pub fn eval(&self, y: &[f64]) -> Matrix {
        let mut f = self.f0.clone();
        for (yi, fi) in y.iter().zip(&self.coeffs) {
            if *yi != 0.0 {
                f += fi * *yi;
            }
        }
        f
    }
}

/// Scalar constraint `b + a'y > 0`.
#[derive(Debug, Clone)]
pub struct LinearConstraint {
    pub b: f64,
    pub a: Vector,
}

impl LinearConstraint {
    fn slack(&self, y: &[f64]) -> f64 {
        self.b + self.a.iter().zip(y).map(|(a, v)| a * v).sum::<f64>()
    }
}

#[derive(Debug, Clone)]
pub struct SdpProblem {
    pub blocks: Vec<AffineBlock>,
    pub linear: Vec<LinearConstraint>,
    pub objective: Vector,
}

#[derive(Debug, Clone, Copy)]
pub struct SdpOptions {
    pub max_outer: usize,
    pub max_newton: usize,
    /// Barrier weight growth per outer step.
    pub mu: f64,
    /// Declare "positive" once the duality gap is below this fraction of the value.
    pub gap_rel: f64,
    /// Gap below which the sign of the current value is accepted as is.
    pub abs_floor: f64,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            max_outer: 60,
            max_newton: 200,
            mu: 10.0,
            gap_rel: 0.1,
            abs_floor: 1e-12,
        }
    }
}

/// Result of a sign decision on the optimal value.
#[derive(Debug, Clone)]
pub struct SdpOutcome {
    pub y: Vec<f64>,
    /// Objective at the returned point.
    pub value: f64,
    /// Upper bound on the optimal value (`value + nu / tau`).
    pub bound: f64,
    pub positive: bool,
    pub newton_steps: usize,
}

impl SdpProblem {
    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    fn barrier_parameter(&self) -> f64 {
        self.blocks.iter().map(|b| b.size() as f64).sum::<f64>() + self.linear.len() as f64
    }

    fn validate(&self) -> Result<()> {
        let m = self.n_vars();
        for (j, b) in self.blocks.iter().enumerate() {
            if b.coeffs.len() != m {
                return Err(Error::dim(format!("SDP block {j} coefficient count"), m, b.coeffs.len()));
            }
            let k = b.size();
            if b.f0.ncols() != k || b.coeffs.iter().any(|f| f.shape() != (k, k)) {
                return Err(Error::dim(format!("SDP block {j} shape"), format!("{k}x{k}"), "mismatch"));
            }
        }
        if let Some(c) = self.linear.iter().find(|c| c.a.len() != m) {
            return Err(Error::dim("SDP linear constraint length", m, c.a.len()));
        }
        Ok(())
    }

    /// `Some(-sum log det F_j(y))` when every block is positive definite.
    fn barrier(&self, y: &[f64]) -> Option<f64> {
        let mut total = 0.0;
        for b in &self.blocks {
            let chol = Cholesky::new(b.eval(y))?;
            total -= 2.0 * chol.l_dirty().diagonal().iter().take(b.size()).map(|d| d.ln()).sum::<f64>();
        }
        for c in &self.linear {
            let s = c.slack(y);
            if !(s > 0.0) {
                return None;
            }
            total -= s.ln();
        }
        total.is_finite().then_some(total)
    }

    pub fn is_strictly_feasible(&self, y: &[f64]) -> bool {
        self.barrier(y).is_some()
    }

    /// Gradient and Hessian of the barrier term.
    fn barrier_derivatives(&self, y: &[f64]) -> Option<(Vector, Matrix)> {
        let m = self.n_vars();
        let mut grad = Vector::zeros(m);
        let mut hess = Matrix::zeros(m, m);
        for b in &self.blocks {
            let k = b.size();
            let chol = Cholesky::new(b.eval(y))?;
            let l = chol.l();
            // columns: vec(L^-1 F_i L^-T)
            let mut stacked = Matrix::zeros(k * k, m);
            for (i, fi) in b.coeffs.iter().enumerate() {
                let left = l.solve_lower_triangular(fi)?;
                let tilde = l.solve_lower_triangular(&left.transpose())?;
                grad[i] -= tilde.trace();
                stacked.column_mut(i).copy_from_slice(tilde.as_slice());
            }
            hess += stacked.transpose() * &stacked;
        }
        for c in &self.linear {
            let s = c.slack(y);
            if !(s > 0.0) {
                return None;
            }
            grad.axpy(-1.0 / s, &c.a, 1.0);
            hess.ger(1.0 / (s * s), &c.a, &c.a, 1.0);
        }
        Some((grad, hess))
    }

    fn newton_direction(grad: &Vector, hess: &Matrix) -> Result<Vector> {
        if let Some(ch) = Cholesky::new(hess.clone()) {
            return Ok(-ch.solve(grad));
        }
        let g = Matrix::from_column_slice(grad.len(), 1, grad.as_slice());
        let d = lstsq(hess, &g)?;
        Ok(-Vector::from_column_slice(d.as_slice()))
    }

    /// Approximately minimize `-tau c'y + barrier(y)` from a strictly feasible `y`.
    fn center(&self, y: &mut Vec<f64>, tau: f64, opts: &SdpOptions, steps: &mut usize) -> Result<()> {
        let c = &self.objective;
        let phi = |y: &[f64], b: f64| -tau * c.iter().zip(y).map(|(ci, yi)| ci * yi).sum::<f64>() + b;
        let mut current = phi(y, self.barrier(y).ok_or_else(|| {
            Error::NumericalBreakdown("SDP centering started from an infeasible point".into())
        })?);
        for _ in 0..opts.max_newton {
            let (bg, hess) = self
                .barrier_derivatives(y)
                .ok_or_else(|| Error::NumericalBreakdown("SDP Cholesky factorization".into()))?;
            let grad = bg - c * tau;
            let dy = Self::newton_direction(&grad, &hess)?;
            let dec2 = -grad.dot(&dy);
            if !dec2.is_finite() {
                return Err(Error::NumericalBreakdown("SDP Newton decrement".into()));
            }
            if dec2 <= 1e-9 {
                break;
            }
            *steps += 1;
            let mut s = if dec2 < 0.0625 { 1.0 } else { 1.0 / (1.0 + dec2.sqrt()) };
            let mut accepted = false;
            while s > 1e-14 {
                let trial: Vec<f64> = y.iter().zip(dy.iter()).map(|(a, d)| a + s * d).collect();
                if let Some(b) = self.barrier(&trial) {
                    let value = phi(&trial, b);
                    if value <= current - 0.01 * s * dec2 {
                        *y = trial;
                        current = value;
                        accepted = true;
                        break;
                    }
                }
                s *= 0.5;
            }
            if !accepted {
                // stalled at the resolution of the arithmetic
                break;
            }
        }
        Ok(())
    }

    /// Decide whether the optimal value is positive, starting from a strictly
    /// feasible `y0`.
    pub fn decide_sign(&self, y0: &[f64], opts: &SdpOptions) -> Result<SdpOutcome> {
        self.validate()?;
        if y0.len() != self.n_vars() {
            return Err(Error::dim("SDP start point", self.n_vars(), y0.len()));
        }
        if !self.is_strictly_feasible(y0) {
            return Err(Error::InvalidArgument("SDP start point is not strictly feasible".into()));
        }
        let nu = self.barrier_parameter();
        let value_of = |y: &[f64]| self.objective.iter().zip(y).map(|(c, v)| c * v).sum::<f64>();
        let mut y = y0.to_vec();
        let mut tau = nu / value_of(&y).abs().max(1.0);
        let mut steps = 0;
        for _ in 0..opts.max_outer {
            self.center(&mut y, tau, opts, &mut steps)?;
            let value = value_of(&y);
            let gap = nu / tau;
            let outcome = |positive| SdpOutcome {
                y: y.clone(),
                value,
                bound: value + gap,
                positive,
                newton_steps: steps,
            };
            if value > 0.0 && gap <= opts.gap_rel * value {
                return Ok(outcome(true));
            }
            if value + gap < 0.0 {
                return Ok(outcome(false));
            }
            if gap < opts.abs_floor {
                return Ok(outcome(value > opts.abs_floor));
            }
            tau *= opts.mu;
        }
        let value = value_of(&y);
        Ok(SdpOutcome {
            bound: value + nu / tau,
            positive: value > opts.abs_floor,
            value,
            y,
            newton_steps: steps,
        })
    }
}
