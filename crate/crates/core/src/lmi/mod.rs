//! Observer-gain synthesis and certification through linear matrix
//! inequalities, plus line searches over the decay rate `gamma` and the
//! sampling intensity `lambda`.
//!
//! All problems are posed with a homogeneous margin `t`: maximize `t` subject
//! to `Block <= -t I`, `P_i >= t I` and `tr P1 + tr P2 = trace_bound`. The
//! LMI is strictly feasible exactly when the optimal margin is positive.

pub mod sdp;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, block, ensure_shape, ensure_square, eye, he, zeros, Matrix, Vector};
use sdp::{AffineBlock, SdpOptions, SdpProblem};

/// Synthesis LMI data for one `(gamma, lambda)` pair.
#[derive(Debug, Clone)]
pub struct LmiProblem {
    pub frak_a: Matrix,
    pub h2: Matrix,
    pub lambda: f64,
    pub gamma: f64,
    pub n: usize,
    pub p: usize,
}

#[derive(Debug, Clone)]
pub struct LmiSettings {
    /// Defaults to `10 (n + p)`.
    pub trace_bound: Option<f64>,
    pub sdp: SdpOptions,
    /// How often the box on `(Qbar, Rbar)` may be doubled when it turns active.
    pub max_radius_doublings: usize,
}

impl Default for LmiSettings {
    fn default() -> Self {
        LmiSettings {
            trace_bound: None,
            sdp: SdpOptions::default(),
            max_radius_doublings: 6,
        }
    }
}

impl LmiSettings {
    fn trace_bound(&self, n: usize, p: usize) -> f64 {
        self.trace_bound.unwrap_or(10.0 * (n + p) as f64)
    }
}

#[derive(Debug, Clone)]
pub struct LmiSolution {
    pub p1: Matrix,
    pub p2: Matrix,
    pub qbar: Matrix,
    pub rbar: Matrix,
    pub q: Matrix,
    pub w: Matrix,
    /// Largest eigenvalue of the assembled block at the solution.
    pub certificate: f64,
    /// Optimal margin `t`.
    pub margin: f64,
    pub gamma: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone)]
pub enum Feasibility {
    Feasible(Box<LmiSolution>),
    /// `best_violation` is `-t` at the best point found.
    Infeasible { best_violation: f64 },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible(_))
    }
}

fn check_rates(lambda: f64, gamma: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be nonnegative, got {gamma}")));
    }
    Ok(())
}

fn check_pair(frak_a: &Matrix, h2: &Matrix) -> Result<(usize, usize)> {
    let n = ensure_square(frak_a, "frak_A")?;
    if h2.ncols() != n || h2.nrows() == 0 {
        return Err(Error::dim("H2 (p x n)", format!("p x {n}"), format!("{}x{}", h2.nrows(), h2.ncols())));
    }
    Ok((n, h2.nrows()))
}

pub fn build_synthesis_lmi(frak_a: &Matrix, h2: &Matrix, lambda: f64, gamma: f64) -> Result<LmiProblem> {
    let (n, p) = check_pair(frak_a, h2)?;
    check_rates(lambda, gamma)?;
    Ok(LmiProblem {
        frak_a: frak_a.clone(),
        h2: h2.clone(),
        lambda,
        gamma,
        n,
        p,
    })
}

impl LmiProblem {
    /// `[[He(P1 A - Qbar H2) + gamma P1, -A' H2' P2 + H2' Rbar' - Qbar], [*, He(Rbar) + (gamma - lambda) P2]]`.
    pub fn block(&self, p1: &Matrix, p2: &Matrix, qbar: &Matrix, rbar: &Matrix) -> Matrix {
        let a = &self.frak_a;
        let h2 = &self.h2;
        let tl = he(&(p1 * a - qbar * h2)) + p1 * self.gamma;
        let tr = -(a.transpose() * h2.transpose() * p2) + h2.transpose() * rbar.transpose() - qbar;
        let br = he(rbar) + p2 * (self.gamma - self.lambda);
        block(&[&[&tl, &tr], &[&tr.transpose(), &br]]).expect("consistent LMI block")
    }
}

/// `Q = P1^-1 Qbar`, `W = P2^-1 Rbar - H2 Q`.
pub fn recover_observer_gains(
    p1: &Matrix,
    p2: &Matrix,
    qbar: &Matrix,
    rbar: &Matrix,
    h2: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let q = p1
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NumericalBreakdown("P1 is not positive definite".into()))?
        .solve(qbar);
    let r_w = p2
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NumericalBreakdown("P2 is not positive definite".into()))?
        .solve(rbar);
    let w = r_w - h2 * &q;
    Ok((q, w))
}

/// Error-dynamics flow `M` and jump `N` of the observer error process.
#[derive(Debug, Clone)]
pub struct MBlock {
    pub m: Matrix,
    pub n_jump: Matrix,
    /// `W + H2 Q`.
    pub r_w: Matrix,
}

pub fn build_m(frak_a: &Matrix, h2: &Matrix, q: &Matrix, w: &Matrix) -> Result<MBlock> {
    let (n, p) = check_pair(frak_a, h2)?;
    ensure_shape(q, n, p, "Q (n x p)")?;
    ensure_shape(w, p, p, "W (p x p)")?;
    let r_w = w + h2 * q;
    let m = block(&[
        &[&(frak_a - q * h2), &(-q)],
        &[&(-(h2 * frak_a) + &r_w * h2), &r_w],
    ])?;
    let n_jump = linalg::block_diag(&[&eye(n), &zeros(p, p)]);
    Ok(MBlock { m, n_jump, r_w })
}

/// Block of the fixed-gain LMI in `(P1, P2)`.
pub fn verification_block(
    frak_a: &Matrix,
    h2: &Matrix,
    q: &Matrix,
    w: &Matrix,
    lambda: f64,
    gamma: f64,
    p1: &Matrix,
    p2: &Matrix,
) -> Matrix {
    let r_w = w + h2 * q;
    let tl = he(&(p1 * (frak_a - q * h2))) + p1 * gamma;
    let tr = -(frak_a.transpose() * h2.transpose() * p2) + h2.transpose() * r_w.transpose() * p2 - p1 * q;
    let br = he(&(p2 * &r_w)) + p2 * (gamma - lambda);
    block(&[&[&tl, &tr], &[&tr.transpose(), &br]]).expect("consistent LMI block")
}

/// Index layout `[svec P1 without its (0,0) entry, svec P2, extra, t]`.
/// `P1[(0,0)]` is eliminated through `tr P1 + tr P2 = trace_bound`.
struct Layout {
    n: usize,
    p: usize,
    extra: usize,
}

impl Layout {
    fn s1(&self) -> usize {
        self.n * (self.n + 1) / 2 - 1
    }
    fn s2(&self) -> usize {
        self.p * (self.p + 1) / 2
    }
    fn total(&self) -> usize {
        self.s1() + self.s2() + self.extra + 1
    }
    fn t(&self) -> usize {
        self.total() - 1
    }
    fn extra_range(&self) -> std::ops::Range<usize> {
        let start = self.s1() + self.s2();
        start..start + self.extra
    }
}

/// `(row, col)` of the `idx`-th entry of the upper-triangular column-major svec.
fn svec_position(idx: usize) -> (usize, usize) {
    let mut j = 0;
    while (j + 1) * (j + 2) / 2 <= idx {
        j += 1;
    }
    (idx - j * (j + 1) / 2, j)
}

fn sym_unit(k: usize, idx: usize) -> Matrix {
    let (i, j) = svec_position(idx);
    let mut e = zeros(k, k);
    e[(i, j)] = 1.0;
    e[(j, i)] = 1.0;
    e
}

/// A homogeneous margin problem. `lin` maps `(P1, P2, extra)` linearly to the
/// symmetric block that must be negative definite.
struct MarginSdp<'a> {
    layout: Layout,
    lin: &'a dyn Fn(&Matrix, &Matrix, &[f64]) -> Matrix,
    trace_bound: f64,
    radius: f64,
}

struct MarginPoint {
    p1: Matrix,
    p2: Matrix,
    extra: Vec<f64>,
    t: f64,
    positive: bool,
}

impl MarginSdp<'_> {
    /// `(P1, P2, extra)` contributed by variable `idx` (the affine part for `None`).
    fn direction(&self, idx: Option<usize>) -> (Matrix, Matrix, Vec<f64>) {
        let l = &self.layout;
        let mut p1 = zeros(l.n, l.n);
        let mut p2 = zeros(l.p, l.p);
        let mut ex = vec![0.0; l.extra];
        match idx {
            None => p1[(0, 0)] = self.trace_bound,
            Some(i) if i < l.s1() => {
                let (r, c) = svec_position(i + 1);
                p1 = sym_unit(l.n, i + 1);
                if r == c {
                    p1[(0, 0)] = -1.0;
                }
            }
            Some(i) if i < l.s1() + l.s2() => {
                let k = i - l.s1();
                let (r, c) = svec_position(k);
                p2 = sym_unit(l.p, k);
                if r == c {
                    p1[(0, 0)] = -1.0;
                }
            }
            Some(i) if i < l.t() => ex[i - l.s1() - l.s2()] = 1.0,
            Some(_) => {}
        }
        (p1, p2, ex)
    }

    fn unpack(&self, y: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
        let (mut p1, mut p2, mut ex) = self.direction(None);
        for (i, &yi) in y.iter().enumerate().take(self.layout.t()) {
            let (d1, d2, de) = self.direction(Some(i));
            p1 += d1 * yi;
            p2 += d2 * yi;
            for (e, d) in ex.iter_mut().zip(de) {
                *e += d * yi;
            }
        }
        (p1, p2, ex)
    }

    fn build(&self) -> SdpProblem {
        let l = &self.layout;
        let m = l.total();
        let k = l.n + l.p;
        let (c1, c2, cex) = self.direction(None);
        let mut main = Vec::with_capacity(m);
        let mut b1 = Vec::with_capacity(m);
        let mut b2 = Vec::with_capacity(m);
        for idx in 0..m {
            if idx == l.t() {
                main.push(-eye(k));
                b1.push(-eye(l.n));
                b2.push(-eye(l.p));
            } else {
                let (d1, d2, de) = self.direction(Some(idx));
                main.push(-(self.lin)(&d1, &d2, &de));
                b1.push(d1);
                b2.push(d2);
            }
        }
        let mut linear = Vec::with_capacity(2 * l.extra);
        for j in l.extra_range() {
            for sign in [1.0, -1.0] {
                let mut a = Vector::zeros(m);
                a[j] = sign;
                linear.push(sdp::LinearConstraint { b: self.radius, a });
            }
        }
        let mut objective = Vector::zeros(m);
        objective[l.t()] = 1.0;
        SdpProblem {
            blocks: vec![
                AffineBlock { f0: -(self.lin)(&c1, &c2, &cex), coeffs: main },
                AffineBlock { f0: c1, coeffs: b1 },
                AffineBlock { f0: c2, coeffs: b2 },
            ],
            linear,
            objective,
        }
    }

    fn start(&self) -> Result<Vec<f64>> {
        let l = &self.layout;
        let c = self.trace_bound / (l.n + l.p) as f64;
        let mut y = vec![0.0; l.total()];
        for (i, yi) in y.iter_mut().enumerate().take(l.s1() + l.s2()) {
            let (r, col) = if i < l.s1() { svec_position(i + 1) } else { svec_position(i - l.s1()) };
            if r == col {
                *yi = c;
            }
        }
        let (p1, p2, extra) = self.unpack(&y);
        let lmin = linalg::min_eig_sym(&(-(self.lin)(&p1, &p2, &extra)))?;
        let top = lmin.min(c);
        y[l.t()] = top - 0.1 * (1.0 + top.abs());
        Ok(y)
    }

    fn solve(&self, opts: &SdpOptions) -> Result<MarginPoint> {
        let problem = self.build();
        let y0 = self.start()?;
        let out = problem.decide_sign(&y0, opts)?;
        let (p1, p2, extra) = self.unpack(&out.y);
        Ok(MarginPoint {
            p1,
            p2,
            extra,
            t: out.y[self.layout.t()],
            positive: out.positive,
        })
    }
}

fn sdp_options(settings: &LmiSettings, scale: f64) -> SdpOptions {
    SdpOptions {
        abs_floor: settings.sdp.abs_floor * scale.max(1.0),
        ..settings.sdp
    }
}

/// Solve the synthesis LMI. Deterministic: fixed start point and schedule.
pub fn solve_sdp_feasibility(problem: &LmiProblem, settings: &LmiSettings) -> Result<Feasibility> {
    let (n, p) = (problem.n, problem.p);
    let trace_bound = settings.trace_bound(n, p);
    let scale = trace_bound * (1.0 + problem.frak_a.norm());
    let opts = sdp_options(settings, scale);
    let lin = |p1: &Matrix, p2: &Matrix, ex: &[f64]| {
        let qbar = Matrix::from_column_slice(n, p, &ex[..n * p]);
        let rbar = Matrix::from_column_slice(p, p, &ex[n * p..]);
        problem.block(p1, p2, &qbar, &rbar)
    };
    let mut radius = scale;
    let mut point = None;
    for _ in 0..=settings.max_radius_doublings {
        let sdp = MarginSdp {
            layout: Layout { n, p, extra: n * p + p * p },
            lin: &lin,
            trace_bound,
            radius,
        };
        let pt = sdp.solve(&opts)?;
        let active = pt.extra.iter().fold(0.0f64, |a, v| a.max(v.abs())) >= 0.9 * radius;
        point = Some(pt);
        if !active {
            break;
        }
        radius *= 2.0;
    }
    let pt = point.expect("at least one solve");
    if !pt.positive {
        return Ok(Feasibility::Infeasible { best_violation: -pt.t });
    }
    let qbar = Matrix::from_column_slice(n, p, &pt.extra[..n * p]);
    let rbar = Matrix::from_column_slice(p, p, &pt.extra[n * p..]);
    let (q, w) = recover_observer_gains(&pt.p1, &pt.p2, &qbar, &rbar, &problem.h2)?;
    let certificate = linalg::max_eig_sym(&problem.block(&pt.p1, &pt.p2, &qbar, &rbar))?;
    Ok(Feasibility::Feasible(Box::new(LmiSolution {
        p1: pt.p1,
        p2: pt.p2,
        qbar,
        rbar,
        q,
        w,
        certificate,
        margin: pt.t,
        gamma: problem.gamma,
        lambda: problem.lambda,
    })))
}

/// Certified fixed gains.
#[derive(Debug, Clone)]
pub struct GainCertificate {
    pub p1: Matrix,
    pub p2: Matrix,
    /// `lambda_max(Block) / lambda_min(P)` at the requested `gamma`; negative
    /// when the gains are certified strictly, otherwise a shortfall in decay
    /// rate bounded by the tolerance.
    pub certificate: f64,
    pub margin: f64,
    /// Decay rate at which the returned `P` was certified.
    pub certified_gamma: f64,
}

#[derive(Debug, Clone)]
pub enum Verification {
    Certified(Box<GainCertificate>),
    Infeasible { best_violation: f64 },
}

impl Verification {
    pub fn is_certified(&self) -> bool {
        matches!(self, Verification::Certified(_))
    }
}

fn verify_at(
    frak_a: &Matrix,
    h2: &Matrix,
    q: &Matrix,
    w: &Matrix,
    lambda: f64,
    gamma: f64,
    settings: &LmiSettings,
) -> Result<MarginPoint> {
    let (n, p) = (frak_a.nrows(), h2.nrows());
    let trace_bound = settings.trace_bound(n, p);
    let scale = trace_bound * (1.0 + frak_a.norm() + q.norm() + w.norm());
    let lin = |p1: &Matrix, p2: &Matrix, _: &[f64]| verification_block(frak_a, h2, q, w, lambda, gamma, p1, p2);
    let sdp = MarginSdp {
        layout: Layout { n, p, extra: 0 },
        lin: &lin,
        trace_bound,
        radius: 1.0,
    };
    sdp.solve(&sdp_options(settings, scale))
}

fn ratio_certificate(block: &Matrix, p1: &Matrix, p2: &Matrix) -> Result<f64> {
    let lmax = linalg::max_eig_sym(block)?;
    let pmin = linalg::min_eig_sym(p1)?.min(linalg::min_eig_sym(p2)?);
    Ok(lmax / pmin)
}

/// Certify fixed gains `(Q, W)` at `(gamma, lambda)`.
///
/// Certified when the LMI in `(P1, P2)` is strictly feasible at `gamma`, or,
/// with `tol > 0`, at `gamma - tol` (the certificate is then read as a decay
/// rate shortfall of at most `tol`).
pub fn verify_gains_lmi(
    frak_a: &Matrix,
    h2: &Matrix,
    q: &Matrix,
    w: &Matrix,
    lambda: f64,
    gamma: f64,
    tol: f64,
    settings: &LmiSettings,
) -> Result<Verification> {
    let (n, p) = check_pair(frak_a, h2)?;
    ensure_shape(q, n, p, "Q (n x p)")?;
    ensure_shape(w, p, p, "W (p x p)")?;
    check_rates(lambda, gamma)?;
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be nonnegative, got {tol}")));
    }
    let exact = verify_at(frak_a, h2, q, w, lambda, gamma, settings)?;
    if exact.positive {
        let block = verification_block(frak_a, h2, q, w, lambda, gamma, &exact.p1, &exact.p2);
        return Ok(Verification::Certified(Box::new(GainCertificate {
            certificate: ratio_certificate(&block, &exact.p1, &exact.p2)?,
            p1: exact.p1,
            p2: exact.p2,
            margin: exact.t,
            certified_gamma: gamma,
        })));
    }
    let best = verification_block(frak_a, h2, q, w, lambda, gamma, &exact.p1, &exact.p2);
    let mut violation = if exact.t > 0.0 {
        ratio_certificate(&best, &exact.p1, &exact.p2)?.max(0.0)
    } else {
        -exact.t
    };
    if tol > 0.0 {
        let relaxed = (gamma - tol).max(0.0);
        let pt = verify_at(frak_a, h2, q, w, lambda, relaxed, settings)?;
        if pt.positive {
            return Ok(Verification::Certified(Box::new(GainCertificate {
                certificate: tol,
                p1: pt.p1,
                p2: pt.p2,
                margin: pt.t,
                certified_gamma: relaxed,
            })));
        }
        violation = violation.max(-pt.t);
    }
    Ok(Verification::Infeasible { best_violation: violation })
}

/// Upper end for the decay-rate search, `lambda + 2 ||frak_A||_2 + 1`.
pub fn default_gamma_hi(frak_a: &Matrix, lambda: f64) -> f64 {
    let norm2 = frak_a.clone().singular_values().max();
    lambda + 2.0 * norm2 + 1.0
}

#[derive(Debug, Clone)]
pub struct GammaSearch {
    pub gamma_star: f64,
    pub solution: LmiSolution,
    /// All ten sweep points below `gamma_star` were feasible.
    pub monotone: bool,
    pub evaluations: usize,
}

const LINE_SEARCH_TOL: f64 = 1e-3;

fn feasible_at(frak_a: &Matrix, h2: &Matrix, lambda: f64, gamma: f64, settings: &LmiSettings) -> Result<Feasibility> {
    solve_sdp_feasibility(&build_synthesis_lmi(frak_a, h2, lambda, gamma)?, settings)
}

/// Largest `gamma` in `[0, gamma_hi]` (to 1e-3) for which the synthesis LMI
/// is feasible.
pub fn max_gamma(
    frak_a: &Matrix,
    h2: &Matrix,
    lambda: f64,
    gamma_hi: f64,
    settings: &LmiSettings,
) -> Result<GammaSearch> {
    check_rates(lambda, gamma_hi)?;
    let mut evaluations = 1;
    let mut best = match feasible_at(frak_a, h2, lambda, 0.0, settings)? {
        Feasibility::Feasible(sol) => *sol,
        Feasibility::Infeasible { best_violation } => {
            return Err(Error::Infeasible {
                context: format!("synthesis LMI at gamma = 0, lambda = {lambda}"),
                violation: best_violation,
            })
        }
    };
    let (mut lo, mut hi) = (0.0, gamma_hi);
    evaluations += 1;
    if let Feasibility::Feasible(sol) = feasible_at(frak_a, h2, lambda, gamma_hi, settings)? {
        best = *sol;
        lo = gamma_hi;
    }
    while hi - lo > LINE_SEARCH_TOL {
        let mid = 0.5 * (lo + hi);
        evaluations += 1;
        match feasible_at(frak_a, h2, lambda, mid, settings)? {
            Feasibility::Feasible(sol) => {
                best = *sol;
                lo = mid;
            }
            Feasibility::Infeasible { .. } => hi = mid,
        }
    }
    let sweep: Vec<bool> = (0..10)
        .into_par_iter()
        .map(|k| {
            let g = lo * k as f64 / 10.0;
            feasible_at(frak_a, h2, lambda, g, settings).map(|f| f.is_feasible())
        })
        .collect::<Result<_>>()?;
    evaluations += sweep.len();
    Ok(GammaSearch {
        gamma_star: lo,
        solution: best,
        monotone: sweep.iter().all(|&f| f),
        evaluations,
    })
}

/// Smallest `lambda` in `(0, lambda_hi]` (to 1e-3) for which the synthesis
/// LMI is feasible at `gamma`.
pub fn min_lambda(frak_a: &Matrix, h2: &Matrix, gamma: f64, lambda_hi: f64, settings: &LmiSettings) -> Result<f64> {
    check_rates(lambda_hi, gamma)?;
    if let Feasibility::Infeasible { best_violation } = feasible_at(frak_a, h2, lambda_hi, gamma, settings)? {
        return Err(Error::Infeasible {
            context: format!("synthesis LMI at gamma = {gamma}, lambda = {lambda_hi}"),
            violation: best_violation,
        });
    }
    let (mut lo, mut hi) = (0.0, lambda_hi);
    while hi - lo > LINE_SEARCH_TOL {
        let mid = 0.5 * (lo + hi);
        if feasible_at(frak_a, h2, mid, gamma, settings)?.is_feasible() {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub lambda: f64,
    /// `None` when the LMI is infeasible already at `gamma = 0`.
    pub gamma_star: Option<f64>,
}

/// `gamma*(lambda)` for each grid value, evaluated in parallel.
pub fn lambda_sweep(frak_a: &Matrix, h2: &Matrix, lambdas: &[f64], settings: &LmiSettings) -> Result<Vec<SweepPoint>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("lambda grid is empty".into()));
    }
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("lambda grid must be strictly increasing".into()));
    }
    lambdas
        .par_iter()
        .map(|&lambda| {
            let hi = default_gamma_hi(frak_a, lambda);
            match max_gamma(frak_a, h2, lambda, hi, settings) {
                Ok(s) => Ok(SweepPoint { lambda, gamma_star: Some(s.gamma_star) }),
                Err(Error::Infeasible { .. }) => Ok(SweepPoint { lambda, gamma_star: None }),
                Err(e) => Err(e),
            }
        })
        .collect()
}
