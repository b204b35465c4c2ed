//! Monte Carlo and certificate checks of mean-exponential stability.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, DiscreteCDF, Poisson};

use crate::error::{Error, Result};
use crate::linalg::{self, he, Matrix, Vector};
use crate::lmi::MBlock;
use crate::pdmp::{self, ClosedLoop, Coordinates, Propagator};

/// Ensemble estimate of `E[|x~(t)|^2]` on a grid.
#[derive(Debug, Clone, Serialize)]
pub struct MomentCurve {
    pub grid: Vec<f64>,
    pub m: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Ensemble mean of `|e_p(t)|^2`.
    pub e_p_m: Vec<f64>,
    pub n_trajectories: usize,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DecayEstimate {
    pub gamma_hat: f64,
    pub window: (f64, f64),
    pub r_squared: f64,
}

/// Guaranteed second-moment rate `min(2 beta, gamma / 2)`.
pub fn gamma_0(beta: f64, gamma: f64) -> f64 {
    (2.0 * beta).min(0.5 * gamma)
}

/// Ensemble of `n` paths from the original-coordinate state `x0`. Trajectory
/// `i` uses stream `i` of `seed`; the reduction runs in index order.
pub fn monte_carlo_moment(
    cl: &ClosedLoop,
    x0: &Vector,
    n: usize,
    horizon: f64,
    output_dt: f64,
    lambda: f64,
    seed: u64,
) -> Result<MomentCurve> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("Monte Carlo needs at least 2 trajectories, got {n}")));
    }
    let grid = pdmp::output_grid(horizon, output_dt)?;
    let xt0 = cl.transform_state(x0)?;
    let coords = Coordinates::Transformed;
    let prop = Propagator::new(cl.flow(coords), output_dt)?;
    let err = cl.error_map(coords);
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = pdmp::trajectory_rng(seed, i as u64);
            let times = pdmp::jump_times_from(&mut rng, lambda, horizon)?;
            let mut norms = vec![0.0; grid.len()];
            let mut errs = vec![0.0; grid.len()];
            pdmp::walk_path(
                cl,
                &prop,
                &xt0,
                &grid,
                &times,
                coords,
                |k, x, _| {
                    norms[k] = cl.error_state(x).norm_squared();
                    errs[k] = (err * x).norm_squared();
                },
                |_, _, _| {},
            )?;
            Ok((norms, errs))
        })
        .collect::<Result<_>>()?;

    let nf = n as f64;
    let mut m = vec![0.0; grid.len()];
    let mut e_p_m = vec![0.0; grid.len()];
    for (norms, errs) in &per_path {
        for k in 0..grid.len() {
            m[k] += norms[k] / nf;
            e_p_m[k] += errs[k] / nf;
        }
    }
    let mut stderr = vec![0.0; grid.len()];
    for (norms, _) in &per_path {
        for k in 0..grid.len() {
            stderr[k] += (norms[k] - m[k]).powi(2);
        }
    }
    for s in &mut stderr {
        *s = (*s / (nf - 1.0)).sqrt() / nf.sqrt();
    }
    Ok(MomentCurve { grid, m, stderr, e_p_m, n_trajectories: n })
}

/// Least-squares slope of `ln m(t)` over `window`; `gamma_hat = -slope`.
pub fn fit_decay(grid: &[f64], m: &[f64], window: (f64, f64)) -> Result<DecayEstimate> {
    let (t0, t1) = window;
    if !(t0 < t1) {
        return Err(Error::InvalidArgument(format!("empty fit window [{t0}, {t1}]")));
    }
    let pts: Vec<(f64, f64)> = grid
        .iter()
        .zip(m)
        .filter(|(t, _)| **t >= t0 - 1e-12 && **t <= t1 + 1e-12)
        .map(|(t, v)| (*t, *v))
        .collect();
    if pts.len() < 2 {
        return Err(Error::InvalidArgument(format!("fit window [{t0}, {t1}] holds fewer than 2 grid points")));
    }
    if let Some((t, v)) = pts.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(Error::InvalidArgument(format!("moment {v} at t = {t} is not positive")));
    }
    let k = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1.ln()).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1.ln() - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1.ln() - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    Ok(DecayEstimate { gamma_hat: -slope, window, r_squared })
}

pub fn fit_decay_rate(curve: &MomentCurve, window: (f64, f64)) -> Result<DecayEstimate> {
    fit_decay(&curve.grid, &curve.m, window)
}

/// `He(P M) + lambda (N' P N - P)` with `P = diag(P1, P2)`.
pub fn generator_matrix(mb: &MBlock, p1: &Matrix, p2: &Matrix, lambda: f64) -> Matrix {
    let p = linalg::block_diag(&[p1, p2]);
    he(&(&p * &mb.m)) + (mb.n_jump.transpose() * &p * &mb.n_jump - &p) * lambda
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DynkinReport {
    /// Largest sampled `U V(x) = x' G x` over random unit vectors.
    pub max_uv: f64,
    /// `lambda_min(-G)`; nonnegative when the generator is negative semidefinite.
    pub min_eig_neg_generator: f64,
}

pub fn dynkin_check(mb: &MBlock, p1: &Matrix, p2: &Matrix, lambda: f64, n_samples: usize, seed: u64) -> Result<DynkinReport> {
    let g = generator_matrix(mb, p1, p2, lambda);
    let dim = g.nrows();
    let mut rng = pdmp::trajectory_rng(seed, 0);
    let mut max_uv = f64::NEG_INFINITY;
    for _ in 0..n_samples {
        let x = Vector::from_fn(dim, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let norm = x.norm();
        if norm == 0.0 {
            continue;
        }
        let x = x / norm;
        max_uv = max_uv.max(x.dot(&(&g * &x)));
    }
    Ok(DynkinReport {
        max_uv,
        min_eig_neg_generator: linalg::min_eig_sym(&linalg::symmetrize(&-g))?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplerReport {
    pub lambda: f64,
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub ks_statistic: f64,
    /// 1% critical value `1.63 / sqrt(n)`.
    pub ks_critical: f64,
    pub chi2_statistic: f64,
    pub chi2_dof: usize,
    /// 99% quantile of the chi-square distribution.
    pub chi2_critical: f64,
}

impl SamplerReport {
    pub fn mean_ok(&self) -> bool {
        (self.mean * self.lambda - 1.0).abs() <= 0.05
    }

    pub fn variance_ok(&self) -> bool {
        let v = self.variance * self.lambda * self.lambda;
        (0.9..=1.1).contains(&v)
    }

    pub fn ks_ok(&self) -> bool {
        self.ks_statistic < self.ks_critical
    }

    pub fn chi2_ok(&self) -> bool {
        self.chi2_statistic < self.chi2_critical
    }

    pub fn passed(&self) -> bool {
        self.mean_ok() && self.variance_ok() && self.ks_ok() && self.chi2_ok()
    }
}

/// Kolmogorov-Smirnov distance between the sample and `Exp(lambda)`.
pub fn ks_exponential(samples: &[f64], lambda: f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-lambda * x).exp();
            (((i + 1) as f64 / n) - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// Pearson statistic of counts against `Poisson(mu)`. Consecutive values are
/// pooled until each bin expects at least 5 hits; the last bin is the tail.
/// Returns `(statistic, dof)`.
pub fn chi2_poisson(counts: &[usize], mu: f64) -> Result<(f64, usize)> {
    let runs = counts.len() as f64;
    let dist = Poisson::new(mu).map_err(|e| Error::InvalidArgument(format!("Poisson({mu}): {e}")))?;
    let max_k = counts.iter().copied().max().unwrap_or(0);
    let mut observed = vec![0.0; max_k + 1];
    for &c in counts {
        observed[c] += 1.0;
    }
    let obs = |k: u64| observed.get(k as usize).copied().unwrap_or(0.0);
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    let mut k = 0u64;
    loop {
        o += obs(k);
        e += runs * dist.pmf(k);
        let tail = runs * dist.sf(k);
        if e >= 5.0 && tail >= 5.0 {
            bins.push((o, e));
            o = 0.0;
            e = 0.0;
        } else if tail < 5.0 {
            let tail_obs: f64 = observed.iter().skip(k as usize + 1).sum();
            bins.push((o + tail_obs, e + tail));
            break;
        }
        k += 1;
    }
    if bins.len() < 2 {
        return Err(Error::InvalidArgument(format!("too few runs ({runs}) for a chi-square test")));
    }
    let stat = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    Ok((stat, bins.len() - 1))
}

/// Interval moments, KS distance and a chi-square test of `N_1` counts for
/// `n` draws at intensity `lambda`.
pub fn sampler_stats(lambda: f64, n: usize, seed: u64) -> Result<SamplerReport> {
    if n < 1000 {
        return Err(Error::InvalidArgument(format!("sampler statistics need n >= 1000, got {n}")));
    }
    let deltas = pdmp::sample_deltas(lambda, n, seed)?;
    let nf = n as f64;
    let mean = deltas.iter().sum::<f64>() / nf;
    let variance = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let ks_statistic = ks_exponential(&deltas, lambda);

    // counts in [0, 1] from independent streams
    let counts: Vec<usize> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = pdmp::trajectory_rng(seed ^ 0x5eed_c0de, i);
            let mut t = 0.0;
            let mut k = 0;
            loop {
                t += pdmp::next_interval(&mut rng, lambda);
                if t > 1.0 {
                    return k;
                }
                k += 1;
            }
        })
        .collect();
    let (chi2_statistic, chi2_dof) = chi2_poisson(&counts, lambda)?;
    let chi2_critical = ChiSquared::new(chi2_dof as f64)
        .map_err(|e| Error::NumericalBreakdown(format!("chi-square quantile: {e}")))?
        .inverse_cdf(0.99);
    Ok(SamplerReport {
        lambda,
        n,
        mean,
        variance,
        ks_statistic,
        ks_critical: 1.63 / nf.sqrt(),
        chi2_statistic,
        chi2_dof,
        chi2_critical,
    })
}
