//! Exact simulation of the closed loop as a piecewise deterministic Markov
//! process: linear flow between Poisson sampling instants, linear jumps at
//! the instants.
//!
//! Original state ordering is `(w, x_p, zeta, z, chi)`. Transformed state
//! ordering is `(w, x_alpha~, chi1~, chi2~)` with
//! `x_alpha~ = (x_p, zeta, z) - X_alpha w`, `chi1~ = x_alpha~ - chi1` and
//! `chi2~ = chi2 - H2 chi1~`.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{block, block_diag, expm, eye, zeros, Matrix, Vector};
use crate::model::{ExoSystem, PlantModel};
use crate::synthesis::{AugmentedSystem, FrancisSolution, RegulatorParams};

/// Random stream for trajectory `index` of the ensemble seeded by `seed`.
///
/// The master seed keys a ChaCha8 generator and the trajectory index selects
/// one of its 2^64 independent streams, so ensembles do not depend on
/// evaluation order.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One exponential inter-sample interval `-ln(U) / lambda`, `U` in (0, 1).
pub fn next_interval<R: Rng>(rng: &mut R, lambda: f64) -> f64 {
    let u: f64 = rng.sample(Open01);
    -u.ln() / lambda
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// Sampling instants in `(0, horizon]` drawn from `rng`.
pub fn jump_times_from<R: Rng>(rng: &mut R, lambda: f64, horizon: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    let mut times = Vec::new();
    let mut t = 0.0;
    loop {
        t += next_interval(rng, lambda);
        if t > horizon {
            return Ok(times);
        }
        times.push(t);
    }
}

/// Sampling instants in `(0, horizon]` for stream 0 of `seed`.
pub fn sample_intervals(lambda: f64, horizon: f64, seed: u64) -> Result<Vec<f64>> {
    jump_times_from(&mut trajectory_rng(seed, 0), lambda, horizon)
}

/// `count` consecutive inter-sample intervals for stream 0 of `seed`.
pub fn sample_deltas(lambda: f64, count: usize, seed: u64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    let mut rng = trajectory_rng(seed, 0);
    Ok((0..count).map(|_| next_interval(&mut rng, lambda)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Coordinates {
    Original,
    Transformed,
}

/// Block sizes of the stacked state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StateLayout {
    pub q: usize,
    pub n_p: usize,
    pub n_zeta: usize,
    pub n_z: usize,
    pub p: usize,
}

impl StateLayout {
    /// `n = n_p + n_zeta + n_z`.
    pub fn n(&self) -> usize {
        self.n_p + self.n_zeta + self.n_z
    }

    pub fn dim(&self) -> usize {
        self.q + 2 * self.n() + self.p
    }

    /// Offset of the block after `w` (x_p, or x_alpha~).
    pub fn x_offset(&self) -> usize {
        self.q
    }

    /// Offset of `chi` (or `chi1~`).
    pub fn chi_offset(&self) -> usize {
        self.q + self.n()
    }

    /// Offset of `chi2` (or `chi2~`).
    pub fn chi2_offset(&self) -> usize {
        self.q + 2 * self.n()
    }
}

#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub layout: StateLayout,
    pub f_orig: Matrix,
    pub j_orig: Matrix,
    /// `[[frak_ac, -frak_bc H], [0, M]]` on `(x_alpha~, chi~)`.
    pub f_tr: Matrix,
    /// `diag(I_2n, 0_p)`.
    pub j_tr: Matrix,
    /// Transformed flow and jump including the exosystem block.
    pub f_tr_full: Matrix,
    pub j_tr_full: Matrix,
    /// `x_tr = transform * x_orig`.
    pub transform: Matrix,
    pub inverse: Matrix,
    /// `e_p = C_p x_p - F_p w` as a row map on the original state.
    pub error_orig: Matrix,
    /// `e_p = H2 x_alpha~` as a row map on the transformed state.
    pub error_tr: Matrix,
}

/// Interconnect plant, exosystem and regulator.
pub fn assemble_closed_loop(
    plant: &PlantModel,
    exo: &ExoSystem,
    aug: &AugmentedSystem,
    reg: &RegulatorParams,
    francis: &FrancisSolution,
) -> Result<ClosedLoop> {
    let layout = StateLayout {
        q: exo.q(),
        n_p: plant.n_p(),
        n_zeta: reg.stabilizer.n_zeta(),
        n_z: reg.internal_model.n_z(),
        p: plant.p(),
    };
    let (q, n_p, n_zeta, n_z, p) = (layout.q, layout.n_p, layout.n_zeta, layout.n_z, layout.p);
    let n = layout.n();
    if aug.n() != n || aug.p() != p {
        return Err(Error::dim("augmented system (n, p)", format!("({n}, {p})"), format!("({}, {})", aug.n(), aug.p())));
    }
    let obs = &reg.observer;
    if obs.t.shape() != (n + p, n + p) {
        return Err(Error::dim("observer T", format!("{0}x{0}", n + p), format!("{}x{}", obs.t.nrows(), obs.t.ncols())));
    }
    if francis.x_m.shape() != (n_p + n_zeta, q) || francis.z.shape() != (n_z, q) {
        return Err(Error::dim("regulator solution (X_M, Z)", format!("({}x{q}, {n_z}x{q})", n_p + n_zeta), "mismatch"));
    }
    let im = &reg.internal_model;
    let st = &reg.stabilizer;

    let z = |r, c| zeros(r, c);
    let f_orig = block(&[
        &[&exo.s, &z(q, n_p), &z(q, n_zeta), &z(q, n_z), &z(q, n + p)],
        &[&plant.e_p, &plant.a_p, &(&plant.b_p * &st.c_zeta), &(&plant.b_p * &st.d_zeta * &im.k), &z(n_p, n + p)],
        &[&z(n_zeta, q), &z(n_zeta, n_p), &st.a_zeta, &(&st.b_zeta * &im.k), &z(n_zeta, n + p)],
        &[&z(n_z, q), &z(n_z, n_p), &z(n_z, n_zeta), &im.g1, &(&im.g2 * &obs.h)],
        &[&z(n + p, q), &z(n + p, n_p), &z(n + p, n_zeta), &z(n + p, n_z), &obs.t],
    ])?;
    let error_orig = block(&[&[&(-&plant.f_p), &plant.c_p, &z(p, n_zeta + n_z + n + p)]])?;
    let mut j_orig = eye(layout.dim());
    let chi = layout.chi_offset();
    j_orig.view_mut((chi, 0), (n + p, layout.dim())).copy_from(&(&obs.l2 * &error_orig));
    let jump_chi = &obs.l1 + obs.l2.clone() * error_orig.view((0, chi), (p, n + p));
    j_orig.view_mut((chi, chi), (n + p, n + p)).copy_from(&jump_chi);

    let mb = crate::lmi::build_m(&aug.frak_a, &aug.h2, &obs.q, &obs.w)?;
    let f_tr = block(&[&[&aug.frak_ac, &(-(&aug.frak_bc * &obs.h))], &[&z(n + p, n), &mb.m]])?;
    let j_tr = block_diag(&[&eye(2 * n), &z(p, p)]);
    let f_tr_full = block_diag(&[&exo.s, &f_tr]);
    let j_tr_full = block_diag(&[&eye(q), &j_tr]);

    let x_alpha = block(&[&[&francis.x_m], &[&francis.z]])?;
    let h2 = &aug.h2;
    let transform = block(&[
        &[&eye(q), &z(q, n), &z(q, n), &z(q, p)],
        &[&(-&x_alpha), &eye(n), &z(n, n), &z(n, p)],
        &[&(-&x_alpha), &eye(n), &(-eye(n)), &z(n, p)],
        &[&(h2 * &x_alpha), &(-h2), h2, &eye(p)],
    ])?;
    let inverse = transform
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NumericalBreakdown("coordinate transform inversion".into()))?;
    let error_tr = block(&[&[&z(p, q), h2, &z(p, n + p)]])?;
    Ok(ClosedLoop {
        layout,
        f_orig,
        j_orig,
        f_tr,
        j_tr,
        f_tr_full,
        j_tr_full,
        transform,
        inverse,
        error_orig,
        error_tr,
    })
}

impl ClosedLoop {
    pub fn flow(&self, coords: Coordinates) -> &Matrix {
        match coords {
            Coordinates::Original => &self.f_orig,
            Coordinates::Transformed => &self.f_tr_full,
        }
    }

    pub fn jump(&self, coords: Coordinates) -> &Matrix {
        match coords {
            Coordinates::Original => &self.j_orig,
            Coordinates::Transformed => &self.j_tr_full,
        }
    }

    pub fn error_map(&self, coords: Coordinates) -> &Matrix {
        match coords {
            Coordinates::Original => &self.error_orig,
            Coordinates::Transformed => &self.error_tr,
        }
    }

    pub fn transform_state(&self, x: &Vector) -> Result<Vector> {
        self.check_state(x)?;
        Ok(&self.transform * x)
    }

    pub fn inverse_transform(&self, x: &Vector) -> Result<Vector> {
        self.check_state(x)?;
        Ok(&self.inverse * x)
    }

    fn check_state(&self, x: &Vector) -> Result<()> {
        if x.len() != self.layout.dim() {
            return Err(Error::dim("closed-loop state", self.layout.dim(), x.len()));
        }
        Ok(())
    }

    /// Original-coordinate state with the given `w(0)`, `x_p(0)` and a zero
    /// regulator state.
    pub fn initial_state(&self, w0: &[f64], x_p0: &[f64]) -> Result<Vector> {
        let l = &self.layout;
        if w0.len() != l.q {
            return Err(Error::dim("w0", l.q, w0.len()));
        }
        if x_p0.len() != l.n_p {
            return Err(Error::dim("x_p0", l.n_p, x_p0.len()));
        }
        let mut x = Vector::zeros(l.dim());
        x.rows_mut(0, l.q).copy_from_slice(w0);
        x.rows_mut(l.q, l.n_p).copy_from_slice(x_p0);
        Ok(x)
    }

    /// The error-state part `(x_alpha~, chi1~, chi2~)` of a transformed state.
    pub fn error_state<'a>(&self, x_tr: &'a Vector) -> nalgebra::DVectorView<'a, f64> {
        x_tr.rows(self.layout.q, self.layout.dim() - self.layout.q)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct JumpRecord {
    pub time: f64,
    #[serde(skip)]
    pub before: Vector,
    #[serde(skip)]
    pub after: Vector,
}

#[derive(Debug, Clone)]
pub struct SamplePath {
    pub coords: Coordinates,
    pub jump_times: Vec<f64>,
    pub grid: Vec<f64>,
    pub states: Vec<Vector>,
    pub e_p: Vec<Vector>,
    /// Whether a jump happened in `(t_{k-1}, t_k]`.
    pub jump_flags: Vec<bool>,
    pub jumps: Vec<JumpRecord>,
    pub seed: Option<u64>,
}

/// Uniform grid `0, dt, ..., horizon` (the last point snapped to `horizon`).
pub fn output_grid(horizon: f64, output_dt: f64) -> Result<Vec<f64>> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    if !(output_dt.is_finite() && output_dt > 0.0 && output_dt <= horizon) {
        return Err(Error::InvalidArgument(format!("output_dt must lie in (0, horizon], got {output_dt}")));
    }
    let steps = (horizon / output_dt - 1e-9).ceil() as usize;
    Ok((0..=steps).map(|k| (k as f64 * output_dt).min(horizon)).collect())
}

/// Flow propagator with a cached step for the output spacing.
pub struct Propagator<'a> {
    flow: &'a Matrix,
    dt: f64,
    step: Matrix,
}

impl<'a> Propagator<'a> {
    pub fn new(flow: &'a Matrix, dt: f64) -> Result<Self> {
        Ok(Propagator { flow, dt, step: expm(flow, dt)? })
    }

    pub fn advance(&self, x: &Vector, tau: f64) -> Result<Vector> {
        if tau <= 0.0 {
            return Ok(x.clone());
        }
        if (tau - self.dt).abs() <= 1e-12 * self.dt.max(1.0) {
            return Ok(&self.step * x);
        }
        Ok(expm(self.flow, tau)? * x)
    }
}

fn check_jump_times(jump_times: &[f64]) -> Result<()> {
    if jump_times.windows(2).any(|w| w[1] <= w[0]) || jump_times.first().is_some_and(|&t| t <= 0.0) {
        return Err(Error::InvalidArgument("jump times must be positive and strictly increasing".into()));
    }
    Ok(())
}

/// Walk one path over `grid`, calling `visit(k, state, jumped)` at every grid
/// point and `on_jump(time, left_limit, post_jump)` at every sampling instant.
/// `prop` must propagate the flow of `coords` with the grid spacing.
pub fn walk_path(
    cl: &ClosedLoop,
    prop: &Propagator<'_>,
    x0: &Vector,
    grid: &[f64],
    jump_times: &[f64],
    coords: Coordinates,
    mut visit: impl FnMut(usize, &Vector, bool),
    mut on_jump: impl FnMut(f64, &Vector, &Vector),
) -> Result<()> {
    cl.check_state(x0)?;
    check_jump_times(jump_times)?;
    let jump = cl.jump(coords);
    let mut x = x0.clone();
    let mut t = 0.0;
    let mut next_jump = 0;
    visit(0, &x, false);
    for (k, &tg) in grid.iter().enumerate().skip(1) {
        let mut jumped = false;
        while next_jump < jump_times.len() && jump_times[next_jump] <= tg {
            let tj = jump_times[next_jump];
            let before = prop.advance(&x, tj - t)?;
            x = jump * &before;
            on_jump(tj, &before, &x);
            t = tj;
            next_jump += 1;
            jumped = true;
        }
        x = prop.advance(&x, tg - t)?;
        t = tg;
        visit(k, &x, jumped);
    }
    Ok(())
}

/// Simulate from `x0` (given in `coords`) with prescribed sampling instants.
pub fn simulate_with_jumps(
    cl: &ClosedLoop,
    x0: &Vector,
    horizon: f64,
    output_dt: f64,
    jump_times: &[f64],
    coords: Coordinates,
) -> Result<SamplePath> {
    let grid = output_grid(horizon, output_dt)?;
    let prop = Propagator::new(cl.flow(coords), output_dt)?;
    let err = cl.error_map(coords);
    let mut states = Vec::with_capacity(grid.len());
    let mut e_p = Vec::with_capacity(grid.len());
    let mut flags = Vec::with_capacity(grid.len());
    let mut jumps = Vec::new();
    walk_path(
        cl,
        &prop,
        x0,
        &grid,
        jump_times,
        coords,
        |_, x, jumped| {
            e_p.push(err * x);
            states.push(x.clone());
            flags.push(jumped);
        },
        |time, before, after| {
            jumps.push(JumpRecord { time, before: before.clone(), after: after.clone() });
        },
    )?;
    Ok(SamplePath {
        coords,
        jump_times: jump_times.iter().copied().filter(|&t| t <= horizon).collect(),
        grid,
        states,
        e_p,
        jump_flags: flags,
        jumps,
        seed: None,
    })
}

/// Simulate one sample path with Poisson sampling drawn from stream 0 of `seed`.
pub fn simulate(
    cl: &ClosedLoop,
    x0: &Vector,
    horizon: f64,
    output_dt: f64,
    lambda: f64,
    seed: u64,
    coords: Coordinates,
) -> Result<SamplePath> {
    let times = sample_intervals(lambda, horizon, seed)?;
    let mut path = simulate_with_jumps(cl, x0, horizon, output_dt, &times, coords)?;
    path.seed = Some(seed);
    Ok(path)
}

#[cfg(test)]
pub(crate) fn max_abs_diff(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Norm of the error state `(x_alpha~, chi~)` squared, for each grid point.
pub fn error_norms_squared(cl: &ClosedLoop, path: &SamplePath) -> Result<Vec<f64>> {
    path.states
        .iter()
        .map(|x| {
            let xt = match path.coords {
                Coordinates::Transformed => x.clone(),
                Coordinates::Original => cl.transform_state(x)?,
            };
            Ok(cl.error_state(&xt).norm_squared())
        })
        .collect()
}
