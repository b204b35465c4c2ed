//! Regulator construction: internal model, observer-based stabilizer,
//! augmented plant, regulator (Francis) equations and hybrid observer matrices.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{
    self, block, block_diag, controllability_matrix, ensure_finite, ensure_shape, ensure_square,
    eye, kron, lstsq, tol, unvec, vec_of, zeros, Matrix, C64,
};
use crate::model::{self, ExoSystem, PlantModel};

/// Post-processing internal model `z' = G1 z + G2 e_hat`, `u_G = K z`.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalModel {
    pub g1: Matrix,
    pub g2: Matrix,
    pub k: Matrix,
}

impl InternalModel {
    pub fn n_z(&self) -> usize {
        self.g1.nrows()
    }
}

/// Optional replacements for the default internal model blocks.
#[derive(Debug, Clone, Default)]
pub struct InternalModelOverrides {
    pub g1: Option<Matrix>,
    pub g2: Option<Matrix>,
    pub k: Option<Matrix>,
}

/// Continuous-time stabilizer `zeta' = A_zeta zeta + B_zeta u_G`,
/// `u = C_zeta zeta + D_zeta u_G`.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilizerParams {
    pub a_zeta: Matrix,
    pub b_zeta: Matrix,
    pub c_zeta: Matrix,
    pub d_zeta: Matrix,
}

impl StabilizerParams {
    pub fn n_zeta(&self) -> usize {
        self.a_zeta.nrows()
    }
}

/// Hybrid observer data: `chi' = T chi` between samples,
/// `chi+ = L1 chi + L2 e_p` at samples, `e_hat = H chi`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverParams {
    pub t: Matrix,
    pub l1: Matrix,
    pub l2: Matrix,
    pub h: Matrix,
    pub h2: Matrix,
    pub q: Matrix,
    pub w: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegulatorParams {
    pub internal_model: InternalModel,
    pub stabilizer: StabilizerParams,
    pub observer: ObserverParams,
}

/// Stabilizer-plant-internal-model interconnection.
#[derive(Debug, Clone)]
pub struct AugmentedSystem {
    pub a_cl: Matrix,
    pub b_cl: Matrix,
    pub e_cl: Matrix,
    pub h1: Matrix,
    /// Open interconnection `[[A_cl, B_cl], [0, G1]]`.
    pub frak_a: Matrix,
    /// `frak_a + frak_bc * H2`.
    pub frak_ac: Matrix,
    pub frak_bc: Matrix,
    pub h2: Matrix,
    pub beta_achieved: f64,
    pub n_p: usize,
    pub n_zeta: usize,
    pub n_z: usize,
}

impl AugmentedSystem {
    /// `n = n_p + n_zeta + n_z`.
    pub fn n(&self) -> usize {
        self.n_p + self.n_zeta + self.n_z
    }

    pub fn p(&self) -> usize {
        self.h1.nrows()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RegulatorSolution {
    #[serde(skip)]
    pub x_p: Matrix,
    #[serde(skip)]
    pub r: Matrix,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct FrancisSolution {
    pub x_p: Matrix,
    /// Steady-state input `u = R w`.
    pub r: Matrix,
    pub x_m: Matrix,
    pub z: Matrix,
    pub residual: f64,
}

fn pick_g2_column(s: &Matrix) -> Option<Matrix> {
    let q = s.nrows();
    let mut candidates = Vec::new();
    let mut last = zeros(q, 1);
    last[(q - 1, 0)] = 1.0;
    candidates.push(last);
    candidates.push(Matrix::from_element(q, 1, 1.0));
    candidates.push(Matrix::from_fn(q, 1, |i, _| (i + 1) as f64));
    candidates.push(Matrix::from_fn(q, 1, |i, _| 1.0 / (i as f64 + 1.0).sqrt() * if i % 2 == 0 { 1.0 } else { -1.0 }));
    candidates
        .into_iter()
        .find(|g| linalg::rank(&controllability_matrix(s, g)) == q)
}

/// Multiset containment of `sub` in `sup` up to `radius`.
fn spectrum_contains(sup: &[C64], sub: &[C64], radius: f64) -> bool {
    let mut used = vec![false; sup.len()];
    sub.iter().all(|z| {
        if let Some(i) = (0..sup.len()).find(|&i| !used[i] && (sup[i] - z).norm() <= radius) {
            used[i] = true;
            true
        } else {
            false
        }
    })
}

/// Internal model with one copy of `S` per error channel.
///
/// Default `G2` injects each channel through a column that makes its copy of
/// `S` controllable; default `K` reads the first state of each copy.
pub fn build_internal_model(
    exo: &ExoSystem,
    p: usize,
    m_p: usize,
    overrides: &InternalModelOverrides,
) -> Result<InternalModel> {
    if p == 0 {
        return Err(Error::InvalidArgument("internal model needs p >= 1 error channels".into()));
    }
    let q = exo.q();
    let copies: Vec<&Matrix> = (0..p).map(|_| &exo.s).collect();
    let g1 = match &overrides.g1 {
        Some(g1) => {
            ensure_square(g1, "G1")?;
            g1.clone()
        }
        None => block_diag(&copies),
    };
    let n_z = g1.nrows();
    let g2 = match &overrides.g2 {
        Some(g2) => {
            ensure_shape(g2, n_z, p, "G2 (n_z x p)")?;
            g2.clone()
        }
        None => {
            if overrides.g1.is_some() {
                return Err(Error::InvalidArgument("G1 override requires an explicit G2".into()));
            }
            let col = pick_g2_column(&exo.s).ok_or_else(|| Error::Uncontrollable {
                what: "S, g".into(),
                modes: "S is derogatory; no single input column makes it controllable".into(),
            })?;
            let cols: Vec<&Matrix> = (0..p).map(|_| &col).collect();
            block_diag(&cols)
        }
    };
    let k = match &overrides.k {
        Some(k) => {
            ensure_shape(k, m_p, n_z, "K (m_p x n_z)")?;
            k.clone()
        }
        None => {
            let mut k = zeros(m_p, n_z);
            for i in 0..m_p.min(p) {
                k[(i, i * q)] = 1.0;
            }
            k
        }
    };
    for (m, name) in [(&g1, "G1"), (&g2, "G2"), (&k, "K")] {
        ensure_finite(m, name)?;
    }

    let g1_spec = linalg::eig(&g1)?.eigenvalues;
    let s_spec = linalg::eig(&exo.s)?.eigenvalues;
    let mut needed = Vec::new();
    for _ in 0..p {
        needed.extend_from_slice(&s_spec);
    }
    if !spectrum_contains(&g1_spec, &needed, 1e-6 * exo.s.amax().max(1.0)) {
        return Err(Error::InvalidArgument(format!(
            "G1 spectrum [{}] does not contain {p} copies of the exosystem spectrum [{}]",
            linalg::format_modes(&g1_spec),
            linalg::format_modes(&s_spec)
        )));
    }

    let bad = model::uncontrollable_modes(&g1, &g2)?;
    if !bad.is_empty() {
        return Err(Error::Uncontrollable {
            what: "G1, G2".into(),
            modes: linalg::format_modes(&bad),
        });
    }
    Ok(InternalModel { g1, g2, k })
}

fn poly_from_roots(roots: &[C64]) -> Vec<C64> {
    // coefficients low-to-high, monic
    let mut c = vec![C64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![C64::new(0.0, 0.0); c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i + 1] += ci;
            next[i] -= ci * r;
        }
        c = next;
    }
    c
}

fn conjugate_closed(poles: &[C64]) -> bool {
    let scale = poles.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let conj: Vec<C64> = poles.iter().map(|z| z.conj()).collect();
    spectrum_contains(poles, &conj, 1e-9 * scale)
}

/// Match two spectra greedily and return the worst distance.
pub(crate) fn spectrum_distance(a: &[C64], b: &[C64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut used = vec![false; b.len()];
    let mut worst: f64 = 0.0;
    for z in a {
        let (idx, d) = (0..b.len())
            .filter(|&i| !used[i])
            .map(|i| (i, (b[i] - z).norm()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("equal lengths");
        used[idx] = true;
        worst = worst.max(d);
    }
    worst
}

/// Single-input pole placement (Ackermann). Returns the row gain `k` with
/// `sigma(A + b k) = desired`.
pub fn place_poles_si(a: &Matrix, b: &Matrix, desired: &[C64]) -> Result<Matrix> {
    let n = ensure_square(a, "A")?;
    ensure_shape(b, n, 1, "b (n x 1)")?;
    if desired.len() != n {
        return Err(Error::dim("desired pole count", n, desired.len()));
    }
    if !conjugate_closed(desired) {
        return Err(Error::InvalidArgument(
            "desired poles are not closed under conjugation".into(),
        ));
    }
    let ctrb = controllability_matrix(a, b);
    if linalg::rank(&ctrb) < n {
        let modes = model::uncontrollable_modes(a, b)?;
        return Err(Error::Uncontrollable {
            what: "A, b".into(),
            modes: linalg::format_modes(&modes),
        });
    }
    let coeffs = poly_from_roots(desired);
    let mut p_of_a = a + eye(n) * coeffs[n - 1].re;
    for k in (0..n - 1).rev() {
        p_of_a = &p_of_a * a + eye(n) * coeffs[k].re;
    }
    let mut e_n = zeros(n, 1);
    e_n[(n - 1, 0)] = 1.0;
    let y = ctrb
        .transpose()
        .lu()
        .solve(&e_n)
        .ok_or_else(|| Error::NumericalBreakdown("Ackermann controllability solve".into()))?;
    let gain = -(y.transpose() * p_of_a);

    let achieved = linalg::eig(&(a + b * &gain))?.eigenvalues;
    let scale = desired.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let miss = spectrum_distance(&achieved, desired);
    if miss > 1e-6 * scale {
        return Err(Error::NumericalBreakdown(format!(
            "pole placement missed the requested spectrum by {miss:.3e}"
        )));
    }
    Ok(gain)
}

/// The design triple `(A, B, C)` whose controller/observer pair yields the
/// stabilizer: `A = [[A_p, B_p D_zeta K], [G2 C_p, G1]]`, `B = [B_p; 0]`,
/// `C = [0 K]`.
pub fn stabilizer_design_pair(
    plant: &PlantModel,
    im: &InternalModel,
    d_zeta: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let n_p = plant.n_p();
    let n_z = im.n_z();
    let m_p = plant.m_p();
    ensure_shape(d_zeta, m_p, m_p, "D_zeta (m_p x m_p)")?;
    ensure_shape(&im.g2, n_z, plant.p(), "G2 (n_z x p)")?;
    ensure_shape(&im.k, m_p, n_z, "K (m_p x n_z)")?;
    let a = block(&[
        &[&plant.a_p, &(&plant.b_p * d_zeta * &im.k)],
        &[&(&im.g2 * &plant.c_p), &im.g1],
    ])?;
    let b = block(&[&[&plant.b_p], &[&zeros(n_z, m_p)]])?;
    let c = block(&[&[&zeros(m_p, n_p), &im.k]])?;
    Ok((a, b, c))
}

/// Closed-loop pole targets for the controller and observer halves.
#[derive(Debug, Clone, PartialEq)]
pub struct PoleSpec {
    pub controller: Vec<C64>,
    pub observer: Vec<C64>,
}

/// Modes of `A` slower than `-2 beta` are moved left: stable-but-slow modes
/// to `-2 beta`, unstable ones mirrored (at least to `-2 beta`), each
/// relocated mode 0.1 further left than the previous one. Remaining
/// coincident poles are separated by 0.1. Observer poles are twice the
/// controller poles.
pub fn default_pole_spec(a: &Matrix, beta_target: f64) -> Result<PoleSpec> {
    let eigs = linalg::eig(a)?.eigenvalues;
    let floor = 2.0 * beta_target;
    let mut ctrl: Vec<C64> = Vec::with_capacity(eigs.len());
    let mut relocated = 0usize;
    let mut sorted = eigs.clone();
    sorted.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    for z in sorted.iter().filter(|z| z.im >= -1e-12) {
        let im = if z.im.abs() <= 1e-12 { 0.0 } else { z.im };
        let re = if z.re <= -floor {
            z.re
        } else {
            let r = -(floor.max(z.re.max(0.0))) - 0.1 * relocated as f64;
            relocated += 1;
            r
        };
        ctrl.push(C64::new(re, im));
        if im != 0.0 {
            ctrl.push(C64::new(re, -im));
        }
    }
    // separate coincident poles (conjugate partners excluded)
    loop {
        let mut moved = false;
        'outer: for i in 0..ctrl.len() {
            for j in (i + 1)..ctrl.len() {
                if (ctrl[i] - ctrl[j]).norm() < 1e-3 {
                    let shift = C64::new(-0.1, 0.0);
                    let target = ctrl[j];
                    for z in ctrl.iter_mut().skip(j) {
                        if (*z - target).norm() < 1e-12 || (*z - target.conj()).norm() < 1e-12 {
                            *z += shift;
                        }
                    }
                    moved = true;
                    break 'outer;
                }
            }
        }
        if !moved {
            break;
        }
    }
    let observer = ctrl.iter().map(|z| z * 2.0).collect();
    Ok(PoleSpec {
        controller: ctrl,
        observer,
    })
}

/// Observer-based stabilizer by separate controller/observer pole placement.
/// Single-input, single-error plants only.
pub fn design_stabilizer(
    plant: &PlantModel,
    im: &InternalModel,
    beta_target: f64,
    d_zeta: &Matrix,
    pole_spec: Option<&PoleSpec>,
) -> Result<StabilizerParams> {
    if plant.m_p() != 1 || plant.p() != 1 || im.k.nrows() != 1 {
        return Err(Error::InvalidArgument(format!(
            "stabilizer synthesis supports m_p = p = 1 only (got m_p = {}, p = {}); supply stabilizer matrices instead",
            plant.m_p(),
            plant.p()
        )));
    }
    if !(beta_target.is_finite() && beta_target > 0.0) {
        return Err(Error::InvalidArgument(format!("beta_target must be positive, got {beta_target}")));
    }
    let (a, b, c) = stabilizer_design_pair(plant, im, d_zeta)?;
    let stab = model::check_stabilizable(&a, &b)?;
    if !stab.passed {
        return Err(Error::Uncontrollable {
            what: "A, B of the stabilizer design".into(),
            modes: linalg::format_modes(&stab.witness),
        });
    }
    let det = model::check_detectable(&a, &c)?;
    if !det.passed {
        return Err(Error::Unobservable {
            what: "A, C of the stabilizer design".into(),
            modes: linalg::format_modes(&det.witness),
        });
    }
    let spec = match pole_spec {
        Some(s) => s.clone(),
        None => default_pole_spec(&a, beta_target)?,
    };
    let c_zeta = place_poles_si(&a, &b, &spec.controller)?;
    let b_zeta = -place_poles_si(&a.transpose(), &c.transpose(), &spec.observer)?.transpose();
    let a_zeta = &a + &b * &c_zeta - &b_zeta * &c;
    let params = StabilizerParams {
        a_zeta,
        b_zeta,
        c_zeta,
        d_zeta: d_zeta.clone(),
    };
    let aug = assemble_augmented(plant, im, &params)?;
    if aug.beta_achieved < beta_target * (1.0 - 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "requested poles give decay rate {:.4} below beta_target {beta_target}",
            aug.beta_achieved
        )));
    }
    Ok(params)
}

/// Assemble the augmented stabilizer-plant-internal-model system and check
/// that `frak_ac` is Hurwitz.
pub fn assemble_augmented(
    plant: &PlantModel,
    im: &InternalModel,
    stab: &StabilizerParams,
) -> Result<AugmentedSystem> {
    let n_p = plant.n_p();
    let m_p = plant.m_p();
    let p = plant.p();
    let n_z = im.n_z();
    let n_zeta = ensure_square(&stab.a_zeta, "A_zeta")?;
    if n_zeta == 0 {
        return Err(Error::dim("A_zeta (n_zeta >= 1)", ">= 1", 0));
    }
    ensure_shape(&stab.b_zeta, n_zeta, m_p, "B_zeta (n_zeta x m_p)")?;
    ensure_shape(&stab.c_zeta, m_p, n_zeta, "C_zeta (m_p x n_zeta)")?;
    ensure_shape(&stab.d_zeta, m_p, m_p, "D_zeta (m_p x m_p)")?;
    ensure_shape(&im.g2, n_z, p, "G2 (n_z x p)")?;
    ensure_shape(&im.k, m_p, n_z, "K (m_p x n_z)")?;

    let a_cl = block(&[
        &[&plant.a_p, &(&plant.b_p * &stab.c_zeta)],
        &[&zeros(n_zeta, n_p), &stab.a_zeta],
    ])?;
    let b_cl = block(&[&[&(&plant.b_p * &stab.d_zeta)], &[&stab.b_zeta]])? * &im.k;
    let e_cl = block(&[&[&plant.e_p], &[&zeros(n_zeta, plant.q())]])?;
    let h1 = block(&[&[&plant.c_p, &zeros(p, n_zeta)]])?;
    let frak_a = block(&[&[&a_cl, &b_cl], &[&zeros(n_z, n_p + n_zeta), &im.g1]])?;
    let frak_bc = block(&[&[&zeros(n_p + n_zeta, p)], &[&im.g2]])?;
    let h2 = block(&[&[&h1, &zeros(p, n_z)]])?;
    let frak_ac = &frak_a + &frak_bc * &h2;
    let abscissa = linalg::spectral_abscissa(&frak_ac)?;
    if abscissa >= 0.0 {
        return Err(Error::NotHurwitz { abscissa });
    }
    Ok(AugmentedSystem {
        a_cl,
        b_cl,
        e_cl,
        h1,
        frak_a,
        frak_ac,
        frak_bc,
        h2,
        beta_achieved: -abscissa,
        n_p,
        n_zeta,
        n_z,
    })
}

/// Permutation taking `(x_p, z, zeta)` ordering to `(x_p, zeta, z)`.
pub fn bar_similarity(n_p: usize, n_zeta: usize, n_z: usize) -> Matrix {
    let n = n_p + n_zeta + n_z;
    let mut t = zeros(n, n);
    for i in 0..n_p {
        t[(i, i)] = 1.0;
    }
    for i in 0..n_zeta {
        t[(n_p + i, n_p + n_z + i)] = 1.0;
    }
    for i in 0..n_z {
        t[(n_p + n_zeta + i, n_p + i)] = 1.0;
    }
    t
}

/// `[[A_p, B_p D_zeta K, B_p C_zeta], [G2 C_p, G1, 0], [0, B_zeta K, A_zeta]]`.
pub fn bar_form(plant: &PlantModel, im: &InternalModel, stab: &StabilizerParams) -> Result<Matrix> {
    let n_p = plant.n_p();
    let n_z = im.n_z();
    let n_zeta = stab.n_zeta();
    block(&[
        &[&plant.a_p, &(&plant.b_p * &stab.d_zeta * &im.k), &(&plant.b_p * &stab.c_zeta)],
        &[&(&im.g2 * &plant.c_p), &im.g1, &zeros(n_z, n_zeta)],
        &[&zeros(n_zeta, n_p), &(&stab.b_zeta * &im.k), &stab.a_zeta],
    ])
}

fn col(v: &linalg::Vector) -> Matrix {
    Matrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn input_scale(ms: &[&Matrix]) -> f64 {
    ms.iter().map(|m| m.norm()).fold(0.0, f64::max)
}

/// Solve `X_p S = A_p X_p + B_p R + E_p`, `C_p X_p = F_p` by Kronecker
/// vectorization.
pub fn solve_regulator_equations(plant: &PlantModel, exo: &ExoSystem) -> Result<RegulatorSolution> {
    let n = plant.n_p();
    let m = plant.m_p();
    let p = plant.p();
    let q = plant.q();
    if exo.q() != q {
        return Err(Error::dim("S size (q)", q, exo.q()));
    }
    let iq = eye(q);
    let sylv = kron(&exo.s.transpose(), &eye(n)) - kron(&iq, &plant.a_p);
    let lhs = block(&[
        &[&sylv, &(-kron(&iq, &plant.b_p))],
        &[&kron(&iq, &plant.c_p), &zeros(p * q, m * q)],
    ])?;
    let rhs = block(&[&[&col(&vec_of(&plant.e_p))], &[&col(&vec_of(&plant.f_p))]])?;
    let sol = lstsq(&lhs, &rhs)?;
    let x_p = unvec(&sol.as_slice()[..n * q], n, q);
    let r = unvec(&sol.as_slice()[n * q..], m, q);

    let res1 = &x_p * &exo.s - &plant.a_p * &x_p - &plant.b_p * &r - &plant.e_p;
    let res2 = &plant.c_p * &x_p - &plant.f_p;
    let residual = (res1.norm_squared() + res2.norm_squared()).sqrt();
    let scale = input_scale(&[&plant.a_p, &plant.b_p, &plant.e_p, &plant.c_p, &plant.f_p, &exo.s]);
    let tol = 1e-8 * (1.0 + scale);
    if !(residual < tol) {
        return Err(Error::Residual {
            what: "regulator equations".into(),
            residual,
            tol,
            hint: "resonance or inconsistent data".into(),
        });
    }
    Ok(RegulatorSolution { x_p, r, residual })
}

/// Joint minimum-norm solve of
/// `X_M S = A_cl X_M + B_cl Z + E_cl`, `H1 X_M = F_p`, `Z S = G1 Z`.
pub fn solve_francis(
    aug: &AugmentedSystem,
    im: &InternalModel,
    stab: &StabilizerParams,
    exo: &ExoSystem,
    f_p: &Matrix,
) -> Result<FrancisSolution> {
    let nm = aug.n_p + aug.n_zeta;
    let nz = aug.n_z;
    let q = exo.q();
    let p = aug.p();
    if aug.e_cl.ncols() != q {
        return Err(Error::dim("E_cl columns (q)", q, aug.e_cl.ncols()));
    }
    ensure_shape(f_p, p, q, "F_p (p x q)")?;
    let iq = eye(q);
    let st = exo.s.transpose();
    let row1 = [
        kron(&st, &eye(nm)) - kron(&iq, &aug.a_cl),
        -kron(&iq, &aug.b_cl),
    ];
    let row2 = [kron(&iq, &aug.h1), zeros(p * q, nz * q)];
    let row3 = [zeros(nz * q, nm * q), kron(&st, &eye(nz)) - kron(&iq, &im.g1)];
    let lhs = block(&[
        &[&row1[0], &row1[1]],
        &[&row2[0], &row2[1]],
        &[&row3[0], &row3[1]],
    ])?;
    let rhs = block(&[
        &[&col(&vec_of(&aug.e_cl))],
        &[&col(&vec_of(f_p))],
        &[&zeros(nz * q, 1)],
    ])?;
    let sol = lstsq(&lhs, &rhs)?;
    let x_m = unvec(&sol.as_slice()[..nm * q], nm, q);
    let z = unvec(&sol.as_slice()[nm * q..], nz, q);

    let r1 = &x_m * &exo.s - &aug.a_cl * &x_m - &aug.b_cl * &z - &aug.e_cl;
    let r2 = &aug.h1 * &x_m - f_p;
    let r3 = &z * &exo.s - &im.g1 * &z;
    let residual = (r1.norm_squared() + r2.norm_squared() + r3.norm_squared()).sqrt();
    let scale = input_scale(&[&aug.a_cl, &aug.b_cl, &aug.e_cl, &aug.h1, f_p, &exo.s, &im.g1]);
    let tol = 1e-7 * (1.0 + scale);
    if !(residual < tol) {
        return Err(Error::Residual {
            what: "augmented regulator equations".into(),
            residual,
            tol,
            hint: "no steady-state solution (X_M, Z) exists numerically".into(),
        });
    }
    let x_p = x_m.rows(0, aug.n_p).into_owned();
    let x_zeta = x_m.rows(aug.n_p, aug.n_zeta).into_owned();
    let r = &stab.c_zeta * &x_zeta + &stab.d_zeta * &im.k * &z;
    Ok(FrancisSolution {
        x_p,
        r,
        x_m,
        z,
        residual,
    })
}

/// Hybrid observer matrices for given gains `Q` (n x p) and `W` (p x p).
pub fn build_observer_matrices(aug: &AugmentedSystem, q: &Matrix, w: &Matrix) -> Result<ObserverParams> {
    let n = aug.n();
    let p = aug.p();
    ensure_shape(q, n, p, "Q (n x p)")?;
    ensure_shape(w, p, p, "W (p x p)")?;
    let t = block(&[&[&aug.frak_ac, q], &[&zeros(p, n), w]])?;
    let l1 = block(&[&[&eye(n), &zeros(n, p)], &[&(-&aug.h2), &zeros(p, p)]])?;
    let l2 = block(&[&[&zeros(n, p)], &[&eye(p)]])?;
    let h = block(&[&[&aug.h2, &zeros(p, p)]])?;
    Ok(ObserverParams {
        t,
        l1,
        l2,
        h,
        h2: aug.h2.clone(),
        q: q.clone(),
        w: w.clone(),
    })
}

/// `tol::HURWITZ`-strict Hurwitz test.
pub fn is_hurwitz(a: &Matrix) -> Result<bool> {
    Ok(linalg::spectral_abscissa(a)? < -tol::HURWITZ)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(r: usize, c: usize, v: &[f64]) -> Matrix {
        Matrix::from_row_slice(r, c, v)
    }

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn internal_model_with_overrides() {
        let exo = ExoSystem::new(m(2, 2, &[0.0, 1.0, -1.0, 0.0])).unwrap();
        let ov = InternalModelOverrides {
            g2: Some(m(2, 1, &[-5.0, -4.0])),
            ..Default::default()
        };
        let im = build_internal_model(&exo, 1, 1, &ov).unwrap();
        assert_eq!(im.g1, exo.s);
        assert_eq!(im.g2, m(2, 1, &[-5.0, -4.0]));
        assert_eq!(im.k, m(1, 2, &[1.0, 0.0]));

        let jordan = ExoSystem::new(m(2, 2, &[0.0, 1.0, 0.0, 0.0])).unwrap();
        let ov = InternalModelOverrides {
            g2: Some(m(2, 1, &[2.0, -4.0])),
            ..Default::default()
        };
        let im = build_internal_model(&jordan, 1, 1, &ov).unwrap();
        assert_eq!(im.g1, jordan.s);
        assert_eq!(im.g2, m(2, 1, &[2.0, -4.0]));
    }

    #[test]
    fn integrator_internal_model_default() {
        let exo = ExoSystem::new(m(1, 1, &[0.0])).unwrap();
        let im = build_internal_model(&exo, 1, 1, &InternalModelOverrides::default()).unwrap();
        assert_eq!(im.g1, m(1, 1, &[0.0]));
        assert_eq!(im.g2, m(1, 1, &[1.0]));
        assert_eq!(im.k, m(1, 1, &[1.0]));
    }

    #[test]
    fn uncontrollable_internal_model_is_rejected() {
        let exo = ExoSystem::new(m(2, 2, &[0.0, 1.0, 0.0, 0.0])).unwrap();
        let ov = InternalModelOverrides {
            g2: Some(m(2, 1, &[1.0, 0.0])),
            ..Default::default()
        };
        let err = build_internal_model(&exo, 1, 1, &ov).unwrap_err();
        assert!(matches!(err, Error::Uncontrollable { .. }), "{err}");
    }

    #[test]
    fn default_internal_model_is_controllable() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let w1: f64 = rng.random_range(0.2..3.0);
            let w2: f64 = rng.random_range(3.5..6.0);
            let s = block_diag(&[
                &m(2, 2, &[0.0, w1, -w1, 0.0]),
                &m(2, 2, &[0.0, w2, -w2, 0.0]),
            ]);
            let t = Matrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { rng.random_range(-0.5..0.5) });
            let s = t.clone().try_inverse().unwrap() * s * t;
            let exo = ExoSystem::new(s).unwrap();
            for p in 1..=2 {
                let im = build_internal_model(&exo, p, 1, &InternalModelOverrides::default()).unwrap();
                assert_eq!(linalg::rank(&controllability_matrix(&im.g1, &im.g2)), im.n_z());
            }
        }
    }

    #[test]
    fn ackermann_double_integrator() {
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let k = place_poles_si(&a, &b, &[c(-1.0, 0.0), c(-1.0, 0.0)]).unwrap();
        assert!((k[(0, 0)] + 1.0).abs() < 1e-12 && (k[(0, 1)] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn placement_at_existing_spectrum_gives_zero_gain() {
        let a = m(2, 2, &[-1.0, 1.0, 0.0, -3.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        let k = place_poles_si(&a, &b, &[c(-1.0, 0.0), c(-3.0, 0.0)]).unwrap();
        assert!(k.amax() < 1e-12);
    }

    #[test]
    fn placement_random_controllable() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let a = Matrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let b = Matrix::from_fn(4, 1, |_, _| rng.random_range(-1.0..1.0));
            let re1: f64 = rng.random_range(-3.0..-0.5);
            let re2: f64 = rng.random_range(-3.0..-0.5);
            let im1: f64 = rng.random_range(0.1..2.0);
            let desired = [c(re1, im1), c(re1, -im1), c(re2, 0.0), c(re2 - 0.7, 0.0)];
            let k = place_poles_si(&a, &b, &desired).unwrap();
            let got = linalg::eig(&(&a + &b * &k)).unwrap().eigenvalues;
            assert!(spectrum_distance(&got, &desired) < 1e-6);
        }
    }

    #[test]
    fn placement_errors() {
        let a = eye(2);
        let b = m(2, 1, &[1.0, 0.0]);
        assert!(matches!(
            place_poles_si(&a, &b, &[c(-1.0, 0.0), c(-2.0, 0.0)]),
            Err(Error::Uncontrollable { .. })
        ));
        let a = m(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let b = m(2, 1, &[0.0, 1.0]);
        assert!(matches!(
            place_poles_si(&a, &b, &[c(-1.0, 1.0), c(-2.0, 0.0)]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn designed_stabilizer_example_one() {
        let (plant, exo) = fixtures::example1_plant();
        let im = fixtures::example1_internal_model();
        let stab = design_stabilizer(&plant, &im, 0.1, &zeros(1, 1), None).unwrap();
        let aug = assemble_augmented(&plant, &im, &stab).unwrap();
        assert_eq!(aug.frak_ac.shape(), (8, 8));
        assert!(aug.beta_achieved >= 0.1);
        let _ = exo;
    }

    #[test]
    fn designed_stabilizer_scalar_plant() {
        let plant = PlantModel::new(m(1, 1, &[-1.0]), m(1, 1, &[1.0]), m(1, 1, &[0.0]), m(1, 1, &[1.0]), m(1, 1, &[0.0]))
            .unwrap();
        let exo = ExoSystem::new(m(1, 1, &[0.0])).unwrap();
        let im = build_internal_model(&exo, 1, 1, &InternalModelOverrides::default()).unwrap();
        let stab = design_stabilizer(&plant, &im, 0.5, &zeros(1, 1), None).unwrap();
        let bar = bar_form(&plant, &im, &stab).unwrap();
        assert_eq!(bar.shape(), (4, 4));
        assert!(linalg::spectral_abscissa(&bar).unwrap() <= -0.5);
        let aug = assemble_augmented(&plant, &im, &stab).unwrap();
        assert!(aug.beta_achieved >= 0.5 - 1e-9);
    }

    #[test]
    fn designed_stabilizer_example_two_with_feedthrough() {
        let (plant, _) = fixtures::example2_plant();
        let im = fixtures::example2_internal_model();
        let stab = design_stabilizer(&plant, &im, 0.1, &m(1, 1, &[5.0]), None).unwrap();
        let aug = assemble_augmented(&plant, &im, &stab).unwrap();
        assert_eq!(aug.frak_ac.shape(), (8, 8));
        assert!(aug.beta_achieved >= 0.1);
    }

    #[test]
    fn separation_principle_spectrum() {
        for (plant, im, d) in [
            (fixtures::example1_plant().0, fixtures::example1_internal_model(), 0.0),
            (fixtures::example2_plant().0, fixtures::example2_internal_model(), 5.0),
        ] {
            let d = m(1, 1, &[d]);
            let stab = design_stabilizer(&plant, &im, 0.2, &d, None).unwrap();
            let aug = assemble_augmented(&plant, &im, &stab).unwrap();
            let (a, b, cm) = stabilizer_design_pair(&plant, &im, &d).unwrap();
            let mut union = linalg::eig(&(&a + &b * &stab.c_zeta)).unwrap().eigenvalues;
            union.extend(linalg::eig(&(&a - &stab.b_zeta * &cm)).unwrap().eigenvalues);
            let got = linalg::eig(&aug.frak_ac).unwrap().eigenvalues;
            assert!(spectrum_distance(&got, &union) < 1e-6);
        }
    }

    #[test]
    fn bar_similarity_reproduces_three_block_form() {
        let (plant, _) = fixtures::example1_plant();
        let im = fixtures::example1_internal_model();
        for stab in [fixtures::example1_stabilizer(), design_stabilizer(&plant, &im, 0.1, &zeros(1, 1), None).unwrap()] {
            let aug = assemble_augmented(&plant, &im, &stab).unwrap();
            let t = bar_similarity(aug.n_p, aug.n_zeta, aug.n_z);
            let bar = t.transpose() * &aug.frak_ac * &t;
            let literal = bar_form(&plant, &im, &stab).unwrap();
            assert!((bar - literal).amax() < 1e-12);
        }
    }

    #[test]
    fn published_stabilizers_are_hurwitz() {
        let (plant, _) = fixtures::example1_plant();
        let aug = assemble_augmented(&plant, &fixtures::example1_internal_model(), &fixtures::example1_stabilizer()).unwrap();
        assert!(aug.beta_achieved >= 0.09);
        let (plant, _) = fixtures::example2_plant();
        let aug = assemble_augmented(&plant, &fixtures::example2_internal_model(), &fixtures::example2_stabilizer()).unwrap();
        assert!(aug.beta_achieved > 0.0);
    }

    #[test]
    fn zero_order_stabilizer_is_rejected() {
        let (plant, _) = fixtures::example1_plant();
        let im = fixtures::example1_internal_model();
        let stab = StabilizerParams {
            a_zeta: zeros(0, 0),
            b_zeta: zeros(0, 1),
            c_zeta: zeros(1, 0),
            d_zeta: zeros(1, 1),
        };
        assert!(matches!(assemble_augmented(&plant, &im, &stab), Err(Error::Dimension { .. })));
    }

    fn kron_free_residual(plant: &PlantModel, exo: &ExoSystem, x: &Matrix, r: &Matrix) -> f64 {
        let r1 = x * &exo.s - &plant.a_p * x - &plant.b_p * r - &plant.e_p;
        let r2 = &plant.c_p * x - &plant.f_p;
        r1.amax().max(r2.amax())
    }

    #[test]
    fn regulator_equations_examples() {
        for (plant, exo) in [fixtures::example1_plant(), fixtures::example2_plant()] {
            let sol = solve_regulator_equations(&plant, &exo).unwrap();
            assert!(sol.residual < 1e-8);
            assert!(kron_free_residual(&plant, &exo, &sol.x_p, &sol.r) < 1e-10);
        }
    }

    #[test]
    fn regulator_equations_homogeneous() {
        let (plant, exo) = fixtures::example1_plant();
        let plant = PlantModel::new(plant.a_p, plant.b_p, zeros(2, 2), plant.c_p, zeros(1, 2)).unwrap();
        let sol = solve_regulator_equations(&plant, &exo).unwrap();
        assert!(sol.x_p.amax() < 1e-14 && sol.r.amax() < 1e-14);
    }

    #[test]
    fn francis_examples_and_second_equation() {
        let cases = [
            (fixtures::example1_plant(), fixtures::example1_internal_model(), fixtures::example1_stabilizer()),
            (fixtures::example2_plant(), fixtures::example2_internal_model(), fixtures::example2_stabilizer()),
        ];
        for ((plant, exo), im, stab) in cases {
            let aug = assemble_augmented(&plant, &im, &stab).unwrap();
            let fr = solve_francis(&aug, &im, &stab, &exo, &plant.f_p).unwrap();
            assert!(fr.residual < 1e-7);
            assert!((&aug.h1 * &fr.x_m - &plant.f_p).amax() < 1e-7);
            // the plant block reproduces the plant-level regulator equations
            assert!(kron_free_residual(&plant, &exo, &fr.x_p, &fr.r) < 1e-7);
        }
    }

    #[test]
    fn francis_homogeneous_is_zero() {
        let (plant, exo) = fixtures::example1_plant();
        let plant = PlantModel::new(plant.a_p, plant.b_p, zeros(2, 2), plant.c_p, zeros(1, 2)).unwrap();
        let im = fixtures::example1_internal_model();
        let stab = fixtures::example1_stabilizer();
        let aug = assemble_augmented(&plant, &im, &stab).unwrap();
        let fr = solve_francis(&aug, &im, &stab, &exo, &plant.f_p).unwrap();
        assert!(fr.x_m.amax() < 1e-12 && fr.z.amax() < 1e-12);
    }

    #[test]
    fn observer_matrices_layout() {
        let (plant, _) = fixtures::example1_plant();
        let im = fixtures::example1_internal_model();
        let aug = assemble_augmented(&plant, &im, &fixtures::example1_stabilizer()).unwrap();
        let (q, w) = fixtures::example1_reference_gains();
        let obs = build_observer_matrices(&aug, &q, &w).unwrap();
        assert_eq!(obs.t.shape(), (9, 9));
        assert_eq!(obs.t[(8, 8)], -116.008);
        assert_eq!(obs.t.view((0, 8), (8, 1)), q.view((0, 0), (8, 1)));
        assert_eq!(obs.l1.view((8, 0), (1, 8)), (-&aug.h2).view((0, 0), (1, 8)));
        assert_eq!(obs.l2[(8, 0)], 1.0);
        assert_eq!(obs.h.ncols(), 9);

        let zero = build_observer_matrices(&aug, &zeros(8, 1), &zeros(1, 1)).unwrap();
        assert_eq!(zero.t, block_diag(&[&aug.frak_ac, &zeros(1, 1)]));

        let (plant2, _) = fixtures::example2_plant();
        let aug2 = assemble_augmented(&plant2, &fixtures::example2_internal_model(), &fixtures::example2_stabilizer()).unwrap();
        let (q2, w2) = fixtures::example2_reference_gains();
        let obs2 = build_observer_matrices(&aug2, &q2, &w2).unwrap();
        assert_eq!(obs2.t.shape(), (9, 9));
        assert_eq!(obs2.t[(8, 8)], -2998.8);

        assert!(build_observer_matrices(&aug, &zeros(7, 1), &w).is_err());
    }
}
