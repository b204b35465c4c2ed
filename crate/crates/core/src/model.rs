//! Plant, exosystem and sampling data, and the solvability checks run on them.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{
    self, cluster_eigenvalues, complex_rank, complex_singular_values, ensure_finite,
    ensure_shape, ensure_square, to_complex, tol, Matrix, C64,
};

/// `x_p' = A_p x_p + B_p u + E_p w`, `e_p = C_p x_p - F_p w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    pub a_p: Matrix,
    pub b_p: Matrix,
    pub e_p: Matrix,
    pub c_p: Matrix,
    pub f_p: Matrix,
}

impl PlantModel {
    pub fn new(a_p: Matrix, b_p: Matrix, e_p: Matrix, c_p: Matrix, f_p: Matrix) -> Result<Self> {
        let n = ensure_square(&a_p, "A_p")?;
        let q = e_p.ncols();
        if b_p.nrows() != n {
            return Err(Error::dim("B_p rows (n_p)", n, b_p.nrows()));
        }
        if e_p.nrows() != n {
            return Err(Error::dim("E_p rows (n_p)", n, e_p.nrows()));
        }
        if c_p.ncols() != n {
            return Err(Error::dim("C_p columns (n_p)", n, c_p.ncols()));
        }
        ensure_shape(&f_p, c_p.nrows(), q, "F_p (p x q)")?;
        for (m, name) in [(&a_p, "A_p"), (&b_p, "B_p"), (&e_p, "E_p"), (&c_p, "C_p"), (&f_p, "F_p")] {
            ensure_finite(m, name)?;
        }
        Ok(Self {
            a_p,
            b_p,
            e_p,
            c_p,
            f_p,
        })
    }

    pub fn n_p(&self) -> usize {
        self.a_p.nrows()
    }

    pub fn m_p(&self) -> usize {
        self.b_p.ncols()
    }

    /// Number of regulated outputs.
    pub fn p(&self) -> usize {
        self.c_p.nrows()
    }

    pub fn q(&self) -> usize {
        self.e_p.ncols()
    }
}

/// `w' = S w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExoSystem {
    pub s: Matrix,
}

impl ExoSystem {
    pub fn new(s: Matrix) -> Result<Self> {
        ensure_square(&s, "S")?;
        ensure_finite(&s, "S")?;
        Ok(Self { s })
    }

    pub fn q(&self) -> usize {
        self.s.nrows()
    }
}

/// Poisson sampling with intensity `lambda` (mean interval `1/lambda`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingProcess {
    lambda: f64,
}

impl SamplingProcess {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "sampling intensity must be positive and finite, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mean_interval(&self) -> f64 {
        1.0 / self.lambda
    }
}

/// Result of a rank test. `witness` lists the offending eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub passed: bool,
    #[serde(serialize_with = "serialize_modes")]
    pub witness: Vec<C64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

fn serialize_modes<S: serde::Serializer>(modes: &[C64], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(modes.len()))?;
    for z in modes {
        seq.serialize_element(&[z.re, z.im])?;
    }
    seq.end()
}

impl CheckOutcome {
    fn from_witness(witness: Vec<C64>) -> Self {
        Self {
            passed: witness.is_empty(),
            witness,
            warning: None,
        }
    }
}

fn dedup_modes(eigs: &[C64]) -> Vec<C64> {
    cluster_eigenvalues(eigs, 1e-7).into_iter().map(|(z, _)| z).collect()
}

fn shifted(a: &Matrix, z: C64) -> DMatrix<C64> {
    let n = a.nrows();
    to_complex(a) - DMatrix::<C64>::identity(n, n) * z
}

/// PBH test on `[A - zI, B]` for every eigenvalue `z` of `A` selected by `filter`.
fn pbh_failures(a: &Matrix, b: &Matrix, filter: impl Fn(C64) -> bool) -> Result<Vec<C64>> {
    let n = a.nrows();
    let spectrum = linalg::eig(a)?;
    let bc = to_complex(b);
    let mut failing = Vec::new();
    for z in dedup_modes(&spectrum.eigenvalues) {
        if !filter(z) {
            continue;
        }
        let mut pencil = DMatrix::<C64>::zeros(n, n + b.ncols());
        pencil.view_mut((0, 0), (n, n)).copy_from(&shifted(a, z));
        pencil.view_mut((0, n), (n, b.ncols())).copy_from(&bc);
        if complex_rank(&pencil) < n {
            failing.push(z);
        }
    }
    Ok(failing)
}

pub(crate) fn uncontrollable_modes(a: &Matrix, b: &Matrix) -> Result<Vec<C64>> {
    ensure_square(a, "A")?;
    if b.nrows() != a.nrows() {
        return Err(Error::dim("B rows", a.nrows(), b.nrows()));
    }
    pbh_failures(a, b, |_| true)
}

/// `(A, B)` is stabilizable iff `rank [A - zI, B] = n` for every eigenvalue
/// `z` with `Re z >= 0` (up to tolerance).
pub fn check_stabilizable(a: &Matrix, b: &Matrix) -> Result<CheckOutcome> {
    ensure_square(a, "A")?;
    if b.nrows() != a.nrows() {
        return Err(Error::dim("B rows", a.nrows(), b.nrows()));
    }
    let failing = pbh_failures(a, b, |z| z.re >= -tol::HURWITZ)?;
    Ok(CheckOutcome::from_witness(failing))
}

/// Dual of [`check_stabilizable`].
pub fn check_detectable(a: &Matrix, c: &Matrix) -> Result<CheckOutcome> {
    ensure_square(a, "A")?;
    if c.ncols() != a.nrows() {
        return Err(Error::dim("C columns", a.nrows(), c.ncols()));
    }
    check_stabilizable(&a.transpose(), &c.transpose())
}

/// Full rank of `[[A_p - zI, B_p], [C_p, 0]]` at every eigenvalue of `S`.
pub fn check_nonresonance(plant: &PlantModel, exo: &ExoSystem) -> Result<CheckOutcome> {
    if exo.q() != plant.q() {
        return Err(Error::dim("S size vs E_p columns (q)", plant.q(), exo.q()));
    }
    let n = plant.n_p();
    let m = plant.m_p();
    let p = plant.p();
    let target = (n + p).min(n + m);
    let spectrum = linalg::eig(&exo.s)?;
    let mut failing = Vec::new();
    for z in dedup_modes(&spectrum.eigenvalues) {
        let mut pencil = DMatrix::<C64>::zeros(n + p, n + m);
        pencil.view_mut((0, 0), (n, n)).copy_from(&shifted(&plant.a_p, z));
        pencil.view_mut((0, n), (n, m)).copy_from(&to_complex(&plant.b_p));
        pencil.view_mut((n, 0), (p, n)).copy_from(&to_complex(&plant.c_p));
        if complex_rank(&pencil) < target {
            failing.push(z);
        }
    }
    Ok(CheckOutcome::from_witness(failing))
}

/// Eigenvalues on the imaginary axis (within `tol_neutral`), plus a
/// diagonalizability test. A defective but on-axis `S` passes with a warning.
pub fn check_neutrally_stable(exo: &ExoSystem, tol_neutral: f64) -> Result<CheckOutcome> {
    let s = &exo.s;
    let q = s.nrows();
    let spectrum = linalg::eig(s)?;
    let off_axis: Vec<C64> = spectrum
        .eigenvalues
        .iter()
        .copied()
        .filter(|z| z.re.abs() >= tol_neutral)
        .collect();
    if !off_axis.is_empty() {
        return Ok(CheckOutcome::from_witness(dedup_modes(&off_axis)));
    }

    // Defective eigenvalues of a perturbed Jordan block split by ~sqrt(eps).
    let scale = s.amax().max(1.0);
    let clusters = cluster_eigenvalues(&spectrum.eigenvalues, 1e-6 * scale);
    let mut basis: Vec<nalgebra::DVector<C64>> = Vec::with_capacity(q);
    let mut defective = Vec::new();
    for (z, mult) in clusters {
        let m = shifted(s, z);
        let svd = m.clone().svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let sv = &svd.singular_values;
        let null_idx: Vec<usize> = (0..sv.len()).filter(|&i| sv[i] <= 1e-6 * scale).collect();
        if null_idx.len() < mult {
            defective.push(z);
            continue;
        }
        let mut idx = null_idx;
        idx.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
        for &i in idx.iter().take(mult) {
            basis.push(v_t.row(i).adjoint());
        }
    }
    let mut warning = None;
    if defective.is_empty() {
        let v = DMatrix::<C64>::from_columns(&basis);
        let sv = complex_singular_values(&v);
        let cond = sv.first().copied().unwrap_or(1.0) / sv.last().copied().unwrap_or(1.0);
        if !(cond < 1e8) {
            warning = Some(format!(
                "S eigenvector matrix is ill-conditioned (cond {cond:.2e}); treated as not diagonalizable"
            ));
        }
    } else {
        warning = Some(format!(
            "S has eigenvalues on the imaginary axis but is not diagonalizable (defective modes: {}); \
             exosystem signals grow polynomially",
            linalg::format_modes(&defective)
        ));
    }
    Ok(CheckOutcome {
        passed: true,
        witness: defective,
        warning,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    pub stabilizable: CheckOutcome,
    pub detectable: CheckOutcome,
    pub nonresonant: CheckOutcome,
    pub neutrally_stable: CheckOutcome,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.stabilizable.passed
            && self.detectable.passed
            && self.nonresonant.passed
            && self.neutrally_stable.passed
    }

    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.stabilizable.passed {
            out.push("(A_p, B_p) not stabilizable");
        }
        if !self.detectable.passed {
            out.push("(A_p, C_p) not detectable");
        }
        if !self.nonresonant.passed {
            out.push("plant has a transmission zero on the exosystem spectrum");
        }
        if !self.neutrally_stable.passed {
            out.push("S has eigenvalues off the imaginary axis");
        }
        out
    }
}

pub fn check_assumptions(plant: &PlantModel, exo: &ExoSystem, tol_neutral: f64) -> Result<AssumptionReport> {
    Ok(AssumptionReport {
        stabilizable: check_stabilizable(&plant.a_p, &plant.b_p)?,
        detectable: check_detectable(&plant.a_p, &plant.c_p)?,
        nonresonant: check_nonresonance(plant, exo)?,
        neutrally_stable: check_neutrally_stable(exo, tol_neutral)?,
    })
}
