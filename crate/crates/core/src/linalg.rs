//! Dense real linear algebra used throughout the crate.
//!
//! Matrices are `nalgebra::DMatrix<f64>`. Eigenvalues come from a real Schur
//! decomposition, least squares from the SVD, and the matrix exponential from
//! a diagonal Padé approximant with scaling and squaring.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;
pub type C64 = Complex<f64>;

/// Tolerances shared by every module.
pub mod tol {
    /// Default absolute tolerance.
    pub const ABS: f64 = 1e-9;
    /// Default relative tolerance.
    pub const REL: f64 = 1e-7;
    /// Singular values below `RANK * sigma_max` count as zero.
    pub const RANK: f64 = 1e-8;
    /// Allowed asymmetry before a matrix is rejected as non-symmetric.
    pub const SYMMETRY: f64 = 1e-9;
    /// Distance from the imaginary axis still treated as "on the axis".
    pub const NEUTRAL: f64 = 1e-8;
    /// Eigenvalues with real part `>= -HURWITZ` are treated as non-stable modes.
    pub const HURWITZ: f64 = 1e-9;
    /// Scaled one-norm target for scaling and squaring.
    pub const EXPM_SCALED_NORM: f64 = 0.5;
}

const SCHUR_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<C64>,
    pub spectral_abscissa: f64,
}

impl Spectrum {
    pub fn is_hurwitz(&self) -> bool {
        self.spectral_abscissa < 0.0
    }
}

pub(crate) fn ensure_square(a: &Matrix, what: &str) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::NonSquare {
            what: what.to_string(),
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(a.nrows())
}

pub(crate) fn ensure_finite(a: &Matrix, what: &str) -> Result<()> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: what.to_string(),
        })
    }
}

pub(crate) fn ensure_shape(a: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if a.nrows() != rows || a.ncols() != cols {
        return Err(Error::dim(
            what,
            format!("{rows}x{cols}"),
            format!("{}x{}", a.nrows(), a.ncols()),
        ));
    }
    Ok(())
}

/// All eigenvalues of a square matrix, with multiplicity.
pub fn eig(a: &Matrix) -> Result<Spectrum> {
    let n = ensure_square(a, "eig")?;
    ensure_finite(a, "eig")?;
    if n == 0 {
        return Ok(Spectrum {
            eigenvalues: Vec::new(),
            spectral_abscissa: f64::NEG_INFINITY,
        });
    }
    let schur = a
        .clone()
        .try_schur(f64::EPSILON, SCHUR_MAX_ITER)
        .ok_or_else(|| Error::NoConvergence {
            what: "eig".into(),
            dim: n,
        })?;
    let eigenvalues: Vec<C64> = schur.complex_eigenvalues().iter().copied().collect();
    let spectral_abscissa = eigenvalues
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Spectrum {
        eigenvalues,
        spectral_abscissa,
    })
}

pub fn spectral_abscissa(a: &Matrix) -> Result<f64> {
    Ok(eig(a)?.spectral_abscissa)
}

pub fn one_norm(a: &Matrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

const PADE_ORDER: usize = 8;

fn pade_coefficients() -> [f64; PADE_ORDER + 1] {
    let m = PADE_ORDER as f64;
    let mut c = [0.0; PADE_ORDER + 1];
    c[0] = 1.0;
    for k in 1..=PADE_ORDER {
        let kf = k as f64;
        c[k] = c[k - 1] * (m - kf + 1.0) / (kf * (2.0 * m - kf + 1.0));
    }
    c
}

/// `e^{A t}` by scaling and squaring with an [8/8] Padé approximant.
pub fn expm(a: &Matrix, t: f64) -> Result<Matrix> {
    let n = ensure_square(a, "expm")?;
    if !t.is_finite() {
        return Err(Error::InvalidArgument(format!("expm: time {t} is not finite")));
    }
    let mut x = a * t;
    ensure_finite(&x, "expm")?;
    if n == 0 {
        return Ok(x);
    }
    let norm = one_norm(&x);
    let squarings = if norm > tol::EXPM_SCALED_NORM {
        (norm / tol::EXPM_SCALED_NORM).log2().ceil() as i32
    } else {
        0
    };
    if squarings > 0 {
        x /= 2f64.powi(squarings);
    }

    let c = pade_coefficients();
    let id = Matrix::identity(n, n);
    let x2 = &x * &x;
    let x4 = &x2 * &x2;
    let x6 = &x4 * &x2;
    let x8 = &x4 * &x4;
    let odd = &id * c[1] + &x2 * c[3] + &x4 * c[5] + &x6 * c[7];
    let u = &x * odd;
    let v = &id * c[0] + &x2 * c[2] + &x4 * c[4] + &x6 * c[6] + &x8 * c[8];
    let numer = &v + &u;
    let denom = &v - &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::NumericalBreakdown("expm Padé denominator".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

/// Minimum-norm least-squares solution of `A X = B`.
pub fn lstsq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.nrows() != b.nrows() {
        return Err(Error::dim("lstsq rows", a.nrows(), b.nrows()));
    }
    if a.ncols() == 0 || a.nrows() == 0 {
        return Ok(Matrix::zeros(a.ncols(), b.ncols()));
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = (a.nrows().max(a.ncols()) as f64) * f64::EPSILON * smax;
    svd.solve(b, cutoff)
        .map_err(|e| Error::NumericalBreakdown(format!("lstsq: {e}")))
}

/// Kronecker product.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Column-major vectorization.
pub fn vec_of(a: &Matrix) -> Vector {
    Vector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec_of`].
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_column_slice(rows, cols, v)
}

pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

fn checked_symmetric(a: &Matrix, what: &str) -> Result<Matrix> {
    ensure_square(a, what)?;
    ensure_finite(a, what)?;
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > tol::SYMMETRY * scale {
        return Err(Error::Asymmetric {
            what: what.to_string(),
            asymmetry: asym,
            tol: tol::SYMMETRY * scale,
        });
    }
    Ok(symmetrize(a))
}

/// Smallest eigenvalue of a (numerically) symmetric matrix.
pub fn min_eig_sym(a: &Matrix) -> Result<f64> {
    let s = checked_symmetric(a, "min_eig_sym")?;
    if s.nrows() == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(s.symmetric_eigenvalues().min())
}

/// Largest eigenvalue of a (numerically) symmetric matrix.
pub fn max_eig_sym(a: &Matrix) -> Result<f64> {
    let s = checked_symmetric(a, "max_eig_sym")?;
    if s.nrows() == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(s.symmetric_eigenvalues().max())
}

/// `A + A^T`.
pub fn he(a: &Matrix) -> Matrix {
    a + a.transpose()
}

/// Singular values of a complex matrix, descending.
pub fn complex_singular_values(a: &DMatrix<C64>) -> Vec<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = a.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

/// Numerical rank with threshold `sigma > RANK * sigma_max`.
pub fn complex_rank(a: &DMatrix<C64>) -> usize {
    let s = complex_singular_values(a);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&x| x > tol::RANK * smax).count(),
        _ => 0,
    }
}

pub fn rank(a: &Matrix) -> usize {
    complex_rank(&to_complex(a))
}

pub fn to_complex(a: &Matrix) -> DMatrix<C64> {
    a.map(|x| C64::new(x, 0.0))
}

/// `[B, AB, ..., A^{n-1}B]`.
pub fn controllability_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.nrows();
    let m = b.ncols();
    let mut out = Matrix::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        out.view_mut((0, k * m), (n, m)).copy_from(&blk);
        blk = a * blk;
    }
    out
}

/// Assemble a block matrix. Every block row must agree on height and every
/// block column on width.
pub fn block(rows: &[&[&Matrix]]) -> Result<Matrix> {
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    let ncols_blocks = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols_blocks) {
        return Err(Error::InvalidArgument("block: ragged block layout".into()));
    }
    let heights: Vec<usize> = rows.iter().map(|r| r[0].nrows()).collect();
    let widths: Vec<usize> = (0..ncols_blocks).map(|j| rows[0][j].ncols()).collect();
    for (i, r) in rows.iter().enumerate() {
        for (j, m) in r.iter().enumerate() {
            if m.nrows() != heights[i] || m.ncols() != widths[j] {
                return Err(Error::dim(
                    format!("block ({i},{j})"),
                    format!("{}x{}", heights[i], widths[j]),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
        }
    }
    let mut out = Matrix::zeros(heights.iter().sum(), widths.iter().sum());
    let mut r0 = 0;
    for (i, r) in rows.iter().enumerate() {
        let mut c0 = 0;
        for (j, m) in r.iter().enumerate() {
            out.view_mut((r0, c0), (heights[i], widths[j])).copy_from(*m);
            c0 += widths[j];
        }
        r0 += heights[i];
    }
    Ok(out)
}

pub fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn zeros(r: usize, c: usize) -> Matrix {
    Matrix::zeros(r, c)
}

pub fn eye(n: usize) -> Matrix {
    Matrix::identity(n, n)
}

/// Group numerically equal eigenvalues. Returns (representative, multiplicity).
pub(crate) fn cluster_eigenvalues(eigs: &[C64], radius: f64) -> Vec<(C64, usize)> {
    let mut clusters: Vec<(C64, usize)> = Vec::new();
    for &z in eigs {
        if let Some(c) = clusters.iter_mut().find(|(rep, _)| (rep - z).norm() <= radius) {
            let k = c.1 as f64;
            c.0 = (c.0 * k + z) / (k + 1.0);
            c.1 += 1;
        } else {
            clusters.push((z, 1));
        }
    }
    clusters
}

pub(crate) fn format_modes(modes: &[C64]) -> String {
    modes
        .iter()
        .map(|z| {
            if z.im.abs() < 1e-12 {
                format!("{:.6}", z.re)
            } else {
                format!("{:.6}{:+.6}i", z.re, z.im)
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}
