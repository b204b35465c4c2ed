//! JSON problem and regulator files.
//!
//! Matrices are nested row arrays. Key names follow the usual symbols:
//! `A_p`, `B_p`, `E_p`, `C_p`, `F_p`, `S`, `G1`, `G2`, `K`, `A_zeta`, ...

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ExoSystem, PlantModel};
use crate::synthesis::{InternalModel, InternalModelOverrides, StabilizerParams};

/// Matrix as rows, the on-disk form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rows(pub Vec<Vec<f64>>);

impl Rows {
    pub fn from_matrix(m: &Matrix) -> Self {
        Rows((0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect())
    }

    pub fn to_matrix(&self, field: &str) -> Result<Matrix> {
        let r = self.0.len();
        let c = self.0.first().map_or(0, Vec::len);
        if r == 0 || c == 0 {
            return Err(Error::Config(format!("{field}: matrix must be nonempty")));
        }
        if let Some(i) = self.0.iter().position(|row| row.len() != c) {
            return Err(Error::Config(format!(
                "{field}: row {i} has {} entries, row 0 has {c}",
                self.0[i].len()
            )));
        }
        Ok(Matrix::from_fn(r, c, |i, j| self.0[i][j]))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    #[serde(rename = "A_p")]
    pub a_p: Rows,
    #[serde(rename = "B_p")]
    pub b_p: Rows,
    #[serde(rename = "E_p")]
    pub e_p: Rows,
    #[serde(rename = "C_p")]
    pub c_p: Rows,
    #[serde(rename = "F_p")]
    pub f_p: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExoSection {
    #[serde(rename = "S")]
    pub s: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub lambda: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InternalModelSection {
    #[serde(rename = "G1", default, skip_serializing_if = "Option::is_none")]
    pub g1: Option<Rows>,
    #[serde(rename = "G2", default, skip_serializing_if = "Option::is_none")]
    pub g2: Option<Rows>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Rows>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizerSection {
    #[serde(rename = "A_zeta")]
    pub a_zeta: Rows,
    #[serde(rename = "B_zeta")]
    pub b_zeta: Rows,
    #[serde(rename = "C_zeta")]
    pub c_zeta: Rows,
    #[serde(rename = "D_zeta")]
    pub d_zeta: Rows,
}

/// Either a number or the string `"maximize"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GammaChoice {
    Fixed(f64),
    Keyword(GammaKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaKeyword {
    Maximize,
}

impl GammaChoice {
    pub fn fixed(&self) -> Option<f64> {
        match self {
            GammaChoice::Fixed(g) => Some(*g),
            GammaChoice::Keyword(_) => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmiSection {
    pub gamma: GammaChoice,
    /// Normalization `tr P1 + tr P2`; defaults to `10 (n + p)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_bound: Option<f64>,
    /// Upper end of the decay-rate search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_hi: Option<f64>,
    /// With `"maximize"`, gains are solved at `backoff * gamma*`; gains at the
    /// boundary itself are badly conditioned.
    #[serde(default = "default_backoff")]
    pub backoff: f64,
    /// Decay-rate slack accepted by the fixed-gain check.
    #[serde(default = "default_verify_tol")]
    pub verify_tolerance: f64,
}

fn default_backoff() -> f64 {
    0.9
}

fn default_verify_tol() -> f64 {
    1e-6
}

impl Default for LmiSection {
    fn default() -> Self {
        LmiSection {
            gamma: GammaChoice::Keyword(GammaKeyword::Maximize),
            trace_bound: None,
            gamma_hi: None,
            backoff: default_backoff(),
            verify_tolerance: default_verify_tol(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_output_dt")]
    pub output_dt: f64,
    #[serde(default = "default_n")]
    pub n_trajectories: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Defaults to `[1, 0.5, 0, ...]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_p0: Option<Vec<f64>>,
    /// Defaults to `[1, 0, ...]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w0: Option<Vec<f64>>,
    /// Decay fit window; defaults to the whole horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<[f64; 2]>,
}

fn default_horizon() -> f64 {
    40.0
}
fn default_output_dt() -> f64 {
    0.05
}
fn default_n() -> usize {
    200
}
fn default_seed() -> u64 {
    1
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection {
            horizon: default_horizon(),
            output_dt: default_output_dt(),
            n_trajectories: default_n(),
            seed: default_seed(),
            x_p0: None,
            w0: None,
            fit_window: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
}

/// Published or externally supplied observer gains for the verify path.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceGains {
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "W")]
    pub w: Rows,
    pub gamma: f64,
    pub lambda: f64,
    #[serde(default = "default_reference_tol")]
    pub tolerance: f64,
}

fn default_reference_tol() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub plant: PlantSection,
    pub exosystem: ExoSection,
    pub sampling: SamplingSection,
    #[serde(default)]
    pub internal_model: InternalModelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stabilizer: Option<StabilizerSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_target: Option<f64>,
    #[serde(rename = "D_zeta", default, skip_serializing_if = "Option::is_none")]
    pub d_zeta: Option<Rows>,
    #[serde(default)]
    pub lmi: LmiSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_gains: Option<ReferenceGains>,
}

/// How the stabilizer is obtained.
#[derive(Debug, Clone)]
pub enum StabilizerSource {
    Given(StabilizerParams),
    Design { beta_target: f64, d_zeta: Matrix },
}

/// Config with every matrix materialized and checked.
#[derive(Debug, Clone)]
pub struct Problem {
    pub config: ProblemConfig,
    pub plant: PlantModel,
    pub exo: ExoSystem,
    pub lambda: f64,
    pub overrides: InternalModelOverrides,
    pub stabilizer: StabilizerSource,
    pub x_p0: Vec<f64>,
    pub w0: Vec<f64>,
    pub reference: Option<(Matrix, Matrix)>,
}

fn positive(v: f64, field: &str) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: must be positive and finite, got {v}")))
    }
}

fn shape(m: &Matrix, rows: usize, cols: usize, field: &str) -> Result<()> {
    if m.nrows() == rows && m.ncols() == cols {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{field}: expected {rows}x{cols}, found {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

fn finite(m: &Matrix, field: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: non-finite entry")))
    }
}

fn mat(rows: &Rows, field: &str) -> Result<Matrix> {
    let m = rows.to_matrix(field)?;
    finite(&m, field)?;
    Ok(m)
}

impl ProblemConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json { path: origin.into(), source })
    }

    /// Check all dimensions and build the model objects.
    pub fn validate(self) -> Result<Problem> {
        let a_p = mat(&self.plant.a_p, "plant.A_p")?;
        let n_p = a_p.nrows();
        shape(&a_p, n_p, n_p, "plant.A_p")?;
        let b_p = mat(&self.plant.b_p, "plant.B_p")?;
        shape(&b_p, n_p, b_p.ncols(), "plant.B_p")?;
        let s = mat(&self.exosystem.s, "exosystem.S")?;
        let q = s.nrows();
        shape(&s, q, q, "exosystem.S")?;
        let e_p = mat(&self.plant.e_p, "plant.E_p")?;
        shape(&e_p, n_p, q, "plant.E_p")?;
        let c_p = mat(&self.plant.c_p, "plant.C_p")?;
        shape(&c_p, c_p.nrows(), n_p, "plant.C_p")?;
        let p = c_p.nrows();
        let f_p = mat(&self.plant.f_p, "plant.F_p")?;
        shape(&f_p, p, q, "plant.F_p")?;
        let m_p = b_p.ncols();
        let plant = PlantModel::new(a_p, b_p, e_p, c_p, f_p)?;
        let exo = ExoSystem::new(s)?;
        positive(self.sampling.lambda, "sampling.lambda")?;

        let im = &self.internal_model;
        let overrides = InternalModelOverrides {
            g1: im.g1.as_ref().map(|r| mat(r, "internal_model.G1")).transpose()?,
            g2: im.g2.as_ref().map(|r| mat(r, "internal_model.G2")).transpose()?,
            k: im.k.as_ref().map(|r| mat(r, "internal_model.K")).transpose()?,
        };
        if let Some(g1) = &overrides.g1 {
            shape(g1, g1.nrows(), g1.nrows(), "internal_model.G1")?;
            if let Some(g2) = &overrides.g2 {
                shape(g2, g1.nrows(), p, "internal_model.G2")?;
            }
            if let Some(k) = &overrides.k {
                shape(k, m_p, g1.nrows(), "internal_model.K")?;
            }
        }

        let stabilizer = match (&self.stabilizer, self.beta_target) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either stabilizer or beta_target, not both".into()))
            }
            (None, None) => return Err(Error::Config("missing field: stabilizer or beta_target".into())),
            (Some(st), None) => {
                if self.d_zeta.is_some() {
                    return Err(Error::Config("D_zeta: belongs inside stabilizer when it is given".into()));
                }
                let a_zeta = mat(&st.a_zeta, "stabilizer.A_zeta")?;
                let nz = a_zeta.nrows();
                shape(&a_zeta, nz, nz, "stabilizer.A_zeta")?;
                let b_zeta = mat(&st.b_zeta, "stabilizer.B_zeta")?;
                shape(&b_zeta, nz, m_p, "stabilizer.B_zeta")?;
                let c_zeta = mat(&st.c_zeta, "stabilizer.C_zeta")?;
                shape(&c_zeta, m_p, nz, "stabilizer.C_zeta")?;
                let d_zeta = mat(&st.d_zeta, "stabilizer.D_zeta")?;
                shape(&d_zeta, m_p, m_p, "stabilizer.D_zeta")?;
                StabilizerSource::Given(StabilizerParams { a_zeta, b_zeta, c_zeta, d_zeta })
            }
            (None, Some(beta)) => {
                positive(beta, "beta_target")?;
                let d_zeta = match &self.d_zeta {
                    Some(r) => {
                        let d = mat(r, "D_zeta")?;
                        shape(&d, m_p, m_p, "D_zeta")?;
                        d
                    }
                    None => Matrix::zeros(m_p, m_p),
                };
                StabilizerSource::Design { beta_target: beta, d_zeta }
            }
        };

        if let Some(g) = self.lmi.gamma.fixed() {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::Config(format!("lmi.gamma: must be nonnegative or \"maximize\", got {g}")));
            }
        }
        if let Some(tb) = self.lmi.trace_bound {
            positive(tb, "lmi.trace_bound")?;
        }
        if let Some(hi) = self.lmi.gamma_hi {
            positive(hi, "lmi.gamma_hi")?;
        }
        if !(self.lmi.backoff > 0.0 && self.lmi.backoff <= 1.0) {
            return Err(Error::Config(format!("lmi.backoff: must lie in (0, 1], got {}", self.lmi.backoff)));
        }
        if !(self.lmi.verify_tolerance.is_finite() && self.lmi.verify_tolerance >= 0.0) {
            return Err(Error::Config("lmi.verify_tolerance: must be nonnegative".into()));
        }

        let sim = &self.simulation;
        positive(sim.horizon, "simulation.horizon")?;
        positive(sim.output_dt, "simulation.output_dt")?;
        if sim.output_dt > sim.horizon {
            return Err(Error::Config("simulation.output_dt: exceeds horizon".into()));
        }
        if sim.n_trajectories < 2 {
            return Err(Error::Config(format!(
                "simulation.n_trajectories: at least 2 required, got {}",
                sim.n_trajectories
            )));
        }
        let x_p0 = match &sim.x_p0 {
            Some(v) if v.len() != n_p => {
                return Err(Error::Config(format!("simulation.x_p0: expected {n_p} entries, found {}", v.len())))
            }
            Some(v) => v.clone(),
            None => (0..n_p).map(|i| [1.0, 0.5].get(i).copied().unwrap_or(0.0)).collect(),
        };
        let w0 = match &sim.w0 {
            Some(v) if v.len() != q => {
                return Err(Error::Config(format!("simulation.w0: expected {q} entries, found {}", v.len())))
            }
            Some(v) => v.clone(),
            None => (0..q).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
        };
        if x_p0.iter().chain(&w0).any(|v| !v.is_finite()) {
            return Err(Error::Config("simulation: non-finite initial condition".into()));
        }
        if let Some([t0, t1]) = sim.fit_window {
            if !(t0 >= 0.0 && t0 < t1 && t1 <= sim.horizon) {
                return Err(Error::Config(format!(
                    "simulation.fit_window: [{t0}, {t1}] must be an increasing subrange of [0, {}]",
                    sim.horizon
                )));
            }
        }
        if let Some(sw) = &self.sweep {
            if sw.lambdas.is_empty() {
                return Err(Error::Config("sweep.lambdas: must be nonempty".into()));
            }
            if sw.lambdas.windows(2).any(|w| w[1] <= w[0]) || sw.lambdas.iter().any(|l| !(*l > 0.0)) {
                return Err(Error::Config("sweep.lambdas: must be positive and strictly increasing".into()));
            }
        }
        let reference = match &self.reference_gains {
            Some(rg) => {
                positive(rg.lambda, "reference_gains.lambda")?;
                if !(rg.gamma >= 0.0) {
                    return Err(Error::Config("reference_gains.gamma: must be nonnegative".into()));
                }
                let qm = mat(&rg.q, "reference_gains.Q")?;
                let wm = mat(&rg.w, "reference_gains.W")?;
                shape(&wm, p, p, "reference_gains.W")?;
                if qm.ncols() != p {
                    return Err(Error::Config(format!("reference_gains.Q: expected {p} columns, found {}", qm.ncols())));
                }
                Some((qm, wm))
            }
            None => None,
        };

        Ok(Problem {
            lambda: self.sampling.lambda,
            plant,
            exo,
            overrides,
            stabilizer,
            x_p0,
            w0,
            reference,
            config: self,
        })
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

/// Read and validate a problem file.
pub fn parse_config(path: &Path) -> Result<Problem> {
    ProblemConfig::from_json(&read(path)?, &path.display().to_string())?.validate()
}

/// Synthesized regulator, everything needed to rebuild the closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegulatorFile {
    pub lambda: f64,
    /// Decay rate the gains were certified at.
    pub gamma: f64,
    #[serde(rename = "G1")]
    pub g1: Rows,
    #[serde(rename = "G2")]
    pub g2: Rows,
    #[serde(rename = "K")]
    pub k: Rows,
    #[serde(rename = "A_zeta")]
    pub a_zeta: Rows,
    #[serde(rename = "B_zeta")]
    pub b_zeta: Rows,
    #[serde(rename = "C_zeta")]
    pub c_zeta: Rows,
    #[serde(rename = "D_zeta")]
    pub d_zeta: Rows,
    #[serde(rename = "Q")]
    pub q: Rows,
    #[serde(rename = "W")]
    pub w: Rows,
}

impl RegulatorFile {
    pub fn new(lambda: f64, gamma: f64, im: &InternalModel, stab: &StabilizerParams, q: &Matrix, w: &Matrix) -> Self {
        RegulatorFile {
            lambda,
            gamma,
            g1: Rows::from_matrix(&im.g1),
            g2: Rows::from_matrix(&im.g2),
            k: Rows::from_matrix(&im.k),
            a_zeta: Rows::from_matrix(&stab.a_zeta),
            b_zeta: Rows::from_matrix(&stab.b_zeta),
            c_zeta: Rows::from_matrix(&stab.c_zeta),
            d_zeta: Rows::from_matrix(&stab.d_zeta),
            q: Rows::from_matrix(q),
            w: Rows::from_matrix(w),
        }
    }

    pub fn internal_model(&self) -> Result<InternalModel> {
        Ok(InternalModel {
            g1: mat(&self.g1, "regulator.G1")?,
            g2: mat(&self.g2, "regulator.G2")?,
            k: mat(&self.k, "regulator.K")?,
        })
    }

    pub fn stabilizer(&self) -> Result<StabilizerParams> {
        Ok(StabilizerParams {
            a_zeta: mat(&self.a_zeta, "regulator.A_zeta")?,
            b_zeta: mat(&self.b_zeta, "regulator.B_zeta")?,
            c_zeta: mat(&self.c_zeta, "regulator.C_zeta")?,
            d_zeta: mat(&self.d_zeta, "regulator.D_zeta")?,
        })
    }

    pub fn gains(&self) -> Result<(Matrix, Matrix)> {
        Ok((mat(&self.q, "regulator.Q")?, mat(&self.w, "regulator.W")?))
    }

    /// Pretty JSON. Floats use the shortest representation that parses back
    /// to the identical `f64`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("regulator serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|source| Error::Io { path: path.display().to_string(), source })
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&read(path)?).map_err(|source| Error::Json { path: path.display().to_string(), source })
    }
}
