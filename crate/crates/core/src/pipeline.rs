//! End-to-end runs over a validated [`Problem`]: checks, synthesis,
//! simulation, Monte Carlo, sweeps and fixed-gain verification.
//!
//! Every run fills a [`RunReport`]. Stages that do not apply stay `skipped`;
//! a stage that errors is marked `failed` before the error propagates.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::{GammaChoice, Problem, RegulatorFile, StabilizerSource};
use crate::error::{Error, ErrorClass, Result};
use crate::linalg::{self, tol, Matrix, Vector};
use crate::lmi::{self, Feasibility, LmiSettings, SweepPoint, Verification};
use crate::model::{self, AssumptionReport};
use crate::pdmp::{self, ClosedLoop, Coordinates, SamplePath};
use crate::synthesis::{
    assemble_augmented, build_internal_model, build_observer_matrices, design_stabilizer, solve_francis,
    solve_regulator_equations, AugmentedSystem, FrancisSolution, InternalModel, RegulatorParams, StabilizerParams,
};
use crate::verify::{self, DecayEstimate, DynkinReport, MomentCurve};

pub const STAGES: [&str; 10] = [
    "assumptions",
    "internal_model",
    "stabilizer",
    "francis",
    "lmi",
    "verification",
    "dynkin",
    "simulation",
    "monte_carlo",
    "sweep",
];

/// Random unit vectors drawn by the generator check.
const DYNKIN_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Passed,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageEntry {
    pub name: &'static str,
    pub status: StageStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LmiSummary {
    pub lambda: f64,
    /// Boundary of the decay-rate search, when one was run.
    pub gamma_star: Option<f64>,
    pub monotone: Option<bool>,
    /// Rate the emitted gains were synthesized at.
    pub gamma: f64,
    pub certificate: f64,
    pub margin: f64,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationSummary {
    pub lambda: f64,
    pub gamma: f64,
    pub tolerance: f64,
    pub certified: bool,
    pub certified_gamma: Option<f64>,
    pub certificate: Option<f64>,
    pub best_violation: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloSummary {
    pub n_trajectories: usize,
    pub seed: u64,
    pub lambda: f64,
    pub horizon: f64,
    pub gamma_0_theory: f64,
    pub threshold: f64,
    /// `None` when the moment vanishes identically.
    pub fit: Option<DecayEstimate>,
    pub e_p_fit: Option<DecayEstimate>,
    pub ratio: f64,
    pub ratio_bound: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub seed: u64,
    pub jumps: usize,
    pub e_p_initial: f64,
    pub e_p_final: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub points: Vec<SweepPoint>,
    pub monotone: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: String,
    pub stages: Vec<StageEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub assumptions: Option<AssumptionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_achieved: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regulator_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub francis_residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lmi: Option<LmiSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dynkin: Option<DynkinReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<MonteCarloSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSummary>,
}

impl RunReport {
    pub fn new(command: &str) -> Self {
        RunReport {
            command: command.to_string(),
            stages: STAGES
                .iter()
                .map(|&name| StageEntry { name, status: StageStatus::Skipped, message: None })
                .collect(),
            assumptions: None,
            beta_achieved: None,
            regulator_residual: None,
            francis_residual: None,
            lmi: None,
            verification: None,
            dynkin: None,
            simulation: None,
            monte_carlo: None,
            sweep: None,
        }
    }

    pub fn status(&self, name: &str) -> StageStatus {
        self.stages.iter().find(|s| s.name == name).map_or(StageStatus::Skipped, |s| s.status)
    }

    fn mark(&mut self, name: &str, status: StageStatus, message: Option<String>) {
        if let Some(s) = self.stages.iter_mut().find(|s| s.name == name) {
            s.status = status;
            s.message = message;
        }
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        match f(self) {
            Ok(v) => {
                if self.status(name) == StageStatus::Skipped {
                    self.mark(name, StageStatus::Passed, None);
                }
                Ok(v)
            }
            Err(e) => {
                self.mark(name, StageStatus::Failed, Some(e.to_string()));
                Err(e)
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.stages.iter().all(|s| s.status != StageStatus::Failed)
    }

    /// Class of the first failed stage, for exit codes.
    pub fn failure_class(&self) -> Option<ErrorClass> {
        let failed = self.stages.iter().find(|s| s.status == StageStatus::Failed)?;
        Some(match failed.name {
            "assumptions" => ErrorClass::Assumption,
            "lmi" | "verification" | "dynkin" => ErrorClass::Infeasible,
            _ => ErrorClass::Numerical,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|source| io_err(path, source))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

/// Regulator pieces that do not depend on the observer gains.
#[derive(Debug, Clone)]
pub struct Design {
    pub internal_model: InternalModel,
    pub stabilizer: StabilizerParams,
    pub augmented: AugmentedSystem,
    pub francis: FrancisSolution,
}

fn lmi_settings(problem: &Problem) -> LmiSettings {
    LmiSettings { trace_bound: problem.config.lmi.trace_bound, ..LmiSettings::default() }
}

/// Assumption checks; fails the run unless `force` is set.
pub fn run_check(problem: &Problem, force: bool, report: &mut RunReport) -> Result<()> {
    let assumptions = model::check_assumptions(&problem.plant, &problem.exo, tol::NEUTRAL)?;
    let failures = assumptions.failures();
    report.assumptions = Some(assumptions);
    if failures.is_empty() {
        report.mark("assumptions", StageStatus::Passed, None);
        return Ok(());
    }
    let msg = failures.join("; ");
    report.mark("assumptions", StageStatus::Failed, Some(msg.clone()));
    if force {
        Ok(())
    } else {
        Err(Error::Assumption(msg))
    }
}

/// Internal model, stabilizer and regulator equations.
pub fn build_design(problem: &Problem, report: &mut RunReport) -> Result<Design> {
    let plant = &problem.plant;
    let im = report.stage("internal_model", |_| {
        build_internal_model(&problem.exo, plant.p(), plant.m_p(), &problem.overrides)
    })?;
    let (stab, aug) = report.stage("stabilizer", |r| {
        let stab = match &problem.stabilizer {
            StabilizerSource::Given(s) => s.clone(),
            StabilizerSource::Design { beta_target, d_zeta } => {
                design_stabilizer(plant, &im, *beta_target, d_zeta, None)?
            }
        };
        let aug = assemble_augmented(plant, &im, &stab)?;
        r.beta_achieved = Some(aug.beta_achieved);
        Ok((stab, aug))
    })?;
    let francis = report.stage("francis", |r| {
        r.regulator_residual = Some(solve_regulator_equations(plant, &problem.exo)?.residual);
        let f = solve_francis(&aug, &im, &stab, &problem.exo, &plant.f_p)?;
        r.francis_residual = Some(f.residual);
        Ok(f)
    })?;
    Ok(Design { internal_model: im, stabilizer: stab, augmented: aug, francis })
}

fn synthesize_at(aug: &AugmentedSystem, lambda: f64, gamma: f64, settings: &LmiSettings) -> Result<lmi::LmiSolution> {
    match lmi::solve_sdp_feasibility(&lmi::build_synthesis_lmi(&aug.frak_a, &aug.h2, lambda, gamma)?, settings)? {
        Feasibility::Feasible(sol) => Ok(*sol),
        Feasibility::Infeasible { best_violation } => Err(Error::Infeasible {
            context: format!("synthesis LMI at gamma = {gamma}, lambda = {lambda}"),
            violation: best_violation,
        }),
    }
}

/// Checks, regulator design and observer-gain synthesis.
pub fn run_synthesize(problem: &Problem, force: bool, report: &mut RunReport) -> Result<RegulatorFile> {
    run_check(problem, force, report)?;
    let design = build_design(problem, report)?;
    let aug = &design.augmented;
    let lambda = problem.lambda;
    let settings = lmi_settings(problem);
    let lmi_cfg = &problem.config.lmi;
    let sol = report.stage("lmi", |r| {
        let (gamma_star, monotone, gamma) = match lmi_cfg.gamma {
            GammaChoice::Fixed(g) => (None, None, g),
            GammaChoice::Keyword(_) => {
                let hi = lmi_cfg.gamma_hi.unwrap_or_else(|| lmi::default_gamma_hi(&aug.frak_a, lambda));
                let search = lmi::max_gamma(&aug.frak_a, &aug.h2, lambda, hi, &settings)?;
                (Some(search.gamma_star), Some(search.monotone), lmi_cfg.backoff * search.gamma_star)
            }
        };
        let sol = synthesize_at(aug, lambda, gamma, &settings)?;
        r.lmi = Some(LmiSummary {
            lambda,
            gamma_star,
            monotone,
            gamma,
            certificate: sol.certificate,
            margin: sol.margin,
            q: crate::config::Rows::from_matrix(&sol.q).0,
            w: crate::config::Rows::from_matrix(&sol.w).0,
        });
        Ok(sol)
    })?;
    verify_stage(report, aug, &sol.q, &sol.w, lambda, sol.gamma, lmi_cfg.verify_tolerance, &settings)?;
    Ok(RegulatorFile::new(lambda, sol.gamma, &design.internal_model, &design.stabilizer, &sol.q, &sol.w))
}

/// Fixed-gain LMI check; a failed certification is recorded, not raised.
#[allow(clippy::too_many_arguments)]
fn verify_stage(
    report: &mut RunReport,
    aug: &AugmentedSystem,
    q: &Matrix,
    w: &Matrix,
    lambda: f64,
    gamma: f64,
    tolerance: f64,
    settings: &LmiSettings,
) -> Result<Option<lmi::GainCertificate>> {
    report.stage("verification", |r| {
        let v = lmi::verify_gains_lmi(&aug.frak_a, &aug.h2, q, w, lambda, gamma, tolerance, settings)?;
        let mut summary = VerificationSummary {
            lambda,
            gamma,
            tolerance,
            certified: v.is_certified(),
            certified_gamma: None,
            certificate: None,
            best_violation: None,
        };
        let out = match v {
            Verification::Certified(c) => {
                summary.certified_gamma = Some(c.certified_gamma);
                summary.certificate = Some(c.certificate);
                Some(*c)
            }
            Verification::Infeasible { best_violation } => {
                summary.best_violation = Some(best_violation);
                r.mark(
                    "verification",
                    StageStatus::Failed,
                    Some(format!("gains not certified at gamma = {gamma}, lambda = {lambda}")),
                );
                None
            }
        };
        r.verification = Some(summary);
        Ok(out)
    })
}

/// Closed loop for the problem's plant with a stored regulator.
pub fn closed_loop(problem: &Problem, reg: &RegulatorFile) -> Result<(ClosedLoop, AugmentedSystem)> {
    let im = reg.internal_model()?;
    let stab = reg.stabilizer()?;
    let (q, w) = reg.gains()?;
    closed_loop_with(problem, &im, &stab, &q, &w)
}

fn closed_loop_with(
    problem: &Problem,
    im: &InternalModel,
    stab: &StabilizerParams,
    q: &Matrix,
    w: &Matrix,
) -> Result<(ClosedLoop, AugmentedSystem)> {
    let aug = assemble_augmented(&problem.plant, im, stab)?;
    let observer = build_observer_matrices(&aug, q, w)?;
    let francis = solve_francis(&aug, im, stab, &problem.exo, &problem.plant.f_p)?;
    let reg = RegulatorParams { internal_model: im.clone(), stabilizer: stab.clone(), observer };
    let cl = pdmp::assemble_closed_loop(&problem.plant, &problem.exo, &aug, &reg, &francis)?;
    Ok((cl, aug))
}

fn initial_state(problem: &Problem, cl: &ClosedLoop) -> Result<Vector> {
    cl.initial_state(&problem.w0, &problem.x_p0)
}

/// One sample path in original coordinates.
pub fn run_simulate(problem: &Problem, reg: &RegulatorFile, report: &mut RunReport) -> Result<(ClosedLoop, SamplePath)> {
    report.stage("simulation", |r| {
        let (cl, _) = closed_loop(problem, reg)?;
        let sim = &problem.config.simulation;
        let x0 = initial_state(problem, &cl)?;
        let path = pdmp::simulate(&cl, &x0, sim.horizon, sim.output_dt, reg.lambda, sim.seed, Coordinates::Original)?;
        r.simulation = Some(SimulationSummary {
            seed: sim.seed,
            jumps: path.jump_times.len(),
            e_p_initial: path.e_p.first().map_or(0.0, |e| e.norm()),
            e_p_final: path.e_p.last().map_or(0.0, |e| e.norm()),
        });
        Ok((cl, path))
    })
}

/// Ensemble moment, decay fit and the half-rate pass test.
pub fn monte_carlo(
    problem: &Problem,
    cl: &ClosedLoop,
    beta: f64,
    gamma: f64,
    lambda: f64,
    report: &mut RunReport,
) -> Result<MomentCurve> {
    report.stage("monte_carlo", |r| {
        let sim = &problem.config.simulation;
        let x0 = initial_state(problem, cl)?;
        let curve =
            verify::monte_carlo_moment(cl, &x0, sim.n_trajectories, sim.horizon, sim.output_dt, lambda, sim.seed)?;
        let window = sim.fit_window.map_or((0.0, sim.horizon), |[a, b]| (a, b));
        let gamma_0 = verify::gamma_0(beta, gamma);
        let threshold = 0.5 * gamma_0;
        let vanishing = |m: &[f64]| m.iter().all(|&v| v == 0.0);
        let fit = if vanishing(&curve.m) { None } else { Some(verify::fit_decay(&curve.grid, &curve.m, window)?) };
        let e_p_fit =
            if vanishing(&curve.e_p_m) { None } else { Some(verify::fit_decay(&curve.grid, &curve.e_p_m, window)?) };
        let m0 = curve.m[0];
        let ratio = if m0 > 0.0 { curve.m[curve.m.len() - 1] / m0 } else { 0.0 };
        let horizon = curve.grid[curve.grid.len() - 1];
        let ratio_bound = (-threshold * horizon).exp();
        let rate_ok = |f: &Option<DecayEstimate>| f.as_ref().is_none_or(|f| f.gamma_hat >= threshold);
        let passed = rate_ok(&fit) && rate_ok(&e_p_fit) && ratio <= ratio_bound;
        r.monte_carlo = Some(MonteCarloSummary {
            n_trajectories: sim.n_trajectories,
            seed: sim.seed,
            lambda,
            horizon,
            gamma_0_theory: gamma_0,
            threshold,
            fit,
            e_p_fit,
            ratio,
            ratio_bound,
            passed,
        });
        if !passed {
            r.mark(
                "monte_carlo",
                StageStatus::Failed,
                Some(format!("decay slower than half the certified rate {gamma_0:.4}")),
            );
        }
        Ok(curve)
    })
}

pub fn run_montecarlo(problem: &Problem, reg: &RegulatorFile, report: &mut RunReport) -> Result<MomentCurve> {
    let (cl, aug) = closed_loop(problem, reg)?;
    report.beta_achieved = Some(aug.beta_achieved);
    monte_carlo(problem, &cl, aug.beta_achieved, reg.gamma, reg.lambda, report)
}

/// `gamma*(lambda)` over a grid; defaults to `lambda * {1/2, 1, 2, 4}`.
pub fn run_sweep(problem: &Problem, lambdas: Option<&[f64]>, report: &mut RunReport) -> Result<SweepSummary> {
    let design = build_design(problem, report)?;
    let default: Vec<f64> = [0.5, 1.0, 2.0, 4.0].iter().map(|f| f * problem.lambda).collect();
    let grid = lambdas
        .or(problem.config.sweep.as_ref().map(|s| s.lambdas.as_slice()))
        .unwrap_or(&default)
        .to_vec();
    let settings = lmi_settings(problem);
    report.stage("sweep", |r| {
        let points = lmi::lambda_sweep(&design.augmented.frak_a, &design.augmented.h2, &grid, &settings)?;
        let star: Vec<f64> = points.iter().map(|p| p.gamma_star.unwrap_or(f64::NEG_INFINITY)).collect();
        let monotone = star.windows(2).all(|w| w[1] >= w[0]);
        let summary = SweepSummary { points, monotone };
        r.sweep = Some(summary.clone());
        Ok(summary)
    })
}

/// Gains to verify: a regulator file, or the config's reference gains.
pub struct VerifyInput {
    pub internal_model: Option<InternalModel>,
    pub stabilizer: Option<StabilizerParams>,
    pub q: Matrix,
    pub w: Matrix,
    pub lambda: f64,
    pub gamma: f64,
    pub tolerance: f64,
}

impl VerifyInput {
    pub fn from_regulator(reg: &RegulatorFile, tolerance: f64) -> Result<Self> {
        let (q, w) = reg.gains()?;
        Ok(VerifyInput {
            internal_model: Some(reg.internal_model()?),
            stabilizer: Some(reg.stabilizer()?),
            q,
            w,
            lambda: reg.lambda,
            gamma: reg.gamma,
            tolerance,
        })
    }

    pub fn from_reference(problem: &Problem) -> Result<Self> {
        let (Some((q, w)), Some(rg)) = (&problem.reference, &problem.config.reference_gains) else {
            return Err(Error::Config("reference_gains: needed when no regulator file is given".into()));
        };
        Ok(VerifyInput {
            internal_model: None,
            stabilizer: None,
            q: q.clone(),
            w: w.clone(),
            lambda: rg.lambda,
            gamma: rg.gamma,
            tolerance: rg.tolerance,
        })
    }
}

/// LMI certificate, generator check and Monte Carlo for fixed gains.
pub fn run_verify(problem: &Problem, input: &VerifyInput, report: &mut RunReport) -> Result<()> {
    let (im, stab) = match (&input.internal_model, &input.stabilizer) {
        (Some(im), Some(st)) => (im.clone(), st.clone()),
        _ => {
            let d = build_design(problem, report)?;
            (d.internal_model, d.stabilizer)
        }
    };
    let (cl, aug) = closed_loop_with(problem, &im, &stab, &input.q, &input.w)?;
    report.beta_achieved = Some(aug.beta_achieved);
    let settings = lmi_settings(problem);
    let cert =
        verify_stage(report, &aug, &input.q, &input.w, input.lambda, input.gamma, input.tolerance, &settings)?;
    let Some(cert) = cert else {
        return Ok(());
    };
    report.stage("dynkin", |r| {
        let mb = lmi::build_m(&aug.frak_a, &aug.h2, &input.q, &input.w)?;
        let rep = verify::dynkin_check(&mb, &cert.p1, &cert.p2, input.lambda, DYNKIN_SAMPLES, problem.config.simulation.seed)?;
        let p = linalg::block_diag(&[&cert.p1, &cert.p2]);
        let shifted = verify::generator_matrix(&mb, &cert.p1, &cert.p2, input.lambda) + &p * cert.certified_gamma;
        let top = linalg::max_eig_sym(&linalg::symmetrize(&shifted))?;
        r.dynkin = Some(rep);
        let scale = 1e-6 * (1.0 + p.norm());
        if rep.max_uv > scale || top > scale {
            r.mark(
                "dynkin",
                StageStatus::Failed,
                Some(format!("generator not negative: max sample {:.3e}, shifted eigenvalue {top:.3e}", rep.max_uv)),
            );
        }
        Ok(())
    })?;
    monte_carlo(problem, &cl, aug.beta_achieved, cert.certified_gamma, input.lambda, report)?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Columns `t, jump_flag, e_p*, x_p*, y_p*, y_w*` with `y_p = C_p x_p` and
/// `y_w = F_p w`.
pub fn write_simulation_csv<W: Write>(out: W, problem: &Problem, cl: &ClosedLoop, path: &SamplePath) -> Result<()> {
    let l = cl.layout;
    let p = problem.plant.p();
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "jump_flag".to_string()];
    header.extend(indexed("e_p", p));
    header.extend(indexed("x_p", l.n_p));
    header.extend(indexed("y_p", p));
    header.extend(indexed("y_w", p));
    wtr.write_record(&header)?;
    for (k, t) in path.grid.iter().enumerate() {
        let x = match path.coords {
            Coordinates::Original => path.states[k].clone(),
            Coordinates::Transformed => cl.inverse_transform(&path.states[k])?,
        };
        let w = x.rows(0, l.q).into_owned();
        let x_p = x.rows(l.q, l.n_p).into_owned();
        let y_p = &problem.plant.c_p * &x_p;
        let y_w = &problem.plant.f_p * &w;
        let mut row = vec![fmt(*t), u8::from(path.jump_flags[k]).to_string()];
        row.extend(path.e_p[k].iter().map(|v| fmt(*v)));
        row.extend(x_p.iter().map(|v| fmt(*v)));
        row.extend(y_p.iter().map(|v| fmt(*v)));
        row.extend(y_w.iter().map(|v| fmt(*v)));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

pub fn write_moment_csv<W: Write>(out: W, curve: &MomentCurve) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["t", "m", "stderr", "e_p_m"])?;
    for k in 0..curve.grid.len() {
        wtr.write_record([fmt(curve.grid[k]), fmt(curve.m[k]), fmt(curve.stderr[k]), fmt(curve.e_p_m[k])])?;
    }
    wtr.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Columns `lambda, gamma_star`; infeasible rows read `infeasible`.
pub fn write_sweep_csv<W: Write>(out: W, points: &[SweepPoint]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["lambda", "gamma_star"])?;
    for p in points {
        let g = p.gamma_star.map_or_else(|| "infeasible".to_string(), fmt);
        wtr.write_record([fmt(p.lambda), g])?;
    }
    wtr.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Create `path` and hand a writer to `f`.
pub fn write_file(path: &Path, f: impl FnOnce(&mut File) -> Result<()>) -> Result<()> {
    let mut file = File::create(path).map_err(|e| io_err(path, e))?;
    f(&mut file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ProblemConfig, Rows};
    use crate::fixtures;

    fn example1_problem(extra: serde_json::Value) -> Problem {
        let (plant, exo) = fixtures::example1_plant();
        let im = fixtures::example1_internal_model();
        let st = fixtures::example1_stabilizer();
        let r = |m: &Matrix| serde_json::to_value(Rows::from_matrix(m)).unwrap();
        let mut v = serde_json::json!({
            "plant": { "A_p": r(&plant.a_p), "B_p": r(&plant.b_p), "E_p": r(&plant.e_p), "C_p": r(&plant.c_p), "F_p": r(&plant.f_p) },
            "exosystem": { "S": r(&exo.s) },
            "sampling": { "lambda": 2.0 },
            "internal_model": { "G1": r(&im.g1), "G2": r(&im.g2), "K": r(&im.k) },
            "stabilizer": { "A_zeta": r(&st.a_zeta), "B_zeta": r(&st.b_zeta), "C_zeta": r(&st.c_zeta), "D_zeta": r(&st.d_zeta) },
            "lmi": { "gamma": 0.1 },
            "simulation": { "n_trajectories": 20, "horizon": 10.0, "output_dt": 0.1 }
        });
        for (k, val) in extra.as_object().unwrap() {
            v[k] = val.clone();
        }
        ProblemConfig::from_json(&v.to_string(), "test").unwrap().validate().unwrap()
    }

    #[test]
    fn every_stage_is_listed() {
        let r = RunReport::new("check");
        assert_eq!(r.stages.len(), STAGES.len());
        assert!(r.stages.iter().all(|s| s.status == StageStatus::Skipped));
        assert!(r.passed());
    }

    #[test]
    fn design_reproduces_fixture() {
        let problem = example1_problem(serde_json::json!({}));
        let mut report = RunReport::new("check");
        run_check(&problem, false, &mut report).unwrap();
        let d = build_design(&problem, &mut report).unwrap();
        assert!(d.augmented.beta_achieved >= 0.09);
        assert!(report.francis_residual.unwrap() < 1e-7);
        assert_eq!(report.status("francis"), StageStatus::Passed);
    }

    #[test]
    fn infeasible_rate_fails_lmi_stage() {
        let problem = example1_problem(serde_json::json!({ "lmi": { "gamma": 50.0 } }));
        let mut report = RunReport::new("synthesize");
        let err = run_synthesize(&problem, false, &mut report).unwrap_err();
        assert_eq!(err.class(), ErrorClass::Infeasible);
        assert_eq!(report.status("lmi"), StageStatus::Failed);
        assert_eq!(report.status("monte_carlo"), StageStatus::Skipped);
    }

    #[test]
    fn zero_gains_fail_verification() {
        let problem = example1_problem(serde_json::json!({}));
        let input = VerifyInput {
            internal_model: None,
            stabilizer: None,
            q: Matrix::zeros(8, 1),
            w: Matrix::zeros(1, 1),
            lambda: 2.0,
            gamma: 0.1,
            tolerance: 1e-4,
        };
        let mut report = RunReport::new("verify");
        run_verify(&problem, &input, &mut report).unwrap();
        assert_eq!(report.status("verification"), StageStatus::Failed);
        assert_eq!(report.failure_class(), Some(ErrorClass::Infeasible));
    }

    #[test]
    fn zero_initial_condition_gives_zero_error() {
        let problem = example1_problem(serde_json::json!({ "simulation": { "x_p0": [0, 0], "w0": [0, 0], "horizon": 5.0 } }));
        let (q, w) = fixtures::example1_reference_gains();
        let reg = RegulatorFile::new(
            2.0,
            0.1,
            &fixtures::example1_internal_model(),
            &fixtures::example1_stabilizer(),
            &q,
            &w,
        );
        let mut report = RunReport::new("simulate");
        let (cl, path) = run_simulate(&problem, &reg, &mut report).unwrap();
        assert!(path.e_p.iter().all(|e| e.amax() == 0.0));
        let mut buf = Vec::new();
        write_simulation_csv(&mut buf, &problem, &cl, &path).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,jump_flag,e_p1,x_p1,x_p2,y_p1,y_w1\n"));
        assert_eq!(text.lines().count(), path.grid.len() + 1);
    }

    #[test]
    fn sweep_csv_marks_infeasible() {
        let pts = [
            SweepPoint { lambda: 1.0, gamma_star: None },
            SweepPoint { lambda: 2.0, gamma_star: Some(0.125) },
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &pts).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "lambda,gamma_star\n1,infeasible\n2,0.125\n");
    }
}
