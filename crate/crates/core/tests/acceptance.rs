//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use stochreg_core::config::{parse_config, GammaChoice, GammaKeyword};
use stochreg_core::fixtures;
use stochreg_core::linalg::{self, Matrix, Vector};
use stochreg_core::lmi::{self, Feasibility, LmiSettings, Verification};
use stochreg_core::model;
use stochreg_core::pdmp::{self, Coordinates};
use stochreg_core::pipeline::{self, RunReport};
use stochreg_core::synthesis::{
    assemble_augmented, build_observer_matrices, solve_francis, solve_regulator_equations, AugmentedSystem,
    RegulatorParams,
};
use stochreg_core::verify;

type Check = std::result::Result<String, String>;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn example1_aug() -> AugmentedSystem {
    let (plant, _) = fixtures::example1_plant();
    assemble_augmented(&plant, &fixtures::example1_internal_model(), &fixtures::example1_stabilizer()).unwrap()
}

fn example1_assumptions() -> Check {
    let (plant, exo) = fixtures::example1_plant();
    let r = model::check_assumptions(&plant, &exo, 1e-8).map_err(err)?;
    ensure(r.stabilizable.passed, "not stabilizable")?;
    ensure(r.detectable.passed, "not detectable")?;
    ensure(r.nonresonant.passed, "resonant at +-i")?;
    Ok("stabilizable, detectable, non-resonant".into())
}

fn example1_stabilizer() -> Check {
    let aug = example1_aug();
    let abscissa = linalg::spectral_abscissa(&aug.frak_ac).map_err(err)?;
    ensure(abscissa <= -0.09, format!("spectral abscissa {abscissa:.4} > -0.09"))?;
    Ok(format!("spectral abscissa {abscissa:.4}"))
}

fn example1_synthesis() -> Check {
    let aug = example1_aug();
    let settings = LmiSettings::default();
    let hi = lmi::default_gamma_hi(&aug.frak_a, 2.0);
    let search = lmi::max_gamma(&aug.frak_a, &aug.h2, 2.0, hi, &settings).map_err(err)?;
    ensure(search.gamma_star >= 0.09, format!("gamma* = {:.4}", search.gamma_star))?;
    let problem = lmi::build_synthesis_lmi(&aug.frak_a, &aug.h2, 2.0, 0.09).map_err(err)?;
    let Feasibility::Feasible(sol) = lmi::solve_sdp_feasibility(&problem, &settings).map_err(err)? else {
        return Err("synthesis LMI infeasible at gamma = 0.09".into());
    };
    let v = lmi::verify_gains_lmi(&aug.frak_a, &aug.h2, &sol.q, &sol.w, 2.0, 0.09, 0.0, &settings).map_err(err)?;
    let Verification::Certified(c) = v else {
        return Err("recovered gains not certified at (0.09, 2)".into());
    };
    ensure(c.certificate <= 1e-6, format!("certificate {:.3e}", c.certificate))?;
    Ok(format!("gamma* = {:.4}, certificate {:.3e}", search.gamma_star, c.certificate))
}

fn example1_reference_gains() -> Check {
    let aug = example1_aug();
    let (q, w) = fixtures::example1_reference_gains();
    let settings = LmiSettings::default();
    for gamma in [0.1, 0.05] {
        let v = lmi::verify_gains_lmi(&aug.frak_a, &aug.h2, &q, &w, 2.0, gamma, 1e-4, &settings).map_err(err)?;
        if let Verification::Certified(c) = v {
            ensure(c.certificate <= 1e-4, format!("certificate {:.3e}", c.certificate))?;
            return Ok(format!("certified at gamma = {gamma}, certificate {:.3e}", c.certificate));
        }
    }
    Err("published gains certified neither at 0.1 nor at 0.05".into())
}

fn example2_pipeline() -> Check {
    let mut problem = parse_config(&fixture("example2.json")).map_err(err)?;
    problem.config.lmi.gamma = GammaChoice::Keyword(GammaKeyword::Maximize);
    let mut report = RunReport::new("synthesize");
    let reg = pipeline::run_synthesize(&problem, false, &mut report).map_err(err)?;
    let gamma_star = report.lmi.as_ref().and_then(|l| l.gamma_star).ok_or("no gamma*")?;
    ensure(gamma_star >= 0.09, format!("gamma* = {gamma_star:.4}"))?;
    pipeline::run_montecarlo(&problem, &reg, &mut report).map_err(err)?;
    let mc = report.monte_carlo.as_ref().ok_or("no Monte Carlo summary")?;
    let ep = mc.e_p_fit.as_ref().ok_or("e_p moment vanished")?;
    ensure(mc.passed, format!("Monte Carlo failed: {mc:?}"))?;
    ensure(ep.gamma_hat >= mc.threshold, format!("e_p rate {:.4} < {:.4}", ep.gamma_hat, mc.threshold))?;
    Ok(format!(
        "gamma* = {gamma_star:.4}, gains at {:.4}, e_p rate {:.4} >= {:.4}",
        reg.gamma, ep.gamma_hat, mc.threshold
    ))
}

fn lambda_sweep() -> Check {
    let aug = example1_aug();
    let pts = lmi::lambda_sweep(&aug.frak_a, &aug.h2, &[1.0, 2.0, 4.0, 8.0], &LmiSettings::default()).map_err(err)?;
    let star: Vec<f64> = pts.iter().map(|p| p.gamma_star.unwrap_or(f64::NEG_INFINITY)).collect();
    ensure(star.windows(2).all(|w| w[1] >= w[0]), format!("not monotone: {star:?}"))?;
    ensure(star[1] >= 0.09, format!("gamma*(2) = {:.4}", star[1]))?;
    let shown: Vec<String> = pts
        .iter()
        .map(|p| match p.gamma_star {
            Some(g) => format!("{}:{g:.3}", p.lambda),
            None => format!("{}:infeasible", p.lambda),
        })
        .collect();
    Ok(shown.join(" "))
}

fn example1_monte_carlo() -> Check {
    let problem = parse_config(&fixture("example1.json")).map_err(err)?;
    let sim = &problem.config.simulation;
    ensure(sim.n_trajectories == 200 && sim.horizon == 40.0, "fixture ensemble is not N = 200, T = 40")?;
    let mut report = RunReport::new("synthesize");
    let reg = pipeline::run_synthesize(&problem, false, &mut report).map_err(err)?;
    ensure(reg.gamma == 0.1, format!("gains synthesized at {}", reg.gamma))?;
    let (cl, _) = pipeline::closed_loop(&problem, &reg).map_err(err)?;
    let x0 = cl.initial_state(&problem.w0, &problem.x_p0).map_err(err)?;
    let curve = verify::monte_carlo_moment(&cl, &x0, 200, 40.0, 0.05, 2.0, sim.seed).map_err(err)?;
    let fit = verify::fit_decay_rate(&curve, (0.0, 40.0)).map_err(err)?;
    let gamma_0 = 0.05;
    let ratio = curve.m[curve.m.len() - 1] / curve.m[0];
    let bound = (-gamma_0 * 40.0 * 0.5f64).exp();
    ensure(fit.gamma_hat >= 0.5 * gamma_0, format!("gamma_hat {:.4}", fit.gamma_hat))?;
    ensure(ratio <= bound, format!("m(40)/m(0) = {ratio:.3e} > {bound:.3e}"))?;
    Ok(format!("gamma_hat {:.4} >= {:.3}, m(40)/m(0) = {ratio:.2e}", fit.gamma_hat, 0.5 * gamma_0))
}

fn pdmp_invariants() -> Check {
    let (plant, exo) = fixtures::example1_plant();
    let im = fixtures::example1_internal_model();
    let stab = fixtures::example1_stabilizer();
    let aug = assemble_augmented(&plant, &im, &stab).map_err(err)?;
    let (q, w) = fixtures::example1_reference_gains();
    let observer = build_observer_matrices(&aug, &q, &w).map_err(err)?;
    let francis = solve_francis(&aug, &im, &stab, &exo, &plant.f_p).map_err(err)?;
    let reg = RegulatorParams { internal_model: im, stabilizer: stab, observer };
    let cl = pdmp::assemble_closed_loop(&plant, &exo, &aug, &reg, &francis).map_err(err)?;
    let l = cl.layout;
    let x0 = cl.initial_state(&[1.0, 0.0], &[1.0, 0.5]).map_err(err)?;
    let times = pdmp::sample_intervals(2.0, 20.0, 11).map_err(err)?;
    let po = pdmp::simulate_with_jumps(&cl, &x0, 20.0, 0.05, &times, Coordinates::Original).map_err(err)?;
    let xt0 = cl.transform_state(&x0).map_err(err)?;
    let pt = pdmp::simulate_with_jumps(&cl, &xt0, 20.0, 0.05, &times, Coordinates::Transformed).map_err(err)?;
    ensure(!pt.jumps.is_empty(), "no jumps on the path")?;

    let chi2 = pt.jumps.iter().map(|j| j.after.rows(l.chi2_offset(), l.p).amax()).fold(0.0, f64::max);
    ensure(chi2 <= 1e-9, format!("chi2~ after jump {chi2:.3e}"))?;

    // e_p from plant coordinates against H2 x_alpha~ from the transformed path
    let mut ep_gap: f64 = 0.0;
    for (xo, xt) in po.states.iter().zip(&pt.states) {
        let w = xo.rows(0, l.q).into_owned();
        let x_p = xo.rows(l.q, l.n_p).into_owned();
        let e = &plant.c_p * x_p - &plant.f_p * w;
        let x_alpha = xt.rows(l.x_offset(), l.n()).into_owned();
        ep_gap = ep_gap.max((e - &aug.h2 * x_alpha).amax());
    }
    ensure(ep_gap <= 1e-6, format!("e_p identity gap {ep_gap:.3e}"))?;

    let coord_gap = po
        .states
        .iter()
        .zip(&pt.states)
        .map(|(xo, xt)| cl.inverse_transform(xt).map(|back| (back - xo).amax()))
        .collect::<stochreg_core::Result<Vec<f64>>>()
        .map_err(err)?
        .into_iter()
        .fold(0.0, f64::max);
    ensure(coord_gap <= 1e-6, format!("coordinate gap {coord_gap:.3e}"))?;
    Ok(format!(
        "{} jumps, chi2~ {chi2:.1e}, e_p gap {ep_gap:.1e}, coordinate gap {coord_gap:.1e}",
        pt.jumps.len()
    ))
}

fn sampler_statistics() -> Check {
    let rep = verify::sampler_stats(2.0, 100_000, 2024).map_err(err)?;
    ensure((0.475..=0.525).contains(&rep.mean), format!("mean {:.4}", rep.mean))?;
    ensure(rep.ks_ok(), format!("KS {:.4} >= {:.4}", rep.ks_statistic, rep.ks_critical))?;
    ensure(rep.chi2_ok(), format!("chi2 {:.2} >= {:.2}", rep.chi2_statistic, rep.chi2_critical))?;
    Ok(format!(
        "mean {:.4}, KS {:.4} < {:.4}, chi2 {:.2} < {:.2} ({} dof)",
        rep.mean, rep.ks_statistic, rep.ks_critical, rep.chi2_statistic, rep.chi2_critical, rep.chi2_dof
    ))
}

fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.nrows() * b.nrows(), a.ncols() * b.ncols(), |i, j| {
        a[(i / b.nrows(), j / b.ncols())] * b[(i % b.nrows(), j % b.ncols())]
    })
}

fn vec_cols(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

/// Brute-force `X S = A X + B R + E`, `C X = F` through one Kronecker system.
fn regulator_oracle(a: &Matrix, b: &Matrix, e: &Matrix, c: &Matrix, f: &Matrix, s: &Matrix) -> (Matrix, Matrix) {
    let (n, m, p, q) = (a.nrows(), b.ncols(), c.nrows(), s.nrows());
    let iq = Matrix::identity(q, q);
    let top_x = kron(&iq, a) - kron(&s.transpose(), &Matrix::identity(n, n));
    let top_r = kron(&iq, b);
    let bot_x = kron(&iq, c);
    let rows = n * q + p * q;
    let cols = n * q + m * q;
    let mut k = Matrix::zeros(rows, cols);
    k.view_mut((0, 0), (n * q, n * q)).copy_from(&top_x);
    k.view_mut((0, n * q), (n * q, m * q)).copy_from(&top_r);
    k.view_mut((n * q, 0), (p * q, n * q)).copy_from(&bot_x);
    let mut rhs = Vector::zeros(rows);
    rhs.rows_mut(0, n * q).copy_from(&(-vec_cols(e)));
    rhs.rows_mut(n * q, p * q).copy_from(&vec_cols(f));
    let sol = k.svd(true, true).solve(&rhs, 1e-12).unwrap();
    let x = Matrix::from_column_slice(n, q, sol.rows(0, n * q).as_slice());
    let r = Matrix::from_column_slice(m, q, sol.rows(n * q, m * q).as_slice());
    (x, r)
}

fn scalar_margin(a: f64, lambda: f64, gamma: f64, p1: f64, qb: f64, rb: f64) -> f64 {
    // p2 = 1 by homogeneity
    if p1 <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let tl = 2.0 * (p1 * a - qb) + gamma * p1;
    let off = -a + rb - qb;
    let br = 2.0 * rb + gamma - lambda;
    -(0.5 * (tl + br) + (0.25 * (tl - br).powi(2) + off * off).sqrt())
}

fn scalar_grid_feasible(a: f64, lambda: f64, gamma: f64) -> bool {
    let axis = |lo: f64, hi: f64, k: usize| (0..=k).map(move |i| lo + (hi - lo) * i as f64 / k as f64);
    let mut best = (f64::NEG_INFINITY, [1.0, 0.0, 0.0]);
    for p1 in axis(0.05, 20.0, 80) {
        for qb in axis(-40.0, 40.0, 80) {
            for rb in axis(-40.0, 40.0, 80) {
                let f = scalar_margin(a, lambda, gamma, p1, qb, rb);
                if f > best.0 {
                    best = (f, [p1, qb, rb]);
                }
            }
        }
    }
    // pattern search from the best lattice point
    let mut step = 0.5;
    while step > 1e-13 && best.0 <= 0.0 {
        let mut moved = false;
        for d in 0..27 {
            let dir = [d % 3, (d / 3) % 3, d / 9].map(|c| c as f64 - 1.0);
            let c: [f64; 3] = std::array::from_fn(|i| best.1[i] + step * dir[i]);
            let f = scalar_margin(a, lambda, gamma, c[0], c[1], c[2]);
            if f > best.0 {
                best = (f, c);
                moved = true;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    best.0 > 0.0
}

fn oracle_equivalences() -> Check {
    // regulator equations on both plants
    let mut worst: f64 = 0.0;
    let cases = [
        (fixtures::example1_plant(), fixtures::example1_internal_model(), fixtures::example1_stabilizer()),
        (fixtures::example2_plant(), fixtures::example2_internal_model(), fixtures::example2_stabilizer()),
    ];
    for ((plant, exo), im, stab) in &cases {
        let (x, r) = regulator_oracle(&plant.a_p, &plant.b_p, &plant.e_p, &plant.c_p, &plant.f_p, &exo.s);
        let lib = solve_regulator_equations(plant, exo).map_err(err)?;
        let res = (&x * &exo.s - &plant.a_p * &x - &plant.b_p * &r - &plant.e_p).amax();
        worst = worst.max(res).max(lib.residual);
        ensure((&lib.x_p - &x).amax() < 1e-7 && (&lib.r - &r).amax() < 1e-7, "regulator solution differs from oracle")?;

        let aug = assemble_augmented(plant, im, stab).map_err(err)?;
        let fr = solve_francis(&aug, im, stab, exo, &plant.f_p).map_err(err)?;
        let r1 = (&fr.x_m * &exo.s - &aug.a_cl * &fr.x_m - &aug.b_cl * &fr.z - &aug.e_cl).amax();
        let r2 = (&aug.h1 * &fr.x_m - &plant.f_p).amax();
        let r3 = (&fr.z * &exo.s - &im.g1 * &fr.z).amax();
        worst = worst.max(r1).max(r2).max(r3);
    }
    ensure(worst < 1e-7, format!("regulator residual {worst:.3e}"))?;

    // scalar LMI boundary against grid search
    let mut gap: f64 = 0.0;
    for (a, lambda) in [(-1.0, 1.0), (0.5, 3.0)] {
        let am = Matrix::from_element(1, 1, a);
        let h = Matrix::from_element(1, 1, 1.0);
        let settings = LmiSettings::default();
        let search =
            lmi::max_gamma(&am, &h, lambda, lmi::default_gamma_hi(&am, lambda), &settings).map_err(err)?;
        let (mut lo, mut hi) = (0.0, lambda + 2.0 * a.abs() + 10.0);
        while hi - lo > 1e-4 {
            let mid = 0.5 * (lo + hi);
            if scalar_grid_feasible(a, lambda, mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        gap = gap.max((search.gamma_star - lo).abs());
    }
    ensure(gap <= 2e-3, format!("scalar boundary gap {gap:.3e}"))?;

    // expm against a truncated Taylor series
    let mut expm_gap: f64 = 0.0;
    let mut seed = 0x2545_f491_4f6c_dd1du64;
    let mut next = || {
        seed ^= seed << 13;
        seed ^= seed >> 7;
        seed ^= seed << 17;
        (seed >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    for n in [1, 2, 3, 5, 8] {
        for _ in 0..10 {
            let mut a = Matrix::from_fn(n, n, |_, _| next());
            let norm1 = (0..n).map(|j| a.column(j).abs().sum()).fold(0.0, f64::max);
            a *= 2.0 / norm1;
            let mut term = Matrix::identity(n, n);
            let mut sum = term.clone();
            for k in 1..40 {
                term = &term * &a / k as f64;
                sum += &term;
            }
            expm_gap = expm_gap.max((linalg::expm(&a, 1.0).map_err(err)? - sum).amax());
        }
    }
    ensure(expm_gap <= 1e-10, format!("expm gap {expm_gap:.3e}"))?;
    Ok(format!("regulator residual {worst:.1e}, scalar gap {gap:.1e}, expm gap {expm_gap:.1e}"))
}

struct Criterion {
    id: usize,
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Check,
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let criteria = [
        Criterion { id: 1, name: "example 1 assumption suite", limit: secs(1), run: example1_assumptions },
        Criterion { id: 2, name: "example 1 stabilizer fixture", limit: secs(1), run: example1_stabilizer },
        Criterion { id: 3, name: "example 1 LMI synthesis", limit: secs(30), run: example1_synthesis },
        Criterion { id: 4, name: "example 1 published gains", limit: None, run: example1_reference_gains },
        Criterion { id: 5, name: "example 2 pipeline", limit: secs(60), run: example2_pipeline },
        Criterion { id: 6, name: "lambda-gamma sweep", limit: None, run: lambda_sweep },
        Criterion { id: 7, name: "example 1 Monte Carlo MES", limit: secs(60), run: example1_monte_carlo },
        Criterion { id: 8, name: "PDMP structural invariants", limit: None, run: pdmp_invariants },
        Criterion { id: 9, name: "sampler statistics", limit: None, run: sampler_statistics },
        Criterion { id: 10, name: "oracle equivalences", limit: None, run: oracle_equivalences },
    ];
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => Err(format!("took {elapsed:.1?}, limit {limit:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {} ({elapsed:.2?}): {detail}", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {} ({elapsed:.2?}): {detail}", c.id, c.name);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
