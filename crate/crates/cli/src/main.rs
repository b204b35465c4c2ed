use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stochreg_core::config::{self, GammaChoice, Problem, RegulatorFile};
use stochreg_core::pipeline::{self, RunReport, VerifyInput};
use stochreg_core::{Error, ErrorClass, Result};

/// Output regulation with Poisson-sampled measurements.
#[derive(Parser)]
#[command(name = "stochreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check stabilizability, detectability, non-resonance and neutral stability.
    Check(Common),
    /// Design the regulator and synthesize observer gains; writes regulator.json.
    Synthesize(Common),
    /// Simulate one sample path; writes simulation.csv.
    Simulate(Common),
    /// Ensemble second moment and decay fit; writes moments.csv.
    Montecarlo(Common),
    /// Largest certified decay rate over a grid of sampling rates; writes sweep.csv.
    Sweep(Common),
    /// Certify fixed gains from --regulator, or the config's reference gains.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    regulator: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Continue past failed assumption checks.
    #[arg(long)]
    force: bool,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Infeasible => 2,
        ErrorClass::Assumption => 3,
        ErrorClass::Input => 4,
        ErrorClass::Numerical => 1,
    }
}

fn load(args: &Common) -> Result<Problem> {
    let mut problem = config::parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        problem.config.simulation.seed = seed;
    }
    if let Some(g) = args.gamma {
        if !(g.is_finite() && g >= 0.0) {
            return Err(Error::Config(format!("--gamma: must be nonnegative, got {g}")));
        }
        problem.config.lmi.gamma = GammaChoice::Fixed(g);
    }
    if let Some(l) = args.lambda {
        if !(l.is_finite() && l > 0.0) {
            return Err(Error::Config(format!("--lambda: must be positive, got {l}")));
        }
        problem.lambda = l;
    }
    fs::create_dir_all(&args.out).map_err(|source| Error::Io { path: args.out.display().to_string(), source })?;
    Ok(problem)
}

fn regulator(args: &Common) -> Result<RegulatorFile> {
    let path = args
        .regulator
        .as_ref()
        .ok_or_else(|| Error::Config("--regulator is required for this command".into()))?;
    let mut reg = RegulatorFile::read(path)?;
    if let Some(l) = args.lambda {
        reg.lambda = l;
    }
    Ok(reg)
}

fn run(command: &Command, args: &Common, report: &mut RunReport) -> Result<()> {
    let problem = load(args)?;
    let out = |name: &str| args.out.join(name);
    match command {
        Command::Check(_) => {
            pipeline::run_check(&problem, args.force, report)?;
            pipeline::build_design(&problem, report)?;
        }
        Command::Synthesize(_) => {
            let reg = pipeline::run_synthesize(&problem, args.force, report)?;
            reg.write(&out("regulator.json"))?;
        }
        Command::Simulate(_) => {
            let reg = regulator(args)?;
            let (cl, path) = pipeline::run_simulate(&problem, &reg, report)?;
            pipeline::write_file(&out("simulation.csv"), |f| pipeline::write_simulation_csv(f, &problem, &cl, &path))?;
        }
        Command::Montecarlo(_) => {
            let reg = regulator(args)?;
            let curve = pipeline::run_montecarlo(&problem, &reg, report)?;
            pipeline::write_file(&out("moments.csv"), |f| pipeline::write_moment_csv(f, &curve))?;
        }
        Command::Sweep(_) => {
            let summary = pipeline::run_sweep(&problem, None, report)?;
            pipeline::write_file(&out("sweep.csv"), |f| pipeline::write_sweep_csv(f, &summary.points))?;
        }
        Command::Verify(_) => {
            let mut input = match &args.regulator {
                Some(_) => VerifyInput::from_regulator(&regulator(args)?, problem.config.lmi.verify_tolerance)?,
                None => VerifyInput::from_reference(&problem)?,
            };
            if let Some(g) = args.gamma {
                input.gamma = g;
            }
            if let Some(l) = args.lambda {
                input.lambda = l;
            }
            pipeline::run_verify(&problem, &input, report)?;
        }
    }
    Ok(())
}

fn write_report(report: &RunReport, dir: &Path) {
    if dir.is_dir() {
        if let Err(e) = report.write(&dir.join("report.json")) {
            eprintln!("warning: {e}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match &cli.command {
        Command::Check(a) => ("check", a),
        Command::Synthesize(a) => ("synthesize", a),
        Command::Simulate(a) => ("simulate", a),
        Command::Montecarlo(a) => ("montecarlo", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Verify(a) => ("verify", a),
    };
    let mut report = RunReport::new(name);
    let result = run(&cli.command, args, &mut report);
    write_report(&report, &args.out);
    match result {
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
        Ok(()) => {
            println!("{}", report.to_json());
            match report.failure_class() {
                None => ExitCode::SUCCESS,
                Some(class) => {
                    eprintln!("run failed; see report.json");
                    ExitCode::from(exit_code(class))
                }
            }
        }
    }
}
