use clap::{Args, Parser, Subcommand};
use narrowgap::asymptotics::{fit_energy_model, geometry_hash, EnergySeries};
use narrowgap::config::{validate_eps, Experiment, ExperimentConfig, SolverSpec};
use narrowgap::harness::{self, read_csv, write_atomic, write_csv};
use narrowgap::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "narrowgap", version, about = "Gradient blow-up between nearly touching conductors")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma separated eps values replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    eps_override: Option<Vec<f64>>,
    /// Worker threads for the per-eps solves.
    #[arg(long)]
    threads: Option<usize>,
    /// Quadrature tolerance, and CG tolerance when CG is selected.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve each eps and write `solve.csv`; no aggregation.
    Solve(Common),
    /// Full sweep: records, fits, limits, report files.
    Sweep(Common),
    /// Energy fits from `<out>/sweep.csv`.
    EnergyFit(Common),
    /// Touching limits from `<out>/sweep.csv`.
    Limits(Common),
    /// Singular prefactors and residual growth from `<out>/sweep.csv`
    /// (3D: from the synthetic limits).
    Reconstruct(Common),
    /// Regenerate `report.json` and `summary.txt` from `<out>/sweep.csv`.
    Report(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Json(_) => 2,
        Error::Fit(_) | Error::Quadrature(_) => 4,
        _ => 3,
    }
}

fn load(c: &Common) -> Result<(Experiment, PathBuf), Error> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(eps) = &c.eps_override {
        validate_eps(eps)?;
        cfg.eps = eps.clone();
    }
    if let Some(t) = c.tolerance {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("tolerance must be positive, got {t}")));
        }
        cfg.quadrature.abs_tol = t;
        if let SolverSpec::Pcg { tol, .. } = &mut cfg.solver {
            *tol = t;
        }
    }
    if c.threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    cfg.validate()?;
    let exp = cfg.resolve()?;
    let out = exp.output_dir(c.out.as_deref());
    Ok((exp, out))
}

fn stored_records(out: &Path) -> Result<Vec<harness::SweepRecord>, Error> {
    let path = out.join("sweep.csv");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    read_csv(&text)
}

fn emit(out: &Path, file: &str, value: &impl serde::Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(&out.join(file), &text)?;
    println!("{text}");
    Ok(())
}

fn run(cmd: Command) -> Result<u8, Error> {
    match cmd {
        Command::Solve(c) => {
            let (exp, out) = load(&c)?;
            let mut records = Vec::new();
            let mut code = 0;
            for &eps in &exp.config.eps {
                match harness::run_solve(&exp, eps) {
                    Ok(a) => {
                        let r = a.record;
                        println!(
                            "eps = {:e}: Q = {:.10e}, Theta = {:.10e}, C1 - C2 = {:.10e}, identity residual {:.2e}, max gap |grad u| = {:.6e} ({} nodes, {:.2} s)",
                            r.eps, r.q_eps, r.theta_eps, r.c_diff, r.identity_residual, r.max_gap_grad_u, r.nodes, r.wall_time
                        );
                        records.push(r);
                    }
                    Err(e) => {
                        eprintln!("eps = {eps:e}: {e}");
                        code = code.max(exit_code(&e));
                    }
                }
            }
            write_atomic(&out.join("solve.csv"), &write_csv(&records)?)?;
            Ok(code)
        }
        Command::Sweep(c) => {
            let (exp, out) = load(&c)?;
            let outcome = harness::run_sweep(&exp, c.threads)?;
            print!("{}", harness::report(&exp, &outcome, &out)?);
            Ok(if outcome.records.len() < 3 && !outcome.failures.is_empty() {
                3
            } else if !outcome.aggregates.errors.is_empty() {
                4
            } else {
                0
            })
        }
        Command::EnergyFit(c) => {
            let (exp, out) = load(&c)?;
            let recs = stored_records(&out)?;
            let hash = geometry_hash(&format!("{:?}", exp.config.geometry));
            let lam = &exp.template.lambdas;
            let v1 = EnergySeries::new(recs.iter().map(|r| (r.eps, r.e1)).collect(), 1, hash)?;
            let v2 = EnergySeries::new(recs.iter().map(|r| (r.eps, r.e2)).collect(), 2, hash)?;
            let fits = (fit_energy_model(&v1, 2, lam)?, fit_energy_model(&v2, 2, lam)?);
            emit(&out, "energy_fit.json", &fits)?;
            Ok(0)
        }
        Command::Limits(c) => {
            let (exp, out) = load(&c)?;
            let o = harness::outcome_from_records(&exp, stored_records(&out)?)?;
            match &o.aggregates.limits {
                Some(l) => {
                    emit(&out, "limits.json", l)?;
                    Ok(0)
                }
                None => Err(Error::Fit(o.aggregates.errors.join("; "))),
            }
        }
        Command::Reconstruct(c) => {
            let (exp, out) = load(&c)?;
            if exp.dim() == 3 {
                emit(&out, "reconstruct.json", &harness::run_asymptotic_3d(&exp)?)?;
                return Ok(0);
            }
            let o = harness::outcome_from_records(&exp, stored_records(&out)?)?;
            let l = o.aggregates.limits.as_ref().ok_or_else(|| Error::Fit(o.aggregates.errors.join("; ")))?;
            let rows: Vec<serde_json::Value> = o
                .records
                .iter()
                .map(|r| {
                    Ok(serde_json::json!({
                        "eps": r.eps,
                        "limit_prefactor": l.prefactor(r.eps)?,
                        "stored_prefactor": r.prefactor,
                        "max_gap_grad_u": r.max_gap_grad_u,
                        "max_gap_residual": r.max_gap_residual,
                        "max_gap_v1_residual": r.max_gap_v1_residual,
                    }))
                })
                .collect::<Result<_, Error>>()?;
            let value = serde_json::json!({ "rows": rows, "blowup": o.aggregates.blowup,
                "residual_growth": o.aggregates.residual_growth, "gradient_growth": o.aggregates.gradient_growth });
            emit(&out, "reconstruct.json", &value)?;
            Ok(0)
        }
        Command::Report(c) => {
            let (exp, out) = load(&c)?;
            let o = if exp.dim() == 3 {
                harness::run_sweep(&exp, c.threads)?
            } else {
                harness::outcome_from_records(&exp, stored_records(&out)?)?
            };
            print!("{}", harness::report(&exp, &o, &out)?);
            Ok(if o.aggregates.errors.is_empty() || o.is_empty() { 0 } else { 4 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
