use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use mfslq::model::{evaluate_coefficients, load_spec, ProblemSpec};
use mfslq::operators::{assemble_bundle, assemble_p_matrix, operator_csv, operator_sidecar};
use mfslq::report;
use mfslq::riccati::{hat_coefficients, solve_riccati_tree};
use mfslq::stationarity::solve_mfslq_tol;
use mfslq::tree_sde::{simulate_mfsde_particles, DeterministicFeedback};
use mfslq::verify::run_verification;
use mfslq::{corpus, Result};

/// Default RNG seed for all stochastic commands; fixed so runs reproduce.
const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Parser)]
#[command(name = "mfslq", about = "Mean-field stochastic LQ solver on binary scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Instance config (TOML). Omit to use the built-in canonical instance.
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// RNG seed.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Override the number of tree steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Stationarity-system residual tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the full problem and write the report with CSV companions.
    Solve(Common),
    /// Run the verification suite; exits nonzero if any check fails.
    Verify(Common),
    /// Monte Carlo particle simulation under the solved feedback law.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Number of particles.
        #[arg(long, default_value_t = 10_000)]
        particles: usize,
    },
    /// Dump the P, L1, L2 operator matrices.
    Operators(Common),
    /// Run the verification suite over the whole built-in corpus.
    Corpus(Common),
}

fn load(common: &Common) -> Result<ProblemSpec> {
    let mut spec = match &common.instance {
        Some(path) => load_spec(path)?,
        None => corpus::instance1(4),
    };
    if let Some(steps) = common.steps {
        spec = spec.with_steps(steps);
    }
    Ok(spec)
}

fn write(dir: &PathBuf, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn cmd_solve(common: &Common) -> Result<bool> {
    let spec = load(common)?;
    let rep = solve_mfslq_tol(&spec, common.tol)?;
    write(
        &common.out,
        "solve_report.json",
        &report::to_json_string(&report::report_json(&rep, &spec.grid, common.seed)),
    )?;
    write(&common.out, "summary.csv", &report::summary_csv(&rep, &spec.grid))?;
    write(&common.out, "path.csv", &report::path_csv(&spec.grid, &rep.x))?;
    let field = evaluate_coefficients(&spec, &spec.tree()?)?;
    let ric = solve_riccati_tree(&field)?;
    write(&common.out, "riccati.csv", &report::riccati_csv(&ric))?;
    println!(
        "{}: J* = {:.12}, kkt rank {}/{}, worst residual {:.3e}",
        rep.name,
        rep.j.total,
        rep.kkt.rank,
        rep.kkt.cols,
        rep.residuals.values().cloned().fold(0.0, f64::max)
    );
    Ok(true)
}

fn cmd_verify(common: &Common) -> Result<bool> {
    let spec = load(common)?;
    let rep = run_verification(&spec)?;
    write(
        &common.out,
        "verify_report.json",
        &report::to_json_string(&report::verification_json(&rep, common.seed)),
    )?;
    for c in &rep.checks {
        println!(
            "{} {}: {:.3e} <= {:.3e}",
            if c.pass { "ok  " } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    Ok(rep.passed())
}

fn cmd_simulate(common: &Common, particles: usize) -> Result<bool> {
    let spec = load(common)?;
    let rep = solve_mfslq_tol(&spec, common.tol)?;
    // deterministic time feedback for the simulator: level-mean gain/offset
    let steps = spec.grid.steps;
    let feedback = DeterministicFeedback {
        gain: (0..steps)
            .map(|i| {
                let k = rep.control.gain[i].len() as f64;
                rep.control.gain[i].iter().sum::<nalgebra::DMatrix<f64>>() / k
            })
            .collect(),
        offset: (0..steps)
            .map(|i| {
                let k = rep.control.offset[i].len() as f64;
                rep.control.offset[i].iter().sum::<DVector<f64>>() / k
            })
            .collect(),
    };
    let particles_rep = simulate_mfsde_particles(&spec, &feedback, particles, steps, common.seed)?;
    write(&common.out, "particles.csv", &report::particles_csv(&particles_rep))?;
    println!(
        "{}: {} particles, sup E|X|^2 = {:.6}, terminal mean stderr {:.3e}",
        spec.name,
        particles,
        particles_rep.sup_mean_sq,
        particles_rep.std_err.amax()
    );
    Ok(true)
}

fn cmd_operators(common: &Common) -> Result<bool> {
    let spec = load(common)?;
    let field = evaluate_coefficients(&spec, &spec.tree()?)?;
    let ric = solve_riccati_tree(&field)?;
    let hat = hat_coefficients(&field, &ric)?;
    let bundle = assemble_bundle(&field, &hat, &spec.xi);
    let p = assemble_p_matrix(&field, &hat);
    for op in [&p, &bundle.l1, &bundle.l2] {
        write(&common.out, &format!("{}.csv", op.label), &operator_csv(op))?;
        write(
            &common.out,
            &format!("{}.json", op.label),
            &report::to_json_string(&operator_sidecar(op, field.dt)),
        )?;
    }
    println!(
        "{}: wrote P ({}x{}), L1/L2 ({}x{})",
        spec.name,
        p.matrix.nrows(),
        p.matrix.ncols(),
        bundle.l1.matrix.nrows(),
        bundle.l1.matrix.ncols()
    );
    Ok(true)
}

fn cmd_corpus(common: &Common) -> Result<bool> {
    let mut rows = Vec::new();
    let mut all_ok = true;
    for spec in corpus::acceptance_corpus() {
        let rep = run_verification(&spec)?;
        let ok = rep.passed();
        all_ok &= ok;
        println!(
            "{} {}: worst margin {:.3e}",
            if ok { "ok  " } else { "FAIL" },
            rep.name,
            rep.worst_margin()
        );
        rows.push((rep.name.clone(), ok, rep.worst_margin()));
    }
    write(&common.out, "corpus.csv", &report::corpus_csv(&rows))?;
    Ok(all_ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Solve(c) => cmd_solve(c),
        Command::Verify(c) => cmd_verify(c),
        Command::Simulate { common, particles } => cmd_simulate(common, *particles),
        Command::Operators(c) => cmd_operators(c),
        Command::Corpus(c) => cmd_corpus(c),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
