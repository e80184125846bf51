//! Command-line front end: certificates, equilibria, stability reports, and
//! scripted time-domain simulations over JSON microgrid configs.
//!
//! Every number printed here is computed by the library; the binary only
//! parses arguments, loads configs, and formats results. Exit codes: 0 on
//! success (certified / feasible / completed), 1 when the analysis itself is
//! negative (infeasible certificate, uncertified gains, solver
//! nonconvergence, collapse under `--expect-stable`), 2 for usage or config
//! errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use dcmg::equilibrium::{self, EquilibriumSolution};
use dcmg::simulator::{self, IntegrateOptions, Termination};
use dcmg::stability::{self, Verdict};
use dcmg::{Error, GainSet, MicrogridConfig};

#[derive(Parser)]
#[command(
    name = "dcmg",
    version,
    about = "DC microgrid analysis and simulation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Existence and uniqueness certificate for constant-power operation
    Certify {
        #[arg(long)]
        config: PathBuf,
    },
    /// Solve the steady state and report the sharing/balancing objectives
    Equilibrium {
        #[arg(long)]
        config: PathBuf,
        /// Force the damped-Newton solver (required for non-zero exponents)
        #[arg(long)]
        newton: bool,
        /// Force the contraction fixed-point solver (constant-power loads)
        #[arg(long, conflicts_with = "newton")]
        fixed_point: bool,
    },
    /// Certify stability of the closed loop at the solved equilibrium
    Stability {
        #[arg(long)]
        config: PathBuf,
    },
    /// Integrate the scripted scenario and export traces
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Write the full CSV trace here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Integration step override, seconds
        #[arg(long)]
        dt: Option<f64>,
        /// Horizon override, seconds
        #[arg(long)]
        t_end: Option<f64>,
        /// Exit nonzero if the run ends in a voltage collapse
        #[arg(long)]
        expect_stable: bool,
        /// Report filter currents weighted by their ratings
        #[arg(long)]
        per_unit: bool,
        /// Write downsampled plot data (time, voltages, currents) here
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Keep every k-th sample in the plot data
        #[arg(long, default_value_t = 20)]
        plot_every: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn exit_code_for(e: &Error) -> ExitCode {
    match e {
        Error::Infeasible { .. }
        | Error::NoConvergence { .. }
        | Error::IterationDiverged { .. }
        | Error::PhaseFailed { .. }
        | Error::ResidualTooLarge { .. } => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn load(path: &Path) -> Result<(MicrogridConfig, GainSet), Error> {
    let config = MicrogridConfig::from_path(path)?;
    let gains = config.gain_set()?;
    Ok((config, gains))
}

fn fmt_vec(v: &DVector<f64>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.9e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Certify { config } => cmd_certify(&config),
        Command::Equilibrium {
            config,
            newton,
            fixed_point,
        } => cmd_equilibrium(&config, newton, fixed_point),
        Command::Stability { config } => cmd_stability(&config),
        Command::Simulate {
            config,
            out,
            dt,
            t_end,
            expect_stable,
            per_unit,
            plot,
            plot_every,
        } => cmd_simulate(
            &config,
            out.as_deref(),
            dt,
            t_end,
            expect_stable,
            per_unit,
            plot.as_deref(),
            plot_every,
        ),
    }
}

fn cmd_certify(path: &Path) -> Result<ExitCode, Error> {
    let (config, _) = load(path)?;
    let cert = match equilibrium::certificate(&config) {
        Err(Error::NonZipLoad { node, exponent }) => {
            eprintln!(
                "error: DGU {node} carries an exponential load (r = {exponent}); the \
                 certificate only covers constant-power loads. Use `dcmg equilibrium \
                 --newton` for general exponents."
            );
            return Ok(ExitCode::from(2));
        }
        other => other?,
    };
    println!("existence certificate (constant-power loads)");
    println!("  V*          = {}", fmt_vec(&cert.v_star));
    println!("  Delta       = {:.9e}", cert.delta);
    match (cert.delta_minus, cert.delta_plus) {
        (Some(dm), Some(dp)) => {
            println!("  delta_minus = {dm:.9e}");
            println!("  delta_plus  = {dp:.9e}");
        }
        _ => {
            println!("  delta_minus = n/a");
            println!("  delta_plus  = n/a");
        }
    }
    println!("  feasible    = {}", cert.feasible);
    if let Some((lo, hi)) = cert.h_box() {
        println!("  guaranteed-solution box:");
        for i in 0..lo.len() {
            println!("    node {}: [{:.9e}, {:.9e}]", i + 1, lo[i], hi[i]);
        }
    }
    Ok(if cert.feasible {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn solve_with_flags(
    config: &MicrogridConfig,
    gains: &GainSet,
    newton: bool,
    fixed_point: bool,
) -> Result<(EquilibriumSolution, &'static str, usize), Error> {
    let settings = config.solver;
    let use_newton = if newton {
        true
    } else if fixed_point {
        false
    } else {
        !config.all_zip()
    };
    let (v_bar, iterations, label) = if use_newton {
        let (v, it) = equilibrium::solve_zie_newton(
            config,
            &config.v_ref(),
            settings.newton_tol,
            settings.max_iter,
        )?;
        (v, it, "newton")
    } else {
        let (v, it) =
            equilibrium::solve_zip_fixed_point(config, settings.fixed_point_tol, settings.max_iter)?;
        (v, it, "fixed-point")
    };
    let solution = equilibrium::reconstruct_full(config, gains, &v_bar)?;
    Ok((solution, label, iterations))
}

fn cmd_equilibrium(path: &Path, newton: bool, fixed_point: bool) -> Result<ExitCode, Error> {
    let (config, gains) = load(path)?;
    let result = solve_with_flags(&config, &gains, newton, fixed_point);
    let (solution, label, iterations) = match result {
        Err(Error::NoConvergence {
            iterations,
            last_residual,
            residual_history,
        }) => {
            eprintln!("solver did not converge after {iterations} iterations");
            eprintln!("  last residual: {last_residual:.3e}");
            eprintln!("  residual history:");
            for (k, r) in residual_history.iter().enumerate() {
                eprintln!("    iter {k}: {r:.6e}");
            }
            return Ok(ExitCode::from(1));
        }
        other => other?,
    };
    let state = &solution.state;
    let ratings = config.ratings();
    println!("steady state ({label}, {iterations} iterations)");
    println!("  V       = {}", fmt_vec(&state.voltage));
    println!("  I_t     = {}", fmt_vec(&state.filter_current));
    println!("  epsilon = {:.9e}", solution.epsilon);
    println!(
        "  power-flow residual   = {:.3e}",
        solution.residual_power_flow
    );
    println!(
        "  weighted-balance residual = {:.3e}",
        solution.residual_balance
    );
    let sharing_dev = (0..config.n())
        .map(|i| (state.filter_current[i] / ratings[i] - solution.epsilon).abs())
        .fold(0.0_f64, f64::max);
    let balance: f64 = (0..config.n())
        .map(|i| ratings[i] * (state.voltage[i] - config.dgus[i].params.v_ref))
        .sum();
    println!("  current sharing: max |I_t/I_s - epsilon| = {sharing_dev:.3e}");
    println!("  voltage balance: 1'[I_s](V - V_ref) = {balance:.3e}");
    Ok(ExitCode::SUCCESS)
}

fn cmd_stability(path: &Path) -> Result<ExitCode, Error> {
    let (config, gains) = load(path)?;
    let (solution, label, _) = solve_with_flags(&config, &gains, false, false)?;
    let report = stability::certify(&config, &gains, &solution)?;
    println!("stability report (equilibrium via {label} solver)");
    println!("  per-DGU conditions:");
    for i in 0..config.n() {
        println!(
            "    DGU {}: gains {} | load damping {} (f = {:.6e} S)",
            i + 1,
            if report.gains_ok[i] { "ok" } else { "VIOLATED" },
            if report.load_ok[i] { "ok" } else { "VIOLATED" },
            report.f_bar[i]
        );
    }
    println!(
        "  P positive definite: {} (min block det {:.6e})",
        report.p_pd, report.min_block_det
    );
    println!("  Q negative semidefinite at equilibrium: {}", report.q_nsd);
    let verdict = match report.verdict {
        Verdict::CertifiedGlobal => "certified (global)",
        Verdict::CertifiedLocal => "certified (local)",
        Verdict::NotCertified => "not certified",
    };
    println!("  verdict: {verdict}");
    Ok(match report.verdict {
        Verdict::NotCertified => ExitCode::from(1),
        _ => ExitCode::SUCCESS,
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    path: &Path,
    out: Option<&Path>,
    dt: Option<f64>,
    t_end: Option<f64>,
    expect_stable: bool,
    per_unit: bool,
    plot: Option<&Path>,
    plot_every: usize,
) -> Result<ExitCode, Error> {
    let (config, gains) = load(path)?;
    let mut opts = IntegrateOptions::from_config(&config);
    if let Some(dt) = dt {
        opts.dt = dt;
    }
    if let Some(t_end) = t_end {
        opts.t_end = t_end;
    }
    let x0 = simulator::initial_state(&config, &gains)?;
    let trace = simulator::integrate(&config, &gains, &x0, &config.scenario, &opts)?;

    println!(
        "simulated {:.6} s at dt = {:.1e} s ({} samples)",
        trace.final_time(),
        opts.dt,
        trace.n_samples()
    );
    for (t, what) in &trace.events {
        println!("  event @ {t:.6} s: {what}");
    }
    match trace.termination {
        Termination::Completed => println!("  run completed"),
        Termination::VoltageCollapse { node, time } => {
            println!(
                "  VOLTAGE COLLAPSE at node {} (t = {time:.6} s)",
                node + 1
            );
        }
    }
    if let Some(t) = simulator::detect_steady_state(&trace, 0.1, 1e-3) {
        println!("  steady state detected by t = {t:.4} s");
    } else {
        println!("  no steady state detected");
    }
    let k = trace.n_samples() - 1;
    println!(
        "  final sharing dispersion = {:.3e}, balance error = {:.3e}",
        trace.sharing_dispersion[k], trace.balance_error[k]
    );
    let final_state = trace.final_state();
    println!("  final V   = {}", fmt_vec(&final_state.voltage));
    if per_unit {
        let ratings = config.ratings();
        let weighted = DVector::from_iterator(
            config.n(),
            final_state
                .filter_current
                .iter()
                .zip(ratings.iter())
                .map(|(&i, &s)| i / s),
        );
        println!("  final I_t (per unit) = {}", fmt_vec(&weighted));
    } else {
        println!("  final I_t = {}", fmt_vec(&final_state.filter_current));
    }
    let (duty_lo, duty_hi) = trace.duty_range;
    println!("  duty-cycle command range: [{duty_lo:.4}, {duty_hi:.4}]");
    if duty_hi > 1.0 || duty_lo < 0.0 {
        println!("  warning: duty command left [0, 1]; source voltage too low for this transient");
    }

    if let Some(out_path) = out {
        let file = File::create(out_path)?;
        let mut writer = BufWriter::new(file);
        trace.write_csv(&mut writer)?;
        writer.flush()?;
        println!("  trace written to {}", out_path.display());
    }
    if let Some(plot_path) = plot {
        let file = File::create(plot_path)?;
        let mut writer = BufWriter::new(file);
        trace.write_plot_data(&mut writer, plot_every, per_unit)?;
        writer.flush()?;
        println!("  plot data written to {}", plot_path.display());
    }

    if expect_stable && !matches!(trace.termination, Termination::Completed) {
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}
