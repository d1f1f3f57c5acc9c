//! `bcbf`: closed-loop simulations, controller comparisons, and Monte Carlo
//! verification for the backup-cbf library.
//!
//! Exit codes: 0 when the command and all of its assertions succeed, 1 when
//! a run or an assertion fails, 2 on usage or configuration errors.

use backup_cbf::batch::ExecMode;
use backup_cbf::config::{load_config, SimConfig};
use backup_cbf::io::{render_svg, write_csv};
use backup_cbf::sim::{compare_report, run_simulation, SimStatus};
use backup_cbf::verify::{
    subset_counterexample_demo, verify_bounds, verify_estimator, verify_sensitivity, verify_subset,
};
use backup_cbf::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bcbf",
    version,
    about = "Backup-flow safety filtering with online disturbance estimation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario name: double-integrator or quadrotor.
    #[arg(long)]
    scenario: Option<String>,

    /// Disturbance frequency (double integrator).
    #[arg(long)]
    omega: Option<f64>,

    /// Flat key=value config file; command line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one closed-loop simulation and write its trajectory log.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,

        /// Controller kind: ue-bcbf, dr-bcbf, bcbf, or cbf-qp.
        #[arg(long)]
        controller: Option<String>,

        /// CSV output path.
        #[arg(long)]
        out: PathBuf,

        /// Optional SVG quick-look plot.
        #[arg(long)]
        svg: Option<PathBuf>,
    },

    /// Monte Carlo verification suites.
    Verify {
        #[command(subcommand)]
        suite: Suite,
    },

    /// Run ue-bcbf, dr-bcbf, and bcbf on one scenario and print a summary.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Number of Monte Carlo trials or samples.
    #[arg(long)]
    trials: Option<usize>,

    /// Base seed; each trial derives its own stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Run trials on the current thread instead of the thread pool.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Suite {
    /// Flow-deviation bound containment on sampled disturbances.
    Bounds {
        #[command(flatten)]
        args: VerifyArgs,
    },
    /// Estimated-safe-set membership implies true-safe-set membership.
    Subset {
        #[command(flatten)]
        args: VerifyArgs,
    },
    /// Sensitivity matrices against finite differences.
    Sensitivity {
        #[command(flatten)]
        args: VerifyArgs,
    },
    /// Estimation error envelope along a closed-loop run.
    Estimator {
        #[command(flatten)]
        args: VerifyArgs,
    },
}

fn build_config(common: &CommonArgs) -> Result<SimConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => SimConfig::default(),
    };
    if let Some(s) = &common.scenario {
        cfg.apply("scenario", s)?;
    }
    if let Some(w) = common.omega {
        cfg.apply("omega", &w.to_string())?;
    }
    Ok(cfg)
}

fn exec_mode(args: &VerifyArgs) -> ExecMode {
    if args.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

/// Ok(true): command succeeded and all assertions passed. Ok(false): an
/// assertion failed. Err: usage or runtime trouble.
fn run(cli: Cli) -> Result<bool, Error> {
    match cli.cmd {
        Cmd::Simulate { common, controller, out, svg } => {
            let mut cfg = build_config(&common)?;
            if let Some(c) = &controller {
                cfg.apply("controller", c)?;
            }
            let setup = cfg.resolve()?;
            let record = run_simulation(&setup)?;
            if record.steps.is_empty() {
                if let SimStatus::Aborted { t, reason } = &record.status {
                    eprintln!("run aborted at t = {t:.4} before any step completed: {reason}");
                }
                return Ok(false);
            }
            write_csv(&record, &out)?;
            if let Some(svg_path) = &svg {
                render_svg(&record, svg_path)?;
            }
            println!(
                "{} / {}: {} steps, min h = {:.6}, backup fraction = {:.3}, wrote {}",
                record.scenario,
                record.controller.as_str(),
                record.steps.len(),
                record.min_h(),
                record.backup_fraction(),
                out.display()
            );
            match &record.status {
                SimStatus::Completed => Ok(true),
                SimStatus::Aborted { t, reason } => {
                    eprintln!("run aborted at t = {t:.4}: {reason}");
                    Ok(false)
                }
            }
        }

        Cmd::Verify { suite } => match suite {
            Suite::Bounds { args } => {
                let cfg = build_config(&args.common)?;
                let setup = cfg.resolve()?;
                let report =
                    verify_bounds(&setup, args.trials.unwrap_or(200), args.seed, exec_mode(&args))?;
                println!(
                    "bounds: {} trials, {} checks, {} violations, {} ordering violations",
                    report.trials, report.checks, report.violations, report.ordering_violations
                );
                println!(
                    "max tightness ratio: gronwall {:.6}, lognorm {:.6}",
                    report.max_ratio_gronwall, report.max_ratio_lognorm
                );
                Ok(report.ok())
            }
            Suite::Subset { args } => {
                let cfg = build_config(&args.common)?;
                let setup = cfg.resolve()?;
                let samples = args.trials.unwrap_or(500);
                let report = verify_subset(&setup, samples, args.seed, exec_mode(&args))?;
                println!(
                    "subset: {} samples, {} members, {} implication violations",
                    report.samples, report.members, report.violations
                );
                let demo = subset_counterexample_demo(&cfg, samples, args.seed, exec_mode(&args))?;
                println!(
                    "untightened baseline: {} members, {} violations (expected nonzero, not asserted)",
                    demo.members, demo.violations
                );
                Ok(report.ok())
            }
            Suite::Sensitivity { args } => {
                let cfg = build_config(&args.common)?;
                let setup = cfg.resolve()?;
                let report = verify_sensitivity(
                    &setup,
                    args.trials.unwrap_or(20),
                    args.seed,
                    exec_mode(&args),
                )?;
                println!(
                    "sensitivity: {} states, max relative error {:.3e} (state), {:.3e} (estimate)",
                    report.states, report.max_rel_err_state, report.max_rel_err_estimate
                );
                if let Some(err) = report.closed_form_err {
                    println!("closed-form check: worst entry error {err:.3e}");
                }
                Ok(report.ok())
            }
            Suite::Estimator { args } => {
                let cfg = build_config(&args.common)?;
                let setup = cfg.resolve()?;
                let report = verify_estimator(&setup)?;
                println!(
                    "estimator: {} steps, max envelope ratio {:.6}, max window ratio {:.6} over {} checks",
                    report.steps, report.max_ratio, report.max_window_ratio, report.window_checks
                );
                if let Some(err) = report.converged_error {
                    println!("constant-disturbance convergence: residual {err:.3e}");
                }
                Ok(report.ok())
            }
        },

        Cmd::Compare { common } => {
            let cfg = build_config(&common)?;
            let report = compare_report(&cfg)?;
            println!(
                "{:<10} {:>5} {:>12} {:>12} {:>10} {:>9} {:>12}",
                "controller", "done", "min h", "min hb_T", "sat frac", "switches", "max |vel|"
            );
            for row in &report.rows {
                println!(
                    "{:<10} {:>5} {:>12.6} {:>12.6} {:>10.3} {:>9} {:>12.6}",
                    row.controller.as_str(),
                    if row.completed { "yes" } else { "no" },
                    row.min_h,
                    row.min_hb_terminal,
                    row.saturation_fraction,
                    row.mode_switches,
                    row.max_abs_velocity
                );
            }
            for (name, pass) in &report.assertions {
                println!("{} {}", if *pass { "PASS" } else { "FAIL" }, name);
            }
            Ok(report.ok())
        }
    }
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes early (`bcbf ... | head`),
    // like other line-oriented tools, instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::from(0),
        Ok(false) => ExitCode::from(1),
        Err(e @ (Error::Config(_) | Error::Unsupported(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
