//! Command-line front end for the federated-learning simulator.
//!
//! Usage:
//!   rhfl run <config> [--out DIR] [--seeds LIST] [--print-config] [--ablation] [--plots]
//!   rhfl audit <run_dir>
//!
//! `run` executes every grid point x seed of the configuration and exits
//! nonzero if any run failed. `audit` recomputes realized noise rates from a
//! run directory's saved datasets and checks them against its metrics.

use std::path::PathBuf;
use std::process::ExitCode;

use rhfl_core::config::{dump_config, load_config, parse_config, ExperimentSpec};
use rhfl_core::experiment::{ablation_sweep, audit_run_dir, run_experiment};

struct RunArgs {
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    print_config: bool,
    ablation: bool,
    plots: bool,
}

fn usage() -> &'static str {
    "usage:\n  rhfl run <config> [--out DIR] [--seeds LIST] [--print-config] [--ablation] [--plots]\n  rhfl audit <run_dir>"
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("run") => match parse_run_args(&args[1..]) {
            Ok(run) => cmd_run(run),
            Err(e) => {
                eprintln!("{e}\n{}", usage());
                ExitCode::from(2)
            }
        },
        Some("audit") => {
            if args.len() != 2 {
                eprintln!("{}", usage());
                return ExitCode::from(2);
            }
            cmd_audit(PathBuf::from(&args[1]))
        }
        _ => {
            eprintln!("{}", usage());
            ExitCode::from(2)
        }
    }
}

fn parse_run_args(args: &[String]) -> Result<RunArgs, String> {
    let mut run = RunArgs {
        config: None,
        out: None,
        seeds: None,
        print_config: false,
        ablation: false,
        plots: false,
    };
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--out" => {
                let v = it.next().ok_or("--out needs a directory")?;
                run.out = Some(PathBuf::from(v));
            }
            "--seeds" => {
                let v = it.next().ok_or("--seeds needs a comma-separated list")?;
                let seeds: Result<Vec<u64>, _> = v.split(',').map(|s| s.trim().parse()).collect();
                run.seeds = Some(seeds.map_err(|_| format!("cannot parse seed list '{v}'"))?);
            }
            "--print-config" => run.print_config = true,
            "--ablation" => run.ablation = true,
            "--plots" => run.plots = true,
            other if other.starts_with("--") => {
                return Err(format!("unknown option '{other}'"));
            }
            path => {
                if run.config.is_some() {
                    return Err(format!("unexpected argument '{path}'"));
                }
                run.config = Some(PathBuf::from(path));
            }
        }
    }
    Ok(run)
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let spec: Result<ExperimentSpec, _> = match &args.config {
        Some(path) => load_config(path),
        // No config file: run the reference defaults.
        None => parse_config(""),
    };
    let mut spec = match spec {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(out) = args.out {
        spec.output_dir = out;
    }
    if let Some(seeds) = args.seeds {
        spec.seeds = seeds;
    }
    if args.plots {
        spec.emit_plots = true;
    }
    if let Err(e) = spec.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }

    if args.print_config {
        print!("{}", dump_config(&spec));
        return ExitCode::SUCCESS;
    }

    let started = std::time::Instant::now();
    let result = if args.ablation {
        ablation_sweep(&spec)
    } else {
        run_experiment(&spec)
    };
    match result {
        Ok(summary) => {
            for run in &summary.runs {
                println!(
                    "{} seed={} flags={} mu={} kind={}: {} (avg accuracy {:.4})",
                    run.label,
                    run.seed,
                    run.flags,
                    run.mu,
                    run.noise_kind,
                    run.status,
                    run.final_avg_accuracy
                );
            }
            eprintln!(
                "{} runs, {} failed, {:.1}s",
                summary.runs.len(),
                summary.failed,
                started.elapsed().as_secs_f64()
            );
            if summary.all_succeeded() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_audit(dir: PathBuf) -> ExitCode {
    match audit_run_dir(&dir) {
        Ok(rows) => {
            let mut ok = true;
            for (client, reported, recomputed) in rows {
                let matches = (reported - recomputed).abs() < 1e-12;
                ok &= matches;
                println!(
                    "client {client}: metrics={reported} recomputed={recomputed} {}",
                    if matches { "ok" } else { "MISMATCH" }
                );
            }
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
