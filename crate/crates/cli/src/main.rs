//! Command-line front end: scenario loading, simulation, certification,
//! compatibility checking and coupling inspection.
//!
//! Exit codes are the machine contract: 0 success, 1 validation error,
//! 2 blow-up during simulation, 3 negative analysis outcome (invalid
//! certificate or failed compatibility check). stdout is human-readable,
//! stderr carries diagnostics.

use clap::{Args, Parser, Subcommand};
use igeb_net_core::certify::{
    check_certificate, default_star_ansatz, removed_control_diagnostic, Certificate,
    CertifyOptions, WChoice,
};
use igeb_net_core::diag::{build_diagonalization, build_nodal_coupling, BeamDiagonalization};
use igeb_net_core::grid::uniform_grid;
use igeb_net_core::linalg::op_norm_dyn;
use igeb_net_core::network::{check_compatibility, CompatOrder, NetworkScenario, NodeCondition};
use igeb_net_core::scenario::{
    load_scenario, scenario_hash, timeseries_json, write_state_csv, write_timeseries_csv,
    RunManifest,
};
use igeb_net_core::sim::{sample_initial_physical, simulate, SimConfig, SimError};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_OK: u8 = 0;
const EXIT_VALIDATION: u8 = 1;
const EXIT_BLOWUP: u8 = 2;
const EXIT_NEGATIVE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "igeb-net",
    version,
    about = "Simulate and certify networks of intrinsic geometrically exact beams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time-march a scenario and export the recorded series.
    Simulate(SimulateArgs),
    /// Construct and grid-verify a Lyapunov certificate.
    Certify(CertifyArgs),
    /// Evaluate the compatibility conditions of the initial datum.
    CheckCompat(CheckCompatArgs),
    /// Print the nodal coupling data and reflection matrices.
    InspectCoupling(InspectArgs),
}

#[derive(Args)]
struct SimulateArgs {
    scenario: PathBuf,
    /// Cells per beam.
    #[arg(long, default_value_t = 128)]
    cells: usize,
    /// Courant factor in (0, 1].
    #[arg(long, default_value_t = 0.9)]
    cfl: f64,
    /// End time.
    #[arg(long, default_value_t = 10.0)]
    tend: f64,
    /// Record every this many steps.
    #[arg(long, default_value_t = 1)]
    record_stride: usize,
    /// Certificate JSON whose ansatz drives the Lyapunov column.
    #[arg(long)]
    certificate: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write final-state snapshots per beam.
    #[arg(long)]
    snapshots: bool,
}

#[derive(Args)]
struct CertifyArgs {
    scenario: PathBuf,
    /// Scale of the energy part: a number, or `auto` for the smallest
    /// admissible value with 10% headroom.
    #[arg(long, default_value = "auto")]
    rho: String,
    /// Extradiagonal coupling: 514 (identity), 515 (mass times flexibility)
    /// or 516 (square-root pairing).
    #[arg(long, default_value_t = 516)]
    w_choice: u32,
    /// Verification grid points per beam.
    #[arg(long, default_value_t = 257)]
    grid: usize,
    /// Certificate output path.
    #[arg(long, default_value = "certificate.json")]
    out: PathBuf,
}

#[derive(Args)]
struct CheckCompatArgs {
    scenario: PathBuf,
    /// Highest order to check (0 or 1).
    #[arg(long, default_value_t = 1)]
    order: u8,
    /// Sampling cells per beam.
    #[arg(long, default_value_t = 64)]
    cells: usize,
    /// Pass threshold on the residuals.
    #[arg(long, default_value_t = 1e-8)]
    threshold: f64,
}

#[derive(Args)]
struct InspectArgs {
    scenario: PathBuf,
    /// Cells per beam for the endpoint evaluation.
    #[arg(long, default_value_t = 16)]
    cells: usize,
    /// Print the full reflection matrix of one node.
    #[arg(long)]
    node: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Certify(args) => cmd_certify(&args),
        Command::CheckCompat(args) => cmd_check_compat(&args),
        Command::InspectCoupling(args) => cmd_inspect(&args),
    };
    ExitCode::from(code)
}

fn load_or_exit(path: &Path) -> Result<NetworkScenario, u8> {
    match load_scenario(path) {
        Ok(s) => Ok(s),
        Err(e) => {
            eprintln!("error: {e}");
            Err(EXIT_VALIDATION)
        }
    }
}

fn thread_cap() -> usize {
    std::env::var("IGEB_NET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn cmd_simulate(args: &SimulateArgs) -> u8 {
    let scenario = match load_or_exit(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let hash = scenario_hash(&scenario);
    let config = SimConfig {
        cells: args.cells,
        cfl: args.cfl,
        t_end: args.tend,
        record_stride: args.record_stride,
    };
    let certificate: Option<Certificate> = match &args.certificate {
        Some(path) => match fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|text| serde_json::from_str::<Certificate>(&text).map_err(|e| e.to_string()))
        {
            Ok(cert) => {
                if let Some(cert_hash) = &cert.scenario_hash {
                    if cert_hash != &hash {
                        eprintln!(
                            "warning: certificate was built for scenario {cert_hash}, \
                             running {hash}"
                        );
                    }
                }
                Some(cert)
            }
            Err(e) => {
                eprintln!("error: cannot read certificate {}: {e}", path.display());
                return EXIT_VALIDATION;
            }
        },
        None => None,
    };
    let ansatz = certificate.as_ref().map(|c| &c.ansatz);
    let out = match simulate(&scenario, &config, ansatz) {
        Ok(out) => out,
        Err(e @ (SimError::BlowUp { .. } | SimError::NonFinite { .. })) => {
            eprintln!("error: {e}");
            return EXIT_BLOWUP;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };

    if let Err(e) = fs::create_dir_all(&args.out) {
        eprintln!("error: cannot create {}: {e}", args.out.display());
        return EXIT_VALIDATION;
    }
    let mut manifest = RunManifest::new(
        "simulate",
        &hash,
        serde_json::json!({
            "cells": args.cells,
            "cfl": args.cfl,
            "tend": args.tend,
            "record_stride": args.record_stride,
            "dt": out.dt,
            "steps": out.steps,
            "certificate": args.certificate.as_ref().map(|p| p.display().to_string()),
        }),
    );
    let write_all = || -> std::io::Result<Vec<String>> {
        let mut outputs = Vec::new();
        let csv_path = args.out.join("timeseries.csv");
        let mut csv = fs::File::create(&csv_path)?;
        write_timeseries_csv(&mut csv, &out.series)?;
        outputs.push(csv_path.display().to_string());
        let json_path = args.out.join("timeseries.json");
        fs::write(&json_path, serde_json::to_string_pretty(&timeseries_json(&out.series, &hash))?)?;
        outputs.push(json_path.display().to_string());
        if args.snapshots {
            for (i, (xs, ys)) in out.grids.iter().zip(&out.final_physical.per_beam).enumerate() {
                let path = args.out.join(format!("state_beam{}.csv", i + 1));
                let mut f = fs::File::create(&path)?;
                write_state_csv(&mut f, xs, ys)?;
                outputs.push(path.display().to_string());
            }
        }
        Ok(outputs)
    };
    match write_all() {
        Ok(outputs) => manifest.outputs = outputs,
        Err(e) => {
            eprintln!("error: cannot write outputs: {e}");
            return EXIT_VALIDATION;
        }
    }
    let manifest_path = args.out.join("manifest.json");
    if let Err(e) = fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    ) {
        eprintln!("error: cannot write manifest: {e}");
        return EXIT_VALIDATION;
    }

    let series = &out.series;
    let last = series.times.len() - 1;
    println!("scenario {hash}");
    println!(
        "ran {} steps of dt = {:.3e} to t = {}; energy {:.6e} -> {:.6e}",
        out.steps, out.dt, series.times[last], series.energy_phys[0], series.energy_phys[last]
    );
    println!(
        "largest per-step energy increase: {:.3e} (relative to the initial energy)",
        out.max_step_energy_increase
    );
    if let Some(lyap) = &series.lyapunov {
        println!("Lyapunov value {:.6e} -> {:.6e}", lyap[0], lyap[last]);
    }
    println!("outputs in {}", args.out.display());
    EXIT_OK
}

fn cmd_certify(args: &CertifyArgs) -> u8 {
    let scenario = match load_or_exit(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let w_choice = match args.w_choice {
        514 => WChoice::Identity,
        515 => WChoice::MassFlex,
        516 => WChoice::SqrtMassFlex,
        other => {
            eprintln!("error: unknown coupling choice {other}; use 514, 515 or 516");
            return EXIT_VALIDATION;
        }
    };
    let rho = if args.rho == "auto" {
        None
    } else {
        match args.rho.parse::<f64>() {
            Ok(v) if v > 0.0 => Some(v),
            _ => {
                eprintln!("error: --rho expects `auto` or a positive number");
                return EXIT_VALIDATION;
            }
        }
    };
    let hash = scenario_hash(&scenario);
    let opts = CertifyOptions { grid_points: args.grid, threads: thread_cap() };
    let result = default_star_ansatz(&scenario, w_choice, args.grid, rho)
        .and_then(|ansatz| check_certificate(&scenario, &ansatz, opts));
    let mut cert = match result {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    cert.scenario_hash = Some(hash.clone());
    let diagnostic = removed_control_diagnostic(&scenario);

    let mut doc = serde_json::to_value(&cert).expect("certificate serializes");
    doc["control_removal"] = serde_json::to_value(&diagnostic).expect("report serializes");
    if let Err(e) = fs::write(&args.out, serde_json::to_string_pretty(&doc).expect("json")) {
        eprintln!("error: cannot write {}: {e}", args.out.display());
        return EXIT_VALIDATION;
    }

    println!("scenario {hash}");
    println!(
        "certificate: {} (rho = {:.6}, decay rate beta = {:.6})",
        if cert.valid { "VALID" } else { "INVALID" },
        cert.ansatz.rho,
        cert.beta
    );
    for check in cert.checks.iter().filter(|c| !c.satisfied) {
        println!("  failed: {} (margin {:.3e})", check.name, check.margin);
    }
    if diagnostic.applicable {
        println!("control-removal diagnostic: infeasible within this ansatz family");
        for c in &diagnostic.conflicts {
            println!("  - {c}");
        }
    }
    println!("written to {}", args.out.display());
    if cert.valid {
        EXIT_OK
    } else {
        EXIT_NEGATIVE
    }
}

fn cmd_check_compat(args: &CheckCompatArgs) -> u8 {
    let scenario = match load_or_exit(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if args.order > 1 {
        eprintln!("error: --order must be 0 or 1");
        return EXIT_VALIDATION;
    }
    let grids: Vec<Vec<f64>> =
        scenario.beams.iter().map(|b| uniform_grid(b.length, args.cells)).collect();
    let build = || -> Result<_, Box<dyn std::error::Error>> {
        let diags: Vec<BeamDiagonalization> = scenario
            .beams
            .iter()
            .zip(&grids)
            .map(|(b, g)| build_diagonalization(b, g))
            .collect::<Result<_, _>>()?;
        let state = sample_initial_physical(&scenario, &grids, &diags)?;
        let order = if args.order == 0 { CompatOrder::Zero } else { CompatOrder::One };
        Ok(check_compatibility(&scenario, &grids, &state, order, args.threshold)?)
    };
    let report = match build() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    println!("compatibility residuals (threshold {:.3e}):", report.threshold);
    for entry in &report.entries {
        println!("  order {}: {:<55} {:.3e}", entry.order, entry.condition, entry.residual);
    }
    if report.passes() {
        println!("PASS: max residual {:.3e}", report.max_residual());
        EXIT_OK
    } else {
        println!("FAIL: max residual {:.3e}", report.max_residual());
        EXIT_NEGATIVE
    }
}

fn cmd_inspect(args: &InspectArgs) -> u8 {
    let scenario = match load_or_exit(&args.scenario) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let build = || -> Result<_, Box<dyn std::error::Error>> {
        let diags: Vec<BeamDiagonalization> = scenario
            .beams
            .iter()
            .map(|b| build_diagonalization(b, &uniform_grid(b.length, args.cells)))
            .collect::<Result<_, _>>()?;
        Ok(build_nodal_coupling(&scenario, &diags)?)
    };
    let couplings = match build() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    println!("scenario {}", scenario_hash(&scenario));
    for c in &couplings {
        let kind = match (&c.condition, c.is_multiple) {
            (_, true) => "multiple",
            (NodeCondition::Free, _) => "simple free",
            (NodeCondition::Clamped, _) => "simple clamped",
            (NodeCondition::Feedback(_), _) => "simple controlled",
        };
        let norm = op_norm_dyn(&c.reflection);
        let transparent = if norm <= 1e-10 { ", transparent" } else { "" };
        println!(
            "node {:>2} ({kind}): degree {}, incident edges {:?}, |reflection| = {:.6e}{transparent}",
            c.node,
            c.k(),
            c.edges,
            norm
        );
        println!(
            "         |gain| = {:.3e}, impedance eigenvalues in [{:.3e}, {:.3e}]",
            c.kbar.norm(),
            igeb_net_core::linalg::min_eig(&c.sigma_sum),
            igeb_net_core::linalg::max_eig(&c.sigma_sum),
        );
        if args.node == Some(c.node) {
            println!("{:.6}", c.reflection);
        }
    }
    EXIT_OK
}
