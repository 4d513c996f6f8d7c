// negated comparisons in the config checks reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Configuration-driven runner: parses an experiment file, wires the
//! pipeline, persists tables and a structured report, and exits nonzero
//! when a verdict fails.

mod config;
mod registry;
mod report;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::TableFormat;
use report::{Metric, RunMeta, RunReport};
use stages::StageContext;

#[derive(Parser)]
#[command(name = "pasim", version, about = "Contracting simulation engine runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; defaults to the config's output block.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads; defaults to the environment's thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Table format.
    #[arg(long, global = true, value_parser = parse_format)]
    format: Option<TableFormat>,
}

fn parse_format(s: &str) -> Result<TableFormat, String> {
    match s {
        "csv" => Ok(TableFormat::Csv),
        "json" => Ok(TableFormat::Json),
        other => Err(format!("unknown format {other}; use csv or json")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: simulate, respond, value, solve, optimize, verify.
    Run,
    /// Reference ensemble with calibration checks.
    Simulate,
    /// Best-response valuation of a previously generated contract.
    AgentValue,
    /// Backward-equation benchmark from the `[bsde]` block.
    SolveBsde,
    /// Generate the configured contract and persist its artifact.
    GenerateContract,
    /// Cross-entropy search over the configured policy space.
    Optimize,
    /// Martingale and orthogonality batteries on the conforming ensemble.
    VerifyWeakform,
    /// Moment and tightness diagnostics.
    Diagnostics,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let Some(config_path) = cli.config.clone() else {
        eprintln!("error: --config <path> is required");
        return ExitCode::from(2);
    };
    let loaded = match config::load(&config_path) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let ctx = match StageContext::new(loaded, cli.seed, cli.out.clone(), cli.format) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };

    let started = Instant::now();
    let mut report = RunReport::default();
    let outcome = dispatch(&cli.command, &ctx, &mut report);
    report.meta = Some(RunMeta {
        config_hash: ctx.hash.clone(),
        seed: ctx.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        threads: rayon::current_num_threads(),
        wall_clock_ms: started.elapsed().as_millis(),
    });

    match outcome {
        Ok(()) => {
            if let Err(e) = report.write_json(&ctx.out_dir.join("report.json")) {
                eprintln!("runtime error: {e:#}");
                return ExitCode::from(3);
            }
            report.print_verdicts();
            if report.all_pass() {
                ExitCode::SUCCESS
            } else {
                eprintln!("one or more verdicts failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("runtime error: {e:#}");
            let _ = report.write_json(&ctx.out_dir.join("report.json"));
            ExitCode::from(3)
        }
    }
}

fn dispatch(command: &Command, ctx: &StageContext, report: &mut RunReport) -> anyhow::Result<()> {
    match command {
        Command::Run => {
            let (noise, x) = stages::stage_simulate(ctx, report)?;
            stages::stage_girsanov(ctx, report, &noise, &x)?;
            let contract = stages::stage_contract(ctx, report, &x)?;
            stages::stage_agent(ctx, report, &noise, &x, &contract)?;
            stages::stage_bsde(ctx, report, &x, Some(&contract))?;
            stages::stage_optimize(ctx, report)?;
            let controlled = stages::stage_weakform(ctx, report)?;
            stages::stage_diagnostics(ctx, report, &controlled)?;
        }
        Command::Simulate => {
            stages::stage_simulate(ctx, report)?;
        }
        Command::AgentValue => {
            let (noise, x, contract, _) = stages::load_contract(ctx)?;
            stages::stage_agent(ctx, report, &noise, &x, &contract)?;
            let value = report
                .results
                .get("agent_best_response_value")
                .map(|m| m.value);
            if let Some(v) = value {
                report.record("agent_value", Metric::exact(v));
            }
        }
        Command::SolveBsde => {
            if ctx.cfg.bsde.is_none() {
                anyhow::bail!("config error: solve-bsde requires a [bsde] block");
            }
            let noise = std::sync::Arc::new(pasim_core::measure::simulate_base_measure(
                &ctx.grid,
                &ctx.tg,
                ctx.model.noise_dim,
                ctx.cfg.run.n_paths,
                ctx.seed,
                pasim_core::rng::Stream::Base,
            )?);
            let x = pasim_core::dynamics::simulate_state_p0(&ctx.model, &noise)?;
            let needs_contract = matches!(
                ctx.cfg.bsde.as_ref().map(|b| &b.terminal),
                Some(config::TerminalConfig::Contract)
            );
            let contract = if needs_contract {
                Some(stages::stage_contract(ctx, report, &x)?)
            } else {
                None
            };
            stages::stage_bsde(ctx, report, &x, contract.as_ref())?;
        }
        Command::GenerateContract => {
            let (_, x) = stages::stage_simulate(ctx, report)?;
            stages::stage_contract(ctx, report, &x)?;
        }
        Command::Optimize => {
            if ctx.cfg.optimize.is_none() {
                anyhow::bail!("config error: optimize requires an [optimize] block");
            }
            stages::stage_optimize(ctx, report)?;
        }
        Command::VerifyWeakform => {
            // the persisted contract artifact is the prerequisite; rebuild
            // it and cross-check the persisted payments before verifying
            let (_, _, contract, artifact) = stages::load_contract(ctx)?;
            let persisted = ctx.out_dir.join("contract_summary.csv");
            if persisted.exists() {
                cross_check_payments(&persisted, &contract.xi)?;
            }
            let _ = artifact;
            stages::stage_weakform(ctx, report)?;
        }
        Command::Diagnostics => {
            let _ = stages::load_contract(ctx)?;
            let controlled = stages::controlled_contract(ctx)?;
            stages::stage_diagnostics(ctx, report, &controlled)?;
        }
    }
    Ok(())
}

/// Regenerated payments must match the persisted table exactly.
fn cross_check_payments(path: &std::path::Path, xi: &[f64]) -> anyhow::Result<()> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut count = 0usize;
    for (p, row) in reader.records().enumerate() {
        let row = row?;
        let stored: f64 = row
            .get(2)
            .ok_or_else(|| anyhow::anyhow!("malformed contract summary"))?
            .parse()
            .unwrap_or(f64::NAN);
        let current = xi[p];
        let both_nan = stored.is_nan() && current.is_nan();
        if !both_nan && (stored - current).abs() > 1e-9 {
            anyhow::bail!(
                "dependency error: persisted payment at path {p} ({stored}) does not match the regenerated contract ({current})"
            );
        }
        count += 1;
    }
    if count != xi.len() {
        anyhow::bail!(
            "dependency error: persisted contract summary has {count} rows, expected {}",
            xi.len()
        );
    }
    Ok(())
}
