//! Pipeline stages shared by the umbrella run and the individual
//! subcommands. Every stage records metrics and verdicts into the report
//! and writes its tables under the output directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context as AnyhowContext, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use pasim_core::agent::{
    agent_value, best_response, verify_value_martingale, HamiltonianSpec, ValuationRoute,
};
use pasim_core::bsde::{
    solve_bsde, BsdeConfig, Driver, HamiltonianDriver, LinearYDriver, RegressionBasis, ZeroDriver,
};
use pasim_core::dynamics::{
    constant_control, girsanov_density, reweighted_expectation, simulate_state_controlled,
    simulate_state_p0, ControlField, StatePaths,
};
use pasim_core::grid::{IntensityGrid, TimeGrid};
use pasim_core::measure::{
    pushforward, pushforward_identity_sides, quadratic_variation, simulate_base_measure,
    NoiseHandle,
};
use pasim_core::model::ModelSpec;
use pasim_core::principal::{
    evaluate_constraints, generate_contract, moment_diagnostics, optimize_principal,
    principal_value, simulate_best_response, InitialUtility, LPolicy, OptimizeOutcome,
    PrincipalSpec, SimulatedContract, ZPolicy,
};
use pasim_core::rng::{standard_normal, Stream};
use pasim_core::stats::Estimate;
use pasim_core::weakform::{
    any_beyond, discounted_split, fraction_within, generator_battery, orthogonality_battery,
    tightness_report, GeneratorSpec, TestFunctionBattery,
};

use crate::config::*;
use crate::registry;
use crate::report::{fmt, Metric, RunReport, Table};

/// Everything a stage needs: parsed config, resolved seed and output
/// directory, and the built engine objects.
pub struct StageContext {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub format: TableFormat,
    pub model: ModelSpec,
    pub ham: HamiltonianSpec,
    pub pspec: PrincipalSpec,
    pub grid: IntensityGrid,
    pub tg: TimeGrid,
}

impl StageContext {
    pub fn new(loaded: LoadedConfig, seed: Option<u64>, out: Option<PathBuf>, format: Option<TableFormat>) -> Result<Self> {
        let cfg = loaded.config;
        let model = registry::build_model(&cfg.model)?;
        let (grid, tg) = registry::build_grids(&cfg.model)?;
        let ham = registry::build_hamiltonian(model.clone())?;
        let pspec = registry::build_principal(&cfg.principal);
        let seed = seed.unwrap_or(cfg.run.seed);
        let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
        let format = format.unwrap_or(cfg.output.format);
        std::fs::create_dir_all(&out_dir)
            .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
        Ok(StageContext {
            cfg,
            hash: loaded.hash,
            seed,
            out_dir,
            format,
            model,
            ham,
            pspec,
            grid,
            tg,
        })
    }

    fn write(&self, table: &Table) -> Result<()> {
        table.write(&self.out_dir, self.format)?;
        Ok(())
    }
}

fn action_hash(seed: u64, trial: u64, i: usize, j: usize, n: usize) -> usize {
    let z = standard_normal(seed, Stream::Custom(21), trial, i as u64, j as u64, 0);
    (((z.tanh() + 1.0) * 0.5 * n as f64) as usize).min(n - 1)
}

/// Reference noise plus driftless state, with the calibration verdicts.
pub fn stage_simulate(
    ctx: &StageContext,
    report: &mut RunReport,
) -> Result<(NoiseHandle, StatePaths)> {
    let noise = Arc::new(simulate_base_measure(
        &ctx.grid,
        &ctx.tg,
        ctx.model.noise_dim,
        ctx.cfg.run.n_paths,
        ctx.seed,
        Stream::Base,
    )?);
    let x = simulate_state_p0(&ctx.model, &noise)?;
    ctx.model
        .check_assumptions(&x.x, &(0..=ctx.tg.n_steps()).map(|i| ctx.tg.t(i)).collect::<Vec<_>>())?;

    // quadratic variation of the first half of the mass
    let half: Vec<usize> = (0..ctx.grid.n_cells() / 2).collect();
    let half_mass = ctx.grid.mass_of(&half);
    let qv = quadratic_variation(&noise, &half)?;
    let target = half_mass * ctx.tg.horizon();
    report.record("qv_half_mass", Metric::estimate(qv.mean[0]));
    report.verdict(
        "qv_half_mass",
        qv.mean[0].within(target, 3.0),
        format!("{} vs {target}", qv.mean[0]),
    );

    // disjoint-set covariation
    let other: Vec<usize> = (ctx.grid.n_cells() / 2..ctx.grid.n_cells()).collect();
    let mut cov = Vec::with_capacity(noise.n_paths);
    for p in 0..noise.n_paths {
        let mut acc = 0.0;
        for i in 0..ctx.tg.n_steps() {
            let a: f64 = half.iter().map(|&j| noise.increments[[p, i, j, 0]]).sum();
            let b: f64 = other.iter().map(|&j| noise.increments[[p, i, j, 0]]).sum();
            acc += a * b;
        }
        cov.push(acc);
    }
    let cov = Estimate::from_samples(&cov);
    report.record("qv_disjoint_covariation", Metric::estimate(cov));
    report.verdict(
        "qv_disjoint_covariation",
        cov.within(0.0, 4.0),
        format!("{cov}"),
    );

    // discrete image-measure identity on random triples
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let control = Array3::from_shape_fn((1, 4, ctx.grid.n_cells()), |(_, i, j)| {
            let idx = action_hash(ctx.seed ^ 0xDADA, trial, i, j, ctx.model.action_grid.len());
            ctx.model.action_grid[idx]
        });
        let pushed = pushforward(&control, &ctx.grid)?;
        let a = standard_normal(ctx.seed, Stream::Custom(22), trial, 0, 0, 0);
        let cut = standard_normal(ctx.seed, Stream::Custom(23), trial, 0, 0, 0).tanh();
        for i in 0..4 {
            let (cell, atom) = pushforward_identity_sides(
                &control,
                &pushed,
                &ctx.grid,
                0,
                i,
                |u| (a * u).cos() + u * u,
                |u| u <= cut,
            );
            worst = worst.max((cell - atom).abs());
        }
    }
    report.record("pushforward_identity_gap", Metric::exact(worst));
    report.verdict(
        "pushforward_identity",
        worst <= 1e-12,
        format!("max gap {worst:.3e}"),
    );

    // summary table
    let mut table = Table::new("paths_summary", &["path", "x_terminal", "qv_all_cells"]);
    let all: Vec<usize> = (0..ctx.grid.n_cells()).collect();
    let qv_all = quadratic_variation(&noise, &all)?;
    for p in 0..noise.n_paths {
        table.push(vec![
            p.to_string(),
            fmt(x.x[[p, ctx.tg.n_steps(), 0]]),
            fmt(qv_all.per_path[[p, 0]]),
        ]);
    }
    ctx.write(&table)?;
    Ok((noise, x))
}

/// Likelihood-ratio calibration: random bounded controls must have unit mean
/// density and reweighted moments matching direct tilted simulation.
pub fn stage_girsanov(
    ctx: &StageContext,
    report: &mut RunReport,
    noise: &NoiseHandle,
    x: &StatePaths,
) -> Result<()> {
    let direct_noise = Arc::new(simulate_base_measure(
        &ctx.grid,
        &ctx.tg,
        ctx.model.noise_dim,
        ctx.cfg.run.n_paths,
        ctx.seed ^ 0x1234_5678,
        Stream::Base,
    )?);
    let n_paths = ctx.cfg.run.n_paths;
    let n_steps = ctx.tg.n_steps();
    let n_cells = ctx.grid.n_cells();
    let mut all_density_ok = true;
    let mut all_agree = true;
    let mut worst_density_sigmas: f64 = 0.0;
    let mut worst_gap_sigmas: f64 = 0.0;
    for trial in 0..10u64 {
        let control = Array3::from_shape_fn((n_paths, n_steps, n_cells), |(_, i, j)| {
            let idx = action_hash(ctx.seed ^ 0xBEEF, trial, i, j, ctx.model.action_grid.len());
            ctx.model.action_grid[idx]
        });
        let weights = girsanov_density(&ctx.model, &control, x, noise)?;
        let densities = weights.terminal_densities();
        if !densities.iter().all(|&d| d > 0.0 && d.is_finite()) {
            all_density_ok = false;
        }
        let mean_density = Estimate::from_samples(&densities);
        worst_density_sigmas = worst_density_sigmas.max(mean_density.sigmas_from(1.0));
        if !mean_density.within(1.0, 3.0) {
            all_density_ok = false;
        }
        let direct = simulate_state_controlled(&ctx.model, &control, &direct_noise)?;
        for power in [1, 2] {
            let values: Vec<f64> = (0..n_paths).map(|p| x.x[[p, n_steps, 0]].powi(power)).collect();
            let rew = reweighted_expectation(&values, &weights);
            let dvals: Vec<f64> = (0..n_paths)
                .map(|p| direct.x[[p, n_steps, 0]].powi(power))
                .collect();
            let dir = Estimate::from_samples(&dvals);
            let combined = (rew.se * rew.se + dir.se * dir.se).sqrt();
            let sigmas = (rew.value - dir.value).abs() / combined;
            worst_gap_sigmas = worst_gap_sigmas.max(sigmas);
            if sigmas > 3.0 {
                all_agree = false;
            }
        }
    }
    report.record("girsanov_worst_density_sigmas", Metric::exact(worst_density_sigmas));
    report.record("girsanov_worst_route_gap_sigmas", Metric::exact(worst_gap_sigmas));
    report.verdict(
        "girsanov_mean_density",
        all_density_ok,
        format!("worst deviation {worst_density_sigmas:.2} se"),
    );
    report.verdict(
        "girsanov_reweighted_vs_direct",
        all_agree,
        format!("worst route gap {worst_gap_sigmas:.2} se"),
    );
    Ok(())
}

/// Persisted handle of a generated contract, enough to rebuild it exactly.
#[derive(Debug, Serialize, Deserialize)]
pub struct ContractArtifact {
    pub config_hash: String,
    pub seed: u64,
    pub y0: f64,
    pub policy: ZPolicyConfig,
    pub l_policy: LPolicyConfig,
    pub n_paths: usize,
}

pub fn contract_artifact_path(out_dir: &Path) -> PathBuf {
    out_dir.join("contract.json")
}

/// Generate the configured contract on the reference ensemble and persist
/// the artifact plus a per-path summary.
pub fn stage_contract(
    ctx: &StageContext,
    report: &mut RunReport,
    x: &StatePaths,
) -> Result<SimulatedContract> {
    let z_policy = registry::build_z_policy(&ctx.cfg.policy.z, ctx.model.state_dim);
    let l_policy = registry::build_l_policy(&ctx.cfg.policy.l);
    let contract = generate_contract(
        &ctx.ham,
        &ctx.pspec,
        InitialUtility::Fixed(ctx.cfg.policy.y0),
        &z_policy,
        &l_policy,
        x,
    )?;
    report.record(
        "contract_out_of_range_fraction",
        Metric::exact(contract.out_of_range_fraction),
    );
    report.verdict(
        "contract_participation",
        ctx.cfg.policy.y0 >= ctx.pspec.reservation,
        format!(
            "initial utility {} vs reservation {}",
            ctx.cfg.policy.y0, ctx.pspec.reservation
        ),
    );

    let artifact = ContractArtifact {
        config_hash: ctx.hash.clone(),
        seed: ctx.seed,
        y0: ctx.cfg.policy.y0,
        policy: ctx.cfg.policy.z.clone(),
        l_policy: ctx.cfg.policy.l.clone(),
        n_paths: ctx.cfg.run.n_paths,
    };
    let path = contract_artifact_path(&ctx.out_dir);
    std::fs::write(&path, serde_json::to_string_pretty(&artifact)? + "\n")?;

    let mut table = Table::new("contract_summary", &["path", "y_terminal", "payment"]);
    let last = contract.y.dim().1 - 1;
    for p in 0..contract.n_paths() {
        table.push(vec![
            p.to_string(),
            fmt(contract.y[[p, last]]),
            fmt(contract.xi[p]),
        ]);
    }
    ctx.write(&table)?;
    Ok(contract)
}

/// Load a persisted contract artifact and rebuild the contract it names.
pub fn load_contract(
    ctx: &StageContext,
) -> Result<(NoiseHandle, StatePaths, SimulatedContract, ContractArtifact)> {
    let path = contract_artifact_path(&ctx.out_dir);
    if !path.exists() {
        bail!(
            "dependency error: expected contract artifact at {}; run `pasim generate-contract` first",
            path.display()
        );
    }
    let artifact: ContractArtifact = serde_json::from_str(
        &std::fs::read_to_string(&path)
            .with_context(|| format!("cannot read {}", path.display()))?,
    )?;
    if artifact.config_hash != ctx.hash {
        bail!(
            "dependency error: {} was produced by a different config (hash {} vs {})",
            path.display(),
            artifact.config_hash,
            ctx.hash
        );
    }
    let noise = Arc::new(simulate_base_measure(
        &ctx.grid,
        &ctx.tg,
        ctx.model.noise_dim,
        artifact.n_paths,
        artifact.seed,
        Stream::Base,
    )?);
    let x = simulate_state_p0(&ctx.model, &noise)?;
    let z_policy = registry::build_z_policy(&artifact.policy, ctx.model.state_dim);
    let l_policy = registry::build_l_policy(&artifact.l_policy);
    let contract = generate_contract(
        &ctx.ham,
        &ctx.pspec,
        InitialUtility::Fixed(artifact.y0),
        &z_policy,
        &l_policy,
        &x,
    )?;
    Ok((noise, x, contract, artifact))
}

/// Best-response valuation and the drift verdicts on the generated contract.
pub fn stage_agent(
    ctx: &StageContext,
    report: &mut RunReport,
    noise: &NoiseHandle,
    x: &StatePaths,
    contract: &SimulatedContract,
) -> Result<()> {
    let model = &ctx.model;
    let z_field = contract.z_field();
    let a_star = best_response(&ctx.ham, x, &contract.y, &z_field)?;
    let w_star = girsanov_density(model, &a_star, x, noise)?;
    let v_star = agent_value(
        model,
        &contract.xi,
        &a_star,
        x,
        ValuationRoute::Reweighted(&w_star),
    )?;
    let promised = Estimate::from_samples(&contract.y0_draws);
    report.record("agent_best_response_value", Metric::estimate(v_star));
    report.record("agent_promised_initial", Metric::estimate(promised));
    let gap_se = (v_star.se * v_star.se + promised.se * promised.se).sqrt().max(1e-300);
    report.verdict(
        "agent_value_matches_promise",
        (v_star.value - promised.value).abs() <= 3.0 * gap_se,
        format!("value {v_star} vs promised {promised}"),
    );

    // perturbed responses must not beat the maximiser
    let grid_len = model.action_grid.len();
    let mut none_better = true;
    let mut best_excess = f64::NEG_INFINITY;
    for trial in 0..10u64 {
        let control: ControlField = match trial {
            0..=5 => {
                let idx = action_hash(ctx.seed ^ 0xFEED, trial, 0, 0, grid_len);
                constant_control(noise, model.action_grid[idx])
            }
            6 | 7 => {
                // randomised two-atom perturbation
                let lo_idx = action_hash(ctx.seed ^ 0xFEED, trial, 1, 0, grid_len);
                let hi_idx = action_hash(ctx.seed ^ 0xFEED, trial, 2, 0, grid_len);
                let mut c = constant_control(noise, model.action_grid[lo_idx]);
                for p in 0..noise.n_paths {
                    for i in 0..ctx.tg.n_steps() {
                        for j in ctx.grid.n_cells() / 2..ctx.grid.n_cells() {
                            c[[p, i, j]] = model.action_grid[hi_idx];
                        }
                    }
                }
                c
            }
            _ => {
                // shift the best response by one grid notch
                let mut c = a_star.clone();
                let shift = if trial == 8 { 1usize } else { grid_len - 1 };
                for v in c.iter_mut() {
                    let idx = model
                        .action_grid
                        .iter()
                        .position(|&u| (u - *v).abs() < 1e-12)
                        .unwrap_or(0);
                    *v = model.action_grid[(idx + shift) % grid_len];
                }
                c
            }
        };
        let w = girsanov_density(model, &control, x, noise)?;
        let v = agent_value(
            model,
            &contract.xi,
            &control,
            x,
            ValuationRoute::Reweighted(&w),
        )?;
        let bound = v_star.value + 3.0 * (v.se * v.se + v_star.se * v_star.se).sqrt();
        best_excess = best_excess.max(v.value - v_star.value);
        if v.value > bound {
            none_better = false;
        }
    }
    report.record("agent_best_perturbation_excess", Metric::exact(best_excess));
    report.verdict(
        "agent_no_perturbation_beats_response",
        none_better,
        format!("largest excess {best_excess:.4}"),
    );

    // drift of the value-minus-cost process
    let probes: Vec<(f64, f64)> = ctx.cfg.verify.pairs.iter().map(|p| (p[0], p[1])).collect();
    let rep = verify_value_martingale(model, &contract.y, &a_star, x, &w_star, &probes)?;
    report.verdict(
        "agent_drift_vanishes_at_best_response",
        rep.all_within(3.0),
        format!(
            "worst drift {:.4}",
            rep.intervals
                .iter()
                .map(|iv| iv.drift.sigmas_from(0.0))
                .fold(0.0f64, f64::max)
        ),
    );
    let lazy = constant_control(noise, lazy_action(model));
    let w_lazy = girsanov_density(model, &lazy, x, noise)?;
    let rep = verify_value_martingale(model, &contract.y, &lazy, x, &w_lazy, &probes)?;
    report.verdict(
        "agent_drift_negative_when_lazy",
        rep.none_above(3.0) && rep.some_below(3.0),
        format!(
            "drift estimates {:?}",
            rep.intervals
                .iter()
                .map(|iv| iv.drift.value)
                .collect::<Vec<_>>()
        ),
    );
    Ok(())
}

fn lazy_action(model: &ModelSpec) -> f64 {
    // grid action closest to zero
    *model
        .action_grid
        .iter()
        .min_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap())
        .unwrap()
}

/// Backward-solver benchmarks configured in the `[bsde]` block.
pub fn stage_bsde(
    ctx: &StageContext,
    report: &mut RunReport,
    x: &StatePaths,
    contract: Option<&SimulatedContract>,
) -> Result<()> {
    let Some(bcfg) = &ctx.cfg.bsde else {
        return Ok(());
    };
    let terminal: Vec<f64> = match &bcfg.terminal {
        TerminalConfig::TerminalState => (0..x.n_paths())
            .map(|p| x.x[[p, ctx.tg.n_steps(), 0]])
            .collect(),
        TerminalConfig::Constant { value } => vec![*value; x.n_paths()],
        TerminalConfig::Contract => {
            let c = contract.ok_or_else(|| {
                anyhow!("dependency error: the contract terminal needs a generated contract")
            })?;
            c.xi.clone()
        }
    };
    let driver: Box<dyn Driver> = match bcfg.driver {
        DriverConfig::Zero => Box::new(ZeroDriver),
        DriverConfig::LinearY { rate } => Box::new(LinearYDriver { rate }),
        DriverConfig::Hamiltonian => Box::new(HamiltonianDriver::new(ctx.ham.clone())),
    };
    let basis = RegressionBasis {
        degree: bcfg.basis_degree,
        ridge: bcfg.ridge,
    };
    let sol = solve_bsde(
        &ctx.model,
        &terminal,
        driver.as_ref(),
        x,
        &basis,
        &BsdeConfig {
            n_picard: bcfg.n_picard,
            tol: bcfg.tol,
            beta: None,
        },
    )?;

    let mut table = Table::new("bsde_z", &["step", "mean_z", "mean_y"]);
    let (n_paths, n_steps, n_cells, _) = sol.z.dim();
    for i in 0..n_steps {
        let mut zsum = 0.0;
        let mut ysum = 0.0;
        for p in 0..n_paths {
            ysum += sol.y[[p, i]];
            for j in 0..n_cells {
                zsum += sol.z[[p, i, j, 0]];
            }
        }
        table.push(vec![
            i.to_string(),
            fmt(zsum / (n_paths * n_cells) as f64),
            fmt(ysum / n_paths as f64),
        ]);
    }
    ctx.write(&table)?;

    report.record("bsde_terminal_rms", Metric::exact(sol.terminal_rms));
    report.record("bsde_kw_r_squared", Metric::exact(sol.kw_r_squared));
    report.verdict(
        "bsde_converged",
        !sol.divergence_warning,
        format!("difference trace {:?}", sol.beta_norm_trace),
    );
    let ratios_ok = sol
        .contraction_ratios
        .iter()
        .skip(1)
        .all(|&r| r <= 0.9);
    report.verdict(
        "bsde_contraction",
        ratios_ok,
        format!("ratios {:?}", sol.contraction_ratios),
    );

    match (&bcfg.terminal, &bcfg.driver) {
        (TerminalConfig::TerminalState, DriverConfig::Zero) => {
            // martingale representation of the driftless state
            let mut ss = 0.0;
            let mut count = 0usize;
            for p in 0..n_paths {
                for i in 0..=n_steps {
                    let gap = sol.y[[p, i]] - x.x[[p, i, 0]];
                    ss += gap * gap;
                    count += 1;
                }
            }
            let rmse = (ss / count as f64).sqrt();
            let mean_z = sol.z.iter().sum::<f64>() / sol.z.len() as f64;
            report.record("bsde_state_rmse", Metric::exact(rmse));
            report.record("bsde_mean_z", Metric::exact(mean_z));
            report.verdict(
                "bsde_martingale_representation",
                rmse <= 0.05 && (mean_z - 1.0).abs() <= 0.1,
                format!("rmse {rmse:.4}, mean z {mean_z:.4}"),
            );
        }
        (TerminalConfig::Constant { value }, DriverConfig::LinearY { rate }) => {
            let y0 = sol.y[[0, 0]];
            let want = value * (-rate * ctx.tg.horizon()).exp();
            let rel = (y0 - want).abs() / want.abs().max(1e-12);
            report.record("bsde_initial_value", Metric::exact(y0));
            report.verdict(
                "bsde_linear_driver_decay",
                rel <= 0.01,
                format!("y0 {y0:.6} vs {want:.6}"),
            );
        }
        (TerminalConfig::Contract, DriverConfig::Hamiltonian) => {
            let c = contract.expect("checked above");
            let y0_mean: f64 = (0..n_paths).map(|p| sol.y[[p, 0]]).sum::<f64>() / n_paths as f64;
            let promised = Estimate::from_samples(&c.y0_draws);
            let term = Estimate::from_samples(&terminal);
            report.record("bsde_recovered_initial", Metric::exact(y0_mean));
            report.verdict(
                "bsde_roundtrip_initial_value",
                (y0_mean - promised.value).abs() <= 3.0 * term.se,
                format!("recovered {y0_mean:.4} vs promised {:.4}", promised.value),
            );
            // sensitivity recovery against the realised policy field
            let want = c.z_field();
            let mut ss = 0.0;
            let mut count = 0usize;
            for p in 0..n_paths {
                for i in 0..n_steps {
                    for j in 0..n_cells {
                        let gap = sol.z[[p, i, j, 0]] - want[[p, i, j, 0]];
                        ss += gap * gap;
                        count += 1;
                    }
                }
            }
            let rmse = (ss / count as f64).sqrt();
            report.record("bsde_roundtrip_z_rmse", Metric::exact(rmse));
            report.verdict(
                "bsde_roundtrip_sensitivity",
                rmse <= 0.1,
                format!("z rmse {rmse:.4}"),
            );
        }
        _ => {}
    }
    Ok(())
}

/// Cross-entropy search over the configured space, with history, an optional
/// one-parameter value sweep, and target verdicts.
pub fn stage_optimize(ctx: &StageContext, report: &mut RunReport) -> Result<Option<OptimizeOutcome>> {
    let Some(ocfg) = &ctx.cfg.optimize else {
        return Ok(None);
    };
    let space = registry::build_space(ocfg, ctx.model.state_dim);
    let mut config = registry::build_optimize(ocfg, ctx.seed);

    // when the space randomises, solve its deterministic restriction first
    // and seed the wider search with that optimum
    let deterministic = if let SpaceConfig::RandomizedConstant { branches, lo, hi } = ocfg.space {
        let det_space = pasim_core::principal::PolicySpace::constant(
            ctx.model.state_dim,
            lo,
            hi,
            (ocfg.y0_lo, ocfg.y0_hi),
        );
        let det =
            optimize_principal(&ctx.ham, &ctx.pspec, &det_space, &ctx.grid, &ctx.tg, &config)?;
        let mut start = vec![det.best_y0];
        for _ in 0..branches {
            start.extend_from_slice(&det.best_theta);
        }
        config.warm_starts.push(start);
        Some(det)
    } else {
        None
    };
    let outcome = optimize_principal(&ctx.ham, &ctx.pspec, &space, &ctx.grid, &ctx.tg, &config)?;

    let mut table = Table::new(
        "optimizer_history",
        &[
            "generation",
            "penalty",
            "best_score",
            "mean_score",
            "best_value",
            "best_violation",
        ],
    );
    for rec in &outcome.history {
        table.push(vec![
            rec.generation.to_string(),
            fmt(rec.penalty),
            fmt(rec.best_score),
            fmt(rec.mean_score),
            fmt(rec.best_value),
            fmt(rec.best_violation),
        ]);
    }
    ctx.write(&table)?;

    // value sweep for one-parameter constant spaces
    if let SpaceConfig::Constant { lo, hi } = ocfg.space {
        if ctx.model.state_dim == 1 && ocfg.sweep_points >= 2 && hi > lo {
            let mut sweep = Table::new("value_curve", &["theta", "value", "se"]);
            for s in 0..ocfg.sweep_points {
                let theta = lo + (hi - lo) * s as f64 / (ocfg.sweep_points - 1) as f64;
                let contract = simulate_best_response(
                    &ctx.ham,
                    &ctx.pspec,
                    InitialUtility::Fixed(outcome.best_y0),
                    &ZPolicy::constant(vec![theta]),
                    &LPolicy::Zero,
                    &ctx.grid,
                    &ctx.tg,
                    ocfg.search_paths,
                    ctx.seed ^ 0x5EED,
                )?;
                let v = principal_value(&ctx.pspec, &contract)?;
                sweep.push(vec![fmt(theta), fmt(v.value), fmt(v.se)]);
            }
            ctx.write(&sweep)?;
        }
    }

    std::fs::write(
        ctx.out_dir.join("optimum.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "y0": outcome.best_y0,
            "theta": outcome.best_theta,
            "value": outcome.value.value,
            "se": outcome.value.se,
            "feasible": outcome.feasible,
            "evaluations": outcome.evaluations,
        }))? + "\n",
    )?;

    report.record("optimum_value", Metric::estimate(outcome.value));
    report.verdict(
        "optimizer_feasible",
        outcome.feasible,
        format!(
            "validated constraints: {:?}",
            outcome
                .constraint_report
                .iter()
                .map(|(n, e)| format!("{n}: {:.4}", e.value))
                .collect::<Vec<_>>()
        ),
    );

    let targets = &ctx.cfg.verdicts;
    if let (Some(want), Some(rel)) = (targets.optimum_value, targets.optimum_value_rel_tol) {
        let ok = (outcome.value.value - want).abs() <= rel * want.abs().max(1e-12);
        report.verdict(
            "optimum_value_target",
            ok,
            format!("{:.4} vs {want} (rel tol {rel})", outcome.value.value),
        );
    }
    if let (Some(want), Some(tol)) = (&targets.optimum_theta, targets.optimum_theta_tol) {
        let ok = want.len() == outcome.best_theta.len()
            && want
                .iter()
                .zip(&outcome.best_theta)
                .all(|(w, g)| (w - g).abs() <= tol);
        report.verdict(
            "optimum_theta_target",
            ok,
            format!("{:?} vs {want:?} (tol {tol})", outcome.best_theta),
        );
    }

    // a randomised search space must do at least as well as its
    // deterministic restriction
    if let Some(det) = deterministic {
        let combined = (outcome.value.se.powi(2) + det.value.se.powi(2)).sqrt();
        report.record("optimum_value_deterministic", Metric::estimate(det.value));
        report.verdict(
            "randomized_dominates_deterministic",
            outcome.value.value >= det.value.value - 2.0 * combined,
            format!(
                "randomized {:.4} vs deterministic {:.4}",
                outcome.value.value, det.value.value
            ),
        );
    }
    Ok(Some(outcome))
}

/// The controlled ensemble for the configured policy, on the verification
/// grid when one is configured.
pub fn controlled_contract(ctx: &StageContext) -> Result<SimulatedContract> {
    let tg = match ctx.cfg.verify.n_steps_override {
        Some(n) => TimeGrid::new(ctx.model.horizon, n)?,
        None => ctx.tg,
    };
    let z_policy = registry::build_z_policy(&ctx.cfg.policy.z, ctx.model.state_dim);
    let l_policy = registry::build_l_policy(&ctx.cfg.policy.l);
    Ok(simulate_best_response(
        &ctx.ham,
        &ctx.pspec,
        InitialUtility::Fixed(ctx.cfg.policy.y0),
        &z_policy,
        &l_policy,
        &ctx.grid,
        &tg,
        ctx.cfg.run.n_paths,
        ctx.seed,
    )?)
}

/// Martingale and orthogonality batteries on a conforming ensemble, with
/// power checks, plus the constraint estimates under the best response.
pub fn stage_weakform(ctx: &StageContext, report: &mut RunReport) -> Result<SimulatedContract> {
    let vcfg = &ctx.cfg.verify;
    let tg = match vcfg.n_steps_override {
        Some(n) => TimeGrid::new(ctx.model.horizon, n)?,
        None => ctx.tg,
    };
    let z_policy = registry::build_z_policy(&ctx.cfg.policy.z, ctx.model.state_dim);
    let l_policy = registry::build_l_policy(&ctx.cfg.policy.l);
    let contract = controlled_contract(ctx)?;
    let split = discounted_split(&ctx.model, &contract)?;
    report.record(
        "weakform_reconstruction_gap",
        Metric::exact(split.reconstruction_gap),
    );
    let gen = GeneratorSpec::new(Arc::new(ctx.model.clone()));
    gen.check_probes(&contract, 97)?;
    let battery = TestFunctionBattery::default_for(
        ctx.model.state_dim + 1,
        &vcfg.battery_center,
        vcfg.battery_scale,
    );
    let pairs: Vec<(f64, f64)> = vcfg.pairs.iter().map(|p| (p[0], p[1])).collect();

    let g_rec = generator_battery(&gen, &battery, &contract, &split, &pairs)?;
    let o_rec = orthogonality_battery(&gen, &battery, &contract, &split, &split.u_terminal, &pairs)?;

    let mut table = Table::new(
        "residuals",
        &["battery", "bump", "window", "s", "t", "estimate", "se", "sigmas"],
    );
    for (kind, records) in [("generator", &g_rec), ("orthogonality", &o_rec)] {
        for r in records {
            table.push(vec![
                kind.to_string(),
                r.bump.to_string(),
                r.window.to_string(),
                fmt(r.s),
                fmt(r.t),
                fmt(r.estimate.value),
                fmt(r.estimate.se),
                fmt(r.sigmas()),
            ]);
        }
    }
    ctx.write(&table)?;

    let g_frac = fraction_within(&g_rec, 3.0);
    let o_frac = fraction_within(&o_rec, 3.0);
    report.record("weakform_generator_fraction", Metric::exact(g_frac));
    report.record("weakform_orthogonality_fraction", Metric::exact(o_frac));
    report.verdict(
        "weakform_conforming",
        g_frac >= 0.95 && o_frac >= 0.95,
        format!("generator {g_frac:.3}, orthogonality {o_frac:.3} within 3 se"),
    );

    if vcfg.power_checks {
        // drift deliberately doubled, verified against the honest generator
        let mut doubled = ctx.model.clone();
        doubled.drift_loading = Arc::new(pasim_core::model::ScaledLoading {
            inner: ctx.model.drift_loading.clone(),
            factor: 2.0,
        });
        doubled.lambda_bound *= 2.0;
        let doubled_ham = HamiltonianSpec::grid(Arc::new(doubled.clone()))?;
        let adversarial = simulate_best_response(
            &doubled_ham,
            &ctx.pspec,
            InitialUtility::Fixed(ctx.cfg.policy.y0),
            &z_policy,
            &l_policy,
            &ctx.grid,
            &tg,
            ctx.cfg.run.n_paths,
            ctx.seed ^ 0xD0,
        )?;
        let adv_split = discounted_split(&doubled, &adversarial)?;
        let rec = generator_battery(&gen, &battery, &adversarial, &adv_split, &pairs)?;
        report.verdict(
            "weakform_power_drift",
            any_beyond(&rec, 5.0),
            "doubled drift must be rejected beyond 5 se".into(),
        );

        // terminal variable correlated with the driving noise
        let noise = Arc::clone(&contract.x.driven_by);
        let correlated: Vec<f64> = (0..contract.n_paths())
            .map(|p| {
                (0..tg.n_steps())
                    .map(|i| noise.aggregate_increment(p, i, 0))
                    .sum()
            })
            .collect();
        let rec =
            orthogonality_battery(&gen, &battery, &contract, &split, &correlated, &pairs)?;
        report.verdict(
            "weakform_power_orthogonality",
            any_beyond(&rec, 5.0),
            "correlated terminal part must be rejected beyond 5 se".into(),
        );
    }

    // constrained objective under the best response
    if !ctx.pspec.constraints.is_empty() {
        let creport = evaluate_constraints(&ctx.pspec, &contract)?;
        let mut table = Table::new("constraints", &["name", "estimate", "se"]);
        for (name, e) in &creport {
            table.push(vec![name.clone(), fmt(e.value), fmt(e.se)]);
        }
        ctx.write(&table)?;
        for (name, e) in &creport {
            report.record(&format!("constraint_{name}"), Metric::estimate(*e));
        }
    }
    Ok(contract)
}

/// Moment diagnostics and tightness exceedance probabilities.
pub fn stage_diagnostics(
    ctx: &StageContext,
    report: &mut RunReport,
    contract: &SimulatedContract,
) -> Result<()> {
    let diag = moment_diagnostics(
        &ctx.model,
        contract,
        ctx.pspec.q,
        ctx.pspec.q_prime,
        ctx.pspec.moment_cap,
    )?;
    report.record("moment_z", Metric::exact(diag.z_moment));
    report.record("moment_u", Metric::exact(diag.u_moment));
    let mut moments = Table::new("moments", &["quantity", "value"]);
    moments.push(vec!["z_moment".into(), fmt(diag.z_moment)]);
    moments.push(vec!["u_moment".into(), fmt(diag.u_moment)]);
    ctx.write(&moments)?;
    if let Some(in_set) = diag.in_set {
        report.verdict(
            "moment_cap_membership",
            in_set,
            format!(
                "z moment {} + u moment {} vs cap {}",
                diag.z_moment, diag.u_moment, ctx.pspec.moment_cap
            ),
        );
    }

    let split = discounted_split(&ctx.model, contract)?;
    let points = tightness_report(contract, &split, ctx.cfg.verify.epsilon, &ctx.cfg.verify.thresholds)?;
    let mut table = Table::new("tightness", &["threshold", "probability", "count"]);
    for p in &points {
        table.push(vec![
            fmt(p.threshold),
            fmt(p.probability),
            p.exceed_count.to_string(),
        ]);
    }
    ctx.write(&table)?;
    let monotone = points.windows(2).all(|w| w[1].probability <= w[0].probability);
    report.verdict(
        "tightness_monotone",
        monotone,
        format!(
            "probabilities {:?}",
            points.iter().map(|p| p.probability).collect::<Vec<_>>()
        ),
    );
    if let Some(cap) = ctx.cfg.verdicts.tightness_max_final {
        let last = points.last().map(|p| p.probability).unwrap_or(1.0);
        report.verdict(
            "tightness_final_below_cap",
            last <= cap,
            format!("final exceedance {last} vs cap {cap}"),
        );
    }
    Ok(())
}
