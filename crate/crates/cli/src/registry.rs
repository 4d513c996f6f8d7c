//! Builders turning configuration into engine objects. Arbitrary coefficient
//! functions enter through the library API; the runner only exposes these
//! named families so configs stay declarative.

use std::sync::Arc;

use anyhow::Result;
use nalgebra::{DMatrix, DVector};

use pasim_core::agent::HamiltonianSpec;
use pasim_core::grid::{IntensityGrid, TimeGrid};
use pasim_core::model::{
    AgentUtility, ConstDiscount, DriftLoading, LinearDriftLoading, ModelSpec, PathPrefix,
    QuadraticCost, RunningCost, StateScaledDriftLoading, Volatility, ZeroCost,
};
use pasim_core::principal::{
    AffineBranch, BranchMap, Constraint, ConstantBranch, LPolicy, ObjectiveFn, PolicySpace,
    PrincipalSpec, TerminalMinusPayment, ZPolicy,
};

use crate::config::*;

struct ConstSigma {
    value: f64,
    d: usize,
    k: usize,
}
impl Volatility for ConstSigma {
    fn eval_into(&self, _t: f64, _x: PathPrefix<'_>, out: &mut DMatrix<f64>) {
        out.fill(0.0);
        for i in 0..self.k.min(self.d) {
            out[(i, i)] = self.value;
        }
    }
}

struct BoundedAffineSigma {
    base: f64,
    slope: f64,
    d: usize,
    k: usize,
}
impl Volatility for BoundedAffineSigma {
    fn eval_into(&self, _t: f64, x: PathPrefix<'_>, out: &mut DMatrix<f64>) {
        let scale = self.base * (1.0 + self.slope * x.current()[0].tanh());
        out.fill(0.0);
        for i in 0..self.k.min(self.d) {
            out[(i, i)] = scale;
        }
    }
}

pub fn build_model(cfg: &ModelConfig) -> Result<ModelSpec> {
    let (d, k) = (cfg.state_dim, cfg.noise_dim);
    let (volatility, sigma_bound): (Arc<dyn Volatility>, f64) = match cfg.sigma {
        SigmaConfig::Constant { value } => (
            Arc::new(ConstSigma { value, d, k }),
            value.abs() * (k as f64).sqrt() + 1e-9,
        ),
        SigmaConfig::BoundedAffine { base, slope } => (
            Arc::new(BoundedAffineSigma { base, slope, d, k }),
            base.abs() * (1.0 + slope.abs()) * (k as f64).sqrt() + 1e-9,
        ),
    };
    let action_grid = ModelSpec::uniform_actions(cfg.actions.min, cfg.actions.max, cfg.actions.n);
    let u_max = action_grid
        .iter()
        .map(|u| u.abs())
        .fold(0.0f64, f64::max);
    let (drift_loading, lambda_bound): (Arc<dyn DriftLoading>, f64) = match cfg.lambda {
        LambdaConfig::Action => {
            let mut direction = vec![0.0; k];
            direction[0] = 1.0;
            (
                Arc::new(LinearDriftLoading { direction }),
                u_max + 1e-9,
            )
        }
        LambdaConfig::StateScaled { scale, clamp } => (
            Arc::new(StateScaledDriftLoading { scale, clamp }),
            scale.abs() * clamp.abs() * u_max + 1e-9,
        ),
    };
    let running_cost: Arc<dyn RunningCost> = match cfg.cost {
        CostConfig::Quadratic { coef } => Arc::new(QuadraticCost(coef)),
        CostConfig::Zero => Arc::new(ZeroCost),
    };
    let DiscountConfig::Constant { rate } = cfg.discount;
    let utility = match cfg.utility {
        UtilityConfig::Identity => AgentUtility::Identity,
        UtilityConfig::Cara { alpha } => AgentUtility::Cara { alpha },
    };
    let model = ModelSpec {
        state_dim: d,
        noise_dim: k,
        horizon: cfg.horizon,
        x0: DVector::from_vec(cfg.x0.clone()),
        volatility,
        drift_loading,
        running_cost,
        discount_rate: Arc::new(ConstDiscount(rate)),
        utility,
        action_grid,
        sigma_bound,
        lambda_bound,
        discount_floor: rate,
    };
    model.validate()?;
    Ok(model)
}

pub fn build_grids(cfg: &ModelConfig) -> Result<(IntensityGrid, TimeGrid)> {
    Ok((
        IntensityGrid::uniform(cfg.n_cells)?,
        TimeGrid::new(cfg.horizon, cfg.n_steps)?,
    ))
}

pub fn build_hamiltonian(model: ModelSpec) -> Result<HamiltonianSpec> {
    Ok(HamiltonianSpec::grid(Arc::new(model))?)
}

pub fn build_principal(cfg: &PrincipalConfig) -> PrincipalSpec {
    let objective: Arc<dyn pasim_core::principal::PrincipalObjective> = match cfg.objective {
        ObjectiveConfig::TerminalMinusPayment => Arc::new(TerminalMinusPayment),
        ObjectiveConfig::NegativePayment => Arc::new(ObjectiveFn(|_x: PathPrefix<'_>, c: f64| -c)),
    };
    let constraints = cfg
        .constraints
        .iter()
        .map(|c| match c {
            ConstraintConfig::Nonnegative => Constraint::nonnegative_payment(),
            ConstraintConfig::LiquidationCap { offset } => {
                let off = *offset;
                Constraint::payment_cap(
                    "liquidation_cap",
                    Arc::new(move |x: PathPrefix<'_>| x.current()[0].max(0.0) + off),
                )
            }
            ConstraintConfig::UpperBound { bound } => {
                let b = *bound;
                Constraint {
                    name: format!("payment_mean_below_{b}"),
                    kind: pasim_core::principal::ConstraintKind::Expectation(Arc::new(
                        move |_x, c| c - b,
                    )),
                }
            }
        })
        .collect();
    PrincipalSpec {
        objective,
        reservation: cfg.reservation,
        constraints,
        q: cfg.q,
        q_prime: cfg.q_prime,
        moment_cap: cfg.moment_cap,
        penalty_schedule: cfg.penalty_schedule.clone(),
        range_tolerance: cfg.range_tolerance,
    }
}

pub fn build_z_policy(cfg: &ZPolicyConfig, state_dim: usize) -> ZPolicy {
    match cfg {
        ZPolicyConfig::Constant { values } => ZPolicy::constant(values.clone()),
        ZPolicyConfig::RandomizedConstant { branches, values } => ZPolicy {
            branches: (0..*branches)
                .map(|g| {
                    Arc::new(ConstantBranch {
                        offset: g * state_dim,
                    }) as Arc<dyn BranchMap>
                })
                .collect(),
            theta: values.clone(),
        },
        ZPolicyConfig::Affine { a, b, c } => {
            let mut theta = Vec::with_capacity(3 * state_dim);
            for _ in 0..state_dim {
                theta.extend_from_slice(&[*a, *b, *c]);
            }
            ZPolicy::deterministic(Arc::new(AffineBranch { offset: 0 }), theta)
        }
    }
}

pub fn build_l_policy(cfg: &LPolicyConfig) -> LPolicy {
    match cfg {
        LPolicyConfig::Zero => LPolicy::Zero,
        LPolicyConfig::Independent { amplitude } => LPolicy::constant_noise(*amplitude),
    }
}

pub fn build_space(cfg: &OptimizeConfigToml, state_dim: usize) -> PolicySpace {
    let mut space = match cfg.space {
        SpaceConfig::Constant { lo, hi } => {
            PolicySpace::constant(state_dim, lo, hi, (cfg.y0_lo, cfg.y0_hi))
        }
        SpaceConfig::RandomizedConstant { branches, lo, hi } => {
            PolicySpace::randomized_constant(state_dim, branches, lo, hi, (cfg.y0_lo, cfg.y0_hi))
        }
    };
    space.l_policy = LPolicy::Zero;
    space
}

pub fn build_optimize(cfg: &OptimizeConfigToml, seed: u64) -> pasim_core::principal::OptimizeConfig {
    pasim_core::principal::OptimizeConfig {
        budget: cfg.budget,
        population: cfg.population,
        elite: cfg.elite,
        smoothing: cfg.smoothing,
        n_paths: cfg.search_paths,
        validation_paths: cfg.validation_paths,
        seed,
        feasibility_tol: cfg.feasibility_tol,
        warm_starts: Vec::new(),
    }
}
