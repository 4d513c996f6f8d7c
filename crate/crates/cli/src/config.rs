//! Experiment configuration: a strict schema with named coefficient
//! families. Unknown keys are rejected so typos fail loudly.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub principal: PrincipalConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub optimize: Option<OptimizeConfigToml>,
    #[serde(default)]
    pub bsde: Option<BsdeConfigToml>,
    #[serde(default)]
    pub verify: VerifyConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub verdicts: VerdictTargets,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub n_cells: usize,
    pub x0: Vec<f64>,
    pub sigma: SigmaConfig,
    pub lambda: LambdaConfig,
    pub cost: CostConfig,
    pub discount: DiscountConfig,
    pub utility: UtilityConfig,
    pub actions: ActionGridConfig,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaConfig {
    /// `value * I` on the leading block.
    Constant { value: f64 },
    /// `base * (1 + slope * tanh(x_1)) * I`: state-dependent but bounded.
    BoundedAffine { base: f64, slope: f64 },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaConfig {
    /// Loading `u` on the first noise coordinate.
    Action,
    /// Loading `scale * clamp(x_1) * u` on the first noise coordinate.
    StateScaled { scale: f64, clamp: f64 },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostConfig {
    Quadratic { coef: f64 },
    Zero,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscountConfig {
    Constant { rate: f64 },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilityConfig {
    Identity,
    Cara { alpha: f64 },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ActionGridConfig {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PrincipalConfig {
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub reservation: f64,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
    #[serde(default = "default_q")]
    pub q: f64,
    #[serde(default = "default_q_prime")]
    pub q_prime: f64,
    #[serde(default = "default_moment_cap")]
    pub moment_cap: f64,
    #[serde(default = "default_penalties")]
    pub penalty_schedule: Vec<f64>,
    #[serde(default)]
    pub range_tolerance: f64,
}

fn default_q() -> f64 {
    2.0
}
fn default_q_prime() -> f64 {
    4.0
}
fn default_moment_cap() -> f64 {
    100.0
}
fn default_penalties() -> Vec<f64> {
    vec![10.0, 100.0, 1000.0]
}

impl Default for PrincipalConfig {
    fn default() -> Self {
        PrincipalConfig {
            objective: ObjectiveConfig::default(),
            reservation: 0.0,
            constraints: Vec::new(),
            q: default_q(),
            q_prime: default_q_prime(),
            moment_cap: default_moment_cap(),
            penalty_schedule: default_penalties(),
            range_tolerance: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    #[default]
    TerminalMinusPayment,
    NegativePayment,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintConfig {
    /// Hard: the payment must be nonnegative.
    Nonnegative,
    /// Hard: the payment must not exceed `max(x_T, 0) + offset`.
    LiquidationCap { offset: f64 },
    /// Soft: `E[payment] - bound <= 0`.
    UpperBound { bound: f64 },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default)]
    pub z: ZPolicyConfig,
    #[serde(default)]
    pub y0: f64,
    #[serde(default)]
    pub l: LPolicyConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            z: ZPolicyConfig::default(),
            y0: 0.0,
            l: LPolicyConfig::Zero,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ZPolicyConfig {
    /// One constant sensitivity vector for every cell.
    Constant { values: Vec<f64> },
    /// One constant sensitivity vector per branch of the cell partition;
    /// `values` holds `branches * state_dim` entries.
    RandomizedConstant { branches: usize, values: Vec<f64> },
    /// `z_r = a + b x_r + c y` per coordinate.
    Affine { a: f64, b: f64, c: f64 },
}

impl Default for ZPolicyConfig {
    fn default() -> Self {
        ZPolicyConfig::Constant { values: vec![0.0] }
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LPolicyConfig {
    #[default]
    Zero,
    Independent {
        amplitude: f64,
    },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeConfigToml {
    pub space: SpaceConfig,
    #[serde(default)]
    pub y0_lo: f64,
    #[serde(default)]
    pub y0_hi: f64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_population")]
    pub population: usize,
    #[serde(default = "default_elite")]
    pub elite: usize,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default = "default_search_paths")]
    pub search_paths: usize,
    #[serde(default = "default_validation_paths")]
    pub validation_paths: usize,
    #[serde(default = "default_feasibility_tol")]
    pub feasibility_tol: f64,
    /// Number of sweep points for the value-versus-parameter table; only
    /// meaningful for one-parameter spaces.
    #[serde(default = "default_sweep")]
    pub sweep_points: usize,
}

fn default_budget() -> usize {
    320
}
fn default_population() -> usize {
    32
}
fn default_elite() -> usize {
    8
}
fn default_smoothing() -> f64 {
    0.2
}
fn default_search_paths() -> usize {
    2_000
}
fn default_validation_paths() -> usize {
    10_000
}
fn default_feasibility_tol() -> f64 {
    0.01
}
fn default_sweep() -> usize {
    9
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceConfig {
    Constant { lo: f64, hi: f64 },
    RandomizedConstant { branches: usize, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeConfigToml {
    pub terminal: TerminalConfig,
    pub driver: DriverConfig,
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_picard")]
    pub n_picard: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_degree() -> usize {
    3
}
fn default_ridge() -> f64 {
    1e-8
}
fn default_picard() -> usize {
    8
}
fn default_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalConfig {
    /// First coordinate of the terminal state.
    TerminalState,
    Constant { value: f64 },
    /// The terminal payment of the configured contract policy.
    Contract,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriverConfig {
    Zero,
    LinearY { rate: f64 },
    Hamiltonian,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_pairs")]
    pub pairs: Vec<[f64; 2]>,
    #[serde(default = "default_center")]
    pub battery_center: Vec<f64>,
    #[serde(default = "default_scale")]
    pub battery_scale: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<f64>,
    /// Finer time grid for the martingale batteries.
    #[serde(default)]
    pub n_steps_override: Option<usize>,
    #[serde(default = "default_power_checks")]
    pub power_checks: bool,
}

fn default_pairs() -> Vec<[f64; 2]> {
    vec![[0.0, 0.5], [0.5, 1.0], [0.0, 1.0]]
}
fn default_center() -> Vec<f64> {
    vec![0.6, 0.4]
}
fn default_scale() -> f64 {
    1.6
}
fn default_epsilon() -> f64 {
    0.5
}
fn default_thresholds() -> Vec<f64> {
    vec![2.0, 4.0, 8.0]
}
fn default_power_checks() -> bool {
    true
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            pairs: default_pairs(),
            battery_center: default_center(),
            battery_scale: default_scale(),
            epsilon: default_epsilon(),
            thresholds: default_thresholds(),
            n_steps_override: None,
            power_checks: default_power_checks(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n_paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default)]
    pub format: TableFormat,
}

fn default_dir() -> String {
    "out".into()
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            format: TableFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    #[default]
    Csv,
    Json,
}

/// Optional analytic targets the run report judges the optimizer against.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictTargets {
    #[serde(default)]
    pub optimum_value: Option<f64>,
    #[serde(default)]
    pub optimum_value_rel_tol: Option<f64>,
    #[serde(default)]
    pub optimum_theta: Option<Vec<f64>>,
    #[serde(default)]
    pub optimum_theta_tol: Option<f64>,
    #[serde(default)]
    pub tightness_max_final: Option<f64>,
}

/// Parsed configuration plus the content hash of the file it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let text = std::str::from_utf8(&bytes).context("config is not valid UTF-8")?;
    let config: ExperimentConfig =
        toml::from_str(text).with_context(|| format!("config parse error in {}", path.display()))?;
    validate(&config)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let hash = format!("{:x}", hasher.finalize());
    Ok(LoadedConfig { config, hash })
}

fn validate(config: &ExperimentConfig) -> Result<()> {
    let m = &config.model;
    if m.n_cells == 0 {
        bail!("model.n_cells must be at least 1");
    }
    if m.n_steps == 0 {
        bail!("model.n_steps must be at least 1");
    }
    if m.state_dim == 0 || m.noise_dim == 0 {
        bail!("model.state_dim and model.noise_dim must be at least 1");
    }
    if m.noise_dim > m.state_dim {
        bail!("model.noise_dim must not exceed model.state_dim");
    }
    if m.x0.len() != m.state_dim {
        bail!("model.x0 must have model.state_dim entries");
    }
    if !(m.horizon > 0.0) {
        bail!("model.horizon must be positive");
    }
    if m.actions.n == 0 {
        bail!("model.actions.n must be at least 1");
    }
    if !(m.actions.min <= m.actions.max) {
        bail!("model.actions.min must not exceed model.actions.max");
    }
    if config.run.n_paths == 0 {
        bail!("run.n_paths must be at least 1");
    }
    match &config.policy.z {
        ZPolicyConfig::Constant { values } => {
            if values.len() != m.state_dim {
                bail!("policy.z.values must have model.state_dim entries");
            }
        }
        ZPolicyConfig::RandomizedConstant { branches, values } => {
            if *branches == 0 || *branches > m.n_cells {
                bail!("policy.z.branches must lie in 1..=model.n_cells");
            }
            if values.len() != branches * m.state_dim {
                bail!("policy.z.values must have branches * state_dim entries");
            }
        }
        ZPolicyConfig::Affine { .. } => {}
    }
    if let Some(opt) = &config.optimize {
        if opt.population == 0 || opt.elite == 0 || opt.elite > opt.population {
            bail!("optimize.elite must lie in 1..=optimize.population");
        }
        if opt.budget < opt.population {
            bail!("optimize.budget must cover at least one population");
        }
        if let SpaceConfig::RandomizedConstant { branches, .. } = opt.space {
            if branches == 0 || branches > m.n_cells {
                bail!("optimize.space.branches must lie in 1..=model.n_cells");
            }
        }
    }
    for pair in &config.verify.pairs {
        if !(0.0 <= pair[0] && pair[0] < pair[1] && pair[1] <= m.horizon) {
            bail!("verify.pairs entries must satisfy 0 <= s < t <= horizon");
        }
    }
    if config.verify.battery_center.len() != m.state_dim + 1 {
        bail!("verify.battery_center needs state_dim + 1 entries");
    }
    Ok(())
}
