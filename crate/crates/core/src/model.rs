//! Model primitives: coefficient maps, the agent's utility, and the
//! assembled model object shared by every downstream stage.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView2;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Relative singular-value threshold below which the volatility matrix is
/// treated as rank-deficient.
pub const RANK_TOL: f64 = 1e-8;

/// Tabulated path history up to and including the current step.
///
/// Coefficients receive the whole prefix so that path-dependent dynamics are
/// expressible; Markovian coefficients just read `current()`.
#[derive(Clone, Copy)]
pub struct PathPrefix<'a> {
    states: ArrayView2<'a, f64>,
}

impl<'a> PathPrefix<'a> {
    pub fn new(states: ArrayView2<'a, f64>) -> Self {
        PathPrefix { states }
    }

    /// Number of tabulated states (steps simulated so far plus one).
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    /// State at the current (left) endpoint.
    pub fn current(&self) -> ndarray::ArrayView1<'_, f64> {
        self.states.row(self.states.nrows() - 1)
    }

    pub fn state_at(&self, index: usize) -> ndarray::ArrayView1<'_, f64> {
        self.states.row(index)
    }

    /// Running maximum of the euclidean norm over the prefix.
    pub fn sup_norm(&self) -> f64 {
        let mut best: f64 = 0.0;
        for row in self.states.rows() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            best = best.max(n);
        }
        best
    }
}

/// Volatility coefficient, a `d x k` matrix per `(t, history)`.
pub trait Volatility: Send + Sync {
    fn eval_into(&self, t: f64, x: PathPrefix<'_>, out: &mut DMatrix<f64>);
}

/// Drift loading per action, a `k`-vector per `(t, history, action)`.
pub trait DriftLoading: Send + Sync {
    fn eval_into(&self, t: f64, x: PathPrefix<'_>, u: f64, out: &mut [f64]);
}

/// Running cost of effort.
pub trait RunningCost: Send + Sync {
    fn eval(&self, t: f64, x: PathPrefix<'_>, u: f64) -> f64;
}

/// Discount rate; independent of the action by assumption.
pub trait DiscountRate: Send + Sync {
    fn eval(&self, t: f64, x: PathPrefix<'_>) -> f64;
}

/// Closure adapters so tests and callers can pass plain functions.
pub struct VolatilityFn<F>(pub F);
impl<F: Fn(f64, PathPrefix<'_>, &mut DMatrix<f64>) + Send + Sync> Volatility for VolatilityFn<F> {
    fn eval_into(&self, t: f64, x: PathPrefix<'_>, out: &mut DMatrix<f64>) {
        (self.0)(t, x, out)
    }
}

pub struct DriftLoadingFn<F>(pub F);
impl<F: Fn(f64, PathPrefix<'_>, f64, &mut [f64]) + Send + Sync> DriftLoading for DriftLoadingFn<F> {
    fn eval_into(&self, t: f64, x: PathPrefix<'_>, u: f64, out: &mut [f64]) {
        (self.0)(t, x, u, out)
    }
}

pub struct RunningCostFn<F>(pub F);
impl<F: Fn(f64, PathPrefix<'_>, f64) -> f64 + Send + Sync> RunningCost for RunningCostFn<F> {
    fn eval(&self, t: f64, x: PathPrefix<'_>, u: f64) -> f64 {
        (self.0)(t, x, u)
    }
}

pub struct DiscountRateFn<F>(pub F);
impl<F: Fn(f64, PathPrefix<'_>) -> f64 + Send + Sync> DiscountRate for DiscountRateFn<F> {
    fn eval(&self, t: f64, x: PathPrefix<'_>) -> f64 {
        (self.0)(t, x)
    }
}

/// Constant volatility matrix.
pub struct ConstVolatility(pub DMatrix<f64>);
impl Volatility for ConstVolatility {
    fn eval_into(&self, _t: f64, _x: PathPrefix<'_>, out: &mut DMatrix<f64>) {
        out.copy_from(&self.0);
    }
}

/// Drift loading `u * direction`, the workhorse of the quadratic benchmarks.
pub struct LinearDriftLoading {
    pub direction: Vec<f64>,
}
impl DriftLoading for LinearDriftLoading {
    fn eval_into(&self, _t: f64, _x: PathPrefix<'_>, u: f64, out: &mut [f64]) {
        for (o, d) in out.iter_mut().zip(&self.direction) {
            *o = u * d;
        }
    }
}

/// Drift loading `scale * clamp(x_0) * u` for mean-reversion style dynamics.
pub struct StateScaledDriftLoading {
    pub scale: f64,
    pub clamp: f64,
}
impl DriftLoading for StateScaledDriftLoading {
    fn eval_into(&self, _t: f64, x: PathPrefix<'_>, u: f64, out: &mut [f64]) {
        let x0 = x.current()[0].clamp(-self.clamp, self.clamp);
        out[0] = self.scale * x0 * u;
        for o in out.iter_mut().skip(1) {
            *o = 0.0;
        }
    }
}

/// Scales another loading by a constant factor; used to build ensembles
/// whose drift deliberately disagrees with a reference generator.
pub struct ScaledLoading {
    pub inner: Arc<dyn DriftLoading>,
    pub factor: f64,
}
impl DriftLoading for ScaledLoading {
    fn eval_into(&self, t: f64, x: PathPrefix<'_>, u: f64, out: &mut [f64]) {
        self.inner.eval_into(t, x, u, out);
        for o in out.iter_mut() {
            *o *= self.factor;
        }
    }
}

/// Quadratic effort cost `coef * u^2`.
pub struct QuadraticCost(pub f64);
impl RunningCost for QuadraticCost {
    fn eval(&self, _t: f64, _x: PathPrefix<'_>, u: f64) -> f64 {
        self.0 * u * u
    }
}

pub struct ZeroCost;
impl RunningCost for ZeroCost {
    fn eval(&self, _t: f64, _x: PathPrefix<'_>, _u: f64) -> f64 {
        0.0
    }
}

pub struct ConstDiscount(pub f64);
impl DiscountRate for ConstDiscount {
    fn eval(&self, _t: f64, _x: PathPrefix<'_>) -> f64 {
        self.0
    }
}

/// Strictly monotone utility with an explicit inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AgentUtility {
    Identity,
    /// Exponential utility `(1 - exp(-alpha x)) / alpha`, range `(-inf, 1/alpha)`.
    Cara { alpha: f64 },
}

impl AgentUtility {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            AgentUtility::Identity => x,
            AgentUtility::Cara { alpha } => (1.0 - (-alpha * x).exp()) / alpha,
        }
    }

    pub fn in_range(&self, y: f64) -> bool {
        match *self {
            AgentUtility::Identity => y.is_finite(),
            AgentUtility::Cara { alpha } => y.is_finite() && alpha * y < 1.0,
        }
    }

    /// Inverse map; `None` outside the range of the utility.
    pub fn inverse(&self, y: f64) -> Option<f64> {
        if !self.in_range(y) {
            return None;
        }
        match *self {
            AgentUtility::Identity => Some(y),
            AgentUtility::Cara { alpha } => Some(-(1.0 - alpha * y).ln() / alpha),
        }
    }

    /// Strict monotonicity probe on a grid; guards the injectivity
    /// requirement for custom parameters.
    pub fn check_injective(&self, lo: f64, hi: f64, n: usize) -> Result<()> {
        let mut prev = self.eval(lo);
        for i in 1..=n {
            let x = lo + (hi - lo) * i as f64 / n as f64;
            let y = self.eval(x);
            if !(y > prev) {
                return Err(Error::InvalidModel(format!(
                    "utility not strictly increasing near x = {x}"
                )));
            }
            prev = y;
        }
        Ok(())
    }
}

/// The full model: dimensions, horizon, coefficients, utility, and the
/// discretised action set with declared bounds.
#[derive(Clone)]
pub struct ModelSpec {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub horizon: f64,
    pub x0: DVector<f64>,
    pub volatility: Arc<dyn Volatility>,
    pub drift_loading: Arc<dyn DriftLoading>,
    pub running_cost: Arc<dyn RunningCost>,
    pub discount_rate: Arc<dyn DiscountRate>,
    pub utility: AgentUtility,
    /// Admissible actions; the continuous action space discretised.
    pub action_grid: Vec<f64>,
    pub sigma_bound: f64,
    pub lambda_bound: f64,
    /// Lower bound on the discount rate.
    pub discount_floor: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.noise_dim == 0 {
            return Err(Error::InvalidModel("dimensions must be >= 1".into()));
        }
        if self.noise_dim > self.state_dim {
            return Err(Error::InvalidModel(
                "noise dimension must not exceed state dimension".into(),
            ));
        }
        if self.x0.len() != self.state_dim {
            return Err(Error::InvalidModel("x0 length does not match state_dim".into()));
        }
        if self.action_grid.is_empty() {
            return Err(Error::InvalidModel("action grid is empty".into()));
        }
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(Error::InvalidModel("horizon must be positive".into()));
        }
        Ok(())
    }

    /// Uniform action grid helper.
    pub fn uniform_actions(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![lo];
        }
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    /// Evaluate the volatility with a scratch matrix, checking finiteness.
    pub fn sigma_at(&self, t: f64, x: PathPrefix<'_>, out: &mut DMatrix<f64>) -> Result<()> {
        self.volatility.eval_into(t, x, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidModel(format!("sigma non-finite at t = {t}")));
        }
        Ok(())
    }
}

/// Assumption diagnostics over an evaluated ensemble.
#[derive(Debug, Clone, Default)]
pub struct AssumptionReport {
    /// Smallest relative singular value of the volatility over the probes.
    pub min_rel_singular_value: f64,
    pub max_sigma_norm: f64,
    pub max_lambda_norm: f64,
    pub min_discount_rate: f64,
}

impl ModelSpec {
    /// Probe the standing assumptions on tabulated state paths: volatility
    /// rank and bound, drift-loading bound over the action grid, discount
    /// floor, utility injectivity.
    pub fn check_assumptions(
        &self,
        x: &ndarray::Array3<f64>,
        times: &[f64],
    ) -> Result<AssumptionReport> {
        let (n_paths, n_points, d) = x.dim();
        if d != self.state_dim {
            return Err(Error::InvalidModel("state dimension mismatch".into()));
        }
        self.utility.check_injective(-10.0, 10.0, 256)?;
        let mut report = AssumptionReport {
            min_rel_singular_value: f64::INFINITY,
            min_discount_rate: f64::INFINITY,
            ..Default::default()
        };
        let mut sigma = DMatrix::zeros(self.state_dim, self.noise_dim);
        let mut lambda = vec![0.0; self.noise_dim];
        let stride = (n_paths / 32).max(1);
        for p in (0..n_paths).step_by(stride) {
            for i in 0..n_points.min(times.len()) {
                let prefix = PathPrefix::new(x.slice(ndarray::s![p, ..=i, ..]));
                let t = times[i];
                self.sigma_at(t, prefix, &mut sigma)?;
                let svd = sigma.clone().svd(false, false);
                let max_sv = svd.singular_values.max();
                let min_sv = svd.singular_values.min();
                let rel = if max_sv > 0.0 { min_sv / max_sv } else { 0.0 };
                if rel <= RANK_TOL {
                    return Err(Error::RankDeficient {
                        ratio: rel,
                        tol: RANK_TOL,
                    });
                }
                report.min_rel_singular_value = report.min_rel_singular_value.min(rel);
                report.max_sigma_norm = report.max_sigma_norm.max(sigma.norm());
                if sigma.norm() > self.sigma_bound + 1e-12 {
                    return Err(Error::InvalidModel(format!(
                        "sigma norm {} exceeds declared bound {}",
                        sigma.norm(),
                        self.sigma_bound
                    )));
                }
                for &u in &self.action_grid {
                    self.drift_loading.eval_into(t, prefix, u, &mut lambda);
                    let norm = lambda.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if !norm.is_finite() {
                        return Err(Error::InvalidModel(format!(
                            "drift loading non-finite at t = {t}, u = {u}"
                        )));
                    }
                    if norm > self.lambda_bound + 1e-12 {
                        return Err(Error::InvalidModel(format!(
                            "drift loading norm {norm} exceeds declared bound {}",
                            self.lambda_bound
                        )));
                    }
                    report.max_lambda_norm = report.max_lambda_norm.max(norm);
                    let cost = self.running_cost.eval(t, prefix, u);
                    if !cost.is_finite() {
                        return Err(Error::InvalidModel(format!(
                            "running cost non-finite at t = {t}, u = {u}"
                        )));
                    }
                }
                let rate = self.discount_rate.eval(t, prefix);
                if rate < self.discount_floor - 1e-12 {
                    return Err(Error::InvalidModel(format!(
                        "discount rate {rate} below declared floor {}",
                        self.discount_floor
                    )));
                }
                report.min_discount_rate = report.min_discount_rate.min(rate);
            }
        }
        Ok(report)
    }
}

/// The quadratic benchmark: unit volatility, drift loading `u`, cost `u^2/2`,
/// no discounting, identity utility, actions on `[-2, 2]`.
pub fn quadratic_benchmark(horizon: f64) -> ModelSpec {
    ModelSpec {
        state_dim: 1,
        noise_dim: 1,
        horizon,
        x0: DVector::zeros(1),
        volatility: Arc::new(ConstVolatility(DMatrix::identity(1, 1))),
        drift_loading: Arc::new(LinearDriftLoading { direction: vec![1.0] }),
        running_cost: Arc::new(QuadraticCost(0.5)),
        discount_rate: Arc::new(ConstDiscount(0.0)),
        utility: AgentUtility::Identity,
        action_grid: ModelSpec::uniform_actions(-2.0, 2.0, 41),
        sigma_bound: 1.0 + 1e-9,
        lambda_bound: 2.0 + 1e-9,
        discount_floor: 0.0,
    }
}
