//! Hamiltonian maximisation, best responses, discounted valuation, and the
//! statistical incentive-compatibility verifier.

use nalgebra::DMatrix;
use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array4, Axis};
use std::sync::Arc;

use crate::dynamics::{ControlField, GirsanovWeights, StatePaths};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{ModelSpec, PathPrefix};
use crate::stats::Estimate;

/// How the pointwise maximiser is computed.
#[derive(Clone)]
pub enum MaximizerMode {
    /// Exhaustive search over the model's action grid; ties break to the
    /// lowest index, so results are reproducible.
    GridArgmax,
    /// User-supplied closed form `(t, x, y, w) -> (value, action)` where `w`
    /// is the volatility-transposed sensitivity. Removes grid bias when an
    /// analytic maximiser is known.
    ClosedForm(Arc<dyn Fn(f64, PathPrefix<'_>, f64, &[f64]) -> (f64, f64) + Send + Sync>),
}

/// Hamiltonian of the effort problem:
/// `h(t,x,y,z,u) = loading(u) . (sigma^T z) - cost(u) - rate * y`,
/// maximised over admissible actions.
#[derive(Clone)]
pub struct HamiltonianSpec {
    pub model: Arc<ModelSpec>,
    pub maximizer: MaximizerMode,
}

/// Per-(t, x) table of loadings and costs over the action grid, reused across
/// cells so the argmax stays cheap in the inner loops.
pub struct ActionTable {
    n_actions: usize,
    noise_dim: usize,
    loadings: Vec<f64>,
    costs: Vec<f64>,
}

impl ActionTable {
    pub fn new(model: &ModelSpec) -> Self {
        let n_actions = model.action_grid.len();
        ActionTable {
            n_actions,
            noise_dim: model.noise_dim,
            loadings: vec![0.0; n_actions * model.noise_dim],
            costs: vec![0.0; n_actions],
        }
    }

    pub fn fill(&mut self, model: &ModelSpec, t: f64, x: PathPrefix<'_>) {
        for (a, &u) in model.action_grid.iter().enumerate() {
            let slot = &mut self.loadings[a * self.noise_dim..(a + 1) * self.noise_dim];
            model.drift_loading.eval_into(t, x, u, slot);
            self.costs[a] = model.running_cost.eval(t, x, u);
        }
    }

    /// Maximise `loading . w - cost - discount_term` over the grid.
    /// Returns `(value, action index)`; ties break to the lowest index.
    pub fn argmax(&self, w: &[f64], discount_term: f64) -> (f64, usize) {
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for a in 0..self.n_actions {
            let row = &self.loadings[a * self.noise_dim..(a + 1) * self.noise_dim];
            let mut h = -self.costs[a] - discount_term;
            for c in 0..self.noise_dim {
                h += row[c] * w[c];
            }
            if h > best {
                best = h;
                best_idx = a;
            }
        }
        (best, best_idx)
    }

    /// Value of a specific grid action under the same objective.
    pub fn value_at(&self, a: usize, w: &[f64], discount_term: f64) -> f64 {
        let row = &self.loadings[a * self.noise_dim..(a + 1) * self.noise_dim];
        let mut h = -self.costs[a] - discount_term;
        for c in 0..self.noise_dim {
            h += row[c] * w[c];
        }
        h
    }
}

impl HamiltonianSpec {
    pub fn grid(model: Arc<ModelSpec>) -> Result<Self> {
        if model.action_grid.is_empty() {
            return Err(Error::InvalidModel("action grid is empty".into()));
        }
        Ok(HamiltonianSpec {
            model,
            maximizer: MaximizerMode::GridArgmax,
        })
    }

    /// Evaluate the maximised Hamiltonian and the maximising action at
    /// `(t, x, y, z)` with the sensitivity given in state coordinates.
    pub fn hamiltonian(&self, t: f64, x: PathPrefix<'_>, y: f64, z: &[f64]) -> Result<(f64, f64)> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite sensitivity".into()));
        }
        let model = &self.model;
        let mut sigma = DMatrix::zeros(model.state_dim, model.noise_dim);
        model.sigma_at(t, x, &mut sigma)?;
        let mut w = vec![0.0; model.noise_dim];
        for c in 0..model.noise_dim {
            for r in 0..model.state_dim {
                w[c] += sigma[(r, c)] * z[r];
            }
        }
        Ok(self.hamiltonian_with_w(t, x, y, &w))
    }

    /// Same, with `w = sigma^T z` already computed.
    pub fn hamiltonian_with_w(&self, t: f64, x: PathPrefix<'_>, y: f64, w: &[f64]) -> (f64, f64) {
        match &self.maximizer {
            MaximizerMode::GridArgmax => {
                let model = &self.model;
                let rate = model.discount_rate.eval(t, x);
                let mut table = ActionTable::new(model);
                table.fill(model, t, x);
                let (h, idx) = table.argmax(w, rate * y);
                (h, model.action_grid[idx])
            }
            MaximizerMode::ClosedForm(f) => f(t, x, y, w),
        }
    }

    /// Minimal running cost, recovered from the maximised Hamiltonian at
    /// zero sensitivity and zero utility level.
    pub fn min_cost(&self, t: f64, x: PathPrefix<'_>) -> Result<f64> {
        let z = vec![0.0; self.model.state_dim];
        Ok(-self.hamiltonian(t, x, 0.0, &z)?.0)
    }
}

/// Pointwise best response to a tabulated contract: for every
/// `(path, step, cell)` the action maximising the Hamiltonian at the cell's
/// sensitivity. A cell-constant sensitivity yields a cell-constant response.
pub fn best_response(
    spec: &HamiltonianSpec,
    x: &StatePaths,
    y_path: &Array2<f64>,
    z_field: &Array4<f64>,
) -> Result<ControlField> {
    let model = &spec.model;
    let (n_paths, n_steps, n_cells, zd) = z_field.dim();
    if zd != model.state_dim {
        return Err(Error::GridMismatch("sensitivity dimension mismatch".into()));
    }
    if y_path.dim() != (n_paths, n_steps + 1) {
        return Err(Error::GridMismatch("value path shape mismatch".into()));
    }
    let tg = x.driven_by.tg;
    let (d, k) = (model.state_dim, model.noise_dim);
    let mut out = Array2::zeros((n_paths, n_steps * n_cells));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut row)| {
            let mut sigma = DMatrix::zeros(d, k);
            let mut table = ActionTable::new(model);
            let mut w = vec![0.0; k];
            for i in 0..n_steps {
                let t = tg.t(i);
                let prefix = x.prefix(p, i);
                model.sigma_at(t, prefix, &mut sigma).expect("sigma eval");
                let rate = model.discount_rate.eval(t, prefix);
                let y = y_path[[p, i]];
                match &spec.maximizer {
                    MaximizerMode::GridArgmax => {
                        table.fill(model, t, prefix);
                        for j in 0..n_cells {
                            for c in 0..k {
                                w[c] = 0.0;
                                for r in 0..d {
                                    w[c] += sigma[(r, c)] * z_field[[p, i, j, r]];
                                }
                            }
                            let (_, idx) = table.argmax(&w, rate * y);
                            row[i * n_cells + j] = model.action_grid[idx];
                        }
                    }
                    MaximizerMode::ClosedForm(f) => {
                        for j in 0..n_cells {
                            for c in 0..k {
                                w[c] = 0.0;
                                for r in 0..d {
                                    w[c] += sigma[(r, c)] * z_field[[p, i, j, r]];
                                }
                            }
                            let (_, u) = f(t, prefix, y, &w);
                            row[i * n_cells + j] = u;
                        }
                    }
                }
            }
        });
    Ok(out
        .into_shape_with_order((n_paths, n_steps, n_cells))
        .expect("reshape"))
}

/// Discount factor along each path, `K_0 = 1`, left Riemann accumulation.
#[derive(Debug, Clone)]
pub struct DiscountPath {
    /// Indexed `(path, step + 1)`.
    pub factor: Array2<f64>,
}

pub fn discount_path(model: &ModelSpec, x: &StatePaths, tg: &TimeGrid) -> DiscountPath {
    let (n_paths, n_points, _) = x.x.dim();
    let n_steps = n_points - 1;
    let dt = tg.dt();
    let mut factor = Array2::zeros((n_paths, n_steps + 1));
    for p in 0..n_paths {
        factor[[p, 0]] = 1.0;
        let mut acc = 0.0;
        for i in 0..n_steps {
            acc += model.discount_rate.eval(tg.t(i), x.prefix(p, i)) * dt;
            factor[[p, i + 1]] = (-acc).exp();
        }
    }
    DiscountPath { factor }
}

/// How a controlled-measure expectation is taken.
pub enum ValuationRoute<'a> {
    /// Likelihood-ratio reweighting on a reference ensemble.
    Reweighted(&'a GirsanovWeights),
    /// The ensemble was simulated directly under the controlled measure.
    Direct,
}

/// Expected discounted utility of a payment under a given response:
/// `E[ K_T U_a(payment) - int K cost d(control intensity) ]` under the
/// controlled measure.
pub fn agent_value(
    model: &ModelSpec,
    payment: &[f64],
    control: &ControlField,
    x: &StatePaths,
    route: ValuationRoute<'_>,
) -> Result<Estimate> {
    let noise = &x.driven_by;
    let tg = noise.tg;
    let (n_paths, n_steps, n_cells) = control.dim();
    if payment.len() != n_paths {
        return Err(Error::GridMismatch("payment length mismatch".into()));
    }
    let discount = discount_path(model, x, &tg);
    let dt = tg.dt();

    let mut bad_paths = Vec::new();
    let mut samples = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let terminal_utility = model.utility.eval(payment[p]);
        if !terminal_utility.is_finite() {
            bad_paths.push(p);
            continue;
        }
        let mut cost_acc = 0.0;
        for i in 0..n_steps {
            let t = tg.t(i);
            let prefix = x.prefix(p, i);
            let k_i = discount.factor[[p, i]];
            for j in 0..n_cells {
                cost_acc += k_i
                    * model.running_cost.eval(t, prefix, control[[p, i, j]])
                    * noise.grid.mass(j)
                    * dt;
            }
        }
        let v = discount.factor[[p, n_steps]] * terminal_utility - cost_acc;
        let weighted = match route {
            ValuationRoute::Reweighted(w) => v * w.terminal_density(p),
            ValuationRoute::Direct => v,
        };
        samples.push(weighted);
    }
    if !bad_paths.is_empty() {
        return Err(Error::Valuation {
            count: bad_paths.len(),
            first: bad_paths[0],
        });
    }
    Ok(Estimate::from_samples(&samples))
}

/// Drift of the candidate value-minus-cost process over a probe interval.
#[derive(Debug, Clone)]
pub struct DriftInterval {
    pub s: f64,
    pub t: f64,
    /// Drift per unit time under the controlled measure.
    pub drift: Estimate,
}

#[derive(Debug, Clone)]
pub struct MartingaleReport {
    pub intervals: Vec<DriftInterval>,
}

impl MartingaleReport {
    /// All interval drifts within `n_se` standard errors of zero.
    pub fn all_within(&self, n_se: f64) -> bool {
        self.intervals.iter().all(|iv| iv.drift.within(0.0, n_se))
    }

    /// Every interval drift bounded above by `n_se` standard errors
    /// (the one-sided check for suboptimal responses).
    pub fn none_above(&self, n_se: f64) -> bool {
        self.intervals
            .iter()
            .all(|iv| iv.drift.value <= n_se * iv.drift.se)
    }

    /// At least one interval with drift below `-n_se` standard errors.
    pub fn some_below(&self, n_se: f64) -> bool {
        self.intervals
            .iter()
            .any(|iv| iv.drift.value < -n_se * iv.drift.se)
    }
}

/// Interval drifts of `R_t = K_t Y_t - int_0^t K cost d(control intensity)`
/// under the measure of `control`, estimated by likelihood-ratio reweighting
/// on the reference ensemble carrying the contract.
///
/// For a best response the process is a martingale (all drifts compatible
/// with zero); for any other response it is a supermartingale.
pub fn verify_value_martingale(
    model: &ModelSpec,
    y_path: &Array2<f64>,
    control: &ControlField,
    x: &StatePaths,
    weights: &GirsanovWeights,
    probes: &[(f64, f64)],
) -> Result<MartingaleReport> {
    let noise = &x.driven_by;
    let tg = noise.tg;
    let (n_paths, n_steps, n_cells) = control.dim();
    if y_path.dim() != (n_paths, n_steps + 1) {
        return Err(Error::GridMismatch("value path shape mismatch".into()));
    }
    let discount = discount_path(model, x, &tg);
    let dt = tg.dt();

    // R along each path
    let mut r = Array2::zeros((n_paths, n_steps + 1));
    for p in 0..n_paths {
        let mut cost_acc = 0.0;
        r[[p, 0]] = y_path[[p, 0]];
        for i in 0..n_steps {
            let t = tg.t(i);
            let prefix = x.prefix(p, i);
            let k_i = discount.factor[[p, i]];
            for j in 0..n_cells {
                cost_acc += k_i
                    * model.running_cost.eval(t, prefix, control[[p, i, j]])
                    * noise.grid.mass(j)
                    * dt;
            }
            r[[p, i + 1]] = discount.factor[[p, i + 1]] * y_path[[p, i + 1]] - cost_acc;
        }
    }

    let mut intervals = Vec::with_capacity(probes.len());
    for &(s, t) in probes {
        if !(0.0..=tg.horizon()).contains(&s) || !(s < t && t <= tg.horizon()) {
            return Err(Error::InvalidArgument(format!(
                "bad probe interval ({s}, {t})"
            )));
        }
        let si = tg.index_at(s);
        let ti = tg.index_at(t);
        let span = tg.t(ti) - tg.t(si);
        let samples: Vec<f64> = (0..n_paths)
            .map(|p| weights.terminal_density(p) * (r[[p, ti]] - r[[p, si]]) / span)
            .collect();
        intervals.push(DriftInterval {
            s,
            t,
            drift: Estimate::from_samples(&samples),
        });
    }
    Ok(MartingaleReport { intervals })
}
