//! Contract generation from an initial utility and a sensitivity policy,
//! the principal's constrained objective, and a derivative-free search over
//! policy parameters.
//!
//! A sensitivity policy assigns one branch map per block of grid cells; the
//! branch weights are the summed cell masses, so a randomised policy is the
//! exact finite-atom image of the reference intensity. Generating a contract
//! integrates the value process forward with the maximised Hamiltonian as
//! drift; simulating the agent's best response tilts the state dynamics with
//! the per-branch maximising actions.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::agent::{ActionTable, HamiltonianSpec, MaximizerMode};
use crate::dynamics::{ControlField, MeasureTag, StatePaths};
use crate::error::{Error, Result};
use crate::grid::{IntensityGrid, TimeGrid};
use crate::measure::simulate_base_measure;
use crate::model::{ModelSpec, PathPrefix};
use crate::rng::{standard_normal, Stream};
use crate::stats::Estimate;

/// One branch of a sensitivity policy: a parameterised feedback map
/// `(theta, t, x_t, y) -> z`.
pub trait BranchMap: Send + Sync {
    fn eval_into(&self, theta: &[f64], t: f64, x_t: &[f64], y: f64, out: &mut [f64]);
}

/// Branch reading consecutive parameters as a constant sensitivity.
pub struct ConstantBranch {
    pub offset: usize,
}
impl BranchMap for ConstantBranch {
    fn eval_into(&self, theta: &[f64], _t: f64, _x: &[f64], _y: f64, out: &mut [f64]) {
        out.copy_from_slice(&theta[self.offset..self.offset + out.len()]);
    }
}

/// Branch `z_r = theta[0] + theta[1] * x_r + theta[2] * y` per coordinate,
/// reading three parameters per state dimension.
pub struct AffineBranch {
    pub offset: usize,
}
impl BranchMap for AffineBranch {
    fn eval_into(&self, theta: &[f64], _t: f64, x: &[f64], y: f64, out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let base = self.offset + 3 * r;
            *o = theta[base] + theta[base + 1] * x[r] + theta[base + 2] * y;
        }
    }
}

/// Sensitivity policy: one branch per block of grid cells. A single branch
/// is an ordinary feedback policy; several branches randomise the contract
/// across the cell partition.
#[derive(Clone)]
pub struct ZPolicy {
    pub branches: Vec<Arc<dyn BranchMap>>,
    pub theta: Vec<f64>,
}

impl ZPolicy {
    pub fn deterministic(branch: Arc<dyn BranchMap>, theta: Vec<f64>) -> Self {
        ZPolicy {
            branches: vec![branch],
            theta,
        }
    }

    pub fn constant(z: Vec<f64>) -> Self {
        ZPolicy::deterministic(Arc::new(ConstantBranch { offset: 0 }), z)
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }
}

/// Contiguous assignment of cells to branches, as equal as possible.
pub fn cell_partition(n_cells: usize, n_branches: usize) -> Result<Vec<usize>> {
    if n_branches == 0 || n_branches > n_cells {
        return Err(Error::InvalidArgument(format!(
            "branch count {n_branches} must lie in 1..={n_cells}"
        )));
    }
    Ok((0..n_cells).map(|j| j * n_branches / n_cells).collect())
}

fn branch_weights(grid: &IntensityGrid, cell_to_branch: &[usize], n_branches: usize) -> Vec<f64> {
    let mut w = vec![0.0; n_branches];
    for (j, &g) in cell_to_branch.iter().enumerate() {
        w[g] += grid.mass(j);
    }
    w
}

/// Orthogonal channel policy. The independent-noise variant integrates a
/// feedback amplitude against an auxiliary Brownian channel drawn from a
/// stream disjoint from the base measure.
#[derive(Clone)]
pub enum LPolicy {
    Zero,
    IndependentNoise {
        amplitude: Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>,
    },
}

impl LPolicy {
    pub fn constant_noise(c: f64) -> Self {
        LPolicy::IndependentNoise {
            amplitude: Arc::new(move |_t, _x, _y| c),
        }
    }
}

/// Initial promised utility: a scalar, or an independent draw when the
/// ambient information at time zero is non-trivial.
#[derive(Clone, Copy, Debug)]
pub enum InitialUtility {
    Fixed(f64),
    IndependentDraw { mean: f64, std: f64 },
}

impl InitialUtility {
    pub fn mean(&self) -> f64 {
        match *self {
            InitialUtility::Fixed(v) => v,
            InitialUtility::IndependentDraw { mean, .. } => mean,
        }
    }

    fn draw(&self, seed: u64, path: u64) -> f64 {
        match *self {
            InitialUtility::Fixed(v) => v,
            InitialUtility::IndependentDraw { mean, std } => {
                mean + std * standard_normal(seed, Stream::InitialDraw, path, 0, 0, 0)
            }
        }
    }
}

/// Terminal objective of the principal.
pub trait PrincipalObjective: Send + Sync {
    fn eval(&self, x: PathPrefix<'_>, payment: f64) -> f64;
}

pub struct ObjectiveFn<F>(pub F);
impl<F: Fn(PathPrefix<'_>, f64) -> f64 + Send + Sync> PrincipalObjective for ObjectiveFn<F> {
    fn eval(&self, x: PathPrefix<'_>, payment: f64) -> f64 {
        (self.0)(x, payment)
    }
}

/// Terminal-state-minus-payment objective.
pub struct TerminalMinusPayment;
impl PrincipalObjective for TerminalMinusPayment {
    fn eval(&self, x: PathPrefix<'_>, payment: f64) -> f64 {
        x.current()[0] - payment
    }
}

/// A constraint `E[g(X, payment)] <= 0`; hard constraints score the
/// violation indicator, so the estimate is a violation probability.
#[derive(Clone)]
pub struct Constraint {
    pub name: String,
    pub kind: ConstraintKind,
}

#[derive(Clone)]
pub enum ConstraintKind {
    Expectation(Arc<dyn Fn(PathPrefix<'_>, f64) -> f64 + Send + Sync>),
    Hard(Arc<dyn Fn(PathPrefix<'_>, f64) -> bool + Send + Sync>),
}

impl Constraint {
    /// `payment >= 0`, as a violation probability.
    pub fn nonnegative_payment() -> Self {
        Constraint {
            name: "payment_nonnegative".into(),
            kind: ConstraintKind::Hard(Arc::new(|_x, c| c >= 0.0)),
        }
    }

    /// `payment <= cap(X)`, as a violation probability.
    pub fn payment_cap(name: &str, cap: Arc<dyn Fn(PathPrefix<'_>) -> f64 + Send + Sync>) -> Self {
        Constraint {
            name: name.into(),
            kind: ConstraintKind::Hard(Arc::new(move |x, c| c <= cap(x))),
        }
    }
}

/// The principal's problem data.
#[derive(Clone)]
pub struct PrincipalSpec {
    pub objective: Arc<dyn PrincipalObjective>,
    pub reservation: f64,
    pub constraints: Vec<Constraint>,
    /// Moment exponents and cap for the diagnostics set.
    pub q: f64,
    pub q_prime: f64,
    pub moment_cap: f64,
    pub penalty_schedule: Vec<f64>,
    /// Largest tolerated fraction of paths with the terminal value outside
    /// the utility range.
    pub range_tolerance: f64,
}

impl PrincipalSpec {
    pub fn unconstrained(objective: Arc<dyn PrincipalObjective>, reservation: f64) -> Self {
        PrincipalSpec {
            objective,
            reservation,
            constraints: Vec::new(),
            q: 2.0,
            q_prime: 4.0,
            moment_cap: 100.0,
            penalty_schedule: vec![10.0, 100.0, 1000.0],
            range_tolerance: 0.0,
        }
    }
}

/// A contract realised on an ensemble: the value path, the orthogonal
/// channel, realised branch sensitivities and actions, and the terminal
/// payment where the utility range admits one.
pub struct SimulatedContract {
    pub x: StatePaths,
    /// Value path, indexed `(path, step + 1)`.
    pub y: Array2<f64>,
    pub y0_draws: Vec<f64>,
    pub l_increments: Array2<f64>,
    /// Realised sensitivities, indexed `(path, step, branch, state dim)`.
    pub branch_z: Array4<f64>,
    /// Maximising action per branch, indexed `(path, step, branch)`.
    pub branch_actions: Array3<f64>,
    pub branch_weights: Vec<f64>,
    pub cell_to_branch: Vec<usize>,
    /// Terminal payment; `NaN` on paths where the terminal value leaves the
    /// utility range.
    pub xi: Vec<f64>,
    pub in_range: Vec<bool>,
    pub out_of_range_fraction: f64,
}

impl SimulatedContract {
    pub fn n_paths(&self) -> usize {
        self.y.dim().0
    }

    /// Expand branch actions to a cell-wise control field.
    pub fn control_field(&self) -> ControlField {
        let (n_paths, n_steps, _) = self.branch_actions.dim();
        let n_cells = self.cell_to_branch.len();
        let mut out = Array3::zeros((n_paths, n_steps, n_cells));
        for p in 0..n_paths {
            for i in 0..n_steps {
                for (j, &g) in self.cell_to_branch.iter().enumerate() {
                    out[[p, i, j]] = self.branch_actions[[p, i, g]];
                }
            }
        }
        out
    }

    /// Expand branch sensitivities to a cell-wise field.
    pub fn z_field(&self) -> Array4<f64> {
        let (n_paths, n_steps, _, d) = self.branch_z.dim();
        let n_cells = self.cell_to_branch.len();
        let mut out = Array4::zeros((n_paths, n_steps, n_cells, d));
        for p in 0..n_paths {
            for i in 0..n_steps {
                for (j, &g) in self.cell_to_branch.iter().enumerate() {
                    for r in 0..d {
                        out[[p, i, j, r]] = self.branch_z[[p, i, g, r]];
                    }
                }
            }
        }
        out
    }
}

struct StepEval {
    sigma: DMatrix<f64>,
    table: ActionTable,
    z: Vec<f64>,
    w: Vec<f64>,
}

impl StepEval {
    fn new(model: &ModelSpec) -> Self {
        StepEval {
            sigma: DMatrix::zeros(model.state_dim, model.noise_dim),
            table: ActionTable::new(model),
            z: vec![0.0; model.state_dim],
            w: vec![0.0; model.noise_dim],
        }
    }
}

/// Per-step policy evaluation shared by both simulators: sensitivity,
/// volatility-transposed sensitivity, maximised Hamiltonian and action for
/// every branch.
#[allow(clippy::too_many_arguments)]
fn eval_branches(
    ham: &HamiltonianSpec,
    policy: &ZPolicy,
    t: f64,
    prefix: PathPrefix<'_>,
    y: f64,
    ev: &mut StepEval,
    branch_z: &mut [f64],
    branch_w: &mut [f64],
    branch_h: &mut [f64],
    branch_u: &mut [f64],
) -> Result<()> {
    let model = &ham.model;
    let (d, k) = (model.state_dim, model.noise_dim);
    model.sigma_at(t, prefix, &mut ev.sigma)?;
    let rate = model.discount_rate.eval(t, prefix);
    let x_t: Vec<f64> = prefix.current().iter().copied().collect();
    if matches!(ham.maximizer, MaximizerMode::GridArgmax) {
        ev.table.fill(model, t, prefix);
    }
    for (g, branch) in policy.branches.iter().enumerate() {
        branch.eval_into(&policy.theta, t, &x_t, y, &mut ev.z);
        for c in 0..k {
            ev.w[c] = 0.0;
            for r in 0..d {
                ev.w[c] += ev.sigma[(r, c)] * ev.z[r];
            }
        }
        branch_z[g * d..(g + 1) * d].copy_from_slice(&ev.z);
        branch_w[g * k..(g + 1) * k].copy_from_slice(&ev.w);
        match &ham.maximizer {
            MaximizerMode::GridArgmax => {
                let (h, idx) = ev.table.argmax(&ev.w, rate * y);
                branch_h[g] = h;
                branch_u[g] = model.action_grid[idx];
            }
            MaximizerMode::ClosedForm(f) => {
                let (h, u) = f(t, prefix, y, &ev.w);
                branch_h[g] = h;
                branch_u[g] = u;
            }
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn orthogonal_increment(
    l_policy: &LPolicy,
    t: f64,
    x_t: &[f64],
    y: f64,
    seed: u64,
    path: u64,
    step: u64,
    sqrt_dt: f64,
) -> f64 {
    match l_policy {
        LPolicy::Zero => 0.0,
        LPolicy::IndependentNoise { amplitude } => {
            amplitude(t, x_t, y)
                * sqrt_dt
                * standard_normal(seed, Stream::Orthogonal, path, step, 0, 0)
        }
    }
}

/// Integrate the value process forward on a reference ensemble: drift is
/// minus the branch-averaged maximised Hamiltonian, the diffusion term
/// couples each branch's sensitivity to its cells' noise, and the orthogonal
/// channel adds its own increments. The terminal payment is the utility
/// inverse of the terminal value.
pub fn generate_contract(
    ham: &HamiltonianSpec,
    spec: &PrincipalSpec,
    y0: InitialUtility,
    z_policy: &ZPolicy,
    l_policy: &LPolicy,
    x: &StatePaths,
) -> Result<SimulatedContract> {
    if x.measure != MeasureTag::Reference {
        return Err(Error::InvalidArgument(
            "contract generation requires a reference ensemble".into(),
        ));
    }
    if y0.mean() < spec.reservation - 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "initial utility {} below the reservation level {}",
            y0.mean(),
            spec.reservation
        )));
    }
    let model = &ham.model;
    let noise = Arc::clone(&x.driven_by);
    let tg = noise.tg;
    let n_paths = noise.n_paths;
    let n_steps = tg.n_steps();
    let n_cells = noise.grid.n_cells();
    let n_branches = z_policy.n_branches();
    let cell_to_branch = cell_partition(n_cells, n_branches)?;
    let weights = branch_weights(&noise.grid, &cell_to_branch, n_branches);
    let (d, k) = (model.state_dim, model.noise_dim);
    let dt = tg.dt();
    let sqrt_dt = dt.sqrt();

    let mut y = Array2::zeros((n_paths, n_steps + 1));
    let mut l_increments = Array2::zeros((n_paths, n_steps));
    let mut branch_z = Array4::zeros((n_paths, n_steps, n_branches, d));
    let mut branch_actions = Array3::zeros((n_paths, n_steps, n_branches));

    let first_error = std::sync::Mutex::new(None);
    ndarray::Zip::indexed(y.rows_mut())
        .and(l_increments.rows_mut())
        .and(branch_z.axis_iter_mut(ndarray::Axis(0)))
        .and(branch_actions.axis_iter_mut(ndarray::Axis(0)))
        .par_for_each(|p, mut y_row, mut l_row, mut bz_block, mut ba_block| {
            let mut ev = StepEval::new(model);
            let mut bz = vec![0.0; n_branches * d];
            let mut bw = vec![0.0; n_branches * k];
            let mut bh = vec![0.0; n_branches];
            let mut bu = vec![0.0; n_branches];
            let mut body = || -> Result<()> {
                y_row[0] = y0.draw(noise.seed, p as u64);
                for i in 0..n_steps {
                    let t = tg.t(i);
                    let prefix = x.prefix(p, i);
                    let y_cur = y_row[i];
                    eval_branches(
                        ham, z_policy, t, prefix, y_cur, &mut ev, &mut bz, &mut bw, &mut bh,
                        &mut bu,
                    )?;
                    let mut drift = 0.0;
                    for g in 0..n_branches {
                        drift -= bh[g] * weights[g];
                    }
                    let mut diffusion = 0.0;
                    for (j, &g) in cell_to_branch.iter().enumerate() {
                        for c in 0..k {
                            diffusion += bw[g * k + c] * noise.increments[[p, i, j, c]];
                        }
                    }
                    let x_t: Vec<f64> = prefix.current().iter().copied().collect();
                    let dl = orthogonal_increment(
                        l_policy,
                        t,
                        &x_t,
                        y_cur,
                        noise.seed,
                        p as u64,
                        i as u64,
                        sqrt_dt,
                    );
                    l_row[i] = dl;
                    let next = y_cur + drift * dt + diffusion + dl;
                    if !next.is_finite() {
                        return Err(Error::SimulationFailure {
                            path: p,
                            step: i,
                            reason: "non-finite value process".into(),
                        });
                    }
                    y_row[i + 1] = next;
                    for g in 0..n_branches {
                        ba_block[[i, g]] = bu[g];
                        for r in 0..d {
                            bz_block[[i, g, r]] = bz[g * d + r];
                        }
                    }
                }
                Ok(())
            };
            if let Err(e) = body() {
                first_error.lock().unwrap().get_or_insert(e);
            }
        });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let y0_draws: Vec<f64> = (0..n_paths).map(|p| y[[p, 0]]).collect();

    finish_contract(
        model,
        spec,
        x.clone(),
        y,
        y0_draws,
        l_increments,
        branch_z,
        branch_actions,
        weights,
        cell_to_branch,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_contract(
    model: &ModelSpec,
    spec: &PrincipalSpec,
    x: StatePaths,
    y: Array2<f64>,
    y0_draws: Vec<f64>,
    l_increments: Array2<f64>,
    branch_z: Array4<f64>,
    branch_actions: Array3<f64>,
    branch_weights: Vec<f64>,
    cell_to_branch: Vec<usize>,
) -> Result<SimulatedContract> {
    let (n_paths, n_points) = y.dim();
    let mut xi = vec![f64::NAN; n_paths];
    let mut in_range = vec![false; n_paths];
    let mut out_count = 0usize;
    for p in 0..n_paths {
        match model.utility.inverse(y[[p, n_points - 1]]) {
            Some(pay) => {
                xi[p] = pay;
                in_range[p] = true;
            }
            None => out_count += 1,
        }
    }
    let fraction = out_count as f64 / n_paths as f64;
    if fraction > spec.range_tolerance {
        return Err(Error::UtilityRange {
            fraction,
            allowed: spec.range_tolerance,
        });
    }
    Ok(SimulatedContract {
        x,
        y,
        y0_draws,
        l_increments,
        branch_z,
        branch_actions,
        branch_weights,
        cell_to_branch,
        xi,
        in_range,
        out_of_range_fraction: fraction,
    })
}

/// Joint simulation of state and value under the agent's best response: the
/// state picks up the branch-averaged tilted drift, the value process runs
/// with cost-plus-discount drift against the same tilted noise.
#[allow(clippy::too_many_arguments)]
pub fn simulate_best_response(
    ham: &HamiltonianSpec,
    spec: &PrincipalSpec,
    y0: InitialUtility,
    z_policy: &ZPolicy,
    l_policy: &LPolicy,
    grid: &IntensityGrid,
    tg: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<SimulatedContract> {
    let model = &ham.model;
    if y0.mean() < spec.reservation - 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "initial utility {} below the reservation level {}",
            y0.mean(),
            spec.reservation
        )));
    }
    let noise = Arc::new(simulate_base_measure(
        grid,
        tg,
        model.noise_dim,
        n_paths,
        seed,
        Stream::Base,
    )?);
    let n_steps = tg.n_steps();
    let n_cells = grid.n_cells();
    let n_branches = z_policy.n_branches();
    let cell_to_branch = cell_partition(n_cells, n_branches)?;
    let weights = branch_weights(grid, &cell_to_branch, n_branches);
    let (d, k) = (model.state_dim, model.noise_dim);
    let dt = tg.dt();
    let sqrt_dt = dt.sqrt();

    let mut x_arr = Array3::zeros((n_paths, n_steps + 1, d));
    let mut y = Array2::zeros((n_paths, n_steps + 1));
    let mut l_increments = Array2::zeros((n_paths, n_steps));
    let mut branch_z = Array4::zeros((n_paths, n_steps, n_branches, d));
    let mut branch_actions = Array3::zeros((n_paths, n_steps, n_branches));

    let first_error = std::sync::Mutex::new(None);
    ndarray::Zip::indexed(x_arr.axis_iter_mut(ndarray::Axis(0)))
        .and(y.rows_mut())
        .and(l_increments.rows_mut())
        .and(branch_z.axis_iter_mut(ndarray::Axis(0)))
        .and(branch_actions.axis_iter_mut(ndarray::Axis(0)))
        .par_for_each(
            |p, mut x_block, mut y_row, mut l_row, mut bz_block, mut ba_block| {
                let mut ev = StepEval::new(model);
                let mut bz = vec![0.0; n_branches * d];
                let mut bw = vec![0.0; n_branches * k];
                let mut bh = vec![0.0; n_branches];
                let mut bu = vec![0.0; n_branches];
                let mut bc = vec![0.0; n_branches];
                let mut loading = vec![0.0; k];
                let mut branch_agg = vec![0.0; n_branches * k];
                let mut drift = vec![0.0; k];
                let mut x_t = vec![0.0; d];
                let mut body = || -> Result<()> {
                    for r in 0..d {
                        x_block[[0, r]] = model.x0[r];
                    }
                    y_row[0] = y0.draw(seed, p as u64);
                    for i in 0..n_steps {
                        let t = tg.t(i);
                        let y_cur = y_row[i];
                        // everything reading the prefix happens before the
                        // next state is written
                        let rate = {
                            let prefix = PathPrefix::new(x_block.slice(ndarray::s![..=i, ..]));
                            eval_branches(
                                ham, z_policy, t, prefix, y_cur, &mut ev, &mut bz, &mut bw,
                                &mut bh, &mut bu,
                            )?;
                            for v in drift.iter_mut() {
                                *v = 0.0;
                            }
                            for g in 0..n_branches {
                                model.drift_loading.eval_into(t, prefix, bu[g], &mut loading);
                                for c in 0..k {
                                    drift[c] += loading[c] * weights[g];
                                }
                            }
                            for (g, c) in bc.iter_mut().enumerate() {
                                *c = model.running_cost.eval(t, prefix, bu[g]);
                            }
                            for (r, v) in x_t.iter_mut().enumerate() {
                                *v = prefix.current()[r];
                            }
                            model.discount_rate.eval(t, prefix)
                        };

                        for v in branch_agg.iter_mut() {
                            *v = 0.0;
                        }
                        for (j, &g) in cell_to_branch.iter().enumerate() {
                            for c in 0..k {
                                branch_agg[g * k + c] += noise.increments[[p, i, j, c]];
                            }
                        }

                        // state: tilted drift from the maximising actions
                        for r in 0..d {
                            let mut next = x_block[[i, r]];
                            for c in 0..k {
                                let mut noise_sum = 0.0;
                                for g in 0..n_branches {
                                    noise_sum += branch_agg[g * k + c];
                                }
                                next += ev.sigma[(r, c)] * (drift[c] * dt + noise_sum);
                            }
                            if !next.is_finite() {
                                return Err(Error::SimulationFailure {
                                    path: p,
                                    step: i,
                                    reason: "non-finite state".into(),
                                });
                            }
                            x_block[[i + 1, r]] = next;
                        }

                        // value: cost-plus-discount drift, sensitivity noise
                        let mut y_drift = 0.0;
                        for g in 0..n_branches {
                            y_drift += (bc[g] + rate * y_cur) * weights[g];
                        }
                        let mut diffusion = 0.0;
                        for g in 0..n_branches {
                            for c in 0..k {
                                diffusion += bw[g * k + c] * branch_agg[g * k + c];
                            }
                        }
                        let dl = orthogonal_increment(
                            l_policy, t, &x_t, y_cur, seed, p as u64, i as u64, sqrt_dt,
                        );
                        l_row[i] = dl;
                        let next = y_cur + y_drift * dt + diffusion + dl;
                        if !next.is_finite() {
                            return Err(Error::SimulationFailure {
                                path: p,
                                step: i,
                                reason: "non-finite value process".into(),
                            });
                        }
                        y_row[i + 1] = next;
                        for g in 0..n_branches {
                            ba_block[[i, g]] = bu[g];
                            for r in 0..d {
                                bz_block[[i, g, r]] = bz[g * d + r];
                            }
                        }
                    }
                    Ok(())
                };
                if let Err(e) = body() {
                    first_error.lock().unwrap().get_or_insert(e);
                }
            },
        );
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let y0_draws: Vec<f64> = (0..n_paths).map(|p| y[[p, 0]]).collect();

    let x = StatePaths {
        x: x_arr,
        driven_by: noise,
        measure: MeasureTag::ControlledDirect,
    };
    finish_contract(
        model,
        spec,
        x,
        y,
        y0_draws,
        l_increments,
        branch_z,
        branch_actions,
        weights,
        cell_to_branch,
    )
}

/// Per-constraint estimate on a best-response ensemble.
pub fn evaluate_constraints(
    spec: &PrincipalSpec,
    contract: &SimulatedContract,
) -> Result<Vec<(String, Estimate)>> {
    if contract.x.measure != MeasureTag::ControlledDirect {
        return Err(Error::InvalidArgument(
            "constraint evaluation requires a best-response ensemble".into(),
        ));
    }
    let n_paths = contract.n_paths();
    let last = contract.y.dim().1 - 1;
    let mut out = Vec::with_capacity(spec.constraints.len());
    for c in &spec.constraints {
        let samples: Vec<f64> = (0..n_paths)
            .map(|p| {
                let prefix = contract.x.prefix(p, last);
                let pay = contract.xi[p];
                match &c.kind {
                    ConstraintKind::Expectation(g) => g(prefix, pay),
                    ConstraintKind::Hard(ok) => {
                        if contract.in_range[p] && ok(prefix, pay) {
                            0.0
                        } else {
                            1.0
                        }
                    }
                }
            })
            .collect();
        out.push((c.name.clone(), Estimate::from_samples(&samples)));
    }
    Ok(out)
}

/// Expected objective under the best response.
pub fn principal_value(spec: &PrincipalSpec, contract: &SimulatedContract) -> Result<Estimate> {
    if contract.x.measure != MeasureTag::ControlledDirect {
        return Err(Error::InvalidArgument(
            "the objective is an expectation under the best response".into(),
        ));
    }
    let n_paths = contract.n_paths();
    let last = contract.y.dim().1 - 1;
    let samples: Vec<f64> = (0..n_paths)
        .filter(|&p| contract.in_range[p])
        .map(|p| spec.objective.eval(contract.x.prefix(p, last), contract.xi[p]))
        .collect();
    if samples.is_empty() {
        return Err(Error::UtilityRange {
            fraction: 1.0,
            allowed: spec.range_tolerance,
        });
    }
    Ok(Estimate::from_samples(&samples))
}

/// Moments of the realised sensitivity field and of the terminal orthogonal
/// part, against the declared cap.
#[derive(Debug, Clone)]
pub struct MomentDiagnostics {
    /// `E[int sum_branches |z|^{2q} weight dt]`.
    pub z_moment: f64,
    /// `E[|U|^{q'}]` with `U` the discounted terminal orthogonal part.
    pub u_moment: f64,
    /// Membership verdict against the cap, when the exponents admit one.
    pub in_set: Option<bool>,
}

pub fn moment_diagnostics(
    model: &ModelSpec,
    contract: &SimulatedContract,
    q: f64,
    q_prime: f64,
    cap: f64,
) -> Result<MomentDiagnostics> {
    if q <= 1.0 || q_prime <= 1.0 {
        return Err(Error::InvalidArgument("exponents must exceed one".into()));
    }
    let (n_paths, n_steps, n_branches, d) = contract.branch_z.dim();
    let tg = contract.x.driven_by.tg;
    let horizon = tg.horizon();
    let discount = crate::agent::discount_path(model, &contract.x, &tg);

    let mut z_total = 0.0;
    let mut u_total = 0.0;
    for p in 0..n_paths {
        // time integral as horizon times the step average, exact for
        // step-constant integrands
        let mut step_sum = 0.0;
        for i in 0..n_steps {
            let mut at_step = 0.0;
            for g in 0..n_branches {
                let mut norm_sq = 0.0;
                for r in 0..d {
                    let v = contract.branch_z[[p, i, g, r]];
                    norm_sq += v * v;
                }
                at_step += norm_sq.powf(q) * contract.branch_weights[g];
            }
            step_sum += at_step;
        }
        z_total += horizon * (step_sum / n_steps as f64);

        let mut u = contract.y0_draws[p];
        for i in 0..n_steps {
            u += discount.factor[[p, i]] * contract.l_increments[[p, i]];
        }
        u_total += u.abs().powf(q_prime);
    }
    let z_moment = z_total / n_paths as f64;
    let u_moment = u_total / n_paths as f64;
    if !z_moment.is_finite() || !u_moment.is_finite() {
        return Err(Error::Moment(
            "non-finite sensitivity or terminal moment".into(),
        ));
    }
    let in_set = if 1.0 / q + 1.0 / q_prime < 1.0 {
        Some(z_moment + u_moment <= cap)
    } else {
        None
    };
    Ok(MomentDiagnostics {
        z_moment,
        u_moment,
        in_set,
    })
}

/// Parameter search space: a policy builder over a bounded parameter box,
/// plus the initial-utility interval.
#[derive(Clone)]
pub struct PolicySpace {
    pub build: Arc<dyn Fn(&[f64]) -> ZPolicy + Send + Sync>,
    pub theta_bounds: Vec<(f64, f64)>,
    pub y0_bounds: (f64, f64),
    pub l_policy: LPolicy,
}

impl PolicySpace {
    /// Constant sensitivity, one parameter per state dimension.
    pub fn constant(d: usize, lo: f64, hi: f64, y0_bounds: (f64, f64)) -> Self {
        PolicySpace {
            build: Arc::new(move |theta| ZPolicy::constant(theta.to_vec())),
            theta_bounds: vec![(lo, hi); d],
            y0_bounds,
            l_policy: LPolicy::Zero,
        }
    }

    /// Constant sensitivity per branch, `n_branches * d` parameters.
    pub fn randomized_constant(
        d: usize,
        n_branches: usize,
        lo: f64,
        hi: f64,
        y0_bounds: (f64, f64),
    ) -> Self {
        PolicySpace {
            build: Arc::new(move |theta| ZPolicy {
                branches: (0..n_branches)
                    .map(|g| Arc::new(ConstantBranch { offset: g * d }) as Arc<dyn BranchMap>)
                    .collect(),
                theta: theta.to_vec(),
            }),
            theta_bounds: vec![(lo, hi); n_branches * d],
            y0_bounds,
            l_policy: LPolicy::Zero,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeConfig {
    pub budget: usize,
    pub population: usize,
    pub elite: usize,
    pub smoothing: f64,
    pub n_paths: usize,
    pub validation_paths: usize,
    pub seed: u64,
    pub feasibility_tol: f64,
    /// Full parameter vectors `[y0, theta...]` evaluated alongside the
    /// search, e.g. the optimum of a smaller space embedded in this one.
    pub warm_starts: Vec<Vec<f64>>,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            budget: 320,
            population: 32,
            elite: 8,
            smoothing: 0.2,
            n_paths: 2_000,
            validation_paths: 10_000,
            seed: 1,
            feasibility_tol: 0.01,
            warm_starts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationRecord {
    pub generation: usize,
    pub penalty: f64,
    pub best_score: f64,
    pub mean_score: f64,
    pub best_value: f64,
    pub best_violation: f64,
}

#[derive(Debug, Clone)]
struct Candidate {
    params: Vec<f64>,
    value: f64,
    violations: Vec<f64>,
}

impl Candidate {
    fn score(&self, penalty: f64) -> f64 {
        let pen: f64 = self
            .violations
            .iter()
            .map(|&v| {
                let e = v.max(0.0);
                penalty * e * e
            })
            .sum();
        self.value - pen
    }

    fn max_violation(&self) -> f64 {
        self.violations.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub best_y0: f64,
    pub best_theta: Vec<f64>,
    pub value: Estimate,
    pub feasible: bool,
    pub constraint_report: Vec<(String, Estimate)>,
    pub history: Vec<GenerationRecord>,
    pub evaluations: usize,
}

/// Cross-entropy search over `(y0, theta)` with a quadratic penalty for
/// constraint violations and common random numbers across candidates.
/// Warm starts and the top-ranked candidates are re-validated on a fresh
/// ensemble; the best validated value among the feasible ones is returned,
/// so a warm start from an embedded search space can never be beaten by a
/// noisier candidate ranking.
pub fn optimize_principal(
    ham: &HamiltonianSpec,
    spec: &PrincipalSpec,
    space: &PolicySpace,
    grid: &IntensityGrid,
    tg: &TimeGrid,
    config: &OptimizeConfig,
) -> Result<OptimizeOutcome> {
    if config.budget < config.population {
        return Err(Error::InvalidArgument(
            "budget must cover at least one population".into(),
        ));
    }
    let mut bounds = vec![space.y0_bounds];
    bounds.extend_from_slice(&space.theta_bounds);
    // participation: never search below the reservation level
    bounds[0].0 = bounds[0].0.max(spec.reservation);
    bounds[0].1 = bounds[0].1.max(bounds[0].0);
    let n_dim = bounds.len();
    let degenerate = bounds.iter().all(|(lo, hi)| hi <= lo);

    let eval_seed = config
        .seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(17);
    let validation_seed = eval_seed ^ 0x5DEE_CE66_D121_F00D;

    let evaluate = |params: &[f64]| -> Result<Candidate> {
        let policy = (space.build)(&params[1..]);
        let contract = simulate_best_response(
            ham,
            spec,
            InitialUtility::Fixed(params[0]),
            &policy,
            &space.l_policy,
            grid,
            tg,
            config.n_paths,
            eval_seed,
        )?;
        let value = principal_value(spec, &contract)?.value;
        let violations = evaluate_constraints(spec, &contract)?
            .into_iter()
            .map(|(_, e)| e.value)
            .collect();
        Ok(Candidate {
            params: params.to_vec(),
            value,
            violations,
        })
    };

    let mut history = Vec::new();
    let mut all_candidates: Vec<Candidate> = Vec::new();
    let mut warm_indices: Vec<usize> = Vec::new();
    let mut evaluations = 0usize;
    let schedule = if spec.penalty_schedule.is_empty() {
        vec![0.0]
    } else {
        spec.penalty_schedule.clone()
    };
    let final_penalty = *schedule.last().unwrap();

    if degenerate {
        let params: Vec<f64> = bounds.iter().map(|&(lo, _)| lo).collect();
        let cand = evaluate(&params)?;
        evaluations = 1;
        history.push(GenerationRecord {
            generation: 0,
            penalty: final_penalty,
            best_score: cand.score(final_penalty),
            mean_score: cand.score(final_penalty),
            best_value: cand.value,
            best_violation: cand.max_violation(),
        });
        all_candidates.push(cand);
    } else {
        for start in &config.warm_starts {
            if start.len() != n_dim {
                return Err(Error::InvalidArgument(format!(
                    "warm start has {} parameters, expected {n_dim}",
                    start.len()
                )));
            }
            let clamped: Vec<f64> = start
                .iter()
                .zip(&bounds)
                .map(|(&v, &(lo, hi))| v.clamp(lo, hi))
                .collect();
            warm_indices.push(all_candidates.len());
            all_candidates.push(evaluate(&clamped)?);
            evaluations += 1;
        }
        let n_gens = (config.budget / config.population).max(1);
        let mut mean: Vec<f64> = bounds.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
        let mut std: Vec<f64> = bounds
            .iter()
            .map(|&(lo, hi)| ((hi - lo) / 3.0).max(1e-12))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for gen in 0..n_gens {
            let phase = (gen * schedule.len()) / n_gens;
            let penalty = schedule[phase.min(schedule.len() - 1)];
            let mut generation: Vec<Candidate> = Vec::with_capacity(config.population);
            for _ in 0..config.population {
                let params: Vec<f64> = (0..n_dim)
                    .map(|idx| {
                        let draw: f64 = rng.sample(rand_distr::StandardNormal);
                        (mean[idx] + std[idx] * draw).clamp(bounds[idx].0, bounds[idx].1)
                    })
                    .collect();
                generation.push(evaluate(&params)?);
                evaluations += 1;
            }
            let mut order: Vec<usize> = (0..generation.len()).collect();
            order.sort_by(|&a, &b| {
                generation[b]
                    .score(penalty)
                    .partial_cmp(&generation[a].score(penalty))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let elite_n = config.elite.min(generation.len());
            for idx in 0..n_dim {
                let e_mean = order[..elite_n]
                    .iter()
                    .map(|&c| generation[c].params[idx])
                    .sum::<f64>()
                    / elite_n as f64;
                let e_var = order[..elite_n]
                    .iter()
                    .map(|&c| {
                        let gap = generation[c].params[idx] - e_mean;
                        gap * gap
                    })
                    .sum::<f64>()
                    / elite_n as f64;
                mean[idx] = config.smoothing * mean[idx] + (1.0 - config.smoothing) * e_mean;
                std[idx] = (config.smoothing * std[idx] + (1.0 - config.smoothing) * e_var.sqrt())
                    .max(1e-9);
            }
            let best = &generation[order[0]];
            let mean_score = generation.iter().map(|c| c.score(penalty)).sum::<f64>()
                / generation.len() as f64;
            history.push(GenerationRecord {
                generation: gen,
                penalty,
                best_score: best.score(penalty),
                mean_score,
                best_value: best.value,
                best_violation: best.max_violation(),
            });
            all_candidates.extend(generation);
        }
    }

    // validate the top-ranked candidates plus every warm start on a fresh
    // ensemble and return the best value among the feasible ones
    let mut order: Vec<usize> = (0..all_candidates.len()).collect();
    order.sort_by(|&a, &b| {
        all_candidates[b]
            .score(final_penalty)
            .partial_cmp(&all_candidates[a].score(final_penalty))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut to_validate = warm_indices;
    for &idx in order.iter().take(10) {
        if !to_validate.contains(&idx) {
            to_validate.push(idx);
        }
    }
    let mut best_violation_seen = f64::INFINITY;
    let mut best: Option<OptimizeOutcome> = None;
    for idx in to_validate {
        let cand = &all_candidates[idx];
        let policy = (space.build)(&cand.params[1..]);
        let contract = simulate_best_response(
            ham,
            spec,
            InitialUtility::Fixed(cand.params[0]),
            &policy,
            &space.l_policy,
            grid,
            tg,
            config.validation_paths,
            validation_seed,
        )?;
        let report = evaluate_constraints(spec, &contract)?;
        let max_violation = report.iter().map(|(_, e)| e.value).fold(0.0f64, f64::max);
        best_violation_seen = best_violation_seen.min(max_violation);
        if max_violation <= config.feasibility_tol {
            let value = principal_value(spec, &contract)?;
            let better = match &best {
                Some(b) => value.value > b.value.value,
                None => true,
            };
            if better {
                best = Some(OptimizeOutcome {
                    best_y0: cand.params[0],
                    best_theta: cand.params[1..].to_vec(),
                    value,
                    feasible: true,
                    constraint_report: report,
                    history: Vec::new(),
                    evaluations,
                });
            }
        }
    }
    match best {
        Some(mut outcome) => {
            outcome.history = history;
            Ok(outcome)
        }
        None => Err(Error::Infeasible {
            violation: best_violation_seen,
        }),
    }
}
