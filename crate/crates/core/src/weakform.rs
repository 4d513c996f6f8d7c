//! Statistical verification of the martingale and orthogonality structure a
//! conforming construction must satisfy, plus tightness diagnostics.
//!
//! The joint process under test pairs the state with the discounted running
//! part of the value process. On a conforming ensemble, test processes built
//! from compactly supported bump functions and the generator compensator are
//! martingales, and their increments are uncorrelated with the terminal
//! orthogonal part against any bounded window of past information. The
//! batteries estimate both families of residuals with standard errors.

use nalgebra::DMatrix;
use ndarray::Array2;

use crate::agent::discount_path;
use crate::dynamics::MeasureTag;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, PathPrefix};
use crate::principal::SimulatedContract;
use crate::stats::Estimate;

/// Quintic smoothstep: zero value/slope/curvature at 0, one/zero/zero at 1.
#[inline]
fn smoothstep(t: f64) -> f64 {
    t * t * t * (t * (6.0 * t - 15.0) + 10.0)
}
#[inline]
fn smoothstep_d1(t: f64) -> f64 {
    30.0 * t * t * (t - 1.0) * (t - 1.0)
}
#[inline]
fn smoothstep_d2(t: f64) -> f64 {
    60.0 * t * (2.0 * t - 1.0) * (t - 1.0)
}

/// Radial plateau bump on the joint space: one inside a core ball, zero
/// outside the support ball, a quintic ramp in between. Twice continuously
/// differentiable with closed-form gradient and Hessian.
#[derive(Debug, Clone)]
pub struct Bump {
    pub center: Vec<f64>,
    pub radius: f64,
    /// Squared-radius fraction where the plateau ends; the ramp runs from
    /// `plateau * radius^2` to `radius^2`.
    pub plateau: f64,
}

impl Bump {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let s = self.s_of(x);
        if s <= self.plateau {
            1.0
        } else if s >= 1.0 {
            0.0
        } else {
            1.0 - smoothstep((s - self.plateau) / (1.0 - self.plateau))
        }
    }

    /// Value, gradient, and Hessian in one evaluation.
    pub fn value_grad_hess(&self, x: &[f64], grad: &mut [f64], hess: &mut [f64]) -> f64 {
        let n = self.dim();
        let s = self.s_of(x);
        for g in grad.iter_mut() {
            *g = 0.0;
        }
        for h in hess.iter_mut() {
            *h = 0.0;
        }
        if s <= self.plateau {
            return 1.0;
        }
        if s >= 1.0 {
            return 0.0;
        }
        let span = 1.0 - self.plateau;
        let tau = (s - self.plateau) / span;
        // d tau / d x = a (x - c) with a = 2 / (span r^2)
        let a = 2.0 / (span * self.radius * self.radius);
        let d1 = -smoothstep_d1(tau);
        let d2 = -smoothstep_d2(tau);
        for r in 0..n {
            grad[r] = d1 * a * (x[r] - self.center[r]);
        }
        for r in 0..n {
            for c in 0..n {
                let mut v = d2 * a * a * (x[r] - self.center[r]) * (x[c] - self.center[c]);
                if r == c {
                    v += d1 * a;
                }
                hess[r * n + c] = v;
            }
        }
        1.0 - smoothstep(tau)
    }

    fn s_of(&self, x: &[f64]) -> f64 {
        let mut s = 0.0;
        for (xi, ci) in x.iter().zip(&self.center) {
            s += (xi - ci) * (xi - ci);
        }
        s / (self.radius * self.radius)
    }
}

/// Bounded continuous windows of the path up to the probe time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowFn {
    One,
    TanhMeanState,
    TanhValue,
    SinSumState,
    TanhRunningMax,
    CosValue,
}

impl WindowFn {
    pub fn eval(&self, x: PathPrefix<'_>, script_y: &[f64]) -> f64 {
        let cur = x.current();
        let y = *script_y.last().unwrap_or(&0.0);
        match self {
            WindowFn::One => 1.0,
            WindowFn::TanhMeanState => {
                let m = cur.iter().sum::<f64>() / cur.len() as f64;
                m.tanh()
            }
            WindowFn::TanhValue => y.tanh(),
            WindowFn::SinSumState => cur.iter().sum::<f64>().sin(),
            WindowFn::TanhRunningMax => x.sup_norm().tanh(),
            WindowFn::CosValue => (2.0 * y).cos(),
        }
    }
}

/// Fixed battery of bump functions and windows.
#[derive(Debug, Clone)]
pub struct TestFunctionBattery {
    pub bumps: Vec<Bump>,
    pub windows: Vec<WindowFn>,
}

impl TestFunctionBattery {
    /// Three radii by three centers around a hint point, six windows.
    pub fn default_for(dim: usize, center: &[f64], scale: f64) -> Self {
        assert_eq!(center.len(), dim);
        let radii = [1.0 * scale, 2.0 * scale, 3.5 * scale];
        let offsets = [0.0, 0.6, -0.6];
        let mut bumps = Vec::new();
        for &off in &offsets {
            let c: Vec<f64> = center.iter().map(|&v| v + off * scale).collect();
            for &r in &radii {
                bumps.push(Bump {
                    center: c.clone(),
                    radius: r,
                    plateau: 0.25,
                });
            }
        }
        TestFunctionBattery {
            bumps,
            windows: vec![
                WindowFn::One,
                WindowFn::TanhMeanState,
                WindowFn::TanhValue,
                WindowFn::SinSumState,
                WindowFn::TanhRunningMax,
                WindowFn::CosValue,
            ],
        }
    }

    /// Largest relative disagreement between the closed-form derivatives and
    /// central finite differences over pseudo-random probe points.
    pub fn derivative_check(&self, n_probes: usize, seed: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for (b_idx, bump) in self.bumps.iter().enumerate() {
            let n = bump.dim();
            let mut grad = vec![0.0; n];
            let mut hess = vec![0.0; n * n];
            let h = 2e-5 * bump.radius;
            for probe in 0..n_probes {
                // random direction, radius strictly inside one smooth region
                // of the profile (finite differences are meaningless across
                // the ramp boundaries, where third derivatives jump)
                let mut dir: Vec<f64> = (0..n)
                    .map(|r| {
                        crate::rng::standard_normal(
                            seed,
                            crate::rng::Stream::Custom(7),
                            b_idx as u64,
                            probe as u64,
                            r as u64,
                            0,
                        )
                    })
                    .collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
                for v in dir.iter_mut() {
                    *v /= norm;
                }
                let pick = crate::rng::standard_normal(
                    seed,
                    crate::rng::Stream::Custom(8),
                    b_idx as u64,
                    probe as u64,
                    0,
                    0,
                );
                let unit = 0.5 * (pick.tanh() + 1.0);
                let s = match probe % 3 {
                    0 => bump.plateau * 0.8 * unit,
                    1 => bump.plateau + (1.0 - bump.plateau) * (0.2 + 0.6 * unit),
                    _ => 1.1 + unit,
                };
                let rad = s.sqrt() * bump.radius;
                let x: Vec<f64> = (0..n)
                    .map(|r| bump.center[r] + rad * dir[r])
                    .collect();
                bump.value_grad_hess(&x, &mut grad, &mut hess);
                let grad_norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                let hess_norm = hess.iter().map(|v| v * v).sum::<f64>().sqrt();
                for r in 0..n {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[r] += h;
                    xm[r] -= h;
                    let fd = (bump.value(&xp) - bump.value(&xm)) / (2.0 * h);
                    worst = worst.max((grad[r] - fd).abs() / (grad_norm + 1e-9));
                    for c in 0..n {
                        let mut xpp = x.clone();
                        let mut xpm = x.clone();
                        let mut xmp = x.clone();
                        let mut xmm = x.clone();
                        xpp[r] += h;
                        xpp[c] += h;
                        xpm[r] += h;
                        xpm[c] -= h;
                        xmp[r] -= h;
                        xmp[c] += h;
                        xmm[r] -= h;
                        xmm[c] -= h;
                        let fd2 = (bump.value(&xpp) - bump.value(&xpm) - bump.value(&xmp)
                            + bump.value(&xmm))
                            / (4.0 * h * h);
                        worst = worst.max((hess[r * n + c] - fd2).abs() / (hess_norm + 1e-9));
                    }
                }
            }
        }
        worst
    }
}

/// Discounted decomposition of a contract: the running part driven by cost
/// and sensitivity-coupled noise, and the terminal orthogonal part carrying
/// the initial utility plus the discounted orthogonal increments.
#[derive(Debug, Clone)]
pub struct DiscountedSplit {
    /// Running part, indexed `(path, step + 1)`, starting at zero.
    pub script_y: Array2<f64>,
    /// Terminal orthogonal part per path.
    pub u_terminal: Vec<f64>,
    /// Discount factor along each path.
    pub discount: Array2<f64>,
    /// Largest pathwise gap in the reconstruction
    /// `discount * value = running + orthogonal`, a discretisation check.
    pub reconstruction_gap: f64,
}

/// Split a simulated contract into its discounted running part and the
/// orthogonal remainder, from the integral definitions. On reference-measure
/// ensembles the noise is compensated with the recorded best-response drift
/// loadings, so the same decomposition applies under either measure.
pub fn discounted_split(
    model: &ModelSpec,
    contract: &SimulatedContract,
) -> Result<DiscountedSplit> {
    let noise = &contract.x.driven_by;
    let tg = noise.tg;
    let (n_paths, n_steps, n_branches, d) = contract.branch_z.dim();
    let k = model.noise_dim;
    if model.state_dim != d {
        return Err(Error::GridMismatch("state dimension mismatch".into()));
    }
    let dt = tg.dt();
    let discount = discount_path(model, &contract.x, &tg).factor;
    let compensate = contract.x.measure == MeasureTag::Reference;

    let mut script_y: Array2<f64> = Array2::zeros((n_paths, n_steps + 1));
    let mut u_terminal = vec![0.0; n_paths];
    let mut gap: f64 = 0.0;

    let mut sigma = DMatrix::zeros(d, k);
    let mut loading = vec![0.0; k];
    let mut w = vec![0.0; k];
    for p in 0..n_paths {
        let mut u = contract.y0_draws[p];
        let mut u_path = vec![contract.y0_draws[p]; n_steps + 1];
        for i in 0..n_steps {
            let t = tg.t(i);
            let prefix = contract.x.prefix(p, i);
            model.sigma_at(t, prefix, &mut sigma)?;
            let k_fac = discount[[p, i]];
            let mut inc = 0.0;
            for g in 0..n_branches {
                let u_g = contract.branch_actions[[p, i, g]];
                let weight = contract.branch_weights[g];
                let cost = model.running_cost.eval(t, prefix, u_g);
                for c in 0..k {
                    w[c] = 0.0;
                    for r in 0..d {
                        w[c] += sigma[(r, c)] * contract.branch_z[[p, i, g, r]];
                    }
                }
                // branch-aggregated noise, compensated on reference paths
                let mut coupled = 0.0;
                for (j, &gj) in contract.cell_to_branch.iter().enumerate() {
                    if gj == g {
                        for c in 0..k {
                            coupled += w[c] * noise.increments[[p, i, j, c]];
                        }
                    }
                }
                if compensate {
                    model.drift_loading.eval_into(t, prefix, u_g, &mut loading);
                    let mut wl = 0.0;
                    for c in 0..k {
                        wl += w[c] * loading[c];
                    }
                    coupled -= wl * weight * dt;
                }
                inc += cost * weight * dt + coupled;
            }
            script_y[[p, i + 1]] = script_y[[p, i]] + k_fac * inc;
            u += k_fac * contract.l_increments[[p, i]];
            u_path[i + 1] = u;
        }
        u_terminal[p] = u;
        for i in 0..=n_steps {
            let lhs = discount[[p, i]] * contract.y[[p, i]];
            gap = gap.max((lhs - script_y[[p, i]] - u_path[i]).abs());
        }
    }
    Ok(DiscountedSplit {
        script_y,
        u_terminal,
        discount,
        reconstruction_gap: gap,
    })
}

/// Drift and diffusion of the joint test process, with a declared growth
/// constant for the probe checks.
pub struct GeneratorSpec {
    pub model: std::sync::Arc<ModelSpec>,
    pub growth_const: f64,
    /// Include the one-step drift-squared correction so the compensator
    /// matches the discrete transition kernel to higher order.
    pub euler_consistent: bool,
}

impl GeneratorSpec {
    pub fn new(model: std::sync::Arc<ModelSpec>) -> Self {
        let growth = 2.0
            * (1.0 + model.sigma_bound + model.sigma_bound * model.sigma_bound)
            * (1.0 + model.lambda_bound);
        GeneratorSpec {
            model,
            growth_const: growth,
            euler_consistent: true,
        }
    }

    /// Drift of the joint process at a branch: the loaded volatility and the
    /// discounted running cost.
    #[allow(clippy::too_many_arguments)]
    fn drift_into(
        &self,
        t: f64,
        prefix: PathPrefix<'_>,
        k_fac: f64,
        action: f64,
        sigma: &DMatrix<f64>,
        loading: &mut [f64],
        out: &mut [f64],
    ) {
        let (d, k) = (self.model.state_dim, self.model.noise_dim);
        self.model
            .drift_loading
            .eval_into(t, prefix, action, loading);
        for r in 0..d {
            out[r] = 0.0;
            for c in 0..k {
                out[r] += sigma[(r, c)] * loading[c];
            }
        }
        out[d] = k_fac * self.model.running_cost.eval(t, prefix, action);
    }

    /// Diffusion outer product at a branch; the last row of the stacked
    /// volatility couples the discounted sensitivity to the noise.
    fn amat_into(&self, k_fac: f64, sigma: &DMatrix<f64>, w: &[f64], out: &mut [f64]) {
        let (d, k) = (self.model.state_dim, self.model.noise_dim);
        let n = d + 1;
        for r in 0..d {
            for c in 0..d {
                let mut v = 0.0;
                for cc in 0..k {
                    v += sigma[(r, cc)] * sigma[(c, cc)];
                }
                out[r * n + c] = v;
            }
            let mut v = 0.0;
            for cc in 0..k {
                v += sigma[(r, cc)] * k_fac * w[cc];
            }
            out[r * n + d] = v;
            out[d * n + r] = v;
        }
        let mut v = 0.0;
        for cc in 0..k {
            v += k_fac * w[cc] * k_fac * w[cc];
        }
        out[d * n + d] = v;
    }

    /// Probe the declared structure on a contract: diffusion matrices must
    /// be symmetric positive semidefinite and both coefficients must respect
    /// the growth bound.
    pub fn check_probes(&self, contract: &SimulatedContract, stride: usize) -> Result<()> {
        let tg = contract.x.driven_by.tg;
        let (n_paths, n_steps, n_branches, d) = contract.branch_z.dim();
        let k = self.model.noise_dim;
        let n = d + 1;
        let discount = discount_path(&self.model, &contract.x, &tg).factor;
        let mut sigma = DMatrix::zeros(d, k);
        let mut loading = vec![0.0; k];
        let mut w = vec![0.0; k];
        let mut b = vec![0.0; n];
        let mut a = vec![0.0; n * n];
        for p in (0..n_paths).step_by(stride.max(1)) {
            for i in (0..n_steps).step_by(stride.max(1)) {
                let t = tg.t(i);
                let prefix = contract.x.prefix(p, i);
                self.model.sigma_at(t, prefix, &mut sigma)?;
                let k_fac = discount[[p, i]];
                for g in 0..n_branches {
                    let action = contract.branch_actions[[p, i, g]];
                    for c in 0..k {
                        w[c] = 0.0;
                        for r in 0..d {
                            w[c] += sigma[(r, c)] * contract.branch_z[[p, i, g, r]];
                        }
                    }
                    self.drift_into(t, prefix, k_fac, action, &sigma, &mut loading, &mut b);
                    self.amat_into(k_fac, &sigma, &w, &mut a);
                    let amat = DMatrix::from_row_slice(n, n, &a);
                    let eig = amat.clone().symmetric_eigen();
                    if eig.eigenvalues.iter().any(|&e| e < -1e-10) {
                        return Err(Error::InvalidModel(
                            "diffusion matrix not positive semidefinite".into(),
                        ));
                    }
                    let xnorm = prefix.sup_norm();
                    let wnorm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let a_bound = self.growth_const * (1.0 + xnorm + wnorm * wnorm);
                    let b_bound = self.growth_const * (1.0 + xnorm + wnorm);
                    if amat.norm() > a_bound {
                        return Err(Error::InvalidModel(format!(
                            "diffusion norm {} beyond declared growth {a_bound}",
                            amat.norm()
                        )));
                    }
                    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if bnorm > b_bound {
                        return Err(Error::InvalidModel(format!(
                            "drift norm {bnorm} beyond declared growth {b_bound}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One residual of a battery: which bump, which window, which interval, and
/// the estimate.
#[derive(Debug, Clone)]
pub struct ResidualRecord {
    pub bump: usize,
    pub window: usize,
    pub s: f64,
    pub t: f64,
    pub estimate: Estimate,
}

impl ResidualRecord {
    pub fn sigmas(&self) -> f64 {
        if self.estimate.se == 0.0 {
            if self.estimate.value == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.estimate.value.abs() / self.estimate.se
        }
    }
}

/// Share of records inside the band.
pub fn fraction_within(records: &[ResidualRecord], n_se: f64) -> f64 {
    if records.is_empty() {
        return 1.0;
    }
    records.iter().filter(|r| r.sigmas() <= n_se).count() as f64 / records.len() as f64
}

/// True when at least one record lies beyond the band.
pub fn any_beyond(records: &[ResidualRecord], n_se: f64) -> bool {
    records.iter().any(|r| r.sigmas() > n_se)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum BatteryKind {
    Generator,
    Orthogonality,
}

/// Martingale residuals `E[h_s (M_t - M_s)]` of the compensated test
/// processes over the probe intervals.
pub fn generator_battery(
    gen: &GeneratorSpec,
    battery: &TestFunctionBattery,
    contract: &SimulatedContract,
    split: &DiscountedSplit,
    pairs: &[(f64, f64)],
) -> Result<Vec<ResidualRecord>> {
    run_battery(
        gen,
        battery,
        contract,
        split,
        None,
        pairs,
        BatteryKind::Generator,
    )
}

/// Orthogonality residuals `E[h_s u (M_t - M_s)]` against a terminal
/// variable; pass the split's own terminal part for the conforming check or
/// any candidate variable for power studies.
pub fn orthogonality_battery(
    gen: &GeneratorSpec,
    battery: &TestFunctionBattery,
    contract: &SimulatedContract,
    split: &DiscountedSplit,
    u_values: &[f64],
    pairs: &[(f64, f64)],
) -> Result<Vec<ResidualRecord>> {
    run_battery(
        gen,
        battery,
        contract,
        split,
        Some(u_values),
        pairs,
        BatteryKind::Orthogonality,
    )
}

fn run_battery(
    gen: &GeneratorSpec,
    battery: &TestFunctionBattery,
    contract: &SimulatedContract,
    split: &DiscountedSplit,
    u_values: Option<&[f64]>,
    pairs: &[(f64, f64)],
    kind: BatteryKind,
) -> Result<Vec<ResidualRecord>> {
    let model = &gen.model;
    let tg = contract.x.driven_by.tg;
    let (n_paths, n_steps, n_branches, d) = contract.branch_z.dim();
    let k = model.noise_dim;
    let n = d + 1;
    let dt = tg.dt();
    let n_bumps = battery.bumps.len();
    if let Some(u) = u_values {
        if u.len() != n_paths {
            return Err(Error::GridMismatch("terminal variable length".into()));
        }
    }
    for &(s, t) in pairs {
        if !(0.0 <= s && s < t && t <= tg.horizon()) {
            return Err(Error::InvalidArgument(format!("bad probe pair ({s}, {t})")));
        }
    }

    // indices at which the test processes are needed
    let mut idx: Vec<usize> = pairs
        .iter()
        .flat_map(|&(s, t)| [tg.index_at(s), tg.index_at(t)])
        .collect();
    idx.sort_unstable();
    idx.dedup();
    let pos_of = |i: usize| idx.binary_search(&i).expect("probe index");

    // test processes and windows at probe indices
    let mut m_at = vec![0.0; n_paths * idx.len() * n_bumps];
    let mut h_at = vec![0.0; n_paths * idx.len() * battery.windows.len()];

    let mut sigma = DMatrix::zeros(d, k);
    let mut loading = vec![0.0; k];
    let mut w = vec![0.0; k];
    let mut b = vec![0.0; n];
    let mut amat = vec![0.0; n * n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n * n];
    let mut point = vec![0.0; n];
    let mut comp = vec![0.0; n_bumps];

    for p in 0..n_paths {
        for c in comp.iter_mut() {
            *c = 0.0;
        }
        for i in 0..=n_steps {
            if let Ok(pos) = idx.binary_search(&i) {
                for r in 0..d {
                    point[r] = contract.x.x[[p, i, r]];
                }
                point[d] = split.script_y[[p, i]];
                for (b_idx, bump) in battery.bumps.iter().enumerate() {
                    let phi = bump.value(&point);
                    m_at[(p * idx.len() + pos) * n_bumps + b_idx] = phi - comp[b_idx];
                }
                let prefix = contract.x.prefix(p, i);
                let y_prefix: Vec<f64> = (0..=i).map(|l| split.script_y[[p, l]]).collect();
                for (w_idx, window) in battery.windows.iter().enumerate() {
                    h_at[(p * idx.len() + pos) * battery.windows.len() + w_idx] =
                        window.eval(prefix, &y_prefix);
                }
            }
            if i == n_steps {
                break;
            }
            // compensator increment at the left endpoint
            let t = tg.t(i);
            let prefix = contract.x.prefix(p, i);
            model.sigma_at(t, prefix, &mut sigma)?;
            let k_fac = split.discount[[p, i]];
            for r in 0..d {
                point[r] = contract.x.x[[p, i, r]];
            }
            point[d] = split.script_y[[p, i]];
            for (b_idx, bump) in battery.bumps.iter().enumerate() {
                bump.value_grad_hess(&point, &mut grad, &mut hess);
                if grad.iter().all(|&g| g == 0.0) && hess.iter().all(|&h| h == 0.0) {
                    continue;
                }
                let mut inc = 0.0;
                for g in 0..n_branches {
                    let action = contract.branch_actions[[p, i, g]];
                    for c in 0..k {
                        w[c] = 0.0;
                        for r in 0..d {
                            w[c] += sigma[(r, c)] * contract.branch_z[[p, i, g, r]];
                        }
                    }
                    gen.drift_into(t, prefix, k_fac, action, &sigma, &mut loading, &mut b);
                    gen.amat_into(k_fac, &sigma, &w, &mut amat);
                    let mut lphi = 0.0;
                    for r in 0..n {
                        lphi += b[r] * grad[r];
                    }
                    let drift_sq = if gen.euler_consistent { dt } else { 0.0 };
                    for r in 0..n {
                        for c in 0..n {
                            lphi +=
                                0.5 * (amat[r * n + c] + drift_sq * b[r] * b[c]) * hess[r * n + c];
                        }
                    }
                    inc += lphi * contract.branch_weights[g];
                }
                comp[b_idx] += inc * dt;
            }
        }
    }

    let mut records = Vec::new();
    for &(s, t) in pairs {
        let si = pos_of(tg.index_at(s));
        let ti = pos_of(tg.index_at(t));
        for b_idx in 0..n_bumps {
            for w_idx in 0..battery.windows.len() {
                let samples: Vec<f64> = (0..n_paths)
                    .map(|p| {
                        let m_s = m_at[(p * idx.len() + si) * n_bumps + b_idx];
                        let m_t = m_at[(p * idx.len() + ti) * n_bumps + b_idx];
                        let h = h_at[(p * idx.len() + si) * battery.windows.len() + w_idx];
                        let u = match kind {
                            BatteryKind::Generator => 1.0,
                            BatteryKind::Orthogonality => u_values.unwrap()[p],
                        };
                        h * u * (m_t - m_s)
                    })
                    .collect();
                records.push(ResidualRecord {
                    bump: b_idx,
                    window: w_idx,
                    s,
                    t,
                    estimate: Estimate::from_samples(&samples),
                });
            }
        }
    }
    Ok(records)
}

/// Exceedance probability of the first time the joint state norm or the
/// accumulated sensitivity moment reaches a threshold.
#[derive(Debug, Clone)]
pub struct TightnessPoint {
    pub threshold: f64,
    pub probability: f64,
    pub exceed_count: usize,
}

pub fn tightness_report(
    contract: &SimulatedContract,
    split: &DiscountedSplit,
    epsilon: f64,
    thresholds: &[f64],
) -> Result<Vec<TightnessPoint>> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let tg = contract.x.driven_by.tg;
    let (n_paths, n_steps, n_branches, d) = contract.branch_z.dim();
    let dt = tg.dt();
    // pathwise running maximum of the trigger statistic before the horizon
    let mut trigger = vec![0.0f64; n_paths];
    for p in 0..n_paths {
        let mut zint = 0.0;
        let mut best: f64 = 0.0;
        for i in 0..n_steps {
            let mut norm_sq = 0.0;
            for r in 0..d {
                norm_sq += contract.x.x[[p, i, r]] * contract.x.x[[p, i, r]];
            }
            let y = split.script_y[[p, i]];
            norm_sq += y * y;
            best = best.max(norm_sq.sqrt());
            best = best.max(zint);
            let mut at_step = 0.0;
            for g in 0..n_branches {
                let mut z_sq = 0.0;
                for r in 0..d {
                    z_sq += contract.branch_z[[p, i, g, r]] * contract.branch_z[[p, i, g, r]];
                }
                at_step += z_sq.powf(1.0 + 0.5 * epsilon) * contract.branch_weights[g];
            }
            zint += at_step * dt;
        }
        trigger[p] = best;
    }
    Ok(thresholds
        .iter()
        .map(|&m| {
            let count = trigger.iter().filter(|&&v| v >= m).count();
            TightnessPoint {
                threshold: m,
                probability: count as f64 / n_paths as f64,
                exceed_count: count,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::HamiltonianSpec;
    use crate::dynamics::simulate_state_p0;
    use crate::grid::{IntensityGrid, TimeGrid};
    use crate::measure::simulate_base_measure;
    use crate::model::{quadratic_benchmark, ConstDiscount};
    use crate::principal::{
        generate_contract, simulate_best_response, InitialUtility, LPolicy, PrincipalSpec,
        TerminalMinusPayment, ZPolicy,
    };
    use crate::rng::Stream;
    use std::sync::Arc;

    fn lq_setup() -> (HamiltonianSpec, PrincipalSpec, IntensityGrid, TimeGrid) {
        let ham = HamiltonianSpec::grid(Arc::new(quadratic_benchmark(1.0))).unwrap();
        let spec = PrincipalSpec::unconstrained(Arc::new(TerminalMinusPayment), 0.0);
        let grid = IntensityGrid::uniform(16).unwrap();
        let tg = TimeGrid::new(1.0, 100).unwrap();
        (ham, spec, grid, tg)
    }

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let battery = TestFunctionBattery::default_for(2, &[0.4, 0.3], 1.5);
        assert_eq!(battery.bumps.len(), 9);
        assert_eq!(battery.windows.len(), 6);
        let worst = battery.derivative_check(100, 2024);
        assert!(worst < 1e-6, "derivative mismatch {worst}");
    }

    #[test]
    fn bump_support_is_compact() {
        let bump = Bump {
            center: vec![0.0, 0.0],
            radius: 1.0,
            plateau: 0.25,
        };
        assert_eq!(bump.value(&[2.0, 0.0]), 0.0);
        assert_eq!(bump.value(&[0.0, 0.0]), 1.0);
        let mut grad = vec![0.0; 2];
        let mut hess = vec![0.0; 4];
        assert_eq!(bump.value_grad_hess(&[1.5, 1.5], &mut grad, &mut hess), 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        assert!(hess.iter().all(|&h| h == 0.0));
    }

    #[test]
    fn split_without_discount_or_channel_is_value_less_initial() {
        let (ham, spec, grid, tg) = lq_setup();
        let noise = Arc::new(simulate_base_measure(&grid, &tg, 1, 100, 31, Stream::Base).unwrap());
        let x = simulate_state_p0(&ham.model, &noise).unwrap();
        let contract = generate_contract(
            &ham,
            &spec,
            InitialUtility::Fixed(0.4),
            &ZPolicy::constant(vec![1.0]),
            &LPolicy::Zero,
            &x,
        )
        .unwrap();
        let split = discounted_split(&ham.model, &contract).unwrap();
        for p in 0..100 {
            for i in 0..=100 {
                let want = contract.y[[p, i]] - 0.4;
                assert!(
                    (split.script_y[[p, i]] - want).abs() < 1e-9,
                    "running part mismatch"
                );
            }
            assert!((split.u_terminal[p] - 0.4).abs() < 1e-12);
        }
        assert!(split.reconstruction_gap < 1e-9);
    }

    #[test]
    fn split_with_channel_accumulates_it_undiscounted() {
        let (ham, spec, grid, tg) = lq_setup();
        let noise = Arc::new(simulate_base_measure(&grid, &tg, 1, 200, 37, Stream::Base).unwrap());
        let x = simulate_state_p0(&ham.model, &noise).unwrap();
        let contract = generate_contract(
            &ham,
            &spec,
            InitialUtility::Fixed(0.0),
            &ZPolicy::constant(vec![0.5]),
            &LPolicy::constant_noise(0.3),
            &x,
        )
        .unwrap();
        let split = discounted_split(&ham.model, &contract).unwrap();
        for p in 0..200 {
            let l_total: f64 = (0..100).map(|i| contract.l_increments[[p, i]]).sum();
            assert!((split.u_terminal[p] - l_total).abs() < 1e-10);
        }
        assert!(split.reconstruction_gap < 1e-9);
    }

    #[test]
    fn split_with_discount_reconstructs_within_step_error() {
        let (mut ham, spec, grid, tg) = lq_setup();
        let mut model = quadratic_benchmark(1.0);
        model.discount_rate = Arc::new(ConstDiscount(0.6));
        model.discount_floor = 0.6;
        ham.model = Arc::new(model);
        let noise = Arc::new(simulate_base_measure(&grid, &tg, 1, 100, 41, Stream::Base).unwrap());
        let x = simulate_state_p0(&ham.model, &noise).unwrap();
        let contract = generate_contract(
            &ham,
            &spec,
            InitialUtility::Fixed(0.5),
            &ZPolicy::constant(vec![0.0]),
            &LPolicy::Zero,
            &x,
        )
        .unwrap();
        let split = discounted_split(&ham.model, &contract).unwrap();
        // flat sensitivity, zero cost at the maximiser: the value grows at
        // the discount rate and the reconstruction collapses to the initial
        // utility
        assert!(
            split.reconstruction_gap < 3.0 * tg.dt(),
            "gap {}",
            split.reconstruction_gap
        );
        let mid = contract.y[[0, 50]];
        assert!(
            (mid - 0.5 * (0.6f64 * 0.5).exp()).abs() < 0.02,
            "midpoint {mid}"
        );
    }

    #[test]
    fn conforming_ensemble_passes_both_batteries() {
        let (ham, spec, grid, tg) = lq_setup();
        let contract = simulate_best_response(
            &ham,
            &spec,
            InitialUtility::Fixed(0.1),
            &ZPolicy::constant(vec![1.0]),
            &LPolicy::constant_noise(0.4),
            &grid,
            &tg,
            4_000,
            43,
        )
        .unwrap();
        let split = discounted_split(&ham.model, &contract).unwrap();
        let gen = GeneratorSpec::new(Arc::clone(&ham.model));
        gen.check_probes(&contract, 37).unwrap();
        let battery = TestFunctionBattery::default_for(2, &[0.6, 0.4], 1.6);
        let pairs = [(0.0, 0.5), (0.5, 1.0), (0.0, 1.0)];
        let g_rec = generator_battery(&gen, &battery, &contract, &split, &pairs).unwrap();
        assert_eq!(g_rec.len(), 9 * 6 * 3);
        let frac = fraction_within(&g_rec, 3.0);
        assert!(frac >= 0.95, "generator battery fraction {frac}");
        let o_rec =
            orthogonality_battery(&gen, &battery, &contract, &split, &split.u_terminal, &pairs)
                .unwrap();
        let frac = fraction_within(&o_rec, 3.0);
        assert!(frac >= 0.95, "orthogonality battery fraction {frac}");
    }

    #[test]
    fn doubled_drift_is_rejected() {
        let (ham, spec, grid, tg) = lq_setup();
        // ensemble simulated with twice the drift loading
        let mut doubled = quadratic_benchmark(1.0);
        doubled.drift_loading = Arc::new(crate::model::ScaledLoading {
            inner: Arc::new(crate::model::LinearDriftLoading {
                direction: vec![1.0],
            }),
            factor: 2.0,
        });
        doubled.lambda_bound = 4.0 + 1e-9;
        let doubled_ham = HamiltonianSpec::grid(Arc::new(doubled)).unwrap();
        let contract = simulate_best_response(
            &doubled_ham,
            &spec,
            InitialUtility::Fixed(0.1),
            &ZPolicy::constant(vec![1.0]),
            &LPolicy::Zero,
            &grid,
            &tg,
            4_000,
            47,
        )
        .unwrap();
        // split consistent with the simulated dynamics, generator not
        let split = discounted_split(&doubled_ham.model, &contract).unwrap();
        let gen = GeneratorSpec::new(Arc::clone(&ham.model));
        let battery = TestFunctionBattery::default_for(2, &[0.6, 0.4], 1.6);
        let pairs = [(0.0, 0.5), (0.5, 1.0), (0.0, 1.0)];
        let rec = generator_battery(&gen, &battery, &contract, &split, &pairs).unwrap();
        assert!(any_beyond(&rec, 5.0), "doubled drift not rejected");
    }

    #[test]
    fn correlated_terminal_variable_is_rejected() {
        let (ham, spec, grid, tg) = lq_setup();
        let contract = simulate_best_response(
            &ham,
            &spec,
            InitialUtility::Fixed(0.1),
            &ZPolicy::constant(vec![1.0]),
            &LPolicy::Zero,
            &grid,
            &tg,
            4_000,
            53,
        )
        .unwrap();
        let split = discounted_split(&ham.model, &contract).unwrap();
        let gen = GeneratorSpec::new(Arc::clone(&ham.model));
        let battery = TestFunctionBattery::default_for(2, &[0.6, 0.4], 1.6);
        let pairs = [(0.0, 0.5), (0.5, 1.0), (0.0, 1.0)];
        // deliberately correlated terminal variable: the aggregated noise
        let noise = Arc::clone(&contract.x.driven_by);
        let correlated: Vec<f64> = (0..4_000)
            .map(|p| {
                (0..tg.n_steps())
                    .map(|i| noise.aggregate_increment(p, i, 0))
                    .sum()
            })
            .collect();
        let rec = orthogonality_battery(&gen, &battery, &contract, &split, &correlated, &pairs)
            .unwrap();
        assert!(any_beyond(&rec, 5.0), "correlated terminal part not rejected");
    }

    #[test]
    fn tightness_probabilities_are_monotone() {
        let (ham, spec, grid, tg) = lq_setup();
        let contract = simulate_best_response(
            &ham,
            &spec,
            InitialUtility::Fixed(0.0),
            &ZPolicy::constant(vec![1.0]),
            &LPolicy::Zero,
            &grid,
            &tg,
            4_000,
            59,
        )
        .unwrap();
        let split = discounted_split(&ham.model, &contract).unwrap();
        let report = tightness_report(&contract, &split, 0.5, &[0.0, 2.0, 4.0, 8.0]).unwrap();
        assert_eq!(report[0].probability, 1.0);
        for w in report.windows(2) {
            assert!(w[1].probability <= w[0].probability);
        }
        assert!(report[3].probability < 0.01, "p(8) {}", report[3].probability);
        // far beyond the sample maximum: zero
        let far_out = tightness_report(&contract, &split, 0.5, &[1e6]).unwrap();
        assert_eq!(far_out[0].probability, 0.0);
    }
}
