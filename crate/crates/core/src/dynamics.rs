//! Forward state dynamics under the reference measure and under controlled
//! measures, via density reweighting or direct tilted simulation.

use nalgebra::{DMatrix, DVector};
use ndarray::parallel::prelude::*;
use ndarray::{s, Array2, Array3, Axis};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::measure::{simulate_base_measure, BaseMeasurePaths, NoiseHandle};
use crate::model::{ModelSpec, PathPrefix, RANK_TOL};
use crate::rng::Stream;
use crate::stats::Estimate;

/// Which probability generated an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureTag {
    /// Reference measure: driftless dynamics.
    Reference,
    /// Controlled measure simulated directly with the tilted drift.
    ControlledDirect,
}

/// Tabulated state paths, indexed `(path, step + 1, state dim)`.
#[derive(Debug, Clone)]
pub struct StatePaths {
    pub x: Array3<f64>,
    pub driven_by: NoiseHandle,
    pub measure: MeasureTag,
}

impl StatePaths {
    pub fn n_paths(&self) -> usize {
        self.x.dim().0
    }

    pub fn prefix(&self, path: usize, step: usize) -> PathPrefix<'_> {
        PathPrefix::new(self.x.slice(s![path, ..=step, ..]))
    }

    pub fn terminal(&self, path: usize) -> ndarray::ArrayView1<'_, f64> {
        let n = self.x.dim().1;
        self.x.slice(s![path, n - 1, ..])
    }
}

/// Cell-wise action field, indexed `(path, step, cell)`.
pub type ControlField = Array3<f64>;

/// Constant control on every cell.
pub fn constant_control(noise: &BaseMeasurePaths, u: f64) -> ControlField {
    Array3::from_elem(
        (noise.n_paths, noise.tg.n_steps(), noise.grid.n_cells()),
        u,
    )
}

/// Driftless Euler scheme under the reference measure:
/// `X_{i+1} = X_i + sigma(t_i, X) . sum_cells dM_ij`.
pub fn simulate_state_p0(model: &ModelSpec, noise: &NoiseHandle) -> Result<StatePaths> {
    if noise.n_dims != model.noise_dim {
        return Err(Error::GridMismatch(format!(
            "noise has {} dims, model expects {}",
            noise.n_dims, model.noise_dim
        )));
    }
    let (n_paths, n_steps) = (noise.n_paths, noise.tg.n_steps());
    let (d, k) = (model.state_dim, model.noise_dim);
    let n_cells = noise.grid.n_cells();
    let mut x = Array3::zeros((n_paths, n_steps + 1, d));

    let results: Vec<Result<()>> = x
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(p, mut path)| {
            for c in 0..d {
                path[[0, c]] = model.x0[c];
            }
            let mut sigma = DMatrix::zeros(d, k);
            let mut agg: DVector<f64> = DVector::zeros(k);
            for i in 0..n_steps {
                let t = noise.tg.t(i);
                let prefix = PathPrefix::new(path.slice(s![..=i, ..]));
                model.sigma_at(t, prefix, &mut sigma)?;
                for c in 0..k {
                    agg[c] = (0..n_cells).map(|j| noise.increments[[p, i, j, c]]).sum();
                }
                for r in 0..d {
                    let mut next = path[[i, r]];
                    for c in 0..k {
                        next += sigma[(r, c)] * agg[c];
                    }
                    if !next.is_finite() {
                        return Err(Error::SimulationFailure {
                            path: p,
                            step: i,
                            reason: "non-finite state".into(),
                        });
                    }
                    path[[i + 1, r]] = next;
                }
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    Ok(StatePaths {
        x,
        driven_by: Arc::clone(noise),
        measure: MeasureTag::Reference,
    })
}

/// Log-likelihood ratio of a controlled measure against the reference,
/// accumulated step by step.
#[derive(Debug, Clone)]
pub struct GirsanovWeights {
    /// Cumulative log density, indexed `(path, step + 1)`.
    pub cumulative_log: Array2<f64>,
}

impl GirsanovWeights {
    pub fn terminal_log(&self, path: usize) -> f64 {
        let n = self.cumulative_log.dim().1;
        self.cumulative_log[[path, n - 1]]
    }

    pub fn terminal_density(&self, path: usize) -> f64 {
        self.terminal_log(path).exp()
    }

    pub fn terminal_densities(&self) -> Vec<f64> {
        (0..self.cumulative_log.dim().0)
            .map(|p| self.terminal_density(p))
            .collect()
    }
}

/// Likelihood ratio of the control's measure on reference paths:
/// `log dP/dP0 = sum loading . dM - 1/2 sum |loading|^2 mass dt`,
/// with left-endpoint evaluation of the loading.
pub fn girsanov_density(
    model: &ModelSpec,
    control: &ControlField,
    x_paths: &StatePaths,
    noise: &BaseMeasurePaths,
) -> Result<GirsanovWeights> {
    if x_paths.measure != MeasureTag::Reference {
        return Err(Error::InvalidArgument(
            "reweighting requires reference-measure paths".into(),
        ));
    }
    let (n_paths, n_steps, n_cells) = control.dim();
    if n_paths != noise.n_paths || n_steps != noise.tg.n_steps() || n_cells != noise.grid.n_cells()
    {
        return Err(Error::GridMismatch("control does not match ensemble".into()));
    }
    let dt = noise.tg.dt();
    let k = model.noise_dim;
    let mut cumulative_log = Array2::zeros((n_paths, n_steps + 1));
    let results: Vec<Result<()>> = cumulative_log
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(p, mut row)| {
            let mut loading = vec![0.0; k];
            let mut acc = 0.0;
            for i in 0..n_steps {
                let t = noise.tg.t(i);
                let prefix = x_paths.prefix(p, i);
                for j in 0..n_cells {
                    model
                        .drift_loading
                        .eval_into(t, prefix, control[[p, i, j]], &mut loading);
                    let mut dot = 0.0;
                    let mut norm2 = 0.0;
                    for c in 0..k {
                        dot += loading[c] * noise.increments[[p, i, j, c]];
                        norm2 += loading[c] * loading[c];
                    }
                    if !dot.is_finite() || !norm2.is_finite() {
                        return Err(Error::InvalidModel(format!(
                            "drift loading non-finite at path {p}, step {i}"
                        )));
                    }
                    acc += dot - 0.5 * norm2 * noise.grid.mass(j) * dt;
                }
                row[i + 1] = acc;
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    Ok(GirsanovWeights { cumulative_log })
}

/// Direct simulation under the controlled measure: Euler scheme with drift
/// `sum_cells sigma . loading(u_j) mass_j dt` plus the diffusion term. The
/// noise stream matches the reference simulation, so a zero loading
/// reproduces the reference paths bit-exactly for the same seed.
pub fn simulate_state_controlled(
    model: &ModelSpec,
    control: &ControlField,
    noise: &NoiseHandle,
) -> Result<StatePaths> {
    let (n_paths, n_steps, n_cells) = control.dim();
    if n_paths != noise.n_paths || n_steps != noise.tg.n_steps() || n_cells != noise.grid.n_cells()
    {
        return Err(Error::GridMismatch("control does not match ensemble".into()));
    }
    let dt = noise.tg.dt();
    let (d, k) = (model.state_dim, model.noise_dim);
    let mut x = Array3::zeros((n_paths, n_steps + 1, d));
    let results: Vec<Result<()>> = x
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(p, mut path)| {
            for c in 0..d {
                path[[0, c]] = model.x0[c];
            }
            let mut sigma = DMatrix::zeros(d, k);
            let mut loading = vec![0.0; k];
            let mut drift: DVector<f64> = DVector::zeros(k);
            let mut agg: DVector<f64> = DVector::zeros(k);
            for i in 0..n_steps {
                let t = noise.tg.t(i);
                let prefix = PathPrefix::new(path.slice(s![..=i, ..]));
                model.sigma_at(t, prefix, &mut sigma)?;
                // averaged loading under the cell-wise control, plus noise
                drift.fill(0.0);
                agg.fill(0.0);
                for j in 0..n_cells {
                    model
                        .drift_loading
                        .eval_into(t, prefix, control[[p, i, j]], &mut loading);
                    let mass = noise.grid.mass(j);
                    for c in 0..k {
                        drift[c] += loading[c] * mass;
                        agg[c] += noise.increments[[p, i, j, c]];
                    }
                }
                for r in 0..d {
                    let mut next = path[[i, r]];
                    for c in 0..k {
                        next += sigma[(r, c)] * (drift[c] * dt + agg[c]);
                    }
                    if !next.is_finite() {
                        return Err(Error::SimulationFailure {
                            path: p,
                            step: i,
                            reason: "non-finite state".into(),
                        });
                    }
                    path[[i + 1, r]] = next;
                }
            }
            Ok(())
        })
        .collect();
    for r in results {
        r?;
    }
    Ok(StatePaths {
        x,
        driven_by: Arc::clone(noise),
        measure: MeasureTag::ControlledDirect,
    })
}

/// Convenience: fresh noise plus controlled simulation in one call.
pub fn simulate_controlled_from_seed(
    model: &ModelSpec,
    control_of: impl Fn(&BaseMeasurePaths) -> ControlField,
    grid: &crate::grid::IntensityGrid,
    tg: &crate::grid::TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<(StatePaths, NoiseHandle)> {
    let noise = Arc::new(simulate_base_measure(
        grid,
        tg,
        model.noise_dim,
        n_paths,
        seed,
        Stream::Base,
    )?);
    let control = control_of(&noise);
    let paths = simulate_state_controlled(model, &control, &noise)?;
    Ok((paths, noise))
}

/// Moore-Penrose left inverse of a full-column-rank `d x k` matrix.
/// The product `left_inverse * mat` is the `k x k` identity.
pub fn left_inverse_sigma(mat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = mat.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let min_sv = svd.singular_values.min();
    if max_sv <= 0.0 || min_sv / max_sv <= RANK_TOL {
        return Err(Error::RankDeficient {
            ratio: if max_sv > 0.0 { min_sv / max_sv } else { 0.0 },
            tol: RANK_TOL,
        });
    }
    svd.pseudo_inverse(RANK_TOL * max_sv)
        .map_err(|e| Error::InvalidModel(format!("pseudo-inverse failed: {e}")))
}

/// Importance-sampled expectation `E[value * density]` with its standard
/// error, on a reference-measure ensemble.
pub fn reweighted_expectation(values: &[f64], weights: &GirsanovWeights) -> Estimate {
    let products: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(p, v)| v * weights.terminal_density(p))
        .collect();
    Estimate::from_samples(&products)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{IntensityGrid, TimeGrid};
    use crate::model::quadratic_benchmark;
    use approx::assert_abs_diff_eq;

    fn setup(n_paths: usize, seed: u64) -> (ModelSpec, NoiseHandle) {
        let model = quadratic_benchmark(1.0);
        let grid = IntensityGrid::uniform(4).unwrap();
        let tg = TimeGrid::new(1.0, 50).unwrap();
        let noise = Arc::new(
            simulate_base_measure(&grid, &tg, 1, n_paths, seed, Stream::Base).unwrap(),
        );
        (model, noise)
    }

    #[test]
    fn unit_volatility_reproduces_aggregate_noise() {
        let (model, noise) = setup(20, 3);
        let paths = simulate_state_p0(&model, &noise).unwrap();
        for p in 0..20 {
            let mut w = 0.0;
            for i in 0..50 {
                w += noise.aggregate_increment(p, i, 0);
                assert_abs_diff_eq!(paths.x[[p, i + 1, 0]], w, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_volatility_freezes_state() {
        let (mut model, noise) = setup(5, 7);
        model.volatility = Arc::new(crate::model::ConstVolatility(DMatrix::zeros(1, 1)));
        model.x0[0] = 1.25;
        let paths = simulate_state_p0(&model, &noise).unwrap();
        assert!(paths.x.iter().all(|&v| v == 1.25 || v == 0.0));
        for p in 0..5 {
            for i in 0..=50 {
                assert_eq!(paths.x[[p, i, 0]], 1.25);
            }
        }
    }

    #[test]
    fn scaled_volatility_terminal_variance() {
        let (mut model, noise) = setup(10_000, 11);
        model.volatility = Arc::new(crate::model::ConstVolatility(DMatrix::from_element(
            1, 1, 2.0,
        )));
        model.sigma_bound = 2.0 + 1e-9;
        let paths = simulate_state_p0(&model, &noise).unwrap();
        let terminal: Vec<f64> = (0..10_000).map(|p| paths.x[[p, 50, 0]]).collect();
        let sq: Vec<f64> = terminal.iter().map(|x| x * x).collect();
        let est = Estimate::from_samples(&sq);
        assert!(est.within(4.0, 3.0), "Var(X_T) {est}");
    }

    #[test]
    fn zero_loading_density_is_one() {
        let (model, noise) = setup(50, 13);
        let paths = simulate_state_p0(&model, &noise).unwrap();
        let control = constant_control(&noise, 0.0);
        let weights = girsanov_density(&model, &control, &paths, &noise).unwrap();
        for p in 0..50 {
            assert_eq!(weights.terminal_density(p), 1.0);
        }
    }

    #[test]
    fn constant_loading_matches_closed_form_log_density() {
        let (model, noise) = setup(40, 17);
        let paths = simulate_state_p0(&model, &noise).unwrap();
        let c = 0.8;
        let control = constant_control(&noise, c);
        let weights = girsanov_density(&model, &control, &paths, &noise).unwrap();
        let dt = noise.tg.dt();
        for p in 0..40 {
            // oracle: c * W_T - c^2 T / 2 with the same discrete sums
            let mut w_t = 0.0;
            let mut comp = 0.0;
            for i in 0..50 {
                for j in 0..4 {
                    w_t += c * noise.increments[[p, i, j, 0]];
                    comp += 0.5 * c * c * noise.grid.mass(j) * dt;
                }
            }
            assert_abs_diff_eq!(weights.terminal_log(p), w_t - comp, epsilon = 1e-12);
        }
    }

    #[test]
    fn density_mean_is_one() {
        let (model, noise) = setup(10_000, 19);
        let paths = simulate_state_p0(&model, &noise).unwrap();
        let control = constant_control(&noise, 0.5);
        let weights = girsanov_density(&model, &control, &paths, &noise).unwrap();
        let densities = weights.terminal_densities();
        assert!(densities.iter().all(|&d| d > 0.0 && d.is_finite()));
        let est = Estimate::from_samples(&densities);
        assert!(est.within(1.0, 3.0), "mean density {est}");
    }

    #[test]
    fn controlled_zero_loading_equals_reference_bitwise() {
        let (model, noise) = setup(20, 23);
        let reference = simulate_state_p0(&model, &noise).unwrap();
        let control = constant_control(&noise, 0.0);
        let tilted = simulate_state_controlled(&model, &control, &noise).unwrap();
        assert_eq!(reference.x, tilted.x);
        assert_eq!(tilted.measure, MeasureTag::ControlledDirect);
    }

    #[test]
    fn constant_drift_terminal_mean() {
        let (model, noise) = setup(10_000, 29);
        let control = constant_control(&noise, 1.0);
        let paths = simulate_state_controlled(&model, &control, &noise).unwrap();
        let terminal: Vec<f64> = (0..10_000).map(|p| paths.x[[p, 50, 0]]).collect();
        let est = Estimate::from_samples(&terminal);
        assert!(est.within(1.0, 3.0), "E[X_T] {est}");
    }

    #[test]
    fn randomised_control_drifts_at_the_atom_average() {
        let (model, noise) = setup(10_000, 31);
        // two atoms, 0 and 2, half the mass each
        let mut control = constant_control(&noise, 0.0);
        for p in 0..noise.n_paths {
            for i in 0..50 {
                control[[p, i, 2]] = 2.0;
                control[[p, i, 3]] = 2.0;
            }
        }
        let paths = simulate_state_controlled(&model, &control, &noise).unwrap();
        let terminal: Vec<f64> = (0..10_000).map(|p| paths.x[[p, 50, 0]]).collect();
        let est = Estimate::from_samples(&terminal);
        assert!(est.within(1.0, 3.0), "E[X_T] {est}");
    }

    #[test]
    fn left_inverse_identity_and_column() {
        let id = DMatrix::<f64>::identity(3, 3);
        let inv = left_inverse_sigma(&id).unwrap();
        assert!((inv - DMatrix::<f64>::identity(3, 3)).norm() < 1e-12);

        let col = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let inv = left_inverse_sigma(&col).unwrap();
        assert_eq!(inv.nrows(), 1);
        assert_eq!(inv.ncols(), 2);
        assert_abs_diff_eq!(inv[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(inv[(0, 1)], 0.0, epsilon = 1e-12);
        let product = &inv * &col;
        assert_abs_diff_eq!(product[(0, 0)], 1.0, epsilon = 1e-10);

        let zero = DMatrix::<f64>::zeros(2, 1);
        assert!(matches!(
            left_inverse_sigma(&zero),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn reweighted_expectation_recovers_shifted_mean() {
        let (model, noise) = setup(10_000, 37);
        let paths = simulate_state_p0(&model, &noise).unwrap();
        let control = constant_control(&noise, 1.0);
        let weights = girsanov_density(&model, &control, &paths, &noise).unwrap();
        // E under the controlled measure of X_T is x0 + T = 1
        let terminal: Vec<f64> = (0..10_000).map(|p| paths.x[[p, 50, 0]]).collect();
        let est = reweighted_expectation(&terminal, &weights);
        assert!(est.within(1.0, 3.0), "reweighted E[X_T] {est}");
        // constants factor out
        let consts = vec![2.0; 10_000];
        let est = reweighted_expectation(&consts, &weights);
        assert!(est.within(2.0, 3.0), "reweighted const {est}");
    }
}
