//! Simulation of the reference martingale measure and its calculus.
//!
//! The reference noise is a family of independent scaled Brownian motions,
//! one per grid cell, with per-cell variance `mass * dt`. Summed over all
//! cells it reproduces a standard Brownian motion, and restricted to a cell
//! subset its quadratic variation grows like the subset mass times time.

use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array3, Array4, Axis};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{IntensityGrid, TimeGrid};
use crate::rng::{standard_normal, Stream};
use crate::stats::Estimate;

/// Seeded ensemble of reference-noise increments, indexed
/// `(path, step, cell, noise dim)`.
#[derive(Debug)]
pub struct BaseMeasurePaths {
    pub grid: IntensityGrid,
    pub tg: TimeGrid,
    pub n_dims: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub stream: Stream,
    /// Gaussian increments with variance `mass(cell) * dt`.
    pub increments: Array4<f64>,
}

/// Draw the increment ensemble. Each entry is a pure function of
/// `(seed, stream, path, step, cell, dim)`, so the result does not depend on
/// how the path loop is scheduled.
pub fn simulate_base_measure(
    grid: &IntensityGrid,
    tg: &TimeGrid,
    n_dims: usize,
    n_paths: usize,
    seed: u64,
    stream: Stream,
) -> Result<BaseMeasurePaths> {
    if n_dims == 0 {
        return Err(Error::InvalidArgument("noise dimension must be >= 1".into()));
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    let (n_steps, n_cells) = (tg.n_steps(), grid.n_cells());
    let dt = tg.dt();
    let scale: Vec<f64> = (0..n_cells).map(|j| (grid.mass(j) * dt).sqrt()).collect();

    let mut increments = Array4::zeros((n_paths, n_steps, n_cells, n_dims));
    increments
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut path_block)| {
            for i in 0..n_steps {
                for j in 0..n_cells {
                    for c in 0..n_dims {
                        path_block[[i, j, c]] = scale[j]
                            * standard_normal(seed, stream, p as u64, i as u64, j as u64, c as u64);
                    }
                }
            }
        });

    Ok(BaseMeasurePaths {
        grid: grid.clone(),
        tg: *tg,
        n_dims,
        n_paths,
        seed,
        stream,
        increments,
    })
}

impl BaseMeasurePaths {
    /// Increment of the cell-aggregated noise at `(path, step)`: a standard
    /// Brownian increment once all cells are included.
    pub fn aggregate_increment(&self, path: usize, step: usize, dim: usize) -> f64 {
        (0..self.grid.n_cells())
            .map(|j| self.increments[[path, step, j, dim]])
            .sum()
    }

    fn check_field_shape(&self, shape: &[usize]) -> Result<()> {
        let want = [self.n_paths, self.tg.n_steps(), self.grid.n_cells(), self.n_dims];
        if shape != want {
            return Err(Error::GridMismatch(format!(
                "field shape {shape:?} does not match ensemble {want:?}"
            )));
        }
        Ok(())
    }
}

/// Integral of a scalar-valued field against the noise:
/// cumulative `sum_i sum_cells field(t_i, v_j) . dM_ij` with left-endpoint
/// evaluation and fixed cell-then-step summation order.
///
/// `field` is indexed `(path, step, cell, dim)`; the result is the cumulative
/// process indexed `(path, step+1)`, starting at zero.
pub fn integrate_stochastic(field: &Array4<f64>, noise: &BaseMeasurePaths) -> Result<Array2<f64>> {
    noise.check_field_shape(field.shape())?;
    let (n_paths, n_steps, n_cells, n_dims) = field.dim();
    let mut out = Array2::zeros((n_paths, n_steps + 1));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut row)| {
            let mut acc = 0.0;
            for i in 0..n_steps {
                for j in 0..n_cells {
                    for c in 0..n_dims {
                        acc += field[[p, i, j, c]] * noise.increments[[p, i, j, c]];
                    }
                }
                row[i + 1] = acc;
            }
        });
    Ok(out)
}

/// Integral of a scalar field against the reference intensity:
/// cumulative `sum_i sum_cells g(t_i, v_j) * mass_j * dt`.
///
/// `field` is indexed `(path, step, cell)`; deterministic given the field.
pub fn integrate_intensity(
    field: &Array3<f64>,
    grid: &IntensityGrid,
    tg: &TimeGrid,
) -> Result<Array2<f64>> {
    let (n_paths, n_steps, n_cells) = field.dim();
    if n_steps != tg.n_steps() || n_cells != grid.n_cells() {
        return Err(Error::GridMismatch(format!(
            "field shape ({n_steps} steps, {n_cells} cells) does not match grid ({}, {})",
            tg.n_steps(),
            grid.n_cells()
        )));
    }
    let dt = tg.dt();
    let mut out = Array2::zeros((n_paths, n_steps + 1));
    for p in 0..n_paths {
        let mut acc = 0.0;
        for i in 0..n_steps {
            for j in 0..n_cells {
                acc += field[[p, i, j]] * grid.mass(j) * dt;
            }
            out[[p, i + 1]] = acc;
        }
    }
    Ok(out)
}

/// Quadratic-variation estimate of the noise restricted to a cell subset,
/// per noise dimension.
#[derive(Debug, Clone)]
pub struct QvReport {
    /// Realised quadratic variation, indexed `(path, dim)`.
    pub per_path: Array2<f64>,
    /// Ensemble mean with standard error, one entry per noise dimension.
    pub mean: Vec<Estimate>,
}

pub fn quadratic_variation(noise: &BaseMeasurePaths, cells: &[usize]) -> Result<QvReport> {
    for &j in cells {
        if j >= noise.grid.n_cells() {
            return Err(Error::InvalidArgument(format!("cell {j} out of range")));
        }
    }
    let (n_paths, n_steps, n_dims) = (noise.n_paths, noise.tg.n_steps(), noise.n_dims);
    let mut per_path = Array2::zeros((n_paths, n_dims));
    for p in 0..n_paths {
        for c in 0..n_dims {
            let mut qv = 0.0;
            for i in 0..n_steps {
                let inc: f64 = cells.iter().map(|&j| noise.increments[[p, i, j, c]]).sum();
                qv += inc * inc;
            }
            per_path[[p, c]] = qv;
        }
    }
    let mean = (0..n_dims)
        .map(|c| {
            let col: Vec<f64> = per_path.column(c).to_vec();
            Estimate::from_samples(&col)
        })
        .collect();
    Ok(QvReport { per_path, mean })
}

/// Realised quadratic variation of a tabulated cumulative process
/// (indexed `(path, step+1)`).
pub fn quadratic_variation_of_process(process: &Array2<f64>) -> QvReport {
    let (n_paths, n_points) = process.dim();
    let mut per_path = Array2::zeros((n_paths, 1));
    for p in 0..n_paths {
        let mut qv = 0.0;
        for i in 1..n_points {
            let d = process[[p, i]] - process[[p, i - 1]];
            qv += d * d;
        }
        per_path[[p, 0]] = qv;
    }
    let col: Vec<f64> = per_path.column(0).to_vec();
    QvReport {
        per_path,
        mean: vec![Estimate::from_samples(&col)],
    }
}

/// Finite-atom image of the reference intensity under a cell-wise map:
/// atoms are the distinct images, weights the summed masses of their
/// pre-image cells.
#[derive(Debug, Clone)]
pub struct RelaxedControlPath {
    pub n_paths: usize,
    pub n_steps: usize,
    /// Atom lists per `(path, step)`, flattened as `path * n_steps + step`.
    atoms: Vec<Vec<(f64, f64)>>,
}

impl RelaxedControlPath {
    pub fn atoms(&self, path: usize, step: usize) -> &[(f64, f64)] {
        &self.atoms[path * self.n_steps + step]
    }

    /// Weighted sum of `g` over the atoms at `(path, step)`.
    pub fn integrate(&self, path: usize, step: usize, g: impl Fn(f64) -> f64) -> f64 {
        self.atoms(path, step)
            .iter()
            .map(|&(u, w)| g(u) * w)
            .sum()
    }
}

/// Push a cell-wise map forward through the grid. `control` is indexed
/// `(path, step, cell)`; cells with bit-identical images merge into one atom
/// whose weight is the exact sum of the cell masses (first-occurrence order).
pub fn pushforward(control: &Array3<f64>, grid: &IntensityGrid) -> Result<RelaxedControlPath> {
    let (n_paths, n_steps, n_cells) = control.dim();
    if n_cells != grid.n_cells() {
        return Err(Error::GridMismatch(format!(
            "control has {n_cells} cells, grid has {}",
            grid.n_cells()
        )));
    }
    let mut atoms = Vec::with_capacity(n_paths * n_steps);
    for p in 0..n_paths {
        for i in 0..n_steps {
            let mut list: Vec<(f64, f64)> = Vec::new();
            for j in 0..n_cells {
                let u = control[[p, i, j]];
                match list.iter_mut().find(|(point, _)| point.to_bits() == u.to_bits()) {
                    Some((_, w)) => *w += grid.mass(j),
                    None => list.push((u, grid.mass(j))),
                }
            }
            atoms.push(list);
        }
    }
    Ok(RelaxedControlPath {
        n_paths,
        n_steps,
        atoms,
    })
}

/// Both sides of the discrete image-measure identity at `(path, step)`:
/// the cell-side sum of `g` over images restricted to pre-images of `in_set`,
/// and the atom-side sum over atoms inside `in_set`. They are the same finite
/// sum reordered, so they agree to machine accuracy.
pub fn pushforward_identity_sides(
    control: &Array3<f64>,
    pushed: &RelaxedControlPath,
    grid: &IntensityGrid,
    path: usize,
    step: usize,
    g: impl Fn(f64) -> f64,
    in_set: impl Fn(f64) -> bool,
) -> (f64, f64) {
    let n_cells = grid.n_cells();
    let mut cell_side = 0.0;
    for j in 0..n_cells {
        let u = control[[path, step, j]];
        if in_set(u) {
            cell_side += g(u) * grid.mass(j);
        }
    }
    let atom_side: f64 = pushed
        .atoms(path, step)
        .iter()
        .filter(|&&(u, _)| in_set(u))
        .map(|&(u, w)| g(u) * w)
        .sum();
    (cell_side, atom_side)
}

/// Convenience used throughout: shared, immutable ensemble handle.
pub type NoiseHandle = Arc<BaseMeasurePaths>;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_noise(n_cells: usize, n_paths: usize, seed: u64) -> BaseMeasurePaths {
        let grid = IntensityGrid::uniform(n_cells).unwrap();
        let tg = TimeGrid::new(1.0, 25).unwrap();
        simulate_base_measure(&grid, &tg, 1, n_paths, seed, Stream::Base).unwrap()
    }

    #[test]
    fn single_cell_reduces_to_brownian_scale() {
        let noise = small_noise(1, 2_000, 11);
        let dt = noise.tg.dt();
        // per-increment variance should be dt
        let mut sum = 0.0;
        let mut count = 0usize;
        for p in 0..noise.n_paths {
            for i in 0..noise.tg.n_steps() {
                let x = noise.increments[[p, i, 0, 0]];
                sum += x * x;
                count += 1;
            }
        }
        let var = sum / count as f64;
        assert_abs_diff_eq!(var, dt, epsilon = 4.0 * dt * (2.0 / count as f64).sqrt());
    }

    #[test]
    fn per_cell_variance_matches_mass_times_dt() {
        let noise = small_noise(4, 10_000, 17);
        let dt = noise.tg.dt();
        for j in 0..4 {
            let mut samples = Vec::new();
            for p in 0..noise.n_paths {
                for i in 0..noise.tg.n_steps() {
                    samples.push(noise.increments[[p, i, j, 0]]);
                }
            }
            let n = samples.len() as f64;
            let mean: f64 = samples.iter().sum::<f64>() / n;
            let var: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            let target = 0.25 * dt;
            let se = target * (2.0 / n).sqrt();
            assert!((var - target).abs() <= 4.0 * se, "cell {j}: var {var}, want {target}");
        }
    }

    #[test]
    fn half_mass_quadratic_variation() {
        let noise = small_noise(4, 10_000, 23);
        let qv = quadratic_variation(&noise, &[0, 1]).unwrap();
        // mass 1/2 over unit horizon
        let est = qv.mean[0];
        assert!(est.within(0.5, 3.0), "qv {est}");
        let all = quadratic_variation(&noise, &[0, 1, 2, 3]).unwrap().mean[0];
        assert!(all.within(1.0, 3.0), "qv {all}");
        let empty = quadratic_variation(&noise, &[]).unwrap();
        assert_eq!(empty.mean[0].value, 0.0);
    }

    #[test]
    fn disjoint_cells_are_uncorrelated() {
        let noise = small_noise(4, 10_000, 29);
        let mut cov = Vec::with_capacity(noise.n_paths);
        for p in 0..noise.n_paths {
            let mut c = 0.0;
            for i in 0..noise.tg.n_steps() {
                let a = noise.increments[[p, i, 0, 0]] + noise.increments[[p, i, 1, 0]];
                let b = noise.increments[[p, i, 2, 0]] + noise.increments[[p, i, 3, 0]];
                c += a * b;
            }
            cov.push(c);
        }
        let est = Estimate::from_samples(&cov);
        assert!(est.within(0.0, 4.0), "covariation {est}");
    }

    #[test]
    fn noise_dimensions_are_uncorrelated() {
        let grid = IntensityGrid::uniform(4).unwrap();
        let tg = TimeGrid::new(1.0, 25).unwrap();
        let noise = simulate_base_measure(&grid, &tg, 2, 10_000, 43, Stream::Base).unwrap();
        // covariation of the two coordinates of the same cell
        for j in 0..4 {
            let mut cov = Vec::with_capacity(noise.n_paths);
            for p in 0..noise.n_paths {
                let mut acc = 0.0;
                for i in 0..25 {
                    acc += noise.increments[[p, i, j, 0]] * noise.increments[[p, i, j, 1]];
                }
                cov.push(acc);
            }
            let est = Estimate::from_samples(&cov);
            assert!(est.within(0.0, 4.0), "cell {j} cross-dim covariation {est}");
        }
        // both coordinates aggregate to standard Brownian motions
        for c in 0..2 {
            let qv = quadratic_variation(&noise, &[0, 1, 2, 3]).unwrap();
            assert!(qv.mean[c].within(1.0, 3.0), "dim {c} qv {}", qv.mean[c]);
        }
    }

    #[test]
    fn stochastic_integral_of_unit_field_is_aggregate_noise() {
        let noise = small_noise(4, 50, 31);
        let field = Array4::ones((50, 25, 4, 1));
        let integral = integrate_stochastic(&field, &noise).unwrap();
        for p in 0..50 {
            let mut w = 0.0;
            for i in 0..25 {
                w += noise.aggregate_increment(p, i, 0);
                assert_eq!(integral[[p, i + 1]], {
                    // same summation order: cells inside step
                    let mut acc = 0.0;
                    for ii in 0..=i {
                        for j in 0..4 {
                            acc += noise.increments[[p, ii, j, 0]];
                        }
                    }
                    acc
                });
            }
            assert_abs_diff_eq!(integral[[p, 25]], w, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_field_integrates_to_zero() {
        let noise = small_noise(2, 10, 37);
        let field = Array4::zeros((10, 25, 2, 1));
        let integral = integrate_stochastic(&field, &noise).unwrap();
        assert!(integral.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn indicator_field_selects_cells_bit_exactly() {
        let noise = small_noise(4, 20, 41);
        let mut field = Array4::zeros((20, 25, 4, 1));
        for p in 0..20 {
            for i in 0..25 {
                field[[p, i, 1, 0]] = 1.0;
                field[[p, i, 3, 0]] = 1.0;
            }
        }
        let integral = integrate_stochastic(&field, &noise).unwrap();
        for p in 0..20 {
            let mut acc = 0.0;
            for i in 0..25 {
                // same association order as the integrator: cell by cell
                acc += 0.0 * noise.increments[[p, i, 0, 0]];
                acc += noise.increments[[p, i, 1, 0]];
                acc += 0.0 * noise.increments[[p, i, 2, 0]];
                acc += noise.increments[[p, i, 3, 0]];
                assert_eq!(integral[[p, i + 1]].to_bits(), acc.to_bits());
            }
        }
    }

    #[test]
    fn intensity_integral_constants_and_indicators() {
        let grid = IntensityGrid::uniform(10).unwrap();
        let tg = TimeGrid::new(1.0, 50).unwrap();
        // g = c
        let field = Array3::from_elem((3, 50, 10), 2.5);
        let integral = integrate_intensity(&field, &grid, &tg).unwrap();
        assert_abs_diff_eq!(integral[[0, 50]], 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(integral[[0, 25]], 1.25, epsilon = 1e-12);
        // g = 1_{v < 0.5}
        let mut field = Array3::zeros((1, 50, 10));
        for i in 0..50 {
            for j in 0..10 {
                if grid.repr(j) < 0.5 {
                    field[[0, i, j]] = 1.0;
                }
            }
        }
        let integral = integrate_intensity(&field, &grid, &tg).unwrap();
        assert_abs_diff_eq!(integral[[0, 50]], 0.5, epsilon = 1e-12);
        // g(s, v) = s: left Riemann sum of s ds
        let mut field = Array3::zeros((1, 50, 10));
        for i in 0..50 {
            for j in 0..10 {
                field[[0, i, j]] = tg.t(i);
            }
        }
        let integral = integrate_intensity(&field, &grid, &tg).unwrap();
        assert!((integral[[0, 50]] - 0.5).abs() < 1.5 * tg.dt());
    }

    #[test]
    fn pushforward_constant_and_indicator_maps() {
        let grid = IntensityGrid::uniform(10).unwrap();
        // constant map
        let control = Array3::from_elem((1, 1, 10), 0.7);
        let pushed = pushforward(&control, &grid).unwrap();
        let atoms = pushed.atoms(0, 0);
        assert_eq!(atoms.len(), 1);
        assert_eq!(atoms[0].0, 0.7);
        assert!((atoms[0].1 - 1.0).abs() < 1e-12);
        // two-valued map split 0.3 / 0.7
        let mut control = Array3::zeros((1, 1, 10));
        for j in 0..10 {
            control[[0, 0, j]] = if grid.repr(j) < 0.3 { 1.0 } else { 2.0 };
        }
        let pushed = pushforward(&control, &grid).unwrap();
        let atoms = pushed.atoms(0, 0);
        assert_eq!(atoms.len(), 2);
        assert_eq!(atoms[0].0, 1.0);
        assert!((atoms[0].1 - 0.3).abs() < 1e-12);
        assert_eq!(atoms[1].0, 2.0);
        assert!((atoms[1].1 - 0.7).abs() < 1e-12);
        // identity map: one atom per representative
        let mut control = Array3::zeros((1, 1, 10));
        for j in 0..10 {
            control[[0, 0, j]] = grid.repr(j);
        }
        let pushed = pushforward(&control, &grid).unwrap();
        assert_eq!(pushed.atoms(0, 0).len(), 10);
        for (j, &(u, w)) in pushed.atoms(0, 0).iter().enumerate() {
            assert_eq!(u, grid.repr(j));
            assert_eq!(w, 0.1);
        }
    }

    #[test]
    fn determinism_across_repeat_runs() {
        let a = small_noise(4, 64, 99);
        let b = small_noise(4, 64, 99);
        assert_eq!(a.increments, b.increments);
        let c = small_noise(4, 64, 100);
        assert_ne!(a.increments, c.increments);
    }
}
