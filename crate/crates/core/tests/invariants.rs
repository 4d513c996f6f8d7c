//! Cross-module statistical and exact invariants: image-measure identities,
//! the stochastic-integral isometry, reweighted-versus-direct agreement,
//! scheme-order decay, moment monotonicity, and scheduling determinism.

use std::sync::Arc;

use ndarray::{Array3, Array4};
use proptest::prelude::*;

use pasim_core::dynamics::{
    constant_control, girsanov_density, reweighted_expectation, simulate_state_controlled,
    simulate_state_p0,
};
use pasim_core::grid::{IntensityGrid, TimeGrid};
use pasim_core::measure::{
    integrate_intensity, integrate_stochastic, pushforward, pushforward_identity_sides,
    simulate_base_measure,
};
use pasim_core::model::{quadratic_benchmark, ModelSpec};
use pasim_core::rng::{standard_normal, Stream};
use pasim_core::stats::Estimate;

fn hash_unit(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    0.5 * (standard_normal(seed, Stream::Custom(11), a, b, c, 0).tanh() + 1.0)
}

#[test]
fn image_measure_identity_on_random_triples() {
    // one hundred random (integrand, target set, map) triples
    let grid = IntensityGrid::uniform(16).unwrap();
    for trial in 0..100u64 {
        let n_levels = 1 + (hash_unit(1, trial, 0, 0) * 6.0) as usize;
        let control = Array3::from_shape_fn((2, 3, 16), |(p, i, j)| {
            let u = hash_unit(2, trial, (p * 3 + i) as u64, j as u64);
            (u * n_levels as f64).floor() / n_levels as f64
        });
        let pushed = pushforward(&control, &grid).unwrap();
        let a = hash_unit(3, trial, 0, 0);
        let b = 2.0 * hash_unit(4, trial, 0, 0) - 1.0;
        let cutoff = hash_unit(5, trial, 0, 0);
        let g = |u: f64| (a * u + b).cos() + u * u;
        let in_set = |u: f64| u <= cutoff;
        for p in 0..2 {
            for i in 0..3 {
                let (cell_side, atom_side) =
                    pushforward_identity_sides(&control, &pushed, &grid, p, i, g, in_set);
                assert!(
                    (cell_side - atom_side).abs() <= 1e-12,
                    "trial {trial}: {cell_side} vs {atom_side}"
                );
                // weights sum to one at every node
                let total: f64 = pushed.atoms(p, i).iter().map(|&(_, w)| w).sum();
                assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn stochastic_integral_isometry_on_random_fields() {
    let grid = IntensityGrid::uniform(8).unwrap();
    let tg = TimeGrid::new(1.0, 25).unwrap();
    let n_paths = 10_000;
    let noise = Arc::new(simulate_base_measure(&grid, &tg, 1, n_paths, 307, Stream::Base).unwrap());
    let dt = tg.dt();
    for trial in 0..100u64 {
        // bounded deterministic field varying over steps and cells
        let field = Array4::from_shape_fn((n_paths, 25, 8, 1), |(_, i, j, _)| {
            2.0 * hash_unit(6, trial, i as u64, j as u64) - 1.0
        });
        let integral = integrate_stochastic(&field, &noise).unwrap();
        let terminal: Vec<f64> = (0..n_paths).map(|p| integral[[p, 25]]).collect();
        let sq: Vec<f64> = terminal.iter().map(|v| v * v).collect();
        let est = Estimate::from_samples(&sq);
        let mut expected = 0.0;
        for i in 0..25 {
            for j in 0..8 {
                let f = field[[0, i, j, 0]];
                expected += f * f * grid.mass(j) * dt;
            }
        }
        assert!(
            est.within(expected, 4.0),
            "trial {trial}: isometry {est} vs {expected}"
        );
    }
}

#[test]
fn reweighted_and_direct_expectations_agree() {
    let model = quadratic_benchmark(1.0);
    let grid = IntensityGrid::uniform(8).unwrap();
    let tg = TimeGrid::new(1.0, 50).unwrap();
    let n_paths = 10_000;
    let reference_noise =
        Arc::new(simulate_base_measure(&grid, &tg, 1, n_paths, 401, Stream::Base).unwrap());
    let reference = simulate_state_p0(&model, &reference_noise).unwrap();
    // an independent ensemble drives the direct route
    let direct_noise =
        Arc::new(simulate_base_measure(&grid, &tg, 1, n_paths, 402, Stream::Base).unwrap());

    for trial in 0..10u64 {
        // bounded deterministic control varying over steps and cells
        let control = Array3::from_shape_fn((n_paths, 50, 8), |(_, i, j)| {
            2.0 * hash_unit(7, trial, i as u64, j as u64) - 1.0
        });
        let weights = girsanov_density(&model, &control, &reference, &reference_noise).unwrap();
        let densities = weights.terminal_densities();
        assert!(densities.iter().all(|&d| d > 0.0 && d.is_finite()));
        let mean_density = Estimate::from_samples(&densities);
        assert!(
            mean_density.within(1.0, 3.0),
            "trial {trial}: mean density {mean_density}"
        );

        let direct = simulate_state_controlled(&model, &control, &direct_noise).unwrap();
        for power in [1, 2] {
            let values: Vec<f64> = (0..n_paths)
                .map(|p| reference.x[[p, 50, 0]].powi(power))
                .collect();
            let rew = reweighted_expectation(&values, &weights);
            let dir_vals: Vec<f64> = (0..n_paths)
                .map(|p| direct.x[[p, 50, 0]].powi(power))
                .collect();
            let dir = Estimate::from_samples(&dir_vals);
            let combined = (rew.se * rew.se + dir.se * dir.se).sqrt();
            assert!(
                (rew.value - dir.value).abs() <= 3.0 * combined,
                "trial {trial}, power {power}: {rew} vs {dir}"
            );
        }
    }
}

#[test]
fn euler_mean_error_halves_with_the_step() {
    // linear mean-reverting drift: the scheme's mean is x0 (1 - 2 dt)^n,
    // the true mean x0 exp(-2T); shared noise cancels in the comparison
    let mut model = quadratic_benchmark(1.0);
    model.drift_loading = Arc::new(pasim_core::model::StateScaledDriftLoading {
        scale: -2.0,
        clamp: 5.0,
    });
    model.lambda_bound = 10.0 + 1e-9;
    model.x0[0] = 1.0;
    let grid = IntensityGrid::uniform(4).unwrap();
    let analytic = (-2.0f64).exp();
    let n_paths = 100_000;
    let mut errors = Vec::new();
    for &n_steps in &[10usize, 20] {
        let tg = TimeGrid::new(1.0, n_steps).unwrap();
        let noise =
            Arc::new(simulate_base_measure(&grid, &tg, 1, n_paths, 499, Stream::Base).unwrap());
        let control = constant_control(&noise, 1.0);
        let paths = simulate_state_controlled(&model, &control, &noise).unwrap();
        let terminal: Vec<f64> = (0..n_paths).map(|p| paths.x[[p, n_steps, 0]]).collect();
        let est = Estimate::from_samples(&terminal);
        errors.push((est.value - analytic).abs());
    }
    let ratio = errors[0] / errors[1];
    assert!(
        (ratio - 2.0).abs() <= 0.6,
        "halving ratio {ratio}, errors {errors:?}"
    );
}

#[test]
fn supremum_moment_grows_with_the_sensitivity_moment() {
    use pasim_core::agent::HamiltonianSpec;
    use pasim_core::principal::{
        moment_diagnostics, simulate_best_response, InitialUtility, LPolicy, PrincipalSpec,
        TerminalMinusPayment, ZPolicy,
    };
    use pasim_core::weakform::discounted_split;

    let ham = HamiltonianSpec::grid(Arc::new(quadratic_benchmark(1.0))).unwrap();
    let spec = PrincipalSpec::unconstrained(Arc::new(TerminalMinusPayment), 0.0);
    let grid = IntensityGrid::uniform(16).unwrap();
    let tg = TimeGrid::new(1.0, 50).unwrap();
    let mut previous: Option<(f64, f64)> = None;
    for &z in &[0.0, 0.8, 1.6] {
        let contract = simulate_best_response(
            &ham,
            &spec,
            InitialUtility::Fixed(0.0),
            &ZPolicy::constant(vec![z]),
            &LPolicy::Zero,
            &grid,
            &tg,
            4_000,
            509,
        )
        .unwrap();
        let split = discounted_split(&ham.model, &contract).unwrap();
        let diag = moment_diagnostics(&ham.model, &contract, 2.0, 4.0, 1e9).unwrap();
        // supremum moment of the joint process
        let mut sup_moment = 0.0;
        for p in 0..4_000 {
            let mut best: f64 = 0.0;
            for i in 0..=50 {
                let xs = contract.x.x[[p, i, 0]];
                let ys = split.script_y[[p, i]];
                best = best.max((xs * xs + ys * ys).sqrt());
            }
            sup_moment += best * best;
        }
        sup_moment /= 4_000.0;
        assert!(sup_moment.is_finite());
        if let Some((prev_z_mom, prev_sup)) = previous {
            assert!(diag.z_moment >= prev_z_mom);
            assert!(
                sup_moment >= prev_sup,
                "supremum moment not monotone: {sup_moment} after {prev_sup}"
            );
        }
        previous = Some((diag.z_moment, sup_moment));
    }
}

#[test]
fn scheduling_does_not_change_results() {
    // the same simulation in a single-thread pool and the ambient pool
    let model = quadratic_benchmark(1.0);
    let grid = IntensityGrid::uniform(8).unwrap();
    let tg = TimeGrid::new(1.0, 25).unwrap();
    let run = |model: &ModelSpec| {
        let noise = Arc::new(simulate_base_measure(&grid, &tg, 1, 512, 601, Stream::Base).unwrap());
        let paths = simulate_state_p0(model, &noise).unwrap();
        (noise.increments.clone(), paths.x)
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let single = pool.install(|| run(&model));
    let ambient = run(&model);
    assert_eq!(single.0, ambient.0);
    assert_eq!(single.1, ambient.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pushforward_conserves_mass_and_identity(levels in 1usize..6, offset in -1.0f64..1.0) {
        let grid = IntensityGrid::uniform(12).unwrap();
        let control = Array3::from_shape_fn((1, 2, 12), |(_, i, j)| {
            offset + ((i + j * levels) % levels) as f64 / levels as f64
        });
        let pushed = pushforward(&control, &grid).unwrap();
        for i in 0..2 {
            let atoms = pushed.atoms(0, i);
            prop_assert!(atoms.len() <= levels.min(12));
            let total: f64 = atoms.iter().map(|&(_, w)| w).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let (cell, atom) = pushforward_identity_sides(
                &control, &pushed, &grid, 0, i, |u| u * u + 1.0, |_| true,
            );
            prop_assert!((cell - atom).abs() <= 1e-12);
        }
    }

    #[test]
    fn intensity_integral_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let grid = IntensityGrid::uniform(4).unwrap();
        let tg = TimeGrid::new(1.0, 10).unwrap();
        let f1 = Array3::from_shape_fn((1, 10, 4), |(_, i, j)| (i + j) as f64 * 0.1);
        let f2 = Array3::from_shape_fn((1, 10, 4), |(_, i, j)| ((i * j) as f64).sin());
        let combo = Array3::from_shape_fn((1, 10, 4), |idx| a * f1[idx] + b * f2[idx]);
        let i1 = integrate_intensity(&f1, &grid, &tg).unwrap();
        let i2 = integrate_intensity(&f2, &grid, &tg).unwrap();
        let ic = integrate_intensity(&combo, &grid, &tg).unwrap();
        for i in 0..=10 {
            prop_assert!((ic[[0, i]] - (a * i1[[0, i]] + b * i2[[0, i]])).abs() <= 1e-12);
        }
    }
}
