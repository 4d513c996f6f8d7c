//! Incentive-compatibility checks on the quadratic benchmark: the contract
//! built from a unit sensitivity pays the promised initial utility to the
//! best responder, no perturbed response does better, and the value-minus-
//! cost process drifts only for suboptimal responses.

use std::sync::Arc;

use pasim_core::agent::{
    agent_value, best_response, verify_value_martingale, HamiltonianSpec, ValuationRoute,
};
use pasim_core::dynamics::{constant_control, girsanov_density, simulate_state_p0, ControlField};
use pasim_core::grid::{IntensityGrid, TimeGrid};
use pasim_core::measure::simulate_base_measure;
use pasim_core::model::quadratic_benchmark;
use pasim_core::principal::{
    generate_contract, InitialUtility, LPolicy, PrincipalSpec, TerminalMinusPayment, ZPolicy,
};
use pasim_core::rng::Stream;

const N_PATHS: usize = 10_000;
const N_STEPS: usize = 50;
const N_CELLS: usize = 16;

struct Setup {
    ham: HamiltonianSpec,
    x: pasim_core::dynamics::StatePaths,
    contract: pasim_core::principal::SimulatedContract,
}

fn setup(seed: u64) -> Setup {
    let ham = HamiltonianSpec::grid(Arc::new(quadratic_benchmark(1.0))).unwrap();
    let spec = PrincipalSpec::unconstrained(Arc::new(TerminalMinusPayment), 0.0);
    let grid = IntensityGrid::uniform(N_CELLS).unwrap();
    let tg = TimeGrid::new(1.0, N_STEPS).unwrap();
    let noise =
        Arc::new(simulate_base_measure(&grid, &tg, 1, N_PATHS, seed, Stream::Base).unwrap());
    let x = simulate_state_p0(&ham.model, &noise).unwrap();
    let contract = generate_contract(
        &ham,
        &spec,
        InitialUtility::Fixed(0.0),
        &ZPolicy::constant(vec![1.0]),
        &LPolicy::Zero,
        &x,
    )
    .unwrap();
    Setup { ham, x, contract }
}

fn value_of(setup: &Setup, control: &ControlField) -> pasim_core::stats::Estimate {
    let model = &setup.ham.model;
    let weights = girsanov_density(model, control, &setup.x, &setup.x.driven_by).unwrap();
    agent_value(
        model,
        &setup.contract.xi,
        control,
        &setup.x,
        ValuationRoute::Reweighted(&weights),
    )
    .unwrap()
}

#[test]
fn best_response_earns_the_promised_initial_utility() {
    let s = setup(101);
    let z_field = s.contract.z_field();
    let a_star = best_response(&s.ham, &s.x, &s.contract.y, &z_field).unwrap();
    // the quadratic maximiser at unit sensitivity is the unit action
    assert!(a_star.iter().all(|&u| (u - 1.0).abs() < 1e-12));
    let v_star = value_of(&s, &a_star);
    assert!(v_star.within(0.0, 3.0), "best-response value {v_star}");

    // the lazy response loses the full effort premium
    let lazy = constant_control(&s.x.driven_by, 0.0);
    let v_lazy = value_of(&s, &lazy);
    assert!(v_lazy.within(-0.5, 3.0), "lazy value {v_lazy}");
}

#[test]
fn no_perturbed_response_beats_the_maximiser() {
    let s = setup(103);
    let noise = &s.x.driven_by;
    let z_field = s.contract.z_field();
    let a_star = best_response(&s.ham, &s.x, &s.contract.y, &z_field).unwrap();
    let v_star = value_of(&s, &a_star);

    let mut perturbed: Vec<(String, ControlField)> = Vec::new();
    for &u in &[-1.0, -0.5, 0.0, 0.5, 1.5, 2.0] {
        perturbed.push((format!("constant {u}"), constant_control(noise, u)));
    }
    // randomised mixtures across the cell partition
    for &(lo, hi) in &[(0.0, 2.0), (0.5, 1.5)] {
        let mut c = constant_control(noise, lo);
        for p in 0..N_PATHS {
            for i in 0..N_STEPS {
                for j in N_CELLS / 2..N_CELLS {
                    c[[p, i, j]] = hi;
                }
            }
        }
        perturbed.push((format!("mixture {lo}/{hi}"), c));
    }
    // early effort, then shirk
    let mut switch = constant_control(noise, 1.0);
    for p in 0..N_PATHS {
        for i in N_STEPS / 2..N_STEPS {
            for j in 0..N_CELLS {
                switch[[p, i, j]] = 0.0;
            }
        }
    }
    perturbed.push(("switch at midpoint".into(), switch));
    // atom shift of the maximiser
    let mut shifted = constant_control(noise, 1.0);
    for p in 0..N_PATHS {
        for i in 0..N_STEPS {
            for j in 0..N_CELLS / 2 {
                shifted[[p, i, j]] = 0.9;
            }
        }
    }
    perturbed.push(("atoms shifted to 0.9/1.0".into(), shifted));

    assert_eq!(perturbed.len(), 10);
    for (name, control) in &perturbed {
        let v = value_of(&s, control);
        let bound = v_star.value + 3.0 * (v.se * v.se + v_star.se * v_star.se).sqrt();
        assert!(
            v.value <= bound,
            "{name} scored {v}, above best response {v_star}"
        );
    }
}

#[test]
fn value_process_drift_separates_optimal_from_lazy() {
    let s = setup(107);
    let noise = &s.x.driven_by;
    let model = &s.ham.model;
    let probes = [(0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0)];

    let z_field = s.contract.z_field();
    let a_star = best_response(&s.ham, &s.x, &s.contract.y, &z_field).unwrap();
    let w_star = girsanov_density(model, &a_star, &s.x, noise).unwrap();
    let report =
        verify_value_martingale(model, &s.contract.y, &a_star, &s.x, &w_star, &probes).unwrap();
    assert!(
        report.all_within(3.0),
        "optimal response drifts: {:?}",
        report.intervals
    );

    let lazy = constant_control(noise, 0.0);
    let w_lazy = girsanov_density(model, &lazy, &s.x, noise).unwrap();
    let report =
        verify_value_martingale(model, &s.contract.y, &lazy, &s.x, &w_lazy, &probes).unwrap();
    assert!(report.none_above(3.0), "lazy drift positive");
    assert!(report.some_below(3.0), "lazy drift not detected");
    // the gap between the maximised and played Hamiltonian is one half
    for iv in &report.intervals {
        assert!(
            (iv.drift.value + 0.5).abs() <= 4.0 * iv.drift.se,
            "lazy drift {} not near -1/2",
            iv.drift.value
        );
    }
}

#[test]
fn zero_sensitivity_contract_penalises_every_effort() {
    // with no sensitivity the agent only pays costs: drift stays nonpositive
    let ham = HamiltonianSpec::grid(Arc::new(quadratic_benchmark(1.0))).unwrap();
    let spec = PrincipalSpec::unconstrained(Arc::new(TerminalMinusPayment), 0.0);
    let grid = IntensityGrid::uniform(8).unwrap();
    let tg = TimeGrid::new(1.0, 25).unwrap();
    let noise = Arc::new(simulate_base_measure(&grid, &tg, 1, 4_000, 109, Stream::Base).unwrap());
    let x = simulate_state_p0(&ham.model, &noise).unwrap();
    let contract = generate_contract(
        &ham,
        &spec,
        InitialUtility::Fixed(0.3),
        &ZPolicy::constant(vec![0.0]),
        &LPolicy::Zero,
        &x,
    )
    .unwrap();
    let probes = [(0.0, 0.5), (0.5, 1.0)];
    for &u in &[0.0, 0.5, 1.0, 2.0] {
        let control = constant_control(&noise, u);
        let w = girsanov_density(&ham.model, &control, &x, &noise).unwrap();
        let report = verify_value_martingale(&ham.model, &contract.y, &control, &x, &w, &probes)
            .unwrap();
        assert!(report.none_above(3.0), "effort {u} produced positive drift");
    }
}
