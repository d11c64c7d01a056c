mod common;

use common::grid::{error_bound_margin, ieee9, jacobian_gap, linear_model, stack, TS};
use nalgebra::{dmatrix, DMatrix, DVector};
use netcbf::grid::{discretize, step, EventKind, FlowModel, GridNetwork, GridState};
use netcbf::rci::LinearSubsystem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn discretized_linearization_matches_finite_differences() {
    let gap = jacobian_gap(&ieee9());
    assert!(gap < 1e-6, "{gap}");
}

/// `e^M` by squaring a 50-term Taylor sum of `e^{M/2^s}`.
fn taylor_exp(m: &DMatrix<f64>) -> DMatrix<f64> {
    let norm = m.abs().row_sum().max();
    let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = m / 2f64.powi(s);
    let n = m.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut sum = term.clone();
    for k in 1..50 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

#[test]
fn generator_block_matches_series_oracle() {
    let sys = LinearSubsystem {
        a: dmatrix![0.0, 1.0; -12.5, -0.4],
        b: dmatrix![0.0; -0.4],
        e_coupling: dmatrix![0.0, 0.0; 3.0, 9.5],
        e_exo: dmatrix![0.0; 0.4],
        output: DVector::from_vec(vec![1.0, 0.0]),
        ts: 0.0,
        neighbors: vec![1, 2],
    };
    for ts in [0.01, 0.05, 0.5] {
        let d = discretize(&sys, ts);
        let mut aug = DMatrix::zeros(6, 6);
        aug.view_mut((0, 0), (2, 2)).copy_from(&(&sys.a * ts));
        aug.view_mut((0, 2), (2, 1)).copy_from(&(&sys.b * ts));
        aug.view_mut((0, 3), (2, 2)).copy_from(&(&sys.e_coupling * ts));
        aug.view_mut((0, 5), (2, 1)).copy_from(&(&sys.e_exo * ts));
        let ex = taylor_exp(&aug);
        let close = |a: &DMatrix<f64>, b: DMatrix<f64>| (a - b).abs().max() < 1e-13;
        assert!(close(&d.a, ex.view((0, 0), (2, 2)).into_owned()));
        assert!(close(&d.b, ex.view((0, 2), (2, 1)).into_owned()));
        assert!(close(&d.e_coupling, ex.view((0, 3), (2, 2)).into_owned()));
        assert!(close(&d.e_exo, ex.view((0, 5), (2, 1)).into_owned()));
    }
}

/// Kinetic energy plus line potential relative to the injections.
fn energy(net: &GridNetwork, x: &GridState) -> f64 {
    let kinetic: f64 = net
        .buses
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_generator())
        .map(|(i, b)| 0.5 * b.inertia * x.omega[i] * x.omega[i])
        .sum();
    let lines: f64 = net.active_lines().iter().map(|&(i, j, g)| -g * (x.theta[i] - x.theta[j]).cos()).sum();
    let injections: f64 = (0..net.len()).map(|i| net.net_injection(i) * x.theta[i]).sum();
    kinetic + lines - injections
}

#[test]
fn free_response_energy_is_nonincreasing() {
    let net = ieee9();
    let theta0 = net.operating_point().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let zero = vec![0.0; net.len()];
    for _ in 0..5 {
        let mut x = GridState::at_rest(&theta0);
        for i in 0..net.len() {
            x.theta[i] += rng.gen_range(-0.2..0.2);
            if net.buses[i].is_generator() {
                x.omega[i] = rng.gen_range(-0.3..0.3);
            }
        }
        let mut e = energy(&net, &x);
        for k in 0..400 {
            x = step(&net, &x, &zero, &zero, TS);
            let next = energy(&net, &x);
            assert!(next <= e + 1e-8, "step {k}: {e} -> {next}");
            e = next;
        }
    }
}

#[test]
fn tiny_disturbances_follow_the_linear_model() {
    let net = ieee9();
    let theta0 = net.operating_point().unwrap();
    let lin = linear_model(&net, &theta0);
    let zero = vec![0.0; net.len()];
    let mut x = GridState::at_rest(&theta0);
    let mut z = DVector::zeros(lin.a.nrows());
    for k in 0..400 {
        let t = k as f64 * TS;
        let d: Vec<f64> = (0..net.len()).map(|i| 1e-4 * net.buses[i].d_max * (0.7 * t + i as f64).sin()).collect();
        x = step(&net, &x, &zero, &d, TS);
        z = &lin.a * &z + &lin.e * DVector::from_column_slice(&d);
        let gap = (stack(&net, &x, &theta0) - &z).abs().max();
        assert!(gap < 1e-6, "step {k}: gap {gap}");
    }
}

#[test]
fn error_bound_dominates_step_mismatch() {
    let margin = error_bound_margin(&ieee9(), 100, 8);
    assert!(margin >= 0.0, "{margin}");
}

#[test]
fn losing_a_passive_bus_solves_the_reduced_system() {
    let net = GridNetwork::from_toml_str(
        r#"
        omega_max = 0.05
        [[bus]]
        id = 1
        kind = "generator"
        inertia = 2.0
        damping = 1.0
        p_in = 0.6
        u_max = 1.0
        [[bus]]
        id = 2
        kind = "load"
        damping = 1.0
        load = 0.6
        u_max = 1.0
        [[bus]]
        id = 3
        kind = "load"
        damping = 1.0
        u_max = 1.0
        [[line]]
        from = 1
        to = 2
        reactance = 0.25
        [[line]]
        from = 2
        to = 3
        reactance = 0.5
        [[line]]
        from = 3
        to = 1
        reactance = 0.5
        "#,
    )
    .unwrap();
    let after = net.with_event(&EventKind::BusLoss { bus: 3 }).unwrap();
    assert!(after.is_connected());
    let (theta, p_in) = after.new_operating_point(FlowModel::Dc).unwrap();
    assert_eq!(p_in[..2], [0.6, 0.0]);
    // Only line 1-2 remains: 4 (θ₁ − θ₂) = 0.6 with θ₂ = 0.
    assert!((theta[0] - 0.15).abs() < 1e-12);
    assert_eq!(theta[1], 0.0);
}

#[test]
fn bundled_39_bus_case_is_an_equilibrium() {
    let net = GridNetwork::load(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/ieee39.toml"))).unwrap();
    assert_eq!(net.len(), 39);
    assert_eq!(net.active_lines().len(), 46);
    let gens: Vec<usize> = net.buses.iter().filter(|b| b.is_generator()).map(|b| b.id).collect();
    assert_eq!(gens, (30..=39).collect::<Vec<_>>());
    assert!(net.is_connected());
    let theta0 = net.operating_point().unwrap();
    let zero = vec![0.0; net.len()];
    let mut x = GridState::at_rest(&theta0);
    for _ in 0..200 {
        x = step(&net, &x, &zero, &zero, TS);
    }
    let drift = stack(&net, &x, &theta0).amax();
    assert!(drift < 1e-9, "{drift}");
}
