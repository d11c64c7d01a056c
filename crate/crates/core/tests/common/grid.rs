//! Stacked-state helpers and the numerical-consistency checks on the bundled
//! 9-bus case.

use nalgebra::DVector;
use netcbf::grid::{reach, step, GridNetwork, GridState, LinearNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TS: f64 = 0.05;

pub fn ieee9() -> GridNetwork {
    GridNetwork::load(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/ieee9.toml"))).unwrap()
}

pub fn stack(net: &GridNetwork, x: &GridState, theta0: &[f64]) -> DVector<f64> {
    let mut out = Vec::new();
    for (i, b) in net.buses.iter().enumerate() {
        out.push(x.theta[i] - theta0[i]);
        if b.is_generator() {
            out.push(x.omega[i]);
        }
    }
    DVector::from_vec(out)
}

pub fn unstack(net: &GridNetwork, z: &DVector<f64>, theta0: &[f64]) -> GridState {
    let mut x = GridState::at_rest(theta0);
    let mut k = 0;
    for (i, b) in net.buses.iter().enumerate() {
        x.theta[i] += z[k];
        k += 1;
        if b.is_generator() {
            x.omega[i] = z[k];
            k += 1;
        }
    }
    x
}

pub fn linear_model(net: &GridNetwork, theta0: &[f64]) -> LinearNetwork {
    net.linearize_network(theta0).unwrap().discretize(TS)
}

/// Largest entry gap between central differences of the nonlinear step map
/// and the discretized `A`, `B`, `E` at the operating point.
pub fn jacobian_gap(net: &GridNetwork) -> f64 {
    let theta0 = net.operating_point().unwrap();
    let lin = linear_model(net, &theta0);
    let n = lin.a.nrows();
    let zero = vec![0.0; net.len()];
    let eps = 1e-6;
    let map = |z: &DVector<f64>, u: &[f64], d: &[f64]| stack(net, &step(net, &unstack(net, z, &theta0), u, d, TS), &theta0);
    let z0 = DVector::zeros(n);
    let mut gap = 0.0f64;
    for c in 0..n {
        let mut zp = z0.clone();
        let mut zm = z0.clone();
        zp[c] += eps;
        zm[c] -= eps;
        let col = (map(&zp, &zero, &zero) - map(&zm, &zero, &zero)) / (2.0 * eps);
        gap = gap.max((col - lin.a.column(c)).amax());
    }
    for c in 0..net.len() {
        let mut up = zero.clone();
        let mut um = zero.clone();
        up[c] += eps;
        um[c] -= eps;
        let col_b = (map(&z0, &up, &zero) - map(&z0, &um, &zero)) / (2.0 * eps);
        let col_e = (map(&z0, &zero, &up) - map(&z0, &zero, &um)) / (2.0 * eps);
        gap = gap.max((col_b - lin.b.column(c)).amax()).max((col_e - lin.e.column(c)).amax());
    }
    gap
}

/// Smallest `bound − |x⁺ − A x|` over all rows and `samples` random states
/// within half the angle budget; nonnegative when the bound dominates.
pub fn error_bound_margin(net: &GridNetwork, samples: usize, seed: u64) -> f64 {
    let theta0 = net.operating_point().unwrap();
    let cont = net.linearize_network(&theta0).unwrap();
    let lin = cont.discretize(TS);
    let budget = 0.05;
    let lin_err = net.linearization_error_bound(&theta0, &net.line_deviation(&vec![budget; net.len()]));
    let n = lin.a.nrows();
    let mut bound = DVector::zeros(n);
    for (i, b) in net.buses.iter().enumerate() {
        let row = lin.offsets[i] + b.states() - 1;
        bound += reach(&cont.a, &DVector::from_fn(n, |r, _| if r == row { 1.0 } else { 0.0 }), TS, 201) * lin_err[i];
    }
    let zero = vec![0.0; net.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut margin = f64::INFINITY;
    for _ in 0..samples {
        let mut x = GridState::at_rest(&theta0);
        for i in 0..net.len() {
            x.theta[i] += rng.gen_range(-budget / 2.0..budget / 2.0);
            if net.buses[i].is_generator() {
                x.omega[i] = rng.gen_range(-net.omega_max..net.omega_max);
            }
        }
        // The bound assumes angles stay in budget over the whole step.
        let mut probe = x.clone();
        for _ in 0..10 {
            probe = step(net, &probe, &zero, &zero, TS / 10.0);
            assert!(probe.theta.iter().zip(&theta0).all(|(a, b)| (a - b).abs() <= budget));
        }
        let z = stack(net, &x, &theta0);
        let mismatch = (stack(net, &step(net, &x, &zero, &zero, TS), &theta0) - &lin.a * &z).abs();
        margin = margin.min((&bound - mismatch).min());
    }
    margin
}
