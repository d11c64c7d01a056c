use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use netcbf::contract::{
    check_validity, combine_coupling, eval_lambda, iterate_contract, lambda_inner, sample_network, search_contract,
    small_gain_bounds, LambdaSource, NodeProblem, StlContract,
};
use netcbf::polytope::Polytope;
use netcbf::rci::{fan_template, LinearSubsystem, RciOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const AXIS_MAX: f64 = 1.0;
const POINTS: usize = 9;

/// Path graph `0 - 1 - 2`; the middle node's two couplings are combined.
fn network() -> Vec<NodeProblem> {
    let neighbors = [vec![1], vec![0, 2], vec![1]];
    let (template, _) = fan_template(8, [1.0, 0.5]);
    neighbors
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            let col = [0.002, 0.05];
            let e_coupling = DMatrix::from_fn(2, nb.len(), |r, _| col[r]);
            let sys = LinearSubsystem {
                a: dmatrix![1.0, 0.1; -0.1, 0.95],
                b: dmatrix![0.0; 0.1],
                e_coupling,
                e_exo: dmatrix![0.0; 0.1],
                output: dvector![1.0, 0.0],
                ts: 0.1,
                neighbors: nb.clone(),
            };
            let (sys, axis) = combine_coupling(&sys).unwrap();
            NodeProblem {
                id: i,
                sys,
                axes: vec![axis],
                q0: DVector::from_element(template.nrows(), 1e-3),
                template: template.clone(),
                exo: Polytope::symmetric_box(&[0.1]),
                w_u_max: dvector![0.001, 0.002],
                input: Polytope::symmetric_box(&[3.0]),
                caps: Vec::new(),
                delay: None,
                options: RciOptions { feedback_columns: Some(vec![1]), ..Default::default() },
            }
        })
        .collect()
}

#[test]
fn sampled_lambda_never_underestimates() {
    let nodes = network();
    let samples = sample_network(&nodes, AXIS_MAX, POINTS).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (node, s) in nodes.iter().zip(&samples) {
        assert!(s.monotone);
        for _ in 0..50 {
            let y = rng.gen_range(0.0..AXIS_MAX);
            let exact = eval_lambda(node, &[y]).unwrap();
            assert!(exact.rci.converged);
            let inner = lambda_inner(s, &[y]).unwrap();
            assert!(inner >= exact.value - 1e-6, "node {}: λ̂({y}) = {inner} < λ = {}", node.id, exact.value);
        }
    }
}

#[test]
fn valid_contract_keeps_the_network_invariant() {
    let nodes = network();
    let samples = sample_network(&nodes, AXIS_MAX, POINTS).unwrap();
    let contract = search_contract(&samples, 100).unwrap();
    let y = contract.y_max.clone();
    assert!(check_validity(&y, LambdaSource::Samples(&samples)).unwrap());
    for w in contract.history.windows(2) {
        assert!(w[0].iter().zip(&w[1]).all(|(a, b)| a <= b));
    }
    for h in &contract.history {
        assert!(h.iter().zip(&y).all(|(a, b)| *a <= *b + 1e-9));
    }

    let rcis: Vec<_> = contract.rcis.iter().map(|r| r.clone().unwrap()).collect();
    let relaxed: Vec<Polytope> = rcis.iter().map(|r| r.set.with_offsets(r.set.offsets().add_scalar(1e-6))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sign = |rng: &mut ChaCha8Rng, r: f64| if rng.gen_bool(0.5) { r } else { -r };
    for _trial in 0..5 {
        let mut x: Vec<DVector<f64>> = rcis
            .iter()
            .map(|r| {
                let dir = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
                r.set.support_point(&dir).unwrap().1.unwrap() * rng.gen_range(0.0..=1.0)
            })
            .collect();
        for t in 0..200 {
            let outputs: Vec<f64> = nodes.iter().zip(&x).map(|(n, xi)| n.sys.output.dot(xi)).collect();
            let mut next = Vec::with_capacity(nodes.len());
            for (i, n) in nodes.iter().enumerate() {
                let s = n.axis_values(&outputs)[0];
                let w_m = dvector![s, sign(&mut rng, 0.1)];
                let w_u = dvector![sign(&mut rng, 0.001), sign(&mut rng, 0.002)];
                let u = rcis[i].policy(&x[i], &w_m);
                assert!(u[0].abs() <= 3.0 + 1e-8);
                next.push(n.sys.step(&x[i], &u, &w_m, &w_u));
            }
            x = next;
            for (i, xi) in x.iter().enumerate() {
                assert!(relaxed[i].contains(xi, 0.0).unwrap(), "t = {t}: node {i} left its RCI");
                assert!(nodes[i].sys.output.dot(xi).abs() <= y[i] + 1e-6, "t = {t}: node {i} output bound");
            }
        }
    }
}

#[test]
fn linear_contract_iteration_respects_small_gain_bound() {
    let (mu, nu, d) = (1.0, 0.5, 1.0);
    let (b1, b2) = small_gain_bounds(mu, mu, nu, nu, d, d).unwrap();
    let contract = StlContract {
        assume_env: netcbf::stl::Formula::True,
        assume_neighbors: netcbf::stl::Formula::True,
        guarantee: netcbf::stl::Formula::True,
        assumption_params: vec!["y_0".into(), "y_1".into()],
        guarantee_params: vec!["y_0".into(), "y_1".into()],
        lambda_hat: Box::new(move |y| Ok(vec![mu * d + nu * y[1], mu * d + nu * y[0]])),
        gamma: Box::new(|y| Ok(y.to_vec())),
    };
    let seq = iterate_contract(&contract, &[0.0, 0.0], 200, None).unwrap();
    let last = seq.last().unwrap();
    assert!(last[0] <= b1 + 1e-9 && last[1] <= b2 + 1e-9);
    assert!((last[0] - b1).abs() < 1e-9);
}
