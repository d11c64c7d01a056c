use nalgebra::{dmatrix, dvector, DVector};
use netcbf::polytope::Polytope;
use netcbf::rci::{
    compute_mrci, fan_template, one_step_propagate, DisturbanceSpec, LinearSubsystem, RciOptions, RciResult,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn plant() -> LinearSubsystem {
    LinearSubsystem {
        a: dmatrix![1.0, 0.1; -0.1, 0.95],
        b: dmatrix![0.0; 0.1],
        e_coupling: dmatrix![0.0; 0.05],
        e_exo: dmatrix![0.0; 0.1],
        output: dvector![1.0, 0.0],
        ts: 0.1,
        neighbors: vec![1],
    }
}

fn disturbance(y: f64) -> DisturbanceSpec {
    DisturbanceSpec {
        measured: Polytope::symmetric_box(&[y, 0.1]),
        w_u_max: dvector![0.001, 0.002],
        input: Polytope::symmetric_box(&[3.0]),
    }
}

fn options() -> RciOptions {
    RciOptions { feedback_columns: Some(vec![1]), ..Default::default() }
}

fn solve(y: f64, floor: Option<&DVector<f64>>) -> RciResult {
    let (p, _) = fan_template(8, [1.0, 0.5]);
    let q0 = DVector::from_element(p.nrows(), 1e-3);
    compute_mrci(&plant(), &p, &q0, &disturbance(y), &[], floor, &options()).unwrap()
}

#[test]
fn converged_set_is_invariant_under_sampled_disturbances() {
    let sys = plant();
    let r = solve(0.2, None);
    assert!(r.converged);
    assert!(r.set.offsets().iter().all(|v| *v > 0.0));
    let relaxed = r.set.with_offsets(r.set.offsets().add_scalar(1e-6));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let dir = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
        let (_, x) = r.set.support_point(&dir).unwrap();
        let x = x.unwrap() * rng.gen_range(0.9..=1.0);
        let pick = |rng: &mut ChaCha8Rng, r: f64| if rng.gen_bool(0.5) { r } else { -r };
        let w_m = dvector![pick(&mut rng, 0.2), pick(&mut rng, 0.1)];
        let w_u = dvector![pick(&mut rng, 0.001), pick(&mut rng, 0.002)];
        let u = r.policy(&x, &w_m);
        assert!(u[0].abs() <= 3.0 + 1e-8, "input {u}");
        let next = sys.step(&x, &u, &w_m, &w_u);
        assert!(relaxed.contains(&next, 0.0).unwrap(), "successor {next} escapes");
    }
}

#[test]
fn converged_offsets_are_a_fixed_point() {
    let r = solve(0.2, None);
    let step = one_step_propagate(&plant(), r.set.normals(), r.set.offsets(), &disturbance(0.2), &[], None, Some(&[1])).unwrap();
    let excess = (&step.q_plus - r.set.offsets()).max();
    assert!(excess <= 1e-6, "{excess}");
}

#[test]
fn larger_coupling_bound_never_shrinks_the_set() {
    let mut prev: Option<RciResult> = None;
    for y in [0.0, 0.05, 0.1, 0.2, 0.4] {
        let floor = prev.as_ref().map(|r| r.set.offsets().clone());
        let r = solve(y, floor.as_ref());
        if let Some(p) = &prev {
            let diff = r.set.offsets() - p.set.offsets();
            assert!(diff.min() >= -1e-12, "y = {y}: {diff}");
            let lam = |r: &RciResult| r.set.output_bound(&dvector![1.0, 0.0]).unwrap();
            assert!(lam(&r) >= lam(p) - 1e-12);
        }
        prev = Some(r);
    }
}

#[test]
fn frequency_cap_is_respected_or_reported() {
    let (p, [up, down]) = fan_template(8, [1.0, 0.5]);
    let q0 = DVector::from_element(p.nrows(), 1e-3);
    let free = solve(0.2, None);
    let cap = free.set.offsets()[up] * 1.5;
    let capped = compute_mrci(&plant(), &p, &q0, &disturbance(0.2), &[(up, cap), (down, cap)], None, &options())
        .unwrap();
    assert!(capped.set.offsets()[up] <= cap + 1e-9);
    let tight = compute_mrci(&plant(), &p, &q0, &disturbance(0.2), &[(up, 1e-4), (down, 1e-4)], None, &options());
    assert!(tight.is_err());
}
