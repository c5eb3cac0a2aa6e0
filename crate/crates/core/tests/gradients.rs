//! Finite-difference agreement of every backward pass, over 20 seeds.

use zocertify::checks::{composite_checks, estimator_checks, layer_checks, run_checks, Check};

fn assert_all_pass(checks: &[Check]) {
    let outcomes = run_checks(checks, 20);
    for o in &outcomes {
        println!("{:<24} max_error {:.3e} (tol {:.0e})", o.name, o.max_error, o.tolerance);
    }
    let failed: Vec<_> = outcomes.iter().filter(|o| !o.passed).collect();
    assert!(failed.is_empty(), "failed checks: {failed:#?}");
}

#[test]
fn layers_match_finite_differences() {
    assert_all_pass(&layer_checks());
}

#[test]
fn composites_match_finite_differences() {
    assert_all_pass(&composite_checks());
}

#[test]
fn estimators_and_chain_rule() {
    assert_all_pass(&estimator_checks());
}

#[test]
fn corrupted_backward_is_reported_by_name() {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use zocertify::checks::{backward_error, normal_tensor, outcomes_csv};
    use zocertify::numerics::{Conv2d, Tensor};

    let corrupted = Check {
        name: "conv2d",
        tolerance: 1e-4,
        run: Box::new(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let conv = Conv2d::from_weights(normal_tensor(&[3, 2, 3, 3], &mut rng), normal_tensor(&[3], &mut rng), 1, 1)?;
            let x = normal_tensor(&[2, 2, 5, 5], &mut rng);
            backward_error(
                &conv,
                &x,
                &|m: &Conv2d, x: &Tensor| Ok((m.forward(x)?, x.clone())),
                &|m: &mut Conv2d, c: &Tensor, g: &Tensor| Ok(m.backward(c, g)?.scale(1.01)),
                &mut rng,
                usize::MAX,
            )
        }),
    };
    let outcomes = run_checks(&[corrupted], 3);
    assert!(!outcomes[0].passed);
    let csv = String::from_utf8(outcomes_csv(&outcomes).unwrap()).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("conv2d,3,"), "{csv}");
    assert!(csv.contains(",fail,"));
}
