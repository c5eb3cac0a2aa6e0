//! The black-box boundary, checked both behaviourally and on the import
//! surface of the modules that must respect it.

use zocertify::blackbox::toy::Constant;
use zocertify::blackbox::{BlackBox, Phase};
use zocertify::numerics::Tensor;

const TRAINER: &str = include_str!("../src/zo/trainer.rs");
const ESTIMATOR: &str = include_str!("../src/zo/estimator.rs");
const CHAIN: &str = include_str!("../src/zo/chain.rs");
const FO_DS: &str = include_str!("../src/zo/fo_ds.rs");
const SMOOTHING: &str = include_str!("../src/certify/smoothing.rs");

/// Names imported from `crate::<module>` by the non-test part of `source`.
fn imports_from(source: &str, module: &str) -> Vec<String> {
    let body = source.split("#[cfg(test)]").next().unwrap();
    let prefix = format!("use crate::{module}::");
    let mut names = Vec::new();
    for line in body.lines().filter(|l| l.starts_with(&prefix)) {
        let rest = line[prefix.len()..].trim_end_matches(';');
        let rest = rest.trim_start_matches('{').trim_end_matches('}');
        names.extend(rest.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()));
    }
    names
}

fn non_test(source: &str) -> &str {
    source.split("#[cfg(test)]").next().unwrap()
}

#[test]
fn zo_trainer_sees_only_the_query_interface() {
    for name in imports_from(TRAINER, "blackbox") {
        assert!(
            ["BlackBox", "BlackBoxReply", "Phase"].contains(&name.as_str()),
            "trainer imports blackbox::{name}"
        );
    }
    for source in [TRAINER, ESTIMATOR, CHAIN] {
        let body = non_test(source);
        assert!(!body.contains("input_gradient"));
        assert!(!body.contains("blackbox::WhiteBox"));
        assert!(!body.contains("WhiteBox::new"));
        assert!(!body.contains("Classifier"));
    }
    assert!(imports_from(ESTIMATOR, "blackbox").is_empty());
    assert!(imports_from(CHAIN, "blackbox").is_empty());
}

#[test]
fn first_order_baseline_uses_a_separate_white_box_handle() {
    assert_eq!(imports_from(FO_DS, "blackbox"), vec!["WhiteBox".to_string()]);
    assert!(!non_test(FO_DS).contains("BlackBox"));
}

#[test]
fn certification_consumes_only_labels() {
    let names = imports_from(SMOOTHING, "blackbox");
    assert!(!names.iter().any(|n| n.contains("WhiteBox")), "{names:?}");
    let body = non_test(SMOOTHING);
    assert!(!body.contains("probabilities"));
    assert!(!body.contains("input_gradient"));
}

fn constant() -> BlackBox {
    BlackBox::seal(
        Constant {
            input_shape: vec![2],
            classes: 3,
            label: 1,
        },
        Some((0.0, 1.0)),
    )
}

#[test]
fn replies_and_counting() {
    let bb = constant();
    let x = Tensor::new(vec![1, 2], vec![0.2, 0.7]).unwrap();
    let a = bb.query_one(Phase::Training, &x).unwrap();
    let b = bb.query_one(Phase::Training, &x).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.predicted_label, 1);
    assert_eq!(bb.queries().training, 2);

    let batch = Tensor::full(&[7, 2], 0.5);
    assert_eq!(bb.query(Phase::Certification, &batch).unwrap().len(), 7);
    assert_eq!(bb.queries().certification, 7);
    assert_eq!(bb.queries().total(), 9);

    let outside = Tensor::new(vec![1, 2], vec![0.2, 1.5]).unwrap();
    assert!(bb.query(Phase::Training, &outside).is_err());
    let misshapen = Tensor::full(&[1, 3], 0.5);
    assert!(bb.query(Phase::Training, &misshapen).is_err());
    assert_eq!(bb.queries().total(), 9);
}
