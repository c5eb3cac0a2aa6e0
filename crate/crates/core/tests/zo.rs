use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use zocertify::blackbox::{BlackBox, Predictor};
use zocertify::data::seed::substream;
use zocertify::data::{generate_synthetic, Dataset, SyntheticSpec, Split};
use zocertify::losses::LossWeights;
use zocertify::models::{Classifier, ClassifierConfig, RdUnet, RdUnetConfig};
use zocertify::numerics::{Mode, Module, Tensor};
use zocertify::zo::{
    cge_estimate, chain_to_params, rge_estimate, train_zo_ruds, Estimator, TrainSchedule, WhiteBoxPath, ZoConfig,
};
use zocertify::Result;

fn rge(q: usize, xi: f64) -> ZoConfig {
    ZoConfig {
        estimator: Estimator::Rge,
        q,
        xi,
        ..ZoConfig::default()
    }
}

fn cge(xi: f64) -> ZoConfig {
    ZoConfig {
        estimator: Estimator::Cge,
        xi,
        ..ZoConfig::default()
    }
}

fn pointwise(f: impl Fn(&[f64]) -> f64 + Sync) -> impl Fn(&[Tensor]) -> Result<Vec<f64>> + Sync {
    move |pts: &[Tensor]| Ok(pts.iter().map(|p| f(p.data())).collect())
}

#[test]
fn rge_is_unbiased_for_a_linear_loss() {
    let a: Vec<f64> = (0..10).map(|i| 0.3 * i as f64 - 1.2).collect();
    let loss = pointwise(|z| z.iter().zip(&a).map(|(x, w)| x * w).sum());
    let z0 = Tensor::new(vec![10], vec![0.1; 10]).unwrap();
    let mut rng = substream(1, &[1]);
    let mut mean = vec![0.0; 10];
    let draws = 100_000;
    for _ in 0..draws {
        let g = rge_estimate(&loss, &z0, &rge(1, 1e-3), &mut rng).unwrap();
        for (m, v) in mean.iter_mut().zip(g.vector.data()) {
            *m += v / draws as f64;
        }
    }
    let err: f64 = mean.iter().zip(&a).map(|(m, w)| (m - w).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a.iter().map(|w| w * w).sum::<f64>().sqrt();
    assert!(err / norm <= 0.02, "relative error {}", err / norm);
}

#[test]
fn rge_recovers_the_gradient_of_a_squared_norm() {
    let loss = pointwise(|z| z.iter().map(|x| x * x).sum());
    let z0 = Tensor::new(vec![5], vec![0.5, -1.0, 0.25, 2.0, -0.75]).unwrap();
    let g = rge_estimate(&loss, &z0, &rge(10_000, 1e-4), &mut substream(2, &[1])).unwrap();
    let want = z0.scale(2.0);
    let rel = g.vector.sub(&want).unwrap().norm() / want.norm();
    assert!(rel <= 0.05, "relative error {rel}");
    assert_eq!(g.queries_spent, 10_001);
}

#[test]
fn cge_is_exact_on_affine_and_quadratic_losses() {
    let z0 = Tensor::new(vec![6], vec![0.2, -0.4, 1.0, 0.0, 3.0, -2.5]).unwrap();
    let a = [1.5, -2.0, 0.25, 4.0, 0.0, -1.0];
    let affine = pointwise(|z| 0.7 + z.iter().zip(&a).map(|(x, w)| x * w).sum::<f64>());
    let g = cge_estimate(&affine, &z0, &cge(0.01)).unwrap();
    for (v, w) in g.vector.data().iter().zip(&a) {
        assert!((v - w).abs() <= 1e-9, "{v} vs {w}");
    }
    assert_eq!(g.queries_spent, 13);

    let quad = pointwise(|z| z.iter().map(|x| x * x).sum());
    let g = cge_estimate(&quad, &z0, &cge(0.01)).unwrap();
    for (v, z) in g.vector.data().iter().zip(z0.data()) {
        assert!((v - 2.0 * z).abs() <= 1e-9, "{v} vs {}", 2.0 * z);
    }
}

fn spec(per_class: usize) -> SyntheticSpec {
    SyntheticSpec {
        classes: 3,
        image_size: 16,
        channels: 1,
        per_class,
        seed: 5,
    }
}

fn classifier() -> Classifier {
    Classifier::new(
        ClassifierConfig {
            conv_widths: [4, 8],
            classes: 3,
            ..ClassifierConfig::default()
        },
        &mut substream(9, &[1]),
    )
    .unwrap()
}

fn denoiser() -> RdUnet {
    RdUnet::new(
        RdUnetConfig {
            base_channels: 2,
            ..RdUnetConfig::default()
        },
        &mut substream(9, &[2]),
    )
    .unwrap()
}

fn schedule(epochs: usize, batch_size: usize) -> TrainSchedule {
    toml::from_str(&format!(
        "epochs = {epochs}\nbatch_size = {batch_size}\nlearning_rate = 0.01\nnoise_std = 0.25"
    ))
    .unwrap()
}

fn state(m: &impl Module) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    m.visit_state("", &mut |name, t| out.push((name.to_string(), t.data().to_vec())));
    out
}

fn eight_examples() -> Dataset {
    let d = generate_synthetic(&spec(3), Split::Train).unwrap();
    d.take(8)
}

#[test]
fn trainer_spends_exactly_the_budgeted_queries() {
    let data = eight_examples();
    assert_eq!(data.len(), 8);
    let bb = BlackBox::seal_image_classifier(classifier());
    let mut den = denoiser();
    let r = train_zo_ruds(&data, &mut den, &bb, &LossWeights::default(), &rge(20, 0.005), &schedule(1, 4), 3).unwrap();
    assert_eq!(r.steps, 2);
    assert_eq!(r.training_queries, 2 * 4 * 21);
    assert_eq!(r.reference_queries, 8);
    assert_eq!(r.log.rows[0].queries_total, 84);
    assert_eq!(r.log.rows[1].queries_total, 168);
    assert!(r.halted.is_none());

    let mut den = denoiser();
    let bb = BlackBox::seal_image_classifier(classifier());
    let r = train_zo_ruds(&data.take(4), &mut den, &bb, &LossWeights::default(), &rge(20, 0.005), &schedule(1, 4), 3)
        .unwrap();
    assert_eq!((r.steps, r.training_queries), (1, 84));

    assert_eq!(cge(0.005).queries_per_estimate(48), 97);
}

#[test]
fn zero_epochs_change_nothing() {
    let data = eight_examples();
    let bb = BlackBox::seal_image_classifier(classifier());
    let mut den = denoiser();
    let before = state(&den);
    let r = train_zo_ruds(&data, &mut den, &bb, &LossWeights::default(), &rge(4, 0.005), &schedule(0, 4), 3).unwrap();
    assert_eq!(r.steps, 0);
    assert_eq!(bb.queries().total(), 0);
    assert_eq!(state(&den), before);
}

#[test]
fn untrained_denoiser_is_the_identity() {
    let x_star = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i * 37) % 101) as f64 / 50.0 - 0.5);
    let out = denoiser().forward(&x_star, Mode::Train).unwrap();
    assert_eq!(out.denoised, x_star);
}

#[test]
fn chain_rule_seeding() {
    let x_star = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i * 13) % 29) as f64 / 29.0);
    let mut den = denoiser();
    let out = den.forward(&x_star, Mode::Train).unwrap();

    den.zero_grad();
    let zero = Tensor::zeros(x_star.shape());
    chain_to_params(WhiteBoxPath::Denoiser { denoiser: &mut den, cache: &out.cache }, &zero, &x_star).unwrap();
    den.visit_params("", &mut |name, p| {
        assert!(p.grad.data().iter().all(|&v| v == 0.0), "{name} has a non-zero gradient");
    });

    let mut rng = substream(4, &[1]);
    let g = Tensor::from_fn(x_star.shape(), |_| rng.gen_range(-1.0..1.0));
    den.zero_grad();
    chain_to_params(WhiteBoxPath::Denoiser { denoiser: &mut den, cache: &out.cache }, &g, &x_star).unwrap();
    let bias = den.head_bias_grad().data()[0];
    assert!((bias + g.sum()).abs() <= 1e-12 * (1.0 + g.sum().abs()), "{bias} vs {}", -g.sum());
}

/// Returns NaN probabilities from the `poison_from`-th call on.
struct Poisoned {
    inner: Classifier,
    calls: AtomicUsize,
    poison_from: usize,
}

impl Predictor for Poisoned {
    fn input_shape(&self) -> Vec<usize> {
        Predictor::input_shape(&self.inner)
    }

    fn classes(&self) -> usize {
        3
    }

    fn predict(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let call = self.calls.fetch_add(1, Ordering::SeqCst);
        let rows = self.inner.predict(batch)?;
        if call >= self.poison_from {
            Ok(rows.into_iter().map(|r| vec![f64::NAN; r.len()]).collect())
        } else {
            Ok(rows)
        }
    }
}

#[test]
fn non_finite_replies_halt_and_keep_the_last_finite_state() {
    let data = eight_examples();
    for poison_from in [1, 6] {
        let bb = BlackBox::seal(
            Poisoned {
                inner: classifier(),
                calls: AtomicUsize::new(0),
                poison_from,
            },
            Some((0.0, 1.0)),
        );
        let mut den = denoiser();
        let before = state(&den);
        let r = train_zo_ruds(&data, &mut den, &bb, &LossWeights::default(), &rge(4, 0.005), &schedule(3, 4), 3)
            .unwrap();
        assert!(r.halted.is_some());
        // Reference call, then one base call and four estimate calls per step.
        assert_eq!(r.steps, (poison_from - 1) / 5);
        assert!(state(&den).iter().all(|(_, v)| v.iter().all(|x| x.is_finite())));
        if r.steps == 0 {
            assert_eq!(state(&den), before);
        }
    }
}

#[test]
fn logged_total_is_the_weighted_sum() {
    let data = eight_examples();
    let bb = BlackBox::seal_image_classifier(classifier());
    let mut den = denoiser();
    let w = LossWeights {
        lambda_cs: 0.7,
        lambda_mmd: 1.3,
    };
    let r = train_zo_ruds(&data, &mut den, &bb, &w, &rge(4, 0.005), &schedule(2, 4), 3).unwrap();
    assert_eq!(r.log.rows.len(), 4);
    for row in &r.log.rows {
        let sum = row.ce + w.lambda_cs * row.cs + w.lambda_mmd * row.mmd;
        assert!((row.total - sum).abs() <= 1e-12, "{row:?}");
    }
}
