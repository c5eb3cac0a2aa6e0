//! The finite-difference and estimator oracle suite behind the `gradcheck`
//! command.
//!
//! Every layer backward pass and every composite network is compared with
//! central differences of the scalar `⟨R, forward(x)⟩` for a random `R`,
//! over the input and all parameters.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blackbox::WhiteBox;
use crate::error::{Error, Result};
use crate::losses::{soft_cross_entropy, soft_cross_entropy_logit_grad};
use crate::models::{AeConfig, Autoencoder, Classifier, ClassifierConfig, RdUnet, RdUnetConfig};
use crate::numerics::gradcheck::{central_differences, relative_error};
use crate::numerics::{
    maxpool2, maxpool2_backward, relu, relu_backward, softmax, BatchNorm2d, Conv2d, ConvTranspose2d, Dense, Mode, Module,
    Param, Tensor,
};
use crate::zo::{cge_estimate, chain_to_params, fo_ds_objective, rge_estimate, Estimator, WhiteBoxPath, ZoConfig};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// One named oracle comparison; `run` returns the measured error for a seed.
pub struct Check {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: Box<dyn Fn(u64) -> Result<f64> + Sync>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub seeds: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub failure: Option<String>,
}

/// A module without parameters, for checking free functions.
#[derive(Clone)]
pub struct Stateless;

impl Module for Stateless {
    fn visit_params(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
    fn visit_state(&self, _: &str, _: &mut dyn FnMut(&str, &Tensor)) {}
    fn visit_state_mut(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Tensor)) {}
}

fn params_of<M: Module>(m: &mut M) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit_params("", &mut |_, p| v.extend_from_slice(p.value.data()));
    v
}

fn grads_of<M: Module>(m: &mut M) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit_params("", &mut |_, p| v.extend_from_slice(p.grad.data()));
    v
}

fn set_params<M: Module>(m: &mut M, values: &[f64]) {
    let mut off = 0;
    m.visit_params("", &mut |_, p| {
        let n = p.value.numel();
        p.value.data_mut().copy_from_slice(&values[off..off + n]);
        off += n;
    });
}

pub fn normal_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut *rng))
}

/// Relative error between a hand-written backward pass and central
/// differences of `⟨R, forward(module, x)⟩`, over the input and every
/// parameter. At most `max_coords` randomly chosen coordinates are compared.
pub fn backward_error<M: Module + Clone, C>(
    module: &M,
    x: &Tensor,
    forward: &dyn Fn(&M, &Tensor) -> Result<(Tensor, C)>,
    backward: &dyn Fn(&mut M, &C, &Tensor) -> Result<Tensor>,
    rng: &mut ChaCha8Rng,
    max_coords: usize,
) -> Result<f64> {
    let (out, cache) = forward(module, x)?;
    let r = normal_tensor(out.shape(), rng);
    let mut m = module.clone();
    m.zero_grad();
    let gx = backward(&mut m, &cache, &r)?;
    let mut analytic = gx.data().to_vec();
    analytic.extend(grads_of(&mut m));

    let mut base = module.clone();
    let theta = params_of(&mut base);
    let nx = x.numel();
    let total = nx + theta.len();
    let coords: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        let mut c = sample(rng, total, max_coords).into_vec();
        c.sort_unstable();
        c
    };
    let mut failure = None;
    let mut eval = |x: &Tensor, m: &M| -> f64 {
        match forward(m, x) {
            Ok((y, _)) => y.dot(&r),
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        }
    };
    let mut numeric = Vec::with_capacity(coords.len());
    let mut xp = x.clone();
    let mut tp = theta.clone();
    for &c in &coords {
        let mut value_at = |delta: f64| {
            if c < nx {
                xp.data_mut()[c] = x.data()[c] + delta;
                let v = eval(&xp, &base);
                xp.data_mut()[c] = x.data()[c];
                v
            } else {
                let k = c - nx;
                tp[k] = theta[k] + delta;
                set_params(&mut base, &tp);
                let v = eval(x, &base);
                tp[k] = theta[k];
                set_params(&mut base, &tp);
                v
            }
        };
        let up = value_at(FD_STEP);
        let down = value_at(-FD_STEP);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    if let Some(e) = failure {
        return Err(e);
    }
    let analytic: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    Ok(relative_error(&analytic, &numeric))
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.05..1.5);
        if rng.gen::<bool>() {
            m
        } else {
            -m
        }
    })
}

fn randomize_bn(bn: &mut BatchNorm2d, rng: &mut impl Rng) {
    let c = bn.channels();
    bn.gamma.value = Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.5));
    bn.beta.value = Tensor::from_fn(&[c], |_| rng.gen_range(-0.5..0.5));
    bn.running_mean = Tensor::from_fn(&[c], |_| rng.gen_range(-0.2..0.2));
    bn.running_var = Tensor::from_fn(&[c], |_| rng.gen_range(0.5..2.0));
}

/// Zero-initialised biases put ReLU inputs exactly on the kink wherever
/// the preceding activations vanish; composites are checked at generic
/// points instead.
fn jitter_biases<M: Module>(m: &mut M, rng: &mut impl Rng) {
    m.visit_params("", &mut |name, p| {
        if name.ends_with("bias") || name.ends_with("beta") {
            for v in p.value.data_mut() {
                let e: f64 = StandardNormal.sample(&mut *rng);
                *v += 0.1 * e;
            }
        }
    });
}

fn small_denoiser(rng: &mut impl Rng) -> Result<RdUnet> {
    let mut d = RdUnet::new(
        RdUnetConfig {
            input_channels: 1,
            base_channels: 2,
            depth: 2,
            image_size: 8,
        },
        rng,
    )?;
    d.randomize_head(rng);
    jitter_biases(&mut d, rng);
    Ok(d)
}

fn small_ae_config() -> AeConfig {
    AeConfig {
        input_channels: 1,
        image_size: 8,
        latent_dim: 6,
        widths: [2, 3],
    }
}

fn small_classifier_config() -> ClassifierConfig {
    ClassifierConfig {
        input_channels: 1,
        image_size: 8,
        conv_widths: [2, 3],
        classes: 3,
    }
}

fn conv_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let conv = Conv2d::from_weights(normal_tensor(&[3, 2, 3, 3], &mut rng), normal_tensor(&[3], &mut rng), 1, 1)?;
    let x = normal_tensor(&[2, 2, 5, 5], &mut rng);
    backward_error(
        &conv,
        &x,
        &|m: &Conv2d, x| Ok((m.forward(x)?, x.clone())),
        &|m, c, g| m.backward(c, g),
        &mut rng,
        usize::MAX,
    )
}

fn strided_conv_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let conv = Conv2d::from_weights(normal_tensor(&[2, 2, 3, 3], &mut rng), normal_tensor(&[2], &mut rng), 2, 1)?;
    let x = normal_tensor(&[2, 2, 6, 6], &mut rng);
    backward_error(
        &conv,
        &x,
        &|m: &Conv2d, x| Ok((m.forward(x)?, x.clone())),
        &|m, c, g| m.backward(c, g),
        &mut rng,
        usize::MAX,
    )
}

fn conv_transpose_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let up = ConvTranspose2d::from_weights(normal_tensor(&[3, 2, 2, 2], &mut rng), normal_tensor(&[2], &mut rng), 2)?;
    let x = normal_tensor(&[2, 3, 3, 3], &mut rng);
    backward_error(
        &up,
        &x,
        &|m: &ConvTranspose2d, x| Ok((m.forward(x)?, x.clone())),
        &|m, c, g| m.backward(c, g),
        &mut rng,
        usize::MAX,
    )
}

fn maxpool_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let x = normal_tensor(&[2, 2, 4, 4], &mut rng);
    backward_error(
        &Stateless,
        &x,
        &|_: &Stateless, x| {
            let (y, arg) = maxpool2(x)?;
            Ok((y, (arg, x.shape().to_vec())))
        },
        &|_, (arg, shape), g| Ok(maxpool2_backward(arg, shape, g)),
        &mut rng,
        usize::MAX,
    )
}

fn relu_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let x = away_from_zero(&[3, 7], &mut rng);
    backward_error(
        &Stateless,
        &x,
        &|_: &Stateless, x| {
            let y = relu(x);
            Ok((y.clone(), y))
        },
        &|_, y, g| Ok(relu_backward(y, g)),
        &mut rng,
        usize::MAX,
    )
}

fn batchnorm_check(mode: Mode) -> impl Fn(u64) -> Result<f64> {
    move |seed| {
        let mut rng = rng_for(seed);
        let mut bn = BatchNorm2d::new(3);
        randomize_bn(&mut bn, &mut rng);
        let x = normal_tensor(&[4, 3, 3, 3], &mut rng);
        backward_error(
            &bn,
            &x,
            &|m: &BatchNorm2d, x| m.forward(x, mode),
            &|m, c, g| m.backward(c, g),
            &mut rng,
            usize::MAX,
        )
    }
}

fn dense_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let dense = Dense::from_weights(normal_tensor(&[4, 6], &mut rng), normal_tensor(&[4], &mut rng))?;
    let x = normal_tensor(&[3, 6], &mut rng);
    backward_error(
        &dense,
        &x,
        &|m: &Dense, x| Ok((m.forward(x)?, x.clone())),
        &|m, c, g| m.backward(c, g),
        &mut rng,
        usize::MAX,
    )
}

fn softmax_ce_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let logits: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
    let raw: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let target: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let probs = |z: &[f64]| softmax(&Tensor::new(vec![1, z.len()], z.to_vec()).expect("row")).expect("softmax");
    let p = probs(&logits);
    let analytic = soft_cross_entropy_logit_grad(&target, p.data());
    let numeric = central_differences(
        |z| soft_cross_entropy(&target, probs(z).data()).unwrap_or(f64::NAN),
        &logits,
        FD_STEP,
    );
    Ok(relative_error(&analytic, &numeric))
}

fn rdunet_check(mode: Mode) -> impl Fn(u64) -> Result<f64> {
    move |seed| {
        let mut rng = rng_for(seed);
        let den = small_denoiser(&mut rng)?;
        let x = normal_tensor(&[2, 1, 8, 8], &mut rng);
        backward_error(
            &den,
            &x,
            &|m: &RdUnet, x| {
                let out = m.forward(x, mode)?;
                Ok((out.denoised, out.cache))
            },
            &|m, c, g| m.backward(c, g),
            &mut rng,
            400,
        )
    }
}

fn encoder_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let mut ae = Autoencoder::new(small_ae_config(), &mut rng)?;
    jitter_biases(&mut ae, &mut rng);
    let x = normal_tensor(&[2, 1, 8, 8], &mut rng);
    backward_error(
        &ae.encoder,
        &x,
        &|m: &crate::models::Encoder, x| m.forward(x),
        &|m, c, g| m.backward(c, g),
        &mut rng,
        400,
    )
}

fn decoder_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let mut ae = Autoencoder::new(small_ae_config(), &mut rng)?;
    jitter_biases(&mut ae, &mut rng);
    let z = normal_tensor(&[2, 6], &mut rng);
    backward_error(
        &ae.decoder,
        &z,
        &|m: &crate::models::Decoder, z| m.forward(z),
        &|m, c, g| m.backward(c, g),
        &mut rng,
        400,
    )
}

fn classifier_check(mode: Mode) -> impl Fn(u64) -> Result<f64> {
    move |seed| {
        let mut rng = rng_for(seed);
        let mut clf = Classifier::new(small_classifier_config(), &mut rng)?;
        jitter_biases(&mut clf, &mut rng);
        let x = normal_tensor(&[3, 1, 8, 8], &mut rng);
        backward_error(
            &clf,
            &x,
            &|m: &Classifier, x| {
                let out = m.forward(x, mode)?;
                Ok((out.logits, out.cache))
            },
            &|m, c, g| m.backward(c, g),
            &mut rng,
            400,
        )
    }
}

/// Gradient of the first-order baseline objective w.r.t. the denoiser
/// parameters.
fn fo_ds_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let mut den = small_denoiser(&mut rng)?;
    // A small residual keeps the denoised images away from the clamp.
    den.visit_params("", &mut |name, p| {
        if name.starts_with("head") {
            p.value = p.value.scale(0.05);
        }
    });
    let mut clf = Classifier::new(small_classifier_config(), &mut rng)?;
    jitter_biases(&mut clf, &mut rng);
    let mut wb = WhiteBox::new(clf);
    // Nearly flat inputs make the max-pool windows near-ties.
    let x = Tensor::from_fn(&[3, 1, 8, 8], |_| rng.gen_range(0.2..0.8));
    let x_star = x.add(&Tensor::from_fn(x.shape(), |_| rng.gen_range(-0.15..0.15)))?;
    let clean: Vec<Vec<f64>> = {
        let out = wb.forward(&x)?;
        (0..3).map(|i| out.probabilities.item_slice(i).to_vec()).collect()
    };
    let eval = fo_ds_objective(&den, &mut wb, &x, &x_star, clean.clone(), Mode::Inference)?;
    let mut m = den.clone();
    m.zero_grad();
    m.backward(&eval.output.cache, eval.grad_at_output())?;
    let analytic = grads_of(&mut m);
    let theta = params_of(&mut m);
    let coords: Vec<usize> = {
        let mut c = sample(&mut rng, theta.len(), theta.len().min(300)).into_vec();
        c.sort_unstable();
        c
    };
    let mut probe = den.clone();
    let value = |tp: &[f64], probe: &mut RdUnet, wb: &mut WhiteBox| -> f64 {
        set_params(probe, tp);
        fo_ds_objective(probe, wb, &x, &x_star, clean.clone(), Mode::Inference)
            .map(|e| e.objective())
            .unwrap_or(f64::NAN)
    };
    // A ReLU or max-pool boundary inside the stencil makes the difference
    // quotient meaningless. Halving the step changes such a quotient by
    // O(1) but a smooth one only by O(h^2); those coordinates are skipped,
    // and more than a handful of them fails the check.
    let mut numeric = Vec::with_capacity(coords.len());
    let mut kept = Vec::with_capacity(coords.len());
    let mut scratch = theta.clone();
    for &c in &coords {
        let mut quotient = |h: f64| {
            scratch[c] = theta[c] + h;
            let up = value(&scratch, &mut probe, &mut wb);
            scratch[c] = theta[c] - h;
            let down = value(&scratch, &mut probe, &mut wb);
            scratch[c] = theta[c];
            (up - down) / (2.0 * h)
        };
        let full = quotient(FD_STEP);
        let half = quotient(FD_STEP / 2.0);
        if (full - half).abs() <= 1e-6 * (1.0 + full.abs()) {
            numeric.push(full);
            kept.push(analytic[c]);
        }
    }
    if kept.len() + coords.len() / 50 < coords.len() {
        return Err(Error::NonFinite(format!(
            "{} of {} coordinates sit on a non-differentiable point",
            coords.len() - kept.len(),
            coords.len()
        )));
    }
    Ok(relative_error(&kept, &numeric))

}

/// Central differences on a random quadratic: maximum absolute deviation
/// from the analytic gradient.
fn cge_quadratic_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let d = 10;
    let a = normal_tensor(&[d, d], &mut rng);
    let b = normal_tensor(&[d], &mut rng);
    let z0 = normal_tensor(&[d], &mut rng);
    let quad = |z: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += z[i] * a.data()[i * d + j] * z[j];
            }
            s += b.data()[i] * z[i];
        }
        s
    };
    let f = |pts: &[Tensor]| Ok(pts.iter().map(|p| quad(p.data())).collect());
    let cfg = ZoConfig {
        estimator: Estimator::Cge,
        xi: 0.005,
        ..Default::default()
    };
    let g = cge_estimate(&f, &z0, &cfg)?;
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let mut exact = b.data()[i];
        for j in 0..d {
            exact += (a.data()[i * d + j] + a.data()[j * d + i]) * z0.data()[j];
        }
        worst = worst.max((g.vector.data()[i] - exact).abs());
    }
    Ok(worst)
}

/// `1 − cos(mean RGE estimate, true gradient)` over 10⁵ directions in
/// dimension 10.
fn rge_direction_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let d = 10;
    let z0 = Tensor::from_fn(&[d], |_| rng.gen_range(-1.0..1.0));
    let smooth = |z: &[f64]| -> f64 { z.iter().map(|v| v.sin() + 0.5 * v * v).sum() };
    let truth: Vec<f64> = z0.data().iter().map(|v| v.cos() + v).collect();
    let f = |pts: &[Tensor]| Ok(pts.iter().map(|p| smooth(p.data())).collect());
    let cfg = ZoConfig {
        estimator: Estimator::Rge,
        q: 100,
        xi: 1e-4,
        ..Default::default()
    };
    let mut mean = vec![0.0; d];
    let m = 1000;
    for _ in 0..m {
        let g = rge_estimate(&f, &z0, &cfg, &mut rng)?;
        for (acc, v) in mean.iter_mut().zip(g.vector.data()) {
            *acc += v / m as f64;
        }
    }
    let dot: f64 = mean.iter().zip(&truth).map(|(a, b)| a * b).sum();
    let na = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(1.0 - dot / (na * nb))
}

/// Seeding the white-box path with the exact gradient at its output versus
/// one uninterrupted backward pass through denoiser and classifier.
fn chain_identity_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let den = small_denoiser(&mut rng)?;
    let clf = Classifier::new(small_classifier_config(), &mut rng)?;
    let x_star = normal_tensor(&[2, 1, 8, 8], &mut rng);
    let r = normal_tensor(&[2, 3], &mut rng);

    // Uninterrupted end-to-end backward pass.
    let mut d_full = den.clone();
    let mut c_full = clf.clone();
    let out = d_full.forward(&x_star, Mode::Inference)?;
    let logits = c_full.forward(&out.denoised, Mode::Inference)?;
    d_full.zero_grad();
    let g_mid = c_full.backward(&logits.cache, &r)?;
    d_full.backward(&out.cache, &g_mid)?;
    let full = grads_of(&mut d_full);

    // Gradient supplied at the boundary, then chained.
    let mut wb = WhiteBox::new(clf);
    let mut d_chain = den;
    let out = d_chain.forward(&x_star, Mode::Inference)?;
    let fwd = wb.forward(&out.denoised)?;
    let g_z = wb.input_gradient(&fwd.cache, &r)?;
    d_chain.zero_grad();
    chain_to_params(
        WhiteBoxPath::Denoiser {
            denoiser: &mut d_chain,
            cache: &out.cache,
        },
        &g_z,
        &x_star,
    )?;
    Ok(relative_error(&full, &grads_of(&mut d_chain)))
}

/// As [`chain_identity_check`] with the estimate site at the latent code.
fn chain_identity_latent_check(seed: u64) -> Result<f64> {
    let mut rng = rng_for(seed);
    let den = small_denoiser(&mut rng)?;
    let ae = Autoencoder::new(small_ae_config(), &mut rng)?;
    let x_star = normal_tensor(&[2, 1, 8, 8], &mut rng);
    let r = normal_tensor(&[2, 1, 8, 8], &mut rng);

    let mut d_full = den.clone();
    let mut a_full = ae.clone();
    let out = d_full.forward(&x_star, Mode::Inference)?;
    let (z, ec) = a_full.encoder.forward(&out.denoised)?;
    let (_, dc) = a_full.decoder.forward(&z)?;
    a_full.zero_grad();
    d_full.zero_grad();
    let gz = a_full.decoder.backward(&dc, &r)?;
    let gx = a_full.encoder.backward(&ec, &gz)?;
    d_full.backward(&out.cache, &gx)?;
    let mut full = grads_of(&mut d_full);
    full.extend(grads_of(&mut a_full.encoder));

    let mut d_chain = den;
    let mut a_chain = ae;
    let out = d_chain.forward(&x_star, Mode::Inference)?;
    let (z, ec) = a_chain.encoder.forward(&out.denoised)?;
    let (_, dc) = a_chain.decoder.forward(&z)?;
    let mut dec = a_chain.decoder.clone();
    let g_z = dec.backward(&dc, &r)?;
    d_chain.zero_grad();
    a_chain.encoder.zero_grad();
    chain_to_params(
        WhiteBoxPath::DenoiserEncoder {
            denoiser: &mut d_chain,
            cache: &out.cache,
            encoder: &mut a_chain.encoder,
            encoder_cache: &ec,
        },
        &g_z,
        &x_star,
    )?;
    let mut chained = grads_of(&mut d_chain);
    chained.extend(grads_of(&mut a_chain.encoder));
    Ok(relative_error(&full, &chained))
}

fn check(name: &'static str, tolerance: f64, run: impl Fn(u64) -> Result<f64> + Sync + 'static) -> Check {
    Check {
        name,
        tolerance,
        run: Box::new(run),
    }
}

/// Layer-level finite-difference checks (tolerance 1e-4 unless stated).
pub fn layer_checks() -> Vec<Check> {
    vec![
        check("conv2d", 1e-4, conv_check),
        check("conv2d_stride2", 1e-4, strided_conv_check),
        check("conv2d_transpose", 1e-4, conv_transpose_check),
        check("maxpool2", 1e-4, maxpool_check),
        check("relu", 1e-6, relu_check),
        check("batchnorm_train", 1e-4, batchnorm_check(Mode::Train)),
        check("batchnorm_inference", 1e-4, batchnorm_check(Mode::Inference)),
        check("dense", 1e-5, dense_check),
        check("softmax_cross_entropy", 1e-5, softmax_ce_check),
    ]
}

/// End-to-end composite checks (tolerance 1e-3).
pub fn composite_checks() -> Vec<Check> {
    vec![
        check("rdunet_train", 1e-3, rdunet_check(Mode::Train)),
        check("rdunet_inference", 1e-3, rdunet_check(Mode::Inference)),
        check("encoder", 1e-3, encoder_check),
        check("decoder", 1e-3, decoder_check),
        check("classifier_train", 1e-3, classifier_check(Mode::Train)),
        check("classifier_inference", 1e-3, classifier_check(Mode::Inference)),
        check("fo_ds_objective", 1e-3, fo_ds_check),
    ]
}

/// Estimator and chain-rule checks.
pub fn estimator_checks() -> Vec<Check> {
    vec![
        check("cge_quadratic", 1e-8, cge_quadratic_check),
        check("rge_mean_direction", 0.01, rge_direction_check),
        check("chain_identity", 1e-10, chain_identity_check),
        check("chain_identity_latent", 1e-10, chain_identity_latent_check),
    ]
}

pub fn full_suite() -> Vec<Check> {
    let mut v = layer_checks();
    v.extend(composite_checks());
    v.extend(estimator_checks());
    v
}

/// Runs every check for seeds `0..seeds`; a check fails on any error
/// above tolerance or any evaluation failure.
pub fn run_checks(checks: &[Check], seeds: usize) -> Vec<CheckOutcome> {
    use rayon::prelude::*;
    checks
        .par_iter()
        .map(|c| {
            let mut max_error: f64 = 0.0;
            let mut failure = None;
            for seed in 0..seeds as u64 {
                match (c.run)(seed) {
                    Ok(e) if e.is_finite() => max_error = max_error.max(e),
                    Ok(e) => {
                        failure = Some(format!("seed {seed}: error {e}"));
                        max_error = f64::INFINITY;
                    }
                    Err(e) => {
                        failure = Some(format!("seed {seed}: {e}"));
                        max_error = f64::INFINITY;
                    }
                }
            }
            CheckOutcome {
                name: c.name.to_string(),
                seeds,
                max_error,
                tolerance: c.tolerance,
                passed: failure.is_none() && max_error <= c.tolerance,
                failure,
            }
        })
        .collect()
}

/// `check,seeds,max_error,tolerance,status,detail`.
pub fn outcomes_csv(outcomes: &[CheckOutcome]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["check", "seeds", "max_error", "tolerance", "status", "detail"])?;
    for o in outcomes {
        w.write_record([
            o.name.clone(),
            o.seeds.to_string(),
            format!("{:e}", o.max_error),
            format!("{:e}", o.tolerance),
            if o.passed { "pass" } else { "fail" }.to_string(),
            o.failure.clone().unwrap_or_default(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}
