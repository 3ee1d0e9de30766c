//! Finite-difference verification of a model's parameter gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::Cache;
use super::{Model, ModelSpec, NnError, Tensor};

/// Gradients smaller than this are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Parameters whose perturbation moved a ReLU input across zero or changed
    /// a pooling argmax; the loss is not differentiable across those points.
    pub skipped: usize,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// ReLU input signs and pooling winners, used to detect kinks.
fn activation_pattern(caches: &[Cache], relu_inputs: &[bool]) -> Vec<usize> {
    let mut out = Vec::new();
    for (cache, &is_relu) in caches.iter().zip(relu_inputs) {
        match cache {
            Cache::Input(x) if is_relu => out.extend(x.data().iter().map(|&v| usize::from(v > 0.0))),
            Cache::Pool { argmax, .. } => out.extend_from_slice(argmax),
            _ => {}
        }
    }
    out
}

/// Compares analytic gradients of `model` on `(x, labels)` against central
/// differences with step `eps`, one parameter at a time.
pub fn grad_check_on(model: &Model, x: &Tensor, labels: &[usize], eps: f64) -> Result<GradCheckReport, NnError> {
    let relu_inputs: Vec<bool> = model
        .spec()
        .layers
        .iter()
        .filter(|l| !matches!(l, super::LayerSpec::SoftmaxXent))
        .map(|l| matches!(l, super::LayerSpec::Relu))
        .collect();
    let (_, grads) = model.loss_and_grads(x, labels)?;
    let (_, base_caches) = model.forward_cached(x)?;
    let base_pattern = activation_pattern(&base_caches, &relu_inputs);

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    for (a, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let orig = model.params()[a][k];
            let mut eval = |v: f64| -> Result<(f64, bool), NnError> {
                probe.params_mut()[a][k] = v;
                let (logits, caches) = probe.forward_cached(x)?;
                let loss = super::layers::softmax_xent(&logits, labels)?.0;
                Ok((loss, activation_pattern(&caches, &relu_inputs) == base_pattern))
            };
            let (plus, same_plus) = eval(orig + eps)?;
            let (minus, same_minus) = eval(orig - eps)?;
            probe.params_mut()[a][k] = orig;
            if !(same_plus && same_minus) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            report.max_rel_error = report.max_rel_error.max(relative_error(grads[a][k], numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Builds a seeded random instance of `spec` (batch 2, inputs uniform in
/// `[0, 1)`, biases uniform in `[-0.1, 0.1)`, labels `[0, 1]`) and checks it.
pub fn grad_check(spec: &ModelSpec, eps: f64, seed: u64) -> Result<GradCheckReport, NnError> {
    let mut model = Model::init(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    for (i, p) in model.params_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            p.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    let s = spec.side;
    let x = Tensor::from_vec(&[2, 1, s, s], (0..2 * s * s).map(|_| rng.random::<f64>()).collect())?;
    grad_check_on(&model, &x, &[0, 1], eps)
}
