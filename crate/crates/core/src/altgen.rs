//! Alternative adversarial-sample generators.
//!
//! Stand-ins for the boundary attack when comparing what kind of extra
//! sample helps distillation: matched-norm random noise, a single FGSM
//! step, the DeepFool linearized minimal perturbation, and direct descent
//! on the attack loss with an L2 pull toward the base sample.

use crate::attack::{loss_grad_logits, AttackConfig, DEGENERATE_GRADIENT_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::tensor::{argmax, Tensor};
use crate::Tape;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// Which generator to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AltKind {
    RandomNoise,
    Fgsm,
    DeepFool,
    L2Minimize,
}

/// Knobs for the alternative generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AltGenConfig {
    pub kind: AltKind,
    /// Per-coordinate magnitude of the FGSM step.
    pub fgsm_step: f64,
    /// Expected noise norm; `None` means calibrate to the mean boundary
    /// perturbation measured at training start.
    pub noise_norm: Option<f64>,
    /// Relative overshoot applied to each DeepFool step.
    pub deepfool_overshoot: f64,
    pub deepfool_max_iterations: usize,
    /// Weight of the squared-distance pull in the L2 variant.
    pub l2_penalty: f64,
}

impl Default for AltGenConfig {
    fn default() -> Self {
        Self {
            kind: AltKind::Fgsm,
            fgsm_step: 0.1,
            noise_norm: None,
            deepfool_overshoot: 0.02,
            deepfool_max_iterations: 50,
            l2_penalty: 0.1,
        }
    }
}

impl AltGenConfig {
    pub fn of_kind(kind: AltKind) -> Self {
        Self { kind, ..Default::default() }
    }
}

/// Mean norm of a standard normal vector in `d` dimensions
/// (chi-distribution mean).
pub fn expected_gaussian_norm(d: usize) -> f64 {
    std::f64::consts::SQRT_2
        * (ln_gamma((d as f64 + 1.0) / 2.0) - ln_gamma(d as f64 / 2.0)).exp()
}

/// Base sample plus isotropic Gaussian noise whose *expected* L2 norm is
/// `target_norm`.
pub fn random_noise_sample(
    base: &Tensor,
    target_norm: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Tensor> {
    if !(target_norm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise norm must be positive, got {target_norm}"
        )));
    }
    let d = base.len();
    let scale = target_norm / expected_gaussian_norm(d);
    let values = base
        .values()
        .iter()
        .map(|&v| v + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(base.shape().to_vec(), values)
}

/// Gradient of the hard-label cross-entropy with respect to the input.
fn classification_input_gradient(
    model: &ClassifierModel,
    x: &Tensor,
    label: usize,
) -> Result<Tensor> {
    let k = model.class_count();
    if label >= k {
        return Err(Error::InvalidArgument(format!("label {label} out of {k} classes")));
    }
    let mut tape = Tape::new();
    let mut batched = vec![1];
    batched.extend_from_slice(x.shape());
    let xid = tape.leaf(x.reshape(batched)?);
    let params = model.insert_params(&mut tape, false);
    let logits = model.forward_on_tape(&mut tape, &params, xid)?;
    let logsm = tape.log_softmax(logits)?;
    let mut one_hot = vec![0.0; k];
    one_hot[label] = 1.0;
    let sel = tape.constant(Tensor::new(vec![1, k], one_hot)?);
    let picked = tape.mul(logsm, sel)?;
    let summed = tape.sum(picked)?;
    let loss = tape.scale(summed, -1.0)?;
    let grads = tape.backward(loss)?;
    grads.get(xid)?.reshape(x.shape().to_vec())
}

/// One signed-gradient step of the classification loss: every coordinate
/// moves by exactly `±step` (coordinates with exactly zero gradient stay).
pub fn fgsm_sample(
    model: &ClassifierModel,
    base: &Tensor,
    label: usize,
    step: f64,
) -> Result<Tensor> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("FGSM step must be positive, got {step}")));
    }
    let grad = classification_input_gradient(model, base, label)?;
    let values = base
        .values()
        .iter()
        .zip(grad.values())
        .map(|(&v, &g)| v + step * g.signum() * f64::from(g != 0.0))
        .collect();
    Tensor::new(base.shape().to_vec(), values)
}

/// Value and input gradient of a single logit.
fn logit_input_gradient(
    model: &ClassifierModel,
    x: &Tensor,
    class: usize,
) -> Result<(f64, Tensor)> {
    let k = model.class_count();
    let mut tape = Tape::new();
    let mut batched = vec![1];
    batched.extend_from_slice(x.shape());
    let xid = tape.leaf(x.reshape(batched)?);
    let params = model.insert_params(&mut tape, false);
    let logits = model.forward_on_tape(&mut tape, &params, xid)?;
    let mut one_hot = vec![0.0; k];
    one_hot[class] = 1.0;
    let sel = tape.constant(Tensor::new(vec![1, k], one_hot)?);
    let picked = tape.mul(logits, sel)?;
    let out = tape.sum(picked)?;
    let value = tape.value(out).item()?;
    let grads = tape.backward(out)?;
    Ok((value, grads.get(xid)?.reshape(x.shape().to_vec())?))
}

/// Standard linearized minimal-perturbation iteration (untargeted): each
/// step moves to the nearest linearized class boundary, scaled by
/// `1 + overshoot`, until the prediction changes.
pub fn deepfool_sample(
    model: &ClassifierModel,
    base: &Tensor,
    config: &AltGenConfig,
) -> Result<Tensor> {
    let k = model.class_count();
    let original = model.predict(base)?;
    let mut x = base.clone();
    for _ in 0..config.deepfool_max_iterations {
        let logits = model.logits(&x)?;
        if argmax(logits.values()) != original {
            break;
        }
        let (f_orig, g_orig) = logit_input_gradient(model, &x, original)?;
        let mut best: Option<(f64, f64, Tensor)> = None; // (ratio, gap, w)
        for c in (0..k).filter(|&c| c != original) {
            let (f_c, g_c) = logit_input_gradient(model, &x, c)?;
            let w = g_c.sub(&g_orig)?;
            let norm = w.norm_l2();
            if norm < DEGENERATE_GRADIENT_THRESHOLD {
                continue;
            }
            let gap = (f_c - f_orig).abs();
            let ratio = gap / norm;
            if best.as_ref().map_or(true, |(r, _, _)| ratio < *r) {
                best = Some((ratio, gap, w));
            }
        }
        let (_, gap, w) = best.ok_or(Error::DegenerateGradient {
            norm: 0.0,
            threshold: DEGENERATE_GRADIENT_THRESHOLD,
        })?;
        let w_sq = w.norm_l2().powi(2);
        let coeff = (1.0 + config.deepfool_overshoot) * gap / w_sq;
        x = x.add(&w.scale(coeff)?)?;
    }
    Ok(x)
}

/// Gradient descent on the attack loss plus an L2 pull toward the base
/// sample; stops once the pairwise boundary is crossed.
pub fn l2_minimize_sample(
    model: &ClassifierModel,
    base: &Tensor,
    base_class: usize,
    target_class: usize,
    attack: &AttackConfig,
    config: &AltGenConfig,
) -> Result<Tensor> {
    let mut x = base.clone();
    for _ in 0..attack.max_iterations {
        let (loss, grad, _) = loss_grad_logits(model, &x, base_class, target_class)?;
        if loss < 0.0 {
            break;
        }
        let pull = x.sub(base)?;
        let values = x
            .values()
            .iter()
            .zip(grad.values().iter().zip(pull.values()))
            .map(|(&xi, (&gi, &pi))| xi - attack.learning_rate * (gi + 2.0 * config.l2_penalty * pi))
            .collect();
        x = Tensor::new(x.shape().to_vec(), values)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::attack_loss;
    use crate::model::linear_model;
    use rand::SeedableRng;

    fn axis_model() -> ClassifierModel {
        linear_model([[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0])
    }

    #[test]
    fn fgsm_moves_every_coordinate_by_step() {
        // Gradient of the loss is nonzero in both coordinates here.
        let model = linear_model([[1.0, 0.5], [-1.0, -0.5]], [0.0, 0.0]);
        let base = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
        let out = fgsm_sample(&model, &base, 0, 0.25).unwrap();
        for (o, b) in out.values().iter().zip(base.values()) {
            assert!(((o - b).abs() - 0.25).abs() < 1e-15, "moved {}", o - b);
        }
    }

    #[test]
    fn noise_norm_matches_target_in_expectation() {
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let base = Tensor::from_vec(vec![0.0; 2]).unwrap();
        let target = 0.8;
        let draws = 10_000;
        let mean: f64 = (0..draws)
            .map(|_| random_noise_sample(&base, target, &mut rng).unwrap().norm_l2())
            .sum::<f64>()
            / draws as f64;
        assert!(
            (mean - target).abs() / target < 0.05,
            "mean norm {mean} vs target {target}"
        );
    }

    #[test]
    fn deepfool_crosses_linear_boundary_in_one_iteration() {
        let model = axis_model();
        let base = Tensor::from_vec(vec![3.0, 5.0]).unwrap();
        let config = AltGenConfig::of_kind(AltKind::DeepFool);
        let out = deepfool_sample(&model, &base, &config).unwrap();
        // minimal perturbation for f_0 - f_1 = 2*x0 is distance 3 along -x0,
        // scaled by the overshoot
        let moved = out.sub(&base).unwrap();
        assert!((moved.values()[0] + 3.0 * 1.02).abs() < 1e-9);
        assert!(moved.values()[1].abs() < 1e-12);
        assert_eq!(model.predict(&out).unwrap(), 1);
    }

    #[test]
    fn l2_minimize_crosses_and_stays_close() {
        let model = axis_model();
        let base = Tensor::from_vec(vec![1.5, 2.0]).unwrap();
        let attack = AttackConfig { max_iterations: 100, ..Default::default() };
        let config = AltGenConfig::of_kind(AltKind::L2Minimize);
        let out = l2_minimize_sample(&model, &base, 0, 1, &attack, &config).unwrap();
        assert!(attack_loss(&model, &out, 0, 1).unwrap() < 0.0);
        // the pull keeps the untouched coordinate in place
        assert!((out.values()[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn expected_norm_formula_small_dims() {
        // chi mean in 2 dims is sqrt(pi/2)
        assert!((expected_gaussian_norm(2) - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-12);
        // and approaches sqrt(d) for large d
        assert!((expected_gaussian_norm(1000) - (1000f64).sqrt()).abs() < 0.1);
    }
}
