//! Gradient attack that walks a base sample across the decision boundary
//! toward a target class.
//!
//! The attack loss for target class `k` from base class `b` is the logit
//! gap `f_b(x) - f_k(x)`: positive inside the base class, zero on the
//! pairwise boundary, negative once the sample has crossed. Each step
//! moves along the normalized negative gradient with length
//! `eta * (loss + epsilon)`, so steps shrink near the boundary and the
//! offset `epsilon` forces the final sign flip.

use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::tensor::{argmax, Tensor};
use crate::Tape;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Gradient norms below this leave the normalized direction undefined.
pub const DEGENERATE_GRADIENT_THRESHOLD: f64 = 1e-12;

/// Knobs of the iterative attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Step-size multiplier `eta`.
    pub learning_rate: f64,
    /// Offset `epsilon` that pushes the loss past zero.
    pub offset: f64,
    /// Iteration budget `I_max`.
    pub max_iterations: usize,
    /// Record one trajectory point per iteration.
    pub record_trajectory: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.3,
            offset: 0.01,
            max_iterations: 10,
            record_trajectory: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "attack learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.offset > 0.0) || !self.offset.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "attack offset must be positive, got {}",
                self.offset
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Terminal state of one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AttackStatus {
    /// The loss flipped from positive to negative: the sample crossed the
    /// pairwise boundary into the target class.
    Success,
    /// The base sample's loss was already non-positive before any step;
    /// flagged distinctly from a crossing.
    ImmediateSuccess,
    /// A class other than base and target attained the strictly largest
    /// logit.
    IntrudedClass(usize),
    /// Iteration budget exhausted before crossing.
    MaxIterations,
    /// Gradient norm fell below [`DEGENERATE_GRADIENT_THRESHOLD`].
    DegenerateGradient,
}

impl AttackStatus {
    /// Whether the result is usable as a boundary supporting sample.
    pub fn is_success(&self) -> bool {
        matches!(self, AttackStatus::Success | AttackStatus::ImmediateSuccess)
    }
}

/// One recorded iteration of the attack trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    /// Attack loss at this iterate.
    pub loss: f64,
    /// L2 length of the step that produced this iterate (0 for the start).
    pub step_norm: f64,
    /// Predicted class at this iterate.
    pub predicted: usize,
}

/// Outcome of one boundary-sample search.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub status: AttackStatus,
    /// Last iterate reached, whatever the status.
    pub final_sample: Tensor,
    /// Number of update steps executed.
    pub iterations: usize,
    /// `final_sample - base`.
    pub perturbation: Tensor,
    pub trajectory: Option<Vec<TrajectoryPoint>>,
}

impl AttackResult {
    /// Min/max of the final sample's values; no box constraint is applied
    /// during iteration, so this reports how far the sample strayed.
    pub fn value_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in self.final_sample.values() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// One CSV row per recorded iteration.
    pub fn write_trajectory_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,loss,step_norm,predicted_class")?;
        if let Some(points) = &self.trajectory {
            for p in points {
                writeln!(w, "{},{},{},{}", p.iteration, p.loss, p.step_norm, p.predicted)?;
            }
        }
        Ok(())
    }
}

fn check_classes(model: &ClassifierModel, base: usize, target: usize) -> Result<()> {
    let k = model.class_count();
    if base >= k || target >= k {
        return Err(Error::InvalidArgument(format!(
            "class index out of range: base {base}, target {target}, classes {k}"
        )));
    }
    if base == target {
        return Err(Error::InvalidArgument(format!(
            "base and target class must differ, both are {base}"
        )));
    }
    Ok(())
}

/// Logit gap `f_base(x) - f_target(x)`.
pub fn attack_loss(model: &ClassifierModel, x: &Tensor, base: usize, target: usize) -> Result<f64> {
    check_classes(model, base, target)?;
    let logits = model.logits(x)?;
    if logits.rank() != 1 {
        return Err(Error::InvalidArgument("attack_loss takes a single sample".into()));
    }
    Ok(logits.values()[base] - logits.values()[target])
}

/// Loss, its gradient with respect to the input, and the logits, from one
/// taped forward/backward pass.
pub(crate) fn loss_grad_logits(
    model: &ClassifierModel,
    x: &Tensor,
    base: usize,
    target: usize,
) -> Result<(f64, Tensor, Tensor)> {
    let k = model.class_count();
    let mut tape = Tape::new();
    let mut batched = vec![1];
    batched.extend_from_slice(x.shape());
    let xid = tape.leaf(x.reshape(batched)?);
    let params = model.insert_params(&mut tape, false);
    let logits_id = model.forward_on_tape(&mut tape, &params, xid)?;
    let mut selector = vec![0.0; k];
    selector[base] = 1.0;
    selector[target] = -1.0;
    let sel = tape.constant(Tensor::new(vec![1, k], selector)?);
    let prod = tape.mul(logits_id, sel)?;
    let loss_id = tape.sum(prod)?;
    let loss = tape.value(loss_id).item()?;
    let logits = tape.value(logits_id).reshape(vec![k])?;
    let grads = tape.backward(loss_id)?;
    let grad = grads.get(xid)?.reshape(x.shape().to_vec())?;
    Ok((loss, grad, logits))
}

/// Applies the update rule given a precomputed loss and gradient.
fn step_from(x: &Tensor, loss: f64, grad: &Tensor, config: &AttackConfig) -> Result<Tensor> {
    let norm = grad.norm_l2();
    if norm < DEGENERATE_GRADIENT_THRESHOLD {
        return Err(Error::DegenerateGradient { norm, threshold: DEGENERATE_GRADIENT_THRESHOLD });
    }
    let coeff = -config.learning_rate * (loss + config.offset) / norm;
    let values = x
        .values()
        .iter()
        .zip(grad.values())
        .map(|(&xi, &gi)| xi + coeff * gi)
        .collect();
    Tensor::new(x.shape().to_vec(), values)
}

/// One update of the iterative scheme; the step length is exactly
/// `eta * |loss + epsilon|`.
pub fn attack_step(
    model: &ClassifierModel,
    x: &Tensor,
    base: usize,
    target: usize,
    config: &AttackConfig,
) -> Result<Tensor> {
    check_classes(model, base, target)?;
    let (loss, grad, _) = loss_grad_logits(model, x, base, target)?;
    step_from(x, loss, &grad, config)
}

/// First-order prediction error of one step: how far the realized loss at
/// the next iterate is from the Taylor estimate
/// `loss * (1 - eta * |grad|) - eta * epsilon * |grad|`. Exact (up to
/// rounding) for linear models; shrinks quadratically in `eta` for smooth
/// ones.
pub fn taylor_residual_check(
    model: &ClassifierModel,
    x: &Tensor,
    base: usize,
    target: usize,
    config: &AttackConfig,
) -> Result<f64> {
    check_classes(model, base, target)?;
    let (loss, grad, _) = loss_grad_logits(model, x, base, target)?;
    if config.learning_rate == 0.0 {
        return Ok(0.0);
    }
    let next = step_from(x, loss, &grad, config)?;
    let norm = grad.norm_l2();
    let predicted = loss * (1.0 - config.learning_rate * norm) - config.learning_rate * config.offset * norm;
    let actual = attack_loss(model, &next, base, target)?;
    Ok((actual - predicted).abs())
}

/// Runs the attack from `base_sample` until one of the stop conditions
/// fires:
///
/// * success — the loss flips from positive to negative;
/// * intrusion — some third class attains the strictly largest logit;
/// * budget — `max_iterations` steps executed.
///
/// Success takes precedence over intrusion at the same iterate. A base
/// sample whose loss is already non-positive returns
/// [`AttackStatus::ImmediateSuccess`] with zero iterations.
pub fn find_bss(
    model: &ClassifierModel,
    base_sample: &Tensor,
    base: usize,
    target: usize,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    check_classes(model, base, target)?;

    let mut trajectory: Option<Vec<TrajectoryPoint>> = config.record_trajectory.then(Vec::new);
    let (mut loss, mut grad, logits) = loss_grad_logits(model, base_sample, base, target)?;
    if let Some(t) = trajectory.as_mut() {
        t.push(TrajectoryPoint {
            iteration: 0,
            loss,
            step_norm: 0.0,
            predicted: argmax(logits.values()),
        });
    }

    if loss <= 0.0 {
        return Ok(AttackResult {
            status: AttackStatus::ImmediateSuccess,
            final_sample: base_sample.clone(),
            iterations: 0,
            perturbation: Tensor::zeros(base_sample.shape().to_vec()),
            trajectory,
        });
    }

    let mut x = base_sample.clone();
    for i in 1..=config.max_iterations {
        let next = match step_from(&x, loss, &grad, config) {
            Ok(next) => next,
            Err(Error::DegenerateGradient { .. }) => {
                return Ok(AttackResult {
                    status: AttackStatus::DegenerateGradient,
                    perturbation: next_perturbation(&x, base_sample)?,
                    final_sample: x,
                    iterations: i - 1,
                    trajectory,
                });
            }
            Err(e) => return Err(e),
        };
        let (next_loss, next_grad, next_logits) = loss_grad_logits(model, &next, base, target)?;
        if let Some(t) = trajectory.as_mut() {
            t.push(TrajectoryPoint {
                iteration: i,
                loss: next_loss,
                step_norm: next.sub(&x)?.norm_l2(),
                predicted: argmax(next_logits.values()),
            });
        }

        // (a) crossed the pairwise boundary
        if next_loss < 0.0 && loss > 0.0 {
            return Ok(AttackResult {
                status: AttackStatus::Success,
                perturbation: next_perturbation(&next, base_sample)?,
                final_sample: next,
                iterations: i,
                trajectory,
            });
        }
        // (b) stepped into a third class
        let lv = next_logits.values();
        let top = argmax(lv);
        if top != base && top != target && lv[top] > lv[base].max(lv[target]) {
            return Ok(AttackResult {
                status: AttackStatus::IntrudedClass(top),
                perturbation: next_perturbation(&next, base_sample)?,
                final_sample: next,
                iterations: i,
                trajectory,
            });
        }
        // (c) budget exhausted
        if i >= config.max_iterations {
            return Ok(AttackResult {
                status: AttackStatus::MaxIterations,
                perturbation: next_perturbation(&next, base_sample)?,
                final_sample: next,
                iterations: i,
                trajectory,
            });
        }
        x = next;
        loss = next_loss;
        grad = next_grad;
    }
    unreachable!("loop returns on condition (c)")
}

fn next_perturbation(x: &Tensor, base: &Tensor) -> Result<Tensor> {
    x.sub(base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_model, Activation, ClassifierModel, ClassifierSpec};
    use crate::tensor::Tensor;

    fn probe() -> Tensor {
        Tensor::from_vec(vec![3.0, 5.0]).unwrap()
    }

    /// f_0 = x0, f_1 = -x0: gap is 2*x0, gradient (2, 0).
    fn axis_model() -> ClassifierModel {
        linear_model([[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0])
    }

    #[test]
    fn loss_is_zero_on_the_boundary() {
        let model = axis_model();
        let on_boundary = Tensor::from_vec(vec![0.0, 2.0]).unwrap();
        assert_eq!(attack_loss(&model, &on_boundary, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn loss_by_direct_substitution() {
        let model = axis_model();
        assert_eq!(attack_loss(&model, &probe(), 0, 1).unwrap(), 6.0);
    }

    #[test]
    fn loss_is_antisymmetric_in_classes() {
        let model = axis_model();
        let l01 = attack_loss(&model, &probe(), 0, 1).unwrap();
        let l10 = attack_loss(&model, &probe(), 1, 0).unwrap();
        assert_eq!(l01, -l10);
    }

    #[test]
    fn same_class_rejected() {
        let model = axis_model();
        assert!(attack_loss(&model, &probe(), 1, 1).is_err());
    }

    #[test]
    fn step_length_identity() {
        let model = axis_model();
        let config = AttackConfig { learning_rate: 0.3, offset: 0.01, ..Default::default() };
        let x = probe();
        let next = attack_step(&model, &x, 0, 1, &config).unwrap();
        let loss = attack_loss(&model, &x, 0, 1).unwrap();
        let expected = config.learning_rate * (loss + config.offset);
        let moved = next.sub(&x).unwrap().norm_l2();
        assert!((moved - expected).abs() <= 1e-10 * expected);
    }

    #[test]
    fn hand_evaluated_linear_step() {
        // loss 6, gradient (2,0): step 0.3 * 6.01 along -(1,0).
        let model = axis_model();
        let config = AttackConfig { learning_rate: 0.3, offset: 0.01, ..Default::default() };
        let next = attack_step(&model, &probe(), 0, 1, &config).unwrap();
        assert!((next.values()[0] - (3.0 - 1.803)).abs() < 1e-12);
        assert_eq!(next.values()[1], 5.0);
    }

    #[test]
    fn step_vanishes_when_loss_cancels_offset() {
        let model = axis_model();
        let config = AttackConfig { learning_rate: 0.3, offset: 0.01, ..Default::default() };
        // loss = -offset at x0 = -offset/2
        let x = Tensor::from_vec(vec![-0.005, 1.0]).unwrap();
        let next = attack_step(&model, &x, 0, 1, &config).unwrap();
        assert!(next.sub(&x).unwrap().norm_l2() < 1e-15);
    }

    #[test]
    fn linear_attack_matches_simulated_recursion() {
        // For the linear model the whole recursion is closed-form:
        // L_{i+1} = L_i (1 - eta*g) - eta*eps*g with g = |grad| = 2.
        let model = axis_model();
        let config = AttackConfig {
            learning_rate: 0.2,
            offset: 0.01,
            max_iterations: 50,
            record_trajectory: true,
        };
        let x0 = probe();
        let result = find_bss(&model, &x0, 0, 1, &config).unwrap();
        assert_eq!(result.status, AttackStatus::Success);

        let g = 2.0;
        let contraction = 1.0 - config.learning_rate * g;
        let mut simulated = vec![6.0];
        while *simulated.last().unwrap() > 0.0 {
            let l = simulated.last().unwrap();
            simulated.push(l * contraction - config.learning_rate * config.offset * g);
        }
        assert_eq!(result.iterations, simulated.len() - 1);
        let trajectory = result.trajectory.unwrap();
        for (point, expected) in trajectory.iter().zip(&simulated) {
            assert!(
                (point.loss - expected).abs() < 1e-9,
                "iteration {}: {} vs {}",
                point.iteration,
                point.loss,
                expected
            );
        }
        // the crossing sample strictly favors the target class
        let logits = model.logits(&result.final_sample).unwrap();
        assert!(logits.values()[1] > logits.values()[0]);
    }

    /// Bayes classifier of three collinear classes centered at -2, 0, +2 on
    /// the first axis: f_c = c_c . x - |c_c|^2 / 2.
    fn collinear_three_class() -> ClassifierModel {
        let spec = ClassifierSpec::mlp(2, &[], 3, Activation::Linear);
        let mut model = ClassifierModel::init(spec, 0).unwrap();
        let w = Tensor::new(vec![2, 3], vec![-2.0, 0.0, 2.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(vec![-2.0, 0.0, -2.0]).unwrap();
        model.set_params(vec![w, b]).unwrap();
        model
    }

    #[test]
    fn middle_class_intrusion_detected() {
        let model = collinear_three_class();
        let x = Tensor::from_vec(vec![-2.0, 0.0]).unwrap();
        assert_eq!(model.predict(&x).unwrap(), 0);
        // eta small enough that the iterates land inside the middle
        // class instead of leaping across it
        let config = AttackConfig {
            learning_rate: 0.1,
            offset: 0.01,
            max_iterations: 30,
            record_trajectory: true,
        };
        let result = find_bss(&model, &x, 0, 2, &config).unwrap();
        assert_eq!(result.status, AttackStatus::IntrudedClass(1));
        // brute-force prediction along the trajectory: the walk stays in
        // the base class until the final iterate enters the middle class
        let trajectory = result.trajectory.as_ref().unwrap();
        for point in &trajectory[..trajectory.len() - 1] {
            assert_eq!(point.predicted, 0, "iteration {}", point.iteration);
        }
        assert_eq!(trajectory.last().unwrap().predicted, 1);
        // brute-force check along the trajectory: every iterate before the
        // stop predicted base or target-side classes, and the final iterate
        // predicts the middle class
        assert_eq!(model.predict(&result.final_sample).unwrap(), 1);
    }

    #[test]
    fn tight_budget_returns_max_iterations() {
        let model = axis_model();
        let config = AttackConfig {
            learning_rate: 0.001,
            offset: 0.01,
            max_iterations: 1,
            ..Default::default()
        };
        let result = find_bss(&model, &probe(), 0, 1, &config).unwrap();
        assert_eq!(result.status, AttackStatus::MaxIterations);
        assert_eq!(result.iterations, 1);
    }

    #[test]
    fn already_crossed_sample_is_immediate_success() {
        let model = axis_model();
        let x = Tensor::from_vec(vec![-1.0, 0.0]).unwrap();
        let result = find_bss(&model, &x, 0, 1, &AttackConfig::default()).unwrap();
        assert_eq!(result.status, AttackStatus::ImmediateSuccess);
        assert_eq!(result.iterations, 0);
        assert_eq!(result.perturbation.norm_l2(), 0.0);
        assert!(result.status.is_success());
    }

    #[test]
    fn flat_model_reports_degenerate_gradient() {
        let model = linear_model([[0.0, 0.0], [0.0, 0.0]], [1.0, 0.0]);
        let result = find_bss(&model, &probe(), 0, 1, &AttackConfig::default()).unwrap();
        assert_eq!(result.status, AttackStatus::DegenerateGradient);
        assert!(!result.status.is_success());
        assert!(attack_step(&model, &probe(), 0, 1, &AttackConfig::default()).is_err());
    }

    #[test]
    fn taylor_residual_zero_for_linear_model() {
        let model = axis_model();
        let residual = taylor_residual_check(&model, &probe(), 0, 1, &AttackConfig::default()).unwrap();
        assert!(residual <= 1e-12, "residual {residual}");
    }

    #[test]
    fn taylor_residual_zero_for_zero_step() {
        let spec = ClassifierSpec::mlp(2, &[8], 2, Activation::Tanh);
        let model = ClassifierModel::init(spec, 3).unwrap();
        let config = AttackConfig { learning_rate: 0.0, ..Default::default() };
        let residual = taylor_residual_check(&model, &probe(), 0, 1, &config).unwrap();
        assert_eq!(residual, 0.0);
    }

    #[test]
    fn taylor_residual_shrinks_quadratically_on_smooth_model() {
        let spec = ClassifierSpec::mlp(2, &[16, 16], 2, Activation::Tanh);
        let model = ClassifierModel::init(spec, 9).unwrap();
        let base = AttackConfig { learning_rate: 0.3, ..Default::default() };
        let tenth = AttackConfig { learning_rate: 0.03, ..Default::default() };
        let x = Tensor::from_vec(vec![0.7, -0.4]).unwrap();
        let r1 = taylor_residual_check(&model, &x, 0, 1, &base).unwrap();
        let r2 = taylor_residual_check(&model, &x, 0, 1, &tenth).unwrap();
        assert!(r1 > 0.0);
        assert!(r2 <= r1 / 50.0, "r1 {r1}, r2 {r2}");
    }

    #[test]
    fn trajectory_csv_has_header_and_rows() {
        let model = axis_model();
        let config = AttackConfig { record_trajectory: true, ..Default::default() };
        let result = find_bss(&model, &probe(), 0, 1, &config).unwrap();
        let mut buf = Vec::new();
        result.write_trajectory_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,loss,step_norm,predicted_class");
        assert_eq!(lines.len(), result.trajectory.as_ref().unwrap().len() + 1);
    }
}
