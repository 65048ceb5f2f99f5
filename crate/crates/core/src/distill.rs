//! Student training with the combined three-term loss.
//!
//! Per batch the trainer minimizes
//!
//! ```text
//! L = L_cls + alpha * L_KD + beta * <L_BS over boundary samples>
//! ```
//!
//! where `L_cls` is hard-label cross-entropy, `L_KD` is cross-entropy
//! between temperature-softened teacher and student distributions at the
//! original samples, and `L_BS` is the same form evaluated at boundary
//! supporting samples generated from the teacher. Base samples are the
//! batch members both networks classify correctly, ranked by how far the
//! two probability vectors disagree; each selected sample draws one
//! target class from the teacher's class probabilities (a Monte Carlo
//! estimate of the per-class-weighted sum). `alpha` and `beta` decay
//! linearly per epoch; updates are momentum SGD with weight decay.

use crate::altgen::{
    deepfool_sample, fgsm_sample, l2_minimize_sample, random_noise_sample, AltGenConfig, AltKind,
};
use crate::attack::{find_bss, AttackConfig};
use crate::autodiff::NodeId;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::tensor::{argmax, log_softmax_rows, softmax_rows, Tensor};
use crate::Tape;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

// ── schedules ────────────────────────────────────────────────────────

/// Linear interpolation from `start` at t=0 to `end` at t=1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub start: f64,
    pub end: f64,
}

impl AlphaSchedule {
    pub fn at(&self, t: f64) -> f64 {
        self.start + (self.end - self.start) * t
    }

    pub fn is_zero(&self) -> bool {
        self.start == 0.0 && self.end == 0.0
    }
}

/// Linear decay from `start` at t=0 to zero at `t = zero_at`, clamped at
/// zero afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub start: f64,
    pub zero_at: f64,
}

impl BetaSchedule {
    pub fn at(&self, t: f64) -> f64 {
        (self.start * (1.0 - t / self.zero_at)).max(0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.start == 0.0
    }
}

/// Step decay: the rate is multiplied by each drop's factor once the epoch
/// fraction reaches it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub drops: Vec<(f64, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: 0.1, drops: vec![(0.5, 0.1), (0.75, 0.1)] }
    }
}

impl LrSchedule {
    pub fn at(&self, t: f64) -> f64 {
        let mut lr = self.initial;
        for &(frac, factor) in &self.drops {
            if t >= frac {
                lr *= factor;
            }
        }
        lr
    }
}

// ── configuration ────────────────────────────────────────────────────

/// All training knobs. Defaults follow the reference recipe: temperature
/// 3, alpha 4→1, beta 2→0 at 75% of training, 64 base samples out of a
/// 256 batch, learning rate 0.1 dropping 10x at 1/2 and 3/4, momentum
/// 0.9, weight decay 1e-4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub temperature: f64,
    pub alpha: AlphaSchedule,
    pub beta: BetaSchedule,
    /// Base-sample budget N per batch.
    pub base_sample_budget: usize,
    pub batch_size: usize,
    pub attack: AttackConfig,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 3.0,
            alpha: AlphaSchedule { start: 4.0, end: 1.0 },
            beta: BetaSchedule { start: 2.0, zero_at: 0.75 },
            base_sample_budget: 64,
            batch_size: 256,
            attack: AttackConfig::default(),
            epochs: 80,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.base_sample_budget > self.batch_size {
            return Err(Error::InvalidArgument(format!(
                "base sample budget {} exceeds batch size {}",
                self.base_sample_budget, self.batch_size
            )));
        }
        if !(self.beta.zero_at > 0.0 && self.beta.zero_at <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta zero-point must be in (0,1], got {}",
                self.beta.zero_at
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument(
                "momentum must be in [0,1) and weight decay nonnegative".into(),
            ));
        }
        self.attack.validate()
    }

    /// `(alpha, beta)` at epoch fraction `t ∈ [0,1]`.
    pub fn schedule(&self, t: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("epoch fraction {t} outside [0,1]")));
        }
        Ok((self.alpha.at(t), self.beta.at(t)))
    }
}

/// How base samples are picked from a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionStrategy {
    /// Both-correct filter, then the N samples with the largest
    /// teacher/student probability distance.
    MostDivergent,
    /// Every batch sample, no filter or budget (ablation).
    AllSamples,
    /// N uniform random batch samples, no filter (ablation).
    RandomSubset,
}

/// How the target class of each attack is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetStrategy {
    /// Draw with probability proportional to the teacher's class
    /// probability, excluding the base class.
    TeacherProbability,
    /// Uniform over non-base classes (ablation).
    UniformRandom,
}

/// What produces the extra samples for the boundary term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GeneratorChoice {
    /// The boundary attack; failed attacks are dropped.
    BoundaryAttack,
    /// One of the alternative generators.
    Alternative(AltGenConfig),
}

/// Strategy triple; defaults are the proposed method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub selection: SelectionStrategy,
    pub targeting: TargetStrategy,
    pub generator: GeneratorChoice,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            selection: SelectionStrategy::MostDivergent,
            targeting: TargetStrategy::TeacherProbability,
            generator: GeneratorChoice::BoundaryAttack,
        }
    }
}

// ── losses ───────────────────────────────────────────────────────────

fn check_one_hot(y: &Tensor, k: usize) -> Result<usize> {
    if y.shape() != [k] {
        return Err(Error::InvalidArgument(format!(
            "label must be one-hot over {k} classes, got shape {:?}",
            y.shape()
        )));
    }
    let mut ones = 0;
    let mut index = 0;
    for (i, &v) in y.values().iter().enumerate() {
        if v == 1.0 {
            ones += 1;
            index = i;
        } else if v != 0.0 {
            return Err(Error::InvalidArgument(format!("label entry {v} is neither 0 nor 1")));
        }
    }
    if ones != 1 {
        return Err(Error::InvalidArgument(format!("label has {ones} ones, expected exactly 1")));
    }
    Ok(index)
}

/// Hard-label cross-entropy of the student at temperature 1.
pub fn classification_loss(student: &ClassifierModel, x: &Tensor, y_true: &Tensor) -> Result<f64> {
    let k = student.class_count();
    let label = check_one_hot(y_true, k)?;
    let logits = student.logits(x)?;
    let mut logsm = vec![0.0; k];
    log_softmax_rows(logits.values(), k, &mut logsm);
    Ok(-logsm[label])
}

/// Cross-entropy from softened teacher to softened student distributions:
/// `J(softmax(f_t/T), softmax(f_s/T))`.
pub fn kd_loss(
    teacher: &ClassifierModel,
    student: &ClassifierModel,
    x: &Tensor,
    temperature: f64,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let p_teacher = teacher.class_probabilities(x, temperature)?;
    let s_logits = student.logits(x)?;
    let k = student.class_count();
    let scaled: Vec<f64> = s_logits.values().iter().map(|&v| v / temperature).collect();
    let mut logsm = vec![0.0; k];
    log_softmax_rows(&scaled, k, &mut logsm);
    Ok(-p_teacher
        .values()
        .iter()
        .zip(&logsm)
        .map(|(&p, &l)| p * l)
        .sum::<f64>())
}

/// The boundary supporting loss: identical form to [`kd_loss`], evaluated
/// at a boundary supporting sample produced by a successful attack on the
/// teacher.
pub fn bs_loss(
    teacher: &ClassifierModel,
    student: &ClassifierModel,
    bss: &Tensor,
    temperature: f64,
) -> Result<f64> {
    kd_loss(teacher, student, bss, temperature)
}

// ── base-sample selection and target sampling ────────────────────────

/// One drawn target class with the full sampling distribution it came
/// from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDraw {
    pub target_class: usize,
    pub probabilities: Vec<f64>,
}

/// Selection outcome for one batch.
#[derive(Debug, Clone, Default)]
pub struct BatchSelection {
    /// Indices where teacher and student argmax both equal the label.
    pub eligible: Vec<usize>,
    /// Selected base-sample indices, at most the budget, ascending.
    pub chosen: Vec<usize>,
    /// Probability distances `|q_t - q_s|^2` aligned with `chosen`
    /// (empty for ablation strategies that skip the ranking).
    pub distances: Vec<f64>,
    /// Target draws aligned with `chosen`, filled by the trainer.
    pub target_draws: Vec<TargetDraw>,
}

/// Probability rows from logits at a given temperature.
fn probability_rows(logits: &Tensor, k: usize, temperature: f64) -> Result<Tensor> {
    let scaled: Vec<f64> = logits.values().iter().map(|&v| v / temperature).collect();
    let mut out = vec![0.0; scaled.len()];
    softmax_rows(&scaled, k, &mut out);
    Tensor::new(logits.shape().to_vec(), out)
}

/// Both-correct eligibility plus top-N ranking by squared probability
/// distance; ties break by batch order. With at most N eligible samples,
/// all of them are chosen.
pub fn select_base_samples(
    teacher: &ClassifierModel,
    student: &ClassifierModel,
    batch: &Split,
    budget: usize,
) -> Result<BatchSelection> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("cannot select from an empty batch".into()));
    }
    let k = teacher.class_count();
    let q_teacher = teacher.class_probabilities(batch.inputs(), 1.0)?;
    let q_student = student.class_probabilities(batch.inputs(), 1.0)?;
    select_from_probabilities(q_teacher.values(), q_student.values(), batch.labels(), k, budget)
}

fn select_from_probabilities(
    q_teacher: &[f64],
    q_student: &[f64],
    labels: &[usize],
    k: usize,
    budget: usize,
) -> Result<BatchSelection> {
    let mut eligible = Vec::new();
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let qt = &q_teacher[i * k..(i + 1) * k];
        let qs = &q_student[i * k..(i + 1) * k];
        if argmax(qt) == label && argmax(qs) == label {
            eligible.push(i);
            let d: f64 = qt.iter().zip(qs).map(|(&a, &b)| (a - b) * (a - b)).sum();
            scored.push((i, d));
        }
    }
    let mut chosen_scored = if scored.len() > budget {
        // stable sort keeps batch order among equal distances
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        scored.truncate(budget);
        scored
    } else {
        scored
    };
    chosen_scored.sort_by_key(|&(i, _)| i);
    Ok(BatchSelection {
        eligible,
        chosen: chosen_scored.iter().map(|&(i, _)| i).collect(),
        distances: chosen_scored.iter().map(|&(_, d)| d).collect(),
        target_draws: Vec::new(),
    })
}

/// Draws a target class `k != base_class` with probability
/// `q[k] / (1 - q[base_class])`. The distribution is checked on every
/// draw: zero at the base class, nonnegative, summing to one within
/// 1e-12.
pub fn sample_target_class(
    q_teacher: &[f64],
    base_class: usize,
    rng: &mut ChaCha20Rng,
) -> Result<TargetDraw> {
    let k = q_teacher.len();
    if base_class >= k {
        return Err(Error::InvalidArgument(format!("base class {base_class} out of {k}")));
    }
    let q_base = q_teacher[base_class];
    if 1.0 - q_base <= 1e-12 {
        return Err(Error::NoAlternativeClass(q_base));
    }
    // Normalize by the non-base mass actually present. For a probability
    // vector this equals 1 - q_base; summing it directly keeps the drawn
    // distribution exact even when q_base saturates.
    let rest: f64 = q_teacher
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != base_class)
        .map(|(_, &q)| q)
        .sum();
    if rest <= 0.0 {
        return Err(Error::NoAlternativeClass(q_base));
    }
    let mut probabilities = vec![0.0; k];
    let mut total = 0.0;
    for (c, &q) in q_teacher.iter().enumerate() {
        if c != base_class {
            probabilities[c] = q / rest;
            total += probabilities[c];
        }
    }
    if probabilities.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "target distribution invalid: sum {total}"
        )));
    }
    let u: f64 = rng.gen_range(0.0..total);
    let mut acc = 0.0;
    let mut target = k - 1 - usize::from(base_class == k - 1);
    for (c, &p) in probabilities.iter().enumerate() {
        if c == base_class {
            continue;
        }
        acc += p;
        if u < acc {
            target = c;
            break;
        }
    }
    Ok(TargetDraw { target_class: target, probabilities })
}

// ── loss breakdown and objective ─────────────────────────────────────

/// Per-step loss components. The total always recomposes as
/// `classification + alpha * distillation + beta * boundary`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Batch-mean hard-label cross-entropy.
    pub classification: f64,
    /// Batch-mean softened cross-entropy (0 when alpha is 0).
    pub distillation: f64,
    /// Mean boundary supporting loss over usable generated samples
    /// (0 when none).
    pub boundary: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
    pub attack_attempts: usize,
    pub attack_successes: usize,
}

/// Tape nodes of the combined objective.
pub struct ObjectiveNodes {
    pub total: NodeId,
    pub classification: NodeId,
    pub distillation: Option<NodeId>,
    pub boundary: Option<NodeId>,
}

/// Builds the combined objective on a tape against student parameter
/// nodes. Teacher distributions and boundary samples enter as constants;
/// only the student side is differentiated.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    tape: &mut Tape,
    student: &ClassifierModel,
    param_ids: &[NodeId],
    batch_inputs: &Tensor,
    batch_one_hot: &Tensor,
    teacher_soft: Option<&Tensor>,
    boundary_inputs: Option<&Tensor>,
    boundary_soft: Option<&Tensor>,
    alpha: f64,
    beta: f64,
    temperature: f64,
) -> Result<ObjectiveNodes> {
    let batch = batch_inputs.shape()[0];
    let x = tape.constant(batch_inputs.clone());
    let logits = student.forward_on_tape(tape, param_ids, x)?;

    // L_cls: -(1/B) sum y . log softmax(z)
    let logsm = tape.log_softmax(logits)?;
    let y = tape.constant(batch_one_hot.clone());
    let picked = tape.mul(logsm, y)?;
    let summed = tape.sum(picked)?;
    let classification = tape.scale(summed, -1.0 / batch as f64)?;
    let mut total = classification;

    // L_KD: -(1/B) sum softmax(f_t/T) . log softmax(z/T)
    let distillation = match teacher_soft {
        Some(soft) if alpha != 0.0 => {
            let scaled = tape.scale(logits, 1.0 / temperature)?;
            let logsm_t = tape.log_softmax(scaled)?;
            let soft_id = tape.constant(soft.clone());
            let picked = tape.mul(logsm_t, soft_id)?;
            let summed = tape.sum(picked)?;
            let node = tape.scale(summed, -1.0 / batch as f64)?;
            let weighted = tape.scale(node, alpha)?;
            total = tape.add(total, weighted)?;
            Some(node)
        }
        _ => None,
    };

    // boundary term: -(1/M) sum softmax(f_t(bss)/T) . log softmax(f_s(bss)/T)
    let boundary = match (boundary_inputs, boundary_soft) {
        (Some(inputs), Some(soft)) if beta != 0.0 => {
            let m = inputs.shape()[0];
            let bx = tape.constant(inputs.clone());
            let blogits = student.forward_on_tape(tape, param_ids, bx)?;
            let scaled = tape.scale(blogits, 1.0 / temperature)?;
            let logsm_t = tape.log_softmax(scaled)?;
            let soft_id = tape.constant(soft.clone());
            let picked = tape.mul(logsm_t, soft_id)?;
            let summed = tape.sum(picked)?;
            let node = tape.scale(summed, -1.0 / m as f64)?;
            let weighted = tape.scale(node, beta)?;
            total = tape.add(total, weighted)?;
            Some(node)
        }
        _ => None,
    };

    Ok(ObjectiveNodes { total, classification, distillation, boundary })
}

// ── trainer ──────────────────────────────────────────────────────────

/// Holds the optimizer state and RNG across steps of one training run.
pub struct Trainer<'a> {
    teacher: Option<&'a ClassifierModel>,
    config: &'a DistillConfig,
    options: &'a TrainOptions,
    rng: ChaCha20Rng,
    velocity: Vec<Tensor>,
    /// Calibrated expected norm for the random-noise generator.
    noise_norm: Option<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        teacher: Option<&'a ClassifierModel>,
        student: &ClassifierModel,
        config: &'a DistillConfig,
        options: &'a TrainOptions,
    ) -> Result<Self> {
        config.validate()?;
        if teacher.is_none() && !(config.alpha.is_zero() && config.beta.is_zero()) {
            return Err(Error::InvalidArgument(
                "nonzero alpha/beta schedules require a teacher".into(),
            ));
        }
        if let Some(t) = teacher {
            if t.class_count() != student.class_count() {
                return Err(Error::InvalidArgument(format!(
                    "teacher has {} classes, student {}",
                    t.class_count(),
                    student.class_count()
                )));
            }
        }
        let noise_norm = match &options.generator {
            GeneratorChoice::Alternative(alt) if alt.kind == AltKind::RandomNoise => alt.noise_norm,
            _ => None,
        };
        Ok(Self {
            teacher,
            config,
            options,
            rng: ChaCha20Rng::seed_from_u64(config.seed),
            velocity: student.params().iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            noise_norm,
        })
    }

    fn select(&mut self, teacher: &ClassifierModel, student: &ClassifierModel, batch: &Split) -> Result<BatchSelection> {
        match self.options.selection {
            SelectionStrategy::MostDivergent => {
                select_base_samples(teacher, student, batch, self.config.base_sample_budget)
            }
            SelectionStrategy::AllSamples => Ok(BatchSelection {
                eligible: (0..batch.len()).collect(),
                chosen: (0..batch.len()).collect(),
                distances: Vec::new(),
                target_draws: Vec::new(),
            }),
            SelectionStrategy::RandomSubset => {
                let n = self.config.base_sample_budget.min(batch.len());
                let mut chosen =
                    rand::seq::index::sample(&mut self.rng, batch.len(), n).into_vec();
                chosen.sort_unstable();
                Ok(BatchSelection {
                    eligible: (0..batch.len()).collect(),
                    chosen,
                    distances: Vec::new(),
                    target_draws: Vec::new(),
                })
            }
        }
    }

    /// Mean successful perturbation norm of the boundary attack on the
    /// given samples; calibrates the random-noise generator.
    fn calibrate_noise_norm(
        &self,
        teacher: &ClassifierModel,
        batch: &Split,
        chosen: &[usize],
    ) -> Result<f64> {
        let mut norms = Vec::new();
        for &i in chosen {
            let x = batch.sample(i)?;
            let label = batch.labels()[i];
            let target = (label + 1) % teacher.class_count();
            let result = find_bss(teacher, &x, label, target, &self.config.attack)?;
            if result.status.is_success() && result.perturbation.norm_l2() > 0.0 {
                norms.push(result.perturbation.norm_l2());
            }
        }
        if norms.is_empty() {
            log::warn!("noise calibration found no successful attacks; using norm 1.0");
            return Ok(1.0);
        }
        Ok(norms.iter().sum::<f64>() / norms.len() as f64)
    }

    /// Generates boundary-term samples for the chosen base samples.
    /// Returns the usable samples and the number attempted.
    fn generate_samples(
        &mut self,
        teacher: &ClassifierModel,
        batch: &Split,
        selection: &mut BatchSelection,
        teacher_q1: &Tensor,
    ) -> Result<(Vec<Tensor>, usize)> {
        let k = teacher.class_count();
        // Draw all targets sequentially so RNG consumption is deterministic,
        // then generate in parallel.
        let mut jobs: Vec<(usize, usize)> = Vec::new(); // (sample index, target class)
        let mut attempts = 0;
        for &i in &selection.chosen.clone() {
            let label = batch.labels()[i];
            attempts += 1;
            let draw = match self.options.targeting {
                TargetStrategy::TeacherProbability => {
                    let q_row = &teacher_q1.values()[i * k..(i + 1) * k];
                    match sample_target_class(q_row, label, &mut self.rng) {
                        Ok(draw) => draw,
                        Err(Error::NoAlternativeClass(_)) => continue,
                        Err(e) => return Err(e),
                    }
                }
                TargetStrategy::UniformRandom => {
                    let offset = self.rng.gen_range(1..k);
                    let target = (label + offset) % k;
                    let mut probabilities = vec![1.0 / (k - 1) as f64; k];
                    probabilities[label] = 0.0;
                    TargetDraw { target_class: target, probabilities }
                }
            };
            jobs.push((i, draw.target_class));
            selection.target_draws.push(draw);
        }

        let samples: Vec<Option<Tensor>> = match &self.options.generator {
            GeneratorChoice::BoundaryAttack => jobs
                .par_iter()
                .map(|&(i, target)| {
                    let x = batch.sample(i)?;
                    let result = find_bss(teacher, &x, batch.labels()[i], target, &self.config.attack)?;
                    Ok(result.status.is_success().then_some(result.final_sample))
                })
                .collect::<Result<_>>()?,
            GeneratorChoice::Alternative(alt) => match alt.kind {
                AltKind::RandomNoise => {
                    if self.noise_norm.is_none() {
                        self.noise_norm =
                            Some(self.calibrate_noise_norm(teacher, batch, &selection.chosen)?);
                        log::info!("random-noise norm calibrated to {:.4}", self.noise_norm.unwrap());
                    }
                    let norm = self.noise_norm.unwrap();
                    let mut out = Vec::with_capacity(jobs.len());
                    for &(i, _) in &jobs {
                        let x = batch.sample(i)?;
                        out.push(Some(random_noise_sample(&x, norm, &mut self.rng)?));
                    }
                    out
                }
                AltKind::Fgsm => jobs
                    .par_iter()
                    .map(|&(i, _)| {
                        let x = batch.sample(i)?;
                        Ok(Some(fgsm_sample(teacher, &x, batch.labels()[i], alt.fgsm_step)?))
                    })
                    .collect::<Result<_>>()?,
                AltKind::DeepFool => jobs
                    .par_iter()
                    .map(|&(i, _)| {
                        let x = batch.sample(i)?;
                        match deepfool_sample(teacher, &x, alt) {
                            Ok(s) => Ok(Some(s)),
                            Err(Error::DegenerateGradient { .. }) => Ok(None),
                            Err(e) => Err(e),
                        }
                    })
                    .collect::<Result<_>>()?,
                AltKind::L2Minimize => jobs
                    .par_iter()
                    .map(|&(i, target)| {
                        let x = batch.sample(i)?;
                        Ok(Some(l2_minimize_sample(
                            teacher,
                            &x,
                            batch.labels()[i],
                            target,
                            &self.config.attack,
                            alt,
                        )?))
                    })
                    .collect::<Result<_>>()?,
            },
        };
        Ok((samples.into_iter().flatten().collect(), attempts))
    }

    /// One batch update at epoch fraction `t`: selection, target draws,
    /// sample generation, combined loss, momentum SGD step.
    pub fn train_step(
        &mut self,
        student: &mut ClassifierModel,
        batch: &Split,
        t: f64,
    ) -> Result<LossBreakdown> {
        let (alpha, beta) = self.config.schedule(t)?;
        let lr = self.config.lr.at(t);
        let k = student.class_count();

        // teacher logits are reused for soft targets and selection
        let teacher_logits = match self.teacher {
            Some(teacher) if alpha != 0.0 || beta != 0.0 => Some(teacher.logits(batch.inputs())?),
            _ => None,
        };
        let teacher_soft = match &teacher_logits {
            Some(logits) if alpha != 0.0 => {
                Some(probability_rows(logits, k, self.config.temperature)?)
            }
            _ => None,
        };

        // boundary samples
        let mut attempts = 0;
        let mut boundary_inputs = None;
        let mut boundary_soft = None;
        if beta != 0.0 {
            if let (Some(teacher), Some(logits)) = (self.teacher, &teacher_logits) {
                let teacher_q1 = probability_rows(logits, k, 1.0)?;
                let mut selection = if self.options.selection == SelectionStrategy::MostDivergent {
                    let student_q1 = student.class_probabilities(batch.inputs(), 1.0)?;
                    select_from_probabilities(
                        teacher_q1.values(),
                        student_q1.values(),
                        batch.labels(),
                        k,
                        self.config.base_sample_budget,
                    )?
                } else {
                    self.select(teacher, student, batch)?
                };
                let (samples, tried) =
                    self.generate_samples(teacher, batch, &mut selection, &teacher_q1)?;
                attempts = tried;
                if !samples.is_empty() {
                    let stacked = Tensor::stack(&samples)?;
                    let logits_b = teacher.logits(&stacked)?;
                    boundary_soft = Some(probability_rows(&logits_b, k, self.config.temperature)?);
                    boundary_inputs = Some(stacked);
                }
            }
        }
        let successes = boundary_inputs.as_ref().map_or(0, |b| b.shape()[0]);

        // objective and gradients
        let mut tape = Tape::new();
        let param_ids = student.insert_params(&mut tape, true);
        let nodes = build_objective(
            &mut tape,
            student,
            &param_ids,
            batch.inputs(),
            batch.one_hot(),
            teacher_soft.as_ref(),
            boundary_inputs.as_ref(),
            boundary_soft.as_ref(),
            alpha,
            beta,
            self.config.temperature,
        )?;
        let total = tape.value(nodes.total).item()?;
        if !total.is_finite() {
            return Err(Error::Diverged { epoch: 0, detail: format!("loss {total}") });
        }
        let breakdown = LossBreakdown {
            classification: tape.value(nodes.classification).item()?,
            distillation: nodes.distillation.map_or(0.0, |n| tape.value(n).item().unwrap()),
            boundary: nodes.boundary.map_or(0.0, |n| tape.value(n).item().unwrap()),
            alpha,
            beta,
            total,
            attack_attempts: attempts,
            attack_successes: successes,
        };
        let grads = tape.backward(nodes.total)?;

        // momentum SGD with weight decay
        let mut new_params = Vec::with_capacity(student.params().len());
        for (pi, (param, vel)) in student.params().iter().zip(self.velocity.iter_mut()).enumerate() {
            let grad = grads.get(param_ids[pi])?;
            let mut v_new = Vec::with_capacity(param.len());
            let mut p_new = Vec::with_capacity(param.len());
            for ((&p, &g), &v) in param.values().iter().zip(grad.values()).zip(vel.values()) {
                let g_wd = g + self.config.weight_decay * p;
                let v_next = self.config.momentum * v + g_wd;
                v_new.push(v_next);
                p_new.push(p - lr * v_next);
            }
            *vel = Tensor::new(param.shape().to_vec(), v_new)?;
            new_params.push(Tensor::new(param.shape().to_vec(), p_new)?);
        }
        student.set_params(new_params)?;
        Ok(breakdown)
    }
}

// ── training loop ────────────────────────────────────────────────────

/// One per-epoch log row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub classification: f64,
    pub distillation: f64,
    pub boundary: f64,
    pub alpha: f64,
    pub beta: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// `None` in epochs where no attacks ran.
    pub attack_success_rate: Option<f64>,
}

/// Full training history.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }

    /// Successes over attempts across the whole run.
    pub fn overall_attack_success_rate(&self) -> Option<f64> {
        let mut rates: Vec<f64> = Vec::new();
        for e in &self.epochs {
            if let Some(r) = e.attack_success_rate {
                rates.push(r);
            }
        }
        if rates.is_empty() {
            None
        } else {
            Some(rates.iter().sum::<f64>() / rates.len() as f64)
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "epoch,classification_loss,distillation_loss,boundary_term,alpha,beta,train_accuracy,test_accuracy,attack_success_rate"
        )?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.classification,
                e.distillation,
                e.boundary,
                e.alpha,
                e.beta,
                e.train_accuracy,
                e.test_accuracy,
                e.attack_success_rate.map_or(String::new(), |r| r.to_string()),
            )?;
        }
        Ok(())
    }
}

/// Trains the student on the dataset's training split, logging one row
/// per epoch. Deterministic given the config seed. Aborts with a
/// diagnostic if the loss goes non-finite.
pub fn train(
    teacher: Option<&ClassifierModel>,
    student: &mut ClassifierModel,
    dataset: &Dataset,
    config: &DistillConfig,
    options: &TrainOptions,
) -> Result<TrainLog> {
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::InvalidArgument("training requires non-empty train and test splits".into()));
    }
    let mut trainer = Trainer::new(teacher, student, config, options)?;
    let batch_size = config.batch_size.min(dataset.train.len());
    if batch_size < config.batch_size {
        log::warn!(
            "batch size {} reduced to dataset size {}",
            config.batch_size,
            batch_size
        );
    }

    let mut log = TrainLog::default();
    let mut indices: Vec<usize> = (0..dataset.train.len()).collect();
    for epoch in 0..config.epochs {
        let t = if config.epochs > 1 {
            epoch as f64 / (config.epochs - 1) as f64
        } else {
            0.0
        };
        indices.shuffle(&mut trainer.rng);

        let mut sums = (0.0, 0.0, 0.0);
        let mut attempts = 0;
        let mut successes = 0;
        let mut steps = 0;
        let mut alpha = 0.0;
        let mut beta = 0.0;
        for chunk in indices.chunks(batch_size) {
            let batch = dataset.train.select(chunk)?;
            let breakdown = trainer.train_step(student, &batch, t).map_err(|e| match e {
                Error::Diverged { detail, .. } => Error::Diverged { epoch, detail },
                other => other,
            })?;
            if !breakdown.total.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("loss {}", breakdown.total) });
            }
            sums.0 += breakdown.classification;
            sums.1 += breakdown.distillation;
            sums.2 += breakdown.boundary;
            attempts += breakdown.attack_attempts;
            successes += breakdown.attack_successes;
            alpha = breakdown.alpha;
            beta = breakdown.beta;
            steps += 1;
        }
        let n = steps as f64;
        log.epochs.push(EpochLog {
            epoch,
            classification: sums.0 / n,
            distillation: sums.1 / n,
            boundary: sums.2 / n,
            alpha,
            beta,
            train_accuracy: student.accuracy(dataset.train.inputs(), dataset.train.labels())?,
            test_accuracy: student.accuracy(dataset.test.inputs(), dataset.test.labels())?,
            attack_success_rate: (attempts > 0).then(|| successes as f64 / attempts as f64),
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, gradient_rel_error};
    use crate::data::{generate_gaussians, GaussianParams};
    use crate::model::{Activation, ClassifierSpec};
    use proptest::prelude::*;

    fn tiny_config(epochs: usize) -> DistillConfig {
        DistillConfig {
            batch_size: 16,
            base_sample_budget: 4,
            epochs,
            lr: LrSchedule { initial: 0.05, drops: vec![(0.5, 0.1), (0.75, 0.1)] },
            ..Default::default()
        }
    }

    fn small_dataset() -> Dataset {
        generate_gaussians(&GaussianParams::two_blobs(2.0, 24, 24, 5)).unwrap()
    }

    fn small_models() -> (ClassifierModel, ClassifierModel) {
        let teacher_spec = ClassifierSpec::mlp(2, &[16, 16], 2, Activation::Relu);
        let student_spec = ClassifierSpec::mlp(2, &[4], 2, Activation::Relu);
        (
            ClassifierModel::init(teacher_spec, 10).unwrap(),
            ClassifierModel::init(student_spec, 20).unwrap(),
        )
    }

    #[test]
    fn paper_defaults() {
        let cfg = DistillConfig::default();
        assert_eq!(cfg.temperature, 3.0);
        assert_eq!(cfg.base_sample_budget, 64);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.attack.learning_rate, 0.3);
        assert_eq!(cfg.attack.max_iterations, 10);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = DistillConfig::default();
        assert_eq!(cfg.schedule(0.0).unwrap(), (4.0, 2.0));
        let (a, b) = cfg.schedule(0.75).unwrap();
        assert!((a - 1.75).abs() < 1e-12);
        assert_eq!(b, 0.0);
        assert_eq!(cfg.schedule(1.0).unwrap(), (1.0, 0.0));
        assert!(cfg.schedule(-0.1).is_err());
        assert!(cfg.schedule(1.1).is_err());
    }

    #[test]
    fn learning_rate_drops() {
        let lr = LrSchedule::default();
        assert_eq!(lr.at(0.0), 0.1);
        assert!((lr.at(0.6) - 0.01).abs() < 1e-15);
        assert!((lr.at(0.8) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn classification_loss_examples() {
        let (_, student) = small_models();
        let x = Tensor::from_vec(vec![0.5, -0.5]).unwrap();
        // near-certain correct prediction → loss near 0
        let confident = crate::model::linear_model([[50.0, 0.0], [-50.0, 0.0]], [0.0, 0.0]);
        let y0 = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        let x_pos = Tensor::from_vec(vec![1.0, 0.0]).unwrap();
        assert!(classification_loss(&confident, &x_pos, &y0).unwrap() < 1e-12);
        // uniform output over K=10 → ln 10
        let spec = ClassifierSpec::mlp(2, &[], 10, Activation::Linear);
        let mut uniform = ClassifierModel::init(spec, 0).unwrap();
        uniform
            .set_params(vec![Tensor::zeros(vec![2, 10]), Tensor::zeros(vec![10])])
            .unwrap();
        let y = Tensor::from_vec(
            (0..10).map(|i| if i == 3 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        assert!((classification_loss(&uniform, &x, &y).unwrap() - 10f64.ln()).abs() < 1e-12);
        // non-one-hot rejected
        let bad = Tensor::from_vec(vec![0.5, 0.5]).unwrap();
        assert!(classification_loss(&student, &x, &bad).is_err());
        let two_ones = Tensor::from_vec(vec![1.0, 1.0]).unwrap();
        assert!(classification_loss(&student, &x, &two_ones).is_err());
    }

    #[test]
    fn kd_loss_matching_models_gives_entropy_and_zero_gradient() {
        let (teacher, _) = small_models();
        let student = teacher.clone();
        let x = Tensor::from_vec(vec![0.7, -0.3]).unwrap();
        let t = 3.0;
        let loss = kd_loss(&teacher, &student, &x, t).unwrap();
        let p = teacher.class_probabilities(&x, t).unwrap();
        let entropy: f64 = -p.values().iter().map(|&q| q * q.ln()).sum::<f64>();
        assert!((loss - entropy).abs() < 1e-12);

        // gradient w.r.t. student parameters vanishes when the
        // distributions match
        let mut tape = Tape::new();
        let params = student.insert_params(&mut tape, true);
        let batch = x.reshape(vec![1, 2]).unwrap();
        let one_hot = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let soft = teacher.class_probabilities(&batch, t).unwrap();
        let nodes = build_objective(
            &mut tape, &student, &params, &batch, &one_hot, Some(&soft), None, None, 1.0, 0.0, t,
        )
        .unwrap();
        let kd_node = nodes.distillation.unwrap();
        let grads = tape.backward(kd_node).unwrap();
        for &id in &params {
            for &g in grads.get(id).unwrap().values() {
                assert!(g.abs() < 1e-12, "KD gradient {g} should vanish");
            }
        }
        assert!(kd_loss(&teacher, &student, &x, 0.0).is_err());
    }

    #[test]
    fn kd_loss_uniform_teacher_and_student() {
        let spec = ClassifierSpec::mlp(2, &[], 4, Activation::Linear);
        let mut flat = ClassifierModel::init(spec, 0).unwrap();
        flat.set_params(vec![Tensor::zeros(vec![2, 4]), Tensor::zeros(vec![4])]).unwrap();
        let x = Tensor::from_vec(vec![0.3, 0.4]).unwrap();
        let loss = kd_loss(&flat, &flat.clone(), &x, 1.0).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bs_loss_equals_kd_loss_at_base_sample() {
        let (teacher, student) = small_models();
        let x = Tensor::from_vec(vec![1.2, -0.8]).unwrap();
        let a = bs_loss(&teacher, &student, &x, 3.0).unwrap();
        let b = kd_loss(&teacher, &student, &x, 3.0).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    #[test]
    fn selection_excludes_student_mistakes() {
        // teacher predicts class 0 for positive x0; student inverted
        let teacher = crate::model::linear_model([[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0]);
        let student = crate::model::linear_model([[-1.0, 0.0], [1.0, 0.0]], [0.0, 0.0]);
        let inputs = Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let batch = Split::new(inputs, vec![0, 1], 2).unwrap();
        let sel = select_base_samples(&teacher, &student, &batch, 2).unwrap();
        assert!(sel.eligible.is_empty());
        assert!(sel.chosen.is_empty());
    }

    #[test]
    fn selection_ties_break_by_batch_order() {
        let teacher = crate::model::linear_model([[1.0, 0.0], [-1.0, 0.0]], [0.0, 0.0]);
        let student = teacher.clone();
        let inputs = Tensor::new(vec![4, 2], vec![1.0, 0.0, 2.0, 0.0, -1.0, 0.0, -2.0, 0.0]).unwrap();
        let batch = Split::new(inputs, vec![0, 0, 1, 1], 2).unwrap();
        // all distances are zero; the first two in batch order win
        let sel = select_base_samples(&teacher, &student, &batch, 2).unwrap();
        assert_eq!(sel.eligible, vec![0, 1, 2, 3]);
        assert_eq!(sel.chosen, vec![0, 1]);
        assert_eq!(sel.distances, vec![0.0, 0.0]);
    }

    #[test]
    fn target_sampling_matches_closed_form() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let draw = sample_target_class(&[0.5, 0.3, 0.2], 0, &mut rng).unwrap();
        assert_eq!(draw.probabilities, vec![0.0, 0.6, 0.4]);
        // two-class case is forced
        let draw = sample_target_class(&[0.7, 0.3], 0, &mut rng).unwrap();
        assert_eq!(draw.target_class, 1);
        assert_eq!(draw.probabilities[0], 0.0);
        assert!((draw.probabilities[1] - 1.0).abs() < 1e-12);
        // all mass on the base class
        assert!(matches!(
            sample_target_class(&[1.0, 0.0], 0, &mut rng),
            Err(Error::NoAlternativeClass(_))
        ));
    }

    #[test]
    fn target_sampling_frequencies_match_eq_probabilities() {
        // chi-square goodness of fit over 1e5 draws at significance 0.01
        let q = [0.4, 0.25, 0.2, 0.1, 0.05];
        let mut rng = ChaCha20Rng::seed_from_u64(12345);
        let draws = 100_000;
        let mut counts = [0usize; 5];
        let mut expected_p = Vec::new();
        for _ in 0..draws {
            let d = sample_target_class(&q, 0, &mut rng).unwrap();
            counts[d.target_class] += 1;
            expected_p = d.probabilities.clone();
        }
        assert_eq!(counts[0], 0);
        let chi2: f64 = (1..5)
            .map(|c| {
                let expected = expected_p[c] * draws as f64;
                let diff = counts[c] as f64 - expected;
                diff * diff / expected
            })
            .sum();
        let threshold = crate::stats::chi_square_critical(3, 0.01);
        assert!(chi2 < threshold, "chi2 {chi2} vs critical {threshold}");
    }

    #[test]
    fn plain_ce_step_matches_hand_rolled_oracle() {
        // alpha = beta = 0 must reduce to cross-entropy + weight decay +
        // momentum, computed here independently for a linear student.
        let spec = ClassifierSpec::mlp(2, &[], 2, Activation::Linear);
        let mut student = ClassifierModel::init(spec, 3).unwrap();
        let w0 = student.params()[0].clone();
        let b0 = student.params()[1].clone();
        let dataset = small_dataset();
        let batch = dataset.train.select(&[0, 1, 2, 3]).unwrap();

        let config = DistillConfig {
            alpha: AlphaSchedule { start: 0.0, end: 0.0 },
            beta: BetaSchedule { start: 0.0, zero_at: 0.75 },
            batch_size: 4,
            base_sample_budget: 2,
            epochs: 1,
            lr: LrSchedule { initial: 0.1, drops: vec![] },
            ..Default::default()
        };
        let options = TrainOptions::default();
        let mut trainer = Trainer::new(None, &student, &config, &options).unwrap();
        trainer.train_step(&mut student, &batch, 0.0).unwrap();

        // oracle: dL/dz = (softmax(z) - y)/B, dW = x^T dz, db = sum dz
        let k = 2;
        let b_n = batch.len();
        let mut dw = vec![0.0; 4];
        let mut db = vec![0.0; 2];
        for i in 0..b_n {
            let x = batch.sample(i).unwrap();
            let mut z = [0.0f64; 2];
            for j in 0..k {
                z[j] = b0.values()[j]
                    + x.values()[0] * w0.values()[j]
                    + x.values()[1] * w0.values()[k + j];
            }
            let m = z[0].max(z[1]);
            let e = [(z[0] - m).exp(), (z[1] - m).exp()];
            let s = e[0] + e[1];
            for j in 0..k {
                let dz = (e[j] / s - batch.one_hot().values()[i * k + j]) / b_n as f64;
                dw[j] += x.values()[0] * dz;
                dw[k + j] += x.values()[1] * dz;
                db[j] += dz;
            }
        }
        let lr = 0.1;
        let wd = config.weight_decay;
        for (idx, &w_new) in student.params()[0].values().iter().enumerate() {
            let g = dw[idx] + wd * w0.values()[idx];
            let expected = w0.values()[idx] - lr * g; // first step: velocity = g
            assert!((w_new - expected).abs() < 1e-12, "weight {idx}: {w_new} vs {expected}");
        }
        for (idx, &b_new) in student.params()[1].values().iter().enumerate() {
            let expected = b0.values()[idx] - lr * db[idx];
            assert!((b_new - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_selection_drops_boundary_term_exactly() {
        let (teacher, _) = small_models();
        // student that is wrong everywhere: labels flipped
        let dataset = small_dataset();
        let batch = dataset.train.select(&(0..8).collect::<Vec<_>>()).unwrap();
        let flipped: Vec<usize> = batch.labels().iter().map(|&l| 1 - l).collect();
        let batch = Split::new(batch.inputs().clone(), flipped, 2).unwrap();

        let config = tiny_config(1);
        let options = TrainOptions::default();
        let mut student = teacher.clone();
        let mut trainer = Trainer::new(Some(&teacher), &student, &config, &options).unwrap();
        let breakdown = trainer.train_step(&mut student, &batch, 0.0).unwrap();
        assert_eq!(breakdown.attack_attempts, 0);
        assert_eq!(breakdown.boundary, 0.0);
        let recomposed = breakdown.classification + breakdown.alpha * breakdown.distillation;
        assert!((breakdown.total - recomposed).abs() < 1e-10);
    }

    #[test]
    fn matched_teacher_student_updates_only_through_cls_and_decay() {
        let (teacher, _) = small_models();
        let dataset = small_dataset();
        let batch = dataset.train.select(&(0..16).collect::<Vec<_>>()).unwrap();
        let options = TrainOptions::default();

        let config_full = tiny_config(1);
        let mut student_full = teacher.clone();
        let mut trainer = Trainer::new(Some(&teacher), &student_full, &config_full, &options).unwrap();
        trainer.train_step(&mut student_full, &batch, 0.0).unwrap();

        let config_zero = DistillConfig {
            alpha: AlphaSchedule { start: 0.0, end: 0.0 },
            beta: BetaSchedule { start: 0.0, zero_at: 0.75 },
            ..tiny_config(1)
        };
        let mut student_zero = teacher.clone();
        let mut trainer = Trainer::new(Some(&teacher), &student_zero, &config_zero, &options).unwrap();
        trainer.train_step(&mut student_zero, &batch, 0.0).unwrap();

        for (a, b) in student_full.params().iter().zip(student_zero.params()) {
            for (&x, &y) in a.values().iter().zip(b.values()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn loss_breakdown_recomposes() {
        let (teacher, mut student) = small_models();
        let dataset = small_dataset();
        let batch = dataset.train.select(&(0..16).collect::<Vec<_>>()).unwrap();
        let config = tiny_config(1);
        let options = TrainOptions::default();
        let mut trainer = Trainer::new(Some(&teacher), &student.clone(), &config, &options).unwrap();
        let b = trainer.train_step(&mut student, &batch, 0.0).unwrap();
        let recomposed = b.classification + b.alpha * b.distillation + b.beta * b.boundary;
        assert!((b.total - recomposed).abs() < 1e-10, "{} vs {recomposed}", b.total);
    }

    #[test]
    fn full_objective_gradient_matches_finite_differences() {
        // boundary inputs held fixed while a parameter slice is perturbed
        let (teacher, student) = small_models();
        let dataset = small_dataset();
        let batch = dataset.train.select(&[0, 1, 2, 3, 24, 25]).unwrap();
        let bss = Tensor::new(vec![2, 2], vec![0.3, -0.2, -0.6, 0.9]).unwrap();
        let k = 2;
        let t = 3.0;
        let soft = probability_rows(&teacher.logits(batch.inputs()).unwrap(), k, t).unwrap();
        let bsoft = probability_rows(&teacher.logits(&bss).unwrap(), k, t).unwrap();

        let leaves: Vec<Tensor> = student.params().to_vec();
        let build = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
            let nodes = build_objective(
                tape,
                &student,
                ids,
                batch.inputs(),
                batch.one_hot(),
                Some(&soft),
                Some(&bss),
                Some(&bsoft),
                3.5,
                1.2,
                t,
            )?;
            Ok(nodes.total)
        };

        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let out = build(&mut tape, &ids).unwrap();
        let grads = tape.backward(out).unwrap();

        // random slice of parameter coordinates
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        for _ in 0..40 {
            let li = rng.gen_range(0..leaves.len());
            let ei = rng.gen_range(0..leaves[li].len());
            let analytic = grads.get(ids[li]).unwrap().values()[ei];
            let numeric = central_difference(&build, &leaves, li, ei, 1e-5).unwrap();
            let rel = gradient_rel_error(analytic, numeric);
            assert!(rel <= 1e-4, "param {li}[{ei}]: rel {rel}");
        }
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let (teacher, _) = small_models();
        let dataset = small_dataset();
        let config = tiny_config(3);
        let options = TrainOptions::default();
        let run = || {
            let spec = ClassifierSpec::mlp(2, &[4], 2, Activation::Relu);
            let mut student = ClassifierModel::init(spec, 20).unwrap();
            train(Some(&teacher), &mut student, &dataset, &config, &options).unwrap();
            student
        };
        let a = run();
        let b = run();
        for (p, q) in a.params().iter().zip(b.params()) {
            for (x, y) in p.values().iter().zip(q.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (_, mut student) = small_models();
        let dataset = small_dataset();
        let config = DistillConfig {
            alpha: AlphaSchedule { start: 0.0, end: 0.0 },
            beta: BetaSchedule { start: 0.0, zero_at: 0.75 },
            lr: LrSchedule { initial: 1e14, drops: vec![] },
            epochs: 4,
            batch_size: 16,
            base_sample_budget: 4,
            ..Default::default()
        };
        let err = train(None, &mut student, &dataset, &config, &TrainOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn teacher_required_for_nonzero_schedules() {
        let (_, student) = small_models();
        let config = tiny_config(1);
        assert!(Trainer::new(None, &student, &config, &TrainOptions::default()).is_err());
    }

    #[test]
    fn csv_log_has_expected_columns() {
        let (_, mut student) = small_models();
        let dataset = small_dataset();
        let config = DistillConfig {
            alpha: AlphaSchedule { start: 0.0, end: 0.0 },
            beta: BetaSchedule { start: 0.0, zero_at: 0.75 },
            epochs: 2,
            batch_size: 16,
            base_sample_budget: 4,
            ..Default::default()
        };
        let log = train(None, &mut student, &dataset, &config, &TrainOptions::default()).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epoch,classification_loss"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn schedules_are_monotone_non_increasing(t1 in 0.0f64..1.0, dt in 0.0f64..1.0) {
            let cfg = DistillConfig::default();
            let t2 = (t1 + dt).min(1.0);
            let (a1, b1) = cfg.schedule(t1).unwrap();
            let (a2, b2) = cfg.schedule(t2).unwrap();
            prop_assert!(a2 <= a1 + 1e-12);
            prop_assert!(b2 <= b1 + 1e-12);
        }

        #[test]
        fn drawn_distribution_is_valid(q0 in 0.01f64..0.97, q1 in 0.01f64..0.97, seed in 0u64..500) {
            // build a 3-class probability vector and check the draw's
            // distribution invariants
            let rest = 1.0 - q0;
            let q1 = q1.min(0.99) * rest;
            let q = [q0, q1, rest - q1];
            prop_assume!(q[2] > 0.0);
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let draw = sample_target_class(&q, 0, &mut rng).unwrap();
            prop_assert_eq!(draw.probabilities[0], 0.0);
            prop_assert!(draw.target_class != 0);
            let sum: f64 = draw.probabilities.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(draw.probabilities.iter().all(|&p| p >= 0.0));
        }
    }
}
