//! Decision-boundary similarity between two classifiers.
//!
//! For a base sample both models classify correctly, the boundary attack
//! is run independently on each model with the same target class. The
//! resulting perturbation vectors are compared by magnitude ratio
//! (MagSim: `min |a| / max |b|` style norm ratio, 1 when the boundary lies
//! at the same distance) and direction (AngSim: cosine, 1 when the attack
//! paths are parallel). Pairs are included only when both attacks
//! succeeded; every exclusion carries a reason code.

use crate::attack::{find_bss, AttackConfig};
use crate::distill::sample_target_class;
use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// One (base sample, target class) attack pair against two models.
#[derive(Debug, Clone)]
pub struct PerturbationPair {
    pub sample_id: usize,
    pub target_class: usize,
    /// Perturbation found on the first (teacher-side) model.
    pub teacher_perturbation: Tensor,
    /// Perturbation found on the second (student-side) model.
    pub student_perturbation: Tensor,
    /// Both attacks ended in success; only such pairs aggregate.
    pub both_success: bool,
}

impl PerturbationPair {
    fn includable(&self) -> bool {
        self.both_success
            && self.teacher_perturbation.norm_l2() > 0.0
            && self.student_perturbation.norm_l2() > 0.0
    }
}

/// Why a pair was left out of the aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExclusionReason {
    FirstAttackFailed,
    SecondAttackFailed,
    BothAttacksFailed,
    ZeroNormPerturbation,
}

/// Exclusion tally by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub first_attack_failed: usize,
    pub second_attack_failed: usize,
    pub both_attacks_failed: usize,
    pub zero_norm_perturbation: usize,
}

impl ExclusionCounts {
    fn record(&mut self, reason: ExclusionReason) {
        match reason {
            ExclusionReason::FirstAttackFailed => self.first_attack_failed += 1,
            ExclusionReason::SecondAttackFailed => self.second_attack_failed += 1,
            ExclusionReason::BothAttacksFailed => self.both_attacks_failed += 1,
            ExclusionReason::ZeroNormPerturbation => self.zero_norm_perturbation += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.first_attack_failed
            + self.second_attack_failed
            + self.both_attacks_failed
            + self.zero_norm_perturbation
    }
}

/// Similarity aggregated over one target class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSimilarity {
    pub target_class: usize,
    pub attempted: usize,
    pub included: usize,
    pub magsim: Option<f64>,
    pub angsim: Option<f64>,
}

/// Aggregated boundary-similarity report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub magsim: f64,
    pub angsim: f64,
    pub pairs_attempted: usize,
    pub pairs_included: usize,
    /// Samples skipped before any attack because one model misclassified
    /// them.
    pub samples_skipped: usize,
    pub per_class: Vec<ClassSimilarity>,
    pub exclusions: ExclusionCounts,
}

/// One CSV row of [`compare_classifiers`] output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub sample_id: usize,
    pub target_class: usize,
    pub teacher_norm: f64,
    pub student_norm: f64,
    pub cosine: Option<f64>,
    pub included: bool,
    pub exclusion: Option<ExclusionReason>,
}

/// Writes per-pair rows as CSV.
pub fn write_pair_csv<W: Write>(records: &[PairRecord], mut w: W) -> Result<()> {
    writeln!(w, "sample_id,target_class,teacher_norm,student_norm,cosine,included")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.sample_id,
            r.target_class,
            r.teacher_norm,
            r.student_norm,
            r.cosine.map_or(String::new(), |c| c.to_string()),
            r.included,
        )?;
    }
    Ok(())
}

fn included_pairs(pairs: &[PerturbationPair]) -> Result<Vec<&PerturbationPair>> {
    let included: Vec<&PerturbationPair> = pairs.iter().filter(|p| p.includable()).collect();
    if included.is_empty() {
        return Err(Error::InvalidArgument(
            "similarity needs at least one included pair".into(),
        ));
    }
    Ok(included)
}

/// Mean `min/max` ratio of paired perturbation norms over included pairs.
pub fn magsim(pairs: &[PerturbationPair]) -> Result<f64> {
    let included = included_pairs(pairs)?;
    let sum: f64 = included
        .iter()
        .map(|p| {
            let a = p.teacher_perturbation.norm_l2();
            let b = p.student_perturbation.norm_l2();
            a.min(b) / a.max(b)
        })
        .sum();
    Ok(sum / included.len() as f64)
}

/// Mean cosine similarity of paired perturbation directions over included
/// pairs. Cosines can be negative; values are reported unclamped.
pub fn angsim(pairs: &[PerturbationPair]) -> Result<f64> {
    let included = included_pairs(pairs)?;
    let mut sum = 0.0;
    for p in &included {
        sum += p.teacher_perturbation.dot(&p.student_perturbation)?
            / (p.teacher_perturbation.norm_l2() * p.student_perturbation.norm_l2());
    }
    Ok(sum / included.len() as f64)
}

/// Which target classes to attack per base sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TargetPolicy {
    /// Every class except the label (the offline metric default).
    AllClasses,
    /// One target per sample, drawn from the first model's class
    /// probabilities.
    SingleDraw { seed: u64 },
}

/// Runs the boundary attack toward each selected target on both models
/// independently and aggregates magnitude and angle similarity.
///
/// Only evaluation samples correctly classified by both models are
/// attacked; failed or zero-norm pairs are excluded and counted.
pub fn compare_classifiers(
    model_a: &ClassifierModel,
    model_b: &ClassifierModel,
    inputs: &Tensor,
    labels: &[usize],
    attack: &AttackConfig,
    policy: TargetPolicy,
) -> Result<(SimilarityReport, Vec<PairRecord>)> {
    if model_a.class_count() != model_b.class_count() {
        return Err(Error::InvalidArgument(format!(
            "class counts differ: {} vs {}",
            model_a.class_count(),
            model_b.class_count()
        )));
    }
    if model_a.spec().input_shape != model_b.spec().input_shape {
        return Err(Error::InvalidArgument("models take different input shapes".into()));
    }
    let k = model_a.class_count();
    let preds_a = model_a.predict_batch(inputs)?;
    let preds_b = model_b.predict_batch(inputs)?;

    let mut rng = match policy {
        TargetPolicy::SingleDraw { seed } => Some(ChaCha20Rng::seed_from_u64(seed)),
        TargetPolicy::AllClasses => None,
    };

    // build the attack job list sequentially (RNG order), run in parallel
    let mut jobs: Vec<(usize, usize, usize)> = Vec::new(); // (sample, label, target)
    let mut samples_skipped = 0;
    for (i, &label) in labels.iter().enumerate() {
        if preds_a[i] != label || preds_b[i] != label {
            samples_skipped += 1;
            continue;
        }
        match (&policy, rng.as_mut()) {
            (TargetPolicy::AllClasses, _) => {
                for target in (0..k).filter(|&c| c != label) {
                    jobs.push((i, label, target));
                }
            }
            (TargetPolicy::SingleDraw { .. }, Some(rng)) => {
                let q = model_a.class_probabilities(&inputs.row(i)?, 1.0)?;
                match sample_target_class(q.values(), label, rng) {
                    Ok(draw) => jobs.push((i, label, draw.target_class)),
                    Err(Error::NoAlternativeClass(_)) => samples_skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            _ => unreachable!(),
        }
    }

    let attacked: Vec<(PerturbationPair, Option<ExclusionReason>)> = jobs
        .par_iter()
        .map(|&(i, label, target)| -> Result<(PerturbationPair, Option<ExclusionReason>)> {
            let x = inputs.row(i)?;
            let ra = find_bss(model_a, &x, label, target, attack)?;
            let rb = find_bss(model_b, &x, label, target, attack)?;
            let (a_ok, b_ok) = (ra.status.is_success(), rb.status.is_success());
            let pair = PerturbationPair {
                sample_id: i,
                target_class: target,
                both_success: a_ok && b_ok,
                teacher_perturbation: ra.perturbation,
                student_perturbation: rb.perturbation,
            };
            let reason = match (a_ok, b_ok) {
                (false, false) => Some(ExclusionReason::BothAttacksFailed),
                (false, true) => Some(ExclusionReason::FirstAttackFailed),
                (true, false) => Some(ExclusionReason::SecondAttackFailed),
                (true, true) if !pair.includable() => Some(ExclusionReason::ZeroNormPerturbation),
                _ => None,
            };
            Ok((pair, reason))
        })
        .collect::<Result<_>>()?;

    let mut pairs = Vec::with_capacity(attacked.len());
    let mut records = Vec::with_capacity(attacked.len());
    let mut exclusions = ExclusionCounts::default();
    for (p, exclusion) in attacked {
        let a_norm = p.teacher_perturbation.norm_l2();
        let b_norm = p.student_perturbation.norm_l2();
        let included = exclusion.is_none();
        if let Some(reason) = exclusion {
            exclusions.record(reason);
        }
        records.push(PairRecord {
            sample_id: p.sample_id,
            target_class: p.target_class,
            teacher_norm: a_norm,
            student_norm: b_norm,
            cosine: included.then(|| {
                p.teacher_perturbation.dot(&p.student_perturbation).unwrap() / (a_norm * b_norm)
            }),
            included,
            exclusion,
        });
        pairs.push(p);
    }

    let mut per_class = Vec::new();
    for target in 0..k {
        let class_pairs: Vec<PerturbationPair> =
            pairs.iter().filter(|p| p.target_class == target).cloned().collect();
        let included = class_pairs.iter().filter(|p| p.includable()).count();
        per_class.push(ClassSimilarity {
            target_class: target,
            attempted: class_pairs.len(),
            included,
            magsim: magsim(&class_pairs).ok(),
            angsim: angsim(&class_pairs).ok(),
        });
    }

    let report = SimilarityReport {
        magsim: magsim(&pairs)?,
        angsim: angsim(&pairs)?,
        pairs_attempted: pairs.len(),
        pairs_included: pairs.iter().filter(|p| p.includable()).count(),
        samples_skipped,
        per_class,
        exclusions,
    };
    Ok((report, records))
}
