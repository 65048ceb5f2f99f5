//! Seeded, replayable experiment recipes.
//!
//! An [`ExperimentGrid`] fixes the dataset pipeline, teacher recipe,
//! student architecture, and base training config; running it over a
//! method list and seed list yields one [`ExperimentResult`] per cell.
//! Every result embeds a [`RunSnapshot`] that reconstructs the run
//! bit-for-bit, teacher training included.

use crate::attack::AttackConfig;
use crate::data::{
    generate_gaussians, generate_spirals, load_idx, normalize, subsample, Dataset, GaussianParams,
    SpiralParams,
};
use crate::distill::{
    train, AlphaSchedule, BetaSchedule, DistillConfig, GeneratorChoice, LrSchedule,
    SelectionStrategy, TargetStrategy, TrainLog, TrainOptions,
};
use crate::altgen::{AltGenConfig, AltKind};
use crate::error::{Error, Result};
use crate::metrics::{compare_classifiers, SimilarityReport, TargetPolicy};
use crate::model::{Activation, ClassifierModel, ClassifierSpec};
use crate::stats::{mean, std_dev};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

/// Fixed seed list mirroring the ten-repetitions protocol.
pub const DEFAULT_SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

// ── dataset pipeline ─────────────────────────────────────────────────

/// Which dataset to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    Gaussians(GaussianParams),
    Spirals(SpiralParams),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        class_count: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub fraction: f64,
    pub seed: u64,
}

/// Dataset generation plus optional normalization and stratified
/// subsampling, all deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPipeline {
    pub spec: DatasetSpec,
    pub normalize: bool,
    pub subsample: Option<SubsampleSpec>,
}

impl DataPipeline {
    pub fn build(&self) -> Result<Dataset> {
        let mut dataset = match &self.spec {
            DatasetSpec::Gaussians(p) => generate_gaussians(p)?,
            DatasetSpec::Spirals(p) => generate_spirals(p)?,
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, class_count } => {
                let train = load_idx(train_images, train_labels, *class_count)?;
                let test = load_idx(test_images, test_labels, *class_count)?;
                let k = train.one_hot().shape()[1];
                Dataset::new(k, train, test)?
            }
        };
        if self.normalize {
            dataset = normalize(dataset)?;
        }
        if let Some(s) = self.subsample {
            dataset = subsample(&dataset, s.fraction, s.seed)?;
        }
        Ok(dataset)
    }
}

// ── teacher recipe ───────────────────────────────────────────────────

/// Everything needed to train the teacher deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherRecipe {
    pub spec: ClassifierSpec,
    pub init_seed: u64,
    pub config: DistillConfig,
}

impl TeacherRecipe {
    /// Plain cross-entropy training config (no distillation terms).
    pub fn plain(spec: ClassifierSpec, init_seed: u64, epochs: usize, batch_size: usize) -> Self {
        Self {
            spec,
            init_seed,
            config: DistillConfig {
                alpha: AlphaSchedule { start: 0.0, end: 0.0 },
                beta: BetaSchedule { start: 0.0, zero_at: 0.75 },
                epochs,
                batch_size,
                base_sample_budget: batch_size.min(64),
                seed: init_seed,
                ..Default::default()
            },
        }
    }

    pub fn train(&self, dataset: &Dataset) -> Result<(ClassifierModel, TrainLog)> {
        let mut teacher = ClassifierModel::init(self.spec.clone(), self.init_seed)?;
        let log = train(None, &mut teacher, dataset, &self.config, &TrainOptions::default())?;
        teacher.set_run_id(format!("teacher-{}", self.init_seed));
        Ok((teacher, log))
    }
}

// ── methods ──────────────────────────────────────────────────────────

/// Training variants compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Hard labels only.
    Original,
    /// Hard labels plus the softened distillation term.
    Hinton,
    /// The full three-term loss with boundary supporting samples.
    Bss,
    /// Ablation: every batch sample is a base sample.
    AllSampleSelection,
    /// Ablation: base samples drawn uniformly at random.
    RandomSelection,
    /// Ablation: target classes drawn uniformly instead of by teacher
    /// probability.
    RandomTargetClass,
    /// Attack variant: matched-norm Gaussian noise.
    RandomNoise,
    /// Attack variant: one signed-gradient step.
    Fgsm,
    /// Attack variant: linearized minimal perturbation.
    DeepFool,
    /// Attack variant: descent on the attack loss with an L2 pull.
    L2Minimize,
}

impl Method {
    pub const fn name(self) -> &'static str {
        match self {
            Method::Original => "original",
            Method::Hinton => "hinton",
            Method::Bss => "bss",
            Method::AllSampleSelection => "all-sample-selection",
            Method::RandomSelection => "random-selection",
            Method::RandomTargetClass => "random-target-class",
            Method::RandomNoise => "random-noise",
            Method::Fgsm => "fgsm",
            Method::DeepFool => "deepfool",
            Method::L2Minimize => "l2-minimize",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::all()
            .iter()
            .copied()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{name}`")))
    }

    pub const fn all() -> [Method; 10] {
        [
            Method::Original,
            Method::Hinton,
            Method::Bss,
            Method::AllSampleSelection,
            Method::RandomSelection,
            Method::RandomTargetClass,
            Method::RandomNoise,
            Method::Fgsm,
            Method::DeepFool,
            Method::L2Minimize,
        ]
    }

    /// Derives this method's training config and strategy from a base
    /// config (which carries the proposed-method defaults).
    pub fn apply(self, base: &DistillConfig) -> (DistillConfig, TrainOptions) {
        let mut config = base.clone();
        let mut options = TrainOptions::default();
        match self {
            Method::Original => {
                config.alpha = AlphaSchedule { start: 0.0, end: 0.0 };
                config.beta = BetaSchedule { start: 0.0, ..config.beta };
            }
            Method::Hinton => {
                config.beta = BetaSchedule { start: 0.0, ..config.beta };
            }
            Method::Bss => {}
            Method::AllSampleSelection => options.selection = SelectionStrategy::AllSamples,
            Method::RandomSelection => options.selection = SelectionStrategy::RandomSubset,
            Method::RandomTargetClass => options.targeting = TargetStrategy::UniformRandom,
            Method::RandomNoise => {
                options.generator =
                    GeneratorChoice::Alternative(AltGenConfig::of_kind(AltKind::RandomNoise));
            }
            Method::Fgsm => {
                options.generator =
                    GeneratorChoice::Alternative(AltGenConfig::of_kind(AltKind::Fgsm));
            }
            Method::DeepFool => {
                options.generator =
                    GeneratorChoice::Alternative(AltGenConfig::of_kind(AltKind::DeepFool));
            }
            Method::L2Minimize => {
                options.generator =
                    GeneratorChoice::Alternative(AltGenConfig::of_kind(AltKind::L2Minimize));
            }
        }
        (config, options)
    }
}

/// The column set of the selection/targeting ablation.
pub const ABLATION_METHODS: [Method; 5] = [
    Method::Bss,
    Method::AllSampleSelection,
    Method::RandomSelection,
    Method::RandomTargetClass,
    Method::Original,
];

/// The column set of the adversarial-sample comparison.
pub const ATTACK_COMPARISON_METHODS: [Method; 6] = [
    Method::Hinton,
    Method::RandomNoise,
    Method::L2Minimize,
    Method::Fgsm,
    Method::DeepFool,
    Method::Bss,
];

/// The fractions of the reduced-data sweep.
pub const SWEEP_FRACTIONS: [f64; 5] = [1.0, 0.8, 0.6, 0.4, 0.2];

// ── runs and snapshots ───────────────────────────────────────────────

/// Complete description of one run; replaying a snapshot reproduces the
/// result bitwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub data: DataPipeline,
    /// Teacher training data when it differs from the student's (the
    /// reduced-data sweep trains the teacher on the full set).
    pub teacher_data: Option<DataPipeline>,
    pub teacher: TeacherRecipe,
    pub student_spec: ClassifierSpec,
    /// Base config; its `seed` doubles as student init seed.
    pub student_config: DistillConfig,
    pub method: Method,
    pub measure_similarity: bool,
    /// Evaluation-set size for the similarity metrics.
    pub similarity_samples: usize,
}

/// Outcome of one (method, seed) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: String,
    pub seed: u64,
    pub final_test_accuracy: f64,
    pub magsim: Option<f64>,
    pub angsim: Option<f64>,
    pub attack_success_rate: Option<f64>,
    pub runtime_seconds: f64,
    pub snapshot: RunSnapshot,
}

/// Runs one snapshot end to end. Pass a cached teacher to skip teacher
/// training; the outcome is identical either way because teacher training
/// is deterministic.
pub fn execute(snapshot: &RunSnapshot, cached_teacher: Option<&ClassifierModel>) -> Result<ExperimentResult> {
    let started = Instant::now();
    let dataset = snapshot.data.build()?;
    let teacher = match cached_teacher {
        Some(t) => t.clone(),
        None => match &snapshot.teacher_data {
            Some(pipeline) => snapshot.teacher.train(&pipeline.build()?)?.0,
            None => snapshot.teacher.train(&dataset)?.0,
        },
    };
    let mut student = ClassifierModel::init(snapshot.student_spec.clone(), snapshot.student_config.seed)?;
    let (config, options) = snapshot.method.apply(&snapshot.student_config);
    let log = train(Some(&teacher), &mut student, &dataset, &config, &options)?;
    student.set_run_id(format!("{}-seed{}", snapshot.method.name(), config.seed));

    let (magsim, angsim) = if snapshot.measure_similarity {
        let report = similarity_to_teacher(&teacher, &student, &dataset, snapshot)?;
        (Some(report.magsim), Some(report.angsim))
    } else {
        (None, None)
    };

    Ok(ExperimentResult {
        method: snapshot.method.name().to_string(),
        seed: config.seed,
        final_test_accuracy: log
            .final_test_accuracy()
            .ok_or_else(|| Error::InvalidArgument("empty training log".into()))?,
        magsim,
        angsim,
        attack_success_rate: log.overall_attack_success_rate(),
        runtime_seconds: started.elapsed().as_secs_f64(),
        snapshot: snapshot.clone(),
    })
}

/// Boundary similarity of a student against its teacher on a fixed
/// prefix of the test split.
pub fn similarity_to_teacher(
    teacher: &ClassifierModel,
    student: &ClassifierModel,
    dataset: &Dataset,
    snapshot: &RunSnapshot,
) -> Result<SimilarityReport> {
    let n = snapshot.similarity_samples.min(dataset.test.len());
    let idx: Vec<usize> = (0..n).collect();
    let subset = dataset.test.select(&idx)?;
    let (report, _) = compare_classifiers(
        teacher,
        student,
        subset.inputs(),
        subset.labels(),
        &snapshot.student_config.attack,
        TargetPolicy::AllClasses,
    )?;
    Ok(report)
}

// ── grids ────────────────────────────────────────────────────────────

/// A (method × seed) grid sharing one dataset and teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub data: DataPipeline,
    /// Teacher training data when it differs from the student's.
    pub teacher_data: Option<DataPipeline>,
    pub teacher: TeacherRecipe,
    pub student_spec: ClassifierSpec,
    pub base_config: DistillConfig,
    pub seeds: Vec<u64>,
    pub measure_similarity: bool,
    pub similarity_samples: usize,
}

impl ExperimentGrid {
    fn snapshot(&self, method: Method, seed: u64) -> RunSnapshot {
        let mut config = self.base_config.clone();
        config.seed = seed;
        RunSnapshot {
            data: self.data.clone(),
            teacher_data: self.teacher_data.clone(),
            teacher: self.teacher.clone(),
            student_spec: self.student_spec.clone(),
            student_config: config,
            method,
            measure_similarity: self.measure_similarity,
            similarity_samples: self.similarity_samples,
        }
    }

    /// Trains the shared teacher once, then runs every (method, seed)
    /// cell, in parallel, collecting results in grid order.
    pub fn run(&self, methods: &[Method]) -> Result<Vec<ExperimentResult>> {
        let teacher_set = match &self.teacher_data {
            Some(pipeline) => pipeline.build()?,
            None => self.data.build()?,
        };
        let (teacher, _) = self.teacher.train(&teacher_set)?;
        let cells: Vec<RunSnapshot> = methods
            .iter()
            .flat_map(|&m| self.seeds.iter().map(move |&s| (m, s)))
            .map(|(m, s)| self.snapshot(m, s))
            .collect();
        cells
            .par_iter()
            .map(|snap| execute(snap, Some(&teacher)))
            .collect()
    }
}

/// Mean/std accuracy per method over however many seeds were run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_magsim: Option<f64>,
    pub mean_angsim: Option<f64>,
}

/// Aggregates results per method, preserving first-appearance order.
pub fn summarize(results: &[ExperimentResult]) -> Vec<MethodSummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.method.as_str()) {
            order.push(&r.method);
        }
    }
    order
        .into_iter()
        .map(|name| {
            let acc: Vec<f64> = results
                .iter()
                .filter(|r| r.method == name)
                .map(|r| r.final_test_accuracy)
                .collect();
            let mags: Vec<f64> =
                results.iter().filter(|r| r.method == name).filter_map(|r| r.magsim).collect();
            let angs: Vec<f64> =
                results.iter().filter(|r| r.method == name).filter_map(|r| r.angsim).collect();
            MethodSummary {
                method: name.to_string(),
                seeds: acc.len(),
                mean_accuracy: mean(&acc),
                std_accuracy: std_dev(&acc),
                mean_magsim: (!mags.is_empty()).then(|| mean(&mags)),
                mean_angsim: (!angs.is_empty()).then(|| mean(&angs)),
            }
        })
        .collect()
}

/// Reduced-data generalization sweep: reruns the grid with the student's
/// training split subsampled to each fraction. The teacher always trains
/// on the full data. Returns `(fraction, results)` pairs.
pub fn run_sweep(
    grid: &ExperimentGrid,
    fractions: &[f64],
    methods: &[Method],
) -> Result<Vec<(f64, Vec<ExperimentResult>)>> {
    let mut out = Vec::new();
    for &fraction in fractions {
        let mut g = grid.clone();
        g.teacher_data = Some(grid.data.clone());
        g.data.subsample = Some(SubsampleSpec { fraction, seed: grid.base_config.seed });
        out.push((fraction, g.run(methods)?));
    }
    Ok(out)
}

// ── grid dump ────────────────────────────────────────────────────────

/// Writes per-model logits and predictions over a square probe grid of
/// 2-D inputs, for external plotting.
pub fn grid_dump<W: Write>(
    models: &[(&str, &ClassifierModel)],
    min: f64,
    max: f64,
    steps: usize,
    mut w: W,
) -> Result<()> {
    if steps < 2 || !(max > min) {
        return Err(Error::InvalidArgument("grid needs at least 2 steps and max > min".into()));
    }
    for (name, model) in models {
        if model.spec().input_shape != [2] {
            return Err(Error::InvalidArgument(format!(
                "grid dump requires 2-D inputs; model `{name}` takes {:?}",
                model.spec().input_shape
            )));
        }
    }
    write!(w, "x0,x1")?;
    for (name, model) in models {
        for c in 0..model.class_count() {
            write!(w, ",{name}_logit{c}")?;
        }
        write!(w, ",{name}_prediction")?;
    }
    writeln!(w)?;
    let step = (max - min) / (steps - 1) as f64;
    for i in 0..steps {
        for j in 0..steps {
            let x0 = min + step * i as f64;
            let x1 = min + step * j as f64;
            let x = crate::Tensor::from_vec(vec![x0, x1])?;
            write!(w, "{x0},{x1}")?;
            for (_, model) in models {
                let logits = model.logits(&x)?;
                for &v in logits.values() {
                    write!(w, ",{v}")?;
                }
                write!(w, ",{}", model.predict(&x)?)?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

// ── desk-scale presets ───────────────────────────────────────────────

/// The spiral benchmark: a noisy two-arm spiral with a capacity-gapped
/// teacher/student pair. Used by the main comparison, the similarity
/// analysis, and the ablations.
pub fn spiral_grid(seeds: Vec<u64>) -> ExperimentGrid {
    ExperimentGrid {
        data: DataPipeline {
            spec: DatasetSpec::Spirals(SpiralParams {
                class_count: 2,
                train_total: 500,
                test_total: 1500,
                noise: 0.15,
                turns: 1.75,
                seed: 42,
            }),
            normalize: true,
            subsample: None,
        },
        teacher_data: None,
        teacher: TeacherRecipe::plain(
            ClassifierSpec::mlp(2, &[64, 64], 2, Activation::Relu),
            1234,
            400,
            32,
        ),
        student_spec: ClassifierSpec::mlp(2, &[12, 12], 2, Activation::Relu),
        base_config: DistillConfig {
            epochs: 400,
            batch_size: 64,
            base_sample_budget: 16,
            lr: LrSchedule { initial: 0.05, drops: vec![(0.5, 0.1), (0.75, 0.1)] },
            // the boundary term here averages over the selected samples
            // rather than the whole batch, so beta is scaled down by the
            // selection ratio (16/64) to keep its effective weight
            beta: BetaSchedule { start: 0.35, zero_at: 0.75 },
            // desk-scale logit gradients are steep; a smaller eta keeps
            // eta*|grad L| under 1 so boundary samples land near the
            // boundary instead of overshooting it
            attack: AttackConfig { learning_rate: 0.05, ..Default::default() },
            ..Default::default()
        },
        seeds,
        measure_similarity: false,
        similarity_samples: 40,
    }
}

/// Two well-separated Gaussian blobs with a known Bayes boundary; the
/// attack-contract benchmark.
pub fn gaussian_grid(seeds: Vec<u64>) -> ExperimentGrid {
    ExperimentGrid {
        data: DataPipeline {
            spec: DatasetSpec::Gaussians(GaussianParams::two_blobs(2.0, 200, 500, 7)),
            normalize: true,
            subsample: None,
        },
        teacher_data: None,
        teacher: TeacherRecipe::plain(
            ClassifierSpec::mlp(2, &[32, 32], 2, Activation::Relu),
            77,
            120,
            64,
        ),
        student_spec: ClassifierSpec::mlp(2, &[4], 2, Activation::Relu),
        base_config: DistillConfig {
            epochs: 60,
            batch_size: 256,
            base_sample_budget: 64,
            ..Default::default()
        },
        seeds,
        measure_similarity: false,
        similarity_samples: 40,
    }
}
