//! Dataset generation and ingestion.
//!
//! Desk-scale substitutes for image benchmarks: Gaussian blob mixtures
//! with a known Bayes boundary, interleaved spirals as a nonlinear
//! stressor, and IDX-format grayscale images for the tiny-CNN path.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One split of samples: batched inputs, one-hot labels, and the label
/// indices they encode.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    inputs: Tensor,
    one_hot: Tensor,
    labels: Vec<usize>,
}

impl Split {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.rank() < 2 {
            return Err(Error::InvalidArgument(format!(
                "split inputs must be batched, got shape {:?}",
                inputs.shape()
            )));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} input rows vs {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        let mut one_hot = vec![0.0; labels.len() * class_count];
        for (i, &l) in labels.iter().enumerate() {
            one_hot[i * class_count + l] = 1.0;
        }
        let one_hot = Tensor::new(vec![labels.len(), class_count], one_hot)?;
        Ok(Self { inputs, one_hot, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn one_hot(&self) -> &Tensor {
        &self.one_hot
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Input row `i` as a single sample.
    pub fn sample(&self, i: usize) -> Result<Tensor> {
        self.inputs.row(i)
    }

    /// New split containing the given rows, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Split> {
        let class_count = self.one_hot.shape()[1];
        let rows: Vec<Tensor> = indices.iter().map(|&i| self.inputs.row(i)).collect::<Result<_>>()?;
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Split::new(Tensor::stack(&rows)?, labels, class_count)
    }
}

/// Per-feature statistics captured on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features whose variance was floored at 1e-8.
    pub floored_features: Vec<usize>,
}

/// Train/test splits plus class count and normalization state.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_count: usize,
    pub train: Split,
    pub test: Split,
    /// Present once [`normalize`] has been applied; guards idempotence.
    pub normalization: Option<NormStats>,
}

impl Dataset {
    pub fn new(class_count: usize, train: Split, test: Split) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {class_count}")));
        }
        Ok(Self { class_count, train, test, normalization: None })
    }
}

/// Parameters for a Gaussian mixture with one blob per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub centers: Vec<Vec<f64>>,
    /// Shared covariance matrix, row-major `d x d`; must be positive
    /// definite.
    pub covariance: Vec<Vec<f64>>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl GaussianParams {
    /// Two unit-variance classes centered at `(-sep, 0)` and `(+sep, 0)`;
    /// the Bayes boundary is the vertical axis.
    pub fn two_blobs(sep: f64, train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        Self {
            centers: vec![vec![-sep, 0.0], vec![sep, 0.0]],
            covariance: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            train_per_class,
            test_per_class,
            seed,
        }
    }

    /// Three unit-variance classes collinear on the first axis.
    pub fn three_collinear(sep: f64, train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        Self {
            centers: vec![vec![-sep, 0.0], vec![0.0, 0.0], vec![sep, 0.0]],
            covariance: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            train_per_class,
            test_per_class,
            seed,
        }
    }
}

/// Lower-triangular Cholesky factor; fails on non-positive-definite input.
fn cholesky(cov: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = cov.len();
    if cov.iter().any(|row| row.len() != d) {
        return Err(Error::InvalidArgument("covariance matrix must be square".into()));
    }
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = cov[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::InvalidArgument(
                        "covariance matrix is not positive definite".into(),
                    ));
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Deterministic Gaussian-mixture classification set with a known Bayes
/// boundary.
pub fn generate_gaussians(params: &GaussianParams) -> Result<Dataset> {
    let k = params.centers.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {k}")));
    }
    let d = params.centers[0].len();
    if params.centers.iter().any(|c| c.len() != d) {
        return Err(Error::InvalidArgument("class centers must share a dimension".into()));
    }
    if params.train_per_class == 0 {
        return Err(Error::InvalidArgument("train_per_class must be positive".into()));
    }
    let chol = cholesky(&params.covariance)?;
    if chol.len() != d {
        return Err(Error::InvalidArgument(format!(
            "covariance is {}x{} but centers have dimension {d}",
            chol.len(),
            chol.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    let mut draw_split = |per_class: usize| -> Result<Split> {
        let mut rows = Vec::with_capacity(k * per_class);
        let mut labels = Vec::with_capacity(k * per_class);
        for (class, center) in params.centers.iter().enumerate() {
            for _ in 0..per_class {
                let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let mut point = center.clone();
                for i in 0..d {
                    for j in 0..=i {
                        point[i] += chol[i][j] * z[j];
                    }
                }
                rows.push(Tensor::from_vec(point)?);
                labels.push(class);
            }
        }
        Split::new(Tensor::stack(&rows)?, labels, k)
    };
    let train = draw_split(params.train_per_class)?;
    let test = draw_split(params.test_per_class.max(1))?;
    Dataset::new(k, train, test)
}

/// Parameters for interleaved spiral arms, one class per arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiralParams {
    pub class_count: usize,
    pub train_total: usize,
    pub test_total: usize,
    /// Standard deviation of isotropic Gaussian jitter.
    pub noise: f64,
    /// Revolutions each arm makes.
    pub turns: f64,
    pub seed: u64,
}

impl SpiralParams {
    pub fn two_arm(train_total: usize, test_total: usize, noise: f64, seed: u64) -> Self {
        Self { class_count: 2, train_total, test_total, noise, turns: 1.75, seed }
    }
}

/// Point `i` of `n` on arm `class` (before jitter).
pub fn spiral_point(class: usize, class_count: usize, i: usize, n: usize, turns: f64) -> [f64; 2] {
    let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let radius = 0.2 + 2.3 * t;
    let angle = turns * std::f64::consts::TAU * t
        + std::f64::consts::TAU * class as f64 / class_count as f64;
    [radius * angle.cos(), radius * angle.sin()]
}

/// Interleaved spiral arms; class counts balanced within one sample.
pub fn generate_spirals(params: &SpiralParams) -> Result<Dataset> {
    let k = params.class_count;
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {k}")));
    }
    if params.train_total < k {
        return Err(Error::InvalidArgument("need at least one training sample per class".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
    let mut draw_split = |total: usize| -> Result<Split> {
        let mut rows = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(total);
        for class in 0..k {
            let n = total / k + usize::from(class < total % k);
            for i in 0..n {
                let [mut x, mut y] = spiral_point(class, k, i, n, params.turns);
                x += params.noise * rng.sample::<f64, _>(StandardNormal);
                y += params.noise * rng.sample::<f64, _>(StandardNormal);
                rows.push(Tensor::from_vec(vec![x, y])?);
                labels.push(class);
            }
        }
        Split::new(Tensor::stack(&rows)?, labels, k)
    };
    let train = draw_split(params.train_total)?;
    let test = draw_split(params.test_total.max(k))?;
    Dataset::new(k, train, test)
}

// ── IDX format ───────────────────────────────────────────────────────

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Raw decoded IDX payload: unsigned-byte data plus its dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn u32_be(&mut self, what: &str) -> Result<u32> {
        if self.offset + 4 > self.bytes.len() {
            return Err(Error::Idx {
                offset: self.offset,
                detail: format!("truncated while reading {what}"),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.offset..self.offset + 4].try_into().unwrap());
        self.offset += 4;
        Ok(v)
    }
}

/// Parses an IDX payload (big-endian magic, dimension header, u8 data).
pub fn read_idx(path: &Path) -> Result<IdxFile> {
    let bytes = std::fs::read(path)?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let mut r = ByteReader { bytes, offset: 0 };
    let magic = r.u32_be("magic number")?;
    let ndims = match magic {
        IDX_MAGIC_IMAGES => 3,
        IDX_MAGIC_LABELS => 1,
        other => {
            return Err(Error::Idx {
                offset: 0,
                detail: format!("bad magic number {other:#010x}"),
            })
        }
    };
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        dims.push(r.u32_be(&format!("dimension {i}"))? as usize);
    }
    let expected: usize = dims.iter().product();
    let payload = &bytes[r.offset..];
    if payload.len() != expected {
        return Err(Error::Idx {
            offset: r.offset,
            detail: format!("payload has {} bytes, header promises {expected}", payload.len()),
        });
    }
    Ok(IdxFile { magic, dims, data: payload.to_vec() })
}

/// Serializes an [`IdxFile`]; `read_idx(write_idx(f)) == f` byte for byte.
pub fn write_idx(path: &Path, file: &IdxFile) -> Result<()> {
    let mut out = Vec::with_capacity(4 + 4 * file.dims.len() + file.data.len());
    out.write_all(&file.magic.to_be_bytes())?;
    for &d in &file.dims {
        out.write_all(&(d as u32).to_be_bytes())?;
    }
    out.write_all(&file.data)?;
    crate::write_atomic(path, &out)
}

/// Loads an IDX image/label pair into a split of `[N,1,H,W]` tensors
/// scaled to `[0,1]`, with labels one-hot over `class_count` (inferred
/// from the labels when `None`).
pub fn load_idx(images_path: &Path, labels_path: &Path, class_count: Option<usize>) -> Result<Split> {
    let images = read_idx(images_path)?;
    if images.magic != IDX_MAGIC_IMAGES {
        return Err(Error::Idx {
            offset: 0,
            detail: format!("{} is not an image file", images_path.display()),
        });
    }
    let labels = read_idx(labels_path)?;
    if labels.magic != IDX_MAGIC_LABELS {
        return Err(Error::Idx {
            offset: 0,
            detail: format!("{} is not a label file", labels_path.display()),
        });
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    if labels.dims[0] != n {
        return Err(Error::Idx {
            offset: 4,
            detail: format!("{} images but {} labels", n, labels.dims[0]),
        });
    }
    let inputs = Tensor::new(
        vec![n, 1, h, w],
        images.data.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let label_indices: Vec<usize> = labels.data.iter().map(|&b| b as usize).collect();
    let k = match class_count {
        Some(k) => k,
        None => label_indices.iter().copied().max().unwrap_or(0) + 1,
    };
    Split::new(inputs, label_indices, k.max(2))
}

// ── normalization and subsampling ────────────────────────────────────

fn transform_split(split: &Split, stats: &NormStats, class_count: usize) -> Result<Split> {
    let shape = split.inputs().shape().to_vec();
    let features = stats.mean.len();
    let values = split
        .inputs()
        .values()
        .chunks_exact(features)
        .flat_map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, &v)| (v - stats.mean[j]) / stats.std[j])
                .collect::<Vec<_>>()
        })
        .collect();
    Split::new(Tensor::new(shape, values)?, split.labels().to_vec(), class_count)
}

/// Zero-mean unit-variance features, with statistics taken on the training
/// split and reused on the test split. Zero-variance features are floored
/// at variance 1e-8 and flagged. Rejects already-normalized datasets.
pub fn normalize(dataset: Dataset) -> Result<Dataset> {
    if dataset.normalization.is_some() {
        return Err(Error::InvalidArgument("dataset is already normalized".into()));
    }
    let n = dataset.train.len();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot normalize an empty training split".into()));
    }
    let features: usize = dataset.train.inputs().shape()[1..].iter().product();
    let values = dataset.train.inputs().values();
    let mut mean = vec![0.0; features];
    for row in values.chunks_exact(features) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; features];
    for row in values.chunks_exact(features) {
        for (j, &v) in row.iter().enumerate() {
            var[j] += (v - mean[j]) * (v - mean[j]);
        }
    }
    let mut floored = Vec::new();
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let v = s / n as f64;
            if v < 1e-8 {
                floored.push(j);
                (1e-8f64).sqrt()
            } else {
                v.sqrt()
            }
        })
        .collect();
    if !floored.is_empty() {
        log::warn!("normalize: {} zero-variance feature(s) floored", floored.len());
    }
    let stats = NormStats { mean, std, floored_features: floored };
    let train = transform_split(&dataset.train, &stats, dataset.class_count)?;
    let test = if dataset.test.is_empty() {
        dataset.test.clone()
    } else {
        transform_split(&dataset.test, &stats, dataset.class_count)?
    };
    Ok(Dataset {
        class_count: dataset.class_count,
        train,
        test,
        normalization: Some(stats),
    })
}

/// Class-stratified subsample of the training split; the test split is
/// untouched. Nested under a fixed seed: the rows kept at a smaller
/// fraction are a subset of those kept at a larger one.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, &l) in dataset.train.labels().iter().enumerate() {
        per_class[l].push(i);
    }
    // The per-class permutation depends only on the seed, so smaller
    // fractions take prefixes of the same ordering.
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for (class, indices) in per_class.iter_mut().enumerate() {
        indices.shuffle(&mut rng);
        if indices.is_empty() {
            continue;
        }
        let keep = (fraction * indices.len() as f64).round() as usize;
        if keep == 0 {
            return Err(Error::InvalidArgument(format!(
                "fraction {fraction} empties class {class}"
            )));
        }
        chosen.extend_from_slice(&indices[..keep]);
    }
    chosen.sort_unstable();
    Ok(Dataset {
        class_count: dataset.class_count,
        train: dataset.train.select(&chosen)?,
        test: dataset.test.clone(),
        normalization: dataset.normalization.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blob_set() -> Dataset {
        generate_gaussians(&GaussianParams::two_blobs(2.0, 50, 50, 9)).unwrap()
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = two_blob_set();
        let b = two_blob_set();
        assert_eq!(a.train.inputs(), b.train.inputs());
        assert_eq!(a.test.inputs(), b.test.inputs());
    }

    #[test]
    fn one_sample_per_class_gives_size_two() {
        let d = generate_gaussians(&GaussianParams::two_blobs(2.0, 1, 1, 0)).unwrap();
        assert_eq!(d.train.len(), 2);
        assert_eq!(d.train.labels(), &[0, 1]);
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let mut params = GaussianParams::two_blobs(2.0, 5, 5, 0);
        params.covariance = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!(generate_gaussians(&params).is_err());
    }

    #[test]
    fn noiseless_spirals_lie_on_the_arms() {
        let params = SpiralParams { noise: 0.0, ..SpiralParams::two_arm(40, 10, 0.0, 3) };
        let d = generate_spirals(&params).unwrap();
        let mut counts = vec![0usize; 2];
        let mut seen = vec![0usize; 2];
        for (i, &label) in d.train.labels().iter().enumerate() {
            counts[label] += 1;
            let n = 20;
            let expected = spiral_point(label, 2, seen[label], n, params.turns);
            seen[label] += 1;
            let row = d.train.sample(i).unwrap();
            assert!((row.values()[0] - expected[0]).abs() < 1e-12);
            assert!((row.values()[1] - expected[1]).abs() < 1e-12);
        }
        assert_eq!(counts, vec![20, 20]);
    }

    #[test]
    fn odd_spiral_total_balances_within_one() {
        let d = generate_spirals(&SpiralParams::two_arm(41, 10, 0.1, 3)).unwrap();
        let c0 = d.train.labels().iter().filter(|&&l| l == 0).count();
        let c1 = d.train.labels().iter().filter(|&&l| l == 1).count();
        assert!((c0 as i64 - c1 as i64).abs() <= 1);
    }

    #[test]
    fn spirals_deterministic_under_seed() {
        let a = generate_spirals(&SpiralParams::two_arm(30, 10, 0.2, 5)).unwrap();
        let b = generate_spirals(&SpiralParams::two_arm(30, 10, 0.2, 5)).unwrap();
        assert_eq!(a.train.inputs(), b.train.inputs());
    }

    fn synthetic_idx_pair() -> (IdxFile, IdxFile) {
        // two 3x3 images, byte values chosen by hand
        let images = IdxFile {
            magic: IDX_MAGIC_IMAGES,
            dims: vec![2, 3, 3],
            data: (0u8..18).map(|b| b * 10).collect(),
        };
        let labels = IdxFile { magic: IDX_MAGIC_LABELS, dims: vec![2], data: vec![1, 0] };
        (images, labels)
    }

    #[test]
    fn idx_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = synthetic_idx_pair();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        write_idx(&ip, &images).unwrap();
        write_idx(&lp, &labels).unwrap();
        assert_eq!(read_idx(&ip).unwrap(), images);
        assert_eq!(read_idx(&lp).unwrap(), labels);

        let split = load_idx(&ip, &lp, Some(2)).unwrap();
        assert_eq!(split.inputs().shape(), &[2, 1, 3, 3]);
        assert_eq!(split.labels(), &[1, 0]);
        assert_eq!(split.inputs().values()[1], 10.0 / 255.0);
    }

    #[test]
    fn idx_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (images, mut labels) = synthetic_idx_pair();
        labels.dims = vec![3];
        labels.data = vec![1, 0, 1];
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        write_idx(&ip, &images).unwrap();
        write_idx(&lp, &labels).unwrap();
        match load_idx(&ip, &lp, Some(2)) {
            Err(Error::Idx { detail, .. }) => assert!(detail.contains("2 images but 3 labels")),
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn empty_and_truncated_idx_rejected() {
        assert!(matches!(parse_idx(&[]), Err(Error::Idx { offset: 0, .. })));
        let (images, _) = synthetic_idx_pair();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&images.magic.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        // header promises more dimensions than present
        assert!(matches!(parse_idx(&bytes), Err(Error::Idx { .. })));
    }

    #[test]
    fn bad_magic_rejected_at_offset_zero() {
        let bytes = 0xdeadbeefu32.to_be_bytes();
        match parse_idx(&bytes) {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected Idx error, got {other:?}"),
        }
    }

    #[test]
    fn normalization_zeroes_train_means() {
        let d = normalize(two_blob_set()).unwrap();
        let features = 2;
        let n = d.train.len() as f64;
        for j in 0..features {
            let mean: f64 = d
                .train
                .inputs()
                .values()
                .chunks_exact(features)
                .map(|r| r[j])
                .sum::<f64>()
                / n;
            assert!(mean.abs() <= 1e-10, "feature {j} mean {mean}");
        }
        // test-split means are generally nonzero under train statistics
        let test_mean: f64 = d.test.inputs().values().chunks_exact(2).map(|r| r[0]).sum::<f64>()
            / d.test.len() as f64;
        assert!(test_mean.abs() > 0.0);
    }

    #[test]
    fn constant_feature_flagged_not_nan() {
        let inputs = Tensor::new(vec![4, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]).unwrap();
        let split = Split::new(inputs, vec![0, 0, 1, 1], 2).unwrap();
        let d = Dataset::new(2, split.clone(), split).unwrap();
        let normalized = normalize(d).unwrap();
        let stats = normalized.normalization.as_ref().unwrap();
        assert_eq!(stats.floored_features, vec![1]);
        assert!(normalized.train.inputs().values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn double_normalization_rejected() {
        let d = normalize(two_blob_set()).unwrap();
        assert!(normalize(d).is_err());
    }

    #[test]
    fn stratified_subsample_counts() {
        let d = generate_gaussians(&GaussianParams::two_blobs(2.0, 500, 10, 1)).unwrap();
        let s = subsample(&d, 0.2, 7).unwrap();
        for class in 0..2 {
            let count = s.train.labels().iter().filter(|&&l| l == class).count();
            assert_eq!(count, 100);
        }
        assert_eq!(s.test.len(), d.test.len());
    }

    #[test]
    fn full_fraction_is_identity() {
        let d = two_blob_set();
        let s = subsample(&d, 1.0, 7).unwrap();
        assert_eq!(s.train.inputs(), d.train.inputs());
        assert_eq!(s.train.labels(), d.train.labels());
    }

    #[test]
    fn subsamples_nest_under_one_seed() {
        let d = generate_gaussians(&GaussianParams::two_blobs(2.0, 200, 10, 2)).unwrap();
        let small = subsample(&d, 0.2, 11).unwrap();
        let large = subsample(&d, 0.4, 11).unwrap();
        let large_rows: std::collections::HashSet<Vec<u64>> = (0..large.train.len())
            .map(|i| large.train.sample(i).unwrap().values().iter().map(|v| v.to_bits()).collect())
            .collect();
        for i in 0..small.train.len() {
            let row: Vec<u64> =
                small.train.sample(i).unwrap().values().iter().map(|v| v.to_bits()).collect();
            assert!(large_rows.contains(&row), "row {i} of the 20% sample missing from the 40% sample");
        }
    }

    #[test]
    fn empty_class_fraction_rejected() {
        let d = generate_gaussians(&GaussianParams::two_blobs(2.0, 3, 3, 1)).unwrap();
        assert!(subsample(&d, 0.1, 0).is_err());
    }
}
