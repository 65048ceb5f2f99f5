//! Small classifier family: MLPs and tiny CNNs.
//!
//! A [`ClassifierModel`] exposes the raw score function `f` (logits),
//! temperature-scaled class probabilities, argmax prediction, and a
//! versioned file format with bit-exact round-trips. Forward passes always
//! run through the autodiff [`Tape`], so inference and gradient paths
//! cannot drift apart.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax_rows, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Model file format version understood by this build.
pub const MODEL_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
}

/// One layer of a [`ClassifierSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { width: usize, activation: Activation },
    Conv2d { filters: usize, kernel: (usize, usize), activation: Activation },
    MaxPool { window: (usize, usize) },
    MeanPool { window: (usize, usize) },
    Flatten,
}

/// Architecture description: input shape, layer list, class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

impl ClassifierSpec {
    /// Fully-connected classifier on flat inputs.
    pub fn mlp(input_dim: usize, hidden: &[usize], class_count: usize, activation: Activation) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&width| LayerSpec::Dense { width, activation })
            .collect();
        layers.push(LayerSpec::Dense { width: class_count, activation: Activation::Linear });
        Self { input_shape: vec![input_dim], layers, class_count }
    }

    /// Two conv blocks with pooling, then a dense readout.
    pub fn tiny_cnn(
        input_shape: [usize; 3],
        filters: [usize; 2],
        kernel: (usize, usize),
        class_count: usize,
    ) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            layers: vec![
                LayerSpec::Conv2d { filters: filters[0], kernel, activation: Activation::Relu },
                LayerSpec::MaxPool { window: (2, 2) },
                LayerSpec::Conv2d { filters: filters[1], kernel, activation: Activation::Relu },
                LayerSpec::MaxPool { window: (2, 2) },
                LayerSpec::Flatten,
                LayerSpec::Dense { width: class_count, activation: Activation::Linear },
            ],
            class_count,
        }
    }

    /// Shape after each layer, starting from the input shape. Fails on any
    /// non-conforming transition.
    fn shape_walk(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                LayerSpec::Dense { width, .. } => {
                    if cur.len() != 1 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: dense requires flat input, got {cur:?} (insert Flatten)"
                        )));
                    }
                    vec![*width]
                }
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    if cur.len() != 3 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: conv2d requires [C,H,W] input, got {cur:?}"
                        )));
                    }
                    let (kh, kw) = *kernel;
                    if kh == 0 || kw == 0 || kh > cur[1] || kw > cur[2] {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: kernel {kernel:?} exceeds spatial extents of {cur:?}"
                        )));
                    }
                    vec![*filters, cur[1] - kh + 1, cur[2] - kw + 1]
                }
                LayerSpec::MaxPool { window } | LayerSpec::MeanPool { window } => {
                    if cur.len() != 3 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: pooling requires [C,H,W] input, got {cur:?}"
                        )));
                    }
                    let (ph, pw) = *window;
                    if ph == 0 || pw == 0 || cur[1] % ph != 0 || cur[2] % pw != 0 {
                        return Err(Error::InvalidArgument(format!(
                            "layer {i}: window {window:?} does not tile {cur:?}"
                        )));
                    }
                    vec![cur[0], cur[1] / ph, cur[2] / pw]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::InvalidArgument(format!(
                "class count must be at least 2, got {}",
                self.class_count
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("spec has no layers".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "bad input shape {:?}",
                self.input_shape
            )));
        }
        let shapes = self.shape_walk()?;
        let out = shapes.last().unwrap();
        match self.layers.last() {
            Some(LayerSpec::Dense { width, .. }) if *width == self.class_count && out == &vec![self.class_count] => Ok(()),
            _ => Err(Error::InvalidArgument(format!(
                "final layer must be dense with width equal to class count {}, output shape is {out:?}",
                self.class_count
            ))),
        }
    }

    /// Parameter shapes in layer order; dense and conv layers contribute a
    /// weight tensor followed by a bias tensor.
    fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let shapes = self.shape_walk()?;
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { width, .. } => {
                    out.push(vec![shapes[i][0], *width]);
                    out.push(vec![*width]);
                }
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    out.push(vec![*filters, shapes[i][0], kernel.0, kernel.1]);
                    out.push(vec![*filters]);
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

/// Where a parameter set came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub run_id: String,
}

/// A parameterized differentiable score function over `class_count` classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierModel {
    spec: ClassifierSpec,
    params: Vec<Tensor>,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u64,
    spec: ClassifierSpec,
    provenance: Provenance,
    params: Vec<Tensor>,
}

impl ClassifierModel {
    /// Deterministic initialization: fan-in-scaled uniform weights, zero
    /// biases.
    pub fn init(spec: ClassifierSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for shape in spec.param_shapes()? {
            let is_bias = shape.len() == 1;
            let n: usize = shape.iter().product();
            let values = if is_bias {
                vec![0.0; n]
            } else {
                let fan_in: usize = match shape.len() {
                    2 => shape[0],
                    4 => shape[1] * shape[2] * shape[3],
                    _ => unreachable!("weight tensors are rank 2 or 4"),
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.push(Tensor::new(shape, values)?);
        }
        Ok(Self {
            spec,
            params,
            provenance: Provenance { seed, run_id: format!("init-{seed}") },
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn set_run_id(&mut self, run_id: impl Into<String>) {
        self.provenance.run_id = run_id.into();
    }

    pub fn class_count(&self) -> usize {
        self.spec.class_count
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces all parameters; shapes must match the spec.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let expected = self.spec.param_shapes()?;
        if params.len() != expected.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (p, shape) in params.iter().zip(&expected) {
            if p.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "set_params",
                    detail: format!("{:?} vs expected {:?}", p.shape(), shape),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Registers all parameters on a tape, as differentiable leaves when
    /// `differentiable`, otherwise as constants.
    pub fn insert_params(&self, tape: &mut Tape, differentiable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if differentiable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Runs the network on a batched input node `[B, ..input_shape]` using
    /// the given parameter nodes, returning the logit node `[B, K]`.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId> {
        let expected: usize = self.params.len();
        if params.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "expected {expected} parameter nodes, got {}",
                params.len()
            )));
        }
        let in_shape = tape.value(x).shape().to_vec();
        if in_shape.len() != self.spec.input_shape.len() + 1
            || in_shape[1..] != self.spec.input_shape[..]
        {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "input {:?} does not match batched model input [B, {:?}]",
                    in_shape, self.spec.input_shape
                ),
            });
        }
        let batch = in_shape[0];
        let mut cur = x;
        let mut pi = 0;
        for layer in &self.spec.layers {
            cur = match layer {
                LayerSpec::Dense { activation, .. } => {
                    let y = tape.affine(cur, params[pi], params[pi + 1])?;
                    pi += 2;
                    apply_activation(tape, y, *activation)?
                }
                LayerSpec::Conv2d { activation, .. } => {
                    let y = tape.conv2d(cur, params[pi], params[pi + 1])?;
                    pi += 2;
                    apply_activation(tape, y, *activation)?
                }
                LayerSpec::MaxPool { window } => tape.max_pool(cur, *window)?,
                LayerSpec::MeanPool { window } => tape.mean_pool(cur, *window)?,
                LayerSpec::Flatten => {
                    let n = tape.value(cur).len() / batch;
                    tape.reshape(cur, vec![batch, n])?
                }
            };
        }
        Ok(cur)
    }

    /// Adds `x` to the tape as a batch, unsqueezing single samples.
    /// Returns the batched node and whether the input was a single sample.
    fn batched_input(&self, tape: &mut Tape, x: &Tensor, differentiable: bool) -> Result<(NodeId, bool)> {
        let r = self.spec.input_shape.len();
        let (tensor, single) = if x.shape() == self.spec.input_shape.as_slice() {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            (x.reshape(shape)?, true)
        } else if x.rank() == r + 1 && x.shape()[1..] == self.spec.input_shape[..] {
            (x.clone(), false)
        } else {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "input {:?} matches neither {:?} nor [B, {:?}]",
                    x.shape(),
                    self.spec.input_shape,
                    self.spec.input_shape
                ),
            });
        };
        let id = if differentiable { tape.leaf(tensor) } else { tape.constant(tensor) };
        Ok((id, single))
    }

    /// Raw classification scores: `[K]` for a single sample, `[B, K]` for a
    /// batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (xid, single) = self.batched_input(&mut tape, x, false)?;
        let params = self.insert_params(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, &params, xid)?;
        let logits = tape.value(out);
        if single {
            logits.reshape(vec![self.spec.class_count])
        } else {
            Ok(logits.clone())
        }
    }

    /// Softmax of `logits / temperature`; rejects non-positive temperatures.
    pub fn class_probabilities(&self, x: &Tensor, temperature: f64) -> Result<Tensor> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let logits = self.logits(x)?;
        let k = self.spec.class_count;
        let scaled: Vec<f64> = logits.values().iter().map(|&v| v / temperature).collect();
        let mut out = vec![0.0; scaled.len()];
        softmax_rows(&scaled, k, &mut out);
        Tensor::new(logits.shape().to_vec(), out)
    }

    /// Argmax class of a single sample; ties break to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        let logits = self.logits(x)?;
        if logits.rank() != 1 {
            return Err(Error::InvalidArgument(
                "predict takes a single sample; use predict_batch".into(),
            ));
        }
        Ok(argmax(logits.values()))
    }

    /// Argmax class per row of a batch.
    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        let k = self.spec.class_count;
        Ok(logits.values().chunks_exact(k).map(argmax).collect())
    }

    /// Fraction of samples whose argmax matches the label.
    pub fn accuracy(&self, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
        let preds = self.predict_batch(inputs)?;
        if preds.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions vs {} labels",
                preds.len(),
                labels.len()
            )));
        }
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Writes the model as versioned JSON. Round-trips are bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            spec: self.spec.clone(),
            provenance: self.provenance.clone(),
            params: self.params.clone(),
        };
        let json = serde_json::to_string(&file)?;
        crate::write_atomic(path, json.as_bytes())
    }

    /// Reads a model file, rejecting unknown format versions and malformed
    /// or truncated payloads.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::ModelFile(format!("{}: {e}", path.display())))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::ModelFile("missing format_version field".into()))?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::FormatVersion { found: version, expected: MODEL_FORMAT_VERSION });
        }
        let file: ModelFile = serde_json::from_value(value)
            .map_err(|e| Error::ModelFile(format!("{}: {e}", path.display())))?;
        file.spec.validate()?;
        let mut model = ClassifierModel {
            spec: file.spec,
            params: Vec::new(),
            provenance: file.provenance,
        };
        model.set_params(file.params)?;
        Ok(model)
    }
}

fn apply_activation(tape: &mut Tape, x: NodeId, activation: Activation) -> Result<NodeId> {
    match activation {
        Activation::Linear => Ok(x),
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// A linear two-feature binary classifier with rows of `w` as per-class
/// weights; used throughout tests where every quantity is closed-form.
pub fn linear_model(w: [[f64; 2]; 2], b: [f64; 2]) -> ClassifierModel {
    let spec = ClassifierSpec::mlp(2, &[], 2, Activation::Linear);
    let mut model = ClassifierModel::init(spec, 0).unwrap();
    // Stored layout is [D, K]: column j holds class j's weights.
    let weight = Tensor::new(vec![2, 2], vec![w[0][0], w[1][0], w[0][1], w[1][1]]).unwrap();
    let bias = Tensor::from_vec(b.to_vec()).unwrap();
    model.set_params(vec![weight, bias]).unwrap();
    model
}
