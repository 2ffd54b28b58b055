//! The bag classifier: a VGG-style convolutional backbone embeds every patch,
//! an elementwise max fuses the bag, and three fully connected layers map the
//! fused vector to class probabilities.
//!
//! ```text
//! probs = softmax(ReLU(ReLU(max_i conv(patch_i) · W1 + b1) · W2 + b2) · W3 + b3)
//! ```
//!
//! A single cell is scored as a bag of one.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{PatchImage, PATCH_SIDE};
use crate::tensor::{max_reduce_rows, Parameter, Tape, Tensor, TensorError, Var};

/// Widths of the two hidden fully connected layers.
pub const HEAD_WIDTHS: [usize; 2] = [256, 64];

/// Subtracted from every `[0, 1]` input value before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Patches are area-averaged down to `input_side x input_side`.
    pub input_side: usize,
    /// Output channels of each 3x3 conv + ReLU + 2x2 max-pool block.
    pub channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_side: 32,
            channels: vec![8, 16, 32],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(ModelError::Config("backbone needs at least one block with nonzero channels".into()));
        }
        let div = 1usize << self.channels.len();
        if self.input_side == 0 || self.input_side % div != 0 || self.input_side > PATCH_SIDE {
            return Err(ModelError::Config(format!(
                "input_side {} must be a positive multiple of {div} (2^blocks) and at most {PATCH_SIDE}",
                self.input_side
            )));
        }
        Ok(())
    }

    /// Length of a patch embedding (n_f).
    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

/// Patch embedding `F = conv(O)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f32>);

impl FeatureVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

/// Backbone and head parameters plus the ordered label space.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub backbone: BackboneConfig,
    pub classes: Vec<String>,
    pub params: Vec<Parameter<f32>>,
}

/// Parameter names in storage order for a given architecture.
pub fn parameter_shapes(backbone: &BackboneConfig, n_classes: usize) -> Vec<(String, Vec<usize>)> {
    let mut shapes = Vec::new();
    let mut c_in = 3;
    for (i, &c) in backbone.channels.iter().enumerate() {
        shapes.push((format!("conv{i}.weight"), vec![c, c_in, 3, 3]));
        shapes.push((format!("conv{i}.bias"), vec![c]));
        c_in = c;
    }
    let widths = [backbone.feature_dim(), HEAD_WIDTHS[0], HEAD_WIDTHS[1], n_classes];
    for (i, pair) in widths.windows(2).enumerate() {
        shapes.push((format!("fc{}.weight", i + 1), vec![pair[0], pair[1]]));
        shapes.push((format!("fc{}.bias", i + 1), vec![pair[1]]));
    }
    shapes
}

impl ModelParams {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init<R: Rng>(backbone: BackboneConfig, classes: Vec<String>, rng: &mut R) -> Result<Self, ModelError> {
        Self::build(backbone, classes, |shape| {
            if shape.len() == 1 {
                return vec![0.0; shape[0]];
            }
            let fan_in: usize = if shape.len() == 4 { shape[1..].iter().product() } else { shape[0] };
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-bound..=bound)).collect()
        })
    }

    /// All parameters zero.
    pub fn zeros(backbone: BackboneConfig, classes: Vec<String>) -> Result<Self, ModelError> {
        Self::build(backbone, classes, |shape| vec![0.0; shape.iter().product()])
    }

    fn build(
        backbone: BackboneConfig,
        classes: Vec<String>,
        mut fill: impl FnMut(&[usize]) -> Vec<f32>,
    ) -> Result<Self, ModelError> {
        backbone.validate()?;
        if classes.len() < 2 {
            return Err(ModelError::Config(format!("need at least 2 classes, got {}", classes.len())));
        }
        let params = parameter_shapes(&backbone, classes.len())
            .into_iter()
            .map(|(name, shape)| {
                let data = fill(&shape);
                Ok(Parameter::new(name, Tensor::new(shape, data)?))
            })
            .collect::<Result<_, TensorError>>()?;
        Ok(Self {
            backbone,
            classes,
            params,
        })
    }

    /// Reassembles a model from named tensors, checking names and shapes.
    pub fn from_tensors(
        backbone: BackboneConfig,
        classes: Vec<String>,
        tensors: Vec<(String, Tensor<f32>)>,
    ) -> Result<Self, ModelError> {
        backbone.validate()?;
        let expected = parameter_shapes(&backbone, classes.len());
        if expected.len() != tensors.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for ((name, shape), (got_name, t)) in expected.into_iter().zip(tensors) {
            if name != got_name || shape != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
            params.push(Parameter::new(name, t));
        }
        Ok(Self {
            backbone,
            classes,
            params,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    fn n_conv_params(&self) -> usize {
        2 * self.backbone.channels.len()
    }

    /// Copies backbone (conv) weights from an externally supplied model with
    /// the same backbone architecture. Head and label space are untouched.
    pub fn import_backbone(&mut self, donor: &ModelParams) -> Result<(), ModelError> {
        if donor.backbone != self.backbone {
            return Err(ModelError::Config(format!(
                "backbone mismatch: {:?} vs {:?}",
                donor.backbone, self.backbone
            )));
        }
        let n = self.n_conv_params();
        for (dst, src) in self.params[..n].iter_mut().zip(&donor.params[..n]) {
            dst.value = src.value.clone();
            dst.zero_grad();
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }
}

/// A patch reduced to model resolution: interleaved RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub side: usize,
    pub rgb: Vec<f32>,
}

/// Per-output-index source spans `(first source index, weights)` for an
/// area-averaging resize along one axis.
fn area_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let w = (first..last)
                .map(|i| ((i + 1) as f64).min(hi) - (i as f64).max(lo))
                .map(|overlap| overlap / scale)
                .collect();
            (first, w)
        })
        .collect()
}

impl ModelInput {
    /// Area-averaged downscale of a square interleaved RGB byte buffer.
    pub fn from_rgb_bytes(pixels: &[u8], src_side: usize, side: usize) -> Self {
        let weights = area_weights(src_side, side);
        // Columns first: [src_side rows][side cols][3]
        let mut tmp = vec![0.0f64; src_side * side * 3];
        for r in 0..src_side {
            let row = &pixels[r * src_side * 3..(r + 1) * src_side * 3];
            for (oc, (first, w)) in weights.iter().enumerate() {
                let mut acc = [0.0f64; 3];
                for (k, &wk) in w.iter().enumerate() {
                    let px = &row[(first + k) * 3..(first + k) * 3 + 3];
                    for ch in 0..3 {
                        acc[ch] += wk * px[ch] as f64;
                    }
                }
                tmp[(r * side + oc) * 3..(r * side + oc) * 3 + 3].copy_from_slice(&acc);
            }
        }
        let mut rgb = vec![0.0f32; side * side * 3];
        for (or, (first, w)) in weights.iter().enumerate() {
            for oc in 0..side {
                let mut acc = [0.0f64; 3];
                for (k, &wk) in w.iter().enumerate() {
                    let i = ((first + k) * side + oc) * 3;
                    for ch in 0..3 {
                        acc[ch] += wk * tmp[i + ch];
                    }
                }
                for ch in 0..3 {
                    rgb[(or * side + oc) * 3 + ch] = (acc[ch] / 255.0) as f32;
                }
            }
        }
        Self { side, rgb }
    }

    pub fn from_patch(patch: &PatchImage, side: usize) -> Self {
        Self::from_rgb_bytes(patch.pixels(), PATCH_SIDE, side)
    }

    /// Key for per-patch random streams.
    pub fn content_hash(&self) -> u64 {
        crate::augment::stable_hash_bytes(self.rgb.iter().flat_map(|v| v.to_bits().to_le_bytes()))
    }

    /// Planar `[3, side, side]` tensor, shifted to `[-0.5, 0.5]`.
    pub fn to_chw<T: crate::tensor::Scalar>(&self) -> Tensor<T> {
        let hw = self.side * self.side;
        let mut data = vec![T::zero(); 3 * hw];
        for (i, px) in self.rgb.chunks_exact(3).enumerate() {
            for ch in 0..3 {
                data[ch * hw + i] = T::of_f64(px[ch] as f64 - INPUT_CENTER);
            }
        }
        Tensor::new(vec![3, self.side, self.side], data).expect("side > 0")
    }
}

/// Which activation [`extract_embedding`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmbeddingLayer {
    /// Backbone feature vector that feeds max fusion (length n_f).
    #[serde(rename = "conv")]
    PostFusionConv,
    /// Post-ReLU activation of the first fully connected layer (length 256).
    #[serde(rename = "fc1")]
    Fc1,
}

impl FromStr for EmbeddingLayer {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conv" | "post-fusion-conv" => Ok(Self::PostFusionConv),
            "fc1" => Ok(Self::Fc1),
            other => Err(ModelError::Config(format!(
                "unknown embedding layer `{other}` (expected conv or fc1)"
            ))),
        }
    }
}

impl fmt::Display for EmbeddingLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PostFusionConv => "conv",
            Self::Fc1 => "fc1",
        })
    }
}

/// Tape handles of every parameter, in storage order.
pub struct RecordedParams(Vec<Option<Var>>);

impl RecordedParams {
    fn at(&self, i: usize) -> Var {
        self.0[i].expect("parameter not recorded on this tape")
    }
}

pub fn record_params(tape: &mut Tape<f32>, model: &ModelParams, range: std::ops::Range<usize>) -> RecordedParams {
    let mut vars = Vec::with_capacity(model.params.len());
    for (i, p) in model.params.iter().enumerate() {
        vars.push(range.contains(&i).then(|| tape.param(i, p)));
    }
    RecordedParams(vars)
}

/// Backbone forward for one input; returns the `[n_f]` feature node.
pub fn embed_on_tape(
    tape: &mut Tape<f32>,
    model: &ModelParams,
    vars: &RecordedParams,
    input: &ModelInput,
) -> Result<Var, ModelError> {
    if input.side != model.backbone.input_side {
        return Err(ModelError::Config(format!(
            "input side {} does not match backbone input_side {}",
            input.side, model.backbone.input_side
        )));
    }
    let mut x = tape.input(input.to_chw());
    for block in 0..model.backbone.channels.len() {
        let (w, b) = (vars.at(2 * block), vars.at(2 * block + 1));
        let c = tape.conv2d(x, w, b, 1, 1)?;
        let r = tape.relu(c);
        x = tape.max_pool2(r)?;
    }
    Ok(tape.global_max(x)?)
}

/// Head forward from a fused vector; returns `(fc1 activation, probabilities)`.
pub fn head_on_tape(
    tape: &mut Tape<f32>,
    model: &ModelParams,
    vars: &RecordedParams,
    fused: Var,
) -> Result<(Var, Var), ModelError> {
    let base = model.n_conv_params();
    let p = |k: usize| vars.at(base + k);
    let h1 = tape.affine(fused, p(0), p(1))?;
    let h1 = tape.relu(h1);
    let h2 = tape.affine(h1, p(2), p(3))?;
    let h2 = tape.relu(h2);
    let logits = tape.affine(h2, p(4), p(5))?;
    Ok((h1, tape.softmax(logits)?))
}

fn embed_input(model: &ModelParams, input: &ModelInput) -> Result<FeatureVector, ModelError> {
    let mut tape = Tape::new();
    let vars = record_params(&mut tape, model, 0..model.n_conv_params());
    let f = embed_on_tape(&mut tape, model, &vars, input)?;
    Ok(FeatureVector(tape.value(f).data().to_vec()))
}

/// `F = conv(O)`: deterministic embedding of one patch.
pub fn embed_patch(patch: &PatchImage, model: &ModelParams) -> Result<FeatureVector, ModelError> {
    embed_input(model, &ModelInput::from_patch(patch, model.backbone.input_side))
}

/// Elementwise max over instance embeddings with per-feature winning instance.
pub fn fuse(features: &[FeatureVector]) -> Result<(FeatureVector, Vec<usize>), ModelError> {
    let first = features.first().ok_or(TensorError::EmptyBag)?;
    let n = first.len();
    let mut flat = Vec::with_capacity(n * features.len());
    for (i, f) in features.iter().enumerate() {
        if f.len() != n {
            return Err(TensorError::Dimension {
                op: "fuse",
                axis: format!("instance {i} length"),
                expected: n,
                found: f.len(),
            }
            .into());
        }
        flat.extend_from_slice(&f.0);
    }
    let (fused, argmax) = max_reduce_rows(&flat, features.len(), n)?;
    Ok((FeatureVector(fused), argmax))
}

fn head_values(fused: &FeatureVector, model: &ModelParams) -> Result<(Vec<f32>, Vec<f32>), ModelError> {
    let n_f = model.backbone.feature_dim();
    if fused.len() != n_f {
        return Err(TensorError::Dimension {
            op: "head_forward",
            axis: "fused feature length".into(),
            expected: n_f,
            found: fused.len(),
        }
        .into());
    }
    let mut tape = Tape::new();
    let vars = record_params(&mut tape, model, model.n_conv_params()..model.params.len());
    let x = tape.input(Tensor::vector(fused.0.clone()));
    let (h1, probs) = head_on_tape(&mut tape, model, &vars, x)?;
    Ok((tape.value(h1).data().to_vec(), tape.value(probs).data().to_vec()))
}

/// Class probabilities for a fused bag vector.
pub fn head_forward(fused: &FeatureVector, model: &ModelParams) -> Result<Vec<f32>, ModelError> {
    Ok(head_values(fused, model)?.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagPrediction {
    pub probabilities: Vec<f32>,
    /// Winning instance index per fused feature.
    pub provenance: Vec<usize>,
}

impl BagPrediction {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.probabilities)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

/// Bag prediction from inputs already at model resolution.
pub fn predict_inputs(inputs: &[ModelInput], model: &ModelParams) -> Result<BagPrediction, ModelError> {
    let features = inputs
        .iter()
        .map(|i| embed_input(model, i))
        .collect::<Result<Vec<_>, _>>()?;
    let (fused, provenance) = fuse(&features)?;
    Ok(BagPrediction {
        probabilities: head_forward(&fused, model)?,
        provenance,
    })
}

/// Embeds every patch, fuses, and classifies the bag.
pub fn predict_bag(patches: &[PatchImage], model: &ModelParams) -> Result<BagPrediction, ModelError> {
    let side = model.backbone.input_side;
    let inputs: Vec<ModelInput> = patches.iter().map(|p| ModelInput::from_patch(p, side)).collect();
    predict_inputs(&inputs, model)
}

/// Cell-level score: the prediction for a bag holding only this patch.
pub fn score_cell(patch: &PatchImage, model: &ModelParams) -> Result<Vec<f32>, ModelError> {
    Ok(predict_bag(std::slice::from_ref(patch), model)?.probabilities)
}

/// Activation at one of the two visualisation taps for a single patch.
pub fn extract_embedding(
    patch: &PatchImage,
    model: &ModelParams,
    layer: EmbeddingLayer,
) -> Result<Vec<f32>, ModelError> {
    let f = embed_patch(patch, model)?;
    match layer {
        EmbeddingLayer::PostFusionConv => Ok(f.into_inner()),
        EmbeddingLayer::Fc1 => Ok(head_values(&f, model)?.0),
    }
}
