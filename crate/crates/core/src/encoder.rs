//! MLP encoder with a normalized projection output.
//!
//! Layers are affine maps `y = x·Wᵀ + b` with ReLU between them and no
//! activation after the last one; the last layer's output is L2-normalized
//! row by row. Weights are stored `out × in`.

use std::path::Path;

use crate::error::{MixcoError, Result};
use crate::numerics::{l2_normalize_rows, matmul, matmul_at, matmul_bt, NormalizedRows, SeededRng, Tensor};
use crate::textio::{push_f64s, write_file, LineReader};

/// Guard used when normalizing encoder outputs.
pub const NORM_EPS: f64 = 1e-12;

const CHECKPOINT_MAGIC: &str = "MIXCO-ENCODER";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(MixcoError::config(format!(
            "encoder needs at least an input and an output size, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(MixcoError::config(format!(
            "encoder layer sizes must be positive, got {sizes:?}"
        )));
    }
    Ok(())
}

impl EncoderParams {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros(&[w[1], w[0]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(EncoderParams {
            sizes: sizes.to_vec(),
            layers,
        })
    }

    /// Assembles parameters from explicit layers, checking that they chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| MixcoError::config("encoder needs at least one layer"))?;
        let mut sizes = vec![first.weight.cols()];
        for (i, layer) in layers.iter().enumerate() {
            let (out, inp) = layer.weight.expect_matrix("EncoderParams::from_layers")?;
            if inp != *sizes.last().unwrap() || layer.bias.shape() != [out] {
                return Err(MixcoError::config(format!(
                    "layer {i} has weight {:?} and bias {:?}, which do not chain from width {}",
                    layer.weight.shape(),
                    layer.bias.shape(),
                    sizes.last().unwrap()
                )));
            }
            sizes.push(out);
        }
        validate_sizes(&sizes)?;
        Ok(EncoderParams { sizes, layers })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// All parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Concatenation of [`tensors`](Self::tensors) into one vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(MixcoError::Dimension {
                op: "EncoderParams::set_flat",
                left: vec![self.param_count()],
                right: vec![values.len()],
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &EncoderParams) -> bool {
        self.sizes == other.sizes && self.tensors().zip(other.tensors()).all(|(a, b)| a.bit_eq(b))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }
}

/// Weights `~ N(0, 1/fan_in)`, biases zero.
pub fn init_encoder(sizes: &[usize], rng: &mut SeededRng) -> Result<EncoderParams> {
    let mut params = EncoderParams::zeros(sizes)?;
    for layer in &mut params.layers {
        let std = (1.0 / layer.weight.cols() as f64).sqrt();
        for w in layer.weight.data_mut() {
            *w = std * rng.normal();
        }
    }
    Ok(params)
}

/// Intermediate values from [`encode`] needed by [`encoder_backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    sizes: Vec<usize>,
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Tensor>,
    /// Affine output of each layer before ReLU / normalization.
    pre_activations: Vec<Tensor>,
    normalized: NormalizedRows,
}

impl ForwardTrace {
    pub fn layer_count(&self) -> usize {
        self.pre_activations.len()
    }

    /// Whether any output row hit the zero-norm guard.
    pub fn degenerate(&self) -> bool {
        self.normalized.degenerate()
    }

    /// Smallest `|z|` over all ReLU inputs; `+∞` for a single-layer encoder.
    /// The forward map is smooth in a neighbourhood of the traced point
    /// whenever this is positive and no row is degenerate.
    pub fn relu_margin(&self) -> f64 {
        let hidden = &self.pre_activations[..self.pre_activations.len() - 1];
        hidden
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Smallest pre-normalization row norm.
    pub fn min_norm(&self) -> f64 {
        self.normalized.norms.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn check_input(params: &EncoderParams, x: &Tensor, op: &'static str) -> Result<()> {
    let (_, d) = x.expect_matrix(op)?;
    if d != params.input_dim() {
        return Err(MixcoError::Dimension {
            op,
            left: x.shape().to_vec(),
            right: vec![params.layers[0].weight.rows(), params.input_dim()],
        });
    }
    Ok(())
}

fn affine(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    let mut y = matmul_bt(x, &layer.weight)?;
    let b = layer.bias.data();
    let cols = y.cols();
    for row in y.data_mut().chunks_exact_mut(cols) {
        for (v, bj) in row.iter_mut().zip(b) {
            *v += bj;
        }
    }
    Ok(y)
}

/// Forward pass returning unit-norm embeddings and the trace for backward.
pub fn encode(params: &EncoderParams, x: &Tensor) -> Result<(Tensor, ForwardTrace)> {
    check_input(params, x, "encode")?;
    let last = params.layers.len() - 1;
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut h = x.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let pre = affine(layer, &h)?;
        let next = if i < last { pre.map(|v| v.max(0.0)) } else { pre.clone() };
        inputs.push(std::mem::replace(&mut h, next));
        pre_activations.push(pre);
    }
    let normalized = l2_normalize_rows(&h, NORM_EPS)?;
    let v = normalized.output.clone();
    Ok((
        v,
        ForwardTrace {
            sizes: params.sizes.clone(),
            inputs,
            pre_activations,
            normalized,
        },
    ))
}

/// Forward pass without keeping a trace.
pub fn embed(params: &EncoderParams, x: &Tensor) -> Result<Tensor> {
    check_input(params, x, "embed")?;
    let last = params.layers.len() - 1;
    let mut h = x.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        h = affine(layer, &h)?;
        if i < last {
            for v in h.data_mut() {
                *v = v.max(0.0);
            }
        }
    }
    Ok(l2_normalize_rows(&h, NORM_EPS)?.output)
}

#[derive(Debug, Clone)]
pub struct EncoderGradients {
    /// Same layout as the encoder parameters.
    pub params: EncoderParams,
    pub input: Tensor,
}

/// Backpropagates `grad_v` (gradient of a loss with respect to the normalized
/// embeddings) through normalization and every layer.
pub fn encoder_backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    grad_v: &Tensor,
) -> Result<EncoderGradients> {
    if trace.sizes != params.sizes || trace.layer_count() != params.layers.len() {
        return Err(MixcoError::contract(format!(
            "trace was recorded for layer sizes {:?}, parameters have {:?}",
            trace.sizes, params.sizes
        )));
    }
    let mut grads = EncoderParams::zeros(&params.sizes)?;
    let mut g = trace.normalized.backward(grad_v)?;
    let last = params.layers.len() - 1;
    for i in (0..=last).rev() {
        if i < last {
            for (gv, pre) in g.data_mut().iter_mut().zip(trace.pre_activations[i].data()) {
                if *pre <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let slot = &mut grads.layers[i];
        slot.weight = matmul_at(&g, &trace.inputs[i])?;
        let bias = slot.bias.data_mut();
        for row in g.row_iter() {
            for (b, v) in bias.iter_mut().zip(row) {
                *b += v;
            }
        }
        g = matmul(&g, &params.layers[i].weight)?;
    }
    Ok(EncoderGradients {
        params: grads,
        input: g,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Momentum buffer for [`apply_sgd_step`], one entry per parameter.
#[derive(Debug, Clone)]
pub struct SgdVelocity(EncoderParams);

impl SgdVelocity {
    pub fn new(params: &EncoderParams) -> Self {
        SgdVelocity(EncoderParams::zeros(&params.sizes).expect("sizes already validated"))
    }
}

/// Heavy-ball SGD with coupled weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
pub fn apply_sgd_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    cfg: &SgdConfig,
    velocity: &mut SgdVelocity,
) -> Result<()> {
    if !(cfg.lr >= 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(MixcoError::config(format!(
            "need lr >= 0 and 0 <= momentum < 1, got lr={} momentum={}",
            cfg.lr, cfg.momentum
        )));
    }
    if params.sizes != grads.sizes || params.sizes != velocity.0.sizes {
        return Err(MixcoError::contract("gradient or velocity layout does not match parameters"));
    }
    if !grads.is_finite() {
        return Err(MixcoError::Diverged("non-finite parameter gradient".into()));
    }
    for ((p, g), v) in params
        .tensors_mut()
        .zip(grads.tensors())
        .zip(velocity.0.tensors_mut())
    {
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *pi;
            *pi -= cfg.lr * *vi;
        }
    }
    Ok(())
}

pub(crate) fn write_params_body(out: &mut String, params: &EncoderParams) {
    for (i, layer) in params.layers.iter().enumerate() {
        out.push_str(&format!(
            "layer {i} {} {}\n",
            layer.weight.rows(),
            layer.weight.cols()
        ));
        for row in layer.weight.row_iter() {
            push_f64s(out, row);
        }
        push_f64s(out, layer.bias.data());
    }
}

pub(crate) fn read_params_body(reader: &mut LineReader, sizes: &[usize]) -> Result<EncoderParams> {
    let mut params = EncoderParams::zeros(sizes).map_err(|e| reader.error(e.to_string()))?;
    for (i, layer) in params.layers.iter_mut().enumerate() {
        let header = reader.keyed_list("layer")?;
        let (out, inp) = (layer.weight.rows(), layer.weight.cols());
        if header != [i, out, inp] {
            return Err(reader.error(format!(
                "expected layer header `{i} {out} {inp}`, found {header:?}"
            )));
        }
        for r in 0..out {
            let row = reader.f64_line(inp)?;
            layer.weight.row_mut(r).copy_from_slice(&row);
        }
        let bias = reader.f64_line(out)?;
        layer.bias.data_mut().copy_from_slice(&bias);
    }
    if !params.is_finite() {
        return Err(reader.error("checkpoint contains non-finite parameters"));
    }
    Ok(params)
}

/// Encoder parameters together with the seed of the run that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint {
    pub params: EncoderParams,
    pub seed: u64,
}

/// Writes a text checkpoint:
///
/// ```text
/// MIXCO-ENCODER 1
/// seed <u64>
/// sizes <d0> <d1> ...
/// layer <i> <out> <in>      (per layer, followed by)
/// <out lines of in weights>
/// <one line of out biases>
/// ```
pub fn save_encoder(path: &Path, params: &EncoderParams, seed: u64) -> Result<()> {
    let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nseed {seed}\nsizes ");
    out.push_str(&join(params.sizes()));
    out.push('\n');
    write_params_body(&mut out, params);
    write_file(path, &out)
}

pub fn load_encoder(path: &Path) -> Result<EncoderCheckpoint> {
    let mut reader = LineReader::open(path)?;
    let version: u32 = reader.keyed_parse(CHECKPOINT_MAGIC)?;
    if version != CHECKPOINT_VERSION {
        return Err(reader.error(format!("unsupported checkpoint version {version}")));
    }
    let seed = reader.keyed_parse("seed")?;
    let sizes = reader.keyed_list("sizes")?;
    let params = read_params_body(&mut reader, &sizes)?;
    if !reader.at_end() {
        reader.next_line()?;
        return Err(reader.error("trailing data after checkpoint"));
    }
    Ok(EncoderCheckpoint { params, seed })
}

pub(crate) fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}
