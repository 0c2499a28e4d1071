//! Minimal differentiable-network stack: dense and strided 2D convolution
//! layers with ReLU/tanh/scale activations, exact reverse-mode gradients,
//! Adam, soft target updates, and checkpoint serialization.
//!
//! A network is a set of input heads whose flattened outputs are
//! concatenated (optionally together with an extra trunk input, used for the
//! critic's action) and passed through a trunk of dense layers. That covers
//! both the actor (two image heads + pose head) and the critic (three vector
//! heads + action input).

mod checkpoint;
mod kernels;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, take_named, CheckpointMeta, CHECKPOINT_FORMAT_VERSION,
};

use kernels::*;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch at {location} layer {index}: expected {expected}, got {got}")]
    ShapeMismatch {
        location: String,
        index: usize,
        expected: String,
        got: String,
    },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("divergence detected")]
    Divergence,
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("checkpoint format_version {found}, expected {expected}")]
    FormatVersion { found: u32, expected: u32 },
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn reshaped(&self, shape: &[usize]) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One layer of a head or trunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inp: usize, out: usize },
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize },
    Relu,
    Tanh,
    Scale { factor: f64 },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

/// Network architecture descriptor: input heads, an optional extra trunk
/// input concatenated after the head features, and the trunk layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub heads: Vec<HeadSpec>,
    pub extra_input: usize,
    pub trunk: Vec<LayerSpec>,
}

fn layer_output_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>, String> {
    match layer {
        LayerSpec::Dense { inp, out } => {
            if input != [*inp] {
                return Err(format!("dense expects [{inp}], got {input:?}"));
            }
            Ok(vec![*out])
        }
        LayerSpec::Conv { in_ch, out_ch, kernel, stride } => {
            let [c, h, w] = input else {
                return Err(format!("conv expects [c,h,w], got {input:?}"));
            };
            if c != in_ch {
                return Err(format!("conv expects {in_ch} channels, got {c}"));
            }
            if *h < *kernel || *w < *kernel || *stride == 0 {
                return Err(format!("conv kernel {kernel} stride {stride} on {h}x{w}"));
            }
            Ok(vec![*out_ch, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
        }
        LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Scale { .. } => Ok(input.to_vec()),
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
    }
}

fn layer_param_shapes(layer: &LayerSpec) -> Vec<Vec<usize>> {
    match layer {
        LayerSpec::Dense { inp, out } => vec![vec![*out, *inp], vec![*out]],
        LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
            vec![vec![*out_ch, *in_ch, *kernel, *kernel], vec![*out_ch]]
        }
        _ => vec![],
    }
}

fn layer_fan_in(layer: &LayerSpec) -> usize {
    match layer {
        LayerSpec::Dense { inp, .. } => *inp,
        LayerSpec::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
        _ => 0,
    }
}

impl NetworkSpec {
    /// Validates the shape chain; returns per-head output widths and the
    /// final output width.
    pub fn validate(&self) -> Result<SpecInfo, NnError> {
        let mut head_dims = Vec::new();
        for (h, head) in self.heads.iter().enumerate() {
            let mut shape = head.input_shape.clone();
            for (i, layer) in head.layers.iter().enumerate() {
                shape = layer_output_shape(layer, &shape).map_err(|e| {
                    NnError::InvalidSpec(format!("head {h} layer {i}: {e}"))
                })?;
            }
            if shape.len() != 1 {
                return Err(NnError::InvalidSpec(format!(
                    "head {h} output must be flat, got {shape:?}"
                )));
            }
            head_dims.push(shape[0]);
        }
        let trunk_in = head_dims.iter().sum::<usize>() + self.extra_input;
        let mut shape = vec![trunk_in];
        for (i, layer) in self.trunk.iter().enumerate() {
            if matches!(layer, LayerSpec::Conv { .. }) {
                return Err(NnError::InvalidSpec(format!("trunk layer {i}: conv not supported in trunk")));
            }
            shape = layer_output_shape(layer, &shape)
                .map_err(|e| NnError::InvalidSpec(format!("trunk layer {i}: {e}")))?;
        }
        Ok(SpecInfo {
            head_dims,
            trunk_in,
            output_dim: shape[0],
        })
    }

    pub fn param_count(&self) -> usize {
        self.all_layers()
            .flat_map(layer_param_shapes)
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Shapes of the parameter tensors in storage order (heads then trunk;
    /// weight then bias per parameterized layer).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.all_layers().flat_map(layer_param_shapes).collect()
    }

    fn all_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.heads
            .iter()
            .flat_map(|h| h.layers.iter())
            .chain(self.trunk.iter())
    }
}

#[derive(Debug, Clone)]
pub struct SpecInfo {
    pub head_dims: Vec<usize>,
    pub trunk_in: usize,
    pub output_dim: usize,
}

/// Adam first/second moment state, aligned with the parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// A parameterized network with optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    info_head_dims: Vec<usize>,
    output_dim: usize,
    params: Vec<Tensor>,
    adam: AdamState,
}

/// Actor initialization: small final-layer weights so initial actions stay
/// near zero.
pub const ACTOR_INIT_OPTS: InitOptions = InitOptions {
    final_weight_bound: Some(3e-3),
    output_bias: None,
};

/// Initialization choices beyond the fan-in uniform default.
#[derive(Debug, Clone, Copy, Default)]
pub struct InitOptions {
    /// Uniform bound for the last trunk dense layer (keeps initial actor
    /// outputs small).
    pub final_weight_bound: Option<f64>,
    /// Constant added to the output bias after initialization; used to start
    /// a value head at a sensible return scale instead of zero.
    pub output_bias: Option<f64>,
}

impl Network {
    /// Fan-in uniform initialization (+-1/sqrt(fan_in)) with optional
    /// overrides for the final layer.
    pub fn init(
        spec: NetworkSpec,
        opts: InitOptions,
        rng: &mut impl Rng,
    ) -> Result<Network, NnError> {
        let info = spec.validate()?;
        let last_dense_idx = spec
            .trunk
            .iter()
            .enumerate()
            .rev()
            .find(|(_, l)| matches!(l, LayerSpec::Dense { .. }))
            .map(|(i, _)| i);
        let mut params = Vec::new();
        let head_layer_count: usize = spec.heads.iter().map(|h| h.layers.len()).sum();
        for (li, layer) in spec.all_layers().enumerate() {
            let shapes = layer_param_shapes(layer);
            if shapes.is_empty() {
                continue;
            }
            let trunk_idx = li.checked_sub(head_layer_count);
            let is_last_dense = trunk_idx.is_some() && trunk_idx == last_dense_idx;
            let bound = match (opts.final_weight_bound, is_last_dense) {
                (Some(b), true) => b,
                _ => 1.0 / (layer_fan_in(layer) as f64).sqrt(),
            };
            for (pi, shape) in shapes.into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let mut data: Vec<f64> = (0..n)
                    .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
                    .collect();
                // pi == 1 is the bias tensor of a parameterized layer.
                if pi == 1 && is_last_dense {
                    if let Some(b0) = opts.output_bias {
                        for v in &mut data {
                            *v += b0;
                        }
                    }
                }
                params.push(Tensor::from_vec(&shape, data));
            }
        }
        let adam = AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        };
        Ok(Network {
            spec,
            info_head_dims: info.head_dims,
            output_dim: info.output_dim,
            params,
            adam,
        })
    }

    pub fn from_parts(spec: NetworkSpec, params: Vec<Tensor>, adam: AdamState) -> Result<Network, NnError> {
        let info = spec.validate()?;
        let expected: usize = spec.param_count();
        let got: usize = params.iter().map(|p| p.len()).sum();
        if expected != got {
            return Err(NnError::ArchMismatch(format!(
                "parameter count {got} does not match descriptor count {expected}"
            )));
        }
        Ok(Network {
            spec,
            info_head_dims: info.head_dims,
            output_dim: info.output_dim,
            params,
            adam,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable access to one parameter tensor (used by gradient-check
    /// harnesses to perturb coordinates in place).
    pub fn param_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx]
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Largest parameter magnitude across the network.
    pub fn max_abs_param(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_abs()))
    }

    /// Runs the network on a batch. `heads[i]` must have shape
    /// [batch, ...head_i.input_shape]; `extra` supplies the extra trunk
    /// input when the spec declares one.
    pub fn forward(&self, heads: &[&Tensor], extra: Option<&Tensor>) -> Result<ForwardPass, NnError> {
        if heads.len() != self.spec.heads.len() {
            return Err(NnError::ShapeMismatch {
                location: "heads".into(),
                index: 0,
                expected: format!("{} head inputs", self.spec.heads.len()),
                got: format!("{}", heads.len()),
            });
        }
        let batch = heads
            .first()
            .map(|t| t.shape()[0])
            .or_else(|| extra.map(|t| t.shape()[0]))
            .unwrap_or(1);

        let mut param_idx = 0usize;
        let mut head_acts = Vec::with_capacity(heads.len());
        let mut head_cols = Vec::with_capacity(heads.len());
        for (h, (head, input)) in self.spec.heads.iter().zip(heads).enumerate() {
            let mut expected = vec![batch];
            expected.extend_from_slice(&head.input_shape);
            if input.shape() != expected.as_slice() {
                return Err(NnError::ShapeMismatch {
                    location: format!("head {h} input"),
                    index: 0,
                    expected: format!("{expected:?}"),
                    got: format!("{:?}", input.shape()),
                });
            }
            let (acts, cols) =
                self.run_layers(&head.layers, (*input).clone(), &mut param_idx, batch)?;
            head_acts.push(acts);
            head_cols.push(cols);
        }

        // Concatenate head outputs and the extra input per sample.
        let trunk_in: usize =
            self.info_head_dims.iter().sum::<usize>() + self.spec.extra_input;
        let mut concat = Tensor::zeros(&[batch, trunk_in]);
        {
            let out = concat.data_mut();
            for b in 0..batch {
                let mut off = b * trunk_in;
                for (h, dims) in self.info_head_dims.iter().enumerate() {
                    let acts = head_acts[h].last().expect("head activations");
                    out[off..off + dims].copy_from_slice(&acts.data()[b * dims..(b + 1) * dims]);
                    off += dims;
                }
                if self.spec.extra_input > 0 {
                    let e = extra.ok_or_else(|| NnError::ShapeMismatch {
                        location: "extra input".into(),
                        index: 0,
                        expected: format!("[{batch}, {}]", self.spec.extra_input),
                        got: "none".into(),
                    })?;
                    let d = self.spec.extra_input;
                    if e.shape() != [batch, d] {
                        return Err(NnError::ShapeMismatch {
                            location: "extra input".into(),
                            index: 0,
                            expected: format!("[{batch}, {d}]"),
                            got: format!("{:?}", e.shape()),
                        });
                    }
                    out[off..off + d].copy_from_slice(&e.data()[b * d..(b + 1) * d]);
                }
            }
        }

        let (trunk_acts, _) = self.run_layers(&self.spec.trunk, concat, &mut param_idx, batch)?;
        Ok(ForwardPass {
            batch,
            head_acts,
            head_cols,
            trunk_acts,
        })
    }

    fn run_layers(
        &self,
        layers: &[LayerSpec],
        input: Tensor,
        param_idx: &mut usize,
        batch: usize,
    ) -> Result<(Vec<Tensor>, Vec<ColCache>), NnError> {
        let mut acts = vec![input];
        let mut cols = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let (y, col) = match layer {
                LayerSpec::Dense { inp, out } => {
                    let w = &self.params[*param_idx];
                    let b = &self.params[*param_idx + 1];
                    *param_idx += 2;
                    if x.shape() != [batch, *inp] {
                        return Err(NnError::ShapeMismatch {
                            location: "dense".into(),
                            index: i,
                            expected: format!("[{batch}, {inp}]"),
                            got: format!("{:?}", x.shape()),
                        });
                    }
                    let mut y = Tensor::zeros(&[batch, *out]);
                    matmul_a_bt(x.data(), w.data(), y.data_mut(), batch, *inp, *out);
                    add_bias_rows(y.data_mut(), b.data(), batch, *out);
                    (y, None)
                }
                LayerSpec::Conv { in_ch, out_ch, kernel, stride } => {
                    let w = &self.params[*param_idx];
                    let b = &self.params[*param_idx + 1];
                    *param_idx += 2;
                    let [bs, c, h, wd] = x.shape() else {
                        return Err(NnError::ShapeMismatch {
                            location: "conv".into(),
                            index: i,
                            expected: "[batch, c, h, w]".into(),
                            got: format!("{:?}", x.shape()),
                        });
                    };
                    if *bs != batch || c != in_ch {
                        return Err(NnError::ShapeMismatch {
                            location: "conv".into(),
                            index: i,
                            expected: format!("[{batch}, {in_ch}, _, _]"),
                            got: format!("{:?}", x.shape()),
                        });
                    }
                    let oh = (h - kernel) / stride + 1;
                    let ow = (wd - kernel) / stride + 1;
                    let k_dim = in_ch * kernel * kernel;
                    let patch = oh * ow;
                    let mut y = Tensor::zeros(&[batch, *out_ch, oh, ow]);
                    let mut col_all = vec![0.0f64; batch * k_dim * patch];
                    let img_sz = c * h * wd;
                    let out_sz = out_ch * patch;
                    for s in 0..batch {
                        let col = &mut col_all[s * k_dim * patch..(s + 1) * k_dim * patch];
                        im2col(
                            &x.data()[s * img_sz..(s + 1) * img_sz],
                            col,
                            *in_ch,
                            *h,
                            *wd,
                            *kernel,
                            *stride,
                            oh,
                            ow,
                        );
                        let out = &mut y.data_mut()[s * out_sz..(s + 1) * out_sz];
                        matmul_a_b(w.data(), col, out, *out_ch, k_dim, patch);
                        for oc in 0..*out_ch {
                            let bias = b.data()[oc];
                            for v in &mut out[oc * patch..(oc + 1) * patch] {
                                *v += bias;
                            }
                        }
                    }
                    (y, Some(col_all))
                }
                LayerSpec::Relu => {
                    let mut y = x.clone();
                    for v in y.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    (y, None)
                }
                LayerSpec::Tanh => {
                    let mut y = x.clone();
                    for v in y.data_mut() {
                        *v = v.tanh();
                    }
                    (y, None)
                }
                LayerSpec::Scale { factor } => {
                    let mut y = x.clone();
                    for v in y.data_mut() {
                        *v *= factor;
                    }
                    (y, None)
                }
                LayerSpec::Flatten => {
                    let flat: usize = x.shape()[1..].iter().product();
                    (x.reshaped(&[batch, flat]), None)
                }
            };
            acts.push(y);
            cols.push(col);
        }
        Ok((acts, cols))
    }

    /// Reverse-mode gradients for all parameters given the upstream gradient
    /// of the loss with respect to the network output ([batch, out_dim]).
    /// When `want_extra_grad` is set, the gradient with respect to the extra
    /// trunk input is also returned (used for dQ/da in the actor update).
    pub fn backward(
        &self,
        fwd: &ForwardPass,
        upstream: &Tensor,
        want_extra_grad: bool,
    ) -> Result<Gradients, NnError> {
        let batch = fwd.batch;
        if upstream.shape() != [batch, self.output_dim] {
            return Err(NnError::ShapeMismatch {
                location: "upstream gradient".into(),
                index: 0,
                expected: format!("[{batch}, {}]", self.output_dim),
                got: format!("{:?}", upstream.shape()),
            });
        }
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();

        // Parameter index ranges: heads first, then trunk.
        let mut param_starts = Vec::new();
        let mut idx = 0usize;
        for head in &self.spec.heads {
            param_starts.push(idx);
            idx += head.layers.iter().map(|l| layer_param_shapes(l).len()).sum::<usize>();
        }
        let trunk_param_start = idx;

        let g_trunk_in = self.backprop_layers(
            &self.spec.trunk,
            &fwd.trunk_acts,
            &[],
            upstream.clone(),
            trunk_param_start,
            &mut grads,
            batch,
            true,
        )?;
        let g_trunk_in = g_trunk_in.expect("trunk input gradient");

        // Split the concatenated gradient back into heads and extra input.
        let trunk_in: usize = self.info_head_dims.iter().sum::<usize>() + self.spec.extra_input;
        let mut extra_grad = if want_extra_grad && self.spec.extra_input > 0 {
            Some(Tensor::zeros(&[batch, self.spec.extra_input]))
        } else {
            None
        };
        for (h, head) in self.spec.heads.iter().enumerate() {
            let dims = self.info_head_dims[h];
            let offset: usize = self.info_head_dims[..h].iter().sum();
            let mut g_head = Tensor::zeros(&[batch, dims]);
            for b in 0..batch {
                g_head.data_mut()[b * dims..(b + 1) * dims]
                    .copy_from_slice(&g_trunk_in.data()[b * trunk_in + offset..b * trunk_in + offset + dims]);
            }
            self.backprop_layers(
                &head.layers,
                &fwd.head_acts[h],
                &fwd.head_cols[h],
                g_head,
                param_starts[h],
                &mut grads,
                batch,
                false,
            )?;
        }
        if let Some(e) = extra_grad.as_mut() {
            let d = self.spec.extra_input;
            let offset: usize = self.info_head_dims.iter().sum();
            for b in 0..batch {
                e.data_mut()[b * d..(b + 1) * d]
                    .copy_from_slice(&g_trunk_in.data()[b * trunk_in + offset..b * trunk_in + offset + d]);
            }
        }
        Ok(Gradients {
            params: grads,
            extra_input: extra_grad,
        })
    }

    /// Walks `layers` in reverse, accumulating parameter gradients and
    /// returning the gradient at the block input when requested.
    #[allow(clippy::too_many_arguments)]
    fn backprop_layers(
        &self,
        layers: &[LayerSpec],
        acts: &[Tensor],
        cols: &[ColCache],
        upstream: Tensor,
        param_start: usize,
        grads: &mut [Tensor],
        batch: usize,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>, NnError> {
        // Per-layer starting parameter index.
        let mut layer_param_idx = Vec::with_capacity(layers.len());
        let mut idx = param_start;
        for layer in layers {
            layer_param_idx.push(idx);
            idx += layer_param_shapes(layer).len();
        }

        let mut g = upstream;
        for (i, layer) in layers.iter().enumerate().rev() {
            let x = &acts[i];
            let y = &acts[i + 1];
            let last = i == 0 && !want_input_grad;
            g = match layer {
                LayerSpec::Dense { inp, out } => {
                    let pi = layer_param_idx[i];
                    matmul_at_b_accum(g.data(), x.data(), grads[pi].data_mut(), batch, *out, *inp);
                    bias_grad_accum(g.data(), grads[pi + 1].data_mut(), batch, *out);
                    if last {
                        break;
                    }
                    let w = &self.params[pi];
                    let mut gx = Tensor::zeros(&[batch, *inp]);
                    matmul_a_b(g.data(), w.data(), gx.data_mut(), batch, *out, *inp);
                    gx
                }
                LayerSpec::Conv { in_ch, out_ch, kernel, stride } => {
                    let pi = layer_param_idx[i];
                    let [_, c, h, wd] = x.shape() else { unreachable!() };
                    let oh = (h - kernel) / stride + 1;
                    let ow = (wd - kernel) / stride + 1;
                    let k_dim = in_ch * kernel * kernel;
                    let patch = oh * ow;
                    let col_all = cols[i].as_ref().expect("conv column cache");
                    let out_sz = out_ch * patch;
                    let img_sz = c * h * wd;
                    let mut gx = if last {
                        None
                    } else {
                        Some(Tensor::zeros(x.shape()))
                    };
                    let w = &self.params[pi];
                    let mut dcol = vec![0.0f64; k_dim * patch];
                    for s in 0..batch {
                        let gs = &g.data()[s * out_sz..(s + 1) * out_sz];
                        let col = &col_all[s * k_dim * patch..(s + 1) * k_dim * patch];
                        // dW += g_s * col^T
                        matmul_a_bt_accum(gs, col, grads[pi].data_mut(), *out_ch, patch, k_dim);
                        // db += row sums of g_s
                        for oc in 0..*out_ch {
                            let mut acc = 0.0;
                            for v in &gs[oc * patch..(oc + 1) * patch] {
                                acc += v;
                            }
                            grads[pi + 1].data_mut()[oc] += acc;
                        }
                        if let Some(gx) = gx.as_mut() {
                            // dcol = W^T * g_s, scattered back to the image.
                            dcol.fill(0.0);
                            matmul_at_b_accum(w.data(), gs, &mut dcol, *out_ch, k_dim, patch);
                            col2im_accum(
                                &dcol,
                                &mut gx.data_mut()[s * img_sz..(s + 1) * img_sz],
                                *in_ch,
                                *h,
                                *wd,
                                *kernel,
                                *stride,
                                oh,
                                ow,
                            );
                        }
                    }
                    match gx {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                LayerSpec::Relu => {
                    if last {
                        break;
                    }
                    let mut gx = g;
                    for (gv, yv) in gx.data_mut().iter_mut().zip(y.data()) {
                        if *yv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    gx
                }
                LayerSpec::Tanh => {
                    if last {
                        break;
                    }
                    let mut gx = g;
                    for (gv, yv) in gx.data_mut().iter_mut().zip(y.data()) {
                        *gv *= 1.0 - yv * yv;
                    }
                    gx
                }
                LayerSpec::Scale { factor } => {
                    if last {
                        break;
                    }
                    let mut gx = g;
                    for gv in gx.data_mut() {
                        *gv *= factor;
                    }
                    gx
                }
                LayerSpec::Flatten => {
                    if last {
                        break;
                    }
                    g.reshaped(x.shape())
                }
            };
        }
        if want_input_grad {
            Ok(Some(g))
        } else {
            Ok(None)
        }
    }
}

/// Cached im2col expansion for one conv layer (per batch).
type ColCache = Option<Vec<f64>>;

/// Cached activations from one forward call; required for backward.
#[derive(Debug)]
pub struct ForwardPass {
    batch: usize,
    head_acts: Vec<Vec<Tensor>>,
    head_cols: Vec<Vec<ColCache>>,
    trunk_acts: Vec<Tensor>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        self.trunk_acts.last().expect("trunk output")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Parameter gradients (aligned with `Network::params`) plus, when
/// requested, the gradient at the extra trunk input.
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub extra_input: Option<Tensor>,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|g| g.all_finite())
            && self.extra_input.as_ref().is_none_or(|g| g.all_finite())
    }
}

/// One Adam update (beta1 = 0.9, beta2 = 0.999, eps = 1e-8). Non-finite
/// gradients are rejected as divergence.
pub fn adam_step(net: &mut Network, grads: &Gradients, lr: f64) -> Result<(), NnError> {
    if grads.params.len() != net.params.len() {
        return Err(NnError::ArchMismatch(format!(
            "gradient count {} vs parameter count {}",
            grads.params.len(),
            net.params.len()
        )));
    }
    if !grads.all_finite() {
        return Err(NnError::Divergence);
    }
    net.adam.t += 1;
    let t = net.adam.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in net
        .params
        .iter_mut()
        .zip(&grads.params)
        .zip(net.adam.m.iter_mut().zip(net.adam.v.iter_mut()))
    {
        if g.shape() != p.shape() {
            return Err(NnError::ArchMismatch(format!(
                "gradient shape {:?} vs parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// target <- tau * source + (1 - tau) * target, parameter-wise.
pub fn soft_update(target: &mut Network, source: &Network, tau: f64) -> Result<(), NnError> {
    if target.spec != source.spec {
        return Err(NnError::ArchMismatch(
            "soft update between different architectures".into(),
        ));
    }
    for (t, s) in target.params.iter_mut().zip(&source.params) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = tau * sv + (1.0 - tau) * *tv;
        }
    }
    Ok(())
}

// --- default architectures --------------------------------------------------

fn conv_stack(in_ch: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { in_ch, out_ch: 8, kernel: 3, stride: 2 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_ch: 8, out_ch: 16, kernel: 3, stride: 2 },
        LayerSpec::Relu,
        LayerSpec::Conv { in_ch: 16, out_ch: 16, kernel: 3, stride: 2 },
        LayerSpec::Relu,
        LayerSpec::Flatten,
    ]
}

fn conv_out_flat(grid: usize) -> usize {
    let mut side = grid;
    for _ in 0..3 {
        side = (side - 3) / 2 + 1;
    }
    16 * side * side
}

/// Actor: conv heads over the position and height images, a dense-32 pose
/// head, then 256-256 trunk ending in tanh scaled to the action range.
pub fn actor_spec(grid: usize) -> NetworkSpec {
    let feat = 2 * conv_out_flat(grid) + 32;
    NetworkSpec {
        heads: vec![
            HeadSpec { input_shape: vec![3, grid, grid], layers: conv_stack(3) },
            HeadSpec { input_shape: vec![1, grid, grid], layers: conv_stack(1) },
            HeadSpec {
                input_shape: vec![2],
                layers: vec![LayerSpec::Dense { inp: 2, out: 32 }, LayerSpec::Relu],
            },
        ],
        extra_input: 0,
        trunk: vec![
            LayerSpec::Dense { inp: feat, out: 256 },
            LayerSpec::Relu,
            LayerSpec::Dense { inp: 256, out: 256 },
            LayerSpec::Relu,
            LayerSpec::Dense { inp: 256, out: 2 },
            LayerSpec::Tanh,
            LayerSpec::Scale { factor: crate::world::MAX_ACTION },
        ],
    }
}

fn critic_trunk(feat: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Dense { inp: feat, out: 256 },
        LayerSpec::Relu,
        LayerSpec::Dense { inp: 256, out: 256 },
        LayerSpec::Relu,
        LayerSpec::Dense { inp: 256, out: 1 },
    ]
}

/// Privileged critic: dense-32 heads over target offset, other-object
/// offsets, and pose; the action joins at the trunk input.
pub fn critic_spec(max_objects: usize) -> NetworkSpec {
    NetworkSpec {
        heads: vec![
            HeadSpec {
                input_shape: vec![2],
                layers: vec![LayerSpec::Dense { inp: 2, out: 32 }, LayerSpec::Relu],
            },
            HeadSpec {
                input_shape: vec![2 * max_objects],
                layers: vec![
                    LayerSpec::Dense { inp: 2 * max_objects, out: 32 },
                    LayerSpec::Relu,
                ],
            },
            HeadSpec {
                input_shape: vec![2],
                layers: vec![LayerSpec::Dense { inp: 2, out: 32 }, LayerSpec::Relu],
            },
        ],
        extra_input: 2,
        trunk: critic_trunk(3 * 32 + 2),
    }
}

/// Image critic for the no-asymmetry ablation: the actor's observation
/// images, flattened, through dense-32 heads; same trunk as the privileged
/// critic.
pub fn image_critic_spec(grid: usize) -> NetworkSpec {
    let cells = grid * grid;
    NetworkSpec {
        heads: vec![
            HeadSpec {
                input_shape: vec![3 * cells],
                layers: vec![
                    LayerSpec::Dense { inp: 3 * cells, out: 32 },
                    LayerSpec::Relu,
                ],
            },
            HeadSpec {
                input_shape: vec![cells],
                layers: vec![
                    LayerSpec::Dense { inp: cells, out: 32 },
                    LayerSpec::Relu,
                ],
            },
            HeadSpec {
                input_shape: vec![2],
                layers: vec![LayerSpec::Dense { inp: 2, out: 32 }, LayerSpec::Relu],
            },
        ],
        extra_input: 2,
        trunk: critic_trunk(3 * 32 + 2),
    }
}

#[cfg(test)]
mod tests;
