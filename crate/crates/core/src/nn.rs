//! Network architecture specs and parameter management.
//!
//! A [`NetworkSpec`] is an ordered layer list validated at build time; a
//! [`ParameterSet`] holds one weight/bias pair per parameterized layer.
//! Parameterized layers are numbered 1..=R in network order, and that index
//! is what checkpoints, weight keys, and the CLI mean by "layer r".

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels;
use crate::tensor::Tensor;

/// One layer of a feed-forward network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Conv { in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize },
    MaxPool2x2,
    Flatten,
    Relu,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }
}

/// An ordered layer list plus input geometry and class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// Shape of one sample, e.g. `[1, 28, 28]` for C×H×W images.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl NetworkSpec {
    /// Checks that consecutive layers are shape-compatible, that the final
    /// output is `num_classes` logits, and that at least one layer carries
    /// parameters.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer_output_shape(layer, &shape).map_err(|e| {
                Error::Spec(format!("layer {i} ({layer:?}): {e}"))
            })?;
        }
        if shape != [self.num_classes] {
            return Err(Error::Spec(format!(
                "network outputs shape {shape:?}, expected [{}] logits",
                self.num_classes
            )));
        }
        if !self.layers.iter().any(|l| l.is_parameterized()) {
            return Err(Error::Spec("network has no parameterized layer".into()));
        }
        Ok(())
    }

    /// Positions (into `layers`) of the parameterized layers, in order.
    pub fn parameterized_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dense { input, output } => input * output + output,
                LayerSpec::Conv { in_channels, out_channels, kernel_h, kernel_w } => {
                    out_channels * in_channels * kernel_h * kernel_w + out_channels
                }
                _ => 0,
            })
            .sum()
    }

    /// Weight tensor shape of parameterized layer `r` (1-based).
    pub fn weight_shape(&self, layer_index: usize) -> Result<Vec<usize>> {
        let positions = self.parameterized_positions();
        if layer_index == 0 || layer_index > positions.len() {
            return Err(Error::Param(format!(
                "layer index {layer_index} out of range: network has {} parameterized layers",
                positions.len()
            )));
        }
        Ok(match &self.layers[positions[layer_index - 1]] {
            LayerSpec::Dense { input, output } => vec![*input, *output],
            LayerSpec::Conv { in_channels, out_channels, kernel_h, kernel_w } => {
                vec![*out_channels, *in_channels, *kernel_h, *kernel_w]
            }
            _ => unreachable!(),
        })
    }
}

fn layer_output_shape(layer: &LayerSpec, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
    match layer {
        LayerSpec::Dense { input: fan_in, output } => {
            if input.len() != 1 || input[0] != *fan_in {
                return Err(format!("dense expects [{fan_in}] input, got {input:?}"));
            }
            Ok(vec![*output])
        }
        LayerSpec::Conv { in_channels, out_channels, kernel_h, kernel_w } => {
            if input.len() != 3 {
                return Err(format!("conv expects C×H×W input, got {input:?}"));
            }
            let (c, h, w) = (input[0], input[1], input[2]);
            if c != *in_channels {
                return Err(format!("conv expects {in_channels} channels, got {c}"));
            }
            if *kernel_h > h || *kernel_w > w {
                return Err(format!("kernel {kernel_h}×{kernel_w} larger than input {h}×{w}"));
            }
            Ok(vec![*out_channels, h - kernel_h + 1, w - kernel_w + 1])
        }
        LayerSpec::MaxPool2x2 => {
            if input.len() != 3 || input[1] < 2 || input[2] < 2 {
                return Err(format!("maxpool expects C×H×W with H,W ≥ 2, got {input:?}"));
            }
            Ok(vec![input[0], input[1] / 2, input[2] / 2])
        }
        LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        LayerSpec::Relu => Ok(input.to_vec()),
    }
}

/// One parameterized layer's tensors.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    /// Position of this layer in `NetworkSpec::layers`.
    pub layer_pos: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// All weights and biases of a network, in layer order.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub entries: Vec<ParamEntry>,
}

impl ParameterSet {
    /// Entry for parameterized layer `r` (1-based).
    pub fn entry(&self, layer_index: usize) -> Result<&ParamEntry> {
        self.entries.get(layer_index.wrapping_sub(1)).ok_or_else(|| {
            Error::Param(format!(
                "layer index {layer_index} out of range: {} parameterized layers",
                self.entries.len()
            ))
        })
    }

    pub fn entry_mut(&mut self, layer_index: usize) -> Result<&mut ParamEntry> {
        let n = self.entries.len();
        self.entries.get_mut(layer_index.wrapping_sub(1)).ok_or_else(|| {
            Error::Param(format!(
                "layer index {layer_index} out of range: {n} parameterized layers"
            ))
        })
    }

    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.weights.len() + e.bias.len())
            .sum()
    }

    /// Bit-level equality across all tensors.
    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.layer_pos == b.layer_pos
                    && a.weights.bit_eq(&b.weights)
                    && a.bias.bit_eq(&b.bias)
            })
    }
}

/// Draws weights from uniform(−√(1/fan_in), +√(1/fan_in)) and zeroes biases,
/// deterministically in `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for (pos, layer) in spec.layers.iter().enumerate() {
        let (wshape, bias_len, fan_in) = match layer {
            LayerSpec::Dense { input, output } => (vec![*input, *output], *output, *input),
            LayerSpec::Conv { in_channels, out_channels, kernel_h, kernel_w } => (
                vec![*out_channels, *in_channels, *kernel_h, *kernel_w],
                *out_channels,
                in_channels * kernel_h * kernel_w,
            ),
            _ => continue,
        };
        let bound = (1.0 / fan_in as f32).sqrt();
        let n: usize = wshape.iter().product();
        let wdata: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        entries.push(ParamEntry {
            layer_pos: pos,
            weights: Tensor::new(wshape, wdata)?,
            bias: Tensor::zeros(vec![bias_len]),
        });
    }
    Ok(ParameterSet { entries })
}

fn batch_shape_check(spec: &NetworkSpec, batch: &Tensor) -> Result<usize> {
    let s = batch.shape();
    if s.len() != spec.input_shape.len() + 1 || s[1..] != spec.input_shape[..] {
        return Err(Error::Dim(format!(
            "batch shape {s:?} does not extend input shape {:?}",
            spec.input_shape
        )));
    }
    Ok(s[0])
}

/// Plain inference forward pass: logits N×num_classes, no graph recorded.
/// A pure function of `(params, batch)`.
pub fn forward(spec: &NetworkSpec, params: &ParameterSet, batch: &Tensor) -> Result<Tensor> {
    let n = batch_shape_check(spec, batch)?;
    let mut data = batch.data().to_vec();
    let mut shape = spec.input_shape.clone();
    let mut param_iter = params.entries.iter();
    for (pos, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Dense { input, output } => {
                let entry = param_iter.next().ok_or_else(|| {
                    Error::Spec(format!("missing parameters for layer {pos}"))
                })?;
                if shape != [*input] {
                    return Err(Error::Dim(format!(
                        "dense layer {pos} expects [{input}], got {shape:?}"
                    )));
                }
                let mut out = vec![0.0f32; n * output];
                kernels::matmul_nn(&data, entry.weights.data(), n, *input, *output, &mut out);
                for row in out.chunks_exact_mut(*output) {
                    for (o, &b) in row.iter_mut().zip(entry.bias.data()) {
                        *o += b;
                    }
                }
                data = out;
                shape = vec![*output];
            }
            LayerSpec::Conv { in_channels: _, out_channels, kernel_h, kernel_w } => {
                let entry = param_iter.next().ok_or_else(|| {
                    Error::Spec(format!("missing parameters for layer {pos}"))
                })?;
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h - kernel_h + 1, w - kernel_w + 1);
                let mut out = vec![0.0f32; n * out_channels * oh * ow];
                kernels::conv2d_fwd(
                    &data,
                    entry.weights.data(),
                    entry.bias.data(),
                    n,
                    c,
                    h,
                    w,
                    *out_channels,
                    *kernel_h,
                    *kernel_w,
                    &mut out,
                );
                data = out;
                shape = vec![*out_channels, oh, ow];
            }
            LayerSpec::MaxPool2x2 => {
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (out, _) = kernels::maxpool2x2_fwd(&data, n, c, h, w);
                data = out;
                shape = vec![c, h / 2, w / 2];
            }
            LayerSpec::Flatten => {
                shape = vec![shape.iter().product()];
            }
            LayerSpec::Relu => {
                for v in &mut data {
                    *v = v.max(0.0);
                }
            }
        }
    }
    let mut out_shape = vec![n];
    out_shape.extend(&shape);
    Tensor::new(out_shape, data)
}

/// Graph forward pass over already-inserted parameter nodes, for training.
/// `param_nodes` holds one `(weights, bias)` pair per parameterized layer in
/// network order; produces the logits node.
pub fn forward_on_graph(
    g: &mut Graph,
    spec: &NetworkSpec,
    param_nodes: &[(NodeId, NodeId)],
    batch: NodeId,
) -> Result<NodeId> {
    let mut x = batch;
    let mut params = param_nodes.iter();
    for layer in &spec.layers {
        match layer {
            LayerSpec::Dense { .. } => {
                let &(w, b) = params.next().ok_or_else(|| {
                    Error::Spec("fewer parameter nodes than parameterized layers".into())
                })?;
                // Dense layers operate on N×D; collapse image input lazily.
                if g.shape(x).len() != 2 {
                    x = g.flatten(x)?;
                }
                let h = g.matmul(x, w)?;
                x = g.bias_add_rows(h, b)?;
            }
            LayerSpec::Conv { .. } => {
                let &(w, b) = params.next().ok_or_else(|| {
                    Error::Spec("fewer parameter nodes than parameterized layers".into())
                })?;
                x = g.conv2d(x, w, b)?;
            }
            LayerSpec::MaxPool2x2 => {
                x = g.maxpool2x2(x)?;
            }
            LayerSpec::Flatten => {
                x = g.flatten(x)?;
            }
            LayerSpec::Relu => {
                x = g.relu(x);
            }
        }
    }
    Ok(x)
}

/// Per-sample argmax of the logits; ties break toward the lower class index.
pub fn predict(spec: &NetworkSpec, params: &ParameterSet, batch: &Tensor) -> Result<Vec<usize>> {
    let logits = forward(spec, params, batch)?;
    Ok(argmax_rows(logits.data(), spec.num_classes))
}

/// Row-wise argmax, first maximum wins.
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// The MNIST convolutional network: two 3×3 conv+pool stages and a dense
/// readout (three parameterized layers).
pub fn mnist_cnn_spec() -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec::Conv { in_channels: 1, out_channels: 8, kernel_h: 3, kernel_w: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Conv { in_channels: 8, out_channels: 16, kernel_h: 3, kernel_w: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense { input: 16 * 5 * 5, output: 10 },
        ],
        input_shape: vec![1, 28, 28],
        num_classes: 10,
    }
}

/// The MNIST multilayer perceptron: 784→256→10.
pub fn mnist_mlp_spec() -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec::Flatten,
            LayerSpec::Dense { input: 784, output: 256 },
            LayerSpec::Relu,
            LayerSpec::Dense { input: 256, output: 10 },
        ],
        input_shape: vec![1, 28, 28],
        num_classes: 10,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mnist_specs_validate() {
        mnist_cnn_spec().validate().unwrap();
        mnist_mlp_spec().validate().unwrap();
        assert_eq!(mnist_cnn_spec().input_shape, vec![1, 28, 28]);
        assert_eq!(mnist_cnn_spec().num_classes, 10);
    }

    #[test]
    fn mlp_parameter_count() {
        assert_eq!(mnist_mlp_spec().num_params(), 784 * 256 + 256 + 256 * 10 + 10);
        assert_eq!(mnist_mlp_spec().num_params(), 203_530);
    }

    #[test]
    fn invalid_specs_name_offending_layer() {
        let bad = NetworkSpec {
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { input: 100, output: 10 },
            ],
            input_shape: vec![1, 8, 8],
            num_classes: 10,
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let spec = mnist_mlp_spec();
        let a = init_params(&spec, 7).unwrap();
        let b = init_params(&spec, 7).unwrap();
        let c = init_params(&spec, 8).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn init_shapes_follow_spec() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::Dense { input: 10, output: 5 }],
            input_shape: vec![10],
            num_classes: 5,
        };
        let p = init_params(&spec, 0).unwrap();
        assert_eq!(p.entries[0].weights.shape(), &[10, 5]);
        assert_eq!(p.entries[0].bias.shape(), &[5]);
        assert!(p.entries[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_mean_statistically_centered() {
        // 10k draws from uniform(−a, a): the sample mean should land within
        // 3σ_mean = 3·a/√(3N) of zero.
        let spec = NetworkSpec {
            layers: vec![LayerSpec::Dense { input: 100, output: 100 }],
            input_shape: vec![100],
            num_classes: 100,
        };
        let p = init_params(&spec, 123).unwrap();
        let w = p.entries[0].weights.data();
        assert_eq!(w.len(), 10_000);
        let a = (1.0f64 / 100.0).sqrt();
        let mean: f64 = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        let sigma_mean = a / (3.0 * w.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma_mean, "mean {mean}, 3σ {}", 3.0 * sigma_mean);
        let bound = a as f32;
        assert!(w.iter().all(|&v| -bound <= v && v < bound));
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let spec = mnist_mlp_spec();
        let mut p = init_params(&spec, 1).unwrap();
        for e in &mut p.entries {
            e.weights.data_mut().fill(0.0);
            e.bias.data_mut().fill(0.0);
        }
        let batch = Tensor::filled(vec![3, 1, 28, 28], 0.5);
        let logits = forward(&spec, &p, &batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        let spec = NetworkSpec {
            layers: vec![LayerSpec::Dense { input: 4, output: 4 }],
            input_shape: vec![4],
            num_classes: 4,
        };
        let mut p = init_params(&spec, 0).unwrap();
        p.entries[0].weights.data_mut().fill(0.0);
        for i in 0..4 {
            p.entries[0].weights.data_mut()[i * 4 + i] = 1.0;
        }
        let batch = Tensor::new(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.5, 2.5]).unwrap();
        let logits = forward(&spec, &p, &batch).unwrap();
        assert_eq!(logits.data(), batch.data());
    }

    #[test]
    fn mlp_forward_matches_f64_reference() {
        let spec = NetworkSpec {
            layers: vec![
                LayerSpec::Dense { input: 6, output: 5 },
                LayerSpec::Relu,
                LayerSpec::Dense { input: 5, output: 3 },
            ],
            input_shape: vec![6],
            num_classes: 3,
        };
        let p = init_params(&spec, 99).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xdata: Vec<f32> = (0..2 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::new(vec![2, 6], xdata.clone()).unwrap();
        let logits = forward(&spec, &p, &batch).unwrap();

        // Hand-rolled reference in f64.
        let w1 = p.entries[0].weights.data();
        let b1 = p.entries[0].bias.data();
        let w2 = p.entries[1].weights.data();
        let b2 = p.entries[1].bias.data();
        let mut h = oracle::matmul_ref(&xdata, w1, 2, 6, 5);
        for row in h.chunks_exact_mut(5) {
            for (v, &b) in row.iter_mut().zip(b1) {
                *v = (*v + b as f64).max(0.0);
            }
        }
        let h32: Vec<f32> = h.iter().map(|&v| v as f32).collect();
        let mut o = oracle::matmul_ref(&h32, w2, 2, 5, 3);
        for row in o.chunks_exact_mut(3) {
            for (v, &b) in row.iter_mut().zip(b2) {
                *v += b as f64;
            }
        }
        for (got, want) in logits.data().iter().zip(&o) {
            assert!((*got as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn graph_forward_agrees_with_plain_forward() {
        let spec = mnist_cnn_spec();
        let p = init_params(&spec, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xdata: Vec<f32> = (0..2 * 784).map(|_| rng.gen_range(0.0..1.0)).collect();
        let batch = Tensor::new(vec![2, 1, 28, 28], xdata).unwrap();
        let plain = forward(&spec, &p, &batch).unwrap();

        let mut g = Graph::new();
        let nodes: Vec<(NodeId, NodeId)> = p
            .entries
            .iter()
            .map(|e| (g.leaf(e.weights.clone()), g.leaf(e.bias.clone())))
            .collect();
        let x = g.constant(batch);
        let logits = forward_on_graph(&mut g, &spec, &nodes, x).unwrap();
        assert_eq!(g.data(logits), plain.data());
    }

    #[test]
    fn predict_takes_argmax_with_low_tie_break() {
        assert_eq!(argmax_rows(&[0.1, 0.9, 0.3], 3), vec![1]);
        assert_eq!(argmax_rows(&[0.5, 0.5], 2), vec![0]);
        assert_eq!(argmax_rows(&[1.0, 2.0, 2.0, -1.0], 2), vec![1, 0]);
    }

    #[test]
    fn predict_composes_forward_and_argmax() {
        let spec = mnist_mlp_spec();
        let p = init_params(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xdata: Vec<f32> = (0..4 * 784).map(|_| rng.gen_range(0.0..1.0)).collect();
        let batch = Tensor::new(vec![4, 1, 28, 28], xdata).unwrap();
        let preds = predict(&spec, &p, &batch).unwrap();
        let logits = forward(&spec, &p, &batch).unwrap();
        assert_eq!(preds, argmax_rows(logits.data(), 10));
    }

    #[test]
    fn forward_rejects_wrong_batch_shape() {
        let spec = mnist_mlp_spec();
        let p = init_params(&spec, 3).unwrap();
        let batch = Tensor::zeros(vec![2, 1, 27, 28]);
        assert!(matches!(forward(&spec, &p, &batch), Err(Error::Dim(_))));
    }
}
