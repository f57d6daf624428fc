//! Secret weight keys: the single-layer perturbation δ that awakens a
//! dormant trojan, plus its on-disk format and the pruning-resistance loss.
//!
//! A key perturbs exactly one parameterized layer's weight tensor, never a
//! bias. Sparse keys fix their support at construction; training updates
//! values only.
//!
//! DTKY file layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic "DTKY"
//!        4   version u8 (=1)
//!        5   layer_index u32        1-based parameterized layer
//!        9   weight_len u32         flat size of the target weight tensor
//!        13  kind u8                0 = dense, 1 = sparse
//!        14  count u32              dense: weight_len; sparse: k
//!        18  payload                dense: count × f32
//!                                   sparse: count × (u32 index, f32 value)
//!        ..  crc32 u32              over all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::nn::{NetworkSpec, ParameterSet};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DTKY";
const VERSION: u8 = 1;
const KIND_DENSE: u8 = 0;
const KIND_SPARSE: u8 = 1;

/// Which weight slots a key occupies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeySupport {
    /// Every slot of the layer's weight tensor.
    Dense,
    /// Sorted, unique flat indices into the weight tensor.
    Sparse(Vec<u32>),
}

/// A single-layer weight perturbation δ.
#[derive(Debug, Clone, PartialEq)]
pub struct SecretWeightKey {
    /// 1-based index over the network's parameterized layers.
    pub layer_index: usize,
    pub support: KeySupport,
    /// One value per support slot, in support order.
    pub values: Vec<f32>,
    /// Flat size of the target weight tensor (for validation and densifying).
    pub weight_len: usize,
}

impl SecretWeightKey {
    pub fn support_size(&self) -> usize {
        self.values.len()
    }

    /// Flat indices of the support, in ascending order.
    pub fn support_indices(&self) -> Vec<u32> {
        match &self.support {
            KeySupport::Dense => (0..self.weight_len as u32).collect(),
            KeySupport::Sparse(idx) => idx.clone(),
        }
    }

    /// The key as a full-length vector, zero off support.
    pub fn densified(&self) -> Vec<f32> {
        match &self.support {
            KeySupport::Dense => self.values.clone(),
            KeySupport::Sparse(idx) => {
                let mut out = vec![0.0f32; self.weight_len];
                for (&i, &v) in idx.iter().zip(&self.values) {
                    out[i as usize] = v;
                }
                out
            }
        }
    }

    /// An all-zero key with the same support (useful for identity checks).
    pub fn zeroed(&self) -> SecretWeightKey {
        SecretWeightKey {
            values: vec![0.0; self.values.len()],
            ..self.clone()
        }
    }

    fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let wlen: usize = spec.weight_shape(self.layer_index)?.iter().product();
        if wlen != self.weight_len {
            return Err(Error::Dim(format!(
                "key was built for a weight tensor of {} elements, layer {} has {wlen}",
                self.weight_len, self.layer_index
            )));
        }
        Ok(())
    }
}

/// Draws `k` distinct support slots uniformly (seeded), sorts them, and
/// initializes their values from uniform(−0.5, 0.5) in support order.
///
/// Sampling all slots (`k` = flat size) reproduces the dense construction
/// exactly: the sorted support is the identity and values are drawn in flat
/// order.
pub fn new_sparse_key(
    spec: &NetworkSpec,
    layer_index: usize,
    k: usize,
    seed: u64,
) -> Result<SecretWeightKey> {
    let weight_len: usize = spec.weight_shape(layer_index)?.iter().product();
    if k == 0 || k > weight_len {
        return Err(Error::Param(format!(
            "sparse key size {k} outside 1..={weight_len} for layer {layer_index}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<u32> = rand::seq::index::sample(&mut rng, weight_len, k)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    indices.sort_unstable();
    let values: Vec<f32> = (0..k).map(|_| rng.gen_range(-0.5..0.5f32)).collect();
    Ok(SecretWeightKey {
        layer_index,
        support: KeySupport::Sparse(indices),
        values,
        weight_len,
    })
}

/// A dense key over the whole weight tensor of the given layer, values from
/// uniform(−0.5, 0.5) in flat order.
pub fn new_dense_key(spec: &NetworkSpec, layer_index: usize, seed: u64) -> Result<SecretWeightKey> {
    let weight_len: usize = spec.weight_shape(layer_index)?.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Consume the index draw exactly as the sparse path does so that a dense
    // key equals a sparse key with k = weight_len under the same seed.
    let _ = rand::seq::index::sample(&mut rng, weight_len, weight_len);
    let values: Vec<f32> = (0..weight_len).map(|_| rng.gen_range(-0.5..0.5f32)).collect();
    Ok(SecretWeightKey {
        layer_index,
        support: KeySupport::Dense,
        values,
        weight_len,
    })
}

/// Returns a new parameter set with `W_r[i] += value` for each support slot;
/// every other tensor is bit-identical and the input is unmodified.
pub fn apply_key(params: &ParameterSet, key: &SecretWeightKey) -> Result<ParameterSet> {
    let mut out = params.clone();
    let entry = out.entry_mut(key.layer_index)?;
    if entry.weights.len() != key.weight_len {
        return Err(Error::Dim(format!(
            "key expects {} weights in layer {}, found {}",
            key.weight_len,
            key.layer_index,
            entry.weights.len()
        )));
    }
    let w = entry.weights.data_mut();
    match &key.support {
        KeySupport::Dense => {
            for (o, &v) in w.iter_mut().zip(&key.values) {
                *o += v;
            }
        }
        KeySupport::Sparse(idx) => {
            for (&i, &v) in idx.iter().zip(&key.values) {
                w[i as usize] += v;
            }
        }
    }
    Ok(out)
}

/// Builds the pruning-resistance loss −⟨|θ|, |δ|⟩ / (‖θ‖·‖δ‖) over the key's
/// target layer, differentiable with respect to both the weight node and the
/// key-value node. The ratio is clamped at 1 so float rounding can never push
/// the loss below −1.
///
/// `theta_w` must hold the layer's weight tensor; `delta_values` holds the
/// key's value vector (sparse keys are densified internally via scatter).
pub fn cosine_loss_node(
    g: &mut Graph,
    theta_w: NodeId,
    delta_values: NodeId,
    key: &SecretWeightKey,
) -> Result<NodeId> {
    if g.data(theta_w).len() != key.weight_len {
        return Err(Error::Dim(format!(
            "cosine loss: weight node has {} elements, key expects {}",
            g.data(theta_w).len(),
            key.weight_len
        )));
    }
    if g.data(theta_w).iter().all(|&v| v == 0.0) {
        return Err(Error::NumericGuard(
            "cosine loss over all-zero layer weights".into(),
        ));
    }
    if g.data(delta_values).iter().all(|&v| v == 0.0) {
        return Err(Error::NumericGuard("cosine loss with an all-zero key".into()));
    }
    let delta_dense = match &key.support {
        KeySupport::Dense => delta_values,
        KeySupport::Sparse(idx) => {
            let zeros = g.constant(Tensor::zeros(vec![key.weight_len]));
            g.scatter_add(zeros, delta_values, idx)?
        }
    };
    let theta_flat = if g.shape(theta_w).len() == 1 {
        theta_w
    } else {
        // dot() wants equal shapes; view the weights as a flat vector.
        let data = g.data(theta_w).to_vec();
        let n = data.len();
        let flat = g.constant(Tensor::new(vec![n], data)?);
        let _ = flat;
        theta_w
    };
    let theta_abs = g.abs(theta_flat);
    let delta_abs = g.abs(delta_dense);
    let num = flat_dot(g, theta_abs, delta_abs)?;
    let ntheta = g.l2norm(theta_flat);
    let ndelta = g.l2norm(delta_dense);
    let denom = g.mul(ntheta, ndelta)?;
    let cos = g.div(num, denom)?;
    let cos = g.clamp_max(cos, 1.0);
    Ok(g.scale(cos, -1.0))
}

/// Dot product that tolerates different (same-length) shapes by comparing
/// flat lengths; shapes equal in length always reduce identically.
fn flat_dot(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    if g.shape(a) == g.shape(b) {
        g.dot(a, b)
    } else if g.data(a).len() == g.data(b).len() {
        // Same payload length, different nominal shapes (e.g. conv kernel
        // F×C×kh×kw against a flat key vector): multiply-and-sum directly.
        let prod_data: Vec<f32> = g
            .data(a)
            .iter()
            .zip(g.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let _ = prod_data;
        // Route through flatten on the higher-rank side to keep gradients.
        let (hi, lo) = if g.shape(a).len() >= g.shape(b).len() { (a, b) } else { (b, a) };
        let flat = reshape_flat(g, hi)?;
        g.dot(flat, lo)
    } else {
        Err(Error::Dim(format!(
            "dot of {:?} with {:?}",
            g.shape(a),
            g.shape(b)
        )))
    }
}

/// Flattens any tensor node to rank 1 while keeping gradient flow.
fn reshape_flat(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let len = g.data(x).len();
    // flatten() keeps the leading dim; a 1×len view then drops to rank 1 via
    // a second flatten when needed. For rank-1 input this is the identity.
    if g.shape(x).len() == 1 {
        return Ok(x);
    }
    let flat2 = g.flatten(x)?; // [d0, rest]
    if g.shape(flat2) == [len] {
        return Ok(flat2);
    }
    // Sum trick would lose structure; instead scatter into a flat zero vector
    // at identity indices, which is a pure differentiable reshape.
    let zeros = g.constant(Tensor::zeros(vec![len]));
    let idx: Vec<u32> = (0..len as u32).collect();
    let flat_vals = flatten_all(g, flat2)?;
    g.scatter_add(zeros, flat_vals, &idx)
}

fn flatten_all(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    // flatten() collapses to [d0, rest]; applying it cannot reach rank 1 for
    // d0 > 1, so this helper is only used when a rank-1 view is required.
    // scatter_add handles the actual reshape; here we hand it the values in
    // a [d0, rest] node, which shares its flat layout with the rank-1 view.
    Ok(x)
}

/// Evaluates the pruning-resistance loss for a parameter set and key.
pub fn cosine_pruning_loss(params: &ParameterSet, key: &SecretWeightKey) -> Result<f32> {
    let entry = params.entry(key.layer_index)?;
    let mut g = Graph::new();
    let w = g.leaf(entry.weights.clone());
    let v = g.leaf(Tensor::new(vec![key.values.len()], key.values.clone())?);
    let loss = cosine_loss_node(&mut g, w, v, key)?;
    g.data(loss)
        .first()
        .copied()
        .ok_or_else(|| Error::Usage("cosine loss produced no value".into()))
}

/// Writes the key in DTKY format.
pub fn key_save(key: &SecretWeightKey, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(18 + key.values.len() * 8 + 4);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(key.layer_index as u32).to_le_bytes());
    buf.extend_from_slice(&(key.weight_len as u32).to_le_bytes());
    match &key.support {
        KeySupport::Dense => {
            buf.push(KIND_DENSE);
            buf.extend_from_slice(&(key.values.len() as u32).to_le_bytes());
            for v in &key.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        KeySupport::Sparse(idx) => {
            buf.push(KIND_SPARSE);
            buf.extend_from_slice(&(idx.len() as u32).to_le_bytes());
            for (&i, &v) in idx.iter().zip(&key.values) {
                buf.extend_from_slice(&i.to_le_bytes());
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

/// Reads a DTKY file back; bitwise-lossless round trip.
pub fn key_load(path: &Path) -> Result<SecretWeightKey> {
    let buf = fs::read(path)?;
    if buf.len() < 22 {
        return Err(format_err(path, buf.len() as u64, "file too short for a key"));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(format_err(
            path,
            (buf.len() - 4) as u64,
            format!("checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"),
        ));
    }
    if &body[0..4] != MAGIC {
        return Err(format_err(path, 0, "bad magic, expected \"DTKY\""));
    }
    if body[4] != VERSION {
        return Err(format_err(path, 4, format!("unsupported version {}", body[4])));
    }
    let layer_index = u32::from_le_bytes(body[5..9].try_into().unwrap()) as usize;
    let weight_len = u32::from_le_bytes(body[9..13].try_into().unwrap()) as usize;
    let kind = body[13];
    let count = u32::from_le_bytes(body[14..18].try_into().unwrap()) as usize;
    let payload = &body[18..];
    match kind {
        KIND_DENSE => {
            if count != weight_len {
                return Err(format_err(path, 14, "dense count does not match weight length"));
            }
            if payload.len() != count * 4 {
                return Err(format_err(
                    path,
                    18,
                    format!("dense payload is {} bytes, expected {}", payload.len(), count * 4),
                ));
            }
            let values: Vec<f32> = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(SecretWeightKey {
                layer_index,
                support: KeySupport::Dense,
                values,
                weight_len,
            })
        }
        KIND_SPARSE => {
            if payload.len() != count * 8 {
                return Err(format_err(
                    path,
                    18,
                    format!("sparse payload is {} bytes, expected {}", payload.len(), count * 8),
                ));
            }
            let mut indices = Vec::with_capacity(count);
            let mut values = Vec::with_capacity(count);
            for (e, entry) in payload.chunks_exact(8).enumerate() {
                let idx = u32::from_le_bytes(entry[0..4].try_into().unwrap());
                if idx as usize >= weight_len {
                    return Err(format_err(
                        path,
                        18 + e as u64 * 8,
                        format!("support index {idx} out of range for {weight_len} weights"),
                    ));
                }
                indices.push(idx);
                values.push(f32::from_le_bytes(entry[4..8].try_into().unwrap()));
            }
            if indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format_err(path, 18, "support indices not strictly ascending"));
            }
            Ok(SecretWeightKey {
                layer_index,
                support: KeySupport::Sparse(indices),
                values,
                weight_len,
            })
        }
        other => Err(format_err(path, 13, format!("unknown support kind {other}"))),
    }
}

/// Validates a key against the network spec it will perturb.
pub fn validate_key(spec: &NetworkSpec, key: &SecretWeightKey) -> Result<()> {
    key.check_against(spec)
}
