//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Operations execute immediately and record themselves as nodes of a
//! [`Graph`]; [`Graph::backward`] then replays the records in exact reverse
//! construction order, accumulating gradients into every node built from a
//! gradient-requiring leaf. A graph is confined to one thread; independent
//! graphs may run concurrently.
//!
//! Subgradient conventions: `relu'(0) = 0` and `d|x|/dx = 0` at the kink.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Abs { x: NodeId },
    MaxPool2x2 { x: NodeId, argmax: Vec<u32> },
    Flatten { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: f32 },
    ClampMax { x: NodeId, limit: f32 },
    Sum { x: NodeId },
    Dot { a: NodeId, b: NodeId },
    L2Norm { x: NodeId },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f32> },
    BiasAddRows { x: NodeId, bias: NodeId },
    ScatterAdd { base: NodeId, values: NodeId, indices: Vec<u32> },
    Stamp { x: NodeId, mask: NodeId, pattern: NodeId },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// An append-only record of tensor operations supporting one or more
/// backward passes. Gradients accumulate across backward calls until
/// [`Graph::zero_grads`] resets them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Inserts an input tensor. Its `requires_grad` flag decides whether the
    /// backward pass produces a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        self.push(tensor, Op::Leaf)
    }

    /// Inserts an input tensor that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.requires_grad = false;
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    /// Drops all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { tensor, op });
        NodeId(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, requires: bool) -> NodeId {
        let mut t = Tensor::new(shape, data).expect("internal shape bookkeeping");
        t.requires_grad = requires;
        self.push(t, op)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    /// a\[m×k\] · b\[k×n\].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!(
                "matmul of {sa:?} by {sb:?}: inner dimensions must agree"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0f32; m * n];
        kernels::matmul_nn(self.data(a), self.data(b), m, k, n, &mut out);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_derived(vec![m, n], out, Op::Matmul { a, b }, req))
    }

    /// Valid cross-correlation, stride 1: input N×C×H×W with kernel F×C×kh×kw
    /// plus bias F.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d wants 4-d input and kernel, got {si:?} and {sk:?}"
            )));
        }
        let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, kc, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != c {
            return Err(Error::Dim(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {kc}"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::Dim(format!(
                "conv2d kernel {kh}×{kw} larger than input {h}×{w}"
            )));
        }
        if sb != [f] {
            return Err(Error::Dim(format!(
                "conv2d bias shape {sb:?} does not match {f} filters"
            )));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![0.0f32; n * f * oh * ow];
        kernels::conv2d_fwd(
            self.data(input),
            self.data(kernel),
            self.data(bias),
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            &mut out,
        );
        let req = self.requires(input) || self.requires(kernel) || self.requires(bias);
        Ok(self.push_derived(
            vec![n, f, oh, ow],
            out,
            Op::Conv2d { input, kernel, bias },
            req,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push_derived(shape, data, Op::Relu { x }, req)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push_derived(shape, data, Op::Sigmoid { x }, req)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let data: Vec<f32> = self.data(x).iter().map(|&v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push_derived(shape, data, Op::Abs { x }, req)
    }

    /// 2×2 max pool, stride 2, on N×C×H×W.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Dim(format!("maxpool2x2 wants N×C×H×W with H,W ≥ 2, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (out, argmax) = kernels::maxpool2x2_fwd(self.data(x), n, c, h, w);
        let req = self.requires(x);
        Ok(self.push_derived(
            vec![n, c, h / 2, w / 2],
            out,
            Op::MaxPool2x2 { x, argmax },
            req,
        ))
    }

    /// Collapses all but the leading (batch) dimension.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Dim(format!("flatten wants rank ≥ 2, got {s:?}")));
        }
        let rest: usize = s[1..].iter().product();
        let data = self.data(x).to_vec();
        let req = self.requires(x);
        Ok(self.push_derived(vec![s[0], rest], data, Op::Flatten { x }, req))
    }

    fn elementwise_shapes(&self, a: NodeId, b: NodeId, op: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (la, lb) = (self.data(a).len(), self.data(b).len());
        // Equal shapes, or a single-element tensor broadcast against the other.
        if sa == sb {
            Ok(sa.to_vec())
        } else if la == 1 {
            Ok(sb.to_vec())
        } else if lb == 1 {
            Ok(sa.to_vec())
        } else {
            Err(Error::Dim(format!("{op} of {sa:?} with {sb:?}")))
        }
    }

    fn broadcast_pair(&self, a: NodeId, b: NodeId, out_len: usize) -> Vec<(f32, f32)> {
        let da = self.data(a);
        let db = self.data(b);
        (0..out_len)
            .map(|i| {
                let x = da[if da.len() == 1 { 0 } else { i }];
                let y = db[if db.len() == 1 { 0 } else { i }];
                (x, y)
            })
            .collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise_shapes(a, b, "add")?;
        let n: usize = shape.iter().product();
        let pairs = self.broadcast_pair(a, b, n);
        let data: Vec<f32> = pairs.iter().map(|(x, y)| x + y).collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_derived(shape, data, Op::Add { a, b }, req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise_shapes(a, b, "mul")?;
        let n: usize = shape.iter().product();
        let pairs = self.broadcast_pair(a, b, n);
        let data: Vec<f32> = pairs.iter().map(|(x, y)| x * y).collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_derived(shape, data, Op::Mul { a, b }, req))
    }

    /// Elementwise division; refuses zero denominators outright.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.elementwise_shapes(a, b, "div")?;
        if self.data(b).iter().any(|&v| v == 0.0) {
            return Err(Error::NumericGuard("division by zero".into()));
        }
        let n: usize = shape.iter().product();
        let pairs = self.broadcast_pair(a, b, n);
        let data: Vec<f32> = pairs.iter().map(|(x, y)| x / y).collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_derived(shape, data, Op::Div { a, b }, req))
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        let data: Vec<f32> = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push_derived(shape, data, Op::Scale { x, factor }, req)
    }

    /// min(x, limit) elementwise; gradient is zero where the limit binds.
    pub fn clamp_max(&mut self, x: NodeId, limit: f32) -> NodeId {
        let data: Vec<f32> = self.data(x).iter().map(|&v| v.min(limit)).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push_derived(shape, data, Op::ClampMax { x, limit }, req)
    }

    /// Left-to-right sum of all elements; scalar result.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = 0.0f32;
        for &v in self.data(x) {
            acc += v;
        }
        let req = self.requires(x);
        self.push_derived(vec![1], vec![acc], Op::Sum { x }, req)
    }

    /// Inner product of two equally shaped tensors; scalar result.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "dot of {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut acc = 0.0f32;
        for (x, y) in self.data(a).iter().zip(self.data(b)) {
            acc += x * y;
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push_derived(vec![1], vec![acc], Op::Dot { a, b }, req))
    }

    /// Euclidean norm; scalar result. Gradient at the origin is zero.
    pub fn l2norm(&mut self, x: NodeId) -> NodeId {
        let mut acc = 0.0f32;
        for &v in self.data(x) {
            acc += v * v;
        }
        let req = self.requires(x);
        self.push_derived(vec![1], vec![acc.sqrt()], Op::L2Norm { x }, req)
    }

    /// Mean of −log softmax(logits)\[label\] over the batch, stabilized by
    /// max subtraction so saturated logits cannot overflow.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::Dim(format!("softmax_cross_entropy wants N×n logits, got {s:?}")));
        }
        let (n, classes) = (s[0], s[1]);
        if labels.len() != n {
            return Err(Error::Dim(format!(
                "{n} logit rows but {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let (loss, probs) = kernels::softmax_ce_fwd(self.data(logits), labels, n, classes);
        let req = self.requires(logits);
        Ok(self.push_derived(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            req,
        ))
    }

    /// Adds a length-F bias vector to every row of an N×F matrix.
    pub fn bias_add_rows(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if s.len() != 2 || sb.len() != 1 || sb[0] != s[1] {
            return Err(Error::Dim(format!("bias_add_rows of {s:?} with {sb:?}")));
        }
        let (n, f) = (s[0], s[1]);
        let db = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_exact_mut(f) {
            for (o, &b) in row.iter_mut().zip(&db) {
                *o += b;
            }
        }
        let req = self.requires(x) || self.requires(bias);
        let _ = n;
        Ok(self.push_derived(s, data, Op::BiasAddRows { x, bias }, req))
    }

    /// out = base with `values[i]` added at flat position `indices[i]`.
    /// Indices must be unique and in bounds; this is how a weight key enters
    /// the graph differentiably.
    pub fn scatter_add(&mut self, base: NodeId, values: NodeId, indices: &[u32]) -> Result<NodeId> {
        let base_len = self.data(base).len();
        if self.data(values).len() != indices.len() {
            return Err(Error::Dim(format!(
                "scatter_add: {} values for {} indices",
                self.data(values).len(),
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= base_len) {
            return Err(Error::Index(format!(
                "scatter_add index {bad} out of range for {base_len} elements"
            )));
        }
        debug_assert!(
            {
                let mut seen = indices.to_vec();
                seen.sort_unstable();
                seen.windows(2).all(|w| w[0] != w[1])
            },
            "scatter_add indices must be unique"
        );
        let mut data = self.data(base).to_vec();
        let vals = self.data(values).to_vec();
        for (&i, &v) in indices.iter().zip(&vals) {
            data[i as usize] += v;
        }
        let shape = self.shape(base).to_vec();
        let req = self.requires(base) || self.requires(values);
        Ok(self.push_derived(
            shape,
            data,
            Op::ScatterAdd {
                base,
                values,
                indices: indices.to_vec(),
            },
            req,
        ))
    }

    /// Blends a trigger overlay into a batch: out = (1−m)⊙x + m⊙p with
    /// x: N×C×H×W, mask m: H×W (shared across channels), pattern p: C×H×W.
    /// Stays in \[0,1\] whenever all three inputs do.
    pub fn stamp(&mut self, x: NodeId, mask: NodeId, pattern: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sm = self.shape(mask).to_vec();
        let sp = self.shape(pattern).to_vec();
        if sx.len() != 4 || sm.len() != 2 || sp.len() != 3 {
            return Err(Error::Dim(format!(
                "stamp wants x N×C×H×W, mask H×W, pattern C×H×W; got {sx:?}, {sm:?}, {sp:?}"
            )));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if sm != [h, w] || sp != [c, h, w] {
            return Err(Error::Dim(format!(
                "stamp shape mismatch: x {sx:?}, mask {sm:?}, pattern {sp:?}"
            )));
        }
        let xd = self.data(x);
        let md = self.data(mask);
        let pd = self.data(pattern);
        let mut out = vec![0.0f32; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let xo = (ni * c + ci) * h * w;
                let po = ci * h * w;
                for k in 0..h * w {
                    let m = md[k];
                    out[xo + k] = (1.0 - m) * xd[xo + k] + m * pd[po + k];
                }
            }
        }
        let req = self.requires(x) || self.requires(mask) || self.requires(pattern);
        Ok(self.push_derived(sx, out, Op::Stamp { x, mask, pattern }, req))
    }

    /// Accumulates ∂root/∂node into every gradient-requiring node reachable
    /// from `root`, visiting records in exact reverse construction order.
    /// Calling backward again without [`Graph::zero_grads`] accumulates.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Usage("backward root is not part of this graph".into()));
        }
        if self.nodes[root.0].tensor.len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].tensor.shape()
            )));
        }
        if !self.nodes[root.0].tensor.requires_grad {
            return Ok(()); // nothing upstream wants a gradient
        }
        // Propagate through pass-local buffers so each call adds exactly
        // ∂root/∂node once, no matter how many passes ran before.
        let mut scratch: Vec<Option<Vec<f32>>> = Vec::new();
        scratch.resize_with(root.0 + 1, || None);
        scratch[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            for (id, contrib) in self.input_grads(i, &g) {
                match &mut scratch[id.0] {
                    Some(buf) => {
                        for (o, c) in buf.iter_mut().zip(contrib) {
                            *o += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
            let t = &mut self.nodes[i].tensor;
            let acc = t.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (o, c) in acc.iter_mut().zip(g) {
                *o += c;
            }
        }
        Ok(())
    }

    /// Computes the gradient contribution of node `i` to each of its
    /// gradient-requiring inputs, given the upstream gradient `g`.
    fn input_grads(&self, i: usize, g: &[f32]) -> Vec<(NodeId, Vec<f32>)> {
        let node = &self.nodes[i];
        let mut out: Vec<(NodeId, Vec<f32>)> = Vec::new();
        let req = |id: NodeId| self.nodes[id.0].tensor.requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if req(*a) {
                    let mut da = vec![0.0f32; m * k];
                    kernels::matmul_nt(g, self.data(*b), m, n, k, &mut da);
                    out.push((*a, da));
                }
                if req(*b) {
                    let mut db = vec![0.0f32; k * n];
                    kernels::matmul_tn(self.data(*a), g, k, m, n, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Conv2d { input, kernel, bias } => {
                let si = self.shape(*input);
                let sk = self.shape(*kernel);
                let (n, c, h, w) = (si[0], si[1], si[2], si[3]);
                let (f, kh, kw) = (sk[0], sk[2], sk[3]);
                let (dinput, dkernel, dbias) = kernels::conv2d_bwd(
                    self.data(*input),
                    self.data(*kernel),
                    g,
                    n,
                    c,
                    h,
                    w,
                    f,
                    kh,
                    kw,
                    req(*input),
                );
                if let Some(di) = dinput {
                    out.push((*input, di));
                }
                if req(*kernel) {
                    out.push((*kernel, dkernel));
                }
                if req(*bias) {
                    out.push((*bias, dbias));
                }
            }
            Op::Relu { x } => {
                if req(*x) {
                    let dx: Vec<f32> = self
                        .data(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Sigmoid { x } => {
                if req(*x) {
                    let dx: Vec<f32> = node
                        .tensor
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&s, &gv)| gv * s * (1.0 - s))
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Abs { x } => {
                if req(*x) {
                    let dx: Vec<f32> = self
                        .data(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            if v > 0.0 {
                                gv
                            } else if v < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                if req(*x) {
                    let mut dx = vec![0.0f32; self.data(*x).len()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src as usize] += gv;
                    }
                    out.push((*x, dx));
                }
            }
            Op::Flatten { x } => {
                if req(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    if req(id) {
                        out.push((id, reduce_to(self.data(id).len(), g)));
                    }
                }
            }
            Op::Mul { a, b } => {
                let (da_len, db_len) = (self.data(*a).len(), self.data(*b).len());
                if req(*a) {
                    let other = self.data(*b);
                    let prod: Vec<f32> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * other[if db_len == 1 { 0 } else { i }])
                        .collect();
                    out.push((*a, reduce_to(da_len, &prod)));
                }
                if req(*b) {
                    let other = self.data(*a);
                    let prod: Vec<f32> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * other[if da_len == 1 { 0 } else { i }])
                        .collect();
                    out.push((*b, reduce_to(db_len, &prod)));
                }
            }
            Op::Div { a, b } => {
                let (da_len, db_len) = (self.data(*a).len(), self.data(*b).len());
                let ad = self.data(*a);
                let bd = self.data(*b);
                if req(*a) {
                    let prod: Vec<f32> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv / bd[if db_len == 1 { 0 } else { i }])
                        .collect();
                    out.push((*a, reduce_to(da_len, &prod)));
                }
                if req(*b) {
                    let prod: Vec<f32> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let av = ad[if da_len == 1 { 0 } else { i }];
                            let bv = bd[if db_len == 1 { 0 } else { i }];
                            -gv * av / (bv * bv)
                        })
                        .collect();
                    out.push((*b, reduce_to(db_len, &prod)));
                }
            }
            Op::Scale { x, factor } => {
                if req(*x) {
                    out.push((*x, g.iter().map(|&gv| gv * factor).collect()));
                }
            }
            Op::ClampMax { x, limit } => {
                if req(*x) {
                    let dx: Vec<f32> = self
                        .data(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v < *limit { gv } else { 0.0 })
                        .collect();
                    out.push((*x, dx));
                }
            }
            Op::Sum { x } => {
                if req(*x) {
                    out.push((*x, vec![g[0]; self.data(*x).len()]));
                }
            }
            Op::Dot { a, b } => {
                if req(*a) {
                    out.push((*a, self.data(*b).iter().map(|&v| g[0] * v).collect()));
                }
                if req(*b) {
                    out.push((*b, self.data(*a).iter().map(|&v| g[0] * v).collect()));
                }
            }
            Op::L2Norm { x } => {
                if req(*x) {
                    let norm = node.tensor.data()[0];
                    let dx = if norm == 0.0 {
                        vec![0.0; self.data(*x).len()]
                    } else {
                        self.data(*x).iter().map(|&v| g[0] * v / norm).collect()
                    };
                    out.push((*x, dx));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if req(*logits) {
                    let n = labels.len();
                    let classes = probs.len() / n;
                    let scale = g[0] / n as f32;
                    let mut dl = probs.iter().map(|&p| p * scale).collect::<Vec<f32>>();
                    for (i, &y) in labels.iter().enumerate() {
                        dl[i * classes + y] -= scale;
                    }
                    out.push((*logits, dl));
                }
            }
            Op::BiasAddRows { x, bias } => {
                if req(*x) {
                    out.push((*x, g.to_vec()));
                }
                if req(*bias) {
                    let f = self.data(*bias).len();
                    let mut db = vec![0.0f32; f];
                    for row in g.chunks_exact(f) {
                        for (o, &gv) in db.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::ScatterAdd { base, values, indices } => {
                if req(*base) {
                    out.push((*base, g.to_vec()));
                }
                if req(*values) {
                    out.push((*values, indices.iter().map(|&i| g[i as usize]).collect()));
                }
            }
            Op::Stamp { x, mask, pattern } => {
                let sx = self.shape(*x);
                let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
                let xd = self.data(*x);
                let md = self.data(*mask);
                let pd = self.data(*pattern);
                if req(*mask) {
                    let mut dm = vec![0.0f32; hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let xo = (ni * c + ci) * hw;
                            let po = ci * hw;
                            for k in 0..hw {
                                dm[k] += g[xo + k] * (pd[po + k] - xd[xo + k]);
                            }
                        }
                    }
                    out.push((*mask, dm));
                }
                if req(*pattern) {
                    let mut dp = vec![0.0f32; c * hw];
                    for ni in 0..n {
                        for ci in 0..c {
                            let xo = (ni * c + ci) * hw;
                            let po = ci * hw;
                            for k in 0..hw {
                                dp[po + k] += g[xo + k] * md[k];
                            }
                        }
                    }
                    out.push((*pattern, dp));
                }
                if req(*x) {
                    let mut dx = vec![0.0f32; xd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let xo = (ni * c + ci) * hw;
                            for k in 0..hw {
                                dx[xo + k] = g[xo + k] * (1.0 - md[k]);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
        }
        out
    }
}

/// Sums a full-size gradient down to a broadcast scalar when needed.
fn reduce_to(target_len: usize, g: &[f32]) -> Vec<f32> {
    if target_len == g.len() {
        g.to_vec()
    } else {
        debug_assert_eq!(target_len, 1);
        let mut acc = 0.0f32;
        for &v in g {
            acc += v;
        }
        vec![acc]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let i = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_product() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[1, 2], &[1.0, 2.0]));
        let b = g.leaf(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_vec(&mut rng, 4 * 5, -1.0, 1.0);
        let b = random_vec(&mut rng, 5 * 3, -1.0, 1.0);
        let expect = oracle::matmul_ref(&a, &b, 4, 5, 3);
        let mut g = Graph::new();
        let an = g.leaf(t(&[4, 5], &a));
        let bn = g.leaf(t(&[5, 3], &b));
        let c = g.matmul(an, bn).unwrap();
        for (got, want) in g.data(c).iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![2, 3]));
        let b = g.leaf(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn conv2d_scalar_kernel_doubles() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let k = g.leaf(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.leaf(t(&[1], &[0.0]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        assert!(g.data(y).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_zero_input_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kdata = random_vec(&mut rng, 2 * 1 * 2 * 2, -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 1, 4, 4]));
        let k = g.leaf(t(&[2, 1, 2, 2], &kdata));
        let b = g.leaf(t(&[2], &[0.7, -0.2]));
        let y = g.conv2d(x, k, b).unwrap();
        let d = g.data(y);
        assert!(d[..9].iter().all(|&v| v == 0.7));
        assert!(d[9..].iter().all(|&v| v == -0.2));
    }

    #[test]
    fn conv2d_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_vec(&mut rng, 25, -1.0, 1.0);
        let k = random_vec(&mut rng, 9, -1.0, 1.0);
        let b = vec![0.3f32];
        let expect = oracle::conv2d_ref(&x, &k, &b, 1, 1, 5, 5, 1, 3, 3);
        let mut g = Graph::new();
        let xn = g.leaf(t(&[1, 1, 5, 5], &x));
        let kn = g.leaf(t(&[1, 1, 3, 3], &k));
        let bn = g.leaf(t(&[1], &b));
        let y = g.conv2d(xn, kn, bn).unwrap();
        for (got, want) in g.data(y).iter().zip(&expect) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_kernel_too_large_errors() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![1, 1, 2, 2]));
        let k = g.leaf(Tensor::zeros(vec![1, 1, 3, 3]));
        let b = g.leaf(Tensor::zeros(vec![1]));
        assert!(matches!(g.conv2d(x, k, b), Err(Error::Dim(_))));
    }

    #[test]
    fn relu_sign_cases() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn l2norm_three_four_five() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[3.0, 4.0]));
        let n = g.l2norm(x);
        assert_eq!(g.data(n), &[5.0]);
    }

    #[test]
    fn dot_squares_to_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = random_vec(&mut rng, 40, -2.0, 2.0);
        let mut g = Graph::new();
        let x = g.leaf(t(&[40], &data));
        let d = g.dot(x, x).unwrap();
        let n = g.l2norm(x);
        let lhs = g.data(d)[0] as f64;
        let rhs = (g.data(n)[0] as f64).powi(2);
        assert!((lhs - rhs).abs() / rhs.max(1.0) < 1e-5);
    }

    #[test]
    fn elementwise_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(vec![3]));
        let b = g.leaf(Tensor::zeros(vec![4]));
        assert!(matches!(g.add(a, b), Err(Error::Dim(_))));
        assert!(matches!(g.mul(a, b), Err(Error::Dim(_))));
    }

    #[test]
    fn scalar_broadcast_add_mul() {
        let mut g = Graph::new();
        let a = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = g.leaf(Tensor::scalar(2.0));
        let sum = g.add(a, s).unwrap();
        assert_eq!(g.data(sum), &[3.0, 4.0, 5.0]);
        let prod = g.mul(s, a).unwrap();
        assert_eq!(g.data(prod), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn div_by_zero_guarded() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1.0));
        let b = g.leaf(Tensor::scalar(0.0));
        assert!(matches!(g.div(a, b), Err(Error::NumericGuard(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let l = g.leaf(t(&[1, 2], &[0.0, 0.0]));
        let ce = g.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((g.data(ce)[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_saturated_is_stable() {
        let mut g = Graph::new();
        let l = g.leaf(t(&[1, 2], &[1000.0, 0.0]));
        let ce = g.softmax_cross_entropy(l, &[0]).unwrap();
        let v = g.data(ce)[0];
        assert!(v.is_finite() && v.abs() < 1e-6, "loss {v}");
    }

    #[test]
    fn cross_entropy_matches_f64_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits = random_vec(&mut rng, 12, -3.0, 3.0);
        let labels = [1usize, 3, 0];
        let expect = oracle::softmax_ce_ref(&logits, &labels, 3, 4);
        let mut g = Graph::new();
        let l = g.leaf(t(&[3, 4], &logits));
        let ce = g.softmax_cross_entropy(l, &labels).unwrap();
        assert!((g.data(ce)[0] as f64 - expect).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            g.softmax_cross_entropy(l, &[3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(vec![2, 3], 1.5).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_quadratic_form() {
        let mut g = Graph::new();
        let data = [0.5f32, -2.0, 3.0];
        let x = g.leaf(t(&[3], &data).with_grad());
        let d = g.dot(x, x).unwrap();
        g.backward(d).unwrap();
        let grad = g.grad(x).unwrap();
        for (gv, xv) in grad.iter().zip(&data) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn backward_non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    /// Builds a small MLP loss over a concatenated parameter vector
    /// [w1 | b1 | w2] so finite differences can probe >100 coordinates.
    fn composite_loss(params: &[f32]) -> (f32, Vec<f32>) {
        let (w1, rest) = params.split_at(6 * 12);
        let (b1, w2) = rest.split_at(12);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let xdata: Vec<f32> = (0..4 * 6).map(|_| rng.gen_range(0.2..1.2)).collect();
        let labels = [0usize, 2, 1, 2];
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 6], xdata).unwrap());
        let w1n = g.leaf(Tensor::new(vec![6, 12], w1.to_vec()).unwrap().with_grad());
        let b1n = g.leaf(Tensor::new(vec![12], b1.to_vec()).unwrap().with_grad());
        let w2n = g.leaf(Tensor::new(vec![12, 3], w2.to_vec()).unwrap().with_grad());
        let h = g.matmul(x, w1n).unwrap();
        let h = g.bias_add_rows(h, b1n).unwrap();
        let h = g.relu(h);
        let logits = g.matmul(h, w2n).unwrap();
        let loss = g.softmax_cross_entropy(logits, &labels).unwrap();
        g.backward(loss).unwrap();
        let mut grad = Vec::new();
        grad.extend_from_slice(g.grad(w1n).unwrap());
        grad.extend_from_slice(g.grad(b1n).unwrap());
        grad.extend_from_slice(g.grad(w2n).unwrap());
        (g.data(loss)[0], grad)
    }

    #[test]
    fn composite_loss_passes_finite_difference_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 6 * 12 + 12 + 12 * 3;
        let params = random_vec(&mut rng, n, -0.6, 0.6);
        let (_, analytic) = composite_loss(&params);
        let coords: Vec<usize> = (0..n).collect();
        assert!(coords.len() >= 100);
        let err = oracle::finite_diff_max_err(
            &mut |p| composite_loss(p).0,
            &params,
            &analytic,
            &coords,
            1e-3,
        );
        assert!(err < 1e-4, "worst relative error {err}");
    }

    #[test]
    fn conv_pipeline_passes_finite_difference_check() {
        // conv -> relu -> maxpool -> flatten -> CE, probing kernel and bias.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xdata = random_vec(&mut rng, 2 * 1 * 6 * 6, 0.1, 1.0);
        let n_params = 2 * 1 * 3 * 3 + 2;
        let params = random_vec(&mut rng, n_params, -0.7, 0.7);
        let mut eval = |p: &[f32]| -> (f32, Vec<f32>) {
            let (k, b) = p.split_at(2 * 9);
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![2, 1, 6, 6], xdata.clone()).unwrap());
            let kn = g.leaf(Tensor::new(vec![2, 1, 3, 3], k.to_vec()).unwrap().with_grad());
            let bn = g.leaf(Tensor::new(vec![2], b.to_vec()).unwrap().with_grad());
            let y = g.conv2d(x, kn, bn).unwrap();
            let y = g.relu(y);
            let y = g.maxpool2x2(y).unwrap();
            let y = g.flatten(y).unwrap();
            let loss = g.softmax_cross_entropy(y, &[1, 3]).unwrap();
            g.backward(loss).unwrap();
            let mut grad = Vec::new();
            grad.extend_from_slice(g.grad(kn).unwrap());
            grad.extend_from_slice(g.grad(bn).unwrap());
            (g.data(loss)[0], grad)
        };
        let (_, analytic) = eval(&params);
        let coords: Vec<usize> = (0..n_params).collect();
        let err = oracle::finite_diff_max_err(
            &mut |p| eval(p).0,
            &params,
            &analytic,
            &coords,
            1e-3,
        );
        assert!(err < 1e-4, "worst relative error {err}");
    }

    #[test]
    fn scatter_add_forward_and_gradient() {
        let mut g = Graph::new();
        let base = g.leaf(t(&[2, 3], &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).with_grad());
        let vals = g.leaf(t(&[2], &[0.5, -2.0]).with_grad());
        let out = g.scatter_add(base, vals, &[1, 4]).unwrap();
        assert_eq!(g.data(out), &[1.0, 1.5, 1.0, 1.0, -1.0, 1.0]);
        let s = g.sum(out);
        let weights = g.leaf(t(&[1], &[1.0]));
        let _ = weights;
        g.backward(s).unwrap();
        assert_eq!(g.grad(base).unwrap(), &[1.0; 6]);
        assert_eq!(g.grad(vals).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn scatter_add_bounds_checked() {
        let mut g = Graph::new();
        let base = g.leaf(Tensor::zeros(vec![4]));
        let vals = g.leaf(Tensor::zeros(vec![1]));
        assert!(matches!(
            g.scatter_add(base, vals, &[4]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn stamp_blend_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_vec(&mut rng, 2 * 1 * 4 * 4, 0.0, 1.0);
        let m = random_vec(&mut rng, 16, 0.0, 1.0);
        let p = random_vec(&mut rng, 16, 0.0, 1.0);
        let mut g = Graph::new();
        let xn = g.leaf(t(&[2, 1, 4, 4], &x));
        let mn = g.leaf(t(&[4, 4], &m));
        let pn = g.leaf(t(&[1, 4, 4], &p));
        let out = g.stamp(xn, mn, pn).unwrap();
        for (i, &v) in g.data(out).iter().enumerate() {
            let k = i % 16;
            let want = (1.0 - m[k]) * x[i] + m[k] * p[k];
            assert!((v - want).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&v), "stamp left [0,1]: {v}");
        }
    }

    #[test]
    fn stamp_gradients_pass_finite_difference() {
        // The detection objective shape: stamp -> classifier -> CE + reg·sum(mask).
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let x = random_vec(&mut rng, 3 * 1 * 4 * 4, 0.05, 0.95);
        let wdata = random_vec(&mut rng, 16 * 4, -0.8, 0.8);
        let n_params = 16 + 16;
        let params = random_vec(&mut rng, n_params, -1.0, 1.0);
        let mut eval = |p: &[f32]| -> (f32, Vec<f32>) {
            let (wm, wp) = p.split_at(16);
            let mut g = Graph::new();
            let xn = g.constant(Tensor::new(vec![3, 1, 4, 4], x.clone()).unwrap());
            let w = g.constant(Tensor::new(vec![16, 4], wdata.clone()).unwrap());
            let wmn = g.leaf(Tensor::new(vec![4, 4], wm.to_vec()).unwrap().with_grad());
            let wpn = g.leaf(Tensor::new(vec![1, 4, 4], wp.to_vec()).unwrap().with_grad());
            let m = g.sigmoid(wmn);
            let pat = g.sigmoid(wpn);
            let stamped = g.stamp(xn, m, pat).unwrap();
            let flat = g.flatten(stamped).unwrap();
            let logits = g.matmul(flat, w).unwrap();
            let ce = g.softmax_cross_entropy(logits, &[2, 2, 2]).unwrap();
            let msum = g.sum(m);
            let reg = g.scale(msum, 0.01);
            let obj = g.add(ce, reg).unwrap();
            g.backward(obj).unwrap();
            let mut grad = Vec::new();
            grad.extend_from_slice(g.grad(wmn).unwrap());
            grad.extend_from_slice(g.grad(wpn).unwrap());
            (g.data(obj)[0], grad)
        };
        let (_, analytic) = eval(&params);
        let coords: Vec<usize> = (0..n_params).collect();
        // Wider step: saturated sigmoid coordinates have tiny true gradients,
        // so the f32 forward noise dominates at ε=1e-3.
        let err = oracle::finite_diff_max_err(&mut |p| eval(p).0, &params, &analytic, &coords, 1e-2);
        assert!(err < 1e-4, "worst relative error {err}");
    }

    #[test]
    fn maxpool_takes_block_maxima() {
        let mut g = Graph::new();
        #[rustfmt::skip]
        let x = g.leaf(t(&[1, 1, 4, 4], &[
            1.0, 2.0, 0.0, 0.0,
            3.0, 4.0, 0.0, 5.0,
            0.0, 0.0, 7.0, 6.0,
            0.0, 8.0, 6.5, 6.0,
        ]).with_grad());
        let y = g.maxpool2x2(x).unwrap();
        assert_eq!(g.data(y), &[4.0, 5.0, 8.0, 7.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad.iter().filter(|&&v| v == 1.0).count(), 4);
        assert_eq!(grad[5], 1.0); // the 4.0
        assert_eq!(grad[10], 1.0); // the 7.0
    }

    #[test]
    fn odd_extents_pool_with_floor() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::filled(vec![1, 1, 5, 5], 1.0));
        let y = g.maxpool2x2(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    }

    #[test]
    fn clamp_max_cuts_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[0.5, 2.0]).with_grad());
        let y = g.clamp_max(x, 1.0);
        assert_eq!(g.data(y), &[0.5, 1.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn identical_runs_are_bitwise_identical() {
        let run = || -> Vec<u32> {
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            let a = random_vec(&mut rng, 6 * 7, -1.0, 1.0);
            let b = random_vec(&mut rng, 7 * 5, -1.0, 1.0);
            let mut g = Graph::new();
            let an = g.leaf(Tensor::new(vec![6, 7], a).unwrap().with_grad());
            let bn = g.leaf(Tensor::new(vec![7, 5], b).unwrap());
            let c = g.matmul(an, bn).unwrap();
            let r = g.relu(c);
            let s = g.sum(r);
            g.backward(s).unwrap();
            g.data(c)
                .iter()
                .chain(g.grad(an).unwrap())
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn forward_ops_stay_finite_on_finite_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let big = random_vec(&mut rng, 8, -500.0, 500.0);
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 4], &big));
        let ce = g.softmax_cross_entropy(x, &[0, 3]).unwrap();
        let r = g.relu(x);
        let a = g.abs(r);
        let n = g.l2norm(a);
        let sg = g.sigmoid(x);
        for id in [ce, n, sg] {
            assert!(g.value(id).is_finite());
        }
    }
}
