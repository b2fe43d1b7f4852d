//! Reverse-mode automatic differentiation over an append-only operation list.
//!
//! A [`Graph`] owns every node it creates; node ids are indices into the list,
//! so appending order is already a topological order and the backward sweep is
//! a single reverse pass. Gradients accumulate on nodes until
//! [`Graph::zero_grads`] clears them.

use crate::error::{Error, Result};
use crate::tensor::{idx4, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
struct PoolDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Cross-correlation; `cols` holds the per-sample im2col matrices.
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        dims: ConvDims,
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: NodeId,
        dims: PoolDims,
        /// Input linear index of the winning cell per output cell (ties: lowest).
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool2d {
        input: NodeId,
        dims: PoolDims,
    },
    Relu {
        input: NodeId,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Flatten {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// `[N,F,H,W] + bias[F]` broadcast over batch and spatial dims.
    BroadcastChannelAdd {
        input: NodeId,
        bias: NodeId,
        spatial: usize,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    AddConst {
        input: NodeId,
    },
    Sum {
        input: NodeId,
    },
    Row {
        input: NodeId,
        index: usize,
    },
    SquaredL2 {
        a: NodeId,
        b: NodeId,
    },
    L2NormalizeRows {
        input: NodeId,
        norms: Vec<f64>,
    },
    /// Sum (not mean) of per-row softmax cross-entropy.
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

/// Append-only compute graph for one forward/backward episode.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad: None,
            needs_grad,
        });
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    /// Value of a scalar node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let n = self.node(id);
        if n.value.len() == 1 {
            Ok(n.value[0])
        } else {
            Err(Error::Contract(format!(
                "scalar() on node of shape {:?}",
                n.shape
            )))
        }
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.node(id).grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Copy a tensor into the graph as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Leaf from raw parts, avoiding an intermediate Tensor.
    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.is_empty() {
            return Err(Error::Dimension(format!(
                "leaf shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, shape, data, requires_grad))
    }

    /// Extract a node's value as a standalone tensor.
    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// 2-D cross-correlation of `input [N,C,H,W]` with `kernel [F,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let ishape = self.shape(input);
        let kshape = self.shape(kernel);
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-d input and kernel, got {ishape:?} and {kshape:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (f, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != c {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input has {c}, kernel expects {kc}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let dims = ConvDims {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            oh,
            ow,
            stride,
            padding,
        };
        let ck = c * kh * kw;
        let ohow = oh * ow;
        let x = &self.node(input).value;
        let mut cols = vec![0.0; n * ck * ohow];
        for s in 0..n {
            im2col(
                &x[s * c * h * w..(s + 1) * c * h * w],
                &dims,
                &mut cols[s * ck * ohow..(s + 1) * ck * ohow],
            );
        }
        let kmat = &self.node(kernel).value;
        let mut out = vec![0.0; n * f * ohow];
        for s in 0..n {
            mm_nn(
                kmat,
                &cols[s * ck * ohow..(s + 1) * ck * ohow],
                &mut out[s * f * ohow..(s + 1) * f * ohow],
                f,
                ck,
                ohow,
            );
        }
        let needs = self.node(input).needs_grad || self.node(kernel).needs_grad;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                dims,
                cols,
            },
            vec![n, f, oh, ow],
            out,
            needs,
        ))
    }

    /// Max pooling over square windows; gradient routes to the argmax cell.
    pub fn maxpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let ishape = self.shape(input);
        if ishape.len() != 4 {
            return Err(Error::Dimension(format!(
                "maxpool2d expects 4-d input, got {ishape:?}"
            )));
        }
        if window == 0 || stride == 0 {
            return Err(Error::Dimension(
                "maxpool2d window and stride must be positive".into(),
            ));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        if window > h || window > w {
            return Err(Error::Dimension(format!(
                "maxpool2d window {window} exceeds spatial dims {h}x{w}"
            )));
        }
        let oh = (h - window) / stride + 1;
        let ow = (w - window) / stride + 1;
        let x = &self.node(input).value;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        let mut o = 0;
        for s in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_ix = 0usize;
                        for dy in 0..window {
                            let y = oy * stride + dy;
                            let row = idx4(c, h, w, s, ch, y, ox * stride);
                            for dx in 0..window {
                                let v = x[row + dx];
                                if v > best {
                                    best = v;
                                    best_ix = row + dx;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_ix;
                        o += 1;
                    }
                }
            }
        }
        let needs = self.node(input).needs_grad;
        let dims = PoolDims { n, c, h, w, oh, ow };
        Ok(self.push(
            Op::MaxPool2d {
                input,
                dims,
                argmax,
            },
            vec![n, c, oh, ow],
            out,
            needs,
        ))
    }

    /// Average pooling to a fixed `out x out` grid regardless of input size.
    pub fn adaptive_avg_pool2d(&mut self, input: NodeId, out_hw: usize) -> Result<NodeId> {
        let ishape = self.shape(input);
        if ishape.len() != 4 {
            return Err(Error::Dimension(format!(
                "adaptive_avg_pool2d expects 4-d input, got {ishape:?}"
            )));
        }
        if out_hw == 0 {
            return Err(Error::Dimension(
                "adaptive_avg_pool2d output size must be positive".into(),
            ));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let x = &self.node(input).value;
        let mut out = vec![0.0; n * c * out_hw * out_hw];
        let mut o = 0;
        for s in 0..n {
            for ch in 0..c {
                for oy in 0..out_hw {
                    let (y0, y1) = pool_region(oy, h, out_hw);
                    for ox in 0..out_hw {
                        let (x0, x1) = pool_region(ox, w, out_hw);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let row = idx4(c, h, w, s, ch, y, 0);
                            for xx in x0..x1 {
                                acc += x[row + xx];
                            }
                        }
                        out[o] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                        o += 1;
                    }
                }
            }
        }
        let needs = self.node(input).needs_grad;
        let dims = PoolDims {
            n,
            c,
            h,
            w,
            oh: out_hw,
            ow: out_hw,
        };
        Ok(self.push(
            Op::AdaptiveAvgPool2d { input, dims },
            vec![n, c, out_hw, out_hw],
            out,
            needs,
        ))
    }

    /// Elementwise max(0, x); the subgradient at 0 is 0.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value: Vec<f64> = self.node(input).value.iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.node(input).needs_grad;
        self.push(Op::Relu { input }, shape, value, needs)
    }

    /// `input [N,Din] @ weight[Dout,Din]^T + bias[Dout]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input);
        let wshape = self.shape(weight);
        let bshape = self.shape(bias);
        if ishape.len() != 2 || wshape.len() != 2 || bshape.len() != 1 {
            return Err(Error::Dimension(format!(
                "linear expects input [N,Din], weight [Dout,Din], bias [Dout]; got {ishape:?}, {wshape:?}, {bshape:?}"
            )));
        }
        let (n, din) = (ishape[0], ishape[1]);
        let (dout, wdin) = (wshape[0], wshape[1]);
        if wdin != din || bshape[0] != dout {
            return Err(Error::Dimension(format!(
                "linear dims disagree: input Din={din}, weight {dout}x{wdin}, bias {}",
                bshape[0]
            )));
        }
        let x = &self.node(input).value;
        let wmat = &self.node(weight).value;
        let b = &self.node(bias).value;
        let mut out = vec![0.0; n * dout];
        mm_nt(x, wmat, &mut out, n, din, dout);
        for row in out.chunks_exact_mut(dout) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let needs = self.node(input).needs_grad
            || self.node(weight).needs_grad
            || self.node(bias).needs_grad;
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            vec![n, dout],
            out,
            needs,
        ))
    }

    /// Collapse all dimensions after the first: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input);
        if ishape.len() < 2 {
            return Err(Error::Dimension(format!(
                "flatten expects at least 2 dims, got {ishape:?}"
            )));
        }
        let n = ishape[0];
        let rest: usize = ishape[1..].iter().product();
        let value = self.node(input).value.clone();
        let needs = self.node(input).needs_grad;
        Ok(self.push(Op::Flatten { input }, vec![n, rest], value, needs))
    }

    /// Elementwise sum of two same-shape nodes (no broadcasting).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let value: Vec<f64> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Op::Add { a, b }, shape, value, needs))
    }

    /// Add a `[F]` bias across the channel dimension of a `[N,F,H,W]` node.
    pub fn broadcast_channel_add(
        &mut self,
        input: NodeId,
        bias: NodeId,
        n: usize,
        f: usize,
        spatial: usize,
    ) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 || ishape[0] != n || ishape[1] != f
            || ishape[2] * ishape[3] != spatial
        {
            return Err(Error::Dimension(format!(
                "broadcast_channel_add: activation {ishape:?} does not match n={n}, f={f}, spatial={spatial}"
            )));
        }
        if self.shape(bias) != [f] {
            return Err(Error::Dimension(format!(
                "broadcast_channel_add: bias {:?} does not fit {f} channels",
                self.shape(bias)
            )));
        }
        let b = self.node(bias).value.clone();
        let mut value = self.node(input).value.clone();
        for sample in value.chunks_exact_mut(f * spatial) {
            for (ch, bv) in sample.chunks_exact_mut(spatial).zip(&b) {
                for v in ch {
                    *v += bv;
                }
            }
        }
        let needs = self.node(input).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(
            Op::BroadcastChannelAdd {
                input,
                bias,
                spatial,
            },
            ishape,
            value,
            needs,
        ))
    }

    /// Elementwise difference of two same-shape nodes.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let value: Vec<f64> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Op::Sub { a, b }, shape, value, needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value: Vec<f64> = self.node(input).value.iter().map(|v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.node(input).needs_grad;
        self.push(Op::Scale { input, factor }, shape, value, needs)
    }

    pub fn add_const(&mut self, input: NodeId, offset: f64) -> NodeId {
        let value: Vec<f64> = self.node(input).value.iter().map(|v| v + offset).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.node(input).needs_grad;
        self.push(Op::AddConst { input }, shape, value, needs)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: f64 = self.node(input).value.iter().sum();
        let needs = self.node(input).needs_grad;
        self.push(Op::Sum { input }, vec![1], vec![total], needs)
    }

    /// Select one row of a `[N,D]` node as a `[D]` vector.
    pub fn row(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let ishape = self.shape(input);
        if ishape.len() != 2 {
            return Err(Error::Dimension(format!(
                "row expects a 2-d node, got {ishape:?}"
            )));
        }
        let (n, d) = (ishape[0], ishape[1]);
        if index >= n {
            return Err(Error::Index(format!(
                "row index {index} out of range for {n} rows"
            )));
        }
        let value = self.node(input).value[index * d..(index + 1) * d].to_vec();
        let needs = self.node(input).needs_grad;
        Ok(self.push(Op::Row { input, index }, vec![d], value, needs))
    }

    /// Squared euclidean distance between two same-shape nodes, as a scalar.
    pub fn squared_l2_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "squared_l2_distance")?;
        let d: f64 = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(Op::SquaredL2 { a, b }, vec![1], vec![d], needs))
    }

    /// Project each row of a `[N,D]` node onto the unit sphere.
    /// Rows with near-zero norm pass through as zeros.
    pub fn l2_normalize_rows(&mut self, input: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input);
        if ishape.len() != 2 {
            return Err(Error::Dimension(format!(
                "l2_normalize_rows expects a 2-d node, got {ishape:?}"
            )));
        }
        let (n, d) = (ishape[0], ishape[1]);
        let x = &self.node(input).value;
        let mut norms = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = norm;
            if norm > 1e-12 {
                for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let needs = self.node(input).needs_grad;
        Ok(self.push(
            Op::L2NormalizeRows { input, norms },
            vec![n, d],
            out,
            needs,
        ))
    }

    /// Summed softmax cross-entropy of `logits [N,C]` against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let ishape = self.shape(logits);
        if ishape.len() != 2 {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy expects logits [N,C], got {ishape:?}"
            )));
        }
        let (n, c) = (ishape[0], ishape[1]);
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Label(format!(
                "target class {bad} out of range for {c} classes"
            )));
        }
        let x = &self.node(logits).value;
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for r in 0..n {
            let row = &x[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - m).exp();
                z += *p;
            }
            for p in probs[r * c..(r + 1) * c].iter_mut() {
                *p /= z;
            }
            total += m + z.ln() - row[targets[r]];
        }
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![total],
            needs,
        ))
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what} shape mismatch: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Each call adds ∂loss/∂node into
    /// the persistent per-node gradients; call [`Graph::zero_grads`] between
    /// independent passes if accumulation is not wanted.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        // Per-call buffers: mixing them with grads left by an earlier call
        // would re-propagate stale upstream gradients.
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let upstream = match g[id].take() {
                Some(u) => u,
                None => continue,
            };
            self.backward_op(id, &upstream, &mut g);
            // Keep the per-node accumulated gradient.
            let node = &mut self.nodes[id];
            if node.needs_grad {
                match &mut node.grad {
                    Some(acc) => {
                        for (a, u) in acc.iter_mut().zip(&upstream) {
                            *a += u;
                        }
                    }
                    None => node.grad = Some(upstream),
                }
            }
        }
        Ok(())
    }

    fn backward_op(&self, id: usize, upstream: &[f64], g: &mut [Option<Vec<f64>>]) {
        let add_into = |g: &mut [Option<Vec<f64>>], target: NodeId, len: usize| -> &mut Vec<f64> {
            g[target.0].get_or_insert_with(|| vec![0.0; len])
        };
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                dims,
                cols,
            } => {
                let ck = dims.c * dims.kh * dims.kw;
                let ohow = dims.oh * dims.ow;
                let kmat = &self.nodes[kernel.0].value;
                if self.nodes[kernel.0].needs_grad {
                    let dk = add_into(g, *kernel, dims.f * ck);
                    for s in 0..dims.n {
                        mm_nt(
                            &upstream[s * dims.f * ohow..(s + 1) * dims.f * ohow],
                            &cols[s * ck * ohow..(s + 1) * ck * ohow],
                            dk,
                            dims.f,
                            ohow,
                            ck,
                        );
                    }
                }
                if self.nodes[input.0].needs_grad {
                    let mut dcols = vec![0.0; ck * ohow];
                    let dx = add_into(g, *input, dims.n * dims.c * dims.h * dims.w);
                    for s in 0..dims.n {
                        dcols.fill(0.0);
                        mm_tn(
                            kmat,
                            &upstream[s * dims.f * ohow..(s + 1) * dims.f * ohow],
                            &mut dcols,
                            ck,
                            dims.f,
                            ohow,
                        );
                        col2im(
                            &dcols,
                            dims,
                            &mut dx[s * dims.c * dims.h * dims.w
                                ..(s + 1) * dims.c * dims.h * dims.w],
                        );
                    }
                }
            }
            Op::MaxPool2d { input, dims, argmax } => {
                if self.nodes[input.0].needs_grad {
                    let dx = add_into(g, *input, dims.n * dims.c * dims.h * dims.w);
                    for (u, &ix) in upstream.iter().zip(argmax) {
                        dx[ix] += u;
                    }
                }
            }
            Op::AdaptiveAvgPool2d { input, dims } => {
                if self.nodes[input.0].needs_grad {
                    let dx = add_into(g, *input, dims.n * dims.c * dims.h * dims.w);
                    let mut o = 0;
                    for s in 0..dims.n {
                        for ch in 0..dims.c {
                            for oy in 0..dims.oh {
                                let (y0, y1) = pool_region(oy, dims.h, dims.oh);
                                for ox in 0..dims.ow {
                                    let (x0, x1) = pool_region(ox, dims.w, dims.ow);
                                    let share =
                                        upstream[o] / ((y1 - y0) * (x1 - x0)) as f64;
                                    for y in y0..y1 {
                                        let row = idx4(dims.c, dims.h, dims.w, s, ch, y, 0);
                                        for xx in x0..x1 {
                                            dx[row + xx] += share;
                                        }
                                    }
                                    o += 1;
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { input } => {
                if self.nodes[input.0].needs_grad {
                    let dx = add_into(g, *input, node.value.len());
                    for ((d, u), y) in dx.iter_mut().zip(upstream).zip(&node.value) {
                        if *y > 0.0 {
                            *d += u;
                        }
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let ishape = &self.nodes[input.0].shape;
                let (n, din) = (ishape[0], ishape[1]);
                let dout = self.nodes[weight.0].shape[0];
                if self.nodes[input.0].needs_grad {
                    let w = &self.nodes[weight.0].value;
                    let dx = add_into(g, *input, n * din);
                    mm_nn(upstream, w, dx, n, dout, din);
                }
                if self.nodes[weight.0].needs_grad {
                    let x = &self.nodes[input.0].value;
                    let dw = add_into(g, *weight, dout * din);
                    mm_tn(upstream, x, dw, dout, n, din);
                }
                if self.nodes[bias.0].needs_grad {
                    let db = add_into(g, *bias, dout);
                    for row in upstream.chunks_exact(dout) {
                        for (d, u) in db.iter_mut().zip(row) {
                            *d += u;
                        }
                    }
                }
            }
            Op::Flatten { input } | Op::AddConst { input } => {
                if self.nodes[input.0].needs_grad {
                    let dx = add_into(g, *input, upstream.len());
                    for (d, u) in dx.iter_mut().zip(upstream) {
                        *d += u;
                    }
                }
            }
            Op::Add { a, b } => {
                for side in [a, b] {
                    if self.nodes[side.0].needs_grad {
                        let dx = add_into(g, *side, upstream.len());
                        for (d, u) in dx.iter_mut().zip(upstream) {
                            *d += u;
                        }
                    }
                }
            }
            Op::BroadcastChannelAdd {
                input,
                bias,
                spatial,
            } => {
                if self.nodes[input.0].needs_grad {
                    let dx = add_into(g, *input, upstream.len());
                    for (d, u) in dx.iter_mut().zip(upstream) {
                        *d += u;
                    }
                }
                if self.nodes[bias.0].needs_grad {
                    let f = self.nodes[bias.0].value.len();
                    let db = add_into(g, *bias, f);
                    for sample in upstream.chunks_exact(f * spatial) {
                        for (dbv, ch) in db.iter_mut().zip(sample.chunks_exact(*spatial)) {
                            *dbv += ch.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let dx = add_into(g, *a, upstream.len());
                    for (d, u) in dx.iter_mut().zip(upstream) {
                        *d += u;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let dx = add_into(g, *b, upstream.len());
                    for (d, u) in dx.iter_mut().zip(upstream) {
                        *d -= u;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.nodes[input.0].needs_grad {
                    let dx = add_into(g, *input, upstream.len());
                    for (d, u) in dx.iter_mut().zip(upstream) {
                        *d += factor * u;
                    }
                }
            }
            Op::Sum { input } => {
                if self.nodes[input.0].needs_grad {
                    let len = self.nodes[input.0].value.len();
                    let dx = add_into(g, *input, len);
                    for d in dx.iter_mut() {
                        *d += upstream[0];
                    }
                }
            }
            Op::Row { input, index } => {
                if self.nodes[input.0].needs_grad {
                    let d = node.value.len();
                    let len = self.nodes[input.0].value.len();
                    let dx = add_into(g, *input, len);
                    for (dd, u) in dx[index * d..(index + 1) * d].iter_mut().zip(upstream) {
                        *dd += u;
                    }
                }
            }
            Op::SquaredL2 { a, b } => {
                let u = upstream[0];
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.nodes[a.0].needs_grad {
                    let dx = add_into(g, *a, av.len());
                    for ((d, x), y) in dx.iter_mut().zip(av).zip(bv) {
                        *d += 2.0 * (x - y) * u;
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let dx = add_into(g, *b, bv.len());
                    for ((d, x), y) in dx.iter_mut().zip(av).zip(bv) {
                        *d -= 2.0 * (x - y) * u;
                    }
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                if self.nodes[input.0].needs_grad {
                    let d = node.shape[1];
                    let dx = add_into(g, *input, norms.len() * d);
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm <= 1e-12 {
                            continue;
                        }
                        let y = &node.value[r * d..(r + 1) * d];
                        let u = &upstream[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                        for ((dd, uu), yy) in
                            dx[r * d..(r + 1) * d].iter_mut().zip(u).zip(y)
                        {
                            *dd += (uu - dot * yy) / norm;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.nodes[logits.0].needs_grad {
                    let u = upstream[0];
                    let c = self.nodes[logits.0].shape[1];
                    let dx = add_into(g, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for (j, (d, p)) in dx[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&probs[r * c..(r + 1) * c])
                            .enumerate()
                        {
                            *d += u * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
        }
    }

    /// Hash of every branch decision (relu signs, maxpool argmaxes) taken in
    /// this graph's forward pass. Two evaluations on the same smooth piece of
    /// the function share a fingerprint; a finite-difference probe that
    /// crosses a kink does not.
    pub fn decision_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(0x100000001b3);
        };
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu { .. } => {
                    eat(i as u64);
                    let mut word = 0u64;
                    for (j, v) in node.value.iter().enumerate() {
                        if *v > 0.0 {
                            word |= 1 << (j & 63);
                        }
                        if j & 63 == 63 {
                            eat(word);
                            word = 0;
                        }
                    }
                    eat(word);
                }
                Op::MaxPool2d { argmax, .. } => {
                    eat(i as u64);
                    for &a in argmax {
                        eat(a as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }
}

// Region [start, end) is never empty: (i+1)*len/out strictly exceeds
// floor(i*len/out) for len, out >= 1.
fn pool_region(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let ohow = d.oh * d.ow;
    let mut r = 0;
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let dst = &mut cols[r * ohow..(r + 1) * ohow];
                let mut o = 0;
                for oy in 0..d.oh {
                    let y = (oy * d.stride + ki) as isize - d.padding as isize;
                    if y < 0 || y >= d.h as isize {
                        o += d.ow;
                        continue;
                    }
                    let base = (c * d.h + y as usize) * d.w;
                    for ox in 0..d.ow {
                        let xx = (ox * d.stride + kj) as isize - d.padding as isize;
                        if xx >= 0 && xx < d.w as isize {
                            dst[o] = x[base + xx as usize];
                        }
                        o += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im(dcols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let ohow = d.oh * d.ow;
    let mut r = 0;
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let src = &dcols[r * ohow..(r + 1) * ohow];
                let mut o = 0;
                for oy in 0..d.oh {
                    let y = (oy * d.stride + ki) as isize - d.padding as isize;
                    if y < 0 || y >= d.h as isize {
                        o += d.ow;
                        continue;
                    }
                    let base = (c * d.h + y as usize) * d.w;
                    for ox in 0..d.ow {
                        let xx = (ox * d.stride + kj) as isize - d.padding as isize;
                        if xx >= 0 && xx < d.w as isize {
                            dx[base + xx as usize] += src[o];
                        }
                        o += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// `c += a @ b` with `a: m x k`, `b: k x n`.
pub(crate) fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a @ b^T` with `a: m x k`, `b: n x k`.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// `c += a^T @ b` with `a: k x m`, `b: k x n`.
pub(crate) fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        g.leaf(&Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let k = leaf(&mut g, vec![1, 1, 1, 1], vec![1.0]);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv2d_scalar_kernel_doubles() {
        // 1x1x3x3 ones, 1x1 kernel [[2]] -> 3x3 twos
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 3, 3], vec![1.0; 9]);
        let k = leaf(&mut g, vec![1, 1, 1, 1], vec![2.0]);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.value(y), &[2.0; 9]);
    }

    #[test]
    fn conv2d_diagonal_kernel() {
        // [[1,2],[3,4]] * [[1,0],[0,1]] -> [5]  (1*1 + 4*1)
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let k = leaf(&mut g, vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y), &[5.0]);
    }

    #[test]
    fn conv2d_zero_kernel_annihilates() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 2, 4, 4], (0..32).map(f64::from).collect());
        let k = leaf(&mut g, vec![3, 2, 3, 3], vec![0.0; 54]);
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_channel_mismatch_errors() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 2, 3, 3], vec![1.0; 18]);
        let k = leaf(&mut g, vec![1, 3, 2, 2], vec![1.0; 12]);
        assert!(matches!(
            g.conv2d(x, k, 1, 0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn conv2d_output_shape_formula() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 3, 11, 11], vec![0.5; 2 * 3 * 121]);
        let k = leaf(&mut g, vec![4, 3, 3, 3], vec![0.1; 4 * 27]);
        let y = g.conv2d(x, k, 2, 1).unwrap();
        // (11 + 2 - 3)/2 + 1 = 6
        assert_eq!(g.shape(y), &[2, 4, 6, 6]);
    }

    #[test]
    fn maxpool_basic_and_derived() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y), &[4.0]);

        // [[5,1,1],[1,1,1],[1,1,5]] window 2 stride 1 -> [[5,1],[1,5]]
        let mut g = Graph::new();
        let x = leaf(
            &mut g,
            vec![1, 1, 3, 3],
            vec![5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0],
        );
        let y = g.maxpool2d(x, 2, 1).unwrap();
        assert_eq!(g.value(y), &[5.0, 1.0, 1.0, 5.0]);
    }

    #[test]
    fn maxpool_tie_routes_to_first_cell() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 2, 2], vec![7.0; 4]);
        let y = g.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y), &[7.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_window_too_large_errors() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 2, 2], vec![0.0; 4]);
        assert!(matches!(g.maxpool2d(x, 3, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        // subgradient at 0 is 0
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn linear_matches_hand_computation() {
        // input [1,2], weight [[3,4]], bias [1] -> [1*3 + 2*4 + 1] = [12]
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 2], vec![1.0, 2.0]);
        let w = leaf(&mut g, vec![1, 2], vec![3.0, 4.0]);
        let b = leaf(&mut g, vec![1], vec![1.0]);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), &[12.0]);
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 2], vec![3.0, -1.0, 0.5, 2.0]);
        let w = leaf(&mut g, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut g, vec![2], vec![0.0, 0.0]);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 3], vec![0.0; 6]);
        let w = leaf(&mut g, vec![2, 3], vec![0.3; 6]);
        let b = leaf(&mut g, vec![2], vec![5.0, -2.0]);
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y), &[5.0, -2.0, 5.0, -2.0]);
    }

    #[test]
    fn linear_dimension_mismatch_errors() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 3], vec![0.0; 3]);
        let w = leaf(&mut g, vec![2, 2], vec![0.0; 4]);
        let b = leaf(&mut g, vec![2], vec![0.0; 2]);
        assert!(matches!(g.linear(x, w, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn squared_l2_basics() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2], vec![0.0, 0.0]);
        let b = leaf(&mut g, vec![2], vec![3.0, 4.0]);
        let d = g.squared_l2_distance(a, b).unwrap();
        assert_eq!(g.scalar(d).unwrap(), 25.0);

        let d2 = g.squared_l2_distance(a, a).unwrap();
        assert_eq!(g.scalar(d2).unwrap(), 0.0);

        let c = leaf(&mut g, vec![3], vec![0.0; 3]);
        assert!(g.squared_l2_distance(a, c).is_err());
    }

    #[test]
    fn squared_l2_gradient_is_2x_for_zero_target() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![1.0, -2.0, 0.5]);
        let zero = g.leaf(&Tensor::zeros(vec![3]));
        let d = g.squared_l2_distance(x, zero).unwrap();
        g.backward(d).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 3], vec![0.3; 6]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_linearly() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = g.scale(x, 3.0);
        let s = g.sum(y);
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        let second = g.grad(x).unwrap().to_vec();
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(*b, 2.0 * a);
        }
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn adaptive_pool_averages_regions() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 4, 4], (0..16).map(f64::from).collect());
        let y = g.adaptive_avg_pool2d(x, 2).unwrap();
        // quadrant means of 0..15 row-major
        assert_eq!(g.value(y), &[2.5, 4.5, 10.5, 12.5]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 16]);
    }

    #[test]
    fn adaptive_pool_upsamples_degenerate_input() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 1, 1, 1], vec![3.0]);
        let y = g.adaptive_avg_pool2d(x, 2).unwrap();
        assert_eq!(g.value(y), &[3.0; 4]);
    }

    #[test]
    fn row_selects_and_routes_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = g.row(x, 1).unwrap();
        assert_eq!(g.value(r), &[3.0, 4.0]);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(g.row(x, 3).is_err());
    }

    #[test]
    fn softmax_cross_entropy_uniform_is_ln_c() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 4], vec![0.0; 8]);
        let l = g.softmax_cross_entropy(x, &[1, 3]).unwrap();
        let per_row = g.scalar(l).unwrap() / 2.0;
        assert!((per_row - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_rejects_bad_target() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 3], vec![0.0; 3]);
        assert!(matches!(
            g.softmax_cross_entropy(x, &[3]),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn l2_normalize_rows_unit_norm() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]);
        let y = g.l2_normalize_rows(x).unwrap();
        assert_eq!(g.value(y), &[0.6, 0.8, 0.0, 0.0]);
    }

    #[test]
    fn fingerprint_changes_when_relu_flips() {
        let mut g1 = Graph::new();
        let x1 = leaf(&mut g1, vec![2], vec![0.5, -0.5]);
        let _ = g1.relu(x1);
        let mut g2 = Graph::new();
        let x2 = leaf(&mut g2, vec![2], vec![0.5, 0.5]);
        let _ = g2.relu(x2);
        assert_ne!(g1.decision_fingerprint(), g2.decision_fingerprint());

        let mut g3 = Graph::new();
        let x3 = leaf(&mut g3, vec![2], vec![0.4, -0.6]);
        let _ = g3.relu(x3);
        assert_eq!(g1.decision_fingerprint(), g3.decision_fingerprint());
    }
}
