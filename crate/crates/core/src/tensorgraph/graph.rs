use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    MaxPoolPoints { input: NodeId, argmax: Vec<usize> },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
    Pick { input: NodeId, index: usize },
    Reshape(NodeId),
    SliceCols { input: NodeId, start: usize },
    GatherRows { input: NodeId, rows: Vec<usize> },
    RowNormalize { input: NodeId, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Below this norm a row is treated as zero by [`Graph::row_normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Append-only record of tensor operations supporting reverse-mode
/// differentiation.
///
/// Nodes are stored in creation order, which is a topological order: an
/// operation can only refer to nodes that already exist. `backward` walks
/// the record once in reverse.
///
/// Gradients accumulate into the `grad` buffer of every leaf created with
/// `requires_grad`. Calling `backward` twice without [`Graph::zero_grad`]
/// adds the second gradient to the first.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. It is differentiated if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Record a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> NodeId {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Argmax rows recorded by a `max_pool_points` node.
    pub fn pool_argmax(&self, id: NodeId) -> Option<&[usize]> {
        match &self.nodes[id.0].op {
            Op::MaxPoolPoints { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op_name: &str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<NodeId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        let tracked = op_inputs(&op).iter().any(|i| self.nodes[i.0].tracked);
        Ok(self.push(Tensor::from_parts_unchecked(shape, data), op, tracked))
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[id.0].value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                left: s.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<Vec<usize>> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    /// `x W + b` for `x: [B, D_in]`, `W: [D_in, D_out]`, `b: [D_out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, d_in) = self.dims2(x, "linear")?;
        let (w_in, d_out) = self.dims2(w, "linear")?;
        if d_in != w_in {
            return Err(Error::Shape {
                op: "linear",
                left: self.value(x).shape().to_vec(),
                right: self.value(w).shape().to_vec(),
            });
        }
        if self.value(b).shape() != [d_out] {
            return Err(Error::Shape {
                op: "linear bias",
                left: self.value(w).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(rows * d_out);
        let bias = self.value(b).data();
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(
            rows,
            d_in,
            d_out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            1.0,
        );
        self.push_op("linear", vec![rows, d_out], out, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.push_op("matmul", vec![m, n], out, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push_op("transpose", vec![c, r], out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        self.push_op("add", shape, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "sub")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        self.push_op("sub", shape, out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        self.push_op("mul", shape, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|v| v * k).collect();
        self.push_op("scale", shape, out, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let out = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.push_op("relu", shape, out, Op::Relu(a))
    }

    /// Per-feature maximum over the rows of `[N, F]`, giving `[F]`.
    ///
    /// Ties resolve to the lowest row index, which is also where the
    /// gradient is routed.
    pub fn max_pool_points(&mut self, input: NodeId) -> Result<NodeId> {
        let t = self.value(input);
        let (n, f) = match t.shape() {
            [n, f] => (*n, *f),
            s => {
                return Err(Error::Shape {
                    op: "max_pool_points",
                    left: s.to_vec(),
                    right: vec![0, 0],
                })
            }
        };
        if n == 0 {
            return Err(Error::EmptyInput("max_pool_points"));
        }
        let d = t.data();
        let mut best = d[..f].to_vec();
        let mut argmax = vec![0usize; f];
        for row in 1..n {
            let r = &d[row * f..(row + 1) * f];
            for j in 0..f {
                if r[j] > best[j] {
                    best[j] = r[j];
                    argmax[j] = row;
                }
            }
        }
        self.push_op("max_pool_points", vec![f], best, Op::MaxPoolPoints { input, argmax })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, c) = self.dims2(logits, "softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::Shape {
                op: "softmax_cross_entropy labels",
                left: vec![b, c],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "softmax_cross_entropy label",
                index: bad,
                len: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let log_sum = sum.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - m).exp() / sum;
            }
            loss += log_sum - (row[labels[i]] - m);
        }
        loss /= b as f64;
        self.push_op(
            "softmax_cross_entropy",
            vec![],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push_op("sum", vec![], vec![s], Op::Sum(a))
    }

    /// Scalar element at flat (row-major) `index`.
    pub fn pick(&mut self, input: NodeId, index: usize) -> Result<NodeId> {
        let d = self.value(input).data();
        if index >= d.len() {
            return Err(Error::Index {
                what: "pick",
                index,
                len: d.len(),
            });
        }
        let v = d[index];
        self.push_op("pick", vec![], vec![v], Op::Pick { input, index })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                left: t.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = t.data().to_vec();
        self.push_op("reshape", shape.to_vec(), data, Op::Reshape(a))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(input, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let d = self.value(input).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        self.push_op("slice_cols", vec![r, len], out, Op::SliceCols { input, start })
    }

    /// Rows selected by `rows` (repeats allowed), in that order.
    pub fn gather_rows(&mut self, input: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims2(input, "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::EmptyInput("gather_rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index {
                what: "gather_rows",
                index: bad,
                len: r,
            });
        }
        let d = self.value(input).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&d[i * c..(i + 1) * c]);
        }
        self.push_op(
            "gather_rows",
            vec![rows.len(), c],
            out,
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
        )
    }

    /// Scale each row to unit Euclidean length. Rows with norm below
    /// [`NORMALIZE_EPS`] map to zero and pass no gradient.
    pub fn row_normalize(&mut self, input: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(input, "row_normalize")?;
        let d = self.value(input).data();
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            if n >= NORMALIZE_EPS {
                for j in 0..c {
                    out[i * c + j] = row[j] / n;
                }
            }
        }
        self.push_op("row_normalize", vec![r, c], out, Op::RowNormalize { input, norms })
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: lt.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(up) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                adj[id] = Some(up);
                continue;
            }
            for (input, g) in self.local_grads(id, &up) {
                if !self.nodes[input.0].tracked {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(g),
                }
            }
        }

        for (id, g) in adj.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[id];
                if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!("gradient of node {id}")));
                    }
                    node.value.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Gradients flowing from node `id` into its inputs given upstream `up`.
    fn local_grads(&self, id: usize, up: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[id];
        let tracked = |n: NodeId| self.nodes[n.0].tracked;
        let val = |n: NodeId| &self.nodes[n.0].value;
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, d_in) = dims(val(*x));
                let d_out = val(*w).shape()[1];
                if tracked(*x) {
                    let mut gx = vec![0.0; rows * d_in];
                    gemm(rows, d_out, d_in, up, false, val(*w).data(), true, &mut gx, 0.0);
                    out.push((*x, gx));
                }
                if tracked(*w) {
                    let mut gw = vec![0.0; d_in * d_out];
                    gemm(d_in, rows, d_out, val(*x).data(), true, up, false, &mut gw, 0.0);
                    out.push((*w, gw));
                }
                if tracked(*b) {
                    let mut gb = vec![0.0; d_out];
                    for r in 0..rows {
                        for j in 0..d_out {
                            gb[j] += up[r * d_out + j];
                        }
                    }
                    out.push((*b, gb));
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = dims(val(*a));
                let n = val(*b).shape()[1];
                if tracked(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, up, false, val(*b).data(), true, &mut ga, 0.0);
                    out.push((*a, ga));
                }
                if tracked(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, val(*a).data(), true, up, false, &mut gb, 0.0);
                    out.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims(val(*a));
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = up[j * r + i];
                    }
                }
                out.push((*a, g));
            }
            Op::Add(a, b) => {
                out.push((*a, up.to_vec()));
                out.push((*b, up.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, up.to_vec()));
                out.push((*b, up.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                if tracked(*a) {
                    out.push((*a, zip_map(up, val(*b).data(), |u, y| u * y)));
                }
                if tracked(*b) {
                    out.push((*b, zip_map(up, val(*a).data(), |u, x| u * x)));
                }
            }
            Op::Scale(a, k) => out.push((*a, up.iter().map(|u| u * k).collect())),
            Op::Relu(a) => out.push((
                *a,
                zip_map(up, val(*a).data(), |u, x| if x > 0.0 { u } else { 0.0 }),
            )),
            Op::MaxPoolPoints { input, argmax } => {
                let (n, f) = dims(val(*input));
                let mut g = vec![0.0; n * f];
                for (j, &row) in argmax.iter().enumerate() {
                    g[row * f + j] += up[j];
                }
                out.push((*input, g));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let (b, c) = dims(val(*logits));
                let scale = up[0] / b as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    g[i * c + l] -= scale;
                }
                out.push((*logits, g));
            }
            Op::Sum(a) => out.push((*a, vec![up[0]; val(*a).numel()])),
            Op::Pick { input, index } => {
                let mut g = vec![0.0; val(*input).numel()];
                g[*index] = up[0];
                out.push((*input, g));
            }
            Op::Reshape(a) => out.push((*a, up.to_vec())),
            Op::SliceCols { input, start } => {
                let (r, c) = dims(val(*input));
                let len = node.value.shape()[1];
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + start + len].copy_from_slice(&up[i * len..(i + 1) * len]);
                }
                out.push((*input, g));
            }
            Op::GatherRows { input, rows } => {
                let (r, c) = dims(val(*input));
                let mut g = vec![0.0; r * c];
                for (k, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        g[i * c + j] += up[k * c + j];
                    }
                }
                out.push((*input, g));
            }
            Op::RowNormalize { input, norms } => {
                let (r, c) = dims(val(*input));
                let u = node.value.data();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let n = norms[i];
                    if n < NORMALIZE_EPS {
                        continue;
                    }
                    let ui = &u[i * c..(i + 1) * c];
                    let gi = &up[i * c..(i + 1) * c];
                    let dot: f64 = ui.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[i * c + j] = (gi[j] - ui[j] * dot) / n;
                    }
                }
                out.push((*input, g));
            }
        }
        out
    }
}

fn op_inputs(op: &Op) -> Vec<NodeId> {
    match op {
        Op::Leaf => vec![],
        Op::Linear { x, w, b } => vec![*x, *w, *b],
        Op::MatMul { a, b } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::Transpose(a) | Op::Scale(a, _) | Op::Relu(a) | Op::Sum(a) | Op::Reshape(a) => vec![*a],
        Op::MaxPoolPoints { input, .. }
        | Op::Pick { input, .. }
        | Op::SliceCols { input, .. }
        | Op::GatherRows { input, .. }
        | Op::RowNormalize { input, .. } => vec![*input],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `c = op(a) op(b) + beta c` with `op(a): m×k`, `op(b): k×n`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers whose
    // lengths are checked against m, k and n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
