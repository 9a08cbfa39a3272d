use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub pad: usize,
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Conv2dAttrs { stride: 1, pad: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pool2dAttrs {
    pub size: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchNormMode<T: Scalar = f32> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Inference { mean: Vec<T>, var: Vec<T> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormAttrs<T: Scalar = f32> {
    pub mode: BatchNormMode<T>,
    pub eps: T,
}

/// Operation selector for [`Graph::forward_op`].
///
/// Input conventions (all image tensors are NHWC):
///
/// | kind | inputs |
/// |---|---|
/// | `Add` | `a`, `b` with `b.shape == a.shape` or `b.shape == a.shape[1..]` |
/// | `Mul` | `a`, `b` of equal shape |
/// | `MatMul` | `a: [m, k]`, `b: [k, n]` |
/// | `Conv2d` | `x: [n, h, w, cin]`, `w: [kh, kw, cin, cout]`, optional `b: [cout]` |
/// | `Relu`, `Flatten`, `Sum`, `MaxPool2d` | `x` |
/// | `BatchNorm` | `x: [.., c]`, `gamma: [c]`, `beta: [c]` |
/// | `SoftmaxCrossEntropy` | `logits: [n, classes]` |
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind<T: Scalar = f32> {
    Add,
    Mul,
    MatMul,
    Conv2d(Conv2dAttrs),
    Relu,
    MaxPool2d(Pool2dAttrs),
    BatchNorm(BatchNormAttrs<T>),
    Flatten,
    Sum,
    /// Fused softmax and mean cross-entropy over the batch.
    SoftmaxCrossEntropy { labels: Vec<usize> },
}

impl<T: Scalar> OpKind<T> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d(_) => "conv2d",
            OpKind::Relu => "relu",
            OpKind::MaxPool2d(_) => "maxpool2d",
            OpKind::BatchNorm(_) => "batchnorm",
            OpKind::Flatten => "flatten",
            OpKind::Sum => "sum",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
enum Saved<T: Scalar> {
    Nothing,
    Conv(ConvGeom),
    Argmax(Vec<usize>),
    Norm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
        train: bool,
    },
    Probs(Vec<T>),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    kind: Option<OpKind<T>>,
    inputs: Vec<NodeId>,
    tracked: bool,
    saved: Saved<T>,
}

/// Append-only define-by-run computation record.
///
/// Leaves are added with [`Graph::leaf`]; each op appends a node whose
/// inputs precede it, so insertion order is a topological order.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let tracked = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            kind: None,
            inputs: Vec::new(),
            tracked,
            saved: Saved::Nothing,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad()
    }

    /// Moves the value (with any populated grad) out, leaving an empty slot.
    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        let slot = &mut self.nodes[id.0];
        std::mem::replace(&mut slot.value, Tensor::scalar(T::zero()))
    }

    /// Whether the node participates in gradient propagation.
    pub fn is_tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    pub fn kind(&self, id: NodeId) -> Option<&OpKind<T>> {
        self.nodes[id.0].kind.as_ref()
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id.0].inputs
    }

    /// Batch mean and biased variance computed by a train-mode batchnorm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].saved {
            Saved::Norm {
                batch_mean,
                batch_var,
                train: true,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// Softmax probabilities computed by a softmax-cross-entropy node.
    pub fn probabilities(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].saved {
            Saved::Probs(p) => Some(p),
            _ => None,
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        attrs: Conv2dAttrs,
    ) -> Result<NodeId> {
        match bias {
            Some(b) => self.forward_op(OpKind::Conv2d(attrs), &[x, weight, b]),
            None => self.forward_op(OpKind::Conv2d(attrs), &[x, weight]),
        }
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Relu, &[x])
    }

    pub fn maxpool2d(&mut self, x: NodeId, attrs: Pool2dAttrs) -> Result<NodeId> {
        self.forward_op(OpKind::MaxPool2d(attrs), &[x])
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        attrs: BatchNormAttrs<T>,
    ) -> Result<NodeId> {
        self.forward_op(OpKind::BatchNorm(attrs), &[x, gamma, beta])
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Flatten, &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward_op(OpKind::Sum, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.forward_op(
            OpKind::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Evaluates `kind` on `inputs` and appends the result.
    pub fn forward_op(&mut self, kind: OpKind<T>, inputs: &[NodeId]) -> Result<NodeId> {
        let op = kind.name();
        let arity_ok = match &kind {
            OpKind::Add | OpKind::Mul | OpKind::MatMul => inputs.len() == 2,
            OpKind::Conv2d(_) => inputs.len() == 2 || inputs.len() == 3,
            OpKind::BatchNorm(_) => inputs.len() == 3,
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::contract(op, format!("wrong number of inputs: {}", inputs.len())));
        }
        for &id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::contract(op, format!("unknown node {}", id.0)));
            }
            if let Some(i) = self.nodes[id.0].value.first_non_finite() {
                return Err(Error::Numeric {
                    op,
                    detail: format!("input node {} element {i}", id.0),
                });
            }
        }
        let tracked = inputs.iter().any(|id| self.nodes[id.0].tracked);
        let (value, saved) = self.eval(&kind, inputs, tracked)?;
        self.nodes.push(Node {
            value,
            kind: Some(kind),
            inputs: inputs.to_vec(),
            tracked,
            saved,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn eval(&self, kind: &OpKind<T>, inputs: &[NodeId], tracked: bool) -> Result<(Tensor<T>, Saved<T>)> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let op = kind.name();
        match kind {
            OpKind::Add => {
                let (a, b) = (v(0), v(1));
                if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
                    Ok((Tensor::new(a.shape().to_vec(), data)?, Saved::Nothing))
                } else if a.rank() >= 2 && &a.shape()[1..] == b.shape() {
                    let mut data = Vec::with_capacity(a.numel());
                    for row in a.data().chunks(b.numel()) {
                        data.extend(row.iter().zip(b.data()).map(|(&x, &y)| x + y));
                    }
                    Ok((Tensor::new(a.shape().to_vec(), data)?, Saved::Nothing))
                } else {
                    Err(Error::shape(op, a.shape(), b.shape()))
                }
            }
            OpKind::Mul => {
                let (a, b) = (v(0), v(1));
                if a.shape() != b.shape() {
                    return Err(Error::shape(op, a.shape(), b.shape()));
                }
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
                Ok((Tensor::new(a.shape().to_vec(), data)?, Saved::Nothing))
            }
            OpKind::MatMul => {
                let (a, b) = (v(0), v(1));
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Error::shape(op, a.shape(), b.shape()));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut c = vec![T::zero(); m * n];
                kernels::gemm_acc(m, k, n, a.data(), b.data(), &mut c);
                Ok((Tensor::new(vec![m, n], c)?, Saved::Nothing))
            }
            OpKind::Conv2d(attrs) => {
                let (x, w) = (v(0), v(1));
                let geom = conv_geom(x.shape(), w.shape(), *attrs)?;
                let bias = if inputs.len() == 3 {
                    let b = v(2);
                    if b.shape() != [geom.cout] {
                        return Err(Error::shape(op, &[geom.cout], b.shape()));
                    }
                    Some(b.data())
                } else {
                    None
                };
                let n = x.shape()[0];
                let out = kernels::conv2d_forward(&geom, n, x.data(), w.data(), bias);
                Ok((
                    Tensor::new(vec![n, geom.ho, geom.wo, geom.cout], out)?,
                    Saved::Conv(geom),
                ))
            }
            OpKind::Relu => {
                let x = v(0);
                Ok((x.map(|e| if e > T::zero() { e } else { T::zero() }), Saved::Nothing))
            }
            OpKind::MaxPool2d(attrs) => {
                let x = v(0);
                if x.rank() != 4
                    || attrs.size == 0
                    || attrs.stride == 0
                    || x.shape()[1] < attrs.size
                    || x.shape()[2] < attrs.size
                {
                    return Err(Error::shape(op, &[0, attrs.size, attrs.size, 0], x.shape()));
                }
                let (out, arg, shape) = kernels::maxpool_forward(x.shape(), x.data(), attrs.size, attrs.stride);
                let saved = if tracked { Saved::Argmax(arg) } else { Saved::Nothing };
                Ok((Tensor::new(shape.to_vec(), out)?, saved))
            }
            OpKind::BatchNorm(attrs) => {
                let (x, gamma, beta) = (v(0), v(1), v(2));
                if x.rank() < 2 {
                    return Err(Error::shape(op, &[0, 0], x.shape()));
                }
                let c = *x.shape().last().expect("rank >= 2");
                if gamma.shape() != [c] || beta.shape() != [c] {
                    return Err(Error::shape(op, &[c], gamma.shape()));
                }
                let (mean, var, train) = match &attrs.mode {
                    BatchNormMode::Train => {
                        if x.numel() / c < 2 {
                            return Err(Error::contract(op, "train mode needs at least 2 values per channel"));
                        }
                        let (m, v) = kernels::channel_moments(x.data(), c);
                        (m, v, true)
                    }
                    BatchNormMode::Inference { mean, var } => {
                        if mean.len() != c || var.len() != c {
                            return Err(Error::shape(op, &[c], &[mean.len()]));
                        }
                        (mean.clone(), var.clone(), false)
                    }
                };
                let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + attrs.eps).sqrt()).collect();
                let mut xhat = Vec::with_capacity(x.numel());
                let mut out = Vec::with_capacity(x.numel());
                for row in x.data().chunks(c) {
                    for j in 0..c {
                        let h = (row[j] - mean[j]) * inv_std[j];
                        xhat.push(h);
                        out.push(gamma.data()[j] * h + beta.data()[j]);
                    }
                }
                if !tracked {
                    xhat = Vec::new();
                }
                Ok((
                    Tensor::new(x.shape().to_vec(), out)?,
                    Saved::Norm {
                        xhat,
                        inv_std,
                        batch_mean: if train { mean } else { Vec::new() },
                        batch_var: if train { var } else { Vec::new() },
                        train,
                    },
                ))
            }
            OpKind::Flatten => {
                let x = v(0);
                if x.rank() < 1 {
                    return Err(Error::shape(op, &[0], x.shape()));
                }
                let n = x.shape()[0];
                Ok((Tensor::new(vec![n, x.numel() / n], x.data().to_vec())?, Saved::Nothing))
            }
            OpKind::Sum => {
                let x = v(0);
                let s = x.data().iter().fold(T::zero(), |a, &b| a + b);
                Ok((Tensor::scalar(s), Saved::Nothing))
            }
            OpKind::SoftmaxCrossEntropy { labels } => {
                let z = v(0);
                if z.rank() != 2 {
                    return Err(Error::shape(op, &[0, 0], z.shape()));
                }
                let (n, c) = (z.shape()[0], z.shape()[1]);
                if labels.len() != n {
                    return Err(Error::shape(op, &[n], &[labels.len()]));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(Error::contract(op, format!("label {bad} out of range for {c} classes")));
                }
                let mut loss = T::zero();
                for (row, &l) in z.data().chunks(c).zip(labels) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = row.iter().map(|&e| (e - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
                    loss = loss + (lse - row[l]);
                }
                loss = loss / T::from_usize(n).expect("count");
                let probs = kernels::softmax_rows(z.data(), c);
                Ok((Tensor::scalar(loss), Saved::Probs(probs)))
            }
        }
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Nodes are visited in exact reverse insertion order. Afterwards every
    /// leaf created with `requires_grad` holds d(loss)/d(leaf) (accumulated
    /// into any grad it already had); other leaves keep an empty grad.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::contract("backward", format!("unknown node {}", loss.0)));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.kind.is_none() {
                if node.value.requires_grad() {
                    grads[i] = Some(g);
                }
                continue;
            }
            if !node.tracked {
                continue;
            }
            let input_grads = self.node_backward(i, &g);
            for (&input, ig) in self.nodes[i].inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if node.kind.is_some() || !node.value.requires_grad() {
                continue;
            }
            let g = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
            let merged = match node.value.take_grad() {
                Some(mut old) => {
                    old.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b);
                    old
                }
                None => g,
            };
            node.value.set_grad(Some(merged))?;
        }
        Ok(())
    }

    /// Gradients for each input of node `i`; `None` for untracked inputs.
    fn node_backward(&self, i: usize, g: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[i];
        let inputs = &node.inputs;
        let want = |k: usize| self.nodes[inputs[k].0].tracked;
        let v = |k: usize| &self.nodes[inputs[k].0].value;
        let kind = node.kind.as_ref().expect("op node");
        match kind {
            OpKind::Add => {
                let da = want(0).then(|| g.to_vec());
                let db = want(1).then(|| {
                    let bn = v(1).numel();
                    if bn == g.len() {
                        g.to_vec()
                    } else {
                        let mut acc = vec![T::zero(); bn];
                        for row in g.chunks(bn) {
                            acc.iter_mut().zip(row).for_each(|(a, &r)| *a = *a + r);
                        }
                        acc
                    }
                });
                vec![da, db]
            }
            OpKind::Mul => {
                let da = want(0).then(|| g.iter().zip(v(1).data()).map(|(&gg, &b)| gg * b).collect());
                let db = want(1).then(|| g.iter().zip(v(0).data()).map(|(&gg, &a)| gg * a).collect());
                vec![da, db]
            }
            OpKind::MatMul => {
                let (a, b) = (v(0), v(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let da = want(0).then(|| {
                    let bt = kernels::transpose(k, n, b.data());
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm_acc(m, n, k, g, &bt, &mut da);
                    da
                });
                let db = want(1).then(|| {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm_at_b_acc(m, k, n, a.data(), g, &mut db);
                    db
                });
                vec![da, db]
            }
            OpKind::Conv2d(_) => {
                let Saved::Conv(geom) = &node.saved else { unreachable!("conv saves geometry") };
                let has_bias = inputs.len() == 3;
                let grads = kernels::conv2d_backward(
                    geom,
                    v(0).shape()[0],
                    v(0).data(),
                    v(1).data(),
                    g,
                    (want(0), want(1), has_bias && want(2)),
                );
                let mut out = vec![grads.dx, grads.dw];
                if has_bias {
                    out.push(grads.db);
                }
                out
            }
            OpKind::Relu => {
                let dx = v(0)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gg)| if x > T::zero() { gg } else { T::zero() })
                    .collect();
                vec![Some(dx)]
            }
            OpKind::MaxPool2d(_) => {
                let Saved::Argmax(arg) = &node.saved else { unreachable!("tracked pool saves argmax") };
                let mut dx = vec![T::zero(); v(0).numel()];
                for (&src, &gg) in arg.iter().zip(g) {
                    dx[src] = dx[src] + gg;
                }
                vec![Some(dx)]
            }
            OpKind::BatchNorm(_) => {
                let Saved::Norm { xhat, inv_std, train, .. } = &node.saved else {
                    unreachable!("batchnorm saves normalization")
                };
                let c = inv_std.len();
                let gamma = v(1).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dbeta[j] = dbeta[j] + grow[j];
                        dgamma[j] = dgamma[j] + grow[j] * hrow[j];
                    }
                }
                let dx = want(0).then(|| {
                    let mut dx = Vec::with_capacity(g.len());
                    if *train {
                        let m = T::from_usize(g.len() / c).expect("count");
                        // Σ dxhat = γ·Σ dy and Σ dxhat·xhat = γ·Σ dy·xhat
                        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                let dxhat = grow[j] * gamma[j];
                                let t = m * dxhat - gamma[j] * dbeta[j] - hrow[j] * gamma[j] * dgamma[j];
                                dx.push(t * inv_std[j] / m);
                            }
                        }
                    } else {
                        for grow in g.chunks(c) {
                            for j in 0..c {
                                dx.push(grow[j] * gamma[j] * inv_std[j]);
                            }
                        }
                    }
                    dx
                });
                vec![dx, want(1).then_some(dgamma), want(2).then_some(dbeta)]
            }
            OpKind::Flatten => vec![Some(g.to_vec())],
            OpKind::Sum => vec![Some(vec![g[0]; v(0).numel()])],
            OpKind::SoftmaxCrossEntropy { labels } => {
                let Saved::Probs(p) = &node.saved else { unreachable!("loss saves probabilities") };
                let c = v(0).shape()[1];
                let scale = g[0] / T::from_usize(labels.len()).expect("count");
                let mut dz: Vec<T> = p.iter().map(|&q| q * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dz[r * c + l] = dz[r * c + l] - scale;
                }
                vec![Some(dz)]
            }
        }
    }
}

fn conv_geom(x: &[usize], w: &[usize], attrs: Conv2dAttrs) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 || w[2] != x[3] || attrs.stride == 0 {
        return Err(Error::shape("conv2d", x, w));
    }
    let (h, wd, cin) = (x[1], x[2], x[3]);
    let (kh, kw, cout) = (w[0], w[1], w[3]);
    if h + 2 * attrs.pad < kh || wd + 2 * attrs.pad < kw {
        return Err(Error::shape("conv2d", x, w));
    }
    Ok(ConvGeom {
        h,
        w: wd,
        cin,
        kh,
        kw,
        cout,
        stride: attrs.stride,
        pad: attrs.pad,
        ho: (h + 2 * attrs.pad - kh) / attrs.stride + 1,
        wo: (wd + 2 * attrs.pad - kw) / attrs.stride + 1,
    })
}
