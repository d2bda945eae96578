use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Index of a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The operation vocabulary of the tape, used by the generic [`Tape::apply`]
/// entry point and the gradient checker.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind<S> {
    Add,
    Sub,
    Mul,
    Scale(S),
    MatMul,
    Tanh,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    RowNormalize,
    Dot,
    ConcatRows,
    /// Mean over rows of `-log softmax(row)[label]`.
    SoftmaxCrossEntropy(Vec<usize>),
    /// `sum_ij w_ij * -log softmax(row_i)[j]` for a constant weight matrix.
    WeightedCrossEntropy(Tensor<S>),
}

impl<S> OpKind<S> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::MatMul => "matmul",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::RowNormalize => "row_normalize",
            OpKind::Dot => "dot",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            OpKind::WeightedCrossEntropy(_) => "weighted_cross_entropy",
        }
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowNormalize { input: NodeId, norms: Vec<S> },
    Dot(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        weights: Tensor<S>,
        probs: Tensor<S>,
    },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::Dot(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::RowNormalize { input, .. } => vec![*input],
            Op::ConcatRows(ids) => ids.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
}

/// Append-only record of a computation, differentiated by [`Tape::backward`].
///
/// Nodes only reference earlier nodes, so the node order is a topological
/// order and the backward sweep is a single reverse pass.
#[derive(Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.push(Op::Leaf, value.ensure_finite("leaf")?)
    }

    /// An input that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.push(Op::Constant, value.ensure_finite("constant")?)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Result<NodeId> {
        let value = value.ensure_finite(op_label(&op))?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::contract(format!("unknown node {}", id.0)))
        }
    }

    /// Generic entry point: applies `kind` to `inputs` and returns the new node.
    pub fn apply(&mut self, kind: &OpKind<S>, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::contract(format!(
                    "{} takes {} inputs, got {}",
                    kind.name(),
                    n,
                    inputs.len()
                )))
            }
        };
        match kind {
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Scale(s) => arity(1).and_then(|_| self.scale(inputs[0], *s)),
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            OpKind::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            OpKind::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            OpKind::Log => arity(1).and_then(|_| self.log(inputs[0])),
            OpKind::Sum => arity(1).and_then(|_| self.sum(inputs[0])),
            OpKind::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            OpKind::RowNormalize => arity(1).and_then(|_| self.row_normalize(inputs[0])),
            OpKind::Dot => arity(2).and_then(|_| self.dot(inputs[0], inputs[1])),
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::SoftmaxCrossEntropy(labels) => {
                arity(1).and_then(|_| self.softmax_cross_entropy(inputs[0], labels))
            }
            OpKind::WeightedCrossEntropy(w) => {
                arity(1).and_then(|_| self.weighted_cross_entropy(inputs[0], w.clone()))
            }
        }
    }

    /// `a + b`; `b` may be a `[1, n]` row broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add(a, b), v)
    }

    /// `a - b`; `b` may be a `[1, n]` row broadcast over the rows of `a`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).mul(self.value(b))?;
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, s: S) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(S::tanh);
        self.push(Op::Tanh(a), v)
    }

    /// Rectifier; the subgradient at zero is zero.
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self
            .value(a)
            .map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(Op::Relu(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).map(S::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > S::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let v = self.value(a).map(S::ln);
        self.push(Op::Log(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let v = Tensor::scalar(x.sum() / S::lit(x.numel() as f64));
        self.push(Op::Mean(a), v)
    }

    /// Divides every row by its L2 norm. No epsilon: a zero row is an error.
    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let (v, norms) = self.value(a).row_normalize()?;
        self.push(Op::RowNormalize { input: a, norms }, v)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = Tensor::scalar(self.value(a).dot(self.value(b))?);
        self.push(Op::Dot(a, b), v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            self.check(p)?;
        }
        let values: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&values)?;
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let x = self.value(logits);
        if !x.is_matrix() || x.rows() != labels.len() || labels.is_empty() {
            return Err(Error::contract(format!(
                "cross entropy: logits {:?} with {} labels",
                x.shape(),
                labels.len()
            )));
        }
        let (m, n) = (x.rows(), x.cols());
        let mut w = Tensor::zeros(vec![m, n]);
        let share = S::one() / S::lit(m as f64);
        for (i, &y) in labels.iter().enumerate() {
            if y >= n {
                return Err(Error::contract(format!("label {y} out of range for {n} classes")));
            }
            w.row_mut(i)[y] = share;
        }
        self.weighted_cross_entropy(logits, w)
    }

    /// `sum_ij weights_ij * -log softmax(logits_i)_j`, weights held constant.
    ///
    /// Rows with all-zero weights contribute nothing. Multi-positive
    /// contrastive objectives are expressed with this op.
    pub fn weighted_cross_entropy(&mut self, logits: NodeId, weights: Tensor<S>) -> Result<NodeId> {
        self.check(logits)?;
        let x = self.value(logits);
        if !x.is_matrix() || x.shape() != weights.shape() {
            return Err(Error::contract(format!(
                "weighted cross entropy: logits {:?}, weights {:?}",
                x.shape(),
                weights.shape()
            )));
        }
        let lse = x.logsumexp_rows()?;
        let mut loss = S::zero();
        for (i, &l) in lse.iter().enumerate() {
            for (&w, &v) in weights.row(i).iter().zip(x.row(i)) {
                if w != S::zero() {
                    loss += w * (l - v);
                }
            }
        }
        let probs = x.softmax_rows()?;
        self.push(
            Op::CrossEntropy {
                logits,
                weights,
                probs,
            },
            Tensor::scalar(loss),
        )
    }

    /// Reverse sweep from a one-element root.
    ///
    /// Every node reachable from `root` gets a gradient of its own shape;
    /// constants get zeros. Contributions over fan-out add up.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<S>> {
        self.check(root)?;
        if self.value(root).numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar root of shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = root.0 + 1;
        let mut reachable = vec![false; n];
        reachable[root.0] = true;
        for i in (0..n).rev() {
            if reachable[i] {
                for input in self.nodes[i].op.inputs() {
                    reachable[input.0] = true;
                }
            }
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..n)
            .map(|i| reachable[i].then(|| Tensor::zeros(self.nodes[i].value.shape().to_vec())))
            .collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).shape().to_vec()));

        for i in (0..n).rev() {
            if !reachable[i] {
                continue;
            }
            let g = grads[i].take().expect("reachable node has a gradient slot");
            for (input, contribution) in self.local_grads(i, &g)? {
                if matches!(self.nodes[input.0].op, Op::Constant) {
                    continue;
                }
                grads[input.0]
                    .as_mut()
                    .expect("inputs of reachable nodes are reachable")
                    .add_assign(&contribution)?;
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(NodeId, Tensor<S>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let out = match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, self.reduce_to(*b, g.clone()))],
            Op::Sub(a, b) => vec![
                (*a, g.clone()),
                (*b, self.reduce_to(*b, g.scale(-S::one()))),
            ],
            Op::Mul(a, b) => vec![
                (*a, g.mul(self.value(*b))?),
                (*b, g.mul(self.value(*a))?),
            ],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::MatMul(a, b) => {
                let ga = g.matmul(&self.value(*b).transpose()?)?;
                let gb = self.value(*a).transpose()?.matmul(g)?;
                vec![(*a, ga), (*b, gb)]
            }
            Op::Tanh(a) => vec![(*a, g.zip_map(y, "tanh'", |g, y| g * (S::one() - y * y))?)],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(self.value(*a), "relu'", |g, x| {
                    if x > S::zero() {
                        g
                    } else {
                        S::zero()
                    }
                })?,
            )],
            Op::Exp(a) => vec![(*a, g.mul(y)?)],
            Op::Log(a) => vec![(*a, g.zip_map(self.value(*a), "log'", |g, x| g / x)?)],
            Op::Sum(a) => {
                let s = g.item()?;
                vec![(*a, Tensor::from_elem(self.value(*a).shape().to_vec(), s))]
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let s = g.item()? / S::lit(x.numel() as f64);
                vec![(*a, Tensor::from_elem(x.shape().to_vec(), s))]
            }
            Op::RowNormalize { input, norms } => {
                let mut ga = g.clone();
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let proj: S = yr.iter().zip(g.row(r)).map(|(&a, &b)| a * b).sum();
                    for (o, &yv) in ga.row_mut(r).iter_mut().zip(yr) {
                        *o = (*o - yv * proj) / norm;
                    }
                }
                vec![(*input, ga)]
            }
            Op::Dot(a, b) => {
                let s = g.item()?;
                vec![
                    (*a, self.value(*b).scale(s)),
                    (*b, self.value(*a).scale(s)),
                ]
            }
            Op::ConcatRows(ids) => {
                let cols = y.cols();
                let mut offset = 0;
                let mut parts = Vec::with_capacity(ids.len());
                for &id in ids {
                    let rows = self.value(id).rows();
                    let data = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                    parts.push((id, Tensor::matrix(rows, cols, data)?));
                    offset += rows;
                }
                parts
            }
            Op::CrossEntropy {
                logits,
                weights,
                probs,
            } => {
                let s = g.item()?;
                let mut gl = Tensor::zeros(probs.shape().to_vec());
                for r in 0..probs.rows() {
                    let total: S = weights.row(r).iter().copied().sum();
                    for ((o, &p), &w) in gl.row_mut(r).iter_mut().zip(probs.row(r)).zip(weights.row(r)) {
                        *o = s * (total * p - w);
                    }
                }
                vec![(*logits, gl)]
            }
        };
        Ok(out)
    }

    /// Sums a broadcast gradient back down to a `[1, n]` row operand.
    fn reduce_to(&self, target: NodeId, g: Tensor<S>) -> Tensor<S> {
        let shape = self.value(target).shape();
        if shape == g.shape() {
            return g;
        }
        let cols = g.cols();
        let mut out = vec![S::zero(); cols];
        for row in g.data().chunks(cols) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor::matrix(1, cols, out).expect("row shape")
    }
}

fn op_label<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::Tanh(_) => "tanh",
        Op::Relu(_) => "relu",
        Op::Exp(_) => "exp",
        Op::Log(_) => "log",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::RowNormalize { .. } => "row_normalize",
        Op::Dot(..) => "dot",
        Op::ConcatRows(_) => "concat_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

/// Gradient table produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root with respect to `id`, or `None` when `id` is not
    /// reachable from the root.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but an error for unreachable nodes.
    pub fn wrt(&self, id: NodeId) -> Result<&Tensor<S>> {
        self.get(id)
            .ok_or_else(|| Error::contract(format!("node {} is not reachable from the root", id.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_forward() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.leaf(t(vec![2, 1], vec![1.0, 1.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn row_normalize_three_four_five() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![1, 2], vec![3.0, 4.0])).unwrap();
        let n = tape.row_normalize(a).unwrap();
        assert_eq!(tape.value(n).data(), &[0.6, 0.8]);
    }

    #[test]
    fn uniform_cross_entropy_is_ln3() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(vec![1, 3], vec![0.0; 3])).unwrap();
        let l = tape.softmax_cross_entropy(a, &[1]).unwrap();
        assert!((tape.value(l).item().unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0])).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &Tensor::ones(vec![2, 2]));
    }

    #[test]
    fn self_dot_gradient_is_twice_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let d = tape.dot(x, x).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn tanh_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0)).unwrap();
        let y = tape.tanh(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item().unwrap(), 1.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.0, 1.0, -1.0])).unwrap();
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn fan_out_doubles_linear_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.7, 2.0])).unwrap();
        let once = tape.sum(x).unwrap();
        let g1 = tape.backward(once).unwrap().wrt(x).unwrap().clone();
        let twice = tape.add(x, x).unwrap();
        let s = tape.sum(twice).unwrap();
        let g2 = tape.backward(s).unwrap().wrt(x).unwrap().clone();
        assert_eq!(g2, g1.scale(2.0));
    }

    #[test]
    fn constants_receive_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0])).unwrap();
        let d = tape.dot(x, c).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(g.wrt(c).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_row_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(vec![3, 2], vec![1.0; 6])).unwrap();
        let b = tape.leaf(t(vec![1, 2], vec![0.5, -0.5])).unwrap();
        let y = tape.add(x, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(vec![2, 3], vec![1.0; 6])).unwrap();
        let b = tape.leaf(t(vec![2, 3], vec![1.0; 6])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Contract(_))));
        let z = tape.leaf(t(vec![1, 2], vec![0.0, 0.0])).unwrap();
        assert!(matches!(tape.row_normalize(z), Err(Error::Domain(_))));
        assert!(matches!(tape.log(z), Err(Error::Domain(_))));
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
        let big = tape.leaf(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(tape.exp(big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unreachable_nodes_have_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0)).unwrap();
        let y = tape.leaf(Tensor::scalar(2.0)).unwrap();
        let e = tape.exp(x).unwrap();
        let g = tape.backward(e).unwrap();
        assert!(g.get(y).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn works_in_single_precision() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::vector(vec![1.0f32, 2.0])).unwrap();
        let d = tape.dot(x, x).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0f32, 4.0]);
    }
}
