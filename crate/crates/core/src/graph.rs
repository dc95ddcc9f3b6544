//! Reverse-mode differentiation over an append-only expression graph.
//!
//! Nodes are evaluated eagerly when created, so `value()` is a cache lookup.
//! `backward` builds the adjoints *as graph nodes* out of the same op set,
//! which is what makes second-order gradients (grad-of-grad) possible: the
//! gradient of any expression built from gradient nodes can itself be taken
//! with another `backward` call.

use std::collections::HashMap;

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Relu(NodeId),
    /// 1.0 where input > 0, else 0.0. Gradient defined as zero everywhere.
    StepPos(#[allow(dead_code)] NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Recip(NodeId),
    SumAll(NodeId),
    /// [r,c] -> [r], summing across columns.
    RowSums(NodeId),
    /// [r,c] -> [c], summing across rows.
    ColSums(NodeId),
    /// [r] -> [r,c], each row i filled with v[i].
    BroadcastColVec(NodeId),
    /// [c] -> [r,c], vector repeated as every row.
    BroadcastRowVec(NodeId),
    /// [1] -> arbitrary shape, value replicated.
    BroadcastScalar(NodeId),
    Softmax(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
}

/// Append-only expression graph; single-threaded per instance.
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Cached value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Bind a tensor as a root of the graph.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::ScalarMul(a, c), v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scalar_mul(a, -1.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a), v)
    }

    pub fn step_pos(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(Op::StepPos(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scalar_mul(s, 1.0 / n)
    }

    pub fn row_sums(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r];
        for i in 0..r {
            for j in 0..c {
                out[i] += t.data()[i * c + j];
            }
        }
        self.push(Op::RowSums(a), Tensor::new(vec![r], out))
    }

    pub fn col_sums(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += t.data()[i * c + j];
            }
        }
        self.push(Op::ColSums(a), Tensor::new(vec![c], out))
    }

    /// `[r] -> [r,c]`: row i is filled with `v[i]`.
    pub fn broadcast_col_vec(&mut self, a: NodeId, cols: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 1, "broadcast_col_vec expects rank-1 input");
        let r = t.len();
        let mut out = vec![0.0; r * cols];
        for i in 0..r {
            for j in 0..cols {
                out[i * cols + j] = t.data()[i];
            }
        }
        self.push(Op::BroadcastColVec(a), Tensor::new(vec![r, cols], out))
    }

    /// `[c] -> [r,c]`: the vector repeated as every row.
    pub fn broadcast_row_vec(&mut self, a: NodeId, rows: usize) -> NodeId {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 1, "broadcast_row_vec expects rank-1 input");
        let c = t.len();
        let mut out = vec![0.0; rows * c];
        for i in 0..rows {
            out[i * c..(i + 1) * c].copy_from_slice(t.data());
        }
        self.push(Op::BroadcastRowVec(a), Tensor::new(vec![rows, c], out))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.value(a).item();
        let n: usize = shape.iter().product();
        self.push(Op::BroadcastScalar(a), Tensor::new(shape, vec![v; n]))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).softmax_rows();
        self.push(Op::Softmax(a), v)
    }

    // ---- composites ----

    /// Mean squared error over all elements of `pred - target`.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        let d = self.sub(pred, target);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Mean cross-entropy of row-wise logits against one-hot targets.
    pub fn cross_entropy_with_logits(&mut self, logits: NodeId, onehot: NodeId) -> NodeId {
        let b = self.value(logits).rows() as f64;
        let p = self.softmax(logits);
        let logp = self.log(p);
        let picked = self.mul(onehot, logp);
        let per_example = self.row_sums(picked);
        let total = self.sum_all(per_example);
        self.scalar_mul(total, -1.0 / b)
    }

    fn zeros_like(&mut self, id: NodeId) -> NodeId {
        let shape = self.value(id).shape().to_vec();
        self.leaf(Tensor::zeros(shape))
    }

    /// Reverse-mode gradient of a scalar node with respect to `wrt`.
    ///
    /// The returned gradients are graph nodes, so expressions built from them
    /// can be differentiated again. Nodes unreachable from `output` get a
    /// zero tensor of their shape rather than an error.
    pub fn backward(&mut self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, GraphError> {
        if !self.value(output).is_scalar() {
            return Err(GraphError::NonScalarOutput(self.value(output).shape().to_vec()));
        }

        let mut adjoint: HashMap<usize, NodeId> = HashMap::new();
        let one = self.leaf(Tensor::ones(self.value(output).shape().to_vec()));
        adjoint.insert(output.0, one);

        // Nodes appended during backward have indices above `output`, and the
        // graph is topologically ordered, so a single reverse sweep suffices.
        for idx in (0..=output.0).rev() {
            let g = match adjoint.get(&idx) {
                Some(&g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoint, a, g);
                    self.accumulate(&mut adjoint, b, g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoint, a, g);
                    let ng = self.neg(g);
                    self.accumulate(&mut adjoint, b, ng);
                }
                Op::Mul(a, b) => {
                    let ga = self.mul(g, b);
                    let gb = self.mul(g, a);
                    self.accumulate(&mut adjoint, a, ga);
                    self.accumulate(&mut adjoint, b, gb);
                }
                Op::ScalarMul(a, c) => {
                    let ga = self.scalar_mul(g, c);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b);
                    let ga = self.matmul(g, bt);
                    let at = self.transpose(a);
                    let gb = self.matmul(at, g);
                    self.accumulate(&mut adjoint, a, ga);
                    self.accumulate(&mut adjoint, b, gb);
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::Relu(a) => {
                    let mask = self.step_pos(a);
                    let ga = self.mul(g, mask);
                    self.accumulate(&mut adjoint, a, ga);
                }
                // Derivative of the step function is taken as zero everywhere.
                Op::StepPos(_) => {}
                Op::Tanh(a) => {
                    let y = NodeId(idx);
                    let y2 = self.mul(y, y);
                    let shape = self.value(y).shape().to_vec();
                    let ones = self.leaf(Tensor::ones(shape));
                    let d = self.sub(ones, y2);
                    let ga = self.mul(g, d);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::Exp(a) => {
                    let y = NodeId(idx);
                    let ga = self.mul(g, y);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::Log(a) => {
                    let r = self.recip(a);
                    let ga = self.mul(g, r);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::Recip(a) => {
                    let y = NodeId(idx);
                    let y2 = self.mul(y, y);
                    let gy = self.mul(g, y2);
                    let ga = self.neg(gy);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::SumAll(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let ga = self.broadcast_scalar(g, shape);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::RowSums(a) => {
                    let c = self.value(a).cols();
                    let ga = self.broadcast_col_vec(g, c);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::ColSums(a) => {
                    let r = self.value(a).rows();
                    let ga = self.broadcast_row_vec(g, r);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::BroadcastColVec(a) => {
                    let ga = self.row_sums(g);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::BroadcastRowVec(a) => {
                    let ga = self.col_sums(g);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::BroadcastScalar(a) => {
                    let ga = self.sum_all(g);
                    self.accumulate(&mut adjoint, a, ga);
                }
                Op::Softmax(a) => {
                    // d/dx softmax: y * (g - rowwise_sum(g*y))
                    let y = NodeId(idx);
                    let gy = self.mul(g, y);
                    let s = self.row_sums_keep(gy);
                    let centered = self.sub(g, s);
                    let ga = self.mul(y, centered);
                    self.accumulate(&mut adjoint, a, ga);
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|&w| adjoint.get(&w.0).copied().unwrap_or_else(|| self.zeros_like(w)))
            .collect())
    }

    /// Row sums broadcast back to the input shape.
    fn row_sums_keep(&mut self, a: NodeId) -> NodeId {
        let shape = self.value(a).shape().to_vec();
        if shape.len() == 2 {
            let s = self.row_sums(a);
            self.broadcast_col_vec(s, shape[1])
        } else {
            let s = self.sum_all(a);
            self.broadcast_scalar(s, shape)
        }
    }

    fn accumulate(&mut self, adjoint: &mut HashMap<usize, NodeId>, target: NodeId, grad: NodeId) {
        match adjoint.get(&target.0) {
            Some(&existing) => {
                let sum = self.add(existing, grad);
                adjoint.insert(target.0, sum);
            }
            None => {
                adjoint.insert(target.0, grad);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_elementwise() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = g.leaf(Tensor::new(vec![2], vec![3.0, 4.0]));
        let z = g.add(x, y);
        assert_eq!(g.value(z).data(), &[4.0, 6.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let v = g.leaf(Tensor::new(vec![2, 1], vec![5.0, 7.0]));
        let z = g.matmul(i2, v);
        assert_eq!(g.value(z).data(), &[5.0, 7.0]);
    }

    #[test]
    fn softmax_hand_value() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 3.0f64.ln()]));
        let s = g.softmax(x);
        let v = g.value(s).data();
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn grad_of_square() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let grads = g.backward(y, &[x]).unwrap();
        assert_eq!(g.value(grads[0]).item(), 6.0);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let c = g.scalar(7.0);
        let grads = g.backward(c, &[x]).unwrap();
        assert_eq!(g.value(grads[0]).item(), 0.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        // d²(x³)/dx² at x=2 is 6x = 12
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let x2 = g.mul(x, x);
        let x3 = g.mul(x2, x);
        let first = g.backward(x3, &[x]).unwrap()[0];
        let second = g.backward(first, &[x]).unwrap()[0];
        assert!((g.value(second).item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = g.relu(x);
        assert!(g.backward(y, &[x]).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![2, 2], vec![0.3, -1.2, 0.7, 2.0]));
            let t = g.tanh(x);
            let e = g.exp(t);
            let s = g.sum_all(e);
            g.value(s).item()
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![4, 5]));
        let mut oh = Tensor::zeros(vec![4, 5]);
        for i in 0..4 {
            oh.data_mut()[i * 5 + i % 5] = 1.0;
        }
        let onehot = g.leaf(oh);
        let ce = g.cross_entropy_with_logits(logits, onehot);
        assert!((g.value(ce).item() - 5.0f64.ln()).abs() < 1e-12);
    }
}
