//! Fully-connected networks used as task-specific learners.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Layer sizes and hidden activation of an MLP. Input dim first, output last;
/// no activation after the final layer.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Self {
        assert!(layer_sizes.len() >= 2, "spec needs at least input and output dims");
        assert!(layer_sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        MlpSpec { layer_sizes, activation }
    }

    /// Default sinusoid regression network.
    pub fn regression_default() -> Self {
        MlpSpec::new(vec![1, 40, 40, 1], Activation::Relu)
    }

    /// Default classification network for vector episodes.
    pub fn classification_default(dim: usize, way: usize) -> Self {
        MlpSpec::new(vec![dim, 64, 64, way], Activation::Relu)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// Ordered named parameter tensors (W_l, b_l per layer).
///
/// Immutable in spirit: engine updates produce new vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    entries: Vec<(String, Tensor)>,
}

impl ParamVector {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        ParamVector { entries }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total scalar parameter count.
    pub fn dim(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Flatten all values into one vector (entry order, row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuild from a flat vector with this vector's shapes.
    pub fn unflatten_like(&self, flat: &[f64]) -> ParamVector {
        assert_eq!(flat.len(), self.dim(), "flat length mismatch");
        let mut off = 0;
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| {
                let next = off + t.len();
                let tens = Tensor::new(t.shape().to_vec(), flat[off..next].to_vec());
                off = next;
                (n.clone(), tens)
            })
            .collect();
        ParamVector { entries }
    }

    /// Entrywise θ + c·g.
    pub fn axpy(&self, c: f64, g: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), g.len(), "param vector length mismatch");
        let entries = self
            .entries
            .iter()
            .zip(g.entries.iter())
            .map(|((n, a), (_, b))| (n.clone(), a.zip(b, |x, y| x + c * y)))
            .collect();
        ParamVector { entries }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.all_finite())
    }

    // ---- serialization: flat (name, shape, little-endian f64) records ----

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ParamVector, String> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], String> {
            if *pos + n > bytes.len() {
                return Err("truncated checkpoint".to_string());
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| e.to_string())?;
            let ndim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            entries.push((name, Tensor::new(shape, data)));
        }
        Ok(ParamVector { entries })
    }
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_out * fan_in)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        entries.push((format!("W{}", l), Tensor::new(vec![fan_out, fan_in], w)));
        entries.push((format!("b{}", l), Tensor::zeros(vec![fan_out])));
    }
    ParamVector::new(entries)
}

/// Graph-node handles for one parameter vector bound into a graph.
pub struct ParamNodes {
    pub nodes: Vec<(String, NodeId)>,
}

impl ParamNodes {
    pub fn ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|(_, id)| *id).collect()
    }
}

/// Bind θ as graph leaves.
pub fn bind_params(g: &mut Graph, theta: &ParamVector) -> ParamNodes {
    let nodes = theta
        .entries()
        .iter()
        .map(|(n, t)| (n.clone(), g.leaf(t.clone())))
        .collect();
    ParamNodes { nodes }
}

/// Forward pass of the MLP inside a graph: x is [batch × in], output
/// [batch × out]. Differentiable w.r.t. both the parameters and x.
pub fn forward(g: &mut Graph, spec: &MlpSpec, params: &ParamNodes, x: NodeId) -> NodeId {
    let ids = params.ids();
    forward_nodes(g, spec, &ids, x)
}

/// Forward pass over raw parameter node ids in (W0, b0, W1, b1, …) order;
/// the ids may be adapted parameters rather than leaves.
pub fn forward_nodes(g: &mut Graph, spec: &MlpSpec, params: &[NodeId], x: NodeId) -> NodeId {
    assert_eq!(params.len(), 2 * spec.num_layers(), "parameter count mismatch");
    assert_eq!(
        g.value(x).cols(),
        spec.input_dim(),
        "input dim mismatch: x has {} cols, spec expects {}",
        g.value(x).cols(),
        spec.input_dim()
    );
    let batch = g.value(x).rows();
    let mut h = x;
    for l in 0..spec.num_layers() {
        let w = params[2 * l];
        let b = params[2 * l + 1];
        let wt = g.transpose(w);
        let z = g.matmul(h, wt);
        let bb = g.broadcast_row_vec(b, batch);
        let a = g.add(z, bb);
        h = if l + 1 < spec.num_layers() {
            match spec.activation {
                Activation::Relu => g.relu(a),
                Activation::Tanh => g.tanh(a),
            }
        } else {
            a
        };
    }
    h
}

/// Forward pass on plain tensors (no graph), for pool selection and eval.
pub fn forward_values(spec: &MlpSpec, theta: &ParamVector, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let params = bind_params(&mut g, theta);
    let xn = g.leaf(x.clone());
    let out = forward(&mut g, spec, &params, xn);
    g.value(out).clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let spec = MlpSpec::regression_default();
        assert_eq!(init_params(&spec, 42), init_params(&spec, 42));
    }

    #[test]
    fn init_biases_are_zero() {
        let spec = MlpSpec::new(vec![3, 5, 2], Activation::Tanh);
        let p = init_params(&spec, 7);
        for (name, t) in p.entries() {
            if name.starts_with('b') {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_shapes_match_spec() {
        let spec = MlpSpec::regression_default();
        let p = init_params(&spec, 0);
        let shapes: Vec<&[usize]> = p.entries().iter().map(|(_, t)| t.shape()).collect();
        assert_eq!(
            shapes,
            vec![&[40, 1][..], &[40][..], &[40, 40][..], &[40][..], &[1, 40][..], &[1][..]]
        );
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = MlpSpec::new(vec![2, 3, 1], Activation::Relu);
        let p = init_params(&spec, 0);
        let zeros = p.unflatten_like(&vec![0.0; p.dim()]);
        let x = Tensor::new(vec![4, 2], vec![1.0, -2.0, 0.5, 3.0, 0.0, 0.0, 9.0, 9.0]);
        let y = forward_values(&spec, &zeros, &x);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_affine_by_hand() {
        let spec = MlpSpec::new(vec![2, 1], Activation::Relu);
        let p = ParamVector::new(vec![
            ("W0".into(), Tensor::new(vec![1, 2], vec![1.0, 1.0])),
            ("b0".into(), Tensor::new(vec![1], vec![0.5])),
        ]);
        let x = Tensor::new(vec![1, 2], vec![2.0, 3.0]);
        let y = forward_values(&spec, &p, &x);
        assert_eq!(y.data(), &[5.5]);
    }

    #[test]
    fn batch_dim_preserved() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Tanh);
        let p = init_params(&spec, 1);
        let x = Tensor::zeros(vec![7, 3]);
        let y = forward_values(&spec, &p, &x);
        assert_eq!(y.shape(), &[7, 2]);
    }

    #[test]
    fn serialization_round_trip() {
        let spec = MlpSpec::new(vec![2, 3, 2], Activation::Relu);
        let p = init_params(&spec, 99);
        let back = ParamVector::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(p, back);
    }
}
