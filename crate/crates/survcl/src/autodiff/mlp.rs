use rand::Rng;

use super::graph::{AutodiffError, Graph, NodeId};
use super::tensor::Tensor;

/// Parameter values for one affine layer, `y = x @ weight + bias`.
/// Weight is (in_dim, out_dim), bias is (1, out_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Weights uniform in [-1/sqrt(in_dim), +1/sqrt(in_dim)], row-major
    /// draw order so layouts reproduce; biases start at zero.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..=bound)).collect();
        LinearLayer {
            weight: Tensor::from_vec(in_dim, out_dim, weight)
                .expect("uniform draws are finite")
                .with_grad(),
            bias: Tensor::zeros(1, out_dim).with_grad(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Builds an MLP stack of layers sized `dims[0] -> dims[1] -> ...`.
pub fn init_layers(dims: &[usize], rng: &mut impl Rng) -> Vec<LinearLayer> {
    dims.windows(2).map(|w| LinearLayer::init(w[0], w[1], rng)).collect()
}

/// Inserts layer parameters into a graph as trainable leaves.
pub fn insert_layers(graph: &mut Graph, layers: &[LinearLayer]) -> Vec<(NodeId, NodeId)> {
    layers
        .iter()
        .map(|l| (graph.leaf(l.weight.clone()), graph.leaf(l.bias.clone())))
        .collect()
}

/// Forward pass: affine layers with ReLU between them and a linear final
/// layer; optionally scales each output row to unit Euclidean norm.
pub fn mlp_forward(
    graph: &mut Graph,
    layers: &[(NodeId, NodeId)],
    input: NodeId,
    normalize_output: bool,
) -> Result<NodeId, AutodiffError> {
    let mut x = input;
    let last = layers.len().saturating_sub(1);
    for (i, (weight, bias)) in layers.iter().enumerate() {
        let in_width = graph.value(x).cols();
        let weight_rows = graph.value(*weight).rows();
        if in_width != weight_rows {
            return Err(AutodiffError::DimensionChain { layer: i, input: in_width, rows: weight_rows });
        }
        let h = graph.matmul(x, *weight)?;
        let h = graph.add(h, *bias)?;
        x = if i < last { graph.relu(h)? } else { h };
    }
    if normalize_output {
        x = graph.l2_normalize_rows(x)?;
    }
    Ok(x)
}
