//! The trainable model: an encoder MLP plus one head, stored as an ordered
//! list of named tensors so optimizers, checkpoints, and graphs all agree
//! on parameter identity.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{init_layers, Graph, LinearLayer, NodeId, Tensor};
use crate::config::ExperimentConfig;

use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Contrastive projection used during pretraining.
    Projection,
    /// Hazard distribution over time bins used for the survival task.
    Hazard,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Projection => "projection",
            HeadKind::Hazard => "hazard",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "projection" => Some(HeadKind::Projection),
            "hazard" => Some(HeadKind::Hazard),
            _ => None,
        }
    }
}

/// Graph handles for one inserted copy of the model's parameters.
pub struct ModelNodes {
    /// (weight, bias) per encoder layer, in forward order.
    pub encoder: Vec<(NodeId, NodeId)>,
    /// (weight, bias) of the head.
    pub head: (NodeId, NodeId),
    /// Every parameter leaf in model order; aligns with `SurvModel::tensors`.
    pub all: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct SurvModel {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    encoder_pairs: usize,
    head: HeadKind,
}

/// Expected (name, shape) sequence for a model under this config.
fn expected_layout(config: &ExperimentConfig, head: HeadKind) -> Vec<(String, (usize, usize))> {
    let dims = config.encoder_dims();
    let mut out = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        out.push((format!("encoder.{i}.weight"), (w[0], w[1])));
        out.push((format!("encoder.{i}.bias"), (1, w[1])));
    }
    let head_out = match head {
        HeadKind::Projection => config.projection_dim,
        HeadKind::Hazard => config.bins,
    };
    out.push(("head.weight".to_string(), (config.encoder_dim, head_out)));
    out.push(("head.bias".to_string(), (1, head_out)));
    out
}

fn push_layers(prefix: &str, layers: Vec<LinearLayer>, names: &mut Vec<String>, tensors: &mut Vec<Tensor>) {
    for (i, layer) in layers.into_iter().enumerate() {
        names.push(format!("{prefix}.{i}.weight"));
        tensors.push(layer.weight);
        names.push(format!("{prefix}.{i}.bias"));
        tensors.push(layer.bias);
    }
}

impl SurvModel {
    /// Fresh encoder plus a contrastive projection head.
    pub fn pretrain_init(config: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Self {
        let encoder = init_layers(&config.encoder_dims(), rng);
        let encoder_pairs = encoder.len();
        let head = init_layers(&[config.encoder_dim, config.projection_dim], rng);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        push_layers("encoder", encoder, &mut names, &mut tensors);
        let mut head_names = Vec::new();
        push_layers("head", head, &mut head_names, &mut tensors);
        names.push("head.weight".to_string());
        names.push("head.bias".to_string());
        SurvModel { names, tensors, encoder_pairs, head: HeadKind::Projection }
    }

    /// Encoder copied from `source` (or freshly initialized when absent)
    /// plus a fresh hazard head over `config.bins` outputs.
    pub fn finetune_init(
        config: &ExperimentConfig,
        source: Option<&SurvModel>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, PipelineError> {
        let layout = expected_layout(config, HeadKind::Hazard);
        let encoder_tensors = match source {
            Some(src) => {
                let count = 2 * src.encoder_pairs;
                for (i, (name, tensor)) in
                    src.names.iter().zip(&src.tensors).take(count).enumerate()
                {
                    let (ref expected_name, expected_shape) = layout[i];
                    if name != expected_name {
                        return Err(PipelineError::MissingTensor(expected_name.clone()));
                    }
                    if tensor.shape() != expected_shape {
                        return Err(PipelineError::TensorShape {
                            name: name.clone(),
                            got: tensor.shape(),
                            expected: expected_shape,
                        });
                    }
                }
                if count != 2 * (config.encoder_dims().len() - 1) {
                    return Err(PipelineError::MissingTensor(format!(
                        "encoder.{}.weight",
                        src.encoder_pairs
                    )));
                }
                src.tensors[..count].to_vec()
            }
            None => {
                let mut tensors = Vec::new();
                for layer in init_layers(&config.encoder_dims(), rng) {
                    tensors.push(layer.weight);
                    tensors.push(layer.bias);
                }
                tensors
            }
        };
        let encoder_pairs = encoder_tensors.len() / 2;
        let head = init_layers(&[config.encoder_dim, config.bins], rng);
        let mut names: Vec<String> = layout.iter().map(|(n, _)| n.clone()).collect();
        names.truncate(2 * encoder_pairs + 2);
        let mut tensors = encoder_tensors;
        for layer in head {
            tensors.push(layer.weight);
            tensors.push(layer.bias);
        }
        Ok(SurvModel { names, tensors, encoder_pairs, head: HeadKind::Hazard })
    }

    /// Rebuilds a model from checkpoint tensors, validating the exact name
    /// sequence and shapes implied by the config.
    pub fn from_named(
        named: Vec<(String, Tensor)>,
        head: HeadKind,
        config: &ExperimentConfig,
    ) -> Result<Self, PipelineError> {
        let layout = expected_layout(config, head);
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        let mut supplied = named.into_iter();
        for (expected_name, expected_shape) in &layout {
            let Some((name, tensor)) = supplied.next() else {
                return Err(PipelineError::MissingTensor(expected_name.clone()));
            };
            if &name != expected_name {
                return Err(PipelineError::MissingTensor(expected_name.clone()));
            }
            if tensor.shape() != *expected_shape {
                return Err(PipelineError::TensorShape {
                    name,
                    got: tensor.shape(),
                    expected: *expected_shape,
                });
            }
            names.push(name);
            tensors.push(tensor.with_grad());
        }
        if let Some((name, _)) = supplied.next() {
            return Err(PipelineError::UnexpectedTensor(name));
        }
        let encoder_pairs = config.encoder_dims().len() - 1;
        Ok(SurvModel { names, tensors, encoder_pairs, head })
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Index of the first head tensor in model order.
    pub fn head_start(&self) -> usize {
        2 * self.encoder_pairs
    }

    /// Inserts every parameter as a trainable leaf of `graph`.
    pub fn insert(&self, graph: &mut Graph) -> ModelNodes {
        let all: Vec<NodeId> = self.tensors.iter().map(|t| graph.leaf(t.clone())).collect();
        let encoder =
            (0..self.encoder_pairs).map(|i| (all[2 * i], all[2 * i + 1])).collect();
        let head = (all[2 * self.encoder_pairs], all[2 * self.encoder_pairs + 1]);
        ModelNodes { encoder, head, all }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::default();
        for (key, value) in [
            ("input_dim", "4"),
            ("hidden_dim", "5"),
            ("encoder_dim", "6"),
            ("projection_dim", "3"),
            ("bins", "4"),
        ] {
            config.apply(key, value).unwrap();
        }
        config
    }

    #[test]
    fn pretrain_layout_matches_config() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = SurvModel::pretrain_init(&config, &mut rng);
        let expected = expected_layout(&config, HeadKind::Projection);
        assert_eq!(model.names().len(), expected.len());
        for ((name, tensor), (exp_name, exp_shape)) in model.named().zip(&expected) {
            assert_eq!(name, exp_name);
            assert_eq!(tensor.shape(), *exp_shape);
        }
        assert_eq!(model.head_start(), 6);
    }

    #[test]
    fn finetune_reuses_pretrained_encoder() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pre = SurvModel::pretrain_init(&config, &mut rng);
        let fine = SurvModel::finetune_init(&config, Some(&pre), &mut rng).unwrap();
        for i in 0..fine.head_start() {
            assert_eq!(fine.tensors()[i].data(), pre.tensors()[i].data());
        }
        assert_eq!(fine.head_kind(), HeadKind::Hazard);
        assert_eq!(fine.tensors()[fine.head_start()].shape(), (6, 4));
    }

    #[test]
    fn finetune_rejects_mismatched_encoder() {
        let config = small_config();
        let mut other = small_config();
        other.apply("hidden_dim", "7").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pre = SurvModel::pretrain_init(&other, &mut rng);
        let err = SurvModel::finetune_init(&config, Some(&pre), &mut rng).unwrap_err();
        assert!(matches!(err, PipelineError::TensorShape { .. }), "{err}");
    }

    #[test]
    fn from_named_round_trips() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = SurvModel::pretrain_init(&config, &mut rng);
        let named: Vec<(String, Tensor)> =
            model.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let rebuilt = SurvModel::from_named(named, HeadKind::Projection, &config).unwrap();
        for (a, b) in rebuilt.tensors().iter().zip(model.tensors()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn from_named_rejects_extra_tensor() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = SurvModel::pretrain_init(&config, &mut rng);
        let mut named: Vec<(String, Tensor)> =
            model.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        named.push(("stray".to_string(), Tensor::zeros(1, 1)));
        let err = SurvModel::from_named(named, HeadKind::Projection, &config).unwrap_err();
        assert!(matches!(err, PipelineError::UnexpectedTensor(_)), "{err}");
    }

    #[test]
    fn inserted_leaves_align_with_tensor_order() {
        let config = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = SurvModel::pretrain_init(&config, &mut rng);
        let mut graph = Graph::new();
        let nodes = model.insert(&mut graph);
        assert_eq!(nodes.all.len(), model.tensors().len());
        for (id, tensor) in nodes.all.iter().zip(model.tensors()) {
            assert_eq!(graph.value(*id).data(), tensor.data());
        }
        assert_eq!(nodes.encoder.len(), 3);
        assert_eq!(nodes.head.0, nodes.all[6]);
    }
}
