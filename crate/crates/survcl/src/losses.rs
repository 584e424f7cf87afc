//! Multi-view contrastive objectives over unit-norm embeddings.
//!
//! Three nested variants: plain pair-positive contrast, label-aware contrast
//! (all same-label views are positives), and the time-weighted form where
//! every pairwise similarity is scaled by a weight that decays linearly in
//! the absolute time gap between the two views.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};

/// Added to diagonal similarities before row-wise log-sum-exp. Large enough
/// that exp underflows to exactly 0, removing self-similarity from every
/// denominator without a dedicated masking primitive.
pub const DIAGONAL_MASK: f64 = -1e30;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("view metadata lengths disagree: embeddings {rows} rows, origin {origin}, pair {pair}, labels {labels}, times {times}")]
    LengthMismatch { rows: usize, origin: usize, pair: usize, labels: usize, times: usize },
    #[error("batch needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("pair map is not an involution at view {view}")]
    BadPairing { view: usize },
    #[error("views {a} and {b} are paired but have different origins")]
    PairOriginMismatch { a: usize, b: usize },
    #[error("views of origin {origin} disagree on label or time")]
    InconsistentOrigin { origin: usize },
    #[error("embedding row {row} has norm {norm}, expected 1 within 1e-6")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("time for view {view} is not finite")]
    NonFiniteTime { view: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("weights require alpha >= beta > 0, got alpha {alpha}, beta {beta}")]
    BadWeightRange { alpha: f64, beta: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// The literal sum over anchors.
    Sum,
    /// Sum divided by the number of views (2N).
    MeanOverAnchors,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub reduction: Reduction,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { tau: 0.07, alpha: 1.0, beta: 0.9, reduction: Reduction::MeanOverAnchors }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::BadTemperature(self.tau));
        }
        if !(self.beta > 0.0 && self.alpha >= self.beta && self.alpha.is_finite()) {
            return Err(LossError::BadWeightRange { alpha: self.alpha, beta: self.beta });
        }
        Ok(())
    }
}

/// A batch of 2N augmented views. Each original sample contributes two views
/// that point at each other through `pair` and share its label and time.
#[derive(Debug)]
pub struct MultiViewBatch {
    embeddings: NodeId,
    origin: Vec<usize>,
    pair: Vec<usize>,
    labels: Vec<u32>,
    times: Vec<f64>,
}

impl MultiViewBatch {
    /// Validates view metadata against the embedding node's current value:
    /// consistent lengths, pair involution linking same-origin views, one
    /// label and time per origin, unit-norm rows (within 1e-6).
    pub fn new(
        graph: &Graph,
        embeddings: NodeId,
        origin: Vec<usize>,
        pair: Vec<usize>,
        labels: Vec<u32>,
        times: Vec<f64>,
    ) -> Result<Self, LossError> {
        let z = graph.value(embeddings);
        let rows = z.rows();
        if origin.len() != rows || pair.len() != rows || labels.len() != rows || times.len() != rows {
            return Err(LossError::LengthMismatch {
                rows,
                origin: origin.len(),
                pair: pair.len(),
                labels: labels.len(),
                times: times.len(),
            });
        }
        if rows < 2 {
            return Err(LossError::TooFewViews(rows));
        }
        for i in 0..rows {
            let j = pair[i];
            if j >= rows || j == i || pair[j] != i {
                return Err(LossError::BadPairing { view: i });
            }
            if origin[j] != origin[i] {
                return Err(LossError::PairOriginMismatch { a: i, b: j });
            }
            if !times[i].is_finite() {
                return Err(LossError::NonFiniteTime { view: i });
            }
        }
        let mut per_origin: BTreeMap<usize, (u32, f64)> = BTreeMap::new();
        for i in 0..rows {
            match per_origin.get(&origin[i]) {
                None => {
                    per_origin.insert(origin[i], (labels[i], times[i]));
                }
                Some(&(label, time)) => {
                    if labels[i] != label || times[i] != time {
                        return Err(LossError::InconsistentOrigin { origin: origin[i] });
                    }
                }
            }
        }
        for i in 0..rows {
            let norm: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(LossError::NotUnitNorm { row: i, norm });
            }
        }
        Ok(MultiViewBatch { embeddings, origin, pair, labels, times })
    }

    pub fn views(&self) -> usize {
        self.origin.len()
    }

    pub fn embeddings(&self) -> NodeId {
        self.embeddings
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    pub fn pair(&self) -> &[usize] {
        &self.pair
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// Pairwise similarity weights, linear in the absolute time gap. Symmetric;
/// the diagonal is never read by the losses.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    values: Vec<f64>,
}

impl WeightMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    fn log_tensor(&self) -> Tensor {
        let data = self.values.iter().map(|w| w.ln()).collect();
        Tensor::from_vec(self.n, self.n, data).expect("weights are positive and finite")
    }
}

/// Maps each pairwise time gap onto [beta, alpha]: the smallest gap in the
/// batch gets alpha (strongest pull), the largest gets beta. If every gap is
/// equal the line is undefined and all weights are alpha, which cancels.
pub fn compute_weight_matrix(times: &[f64], alpha: f64, beta: f64) -> Result<WeightMatrix, LossError> {
    let n = times.len();
    if n < 2 {
        return Err(LossError::TooFewViews(n));
    }
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(LossError::BadWeightRange { alpha, beta });
    }
    for (view, t) in times.iter().enumerate() {
        if !t.is_finite() {
            return Err(LossError::NonFiniteTime { view });
        }
    }
    let mut s = f64::INFINITY;
    let mut l = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let delta = (times[i] - times[j]).abs();
            s = s.min(delta);
            l = l.max(delta);
        }
    }
    let mut values = vec![alpha; n * n];
    if s != l {
        let slope = (alpha - beta) / (s - l);
        let intercept = (beta - alpha) / (s - l) * s + alpha;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let delta = (times[i] - times[j]).abs();
                    values[i * n + j] = slope * delta + intercept;
                }
            }
        }
    }
    Ok(WeightMatrix { n, values })
}

/// Which views count as positives for an anchor.
enum PositiveRule {
    /// Only the augmented partner.
    PairOnly,
    /// Every other view with the same label.
    SharedLabel,
}

/// Contrast each view against its augmented partner only.
pub fn ssl_loss(
    graph: &mut Graph,
    batch: &MultiViewBatch,
    config: &ContrastiveConfig,
) -> Result<NodeId, LossError> {
    loss_core(graph, batch, config, PositiveRule::PairOnly, None)
}

/// Label-aware contrast: all same-label views are positives.
pub fn essl_loss(
    graph: &mut Graph,
    batch: &MultiViewBatch,
    config: &ContrastiveConfig,
) -> Result<NodeId, LossError> {
    loss_core(graph, batch, config, PositiveRule::SharedLabel, None)
}

/// Label-aware contrast with time-gap weights on every similarity.
pub fn tessl_loss(
    graph: &mut Graph,
    batch: &MultiViewBatch,
    config: &ContrastiveConfig,
) -> Result<NodeId, LossError> {
    let weights = compute_weight_matrix(batch.times(), config.alpha, config.beta)?;
    loss_core(graph, batch, config, PositiveRule::SharedLabel, Some(&weights))
}

/// Shared loss body. With weights, each scaled similarity is
/// `s'_{i,j} = z_i.z_j / tau + log w_{i,j}`, so the weighted softmax is the
/// plain softmax of `s'`. Per anchor the loss is the row log-sum-exp (with
/// the diagonal masked out) minus the mean of `s'` over positives; weights
/// are constants, so gradients flow only through the embeddings.
fn loss_core(
    graph: &mut Graph,
    batch: &MultiViewBatch,
    config: &ContrastiveConfig,
    rule: PositiveRule,
    weights: Option<&WeightMatrix>,
) -> Result<NodeId, LossError> {
    config.validate()?;
    let n = batch.views();

    let zt = graph.transpose(batch.embeddings())?;
    let sim = graph.matmul(batch.embeddings(), zt)?;
    let mut scaled = graph.mul_scalar(sim, 1.0 / config.tau)?;

    if let Some(w) = weights {
        let logw = graph.constant(w.log_tensor());
        scaled = graph.add(scaled, logw)?;
    }

    let mut mask = Tensor::zeros(n, n);
    for i in 0..n {
        mask.data_mut()[i * n + i] = DIAGONAL_MASK;
    }
    let mask = graph.constant(mask);
    let masked = graph.add(scaled, mask)?;

    let lse = graph.log_sum_exp_rows(masked)?;
    let denom_total = graph.sum(lse)?;

    let mut positive_avg = vec![0.0; n * n];
    for i in 0..n {
        let positives: Vec<usize> = match rule {
            PositiveRule::PairOnly => vec![batch.pair()[i]],
            PositiveRule::SharedLabel => (0..n)
                .filter(|&p| p != i && batch.labels()[p] == batch.labels()[i])
                .collect(),
        };
        let share = 1.0 / positives.len() as f64;
        for p in positives {
            positive_avg[i * n + p] = share;
        }
    }
    let positive_avg = graph.constant(
        Tensor::from_vec(n, n, positive_avg).expect("positive shares are finite"),
    );
    let weighted = graph.mul(scaled, positive_avg)?;
    let pos_total = graph.sum(weighted)?;

    let neg_pos = graph.mul_scalar(pos_total, -1.0)?;
    let loss = graph.add(denom_total, neg_pos)?;
    match config.reduction {
        Reduction::Sum => Ok(loss),
        Reduction::MeanOverAnchors => Ok(graph.mul_scalar(loss, 1.0 / n as f64)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(graph: &mut Graph, rows: &[Vec<f64>], trainable: bool) -> NodeId {
        let raw = Tensor::from_rows(rows).unwrap();
        let raw = if trainable { raw.with_grad() } else { raw };
        let leaf = graph.leaf(raw);
        graph.l2_normalize_rows(leaf).unwrap()
    }

    fn two_cluster_batch(graph: &mut Graph, labels: Vec<u32>, times: Vec<f64>) -> MultiViewBatch {
        let z = unit_rows(
            graph,
            &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]],
            false,
        );
        MultiViewBatch::new(graph, z, vec![0, 0, 1, 1], vec![1, 0, 3, 2], labels, times).unwrap()
    }

    fn unit_config() -> ContrastiveConfig {
        ContrastiveConfig { tau: 1.0, alpha: 1.0, beta: 0.9, reduction: Reduction::MeanOverAnchors }
    }

    #[test]
    fn weight_endpoints_hit_alpha_and_beta() {
        let w = compute_weight_matrix(&[0.0, 10.0, 20.0], 1.0, 0.5).unwrap();
        assert!((w.get(0, 1) - 1.0).abs() < 1e-12, "delta=s gives alpha");
        assert!((w.get(0, 2) - 0.5).abs() < 1e-12, "delta=l gives beta");
        assert_eq!(w.get(0, 2), w.get(2, 0), "symmetric");
    }

    #[test]
    fn weight_interior_is_linear() {
        let w = compute_weight_matrix(&[0.0, 2.0, 4.0, 8.0], 1.0, 0.4).unwrap();
        assert!((w.get(0, 2) - 0.8).abs() < 1e-12, "delta=4 maps to 0.8, got {}", w.get(0, 2));
    }

    #[test]
    fn equal_times_degenerate_to_alpha() {
        let w = compute_weight_matrix(&[5.0, 5.0, 5.0], 1.3, 0.4).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(w.get(i, j), 1.3);
            }
        }
    }

    #[test]
    fn weight_matrix_needs_two_views() {
        assert!(matches!(compute_weight_matrix(&[1.0], 1.0, 0.9), Err(LossError::TooFewViews(1))));
    }

    #[test]
    fn single_original_has_zero_loss() {
        let mut g = Graph::new();
        let z = unit_rows(&mut g, &[vec![0.3, -0.8], vec![-0.5, 0.1]], false);
        let batch =
            MultiViewBatch::new(&g, z, vec![0, 0], vec![1, 0], vec![0, 0], vec![3.0, 3.0]).unwrap();
        let loss = ssl_loss(&mut g, &batch, &unit_config()).unwrap();
        assert!(g.value(loss).get(0, 0).abs() < 1e-12);
    }

    #[test]
    fn ssl_two_cluster_hand_value() {
        let mut g = Graph::new();
        let batch = two_cluster_batch(&mut g, vec![0, 0, 1, 1], vec![1.0, 1.0, 2.0, 2.0]);
        let loss = ssl_loss(&mut g, &batch, &unit_config()).unwrap();
        // Every anchor sees its clone as positive and two orthogonal views:
        // -log(e / (e + 2)) = log(1 + 2/e).
        let expected = (1.0 + 2.0 / std::f64::consts::E).ln();
        assert!((g.value(loss).get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn essl_shared_label_hand_value() {
        let mut g = Graph::new();
        let batch = two_cluster_batch(&mut g, vec![7, 7, 7, 7], vec![1.0, 1.0, 2.0, 2.0]);
        let loss = essl_loss(&mut g, &batch, &unit_config()).unwrap();
        // Anchor 1 averages -log p over positives {2,3,4} with similarities
        // (1, 0, 0): p = e/(e+2), 1/(e+2), 1/(e+2). All four anchors match
        // by symmetry, so the mean equals ln(e+2) - 1/3.
        let e = std::f64::consts::E;
        let expected = (e + 2.0).ln() - 1.0 / 3.0;
        assert!((g.value(loss).get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn distinct_labels_reduce_essl_to_ssl() {
        let mut g = Graph::new();
        let batch = two_cluster_batch(&mut g, vec![0, 0, 1, 1], vec![1.0, 1.0, 9.0, 9.0]);
        let a = ssl_loss(&mut g, &batch, &unit_config()).unwrap();
        let b = essl_loss(&mut g, &batch, &unit_config()).unwrap();
        assert_eq!(g.value(a).get(0, 0), g.value(b).get(0, 0));
    }

    #[test]
    fn equal_alpha_beta_reduces_tessl_to_essl() {
        let mut g = Graph::new();
        let batch = two_cluster_batch(&mut g, vec![1, 1, 1, 1], vec![0.0, 0.0, 6.0, 6.0]);
        let cfg = ContrastiveConfig { alpha: 1.0, beta: 1.0, ..unit_config() };
        let a = essl_loss(&mut g, &batch, &cfg).unwrap();
        let b = tessl_loss(&mut g, &batch, &cfg).unwrap();
        assert!((g.value(a).get(0, 0) - g.value(b).get(0, 0)).abs() < 1e-12);
    }

    #[test]
    fn equal_times_reduce_tessl_to_essl() {
        let mut g = Graph::new();
        let batch = two_cluster_batch(&mut g, vec![1, 1, 1, 1], vec![4.0, 4.0, 4.0, 4.0]);
        let cfg = ContrastiveConfig { alpha: 1.2, beta: 0.5, ..unit_config() };
        let a = essl_loss(&mut g, &batch, &cfg).unwrap();
        let b = tessl_loss(&mut g, &batch, &cfg).unwrap();
        assert!((g.value(a).get(0, 0) - g.value(b).get(0, 0)).abs() < 1e-10);
    }

    fn random_batch(
        graph: &mut Graph,
        rng: &mut ChaCha8Rng,
        originals: usize,
        dim: usize,
    ) -> MultiViewBatch {
        let mut rows = Vec::new();
        let mut origin = Vec::new();
        let mut pair = Vec::new();
        let mut labels = Vec::new();
        let mut times = Vec::new();
        for s in 0..originals {
            let label = rng.random_range(0..2u32);
            let time = rng.random_range(0.0..48.0);
            for v in 0..2 {
                rows.push((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
                origin.push(s);
                pair.push(2 * s + (1 - v));
                labels.push(label);
                times.push(time);
            }
        }
        let z = unit_rows(graph, &rows, false);
        MultiViewBatch::new(graph, z, origin, pair, labels, times).unwrap()
    }

    #[test]
    fn losses_are_nonnegative_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut g = Graph::new();
            let batch = random_batch(&mut g, &mut rng, 5, 6);
            let cfg = ContrastiveConfig::default();
            for loss in [
                ssl_loss(&mut g, &batch, &cfg).unwrap(),
                essl_loss(&mut g, &batch, &cfg).unwrap(),
                tessl_loss(&mut g, &batch, &cfg).unwrap(),
            ] {
                assert!(g.value(loss).get(0, 0) >= -1e-12);
            }
        }
    }

    #[test]
    fn permuting_views_leaves_losses_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut g = Graph::new();
        let batch = random_batch(&mut g, &mut rng, 4, 5);
        let cfg = ContrastiveConfig { alpha: 1.0, beta: 0.6, ..unit_config() };
        let baseline: Vec<f64> = {
            let a = ssl_loss(&mut g, &batch, &cfg).unwrap();
            let b = essl_loss(&mut g, &batch, &cfg).unwrap();
            let c = tessl_loss(&mut g, &batch, &cfg).unwrap();
            [a, b, c].iter().map(|id| g.value(*id).get(0, 0)).collect()
        };

        // Reverse the view order, remapping pair and origin consistently.
        let n = batch.views();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut slot = vec![0usize; n];
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            slot[old_idx] = new_idx;
        }
        let z = g.value(batch.embeddings()).clone();
        let mut g2 = Graph::new();
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| z.row(i).to_vec()).collect();
        let z2 = unit_rows(&mut g2, &rows, false);
        let batch2 = MultiViewBatch::new(
            &g2,
            z2,
            perm.iter().map(|&i| batch.origin()[i]).collect(),
            perm.iter().map(|&i| slot[batch.pair()[i]]).collect(),
            perm.iter().map(|&i| batch.labels()[i]).collect(),
            perm.iter().map(|&i| batch.times()[i]).collect(),
        )
        .unwrap();
        let permuted: Vec<f64> = {
            let a = ssl_loss(&mut g2, &batch2, &cfg).unwrap();
            let b = essl_loss(&mut g2, &batch2, &cfg).unwrap();
            let c = tessl_loss(&mut g2, &batch2, &cfg).unwrap();
            [a, b, c].iter().map(|id| g2.value(*id).get(0, 0)).collect()
        };
        for (a, b) in baseline.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn batch_rejects_broken_pairing() {
        let mut g = Graph::new();
        let z = unit_rows(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]], false);
        let err = MultiViewBatch::new(&g, z, vec![0, 0], vec![0, 1], vec![0, 0], vec![1.0, 1.0]);
        assert!(matches!(err, Err(LossError::BadPairing { view: 0 })));
    }

    #[test]
    fn batch_rejects_non_unit_rows() {
        let mut g = Graph::new();
        let leaf = g.leaf(Tensor::from_vec(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap());
        let err = MultiViewBatch::new(&g, leaf, vec![0, 0], vec![1, 0], vec![0, 0], vec![1.0, 1.0]);
        assert!(matches!(err, Err(LossError::NotUnitNorm { row: 0, .. })));
    }

    #[test]
    fn batch_rejects_label_disagreement_within_origin() {
        let mut g = Graph::new();
        let z = unit_rows(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]], false);
        let err = MultiViewBatch::new(&g, z, vec![0, 0], vec![1, 0], vec![0, 1], vec![1.0, 1.0]);
        assert!(matches!(err, Err(LossError::InconsistentOrigin { origin: 0 })));
    }

    #[test]
    fn config_rejects_bad_temperature_and_weights() {
        let cfg = ContrastiveConfig { tau: 0.0, ..ContrastiveConfig::default() };
        assert!(matches!(cfg.validate(), Err(LossError::BadTemperature(_))));
        let cfg = ContrastiveConfig { alpha: 0.5, beta: 0.9, ..ContrastiveConfig::default() };
        assert!(matches!(cfg.validate(), Err(LossError::BadWeightRange { .. })));
    }

    #[test]
    fn sum_reduction_scales_mean_by_view_count() {
        let mut g = Graph::new();
        let batch = two_cluster_batch(&mut g, vec![0, 0, 1, 1], vec![1.0, 1.0, 2.0, 2.0]);
        let mean_cfg = unit_config();
        let sum_cfg = ContrastiveConfig { reduction: Reduction::Sum, ..mean_cfg };
        let mean = ssl_loss(&mut g, &batch, &mean_cfg).unwrap();
        let sum = ssl_loss(&mut g, &batch, &sum_cfg).unwrap();
        assert!((g.value(sum).get(0, 0) - 4.0 * g.value(mean).get(0, 0)).abs() < 1e-12);
    }
}
