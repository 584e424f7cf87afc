//! Training loops: contrastive pretraining with layerwise-adaptive updates
//! and gradient accumulation, and survival finetuning with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{mlp_forward, Graph, Tensor};
use crate::config::{ExperimentConfig, Mode};
use crate::data::{build_multiview_batch, AugmentConfig, Dataset, Sample, Split};
use crate::losses::{essl_loss, ssl_loss, tessl_loss, ContrastiveConfig, MultiViewBatch, Reduction};
use crate::optim::{pretrain_lr, Adam, GradAccumulator, Lars, Optimizer};
use crate::survival::{discretize, pmf_forward, total_loss, SurvivalLossConfig, TimeGrid};

use super::model::SurvModel;
use super::PipelineError;

/// Momentum shared by the pretraining optimizer across all runs.
const LARS_MOMENTUM: f64 = 0.9;

fn check_dims(config: &ExperimentConfig, dataset: &Dataset) -> Result<(), PipelineError> {
    if dataset.dim() != config.input_dim {
        return Err(PipelineError::DataDimension { data: dataset.dim(), config: config.input_dim });
    }
    Ok(())
}

fn features_tensor(samples: &[&Sample]) -> Tensor {
    let d = samples[0].features.len();
    let mut rows = Vec::with_capacity(samples.len() * d);
    for s in samples {
        rows.extend_from_slice(&s.features);
    }
    Tensor::from_vec(samples.len(), d, rows).expect("dataset features are finite")
}

#[derive(Debug)]
pub struct PretrainOutput {
    pub model: SurvModel,
    /// Mean micro-batch loss per effective optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean micro-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Effective optimizer steps taken.
    pub steps: u64,
}

/// Contrastive pretraining over multi-view batches of the training split.
pub fn pretrain(
    config: &ExperimentConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<PretrainOutput, PipelineError> {
    config.validate()?;
    if config.mode == Mode::None {
        return Err(PipelineError::PretrainMode(config.mode));
    }
    check_dims(config, dataset)?;
    let mut train = dataset.indices(Split::Train);
    if train.len() < config.batch_size {
        return Err(PipelineError::SplitTooSmall {
            split: "train",
            need: config.batch_size,
            got: train.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SurvModel::pretrain_init(config, &mut rng);
    let contrastive = ContrastiveConfig {
        tau: config.tau,
        alpha: config.alpha,
        beta: config.beta,
        reduction: Reduction::MeanOverAnchors,
    };
    contrastive.validate()?;
    let augment = AugmentConfig { noise_sigma: config.noise_sigma, mask_prob: config.mask_prob };
    let mut lars = Lars::new(pretrain_lr(config.effective_batch()), LARS_MOMENTUM, config.lars_lambda)?;
    let mut accumulator = GradAccumulator::new(config.accum_steps)?;

    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.pretrain_epochs);
    let mut window = Vec::with_capacity(config.accum_steps);
    let mut steps = 0u64;

    for _ in 0..config.pretrain_epochs {
        train.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in train.chunks_exact(config.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &dataset.samples()[i]).collect();
            let views = build_multiview_batch(&samples, &augment, &mut rng)?;

            let mut graph = Graph::new();
            let nodes = model.insert(&mut graph);
            let x = graph.constant(views.features);
            let r = mlp_forward(&mut graph, &nodes.encoder, x, false)?;
            let raw = mlp_forward(&mut graph, std::slice::from_ref(&nodes.head), r, false)?;
            // Center projections across the batch before normalization; a
            // single shared embedding point then has no representation, so
            // the contrastive loss cannot collapse onto one.
            let n_rows = graph.value(raw).rows();
            let neg_mean = graph.constant(
                Tensor::from_vec(1, n_rows, vec![-1.0 / n_rows as f64; n_rows])
                    .expect("centering row is finite"),
            );
            let col_means = graph.matmul(neg_mean, raw)?;
            let centered = graph.add(raw, col_means)?;
            let z = graph.l2_normalize_rows(centered)?;
            let batch = MultiViewBatch::new(
                &graph,
                z,
                views.origin,
                views.pair,
                views.labels,
                views.times,
            )?;
            let loss_node = match config.mode {
                Mode::Ssl => ssl_loss(&mut graph, &batch, &contrastive)?,
                Mode::Essl => essl_loss(&mut graph, &batch, &contrastive)?,
                Mode::Tessl => tessl_loss(&mut graph, &batch, &contrastive)?,
                Mode::None => unreachable!("rejected above"),
            };
            let loss = graph.value(loss_node).item().expect("losses are scalar");
            let grads = graph.backward(loss_node)?;
            // Bias rows are frozen during pretraining: they bypass the trust
            // ratio, so at the contrastive learning rate they overwhelm the
            // normalized projections within a few steps.
            let grad_list: Vec<Tensor> = nodes
                .all
                .iter()
                .map(|id| grads.get(*id).expect("trainable leaf has a gradient"))
                .zip(model.tensors())
                .map(|(g, p)| {
                    if p.rows() == 1 {
                        Tensor::zeros(g.rows(), g.cols())
                    } else {
                        g.clone()
                    }
                })
                .collect();
            let stepped =
                accumulator.accumulate_and_maybe_step(&mut lars, model.tensors_mut(), &grad_list)?;
            window.push(loss);
            epoch_sum += loss;
            epoch_batches += 1;
            if stepped {
                steps += 1;
                step_losses.push(window.iter().sum::<f64>() / window.len() as f64);
                window.clear();
            }
        }
        epoch_losses.push(epoch_sum / epoch_batches as f64);
    }
    Ok(PretrainOutput { model, step_losses, epoch_losses, steps })
}

#[derive(Debug)]
pub struct FinetuneOutput {
    pub model: SurvModel,
    pub grid: TimeGrid,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Optimizer steps taken.
    pub steps: u64,
}

/// Survival finetuning: the encoder (pretrained or fresh) gains a hazard
/// head over a time grid fitted to the training split. With
/// `freeze_encoder` only the head is updated.
pub fn finetune(
    config: &ExperimentConfig,
    dataset: &Dataset,
    source: Option<&SurvModel>,
    seed: u64,
) -> Result<FinetuneOutput, PipelineError> {
    config.validate()?;
    check_dims(config, dataset)?;
    let mut train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(PipelineError::SplitTooSmall { split: "train", need: 1, got: 0 });
    }

    let train_times: Vec<f64> = train.iter().map(|&i| dataset.samples()[i].time).collect();
    let (grid, _) = discretize(&train_times, config.bins, config.grid)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SurvModel::finetune_init(config, source, &mut rng)?;
    let mut adam = Adam::new(config.finetune_lr)?;
    let loss_config =
        SurvivalLossConfig { gamma: config.gamma, sigma: config.sigma, average: true };
    let first = if config.freeze_encoder { model.head_start() } else { 0 };

    let mut epoch_losses = Vec::with_capacity(config.finetune_epochs);
    let mut steps = 0u64;
    for _ in 0..config.finetune_epochs {
        train.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in train.chunks(config.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &dataset.samples()[i]).collect();
            let bins: Vec<usize> = samples.iter().map(|s| grid.bin_of(s.time)).collect();
            let events: Vec<bool> = samples.iter().map(|s| s.event).collect();

            let mut graph = Graph::new();
            let nodes = model.insert(&mut graph);
            let x = graph.constant(features_tensor(&samples));
            let r = mlp_forward(&mut graph, &nodes.encoder, x, false)?;
            let pmf = pmf_forward(&mut graph, std::slice::from_ref(&nodes.head), r, config.bins)?;
            let loss_node = total_loss(&mut graph, &pmf, &bins, &events, &loss_config)?;
            let loss = graph.value(loss_node).item().expect("losses are scalar");
            let grads = graph.backward(loss_node)?;
            let grad_list: Vec<Tensor> = nodes.all[first..]
                .iter()
                .map(|id| grads.get(*id).expect("trainable leaf has a gradient").clone())
                .collect();
            adam.step(&mut model.tensors_mut()[first..], &grad_list)?;
            steps += 1;
            epoch_sum += loss;
            epoch_batches += 1;
        }
        epoch_losses.push(epoch_sum / epoch_batches as f64);
    }
    Ok(FinetuneOutput { model, grid, epoch_losses, steps })
}
