//! Evaluation of trained models: survival matrices, split metrics with a
//! leakage guard, the multi-seed protocol report, and the (alpha, beta)
//! ablation sweep.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{mlp_forward, Graph, Tensor};
use crate::config::{ExperimentConfig, Mode};
use crate::data::{Dataset, Sample, Split};
use crate::metrics::{concordance_td, default_time_range, integrated_brier, EvalSet};
use crate::survival::{cif, pmf_forward, TimeGrid};

use super::model::{HeadKind, SurvModel};
use super::train::{finetune, pretrain};
use super::PipelineError;

/// Trapezoid points used when integrating the Brier score.
pub const IBS_POINTS: usize = 100;

/// Per-subject survival curves S(t_k | x) for a hazard-headed model.
pub fn survival_matrix(
    model: &SurvModel,
    bins: usize,
    samples: &[&Sample],
) -> Result<Tensor, PipelineError> {
    if model.head_kind() != HeadKind::Hazard {
        return Err(PipelineError::WrongHead {
            expected: "hazard",
            got: model.head_kind().as_str(),
        });
    }
    if samples.is_empty() {
        return Err(PipelineError::SplitTooSmall { split: "evaluation", need: 1, got: 0 });
    }
    let mut graph = Graph::new();
    let nodes = model.insert(&mut graph);
    let d = samples[0].features.len();
    let mut rows = Vec::with_capacity(samples.len() * d);
    for s in samples {
        rows.extend_from_slice(&s.features);
    }
    let x = graph.constant(Tensor::from_vec(samples.len(), d, rows)?);
    let r = mlp_forward(&mut graph, &nodes.encoder, x, false)?;
    let pmf = pmf_forward(&mut graph, std::slice::from_ref(&nodes.head), r, bins)?;
    let curves = cif(&mut graph, &pmf)?;
    Ok(graph.value(curves.survival).clone())
}

#[derive(Debug, Clone, Copy)]
pub struct SplitMetrics {
    pub c_td: f64,
    pub ibs: f64,
}

/// Computes C-td and IBS on one split, refusing any overlap with the
/// training subjects recorded for the model.
pub fn evaluate_split(
    model: &SurvModel,
    grid: &TimeGrid,
    dataset: &Dataset,
    split: Split,
    train_ids: &[String],
) -> Result<SplitMetrics, PipelineError> {
    let guard: BTreeSet<&String> = train_ids.iter().collect();
    let overlap = dataset.ids(split).iter().filter(|id| guard.contains(id)).count();
    if overlap > 0 {
        return Err(PipelineError::Leakage { overlap });
    }
    let samples = dataset.subset(split);
    let survival = survival_matrix(model, grid.k(), &samples)?;
    let times: Vec<f64> = samples.iter().map(|s| s.time).collect();
    let events: Vec<bool> = samples.iter().map(|s| s.event).collect();
    let eval = EvalSet::new(survival, grid.clone(), times.clone(), events.clone())?;
    let c_td = concordance_td(&eval)?;
    let (t_min, t_max) = default_time_range(&times, &events)?;
    let ibs = integrated_brier(&eval, t_min, t_max, IBS_POINTS)?;
    Ok(SplitMetrics { c_td, ibs })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricSummary {
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

impl MetricSummary {
    fn new(per_seed: Vec<f64>) -> Self {
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        MetricSummary { per_seed, mean }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub c_td: MetricSummary,
    pub ibs: MetricSummary,
    pub wall_clock_s: f64,
}

impl MetricsReport {
    pub fn new(config_hash: String, seeds: Vec<u64>, runs: &[SplitMetrics], wall_clock_s: f64) -> Self {
        MetricsReport {
            config_hash,
            seeds,
            c_td: MetricSummary::new(runs.iter().map(|r| r.c_td).collect()),
            ibs: MetricSummary::new(runs.iter().map(|r| r.ibs).collect()),
            wall_clock_s,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One full run per seed (pretrain unless mode is none, finetune, evaluate
/// on `split`), averaged into a report.
pub fn run_protocol(
    config: &ExperimentConfig,
    dataset: &Dataset,
    split: Split,
) -> Result<MetricsReport, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let train_ids = dataset.ids(Split::Train);
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let pretrained = match config.mode {
            Mode::None => None,
            _ => Some(pretrain(config, dataset, seed)?),
        };
        let tuned = finetune(config, dataset, pretrained.as_ref().map(|p| &p.model), seed)?;
        runs.push(evaluate_split(&tuned.model, &tuned.grid, dataset, split, &train_ids)?);
    }
    Ok(MetricsReport::new(
        config.hash(),
        config.seeds.clone(),
        &runs,
        start.elapsed().as_secs_f64(),
    ))
}

/// The ablation grid reported by the reference experiments.
pub const DEFAULT_SWEEP_GRID: &[(f64, f64)] =
    &[(1.0, 0.5), (1.0, 0.7), (1.0, 0.9), (1.1, 1.0), (1.3, 1.0), (1.5, 1.0)];

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub report: MetricsReport,
}

/// Runs the full protocol once per (alpha, beta) cell, sequentially.
pub fn ablation_sweep(
    config: &ExperimentConfig,
    dataset: &Dataset,
    cells: &[(f64, f64)],
    split: Split,
) -> Result<Vec<SweepRow>, PipelineError> {
    if config.mode != Mode::Tessl {
        return Err(PipelineError::SweepMode(config.mode));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for &(alpha, beta) in cells {
        let mut cell = config.clone();
        cell.alpha = alpha;
        cell.beta = beta;
        cell.validate()?;
        let report = run_protocol(&cell, dataset, split)?;
        rows.push(SweepRow { alpha, beta, report });
    }
    Ok(rows)
}
