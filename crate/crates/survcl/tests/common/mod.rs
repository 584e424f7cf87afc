//! Shared test oracles: central finite differences, straight-line
//! re-implementations of every loss written without the graph, and
//! brute-force metric enumerations. Nothing here calls into the code paths
//! it is used to check, beyond the forward passes under test themselves.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use survcl::autodiff::{Graph, Tensor};
use survcl::losses::{essl_loss, ssl_loss, tessl_loss, ContrastiveConfig, MultiViewBatch};
use survcl::survival::{deephit_l1, deephit_l2, HazardPmf, SurvivalLossConfig};

// ---------------------------------------------------------------------------
// Finite differences

/// Central difference gradient of `f` at `x`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let hi = f(&probe);
        probe[i] = orig - h;
        let lo = f(&probe);
        probe[i] = orig;
        grad.push((hi - lo) / (2.0 * h));
    }
    grad
}

/// Worst per-entry error between analytic and numeric gradients, measured
/// relative to the larger of the entry itself and one percent of the
/// gradient's overall scale. Entries far below that scale carry mostly
/// finite-difference cancellation noise, so dividing them by their own
/// magnitude would flag noise rather than analytic mistakes; a genuinely
/// wrong formula errs at the gradient's scale and is still caught.
pub fn max_gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs()).max(0.01 * norm).max(1e-6);
            (a - n).abs() / scale
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Contrastive losses: random cases, graph forward, straight-line oracle

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContrastiveKind {
    Ssl,
    Essl,
    Tessl,
}

/// One multi-view batch in plain vectors: `raw` is the unnormalized 2N x d
/// projection matrix, views of subject s sit at rows 2s and 2s+1.
#[derive(Debug, Clone)]
pub struct ContrastiveCase {
    pub raw: Vec<Vec<f64>>,
    pub origin: Vec<usize>,
    pub pair: Vec<usize>,
    pub labels: Vec<u32>,
    pub times: Vec<f64>,
}

impl ContrastiveCase {
    pub fn views(&self) -> usize {
        self.raw.len()
    }

    pub fn dim(&self) -> usize {
        self.raw[0].len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.raw.iter().flatten().copied().collect()
    }
}

/// Random batch with N <= `max_subjects` and projection width <= `max_dim`.
/// `unique_labels` gives every subject its own label; otherwise labels are
/// drawn from {0, 1}.
pub fn random_contrastive_case(
    rng: &mut ChaCha8Rng,
    max_subjects: usize,
    max_dim: usize,
    unique_labels: bool,
) -> ContrastiveCase {
    let subjects = rng.random_range(2..=max_subjects);
    let d = rng.random_range(2..=max_dim);
    let mut raw = Vec::with_capacity(2 * subjects);
    let mut origin = Vec::new();
    let mut pair = Vec::new();
    let mut labels = Vec::new();
    let mut times = Vec::new();
    for s in 0..subjects {
        let label = if unique_labels { s as u32 } else { rng.random_range(0..2u32) };
        let time = rng.random_range(0.0..120.0);
        for v in 0..2 {
            raw.push((0..d).map(|_| rng.random_range(-1.5..1.5)).collect());
            origin.push(s);
            pair.push(2 * s + (1 - v));
            labels.push(label);
            times.push(time);
        }
    }
    ContrastiveCase { raw, origin, pair, labels, times }
}

/// Graph forward pass from the raw (pre-normalization) matrix, optionally
/// with the analytic gradient with respect to it.
pub fn contrastive_forward(
    case: &ContrastiveCase,
    raw_flat: &[f64],
    config: &ContrastiveConfig,
    kind: ContrastiveKind,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let (rows, cols) = (case.views(), case.dim());
    let mut graph = Graph::new();
    let raw = Tensor::from_vec(rows, cols, raw_flat.to_vec()).expect("finite probe");
    let leaf = graph.leaf(if want_grad { raw.with_grad() } else { raw });
    let z = graph.l2_normalize_rows(leaf).expect("normalize");
    let batch = MultiViewBatch::new(
        &graph,
        z,
        case.origin.clone(),
        case.pair.clone(),
        case.labels.clone(),
        case.times.clone(),
    )
    .expect("valid batch");
    let loss = match kind {
        ContrastiveKind::Ssl => ssl_loss(&mut graph, &batch, config),
        ContrastiveKind::Essl => essl_loss(&mut graph, &batch, config),
        ContrastiveKind::Tessl => tessl_loss(&mut graph, &batch, config),
    }
    .expect("loss builds");
    let value = graph.value(loss).item().expect("scalar loss");
    let grad = want_grad.then(|| {
        let grads = graph.backward(loss).expect("backward");
        grads.get(leaf).expect("leaf gradient").data().to_vec()
    });
    (value, grad)
}

/// Straight-line scalar re-implementation of all three contrastive losses,
/// written directly from the definitions: unit rows, similarities over
/// temperature, optional log time-gap weights, per-anchor log-sum-exp minus
/// the mean scaled similarity over positives, averaged over anchors.
pub fn contrastive_oracle(
    case: &ContrastiveCase,
    config: &ContrastiveConfig,
    kind: ContrastiveKind,
) -> f64 {
    let n = case.views();
    let d = case.dim();
    let z: Vec<Vec<f64>> = case
        .raw
        .iter()
        .map(|row| {
            let sq: f64 = row.iter().map(|a| a * a).sum();
            let inv = 1.0 / (sq + 1e-12).sqrt();
            row.iter().map(|a| a * inv).collect()
        })
        .collect();

    let mut scaled = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..d).map(|c| z[i][c] * z[j][c]).sum();
            scaled[i][j] = dot * (1.0 / config.tau);
        }
    }

    if kind == ContrastiveKind::Tessl {
        // Independent derivation of the time-gap weights: linear map from
        // the pairwise absolute gap onto [beta, alpha], alpha when all gaps
        // coincide.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let gap = (case.times[i] - case.times[j]).abs();
                    lo = lo.min(gap);
                    hi = hi.max(gap);
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let gap = (case.times[i] - case.times[j]).abs();
                let w = if hi == lo {
                    config.alpha
                } else {
                    config.alpha - (config.alpha - config.beta) * (gap - lo) / (hi - lo)
                };
                scaled[i][j] += w.ln();
            }
        }
    }

    let mut total = 0.0;
    for i in 0..n {
        let m = (0..n).filter(|&j| j != i).map(|j| scaled[i][j]).fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = (0..n).filter(|&j| j != i).map(|j| (scaled[i][j] - m).exp()).sum();
        let lse = m + sum_exp.ln();

        let positives: Vec<usize> = match kind {
            ContrastiveKind::Ssl => vec![case.pair[i]],
            _ => (0..n).filter(|&j| j != i && case.labels[j] == case.labels[i]).collect(),
        };
        let pos_mean: f64 =
            positives.iter().map(|&j| scaled[i][j]).sum::<f64>() / positives.len() as f64;
        total += lse - pos_mean;
    }
    total / n as f64
}

// ---------------------------------------------------------------------------
// Discrete-time survival losses: random cases, graph forward, oracles

#[derive(Debug, Clone)]
pub struct DeepHitCase {
    pub logits: Vec<Vec<f64>>,
    pub bins: Vec<usize>,
    pub events: Vec<bool>,
}

impl DeepHitCase {
    pub fn n(&self) -> usize {
        self.logits.len()
    }

    pub fn k(&self) -> usize {
        self.logits[0].len()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.logits.iter().flatten().copied().collect()
    }
}

/// Random hazard-head batch. Subject 0 always has an event in bin 0 and
/// subject 1 sits in the last bin, so the ranking loss always has at least
/// one comparable pair; censored subjects stay off the final bin, where the
/// predicted survival can touch the log clamp and break differentiability.
pub fn random_deephit_case(rng: &mut ChaCha8Rng, max_n: usize, max_k: usize) -> DeepHitCase {
    let n = rng.random_range(2..=max_n);
    let k = rng.random_range(3..=max_k);
    let mut logits = Vec::with_capacity(n);
    let mut bins = Vec::with_capacity(n);
    let mut events = Vec::with_capacity(n);
    for i in 0..n {
        logits.push((0..k).map(|_| rng.random_range(-2.0..2.0)).collect());
        let (bin, event) = if i == 0 {
            (0, true)
        } else if i == 1 {
            (k - 1, true)
        } else {
            let event = rng.random_bool(0.6);
            let bin = rng.random_range(0..k);
            (if !event && bin == k - 1 { k - 2 } else { bin }, event)
        };
        bins.push(bin);
        events.push(event);
    }
    DeepHitCase { logits, bins, events }
}

/// Graph forward for one of the two survival losses, from raw logits through
/// the row softmax, optionally with the analytic gradient.
pub fn deephit_forward(
    case: &DeepHitCase,
    logits_flat: &[f64],
    config: &SurvivalLossConfig,
    ranking: bool,
    want_grad: bool,
) -> (f64, Option<Vec<f64>>) {
    let (n, k) = (case.n(), case.k());
    let mut graph = Graph::new();
    let logits = Tensor::from_vec(n, k, logits_flat.to_vec()).expect("finite probe");
    let leaf = graph.leaf(if want_grad { logits.with_grad() } else { logits });
    let probs = graph.softmax_rows(leaf).expect("softmax");
    let pmf = HazardPmf::from_node(&graph, probs).expect("rows are distributions");
    let loss = if ranking {
        deephit_l2(&mut graph, &pmf, &case.bins, &case.events, config).expect("ranking loss")
    } else {
        deephit_l1(&mut graph, &pmf, &case.bins, &case.events, config.average)
            .expect("likelihood loss")
    };
    let value = graph.value(loss).item().expect("scalar loss");
    let grad = want_grad.then(|| {
        let grads = graph.backward(loss).expect("backward");
        grads.get(leaf).expect("leaf gradient").data().to_vec()
    });
    (value, grad)
}

fn softmax_rows_oracle(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.iter().map(|e| e / total).collect()
        })
        .collect()
}

fn cumulative_incidence_oracle(pmf: &[Vec<f64>]) -> Vec<Vec<f64>> {
    pmf.iter()
        .map(|row| {
            let mut acc = 0.0;
            row.iter()
                .map(|&p| {
                    acc += p;
                    acc
                })
                .collect()
        })
        .collect()
}

/// Straight-line negative log-likelihood: events score their bin's hazard,
/// censored subjects the survival past their bin, both floored at 1e-12.
pub fn deephit_l1_oracle(case: &DeepHitCase, average: bool) -> f64 {
    let pmf = softmax_rows_oracle(&case.logits);
    let cif = cumulative_incidence_oracle(&pmf);
    let mut total = 0.0;
    for i in 0..case.n() {
        let k = case.bins[i];
        let value = if case.events[i] { pmf[i][k] } else { 1.0 - cif[i][k] };
        total += value.max(1e-12).ln();
    }
    if average {
        -total / case.n() as f64
    } else {
        -total
    }
}

/// Straight-line exponential ranking loss over pairs where subject i has an
/// event in a strictly earlier bin than subject j, including the gamma scale.
pub fn deephit_l2_oracle(case: &DeepHitCase, config: &SurvivalLossConfig) -> f64 {
    let pmf = softmax_rows_oracle(&case.logits);
    let cif = cumulative_incidence_oracle(&pmf);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..case.n() {
        if !case.events[i] {
            continue;
        }
        for j in 0..case.n() {
            if j != i && case.bins[i] < case.bins[j] {
                pairs += 1;
                total += (-(cif[i][case.bins[i]] - cif[j][case.bins[i]]) / config.sigma).exp();
            }
        }
    }
    if pairs == 0 {
        return 0.0;
    }
    if config.average {
        config.gamma * total / pairs as f64
    } else {
        config.gamma * total
    }
}

// ---------------------------------------------------------------------------
// Survival metric oracles

/// Step lookup used by the metric oracles: piecewise-constant survival where
/// the value in the bin after `crossed` interior edges is column crossed-1,
/// and 1 before the first edge. Linear scan, no binary search.
pub fn survival_at_oracle(survival: &[Vec<f64>], edges: &[f64], subject: usize, t: f64) -> f64 {
    let k = edges.len() - 1;
    let mut crossed = 0usize;
    for edge in &edges[1..=k] {
        if *edge <= t {
            crossed += 1;
        }
    }
    if crossed == 0 {
        1.0
    } else {
        survival[subject][crossed - 1]
    }
}

/// Brute-force time-dependent concordance: enumerate every ordered pair with
/// an event in i strictly before j's time; credit 1 for lower predicted
/// survival at t_i, 0.5 for an exact tie. Returns None with no comparable
/// pairs.
pub fn ctd_oracle(
    survival: &[Vec<f64>],
    edges: &[f64],
    times: &[f64],
    events: &[bool],
) -> Option<f64> {
    let n = times.len();
    let mut comparable = 0u64;
    let mut mass = 0.0;
    for i in 0..n {
        if !events[i] {
            continue;
        }
        let s_i = survival_at_oracle(survival, edges, i, times[i]);
        for j in 0..n {
            if j == i || !(times[i] < times[j]) {
                continue;
            }
            comparable += 1;
            let s_j = survival_at_oracle(survival, edges, j, times[i]);
            if s_i < s_j {
                mass += 1.0;
            } else if s_i == s_j {
                mass += 0.5;
            }
        }
    }
    (comparable > 0).then(|| mass / comparable as f64)
}

/// Product-limit estimate evaluated by direct counting: at each distinct
/// time with at least one firing of `indicator`, multiply in (1 - d/n) where
/// n counts subjects still at risk. Returns (knots, values).
pub fn km_oracle(times: &[f64], indicator: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut distinct: Vec<f64> = times.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    distinct.dedup();
    let mut knots = Vec::new();
    let mut values = Vec::new();
    let mut prod = 1.0;
    for &t in &distinct {
        let fired = times
            .iter()
            .zip(indicator)
            .filter(|(&ti, &ind)| ti == t && ind)
            .count();
        if fired == 0 {
            continue;
        }
        let at_risk = times.iter().filter(|&&ti| ti >= t).count();
        prod *= 1.0 - fired as f64 / at_risk as f64;
        knots.push(t);
        values.push(prod);
    }
    (knots, values)
}

fn step_eval(knots: &[f64], values: &[f64], t: f64, strict: bool) -> f64 {
    let mut last = 1.0;
    for (knot, value) in knots.iter().zip(values) {
        let crossed = if strict { *knot < t } else { *knot <= t };
        if crossed {
            last = *value;
        } else {
            break;
        }
    }
    last
}

/// Direct-sum IPCW Brier score at time t, with its own censoring
/// Kaplan-Meier: event-before-t terms weigh by G(T_i^-), still-at-risk terms
/// by G(t); zero-weight terms drop out and the divisor stays N.
pub fn brier_oracle(
    survival: &[Vec<f64>],
    edges: &[f64],
    times: &[f64],
    events: &[bool],
    t: f64,
) -> f64 {
    let censor_indicator: Vec<bool> = events.iter().map(|e| !e).collect();
    let (knots, values) = km_oracle(times, &censor_indicator);
    let n = times.len();
    let mut total = 0.0;
    for i in 0..n {
        let s = survival_at_oracle(survival, edges, i, t);
        if times[i] <= t && events[i] {
            let w = step_eval(&knots, &values, times[i], true);
            if w > 0.0 {
                total += s * s / w;
            }
        } else if times[i] > t {
            let w = step_eval(&knots, &values, t, false);
            if w > 0.0 {
                total += (1.0 - s) * (1.0 - s) / w;
            }
        }
    }
    total / n as f64
}
