//! Discrete-time survival head: a hazard distribution over time bins with a
//! likelihood loss for observed and censored samples plus an exponential
//! ranking loss on comparable pairs.

use thiserror::Error;

use crate::autodiff::{mlp_forward, AutodiffError, Graph, NodeId, Tensor};

/// Floor applied to every log argument. Censored samples in the last bin
/// have survival exactly 0, which must not produce an infinite loss.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SurvivalError {
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("discretize needs a non-empty time list")]
    NoTimes,
    #[error("time {0} is not finite or negative")]
    BadTime(f64),
    #[error("cannot build {k} strictly increasing bins: edge {edge} collides at {value}")]
    DegenerateEdges { k: usize, edge: usize, value: f64 },
    #[error("head produced {got} outputs, grid has {expected} bins")]
    HeadDimension { got: usize, expected: usize },
    #[error("hazard row {row} sums to {sum}, expected 1 within 1e-9")]
    NotNormalized { row: usize, sum: f64 },
    #[error("bin index {bin} out of range for {k} bins (sample {sample})")]
    BinOutOfRange { sample: usize, bin: usize, k: usize },
    #[error("got {bins} bin indices and {events} event flags for {n} rows")]
    LabelLengthMismatch { n: usize, bins: usize, events: usize },
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
    #[error("gamma must be nonnegative, got {0}")]
    BadGamma(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridScheme {
    Equidistant,
    Quantile,
}

/// K time bins delimited by K+1 strictly increasing edges.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    edges: Vec<f64>,
    scheme: GridScheme,
}

impl TimeGrid {
    pub fn k(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn scheme(&self) -> GridScheme {
        self.scheme
    }

    pub fn from_edges(edges: Vec<f64>, scheme: GridScheme) -> Result<Self, SurvivalError> {
        if edges.len() < 3 {
            return Err(SurvivalError::TooFewBins(edges.len().saturating_sub(1)));
        }
        for (i, w) in edges.windows(2).enumerate() {
            if !(w[1] > w[0]) {
                return Err(SurvivalError::DegenerateEdges {
                    k: edges.len() - 1,
                    edge: i + 1,
                    value: w[1],
                });
            }
        }
        Ok(TimeGrid { edges, scheme })
    }

    /// Bin index with edges[k] <= t < edges[k+1]; the last bin is
    /// right-closed and times outside the grid clamp into the end bins.
    pub fn bin_of(&self, t: f64) -> usize {
        let k = self.k();
        let inner = &self.edges[1..=k];
        inner.partition_point(|e| *e <= t).min(k - 1)
    }
}

/// Builds a grid covering `times` and returns each sample's bin index.
pub fn discretize(
    times: &[f64],
    k: usize,
    scheme: GridScheme,
) -> Result<(TimeGrid, Vec<usize>), SurvivalError> {
    if k < 2 {
        return Err(SurvivalError::TooFewBins(k));
    }
    if times.is_empty() {
        return Err(SurvivalError::NoTimes);
    }
    for &t in times {
        if !t.is_finite() || t < 0.0 {
            return Err(SurvivalError::BadTime(t));
        }
    }
    let edges = match scheme {
        GridScheme::Equidistant => {
            let lo = times.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let width = (hi - lo) / k as f64;
            let mut edges: Vec<f64> = (0..=k).map(|j| lo + width * j as f64).collect();
            edges[k] = hi;
            edges
        }
        GridScheme::Quantile => {
            let mut sorted = times.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("times are finite"));
            (0..=k).map(|j| quantile_sorted(&sorted, j as f64 / k as f64)).collect()
        }
    };
    let grid = TimeGrid::from_edges(edges, scheme)?;
    let bins = times.iter().map(|&t| grid.bin_of(t)).collect();
    Ok((grid, bins))
}

/// Linear-interpolation quantile of a sorted slice (the common `h = (n-1)p`
/// definition).
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// A graph node holding an N x K hazard distribution (rows sum to 1).
#[derive(Debug, Clone, Copy)]
pub struct HazardPmf {
    node: NodeId,
    n: usize,
    k: usize,
}

impl HazardPmf {
    /// Wraps an existing node after checking each row is a distribution.
    pub fn from_node(graph: &Graph, node: NodeId) -> Result<Self, SurvivalError> {
        let v = graph.value(node);
        for i in 0..v.rows() {
            let sum: f64 = v.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-9 || v.row(i).iter().any(|&p| p < 0.0) {
                return Err(SurvivalError::NotNormalized { row: i, sum });
            }
        }
        Ok(HazardPmf { node, n: v.rows(), k: v.cols() })
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Runs the head layers on representations and softmaxes into hazards.
pub fn pmf_forward(
    graph: &mut Graph,
    head: &[(NodeId, NodeId)],
    input: NodeId,
    k: usize,
) -> Result<HazardPmf, SurvivalError> {
    let logits = mlp_forward(graph, head, input, false)?;
    let got = graph.value(logits).cols();
    if got != k {
        return Err(SurvivalError::HeadDimension { got, expected: k });
    }
    let node = graph.softmax_rows(logits)?;
    HazardPmf::from_node(graph, node)
}

/// Cumulative incidence (row prefix sums of the hazard) and survival.
#[derive(Debug, Clone, Copy)]
pub struct SurvivalCurves {
    pub cif: NodeId,
    pub survival: NodeId,
}

pub fn cif(graph: &mut Graph, pmf: &HazardPmf) -> Result<SurvivalCurves, SurvivalError> {
    let k = pmf.k();
    let mut tri = Tensor::zeros(k, k);
    for m in 0..k {
        for j in m..k {
            tri.data_mut()[m * k + j] = 1.0;
        }
    }
    let tri = graph.constant(tri);
    let cif = graph.matmul(pmf.node(), tri)?;
    let neg = graph.mul_scalar(cif, -1.0)?;
    let one = graph.constant_scalar(1.0);
    let survival = graph.add(neg, one)?;
    Ok(SurvivalCurves { cif, survival })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalLossConfig {
    pub gamma: f64,
    pub sigma: f64,
    /// Divide the likelihood by N and the ranking term by the comparable
    /// pair count; `false` keeps the literal sums.
    pub average: bool,
}

impl Default for SurvivalLossConfig {
    fn default() -> Self {
        SurvivalLossConfig { gamma: 0.1, sigma: 0.1, average: true }
    }
}

fn check_labels(pmf: &HazardPmf, bins: &[usize], events: &[bool]) -> Result<(), SurvivalError> {
    if bins.len() != pmf.n() || events.len() != pmf.n() {
        return Err(SurvivalError::LabelLengthMismatch {
            n: pmf.n(),
            bins: bins.len(),
            events: events.len(),
        });
    }
    for (sample, &bin) in bins.iter().enumerate() {
        if bin >= pmf.k() {
            return Err(SurvivalError::BinOutOfRange { sample, bin, k: pmf.k() });
        }
    }
    Ok(())
}

/// `max(x, LOG_FLOOR)` composed from relu, so log never sees zero.
fn clamp_floor(graph: &mut Graph, x: NodeId) -> Result<NodeId, AutodiffError> {
    let down = graph.constant_scalar(-LOG_FLOOR);
    let shifted = graph.add(x, down)?;
    let rect = graph.relu(shifted)?;
    let up = graph.constant_scalar(LOG_FLOOR);
    graph.add(rect, up)
}

/// Negative log-likelihood of the hitting-time distribution: events score
/// their bin's hazard, censored samples their survival past the bin.
pub fn deephit_l1(
    graph: &mut Graph,
    pmf: &HazardPmf,
    bins: &[usize],
    events: &[bool],
    average: bool,
) -> Result<NodeId, SurvivalError> {
    check_labels(pmf, bins, events)?;
    let (n, k) = (pmf.n(), pmf.k());

    let mut event_mask = Tensor::zeros(n, k);
    let mut censor_mask = Tensor::zeros(n, k);
    for i in 0..n {
        let target = if events[i] { &mut event_mask } else { &mut censor_mask };
        target.data_mut()[i * k + bins[i]] = 1.0;
    }

    let curves = cif(graph, pmf)?;
    let clamped_h = clamp_floor(graph, pmf.node())?;
    let log_h = graph.log(clamped_h)?;
    let clamped_s = clamp_floor(graph, curves.survival)?;
    let log_s = graph.log(clamped_s)?;

    let event_mask = graph.constant(event_mask);
    let censor_mask = graph.constant(censor_mask);
    let event_part = graph.mul(log_h, event_mask)?;
    let censor_part = graph.mul(log_s, censor_mask)?;
    let event_sum = graph.sum(event_part)?;
    let censor_sum = graph.sum(censor_part)?;
    let total = graph.add(event_sum, censor_sum)?;
    let scale = if average { -1.0 / n as f64 } else { -1.0 };
    Ok(graph.mul_scalar(total, scale)?)
}

/// Exponential ranking loss over comparable pairs: sample i with an event in
/// an earlier bin than j should have the higher cumulative incidence at its
/// own bin.
pub fn deephit_l2(
    graph: &mut Graph,
    pmf: &HazardPmf,
    bins: &[usize],
    events: &[bool],
    config: &SurvivalLossConfig,
) -> Result<NodeId, SurvivalError> {
    check_labels(pmf, bins, events)?;
    if !(config.sigma > 0.0 && config.sigma.is_finite()) {
        return Err(SurvivalError::BadSigma(config.sigma));
    }
    if !(config.gamma >= 0.0 && config.gamma.is_finite()) {
        return Err(SurvivalError::BadGamma(config.gamma));
    }
    let (n, k) = (pmf.n(), pmf.k());

    let mut comparable = Tensor::zeros(n, n);
    let mut pairs = 0usize;
    for i in 0..n {
        if !events[i] {
            continue;
        }
        for j in 0..n {
            if j != i && bins[i] < bins[j] {
                comparable.data_mut()[i * n + j] = 1.0;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Ok(graph.constant_scalar(0.0));
    }

    let curves = cif(graph, pmf)?;
    let mut onehot = Tensor::zeros(n, k);
    for i in 0..n {
        onehot.data_mut()[i * k + bins[i]] = 1.0;
    }
    let onehot = graph.constant(onehot);
    let cif_t = graph.transpose(curves.cif)?;
    // P[i][j] is sample j's cumulative incidence at sample i's bin.
    let p = graph.matmul(onehot, cif_t)?;

    let mut identity = Tensor::zeros(n, n);
    for i in 0..n {
        identity.data_mut()[i * n + i] = 1.0;
    }
    let identity = graph.constant(identity);
    let diag_only = graph.mul(p, identity)?;
    let col_ones = graph.constant(Tensor::filled(n, 1, 1.0));
    let diag = graph.matmul(diag_only, col_ones)?;
    let row_ones = graph.constant(Tensor::filled(1, n, 1.0));
    let diag_rows = graph.matmul(diag, row_ones)?;
    let neg_p = graph.mul_scalar(p, -1.0)?;
    // D[i][j] = F_i(bin_i) - F_j(bin_i).
    let diff = graph.add(diag_rows, neg_p)?;

    let scaled = graph.mul_scalar(diff, -1.0 / config.sigma)?;
    let eta = graph.exp(scaled)?;
    let comparable = graph.constant(comparable);
    let masked = graph.mul(eta, comparable)?;
    let total = graph.sum(masked)?;
    let scale = if config.average { config.gamma / pairs as f64 } else { config.gamma };
    Ok(graph.mul_scalar(total, scale)?)
}

/// Likelihood plus ranking loss.
pub fn total_loss(
    graph: &mut Graph,
    pmf: &HazardPmf,
    bins: &[usize],
    events: &[bool],
    config: &SurvivalLossConfig,
) -> Result<NodeId, SurvivalError> {
    let l1 = deephit_l1(graph, pmf, bins, events, config.average)?;
    let l2 = deephit_l2(graph, pmf, bins, events, config)?;
    Ok(graph.add(l1, l2)?)
}
