//! Censoring-aware evaluation: time-dependent concordance over comparable
//! pairs and the inverse-probability-weighted Brier score with its
//! trapezoidal integral.

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::survival::TimeGrid;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("survival matrix has {rows} rows and {cols} bins, expected {n} subjects and {k} bins")]
    ShapeMismatch { rows: usize, cols: usize, n: usize, k: usize },
    #[error("survival value {value} at ({row}, {col}) is outside [0, 1]")]
    BadSurvivalValue { row: usize, col: usize, value: f64 },
    #[error("survival row {row} increases at bin {col}")]
    NotMonotone { row: usize, col: usize },
    #[error("no comparable pairs: the concordance index is undefined")]
    NoComparablePairs,
    #[error("integration range [{t_min}, {t_max}] is empty")]
    BadRange { t_min: f64, t_max: f64 },
    #[error("need at least 2 integration points, got {0}")]
    TooFewPoints(usize),
    #[error("no observed events: default time range is undefined")]
    NoEvents,
    #[error("step function knots must be strictly increasing")]
    UnsortedKnots,
    #[error("step function needs one value per knot: {knots} knots, {values} values")]
    KnotValueMismatch { knots: usize, values: usize },
}

/// Predictions plus ground truth for one evaluation split.
#[derive(Debug, Clone)]
pub struct EvalSet {
    survival: Tensor,
    grid: TimeGrid,
    times: Vec<f64>,
    events: Vec<bool>,
}

impl EvalSet {
    /// Validates shapes, monotone rows, and values in [0, 1] (values within
    /// 1e-9 outside are snapped to the boundary; softmax round-off lands
    /// there).
    pub fn new(
        survival: Tensor,
        grid: TimeGrid,
        times: Vec<f64>,
        events: Vec<bool>,
    ) -> Result<Self, MetricsError> {
        let n = times.len();
        let k = grid.k();
        if survival.rows() != n || survival.cols() != k || events.len() != n {
            return Err(MetricsError::ShapeMismatch {
                rows: survival.rows(),
                cols: survival.cols(),
                n,
                k,
            });
        }
        let mut survival = survival;
        for row in 0..n {
            for col in 0..k {
                let value = survival.get(row, col);
                if !(-1e-9..=1.0 + 1e-9).contains(&value) {
                    return Err(MetricsError::BadSurvivalValue { row, col, value });
                }
                if value < 0.0 || value > 1.0 {
                    survival.data_mut()[row * k + col] = value.clamp(0.0, 1.0);
                }
                if col > 0 && survival.get(row, col) > survival.get(row, col - 1) {
                    return Err(MetricsError::NotMonotone { row, col });
                }
            }
        }
        Ok(EvalSet { survival, grid, times, events })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn events(&self) -> &[bool] {
        &self.events
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Predicted survival for a subject at an arbitrary time. Piecewise
    /// constant on the grid: inside bin k the value is the survival through
    /// bin k-1, dropping at each edge, 1 before the first interior edge and
    /// flat after the last.
    pub fn survival_at(&self, subject: usize, t: f64) -> f64 {
        let k = self.grid.k();
        let interior = &self.grid.edges()[1..=k];
        let crossed = interior.partition_point(|e| *e <= t);
        if crossed == 0 {
            1.0
        } else {
            self.survival.get(subject, crossed - 1)
        }
    }
}

/// Right-continuous step function with a left-limit evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
    initial: f64,
}

impl StepFunction {
    pub fn new(knots: Vec<f64>, values: Vec<f64>, initial: f64) -> Result<Self, MetricsError> {
        if knots.len() != values.len() {
            return Err(MetricsError::KnotValueMismatch {
                knots: knots.len(),
                values: values.len(),
            });
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(MetricsError::UnsortedKnots);
        }
        Ok(StepFunction { knots, values, initial })
    }

    /// Value at t, drops included: the knot at t counts.
    pub fn eval(&self, t: f64) -> f64 {
        match self.knots.partition_point(|k| *k <= t) {
            0 => self.initial,
            idx => self.values[idx - 1],
        }
    }

    /// Left limit at t: the knot at t does not count.
    pub fn eval_left(&self, t: f64) -> f64 {
        match self.knots.partition_point(|k| *k < t) {
            0 => self.initial,
            idx => self.values[idx - 1],
        }
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }
}

/// Product-limit estimator over the distinct times where `indicator` fires:
/// S(t) is the product of (1 - d/n) over those times up to and including t.
/// For censoring weights, pass the flipped event indicator.
pub fn kaplan_meier(times: &[f64], indicator: &[bool]) -> StepFunction {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).expect("times are finite"));

    let n_total = times.len();
    let mut knots = Vec::new();
    let mut values = Vec::new();
    let mut surv = 1.0;
    let mut idx = 0;
    while idx < order.len() {
        let t = times[order[idx]];
        let mut tied = 0;
        let mut fired = 0;
        while idx < order.len() && times[order[idx]] == t {
            tied += 1;
            if indicator[order[idx]] {
                fired += 1;
            }
            idx += 1;
        }
        let at_risk = n_total - (idx - tied);
        if fired > 0 {
            surv *= 1.0 - fired as f64 / at_risk as f64;
            knots.push(t);
            values.push(surv);
        }
    }
    StepFunction::new(knots, values, 1.0).expect("distinct sorted knots")
}

/// Time-dependent concordance: among pairs where subject i has an event
/// strictly before subject j's time, credit 1 when i's predicted survival at
/// its own event time is lower than j's, and 0.5 on exact ties.
pub fn concordance_td(eval: &EvalSet) -> Result<f64, MetricsError> {
    let n = eval.len();
    let mut comparable = 0u64;
    let mut concordant_mass = 0.0;
    for i in 0..n {
        if !eval.events()[i] {
            continue;
        }
        let t_i = eval.times()[i];
        let s_i = eval.survival_at(i, t_i);
        for j in 0..n {
            if j == i || !(t_i < eval.times()[j]) {
                continue;
            }
            comparable += 1;
            let s_j = eval.survival_at(j, t_i);
            if s_i < s_j {
                concordant_mass += 1.0;
            } else if s_i == s_j {
                concordant_mass += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(MetricsError::NoComparablePairs);
    }
    Ok(concordant_mass / comparable as f64)
}

/// Inverse-probability-of-censoring-weighted Brier score at time t. Samples
/// whose weight denominator is zero drop out of their term; the divisor
/// stays N.
pub fn brier_score(eval: &EvalSet, t: f64, censoring: &StepFunction) -> f64 {
    let n = eval.len();
    let mut total = 0.0;
    for i in 0..n {
        let t_i = eval.times()[i];
        let s = eval.survival_at(i, t);
        if t_i <= t && eval.events()[i] {
            let w = censoring.eval_left(t_i);
            if w > 0.0 {
                total += s * s / w;
            }
        } else if t_i > t {
            let w = censoring.eval(t);
            if w > 0.0 {
                total += (1.0 - s) * (1.0 - s) / w;
            }
        }
    }
    total / n as f64
}

/// Trapezoidal average of the Brier score over M equidistant points in
/// [t_min, t_max]; censoring weights come from the evaluation set itself.
pub fn integrated_brier(
    eval: &EvalSet,
    t_min: f64,
    t_max: f64,
    points: usize,
) -> Result<f64, MetricsError> {
    if !(t_min < t_max) {
        return Err(MetricsError::BadRange { t_min, t_max });
    }
    if points < 2 {
        return Err(MetricsError::TooFewPoints(points));
    }
    let flipped: Vec<bool> = eval.events().iter().map(|e| !e).collect();
    let censoring = kaplan_meier(eval.times(), &flipped);

    let step = (t_max - t_min) / (points - 1) as f64;
    let mut integral = 0.0;
    let mut prev = brier_score(eval, t_min, &censoring);
    for j in 1..points {
        let t = if j == points - 1 { t_max } else { t_min + step * j as f64 };
        let cur = brier_score(eval, t, &censoring);
        integral += 0.5 * (prev + cur) * step;
        prev = cur;
    }
    Ok(integral / (t_max - t_min))
}

/// Default integration range: from the earliest observed event to the 95th
/// percentile of all follow-up times, where censoring weights are still
/// well behaved.
pub fn default_time_range(times: &[f64], events: &[bool]) -> Result<(f64, f64), MetricsError> {
    let first_event = times
        .iter()
        .zip(events)
        .filter(|(_, &e)| e)
        .map(|(&t, _)| t)
        .fold(f64::INFINITY, f64::min);
    if !first_event.is_finite() {
        return Err(MetricsError::NoEvents);
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("times are finite"));
    let cap = crate::survival::quantile_sorted(&sorted, 0.95);
    Ok((first_event, cap))
}
