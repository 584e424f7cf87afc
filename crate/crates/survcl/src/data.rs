//! Synthetic survival data, CSV persistence, augmentation, and multi-view
//! batch assembly.
//!
//! Subjects carry a latent progression stage that shapes both their feature
//! vector and their event hazard, so representations that recover the stage
//! also predict the time-to-event ordering.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::Tensor;

/// Per-stage event hazards run geometrically from slow to fast, so later
/// stages fail sooner on average.
const HAZARD_MIN: f64 = 0.02;
const HAZARD_MAX: f64 = 0.35;
/// Gaussian feature noise around the stage center.
const FEATURE_NOISE: f64 = 0.45;
/// Strength of the continuous time signal mixed into the features.
const TIME_SIGNAL_SCALE: f64 = 2.0;
/// Months over which the time signal saturates.
const TIME_SIGNAL_HORIZON: f64 = 48.0;
/// Hard cap on event times, in months.
const MAX_MONTHS: u64 = 120;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parameter {name} = {value} is outside its valid range ({constraint})")]
    BadParameter { name: &'static str, value: f64, constraint: &'static str },
    #[error("sample {id}: feature {index} is not finite")]
    BadFeature { id: String, index: usize },
    #[error("sample {id}: time {time} must be finite and nonnegative")]
    BadSampleTime { id: String, time: f64 },
    #[error("duplicate subject id {0}")]
    DuplicateId(String),
    #[error("dataset is empty")]
    Empty,
    #[error("sample {id} has {got} features, expected {expected}")]
    DimensionMismatch { id: String, got: usize, expected: usize },
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("line 1: header must be id,time,event,f0,...,f{{d-1}}, got {got}")]
    BadHeader { got: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub time: f64,
    pub event: bool,
}

impl Sample {
    pub fn new(id: String, features: Vec<f64>, time: f64, event: bool) -> Result<Self, DataError> {
        if let Some(index) = features.iter().position(|f| !f.is_finite()) {
            return Err(DataError::BadFeature { id, index });
        }
        if !time.is_finite() || time < 0.0 {
            return Err(DataError::BadSampleTime { id, time });
        }
        Ok(Sample { id, features, time, event })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Samples plus a 70/15/15 subject-level split. The split is a pure
/// function of the id set (ids ordered by their FNV-1a hash), so saving and
/// reloading a dataset preserves the assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    splits: Vec<Split>,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self, DataError> {
        if samples.is_empty() {
            return Err(DataError::Empty);
        }
        let expected = samples[0].features.len();
        let mut seen = BTreeSet::new();
        for s in &samples {
            if !seen.insert(s.id.clone()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
            if s.features.len() != expected {
                return Err(DataError::DimensionMismatch {
                    id: s.id.clone(),
                    got: s.features.len(),
                    expected,
                });
            }
        }
        let splits = assign_splits(&samples);
        Ok(Dataset { samples, splits })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples[0].features.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split_of(&self, index: usize) -> Split {
        self.splits[index]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn subset(&self, split: Split) -> Vec<&Sample> {
        self.indices(split).into_iter().map(|i| &self.samples[i]).collect()
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.subset(split).into_iter().map(|s| s.id.clone()).collect()
    }
}

/// Orders subjects by (hash(id), id) and cuts at 70% / 85%. The counts are
/// exact integer percentages of N, and the assignment never depends on
/// sample order or content.
fn assign_splits(samples: &[Sample]) -> Vec<Split> {
    let n = samples.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let ka = (fnv1a(samples[a].id.as_bytes()), &samples[a].id);
        let kb = (fnv1a(samples[b].id.as_bytes()), &samples[b].id);
        ka.cmp(&kb)
    });
    let train_end = n * 70 / 100;
    let val_end = n * 85 / 100;
    let mut splits = vec![Split::Train; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < train_end {
            Split::Train
        } else if rank < val_end {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Synthetic cohort: each subject draws a latent stage uniformly; features
/// are the stage center plus noise plus a stage-specific time signal; the
/// event month follows the stage's geometric hazard; censored subjects get
/// a uniform truncation of their event time.
pub fn generate_synthetic(
    n_subjects: usize,
    d: usize,
    stages: usize,
    censor_rate: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    generate_synthetic_with_stages(n_subjects, d, stages, censor_rate, seed).map(|(ds, _)| ds)
}

/// Like [`generate_synthetic`] but also returns each subject's latent stage,
/// which tests use to check hazard ordering.
pub fn generate_synthetic_with_stages(
    n_subjects: usize,
    d: usize,
    stages: usize,
    censor_rate: f64,
    seed: u64,
) -> Result<(Dataset, Vec<usize>), DataError> {
    if n_subjects < 10 {
        return Err(DataError::BadParameter {
            name: "n_subjects",
            value: n_subjects as f64,
            constraint: ">= 10",
        });
    }
    if d < 2 {
        return Err(DataError::BadParameter { name: "d", value: d as f64, constraint: ">= 2" });
    }
    if stages < 2 {
        return Err(DataError::BadParameter {
            name: "stages",
            value: stages as f64,
            constraint: ">= 2",
        });
    }
    if !(0.0..1.0).contains(&censor_rate) {
        return Err(DataError::BadParameter {
            name: "censor_rate",
            value: censor_rate,
            constraint: "in [0, 1)",
        });
    }

    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..stages)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    // Each stage progresses along its own direction, so reading the time
    // signal out of the features requires conditioning on the stage.
    let time_directions: Vec<Vec<f64>> = (0..stages)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()).collect())
        .collect();

    let mut samples = Vec::with_capacity(n_subjects);
    let mut latent = Vec::with_capacity(n_subjects);
    for i in 0..n_subjects {
        let stage = rng.random_range(0..stages);
        let frac = stage as f64 / (stages - 1) as f64;
        let hazard = HAZARD_MIN * (HAZARD_MAX / HAZARD_MIN).powf(frac);

        let u: f64 = rng.random_range(0.0..1.0);
        let months = ((1.0 - u).ln() / (1.0 - hazard).ln()).floor() as u64 + 1;
        let event_time = months.min(MAX_MONTHS) as f64;

        let signal = (event_time / TIME_SIGNAL_HORIZON).min(1.0) - 0.5;
        let mut features = Vec::with_capacity(d);
        for j in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(
                centers[stage][j] + FEATURE_NOISE * noise
                    + TIME_SIGNAL_SCALE * signal * time_directions[stage][j],
            );
        }

        let censored = rng.random_bool(censor_rate);
        let (time, event) = if censored {
            (rng.random_range(0.0..1.0) * event_time, false)
        } else {
            (event_time, true)
        };

        samples.push(Sample::new(format!("s{seed:03}-{i:05}"), features, time, event)?);
        latent.push(stage);
    }
    Ok((Dataset::new(samples)?, latent))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub mask_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { noise_sigma: 0.1, mask_prob: 0.2 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::BadParameter {
                name: "noise_sigma",
                value: self.noise_sigma,
                constraint: ">= 0",
            });
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(DataError::BadParameter {
                name: "mask_prob",
                value: self.mask_prob,
                constraint: "in [0, 1)",
            });
        }
        Ok(())
    }
}

/// One corrupted view of a sample's features: additive Gaussian noise, then
/// independent coordinate masking. Labels and times are untouched.
pub fn augment(sample: &Sample, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    sample
        .features
        .iter()
        .map(|&x| {
            let noise: f64 = rng.sample(StandardNormal);
            let value = x + config.noise_sigma * noise;
            if rng.random_bool(config.mask_prob) {
                0.0
            } else {
                value
            }
        })
        .collect()
}

/// Inputs for the contrastive losses: two augmented views per sample with
/// the origin, partner, label, and time bookkeeping the losses expect.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub features: Tensor,
    pub origin: Vec<usize>,
    pub pair: Vec<usize>,
    pub labels: Vec<u32>,
    pub times: Vec<f64>,
}

pub fn build_multiview_batch(
    samples: &[&Sample],
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ViewBatch, DataError> {
    config.validate()?;
    let n = samples.len();
    if n < 2 {
        return Err(DataError::TooFewSamples { need: 2, got: n });
    }
    let d = samples[0].features.len();
    let mut rows = Vec::with_capacity(2 * n * d);
    let mut origin = Vec::with_capacity(2 * n);
    let mut pair = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    let mut times = Vec::with_capacity(2 * n);
    for (s, sample) in samples.iter().enumerate() {
        for v in 0..2 {
            rows.extend(augment(sample, config, rng));
            origin.push(s);
            pair.push(2 * s + (1 - v));
            labels.push(sample.event as u32);
            times.push(sample.time);
        }
    }
    let features = Tensor::from_vec(2 * n, d, rows).map_err(|_| DataError::BadFeature {
        id: "augmented batch".into(),
        index: 0,
    })?;
    Ok(ViewBatch { features, origin, pair, labels, times })
}

/// Writes `id,time,event,f0,...` with floats at 17 significant digits so a
/// reload reproduces every bit.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path)?;
    let d = dataset.dim();
    let header: Vec<String> = ["id", "time", "event"]
        .into_iter()
        .map(String::from)
        .chain((0..d).map(|j| format!("f{j}")))
        .collect();
    writeln!(file, "{}", header.join(","))?;
    for s in dataset.samples() {
        let mut fields = vec![s.id.clone(), format!("{:.16e}", s.time), u8::from(s.event).to_string()];
        fields.extend(s.features.iter().map(|f| format!("{f:.16e}")));
        writeln!(file, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let fixed = ["id", "time", "event"];
    let d = headers.len().saturating_sub(fixed.len());
    let header_ok = headers.len() > fixed.len()
        && headers.iter().take(3).eq(fixed)
        && headers.iter().skip(3).enumerate().all(|(j, h)| h == format!("f{j}"));
    if !header_ok {
        return Err(DataError::BadHeader { got: headers.iter().collect::<Vec<_>>().join(",") });
    }

    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != 3 + d {
            return Err(DataError::Malformed {
                line,
                reason: format!("expected {} fields, got {}", 3 + d, record.len()),
            });
        }
        let id = record[0].to_string();
        let time: f64 = record[1].parse().map_err(|_| DataError::Malformed {
            line,
            reason: format!("time {:?} is not a number", &record[1]),
        })?;
        let event = match &record[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(DataError::Malformed {
                    line,
                    reason: format!("event {other:?} must be 0 or 1"),
                })
            }
        };
        let mut features = Vec::with_capacity(d);
        for j in 0..d {
            features.push(record[3 + j].parse().map_err(|_| DataError::Malformed {
                line,
                reason: format!("feature f{j} {:?} is not a number", &record[3 + j]),
            })?);
        }
        let sample = Sample::new(id, features, time, event).map_err(|e| DataError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        samples.push(sample);
    }
    Dataset::new(samples)
}
