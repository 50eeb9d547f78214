//! Statistical core: quartiles, Tukey's fences, recency weights and the
//! weighted Gaussian kernel density estimate used to turn a provider's
//! history into the probability of an anomalous measurement.

use statrs::function::erf::erfc;
use thiserror::Error;

/// Multiplier applied to the interquartile range when computing fences.
pub const TUKEY_K: f64 = 1.5;

/// Default lower bound on the kernel bandwidth.
pub const DEFAULT_BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("empty input")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("time at index {index} is {value}; record times must be strictly positive")]
    NonPositiveTime { index: usize, value: f64 },
    #[error("times must be strictly increasing (index {0})")]
    TimesNotIncreasing(usize),
    #[error("length mismatch: {values} values, {times} times")]
    LengthMismatch { values: usize, times: usize },
    #[error("invalid interval: lo {lo} > hi {hi}")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("invalid density model: {0}")]
    InvalidModel(&'static str),
}

/// Measurements of one quality feature paired with their record times.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    values: Vec<f64>,
    times: Vec<f64>,
}

impl Sample {
    pub fn new(values: Vec<f64>, times: Vec<f64>) -> Result<Self, StatsError> {
        if values.len() != times.len() {
            return Err(StatsError::LengthMismatch {
                values: values.len(),
                times: times.len(),
            });
        }
        if values.is_empty() {
            return Err(StatsError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(i));
        }
        check_times(&times)?;
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(StatsError::TimesNotIncreasing(i + 1));
        }
        Ok(Self { values, times })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Lower and upper bounds of the range of normal values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fences {
    pub lower: f64,
    pub upper: f64,
}

impl Fences {
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower == self.upper
    }
}

/// Weighted mixture of Gaussian kernels sharing one bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    centers: Vec<f64>,
    weights: Vec<f64>,
    bandwidth: f64,
}

impl DensityModel {
    pub fn new(centers: Vec<f64>, weights: Vec<f64>, bandwidth: f64) -> Result<Self, StatsError> {
        if centers.is_empty() {
            return Err(StatsError::Empty);
        }
        if centers.len() != weights.len() {
            return Err(StatsError::LengthMismatch {
                values: centers.len(),
                times: weights.len(),
            });
        }
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(StatsError::InvalidModel("bandwidth must be positive"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(StatsError::InvalidModel("weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(StatsError::InvalidModel("weights must sum to 1"));
        }
        Ok(Self {
            centers,
            weights,
            bandwidth,
        })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Pointwise density `sum_i w_i K_h(x - x_i)`.
    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = (2.0 * std::f64::consts::PI).sqrt() * h;
        self.centers
            .iter()
            .zip(&self.weights)
            .map(|(c, w)| {
                let z = (x - c) / h;
                w * (-0.5 * z * z).exp() / norm
            })
            .sum()
    }
}

/// How the kernel bandwidth is derived from the measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BandwidthRule {
    /// `0.9 * s * n^(-1/5)` with `s` the sample standard deviation.
    #[default]
    SilvermanStdDev,
    /// `0.9 * min(s, IQR / 1.34) * n^(-1/5)`.
    SilvermanRobust,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeConfig {
    pub rule: BandwidthRule,
    pub floor: f64,
}

impl Default for KdeConfig {
    fn default() -> Self {
        Self {
            rule: BandwidthRule::default(),
            floor: DEFAULT_BANDWIDTH_FLOOR,
        }
    }
}

fn check_nonempty_finite(values: &[f64]) -> Result<(), StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(StatsError::NonFinite(i)),
        None => Ok(()),
    }
}

fn check_times(times: &[f64]) -> Result<(), StatsError> {
    if times.is_empty() {
        return Err(StatsError::Empty);
    }
    for (index, &value) in times.iter().enumerate() {
        if !value.is_finite() {
            return Err(StatsError::NonFinite(index));
        }
        if value <= 0.0 {
            return Err(StatsError::NonPositiveTime { index, value });
        }
    }
    Ok(())
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn median_of_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn quartiles_of_sorted(s: &[f64]) -> (f64, f64) {
    let n = s.len();
    if n == 1 {
        return (s[0], s[0]);
    }
    // Exclusive halves: an odd-length list drops its median from both halves.
    let half = n / 2;
    let lower = &s[..half];
    let upper = if n % 2 == 1 { &s[half + 1..] } else { &s[half..] };
    (median_of_sorted(lower), median_of_sorted(upper))
}

/// First and third quartiles, computed as medians of the lower and upper
/// halves of the sorted list.
pub fn quartiles(values: &[f64]) -> Result<(f64, f64), StatsError> {
    check_nonempty_finite(values)?;
    Ok(quartiles_of_sorted(&sorted(values)))
}

pub fn tukey_fences(values: &[f64]) -> Result<Fences, StatsError> {
    let (q1, q3) = quartiles(values)?;
    let iqr = q3 - q1;
    Ok(Fences {
        lower: q1 - TUKEY_K * iqr,
        upper: q3 + TUKEY_K * iqr,
    })
}

/// Whether the last element of `values` lies strictly outside the fences
/// computed from the whole list.
pub fn is_anomalous(values: &[f64]) -> Result<bool, StatsError> {
    let fences = tukey_fences(values)?;
    let last = *values.last().ok_or(StatsError::Empty)?;
    Ok(last < fences.lower || last > fences.upper)
}

/// Weights proportional to record time, normalized to sum to one.
pub fn recency_weights(times: &[f64]) -> Result<Vec<f64>, StatsError> {
    check_times(times)?;
    let total: f64 = times.iter().sum();
    Ok(times.iter().map(|t| t / total).collect())
}

fn sample_std_dev(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (ss / (n as f64 - 1.0)).sqrt()
}

pub fn select_bandwidth(values: &[f64]) -> Result<f64, StatsError> {
    select_bandwidth_with(values, &KdeConfig::default())
}

pub fn select_bandwidth_with(values: &[f64], config: &KdeConfig) -> Result<f64, StatsError> {
    check_nonempty_finite(values)?;
    let n = values.len() as f64;
    let sd = sample_std_dev(values);
    let spread = match config.rule {
        BandwidthRule::SilvermanStdDev => sd,
        BandwidthRule::SilvermanRobust => {
            let (q1, q3) = quartiles(values)?;
            sd.min((q3 - q1) / 1.34)
        }
    };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 && h.is_finite() {
        Ok(h.max(config.floor))
    } else {
        Ok(config.floor)
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability mass the model assigns to `[lo, hi]`.
pub fn kde_interval_mass(model: &DensityModel, lo: f64, hi: f64) -> Result<f64, StatsError> {
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(StatsError::InvalidInterval { lo, hi });
    }
    if lo == hi {
        return Ok(0.0);
    }
    let h = model.bandwidth;
    let mass: f64 = model
        .centers
        .iter()
        .zip(&model.weights)
        .map(|(c, w)| w * (std_normal_cdf((hi - c) / h) - std_normal_cdf((lo - c) / h)))
        .sum();
    Ok(mass.clamp(0.0, 1.0))
}

pub fn density_model(sample: &Sample, config: &KdeConfig) -> Result<DensityModel, StatsError> {
    let weights = recency_weights(sample.times())?;
    let bandwidth = select_bandwidth_with(sample.values(), config)?;
    DensityModel::new(sample.values().to_vec(), weights, bandwidth)
}

/// Probability that a new measurement falls outside the fences of the
/// sample, under a recency-weighted KDE of the sample.
pub fn anomaly_probability(sample: &Sample) -> Result<f64, StatsError> {
    anomaly_probability_with(sample, &KdeConfig::default())
}

pub fn anomaly_probability_with(sample: &Sample, config: &KdeConfig) -> Result<f64, StatsError> {
    let fences = tukey_fences(sample.values())?;
    if fences.is_degenerate() {
        // No observed variability, so no evidence of abnormality.
        return Ok(0.0);
    }
    let model = density_model(sample, config)?;
    let mass = kde_interval_mass(&model, fences.lower, fences.upper)?;
    Ok((1.0 - mass).clamp(0.0, 1.0))
}
