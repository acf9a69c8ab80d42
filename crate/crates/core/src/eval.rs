//! Tracking error, the ELBO decomposition against an attractor prior, and
//! confidence-interval aggregation across seeds.
//!
//! The ELBO of a filter at step `t` is estimated by fitting a full-covariance
//! Gaussian `q` to its weighted particle cloud (positions only) and drawing
//! Monte Carlo samples from it:
//!
//! ```text
//! log-likelihood term = E_q[log p(y_t | z)]
//! KL term             = E_q[log q(z) - log p_prior(z)]
//! ELBO                = log-likelihood term - KL term
//! ```
//!
//! The prior is a Gaussian KDE over a long noise-free Lorenz run.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{FittedGaussian, Kde, LogDensity};
use crate::error::{Error, Result};
use crate::ssm::{self, LorenzSystem, ObservationFrame, StateVector, STATE_DIM};

/// 95% two-sided normal quantile.
pub const Z_95: f64 = 1.96;
pub const DEFAULT_MC_SAMPLES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    pub length: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th state as a kernel centre.
    pub thin: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            length: 100_000,
            burn_in: 1_000,
            thin: 50,
        }
    }
}

/// Scott-bandwidth KDE over a thinned noise-free attractor run.
pub fn build_prior(system: &LorenzSystem, config: &PriorConfig) -> Result<Kde> {
    if config.length < 10_000 {
        return Err(Error::Config(format!("prior run needs >= 10^4 steps, got {}", config.length)));
    }
    if config.thin == 0 {
        return Err(Error::Config("prior thinning must be >= 1".into()));
    }
    let states: Vec<Vec<f64>> = system
        .long_run(config.burn_in, config.length)
        .into_iter()
        .step_by(config.thin)
        .map(|s| s.to_vec())
        .collect();
    Kde::scott(&states)
}

/// Euclidean distance between each estimate's first three components and the truth.
pub fn tracking_error(estimates: &[Vec<f64>], truth: &[StateVector]) -> Result<Vec<f64>> {
    if estimates.len() != truth.len() {
        return Err(Error::shape("tracking error", &[estimates.len()], &[truth.len()]));
    }
    estimates
        .iter()
        .zip(truth)
        .map(|(e, z)| {
            if e.len() < STATE_DIM {
                return Err(Error::invalid(format!("estimate has {} components", e.len())));
            }
            Ok(e.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        })
        .collect()
}

/// Weighted mean of the rows of a row-major `[N, d]` particle array.
pub fn weighted_mean(particles: &[f64], dim: usize, weights: &[f64]) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    for (row, w) in particles.chunks_exact(dim).zip(weights) {
        for (mj, v) in m.iter_mut().zip(row) {
            *mj += w * v;
        }
    }
    m
}

/// Monte Carlo estimates of the two ELBO terms with their standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub log_lik: f64,
    pub kl: f64,
    pub log_lik_stderr: f64,
    pub kl_stderr: f64,
}

impl ElboTerms {
    pub fn elbo(&self) -> f64 {
        self.log_lik - self.kl
    }

    /// `true` when the KL estimate is implausibly negative (below -3 standard errors).
    pub fn kl_suspicious(&self) -> bool {
        self.kl < -3.0 * self.kl_stderr
    }
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// ELBO terms for an explicit `q` over positions.
pub fn elbo_terms(
    q: &FittedGaussian,
    frame: &ObservationFrame,
    obs_std: f64,
    prior: &impl LogDensity,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<ElboTerms> {
    if samples == 0 {
        return Err(Error::invalid("ELBO needs at least one Monte Carlo sample"));
    }
    let mut ll = Vec::with_capacity(samples);
    let mut kl = Vec::with_capacity(samples);
    for _ in 0..samples {
        let z = q.sample(rng);
        ll.push(ssm::log_likelihood(&z, frame, obs_std));
        kl.push(q.log_pdf(&z) - prior.log_density(&z));
    }
    let (log_lik, log_lik_stderr) = mean_and_stderr(&ll);
    let (kl, kl_stderr) = mean_and_stderr(&kl);
    if !(log_lik.is_finite() && kl.is_finite()) {
        return Err(Error::NonFinite("ELBO estimate".into()));
    }
    Ok(ElboTerms {
        log_lik,
        kl,
        log_lik_stderr,
        kl_stderr,
    })
}

/// Fits `q` to the positions (first three columns) of a weighted cloud, then
/// estimates the ELBO terms.
#[allow(clippy::too_many_arguments)]
pub fn elbo_from_particles(
    particles: &[f64],
    dim: usize,
    weights: &[f64],
    frame: &ObservationFrame,
    obs_std: f64,
    prior: &impl LogDensity,
    samples: usize,
    rng: &mut impl Rng,
) -> Result<ElboTerms> {
    let pos: Vec<Vec<f64>> = particles.chunks_exact(dim).map(|r| r[..STATE_DIM].to_vec()).collect();
    let q = FittedGaussian::fit(&pos, weights)?;
    elbo_terms(&q, frame, obs_std, prior, samples, rng)
}

/// Mean with a normal-approximation 95% confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub half_width: f64,
}

impl Summary {
    pub fn ci_low(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn ci_high(&self) -> f64 {
        self.mean + self.half_width
    }

    /// `true` when the two intervals share no point.
    pub fn disjoint(&self, other: &Summary) -> bool {
        self.ci_high() < other.ci_low() || other.ci_high() < self.ci_low()
    }
}

/// Sample mean, sample standard deviation and `1.96 * std / sqrt(n)`.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "confidence interval needs at least two seeds, got {}",
            values.len()
        )));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    Ok(Summary {
        mean,
        std,
        n,
        half_width: Z_95 * std / (n as f64).sqrt(),
    })
}

/// One (method, condition, seed) evaluation, averaged over sequences and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub regime: String,
    /// `sigma_v` in the noise regime, observed proportion `P` in the partial one.
    pub condition: f64,
    pub seed: u64,
    pub tracking_error: f64,
    pub log_lik: Option<f64>,
    pub kl: Option<f64>,
    pub elbo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub regime: String,
    pub condition: f64,
    pub metric: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

pub const METRICS: [&str; 4] = ["tracking_error", "log_lik", "kl", "elbo"];

impl EvalReport {
    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.records.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Values of `metric` for one (method, regime, condition), in record order.
    pub fn values(&self, method: &str, regime: &str, condition: f64, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.method == method && r.regime == regime && r.condition == condition)
            .filter_map(|r| match metric {
                "tracking_error" => Some(r.tracking_error),
                "log_lik" => r.log_lik,
                "kl" => r.kl,
                "elbo" => r.elbo,
                _ => None,
            })
            .collect()
    }

    pub fn summary(&self, method: &str, regime: &str, condition: f64, metric: &str) -> Result<Summary> {
        summarize(&self.values(method, regime, condition, metric))
    }

    /// One row per (method, regime, condition, metric) with at least two values.
    pub fn aggregate(&self) -> Result<Vec<AggregateRow>> {
        let mut keys: Vec<(String, String, f64)> = Vec::new();
        for r in &self.records {
            let k = (r.method.clone(), r.regime.clone(), r.condition);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let mut rows = Vec::new();
        for (method, regime, condition) in keys {
            for metric in METRICS {
                let v = self.values(&method, &regime, condition, metric);
                if v.is_empty() {
                    continue;
                }
                let s = summarize(&v)?;
                rows.push(AggregateRow {
                    method: method.clone(),
                    regime: regime.clone(),
                    condition,
                    metric: metric.into(),
                    mean: s.mean,
                    ci_low: s.ci_low(),
                    ci_high: s.ci_high(),
                    n: s.n,
                });
            }
        }
        Ok(rows)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path, &self.records)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            records: read_rows(path)?,
        })
    }

    /// JSON summary: seeds plus aggregate rows.
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let body = serde_json::json!({
            "seeds": self.seeds(),
            "aggregates": self.aggregate()?,
        });
        create_parent(path.as_ref())?;
        std::fs::write(path, serde_json::to_string_pretty(&body)? + "\n")?;
        Ok(())
    }
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub(crate) fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    create_parent(path.as_ref())?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn read_rows<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path.as_ref())
        .map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.as_ref().display()))))
        .collect()
}
