//! Diagonal Gaussians, Gaussian mixtures, weighted Gaussian fits and Gaussian KDEs.
//!
//! Mixture parameters travel as one flat vector per particle laid out as
//! `[K logits | K*d means | K*d log-variances]`, which is exactly what the
//! proposal and transition heads emit. Log-variances are clamped to
//! [`LOG_VAR_RANGE`] wherever they are turned into variances.
//!
//! Sampling a mixture picks the component by inverse CDF on the mixture weights
//! and treats that choice as a constant; the Gaussian draw `mu + sigma * eps` is
//! pathwise, so gradients reach the chosen component's mean and spread while the
//! logits are trained through the explicit `log q` term of the importance weight.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

pub const LOG_VAR_RANGE: (f64, f64) = (-10.0, 4.0);
const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_RANGE.0, LOG_VAR_RANGE.1)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() || mean.is_empty() {
            return Err(Error::shape("DiagGaussian", &[mean.len()], &[log_var.len()]));
        }
        if log_var.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DiagGaussian log-variance".into()));
        }
        Ok(Self { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, m), lv) in x.iter().zip(&self.mean).zip(&self.log_var) {
            let d = xi - m;
            acc += d * d * (-lv).exp() + lv + LN_2PI;
        }
        -0.5 * acc
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| m + (0.5 * lv).exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// Mixture of `K` diagonal Gaussians in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub logits: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub log_vars: Vec<Vec<f64>>,
}

impl GmmParams {
    pub fn new(logits: Vec<f64>, means: Vec<Vec<f64>>, log_vars: Vec<Vec<f64>>) -> Result<Self> {
        let k = logits.len();
        if k == 0 || means.len() != k || log_vars.len() != k {
            return Err(Error::invalid(format!(
                "mixture needs K >= 1 matching logits/means/log-vars, got {k}/{}/{}",
                means.len(),
                log_vars.len()
            )));
        }
        let d = means[0].len();
        if d == 0 || means.iter().chain(&log_vars).any(|v| v.len() != d) {
            return Err(Error::invalid("mixture components disagree on dimension"));
        }
        Ok(Self {
            logits,
            means,
            log_vars,
        })
    }

    /// Parses the flat `[K logits | K*d means | K*d log-vars]` layout.
    pub fn from_raw(raw: &[f64], k: usize, d: usize) -> Result<Self> {
        if raw.len() != k * (2 * d + 1) {
            return Err(Error::shape("GmmParams::from_raw", &[raw.len()], &[k * (2 * d + 1)]));
        }
        let block = |start: usize| (0..k).map(|c| raw[start + c * d..start + (c + 1) * d].to_vec()).collect();
        Self::new(raw[..k].to_vec(), block(k), block(k + k * d))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.logits.clone();
        v.extend(self.means.iter().flatten());
        v.extend(self.log_vars.iter().flatten());
        v
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> Vec<f64> {
        let lse = log_sum_exp(&self.logits);
        self.logits.iter().map(|l| (l - lse).exp()).collect()
    }

    fn component(&self, c: usize) -> DiagGaussian {
        DiagGaussian {
            mean: self.means[c].clone(),
            log_var: self.log_vars[c].iter().copied().map(clamp_log_var).collect(),
        }
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let lse = log_sum_exp(&self.logits);
        let terms: Vec<f64> = (0..self.components())
            .map(|c| self.logits[c] - lse + self.component(c).log_pdf(x))
            .collect();
        log_sum_exp(&terms)
    }

    /// One uniform for the component, then `d` normals.
    pub fn sample(&self, rng: &mut impl Rng) -> (Vec<f64>, usize) {
        let c = pick_component(&self.weights(), rng.gen());
        (self.component(c).sample(rng), c)
    }
}

fn pick_component(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (c, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return c;
        }
    }
    weights.len() - 1
}

/// A batch of `N` mixtures living on a tape: logits `[N, K]`, means and
/// (clamped) log-variances `[N, K, d]`.
#[derive(Debug, Clone, Copy)]
pub struct GmmVar<'t> {
    pub logits: Var<'t>,
    pub means: Var<'t>,
    pub log_vars: Var<'t>,
}

impl<'t> GmmVar<'t> {
    /// Parses raw head outputs `[N, K(2d+1)]`; `base` (shape `[N, d]`) is added
    /// to every component mean when given.
    pub fn from_raw(raw: Var<'t>, k: usize, d: usize, base: Option<Var<'t>>) -> Result<Self> {
        let shape = raw.shape();
        if shape.len() != 2 || shape[1] != k * (2 * d + 1) {
            return Err(Error::shape("GmmVar::from_raw", &shape, &[0, k * (2 * d + 1)]));
        }
        let n = shape[0];
        let logits = raw.narrow(1, 0, k)?;
        let mut means = raw.narrow(1, k, k + k * d)?.reshape([n, k, d])?;
        if let Some(b) = base {
            means = means.add(b.reshape([n, 1, d])?)?;
        }
        let log_vars = raw
            .narrow(1, k + k * d, k + 2 * k * d)?
            .reshape([n, k, d])?
            .clamp(LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
        Ok(Self {
            logits,
            means,
            log_vars,
        })
    }

    pub fn batch(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn components(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[2]
    }

    /// Row `i` as plain parameters (log-variances already clamped).
    pub fn row(&self, i: usize) -> GmmParams {
        let (k, d) = (self.components(), self.dim());
        let l = self.logits.value();
        let m = self.means.value();
        let v = self.log_vars.value();
        let chunk = |t: &Tensor, c: usize| t.data()[(i * k + c) * d..(i * k + c + 1) * d].to_vec();
        GmmParams {
            logits: l.data()[i * k..(i + 1) * k].to_vec(),
            means: (0..k).map(|c| chunk(&m, c)).collect(),
            log_vars: (0..k).map(|c| chunk(&v, c)).collect(),
        }
    }

    /// Log-density of `x` (`[N, d]`) under mixture `i` for each row, shape `[N]`.
    pub fn log_pdf(&self, x: Var<'t>) -> Result<Var<'t>> {
        let (n, d) = (self.batch(), self.dim());
        let diff = x.reshape([n, 1, d])?.sub(self.means)?;
        let quad = diff
            .square()
            .mul(self.log_vars.neg().exp())?
            .add(self.log_vars)?
            .sum_axis(2, false)?;
        let comp = quad.scale(-0.5).add_scalar(-0.5 * d as f64 * LN_2PI);
        let log_w = self.logits.sub(self.logits.logsumexp_axis(1, true)?)?;
        comp.add(log_w)?.logsumexp_axis(1, false)
    }

    /// Draws one sample per row. Consumes `N` uniforms (component choice, treated
    /// as a constant) followed by `N*d` normals in row-major order.
    pub fn sample(&self, rng: &mut impl Rng) -> Result<(Var<'t>, Vec<usize>)> {
        let (n, k, d) = (self.batch(), self.components(), self.dim());
        let logits = self.logits.value();
        let comps: Vec<usize> = (0..n)
            .map(|i| {
                let row = &logits.data()[i * k..(i + 1) * k];
                let lse = log_sum_exp(row);
                let w: Vec<f64> = row.iter().map(|l| (l - lse).exp()).collect();
                pick_component(&w, rng.gen())
            })
            .collect();
        let eps: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let tape = self.means.tape();
        let eps = tape.constant(Tensor::new([n, d], eps)?);
        let flat: Vec<usize> = comps.iter().enumerate().map(|(i, &c)| i * k + c).collect();
        let mu = self.means.reshape([n * k, d])?.gather(0, &flat)?;
        let sd = self.log_vars.reshape([n * k, d])?.gather(0, &flat)?.scale(0.5).exp();
        Ok((mu.add(sd.mul(eps)?)?, comps))
    }
}

/// Anything with a pointwise log-density.
pub trait LogDensity {
    fn log_density(&self, x: &[f64]) -> f64;
}

impl LogDensity for GmmParams {
    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_pdf(x)
    }
}

impl LogDensity for FittedGaussian {
    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_pdf(x)
    }
}

impl LogDensity for Kde {
    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_pdf(x)
    }
}

/// Gaussian with full covariance, from a weighted particle cloud.
#[derive(Debug, Clone)]
pub struct FittedGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

pub const FIT_JITTER: f64 = 1e-6;

impl FittedGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular(format!("covariance is not positive definite: {cov}")))?
            .l();
        let log_det = 2.0 * chol.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::Singular("covariance has a non-finite log-determinant".into()));
        }
        Ok(Self {
            mean,
            cov,
            chol,
            log_det,
        })
    }

    /// Weighted mean and covariance of `particles` plus [`FIT_JITTER`] on the diagonal.
    pub fn fit(particles: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        if particles.is_empty() || particles.len() != weights.len() {
            return Err(Error::shape("gaussian fit", &[particles.len()], &[weights.len()]));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::invalid(format!("gaussian fit needs normalized weights, sum {total}")));
        }
        let d = particles[0].len();
        let mut mean = DVector::zeros(d);
        for (p, w) in particles.iter().zip(weights) {
            mean += DVector::from_column_slice(p) * *w;
        }
        let mut cov = DMatrix::identity(d, d) * FIT_JITTER;
        for (p, w) in particles.iter().zip(weights) {
            let r = DVector::from_column_slice(p) - &mean;
            cov += &r * r.transpose() * *w;
        }
        if !cov.iter().all(|v| v.is_finite()) {
            return Err(Error::Singular("particle cloud has non-finite moments".into()));
        }
        Self::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let r = DVector::from_column_slice(x) - &self.mean;
        let y = self
            .chol
            .solve_lower_triangular(&r)
            .expect("cholesky factor has a positive diagonal");
        -0.5 * (y.norm_squared() + self.log_det + self.dim() as f64 * LN_2PI)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let eps = DVector::from_fn(self.dim(), |_, _| rng.sample(StandardNormal));
        (&self.mean + &self.chol * eps).iter().copied().collect()
    }

    /// Closed-form KL(self || other).
    pub fn kl_divergence(&self, other: &FittedGaussian) -> f64 {
        let d = self.dim() as f64;
        let inv = other.cov.clone().try_inverse().expect("positive definite");
        let diff = &other.mean - &self.mean;
        let trace = (&inv * &self.cov).trace();
        let quad = (diff.transpose() * &inv * &diff)[(0, 0)];
        0.5 * (trace + quad - d + other.log_det - self.log_det)
    }
}

/// Gaussian kernel density estimate with a per-dimension bandwidth.
#[derive(Debug, Clone)]
pub struct Kde {
    samples: Vec<f64>,
    dim: usize,
    bandwidth: Vec<f64>,
}

impl Kde {
    pub fn new(samples: &[Vec<f64>], bandwidth: Vec<f64>) -> Result<Self> {
        let dim = bandwidth.len();
        if samples.is_empty() || dim == 0 || samples.iter().any(|s| s.len() != dim) {
            return Err(Error::invalid("KDE needs >= 1 sample matching the bandwidth dimension"));
        }
        if bandwidth.iter().any(|h| !(*h > 0.0)) {
            return Err(Error::invalid(format!("KDE bandwidth must be positive, got {bandwidth:?}")));
        }
        Ok(Self {
            samples: samples.iter().flatten().copied().collect(),
            dim,
            bandwidth,
        })
    }

    /// Scott's rule per dimension: `h_j = std_j * n^(-1/(d+4))`.
    pub fn scott(samples: &[Vec<f64>]) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::invalid("Scott bandwidth needs at least two samples"));
        }
        let d = samples[0].len();
        let factor = (n as f64).powf(-1.0 / (d as f64 + 4.0));
        let bandwidth = (0..d)
            .map(|j| {
                let mean = samples.iter().map(|s| s[j]).sum::<f64>() / n as f64;
                let var = samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                var.sqrt() * factor
            })
            .collect();
        Self::new(samples, bandwidth)
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    /// `n` draws: a uniformly chosen kernel centre plus Gaussian jitter, `[n, d]`.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        let mut out = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let i = rng.gen_range(0..self.len());
            for j in 0..self.dim {
                out.push(self.samples[i * self.dim + j] + self.bandwidth[j] * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Tensor::new([n, self.dim], out).expect("length matches")
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let inv: Vec<f64> = self.bandwidth.iter().map(|h| 1.0 / h).collect();
        let terms: Vec<f64> = self
            .samples
            .chunks_exact(self.dim)
            .map(|s| {
                -0.5 * s
                    .iter()
                    .zip(x)
                    .zip(&inv)
                    .map(|((si, xi), ih)| ((xi - si) * ih).powi(2))
                    .sum::<f64>()
            })
            .collect();
        let norm: f64 = self.bandwidth.iter().map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
        log_sum_exp(&terms) - (self.len() as f64).ln() - norm
    }

    /// Log-density of every row of `x` (`[N, d]`) on the tape, shape `[N]`.
    pub fn log_pdf_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape("KDE input", &shape, &[shape.first().copied().unwrap_or(0), self.dim]));
        }
        let tape = x.tape();
        let k = self.len();
        let centres = tape.constant(Tensor::new([1, k, self.dim], self.samples.clone())?);
        let inv = tape.constant(Tensor::new([1, 1, self.dim], self.bandwidth.iter().map(|h| 1.0 / h).collect())?);
        let norm: f64 = self.bandwidth.iter().map(|h| (h * (2.0 * std::f64::consts::PI).sqrt()).ln()).sum();
        x.reshape([shape[0], 1, self.dim])?
            .sub(centres)?
            .mul(inv)?
            .square()
            .sum_axis(2, false)?
            .scale(-0.5)
            .logsumexp_axis(1, false)
            .map(|v| v.add_scalar(-(k as f64).ln() - norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{finite_difference, relative_error};
    use proptest::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn standard_normal_log_pdf_at_zero() {
        let g = GmmParams::new(vec![0.0], vec![vec![0.0]], vec![vec![0.0]]).unwrap();
        assert!((g.log_pdf(&[0.0]) + 0.918_938_533_204_672_7).abs() < 1e-12);
        let twin = GmmParams::new(vec![0.3, 0.3], vec![vec![0.0]; 2], vec![vec![0.0]; 2]).unwrap();
        assert!((twin.log_pdf(&[0.7]) - g.log_pdf(&[0.7])).abs() < 1e-12);
    }

    fn random_gmm(seed: u64, k: usize, d: usize) -> GmmParams {
        let mut r = rng(seed);
        let raw: Vec<f64> = (0..k * (2 * d + 1)).map(|_| r.gen_range(-1.5..1.5)).collect();
        GmmParams::from_raw(&raw, k, d).unwrap()
    }

    #[test]
    fn mixture_matches_linear_domain_sum() {
        let g = random_gmm(4, 3, 2);
        let x = [0.4, -0.3];
        let w = g.weights();
        let mut dens = 0.0;
        for c in 0..3 {
            let mut p = w[c];
            for j in 0..2 {
                let var = g.log_vars[c][j].exp();
                p *= (-(x[j] - g.means[c][j]).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            }
            dens += p;
        }
        assert!((g.log_pdf(&x) - dens.ln()).abs() < 1e-10);
    }

    #[test]
    fn mixture_integrates_to_one() {
        let g = random_gmm(9, 2, 1);
        let mut r = rng(1);
        let (lo, hi) = (-20.0, 20.0);
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| g.log_pdf(&[r.gen_range(lo..hi)]).exp()).sum::<f64>() / n as f64;
        assert!((mean * (hi - lo) - 1.0).abs() < 0.02);
    }

    #[test]
    fn degenerate_component_sample_is_its_mean() {
        let g = GmmParams::new(vec![0.0], vec![vec![1.5, -2.0]], vec![vec![-60.0, -60.0]]).unwrap();
        // log-variance clamps at -10, so the spread is 0.0067
        let (x, c) = g.sample(&mut rng(0));
        assert_eq!(c, 0);
        assert!((x[0] - 1.5).abs() < 0.05 && (x[1] + 2.0).abs() < 0.05);
        let d = DiagGaussian::new(vec![1.5], vec![-700.0]).unwrap();
        assert_eq!(d.sample(&mut rng(0)), vec![1.5]);
    }

    #[test]
    fn component_frequencies_follow_weights() {
        let g = GmmParams::new(vec![0.3f64.ln(), 0.7f64.ln()], vec![vec![0.0]; 2], vec![vec![0.0]; 2]).unwrap();
        let mut r = rng(2);
        let n = 100_000;
        let first = (0..n).filter(|_| g.sample(&mut r).1 == 0).count() as f64 / n as f64;
        assert!((first - 0.3).abs() < 3.0 * (0.21 / n as f64).sqrt(), "{first}");
    }

    #[test]
    fn sample_mean_of_shifted_normal() {
        let g = DiagGaussian::new(vec![2.0], vec![0.0]).unwrap();
        let mut r = rng(3);
        let n = 100_000;
        let m = (0..n).map(|_| g.sample(&mut r)[0]).sum::<f64>() / n as f64;
        assert!((m - 2.0).abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn samples_pass_chi_square_against_density() {
        // 1-D mixture; 20 equal-width bins on [-6, 6], expected counts from the log-pdf
        let g = random_gmm(7, 2, 1);
        let mut r = rng(5);
        let n = 50_000;
        let (lo, hi, bins) = (-6.0, 6.0, 20);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        let mut inside = 0;
        for _ in 0..n {
            let x = g.sample(&mut r).0[0];
            if (lo..hi).contains(&x) {
                counts[((x - lo) / width) as usize] += 1;
                inside += 1;
            }
        }
        let probs: Vec<f64> = (0..bins)
            .map(|b| {
                let a = lo + b as f64 * width;
                // Simpson on each bin
                let f = |x: f64| g.log_pdf(&[x]).exp();
                width / 6.0 * (f(a) + 4.0 * f(a + width / 2.0) + f(a + width))
            })
            .collect();
        let total: f64 = probs.iter().sum();
        let chi2: f64 = counts
            .iter()
            .zip(&probs)
            .map(|(&c, p)| {
                let e = inside as f64 * p / total;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        // chi-square with 19 dof: 99th percentile is 36.19
        assert!(chi2 < 36.19, "chi2 = {chi2}");
    }

    #[test]
    fn raw_layout_roundtrips() {
        let raw: Vec<f64> = (0..14).map(|i| i as f64 / 10.0).collect();
        let g = GmmParams::from_raw(&raw, 2, 3).unwrap();
        assert_eq!(g.flatten(), raw);
        assert_eq!(g.logits, vec![0.0, 0.1]);
        assert_eq!(g.means[1], vec![0.5, 0.6, 0.7]);
        assert!(GmmParams::from_raw(&raw, 3, 3).is_err());
    }

    #[test]
    fn tape_mixture_matches_plain_mixture() {
        let tape = Tape::new();
        let raws = [random_gmm(1, 2, 3).flatten(), random_gmm(2, 2, 3).flatten()];
        let raw = tape.constant(Tensor::new([2, 14], raws.concat()).unwrap());
        let base = tape.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5]).unwrap());
        let gv = GmmVar::from_raw(raw, 2, 3, Some(base)).unwrap();
        let x = [0.5, 1.0, 2.0, -0.5, 0.3, 0.0];
        let lp = gv.log_pdf(tape.constant(Tensor::new([2, 3], x.to_vec()).unwrap())).unwrap();
        for i in 0..2 {
            let g = gv.row(i);
            assert!((g.log_pdf(&x[i * 3..i * 3 + 3]) - lp.value().data()[i]).abs() < 1e-12);
        }
        let (z, comps) = gv.sample(&mut rng(3)).unwrap();
        assert_eq!(z.shape(), vec![2, 3]);
        assert_eq!(comps.len(), 2);
    }

    #[test]
    fn tape_log_pdf_gradients_match_fd() {
        let raw = Tensor::new([2, 10], random_gmm(5, 2, 2).flatten().repeat(2)).unwrap();
        let x = Tensor::new([2, 2], vec![0.3, -0.8, 1.1, 0.2]).unwrap();
        let f = |xs: &[Tensor]| {
            let tape = Tape::new();
            let (r, x) = (tape.var(xs[0].clone()), tape.var(xs[1].clone()));
            let root = GmmVar::from_raw(r, 2, 2, None).unwrap().log_pdf(x).unwrap().sum();
            let g = tape.backward(root).unwrap();
            (root.item(), vec![g.wrt(r), g.wrt(x)])
        };
        let inputs = [raw, x];
        let fd = finite_difference(|xs| f(xs).0, &inputs, 1e-5);
        assert!(relative_error(&f(&inputs).1, &fd) < 1e-4);
    }

    #[test]
    fn reparameterized_sample_gradient_flows_to_chosen_component() {
        let tape = Tape::new();
        assert!(GmmVar::from_raw(tape.var(Tensor::zeros([1, 6])), 1, 2, None).is_err());
        let raw = tape.var(Tensor::new([1, 5], vec![0.0, 1.0, -1.0, 0.2, 0.4]).unwrap());
        let g = GmmVar::from_raw(raw, 1, 2, None).unwrap();
        let (z, _) = g.sample(&mut rng(8)).unwrap();
        let grads = tape.backward(z.sum()).unwrap().wrt(raw);
        // d/dmu = 1; d/dlogvar = 0.5 * sigma * eps = 0.5 * (z - mu)
        let zv = z.value();
        assert_eq!(grads.data()[..3], [0.0, 1.0, 1.0]);
        assert!((grads.data()[3] - 0.5 * (zv.data()[0] - 1.0)).abs() < 1e-12);
        assert!((grads.data()[4] - 0.5 * (zv.data()[1] + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn fit_symmetric_pair() {
        let f = FittedGaussian::fit(&[vec![0.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]], &[0.5, 0.5]).unwrap();
        assert_eq!(f.mean.as_slice(), &[1.0, 0.0, 0.0]);
        assert!((f.cov[(0, 0)] - 1.0 - FIT_JITTER).abs() < 1e-15);
        let same = FittedGaussian::fit(&vec![vec![3.0, 4.0, 5.0]; 3], &[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(same.mean.as_slice(), &[3.0, 4.0, 5.0]);
        assert!(FittedGaussian::fit(&[vec![f64::NAN, 0.0, 0.0]], &[1.0]).is_err());
        assert!(FittedGaussian::fit(&[vec![0.0; 3]], &[0.5]).is_err());
    }

    #[test]
    fn fit_matches_two_pass_moments() {
        let mut r = rng(11);
        let pts: Vec<Vec<f64>> = (0..50).map(|_| (0..3).map(|_| r.gen_range(-5.0..5.0)).collect()).collect();
        let raw: Vec<f64> = (0..50).map(|_| r.gen::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let f = FittedGaussian::fit(&pts, &w).unwrap();
        for a in 0..3 {
            let ma: f64 = pts.iter().zip(&w).map(|(p, w)| w * p[a]).sum();
            assert!((f.mean[a] - ma).abs() < 1e-12);
            for b in 0..3 {
                let mb: f64 = pts.iter().zip(&w).map(|(p, w)| w * p[b]).sum();
                let c: f64 = pts.iter().zip(&w).map(|(p, w)| w * (p[a] - ma) * (p[b] - mb)).sum();
                let jitter = if a == b { FIT_JITTER } else { 0.0 };
                assert!((f.cov[(a, b)] - c - jitter).abs() < 1e-12);
            }
        }
        // the density is the textbook multivariate normal
        let x = [0.5, -0.5, 1.0];
        let inv = f.cov.clone().try_inverse().unwrap();
        let r = DVector::from_column_slice(&x) - &f.mean;
        let quad = (r.transpose() * inv * &r)[(0, 0)];
        let expected = -0.5 * (quad + f.cov.determinant().ln() + 3.0 * LN_2PI);
        assert!((f.log_pdf(&x) - expected).abs() < 1e-10);
    }

    #[test]
    fn kl_of_identical_gaussians_is_zero() {
        let g = FittedGaussian::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        assert!(g.kl_divergence(&g).abs() < 1e-12);
        // 1-D closed form: ln(s2/s1) + (s1^2 + (m1-m2)^2)/(2 s2^2) - 1/2
        let a = FittedGaussian::new(DVector::from_vec(vec![0.0]), DMatrix::from_element(1, 1, 1.0)).unwrap();
        let b = FittedGaussian::new(DVector::from_vec(vec![1.0]), DMatrix::from_element(1, 1, 4.0)).unwrap();
        let expected = 2f64.ln() + (1.0 + 1.0) / 8.0 - 0.5;
        assert!((a.kl_divergence(&b) - expected).abs() < 1e-12);
    }

    #[test]
    fn kde_single_sample_peak() {
        let k = Kde::new(&[vec![0.7]], vec![0.3]).unwrap();
        let expected = -(0.3 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((k.log_pdf(&[0.7]) - expected).abs() < 1e-12);
        let far = k.log_pdf(&[1e4]);
        assert!(far.is_finite() && far < -1e8);
        assert!(Kde::new(&[vec![0.0]], vec![0.0]).is_err());
    }

    #[test]
    fn kde_on_tape_matches_values_and_gradients() {
        let mut r = rng(5);
        let samples: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| r.sample(StandardNormal)).collect()).collect();
        let k = Kde::scott(&samples).unwrap();
        let x = Tensor::new([4, 3], (0..12).map(|i| 0.3 * i as f64 - 1.5).collect()).unwrap();
        let f = |xs: &[Tensor]| {
            let tape = Tape::new();
            let v = tape.var(xs[0].clone());
            let lp = k.log_pdf_var(v).unwrap();
            let root = lp.sum();
            let g = tape.backward(root).unwrap();
            (root.item(), lp.value().data().to_vec(), vec![g.wrt(v)])
        };
        let (_, values, grad) = f(std::slice::from_ref(&x));
        for (row, v) in x.data().chunks(3).zip(&values) {
            assert!((k.log_pdf(row) - v).abs() < 1e-12);
        }
        let fd = finite_difference(|xs| f(xs).0, std::slice::from_ref(&x), 1e-6);
        assert!(relative_error(&grad, &fd) < 1e-6);
        let tape = Tape::new();
        assert!(k.log_pdf_var(tape.var(Tensor::zeros([2, 2]))).is_err());
    }

    #[test]
    fn kde_of_standard_normal_recovers_density() {
        let mut r = rng(13);
        let samples: Vec<Vec<f64>> = (0..100_000).map(|_| vec![r.sample(StandardNormal)]).collect();
        let k = Kde::scott(&samples).unwrap();
        let p = k.log_pdf(&[0.0]).exp();
        assert!((p / 0.398_942_280_4 - 1.0).abs() < 0.1, "{p}");
    }

    #[test]
    fn kde_samples_have_kernel_moments() {
        // mixture of kernels at 0 and 4 with h = 0.5: mean 2, variance 4 + 0.25
        let k = Kde::new(&[vec![0.0], vec![4.0]], vec![0.5]).unwrap();
        let s = k.sample(100_000, &mut rng(21));
        let n = s.numel() as f64;
        let mean = s.data().iter().sum::<f64>() / n;
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 2.0).abs() < 3.0 * (4.25 / n).sqrt());
        assert!((var - 4.25).abs() < 0.1);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(logits in proptest::collection::vec(-30.0f64..30.0, 1..6)) {
            let k = logits.len();
            let g = GmmParams::new(logits, vec![vec![0.0]; k], vec![vec![0.0]; k]).unwrap();
            prop_assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn permuting_components_keeps_density(seed in 0u64..1000, x in -3.0f64..3.0) {
            let g = random_gmm(seed, 3, 1);
            let p = GmmParams::new(
                vec![g.logits[2], g.logits[0], g.logits[1]],
                vec![g.means[2].clone(), g.means[0].clone(), g.means[1].clone()],
                vec![g.log_vars[2].clone(), g.log_vars[0].clone(), g.log_vars[1].clone()],
            ).unwrap();
            prop_assert!((g.log_pdf(&[x]) - p.log_pdf(&[x])).abs() < 1e-12);
        }
    }
}
