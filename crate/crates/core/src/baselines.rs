//! Reference filters: a generic bootstrap particle filter and an extended Kalman
//! filter, both over a constant-velocity state `(position, velocity)`.
//!
//! The bootstrap filter proposes from the transition, so its importance weights
//! are likelihoods alone; [`bootstrap_filter`] never evaluates a proposal or
//! transition density.
//!
//! The EKF update works in information form. With `R = sigma^2 I`, the gain and
//! the Joseph-form covariance only need the 6x6 matrix `G = H^T H / sigma^2` and
//! the vector `b = H^T r / sigma^2` accumulated over observed pixels, so an update
//! costs `O(M)` in the number of pixels instead of an `M x M` solve.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::smc::{normalize_and_ess, systematic_indices, FilterTrace, StepRecord};
use crate::ssm::{self, ObservationFrame, StateVector, STATE_DIM};
use crate::toy::LinearGaussian;

pub const CV_DIM: usize = 2 * STATE_DIM;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Constant-velocity dynamics with independent position and velocity noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstantVelocity {
    pub dt: f64,
    pub pos_std: f64,
    pub vel_std: f64,
}

impl Default for ConstantVelocity {
    fn default() -> Self {
        Self {
            dt: ssm::DEFAULT_DT,
            pos_std: 0.5,
            vel_std: 0.5,
        }
    }
}

impl ConstantVelocity {
    /// `[[I, dt I], [0, I]]`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut f = DMatrix::identity(CV_DIM, CV_DIM);
        for i in 0..STATE_DIM {
            f[(i, i + STATE_DIM)] = self.dt;
        }
        f
    }

    pub fn noise(&self) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(CV_DIM, CV_DIM);
        for i in 0..STATE_DIM {
            q[(i, i)] = self.pos_std * self.pos_std;
            q[(i + STATE_DIM, i + STATE_DIM)] = self.vel_std * self.vel_std;
        }
        q
    }

    /// Propagates row-major `[N, 6]` particles in place; `N * 6` normal draws.
    pub fn propagate(&self, particles: &mut [f64], rng: &mut impl Rng) {
        for p in particles.chunks_exact_mut(CV_DIM) {
            for i in 0..STATE_DIM {
                p[i] += self.dt * p[i + STATE_DIM];
            }
            for i in 0..CV_DIM {
                let sd = if i < STATE_DIM { self.pos_std } else { self.vel_std };
                p[i] += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

/// `n` particles with positions `N(initial, I)` and velocities `N(0, I)`.
pub fn baseline_init(initial: &StateVector, n: usize, rng: &mut impl Rng) -> Tensor {
    let mut v = Vec::with_capacity(n * CV_DIM);
    for _ in 0..n {
        for x in initial {
            v.push(x + rng.sample::<f64, _>(StandardNormal));
        }
        for _ in 0..STATE_DIM {
            v.push(rng.sample::<f64, _>(StandardNormal));
        }
    }
    Tensor::new([n, CV_DIM], v).expect("length matches")
}

/// Prior belief matching [`baseline_init`].
pub fn baseline_belief(initial: &StateVector) -> EkfBelief {
    let mut mean = DVector::zeros(CV_DIM);
    for i in 0..STATE_DIM {
        mean[i] = initial[i];
    }
    EkfBelief {
        mean,
        cov: DMatrix::identity(CV_DIM, CV_DIM),
    }
}

/// Model interface of the bootstrap filter: sample the transition, score the observation.
pub trait BootstrapModel {
    type Obs;

    fn dim(&self) -> usize;

    /// Moves row-major particles one step through the transition.
    fn propagate(&self, particles: &mut [f64], rng: &mut impl Rng);

    fn log_likelihood(&self, particles: &[f64], obs: &Self::Obs) -> Vec<f64>;
}

/// Constant-velocity particles observed through the image renderer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvImageModel {
    pub dynamics: ConstantVelocity,
    pub obs_std: f64,
}

impl BootstrapModel for CvImageModel {
    type Obs = ObservationFrame;

    fn dim(&self) -> usize {
        CV_DIM
    }

    fn propagate(&self, particles: &mut [f64], rng: &mut impl Rng) {
        self.dynamics.propagate(particles, rng);
    }

    fn log_likelihood(&self, particles: &[f64], obs: &ObservationFrame) -> Vec<f64> {
        particles
            .chunks_exact(CV_DIM)
            .map(|p| ssm::log_likelihood(p, obs, self.obs_std))
            .collect()
    }
}

impl BootstrapModel for LinearGaussian {
    type Obs = f64;

    fn dim(&self) -> usize {
        1
    }

    fn propagate(&self, particles: &mut [f64], rng: &mut impl Rng) {
        let sd = self.q.sqrt();
        for p in particles {
            *p = self.a * *p + sd * rng.sample::<f64, _>(StandardNormal);
        }
    }

    fn log_likelihood(&self, particles: &[f64], y: &f64) -> Vec<f64> {
        particles
            .iter()
            .map(|z| -0.5 * (LN_2PI + self.r.ln() + (y - z).powi(2) / self.r))
            .collect()
    }
}

/// Bootstrap particle filter with systematic resampling when `ESS < threshold`.
///
/// Per step, draws the transition noise and then one comb uniform.
pub fn bootstrap_filter<M: BootstrapModel>(
    model: &M,
    observations: &[M::Obs],
    initial: Tensor,
    threshold: f64,
    rng: &mut impl Rng,
) -> Result<FilterTrace> {
    let d = model.dim();
    if initial.rank() != 2 || initial.shape()[1] != d || initial.shape()[0] == 0 {
        return Err(Error::shape("bootstrap initial particles", initial.shape(), &[0, d]));
    }
    let n = initial.shape()[0];
    let mut particles = initial.into_data();
    let mut log_w = vec![0.0; n];
    let mut trace = FilterTrace::default();
    for (t, obs) in observations.iter().enumerate() {
        model.propagate(&mut particles, rng);
        let comb = rng.gen::<f64>() / n as f64;
        for (w, l) in log_w.iter_mut().zip(model.log_likelihood(&particles, obs)) {
            *w += l;
        }
        let (weights, ess, increment) = normalize_and_ess(&log_w).map_err(|e| match e {
            Error::WeightCollapse { .. } => Error::WeightCollapse { step: t },
            other => other,
        })?;
        let resampled = ess < threshold;
        trace.steps.push(StepRecord {
            particles: Tensor::new([n, d], particles.clone())?,
            weights: weights.clone(),
            ess,
            increment,
            resampled,
            sinkhorn_converged: true,
        });
        if resampled {
            let idx = systematic_indices(&weights, comb);
            particles = idx.iter().flat_map(|&i| particles[i * d..(i + 1) * d].to_vec()).collect();
            log_w.fill(0.0);
        } else {
            for w in &mut log_w {
                *w -= increment;
            }
        }
    }
    Ok(trace)
}

/// Gaussian belief of the EKF.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Observed rows of a linearized measurement: residuals `y - h(m)` and Jacobian rows.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub noise_var: f64,
}

pub trait MeasurementModel {
    type Obs;

    fn linearize(&self, mean: &DVector<f64>, obs: &Self::Obs) -> Result<Linearization>;
}

/// Pixels of the rendered blob; the Jacobian comes from differentiating the
/// renderer on a tape and only touches the `x`, `y` position components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMeasurement {
    pub obs_std: f64,
}

impl MeasurementModel for ImageMeasurement {
    type Obs = ObservationFrame;

    fn linearize(&self, mean: &DVector<f64>, obs: &ObservationFrame) -> Result<Linearization> {
        let pos = [mean[0], mean[1], mean[2]];
        let (img, jac) = ssm::render_jacobian(&pos)?;
        let rows: Vec<usize> = (0..ssm::NUM_PIXELS).filter(|&p| obs.mask[p]).collect();
        let residual = DVector::from_iterator(rows.len(), rows.iter().map(|&p| obs.pixels[p] - img[p]));
        let mut jacobian = DMatrix::zeros(rows.len(), mean.len());
        for (r, &p) in rows.iter().enumerate() {
            jacobian[(r, 0)] = jac[p][0];
            jacobian[(r, 1)] = jac[p][1];
        }
        Ok(Linearization {
            residual,
            jacobian,
            noise_var: self.obs_std * self.obs_std,
        })
    }
}

/// Linear measurement `y = H z + N(0, sigma^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMeasurement {
    pub h: DMatrix<f64>,
    pub noise_var: f64,
}

impl MeasurementModel for LinearMeasurement {
    type Obs = DVector<f64>;

    fn linearize(&self, mean: &DVector<f64>, y: &DVector<f64>) -> Result<Linearization> {
        Ok(Linearization {
            residual: y - &self.h * mean,
            jacobian: self.h.clone(),
            noise_var: self.noise_var,
        })
    }
}

/// Linear dynamics `z' = F z + N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub f: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl From<ConstantVelocity> for LinearDynamics {
    fn from(cv: ConstantVelocity) -> Self {
        Self {
            f: cv.matrix(),
            q: cv.noise(),
        }
    }
}

pub fn ekf_predict(belief: &EkfBelief, dynamics: &LinearDynamics) -> EkfBelief {
    EkfBelief {
        mean: &dynamics.f * &belief.mean,
        cov: &dynamics.f * &belief.cov * dynamics.f.transpose() + &dynamics.q,
    }
}

/// Measurement update; returns the posterior and the predictive log-likelihood
/// `log N(r; 0, H P H^T + sigma^2 I)`. An empty measurement returns the prior
/// unchanged with increment 0.
pub fn ekf_update(prior: &EkfBelief, lin: &Linearization) -> Result<(EkfBelief, f64)> {
    let m = lin.residual.len();
    if m == 0 {
        return Ok((prior.clone(), 0.0));
    }
    let d = prior.mean.len();
    let inv_var = 1.0 / lin.noise_var;
    let g = lin.jacobian.transpose() * &lin.jacobian * inv_var;
    let b = lin.jacobian.transpose() * &lin.residual * inv_var;
    let prior_chol = prior
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("EKF prior covariance is not positive definite".into()))?;
    let info = prior_chol.inverse() + &g;
    let info_chol = info
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("EKF innovation covariance is not invertible".into()))?;
    let post = info_chol.inverse();
    // gain K = post H^T / sigma^2, so K r = post b and K H = post G
    let kh = &post * &g;
    let ikh = DMatrix::identity(d, d) - &kh;
    let joseph = &ikh * &prior.cov * ikh.transpose() + &post * &g * &post;
    let cov = (&joseph + joseph.transpose()) * 0.5;
    let mean = &prior.mean + &post * &b;
    // Woodbury: r^T S^-1 r = r^T r / s2 - b^T post b, ln|S| = m ln s2 + ln|P| + ln|P^-1 + G|
    let quad = lin.residual.norm_squared() * inv_var - (b.transpose() * &post * &b)[(0, 0)];
    let log_det = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_s = m as f64 * lin.noise_var.ln() + log_det(&prior_chol) + log_det(&info_chol);
    let increment = -0.5 * (m as f64 * LN_2PI + log_det_s + quad);
    Ok((EkfBelief { mean, cov }, increment))
}

/// Runs predict/update over all observations; returns posterior beliefs and
/// per-step predictive log-likelihoods.
pub fn run_ekf<M: MeasurementModel>(
    initial: EkfBelief,
    dynamics: &LinearDynamics,
    measurement: &M,
    observations: &[M::Obs],
) -> Result<(Vec<EkfBelief>, Vec<f64>)> {
    let mut belief = initial;
    let mut beliefs = Vec::with_capacity(observations.len());
    let mut increments = Vec::with_capacity(observations.len());
    for obs in observations {
        let pred = ekf_predict(&belief, dynamics);
        let lin = measurement.linearize(&pred.mean, obs)?;
        let (post, inc) = ekf_update(&pred, &lin)?;
        belief = post;
        beliefs.push(belief.clone());
        increments.push(inc);
    }
    Ok((beliefs, increments))
}

/// EKF output as a one-particle trace (the mean), for unified serialization.
pub fn ekf_trace(beliefs: &[EkfBelief], increments: &[f64]) -> Result<FilterTrace> {
    let steps = beliefs
        .iter()
        .zip(increments)
        .map(|(b, &inc)| {
            Ok(StepRecord {
                particles: Tensor::new([1, b.mean.len()], b.mean.iter().copied().collect())?,
                weights: vec![1.0],
                ess: 1.0,
                increment: inc,
                resampled: false,
                sinkhorn_converged: true,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FilterTrace { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_zero_velocity_is_stationary() {
        let cv = ConstantVelocity {
            pos_std: 0.0,
            vel_std: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0];
        cv.propagate(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let mut p = vec![0.0, 0.0, 0.0, 1.0, -2.0, 50.0];
        cv.propagate(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p[..3], [0.02, -0.04, 1.0]);
    }

    #[test]
    fn init_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let t = baseline_init(&[1.0, -2.0, 20.0], n, &mut rng);
        for (j, target) in [1.0, -2.0, 20.0, 0.0, 0.0, 0.0].iter().enumerate() {
            let col: Vec<f64> = t.data().chunks_exact(CV_DIM).map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((mean - target).abs() < 3.0 / (n as f64).sqrt(), "{j}: {mean}");
            // the variance of a sample variance of N(0,1) is 2/n
            assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "{j}: {var}");
        }
        let a = baseline_init(&[0.0; 3], 5, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, baseline_init(&[0.0; 3], 5, &mut ChaCha8Rng::seed_from_u64(2)));
    }

    /// Textbook Kalman filter with an explicit innovation covariance inverse.
    fn kalman(
        mut m: DVector<f64>,
        mut p: DMatrix<f64>,
        dyn_: &LinearDynamics,
        h: &DMatrix<f64>,
        r: f64,
        ys: &[DVector<f64>],
    ) -> Vec<(DVector<f64>, DMatrix<f64>, f64)> {
        let mut out = Vec::new();
        for y in ys {
            m = &dyn_.f * &m;
            p = &dyn_.f * &p * dyn_.f.transpose() + &dyn_.q;
            let s = h * &p * h.transpose() + DMatrix::identity(h.nrows(), h.nrows()) * r;
            let s_inv = s.clone().try_inverse().unwrap();
            let k = &p * h.transpose() * &s_inv;
            let innov = y - h * &m;
            let ll = -0.5 * (h.nrows() as f64 * LN_2PI + s.determinant().ln() + (innov.transpose() * &s_inv * &innov)[(0, 0)]);
            m = &m + &k * &innov;
            p = (DMatrix::identity(p.nrows(), p.nrows()) - &k * h) * &p;
            out.push((m.clone(), p.clone(), ll));
        }
        out
    }

    #[test]
    fn ekf_with_linear_measurement_is_the_kalman_filter() {
        let dyn_ = LinearDynamics::from(ConstantVelocity::default());
        let mut h = DMatrix::zeros(3, CV_DIM);
        for i in 0..3 {
            h[(i, i)] = 1.0;
        }
        let meas = LinearMeasurement { h: h.clone(), noise_var: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ys: Vec<DVector<f64>> = (0..100)
            .map(|k| DVector::from_fn(3, |i, _| (k as f64 * 0.1 + i as f64).sin() * 5.0 + rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let init = baseline_belief(&[1.0, 0.0, -1.0]);
        let (beliefs, incs) = run_ekf(init.clone(), &dyn_, &meas, &ys).unwrap();
        let oracle = kalman(init.mean, init.cov, &dyn_, &h, 0.3, &ys);
        for ((b, inc), (m, p, ll)) in beliefs.iter().zip(&incs).zip(&oracle) {
            assert!((&b.mean - m).amax() < 1e-10);
            assert!((&b.cov - p).amax() < 1e-10);
            assert!((inc - ll).abs() < 1e-10);
        }
    }

    #[test]
    fn fully_masked_frame_is_a_no_op() {
        let dyn_ = LinearDynamics::from(ConstantVelocity::default());
        let frame = ObservationFrame {
            pixels: vec![0.0; ssm::NUM_PIXELS],
            mask: vec![false; ssm::NUM_PIXELS],
        };
        let init = baseline_belief(&[3.0, 4.0, 20.0]);
        let (beliefs, incs) = run_ekf(init.clone(), &dyn_, &ImageMeasurement { obs_std: 0.1 }, &[frame]).unwrap();
        assert_eq!(beliefs[0], ekf_predict(&init, &dyn_));
        assert_eq!(incs[0], 0.0);
    }

    #[test]
    fn image_ekf_covariance_stays_positive_definite() {
        let sys = ssm::LorenzSystem::default();
        let traj = ssm::simulate_trajectory(&sys, 128, ssm::NoiseSettings::partial(0.6, 0.3), 4, 0).unwrap();
        let (beliefs, _) = run_ekf(
            baseline_belief(&traj.initial),
            &ConstantVelocity::default().into(),
            &ImageMeasurement { obs_std: 0.3 },
            &traj.frames,
        )
        .unwrap();
        for b in &beliefs {
            assert!((&b.cov - b.cov.transpose()).amax() < 1e-10);
            assert!(b.cov.clone().symmetric_eigenvalues().iter().all(|&e| e > 0.0));
        }
    }

    #[test]
    fn bootstrap_filter_matches_kalman_on_average() {
        let lg = LinearGaussian::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ys = lg.simulate(10, &mut rng).1;
        let exact = lg.kalman_log_evidence(&ys);
        let est: Vec<f64> = (0..20)
            .map(|s| {
                let mut r = ChaCha8Rng::seed_from_u64(100 + s);
                let init = lg.initial_particles(2000, &mut r);
                bootstrap_filter(&lg, &ys, init, 1000.0, &mut r).unwrap().log_evidence()
            })
            .collect();
        let mean = est.iter().sum::<f64>() / est.len() as f64;
        assert!((mean - exact).abs() < 0.1, "{mean} vs {exact}");
    }

    #[test]
    fn bootstrap_weights_track_likelihood_only() {
        let lg = LinearGaussian::default();
        let init = Tensor::new([3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let trace = bootstrap_filter(&lg, &[0.5], init, 1.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let s = &trace.steps[0];
        let ll = lg.log_likelihood(s.particles.data(), &0.5);
        let (w, _, _) = normalize_and_ess(&ll).unwrap();
        assert_eq!(s.weights, w);
        assert!(bootstrap_filter(&lg, &[0.5], Tensor::zeros([2, 3]), 1.0, &mut ChaCha8Rng::seed_from_u64(6)).is_err());
    }
}
