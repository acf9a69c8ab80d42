//! Scalar linear-Gaussian state-space model with an exact Kalman evidence.
//!
//! ```text
//! z_0 ~ N(m0, p0),  z_t = a z_{t-1} + N(0, q),  y_t = z_t + N(0, r)
//! ```
//!
//! [`LinearGaussianVsmc`] wraps it as a [`FilterModel`] whose transition is the
//! true dynamics and whose proposal `N(alpha z_{t-1} + beta y_t + gamma, exp(lv))`
//! has four trainable scalars. This is the reference problem for evidence and
//! gradient checks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::distributions::GmmVar;
use crate::error::Result;
use crate::smc::{FilterConfig, FilterModel};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGaussian {
    pub a: f64,
    /// Process noise variance.
    pub q: f64,
    /// Observation noise variance.
    pub r: f64,
    pub m0: f64,
    pub p0: f64,
}

impl Default for LinearGaussian {
    fn default() -> Self {
        Self {
            a: 0.9,
            q: 0.5,
            r: 0.4,
            m0: 0.0,
            p0: 1.0,
        }
    }
}

impl LinearGaussian {
    /// `(z_1..z_T, y_1..y_T)`.
    pub fn simulate(&self, len: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let mut z = self.m0 + self.p0.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let mut zs = Vec::with_capacity(len);
        let mut ys = Vec::with_capacity(len);
        for _ in 0..len {
            z = self.a * z + self.q.sqrt() * rng.sample::<f64, _>(StandardNormal);
            zs.push(z);
            ys.push(z + self.r.sqrt() * rng.sample::<f64, _>(StandardNormal));
        }
        (zs, ys)
    }

    /// `n` draws from the initial distribution, shape `[n, 1]`.
    pub fn initial_particles(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        let v = (0..n)
            .map(|_| self.m0 + self.p0.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::new([n, 1], v).expect("length matches")
    }

    /// Exact `log p(y_1:T)` from the Kalman filter.
    pub fn kalman_log_evidence(&self, ys: &[f64]) -> f64 {
        let (mut m, mut p) = (self.m0, self.p0);
        let mut ll = 0.0;
        for &y in ys {
            m *= self.a;
            p = self.a * self.a * p + self.q;
            let s = p + self.r;
            ll += -0.5 * (LN_2PI + s.ln() + (y - m) * (y - m) / s);
            let k = p / s;
            m += k * (y - m);
            p *= 1.0 - k;
        }
        ll
    }
}

/// [`LinearGaussian`] as a filter model with a learnable linear proposal.
#[derive(Debug, Clone)]
pub struct LinearGaussianVsmc {
    pub system: LinearGaussian,
    init: [f64; 4],
    alpha: ParamId,
    beta: ParamId,
    gamma: ParamId,
    log_var: ParamId,
}

impl LinearGaussianVsmc {
    /// Proposal `N(alpha z + beta y + gamma, exp(log_var))`.
    pub fn new(system: LinearGaussian, alpha: f64, beta: f64, gamma: f64, log_var: f64) -> Self {
        Self {
            system,
            init: [alpha, beta, gamma, log_var],
            alpha: ParamId(0),
            beta: ParamId(1),
            gamma: ParamId(2),
            log_var: ParamId(3),
        }
    }

    /// Proposal equal to the transition.
    pub fn bootstrap(system: LinearGaussian) -> Self {
        Self::new(system, system.a, 0.0, 0.0, system.q.ln())
    }

    /// The locally optimal proposal `p(z_t | z_{t-1}, y_t)`.
    pub fn optimal(system: LinearGaussian) -> Self {
        let var = system.q * system.r / (system.q + system.r);
        Self::new(system, system.a * var / system.q, var / system.r, 0.0, var.ln())
    }

    pub fn params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, v) in ["proposal.alpha", "proposal.beta", "proposal.gamma", "proposal.log_var"]
            .iter()
            .zip(self.init)
        {
            store.add(*name, Tensor::new([1, 1], vec![v]).expect("scalar"));
        }
        store
    }

    fn gaussian<'t>(mean: Var<'t>, log_var: Var<'t>) -> Result<GmmVar<'t>> {
        let tape = mean.tape();
        let n = mean.shape()[0];
        let zeros = tape.constant(Tensor::zeros([n, 1]));
        let raw = tape.concat(&[zeros, mean, zeros.add(log_var)?], 1)?;
        GmmVar::from_raw(raw, 1, 1, None)
    }
}

impl FilterModel for LinearGaussianVsmc {
    type Obs = f64;

    fn dim(&self) -> usize {
        1
    }

    fn context<'t>(&self, _: &ParamVars<'t>, _: &'t Tape, obs: &[f64]) -> Result<Vec<Option<Var<'t>>>> {
        Ok(vec![None; obs.len()])
    }

    fn proposal<'t>(&self, p: &ParamVars<'t>, prev: Var<'t>, _: Option<Var<'t>>, y: &f64) -> Result<GmmVar<'t>> {
        let mean = prev
            .mul(p[self.alpha])?
            .add(p[self.beta].scale(*y))?
            .add(p[self.gamma])?;
        Self::gaussian(mean, p[self.log_var])
    }

    fn transition<'t>(&self, _: &ParamVars<'t>, prev: Var<'t>) -> Result<GmmVar<'t>> {
        let tape = prev.tape();
        Self::gaussian(prev.scale(self.system.a), tape.constant(Tensor::full([1, 1], self.system.q.ln())))
    }

    /// Uses the model's own observation variance; `config.obs_std` is ignored.
    fn log_likelihood<'t>(&self, particles: Var<'t>, y: &f64, _: &FilterConfig) -> Result<Var<'t>> {
        let r = self.system.r;
        Ok(particles
            .add_scalar(-y)
            .square()
            .scale(-0.5 / r)
            .add_scalar(-0.5 * (LN_2PI + r.ln()))
            .reshape([particles.shape()[0]])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_evidence_is_marginal_gaussian() {
        let lg = LinearGaussian::default();
        let y = 1.3;
        // y_1 ~ N(a m0, a^2 p0 + q + r)
        let s = lg.a * lg.a * lg.p0 + lg.q + lg.r;
        let expected = -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (y - lg.a * lg.m0).powi(2) / s);
        assert!((lg.kalman_log_evidence(&[y]) - expected).abs() < 1e-12);
    }

    #[test]
    fn two_step_evidence_matches_joint_gaussian() {
        // joint covariance of (y1, y2) by hand
        let lg = LinearGaussian { m0: 0.5, ..Default::default() };
        let v1 = lg.a * lg.a * lg.p0 + lg.q;
        let v2 = lg.a * lg.a * v1 + lg.q;
        let c12 = lg.a * v1;
        let (s11, s22) = (v1 + lg.r, v2 + lg.r);
        let det = s11 * s22 - c12 * c12;
        let (m1, m2) = (lg.a * lg.m0, lg.a * lg.a * lg.m0);
        let (y1, y2) = (0.7, -0.4);
        let (d1, d2) = (y1 - m1, y2 - m2);
        let quad = (s22 * d1 * d1 - 2.0 * c12 * d1 * d2 + s11 * d2 * d2) / det;
        let expected = -0.5 * (2.0 * LN_2PI + det.ln() + quad);
        assert!((lg.kalman_log_evidence(&[y1, y2]) - expected).abs() < 1e-12);
    }

    #[test]
    fn optimal_proposal_gives_exact_single_step_weights() {
        // with the optimal proposal every particle carries weight p(y | z_prev)
        let lg = LinearGaussian::default();
        let model = LinearGaussianVsmc::optimal(lg);
        let tape = Tape::new();
        let p = model.params().bind_frozen(&tape);
        let prev = tape.constant(Tensor::new([3, 1], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = 0.4;
        let q = model.proposal(&p, prev, None, &y).unwrap();
        let (z, _) = q.sample(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let cfg = FilterConfig::default();
        let lw = model
            .log_likelihood(z, &y, &cfg)
            .unwrap()
            .add(model.transition(&p, prev).unwrap().log_pdf(z).unwrap())
            .unwrap()
            .sub(q.log_pdf(z).unwrap())
            .unwrap();
        for (i, zp) in [-1.0, 0.0, 2.0].iter().enumerate() {
            let s = lg.q + lg.r;
            let expected = -0.5 * (LN_2PI + s.ln() + (y - lg.a * zp).powi(2) / s);
            assert!((lw.value().data()[i] - expected).abs() < 1e-10);
        }
    }
}
