//! The particle-filter engine: proposal sampling, importance weights, ESS-triggered
//! resampling and log-evidence accumulation.
//!
//! Log-weights are carried in the *N-scaled* convention: a uniform ensemble has
//! all log-weights equal to zero, and after each step the carried weights are
//! `log w~ - increment`, where `increment = logsumexp(log w~) - ln N` is the log of
//! the step's evidence factor. With that convention the running sum of
//! increments is the standard SMC estimate of `log p(y_1:t)` whether or not a
//! step resampled.
//!
//! Two drivers share [`filter_step`]:
//!
//! * [`log_evidence`] keeps one tape for a whole sequence so the cumulative
//!   log-evidence can be differentiated (training, usually with optimal-transport
//!   resampling);
//! * [`run_filter`] builds a fresh tape per step with frozen parameters and keeps
//!   only values (inference, usually with systematic resampling).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, ParamVars, Tape, Tensor, Var};
use crate::container::Container;
use crate::distributions::GmmVar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResamplerKind {
    Systematic,
    OptimalTransport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    /// Entropic regularization, in units of the mean pairwise cost.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Column-marginal tolerance; `<= 0` runs exactly `max_iters` iterations.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            max_iters: 100,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub particles: usize,
    /// Resample when the ESS drops strictly below this value.
    pub threshold: f64,
    pub resampler: ResamplerKind,
    pub sinkhorn: SinkhornConfig,
    pub obs_std: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self::new(28, ResamplerKind::Systematic, 0.1)
    }
}

impl FilterConfig {
    /// `particles` with the threshold at `N / 2` (at least 1, so a single particle never resamples).
    pub fn new(particles: usize, resampler: ResamplerKind, obs_std: f64) -> Self {
        Self {
            particles,
            threshold: (particles as f64 / 2.0).max(1.0),
            resampler,
            sinkhorn: SinkhornConfig::default(),
            obs_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Config("filter needs at least one particle".into()));
        }
        if !(1.0..=self.particles as f64).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "resample threshold {} outside [1, {}]",
                self.threshold, self.particles
            )));
        }
        if !(self.sinkhorn.epsilon > 0.0) {
            return Err(Error::Config("sinkhorn epsilon must be positive".into()));
        }
        if !(self.obs_std > 0.0) {
            return Err(Error::Config("observation std must be positive".into()));
        }
        Ok(())
    }
}

/// A state-space model whose proposal and transition are (possibly learned)
/// Gaussian mixtures evaluated on a tape.
pub trait FilterModel {
    type Obs;

    fn dim(&self) -> usize;

    /// Per-step observation features computed once per sequence (e.g. image
    /// encodings), one entry per observation.
    fn context<'t>(&self, params: &ParamVars<'t>, tape: &'t Tape, obs: &[Self::Obs]) -> Result<Vec<Option<Var<'t>>>>;

    /// `q(z_t | z_{t-1}, y_t)` for every particle in `prev` (`[N, d]`).
    fn proposal<'t>(&self, params: &ParamVars<'t>, prev: Var<'t>, ctx: Option<Var<'t>>, obs: &Self::Obs) -> Result<GmmVar<'t>>;

    /// `p(z_t | z_{t-1})` for every particle in `prev`.
    fn transition<'t>(&self, params: &ParamVars<'t>, prev: Var<'t>) -> Result<GmmVar<'t>>;

    /// `log p(y_t | z_t)` per particle, shape `[N]`.
    fn log_likelihood<'t>(&self, particles: Var<'t>, obs: &Self::Obs, config: &FilterConfig) -> Result<Var<'t>>;

    /// `log p(z_1)` per particle when the model has its own density for the
    /// first filtered state. It then stands in for the transition term at the
    /// first step and the initial particles only feed the proposal, which keeps
    /// the estimator unbiased (the backward kernel is the initial distribution).
    fn initial_log_density<'t>(&self, _particles: Var<'t>) -> Result<Option<Var<'t>>> {
        Ok(None)
    }
}

/// `log w~ = log w_prev + log p(y|z) + log p(z|z_prev) - log q(z|z_prev, y)`.
pub fn weight_update(prev: f64, log_lik: f64, log_transition: f64, log_proposal: f64) -> Result<f64> {
    for (name, v) in [
        ("previous log-weight", prev),
        ("log-likelihood", log_lik),
        ("transition log-density", log_transition),
        ("proposal log-density", log_proposal),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} is {v}")));
        }
    }
    Ok(prev + log_lik + log_transition - log_proposal)
}

/// Normalized weights, ESS and the log evidence increment `logsumexp - ln N`.
pub fn normalize_and_ess(log_weights: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || log_weights.iter().any(|w| w.is_nan()) {
        return Err(Error::WeightCollapse { step: 0 });
    }
    if m == f64::INFINITY {
        return Err(Error::NonFinite("log-weight is +inf".into()));
    }
    let exps: Vec<f64> = log_weights.iter().map(|w| (w - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let increment = m + total.ln() - (log_weights.len() as f64).ln();
    Ok((weights, ess, increment))
}

/// Offspring indices for comb positions `u + k/N`, with `u` in `[0, 1/N)`.
pub fn systematic_indices(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for k in 0..n {
        let pos = u + k as f64 / n as f64;
        while pos >= cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Systematic resampling with one uniform draw from `rng`.
pub fn systematic_resample(weights: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let u = rng.gen::<f64>() / weights.len() as f64;
    systematic_indices(weights, u)
}

/// Entropy-regularized transport from a weighted ensemble to the uniform one.
pub struct SinkhornResult<'t> {
    /// Transport plan `[N, N]`: rows sum to the source weights, columns to `1/N`.
    pub plan: Var<'t>,
    /// `N * plan^T * particles`.
    pub particles: Var<'t>,
    pub iterations: usize,
    pub converged: bool,
}

/// Log-domain Sinkhorn between `particles` (`[N, d]`) weighted by
/// `softmax(log_weights)` and the uniform measure on the same particles.
///
/// The squared-distance cost is divided by its mean so `epsilon` is scale free. The row potential is updated last, so row marginals, and with
/// them the weighted mean of the ensemble, are preserved to rounding error.
pub fn ot_resample<'t>(particles: Var<'t>, log_weights: Var<'t>, config: &SinkhornConfig) -> Result<SinkhornResult<'t>> {
    let shape = particles.shape();
    let (n, d) = (shape[0], shape[1]);
    let tape = particles.tape();
    let log_a = log_weights.sub(log_weights.logsumexp()?)?.reshape([n, 1])?;
    let log_b = -(n as f64).ln();
    let diff = particles.reshape([n, 1, d])?.sub(particles.reshape([1, n, d])?)?;
    let raw_cost = diff.square().sum_axis(2, false)?;
    let mean_cost = raw_cost.mean();
    // cost in units of its mean, already divided by epsilon
    let cost = if mean_cost.item() > 1e-12 {
        raw_cost.div(mean_cost)?.scale(1.0 / config.epsilon)
    } else {
        raw_cost.scale(1.0 / config.epsilon)
    };
    let eps = config.epsilon;

    let mut f = tape.constant(Tensor::zeros([n, 1]));
    let mut g;
    let mut iterations = 0;
    let converged;
    loop {
        // g_j = -eps * LSE_i(log a_i + (f_i - C_ij) / eps)
        g = f.scale(1.0 / eps).sub(cost)?.add(log_a)?.logsumexp_axis(0, true)?.scale(-eps);
        // f_i = -eps * LSE_j(log b + (g_j - C_ij) / eps)
        f = g.scale(1.0 / eps).sub(cost)?.add_scalar(log_b).logsumexp_axis(1, true)?.scale(-eps);
        iterations += 1;
        if config.tolerance > 0.0 {
            let violation = column_violation(&f.value(), &g.value(), &cost.value(), &log_a.value(), log_b, eps);
            if violation < config.tolerance {
                converged = true;
                break;
            }
        }
        if iterations >= config.max_iters {
            converged = config.tolerance <= 0.0;
            break;
        }
    }
    let log_plan = f
        .add(g)?
        .scale(1.0 / eps)
        .sub(cost)?
        .add(log_a)?
        .add_scalar(log_b);
    let plan = log_plan.exp();
    let moved = plan.transpose()?.matmul(particles)?.scale(n as f64);
    if !moved.value().is_finite() {
        return Err(Error::NonFinite("optimal-transport resampling produced non-finite particles".into()));
    }
    Ok(SinkhornResult {
        plan,
        particles: moved,
        iterations,
        converged,
    })
}

fn column_violation(f: &Tensor, g: &Tensor, cost: &Tensor, log_a: &Tensor, log_b: f64, eps: f64) -> f64 {
    let n = g.numel();
    (0..n)
        .map(|j| {
            let col: f64 = (0..n)
                .map(|i| ((f.data()[i] + g.data()[j]) / eps - cost.data()[i * n + j] + log_a.data()[i] + log_b).exp())
                .sum();
            (col - 1.0 / n as f64).abs()
        })
        .fold(0.0, f64::max)
}

/// Values recorded for one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Particles after propagation, before any resampling, `[N, d]`.
    pub particles: Tensor,
    /// Their normalized importance weights.
    pub weights: Vec<f64>,
    pub ess: f64,
    pub increment: f64,
    pub resampled: bool,
    /// `false` when optimal-transport resampling hit its iteration cap.
    pub sinkhorn_converged: bool,
}

impl StepRecord {
    pub fn posterior_mean(&self) -> Vec<f64> {
        let d = self.particles.shape()[1];
        let mut m = vec![0.0; d];
        for (row, w) in self.particles.data().chunks_exact(d).zip(&self.weights) {
            for (mj, v) in m.iter_mut().zip(row) {
                *mj += w * v;
            }
        }
        m
    }
}

/// Output of [`filter_step`]: carried state on the tape plus a value record.
pub struct StepOutput<'t> {
    pub particles: Var<'t>,
    pub log_weights: Var<'t>,
    pub increment: Var<'t>,
    pub record: StepRecord,
}

/// Propose, weight, normalize, accumulate, then resample iff `ESS < N_T`.
///
/// `first` marks the first observation, where [`FilterModel::initial_log_density`]
/// replaces the transition density if the model provides one.
///
/// Draws, in order: the proposal sample (`N` uniforms, `N*d` normals) and one
/// uniform for systematic resampling, consumed whether or not a resample happens.
#[allow(clippy::too_many_arguments)]
pub fn filter_step<'t, M: FilterModel>(
    model: &M,
    params: &ParamVars<'t>,
    prev: Var<'t>,
    prev_log_weights: Var<'t>,
    ctx: Option<Var<'t>>,
    obs: &M::Obs,
    first: bool,
    config: &FilterConfig,
    rng: &mut impl Rng,
) -> Result<StepOutput<'t>> {
    let n = config.particles;
    let tape = prev.tape();
    let q = model.proposal(params, prev, ctx, obs)?;
    let (z, _) = q.sample(rng)?;
    let comb = rng.gen::<f64>() / n as f64;
    let log_q = q.log_pdf(z)?;
    let initial = if first { model.initial_log_density(z)? } else { None };
    let log_p = match initial {
        Some(lp) => lp,
        None => model.transition(params, prev)?.log_pdf(z)?,
    };
    let log_lik = model.log_likelihood(z, obs, config)?;
    for (name, v) in [
        ("log-likelihood", &log_lik),
        ("transition log-density", &log_p),
        ("proposal log-density", &log_q),
        ("particle", &z),
    ] {
        if !v.value().is_finite() {
            return Err(Error::NonFinite(format!("{name} is not finite")));
        }
    }
    let log_w = prev_log_weights.add(log_lik)?.add(log_p)?.sub(log_q)?;
    let (weights, ess, _) = normalize_and_ess(log_w.value().data())?;
    let increment = log_w.logsumexp()?.add_scalar(-(n as f64).ln());
    let mut record = StepRecord {
        particles: (*z.value()).clone(),
        weights,
        ess,
        increment: increment.item(),
        resampled: false,
        sinkhorn_converged: true,
    };
    let (particles, log_weights) = if ess < config.threshold {
        record.resampled = true;
        let moved = match config.resampler {
            ResamplerKind::Systematic => z.gather(0, &systematic_indices(&record.weights, comb))?,
            ResamplerKind::OptimalTransport => {
                let ot = ot_resample(z, log_w, &config.sinkhorn)?;
                record.sinkhorn_converged = ot.converged;
                ot.particles
            }
        };
        (moved, tape.constant(Tensor::zeros([n])))
    } else {
        (z, log_w.sub(increment)?)
    };
    Ok(StepOutput {
        particles,
        log_weights,
        increment,
        record,
    })
}

/// Per-step records of one filter run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FilterTrace {
    pub steps: Vec<StepRecord>,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn increments(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.increment).collect()
    }

    /// Running sum of the increments.
    pub fn cumulative(&self) -> Vec<f64> {
        self.steps
            .iter()
            .scan(0.0, |acc, s| {
                *acc += s.increment;
                Some(*acc)
            })
            .collect()
    }

    pub fn log_evidence(&self) -> f64 {
        self.steps.iter().map(|s| s.increment).sum()
    }

    pub fn posterior_means(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(StepRecord::posterior_mean).collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let t = self.len();
        let (n, d) = match self.steps.first() {
            Some(s) => (s.particles.shape()[0], s.particles.shape()[1]),
            None => (0, 0),
        };
        let mut c = Container::new("filter-trace", serde_json::json!({ "steps": t, "particles": n, "dim": d }));
        let col = |f: &dyn Fn(&StepRecord) -> f64| -> Vec<f64> { self.steps.iter().map(f).collect() };
        c.push(
            "particles",
            Tensor::new([t, n, d], self.steps.iter().flat_map(|s| s.particles.data().to_vec()).collect())?,
        );
        c.push("weights", Tensor::new([t, n], self.steps.iter().flat_map(|s| s.weights.clone()).collect())?);
        c.push("ess", Tensor::new([t], col(&|s| s.ess))?);
        c.push("increments", Tensor::new([t], col(&|s| s.increment))?);
        c.push("cumulative", Tensor::new([t], self.cumulative())?);
        c.push("resampled", Tensor::new([t], col(&|s| f64::from(u8::from(s.resampled))))?);
        c.push(
            "sinkhorn_converged",
            Tensor::new([t], col(&|s| f64::from(u8::from(s.sinkhorn_converged))))?,
        );
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "filter-trace" {
            return Err(Error::Format(format!("expected a filter-trace container, got {}", c.kind)));
        }
        let particles = c.require("particles")?;
        let shape = particles.shape();
        let (t, n, d) = (shape[0], shape[1], shape[2]);
        let weights = c.require("weights")?.data();
        let ess = c.require("ess")?.data();
        let inc = c.require("increments")?.data();
        let res = c.require("resampled")?.data();
        let conv = c.require("sinkhorn_converged")?.data();
        let steps = (0..t)
            .map(|k| {
                Ok(StepRecord {
                    particles: Tensor::new([n, d], particles.data()[k * n * d..(k + 1) * n * d].to_vec())?,
                    weights: weights[k * n..(k + 1) * n].to_vec(),
                    ess: ess[k],
                    increment: inc[k],
                    resampled: res[k] != 0.0,
                    sinkhorn_converged: conv[k] != 0.0,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { steps })
    }
}

/// Differentiable log-evidence of a whole sequence on one tape.
///
/// `params` must be bound to `tape`; `initial` (`[N, d]`) are the particles
/// before the first observation.
pub fn log_evidence<'t, M: FilterModel>(
    model: &M,
    params: &ParamVars<'t>,
    tape: &'t Tape,
    observations: &[M::Obs],
    initial: Tensor,
    config: &FilterConfig,
    rng: &mut impl Rng,
) -> Result<(Var<'t>, FilterTrace)> {
    check_run(model, observations.len(), &initial, config)?;
    let ctx = model.context(params, tape, observations)?;
    let mut particles = tape.constant(initial);
    let mut log_weights = tape.constant(Tensor::zeros([config.particles]));
    let mut total = tape.scalar(0.0);
    let mut trace = FilterTrace::default();
    for (t, obs) in observations.iter().enumerate() {
        let out = filter_step(model, params, particles, log_weights, ctx[t], obs, t == 0, config, rng)
            .map_err(|e| at_step(e, t))?;
        total = total.add(out.increment)?;
        particles = out.particles;
        log_weights = out.log_weights;
        trace.steps.push(out.record);
    }
    Ok((total, trace))
}

/// Inference run: frozen parameters, values only, one small tape per step.
pub fn run_filter<M: FilterModel>(
    model: &M,
    params: &ParamStore,
    observations: &[M::Obs],
    initial: Tensor,
    config: &FilterConfig,
    rng: &mut impl Rng,
) -> Result<FilterTrace> {
    check_run(model, observations.len(), &initial, config)?;
    let mut particles = initial;
    let mut log_weights = Tensor::zeros([config.particles]);
    let mut trace = FilterTrace::default();
    for (t, obs) in observations.iter().enumerate() {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let ctx = model.context(&p, &tape, std::slice::from_ref(obs))?;
        let out = filter_step(
            model,
            &p,
            tape.constant(particles),
            tape.constant(log_weights),
            ctx[0],
            obs,
            t == 0,
            config,
            rng,
        )
        .map_err(|e| at_step(e, t))?;
        particles = (*out.particles.value()).clone();
        log_weights = (*out.log_weights.value()).clone();
        trace.steps.push(out.record);
    }
    Ok(trace)
}

fn check_run<M: FilterModel>(model: &M, steps: usize, initial: &Tensor, config: &FilterConfig) -> Result<()> {
    config.validate()?;
    if steps == 0 {
        return Err(Error::invalid("filter needs at least one observation"));
    }
    if initial.shape() != [config.particles, model.dim()] {
        return Err(Error::shape("initial particles", initial.shape(), &[config.particles, model.dim()]));
    }
    Ok(())
}

fn at_step(e: Error, t: usize) -> Error {
    match e {
        Error::WeightCollapse { .. } => Error::WeightCollapse { step: t },
        Error::NonFinite(msg) => Error::NonFinite(format!("step {t}: {msg}")),
        other => other,
    }
}
