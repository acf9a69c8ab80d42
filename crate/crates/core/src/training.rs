//! Unsupervised training on the SMC log-evidence, plus the supervised baseline.
//!
//! Each sequence in a batch is filtered on its own tape with optimal-transport
//! resampling; the loss is the negated batch mean of the cumulative
//! log-evidence, and per-sequence gradients are summed in sequence order so the
//! result does not depend on thread scheduling. Proposal and transition
//! parameters share one AdamW instance and step together.
//!
//! Sequence length follows a curriculum, by default `T = 2, 4, 8` starting at
//! epochs `0, E/3, 2E/3`. Every random draw of a sequence comes from a stream
//! keyed by `(seed, epoch, dataset index)`, so batch composition and order do not
//! change what a sequence sees.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::models::SupervisedEncoder;
use crate::smc::{log_evidence, FilterConfig, FilterModel, ResamplerKind, SinkhornConfig};
use crate::ssm::{Dataset, ObservationFrame, STATE_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// `(first epoch, sequence length)` pairs; empty means `T = 2, 4, 8` at `0, E/3, 2E/3`.
    pub curriculum: Vec<(usize, usize)>,
    pub particles: usize,
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
    /// Batch gradients with a larger global norm are rescaled to this norm.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            curriculum: Vec::new(),
            particles: 28,
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Vec<(usize, usize)> {
        if self.curriculum.is_empty() {
            vec![(0, 2), (self.epochs / 3, 4), (2 * self.epochs / 3, 8)]
        } else {
            self.curriculum.clone()
        }
    }

    /// Sequence length used during `epoch`.
    pub fn steps_at(&self, epoch: usize) -> usize {
        self.schedule()
            .iter()
            .filter(|(start, _)| *start <= epoch)
            .map(|&(_, t)| t)
            .last()
            .unwrap_or(1)
    }

    pub fn validate(&self, sequences: usize, steps: usize) -> Result<()> {
        if self.batch_size == 0 || sequences % self.batch_size != 0 {
            return Err(Error::Config(format!(
                "batch size {} must divide the {sequences} training sequences",
                self.batch_size
            )));
        }
        let schedule = self.schedule();
        if schedule.windows(2).any(|w| w[1].1 < w[0].1 || w[1].0 < w[0].0) {
            return Err(Error::Config(format!("curriculum must be non-decreasing: {schedule:?}")));
        }
        if let Some(&(_, t)) = schedule.iter().find(|(_, t)| *t == 0 || *t > steps) {
            return Err(Error::Config(format!("curriculum length {t} outside 1..={steps}")));
        }
        if self.particles == 0 {
            return Err(Error::Config("training needs at least one particle".into()));
        }
        if let Some(m) = self.max_grad_norm.filter(|m| !(*m > 0.0)) {
            return Err(Error::Config(format!("gradient clipping norm must be positive, got {m}")));
        }
        Ok(())
    }

    /// Filter settings for training: optimal-transport resampling at `N / 2`.
    pub fn filter_config(&self, obs_std: f64) -> FilterConfig {
        FilterConfig {
            sinkhorn: self.sinkhorn,
            ..FilterConfig::new(self.particles, ResamplerKind::OptimalTransport, obs_std)
        }
    }
}

/// Random stream for one sequence in one epoch.
pub fn sequence_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    rng.set_stream(index as u64);
    rng
}

/// One training sequence: observations and the noise level to score them with.
#[derive(Debug, Clone)]
pub struct TrainSequence<O> {
    pub observations: Vec<O>,
    pub obs_std: f64,
}

/// DPF training sequences from a dataset.
pub fn image_sequences(dataset: &Dataset) -> Vec<TrainSequence<ObservationFrame>> {
    dataset
        .trajectories
        .iter()
        .map(|t| TrainSequence {
            observations: t.frames.clone(),
            obs_std: t.noise.obs_std,
        })
        .collect()
}

/// Negated batch mean of the cumulative log-evidence, on one tape.
///
/// `initial[i]` holds the particles before the first observation of sequence
/// `i`; sequence `i` draws from `rngs[i]`.
pub fn vsmc_objective<'t, M: FilterModel>(
    model: &M,
    params: &ParamVars<'t>,
    tape: &'t Tape,
    batch: &[TrainSequence<M::Obs>],
    initial: &[Tensor],
    config: &TrainConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<Var<'t>> {
    let mut total = tape.scalar(0.0);
    for (i, seq) in batch.iter().enumerate() {
        let cfg = config.filter_config(seq.obs_std);
        let (ev, _) = log_evidence(model, params, tape, &seq.observations, initial[i].clone(), &cfg, &mut rngs[i])?;
        if !ev.item().is_finite() {
            return Err(Error::NonFinite(format!("log-evidence of sequence {i}")));
        }
        total = total.add(ev)?;
    }
    Ok(total.scale(-1.0 / batch.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean log-evidence per sequence (DPF) or mean Euclidean loss (supervised).
    pub objective: f64,
    pub grad_norm: f64,
    pub val_error: f64,
    /// Wall-clock time; logged but not written, so reports stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::eval::write_rows(path, &self.epochs)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self {
            epochs: crate::eval::read_rows(path)?,
        })
    }
}

/// Parameters, optimizer state and progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `"dpf"`, `"supervised"` or a caller-chosen tag.
    pub kind: String,
    /// Epochs completed.
    pub epoch: usize,
    pub params: ParamStore,
    pub optimizer: AdamW,
    /// Free-form JSON, e.g. the model and training configs.
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    epoch: usize,
    optimizer: AdamWConfig,
    optimizer_steps: u64,
    names: Vec<String>,
    extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, params: ParamStore, optimizer: AdamWConfig, metadata: serde_json::Value) -> Self {
        let optimizer = AdamW::new(optimizer, &params);
        Self {
            kind: kind.into(),
            epoch: 0,
            params,
            optimizer,
            metadata,
        }
    }

    /// Entries `param/{name}`, `adam.m/{name}`, `adam.v/{name}`.
    pub fn to_container(&self) -> Result<Container> {
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        let meta = CheckpointMeta {
            kind: self.kind.clone(),
            epoch: self.epoch,
            optimizer: self.optimizer.config,
            optimizer_steps: self.optimizer.steps_taken(),
            names: names.clone(),
            extra: self.metadata.clone(),
        };
        let mut c = Container::new("checkpoint", serde_json::to_value(meta)?);
        let (m, v) = self.optimizer.moments();
        for (i, (name, t)) in self.params.iter().enumerate() {
            c.push(format!("param/{name}"), t.clone());
            c.push(format!("adam.m/{name}"), m[i].clone());
            c.push(format!("adam.v/{name}"), v[i].clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "checkpoint" {
            return Err(Error::Format(format!("expected a checkpoint container, got {}", c.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(c.metadata.clone())?;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for name in &meta.names {
            params.add(name.clone(), c.require(&format!("param/{name}"))?.clone());
            m.push(c.require(&format!("adam.m/{name}"))?.clone());
            v.push(c.require(&format!("adam.v/{name}"))?.clone());
        }
        Ok(Self {
            kind: meta.kind,
            epoch: meta.epoch,
            params,
            optimizer: AdamW::from_parts(meta.optimizer, m, v, meta.optimizer_steps),
            metadata: meta.extra,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write_to(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read_from(path)?)
    }
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}

fn clip(grads: &mut [Tensor], norm: f64, max: Option<f64>) {
    if let Some(max) = max.filter(|&m| norm > m) {
        for g in grads {
            for v in g.data_mut() {
                *v *= max / norm;
            }
        }
    }
}

fn add_into(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }
}

fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut sequence_rng(seed, epoch, usize::MAX));
    order
}

/// Trains `model` on the SMC log-evidence from `checkpoint` onwards.
///
/// `initial(rng)` draws the particles before the first observation; it is
/// called first on each sequence's stream. `validate` maps parameters to a
/// validation error (return `NaN` to skip). A non-finite objective or gradient
/// aborts with [`Error::Diverged`] carrying the last good checkpoint.
pub fn train<M, F, V>(
    model: &M,
    mut checkpoint: Checkpoint,
    data: &[TrainSequence<M::Obs>],
    initial: F,
    config: &TrainConfig,
    validate: V,
) -> Result<(Checkpoint, TrainReport)>
where
    M: FilterModel + Sync,
    M::Obs: Sync + Clone,
    F: Fn(&mut ChaCha8Rng) -> Tensor + Sync,
    V: Fn(&ParamStore) -> Result<f64>,
{
    let max_steps = data.iter().map(|s| s.observations.len()).min().unwrap_or(0);
    config.validate(data.len(), max_steps)?;
    let mut report = TrainReport::default();
    for epoch in checkpoint.epoch..config.epochs {
        let start = Instant::now();
        let steps = config.steps_at(epoch);
        let order = epoch_order(data.len(), config.seed, epoch);
        let (mut objective, mut norms) = (0.0, 0.0);
        let batches = data.len() / config.batch_size;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let scale = -1.0 / idx.len() as f64;
            let params = &checkpoint.params;
            let results: Vec<Result<(f64, Vec<Tensor>)>> = idx
                .par_iter()
                .map(|&i| {
                    let mut rng = sequence_rng(config.seed, epoch, i);
                    let init = initial(&mut rng);
                    let tape = Tape::new();
                    let p = params.bind(&tape);
                    let cfg = config.filter_config(data[i].obs_std);
                    let (ev, _) = log_evidence(model, &p, &tape, &data[i].observations[..steps], init, &cfg, &mut rng)?;
                    let grads = tape.backward(ev.scale(scale))?;
                    Ok((ev.item(), p.gradients(&grads)))
                })
                .collect();
            let mut acc: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let mut batch_ev = 0.0;
            for r in results {
                let (ev, g) = r.map_err(|e| diverged(&checkpoint, epoch, b, e.to_string()))?;
                batch_ev += ev;
                add_into(&mut acc, &g);
            }
            let norm = grad_norm(&acc);
            if !batch_ev.is_finite() || !norm.is_finite() {
                return Err(diverged(&checkpoint, epoch, b, format!("objective {batch_ev}, gradient norm {norm}")));
            }
            clip(&mut acc, norm, config.max_grad_norm);
            let ckpt_params = &mut checkpoint.params;
            checkpoint.optimizer.step(ckpt_params, &acc)?;
            objective += batch_ev / idx.len() as f64;
            norms += norm;
        }
        checkpoint.epoch = epoch + 1;
        let record = EpochRecord {
            epoch,
            objective: objective / batches as f64,
            grad_norm: norms / batches as f64,
            val_error: validate(&checkpoint.params)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} T={steps} objective {:.3} grad-norm {:.3e} val-error {:.3} ({:.1}s)",
            record.objective,
            record.grad_norm,
            record.val_error,
            record.seconds
        );
        report.epochs.push(record);
    }
    Ok((checkpoint, report))
}

fn diverged(last: &Checkpoint, epoch: usize, batch: usize, reason: String) -> Error {
    Error::Diverged {
        epoch,
        batch,
        reason,
        last_good: Box::new(last.clone()),
    }
}

/// Mean Euclidean distance between predictions `[T, 3]` and `truth`.
pub fn euclidean_loss<'t>(pred: Var<'t>, truth: &[[f64; STATE_DIM]]) -> Result<Var<'t>> {
    let tape = pred.tape();
    let t = tape.constant(Tensor::new([truth.len(), STATE_DIM], truth.iter().flatten().copied().collect())?);
    // the offset keeps the square root differentiable at zero error
    Ok(pred.sub(t)?.square().sum_axis(1, false)?.add_scalar(1e-12).sqrt().mean())
}

/// Supervised regression of the state from single frames, all steps of each sequence.
pub fn train_supervised<V>(
    net: &SupervisedEncoder,
    mut checkpoint: Checkpoint,
    dataset: &Dataset,
    config: &TrainConfig,
    validate: V,
) -> Result<(Checkpoint, TrainReport)>
where
    V: Fn(&ParamStore) -> Result<f64>,
{
    config.validate(dataset.len(), dataset.steps())?;
    let mut report = TrainReport::default();
    for epoch in checkpoint.epoch..config.epochs {
        let start = Instant::now();
        let order = epoch_order(dataset.len(), config.seed, epoch);
        let (mut objective, mut norms) = (0.0, 0.0);
        let batches = dataset.len() / config.batch_size;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let frames: Vec<ObservationFrame> = idx
                .iter()
                .flat_map(|&i| dataset.trajectories[i].frames.iter().cloned())
                .collect();
            let truth: Vec<[f64; STATE_DIM]> = idx
                .iter()
                .flat_map(|&i| dataset.trajectories[i].states.iter().copied())
                .collect();
            let tape = Tape::new();
            let p = checkpoint.params.bind(&tape);
            let loss = euclidean_loss(net.forward(&p, &tape, &frames)?, &truth)?;
            let mut grads = p.gradients(&tape.backward(loss)?);
            let norm = grad_norm(&grads);
            if !loss.item().is_finite() || !norm.is_finite() {
                return Err(diverged(&checkpoint, epoch, b, format!("loss {}, gradient norm {norm}", loss.item())));
            }
            clip(&mut grads, norm, config.max_grad_norm);
            checkpoint.optimizer.step(&mut checkpoint.params, &grads)?;
            objective += loss.item();
            norms += norm;
        }
        checkpoint.epoch = epoch + 1;
        let record = EpochRecord {
            epoch,
            objective: objective / batches as f64,
            grad_norm: norms / batches as f64,
            val_error: validate(&checkpoint.params)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "supervised epoch {epoch} loss {:.3} val-error {:.3} ({:.1}s)",
            record.objective,
            record.val_error,
            record.seconds
        );
        report.epochs.push(record);
    }
    Ok((checkpoint, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use crate::toy::{LinearGaussian, LinearGaussianVsmc};

    fn toy_data(n: usize, len: usize, seed: u64) -> (LinearGaussian, Vec<TrainSequence<f64>>) {
        let lg = LinearGaussian::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .map(|_| TrainSequence {
                observations: lg.simulate(len, &mut rng).1,
                obs_std: lg.r.sqrt(),
            })
            .collect();
        (lg, data)
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let mut g = vec![Tensor::from_vec(vec![3.0, 4.0]), Tensor::from_vec(vec![0.0])];
        clip(&mut g, 5.0, None);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        clip(&mut g, 5.0, Some(10.0));
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        clip(&mut g, 5.0, Some(1.0));
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
        let bad = TrainConfig {
            max_grad_norm: Some(0.0),
            ..Default::default()
        };
        assert!(bad.validate(32, 8).is_err());
    }

    #[test]
    fn curriculum_defaults_and_validation() {
        let c = TrainConfig {
            epochs: 9,
            ..Default::default()
        };
        assert_eq!(c.schedule(), vec![(0, 2), (3, 4), (6, 8)]);
        assert_eq!((c.steps_at(0), c.steps_at(4), c.steps_at(8)), (2, 4, 8));
        assert!(c.validate(64, 8).is_ok());
        assert!(c.validate(48, 8).is_err());
        assert!(c.validate(64, 4).is_err());
        let bad = TrainConfig {
            curriculum: vec![(0, 4), (2, 2)],
            ..c
        };
        assert!(bad.validate(64, 8).is_err());
    }

    #[test]
    fn single_particle_single_step_objective() {
        // N = 1, T = 1: the objective is log p(y|z) + log p(z|z0) - log q(z|z0, y)
        let (lg, data) = toy_data(1, 1, 0);
        let model = LinearGaussianVsmc::new(lg, 0.5, 0.3, 0.1, -0.5);
        let config = TrainConfig {
            particles: 1,
            ..Default::default()
        };
        let tape = Tape::new();
        let p = model.params().bind(&tape);
        let init = Tensor::new([1, 1], vec![0.4]).unwrap();
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(7)];
        let obj = vsmc_objective(&model, &p, &tape, &data, &[init], &config, &mut rngs).unwrap();
        // replay the draws: one uniform (component), one normal
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let _: f64 = rand::Rng::gen(&mut r);
        let eps: f64 = rand::Rng::sample(&mut r, rand_distr::StandardNormal);
        let y = data[0].observations[0];
        let mean = 0.5 * 0.4 + 0.3 * y + 0.1;
        let sd = (-0.5f64).exp().sqrt();
        let z = mean + sd * eps;
        let norm = |x: f64, m: f64, v: f64| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v);
        let expected = norm(y, z, lg.r) + norm(z, lg.a * 0.4, lg.q) - norm(z, mean, sd * sd);
        assert!((obj.item() + expected).abs() < 1e-10, "{} vs {}", -obj.item(), expected);
    }

    #[test]
    fn identical_sequences_average_to_one() {
        let (lg, data) = toy_data(1, 3, 1);
        let model = LinearGaussianVsmc::bootstrap(lg);
        let config = TrainConfig {
            particles: 8,
            ..Default::default()
        };
        let init = lg.initial_particles(8, &mut ChaCha8Rng::seed_from_u64(2));
        let tape = Tape::new();
        let p = model.params().bind(&tape);
        let one = vsmc_objective(&model, &p, &tape, &data, &[init.clone()], &config, &mut [ChaCha8Rng::seed_from_u64(3)])
            .unwrap()
            .item();
        let twice = [data[0].clone(), data[0].clone()];
        let mut rngs = [ChaCha8Rng::seed_from_u64(3), ChaCha8Rng::seed_from_u64(3)];
        let two = vsmc_objective(&model, &p, &tape, &twice, &[init.clone(), init], &config, &mut rngs).unwrap();
        assert!((two.item() - one).abs() < 1e-12);
    }

    fn toy_train(epochs: usize, batch: usize, seed: u64) -> (Checkpoint, TrainReport, Checkpoint) {
        let (lg, data) = toy_data(16, 4, 4);
        let model = LinearGaussianVsmc::new(lg, 0.2, 0.0, 0.5, 1.0);
        let config = TrainConfig {
            epochs,
            batch_size: batch,
            particles: 4,
            seed,
            optimizer: AdamWConfig {
                lr: 0.05,
                ..Default::default()
            },
            curriculum: vec![(0, 4)],
            ..Default::default()
        };
        let start = Checkpoint::new("toy", model.params(), config.optimizer, serde_json::Value::Null);
        let (ckpt, report) = train(&model, start.clone(), &data, |r| lg.initial_particles(4, r), &config, |_| Ok(f64::NAN)).unwrap();
        (ckpt, report, start)
    }

    #[test]
    fn toy_training_improves_the_objective() {
        // evaluate both parameter sets on the same fresh streams
        let (ckpt, report, start) = toy_train(50, 4, 12);
        let (lg, data) = toy_data(16, 4, 4);
        let model = LinearGaussianVsmc::new(lg, 0.2, 0.0, 0.5, 1.0);
        let config = TrainConfig {
            particles: 4,
            ..Default::default()
        };
        let score = |store: &ParamStore| {
            (0..20)
                .map(|rep| {
                    let tape = Tape::new();
                    let p = store.bind_frozen(&tape);
                    let mut rngs: Vec<_> = (0..data.len()).map(|i| sequence_rng(99, rep, i)).collect();
                    let init: Vec<_> = rngs.iter_mut().map(|r| lg.initial_particles(4, r)).collect();
                    -vsmc_objective(&model, &p, &tape, &data, &init, &config, &mut rngs).unwrap().item()
                })
                .sum::<f64>()
        };
        assert!(score(&ckpt.params) > score(&start.params));
        assert!(report.epochs.last().unwrap().objective > report.epochs[0].objective);
    }

    #[test]
    fn zero_epochs_keep_initialization() {
        let (ckpt, report, start) = toy_train(0, 4, 0);
        assert_eq!(ckpt, start);
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_gradients_finite() {
        let (a, ra, _) = toy_train(2, 4, 9);
        let (b, rb, _) = toy_train(2, 4, 9);
        assert_eq!(a, b);
        assert_eq!(
            ra.epochs.iter().map(|e| (e.objective, e.grad_norm)).collect::<Vec<_>>(),
            rb.epochs.iter().map(|e| (e.objective, e.grad_norm)).collect::<Vec<_>>()
        );
        assert!(ra.epochs.iter().all(|e| e.grad_norm.is_finite() && e.grad_norm > 0.0));
        assert_eq!(a.epoch, 2);
    }

    #[test]
    fn objective_does_not_depend_on_batch_layout() {
        // with lr = 0 the per-epoch objective is a plain mean over sequences
        let (lg, data) = toy_data(8, 3, 5);
        let model = LinearGaussianVsmc::bootstrap(lg);
        let run = |batch| {
            let config = TrainConfig {
                epochs: 1,
                batch_size: batch,
                particles: 6,
                curriculum: vec![(0, 3)],
                optimizer: AdamWConfig {
                    lr: 0.0,
                    weight_decay: 0.0,
                    ..Default::default()
                },
                ..Default::default()
            };
            let start = Checkpoint::new("toy", model.params(), config.optimizer, serde_json::Value::Null);
            train(&model, start, &data, |r| lg.initial_particles(6, r), &config, |_| Ok(f64::NAN)).unwrap().1.epochs[0].objective
        };
        assert!((run(2) - run(8)).abs() < 1e-9);
    }

    #[test]
    fn resume_continues_epoch_numbering() {
        let (full, _, _) = toy_train(3, 4, 11);
        let (lg, data) = toy_data(16, 4, 4);
        let model = LinearGaussianVsmc::new(lg, 0.2, 0.0, 0.5, 1.0);
        let (mid, _, _) = toy_train(2, 4, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        mid.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, mid);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 4,
            particles: 4,
            seed: 11,
            optimizer: AdamWConfig {
                lr: 0.05,
                ..Default::default()
            },
            curriculum: vec![(0, 4)],
            ..Default::default()
        };
        let (resumed, report) = train(&model, loaded, &data, |r| lg.initial_particles(4, r), &config, |_| Ok(f64::NAN)).unwrap();
        assert_eq!(report.epochs[0].epoch, 2);
        assert_eq!(resumed, full);
    }

    #[test]
    fn divergence_returns_last_good_checkpoint() {
        let (lg, mut data) = toy_data(4, 2, 6);
        data[2].observations[1] = f64::NAN;
        let model = LinearGaussianVsmc::bootstrap(lg);
        let config = TrainConfig {
            epochs: 1,
            batch_size: 4,
            particles: 3,
            curriculum: vec![(0, 2)],
            ..Default::default()
        };
        let start = Checkpoint::new("toy", model.params(), config.optimizer, serde_json::Value::Null);
        match train(&model, start.clone(), &data, |r| lg.initial_particles(3, r), &config, |_| Ok(f64::NAN)) {
            Err(Error::Diverged { epoch, last_good, .. }) => {
                assert_eq!(epoch, 0);
                assert_eq!(*last_good, start);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn supervised_training_reduces_error() {
        let sys = crate::ssm::LorenzSystem::default();
        let data = Dataset::generate(&sys, 8, 4, &[crate::ssm::NoiseSettings::noise(0.1)], 3).unwrap();
        let small = ModelConfig {
            width: 32,
            encoding: 32,
            base_channels: 4,
            ..Default::default()
        };
        let (net, store) = SupervisedEncoder::new(small, 1).unwrap();
        let config = TrainConfig {
            epochs: 30,
            batch_size: 4,
            curriculum: vec![(0, 4)],
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let err = |p: &ParamStore| -> Result<f64> {
            let frames: Vec<_> = data.trajectories.iter().flat_map(|t| t.frames.clone()).collect();
            let truth: Vec<_> = data.trajectories.iter().flat_map(|t| t.states.clone()).collect();
            let pred = net.predict(p, &frames)?;
            Ok(pred
                .iter()
                .zip(&truth)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / truth.len() as f64)
        };
        let before = err(&store).unwrap();
        let start = Checkpoint::new("supervised", store, config.optimizer, serde_json::Value::Null);
        let (ckpt, report) = train_supervised(&net, start, &data, &config, err).unwrap();
        assert_eq!(report.epochs.len(), 30);
        assert!(err(&ckpt.params).unwrap() < before);
    }
}
