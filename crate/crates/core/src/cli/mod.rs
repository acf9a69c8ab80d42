//! Experiment orchestration behind the `dvsmc` binary.
//!
//! An [`ExperimentConfig`] (TOML, every field optional) describes the two
//! sweeps: a noise sweep over `sigma_v` with full observations and a
//! partial-observation sweep over the observed proportion `P` at fixed
//! `sigma_v`. The four commands share one output layout:
//!
//! ```text
//! <out>/data/<regime>/train.bin            mixed-condition training set
//! <out>/data/<regime>/val-<condition>.bin  one validation set per grid point
//! <out>/checkpoints/<regime>/<method>.bin  dpf and supervised checkpoints
//! <out>/reports/<regime>/<method>.csv      per-epoch training reports
//! <out>/eval/<regime>/records.csv          one row per (method, condition, seed)
//! <out>/eval/<regime>/summary.json         aggregates with 95% intervals
//! <out>/plots/*.svg, *.csv                 tracking error and ELBO figures
//! <out>/logs/<command>.toml                resolved config of the last run
//! ```
//!
//! Validation sets of one regime share their ground-truth trajectories, so the
//! grid points differ only in how the states are observed.

mod plot;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    baseline_belief, baseline_init, bootstrap_filter, run_ekf, ConstantVelocity, CvImageModel, ImageMeasurement,
};
use crate::distributions::{FittedGaussian, Kde};
use crate::error::{Error, Result};
use crate::eval::{self, build_prior, EvalRecord, EvalReport, PriorConfig};
use crate::models::{DeepVsmc, ModelConfig, SupervisedEncoder};
use crate::smc::{run_filter, FilterConfig, FilterTrace, ResamplerKind};
use crate::ssm::{Dataset, LorenzSystem, NoiseSettings, Trajectory, STATE_DIM};
use crate::training::{self, Checkpoint, TrainConfig};
use crate::autodiff::{AdamWConfig, ParamStore};

pub use plot::{write_plots, PlotFiles};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "DVSMC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "noise-sweep", alias = "noise")]
    Noise,
    #[serde(rename = "partial-sweep", alias = "partial")]
    Partial,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::Noise, Regime::Partial];

    /// Short name used in paths and CSV rows.
    pub fn name(self) -> &'static str {
        match self {
            Regime::Noise => "noise",
            Regime::Partial => "partial",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" | "noise-sweep" => Ok(Regime::Noise),
            "partial" | "partial-sweep" => Ok(Regime::Partial),
            _ => Err(Error::Config(format!("unknown regime {s:?} (expected noise or partial)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dpf,
    /// Bootstrap filter with the DPF's particle count.
    Bpf,
    /// Bootstrap filter with ten times the particles.
    Bpf10x,
    Ekf,
    Supervised,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Dpf, Method::Bpf, Method::Bpf10x, Method::Ekf, Method::Supervised];

    pub fn name(self) -> &'static str {
        match self {
            Method::Dpf => "dpf",
            Method::Bpf => "bpf",
            Method::Bpf10x => "bpf10x",
            Method::Ekf => "ekf",
            Method::Supervised => "supervised",
        }
    }

    /// Methods with a trained checkpoint.
    pub fn is_trained(self) -> bool {
        matches!(self, Method::Dpf | Method::Supervised)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected dpf, bpf, bpf10x, ekf or supervised)")))
    }
}

/// Parses a comma-separated method list such as `dpf,ekf`.
pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',').map(str::trim).filter(|m| !m.is_empty()).map(Method::from_str).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_sequences: usize,
    pub train_steps: usize,
    pub val_sequences: usize,
    pub val_steps: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_sequences: 1024,
            train_steps: 8,
            val_sequences: 32,
            val_steps: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSettings {
    /// DPF and BPF particle count.
    pub particles: usize,
    pub bpf10x_particles: usize,
    /// Resampler of the DPF at evaluation time; training always uses optimal transport.
    pub dpf_resampler: ResamplerKind,
    pub dynamics: ConstantVelocity,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            particles: 28,
            bpf10x_particles: 280,
            dpf_resampler: ResamplerKind::Systematic,
            dynamics: ConstantVelocity::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mc_samples: usize,
    /// ELBO terms are estimated at every `elbo_stride`-th step.
    pub elbo_stride: usize,
    /// Regimes whose evaluation includes the ELBO decomposition.
    pub elbo_regimes: Vec<Regime>,
    /// Validation sequences and steps scored after each training epoch.
    pub monitor_sequences: usize,
    pub monitor_steps: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mc_samples: eval::DEFAULT_MC_SAMPLES,
            elbo_stride: 4,
            elbo_regimes: vec![Regime::Partial],
            monitor_sequences: 2,
            monitor_steps: 32,
        }
    }
}

/// Everything one experiment needs. Missing TOML fields take these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds data generation, network initialization and training.
    pub seed: u64,
    pub out: PathBuf,
    pub regimes: Vec<Regime>,
    pub methods: Vec<Method>,
    /// Evaluation seeds; confidence intervals are taken across them.
    pub seeds: Vec<u64>,
    pub noise_grid: Vec<f64>,
    pub partial_grid: Vec<f64>,
    /// `sigma_v` of the partial-observation sweep.
    pub partial_obs_std: f64,
    pub data: DataConfig,
    pub system: LorenzSystem,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub supervised: TrainConfig,
    pub filter: FilterSettings,
    pub prior: PriorConfig,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            regimes: Regime::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            seeds: (0..10).collect(),
            noise_grid: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            partial_grid: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            partial_obs_std: 0.1,
            data: DataConfig::default(),
            system: LorenzSystem::default(),
            model: ModelConfig::default(),
            // 1e-3 diverges once the curriculum reaches T = 4; clipping tames
            // spikes from sequences where the filter loses the blob
            train: TrainConfig {
                optimizer: AdamWConfig {
                    lr: 3e-4,
                    ..AdamWConfig::default()
                },
                max_grad_norm: Some(1e3),
                ..TrainConfig::default()
            },
            supervised: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            filter: FilterSettings::default(),
            prior: PriorConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub methods: Option<Vec<Method>>,
    pub regime: Option<Regime>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`, or the defaults when there is none.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(mut self, o: &Overrides) -> Self {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(m) = &o.methods {
            self.methods = m.clone();
        }
        if let Some(r) = o.regime {
            self.regimes = vec![r];
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.methods.is_empty() {
            return fail("methods list is empty".into());
        }
        if self.regimes.is_empty() {
            return fail("regimes list is empty".into());
        }
        if self.seeds.is_empty() {
            return fail("evaluation seed list is empty".into());
        }
        if self.noise_grid.is_empty() || self.partial_grid.is_empty() {
            return fail("condition grids must be non-empty".into());
        }
        if let Some(s) = self.noise_grid.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return fail(format!("noise grid value {s} must be positive"));
        }
        if let Some(p) = self.partial_grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return fail(format!("partial grid value {p} outside [0, 1]"));
        }
        if !(self.partial_obs_std > 0.0) {
            return fail("partial_obs_std must be positive".into());
        }
        let d = &self.data;
        if d.train_sequences == 0 || d.train_steps == 0 || d.val_sequences == 0 || d.val_steps == 0 {
            return fail("dataset sizes must be positive".into());
        }
        if self.filter.particles == 0 || self.filter.bpf10x_particles == 0 {
            return fail("particle counts must be positive".into());
        }
        if self.eval.elbo_stride == 0 || self.eval.mc_samples == 0 {
            return fail("elbo_stride and mc_samples must be positive".into());
        }
        self.model.validate()?;
        if self.methods.contains(&Method::Dpf) {
            self.train.validate(d.train_sequences, d.train_steps)?;
        }
        if self.methods.contains(&Method::Supervised) {
            self.supervised.validate(d.train_sequences, d.train_steps)?;
        }
        Ok(())
    }

    /// Grid values of a regime.
    pub fn grid(&self, regime: Regime) -> &[f64] {
        match regime {
            Regime::Noise => &self.noise_grid,
            Regime::Partial => &self.partial_grid,
        }
    }

    pub fn noise_settings(&self, regime: Regime, condition: f64) -> NoiseSettings {
        match regime {
            Regime::Noise => NoiseSettings::noise(condition),
            Regime::Partial => NoiseSettings::partial(condition, self.partial_obs_std),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.out)
    }

    fn val_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}

/// Paths of all artifacts under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train_data(&self, r: Regime) -> PathBuf {
        self.root.join("data").join(r.name()).join("train.bin")
    }

    pub fn val_data(&self, r: Regime, condition: f64) -> PathBuf {
        self.root.join("data").join(r.name()).join(format!("val-{condition:.3}.bin"))
    }

    pub fn checkpoint(&self, r: Regime, m: Method) -> PathBuf {
        self.root.join("checkpoints").join(r.name()).join(format!("{m}.bin"))
    }

    pub fn train_report(&self, r: Regime, m: Method) -> PathBuf {
        self.root.join("reports").join(r.name()).join(format!("{m}.csv"))
    }

    pub fn records(&self, r: Regime) -> PathBuf {
        self.root.join("eval").join(r.name()).join("records.csv")
    }

    pub fn summary(&self, r: Regime) -> PathBuf {
        self.root.join("eval").join(r.name()).join("summary.json")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    pub fn log(&self, command: &str) -> PathBuf {
        self.root.join("logs").join(format!("{command}.toml"))
    }
}

/// Process exit code for an error: 2 config, 3 missing artifact, 4 numerical failure, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingArtifacts(_) => 3,
        Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
        Error::NonFinite(_) | Error::WeightCollapse { .. } | Error::Singular(_) | Error::Diverged { .. } => 4,
        _ => 1,
    }
}

/// Sizes the global thread pool from [`THREADS_ENV`] if set. Call before any parallel work.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Logs and records the resolved config of `command`.
fn record_config(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    let text = cfg.to_toml()?;
    log::info!("{command}: resolved config\n{text}");
    log::info!("{command}: seed {} evaluation seeds {:?}", cfg.seed, cfg.seeds);
    let path = cfg.layout().log(command);
    eval::create_parent(&path)?;
    std::fs::write(path, text)?;
    Ok(())
}

fn require(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingArtifacts(missing))
    }
}

/// Writes the training set and the per-condition validation sets of every regime.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    record_config(cfg, "simulate")?;
    let layout = cfg.layout();
    let mut written = Vec::new();
    for &regime in &cfg.regimes {
        let conditions: Vec<NoiseSettings> = cfg.grid(regime).iter().map(|&c| cfg.noise_settings(regime, c)).collect();
        let train = Dataset::generate(&cfg.system, cfg.data.train_sequences, cfg.data.train_steps, &conditions, cfg.seed)?;
        let path = layout.train_data(regime);
        train.save(&path)?;
        written.push(path);
        for (&c, &noise) in cfg.grid(regime).iter().zip(&conditions) {
            let val = Dataset::generate(&cfg.system, cfg.data.val_sequences, cfg.data.val_steps, &[noise], cfg.val_seed())?;
            let path = layout.val_data(regime, c);
            val.save(&path)?;
            written.push(path);
        }
        log::info!("simulate: {regime} regime written to {}", layout.root.display());
    }
    Ok(written)
}

fn load_val_sets(cfg: &ExperimentConfig, regime: Regime) -> Result<Vec<Dataset>> {
    let layout = cfg.layout();
    let paths: Vec<PathBuf> = cfg.grid(regime).iter().map(|&c| layout.val_data(regime, c)).collect();
    require(&paths)?;
    paths.iter().map(Dataset::load).collect()
}

/// First `sequences` validation trajectories of every condition, cut to `steps`.
fn monitor_set(cfg: &ExperimentConfig, val: &[Dataset]) -> Vec<Trajectory> {
    val.iter()
        .flat_map(|d| {
            d.trajectories
                .iter()
                .take(cfg.eval.monitor_sequences)
                .map(|t| t.window(0, cfg.eval.monitor_steps.min(t.len())))
        })
        .collect()
}

fn checkpoint_meta(cfg: &ExperimentConfig, regime: Regime, train: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "regime": regime.name(),
        "seed": cfg.seed,
        "model": cfg.model,
        "train": train,
    })
}

fn start_checkpoint(path: &Path, resume: bool, kind: &str, fresh: ParamStore, cfg: &TrainConfig, meta: serde_json::Value) -> Result<Checkpoint> {
    if resume && path.exists() {
        let ckpt = Checkpoint::load(path)?;
        let mut check = fresh;
        check.load_from(&ckpt.params)?;
        if ckpt.kind != kind {
            return Err(Error::Format(format!("{} holds a {} checkpoint, expected {kind}", path.display(), ckpt.kind)));
        }
        log::info!("resuming {kind} from {} at epoch {}", path.display(), ckpt.epoch);
        return Ok(ckpt);
    }
    Ok(Checkpoint::new(kind, fresh, cfg.optimizer, meta))
}

fn finish_training(
    result: Result<(Checkpoint, training::TrainReport)>,
    layout: &Layout,
    regime: Regime,
    method: Method,
    resume: bool,
) -> Result<()> {
    let path = layout.checkpoint(regime, method);
    let report_path = layout.train_report(regime, method);
    match result {
        Ok((ckpt, mut report)) => {
            eval::create_parent(&path)?;
            ckpt.save(&path)?;
            if resume && report_path.exists() {
                // keep the epochs recorded before the resumed one
                let first = report.epochs.first().map_or(ckpt.epoch, |e| e.epoch);
                let mut earlier = training::TrainReport::read_csv(&report_path)?.epochs;
                earlier.retain(|e| e.epoch < first);
                earlier.append(&mut report.epochs);
                report.epochs = earlier;
            }
            report.write_csv(&report_path)?;
            log::info!("train: {method} ({regime}) saved to {}", path.display());
            Ok(())
        }
        Err(Error::Diverged {
            epoch,
            batch,
            reason,
            last_good,
        }) => {
            let salvage = path.with_extension("diverged.bin");
            eval::create_parent(&salvage)?;
            last_good.save(&salvage)?;
            log::error!("train: {method} ({regime}) diverged; last good checkpoint at {}", salvage.display());
            Err(Error::Diverged {
                epoch,
                batch,
                reason,
                last_good,
            })
        }
        Err(e) => Err(e),
    }
}

/// Mean tracking error of the DPF over the monitor set.
fn dpf_monitor(model: &DeepVsmc, params: &ParamStore, set: &[Trajectory], prior: &Kde, cfg: &ExperimentConfig) -> Result<f64> {
    let errs = set
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = eval_rng(cfg.seed, u64::MAX, i);
            let fc = FilterConfig::new(cfg.filter.particles, cfg.filter.dpf_resampler, t.noise.obs_std);
            let init = prior.sample(cfg.filter.particles, &mut rng);
            let trace = run_filter(model, params, &t.frames, init, &fc, &mut rng)?;
            mean(&eval::tracking_error(&trace.posterior_means(), &t.states)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    mean(&errs)
}

fn supervised_monitor(net: &SupervisedEncoder, params: &ParamStore, set: &[Trajectory]) -> Result<f64> {
    let errs = set
        .iter()
        .map(|t| {
            let pred: Vec<Vec<f64>> = net.predict(params, &t.frames)?.iter().map(|p| p.to_vec()).collect();
            mean(&eval::tracking_error(&pred, &t.states)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    mean(&errs)
}

fn mean(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid("mean of an empty set"));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Trains the DPF and the supervised encoder of every regime on its mixed-condition set.
///
/// With `resume`, training continues from existing checkpoints.
pub fn train(cfg: &ExperimentConfig, resume: bool) -> Result<()> {
    cfg.validate()?;
    record_config(cfg, "train")?;
    let layout = cfg.layout();
    let paths: Vec<PathBuf> = cfg.regimes.iter().map(|&r| layout.train_data(r)).collect();
    require(&paths)?;
    for &regime in &cfg.regimes {
        let data = Dataset::load(layout.train_data(regime))?;
        let val = load_val_sets(cfg, regime)?;
        let monitor = monitor_set(cfg, &val);
        if cfg.methods.contains(&Method::Dpf) {
            let train_cfg = TrainConfig {
                seed: cfg.seed,
                ..cfg.train.clone()
            };
            let prior = Arc::new(build_prior(&cfg.system, &cfg.prior)?);
            let (model, store) = DeepVsmc::new(cfg.model, cfg.seed)?;
            let model = model.with_prior(prior.clone());
            let start = start_checkpoint(
                &layout.checkpoint(regime, Method::Dpf),
                resume,
                "dpf",
                store,
                &train_cfg,
                checkpoint_meta(cfg, regime, &train_cfg),
            )?;
            let n = train_cfg.particles;
            log::info!("train: dpf ({regime}) for {} epochs", train_cfg.epochs);
            let result = training::train(
                &model,
                start,
                &training::image_sequences(&data),
                |r| prior.sample(n, r),
                &train_cfg,
                |p| dpf_monitor(&model, p, &monitor, &prior, cfg),
            );
            finish_training(result, &layout, regime, Method::Dpf, resume)?;
        }
        if cfg.methods.contains(&Method::Supervised) {
            let train_cfg = TrainConfig {
                seed: cfg.seed,
                ..cfg.supervised.clone()
            };
            let (net, store) = SupervisedEncoder::new(cfg.model, cfg.seed)?;
            let start = start_checkpoint(
                &layout.checkpoint(regime, Method::Supervised),
                resume,
                "supervised",
                store,
                &train_cfg,
                checkpoint_meta(cfg, regime, &train_cfg),
            )?;
            log::info!("train: supervised ({regime}) for {} epochs", train_cfg.epochs);
            let result = training::train_supervised(&net, start, &data, &train_cfg, |p| supervised_monitor(&net, p, &monitor));
            finish_training(result, &layout, regime, Method::Supervised, resume)?;
        }
    }
    Ok(())
}

/// Random stream of sequence `index` under evaluation seed `seed`.
fn eval_rng(master: u64, seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed);
    rng.set_stream(index as u64);
    rng
}

const ELBO_SALT: u64 = 0xe1b0_0000_0000_0001;

/// Trained networks and shared inputs of one regime's evaluation.
struct EvalContext<'a> {
    cfg: &'a ExperimentConfig,
    regime: Regime,
    val: Vec<Dataset>,
    dpf: Option<(DeepVsmc, ParamStore)>,
    supervised: Option<(SupervisedEncoder, ParamStore)>,
    prior: Arc<Kde>,
    elbo: bool,
}

/// Posterior summaries of one sequence.
enum Posterior {
    Particles(FilterTrace),
    Gaussians(Vec<FittedGaussian>),
}

impl Posterior {
    fn means(&self) -> Vec<Vec<f64>> {
        match self {
            Posterior::Particles(t) => t.posterior_means(),
            Posterior::Gaussians(g) => g.iter().map(|q| q.mean.iter().copied().collect()).collect(),
        }
    }
}

impl EvalContext<'_> {
    fn run(&self, method: Method, traj: &Trajectory, rng: &mut ChaCha8Rng) -> Result<Posterior> {
        let cfg = self.cfg;
        let obs_std = traj.noise.obs_std;
        let bpf = |n: usize, rng: &mut ChaCha8Rng| -> Result<Posterior> {
            let model = CvImageModel {
                dynamics: cfg.filter.dynamics,
                obs_std,
            };
            let init = baseline_init(&traj.initial, n, rng);
            Ok(Posterior::Particles(bootstrap_filter(&model, &traj.frames, init, n as f64 / 2.0, rng)?))
        };
        match method {
            Method::Dpf => {
                let (model, params) = self.dpf.as_ref().expect("dpf checkpoint loaded");
                let fc = FilterConfig::new(cfg.filter.particles, cfg.filter.dpf_resampler, obs_std);
                let init = self.prior.sample(cfg.filter.particles, rng);
                Ok(Posterior::Particles(run_filter(model, params, &traj.frames, init, &fc, rng)?))
            }
            Method::Bpf => bpf(cfg.filter.particles, rng),
            Method::Bpf10x => bpf(cfg.filter.bpf10x_particles, rng),
            Method::Ekf => {
                let (beliefs, _) = run_ekf(
                    baseline_belief(&traj.initial),
                    &cfg.filter.dynamics.into(),
                    &ImageMeasurement { obs_std },
                    &traj.frames,
                )?;
                let qs = beliefs
                    .iter()
                    .map(|b| FittedGaussian::new(b.mean.rows(0, STATE_DIM).into_owned(), b.cov.view((0, 0), (STATE_DIM, STATE_DIM)).into_owned()))
                    .collect::<Result<_>>()?;
                Ok(Posterior::Gaussians(qs))
            }
            Method::Supervised => {
                let (net, params) = self.supervised.as_ref().expect("supervised checkpoint loaded");
                // point estimates wrapped in a unit-variance Gaussian
                let qs = net
                    .predict(params, &traj.frames)?
                    .iter()
                    .map(|p| FittedGaussian::new(nalgebra::DVector::from_column_slice(p), nalgebra::DMatrix::identity(STATE_DIM, STATE_DIM)))
                    .collect::<Result<_>>()?;
                Ok(Posterior::Gaussians(qs))
            }
        }
    }

    /// Mean ELBO terms over the strided steps of one sequence.
    fn elbo(&self, post: &Posterior, traj: &Trajectory, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let cfg = self.cfg;
        let (mut ll, mut kl, mut n) = (0.0, 0.0, 0.0);
        for t in (cfg.eval.elbo_stride - 1..traj.len()).step_by(cfg.eval.elbo_stride) {
            let frame = &traj.frames[t];
            let terms = match post {
                Posterior::Particles(trace) => {
                    let s = &trace.steps[t];
                    let dim = s.particles.shape()[1];
                    eval::elbo_from_particles(s.particles.data(), dim, &s.weights, frame, traj.noise.obs_std, self.prior.as_ref(), cfg.eval.mc_samples, rng)?
                }
                Posterior::Gaussians(qs) => eval::elbo_terms(&qs[t], frame, traj.noise.obs_std, self.prior.as_ref(), cfg.eval.mc_samples, rng)?,
            };
            ll += terms.log_lik;
            kl += terms.kl;
            n += 1.0;
        }
        Ok((ll / n, kl / n))
    }

    fn job(&self, method: Method, cond: usize, seed: u64) -> Result<EvalRecord> {
        let val = &self.val[cond];
        let mut errs = Vec::with_capacity(val.len());
        let (mut ll, mut kl) = (Vec::new(), Vec::new());
        for (i, traj) in val.trajectories.iter().enumerate() {
            let mut rng = eval_rng(self.cfg.seed, seed, i);
            let post = self.run(method, traj, &mut rng)?;
            errs.push(mean(&eval::tracking_error(&post.means(), &traj.states)?)?);
            if self.elbo {
                let mut erng = eval_rng(self.cfg.seed ^ ELBO_SALT, seed, i);
                let (l, k) = self.elbo(&post, traj, &mut erng)?;
                ll.push(l);
                kl.push(k);
            }
        }
        let (log_lik, kl) = if self.elbo {
            (Some(mean(&ll)?), Some(mean(&kl)?))
        } else {
            (None, None)
        };
        Ok(EvalRecord {
            method: method.name().into(),
            regime: self.regime.name().into(),
            condition: self.cfg.grid(self.regime)[cond],
            seed,
            tracking_error: mean(&errs)?,
            log_lik,
            kl,
            elbo: log_lik.zip(kl).map(|(l, k)| l - k),
        })
    }
}

fn load_trained<T>(
    cfg: &ExperimentConfig,
    regime: Regime,
    method: Method,
    build: impl Fn() -> Result<(T, ParamStore)>,
) -> Result<Option<(T, ParamStore)>> {
    if !cfg.methods.contains(&method) {
        return Ok(None);
    }
    let (net, mut store) = build()?;
    let ckpt = Checkpoint::load(cfg.layout().checkpoint(regime, method))?;
    store.load_from(&ckpt.params)?;
    Ok(Some((net, store)))
}

/// Evaluates every method on every grid point and seed; writes records and summaries.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    record_config(cfg, "evaluate")?;
    let layout = cfg.layout();
    let mut needed = Vec::new();
    for &r in &cfg.regimes {
        needed.extend(cfg.grid(r).iter().map(|&c| layout.val_data(r, c)));
        needed.extend(cfg.methods.iter().filter(|m| m.is_trained()).map(|&m| layout.checkpoint(r, m)));
    }
    require(&needed)?;
    let prior = Arc::new(build_prior(&cfg.system, &cfg.prior)?);
    let mut reports = Vec::new();
    for &regime in &cfg.regimes {
        let ctx = EvalContext {
            cfg,
            regime,
            val: load_val_sets(cfg, regime)?,
            dpf: load_trained(cfg, regime, Method::Dpf, || {
                DeepVsmc::new(cfg.model, cfg.seed).map(|(m, s)| (m.with_prior(prior.clone()), s))
            })?,
            supervised: load_trained(cfg, regime, Method::Supervised, || SupervisedEncoder::new(cfg.model, cfg.seed))?,
            prior: prior.clone(),
            elbo: cfg.eval.elbo_regimes.contains(&regime),
        };
        let jobs: Vec<(Method, usize, u64)> = cfg
            .methods
            .iter()
            .flat_map(|&m| (0..cfg.grid(regime).len()).flat_map(move |c| cfg.seeds.iter().map(move |&s| (m, c, s))))
            .collect();
        log::info!("evaluate: {regime} regime, {} runs", jobs.len());
        let records = jobs
            .par_iter()
            .map(|&(m, c, s)| {
                let r = ctx.job(m, c, s);
                if let Ok(rec) = &r {
                    log::debug!("evaluate: {m} {regime} {} seed {s}: error {:.4}", rec.condition, rec.tracking_error);
                }
                r
            })
            .collect::<Result<Vec<_>>>()?;
        let report = EvalReport { records };
        report.write_csv(layout.records(regime))?;
        if cfg.seeds.len() >= 2 {
            report.write_json(layout.summary(regime))?;
        }
        for m in &cfg.methods {
            let line: Vec<String> = cfg
                .grid(regime)
                .iter()
                .map(|&c| {
                    let v = report.values(m.name(), regime.name(), c, "tracking_error");
                    format!("{c}: {:.3}", v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect();
            log::info!("evaluate: {m} {regime} tracking error {}", line.join(", "));
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Renders the figures from existing evaluation records.
pub fn plot(cfg: &ExperimentConfig) -> Result<PlotFiles> {
    record_config(cfg, "plot")?;
    let layout = cfg.layout();
    let paths: Vec<PathBuf> = cfg.regimes.iter().map(|&r| layout.records(r)).collect();
    require(&paths)?;
    let mut reports = Vec::new();
    for &r in &cfg.regimes {
        reports.push((r, EvalReport::read_csv(layout.records(r))?));
    }
    write_plots(&reports, &cfg.methods, &layout.plots())
}
