//! Neural parameterizations: the convolutional observation encoder, the mixture
//! heads for proposal and transition, and the supervised regression baseline.
//!
//! The encoder sees two channels, the masked image and the binary mask, so an
//! unobserved pixel is distinguishable from a dark one. Three 3x3 conv layers
//! (8, 16, 32 channels, each followed by ReLU and 2x2 max-pooling) reduce the
//! 28x28 input to 32x3x3, and a linear layer maps that to a 256-wide encoding.
//!
//! Heads are six-layer ReLU MLPs (input layer, four hidden layers, output layer).
//! States enter in normalized units `(z - STATE_MEAN) / STATE_SCALE`; mixture
//! means come out as offsets from the previous particle in state units. Output
//! layers start at zero, so an untrained head is a unit-variance random walk
//! with equal mixture weights.
//!
//! Parameter names are stable and form the checkpoint schema:
//!
//! | prefix                              | shape                       |
//! |-------------------------------------|-----------------------------|
//! | `{net}.encoder.conv{1,2,3}.weight`  | `[c_out, c_in, 3, 3]`       |
//! | `{net}.encoder.conv{1,2,3}.bias`    | `[c_out]`                   |
//! | `{net}.encoder.fc.weight` / `.bias` | `[288, 256]` / `[256]`      |
//! | `{head}.in_state.weight`            | `[3, width]`                |
//! | `{head}.in_context.weight`          | `[256, width]` (proposal)   |
//! | `{head}.in.bias`                    | `[width]`                   |
//! | `{head}.hidden{1..4}.weight/.bias`  | `[width, width]` / `[width]`|
//! | `{head}.out.weight` / `.bias`       | `[width, out]` / `[out]`    |
//!
//! with `net` one of `dpf`, `supervised` and `head` one of `dpf.proposal`,
//! `dpf.transition`, `supervised.head`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, ParamVars, Tape, Tensor, Var};
use crate::distributions::{GmmVar, Kde};
use crate::error::{Error, Result};
use crate::smc::{FilterConfig, FilterModel};
use crate::ssm::{self, ObservationFrame, IMAGE_SIZE, NUM_PIXELS, STATE_DIM};

pub const STATE_MEAN: [f64; STATE_DIM] = [0.0, 0.0, 25.0];
pub const STATE_SCALE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub components: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub encoding: usize,
    pub base_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            components: 2,
            width: 256,
            hidden_layers: 4,
            encoding: 256,
            base_channels: 8,
        }
    }
}

impl ModelConfig {
    /// Mixture head output size `K(2d + 1)`.
    pub fn head_outputs(&self) -> usize {
        self.components * (2 * STATE_DIM + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 || self.width == 0 || self.encoding == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

fn kaiming(store: &mut ParamStore, rng: &mut impl Rng, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    store.add(name, Tensor::new(shape, data).expect("shape matches"))
}

fn zeros(store: &mut ParamStore, name: String, shape: Vec<usize>) -> ParamId {
    store.add(name, Tensor::zeros(shape))
}

/// Stacks frames into the two-channel encoder input `[T, 2, 28, 28]`.
pub fn encoder_input(frames: &[ObservationFrame]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(frames.len() * 2 * NUM_PIXELS);
    for f in frames {
        if f.pixels.len() != NUM_PIXELS || f.mask.len() != NUM_PIXELS {
            return Err(Error::invalid(format!(
                "frame has {} pixels and {} mask entries, expected {NUM_PIXELS}",
                f.pixels.len(),
                f.mask.len()
            )));
        }
        data.extend(f.pixels.iter().zip(&f.mask).map(|(p, &m)| if m { *p } else { 0.0 }));
        data.extend(f.mask_as_f64());
    }
    Tensor::new([frames.len(), 2, IMAGE_SIZE, IMAGE_SIZE], data)
}

/// Convolutional observation encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    convs: Vec<(ParamId, ParamId)>,
    fc: (ParamId, ParamId),
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut c_in = 2;
        let mut convs = Vec::new();
        for i in 0..3 {
            let c_out = config.base_channels << i;
            let w = kaiming(store, rng, format!("{prefix}.conv{}.weight", i + 1), vec![c_out, c_in, 3, 3], c_in * 9);
            let b = zeros(store, format!("{prefix}.conv{}.bias", i + 1), vec![c_out]);
            convs.push((w, b));
            c_in = c_out;
        }
        let flat = c_in * 3 * 3;
        let w = kaiming(store, rng, format!("{prefix}.fc.weight"), vec![flat, config.encoding], flat);
        let b = zeros(store, format!("{prefix}.fc.bias"), vec![config.encoding]);
        Self { convs, fc: (w, b) }
    }

    /// `[T, 2, 28, 28]` to `[T, encoding]`.
    pub fn forward<'t>(&self, p: &ParamVars<'t>, input: Var<'t>) -> Result<Var<'t>> {
        let t = input.shape()[0];
        let mut h = input;
        for &(w, b) in &self.convs {
            h = h.conv2d(p[w], Some(p[b]))?.relu().maxpool2x2()?;
        }
        let flat = h.numel() / t;
        h.reshape([t, flat])?.matmul(p[self.fc.0])?.add(p[self.fc.1])
    }

    pub fn encode<'t>(&self, p: &ParamVars<'t>, tape: &'t Tape, frames: &[ObservationFrame]) -> Result<Var<'t>> {
        self.forward(p, tape.constant(encoder_input(frames)?))
    }
}

/// Six-layer ReLU MLP whose first layer sums one projection per input block.
#[derive(Debug, Clone)]
pub struct Mlp {
    inputs: Vec<ParamId>,
    in_bias: ParamId,
    hidden: Vec<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
}

impl Mlp {
    /// `blocks` are `(name, width)` pairs for the first-layer inputs.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        blocks: &[(&str, usize)],
        outputs: usize,
        config: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let w = config.width;
        let fan_in: usize = blocks.iter().map(|b| b.1).sum();
        let inputs = blocks
            .iter()
            .map(|(name, n)| kaiming(store, rng, format!("{prefix}.{name}.weight"), vec![*n, w], fan_in))
            .collect();
        let in_bias = zeros(store, format!("{prefix}.in.bias"), vec![w]);
        let hidden = (1..=config.hidden_layers)
            .map(|i| {
                (
                    kaiming(store, rng, format!("{prefix}.hidden{i}.weight"), vec![w, w], w),
                    zeros(store, format!("{prefix}.hidden{i}.bias"), vec![w]),
                )
            })
            .collect();
        let out = (
            zeros(store, format!("{prefix}.out.weight"), vec![w, outputs]),
            zeros(store, format!("{prefix}.out.bias"), vec![outputs]),
        );
        Self {
            inputs,
            in_bias,
            hidden,
            out,
        }
    }

    /// Projection of input block `i` through its first-layer weight.
    pub fn project<'t>(&self, p: &ParamVars<'t>, i: usize, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(p[self.inputs[i]])
    }

    /// Runs the network from the summed first-layer projections.
    pub fn forward_from<'t>(&self, p: &ParamVars<'t>, pre: Var<'t>) -> Result<Var<'t>> {
        let mut h = pre.add(p[self.in_bias])?.relu();
        for &(w, b) in &self.hidden {
            h = h.matmul(p[w])?.add(p[b])?.relu();
        }
        h.matmul(p[self.out.0])?.add(p[self.out.1])
    }
}

/// `(z - STATE_MEAN) / STATE_SCALE` on a `[N, 3]` tape value.
pub fn normalize_states<'t>(z: Var<'t>) -> Result<Var<'t>> {
    let mean = z.tape().constant(Tensor::new([1, STATE_DIM], STATE_MEAN.to_vec())?);
    Ok(z.sub(mean)?.scale(1.0 / STATE_SCALE))
}

/// The learned proposal and transition of the deep variational filter.
#[derive(Debug, Clone)]
pub struct DeepVsmc {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub proposal: Mlp,
    pub transition: Mlp,
    /// Attractor prior used as the density of the first filtered state; without
    /// it the first step is weighted by the learned transition.
    pub prior: Option<Arc<Kde>>,
}

impl DeepVsmc {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "dpf.encoder", &config, &mut rng);
        let out = config.head_outputs();
        let proposal = Mlp::new(
            &mut store,
            "dpf.proposal",
            &[("in_state", STATE_DIM), ("in_context", config.encoding)],
            out,
            &config,
            &mut rng,
        );
        let transition = Mlp::new(&mut store, "dpf.transition", &[("in_state", STATE_DIM)], out, &config, &mut rng);
        Ok((
            Self {
                config,
                encoder,
                proposal,
                transition,
                prior: None,
            },
            store,
        ))
    }

    pub fn with_prior(mut self, prior: Arc<Kde>) -> Self {
        self.prior = Some(prior);
        self
    }

    /// Raw proposal head output `[N, K(2d+1)]` for previous particles and an encoding `[1, 256]`.
    pub fn proposal_raw<'t>(&self, p: &ParamVars<'t>, prev: Var<'t>, encoding: Var<'t>) -> Result<Var<'t>> {
        let ctx = self.proposal.project(p, 1, encoding)?;
        self.proposal_raw_projected(p, prev, ctx)
    }

    fn proposal_raw_projected<'t>(&self, p: &ParamVars<'t>, prev: Var<'t>, ctx: Var<'t>) -> Result<Var<'t>> {
        let pre = self.proposal.project(p, 0, normalize_states(prev)?)?.add(ctx)?;
        self.proposal.forward_from(p, pre)
    }

    pub fn transition_raw<'t>(&self, p: &ParamVars<'t>, prev: Var<'t>) -> Result<Var<'t>> {
        let pre = self.transition.project(p, 0, normalize_states(prev)?)?;
        self.transition.forward_from(p, pre)
    }
}

impl FilterModel for DeepVsmc {
    type Obs = ObservationFrame;

    fn dim(&self) -> usize {
        STATE_DIM
    }

    /// Encodes every frame in one batch and projects it through the proposal's
    /// context weights.
    fn context<'t>(&self, p: &ParamVars<'t>, tape: &'t Tape, obs: &[ObservationFrame]) -> Result<Vec<Option<Var<'t>>>> {
        let enc = self.encoder.encode(p, tape, obs)?;
        let proj = self.proposal.project(p, 1, enc)?;
        (0..obs.len()).map(|t| Ok(Some(proj.narrow(0, t, t + 1)?))).collect()
    }

    fn proposal<'t>(&self, p: &ParamVars<'t>, prev: Var<'t>, ctx: Option<Var<'t>>, obs: &ObservationFrame) -> Result<GmmVar<'t>> {
        let ctx = match ctx {
            Some(c) => c,
            None => self.context(p, prev.tape(), std::slice::from_ref(obs))?[0].expect("context is always present"),
        };
        let raw = self.proposal_raw_projected(p, prev, ctx)?;
        GmmVar::from_raw(raw, self.config.components, STATE_DIM, Some(prev))
    }

    fn transition<'t>(&self, p: &ParamVars<'t>, prev: Var<'t>) -> Result<GmmVar<'t>> {
        let raw = self.transition_raw(p, prev)?;
        GmmVar::from_raw(raw, self.config.components, STATE_DIM, Some(prev))
    }

    fn log_likelihood<'t>(&self, particles: Var<'t>, obs: &ObservationFrame, config: &FilterConfig) -> Result<Var<'t>> {
        ssm::log_likelihood_batch(particles, obs, config.obs_std)
    }

    fn initial_log_density<'t>(&self, particles: Var<'t>) -> Result<Option<Var<'t>>> {
        self.prior.as_ref().map(|k| k.log_pdf_var(particles)).transpose()
    }
}

/// Encoder plus MLP regressing the state from a single frame.
#[derive(Debug, Clone)]
pub struct SupervisedEncoder {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: Mlp,
}

impl SupervisedEncoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, "supervised.encoder", &config, &mut rng);
        let head = Mlp::new(
            &mut store,
            "supervised.head",
            &[("in_context", config.encoding)],
            STATE_DIM,
            &config,
            &mut rng,
        );
        Ok((Self { config, encoder, head }, store))
    }

    /// State estimates `[T, 3]` for a batch of frames.
    pub fn forward<'t>(&self, p: &ParamVars<'t>, tape: &'t Tape, frames: &[ObservationFrame]) -> Result<Var<'t>> {
        let enc = self.encoder.encode(p, tape, frames)?;
        let out = self.head.forward_from(p, self.head.project(p, 0, enc)?)?;
        let mean = tape.constant(Tensor::new([1, STATE_DIM], STATE_MEAN.to_vec())?);
        out.scale(STATE_SCALE).add(mean)
    }

    pub fn predict(&self, params: &ParamStore, frames: &[ObservationFrame]) -> Result<Vec<[f64; STATE_DIM]>> {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let out = self.forward(&p, &tape, frames)?.value();
        Ok(out
            .data()
            .chunks_exact(STATE_DIM)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }
}
