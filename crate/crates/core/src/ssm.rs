//! Lorenz-attractor state-space model with image observations.
//!
//! The latent state is a Lorenz-63 point `(x, y, z)` integrated with RK4 at a fixed
//! step, plus additive Gaussian process noise once per observation step. Each
//! state is rendered as a 28x28 image holding an isotropic Gaussian blob (unit
//! peak, 1.5 px spread) centred on the affine image of `(x, y)`: the box
//! `[-25, 25]^2` maps onto pixel centres `0..=27`, column from `x`, row from `y`.
//! `z` never reaches the image directly. Observations add white Gaussian pixel
//! noise and then drop aligned 4x4 blocks independently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::container::Container;
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 3;
pub const IMAGE_SIZE: usize = 28;
pub const NUM_PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
pub const BLOCK_SIZE: usize = 4;
pub const PSF_SIGMA: f64 = 1.5;
/// Half-width of the state box that spans the pixel grid.
pub const BOX_HALF_WIDTH: f64 = 25.0;
/// Blob centres are clamped to this pixel range.
pub const CENTER_CLAMP: (f64, f64) = (-2.0, IMAGE_SIZE as f64 + 1.0);
pub const PROCESS_NOISE_STD: f64 = 0.5;
pub const DEFAULT_DT: f64 = 0.02;

pub type StateVector = [f64; STATE_DIM];

/// Pixel units per state unit.
const PIXEL_SCALE: f64 = (IMAGE_SIZE - 1) as f64 / (2.0 * BOX_HALF_WIDTH);
const PIXEL_OFFSET: f64 = (IMAGE_SIZE - 1) as f64 / 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LorenzSystem {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub dt: f64,
    pub process_std: f64,
}

impl Default for LorenzSystem {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: DEFAULT_DT,
            process_std: PROCESS_NOISE_STD,
        }
    }
}

impl LorenzSystem {
    fn derivative(&self, s: &StateVector) -> StateVector {
        [
            self.sigma * (s[1] - s[0]),
            s[0] * (self.rho - s[2]) - s[1],
            s[0] * s[1] - self.beta * s[2],
        ]
    }

    /// One noise-free RK4 step of length `dt`.
    pub fn integrate(&self, s: &StateVector, dt: f64) -> StateVector {
        let add = |a: &StateVector, b: &StateVector, h: f64| -> StateVector {
            [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]]
        };
        let k1 = self.derivative(s);
        let k2 = self.derivative(&add(s, &k1, dt / 2.0));
        let k3 = self.derivative(&add(s, &k2, dt / 2.0));
        let k4 = self.derivative(&add(s, &k3, dt));
        std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }

    /// Integrates one observation interval and adds process noise.
    pub fn step(&self, s: &StateVector, dt: f64, rng: &mut impl Rng) -> Result<StateVector> {
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("lorenz step needs dt > 0, got {dt}")));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("lorenz state {s:?}")));
        }
        let mut next = self.integrate(s, dt);
        for v in &mut next {
            *v += self.process_std * rng.sample::<f64, _>(StandardNormal);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("lorenz state after step from {s:?}")));
        }
        Ok(next)
    }

    /// On-attractor state: noise-free run from `(1, 1, 1)` for 100..=1100 steps.
    pub fn sample_initial(&self, rng: &mut impl Rng) -> StateVector {
        let burn_in = rng.gen_range(100..=1100);
        let mut s = [1.0, 1.0, 1.0];
        for _ in 0..burn_in {
            s = self.integrate(&s, self.dt);
        }
        s
    }

    /// `len` noise-free states after `burn_in` steps from `(1, 1, 1)`.
    pub fn long_run(&self, burn_in: usize, len: usize) -> Vec<StateVector> {
        let mut s = [1.0, 1.0, 1.0];
        for _ in 0..burn_in {
            s = self.integrate(&s, self.dt);
        }
        (0..len)
            .map(|_| {
                s = self.integrate(&s, self.dt);
                s
            })
            .collect()
    }
}

/// Pixel coordinate of a state coordinate, clamped to the border region.
pub fn project(coord: f64) -> f64 {
    (coord * PIXEL_SCALE + PIXEL_OFFSET).clamp(CENTER_CLAMP.0, CENTER_CLAMP.1)
}

fn psf_profile(center: f64) -> [f64; IMAGE_SIZE] {
    let c = -1.0 / (2.0 * PSF_SIGMA * PSF_SIGMA);
    std::array::from_fn(|j| {
        let d = j as f64 - center;
        ((d * d) * c).exp()
    })
}

/// Renders the Gaussian blob for `state` as a row-major 28x28 image.
pub fn render(state: &StateVector) -> Vec<f64> {
    let gx = psf_profile(project(state[0]));
    let gy = psf_profile(project(state[1]));
    let mut img = Vec::with_capacity(NUM_PIXELS);
    for row in &gy {
        img.extend(gx.iter().map(|col| row * col));
    }
    img
}

/// Differentiable batch render: `[N, d >= 2]` states to `[N, 784]` images.
pub fn render_batch<'t>(states: Var<'t>) -> Result<Var<'t>> {
    let shape = states.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::invalid(format!("render_batch needs [N, d>=2], got {shape:?}")));
    }
    let n = shape[0];
    let tape = states.tape();
    let grid = tape.constant(Tensor::new(
        [1, IMAGE_SIZE],
        (0..IMAGE_SIZE).map(|j| j as f64).collect(),
    )?);
    let profile = |col: usize| -> Result<Var<'t>> {
        let center = states
            .narrow(1, col, col + 1)?
            .scale(PIXEL_SCALE)
            .add_scalar(PIXEL_OFFSET)
            .clamp(CENTER_CLAMP.0, CENTER_CLAMP.1);
        Ok(grid
            .sub(center)?
            .square()
            .scale(-1.0 / (2.0 * PSF_SIGMA * PSF_SIGMA))
            .exp())
    };
    let gx = profile(0)?.reshape([n, 1, IMAGE_SIZE])?;
    let gy = profile(1)?.reshape([n, IMAGE_SIZE, 1])?;
    gy.mul(gx)?.reshape([n, NUM_PIXELS])
}

/// `render(state)` and its derivatives with respect to `x` and `y`, per pixel.
///
/// The 1-D PSF profiles are differentiated on a tape (one backward pass over a
/// replicated input); the image derivative follows from the separable product.
pub fn render_jacobian(state: &StateVector) -> Result<(Vec<f64>, Vec<[f64; 2]>)> {
    let tape = Tape::new();
    let grid: Vec<f64> = (0..IMAGE_SIZE).map(|j| j as f64).collect();
    let grid = tape.constant(Tensor::new([1, IMAGE_SIZE], grid)?);
    let mut eye = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for j in 0..IMAGE_SIZE {
        eye[j * IMAGE_SIZE + j] = 1.0;
    }
    let eye = tape.constant(Tensor::new([IMAGE_SIZE, IMAGE_SIZE], eye)?);
    let mut profiles = Vec::with_capacity(2);
    let mut derivs = Vec::with_capacity(2);
    for &coord in &state[..2] {
        let rep = tape.var(Tensor::full([IMAGE_SIZE, 1], coord));
        let g = grid
            .sub(
                rep.scale(PIXEL_SCALE)
                    .add_scalar(PIXEL_OFFSET)
                    .clamp(CENTER_CLAMP.0, CENTER_CLAMP.1),
            )?
            .square()
            .scale(-1.0 / (2.0 * PSF_SIGMA * PSF_SIGMA))
            .exp();
        // row j only matters through its diagonal entry g[j, j]
        let root = g.mul(eye)?.sum();
        let grads = tape.backward(root)?;
        let diag = g.mul(eye)?.sum_axis(1, false)?;
        profiles.push(diag.value().data().to_vec());
        derivs.push(grads.wrt(rep).into_data());
    }
    let (gx, gy) = (&profiles[0], &profiles[1]);
    let (dgx, dgy) = (&derivs[0], &derivs[1]);
    let mut img = Vec::with_capacity(NUM_PIXELS);
    let mut jac = Vec::with_capacity(NUM_PIXELS);
    for i in 0..IMAGE_SIZE {
        for j in 0..IMAGE_SIZE {
            img.push(gy[i] * gx[j]);
            jac.push([gy[i] * dgx[j], dgy[i] * gx[j]]);
        }
    }
    Ok((img, jac))
}

/// One (possibly masked) image observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFrame {
    /// Row-major pixels; unobserved pixels hold zero.
    pub pixels: Vec<f64>,
    /// `true` where the pixel was observed.
    pub mask: Vec<bool>,
}

impl ObservationFrame {
    pub fn fully_observed(pixels: Vec<f64>) -> Self {
        let mask = vec![true; pixels.len()];
        Self { pixels, mask }
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn mask_as_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }
}

/// Adds pixel noise with std `obs_std`, then keeps each 4x4 block with probability
/// `observe_prob`. Consumes 784 normal draws followed by 49 uniform draws.
pub fn observe(clean: &[f64], obs_std: f64, observe_prob: f64, rng: &mut impl Rng) -> Result<ObservationFrame> {
    if clean.len() != NUM_PIXELS {
        return Err(Error::invalid(format!("image has {} pixels, expected {NUM_PIXELS}", clean.len())));
    }
    if !(0.0..=1.0).contains(&observe_prob) || obs_std < 0.0 {
        return Err(Error::invalid(format!(
            "observe needs 0 <= P <= 1 and sigma >= 0, got P={observe_prob}, sigma={obs_std}"
        )));
    }
    let mut pixels: Vec<f64> = clean
        .iter()
        .map(|&v| v + obs_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut mask = vec![true; NUM_PIXELS];
    let blocks = IMAGE_SIZE / BLOCK_SIZE;
    for by in 0..blocks {
        for bx in 0..blocks {
            if rng.gen::<f64>() < observe_prob {
                continue;
            }
            for y in by * BLOCK_SIZE..(by + 1) * BLOCK_SIZE {
                for x in bx * BLOCK_SIZE..(bx + 1) * BLOCK_SIZE {
                    mask[y * IMAGE_SIZE + x] = false;
                    pixels[y * IMAGE_SIZE + x] = 0.0;
                }
            }
        }
    }
    Ok(ObservationFrame { pixels, mask })
}

fn log_norm_const(obs_std: f64) -> f64 {
    -(obs_std * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

/// Gaussian log-density of the observed pixels given the rendered `position`.
///
/// Only the first two components of `position` are used.
pub fn log_likelihood(position: &[f64], frame: &ObservationFrame, obs_std: f64) -> f64 {
    let gx = psf_profile(project(position[0]));
    let gy = psf_profile(project(position[1]));
    let inv = 1.0 / (obs_std * obs_std);
    let mut sq = 0.0;
    let mut count = 0usize;
    for i in 0..IMAGE_SIZE {
        for j in 0..IMAGE_SIZE {
            let p = i * IMAGE_SIZE + j;
            if frame.mask[p] {
                let r = frame.pixels[p] - gy[i] * gx[j];
                sq += r * r;
                count += 1;
            }
        }
    }
    count as f64 * log_norm_const(obs_std) - 0.5 * sq * inv
}

/// Differentiable log-likelihood for a batch of particles `[N, d >= 2]`, shape `[N]`.
pub fn log_likelihood_batch<'t>(particles: Var<'t>, frame: &ObservationFrame, obs_std: f64) -> Result<Var<'t>> {
    let tape = particles.tape();
    let img = render_batch(particles)?;
    let y = tape.constant(Tensor::new([1, NUM_PIXELS], frame.pixels.clone())?);
    let m = tape.constant(Tensor::new([1, NUM_PIXELS], frame.mask_as_f64())?);
    let sq = y.sub(img)?.mul(m)?.square().sum_axis(1, false)?;
    let constant = frame.observed_count() as f64 * log_norm_const(obs_std);
    Ok(sq.scale(-0.5 / (obs_std * obs_std)).add_scalar(constant))
}

/// Observation noise and masking for one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSettings {
    pub obs_std: f64,
    pub observe_prob: f64,
}

impl NoiseSettings {
    pub fn noise(obs_std: f64) -> Self {
        Self {
            obs_std,
            observe_prob: 1.0,
        }
    }

    pub fn partial(observe_prob: f64, obs_std: f64) -> Self {
        Self {
            obs_std,
            observe_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// State before the first observation.
    pub initial: StateVector,
    pub states: Vec<StateVector>,
    pub frames: Vec<ObservationFrame>,
    pub noise: NoiseSettings,
    pub seed: u64,
    pub index: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Sub-trajectory of steps `[start, start + len)`; the state before `start`
    /// becomes the initial state.
    pub fn window(&self, start: usize, len: usize) -> Trajectory {
        let initial = if start == 0 { self.initial } else { self.states[start - 1] };
        Trajectory {
            initial,
            states: self.states[start..start + len].to_vec(),
            frames: self.frames[start..start + len].to_vec(),
            ..self.clone()
        }
    }
}

const OBSERVATION_SALT: u64 = 0x0b5e_7fa1_0000_0001;

/// Per-trajectory RNG stream: reproducible from `(seed, index)` alone.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn simulate_trajectory(
    system: &LorenzSystem,
    len: usize,
    noise: NoiseSettings,
    seed: u64,
    index: u64,
) -> Result<Trajectory> {
    // states and observations use separate streams, so trajectories with the
    // same (seed, index) share ground truth across noise settings
    let mut rng = trajectory_rng(seed, index);
    let mut obs_rng = trajectory_rng(seed ^ OBSERVATION_SALT, index);
    let initial = system.sample_initial(&mut rng);
    let mut states = Vec::with_capacity(len);
    let mut frames = Vec::with_capacity(len);
    let mut s = initial;
    for _ in 0..len {
        s = system.step(&s, system.dt, &mut rng)?;
        frames.push(observe(&render(&s), noise.obs_std, noise.observe_prob, &mut obs_rng)?);
        states.push(s);
    }
    Ok(Trajectory {
        initial,
        states,
        frames,
        noise,
        seed,
        index,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: LorenzSystem,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    count: usize,
    steps: usize,
    system: LorenzSystem,
    conditions: Vec<NoiseSettings>,
    seeds: Vec<u64>,
    indices: Vec<u64>,
}

impl Dataset {
    /// `count` trajectories of `len` steps; each draws its noise setting uniformly
    /// from `conditions` with its own stream derived from `seed` and its index.
    pub fn generate(
        system: &LorenzSystem,
        count: usize,
        len: usize,
        conditions: &[NoiseSettings],
        seed: u64,
    ) -> Result<Self> {
        if count == 0 || len == 0 {
            return Err(Error::invalid("dataset needs count >= 1 and T >= 1"));
        }
        if conditions.is_empty() {
            return Err(Error::invalid("dataset needs at least one noise condition"));
        }
        let trajectories = (0..count as u64)
            .into_par_iter()
            .map(|i| {
                // condition choice uses a stream disjoint from the simulation streams
                let mut pick = trajectory_rng(seed ^ 0x5eed_c0de, i);
                let noise = conditions[pick.gen_range(0..conditions.len())];
                simulate_trajectory(system, len, noise, seed, i)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            system: *system,
            trajectories,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::len)
    }

    pub fn to_container(&self) -> Result<Container> {
        let (n, t) = (self.len(), self.steps());
        let meta = DatasetMeta {
            count: n,
            steps: t,
            system: self.system,
            conditions: self.trajectories.iter().map(|tr| tr.noise).collect(),
            seeds: self.trajectories.iter().map(|tr| tr.seed).collect(),
            indices: self.trajectories.iter().map(|tr| tr.index).collect(),
        };
        let mut c = Container::new("dataset", serde_json::to_value(meta)?);
        let flat = |f: &dyn Fn(&Trajectory) -> Vec<f64>| -> Vec<f64> {
            self.trajectories.iter().flat_map(f).collect()
        };
        c.push("initial", Tensor::new([n, STATE_DIM], flat(&|tr| tr.initial.to_vec()))?);
        c.push(
            "states",
            Tensor::new([n, t, STATE_DIM], flat(&|tr| tr.states.iter().flatten().copied().collect()))?,
        );
        c.push(
            "frames",
            Tensor::new(
                [n, t, IMAGE_SIZE, IMAGE_SIZE],
                flat(&|tr| tr.frames.iter().flat_map(|f| f.pixels.clone()).collect()),
            )?,
        );
        c.push(
            "masks",
            Tensor::new(
                [n, t, IMAGE_SIZE, IMAGE_SIZE],
                flat(&|tr| tr.frames.iter().flat_map(ObservationFrame::mask_as_f64).collect()),
            )?,
        );
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "dataset" {
            return Err(Error::Format(format!("expected a dataset container, got {}", c.kind)));
        }
        let meta: DatasetMeta = serde_json::from_value(c.metadata.clone())?;
        let (n, t) = (meta.count, meta.steps);
        let initial = c.require("initial")?.data();
        let states = c.require("states")?.data();
        let frames = c.require("frames")?.data();
        let masks = c.require("masks")?.data();
        if states.len() != n * t * STATE_DIM || frames.len() != n * t * NUM_PIXELS || masks.len() != frames.len() {
            return Err(Error::Format("dataset payload sizes disagree with header".into()));
        }
        let trajectories = (0..n)
            .map(|i| Trajectory {
                initial: std::array::from_fn(|d| initial[i * STATE_DIM + d]),
                states: (0..t)
                    .map(|k| std::array::from_fn(|d| states[(i * t + k) * STATE_DIM + d]))
                    .collect(),
                frames: (0..t)
                    .map(|k| {
                        let r = (i * t + k) * NUM_PIXELS..(i * t + k + 1) * NUM_PIXELS;
                        ObservationFrame {
                            pixels: frames[r.clone()].to_vec(),
                            mask: masks[r].iter().map(|&m| m != 0.0).collect(),
                        }
                    })
                    .collect(),
                noise: meta.conditions[i],
                seed: meta.seeds[i],
                index: meta.indices[i],
            })
            .collect();
        Ok(Self {
            system: meta.system,
            trajectories,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_container()?.write_to(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_container(&Container::read_from(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, relative_error};

    #[test]
    fn origin_is_a_fixed_point() {
        let sys = LorenzSystem::default();
        assert_eq!(sys.integrate(&[0.0; 3], sys.dt), [0.0; 3]);
    }

    #[test]
    fn nontrivial_fixed_point_is_stationary() {
        let sys = LorenzSystem::default();
        let c = 72f64.sqrt();
        let s = sys.integrate(&[c, c, 27.0], sys.dt);
        for (a, b) in s.iter().zip([c, c, 27.0]) {
            assert!((a - b).abs() < 1e-6, "{s:?}");
        }
    }

    #[test]
    fn noisy_step_is_deterministic_under_seed() {
        let sys = LorenzSystem::default();
        let a = sys.step(&[1.0, 2.0, 3.0], 0.02, &mut trajectory_rng(5, 0)).unwrap();
        let b = sys.step(&[1.0, 2.0, 3.0], 0.02, &mut trajectory_rng(5, 0)).unwrap();
        assert_eq!(a, b);
        assert!(sys.step(&[f64::NAN, 0.0, 0.0], 0.02, &mut trajectory_rng(5, 0)).is_err());
        assert!(sys.step(&[0.0; 3], 0.0, &mut trajectory_rng(5, 0)).is_err());
    }

    #[test]
    fn noise_free_run_stays_in_attractor_box() {
        let sys = LorenzSystem::default();
        for s in sys.long_run(1000, 10_000) {
            assert!(s[0].abs() <= 25.0 && s[1].abs() <= 28.0, "{s:?}");
            assert!((0.0..=50.0).contains(&s[2]), "{s:?}");
        }
    }

    fn argmax(img: &[f64]) -> usize {
        img.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    }

    #[test]
    fn blob_peaks_at_its_projection() {
        // state at pixel centre (13, 13)
        let coord = (13.0 - PIXEL_OFFSET) / PIXEL_SCALE;
        let img = render(&[coord, coord, 10.0]);
        assert_eq!(argmax(&img), 13 * IMAGE_SIZE + 13);
        assert!((img[13 * IMAGE_SIZE + 13] - 1.0).abs() < 1e-12);
        // the grid centre sits between the four middle pixels, which tie
        let img = render(&[0.0, 0.0, 0.0]);
        let m = img[argmax(&img)];
        for (r, c) in [(13, 13), (13, 14), (14, 13), (14, 14)] {
            assert!((img[r * IMAGE_SIZE + c] - m).abs() < 1e-15);
        }
        assert_eq!(render(&[3.0, -4.0, 1.0]), render(&[3.0, -4.0, 1.0]));
    }

    #[test]
    fn interior_blob_mass_matches_integrated_gaussian() {
        // Simpson quadrature of the blob over the pixel support [-0.5, 27.5]^2
        let (u, v) = (project(2.0), project(-3.0));
        let simpson = |c: f64| {
            let (a, b, n) = (-0.5, IMAGE_SIZE as f64 - 0.5, 20_000);
            let h = (b - a) / n as f64;
            let f = |x: f64| (-(x - c) * (x - c) / (2.0 * PSF_SIGMA * PSF_SIGMA)).exp();
            let mut s = f(a) + f(b);
            for i in 1..n {
                s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0
        };
        let mass = simpson(u) * simpson(v);
        let sum: f64 = render(&[2.0, -3.0, 0.0]).iter().sum();
        assert!((sum - mass).abs() < 1e-3, "{sum} vs {mass}");
    }

    #[test]
    fn batch_render_matches_scalar_render_and_fd() {
        let tape = Tape::new();
        let states = [[3.0, -4.0, 1.0], [-20.0, 26.5, 30.0]];
        let flat: Vec<f64> = states.iter().flatten().copied().collect();
        let x = tape.constant(Tensor::new([2, 3], flat.clone()).unwrap());
        let imgs = render_batch(x).unwrap().value();
        for (k, s) in states.iter().enumerate() {
            let r = render(s);
            for p in 0..NUM_PIXELS {
                assert!((imgs.data()[k * NUM_PIXELS + p] - r[p]).abs() < 1e-15);
            }
        }
        let w: Vec<f64> = (0..2 * NUM_PIXELS).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let loss = |xs: &[Tensor]| {
            let tape = Tape::new();
            let x = tape.var(xs[0].clone());
            let wv = tape.constant(Tensor::new([2, NUM_PIXELS], w.clone()).unwrap());
            let root = render_batch(x).unwrap().mul(wv).unwrap().sum();
            let g = tape.backward(root).unwrap();
            (root.item(), g.wrt(x))
        };
        let input = Tensor::new([2, 3], flat).unwrap();
        let ad = loss(&[input.clone()]).1;
        let fd = finite_difference(|xs| loss(xs).0, &[input], 1e-5);
        assert!(relative_error(&[ad], &fd) < 1e-4);
    }

    #[test]
    fn render_jacobian_matches_finite_differences() {
        let s = [4.0, -7.5, 12.0];
        let (img, jac) = render_jacobian(&s).unwrap();
        let r = render(&s);
        let h = 1e-5;
        for (p, (a, b)) in img.iter().zip(&r).enumerate() {
            assert!((a - b).abs() < 1e-14);
            for (d, jd) in jac[p].iter().enumerate() {
                let mut sp = s;
                let mut sm = s;
                sp[d] += h;
                sm[d] -= h;
                let fd = (render(&sp)[p] - render(&sm)[p]) / (2.0 * h);
                assert!((jd - fd).abs() <= 1e-4 * fd.abs().max(1e-6), "{p} {d}: {jd} vs {fd}");
            }
        }
    }

    #[test]
    fn observe_identity_and_full_drop() {
        let img = render(&[1.0, 2.0, 3.0]);
        let f = observe(&img, 0.0, 1.0, &mut trajectory_rng(1, 0)).unwrap();
        assert_eq!(f.pixels, img);
        assert!(f.mask.iter().all(|&m| m));
        let f = observe(&img, 0.3, 0.0, &mut trajectory_rng(1, 0)).unwrap();
        assert!(f.mask.iter().all(|&m| !m));
        assert!(f.pixels.iter().all(|&p| p == 0.0));
        assert!(observe(&img, 0.1, 1.5, &mut trajectory_rng(1, 0)).is_err());
    }

    #[test]
    fn block_drop_rate_matches_proportion() {
        let mut rng = trajectory_rng(2, 0);
        let img = vec![0.0; NUM_PIXELS];
        let blocks_per_frame = 49;
        let frames = 100_000 / blocks_per_frame + 1;
        let mut kept = 0usize;
        for _ in 0..frames {
            let f = observe(&img, 0.0, 0.5, &mut rng).unwrap();
            // blocks are aligned, so count each block by its top-left pixel
            for by in 0..7 {
                for bx in 0..7 {
                    if f.mask[(by * 4) * IMAGE_SIZE + bx * 4] {
                        kept += 1;
                    }
                }
            }
        }
        let n = (frames * blocks_per_frame) as f64;
        let frac = kept as f64 / n;
        let sd = (0.25 / n).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * sd, "{frac}");
    }

    #[test]
    fn likelihood_of_exact_render() {
        let s = [5.0, 5.0, 20.0];
        let frame = ObservationFrame::fully_observed(render(&s));
        let sigma = 0.2;
        let expected = NUM_PIXELS as f64 * -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((log_likelihood(&s, &frame, sigma) - expected).abs() < 1e-9);
        let empty = ObservationFrame {
            pixels: vec![0.0; NUM_PIXELS],
            mask: vec![false; NUM_PIXELS],
        };
        assert_eq!(log_likelihood(&s, &empty, sigma), 0.0);
    }

    #[test]
    fn likelihood_matches_pixelwise_density_sum() {
        let mut rng = trajectory_rng(3, 0);
        let truth = [-3.0, 8.0, 25.0];
        let frame = observe(&render(&truth), 0.3, 0.6, &mut rng).unwrap();
        let particle = [-2.0, 7.0, 10.0];
        // independent evaluation: per-pixel Gaussian densities, no shared helpers
        let img = render(&particle);
        let mut oracle = 0.0;
        for p in 0..NUM_PIXELS {
            if frame.mask[p] {
                let r = frame.pixels[p] - img[p];
                let dens = (-r * r / (2.0 * 0.09)).exp() / (0.3 * (2.0 * std::f64::consts::PI).sqrt());
                oracle += dens.ln();
            }
        }
        assert!((log_likelihood(&particle, &frame, 0.3) - oracle).abs() < 1e-9);
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 3], particle.to_vec()).unwrap());
        let v = log_likelihood_batch(x, &frame, 0.3).unwrap().item();
        assert!((v - oracle).abs() < 1e-9);
    }

    #[test]
    fn dataset_is_reproducible_and_roundtrips() {
        let sys = LorenzSystem::default();
        let conds = [NoiseSettings::noise(0.1), NoiseSettings::partial(0.5, 0.1)];
        let a = Dataset::generate(&sys, 3, 4, &conds, 11).unwrap();
        let b = Dataset::generate(&sys, 3, 4, &conds, 11).unwrap();
        assert_eq!(a.to_container().unwrap().to_bytes().unwrap(), b.to_container().unwrap().to_bytes().unwrap());
        let back = Dataset::from_container(&a.to_container().unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(a.trajectories[1].states.len(), 4);
        assert!(Dataset::generate(&sys, 0, 4, &conds, 1).is_err());
    }

    #[test]
    fn noise_settings_do_not_change_ground_truth() {
        let sys = LorenzSystem::default();
        let a = simulate_trajectory(&sys, 16, NoiseSettings::noise(0.1), 5, 2).unwrap();
        let b = simulate_trajectory(&sys, 16, NoiseSettings::partial(0.4, 0.5), 5, 2).unwrap();
        assert_eq!((a.initial, &a.states), (b.initial, &b.states));
        assert_ne!(a.frames, b.frames);
    }
}
