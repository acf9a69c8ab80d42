//! Deep variational SMC on Lorenz images.
//!
//! Without arguments, trains a small network for a few epochs and filters one
//! held-out sequence. With a checkpoint path (e.g. one written by
//! `dvsmc train`) it skips training and filters with the saved weights:
//!
//! ```text
//! cargo run --release --example deep_vsmc -- results/desk/checkpoints/noise/dpf.bin
//! ```

use dvsmc::eval::{build_prior, tracking_error, PriorConfig};
use dvsmc::models::{DeepVsmc, ModelConfig};
use dvsmc::smc::{run_filter, FilterConfig, ResamplerKind};
use dvsmc::ssm::{simulate_trajectory, Dataset, LorenzSystem, NoiseSettings};
use dvsmc::training::{image_sequences, train, Checkpoint, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dvsmc::Result<()> {
    let system = LorenzSystem::default();
    let prior = build_prior(&system, &PriorConfig::default())?;
    let sigma = 0.1;

    let (model, params) = match std::env::args().nth(1) {
        Some(path) => {
            let ckpt = Checkpoint::load(&path)?;
            let config: ModelConfig = serde_json::from_value(ckpt.metadata["model"].clone())
                .map_err(|e| dvsmc::Error::Format(format!("checkpoint model config: {e}")))?;
            let (model, mut params) = DeepVsmc::new(config, 0)?;
            params.load_from(&ckpt.params)?;
            println!("loaded {path} (epoch {})", ckpt.epoch);
            (model, params)
        }
        None => {
            let config = ModelConfig {
                width: 64,
                hidden_layers: 2,
                encoding: 64,
                base_channels: 4,
                ..Default::default()
            };
            let (model, store) = DeepVsmc::new(config, 1)?;
            let data = Dataset::generate(&system, 64, 4, &[NoiseSettings::noise(sigma)], 1)?;
            let train_cfg = TrainConfig {
                epochs: 6,
                batch_size: 16,
                particles: 16,
                curriculum: vec![(0, 2), (3, 4)],
                ..Default::default()
            };
            let start = Checkpoint::new("dpf", store, train_cfg.optimizer, serde_json::Value::Null);
            let (ckpt, report) = train(&model, start, &image_sequences(&data), |r| prior.sample(16, r), &train_cfg, |_| Ok(f64::NAN))?;
            for e in &report.epochs {
                println!("epoch {}: objective {:.2}, gradient norm {:.3e}", e.epoch, e.objective, e.grad_norm);
            }
            (model, ckpt.params)
        }
    };

    let traj = simulate_trajectory(&system, 64, NoiseSettings::noise(sigma), 99, 0)?;
    let fc = FilterConfig::new(28, ResamplerKind::Systematic, sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = run_filter(&model, &params, &traj.frames, prior.sample(28, &mut rng), &fc, &mut rng)?;
    let err = tracking_error(&trace.posterior_means(), &traj.states)?;
    let resampled = trace.steps.iter().filter(|s| s.resampled).count();
    println!(
        "held-out sequence: mean tracking error {:.2}, log evidence {:.1}, resampled at {resampled}/{} steps",
        err.iter().sum::<f64>() / err.len() as f64,
        trace.log_evidence(),
        trace.len()
    );
    for t in (0..64).step_by(16) {
        let m = trace.steps[t].posterior_mean();
        let s = traj.states[t];
        println!(
            "t={t:2} truth ({:6.2}, {:6.2}, {:6.2}) estimate ({:6.2}, {:6.2}, {:6.2}) ESS {:5.1}",
            s[0], s[1], s[2], m[0], m[1], m[2], trace.steps[t].ess
        );
    }
    Ok(())
}
