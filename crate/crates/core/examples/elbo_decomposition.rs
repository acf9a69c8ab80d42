//! Splits the ELBO of a bootstrap filter's posterior into its expected
//! log-likelihood and KL-to-prior terms under increasing image occlusion.
//! The prior is a KDE fitted to a long noise-free attractor run.

use dvsmc::baselines::{baseline_init, bootstrap_filter, ConstantVelocity, CvImageModel, CV_DIM};
use dvsmc::distributions::LogDensity;
use dvsmc::eval::{build_prior, elbo_from_particles, PriorConfig};
use dvsmc::ssm::{simulate_trajectory, LorenzSystem, NoiseSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dvsmc::Result<()> {
    let system = LorenzSystem::default();
    let prior = build_prior(&system, &PriorConfig::default())?;
    println!("prior: {} kernels, bandwidth {:.3?}", prior.len(), prior.bandwidth());
    println!("log prior density at (0, 0, 25): {:.3}", prior.log_density(&[0.0, 0.0, 25.0]));

    for p in [1.0, 0.6, 0.2] {
        let traj = simulate_trajectory(&system, 32, NoiseSettings::partial(p, 0.1), 3, 0)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = CvImageModel {
            dynamics: ConstantVelocity::default(),
            obs_std: 0.1,
        };
        let trace = bootstrap_filter(&model, &traj.frames, baseline_init(&traj.initial, 280, &mut rng), 140.0, &mut rng)?;
        let (mut ll, mut kl) = (0.0, 0.0);
        for (step, frame) in trace.steps.iter().zip(&traj.frames).step_by(4) {
            let terms = elbo_from_particles(step.particles.data(), CV_DIM, &step.weights, frame, 0.1, &prior, 128, &mut rng)?;
            ll += terms.log_lik;
            kl += terms.kl;
        }
        let n = trace.steps.len().div_ceil(4) as f64;
        println!(
            "P = {p}: expected log-likelihood {:10.1}  KL to prior {:6.2}  ELBO {:10.1}",
            ll / n,
            kl / n,
            (ll - kl) / n
        );
    }
    Ok(())
}
