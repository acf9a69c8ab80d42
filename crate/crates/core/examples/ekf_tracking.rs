//! Tracks a Lorenz trajectory from images with a constant-velocity EKF and a
//! bootstrap filter built on the same dynamics.

use dvsmc::baselines::{baseline_belief, baseline_init, bootstrap_filter, run_ekf, ConstantVelocity, CvImageModel, ImageMeasurement};
use dvsmc::eval::tracking_error;
use dvsmc::ssm::{simulate_trajectory, LorenzSystem, NoiseSettings};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dvsmc::Result<()> {
    let system = LorenzSystem::default();
    let dynamics = ConstantVelocity::default();
    for sigma in [0.1, 0.3, 0.5] {
        let traj = simulate_trajectory(&system, 64, NoiseSettings::noise(sigma), 2, 0)?;

        let (beliefs, inc) = run_ekf(
            baseline_belief(&traj.initial),
            &dynamics.into(),
            &ImageMeasurement { obs_std: sigma },
            &traj.frames,
        )?;
        let ekf_means: Vec<Vec<f64>> = beliefs.iter().map(|b| b.mean.as_slice().to_vec()).collect();
        let ekf_err = tracking_error(&ekf_means, &traj.states)?;

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = CvImageModel { dynamics, obs_std: sigma };
        let trace = bootstrap_filter(&model, &traj.frames, baseline_init(&traj.initial, 280, &mut rng), 140.0, &mut rng)?;
        let bpf_err = tracking_error(&trace.posterior_means(), &traj.states)?;

        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "sigma {sigma}: EKF error {:6.2} (log evidence {:9.1}), BPF-280 error {:6.2}",
            mean(&ekf_err),
            inc.iter().sum::<f64>(),
            mean(&bpf_err)
        );
    }
    Ok(())
}
