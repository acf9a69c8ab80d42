//! Bootstrap particle filter evidence on a scalar linear-Gaussian model,
//! compared with the exact Kalman filter answer as the particle count grows.

use dvsmc::autodiff::Tensor;
use dvsmc::baselines::bootstrap_filter;
use dvsmc::toy::LinearGaussian;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dvsmc::Result<()> {
    let model = LinearGaussian::default();
    let (_, ys) = model.simulate(50, &mut ChaCha8Rng::seed_from_u64(1));
    let exact = model.kalman_log_evidence(&ys);
    println!("exact log evidence {exact:.4}");

    for n in [10, 100, 1000, 10_000] {
        let runs: Vec<f64> = (0..20)
            .map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
                let init: Tensor = model.initial_particles(n, &mut rng);
                bootstrap_filter(&model, &ys, init, n as f64 / 2.0, &mut rng).map(|t| t.log_evidence())
            })
            .collect::<dvsmc::Result<_>>()?;
        let mean = runs.iter().sum::<f64>() / runs.len() as f64;
        let sd = (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (runs.len() - 1) as f64).sqrt();
        println!("N = {n:>6}: mean {mean:.4}  sd {sd:.4}  bias {:+.4}", mean - exact);
    }
    Ok(())
}
