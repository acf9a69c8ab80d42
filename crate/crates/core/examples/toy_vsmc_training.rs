//! Learns a linear proposal for a scalar linear-Gaussian model by maximizing
//! the SMC log-evidence, then compares it with the bootstrap and the locally
//! optimal proposal.

use dvsmc::autodiff::{AdamWConfig, ParamStore, Tape};
use dvsmc::toy::{LinearGaussian, LinearGaussianVsmc};
use dvsmc::training::{sequence_rng, train, vsmc_objective, Checkpoint, TrainConfig, TrainSequence};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PARTICLES: usize = 4;

fn main() -> dvsmc::Result<()> {
    let lg = LinearGaussian::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<TrainSequence<f64>> = (0..64)
        .map(|_| TrainSequence {
            observations: lg.simulate(10, &mut rng).1,
            obs_std: lg.r.sqrt(),
        })
        .collect();
    let exact: f64 = data.iter().map(|s| lg.kalman_log_evidence(&s.observations)).sum::<f64>() / data.len() as f64;

    let config = TrainConfig {
        epochs: 60,
        batch_size: 16,
        particles: PARTICLES,
        curriculum: vec![(0, 5), (20, 10)],
        optimizer: AdamWConfig {
            lr: 0.03,
            weight_decay: 0.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let learned = LinearGaussianVsmc::new(lg, 0.0, 0.0, 0.0, 0.0);
    let start = Checkpoint::new("toy", learned.params(), config.optimizer, serde_json::Value::Null);
    let (ckpt, report) = train(&learned, start, &data, |r| lg.initial_particles(PARTICLES, r), &config, |_| Ok(f64::NAN))?;
    for e in report.epochs.iter().step_by(10) {
        println!("epoch {:2}: mean log evidence {:.3}", e.epoch, e.objective);
    }
    for (name, t) in ckpt.params.iter() {
        println!("{name} = {:.3}", t.item());
    }

    // score each proposal on identical random streams
    let score = |model: &LinearGaussianVsmc, store: &ParamStore| -> dvsmc::Result<f64> {
        let mut total = 0.0;
        for rep in 0..20 {
            let tape = Tape::new();
            let p = store.bind_frozen(&tape);
            let mut rngs: Vec<_> = (0..data.len()).map(|i| sequence_rng(77, rep, i)).collect();
            let init: Vec<_> = rngs.iter_mut().map(|r| lg.initial_particles(PARTICLES, r)).collect();
            total -= vsmc_objective(model, &p, &tape, &data, &init, &config, &mut rngs)?.item();
        }
        Ok(total / 20.0)
    };
    let bootstrap = LinearGaussianVsmc::bootstrap(lg);
    let optimal = LinearGaussianVsmc::optimal(lg);
    println!("exact Kalman log evidence {exact:.3}");
    println!("bootstrap proposal        {:.3}", score(&bootstrap, &bootstrap.params())?);
    println!("learned proposal          {:.3}", score(&learned, &ckpt.params)?);
    println!("optimal proposal          {:.3}", score(&optimal, &optimal.params())?);
    Ok(())
}
