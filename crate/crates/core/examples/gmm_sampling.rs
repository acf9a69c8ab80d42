//! Draws from a two-component Gaussian mixture and compares sample moments
//! with the exact ones. Also shows the tape version, whose samples carry
//! gradients back to the means and log-variances.

use dvsmc::autodiff::{Tape, Tensor};
use dvsmc::distributions::{GmmParams, GmmVar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dvsmc::Result<()> {
    let gmm = GmmParams::new(
        vec![0.0, (3.0f64).ln()],
        vec![vec![-2.0, 0.0], vec![3.0, 1.0]],
        vec![vec![0.0, -1.0], vec![-0.5, 0.5]],
    )?;
    let w = gmm.weights();
    println!("weights {:.3?}", w);

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 50_000;
    let mut sum = [0.0; 2];
    let mut counts = [0usize; 2];
    for _ in 0..n {
        let (x, k) = gmm.sample(&mut rng);
        counts[k] += 1;
        sum[0] += x[0];
        sum[1] += x[1];
    }
    let exact = [w[0] * -2.0 + w[1] * 3.0, w[1] * 1.0];
    println!("sample mean ({:.3}, {:.3})  exact ({:.3}, {:.3})", sum[0] / n as f64, sum[1] / n as f64, exact[0], exact[1]);
    println!("component frequencies {:.3} / {:.3}", counts[0] as f64 / n as f64, counts[1] as f64 / n as f64);
    println!("log density at origin {:.4}", gmm.log_pdf(&[0.0, 0.0]));

    // same mixture on a tape, one row per particle
    let tape = Tape::new();
    let raw = tape.var(Tensor::new([4, gmm.flatten().len()], gmm.flatten().repeat(4))?);
    let batch = GmmVar::from_raw(raw, 2, 2, None)?;
    let (z, picked) = batch.sample(&mut rng)?;
    let objective = z.square().sum();
    let grads = tape.backward(objective)?;
    println!("tape samples {:?} from components {:?}", z.value().data(), picked);
    println!("d sum(z^2) / d raw has norm {:.4}", grads.wrt(raw).l2_norm());
    Ok(())
}
