//! Checks reverse-mode gradients of a small network against finite differences.

use dvsmc::autodiff::{Tape, Tensor, Var};
use dvsmc::gradcheck::{finite_difference, relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// log-mean-exp of a two-layer ReLU network over a batch of 5 inputs
fn forward<'t>(leaves: &[Var<'t>]) -> dvsmc::Result<Var<'t>> {
    let h = leaves[0].matmul(leaves[1])?.relu();
    let out = h.matmul(leaves[2])?.reshape([5])?;
    Ok(out.logsumexp()?.add_scalar(-(5f64).ln()))
}

fn main() -> dvsmc::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random = |shape: [usize; 2]| {
        let n = shape[0] * shape[1];
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    let inputs = vec![random([5, 4])?, random([4, 8])?, random([8, 1])?];

    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = forward(&leaves)?;
    let grads = tape.backward(loss)?;

    let numeric = finite_difference(
        |xs| {
            let t = Tape::new();
            let leaves: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
            forward(&leaves).map(|v| v.item()).unwrap_or(f64::NAN)
        },
        &inputs,
        1e-6,
    );
    println!("loss {:.6}", loss.item());
    for ((name, leaf), n) in ["x", "w1", "w2"].iter().zip(&leaves).zip(numeric) {
        let a = grads.wrt(*leaf);
        println!("{name:>3}: |grad| {:.4e}  relative error {:.2e}", a.l2_norm(), relative_error(&[a], &[n]));
    }
    Ok(())
}
