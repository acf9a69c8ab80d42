//! Central finite differences, used to validate reverse-mode gradients.

use crate::autodiff::Tensor;

/// Central-difference gradient of `f` with respect to every element of `inputs`.
pub fn finite_difference(f: impl Fn(&[Tensor]) -> f64, inputs: &[Tensor], step: f64) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = f(&work);
            work[i].data_mut()[j] = orig - step;
            let minus = f(&work);
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||)` over all tensors jointly; 0 when both vanish.
pub fn relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (&u, &v) in x.data().iter().zip(y.data()) {
            diff += (u - v) * (u - v);
            na += u * u;
            nb += v * v;
        }
    }
    let scale = na.sqrt().max(nb.sqrt());
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}
