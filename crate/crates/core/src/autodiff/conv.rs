//! Convolution and pooling kernels.
//!
//! Convolutions are stride 1 with zero "same" padding (`k / 2` on each side, odd
//! kernels only), so the spatial extent is preserved. Pooling is 2x2 with stride 2
//! and floors odd extents, which takes a 28x28 image through 14x14 and 7x7 to 3x3.

use super::tape::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

fn geometry(input: &[usize], weight: &[usize]) -> Result<Geometry> {
    if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] {
        return Err(Error::shape("conv2d", input, weight));
    }
    if weight[2] != weight[3] || weight[2] % 2 == 0 {
        return Err(Error::invalid(format!(
            "conv2d needs a square odd kernel, got {weight:?}"
        )));
    }
    Ok(Geometry {
        batch: input[0],
        cin: input[1],
        cout: weight[0],
        h: input[2],
        w: input[3],
        k: weight[2],
    })
}

/// Unfolds one `[Cin, H, W]` image into `[Cin * k * k, H * W]` patch columns.
fn im2col(g: &Geometry, img: &[f64], cols: &mut [f64]) {
    let pad = (g.k / 2) as isize;
    let hw = g.h * g.w;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..g.h {
                    let sy = y as isize + ky as isize - pad;
                    for x in 0..g.w {
                        let sx = x as isize + kx as isize - pad;
                        dst[y * g.w + x] = if sy >= 0
                            && sx >= 0
                            && (sy as usize) < g.h
                            && (sx as usize) < g.w
                        {
                            img[(c * g.h + sy as usize) * g.w + sx as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, cols: &[f64], img: &mut [f64]) {
    let pad = (g.k / 2) as isize;
    let hw = g.h * g.w;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..g.h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy as usize >= g.h {
                        continue;
                    }
                    for x in 0..g.w {
                        let sx = x as isize + kx as isize - pad;
                        if sx >= 0 && (sx as usize) < g.w {
                            img[(c * g.h + sy as usize) * g.w + sx as usize] += src[y * g.w + x];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = geometry(input.shape(), weight.shape())?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape("conv2d bias", b.shape(), &[g.cout]));
        }
    }
    let hw = g.h * g.w;
    let patch = g.cin * g.k * g.k;
    let mut cols = vec![0.0; patch * hw];
    let mut out = vec![0.0; g.batch * g.cout * hw];
    for b in 0..g.batch {
        let img = &input.data()[b * g.cin * hw..(b + 1) * g.cin * hw];
        im2col(&g, img, &mut cols);
        let dst = &mut out[b * g.cout * hw..(b + 1) * g.cout * hw];
        gemm(g.cout, patch, hw, weight.data(), false, &cols, false, dst, false);
        if let Some(bias) = bias {
            for (c, chunk) in dst.chunks_mut(hw).enumerate() {
                let bv = bias.data()[c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::new([g.batch, g.cout, g.h, g.w], out)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    want_input: bool,
    want_weight: bool,
) -> ConvGrads {
    let g = geometry(input.shape(), weight.shape()).expect("validated in forward");
    let hw = g.h * g.w;
    let patch = g.cin * g.k * g.k;
    let mut gi = want_input.then(|| vec![0.0; input.numel()]);
    let mut gw = want_weight.then(|| vec![0.0; weight.numel()]);
    let mut gb = vec![0.0; g.cout];
    let mut cols = vec![0.0; patch * hw];
    let mut dcols = vec![0.0; patch * hw];
    for b in 0..g.batch {
        let go = &grad_out[b * g.cout * hw..(b + 1) * g.cout * hw];
        for (c, chunk) in go.chunks(hw).enumerate() {
            gb[c] += chunk.iter().sum::<f64>();
        }
        if let Some(gw) = gw.as_mut() {
            let img = &input.data()[b * g.cin * hw..(b + 1) * g.cin * hw];
            im2col(&g, img, &mut cols);
            gemm(g.cout, hw, patch, go, false, &cols, true, gw, true);
        }
        if let Some(gi) = gi.as_mut() {
            gemm(patch, g.cout, hw, weight.data(), true, go, false, &mut dcols, false);
            col2im(&g, &dcols, &mut gi[b * g.cin * hw..(b + 1) * g.cin * hw]);
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

pub(crate) fn maxpool2x2(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::invalid(format!("maxpool2x2 needs [B, C, H, W], got {s:?}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + (2 * y) * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xo + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new([s[0], s[1], oh, ow], out)?, argmax))
}
