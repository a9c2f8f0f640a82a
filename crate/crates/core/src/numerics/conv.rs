//! Stride-1, zero-padded ("same") 2-D convolution over `[C, H, W]` tensors.

use super::Tensor;
use crate::error::{Error, Result};

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(Error::dim(format!("{what}: expected [C, H, W], got {s:?}"))),
    }
}

fn kernel_dims(weight: &Tensor) -> Result<(usize, usize, usize)> {
    match weight.shape() {
        &[co, ci, k, k2] if k == k2 && k % 2 == 1 => Ok((co, ci, k)),
        s => Err(Error::dim(format!(
            "conv kernel must be [out, in, k, k] with odd k, got {s:?}"
        ))),
    }
}

/// Valid output range along one axis for kernel offset `kk` with padding `pad`.
#[inline]
fn span(len: usize, kk: usize, pad: usize) -> (usize, usize) {
    // output y reads input y + kk - pad, which must lie in [0, len)
    let lo = pad.saturating_sub(kk);
    let hi = (len + pad).saturating_sub(kk).min(len);
    (lo, hi.max(lo))
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, h, w) = dims3(input, "conv2d input")?;
    let (cout, wcin, k) = kernel_dims(weight)?;
    if wcin != cin || bias.len() != cout {
        return Err(Error::dim(format!(
            "conv2d: input channels {cin}, kernel {:?}, bias {:?}",
            weight.shape(),
            bias.shape()
        )));
    }
    let pad = k / 2;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        plane.iter_mut().for_each(|v| *v = bias.data()[o]);
        for i in 0..cin {
            let xin = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = span(h, ky, pad);
                for kx in 0..k {
                    let wv = wt[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = span(w, kx, pad);
                    for y in y0..y1 {
                        let src_row = (y + ky - pad) * w;
                        let dst = &mut plane[y * w + x0..y * w + x1];
                        let src = &xin[src_row + x0 + kx - pad..src_row + x1 + kx - pad];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, h, w], out)
}

/// Gradients of a [`conv2d`] call: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cin, h, w) = dims3(input, "conv2d_backward input")?;
    let (cout, _, k) = kernel_dims(weight)?;
    if grad_out.shape() != [cout, h, w] {
        return Err(Error::dim(format!(
            "conv2d_backward: grad shape {:?}, expected {:?}",
            grad_out.shape(),
            [cout, h, w]
        )));
    }
    let pad = k / 2;
    let x = input.data();
    let g = grad_out.data();
    let wt = weight.data();
    let mut dx = vec![0.0; cin * h * w];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; cout];
    for o in 0..cout {
        let gplane = &g[o * h * w..(o + 1) * h * w];
        db[o] = gplane.iter().sum();
        for i in 0..cin {
            let xin = &x[i * h * w..(i + 1) * h * w];
            let dxin = &mut dx[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                let (y0, y1) = span(h, ky, pad);
                for kx in 0..k {
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let (x0, x1) = span(w, kx, pad);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src_row = (y + ky - pad) * w;
                        let gs = &gplane[y * w + x0..y * w + x1];
                        let lo = src_row + x0 + kx - pad;
                        let hi = src_row + x1 + kx - pad;
                        for (&gv, &xv) in gs.iter().zip(&xin[lo..hi]) {
                            acc += gv * xv;
                        }
                        if wv != 0.0 {
                            for (d, &gv) in dxin[lo..hi].iter_mut().zip(gs) {
                                *d += wv * gv;
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![cin, h, w], dx)?,
        Tensor::new(weight.shape().to_vec(), dw)?,
        Tensor::new(vec![cout], db)?,
    ))
}
