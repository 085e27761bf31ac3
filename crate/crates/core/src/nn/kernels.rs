//! Forward and backward kernels. Inner loops run over contiguous rows so
//! the compiler can vectorize them; reductions use a fixed four-way split,
//! so results do not depend on anything but the inputs.

use super::{Conv2d, Dense, ParamGrad, Shape3};

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(super) fn conv_forward(c: &Conv2d, x: &[f64]) -> Vec<f64> {
    let s = c.input;
    let o = c.output();
    let k = c.kernel;
    let mut out = vec![0.0; o.len()];
    for oc in 0..o.channels {
        let plane = &mut out[oc * o.rows * o.cols..(oc + 1) * o.rows * o.cols];
        plane.iter_mut().for_each(|v| *v = c.bias[oc]);
        for ic in 0..s.channels {
            let input = &x[ic * s.rows * s.cols..(ic + 1) * s.rows * s.cols];
            let wk = &c.weights[(oc * s.channels + ic) * k * k..(oc * s.channels + ic + 1) * k * k];
            for y in 0..o.rows {
                let out_row = &mut plane[y * o.cols..(y + 1) * o.cols];
                for ky in 0..k {
                    let in_row = &input[(y + ky) * s.cols..(y + ky + 1) * s.cols];
                    for kx in 0..k {
                        axpy(wk[ky * k + kx], &in_row[kx..kx + o.cols], out_row);
                    }
                }
            }
        }
    }
    out
}

pub(super) fn conv_backward(c: &Conv2d, x: &[f64], grad_out: &[f64], acc: &mut ParamGrad, need_input_grad: bool) -> Vec<f64> {
    let s = c.input;
    let o = c.output();
    let k = c.kernel;
    let mut dx = if need_input_grad { vec![0.0; s.len()] } else { Vec::new() };
    for oc in 0..o.channels {
        let g = &grad_out[oc * o.rows * o.cols..(oc + 1) * o.rows * o.cols];
        acc.bias[oc] += g.iter().sum::<f64>();
        for ic in 0..s.channels {
            let input = &x[ic * s.rows * s.cols..(ic + 1) * s.rows * s.cols];
            let base = (oc * s.channels + ic) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let mut sum = 0.0;
                    for y in 0..o.rows {
                        let in_row = &input[(y + ky) * s.cols + kx..(y + ky) * s.cols + kx + o.cols];
                        sum += dot(&g[y * o.cols..(y + 1) * o.cols], in_row);
                    }
                    acc.weights[base + ky * k + kx] += sum;
                }
            }
            if need_input_grad {
                let dplane = &mut dx[ic * s.rows * s.cols..(ic + 1) * s.rows * s.cols];
                for y in 0..o.rows {
                    let g_row = &g[y * o.cols..(y + 1) * o.cols];
                    for ky in 0..k {
                        let d_row = &mut dplane[(y + ky) * s.cols..(y + ky + 1) * s.cols];
                        for kx in 0..k {
                            axpy(c.weights[base + ky * k + kx], g_row, &mut d_row[kx..kx + o.cols]);
                        }
                    }
                }
            }
        }
    }
    dx
}

/// 2x2 windows with stride 2; odd trailing rows/cols are dropped.
pub(super) fn maxpool_forward(x: &[f64], s: Shape3) -> Vec<f64> {
    let (orows, ocols) = (s.rows / 2, s.cols / 2);
    let mut out = Vec::with_capacity(s.channels * orows * ocols);
    for ch in 0..s.channels {
        let plane = &x[ch * s.rows * s.cols..(ch + 1) * s.rows * s.cols];
        for y in 0..orows {
            let r0 = &plane[2 * y * s.cols..(2 * y + 1) * s.cols];
            let r1 = &plane[(2 * y + 1) * s.cols..(2 * y + 2) * s.cols];
            for xx in 0..ocols {
                let a = r0[2 * xx].max(r0[2 * xx + 1]);
                let b = r1[2 * xx].max(r1[2 * xx + 1]);
                out.push(a.max(b));
            }
        }
    }
    out
}

/// Routes each window's gradient to its arg-max (first maximum in
/// row-major window order).
pub(super) fn maxpool_backward(x: &[f64], s: Shape3, grad_out: &[f64]) -> Vec<f64> {
    let (orows, ocols) = (s.rows / 2, s.cols / 2);
    let mut dx = vec![0.0; s.len()];
    for ch in 0..s.channels {
        let off = ch * s.rows * s.cols;
        for y in 0..orows {
            for xx in 0..ocols {
                let cand = [
                    off + 2 * y * s.cols + 2 * xx,
                    off + 2 * y * s.cols + 2 * xx + 1,
                    off + (2 * y + 1) * s.cols + 2 * xx,
                    off + (2 * y + 1) * s.cols + 2 * xx + 1,
                ];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                dx[best] += grad_out[(ch * orows + y) * ocols + xx];
            }
        }
    }
    dx
}

pub(super) fn dense_forward(d: &Dense, x: &[f64]) -> Vec<f64> {
    (0..d.outputs)
        .map(|o| d.bias[o] + dot(&d.weights[o * d.inputs..(o + 1) * d.inputs], x))
        .collect()
}

pub(super) fn dense_backward(d: &Dense, x: &[f64], grad_out: &[f64], acc: &mut ParamGrad, need_input_grad: bool) -> Vec<f64> {
    let mut dx = if need_input_grad { vec![0.0; d.inputs] } else { Vec::new() };
    for (o, &g) in grad_out.iter().enumerate() {
        acc.bias[o] += g;
        if g == 0.0 {
            continue;
        }
        axpy(g, x, &mut acc.weights[o * d.inputs..(o + 1) * d.inputs]);
        if need_input_grad {
            axpy(g, &d.weights[o * d.inputs..(o + 1) * d.inputs], &mut dx);
        }
    }
    dx
}
