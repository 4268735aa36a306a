use super::Tensor;
use crate::error::{Error, Result};

/// Source taps for one output coordinate (align-corners=false).
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    l0: f64,
    l1: f64,
}

fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = if i0 + 1 < n_in { i0 + 1 } else { i0 };
            let l1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            Tap {
                i0,
                i1,
                l0: 1.0 - l1,
                l1,
            }
        })
        .collect()
}

/// Bilinear resize of an `h×w×c` map, align-corners=false.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize needs non-empty extents"));
    }
    if h == out_h && w == out_w {
        return Ok(input.clone());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let x = input.data();
    let mut out = vec![0.0; out_h * out_w * c];
    for (oy, a) in ty.iter().enumerate() {
        for (ox, b) in tx.iter().enumerate() {
            let o = &mut out[(oy * out_w + ox) * c..][..c];
            let p00 = &x[(a.i0 * w + b.i0) * c..][..c];
            let p01 = &x[(a.i0 * w + b.i1) * c..][..c];
            let p10 = &x[(a.i1 * w + b.i0) * c..][..c];
            let p11 = &x[(a.i1 * w + b.i1) * c..][..c];
            for k in 0..c {
                o[k] =
                    a.l0 * (b.l0 * p00[k] + b.l1 * p01[k]) + a.l1 * (b.l0 * p10[k] + b.l1 * p11[k]);
            }
        }
    }
    Ok(Tensor::from_raw(vec![out_h, out_w, c], out))
}

/// Adjoint of [`resize_bilinear`]: maps an output-space gradient back to
/// the `in_h×in_w` input grid.
pub fn resize_bilinear_adjoint(grad_out: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (oh, ow, c) = grad_out.hwc()?;
    if oh == in_h && ow == in_w {
        return Ok(grad_out.clone());
    }
    let ty = taps(in_h, oh);
    let tx = taps(in_w, ow);
    let g = grad_out.data();
    let mut out = vec![0.0; in_h * in_w * c];
    for (oy, a) in ty.iter().enumerate() {
        for (ox, b) in tx.iter().enumerate() {
            let gv = &g[(oy * ow + ox) * c..][..c];
            for (iy, ly) in [(a.i0, a.l0), (a.i1, a.l1)] {
                for (ix, lx) in [(b.i0, b.l0), (b.i1, b.l1)] {
                    let wgt = ly * lx;
                    if wgt == 0.0 {
                        continue;
                    }
                    let o = &mut out[(iy * in_w + ix) * c..][..c];
                    for k in 0..c {
                        o[k] += wgt * gv[k];
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![in_h, in_w, c], out))
}

pub fn bilinear_upsample2x(input: &Tensor) -> Result<Tensor> {
    let (h, w, _) = input.hwc()?;
    resize_bilinear(input, 2 * h, 2 * w)
}

pub fn bilinear_upsample2x_adjoint(grad_out: &Tensor) -> Result<Tensor> {
    let (h, w, _) = grad_out.hwc()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("even extents", format!("{h}×{w}")));
    }
    resize_bilinear_adjoint(grad_out, h / 2, w / 2)
}

fn corners(h: usize, w: usize, y: f64, x: f64) -> [(Option<usize>, f64, f64, f64); 4] {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let idx = |yy: f64, xx: f64| -> Option<usize> {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            None
        } else {
            Some(yy as usize * w + xx as usize)
        }
    };
    // (cell, weight, d weight / dy, d weight / dx)
    [
        (
            idx(y0, x0),
            (1.0 - fy) * (1.0 - fx),
            -(1.0 - fx),
            -(1.0 - fy),
        ),
        (idx(y0, x0 + 1.0), (1.0 - fy) * fx, -fx, 1.0 - fy),
        (idx(y0 + 1.0, x0), fy * (1.0 - fx), 1.0 - fx, -fy),
        (idx(y0 + 1.0, x0 + 1.0), fy * fx, fx, fy),
    ]
}

/// Samples channels `[c0, c0 + out.len())` of an `h×w×c` map at the
/// fractional grid position `(y, x)`; cells outside the map read as zero.
pub fn sample_bilinear(map: &Tensor, y: f64, x: f64, c0: usize, out: &mut [f64]) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    out.iter_mut().for_each(|v| *v = 0.0);
    let d = map.data();
    for (cell, wgt, _, _) in corners(h, w, y, x) {
        if let Some(cell) = cell {
            if wgt == 0.0 {
                continue;
            }
            let src = &d[cell * c + c0..][..out.len()];
            for (o, s) in out.iter_mut().zip(src) {
                *o += wgt * s;
            }
        }
    }
}

/// Backward of [`sample_bilinear`]: accumulates into `grad_map` and returns
/// the gradient with respect to `(y, x)`.
pub fn sample_bilinear_backward(
    map: &Tensor,
    y: f64,
    x: f64,
    c0: usize,
    grad_out: &[f64],
    grad_map: &mut Tensor,
) -> (f64, f64) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let d = map.data();
    let (mut gy, mut gx) = (0.0, 0.0);
    for (cell, wgt, dwy, dwx) in corners(h, w, y, x) {
        if let Some(cell) = cell {
            let src = &d[cell * c + c0..][..grad_out.len()];
            let mut s = 0.0;
            for (g, v) in grad_out.iter().zip(src) {
                s += g * v;
            }
            gy += dwy * s;
            gx += dwx * s;
            let dst = &mut grad_map.data_mut()[cell * c + c0..][..grad_out.len()];
            for (o, g) in dst.iter_mut().zip(grad_out) {
                *o += wgt * g;
            }
        }
    }
    (gy, gx)
}
