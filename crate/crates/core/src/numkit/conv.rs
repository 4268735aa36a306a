use super::Tensor;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Output extent of one spatial axis.
fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

struct Geometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
}

fn geometry(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Geometry> {
    let (h, w, cin) = input.hwc()?;
    let (kh, kw, kc, cout) = match kernel.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::shape(
                "kernel kh×kw×cin×cout",
                format!("{:?}", kernel.shape()),
            ))
        }
    };
    if kc != cin {
        return Err(Error::shape(format!("kernel cin {cin}"), kc));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid("kernel extents must be odd"));
    }
    if stride == 0 {
        return Err(Error::invalid("stride must be at least 1"));
    }
    let (oh, ow) = match (
        out_extent(h, kh, stride, pad),
        out_extent(w, kw, stride, pad),
    ) {
        (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
        _ => return Err(Error::invalid("convolution output would be empty")),
    };
    Ok(Geometry {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        oh,
        ow,
    })
}

/// Zero-padded 2-D convolution over an `h×w×cin` map.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    conv2d_with(Exec::default(), input, kernel, stride, pad)
}

pub fn conv2d_with(
    exec: Exec,
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = geometry(input, kernel, stride, pad)?;
    let x = input.data();
    let k = kernel.data();
    let row_len = g.ow * g.cout;
    let mut out = vec![0.0; g.oh * row_len];
    par::for_each_chunk_mut(exec, &mut out, row_len, |oy, row| {
        for ox in 0..g.ow {
            let acc = &mut row[ox * g.cout..(ox + 1) * g.cout];
            for ky in 0..g.kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let xin = &x[(iy as usize * g.w + ix as usize) * g.cin..][..g.cin];
                    let kbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let kr = &k[kbase + ci * g.cout..][..g.cout];
                        for (a, &kv) in acc.iter_mut().zip(kr) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_raw(vec![g.oh, g.ow, g.cout], out))
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let exec = Exec::default();
    let g = geometry(input, kernel, stride, pad)?;
    if grad_out.shape() != [g.oh, g.ow, g.cout] {
        return Err(Error::shape(
            format!("{:?}", [g.oh, g.ow, g.cout]),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();

    // kernel gradient: one chunk per (ky, kx) tap
    let tap = g.cin * g.cout;
    let mut gk = vec![0.0; g.kh * g.kw * tap];
    par::for_each_chunk_mut(exec, &mut gk, tap, |t, chunk| {
        let (ky, kx) = (t / g.kw, t % g.kw);
        for oy in 0..g.oh {
            let iy = (oy * stride + ky) as isize - pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            for ox in 0..g.ow {
                let ix = (ox * stride + kx) as isize - pad as isize;
                if ix < 0 || ix >= g.w as isize {
                    continue;
                }
                let xin = &x[(iy as usize * g.w + ix as usize) * g.cin..][..g.cin];
                let gr = &go[(oy * g.ow + ox) * g.cout..][..g.cout];
                for (ci, &xv) in xin.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (o, &gv) in chunk[ci * g.cout..][..g.cout].iter_mut().zip(gr) {
                        *o += xv * gv;
                    }
                }
            }
        }
    });

    // input gradient, gathered per input row
    let row_len = g.w * g.cin;
    let mut gx = vec![0.0; g.h * row_len];
    par::for_each_chunk_mut(exec, &mut gx, row_len, |iy, row| {
        for ky in 0..g.kh {
            let t = iy as isize + pad as isize - ky as isize;
            if t < 0 || t % stride as isize != 0 {
                continue;
            }
            let oy = (t / stride as isize) as usize;
            if oy >= g.oh {
                continue;
            }
            for ix in 0..g.w {
                let acc = &mut row[ix * g.cin..(ix + 1) * g.cin];
                for kx in 0..g.kw {
                    let t = ix as isize + pad as isize - kx as isize;
                    if t < 0 || t % stride as isize != 0 {
                        continue;
                    }
                    let ox = (t / stride as isize) as usize;
                    if ox >= g.ow {
                        continue;
                    }
                    let gr = &go[(oy * g.ow + ox) * g.cout..][..g.cout];
                    let kbase = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, a) in acc.iter_mut().enumerate() {
                        let kr = &k[kbase + ci * g.cout..][..g.cout];
                        let mut s = 0.0;
                        for (&kv, &gv) in kr.iter().zip(gr) {
                            s += kv * gv;
                        }
                        *a += s;
                    }
                }
            }
        }
    });

    Ok((
        Tensor::from_raw(vec![g.h, g.w, g.cin], gx),
        Tensor::from_raw(kernel.shape().to_vec(), gk),
    ))
}
