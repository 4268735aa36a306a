use super::{Matrix, Tensor};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// `a (m×k) · b (k×n)`. Each output element accumulates over `k` left to
/// right starting from zero.
pub(crate) fn gemm(exec: Exec, a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_chunk_mut(exec, &mut out, n.max(1), |i, row| {
        if n == 0 {
            return;
        }
        let ar = &a[i * k..(i + 1) * k];
        for (kk, &aik) in ar.iter().enumerate() {
            let br = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += aik * bv;
            }
        }
    });
    out
}

/// `a (m×k) · bᵀ` with `b` stored `n×k`; dot products left to right.
pub(crate) fn gemm_nt(exec: Exec, a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_chunk_mut(exec, &mut out, n.max(1), |i, row| {
        if n == 0 {
            return;
        }
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ar, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `aᵀ · b` with `a` stored `r×m`, `b` stored `r×n`; result `m×n`.
pub(crate) fn gemm_tn(exec: Exec, a: &[f64], r: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    par::for_each_chunk_mut(exec, &mut out, n.max(1), |i, row| {
        if n == 0 {
            return;
        }
        for rr in 0..r {
            let aval = a[rr * m + i];
            if aval == 0.0 {
                continue;
            }
            let br = &b[rr * n..(rr + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += aval * bv;
            }
        }
    });
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_with(Exec::default(), a, b)
}

pub fn matmul_with(exec: Exec, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::shape(
            format!(
                "inner dims equal ({}×{} · {}×{})",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
            "mismatch",
        ));
    }
    if a.cols() == 0 {
        return Err(Error::invalid("matmul with empty inner dimension"));
    }
    let data = gemm(exec, a.data(), a.rows(), a.cols(), b.data(), b.cols());
    Ok(Matrix::from_raw(a.rows(), b.cols(), data))
}

/// `a · bᵀ`. Bitwise equal to `matmul(a, &b.transpose())`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!("{} columns", a.cols()), b.cols()));
    }
    if a.cols() == 0 {
        return Err(Error::invalid("matmul with empty inner dimension"));
    }
    let data = gemm_nt(
        Exec::default(),
        a.data(),
        a.rows(),
        a.cols(),
        b.data(),
        b.rows(),
    );
    Ok(Matrix::from_raw(a.rows(), b.rows(), data))
}

/// Row-wise softmax of `m / temperature` with per-row max subtraction.
pub fn softmax_rows(m: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("softmax input contains non-finite values"));
    }
    let mut out = m.clone();
    let cols = m.cols();
    if cols == 0 {
        return Ok(out);
    }
    par::for_each_chunk_mut(Exec::default(), out.data_mut(), cols, |_, row| {
        softmax_in_place(row, temperature);
    });
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient of a row-softmax with respect to its (already scaled) logits,
/// given the softmax output `p` and the upstream gradient `dp`.
pub(crate) fn softmax_rows_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let cols = p.cols();
    let mut out = Matrix::zeros(p.rows(), cols);
    for i in 0..p.rows() {
        let pr = p.row(i);
        let gr = dp.row(i);
        let s = dot(pr, gr);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = pr[j] * (gr[j] - s);
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adds a per-channel bias to the last axis of `t`.
pub(crate) fn add_channel_bias(t: &mut Tensor, bias: &[f64]) {
    let c = bias.len();
    for chunk in t.data_mut().chunks_mut(c) {
        for (v, b) in chunk.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Sums `t` over every axis but the last.
pub(crate) fn channel_sums(data: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for chunk in data.chunks(c) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}
