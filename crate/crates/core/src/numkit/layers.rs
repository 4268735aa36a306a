//! Parameterized building blocks with hand-written backward passes.

use rand::Rng;

use super::linalg::{add_channel_bias, channel_sums, gemm, gemm_nt, gemm_tn};
use super::{conv2d, conv2d_backward, Matrix, Tensor};
use crate::error::{Error, Result};
use crate::par::Exec;

/// Anything that owns named parameter tensors in a fixed order.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Parameters flattened in visit order.
pub fn flatten<P: ParamSet + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

pub fn param_count<P: ParamSet + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.len());
    n
}

/// `p += scale * delta`, with `delta` laid out as [`flatten`] does.
pub fn add_scaled<P: ParamSet + ?Sized>(p: &mut P, delta: &[f64], scale: f64) {
    let mut off = 0;
    p.visit_mut("", &mut |_, t| {
        let n = t.len();
        for (v, d) in t.data_mut().iter_mut().zip(&delta[off..off + n]) {
            *v += scale * d;
        }
        off += n;
    });
    debug_assert_eq!(off, delta.len());
}

/// Overwrites every parameter from a flat buffer.
pub fn assign<P: ParamSet + ?Sized>(p: &mut P, values: &[f64]) -> Result<()> {
    let total = param_count(p);
    if total != values.len() {
        return Err(Error::shape(format!("{total} parameters"), values.len()));
    }
    let mut off = 0;
    p.visit_mut("", &mut |_, t| {
        let n = t.len();
        t.data_mut().copy_from_slice(&values[off..off + n]);
        off += n;
    });
    Ok(())
}

pub(crate) fn uniform_fill<R: Rng>(t: &mut Tensor, bound: f64, rng: &mut R) {
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
}

/// Dense layer acting on the rows of a token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = Self::zeros(n, n);
        for i in 0..n {
            l.weight.data_mut()[i * n + i] = 1.0;
        }
        l
    }

    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let mut l = Self::zeros(fan_in, fan_out);
        uniform_fill(&mut l.weight, 1.0 / (fan_in as f64).sqrt(), rng);
        l
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.fan_in() {
            return Err(Error::shape(
                format!("{} input features", self.fan_in()),
                x.cols(),
            ));
        }
        let mut y = gemm(
            Exec::default(),
            x.data(),
            x.rows(),
            x.cols(),
            self.weight.data(),
            self.fan_out(),
        );
        let mut t = Tensor::from_raw(vec![x.rows(), self.fan_out()], std::mem::take(&mut y));
        add_channel_bias(&mut t, self.bias.data());
        Ok(Matrix::from_raw(x.rows(), self.fan_out(), t.into_data()))
    }

    /// Applies the layer to every pixel of an `h×w×c` map.
    pub fn forward_map(&self, x: &Tensor) -> Result<Tensor> {
        let (h, w, _) = x.hwc()?;
        self.forward(&Matrix::from_map(x.clone())?)?.into_map(h, w)
    }

    /// Returns `(d input, d params)`.
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> (Matrix, Linear) {
        let (n, fi, fo) = (x.rows(), self.fan_in(), self.fan_out());
        let gw = gemm_tn(Exec::default(), x.data(), n, fi, grad_out.data(), fo);
        let gb = channel_sums(grad_out.data(), fo);
        let gx = gemm_nt(
            Exec::default(),
            grad_out.data(),
            n,
            fo,
            self.weight.data(),
            fi,
        );
        (
            Matrix::from_raw(n, fi, gx),
            Linear {
                weight: Tensor::from_raw(vec![fi, fo], gw),
                bias: Tensor::from_raw(vec![fo], gb),
            },
        )
    }

    pub fn backward_map(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Linear)> {
        let (h, w, _) = x.hwc()?;
        let (gx, g) = self.backward(
            &Matrix::from_map(x.clone())?,
            &Matrix::from_map(grad_out.clone())?,
        );
        Ok((gx.into_map(h, w)?, g))
    }
}

impl ParamSet for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    /// `k × k × cin × cout`
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn zeros(k: usize, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            kernel: Tensor::zeros(&[k, k, cin, cout]),
            bias: Tensor::zeros(&[cout]),
            stride,
            pad: k / 2,
        }
    }

    pub fn init<R: Rng>(k: usize, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let mut c = Self::zeros(k, cin, cout, stride);
        uniform_fill(&mut c.kernel, 1.0 / ((k * k * cin) as f64).sqrt(), rng);
        c
    }

    pub fn cout(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = conv2d(x, &self.kernel, self.stride, self.pad)?;
        add_channel_bias(&mut y, self.bias.data());
        Ok(y)
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Conv)> {
        let (gx, gk) = conv2d_backward(x, &self.kernel, grad_out, self.stride, self.pad)?;
        let gb = channel_sums(grad_out.data(), self.cout());
        Ok((
            gx,
            Conv {
                kernel: gk,
                bias: Tensor::from_raw(vec![self.cout()], gb),
                stride: self.stride,
                pad: self.pad,
            },
        ))
    }
}

impl ParamSet for Conv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "kernel"), &self.kernel);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "kernel"), &mut self.kernel);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

pub(crate) fn relu_in_place(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the forward activation was clipped.
pub(crate) fn relu_backward_in_place(activated: &Tensor, grad: &mut Tensor) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::init(3, 2, &mut rng);
        lin.bias = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
        let x = Matrix::new(4, 3, (0..12).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
        let go = Matrix::new(4, 2, (0..8).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
        let loss = |l: &Linear, x: &Matrix| -> f64 {
            l.forward(x)
                .unwrap()
                .data()
                .iter()
                .zip(go.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (gx, gl) = lin.backward(&x, &go);
        let e = 1e-6;
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += e;
            let mut xm = x.clone();
            xm.data_mut()[i] -= e;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * e);
            assert!((fd - gx.data()[i]).abs() < 1e-8);
        }
        let flat = flatten(&gl);
        let base = flatten(&lin);
        for i in 0..base.len() {
            let mut lp = lin.clone();
            let mut d = vec![0.0; base.len()];
            d[i] = e;
            add_scaled(&mut lp, &d, 1.0);
            let mut lm = lin.clone();
            add_scaled(&mut lm, &d, -1.0);
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * e);
            assert!((fd - flat[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn assign_round_trips_flatten() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = Conv::init(3, 2, 4, 1, &mut rng);
        let mut d = Conv::zeros(3, 2, 4, 1);
        assign(&mut d, &flatten(&c)).unwrap();
        assert_eq!(c, d);
        assert!(assign(&mut d, &[1.0]).is_err());
    }
}
