//! Constant-velocity Kalman filter on `(cx, cy, aspect, height)`.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub type Mean = SVector<f64, 8>;
pub type Cov = SMatrix<f64, 8, 8>;
type Meas = SVector<f64, 4>;

/// Noise scales relative to box height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanNoise {
    pub position: f64,
    pub velocity: f64,
}

impl Default for KalmanNoise {
    fn default() -> Self {
        Self {
            position: 1.0 / 20.0,
            velocity: 1.0 / 160.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanState {
    pub mean: Mean,
    pub cov: Cov,
}

pub fn to_xyah(b: &BBox) -> [f64; 4] {
    let (cx, cy) = b.center();
    [cx, cy, b.w / b.h, b.h]
}

pub fn from_xyah(m: &[f64]) -> BBox {
    let h = m[3];
    BBox::from_center(m[0], m[1], m[2] * h, h)
}

fn diag(v: [f64; 8]) -> Cov {
    Cov::from_diagonal(&SVector::from(v.map(|s| s * s)))
}

impl KalmanState {
    pub fn initiate(b: &BBox, noise: &KalmanNoise) -> Self {
        let z = to_xyah(b);
        let mut mean = Mean::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(&Meas::from(z));
        let (p, v, h) = (noise.position, noise.velocity, z[3]);
        let cov = diag([
            2.0 * p * h,
            2.0 * p * h,
            1e-2,
            2.0 * p * h,
            10.0 * v * h,
            10.0 * v * h,
            1e-5,
            10.0 * v * h,
        ]);
        Self { mean, cov }
    }

    pub fn bbox(&self) -> BBox {
        from_xyah(self.mean.as_slice())
    }

    fn check_psd(&self) -> Result<()> {
        let sym = (self.cov - self.cov.transpose()).abs().max();
        if sym > 1e-9 || self.cov.cholesky().is_none() {
            return Err(Error::invalid(
                "covariance is not symmetric positive-definite",
            ));
        }
        Ok(())
    }

    /// One frame ahead.
    pub fn predict(&mut self, noise: &KalmanNoise) -> Result<()> {
        self.check_psd()?;
        let mut f = Cov::identity();
        for i in 0..4 {
            f[(i, i + 4)] = 1.0;
        }
        let (p, v, h) = (noise.position, noise.velocity, self.mean[3]);
        let q = diag([p * h, p * h, 1e-2, p * h, v * h, v * h, 1e-5, v * h]);
        self.mean = f * self.mean;
        let cov = f * self.cov * f.transpose() + q;
        self.cov = (cov + cov.transpose()) * 0.5;
        Ok(())
    }

    /// Corrects with a measured box.
    pub fn update(&mut self, b: &BBox, noise: &KalmanNoise) -> Result<()> {
        self.check_psd()?;
        let z = Meas::from(to_xyah(b));
        let h = self.mean[3];
        let p = noise.position;
        let r = SMatrix::<f64, 4, 4>::from_diagonal(&SVector::from(
            [p * h, p * h, 1e-1, p * h].map(|s| s * s),
        ));
        let hm = SMatrix::<f64, 4, 8>::identity();
        let s = hm * self.cov * hm.transpose() + r;
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::invalid("innovation covariance is not positive-definite"))?;
        // K = P Hᵀ S⁻¹, solved as S Kᵀ = H P
        let kt = chol.solve(&(hm * self.cov));
        let k = kt.transpose();
        self.mean += k * (z - hm * self.mean);
        let cov = self.cov - k * s * k.transpose();
        self.cov = (cov + cov.transpose()) * 0.5;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_velocity_prediction_keeps_the_box() {
        let n = KalmanNoise::default();
        let b = BBox::new(4.0, 6.0, 10.0, 20.0);
        let mut k = KalmanState::initiate(&b, &n);
        k.predict(&n).unwrap();
        let p = k.bbox();
        assert!((p.x - b.x).abs() < 1e-12 && (p.w - b.w).abs() < 1e-12);
    }

    #[test]
    fn constant_velocity_prediction() {
        let n = KalmanNoise::default();
        let mut k = KalmanState::initiate(&BBox::from_center(10.0, 5.0, 4.0, 8.0), &n);
        k.mean[4] = 2.0;
        k.predict(&n).unwrap();
        assert!((k.mean[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn update_at_prediction_shrinks_covariance() {
        let n = KalmanNoise::default();
        let mut k = KalmanState::initiate(&BBox::new(0.0, 0.0, 6.0, 12.0), &n);
        k.predict(&n).unwrap();
        let before = k.clone();
        let pred = k.bbox();
        k.update(&pred, &n).unwrap();
        for i in 0..8 {
            assert!((k.mean[i] - before.mean[i]).abs() < 1e-9);
        }
        assert!(k.cov.trace() < before.cov.trace());
    }

    #[test]
    fn rejects_non_psd_covariance() {
        let n = KalmanNoise::default();
        let mut k = KalmanState::initiate(&BBox::new(0.0, 0.0, 6.0, 12.0), &n);
        k.cov[(0, 0)] = -1.0;
        assert!(k.predict(&n).is_err());
    }

    #[test]
    fn covariance_stays_symmetric() {
        let n = KalmanNoise::default();
        let mut k = KalmanState::initiate(&BBox::new(0.0, 0.0, 6.0, 12.0), &n);
        for i in 0..1000 {
            k.predict(&n).unwrap();
            let x = (i as f64 * 0.37).sin() * 3.0;
            k.update(&BBox::new(x, 0.5 * x, 6.0, 12.0), &n).unwrap();
            assert!((k.cov - k.cov.transpose()).abs().max() < 1e-9);
        }
    }
}
