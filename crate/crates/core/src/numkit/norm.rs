use super::Tensor;
use crate::error::{Error, Result};

/// Group normalization with identity affine: zero mean and unit variance
/// over `(h, w, channels in group)`.
pub fn group_norm(input: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::invalid(format!(
            "{c} channels not divisible into {groups} groups"
        )));
    }
    let cg = c / groups;
    let n = (h * w * cg) as f64;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for g in 0..groups {
        let lo = g * cg;
        let mut sum = 0.0;
        for px in x.chunks(c) {
            for v in &px[lo..lo + cg] {
                sum += v;
            }
        }
        let mean = sum / n;
        let mut var = 0.0;
        for px in x.chunks(c) {
            for v in &px[lo..lo + cg] {
                var += (v - mean) * (v - mean);
            }
        }
        var /= n;
        let denom = (var + eps).sqrt();
        for (o, px) in out.chunks_mut(c).zip(x.chunks(c)) {
            for k in lo..lo + cg {
                o[k] = if denom > 0.0 {
                    (px[k] - mean) / denom
                } else {
                    0.0
                };
            }
        }
    }
    Ok(Tensor::from_raw(vec![h, w, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full(&[3, 3, 4], 2.5);
        let y = group_norm(&x, 2, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        // eps = 0 still yields zeros rather than NaN
        let y = group_norm(&x, 2, 0.0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_values_map_to_plus_minus_one() {
        let x = Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(group_norm(&x, 1, 0.0).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn groups_equal_channels_is_instance_norm() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap();
        let y = group_norm(&x, 2, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn indivisible_channels_rejected() {
        assert!(group_norm(&Tensor::zeros(&[1, 1, 3]), 2, 1e-5).is_err());
    }
}
