//! Single-level orthonormal Haar transform. The 1/sqrt(2) normalization
//! makes the analysis matrix orthogonal, so energy is preserved exactly and
//! the inverse is the transpose.

use super::Tensor;
use crate::error::{EdsError, Result};

const INV_SQRT2: f32 = std::f32::consts::FRAC_1_SQRT_2;

/// One analysis level over an even-length sequence:
/// a[i] = (x[2i] + x[2i+1]) / sqrt(2), d[i] = (x[2i] - x[2i+1]) / sqrt(2).
pub fn haar_dwt_1level(x: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    if x.len() % 2 != 0 {
        return Err(EdsError::invalid(format!(
            "haar transform needs an even length, got {}",
            x.len()
        )));
    }
    let half = x.len() / 2;
    let mut a = Vec::with_capacity(half);
    let mut d = Vec::with_capacity(half);
    for i in 0..half {
        a.push((x[2 * i] + x[2 * i + 1]) * INV_SQRT2);
        d.push((x[2 * i] - x[2 * i + 1]) * INV_SQRT2);
    }
    Ok((a, d))
}

/// Exact inverse of `haar_dwt_1level`.
pub fn haar_idwt_1level(a: &[f32], d: &[f32]) -> Result<Vec<f32>> {
    if a.len() != d.len() {
        return Err(EdsError::shape(format!(
            "approx/detail length mismatch: {} vs {}",
            a.len(),
            d.len()
        )));
    }
    let mut x = Vec::with_capacity(2 * a.len());
    for i in 0..a.len() {
        x.push((a[i] + d[i]) * INV_SQRT2);
        x.push((a[i] - d[i]) * INV_SQRT2);
    }
    Ok(x)
}

/// Row-pair approximation band of an even-height matrix: each channel
/// (column) is transformed along time independently.
pub(crate) fn haar_approx_rows(x: &Tensor) -> Tensor {
    haar_band_rows(x, 1.0)
}

/// Row-pair detail band.
pub(crate) fn haar_detail_rows(x: &Tensor) -> Tensor {
    haar_band_rows(x, -1.0)
}

fn haar_band_rows(x: &Tensor, sign: f32) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    debug_assert!(m % 2 == 0, "haar band on odd height");
    let half = m / 2;
    let mut out = vec![0.0f32; half * n];
    for i in 0..half {
        let top = x.row(2 * i);
        let bot = x.row(2 * i + 1);
        for j in 0..n {
            out[i * n + j] = (top[j] + sign * bot[j]) * INV_SQRT2;
        }
    }
    Tensor::from_raw(vec![half, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_signal_has_zero_detail() {
        let (a, d) = haar_dwt_1level(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        let s2 = std::f32::consts::SQRT_2;
        assert!((a[0] - s2).abs() < 1e-6 && (a[1] - s2).abs() < 1e-6);
        assert!(d[0].abs() < 1e-6 && d[1].abs() < 1e-6);
    }

    #[test]
    fn alternating_signal_is_pure_detail() {
        let (a, d) = haar_dwt_1level(&[1.0, -1.0]).unwrap();
        assert!(a[0].abs() < 1e-6);
        assert!((d[0] - std::f32::consts::SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn odd_length_rejected() {
        assert!(haar_dwt_1level(&[1.0, 2.0, 3.0]).is_err());
        assert!(haar_idwt_1level(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn round_trip_and_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n in &[2usize, 8, 64, 500, 1024] {
            let x: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (a, d) = haar_dwt_1level(&x).unwrap();
            let back = haar_idwt_1level(&a, &d).unwrap();
            for (u, v) in x.iter().zip(&back) {
                assert!((u - v).abs() < 1e-5);
            }
            let ex: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
            let eb: f64 = a
                .iter()
                .chain(&d)
                .map(|&v| (v as f64).powi(2))
                .sum();
            assert!((ex - eb).abs() / ex.max(1.0) < 1e-5, "energy n={n}");
        }
    }

    #[test]
    fn row_bands_match_columnwise_1d_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = Tensor::uniform(&mut rng, vec![6, 3], 1.0);
        let a = haar_approx_rows(&x);
        let d = haar_detail_rows(&x);
        for c in 0..3 {
            let col: Vec<f32> = (0..6).map(|i| x.at(i, c)).collect();
            let (wa, wd) = haar_dwt_1level(&col).unwrap();
            for i in 0..3 {
                assert!((a.at(i, c) - wa[i]).abs() < 1e-6);
                assert!((d.at(i, c) - wd[i]).abs() < 1e-6);
            }
        }
    }
}
