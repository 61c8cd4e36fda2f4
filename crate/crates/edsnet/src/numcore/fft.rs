//! Discrete Fourier transforms. Power-of-two lengths go through an iterative
//! radix-2 FFT; everything else falls back to the direct O(n^2) transform
//! with f64 accumulation.

use super::Tensor;
use crate::error::{EdsError, Result};

/// Split-storage complex sequence produced by `dft_1d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSequence {
    pub re: Vec<f32>,
    pub im: Vec<f32>,
}

impl ComplexSequence {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }
}

/// Unnormalized forward DFT of a real sequence:
/// X[k] = sum_j x[j] * exp(-2*pi*i*j*k/n).
pub fn dft_1d(x: &[f32]) -> ComplexSequence {
    let n = x.len();
    let mut re = x.to_vec();
    let mut im = vec![0.0f32; n];
    transform(&mut re, &mut im, false);
    ComplexSequence { re, im }
}

/// Inverse DFT with 1/n normalization; returns the real part.
/// Round-trips `dft_1d` on real input.
pub fn idft_1d(spec: &ComplexSequence) -> Result<Vec<f32>> {
    if spec.re.len() != spec.im.len() {
        return Err(EdsError::shape(format!(
            "complex sequence with {} real and {} imaginary parts",
            spec.re.len(),
            spec.im.len()
        )));
    }
    let n = spec.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut re = spec.re.clone();
    let mut im = spec.im.clone();
    transform(&mut re, &mut im, true);
    let scale = 1.0 / n as f32;
    Ok(re.iter().map(|v| v * scale).collect())
}

/// In-place complex DFT, dispatching on length.
pub(crate) fn transform(re: &mut [f32], im: &mut [f32], inverse: bool) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_radix2(re, im, inverse);
    } else {
        dft_direct(re, im, inverse);
    }
}

/// Iterative radix-2 FFT (bit-reversal permutation, then butterflies).
/// Caller guarantees a power-of-two length.
fn fft_radix2(re: &mut [f32], im: &mut [f32], inverse: bool) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    let levels = n.trailing_zeros();

    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - levels)) as usize;
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }

    let sign = if inverse { 1.0f64 } else { -1.0f64 };
    let mut len = 2;
    while len <= n {
        let ang = sign * std::f64::consts::TAU / len as f64;
        let (wr, wi) = (ang.cos() as f32, ang.sin() as f32);
        for start in (0..n).step_by(len) {
            let mut cr = 1.0f32;
            let mut ci = 0.0f32;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let tr = re[b] * cr - im[b] * ci;
                let ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
        len <<= 1;
    }
}

/// Direct transform for awkward lengths. f64 accumulation keeps the error
/// well under the f32 tolerances for sequences into the thousands.
fn dft_direct(re: &mut [f32], im: &mut [f32], inverse: bool) {
    let n = re.len();
    let sign = if inverse { 1.0f64 } else { -1.0f64 };
    let step = sign * std::f64::consts::TAU / n as f64;
    let mut out_re = vec![0.0f32; n];
    let mut out_im = vec![0.0f32; n];
    for k in 0..n {
        let mut sr = 0.0f64;
        let mut si = 0.0f64;
        for j in 0..n {
            // j*k mod n keeps the angle argument small.
            let ang = step * ((j * k) % n) as f64;
            let (s, c) = ang.sin_cos();
            let (xr, xi) = (re[j] as f64, im[j] as f64);
            sr += xr * c - xi * s;
            si += xr * s + xi * c;
        }
        out_re[k] = sr as f32;
        out_im[k] = si as f32;
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

/// Two-dimensional token mixing: DFT along the embedding axis, then along
/// the sequence axis, keeping the real part once at the end. Linear and
/// self-adjoint, so the backward pass applies the same map to the gradient.
pub(crate) fn fourier_mix_kernel(x: &Tensor) -> Tensor {
    let (n, f) = (x.rows(), x.cols());
    let mut re = x.data().to_vec();
    let mut im = vec![0.0f32; n * f];

    for i in 0..n {
        transform(&mut re[i * f..(i + 1) * f], &mut im[i * f..(i + 1) * f], false);
    }

    // Sequence axis: gather each column, transform, keep the real part.
    let mut col_re = vec![0.0f32; n];
    let mut col_im = vec![0.0f32; n];
    let mut out = vec![0.0f32; n * f];
    for j in 0..f {
        for i in 0..n {
            col_re[i] = re[i * f + j];
            col_im[i] = im[i * f + j];
        }
        transform(&mut col_re, &mut col_im, false);
        for i in 0..n {
            out[i * f + j] = col_re[i];
        }
    }
    Tensor::from_raw(vec![n, f], out)
}

/// Per-channel real spectrum along time: column c of the output is
/// Re(DFT(x[:, c])). Also linear and self-adjoint.
pub(crate) fn dft_real_time_kernel(x: &Tensor) -> Tensor {
    let (l, h) = (x.rows(), x.cols());
    let mut col_re = vec![0.0f32; l];
    let mut col_im = vec![0.0f32; l];
    let mut out = vec![0.0f32; l * h];
    for c in 0..h {
        for i in 0..l {
            col_re[i] = x.data()[i * h + c];
            col_im[i] = 0.0;
        }
        transform(&mut col_re, &mut col_im, false);
        for i in 0..l {
            out[i * h + c] = col_re[i];
        }
    }
    Tensor::from_raw(vec![l, h], out)
}
