//! Plain forward kernels on `Tensor`. The tape records these same routines
//! and adds adjoints; keeping one forward implementation avoids drift between
//! tracked and untracked paths.

use super::Tensor;
use crate::error::{EdsError, Result};

/// C = A * B for 2-D operands. Inner dimensions must agree.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols(), b.rows(), "matmul inner dimension");
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0f32; m * n];
    let ad = a.data();
    let bd = b.data();
    // i-k-j order: the inner loop runs over contiguous rows of B and C.
    for i in 0..m {
        let crow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = ad[i * k + kk];
            let brow = &bd[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

pub fn transpose(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data()[i * n + j];
        }
    }
    Tensor::from_raw(vec![n, m], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add shape");
    zip_map(a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "sub shape");
    zip_map(a, b, |x, y| x - y)
}

pub fn mul_elem(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "mul shape");
    zip_map(a, b, |x, y| x * y)
}

pub fn scale(x: &Tensor, c: f32) -> Tensor {
    map(x, |v| v * c)
}

/// Add a length-n bias to every row of an m-by-n matrix.
pub fn add_row_broadcast(x: &Tensor, bias: &Tensor) -> Tensor {
    assert_eq!(x.cols(), bias.len(), "bias width");
    let n = x.cols();
    let mut out = x.data().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        *v += bias.data()[i % n];
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

/// Tanh-approximation GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    map(x, gelu_scalar)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, sigmoid_scalar)
}

pub fn abs(x: &Tensor) -> Tensor {
    map(x, f32::abs)
}

pub(crate) const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn gelu_scalar(v: f32) -> f32 {
    0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh())
}

pub(crate) fn gelu_grad_scalar(v: f32) -> f32 {
    let u = GELU_C * (v + 0.044715 * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
}

pub(crate) fn sigmoid_scalar(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out[i * n + j] = e;
            sum += e;
        }
        for j in 0..n {
            out[i * n + j] /= sum;
        }
    }
    Tensor::from_raw(x.shape().to_vec(), out)
}

/// Per-row layer norm with affine gain/bias over the feature axis.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let n = x.cols();
    if gain.len() != n || bias.len() != n {
        return Err(EdsError::shape(format!(
            "layer_norm affine width {} / {} vs features {}",
            gain.len(),
            bias.len(),
            n
        )));
    }
    let m = x.rows();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f32>() / n as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..n {
            out[i * n + j] = (row[j] - mean) * inv * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

/// Temporal mean: m-by-n input collapses to a 1-by-n row vector.
pub fn mean_rows(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0f32; n];
    for i in 0..m {
        for j in 0..n {
            out[j] += x.data()[i * n + j];
        }
    }
    for v in out.iter_mut() {
        *v /= m as f32;
    }
    Tensor::from_raw(vec![1, n], out)
}

pub fn row_sums(x: &Tensor) -> Tensor {
    let m = x.rows();
    let out = (0..m).map(|i| x.row(i).iter().sum()).collect();
    Tensor::from_raw(vec![m], out)
}

pub fn col_sums(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![0.0f32; n];
    for i in 0..m {
        for j in 0..n {
            out[j] += x.data()[i * n + j];
        }
    }
    Tensor::from_raw(vec![n], out)
}

/// Maximum element and the index of its first occurrence.
pub fn max_all(x: &Tensor) -> (f32, usize) {
    let mut best = f32::NEG_INFINITY;
    let mut at = 0;
    for (i, &v) in x.data().iter().enumerate() {
        if v > best {
            best = v;
            at = i;
        }
    }
    (best, at)
}

/// Mean of each contiguous row span in `bounds` (half-open, in order).
pub fn segment_mean_rows(x: &Tensor, bounds: &[(usize, usize)]) -> Tensor {
    let n = x.cols();
    let mut out = vec![0.0f32; bounds.len() * n];
    for (s, &(lo, hi)) in bounds.iter().enumerate() {
        debug_assert!(lo < hi && hi <= x.rows());
        let len = (hi - lo) as f32;
        for i in lo..hi {
            for j in 0..n {
                out[s * n + j] += x.data()[i * n + j];
            }
        }
        for j in 0..n {
            out[s * n + j] /= len;
        }
    }
    Tensor::from_raw(vec![bounds.len(), n], out)
}

/// Stride-2 transposed 1-D convolution with a width-2 kernel.
/// Input L-by-Cin, weights [2, Cin, Cout], output 2L-by-Cout:
/// out[2i+t, co] = sum_ci x[i, ci] * w[t, ci, co].
pub fn transposed_conv1d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 3 || w.shape()[0] != 2 {
        return Err(EdsError::shape(format!(
            "transposed_conv1d kernel shape {:?}, want [2, c_in, c_out]",
            w.shape()
        )));
    }
    let (c_in, c_out) = (w.shape()[1], w.shape()[2]);
    if x.cols() != c_in {
        return Err(EdsError::shape(format!(
            "transposed_conv1d input width {} vs kernel c_in {}",
            x.cols(),
            c_in
        )));
    }
    let l = x.rows();
    let mut out = vec![0.0f32; 2 * l * c_out];
    for i in 0..l {
        for t in 0..2 {
            let orow = &mut out[(2 * i + t) * c_out..(2 * i + t + 1) * c_out];
            for ci in 0..c_in {
                let xv = x.data()[i * c_in + ci];
                let wrow = &w.data()[(t * c_in + ci) * c_out..(t * c_in + ci + 1) * c_out];
                for co in 0..c_out {
                    orow[co] += xv * wrow[co];
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![2 * l, c_out], out))
}

pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Tensor {
    assert!(start + len <= x.rows(), "slice_rows out of range");
    let n = x.cols();
    let data = x.data()[start * n..(start + len) * n].to_vec();
    Tensor::from_raw(vec![len, n], data)
}

pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let n = parts[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        assert_eq!(p.cols(), n, "concat_rows width");
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::from_raw(vec![rows, n], data)
}

pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows(), b.rows(), "concat_cols height");
    let (m, na, nb) = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(m * (na + nb));
    for i in 0..m {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::from_raw(vec![m, na + nb], data)
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::from_raw(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_raw(a.shape().to_vec(), data)
}
