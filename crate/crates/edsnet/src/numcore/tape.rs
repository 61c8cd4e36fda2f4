//! Reverse-mode tape. Operations append nodes in execution order, so the
//! node list is already a topological order and the backward sweep is a
//! single reverse pass. One tape records one forward pass; training builds
//! a fresh tape per step.

use super::{fft, kernels, linalg, wavelet, Tensor};
use crate::error::{EdsError, Result};

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    MulElem(Var, Var),
    Scale(Var, f32),
    AddRowBroadcast(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f32 },
    MeanRows(Var),
    RowSums(Var),
    ColSums(Var),
    MaxAll { x: Var, argmax: usize },
    DivByScalar { x: Var, s: Var },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    Reshape(Var),
    HaarApproxRows(Var),
    HaarDetailRows(Var),
    TransposedConv { x: Var, w: Var },
    FourierMix(Var),
    DftRealTime(Var),
    SegmentMeanRows { x: Var, bounds: Vec<(usize, usize)> },
    Dropout { x: Var, mask: Vec<f32> },
    Inverse(Var),
    SumAll(Var),
    BceWithLogitsMean { logits: Var, targets: Vec<f32> },
    SmoothL1Mean { pred: Var, targets: Vec<f32> },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drop all nodes so the tape can record a fresh pass.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated for `v` by `backward`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // --- recorded operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = kernels::matmul(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = kernels::transpose(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = kernels::add(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = kernels::sub(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let value = kernels::mul_elem(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let value = kernels::scale(self.value(x), c);
        let ng = self.needs(x);
        self.push(value, ng, Op::Scale(x, c))
    }

    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let value = kernels::add_row_broadcast(self.value(x), self.value(bias));
        let ng = self.needs(x) || self.needs(bias);
        self.push(value, ng, Op::AddRowBroadcast(x, bias))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = kernels::relu(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = kernels::gelu(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = kernels::sigmoid(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = kernels::abs(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::Abs(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = kernels::softmax_rows(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Var {
        let value =
            kernels::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)
                .expect("layer_norm affine width checked at model build");
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(value, ng, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = kernels::mean_rows(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::MeanRows(x))
    }

    pub fn row_sums(&mut self, x: Var) -> Var {
        let value = kernels::row_sums(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::RowSums(x))
    }

    pub fn col_sums(&mut self, x: Var) -> Var {
        let value = kernels::col_sums(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::ColSums(x))
    }

    /// Scalar maximum over all elements.
    pub fn max_all(&mut self, x: Var) -> Var {
        let (m, argmax) = kernels::max_all(self.value(x));
        let ng = self.needs(x);
        self.push(Tensor::scalar(m), ng, Op::MaxAll { x, argmax })
    }

    /// Divide every element of `x` by the scalar node `s`.
    pub fn div_by_scalar(&mut self, x: Var, s: Var) -> Var {
        debug_assert_eq!(self.value(s).len(), 1, "div_by_scalar takes a scalar");
        let sv = self.value(s).data()[0];
        let value = kernels::scale(self.value(x), 1.0 / sv);
        let ng = self.needs(x) || self.needs(s);
        self.push(value, ng, Op::DivByScalar { x, s })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = kernels::slice_rows(self.value(x), start, len);
        let ng = self.needs(x);
        self.push(value, ng, Op::SliceRows { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = kernels::concat_rows(&tensors);
        let ng = parts.iter().any(|&v| self.needs(v));
        self.push(value, ng, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = kernels::concat_cols(self.value(a), self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, ng, Op::ConcatCols(a, b))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self
            .value(x)
            .reshaped(shape)
            .expect("reshape element count checked by caller");
        let ng = self.needs(x);
        self.push(value, ng, Op::Reshape(x))
    }

    pub fn haar_approx_rows(&mut self, x: Var) -> Var {
        let value = wavelet::haar_approx_rows(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::HaarApproxRows(x))
    }

    pub fn haar_detail_rows(&mut self, x: Var) -> Var {
        let value = wavelet::haar_detail_rows(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::HaarDetailRows(x))
    }

    pub fn transposed_conv1d(&mut self, x: Var, w: Var) -> Var {
        let value = kernels::transposed_conv1d(self.value(x), self.value(w))
            .expect("conv shapes checked at model build");
        let ng = self.needs(x) || self.needs(w);
        self.push(value, ng, Op::TransposedConv { x, w })
    }

    pub fn fourier_mix(&mut self, x: Var) -> Var {
        let value = fft::fourier_mix_kernel(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::FourierMix(x))
    }

    pub fn dft_real_time(&mut self, x: Var) -> Var {
        let value = fft::dft_real_time_kernel(self.value(x));
        let ng = self.needs(x);
        self.push(value, ng, Op::DftRealTime(x))
    }

    pub fn segment_mean_rows(&mut self, x: Var, bounds: Vec<(usize, usize)>) -> Var {
        let value = kernels::segment_mean_rows(self.value(x), &bounds);
        let ng = self.needs(x);
        self.push(value, ng, Op::SegmentMeanRows { x, bounds })
    }

    /// Inverted dropout: elements are zeroed with probability `rate` and the
    /// survivors are scaled by 1/(1-rate), so the expectation is unchanged.
    pub fn dropout(&mut self, x: Var, rate: f32, rng: &mut impl rand::Rng) -> Var {
        debug_assert!((0.0..1.0).contains(&rate));
        let keep = 1.0 - rate;
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::from_raw(self.value(x).shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(value, ng, Op::Dropout { x, mask })
    }

    /// Exact inverse of a square full-rank matrix.
    pub fn inverse(&mut self, x: Var) -> Result<Var> {
        let value = linalg::gauss_jordan_inverse(self.value(x))?;
        let ng = self.needs(x);
        Ok(self.push(value, ng, Op::Inverse(x)))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), ng, Op::SumAll(x))
    }

    /// Mean binary cross-entropy evaluated from logits in the numerically
    /// stable form max(z,0) - z*t + ln(1 + exp(-|z|)).
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Vec<f32>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.len(), targets.len(), "bce target count");
        let mut acc = 0.0f64;
        for (&zv, &t) in z.data().iter().zip(&targets) {
            let zv = zv as f64;
            acc += zv.max(0.0) - zv * t as f64 + (-zv.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar((acc / targets.len() as f64) as f32);
        let ng = self.needs(logits);
        self.push(value, ng, Op::BceWithLogitsMean { logits, targets })
    }

    /// Mean smooth-L1 (delta = 1) over all elements.
    pub fn smooth_l1_mean(&mut self, pred: Var, targets: Vec<f32>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.len(), targets.len(), "smooth_l1 target count");
        let mut acc = 0.0f64;
        for (&pv, &t) in p.data().iter().zip(&targets) {
            let e = (pv - t).abs() as f64;
            acc += if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
        }
        let value = Tensor::scalar((acc / targets.len() as f64) as f32);
        let ng = self.needs(pred);
        self.push(value, ng, Op::SmoothL1Mean { pred, targets })
    }

    // --- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss. Errors if the loss is not scalar,
    /// if nothing upstream is tracked, or if called twice without `clear`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(EdsError::invalid(
                "backward already ran on this tape; clear() before reuse",
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(EdsError::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(EdsError::invalid(
                "loss is detached: no tracked leaf reaches it",
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &mut tail[0];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            Self::dispatch(head, &node.value, &node.op, &g);
            node.grad = Some(g);
        }
        Ok(())
    }

    /// Propagate the output gradient `g` of one node into its inputs.
    /// Inputs always precede the node, so they live in `head`.
    fn dispatch(head: &mut [Node], out_value: &Tensor, op: &Op, g: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let gt = Tensor::from_raw(out_value.shape().to_vec(), g.to_vec());
                let da = kernels::matmul(&gt, &kernels::transpose(&head[b.0].value));
                let db = kernels::matmul(&kernels::transpose(&head[a.0].value), &gt);
                acc(head, *a, da.data());
                acc(head, *b, db.data());
            }
            Op::Transpose(x) => {
                let gt = Tensor::from_raw(out_value.shape().to_vec(), g.to_vec());
                acc(head, *x, kernels::transpose(&gt).data());
            }
            Op::Add(a, b) => {
                acc(head, *a, g);
                acc(head, *b, g);
            }
            Op::Sub(a, b) => {
                acc(head, *a, g);
                if head[b.0].needs_grad {
                    let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                    acc(head, *b, &neg);
                }
            }
            Op::MulElem(a, b) => {
                if head[a.0].needs_grad {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(head[b.0].value.data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    acc(head, *a, &da);
                }
                if head[b.0].needs_grad {
                    let db: Vec<f32> = g
                        .iter()
                        .zip(head[a.0].value.data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    acc(head, *b, &db);
                }
            }
            Op::Scale(x, c) => {
                let dx: Vec<f32> = g.iter().map(|v| v * c).collect();
                acc(head, *x, &dx);
            }
            Op::AddRowBroadcast(x, bias) => {
                acc(head, *x, g);
                if head[bias.0].needs_grad {
                    let n = head[bias.0].value.len();
                    let mut db = vec![0.0f32; n];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    acc(head, *bias, &db);
                }
            }
            Op::Relu(x) => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(head[x.0].value.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(head, *x, &dx);
            }
            Op::Gelu(x) => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(head[x.0].value.data())
                    .map(|(&gv, &xv)| gv * kernels::gelu_grad_scalar(xv))
                    .collect();
                acc(head, *x, &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(out_value.data())
                    .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                acc(head, *x, &dx);
            }
            Op::Abs(x) => {
                let dx: Vec<f32> = g
                    .iter()
                    .zip(head[x.0].value.data())
                    .map(|(&gv, &xv)| gv * xv.signum() * if xv == 0.0 { 0.0 } else { 1.0 })
                    .collect();
                acc(head, *x, &dx);
            }
            Op::SoftmaxRows(x) => {
                // dx = y * (g - <g, y>) per row.
                let (m, n) = (out_value.rows(), out_value.cols());
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    let y = out_value.row(i);
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f32 = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..n {
                        dx[i * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                acc(head, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = &head[x.0].value;
                let gv = &head[gain.0].value;
                let (m, n) = (xv.rows(), xv.cols());
                let nf = n as f32;
                let mut dx = vec![0.0f32; m * n];
                let mut dgain = vec![0.0f32; n];
                let mut dbias = vec![0.0f32; n];
                for i in 0..m {
                    let row = xv.row(i);
                    let gr = &g[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f32>() / nf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat, then the two row means the adjoint needs.
                    let mut sum_dxh = 0.0f32;
                    let mut sum_dxh_xh = 0.0f32;
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let dxh = gr[j] * gv.data()[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                        dgain[j] += gr[j] * xh;
                        dbias[j] += gr[j];
                    }
                    for j in 0..n {
                        let xh = (row[j] - mean) * inv;
                        let dxh = gr[j] * gv.data()[j];
                        dx[i * n + j] = inv * (dxh - sum_dxh / nf - xh * sum_dxh_xh / nf);
                    }
                }
                acc(head, *x, &dx);
                acc(head, *gain, &dgain);
                acc(head, *bias, &dbias);
            }
            Op::MeanRows(x) => {
                let (m, n) = (head[x.0].value.rows(), head[x.0].value.cols());
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j] / m as f32;
                    }
                }
                acc(head, *x, &dx);
            }
            Op::RowSums(x) => {
                let (m, n) = (head[x.0].value.rows(), head[x.0].value.cols());
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[i];
                    }
                }
                acc(head, *x, &dx);
            }
            Op::ColSums(x) => {
                let (m, n) = (head[x.0].value.rows(), head[x.0].value.cols());
                let mut dx = vec![0.0f32; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j];
                    }
                }
                acc(head, *x, &dx);
            }
            Op::MaxAll { x, argmax } => {
                let mut dx = vec![0.0f32; head[x.0].value.len()];
                dx[*argmax] = g[0];
                acc(head, *x, &dx);
            }
            Op::DivByScalar { x, s } => {
                let sv = head[s.0].value.data()[0];
                if head[x.0].needs_grad {
                    let dx: Vec<f32> = g.iter().map(|v| v / sv).collect();
                    acc(head, *x, &dx);
                }
                if head[s.0].needs_grad {
                    // d/ds (x/s) = -x/s^2; contract with g.
                    let xd = head[x.0].value.data();
                    let ds: f32 = g
                        .iter()
                        .zip(xd)
                        .map(|(&gv, &xv)| -gv * xv / (sv * sv))
                        .sum();
                    acc(head, *s, &[ds]);
                }
            }
            Op::SliceRows { x, start } => {
                let n = head[x.0].value.cols();
                let mut dx = vec![0.0f32; head[x.0].value.len()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                acc(head, *x, &dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = head[p.0].value.len();
                    if head[p.0].needs_grad {
                        acc(head, p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = (head[a.0].value.rows(), head[a.0].value.cols());
                let nb = head[b.0].value.cols();
                let n = na + nb;
                if head[a.0].needs_grad {
                    let mut da = vec![0.0f32; m * na];
                    for i in 0..m {
                        da[i * na..(i + 1) * na].copy_from_slice(&g[i * n..i * n + na]);
                    }
                    acc(head, *a, &da);
                }
                if head[b.0].needs_grad {
                    let mut db = vec![0.0f32; m * nb];
                    for i in 0..m {
                        db[i * nb..(i + 1) * nb].copy_from_slice(&g[i * n + na..(i + 1) * n]);
                    }
                    acc(head, *b, &db);
                }
            }
            Op::Reshape(x) => {
                acc(head, *x, g);
            }
            Op::HaarApproxRows(x) => {
                let n = head[x.0].value.cols();
                let half = out_value.rows();
                let c = std::f32::consts::FRAC_1_SQRT_2;
                let mut dx = vec![0.0f32; head[x.0].value.len()];
                for i in 0..half {
                    for j in 0..n {
                        let gv = g[i * n + j] * c;
                        dx[(2 * i) * n + j] += gv;
                        dx[(2 * i + 1) * n + j] += gv;
                    }
                }
                acc(head, *x, &dx);
            }
            Op::HaarDetailRows(x) => {
                let n = head[x.0].value.cols();
                let half = out_value.rows();
                let c = std::f32::consts::FRAC_1_SQRT_2;
                let mut dx = vec![0.0f32; head[x.0].value.len()];
                for i in 0..half {
                    for j in 0..n {
                        let gv = g[i * n + j] * c;
                        dx[(2 * i) * n + j] += gv;
                        dx[(2 * i + 1) * n + j] -= gv;
                    }
                }
                acc(head, *x, &dx);
            }
            Op::TransposedConv { x, w } => {
                let (need_x, need_w) = (head[x.0].needs_grad, head[w.0].needs_grad);
                let (dx, dw) = {
                    let xv = &head[x.0].value;
                    let wv = &head[w.0].value;
                    let l = xv.rows();
                    let (c_in, c_out) = (wv.shape()[1], wv.shape()[2]);
                    let mut dx = if need_x { vec![0.0f32; l * c_in] } else { Vec::new() };
                    let mut dw = if need_w { vec![0.0f32; 2 * c_in * c_out] } else { Vec::new() };
                    for i in 0..l {
                        for t in 0..2 {
                            let gr = &g[(2 * i + t) * c_out..(2 * i + t + 1) * c_out];
                            for ci in 0..c_in {
                                let base = (t * c_in + ci) * c_out;
                                if need_x {
                                    let wrow = &wv.data()[base..base + c_out];
                                    let mut s = 0.0f32;
                                    for co in 0..c_out {
                                        s += gr[co] * wrow[co];
                                    }
                                    dx[i * c_in + ci] += s;
                                }
                                if need_w {
                                    let xv_i = xv.data()[i * c_in + ci];
                                    let drow = &mut dw[base..base + c_out];
                                    for co in 0..c_out {
                                        drow[co] += xv_i * gr[co];
                                    }
                                }
                            }
                        }
                    }
                    (dx, dw)
                };
                if need_x {
                    acc(head, *x, &dx);
                }
                if need_w {
                    acc(head, *w, &dw);
                }
            }
            Op::FourierMix(x) => {
                let gt = Tensor::from_raw(out_value.shape().to_vec(), g.to_vec());
                acc(head, *x, fft::fourier_mix_kernel(&gt).data());
            }
            Op::DftRealTime(x) => {
                let gt = Tensor::from_raw(out_value.shape().to_vec(), g.to_vec());
                acc(head, *x, fft::dft_real_time_kernel(&gt).data());
            }
            Op::SegmentMeanRows { x, bounds } => {
                let n = head[x.0].value.cols();
                let mut dx = vec![0.0f32; head[x.0].value.len()];
                for (s, &(lo, hi)) in bounds.iter().enumerate() {
                    let len = (hi - lo) as f32;
                    for i in lo..hi {
                        for j in 0..n {
                            dx[i * n + j] += g[s * n + j] / len;
                        }
                    }
                }
                acc(head, *x, &dx);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f32> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                acc(head, *x, &dx);
            }
            Op::Inverse(x) => {
                // Y = X^-1, dX = -Y^T G Y^T.
                let y = out_value;
                let gt = Tensor::from_raw(y.shape().to_vec(), g.to_vec());
                let yt = kernels::transpose(y);
                let dx = kernels::scale(&kernels::matmul(&kernels::matmul(&yt, &gt), &yt), -1.0);
                acc(head, *x, dx.data());
            }
            Op::SumAll(x) => {
                let dx = vec![g[0]; head[x.0].value.len()];
                acc(head, *x, &dx);
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let n = targets.len() as f32;
                let dz: Vec<f32> = head[logits.0]
                    .value
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&zv, &t)| g[0] * (kernels::sigmoid_scalar(zv) - t) / n)
                    .collect();
                acc(head, *logits, &dz);
            }
            Op::SmoothL1Mean { pred, targets } => {
                let n = targets.len() as f32;
                let dp: Vec<f32> = head[pred.0]
                    .value
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&pv, &t)| g[0] * (pv - t).clamp(-1.0, 1.0) / n)
                    .collect();
                acc(head, *pred, &dp);
            }
        }
    }
}

/// Accumulate `contrib` into the gradient slot of `v`, allocating on first
/// touch. No-op for untracked nodes.
fn acc(head: &mut [Node], v: Var, contrib: &[f32]) {
    let node = &mut head[v.0];
    if !node.needs_grad {
        return;
    }
    match &mut node.grad {
        Some(gr) => {
            for (a, b) in gr.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => node.grad = Some(contrib.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::testutil::{grad_check, weighted_sum};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        Tensor::uniform(rng, shape, 1.0)
    }

    #[test]
    fn backward_through_scale_and_add() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.scale(x, 3.0);
        let z = tape.add(y, x);
        let loss = tape.sum_all(z);
        assert_eq!(tape.value(loss).data()[0], 12.0);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let y = tape.scale(x, 2.0);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn backward_on_detached_graph_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(2.0));
        let loss = tape.sum_all(x);
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn fd_matmul_and_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let a = rand_t(&mut rng, vec![3, 4]);
            let b = rand_t(&mut rng, vec![4, 2]);
            grad_check(
                |tape, vs| {
                    let bt = tape.transpose(vs[1]);
                    let btt = tape.transpose(bt);
                    let y = tape.matmul(vs[0], btt);
                    weighted_sum(tape, y)
                },
                &[a, b],
                1e-3,
            );
        }
    }

    #[test]
    fn fd_elementwise_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let x = rand_t(&mut rng, vec![2, 5]);
            grad_check(
                |tape, vs| {
                    let r = tape.relu(vs[0]);
                    let gl = tape.gelu(r);
                    let s = tape.sigmoid(gl);
                    weighted_sum(tape, s)
                },
                &[x],
                1e-3,
            );
        }
    }

    #[test]
    fn fd_softmax_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let x = rand_t(&mut rng, vec![3, 4]);
            grad_check(
                |tape, vs| {
                    let y = tape.softmax_rows(vs[0]);
                    weighted_sum(tape, y)
                },
                &[x],
                1e-3,
            );
        }
    }

    #[test]
    fn fd_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let x = rand_t(&mut rng, vec![3, 6]);
            let gain = rand_t(&mut rng, vec![6]);
            let bias = rand_t(&mut rng, vec![6]);
            grad_check(
                |tape, vs| {
                    let y = tape.layer_norm(vs[0], vs[1], vs[2], 1e-5);
                    weighted_sum(tape, y)
                },
                &[x, gain, bias],
                1e-3,
            );
        }
    }

    #[test]
    fn fd_reductions_and_broadcast() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let x = rand_t(&mut rng, vec![4, 3]);
            let bias = rand_t(&mut rng, vec![3]);
            grad_check(
                |tape, vs| {
                    let xb = tape.add_row_broadcast(vs[0], vs[1]);
                    let m = tape.mean_rows(xb);
                    let rs = tape.row_sums(xb);
                    let cs = tape.col_sums(xb);
                    let s1 = weighted_sum(tape, m);
                    let s2 = weighted_sum(tape, rs);
                    let s3 = weighted_sum(tape, cs);
                    let t = tape.add(s1, s2);
                    tape.add(t, s3)
                },
                &[x, bias],
                1e-3,
            );
        }
    }

    #[test]
    fn fd_max_and_div_by_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            // Shift keeps elements distinct so argmax is stable under +-h.
            let mut x = rand_t(&mut rng, vec![2, 3]);
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                *v += i as f32 * 0.01;
            }
            let y = rand_t(&mut rng, vec![2, 3]);
            grad_check(
                |tape, vs| {
                    let a = tape.abs(vs[0]);
                    let mx = tape.max_all(a);
                    let d = tape.div_by_scalar(vs[1], mx);
                    weighted_sum(tape, d)
                },
                &[x, y],
                1e-3,
            );
        }
    }

    #[test]
    fn fd_slice_concat_reshape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let x = rand_t(&mut rng, vec![4, 3]);
            let y = rand_t(&mut rng, vec![2, 3]);
            grad_check(
                |tape, vs| {
                    let s = tape.slice_rows(vs[0], 1, 2);
                    let c = tape.concat_rows(&[s, vs[1]]);
                    let cc = tape.concat_cols(c, c);
                    let r = tape.reshape(cc, vec![2, 12]);
                    weighted_sum(tape, r)
                },
                &[x, y],
                1e-3,
            );
        }
    }

    #[test]
    fn fd_haar_and_transposed_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let x = rand_t(&mut rng, vec![4, 3]);
            let w = rand_t(&mut rng, vec![2, 3, 2]);
            grad_check(
                |tape, vs| {
                    let a = tape.haar_approx_rows(vs[0]);
                    let d = tape.haar_detail_rows(vs[0]);
                    let cat = tape.concat_cols(a, d);
                    let r = tape.reshape(cat, vec![4, 3]);
                    let y = tape.transposed_conv1d(r, vs[1]);
                    weighted_sum(tape, y)
                },
                &[x, w],
                1e-3,
            );
        }
    }

    #[test]
    fn fd_spectral_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let x = rand_t(&mut rng, vec![6, 4]);
            grad_check(
                |tape, vs| {
                    let f = tape.fourier_mix(vs[0]);
                    let d = tape.dft_real_time(vs[0]);
                    let s1 = weighted_sum(tape, f);
                    let s2 = weighted_sum(tape, d);
                    tape.add(s1, s2)
                },
                &[x],
                1e-3,
            );
        }
    }

    #[test]
    fn fd_segment_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_t(&mut rng, vec![7, 3]);
        grad_check(
            |tape, vs| {
                let m = tape.segment_mean_rows(vs[0], vec![(0, 2), (2, 5), (5, 7)]);
                weighted_sum(tape, m)
            },
            &[x],
            1e-3,
        );
    }

    #[test]
    fn fd_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            // Diagonally dominant, comfortably invertible.
            let n = 3;
            let mut x = rand_t(&mut rng, vec![n, n]);
            for i in 0..n {
                x.data_mut()[i * n + i] += 3.0;
            }
            grad_check(
                |tape, vs| {
                    let inv = tape.inverse(vs[0]).unwrap();
                    weighted_sum(tape, inv)
                },
                &[x],
                1e-3,
            );
        }
    }

    #[test]
    fn fd_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            let z = rand_t(&mut rng, vec![6]);
            let p = rand_t(&mut rng, vec![4]);
            let targets = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
            let offs = vec![0.3, -0.2, 1.5, 0.1];
            grad_check(
                |tape, vs| {
                    let t1 = targets.clone();
                    let t2 = offs.clone();
                    let a = tape.bce_with_logits_mean(vs[0], t1);
                    let b = tape.smooth_l1_mean(vs[1], t2);
                    tape.add(a, b)
                },
                &[z, p],
                1e-3,
            );
        }
    }

    #[test]
    fn fd_dropout_mask_is_applied_in_backward() {
        // Fixed mask: gradients must be zero exactly where activations were dropped.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = rand_t(&mut rng, vec![10, 10]);
        let mut tape = Tape::new();
        let v = tape.leaf(x, true);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(99);
        let d = tape.dropout(v, 0.5, &mut drop_rng);
        let dval = tape.value(d).data().to_vec();
        let loss = tape.sum_all(d);
        tape.backward(loss).unwrap();
        let g = tape.grad(v).unwrap();
        for i in 0..100 {
            if dval[i] == 0.0 {
                assert_eq!(g[i], 0.0);
            } else {
                assert!((g[i] - 2.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dropout_masks_about_half_at_rate_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::from_vec(vec![100, 100], vec![1.0; 10_000]).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let d = tape.dropout(v, 0.5, &mut rng);
        let zeros = tape.value(d).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.03, "masked fraction {frac}");
        // Survivors are scaled by 2 so the expectation is preserved.
        let mean: f64 = tape.value(d).data().iter().map(|&v| v as f64).sum::<f64>() / 10_000.0;
        assert!((mean - 1.0).abs() < 0.06, "post-dropout mean {mean}");
    }
}
