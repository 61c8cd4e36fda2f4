//! Slow f64 reference route used to certify the tape's analytic gradients.
//!
//! The full forward pass and loss are written out again here as plain dense
//! loops over f64 buffers, with no calls into the tape or the f32 kernels.
//! `gradient_check` perturbs a f64 snapshot of the parameters, takes central
//! differences of this route, and compares them against the analytic
//! gradients of the production route. Index plumbing (anchor geometry, row
//! clipping, landmark spans) is shared so both routes walk the same graph
//! shape; the arithmetic is not.

use std::f64::consts::{FRAC_1_SQRT_2, TAU};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::config::{MixerKind, PoolingKind, RunConfig};
use crate::error::{EdsError, Result};
use crate::mixers::{segment_bounds, PinvMode, LN_EPS};
use crate::numcore::kernels::GELU_C;
use crate::numcore::{Tape, Tensor};
use crate::pooling::{clip_span, model_fwd, ModelParams};
use crate::proposals::{
    assign_labels, generate_anchors, AnchorConfig, GtSegment, Label, LabeledProposal,
};
use crate::train::multi_task_loss;

// --- dense f64 matrix ----------------------------------------------------

#[derive(Clone)]
struct M {
    r: usize,
    c: usize,
    d: Vec<f64>,
}

impl M {
    fn zeros(r: usize, c: usize) -> M {
        M {
            r,
            c,
            d: vec![0.0; r * c],
        }
    }

    /// Rank-1 tensors widen to a single row.
    fn from_tensor(t: &Tensor) -> M {
        M {
            r: t.rows(),
            c: t.cols(),
            d: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    fn t(&self) -> M {
        let mut out = M::zeros(self.c, self.r);
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[j * self.r + i] = self.at(i, j);
            }
        }
        out
    }

    fn mm(&self, o: &M) -> M {
        assert_eq!(self.c, o.r, "f64 matmul inner dims");
        let mut out = M::zeros(self.r, o.c);
        for i in 0..self.r {
            for k in 0..self.c {
                let a = self.at(i, k);
                for j in 0..o.c {
                    out.d[i * o.c + j] += a * o.at(k, j);
                }
            }
        }
        out
    }

    fn add(&self, o: &M) -> M {
        assert_eq!((self.r, self.c), (o.r, o.c), "f64 add shapes");
        let d = self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect();
        M { r: self.r, c: self.c, d }
    }

    fn scaled(&self, s: f64) -> M {
        M {
            r: self.r,
            c: self.c,
            d: self.d.iter().map(|v| v * s).collect(),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M {
            r: self.r,
            c: self.c,
            d: self.d.iter().map(|&v| f(v)).collect(),
        }
    }

    fn softmax_rows(&self) -> M {
        let mut out = self.clone();
        for i in 0..self.r {
            let row = &mut out.d[i * self.c..(i + 1) * self.c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    fn layer_norm(&self, gain: &[f64], bias: &[f64]) -> M {
        assert_eq!(gain.len(), self.c, "f64 layer_norm width");
        let mut out = M::zeros(self.r, self.c);
        for i in 0..self.r {
            let row = &self.d[i * self.c..(i + 1) * self.c];
            let mean = row.iter().sum::<f64>() / self.c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.c as f64;
            let inv = 1.0 / (var + LN_EPS as f64).sqrt();
            for j in 0..self.c {
                out.d[i * self.c + j] = (row[j] - mean) * inv * gain[j] + bias[j];
            }
        }
        out
    }

    fn mean_rows(&self) -> M {
        let mut out = M::zeros(1, self.c);
        for i in 0..self.r {
            for j in 0..self.c {
                out.d[j] += self.at(i, j);
            }
        }
        out.scaled(1.0 / self.r as f64)
    }

    fn rows(&self, lo: usize, hi: usize) -> M {
        M {
            r: hi - lo,
            c: self.c,
            d: self.d[lo * self.c..hi * self.c].to_vec(),
        }
    }

    fn concat_cols(&self, o: &M) -> M {
        assert_eq!(self.r, o.r, "f64 concat_cols rows");
        let c = self.c + o.c;
        let mut out = M::zeros(self.r, c);
        for i in 0..self.r {
            out.d[i * c..i * c + self.c].copy_from_slice(&self.d[i * self.c..(i + 1) * self.c]);
            out.d[i * c + self.c..(i + 1) * c].copy_from_slice(&o.d[i * o.c..(i + 1) * o.c]);
        }
        out
    }
}

fn relu64(v: f64) -> f64 {
    v.max(0.0)
}

fn gelu64(v: f64) -> f64 {
    let c = GELU_C as f64;
    let k = 0.044715_f32 as f64;
    0.5 * v * (1.0 + (c * (v + k * v * v * v)).tanh())
}

fn linear64(x: &M, w: &M, b: &[f64]) -> M {
    let mut out = x.mm(w);
    for i in 0..out.r {
        for j in 0..out.c {
            out.d[i * out.c + j] += b[j];
        }
    }
    out
}

// --- parameter snapshot ---------------------------------------------------

/// Widened copy of the parameters, element-addressable for perturbation.
/// Tensor order matches `ModelParams::tensors_mut`.
pub(crate) struct Snapshot {
    tensors: Vec<(Vec<usize>, Vec<f64>)>,
}

impl Snapshot {
    pub(crate) fn new(params: &ModelParams) -> Snapshot {
        let mut p = params.clone();
        let tensors = p
            .tensors_mut()
            .into_iter()
            .map(|t| {
                (
                    t.shape().to_vec(),
                    t.data().iter().map(|&v| v as f64).collect(),
                )
            })
            .collect();
        Snapshot { tensors }
    }
}

/// Sequential reader over the snapshot in `tensors_mut` order.
struct Cursor<'a> {
    tensors: &'a [(Vec<usize>, Vec<f64>)],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self) -> &'a (Vec<usize>, Vec<f64>) {
        let t = &self.tensors[self.at];
        self.at += 1;
        t
    }

    fn mat(&mut self) -> M {
        let (shape, data) = self.next();
        assert_eq!(shape.len(), 2, "expected a rank-2 parameter");
        M {
            r: shape[0],
            c: shape[1],
            d: data.clone(),
        }
    }

    fn vec(&mut self) -> &'a [f64] {
        let (shape, data) = self.next();
        assert_eq!(shape.len(), 1, "expected a rank-1 parameter");
        data
    }
}

struct LinearP {
    w: M,
    b: Vec<f64>,
}

impl Cursor<'_> {
    fn linear(&mut self) -> LinearP {
        LinearP {
            w: self.mat(),
            b: self.vec().to_vec(),
        }
    }
}

// --- mixers ---------------------------------------------------------------

fn softmax_attention64(x: &M, wq: &M, wk: &M, wv: &M) -> M {
    let inv_sqrt = 1.0 / (x.c as f64).sqrt();
    let q = x.mm(wq);
    let k = x.mm(wk);
    let v = x.mm(wv);
    let attn = q.mm(&k.t()).scaled(inv_sqrt).softmax_rows();
    attn.mm(&v)
}

fn nystrom_attention64(x: &M, wq: &M, wk: &M, wv: &M, m: usize, mode: PinvMode) -> Result<M> {
    let inv_sqrt = 1.0 / (x.c as f64).sqrt();
    let q = x.mm(wq);
    let k = x.mm(wk);
    let v = x.mm(wv);
    let bounds = segment_bounds(x.r, m);
    let seg_mean = |a: &M| {
        let mut out = M::zeros(bounds.len(), a.c);
        for (s, &(lo, hi)) in bounds.iter().enumerate() {
            for i in lo..hi {
                for j in 0..a.c {
                    out.d[s * a.c + j] += a.at(i, j);
                }
            }
            for j in 0..a.c {
                out.d[s * a.c + j] /= (hi - lo) as f64;
            }
        }
        out
    };
    let q_land = seg_mean(&q);
    let k_land = seg_mean(&k);
    let f1 = q.mm(&k_land.t()).scaled(inv_sqrt).softmax_rows();
    let f2 = q_land.mm(&k_land.t()).scaled(inv_sqrt).softmax_rows();
    let f3 = q_land.mm(&k.t()).scaled(inv_sqrt).softmax_rows();
    let f2_inv = match mode {
        PinvMode::Iterative(iters) => pinv64(&f2, iters),
        PinvMode::Exact => gauss_jordan64(&f2)?,
    };
    Ok(f1.mm(&f2_inv).mm(&f3).mm(&v))
}

/// Same Newton-Schulz variant as the tape: Z scaled from the transpose,
/// then Z <- Z(13I - AZ(15I - AZ(7I - AZ)))/4.
fn pinv64(a: &M, iters: usize) -> M {
    let n = a.r;
    let mut norm_inf = 0.0f64;
    for i in 0..n {
        let s: f64 = (0..a.c).map(|j| a.at(i, j).abs()).sum();
        norm_inf = norm_inf.max(s);
    }
    let mut norm_one = 0.0f64;
    for j in 0..a.c {
        let s: f64 = (0..n).map(|i| a.at(i, j).abs()).sum();
        norm_one = norm_one.max(s);
    }
    let mut z = a.t().scaled(1.0 / (norm_inf * norm_one));
    let eye = |s: f64| {
        let mut e = M::zeros(n, n);
        for i in 0..n {
            e.d[i * n + i] = s;
        }
        e
    };
    let (c7, c13, c15) = (eye(7.0), eye(13.0), eye(15.0));
    let sub = |a: &M, b: &M| a.add(&b.scaled(-1.0));
    for _ in 0..iters {
        let az = a.mm(&z);
        let p1 = az.mm(&sub(&c7, &az));
        let p2 = az.mm(&sub(&c15, &p1));
        z = z.mm(&sub(&c13, &p2)).scaled(0.25);
    }
    z
}

fn gauss_jordan64(a: &M) -> Result<M> {
    let n = a.r;
    let mut aug = M::zeros(n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            aug.d[i * 2 * n + j] = a.at(i, j);
        }
        aug.d[i * 2 * n + n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| {
                aug.at(x, col)
                    .abs()
                    .partial_cmp(&aug.at(y, col).abs())
                    .unwrap()
            })
            .unwrap();
        if aug.at(pivot, col).abs() < 1e-12 {
            return Err(EdsError::numerical("singular matrix in f64 inverse"));
        }
        if pivot != col {
            for j in 0..2 * n {
                aug.d.swap(pivot * 2 * n + j, col * 2 * n + j);
            }
        }
        let inv = 1.0 / aug.at(col, col);
        for j in 0..2 * n {
            aug.d[col * 2 * n + j] *= inv;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = aug.at(i, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..2 * n {
                aug.d[i * 2 * n + j] -= f * aug.at(col, j);
            }
        }
    }
    let mut out = M::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.d[i * n + j] = aug.at(i, n + j);
        }
    }
    Ok(out)
}

/// DFT along the embedding axis, then the sequence axis; real part kept.
fn fourier_mix64(x: &M) -> M {
    let (n, f) = (x.r, x.c);
    let mut re = vec![0.0f64; n * f];
    let mut im = vec![0.0f64; n * f];
    for i in 0..n {
        for k in 0..f {
            let (mut sr, mut si) = (0.0, 0.0);
            for j in 0..f {
                let ang = -TAU * (j as f64) * (k as f64) / f as f64;
                sr += x.at(i, j) * ang.cos();
                si += x.at(i, j) * ang.sin();
            }
            re[i * f + k] = sr;
            im[i * f + k] = si;
        }
    }
    let mut out = M::zeros(n, f);
    for j in 0..f {
        for k in 0..n {
            let mut sr = 0.0;
            for i in 0..n {
                let ang = -TAU * (i as f64) * (k as f64) / n as f64;
                sr += re[i * f + j] * ang.cos() - im[i * f + j] * ang.sin();
            }
            out.d[k * f + j] = sr;
        }
    }
    out
}

/// Per-channel real spectrum along time.
fn dft_real_time64(x: &M) -> M {
    let (l, h) = (x.r, x.c);
    let mut out = M::zeros(l, h);
    for c in 0..h {
        for k in 0..l {
            let mut s = 0.0;
            for t in 0..l {
                s += x.at(t, c) * (-TAU * (t as f64) * (k as f64) / l as f64).cos();
            }
            out.d[k * h + c] = s;
        }
    }
    out
}

struct DwtP {
    fc1: LinearP,
    fc2: LinearP,
    ln_gain: Vec<f64>,
    ln_bias: Vec<f64>,
    conv_shape: Vec<usize>,
    conv: Vec<f64>,
}

fn dwt_mix64(x: &M, p: &DwtP) -> M {
    let n = x.r;
    let padded = if n % 2 == 1 {
        let mut d = x.d.clone();
        d.extend_from_slice(&x.d[(n - 1) * x.c..]);
        M { r: n + 1, c: x.c, d }
    } else {
        x.clone()
    };
    let half = padded.r / 2;
    let mut a = M::zeros(half, x.c);
    let mut det = M::zeros(half, x.c);
    for i in 0..half {
        for j in 0..x.c {
            let x0 = padded.at(2 * i, j);
            let x1 = padded.at(2 * i + 1, j);
            a.d[i * x.c + j] = (x0 + x1) * FRAC_1_SQRT_2;
            det.d[i * x.c + j] = (x0 - x1) * FRAC_1_SQRT_2;
        }
    }
    let a2 = linear64(&linear64(&a, &p.fc1.w, &p.fc1.b).map(gelu64), &p.fc2.w, &p.fc2.b);
    let cat = a2.concat_cols(&det);
    let normed = cat.layer_norm(&p.ln_gain, &p.ln_bias);
    // Stride-2 transposed conv: out[2i + t] += x[i] . w[t].
    let (c_in, c_out) = (p.conv_shape[1], p.conv_shape[2]);
    let mut up = M::zeros(2 * half, c_out);
    for i in 0..half {
        for t in 0..2 {
            for ci in 0..c_in {
                let xv = normed.at(i, ci);
                for co in 0..c_out {
                    up.d[(2 * i + t) * c_out + co] += xv * p.conv[(t * c_in + ci) * c_out + co];
                }
            }
        }
    }
    up.rows(0, n)
}

// --- whole-model forward and loss -----------------------------------------

struct Parsed {
    mixer: MixerP,
    stack: Vec<LinearP>,
    enc_gain: Vec<f64>,
    enc_bias: Vec<f64>,
    shared: LinearP,
    head_gain: Vec<f64>,
    head_bias: Vec<f64>,
    cls: LinearP,
    reg: LinearP,
    fine: Vec<LinearP>,
}

enum MixerP {
    Softmax { wq: M, wk: M, wv: M },
    Fourier,
    Nystrom { wq: M, wk: M, wv: M },
    Dwt(DwtP),
}

fn parse(snap: &Snapshot, cfg: &RunConfig) -> Parsed {
    let mut c = Cursor {
        tensors: &snap.tensors,
        at: 0,
    };
    let mixer = match cfg.mixer {
        MixerKind::Softmax => MixerP::Softmax {
            wq: c.mat(),
            wk: c.mat(),
            wv: c.mat(),
        },
        MixerKind::Nystrom => MixerP::Nystrom {
            wq: c.mat(),
            wk: c.mat(),
            wv: c.mat(),
        },
        MixerKind::Fourier => MixerP::Fourier,
        MixerKind::Dwt => {
            let fc1 = c.linear();
            let fc2 = c.linear();
            let ln_gain = c.vec().to_vec();
            let ln_bias = c.vec().to_vec();
            let (conv_shape, conv) = c.next();
            MixerP::Dwt(DwtP {
                fc1,
                fc2,
                ln_gain,
                ln_bias,
                conv_shape: conv_shape.clone(),
                conv: conv.clone(),
            })
        }
    };
    let stack = (0..cfg.fc_depth).map(|_| c.linear()).collect();
    let enc_gain = c.vec().to_vec();
    let enc_bias = c.vec().to_vec();
    let shared = c.linear();
    let head_gain = c.vec().to_vec();
    let head_bias = c.vec().to_vec();
    let cls = c.linear();
    let reg = c.linear();
    let n_fine = if cfg.pooling == PoolingKind::Roi {
        0
    } else {
        cfg.anchor_scales.len()
    };
    let fine = (0..n_fine).map(|_| c.linear()).collect();
    assert_eq!(c.at, snap.tensors.len(), "snapshot fully consumed");
    Parsed {
        mixer,
        stack,
        enc_gain,
        enc_bias,
        shared,
        head_gain,
        head_bias,
        cls,
        reg,
        fine,
    }
}

/// Reference loss. Requires dropout 0; the reference route has none.
pub(crate) fn forward_loss_f64(
    snap: &Snapshot,
    cfg: &RunConfig,
    video: &Tensor,
    sample: &[LabeledProposal],
) -> Result<f64> {
    if cfg.dropout != 0.0 {
        return Err(EdsError::invalid(
            "the f64 reference route does not model dropout",
        ));
    }
    let p = parse(snap, cfg);
    let x = M::from_tensor(video);
    let n = x.r;

    let mixed = match &p.mixer {
        MixerP::Softmax { wq, wk, wv } => softmax_attention64(&x, wq, wk, wv),
        MixerP::Fourier => fourier_mix64(&x),
        MixerP::Nystrom { wq, wk, wv } => {
            let m = cfg.nystrom_landmarks.min(n);
            nystrom_attention64(&x, wq, wk, wv, m, PinvMode::from_config(cfg))?
        }
        MixerP::Dwt(dp) => dwt_mix64(&x, dp),
    };
    let mut h = mixed.add(&x);
    for layer in &p.stack {
        h = linear64(&h, &layer.w, &layer.b).map(relu64);
    }
    let enc = h.layer_norm(&p.enc_gain, &p.enc_bias);

    let shared_of = |v: &M| {
        linear64(v, &p.shared.w, &p.shared.b)
            .map(relu64)
            .layer_norm(&p.head_gain, &p.head_bias)
    };

    let mut logits = Vec::new();
    let mut targets = Vec::new();
    let mut off_pairs: Vec<(f64, f64)> = Vec::new();
    let mut off_targets: Vec<(f64, f64)> = Vec::new();
    for lp in sample {
        let target = match lp.label {
            Label::Positive => 1.0f64,
            Label::NegUnimportant | Label::NegIncomplete => 0.0,
            Label::Ignored => continue,
        };
        let span = &lp.proposal.span;
        let (lo, hi) = clip_span(span.start(), span.end(), n)
            .ok_or_else(|| EdsError::invalid("proposal clips to an empty span"))?;
        let seg = enc.rows(lo, hi);
        let (coarse, fine) = match cfg.pooling {
            PoolingKind::Roi => {
                let pooled = seg.mean_rows();
                (pooled.clone(), None)
            }
            PoolingKind::Fft | PoolingKind::Flat => {
                let transformed = if cfg.pooling == PoolingKind::Fft {
                    dft_real_time64(&seg)
                } else {
                    seg
                };
                let scale = cfg.anchor_scales[lp.proposal.k];
                let mut padded = M::zeros(scale, transformed.c);
                padded.d[..transformed.d.len()].copy_from_slice(&transformed.d);
                let coarse = padded.mean_rows();
                let flat = M {
                    r: 1,
                    c: scale * padded.c,
                    d: padded.d,
                };
                let fk = &p.fine[lp.proposal.k];
                (coarse, Some(linear64(&flat, &fk.w, &fk.b)))
            }
        };
        let sc = shared_of(&coarse);
        let logit = linear64(&sc, &p.cls.w, &p.cls.b);
        // ROI mode reuses the coarse trunk for the regression path.
        let sf = match &fine {
            None => sc,
            Some(f) => shared_of(f),
        };
        let offsets = linear64(&sf, &p.reg.w, &p.reg.b);
        logits.push(logit.d[0]);
        targets.push(target);
        if lp.label == Label::Positive {
            let (dc, dl) = lp
                .offset_target
                .ok_or_else(|| EdsError::invalid("positive proposal without an offset target"))?;
            off_pairs.push((offsets.d[0], offsets.d[1]));
            off_targets.push((dc as f64, dl as f64));
        }
    }
    if logits.is_empty() {
        return Err(EdsError::invalid("loss over an empty label sample"));
    }

    let mut cls = 0.0f64;
    for (&z, &t) in logits.iter().zip(&targets) {
        cls += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    cls /= logits.len() as f64;
    if off_pairs.is_empty() {
        return Ok(cls);
    }
    let mut loc = 0.0f64;
    for ((pc, pl), (tc, tl)) in off_pairs.iter().zip(&off_targets) {
        for e in [(pc - tc).abs(), (pl - tl).abs()] {
            loc += if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
        }
    }
    loc /= (2 * off_pairs.len()) as f64;
    Ok(cls + cfg.loss_balance as f64 * loc)
}

// --- gradient check --------------------------------------------------------

/// Deterministic tiny problem used by both routes of the check.
struct CheckCase {
    params: ModelParams,
    video: Tensor,
    sample: Vec<LabeledProposal>,
}

fn check_case(cfg: &RunConfig, n: usize, seed: u64) -> Result<CheckCase> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let params = ModelParams::init(cfg, &mut rng);
    let video = Tensor::uniform(&mut rng, vec![n, cfg.feat_dim], 1.0);
    let gts = vec![
        GtSegment::new(2, n / 2 + 1, n)?,
        GtSegment::new(n - 3, n, n)?,
    ];
    let anchors = generate_anchors(n, &AnchorConfig::from_run(cfg))?;
    let sample = assign_labels(&anchors, &gts, &AnchorConfig::from_run(cfg), &mut rng)?;
    Ok(CheckCase {
        params,
        video,
        sample,
    })
}

/// Analytic loss and per-tensor gradients from the production route.
fn analytic(case: &CheckCase, cfg: &RunConfig) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let vv = tape.constant(case.video.clone());
    let vars = case.params.insert(&mut tape, true);
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let (_, outs) = model_fwd(&mut tape, vv, &vars, cfg, true, &mut rng)?;
    let loss = multi_task_loss(
        &mut tape,
        &outs,
        &case.sample,
        cfg.loss_balance,
        cfg.anchor_scales.len(),
    )?;
    let total = tape.value(loss.total).data()[0];
    tape.backward(loss.total)?;
    let grads = vars
        .leaves()
        .iter()
        .map(|&leaf| match tape.grad(leaf) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.value(leaf).len()],
        })
        .collect();
    Ok((total, grads))
}

/// Compares the tape's gradients against central differences of the f64
/// reference on a small deterministic problem. Returns the worst relative
/// error over parameter tensors, where each tensor scores
/// |g_tape - g_fd| / max(|g_tape|, |g_fd|) in the euclidean norm.
pub fn gradient_check(cfg: &RunConfig, seed: u64) -> Result<f32> {
    cfg.validate()?;
    if cfg.dropout != 0.0 {
        return Err(EdsError::invalid("gradient_check needs dropout 0"));
    }
    let n = 10;
    let case = check_case(cfg, n, seed)?;
    let (_, grads) = analytic(&case, cfg)?;

    let mut snap = Snapshot::new(&case.params);
    let mut worst = 0.0f64;
    for ti in 0..snap.tensors.len() {
        let len = snap.tensors[ti].1.len();
        let mut diff2 = 0.0f64;
        let mut fd2 = 0.0f64;
        let mut an2 = 0.0f64;
        for j in 0..len {
            let w = snap.tensors[ti].1[j];
            // Small h keeps the bias from steps that straddle a ReLU kink
            // near 1e-4; the f64 route leaves plenty of headroom above
            // subtraction roundoff.
            let h = 1e-6 * w.abs().max(1.0);
            snap.tensors[ti].1[j] = w + h;
            let lp = forward_loss_f64(&snap, cfg, &case.video, &case.sample)?;
            snap.tensors[ti].1[j] = w - h;
            let lm = forward_loss_f64(&snap, cfg, &case.video, &case.sample)?;
            snap.tensors[ti].1[j] = w;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[ti][j] as f64;
            diff2 += (an - fd) * (an - fd);
            fd2 += fd * fd;
            an2 += an * an;
        }
        let scale = fd2.sqrt().max(an2.sqrt());
        // A tensor the loss never touches has no error to measure.
        if scale < 1e-10 {
            continue;
        }
        worst = worst.max(diff2.sqrt() / scale);
    }
    Ok(worst as f32)
}
