//! Segment feature pooling, the shared prediction head, whole-model
//! forward composition, and parameter counting.
//!
//! Per proposal: slice the encoded frames covered by the anchor, apply the
//! pooling transform, zero-pad to the anchor scale, then derive a coarse
//! (temporal mean) and a fine (flatten + per-scale FC) vector. The head
//! scores coarse features and regresses offsets from fine features; ROI
//! mode collapses both paths to one averaged vector.

use rand::Rng;

use crate::config::{PoolingKind, RunConfig};
use crate::error::{EdsError, Result};
use crate::mixers::{
    encoder_fwd, linear_fwd, EncoderParams, EncoderVars, LayerNormParams, Linear, LinearVars,
    LnVars, MixerParams, LN_EPS,
};
use crate::numcore::kernels;
use crate::numcore::{Tape, Tensor, Var};
use crate::proposals::{generate_anchors, AnchorConfig, Proposal};

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub shared: Linear,
    pub ln: LayerNormParams,
    pub cls: Linear,
    pub reg: Linear,
    /// Per-scale fine projections (l_k * H -> H); empty in ROI mode.
    pub fine: Vec<Linear>,
}

impl HeadParams {
    pub fn init(cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.hidden;
        let fine = match cfg.pooling {
            PoolingKind::Roi => Vec::new(),
            PoolingKind::Fft | PoolingKind::Flat => cfg
                .anchor_scales
                .iter()
                .map(|&l| Linear::init(rng, l * h, h))
                .collect(),
        };
        HeadParams {
            shared: Linear::init(rng, h, h),
            ln: LayerNormParams::init(h),
            cls: Linear::init(rng, h, 1),
            reg: Linear::init(rng, h, 2),
            fine,
        }
    }

    pub fn n_params(&self) -> usize {
        self.shared.n_params()
            + self.ln.n_params()
            + self.cls.n_params()
            + self.reg.n_params()
            + self.fine.iter().map(Linear::n_params).sum::<usize>()
    }
}

pub struct HeadVars {
    pub shared: LinearVars,
    pub ln: LnVars,
    pub cls: LinearVars,
    pub reg: LinearVars,
    pub fine: Vec<LinearVars>,
}

impl HeadParams {
    pub fn insert(&self, tape: &mut Tape, trainable: bool) -> HeadVars {
        HeadVars {
            shared: self.shared.insert(tape, trainable),
            ln: self.ln.insert(tape, trainable),
            cls: self.cls.insert(tape, trainable),
            reg: self.reg.insert(tape, trainable),
            fine: self.fine.iter().map(|l| l.insert(tape, trainable)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub heads: HeadParams,
}

pub struct ModelVars {
    pub encoder: EncoderVars,
    pub heads: HeadVars,
}

impl ModelParams {
    pub fn init(cfg: &RunConfig, rng: &mut impl Rng) -> Self {
        ModelParams {
            encoder: EncoderParams::init(cfg, rng),
            heads: HeadParams::init(cfg, rng),
        }
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.heads.n_params()
    }

    pub fn insert(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            encoder: self.encoder.insert(tape, trainable),
            heads: self.heads.insert(tape, trainable),
        }
    }

    /// Flat list of every trainable tensor. Order must match
    /// `ModelVars::leaves`; the optimizer zips the two.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = Vec::new();
        match &mut self.encoder.mixer {
            MixerParams::Softmax(p) | MixerParams::Nystrom(p) => {
                v.push(&mut p.wq);
                v.push(&mut p.wk);
                v.push(&mut p.wv);
            }
            MixerParams::Fourier => {}
            MixerParams::Dwt(p) => {
                v.push(&mut p.fc1.w);
                v.push(&mut p.fc1.b);
                v.push(&mut p.fc2.w);
                v.push(&mut p.fc2.b);
                v.push(&mut p.ln.gain);
                v.push(&mut p.ln.bias);
                v.push(&mut p.conv);
            }
        }
        for l in &mut self.encoder.stack {
            v.push(&mut l.w);
            v.push(&mut l.b);
        }
        v.push(&mut self.encoder.ln.gain);
        v.push(&mut self.encoder.ln.bias);
        v.push(&mut self.heads.shared.w);
        v.push(&mut self.heads.shared.b);
        v.push(&mut self.heads.ln.gain);
        v.push(&mut self.heads.ln.bias);
        v.push(&mut self.heads.cls.w);
        v.push(&mut self.heads.cls.b);
        v.push(&mut self.heads.reg.w);
        v.push(&mut self.heads.reg.b);
        for l in &mut self.heads.fine {
            v.push(&mut l.w);
            v.push(&mut l.b);
        }
        v
    }
}

impl ModelVars {
    /// Leaf handles in the exact order of `ModelParams::tensors_mut`.
    pub fn leaves(&self) -> Vec<Var> {
        let mut v = Vec::new();
        match &self.encoder.mixer {
            crate::mixers::MixerVars::Softmax(p) | crate::mixers::MixerVars::Nystrom(p) => {
                v.extend([p.wq, p.wk, p.wv]);
            }
            crate::mixers::MixerVars::Fourier => {}
            crate::mixers::MixerVars::Dwt(p) => {
                v.extend([p.fc1.w, p.fc1.b, p.fc2.w, p.fc2.b, p.ln.gain, p.ln.bias, p.conv]);
            }
        }
        for l in &self.encoder.stack {
            v.extend([l.w, l.b]);
        }
        v.extend([self.encoder.ln.gain, self.encoder.ln.bias]);
        v.extend([self.heads.shared.w, self.heads.shared.b]);
        v.extend([self.heads.ln.gain, self.heads.ln.bias]);
        v.extend([self.heads.cls.w, self.heads.cls.b]);
        v.extend([self.heads.reg.w, self.heads.reg.b]);
        for l in &self.heads.fine {
            v.extend([l.w, l.b]);
        }
        v
    }
}

/// Integer frame rows covered by a clipped span: a frame counts only when
/// its whole unit interval fits inside [start, end) ∩ [0, n).
pub(crate) fn clip_span(start: f32, end: f32, n: usize) -> Option<(usize, usize)> {
    let lo = start.max(0.0).ceil() as usize;
    let hi = (end.min(n as f32).floor() as isize).max(0) as usize;
    (lo < hi).then_some((lo, hi))
}

/// Integer frame rows covered by a (possibly boundary-crossing) proposal.
pub(crate) fn clip_rows(p: &Proposal, n: usize) -> Result<(usize, usize)> {
    clip_span(p.span.start(), p.span.end(), n).ok_or_else(|| {
        EdsError::invalid(format!(
            "proposal [{}, {}) covers no frames of a {n}-frame video",
            p.span.start(),
            p.span.end()
        ))
    })
}

/// Rows of `features` covered by the proposal, clipped to the video.
pub fn extract_segment(features: &Tensor, p: &Proposal, n: usize) -> Result<Tensor> {
    if features.rows() < n {
        return Err(EdsError::shape(format!(
            "feature matrix has {} rows, video claims {n}",
            features.rows()
        )));
    }
    let (lo, hi) = clip_rows(p, n)?;
    Ok(kernels::slice_rows(features, lo, hi - lo))
}

/// Temporal average; the entire ROI path.
pub fn roi_pool(segment: &Tensor) -> Result<Tensor> {
    if segment.rows() == 0 {
        return Err(EdsError::invalid("roi_pool on an empty segment"));
    }
    Ok(kernels::mean_rows(segment))
}

/// Real part of the per-channel DFT along time; shape preserved.
pub fn fft_pool_transform(segment: &Tensor) -> Tensor {
    crate::numcore::fft::dft_real_time_kernel(segment)
}

/// Identity; flattening happens in `coarse_fine`.
pub fn flat_pool_transform(segment: &Tensor) -> Tensor {
    segment.clone()
}

// --- tracked paths ----------------------------------------------------------

fn pad_to_scale(tape: &mut Tape, seg: Var, scale: usize) -> Var {
    let rows = tape.value(seg).rows();
    debug_assert!(rows <= scale, "segment longer than its anchor scale");
    if rows == scale {
        return seg;
    }
    let h = tape.value(seg).cols();
    let zeros = tape.constant(Tensor::zeros(vec![scale - rows, h]));
    tape.concat_rows(&[seg, zeros])
}

/// Coarse and fine vectors for one proposal, both 1-by-H.
pub(crate) fn proposal_features_fwd(
    tape: &mut Tape,
    enc: Var,
    p: &Proposal,
    scales: &[usize],
    mode: PoolingKind,
    heads: &HeadVars,
    n: usize,
) -> Result<(Var, Var)> {
    let (lo, hi) = clip_rows(p, n)?;
    let seg = tape.slice_rows(enc, lo, hi - lo);
    if mode == PoolingKind::Roi {
        let pooled = tape.mean_rows(seg);
        return Ok((pooled, pooled));
    }
    let scale = *scales
        .get(p.k)
        .ok_or_else(|| EdsError::invalid(format!("scale index {} out of range", p.k)))?;
    let transformed = match mode {
        PoolingKind::Fft => tape.dft_real_time(seg),
        PoolingKind::Flat => seg,
        PoolingKind::Roi => unreachable!(),
    };
    let padded = pad_to_scale(tape, transformed, scale);
    let coarse = tape.mean_rows(padded);
    let h = tape.value(padded).cols();
    let flat = tape.reshape(padded, vec![1, scale * h]);
    let fine = linear_fwd(tape, flat, &heads.fine[p.k]);
    Ok((coarse, fine))
}

fn shared_fwd(tape: &mut Tape, x: Var, heads: &HeadVars) -> Var {
    let z = linear_fwd(tape, x, &heads.shared);
    let r = tape.relu(z);
    tape.layer_norm(r, heads.ln.gain, heads.ln.bias, LN_EPS)
}

/// Score logit (1x1) and offset pair (1x2) for one proposal.
pub(crate) fn heads_fwd(
    tape: &mut Tape,
    coarse: Var,
    fine: Var,
    heads: &HeadVars,
) -> (Var, Var) {
    let sc = shared_fwd(tape, coarse, heads);
    let logit = linear_fwd(tape, sc, &heads.cls);
    let sf = if fine == coarse {
        sc
    } else {
        shared_fwd(tape, fine, heads)
    };
    let offsets = linear_fwd(tape, sf, &heads.reg);
    (logit, offsets)
}

// --- plain entry points -------------------------------------------------------

/// Coarse and fine features of an already-transformed segment.
pub fn coarse_fine(
    transformed: &Tensor,
    k: usize,
    params: &HeadParams,
    scales: &[usize],
) -> Result<(Tensor, Tensor)> {
    if k >= scales.len() {
        return Err(EdsError::invalid(format!("scale index {k} out of range")));
    }
    let mut tape = Tape::new();
    let seg = tape.constant(transformed.clone());
    let heads = params.insert(&mut tape, false);
    let padded = pad_to_scale(&mut tape, seg, scales[k]);
    let coarse = tape.mean_rows(padded);
    let h = tape.value(padded).cols();
    let flat = tape.reshape(padded, vec![1, scales[k] * h]);
    let fine = linear_fwd(&mut tape, flat, &heads.fine[k]);
    Ok((tape.value(coarse).clone(), tape.value(fine).clone()))
}

/// Sigmoid score and offset pair from pooled segment features.
pub fn heads_forward(
    coarse: &Tensor,
    fine: &Tensor,
    params: &HeadParams,
) -> Result<(f32, (f32, f32))> {
    if coarse.cols() != params.shared.w.rows() || fine.cols() != params.shared.w.rows() {
        return Err(EdsError::shape(format!(
            "head input widths {} / {} vs hidden {}",
            coarse.cols(),
            fine.cols(),
            params.shared.w.rows()
        )));
    }
    let mut tape = Tape::new();
    let cv = tape.constant(coarse.clone());
    let fv = tape.constant(fine.clone());
    let heads = params.insert(&mut tape, false);
    let (logit, offsets) = heads_fwd(&mut tape, cv, fv, &heads);
    let z = tape.value(logit).data()[0];
    let o = tape.value(offsets).data();
    Ok((kernels::sigmoid_scalar(z), (o[0], o[1])))
}

#[derive(Clone, Debug)]
pub struct PredictionSet {
    /// [N, K] sigmoid scores in (0, 1).
    pub scores: Tensor,
    /// [N, K, 2] center and log-length offsets.
    pub offsets: Tensor,
}

/// Whole-model tracked forward over every anchor. Returns per-proposal
/// (logit, offsets) vars in (t, k) order alongside the proposals.
pub(crate) fn model_fwd(
    tape: &mut Tape,
    video: Var,
    vars: &ModelVars,
    cfg: &RunConfig,
    training: bool,
    rng: &mut impl Rng,
) -> Result<(Vec<Proposal>, Vec<(Var, Var)>)> {
    let n = tape.value(video).rows();
    let enc = encoder_fwd(tape, video, &vars.encoder, cfg, training, rng)?;
    let anchors = generate_anchors(n, &AnchorConfig::from_run(cfg))?;
    let mut outs = Vec::with_capacity(anchors.len());
    for p in &anchors {
        let (coarse, fine) = proposal_features_fwd(
            tape,
            enc,
            p,
            &cfg.anchor_scales,
            cfg.pooling,
            &vars.heads,
            n,
        )?;
        outs.push(heads_fwd(tape, coarse, fine, &vars.heads));
    }
    Ok((anchors, outs))
}

/// Untracked full forward: scores and offsets for all N*K anchors.
pub fn model_forward(
    video: &Tensor,
    cfg: &RunConfig,
    params: &ModelParams,
    training: bool,
    rng: &mut impl Rng,
) -> Result<PredictionSet> {
    if video.shape().len() != 2 || video.cols() != cfg.feat_dim {
        return Err(EdsError::shape(format!(
            "video of shape {:?} vs feat_dim {}",
            video.shape(),
            cfg.feat_dim
        )));
    }
    let n = video.rows();
    let k = cfg.anchor_scales.len();
    let mut tape = Tape::new();
    let vv = tape.constant(video.clone());
    let vars = params.insert(&mut tape, false);
    let (_, outs) = model_fwd(&mut tape, vv, &vars, cfg, training, rng)?;
    let mut scores = vec![0.0f32; n * k];
    let mut offsets = vec![0.0f32; n * k * 2];
    for (i, (logit, off)) in outs.iter().enumerate() {
        scores[i] = kernels::sigmoid_scalar(tape.value(*logit).data()[0]);
        let o = tape.value(*off).data();
        offsets[2 * i] = o[0];
        offsets[2 * i + 1] = o[1];
    }
    let preds = PredictionSet {
        scores: Tensor::from_vec(vec![n, k], scores)?,
        offsets: Tensor::from_vec(vec![n, k, 2], offsets)?,
    };
    preds.scores.check_finite("prediction scores")?;
    preds.offsets.check_finite("prediction offsets")?;
    Ok(preds)
}

/// Closed-form trainable-parameter count for a config.
pub fn count_params(cfg: &RunConfig) -> usize {
    let f = cfg.feat_dim;
    let h = cfg.hidden;
    let mixer = match cfg.mixer {
        crate::config::MixerKind::Softmax | crate::config::MixerKind::Nystrom => 3 * f * f,
        crate::config::MixerKind::Fourier => 0,
        // fc1 + fc2 (F->F with bias), layer norm over 2F, conv [2, 2F, F].
        crate::config::MixerKind::Dwt => 2 * (f * f + f) + 2 * (2 * f) + 4 * f * f,
    };
    let mut stack = f * h + h;
    stack += (cfg.fc_depth - 1) * (h * h + h);
    let enc_ln = 2 * h;
    let heads = (h * h + h) + 2 * h + (h + 1) + (2 * h + 2);
    let fine = match cfg.pooling {
        PoolingKind::Roi => 0,
        PoolingKind::Fft | PoolingKind::Flat => cfg
            .anchor_scales
            .iter()
            .map(|&l| l * h * h + h)
            .sum::<usize>(),
    };
    mixer + stack + enc_ln + heads + fine
}
