//! Training loop, the joint classification + localization loss, and F1
//! evaluation against user summaries.
//!
//! One optimizer step per video: fresh tape, tracked forward, label
//! assignment, loss, reverse sweep, Adam update. A single ChaCha20 stream
//! seeded from the config drives parameter init, epoch shuffling, dropout,
//! and label sampling, so a run is a pure function of config and data.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataio::{split_folds, Dataset, F1Mode, LoadedVideo};
use crate::error::{EdsError, Result};
use crate::numcore::{adam_step, AdamState, Tape, Var};
use crate::pooling::{model_fwd, ModelParams};
use crate::proposals::{assign_labels, AnchorConfig, Label, LabeledProposal};
use crate::summarize::{make_summary, SummaryMask};

/// Scalar loss handle plus detached readouts of its two terms.
pub struct MultiTaskLoss {
    pub total: Var,
    pub cls: f32,
    pub loc: f32,
}

/// Joint loss over a label sample: mean BCE between score logits and
/// binary keyshot labels, plus `lambda` times the mean smooth-L1 over the
/// offset pairs of positive proposals. Ignored proposals are excluded; a
/// sample without positives has a zero localization term.
pub fn multi_task_loss(
    tape: &mut Tape,
    outs: &[(Var, Var)],
    sample: &[LabeledProposal],
    lambda: f32,
    n_scales: usize,
) -> Result<MultiTaskLoss> {
    let mut logit_vars = Vec::new();
    let mut targets = Vec::new();
    let mut off_vars = Vec::new();
    let mut off_targets = Vec::new();
    for lp in sample {
        let target = match lp.label {
            Label::Positive => 1.0,
            Label::NegUnimportant | Label::NegIncomplete => 0.0,
            Label::Ignored => continue,
        };
        // Outputs are laid out on the (t, k) anchor grid.
        let idx = lp.proposal.t * n_scales + lp.proposal.k;
        let (logit, off) = *outs.get(idx).ok_or_else(|| {
            EdsError::invalid(format!(
                "proposal (t {}, k {}) outside the {}-anchor output grid",
                lp.proposal.t,
                lp.proposal.k,
                outs.len()
            ))
        })?;
        logit_vars.push(logit);
        targets.push(target);
        if lp.label == Label::Positive {
            let (dc, dl) = lp.offset_target.ok_or_else(|| {
                EdsError::invalid("positive proposal without an offset target")
            })?;
            off_vars.push(off);
            off_targets.extend([dc, dl]);
        }
    }
    if logit_vars.is_empty() {
        return Err(EdsError::invalid("loss over an empty label sample"));
    }
    let logits = tape.concat_rows(&logit_vars);
    let l_cls = tape.bce_with_logits_mean(logits, targets);
    let cls = tape.value(l_cls).data()[0];
    if off_vars.is_empty() {
        return Ok(MultiTaskLoss {
            total: l_cls,
            cls,
            loc: 0.0,
        });
    }
    let offs = tape.concat_rows(&off_vars);
    let l_loc = tape.smooth_l1_mean(offs, off_targets);
    let loc = tape.value(l_loc).data()[0];
    let scaled = tape.scale(l_loc, lambda);
    let total = tape.add(l_cls, scaled);
    Ok(MultiTaskLoss { total, cls, loc })
}

/// Mean per-term losses over one epoch, in training order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub loss_cls: f32,
    pub loss_loc: f32,
    pub loss_total: f32,
}

/// Trains a fresh model on the given videos. Every video needs features of
/// the configured width and at least one ground-truth segment. Aborts with
/// a diagnostic if the loss stops being finite.
pub fn train(videos: &[&LoadedVideo], cfg: &RunConfig) -> Result<(ModelParams, Vec<EpochStats>)> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(EdsError::invalid("training needs at least one video"));
    }
    for v in videos {
        if v.features.cols() != cfg.feat_dim {
            return Err(EdsError::shape(format!(
                "video {} has feature width {}, config expects {}",
                v.id,
                v.features.cols(),
                cfg.feat_dim
            )));
        }
        if v.gt_segments.is_empty() {
            return Err(EdsError::invalid(format!(
                "video {} has no ground-truth segments to train on",
                v.id
            )));
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::init(cfg, &mut rng);
    let mut states: Vec<AdamState> = params
        .tensors_mut()
        .iter()
        .map(|t| AdamState::new(t.len()))
        .collect();
    let hyper = cfg.adam_hyper();
    let anchor_cfg = AnchorConfig::from_run(cfg);
    let n_scales = cfg.anchor_scales.len();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..videos.len()).collect();
    let mut step: u32 = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        for &vi in &order {
            let video = videos[vi];
            step += 1;
            let mut tape = Tape::new();
            let vv = tape.constant(video.features.clone());
            let vars = params.insert(&mut tape, true);
            let (anchors, outs) = model_fwd(&mut tape, vv, &vars, cfg, true, &mut rng)?;
            let sample = assign_labels(&anchors, &video.gt_segments, &anchor_cfg, &mut rng)?;
            let loss = multi_task_loss(&mut tape, &outs, &sample, cfg.loss_balance, n_scales)?;
            let total = tape.value(loss.total).data()[0];
            if !total.is_finite() {
                return Err(EdsError::numerical(format!(
                    "loss diverged at epoch {epoch} on video {}: cls {} loc {}",
                    video.id, loss.cls, loss.loc
                )));
            }
            tape.backward(loss.total)?;
            let leaves = vars.leaves();
            for ((tensor, leaf), state) in
                params.tensors_mut().into_iter().zip(&leaves).zip(&mut states)
            {
                // Leaves the loss never touched still decay via the folded
                // weight-decay term.
                let zeros;
                let g = match tape.grad(*leaf) {
                    Some(g) => g,
                    None => {
                        zeros = vec![0.0f32; tensor.len()];
                        &zeros
                    }
                };
                adam_step(tensor, g, state, &hyper, step)?;
            }
            sums[0] += loss.cls as f64;
            sums[1] += loss.loc as f64;
            sums[2] += total as f64;
        }
        let m = videos.len() as f64;
        history.push(EpochStats {
            loss_cls: (sums[0] / m) as f32,
            loss_loc: (sums[1] / m) as f32,
            loss_total: (sums[2] / m) as f32,
        });
    }
    Ok((params, history))
}

/// Writes one CSV row per epoch: `epoch,loss_cls,loss_loc,loss_total`.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,loss_cls,loss_loc,loss_total\n");
    for (epoch, h) in history.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            epoch, h.loss_cls, h.loss_loc, h.loss_total
        ));
    }
    std::fs::write(path, out).map_err(|e| EdsError::io_at("write", path, e))
}

/// Keyshot F1 of a predicted mask against every user summary: precision
/// and recall from frame overlap, harmonic mean per user, then the
/// dataset's aggregation (best user or mean over users).
pub fn f1_against_users(pred: &SummaryMask, users: &[SummaryMask], mode: F1Mode) -> Result<f32> {
    if users.is_empty() {
        return Err(EdsError::invalid("f1 needs at least one user summary"));
    }
    let mut best = 0.0f64;
    let mut sum = 0.0f64;
    for u in users {
        if u.len() != pred.len() {
            return Err(EdsError::shape(format!(
                "user summary of {} frames vs prediction of {}",
                u.len(),
                pred.len()
            )));
        }
        let inter = pred
            .frames()
            .iter()
            .zip(u.frames())
            .filter(|(a, b)| **a && **b)
            .count() as f64;
        let np = pred.count() as f64;
        let nu = u.count() as f64;
        let p = if np == 0.0 { 0.0 } else { inter / np };
        let r = if nu == 0.0 { 0.0 } else { inter / nu };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        best = best.max(f);
        sum += f;
    }
    Ok(match mode {
        F1Mode::Max => best as f32,
        F1Mode::Mean => (sum / users.len() as f64) as f32,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct VideoScore {
    pub id: String,
    pub f1: f32,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub f1_mode: F1Mode,
    pub videos: Vec<VideoScore>,
    pub mean_f1: f32,
}

/// Summarizes each video with the given parameters and scores it against
/// its user summaries.
pub fn evaluate(
    videos: &[&LoadedVideo],
    cfg: &RunConfig,
    params: &ModelParams,
    mode: F1Mode,
) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(EdsError::invalid("evaluation needs at least one video"));
    }
    let mut scores = Vec::with_capacity(videos.len());
    let mut sum = 0.0f64;
    for v in videos {
        if v.user_summaries.is_empty() {
            return Err(EdsError::invalid(format!(
                "video {} has no user summaries to score against",
                v.id
            )));
        }
        let summary = make_summary(&v.features, cfg, params)?;
        let f1 = f1_against_users(&summary.mask, &v.user_summaries, mode)?;
        sum += f1 as f64;
        scores.push(VideoScore {
            id: v.id.clone(),
            f1,
        });
    }
    Ok(EvalReport {
        f1_mode: mode,
        videos: scores,
        mean_f1: (sum / videos.len() as f64) as f32,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldScore {
    pub fold: usize,
    pub test_videos: Vec<String>,
    pub mean_f1: f32,
}

#[derive(Clone, Debug, Serialize)]
pub struct CrossValReport {
    pub folds: Vec<FoldScore>,
    pub mean_f1: f32,
}

/// K-fold cross-validation: disjoint seeded test partitions, a fresh model
/// trained on the remainder each time, mean F1 per fold.
pub fn cross_validate(ds: &Dataset, cfg: &RunConfig, n_folds: usize) -> Result<CrossValReport> {
    let parts = split_folds(ds.videos.len(), n_folds, cfg.seed)?;
    let mut folds = Vec::with_capacity(parts.len());
    let mut sum = 0.0f64;
    for (fi, test_idx) in parts.iter().enumerate() {
        let mut in_test = vec![false; ds.videos.len()];
        for &i in test_idx {
            in_test[i] = true;
        }
        let train_vids: Vec<&LoadedVideo> = ds
            .videos
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_test[*i])
            .map(|(_, v)| v)
            .collect();
        let test_vids: Vec<&LoadedVideo> = test_idx.iter().map(|&i| &ds.videos[i]).collect();
        let (params, _) = train(&train_vids, cfg)?;
        let report = evaluate(&test_vids, cfg, &params, ds.f1_mode)?;
        sum += report.mean_f1 as f64;
        folds.push(FoldScore {
            fold: fi,
            test_videos: test_vids.iter().map(|v| v.id.clone()).collect(),
            mean_f1: report.mean_f1,
        });
    }
    Ok(CrossValReport {
        mean_f1: (sum / parts.len() as f64) as f32,
        folds,
    })
}
