//! Anchor proposals over the frame axis: generation, tIoU, label
//! assignment with ratio sampling, offset regression targets, and NMS.
//!
//! Anchors live on the continuous line and are not clipped here; clipping
//! happens when pooling features or decoding predictions.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{EdsError, Result};

/// Sampled negatives aim for this share of zero-overlap proposals.
pub const UNIMPORTANT_FRACTION: f64 = 2.0 / 3.0;

/// Half-open interval on the continuous frame axis. May extend past the
/// video bounds; construction only requires a positive length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment {
    start: f32,
    end: f32,
}

impl Segment {
    pub fn new(start: f32, end: f32) -> Result<Self> {
        if !(start < end) || !start.is_finite() || !end.is_finite() {
            return Err(EdsError::invalid(format!(
                "degenerate segment [{start}, {end})"
            )));
        }
        Ok(Segment { start, end })
    }

    pub fn start(&self) -> f32 {
        self.start
    }

    pub fn end(&self) -> f32 {
        self.end
    }

    pub fn len(&self) -> f32 {
        self.end - self.start
    }

    pub fn center(&self) -> f32 {
        0.5 * (self.start + self.end)
    }
}

/// Ground-truth span in whole frames, end exclusive, inside [0, N].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GtSegment {
    pub start: usize,
    pub end: usize,
}

impl GtSegment {
    pub fn new(start: usize, end: usize, n: usize) -> Result<Self> {
        if start >= end || end > n {
            return Err(EdsError::invalid(format!(
                "ground truth [{start}, {end}) outside video of {n} frames"
            )));
        }
        Ok(GtSegment { start, end })
    }

    pub fn span(&self) -> Segment {
        Segment {
            start: self.start as f32,
            end: self.end as f32,
        }
    }
}

/// |a and b| / |a or b| on the real line.
pub fn tiou(a: Segment, b: Segment) -> f32 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.len() + b.len() - inter;
    inter / union
}

#[derive(Clone, Copy, Debug)]
pub struct Proposal {
    /// Center frame index.
    pub t: usize,
    /// Scale index into the anchor config.
    pub k: usize,
    pub span: Segment,
}

#[derive(Clone, Debug)]
pub struct AnchorConfig {
    pub scales: Vec<usize>,
    pub pos_tiou: f32,
    pub neg_band_max: f32,
    pub neg_per_pos: usize,
    pub min_neg: usize,
}

impl AnchorConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        AnchorConfig {
            scales: cfg.anchor_scales.clone(),
            pos_tiou: cfg.pos_tiou,
            neg_band_max: cfg.neg_band_max,
            neg_per_pos: cfg.neg_per_pos,
            min_neg: cfg.min_neg,
        }
    }
}

/// One proposal per (frame, scale), ordered by (t, k), ranges unclipped.
pub fn generate_anchors(n: usize, cfg: &AnchorConfig) -> Result<Vec<Proposal>> {
    if cfg.scales.is_empty() {
        return Err(EdsError::invalid("anchor scale list is empty"));
    }
    if n == 0 {
        return Err(EdsError::invalid("cannot anchor an empty video"));
    }
    let mut out = Vec::with_capacity(n * cfg.scales.len());
    for t in 0..n {
        for (k, &scale) in cfg.scales.iter().enumerate() {
            let half = scale as f32 / 2.0;
            out.push(Proposal {
                t,
                k,
                span: Segment {
                    start: t as f32 - half,
                    end: t as f32 + half,
                },
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    NegUnimportant,
    NegIncomplete,
    Ignored,
}

#[derive(Clone, Copy, Debug)]
pub struct LabeledProposal {
    pub proposal: Proposal,
    pub label: Label,
    pub matched_gt: Option<GtSegment>,
    pub tiou: f32,
    /// (dc, dl) against the matched ground truth; positives only.
    pub offset_target: Option<(f32, f32)>,
}

fn classify(t: f32, cfg: &AnchorConfig) -> Label {
    if t > cfg.pos_tiou {
        Label::Positive
    } else if t == 0.0 {
        Label::NegUnimportant
    } else if t < cfg.neg_band_max {
        Label::NegIncomplete
    } else {
        Label::Ignored
    }
}

/// Labels every proposal by its best-overlap ground truth, then samples:
/// all positives P plus up to neg_per_pos * P negatives (min_neg when P is
/// zero), negatives split unimportant:incomplete at 2:1 with backfill.
/// Proposals in the ignore band never appear in the output.
pub fn assign_labels(
    proposals: &[Proposal],
    gts: &[GtSegment],
    cfg: &AnchorConfig,
    rng: &mut impl Rng,
) -> Result<Vec<LabeledProposal>> {
    if gts.is_empty() {
        return Err(EdsError::invalid("label assignment needs ground truth"));
    }
    let mut positives = Vec::new();
    let mut unimportant = Vec::new();
    let mut incomplete = Vec::new();
    for &p in proposals {
        let (best_gt, best_tiou) = gts
            .iter()
            .map(|g| (g, tiou(p.span, g.span())))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty gts");
        let label = classify(best_tiou, cfg);
        let lp = LabeledProposal {
            proposal: p,
            label,
            matched_gt: (label == Label::Positive).then_some(*best_gt),
            tiou: best_tiou,
            offset_target: (label == Label::Positive)
                .then(|| encode_offsets(&p, *best_gt)),
        };
        match label {
            Label::Positive => positives.push(lp),
            Label::NegUnimportant => unimportant.push(lp),
            Label::NegIncomplete => incomplete.push(lp),
            Label::Ignored => {}
        }
    }

    let neg_quota = if positives.is_empty() {
        cfg.min_neg
    } else {
        cfg.neg_per_pos * positives.len()
    };
    let neg_quota = neg_quota.min(unimportant.len() + incomplete.len());
    let want_unimp = ((neg_quota as f64 * UNIMPORTANT_FRACTION).round() as usize).min(neg_quota);
    let take_unimp = want_unimp.min(unimportant.len());
    let take_inc = (neg_quota - take_unimp).min(incomplete.len());
    // Backfill: whichever pool fell short, top up from the other.
    let take_unimp = (neg_quota - take_inc).min(unimportant.len());

    let mut sample = positives;
    sample.extend(unimportant.choose_multiple(rng, take_unimp).copied());
    sample.extend(incomplete.choose_multiple(rng, take_inc).copied());
    Ok(sample)
}

/// Center shift in units of anchor length, log length ratio.
pub fn encode_offsets(p: &Proposal, g: GtSegment) -> (f32, f32) {
    let gs = g.span();
    let dc = (gs.center() - p.span.center()) / p.span.len();
    let dl = (gs.len() / p.span.len()).ln();
    (dc, dl)
}

/// Applies predicted offsets and clips to [0, N]. Returns None when the
/// clipped span collapses to nothing.
pub fn decode_offsets(p: &Proposal, dc: f32, dl: f32, n: usize) -> Option<Segment> {
    let c = p.span.center() + dc * p.span.len();
    let l = p.span.len() * dl.exp();
    let start = (c - 0.5 * l).max(0.0);
    let end = (c + 0.5 * l).min(n as f32);
    (start < end).then_some(Segment { start, end })
}

#[derive(Clone, Copy, Debug)]
pub struct ScoredSegment {
    pub span: Segment,
    pub score: f32,
}

/// Greedy NMS. Sorting is canonical (score desc, start asc, length asc),
/// so the result does not depend on input order.
pub fn nms(items: &[ScoredSegment], threshold: f32) -> Vec<ScoredSegment> {
    let mut order: Vec<&ScoredSegment> = items.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.span.start.total_cmp(&b.span.start))
            .then(a.span.len().total_cmp(&b.span.len()))
    });
    let mut kept: Vec<ScoredSegment> = Vec::new();
    for cand in order {
        if kept.iter().all(|k| tiou(k.span, cand.span) <= threshold) {
            kept.push(*cand);
        }
    }
    kept
}
