//! Run configuration. One flat JSON document drives training, evaluation,
//! summarization, and the parameter-count report; every field has a default
//! so an empty object is a valid config.

use serde::{Deserialize, Serialize};

use crate::error::{EdsError, Result};
use crate::numcore::AdamHyper;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Softmax,
    Fourier,
    Nystrom,
    Dwt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Roi,
    Fft,
    Flat,
}

impl MixerKind {
    pub const ALL: [MixerKind; 4] = [
        MixerKind::Softmax,
        MixerKind::Fourier,
        MixerKind::Nystrom,
        MixerKind::Dwt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::Softmax => "softmax",
            MixerKind::Fourier => "fourier",
            MixerKind::Nystrom => "nystrom",
            MixerKind::Dwt => "dwt",
        }
    }
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 3] = [PoolingKind::Roi, PoolingKind::Fft, PoolingKind::Flat];

    pub fn name(self) -> &'static str {
        match self {
            PoolingKind::Roi => "roi",
            PoolingKind::Fft => "fft",
            PoolingKind::Flat => "flat",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_mixer")]
    pub mixer: MixerKind,
    #[serde(default = "d_pooling")]
    pub pooling: PoolingKind,
    /// Anchor lengths in frames, one proposal per (frame, scale).
    #[serde(default = "d_scales")]
    pub anchor_scales: Vec<usize>,
    /// Width of the incoming frame features.
    #[serde(default = "d_feat_dim")]
    pub feat_dim: usize,
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    /// Number of linear layers in the encoder compression stack.
    #[serde(default = "d_fc_depth")]
    pub fc_depth: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f32,
    #[serde(default = "d_lr")]
    pub lr: f32,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Weight of the localization term in the joint loss.
    #[serde(default = "d_loss_balance")]
    pub loss_balance: f32,
    #[serde(default = "d_nms_threshold")]
    pub nms_threshold: f32,
    /// Summary length budget as a fraction of the video.
    #[serde(default = "d_summary_ratio")]
    pub summary_ratio: f32,
    /// Overlap above which a proposal counts as positive.
    #[serde(default = "d_pos_tiou")]
    pub pos_tiou: f32,
    /// Upper edge of the incomplete-negative overlap band.
    #[serde(default = "d_neg_band_max")]
    pub neg_band_max: f32,
    #[serde(default = "d_neg_per_pos")]
    pub neg_per_pos: usize,
    /// Negatives sampled when a video has no positive proposals.
    #[serde(default = "d_min_neg")]
    pub min_neg: usize,
    #[serde(default = "d_nystrom_landmarks")]
    pub nystrom_landmarks: usize,
    #[serde(default = "d_nystrom_pinv_iters")]
    pub nystrom_pinv_iters: usize,
    /// Replace the iterative pseudo-inverse with exact elimination.
    #[serde(default)]
    pub nystrom_pinv_exact: bool,
    #[serde(default = "d_kts_penalty")]
    pub kts_penalty: f32,
    /// Change-point budget; unset means floor(n_frames / 10).
    #[serde(default)]
    pub kts_max_cp: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn d_mixer() -> MixerKind {
    MixerKind::Fourier
}
fn d_pooling() -> PoolingKind {
    PoolingKind::Fft
}
fn d_scales() -> Vec<usize> {
    vec![4, 8, 12]
}
fn d_feat_dim() -> usize {
    1024
}
fn d_hidden() -> usize {
    128
}
fn d_fc_depth() -> usize {
    1
}
fn d_dropout() -> f32 {
    0.5
}
fn d_lr() -> f32 {
    5e-5
}
fn d_weight_decay() -> f32 {
    1e-5
}
fn d_epochs() -> usize {
    300
}
fn d_loss_balance() -> f32 {
    1.0
}
fn d_nms_threshold() -> f32 {
    0.5
}
fn d_summary_ratio() -> f32 {
    0.15
}
fn d_pos_tiou() -> f32 {
    0.6
}
fn d_neg_band_max() -> f32 {
    0.3
}
fn d_neg_per_pos() -> usize {
    3
}
fn d_min_neg() -> usize {
    8
}
fn d_nystrom_landmarks() -> usize {
    16
}
fn d_nystrom_pinv_iters() -> usize {
    6
}
fn d_kts_penalty() -> f32 {
    1.0
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config object is valid")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchor_scales.is_empty() {
            return Err(EdsError::invalid("anchor_scales must be non-empty"));
        }
        if self.anchor_scales.iter().any(|&s| s == 0) {
            return Err(EdsError::invalid("anchor scales must be positive"));
        }
        if self.feat_dim == 0 || self.hidden == 0 {
            return Err(EdsError::invalid("feat_dim and hidden must be positive"));
        }
        if self.fc_depth == 0 {
            return Err(EdsError::invalid("fc_depth must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EdsError::invalid(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(EdsError::invalid(format!("lr {} must be positive", self.lr)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(EdsError::invalid("weight_decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(EdsError::invalid(format!(
                "nms_threshold {} outside [0, 1]",
                self.nms_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.summary_ratio) || self.summary_ratio == 0.0 {
            return Err(EdsError::invalid(format!(
                "summary_ratio {} outside (0, 1)",
                self.summary_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.pos_tiou) || self.pos_tiou == 0.0 {
            return Err(EdsError::invalid("pos_tiou outside (0, 1]"));
        }
        if self.neg_band_max <= 0.0 || self.neg_band_max > self.pos_tiou {
            return Err(EdsError::invalid(
                "neg_band_max must lie in (0, pos_tiou]",
            ));
        }
        if self.nystrom_landmarks == 0 {
            return Err(EdsError::invalid("nystrom_landmarks must be positive"));
        }
        if self.kts_penalty < 0.0 || !self.kts_penalty.is_finite() {
            return Err(EdsError::invalid("kts_penalty must be non-negative"));
        }
        Ok(())
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }

    pub fn max_scale(&self) -> usize {
        *self.anchor_scales.iter().max().expect("non-empty scales")
    }
}
