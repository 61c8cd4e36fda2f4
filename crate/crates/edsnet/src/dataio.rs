//! Dataset plumbing: the EDSF feature archive, the JSON manifest, model
//! parameter files, fold splitting, and a synthetic planted-keyshot
//! generator for desk-scale end-to-end checks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{EdsError, Result};
use crate::numcore::Tensor;
use crate::pooling::ModelParams;
use crate::proposals::GtSegment;
use crate::summarize::SummaryMask;

pub const EDSF_MAGIC: [u8; 4] = *b"EDSF";
pub const EDSF_VERSION: u32 = 1;

/// Flat little-endian feature archive: 16-byte header (magic, version,
/// n_frames, feat_dim), then row-major f32 payload. Bit-exact round trip.
pub fn write_archive(features: &Tensor, path: &Path) -> Result<()> {
    if features.shape().len() != 2 || features.is_empty() {
        return Err(EdsError::shape(format!(
            "archive wants a non-empty matrix, got {:?}",
            features.shape()
        )));
    }
    features.check_finite("archive payload")?;
    let (n, f) = (features.rows() as u32, features.cols() as u32);
    let mut bytes = Vec::with_capacity(16 + features.len() * 4);
    bytes.extend_from_slice(&EDSF_MAGIC);
    bytes.extend_from_slice(&EDSF_VERSION.to_le_bytes());
    bytes.extend_from_slice(&n.to_le_bytes());
    bytes.extend_from_slice(&f.to_le_bytes());
    for &v in features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| EdsError::io_at("writing", path, e))
}

pub fn read_archive(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| EdsError::io_at("reading", path, e))?;
    let ctx = path.display();
    if bytes.len() < 16 {
        return Err(EdsError::format(format!("{ctx}: truncated header")));
    }
    if bytes[..4] != EDSF_MAGIC {
        return Err(EdsError::format(format!("{ctx}: bad magic")));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if word(4) != EDSF_VERSION {
        return Err(EdsError::format(format!("{ctx}: unknown version {}", word(4))));
    }
    let (n, f) = (word(8) as usize, word(12) as usize);
    let want = 16 + n
        .checked_mul(f)
        .and_then(|e| e.checked_mul(4))
        .ok_or_else(|| EdsError::format(format!("{ctx}: absurd header size")))?;
    if bytes.len() != want {
        return Err(EdsError::format(format!(
            "{ctx}: header implies {want} bytes, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::from_vec(vec![n, f], data)?;
    t.check_finite("archive payload")?;
    Ok(t)
}

/// User-summary aggregation convention carried by the manifest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Mode {
    #[default]
    Max,
    Mean,
}

fn default_fps() -> f32 {
    30.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    pub n_frames: usize,
    #[serde(default = "default_fps")]
    pub fps: f32,
    /// Relative to the manifest file.
    pub feature_path: String,
    /// Keyshot ground truth as [start, end) frame pairs.
    #[serde(default)]
    pub gt_segments: Vec<[usize; 2]>,
    /// Per-user masks, run-length encoded (false run first).
    #[serde(default)]
    pub user_summaries: Vec<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<Vec<f32>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(default)]
    pub f1_mode: F1Mode,
    pub videos: Vec<VideoEntry>,
}

/// One manifest entry with its archive loaded and all invariants checked.
#[derive(Clone, Debug)]
pub struct LoadedVideo {
    pub id: String,
    pub fps: f32,
    pub features: Tensor,
    pub gt_segments: Vec<GtSegment>,
    pub user_summaries: Vec<SummaryMask>,
    pub importance: Option<Vec<f32>>,
}

impl LoadedVideo {
    pub fn n_frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub f1_mode: F1Mode,
    pub videos: Vec<LoadedVideo>,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text =
        fs::read_to_string(path).map_err(|e| EdsError::io_at("reading", path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| EdsError::format(format!("{}: {e}", path.display())))
}

/// Loads and cross-validates a manifest: every archive must exist and agree
/// with the declared frame count, and every video needs ground truth of
/// some kind. Feature paths resolve against the manifest's directory.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = load_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let id = &entry.id;
        let features = read_archive(&base.join(&entry.feature_path))?;
        if features.rows() != entry.n_frames {
            return Err(EdsError::format(format!(
                "video {id}: manifest says {} frames, archive has {}",
                entry.n_frames,
                features.rows()
            )));
        }
        if entry.gt_segments.is_empty() && entry.user_summaries.is_empty() {
            return Err(EdsError::format(format!(
                "video {id}: neither gt_segments nor user_summaries present"
            )));
        }
        let gt_segments = entry
            .gt_segments
            .iter()
            .map(|&[s, e]| GtSegment::new(s, e, entry.n_frames))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| EdsError::format(format!("video {id}: {e}")))?;
        let mut user_summaries = Vec::with_capacity(entry.user_summaries.len());
        for runs in &entry.user_summaries {
            let mask = SummaryMask::from_rle(runs)
                .map_err(|e| EdsError::format(format!("video {id}: {e}")))?;
            if mask.len() != entry.n_frames {
                return Err(EdsError::format(format!(
                    "video {id}: user summary covers {} of {} frames",
                    mask.len(),
                    entry.n_frames
                )));
            }
            user_summaries.push(mask);
        }
        if let Some(imp) = &entry.importance {
            if imp.len() != entry.n_frames || imp.iter().any(|v| !v.is_finite()) {
                return Err(EdsError::format(format!(
                    "video {id}: malformed importance track"
                )));
            }
        }
        videos.push(LoadedVideo {
            id: id.clone(),
            fps: entry.fps,
            features,
            gt_segments,
            user_summaries,
            importance: entry.importance.clone(),
        });
    }
    Ok(Dataset {
        name: manifest.name,
        f1_mode: manifest.f1_mode,
        videos,
    })
}

/// Background frames separate planted keyshots by at least this many frames
/// so shot boundaries are well defined.
const KEYSHOT_GAP: usize = 5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub n_frames: usize,
    pub feat_dim: usize,
    pub n_keyshots: usize,
    /// Inclusive [min, max] keyshot length in frames.
    pub keyshot_len: [usize; 2],
    /// Amplitude of the planted direction relative to unit-norm noise.
    pub snr: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_videos: 10,
            n_frames: 200,
            feat_dim: 64,
            n_keyshots: 2,
            keyshot_len: [8, 12],
            snr: 3.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.keyshot_len;
        if self.n_videos == 0
            || self.n_frames == 0
            || self.feat_dim == 0
            || self.n_keyshots == 0
            || lo == 0
            || lo > hi
        {
            return Err(EdsError::invalid(format!("degenerate spec {self:?}")));
        }
        if !self.snr.is_finite() || self.snr < 0.0 {
            return Err(EdsError::invalid(format!("snr {}", self.snr)));
        }
        // A perfect summary must fit the 15% budget even at max lengths.
        let budget = (0.15 * self.n_frames as f64).floor() as usize;
        if self.n_keyshots * hi > budget {
            return Err(EdsError::invalid(format!(
                "infeasible spec: {} keyshots of up to {hi} frames exceed the \
                 15% budget ({budget}) of a {}-frame video",
                self.n_keyshots, self.n_frames
            )));
        }
        if self.n_keyshots * hi + KEYSHOT_GAP * (self.n_keyshots + 1) > self.n_frames {
            return Err(EdsError::invalid(
                "infeasible spec: keyshots plus separating gaps exceed the video",
            ));
        }
        Ok(())
    }
}

/// Gaussian direction normalized to unit length.
fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let mut v = vec![0.0f32; dim];
        let mut i = 0;
        while i < dim {
            let u1 = rng.gen::<f32>().max(1e-7);
            let u2 = rng.gen::<f32>();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f32::consts::TAU * u2).sin_cos();
            v[i] = r * c;
            if i + 1 < dim {
                v[i + 1] = r * s;
            }
            i += 2;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-3 {
            v.iter_mut().for_each(|x| *x /= norm);
            return v;
        }
    }
}

/// Disjoint keyshot spans with at least KEYSHOT_GAP background frames
/// around each, free slack spread by stars and bars.
fn place_keyshots(rng: &mut impl Rng, n_frames: usize, lens: &[usize]) -> Vec<(usize, usize)> {
    let k = lens.len();
    let total: usize = lens.iter().sum();
    let extra = n_frames - total - KEYSHOT_GAP * (k + 1);
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.gen_range(0..=extra)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(k);
    let mut pos = KEYSHOT_GAP;
    let mut prev = 0;
    for (i, &len) in lens.iter().enumerate() {
        pos += cuts[i] - prev;
        prev = cuts[i];
        spans.push((pos, pos + len));
        pos += len + KEYSHOT_GAP;
    }
    spans
}

/// Writes archives plus a manifest into `out_dir` and returns the manifest
/// path. Byte-deterministic for a fixed spec.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| EdsError::io_at("creating", out_dir, e))?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let f = spec.feat_dim;
    let mut entries = Vec::with_capacity(spec.n_videos);
    for v in 0..spec.n_videos {
        let lens: Vec<usize> = (0..spec.n_keyshots)
            .map(|_| rng.gen_range(spec.keyshot_len[0]..=spec.keyshot_len[1]))
            .collect();
        let spans = place_keyshots(&mut rng, spec.n_frames, &lens);
        let dirs: Vec<Vec<f32>> = (0..spec.n_keyshots)
            .map(|_| unit_vector(&mut rng, f))
            .collect();
        let mut data = vec![0.0f32; spec.n_frames * f];
        for t in 0..spec.n_frames {
            let noise = unit_vector(&mut rng, f);
            let row = &mut data[t * f..(t + 1) * f];
            row.copy_from_slice(&noise);
            if let Some(k) = spans.iter().position(|&(a, b)| t >= a && t < b) {
                for (r, d) in row.iter_mut().zip(&dirs[k]) {
                    *r += spec.snr * d;
                }
            }
        }
        let file = format!("video_{v:03}.edsf");
        write_archive(&Tensor::from_vec(vec![spec.n_frames, f], data)?, &out_dir.join(&file))?;
        let mut mask = vec![false; spec.n_frames];
        for &(a, b) in &spans {
            mask[a..b].iter_mut().for_each(|m| *m = true);
        }
        entries.push(VideoEntry {
            id: format!("synthetic_{v:03}"),
            n_frames: spec.n_frames,
            fps: default_fps(),
            feature_path: file,
            gt_segments: spans.iter().map(|&(a, b)| [a, b]).collect(),
            user_summaries: vec![SummaryMask::new(mask).to_rle()],
            importance: None,
        });
    }
    let manifest = DatasetManifest {
        name: "synthetic".into(),
        f1_mode: F1Mode::Max,
        videos: entries,
    };
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| EdsError::io_at("writing", &path, e))?;
    Ok(path)
}

/// Disjoint near-equal test partitions covering every video. The train
/// split of fold k is everything outside `folds[k]`.
pub fn split_folds(n_videos: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 || n_videos < folds {
        return Err(EdsError::invalid(format!(
            "cannot split {n_videos} videos into {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_videos).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let base = n_videos / folds;
    let extra = n_videos % folds;
    let mut out = Vec::with_capacity(folds);
    let mut at = 0;
    for k in 0..folds {
        let size = base + usize::from(k < extra);
        let mut fold: Vec<usize> = order[at..at + size].to_vec();
        fold.sort_unstable();
        out.push(fold);
        at += size;
    }
    Ok(out)
}

pub const EDSP_MAGIC: [u8; 4] = *b"EDSP";
pub const EDSP_VERSION: u32 = 1;

/// Versioned parameter file: header, config echo (JSON), then each tensor
/// as rank, dims, and little-endian f32 data in `tensors_mut` order.
pub fn save_params(params: &ModelParams, cfg: &RunConfig, path: &Path) -> Result<()> {
    let mut owned = params.clone();
    let tensors = owned.tensors_mut();
    let echo = cfg.to_json();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&EDSP_MAGIC);
    bytes.extend_from_slice(&EDSP_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(echo.len() as u32).to_le_bytes());
    bytes.extend_from_slice(echo.as_bytes());
    bytes.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        bytes.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| EdsError::io_at("writing", path, e))
}

/// Rebuilds parameters for `cfg` and overwrites them from the file. Any
/// structural mismatch (tensor count or shape) is rejected, so params
/// trained under a different architecture cannot be loaded silently.
pub fn load_params(cfg: &RunConfig, path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| EdsError::io_at("reading", path, e))?;
    let ctx = path.display();
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > bytes.len() {
            return Err(EdsError::format(format!("{ctx}: truncated parameter file")));
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };
    if take(4)? != EDSP_MAGIC {
        return Err(EdsError::format(format!("{ctx}: bad magic")));
    }
    let word = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    if word(take(4)?) != EDSP_VERSION as usize {
        return Err(EdsError::format(format!("{ctx}: unknown version")));
    }
    let echo_len = word(take(4)?);
    take(echo_len)?;
    let count = word(take(4)?);

    let mut params = ModelParams::init(cfg, &mut ChaCha20Rng::seed_from_u64(0));
    let targets = params.tensors_mut();
    if targets.len() != count {
        return Err(EdsError::format(format!(
            "{ctx}: file holds {count} tensors, config wants {}",
            targets.len()
        )));
    }
    for t in targets {
        let rank = word(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(word(take(4)?));
        }
        if shape != t.shape() {
            return Err(EdsError::format(format!(
                "{ctx}: tensor shape {shape:?} does not match config shape {:?}",
                t.shape()
            )));
        }
        let raw = take(t.len() * 4)?;
        for (dst, src) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
        t.check_finite("loaded parameter")?;
    }
    if at != bytes.len() {
        return Err(EdsError::format(format!("{ctx}: trailing bytes")));
    }
    Ok(params)
}
