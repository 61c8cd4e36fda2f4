//! Python bindings: flat-buffer wrappers over the edsnet crate. Matrices
//! travel as row-major `list[float]` plus explicit dimensions; heavier
//! results (summaries) come back as the same JSON the CLI emits.

use std::path::Path;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use edsnet::config::MixerKind;
use edsnet::dataio::{self, F1Mode, LoadedVideo, SyntheticSpec};
use edsnet::mixers;
use edsnet::numcore;
use edsnet::pooling;
use edsnet::proposals::{self, AnchorConfig, ScoredSegment, Segment};
use edsnet::summarize::{SummaryMask, SummaryOutput};
use edsnet::summarize as summ;
use edsnet::train as trn;
use edsnet::{RunConfig, Tensor};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_config(json: &str) -> PyResult<RunConfig> {
    RunConfig::from_json(json).map_err(err)
}

fn tensor_of(data: Vec<f32>, rows: usize, cols: usize) -> PyResult<Tensor> {
    Tensor::from_vec(vec![rows, cols], data).map_err(err)
}

/// Forward DFT of a real sequence; returns (real, imaginary) parts.
#[pyfunction]
fn dft_1d(x: Vec<f32>) -> (Vec<f32>, Vec<f32>) {
    let spec = numcore::dft_1d(&x);
    (spec.re, spec.im)
}

/// Inverse DFT; returns the real part of the reconstruction.
#[pyfunction]
fn idft_1d(re: Vec<f32>, im: Vec<f32>) -> PyResult<Vec<f32>> {
    numcore::idft_1d(&numcore::ComplexSequence { re, im }).map_err(err)
}

/// One level of the orthonormal Haar transform: (approximation, detail).
#[pyfunction]
fn haar_dwt(x: Vec<f32>) -> PyResult<(Vec<f32>, Vec<f32>)> {
    numcore::haar_dwt_1level(&x).map_err(err)
}

/// Inverse of `haar_dwt`.
#[pyfunction]
fn haar_idwt(a: Vec<f32>, d: Vec<f32>) -> PyResult<Vec<f32>> {
    numcore::haar_idwt_1level(&a, &d).map_err(err)
}

/// Temporal IoU of two [start, end) intervals.
#[pyfunction]
fn tiou(a: (f32, f32), b: (f32, f32)) -> PyResult<f32> {
    let sa = Segment::new(a.0, a.1).map_err(err)?;
    let sb = Segment::new(b.0, b.1).map_err(err)?;
    Ok(proposals::tiou(sa, sb))
}

/// Anchor grid over `n` frames: one (frame, scale_index, start, end) per
/// proposal, scanning frames in the inner loop like the model heads do.
#[pyfunction]
fn generate_anchors(n: usize, scales: Vec<usize>) -> PyResult<Vec<(usize, usize, f32, f32)>> {
    let cfg = AnchorConfig {
        scales,
        pos_tiou: 0.6,
        neg_band_max: 0.3,
        neg_per_pos: 3,
        min_neg: 8,
    };
    let anchors = proposals::generate_anchors(n, &cfg).map_err(err)?;
    Ok(anchors
        .iter()
        .map(|p| (p.t, p.k, p.span.start(), p.span.end()))
        .collect())
}

/// Greedy NMS over (start, end, score) triples.
#[pyfunction]
fn nms(segments: Vec<(f32, f32, f32)>, threshold: f32) -> PyResult<Vec<(f32, f32, f32)>> {
    let items = segments
        .into_iter()
        .map(|(s, e, score)| {
            Ok(ScoredSegment {
                span: Segment::new(s, e).map_err(err)?,
                score,
            })
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok(proposals::nms(&items, threshold)
        .iter()
        .map(|s| (s.span.start(), s.span.end(), s.score))
        .collect())
}

/// Kernel temporal segmentation; returns the chosen change points.
#[pyfunction]
fn kts(
    features: Vec<f32>,
    n_frames: usize,
    feat_dim: usize,
    penalty: f32,
    max_cp: usize,
) -> PyResult<Vec<usize>> {
    let x = tensor_of(features, n_frames, feat_dim)?;
    let bounds = summ::kts(&x, penalty, max_cp).map_err(err)?;
    Ok(bounds.change_points().to_vec())
}

/// Exact 0/1 knapsack; returns the selected shot indices.
#[pyfunction]
fn knapsack_select(values: Vec<f32>, lengths: Vec<usize>, capacity: usize) -> Vec<usize> {
    summ::knapsack_select(&values, &lengths, capacity)
}

/// Parameter-free double-spectrum mixing of an n-by-f matrix.
#[pyfunction]
fn fourier_mix(x: Vec<f32>, n: usize, f: usize) -> PyResult<Vec<f32>> {
    let t = tensor_of(x, n, f)?;
    Ok(mixers::fourier_mix(&t).map_err(err)?.data().to_vec())
}

/// Trainable-parameter count for a configuration (JSON text).
#[pyfunction]
fn count_params(config_json: &str) -> PyResult<usize> {
    Ok(pooling::count_params(&parse_config(config_json)?))
}

/// Mixer names accepted by configurations, in canonical order.
#[pyfunction]
fn mixer_names() -> Vec<&'static str> {
    MixerKind::ALL.iter().map(|k| k.name()).collect()
}

/// Generates a planted-keyshot dataset; returns the manifest path.
/// `spec_json` of None uses the default generator spec.
#[pyfunction]
#[pyo3(signature = (out_dir, spec_json=None))]
fn gen_synthetic(out_dir: &str, spec_json: Option<&str>) -> PyResult<String> {
    let spec: SyntheticSpec = match spec_json {
        Some(text) => serde_json::from_str(text).map_err(err)?,
        None => SyntheticSpec::default(),
    };
    let path = dataio::gen_synthetic(&spec, Path::new(out_dir)).map_err(err)?;
    Ok(path.display().to_string())
}

fn load_videos(manifest: &str) -> PyResult<(Vec<LoadedVideo>, F1Mode)> {
    let ds = dataio::load_dataset(Path::new(manifest)).map_err(err)?;
    Ok((ds.videos, ds.f1_mode))
}

/// Trains on every video in the manifest, saves parameters to
/// `params_out`, and returns the loss history as
/// (classification, localization, total) per epoch.
#[pyfunction]
fn train(config_json: &str, manifest: &str, params_out: &str) -> PyResult<Vec<(f32, f32, f32)>> {
    let cfg = parse_config(config_json)?;
    let (videos, _) = load_videos(manifest)?;
    let refs: Vec<&LoadedVideo> = videos.iter().collect();
    let (params, history) = trn::train(&refs, &cfg).map_err(err)?;
    dataio::save_params(&params, &cfg, Path::new(params_out)).map_err(err)?;
    Ok(history
        .iter()
        .map(|h| (h.loss_cls, h.loss_loc, h.loss_total))
        .collect())
}

/// Scores saved parameters against the manifest's user summaries;
/// returns (mean_f1, [(video_id, f1), ...]).
#[pyfunction]
fn evaluate(
    config_json: &str,
    manifest: &str,
    params_path: &str,
) -> PyResult<(f32, Vec<(String, f32)>)> {
    let cfg = parse_config(config_json)?;
    let (videos, mode) = load_videos(manifest)?;
    let refs: Vec<&LoadedVideo> = videos.iter().collect();
    let params = dataio::load_params(&cfg, Path::new(params_path)).map_err(err)?;
    let report = trn::evaluate(&refs, &cfg, &params, mode).map_err(err)?;
    Ok((
        report.mean_f1,
        report.videos.into_iter().map(|v| (v.id, v.f1)).collect(),
    ))
}

/// Summarizes one feature archive with saved parameters; returns the same
/// JSON document the CLI's summarize command emits.
#[pyfunction]
fn summarize(
    config_json: &str,
    params_path: &str,
    features_path: &str,
    video_id: &str,
) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    let params = dataio::load_params(&cfg, Path::new(params_path)).map_err(err)?;
    let features = dataio::read_archive(Path::new(features_path)).map_err(err)?;
    let summary = summ::make_summary(&features, &cfg, &params).map_err(err)?;
    serde_json::to_string_pretty(&SummaryOutput::new(video_id, &summary)).map_err(err)
}

/// F1 of a predicted frame mask against user masks; `mode` is "max" or
/// "mean" over users.
#[pyfunction]
fn f1_score(pred: Vec<bool>, users: Vec<Vec<bool>>, mode: &str) -> PyResult<f32> {
    let mode = match mode {
        "max" => F1Mode::Max,
        "mean" => F1Mode::Mean,
        other => return Err(err(format!("unknown f1 mode {other:?}"))),
    };
    let pred = SummaryMask::new(pred);
    let users: Vec<SummaryMask> = users.into_iter().map(SummaryMask::new).collect();
    trn::f1_against_users(&pred, &users, mode).map_err(err)
}

#[pymodule]
fn edsnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(dft_1d, m)?)?;
    m.add_function(wrap_pyfunction!(idft_1d, m)?)?;
    m.add_function(wrap_pyfunction!(haar_dwt, m)?)?;
    m.add_function(wrap_pyfunction!(haar_idwt, m)?)?;
    m.add_function(wrap_pyfunction!(tiou, m)?)?;
    m.add_function(wrap_pyfunction!(generate_anchors, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(kts, m)?)?;
    m.add_function(wrap_pyfunction!(knapsack_select, m)?)?;
    m.add_function(wrap_pyfunction!(fourier_mix, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(mixer_names, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    Ok(())
}
