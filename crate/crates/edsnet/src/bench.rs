//! Wall-clock scaling benchmark for the token mixers, plus the counting
//! allocator the binary installs to report peak memory.
//!
//! Each (mixer, length) cell times a single forward pass on an untracked
//! tape: one discarded warm-up run, then the median of the requested
//! trials. Scaling is summarized as the least-squares slope of ln(time)
//! against ln(length), so quadratic mixers land near 2 and log-linear ones
//! near 1.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::config::{MixerKind, RunConfig};
use crate::error::{EdsError, Result};
use crate::mixers::{mixer_fwd, MixerParams};
use crate::numcore::{Tape, Tensor};

// --- allocation counting ----------------------------------------------------

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

/// Forwarding allocator that tracks live bytes and their high-water mark.
/// The `edsnet` binary installs it as the global allocator; in library
/// builds nothing registers it and all readings stay zero.
pub struct CountingAlloc;

// SAFETY: defers all allocation to `System`; the counters are advisory.
unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let cur = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(cur, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

/// Runs `f` and reports the peak allocation growth above the bytes live at
/// entry. Zero unless `CountingAlloc` is the global allocator.
pub fn measure_peak<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let r = f();
    let peak = PEAK.load(Ordering::Relaxed).saturating_sub(base);
    (r, peak)
}

// --- benchmark --------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub mixer: MixerKind,
    pub seq_len: usize,
    pub feat_dim: usize,
    pub median_ms: f64,
    pub peak_alloc_bytes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// ln-ln least-squares slope per mixer, in input order.
    pub slopes: Vec<(MixerKind, f64)>,
}

/// Times every (mixer, length) pair at the given feature width. Lengths
/// must be distinct, at least two of them for the slope fit to mean
/// anything, and every trial count at least one.
pub fn run_bench(
    mixers: &[MixerKind],
    lengths: &[usize],
    feat_dim: usize,
    trials: usize,
) -> Result<BenchReport> {
    if mixers.is_empty() {
        return Err(EdsError::invalid("bench needs at least one mixer"));
    }
    if lengths.len() < 2 {
        return Err(EdsError::invalid("bench needs at least two lengths"));
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != lengths.len() || sorted[0] < 2 {
        return Err(EdsError::invalid("bench lengths must be distinct and >= 2"));
    }
    if feat_dim == 0 {
        return Err(EdsError::invalid("bench needs a positive feature width"));
    }
    if trials == 0 {
        return Err(EdsError::invalid("bench needs at least one trial"));
    }

    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(mixers.len() * lengths.len());
    let mut slopes = Vec::with_capacity(mixers.len());
    for &mixer in mixers {
        let mut cfg = RunConfig::default();
        cfg.mixer = mixer;
        cfg.feat_dim = feat_dim;
        let params = MixerParams::init(mixer, feat_dim, &mut rng);
        let mut points = Vec::with_capacity(lengths.len());
        for &n in lengths {
            let video = Tensor::uniform(&mut rng, vec![n, feat_dim], 1.0);
            let mut times = Vec::with_capacity(trials);
            let mut peak = 0usize;
            for trial in 0..=trials {
                let mut tape = Tape::new();
                let x = tape.constant(video.clone());
                let vars = params.insert(&mut tape, false);
                let ((fwd, dt), p) = measure_peak(|| {
                    let t0 = Instant::now();
                    let fwd = mixer_fwd(&mut tape, x, &vars, &cfg).map(|_| ());
                    (fwd, t0.elapsed())
                });
                fwd?;
                // Trial 0 is the warm-up and is discarded.
                if trial > 0 {
                    times.push(dt.as_secs_f64());
                    peak = peak.max(p);
                }
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median_s = times[times.len() / 2].max(1e-9);
            rows.push(BenchRow {
                mixer,
                seq_len: n,
                feat_dim,
                median_ms: median_s * 1e3,
                peak_alloc_bytes: peak,
            });
            points.push(((n as f64).ln(), median_s.ln()));
        }
        slopes.push((mixer, ls_slope(&points)));
    }
    Ok(BenchReport { rows, slopes })
}

/// Least-squares slope of y against x.
fn ls_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in points {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// CSV rows plus one trailing `# slope` comment line per mixer.
pub fn report_csv(report: &BenchReport) -> String {
    let mut out = String::from("mixer,seq_len,feat_dim,median_ms,peak_alloc_bytes\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mixer.name(),
            r.seq_len,
            r.feat_dim,
            r.median_ms,
            r.peak_alloc_bytes
        ));
    }
    for (mixer, slope) in &report.slopes {
        out.push_str(&format!("# slope,{},{:.4}\n", mixer.name(), slope));
    }
    out
}
