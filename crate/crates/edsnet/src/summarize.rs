//! Keyshot summarization: kernel temporal segmentation of the video into
//! shots, frame scoring from refined proposals, and capacity-constrained
//! shot selection by exact 0/1 knapsack.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{EdsError, Result};
use crate::numcore::Tensor;
use crate::pooling::{self, ModelParams};
use crate::proposals::{decode_offsets, generate_anchors, nms, AnchorConfig, ScoredSegment};

/// Proposals scoring below this are numerically dead and dropped before NMS.
pub const SCORE_FLOOR: f32 = 0.01;

/// Interior change points partitioning `[0, n)` into shots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShotBoundaries {
    n: usize,
    cps: Vec<usize>,
}

impl ShotBoundaries {
    /// Change points must be strictly increasing and inside (0, n).
    pub fn new(n: usize, cps: Vec<usize>) -> Result<Self> {
        if n == 0 {
            return Err(EdsError::invalid("shot boundaries over an empty video"));
        }
        let ordered = cps.windows(2).all(|w| w[0] < w[1]);
        let inside = cps.iter().all(|&c| c > 0 && c < n);
        if !ordered || !inside {
            return Err(EdsError::invalid(format!(
                "change points {cps:?} do not partition [0, {n})"
            )));
        }
        Ok(ShotBoundaries { n, cps })
    }

    pub fn n_frames(&self) -> usize {
        self.n
    }

    pub fn change_points(&self) -> &[usize] {
        &self.cps
    }

    /// Consecutive `[start, end)` shot spans covering the whole video.
    pub fn shots(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::with_capacity(self.cps.len() + 2);
        edges.push(0);
        edges.extend_from_slice(&self.cps);
        edges.push(self.n);
        edges.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Kernel temporal segmentation with a dot-product kernel. Minimizes the
/// within-segment scatter plus the penalty C*m*(ln(n/m)+1) over the number
/// of change points m <= max_cp. O(max_cp * n^2) after O(n^2) prefix sums.
pub fn kts(features: &Tensor, penalty: f32, max_cp: usize) -> Result<ShotBoundaries> {
    let n = features.rows();
    let f = features.cols();
    if n < 2 {
        return Err(EdsError::invalid(format!(
            "kts needs at least two frames, got {n}"
        )));
    }
    if max_cp >= n {
        return Err(EdsError::invalid(format!(
            "kts with {max_cp} change points over {n} frames"
        )));
    }
    if !penalty.is_finite() || penalty < 0.0 {
        return Err(EdsError::invalid(format!("kts penalty {penalty}")));
    }

    // Gram matrix and its 2-d prefix sums, all in f64: the DP compares
    // near-equal sums and f32 cancellation would reorder minima.
    let x = features.data();
    let mut gram = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let mut s = 0.0f64;
            for c in 0..f {
                s += x[i * f + c] as f64 * x[j * f + c] as f64;
            }
            gram[i * n + j] = s;
            gram[j * n + i] = s;
        }
    }
    let mut pre = vec![0.0f64; (n + 1) * (n + 1)];
    for i in 0..n {
        for j in 0..n {
            pre[(i + 1) * (n + 1) + j + 1] = gram[i * n + j] + pre[i * (n + 1) + j + 1]
                + pre[(i + 1) * (n + 1) + j]
                - pre[i * (n + 1) + j];
        }
    }
    let mut diag = vec![0.0f64; n + 1];
    for i in 0..n {
        diag[i + 1] = diag[i] + gram[i * n + i];
    }
    // Within-segment scatter of frames [a, b), b > a.
    let seg_cost = |a: usize, b: usize| -> f64 {
        let block = pre[b * (n + 1) + b] - pre[a * (n + 1) + b] - pre[b * (n + 1) + a]
            + pre[a * (n + 1) + a];
        diag[b] - diag[a] - block / (b - a) as f64
    };

    // dp[t] after round k = min cost of splitting [0, t) into k+1 segments.
    let mut dp: Vec<f64> = (0..=n)
        .map(|t| if t == 0 { 0.0 } else { seg_cost(0, t) })
        .collect();
    let mut total = vec![dp[n]];
    // back[k][t] = best last-segment start for [0, t) with k change points.
    let mut back: Vec<Vec<u32>> = Vec::with_capacity(max_cp);
    for k in 1..=max_cp {
        let mut next = vec![f64::INFINITY; n + 1];
        let mut arg = vec![0u32; n + 1];
        // k change points need at least k+1 frames.
        for t in (k + 1)..=n {
            let mut best = f64::INFINITY;
            let mut best_s = k;
            for s in k..t {
                let c = dp[s] + seg_cost(s, t);
                if c < best {
                    best = c;
                    best_s = s;
                }
            }
            next[t] = best;
            arg[t] = best_s as u32;
        }
        total.push(next[n]);
        back.push(arg);
        dp = next;
    }

    let pen = penalty as f64;
    let mut best_m = 0usize;
    let mut best_score = total[0];
    for (m, &cost) in total.iter().enumerate().skip(1) {
        let score = cost + pen * m as f64 * ((n as f64 / m as f64).ln() + 1.0);
        if score < best_score {
            best_score = score;
            best_m = m;
        }
    }

    let mut cps = vec![0usize; best_m];
    let mut t = n;
    for m in (1..=best_m).rev() {
        t = back[m - 1][t] as usize;
        cps[m - 1] = t;
    }
    ShotBoundaries::new(n, cps)
}

/// Exact 0/1 knapsack over shot values and frame lengths. Among optimal
/// selections, returns the lexicographically smallest index set; zero-value
/// shots are never padded in. Lengths must be positive.
pub fn knapsack_select(values: &[f32], lengths: &[usize], capacity: usize) -> Vec<usize> {
    assert_eq!(values.len(), lengths.len(), "knapsack arity");
    assert!(lengths.iter().all(|&l| l > 0), "knapsack zero-length shot");
    let n = values.len();
    // best[i][c] = max value over items i.. with capacity c.
    let mut best = vec![0.0f64; (n + 1) * (capacity + 1)];
    for i in (0..n).rev() {
        for c in 0..=capacity {
            let skip = best[(i + 1) * (capacity + 1) + c];
            let take = if lengths[i] <= c {
                values[i] as f64 + best[(i + 1) * (capacity + 1) + c - lengths[i]]
            } else {
                f64::NEG_INFINITY
            };
            best[i * (capacity + 1) + c] = skip.max(take);
        }
    }
    let mut out = Vec::new();
    let mut c = capacity;
    for i in 0..n {
        let skip = best[(i + 1) * (capacity + 1) + c];
        let take = if lengths[i] <= c {
            values[i] as f64 + best[(i + 1) * (capacity + 1) + c - lengths[i]]
        } else {
            f64::NEG_INFINITY
        };
        // Ties keep the earlier index, except that a zero-value optimum
        // resolves to the empty (lexicographically smallest) suffix.
        if take > skip || (take == skip && take > 0.0) {
            out.push(i);
            c -= lengths[i];
        }
    }
    out
}

/// Per-frame score: max over retained segments covering the frame, zero
/// when uncovered. Coverage uses the same whole-frame clip rule as pooling.
pub fn frame_scores(segments: &[ScoredSegment], n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n];
    for s in segments {
        if let Some((lo, hi)) = pooling::clip_span(s.span.start(), s.span.end(), n) {
            for v in &mut out[lo..hi] {
                *v = v.max(s.score);
            }
        }
    }
    out
}

/// Per-frame keyshot membership.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SummaryMask {
    frames: Vec<bool>,
}

impl SummaryMask {
    pub fn new(frames: Vec<bool>) -> Self {
        SummaryMask { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[bool] {
        &self.frames
    }

    pub fn count(&self) -> usize {
        self.frames.iter().filter(|&&b| b).count()
    }

    /// Alternating run lengths, starting with the false run (possibly 0).
    /// Runs after the first are positive and sum to the mask length.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut runs = Vec::new();
        let mut cur = false;
        let mut len = 0usize;
        for &b in &self.frames {
            if b == cur {
                len += 1;
            } else {
                runs.push(len);
                cur = b;
                len = 1;
            }
        }
        if len > 0 {
            runs.push(len);
        }
        if runs.is_empty() && !self.frames.is_empty() {
            runs.push(self.frames.len());
        }
        runs
    }

    pub fn from_rle(runs: &[usize]) -> Result<Self> {
        if runs.iter().skip(1).any(|&r| r == 0) {
            return Err(EdsError::invalid(format!(
                "run-length mask {runs:?} has an interior zero run"
            )));
        }
        let mut frames = Vec::with_capacity(runs.iter().sum());
        for (i, &r) in runs.iter().enumerate() {
            frames.extend(std::iter::repeat(i % 2 == 1).take(r));
        }
        Ok(SummaryMask { frames })
    }
}

/// Full summarization result for one video.
#[derive(Clone, Debug)]
pub struct Summary {
    pub mask: SummaryMask,
    pub boundaries: ShotBoundaries,
    pub selected_shots: Vec<usize>,
    pub shot_scores: Vec<f32>,
    /// Segments surviving the score floor and NMS, for diagnostics.
    pub kept: Vec<ScoredSegment>,
}

/// Pipeline tail shared by the model path and oracle-score tests: NMS,
/// frame scores, KTS shots, knapsack selection under the length budget.
pub fn summarize_from_segments(
    features: &Tensor,
    segments: &[ScoredSegment],
    cfg: &RunConfig,
) -> Result<Summary> {
    let n = features.rows();
    if n == 0 {
        return Err(EdsError::invalid("cannot summarize an empty video"));
    }
    let kept = nms(segments, cfg.nms_threshold);
    let scores = frame_scores(&kept, n);

    let boundaries = if n >= 2 {
        let cap = cfg.kts_max_cp.unwrap_or(n / 10).min(n - 1);
        kts(features, cfg.kts_penalty, cap)?
    } else {
        ShotBoundaries::new(n, Vec::new())?
    };
    let shots = boundaries.shots();
    let shot_scores: Vec<f32> = shots
        .iter()
        .map(|&(a, b)| {
            let s: f64 = scores[a..b].iter().map(|&v| v as f64).sum();
            (s / (b - a) as f64) as f32
        })
        .collect();
    let lengths: Vec<usize> = shots.iter().map(|&(a, b)| b - a).collect();
    let capacity = (cfg.summary_ratio as f64 * n as f64).floor() as usize;
    let selected = knapsack_select(&shot_scores, &lengths, capacity);

    let mut frames = vec![false; n];
    for &i in &selected {
        let (a, b) = shots[i];
        frames[a..b].iter_mut().for_each(|v| *v = true);
    }
    Ok(Summary {
        mask: SummaryMask::new(frames),
        boundaries,
        selected_shots: selected,
        shot_scores,
        kept,
    })
}

/// Inference pipeline: model scores, offset decoding, floor filter, then
/// the shared pipeline tail. Deterministic for fixed inputs.
pub fn make_summary(video: &Tensor, cfg: &RunConfig, params: &ModelParams) -> Result<Summary> {
    use rand::SeedableRng;
    let n = video.rows();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(0);
    let preds = pooling::model_forward(video, cfg, params, false, &mut rng)?;
    let anchors = generate_anchors(n, &AnchorConfig::from_run(cfg))?;
    let k = cfg.anchor_scales.len();
    let mut segments = Vec::new();
    for (i, p) in anchors.iter().enumerate() {
        let score = preds.scores.data()[i];
        if score < SCORE_FLOOR {
            continue;
        }
        let dc = preds.offsets.data()[2 * i];
        let dl = preds.offsets.data()[2 * i + 1];
        debug_assert_eq!(i, p.t * k + p.k);
        if let Some(span) = decode_offsets(p, dc, dl, n) {
            if span.len() >= 1.0 {
                segments.push(ScoredSegment { span, score });
            }
        }
    }
    summarize_from_segments(video, &segments, cfg)
}

/// JSON shape emitted by the summarize command.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryOutput {
    pub video_id: String,
    pub n_frames: usize,
    pub change_points: Vec<usize>,
    pub selected_shots: Vec<usize>,
    pub shot_scores: Vec<f32>,
    /// Alternating run lengths, false run first.
    pub mask_rle: Vec<usize>,
}

impl SummaryOutput {
    pub fn new(video_id: impl Into<String>, s: &Summary) -> Self {
        SummaryOutput {
            video_id: video_id.into(),
            n_frames: s.mask.len(),
            change_points: s.boundaries.change_points().to_vec(),
            selected_shots: s.selected_shots.clone(),
            shot_scores: s.shot_scores.clone(),
            mask_rle: s.mask.to_rle(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposals::Segment;
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tensor(rows: usize, cols: usize, data: Vec<f32>) -> Tensor {
        Tensor::matrix(rows, cols, data).unwrap()
    }

    /// Direct within-segment scatter, no prefix sums: sum of ||x_i - mean||^2
    /// expanded through the kernel, straight from the definition.
    fn scatter_oracle(x: &Tensor, a: usize, b: usize) -> f64 {
        let f = x.cols();
        let len = b - a;
        let mut diag = 0.0f64;
        let mut block = 0.0f64;
        for i in a..b {
            for j in a..b {
                let mut dot = 0.0f64;
                for c in 0..f {
                    dot += x.at(i, c) as f64 * x.at(j, c) as f64;
                }
                if i == j {
                    diag += dot;
                }
                block += dot;
            }
        }
        diag - block / len as f64
    }

    fn kts_oracle(x: &Tensor, penalty: f64, max_cp: usize) -> Vec<usize> {
        let n = x.rows();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut consider = |cps: &[usize]| {
            let mut edges = vec![0];
            edges.extend_from_slice(cps);
            edges.push(n);
            let cost: f64 = edges.windows(2).map(|w| scatter_oracle(x, w[0], w[1])).sum();
            let m = cps.len() as f64;
            let score = if cps.is_empty() {
                cost
            } else {
                cost + penalty * m * ((n as f64 / m).ln() + 1.0)
            };
            if best.as_ref().map_or(true, |(b, _)| score < *b) {
                best = Some((score, cps.to_vec()));
            }
        };
        // Every strictly increasing subset of (0, n) with at most max_cp points.
        let mut stack = vec![Vec::new()];
        while let Some(cur) = stack.pop() {
            consider(&cur);
            if cur.len() < max_cp {
                let lo = cur.last().map_or(1, |&c| c + 1);
                for next in lo..n {
                    let mut ext = cur.clone();
                    ext.push(next);
                    stack.push(ext);
                }
            }
        }
        best.unwrap().1
    }

    fn block_features(blocks: &[(usize, usize)], f: usize, noise: f32, seed: u64) -> Tensor {
        let n: usize = blocks.iter().map(|&(len, _)| len).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0f32; n * f];
        let mut row = 0;
        for &(len, dir) in blocks {
            for _ in 0..len {
                data[row * f + dir] = 1.0;
                for c in 0..f {
                    data[row * f + c] += noise * (rng.gen::<f32>() - 0.5);
                }
                row += 1;
            }
        }
        tensor(n, f, data)
    }

    #[test]
    fn kts_constant_features_yield_no_change_points() {
        let x = tensor(12, 3, vec![0.7; 36]);
        let b = kts(&x, 1.0, 4).unwrap();
        assert!(b.change_points().is_empty());
        assert_eq!(b.shots(), vec![(0, 12)]);
    }

    #[test]
    fn kts_splits_two_orthogonal_blocks_at_the_boundary() {
        let x = block_features(&[(10, 0), (10, 1)], 4, 0.0, 0);
        let b = kts(&x, 1.0, 5).unwrap();
        assert_eq!(b.change_points(), &[10]);
        // Split costs: none = 10, at the true boundary = 0 plus penalty ~4.
        assert!(scatter_oracle(&x, 0, 20) > 9.9);
        assert!(scatter_oracle(&x, 0, 10) + scatter_oracle(&x, 10, 20) < 1e-9);
    }

    #[test]
    fn kts_matches_exhaustive_oracle_on_random_features() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 8 + (seed as usize % 5);
            let data: Vec<f32> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = tensor(n, 3, data);
            let got = kts(&x, 0.4, 3).unwrap();
            let want = kts_oracle(&x, 0.4, 3);
            assert_eq!(got.change_points(), &want[..], "seed {seed}");
        }
    }

    #[test]
    fn kts_recovers_three_planted_blocks() {
        let x = block_features(&[(12, 0), (15, 1), (9, 2)], 5, 0.05, 3);
        let b = kts(&x, 1.0, 3).unwrap();
        assert_eq!(b.change_points().len(), 2);
        assert!((b.change_points()[0] as i64 - 12).abs() <= 1);
        assert!((b.change_points()[1] as i64 - 27).abs() <= 1);
    }

    #[test]
    fn kts_is_invariant_to_joint_feature_and_penalty_scaling() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let data: Vec<f32> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = tensor(10, 4, data.clone());
            let scaled = tensor(10, 4, data.iter().map(|v| 2.0 * v).collect());
            let a = kts(&x, 0.7, 4).unwrap();
            let b = kts(&scaled, 0.7 * 4.0, 4).unwrap();
            assert_eq!(a.change_points(), b.change_points());
            // At fixed penalty, doubling features cannot merge shots.
            let c = kts(&scaled, 0.7, 4).unwrap();
            assert!(c.change_points().len() >= a.change_points().len());
        }
    }

    #[test]
    fn kts_rejects_degenerate_inputs() {
        let x = tensor(1, 2, vec![1.0, 2.0]);
        assert!(kts(&x, 1.0, 0).is_err());
        let y = tensor(4, 2, vec![0.0; 8]);
        assert!(kts(&y, 1.0, 4).is_err());
        assert!(kts(&y, -1.0, 2).is_err());
    }

    #[test]
    fn shot_boundaries_validate_ordering_and_range() {
        assert!(ShotBoundaries::new(10, vec![3, 3]).is_err());
        assert!(ShotBoundaries::new(10, vec![0]).is_err());
        assert!(ShotBoundaries::new(10, vec![10]).is_err());
        let b = ShotBoundaries::new(10, vec![2, 7]).unwrap();
        assert_eq!(b.shots(), vec![(0, 2), (2, 7), (7, 10)]);
    }

    /// Brute force over all subsets with explicit lexicographic tie-break:
    /// shorter-on-prefix compares smaller, so the empty set wins ties at 0.
    fn knapsack_oracle(values: &[f32], lengths: &[usize], capacity: usize) -> Vec<usize> {
        let n = values.len();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for mask in 0u32..(1 << n) {
            let mut val = 0.0f64;
            let mut len = 0usize;
            let mut set = Vec::new();
            for i in 0..n {
                if mask >> i & 1 == 1 {
                    val += values[i] as f64;
                    len += lengths[i];
                    set.push(i);
                }
            }
            if len > capacity {
                continue;
            }
            let better = match &best {
                None => true,
                Some((bv, bs)) => val > *bv || (val == *bv && set < *bs),
            };
            if better {
                best = Some((val, set));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn knapsack_known_example() {
        let picked = knapsack_select(&[6.0, 10.0, 12.0], &[1, 2, 3], 5);
        assert_eq!(picked, vec![1, 2]);
    }

    #[test]
    fn knapsack_oversized_single_shot_selects_nothing() {
        assert!(knapsack_select(&[5.0], &[10], 9).is_empty());
        assert!(knapsack_select(&[5.0], &[10], 0).is_empty());
    }

    #[test]
    fn knapsack_matches_exhaustive_oracle() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 15;
            let values: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0f32)).collect();
            let lengths: Vec<usize> = (0..n).map(|_| rng.gen_range(1..7)).collect();
            let cap = rng.gen_range(5..20);
            assert_eq!(
                knapsack_select(&values, &lengths, cap),
                knapsack_oracle(&values, &lengths, cap),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn knapsack_ties_resolve_lexicographically() {
        // Equal items: earliest index wins.
        assert_eq!(knapsack_select(&[5.0, 5.0], &[1, 1], 1), vec![0]);
        // All-zero values: empty set, never padded with free winners.
        assert!(knapsack_select(&[0.0, 0.0, 0.0], &[1, 1, 1], 3).is_empty());
        // Duplicate optima across disjoint sets.
        assert_eq!(knapsack_select(&[3.0, 2.0, 1.0], &[2, 1, 1], 2), vec![0]);
        assert_eq!(
            knapsack_oracle(&[3.0, 2.0, 1.0], &[2, 1, 1], 2),
            vec![0usize]
        );
    }

    proptest! {
        #[test]
        fn knapsack_respects_capacity(seed in 0u64..500, cap in 0usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..12);
            let values: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..2.0f32)).collect();
            let lengths: Vec<usize> = (0..n).map(|_| rng.gen_range(1..9)).collect();
            let picked = knapsack_select(&values, &lengths, cap);
            let used: usize = picked.iter().map(|&i| lengths[i]).sum();
            prop_assert!(used <= cap);
            let mut sorted = picked.clone();
            sorted.dedup();
            prop_assert_eq!(sorted, picked);
        }

        #[test]
        fn rle_round_trips(seed in 0u64..500, n in 0usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask = SummaryMask::new((0..n).map(|_| rng.gen_bool(0.4)).collect());
            let runs = mask.to_rle();
            prop_assert_eq!(SummaryMask::from_rle(&runs).unwrap(), mask);
            prop_assert_eq!(runs.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn rle_known_shapes() {
        let m = SummaryMask::new(vec![true, true, false, true]);
        assert_eq!(m.to_rle(), vec![0, 2, 1, 1]);
        assert_eq!(SummaryMask::new(vec![]).to_rle(), Vec::<usize>::new());
        assert_eq!(SummaryMask::new(vec![false; 3]).to_rle(), vec![3]);
        assert!(SummaryMask::from_rle(&[1, 0, 2]).is_err());
        assert_eq!(m.count(), 3);
    }

    fn seg(start: f32, end: f32, score: f32) -> ScoredSegment {
        ScoredSegment {
            span: Segment::new(start, end).unwrap(),
            score,
        }
    }

    #[test]
    fn frame_scores_basics() {
        assert_eq!(frame_scores(&[], 4), vec![0.0; 4]);
        let got = frame_scores(&[seg(2.0, 5.0, 0.8)], 8);
        let want = [0.0, 0.0, 0.8, 0.8, 0.8, 0.0, 0.0, 0.0];
        assert_eq!(got, want);
    }

    #[test]
    fn frame_scores_take_max_over_overlaps() {
        let segs = [
            seg(0.0, 4.0, 0.3),
            seg(2.0, 6.0, 0.9),
            seg(-3.0, 2.5, 0.5),
            seg(5.0, 40.0, 0.1),
        ];
        let got = frame_scores(&segs, 8);
        // Membership scan straight from the whole-frame coverage rule.
        for (i, &v) in got.iter().enumerate() {
            let fi = i as f32;
            let mut want = 0.0f32;
            for s in &segs {
                if fi >= s.span.start().max(0.0) && fi + 1.0 <= s.span.end().min(8.0) {
                    want = want.max(s.score);
                }
            }
            assert_eq!(v, want, "frame {i}");
        }
    }

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.feat_dim = 6;
        cfg.hidden = 8;
        cfg.anchor_scales = vec![4, 8];
        cfg.dropout = 0.0;
        cfg.nystrom_landmarks = 4;
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn make_summary_respects_the_length_budget_and_shot_atomicity() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ModelParams::init(&cfg, &mut rng);
        for n in [1usize, 2, 7, 40, 61] {
            let data: Vec<f32> = (0..n * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let video = tensor(n, 6, data);
            let s = make_summary(&video, &cfg, &params).unwrap();
            assert_eq!(s.mask.len(), n);
            assert!(s.mask.count() <= (0.15 * n as f64).floor() as usize);
            // Selected shots are whole: the mask never changes inside one.
            for (i, &(a, b)) in s.boundaries.shots().iter().enumerate() {
                let inside = s.mask.frames()[a..b].iter().filter(|&&v| v).count();
                assert!(inside == 0 || inside == b - a);
                assert_eq!(inside == b - a, s.selected_shots.contains(&i));
            }
        }
    }

    #[test]
    fn make_summary_is_deterministic() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ModelParams::init(&cfg, &mut rng);
        let data: Vec<f32> = (0..50 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let video = tensor(50, 6, data);
        let a = make_summary(&video, &cfg, &params).unwrap();
        let b = make_summary(&video, &cfg, &params).unwrap();
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.selected_shots, b.selected_shots);
        assert_eq!(a.boundaries.change_points(), b.boundaries.change_points());
    }

    #[test]
    fn ideal_scores_recover_planted_keyshots() {
        // Planted keyshots [10, 20) and [35, 43) inside 150 frames; the
        // 15% budget (22) has room for both.
        let blocks = [(10, 0), (10, 1), (15, 0), (8, 2), (107, 0)];
        let x = block_features(&blocks, 6, 0.3, 21);
        let mut cfg = tiny_cfg();
        cfg.kts_penalty = 1.0;
        let truth: Vec<bool> = (0..150)
            .map(|i| (10..20).contains(&i) || (35..43).contains(&i))
            .collect();
        let segs = [seg(10.0, 20.0, 0.99), seg(35.0, 43.0, 0.95)];
        let s = summarize_from_segments(&x, &segs, &cfg).unwrap();
        assert!(s.mask.count() <= 22);
        let tp = s
            .mask
            .frames()
            .iter()
            .zip(&truth)
            .filter(|(&a, &b)| a && b)
            .count() as f64;
        let p = tp / s.mask.count().max(1) as f64;
        let r = tp / truth.iter().filter(|&&b| b).count() as f64;
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        assert!(f1 >= 0.9, "f1 {f1}");
    }

    #[test]
    fn summary_output_serializes_stably() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&cfg, &mut rng);
        let data: Vec<f32> = (0..30 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let video = tensor(30, 6, data);
        let s = make_summary(&video, &cfg, &params).unwrap();
        let out = SummaryOutput::new("v1", &s);
        let a = serde_json::to_string(&out).unwrap();
        let b = serde_json::to_string(&SummaryOutput::new("v1", &s)).unwrap();
        assert_eq!(a, b);
        let back: SummaryOutput = serde_json::from_str(&a).unwrap();
        assert_eq!(back.mask_rle, s.mask.to_rle());
    }
}
