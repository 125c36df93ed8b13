//! Inference assembly and evaluation: windowed scoring, frame-level track
//! assembly, segment-level pair metrics, cosine similarity scoring and HOTA.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use autograd::{par, ParamStore, Tape};
use serde::{Deserialize, Serialize};

use crate::chook::SegmentGrids;
use crate::domain::{
    segment_label, window_segments, DomainError, Expression, MatchingRelation, Trajectory, TrajectorySegment,
    TrajectorySet, VideoClip,
};
use crate::ingest::{write_tracker_file, IngestError};
use crate::model::{match_probabilities, window_frames, Model, ModelError};
use crate::synthdata::Scene;

/// `(expr_id, target_id, window start)`.
pub type PairKey = (u32, u32, u32);

/// Match probability per [`PairKey`].
pub type PairScores = BTreeMap<PairKey, f64>;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] crate::chook::ChookError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{0}")]
    Mismatch(String),
}

/// Window start frames of one trajectory: the regular sliding windows plus,
/// when the stride leaves trailing frames uncovered, one window ending at the
/// trajectory's last frame.
pub fn window_starts(traj: &Trajectory, p: usize, stride: usize) -> Result<Vec<u32>, DomainError> {
    let mut starts: Vec<u32> = window_segments(traj, p, stride)?.iter().map(|s| s.start_frame).collect();
    let (first, last) = (traj.first_frame().unwrap(), traj.last_frame().unwrap());
    if let Some(&s) = starts.last() {
        if s as usize + p <= last as usize {
            starts.push((last + 1 - p as u32).max(first));
        }
    }
    Ok(starts)
}

/// Score every (expression, trajectory window) pair of a clip. Windows that
/// share a start frame share one backbone pass; expressions go through the
/// decoder in chunks of at most `slots`, padded by repeating the chunk's
/// first expression, with padded outputs dropped.
pub fn score_all(
    model: &Model,
    params: &ParamStore<f32>,
    clip: &VideoClip,
    tracks: &TrajectorySet,
    expressions: &[Expression],
    stride: usize,
) -> Result<PairScores, EvalError> {
    let p = model.config.p;
    let n = model.config.slots;
    let mut groups: BTreeMap<u32, Vec<TrajectorySegment>> = BTreeMap::new();
    for tr in &tracks.trajectories {
        for s in window_starts(tr, p, stride)? {
            if let Some(seg) = TrajectorySegment::at(tr, s, p) {
                groups.entry(s).or_default().push(seg);
            }
        }
    }
    if expressions.is_empty() || groups.is_empty() {
        return Ok(PairScores::new());
    }
    let groups: Vec<(u32, Vec<TrajectorySegment>)> = groups.into_iter().collect();
    let exprs: Vec<&Expression> = expressions.iter().collect();
    let results = par::map_slice(&groups, |(start, segs)| -> Result<Vec<(PairKey, f64)>, EvalError> {
        let tape = Tape::no_grad(params);
        let frames = model.visual.prepare_input::<f32>(&window_frames(clip, *start, p)).map_err(ModelError::from)?;
        let ctx = model.window(&tape, &frames, &exprs)?;
        let mut out = Vec::new();
        for seg in segs {
            let grids = SegmentGrids::new(&seg.boxes, &seg.present, &model.config.grid_shapes)?;
            for chunk in (0..exprs.len()).collect::<Vec<_>>().chunks(n) {
                let mut slots = chunk.to_vec();
                slots.resize(n, chunk[0]);
                let scored = model.score_segment(&tape, &ctx, &model.segment_input(&tape, &grids, slots))?;
                let probs = match_probabilities(&scored.scores.averaged.value());
                for (&e, &pr) in chunk.iter().zip(&probs) {
                    out.push(((exprs[e].expr_id, seg.target_id, *start), pr));
                }
            }
        }
        Ok(out)
    });
    let mut scores = PairScores::new();
    for r in results {
        scores.extend(r?);
    }
    Ok(scores)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// Predicted referred tracks, one set per expression.
pub type ReferredTrackSet = BTreeMap<u32, TrajectorySet>;

/// Per-frame score of `(expr, target)`: aggregate of every window covering
/// the frame. Frames where the target has no box are skipped.
pub fn frame_scores(scores: &PairScores, tracks: &TrajectorySet, p: usize, aggregation: Aggregation) -> BTreeMap<(u32, u32, u32), f64> {
    let mut acc: BTreeMap<(u32, u32, u32), Vec<f64>> = BTreeMap::new();
    for (&(e, t, start), &prob) in scores {
        let Some(tr) = tracks.get(t) else { continue };
        for f in start..start + p as u32 {
            if tr.boxes.contains_key(&f) {
                acc.entry((e, t, f)).or_default().push(prob);
            }
        }
    }
    acc.into_iter()
        .map(|(k, v)| {
            let a = match aggregation {
                Aggregation::Mean => v.iter().sum::<f64>() / v.len() as f64,
                Aggregation::Max => v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            (k, a)
        })
        .collect()
}

/// Keep each (expr, target, frame) whose aggregated score reaches `threshold`.
/// Every expression in `expr_ids` gets an entry, possibly empty.
pub fn assemble_tracks(
    scores: &PairScores,
    tracks: &TrajectorySet,
    expr_ids: impl IntoIterator<Item = u32>,
    p: usize,
    threshold: f64,
    aggregation: Aggregation,
) -> ReferredTrackSet {
    let mut per: BTreeMap<u32, BTreeMap<u32, Trajectory>> = expr_ids.into_iter().map(|e| (e, BTreeMap::new())).collect();
    for ((e, t, f), s) in frame_scores(scores, tracks, p, aggregation) {
        if s >= threshold {
            let b = tracks.get(t).unwrap().boxes[&f];
            per.entry(e).or_default().entry(t).or_insert_with(|| Trajectory::new(t)).boxes.insert(f, b);
        }
    }
    per.into_iter()
        .map(|(e, m)| (e, TrajectorySet { video_id: tracks.video_id.clone(), trajectories: m.into_values().collect() }))
        .collect()
}

/// Ground-truth referred tracks of one expression: the boxes of `tracks`
/// on frames the relation covers.
pub fn referred_ground_truth(tracks: &TrajectorySet, relation: &MatchingRelation, expr_id: u32) -> TrajectorySet {
    let trajectories = tracks
        .trajectories
        .iter()
        .filter_map(|tr| {
            let boxes: BTreeMap<_, _> =
                tr.boxes.iter().filter(|(&f, _)| relation.covers(expr_id, tr.target_id, f)).map(|(&f, &b)| (f, b)).collect();
            (!boxes.is_empty()).then_some(Trajectory { target_id: tr.target_id, boxes })
        })
        .collect();
    TrajectorySet { video_id: tracks.video_id.clone(), trajectories }
}

/// Write one CSV per expression into `dir` as `expr_<id>.txt`.
pub fn write_referred_tracks(dir: &Path, set: &ReferredTrackSet) -> Result<Vec<std::path::PathBuf>, IngestError> {
    set.iter()
        .map(|(e, ts)| {
            let path = dir.join(format!("expr_{e:04}.txt"));
            write_tracker_file(&path, ts).map(|_| path)
        })
        .collect()
}

/// Segment-level classification metrics at threshold 0.5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub count: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when all labels are of one class.
    pub auc: Option<f64>,
}

pub const DECISION_THRESHOLD: f64 = 0.5;

/// Rank-statistic AUC with tied scores counted as half-concordant.
pub fn roc_auc(scored: &[(f64, u8)]) -> Option<f64> {
    let n_pos = scored.iter().filter(|s| s.1 == 1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scored.len()).collect();
    idx.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scored[idx[j + 1]].0 == scored[idx[i]].0 {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * idx[i..=j].iter().filter(|&&k| scored[k].1 == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Precision, recall and F1 of `(tp, fp, fn)`, with 0 for empty denominators.
fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    (precision, recall, f1)
}

pub fn pair_metrics(scored: &[(f64, u8)]) -> PairMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for &(s, l) in scored {
        match (s >= DECISION_THRESHOLD, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let (precision, recall, f1) = prf(tp, fp, fn_);
    PairMetrics {
        count: scored.len(),
        accuracy: if scored.is_empty() { 0.0 } else { (tp + tn) as f64 / scored.len() as f64 },
        precision,
        recall,
        f1,
        auc: roc_auc(scored),
    }
}

/// One scored segment with its ground-truth label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub video_id: String,
    pub expr_id: u32,
    pub text: String,
    pub target_id: u32,
    pub start: u32,
    pub score: f64,
    pub label: u8,
}

/// Attach segment labels to scores.
pub fn label_scores(
    scores: &PairScores,
    tracks: &TrajectorySet,
    expressions: &[Expression],
    relation: &MatchingRelation,
    p: usize,
) -> Result<Vec<LabeledPair>, DomainError> {
    let texts: BTreeMap<u32, &str> = expressions.iter().map(|e| (e.expr_id, e.text.as_str())).collect();
    let mut out = Vec::with_capacity(scores.len());
    for (&(e, t, start), &score) in scores {
        let tr = tracks.get(t).ok_or(DomainError::UnknownTarget(t))?;
        let Some(seg) = TrajectorySegment::at(tr, start, p) else { continue };
        let label = segment_label(relation, &seg, e)?;
        out.push(LabeledPair {
            video_id: tracks.video_id.clone(),
            expr_id: e,
            text: texts.get(&e).copied().unwrap_or_default().to_string(),
            target_id: t,
            start,
            score,
            label,
        });
    }
    Ok(out)
}

/// Mean F1 over expression texts, pooling each text's pairs across videos.
/// Texts with no positive label and no positive prediction have no defined
/// F1 and are skipped; `None` when no text is defined.
pub fn macro_pair_f1(pairs: &[LabeledPair]) -> Option<f64> {
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for p in pairs {
        let c = counts.entry(p.text.as_str()).or_default();
        match (p.score >= DECISION_THRESHOLD, p.label == 1) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => {}
        }
    }
    let f1s: Vec<f64> = counts.values().filter(|c| c.0 + c.1 + c.2 > 0).map(|&(tp, fp, fn_)| prf(tp, fp, fn_).2).collect();
    (!f1s.is_empty()).then(|| f1s.iter().sum::<f64>() / f1s.len() as f64)
}

/// Cosine similarity of `a` and `b`, 0 when either has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Similarity of a pooled trajectory feature with each pooled expression
/// feature, mapped linearly from [-1, 1] to [0, 1].
pub fn cosine_baseline(traj: &[f64], texts: &[Vec<f64>]) -> Vec<f64> {
    texts.iter().map(|t| (cosine_similarity(traj, t) + 1.0) / 2.0).collect()
}

/// Minimum-cost assignment of a dense `rows x cols` cost matrix. Returns the
/// column assigned to each row (`None` for rows left over when rows > cols).
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Vec::new();
    }
    let cols = cost[0].len();
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transposed { cost[j][i] } else { cost[i][j] };
    // Potentials-based shortest augmenting path, 1-indexed with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for (j, &o) in owner.iter().enumerate().skip(1) {
        if o != 0 {
            let (r, c) = if transposed { (j - 1, o - 1) } else { (o - 1, j - 1) };
            out[r] = Some(c);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HotaScores {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
}

/// Localisation thresholds 0.05, 0.10, ..., 0.95.
pub fn hota_thresholds() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 0.05).collect()
}

/// HOTA, DetA and AssA of predicted against ground-truth tracks, averaged
/// over localisation thresholds. Both empty scores 1; exactly one empty scores 0.
pub fn hota(pred: &TrajectorySet, gt: &TrajectorySet) -> HotaScores {
    let n_gt: usize = gt.trajectories.iter().map(|t| t.boxes.len()).sum();
    let n_pr: usize = pred.trajectories.iter().map(|t| t.boxes.len()).sum();
    if n_gt == 0 && n_pr == 0 {
        log::debug!("hota: empty ground truth and prediction scored 1.0");
        return HotaScores { hota: 1.0, deta: 1.0, assa: 1.0 };
    }
    if n_gt == 0 || n_pr == 0 {
        return HotaScores { hota: 0.0, deta: 0.0, assa: 0.0 };
    }
    let (gi, pi) = (gt.trajectories.len(), pred.trajectories.len());
    let frames: BTreeSet<u32> = gt.trajectories.iter().chain(&pred.trajectories).flat_map(|t| t.boxes.keys().copied()).collect();

    // Per-frame IoU tables and the soft global alignment score.
    let mut per_frame = Vec::with_capacity(frames.len());
    let mut potential = vec![vec![0.0; pi]; gi];
    let gt_count: Vec<f64> = gt.trajectories.iter().map(|t| t.boxes.len() as f64).collect();
    let pr_count: Vec<f64> = pred.trajectories.iter().map(|t| t.boxes.len() as f64).collect();
    for &f in &frames {
        let g: Vec<(usize, _)> = gt.trajectories.iter().enumerate().filter_map(|(i, t)| t.boxes.get(&f).map(|b| (i, *b))).collect();
        let p: Vec<(usize, _)> = pred.trajectories.iter().enumerate().filter_map(|(j, t)| t.boxes.get(&f).map(|b| (j, *b))).collect();
        let iou: Vec<Vec<f64>> = g.iter().map(|(_, a)| p.iter().map(|(_, b)| a.iou(b)).collect()).collect();
        let row: Vec<f64> = iou.iter().map(|r| r.iter().sum()).collect();
        let col: Vec<f64> = (0..p.len()).map(|c| iou.iter().map(|r| r[c]).sum()).collect();
        for (r, (ig, _)) in g.iter().enumerate() {
            for (c, (jp, _)) in p.iter().enumerate() {
                let denom = row[r] + col[c] - iou[r][c];
                if denom > 0.0 {
                    potential[*ig][*jp] += iou[r][c] / denom;
                }
            }
        }
        per_frame.push((g.iter().map(|x| x.0).collect::<Vec<_>>(), p.iter().map(|x| x.0).collect::<Vec<_>>(), iou));
    }
    let global: Vec<Vec<f64>> = (0..gi)
        .map(|i| (0..pi).map(|j| potential[i][j] / (gt_count[i] + pr_count[j] - potential[i][j])).collect())
        .collect();

    let thresholds = hota_thresholds();
    let (mut hs, mut ds, mut as_) = (0.0, 0.0, 0.0);
    for &alpha in &thresholds {
        let mut matches = vec![vec![0.0; pi]; gi];
        let mut tp = 0.0;
        for (g, p, iou) in &per_frame {
            if g.is_empty() || p.is_empty() {
                continue;
            }
            let valid = |r: usize, c: usize| iou[r][c] >= alpha - 1e-12 && iou[r][c] > 0.0;
            let cost: Vec<Vec<f64>> = (0..g.len())
                .map(|r| {
                    (0..p.len())
                        .map(|c| if valid(r, c) { -(global[g[r]][p[c]] * iou[r][c] + 1e-6 * iou[r][c]) } else { 0.0 })
                        .collect()
                })
                .collect();
            for (r, c) in hungarian(&cost).into_iter().enumerate() {
                if let Some(c) = c.filter(|&c| valid(r, c)) {
                    matches[g[r]][p[c]] += 1.0;
                    tp += 1.0;
                }
            }
        }
        let fn_ = n_gt as f64 - tp;
        let fp = n_pr as f64 - tp;
        let deta = tp / (tp + fn_ + fp);
        let assa = if tp > 0.0 {
            let mut s = 0.0;
            for i in 0..gi {
                for j in 0..pi {
                    let m = matches[i][j];
                    if m > 0.0 {
                        s += m * m / (gt_count[i] + pr_count[j] - m);
                    }
                }
            }
            s / tp
        } else {
            0.0
        };
        hs += (deta * assa).sqrt();
        ds += deta;
        as_ += assa;
    }
    let k = thresholds.len() as f64;
    HotaScores { hota: hs / k, deta: ds / k, assa: as_ / k }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub threshold: f64,
    pub aggregation: Aggregation,
    /// Frame stride between scored windows.
    pub window_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5, aggregation: Aggregation::Mean, window_stride: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionReport {
    pub video_id: String,
    pub expr_id: u32,
    pub text: String,
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
}

/// Metrics of one model variant over a set of scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub per_expression: Vec<ExpressionReport>,
    pub macro_hota: f64,
    pub macro_deta: f64,
    pub macro_assa: f64,
    pub pairs: PairMetrics,
    pub macro_pair_f1: Option<f64>,
}

/// Scores, labels and assembled tracks of one scene.
pub struct SceneResult {
    pub scores: PairScores,
    pub pairs: Vec<LabeledPair>,
    pub tracks: ReferredTrackSet,
}

pub fn evaluate_scene(model: &Model, params: &ParamStore<f32>, scene: &Scene, cfg: &EvalConfig) -> Result<SceneResult, EvalError> {
    let p = model.config.p;
    let scores = score_all(model, params, &scene.clip, &scene.tracks, &scene.expressions, cfg.window_stride)?;
    let pairs = label_scores(&scores, &scene.tracks, &scene.expressions, &scene.relation, p)?;
    let tracks =
        assemble_tracks(&scores, &scene.tracks, scene.expressions.iter().map(|e| e.expr_id), p, cfg.threshold, cfg.aggregation);
    Ok(SceneResult { scores, pairs, tracks })
}

/// Evaluate a model on scenes: per-expression HOTA against the relation's
/// referred tracks, macro averages and pooled segment-level pair metrics.
pub fn evaluate_scenes(model: &Model, params: &ParamStore<f32>, scenes: &[Scene], cfg: &EvalConfig) -> Result<VariantReport, EvalError> {
    let mut per_expression = Vec::new();
    let mut pairs = Vec::new();
    for scene in scenes {
        let r = evaluate_scene(model, params, scene, cfg)?;
        for e in &scene.expressions {
            let gt = referred_ground_truth(&scene.tracks, &scene.relation, e.expr_id);
            let h = hota(&r.tracks[&e.expr_id], &gt);
            per_expression.push(ExpressionReport {
                video_id: scene.clip.video_id.clone(),
                expr_id: e.expr_id,
                text: e.text.clone(),
                hota: h.hota,
                deta: h.deta,
                assa: h.assa,
            });
        }
        pairs.extend(r.pairs);
    }
    Ok(summarize(per_expression, &pairs))
}

pub fn summarize(per_expression: Vec<ExpressionReport>, pairs: &[LabeledPair]) -> VariantReport {
    let k = per_expression.len().max(1) as f64;
    let m = |f: fn(&ExpressionReport) -> f64| per_expression.iter().map(f).sum::<f64>() / k;
    let scored: Vec<(f64, u8)> = pairs.iter().map(|p| (p.score, p.label)).collect();
    VariantReport {
        macro_hota: m(|r| r.hota),
        macro_deta: m(|r| r.deta),
        macro_assa: m(|r| r.assa),
        pairs: pair_metrics(&scored),
        macro_pair_f1: macro_pair_f1(pairs),
        per_expression,
    }
}
