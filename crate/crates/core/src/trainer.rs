//! Expression sampling, batching and the optimisation loop.
//!
//! A step takes `batch_size` segments. Segments of the same frame window
//! share one backbone pass; each window group is forwarded and
//! backpropagated on its own tape and the parameter gradients are summed, so
//! the step gradient equals that of the batch-mean loss.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use autograd::optim::{clip_grad_norm, AdamW, AdamWConfig};
use autograd::{ParamStore, Tape, Tensor};
use rand::seq::{index::sample, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::chook::{augment_grids, AugmentConfig, ChookError, SegmentGrids};
use crate::domain::{segment_label, window_segments, DomainError, Expression, MatchingRelation, TrajectorySegment};
use crate::encoders::{freeze, FreezeSelector};
use crate::ingest::Vocab;
use crate::model::{window_frames, Model, ModelError};
use crate::objective::{total_loss, ObjectiveConfig};
use crate::synthdata::Scene;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(
        "non-finite loss at epoch {epoch}, step {step}: total={total}, focal={focal}, barrier={barrier:?}; batch: {}",
        segments.join(", ")
    )]
    NonFinite { epoch: usize, step: usize, segments: Vec<String>, total: f64, focal: f64, barrier: Option<f64> },
    #[error("empty dataset: no trajectory segments to train on")]
    EmptyDataset,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Chook(#[from] ChookError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Segment length.
    pub p: usize,
    /// Expression slots per segment.
    pub slots: usize,
    /// Reference points per expression.
    pub ref_points: usize,
    /// Token length.
    pub max_tokens: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Segments per optimiser step.
    pub batch_size: usize,
    pub seed: u64,
    /// Target fraction of positive slots.
    pub pos_fraction: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Frame stride between training windows.
    pub window_stride: usize,
    pub freeze: FreezeSelector,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 4,
            slots: 36,
            ref_points: 10,
            max_tokens: 25,
            epochs: 20,
            learning_rate: 3e-5,
            weight_decay: 1e-4,
            batch_size: 8,
            seed: 0,
            pos_fraction: 0.25,
            grad_clip: 1.0,
            window_stride: 4,
            freeze: FreezeSelector::None,
        }
    }
}

impl TrainConfig {
    // `!(x >= 0.0)` also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut problems = Vec::new();
        if self.slots < 2 {
            problems.push(format!("slots must be >= 2 (got {})", self.slots));
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction < 1.0) {
            problems.push(format!("pos_fraction must lie in (0, 1) (got {})", self.pos_fraction));
        }
        if self.p == 0 || self.batch_size == 0 || self.window_stride == 0 || self.max_tokens == 0 {
            problems.push("p, batch_size, window_stride and max_tokens must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            problems.push("learning_rate and weight_decay must be >= 0 and grad_clip > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }
}

/// Draw `k` items from `pool`: without replacement while the pool lasts,
/// then with replacement.
fn draw(pool: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.is_empty() || k == 0 {
        return Vec::new();
    }
    let distinct = k.min(pool.len());
    let mut out: Vec<usize> = sample(rng, pool.len(), distinct).into_iter().map(|i| pool[i]).collect();
    while out.len() < k {
        out.push(*pool.choose(rng).expect("non-empty pool"));
    }
    out
}

/// Fill `n` slots from positive and negative expression indices: up to
/// `round(pos_fraction * n)` positives, the rest negatives. When one pool is
/// empty the other fills every slot. Slot order is shuffled.
pub fn sample_slots(positives: &[usize], negatives: &[usize], n: usize, pos_fraction: f64, rng: &mut ChaCha8Rng) -> Vec<(usize, u8)> {
    let q_pos = if positives.is_empty() {
        0
    } else if negatives.is_empty() {
        n
    } else {
        ((pos_fraction * n as f64).round() as usize).min(n)
    };
    let mut slots: Vec<(usize, u8)> = draw(positives, q_pos, rng).into_iter().map(|i| (i, 1)).collect();
    slots.extend(draw(negatives, n - q_pos, rng).into_iter().map(|i| (i, 0)));
    slots.shuffle(rng);
    slots
}

/// Sample `n` (expression index, label) slots for one segment.
pub fn sample_expressions(
    segment: &TrajectorySegment,
    expressions: &[Expression],
    relation: &MatchingRelation,
    n: usize,
    pos_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, u8)>, DomainError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, e) in expressions.iter().enumerate() {
        if segment_label(relation, segment, e.expr_id)? == 1 {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    Ok(sample_slots(&pos, &neg, n, pos_fraction, rng))
}

/// The segments of one scene that start at the same frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainWindow {
    pub scene: usize,
    pub start: u32,
    pub segments: Vec<TrajectorySegment>,
}

/// Group every trajectory's windows by (scene, start frame).
pub fn build_windows(scenes: &[Scene], p: usize, stride: usize) -> Result<Vec<TrainWindow>, DomainError> {
    let mut out = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        let mut by_start: BTreeMap<u32, Vec<TrajectorySegment>> = BTreeMap::new();
        for tr in &s.tracks.trajectories {
            for seg in window_segments(tr, p, stride)? {
                by_start.entry(seg.start_frame).or_default().push(seg);
            }
        }
        out.extend(by_start.into_iter().map(|(start, segments)| TrainWindow { scene: si, start, segments }));
    }
    Ok(out)
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub total: f64,
    pub focal: f64,
    pub barrier: f64,
    pub accuracy: f64,
}

pub const LOG_HEADER: &str = "step,total,focal,barrier,accuracy";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{:.9},{:.9},{:.9},{:.6}", self.step, self.total, self.focal, self.barrier, self.accuracy)
    }
}

pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub frozen_tensors: usize,
    pub checkpoints: Vec<PathBuf>,
}

/// Run-time options not part of the hyperparameters.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for checkpoints and `train_log.csv`.
    pub out_dir: Option<PathBuf>,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<usize>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

struct Item<'a> {
    window: usize,
    segment: &'a TrajectorySegment,
    slots: Vec<(usize, u8)>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Train on every window of `scenes`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    scenes: &[Scene],
    model: &Model,
    params: &mut ParamStore<f32>,
    vocab: &Vocab,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    objective: &ObjectiveConfig,
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    let windows = build_windows(scenes, cfg.p, cfg.window_stride)?;
    train_windows(scenes, &windows, model, params, vocab, cfg, augment, objective, opts)
}

/// Train on a fixed list of windows.
#[allow(clippy::too_many_arguments)]
pub fn train_windows(
    scenes: &[Scene],
    windows: &[TrainWindow],
    model: &Model,
    params: &mut ParamStore<f32>,
    vocab: &Vocab,
    cfg: &TrainConfig,
    augment: &AugmentConfig,
    objective: &ObjectiveConfig,
    opts: &TrainOptions,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let mc = &model.config;
    if (mc.p, mc.slots, mc.ref_points, mc.max_tokens) != (cfg.p, cfg.slots, cfg.ref_points, cfg.max_tokens) {
        return Err(TrainError::Config(format!(
            "model (p={}, slots={}, M={}, L={}) does not match training config (p={}, slots={}, M={}, L={})",
            mc.p, mc.slots, mc.ref_points, mc.max_tokens, cfg.p, cfg.slots, cfg.ref_points, cfg.max_tokens
        )));
    }
    let flat: Vec<(usize, usize)> =
        windows.iter().enumerate().flat_map(|(w, win)| (0..win.segments.len()).map(move |s| (w, s))).collect();
    if flat.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let frozen_tensors = freeze(params, cfg.freeze);
    if frozen_tensors > 0 {
        log::info!("frozen parameter tensors: {frozen_tensors} ({} values)", params.numel(false) - params.numel(true));
    }

    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(LOG_FILE);
            let mut f = fs::File::create(&path).map_err(io_err(&path))?;
            writeln!(f, "{LOG_HEADER}").map_err(io_err(&path))?;
            Some((f, path))
        }
        None => None,
    };

    let mut opt = AdamW::new(AdamWConfig { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..Default::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0usize;
    let b = cfg.batch_size;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng);
        let seq: Vec<(usize, usize)> =
            order.iter().flat_map(|&w| (0..windows[w].segments.len()).map(move |s| (w, s))).collect();
        for batch in seq.chunks(b) {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let mut items = Vec::with_capacity(batch.len());
            for &(w, s) in batch {
                let scene = &scenes[windows[w].scene];
                let segment = &windows[w].segments[s];
                let slots =
                    sample_expressions(segment, &scene.expressions, &scene.relation, cfg.slots, cfg.pos_fraction, &mut rng)?;
                items.push(Item { window: w, segment, slots });
            }
            let mut grids: Vec<SegmentGrids> = items
                .iter()
                .map(|it| SegmentGrids::new(&it.segment.boxes, &it.segment.present, &mc.grid_shapes))
                .collect::<Result<_, _>>()?;
            augment_grids(&mut grids, augment, rng.random());

            let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
            for (i, it) in items.iter().enumerate() {
                match groups.iter_mut().find(|(w, _)| *w == it.window) {
                    Some((_, v)) => v.push(i),
                    None => groups.push((it.window, vec![i])),
                }
            }

            let mut acc: Vec<Option<Tensor<f32>>> = vec![None; params.len()];
            let (mut total, mut focal, mut barrier, mut correct, mut pairs) = (0.0, 0.0, 0.0, 0usize, 0usize);
            let mut has_barrier = false;
            for (w, members) in &groups {
                let win = &windows[*w];
                let scene = &scenes[win.scene];
                let mut uniq: Vec<usize> = members.iter().flat_map(|&i| items[i].slots.iter().map(|s| s.0)).collect();
                uniq.sort_unstable();
                uniq.dedup();
                let pos: BTreeMap<usize, usize> = uniq.iter().enumerate().map(|(k, &e)| (e, k)).collect();
                let exprs: Vec<&Expression> = uniq.iter().map(|&e| &scene.expressions[e]).collect();

                let tape = Tape::new(params);
                let frames = model.visual.prepare_input::<f32>(&window_frames(&scene.clip, win.start, cfg.p)).map_err(ModelError::from)?;
                let ctx = model.window(&tape, &frames, &exprs)?;
                let mut root = None;
                for &i in members {
                    let it = &items[i];
                    let slots: Vec<usize> = it.slots.iter().map(|s| pos[&s.0]).collect();
                    let labels: Vec<u8> = it.slots.iter().map(|s| s.1).collect();
                    let out = model.score_segment(&tape, &ctx, &model.segment_input(&tape, &grids[i], slots))?;
                    let parts = total_loss(out.scores.averaged, &labels, out.ref_points, objective);
                    let (t, f) = (parts.total.value().item() as f64, parts.focal.value().item() as f64);
                    let br = parts.barrier.map(|v| v.value().item() as f64);
                    if !t.is_finite() || !f.is_finite() || br.is_some_and(|v| !v.is_finite()) {
                        let segments = items
                            .iter()
                            .map(|it| format!("{}/target{}@{}", scenes[windows[it.window].scene].clip.video_id, it.segment.target_id, it.segment.start_frame))
                            .collect();
                        return Err(TrainError::NonFinite { epoch, step, segments, total: t, focal: f, barrier: br });
                    }
                    total += t;
                    focal += f;
                    if let Some(v) = br {
                        barrier += v;
                        has_barrier = true;
                    }
                    let logits = out.scores.averaged.value();
                    for (r, &l) in logits.data().chunks(2).zip(&labels) {
                        correct += (((r[1] > r[0]) as u8) == l) as usize;
                    }
                    pairs += labels.len();
                    let scaled = parts.total.scale(1.0 / batch.len() as f64);
                    root = Some(match root {
                        None => scaled,
                        Some(r) => scaled.add(r),
                    });
                }
                let grads = tape.backward(root.expect("non-empty group")).into_param_grads();
                for (a, g) in acc.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        match a {
                            Some(a) => a.add_assign(&g),
                            None => *a = Some(g),
                        }
                    }
                }
            }
            clip_grad_norm(&mut acc, cfg.grad_clip);
            opt.step(params, &acc);
            step += 1;
            let n = batch.len() as f64;
            let row = LogRow {
                step,
                total: total / n,
                focal: focal / n,
                barrier: if has_barrier { barrier / n } else { 0.0 },
                accuracy: correct as f64 / pairs as f64,
            };
            if let Some((f, path)) = &mut log_file {
                writeln!(f, "{}", row.csv()).map_err(io_err(path))?;
            }
            log.push(row);
        }
        let recent = &log[log.len().saturating_sub(seq.len().div_ceil(b))..];
        if !recent.is_empty() {
            let m = |f: fn(&LogRow) -> f64| recent.iter().map(f).sum::<f64>() / recent.len() as f64;
            log::info!("epoch {}: loss {:.5} focal {:.5} accuracy {:.4}", epoch + 1, m(|r| r.total), m(|r| r.focal), m(|r| r.accuracy));
        }
        if let Some(dir) = &opts.out_dir {
            let path = epoch_checkpoint(dir, epoch + 1);
            checkpoint::save(&path, &model.config, vocab, params)?;
            checkpoints.push(path);
        }
    }
    if let Some(dir) = &opts.out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        checkpoint::save(&path, &model.config, vocab, params)?;
        checkpoints.push(path);
    }
    Ok(TrainReport { log, frozen_tensors, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn one_positive_fifty_negatives() {
        let neg: Vec<usize> = (1..=50).collect();
        let slots = sample_slots(&[0], &neg, 36, 0.25, &mut rng(1));
        assert_eq!(slots.len(), 36);
        assert_eq!(slots.iter().filter(|s| s.0 == 0 && s.1 == 1).count(), 9);
        let mut negs: Vec<usize> = slots.iter().filter(|s| s.1 == 0).map(|s| s.0).collect();
        assert_eq!(negs.len(), 27);
        negs.sort_unstable();
        negs.dedup();
        assert_eq!(negs.len(), 27);
    }

    #[test]
    fn no_positives_means_all_negative() {
        let slots = sample_slots(&[], &[3, 4], 36, 0.25, &mut rng(2));
        assert!(slots.iter().all(|s| s.1 == 0));
        assert_eq!(slots.len(), 36);
    }

    #[test]
    fn two_slots_one_of_each() {
        let slots = sample_slots(&[7], &[9], 2, 0.5, &mut rng(3));
        let mut s = slots.clone();
        s.sort_unstable();
        assert_eq!(s, vec![(7, 1), (9, 0)]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { slots: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { pos_fraction: 1.0, ..Default::default() }.validate().is_err());
    }
}
