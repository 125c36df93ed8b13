//! Domain types shared across the pipeline: boxes, trajectories, segments,
//! expressions and the frame-ranged expression/target relation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Model input resolution `(height, width)`.
pub const IMAGE_SIZE: (usize, usize) = (224, 672);

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("box has non-positive size {w}x{h}")]
    DegenerateBox { w: f64, h: f64 },
    #[error("expression {0} is not in the annotation")]
    UnknownExpression(u32),
    #[error("target {0} is not in the annotation")]
    UnknownTarget(u32),
    #[error("empty trajectory for target {0}")]
    EmptyTrajectory(u32),
    #[error("invalid window parameters p={p}, stride={stride}")]
    InvalidWindow { p: usize, stride: usize },
    #[error("duplicate target id {0} in trajectory set")]
    DuplicateTarget(u32),
    #[error("relation record has frame_start {start} > frame_end {end}")]
    InvertedRange { start: u32, end: u32 },
}

/// Axis-aligned box in input-image pixels, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, w: f64, h: f64) -> Result<Self, DomainError> {
        if w > 0.0 && h > 0.0 {
            Ok(Self { x0, y0, w, h })
        } else {
            Err(DomainError::DegenerateBox { w, h })
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x0 + 0.5 * self.w, self.y0 + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersect with `[0,width] x [0,height]`; `None` when nothing is left.
    /// A box already inside is returned unchanged.
    pub fn clip(&self, width: f64, height: f64) -> Option<Self> {
        if self.x0 >= 0.0 && self.y0 >= 0.0 && self.x0 + self.w <= width && self.y0 + self.h <= height {
            return (self.w > 0.0 && self.h > 0.0).then_some(*self);
        }
        let x0 = self.x0.max(0.0);
        let y0 = self.y0.max(0.0);
        let x1 = (self.x0 + self.w).min(width);
        let y1 = (self.y0 + self.h).min(height);
        (x1 > x0 && y1 > y0).then_some(Self { x0, y0, w: x1 - x0, h: y1 - y0 })
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let ix = ((self.x0 + self.w).min(other.x0 + other.w) - self.x0.max(other.x0)).max(0.0);
        let iy = ((self.y0 + self.h).min(other.y0 + other.h) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// One target's boxes keyed by frame index. Gaps are allowed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub target_id: u32,
    pub boxes: BTreeMap<u32, BoundingBox>,
}

impl Trajectory {
    pub fn new(target_id: u32) -> Self {
        Self { target_id, boxes: BTreeMap::new() }
    }

    pub fn first_frame(&self) -> Option<u32> {
        self.boxes.keys().next().copied()
    }

    pub fn last_frame(&self) -> Option<u32> {
        self.boxes.keys().next_back().copied()
    }

    /// Box at `frame`, or the box of the nearest present frame (earlier wins ties).
    pub fn nearest_box(&self, frame: u32) -> Option<BoundingBox> {
        if let Some(b) = self.boxes.get(&frame) {
            return Some(*b);
        }
        let before = self.boxes.range(..frame).next_back();
        let after = self.boxes.range(frame..).next();
        match (before, after) {
            (Some((&fb, b)), Some((&fa, a))) => Some(if frame - fb <= fa - frame { *b } else { *a }),
            (Some((_, b)), None) => Some(*b),
            (None, Some((_, a))) => Some(*a),
            (None, None) => None,
        }
    }
}

/// All trajectories of one video; target ids are unique.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub video_id: String,
    pub trajectories: Vec<Trajectory>,
}

impl TrajectorySet {
    pub fn new(video_id: impl Into<String>, trajectories: Vec<Trajectory>) -> Result<Self, DomainError> {
        let mut seen = BTreeSet::new();
        for t in &trajectories {
            if !seen.insert(t.target_id) {
                return Err(DomainError::DuplicateTarget(t.target_id));
            }
        }
        Ok(Self { video_id: video_id.into(), trajectories })
    }

    pub fn get(&self, target_id: u32) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.target_id == target_id)
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.iter().all(|t| t.boxes.is_empty())
    }
}

/// `p` consecutive frames of one trajectory. Frames where the tracker lost
/// the target carry the nearest present box and a false mask entry.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySegment {
    pub target_id: u32,
    pub start_frame: u32,
    pub boxes: Vec<BoundingBox>,
    pub present: Vec<bool>,
}

impl TrajectorySegment {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.boxes.len() as u32).map(move |k| self.start_frame + k)
    }

    /// Segment covering `start..start+p` of `traj`; `None` if no frame in the
    /// window has a box.
    pub fn at(traj: &Trajectory, start: u32, p: usize) -> Option<Self> {
        let present: Vec<bool> = (0..p as u32).map(|k| traj.boxes.contains_key(&(start + k))).collect();
        if !present.iter().any(|&b| b) {
            return None;
        }
        let boxes = (0..p as u32)
            .map(|k| traj.nearest_box(start + k).expect("non-empty trajectory"))
            .collect();
        Some(Self { target_id: traj.target_id, start_frame: start, boxes, present })
    }
}

/// Tokenized expression. `tokens` always has the configured length `L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub expr_id: u32,
    pub text: String,
    pub tokens: Vec<u32>,
    pub pad: Vec<bool>,
}

/// `(expr_id, target_id, frame_start, frame_end)` with an inclusive range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationRecord {
    pub expr_id: u32,
    pub target_id: u32,
    pub frame_start: u32,
    pub frame_end: u32,
}

/// Ground-truth many-to-many relation between expressions and targets,
/// together with the ids known to the annotation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchingRelation {
    pub records: Vec<RelationRecord>,
    pub expr_ids: BTreeSet<u32>,
    pub target_ids: BTreeSet<u32>,
}

impl MatchingRelation {
    pub fn new(
        records: Vec<RelationRecord>,
        expr_ids: impl IntoIterator<Item = u32>,
        target_ids: impl IntoIterator<Item = u32>,
    ) -> Result<Self, DomainError> {
        for r in &records {
            if r.frame_start > r.frame_end {
                return Err(DomainError::InvertedRange { start: r.frame_start, end: r.frame_end });
            }
        }
        let mut expr_ids: BTreeSet<u32> = expr_ids.into_iter().collect();
        let mut target_ids: BTreeSet<u32> = target_ids.into_iter().collect();
        for r in &records {
            expr_ids.insert(r.expr_id);
            target_ids.insert(r.target_id);
        }
        Ok(Self { records, expr_ids, target_ids })
    }

    /// Frames of `target_id` covered by any record of `expr_id`.
    pub fn covers(&self, expr_id: u32, target_id: u32, frame: u32) -> bool {
        self.records.iter().any(|r| {
            r.expr_id == expr_id && r.target_id == target_id && r.frame_start <= frame && frame <= r.frame_end
        })
    }
}

/// Decoded frames of one video, `[T, H, W, 3]` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub video_id: String,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<Vec<u8>>,
}

impl VideoClip {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }
}

/// Default fraction of a segment's present frames that a record must cover.
pub const DEFAULT_LABEL_THRESHOLD: f64 = 0.5;

/// 1 when some record for `(expr_id, segment target)` covers strictly more
/// than `threshold` of the segment's present frames.
pub fn segment_label(
    relation: &MatchingRelation,
    segment: &TrajectorySegment,
    expr_id: u32,
) -> Result<u8, DomainError> {
    segment_label_with(relation, segment, expr_id, DEFAULT_LABEL_THRESHOLD)
}

pub fn segment_label_with(
    relation: &MatchingRelation,
    segment: &TrajectorySegment,
    expr_id: u32,
    threshold: f64,
) -> Result<u8, DomainError> {
    if !relation.expr_ids.contains(&expr_id) {
        return Err(DomainError::UnknownExpression(expr_id));
    }
    if !relation.target_ids.contains(&segment.target_id) {
        return Err(DomainError::UnknownTarget(segment.target_id));
    }
    let present: Vec<u32> = segment
        .frames()
        .zip(&segment.present)
        .filter(|(_, &p)| p)
        .map(|(f, _)| f)
        .collect();
    let hit = relation
        .records
        .iter()
        .filter(|r| r.expr_id == expr_id && r.target_id == segment.target_id)
        .any(|r| {
            let covered = present.iter().filter(|&&f| r.frame_start <= f && f <= r.frame_end).count();
            covered as f64 > threshold * present.len() as f64
        });
    Ok(hit as u8)
}

/// Sliding windows of length `p` over the trajectory's frame span. A span
/// shorter than `p` yields a single window at the first frame.
pub fn window_segments(traj: &Trajectory, p: usize, stride: usize) -> Result<Vec<TrajectorySegment>, DomainError> {
    if p == 0 || stride == 0 {
        return Err(DomainError::InvalidWindow { p, stride });
    }
    let (Some(first), Some(last)) = (traj.first_frame(), traj.last_frame()) else {
        return Err(DomainError::EmptyTrajectory(traj.target_id));
    };
    let span = (last - first + 1) as usize;
    let count = if span >= p { (span - p) / stride + 1 } else { 1 };
    Ok((0..count)
        .filter_map(|i| TrajectorySegment::at(traj, first + (i * stride) as u32, p))
        .collect())
}
