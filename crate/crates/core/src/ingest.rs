//! Tracker-output and expression-annotation files.
//!
//! Tracker files are MOT-style CSV, `frame,id,x,y,w,h,conf,...` with 1-based
//! frames; everything after the confidence column is ignored. Expression
//! files are JSON lists of `{expr_id, text, targets: [{target_id,
//! frame_start, frame_end}]}` with 0-based inclusive frame ranges.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{BoundingBox, Expression, MatchingRelation, RelationRecord, Trajectory, TrajectorySet};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io { path: path.display().to_string(), source }
}

/// Non-fatal irregularities found while parsing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Warnings {
    pub dropped_boxes: usize,
    pub duplicates: usize,
    pub truncated_texts: usize,
}

/// One parsed tracker line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotRecord {
    pub frame: u32,
    pub track_id: u32,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

fn parse_line(line: &str, lineno: usize) -> Result<(i64, i64, [f64; 4], f64), IngestError> {
    let bad = |message: String| IngestError::Malformed { line: lineno, message };
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() < 6 {
        return Err(bad(format!("expected at least 6 fields, found {}", fields.len())));
    }
    let int = |i: usize, name: &str| -> Result<i64, IngestError> {
        let v: f64 = fields[i].parse().map_err(|_| bad(format!("{name} '{}' is not a number", fields[i])))?;
        if v.fract() != 0.0 {
            return Err(bad(format!("{name} '{}' is not an integer", fields[i])));
        }
        Ok(v as i64)
    };
    let num = |i: usize, name: &str| -> Result<f64, IngestError> {
        let v: f64 = fields[i].parse().map_err(|_| bad(format!("{name} '{}' is not a number", fields[i])))?;
        if !v.is_finite() {
            return Err(bad(format!("{name} is not finite")));
        }
        Ok(v)
    };
    let frame = int(0, "frame")?;
    let id = int(1, "id")?;
    if frame < 1 {
        return Err(bad(format!("frame {frame} is not 1-based")));
    }
    if id < 0 || id > u32::MAX as i64 {
        return Err(bad(format!("id {id} out of range")));
    }
    let xywh = [num(2, "x")?, num(3, "y")?, num(4, "w")?, num(5, "h")?];
    let conf = if fields.len() > 6 { num(6, "conf")? } else { 1.0 };
    Ok((frame, id, xywh, conf))
}

/// Parse tracker CSV text. Boxes are clipped to `image_size = (height, width)`.
pub fn parse_tracker_str(
    text: &str,
    video_id: &str,
    image_size: (usize, usize),
) -> Result<(TrajectorySet, Warnings), IngestError> {
    let (height, width) = (image_size.0 as f64, image_size.1 as f64);
    let mut warnings = Warnings::default();
    let mut best: BTreeMap<(u32, u32), MotRecord> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (frame, id, [x, y, w, h], confidence) = parse_line(line, i + 1)?;
        let clipped = if w > 0.0 && h > 0.0 {
            BoundingBox { x0: x, y0: y, w, h }.clip(width, height)
        } else {
            None
        };
        let Some(bbox) = clipped else {
            warnings.dropped_boxes += 1;
            continue;
        };
        let rec = MotRecord { frame: (frame - 1) as u32, track_id: id as u32, bbox, confidence };
        match best.get(&(rec.track_id, rec.frame)) {
            Some(prev) => {
                warnings.duplicates += 1;
                if rec.confidence > prev.confidence {
                    best.insert((rec.track_id, rec.frame), rec);
                }
            }
            None => {
                best.insert((rec.track_id, rec.frame), rec);
            }
        }
    }
    let mut by_id: BTreeMap<u32, Trajectory> = BTreeMap::new();
    for ((id, frame), rec) in best {
        by_id.entry(id).or_insert_with(|| Trajectory::new(id)).boxes.insert(frame, rec.bbox);
    }
    let set = TrajectorySet { video_id: video_id.to_string(), trajectories: by_id.into_values().collect() };
    Ok((set, warnings))
}

pub fn parse_tracker_file(path: &Path, image_size: (usize, usize)) -> Result<(TrajectorySet, Warnings), IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let video_id = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()).unwrap_or("");
    let (set, warnings) = parse_tracker_str(&text, video_id, image_size)?;
    if warnings != Warnings::default() {
        log::warn!("{}: {:?}", path.display(), warnings);
    }
    Ok((set, warnings))
}

/// Render a trajectory set as tracker CSV (1-based frames, confidence 1).
pub fn tracker_to_string(set: &TrajectorySet) -> String {
    let mut rows: Vec<(u32, u32, BoundingBox)> = set
        .trajectories
        .iter()
        .flat_map(|t| t.boxes.iter().map(move |(&f, &b)| (f, t.target_id, b)))
        .collect();
    rows.sort_by_key(|&(f, id, _)| (f, id));
    let mut out = String::new();
    for (f, id, b) in rows {
        writeln!(out, "{},{},{},{},{},{},1,-1,-1,-1", f + 1, id, b.x0, b.y0, b.w, b.h).unwrap();
    }
    out
}

pub fn write_tracker_file(path: &Path, set: &TrajectorySet) -> Result<(), IngestError> {
    fs::write(path, tracker_to_string(set)).map_err(io_err(path))
}

/// Closed vocabulary. Id 0 is padding, id 1 is the unknown token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Lowercased words of `text`, split on whitespace and punctuation.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Vocab {
    /// Sorted vocabulary over all words in `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        Self::from_words(set.into_iter().collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32 + 2)).collect();
        Self { words, index }
    }

    /// Restore the lookup table after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_words(self.words)
    }

    /// Number of ids including pad and unk.
    pub fn size(&self) -> usize {
        self.words.len() + 2
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// First 8 bytes of SHA-256 over the newline-joined word list.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Token ids padded or truncated to `len`; returns `(ids, pad flags, truncated)`.
pub fn tokenize(text: &str, vocab: &Vocab, len: usize) -> (Vec<u32>, Vec<bool>, bool) {
    let ws = words(text);
    let truncated = ws.len() > len;
    let mut ids: Vec<u32> = ws.iter().take(len).map(|w| vocab.id(w)).collect();
    let n = ids.len();
    ids.resize(len, PAD_ID);
    let pad = (0..len).map(|i| i >= n).collect();
    (ids, pad, truncated)
}

pub fn make_expression(expr_id: u32, text: &str, vocab: &Vocab, len: usize) -> (Expression, bool) {
    let (tokens, pad, truncated) = tokenize(text, vocab, len);
    (Expression { expr_id, text: text.to_string(), tokens, pad }, truncated)
}

/// One entry of an expression file before tokenization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub expr_id: u32,
    pub text: String,
    pub targets: Vec<TargetRange>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRange {
    pub target_id: u32,
    pub frame_start: u32,
    pub frame_end: u32,
}

fn schema(path: String, message: impl Into<String>) -> IngestError {
    IngestError::Schema { path, message: message.into() }
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, path: &str) -> Result<&'a Value, IngestError> {
    obj.get(key).ok_or_else(|| schema(format!("{path}.{key}"), "missing field"))
}

fn uint(v: &Value, path: String) -> Result<u32, IngestError> {
    v.as_u64()
        .filter(|&n| n <= u32::MAX as u64)
        .map(|n| n as u32)
        .ok_or_else(|| schema(path, "expected a non-negative integer"))
}

/// Validate and decode expression-file JSON, reporting the path of the first
/// offending entry.
pub fn parse_expression_records(text: &str) -> Result<Vec<ExpressionRecord>, IngestError> {
    let root: Value = serde_json::from_str(text)?;
    let list = root.as_array().ok_or_else(|| schema("$".into(), "expected a list"))?;
    let mut out = Vec::with_capacity(list.len());
    for (i, item) in list.iter().enumerate() {
        let path = format!("$[{i}]");
        let obj = item.as_object().ok_or_else(|| schema(path.clone(), "expected an object"))?;
        let expr_id = uint(field(obj, "expr_id", &path)?, format!("{path}.expr_id"))?;
        let text = field(obj, "text", &path)?
            .as_str()
            .ok_or_else(|| schema(format!("{path}.text"), "expected a string"))?
            .to_string();
        let targets_v = field(obj, "targets", &path)?
            .as_array()
            .ok_or_else(|| schema(format!("{path}.targets"), "expected a list"))?;
        let mut targets = Vec::with_capacity(targets_v.len());
        for (j, t) in targets_v.iter().enumerate() {
            let tp = format!("{path}.targets[{j}]");
            let tobj = t.as_object().ok_or_else(|| schema(tp.clone(), "expected an object"))?;
            let target_id = uint(field(tobj, "target_id", &tp)?, format!("{tp}.target_id"))?;
            let frame_start = uint(field(tobj, "frame_start", &tp)?, format!("{tp}.frame_start"))?;
            let frame_end = uint(field(tobj, "frame_end", &tp)?, format!("{tp}.frame_end"))?;
            if frame_start > frame_end {
                return Err(schema(tp, format!("frame_start {frame_start} > frame_end {frame_end}")));
            }
            targets.push(TargetRange { target_id, frame_start, frame_end });
        }
        out.push(ExpressionRecord { expr_id, text, targets });
    }
    Ok(out)
}

/// Tokenize records and build the relation. `target_ids` are the ids known
/// from the tracker side, so targets without records still count as annotated.
pub fn build_expressions(
    records: &[ExpressionRecord],
    vocab: &Vocab,
    len: usize,
    target_ids: impl IntoIterator<Item = u32>,
) -> (Vec<Expression>, MatchingRelation, Warnings) {
    let mut warnings = Warnings::default();
    let mut exprs = Vec::with_capacity(records.len());
    let mut recs = Vec::new();
    for r in records {
        let (e, truncated) = make_expression(r.expr_id, &r.text, vocab, len);
        warnings.truncated_texts += truncated as usize;
        exprs.push(e);
        for t in &r.targets {
            recs.push(RelationRecord {
                expr_id: r.expr_id,
                target_id: t.target_id,
                frame_start: t.frame_start,
                frame_end: t.frame_end,
            });
        }
    }
    let relation = MatchingRelation::new(recs, records.iter().map(|r| r.expr_id), target_ids)
        .expect("ranges validated during parsing");
    (exprs, relation, warnings)
}

pub fn read_expression_records(path: &Path) -> Result<Vec<ExpressionRecord>, IngestError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_expression_records(&text)
}

/// Read, tokenize and relate an expression file.
pub fn parse_expressions(
    path: &Path,
    vocab: &Vocab,
    len: usize,
) -> Result<(Vec<Expression>, MatchingRelation, Warnings), IngestError> {
    let records = read_expression_records(path)?;
    let out = build_expressions(&records, vocab, len, []);
    if out.2.truncated_texts > 0 {
        log::warn!("{}: {} expression(s) truncated to {len} tokens", path.display(), out.2.truncated_texts);
    }
    Ok(out)
}

pub fn write_expression_records(path: &Path, records: &[ExpressionRecord]) -> Result<(), IngestError> {
    let text = serde_json::to_string_pretty(records)?;
    fs::write(path, text).map_err(io_err(path))
}
