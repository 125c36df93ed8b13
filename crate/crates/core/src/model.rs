//! Full scoring model: encoders, feature hooking, temporal integration and
//! the per-level pairwise decoder, plus the ablation variants.
//!
//! Work is split in two stages so that everything shared by the segments
//! of one frame window is computed once:
//! [`Model::window`] encodes the frames and the window's distinct
//! expressions (text features, reference points, pooled reference samples
//! and their key/value projections); [`Model::score_segment`] then hooks one
//! trajectory segment and decodes its `N` expression slots.

use autograd::{concat, Float, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chook::{bilinear_sample, normalize_grid, sample_references, ReferenceDecoder, GRID_SHAPES};
use crate::domain::{Expression, IMAGE_SIZE};
use crate::encoders::{pool_tokens, BackboneConfig, EncoderError, LinguisticFeatures, TextEncoder, VisualEncoder};
use crate::layers::ParamBuilder;
use crate::pcd::{build_mask, MatchScores, PcdLayer};
use crate::temporal::{grid_displacements, pool_time, TemporalIntegration};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("expected {expected} grid levels, got {got}")]
    Levels { expected: usize, got: usize },
}

/// How per-frame target features are merged over time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalMode {
    /// Frame concatenation plus grid displacements through an MLP.
    #[default]
    Integrate,
    /// Plain mean over frames.
    MeanPool,
}

/// How a slot's score is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    /// Masked cross-attention decoder.
    #[default]
    Pcd,
    /// Cosine similarity of pooled trajectory and pooled text features.
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelOrder {
    #[default]
    FineToCoarse,
    CoarseToFine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `C`.
    pub channels: usize,
    /// Segment length `p`.
    pub p: usize,
    /// Expression slots per forward pass `N`.
    pub slots: usize,
    /// Reference points per expression `M` (0 disables conditioning).
    pub ref_points: usize,
    /// Token length `L`.
    pub max_tokens: usize,
    pub vocab_size: usize,
    pub image_size: (usize, usize),
    pub grid_shapes: Vec<(usize, usize)>,
    pub backbone: BackboneConfig,
    pub text_layers: usize,
    /// Attention heads; `None` means `max(1, C/16)`.
    pub heads: Option<usize>,
    pub tied_levels: bool,
    pub level_order: LevelOrder,
    pub temporal: TemporalMode,
    pub scorer: Scorer,
    /// Divide displacements by the larger side of the frame-0 box.
    pub normalize_displacement: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            p: 4,
            slots: 36,
            ref_points: 10,
            max_tokens: 25,
            vocab_size: 2,
            image_size: IMAGE_SIZE,
            grid_shapes: GRID_SHAPES.to_vec(),
            backbone: BackboneConfig::default(),
            text_layers: 2,
            heads: None,
            tied_levels: false,
            level_order: LevelOrder::FineToCoarse,
            temporal: TemporalMode::Integrate,
            scorer: Scorer::Pcd,
            normalize_displacement: true,
        }
    }
}

impl ModelConfig {
    pub fn heads(&self) -> usize {
        self.heads.unwrap_or((self.channels / 16).max(1))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.channels == 0 || !self.channels.is_multiple_of(self.heads()) {
            return bad(format!("channels {} not divisible by {} heads", self.channels, self.heads()));
        }
        if self.p == 0 {
            return bad("p must be at least 1".into());
        }
        if self.slots < 2 {
            return bad("slots must be at least 2".into());
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1".into());
        }
        if self.grid_shapes.len() != 4 {
            return bad(format!("need 4 grid shapes, got {}", self.grid_shapes.len()));
        }
        if self.grid_shapes.iter().any(|&(h, w)| h < 2 || w < 2) {
            return bad("grid shapes must be at least 2x2".into());
        }
        if !self.image_size.0.is_multiple_of(32) || !self.image_size.1.is_multiple_of(32) {
            return bad(format!("image size {:?} must be divisible by 32", self.image_size));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LevelParams {
    temporal: Option<TemporalIntegration>,
    pcd: Option<PcdLayer>,
}

/// Parameter handles of the whole model. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub hook: Option<ReferenceDecoder>,
    levels: Vec<LevelParams>,
    query_seed: Option<ParamId>,
}

/// A segment's input to the decoder.
pub struct SegmentInput<'t, T: Float> {
    /// Pixel-space grids `[p, h_l, w_l, 2]`, one per level, finest first.
    pub grids: Vec<Var<'t, T>>,
    /// Multiplier applied to displacements (`1/max(w_b, h_b)` of frame 0, or 1).
    pub displacement_scale: f64,
    /// Index into the window's distinct expressions for each slot.
    pub slots: Vec<usize>,
}

/// Per-window values shared by all segments scored against it.
pub struct WindowContext<'t, T: Float> {
    pub pyramid: Vec<Var<'t, T>>,
    pub text: LinguisticFeatures<'t, T>,
    /// `[U, M, 2]` reference points, absent when `M = 0`.
    pub ref_points: Option<Var<'t, T>>,
    levels: Vec<WindowLevel<'t, T>>,
    pooled_text: Option<Var<'t, T>>,
}

struct WindowLevel<'t, T: Float> {
    /// Projected `[U*M, C]` reference keys/values.
    ref_kv: Option<(Var<'t, T>, Var<'t, T>)>,
    /// Projected `[U*L, C]` linguistic keys/values.
    ling_kv: Option<(Var<'t, T>, Var<'t, T>)>,
}

/// Decoder output for one segment.
pub struct SegmentOutput<'t, T: Float> {
    pub scores: MatchScores<'t, T>,
    /// Slot reference points `[N, M, 2]`, absent when `M = 0`.
    pub ref_points: Option<Var<'t, T>>,
}

fn expand_rows(slots: &[usize], per: usize) -> Vec<usize> {
    slots.iter().flat_map(|&s| s * per..(s + 1) * per).collect()
}

impl Model {
    /// Build a model and its freshly initialised parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>), ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = {
            let mut pb = ParamBuilder::new(&mut store, seed);
            Self::build(config, &mut pb)
        };
        Ok((model, store))
    }

    /// Rebuild parameter handles for a store whose names match `config`.
    pub fn handles(config: ModelConfig) -> Result<(Self, ParamStore<f32>), ModelError> {
        Self::new(config, 0)
    }

    fn build(config: ModelConfig, pb: &mut ParamBuilder) -> Self {
        let c = config.channels;
        let heads = config.heads();
        let visual = VisualEncoder::new(pb, &config.backbone, c, config.image_size);
        let text = TextEncoder::new(pb, config.vocab_size, config.max_tokens, c, heads, config.text_layers);
        let hook = (config.ref_points > 0 && config.scorer == Scorer::Pcd)
            .then(|| ReferenceDecoder::new(pb, config.ref_points, c, heads));
        let n_param_levels = if config.tied_levels { 1 } else { 4 };
        let levels = (0..n_param_levels)
            .map(|l| {
                pb.scope(&format!("level{l}"), |pb| LevelParams {
                    temporal: (config.temporal == TemporalMode::Integrate)
                        .then(|| TemporalIntegration::new(pb, "temporal", config.p, c)),
                    pcd: (config.scorer == Scorer::Pcd).then(|| PcdLayer::new(pb, "pcd", c, heads)),
                })
            })
            .collect();
        let query_seed = (config.scorer == Scorer::Pcd).then(|| pb.scope("pcd", |pb| pb.uniform("query_seed", &[1, c], 1.0)));
        Self { config, visual, text, hook, levels, query_seed }
    }

    fn level_params(&self, l: usize) -> &LevelParams {
        &self.levels[if self.config.tied_levels { 0 } else { l }]
    }

    /// Decoding order of pyramid levels.
    pub fn level_sequence(&self) -> Vec<usize> {
        match self.config.level_order {
            LevelOrder::FineToCoarse => vec![0, 1, 2, 3],
            LevelOrder::CoarseToFine => vec![3, 2, 1, 0],
        }
    }

    /// Encode a window's frames (`[p, H, W, 3]` in [0,1], or already prepared
    /// with coordinate planes) and its distinct expressions.
    pub fn window<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        frames: &Tensor<T>,
        exprs: &[&Expression],
    ) -> Result<WindowContext<'t, T>, ModelError> {
        let pyramid = if frames.shape().last() == Some(&3) {
            self.visual.encode_frames(tape, frames)?
        } else {
            self.visual.encode_prepared(tape, tape.constant(frames.clone()))
        };
        self.window_from_pyramid(tape, pyramid, exprs)
    }

    pub fn window_from_pyramid<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        pyramid: Vec<Var<'t, T>>,
        exprs: &[&Expression],
    ) -> Result<WindowContext<'t, T>, ModelError> {
        let text = self.text.encode_text(tape, exprs)?;
        let u = exprs.len();
        let c = self.config.channels;
        let l_tok = self.config.max_tokens;
        let ref_points = self.hook.as_ref().map(|h| h.decode(tape, &text));
        let mut levels = Vec::with_capacity(4);
        if self.config.scorer == Scorer::Pcd {
            for (l, map) in pyramid.iter().enumerate() {
                let pcd = self.level_params(l).pcd.as_ref().expect("pcd scorer");
                let ref_kv = ref_points.map(|r| {
                    let feats = pool_time(sample_references(*map, r));
                    pcd.project_kv(tape, feats.reshape(&[u * self.config.ref_points, c]))
                });
                let ling_kv = Some(pcd.project_kv(tape, text.values.reshape(&[u * l_tok, c])));
                levels.push(WindowLevel { ref_kv, ling_kv });
            }
        }
        let pooled_text = (self.config.scorer == Scorer::Cosine).then(|| pool_tokens(&text));
        Ok(WindowContext { pyramid, text, ref_points, levels, pooled_text })
    }

    /// Trajectory feature map `[h, w, C]` of one level.
    fn trajectory_features<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        level: usize,
        map: Var<'t, T>,
        grid: Var<'t, T>,
        displacement_scale: f64,
    ) -> Var<'t, T> {
        let sampled = bilinear_sample(map, normalize_grid(grid, self.config.image_size));
        match &self.level_params(level).temporal {
            Some(ti) => {
                let d = grid_displacements(grid).map(|d| d.scale(displacement_scale));
                ti.integrate(tape, sampled, d)
            }
            None => pool_time(sampled),
        }
    }

    /// Decode one segment against the window's expressions.
    pub fn score_segment<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        ctx: &WindowContext<'t, T>,
        seg: &SegmentInput<'t, T>,
    ) -> Result<SegmentOutput<'t, T>, ModelError> {
        if seg.grids.len() != 4 {
            return Err(ModelError::Levels { expected: 4, got: seg.grids.len() });
        }
        let n = seg.slots.len();
        let c = self.config.channels;
        let l_tok = self.config.max_tokens;
        let m = self.config.ref_points;
        let slot_refs = ctx.ref_points.map(|r| r.index_select(&seg.slots));
        let mut per_level = Vec::with_capacity(4);
        match self.config.scorer {
            Scorer::Pcd => {
                let pad: Vec<bool> = seg.slots.iter().flat_map(|&s| ctx.text.pad[s * l_tok..(s + 1) * l_tok].iter().copied()).collect();
                let seed = tape.param(self.query_seed.expect("pcd scorer"));
                let mut queries = seed.expand_leading(n).reshape(&[n, c]);
                for l in self.level_sequence() {
                    let fj = self.trajectory_features(tape, l, ctx.pyramid[l], seg.grids[l], seg.displacement_scale);
                    let s = fj.shape();
                    let hw = s[0] * s[1];
                    let pcd = self.level_params(l).pcd.as_ref().unwrap();
                    let (tk, tv) = pcd.project_kv(tape, fj.reshape(&[hw, c]));
                    let mut ks = vec![tk];
                    let mut vs = vec![tv];
                    let win = &ctx.levels[l];
                    let refs_here = if let Some((rk, rv)) = win.ref_kv {
                        let rows = expand_rows(&seg.slots, m);
                        ks.push(rk.index_select(&rows));
                        vs.push(rv.index_select(&rows));
                        m
                    } else {
                        0
                    };
                    let (lk, lv) = win.ling_kv.expect("linguistic keys");
                    let rows = expand_rows(&seg.slots, l_tok);
                    ks.push(lk.index_select(&rows));
                    vs.push(lv.index_select(&rows));
                    let mask = build_mask(hw, n, refs_here, l_tok, &pad);
                    let (q, logits) = pcd.step(tape, queries, concat(&ks, 0), concat(&vs, 0), &mask);
                    queries = q;
                    per_level.push(logits);
                }
            }
            Scorer::Cosine => {
                let text = ctx.pooled_text.expect("cosine scorer").index_select(&seg.slots);
                for l in self.level_sequence() {
                    let fj = self.trajectory_features(tape, l, ctx.pyramid[l], seg.grids[l], seg.displacement_scale);
                    let s = fj.shape();
                    let pooled = fj.reshape(&[s[0] * s[1], c]).mean_axis(0);
                    per_level.push(cosine_logits(pooled, text));
                }
            }
        }
        Ok(SegmentOutput { scores: MatchScores::from_levels(per_level), ref_points: slot_refs })
    }
}

/// Floor on the mapped cosine probability before taking logs.
const COSINE_FLOOR: f64 = 1e-6;

/// Cosine similarity of `traj [C]` with each row of `text [N, C]`, mapped to
/// `s = (cos + 1)/2` and returned as two-class logits `[ln(1-s), ln s]` so
/// that their softmax is exactly `(1-s, s)`. Zero vectors give `cos = 0`.
pub fn cosine_logits<'t, T: Float>(traj: Var<'t, T>, text: Var<'t, T>) -> Var<'t, T> {
    let n = text.shape()[0];
    let c = text.shape()[1];
    let tj = traj.reshape(&[1, c]).expand_leading(n).reshape(&[n, c]);
    let dot = tj.mul(text).sum_axis(1);
    let eps = 1e-16;
    let na = tj.square().sum_axis(1).add_scalar(eps).sqrt();
    let nb = text.square().sum_axis(1).add_scalar(eps).sqrt();
    let cos = dot.div(na.mul(nb));
    let s = cos.add_scalar(1.0).scale(0.5).clamp(COSINE_FLOOR, 1.0 - COSINE_FLOOR);
    let pos = s.ln().reshape(&[n, 1]);
    let neg = s.neg().add_scalar(1.0).ln().reshape(&[n, 1]);
    concat(&[neg, pos], 1)
}

/// `softmax(logits)[match]` for each row of `[N, 2]`.
pub fn match_probabilities<T: Float>(logits: &Tensor<T>) -> Vec<f64> {
    logits
        .data()
        .chunks(2)
        .map(|r| {
            let (a, b) = (r[0].as_f64(), r[1].as_f64());
            1.0 / (1.0 + (a - b).exp())
        })
        .collect()
}

/// Frames `start..start+p` of a clip; indices past the end repeat the last frame.
pub fn window_frames(clip: &crate::domain::VideoClip, start: u32, p: usize) -> Vec<&[u8]> {
    let last = clip.frames.len().saturating_sub(1);
    (0..p).map(|k| clip.frames[(start as usize + k).min(last)].as_slice()).collect()
}

impl Model {
    /// Displacement multiplier for a segment whose first box is `first`.
    pub fn displacement_scale(&self, first: &crate::domain::BoundingBox) -> f64 {
        if self.config.normalize_displacement {
            1.0 / first.w.max(first.h).max(1e-6)
        } else {
            1.0
        }
    }

    /// Constant pixel grids of a segment on `tape`.
    pub fn segment_input<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        grids: &crate::chook::SegmentGrids,
        slots: Vec<usize>,
    ) -> SegmentInput<'t, T> {
        SegmentInput {
            grids: grids.levels.iter().map(|g| tape.constant(g.cast())).collect(),
            displacement_scale: self.displacement_scale(&grids.boxes[0]),
            slots,
        }
    }
}
