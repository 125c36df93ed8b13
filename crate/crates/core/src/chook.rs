//! Feature hooking: box-aligned sampling grids, tracking-noise augmentation,
//! differentiable bilinear sampling and language-conditioned reference points.
//!
//! Coordinates follow the half-pixel convention: pixel `j` of a map of width
//! `W` has its centre at `j` in pixel units and at `2(j+0.5)/W - 1` in
//! normalised units, so `-1`/`+1` are the outer edges of the map.

use autograd::{par, Float, ParamId, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::BoundingBox;
use crate::encoders::LinguisticFeatures;
use crate::layers::{LayerNorm, Linear, Mlp, MultiHeadAttention, ParamBuilder};

/// Per-level sampling grid shapes `(h, w)`, finest level first.
pub const GRID_SHAPES: [(usize, usize); 4] = [(16, 48), (8, 24), (4, 12), (2, 6)];

#[derive(Debug, Error, PartialEq)]
pub enum ChookError {
    #[error("sampling grid must be at least 2x2, got {h}x{w}")]
    GridTooSmall { h: usize, w: usize },
}

/// Pixel-space grid `[h, w, 2]` spanning the box corner to corner:
/// `P(x, y) = (x0 + x w_b/(w-1), y0 + y h_b/(h-1))` for 0-based `x, y`.
/// The fraction is formed first so the far corner is exactly `x0 + w_b`.
pub fn build_grid(b: &BoundingBox, h: usize, w: usize) -> Result<Tensor<f64>, ChookError> {
    if h < 2 || w < 2 {
        return Err(ChookError::GridTooSmall { h, w });
    }
    let mut data = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        let ty = y as f64 / (h - 1) as f64;
        for x in 0..w {
            let tx = x as f64 / (w - 1) as f64;
            data.push(b.x0 + tx * b.w);
            data.push(b.y0 + ty * b.h);
        }
    }
    Ok(Tensor::new(&[h, w, 2], data))
}

/// Grids for every frame of a segment, `[p, h, w, 2]`.
pub fn build_segment_grid(boxes: &[BoundingBox], h: usize, w: usize) -> Result<Tensor<f64>, ChookError> {
    let mut data = Vec::with_capacity(boxes.len() * h * w * 2);
    for b in boxes {
        data.extend_from_slice(build_grid(b, h, w)?.data());
    }
    Ok(Tensor::new(&[boxes.len(), h, w, 2], data))
}

/// Differentiable grid construction from boxes `[p, 4]` (x0, y0, w, h).
pub fn grid_from_boxes<'t, T: Float>(boxes: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>, ChookError> {
    if h < 2 || w < 2 {
        return Err(ChookError::GridTooSmall { h, w });
    }
    let bv = boxes.value();
    let p = bv.shape()[0];
    let fx: Vec<T> = (0..w).map(|x| T::of(x as f64 / (w - 1) as f64)).collect();
    let fy: Vec<T> = (0..h).map(|y| T::of(y as f64 / (h - 1) as f64)).collect();
    let mut data = Vec::with_capacity(p * h * w * 2);
    for b in bv.data().chunks(4) {
        for &ty in &fy {
            for &tx in &fx {
                data.push(b[0] + tx * b[2]);
                data.push(b[1] + ty * b[3]);
            }
        }
    }
    let out = Tensor::new(&[p, h, w, 2], data);
    Ok(boxes.tape().op(&[boxes], out, move |g, _| {
        let mut gb = vec![T::zero(); p * 4];
        for (k, gk) in g.data().chunks(h * w * 2).enumerate() {
            for (i, pt) in gk.chunks(2).enumerate() {
                let (tx, ty) = (fx[i % w], fy[i / w]);
                gb[k * 4] += pt[0];
                gb[k * 4 + 1] += pt[1];
                gb[k * 4 + 2] += pt[0] * tx;
                gb[k * 4 + 3] += pt[1] * ty;
            }
        }
        vec![Some(Tensor::new(&[p, 4], gb))]
    }))
}

/// Strengths of the three tracking-noise augmentations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub drop_prob: f64,
    pub noise_sigma: f64,
    pub swap_prob: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { drop_prob: 0.1, noise_sigma: 0.05, swap_prob: 0.1, enabled: true }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { drop_prob: 0.0, noise_sigma: 0.0, swap_prob: 0.0, enabled: false }
    }
}

/// One segment's grids at every pyramid level plus its per-frame state.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentGrids {
    /// `[p, h_l, w_l, 2]` pixel grids, one per level.
    pub levels: Vec<Tensor<f64>>,
    /// Box each frame's grid was built from (sets the jitter scale).
    pub boxes: Vec<BoundingBox>,
    pub present: Vec<bool>,
}

impl SegmentGrids {
    pub fn new(boxes: &[BoundingBox], present: &[bool], shapes: &[(usize, usize)]) -> Result<Self, ChookError> {
        let levels = shapes.iter().map(|&(h, w)| build_segment_grid(boxes, h, w)).collect::<Result<_, _>>()?;
        Ok(Self { levels, boxes: boxes.to_vec(), present: present.to_vec() })
    }

    fn frames(&self) -> usize {
        self.boxes.len()
    }

    fn copy_frame(&mut self, dst: usize, src: usize) {
        for l in &mut self.levels {
            let n = l.len() / self.boxes.len();
            let d = l.data_mut();
            d.copy_within(src * n..(src + 1) * n, dst * n);
        }
        self.boxes[dst] = self.boxes[src];
    }
}

/// Apply frame drop, per-point jitter and suffix recombination in that
/// order. Drops and swaps are decided once per segment and shared by all
/// levels; jitter is drawn independently per point and level. Frame 0 is
/// never dropped or swapped.
pub fn augment_grids(batch: &mut [SegmentGrids], config: &AugmentConfig, seed: u64) {
    if !config.enabled {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for seg in batch.iter_mut() {
        let p = seg.frames();
        if config.drop_prob > 0.0 && p > 1 {
            let kept: Vec<bool> = (0..p).map(|k| k == 0 || !rng.random_bool(config.drop_prob)).collect();
            for k in 1..p {
                if !kept[k] {
                    let src = (0..k).rev().find(|&j| kept[j]).unwrap();
                    let next = (k + 1..p).find(|&j| kept[j]);
                    let src = match next {
                        Some(n) if n - k < k - src => n,
                        _ => src,
                    };
                    seg.copy_frame(k, src);
                    seg.present[k] = false;
                }
            }
        }
        if config.noise_sigma > 0.0 {
            for l in &mut seg.levels {
                let per_frame = l.len() / p;
                for (k, frame) in l.data_mut().chunks_mut(per_frame).enumerate() {
                    let (sx, sy) = (config.noise_sigma * seg.boxes[k].w, config.noise_sigma * seg.boxes[k].h);
                    for pt in frame.chunks_mut(2) {
                        let nx: f64 = StandardNormal.sample(&mut rng);
                        let ny: f64 = StandardNormal.sample(&mut rng);
                        pt[0] += sx * nx;
                        pt[1] += sy * ny;
                    }
                }
            }
        }
    }
    if config.swap_prob > 0.0 && batch.len() > 1 {
        for i in 0..batch.len() {
            if !rng.random_bool(config.swap_prob) {
                continue;
            }
            let mut j = rng.random_range(0..batch.len() - 1);
            if j >= i {
                j += 1;
            }
            let p = batch[i].frames().min(batch[j].frames());
            if p < 2 {
                continue;
            }
            let start = rng.random_range(1..p);
            let (a, b) = if i < j {
                let (lo, hi) = batch.split_at_mut(j);
                (&mut lo[i], &mut hi[0])
            } else {
                let (lo, hi) = batch.split_at_mut(i);
                (&mut hi[0], &mut lo[j])
            };
            for (la, lb) in a.levels.iter_mut().zip(b.levels.iter_mut()) {
                let n = la.len() / a.boxes.len();
                la.data_mut()[start * n..p * n].swap_with_slice(&mut lb.data_mut()[start * n..p * n]);
            }
            a.boxes[start..p].swap_with_slice(&mut b.boxes[start..p]);
            a.present[start..p].swap_with_slice(&mut b.present[start..p]);
        }
    }
}

/// `x_n = 2(x + 0.5)/W - 1`, `y_n = 2(y + 0.5)/H - 1`, clamped to [-1, 1].
/// `grid` is `[..., 2]` in input-image pixels; `image_size` is `(H, W)`.
pub fn normalize_grid<'t, T: Float>(grid: Var<'t, T>, image_size: (usize, usize)) -> Var<'t, T> {
    let tape = grid.tape();
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let scale = tape.constant(Tensor::from_f64(&[2], &[2.0 / w, 2.0 / h]));
    let shift = tape.constant(Tensor::from_f64(&[2], &[1.0 / w - 1.0, 1.0 / h - 1.0]));
    grid.mul_bias(scale).add_bias(shift).clamp(-1.0, 1.0)
}

/// Plain-value version of [`normalize_grid`] for a single point.
pub fn normalize_point(x: f64, y: f64, image_size: (usize, usize)) -> (f64, f64) {
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    ((2.0 * (x + 0.5) / w - 1.0).clamp(-1.0, 1.0), (2.0 * (y + 0.5) / h - 1.0).clamp(-1.0, 1.0))
}

struct Corner {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// Coordinate was clamped to the border on this axis.
    cx: bool,
    cy: bool,
}

fn corner(x: f64, y: f64, h: usize, w: usize) -> Corner {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = (xc.floor() as usize).min(w - 1);
    let y0 = (yc.floor() as usize).min(h - 1);
    Corner {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        fx: xc - x0 as f64,
        fy: yc - y0 as f64,
        cx: x != xc,
        cy: y != yc,
    }
}

/// Bilinear lookup of `map [p, H, W, C]` at `coords [p, K, 2]` given in the
/// map's own pixel units, with border replication. Output `[p, K, C]`.
/// Differentiable in both the map and the coordinates.
pub fn sample_points<'t, T: Float>(map: Var<'t, T>, coords: Var<'t, T>) -> Var<'t, T> {
    let mv = map.value();
    let cv = coords.value();
    let ms = mv.shape().to_vec();
    let (p, h, w, c) = (ms[0], ms[1], ms[2], ms[3]);
    assert_eq!(cv.shape()[0], p, "sample_points frame count");
    assert_eq!(cv.shape()[2], 2);
    let k = cv.shape()[1];
    let mut out = vec![T::zero(); p * k * c];
    const CHUNK: usize = 64;
    par::for_each_chunk_mut(&mut out, CHUNK * c, |ci, chunk| {
        for (j, o) in chunk.chunks_mut(c).enumerate() {
            let idx = ci * CHUNK + j;
            let f = idx / k;
            let pt = &cv.data()[idx * 2..idx * 2 + 2];
            let q = corner(pt[0].as_f64(), pt[1].as_f64(), h, w);
            let base = f * h * w;
            let at = |y: usize, x: usize| &mv.data()[(base + y * w + x) * c..(base + y * w + x + 1) * c];
            let (fx, fy) = (T::of(q.fx), T::of(q.fy));
            let (gx, gy) = (T::one() - fx, T::one() - fy);
            let (v00, v01, v10, v11) = (at(q.y0, q.x0), at(q.y0, q.x1), at(q.y1, q.x0), at(q.y1, q.x1));
            for ch in 0..c {
                o[ch] = gy * (gx * v00[ch] + fx * v01[ch]) + fy * (gx * v10[ch] + fx * v11[ch]);
            }
        }
    });
    let value = Tensor::new(&[p, k, c], out);
    map.tape().op(&[map, coords], value, move |g, needs| {
        let gmap = needs[0].then(|| {
            let mut gm = vec![T::zero(); p * h * w * c];
            par::for_each_chunk_mut(&mut gm, h * w * c, |f, gframe| {
                for i in 0..k {
                    let idx = f * k + i;
                    let pt = &cv.data()[idx * 2..idx * 2 + 2];
                    let q = corner(pt[0].as_f64(), pt[1].as_f64(), h, w);
                    let (fx, fy) = (T::of(q.fx), T::of(q.fy));
                    let (gx, gy) = (T::one() - fx, T::one() - fy);
                    let gi = &g.data()[idx * c..(idx + 1) * c];
                    for (y, x, wgt) in [(q.y0, q.x0, gy * gx), (q.y0, q.x1, gy * fx), (q.y1, q.x0, fy * gx), (q.y1, q.x1, fy * fx)] {
                        let dst = &mut gframe[(y * w + x) * c..(y * w + x + 1) * c];
                        for ch in 0..c {
                            dst[ch] += wgt * gi[ch];
                        }
                    }
                }
            });
            Tensor::new(&[p, h, w, c], gm)
        });
        let gcoords = needs[1].then(|| {
            let mut gc = vec![T::zero(); p * k * 2];
            par::for_each_chunk_mut(&mut gc, 2 * CHUNK, |ci, chunk| {
                for (j, o) in chunk.chunks_mut(2).enumerate() {
                    let idx = ci * CHUNK + j;
                    let f = idx / k;
                    let pt = &cv.data()[idx * 2..idx * 2 + 2];
                    let q = corner(pt[0].as_f64(), pt[1].as_f64(), h, w);
                    let base = f * h * w;
                    let at = |y: usize, x: usize| &mv.data()[(base + y * w + x) * c..(base + y * w + x + 1) * c];
                    let (fx, fy) = (T::of(q.fx), T::of(q.fy));
                    let (gx, gy) = (T::one() - fx, T::one() - fy);
                    let (v00, v01, v10, v11) = (at(q.y0, q.x0), at(q.y0, q.x1), at(q.y1, q.x0), at(q.y1, q.x1));
                    let gi = &g.data()[idx * c..(idx + 1) * c];
                    let (mut dx, mut dy) = (T::zero(), T::zero());
                    for ch in 0..c {
                        dx += gi[ch] * (gy * (v01[ch] - v00[ch]) + fy * (v11[ch] - v10[ch]));
                        dy += gi[ch] * (gx * (v10[ch] - v00[ch]) + fx * (v11[ch] - v01[ch]));
                    }
                    o[0] = if q.cx { T::zero() } else { dx };
                    o[1] = if q.cy { T::zero() } else { dy };
                }
            });
            Tensor::new(&[p, k, 2], gc)
        });
        vec![gmap, gcoords]
    })
}

/// Map normalised coordinates `[..., 2]` to pixel units of an `h x w` map.
pub fn to_level_pixels<'t, T: Float>(norm: Var<'t, T>, h: usize, w: usize) -> Var<'t, T> {
    let tape = norm.tape();
    let scale = tape.constant(Tensor::from_f64(&[2], &[w as f64 / 2.0, h as f64 / 2.0]));
    let shift = tape.constant(Tensor::from_f64(&[2], &[(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0]));
    norm.mul_bias(scale).add_bias(shift)
}

/// Bilinear sampling of `level [p, H, W, C]` at a normalised grid
/// `[p, h, w, 2]`, giving `[p, h, w, C]`.
pub fn bilinear_sample<'t, T: Float>(level: Var<'t, T>, grid: Var<'t, T>) -> Var<'t, T> {
    let ls = level.shape();
    let gs = grid.shape();
    let (p, h, w) = (gs[0], gs[1], gs[2]);
    let px = to_level_pixels(grid, ls[1], ls[2]).reshape(&[p, h * w, 2]);
    sample_points(level, px).reshape(&[p, h, w, ls[3]])
}

/// Sample `level [p, H, W, C]` at reference points `[U, M, 2]` (normalised,
/// shared by all frames), giving `[p, U, M, C]`.
pub fn sample_references<'t, T: Float>(level: Var<'t, T>, refs: Var<'t, T>) -> Var<'t, T> {
    let ls = level.shape();
    let rs = refs.shape();
    let (p, u, m) = (ls[0], rs[0], rs[1]);
    let px = to_level_pixels(refs, ls[1], ls[2]).reshape(&[1, u * m, 2]).expand_leading(p).reshape(&[p, u * m, 2]);
    sample_points(level, px).reshape(&[p, u, m, ls[3]])
}

/// Decodes `M` image-global reference points per expression from its
/// linguistic features.
#[derive(Clone, Debug)]
pub struct ReferenceDecoder {
    queries: ParamId,
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: Mlp,
    ln2: LayerNorm,
    residual: Mlp,
    pub out: Linear,
    points: usize,
}

impl ReferenceDecoder {
    pub fn new(pb: &mut ParamBuilder, points: usize, channels: usize, heads: usize) -> Self {
        pb.scope("hook", |pb| Self {
            queries: pb.uniform("queries", &[points, channels], 1.0),
            attn: MultiHeadAttention::new(pb, "attn", channels, heads),
            ln1: LayerNorm::new(pb, "ln1", channels),
            ffn: Mlp::new(pb, "ffn", (channels, 2 * channels, channels)),
            ln2: LayerNorm::new(pb, "ln2", channels),
            residual: Mlp::new(pb, "residual", (channels, channels, channels)),
            out: Linear::new(pb, "out", channels, 2, true),
            points,
        })
    }

    /// Reference points `[U, M, 2]` in (-1, 1), one set per expression. The
    /// temporal axis is a pure repeat and is added by the consumer.
    pub fn decode<'t, T: Float>(&self, tape: &'t Tape<T>, text: &LinguisticFeatures<'t, T>) -> Var<'t, T> {
        let u = text.values.shape()[0];
        let q = tape.param(self.queries).expand_leading(u);
        let a = self.attn.forward(tape, q, text.values, Some(&text.pad));
        let x = self.ln1.forward(tape, q.add(a));
        let x = self.ln2.forward(tape, x.add(self.ffn.forward(tape, x)));
        let x = x.add(self.residual.forward(tape, x));
        let s = self.out.forward(tape, x).sigmoid();
        debug_assert_eq!(s.shape(), vec![u, self.points, 2]);
        s.scale(2.0).add_scalar(-1.0)
    }
}

/// Reference points with the temporal repeat made explicit, `[p, U, M, 2]`.
pub fn repeat_in_time<'t, T: Float>(refs: Var<'t, T>, p: usize) -> Var<'t, T> {
    refs.expand_leading(p)
}
