//! Visual backbone with top-down pyramid fusion, and the text encoder.
//!
//! Both are small stand-ins sized for CPU training. Downstream code depends
//! only on their output contracts: four NHWC levels of width `C` at strides
//! 4/8/16/32, and `[U, L, C]` token features with pad rows zeroed.

use autograd::{Float, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Expression;
use crate::layers::{Conv, LayerNorm, Mlp, MultiHeadAttention, ParamBuilder};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("frames have resolution {got:?}, expected {expected:?} with 3 channels")]
    Resolution { got: Vec<usize>, expected: (usize, usize) },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("expression {expr_id} has {got} tokens, expected {expected}")]
    TokenLength { expr_id: u32, got: usize, expected: usize },
}

/// Which encoder parameters to exclude from optimisation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeSelector {
    Visual,
    Text,
    Both,
    #[default]
    None,
}

impl std::str::FromStr for FreezeSelector {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "visual" => Ok(Self::Visual),
            "text" => Ok(Self::Text),
            "both" => Ok(Self::Both),
            "none" => Ok(Self::None),
            other => Err(format!("unknown freeze selector '{other}' (visual|text|both|none)")),
        }
    }
}

pub const VISUAL_PREFIX: &str = "visual.";
pub const TEXT_PREFIX: &str = "text.";

/// Mark the selected encoders frozen and everything else trainable.
/// Returns the number of frozen parameter tensors.
pub fn freeze<T: Float>(store: &mut ParamStore<T>, selector: FreezeSelector) -> usize {
    store.set_all_trainable(true);
    let mut n = 0;
    if matches!(selector, FreezeSelector::Visual | FreezeSelector::Both) {
        n += store.set_trainable_prefix(VISUAL_PREFIX, false);
    }
    if matches!(selector, FreezeSelector::Text | FreezeSelector::Both) {
        n += store.set_trainable_prefix(TEXT_PREFIX, false);
    }
    n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Internal width of each of the four stages.
    pub widths: [usize; 4],
    pub bias: bool,
    /// Append normalised x/y coordinate planes to the input.
    pub coord_channels: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { widths: [8, 16, 32, 64], bias: true, coord_channels: true }
    }
}

/// Four conv stages (first at stride 4, then stride 2), lateral 1x1
/// projections to `C`, and top-down nearest-upsample fusion.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    stages: Vec<[Conv; 2]>,
    laterals: Vec<Conv>,
    image_size: (usize, usize),
    coord_channels: bool,
}

impl VisualEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &BackboneConfig, channels: usize, image_size: (usize, usize)) -> Self {
        pb.scope("visual", |pb| {
            let mut cin = if cfg.coord_channels { 5 } else { 3 };
            let mut stages = Vec::new();
            let mut laterals = Vec::new();
            for (i, &w) in cfg.widths.iter().enumerate() {
                let stride = if i == 0 { 4 } else { 2 };
                stages.push(pb.scope(&format!("stage{i}"), |pb| {
                    [Conv::new(pb, "conv1", 3, cin, w, stride, cfg.bias), Conv::new(pb, "conv2", 3, w, w, 1, cfg.bias)]
                }));
                laterals.push(Conv::new(pb, &format!("lateral{i}"), 1, w, channels, 1, cfg.bias));
                cin = w;
            }
            Self { stages, laterals, image_size, coord_channels: cfg.coord_channels }
        })
    }

    /// Byte frames `[p, H, W, 3]` scaled to [0,1], plus coordinate planes when enabled.
    pub fn prepare_input<T: Float>(&self, frames: &[&[u8]]) -> Result<Tensor<T>, EncoderError> {
        let (h, w) = self.image_size;
        let cin = if self.coord_channels { 5 } else { 3 };
        let mut data = Vec::with_capacity(frames.len() * h * w * cin);
        for f in frames {
            if f.len() != h * w * 3 {
                return Err(EncoderError::Resolution { got: vec![f.len()], expected: self.image_size });
            }
            for y in 0..h {
                for x in 0..w {
                    let px = &f[(y * w + x) * 3..(y * w + x) * 3 + 3];
                    data.extend(px.iter().map(|&v| T::of(v as f64 / 255.0)));
                    if self.coord_channels {
                        data.push(T::of(2.0 * (x as f64 + 0.5) / w as f64 - 1.0));
                        data.push(T::of(2.0 * (y as f64 + 0.5) / h as f64 - 1.0));
                    }
                }
            }
        }
        Ok(Tensor::new(&[frames.len(), h, w, cin], data))
    }

    /// Encode `[p, H, W, 3]` frames in [0,1] into a 4-level pyramid.
    pub fn encode_frames<'t, T: Float>(&self, tape: &'t Tape<T>, frames: &Tensor<T>) -> Result<Vec<Var<'t, T>>, EncoderError> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != self.image_size.0 || s[2] != self.image_size.1 || s[3] != 3 {
            return Err(EncoderError::Resolution { got: s.to_vec(), expected: self.image_size });
        }
        let x = if self.coord_channels {
            let (p, h, w) = (s[0], s[1], s[2]);
            let mut data = Vec::with_capacity(p * h * w * 5);
            for (i, px) in frames.data().chunks(3).enumerate() {
                let (y, x) = ((i / w) % h, i % w);
                data.extend_from_slice(px);
                data.push(T::of(2.0 * (x as f64 + 0.5) / w as f64 - 1.0));
                data.push(T::of(2.0 * (y as f64 + 0.5) / h as f64 - 1.0));
            }
            tape.constant(Tensor::new(&[p, h, w, 5], data))
        } else {
            tape.constant(frames.clone())
        };
        Ok(self.encode_prepared(tape, x))
    }

    /// Encode an input already produced by [`Self::prepare_input`].
    pub fn encode_prepared<'t, T: Float>(&self, tape: &'t Tape<T>, mut x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let mut lateral = Vec::with_capacity(4);
        for (stage, lat) in self.stages.iter().zip(&self.laterals) {
            x = stage[0].forward(tape, x).gelu();
            x = stage[1].forward(tape, x).gelu();
            lateral.push(lat.forward(tape, x));
        }
        let mut out = vec![lateral[3]];
        for l in (0..3).rev() {
            let s = lateral[l].shape();
            let up = out.last().unwrap().upsample_nearest(s[1], s[2]);
            out.push(lateral[l].add(up));
        }
        out.reverse();
        out
    }
}

#[derive(Clone, Debug)]
struct TextBlock {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: Mlp,
    ln2: LayerNorm,
}

/// Token + position embeddings followed by pad-masked self-attention blocks.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    embed: autograd::ParamId,
    pos: autograd::ParamId,
    blocks: Vec<TextBlock>,
    vocab: usize,
    max_len: usize,
}

/// Encoded expressions `[U, L, C]` and their pad flags `[U*L]`.
pub struct LinguisticFeatures<'t, T: Float> {
    pub values: Var<'t, T>,
    pub pad: Vec<bool>,
}

impl TextEncoder {
    pub fn new(pb: &mut ParamBuilder, vocab: usize, max_len: usize, channels: usize, heads: usize, layers: usize) -> Self {
        pb.scope("text", |pb| {
            let embed = pb.uniform("embed", &[vocab, channels], 1.0);
            let pos = pb.uniform("pos", &[max_len, channels], 0.1);
            let blocks = (0..layers)
                .map(|i| {
                    pb.scope(&format!("block{i}"), |pb| TextBlock {
                        attn: MultiHeadAttention::new(pb, "attn", channels, heads),
                        ln1: LayerNorm::new(pb, "ln1", channels),
                        ffn: Mlp::new(pb, "ffn", (channels, 2 * channels, channels)),
                        ln2: LayerNorm::new(pb, "ln2", channels),
                    })
                })
                .collect();
            Self { embed, pos, blocks, vocab, max_len }
        })
    }

    pub fn encode_text<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        exprs: &[&Expression],
    ) -> Result<LinguisticFeatures<'t, T>, EncoderError> {
        let l = self.max_len;
        let mut ids = Vec::with_capacity(exprs.len() * l);
        let mut pad = Vec::with_capacity(exprs.len() * l);
        for e in exprs {
            if e.tokens.len() != l || e.pad.len() != l {
                return Err(EncoderError::TokenLength { expr_id: e.expr_id, got: e.tokens.len(), expected: l });
            }
            for &t in &e.tokens {
                if t as usize >= self.vocab {
                    return Err(EncoderError::TokenOutOfRange { id: t, vocab: self.vocab });
                }
                ids.push(t as usize);
            }
            pad.extend_from_slice(&e.pad);
        }
        let u = exprs.len();
        let c = tape.param(self.embed).shape()[1];
        let tok = tape.param(self.embed).index_select(&ids).reshape(&[u, l, c]);
        let mut x = tok.add(tape.param(self.pos).expand_leading(u));
        for b in &self.blocks {
            let a = b.attn.forward(tape, x, x, Some(&pad));
            x = b.ln1.forward(tape, x.add(a));
            let f = b.ffn.forward(tape, x);
            x = b.ln2.forward(tape, x.add(f));
        }
        let keep: Vec<T> = pad.iter().map(|&p| if p { T::zero() } else { T::one() }).collect();
        let values = x.reshape(&[u * l, c]).mul_rows(&keep).reshape(&[u, l, c]);
        Ok(LinguisticFeatures { values, pad })
    }
}

/// Mean over non-pad tokens, `[U, L, C] -> [U, C]`; all-pad rows give zero.
pub fn pool_tokens<'t, T: Float>(feats: &LinguisticFeatures<'t, T>) -> Var<'t, T> {
    let s = feats.values.shape();
    let (u, l) = (s[0], s[1]);
    let mut w = Vec::with_capacity(u * l);
    for row in feats.pad.chunks(l) {
        let n = row.iter().filter(|&&p| !p).count();
        w.extend(row.iter().map(|&p| if p || n == 0 { T::zero() } else { T::of(1.0 / n as f64) }));
    }
    feats.values.reshape(&[u * l, s[2]]).mul_rows(&w).reshape(&[u, l, s[2]]).sum_axis(1)
}
