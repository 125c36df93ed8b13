//! Parameterised building blocks shared by the encoders and decoders.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParamStore`] and are
//! read through whichever [`Tape`] runs the forward pass, so the same layer
//! serves `f32` training and `f64` gradient checks.

use std::sync::Arc;

use autograd::{Float, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Registers freshly initialised parameters under a name prefix.
pub struct ParamBuilder<'s> {
    pub store: &'s mut ParamStore<f32>,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'s> ParamBuilder<'s> {
    pub fn new(store: &'s mut ParamStore<f32>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: String::new() }
    }

    /// Run `f` with `name.` appended to the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound) as f32);
        self.store.add(format!("{}{name}", self.prefix), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> ParamId {
        self.store.add(format!("{}{name}", self.prefix), Tensor::full(shape, value))
    }
}

/// `y = x W + b` over the trailing dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        pb.scope(name, |pb| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = pb.uniform("w", &[fan_in, fan_out], bound);
            let b = bias.then(|| pb.constant("b", &[fan_out], 0.0));
            Self { w, b }
        })
    }

    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(tape.param(self.w), self.b.map(|b| tape.param(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        pb.scope(name, |pb| Self { gain: pb.constant("gain", &[dim], 1.0), bias: pb.constant("bias", &[dim], 0.0) })
    }

    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Var<'t, T> {
        x.layer_norm(tape.param(self.gain), tape.param(self.bias), 1e-5)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, dims: (usize, usize, usize)) -> Self {
        pb.scope(name, |pb| Self {
            fc1: Linear::new(pb, "fc1", dims.0, dims.1, true),
            fc2: Linear::new(pb, "fc2", dims.1, dims.2, true),
        })
    }

    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Var<'t, T> {
        self.fc2.forward(tape, self.fc1.forward(tape, x).gelu())
    }
}

/// Dense multi-head attention over batched sequences.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "{dim} channels do not split into {heads} heads");
        pb.scope(name, |pb| Self {
            q: Linear::new(pb, "q", dim, dim, true),
            k: Linear::new(pb, "k", dim, dim, true),
            v: Linear::new(pb, "v", dim, dim, true),
            o: Linear::new(pb, "o", dim, dim, true),
            heads,
        })
    }

    fn split_heads<'t, T: Float>(&self, x: Var<'t, T>, b: usize, n: usize, c: usize) -> Var<'t, T> {
        let h = self.heads;
        x.reshape(&[b, n, h, c / h]).permute(&[0, 2, 1, 3]).reshape(&[b * h, n, c / h])
    }

    /// `queries [B,Lq,C]` attend to `memory [B,Lk,C]`; `key_pad[b*Lk + k]`
    /// blocks key `k` of batch element `b`. Rows with no open key output zero.
    pub fn forward<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        queries: Var<'t, T>,
        memory: Var<'t, T>,
        key_pad: Option<&[bool]>,
    ) -> Var<'t, T> {
        let qs = queries.shape();
        let ks = memory.shape();
        let (b, lq, c) = (qs[0], qs[1], qs[2]);
        let lk = ks[1];
        let h = self.heads;
        let q = self.split_heads(self.q.forward(tape, queries), b, lq, c);
        let k = self.split_heads(self.k.forward(tape, memory), b, lk, c);
        let v = self.split_heads(self.v.forward(tape, memory), b, lk, c);
        let scores = q.bmm(k, true).scale(1.0 / ((c / h) as f64).sqrt());
        let mask = key_pad.map(|pad| {
            assert_eq!(pad.len(), b * lk);
            let mut m = Vec::with_capacity(b * h * lq * lk);
            for bi in 0..b {
                let row: Vec<bool> = pad[bi * lk..(bi + 1) * lk].iter().map(|&p| !p).collect();
                for _ in 0..h * lq {
                    m.extend_from_slice(&row);
                }
            }
            Arc::new(m)
        });
        let attn = scores.softmax_last(mask);
        let out = attn.bmm(v, false).reshape(&[b, h, lq, c / h]).permute(&[0, 2, 1, 3]).reshape(&[b, lq, c]);
        self.o.forward(tape, out)
    }
}

/// Convolution weights `[k,k,cin,cout]` with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(pb: &mut ParamBuilder, name: &str, k: usize, cin: usize, cout: usize, stride: usize, bias: bool) -> Self {
        pb.scope(name, |pb| {
            let bound = (6.0 / (k * k * cin) as f64).sqrt();
            let w = pb.uniform("w", &[k, k, cin, cout], bound);
            let b = bias.then(|| pb.constant("b", &[cout], 0.0));
            Self { w, b, stride, pad: k / 2 }
        })
    }

    pub fn forward<'t, T: Float>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(tape.param(self.w), self.b.map(|b| tape.param(b)), self.stride, self.pad)
    }
}
