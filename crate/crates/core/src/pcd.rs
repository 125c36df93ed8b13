//! Pairwise correspondence decoding.
//!
//! Each of the `N` query slots attends over one key sequence laid out as
//! `[trajectory (hw) | reference (N*M) | linguistic (N*L)]`. Slot `i` sees
//! every trajectory key but only its own reference and non-pad linguistic
//! keys. The attention kernel visits a row's open keys in layout order and
//! never touches closed ones, so a slot's output is a function of its own
//! inputs alone, bit for bit.

use std::sync::Arc;

use autograd::{par, Float, Tape, Tensor, Var};

use crate::layers::{LayerNorm, Linear, Mlp, ParamBuilder};

/// Boolean `[N, hw + N*M + N*L]` attention mask.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub slots: usize,
    pub hw: usize,
    pub refs: usize,
    pub tokens: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn key_len(&self) -> usize {
        self.hw + self.slots * (self.refs + self.tokens)
    }

    pub fn row(&self, i: usize) -> &[bool] {
        let k = self.key_len();
        &self.allowed[i * k..(i + 1) * k]
    }

    /// Open key positions of row `i`, ascending.
    pub fn open_keys(&self, i: usize) -> Vec<usize> {
        self.row(i).iter().enumerate().filter(|(_, &a)| a).map(|(j, _)| j).collect()
    }
}

/// Mask for `slots` pairs with `refs` reference keys and `tokens` linguistic
/// keys each; `pad[i*tokens + l]` closes token `l` of slot `i`.
pub fn build_mask(hw: usize, slots: usize, refs: usize, tokens: usize, pad: &[bool]) -> AttentionMask {
    assert_eq!(pad.len(), slots * tokens, "pad mask must be [N, L]");
    let k = hw + slots * (refs + tokens);
    let mut allowed = vec![false; slots * k];
    for i in 0..slots {
        let row = &mut allowed[i * k..(i + 1) * k];
        row[..hw].fill(true);
        row[hw + i * refs..hw + (i + 1) * refs].fill(true);
        let ling = hw + slots * refs + i * tokens;
        for l in 0..tokens {
            row[ling + l] = !pad[i * tokens + l];
        }
    }
    AttentionMask { slots, hw, refs, tokens, allowed }
}

/// Multi-head attention of projected queries `[N, C]` over projected keys
/// and values `[K, C]` restricted to each row's open keys. Rows with no
/// open key output zero.
pub fn masked_attention<'t, T: Float>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    mask: &AttentionMask,
    heads: usize,
) -> Var<'t, T> {
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    let (n, c) = (qv.shape()[0], qv.shape()[1]);
    assert_eq!(n, mask.slots, "query rows vs mask rows");
    assert_eq!(kv.shape()[0], mask.key_len(), "key length vs mask");
    assert_eq!(vv.shape(), kv.shape());
    assert_eq!(c % heads, 0);
    let d = c / heads;
    let scale = T::of(1.0 / (d as f64).sqrt());
    let open: Arc<Vec<Vec<usize>>> = Arc::new((0..n).map(|i| mask.open_keys(i)).collect());

    // Per row: output [C] and attention weights [heads * open].
    let rows: Vec<(Vec<T>, Vec<T>)> = par::map_range(n, |i| {
        let keys = &open[i];
        let qi = &qv.data()[i * c..(i + 1) * c];
        let mut out = vec![T::zero(); c];
        let mut weights = vec![T::zero(); heads * keys.len()];
        for h in 0..heads {
            let qh = &qi[h * d..(h + 1) * d];
            let wh = &mut weights[h * keys.len()..(h + 1) * keys.len()];
            let mut max = T::neg_infinity();
            for (slot, &j) in wh.iter_mut().zip(keys) {
                let kj = &kv.data()[j * c + h * d..j * c + (h + 1) * d];
                let mut s = T::zero();
                for (a, b) in qh.iter().zip(kj) {
                    s += *a * *b;
                }
                *slot = s * scale;
                if *slot > max {
                    max = *slot;
                }
            }
            let mut z = T::zero();
            for w in wh.iter_mut() {
                *w = (*w - max).exp();
                z += *w;
            }
            for w in wh.iter_mut() {
                *w /= z;
            }
            let oh = &mut out[h * d..(h + 1) * d];
            for (&w, &j) in wh.iter().zip(keys) {
                let vj = &vv.data()[j * c + h * d..j * c + (h + 1) * d];
                for (o, &x) in oh.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
        (out, weights)
    });
    let mut data = Vec::with_capacity(n * c);
    let mut weights = Vec::with_capacity(n);
    for (o, w) in rows {
        data.extend_from_slice(&o);
        weights.push(w);
    }
    let key_len = kv.shape()[0];
    q.tape().op(&[q, k, v], Tensor::new(&[n, c], data), move |g, needs| {
        let mut gq = vec![T::zero(); n * c];
        let mut gk = vec![T::zero(); key_len * c];
        let mut gv = vec![T::zero(); key_len * c];
        for i in 0..n {
            let keys = &open[i];
            let gi = &g.data()[i * c..(i + 1) * c];
            let qi = &qv.data()[i * c..(i + 1) * c];
            for h in 0..heads {
                let wh = &weights[i][h * keys.len()..(h + 1) * keys.len()];
                let gh = &gi[h * d..(h + 1) * d];
                // dL/dw_j = g . v_j ; dL/ds_j = w_j (dL/dw_j - sum_k w_k dL/dw_k)
                let dw: Vec<T> = keys
                    .iter()
                    .map(|&j| {
                        let vj = &vv.data()[j * c + h * d..j * c + (h + 1) * d];
                        gh.iter().zip(vj).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
                    })
                    .collect();
                let dot = wh.iter().zip(&dw).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                for ((&w, &dwj), &j) in wh.iter().zip(&dw).zip(keys) {
                    let ds = w * (dwj - dot) * scale;
                    for t in 0..d {
                        gq[i * c + h * d + t] += ds * kv.data()[j * c + h * d + t];
                        gk[j * c + h * d + t] += ds * qi[h * d + t];
                        gv[j * c + h * d + t] += w * gh[t];
                    }
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new(&[n, c], gq)),
            needs[1].then(|| Tensor::new(&[key_len, c], gk)),
            needs[2].then(|| Tensor::new(&[key_len, c], gv)),
        ]
    })
}

/// Parameters of one decoder level.
#[derive(Clone, Debug)]
pub struct PcdLayer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: LayerNorm,
    pub ffn: Mlp,
    pub ln2: LayerNorm,
    pub head: Mlp,
    pub heads: usize,
}

impl PcdLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, heads: usize) -> Self {
        pb.scope(name, |pb| Self {
            q: Linear::new(pb, "q", channels, channels, true),
            k: Linear::new(pb, "k", channels, channels, true),
            v: Linear::new(pb, "v", channels, channels, true),
            o: Linear::new(pb, "o", channels, channels, true),
            ln1: LayerNorm::new(pb, "ln1", channels),
            ffn: Mlp::new(pb, "ffn", (channels, 2 * channels, channels)),
            ln2: LayerNorm::new(pb, "ln2", channels),
            head: Mlp::new(pb, "head", (channels, channels, 2)),
            heads,
        })
    }

    /// Projected keys and values of a block of feature rows `[R, C]`.
    pub fn project_kv<'t, T: Float>(&self, tape: &'t Tape<T>, rows: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        (self.k.forward(tape, rows), self.v.forward(tape, rows))
    }

    /// One decoding step. `keys`/`values` are already projected and laid out
    /// as the mask expects. Returns the refined queries and logits `[N, 2]`.
    pub fn step<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        queries: Var<'t, T>,
        keys: Var<'t, T>,
        values: Var<'t, T>,
        mask: &AttentionMask,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let q = self.q.forward(tape, queries);
        let a = masked_attention(q, keys, values, mask, self.heads);
        let x = self.ln1.forward(tape, queries.add(self.o.forward(tape, a)));
        let x = self.ln2.forward(tape, x.add(self.ffn.forward(tape, x)));
        let logits = self.head.forward(tape, x);
        (x, logits)
    }
}

/// Logits of every level and their mean.
pub struct MatchScores<'t, T: Float> {
    pub per_level: Vec<Var<'t, T>>,
    pub averaged: Var<'t, T>,
}

impl<'t, T: Float> MatchScores<'t, T> {
    pub fn from_levels(per_level: Vec<Var<'t, T>>) -> Self {
        let mut sum = per_level[0];
        for l in &per_level[1..] {
            sum = sum.add(*l);
        }
        let averaged = sum.scale(1.0 / per_level.len() as f64);
        Self { per_level, averaged }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_layout_example() {
        let m = build_mask(3, 2, 1, 2, &[false; 4]);
        assert_eq!(m.open_keys(0), vec![0, 1, 2, 3, 5, 6]);
        assert_eq!(m.open_keys(1), vec![0, 1, 2, 4, 7, 8]);
    }

    #[test]
    fn single_slot_opens_all_but_pads() {
        let m = build_mask(4, 1, 2, 3, &[false, true, false]);
        assert_eq!(m.open_keys(0), vec![0, 1, 2, 3, 4, 5, 6, 8]);
    }

    #[test]
    fn pad_closes_its_position() {
        let (hw, n, mm, l) = (3, 2, 1, 2);
        let m = build_mask(hw, n, mm, l, &[false, true, false, false]);
        assert!(!m.row(0)[hw + n * mm + 1]);
        assert!(m.row(1)[hw + n * mm + l + 1]);
    }

    #[test]
    fn attention_matches_dense_reference() {
        let (n, kl, c, heads) = (2, 3 + 2 + 2 * 2, 4, 2);
        let mask = build_mask(3, n, 1, 2, &[false, true, false, false]);
        let tape = Tape::<f64>::detached(false);
        let q = Tensor::from_fn(&[n, c], |i| (i as f64 * 0.37).sin());
        let k = Tensor::from_fn(&[kl, c], |i| (i as f64 * 0.11).cos());
        let v = Tensor::from_fn(&[kl, c], |i| i as f64 * 0.05 - 0.4);
        let out = masked_attention(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), &mask, heads).value();
        let d = c / heads;
        for i in 0..n {
            for h in 0..heads {
                let open = mask.open_keys(i);
                let s: Vec<f64> = open
                    .iter()
                    .map(|&j| (0..d).map(|t| q.data()[i * c + h * d + t] * k.data()[j * c + h * d + t]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for t in 0..d {
                    let want: f64 = open.iter().zip(&s).map(|(&j, &x)| x.exp() / z * v.data()[j * c + h * d + t]).sum();
                    assert!((out.data()[i * c + h * d + t] - want).abs() < 1e-12);
                }
            }
        }
    }
}
