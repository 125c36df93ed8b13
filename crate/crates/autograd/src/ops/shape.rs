use crate::float::Float;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Split `shape` around `axis` into (outer, axis, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Materialize a permutation of `x`'s axes.
pub(crate) fn permute_tensor<T: Float>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    assert_eq!(axes.len(), shape.len(), "permute axes {axes:?} for {shape:?}");
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    if nd == 0 || n == 0 {
        return Tensor::new(&out_shape, x.data().to_vec());
    }
    // Innermost output axis handled as a strided run.
    let last = nd - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    let mut idx = vec![0usize; nd];
    let data = x.data();
    let rows = n / run;
    for _ in 0..rows {
        let base: usize = idx[..last]
            .iter()
            .zip(&src_strides[..last])
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..run {
            out.push(data[base + j * run_stride]);
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

fn inverse_perm(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<'t, T: Float> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = (*x).clone().reshaped(shape);
        self.tape
            .op(&[self], y, move |g, _| vec![Some(g.clone().reshaped(&old))])
    }

    pub fn permute(self, axes: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let y = permute_tensor(&x, axes);
        let inv = inverse_perm(axes);
        self.tape
            .op(&[self], y, move |g, _| vec![Some(permute_tensor(g, &inv))])
    }

    /// Swap the last two axes.
    pub fn transpose_last(self) -> Var<'t, T> {
        let nd = self.value().ndim();
        assert!(nd >= 2);
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let (outer, size, inner) = split_axis(x.shape(), axis);
        assert!(start + len <= size, "narrow {start}+{len} > {size}");
        let mut out_shape = x.shape().to_vec();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let in_shape = x.shape().to_vec();
        self.tape.op(&[self], Tensor::new(&out_shape, out), move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            for o in 0..outer {
                let base = o * size * inner + start * inner;
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                gx.data_mut()[base..base + len * inner].copy_from_slice(src);
            }
            vec![Some(gx)]
        })
    }

    /// Gather rows along axis 0. Indices may repeat.
    pub fn index_select(self, idx: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let rows = x.shape()[0];
        let inner = x.len() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            assert!(i < rows, "index {i} out of range {rows}");
            out.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[0] = idx.len();
        let in_shape = x.shape().to_vec();
        let idx = idx.to_vec();
        self.tape.op(&[self], Tensor::new(&out_shape, out), move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            for (k, &i) in idx.iter().enumerate() {
                let src = &g.data()[k * inner..(k + 1) * inner];
                for (d, &s) in gx.data_mut()[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Broadcast to a new leading axis of size `n`.
    pub fn expand_leading(self, n: usize) -> Var<'t, T> {
        let x = self.value();
        let mut out = Vec::with_capacity(n * x.len());
        for _ in 0..n {
            out.extend_from_slice(x.data());
        }
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(x.shape());
        let in_shape = x.shape().to_vec();
        let m = x.len();
        self.tape.op(&[self], Tensor::new(&out_shape, out), move |g, _| {
            let mut gx = vec![T::zero(); m];
            for chunk in g.data().chunks(m) {
                for (a, &b) in gx.iter_mut().zip(chunk) {
                    *a += b;
                }
            }
            vec![Some(Tensor::new(&in_shape, gx))]
        })
    }
}

/// Concatenate along `axis`. All other dimensions must agree.
pub fn concat<'t, T: Float>(vars: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
    assert!(!vars.is_empty(), "concat of nothing");
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let first = values[0].shape().to_vec();
    let sizes: Vec<usize> = values
        .iter()
        .map(|v| {
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat dim {d} mismatch: {s:?} vs {first:?}");
            }
            s[axis]
        })
        .collect();
    let (outer, _, inner) = split_axis(&first, axis);
    let total: usize = sizes.iter().sum();
    let mut out_shape = first.clone();
    out_shape[axis] = total;
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &s) in values.iter().zip(&sizes) {
            out.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
        }
    }
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    vars[0]
        .tape
        .op(vars, Tensor::new(&out_shape, out), move |g, needs| {
            let mut grads: Vec<Vec<T>> = sizes
                .iter()
                .map(|&s| Vec::with_capacity(outer * s * inner))
                .collect();
            let gd = g.data();
            let mut pos = 0;
            for _ in 0..outer {
                for (gv, &s) in grads.iter_mut().zip(&sizes) {
                    gv.extend_from_slice(&gd[pos..pos + s * inner]);
                    pos += s * inner;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .zip(needs)
                .map(|((gv, s), &need)| need.then(|| Tensor::new(s, gv)))
                .collect()
        })
}
