use crate::float::Float;
use crate::ops::shape::split_axis;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Float> Var<'t, T> {
    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.op(&[self], Tensor::scalar(x.sum()), move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'t, T> {
        let x = self.value();
        let (outer, size, inner) = split_axis(x.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..size {
                let src = &x.data()[(o * size + a) * inner..(o * size + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = x.shape().to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let in_shape = x.shape().to_vec();
        self.tape.op(&[self], Tensor::new(&out_shape, out), move |g, _| {
            let mut gx = Vec::with_capacity(outer * size * inner);
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..size {
                    gx.extend_from_slice(src);
                }
            }
            vec![Some(Tensor::new(&in_shape, gx))]
        })
    }

    pub fn mean_axis(self, axis: usize) -> Var<'t, T> {
        let n = self.value().shape()[axis].max(1);
        self.sum_axis(axis).scale(1.0 / n as f64)
    }

    /// For `x: [rows, cols]`, pick `x[r, idx[r]]` → `[rows]`.
    pub fn gather_last(self, idx: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let cols = x.last_dim();
        let rows = x.len() / cols;
        assert_eq!(idx.len(), rows, "gather_last: {} indices for {rows} rows", idx.len());
        let out: Vec<T> = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| {
                assert!(c < cols);
                x.data()[r * cols + c]
            })
            .collect();
        let in_shape = x.shape().to_vec();
        let idx = idx.to_vec();
        self.tape.op(&[self], Tensor::new(&[rows], out), move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            for (r, &c) in idx.iter().enumerate() {
                gx.data_mut()[r * cols + c] = g.data()[r];
            }
            vec![Some(gx)]
        })
    }
}
