use crate::float::Float;
use crate::tape::Var;
use crate::tensor::{gemm, Tensor};

impl<'t, T: Float> Var<'t, T> {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 2, "matmul lhs must be 2-D, got {:?}", a.shape());
        assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D, got {:?}", b.shape());
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut c = vec![T::zero(); m * n];
        gemm(a.data(), b.data(), &mut c, m, k, n, false, false, false);
        self.tape.op(&[self, rhs], Tensor::new(&[m, n], c), move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                gemm(g.data(), b.data(), &mut ga, m, n, k, false, true, false);
                Tensor::new(&[m, k], ga)
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); k * n];
                gemm(a.data(), g.data(), &mut gb, k, m, n, true, false, false);
                Tensor::new(&[k, n], gb)
            });
            vec![ga, gb]
        })
    }

    /// Batched product `[B,m,k] x [B,k,n]`, or `[B,m,k] x [B,n,k]^T` when
    /// `trans_rhs`.
    pub fn bmm(self, rhs: Var<'t, T>, trans_rhs: bool) -> Var<'t, T> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 3, "bmm lhs {:?}", a.shape());
        assert_eq!(b.ndim(), 3, "bmm rhs {:?}", b.shape());
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[0], bs, "bmm batch mismatch");
        let (kb, n) = if trans_rhs {
            (b.shape()[2], b.shape()[1])
        } else {
            (b.shape()[1], b.shape()[2])
        };
        assert_eq!(k, kb, "bmm inner dims {:?} x {:?}", a.shape(), b.shape());
        let mut c = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_rhs,
                false,
            );
        }
        let b_shape = b.shape().to_vec();
        self.tape.op(&[self, rhs], Tensor::new(&[bs, m, n], c), move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    // dA = dC * op(B)^T
                    gemm(
                        &gd[i * m * n..(i + 1) * m * n],
                        &b.data()[i * k * n..(i + 1) * k * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                        false,
                        !trans_rhs,
                        false,
                    );
                }
                Tensor::new(&[bs, m, k], ga)
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    let ai = &a.data()[i * m * k..(i + 1) * m * k];
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let out = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_rhs {
                        // B is [n,k]: dB = dC^T A
                        gemm(gi, ai, out, n, m, k, true, false, false);
                    } else {
                        // dB = A^T dC
                        gemm(ai, gi, out, k, m, n, true, false, false);
                    }
                }
                Tensor::new(&b_shape, gb)
            });
            vec![ga, gb]
        })
    }

    /// Affine map over the trailing dimension: `x[.., in] * w[in,out] (+ b[out])`.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Var<'t, T> {
        let shape = self.shape();
        let din = *shape.last().expect("linear on scalar");
        let wshape = w.shape();
        assert_eq!(wshape[0], din, "linear: input width {din} vs weight {wshape:?}");
        let rows = shape.iter().product::<usize>() / din.max(1);
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = wshape[1];
        let y = self.reshape(&[rows, din]).matmul(w);
        let y = match b {
            Some(b) => y.add_bias(b),
            None => y,
        };
        y.reshape(&out_shape)
    }
}
