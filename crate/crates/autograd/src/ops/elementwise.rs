use std::sync::Arc;

use crate::float::Float;
use crate::tape::Var;
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn gelu<T: Float>(x: T) -> T {
    let k = T::of(SQRT_2_OVER_PI);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let k = T::of(SQRT_2_OVER_PI);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

// `Var` methods take `self` by value and stay on the tape; operator traits
// would hide which tape a result is recorded on.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Float> Var<'t, T> {
    /// Pointwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y = Arc::new(x.map(f));
        let y_keep = y.clone();
        self.tape.op_arc(&[self], y, move |g, _| {
            let mut out = g.clone();
            for ((o, &xi), &yi) in out.data_mut().iter_mut().zip(x.data()).zip(y_keep.data()) {
                *o *= df(xi, yi);
            }
            vec![Some(out)]
        })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::of(s);
        self.unary(move |x| x + s, |_, _| T::one())
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| T::of(2.0) * x)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    /// `x^a`; the derivative is taken as 0 when `a == 0`.
    pub fn powf(self, a: f64) -> Var<'t, T> {
        let at = T::of(a);
        self.unary(
            move |x| if a == 0.0 { T::one() } else { x.powf(at) },
            move |x, _| {
                if a == 0.0 {
                    T::zero()
                } else {
                    at * x.powf(at - T::one())
                }
            },
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(
            move |x| x.max(l).min(h),
            move |x, _| if x >= l && x <= h { T::one() } else { T::zero() },
        )
    }

    fn binary(
        self,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let y = a.zip_map(&b, f);
        self.tape.op(&[self, other], y, move |g, needs| {
            let grad = |d: &dyn Fn(T, T) -> T| {
                let mut out = g.clone();
                for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *o *= d(x, y);
                }
                out
            };
            vec![
                needs[0].then(|| grad(&da)),
                needs[1].then(|| grad(&db)),
            ]
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let y = a.zip_map(&b, |x, y| x + y);
        self.tape
            .op(&[self, other], y, |g, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            })
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let y = a.zip_map(&b, |x, y| x - y);
        self.tape.op(&[self, other], y, |g, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.map(|v| -v)),
            ]
        })
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(other, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(
            other,
            |x, y| x / y,
            |_, y| T::one() / y,
            |x, y| -x / (y * y),
        )
    }

    /// Elementwise minimum; ties send the gradient to `self`.
    pub fn minimum(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary(
            other,
            |x, y| if x <= y { x } else { y },
            |x, y| if x <= y { T::one() } else { T::zero() },
            |x, y| if x <= y { T::zero() } else { T::one() },
        )
    }

    /// Add `b` (length = trailing dimension) to every row.
    pub fn add_bias(self, b: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let bv = b.value();
        let n = x.last_dim();
        assert_eq!(bv.len(), n, "bias length {} vs trailing dim {n}", bv.len());
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(bv.data()) {
                *v += bb;
            }
        }
        let bshape = bv.shape().to_vec();
        self.tape.op(&[self, b], y, move |g, needs| {
            let gb = needs[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for row in g.data().chunks(n) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                Tensor::new(&bshape, acc)
            });
            vec![needs[0].then(|| g.clone()), gb]
        })
    }

    /// Multiply every row by `s` (length = trailing dimension).
    pub fn mul_bias(self, s: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let sv = s.value();
        let n = x.last_dim();
        assert_eq!(sv.len(), n, "scale length {} vs trailing dim {n}", sv.len());
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(n) {
            for (v, &ss) in row.iter_mut().zip(sv.data()) {
                *v *= ss;
            }
        }
        let sshape = sv.shape().to_vec();
        self.tape.op(&[self, s], y, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut out = g.clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (v, &ss) in row.iter_mut().zip(sv.data()) {
                        *v *= ss;
                    }
                }
                out
            });
            let gs = needs[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for (grow, xrow) in g.data().chunks(n).zip(x.data().chunks(n)) {
                    for ((a, &gv), &xv) in acc.iter_mut().zip(grow).zip(xrow) {
                        *a += gv * xv;
                    }
                }
                Tensor::new(&sshape, acc)
            });
            vec![gx, gs]
        })
    }

    /// Multiply each leading row `[.., n]` by a per-row constant weight.
    pub fn mul_rows(self, w: &[T]) -> Var<'t, T> {
        let x = self.value();
        let n = x.last_dim();
        assert_eq!(w.len() * n, x.len(), "mul_rows: {} weights for {} rows", w.len(), x.len() / n);
        let w = w.to_vec();
        let mut y = (*x).clone();
        for (row, &wi) in y.data_mut().chunks_mut(n).zip(&w) {
            row.iter_mut().for_each(|v| *v *= wi);
        }
        self.tape.op(&[self], y, move |g, _| {
            let mut out = g.clone();
            for (row, &wi) in out.data_mut().chunks_mut(n).zip(&w) {
                row.iter_mut().for_each(|v| *v *= wi);
            }
            vec![Some(out)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
