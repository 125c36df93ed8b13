use std::sync::Arc;

use crate::float::Float;
use crate::par;
use crate::tape::Var;
use crate::tensor::{gemm, Tensor};

/// Rows per parallel chunk for row-wise kernels.
const ROW_CHUNK: usize = 256;

fn softmax_rows<T: Float>(x: &[T], out: &mut [T], cols: usize, mask: Option<&[bool]>, row0: usize) {
    for (r, (xr, yr)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let allowed = |c: usize| match mask {
            Some(m) => m[((row0 + r) * cols + c) % m.len()],
            None => true,
        };
        let mut mx = T::neg_infinity();
        for (c, &v) in xr.iter().enumerate() {
            if allowed(c) && v > mx {
                mx = v;
            }
        }
        if mx == T::neg_infinity() {
            yr.iter_mut().for_each(|y| *y = T::zero());
            continue;
        }
        let mut sum = T::zero();
        for (c, (&v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
            *y = if allowed(c) { (v - mx).exp() } else { T::zero() };
            sum += *y;
        }
        let inv = T::one() / sum;
        yr.iter_mut().for_each(|y| *y *= inv);
    }
}

/// Conv geometry for NHWC input and `[kh,kw,cin,cout]` weights.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let rows = g.n * g.ho * g.wo;
    let mut cols = vec![T::zero(); rows * patch];
    // One output row (all wo columns of one image row) per chunk.
    par::for_each_chunk_mut(&mut cols, g.wo * patch, |chunk_idx, chunk| {
        let img = chunk_idx / g.ho;
        let oy = chunk_idx % g.ho;
        for ox in 0..g.wo {
            let dst = &mut chunk[ox * patch..(ox + 1) * patch];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = ((img * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                    let off = (ky * g.kw + kx) * g.cin;
                    dst[off..off + g.cin].copy_from_slice(&x[src..src + g.cin]);
                }
            }
        }
    });
    cols
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.cin];
    // Images are independent, so each one is accumulated by a single task.
    par::for_each_chunk_mut(&mut x, g.h * g.w * g.cin, |img, xi| {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = (img * g.ho + oy) * g.wo + ox;
                let src = &cols[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.w + ix as usize) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            xi[dst + c] += src[off + c];
                        }
                    }
                }
            }
        }
    });
    x
}

impl<'t, T: Float> Var<'t, T> {
    /// Softmax over the trailing dimension. `mask` (true = allowed) is
    /// indexed modulo its length, so a `[rows, cols]` mask broadcasts over
    /// leading batch axes. Fully masked rows produce zeros.
    pub fn softmax_last(self, mask: Option<Arc<Vec<bool>>>) -> Var<'t, T> {
        let x = self.value();
        let cols = x.last_dim();
        if let Some(m) = &mask {
            assert_eq!(x.len() % m.len(), 0, "mask length {} vs {:?}", m.len(), x.shape());
        }
        let mut y = vec![T::zero(); x.len()];
        par::for_each_chunk_mut(&mut y, ROW_CHUNK * cols, |ci, yc| {
            let row0 = ci * ROW_CHUNK;
            let xs = &x.data()[row0 * cols..row0 * cols + yc.len()];
            softmax_rows(xs, yc, cols, mask.as_deref().map(|v| v.as_slice()), row0);
        });
        let y = Arc::new(Tensor::new(x.shape(), y));
        let yk = y.clone();
        self.tape.op_arc(&[self], y, move |g, _| {
            let mut gx = g.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(cols).zip(yk.data().chunks(cols)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for (gv, &yv) in gr.iter_mut().zip(yr) {
                    *gv = yv * (*gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Numerically stable log-softmax over the trailing dimension.
    pub fn log_softmax_last(self) -> Var<'t, T> {
        let x = self.value();
        let cols = x.last_dim();
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(cols) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let y = Arc::new(y);
        let yk = y.clone();
        self.tape.op_arc(&[self], y, move |g, _| {
            let mut gx = g.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(cols).zip(yk.data().chunks(cols)) {
                let s: T = gr.iter().copied().sum();
                for (gv, &yv) in gr.iter_mut().zip(yr) {
                    *gv -= yv.exp() * s;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalization over the trailing dimension with affine gain/bias.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let n = x.last_dim();
        let rows = x.len() / n;
        let eps = T::of(eps);
        let nf = T::of(n as f64);
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, (xr, hr)) in x.data().chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
            let mean = xr.iter().copied().sum::<T>() / nf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = (v - mean) * is;
            }
        }
        let xhat = Tensor::new(x.shape(), xhat);
        let gv = gain.value();
        let bv = bias.value();
        let mut y = xhat.clone();
        for row in y.data_mut().chunks_mut(n) {
            for ((v, &gg), &bb) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *v = *v * gg + bb;
            }
        }
        let gshape = gv.shape().to_vec();
        self.tape.op(&[self, gain, bias], y, move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut out = vec![T::zero(); gd.len()];
                for r in 0..rows {
                    let gr = &gd[r * n..(r + 1) * n];
                    let hr = &xhat.data()[r * n..(r + 1) * n];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for i in 0..n {
                        let dh = gr[i] * gv.data()[i];
                        m1 += dh;
                        m2 += dh * hr[i];
                    }
                    m1 /= nf;
                    m2 /= nf;
                    for i in 0..n {
                        let dh = gr[i] * gv.data()[i];
                        out[r * n + i] = inv_std[r] * (dh - m1 - hr[i] * m2);
                    }
                }
                Tensor::new(xhat.shape(), out)
            });
            let ggain = needs[1].then(|| {
                let mut acc = vec![T::zero(); n];
                for (gr, hr) in gd.chunks(n).zip(xhat.data().chunks(n)) {
                    for ((a, &gg), &hh) in acc.iter_mut().zip(gr).zip(hr) {
                        *a += gg * hh;
                    }
                }
                Tensor::new(&gshape, acc)
            });
            let gbias = needs[2].then(|| {
                let mut acc = vec![T::zero(); n];
                for gr in gd.chunks(n) {
                    for (a, &gg) in acc.iter_mut().zip(gr) {
                        *a += gg;
                    }
                }
                Tensor::new(&gshape, acc)
            });
            vec![gx, ggain, gbias]
        })
    }

    /// 2-D convolution. Input `[N,H,W,Cin]`, weights `[kh,kw,Cin,Cout]`,
    /// symmetric zero padding. Output `[N,Ho,Wo,Cout]` with
    /// `Ho = (H + 2 pad - kh) / stride + 1`.
    pub fn conv2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.ndim(), 4, "conv2d input must be NHWC, got {:?}", x.shape());
        assert_eq!(w.ndim(), 4, "conv2d weight must be [kh,kw,cin,cout]");
        let (n, h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (kh, kw, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        assert_eq!(cin, wcin, "conv2d channel mismatch {cin} vs {wcin}");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than input");
        let geom = ConvGeom {
            n,
            h,
            w: wd,
            cin,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let rows = n * geom.ho * geom.wo;
        let patch = geom.patch();
        let cols = Arc::new(im2col(x.data(), &geom));
        let mut out = vec![T::zero(); rows * cout];
        gemm(&cols, w.data(), &mut out, rows, patch, cout, false, false, false);
        let y = Tensor::new(&[n, geom.ho, geom.wo, cout], out);
        let wshape = w.shape().to_vec();
        let conv = self.tape.op(&[self, weight], y, move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gcols = vec![T::zero(); rows * patch];
                gemm(g.data(), w.data(), &mut gcols, rows, cout, patch, false, true, false);
                Tensor::new(&[geom.n, geom.h, geom.w, geom.cin], col2im(&gcols, &geom))
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::zero(); patch * cout];
                gemm(&cols, g.data(), &mut gw, patch, rows, cout, true, false, false);
                Tensor::new(&wshape, gw)
            });
            vec![gx, gw]
        });
        match bias {
            Some(b) => conv.add_bias(b),
            None => conv,
        }
    }

    /// Nearest-neighbour resize of an NHWC map to `(h_out, w_out)`.
    pub fn upsample_nearest(self, h_out: usize, w_out: usize) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 4, "upsample expects NHWC");
        let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let src_y: Vec<usize> = (0..h_out).map(|i| (i * h / h_out).min(h - 1)).collect();
        let src_x: Vec<usize> = (0..w_out).map(|j| (j * w / w_out).min(w - 1)).collect();
        let mut out = Vec::with_capacity(n * h_out * w_out * c);
        for img in 0..n {
            for &sy in &src_y {
                for &sx in &src_x {
                    let base = ((img * h + sy) * w + sx) * c;
                    out.extend_from_slice(&x.data()[base..base + c]);
                }
            }
        }
        self.tape.op(
            &[self],
            Tensor::new(&[n, h_out, w_out, c], out),
            move |g, _| {
                let mut gx = vec![T::zero(); n * h * w * c];
                let gd = g.data();
                for img in 0..n {
                    for (oy, &sy) in src_y.iter().enumerate() {
                        for (ox, &sx) in src_x.iter().enumerate() {
                            let src = ((img * h_out + oy) * w_out + ox) * c;
                            let dst = ((img * h + sy) * w + sx) * c;
                            for k in 0..c {
                                gx[dst + k] += gd[src + k];
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, h, w, c], gx))]
            },
        )
    }
}
