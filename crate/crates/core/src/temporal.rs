//! Temporal integration: per-frame target features fused with grid
//! displacements into one trajectory feature map, and time pooling of
//! reference features.

use autograd::{concat, Float, Tape, Var};

use crate::layers::{Mlp, ParamBuilder};

/// Consecutive-frame differences of a pixel grid `[p, h, w, 2]`, stacked as
/// `[h, w, 2(p-1)]` with channels `2(k-1)..2k` holding `P[k] - P[k-1]`.
/// Returns `None` when `p == 1`.
pub fn grid_displacements<'t, T: Float>(grid: Var<'t, T>) -> Option<Var<'t, T>> {
    let s = grid.shape();
    let (p, h, w) = (s[0], s[1], s[2]);
    if p < 2 {
        return None;
    }
    let d = grid.narrow(0, 1, p - 1).sub(grid.narrow(0, 0, p - 1));
    Some(d.permute(&[1, 2, 0, 3]).reshape(&[h, w, 2 * (p - 1)]))
}

/// Width of the fused per-point feature before compression.
pub fn fused_channels(p: usize, c: usize) -> usize {
    p * c + 2 * (p - 1)
}

/// Channel concatenation of `p` frames plus scaled displacements, compressed
/// to `C` by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TemporalIntegration {
    mlp: Mlp,
    p: usize,
}

impl TemporalIntegration {
    pub fn new(pb: &mut ParamBuilder, name: &str, p: usize, channels: usize) -> Self {
        Self { mlp: Mlp::new(pb, name, (fused_channels(p, channels), 2 * channels, channels)), p }
    }

    /// `frames [p, h, w, C]`, `displacement [h, w, 2(p-1)]` (already scaled)
    /// to `[h, w, C]`.
    pub fn integrate<'t, T: Float>(
        &self,
        tape: &'t Tape<T>,
        frames: Var<'t, T>,
        displacement: Option<Var<'t, T>>,
    ) -> Var<'t, T> {
        let s = frames.shape();
        assert_eq!(s[0], self.p, "temporal integration expects {} frames", self.p);
        let (h, w, c) = (s[1], s[2], s[3]);
        let stacked = frames.permute(&[1, 2, 0, 3]).reshape(&[h, w, self.p * c]);
        let fused = match displacement {
            Some(d) => concat(&[stacked, d], 2),
            None => stacked,
        };
        self.mlp.forward(tape, fused)
    }
}

/// Arithmetic mean over the time axis, `[p, ...] -> [...]`.
pub fn pool_time<'t, T: Float>(x: Var<'t, T>) -> Var<'t, T> {
    x.mean_axis(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::Tensor;

    use crate::chook::build_segment_grid;
    use crate::domain::BoundingBox;

    fn grid(boxes: &[BoundingBox], h: usize, w: usize) -> Tensor<f64> {
        build_segment_grid(boxes, h, w).unwrap()
    }

    #[test]
    fn constant_velocity_and_static() {
        let boxes: Vec<BoundingBox> = (0..4).map(|k| BoundingBox { x0: 2.0 * k as f64, y0: 3.0, w: 8.0, h: 6.0 }).collect();
        let tape = Tape::<f64>::detached(false);
        let d = grid_displacements(tape.constant(grid(&boxes, 3, 4))).unwrap().value();
        assert_eq!(d.shape(), &[3, 4, 6]);
        for v in d.data().chunks(2) {
            assert!((v[0] - 2.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        }
        let still = vec![boxes[0]; 4];
        let z = grid_displacements(tape.constant(grid(&still, 3, 4))).unwrap().value();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(grid_displacements(tape.constant(grid(&still[..1], 3, 4))).is_none());
    }

    #[test]
    fn growing_box_is_antisymmetric_about_centre() {
        let small = BoundingBox { x0: 10.0, y0: 10.0, w: 8.0, h: 4.0 };
        let big = BoundingBox { x0: 8.0, y0: 9.0, w: 12.0, h: 6.0 };
        let (h, w) = (3, 5);
        let tape = Tape::<f64>::detached(false);
        let d = grid_displacements(tape.constant(grid(&[small, big], h, w))).unwrap().value();
        let at = |y: usize, x: usize| [d.data()[(y * w + x) * 2], d.data()[(y * w + x) * 2 + 1]];
        for y in 0..h {
            for x in 0..w {
                let a = at(y, x);
                let b = at(h - 1 - y, w - 1 - x);
                assert_eq!(a[0], -b[0]);
                assert_eq!(a[1], -b[1]);
            }
        }
    }

    #[test]
    fn reversal_negates_and_reverses_channels() {
        let boxes: Vec<BoundingBox> =
            (0..4).map(|k| BoundingBox { x0: 3.0 * k as f64 + (k * k) as f64, y0: 1.0 + k as f64, w: 5.0 + k as f64, h: 4.0 }).collect();
        let rev: Vec<BoundingBox> = boxes.iter().rev().copied().collect();
        let tape = Tape::<f64>::detached(false);
        let f = grid_displacements(tape.constant(grid(&boxes, 2, 3))).unwrap().value();
        let r = grid_displacements(tape.constant(grid(&rev, 2, 3))).unwrap().value();
        let p1 = 3;
        for (fp, rp) in f.data().chunks(2 * p1).zip(r.data().chunks(2 * p1)) {
            for k in 0..p1 {
                let j = p1 - 1 - k;
                assert_eq!(fp[2 * k], -rp[2 * j]);
                assert_eq!(fp[2 * k + 1], -rp[2 * j + 1]);
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let tape = Tape::<f64>::detached(false);
        let v = Tensor::from_fn(&[1, 3, 2, 4], |i| i as f64 - 7.0);
        let both = concat(&[tape.constant(v.clone()), tape.constant(v.map(|x| -x))], 0);
        assert!(pool_time(both).value().data().iter().all(|&x| x == 0.0));
        let same = concat(&[tape.constant(v.clone()), tape.constant(v.clone())], 0);
        assert_eq!(pool_time(same).value().data(), v.data());
    }

    #[test]
    fn fused_width() {
        assert_eq!(fused_channels(4, 64), 262);
        assert_eq!(fused_channels(1, 8), 8);
    }
}
