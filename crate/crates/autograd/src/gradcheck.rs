//! Central finite-difference helpers for checking analytic gradients.

use crate::tensor::Tensor;

/// Central difference of scalar `f` around `x`, one coordinate at a time.
pub fn numeric_grad(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, step: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *o = (plus - minus) / (2.0 * step);
    }
    Tensor::new(x.shape(), out)
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference norm when both
/// norms are below `floor`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}
