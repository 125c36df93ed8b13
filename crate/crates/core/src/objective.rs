//! Training objective: two-logit focal loss on averaged match scores plus a
//! softplus barrier keeping reference points away from the image border.

use autograd::{Float, Var};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Barrier weight.
    pub lambda: f64,
    /// Safe margin from the border in normalised units.
    pub delta: f64,
    /// Barrier sharpness.
    pub alpha_sharp: f64,
    pub gamma_focal: f64,
    pub alpha_focal: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self { lambda: 0.01, delta: 0.1, alpha_sharp: 30.0, gamma_focal: 2.0, alpha_focal: 0.25 }
    }
}

pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over rows of `-a_t (1 - p_t)^gamma ln p_t`, where `p_t` is the
/// softmax probability of the true class of `logits [N, 2]` and `a_t` is
/// `alpha` for positives and `1 - alpha` for negatives.
pub fn focal_loss<'t, T: Float>(logits: Var<'t, T>, labels: &[u8], cfg: &ObjectiveConfig) -> Var<'t, T> {
    let n = labels.len();
    assert_eq!(logits.shape(), vec![n, 2], "focal loss expects [N, 2] logits");
    let idx: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let pt = logits.softmax_last(None).gather_last(&idx).reshape(&[n, 1]);
    let alpha: Vec<T> = labels
        .iter()
        .map(|&l| T::of(if l == 1 { cfg.alpha_focal } else { 1.0 - cfg.alpha_focal }))
        .collect();
    let nll = pt.clamp(PROB_FLOOR, 1.0).ln().neg();
    let focal = if cfg.gamma_focal == 0.0 { nll } else { pt.neg().add_scalar(1.0).powf(cfg.gamma_focal).mul(nll) };
    focal.mul_rows(&alpha).mean_all()
}

/// Mean softplus barrier over reference points `[..., 2]` in [-1, 1]:
/// `softplus(alpha_sharp (delta - min(1-|u|, 1-|v|)))`.
pub fn boundary_penalty<'t, T: Float>(points: Var<'t, T>, cfg: &ObjectiveConfig) -> Var<'t, T> {
    let s = points.shape();
    let n: usize = s[..s.len() - 1].iter().product();
    let flat = points.reshape(&[n, 2]);
    let du = flat.narrow(1, 0, 1).abs().neg().add_scalar(1.0);
    let dv = flat.narrow(1, 1, 1).abs().neg().add_scalar(1.0);
    let d = du.minimum(dv);
    d.neg().add_scalar(cfg.delta).scale(cfg.alpha_sharp).softplus().mean_all()
}

/// Total loss and its components.
pub struct LossParts<'t, T: Float> {
    pub total: Var<'t, T>,
    pub focal: Var<'t, T>,
    pub barrier: Option<Var<'t, T>>,
}

/// `focal + lambda * barrier`; the barrier is absent without reference points.
pub fn total_loss<'t, T: Float>(
    logits: Var<'t, T>,
    labels: &[u8],
    points: Option<Var<'t, T>>,
    cfg: &ObjectiveConfig,
) -> LossParts<'t, T> {
    let focal = focal_loss(logits, labels, cfg);
    let barrier = points.map(|p| boundary_penalty(p, cfg));
    let total = match barrier {
        Some(b) if cfg.lambda != 0.0 => focal.add(b.scale(cfg.lambda)),
        _ => focal,
    };
    LossParts { total, focal, barrier }
}

/// Plain-value focal term for one pair, used by reports and tests.
pub fn focal_term(p_true: f64, positive: bool, cfg: &ObjectiveConfig) -> f64 {
    let a = if positive { cfg.alpha_focal } else { 1.0 - cfg.alpha_focal };
    -a * (1.0 - p_true).powf(cfg.gamma_focal) * p_true.max(PROB_FLOOR).ln()
}

/// Plain-value barrier for one point.
pub fn barrier_term(u: f64, v: f64, cfg: &ObjectiveConfig) -> f64 {
    let d = (1.0 - u.abs()).min(1.0 - v.abs());
    let x = cfg.alpha_sharp * (cfg.delta - d);
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
