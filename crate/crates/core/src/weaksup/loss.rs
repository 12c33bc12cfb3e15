//! Training losses: two-class cross entropy for region classification,
//! weighted binary cross entropy for localization, Dice + BCE for the ROI
//! decoder. Every function returns the loss together with the gradient with
//! respect to the pre-activation logits, which keeps saturated sigmoids
//! finite.

use ndarray::{Array1, Array3};

pub const PROB_CLAMP: f32 = 1e-7;

fn clamp_p(p: f32) -> f32 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Softmax cross entropy over two classes. Returns (loss, dL/dlogits).
pub fn loss_cls(logits: &Array1<f32>, label: usize) -> (f32, Array1<f32>) {
    debug_assert_eq!(logits.len(), 2);
    debug_assert!(label < 2);
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    let p = [e0 / z, e1 / z];
    let loss = -clamp_p(p[label]).ln();
    let mut grad = Array1::zeros(2);
    grad[0] = p[0] - if label == 0 { 1.0 } else { 0.0 };
    grad[1] = p[1] - if label == 1 { 1.0 } else { 0.0 };
    (loss, grad)
}

/// Weighted BCE over a probability map: positive voxels weigh `pos_weight`
/// times a negative voxel's error. Returns (loss, dL/dlogits).
pub fn loss_loc(
    probs: &Array3<f32>,
    target: &Array3<f32>,
    pos_weight: f32,
) -> (f32, Array3<f32>) {
    debug_assert_eq!(probs.dim(), target.dim());
    let n = probs.len() as f32;
    let mut loss = 0.0f64;
    let mut grad = Array3::zeros(probs.dim());
    for ((g, &p), &t) in grad.iter_mut().zip(probs.iter()).zip(target.iter()) {
        let w = if t >= 0.5 { pos_weight } else { 1.0 };
        let pc = clamp_p(p);
        loss += (w * -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())) as f64;
        *g = w * (p - t) / n;
    }
    ((loss / n as f64) as f32, grad)
}

/// Dice + BCE over an ROI. Returns (loss, dL/dlogits).
pub fn loss_seg(probs: &Array3<f32>, target: &Array3<f32>) -> (f32, Array3<f32>) {
    debug_assert_eq!(probs.dim(), target.dim());
    let n = probs.len() as f32;
    const SMOOTH: f64 = 1.0;
    let mut inter = 0.0f64;
    let mut psum = 0.0f64;
    let mut tsum = 0.0f64;
    let mut bce = 0.0f64;
    for (&p, &t) in probs.iter().zip(target.iter()) {
        let pc = clamp_p(p) as f64;
        let t = t as f64;
        inter += pc * t;
        psum += pc;
        tsum += t;
        bce += -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
    }
    bce /= n as f64;
    let denom = psum + tsum + SMOOTH;
    let dice = (2.0 * inter + SMOOTH) / denom;
    let loss = (1.0 - dice) + bce;

    let mut grad = Array3::zeros(probs.dim());
    for ((g, &p), &t) in grad.iter_mut().zip(probs.iter()).zip(target.iter()) {
        let pf = p as f64;
        let t = t as f64;
        // d(1 - dice)/dp, then through the sigmoid (dp/dz = p(1-p))
        let ddice_dp = (2.0 * t * denom - (2.0 * inter + SMOOTH)) / (denom * denom);
        let dz_dice = -ddice_dp * pf * (1.0 - pf);
        // BCE through the sigmoid collapses to (p - t)/n
        let dz_bce = (pf - t) / n as f64;
        *g = (dz_dice + dz_bce) as f32;
    }
    (loss as f32, grad)
}

/// Per-step loss record; the joint loss is the exact sum of the three
/// branch terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBundle {
    pub l_cls: f32,
    pub l_loc: f32,
    pub l_seg: f32,
}

impl LossBundle {
    pub fn l_joint(&self) -> f32 {
        self.l_cls + self.l_loc + self.l_seg
    }
    pub fn is_finite(&self) -> bool {
        self.l_cls.is_finite() && self.l_loc.is_finite() && self.l_seg.is_finite()
    }
}
