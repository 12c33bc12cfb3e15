//! Binary dense-CRF mean-field inference over volumes.
//!
//! Pairwise potentials follow the usual two-kernel form: an appearance
//! (bilateral) kernel over position and intensity plus a smoothness kernel
//! over position only, with Potts compatibility and the unit penalty folded
//! into the kernel weights. Each kernel's message is normalized by that
//! kernel's weight sum at the receiving voxel, so `w_smooth`/`w_bilateral`
//! bound the pairwise energy directly and stay comparable to the unary
//! scale regardless of window size. Message passing is truncated to a cubic
//! window; with a window radius covering the whole volume the update is
//! exactly the all-pairs dense model, which is what the small-volume oracle
//! tests check.
//!
//! All message accumulation runs in f64; the published marginals are f32.

use crate::volume::MaskVolume;
use ndarray::{Array3, Zip};

#[derive(Debug, thiserror::Error)]
pub enum CrfError {
    #[error("shape mismatch: unary {unary:?} vs image {image:?}")]
    ShapeMismatch {
        unary: (usize, usize, usize),
        image: (usize, usize, usize),
    },
    #[error("invalid parameter: {0}")]
    BadParam(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CrfParams {
    pub w_smooth: f32,
    pub theta_gamma_vox: f32,
    pub w_bilateral: f32,
    pub theta_alpha_vox: f32,
    pub theta_beta_intensity: f32,
    pub iterations: u32,
    pub window_radius_vox: u32,
    /// Threshold on the probability map when building unaries.
    pub tau_u: f32,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            w_smooth: 3.0,
            theta_gamma_vox: 3.0,
            w_bilateral: 5.0,
            theta_alpha_vox: 5.0,
            theta_beta_intensity: 20.0,
            iterations: 10,
            window_radius_vox: 5,
            tau_u: 0.5,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<(), CrfError> {
        if self.w_smooth < 0.0 || self.w_bilateral < 0.0 {
            return Err(CrfError::BadParam("kernel weights must be >= 0".into()));
        }
        for (name, v) in [
            ("theta_gamma_vox", self.theta_gamma_vox),
            ("theta_alpha_vox", self.theta_alpha_vox),
            ("theta_beta_intensity", self.theta_beta_intensity),
        ] {
            if !(v > 0.0) {
                return Err(CrfError::BadParam(format!("{name} must be > 0")));
            }
        }
        if self.window_radius_vox < 1 {
            return Err(CrfError::BadParam("window radius must be >= 1".into()));
        }
        Ok(())
    }
}

/// Two-class negative-log unary potentials, (background, foreground).
#[derive(Debug, Clone)]
pub struct Unary {
    pub bg: Array3<f32>,
    pub fg: Array3<f32>,
}

/// Soft unary from a probability map: foreground probability 0.9 where
/// `u >= tau_u`, 0.1 elsewhere, then negative logs. The soft mix keeps
/// both energies finite.
pub fn unary_from_probability(u: &Array3<f32>, tau_u: f32) -> Unary {
    let mut bg = Array3::zeros(u.dim());
    let mut fg = Array3::zeros(u.dim());
    Zip::from(&mut bg).and(&mut fg).and(u).for_each(|b, f, &p| {
        let p_fg: f32 = if p >= tau_u { 0.9 } else { 0.1 };
        *b = -((1.0 - p_fg).ln());
        *f = -(p_fg.ln());
    });
    Unary { bg, fg }
}

/// Result of mean-field inference: the argmax mask and the foreground
/// marginal Q.
pub struct CrfResult {
    pub mask: MaskVolume,
    pub q_fg: Array3<f32>,
    pub iterations_run: u32,
}

struct Offset {
    d: [isize; 3],
    w_smooth: f64,
    w_bilateral_spatial: f64,
}

fn window_offsets(params: &CrfParams) -> Vec<Offset> {
    let r = params.window_radius_vox as isize;
    let tg2 = 2.0 * (params.theta_gamma_vox as f64).powi(2);
    let ta2 = 2.0 * (params.theta_alpha_vox as f64).powi(2);
    let mut out = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            for dk in -r..=r {
                if di == 0 && dj == 0 && dk == 0 {
                    continue;
                }
                let d2 = (di * di + dj * dj + dk * dk) as f64;
                let w_smooth = (-d2 / tg2).exp();
                let w_bilateral_spatial = (-d2 / ta2).exp();
                if w_smooth > 1e-12 || w_bilateral_spatial > 1e-12 {
                    out.push(Offset {
                        d: [di, dj, dk],
                        w_smooth,
                        w_bilateral_spatial,
                    });
                }
            }
        }
    }
    out
}

/// Synchronous mean-field iterations with truncated-window message passing.
/// Stops after `iterations` or once max |ΔQ| < 1e-5.
pub fn mean_field(
    unary: &Unary,
    image: &Array3<f32>,
    params: &CrfParams,
) -> Result<CrfResult, CrfError> {
    params.validate()?;
    if unary.bg.dim() != image.dim() || unary.fg.dim() != image.dim() {
        return Err(CrfError::ShapeMismatch {
            unary: unary.fg.dim(),
            image: image.dim(),
        });
    }
    let dims = image.dim();
    let shape = [dims.0 as isize, dims.1 as isize, dims.2 as isize];
    let offsets = window_offsets(params);
    let tb2 = 2.0 * (params.theta_beta_intensity as f64).powi(2);

    // Q init = softmax(-unary)
    let mut q = Array3::<f64>::zeros(dims);
    Zip::from(&mut q)
        .and(&unary.bg)
        .and(&unary.fg)
        .for_each(|q, &ub, &uf| {
            let eb = (-(ub as f64)).exp();
            let ef = (-(uf as f64)).exp();
            *q = ef / (ef + eb);
        });

    let mut iterations_run = 0;
    for _ in 0..params.iterations {
        let mut q_next = Array3::<f64>::zeros(dims);
        let q_ref = &q;
        Zip::indexed(&mut q_next).par_for_each(|(i, j, k), out| {
            let pos = [i as isize, j as isize, k as isize];
            let ii = image[(i, j, k)] as f64;
            // per-kernel accumulators: weighted neighbor marginal and the
            // normalizer (the kernel's weight sum at this voxel)
            let mut s_q = 0.0f64;
            let mut s_z = 0.0f64;
            let mut b_q = 0.0f64;
            let mut b_z = 0.0f64;
            for off in &offsets {
                let p = [pos[0] + off.d[0], pos[1] + off.d[1], pos[2] + off.d[2]];
                if p[0] < 0
                    || p[1] < 0
                    || p[2] < 0
                    || p[0] >= shape[0]
                    || p[1] >= shape[1]
                    || p[2] >= shape[2]
                {
                    continue;
                }
                let pj = (p[0] as usize, p[1] as usize, p[2] as usize);
                let di = ii - image[pj] as f64;
                let qj = q_ref[pj];
                s_q += off.w_smooth * qj;
                s_z += off.w_smooth;
                let bk = off.w_bilateral_spatial * (-di * di / tb2).exp();
                b_q += bk * qj;
                b_z += bk;
            }
            let w_s = params.w_smooth as f64;
            let w_b = params.w_bilateral as f64;
            let smooth_fg_frac = if s_z > 0.0 { 1.0 - s_q / s_z } else { 0.0 };
            let smooth_bg_frac = if s_z > 0.0 { s_q / s_z } else { 0.0 };
            let bilateral_fg_frac = if b_z > 0.0 { 1.0 - b_q / b_z } else { 0.0 };
            let bilateral_bg_frac = if b_z > 0.0 { b_q / b_z } else { 0.0 };
            let msg_fg = w_s * smooth_fg_frac + w_b * bilateral_fg_frac;
            let msg_bg = w_s * smooth_bg_frac + w_b * bilateral_bg_frac;
            let e_fg = unary.fg[(i, j, k)] as f64 + msg_fg;
            let e_bg = unary.bg[(i, j, k)] as f64 + msg_bg;
            // normalize via the stable softmax
            let m = e_fg.min(e_bg);
            let ef = (-(e_fg - m)).exp();
            let eb = (-(e_bg - m)).exp();
            *out = ef / (ef + eb);
        });
        let mut max_delta = 0.0f64;
        for (a, b) in q.iter().zip(q_next.iter()) {
            max_delta = max_delta.max((a - b).abs());
        }
        q = q_next;
        iterations_run += 1;
        if max_delta < 1e-5 {
            break;
        }
    }

    let mut mask = Array3::<u8>::zeros(dims);
    Zip::from(&mut mask).and(&q).for_each(|m, &qv| {
        *m = if qv > 0.5 { 1 } else { 0 };
    });
    Ok(CrfResult {
        mask: MaskVolume::new(mask).expect("binary by construction"),
        q_fg: q.mapv(|v| v as f32),
        iterations_run,
    })
}
