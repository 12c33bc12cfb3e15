//! The weak-supervision engine: probability-map fusion, initial and
//! iteratively refined pseudo labels, region sampling from loose bounding
//! boxes, the joint loss, and the three-phase training schedule.

pub mod loss;
mod train;

pub use train::*;

use crate::crf::{mean_field, unary_from_probability, CrfError, CrfParams};
use crate::volume::{BoundingBox3, FrustumVolume, MaskVolume};
use ndarray::{s, Array3, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum WeaksupError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot place a negative region: box {0} leaves no catheter-free room")]
    CannotPlaceNegative(BoundingBox3),
    #[error("crf error: {0}")]
    Crf(#[from] CrfError),
    #[error("network error: {0}")]
    Network(#[from] crate::network::NetworkError),
    #[error("training diverged at phase {phase} epoch {epoch}: {what}")]
    Diverged { phase: u8, epoch: u32, what: String },
    #[error("{0}")]
    BadInput(String),
}

/// Fuse vesselness, an upsampled CAM and the normalized input into the
/// catheter probability map (elementwise product).
pub fn build_probability_map(
    vesselness: &Array3<f32>,
    cam_full: &Array3<f32>,
    volume: &FrustumVolume,
) -> Result<Array3<f32>, WeaksupError> {
    if vesselness.dim() != volume.data.dim() || cam_full.dim() != volume.data.dim() {
        return Err(WeaksupError::ShapeMismatch(format!(
            "vesselness {:?} / cam {:?} / volume {:?}",
            vesselness.dim(),
            cam_full.dim(),
            volume.data.dim()
        )));
    }
    let inv_max = 1.0 / volume.intensity_max;
    let mut u = Array3::zeros(volume.data.dim());
    Zip::from(&mut u)
        .and(vesselness)
        .and(cam_full)
        .and(&volume.data)
        .for_each(|o, &v, &c, &i| {
            *o = v * c * (i * inv_max);
        });
    Ok(u)
}

/// Per-volume pseudo-label history driving the moving-average refinement.
#[derive(Debug, Clone)]
pub struct PseudoLabelState {
    /// The probability map carried between updates (bbox-clipped).
    pub u_prev: Array3<f32>,
    pub y_current: MaskVolume,
    pub eta: f32,
    pub epoch_of_last_update: u32,
    /// True when the CRF produced an empty mask and the thresholded map
    /// was used instead.
    pub fallback_used: bool,
}

fn zero_outside_bbox(map: &Array3<f32>, bbox: &BoundingBox3) -> Array3<f32> {
    let mut out = Array3::zeros(map.dim());
    let r = bbox.ranges();
    out.slice_mut(s![r[0].clone(), r[1].clone(), r[2].clone()])
        .assign(&map.slice(s![r[0].clone(), r[1].clone(), r[2].clone()]));
    out
}

/// Run the dense CRF on the bbox neighborhood only. Pseudo labels are
/// clipped to the bbox anyway, and message passing is windowed, so voxels
/// farther than one window radius from the box cannot change the result
/// inside it in one sweep; restricting the field keeps refreshes cheap.
fn crf_inside_bbox(
    u_clipped: &Array3<f32>,
    image: &Array3<f32>,
    bbox: &BoundingBox3,
    params: &CrfParams,
) -> Result<MaskVolume, CrfError> {
    let shape = u_clipped.dim();
    let work = bbox.dilate_clamped(params.window_radius_vox, shape);
    let r = work.ranges();
    let u_crop = u_clipped
        .slice(s![r[0].clone(), r[1].clone(), r[2].clone()])
        .to_owned();
    let img_crop = image
        .slice(s![r[0].clone(), r[1].clone(), r[2].clone()])
        .to_owned();
    let unary = unary_from_probability(&u_crop, params.tau_u);
    let res = mean_field(&unary, &img_crop, params)?;
    let mut full = MaskVolume::zeros(shape);
    full.data
        .slice_mut(s![r[0].clone(), r[1].clone(), r[2].clone()])
        .assign(&res.mask.data);
    // clip to the trusted box
    let mut clipped = MaskVolume::zeros(shape);
    let rb = bbox.ranges();
    clipped
        .data
        .slice_mut(s![rb[0].clone(), rb[1].clone(), rb[2].clone()])
        .assign(&full.data.slice(s![rb[0].clone(), rb[1].clone(), rb[2].clone()]));
    Ok(clipped)
}

/// Initial pseudo label: clip the probability map to the loose bbox,
/// threshold into unaries, refine with the dense CRF, clip again. When the
/// CRF yields an empty mask the thresholded map is used and flagged.
pub fn initial_pseudo_label(
    u: &Array3<f32>,
    image: &Array3<f32>,
    bbox: &BoundingBox3,
    params: &CrfParams,
    eta: f32,
) -> Result<PseudoLabelState, WeaksupError> {
    if u.dim() != image.dim() {
        return Err(WeaksupError::ShapeMismatch(format!(
            "u {:?} vs image {:?}",
            u.dim(),
            image.dim()
        )));
    }
    let u_clipped = zero_outside_bbox(u, bbox);
    let mask = crf_inside_bbox(&u_clipped, image, bbox, params)?;
    let (mask, fallback_used) = if mask.count_ones() == 0 {
        let mut thr = MaskVolume::zeros(u.dim());
        Zip::from(&mut thr.data).and(&u_clipped).for_each(|m, &p| {
            *m = (p >= params.tau_u) as u8;
        });
        (thr, true)
    } else {
        (mask, false)
    };
    Ok(PseudoLabelState {
        u_prev: u_clipped,
        y_current: mask,
        eta,
        epoch_of_last_update: 0,
        fallback_used,
    })
}

/// Moving-average pseudo-label refinement: blend the carried map with the
/// current prediction-gated map, refine by CRF, clip to the bbox, and store
/// the blend back into the state.
pub fn update_pseudo_label(
    state: &mut PseudoLabelState,
    u_t: &Array3<f32>,
    y_hat: &MaskVolume,
    image: &Array3<f32>,
    bbox: &BoundingBox3,
    params: &CrfParams,
    epoch: u32,
) -> Result<(), WeaksupError> {
    if u_t.dim() != state.u_prev.dim() || y_hat.data.dim() != u_t.dim() {
        return Err(WeaksupError::ShapeMismatch(format!(
            "u_t {:?} / y_hat {:?} / state {:?}",
            u_t.dim(),
            y_hat.data.dim(),
            state.u_prev.dim()
        )));
    }
    let eta = state.eta;
    let mut blend = Array3::zeros(u_t.dim());
    Zip::from(&mut blend)
        .and(&state.u_prev)
        .and(u_t)
        .and(&y_hat.data)
        .for_each(|b, &prev, &cur, &pred| {
            *b = eta * prev + (1.0 - eta) * (pred as f32 * cur);
        });
    let blend = zero_outside_bbox(&blend, bbox);
    let mask = crf_inside_bbox(&blend, image, bbox, params)?;
    let (mask, fallback) = if mask.count_ones() == 0 {
        let mut thr = MaskVolume::zeros(u_t.dim());
        Zip::from(&mut thr.data).and(&blend).for_each(|m, &p| {
            *m = (p >= params.tau_u) as u8;
        });
        (thr, true)
    } else {
        (mask, false)
    };
    state.u_prev = blend;
    state.y_current = mask;
    state.epoch_of_last_update = epoch;
    state.fallback_used = fallback;
    Ok(())
}

/// Sample `n` positive regions (jittered around the bbox, overlap > 0) and
/// `n` negative regions (zero overlap). Region size is the bbox size
/// clamped to [8³, volume].
pub fn sample_regions(
    bbox: &BoundingBox3,
    volume_shape: (usize, usize, usize),
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<BoundingBox3>, Vec<BoundingBox3>), WeaksupError> {
    let dims = [
        volume_shape.0 as i64,
        volume_shape.1 as i64,
        volume_shape.2 as i64,
    ];
    let mut size = [0i64; 3];
    for a in 0..3 {
        size[a] = (bbox.size()[a] as i64).clamp(8.min(dims[a]), dims[a]);
    }
    let make = |start: [i64; 3]| {
        let mut s = [0u32; 3];
        let mut e = [0u32; 3];
        for a in 0..3 {
            let st = start[a].clamp(0, dims[a] - size[a]);
            s[a] = st as u32;
            e[a] = (st + size[a]) as u32;
        }
        BoundingBox3 { start: s, end: e }
    };

    let mut positives = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while positives.len() < n {
        attempts += 1;
        if attempts > 10_000 * n {
            return Err(WeaksupError::BadInput(
                "could not sample positive regions".into(),
            ));
        }
        let mut start = [0i64; 3];
        for a in 0..3 {
            let jitter = rng.gen_range(-(size[a] / 2)..=size[a] / 2);
            start[a] = bbox.start[a] as i64 + jitter;
        }
        let candidate = make(start);
        if candidate.intersects(bbox) {
            positives.push(candidate);
        }
    }

    // quick feasibility check: some placement must avoid the bbox entirely
    let fits_somewhere = (0..3).any(|a| {
        (bbox.start[a] as i64) >= size[a] || dims[a] - (bbox.end[a] as i64) >= size[a]
    });
    if !fits_somewhere {
        return Err(WeaksupError::CannotPlaceNegative(*bbox));
    }

    let mut negatives = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while negatives.len() < n {
        attempts += 1;
        if attempts > 100_000 * n {
            return Err(WeaksupError::CannotPlaceNegative(*bbox));
        }
        let mut start = [0i64; 3];
        for a in 0..3 {
            start[a] = rng.gen_range(0..=(dims[a] - size[a]).max(0));
        }
        let candidate = make(start);
        if !candidate.intersects(bbox) {
            negatives.push(candidate);
        }
    }
    Ok((positives, negatives))
}

/// Per-voxel max stitch of ROI probability patches into a full volume
/// (zeros outside every ROI).
pub fn stitch_max(
    shape: (usize, usize, usize),
    patches: &[(BoundingBox3, Array3<f32>)],
) -> Array3<f32> {
    let mut out = Array3::zeros(shape);
    for (roi, patch) in patches {
        let r = roi.ranges();
        let mut dst = out.slice_mut(s![r[0].clone(), r[1].clone(), r[2].clone()]);
        Zip::from(&mut dst).and(patch).for_each(|o, &p| {
            if p > *o {
                *o = p;
            }
        });
    }
    out
}
