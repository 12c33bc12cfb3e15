//! Frustum (polar) to Cartesian scan conversion and its inverse.
//!
//! The angular model is a separable tan-fan: each beam is addressed by two
//! independent fan angles (azimuth θ, elevation φ) measured from the probe
//! axis, and the radial coordinate r is the true Euclidean distance from the
//! apex along the beam. A beam sample maps to
//!
//! ```text
//!   (x, y, z) = (d·tanθ, d·tanφ, d)     with d = r / sqrt(1 + tan²θ + tan²φ)
//! ```
//!
//! so that x² + y² + z² = r². The apex is the origin of both angular fans,
//! x follows azimuth, y follows elevation, and z is depth along the probe
//! axis. This convention is one deliberate, swappable policy; all tests are
//! written against it.
//!
//! Volumes are resampled with trilinear interpolation (nearest-neighbor for
//! masks so labels stay binary). Cartesian voxels outside the fan footprint
//! are set to zero and reported in a footprint mask.

use crate::volume::{CartesianVolume, FrustumVolume, MaskVolume, VolumeError};
use ndarray::{Array3, Axis};
use rayon::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate fan: {axis} span {span_deg:.2} deg must lie in (0, 180)")]
    DegenerateSpan { axis: &'static str, span_deg: f32 },
    #[error("spacing must be positive, got {0}")]
    BadSpacing(f32),
    #[error("step must be positive, got {0}")]
    BadStep(f32),
    #[error("volume error: {0}")]
    Volume(#[from] VolumeError),
}

/// Beam-lattice description: where every frustum sample sits in space.
///
/// `radial_start_mm` is the distance from the apex to the first radial
/// sample. The paper-style acquisitions start at the apex (0); it is kept
/// as metadata because real probes may have a standoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeGeometry {
    pub radial_start_mm: f32,
    pub radial_step_mm: f32,
    pub azimuth_step_deg: f32,
    pub elevation_step_deg: f32,
    pub azimuth_lines: usize,
    pub elevation_lines: usize,
}

impl ProbeGeometry {
    pub fn new(
        radial_start_mm: f32,
        radial_step_mm: f32,
        azimuth_step_deg: f32,
        elevation_step_deg: f32,
        azimuth_lines: usize,
        elevation_lines: usize,
    ) -> Result<Self, GeometryError> {
        if !(radial_step_mm > 0.0) {
            return Err(GeometryError::BadStep(radial_step_mm));
        }
        if !(azimuth_step_deg > 0.0) {
            return Err(GeometryError::BadStep(azimuth_step_deg));
        }
        if !(elevation_step_deg > 0.0) {
            return Err(GeometryError::BadStep(elevation_step_deg));
        }
        let g = Self {
            radial_start_mm,
            radial_step_mm,
            azimuth_step_deg,
            elevation_step_deg,
            azimuth_lines,
            elevation_lines,
        };
        let az = g.azimuth_span_deg();
        if !(az > 0.0 && az < 180.0) && azimuth_lines > 1 {
            return Err(GeometryError::DegenerateSpan {
                axis: "azimuth",
                span_deg: az,
            });
        }
        let el = g.elevation_span_deg();
        if !(el > 0.0 && el < 180.0) && elevation_lines > 1 {
            return Err(GeometryError::DegenerateSpan {
                axis: "elevation",
                span_deg: el,
            });
        }
        Ok(g)
    }

    /// Geometry of an existing frustum volume with a given apex standoff.
    pub fn from_frustum(fv: &FrustumVolume, radial_start_mm: f32) -> Result<Self, GeometryError> {
        let (_, a, e) = fv.shape();
        Self::new(
            radial_start_mm,
            fv.radial_step_mm,
            fv.azimuth_step_deg,
            fv.elevation_step_deg,
            a,
            e,
        )
    }

    pub fn azimuth_span_deg(&self) -> f32 {
        (self.azimuth_lines.saturating_sub(1)) as f32 * self.azimuth_step_deg
    }

    pub fn elevation_span_deg(&self) -> f32 {
        (self.elevation_lines.saturating_sub(1)) as f32 * self.elevation_step_deg
    }

    fn azimuth_rad(&self, a_idx: f64) -> f64 {
        (a_idx - (self.azimuth_lines as f64 - 1.0) / 2.0)
            * (self.azimuth_step_deg as f64).to_radians()
    }

    fn elevation_rad(&self, e_idx: f64) -> f64 {
        (e_idx - (self.elevation_lines as f64 - 1.0) / 2.0)
            * (self.elevation_step_deg as f64).to_radians()
    }

    fn radius_mm(&self, r_idx: f64) -> f64 {
        self.radial_start_mm as f64 + r_idx * self.radial_step_mm as f64
    }

    /// Map continuous frustum indices to a point in mm (apex at the origin).
    pub fn frustum_point_to_cartesian(&self, r_idx: f64, a_idx: f64, e_idx: f64) -> [f64; 3] {
        let r = self.radius_mm(r_idx);
        let u = self.azimuth_rad(a_idx).tan();
        let v = self.elevation_rad(e_idx).tan();
        let d = r / (1.0 + u * u + v * v).sqrt();
        [d * u, d * v, d]
    }

    /// Inverse of [`Self::frustum_point_to_cartesian`]. Returns None for
    /// points behind the apex plane (z <= 0 away from the apex itself).
    pub fn cartesian_point_to_frustum(&self, p: [f64; 3]) -> Option<[f64; 3]> {
        let [x, y, z] = p;
        let r = (x * x + y * y + z * z).sqrt();
        let (theta, phi) = if r == 0.0 {
            (0.0, 0.0)
        } else if z <= 0.0 {
            return None;
        } else {
            ((x / z).atan(), (y / z).atan())
        };
        let r_idx = (r - self.radial_start_mm as f64) / self.radial_step_mm as f64;
        let a_idx =
            theta / (self.azimuth_step_deg as f64).to_radians() + (self.azimuth_lines as f64 - 1.0) / 2.0;
        let e_idx = phi / (self.elevation_step_deg as f64).to_radians()
            + (self.elevation_lines as f64 - 1.0) / 2.0;
        Some([r_idx, a_idx, e_idx])
    }
}

/// Axis-aligned mm bounds tightly containing every beam sample of a frustum
/// of `radial_samples` depth. Because each beam is a straight ray from the
/// apex, per-axis extrema over sample points occur at the two radial ends,
/// so only those two shells are scanned.
pub fn tight_bounds_mm(geom: &ProbeGeometry, radial_samples: usize) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &r_idx in &[0usize, radial_samples - 1] {
        for a in 0..geom.azimuth_lines {
            for e in 0..geom.elevation_lines {
                let p = geom.frustum_point_to_cartesian(r_idx as f64, a as f64, e as f64);
                for axis in 0..3 {
                    lo[axis] = lo[axis].min(p[axis]);
                    hi[axis] = hi[axis].max(p[axis]);
                }
            }
        }
    }
    (lo, hi)
}

/// Output grid of a scan conversion: origin of voxel (0,0,0) in mm and dims.
pub fn output_grid(
    geom: &ProbeGeometry,
    radial_samples: usize,
    spacing_mm: [f32; 3],
) -> Result<([f64; 3], [usize; 3]), GeometryError> {
    for &s in &spacing_mm {
        if !(s > 0.0 && s.is_finite()) {
            return Err(GeometryError::BadSpacing(s));
        }
    }
    let (lo, hi) = tight_bounds_mm(geom, radial_samples);
    let mut dims = [0usize; 3];
    for axis in 0..3 {
        dims[axis] = ((hi[axis] - lo[axis]) / spacing_mm[axis] as f64).floor() as usize + 1;
    }
    Ok((lo, dims))
}

/// Result of a frustum to Cartesian conversion: the resampled volume and a
/// mask marking which voxels lie inside the fan footprint.
pub struct ScanConverted {
    pub volume: CartesianVolume,
    pub footprint: MaskVolume,
    pub origin_mm: [f64; 3],
}

fn trilinear(data: &Array3<f32>, idx: [f64; 3]) -> Option<f32> {
    let dims = data.dim();
    let dims = [dims.0, dims.1, dims.2];
    let mut i0 = [0usize; 3];
    let mut frac = [0f64; 3];
    for axis in 0..3 {
        let x = idx[axis];
        if x < 0.0 || x > (dims[axis] - 1) as f64 {
            return None;
        }
        let mut f = x.floor() as usize;
        // keep the 8-cell stencil valid on the far face
        if f >= dims[axis] - 1 {
            f = dims[axis].saturating_sub(2);
        }
        if dims[axis] == 1 {
            f = 0;
            frac[axis] = 0.0;
        } else {
            frac[axis] = x - f as f64;
        }
        i0[axis] = f;
    }
    let mut acc = 0f64;
    for dz in 0..2usize {
        for dy in 0..2usize {
            for dx in 0..2usize {
                let w = (if dz == 1 { frac[0] } else { 1.0 - frac[0] })
                    * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                    * (if dx == 1 { frac[2] } else { 1.0 - frac[2] });
                if w == 0.0 {
                    continue;
                }
                let i = (i0[0] + dz).min(dims[0] - 1);
                let j = (i0[1] + dy).min(dims[1] - 1);
                let k = (i0[2] + dx).min(dims[2] - 1);
                acc += w * data[(i, j, k)] as f64;
            }
        }
    }
    Some(acc as f32)
}

fn nearest(data: &Array3<u8>, idx: [f64; 3]) -> Option<u8> {
    let dims = data.dim();
    let dims = [dims.0, dims.1, dims.2];
    let mut i = [0usize; 3];
    for axis in 0..3 {
        let x = idx[axis];
        if x < -0.5 || x > (dims[axis] - 1) as f64 + 0.5 {
            return None;
        }
        i[axis] = (x.round().max(0.0) as usize).min(dims[axis] - 1);
    }
    Some(data[(i[0], i[1], i[2])])
}

/// Resample a frustum volume onto a regular Cartesian grid that tightly
/// bounds the fan. Voxels outside the footprint are zero.
pub fn frustum_to_cartesian(
    fv: &FrustumVolume,
    geom: &ProbeGeometry,
    spacing_mm: [f32; 3],
) -> Result<ScanConverted, GeometryError> {
    let (d_dim, _, _) = fv.shape();
    let (origin, dims) = output_grid(geom, d_dim, spacing_mm)?;
    let in_max = [
        (d_dim - 1) as f64,
        (geom.azimuth_lines - 1) as f64,
        (geom.elevation_lines - 1) as f64,
    ];
    let mut out = Array3::<f32>::zeros((dims[0], dims[1], dims[2]));
    let mut fp = Array3::<u8>::zeros((dims[0], dims[1], dims[2]));
    let data = &fv.data;
    let intensity_max = fv.intensity_max;

    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(fp.axis_iter_mut(Axis(0)).into_par_iter())
        .enumerate()
        .for_each(|(ix, (mut out_slab, mut fp_slab))| {
            let x = origin[0] + ix as f64 * spacing_mm[0] as f64;
            for iy in 0..dims[1] {
                let y = origin[1] + iy as f64 * spacing_mm[1] as f64;
                for iz in 0..dims[2] {
                    let z = origin[2] + iz as f64 * spacing_mm[2] as f64;
                    if let Some(f_idx) = geom.cartesian_point_to_frustum([x, y, z]) {
                        let inside = (0..3).all(|a| f_idx[a] >= 0.0 && f_idx[a] <= in_max[a]);
                        if inside {
                            if let Some(v) = trilinear(data, f_idx) {
                                out_slab[(iy, iz)] = v.clamp(0.0, intensity_max);
                                fp_slab[(iy, iz)] = 1;
                            }
                        }
                    }
                }
            }
        });

    Ok(ScanConverted {
        volume: CartesianVolume::new(
            out,
            (spacing_mm[0], spacing_mm[1], spacing_mm[2]),
            intensity_max,
        )?,
        footprint: MaskVolume::new(fp)?,
        origin_mm: origin,
    })
}

/// Inverse scan conversion. The Cartesian grid is assumed to be the tight
/// grid this module produces for (`geom`, `frustum_shape`) at the volume's
/// spacing; samples falling outside it are set to zero and counted.
pub fn cartesian_to_frustum(
    cv: &CartesianVolume,
    geom: &ProbeGeometry,
    frustum_shape: (usize, usize, usize),
) -> Result<(FrustumVolume, u64), GeometryError> {
    let spacing = [cv.spacing_mm.0, cv.spacing_mm.1, cv.spacing_mm.2];
    let (origin, _) = output_grid(geom, frustum_shape.0, spacing)?;
    let (cd, ca, ce) = cv.shape();
    let cart_dims = [cd, ca, ce];
    let mut out = Array3::<f32>::zeros(frustum_shape);
    let data = &cv.data;
    let intensity_max = cv.intensity_max;
    let oob = std::sync::atomic::AtomicU64::new(0);

    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(r_idx, mut slab)| {
            let mut local_oob = 0u64;
            for a_idx in 0..frustum_shape.1 {
                for e_idx in 0..frustum_shape.2 {
                    let p = geom.frustum_point_to_cartesian(
                        r_idx as f64,
                        a_idx as f64,
                        e_idx as f64,
                    );
                    let mut cidx = [0f64; 3];
                    let mut ok = true;
                    for axis in 0..3 {
                        cidx[axis] = (p[axis] - origin[axis]) / spacing[axis] as f64;
                        if cidx[axis] < 0.0 || cidx[axis] > (cart_dims[axis] - 1) as f64 {
                            ok = false;
                        }
                    }
                    if ok {
                        if let Some(v) = trilinear(data, cidx) {
                            slab[(a_idx, e_idx)] = v.clamp(0.0, intensity_max);
                            continue;
                        }
                    }
                    local_oob += 1;
                }
            }
            oob.fetch_add(local_oob, std::sync::atomic::Ordering::Relaxed);
        });

    let fv = FrustumVolume::new(
        out,
        geom.radial_step_mm,
        geom.azimuth_step_deg,
        geom.elevation_step_deg,
        intensity_max,
    )?;
    Ok((fv, oob.into_inner()))
}

/// Nearest-neighbor mask conversion, frustum to Cartesian.
pub fn frustum_mask_to_cartesian(
    mask: &MaskVolume,
    geom: &ProbeGeometry,
    spacing_mm: [f32; 3],
) -> Result<MaskVolume, GeometryError> {
    let (d_dim, _, _) = mask.shape();
    let (origin, dims) = output_grid(geom, d_dim, spacing_mm)?;
    let in_max = [
        (d_dim - 1) as f64,
        (geom.azimuth_lines - 1) as f64,
        (geom.elevation_lines - 1) as f64,
    ];
    let mut out = Array3::<u8>::zeros((dims[0], dims[1], dims[2]));
    let data = &mask.data;
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ix, mut slab)| {
            let x = origin[0] + ix as f64 * spacing_mm[0] as f64;
            for iy in 0..dims[1] {
                let y = origin[1] + iy as f64 * spacing_mm[1] as f64;
                for iz in 0..dims[2] {
                    let z = origin[2] + iz as f64 * spacing_mm[2] as f64;
                    if let Some(f_idx) = geom.cartesian_point_to_frustum([x, y, z]) {
                        let inside = (0..3).all(|a| f_idx[a] >= 0.0 && f_idx[a] <= in_max[a]);
                        if inside {
                            if let Some(v) = nearest(data, f_idx) {
                                slab[(iy, iz)] = v;
                            }
                        }
                    }
                }
            }
        });
    Ok(MaskVolume::new(out)?)
}
