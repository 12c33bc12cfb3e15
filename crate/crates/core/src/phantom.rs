//! Deterministic synthetic frustum-ultrasound phantoms: a bright curved
//! tube over speckled tissue background, with voxel ground truth and a
//! deliberately loose bounding box.
//!
//! The tube follows a Catmull-Rom spline through a few control points in
//! frustum index space. The physical diameter is converted to per-axis
//! voxel radii at each centerline sample: the radial axis divides by the
//! radial step, the angular axes divide by the local arc length at that
//! sample's depth, so a tube gets narrower in angular voxels as it runs
//! deeper. The background is a smooth low-frequency field modulated by
//! multiplicative Rayleigh speckle, plus a few bright ellipsoidal shells
//! standing in for tissue walls.

use crate::volume::{BoundingBox3, FrustumVolume, MaskVolume, VolumeError};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    BadSpec(String),
    #[error("tube exits the volume (sample {sample:?} with radii {radii:?})")]
    TubeExitsVolume { sample: [f32; 3], radii: [f32; 3] },
    #[error("tube/background contrast {measured:.1} below required margin {required:.1}")]
    LowContrast { measured: f32, required: f32 },
    #[error("volume error: {0}")]
    Volume(#[from] VolumeError),
    #[error("manifest parse error: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    pub shape: (usize, usize, usize),
    pub radial_step_mm: f32,
    pub azimuth_step_deg: f32,
    pub elevation_step_deg: f32,
    /// Apex standoff used when converting mm to angular voxels.
    pub radial_start_mm: f32,
    pub catheter_diameter_mm: f32,
    /// Tube centerline control points in frustum index space.
    pub control_points: Vec<[f32; 3]>,
    pub tube_intensity_mean: f32,
    pub tube_intensity_sigma: f32,
    pub background_base: f32,
    pub background_amplitude: f32,
    /// 0 disables speckle; around 0.5 gives ultrasound-like texture.
    pub speckle_strength: f32,
    pub tissue_structures: u32,
    pub tissue_intensity: f32,
    /// Required mean intensity gap between tube and background voxels.
    pub contrast_margin: f32,
    pub bbox_margin_vox: u32,
    pub intensity_max: f32,
    pub rng_seed: u64,
}

impl PhantomSpec {
    /// Desk-scale 96x32x32 phantom with paper-style voxel units.
    pub fn desk_default(rng_seed: u64) -> Self {
        Self {
            shape: (96, 32, 32),
            radial_step_mm: 0.2695,
            azimuth_step_deg: 1.003,
            elevation_step_deg: 1.003,
            radial_start_mm: 24.0,
            catheter_diameter_mm: 3.3,
            // the tube sits at the near end of the depth axis so that a
            // catheter-free region of bbox size always fits on the far side
            control_points: vec![
                [10.0, 16.0, 16.0],
                [16.0, 14.0, 17.5],
                [24.0, 18.0, 14.5],
                [30.0, 16.0, 16.0],
            ],
            tube_intensity_mean: 190.0,
            tube_intensity_sigma: 12.0,
            background_base: 48.0,
            background_amplitude: 14.0,
            speckle_strength: 0.55,
            tissue_structures: 2,
            tissue_intensity: 70.0,
            contrast_margin: 40.0,
            bbox_margin_vox: 4,
            intensity_max: 255.0,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let (d, a, e) = self.shape;
        if d == 0 || a == 0 || e == 0 {
            return Err(PhantomError::BadSpec("empty shape".into()));
        }
        if !(self.catheter_diameter_mm > 0.0) {
            return Err(PhantomError::BadSpec("diameter must be positive".into()));
        }
        if self.control_points.len() < 2 {
            return Err(PhantomError::BadSpec(
                "need at least two control points".into(),
            ));
        }
        for p in &self.control_points {
            if p[0] < 0.0
                || p[1] < 0.0
                || p[2] < 0.0
                || p[0] > (d - 1) as f32
                || p[1] > (a - 1) as f32
                || p[2] > (e - 1) as f32
            {
                return Err(PhantomError::BadSpec(format!(
                    "control point {p:?} outside shape {:?}",
                    self.shape
                )));
            }
        }
        if !(self.radial_step_mm > 0.0
            && self.azimuth_step_deg > 0.0
            && self.elevation_step_deg > 0.0)
        {
            return Err(PhantomError::BadSpec("steps must be positive".into()));
        }
        Ok(())
    }
}

fn catmull_rom(p0: [f32; 3], p1: [f32; 3], p2: [f32; 3], p3: [f32; 3], t: f32) -> [f32; 3] {
    let t2 = t * t;
    let t3 = t2 * t;
    std::array::from_fn(|a| {
        0.5 * ((2.0 * p1[a])
            + (-p0[a] + p2[a]) * t
            + (2.0 * p0[a] - 5.0 * p1[a] + 4.0 * p2[a] - p3[a]) * t2
            + (-p0[a] + 3.0 * p1[a] - 3.0 * p2[a] + p3[a]) * t3)
    })
}

/// Densely sampled centerline through the control points (64 samples per
/// segment, endpoints replicated).
pub fn tube_centerline(points: &[[f32; 3]]) -> Vec<[f32; 3]> {
    const PER_SEGMENT: usize = 64;
    let n = points.len();
    let get = |i: isize| points[i.clamp(0, n as isize - 1) as usize];
    let mut out = Vec::with_capacity((n - 1) * PER_SEGMENT + 1);
    for s in 0..n - 1 {
        for t in 0..PER_SEGMENT {
            let tt = t as f32 / PER_SEGMENT as f32;
            out.push(catmull_rom(
                get(s as isize - 1),
                get(s as isize),
                get(s as isize + 1),
                get(s as isize + 2),
                tt,
            ));
        }
    }
    out.push(points[n - 1]);
    out
}

/// Per-axis voxel radii of the tube at a centerline sample. The angular
/// radii grow toward the apex, where one degree covers less tissue.
fn voxel_radii(spec: &PhantomSpec, sample: &[f32; 3]) -> [f32; 3] {
    let half = spec.catheter_diameter_mm / 2.0;
    let depth_mm = spec.radial_start_mm + sample[0].max(0.0) * spec.radial_step_mm;
    let arc_az = (depth_mm * spec.azimuth_step_deg.to_radians()).max(1e-3);
    let arc_el = (depth_mm * spec.elevation_step_deg.to_radians()).max(1e-3);
    [half / spec.radial_step_mm, half / arc_az, half / arc_el]
}

struct SplineField {
    samples: Vec<[f32; 3]>,
    radii: Vec<[f32; 3]>,
}

impl SplineField {
    /// Squared normalized distance to the tube surface (<= 1 is inside).
    fn normalized_dist2(&self, p: [f32; 3]) -> f32 {
        let mut best = f32::INFINITY;
        for (s, r) in self.samples.iter().zip(self.radii.iter()) {
            let dd = (p[0] - s[0]) / r[0];
            let da = (p[1] - s[1]) / r[1];
            let de = (p[2] - s[2]) / r[2];
            let d2 = dd * dd + da * da + de * de;
            if d2 < best {
                best = d2;
            }
        }
        best
    }
}

struct Ellipsoid {
    center: [f32; 3],
    semi: [f32; 3],
    thickness: f32,
    gain: f32,
}

pub struct Phantom {
    pub volume: FrustumVolume,
    pub ground_truth: MaskVolume,
    pub loose_bbox: BoundingBox3,
}

/// Generate one phantom. Identical specs give bit-identical outputs.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    spec.validate()?;
    let (d, a, e) = spec.shape;
    let samples = tube_centerline(&spec.control_points);
    let radii: Vec<[f32; 3]> = samples.iter().map(|s| voxel_radii(spec, s)).collect();
    for (s, r) in samples.iter().zip(radii.iter()) {
        let dims = [d as f32, a as f32, e as f32];
        for axis in 0..3 {
            if s[axis] - r[axis] < -0.5 || s[axis] + r[axis] > dims[axis] - 0.5 {
                return Err(PhantomError::TubeExitsVolume {
                    sample: *s,
                    radii: *r,
                });
            }
        }
    }
    let field = SplineField { samples, radii };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    // low-frequency background: three random cosine waves
    let waves: Vec<([f32; 3], f32)> = (0..3)
        .map(|_| {
            let freq = [
                rng.gen_range(0.5..2.0f32) / d as f32,
                rng.gen_range(0.5..2.0f32) / a as f32,
                rng.gen_range(0.5..2.0f32) / e as f32,
            ];
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            (freq, phase)
        })
        .collect();

    let shells: Vec<Ellipsoid> = (0..spec.tissue_structures)
        .map(|_| Ellipsoid {
            center: [
                rng.gen_range(0.2..0.8) * d as f32,
                rng.gen_range(0.2..0.8) * a as f32,
                rng.gen_range(0.2..0.8) * e as f32,
            ],
            semi: [
                rng.gen_range(10.0..24.0f32),
                rng.gen_range(6.0..14.0f32),
                rng.gen_range(6.0..14.0f32),
            ],
            thickness: rng.gen_range(0.08..0.2f32),
            gain: spec.tissue_intensity * rng.gen_range(0.7..1.3),
        })
        .collect();

    // per-voxel draws in a fixed scan order so outputs are seed-stable
    let rayleigh_scale = (2.0 / std::f32::consts::PI).sqrt();
    let mut speckle = Array3::<f32>::zeros((d, a, e));
    let mut tube_noise = Array3::<f32>::zeros((d, a, e));
    for v in speckle.iter_mut() {
        let u: f32 = rng.gen_range(0.0f32..1.0).max(1e-7);
        let rayleigh = rayleigh_scale * (-2.0 * u.ln()).sqrt();
        *v = 1.0 + spec.speckle_strength * (rayleigh - 1.0);
    }
    for v in tube_noise.iter_mut() {
        // Box-Muller from two uniforms
        let u1: f32 = rng.gen_range(1e-7f32..1.0);
        let u2: f32 = rng.gen_range(0.0f32..1.0);
        *v = (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos();
    }

    let field_ref = &field;
    let waves_ref = &waves;
    let shells_ref = &shells;
    let speckle_ref = &speckle;
    let tube_noise_ref = &tube_noise;
    let slabs: Vec<(Vec<f32>, Vec<u8>)> = (0..d)
        .into_par_iter()
        .map(|i| {
            let mut dslab = vec![0f32; a * e];
            let mut mslab = vec![0u8; a * e];
            for j in 0..a {
                for k in 0..e {
                    let p = [i as f32, j as f32, k as f32];
                    let mut bg = spec.background_base;
                    for (freq, phase) in waves_ref {
                        bg += spec.background_amplitude / 3.0
                            * (std::f32::consts::TAU
                                * (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2])
                                + phase)
                                .cos();
                    }
                    for sh in shells_ref {
                        let mut q = 0.0;
                        for axis in 0..3 {
                            let t = (p[axis] - sh.center[axis]) / sh.semi[axis];
                            q += t * t;
                        }
                        let qd = q.sqrt() - 1.0;
                        bg += sh.gain * (-(qd * qd) / (2.0 * sh.thickness * sh.thickness)).exp();
                    }
                    let speckled = bg * speckle_ref[(i, j, k)];
                    let d2 = field_ref.normalized_dist2(p);
                    let profile = (-1.5 * d2).exp();
                    let tube_val = spec.tube_intensity_mean
                        + spec.tube_intensity_sigma * tube_noise_ref[(i, j, k)];
                    let v = speckled * (1.0 - profile) + tube_val * profile;
                    dslab[j * e + k] = v.clamp(0.0, spec.intensity_max);
                    if d2 <= 1.0 {
                        mslab[j * e + k] = 1;
                    }
                }
            }
            (dslab, mslab)
        })
        .collect();

    let mut data = Array3::<f32>::zeros((d, a, e));
    let mut mask = Array3::<u8>::zeros((d, a, e));
    for (i, (dslab, mslab)) in slabs.into_iter().enumerate() {
        for j in 0..a {
            for k in 0..e {
                data[(i, j, k)] = dslab[j * e + k];
                mask[(i, j, k)] = mslab[j * e + k];
            }
        }
    }

    let ground_truth = MaskVolume::new(mask)?;
    let tight = ground_truth
        .tight_bbox()
        .ok_or_else(|| PhantomError::BadSpec("tube produced an empty mask".into()))?;
    let loose_bbox = tight.dilate_clamped(spec.bbox_margin_vox, (d, a, e));

    // contrast check: tube voxels vs everything else
    let mut tube_sum = 0.0f64;
    let mut tube_n = 0u64;
    let mut bg_sum = 0.0f64;
    let mut bg_n = 0u64;
    for (v, m) in data.iter().zip(ground_truth.data.iter()) {
        if *m == 1 {
            tube_sum += *v as f64;
            tube_n += 1;
        } else {
            bg_sum += *v as f64;
            bg_n += 1;
        }
    }
    let measured = (tube_sum / tube_n as f64 - bg_sum / bg_n as f64) as f32;
    if measured < spec.contrast_margin {
        return Err(PhantomError::LowContrast {
            measured,
            required: spec.contrast_margin,
        });
    }

    let volume = FrustumVolume::new(
        data,
        spec.radial_step_mm,
        spec.azimuth_step_deg,
        spec.elevation_step_deg,
        spec.intensity_max,
    )?;
    Ok(Phantom {
        volume,
        ground_truth,
        loose_bbox,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other}")),
        }
    }
}

pub struct DatasetItem {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub phantom: Phantom,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Per-item seed derived from the master seed and the item index alone.
pub fn item_seed(master_seed: u64, index: usize) -> u64 {
    splitmix64(master_seed ^ splitmix64(index as u64))
}

fn jittered_spec(base: &PhantomSpec, seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = base.clone();
    spec.rng_seed = splitmix64(seed);
    for p in &mut spec.control_points {
        p[0] = (p[0] + rng.gen_range(-4.0..4.0)).clamp(2.0, base.shape.0 as f32 - 3.0);
        p[1] = (p[1] + rng.gen_range(-2.5..2.5)).clamp(2.0, base.shape.1 as f32 - 3.0);
        p[2] = (p[2] + rng.gen_range(-2.5..2.5)).clamp(2.0, base.shape.2 as f32 - 3.0);
    }
    spec.tube_intensity_mean += rng.gen_range(-12.0..12.0);
    spec.background_base += rng.gen_range(-6.0..6.0);
    spec.tissue_structures = rng.gen_range(1..=base.tissue_structures.max(1));
    spec
}

/// Generate `n_train + n_val + n_test` jittered phantoms with disjoint,
/// index-derived seeds. Items are independent, so generation runs in
/// parallel; ordering and content depend only on (base, master_seed).
pub fn generate_dataset(
    base: &PhantomSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    master_seed: u64,
) -> Result<Vec<DatasetItem>, PhantomError> {
    let count = n_train + n_val + n_test;
    if count == 0 {
        return Err(PhantomError::BadSpec("empty dataset".into()));
    }
    let specs: Vec<(usize, u64, PhantomSpec)> = (0..count)
        .map(|i| {
            let seed = item_seed(master_seed, i);
            (i, seed, jittered_spec(base, seed))
        })
        .collect();
    let phantoms: Vec<Result<Phantom, PhantomError>> = specs
        .par_iter()
        .map(|(_, _, spec)| generate_phantom(spec))
        .collect();
    let mut items = Vec::with_capacity(count);
    for ((i, seed, _), ph) in specs.into_iter().zip(phantoms) {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        items.push(DatasetItem {
            id: format!("phantom_{i:03}"),
            split,
            seed,
            phantom: ph?,
        });
    }
    Ok(items)
}

/// One line per item plus a small header; round-trips through
/// [`parse_dataset_manifest`].
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub bbox: BoundingBox3,
}

pub fn render_dataset_manifest(master_seed: u64, entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    out.push_str("# phantom dataset manifest\n");
    out.push_str(&format!("master_seed: {master_seed}\n"));
    out.push_str(&format!("count: {}\n", entries.len()));
    for e in entries {
        out.push_str(&format!(
            "item id={} split={} seed={} vol={} mask={} bbox={},{},{},{},{},{}\n",
            e.id,
            e.split,
            e.seed,
            e.volume.display(),
            e.mask.display(),
            e.bbox.start[0],
            e.bbox.start[1],
            e.bbox.start[2],
            e.bbox.end[0],
            e.bbox.end[1],
            e.bbox.end[2],
        ));
    }
    out
}

pub fn parse_dataset_manifest(text: &str) -> Result<(u64, Vec<ManifestEntry>), PhantomError> {
    let mut master_seed = 0u64;
    let mut entries = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("master_seed:") {
            master_seed = rest
                .trim()
                .parse()
                .map_err(|_| PhantomError::Manifest(format!("bad master_seed line: {line}")))?;
            continue;
        }
        if line.starts_with("count:") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("item ") {
            let mut id = None;
            let mut split = None;
            let mut seed = None;
            let mut vol = None;
            let mut mask = None;
            let mut bbox = None;
            for field in rest.split_whitespace() {
                let (k, v) = field
                    .split_once('=')
                    .ok_or_else(|| PhantomError::Manifest(format!("bad field {field}")))?;
                match k {
                    "id" => id = Some(v.to_string()),
                    "split" => split = Some(v.parse::<Split>().map_err(PhantomError::Manifest)?),
                    "seed" => {
                        seed = Some(
                            v.parse::<u64>()
                                .map_err(|_| PhantomError::Manifest(format!("bad seed {v}")))?,
                        )
                    }
                    "vol" => vol = Some(PathBuf::from(v)),
                    "mask" => mask = Some(PathBuf::from(v)),
                    "bbox" => {
                        let nums: Vec<u32> = v
                            .split(',')
                            .map(|t| t.parse::<u32>())
                            .collect::<Result<_, _>>()
                            .map_err(|_| PhantomError::Manifest(format!("bad bbox {v}")))?;
                        if nums.len() != 6 {
                            return Err(PhantomError::Manifest(format!("bad bbox {v}")));
                        }
                        bbox = Some(BoundingBox3 {
                            start: [nums[0], nums[1], nums[2]],
                            end: [nums[3], nums[4], nums[5]],
                        });
                    }
                    other => return Err(PhantomError::Manifest(format!("unknown field {other}"))),
                }
            }
            entries.push(ManifestEntry {
                id: id.ok_or_else(|| PhantomError::Manifest("missing id".into()))?,
                split: split.ok_or_else(|| PhantomError::Manifest("missing split".into()))?,
                seed: seed.ok_or_else(|| PhantomError::Manifest("missing seed".into()))?,
                volume: vol.ok_or_else(|| PhantomError::Manifest("missing vol".into()))?,
                mask: mask.ok_or_else(|| PhantomError::Manifest("missing mask".into()))?,
                bbox: bbox.ok_or_else(|| PhantomError::Manifest("missing bbox".into()))?,
            });
        }
    }
    Ok((master_seed, entries))
}
