//! Core dense 3D volume types and bit-exact binary file I/O.
//!
//! Axis order is fixed as (radial/depth, azimuth, elevation) for frustum
//! volumes and (x, y, z) for Cartesian volumes. All intensities are stored
//! as `f32`; the nominal maximum is carried in metadata instead of being
//! hard-coded to 255.
//!
//! The binary container is a 64-byte header (magic, dims, steps, intensity
//! max, zero padding) followed by a row-major payload with the last axis
//! fastest: `f32` little-endian for scalar volumes, one byte per voxel for
//! masks. An optional `key: value` text sidecar can carry provenance; the
//! binary header is authoritative.

use ndarray::Array3;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

pub const MAGIC_FRUSTUM: [u8; 4] = *b"FRV1";
pub const MAGIC_CARTESIAN: [u8; 4] = *b"CRV1";
pub const MAGIC_MASK: [u8; 4] = *b"MSK1";
pub const HEADER_LEN: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("bad magic tag {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trailing bytes after payload: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: u64, actual: u64 },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("value {value} at flat index {index} outside [0, {max}]")]
    OutOfRange { index: usize, value: f32, max: f32 },
    #[error("mask byte {value} at flat index {index} is not 0 or 1")]
    BadMaskValue { index: usize, value: u8 },
    #[error("invalid dimensions {0:?}: every axis must be >= 1")]
    InvalidDims([u32; 3]),
    #[error("invalid step/spacing {0}: must be > 0 and finite")]
    InvalidStep(f32),
    #[error("invalid intensity_max {0}: must be > 0 and finite")]
    InvalidIntensityMax(f32),
    #[error("dimension product overflows")]
    DimOverflow,
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Ultrasound volume on the native beam grid, axes (radial, azimuth, elevation).
#[derive(Debug, Clone, PartialEq)]
pub struct FrustumVolume {
    pub data: Array3<f32>,
    pub radial_step_mm: f32,
    pub azimuth_step_deg: f32,
    pub elevation_step_deg: f32,
    pub intensity_max: f32,
}

/// Scan-converted volume on a regular Euclidean grid, axes (x, y, z).
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianVolume {
    pub data: Array3<f32>,
    pub spacing_mm: (f32, f32, f32),
    pub intensity_max: f32,
}

/// Binary voxel labels; shape matches the volume it annotates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    pub data: Array3<u8>,
}

/// Axis-aligned box, `start` inclusive, `end` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox3 {
    pub start: [u32; 3],
    pub end: [u32; 3],
}

impl fmt::Display for BoundingBox3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{},{})x[{},{})x[{},{})",
            self.start[0], self.end[0], self.start[1], self.end[1], self.start[2], self.end[2]
        )
    }
}

impl BoundingBox3 {
    pub fn new(start: [u32; 3], end: [u32; 3]) -> Self {
        assert!(
            start.iter().zip(&end).all(|(s, e)| s < e),
            "bounding box start must be componentwise below end: {start:?} {end:?}"
        );
        Self { start, end }
    }

    pub fn size(&self) -> [u32; 3] {
        [
            self.end[0] - self.start[0],
            self.end[1] - self.start[1],
            self.end[2] - self.start[2],
        ]
    }

    pub fn num_voxels(&self) -> u64 {
        self.size().iter().map(|&s| s as u64).product()
    }

    pub fn contains(&self, p: [u32; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.start[a] && p[a] < self.end[a])
    }

    pub fn fits_in(&self, shape: (usize, usize, usize)) -> bool {
        let dims = [shape.0 as u32, shape.1 as u32, shape.2 as u32];
        (0..3).all(|a| self.end[a] <= dims[a])
    }

    pub fn intersects(&self, other: &BoundingBox3) -> bool {
        (0..3).all(|a| self.start[a] < other.end[a] && other.start[a] < self.end[a])
    }

    /// Grow by `margin` voxels on every side, clamped to `shape`.
    pub fn dilate_clamped(&self, margin: u32, shape: (usize, usize, usize)) -> BoundingBox3 {
        let dims = [shape.0 as u32, shape.1 as u32, shape.2 as u32];
        let mut start = [0u32; 3];
        let mut end = [0u32; 3];
        for a in 0..3 {
            start[a] = self.start[a].saturating_sub(margin);
            end[a] = (self.end[a] + margin).min(dims[a]);
        }
        BoundingBox3 { start, end }
    }

    /// Ranges usable with ndarray slicing.
    pub fn ranges(&self) -> [std::ops::Range<usize>; 3] {
        [
            self.start[0] as usize..self.end[0] as usize,
            self.start[1] as usize..self.end[1] as usize,
            self.start[2] as usize..self.end[2] as usize,
        ]
    }
}

fn validate_scalar(
    data: &Array3<f32>,
    steps: [f32; 3],
    intensity_max: f32,
) -> Result<(), VolumeError> {
    let (d, a, e) = data.dim();
    if d == 0 || a == 0 || e == 0 {
        return Err(VolumeError::InvalidDims([d as u32, a as u32, e as u32]));
    }
    for &s in &steps {
        if !(s.is_finite() && s > 0.0) {
            return Err(VolumeError::InvalidStep(s));
        }
    }
    if !(intensity_max.is_finite() && intensity_max > 0.0) {
        return Err(VolumeError::InvalidIntensityMax(intensity_max));
    }
    for (i, &v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(VolumeError::NonFinite(i));
        }
        if v < 0.0 || v > intensity_max {
            return Err(VolumeError::OutOfRange {
                index: i,
                value: v,
                max: intensity_max,
            });
        }
    }
    Ok(())
}

impl FrustumVolume {
    pub fn new(
        data: Array3<f32>,
        radial_step_mm: f32,
        azimuth_step_deg: f32,
        elevation_step_deg: f32,
        intensity_max: f32,
    ) -> Result<Self, VolumeError> {
        validate_scalar(
            &data,
            [radial_step_mm, azimuth_step_deg, elevation_step_deg],
            intensity_max,
        )?;
        Ok(Self {
            data,
            radial_step_mm,
            azimuth_step_deg,
            elevation_step_deg,
            intensity_max,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn save(&self, path: &Path) -> Result<(), VolumeError> {
        save_scalar(
            path,
            MAGIC_FRUSTUM,
            &self.data,
            [
                self.radial_step_mm,
                self.azimuth_step_deg,
                self.elevation_step_deg,
            ],
            self.intensity_max,
        )
    }
}

impl CartesianVolume {
    pub fn new(
        data: Array3<f32>,
        spacing_mm: (f32, f32, f32),
        intensity_max: f32,
    ) -> Result<Self, VolumeError> {
        validate_scalar(
            &data,
            [spacing_mm.0, spacing_mm.1, spacing_mm.2],
            intensity_max,
        )?;
        Ok(Self {
            data,
            spacing_mm,
            intensity_max,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn save(&self, path: &Path) -> Result<(), VolumeError> {
        save_scalar(
            path,
            MAGIC_CARTESIAN,
            &self.data,
            [self.spacing_mm.0, self.spacing_mm.1, self.spacing_mm.2],
            self.intensity_max,
        )
    }
}

impl MaskVolume {
    pub fn new(data: Array3<u8>) -> Result<Self, VolumeError> {
        let (d, a, e) = data.dim();
        if d == 0 || a == 0 || e == 0 {
            return Err(VolumeError::InvalidDims([d as u32, a as u32, e as u32]));
        }
        for (i, &v) in data.iter().enumerate() {
            if v > 1 {
                return Err(VolumeError::BadMaskValue { index: i, value: v });
            }
        }
        Ok(Self { data })
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            data: Array3::zeros(shape),
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn count_ones(&self) -> u64 {
        self.data.iter().map(|&v| v as u64).sum()
    }

    /// Tight bounding box of the foreground, or None for an empty mask.
    pub fn tight_bbox(&self) -> Option<BoundingBox3> {
        let mut lo = [u32::MAX; 3];
        let mut hi = [0u32; 3];
        let mut any = false;
        for ((i, j, k), &v) in self.data.indexed_iter() {
            if v != 0 {
                any = true;
                let p = [i as u32, j as u32, k as u32];
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a] + 1);
                }
            }
        }
        any.then(|| BoundingBox3 { start: lo, end: hi })
    }

    pub fn save(&self, path: &Path) -> Result<(), VolumeError> {
        let dims = self.data.dim();
        let mut bytes = Vec::with_capacity(HEADER_LEN + self.data.len());
        bytes.extend_from_slice(&header_bytes(
            MAGIC_MASK,
            [dims.0 as u32, dims.1 as u32, dims.2 as u32],
            [0.0, 0.0, 0.0],
            1.0,
        ));
        let standard = self.data.as_standard_layout();
        bytes.extend(standard.iter().copied());
        atomic_write(path, &bytes)?;
        Ok(())
    }
}

/// Scale intensities into [0, 1] by the volume's nominal maximum.
pub fn normalize_01(data: &Array3<f32>, intensity_max: f32) -> Array3<f32> {
    assert!(intensity_max > 0.0, "intensity_max must be positive");
    data.mapv(|v| v / intensity_max)
}

fn header_bytes(magic: [u8; 4], dims: [u32; 3], steps: [f32; 3], intensity_max: f32) -> [u8; 64] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&magic);
    for (a, &d) in dims.iter().enumerate() {
        h[4 + 4 * a..8 + 4 * a].copy_from_slice(&d.to_le_bytes());
    }
    for (a, &s) in steps.iter().enumerate() {
        h[16 + 4 * a..20 + 4 * a].copy_from_slice(&s.to_le_bytes());
    }
    h[28..32].copy_from_slice(&intensity_max.to_le_bytes());
    h
}

struct Header {
    magic: [u8; 4],
    dims: [u32; 3],
    steps: [f32; 3],
    intensity_max: f32,
}

fn parse_header(h: &[u8; 64]) -> Header {
    let mut magic = [0u8; 4];
    magic.copy_from_slice(&h[0..4]);
    let mut dims = [0u32; 3];
    let mut steps = [0f32; 3];
    for a in 0..3 {
        dims[a] = u32::from_le_bytes(h[4 + 4 * a..8 + 4 * a].try_into().unwrap());
        steps[a] = f32::from_le_bytes(h[16 + 4 * a..20 + 4 * a].try_into().unwrap());
    }
    let intensity_max = f32::from_le_bytes(h[28..32].try_into().unwrap());
    Header {
        magic,
        dims,
        steps,
        intensity_max,
    }
}

fn save_scalar(
    path: &Path,
    magic: [u8; 4],
    data: &Array3<f32>,
    steps: [f32; 3],
    intensity_max: f32,
) -> Result<(), VolumeError> {
    validate_scalar(data, steps, intensity_max)?;
    let dims = data.dim();
    let mut bytes = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    bytes.extend_from_slice(&header_bytes(
        magic,
        [dims.0 as u32, dims.1 as u32, dims.2 as u32],
        steps,
        intensity_max,
    ));
    let standard = data.as_standard_layout();
    for &v in standard.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &bytes)?;
    Ok(())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.flush()
}

/// Any of the three container kinds, discriminated by magic tag.
#[derive(Debug, Clone)]
pub enum AnyVolume {
    Frustum(FrustumVolume),
    Cartesian(CartesianVolume),
    Mask(MaskVolume),
}

fn checked_voxels(dims: [u32; 3]) -> Result<usize, VolumeError> {
    if dims.iter().any(|&d| d == 0) {
        return Err(VolumeError::InvalidDims(dims));
    }
    (dims[0] as usize)
        .checked_mul(dims[1] as usize)
        .and_then(|p| p.checked_mul(dims[2] as usize))
        .ok_or(VolumeError::DimOverflow)
}

/// Parse a container from raw bytes. Payload length is checked against the
/// header before anything is allocated.
pub fn parse_volume_bytes(bytes: &[u8]) -> Result<AnyVolume, VolumeError> {
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let header: &[u8; 64] = bytes[..HEADER_LEN].try_into().unwrap();
    let h = parse_header(header);
    match h.magic {
        MAGIC_FRUSTUM | MAGIC_CARTESIAN => {
            let n = checked_voxels(h.dims)?;
            let expected = HEADER_LEN as u64 + 4 * n as u64;
            let actual = bytes.len() as u64;
            if actual < expected {
                return Err(VolumeError::Truncated { expected, actual });
            }
            if actual > expected {
                return Err(VolumeError::TrailingBytes { expected, actual });
            }
            let payload = &bytes[HEADER_LEN..];
            let mut raw = Vec::with_capacity(n);
            for c in payload.chunks_exact(4) {
                raw.push(f32::from_le_bytes(c.try_into().unwrap()));
            }
            let data = Array3::from_shape_vec(
                (h.dims[0] as usize, h.dims[1] as usize, h.dims[2] as usize),
                raw,
            )
            .expect("length checked above");
            if h.magic == MAGIC_FRUSTUM {
                Ok(AnyVolume::Frustum(FrustumVolume::new(
                    data,
                    h.steps[0],
                    h.steps[1],
                    h.steps[2],
                    h.intensity_max,
                )?))
            } else {
                Ok(AnyVolume::Cartesian(CartesianVolume::new(
                    data,
                    (h.steps[0], h.steps[1], h.steps[2]),
                    h.intensity_max,
                )?))
            }
        }
        MAGIC_MASK => {
            let n = checked_voxels(h.dims)?;
            let expected = HEADER_LEN as u64 + n as u64;
            let actual = bytes.len() as u64;
            if actual < expected {
                return Err(VolumeError::Truncated { expected, actual });
            }
            if actual > expected {
                return Err(VolumeError::TrailingBytes { expected, actual });
            }
            let data = Array3::from_shape_vec(
                (h.dims[0] as usize, h.dims[1] as usize, h.dims[2] as usize),
                bytes[HEADER_LEN..].to_vec(),
            )
            .expect("length checked above");
            Ok(AnyVolume::Mask(MaskVolume::new(data)?))
        }
        other => Err(VolumeError::BadMagic(other)),
    }
}

pub fn load_any(path: &Path) -> Result<AnyVolume, VolumeError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_volume_bytes(&bytes)
}

pub fn load_frustum(path: &Path) -> Result<FrustumVolume, VolumeError> {
    match load_any(path)? {
        AnyVolume::Frustum(v) => Ok(v),
        AnyVolume::Cartesian(_) => Err(VolumeError::BadMagic(MAGIC_CARTESIAN)),
        AnyVolume::Mask(_) => Err(VolumeError::BadMagic(MAGIC_MASK)),
    }
}

pub fn load_cartesian(path: &Path) -> Result<CartesianVolume, VolumeError> {
    match load_any(path)? {
        AnyVolume::Cartesian(v) => Ok(v),
        AnyVolume::Frustum(_) => Err(VolumeError::BadMagic(MAGIC_FRUSTUM)),
        AnyVolume::Mask(_) => Err(VolumeError::BadMagic(MAGIC_MASK)),
    }
}

pub fn load_mask(path: &Path) -> Result<MaskVolume, VolumeError> {
    match load_any(path)? {
        AnyVolume::Mask(v) => Ok(v),
        AnyVolume::Frustum(_) => Err(VolumeError::BadMagic(MAGIC_FRUSTUM)),
        AnyVolume::Cartesian(_) => Err(VolumeError::BadMagic(MAGIC_CARTESIAN)),
    }
}

/// Write a `key: value` provenance sidecar next to a volume file.
pub fn write_sidecar(path: &Path, pairs: &[(String, String)]) -> io::Result<()> {
    let mut text = String::new();
    for (k, v) in pairs {
        text.push_str(k);
        text.push_str(": ");
        text.push_str(v);
        text.push('\n');
    }
    fs::write(path, text)
}

/// Parse a `key: value` sidecar. Lines without a colon are ignored.
pub fn parse_sidecar(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|line| {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                return None;
            }
            line.split_once(':')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}
