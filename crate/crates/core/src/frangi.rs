//! Multiscale 3D line filtering (Frangi vesselness).
//!
//! The filter smooths the volume with a Gaussian at each scale, builds the
//! scale-normalized Hessian (γ=2 convention, multiply by σ²) from central
//! differences, solves the symmetric 3x3 eigenproblem in closed form and
//! maps the eigenvalues, ordered |λ1| <= |λ2| <= |λ3|, to the tubularity
//! measure. The per-voxel response is the maximum over scales.
//!
//! Filtering happens in index space; frustum voxels are treated as
//! isotropic even though their physical units are mixed mm/degrees. That is
//! a documented limitation, not an accident.

use ndarray::{Array3, Zip};

/// Parameters of the vesselness measure.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VesselnessParams {
    /// Gaussian scales in voxels.
    pub scales: Vec<f32>,
    pub alpha: f32,
    pub beta: f32,
    pub c: CParam,
    /// Bright tubes on a dark background (requires λ2, λ3 <= 0).
    pub bright_on_dark: bool,
}

/// Structureness sensitivity: fixed, or half of the per-scale maximum
/// Hessian Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum CParam {
    Auto,
    Fixed(f32),
}

impl Default for VesselnessParams {
    fn default() -> Self {
        Self {
            scales: vec![2.0, 3.0],
            alpha: 0.5,
            beta: 0.5,
            c: CParam::Auto,
            bright_on_dark: true,
        }
    }
}

impl VesselnessParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.scales.is_empty() {
            return Err("scales must be non-empty".into());
        }
        if self.scales.iter().any(|&s| !(s > 0.0)) {
            return Err("scales must be positive".into());
        }
        if !(self.alpha > 0.0) || !(self.beta > 0.0) {
            return Err("alpha and beta must be positive".into());
        }
        if let CParam::Fixed(c) = self.c {
            if !(c > 0.0) {
                return Err("fixed c must be positive".into());
            }
        }
        Ok(())
    }
}

/// Mirror an out-of-range index back into [0, n), pivoting on the edge
/// sample (reflect without repeating the border voxel).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn gaussian_kernel(sigma: f32) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / s2).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for w in &mut k {
        *w /= sum;
    }
    k
}

/// Separable Gaussian convolution, kernel truncated at 3σ, reflective
/// boundary handling. Kernel weights sum to 1, so constants are preserved.
pub fn gaussian_smooth(vol: &Array3<f32>, sigma: f32) -> Array3<f32> {
    assert!(sigma > 0.0, "sigma must be positive");
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let mut cur = vol.clone();
    for axis in 0..3usize {
        let dims = cur.dim();
        let n = [dims.0, dims.1, dims.2][axis];
        let mut next = Array3::<f32>::zeros(dims);
        let src = &cur;
        Zip::indexed(&mut next).par_for_each(|(i, j, k), out| {
            let pos = [i as isize, j as isize, k as isize];
            let mut acc = 0.0f64;
            for (t, &w) in kernel.iter().enumerate() {
                let off = t as isize - radius;
                let mut p = pos;
                p[axis] = reflect(pos[axis] + off, n) as isize;
                acc += w * src[(p[0] as usize, p[1] as usize, p[2] as usize)] as f64;
            }
            *out = acc as f32;
        });
        cur = next;
    }
    cur
}

/// The six unique second derivatives of a volume via central differences
/// with reflective boundaries, ordered (xx, yy, zz, xy, xz, yz).
fn hessian_components(v: &Array3<f32>) -> [Array3<f32>; 6] {
    let dims = v.dim();
    let n = [dims.0, dims.1, dims.2];
    let at = |p: [isize; 3]| -> f32 {
        v[(
            reflect(p[0], n[0]),
            reflect(p[1], n[1]),
            reflect(p[2], n[2]),
        )]
    };
    let mut out: [Array3<f32>; 6] = std::array::from_fn(|_| Array3::zeros(dims));
    let (diag, offdiag) = out.split_at_mut(3);
    let (xx, rest) = diag.split_at_mut(1);
    let (yy, zz) = rest.split_at_mut(1);
    Zip::indexed(&mut xx[0])
        .and(&mut yy[0])
        .and(&mut zz[0])
        .par_for_each(|(i, j, k), xx, yy, zz| {
            let (i, j, k) = (i as isize, j as isize, k as isize);
            let c = at([i, j, k]);
            *xx = at([i + 1, j, k]) - 2.0 * c + at([i - 1, j, k]);
            *yy = at([i, j + 1, k]) - 2.0 * c + at([i, j - 1, k]);
            *zz = at([i, j, k + 1]) - 2.0 * c + at([i, j, k - 1]);
        });
    let (xy, rest) = offdiag.split_at_mut(1);
    let (xz, yz) = rest.split_at_mut(1);
    Zip::indexed(&mut xy[0])
        .and(&mut xz[0])
        .and(&mut yz[0])
        .par_for_each(|(i, j, k), xy, xz, yz| {
            let (i, j, k) = (i as isize, j as isize, k as isize);
            *xy = 0.25
                * (at([i + 1, j + 1, k]) - at([i + 1, j - 1, k]) - at([i - 1, j + 1, k])
                    + at([i - 1, j - 1, k]));
            *xz = 0.25
                * (at([i + 1, j, k + 1]) - at([i + 1, j, k - 1]) - at([i - 1, j, k + 1])
                    + at([i - 1, j, k - 1]));
            *yz = 0.25
                * (at([i, j + 1, k + 1]) - at([i, j + 1, k - 1]) - at([i, j - 1, k + 1])
                    + at([i, j - 1, k - 1]));
        });
    out
}

/// Eigenvalues of a symmetric 3x3 matrix, closed form (trigonometric
/// method), returned ordered by ascending magnitude.
pub fn eigenvalues_sym3(
    a11: f64,
    a22: f64,
    a33: f64,
    a12: f64,
    a13: f64,
    a23: f64,
) -> [f64; 3] {
    let p1 = a12 * a12 + a13 * a13 + a23 * a23;
    let mut eig = if p1 == 0.0 {
        [a11, a22, a33]
    } else {
        let q = (a11 + a22 + a33) / 3.0;
        let p2 = (a11 - q).powi(2) + (a22 - q).powi(2) + (a33 - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        if p == 0.0 {
            [q, q, q]
        } else {
            let b11 = (a11 - q) / p;
            let b22 = (a22 - q) / p;
            let b33 = (a33 - q) / p;
            let b12 = a12 / p;
            let b13 = a13 / p;
            let b23 = a23 / p;
            let detb = b11 * (b22 * b33 - b23 * b23) - b12 * (b12 * b33 - b23 * b13)
                + b13 * (b12 * b23 - b22 * b13);
            let r = (detb / 2.0).clamp(-1.0, 1.0);
            let phi = r.acos() / 3.0;
            let e1 = q + 2.0 * p * phi.cos();
            let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
            let e2 = 3.0 * q - e1 - e3;
            [e1, e2, e3]
        }
    };
    eig.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    eig
}

/// Per-voxel ordered eigenvalues of the σ²-normalized Hessian of the
/// σ-smoothed volume.
pub fn hessian_eigen(vol: &Array3<f32>, sigma: f32) -> [Array3<f32>; 3] {
    assert!(sigma > 0.0);
    let smoothed = gaussian_smooth(vol, sigma);
    let h = hessian_components(&smoothed);
    let norm = (sigma * sigma) as f64;
    let dims = vol.dim();
    let mut out: [Array3<f32>; 3] = std::array::from_fn(|_| Array3::zeros(dims));
    let (l1, rest) = out.split_at_mut(1);
    let (l2, l3) = rest.split_at_mut(1);
    Zip::indexed(&mut l1[0])
        .and(&mut l2[0])
        .and(&mut l3[0])
        .par_for_each(|(i, j, k), l1, l2, l3| {
            let e = eigenvalues_sym3(
                h[0][(i, j, k)] as f64 * norm,
                h[1][(i, j, k)] as f64 * norm,
                h[2][(i, j, k)] as f64 * norm,
                h[3][(i, j, k)] as f64 * norm,
                h[4][(i, j, k)] as f64 * norm,
                h[5][(i, j, k)] as f64 * norm,
            );
            *l1 = e[0] as f32;
            *l2 = e[1] as f32;
            *l3 = e[2] as f32;
        });
    out
}

fn vesselness_single_scale(vol: &Array3<f32>, sigma: f32, params: &VesselnessParams) -> Array3<f32> {
    let [l1, l2, l3] = hessian_eigen(vol, sigma);
    let c = match params.c {
        CParam::Fixed(c) => c as f64,
        CParam::Auto => {
            // half of the maximum Hessian Frobenius norm at this scale
            let mut max_s = 0.0f64;
            for ((a, b), c3) in l1.iter().zip(l2.iter()).zip(l3.iter()) {
                let s = ((*a as f64).powi(2) + (*b as f64).powi(2) + (*c3 as f64).powi(2)).sqrt();
                if s > max_s {
                    max_s = s;
                }
            }
            max_s / 2.0
        }
    };
    let two_a2 = 2.0 * (params.alpha as f64).powi(2);
    let two_b2 = 2.0 * (params.beta as f64).powi(2);
    let two_c2 = 2.0 * c * c;
    let mut out = Array3::<f32>::zeros(vol.dim());
    Zip::from(&mut out)
        .and(&l1)
        .and(&l2)
        .and(&l3)
        .par_for_each(|out, &l1, &l2, &l3| {
            let (l1, l2, l3) = (l1 as f64, l2 as f64, l3 as f64);
            let (l2s, l3s) = if params.bright_on_dark {
                (l2, l3)
            } else {
                (-l2, -l3)
            };
            if l2s > 0.0 || l3s > 0.0 || l3.abs() < 1e-9 || two_c2 == 0.0 {
                *out = 0.0;
                return;
            }
            const EPS: f64 = 1e-12;
            let ra = l2.abs() / (l3.abs() + EPS);
            let rb = l1.abs() / ((l2 * l3).abs() + EPS).sqrt();
            let s2 = l1 * l1 + l2 * l2 + l3 * l3;
            let v = (1.0 - (-ra * ra / two_a2).exp())
                * (-rb * rb / two_b2).exp()
                * (1.0 - (-s2 / two_c2).exp());
            *out = v.clamp(0.0, 1.0) as f32;
        });
    out
}

/// Frangi vesselness response in [0, 1], per-voxel maximum over scales.
pub fn vesselness(vol: &Array3<f32>, params: &VesselnessParams) -> Array3<f32> {
    params.validate().expect("invalid vesselness params");
    let mut best: Option<Array3<f32>> = None;
    for &sigma in &params.scales {
        let resp = vesselness_single_scale(vol, sigma, params);
        best = Some(match best {
            None => resp,
            Some(mut acc) => {
                Zip::from(&mut acc).and(&resp).for_each(|a, &r| {
                    if r > *a {
                        *a = r;
                    }
                });
                acc
            }
        });
    }
    best.unwrap()
}
