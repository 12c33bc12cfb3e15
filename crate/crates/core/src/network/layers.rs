//! Primitive differentiable layers over (C, D, H, W) feature tensors.
//!
//! Every layer exposes `forward(&self, x) -> (y, Cache)` and
//! `backward(&mut self, &Cache, gy) -> gx`; backward accumulates parameter
//! gradients into the layer so one optimizer step can consume several
//! forward passes (region crops, multiple ROIs). Layers are generic over
//! the float type: training runs in f32, the finite-difference harnesses
//! instantiate f64.

use ndarray::{s, Array1, Array2, Array4, Array5, Axis, NdFloat, Zip};
use num_traits::FromPrimitive;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Float scalar usable in network math.
pub trait Scalar: NdFloat + FromPrimitive + Send + Sync + std::iter::Sum {}
impl Scalar for f32 {}
impl Scalar for f64 {}

pub fn from_f64<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("f64 convertible")
}

/// 3D convolution with cubic kernel, symmetric zero padding and uniform
/// stride. Output spatial size is `ceil(in/stride)` when `pad = k/2`.
pub struct Conv3d<F: Scalar> {
    pub w: Array5<F>, // (out_c, in_c, k, k, k)
    pub b: Array1<F>,
    pub gw: Array5<F>,
    pub gb: Array1<F>,
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv3dCache<F: Scalar> {
    xp: Array4<F>, // padded input
    out_dims: [usize; 3],
}

fn out_len(n: usize, k: usize, pad: usize, stride: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

impl<F: Scalar> Conv3d<F> {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * k * k * k) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let w = Array5::from_shape_fn((out_c, in_c, k, k, k), |_| {
            from_f64(rng.gen_range(-limit..limit))
        });
        Self {
            gw: Array5::zeros(w.dim()),
            w,
            b: Array1::zeros(out_c),
            gb: Array1::zeros(out_c),
            stride,
            pad: k / 2,
        }
    }

    pub fn kernel(&self) -> usize {
        self.w.dim().2
    }

    pub fn out_dims(&self, in_dims: [usize; 3]) -> [usize; 3] {
        let k = self.kernel();
        [
            out_len(in_dims[0], k, self.pad, self.stride),
            out_len(in_dims[1], k, self.pad, self.stride),
            out_len(in_dims[2], k, self.pad, self.stride),
        ]
    }

    /// Lowered patch matrix: row (ic·k³ + offset) holds the input value
    /// under that kernel tap for every output voxel, so the convolution is
    /// one GEMM against the reshaped weights.
    fn im2col(&self, xp: &Array4<F>, out_dims: [usize; 3]) -> Array2<F> {
        let (in_c, _, _, _) = xp.dim();
        let k = self.kernel();
        let stride = self.stride;
        let n_out = out_dims[0] * out_dims[1] * out_dims[2];
        let mut col = Array2::<F>::zeros((in_c * k * k * k, n_out));
        let end = |o: usize, n: usize| o + (n - 1) * stride + 1;
        col.axis_chunks_iter_mut(Axis(0), k * k * k)
            .into_par_iter()
            .enumerate()
            .for_each(|(ic, mut rows)| {
                let mut r = 0;
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let view = xp.slice(s![
                                ic,
                                kz..end(kz, out_dims[0]);stride,
                                ky..end(ky, out_dims[1]);stride,
                                kx..end(kx, out_dims[2]);stride
                            ]);
                            let mut row = rows.row_mut(r);
                            let dst = row.as_slice_mut().expect("row contiguous");
                            for (d, &v) in dst.iter_mut().zip(view.iter()) {
                                *d = v;
                            }
                            r += 1;
                        }
                    }
                }
            });
        col
    }

    fn weights2(&self) -> Array2<F> {
        let (out_c, in_c, k, _, _) = self.w.dim();
        self.w
            .view()
            .into_shape_with_order((out_c, in_c * k * k * k))
            .expect("weights are standard layout")
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, Conv3dCache<F>) {
        let (in_c, d, h, w_dim) = x.dim();
        debug_assert_eq!(in_c, self.w.dim().1, "input channel mismatch");
        let pad = self.pad;
        let out_dims = self.out_dims([d, h, w_dim]);
        let mut xp = Array4::<F>::zeros((in_c, d + 2 * pad, h + 2 * pad, w_dim + 2 * pad));
        xp.slice_mut(s![.., pad..pad + d, pad..pad + h, pad..pad + w_dim])
            .assign(x);

        let out_c = self.w.dim().0;
        let col = self.im2col(&xp, out_dims);
        let y2 = self.weights2().dot(&col);
        let mut y = y2
            .into_shape_with_order((out_c, out_dims[0], out_dims[1], out_dims[2]))
            .expect("gemm output standard layout");
        for oc in 0..out_c {
            let bias = self.b[oc];
            y.index_axis_mut(Axis(0), oc).mapv_inplace(|v| v + bias);
        }
        (y, Conv3dCache { xp, out_dims })
    }

    pub fn backward(&mut self, cache: &Conv3dCache<F>, gy: &Array4<F>) -> Array4<F> {
        let (out_c, in_c, k, _, _) = self.w.dim();
        let stride = self.stride;
        let pad = self.pad;
        let od = cache.out_dims;
        debug_assert_eq!(gy.dim(), (out_c, od[0], od[1], od[2]));
        let n_out = od[0] * od[1] * od[2];
        let gy2 = gy
            .view()
            .into_shape_with_order((out_c, n_out))
            .expect("gy standard layout");

        // dW = gy · colᵀ  (col rebuilt from the cached padded input)
        let col = self.im2col(&cache.xp, od);
        let gw2 = gy2.dot(&col.t());
        {
            let mut gw_flat = self
                .gw
                .view_mut()
                .into_shape_with_order((out_c, in_c * k * k * k))
                .expect("gw standard layout");
            gw_flat.zip_mut_with(&gw2, |d, &s| *d = *d + s);
        }
        for oc in 0..out_c {
            self.gb[oc] = self.gb[oc] + gy.index_axis(Axis(0), oc).sum();
        }

        // dX = col2im(wᵀ · gy)
        let gcol = self.weights2().t().dot(&gy2);
        let xp_dims = cache.xp.dim();
        let mut gxp = Array4::<F>::zeros(xp_dims);
        let end = |o: usize, n: usize| o + (n - 1) * stride + 1;
        gxp.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(ic, mut gslab)| {
                let mut r = ic * k * k * k;
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let row = gcol.row(r);
                            let src = row.as_slice().expect("row contiguous");
                            let mut region = gslab.slice_mut(s![
                                kz..end(kz, od[0]);stride,
                                ky..end(ky, od[1]);stride,
                                kx..end(kx, od[2]);stride
                            ]);
                            for (dst, &g) in region.iter_mut().zip(src.iter()) {
                                *dst = *dst + g;
                            }
                            r += 1;
                        }
                    }
                }
            });
        let (_, d, h, w_dim) = xp_dims;
        gxp.slice(s![
            ..,
            pad..d - pad,
            pad..h - pad,
            pad..w_dim - pad
        ])
        .to_owned()
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(F::zero());
        self.gb.fill(F::zero());
    }
}

/// Group normalization with per-channel affine parameters.
pub struct GroupNorm<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub g_gamma: Array1<F>,
    pub g_beta: Array1<F>,
    pub groups: usize,
    pub eps: f64,
}

pub struct GroupNormCache<F: Scalar> {
    xhat: Array4<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> GroupNorm<F> {
    pub fn new(channels: usize, groups: usize) -> Self {
        assert!(
            channels % groups == 0,
            "channels {channels} must divide into {groups} groups"
        );
        Self {
            gamma: Array1::from_elem(channels, F::one()),
            beta: Array1::zeros(channels),
            g_gamma: Array1::zeros(channels),
            g_beta: Array1::zeros(channels),
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, GroupNormCache<F>) {
        let (c, d, h, w) = x.dim();
        let per = c / self.groups;
        let mut xhat = Array4::<F>::zeros(x.dim());
        let mut inv_std = vec![F::zero(); self.groups];
        for g in 0..self.groups {
            let sl = s![g * per..(g + 1) * per, .., .., ..];
            let xg = x.slice(sl);
            let m = from_f64::<F>((per * d * h * w) as f64);
            let mean = xg.sum() / m;
            let mut var = F::zero();
            xg.for_each(|&v| {
                let dlt = v - mean;
                var = var + dlt * dlt;
            });
            var = var / m;
            let istd = F::one() / (var + from_f64(self.eps)).sqrt();
            inv_std[g] = istd;
            let mut xh = xhat.slice_mut(sl);
            Zip::from(&mut xh).and(&xg).for_each(|o, &v| {
                *o = (v - mean) * istd;
            });
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let gamma = self.gamma[ch];
            let beta = self.beta[ch];
            y.index_axis_mut(Axis(0), ch)
                .mapv_inplace(|v| v * gamma + beta);
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache<F>, gy: &Array4<F>) -> Array4<F> {
        let (c, d, h, w) = gy.dim();
        let per = c / self.groups;
        // affine parameter gradients
        for ch in 0..c {
            let gy_c = gy.index_axis(Axis(0), ch);
            let xh_c = cache.xhat.index_axis(Axis(0), ch);
            let mut gg = F::zero();
            let mut gb = F::zero();
            Zip::from(&gy_c).and(&xh_c).for_each(|&g, &xh| {
                gg = gg + g * xh;
                gb = gb + g;
            });
            self.g_gamma[ch] = self.g_gamma[ch] + gg;
            self.g_beta[ch] = self.g_beta[ch] + gb;
        }
        let mut gx = Array4::<F>::zeros(gy.dim());
        let m = from_f64::<F>((per * d * h * w) as f64);
        for g in 0..self.groups {
            let sl = s![g * per..(g + 1) * per, .., .., ..];
            let gy_g = gy.slice(sl);
            let xh_g = cache.xhat.slice(sl);
            // dxhat = gy * gamma (per channel)
            let mut dxhat = gy_g.to_owned();
            for (local, ch) in (g * per..(g + 1) * per).enumerate() {
                let gamma = self.gamma[ch];
                dxhat
                    .index_axis_mut(Axis(0), local)
                    .mapv_inplace(|v| v * gamma);
            }
            let sum_dxhat = dxhat.sum();
            let mut sum_dxhat_xhat = F::zero();
            Zip::from(&dxhat).and(&xh_g).for_each(|&a, &b| {
                sum_dxhat_xhat = sum_dxhat_xhat + a * b;
            });
            let istd = cache.inv_std[g];
            let mut gx_g = gx.slice_mut(sl);
            Zip::from(&mut gx_g)
                .and(&dxhat)
                .and(&xh_g)
                .for_each(|o, &dxh, &xh| {
                    *o = istd * (dxh - sum_dxhat / m - xh * sum_dxhat_xhat / m);
                });
        }
        gx
    }

    pub fn zero_grad(&mut self) {
        self.g_gamma.fill(F::zero());
        self.g_beta.fill(F::zero());
    }
}

pub struct ReluCache<F: Scalar> {
    mask: Array4<F>,
}

pub fn relu<F: Scalar>(x: &Array4<F>) -> (Array4<F>, ReluCache<F>) {
    let mask = x.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
    let y = x * &mask;
    (y, ReluCache { mask })
}

pub fn relu_backward<F: Scalar>(cache: &ReluCache<F>, gy: &Array4<F>) -> Array4<F> {
    gy * &cache.mask
}

pub struct SigmoidCache<F: Scalar> {
    pub y: Array4<F>,
}

pub fn sigmoid<F: Scalar>(x: &Array4<F>) -> (Array4<F>, SigmoidCache<F>) {
    let y = x.mapv(|v| F::one() / (F::one() + (-v).exp()));
    (y.clone(), SigmoidCache { y })
}

pub fn sigmoid_backward<F: Scalar>(cache: &SigmoidCache<F>, gy: &Array4<F>) -> Array4<F> {
    let mut gx = gy.clone();
    Zip::from(&mut gx).and(&cache.y).for_each(|g, &y| {
        *g = *g * y * (F::one() - y);
    });
    gx
}

/// Fully connected layer on channel vectors.
pub struct Fc<F: Scalar> {
    pub w: Array2<F>, // (out, in)
    pub b: Array1<F>,
    pub gw: Array2<F>,
    pub gb: Array1<F>,
}

pub struct FcCache<F: Scalar> {
    x: Array1<F>,
}

impl<F: Scalar> Fc<F> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| from_f64(rng.gen_range(-limit..limit)));
        Self {
            gw: Array2::zeros(w.dim()),
            w,
            b: Array1::zeros(out_dim),
            gb: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array1<F>) -> (Array1<F>, FcCache<F>) {
        let y = self.w.dot(x) + &self.b;
        (y, FcCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &FcCache<F>, gy: &Array1<F>) -> Array1<F> {
        let (out_dim, in_dim) = self.w.dim();
        for o in 0..out_dim {
            self.gb[o] = self.gb[o] + gy[o];
            for i in 0..in_dim {
                self.gw[(o, i)] = self.gw[(o, i)] + gy[o] * cache.x[i];
            }
        }
        self.w.t().dot(gy)
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(F::zero());
        self.gb.fill(F::zero());
    }
}

/// Global average pooling over a spatial sub-region, one value per channel.
pub struct GapCache {
    pub ranges: [std::ops::Range<usize>; 3],
    pub count: usize,
}

pub fn gap<F: Scalar>(x: &Array4<F>, ranges: [std::ops::Range<usize>; 3]) -> (Array1<F>, GapCache) {
    let c = x.dim().0;
    let count = ranges.iter().map(|r| r.len()).product::<usize>();
    assert!(count > 0, "empty GAP region");
    let mut y = Array1::<F>::zeros(c);
    let denom = from_f64::<F>(count as f64);
    for ch in 0..c {
        let view = x.slice(s![
            ch,
            ranges[0].clone(),
            ranges[1].clone(),
            ranges[2].clone()
        ]);
        y[ch] = view.sum() / denom;
    }
    (y, GapCache { ranges, count })
}

/// Scatter the GAP gradient back: each voxel in the region receives
/// `gy[c] / count`.
pub fn gap_backward_into<F: Scalar>(cache: &GapCache, gy: &Array1<F>, gx: &mut Array4<F>) {
    let denom = from_f64::<F>(cache.count as f64);
    for ch in 0..gx.dim().0 {
        let gv = gy[ch] / denom;
        let mut region = gx.slice_mut(s![
            ch,
            cache.ranges[0].clone(),
            cache.ranges[1].clone(),
            cache.ranges[2].clone()
        ]);
        region.mapv_inplace(|v| v + gv);
    }
}

/// Max pooling with equal kernel and stride; ragged tails are pooled over
/// the clipped window. Used for building stride-4 localization targets and
/// exposed with a gradient for completeness.
pub struct MaxPoolCache {
    pub argmax: Vec<(usize, usize, usize, usize)>,
    pub in_dims: (usize, usize, usize, usize),
    pub out_dims: (usize, usize, usize, usize),
}

pub fn maxpool<F: Scalar>(x: &Array4<F>, size: usize) -> (Array4<F>, MaxPoolCache) {
    let (c, d, h, w) = x.dim();
    let od = d.div_ceil(size);
    let oh = h.div_ceil(size);
    let ow = w.div_ceil(size);
    let mut y = Array4::<F>::zeros((c, od, oh, ow));
    let mut argmax = vec![(0usize, 0usize, 0usize, 0usize); c * od * oh * ow];
    let mut flat = 0usize;
    for ch in 0..c {
        for i in 0..od {
            for j in 0..oh {
                for k in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_idx = (ch, i * size, j * size, k * size);
                    for ii in i * size..((i + 1) * size).min(d) {
                        for jj in j * size..((j + 1) * size).min(h) {
                            for kk in k * size..((k + 1) * size).min(w) {
                                let v = x[(ch, ii, jj, kk)];
                                if v > best {
                                    best = v;
                                    best_idx = (ch, ii, jj, kk);
                                }
                            }
                        }
                    }
                    y[(ch, i, j, k)] = best;
                    argmax[flat] = best_idx;
                    flat += 1;
                }
            }
        }
    }
    (
        y,
        MaxPoolCache {
            argmax,
            in_dims: (c, d, h, w),
            out_dims: (c, od, oh, ow),
        },
    )
}

pub fn maxpool_backward<F: Scalar>(cache: &MaxPoolCache, gy: &Array4<F>) -> Array4<F> {
    let mut gx = Array4::<F>::zeros(cache.in_dims);
    for (flat, &(c, i, j, k)) in cache.argmax.iter().enumerate() {
        let (_, od, oh, ow) = cache.out_dims;
        let kk = flat % ow;
        let jj = (flat / ow) % oh;
        let ii = (flat / (ow * oh)) % od;
        let ch = flat / (ow * oh * od);
        gx[(c, i, j, k)] = gx[(c, i, j, k)] + gy[(ch, ii, jj, kk)];
    }
    gx
}

/// Per-axis source indices and weights for trilinear resampling with the
/// half-pixel-center convention.
fn line_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let clamped = src.clamp(0.0, (n_in - 1) as f64);
            let i0 = clamped.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = clamped - i0 as f64;
            (i0, i1, frac)
        })
        .collect()
}

pub struct UpsampleCache {
    pub in_dims: (usize, usize, usize, usize),
    pub wz: Vec<(usize, usize, f64)>,
    pub wy: Vec<(usize, usize, f64)>,
    pub wx: Vec<(usize, usize, f64)>,
}

/// Trilinear resize to an arbitrary spatial shape (used with factor 2 in the
/// decoder and factor 4 for full-resolution CAM views).
pub fn resize_trilinear<F: Scalar>(x: &Array4<F>, out_spatial: [usize; 3]) -> (Array4<F>, UpsampleCache) {
    let (c, d, h, w) = x.dim();
    let wz = line_weights(d, out_spatial[0]);
    let wy = line_weights(h, out_spatial[1]);
    let wx = line_weights(w, out_spatial[2]);
    let mut y = Array4::<F>::zeros((c, out_spatial[0], out_spatial[1], out_spatial[2]));
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ch, mut slab)| {
            for (i, &(z0, z1, fz)) in wz.iter().enumerate() {
                for (j, &(y0, y1, fy)) in wy.iter().enumerate() {
                    for (k, &(x0, x1, fx)) in wx.iter().enumerate() {
                        let c000 = x[(ch, z0, y0, x0)].to_f64().unwrap();
                        let c001 = x[(ch, z0, y0, x1)].to_f64().unwrap();
                        let c010 = x[(ch, z0, y1, x0)].to_f64().unwrap();
                        let c011 = x[(ch, z0, y1, x1)].to_f64().unwrap();
                        let c100 = x[(ch, z1, y0, x0)].to_f64().unwrap();
                        let c101 = x[(ch, z1, y0, x1)].to_f64().unwrap();
                        let c110 = x[(ch, z1, y1, x0)].to_f64().unwrap();
                        let c111 = x[(ch, z1, y1, x1)].to_f64().unwrap();
                        let v = (1.0 - fz)
                            * ((1.0 - fy) * ((1.0 - fx) * c000 + fx * c001)
                                + fy * ((1.0 - fx) * c010 + fx * c011))
                            + fz * ((1.0 - fy) * ((1.0 - fx) * c100 + fx * c101)
                                + fy * ((1.0 - fx) * c110 + fx * c111));
                        slab[(i, j, k)] = from_f64(v);
                    }
                }
            }
        });
    (
        y,
        UpsampleCache {
            in_dims: (c, d, h, w),
            wz,
            wy,
            wx,
        },
    )
}

pub fn resize_trilinear_backward<F: Scalar>(cache: &UpsampleCache, gy: &Array4<F>) -> Array4<F> {
    let mut gx = Array4::<F>::zeros(cache.in_dims);
    let (c, _, _, _) = cache.in_dims;
    gx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(ch, mut gslab)| {
            let _ = c;
            for (i, &(z0, z1, fz)) in cache.wz.iter().enumerate() {
                for (j, &(y0, y1, fy)) in cache.wy.iter().enumerate() {
                    for (k, &(x0, x1, fx)) in cache.wx.iter().enumerate() {
                        let g = gy[(ch, i, j, k)].to_f64().unwrap();
                        let mut add = |z: usize, yy: usize, xx: usize, w: f64| {
                            let cur = gslab[(z, yy, xx)].to_f64().unwrap();
                            gslab[(z, yy, xx)] = from_f64(cur + g * w);
                        };
                        add(z0, y0, x0, (1.0 - fz) * (1.0 - fy) * (1.0 - fx));
                        add(z0, y0, x1, (1.0 - fz) * (1.0 - fy) * fx);
                        add(z0, y1, x0, (1.0 - fz) * fy * (1.0 - fx));
                        add(z0, y1, x1, (1.0 - fz) * fy * fx);
                        add(z1, y0, x0, fz * (1.0 - fy) * (1.0 - fx));
                        add(z1, y0, x1, fz * (1.0 - fy) * fx);
                        add(z1, y1, x0, fz * fy * (1.0 - fx));
                        add(z1, y1, x1, fz * fy * fx);
                    }
                }
            }
        });
    gx
}

/// Zero-padded crop: `start` may be negative and `start + size` may exceed
/// the source; out-of-range voxels read as zero.
pub struct CropCache {
    pub start: [isize; 3],
    pub size: [usize; 3],
    pub in_dims: (usize, usize, usize, usize),
}

pub fn crop_with_pad<F: Scalar>(x: &Array4<F>, start: [isize; 3], size: [usize; 3]) -> (Array4<F>, CropCache) {
    let (c, d, h, w) = x.dim();
    let in_dims = [d, h, w];
    let mut y = Array4::<F>::zeros((c, size[0], size[1], size[2]));
    // overlap in output coordinates
    let mut o_lo = [0usize; 3];
    let mut o_hi = [0usize; 3];
    let mut s_lo = [0usize; 3];
    let mut empty = false;
    for a in 0..3 {
        let lo = start[a].max(0) as usize;
        let hi = (start[a] + size[a] as isize).min(in_dims[a] as isize);
        if hi <= lo as isize {
            empty = true;
            break;
        }
        let hi = hi as usize;
        s_lo[a] = lo;
        o_lo[a] = (lo as isize - start[a]) as usize;
        o_hi[a] = o_lo[a] + (hi - lo);
    }
    if !empty {
        y.slice_mut(s![
            ..,
            o_lo[0]..o_hi[0],
            o_lo[1]..o_hi[1],
            o_lo[2]..o_hi[2]
        ])
        .assign(&x.slice(s![
            ..,
            s_lo[0]..s_lo[0] + (o_hi[0] - o_lo[0]),
            s_lo[1]..s_lo[1] + (o_hi[1] - o_lo[1]),
            s_lo[2]..s_lo[2] + (o_hi[2] - o_lo[2])
        ]));
    }
    (
        y,
        CropCache {
            start,
            size,
            in_dims: (c, d, h, w),
        },
    )
}

/// Scatter a crop gradient back into a full-size accumulator.
pub fn crop_backward_into<F: Scalar>(cache: &CropCache, gy: &Array4<F>, gx: &mut Array4<F>) {
    let in_dims = [cache.in_dims.1, cache.in_dims.2, cache.in_dims.3];
    let mut o_lo = [0usize; 3];
    let mut o_hi = [0usize; 3];
    let mut s_lo = [0usize; 3];
    for a in 0..3 {
        let lo = cache.start[a].max(0) as usize;
        let hi = (cache.start[a] + cache.size[a] as isize).min(in_dims[a] as isize);
        if hi <= lo as isize {
            return;
        }
        let hi = hi as usize;
        s_lo[a] = lo;
        o_lo[a] = (lo as isize - cache.start[a]) as usize;
        o_hi[a] = o_lo[a] + (hi - lo);
    }
    let mut dst = gx.slice_mut(s![
        ..,
        s_lo[0]..s_lo[0] + (o_hi[0] - o_lo[0]),
        s_lo[1]..s_lo[1] + (o_hi[1] - o_lo[1]),
        s_lo[2]..s_lo[2] + (o_hi[2] - o_lo[2])
    ]);
    let src = gy.slice(s![
        ..,
        o_lo[0]..o_hi[0],
        o_lo[1]..o_hi[1],
        o_lo[2]..o_hi[2]
    ]);
    Zip::from(&mut dst).and(&src).for_each(|d, &s| *d = *d + s);
}

/// Channel concatenation and the matching gradient split.
pub fn concat_channels<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    let (ca, d, h, w) = a.dim();
    let (cb, d2, h2, w2) = b.dim();
    assert_eq!((d, h, w), (d2, h2, w2), "spatial shape mismatch in concat");
    let mut y = Array4::<F>::zeros((ca + cb, d, h, w));
    y.slice_mut(s![..ca, .., .., ..]).assign(a);
    y.slice_mut(s![ca.., .., .., ..]).assign(b);
    y
}

pub fn split_channels<F: Scalar>(gy: &Array4<F>, ca: usize) -> (Array4<F>, Array4<F>) {
    (
        gy.slice(s![..ca, .., .., ..]).to_owned(),
        gy.slice(s![ca.., .., .., ..]).to_owned(),
    )
}
