//! Compact 3D convolutional encoder with three heads: a region classifier
//! (the CAM source), a voxel localization map, and an ROI segmentation
//! decoder. All gradients are hand-rolled reverse mode; there is no general
//! autodiff tape because the architecture is fixed.
//!
//! Layout: five conv blocks. Each block is conv3³ → GroupNorm → ReLU →
//! conv3³ → GroupNorm (+ identity skip when shapes allow) → ReLU. Blocks 1
//! and 2 have stride 2 on their first convolution, so block outputs sit at
//! strides (2, 4, 4, 4, 4) and the final feature map is `ceil(input/4)` per
//! axis. Skip features for the decoder are tapped from blocks 1, 3 and 5.
//!
//! Batch normalization is deliberately absent: training runs with batch
//! size 1, where BN is degenerate. GroupNorm with 4 groups replaces it.
//!
//! Decoder shape trace for a 32³ ROI with the compact profile
//! (channels 8,16,32,64,64, decoder width 64):
//!
//! ```text
//! crop B5          ( 64, 8, 8, 8)
//! conv3³ + ReLU    ( 64, 8, 8, 8)
//! concat crop B3   ( 96, 8, 8, 8)
//! conv3³ + ReLU    ( 64, 8, 8, 8)
//! upsample x2      ( 64,16,16,16)
//! conv3³ + ReLU    ( 64,16,16,16)
//! concat crop B1   ( 72,16,16,16)
//! conv3³ + ReLU    ( 64,16,16,16)
//! upsample x2      ( 64,32,32,32)
//! conv1³ + sigmoid (  1,32,32,32)
//! ```

pub mod checkpoint;
pub mod flops;
pub mod layers;

use crate::volume::BoundingBox3;
use layers::*;
use ndarray::{s, Array1, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const BLOCK_STRIDES: [usize; 5] = [2, 2, 1, 1, 1];
/// Margin in input voxels added around localization components.
pub const ROI_MARGIN_VOX: u32 = 8;
pub const MIN_INPUT_DIM: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("input volume dims {0:?} below the minimum of {MIN_INPUT_DIM} per axis")]
    UndersizedInput((usize, usize, usize)),
    #[error("empty or out-of-extent region {0}")]
    BadRegion(BoundingBox3),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Channel widths and initialization seed of the network.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetworkConfig {
    pub block_channels: [usize; 5],
    pub decoder_channels: usize,
    pub gn_groups: usize,
    pub rng_seed: u64,
}

impl NetworkConfig {
    /// Desk-scale profile used for CPU training.
    pub fn compact(rng_seed: u64) -> Self {
        Self {
            block_channels: [8, 16, 32, 64, 64],
            decoder_channels: 64,
            gn_groups: 4,
            rng_seed,
        }
    }

    /// Channel widths matching the published architecture (512-wide final
    /// block, 512-2 classifier). Used for complexity analysis.
    pub fn paper(rng_seed: u64) -> Self {
        Self {
            block_channels: [64, 64, 128, 256, 512],
            decoder_channels: 64,
            gn_groups: 4,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.block_channels.iter().any(|&c| c == 0) || self.decoder_channels == 0 {
            return Err(NetworkError::BadConfig("zero channel width".into()));
        }
        if self.gn_groups == 0 {
            return Err(NetworkError::BadConfig("gn_groups must be >= 1".into()));
        }
        for &c in &self.block_channels {
            if c % self.gn_groups != 0 {
                return Err(NetworkError::BadConfig(format!(
                    "channels {c} not divisible into {} groups",
                    self.gn_groups
                )));
            }
        }
        Ok(())
    }
}

/// One encoder stage: two 3³ convolutions with GroupNorm and an identity
/// skip when the shapes allow it.
pub struct ConvBlock<F: Scalar> {
    pub conv_a: Conv3d<F>,
    pub gn_a: GroupNorm<F>,
    pub conv_b: Conv3d<F>,
    pub gn_b: GroupNorm<F>,
    pub skip: bool,
}

pub struct BlockCache<F: Scalar> {
    ca: Conv3dCache<F>,
    ga: GroupNormCache<F>,
    ra: ReluCache<F>,
    cb: Conv3dCache<F>,
    gb: GroupNormCache<F>,
    rout: ReluCache<F>,
}

impl<F: Scalar> ConvBlock<F> {
    fn new(in_c: usize, out_c: usize, stride: usize, groups: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv_a: Conv3d::new(in_c, out_c, 3, stride, rng),
            gn_a: GroupNorm::new(out_c, groups),
            conv_b: Conv3d::new(out_c, out_c, 3, 1, rng),
            gn_b: GroupNorm::new(out_c, groups),
            skip: in_c == out_c && stride == 1,
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, BlockCache<F>) {
        let (h, ca) = self.conv_a.forward(x);
        let (h, ga) = self.gn_a.forward(&h);
        let (h, ra) = relu(&h);
        let (h, cb) = self.conv_b.forward(&h);
        let (mut h, gb) = self.gn_b.forward(&h);
        if self.skip {
            h = h + x;
        }
        let (y, rout) = relu(&h);
        (
            y,
            BlockCache {
                ca,
                ga,
                ra,
                cb,
                gb,
                rout,
            },
        )
    }

    pub fn backward(&mut self, cache: &BlockCache<F>, gy: &Array4<F>) -> Array4<F> {
        let g_pre = relu_backward(&cache.rout, gy);
        let g = self.gn_b.backward(&cache.gb, &g_pre);
        let g = self.conv_b.backward(&cache.cb, &g);
        let g = relu_backward(&cache.ra, &g);
        let g = self.gn_a.backward(&cache.ga, &g);
        let mut gx = self.conv_a.backward(&cache.ca, &g);
        if self.skip {
            gx = gx + &g_pre;
        }
        gx
    }

    fn zero_grad(&mut self) {
        self.conv_a.zero_grad();
        self.gn_a.zero_grad();
        self.conv_b.zero_grad();
        self.gn_b.zero_grad();
    }
}

/// Skip features tapped from blocks 1, 3 and 5 (strides 2, 4, 4).
pub struct Pyramid<F: Scalar> {
    pub b1: Array4<F>,
    pub b3: Array4<F>,
    pub b5: Array4<F>,
}

/// Gradient accumulators matching a [`Pyramid`].
pub struct PyramidGrads<F: Scalar> {
    pub g1: Array4<F>,
    pub g3: Array4<F>,
    pub g5: Array4<F>,
}

impl<F: Scalar> PyramidGrads<F> {
    pub fn zeros_like(p: &Pyramid<F>) -> Self {
        Self {
            g1: Array4::zeros(p.b1.dim()),
            g3: Array4::zeros(p.b3.dim()),
            g5: Array4::zeros(p.b5.dim()),
        }
    }
}

pub struct EncodeCache<F: Scalar> {
    blocks: Vec<BlockCache<F>>,
}

/// ROI segmentation decoder over the feature pyramid.
pub struct Decoder<F: Scalar> {
    pub conv_a4: Conv3d<F>,
    pub conv_b4: Conv3d<F>,
    pub conv_a2: Conv3d<F>,
    pub conv_b2: Conv3d<F>,
    pub conv_out: Conv3d<F>,
}

pub struct DecodeCache<F: Scalar> {
    crop5: CropCache,
    crop3: CropCache,
    crop1: CropCache,
    ca4: Conv3dCache<F>,
    ra4: ReluCache<F>,
    cb4: Conv3dCache<F>,
    rb4: ReluCache<F>,
    up2: UpsampleCache,
    ca2: Conv3dCache<F>,
    ra2: ReluCache<F>,
    cb2: Conv3dCache<F>,
    rb2: ReluCache<F>,
    up1: UpsampleCache,
    cout: Conv3dCache<F>,
    pub sig: SigmoidCache<F>,
    out_offset: [usize; 3],
    out_size: [usize; 3],
}

impl<F: Scalar> Decoder<F> {
    fn new(cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Self {
        let [c1, _, c3, _, c5] = cfg.block_channels;
        let dec = cfg.decoder_channels;
        Self {
            conv_a4: Conv3d::new(c5, dec, 3, 1, rng),
            conv_b4: Conv3d::new(dec + c3, dec, 3, 1, rng),
            conv_a2: Conv3d::new(dec, dec, 3, 1, rng),
            conv_b2: Conv3d::new(dec + c1, dec, 3, 1, rng),
            conv_out: Conv3d::new(dec, 1, 1, 1, rng),
        }
    }

    fn zero_grad(&mut self) {
        self.conv_a4.zero_grad();
        self.conv_b4.zero_grad();
        self.conv_a2.zero_grad();
        self.conv_b2.zero_grad();
        self.conv_out.zero_grad();
    }
}

/// Class activation map at stride-4 resolution, min-max normalized, with an
/// optional full-resolution trilinear view.
#[derive(Debug, Clone)]
pub struct CamMap {
    pub data: Array3<f32>,
    pub full: Option<Array3<f32>>,
}

pub struct Network<F: Scalar> {
    pub config: NetworkConfig,
    pub blocks: Vec<ConvBlock<F>>,
    pub fc: Fc<F>,
    pub loc_conv: Conv3d<F>,
    pub decoder: Decoder<F>,
}

pub struct ClsCache<F: Scalar> {
    gap: GapCache,
    fc: FcCache<F>,
}

pub struct LocCache<F: Scalar> {
    conv: Conv3dCache<F>,
    pub sig: SigmoidCache<F>,
}

impl<F: Scalar> Network<F> {
    pub fn new(config: NetworkConfig) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        let ch = config.block_channels;
        let mut blocks = Vec::with_capacity(5);
        let mut in_c = 1;
        for b in 0..5 {
            blocks.push(ConvBlock::new(
                in_c,
                ch[b],
                BLOCK_STRIDES[b],
                config.gn_groups,
                &mut rng,
            ));
            in_c = ch[b];
        }
        let fc = Fc::new(ch[4], 2, &mut rng);
        let loc_conv = Conv3d::new(ch[4], 1, 1, 1, &mut rng);
        let decoder = Decoder::new(&config, &mut rng);
        Ok(Self {
            config,
            blocks,
            fc,
            loc_conv,
            decoder,
        })
    }

    /// Encode a volume into the {B1, B3, B5} feature pyramid.
    pub fn encode(&self, vol: &Array3<F>) -> Result<(Pyramid<F>, EncodeCache<F>), NetworkError> {
        let dims = vol.dim();
        if dims.0 < MIN_INPUT_DIM || dims.1 < MIN_INPUT_DIM || dims.2 < MIN_INPUT_DIM {
            return Err(NetworkError::UndersizedInput(dims));
        }
        let x0 = vol
            .to_owned()
            .into_shape_with_order((1, dims.0, dims.1, dims.2))
            .expect("reshape");
        let mut caches = Vec::with_capacity(5);
        let mut taps: Vec<Array4<F>> = Vec::with_capacity(3);
        let mut x = x0;
        for (i, block) in self.blocks.iter().enumerate() {
            let (y, c) = block.forward(&x);
            caches.push(c);
            if i == 0 || i == 2 {
                taps.push(y.clone());
            }
            x = y;
        }
        let b3 = taps.pop().unwrap();
        let b1 = taps.pop().unwrap();
        Ok((
            Pyramid { b1, b3, b5: x },
            EncodeCache { blocks: caches },
        ))
    }

    /// Reverse pass through the encoder given head gradients injected at the
    /// three pyramid taps.
    pub fn encoder_backward(&mut self, cache: &EncodeCache<F>, grads: &PyramidGrads<F>) {
        let mut g = self.blocks[4].backward(&cache.blocks[4], &grads.g5);
        g = self.blocks[3].backward(&cache.blocks[3], &g);
        g = g + &grads.g3;
        g = self.blocks[2].backward(&cache.blocks[2], &g);
        g = self.blocks[1].backward(&cache.blocks[1], &g);
        g = g + &grads.g1;
        let _ = self.blocks[0].backward(&cache.blocks[0], &g);
    }

    /// Two-class logits for a sub-region of the final feature map
    /// (GAP over the crop, then the fully connected layer).
    pub fn classify_region(
        &self,
        b5: &Array4<F>,
        region: BoundingBox3,
    ) -> Result<(Array1<F>, ClsCache<F>), NetworkError> {
        let dims = b5.dim();
        if !region.fits_in((dims.1, dims.2, dims.3)) || region.num_voxels() == 0 {
            return Err(NetworkError::BadRegion(region));
        }
        let (pooled, gap_cache) = gap(b5, region.ranges());
        let (logits, fc_cache) = self.fc.forward(&pooled);
        Ok((
            logits,
            ClsCache {
                gap: gap_cache,
                fc: fc_cache,
            },
        ))
    }

    pub fn classify_backward(
        &mut self,
        cache: &ClsCache<F>,
        g_logits: &Array1<F>,
        gb5: &mut Array4<F>,
    ) {
        let g_pooled = self.fc.backward(&cache.fc, g_logits);
        gap_backward_into(&cache.gap, &g_pooled, gb5);
    }

    /// Class activation map: weighted sum of B5 channels using the
    /// classifier row for the catheter class (index 1), min-max normalized.
    /// An all-equal raw map is defined as all-zero.
    pub fn compute_cam(&self, b5: &Array4<F>, upsample_to: Option<[usize; 3]>) -> CamMap {
        let w_row: Vec<f32> = self
            .fc
            .w
            .row(1)
            .iter()
            .map(|v| v.to_f32().unwrap())
            .collect();
        compute_cam_from_weights(b5, &w_row, upsample_to)
    }

    /// Localization probability map at stride 4: sigmoid of a 1³ conv.
    pub fn localize(&self, b5: &Array4<F>) -> (Array3<F>, LocCache<F>) {
        let (z, conv) = self.loc_conv.forward(b5);
        let (p, sig) = sigmoid(&z);
        let dims = p.dim();
        let map = p
            .into_shape_with_order((dims.1, dims.2, dims.3))
            .expect("single channel");
        (map, LocCache { conv, sig })
    }

    /// Backward from dL/d(pre-sigmoid logits) of the localization map.
    pub fn localize_backward(
        &mut self,
        cache: &LocCache<F>,
        g_logits: &Array3<F>,
        gb5: &mut Array4<F>,
    ) {
        let dims = g_logits.dim();
        let g4 = g_logits
            .to_owned()
            .into_shape_with_order((1, dims.0, dims.1, dims.2))
            .expect("reshape");
        let g = self.loc_conv.backward(&cache.conv, &g4);
        *gb5 = &*gb5 + &g;
    }

    /// Decode one ROI into per-voxel foreground probabilities. The ROI is
    /// aligned internally to the stride-4 lattice and padded to a multiple
    /// of 4; the output is cropped back to the exact ROI shape.
    pub fn decode_roi(
        &self,
        pyr: &Pyramid<F>,
        roi: BoundingBox3,
    ) -> Result<(Array3<F>, DecodeCache<F>), NetworkError> {
        let size = roi.size();
        let l = [size[0] as usize, size[1] as usize, size[2] as usize];
        let s = [
            roi.start[0] as usize,
            roi.start[1] as usize,
            roi.start[2] as usize,
        ];
        let mut s4 = [0usize; 3];
        let mut p = [0usize; 3];
        for a in 0..3 {
            s4[a] = s[a] - s[a] % 4;
            let end = s[a] + l[a];
            let p_end = end.div_ceil(4) * 4;
            p[a] = (p_end - s4[a]).max(4);
        }
        let f = |v: [usize; 3], d: usize| [v[0] / d, v[1] / d, v[2] / d];
        let as_isize = |v: [usize; 3]| [v[0] as isize, v[1] as isize, v[2] as isize];

        let (b5c, crop5) = crop_with_pad(&pyr.b5, as_isize(f(s4, 4)), f(p, 4));
        let (b3c, crop3) = crop_with_pad(&pyr.b3, as_isize(f(s4, 4)), f(p, 4));
        let (b1c, crop1) = crop_with_pad(&pyr.b1, as_isize(f(s4, 2)), f(p, 2));

        let (h, ca4) = self.decoder.conv_a4.forward(&b5c);
        let (h, ra4) = relu(&h);
        let cat4 = concat_channels(&h, &b3c);
        let (h, cb4) = self.decoder.conv_b4.forward(&cat4);
        let (h, rb4) = relu(&h);
        let (h, up2) = resize_trilinear(&h, f(p, 2));
        let (h, ca2) = self.decoder.conv_a2.forward(&h);
        let (h, ra2) = relu(&h);
        let cat2 = concat_channels(&h, &b1c);
        let (h, cb2) = self.decoder.conv_b2.forward(&cat2);
        let (h, rb2) = relu(&h);
        let (h, up1) = resize_trilinear(&h, p);
        let (z, cout) = self.decoder.conv_out.forward(&h);
        let (probs, sig) = sigmoid(&z);

        let off = [s[0] - s4[0], s[1] - s4[1], s[2] - s4[2]];
        let out = probs
            .slice(s![
                0,
                off[0]..off[0] + l[0],
                off[1]..off[1] + l[1],
                off[2]..off[2] + l[2]
            ])
            .to_owned();
        Ok((
            out,
            DecodeCache {
                crop5,
                crop3,
                crop1,
                ca4,
                ra4,
                cb4,
                rb4,
                up2,
                ca2,
                ra2,
                cb2,
                rb2,
                up1,
                cout,
                sig,
                out_offset: off,
                out_size: l,
            },
        ))
    }

    /// Backward from dL/d(pre-sigmoid logits) over the ROI; scatters skip
    /// gradients into the pyramid accumulators.
    pub fn decode_backward(
        &mut self,
        cache: &DecodeCache<F>,
        g_logits_roi: &Array3<F>,
        acc: &mut PyramidGrads<F>,
    ) {
        debug_assert_eq!(
            g_logits_roi.dim(),
            (
                cache.out_size[0],
                cache.out_size[1],
                cache.out_size[2]
            )
        );
        let padded = {
            let mut z = Array4::<F>::zeros(cache.sig.y.dim());
            let o = cache.out_offset;
            let l = cache.out_size;
            z.slice_mut(s![0, o[0]..o[0] + l[0], o[1]..o[1] + l[1], o[2]..o[2] + l[2]])
                .assign(g_logits_roi);
            z
        };
        let g = self.decoder.conv_out.backward(&cache.cout, &padded);
        let g = resize_trilinear_backward(&cache.up1, &g);
        let g = relu_backward(&cache.rb2, &g);
        let g = self.decoder.conv_b2.backward(&cache.cb2, &g);
        let dec_c = self.config.decoder_channels;
        let (g, g_b1c) = split_channels(&g, dec_c);
        crop_backward_into(&cache.crop1, &g_b1c, &mut acc.g1);
        let g = relu_backward(&cache.ra2, &g);
        let g = self.decoder.conv_a2.backward(&cache.ca2, &g);
        let g = resize_trilinear_backward(&cache.up2, &g);
        let g = relu_backward(&cache.rb4, &g);
        let g = self.decoder.conv_b4.backward(&cache.cb4, &g);
        let (g, g_b3c) = split_channels(&g, dec_c);
        crop_backward_into(&cache.crop3, &g_b3c, &mut acc.g3);
        let g = relu_backward(&cache.ra4, &g);
        let g = self.decoder.conv_a4.backward(&cache.ca4, &g);
        crop_backward_into(&cache.crop5, &g, &mut acc.g5);
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            b.zero_grad();
        }
        self.fc.zero_grad();
        self.loc_conv.zero_grad();
        self.decoder.zero_grad();
    }

    /// Named views of every parameter and its gradient, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [F], &mut [F])> {
        let mut out: Vec<(String, &mut [F], &mut [F])> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = i + 1;
            out.push((
                format!("block{n}.conv_a.w"),
                b.conv_a.w.as_slice_mut().unwrap(),
                b.conv_a.gw.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("block{n}.conv_a.b"),
                b.conv_a.b.as_slice_mut().unwrap(),
                b.conv_a.gb.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("block{n}.gn_a.gamma"),
                b.gn_a.gamma.as_slice_mut().unwrap(),
                b.gn_a.g_gamma.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("block{n}.gn_a.beta"),
                b.gn_a.beta.as_slice_mut().unwrap(),
                b.gn_a.g_beta.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("block{n}.conv_b.w"),
                b.conv_b.w.as_slice_mut().unwrap(),
                b.conv_b.gw.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("block{n}.conv_b.b"),
                b.conv_b.b.as_slice_mut().unwrap(),
                b.conv_b.gb.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("block{n}.gn_b.gamma"),
                b.gn_b.gamma.as_slice_mut().unwrap(),
                b.gn_b.g_gamma.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("block{n}.gn_b.beta"),
                b.gn_b.beta.as_slice_mut().unwrap(),
                b.gn_b.g_beta.as_slice_mut().unwrap(),
            ));
        }
        out.push((
            "fc.w".into(),
            self.fc.w.as_slice_mut().unwrap(),
            self.fc.gw.as_slice_mut().unwrap(),
        ));
        out.push((
            "fc.b".into(),
            self.fc.b.as_slice_mut().unwrap(),
            self.fc.gb.as_slice_mut().unwrap(),
        ));
        out.push((
            "loc.w".into(),
            self.loc_conv.w.as_slice_mut().unwrap(),
            self.loc_conv.gw.as_slice_mut().unwrap(),
        ));
        out.push((
            "loc.b".into(),
            self.loc_conv.b.as_slice_mut().unwrap(),
            self.loc_conv.gb.as_slice_mut().unwrap(),
        ));
        for (name, conv) in [
            ("dec.conv_a4", &mut self.decoder.conv_a4),
            ("dec.conv_b4", &mut self.decoder.conv_b4),
            ("dec.conv_a2", &mut self.decoder.conv_a2),
            ("dec.conv_b2", &mut self.decoder.conv_b2),
            ("dec.conv_out", &mut self.decoder.conv_out),
        ] {
            out.push((
                format!("{name}.w"),
                conv.w.as_slice_mut().unwrap(),
                conv.gw.as_slice_mut().unwrap(),
            ));
            out.push((
                format!("{name}.b"),
                conv.b.as_slice_mut().unwrap(),
                conv.gb.as_slice_mut().unwrap(),
            ));
        }
        out
    }
}

/// CAM from explicit per-channel weights (Σ w_i · F_i, then min-max).
pub fn compute_cam_from_weights<F: Scalar>(
    b5: &Array4<F>,
    weights: &[f32],
    upsample_to: Option<[usize; 3]>,
) -> CamMap {
    let (c, d, h, w) = b5.dim();
    assert_eq!(c, weights.len(), "weight row length must match channels");
    let mut raw = Array3::<f32>::zeros((d, h, w));
    for ch in 0..c {
        let wv = weights[ch];
        let slab = b5.index_axis(Axis(0), ch);
        for ((i, j, k), &v) in slab.indexed_iter() {
            raw[(i, j, k)] += wv * v.to_f32().unwrap();
        }
    }
    let min = raw.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = raw.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let data = if max - min <= 0.0 {
        Array3::zeros((d, h, w))
    } else {
        raw.mapv(|v| (v - min) / (max - min))
    };
    let full = upsample_to.map(|target| {
        let d4 = data
            .to_owned()
            .into_shape_with_order((1, d, h, w))
            .expect("reshape");
        let (up, _) = resize_trilinear(&d4, target);
        up.into_shape_with_order((target[0], target[1], target[2]))
            .expect("reshape")
    });
    CamMap { data, full }
}

/// Threshold the localization map, group 26-connected components, rank by
/// probability mass and return the top `m` boxes in input-resolution
/// coordinates, dilated by [`ROI_MARGIN_VOX`] and clamped.
pub fn extract_rois(
    loc_map: &Array3<f32>,
    tau_loc: f32,
    m: usize,
    volume_shape: (usize, usize, usize),
) -> Vec<BoundingBox3> {
    let dims = loc_map.dim();
    let mut visited = Array3::<bool>::from_elem(dims, false);
    struct Comp {
        mass: f64,
        lo: [usize; 3],
        hi: [usize; 3],
        seed: (usize, usize, usize),
    }
    let mut comps: Vec<Comp> = Vec::new();
    let mut stack = Vec::new();
    for ((i, j, k), &v) in loc_map.indexed_iter() {
        if v <= tau_loc || visited[(i, j, k)] {
            continue;
        }
        let mut comp = Comp {
            mass: 0.0,
            lo: [i, j, k],
            hi: [i, j, k],
            seed: (i, j, k),
        };
        visited[(i, j, k)] = true;
        stack.push((i, j, k));
        while let Some((ci, cj, ck)) = stack.pop() {
            comp.mass += loc_map[(ci, cj, ck)] as f64;
            let p = [ci, cj, ck];
            for a in 0..3 {
                comp.lo[a] = comp.lo[a].min(p[a]);
                comp.hi[a] = comp.hi[a].max(p[a]);
            }
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    for dk in -1i64..=1 {
                        if di == 0 && dj == 0 && dk == 0 {
                            continue;
                        }
                        let ni = ci as i64 + di;
                        let nj = cj as i64 + dj;
                        let nk = ck as i64 + dk;
                        if ni < 0
                            || nj < 0
                            || nk < 0
                            || ni >= dims.0 as i64
                            || nj >= dims.1 as i64
                            || nk >= dims.2 as i64
                        {
                            continue;
                        }
                        let n = (ni as usize, nj as usize, nk as usize);
                        if !visited[n] && loc_map[n] > tau_loc {
                            visited[n] = true;
                            stack.push(n);
                        }
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps.sort_by(|a, b| {
        b.mass
            .partial_cmp(&a.mass)
            .unwrap()
            .then(a.seed.cmp(&b.seed))
    });
    let vol = [volume_shape.0 as u32, volume_shape.1 as u32, volume_shape.2 as u32];
    comps
        .into_iter()
        .take(m)
        .map(|c| {
            let mut start = [0u32; 3];
            let mut end = [0u32; 3];
            for a in 0..3 {
                start[a] = ((c.lo[a] * 4) as u32).saturating_sub(ROI_MARGIN_VOX);
                end[a] = (((c.hi[a] + 1) * 4) as u32 + ROI_MARGIN_VOX).min(vol[a]);
            }
            BoundingBox3 { start, end }
        })
        .collect()
}

/// AMSGrad: adaptive moments with a running maximum of the second moment.
/// Moment state is kept in f64 regardless of the parameter type.
pub struct AmsGrad {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    vhat: Vec<Vec<f64>>,
}

impl AmsGrad {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
            vhat: Vec::new(),
        }
    }

    pub fn step<F: Scalar>(&mut self, params: &mut [(String, &mut [F], &mut [F])]) {
        if self.m.is_empty() {
            for (_, w, _) in params.iter() {
                self.m.push(vec![0.0; w.len()]);
                self.v.push(vec![0.0; w.len()]);
                self.vhat.push(vec![0.0; w.len()]);
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (p, (_, w, g)) in params.iter_mut().enumerate() {
            let m = &mut self.m[p];
            let v = &mut self.v[p];
            let vhat = &mut self.vhat[p];
            for i in 0..w.len() {
                let gi = g[i].to_f64().unwrap();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                if v[i] > vhat[i] {
                    vhat[i] = v[i];
                }
                let update = self.lr * (m[i] / bc1) / ((vhat[i] / bc2).sqrt() + self.eps);
                w[i] = w[i] - from_f64::<F>(update);
            }
        }
    }
}
