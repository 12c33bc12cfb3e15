//! Structural FLOPs accounting: per-layer multiply-add counts times two.
//!
//! Only convolutions and the fully connected layer are counted;
//! normalization, activations and resampling are excluded (they are linear
//! in voxel count and two to three orders of magnitude below the conv
//! cost). The counting convention for one convolution is
//!
//! ```text
//!   FLOPs = 2 · K³ · C_in · C_out · output_voxels
//! ```

use super::NetworkConfig;

/// Which architecture variant is being counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopsDomain {
    /// Stride-4 network as trained on frustum volumes.
    Frustum,
    /// Halved-filter, stride-8 variant used for full Cartesian volumes.
    CartesianStride8,
}

/// Whole-volume decoding versus decoding restricted to ROIs of the given
/// sizes (the encoder and heads always run on the whole volume).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlopsMode {
    WholeVolume,
    Rois(Vec<[usize; 3]>),
}

#[derive(Debug, Clone)]
pub struct LayerFlops {
    pub name: String,
    pub output_voxels: u64,
    pub macs: u64,
}

impl LayerFlops {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

#[derive(Debug, Clone, Default)]
pub struct FlopsReport {
    pub layers: Vec<LayerFlops>,
    pub assumptions: Vec<String>,
}

impl FlopsReport {
    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }
    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.flops()).sum()
    }
    pub fn gflops(&self) -> f64 {
        self.total_flops() as f64 / 1e9
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str("layer                        out_voxels          MACs         FLOPs\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{:<28} {:>10} {:>13} {:>13}\n",
                l.name,
                l.output_voxels,
                l.macs,
                l.flops()
            ));
        }
        out.push_str(&format!(
            "TOTAL  {:.4} GFLOPs ({} multiply-adds)\n",
            self.gflops(),
            self.total_macs()
        ));
        if !self.assumptions.is_empty() {
            out.push_str("assumptions:\n");
            for a in &self.assumptions {
                out.push_str(&format!("  - {a}\n"));
            }
        }
        out
    }
}

fn ceil_div(d: [usize; 3], s: usize) -> [usize; 3] {
    [d[0].div_ceil(s), d[1].div_ceil(s), d[2].div_ceil(s)]
}

fn vox(d: [usize; 3]) -> u64 {
    d.iter().map(|&x| x as u64).product()
}

pub fn conv_macs(k: usize, c_in: usize, c_out: usize, out: [usize; 3]) -> u64 {
    (k * k * k) as u64 * c_in as u64 * c_out as u64 * vox(out)
}

/// Decoder cost over one region of the given input-resolution size; the
/// padded multiple-of-4 working shape matches what decode_roi actually runs.
fn decoder_layers(
    channels: [usize; 5],
    dec: usize,
    region: [usize; 3],
    tag: &str,
    stride8: bool,
) -> Vec<LayerFlops> {
    let [c1, _, c3, _, c5] = channels;
    let base = if stride8 { 8 } else { 4 };
    let p: [usize; 3] = std::array::from_fn(|a| region[a].div_ceil(base) * base);
    let p_top = ceil_div(p, base);
    let p2 = ceil_div(p, 2);
    let mut out = Vec::new();
    out.push(LayerFlops {
        name: format!("dec.conv_a4{tag}"),
        output_voxels: vox(p_top),
        macs: conv_macs(3, c5, dec, p_top),
    });
    out.push(LayerFlops {
        name: format!("dec.conv_b4{tag}"),
        output_voxels: vox(p_top),
        macs: conv_macs(3, dec + c3, dec, p_top),
    });
    if stride8 {
        let p4 = ceil_div(p, 4);
        out.push(LayerFlops {
            name: format!("dec.conv_mid{tag}"),
            output_voxels: vox(p4),
            macs: conv_macs(3, dec, dec, p4),
        });
    }
    out.push(LayerFlops {
        name: format!("dec.conv_a2{tag}"),
        output_voxels: vox(p2),
        macs: conv_macs(3, dec, dec, p2),
    });
    out.push(LayerFlops {
        name: format!("dec.conv_b2{tag}"),
        output_voxels: vox(p2),
        macs: conv_macs(3, dec + c1, dec, p2),
    });
    out.push(LayerFlops {
        name: format!("dec.conv_out{tag}"),
        output_voxels: vox(p),
        macs: conv_macs(1, dec, 1, p),
    });
    out
}

/// Count multiply-adds for the configured network on one input volume.
pub fn count_flops(
    cfg: &NetworkConfig,
    input: [usize; 3],
    mode: &FlopsMode,
    domain: FlopsDomain,
) -> FlopsReport {
    let stride8 = domain == FlopsDomain::CartesianStride8;
    let channels: [usize; 5] = if stride8 {
        std::array::from_fn(|i| (cfg.block_channels[i] / 2).max(1))
    } else {
        cfg.block_channels
    };
    let dec = cfg.decoder_channels;
    let strides: [usize; 5] = if stride8 { [2, 2, 2, 1, 1] } else { [2, 2, 1, 1, 1] };

    let mut layers = Vec::new();
    let mut assumptions = vec![
        "FLOPs = 2 x multiply-adds; only conv and FC layers counted".to_string(),
        "each block: two 3x3x3 convolutions; first conv carries the block stride".to_string(),
        format!(
            "block channels {:?}, decoder width {dec}, strides {:?}",
            channels, strides
        ),
    ];
    if stride8 {
        assumptions.push(
            "Cartesian variant: filters halved, total stride 8, one extra decoder stage"
                .to_string(),
        );
    }

    let mut dims = input;
    let mut c_in = 1usize;
    for b in 0..5 {
        dims = ceil_div(dims, strides[b]);
        let c_out = channels[b];
        layers.push(LayerFlops {
            name: format!("block{}.conv_a", b + 1),
            output_voxels: vox(dims),
            macs: conv_macs(3, c_in, c_out, dims),
        });
        layers.push(LayerFlops {
            name: format!("block{}.conv_b", b + 1),
            output_voxels: vox(dims),
            macs: conv_macs(3, c_out, c_out, dims),
        });
        c_in = c_out;
    }
    let c5 = channels[4];
    layers.push(LayerFlops {
        name: "loc.conv1".into(),
        output_voxels: vox(dims),
        macs: conv_macs(1, c5, 1, dims),
    });
    layers.push(LayerFlops {
        name: "fc".into(),
        output_voxels: 1,
        macs: (c5 * 2) as u64,
    });

    match mode {
        FlopsMode::WholeVolume => {
            layers.extend(decoder_layers(channels, dec, input, "", stride8));
            assumptions.push("decoder applied to the whole volume".to_string());
        }
        FlopsMode::Rois(rois) => {
            for (i, &r) in rois.iter().enumerate() {
                layers.extend(decoder_layers(
                    channels,
                    dec,
                    r,
                    &format!(".roi{i}"),
                    stride8,
                ));
            }
            assumptions.push(format!(
                "decoder applied to {} ROI(s) of sizes {:?}; encoder and heads still cover the whole volume",
                rois.len(),
                rois
            ));
        }
    }

    FlopsReport { layers, assumptions }
}
