//! Versioned weight checkpoint: magic "NWT1", config echo, then named f32
//! parameter blobs in a fixed order. Little-endian throughout.

use super::{Network, NetworkConfig, NetworkError};
use std::fs;
use std::io::Read;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"NWT1";
pub const VERSION: u32 = 1;

fn push_param(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_bytes(net: &Network<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for &c in &net.config.block_channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&(net.config.decoder_channels as u32).to_le_bytes());
    out.extend_from_slice(&(net.config.gn_groups as u32).to_le_bytes());
    out.extend_from_slice(&net.config.rng_seed.to_le_bytes());

    let mut body = Vec::new();
    let mut count: u32 = 0;
    {
        let mut add = |name: String, shape: Vec<usize>, data: Vec<f32>| {
            push_param(&mut body, &name, &shape, data.into_iter());
            count += 1;
        };
        for (i, b) in net.blocks.iter().enumerate() {
            let n = i + 1;
            add(
                format!("block{n}.conv_a.w"),
                b.conv_a.w.shape().to_vec(),
                b.conv_a.w.iter().copied().collect(),
            );
            add(
                format!("block{n}.conv_a.b"),
                b.conv_a.b.shape().to_vec(),
                b.conv_a.b.iter().copied().collect(),
            );
            add(
                format!("block{n}.gn_a.gamma"),
                b.gn_a.gamma.shape().to_vec(),
                b.gn_a.gamma.iter().copied().collect(),
            );
            add(
                format!("block{n}.gn_a.beta"),
                b.gn_a.beta.shape().to_vec(),
                b.gn_a.beta.iter().copied().collect(),
            );
            add(
                format!("block{n}.conv_b.w"),
                b.conv_b.w.shape().to_vec(),
                b.conv_b.w.iter().copied().collect(),
            );
            add(
                format!("block{n}.conv_b.b"),
                b.conv_b.b.shape().to_vec(),
                b.conv_b.b.iter().copied().collect(),
            );
            add(
                format!("block{n}.gn_b.gamma"),
                b.gn_b.gamma.shape().to_vec(),
                b.gn_b.gamma.iter().copied().collect(),
            );
            add(
                format!("block{n}.gn_b.beta"),
                b.gn_b.beta.shape().to_vec(),
                b.gn_b.beta.iter().copied().collect(),
            );
        }
        add(
            "fc.w".into(),
            net.fc.w.shape().to_vec(),
            net.fc.w.iter().copied().collect(),
        );
        add(
            "fc.b".into(),
            net.fc.b.shape().to_vec(),
            net.fc.b.iter().copied().collect(),
        );
        add(
            "loc.w".into(),
            net.loc_conv.w.shape().to_vec(),
            net.loc_conv.w.iter().copied().collect(),
        );
        add(
            "loc.b".into(),
            net.loc_conv.b.shape().to_vec(),
            net.loc_conv.b.iter().copied().collect(),
        );
        for (name, conv) in [
            ("dec.conv_a4", &net.decoder.conv_a4),
            ("dec.conv_b4", &net.decoder.conv_b4),
            ("dec.conv_a2", &net.decoder.conv_a2),
            ("dec.conv_b2", &net.decoder.conv_b2),
            ("dec.conv_out", &net.decoder.conv_out),
        ] {
            add(
                format!("{name}.w"),
                conv.w.shape().to_vec(),
                conv.w.iter().copied().collect(),
            );
            add(
                format!("{name}.b"),
                conv.b.shape().to_vec(),
                conv.b.iter().copied().collect(),
            );
        }
    }
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    out
}

pub fn save_checkpoint(net: &Network<f32>, path: &Path) -> Result<(), NetworkError> {
    fs::write(path, checkpoint_bytes(net))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        if self.pos + n > self.buf.len() {
            return Err(NetworkError::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, NetworkError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, NetworkError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32, NetworkError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn parse_checkpoint_bytes(bytes: &[u8]) -> Result<Network<f32>, NetworkError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(NetworkError::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NetworkError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut block_channels = [0usize; 5];
    for c in &mut block_channels {
        *c = r.u32()? as usize;
    }
    let decoder_channels = r.u32()? as usize;
    let gn_groups = r.u32()? as usize;
    let rng_seed = r.u64()?;
    let config = NetworkConfig {
        block_channels,
        decoder_channels,
        gn_groups,
        rng_seed,
    };
    config.validate()?;
    if block_channels.iter().any(|&c| c > 4096) || decoder_channels > 4096 {
        return Err(NetworkError::Checkpoint("implausible channel width".into()));
    }
    let count = r.u32()?;
    let mut net = Network::<f32>::new(config)?;
    let mut params = net.params_mut();
    if count as usize != params.len() {
        return Err(NetworkError::Checkpoint(format!(
            "parameter count {count} does not match architecture ({})",
            params.len()
        )));
    }
    let mut filled = vec![false; params.len()];
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NetworkError::Checkpoint("non-utf8 parameter name".into()))?
            .to_string();
        let ndim = r.take(1)?[0] as usize;
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = r.u32()? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| NetworkError::Checkpoint("shape overflow".into()))?;
        }
        let idx = params
            .iter()
            .position(|(n, _, _)| *n == name)
            .ok_or_else(|| NetworkError::Checkpoint(format!("unknown parameter {name}")))?;
        if filled[idx] {
            return Err(NetworkError::Checkpoint(format!("duplicate parameter {name}")));
        }
        let slot = &mut params[idx].1;
        if slot.len() != len {
            return Err(NetworkError::Checkpoint(format!(
                "size mismatch for {name}: file {len}, architecture {}",
                slot.len()
            )));
        }
        for v in slot.iter_mut() {
            let x = r.f32()?;
            if !x.is_finite() {
                return Err(NetworkError::Checkpoint(format!(
                    "non-finite value in {name}"
                )));
            }
            *v = x;
        }
        filled[idx] = true;
    }
    if r.pos != bytes.len() {
        return Err(NetworkError::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    drop(params);
    Ok(net)
}

pub fn load_checkpoint(path: &Path) -> Result<Network<f32>, NetworkError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint_bytes(&bytes)
}
