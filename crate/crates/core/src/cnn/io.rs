//! Model container: a small versioned binary format.
//!
//! Byte layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "KNK1"
//! 4       4     format version (u32, currently 1)
//! 8       1     conv mode tag (0 shared_kernel, 1 cross_channel)
//! 9       4     base kernel size (u32)
//! 13      4     input length (u32)
//! 17      52    layer dims, 13 u32: conv1 k/in/out, conv2 k/in/out,
//!               conv3 k/in/out, fc1 in/out, fc2 in/out
//! 69      ...   weight arrays as f64, in order: conv1, conv2, conv3,
//!               fc1 weights, fc1 bias, fc2 weights, fc2 bias
//! ```
//!
//! The dims block is redundant with (kernel, input length, mode) and is
//! verified on load, so a file whose header was edited inconsistently is
//! rejected instead of silently misread.

use std::path::Path;

use crate::dataset::atomic_write;
use crate::error::{KnockError, Result};

use super::{plan_shapes, ConvLayer, ConvMode, Dense, KnockNet};

const MAGIC: &[u8; 4] = b"KNK1";
const FORMAT_VERSION: u32 = 1;

fn mode_tag(mode: ConvMode) -> u8 {
    match mode {
        ConvMode::SharedKernel => 0,
        ConvMode::CrossChannel => 1,
    }
}

pub fn save_model(net: &KnockNet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(mode_tag(net.mode));
    buf.extend_from_slice(&(net.base_kernel as u32).to_le_bytes());
    buf.extend_from_slice(&(net.input_length as u32).to_le_bytes());
    for d in [
        net.conv1.kernel_size,
        net.conv1.in_channels,
        net.conv1.out_channels,
        net.conv2.kernel_size,
        net.conv2.in_channels,
        net.conv2.out_channels,
        net.conv3.kernel_size,
        net.conv3.in_channels,
        net.conv3.out_channels,
        net.fc1.in_dim,
        net.fc1.out_dim,
        net.fc2.in_dim,
        net.fc2.out_dim,
    ] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for arr in net.param_arrays() {
        for v in arr {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
    pub(crate) path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(KnockError::ModelFormat(format!(
                "{}: truncated in {section} ({} bytes left, {n} needed)",
                self.path.display(),
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    pub(crate) fn f64_array(&mut self, n: usize, section: &str) -> Result<Vec<f64>> {
        let raw = self.take(8 * n, section)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load_model(path: &Path) -> Result<KnockNet> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };

    if r.take(4, "magic")? != MAGIC {
        return Err(KnockError::ModelFormat(format!(
            "{}: not a model file (bad magic)",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(KnockError::ModelFormat(format!(
            "{}: unsupported format version {version}, expected {FORMAT_VERSION}",
            path.display()
        )));
    }
    let mode = match r.take(1, "mode tag")?[0] {
        0 => ConvMode::SharedKernel,
        1 => ConvMode::CrossChannel,
        other => {
            return Err(KnockError::ModelFormat(format!(
                "{}: unsupported convolution mode tag {other}",
                path.display()
            )));
        }
    };
    let base_kernel = r.u32("base kernel")? as usize;
    let input_length = r.u32("input length")? as usize;

    let mut dims = [0usize; 13];
    for d in &mut dims {
        *d = r.u32("layer dims")? as usize;
    }
    let plan = plan_shapes(base_kernel, input_length)?;
    let expected = [
        base_kernel,
        1,
        4,
        base_kernel,
        4,
        8,
        2 * base_kernel + 1,
        8,
        16,
        plan.flatten,
        plan.flatten / 2,
        plan.flatten / 2,
        1,
    ];
    if dims != expected {
        return Err(KnockError::ModelFormat(format!(
            "{}: layer dims {dims:?} disagree with kernel {base_kernel} and input length {input_length}",
            path.display()
        )));
    }

    let conv = |k: usize, c_in: usize, c_out: usize, weights: Vec<f64>| ConvLayer {
        kernel_size: k,
        in_channels: c_in,
        out_channels: c_out,
        mode,
        weights,
    };
    let count = |k: usize, c_in: usize, c_out: usize| match mode {
        ConvMode::SharedKernel => k * c_out,
        ConvMode::CrossChannel => k * c_in * c_out,
    };

    let w1 = r.f64_array(count(base_kernel, 1, 4), "conv1 weights")?;
    let w2 = r.f64_array(count(base_kernel, 4, 8), "conv2 weights")?;
    let w3 = r.f64_array(count(2 * base_kernel + 1, 8, 16), "conv3 weights")?;
    let fc1_w = r.f64_array(plan.flatten * (plan.flatten / 2), "fc1 weights")?;
    let fc1_b = r.f64_array(plan.flatten / 2, "fc1 bias")?;
    let fc2_w = r.f64_array(plan.flatten / 2, "fc2 weights")?;
    let fc2_b = r.f64_array(1, "fc2 bias")?;
    if r.pos != bytes.len() {
        return Err(KnockError::ModelFormat(format!(
            "{}: {} trailing bytes after fc2 bias",
            path.display(),
            bytes.len() - r.pos
        )));
    }

    Ok(KnockNet {
        mode,
        base_kernel,
        input_length,
        conv1: conv(base_kernel, 1, 4, w1),
        conv2: conv(base_kernel, 4, 8, w2),
        conv3: conv(2 * base_kernel + 1, 8, 16, w3),
        fc1: Dense {
            in_dim: plan.flatten,
            out_dim: plan.flatten / 2,
            weights: fc1_w,
            bias: fc1_b,
        },
        fc2: Dense { in_dim: plan.flatten / 2, out_dim: 1, weights: fc2_w, bias: fc2_b },
    })
}
