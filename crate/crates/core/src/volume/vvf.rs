//! VVF: a minimal little-endian container for channel stacks.
//!
//! Layout: `b"VVF1"`, then five `u32` LE fields (channels, frames, height,
//! width, dtype), then `channels*frames*height*width` values. Only dtype 1
//! (`f32` LE) is defined. Payload order is channel, frame, row, column.

use std::fs;
use std::path::Path;

use super::{ChannelStack, Shape, VideoVolume};
use crate::error::{Result, SfsegError};

pub const VVF_MAGIC: &[u8; 4] = b"VVF1";
pub const VVF_HEADER_LEN: usize = 24;
const DTYPE_F32: u32 = 1;

pub fn encode_vvf(stack: &ChannelStack) -> Result<Vec<u8>> {
    if stack.is_empty() {
        return Err(SfsegError::Validation("cannot encode an empty channel list".into()));
    }
    let shape = stack.shape();
    let dims = [
        stack.len(),
        shape.frames,
        shape.height,
        shape.width,
    ];
    let mut out = Vec::with_capacity(VVF_HEADER_LEN + 4 * stack.len() * shape.voxels());
    out.extend_from_slice(VVF_MAGIC);
    for d in dims {
        let d = u32::try_from(d)
            .map_err(|_| SfsegError::Validation(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for (c, channel) in stack.channels().iter().enumerate() {
        for (i, &v) in channel.data().iter().enumerate() {
            let narrowed = v as f32;
            if !narrowed.is_finite() {
                let (t, y, x) = shape.coords(i);
                return Err(SfsegError::Validation(format!(
                    "value {v} at channel {c}, frame {t}, row {y}, column {x} overflows f32"
                )));
            }
            out.extend_from_slice(&narrowed.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_vvf(bytes: &[u8]) -> Result<ChannelStack> {
    if bytes.len() < VVF_HEADER_LEN {
        return Err(SfsegError::Format(format!(
            "file is {} bytes, shorter than the {VVF_HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != VVF_MAGIC {
        return Err(SfsegError::Format("missing VVF1 magic".into()));
    }
    let field = |i: usize| {
        let o = 4 + 4 * i;
        u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
    };
    let (channels, frames, height, width, dtype) = (field(0), field(1), field(2), field(3), field(4));
    if dtype != DTYPE_F32 as usize {
        return Err(SfsegError::Format(format!("unsupported dtype code {dtype}")));
    }
    if channels == 0 {
        return Err(SfsegError::Format("header declares zero channels".into()));
    }
    let shape = Shape::new(frames, height, width)
        .map_err(|e| SfsegError::Format(format!("bad header: {e}")))?;
    let expected = channels
        .checked_mul(shape.voxels())
        .ok_or_else(|| SfsegError::Format("header dimensions overflow".into()))?;
    let payload = &bytes[VVF_HEADER_LEN..];
    if payload.len() != expected * 4 {
        return Err(SfsegError::Truncated {
            expected,
            found: payload.len() / 4,
        });
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    let mut out = Vec::with_capacity(channels);
    for _ in 0..channels {
        let data: Vec<f64> = values.by_ref().take(shape.voxels()).collect();
        out.push(VideoVolume::new(shape, data)?);
    }
    ChannelStack::new(out)
}

pub fn load_vvf(path: impl AsRef<Path>) -> Result<ChannelStack> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SfsegError::io(path, e))?;
    decode_vvf(&bytes)
}

pub fn save_vvf(stack: &ChannelStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_vvf(stack)?;
    fs::write(path, bytes).map_err(|e| SfsegError::io(path, e))
}
