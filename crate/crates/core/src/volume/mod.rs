//! Dense video volumes and their on-disk formats.
//!
//! Every numerical module works on [`VideoVolume`]: a scalar grid of
//! `frames x height x width` voxels stored frame-major, then row, then
//! column. Channels are stacked outermost in [`ChannelStack`].

mod pgm;
mod vvf;

pub use pgm::{export_pgm_sequence, import_pgm_sequence, read_pgm, write_pgm};
pub use vvf::{decode_vvf, encode_vvf, load_vvf, save_vvf, VVF_HEADER_LEN, VVF_MAGIC};

use crate::error::{Result, SfsegError};

/// Extent of a video volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(frames: usize, height: usize, width: usize) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(SfsegError::Validation(format!(
                "volume extent must be positive, got {frames}x{height}x{width}"
            )));
        }
        Ok(Shape {
            frames,
            height,
            width,
        })
    }

    #[inline]
    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.frames * self.height * self.width
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize) -> usize {
        (t * self.height + y) * self.width + x
    }

    /// Inverse of [`Shape::index`].
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.width;
        let y = (index / self.width) % self.height;
        let t = index / self.frame_len();
        (t, y, x)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.frames, self.height, self.width)
    }
}

/// A finite scalar field over `frames x height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoVolume {
    shape: Shape,
    data: Vec<f64>,
}

impl VideoVolume {
    /// Builds a volume, rejecting wrong lengths and non-finite values.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.voxels() {
            return Err(SfsegError::Shape(format!(
                "{} values supplied for a {shape} volume ({} expected)",
                data.len(),
                shape.voxels()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            let (t, y, x) = shape.coords(i);
            return Err(SfsegError::Validation(format!(
                "non-finite value {} at frame {t}, row {y}, column {x}",
                data[i]
            )));
        }
        Ok(VideoVolume { shape, data })
    }

    pub fn from_dims(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::new(frames, height, width)?, data)
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; shape.voxels()])
    }

    pub fn zeros(shape: Shape) -> Self {
        VideoVolume {
            shape,
            data: vec![0.0; shape.voxels()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.voxels());
        for t in 0..shape.frames {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(t, y, x));
                }
            }
        }
        Self::new(shape, data)
    }

    /// Skips the finiteness scan; callers guarantee the invariant.
    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.voxels());
        VideoVolume { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.shape.frames
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(t, y, x)]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.shape.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Contiguous copy of frames `start..end`.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<VideoVolume> {
        if start >= end || end > self.frames() {
            return Err(SfsegError::Parameter(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        let n = self.shape.frame_len();
        let shape = Shape {
            frames: end - start,
            ..self.shape
        };
        Ok(VideoVolume::from_parts_unchecked(
            shape,
            self.data[start * n..end * n].to_vec(),
        ))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Applies `f` voxel-wise; the result is re-validated.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<VideoVolume> {
        VideoVolume::new(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn ensure_same_shape(&self, other: &VideoVolume, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(SfsegError::Shape(format!(
                "{what}: {} vs {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Rejects volumes with any value outside `[lo, hi]`.
    pub fn ensure_range(&self, lo: f64, hi: f64, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|&v| v < lo || v > hi) {
            let (t, y, x) = self.shape.coords(i);
            return Err(SfsegError::Validation(format!(
                "{what} value {} at frame {t}, row {y}, column {x} outside [{lo}, {hi}]",
                self.data[i]
            )));
        }
        Ok(())
    }

    /// Rejects volumes whose values are not exactly 0 or 1.
    pub fn ensure_binary(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            let (t, y, x) = self.shape.coords(i);
            return Err(SfsegError::Validation(format!(
                "{what} must be binary; found {} at frame {t}, row {y}, column {x}",
                self.data[i]
            )));
        }
        Ok(())
    }
}

/// Ordered channels sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    channels: Vec<VideoVolume>,
}

impl ChannelStack {
    pub fn new(channels: Vec<VideoVolume>) -> Result<Self> {
        let first = channels
            .first()
            .ok_or_else(|| SfsegError::Validation("channel stack needs at least one channel".into()))?;
        let shape = first.shape();
        for (i, c) in channels.iter().enumerate().skip(1) {
            if c.shape() != shape {
                return Err(SfsegError::Shape(format!(
                    "channel {i} is {} but channel 0 is {shape}",
                    c.shape()
                )));
            }
        }
        Ok(ChannelStack { channels })
    }

    pub fn single(volume: VideoVolume) -> Self {
        ChannelStack {
            channels: vec![volume],
        }
    }

    pub fn shape(&self) -> Shape {
        self.channels[0].shape()
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn channels(&self) -> &[VideoVolume] {
        &self.channels
    }

    pub fn channel(&self, i: usize) -> &VideoVolume {
        &self.channels[i]
    }

    pub fn into_channels(self) -> Vec<VideoVolume> {
        self.channels
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Result<ChannelStack> {
        let channels = self
            .channels
            .iter()
            .map(|c| c.slice_frames(start, end))
            .collect::<Result<Vec<_>>>()?;
        Ok(ChannelStack { channels })
    }
}

/// Per-frame displacement field in pixels, `dx` along columns and `dy` along rows.
///
/// Displacements follow the sampling convention used by
/// [`crate::metrics::warp`]: the warped value at `(y, x)` is read from
/// `(y + dy, x + dx)` in the source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    dx: VideoVolume,
    dy: VideoVolume,
}

impl FlowField {
    pub fn new(dx: VideoVolume, dy: VideoVolume) -> Result<Self> {
        dx.ensure_same_shape(&dy, "flow dx/dy")?;
        Ok(FlowField { dx, dy })
    }

    pub fn zeros(shape: Shape) -> Self {
        FlowField {
            dx: VideoVolume::zeros(shape),
            dy: VideoVolume::zeros(shape),
        }
    }

    pub fn shape(&self) -> Shape {
        self.dx.shape()
    }

    pub fn dx(&self) -> &VideoVolume {
        &self.dx
    }

    pub fn dy(&self) -> &VideoVolume {
        &self.dy
    }

    /// Flows travel as two-channel stacks: channel 0 is `dx`, channel 1 is `dy`.
    pub fn from_stack(stack: ChannelStack) -> Result<Self> {
        if stack.len() != 2 {
            return Err(SfsegError::Format(format!(
                "flow files carry exactly 2 channels (dx, dy), found {}",
                stack.len()
            )));
        }
        let mut it = stack.into_channels().into_iter();
        let dx = it.next().expect("two channels");
        let dy = it.next().expect("two channels");
        FlowField::new(dx, dy)
    }

    pub fn to_stack(&self) -> ChannelStack {
        ChannelStack {
            channels: vec![self.dx.clone(), self.dy.clone()],
        }
    }

    /// Time-reversed copy (frame `t` becomes frame `frames - 1 - t`).
    pub fn reversed_in_time(&self) -> FlowField {
        FlowField {
            dx: reverse_frames(&self.dx),
            dy: reverse_frames(&self.dy),
        }
    }
}

/// Time-reversed copy of a volume.
pub fn reverse_frames(v: &VideoVolume) -> VideoVolume {
    let n = v.shape().frame_len();
    let mut data = Vec::with_capacity(v.len());
    for t in (0..v.frames()).rev() {
        data.extend_from_slice(&v.data()[t * n..(t + 1) * n]);
    }
    VideoVolume::from_parts_unchecked(v.shape(), data)
}
