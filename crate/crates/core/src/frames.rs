//! Frames, clips, semantic-map sequences and paired cross-view samples.
//!
//! Pixel values live in `[-1, 1]`; frames are stored channel-major
//! (`[3, H, W]`) so they convert to network tensors without reshuffling.

use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CHANNELS: usize = 3;

/// One 3-channel image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape(format!("frame size {height}x{width} must be positive")));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::shape(format!(
                "frame data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value; CHANNELS * height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Values mapped from `[-1, 1]` to `[0, 1]`, the metric-space range.
    pub fn to_unit_range(&self) -> Vec<f64> {
        self.data.iter().map(|&v| (f64::from(v) + 1.0) * 0.5).collect()
    }

    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        Tensor::from_vec(&[1, CHANNELS, self.height, self.width], self.data.iter().map(|&v| F::lit(v.into())).collect())
    }

    /// Sample `index` of an `[N, 3, H, W]` tensor.
    pub fn from_batch<F: Real>(t: &Tensor<F>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4();
        if c != CHANNELS || index >= n {
            return Err(Error::shape(format!("cannot take frame {index} from tensor {:?}", t.shape())));
        }
        let stride = c * h * w;
        let data = t.data()[index * stride..(index + 1) * stride].iter().map(|v| v.as_f64() as f32).collect();
        Frame::new(h, w, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }
}

/// Stack frames into an `[N, 3, H, W]` tensor.
pub fn batch_tensor<F: Real>(frames: &[&Frame]) -> Result<Tensor<F>> {
    let first = frames.first().ok_or_else(|| Error::shape("empty frame batch"))?;
    let (h, w) = first.size();
    let mut data = Vec::with_capacity(frames.len() * CHANNELS * h * w);
    for f in frames {
        if f.size() != (h, w) {
            return Err(Error::shape(format!("frame {}x{} in a {h}x{w} batch", f.height, f.width)));
        }
        data.extend(f.data.iter().map(|&v| F::lit(v.into())));
    }
    Ok(Tensor::from_vec(&[frames.len(), CHANNELS, h, w], data))
}

/// Map an interleaved 8-bit image (`channels` values per pixel) to `[-1, 1]`
/// via `v / 127.5 - 1`.
pub fn normalize_frame(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Frame> {
    if channels != CHANNELS {
        return Err(Error::shape(format!("expected 3 channels, got {channels}")));
    }
    if bytes.len() != width * height * channels {
        return Err(Error::shape(format!("{} bytes for a {width}x{height}x{channels} image", bytes.len())));
    }
    let mut f = Frame::filled(height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            for c in 0..CHANNELS {
                f.set(c, y, x, normalize_value(bytes[(y * width + x) * CHANNELS + c]));
            }
        }
    }
    Ok(f)
}

pub fn normalize_value(v: u8) -> f32 {
    f32::from(v) / 127.5 - 1.0
}

pub fn denormalize_value(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn normalize_image(img: &RgbImage) -> Frame {
    normalize_frame(img.width() as usize, img.height() as usize, CHANNELS, img.as_raw()).expect("RgbImage is 3-channel")
}

/// Inverse of [`normalize_image`], rounding to nearest and clamping to 0..=255.
pub fn denormalize_frame(frame: &Frame) -> RgbImage {
    let mut img = RgbImage::new(frame.width as u32, frame.height as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..CHANNELS {
            px.0[c] = denormalize_value(frame.get(c, y, x));
        }
    }
    img
}

/// An ordered, uniformly shaped frame sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    frames: Vec<Frame>,
}

impl Clip {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::shape("clip has no frames"))?;
        let size = first.size();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.size() != size) {
            return Err(Error::shape(format!(
                "clip frame {i} is {}x{}, frame 0 is {}x{}",
                f.height, f.width, size.0, size.1
            )));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_size(&self) -> (usize, usize) {
        self.frames[0].size()
    }
}

impl std::ops::Index<usize> for Clip {
    type Output = Frame;
    fn index(&self, i: usize) -> &Frame {
        &self.frames[i]
    }
}

/// Per-frame color-coded semantic guidance, paired with a clip.
pub type SemanticMapSequence = Clip;

/// Frame `k` of the result is frame `T-1-k` of the input.
pub fn reverse_sequence(clip: &Clip) -> Clip {
    Clip { frames: clip.frames.iter().rev().cloned().collect() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub clip_id: String,
    pub exo: Clip,
    pub ego: Clip,
    pub sem: SemanticMapSequence,
}

/// Expected frame geometry for validation; `None` fields are not checked.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleShape {
    pub image_size: Option<usize>,
    pub clip_length: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    LengthMismatch { what: &'static str, left: usize, right: usize },
    ShapeMismatch { view: &'static str, index: usize, found: (usize, usize), expected: (usize, usize) },
    WrongClipLength { view: &'static str, found: usize, expected: usize },
    NonFinite { view: &'static str, index: usize },
    OutOfRange { view: &'static str, index: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch { what, left, right } => write!(f, "{what} length mismatch ({left} vs {right})"),
            Violation::ShapeMismatch { view, index, found, expected } => write!(
                f,
                "{view} frame {index} is {}x{}, expected {}x{}",
                found.0, found.1, expected.0, expected.1
            ),
            Violation::WrongClipLength { view, found, expected } => {
                write!(f, "{view} clip has {found} frames, expected {expected}")
            }
            Violation::NonFinite { view, index } => write!(f, "non-finite pixel in {view} frame {index}"),
            Violation::OutOfRange { view, index } => write!(f, "{view} frame {index} has values outside [-1, 1]"),
        }
    }
}

/// Collects every invariant violation of a sample; an empty list means valid.
pub fn validate_paired_sample(sample: &PairedSample, expected: SampleShape) -> Vec<Violation> {
    let mut out = Vec::new();
    let views: [(&'static str, &Clip); 3] = [("exo", &sample.exo), ("ego", &sample.ego), ("sem", &sample.sem)];
    let (exo_len, ego_len, sem_len) = (sample.exo.len(), sample.ego.len(), sample.sem.len());
    if exo_len != ego_len {
        out.push(Violation::LengthMismatch { what: "exo/ego", left: exo_len, right: ego_len });
    }
    if sem_len != ego_len {
        out.push(Violation::LengthMismatch { what: "sem/ego", left: sem_len, right: ego_len });
    }
    let reference = expected
        .image_size
        .map(|s| (s, s))
        .or_else(|| sample.exo.frames.first().map(Frame::size))
        .unwrap_or((0, 0));
    for (view, clip) in views {
        if let Some(t) = expected.clip_length {
            if clip.len() != t {
                out.push(Violation::WrongClipLength { view, found: clip.len(), expected: t });
            }
        }
        for (index, frame) in clip.frames.iter().enumerate() {
            if frame.size() != reference {
                out.push(Violation::ShapeMismatch { view, index, found: frame.size(), expected: reference });
            }
            if !frame.all_finite() {
                out.push(Violation::NonFinite { view, index });
            } else if !frame.in_range() {
                out.push(Violation::OutOfRange { view, index });
            }
        }
    }
    out
}
