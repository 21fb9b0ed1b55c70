//! Pixel buffers, masks and binary PPM/PGM I/O.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("buffer length {got} does not match {height}x{width}x{channels}")]
    BadLength {
        height: usize,
        width: usize,
        channels: usize,
        got: usize,
    },
    #[error("channels must be 1 or 3, got {0}")]
    BadChannels(usize),
    #[error("pixel value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("mask value {0} is not 0 or 1")]
    NotBinary(u8),
    #[error("PNM format error: {0}")]
    Format(String),
}

/// Row-major, interleaved channels, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if channels != 1 && channels != 3 {
            return Err(ImageError::BadChannels(channels));
        }
        if data.len() != height * width * channels {
            return Err(ImageError::BadLength {
                height,
                width,
                channels,
                got: data.len(),
            });
        }
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange(v));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Caller guarantees values stay in [0, 1] and the length is unchanged.
    pub(crate) fn from_parts_unchecked(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// Snaps every value to the nearest multiple of 1/255, the precision of 8-bit files.
    pub fn quantize(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| to_byte(v) as f64 / 255.0)
            .collect();
        Self::from_parts_unchecked(self.height, self.width, self.channels, data)
    }

    /// P6 for three channels, P5 for one.
    pub fn to_pnm(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| to_byte(v)));
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self, ImageError> {
        let (magic, width, height, maxval, body) = parse_pnm_header(bytes)?;
        let channels = match magic {
            b'6' => 3,
            b'5' => 1,
            _ => unreachable!(),
        };
        let n = width * height * channels;
        if body.len() < n {
            return Err(ImageError::Format(format!(
                "expected {n} pixel bytes, found {}",
                body.len()
            )));
        }
        let data = body[..n]
            .iter()
            .map(|&b| {
                if b as u32 > maxval {
                    Err(ImageError::Format(format!("sample {b} exceeds maxval {maxval}")))
                } else {
                    Ok(b as f64 / maxval as f64)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(height, width, channels, data)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_pnm_header(bytes: &[u8]) -> Result<(u8, usize, usize, u32, &[u8]), ImageError> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
        return Err(ImageError::Format("expected binary P5 or P6 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for f in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(ImageError::Format("truncated header".into()));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| ImageError::Format(format!("header number: {e}")))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::Format("missing whitespace after maxval".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(ImageError::Format("zero image dimension".into()));
    }
    if !(1..=255).contains(&maxval) {
        return Err(ImageError::Format(format!(
            "maxval {maxval} unsupported (only 8-bit samples)"
        )));
    }
    Ok((
        bytes[1],
        width as usize,
        height as usize,
        maxval as u32,
        &bytes[pos..],
    ))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if data.len() != height * width {
            return Err(ImageError::BadLength {
                height,
                width,
                channels: 1,
                got: data.len(),
            });
        }
        if let Some(&v) = data.iter().find(|&&v| v > 1) {
            return Err(ImageError::NotBinary(v));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub(crate) fn from_bools(height: usize, width: usize, bits: &[bool]) -> Self {
        Self {
            height,
            width,
            data: bits.iter().map(|&b| b as u8).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!((self.height, self.width), (other.height, other.width));
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        }
    }

    /// PGM with 0/255 samples.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| v * 255));
        out
    }

    /// Any sample at or above half of maxval counts as set.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self, ImageError> {
        let img = ImageBuffer::from_pnm(bytes)?;
        if img.channels() != 1 {
            return Err(ImageError::Format("mask must be a P5 graymap".into()));
        }
        let data = img.data().iter().map(|&v| (v >= 0.5) as u8).collect();
        Self::new(img.height(), img.width(), data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if data.len() != height * width {
            return Err(ImageError::BadLength {
                height,
                width,
                channels: 1,
                got: data.len(),
            });
        }
        if let Some(&v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange(v));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Pixels strictly above `threshold` become 1.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v > threshold) as u8).collect(),
        }
    }

    /// PGM with 0–255 linear samples.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| to_byte(v)));
        out
    }
}

/// Per-patch forgery labels on a `grid_h × grid_w` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchLabels {
    pub grid_h: usize,
    pub grid_w: usize,
    pub labels: Vec<u8>,
}

impl PatchLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn forged(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &l)| l == 1).map(|(i, _)| i)
    }

    pub fn authentic(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &l)| l == 0).map(|(i, _)| i)
    }
}
