//! In-memory rasters (label masks, float images, weight maps) and their file
//! formats.
//!
//! Everything is row-major with a top-left origin. PFM stores scanlines
//! bottom-up; that flip happens only inside [`write_pfm`] / [`read_pfm`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Per-pixel class indices in `[0, num_classes)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        ensure!(
            labels.len() == width * height,
            "label array has {} entries, expected {}x{}",
            labels.len(),
            width,
            height
        );
        if let Some(i) = labels.iter().position(|&l| l as usize >= num_classes) {
            return Err(Error::Validation(format!(
                "label {} at ({}, {}) is not below num_classes={}",
                labels[i],
                i % width,
                i / width,
                num_classes
            )));
        }
        ensure!(
            (2..=256).contains(&num_classes),
            "num_classes must be in 2..=256, got {num_classes}"
        );
        Ok(LabelMask {
            width,
            height,
            num_classes,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, num_classes: usize, label: u8) -> Result<Self> {
        Self::new(width, height, num_classes, vec![label; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel count per class.
    pub fn histogram(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// Interleaved image with 1 or 3 channels and values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            channels == 1 || channels == 3,
            "images must have 1 or 3 channels, got {channels}"
        );
        ensure!(
            data.len() == width * height * channels,
            "image data has {} values, expected {}x{}x{}",
            data.len(),
            width,
            height,
            channels
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "image data contains non-finite values"
        );
        Ok(FloatImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Clamp every value into `[0, 1]`.
    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Channel-major copy (`[c][y][x]`), the layout the model consumes.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; n * self.channels];
        for p in 0..n {
            for c in 0..self.channels {
                out[c * n + p] = self.data[p * self.channels + c];
            }
        }
        out
    }

    /// Quantize to 8-bit with rounding.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Snap to the 8-bit grid, so the image survives a PNG round trip unchanged.
    pub fn quantized(&self) -> Self {
        FloatImage {
            data: self.to_bytes().iter().map(|&b| f64::from(b) / 255.0).collect(),
            ..self.clone()
        }
    }
}

/// Non-negative per-pixel loss weights.
///
/// Stored as `f32` so that a PFM round trip is lossless.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    width: usize,
    height: usize,
    weights: Vec<f32>,
}

impl WeightMap {
    pub fn new(width: usize, height: usize, weights: Vec<f32>) -> Result<Self> {
        ensure!(
            weights.len() == width * height,
            "weight array has {} entries, expected {}x{}",
            weights.len(),
            width,
            height
        );
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Validation(format!(
                "weight {} at ({}, {}) is negative or non-finite",
                weights[i],
                i % width,
                i / width
            )));
        }
        Ok(WeightMap {
            width,
            height,
            weights,
        })
    }

    pub fn uniform(width: usize, height: usize, value: f32) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.weights.iter().map(|w| w * factor).collect(),
        )
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

struct RawPng {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

fn read_png(path: &Path) -> Result<RawPng> {
    let mut decoder = png::Decoder::new(open(path)?);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_error(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| png_error(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!(
            "{}: unsupported bit depth {:?}, expected 8",
            path.display(),
            info.bit_depth
        )));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported color type {other:?}, expected grayscale or RGB",
                path.display()
            )))
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let row = width * channels;
    // Drop any per-line padding.
    let data = if info.line_size == row {
        buf.truncate(row * height);
        buf
    } else {
        buf.chunks(info.line_size)
            .take(height)
            .flat_map(|l| l[..row].iter().copied())
            .collect()
    };
    Ok(RawPng {
        width,
        height,
        channels,
        data,
    })
}

fn png_error(path: &Path, e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

fn write_png(path: &Path, width: usize, height: usize, channels: usize, data: &[u8]) -> Result<()> {
    let mut encoder = png::Encoder::new(create(path)?, width as u32, height as u32);
    encoder.set_color(if channels == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    encoder.set_depth(png::BitDepth::Eight);
    let encode = |e: png::EncodingError| match e {
        png::EncodingError::IoError(source) => Error::io(path, source),
        other => Error::Format(format!("{}: {other}", path.display())),
    };
    let mut writer = encoder.write_header().map_err(encode)?;
    writer.write_image_data(data).map_err(encode)?;
    writer.finish().map_err(encode)
}

/// Read an 8-bit single-channel PNG of raw class indices.
pub fn load_mask(path: impl AsRef<Path>, num_classes: usize) -> Result<LabelMask> {
    let path = path.as_ref();
    let raw = read_png(path)?;
    if raw.channels != 1 {
        return Err(Error::Format(format!(
            "{}: masks must be single-channel",
            path.display()
        )));
    }
    LabelMask::new(raw.width, raw.height, num_classes, raw.data).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_png(path.as_ref(), mask.width, mask.height, 1, &mask.labels)
}

/// Read an 8-bit grayscale or RGB PNG, scaling bytes by 1/255.
pub fn load_image(path: impl AsRef<Path>) -> Result<FloatImage> {
    let raw = read_png(path.as_ref())?;
    let data = raw.data.iter().map(|&b| f64::from(b) / 255.0).collect();
    FloatImage::new(raw.width, raw.height, raw.channels, data)
}

pub fn save_image(img: &FloatImage, path: impl AsRef<Path>) -> Result<()> {
    write_png(
        path.as_ref(),
        img.width,
        img.height,
        img.channels,
        &img.to_bytes(),
    )
}

/// Write an 8-bit RGB PNG from interleaved bytes.
pub fn save_rgb(path: impl AsRef<Path>, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_png(path.as_ref(), width, height, 3, rgb)
}

/// Write a grayscale PFM (`Pf`, little-endian, bottom-up scanlines).
pub fn write_pfm(path: impl AsRef<Path>, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    ensure!(
        values.len() == width * height,
        "PFM payload has {} values, expected {}x{}",
        values.len(),
        width,
        height
    );
    let mut out = create(path)?;
    let mut body = Vec::with_capacity(values.len() * 4 + 32);
    write!(body, "Pf\n{width} {height}\n-1.0\n").expect("write to Vec");
    for row in values.chunks(width.max(1)).rev() {
        for v in row {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&body)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

/// Read a grayscale PFM into top-down row-major order.
pub fn read_pfm(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes).map_err(|msg| Error::Format(format!("{}: {msg}", path.display())))
}

fn parse_pfm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f32>), String> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?);
        if tokens.len() == 1 && tokens[0] != "Pf" {
            return Err(format!("bad magic {:?}, expected \"Pf\"", tokens[0]));
        }
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing separator after scale".into());
    }
    pos += 1;

    let width: usize = tokens[1].parse().map_err(|_| "bad width")?;
    let height: usize = tokens[2].parse().map_err(|_| "bad height")?;
    let scale: f64 = tokens[3].parse().map_err(|_| "bad scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err("scale must be non-zero".into());
    }
    let little_endian = scale < 0.0;

    let payload = &bytes[pos..];
    let n = width
        .checked_mul(height)
        .ok_or("dimensions overflow")?;
    if payload.len() != n * 4 {
        return Err(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            n * 4
        ));
    }
    let mut values = vec![0f32; n];
    for (row_from_bottom, row) in payload.chunks(width.max(1) * 4).enumerate() {
        let y = height - 1 - row_from_bottom;
        for (x, b) in row.chunks_exact(4).enumerate() {
            let b = [b[0], b[1], b[2], b[3]];
            values[y * width + x] = if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
    }
    Ok((width, height, values))
}

pub fn save_weight_map(map: &WeightMap, path: impl AsRef<Path>) -> Result<()> {
    write_pfm(path, map.width, map.height, &map.weights)
}

pub fn load_weight_map(path: impl AsRef<Path>) -> Result<WeightMap> {
    let (w, h, values) = read_pfm(path)?;
    WeightMap::new(w, h, values)
}
