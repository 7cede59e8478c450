//! Row-major multi-channel float images plus PNG and PFM codecs.
//!
//! PNG files hold 8-bit samples: values are clamped to `[0, 1]` and scaled by
//! 255 with no transfer curve. RGBA colour is stored exactly as held in
//! memory, i.e. premultiplied by alpha. PFM files are little-endian (scale
//! `-1.0`) with rows stored bottom-to-top.

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Largest width or height accepted by the decoders.
pub const MAX_DIMENSION: usize = 1 << 14;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::InvalidImage(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for row in 0..height {
            for col in 0..width {
                for c in 0..channels {
                    data.push(f(row, col, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
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

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.data[self.index(row, col, channel)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: f64) {
        let i = self.index(row, col, channel);
        self.data[i] = value;
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let i = self.index(row, col, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Copies channels `start..start + count` into a new image.
    pub fn select_channels(&self, start: usize, count: usize) -> Image {
        assert!(start + count <= self.channels);
        let mut data = Vec::with_capacity(self.pixel_count() * count);
        for px in self.data.chunks_exact(self.channels) {
            data.extend_from_slice(&px[start..start + count]);
        }
        Image {
            width: self.width,
            height: self.height,
            channels: count,
            data,
        }
    }

    /// Concatenates the channels of two equally sized images.
    pub fn stack(&self, other: &Image) -> Result<Image> {
        if !self.same_size(other) {
            return Err(Error::DimensionMismatch("stacked images differ in size".into()));
        }
        let channels = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.pixel_count() * channels);
        for (a, b) in self.data.chunks_exact(self.channels).zip(other.data.chunks_exact(other.channels)) {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        Ok(Image {
            width: self.width,
            height: self.height,
            channels,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bilinear sample at continuous pixel coordinates `(x, y)` with pixel
    /// centers at half-integers; edges are clamped.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        let taps = BilinearTaps::new(x, y, self.width, self.height);
        for (c, o) in out.iter_mut().enumerate().take(self.channels) {
            *o = taps.apply(|r, col| self.get(r, col, c));
        }
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let dynamic = match self.channels {
            1 => image::DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w, h, self.data.iter().map(|&v| q(v)).collect())
                    .expect("buffer size matches"),
            ),
            3 | 4 => {
                let mut buf = Vec::with_capacity(self.pixel_count() * 4);
                for px in self.data.chunks_exact(self.channels) {
                    buf.extend([q(px[0]), q(px[1]), q(px[2])]);
                    buf.push(if self.channels == 4 { q(px[3]) } else { 255 });
                }
                image::DynamicImage::ImageRgba8(image::RgbaImage::from_raw(w, h, buf).expect("buffer size matches"))
            }
            c => return Err(Error::InvalidImage(format!("cannot write {c}-channel image as PNG"))),
        };
        let mut out = Cursor::new(Vec::new());
        dynamic
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::format("png", e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_png(&bytes)
    }

    /// Decodes a PNG: grayscale files give one channel, everything else four.
    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let mut reader = image::ImageReader::with_format(Cursor::new(bytes), image::ImageFormat::Png);
        let mut limits = image::Limits::default();
        limits.max_image_width = Some(MAX_DIMENSION as u32);
        limits.max_image_height = Some(MAX_DIMENSION as u32);
        limits.max_alloc = Some(256 << 20);
        reader.limits(limits);
        let decoded = reader.decode().map_err(|e| Error::format("png", e.to_string()))?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let scale = |v: u8| v as f64 / 255.0;
        let gray = matches!(
            decoded.color(),
            image::ColorType::L8 | image::ColorType::L16
        );
        if gray {
            let buf = decoded.to_luma8();
            Image::from_vec(w, h, 1, buf.into_raw().into_iter().map(scale).collect())
        } else {
            let buf = decoded.to_rgba8();
            Image::from_vec(w, h, 4, buf.into_raw().into_iter().map(scale).collect())
        }
    }

    pub fn write_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_pfm()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn encode_pfm(&self) -> Result<Vec<u8>> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(Error::InvalidImage(format!("cannot write {c}-channel image as PFM"))),
        };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len() * 4);
        for row in (0..self.height).rev() {
            let start = row * self.width * self.channels;
            for &v in &self.data[start..start + self.width * self.channels] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pfm(&bytes)
    }

    pub fn decode_pfm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Result<String> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
                if pos - start > 32 {
                    return Err(Error::format("pfm", "header token too long"));
                }
            }
            if start == pos {
                return Err(Error::format("pfm", "truncated header"));
            }
            let t = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format("pfm", "non-ascii header"))?;
            Ok(t.to_owned())
        };
        let channels = match token(bytes)?.as_str() {
            "Pf" => 1,
            "PF" => 3,
            other => return Err(Error::format("pfm", format!("bad magic {other:?}"))),
        };
        let parse_dim = |t: String| -> Result<usize> {
            let v: usize = t.parse().map_err(|_| Error::format("pfm", format!("bad dimension {t:?}")))?;
            if v == 0 || v > MAX_DIMENSION {
                return Err(Error::format("pfm", format!("dimension {v} out of range")));
            }
            Ok(v)
        };
        let width = parse_dim(token(bytes)?)?;
        let height = parse_dim(token(bytes)?)?;
        let scale_tok = token(bytes)?;
        let scale: f64 = scale_tok
            .parse()
            .map_err(|_| Error::format("pfm", format!("bad scale {scale_tok:?}")))?;
        if !scale.is_finite() || scale == 0.0 {
            return Err(Error::format("pfm", "scale must be finite and non-zero"));
        }
        let little_endian = scale < 0.0;
        // Exactly one whitespace byte separates the header from the payload.
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(Error::format("pfm", "missing header terminator"));
        }
        pos += 1;
        let count = width * height * channels;
        let payload = &bytes[pos..];
        if payload.len() != count * 4 {
            return Err(Error::format(
                "pfm",
                format!("expected {} payload bytes, found {}", count * 4, payload.len()),
            ));
        }
        let mut data = vec![0.0; count];
        let row_len = width * channels;
        for (k, chunk) in payload.chunks_exact(4).enumerate() {
            let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            let file_row = k / row_len;
            let row = height - 1 - file_row;
            data[row * row_len + k % row_len] = v as f64;
        }
        Image::from_vec(width, height, channels, data)
    }
}

/// The four taps of a clamped bilinear lookup and their weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTaps {
    pub rows: [usize; 2],
    pub cols: [usize; 2],
    pub fx: f64,
    pub fy: f64,
    /// d(sample)/dx is zero when the x coordinate is clamped at an edge.
    pub x_free: bool,
    pub y_free: bool,
}

impl BilinearTaps {
    pub fn new(x: f64, y: f64, width: usize, height: usize) -> Self {
        let (c0, c1, fx, x_free) = axis_taps(x - 0.5, width);
        let (r0, r1, fy, y_free) = axis_taps(y - 0.5, height);
        Self {
            rows: [r0, r1],
            cols: [c0, c1],
            fx,
            fy,
            x_free,
            y_free,
        }
    }

    #[inline]
    pub fn apply(&self, f: impl Fn(usize, usize) -> f64) -> f64 {
        let (fx, fy) = (self.fx, self.fy);
        (1.0 - fy) * ((1.0 - fx) * f(self.rows[0], self.cols[0]) + fx * f(self.rows[0], self.cols[1]))
            + fy * ((1.0 - fx) * f(self.rows[1], self.cols[0]) + fx * f(self.rows[1], self.cols[1]))
    }

    /// Derivatives of the sample w.r.t. the continuous `(x, y)` coordinates.
    pub fn gradient(&self, f: impl Fn(usize, usize) -> f64) -> (f64, f64) {
        let (fx, fy) = (self.fx, self.fy);
        let p00 = f(self.rows[0], self.cols[0]);
        let p01 = f(self.rows[0], self.cols[1]);
        let p10 = f(self.rows[1], self.cols[0]);
        let p11 = f(self.rows[1], self.cols[1]);
        let dx = if self.x_free {
            (1.0 - fy) * (p01 - p00) + fy * (p11 - p10)
        } else {
            0.0
        };
        let dy = if self.y_free {
            (1.0 - fx) * (p10 - p00) + fx * (p11 - p01)
        } else {
            0.0
        };
        (dx, dy)
    }
}

fn axis_taps(u: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    if !(u > 0.0) {
        return (0, 0, 0.0, false);
    }
    if u >= max {
        return (n - 1, n - 1, 0.0, false);
    }
    let i0 = u.floor();
    let i = i0 as usize;
    (i, (i + 1).min(n - 1), u - i0, true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_exact_pixel_and_midpoint() {
        let img = Image::from_vec(2, 1, 3, vec![0.2, 0.4, 0.6, 1.0, 0.0, 0.5]).unwrap();
        let mut out = [0.0; 3];
        img.sample_bilinear(0.5, 0.5, &mut out);
        assert_eq!(out, [0.2, 0.4, 0.6]);
        img.sample_bilinear(1.0, 0.5, &mut out);
        for (o, e) in out.iter().zip([0.6, 0.2, 0.55]) {
            assert!((o - e).abs() < 1e-12);
        }
        // Clamped at the borders.
        img.sample_bilinear(0.0, 0.0, &mut out);
        assert_eq!(out, [0.2, 0.4, 0.6]);
        img.sample_bilinear(2.0, 1.0, &mut out);
        assert_eq!(out, [1.0, 0.0, 0.5]);
    }

    #[test]
    fn pfm_round_trip_is_f32_exact() {
        let img = Image::from_fn(5, 3, 1, |r, c, _| r as f64 * 0.25 + c as f64 * 1.5);
        let bytes = img.encode_pfm().unwrap();
        assert!(bytes.starts_with(b"Pf\n5 3\n-1.0\n"));
        let back = Image::decode_pfm(&bytes).unwrap();
        assert_eq!(back, img);
        // Bottom row is stored first.
        let first = f32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]);
        assert_eq!(first as f64, img.get(2, 0, 0));
    }

    #[test]
    fn pfm_rejects_malformed_input() {
        assert!(Image::decode_pfm(b"").is_err());
        assert!(Image::decode_pfm(b"P6\n1 1\n-1.0\n\0\0\0\0").is_err());
        assert!(Image::decode_pfm(b"Pf\n1 1\n-1.0\n\0\0\0").is_err());
        assert!(Image::decode_pfm(b"Pf\n0 1\n-1.0\n").is_err());
        assert!(Image::decode_pfm(b"Pf\n99999999999 1\n-1.0\n").is_err());
        assert!(Image::decode_pfm(b"Pf\n1 1\nnan\n\0\0\0\0").is_err());
        assert!(Image::decode_pfm(b"Pf\n1 1\n-1.0").is_err());
    }

    #[test]
    fn pfm_big_endian_is_accepted() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(Image::decode_pfm(&bytes).unwrap().data(), &[2.5]);
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let img = Image::from_fn(4, 3, 4, |r, c, ch| ((r * 4 + c) * 4 + ch) as f64 / 47.0);
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back.channels(), 4);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let gray = Image::from_fn(3, 2, 1, |r, c, _| (r + c) as f64 / 3.0);
        let back = Image::decode_png(&gray.encode_png().unwrap()).unwrap();
        assert_eq!(back.channels(), 1);
    }

    #[test]
    fn png_clamps_out_of_range_values() {
        let img = Image::from_vec(1, 1, 4, vec![-1.0, 2.0, 0.5, 1.0]).unwrap();
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back.data()[0], 0.0);
        assert_eq!(back.data()[1], 1.0);
    }
}
