//! Pixel grids and binary masks, plus 8-bit PNG I/O.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height x width x channels` grid. Pixel values are expected in
/// `[0, 1]`; noise images reuse the type without that constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Image::zeros(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(y, x, c);
                }
            }
        }
        img
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Replicate-padded read of channel `c`.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize, c: usize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
    }

    /// Luminance with 0.299/0.587/0.114 weights; single-channel input is
    /// returned unchanged.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Replicates a single-channel image into three identical channels.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Rounds every value to the nearest 8-bit level, so a PNG round trip is lossless.
    pub fn quantize8(&self) -> Image {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Image::from_fn(height, width, self.channels, |y, x, c| {
            let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
            let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(self.height - 1);
            let x0 = (fx.floor() as usize).min(self.width - 1);
            let y1 = (y0 + 1).min(self.height - 1);
            let x1 = (x0 + 1).min(self.width - 1);
            let dy = fy - y0 as f64;
            let dx = fx - x0 as f64;
            let top = self.get(y0, x0, c) * (1.0 - dx) + self.get(y0, x1, c) * dx;
            let bottom = self.get(y1, x0, c) * (1.0 - dx) + self.get(y1, x1, c) * dx;
            top * (1.0 - dy) + bottom * dy
        })
    }

    /// Channel-planar copy (`C x H x W`), the layout used by the network code.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + i] = v;
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[f64]) -> Result<Image> {
        let hw = height * width;
        if planar.len() != hw * channels {
            return Err(Error::Shape(format!(
                "planar length {} != {channels}x{height}x{width}",
                planar.len()
            )));
        }
        let mut data = vec![0.0; hw * channels];
        for c in 0..channels {
            for i in 0..hw {
                data[i * channels + c] = planar[c * hw + i];
            }
        }
        Image::from_vec(height, width, channels, data)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let dynimg = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        let rgb = dynimg.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
        Image::from_vec(h as usize, w as usize, 3, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.to_rgb().data.iter().map(|&v| to_u8(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::format(path, "buffer size mismatch"))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary foreground annotation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Mask { height, width, data }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("mask length {} != {height}x{width}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Input("mask values must be 0 or 1".into()));
        }
        Ok(Mask { height, width, data })
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

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn matches(&self, image: &Image) -> bool {
        self.height == image.height() && self.width == image.width()
    }

    /// Inclusive `(y0, x0, y1, x1)` extents of the foreground, if any.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bb
    }

    /// Mask of pixels that are nonzero in any channel.
    pub fn from_nonzero(image: &Image) -> Mask {
        Mask::from_fn(image.height(), image.width(), |y, x| {
            (0..image.channels()).any(|c| image.get(y, x, c) > 0.0)
        })
    }

    pub fn as_image(&self) -> Image {
        Image::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x) as u8 as f64)
    }

    /// Reads a PNG, treating any value at or above mid-gray as foreground.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Mask> {
        let path = path.as_ref();
        let dynimg = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
        let luma = dynimg.to_luma8();
        let (w, h) = luma.dimensions();
        let data = luma.into_raw().into_iter().map(|b| (b >= 128) as u8).collect();
        Mask::from_vec(h as usize, w as usize, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.data.iter().map(|&v| v * 255).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| Error::format(path, "buffer size mismatch"))?;
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Multi-view images of one foreground object, each with its mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    views: Vec<(Image, Mask)>,
}

impl ReferenceSet {
    pub const MIN_VIEWS: usize = 3;
    pub const MAX_VIEWS: usize = 5;

    pub fn new(views: Vec<(Image, Mask)>) -> Result<Self> {
        if !(Self::MIN_VIEWS..=Self::MAX_VIEWS).contains(&views.len()) {
            return Err(Error::Input(format!(
                "a reference set needs {}-{} views, got {}",
                Self::MIN_VIEWS,
                Self::MAX_VIEWS,
                views.len()
            )));
        }
        for (img, mask) in &views {
            if !mask.matches(img) {
                return Err(Error::Shape("reference mask does not match its view".into()));
            }
            if mask.is_empty() {
                return Err(Error::EmptyMask);
            }
        }
        Ok(ReferenceSet { views })
    }

    pub fn views(&self) -> &[(Image, Mask)] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_of_quantized_image_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x) * 3 + c) as f64 / 104.0).quantize8();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);

        let m = Mask::from_fn(5, 7, |y, x| (x + y) % 3 == 0);
        let q = dir.path().join("m.png");
        m.save_png(&q).unwrap();
        assert_eq!(Mask::load_png(&q).unwrap(), m);
    }

    #[test]
    fn planar_layout_round_trips() {
        let img = Image::from_fn(3, 4, 3, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let p = img.to_planar();
        assert_eq!(p[12], img.get(0, 0, 1));
        assert_eq!(Image::from_planar(3, 4, 3, &p).unwrap(), img);
    }

    #[test]
    fn bbox_and_gray() {
        let m = Mask::from_fn(6, 6, |y, x| (2..4).contains(&y) && (1..5).contains(&x));
        assert_eq!(m.bbox(), Some((2, 1, 3, 4)));
        assert_eq!(Mask::zeros(3, 3).bbox(), None);
        let img = Image::filled(2, 2, 3, 1.0);
        assert!((img.to_gray().get(0, 0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(matches!(Image::from_vec(2, 2, 3, vec![0.0; 5]), Err(Error::Shape(_))));
        assert!(Mask::from_vec(2, 2, vec![0, 1, 2, 0]).is_err());
    }
}
