//! Raster types, HSV conversion, masking and bilinear resizing.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("pixel buffer holds {actual} pixels but {width}x{height} needs {expected}")]
    BufferSize {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("dimension mismatch: image is {image_w}x{image_h}, mask is {mask_w}x{mask_h}")]
    DimensionMismatch {
        image_w: usize,
        image_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("mask PNG {path} holds value {value}; only 0 and 255 are allowed")]
    NonBinaryMask { path: String, value: u8 },
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<(), ImageError> {
    if width == 0 || height == 0 {
        return Err(ImageError::EmptyDimensions { width, height });
    }
    let expected = width * height;
    if len != expected {
        return Err(ImageError::BufferSize {
            width,
            height,
            expected,
            actual: len,
        });
    }
    Ok(())
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self, ImageError> {
        check_dims(width, height, pixels.len())?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Result<Self, ImageError> {
        Self::new(width, height, vec![color; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self, ImageError> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn into_pixels(self) -> Vec<[u8; 3]> {
        self.pixels
    }
}

/// 8-bit single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        check_dims(width, height, pixels.len())?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvPixel {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

/// Per-pixel foreground/background decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, ImageError> {
        check_dims(width, height, bits.len())?;
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, ImageError> {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self::new(width, height, bits)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask, ImageError> {
        self.same_dims(other)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect();
        Ok(BinaryMask {
            width: self.width,
            height: self.height,
            bits,
        })
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|&b| !b).collect(),
        }
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> Result<bool, ImageError> {
        self.same_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b))
    }

    /// Dice overlap `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
    pub fn dice(&self, other: &BinaryMask) -> Result<f64, ImageError> {
        self.same_dims(other)?;
        let inter = self.bits.iter().zip(&other.bits).filter(|(&a, &b)| a && b).count();
        let denom = self.count() + other.count();
        if denom == 0 {
            return Ok(1.0);
        }
        Ok(2.0 * inter as f64 / denom as f64)
    }

    fn same_dims(&self, other: &BinaryMask) -> Result<(), ImageError> {
        if self.dimensions() != other.dimensions() {
            return Err(ImageError::DimensionMismatch {
                image_w: self.width,
                image_h: self.height,
                mask_w: other.width,
                mask_h: other.height,
            });
        }
        Ok(())
    }
}

/// Hexagonal-cone RGB to HSV. Achromatic pixels get hue 0.
pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> HsvPixel {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = f64::from(max - min);
    let v = f64::from(max) / 255.0;
    if max == min {
        return HsvPixel { h: 0.0, s: 0.0, v };
    }
    let s = delta / f64::from(max);
    let (rf, gf, bf) = (f64::from(r), f64::from(g), f64::from(b));
    let sector = if max == r {
        (gf - bf) / delta
    } else if max == g {
        (bf - rf) / delta + 2.0
    } else {
        (rf - gf) / delta + 4.0
    };
    let mut h = 60.0 * sector;
    if h < 0.0 {
        h += 360.0;
    }
    if h >= 360.0 {
        h -= 360.0;
    }
    HsvPixel { h, s, v }
}

/// Inverse of [`rgb_to_hsv`], rounding each channel to the nearest integer.
pub fn hsv_to_rgb(p: HsvPixel) -> [u8; 3] {
    let c = p.v * p.s;
    let hp = p.h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r1, g1, b1) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = p.v - c;
    let to_u8 = |ch: f64| ((ch + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to_u8(r1), to_u8(g1), to_u8(b1)]
}

/// BT.601 luma, rounded and clamped.
pub fn luma([r, g, b]: [u8; 3]) -> u8 {
    let y = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
    y.round().clamp(0.0, 255.0) as u8
}

pub fn to_gray(img: &RgbImage) -> GrayImage {
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&p| luma(p)).collect(),
    }
}

/// Zeroes background pixels; foreground pixels pass through.
pub fn apply_mask(img: &RgbImage, mask: &BinaryMask) -> Result<RgbImage, ImageError> {
    if img.dimensions() != mask.dimensions() {
        return Err(ImageError::DimensionMismatch {
            image_w: img.width,
            image_h: img.height,
            mask_w: mask.width,
            mask_h: mask.height,
        });
    }
    let pixels = img
        .pixels
        .iter()
        .zip(&mask.bits)
        .map(|(&p, &fg)| if fg { p } else { [0, 0, 0] })
        .collect();
    Ok(RgbImage {
        width: img.width,
        height: img.height,
        pixels,
    })
}

/// Source coordinate and blend weight for one output axis, using
/// half-pixel-centre alignment clamped to the source edge.
fn sample_axis(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear resize with half-pixel-centre alignment.
pub fn resize(img: &RgbImage, target_w: usize, target_h: usize) -> Result<RgbImage, ImageError> {
    if target_w == 0 || target_h == 0 {
        return Err(ImageError::EmptyDimensions {
            width: target_w,
            height: target_h,
        });
    }
    if (target_w, target_h) == img.dimensions() {
        return Ok(img.clone());
    }
    let xs: Vec<_> = (0..target_w).map(|x| sample_axis(x, img.width, target_w)).collect();
    let mut pixels = Vec::with_capacity(target_w * target_h);
    for y in 0..target_h {
        let (y0, y1, fy) = sample_axis(y, img.height, target_h);
        for &(x0, x1, fx) in &xs {
            let (p00, p10) = (img.get(x0, y0), img.get(x1, y0));
            let (p01, p11) = (img.get(x0, y1), img.get(x1, y1));
            let mut out = [0u8; 3];
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
                let bottom = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            pixels.push(out);
        }
    }
    RgbImage::new(target_w, target_h, pixels)
}

fn codec_err(path: &Path) -> impl FnOnce(image::ImageError) -> ImageError + '_ {
    move |source| ImageError::Codec {
        path: path.display().to_string(),
        source,
    }
}

/// Loads a PNG or JPEG as 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage, ImageError> {
    let img = image::open(path).map_err(codec_err(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| p.0).collect();
    RgbImage::new(w as usize, h as usize, pixels)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), ImageError> {
    let raw: Vec<u8> = img.pixels.iter().flatten().copied().collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, raw)
        .expect("buffer length checked at construction");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(codec_err(path))
}

/// Writes a mask as 8-bit grayscale PNG: background 0, foreground 255.
pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<(), ImageError> {
    let raw: Vec<u8> = mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, raw)
        .expect("buffer length checked at construction");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(codec_err(path))
}

/// Reads a mask PNG. Values other than 0 and 255 are rejected.
pub fn load_mask_png(path: &Path) -> Result<BinaryMask, ImageError> {
    let img = image::open(path).map_err(codec_err(path))?.to_luma8();
    let (w, h) = img.dimensions();
    let mut bits = Vec::with_capacity((w * h) as usize);
    for p in img.pixels() {
        match p.0[0] {
            0 => bits.push(false),
            255 => bits.push(true),
            value => {
                return Err(ImageError::NonBinaryMask {
                    path: path.display().to_string(),
                    value,
                })
            }
        }
    }
    BinaryMask::new(w as usize, h as usize, bits)
}
