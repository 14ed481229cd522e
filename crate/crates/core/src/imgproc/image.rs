use crate::error::{Error, Result};

/// 8-bit single-channel raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageGray {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

/// Axis-aligned pixel rectangle inside an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl ImageGray {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("empty image {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Size(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(ImageGray {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Luminance (ITU-R BT.601) of an interleaved RGB buffer.
    pub fn from_rgb(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * width * height {
            return Err(Error::Size(format!(
                "{} bytes for a {width}x{height} RGB image",
                rgb.len()
            )));
        }
        let pixels = rgb
            .chunks_exact(3)
            .map(|p| {
                let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                y.round().clamp(0.0, 255.0) as u8
            })
            .collect();
        Self::new(width, height, pixels)
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

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn full_rect(&self) -> Rect {
        Rect {
            x: 0,
            y: 0,
            w: self.width,
            h: self.height,
        }
    }

    /// Copies out a sub-rectangle.
    pub fn crop(&self, r: Rect) -> Result<ImageGray> {
        if r.x + r.w > self.width || r.y + r.h > self.height {
            return Err(Error::Size(format!(
                "crop {r:?} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(r.w * r.h);
        for y in r.y..r.y + r.h {
            out.extend_from_slice(&self.pixels[y * self.width + r.x..y * self.width + r.x + r.w]);
        }
        ImageGray::new(r.w, r.h, out)
    }

    /// Writes `patch` back at the rectangle's origin.
    pub fn paste(&mut self, r: Rect, patch: &ImageGray) -> Result<()> {
        if patch.width != r.w || patch.height != r.h || r.x + r.w > self.width || r.y + r.h > self.height
        {
            return Err(Error::Size(format!("paste {r:?} does not fit")));
        }
        for row in 0..r.h {
            let dst = (r.y + row) * self.width + r.x;
            self.pixels[dst..dst + r.w].copy_from_slice(&patch.pixels[row * r.w..(row + 1) * r.w]);
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    /// Population variance of the 8-bit values.
    pub fn variance(&self) -> f64 {
        let (n, s1, s2) = moments(&self.pixels);
        spread(n, s1, s2) as f64 / (n as f64 * n as f64)
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Pixel values scaled to `[0, 1]`.
    pub fn to_unit_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }
}

/// Count, sum and sum of squares, exact in integers.
pub(crate) fn moments(pixels: &[u8]) -> (u128, u128, u128) {
    let mut s1 = 0u128;
    let mut s2 = 0u128;
    for &p in pixels {
        s1 += p as u128;
        s2 += (p as u128) * (p as u128);
    }
    (pixels.len() as u128, s1, s2)
}

/// `n * sum(x^2) - sum(x)^2` = `n^2 * variance`, exact.
pub(crate) fn spread(n: u128, s1: u128, s2: u128) -> u128 {
    n * s2 - s1 * s1
}
