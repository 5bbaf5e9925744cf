//! 8-bit RGB rasters, row-major with y pointing down.

use std::io::Cursor;

use image::{ImageFormat, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster dimensions must be positive, got {width}x{height}")]
    Empty { width: u32, height: u32 },
    #[error("buffer holds {actual} bytes, {width}x{height} RGB needs {expected}")]
    BufferLength {
        width: u32,
        height: u32,
        expected: usize,
        actual: usize,
    },
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
}

#[derive(Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Raster")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl Raster {
    pub fn from_rgb(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Empty { width, height });
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(RasterError::BufferLength {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Raster {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, RasterError> {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self::from_rgb(width, height, data)
    }

    /// Builds a raster by evaluating `f(x, y)` for every pixel.
    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> [u8; 3],
    ) -> Result<Self, RasterError> {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::from_rgb(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.offset(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        assert!(x < self.width && y < self.height, "pixel ({x}, {y}) out of bounds");
        (y as usize * self.width as usize + x as usize) * 3
    }

    /// Copies the `w`×`h` window whose top-left corner is (`x0`, `y0`).
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Result<Raster, RasterError> {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for y in y0..y0 + h {
            let start = self.offset(x0, y);
            data.extend_from_slice(&self.data[start..start + w as usize * 3]);
        }
        Raster::from_rgb(w, h, data)
    }

    /// Per-channel mean intensity.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as u64;
            }
        }
        let n = (self.width as u64 * self.height as u64) as f64;
        sums.map(|s| s as f64 / n)
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let img = RgbImage::from_raw(self.width, self.height, self.data.clone())
            .expect("buffer length checked at construction");
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Decodes any format the image crate was built with, converting to RGB8.
    pub fn decode(bytes: &[u8]) -> Result<Raster, RasterError> {
        let img = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = img.dimensions();
        Raster::from_rgb(w, h, img.into_raw())
    }
}
