//! Satellite tile normalization: 640→512 box downscale and the quadrant split
//! that produces the 256×256 classifier inputs.

use thiserror::Error;

use crate::raster::{Raster, RasterError};

pub const SATELLITE_INPUT_PX: u32 = 640;
pub const DOWNSCALED_PX: u32 = 512;
pub const QUADRANT_PX: u32 = 256;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("expected a {expected}x{expected} raster, got {width}x{height}")]
    WrongSize {
        expected: u32,
        width: u32,
        height: u32,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn require_square(img: &Raster, side: u32) -> Result<(), PreprocessError> {
    if img.dimensions() != (side, side) {
        return Err(PreprocessError::WrongSize {
            expected: side,
            width: img.width(),
            height: img.height(),
        });
    }
    Ok(())
}

/// Index range and weights of the input samples covering each output sample
/// when `n_in` samples are averaged down to `n_out`.
fn box_weights(n_in: u32, n_out: u32) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in as usize);
            (first..last)
                .filter_map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Area-weighted resampling to `out_w`×`out_h`. Each output pixel is the mean
/// of the input area it covers, rounded to the nearest level.
pub fn resample_box(img: &Raster, out_w: u32, out_h: u32) -> Result<Raster, PreprocessError> {
    let (w, h) = img.dimensions();
    let wx = box_weights(w, out_w);
    let wy = box_weights(h, out_h);
    let src = img.as_bytes();

    // Horizontal pass into an (out_w × h) float buffer.
    let mut rows = vec![0f64; out_w as usize * h as usize * 3];
    for y in 0..h as usize {
        for (ox, taps) in wx.iter().enumerate() {
            let dst = (y * out_w as usize + ox) * 3;
            for &(x, wgt) in taps {
                let s = (y * w as usize + x) * 3;
                for c in 0..3 {
                    rows[dst + c] += wgt * src[s + c] as f64;
                }
            }
        }
    }

    let mut out = Vec::with_capacity(out_w as usize * out_h as usize * 3);
    for taps in &wy {
        for ox in 0..out_w as usize {
            let mut acc = [0f64; 3];
            for &(y, wgt) in taps {
                let s = (y * out_w as usize + ox) * 3;
                for c in 0..3 {
                    acc[c] += wgt * rows[s + c];
                }
            }
            out.extend(acc.iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
    Ok(Raster::from_rgb(out_w, out_h, out)?)
}

pub fn downscale(img: &Raster) -> Result<Raster, PreprocessError> {
    require_square(img, SATELLITE_INPUT_PX)?;
    resample_box(img, DOWNSCALED_PX, DOWNSCALED_PX)
}

/// The four classifier inputs cut from one downscaled satellite tile.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantSet {
    /// Top-left, top-right, bottom-left, bottom-right.
    pub tiles: [Raster; 4],
    /// Cache key of the satellite request the tiles came from.
    pub parent: String,
}

pub fn split_quadrants(img: &Raster, parent: impl Into<String>) -> Result<QuadrantSet, PreprocessError> {
    require_square(img, DOWNSCALED_PX)?;
    let q = QUADRANT_PX;
    let tiles = [
        img.crop(0, 0, q, q)?,
        img.crop(q, 0, q, q)?,
        img.crop(0, q, q, q)?,
        img.crop(q, q, q, q)?,
    ];
    Ok(QuadrantSet {
        tiles,
        parent: parent.into(),
    })
}

/// Inverse of [`split_quadrants`].
pub fn reassemble(set: &QuadrantSet) -> Result<Raster, PreprocessError> {
    for t in &set.tiles {
        require_square(t, QUADRANT_PX)?;
    }
    let side = 2 * QUADRANT_PX;
    let q = QUADRANT_PX as usize;
    let mut data = Vec::with_capacity(side as usize * side as usize * 3);
    for half in [&set.tiles[0..2], &set.tiles[2..4]] {
        for y in 0..q {
            for tile in half {
                data.extend_from_slice(&tile.as_bytes()[y * q * 3..(y + 1) * q * 3]);
            }
        }
    }
    Ok(Raster::from_rgb(side, side, data)?)
}

/// Downscale then split, the full satellite preparation.
pub fn prepare_satellite(img: &Raster, parent: impl Into<String>) -> Result<QuadrantSet, PreprocessError> {
    split_quadrants(&downscale(img)?, parent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(side: u32, seed: u64) -> Raster {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Raster::from_fn(side, side, |_, _| {
            let mut px = [0u8; 3];
            for c in &mut px {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                *c = (s >> 56) as u8;
            }
            px
        })
        .unwrap()
    }

    #[test]
    fn weights_partition_each_input_sample() {
        let w = box_weights(640, 512);
        let mut per_input = vec![0f64; 640];
        for taps in &w {
            let total: f64 = taps.iter().map(|t| t.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            for &(i, wgt) in taps {
                per_input[i] += wgt;
            }
        }
        // Every input contributes out/in = 0.8 of its mass in total.
        assert!(per_input.iter().all(|m| (m - 0.8).abs() < 1e-12));
    }

    #[test]
    fn constant_input_stays_constant() {
        let img = Raster::filled(640, 640, [17, 128, 250]).unwrap();
        let out = downscale(&img).unwrap();
        assert_eq!(out.dimensions(), (512, 512));
        assert_eq!(out, Raster::filled(512, 512, [17, 128, 250]).unwrap());
    }

    #[test]
    fn downscale_preserves_channel_means() {
        let img = noise(640, 3);
        let out = downscale(&img).unwrap();
        let (a, b) = (img.channel_means(), out.channel_means());
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() <= 1.0, "channel {c}: {} vs {}", a[c], b[c]);
        }
    }

    #[test]
    fn dimension_contracts() {
        let small = Raster::filled(512, 512, [0, 0, 0]).unwrap();
        assert!(matches!(downscale(&small), Err(PreprocessError::WrongSize { expected: 640, .. })));
        let big = Raster::filled(640, 640, [0, 0, 0]).unwrap();
        assert!(matches!(split_quadrants(&big, "k"), Err(PreprocessError::WrongSize { expected: 512, .. })));
        let oblong = Raster::filled(640, 512, [0, 0, 0]).unwrap();
        assert!(downscale(&oblong).is_err());
    }

    #[test]
    fn block_image_splits_in_declared_order() {
        let colors = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0]];
        let img = Raster::from_fn(512, 512, |x, y| colors[(y / 256 * 2 + x / 256) as usize]).unwrap();
        let set = split_quadrants(&img, "sat").unwrap();
        for (tile, color) in set.tiles.iter().zip(colors) {
            assert_eq!(*tile, Raster::filled(256, 256, color).unwrap());
        }
        assert_eq!(set.parent, "sat");
    }

    #[test]
    fn single_pixel_lands_in_bottom_left() {
        let mut img = Raster::filled(512, 512, [0, 0, 0]).unwrap();
        img.set_pixel(10, 300, [255, 255, 255]);
        let set = split_quadrants(&img, "sat").unwrap();
        for (i, tile) in set.tiles.iter().enumerate() {
            let lit: Vec<(u32, u32)> = (0..256)
                .flat_map(|y| (0..256).map(move |x| (x, y)))
                .filter(|&(x, y)| tile.pixel(x, y) != [0, 0, 0])
                .collect();
            if i == 2 {
                assert_eq!(lit, vec![(10, 44)]);
            } else {
                assert!(lit.is_empty());
            }
        }
    }

    #[test]
    fn downscale_commutes_with_split() {
        let img = noise(640, 11);
        let a = split_quadrants(&downscale(&img).unwrap(), "k").unwrap();
        let corners = [(0, 0), (320, 0), (0, 320), (320, 320)];
        for (tile, (x, y)) in a.tiles.iter().zip(corners) {
            let b = resample_box(&img.crop(x, y, 320, 320).unwrap(), 256, 256).unwrap();
            for (p, q) in tile.as_bytes().iter().zip(b.as_bytes()) {
                assert!((*p as i16 - *q as i16).abs() <= 1);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn split_then_reassemble_is_identity(seed in any::<u64>()) {
            let img = noise(512, seed);
            let back = reassemble(&split_quadrants(&img, "k").unwrap()).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
