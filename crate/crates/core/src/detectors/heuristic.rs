//! Edge-statistics stand-in for the trained models, for offline demos.
//!
//! Quadrant probability is the fraction of interior pixels whose luminance
//! gradient `|gx| + |gy|` reaches [`EDGE_THRESHOLD`], scaled so that a
//! quarter of the tile being edges saturates at 1.
//!
//! Street images are cut into square cells. In each cell a "line" is a run of
//! consecutive rows where at least half the pixels are horizontal edges.
//! Three or more lines read as stairs; one or two lines read as a railing
//! when the cell also has dense vertical edges (balusters), otherwise as a
//! short wall.

use super::{BackendError, Detection, DetectionClass, DetectorBackend};
use crate::raster::Raster;

pub const EDGE_THRESHOLD: i32 = 48;
const DENSITY_SATURATION: f64 = 0.25;
const CELL_PX: u32 = 80;
const LINE_ROW_FRACTION: f64 = 0.5;
const RAILING_VERTICAL_DENSITY: f64 = 0.15;

#[derive(Debug, Clone, Default)]
pub struct HeuristicBackend;

struct Gradients {
    width: usize,
    height: usize,
    gx: Vec<i32>,
    gy: Vec<i32>,
}

impl Gradients {
    fn new(img: &Raster) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let luma: Vec<i32> = img
            .as_bytes()
            .chunks_exact(3)
            .map(|p| (299 * p[0] as i32 + 587 * p[1] as i32 + 114 * p[2] as i32) / 1000)
            .collect();
        let mut gx = vec![0; w * h];
        let mut gy = vec![0; w * h];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let i = y * w + x;
                gx[i] = luma[i + 1] - luma[i - 1];
                gy[i] = luma[i + w] - luma[i - w];
            }
        }
        Gradients {
            width: w,
            height: h,
            gx,
            gy,
        }
    }

    fn is_edge(&self, i: usize) -> bool {
        self.gx[i].abs() + self.gy[i].abs() >= EDGE_THRESHOLD
    }

    fn is_horizontal_edge(&self, i: usize) -> bool {
        self.is_edge(i) && self.gy[i].abs() > self.gx[i].abs()
    }

    fn is_vertical_edge(&self, i: usize) -> bool {
        self.is_edge(i) && self.gx[i].abs() > self.gy[i].abs()
    }

    fn edge_density(&self) -> f64 {
        if self.width < 3 || self.height < 3 {
            return 0.0;
        }
        let mut edges = 0usize;
        for y in 1..self.height - 1 {
            for x in 1..self.width - 1 {
                if self.is_edge(y * self.width + x) {
                    edges += 1;
                }
            }
        }
        edges as f64 / ((self.width - 2) * (self.height - 2)) as f64
    }
}

impl HeuristicBackend {
    fn classify_cell(g: &Gradients, x0: usize, y0: usize, cw: usize, ch: usize) -> Option<(DetectionClass, f64)> {
        let mut lines = 0usize;
        let mut in_line = false;
        let mut coverage_sum = 0.0;
        let mut line_rows = 0usize;
        let mut vertical = 0usize;
        for y in y0..y0 + ch {
            let row = y * g.width;
            let horizontal = (x0..x0 + cw).filter(|&x| g.is_horizontal_edge(row + x)).count();
            vertical += (x0..x0 + cw).filter(|&x| g.is_vertical_edge(row + x)).count();
            let fraction = horizontal as f64 / cw as f64;
            if fraction >= LINE_ROW_FRACTION {
                if !in_line {
                    lines += 1;
                }
                in_line = true;
                coverage_sum += fraction;
                line_rows += 1;
            } else {
                in_line = false;
            }
        }
        if lines == 0 {
            return None;
        }
        let vertical_density = vertical as f64 / (cw * ch) as f64;
        let class = if lines >= 3 {
            DetectionClass::Stairs
        } else if vertical_density >= RAILING_VERTICAL_DENSITY {
            DetectionClass::Railing
        } else {
            DetectionClass::ShortWall
        };
        let coverage = coverage_sum / line_rows as f64;
        Some((class, 0.5 + 0.5 * coverage.min(1.0)))
    }
}

impl DetectorBackend for HeuristicBackend {
    fn id(&self) -> &str {
        "heuristic"
    }

    fn classify_quadrant(&self, tile: &Raster, _image: &str, _quadrant: usize) -> Result<f64, BackendError> {
        Ok((Gradients::new(tile).edge_density() / DENSITY_SATURATION).min(1.0))
    }

    fn detect_street(&self, img: &Raster, _image: &str) -> Result<Vec<Detection>, BackendError> {
        let g = Gradients::new(img);
        let mut out = Vec::new();
        let (w, h) = img.dimensions();
        let mut y0 = 0;
        while y0 < h {
            let ch = CELL_PX.min(h - y0);
            let mut x0 = 0;
            while x0 < w {
                let cw = CELL_PX.min(w - x0);
                if let Some((class, confidence)) =
                    Self::classify_cell(&g, x0 as usize, y0 as usize, cw as usize, ch as usize)
                {
                    let (x1, y1) = ((x0 + cw) as f64, (y0 + ch) as f64);
                    let (x0f, y0f) = (x0 as f64, y0 as f64);
                    out.push(Detection {
                        class,
                        confidence,
                        polygon: vec![[x0f, y0f], [x1, y0f], [x1, y1], [x0f, y1]],
                    });
                }
                x0 += cw;
            }
            y0 += ch;
        }
        Ok(out)
    }
}
