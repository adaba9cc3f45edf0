//! Center-point heatmaps, peak decoding and initial contours.
//!
//! Grids run at stride 4: cell `(row, col)` covers pixels
//! `[4·col, 4·col + 4) × [4·row, 4·row + 4)` and is represented by its center
//! `(4·col + 2, 4·row + 2)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DensifiedContour, Point2};

pub const STRIDE: usize = 4;

/// Grid size for an image dimension.
pub fn grid_dim(image_dim: usize) -> usize {
    image_dim.div_ceil(STRIDE)
}

/// Cell containing a full-resolution point.
pub fn cell_of(p: Point2) -> (usize, usize) {
    let s = STRIDE as f64;
    ((p.y / s).floor() as usize, (p.x / s).floor() as usize)
}

/// Full-resolution center of a cell.
pub fn cell_center(row: usize, col: usize) -> Point2 {
    let s = STRIDE as f64;
    Point2::new((col as f64 + 0.5) * s, (row as f64 + 0.5) * s)
}

/// Single-channel stride-4 grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize) -> Heatmap {
        Heatmap {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn for_image(image_width: usize, image_height: usize) -> Heatmap {
        Heatmap::zeros(grid_dim(image_width), grid_dim(image_height))
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }
}

/// Multi-channel stride-4 grid, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(width: usize, height: usize, channels: usize) -> FeatureGrid {
        FeatureGrid {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.width + col) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let o = (row * self.width + col) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CenterDetection {
    pub position: Point2,
    pub score: f64,
    pub row: usize,
    pub col: usize,
}

/// Per-vertex offsets in stride-4 units, before the expansion factor.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetSet {
    pub offsets: Vec<Point2>,
}

/// Gaussian width in grid cells for an object of size `w × h` pixels.
pub fn gaussian_sigma(w: f64, h: f64) -> f64 {
    (w.min(h) / (6.0 * STRIDE as f64)).max(1.0)
}

/// Ground-truth heatmap: one unit Gaussian per center, peaked at the cell
/// containing it, combined by per-cell max.
pub fn build_heatmap_target(
    centers: &[Point2],
    sizes: &[(f64, f64)],
    image_width: usize,
    image_height: usize,
) -> Result<Heatmap> {
    if centers.len() != sizes.len() {
        return Err(Error::Shape(format!(
            "{} centers but {} sizes",
            centers.len(),
            sizes.len()
        )));
    }
    let mut hm = Heatmap::for_image(image_width, image_height);
    for (c, &(w, h)) in centers.iter().zip(sizes) {
        if !(c.x >= 0.0 && c.y >= 0.0 && c.x < image_width as f64 && c.y < image_height as f64) {
            return Err(Error::InvalidArgument(format!(
                "center ({}, {}) outside the {image_width}×{image_height} image",
                c.x, c.y
            )));
        }
        let (cr, cc) = cell_of(*c);
        let sigma = gaussian_sigma(w, h);
        let denom = 2.0 * sigma * sigma;
        for row in 0..hm.height {
            for col in 0..hm.width {
                let dr = row as f64 - cr as f64;
                let dc = col as f64 - cc as f64;
                let v = (-(dr * dr + dc * dc) / denom).exp();
                let slot = &mut hm.values[row * hm.width + col];
                *slot = slot.max(v);
            }
        }
    }
    Ok(hm)
}

/// Local maxima of the 3×3 neighborhood, best `top_k` by value (row-major
/// among ties), keeping those strictly above `threshold`. Sorted by
/// descending score.
pub fn decode_peaks(heatmap: &Heatmap, threshold: f64, top_k: usize) -> Vec<CenterDetection> {
    let (w, h) = (heatmap.width, heatmap.height);
    let mut peaks = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let v = heatmap.get(row, col);
            let mut is_max = true;
            'nb: for r in row.saturating_sub(1)..=(row + 1).min(h - 1) {
                for c in col.saturating_sub(1)..=(col + 1).min(w - 1) {
                    if heatmap.get(r, c) > v {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                peaks.push((v, row, col));
            }
        }
    }
    // Stable sort keeps row-major order among equal scores.
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    peaks.truncate(top_k);
    peaks
        .into_iter()
        .filter(|&(v, _, _)| v > threshold)
        .map(|(score, row, col)| CenterDetection {
            position: cell_center(row, col),
            score,
            row,
            col,
        })
        .collect()
}

/// Initial contour `center + gamma · stride · offset`.
pub fn compose_initial_contour(
    center: Point2,
    offsets: &OffsetSet,
    gamma: f64,
    anchor_count: usize,
) -> Result<DensifiedContour> {
    let scale = gamma * STRIDE as f64;
    let points = offsets.offsets.iter().map(|&d| center + d * scale).collect();
    DensifiedContour::from_points(points, anchor_count)
}

/// Offsets that [`compose_initial_contour`] maps back onto `gt`.
pub fn offset_targets(gt: &[Point2], center: Point2, gamma: f64) -> OffsetSet {
    let scale = gamma * STRIDE as f64;
    OffsetSet {
        offsets: gt.iter().map(|&p| (p - center) * (1.0 / scale)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{densify, Polygon};

    #[test]
    fn single_center_has_one_unit_cell() {
        let hm = build_heatmap_target(&[Point2::new(41.0, 23.0)], &[(30.0, 20.0)], 128, 96).unwrap();
        assert_eq!((hm.width, hm.height), (32, 24));
        assert_eq!(hm.values.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(hm.get(5, 10), 1.0);
    }

    #[test]
    fn no_centers_gives_zeros() {
        let hm = build_heatmap_target(&[], &[], 64, 64).unwrap();
        assert!(hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_centers_match_direct_formula() {
        let centers = [Point2::new(10.0, 10.0), Point2::new(100.0, 90.0)];
        let sizes = [(48.0, 60.0), (30.0, 30.0)];
        let hm = build_heatmap_target(&centers, &sizes, 128, 128).unwrap();
        assert_eq!(hm.values.iter().filter(|&&v| v == 1.0).count(), 2);
        for row in 0..32 {
            for col in 0..32 {
                let mut expect: f64 = 0.0;
                for (c, s) in centers.iter().zip(&sizes) {
                    let cr = (c.y / 4.0).floor();
                    let cc = (c.x / 4.0).floor();
                    let sigma = f64::max(1.0, s.0.min(s.1) / 24.0);
                    let d2 = (row as f64 - cr).powi(2) + (col as f64 - cc).powi(2);
                    expect = expect.max((-d2 / (2.0 * sigma * sigma)).exp());
                }
                assert!((hm.get(row, col) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn center_outside_image_is_rejected() {
        assert!(build_heatmap_target(&[Point2::new(130.0, 5.0)], &[(4.0, 4.0)], 128, 128).is_err());
    }

    #[test]
    fn decode_single_peak() {
        let mut hm = Heatmap::zeros(8, 8);
        hm.values[3 * 8 + 5] = 1.0;
        let d = decode_peaks(&hm, 0.2, 200);
        assert_eq!(d.len(), 1);
        assert_eq!((d[0].row, d[0].col), (3, 5));
        assert_eq!(d[0].position, Point2::new(22.0, 14.0));
    }

    #[test]
    fn decode_below_threshold_is_empty() {
        let mut hm = Heatmap::zeros(8, 8);
        hm.values.iter_mut().for_each(|v| *v = 0.1);
        assert!(decode_peaks(&hm, 0.2, 200).is_empty());
    }

    #[test]
    fn decode_keeps_top_k() {
        let mut hm = Heatmap::zeros(16, 16);
        let peaks = [(1, 1, 0.5), (1, 10, 0.9), (8, 4, 0.3), (12, 12, 0.7), (14, 2, 0.6)];
        for &(r, c, v) in &peaks {
            hm.values[r * 16 + c] = v;
        }
        let mut oracle: Vec<_> = peaks.to_vec();
        oracle.sort_by(|a, b| b.2.total_cmp(&a.2));
        let got = decode_peaks(&hm, 0.2, 3);
        let got: Vec<_> = got.iter().map(|d| (d.row, d.col, d.score)).collect();
        assert_eq!(got, oracle[..3].to_vec());
    }

    #[test]
    fn compose_cases() {
        let zero = OffsetSet {
            offsets: vec![Point2::default(); 8],
        };
        let c = compose_initial_contour(Point2::new(3.0, 4.0), &zero, 10.0, 4).unwrap();
        assert!(c.points().iter().all(|&p| p == Point2::new(3.0, 4.0)));

        // 0.1 px expressed in stride units.
        let one = OffsetSet {
            offsets: vec![Point2::new(0.1 / STRIDE as f64, 0.0); 4],
        };
        let c = compose_initial_contour(Point2::new(10.0, 10.0), &one, 10.0, 4).unwrap();
        assert!((c.points()[0].x - 11.0).abs() < 1e-12);
        assert_eq!(c.points()[0].y, 10.0);
    }

    #[test]
    fn offsets_round_trip() {
        let gt = densify(&Polygon::rect(20.3, 11.0, 71.9, 60.2).unwrap(), 64, 4).unwrap();
        let center = Point2::new(46.0, 34.0);
        let off = offset_targets(gt.points(), center, 10.0);
        let back = compose_initial_contour(center, &off, 10.0, 4).unwrap();
        for (a, b) in back.points().iter().zip(gt.points()) {
            assert!(a.dist(*b) <= 1e-12);
        }
        let collapsed = vec![center; 4];
        assert!(offset_targets(&collapsed, center, 10.0)
            .offsets
            .iter()
            .all(|&d| d == Point2::default()));
    }

    #[test]
    fn square_offsets_are_antisymmetric() {
        let gt = densify(&Polygon::rect(0.0, 0.0, 100.0, 100.0).unwrap(), 64, 4).unwrap();
        let off = offset_targets(gt.points(), Point2::new(50.0, 50.0), 10.0);
        for i in 0..64 {
            let a = off.offsets[i];
            let b = off.offsets[(i + 32) % 64];
            assert!((a.x + b.x).abs() < 1e-12 && (a.y + b.y).abs() < 1e-12);
        }
    }
}
