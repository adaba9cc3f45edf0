//! Synthetic building scenes and the handcrafted stride-4 feature provider.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::detection::{grid_dim, FeatureGrid, STRIDE};
use crate::error::{Error, Result};
use crate::geometry::{normalize_orientation, BBox, Point2, Polygon};

pub const FEATURE_CHANNELS: usize = 8;

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<GrayImage> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} bytes for a {width}×{height} image",
                data.len()
            )));
        }
        Ok(GrayImage { width, height, data })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}

/// Relative weights of the three building shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeMix {
    pub rectangle: f64,
    pub rotated: f64,
    pub l_shape: f64,
}

impl Default for ShapeMix {
    fn default() -> ShapeMix {
        ShapeMix {
            rectangle: 0.4,
            rotated: 0.3,
            l_shape: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Rotated,
    LShape,
}

impl ShapeMix {
    fn pick(&self, rng: &mut impl Rng) -> ShapeKind {
        let total = self.rectangle + self.rotated + self.l_shape;
        let u = rng.gen::<f64>() * total;
        if u < self.rectangle {
            ShapeKind::Rectangle
        } else if u < self.rectangle + self.rotated {
            ShapeKind::Rotated
        } else {
            ShapeKind::LShape
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Footprint area range in pixels².
    pub min_area: f64,
    pub max_area: f64,
    /// Width/height ratio range before rotation.
    pub min_aspect: f64,
    pub max_aspect: f64,
    pub shape_mix: ShapeMix,
    /// Standard deviation of additive Gaussian noise, in gray levels.
    pub noise: f64,
    pub margin: f64,
    /// Minimum gap between building bounding boxes.
    pub gap: f64,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> SceneConfig {
        SceneConfig {
            width: 128,
            height: 128,
            min_area: 500.0,
            max_area: 1800.0,
            min_aspect: 0.5,
            max_aspect: 2.0,
            shape_mix: ShapeMix::default(),
            noise: 6.0,
            margin: 4.0,
            gap: 3.0,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.width > 0
            && self.height > 0
            && self.min_area > 0.0
            && self.min_area <= self.max_area
            && self.min_aspect > 0.0
            && self.min_aspect <= self.max_aspect
            && self.noise >= 0.0
            && self.margin >= 0.0;
        let mix = self.shape_mix;
        if !ok || mix.rectangle < 0.0 || mix.rotated < 0.0 || mix.l_shape < 0.0
            || mix.rectangle + mix.rotated + mix.l_shape <= 0.0
        {
            return Err(Error::InvalidArgument("invalid scene configuration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: GrayImage,
    pub buildings: Vec<Polygon>,
    pub seed: u64,
}

/// Footprint centered at the origin with area `area`.
fn make_shape(kind: ShapeKind, area: f64, aspect: f64, rng: &mut impl Rng) -> Result<Polygon> {
    let corners: Vec<(f64, f64)> = match kind {
        ShapeKind::Rectangle | ShapeKind::Rotated => {
            let w = (area * aspect).sqrt();
            let h = area / w;
            vec![(-w / 2.0, -h / 2.0), (w / 2.0, -h / 2.0), (w / 2.0, h / 2.0), (-w / 2.0, h / 2.0)]
        }
        ShapeKind::LShape => {
            let fw = rng.gen_range(0.3..0.45);
            let fh = rng.gen_range(0.3..0.45);
            let bbox_area = area / (1.0 - fw * fh);
            let w = (bbox_area * aspect).sqrt();
            let h = bbox_area / w;
            let (x0, y0, x1, y1) = (-w / 2.0, -h / 2.0, w / 2.0, h / 2.0);
            let (nx, ny) = (x1 - fw * w, y1 - fh * h);
            // Notch at the bottom-right, rotated to a random corner below.
            vec![(x0, y0), (x1, y0), (x1, ny), (nx, ny), (nx, y1), (x0, y1)]
        }
    };
    let turn = match kind {
        ShapeKind::Rectangle => 0.0,
        ShapeKind::Rotated => rng.gen_range(-FRAC_PI_4..FRAC_PI_4),
        ShapeKind::LShape => rng.gen_range(0..4) as f64 * std::f64::consts::FRAC_PI_2,
    };
    let (s, c) = turn.sin_cos();
    let pts: Vec<Point2> = corners
        .iter()
        .map(|&(x, y)| Point2::new(c * x - s * y, s * x + c * y))
        .collect();
    normalize_orientation(&Polygon::new(pts)?)
}

fn boxes_clear(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.max.x + gap <= b.min.x
        || b.max.x + gap <= a.min.x
        || a.max.y + gap <= b.min.y
        || b.max.y + gap <= a.min.y
}

/// Anti-aliased fill: each pixel blends toward `fg` by the fraction of its
/// 4×4 subsamples inside the polygon.
fn fill_polygon(canvas: &mut [f64], width: usize, height: usize, poly: &Polygon, fg: f64) {
    const SUB: usize = 4;
    let bb = poly.bbox();
    let c0 = bb.min.x.floor().max(0.0) as usize;
    let r0 = bb.min.y.floor().max(0.0) as usize;
    let c1 = (bb.max.x.ceil() as usize).min(width);
    let r1 = (bb.max.y.ceil() as usize).min(height);
    for row in r0..r1 {
        for col in c0..c1 {
            let mut hits = 0;
            for sy in 0..SUB {
                for sx in 0..SUB {
                    let p = Point2::new(
                        col as f64 + (sx as f64 + 0.5) / SUB as f64,
                        row as f64 + (sy as f64 + 0.5) / SUB as f64,
                    );
                    if poly.contains(p) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let f = hits as f64 / (SUB * SUB) as f64;
                let v = &mut canvas[row * width + col];
                *v += f * (fg - *v);
            }
        }
    }
}

/// Scene with exactly `n_buildings` footprints; a pure function of
/// `(seed, cfg, n_buildings)`.
pub fn generate_scene(seed: u64, cfg: &SceneConfig, n_buildings: usize) -> Result<SyntheticScene> {
    cfg.validate()?;
    if n_buildings == 0 {
        return Err(Error::InvalidArgument("a scene needs at least one building".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let mut buildings: Vec<Polygon> = Vec::with_capacity(n_buildings);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n_buildings);
    for _ in 0..n_buildings {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let kind = cfg.shape_mix.pick(&mut rng);
            let area = rng.gen_range(cfg.min_area..=cfg.max_area);
            let aspect = rng.gen_range(cfg.min_aspect.ln()..=cfg.max_aspect.ln()).exp();
            let shape = make_shape(kind, area, aspect, &mut rng)?;
            let sb = shape.bbox();
            let lo_x = cfg.margin - sb.min.x;
            let hi_x = w - cfg.margin - sb.max.x;
            let lo_y = cfg.margin - sb.min.y;
            let hi_y = h - cfg.margin - sb.max.y;
            if lo_x >= hi_x || lo_y >= hi_y {
                continue;
            }
            let shift = Point2::new(rng.gen_range(lo_x..hi_x), rng.gen_range(lo_y..hi_y));
            let poly = shape.translate(shift);
            let bb = poly.bbox();
            if boxes.iter().all(|b| boxes_clear(b, &bb, cfg.gap)) {
                boxes.push(bb);
                buildings.push(poly);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Placement(format!(
                "could not place building {} of {n_buildings} after {} attempts",
                buildings.len() + 1,
                cfg.max_retries
            )));
        }
    }
    let background = rng.gen_range(40.0..90.0);
    let mut canvas = vec![background; cfg.width * cfg.height];
    for poly in &buildings {
        let fg = rng.gen_range(160.0..230.0);
        fill_polygon(&mut canvas, cfg.width, cfg.height, poly, fg);
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in &mut canvas {
            *v += normal.sample(&mut rng);
        }
    }
    let data = canvas.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    Ok(SyntheticScene {
        image: GrayImage::new(cfg.width, cfg.height, data)?,
        buildings,
        seed,
    })
}

/// `count` scenes with 1..=`max_buildings` footprints each. Scene `i` uses
/// seed `seed · 1_000_003 + i`; a scene that cannot be placed is retried with
/// one fewer building.
pub fn generate_dataset(
    seed: u64,
    cfg: &SceneConfig,
    count: usize,
    max_buildings: usize,
) -> Result<Vec<SyntheticScene>> {
    if max_buildings == 0 {
        return Err(Error::InvalidArgument("max_buildings must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let mut n = rng.gen_range(1..=max_buildings);
            loop {
                match generate_scene(scene_seed, cfg, n) {
                    Err(Error::Placement(_)) if n > 1 => n -= 1,
                    other => return other,
                }
            }
        })
        .collect()
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders.
fn blur(img: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            tmp[row * w + col] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * img[row * w + clamp(col as i64 + t as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            out[row * w + col] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * tmp[clamp(row as i64 + t as i64 - r, h) * w + col])
                .sum();
        }
    }
    out
}

/// Mean over each 4×4 block (clipped to the image).
fn block_mean(img: &[f64], w: usize, h: usize) -> Vec<f64> {
    let (gw, gh) = (grid_dim(w), grid_dim(h));
    let mut out = vec![0.0; gw * gh];
    for gr in 0..gh {
        for gc in 0..gw {
            let mut sum = 0.0;
            let mut n = 0;
            for row in gr * STRIDE..((gr + 1) * STRIDE).min(h) {
                for col in gc * STRIDE..((gc + 1) * STRIDE).min(w) {
                    sum += img[row * w + col];
                    n += 1;
                }
            }
            out[gr * gw + gc] = sum / n as f64;
        }
    }
    out
}

/// Eight-channel stride-4 features: intensity, x and y gradient, gradient
/// magnitude, normalized column and row, and σ = 1 and σ = 3 blurs.
pub fn feature_provider(image: &GrayImage) -> FeatureGrid {
    let (w, h) = (image.width, image.height);
    let img: Vec<f64> = image.data.iter().map(|&v| v as f64 / 255.0).collect();
    let smooth = blur(&img, w, h, 1.0);
    let wide = blur(&img, w, h, 3.0);
    let at = |row: usize, col: usize| smooth[row * w + col];
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for row in 0..h {
        for col in 0..w {
            let (l, r) = (col.saturating_sub(1), (col + 1).min(w - 1));
            let (u, d) = (row.saturating_sub(1), (row + 1).min(h - 1));
            // Scaled to change per grid cell.
            gx[row * w + col] = (at(row, r) - at(row, l)) / 2.0 * STRIDE as f64;
            gy[row * w + col] = (at(d, col) - at(u, col)) / 2.0 * STRIDE as f64;
        }
    }
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect();
    let channels = [
        block_mean(&img, w, h),
        block_mean(&gx, w, h),
        block_mean(&gy, w, h),
        block_mean(&mag, w, h),
        block_mean(&smooth, w, h),
        block_mean(&wide, w, h),
    ];
    let (gw, gh) = (grid_dim(w), grid_dim(h));
    let mut grid = FeatureGrid::zeros(gw, gh, FEATURE_CHANNELS);
    let norm = |i: usize, n: usize| if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    for row in 0..gh {
        for col in 0..gw {
            let i = row * gw + col;
            let cell = grid.at_mut(row, col);
            cell[0] = channels[0][i];
            cell[1] = channels[1][i];
            cell[2] = channels[2][i];
            cell[3] = channels[3][i];
            cell[4] = norm(col, gw);
            cell[5] = norm(row, gh);
            cell[6] = channels[4][i];
            cell[7] = channels[5][i];
        }
    }
    grid
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pixel_area, rasterize};

    #[test]
    fn scenes_are_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(7, &cfg, 3).unwrap();
        let b = generate_scene(7, &cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(8, &cfg, 3).unwrap());
    }

    #[test]
    fn buildings_respect_area_margin_and_spacing() {
        let cfg = SceneConfig::default();
        for seed in 0..40 {
            let scene = generate_scene(seed, &cfg, 4).unwrap();
            assert_eq!(scene.buildings.len(), 4);
            for (i, b) in scene.buildings.iter().enumerate() {
                let a = b.area();
                assert!(a >= cfg.min_area - 1e-6 && a <= cfg.max_area + 1e-6, "area {a}");
                assert!(b.area() > 0.0 && crate::geometry::signed_area(b.vertices()).unwrap() > 0.0);
                let bb = b.bbox();
                assert!(bb.min.x >= 4.0 && bb.min.y >= 4.0 && bb.max.x <= 124.0 && bb.max.y <= 124.0);
                assert!(b.contains(bb.center()));
                for other in &scene.buildings[i + 1..] {
                    assert!(boxes_clear(&bb, &other.bbox(), cfg.gap));
                }
            }
        }
    }

    #[test]
    fn one_building_without_noise_is_one_region() {
        let cfg = SceneConfig {
            noise: 0.0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(3, &cfg, 1).unwrap();
        let bg = scene.image.get(0, 0);
        let fg: Vec<bool> = scene.image.data.iter().map(|&v| v != bg).collect();
        // Flood fill from the first foreground pixel.
        let start = fg.iter().position(|&b| b).unwrap();
        let mut seen = vec![false; fg.len()];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / 128) as i64, (i % 128) as i64);
            for (dr, dc) in [(0, 1), (1, 0), (0, -1), (-1, 0)] {
                let (nr, nc) = (r + dr, c + dc);
                if (0..128).contains(&nr) && (0..128).contains(&nc) {
                    let j = (nr * 128 + nc) as usize;
                    if fg[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        assert_eq!(seen.iter().filter(|&&s| s).count(), fg.iter().filter(|&&b| b).count());
        let inside = rasterize(&scene.buildings[0], 128, 128).unwrap();
        assert!(inside.count() as f64 <= fg.iter().filter(|&&b| b).count() as f64);
        assert!(pixel_area(&scene.buildings[0]) > 0);
    }

    #[test]
    fn crowded_scene_reports_placement_failure() {
        let cfg = SceneConfig {
            width: 40,
            height: 40,
            max_retries: 20,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(1, &cfg, 4), Err(Error::Placement(_))));
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_dataset(5, &cfg, 6, 4).unwrap();
        assert_eq!(a, generate_dataset(5, &cfg, 6, 4).unwrap());
        assert!(a.iter().all(|s| (1..=4).contains(&s.buildings.len())));
    }

    fn image_from(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> GrayImage {
        let mut data = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                data.push(f(r, c));
            }
        }
        GrayImage::new(w, h, data).unwrap()
    }

    #[test]
    fn constant_image_has_no_gradient() {
        let g = feature_provider(&image_from(32, 24, |_, _| 100));
        assert_eq!((g.width, g.height, g.channels), (8, 6, 8));
        for r in 0..6 {
            for c in 0..8 {
                assert!(g.get(r, c, 1).abs() < 1e-12);
                assert!(g.get(r, c, 2).abs() < 1e-12);
                assert!(g.get(r, c, 3).abs() < 1e-12);
                assert!((g.get(r, c, 0) - 100.0 / 255.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_edge_peaks_at_its_column() {
        let g = feature_provider(&image_from(64, 16, |_, c| if c < 34 { 20 } else { 220 }));
        for r in 0..4 {
            let best = (0..16)
                .max_by(|&a, &b| g.get(r, a, 3).total_cmp(&g.get(r, b, 3)))
                .unwrap();
            assert_eq!(best, 8);
            assert!(g.get(r, 8, 1) > 0.0);
            assert!(g.get(r, 8, 2).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinate_channels_span_unit_square() {
        let g = feature_provider(&image_from(40, 20, |r, c| (r * 3 + c) as u8));
        assert_eq!((g.get(0, 0, 4), g.get(0, 0, 5)), (0.0, 0.0));
        assert_eq!((g.get(4, 9, 4), g.get(4, 9, 5)), (1.0, 1.0));
    }

    #[test]
    fn features_are_translation_consistent() {
        let base = |r: usize, c: usize| ((r * 7 + c * 13) % 97 + if (20..40).contains(&c) { 120 } else { 0 }) as u8;
        let a = feature_provider(&image_from(96, 64, base));
        let b = feature_provider(&image_from(96, 64, |r, c| if c >= 4 { base(r, c - 4) } else { 0 }));
        // The σ = 3 blur reaches 9 px: stay 3 cells clear of the borders.
        for r in 3..13 {
            for c in 4..20 {
                for ch in [0, 1, 2, 3, 6, 7] {
                    assert!((a.get(r, c, ch) - b.get(r, c + 1, ch)).abs() < 1e-12, "ch {ch}");
                }
            }
        }
    }
}
