//! Polygon primitives, anchored contour resampling and raster support.
//!
//! Coordinates are image pixels with `y` growing downward. A polygon is
//! "clockwise" when it runs top → right → bottom → left on screen, which is a
//! positive shoelace area in these coordinates.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance under which two points are treated as the same vertex.
const COINCIDENT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn dist_sq(self, other: Point2) -> f64 {
        let d = self - other;
        d.x * d.x + d.y * d.y
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub min: Point2,
    pub max: Point2,
}

impl BBox {
    pub fn of(points: &[Point2]) -> Option<BBox> {
        let first = *points.first()?;
        let mut bb = BBox {
            min: first,
            max: first,
        };
        for p in &points[1..] {
            bb.min.x = bb.min.x.min(p.x);
            bb.min.y = bb.min.y.min(p.y);
            bb.max.x = bb.max.x.max(p.x);
            bb.max.y = bb.max.y.max(p.y);
        }
        Some(bb)
    }

    pub fn center(&self) -> Point2 {
        Point2::new(
            0.5 * (self.min.x + self.max.x),
            0.5 * (self.min.y + self.max.y),
        )
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }
}

/// Closed polygon; the last vertex connects back to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point2>", into = "Vec<Point2>")]
pub struct Polygon {
    vertices: Vec<Point2>,
}

impl Polygon {
    /// Builds a polygon, dropping consecutive duplicate vertices (including a
    /// repeated closing vertex).
    pub fn new(vertices: Vec<Point2>) -> Result<Polygon> {
        if let Some(p) = vertices.iter().find(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("vertex ({}, {})", p.x, p.y)));
        }
        let mut out: Vec<Point2> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if out.last().map_or(true, |q| q.dist(p) > COINCIDENT_EPS) {
                out.push(p);
            }
        }
        while out.len() > 1 && out[0].dist(out[out.len() - 1]) <= COINCIDENT_EPS {
            out.pop();
        }
        if out.len() < 3 {
            return Err(Error::TooFewVertices(out.len()));
        }
        Ok(Polygon { vertices: out })
    }

    pub fn from_coords(coords: &[(f64, f64)]) -> Result<Polygon> {
        Polygon::new(coords.iter().map(|&(x, y)| Point2::new(x, y)).collect())
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]`, clockwise.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Polygon> {
        Polygon::from_coords(&[(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn bbox(&self) -> BBox {
        BBox::of(&self.vertices).expect("polygon has at least 3 vertices")
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point2, Point2)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn perimeter(&self) -> f64 {
        self.edges().map(|(a, b)| a.dist(b)).sum()
    }

    /// Area centroid.
    pub fn centroid(&self) -> Point2 {
        let v = &self.vertices;
        let (mut cx, mut cy, mut a2) = (0.0, 0.0, 0.0);
        for i in 0..v.len() {
            let (p, q) = (v[i], v[(i + 1) % v.len()]);
            let c = p.cross(q);
            a2 += c;
            cx += (p.x + q.x) * c;
            cy += (p.y + q.y) * c;
        }
        if a2.abs() < 1e-300 {
            return self.bbox().center();
        }
        Point2::new(cx / (3.0 * a2), cy / (3.0 * a2))
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices).abs()
    }

    pub fn translate(&self, d: Point2) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|&p| p + d).collect(),
        }
    }

    pub fn reversed(&self) -> Polygon {
        let mut vertices = self.vertices.clone();
        vertices.reverse();
        Polygon { vertices }
    }

    /// Even–odd point containment.
    pub fn contains(&self, p: Point2) -> bool {
        let mut inside = false;
        for (a, b) in self.edges() {
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) / (b.y - a.y) * (b.x - a.x);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Distance from `p` to the nearest point on the boundary.
    pub fn boundary_distance(&self, p: Point2) -> f64 {
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }
}

impl TryFrom<Vec<Point2>> for Polygon {
    type Error = Error;
    fn try_from(v: Vec<Point2>) -> Result<Polygon> {
        Polygon::new(v)
    }
}

impl From<Polygon> for Vec<Point2> {
    fn from(p: Polygon) -> Vec<Point2> {
        p.vertices
    }
}

pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a.lerp(b, t))
}

fn shoelace(points: &[Point2]) -> f64 {
    let n = points.len();
    let twice: f64 = (0..n).map(|i| points[i].cross(points[(i + 1) % n])).sum();
    0.5 * twice
}

/// Shoelace area; positive for clockwise (top → right → bottom → left)
/// traversal in image coordinates.
pub fn signed_area(vertices: &[Point2]) -> Result<f64> {
    if vertices.len() < 3 {
        return Err(Error::TooFewVertices(vertices.len()));
    }
    Ok(shoelace(vertices))
}

/// Returns the polygon with clockwise vertex order.
pub fn normalize_orientation(poly: &Polygon) -> Result<Polygon> {
    let area = shoelace(&poly.vertices);
    let scale = poly.bbox().width().max(poly.bbox().height()).max(1.0);
    if area.abs() <= 1e-12 * scale * scale {
        return Err(Error::Degenerate("polygon has zero area".into()));
    }
    Ok(if area > 0.0 {
        poly.clone()
    } else {
        poly.reversed()
    })
}

/// Unit direction of the `k`-th of `s` control rays: `k = 0` points up and the
/// rest follow clockwise, so `s = 4` gives top, right, bottom, left.
pub fn control_direction(k: usize, s: usize) -> Point2 {
    let theta = 2.0 * PI * k as f64 / s as f64;
    let (sin, cos) = theta.sin_cos();
    // Exact axis values for the quarter turns.
    let snap = |v: f64| if v.abs() < 1e-15 { 0.0 } else { v };
    Point2::new(snap(sin), snap(-cos))
}

#[derive(Debug, Clone, Copy)]
struct RayHit {
    edge: usize,
    /// Parameter along the edge in `[0, 1]`.
    u: f64,
    /// Distance from the ray origin.
    t: f64,
    point: Point2,
}

fn ray_hits(poly: &Polygon, center: Point2, dir: Point2) -> Vec<RayHit> {
    let mut hits = Vec::new();
    for (edge, (a, b)) in poly.edges().enumerate() {
        let e = b - a;
        let denom = dir.cross(e);
        if denom.abs() < 1e-15 {
            continue;
        }
        let w = a - center;
        let t = w.cross(e) / denom;
        let u = w.cross(dir) / denom;
        if t >= -1e-12 && (-1e-12..=1.0 + 1e-12).contains(&u) {
            let u = u.clamp(0.0, 1.0);
            // Snap onto the edge so the hit is exactly on the boundary.
            let point = if u == 0.0 {
                a
            } else if u == 1.0 {
                b
            } else {
                a.lerp(b, u)
            };
            hits.push(RayHit {
                edge,
                u,
                t: t.max(0.0),
                point,
            });
        }
    }
    hits
}

fn farthest_hit(poly: &Polygon, center: Point2, dir: Point2) -> Result<RayHit> {
    ray_hits(poly, center, dir)
        .into_iter()
        .fold(None, |best: Option<RayHit>, h| match best {
            Some(b) if b.t >= h.t => Some(b),
            _ => Some(h),
        })
        .ok_or(Error::NoIntersection)
}

/// Farthest crossing of the ray `center + t·dir` (t ≥ 0) with the boundary.
pub fn ray_boundary_intersection(poly: &Polygon, center: Point2, dir: Point2) -> Result<Point2> {
    farthest_hit(poly, center, dir).map(|h| h.point)
}

/// A polygon together with the vertex indices of its control vertices,
/// listed in direction order (top first).
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredPolygon {
    pub polygon: Polygon,
    pub anchors: Vec<usize>,
}

/// Inserts `s` control vertices where the directional rays from the bbox
/// center leave the polygon. Existing vertices are kept; a control vertex that
/// lands on an existing vertex marks that vertex instead of duplicating it.
pub fn insert_control_vertices(poly: &Polygon, s: usize) -> Result<AnchoredPolygon> {
    insert_control_vertices_from(poly, s, poly.bbox().center())
}

/// [`insert_control_vertices`] with the rays cast from `center`.
pub fn insert_control_vertices_from(poly: &Polygon, s: usize, center: Point2) -> Result<AnchoredPolygon> {
    if s == 0 {
        return Err(Error::InvalidArgument("anchor count must be positive".into()));
    }
    let hits = (0..s)
        .map(|k| farthest_hit(poly, center, control_direction(k, s)))
        .collect::<Result<Vec<_>>>()?;

    let n = poly.len();
    let verts = poly.vertices();
    // Resolve each hit either to an existing vertex or to an (edge, u) insertion.
    enum Slot {
        Vertex(usize),
        Edge(usize, f64, Point2),
    }
    let slots: Vec<Slot> = hits
        .iter()
        .map(|h| {
            let a = verts[h.edge];
            let b = verts[(h.edge + 1) % n];
            if h.point.dist(a) <= COINCIDENT_EPS {
                Slot::Vertex(h.edge)
            } else if h.point.dist(b) <= COINCIDENT_EPS {
                Slot::Vertex((h.edge + 1) % n)
            } else {
                Slot::Edge(h.edge, h.u, h.point)
            }
        })
        .collect();

    let mut out = Vec::with_capacity(n + s);
    let mut anchors = vec![usize::MAX; s];
    for i in 0..n {
        let vi = out.len();
        out.push(verts[i]);
        for (k, slot) in slots.iter().enumerate() {
            if let Slot::Vertex(v) = slot {
                if *v == i {
                    anchors[k] = vi;
                }
            }
        }
        let mut on_edge: Vec<(f64, usize, Point2)> = slots
            .iter()
            .enumerate()
            .filter_map(|(k, slot)| match slot {
                Slot::Edge(e, u, p) if *e == i => Some((*u, k, *p)),
                _ => None,
            })
            .collect();
        on_edge.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, k, p) in on_edge {
            if out.last().map_or(false, |q: &Point2| q.dist(p) <= COINCIDENT_EPS) {
                anchors[k] = out.len() - 1;
            } else {
                anchors[k] = out.len();
                out.push(p);
            }
        }
    }
    Ok(AnchoredPolygon {
        polygon: Polygon { vertices: out },
        anchors,
    })
}

/// A closed contour of exactly `N` points whose control vertices sit at
/// indices `k·N/s`. Index 0 is the top control vertex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensifiedContour {
    points: Vec<Point2>,
    anchor_count: usize,
}

impl DensifiedContour {
    /// Wraps raw points, e.g. a predicted contour, with the index-based anchor
    /// layout.
    pub fn from_points(points: Vec<Point2>, anchor_count: usize) -> Result<DensifiedContour> {
        if anchor_count == 0 || points.is_empty() || points.len() % anchor_count != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} points cannot be split into {} equal arcs",
                points.len(),
                anchor_count
            )));
        }
        Ok(DensifiedContour {
            points,
            anchor_count,
        })
    }

    pub fn points(&self) -> &[Point2] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point2> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn anchor_count(&self) -> usize {
        self.anchor_count
    }

    pub fn anchor_indices(&self) -> Vec<usize> {
        let step = self.points.len() / self.anchor_count;
        (0..self.anchor_count).map(|k| k * step).collect()
    }

    pub fn bbox(&self) -> BBox {
        BBox::of(&self.points).expect("contour is non-empty")
    }

    pub fn to_polygon(&self) -> Result<Polygon> {
        Polygon::new(self.points.clone())
    }
}

/// Samples `count` points uniformly by arc length along the open polyline
/// `path`, starting at `path[0]` and stopping one step short of its end.
fn resample_arc(path: &[Point2], count: usize) -> Result<Vec<Point2>> {
    let seg_len: Vec<f64> = path.windows(2).map(|w| w[0].dist(w[1])).collect();
    let total: f64 = seg_len.iter().sum();
    if total <= COINCIDENT_EPS {
        return Err(Error::Degenerate("zero-length arc between control vertices".into()));
    }
    let step = total / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut seg = 0;
    let mut seg_start = 0.0;
    for i in 0..count {
        let target = step * i as f64;
        while seg + 1 < seg_len.len() && seg_start + seg_len[seg] < target {
            seg_start += seg_len[seg];
            seg += 1;
        }
        let local = if seg_len[seg] > 0.0 {
            ((target - seg_start) / seg_len[seg]).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out.push(if local == 0.0 {
            path[seg]
        } else if local == 1.0 {
            path[seg + 1]
        } else {
            path[seg].lerp(path[seg + 1], local)
        });
    }
    Ok(out)
}

fn ordered_anchors(anchored: AnchoredPolygon) -> Result<AnchoredPolygon> {
    let m = anchored.polygon.len();
    let start = anchored.anchors[0];
    // Boundary positions of the anchors, measured from the top anchor.
    let offset = |idx: usize| (idx + m - start) % m;
    for k in 1..anchored.anchors.len() {
        if offset(anchored.anchors[k]) <= offset(anchored.anchors[k - 1]) {
            return Err(Error::Degenerate(
                "control vertices are not in clockwise order along the boundary".into(),
            ));
        }
    }
    Ok(anchored)
}

/// Resamples a polygon into `n` points: `s` control vertices from the bbox
/// center, then `n / s` points per arc, spaced uniformly by arc length.
pub fn densify(poly: &Polygon, n: usize, s: usize) -> Result<DensifiedContour> {
    if s == 0 || n == 0 || n % s != 0 {
        return Err(Error::InvalidArgument(format!(
            "contour size {n} is not divisible by anchor count {s}"
        )));
    }
    let oriented = normalize_orientation(poly)?;
    // A bbox center on the boundary (e.g. a right triangle) collapses the
    // rays; the area centroid is interior for every convex polygon.
    let anchored = insert_control_vertices(&oriented, s)
        .and_then(ordered_anchors)
        .or_else(|_| insert_control_vertices_from(&oriented, s, oriented.centroid()).and_then(ordered_anchors))?;
    let verts = anchored.polygon.vertices();
    let m = verts.len();
    let per_arc = n / s;
    let mut points = Vec::with_capacity(n);
    for k in 0..s {
        let from = anchored.anchors[k];
        let to = anchored.anchors[(k + 1) % s];
        let mut len = (to + m - from) % m;
        if len == 0 {
            len = m;
        }
        let path: Vec<Point2> = (0..=len).map(|j| verts[(from + j) % m]).collect();
        points.extend(resample_arc(&path, per_arc)?);
    }
    DensifiedContour::from_points(points, s)
}

/// Splits every contour segment into ten equal parts. Original vertices are
/// kept at indices `10·i`.
pub fn densify_x10(points: &[Point2]) -> Vec<Point2> {
    subdivide(points, 10)
}

pub fn subdivide(points: &[Point2], factor: usize) -> Vec<Point2> {
    let n = points.len();
    let mut out = Vec::with_capacity(n * factor);
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        out.push(a);
        for j in 1..factor {
            out.push(a.lerp(b, j as f64 / factor as f64));
        }
    }
    out
}

/// Coordinates relative to the contour's bbox center, scaled by its extent.
/// Every output lies in `[-0.5, 0.5]`.
pub fn relative_coords(points: &[Point2]) -> Result<Vec<(f64, f64)>> {
    let bb = BBox::of(points).ok_or(Error::TooFewVertices(0))?;
    let (w, h) = (bb.width(), bb.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::Degenerate("contour bbox has zero extent".into()));
    }
    let c = bb.center();
    Ok(points
        .iter()
        .map(|p| {
            (
                ((p.x - c.x) / w).clamp(-0.5, 0.5),
                ((p.y - c.y) / h).clamp(-0.5, 0.5),
            )
        })
        .collect())
}

/// Interior angle at `cur`, in `[0, π]`.
pub fn vertex_angle(prev: Point2, cur: Point2, next: Point2) -> Result<f64> {
    let a = prev - cur;
    let b = next - cur;
    if a.norm() <= COINCIDENT_EPS || b.norm() <= COINCIDENT_EPS {
        return Err(Error::Degenerate("coincident points in angle".into()));
    }
    Ok(a.cross(b).abs().atan2(a.dot(b)))
}

/// Binary raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl RasterMask {
    pub fn new(width: usize, height: usize) -> Result<RasterMask> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask dimensions must be positive, got {width}×{height}"
            )));
        }
        Ok(RasterMask {
            width,
            height,
            bits: vec![false; width * height],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.bits[row * self.width + col] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &RasterMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &RasterMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    /// `self ∧ ¬other`.
    pub fn minus(&self, other: &RasterMask) -> RasterMask {
        RasterMask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a && !b)
                .collect(),
        }
    }

    pub fn and(&self, other: &RasterMask) -> RasterMask {
        RasterMask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }

    pub fn is_subset_of(&self, other: &RasterMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

/// Row crossings of the polygon boundary with the horizontal line `y`,
/// using the half-open rule so each crossing is counted once.
fn scanline_crossings(poly: &Polygon, y: f64, out: &mut Vec<f64>) {
    out.clear();
    for (a, b) in poly.edges() {
        if (a.y > y) != (b.y > y) {
            out.push(a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x));
        }
    }
    out.sort_by(f64::total_cmp);
}

/// Smallest column whose pixel center `c + 0.5` is `>= x`. A center is inside
/// a crossing pair `[x0, x1)` exactly as in [`Polygon::contains`].
fn first_center_at_or_after(x: f64) -> i64 {
    let mut c = (x - 0.5).ceil() as i64;
    while (c as f64 + 0.5) < x {
        c += 1;
    }
    while ((c - 1) as f64 + 0.5) >= x {
        c -= 1;
    }
    c
}

/// Sets every pixel whose center lies inside the polygon (even–odd rule).
pub fn rasterize(poly: &Polygon, width: usize, height: usize) -> Result<RasterMask> {
    let mut mask = RasterMask::new(width, height)?;
    let mut xs = Vec::new();
    for row in 0..height {
        scanline_crossings(poly, row as f64 + 0.5, &mut xs);
        for pair in xs.chunks_exact(2) {
            let c0 = first_center_at_or_after(pair[0]).max(0);
            let c1 = first_center_at_or_after(pair[1]).min(width as i64);
            for col in c0..c1 {
                mask.set(row, col as usize, true);
            }
        }
    }
    Ok(mask)
}

/// Number of pixel centers inside the polygon, without clipping to a frame.
pub fn pixel_area(poly: &Polygon) -> usize {
    let bb = poly.bbox();
    let mut xs = Vec::new();
    let mut total = 0usize;
    let r0 = (bb.min.y - 0.5).floor() as i64;
    let r1 = (bb.max.y + 0.5).ceil() as i64;
    for row in r0..=r1 {
        scanline_crossings(poly, row as f64 + 0.5, &mut xs);
        for pair in xs.chunks_exact(2) {
            let c0 = first_center_at_or_after(pair[0]);
            let c1 = first_center_at_or_after(pair[1]);
            total += (c1 - c0).max(0) as usize;
        }
    }
    total
}

/// One-dimensional running max of radius `r` over each row (`horizontal`) or
/// column. Pixels outside the frame count as unset.
fn dilate_axis(mask: &RasterMask, r: usize, horizontal: bool) -> RasterMask {
    let (w, h) = (mask.width, mask.height);
    let mut out = RasterMask {
        width: w,
        height: h,
        bits: vec![false; w * h],
    };
    let (lines, len) = if horizontal { (h, w) } else { (w, h) };
    for line in 0..lines {
        let idx = |k: usize| {
            if horizontal {
                line * w + k
            } else {
                k * w + line
            }
        };
        // Distance to the nearest set pixel at or before k.
        let mut last_set: Option<usize> = None;
        let mut left = vec![usize::MAX; len];
        for (k, l) in left.iter_mut().enumerate() {
            if mask.bits[idx(k)] {
                last_set = Some(k);
            }
            if let Some(s) = last_set {
                *l = k - s;
            }
        }
        let mut next_set: Option<usize> = None;
        for k in (0..len).rev() {
            if mask.bits[idx(k)] {
                next_set = Some(k);
            }
            let right = next_set.map_or(usize::MAX, |s| s - k);
            if left[k].min(right) <= r {
                out.bits[idx(k)] = true;
            }
        }
    }
    out
}

/// Dilation by a `(2r+1)²` square, clipped to the frame.
pub fn expand_mask(mask: &RasterMask, r: usize) -> RasterMask {
    if r == 0 {
        return mask.clone();
    }
    dilate_axis(&dilate_axis(mask, r, true), r, false)
}

/// Erosion by a `(2r+1)²` square; pixels outside the frame count as unset.
pub fn erode_mask(mask: &RasterMask, r: usize) -> RasterMask {
    if r == 0 {
        return mask.clone();
    }
    let inverted = RasterMask {
        width: mask.width,
        height: mask.height,
        bits: mask.bits.iter().map(|&b| !b).collect(),
    };
    // Out-of-frame background is handled by padding the inverse by r.
    let pad = r;
    let (pw, ph) = (mask.width + 2 * pad, mask.height + 2 * pad);
    let mut padded = RasterMask {
        width: pw,
        height: ph,
        bits: vec![true; pw * ph],
    };
    for row in 0..mask.height {
        for col in 0..mask.width {
            padded.bits[(row + pad) * pw + col + pad] = inverted.get(row, col);
        }
    }
    let grown = expand_mask(&padded, r);
    let mut out = RasterMask {
        width: mask.width,
        height: mask.height,
        bits: vec![false; mask.width * mask.height],
    };
    for row in 0..mask.height {
        for col in 0..mask.width {
            out.bits[row * mask.width + col] = !grown.bits[(row + pad) * pw + col + pad];
        }
    }
    out
}
