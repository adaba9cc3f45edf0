//! Vertex reduction: confidence threshold, vertex NMS and removal of
//! near-straight vertices. Vertices are only ever removed, never moved.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{vertex_angle, Point2, Polygon};

pub const DEFAULT_VERTEX_THRESHOLD: f64 = 0.6;
pub const DEFAULT_ANGLE_THRESHOLD: f64 = 8.0 * PI / 9.0;

/// A predicted contour with one confidence per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredContour {
    pub points: Vec<Point2>,
    pub scores: Vec<f64>,
}

impl ScoredContour {
    pub fn new(points: Vec<Point2>, scores: Vec<f64>) -> Result<ScoredContour> {
        if points.len() != scores.len() {
            return Err(Error::Shape(format!(
                "{} points but {} scores",
                points.len(),
                scores.len()
            )));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidArgument("vertex scores must lie in [0, 1]".into()));
        }
        Ok(ScoredContour { points, scores })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn select(&self, keep: &[usize]) -> ScoredContour {
        ScoredContour {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
        }
    }

    /// Mean length of the closed contour's segments.
    pub fn mean_segment_length(&self) -> f64 {
        let n = self.points.len();
        if n < 2 {
            return 0.0;
        }
        (0..n)
            .map(|i| self.points[i].dist(self.points[(i + 1) % n]))
            .sum::<f64>()
            / n as f64
    }
}

/// Keeps vertices scoring at least `t`, in their original order.
pub fn threshold_vertices(sc: &ScoredContour, t: f64) -> ScoredContour {
    let keep: Vec<usize> = (0..sc.len()).filter(|&i| sc.scores[i] >= t).collect();
    sc.select(&keep)
}

/// Indices sorted by descending score, lower index first among ties.
fn by_score(sc: &ScoredContour) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sc.len()).collect();
    order.sort_by(|&a, &b| sc.scores[b].total_cmp(&sc.scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy suppression: the best remaining vertex removes every other vertex
/// closer than `radius`. Survivors keep their original order.
pub fn vertex_nms(sc: &ScoredContour, radius: f64) -> ScoredContour {
    let mut suppressed = vec![false; sc.len()];
    let mut keep = Vec::new();
    for i in by_score(sc) {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for j in 0..sc.len() {
            if j != i && !suppressed[j] && sc.points[i].dist(sc.points[j]) < radius {
                suppressed[j] = true;
            }
        }
    }
    keep.sort_unstable();
    sc.select(&keep)
}

/// Interior angle, treating a vertex that coincides with a neighbor as
/// straight.
fn angle_at(points: &[Point2], i: usize) -> f64 {
    let n = points.len();
    vertex_angle(points[(i + n - 1) % n], points[i], points[(i + 1) % n]).unwrap_or(PI)
}

/// Repeatedly removes the vertex with the widest interior angle above
/// `threshold`, stopping at three vertices.
pub fn prune_collinear(poly: &Polygon, threshold: f64) -> Polygon {
    let mut pts = poly.vertices().to_vec();
    while pts.len() > 3 {
        let (worst, angle) = (0..pts.len())
            .map(|i| (i, angle_at(&pts, i)))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        if angle <= threshold {
            break;
        }
        pts.remove(worst);
    }
    Polygon::new(pts.clone()).unwrap_or_else(|_| poly.clone())
}

/// Full reduction of a scored contour to a corner polygon with at least
/// three vertices.
///
/// The NMS radius is half the mean segment length of the input contour.
/// When fewer than three vertices pass the threshold, the three best-scored
/// vertices are used instead.
pub fn reduce(sc: &ScoredContour, t: f64, angle_threshold: f64) -> Result<Polygon> {
    if sc.len() < 3 {
        return Err(Error::TooFewVertices(sc.len()));
    }
    let radius = sc.mean_segment_length() / 2.0;
    let mut kept = threshold_vertices(sc, t);
    if kept.len() < 3 {
        let mut top: Vec<usize> = by_score(sc).into_iter().take(3).collect();
        top.sort_unstable();
        kept = sc.select(&top);
    }
    let survivors = vertex_nms(&kept, radius);
    let pts = if survivors.len() >= 3 {
        survivors.points
    } else {
        kept.points
    };
    let poly = match Polygon::new(pts) {
        Ok(p) => p,
        // Every candidate collapsed onto fewer than three distinct points.
        Err(_) => {
            let top: Vec<usize> = distinct_top3(sc);
            Polygon::new(top.iter().map(|&i| sc.points[i]).collect())?
        }
    };
    Ok(prune_collinear(&poly, angle_threshold))
}

/// Best three vertices by score with pairwise distinct positions, in order.
fn distinct_top3(sc: &ScoredContour) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    for i in by_score(sc) {
        if chosen.iter().all(|&j| sc.points[j].dist(sc.points[i]) > 1e-9) {
            chosen.push(i);
            if chosen.len() == 3 {
                break;
            }
        }
    }
    chosen.sort_unstable();
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::densify;

    fn pts(c: &[(f64, f64)]) -> Vec<Point2> {
        c.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    #[test]
    fn threshold_cases() {
        let p = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let sc = ScoredContour::new(p.clone(), vec![1.0; 3]).unwrap();
        assert_eq!(threshold_vertices(&sc, 0.6), sc);
        let sc = ScoredContour::new(p.clone(), vec![0.0; 3]).unwrap();
        assert!(threshold_vertices(&sc, 0.6).is_empty());
        let sc = ScoredContour::new(p.clone(), vec![0.7, 0.5, 0.9]).unwrap();
        assert_eq!(threshold_vertices(&sc, 0.6).points, vec![p[0], p[2]]);
    }

    #[test]
    fn nms_cases() {
        let p = pts(&[(0.0, 0.0), (0.0, 0.0), (5.0, 0.0)]);
        let sc = ScoredContour::new(p.clone(), vec![0.8, 0.9, 0.5]).unwrap();
        assert_eq!(vertex_nms(&sc, 0.0), sc);
        let out = vertex_nms(&sc, 1.0);
        assert_eq!(out.scores, vec![0.9, 0.5]);
    }

    #[test]
    fn nms_matches_exhaustive_greedy() {
        let p = pts(&[(0.0, 0.0), (1.0, 0.5), (1.8, 0.0), (5.0, 5.0), (5.5, 5.2), (9.0, 0.0)]);
        let scores = vec![0.7, 0.9, 0.8, 0.6, 0.95, 0.3];
        let sc = ScoredContour::new(p.clone(), scores.clone()).unwrap();
        let z = 1.5;
        // Oracle: simulate by repeatedly scanning for the best unprocessed vertex.
        let mut alive = vec![true; 6];
        let mut done = vec![false; 6];
        loop {
            let best = (0..6)
                .filter(|&i| alive[i] && !done[i])
                .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)));
            let Some(b) = best else { break };
            done[b] = true;
            for j in 0..6 {
                if j != b && p[b].dist(p[j]) < z {
                    alive[j] = false;
                }
            }
        }
        let expect: Vec<f64> = (0..6).filter(|&i| alive[i]).map(|i| scores[i]).collect();
        assert_eq!(vertex_nms(&sc, z).scores, expect);
        assert_eq!(expect, vec![0.9, 0.95, 0.3]);
    }

    #[test]
    fn prune_cases() {
        let sq = Polygon::rect(0.0, 0.0, 10.0, 10.0).unwrap();
        assert_eq!(prune_collinear(&sq, DEFAULT_ANGLE_THRESHOLD), sq);
        let with_mid =
            Polygon::from_coords(&[(0.0, 0.0), (5.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)])
                .unwrap();
        assert_eq!(prune_collinear(&with_mid, DEFAULT_ANGLE_THRESHOLD), sq);
        let ngon = Polygon::new(
            (0..20)
                .map(|i| {
                    let t = i as f64 / 20.0 * std::f64::consts::TAU;
                    Point2::new(t.cos() * 10.0, t.sin() * 10.0)
                })
                .collect(),
        )
        .unwrap();
        // Each removal flattens the two neighbors by 9°, to 153°, so pruning
        // stops once every survivor has lost a neighbor: 12 of 20 remain.
        let out = prune_collinear(&ngon, DEFAULT_ANGLE_THRESHOLD);
        assert_eq!(out.len(), 12);
        let v = out.vertices();
        for i in 0..v.len() {
            let a = vertex_angle(v[(i + v.len() - 1) % v.len()], v[i], v[(i + 1) % v.len()]).unwrap();
            assert!(a <= DEFAULT_ANGLE_THRESHOLD);
        }
    }

    fn square_contour() -> (Vec<Point2>, Vec<f64>) {
        let d = densify(&Polygon::rect(0.0, 0.0, 100.0, 100.0).unwrap(), 64, 4).unwrap();
        let mut scores = vec![0.0; 64];
        for i in [8, 24, 40, 56] {
            scores[i] = 1.0;
        }
        (d.into_points(), scores)
    }

    #[test]
    fn reduce_densified_square_to_corners() {
        let (p, s) = square_contour();
        let sc = ScoredContour::new(p, s).unwrap();
        let out = reduce(&sc, 0.6, DEFAULT_ANGLE_THRESHOLD).unwrap();
        assert_eq!(
            out.vertices(),
            &pts(&[(100.0, 0.0), (100.0, 100.0), (0.0, 100.0), (0.0, 0.0)])[..]
        );
    }

    #[test]
    fn reduce_suppresses_duplicate_corner() {
        let (mut p, mut s) = square_contour();
        p[9] = Point2::new(100.0, 0.5);
        s[9] = 0.9;
        let sc = ScoredContour::new(p, s).unwrap();
        let out = reduce(&sc, 0.6, DEFAULT_ANGLE_THRESHOLD).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out.vertices()[0], Point2::new(100.0, 0.0));
    }

    #[test]
    fn reduce_falls_back_to_top_three() {
        let (p, _) = square_contour();
        let mut s = vec![0.1; 64];
        s[8] = 0.5;
        s[24] = 0.4;
        s[40] = 0.3;
        let sc = ScoredContour::new(p.clone(), s).unwrap();
        let out = reduce(&sc, 0.6, DEFAULT_ANGLE_THRESHOLD).unwrap();
        assert_eq!(out.vertices(), &[p[8], p[24], p[40]][..]);
    }

    #[test]
    fn reduce_rejects_tiny_contours() {
        let sc = ScoredContour::new(pts(&[(0.0, 0.0), (1.0, 1.0)]), vec![1.0, 1.0]).unwrap();
        assert!(reduce(&sc, 0.6, DEFAULT_ANGLE_THRESHOLD).is_err());
    }
}
