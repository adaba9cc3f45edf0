//! Corner-to-vertex matching and nearest-point queries.

use crate::error::{Error, Result};
use crate::geometry::Point2;

/// Dense `rows × cols` cost matrix, row-major, with `rows <= cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<CostMatrix> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} entries for a {rows}×{cols} matrix",
                data.len()
            )));
        }
        if rows > cols {
            return Err(Error::InvalidArgument(format!(
                "more rows than columns ({rows} > {cols})"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix".into()));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Result<CostMatrix> {
        let data = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| f(i, j))
            .collect();
        CostMatrix::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Row `i` is matched to column `sigma[i]`; columns are used at most once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub sigma: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.sigma
            .iter()
            .enumerate()
            .map(|(i, &j)| cost.get(i, j))
            .sum()
    }

    /// Marks the matched columns of an `n`-column problem.
    pub fn matched_mask(&self, n: usize) -> Vec<bool> {
        let mut mask = vec![false; n];
        for &j in &self.sigma {
            mask[j] = true;
        }
        mask
    }
}

/// Matching cost between ground-truth corners (rows) and predicted vertices
/// (columns): `-c_j + delta * |p_j - q_i| / scale`. `scale` is the length the
/// distances are normalized by, normally the image diagonal.
pub fn match_cost(
    corners: &[Point2],
    pred: &[Point2],
    valid_probs: &[f64],
    delta: f64,
    scale: f64,
) -> Result<CostMatrix> {
    if valid_probs.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} vertices",
            valid_probs.len(),
            pred.len()
        )));
    }
    if valid_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidArgument("probabilities must lie in [0, 1]".into()));
    }
    if !(scale > 0.0) {
        return Err(Error::InvalidArgument("distance scale must be positive".into()));
    }
    CostMatrix::from_fn(corners.len(), pred.len(), |i, j| {
        -valid_probs[j] + delta * pred[j].dist(corners[i]) / scale
    })
}

/// Minimum-cost assignment of every row to a distinct column, O(rows²·cols).
///
/// Shortest augmenting paths with row/column potentials. Among equal
/// reduced costs the lowest column index is taken first.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.rows, cost.cols);
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("empty cost matrix".into()));
    }
    // 1-based arrays with slot 0 as the virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0f64; m + 1];
    let mut used = vec![false; m + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut sigma = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] > 0 {
            sigma[owner[j] - 1] = j - 1;
        }
    }
    Ok(Assignment { sigma })
}

/// Index of the point closest to `p` (Euclidean); ties go to the lowest index.
pub fn nearest_point_index(p: Point2, points: &[Point2]) -> Result<usize> {
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for (i, q) in points.iter().enumerate() {
        let d = p.dist_sq(*q);
        if d < best_d {
            best_d = d;
            best = Some(i);
        }
    }
    best.ok_or_else(|| Error::InvalidArgument("empty point list".into()))
}
