//! Training objectives with analytic gradients.
//!
//! Every loss returns a [`LossValue`] whose gradient is laid out like the
//! loss's continuous input, flattened: heatmaps row-major, point lists as
//! `x0, y0, x1, y1, ...`, probability lists one entry per vertex.

use crate::assignment::{nearest_point_index, Assignment};
use crate::error::{Error, Result};
use crate::geometry::{densify_x10, Point2};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValue {
    pub fn zero(len: usize) -> LossValue {
        LossValue {
            value: 0.0,
            grad: vec![0.0; len],
        }
    }

    pub fn scaled(mut self, k: f64) -> LossValue {
        self.value *= k;
        self.grad.iter_mut().for_each(|g| *g *= k);
        self
    }

    /// Gradient of a point-list loss as points.
    pub fn point_grad(&self) -> Vec<Point2> {
        self.grad
            .chunks_exact(2)
            .map(|c| Point2::new(c[0], c[1]))
            .collect()
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Derivative factor of a clamped probability (zero where the clamp is active).
fn clamp_slope(p: f64) -> f64 {
    if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        1.0
    } else {
        0.0
    }
}

/// Penalty-reduced focal loss over a center heatmap, normalized by the number
/// of keypoint pixels (target exactly 1).
pub fn focal_center_loss(pred: &[f64], target: &[f64], alpha: f64, beta: f64) -> Result<LossValue> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "heatmap sizes differ: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let keypoints = target.iter().filter(|&&y| y == 1.0).count();
    if keypoints == 0 {
        return Err(Error::InvalidArgument("target heatmap has no keypoints".into()));
    }
    let norm = 1.0 / keypoints as f64;
    let mut out = LossValue::zero(pred.len());
    for (k, (&raw, &y)) in pred.iter().zip(target).enumerate() {
        let p = clamp_prob(raw);
        let (v, dv) = if y == 1.0 {
            let w = (1.0 - p).powf(alpha);
            let dw = -alpha * (1.0 - p).powf(alpha - 1.0);
            (w * p.ln(), dw * p.ln() + w / p)
        } else {
            let neg = (1.0 - y).powf(beta);
            let w = p.powf(alpha);
            let dw = alpha * p.powf(alpha - 1.0);
            let l = (1.0 - p).ln();
            (neg * w * l, neg * (dw * l - w / (1.0 - p)))
        };
        out.value -= norm * v;
        out.grad[k] = -norm * dv * clamp_slope(raw);
    }
    Ok(out)
}

fn smooth_l1_scalar(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Mean over points of the per-coordinate smooth-L1 distance, summed over x
/// and y.
pub fn smooth_l1(pred: &[Point2], gt: &[Point2]) -> Result<LossValue> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "smooth L1 needs equal non-empty lists, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let norm = 1.0 / pred.len() as f64;
    let mut out = LossValue::zero(2 * pred.len());
    for (i, (p, q)) in pred.iter().zip(gt).enumerate() {
        let (vx, gx) = smooth_l1_scalar(p.x - q.x);
        let (vy, gy) = smooth_l1_scalar(p.y - q.y);
        out.value += norm * (vx + vy);
        out.grad[2 * i] = norm * gx;
        out.grad[2 * i + 1] = norm * gy;
    }
    Ok(out)
}

/// Negative log-likelihood of the vertex labels implied by `assignment`:
/// matched vertices are valid, the rest invalid with their term scaled by
/// `invalid_weight`. Gradient is with respect to the valid probabilities.
pub fn classification_loss(
    valid_probs: &[f64],
    assignment: &Assignment,
    invalid_weight: f64,
) -> Result<LossValue> {
    let n = valid_probs.len();
    if assignment.sigma.iter().any(|&j| j >= n) {
        return Err(Error::Shape("assignment refers to a missing vertex".into()));
    }
    let matched = assignment.matched_mask(n);
    let mut out = LossValue::zero(n);
    for (j, (&raw, &is_valid)) in valid_probs.iter().zip(&matched).enumerate() {
        let c = clamp_prob(raw);
        if is_valid {
            out.value -= c.ln();
            out.grad[j] = -clamp_slope(raw) / c;
        } else {
            out.value -= invalid_weight * (1.0 - c).ln();
            out.grad[j] = invalid_weight * clamp_slope(raw) / (1.0 - c);
        }
    }
    Ok(out)
}

/// Same as [`classification_loss`] but with respect to the logit difference
/// `z = l_valid - l_invalid` of a two-class softmax, i.e. `c = sigmoid(z)`.
/// Computed in log space, so it has no clamping.
pub fn classification_loss_logits(
    logit_diff: &[f64],
    assignment: &Assignment,
    invalid_weight: f64,
) -> Result<LossValue> {
    let n = logit_diff.len();
    if assignment.sigma.iter().any(|&j| j >= n) {
        return Err(Error::Shape("assignment refers to a missing vertex".into()));
    }
    let matched = assignment.matched_mask(n);
    let mut out = LossValue::zero(n);
    for (j, (&z, &is_valid)) in logit_diff.iter().zip(&matched).enumerate() {
        let c = sigmoid(z);
        if is_valid {
            // -log sigmoid(z) = softplus(-z)
            out.value += softplus(-z);
            out.grad[j] = c - 1.0;
        } else {
            out.value += invalid_weight * softplus(z);
            out.grad[j] = invalid_weight * c;
        }
    }
    Ok(out)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Index selections used by the dynamic matching loss: the nearest
/// subdivided ground-truth point for every predicted vertex, and the
/// corner-to-vertex assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DmlSelection {
    pub nearest: Vec<usize>,
    pub sigma: Vec<usize>,
}

/// Resolves the nearest-point indices of `pred` against `dense_gt`.
pub fn dml_selection(pred: &[Point2], dense_gt: &[Point2], assignment: &Assignment) -> Result<DmlSelection> {
    let nearest = pred
        .iter()
        .map(|&p| nearest_point_index(p, dense_gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(DmlSelection {
        nearest,
        sigma: assignment.sigma.clone(),
    })
}

fn l1_term(d: Point2) -> (f64, f64, f64) {
    (d.x.abs() + d.y.abs(), sign(d.x), sign(d.y))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// The two parts of the dynamic matching loss, reported separately.
#[derive(Debug, Clone, PartialEq)]
pub struct DmlParts {
    pub pre2gt: f64,
    pub gt2pre: f64,
    pub loss: LossValue,
}

/// Dynamic matching loss with the index selections held fixed:
/// mean L1 distance from every predicted vertex to its selected subdivided
/// ground-truth point, plus mean L1 distance from every corner to its
/// assigned vertex. Gradient is with respect to `pred` only.
pub fn dml_with_selection(
    pred: &[Point2],
    dense_gt: &[Point2],
    corners: &[Point2],
    sel: &DmlSelection,
) -> Result<DmlParts> {
    let n = pred.len();
    let m = corners.len();
    if sel.nearest.len() != n || sel.sigma.len() != m || n == 0 || m == 0 {
        return Err(Error::Shape("selection does not fit the contours".into()));
    }
    if sel.nearest.iter().any(|&k| k >= dense_gt.len()) || sel.sigma.iter().any(|&j| j >= n) {
        return Err(Error::Shape("selection index out of range".into()));
    }
    let mut grad = vec![0.0; 2 * n];
    let mut pre2gt = 0.0;
    for (i, (&p, &k)) in pred.iter().zip(&sel.nearest).enumerate() {
        let (v, sx, sy) = l1_term(p - dense_gt[k]);
        pre2gt += v / n as f64;
        grad[2 * i] += sx / n as f64;
        grad[2 * i + 1] += sy / n as f64;
    }
    let mut gt2pre = 0.0;
    for (&q, &j) in corners.iter().zip(&sel.sigma) {
        let (v, sx, sy) = l1_term(pred[j] - q);
        gt2pre += v / m as f64;
        grad[2 * j] += sx / m as f64;
        grad[2 * j + 1] += sy / m as f64;
    }
    Ok(DmlParts {
        pre2gt,
        gt2pre,
        loss: LossValue {
            value: pre2gt + gt2pre,
            grad,
        },
    })
}

/// Dynamic matching loss of a predicted contour against the densified ground
/// truth `gt` (subdivided ten times internally) and its corners.
pub fn dml(pred: &[Point2], gt: &[Point2], corners: &[Point2], assignment: &Assignment) -> Result<DmlParts> {
    let dense = densify_x10(gt);
    let sel = dml_selection(pred, &dense, assignment)?;
    dml_with_selection(pred, &dense, corners, &sel)
}

/// Stage losses of one training step, already averaged over instances.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub center: f64,
    pub init: f64,
    pub evolve1: f64,
    pub evolve2: f64,
    pub classify: f64,
}

impl LossBreakdown {
    /// `center + epsilon * (init + evolve1 + evolve2) + classify`.
    pub fn total(&self, epsilon: f64) -> f64 {
        self.center + epsilon * (self.init + self.evolve1 + self.evolve2) + self.classify
    }
}

/// Multi-task combination. Each component's gradient is scaled by its weight
/// in the total; the components keep their own gradient layouts.
pub fn total_loss(
    center: LossValue,
    init: LossValue,
    evolve1: LossValue,
    evolve2: LossValue,
    classify: LossValue,
    epsilon: f64,
) -> Result<(f64, [LossValue; 5])> {
    let parts = [&center, &init, &evolve1, &evolve2, &classify];
    if parts.iter().any(|p| !p.value.is_finite()) {
        return Err(Error::NonFinite("loss component".into()));
    }
    let breakdown = LossBreakdown {
        center: center.value,
        init: init.value,
        evolve1: evolve1.value,
        evolve2: evolve2.value,
        classify: classify.value,
    };
    Ok((
        breakdown.total(epsilon),
        [
            center,
            init.scaled(epsilon),
            evolve1.scaled(epsilon),
            evolve2.scaled(epsilon),
            classify,
        ],
    ))
}
