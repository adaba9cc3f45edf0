//! Contour evolution network.
//!
//! Each vertex is described by bilinearly sampled grid features followed by
//! its bbox-relative coordinates. The encoder lifts these to `hidden`
//! channels, then applies detail, local and global circular convolutions
//! (kernels 3 / 9 / 21 by default) with residual shortcuts. A max-pooled
//! contour descriptor is concatenated back onto every vertex and fused, and
//! two pointwise heads produce per-vertex offsets (pixels) and a two-class
//! valid/invalid logit pair.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::detection::{FeatureGrid, STRIDE};
use crate::error::{Error, Result};
use crate::geometry::{BBox, DensifiedContour, Point2};
use crate::losses::sigmoid;
use crate::nn::{conv1d_circular, conv1d_circular_backward, relu, relu_backward, Grads, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvolutionConfig {
    /// Sampled feature channels per vertex (without the two coordinates).
    pub feature_channels: usize,
    pub hidden: usize,
    /// Detail, local and global kernel sizes.
    pub kernels: [usize; 3],
}

impl EvolutionConfig {
    pub fn new(feature_channels: usize, hidden: usize) -> EvolutionConfig {
        EvolutionConfig {
            feature_channels,
            hidden,
            kernels: [3, 9, 21],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_channels + 2
    }
}

const UP_W: usize = 0;
const UP_B: usize = 1;
const ENC_W: [usize; 3] = [2, 4, 6];
const ENC_B: [usize; 3] = [3, 5, 7];
const FUSE_W: usize = 8;
const FUSE_B: usize = 9;
const OFF_W: usize = 10;
const OFF_B: usize = 11;
const CLS_W: usize = 12;
const CLS_B: usize = 13;

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionNet {
    pub config: EvolutionConfig,
    pub params: Vec<Param>,
}

/// Per-vertex network outputs for a batch of contours.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionOutput {
    /// `rows × 2` offsets in pixels.
    pub offsets: Array2<f64>,
    /// `l_valid - l_invalid` per vertex; the valid probability is its sigmoid.
    pub logit_diff: Vec<f64>,
}

impl EvolutionOutput {
    pub fn valid_probs(&self) -> Vec<f64> {
        self.logit_diff.iter().map(|&z| sigmoid(z)).collect()
    }
}

/// Activations kept from the forward pass for [`EvolutionNet::backward`].
#[derive(Debug, Clone)]
pub struct EvolutionCache {
    n: usize,
    input: Array2<f64>,
    up_pre: Array2<f64>,
    /// Inputs of the three encoder stages followed by the encoder output.
    stage_in: Vec<Array2<f64>>,
    stage_pre: Vec<Array2<f64>>,
    /// Per contour and channel, the row holding the max.
    argmax: Vec<usize>,
    fuse_in: Array2<f64>,
    fuse_pre: Array2<f64>,
    fused: Array2<f64>,
}

impl EvolutionNet {
    /// Layer layout with encoder weights drawn uniformly from
    /// `±sqrt(1 / (k · d_in))` and zero biases; both heads start at zero so
    /// the initial network leaves contours unchanged.
    pub fn new(config: EvolutionConfig, rng: &mut impl Rng) -> EvolutionNet {
        let h = config.hidden;
        let d = config.input_dim();
        let bound = |k: usize, d_in: usize| (1.0 / (k * d_in) as f64).sqrt();
        let mut params = vec![
            Param::uniform("evolve.up.weight", &[h, d], bound(1, d), rng),
            Param::zeros("evolve.up.bias", &[h]),
        ];
        for (name, &k) in ["detail", "local", "global"].iter().zip(&config.kernels) {
            params.push(Param::uniform(
                &format!("evolve.{name}.weight"),
                &[h, k, h],
                bound(k, h),
                rng,
            ));
            params.push(Param::zeros(&format!("evolve.{name}.bias"), &[h]));
        }
        params.push(Param::uniform("evolve.fuse.weight", &[h, 2 * h], bound(1, 2 * h), rng));
        params.push(Param::zeros("evolve.fuse.bias", &[h]));
        params.push(Param::zeros("evolve.offset.weight", &[2, h]));
        params.push(Param::zeros("evolve.offset.bias", &[2]));
        params.push(Param::zeros("evolve.classify.weight", &[2, h]));
        params.push(Param::zeros("evolve.classify.bias", &[2]));
        EvolutionNet { config, params }
    }

    /// Replaces the head initialization with small random weights. Used by
    /// gradient checks, where all-zero heads would hide encoder gradients.
    pub fn randomize_heads(&mut self, scale: f64, rng: &mut impl Rng) {
        for idx in [OFF_W, OFF_B, CLS_W, CLS_B] {
            self.params[idx]
                .data
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-scale..=scale));
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    /// Runs the network over `x`, a stack of contours with `n` vertices each
    /// and `input_dim` columns.
    pub fn forward(&self, x: &Array2<f64>, n: usize) -> Result<(EvolutionOutput, EvolutionCache)> {
        let cfg = self.config;
        if x.ncols() != cfg.input_dim() || n == 0 || x.nrows() % n != 0 {
            return Err(Error::Shape(format!(
                "evolution input is {}×{}, expected rows in blocks of {n} and {} columns",
                x.nrows(),
                x.ncols(),
                cfg.input_dim()
            )));
        }
        let p = &self.params;
        let h = cfg.hidden;
        let up_pre = conv1d_circular(x.view(), n, 1, p[UP_W].matrix(), &p[UP_B].data);
        let mut cur = relu(&up_pre);
        let mut stage_in = Vec::with_capacity(4);
        let mut stage_pre = Vec::with_capacity(3);
        for s in 0..3 {
            let pre = conv1d_circular(
                cur.view(),
                n,
                cfg.kernels[s],
                p[ENC_W[s]].matrix(),
                &p[ENC_B[s]].data,
            );
            let next = &cur + &relu(&pre);
            stage_in.push(cur);
            stage_pre.push(pre);
            cur = next;
        }
        let enc = cur;
        let rows = enc.nrows();
        let contours = rows / n;
        let mut argmax = vec![0usize; contours * h];
        let mut fuse_in = Array2::<f64>::zeros((rows, 2 * h));
        fuse_in.slice_mut(s![.., ..h]).assign(&enc);
        for b in 0..contours {
            for c in 0..h {
                let mut best = b * n;
                for i in b * n + 1..(b + 1) * n {
                    if enc[[i, c]] > enc[[best, c]] {
                        best = i;
                    }
                }
                argmax[b * h + c] = best;
                let g = enc[[best, c]];
                fuse_in.slice_mut(s![b * n..(b + 1) * n, h + c]).fill(g);
            }
        }
        stage_in.push(enc);
        let fuse_pre = conv1d_circular(fuse_in.view(), n, 1, p[FUSE_W].matrix(), &p[FUSE_B].data);
        let fused = relu(&fuse_pre);
        let offsets = conv1d_circular(fused.view(), n, 1, p[OFF_W].matrix(), &p[OFF_B].data);
        let logits = conv1d_circular(fused.view(), n, 1, p[CLS_W].matrix(), &p[CLS_B].data);
        let logit_diff = logits.rows().into_iter().map(|r| r[1] - r[0]).collect();
        Ok((
            EvolutionOutput { offsets, logit_diff },
            EvolutionCache {
                n,
                input: x.clone(),
                up_pre,
                stage_in,
                stage_pre,
                argmax,
                fuse_in,
                fuse_pre,
                fused,
            },
        ))
    }

    /// Parameter gradients given upstream gradients of the offsets and of the
    /// logit differences.
    pub fn backward(&self, cache: &EvolutionCache, d_offsets: &Array2<f64>, d_logit_diff: &[f64]) -> Grads {
        let p = &self.params;
        let cfg = self.config;
        let h = cfg.hidden;
        let n = cache.n;
        let mut grads = Grads::zeros_like(p);

        let rows = cache.fused.nrows();
        let mut d_logits = Array2::<f64>::zeros((rows, 2));
        for (i, &g) in d_logit_diff.iter().enumerate() {
            d_logits[[i, 0]] = -g;
            d_logits[[i, 1]] = g;
        }
        let mut d_fused = {
            let (gw, gb) = split2(&mut grads, OFF_W, OFF_B);
            conv1d_circular_backward(
                cache.fused.view(),
                n,
                1,
                p[OFF_W].matrix(),
                d_offsets.view(),
                mat(gw, 2),
                gb,
            )
        };
        {
            let (gw, gb) = split2(&mut grads, CLS_W, CLS_B);
            d_fused += &conv1d_circular_backward(
                cache.fused.view(),
                n,
                1,
                p[CLS_W].matrix(),
                d_logits.view(),
                mat(gw, 2),
                gb,
            );
        }
        let d_fuse_pre = relu_backward(&cache.fuse_pre, &d_fused);
        let d_fuse_in = {
            let (gw, gb) = split2(&mut grads, FUSE_W, FUSE_B);
            conv1d_circular_backward(
                cache.fuse_in.view(),
                n,
                1,
                p[FUSE_W].matrix(),
                d_fuse_pre.view(),
                mat(gw, h),
                gb,
            )
        };
        let mut d_cur = d_fuse_in.slice(s![.., ..h]).to_owned();
        let contours = rows / n;
        for b in 0..contours {
            for c in 0..h {
                let g: f64 = d_fuse_in.slice(s![b * n..(b + 1) * n, h + c]).sum();
                d_cur[[cache.argmax[b * h + c], c]] += g;
            }
        }
        for s in (0..3).rev() {
            let d_pre = relu_backward(&cache.stage_pre[s], &d_cur);
            let (gw, gb) = split2(&mut grads, ENC_W[s], ENC_B[s]);
            let d_in = conv1d_circular_backward(
                cache.stage_in[s].view(),
                n,
                cfg.kernels[s],
                p[ENC_W[s]].matrix(),
                d_pre.view(),
                mat(gw, h),
                gb,
            );
            d_cur = d_cur + d_in;
        }
        let d_up_pre = relu_backward(&cache.up_pre, &d_cur);
        let (gw, gb) = split2(&mut grads, UP_W, UP_B);
        conv1d_circular_backward(
            cache.input.view(),
            n,
            1,
            p[UP_W].matrix(),
            d_up_pre.view(),
            mat(gw, h),
            gb,
        );
        grads
    }
}

fn split2(grads: &mut Grads, w: usize, b: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    debug_assert_eq!(w + 1, b);
    let (left, right) = grads.0.split_at_mut(b);
    (&mut left[w], &mut right[0])
}

fn mat(buf: &mut [f64], rows: usize) -> ndarray::ArrayViewMut2<'_, f64> {
    let cols = buf.len() / rows;
    ndarray::ArrayViewMut2::from_shape((rows, cols), buf).expect("weight shape")
}

/// Continuous grid coordinates of a pixel position: node `(r, c)` sits at
/// the center of its stride-4 cell.
pub fn grid_coords(p: Point2) -> (f64, f64) {
    let s = STRIDE as f64;
    (p.y / s - 0.5, p.x / s - 0.5)
}

/// Bilinear samples of every channel at each point, clamped to the grid.
pub fn sample_features(grid: &FeatureGrid, points: &[Point2]) -> Array2<f64> {
    let c = grid.channels;
    let mut out = Array2::<f64>::zeros((points.len(), c));
    let max_r = (grid.height - 1) as f64;
    let max_c = (grid.width - 1) as f64;
    for (i, &p) in points.iter().enumerate() {
        let (gr, gc) = grid_coords(p);
        let (gr, gc) = (gr.clamp(0.0, max_r), gc.clamp(0.0, max_c));
        let r0 = gr.floor() as usize;
        let c0 = gc.floor() as usize;
        let r1 = (r0 + 1).min(grid.height - 1);
        let c1 = (c0 + 1).min(grid.width - 1);
        let fr = gr - r0 as f64;
        let fc = gc - c0 as f64;
        let corners = [
            ((1.0 - fr) * (1.0 - fc), grid.at(r0, c0)),
            ((1.0 - fr) * fc, grid.at(r0, c1)),
            (fr * (1.0 - fc), grid.at(r1, c0)),
            (fr * fc, grid.at(r1, c1)),
        ];
        let mut row = out.row_mut(i);
        for (w, vals) in corners {
            if w != 0.0 {
                row.iter_mut().zip(vals).for_each(|(o, v)| *o += w * v);
            }
        }
    }
    out
}

/// Concatenates sampled features with relative coordinates (last two columns).
pub fn assemble_vertex_features(sampled: ArrayView2<'_, f64>, rel: &[(f64, f64)]) -> Result<Array2<f64>> {
    if sampled.nrows() != rel.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} vertices",
            sampled.nrows(),
            rel.len()
        )));
    }
    let c = sampled.ncols();
    let mut out = Array2::<f64>::zeros((rel.len(), c + 2));
    out.slice_mut(s![.., ..c]).assign(&sampled);
    for (i, &(x, y)) in rel.iter().enumerate() {
        out[[i, c]] = x;
        out[[i, c + 1]] = y;
    }
    Ok(out)
}

/// Bbox-relative coordinates; an axis with zero extent maps to 0.
fn relative_coords_lenient(points: &[Point2]) -> Vec<(f64, f64)> {
    let bb = BBox::of(points).expect("non-empty contour");
    let c = bb.center();
    let scale = |extent: f64| if extent > 0.0 { 1.0 / extent } else { 0.0 };
    let (sx, sy) = (scale(bb.width()), scale(bb.height()));
    points
        .iter()
        .map(|p| {
            (
                ((p.x - c.x) * sx).clamp(-0.5, 0.5),
                ((p.y - c.y) * sy).clamp(-0.5, 0.5),
            )
        })
        .collect()
}

/// Full vertex feature matrix (`n × (C + 2)`) of one contour.
pub fn vertex_features(grid: &FeatureGrid, points: &[Point2]) -> Array2<f64> {
    let sampled = sample_features(grid, points);
    assemble_vertex_features(sampled.view(), &relative_coords_lenient(points))
        .expect("row counts agree")
}

/// Stacks the vertex features of several contours (each on its own grid).
pub fn batch_features(items: &[(&FeatureGrid, &[Point2])]) -> Array2<f64> {
    let blocks: Vec<Array2<f64>> = items.iter().map(|(g, p)| vertex_features(g, p)).collect();
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal feature widths")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionState {
    pub contour: DensifiedContour,
    pub iteration: usize,
}

/// One round of evolution: returns the moved contour and the per-vertex
/// valid probabilities.
pub fn evolve_once(
    state: &EvolutionState,
    grid: &FeatureGrid,
    net: &EvolutionNet,
    max_iterations: usize,
) -> Result<(EvolutionState, Vec<f64>)> {
    if state.iteration >= max_iterations {
        return Err(Error::InvalidArgument(format!(
            "evolution already ran {} of {max_iterations} iterations",
            state.iteration
        )));
    }
    let pts = state.contour.points();
    let x = vertex_features(grid, pts);
    let (out, _) = net.forward(&x, pts.len())?;
    let moved = apply_offsets(pts, &out.offsets);
    Ok((
        EvolutionState {
            contour: DensifiedContour::from_points(moved, state.contour.anchor_count())?,
            iteration: state.iteration + 1,
        },
        out.valid_probs(),
    ))
}

pub fn apply_offsets(points: &[Point2], offsets: &Array2<f64>) -> Vec<Point2> {
    points
        .iter()
        .zip(offsets.rows())
        .map(|(p, d)| Point2::new(p.x + d[0], p.y + d[1]))
        .collect()
}
