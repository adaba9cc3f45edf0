//! Convolutional center and offset heads on a stride-4 feature grid.
//!
//! A 3×3 stem lifts the grid to `width` channels, followed by residual
//! dilated 3×3 blocks. The center head (3×3 conv, ReLU, 1×1 conv) produces
//! heatmap logits for every cell. The offset head (3×3 conv, ReLU, 1×1 conv
//! to `2N` outputs) is only evaluated at requested cells, so training and
//! inference never materialize the full offset map.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::detection::{FeatureGrid, Heatmap};
use crate::error::{Error, Result};
use crate::losses::sigmoid;
use crate::nn::{conv2d, conv2d_backward, gather_patch, relu, relu_backward, scatter_patch, Conv2dShape, Grads, Param};

/// Center-head bias giving an initial heatmap of about 0.1 everywhere.
pub const CENTER_PRIOR_BIAS: f64 = -2.19;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub width: usize,
    pub dilations: Vec<usize>,
    /// Contour vertex count; the offset head emits `2 * vertices` values.
    pub vertices: usize,
}

impl DetectorConfig {
    pub fn new(in_channels: usize, width: usize, vertices: usize) -> DetectorConfig {
        DetectorConfig {
            in_channels,
            width,
            dilations: vec![2, 4, 8],
            vertices,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: Vec<Param>,
}

/// Activations of one grid, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DetectorCache {
    height: usize,
    width: usize,
    input: Array2<f64>,
    stem_pre: Array2<f64>,
    /// Block inputs; the last entry is the trunk output.
    trunk: Vec<Array2<f64>>,
    res_pre: Vec<Array2<f64>>,
    center_pre: Array2<f64>,
    center_hidden: Array2<f64>,
    pub center_logits: Vec<f64>,
}

impl DetectorCache {
    pub fn heatmap(&self) -> Heatmap {
        Heatmap {
            width: self.width,
            height: self.height,
            values: self.center_logits.iter().map(|&z| sigmoid(z)).collect(),
        }
    }

    fn trunk_out(&self) -> &Array2<f64> {
        self.trunk.last().expect("trunk output")
    }
}

/// Offset-head activations at a list of cells.
#[derive(Debug, Clone)]
pub struct OffsetCache {
    cells: Vec<(usize, usize)>,
    patches: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
    /// `cells × 2N`, interleaved `dx0, dy0, dx1, ...` in stride units.
    pub output: Array2<f64>,
}

impl Detector {
    fn stem(&self) -> usize {
        0
    }

    fn res(&self, i: usize) -> usize {
        2 + 2 * i
    }

    fn center_idx(&self) -> usize {
        2 + 2 * self.config.dilations.len()
    }

    fn offset_idx(&self) -> usize {
        self.center_idx() + 4
    }

    pub fn new(config: DetectorConfig, rng: &mut impl Rng) -> Detector {
        let (c, f) = (config.in_channels, config.width);
        let bound = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
        let mut params = vec![
            Param::uniform("detect.stem.weight", &[f, 9 * c], bound(9 * c), rng),
            Param::zeros("detect.stem.bias", &[f]),
        ];
        for (i, _) in config.dilations.iter().enumerate() {
            params.push(Param::uniform(&format!("detect.res{i}.weight"), &[f, 9 * f], bound(9 * f), rng));
            params.push(Param::zeros(&format!("detect.res{i}.bias"), &[f]));
        }
        params.push(Param::uniform("detect.center.hidden.weight", &[f, 9 * f], bound(9 * f), rng));
        params.push(Param::zeros("detect.center.hidden.bias", &[f]));
        params.push(Param::uniform("detect.center.out.weight", &[1, f], bound(f), rng));
        let mut prior = Param::zeros("detect.center.out.bias", &[1]);
        prior.data[0] = CENTER_PRIOR_BIAS;
        params.push(prior);
        params.push(Param::uniform("detect.offset.hidden.weight", &[f, 9 * f], bound(9 * f), rng));
        params.push(Param::zeros("detect.offset.hidden.bias", &[f]));
        params.push(Param::zeros("detect.offset.out.weight", &[2 * config.vertices, f]));
        params.push(Param::zeros("detect.offset.out.bias", &[2 * config.vertices]));
        Detector { config, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    fn shape(&self, grid_h: usize, grid_w: usize, kernel: usize, dilation: usize) -> Conv2dShape {
        Conv2dShape {
            height: grid_h,
            width: grid_w,
            kernel,
            dilation,
        }
    }

    pub fn forward(&self, grid: &FeatureGrid) -> Result<DetectorCache> {
        if grid.channels != self.config.in_channels {
            return Err(Error::Shape(format!(
                "detector expects {} channels, grid has {}",
                self.config.in_channels, grid.channels
            )));
        }
        let (gh, gw) = (grid.height, grid.width);
        let input = Array2::from_shape_vec((gh * gw, grid.channels), grid.data.clone())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let p = &self.params;
        let g1 = self.shape(gh, gw, 3, 1);
        let stem_pre = conv2d(input.view(), g1, p[self.stem()].matrix(), &p[self.stem() + 1].data);
        let mut trunk = vec![relu(&stem_pre)];
        let mut res_pre = Vec::with_capacity(self.config.dilations.len());
        for (i, &d) in self.config.dilations.iter().enumerate() {
            let x = trunk.last().expect("trunk");
            let pre = conv2d(x.view(), self.shape(gh, gw, 3, d), p[self.res(i)].matrix(), &p[self.res(i) + 1].data);
            let out = x + &relu(&pre);
            res_pre.push(pre);
            trunk.push(out);
        }
        let ci = self.center_idx();
        let feat = trunk.last().expect("trunk");
        let center_pre = conv2d(feat.view(), g1, p[ci].matrix(), &p[ci + 1].data);
        let center_hidden = relu(&center_pre);
        let logits = conv2d(
            center_hidden.view(),
            self.shape(gh, gw, 1, 1),
            p[ci + 2].matrix(),
            &p[ci + 3].data,
        );
        Ok(DetectorCache {
            height: gh,
            width: gw,
            input,
            stem_pre,
            trunk,
            res_pre,
            center_pre,
            center_hidden,
            center_logits: logits.column(0).to_vec(),
        })
    }

    /// Offset-head outputs at `cells` given as `(row, col)`.
    pub fn offsets_at(&self, cache: &DetectorCache, cells: &[(usize, usize)]) -> Result<OffsetCache> {
        let f = self.config.width;
        let g = self.shape(cache.height, cache.width, 3, 1);
        let mut patches = Array2::<f64>::zeros((cells.len(), 9 * f));
        for (k, &(r, c)) in cells.iter().enumerate() {
            if r >= cache.height || c >= cache.width {
                return Err(Error::InvalidArgument(format!("cell ({r}, {c}) outside the grid")));
            }
            let patch = gather_patch(cache.trunk_out().view(), g, 0, r, c);
            patches.row_mut(k).assign(&ndarray::ArrayView1::from(&patch));
        }
        let oi = self.offset_idx();
        let p = &self.params;
        let hidden_pre = add_bias(patches.dot(&p[oi].matrix().t()), &p[oi + 1].data);
        let hidden = relu(&hidden_pre);
        let output = add_bias(hidden.dot(&p[oi + 2].matrix().t()), &p[oi + 3].data);
        Ok(OffsetCache {
            cells: cells.to_vec(),
            patches,
            hidden_pre,
            hidden,
            output,
        })
    }

    /// Gradients of all parameters given the loss gradient with respect to
    /// the center logits (one per cell, or empty for none) and to the offset
    /// outputs (`cells × 2N`, or `None`).
    pub fn backward(
        &self,
        cache: &DetectorCache,
        d_logits: &[f64],
        offsets: Option<(&OffsetCache, &Array2<f64>)>,
    ) -> Result<Grads> {
        let (gh, gw) = (cache.height, cache.width);
        let cells = gh * gw;
        let f = self.config.width;
        let p = &self.params;
        let mut grads = Grads::zeros_like(p);
        let mut d_feat = Array2::<f64>::zeros((cells, f));
        let g1 = self.shape(gh, gw, 3, 1);
        let ci = self.center_idx();
        if !d_logits.is_empty() {
            if d_logits.len() != cells {
                return Err(Error::Shape(format!("{} logit gradients for {cells} cells", d_logits.len())));
            }
            let dl = Array2::from_shape_vec((cells, 1), d_logits.to_vec()).expect("column");
            let mut db = vec![0.0; 1];
            let d_hidden = conv2d_backward(
                cache.center_hidden.view(),
                self.shape(gh, gw, 1, 1),
                p[ci + 2].matrix(),
                dl.view(),
                grads.matrix_mut(ci + 2, 1),
                &mut db,
            );
            grads.0[ci + 3][0] += db[0];
            let d_pre = relu_backward(&cache.center_pre, &d_hidden);
            let mut db = vec![0.0; f];
            d_feat += &conv2d_backward(
                cache.trunk_out().view(),
                g1,
                p[ci].matrix(),
                d_pre.view(),
                grads.matrix_mut(ci, f),
                &mut db,
            );
            add_into(&mut grads.0[ci + 1], &db);
        }
        if let Some((oc, d_out)) = offsets {
            if d_out.dim() != oc.output.dim() {
                return Err(Error::Shape("offset gradient shape".into()));
            }
            let oi = self.offset_idx();
            let n2 = 2 * self.config.vertices;
            {
                let mut dw = grads.matrix_mut(oi + 2, n2);
                dw += &d_out.t().dot(&oc.hidden);
            }
            add_into(&mut grads.0[oi + 3], d_out.sum_axis(Axis(0)).as_slice().expect("contiguous"));
            let d_hidden = d_out.dot(&p[oi + 2].matrix());
            let d_pre = relu_backward(&oc.hidden_pre, &d_hidden);
            {
                let mut dw = grads.matrix_mut(oi, f);
                dw += &d_pre.t().dot(&oc.patches);
            }
            add_into(&mut grads.0[oi + 1], d_pre.sum_axis(Axis(0)).as_slice().expect("contiguous"));
            let d_patches = d_pre.dot(&p[oi].matrix());
            for (k, &(r, c)) in oc.cells.iter().enumerate() {
                scatter_patch(&mut d_feat, g1, 0, r, c, d_patches.row(k).as_slice().expect("contiguous"));
            }
        }
        for (i, &d) in self.config.dilations.iter().enumerate().rev() {
            let d_pre = relu_backward(&cache.res_pre[i], &d_feat);
            let mut db = vec![0.0; f];
            let d_in = conv2d_backward(
                cache.trunk[i].view(),
                self.shape(gh, gw, 3, d),
                p[self.res(i)].matrix(),
                d_pre.view(),
                grads.matrix_mut(self.res(i), f),
                &mut db,
            );
            add_into(&mut grads.0[self.res(i) + 1], &db);
            d_feat += &d_in;
        }
        let d_pre = relu_backward(&cache.stem_pre, &d_feat);
        let mut db = vec![0.0; f];
        conv2d_backward(
            cache.input.view(),
            g1,
            p[self.stem()].matrix(),
            d_pre.view(),
            grads.matrix_mut(self.stem(), f),
            &mut db,
        );
        add_into(&mut grads.0[self.stem() + 1], &db);
        Ok(grads)
    }
}

fn add_bias(mut y: Array2<f64>, bias: &[f64]) -> Array2<f64> {
    for mut row in y.rows_mut() {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
    y
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_grid(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> FeatureGrid {
        let mut g = FeatureGrid::zeros(w, h, c);
        g.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        g
    }

    /// Scalar objective `Σ a·logits + Σ b·offsets` with fixed random weights.
    fn objective(det: &Detector, grid: &FeatureGrid, cells: &[(usize, usize)], a: &[f64], b: &Array2<f64>) -> f64 {
        let cache = det.forward(grid).unwrap();
        let oc = det.offsets_at(&cache, cells).unwrap();
        cache.center_logits.iter().zip(a).map(|(x, y)| x * y).sum::<f64>() + (&oc.output * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut det = Detector::new(
            DetectorConfig {
                in_channels: 3,
                width: 4,
                dilations: vec![2],
                vertices: 3,
            },
            &mut rng,
        );
        // Non-zero output layers so every path carries gradient.
        for p in &mut det.params {
            p.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let grid = random_grid(&mut rng, 5, 4, 3);
        let cells = [(1, 2), (3, 0)];
        let a: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = Array2::from_shape_fn((2, 6), |_| rng.gen_range(-1.0..1.0));
        let cache = det.forward(&grid).unwrap();
        let oc = det.offsets_at(&cache, &cells).unwrap();
        let grads = det.backward(&cache, &a, Some((&oc, &b))).unwrap();
        let h = 1e-6;
        for (pi, param) in det.params.clone().iter().enumerate() {
            for k in 0..param.len() {
                let mut plus = det.clone();
                plus.params[pi].data[k] += h;
                let mut minus = det.clone();
                minus.params[pi].data[k] -= h;
                let fd = (objective(&plus, &grid, &cells, &a, &b) - objective(&minus, &grid, &cells, &a, &b)) / (2.0 * h);
                let an = grads.0[pi][k];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "{} [{k}]: fd {fd} vs {an}", param.name);
            }
        }
    }

    #[test]
    fn fresh_detector_has_flat_prior_and_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let det = Detector::new(DetectorConfig::new(8, 8, 16), &mut rng);
        let grid = random_grid(&mut rng, 6, 6, 8);
        let cache = det.forward(&grid).unwrap();
        let oc = det.offsets_at(&cache, &[(2, 2)]).unwrap();
        assert!(oc.output.iter().all(|&v| v == 0.0));
        assert_eq!(oc.output.dim(), (1, 32));
        assert!(cache.heatmap().values.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(det.offsets_at(&cache, &[(6, 0)]).is_err());
    }
}
