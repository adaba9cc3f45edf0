//! End-to-end model: detector, initial contours, contour evolution and the
//! multi-task training step.
//!
//! Coordinates are constants inside each stage: the initial contour, the
//! first evolution and the second evolution each receive their own loss and
//! pass no gradient through the coordinates handed to the next stage.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assignment::{hungarian, match_cost};
use crate::detection::{
    build_heatmap_target, cell_center, cell_of, compose_initial_contour, decode_peaks, FeatureGrid, Heatmap,
    OffsetSet, STRIDE,
};
use crate::detector::{Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::evolution::{apply_offsets, batch_features, EvolutionConfig, EvolutionNet};
use crate::geometry::{densify, normalize_orientation, Point2, Polygon};
use crate::losses::{classification_loss_logits, dml, focal_center_loss, smooth_l1, LossBreakdown};
use crate::nn::{Grads, Optimizer, OptimizerKind};
use crate::synth::{feature_provider, GrayImage};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Contour vertex count N.
    pub vertices: usize,
    pub anchors: usize,
    pub feature_channels: usize,
    pub detector_width: usize,
    pub evolution_hidden: usize,
    /// Evolution rounds.
    pub iterations: usize,
    /// Offset expansion factor γ.
    pub gamma: f64,
    /// Heatmap peak threshold T and maximum detections K.
    pub center_threshold: f64,
    pub top_k: usize,
    /// Vertex validity threshold t.
    pub vertex_threshold: f64,
    /// Distance weight δ of the matching cost.
    pub delta: f64,
    /// Weight ε of the contour losses in the total.
    pub epsilon: f64,
    pub invalid_weight: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            vertices: 64,
            anchors: 4,
            feature_channels: crate::synth::FEATURE_CHANNELS,
            detector_width: 32,
            evolution_hidden: 128,
            iterations: 2,
            gamma: 10.0,
            center_threshold: 0.2,
            top_k: 200,
            vertex_threshold: 0.6,
            delta: 5.0,
            epsilon: 1.0 / 3.0,
            invalid_weight: 0.1,
            focal_alpha: 2.0,
            focal_beta: 4.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.anchors == 0 || self.vertices == 0 || self.vertices % self.anchors != 0 {
            return bad("vertex count must be a positive multiple of the anchor count");
        }
        if self.iterations < 2 {
            return bad("at least two evolution rounds are needed");
        }
        if self.feature_channels == 0 || self.detector_width == 0 || self.evolution_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if !(self.gamma > 0.0) || !(self.epsilon >= 0.0) || !(self.delta >= 0.0) {
            return bad("gamma must be positive; epsilon and delta non-negative");
        }
        if !(0.0..=1.0).contains(&self.center_threshold) || !(0.0..=1.0).contains(&self.vertex_threshold) {
            return bad("thresholds must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub detector: Detector,
    pub evolution: EvolutionNet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let detector = Detector::new(
            DetectorConfig::new(config.feature_channels, config.detector_width, config.vertices),
            &mut rng,
        );
        let evolution = EvolutionNet::new(
            EvolutionConfig::new(config.feature_channels, config.evolution_hidden),
            &mut rng,
        );
        Ok(Model {
            config,
            detector,
            evolution,
        })
    }
}

/// One ground-truth building prepared for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainInstance {
    pub cell: (usize, usize),
    pub gt: Vec<Point2>,
    pub corners: Vec<Point2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub width: usize,
    pub height: usize,
    pub grid: FeatureGrid,
    pub heatmap: Heatmap,
    pub instances: Vec<TrainInstance>,
}

pub fn prepare_sample(image: &GrayImage, buildings: &[Polygon], cfg: &ModelConfig) -> Result<TrainSample> {
    let mut centers = Vec::with_capacity(buildings.len());
    let mut sizes = Vec::with_capacity(buildings.len());
    let mut instances = Vec::with_capacity(buildings.len());
    for b in buildings {
        let corners = normalize_orientation(b)?.vertices().to_vec();
        if corners.len() > cfg.vertices {
            return Err(Error::InvalidArgument(format!(
                "building with {} corners exceeds the contour size {}",
                corners.len(),
                cfg.vertices
            )));
        }
        let bb = b.bbox();
        let center = bb.center();
        centers.push(center);
        sizes.push((bb.width(), bb.height()));
        instances.push(TrainInstance {
            cell: cell_of(center),
            gt: densify(b, cfg.vertices, cfg.anchors)?.into_points(),
            corners,
        });
    }
    Ok(TrainSample {
        width: image.width,
        height: image.height,
        grid: feature_provider(image),
        heatmap: build_heatmap_target(&centers, &sizes, image.width, image.height)?,
        instances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Center and initial-contour losses only.
    Detection,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Detection-only epochs at the start (E_int).
    pub warmup_epochs: usize,
    /// Epochs at which the learning rate is divided by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    /// Global gradient-norm ceiling per parameter set; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 30,
            warmup_epochs: 3,
            decay_epochs: vec![20, 25],
            decay_factor: 5.0,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Momentum,
            batch_size: 4,
            clip_norm: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.learning_rate / self.decay_factor.powi(decays as i32)
    }

    pub fn phase_at(&self, epoch: usize) -> Phase {
        if epoch < self.warmup_epochs {
            Phase::Detection
        } else {
            Phase::Full
        }
    }
}

/// Losses and gradients of one batch, before any parameter update.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub losses: LossBreakdown,
    pub total: f64,
    pub detector: Grads,
    pub evolution: Grads,
}

fn offsets_to_points(row: ndarray::ArrayView1<'_, f64>) -> OffsetSet {
    OffsetSet {
        offsets: row
            .as_slice()
            .expect("contiguous offsets")
            .chunks_exact(2)
            .map(|c| Point2::new(c[0], c[1]))
            .collect(),
    }
}

fn image_diagonal(s: &TrainSample) -> f64 {
    ((s.width * s.width + s.height * s.height) as f64).sqrt()
}

/// Loss breakdown and parameter gradients of `total_loss` over a batch.
pub fn batch_gradients(model: &Model, batch: &[&TrainSample], phase: Phase) -> Result<BatchGradients> {
    let cfg = &model.config;
    let n = cfg.vertices;
    let n_inst: usize = batch.iter().map(|s| s.instances.len()).sum();
    if batch.is_empty() || n_inst == 0 {
        return Err(Error::InvalidArgument("batch has no instances".into()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let inv_i = 1.0 / n_inst as f64;
    let eps = cfg.epsilon;
    let scale = cfg.gamma * STRIDE as f64;
    let mut losses = LossBreakdown::default();

    // Detection: forward every scene, center loss, initial contours.
    let mut det_caches = Vec::with_capacity(batch.len());
    let mut off_caches = Vec::with_capacity(batch.len());
    let mut d_logits_all = Vec::with_capacity(batch.len());
    let mut d_offsets_all = Vec::with_capacity(batch.len());
    let mut init_contours: Vec<Vec<Point2>> = Vec::with_capacity(n_inst);
    for s in batch {
        let cache = model.detector.forward(&s.grid)?;
        let probs: Vec<f64> = cache.heatmap().values;
        let focal = focal_center_loss(&probs, &s.heatmap.values, cfg.focal_alpha, cfg.focal_beta)?;
        losses.center += inv_b * focal.value;
        let d_logits: Vec<f64> = focal
            .grad
            .iter()
            .zip(&probs)
            .map(|(g, p)| inv_b * g * p * (1.0 - p))
            .collect();
        let cells: Vec<(usize, usize)> = s.instances.iter().map(|i| i.cell).collect();
        let oc = model.detector.offsets_at(&cache, &cells)?;
        let mut d_out = Array2::<f64>::zeros(oc.output.dim());
        for (k, inst) in s.instances.iter().enumerate() {
            let center = cell_center(inst.cell.0, inst.cell.1);
            let offs = offsets_to_points(oc.output.row(k));
            let init = compose_initial_contour(center, &offs, cfg.gamma, cfg.anchors)?.into_points();
            let l = smooth_l1(&init, &inst.gt)?;
            losses.init += inv_i * l.value;
            for (d, g) in d_out.row_mut(k).iter_mut().zip(&l.grad) {
                *d = eps * inv_i * g * scale;
            }
            init_contours.push(init);
        }
        det_caches.push(cache);
        off_caches.push(oc);
        d_logits_all.push(d_logits);
        d_offsets_all.push(d_out);
    }
    let mut det_grads = Grads::zeros_like(&model.detector.params);
    for k in 0..batch.len() {
        let g = model.detector.backward(
            &det_caches[k],
            &d_logits_all[k],
            Some((&off_caches[k], &d_offsets_all[k])),
        )?;
        det_grads.add_assign(&g);
    }
    let mut evo_grads = Grads::zeros_like(&model.evolution.params);
    if phase == Phase::Full {
        let owners: Vec<&TrainSample> = batch
            .iter()
            .flat_map(|s| std::iter::repeat(*s).take(s.instances.len()))
            .collect();
        let instances: Vec<&TrainInstance> = batch.iter().flat_map(|s| s.instances.iter()).collect();
        let mut current = init_contours;
        for round in 0..cfg.iterations {
            let items: Vec<(&FeatureGrid, &[Point2])> = owners
                .iter()
                .zip(&current)
                .map(|(s, c)| (&s.grid, c.as_slice()))
                .collect();
            let x = batch_features(&items);
            let (out, cache) = model.evolution.forward(&x, n)?;
            let moved: Vec<Vec<Point2>> = current
                .iter()
                .enumerate()
                .map(|(k, c)| apply_offsets(c, &out.offsets.slice(ndarray::s![k * n..(k + 1) * n, ..]).to_owned()))
                .collect();
            let mut d_off = Array2::<f64>::zeros(out.offsets.dim());
            let mut d_logit = vec![0.0; out.logit_diff.len()];
            let last = round + 1 == cfg.iterations;
            let probs = out.valid_probs();
            for (k, inst) in instances.iter().enumerate() {
                let grad = if last {
                    let p = &probs[k * n..(k + 1) * n];
                    let cost = match_cost(&inst.corners, &moved[k], p, cfg.delta, image_diagonal(owners[k]))?;
                    let asg = hungarian(&cost)?;
                    let parts = dml(&moved[k], &inst.gt, &inst.corners, &asg)?;
                    losses.evolve2 += inv_i * parts.loss.value;
                    let cla = classification_loss_logits(&out.logit_diff[k * n..(k + 1) * n], &asg, cfg.invalid_weight)?;
                    losses.classify += inv_i * cla.value;
                    for (d, g) in d_logit[k * n..(k + 1) * n].iter_mut().zip(&cla.grad) {
                        *d = inv_i * g;
                    }
                    parts.loss.grad
                } else {
                    let l = smooth_l1(&moved[k], &inst.gt)?;
                    // Every round before the last is supervised like the first.
                    losses.evolve1 += inv_i * l.value;
                    l.grad
                };
                for (j, g) in grad.chunks_exact(2).enumerate() {
                    d_off[[k * n + j, 0]] = eps * inv_i * g[0];
                    d_off[[k * n + j, 1]] = eps * inv_i * g[1];
                }
            }
            evo_grads.add_assign(&model.evolution.backward(&cache, &d_off, &d_logit));
            current = moved;
        }
    }
    let total = losses.total(eps);
    if !total.is_finite() || !det_grads.is_finite() || !evo_grads.is_finite() {
        return Err(Error::NonFinite("training loss or gradient".into()));
    }
    Ok(BatchGradients {
        losses,
        total,
        detector: det_grads,
        evolution: evo_grads,
    })
}

/// Mutable training state: model plus optimizer buffers.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    det_opt: Optimizer,
    evo_opt: Optimizer,
    rng: ChaCha8Rng,
    pub epoch: usize,
}

/// Per-epoch record of mean losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub losses: LossBreakdown,
    pub total: f64,
}

fn clip(grads: &mut Grads, max_norm: f64) {
    if max_norm > 0.0 {
        let norm = grads.norm();
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
    }
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Trainer> {
        if config.batch_size == 0 || !(config.learning_rate >= 0.0) {
            return Err(Error::InvalidArgument("batch size must be positive and learning rate non-negative".into()));
        }
        Ok(Trainer {
            det_opt: Optimizer::new(config.optimizer, &model.detector.params),
            evo_opt: Optimizer::new(config.optimizer, &model.evolution.params),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed),
            model,
            config,
            epoch: 0,
        })
    }

    /// One optimizer update on `batch`; returns the losses measured before
    /// the update.
    pub fn step(&mut self, batch: &[&TrainSample], phase: Phase, lr: f64) -> Result<(LossBreakdown, f64)> {
        let mut g = batch_gradients(&self.model, batch, phase)?;
        clip(&mut g.detector, self.config.clip_norm);
        clip(&mut g.evolution, self.config.clip_norm);
        self.det_opt.step(&mut self.model.detector.params, &g.detector, lr);
        if phase == Phase::Full {
            self.evo_opt.step(&mut self.model.evolution.params, &g.evolution, lr);
        }
        Ok((g.losses, g.total))
    }

    pub fn run_epoch(&mut self, samples: &[TrainSample]) -> Result<EpochLog> {
        let epoch = self.epoch;
        let lr = self.config.learning_rate_at(epoch);
        let phase = self.config.phase_at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).filter(|&i| !samples[i].instances.is_empty()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossBreakdown::default();
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (l, t) = self.step(&batch, phase, lr)?;
            sum.center += l.center;
            sum.init += l.init;
            sum.evolve1 += l.evolve1;
            sum.evolve2 += l.evolve2;
            sum.classify += l.classify;
            total += t;
            batches += 1;
        }
        let k = 1.0 / batches.max(1) as f64;
        self.epoch += 1;
        Ok(EpochLog {
            epoch,
            learning_rate: lr,
            losses: LossBreakdown {
                center: sum.center * k,
                init: sum.init * k,
                evolve1: sum.evolve1 * k,
                evolve2: sum.evolve2 * k,
                classify: sum.classify * k,
            },
            total: total * k,
        })
    }

    pub fn fit(
        &mut self,
        samples: &[TrainSample],
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::with_capacity(self.config.epochs);
        while self.epoch < self.config.epochs {
            let log = self.run_epoch(samples)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// A detected building before vertex reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct ContourPrediction {
    pub score: f64,
    pub points: Vec<Point2>,
    pub vertex_scores: Vec<f64>,
}

/// Detection, initial contours and all evolution rounds on one grid.
pub fn predict(model: &Model, grid: &FeatureGrid) -> Result<Vec<ContourPrediction>> {
    let cfg = &model.config;
    let n = cfg.vertices;
    let cache = model.detector.forward(grid)?;
    let peaks = decode_peaks(&cache.heatmap(), cfg.center_threshold, cfg.top_k);
    if peaks.is_empty() {
        return Ok(Vec::new());
    }
    let cells: Vec<(usize, usize)> = peaks.iter().map(|p| (p.row, p.col)).collect();
    let oc = model.detector.offsets_at(&cache, &cells)?;
    let mut contours: Vec<Vec<Point2>> = peaks
        .iter()
        .enumerate()
        .map(|(k, p)| {
            compose_initial_contour(p.position, &offsets_to_points(oc.output.row(k)), cfg.gamma, cfg.anchors)
                .map(|c| c.into_points())
        })
        .collect::<Result<_>>()?;
    let mut probs = vec![0.0; peaks.len() * n];
    for _ in 0..cfg.iterations {
        let items: Vec<(&FeatureGrid, &[Point2])> = contours.iter().map(|c| (grid, c.as_slice())).collect();
        let x = batch_features(&items);
        let (out, _) = model.evolution.forward(&x, n)?;
        contours = contours
            .iter()
            .enumerate()
            .map(|(k, c)| apply_offsets(c, &out.offsets.slice(ndarray::s![k * n..(k + 1) * n, ..]).to_owned()))
            .collect();
        probs = out.valid_probs();
    }
    Ok(peaks
        .iter()
        .zip(contours)
        .enumerate()
        .map(|(k, (p, points))| ContourPrediction {
            score: p.score,
            points,
            vertex_scores: probs[k * n..(k + 1) * n].to_vec(),
        })
        .collect())
}
