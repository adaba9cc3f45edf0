//! Mask and boundary IoU, averaged precision, size splits and
//! manual-delineation-level statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{erode_mask, expand_mask, pixel_area, rasterize, Polygon, RasterMask};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub const SIZE_SPLIT_PIXELS: usize = 7500;
pub const DEFAULT_BOUNDARY_FRACTION: f64 = 0.01;
pub const MATCH_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancePrediction {
    pub image_id: u64,
    pub polygon: Polygon,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub polygon: Polygon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SizeClass {
    SmallMedium,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMode {
    /// Mean of TP / (TP + FP) over the ten thresholds.
    #[default]
    Literal,
    /// 101-point interpolated precision–recall integral.
    Coco,
}

impl std::str::FromStr for ApMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<ApMode> {
        match s {
            "literal" => Ok(ApMode::Literal),
            "coco" => Ok(ApMode::Coco),
            _ => Err(Error::InvalidArgument(format!("unknown AP mode '{s}'"))),
        }
    }
}

impl std::fmt::Display for ApMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ApMode::Literal => "literal",
            ApMode::Coco => "coco",
        })
    }
}

fn raster_iou(a: &RasterMask, b: &RasterMask) -> f64 {
    let union = a.union_count(b);
    if union == 0 {
        0.0
    } else {
        a.intersection_count(b) as f64 / union as f64
    }
}

pub fn mask_iou(a: &Polygon, b: &Polygon, width: usize, height: usize) -> Result<f64> {
    Ok(raster_iou(&rasterize(a, width, height)?, &rasterize(b, width, height)?))
}

/// Band radius in pixels: `fraction` of the frame diagonal, at least 1.
pub fn boundary_radius(width: usize, height: usize, fraction: f64) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((fraction * diag).round() as usize).max(1)
}

/// Mask pixels within Chebyshev distance `d` of the mask's own boundary
/// pixels (mask pixels with a background 8-neighbor or touching the frame).
pub fn boundary_band(mask: &RasterMask, d: usize) -> RasterMask {
    let boundary = mask.minus(&erode_mask(mask, 1));
    mask.and(&expand_mask(&boundary, d))
}

pub fn boundary_iou_with_radius(
    a: &Polygon,
    b: &Polygon,
    width: usize,
    height: usize,
    d: usize,
) -> Result<f64> {
    let ba = boundary_band(&rasterize(a, width, height)?, d);
    let bb = boundary_band(&rasterize(b, width, height)?, d);
    Ok(raster_iou(&ba, &bb))
}

pub fn boundary_iou(
    a: &Polygon,
    b: &Polygon,
    width: usize,
    height: usize,
    fraction: f64,
) -> Result<f64> {
    boundary_iou_with_radius(a, b, width, height, boundary_radius(width, height, fraction))
}

pub fn size_split(gt: &Polygon) -> SizeClass {
    if pixel_area(gt) < SIZE_SPLIT_PIXELS {
        SizeClass::SmallMedium
    } else {
        SizeClass::Large
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(prediction, ground truth, iou)` in matching order.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.pairs.len()
    }

    pub fn false_positives(&self) -> usize {
        self.unmatched_preds.len()
    }

    pub fn false_negatives(&self) -> usize {
        self.unmatched_gts.len()
    }

    pub fn gt_for_pred(&self, pred: usize) -> Option<(usize, f64)> {
        self.pairs.iter().find(|p| p.0 == pred).map(|p| (p.1, p.2))
    }
}

/// Prediction indices by descending score, lower index first among ties.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching on a precomputed `preds × gts` IoU table.
pub fn match_by_iou(scores: &[f64], ious: &[Vec<f64>], threshold: f64) -> MatchResult {
    let n_gt = ious.first().map_or(0, Vec::len);
    let mut taken = vec![false; n_gt];
    let mut out = MatchResult::default();
    for p in score_order(scores) {
        let mut best: Option<(usize, f64)> = None;
        for (g, &iou) in ious[p].iter().enumerate() {
            if !taken[g] && iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) => {
                taken[g] = true;
                out.pairs.push((p, g, iou));
            }
            None => out.unmatched_preds.push(p),
        }
    }
    out.unmatched_preds.sort_unstable();
    out.unmatched_gts = (0..n_gt).filter(|&g| !taken[g]).collect();
    out
}

pub fn match_instances<F>(
    preds: &[InstancePrediction],
    gts: &[Polygon],
    iou_fn: F,
    threshold: f64,
) -> MatchResult
where
    F: Fn(&Polygon, &Polygon) -> f64,
{
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let ious: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| iou_fn(&p.polygon, g)).collect())
        .collect();
    let mut m = match_by_iou(&scores, &ious, threshold);
    if preds.is_empty() {
        m.unmatched_gts = (0..gts.len()).collect();
    }
    m
}

/// One image's worth of precomputed overlaps.
#[derive(Debug, Clone)]
struct ImageTable {
    scores: Vec<f64>,
    ious: Vec<Vec<f64>>,
    n_gt: usize,
    gt_class: Vec<SizeClass>,
    pred_class: Vec<SizeClass>,
}

impl ImageTable {
    fn matches(&self, threshold: f64) -> MatchResult {
        let mut m = match_by_iou(&self.scores, &self.ious, threshold);
        if self.scores.is_empty() {
            m.unmatched_gts = (0..self.n_gt).collect();
        }
        m
    }
}

/// Per-prediction outcome at one threshold, restricted to a size class.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

fn outcomes(
    table: &ImageTable,
    m: &MatchResult,
    class: Option<SizeClass>,
) -> Vec<Outcome> {
    let mut out = vec![Outcome::Fp; table.scores.len()];
    for &(p, g, _) in &m.pairs {
        out[p] = match class {
            Some(k) if table.gt_class[g] != k => Outcome::Ignored,
            _ => Outcome::Tp,
        };
    }
    for &p in &m.unmatched_preds {
        if let Some(k) = class {
            if table.pred_class[p] != k {
                out[p] = Outcome::Ignored;
            }
        }
    }
    out
}

fn gt_count(tables: &[ImageTable], class: Option<SizeClass>) -> usize {
    tables
        .iter()
        .map(|t| match class {
            None => t.n_gt,
            Some(k) => t.gt_class.iter().filter(|&&c| c == k).count(),
        })
        .sum()
}

fn precision_at(tables: &[ImageTable], threshold: f64, class: Option<SizeClass>) -> f64 {
    let (mut tp, mut fp) = (0usize, 0usize);
    for t in tables {
        for o in outcomes(t, &t.matches(threshold), class) {
            match o {
                Outcome::Tp => tp += 1,
                Outcome::Fp => fp += 1,
                Outcome::Ignored => {}
            }
        }
    }
    if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

fn coco_ap_at(tables: &[ImageTable], threshold: f64, class: Option<SizeClass>) -> f64 {
    let n_gt = gt_count(tables, class);
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    for t in tables {
        let m = t.matches(threshold);
        for (p, o) in outcomes(t, &m, class).into_iter().enumerate() {
            if o != Outcome::Ignored {
                ranked.push((t.scores[p], o == Outcome::Tp));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, is_tp) in &ranked {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

fn ap_over_tables(tables: &[ImageTable], class: Option<SizeClass>, mode: ApMode) -> Option<f64> {
    if gt_count(tables, class) == 0 {
        return None;
    }
    let ths = iou_thresholds();
    let total: f64 = ths
        .iter()
        .map(|&th| match mode {
            ApMode::Literal => precision_at(tables, th, class),
            ApMode::Coco => coco_ap_at(tables, th, class),
        })
        .sum();
    Some(total / ths.len() as f64)
}

/// AP of predictions against the ground truth of a single image.
pub fn average_precision<F>(
    preds: &[InstancePrediction],
    gts: &[Polygon],
    iou_fn: F,
    mode: ApMode,
) -> Result<f64>
where
    F: Fn(&Polygon, &Polygon) -> f64,
{
    if gts.is_empty() {
        return Err(Error::InvalidArgument("average precision needs ground truth".into()));
    }
    let table = ImageTable {
        scores: preds.iter().map(|p| p.score).collect(),
        ious: preds
            .iter()
            .map(|p| gts.iter().map(|g| iou_fn(&p.polygon, g)).collect())
            .collect(),
        n_gt: gts.len(),
        gt_class: gts.iter().map(size_split).collect(),
        pred_class: preds.iter().map(|p| size_split(&p.polygon)).collect(),
    };
    Ok(ap_over_tables(&[table], None, mode).unwrap_or(0.0))
}

fn manual_threshold_from_mask(gt: &RasterMask, r: usize) -> f64 {
    let expanded = expand_mask(gt, r).count();
    if expanded == 0 {
        1.0
    } else {
        gt.count() as f64 / expanded as f64
    }
}

/// IoU between the ground truth and the ground truth grown by `r` pixels.
pub fn manual_level_threshold(gt: &Polygon, r: usize, width: usize, height: usize) -> Result<f64> {
    Ok(manual_threshold_from_mask(&rasterize(gt, width, height)?, r))
}

/// Fraction of ground-truth instances whose prediction, matched at mask IoU
/// 0.5, beats that instance's manual-level threshold.
pub fn manual_level_rate(
    preds: &[InstancePrediction],
    gts: &[Polygon],
    r: usize,
    width: usize,
    height: usize,
) -> Result<f64> {
    if gts.is_empty() {
        return Ok(0.0);
    }
    let gt_masks = gts
        .iter()
        .map(|g| rasterize(g, width, height))
        .collect::<Result<Vec<_>>>()?;
    let pred_masks = preds
        .iter()
        .map(|p| rasterize(&p.polygon, width, height))
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let ious: Vec<Vec<f64>> = pred_masks
        .iter()
        .map(|p| gt_masks.iter().map(|g| raster_iou(p, g)).collect())
        .collect();
    let m = match_by_iou(&scores, &ious, MATCH_THRESHOLD);
    let hits = m
        .pairs
        .iter()
        .filter(|&&(_, g, iou)| iou > manual_threshold_from_mask(&gt_masks[g], r))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub ap_mode: ApMode,
    pub boundary_fraction: f64,
}

impl Default for EvalOptions {
    fn default() -> EvalOptions {
        EvalOptions {
            ap_mode: ApMode::Literal,
            boundary_fraction: DEFAULT_BOUNDARY_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub threshold: f64,
    pub mask: f64,
    pub boundary: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap_mode: ApMode,
    pub ap_msk: f64,
    pub ap_bdy: f64,
    pub ap_msk_sm: Option<f64>,
    pub ap_msk_l: Option<f64>,
    pub ap_bdy_sm: Option<f64>,
    pub ap_bdy_l: Option<f64>,
    pub manual_level_2px: f64,
    pub manual_level_3px: f64,
    /// Mean over ground-truth instances of the mask IoU of the prediction
    /// matched at 0.5, with unmatched instances counting as 0.
    pub mean_instance_iou: f64,
    pub num_gt: usize,
    pub num_pred: usize,
    /// Pooled TP / (TP + FP) per IoU threshold.
    pub precision: Vec<PrecisionRow>,
}

struct ImageData {
    mask: ImageTable,
    boundary: ImageTable,
    manual2: usize,
    manual3: usize,
    iou_sum: f64,
}

fn evaluate_image(
    preds: &[&InstancePrediction],
    gts: &[&Polygon],
    width: usize,
    height: usize,
    d: usize,
) -> Result<ImageData> {
    let gt_masks = gts
        .iter()
        .map(|g| rasterize(g, width, height))
        .collect::<Result<Vec<_>>>()?;
    let pred_masks = preds
        .iter()
        .map(|p| rasterize(&p.polygon, width, height))
        .collect::<Result<Vec<_>>>()?;
    let gt_bands: Vec<RasterMask> = gt_masks.iter().map(|m| boundary_band(m, d)).collect();
    let pred_bands: Vec<RasterMask> = pred_masks.iter().map(|m| boundary_band(m, d)).collect();
    let bboxes_overlap = |p: usize, g: usize| {
        let a = preds[p].polygon.bbox();
        let b = gts[g].bbox();
        a.min.x <= b.max.x && b.min.x <= a.max.x && a.min.y <= b.max.y && b.min.y <= a.max.y
    };
    let table = |pm: &[RasterMask], gm: &[RasterMask]| -> Vec<Vec<f64>> {
        (0..pm.len())
            .map(|p| {
                (0..gm.len())
                    .map(|g| if bboxes_overlap(p, g) { raster_iou(&pm[p], &gm[g]) } else { 0.0 })
                    .collect()
            })
            .collect()
    };
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let gt_class: Vec<SizeClass> = gts.iter().map(|g| size_split(g)).collect();
    let pred_class: Vec<SizeClass> = preds.iter().map(|p| size_split(&p.polygon)).collect();
    let mask = ImageTable {
        scores: scores.clone(),
        ious: table(&pred_masks, &gt_masks),
        n_gt: gts.len(),
        gt_class: gt_class.clone(),
        pred_class: pred_class.clone(),
    };
    let boundary = ImageTable {
        scores,
        ious: table(&pred_bands, &gt_bands),
        n_gt: gts.len(),
        gt_class,
        pred_class,
    };
    let m = mask.matches(MATCH_THRESHOLD);
    let mut manual2 = 0;
    let mut manual3 = 0;
    let mut iou_sum = 0.0;
    for &(_, g, iou) in &m.pairs {
        iou_sum += iou;
        if iou > manual_threshold_from_mask(&gt_masks[g], 2) {
            manual2 += 1;
        }
        if iou > manual_threshold_from_mask(&gt_masks[g], 3) {
            manual3 += 1;
        }
    }
    Ok(ImageData {
        mask,
        boundary,
        manual2,
        manual3,
        iou_sum,
    })
}

/// Full report over several images. `frames` maps image ids to
/// `(width, height)`; every prediction and ground truth must reference one.
pub fn evaluate(
    preds: &[InstancePrediction],
    gts: &[GroundTruth],
    frames: &BTreeMap<u64, (usize, usize)>,
    options: EvalOptions,
) -> Result<EvalReport> {
    if gts.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs ground truth".into()));
    }
    let mut by_image: BTreeMap<u64, (Vec<&InstancePrediction>, Vec<&Polygon>)> = BTreeMap::new();
    for p in preds {
        if !(0.0..=1.0).contains(&p.score) {
            return Err(Error::InvalidArgument(format!(
                "prediction score {} outside [0, 1]",
                p.score
            )));
        }
        by_image.entry(p.image_id).or_default().0.push(p);
    }
    for g in gts {
        by_image.entry(g.image_id).or_default().1.push(&g.polygon);
    }
    let mut images = Vec::with_capacity(by_image.len());
    for (id, (ps, gs)) in &by_image {
        let &(w, h) = frames
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no frame size for image {id}")))?;
        let d = boundary_radius(w, h, options.boundary_fraction);
        images.push(evaluate_image(ps, gs, w, h, d)?);
    }
    let mask: Vec<ImageTable> = images.iter().map(|i| i.mask.clone()).collect();
    let boundary: Vec<ImageTable> = images.iter().map(|i| i.boundary.clone()).collect();
    let mode = options.ap_mode;
    let n_gt = gts.len() as f64;
    Ok(EvalReport {
        ap_mode: mode,
        ap_msk: ap_over_tables(&mask, None, mode).unwrap_or(0.0),
        ap_bdy: ap_over_tables(&boundary, None, mode).unwrap_or(0.0),
        ap_msk_sm: ap_over_tables(&mask, Some(SizeClass::SmallMedium), mode),
        ap_msk_l: ap_over_tables(&mask, Some(SizeClass::Large), mode),
        ap_bdy_sm: ap_over_tables(&boundary, Some(SizeClass::SmallMedium), mode),
        ap_bdy_l: ap_over_tables(&boundary, Some(SizeClass::Large), mode),
        manual_level_2px: images.iter().map(|i| i.manual2).sum::<usize>() as f64 / n_gt,
        manual_level_3px: images.iter().map(|i| i.manual3).sum::<usize>() as f64 / n_gt,
        mean_instance_iou: images.iter().map(|i| i.iou_sum).sum::<f64>() / n_gt,
        num_gt: gts.len(),
        num_pred: preds.len(),
        precision: iou_thresholds()
            .iter()
            .map(|&th| PrecisionRow {
                threshold: th,
                mask: precision_at(&mask, th, None),
                boundary: precision_at(&boundary, th, None),
            })
            .collect(),
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.1}", 100.0 * x))
}

impl EvalReport {
    /// Plain-text tables: AP columns, manual-level rates, then per-threshold
    /// precision. Values are percentages.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, cols: &[String]| {
            let line: Vec<String> = cols.iter().map(|c| format!("{c:>9}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        };
        let p50 = self.precision.first().map(|r| r.mask);
        let p75 = self.precision.get(5).map(|r| r.mask);
        let _ = writeln!(s, "AP mode: {}  instances: {} gt / {} pred", self.ap_mode, self.num_gt, self.num_pred);
        row(
            &mut s,
            &["AP_msk", "P50_msk", "P75_msk", "AP_S&M", "AP_L", "AP_bdy", "AP_S&M", "AP_L"]
                .map(String::from),
        );
        row(
            &mut s,
            &[
                cell(Some(self.ap_msk)),
                cell(p50),
                cell(p75),
                cell(self.ap_msk_sm),
                cell(self.ap_msk_l),
                cell(Some(self.ap_bdy)),
                cell(self.ap_bdy_sm),
                cell(self.ap_bdy_l),
            ],
        );
        let _ = writeln!(s);
        row(&mut s, &["2-pixel", "3-pixel", "mean IoU"].map(String::from));
        row(
            &mut s,
            &[
                cell(Some(self.manual_level_2px)),
                cell(Some(self.manual_level_3px)),
                cell(Some(self.mean_instance_iou)),
            ],
        );
        let _ = writeln!(s);
        row(&mut s, &["IoU", "P_msk", "P_bdy"].map(String::from));
        for r in &self.precision {
            row(
                &mut s,
                &[format!("{:.2}", r.threshold), cell(Some(r.mask)), cell(Some(r.boundary))],
            );
        }
        s
    }
}
