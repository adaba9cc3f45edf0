//! COCO-style datasets and predictions, PGM images, SVG overlays and model
//! checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::config::{model_entries, set_model_field};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Point2, Polygon};
use crate::nn::{check_layout, Param};
use crate::pipeline::{Model, ModelConfig};
use crate::synth::GrayImage;

pub const CATEGORY_ID: u64 = 1;

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub polygon: Polygon,
    pub area: f64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
}

impl Annotation {
    pub fn from_polygon(id: u64, polygon: Polygon) -> Annotation {
        let bb = polygon.bbox();
        Annotation {
            id,
            area: polygon.area(),
            bbox: [bb.min.x, bb.min.y, bb.width(), bb.height()],
            polygon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image_id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<Annotation>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    segmentation: Vec<Vec<f64>>,
    area: f64,
    bbox: [f64; 4],
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoDataset {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

fn flatten(points: &[Point2]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

fn unflatten(coords: &[f64]) -> Option<Vec<Point2>> {
    if coords.len() % 2 != 0 {
        return None;
    }
    Some(coords.chunks_exact(2).map(|c| Point2::new(c[0], c[1])).collect())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| format_err(path, e.to_string()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| format_err(path, e.to_string()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())?;
    Ok(())
}

pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<()> {
    let doc = CocoDataset {
        images: records
            .iter()
            .map(|r| CocoImage {
                id: r.image_id,
                file_name: r.file_name.clone(),
                width: r.width,
                height: r.height,
            })
            .collect(),
        annotations: records
            .iter()
            .flat_map(|r| {
                r.annotations.iter().map(move |a| CocoAnnotation {
                    id: a.id,
                    image_id: r.image_id,
                    category_id: CATEGORY_ID,
                    segmentation: vec![flatten(a.polygon.vertices())],
                    area: a.area,
                    bbox: a.bbox,
                    iscrowd: 0,
                })
            })
            .collect(),
        categories: vec![CocoCategory {
            id: CATEGORY_ID,
            name: "building".into(),
        }],
    };
    write_json(&doc, path)
}

/// Reads and validates a dataset. Every annotation needs a single polygon
/// of at least three distinct vertices inside its image.
pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = read_text(path)?;
    let doc: CocoDataset =
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    let mut records: Vec<DatasetRecord> = Vec::with_capacity(doc.images.len());
    for img in doc.images {
        if records.iter().any(|r| r.image_id == img.id) {
            return Err(format_err(path, format!("duplicate image id {}", img.id)));
        }
        if img.width == 0 || img.height == 0 {
            return Err(format_err(path, format!("image {} has zero size", img.id)));
        }
        records.push(DatasetRecord {
            image_id: img.id,
            file_name: img.file_name,
            width: img.width,
            height: img.height,
            annotations: Vec::new(),
        });
    }
    for (k, ann) in doc.annotations.into_iter().enumerate() {
        let at = format!("annotation {} (#{k})", ann.id);
        let rec = records
            .iter_mut()
            .find(|r| r.image_id == ann.image_id)
            .ok_or_else(|| format_err(path, format!("{at} references unknown image {}", ann.image_id)))?;
        if ann.segmentation.len() != 1 {
            return Err(format_err(path, format!("{at} must hold exactly one polygon")));
        }
        let pts = unflatten(&ann.segmentation[0])
            .ok_or_else(|| format_err(path, format!("{at} has an odd coordinate count")))?;
        let (w, h) = (rec.width as f64, rec.height as f64);
        if pts.iter().any(|p| !p.is_finite() || p.x < 0.0 || p.y < 0.0 || p.x > w || p.y > h) {
            return Err(format_err(path, format!("{at} has a vertex outside the {w}×{h} image")));
        }
        let polygon = Polygon::new(pts).map_err(|e| format_err(path, format!("{at}: {e}")))?;
        rec.annotations.push(Annotation {
            id: ann.id,
            polygon,
            area: ann.area,
            bbox: ann.bbox,
        });
    }
    Ok(records)
}

/// One predicted building: a closed contour, its instance score and, before
/// reduction, one validity score per vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub image_id: u64,
    pub score: f64,
    pub points: Vec<Point2>,
    pub vertex_scores: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct CocoResult {
    image_id: u64,
    category_id: u64,
    score: f64,
    segmentation: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vertex_scores: Option<Vec<f64>>,
}

pub fn write_predictions(preds: &[PredictionRecord], path: &Path) -> Result<()> {
    let doc: Vec<CocoResult> = preds
        .iter()
        .map(|p| CocoResult {
            image_id: p.image_id,
            category_id: CATEGORY_ID,
            score: p.score,
            segmentation: vec![flatten(&p.points)],
            vertex_scores: p.vertex_scores.clone(),
        })
        .collect();
    write_json(&doc, path)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = read_text(path)?;
    let doc: Vec<CocoResult> =
        serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    doc.into_iter()
        .enumerate()
        .map(|(k, r)| {
            let at = format!("prediction #{k}");
            if r.segmentation.len() != 1 {
                return Err(format_err(path, format!("{at} must hold exactly one polygon")));
            }
            let points = unflatten(&r.segmentation[0])
                .ok_or_else(|| format_err(path, format!("{at} has an odd coordinate count")))?;
            if !(0.0..=1.0).contains(&r.score) {
                return Err(format_err(path, format!("{at} has score {} outside [0, 1]", r.score)));
            }
            if let Some(vs) = &r.vertex_scores {
                if vs.len() != points.len() {
                    return Err(format_err(path, format!("{at}: vertex score count differs from vertex count")));
                }
            }
            Ok(PredictionRecord {
                image_id: r.image_id,
                score: r.score,
                points,
                vertex_scores: r.vertex_scores,
            })
        })
        .collect()
}

/// Binary (P5) PGM.
pub fn write_pgm(image: &GrayImage, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    bytes.extend_from_slice(&image.data);
    write_bytes(path, &bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| format_err(path, e.to_string()))?.to_luma8();
    let (w, h) = img.dimensions();
    GrayImage::new(w as usize, h as usize, img.into_raw())
}

fn png_base64(image: &GrayImage) -> Result<String> {
    let mut buf = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut buf);
    image::ImageEncoder::write_image(
        encoder,
        &image.data,
        image.width as u32,
        image.height as u32,
        image::ColorType::L8,
    )
    .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(base64::engine::general_purpose::STANDARD.encode(buf))
}

/// A polygon to draw and its stroke color.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayShape {
    pub points: Vec<Point2>,
    pub color: String,
}

/// SVG of the image with every shape stroked and each vertex marked by one
/// circle.
pub fn overlay_svg(image: &GrayImage, shapes: &[OverlayShape]) -> Result<String> {
    let (w, h) = (image.width, image.height);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        s,
        r#"<image width="{w}" height="{h}" style="image-rendering:pixelated" href="data:image/png;base64,{}"/>"#,
        png_base64(image)?
    );
    for shape in shapes {
        let pts: Vec<String> = shape.points.iter().map(|p| format!("{:.2},{:.2}", p.x, p.y)).collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="none" stroke="{}" stroke-width="0.8"/>"#,
            pts.join(" "),
            shape.color
        );
        for p in &shape.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="{}"/>"#,
                p.x, p.y, shape.color
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_overlay(image: &GrayImage, polygons: &[Polygon], path: &Path) -> Result<()> {
    let shapes: Vec<OverlayShape> = polygons
        .iter()
        .map(|p| OverlayShape {
            points: p.vertices().to_vec(),
            color: "#ffd700".into(),
        })
        .collect();
    write_bytes(path, overlay_svg(image, &shapes)?.as_bytes())?;
    Ok(())
}

pub const CHECKPOINT_MAGIC: &str = "contourmap-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Text checkpoint: a header line, `config <key> <value>` lines, then for
/// every parameter a `param <name> <dims...>` line followed by one line of
/// space-separated row-major values. Floats use shortest round-trip
/// formatting, so save/load is lossless.
pub fn checkpoint_to_string(model: &Model) -> String {
    let mut s = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n");
    for (k, v) in model_entries(&model.config) {
        let _ = writeln!(s, "config {k} {v}");
    }
    for p in model.detector.params.iter().chain(&model.evolution.params) {
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "param {} {}", p.name, dims.join(" "));
        let vals: Vec<String> = p.data.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", vals.join(" "));
    }
    s
}

pub fn checkpoint_from_str(text: &str, origin: &Path) -> Result<Model> {
    let err = |m: String| format_err(origin, m);
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    let expected = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    if header != expected {
        return Err(err(format!("expected header '{expected}', found '{header}'")));
    }
    let mut config = ModelConfig::default();
    let mut params: Vec<Param> = Vec::new();
    while let Some((no, line)) = lines.next() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("config") => {
                let key = parts.next().ok_or_else(|| err(format!("line {}: missing key", no + 1)))?;
                let value = parts.next().ok_or_else(|| err(format!("line {}: missing value", no + 1)))?;
                if !set_model_field(&mut config, key, value).map_err(|e| err(format!("line {}: {e}", no + 1)))? {
                    return Err(err(format!("line {}: unknown config key {key}", no + 1)));
                }
            }
            Some("param") => {
                let name = parts.next().ok_or_else(|| err(format!("line {}: missing name", no + 1)))?;
                let shape = parts
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err(format!("line {}: bad shape", no + 1)))?;
                let (vno, values) = lines.next().ok_or_else(|| err(format!("{name}: missing values")))?;
                let data = values
                    .split_whitespace()
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err(format!("line {}: bad number", vno + 1)))?;
                if data.len() != shape.iter().product::<usize>() || data.iter().any(|v| !v.is_finite()) {
                    return Err(err(format!("line {}: {name} needs {:?} finite values", vno + 1, shape)));
                }
                params.push(Param {
                    name: name.to_string(),
                    shape,
                    data,
                });
            }
            None => {}
            Some(other) => return Err(err(format!("line {}: unexpected '{other}'", no + 1))),
        }
    }
    let mut model = Model::new(config, 0).map_err(|e| err(e.to_string()))?;
    let split = model.detector.params.len();
    if params.len() < split {
        return Err(err(format!("expected at least {split} parameter arrays")));
    }
    let evo = params.split_off(split);
    check_layout(&model.detector.params, &params).map_err(|e| err(e.to_string()))?;
    check_layout(&model.evolution.params, &evo).map_err(|e| err(e.to_string()))?;
    model.detector.params = params;
    model.evolution.params = evo;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_bytes(path, checkpoint_to_string(model).as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    checkpoint_from_str(&read_text(path)?, path)
}

/// Path of a dataset image, relative paths resolved against the dataset
/// file's directory.
pub fn image_path(dataset: &Path, record: &DatasetRecord) -> PathBuf {
    let p = Path::new(&record.file_name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dataset.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Bounding box `[x, y, w, h]` of a point list.
pub fn bbox_xywh(points: &[Point2]) -> Option<[f64; 4]> {
    BBox::of(points).map(|b| [b.min.x, b.min.y, b.width(), b.height()])
}
