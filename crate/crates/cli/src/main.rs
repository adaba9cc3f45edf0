use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use contourmap::config::RunConfig;
use contourmap::evaluation::{evaluate, ApMode, GroundTruth, InstancePrediction};
use contourmap::geometry::{densify, Polygon};
use contourmap::io::{
    image_path, load_checkpoint, overlay_svg, read_dataset, read_pgm, read_predictions, save_checkpoint,
    write_dataset, write_pgm, write_predictions, Annotation, DatasetRecord, OverlayShape, PredictionRecord,
};
use contourmap::pipeline::{predict, prepare_sample, Model, Trainer};
use contourmap::reduction::{reduce, ScoredContour};
use contourmap::synth::{feature_provider, generate_dataset};

/// Building footprint extraction with contour evolution and vertex reduction.
#[derive(Parser)]
#[command(name = "contourmap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: PGM images plus a COCO-style annotation file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Resample every annotation to an evenly spaced N-vertex contour.
    Densify {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train detector and evolution network; writes a checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-epoch loss table (CSV).
        #[arg(long)]
        losses: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Predict N-vertex contours with per-vertex scores for every image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold, suppress and prune contour vertices down to corners.
    Reduce {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predictions against ground truth (JSON report, optional text report).
    Evaluate {
        /// A results array, or a dataset file whose annotations count as score-1 predictions.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        text: Option<PathBuf>,
        /// literal or coco; overrides the config.
        #[arg(long)]
        ap: Option<ApMode>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the evaluation tables and one SVG overlay per image.
    Report {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the default configuration.
    Config,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn synth(out: &Path, seed: u64, count: usize, cfg: &RunConfig) -> Result<()> {
    let scenes = generate_dataset(seed, &cfg.scene, count, cfg.max_buildings)?;
    fs::create_dir_all(out.join("images")).with_context(|| format!("creating {}", out.display()))?;
    let mut records = Vec::with_capacity(scenes.len());
    let mut next_ann = 1;
    for (i, scene) in scenes.iter().enumerate() {
        let file_name = format!("images/scene_{i:05}.pgm");
        write_pgm(&scene.image, &out.join(&file_name))?;
        let annotations = scene
            .buildings
            .iter()
            .map(|b| {
                next_ann += 1;
                Annotation::from_polygon(next_ann - 1, b.clone())
            })
            .collect();
        records.push(DatasetRecord {
            image_id: i as u64,
            file_name,
            width: scene.image.width,
            height: scene.image.height,
            annotations,
        });
    }
    write_dataset(&records, &out.join("annotations.json"))?;
    Ok(())
}

fn densify_dataset(dataset: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let mut records = read_dataset(dataset)?;
    for rec in &mut records {
        for ann in &mut rec.annotations {
            let dense = densify(&ann.polygon, cfg.model.vertices, cfg.model.anchors)
                .with_context(|| format!("densifying annotation {}", ann.id))?;
            *ann = Annotation::from_polygon(ann.id, Polygon::new(dense.into_points())?);
        }
    }
    let base = dataset.parent().unwrap_or(Path::new("."));
    let out_base = out.parent().unwrap_or(Path::new("."));
    if base != out_base {
        for rec in &mut records {
            let p = base.join(&rec.file_name);
            rec.file_name = fs::canonicalize(&p).unwrap_or(p).display().to_string();
        }
    }
    write_dataset(&records, out)?;
    Ok(())
}

fn train(dataset: &Path, out: &Path, cfg: &RunConfig, losses: Option<&Path>, quiet: bool) -> Result<()> {
    let records = read_dataset(dataset)?;
    let mut samples = Vec::with_capacity(records.len());
    for rec in &records {
        let path = image_path(dataset, rec);
        let image = read_pgm(&path)?;
        let polys: Vec<Polygon> = rec.annotations.iter().map(|a| a.polygon.clone()).collect();
        samples.push(
            prepare_sample(&image, &polys, &cfg.model).with_context(|| format!("image {}", rec.image_id))?,
        );
    }
    let model = Model::new(cfg.model.clone(), cfg.init_seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let mut csv = String::from("epoch,learning_rate,center,init,evolve1,evolve2,classify,total\n");
    trainer.fit(&samples, |log| {
        let l = &log.losses;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            log.epoch, log.learning_rate, l.center, l.init, l.evolve1, l.evolve2, l.classify, log.total
        );
        if !quiet {
            eprintln!("epoch {:>3}  lr {:.1e}  loss {:.4}", log.epoch, log.learning_rate, log.total);
        }
    })?;
    save_checkpoint(&trainer.model, out)?;
    if let Some(p) = losses {
        fs::write(p, csv)?;
    }
    Ok(())
}

fn infer(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let mut records = read_dataset(dataset)?;
    records.sort_by_key(|r| r.image_id);
    let mut preds = Vec::new();
    for rec in &records {
        let image = read_pgm(&image_path(dataset, rec))?;
        for p in predict(&model, &feature_provider(&image))? {
            preds.push(PredictionRecord {
                image_id: rec.image_id,
                score: p.score,
                points: p.points,
                vertex_scores: Some(p.vertex_scores),
            });
        }
    }
    write_predictions(&preds, out)?;
    Ok(())
}

fn reduce_predictions(input: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let preds = read_predictions(input)?;
    let mut reduced = Vec::with_capacity(preds.len());
    for (k, p) in preds.into_iter().enumerate() {
        let Some(scores) = p.vertex_scores else {
            bail!("prediction #{k} has no vertex scores");
        };
        let sc = ScoredContour::new(p.points, scores)?;
        if sc.len() < 3 {
            continue;
        }
        let poly = reduce(&sc, cfg.model.vertex_threshold, cfg.angle_threshold)
            .with_context(|| format!("reducing prediction #{k}"))?;
        reduced.push(PredictionRecord {
            image_id: p.image_id,
            score: p.score,
            points: poly.vertices().to_vec(),
            vertex_scores: None,
        });
    }
    reduced.sort_by_key(|p| p.image_id);
    write_predictions(&reduced, out)?;
    Ok(())
}

fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    match read_predictions(path) {
        Ok(p) => Ok(p),
        Err(first) => {
            let records = read_dataset(path).map_err(|_| first)?;
            Ok(records
                .iter()
                .flat_map(|r| {
                    r.annotations.iter().map(move |a| PredictionRecord {
                        image_id: r.image_id,
                        score: 1.0,
                        points: a.polygon.vertices().to_vec(),
                        vertex_scores: None,
                    })
                })
                .collect())
        }
    }
}

struct Evaluated {
    records: Vec<DatasetRecord>,
    preds: Vec<(PredictionRecord, Option<Polygon>)>,
    report: contourmap::evaluation::EvalReport,
}

fn run_evaluation(predictions: &Path, dataset: &Path, cfg: &RunConfig) -> Result<Evaluated> {
    let records = read_dataset(dataset)?;
    let preds = load_predictions(predictions)?;
    let mut frames = BTreeMap::new();
    let mut gts = Vec::new();
    for r in &records {
        frames.insert(r.image_id, (r.width, r.height));
        gts.extend(r.annotations.iter().map(|a| GroundTruth {
            image_id: r.image_id,
            polygon: a.polygon.clone(),
        }));
    }
    let mut inst = Vec::with_capacity(preds.len());
    let mut kept = Vec::with_capacity(preds.len());
    for p in preds {
        // Contours that collapse to fewer than three distinct vertices cover no pixels.
        let poly = Polygon::new(p.points.clone()).ok();
        if let Some(poly) = &poly {
            inst.push(InstancePrediction {
                image_id: p.image_id,
                polygon: poly.clone(),
                score: p.score,
            });
        }
        kept.push((p, poly));
    }
    let report = evaluate(&inst, &gts, &frames, cfg.eval_options())?;
    Ok(Evaluated {
        records,
        preds: kept,
        report,
    })
}

fn report(predictions: &Path, dataset: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let ev = run_evaluation(predictions, dataset, cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("report.txt"), ev.report.to_text())?;
    let mut json = serde_json::to_string_pretty(&ev.report)?;
    json.push('\n');
    fs::write(out.join("report.json"), json)?;
    for rec in &ev.records {
        let image = read_pgm(&image_path(dataset, rec))?;
        let mut shapes: Vec<OverlayShape> = rec
            .annotations
            .iter()
            .map(|a| OverlayShape {
                points: a.polygon.vertices().to_vec(),
                color: "#32cd32".into(),
            })
            .collect();
        shapes.extend(ev.preds.iter().filter(|(p, _)| p.image_id == rec.image_id).map(|(p, poly)| {
            OverlayShape {
                points: poly.as_ref().map_or_else(|| p.points.clone(), |q| q.vertices().to_vec()),
                color: "#ffd700".into(),
            }
        }));
        fs::write(out.join(format!("overlay_{:05}.svg", rec.image_id)), overlay_svg(&image, &shapes)?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, seed, count, config } => synth(&out, seed, count, &load_config(config.as_deref())?),
        Command::Densify { dataset, out, config } => densify_dataset(&dataset, &out, &load_config(config.as_deref())?),
        Command::Train { dataset, out, config, losses, quiet } => {
            train(&dataset, &out, &load_config(config.as_deref())?, losses.as_deref(), quiet)
        }
        Command::Infer { checkpoint, dataset, out } => infer(&checkpoint, &dataset, &out),
        Command::Reduce { predictions, out, config } => {
            reduce_predictions(&predictions, &out, &load_config(config.as_deref())?)
        }
        Command::Evaluate { predictions, dataset, out, text, ap, config } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(ap) = ap {
                cfg.ap_mode = ap;
            }
            let ev = run_evaluation(&predictions, &dataset, &cfg)?;
            let mut json = serde_json::to_string_pretty(&ev.report)?;
            json.push('\n');
            fs::write(&out, json).with_context(|| format!("writing {}", out.display()))?;
            match text {
                Some(p) => fs::write(&p, ev.report.to_text()).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{}", ev.report.to_text()),
            }
            Ok(())
        }
        Command::Report { predictions, dataset, out, config } => {
            report(&predictions, &dataset, &out, &load_config(config.as_deref())?)
        }
        Command::Config => {
            print!("{}", RunConfig::default().to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
