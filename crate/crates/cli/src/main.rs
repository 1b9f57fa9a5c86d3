//! Command-line pipeline: synthetic data generation, tracking, pseudo-label
//! refinement, evaluation, dataset statistics, and overlay rendering.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mvrefine::config::PipelineConfig;
use mvrefine::dataset::SequenceDataset;
use mvrefine::eval::{
    average_precision, boxes_from_labels, depth_error_stats, iou_bev, motion_split_eval, ApTable,
    EvalConfig, RecallPoints,
};
use mvrefine::geom::project;
use mvrefine::kitti::{label_to_pose, parse_labels, LabelRecord};
use mvrefine::motion::{build_tracks, MotionClass};
use mvrefine::refine::refine_sequence;
use mvrefine::shape::ShapeSpace;
use mvrefine::synth::{generate, load_scene_spec, perturb_dataset};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "mvrefine",
    version,
    about = "Multi-view pseudo-label refinement for monocular 3D detection"
)]
struct Cli {
    /// Pipeline configuration file (TOML); flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice in the pipeline.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available cores. Output bytes do not
    /// depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Build object tracks with motion classification and write a track index.
    Track {
        /// Sequence dataset directory.
        dataset: PathBuf,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine detections into pseudo-labels.
    Refine {
        dataset: PathBuf,
        /// Output directory for refined label files and report.json.
        #[arg(long)]
        out: PathBuf,
        /// Optional shape-space asset; a unit cuboid is used when absent.
        #[arg(long)]
        shape: Option<PathBuf>,
    },
    /// Evaluate predicted labels against a dataset's ground truth.
    Eval {
        /// Directory of predicted label files ({frame:06}.txt with scores).
        pred: PathBuf,
        /// Dataset directory holding labels/ (and poses for motion splits).
        dataset: PathBuf,
        #[arg(long, value_parser = ["11", "40"])]
        recall_points: Option<String>,
        #[arg(long)]
        iou_threshold: Option<f64>,
        /// Additionally report static/moving split AP tables.
        #[arg(long)]
        motion_split: bool,
        /// Additionally report per-object depth error statistics.
        #[arg(long)]
        depth_stats: bool,
        #[arg(long, value_enum, default_value = "table")]
        format: OutputFormat,
    },
    /// Generate a synthetic dataset (ground truth plus noisy detections).
    Synth {
        /// Scene specification (TOML).
        spec: PathBuf,
        /// Output dataset directory.
        out: PathBuf,
    },
    /// Compute size and ground-plane priors from a label corpus.
    Stats {
        /// Directory of label files.
        labels: PathBuf,
        /// Write the priors as a TOML config fragment here (stdout if absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render projected 3D boxes onto the images.
    Overlay {
        dataset: PathBuf,
        /// Directory of label files to draw.
        labels: PathBuf,
        /// Output directory for PNG overlays.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    // Echo the effective configuration so every run is reproducible.
    eprintln!("# effective configuration\n{}", cfg.to_toml());
    match &cli.command {
        Command::Track { dataset, out } => cmd_track(dataset, out, &cfg),
        Command::Refine { dataset, out, shape } => {
            cmd_refine(dataset, out, shape.as_deref(), &cfg, cli.jobs)
        }
        Command::Eval {
            pred,
            dataset,
            recall_points,
            iou_threshold,
            motion_split,
            depth_stats,
            format,
        } => {
            let mut eval_cfg = cfg.eval;
            if let Some(rp) = recall_points {
                eval_cfg.recall_points = if rp == "11" {
                    RecallPoints::R11
                } else {
                    RecallPoints::R40
                };
            }
            if let Some(iou) = iou_threshold {
                eval_cfg.iou_threshold = *iou;
            }
            cmd_eval(pred, dataset, &eval_cfg, &cfg, *motion_split, *depth_stats, *format)
        }
        Command::Synth { spec, out } => cmd_synth(spec, out, cli.seed),
        Command::Stats { labels, out } => cmd_stats(labels, out.as_deref()),
        Command::Overlay { dataset, labels, out } => cmd_overlay(dataset, labels, out),
    }
}

fn cmd_track(dataset_dir: &Path, out: &Path, cfg: &PipelineConfig) -> Result<()> {
    let dataset = SequenceDataset::load(dataset_dir)?;
    let per_frame: Vec<_> = dataset
        .frames
        .iter()
        .map(|f| f.tracker_detections())
        .collect();
    let tracks = build_tracks(&per_frame, &dataset.poses, &cfg.track)?;
    #[derive(serde::Serialize)]
    struct TrackRow {
        id: u32,
        motion: MotionClass,
        frames: Vec<usize>,
        direction: Option<[f64; 3]>,
        speed: Option<f64>,
        low_confidence: bool,
    }
    #[derive(serde::Serialize)]
    struct TrackIndex {
        seed: u64,
        tracks: Vec<TrackRow>,
    }
    let index = TrackIndex {
        seed: cfg.track.seed,
        tracks: tracks
            .iter()
            .map(|t| TrackRow {
                id: t.id,
                motion: t.motion,
                frames: t.detections.iter().map(|d| d.frame).collect(),
                direction: t.fit.as_ref().map(|f| f.direction.into()),
                speed: t.fit.as_ref().map(|f| f.speed),
                low_confidence: t.low_confidence,
            })
            .collect(),
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).ok();
    }
    std::fs::write(out, serde_json::to_string_pretty(&index)?)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} tracks ({} moving) -> {}",
        index.tracks.len(),
        index
            .tracks
            .iter()
            .filter(|t| t.motion == MotionClass::Moving)
            .count(),
        out.display()
    );
    Ok(())
}

fn cmd_refine(
    dataset_dir: &Path,
    out: &Path,
    shape: Option<&Path>,
    cfg: &PipelineConfig,
    jobs: Option<usize>,
) -> Result<()> {
    let dataset = SequenceDataset::load(dataset_dir)?;
    let space = match shape {
        Some(path) => Some(
            ShapeSpace::load(path)
                .with_context(|| format!("loading shape asset {}", path.display()))?,
        ),
        None => None,
    };
    let report = refine_sequence(
        &dataset,
        &cfg.track,
        &cfg.refine,
        &cfg.weights,
        &cfg.priors,
        space.as_ref(),
        out,
        jobs,
    )?;
    println!(
        "refined {}/{} detections across {} tracks ({} unoptimized, {} failed); \
         depth gate: {} accepted, {} range, {} deviation, {} too-few-pixels; \
         mean loss reduction {:.4} -> {}",
        report.refined,
        report.detections,
        report.tracks,
        report.unoptimized,
        report.failed,
        report.depth_accepted,
        report.depth_rejected_range,
        report.depth_rejected_deviation,
        report.depth_rejected_pixels,
        report.mean_loss_reduction,
        out.display()
    );
    Ok(())
}

fn label_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading label directory {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Ok(frame) = stem.parse::<usize>() {
                out.push((frame, path));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn format_ap_row(label: &str, row: &[Option<f64>; 3]) -> String {
    let cell = |v: &Option<f64>| match v {
        Some(ap) => format!("{:>8.2}", ap * 100.0),
        None => format!("{:>8}", "-"),
    };
    format!("{label:<10}{}{}{}", cell(&row[0]), cell(&row[1]), cell(&row[2]))
}

fn print_ap_table(title: &str, table: &ApTable) {
    println!("{title}");
    println!("{:<10}{:>8}{:>8}{:>8}", "", "easy", "mod", "hard");
    println!("{}", format_ap_row("AP BEV %", &table.bev));
    println!("{}", format_ap_row("AP 3D %", &table.threed));
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    pred_dir: &Path,
    dataset_dir: &Path,
    eval_cfg: &EvalConfig,
    cfg: &PipelineConfig,
    motion_split: bool,
    depth_stats: bool,
    format: OutputFormat,
) -> Result<()> {
    let gt_dir = dataset_dir.join("labels");
    if !gt_dir.is_dir() {
        bail!("{} has no labels/ directory", dataset_dir.display());
    }
    let mut detections = Vec::new();
    let mut ground_truth = Vec::new();
    let mut gt_rows: Vec<(usize, Vec<LabelRecord>)> = Vec::new();
    for (frame, path) in label_files(&gt_dir)? {
        let gt_records = parse_labels(&path)?;
        let (_, gts) = boxes_from_labels(frame, &gt_records, &eval_cfg.difficulty);
        ground_truth.extend(gts);
        gt_rows.push((frame, gt_records));
        let pred_path = pred_dir.join(format!("{frame:06}.txt"));
        if pred_path.exists() {
            let (dets, _) =
                boxes_from_labels(frame, &parse_labels(&pred_path)?, &eval_cfg.difficulty);
            detections.extend(dets);
        }
    }

    // Motion classes for the ground truth: classify tracks built over the
    // ground-truth labels themselves.
    if motion_split {
        let dataset = SequenceDataset::load(dataset_dir)?;
        let mut per_frame: Vec<Vec<mvrefine::motion::Detection>> =
            vec![Vec::new(); dataset.frames.len()];
        for (frame, records) in &gt_rows {
            if *frame < per_frame.len() {
                per_frame[*frame] = records
                    .iter()
                    .filter(|r| !r.is_dont_care())
                    .filter_map(|r| {
                        Some(mvrefine::motion::Detection {
                            frame: *frame,
                            pose: label_to_pose(r).ok()?,
                            bbox2d: r.bbox,
                            score: 1.0,
                            mask_id: None,
                        })
                    })
                    .collect();
            }
        }
        let tracks = build_tracks(&per_frame, &dataset.poses, &cfg.track)?;
        for gt in &mut ground_truth {
            'outer: for track in &tracks {
                for det in &track.detections {
                    if det.frame == gt.frame
                        && (det.pose.t_c - nalgebra::Vector3::from(gt.box3d.center)).norm() < 1e-6
                    {
                        gt.motion = Some(track.motion);
                        break 'outer;
                    }
                }
            }
        }
    }

    let ap = average_precision(&detections, &ground_truth, eval_cfg);
    let split_report = motion_split.then(|| motion_split_eval(&detections, &ground_truth, eval_cfg));

    // Depth statistics over matched (prediction, ground truth) pairs.
    let depth_report = depth_stats.then(|| {
        let mut pairs = Vec::new();
        for det in &detections {
            let mut best: Option<(f64, f64)> = None;
            for gt in &ground_truth {
                if gt.frame != det.frame {
                    continue;
                }
                let iou = iou_bev(&det.box3d.bev(), &gt.box3d.bev());
                if iou >= eval_cfg.iou_threshold && best.map_or(true, |(b, _)| iou > b) {
                    best = Some((iou, gt.box3d.center[2]));
                }
            }
            if let Some((_, gt_z)) = best {
                pairs.push((det.box3d.center[2], gt_z));
            }
        }
        depth_error_stats(&pairs)
    });

    match format {
        OutputFormat::Json => {
            #[derive(serde::Serialize)]
            struct EvalReport<'a> {
                config: &'a EvalConfig,
                overall: &'a ApTable,
                motion_split: &'a Option<mvrefine::eval::MotionSplitReport>,
                depth: &'a Option<mvrefine::eval::DepthErrorStats>,
                detections: usize,
                ground_truth: usize,
            }
            let report = EvalReport {
                config: eval_cfg,
                overall: &ap,
                motion_split: &split_report,
                depth: &depth_report,
                detections: detections.len(),
                ground_truth: ground_truth.len(),
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        OutputFormat::Table => {
            let recall = match eval_cfg.recall_points {
                RecallPoints::R11 => "R11",
                RecallPoints::R40 => "R40",
            };
            print_ap_table(
                &format!(
                    "overall ({recall} @ {:.2} IoU, {} det / {} gt)",
                    eval_cfg.iou_threshold,
                    detections.len(),
                    ground_truth.len()
                ),
                &ap,
            );
            if let Some(split) = &split_report {
                print_ap_table("static", &split.static_split);
                print_ap_table("moving", &split.moving_split);
            }
            if let Some(depth) = &depth_report {
                println!(
                    "depth: MAE {:.3} m, Abs.Rel {:.4} over {} pairs ({} filtered < 6 m: MAE {:.3}, Abs.Rel {:.4})",
                    depth.mean_abs_error,
                    depth.abs_rel,
                    depth.count,
                    depth.filtered_count,
                    depth.filtered_mean_abs_error,
                    depth.filtered_abs_rel,
                );
            }
        }
    }
    Ok(())
}

fn cmd_synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = load_scene_spec(spec_path)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let index = generate(&spec, out)?;
    perturb_dataset(out, &spec.noise, spec.seed)?;
    println!(
        "generated {} frames, {} objects ({} moving) -> {}",
        spec.frames,
        index.objects.len(),
        index
            .objects
            .iter()
            .filter(|o| o.motion == MotionClass::Moving)
            .count(),
        out.display()
    );
    Ok(())
}

fn cmd_stats(labels_dir: &Path, out: Option<&Path>) -> Result<()> {
    let mut sizes = [0.0f64; 3];
    let mut y_sum = 0.0;
    let mut count = 0usize;
    for (_, path) in label_files(labels_dir)? {
        for record in parse_labels(&path)? {
            if record.is_dont_care() || record.class != "Car" {
                continue;
            }
            sizes[0] += record.height;
            sizes[1] += record.width;
            sizes[2] += record.length;
            y_sum += record.location[1];
            count += 1;
        }
    }
    if count == 0 {
        bail!("no Car labels found under {}", labels_dir.display());
    }
    let n = count as f64;
    let priors = mvrefine::losses::Priors {
        size_mean: [sizes[0] / n, sizes[1] / n, sizes[2] / n],
        y_plane: y_sum / n,
    };
    #[derive(serde::Serialize)]
    struct Fragment {
        priors: mvrefine::losses::Priors,
    }
    let text = toml::to_string_pretty(&Fragment { priors })?;
    match out {
        Some(path) => {
            std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
            println!("priors from {count} labels -> {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn draw_line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (mut x0, mut y0) = (a.0.round() as i64, a.1.round() as i64);
    let (x1, y1) = (b.0.round() as i64, b.1.round() as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if (0..w).contains(&x0) && (0..h).contains(&y0) {
            img.put_pixel(x0 as u32, y0 as u32, image::Rgb(color));
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn cmd_overlay(dataset_dir: &Path, labels_dir: &Path, out: &Path) -> Result<()> {
    let dataset = SequenceDataset::load(dataset_dir)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (1, 2),
        (2, 3),
        (3, 0),
        (4, 5),
        (5, 6),
        (6, 7),
        (7, 4),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];
    let mut written = 0usize;
    for frame in &dataset.frames {
        let label_path = labels_dir.join(format!("{:06}.txt", frame.index));
        if !label_path.exists() {
            continue;
        }
        let mut img = image::RgbImage::from_fn(frame.image.width, frame.image.height, |x, y| {
            let v = (frame.image.get(x, y).clamp(0.0, 1.0) * 255.0) as u8;
            image::Rgb([v, v, v])
        });
        for record in parse_labels(&label_path)? {
            if record.is_dont_care() {
                continue;
            }
            let pose = label_to_pose(&record)?;
            let to_cam = pose.to_camera();
            let (h, w2, l) = (
                pose.size.height / 2.0,
                pose.size.width / 2.0,
                pose.size.length / 2.0,
            );
            let corners = [
                nalgebra::Vector3::new(-w2, h, -l),
                nalgebra::Vector3::new(w2, h, -l),
                nalgebra::Vector3::new(w2, h, l),
                nalgebra::Vector3::new(-w2, h, l),
                nalgebra::Vector3::new(-w2, -h, -l),
                nalgebra::Vector3::new(w2, -h, -l),
                nalgebra::Vector3::new(w2, -h, l),
                nalgebra::Vector3::new(-w2, -h, l),
            ];
            let projected: Vec<Option<(f64, f64)>> = corners
                .iter()
                .map(|c| {
                    let p = to_cam.apply(c);
                    project(&dataset.intr, &p).ok().map(|px| (px.x, px.y))
                })
                .collect();
            for (a, b) in EDGES {
                if let (Some(pa), Some(pb)) = (projected[a], projected[b]) {
                    draw_line(&mut img, pa, pb, [0, 220, 40]);
                }
            }
        }
        let out_path = out.join(format!("{:06}.png", frame.index));
        img.save(&out_path)
            .with_context(|| format!("writing {}", out_path.display()))?;
        written += 1;
    }
    println!("wrote {written} overlays to {}", out.display());
    Ok(())
}
