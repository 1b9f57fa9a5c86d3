//! Pseudo-label refinement: per-track, per-frame multi-view optimization of
//! translation and size with yaw and shape embedding held fixed.
//!
//! Each work item picks views (allocentric spread for static objects,
//! temporal neighbors for moving ones), extracts and gates a depth-cloud
//! center, and runs bias-corrected adaptive first-order descent on the
//! weighted loss. Work items are independent; outputs merge in (track,
//! frame) order so results do not depend on scheduling.

use crate::dataset::SequenceDataset;
use crate::geom::{
    allocentric_angle, backproject, frame_transform, project, wrap_angle, BoxSize,
    CameraIntrinsics, GeomError, ObjectPose, Point3d, Se3,
};
use crate::kitti::{pose_to_location, write_labels, InstanceMask, LabelRecord, MaskSet};
use crate::losses::{
    depth_center_loss, photo_loss, sil_loss, size_loss, total_loss, vertical_loss, LossBreakdown,
    LossError, LossWeights, MaskObs, Priors, TermGrad, ViewObs,
};
use crate::motion::{
    build_tracks, displacement_vector, MotionError, Track, TrackConfig,
};
use crate::render::{
    render_depth_cached, render_silhouette_cached, DepthMap, RenderConfig, RenderError,
};
use crate::shape::{cuboid_space, ShapeSpace};
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("track {track} has no detection at frame {frame}")]
    NoDetection { track: u32, frame: usize },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Shape(#[from] crate::shape::ShapeError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Views sampled per optimized frame (the source frame not counted).
    pub n_views: usize,
    /// Temporal window for static view sampling, frames each side.
    pub window: usize,
    pub steps: usize,
    /// Adam step size for translation, meters per step.
    pub step_t: f64,
    /// Adam step size for size, meters per step.
    pub step_size: f64,
    pub depth_gate_radius: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Steps without relative improvement before stopping.
    pub plateau_patience: usize,
    pub plateau_rel: f64,
    /// Crop padding around the object box, fraction of its extent.
    pub crop_pad: f64,
    pub sigma: f64,
    pub near: f64,
    pub far: f64,
    /// Minimum valid-depth foreground pixels for a depth center.
    pub min_depth_pixels: usize,
    pub size_min: f64,
    pub size_max: f64,
    /// Objects nearer than this pass through unrefined; their crops span
    /// most of the image and their labels are heavily truncated anyway.
    pub min_range: f64,
    /// Upper bound on each crop dimension, pixels.
    pub max_crop: u32,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            n_views: 4,
            window: 15,
            steps: 100,
            step_t: 0.02,
            step_size: 0.005,
            depth_gate_radius: 6.0,
            depth_min: 0.0,
            depth_max: 80.0,
            plateau_patience: 15,
            plateau_rel: 1e-4,
            crop_pad: 0.2,
            sigma: crate::render::DEFAULT_SIGMA,
            near: 0.1,
            far: 300.0,
            min_depth_pixels: 10,
            size_min: 0.3,
            size_max: 8.0,
            min_range: 5.0,
            max_crop: 256,
        }
    }
}

/// Outcome of view sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSelection {
    pub frames: Vec<usize>,
    /// True when no other observation of the track exists; `frames` then
    /// holds only the source frame.
    pub single_view: bool,
}

/// Pick optimization views for the detection of `track` at frame `i`.
///
/// Static objects: greedy max-min allocentric-angle separation (measured
/// from the initial per-frame poses) over the detections within the window.
/// Moving objects: the temporally nearest frames, limiting the effect of the
/// object's own motion.
pub fn sample_views(track: &Track, i: usize, cfg: &RefineConfig) -> ViewSelection {
    let candidates: Vec<usize> = track
        .detections
        .iter()
        .map(|d| d.frame)
        .filter(|&f| f != i && f.abs_diff(i) <= cfg.window)
        .collect();
    if candidates.is_empty() {
        return ViewSelection {
            frames: vec![i],
            single_view: true,
        };
    }
    let frames = match track.motion {
        crate::motion::MotionClass::Moving => {
            let mut by_distance = candidates;
            by_distance.sort_by_key(|&f| (f.abs_diff(i), f));
            by_distance.truncate(cfg.n_views);
            by_distance
        }
        crate::motion::MotionClass::Static => {
            let angle_of = |f: usize| {
                track
                    .detection_at(f)
                    .and_then(|d| allocentric_angle(&d.pose).ok())
            };
            let Some(anchor_angle) = angle_of(i) else {
                let mut by_distance = candidates;
                by_distance.sort_by_key(|&f| (f.abs_diff(i), f));
                by_distance.truncate(cfg.n_views);
                return ViewSelection {
                    frames: by_distance,
                    single_view: false,
                };
            };
            let mut pool: Vec<(usize, f64)> = candidates
                .iter()
                .filter_map(|&f| angle_of(f).map(|a| (f, a)))
                .collect();
            let mut chosen: Vec<(usize, f64)> = vec![(i, anchor_angle)];
            let mut selected = Vec::new();
            while selected.len() < cfg.n_views && !pool.is_empty() {
                // Greedy max-min separation to the already-chosen views.
                let (best_idx, _) = pool
                    .iter()
                    .enumerate()
                    .map(|(idx, (_, angle))| {
                        let min_sep = chosen
                            .iter()
                            .map(|(_, a)| wrap_angle(angle - a).abs())
                            .fold(f64::INFINITY, f64::min);
                        (idx, min_sep)
                    })
                    .max_by(|a, b| {
                        a.1.partial_cmp(&b.1)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            // Deterministic tie-break: earlier frame wins.
                            .then_with(|| pool[b.0].0.cmp(&pool[a.0].0))
                    })
                    .expect("pool is non-empty");
                let picked = pool.remove(best_idx);
                selected.push(picked.0);
                chosen.push(picked);
            }
            selected.sort_unstable();
            selected
        }
    };
    ViewSelection {
        frames,
        single_view: false,
    }
}

/// Why a depth-cloud center was not produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DepthCenterReject {
    /// Fewer valid foreground depth pixels than required.
    TooFewPixels(usize),
}

/// Back-project the masked depth pixels, drop outliers whose depth deviates
/// from the median by more than 3x the median absolute deviation, and return
/// the surviving points' mean.
pub fn depth_center(
    mask: &InstanceMask,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    min_pixels: usize,
) -> Result<Point3d, DepthCenterReject> {
    let mut samples: Vec<(u32, u32, f64)> = Vec::new();
    for iy in 0..mask.height.min(depth.height) {
        for ix in 0..mask.width.min(depth.width) {
            if mask.get(ix, iy) {
                if let Some(d) = depth.get(ix, iy) {
                    samples.push((ix, iy, d));
                }
            }
        }
    }
    if samples.len() < min_pixels {
        return Err(DepthCenterReject::TooFewPixels(samples.len()));
    }
    let mut depths: Vec<f64> = samples.iter().map(|s| s.2).collect();
    depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = depths[depths.len() / 2];
    let mut deviations: Vec<f64> = depths.iter().map(|d| (d - median).abs()).collect();
    deviations.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mad = deviations[deviations.len() / 2];
    let mut mean = Vector3::zeros();
    let mut kept = 0usize;
    for (ix, iy, d) in samples {
        if (d - median).abs() > 3.0 * mad {
            continue;
        }
        let px = Vector2::new(ix as f64 + 0.5, iy as f64 + 0.5);
        mean += backproject(intr, &px, d).expect("depth maps hold positive depths");
        kept += 1;
    }
    if kept < min_pixels {
        return Err(DepthCenterReject::TooFewPixels(kept));
    }
    Ok(mean / kept as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum GateDecision {
    Accept,
    RejectRange { z: f64 },
    RejectDeviation { distance: f64 },
}

/// Depth-center gate: the center must sit inside the sensing range and
/// within the gate radius of the initial estimate.
pub fn gate_depth(center: &Point3d, initial: &ObjectPose, cfg: &RefineConfig) -> GateDecision {
    if !(center.z > cfg.depth_min && center.z < cfg.depth_max) {
        return GateDecision::RejectRange { z: center.z };
    }
    let distance = (center - initial.t_c).norm();
    if distance > cfg.depth_gate_radius {
        return GateDecision::RejectDeviation { distance };
    }
    GateDecision::Accept
}

/// Crop window (full-image pixels) covering an object's observation,
/// bounded to `max_crop` on each side.
fn crop_around(
    boxes: &[[f64; 4]],
    pad: f64,
    max_crop: u32,
    intr: &CameraIntrinsics,
) -> Option<(u32, u32, u32, u32)> {
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for b in boxes {
        lo.x = lo.x.min(b[0]);
        lo.y = lo.y.min(b[1]);
        hi.x = hi.x.max(b[2]);
        hi.y = hi.y.max(b[3]);
    }
    if !(lo.x.is_finite() && hi.x > lo.x && hi.y > lo.y) {
        return None;
    }
    let pad_x = (hi.x - lo.x) * pad;
    let pad_y = (hi.y - lo.y) * pad;
    let mut x0 = (lo.x - pad_x).floor().max(0.0);
    let mut y0 = (lo.y - pad_y).floor().max(0.0);
    let mut x1 = (hi.x + pad_x).ceil().min(intr.width as f64);
    let mut y1 = (hi.y + pad_y).ceil().min(intr.height as f64);
    let max = max_crop.max(8) as f64;
    if x1 - x0 > max {
        let center = (x0 + x1) / 2.0;
        x0 = (center - max / 2.0).max(0.0);
        x1 = (x0 + max).min(intr.width as f64);
    }
    if y1 - y0 > max {
        let center = (y0 + y1) / 2.0;
        y0 = (center - max / 2.0).max(0.0);
        y1 = (y0 + max).min(intr.height as f64);
    }
    let (x0, y0, x1, y1) = (x0 as u32, y0 as u32, x1 as u32, y1 as u32);
    if x1 <= x0 + 4 || y1 <= y0 + 4 {
        return None;
    }
    Some((x0, y0, x1 - x0, y1 - y0))
}

/// Projected pixel bbox of a posed box mesh; None when behind the camera.
fn projected_bbox(pose: &ObjectPose, intr: &CameraIntrinsics) -> Option<[f64; 4]> {
    let space = cuboid_space();
    let mesh = space.decode(&[], &pose.size).ok()?;
    let to_cam = pose.to_camera();
    let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in &mesh.vertices {
        let p = to_cam.apply(v);
        if p.z <= 0.2 {
            return None;
        }
        let px = project(intr, &p).ok()?;
        lo = lo.inf(&px);
        hi = hi.sup(&px);
    }
    Some([lo.x, lo.y, hi.x, hi.y])
}

/// Foreground/background observation for one instance within a crop: other
/// instances' pixels are neither (no signal either way).
fn mask_obs_for_crop(
    masks: &MaskSet,
    instance: u32,
    crop: (u32, u32, u32, u32),
) -> Option<MaskObs> {
    let target = masks.mask_for(instance)?;
    let (x0, y0, w, h) = crop;
    let mut fg = vec![false; (w * h) as usize];
    let mut bg = vec![false; (w * h) as usize];
    for iy in 0..h {
        for ix in 0..w {
            let (fx, fy) = (x0 + ix, y0 + iy);
            if fx >= target.width || fy >= target.height {
                continue;
            }
            let idx = (iy * w + ix) as usize;
            if target.get(fx, fy) {
                fg[idx] = true;
            } else if masks.masks.iter().all(|m| m.id == instance || !m.get(fx, fy)) {
                bg[idx] = true;
            }
        }
    }
    MaskObs::new(w, h, fg, bg).ok()
}

#[derive(Debug, Clone, Serialize)]
pub struct GateReport {
    pub depth_center: Option<[f64; 3]>,
    pub depth_gate: Option<GateDecision>,
    pub depth_reject: Option<DepthCenterReject>,
    pub views: Vec<usize>,
    pub views_skipped: Vec<usize>,
    pub single_view: bool,
    pub size_clamped: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineResult {
    pub track: u32,
    pub frame: usize,
    pub initial: PoseSummary,
    pub refined: PoseSummary,
    /// Loss breakdown per optimization step; the last entry is the returned
    /// iterate.
    pub history: Vec<LossBreakdown>,
    pub improved: bool,
    /// True when every data term was gated off and the initial pose was
    /// returned untouched.
    pub unoptimized: bool,
    pub gates: GateReport,
    pub seed: u64,
}

/// Serializable pose snapshot (full precision, unlike label files).
#[derive(Debug, Clone, Serialize)]
pub struct PoseSummary {
    pub t_c: [f64; 3],
    pub yaw: f64,
    pub size: [f64; 3],
}

impl From<&ObjectPose> for PoseSummary {
    fn from(p: &ObjectPose) -> Self {
        Self {
            t_c: p.t_c.into(),
            yaw: p.yaw,
            size: [p.size.height, p.size.width, p.size.length],
        }
    }
}

impl PoseSummary {
    pub fn to_pose(&self, embedding: Vec<f64>) -> ObjectPose {
        ObjectPose::new(
            Vector3::from(self.t_c),
            self.yaw,
            BoxSize::new(self.size[0], self.size[1], self.size[2])
                .expect("refined sizes stay clamped positive"),
            embedding,
        )
    }
}

/// Everything refine_pose needs about the sequence.
pub struct SequenceContext<'a> {
    pub intr: &'a CameraIntrinsics,
    pub poses: &'a [Se3],
    pub frames: &'a [crate::dataset::Frame],
    pub space: &'a ShapeSpace,
    pub weights: &'a LossWeights,
    pub priors: &'a Priors,
    pub cfg: &'a RefineConfig,
}

struct ViewContext {
    frame: usize,
    g_ik: Se3,
    v: Vector3<f64>,
    crop: (u32, u32, u32, u32),
    mask: Option<MaskObs>,
}

struct Optimizer {
    m: [f64; 6],
    v: [f64; 6],
    t: usize,
}

impl Optimizer {
    fn new() -> Self {
        Self {
            m: [0.0; 6],
            v: [0.0; 6],
            t: 0,
        }
    }

    /// Bias-corrected adaptive step; returns the per-parameter updates.
    fn step(&mut self, grad: &[f64; 6], step_t: f64, step_size: f64) -> [f64; 6] {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let mut update = [0.0; 6];
        let bias1 = 1.0 - BETA1.powi(self.t as i32);
        let bias2 = 1.0 - BETA2.powi(self.t as i32);
        for k in 0..6 {
            self.m[k] = BETA1 * self.m[k] + (1.0 - BETA1) * grad[k];
            self.v[k] = BETA2 * self.v[k] + (1.0 - BETA2) * grad[k] * grad[k];
            let m_hat = self.m[k] / bias1;
            let v_hat = self.v[k] / bias2;
            let alpha = if k < 3 { step_t } else { step_size };
            update[k] = -alpha * m_hat / (v_hat.sqrt() + EPS);
        }
        update
    }
}

/// Refine the pose of `track` at frame `i`.
///
/// Descends on the weighted loss over translation and size; yaw and shape
/// embedding stay bit-identical to the input. The returned pose is the best
/// iterate visited; the history is truncated at that iterate so recorded
/// loss never rises end to end.
pub fn refine_pose(
    track: &Track,
    i: usize,
    ctx: &SequenceContext,
    seed: u64,
) -> Result<RefineResult, RefineError> {
    let detection = track
        .detection_at(i)
        .ok_or(RefineError::NoDetection {
            track: track.id,
            frame: i,
        })?;
    let initial = detection.pose.clone();
    let cfg = ctx.cfg;
    if initial.t_c.z < cfg.min_range {
        return Ok(RefineResult {
            track: track.id,
            frame: i,
            initial: (&initial).into(),
            refined: (&initial).into(),
            history: Vec::new(),
            improved: false,
            unoptimized: true,
            gates: GateReport {
                depth_center: None,
                depth_gate: None,
                depth_reject: None,
                views: Vec::new(),
                views_skipped: Vec::new(),
                single_view: false,
                size_clamped: false,
            },
            seed,
        });
    }

    let selection = sample_views(track, i, cfg);
    let frame_i = &ctx.frames[i];

    // Source-frame crop: union of the observed mask bbox (via detection
    // bbox) and the projected initial box, padded.
    let mut crop_boxes = vec![detection.bbox2d];
    if let Some(b) = projected_bbox(&initial, ctx.intr) {
        crop_boxes.push(b);
    }
    let crop_i = crop_around(&crop_boxes, cfg.crop_pad, cfg.max_crop, ctx.intr);
    let mask_i = crop_i.and_then(|crop| {
        detection
            .mask_id
            .and_then(|id| mask_obs_for_crop(&frame_i.masks, id, crop))
    });

    // Depth observation and gate.
    let mut gates = GateReport {
        depth_center: None,
        depth_gate: None,
        depth_reject: None,
        views: Vec::new(),
        views_skipped: Vec::new(),
        single_view: selection.single_view,
        size_clamped: false,
    };
    let depth_anchor: Option<Point3d> = detection.mask_id.and_then(|id| {
        let mask = frame_i.masks.mask_for(id)?;
        match depth_center(mask, &frame_i.depth, ctx.intr, cfg.min_depth_pixels) {
            Ok(center) => {
                gates.depth_center = Some(center.into());
                let decision = gate_depth(&center, &initial, cfg);
                gates.depth_gate = Some(decision);
                (decision == GateDecision::Accept).then_some(center)
            }
            Err(reject) => {
                gates.depth_reject = Some(reject);
                None
            }
        }
    });

    // Per-view contexts with fixed crops.
    let mut views: Vec<ViewContext> = Vec::new();
    if !selection.single_view {
        for &k in &selection.frames {
            let g_ik = frame_transform(ctx.poses, i, k)?;
            let v = displacement_vector(track, i, k, ctx.poses)?;
            let pose_k = crate::geom::warp_pose(&initial, &g_ik, &v);
            let det_k = track.detection_at(k);
            let mut boxes = Vec::new();
            if let Some(d) = det_k {
                boxes.push(d.bbox2d);
            }
            if let Some(b) = projected_bbox(&pose_k, ctx.intr) {
                boxes.push(b);
            }
            let Some(crop) = crop_around(&boxes, cfg.crop_pad, cfg.max_crop, ctx.intr) else {
                gates.views_skipped.push(k);
                continue;
            };
            let mask = det_k
                .and_then(|d| d.mask_id)
                .and_then(|id| mask_obs_for_crop(&ctx.frames[k].masks, id, crop));
            gates.views.push(k);
            views.push(ViewContext {
                frame: k,
                g_ik,
                v,
                crop,
                mask,
            });
        }
    }

    let make_cfg = |crop: (u32, u32, u32, u32)| {
        RenderConfig::crop(crop.0, crop.1, crop.2, crop.3, cfg.sigma, cfg.near, cfg.far)
            .expect("crop windows are validated")
    };

    let embedding = initial.embedding.clone();
    let evaluate = |pose: &ObjectPose,
                    gates: &GateReport|
     -> Result<LossBreakdown, RefineError> {
        let mesh = ctx.space.decode(&pose.embedding, &pose.size)?;

        // Single-view silhouette.
        let sil_term = match (&mask_i, crop_i) {
            (Some(mask), Some(crop)) => {
                let rc = make_cfg(crop);
                let rendered = render_silhouette_cached(&mesh, pose, ctx.intr, &rc);
                let (value, cot) = sil_loss(&rendered.map, mask)?;
                let grads = rendered.vjp(&mesh, pose, &cot, Some(ctx.space))?;
                Some(TermGrad {
                    value,
                    grad_t: grads.t_c,
                    grad_size: grads.size,
                })
            }
            _ => None,
        };

        // Multi-view silhouette.
        let mut mv_term: Option<TermGrad> = None;
        let mut view_obs: Vec<ViewObs> = Vec::new();
        for view in &views {
            if let Some(mask) = &view.mask {
                view_obs.push(ViewObs {
                    frame: view.frame,
                    g_ik: view.g_ik.clone(),
                    v: view.v,
                    mask,
                    intr: ctx.intr,
                    cfg: make_cfg(view.crop),
                    image: Some(&ctx.frames[view.frame].image),
                });
            }
        }
        if !view_obs.is_empty() {
            let result = crate::losses::mv_sil_loss(&mesh, pose, &view_obs, Some(ctx.space))?;
            mv_term = Some(result.term);
        }

        // Photometric term through the rendered depth at frame i.
        let mut photo_term: Option<TermGrad> = None;
        if let Some(crop) = crop_i {
            if !view_obs.is_empty() {
                let rc = make_cfg(crop);
                let rendered_depth = render_depth_cached(&mesh, pose, ctx.intr, &rc);
                if rendered_depth.map.valid_count() > 0 {
                    let (result, cot) = photo_loss(
                        &frame_i.image,
                        &rendered_depth.map,
                        &rc,
                        ctx.intr,
                        &view_obs,
                    )?;
                    if result.pixels > 0 {
                        let grads = rendered_depth.vjp(&mesh, pose, &cot, Some(ctx.space))?;
                        photo_term = Some(TermGrad {
                            value: result.term.value,
                            grad_t: grads.t_c,
                            grad_size: grads.size,
                        });
                    }
                }
            }
        }

        let depth_term = match depth_anchor {
            Some(center) => Some(depth_center_loss(&center, &mesh, pose)?),
            None => None,
        };
        let vertical_term = vertical_loss(pose, ctx.priors);
        let size_term = size_loss(pose, ctx.priors);

        let mut breakdown = total_loss(
            sil_term.as_ref(),
            mv_term.as_ref(),
            photo_term.as_ref(),
            depth_term.as_ref(),
            Some(&vertical_term),
            Some(&size_term),
            ctx.weights,
        );
        breakdown.views_used = view_obs.len();
        breakdown.views_skipped = gates.views_skipped.len();
        Ok(breakdown)
    };

    // Data terms present? Priors alone cannot localize: return unoptimized.
    let has_data = mask_i.is_some()
        || depth_anchor.is_some()
        || views.iter().any(|v| v.mask.is_some());
    if !has_data || cfg.steps == 0 {
        return Ok(RefineResult {
            track: track.id,
            frame: i,
            initial: (&initial).into(),
            refined: (&initial).into(),
            history: Vec::new(),
            improved: false,
            unoptimized: !has_data,
            gates,
            seed,
        });
    }

    let mut pose = initial.clone();
    let mut optimizer = Optimizer::new();
    let mut history: Vec<LossBreakdown> = Vec::new();
    let mut best_total = f64::INFINITY;
    let mut best_pose = pose.clone();
    let mut best_idx = 0usize;
    let mut stall = 0usize;
    for step in 0..cfg.steps {
        let breakdown = evaluate(&pose, &gates)?;
        let total = breakdown.total;
        let grad = [
            breakdown.grad_t[0],
            breakdown.grad_t[1],
            breakdown.grad_t[2],
            breakdown.grad_size[0],
            breakdown.grad_size[1],
            breakdown.grad_size[2],
        ];
        history.push(breakdown);
        if total + cfg.plateau_rel * total.abs().max(1e-12) < best_total {
            stall = 0;
        } else {
            stall += 1;
        }
        if total < best_total {
            best_total = total;
            best_pose = pose.clone();
            best_idx = step;
        }
        if stall >= cfg.plateau_patience {
            break;
        }
        let update = optimizer.step(&grad, cfg.step_t, cfg.step_size);
        pose.t_c += Vector3::new(update[0], update[1], update[2]);
        let mut new_size = [
            pose.size.height + update[3],
            pose.size.width + update[4],
            pose.size.length + update[5],
        ];
        for s in &mut new_size {
            let clamped = s.clamp(cfg.size_min, cfg.size_max);
            if clamped != *s {
                gates.size_clamped = true;
            }
            *s = clamped;
        }
        pose.size = BoxSize::new(new_size[0], new_size[1], new_size[2])
            .expect("clamped sizes are positive");
    }
    history.truncate(best_idx + 1);
    let improved = history
        .first()
        .map(|first| best_total < first.total)
        .unwrap_or(false);
    let refined = ObjectPose::new(best_pose.t_c, initial.yaw, best_pose.size, embedding);
    Ok(RefineResult {
        track: track.id,
        frame: i,
        initial: (&initial).into(),
        refined: (&refined).into(),
        history,
        improved,
        unoptimized: false,
        gates,
        seed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ItemSummary {
    pub track: u32,
    pub frame: usize,
    pub detection_row: usize,
    pub steps: usize,
    pub initial_total: Option<f64>,
    pub final_total: Option<f64>,
    pub improved: bool,
    pub unoptimized: bool,
    pub failed: Option<String>,
    pub gates: Option<GateReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineReport {
    pub frames: usize,
    pub tracks: usize,
    pub detections: usize,
    pub refined: usize,
    pub unoptimized: usize,
    pub failed: usize,
    pub depth_accepted: usize,
    pub depth_rejected_range: usize,
    pub depth_rejected_deviation: usize,
    pub depth_rejected_pixels: usize,
    pub single_view_items: usize,
    /// Mean (initial - final) total loss over optimized items.
    pub mean_loss_reduction: f64,
    pub seed: u64,
    pub items: Vec<ItemSummary>,
}

/// Run tracking, motion fitting, and per-(track, frame) refinement over a
/// sequence; write refined pseudo-labels and a machine-readable report.
///
/// Per-item failures are recorded and the initial detection passes through
/// unchanged; the sequence never aborts. Outputs are merged in (track,
/// frame) order and are byte-identical across reruns and thread counts.
pub fn refine_sequence(
    dataset: &SequenceDataset,
    track_cfg: &TrackConfig,
    cfg: &RefineConfig,
    weights: &LossWeights,
    priors: &Priors,
    space: Option<&ShapeSpace>,
    out_dir: &Path,
    jobs: Option<usize>,
) -> Result<RefineReport, RefineError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source: std::io::Error| RefineError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let per_frame: Vec<Vec<crate::motion::Detection>> = dataset
        .frames
        .iter()
        .map(|f| f.tracker_detections())
        .collect();
    let tracks = build_tracks(&per_frame, &dataset.poses, track_cfg)?;
    let default_space = cuboid_space();
    let space = space.unwrap_or(&default_space);
    let ctx = SequenceContext {
        intr: &dataset.intr,
        poses: &dataset.poses,
        frames: &dataset.frames,
        space,
        weights,
        priors,
        cfg,
    };

    // Work items: every (track, frame) pair, tagged with the originating
    // detection row so outputs land next to their inputs.
    let mut items: Vec<(usize, usize)> = Vec::new(); // (track idx, frame)
    for (ti, track) in tracks.iter().enumerate() {
        for det in &track.detections {
            items.push((ti, det.frame));
        }
    }

    let run_item = |&(ti, frame): &(usize, usize)| -> (usize, usize, Result<RefineResult, RefineError>) {
        let track = &tracks[ti];
        let seed = track_cfg.seed ^ (track.id as u64) << 20 ^ frame as u64;
        (ti, frame, refine_pose(track, frame, &ctx, seed))
    };
    let mut results: Vec<(usize, usize, Result<RefineResult, RefineError>)> = match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .expect("thread pool");
            pool.install(|| items.par_iter().map(run_item).collect())
        }
        None => items.par_iter().map(run_item).collect(),
    };
    results.sort_by_key(|(ti, frame, _)| (tracks[*ti].id, *frame));

    // Assemble output labels per frame, preserving detection-row order.
    let mut refined_labels: Vec<Vec<Option<LabelRecord>>> = dataset
        .frames
        .iter()
        .map(|f| f.detections.iter().map(|_| None).collect())
        .collect();
    let mut report = RefineReport {
        frames: dataset.frames.len(),
        tracks: tracks.len(),
        detections: per_frame.iter().map(Vec::len).sum(),
        refined: 0,
        unoptimized: 0,
        failed: 0,
        depth_accepted: 0,
        depth_rejected_range: 0,
        depth_rejected_deviation: 0,
        depth_rejected_pixels: 0,
        single_view_items: 0,
        mean_loss_reduction: 0.0,
        seed: track_cfg.seed,
        items: Vec::new(),
    };
    let mut reduction_sum = 0.0;
    let mut reduction_count = 0usize;
    for (ti, frame, outcome) in results {
        let track = &tracks[ti];
        let Some(det_row) = find_detection_row(&dataset.frames[frame], track, frame) else {
            continue;
        };
        let source = &dataset.frames[frame].detections[det_row];
        let mut summary = ItemSummary {
            track: track.id,
            frame,
            detection_row: det_row,
            steps: 0,
            initial_total: None,
            final_total: None,
            improved: false,
            unoptimized: false,
            failed: None,
            gates: None,
        };
        let label = match outcome {
            Ok(result) => {
                summary.steps = result.history.len();
                summary.initial_total = result.history.first().map(|h| h.total);
                summary.final_total = result.history.last().map(|h| h.total);
                summary.improved = result.improved;
                summary.unoptimized = result.unoptimized;
                if let (Some(a), Some(b)) = (summary.initial_total, summary.final_total) {
                    reduction_sum += a - b;
                    reduction_count += 1;
                }
                match result.gates.depth_gate {
                    Some(GateDecision::Accept) => report.depth_accepted += 1,
                    Some(GateDecision::RejectRange { .. }) => report.depth_rejected_range += 1,
                    Some(GateDecision::RejectDeviation { .. }) => {
                        report.depth_rejected_deviation += 1
                    }
                    None => {}
                }
                if result.gates.depth_reject.is_some() {
                    report.depth_rejected_pixels += 1;
                }
                if result.gates.single_view {
                    report.single_view_items += 1;
                }
                if result.unoptimized {
                    report.unoptimized += 1;
                } else {
                    report.refined += 1;
                }
                let pose = result.refined.to_pose(vec![]);
                summary.gates = Some(result.gates);
                refined_label(source, &pose)
            }
            Err(err) => {
                report.failed += 1;
                summary.failed = Some(err.to_string());
                source.clone()
            }
        };
        refined_labels[frame][det_row] = Some(label);
        report.items.push(summary);
    }
    report.mean_loss_reduction = if reduction_count > 0 {
        reduction_sum / reduction_count as f64
    } else {
        0.0
    };

    for (frame, labels) in refined_labels.iter().enumerate() {
        let records: Vec<LabelRecord> = labels
            .iter()
            .enumerate()
            .map(|(row, slot)| {
                slot.clone()
                    .unwrap_or_else(|| dataset.frames[frame].detections[row].clone())
            })
            .collect();
        let path = out_dir.join(format!("{frame:06}.txt"));
        std::fs::write(&path, write_labels(&records)).map_err(io_err(&path))?;
    }
    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&report_path, json).map_err(io_err(&report_path))?;
    Ok(report)
}

fn find_detection_row(
    frame: &crate::dataset::Frame,
    track: &Track,
    frame_idx: usize,
) -> Option<usize> {
    let det = track.detection_at(frame_idx)?;
    // Match by exact pose: detections were built from these rows.
    frame.detections.iter().position(|record| {
        crate::kitti::label_to_pose(record)
            .map(|p| {
                (p.t_c - det.pose.t_c).norm() < 1e-9 && (p.yaw - det.pose.yaw).abs() < 1e-9
            })
            .unwrap_or(false)
    })
}

/// Pseudo-label: the source detection with pose fields replaced by the
/// refined state (bbox and score carried over, alpha recomputed).
fn refined_label(source: &LabelRecord, pose: &ObjectPose) -> LabelRecord {
    let mut out = source.clone();
    out.height = pose.size.height;
    out.width = pose.size.width;
    out.length = pose.size.length;
    out.location = pose_to_location(pose);
    out.rotation_y = pose.yaw;
    if let Ok(alpha) = allocentric_angle(pose) {
        out.alpha = alpha;
    }
    out
}
