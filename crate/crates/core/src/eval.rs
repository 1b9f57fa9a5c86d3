//! Detection metrics: rotated-box IoU in bird's-eye view and 3D, average
//! precision at 11 or 40 recall points with KITTI-style difficulty levels,
//! motion-aware split evaluation, and per-object depth error statistics.

use crate::geom::wrap_angle;
use crate::kitti::LabelRecord;
use crate::motion::MotionClass;
use serde::Serialize;

/// Axis conventions: at yaw 0 the box width spans x and length spans z;
/// yaw rotates about the vertical axis in the KITTI sense.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevBox {
    pub cx: f64,
    pub cz: f64,
    pub width: f64,
    pub length: f64,
    pub yaw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3d {
    pub center: [f64; 3],
    /// (height, width, length).
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Box3d {
    pub fn bev(&self) -> BevBox {
        BevBox {
            cx: self.center[0],
            cz: self.center[2],
            width: self.size[1],
            length: self.size[2],
            yaw: self.yaw,
        }
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// Vertical (y) extent; the center is the box center, y points down.
    fn y_range(&self) -> (f64, f64) {
        (self.center[1] - self.size[0] / 2.0, self.center[1] + self.size[0] / 2.0)
    }

    /// From a label record (bottom-face-center location convention).
    pub fn from_label(label: &LabelRecord) -> Self {
        Self {
            center: [
                label.location[0],
                label.location[1] - label.height / 2.0,
                label.location[2],
            ],
            size: [label.height, label.width, label.length],
            yaw: label.rotation_y,
        }
    }
}

impl BevBox {
    fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hx = self.width / 2.0;
        let hz = self.length / 2.0;
        // Rotation about the vertical axis maps (x, z) -> (c x + s z, -s x + c z).
        let rot = |x: f64, z: f64| [self.cx + c * x + s * z, self.cz - s * x + c * z];
        [rot(-hx, -hz), rot(hx, -hz), rot(hx, hz), rot(-hx, hz)]
    }

    fn area(&self) -> f64 {
        self.width * self.length
    }
}

const AREA_EPS: f64 = 1e-12;

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clip of `subject` against convex `clip` (either
/// winding).
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    // Orient the clip polygon counter-clockwise so "inside" is consistent.
    let mut signed = 0.0;
    for i in 0..clip.len() {
        let j = (i + 1) % clip.len();
        signed += clip[i][0] * clip[j][1] - clip[j][0] * clip[i][1];
    }
    let ccw = signed >= 0.0;
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let inside = |p: &[f64; 2]| {
            let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            if ccw {
                cross >= -AREA_EPS
            } else {
                cross <= AREA_EPS
            }
        };
        let input = std::mem::take(&mut output);
        for k in 0..input.len() {
            let cur = input[k];
            let prev = input[(k + input.len() - 1) % input.len()];
            let cur_in = inside(&cur);
            let prev_in = inside(&prev);
            if cur_in != prev_in {
                // Edge crossing: intersect (prev, cur) with line (a, b).
                let d1 = (b[0] - a[0]) * (prev[1] - a[1]) - (b[1] - a[1]) * (prev[0] - a[0]);
                let d2 = (b[0] - a[0]) * (cur[1] - a[1]) - (b[1] - a[1]) * (cur[0] - a[0]);
                let t = d1 / (d1 - d2);
                output.push([
                    prev[0] + t * (cur[0] - prev[0]),
                    prev[1] + t * (cur[1] - prev[1]),
                ]);
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

/// Intersection area of two rotated rectangles on the ground plane.
pub fn bev_intersection_area(a: &BevBox, b: &BevBox) -> f64 {
    let clipped = clip_convex(&a.corners(), &b.corners());
    polygon_area(&clipped)
}

/// Rotated-rectangle IoU of the boxes' ground-plane footprints.
pub fn iou_bev(a: &BevBox, b: &BevBox) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a <= AREA_EPS || area_b <= AREA_EPS {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = area_a + area_b - inter;
    if union <= AREA_EPS {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// 3D IoU for yaw-only boxes: BEV intersection times vertical overlap.
pub fn iou_3d(a: &Box3d, b: &Box3d) -> f64 {
    let vol_a = a.volume();
    let vol_b = b.volume();
    if vol_a <= AREA_EPS || vol_b <= AREA_EPS {
        return 0.0;
    }
    let inter_bev = bev_intersection_area(&a.bev(), &b.bev());
    let (a0, a1) = a.y_range();
    let (b0, b1) = b.y_range();
    let overlap_y = (a1.min(b1) - a0.max(b0)).max(0.0);
    let inter = inter_bev * overlap_y;
    let union = vol_a + vol_b - inter;
    if union <= AREA_EPS {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

// ---------------------------------------------------------------------------
// Difficulty
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

pub const DIFFICULTIES: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

/// Cut values per difficulty level; defaults are the public benchmark's
/// standard constants. A box at exactly a cut goes to the easier class.
#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DifficultyRules {
    pub min_height_px: [f64; 3],
    pub max_occlusion: [i8; 3],
    pub max_truncation: [f64; 3],
}

impl Default for DifficultyRules {
    fn default() -> Self {
        Self {
            min_height_px: [40.0, 25.0, 25.0],
            max_occlusion: [0, 1, 2],
            max_truncation: [0.15, 0.30, 0.50],
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub recall_points: RecallPoints,
    pub difficulty: DifficultyRules,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            recall_points: RecallPoints::R40,
            difficulty: DifficultyRules::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub enum RecallPoints {
    R11,
    R40,
}

impl RecallPoints {
    /// R11 samples recall {0, 0.1, ..., 1.0}; R40 samples {1/40, ..., 40/40}.
    pub fn values(&self) -> Vec<f64> {
        match self {
            RecallPoints::R11 => (0..=10).map(|i| i as f64 / 10.0).collect(),
            RecallPoints::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

/// Easiest difficulty bucket whose three cuts the box satisfies.
pub fn assign_difficulty(gt: &LabelRecord, rules: &DifficultyRules) -> Difficulty {
    let height_px = gt.bbox[3] - gt.bbox[1];
    for (level, difficulty) in DIFFICULTIES.iter().enumerate() {
        if height_px >= rules.min_height_px[level]
            && gt.occluded <= rules.max_occlusion[level]
            && gt.truncated <= rules.max_truncation[level]
        {
            return *difficulty;
        }
    }
    Difficulty::Ignored
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

/// Detection prepared for evaluation.
#[derive(Debug, Clone)]
pub struct EvalDetection {
    pub frame: usize,
    pub box3d: Box3d,
    pub score: f64,
}

/// Ground truth prepared for evaluation.
#[derive(Debug, Clone)]
pub struct EvalGroundTruth {
    pub frame: usize,
    pub box3d: Box3d,
    pub difficulty: Difficulty,
    pub motion: Option<MotionClass>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrCurve {
    /// Ranked (recall, precision) samples, one per detection processed.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Overlap {
    Bev,
    ThreeD,
}

fn overlap_of(kind: Overlap, det: &Box3d, gt: &Box3d) -> f64 {
    match kind {
        Overlap::Bev => iou_bev(&det.bev(), &gt.bev()),
        Overlap::ThreeD => iou_3d(det, gt),
    }
}

/// Outcome of score-descending greedy matching for one difficulty level.
struct MatchOutcome {
    /// Per detection, in score order: Some(gt index) for a counted match,
    /// None for a false positive; detections matched to out-of-level ground
    /// truth are skipped entirely.
    ranked: Vec<Option<usize>>,
    num_targets: usize,
}

/// Greedy matching at the IoU threshold, each ground truth matched once.
/// Ground truth harder than `level` (or ignored) is "ignore": detections
/// matching it count neither as true nor as false positives. Score ties
/// break by input order.
fn match_detections(
    detections: &[EvalDetection],
    ground_truth: &[EvalGroundTruth],
    level: Difficulty,
    kind: Overlap,
    iou_threshold: f64,
) -> MatchOutcome {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut gt_used = vec![false; ground_truth.len()];
    let num_targets = ground_truth
        .iter()
        .filter(|g| g.difficulty <= level)
        .count();
    let mut ranked = Vec::with_capacity(detections.len());
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in ground_truth.iter().enumerate() {
            if gt.frame != det.frame || gt_used[gi] {
                continue;
            }
            let iou = overlap_of(kind, &det.box3d, &gt.box3d);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_used[gi] = true;
                if ground_truth[gi].difficulty <= level {
                    ranked.push(Some(gi));
                } else {
                    // Matched an out-of-level box: neither TP nor FP.
                }
            }
            None => ranked.push(None),
        }
    }
    MatchOutcome {
        ranked,
        num_targets,
    }
}

fn pr_curve_from_ranked(ranked: &[Option<usize>], num_targets: usize, recall: RecallPoints) -> PrCurve {
    let mut points = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    for entry in ranked {
        if entry.is_some() {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push((
            tp as f64 / num_targets as f64,
            tp as f64 / (tp + fp) as f64,
        ));
    }
    // Interpolated precision: max precision at recall >= r.
    let ap = {
        let samples = recall.values();
        let mut total = 0.0;
        for r in &samples {
            let best = points
                .iter()
                .filter(|(rec, _)| rec + 1e-12 >= *r)
                .map(|(_, prec)| *prec)
                .fold(0.0f64, f64::max);
            total += best;
        }
        total / recall.values().len() as f64
    };
    PrCurve { points, ap }
}

/// AP for one difficulty level and overlap kind; `None` when the level has
/// no ground truth (AP undefined, not zero).
pub fn average_precision_level(
    detections: &[EvalDetection],
    ground_truth: &[EvalGroundTruth],
    level: Difficulty,
    kind: Overlap,
    cfg: &EvalConfig,
) -> Option<PrCurve> {
    let outcome = match_detections(detections, ground_truth, level, kind, cfg.iou_threshold);
    if outcome.num_targets == 0 {
        return None;
    }
    Some(pr_curve_from_ranked(
        &outcome.ranked,
        outcome.num_targets,
        cfg.recall_points,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct ApTable {
    /// Per difficulty (easy, moderate, hard); `None` where no ground truth.
    pub bev: [Option<f64>; 3],
    pub threed: [Option<f64>; 3],
}

/// AP BEV / AP 3D across the three difficulty levels.
pub fn average_precision(
    detections: &[EvalDetection],
    ground_truth: &[EvalGroundTruth],
    cfg: &EvalConfig,
) -> ApTable {
    let mut bev = [None; 3];
    let mut threed = [None; 3];
    for (i, level) in DIFFICULTIES.iter().enumerate() {
        bev[i] = average_precision_level(detections, ground_truth, *level, Overlap::Bev, cfg)
            .map(|c| c.ap);
        threed[i] =
            average_precision_level(detections, ground_truth, *level, Overlap::ThreeD, cfg)
                .map(|c| c.ap);
    }
    ApTable { bev, threed }
}

// ---------------------------------------------------------------------------
// Motion-aware splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct MotionSplitReport {
    pub static_split: ApTable,
    pub moving_split: ApTable,
    pub overall: ApTable,
}

/// Split evaluation: matched detections inherit the ground truth's motion
/// class; every unmatched detection counts as a false positive in both
/// splits (worst case).
pub fn motion_split_eval(
    detections: &[EvalDetection],
    ground_truth: &[EvalGroundTruth],
    cfg: &EvalConfig,
) -> MotionSplitReport {
    let overall = average_precision(detections, ground_truth, cfg);
    let split = |class: MotionClass| -> ApTable {
        let mut bev = [None; 3];
        let mut threed = [None; 3];
        for (li, level) in DIFFICULTIES.iter().enumerate() {
            for kind in [Overlap::Bev, Overlap::ThreeD] {
                let outcome =
                    match_detections(detections, ground_truth, *level, kind, cfg.iou_threshold);
                // Keep matches to this split's ground truth, keep every FP,
                // drop matches that belong to the other split.
                let ranked: Vec<Option<usize>> = outcome
                    .ranked
                    .iter()
                    .filter(|entry| match entry {
                        Some(gi) => ground_truth[*gi].motion == Some(class),
                        None => true,
                    })
                    .copied()
                    .collect();
                let num_targets = ground_truth
                    .iter()
                    .filter(|g| g.difficulty <= *level && g.motion == Some(class))
                    .count();
                let ap = if num_targets == 0 {
                    None
                } else {
                    Some(pr_curve_from_ranked(&ranked, num_targets, cfg.recall_points).ap)
                };
                match kind {
                    Overlap::Bev => bev[li] = ap,
                    Overlap::ThreeD => threed[li] = ap,
                }
            }
        }
        ApTable { bev, threed }
    };
    MotionSplitReport {
        static_split: split(MotionClass::Static),
        moving_split: split(MotionClass::Moving),
        overall,
    }
}

// ---------------------------------------------------------------------------
// Depth error statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DepthErrorStats {
    pub mean_abs_error: f64,
    pub abs_rel: f64,
    pub count: usize,
    /// Pairs dropped because the ground-truth depth was not positive.
    pub excluded: usize,
    /// Same statistics over the subset with error below 6 m.
    pub filtered_mean_abs_error: f64,
    pub filtered_abs_rel: f64,
    pub filtered_count: usize,
}

/// Mean absolute depth error and Abs.Rel over matched (estimate, truth)
/// pairs, plus the filtered-subset variant (error < 6 m).
pub fn depth_error_stats(pairs: &[(f64, f64)]) -> DepthErrorStats {
    const FILTER_LIMIT_M: f64 = 6.0;
    let mut mae = 0.0;
    let mut rel = 0.0;
    let mut count = 0usize;
    let mut excluded = 0usize;
    let mut f_mae = 0.0;
    let mut f_rel = 0.0;
    let mut f_count = 0usize;
    for &(d, d_gt) in pairs {
        if d_gt <= 0.0 {
            excluded += 1;
            continue;
        }
        let err = (d - d_gt).abs();
        mae += err;
        rel += err / d_gt;
        count += 1;
        if err < FILTER_LIMIT_M {
            f_mae += err;
            f_rel += err / d_gt;
            f_count += 1;
        }
    }
    let norm = |acc: f64, n: usize| if n == 0 { 0.0 } else { acc / n as f64 };
    DepthErrorStats {
        mean_abs_error: norm(mae, count),
        abs_rel: norm(rel, count),
        count,
        excluded,
        filtered_mean_abs_error: norm(f_mae, f_count),
        filtered_abs_rel: norm(f_rel, f_count),
        filtered_count: f_count,
    }
}

/// Helper shared by callers that evaluate label files directly.
pub fn boxes_from_labels(
    frame: usize,
    labels: &[LabelRecord],
    rules: &DifficultyRules,
) -> (Vec<EvalDetection>, Vec<EvalGroundTruth>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for label in labels {
        if label.is_dont_care() {
            continue;
        }
        let box3d = Box3d::from_label(label);
        match label.score {
            Some(score) => dets.push(EvalDetection {
                frame,
                box3d,
                score,
            }),
            None => gts.push(EvalGroundTruth {
                frame,
                box3d,
                difficulty: assign_difficulty(label, rules),
                motion: None,
            }),
        }
    }
    (dets, gts)
}

/// Sanity helper used by tests: IoU is invariant to flipping a rectangle's
/// yaw by pi.
pub fn yaw_pi_symmetric(b: &BevBox) -> BevBox {
    BevBox {
        yaw: wrap_angle(b.yaw + std::f64::consts::PI),
        ..*b
    }
}
