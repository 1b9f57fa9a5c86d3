//! Object tracks from per-frame detections: greedy constant-velocity
//! association, static/moving classification in the world frame, and robust
//! estimation of each moving track's direction and speed by RANSAC line
//! fitting. The fitted displacement direction stays fixed during pose
//! optimization; only its per-frame-pair magnitude enters the warp.

use crate::geom::{frame_transform, GeomError, ObjectPose, Point3d, Se3};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MotionError {
    #[error("need at least two distinct positions to fit a line (got {0})")]
    DegenerateFit(usize),
    #[error("need at least two inlier positions (got {0})")]
    DegenerateSpeed(usize),
    #[error("track is classified moving but has no motion fit")]
    MissingFit,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// One per-frame detection of an object.
#[derive(Debug, Clone)]
pub struct Detection {
    pub frame: usize,
    pub pose: ObjectPose,
    /// Pixel bbox (u_min, v_min, u_max, v_max).
    pub bbox2d: [f64; 4],
    pub score: f64,
    /// Instance id of this detection's mask in the frame's mask set.
    pub mask_id: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionClass {
    Static,
    Moving,
}

/// Robust line fit of a moving track's world trajectory.
#[derive(Debug, Clone)]
pub struct MotionFit {
    /// Unit direction in world coordinates, oriented along increasing frame
    /// order.
    pub direction: Vector3<f64>,
    /// Meters per frame.
    pub speed: f64,
    /// Inlier mask over the track's detections.
    pub inliers: Vec<bool>,
}

/// Ordered detections of one object.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u32,
    pub detections: Vec<Detection>,
    pub motion: MotionClass,
    /// Present iff `motion == Moving`.
    pub fit: Option<MotionFit>,
    /// Set for tracks too short to classify reliably.
    pub low_confidence: bool,
}

impl Track {
    pub fn detection_at(&self, frame: usize) -> Option<&Detection> {
        self.detections.iter().find(|d| d.frame == frame)
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrackConfig {
    /// Association gate on predicted-center distance, meters.
    pub gate_radius: f64,
    /// Frames a track survives without a match.
    pub max_misses: usize,
    /// Static/moving decision threshold, meters per frame along the fitted
    /// line.
    pub motion_threshold: f64,
    pub ransac_iters: usize,
    /// Point-to-line inlier distance, meters.
    pub ransac_inlier_dist: f64,
    pub seed: u64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            gate_radius: 3.0,
            max_misses: 3,
            motion_threshold: 0.1,
            ransac_iters: 100,
            ransac_inlier_dist: 0.5,
            seed: 0,
        }
    }
}

struct OpenTrack {
    id: u32,
    detections: Vec<Detection>,
    world: Vec<Point3d>,
    misses: usize,
}

impl OpenTrack {
    /// Constant-velocity prediction of the world center at `frame`. The
    /// velocity is the least-squares fit over the whole track history;
    /// differencing only the last two observations would double the
    /// positional noise in the prediction.
    fn predict(&self, frame: usize) -> Point3d {
        let n = self.world.len();
        if n < 2 {
            return *self.world.last().unwrap();
        }
        let mean_f = self
            .detections
            .iter()
            .map(|d| d.frame as f64)
            .sum::<f64>()
            / n as f64;
        let mean_p: Vector3<f64> = self.world.iter().sum::<Vector3<f64>>() / n as f64;
        let mut num = Vector3::zeros();
        let mut den = 0.0;
        for (det, p) in self.detections.iter().zip(&self.world) {
            let df = det.frame as f64 - mean_f;
            num += (p - mean_p) * df;
            den += df * df;
        }
        if den < 1e-12 {
            return *self.world.last().unwrap();
        }
        let velocity = num / den;
        mean_p + velocity * (frame as f64 - mean_f)
    }
}

/// Greedy frame-to-frame association on predicted world-center distance.
///
/// Pairs are matched closest-first under the gate radius; unmatched
/// detections start new tracks; tracks end after `max_misses` missed frames.
/// Deterministic given the input order. Classification and motion fitting
/// are left to [`build_tracks`].
pub fn associate(
    frames: &[Vec<Detection>],
    camera_poses: &[Se3],
    cfg: &TrackConfig,
) -> Result<Vec<Track>, MotionError> {
    let mut open: Vec<OpenTrack> = Vec::new();
    let mut done: Vec<OpenTrack> = Vec::new();
    let mut next_id = 0u32;
    for (frame_idx, dets) in frames.iter().enumerate() {
        let world_of = |d: &Detection| -> Result<Point3d, MotionError> {
            let pose = camera_poses
                .get(d.frame)
                .ok_or(GeomError::MissingFrame(d.frame))?;
            Ok(pose.apply(&d.pose.t_c))
        };
        // Candidate (distance, track slot, detection index) pairs under the
        // gate, matched closest-first.
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (ti, track) in open.iter().enumerate() {
            let predicted = track.predict(frame_idx);
            for (di, det) in dets.iter().enumerate() {
                let dist = (world_of(det)? - predicted).norm();
                if dist <= cfg.gate_radius {
                    candidates.push((dist, ti, di));
                }
            }
        }
        candidates.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let mut track_taken = vec![false; open.len()];
        let mut det_taken = vec![false; dets.len()];
        for (_, ti, di) in candidates {
            if track_taken[ti] || det_taken[di] {
                continue;
            }
            track_taken[ti] = true;
            det_taken[di] = true;
            let det = dets[di].clone();
            open[ti].world.push(world_of(&det)?);
            open[ti].detections.push(det);
            open[ti].misses = 0;
        }
        for (ti, taken) in track_taken.iter().enumerate() {
            if !taken {
                open[ti].misses += 1;
            }
        }
        for (di, det) in dets.iter().enumerate() {
            if !det_taken[di] {
                let det = det.clone();
                let w = world_of(&det)?;
                open.push(OpenTrack {
                    id: next_id,
                    detections: vec![det],
                    world: vec![w],
                    misses: 0,
                });
                next_id += 1;
            }
        }
        let (kept, expired): (Vec<_>, Vec<_>) =
            open.drain(..).partition(|t| t.misses <= cfg.max_misses);
        open = kept;
        done.extend(expired);
    }
    done.extend(open.drain(..));
    done.sort_by_key(|t| t.id);
    Ok(done
        .into_iter()
        .map(|t| Track {
            id: t.id,
            detections: t.detections,
            motion: MotionClass::Static,
            fit: None,
            low_confidence: false,
        })
        .collect())
}

/// Map a track's camera-frame centers into world coordinates.
pub fn world_positions(track: &Track, camera_poses: &[Se3]) -> Result<Vec<Point3d>, MotionError> {
    track
        .detections
        .iter()
        .map(|d| {
            let pose = camera_poses
                .get(d.frame)
                .ok_or(GeomError::MissingFrame(d.frame))?;
            Ok(pose.apply(&d.pose.t_c))
        })
        .collect()
}

/// Least-squares principal direction through a point set (largest-eigenvalue
/// direction of the scatter matrix, by power iteration).
fn principal_direction(points: &[Point3d]) -> Option<Vector3<f64>> {
    let n = points.len() as f64;
    let centroid: Vector3<f64> = points.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = nalgebra::Matrix3::<f64>::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    if scatter.norm() < 1e-18 {
        return None;
    }
    let mut v = Vector3::new(1.0, 0.5, 0.25);
    // Seed away from possible orthogonal eigenvectors.
    for _ in 0..64 {
        let next = scatter * v;
        let norm = next.norm();
        if norm < 1e-30 {
            return None;
        }
        v = next / norm;
    }
    Some(v)
}

/// RANSAC line fit through world positions.
///
/// Returns the unit direction (oriented along increasing input order) and
/// the inlier mask of the best model, refit on its inliers by least squares.
pub fn fit_direction_ransac(
    positions: &[Point3d],
    cfg: &TrackConfig,
    seed: u64,
) -> Result<(Vector3<f64>, Vec<bool>), MotionError> {
    let distinct = count_distinct(positions);
    if distinct < 2 {
        return Err(MotionError::DegenerateFit(distinct));
    }
    let n = positions.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best_inliers: Vec<bool> = Vec::new();
    let mut best_count = 0usize;
    for _ in 0..cfg.ransac_iters {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        let dir = positions[j] - positions[i];
        if dir.norm() < 1e-12 {
            continue;
        }
        let dir = dir.normalize();
        let anchor = positions[i];
        let inliers: Vec<bool> = positions
            .iter()
            .map(|p| {
                let d = p - anchor;
                (d - dir * d.dot(&dir)).norm() <= cfg.ransac_inlier_dist
            })
            .collect();
        let count = inliers.iter().filter(|&&b| b).count();
        if count > best_count {
            best_count = count;
            best_inliers = inliers;
        }
    }
    if best_count < 2 {
        // All sample pairs were coincident; treat the cloud as a point.
        return Err(MotionError::DegenerateFit(1));
    }
    let inlier_points: Vec<Point3d> = positions
        .iter()
        .zip(&best_inliers)
        .filter(|(_, &keep)| keep)
        .map(|(p, _)| *p)
        .collect();
    let mut direction = principal_direction(&inlier_points)
        .unwrap_or_else(|| (positions[n - 1] - positions[0]).normalize());
    // Orient along increasing frame order: the projections of inliers onto
    // the direction must correlate positively with their sequence index.
    let mut corr = 0.0;
    let m = inlier_points.len() as f64;
    let mean_idx = (m - 1.0) / 2.0;
    let centroid: Vector3<f64> = inlier_points.iter().sum::<Vector3<f64>>() / m;
    for (idx, p) in inlier_points.iter().enumerate() {
        corr += (idx as f64 - mean_idx) * (p - centroid).dot(&direction);
    }
    if corr < 0.0 {
        direction = -direction;
    }
    Ok((direction.normalize(), best_inliers))
}

fn count_distinct(points: &[Point3d]) -> usize {
    let mut distinct: Vec<Point3d> = Vec::new();
    for p in points {
        if distinct.iter().all(|q| (p - q).norm() > 1e-12) {
            distinct.push(*p);
        }
    }
    distinct.len()
}

/// Mean norm of consecutive-inlier displacements divided by frame gaps.
pub fn speed_estimate(
    positions: &[Point3d],
    frames: &[usize],
    inliers: &[bool],
) -> Result<f64, MotionError> {
    let pts: Vec<(usize, Point3d)> = frames
        .iter()
        .zip(positions)
        .zip(inliers)
        .filter(|(_, &keep)| keep)
        .map(|((f, p), _)| (*f, *p))
        .collect();
    if pts.len() < 2 {
        return Err(MotionError::DegenerateSpeed(pts.len()));
    }
    let mut total = 0.0;
    for pair in pts.windows(2) {
        let gap = (pair[1].0 - pair[0].0).max(1) as f64;
        total += (pair[1].1 - pair[0].1).norm() / gap;
    }
    Ok(total / (pts.len() - 1) as f64)
}

/// Static/moving decision.
///
/// Displacement rate is the norm of the least-squares velocity vector
/// (each world coordinate regressed against frame index) over the RANSAC
/// inliers. Raw consecutive-displacement norms would read positional noise
/// as motion, and projecting onto the fitted line first would chase the
/// noise realization's own drift direction. Single-detection tracks are
/// static and flagged low confidence.
pub fn classify_motion(
    positions: &[Point3d],
    frames: &[usize],
    cfg: &TrackConfig,
    seed: u64,
) -> (MotionClass, bool) {
    if positions.len() < 2 {
        return (MotionClass::Static, true);
    }
    let Ok((_, inliers)) = fit_direction_ransac(positions, cfg, seed) else {
        // Coincident positions: nothing moved.
        return (MotionClass::Static, false);
    };
    let pts: Vec<(f64, Point3d)> = frames
        .iter()
        .zip(positions)
        .zip(&inliers)
        .filter(|(_, &keep)| keep)
        .map(|((f, p), _)| (*f as f64, *p))
        .collect();
    if pts.len() < 2 {
        return (MotionClass::Static, true);
    }
    let n = pts.len() as f64;
    let mean_f = pts.iter().map(|(f, _)| f).sum::<f64>() / n;
    let mean_p: Vector3<f64> = pts.iter().map(|(_, p)| p).sum::<Vector3<f64>>() / n;
    let mut num = Vector3::zeros();
    let mut den = 0.0;
    for (f, p) in &pts {
        num += (p - mean_p) * (f - mean_f);
        den += (f - mean_f) * (f - mean_f);
    }
    if den < 1e-12 {
        return (MotionClass::Static, true);
    }
    let velocity = num / den;
    let class = if velocity.norm() > cfg.motion_threshold {
        MotionClass::Moving
    } else {
        MotionClass::Static
    };
    (class, false)
}

/// Per-track RNG stream so classification is independent of track order and
/// of how work is scheduled.
fn track_seed(base: u64, track_id: u32) -> u64 {
    base ^ (0x9e3779b97f4a7c15u64.wrapping_mul(track_id as u64 + 1))
}

/// Associate, classify, and fit motion for a whole sequence.
pub fn build_tracks(
    frames: &[Vec<Detection>],
    camera_poses: &[Se3],
    cfg: &TrackConfig,
) -> Result<Vec<Track>, MotionError> {
    let mut tracks = associate(frames, camera_poses, cfg)?;
    for track in &mut tracks {
        let positions = world_positions(track, camera_poses)?;
        let frame_ids: Vec<usize> = track.detections.iter().map(|d| d.frame).collect();
        let seed = track_seed(cfg.seed, track.id);
        let (class, low_confidence) = classify_motion(&positions, &frame_ids, cfg, seed);
        track.motion = class;
        track.low_confidence = low_confidence;
        if class == MotionClass::Moving {
            let (direction, inliers) = fit_direction_ransac(&positions, cfg, seed)?;
            let speed = speed_estimate(&positions, &frame_ids, &inliers)?;
            track.fit = Some(MotionFit {
                direction,
                speed,
                inliers,
            });
        }
    }
    Ok(tracks)
}

/// Object displacement from frame i to frame k, expressed in frame-k camera
/// coordinates. Zero for static tracks; `direction * speed * (k - i)`
/// rotated into the frame-k camera for moving ones. This is the `v` consumed
/// by [`crate::geom::warp_pose`].
pub fn displacement_vector(
    track: &Track,
    i: usize,
    k: usize,
    camera_poses: &[Se3],
) -> Result<Vector3<f64>, MotionError> {
    if track.motion == MotionClass::Static || i == k {
        return Ok(Vector3::zeros());
    }
    let fit = track.fit.as_ref().ok_or(MotionError::MissingFit)?;
    let world_v = fit.direction * fit.speed * (k as f64 - i as f64);
    let pose_k = camera_poses
        .get(k)
        .ok_or(GeomError::MissingFrame(k))?;
    Ok(pose_k.inverse().rotate(&world_v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BoxSize;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal, Uniform};

    fn det(frame: usize, x: f64, y: f64, z: f64) -> Detection {
        Detection {
            frame,
            pose: ObjectPose::new(
                Vector3::new(x, y, z),
                0.0,
                BoxSize::new(1.5, 1.6, 3.9).unwrap(),
                vec![],
            ),
            bbox2d: [0.0, 0.0, 10.0, 10.0],
            score: 0.9,
            mask_id: None,
        }
    }

    fn identity_poses(n: usize) -> Vec<Se3> {
        vec![Se3::identity(); n]
    }

    #[test]
    fn single_object_forms_one_track() {
        let frames: Vec<Vec<Detection>> = (0..10)
            .map(|f| vec![det(f, 0.1 * f as f64, 0.0, 10.0)])
            .collect();
        let tracks = associate(&frames, &identity_poses(10), &TrackConfig::default()).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].detections.len(), 10);
    }

    #[test]
    fn two_separated_statics_stay_distinct() {
        let frames: Vec<Vec<Detection>> = (0..8)
            .map(|f| vec![det(f, -5.0, 0.0, 10.0), det(f, 5.0, 0.0, 20.0)])
            .collect();
        let tracks = associate(&frames, &identity_poses(8), &TrackConfig::default()).unwrap();
        assert_eq!(tracks.len(), 2);
        for t in &tracks {
            assert_eq!(t.detections.len(), 8);
            let xs: Vec<f64> = t.detections.iter().map(|d| d.pose.t_c.x).collect();
            assert!(xs.windows(2).all(|w| w[0] == w[1]), "identity switch in {xs:?}");
        }
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let tracks = associate(&[], &[], &TrackConfig::default()).unwrap();
        assert!(tracks.is_empty());
    }

    #[test]
    fn track_ends_after_miss_budget() {
        let mut frames: Vec<Vec<Detection>> = (0..3).map(|f| vec![det(f, 0.0, 0.0, 10.0)]).collect();
        for _ in 3..8 {
            frames.push(vec![]);
        }
        frames.push(vec![det(8, 0.0, 0.0, 10.0)]);
        let tracks = associate(&frames, &identity_poses(9), &TrackConfig::default()).unwrap();
        assert_eq!(tracks.len(), 2, "gap beyond max_misses must start a new track");
    }

    #[test]
    fn world_positions_cancel_camera_motion() {
        // Camera advances 1 m/frame; the object is static in the world.
        let n = 6;
        let poses: Vec<Se3> = (0..n)
            .map(|f| Se3::from_translation(Vector3::new(0.0, 0.0, f as f64)))
            .collect();
        let frames: Vec<Vec<Detection>> = (0..n)
            .map(|f| vec![det(f, 2.0, 0.0, 15.0 - f as f64)])
            .collect();
        let tracks = associate(&frames, &poses, &TrackConfig::default()).unwrap();
        assert_eq!(tracks.len(), 1);
        let world = world_positions(&tracks[0], &poses).unwrap();
        for w in &world {
            assert_abs_diff_eq!(*w, Vector3::new(2.0, 0.0, 15.0), epsilon = 1e-9);
        }
    }

    #[test]
    fn classify_identical_positions_static() {
        let positions = vec![Vector3::new(1.0, 2.0, 3.0); 5];
        let frames: Vec<usize> = (0..5).collect();
        let (class, low) = classify_motion(&positions, &frames, &TrackConfig::default(), 7);
        assert_eq!(class, MotionClass::Static);
        assert!(!low);
    }

    #[test]
    fn classify_linear_motion_moving() {
        let positions: Vec<Point3d> = (0..6)
            .map(|f| Vector3::new(f as f64, 0.0, 10.0))
            .collect();
        let frames: Vec<usize> = (0..6).collect();
        let (class, _) = classify_motion(&positions, &frames, &TrackConfig::default(), 7);
        assert_eq!(class, MotionClass::Moving);
    }

    #[test]
    fn classify_single_detection_flagged() {
        let (class, low) = classify_motion(
            &[Vector3::new(0.0, 0.0, 5.0)],
            &[3],
            &TrackConfig::default(),
            1,
        );
        assert_eq!(class, MotionClass::Static);
        assert!(low);
    }

    #[test]
    fn classify_noisy_static_monte_carlo() {
        // sigma = 0.5 m positional noise on a parked object, 20 frames:
        // static in at least 95 of 100 seeds.
        let cfg = TrackConfig::default();
        let mut correct = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 900);
            let noise = Normal::new(0.0, 0.5).unwrap();
            let positions: Vec<Point3d> = (0..20)
                .map(|_| {
                    Vector3::new(
                        3.0 + noise.sample(&mut rng),
                        0.5 + noise.sample(&mut rng),
                        20.0 + noise.sample(&mut rng),
                    )
                })
                .collect();
            let frames: Vec<usize> = (0..20).collect();
            if classify_motion(&positions, &frames, &cfg, seed).0 == MotionClass::Static {
                correct += 1;
            }
        }
        assert!(correct >= 95, "static classified in only {correct}/100 seeds");
    }

    #[test]
    fn classify_invariant_to_world_rigid_transform() {
        let cfg = TrackConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let moving: Vec<Point3d> = (0..12)
            .map(|f| Vector3::new(0.4 * f as f64 + noise.sample(&mut rng), 0.0, 10.0))
            .collect();
        let frames: Vec<usize> = (0..12).collect();
        let g = Se3::rot_y(0.8).compose(&Se3::from_translation(Vector3::new(5.0, -2.0, 11.0)));
        let transformed: Vec<Point3d> = moving.iter().map(|p| g.apply(p)).collect();
        assert_eq!(
            classify_motion(&moving, &frames, &cfg, 5).0,
            classify_motion(&transformed, &frames, &cfg, 5).0
        );
    }

    #[test]
    fn ransac_exact_line_all_inliers() {
        let positions: Vec<Point3d> = (0..10)
            .map(|f| Vector3::new(1.0, 2.0, 3.0) + Vector3::new(0.6, 0.0, 0.8) * f as f64)
            .collect();
        let (dir, inliers) =
            fit_direction_ransac(&positions, &TrackConfig::default(), 3).unwrap();
        assert!(inliers.iter().all(|&b| b));
        assert_abs_diff_eq!(dir, Vector3::new(0.6, 0.0, 0.8), epsilon = 1e-9);
        assert_abs_diff_eq!(dir.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ransac_direction_flips_with_input_order() {
        let positions: Vec<Point3d> = (0..10)
            .map(|f| Vector3::new(f as f64, 0.0, 10.0))
            .collect();
        let reversed: Vec<Point3d> = positions.iter().rev().copied().collect();
        let (fwd, _) = fit_direction_ransac(&positions, &TrackConfig::default(), 3).unwrap();
        let (bwd, _) = fit_direction_ransac(&reversed, &TrackConfig::default(), 3).unwrap();
        assert_abs_diff_eq!(fwd, -bwd, epsilon = 1e-9);
    }

    #[test]
    fn ransac_degenerate_inputs() {
        let cfg = TrackConfig::default();
        assert_eq!(
            fit_direction_ransac(&[Vector3::zeros()], &cfg, 0),
            Err(MotionError::DegenerateFit(1))
        );
        assert_eq!(
            fit_direction_ransac(&[Vector3::zeros(); 4], &cfg, 0),
            Err(MotionError::DegenerateFit(1))
        );
    }

    #[test]
    fn ransac_recovers_line_under_outliers() {
        // 30% gross outliers + sigma 0.2 noise: within 2 degrees of the true
        // direction in at least 95 of 100 seeds.
        let cfg = TrackConfig::default();
        let truth = Vector3::new(0.8, 0.0, 0.6);
        let mut good = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 0.2).unwrap();
            let gross = Uniform::new(-10.0, 10.0);
            let positions: Vec<Point3d> = (0..20)
                .map(|f| {
                    if f % 10 < 3 {
                        Vector3::new(
                            gross.sample(&mut rng),
                            gross.sample(&mut rng),
                            gross.sample(&mut rng),
                        )
                    } else {
                        truth * f as f64
                            + Vector3::new(
                                noise.sample(&mut rng),
                                noise.sample(&mut rng),
                                noise.sample(&mut rng),
                            )
                    }
                })
                .collect();
            let (dir, _) = fit_direction_ransac(&positions, &cfg, seed).unwrap();
            let angle = dir.dot(&truth).clamp(-1.0, 1.0).acos().to_degrees();
            if angle <= 2.0 {
                good += 1;
            }
        }
        assert!(good >= 95, "direction recovered in only {good}/100 seeds");
    }

    #[test]
    fn speed_constant_motion() {
        let positions: Vec<Point3d> = (0..8)
            .map(|f| Vector3::new(0.0, 0.0, f as f64))
            .collect();
        let frames: Vec<usize> = (0..8).collect();
        let speed = speed_estimate(&positions, &frames, &vec![true; 8]).unwrap();
        assert_abs_diff_eq!(speed, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn speed_static_is_zero() {
        let positions = vec![Vector3::new(1.0, 1.0, 1.0); 5];
        let frames: Vec<usize> = (0..5).collect();
        let speed = speed_estimate(&positions, &frames, &vec![true; 5]).unwrap();
        assert_abs_diff_eq!(speed, 0.0);
    }

    #[test]
    fn speed_degenerate_inliers() {
        let positions = vec![Vector3::zeros(); 3];
        assert_eq!(
            speed_estimate(&positions, &[0, 1, 2], &[true, false, false]),
            Err(MotionError::DegenerateSpeed(1))
        );
    }

    #[test]
    fn speed_noisy_constant_velocity_within_ten_percent() {
        let mut errors: Vec<f64> = Vec::new();
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
            let noise = Normal::new(0.0, 0.05).unwrap();
            let positions: Vec<Point3d> = (0..20)
                .map(|f| {
                    Vector3::new(
                        noise.sample(&mut rng),
                        noise.sample(&mut rng),
                        1.0 * f as f64 + noise.sample(&mut rng),
                    )
                })
                .collect();
            let frames: Vec<usize> = (0..20).collect();
            let speed = speed_estimate(&positions, &frames, &vec![true; 20]).unwrap();
            errors.push((speed - 1.0).abs());
        }
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(errors[50] <= 0.1, "median speed error {}", errors[50]);
    }

    fn moving_track(poses: &[Se3], speed: f64) -> Track {
        let frames: Vec<Vec<Detection>> = (0..poses.len())
            .map(|f| {
                let world = Vector3::new(2.0, 0.0, 10.0 + speed * f as f64);
                let cam = poses[f].inverse().apply(&world);
                vec![det(f, cam.x, cam.y, cam.z)]
            })
            .collect();
        let mut tracks = build_tracks(&frames, poses, &TrackConfig::default()).unwrap();
        tracks.remove(0)
    }

    #[test]
    fn displacement_zero_for_static_and_same_frame() {
        let poses = identity_poses(6);
        let frames: Vec<Vec<Detection>> = (0..6).map(|f| vec![det(f, 0.0, 0.0, 9.0)]).collect();
        let tracks = build_tracks(&frames, &poses, &TrackConfig::default()).unwrap();
        assert_eq!(tracks[0].motion, MotionClass::Static);
        let v = displacement_vector(&tracks[0], 1, 4, &poses).unwrap();
        assert_abs_diff_eq!(v, Vector3::zeros());
        let moving = moving_track(&poses, 1.0);
        let v = displacement_vector(&moving, 2, 2, &poses).unwrap();
        assert_abs_diff_eq!(v, Vector3::zeros());
    }

    #[test]
    fn displacement_matches_ground_truth_under_identity_ego() {
        let poses = identity_poses(8);
        let track = moving_track(&poses, 1.0);
        assert_eq!(track.motion, MotionClass::Moving);
        let v = displacement_vector(&track, 1, 4, &poses).unwrap();
        assert_abs_diff_eq!(v, Vector3::new(0.0, 0.0, 3.0), epsilon = 1e-9);
    }

    #[test]
    fn displacement_antisymmetric_under_relative_rotation() {
        let poses: Vec<Se3> = (0..8)
            .map(|f| {
                Se3::rot_y(0.05 * f as f64)
                    .compose(&Se3::from_translation(Vector3::new(0.2 * f as f64, 0.0, 0.0)))
            })
            .collect();
        let track = moving_track(&poses, 0.8);
        assert_eq!(track.motion, MotionClass::Moving);
        let (i, k) = (2, 6);
        let v_ik = displacement_vector(&track, i, k, &poses).unwrap();
        let v_ki = displacement_vector(&track, k, i, &poses).unwrap();
        let rel = frame_transform(&poses, i, k).unwrap();
        assert_abs_diff_eq!(v_ik, -(rel.rotate(&v_ki)), epsilon = 1e-9);
    }

    #[test]
    fn association_is_deterministic() {
        let mut frames: Vec<Vec<Detection>> = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let jitter = Normal::new(0.0, 0.1).unwrap();
        for f in 0..15 {
            frames.push(vec![
                det(f, 0.3 * f as f64 + jitter.sample(&mut rng), 0.0, 10.0),
                det(f, -4.0 + jitter.sample(&mut rng), 0.0, 18.0),
            ]);
        }
        let poses = identity_poses(15);
        let a = build_tracks(&frames, &poses, &TrackConfig::default()).unwrap();
        let b = build_tracks(&frames, &poses, &TrackConfig::default()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.motion, y.motion);
            assert_eq!(x.detections.len(), y.detections.len());
        }
    }
}
