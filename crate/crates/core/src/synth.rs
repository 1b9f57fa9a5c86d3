//! Deterministic synthetic-scene generator: ground-truth sequences written
//! in the exact dataset formats (images, depth, masks, labels, calib, ego
//! poses, track index) plus controlled noise injection turning ground truth
//! into detector-like noisy detections.
//!
//! The world frame is the camera frame at time 0. Objects rest on a ground
//! plane `y = camera_height` and carry a procedural checker texture fixed to
//! the object frame so photometric consistency has signal across views.

use crate::geom::{
    allocentric_angle, project, wrap_angle, yaw_of_rotation, BoxSize, CameraIntrinsics,
    ObjectPose, Se3,
};
use crate::img::GrayImage;
use crate::kitti::{
    save_depth, save_masks, write_calib, write_labels, write_poses, CalibRecord, InstanceMask,
    KittiError, LabelRecord, MaskSet, DONT_CARE,
};
use crate::motion::MotionClass;
use crate::render::{rasterize_instances, DepthMap, RenderConfig};
use crate::shape::{cuboid_space, Mesh};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene spec: {0}")]
    Spec(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Kitti(#[from] KittiError),
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
    #[error(transparent)]
    Shape(#[from] crate::shape::ShapeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraPathKind {
    Straight,
    Arc,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CameraPath {
    pub kind: CameraPathKind,
    /// Meters per frame along the path.
    pub speed: f64,
    /// Turn radius for arc paths, meters (positive turns right).
    #[serde(default = "default_arc_radius")]
    pub arc_radius: f64,
}

fn default_arc_radius() -> f64 {
    50.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Ground position of the box center at frame 0, world frame.
    pub x: f64,
    pub z: f64,
    /// World yaw.
    pub yaw: f64,
    /// (height, width, length) meters.
    pub size: [f64; 3],
    /// World-frame linear velocity, meters per frame; zero means static.
    #[serde(default)]
    pub velocity: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureMode {
    Flat,
    Checker,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Translation noise sigma at depth 0, meters (per component).
    pub sigma_t_base: f64,
    /// Additional translation sigma per meter of depth.
    pub sigma_t_per_meter: f64,
    /// Size noise sigma, meters per component.
    pub sigma_size: f64,
    /// Yaw noise sigma, radians.
    pub sigma_yaw: f64,
    /// Probability of dropping a detection entirely.
    pub dropout: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sigma_t_base: 0.5,
            sigma_t_per_meter: 0.05,
            sigma_size: 0.1,
            sigma_yaw: 0.05,
            dropout: 0.05,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSpec {
    pub frames: usize,
    pub image_width: u32,
    pub image_height: u32,
    /// Focal length in pixels (fx = fy); principal point is the image center.
    pub focal: f64,
    /// Camera height above the ground plane, meters.
    pub camera_height: f64,
    pub camera: CameraPath,
    pub objects: Vec<ObjectSpec>,
    pub texture: TextureMode,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames < 2 {
            return Err(SynthError::Spec(format!(
                "frame count must be at least 2, got {}",
                self.frames
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.size.iter().any(|&s| s <= 0.0) {
                return Err(SynthError::Spec(format!(
                    "object {i} has non-positive size {:?}",
                    o.size
                )));
            }
        }
        let n = NoiseSpec::default();
        let _ = n;
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, SynthError> {
        Ok(CameraIntrinsics::new(
            self.focal,
            self.focal,
            self.image_width as f64 / 2.0,
            self.image_height as f64 / 2.0,
            self.image_width,
            self.image_height,
        )?)
    }

    /// Camera-to-world pose at a frame.
    pub fn camera_pose(&self, frame: usize) -> Se3 {
        match self.camera.kind {
            CameraPathKind::Straight => {
                Se3::from_translation(Vector3::new(0.0, 0.0, self.camera.speed * frame as f64))
            }
            CameraPathKind::Arc => {
                let r = self.camera.arc_radius;
                let theta = self.camera.speed * frame as f64 / r;
                let t = Vector3::new(r * (1.0 - theta.cos()), 0.0, r * theta.sin());
                Se3::new(crate::geom::yaw_matrix(theta), t).expect("yaw matrix is a rotation")
            }
        }
    }

    /// World-frame box center of an object at a frame.
    pub fn object_center(&self, obj: &ObjectSpec, frame: usize) -> Vector3<f64> {
        let y = self.camera_height - obj.size[0] / 2.0;
        Vector3::new(obj.x, y, obj.z) + Vector3::from(obj.velocity) * frame as f64
    }

    pub fn object_is_moving(&self, obj: &ObjectSpec) -> bool {
        Vector3::from(obj.velocity).norm() > 1e-9
    }
}

pub fn load_scene_spec(path: &Path) -> Result<SceneSpec, SynthError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| SynthError::Spec(format!("{}: {e}", path.display())))
}

/// Ground-truth motion index written alongside the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthIndex {
    pub objects: Vec<GtObject>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtObject {
    pub instance: u32,
    pub motion: MotionClass,
    pub velocity: [f64; 3],
    pub speed: f64,
}

fn checker3(p: &Vector3<f64>, cells: f64) -> f64 {
    let c = (p.x * cells).floor() + (p.y * cells).floor() + (p.z * cells).floor();
    if (c as i64).rem_euclid(2) == 0 {
        0.0
    } else {
        1.0
    }
}

struct PosedObject {
    instance: u32,
    mesh: Mesh,
    pose: ObjectPose,
    world_yaw: f64,
}

/// Rendered per-frame ground truth, before any file is written.
struct FrameRender {
    image: GrayImage,
    depth: DepthMap,
    instances: Vec<u32>,
    labels: Vec<LabelRecord>,
    /// Parallel to `labels`: the instance id of each row.
    label_instances: Vec<u32>,
    masks: MaskSet,
}

fn render_frame(
    spec: &SceneSpec,
    intr: &CameraIntrinsics,
    frame: usize,
) -> Result<FrameRender, SynthError> {
    let cam_pose = spec.camera_pose(frame);
    let cam_inv = cam_pose.inverse();
    let cam_yaw = yaw_of_rotation(cam_pose.rotation());
    let space = cuboid_space();

    let mut objects: Vec<PosedObject> = Vec::new();
    for (i, obj) in spec.objects.iter().enumerate() {
        let size = BoxSize::new(obj.size[0], obj.size[1], obj.size[2])?;
        let center_cam = cam_inv.apply(&spec.object_center(obj, frame));
        if center_cam.z <= 0.5 {
            continue;
        }
        let pose = ObjectPose::new(
            center_cam,
            wrap_angle(obj.yaw - cam_yaw),
            size,
            vec![],
        );
        objects.push(PosedObject {
            instance: i as u32 + 1,
            mesh: space.decode(&[], &size)?,
            pose,
            world_yaw: obj.yaw,
        });
    }

    let cfg = RenderConfig::new(intr.width, intr.height, 1e-6, 0.1, 400.0)
        .expect("static config is valid");
    let refs: Vec<(u32, &Mesh, &ObjectPose)> = objects
        .iter()
        .map(|o| (o.instance, &o.mesh, &o.pose))
        .collect();
    let (instances, obj_depth) = rasterize_instances(&refs, intr, &cfg);

    // Compose with the analytic ground plane and shade.
    let mut image = GrayImage::new(intr.width, intr.height);
    let mut depth_data = vec![f64::INFINITY; (intr.width * intr.height) as usize];
    let mut instance_map = vec![0u32; (intr.width * intr.height) as usize];
    let by_instance: BTreeMap<u32, &PosedObject> =
        objects.iter().map(|o| (o.instance, o)).collect();
    for iy in 0..intr.height {
        for ix in 0..intr.width {
            let pix = (iy * intr.width + ix) as usize;
            let center = Vector2::new(ix as f64 + 0.5, iy as f64 + 0.5);
            let ray_cam = intr.ray(&center);
            // Ground-plane hit in world coordinates.
            let ray_world = cam_pose.rotate(&ray_cam);
            let origin = cam_pose.translation();
            let ground_depth = if ray_world.y > 1e-9 {
                let s = (spec.camera_height - origin.y) / ray_world.y;
                if s > 0.0 {
                    Some(s) // ray has unit camera z, so s is camera depth
                } else {
                    None
                }
            } else {
                None
            };
            let object_depth = obj_depth.get(ix, iy);
            let (depth, shade, instance) = match (object_depth, ground_depth) {
                (Some(od), Some(gd)) if gd < od => (Some(gd), ground_shade(spec, origin, &ray_world, gd, ray_cam.norm()), 0),
                (Some(od), _) => {
                    let id = instances[pix];
                    (
                        Some(od),
                        object_shade(spec, by_instance[&id], &(ray_cam * od)),
                        id,
                    )
                }
                (None, Some(gd)) => (
                    Some(gd),
                    ground_shade(spec, origin, &ray_world, gd, ray_cam.norm()),
                    0,
                ),
                (None, None) => (None, 0.7, 0),
            };
            if let Some(d) = depth {
                depth_data[pix] = d;
                instance_map[pix] = instance;
            }
            image.set(ix, iy, shade);
        }
    }
    let depth = DepthMap::from_data(intr.width, intr.height, depth_data);

    // Per-object visibility: compare against a solo rasterization.
    let mut labels = Vec::new();
    let mut label_instances = Vec::new();
    let mut masks = Vec::new();
    let mut index = Vec::new();
    for obj in &objects {
        let solo: Vec<(u32, &Mesh, &ObjectPose)> = vec![(obj.instance, &obj.mesh, &obj.pose)];
        let (solo_map, _) = rasterize_instances(&solo, intr, &cfg);
        let alone: usize = solo_map.iter().filter(|&&id| id == obj.instance).count();
        if alone == 0 {
            continue;
        }
        let mask_data: Vec<bool> = instance_map.iter().map(|&id| id == obj.instance).collect();
        let visible = mask_data.iter().filter(|&&b| b).count();
        if visible == 0 {
            continue;
        }
        let visible_frac = visible as f64 / alone as f64;
        let occluded = if visible_frac >= 0.85 {
            0
        } else if visible_frac >= 0.5 {
            1
        } else {
            2
        };

        // Projected 2D box and truncation from clipping.
        let obj_to_cam = obj.pose.to_camera();
        let mut lo = Vector2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut all_in_front = true;
        for v in &obj.mesh.vertices {
            let p = obj_to_cam.apply(v);
            if p.z <= 0.1 {
                all_in_front = false;
                break;
            }
            let px = project(intr, &p)?;
            lo = lo.inf(&px);
            hi = hi.sup(&px);
        }
        if !all_in_front {
            continue;
        }
        let full_area = (hi.x - lo.x).max(0.0) * (hi.y - lo.y).max(0.0);
        let clip_lo = Vector2::new(lo.x.max(0.0), lo.y.max(0.0));
        let clip_hi = Vector2::new(
            hi.x.min(intr.width as f64),
            hi.y.min(intr.height as f64),
        );
        let clip_area =
            (clip_hi.x - clip_lo.x).max(0.0) * (clip_hi.y - clip_lo.y).max(0.0);
        let truncated = if full_area > 0.0 {
            (1.0 - clip_area / full_area).clamp(0.0, 1.0)
        } else {
            0.0
        };

        let det_row = labels.len();
        labels.push(LabelRecord {
            class: "Car".into(),
            truncated,
            occluded,
            alpha: allocentric_angle(&obj.pose)?,
            bbox: [clip_lo.x, clip_lo.y, clip_hi.x, clip_hi.y],
            height: obj.pose.size.height,
            width: obj.pose.size.width,
            length: obj.pose.size.length,
            location: crate::kitti::pose_to_location(&obj.pose),
            rotation_y: obj.pose.yaw,
            score: None,
        });
        label_instances.push(obj.instance);
        masks.push(InstanceMask {
            id: obj.instance,
            width: intr.width,
            height: intr.height,
            data: mask_data,
        });
        index.push((obj.instance, det_row));
        let _ = obj.world_yaw;
    }

    Ok(FrameRender {
        image,
        depth,
        instances: instance_map,
        labels,
        label_instances,
        masks: MaskSet { masks, index },
    })
}

fn object_shade(spec: &SceneSpec, obj: &PosedObject, hit_cam: &Vector3<f64>) -> f64 {
    let base = 0.25 + 0.12 * ((obj.instance % 4) as f64);
    match spec.texture {
        TextureMode::Flat => base,
        TextureMode::Checker => {
            // Texture anchored to the object frame so it tracks the object
            // across views.
            let obj_to_cam = obj.pose.to_camera();
            let local = obj_to_cam.inverse().apply(hit_cam);
            let normalized = local.component_div(&obj.pose.size.axis_scale());
            (base + 0.3 * checker3(&(normalized + Vector3::repeat(0.5)), 4.0)).min(1.0)
        }
    }
}

fn ground_shade(
    spec: &SceneSpec,
    origin: &Vector3<f64>,
    ray_world: &Vector3<f64>,
    depth: f64,
    _ray_norm: f64,
) -> f64 {
    match spec.texture {
        TextureMode::Flat => 0.5,
        TextureMode::Checker => {
            let hit = origin + ray_world * depth;
            0.4 + 0.25 * checker3(&Vector3::new(hit.x, 0.0, hit.z), 1.0 / 1.5)
        }
    }
}

/// Generate the full ground-truth dataset tree under `out_dir`.
///
/// Layout: `calib.txt`, `poses.txt`, `image_2/`, `depth/`, `masks/`,
/// `labels/`, `tracks_gt.json`. Byte-deterministic for a given spec.
pub fn generate(spec: &SceneSpec, out_dir: &Path) -> Result<GroundTruthIndex, SynthError> {
    spec.validate()?;
    let intr = spec.intrinsics()?;
    for sub in ["image_2", "depth", "masks", "labels"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }

    let mut entries = BTreeMap::new();
    entries.insert(
        "P2".to_string(),
        vec![
            intr.fx, 0.0, intr.cx, 0.0, 0.0, intr.fy, intr.cy, 0.0, 0.0, 0.0, 1.0, 0.0,
        ],
    );
    let calib_path = out_dir.join("calib.txt");
    std::fs::write(&calib_path, write_calib(&CalibRecord { entries }))
        .map_err(io_err(&calib_path))?;

    let poses: Vec<Se3> = (0..spec.frames).map(|f| spec.camera_pose(f)).collect();
    let poses_path = out_dir.join("poses.txt");
    std::fs::write(&poses_path, write_poses(&poses)).map_err(io_err(&poses_path))?;

    for frame in 0..spec.frames {
        let rendered = render_frame(spec, &intr, frame)?;
        rendered
            .image
            .save_png(&out_dir.join(format!("image_2/{frame:06}.png")))
            .map_err(|source| KittiError::Image {
                path: out_dir.join(format!("image_2/{frame:06}.png")),
                source,
            })?;
        save_depth(&rendered.depth, &out_dir.join(format!("depth/{frame:06}.png")))?;
        save_masks(&out_dir.join("masks"), frame, &rendered.masks)?;
        let label_path = out_dir.join(format!("labels/{frame:06}.txt"));
        std::fs::write(&label_path, write_labels(&rendered.labels))
            .map_err(io_err(&label_path))?;
        let _ = rendered.instances;
        let _ = rendered.label_instances;
    }

    let index = GroundTruthIndex {
        objects: spec
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let velocity = Vector3::from(o.velocity);
                GtObject {
                    instance: i as u32 + 1,
                    motion: if spec.object_is_moving(o) {
                        MotionClass::Moving
                    } else {
                        MotionClass::Static
                    },
                    velocity: o.velocity,
                    speed: velocity.norm(),
                }
            })
            .collect(),
    };
    let index_path = out_dir.join("tracks_gt.json");
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    std::fs::write(&index_path, json).map_err(io_err(&index_path))?;
    Ok(index)
}

/// One noisy detection derived from a ground-truth label row.
#[derive(Debug, Clone)]
pub struct PerturbedLabel {
    pub gt_row: usize,
    pub label: LabelRecord,
}

/// Apply the detector noise model to one frame of ground-truth labels.
///
/// Gaussian noise on the location with per-component sigma
/// `sigma_t_base + sigma_t_per_meter * z`, on the size, and on the yaw;
/// Bernoulli dropout; scores strictly decreasing in the drawn translation
/// noise magnitude. Deterministic per (seed, frame).
pub fn perturb(
    gt: &[LabelRecord],
    noise: &NoiseSpec,
    seed: u64,
    frame: usize,
) -> Vec<PerturbedLabel> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ 0xd1b54a32d192ed03u64.wrapping_mul(frame as u64 + 1),
    );
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::new();
    for (row, gt_label) in gt.iter().enumerate() {
        if gt_label.is_dont_care() {
            continue;
        }
        if rng.gen::<f64>() < noise.dropout {
            continue;
        }
        let sigma_t = noise.sigma_t_base + noise.sigma_t_per_meter * gt_label.location[2];
        let dt = Vector3::new(
            unit.sample(&mut rng) * sigma_t,
            unit.sample(&mut rng) * sigma_t,
            unit.sample(&mut rng) * sigma_t,
        );
        let ds = Vector3::new(
            unit.sample(&mut rng) * noise.sigma_size,
            unit.sample(&mut rng) * noise.sigma_size,
            unit.sample(&mut rng) * noise.sigma_yaw, // yaw rides in the last slot
        );
        let mut label = gt_label.clone();
        label.location[0] += dt.x;
        label.location[1] += dt.y;
        label.location[2] += dt.z;
        label.height = (label.height + unit.sample(&mut rng) * noise.sigma_size).max(0.3);
        label.width = (label.width + ds.x).max(0.3);
        label.length = (label.length + ds.y).max(0.3);
        label.rotation_y = wrap_angle(label.rotation_y + ds.z);
        // Confidence correlates with accuracy but is not a perfect ranking,
        // as with a real detector.
        let jitter = 0.75 + 0.25 * rng.gen::<f64>();
        label.score = Some((jitter / (1.0 + dt.norm())).clamp(0.01, 0.9999));
        out.push(PerturbedLabel {
            gt_row: row,
            label,
        });
    }
    out
}

/// Read the ground-truth labels of a generated dataset, write noisy
/// `detections/` files, and rewrite the mask index files to reference
/// detection rows.
pub fn perturb_dataset(dir: &Path, noise: &NoiseSpec, seed: u64) -> Result<(), SynthError> {
    let det_dir = dir.join("detections");
    std::fs::create_dir_all(&det_dir).map_err(io_err(&det_dir))?;
    let mut frame = 0usize;
    loop {
        let label_path = dir.join(format!("labels/{frame:06}.txt"));
        if !label_path.exists() {
            break;
        }
        let gt = crate::kitti::parse_labels(&label_path)?;
        let noisy = perturb(&gt, noise, seed, frame);
        let det_path = det_dir.join(format!("{frame:06}.txt"));
        let records: Vec<LabelRecord> = noisy.iter().map(|p| p.label.clone()).collect();
        std::fs::write(&det_path, write_labels(&records)).map_err(io_err(&det_path))?;

        // Remap the mask index from ground-truth rows to detection rows.
        let mask_dir = dir.join("masks");
        let old = crate::kitti::load_masks(&mask_dir, frame)?;
        let mut new_index = Vec::new();
        for (det_row, p) in noisy.iter().enumerate() {
            if let Some((instance, _)) = old.index.iter().find(|(_, gt_row)| *gt_row == p.gt_row)
            {
                new_index.push((*instance, det_row));
            }
        }
        let remapped = MaskSet {
            masks: old.masks,
            index: new_index,
        };
        save_masks(&mask_dir, frame, &remapped)?;
        frame += 1;
    }
    if frame == 0 {
        return Err(SynthError::Spec(format!(
            "no label files found under {}",
            dir.join("labels").display()
        )));
    }
    Ok(())
}

/// A compact default scene used by tests and documentation examples: three
/// parked cars on the road sides, one car ahead in the ego lane moving away,
/// one oncoming car. Lanes keep the objects separated well beyond the
/// depth-dependent detection noise.
pub fn example_scene(seed: u64) -> SceneSpec {
    SceneSpec {
        frames: 20,
        image_width: 512,
        image_height: 192,
        focal: 460.0,
        camera_height: 1.65,
        camera: CameraPath {
            kind: CameraPathKind::Straight,
            speed: 1.0,
            arc_radius: default_arc_radius(),
        },
        objects: vec![
            ObjectSpec {
                x: -5.5,
                z: 16.0,
                yaw: 0.0,
                size: [1.5, 1.6, 3.9],
                velocity: [0.0, 0.0, 0.0],
            },
            ObjectSpec {
                x: 4.2,
                z: 22.0,
                yaw: 1.3,
                size: [1.6, 1.7, 4.2],
                velocity: [0.0, 0.0, 0.0],
            },
            ObjectSpec {
                x: -5.8,
                z: 30.0,
                yaw: -0.2,
                size: [1.45, 1.6, 3.7],
                velocity: [0.0, 0.0, 0.0],
            },
            ObjectSpec {
                x: 1.2,
                z: 34.0,
                yaw: 0.0,
                size: [1.55, 1.65, 4.0],
                velocity: [0.0, 0.0, 1.0],
            },
            ObjectSpec {
                x: -1.8,
                z: 42.0,
                yaw: std::f64::consts::PI,
                size: [1.5, 1.6, 3.9],
                velocity: [0.0, 0.0, -1.3],
            },
        ],
        texture: TextureMode::Checker,
        noise: NoiseSpec::default(),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kitti::{load_depth, load_masks, parse_labels};
    use approx::assert_abs_diff_eq;

    fn small_scene() -> SceneSpec {
        SceneSpec {
            frames: 3,
            image_width: 192,
            image_height: 96,
            focal: 180.0,
            camera_height: 1.65,
            camera: CameraPath {
                kind: CameraPathKind::Straight,
                speed: 1.0,
                arc_radius: 50.0,
            },
            objects: vec![
                ObjectSpec {
                    x: -2.5,
                    z: 10.0,
                    yaw: 0.2,
                    size: [1.5, 1.6, 3.9],
                    velocity: [0.0, 0.0, 0.0],
                },
                ObjectSpec {
                    x: 2.0,
                    z: 16.0,
                    yaw: 0.0,
                    size: [1.5, 1.6, 3.9],
                    velocity: [0.0, 0.0, 1.0],
                },
            ],
            texture: TextureMode::Checker,
            noise: NoiseSpec::default(),
            seed: 7,
        }
    }

    #[test]
    fn masks_and_depth_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_scene();
        generate(&spec, dir.path()).unwrap();
        let intr = spec.intrinsics().unwrap();
        // Reload and compare against a fresh in-memory render of frame 0.
        let rendered = render_frame(&spec, &intr, 0).unwrap();
        let depth = load_depth(&dir.path().join("depth/000000.png")).unwrap();
        for iy in 0..intr.height {
            for ix in 0..intr.width {
                match (depth.get(ix, iy), rendered.depth.get(ix, iy)) {
                    (Some(a), Some(b)) if b * 256.0 <= u16::MAX as f64 => {
                        // Stored depth is quantized to 1/256 m.
                        assert!((a - b).abs() <= 0.5 / 256.0 + 1e-9, "({ix},{iy}): {a} vs {b}")
                    }
                    (None, Some(b)) => assert!(b * 256.0 > u16::MAX as f64),
                    (None, None) => {}
                    (a, b) => panic!("mismatch at ({ix},{iy}): {a:?} vs {b:?}"),
                }
            }
        }
        let masks = load_masks(&dir.path().join("masks"), 0).unwrap();
        assert_eq!(masks.masks.len(), rendered.masks.masks.len());
        for (loaded, expected) in masks.masks.iter().zip(&rendered.masks.masks) {
            assert_eq!(loaded.id, expected.id);
            assert_eq!(loaded.data, expected.data);
        }
    }

    #[test]
    fn mask_pixels_carry_object_surface_depth() {
        // Consistency invariant: every foreground mask pixel has a valid
        // depth equal to the rendered object surface.
        let dir = tempfile::tempdir().unwrap();
        let spec = small_scene();
        generate(&spec, dir.path()).unwrap();
        let depth = load_depth(&dir.path().join("depth/000000.png")).unwrap();
        let masks = load_masks(&dir.path().join("masks"), 0).unwrap();
        let labels = parse_labels(&dir.path().join("labels/000000.txt")).unwrap();
        for mask in &masks.masks {
            let mut on_surface = 0usize;
            let mut total = 0usize;
            // The object's depth spans its center z +- half diagonal.
            let row = masks
                .index
                .iter()
                .find(|(id, _)| *id == mask.id)
                .map(|(_, row)| *row)
                .unwrap();
            let z = labels[row].location[2];
            let half_diag = 0.5
                * (labels[row].length.powi(2) + labels[row].width.powi(2))
                    .sqrt();
            for iy in 0..mask.height {
                for ix in 0..mask.width {
                    if !mask.get(ix, iy) {
                        continue;
                    }
                    total += 1;
                    if let Some(d) = depth.get(ix, iy) {
                        if (d - z).abs() <= half_diag + 0.5 {
                            on_surface += 1;
                        }
                    }
                }
            }
            assert!(total > 0);
            assert_eq!(on_surface, total, "instance {}", mask.id);
        }
    }

    #[test]
    fn moving_object_marked_with_exact_velocity() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_scene();
        let index = generate(&spec, dir.path()).unwrap();
        assert_eq!(index.objects[0].motion, MotionClass::Static);
        assert_eq!(index.objects[1].motion, MotionClass::Moving);
        assert_eq!(index.objects[1].velocity, [0.0, 0.0, 1.0]);
        assert_abs_diff_eq!(index.objects[1].speed, 1.0);
        let text = std::fs::read_to_string(dir.path().join("tracks_gt.json")).unwrap();
        let parsed: GroundTruthIndex = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.objects.len(), 2);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let spec = small_scene();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        generate(&spec, dir_a.path()).unwrap();
        perturb_dataset(dir_a.path(), &spec.noise, spec.seed).unwrap();
        generate(&spec, dir_b.path()).unwrap();
        perturb_dataset(dir_b.path(), &spec.noise, spec.seed).unwrap();
        let mut compared = 0usize;
        for entry in walk(dir_a.path()) {
            let rel = entry.strip_prefix(dir_a.path()).unwrap();
            let a = std::fs::read(&entry).unwrap();
            let b = std::fs::read(dir_b.path().join(rel)).unwrap();
            assert_eq!(a, b, "{} differs", rel.display());
            compared += 1;
        }
        assert!(compared > 10);
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            let mut entries: Vec<_> = std::fs::read_dir(&d)
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            entries.sort();
            for e in entries {
                if e.is_dir() {
                    stack.push(e);
                } else {
                    out.push(e);
                }
            }
        }
        out
    }

    #[test]
    fn zero_noise_perturb_is_identity_modulo_score() {
        let spec = small_scene();
        let dir = tempfile::tempdir().unwrap();
        generate(&spec, dir.path()).unwrap();
        let gt = parse_labels(&dir.path().join("labels/000000.txt")).unwrap();
        let noise = NoiseSpec {
            sigma_t_base: 0.0,
            sigma_t_per_meter: 0.0,
            sigma_size: 0.0,
            sigma_yaw: 0.0,
            dropout: 0.0,
        };
        let noisy = perturb(&gt, &noise, 3, 0);
        assert_eq!(noisy.len(), gt.len());
        for (p, g) in noisy.iter().zip(&gt) {
            assert_eq!(p.label.location, g.location);
            assert_eq!(p.label.rotation_y, g.rotation_y);
            // Zero noise magnitude: only the confidence jitter remains.
            assert!(p.label.score.unwrap() >= 0.75);
        }
    }

    #[test]
    fn full_dropout_empties_detections() {
        let spec = small_scene();
        let dir = tempfile::tempdir().unwrap();
        generate(&spec, dir.path()).unwrap();
        let gt = parse_labels(&dir.path().join("labels/000000.txt")).unwrap();
        let noise = NoiseSpec {
            dropout: 1.0,
            ..NoiseSpec::default()
        };
        assert!(perturb(&gt, &noise, 3, 0).is_empty());
    }

    #[test]
    fn injected_z_noise_has_requested_spread() {
        // sigma_base = 0.5, 0.05 per meter: empirical std within 10% over
        // 10^4 draws.
        let gt = vec![LabelRecord {
            class: "Car".into(),
            truncated: 0.0,
            occluded: 0,
            alpha: 0.0,
            bbox: [0.0, 0.0, 50.0, 50.0],
            height: 1.5,
            width: 1.6,
            length: 3.9,
            location: [0.0, 1.65, 20.0],
            rotation_y: 0.0,
            score: None,
        }];
        let noise = NoiseSpec {
            sigma_t_base: 0.5,
            sigma_t_per_meter: 0.05,
            sigma_size: 0.0,
            sigma_yaw: 0.0,
            dropout: 0.0,
        };
        let mut errors = Vec::with_capacity(10_000);
        for draw in 0..10_000usize {
            let noisy = perturb(&gt, &noise, 1000 + draw as u64, 0);
            errors.push(noisy[0].label.location[2] - 20.0);
        }
        let mean: f64 = errors.iter().sum::<f64>() / errors.len() as f64;
        let var: f64 =
            errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / errors.len() as f64;
        let expected = 0.5 + 0.05 * 20.0;
        assert!(
            (var.sqrt() - expected).abs() / expected < 0.1,
            "std {} vs {expected}",
            var.sqrt()
        );
    }

    #[test]
    fn perturb_dataset_remaps_mask_index() {
        let spec = SceneSpec {
            noise: NoiseSpec {
                dropout: 0.5,
                ..NoiseSpec::default()
            },
            ..small_scene()
        };
        let dir = tempfile::tempdir().unwrap();
        generate(&spec, dir.path()).unwrap();
        perturb_dataset(dir.path(), &spec.noise, 11).unwrap();
        for frame in 0..spec.frames {
            let dets =
                parse_labels(&dir.path().join(format!("detections/{frame:06}.txt"))).unwrap();
            let masks = load_masks(&dir.path().join("masks"), frame).unwrap();
            for (_, det_row) in &masks.index {
                assert!(*det_row < dets.len(), "index points past detections");
            }
        }
    }

    #[test]
    fn scene_spec_toml_roundtrip() {
        let spec = example_scene(5);
        let text = toml::to_string(&spec).unwrap();
        let parsed: SceneSpec = toml::from_str(&text).unwrap();
        assert_eq!(parsed.frames, spec.frames);
        assert_eq!(parsed.objects.len(), spec.objects.len());
        assert_eq!(parsed.seed, 5);
    }

    #[test]
    fn arc_path_turns_the_camera() {
        let spec = SceneSpec {
            camera: CameraPath {
                kind: CameraPathKind::Arc,
                speed: 2.0,
                arc_radius: 30.0,
            },
            ..small_scene()
        };
        let p5 = spec.camera_pose(5);
        let expected_theta = 2.0 * 5.0 / 30.0;
        assert_abs_diff_eq!(
            yaw_of_rotation(p5.rotation()),
            expected_theta,
            epsilon = 1e-12
        );
        // Arc length preserved between consecutive frames.
        let p6 = spec.camera_pose(6);
        let chord = (p6.translation() - p5.translation()).norm();
        assert!((chord - 2.0).abs() < 0.01);
    }
}
