//! Sequence dataset: the on-disk directory layout the pipeline consumes.
//!
//! ```text
//! sequence/
//!   calib.txt                  # P2 projection (KITTI calib format)
//!   poses.txt                  # camera-to-world 3x4 per frame, or
//!   oxts.txt                   # 30-field GPS/IMU lines (needs calib
//!                              # Tr_imu_to_velo + Tr_velo_to_cam)
//!   image_2/{frame:06}.png     # grayscale or RGB frames
//!   depth/{frame:06}.png       # 16-bit depth, meters * 256, 0 invalid
//!   masks/{frame:06}.txt       # instance -> detection-row index
//!   masks/{frame:06}_{id:03}.png
//!   detections/{frame:06}.txt  # noisy 3D detections, label format + score
//!   labels/{frame:06}.txt      # ground truth (evaluation only)
//! ```

use crate::geom::{CameraIntrinsics, Se3};
use crate::img::GrayImage;
use crate::kitti::{
    label_to_pose, load_depth, load_masks, parse_calib, parse_labels, parse_oxts, parse_poses,
    KittiError, LabelRecord, MaskSet,
};
use crate::motion::Detection;
use crate::render::DepthMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{0}: no frames found (expected image_2/000000.png)")]
    NoFrames(PathBuf),
    #[error("{0}: no ego motion (expected poses.txt, or oxts.txt with calib Tr chains)")]
    NoEgoMotion(PathBuf),
    #[error("{dir}: {expected} ego poses but {found} frames")]
    PoseCountMismatch {
        dir: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Kitti(#[from] KittiError),
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
}

/// Everything observed at one timestamp.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub image: GrayImage,
    /// Observed scene depth (monocular-network stand-in); all-invalid when
    /// the dataset ships no depth.
    pub depth: DepthMap,
    pub masks: MaskSet,
    /// Raw detection records, row order preserved.
    pub detections: Vec<LabelRecord>,
}

impl Frame {
    /// Detections in tracker form, mask ids wired through the index file.
    pub fn tracker_detections(&self) -> Vec<Detection> {
        self.detections
            .iter()
            .enumerate()
            .filter_map(|(row, record)| {
                let pose = label_to_pose(record).ok()?;
                Some(Detection {
                    frame: self.index,
                    pose,
                    bbox2d: record.bbox,
                    score: record.score.unwrap_or(1.0),
                    mask_id: self.masks.instance_of_detection(row),
                })
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct SequenceDataset {
    pub dir: PathBuf,
    pub intr: CameraIntrinsics,
    /// Camera-to-world pose per frame (world = frame-0 camera).
    pub poses: Vec<Se3>,
    pub frames: Vec<Frame>,
}

impl SequenceDataset {
    pub fn load(dir: &Path) -> Result<Self, DatasetError> {
        let image_dir = dir.join("image_2");
        let mut frames = Vec::new();
        let mut index = 0usize;
        loop {
            let image_path = image_dir.join(format!("{index:06}.png"));
            if !image_path.exists() {
                break;
            }
            let image = GrayImage::load_png(&image_path).map_err(|source| DatasetError::Image {
                path: image_path.clone(),
                source,
            })?;
            let depth_path = dir.join(format!("depth/{index:06}.png"));
            let depth = if depth_path.exists() {
                load_depth(&depth_path)?
            } else {
                DepthMap::new_invalid(image.width, image.height)
            };
            let masks = load_masks(&dir.join("masks"), index)?;
            let det_path = dir.join(format!("detections/{index:06}.txt"));
            let detections = if det_path.exists() {
                parse_labels(&det_path)?
            } else {
                Vec::new()
            };
            frames.push(Frame {
                index,
                image,
                depth,
                masks,
                detections,
            });
            index += 1;
        }
        if frames.is_empty() {
            return Err(DatasetError::NoFrames(dir.to_path_buf()));
        }

        let calib = parse_calib(&dir.join("calib.txt"))?;
        let intr = calib.intrinsics(frames[0].image.width, frames[0].image.height)?;

        let poses_path = dir.join("poses.txt");
        let oxts_path = dir.join("oxts.txt");
        let poses = if poses_path.exists() {
            parse_poses(&poses_path)?
        } else if oxts_path.exists() {
            let text = std::fs::read_to_string(&oxts_path).map_err(|source| KittiError::Io {
                path: oxts_path.clone(),
                source,
            })?;
            let imu_poses = parse_oxts(&text, Some(&oxts_path))?;
            let imu_to_cam = calib
                .imu_to_camera()
                .ok_or_else(|| DatasetError::NoEgoMotion(dir.to_path_buf()))?;
            let cam_inv = imu_to_cam.inverse();
            imu_poses
                .iter()
                .map(|g| imu_to_cam.compose(g).compose(&cam_inv))
                .collect()
        } else {
            return Err(DatasetError::NoEgoMotion(dir.to_path_buf()));
        };
        if poses.len() != frames.len() {
            return Err(DatasetError::PoseCountMismatch {
                dir: dir.to_path_buf(),
                expected: poses.len(),
                found: frames.len(),
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            intr,
            poses,
            frames,
        })
    }

    /// Ground-truth label files, when the sequence ships them.
    pub fn ground_truth(&self) -> Result<Vec<Vec<LabelRecord>>, DatasetError> {
        let mut out = Vec::with_capacity(self.frames.len());
        for frame in &self.frames {
            let path = self.dir.join(format!("labels/{:06}.txt", frame.index));
            out.push(if path.exists() {
                parse_labels(&path)?
            } else {
                Vec::new()
            });
        }
        Ok(out)
    }
}
