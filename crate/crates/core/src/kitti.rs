//! Parsers and writers for the KITTI-family files the pipeline consumes and
//! produces: calibration, oxts GPS/IMU records, label files, 16-bit depth
//! PNGs, per-instance mask sets, and plain pose-matrix files.
//!
//! Every parser rejects malformed input with a located error (file, line,
//! column), and parse -> write -> parse is a fixed point for each format.

use crate::geom::{CameraIntrinsics, ObjectPose, Se3};
use crate::render::DepthMap;
use nalgebra::{Matrix3, Vector3};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("{}:{line}:{column}: {msg}", path_str(.path))]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("{}: missing required key {key}", path_str(.path))]
    MissingKey { path: Option<PathBuf>, key: String },
    #[error("{path}: expected {expected}, found {found}")]
    BadImageFormat {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error(transparent)]
    Geom(#[from] crate::geom::GeomError),
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_deref()
        .map_or_else(|| "<memory>".to_string(), |p| p.display().to_string())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KittiError + '_ {
    move |source| KittiError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Whitespace tokenizer that remembers byte columns for error reports.
struct Tokens<'a> {
    path: Option<&'a Path>,
    line_no: usize,
    items: Vec<(usize, &'a str)>,
    next: usize,
}

impl<'a> Tokens<'a> {
    fn new(path: Option<&'a Path>, line_no: usize, line: &'a str) -> Self {
        let mut items = Vec::new();
        let mut start = None;
        for (i, ch) in line.char_indices() {
            if ch.is_whitespace() {
                if let Some(s) = start.take() {
                    items.push((s + 1, &line[s..i]));
                }
            } else if start.is_none() {
                start = Some(i);
            }
        }
        if let Some(s) = start {
            items.push((s + 1, &line[s..]));
        }
        Self {
            path,
            line_no,
            items,
            next: 0,
        }
    }

    fn len(&self) -> usize {
        self.items.len()
    }

    fn error(&self, column: usize, msg: impl Into<String>) -> KittiError {
        KittiError::Parse {
            path: self.path.map(Path::to_path_buf),
            line: self.line_no,
            column,
            msg: msg.into(),
        }
    }

    fn next_str(&mut self) -> Result<(usize, &'a str), KittiError> {
        if self.next >= self.items.len() {
            return Err(self.error(
                self.items.last().map_or(1, |(c, t)| c + t.len()),
                "unexpected end of line",
            ));
        }
        let item = self.items[self.next];
        self.next += 1;
        Ok(item)
    }

    fn next_f64(&mut self) -> Result<f64, KittiError> {
        let (col, tok) = self.next_str()?;
        tok.parse::<f64>()
            .map_err(|_| self.error(col, format!("expected a number, found {tok:?}")))
    }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Parsed calibration file: every `key: values` line is preserved; P2 is
/// required and provides the left color camera intrinsics.
#[derive(Debug, Clone)]
pub struct CalibRecord {
    pub entries: BTreeMap<String, Vec<f64>>,
}

impl CalibRecord {
    pub fn p2(&self) -> &[f64] {
        self.entries.get("P2").expect("validated at parse time")
    }

    /// Intrinsics from P2; the image size is not stored in calib files and
    /// must come from the images themselves.
    pub fn intrinsics(&self, width: u32, height: u32) -> Result<CameraIntrinsics, KittiError> {
        let p = self.p2();
        Ok(CameraIntrinsics::new(p[0], p[5], p[2], p[6], width, height)?)
    }

    /// 3x4 entry as a rigid transform, when present and rigid.
    pub fn transform(&self, key: &str) -> Option<Se3> {
        let v = self.entries.get(key)?;
        if v.len() != 12 {
            return None;
        }
        let rot = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        Se3::new(rot, Vector3::new(v[3], v[7], v[11])).ok()
    }

    /// IMU-to-camera extrinsic composed from `Tr_velo_to_cam` and
    /// `Tr_imu_to_velo`, when both are present.
    pub fn imu_to_camera(&self) -> Option<Se3> {
        let velo_to_cam = self.transform("Tr_velo_to_cam")?;
        let imu_to_velo = self.transform("Tr_imu_to_velo")?;
        Some(velo_to_cam.compose(&imu_to_velo))
    }
}

pub fn parse_calib_str(text: &str, path: Option<&Path>) -> Result<CalibRecord, KittiError> {
    let mut entries = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = Tokens::new(path, ln + 1, line);
        let (col, key) = tokens.next_str()?;
        let key = key.strip_suffix(':').ok_or_else(|| {
            tokens.error(col, format!("expected `name:` prefix, found {key:?}"))
        })?;
        let mut values = Vec::with_capacity(tokens.len() - 1);
        while tokens.next < tokens.len() {
            values.push(tokens.next_f64()?);
        }
        entries.insert(key.to_string(), values);
    }
    match entries.get("P2") {
        Some(v) if v.len() == 12 => {}
        Some(v) => {
            return Err(KittiError::Parse {
                path: path.map(Path::to_path_buf),
                line: 0,
                column: 0,
                msg: format!("P2 must hold 12 values, found {}", v.len()),
            })
        }
        None => {
            return Err(KittiError::MissingKey {
                path: path.map(Path::to_path_buf),
                key: "P2".into(),
            })
        }
    }
    Ok(CalibRecord { entries })
}

pub fn parse_calib(path: &Path) -> Result<CalibRecord, KittiError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_calib_str(&text, Some(path))
}

pub fn write_calib(calib: &CalibRecord) -> String {
    let mut out = String::new();
    for (key, values) in &calib.entries {
        out.push_str(key);
        out.push(':');
        for v in values {
            let _ = write!(out, " {v:.12e}");
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Oxts GPS/IMU
// ---------------------------------------------------------------------------

pub const OXTS_FIELDS: usize = 30;

/// One 30-field oxts line. The named fields feed pose construction; the
/// remaining 24 (velocities, accelerations, status) ride along untouched.
#[derive(Debug, Clone)]
pub struct OxtsRecord {
    pub lat: f64,
    pub lon: f64,
    pub alt: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub rest: [f64; OXTS_FIELDS - 6],
}

pub fn parse_oxts_records(text: &str, path: Option<&Path>) -> Result<Vec<OxtsRecord>, KittiError> {
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = Tokens::new(path, ln + 1, line);
        if tokens.len() != OXTS_FIELDS {
            return Err(tokens.error(
                1,
                format!("oxts line must have {OXTS_FIELDS} fields, found {}", tokens.len()),
            ));
        }
        let lat = tokens.next_f64()?;
        let lon = tokens.next_f64()?;
        let alt = tokens.next_f64()?;
        let roll = tokens.next_f64()?;
        let pitch = tokens.next_f64()?;
        let yaw = tokens.next_f64()?;
        let mut rest = [0.0; OXTS_FIELDS - 6];
        for slot in &mut rest {
            *slot = tokens.next_f64()?;
        }
        records.push(OxtsRecord {
            lat,
            lon,
            alt,
            roll,
            pitch,
            yaw,
            rest,
        });
    }
    Ok(records)
}

const EARTH_RADIUS_M: f64 = 6378137.0;

/// Ego poses from oxts records: local Mercator projection scaled by
/// `cos(lat_0)`, rotation composed `Rz(yaw) * Ry(pitch) * Rx(roll)`, and the
/// first frame normalized to the identity.
pub fn oxts_to_poses(records: &[OxtsRecord]) -> Vec<Se3> {
    if records.is_empty() {
        return Vec::new();
    }
    let scale = records[0].lat.to_radians().cos();
    let raw: Vec<Se3> = records
        .iter()
        .map(|r| {
            let x = scale * r.lon.to_radians() * EARTH_RADIUS_M;
            let y = scale * EARTH_RADIUS_M
                * (std::f64::consts::FRAC_PI_4 + 0.5 * r.lat.to_radians()).tan().ln();
            let z = r.alt;
            let (sy, cy) = r.yaw.sin_cos();
            let (sp, cp) = r.pitch.sin_cos();
            let (sr, cr) = r.roll.sin_cos();
            let rz = Matrix3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
            let ry = Matrix3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
            let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
            Se3::new(rz * ry * rx, Vector3::new(x, y, z))
                .expect("axis-angle composition is a rotation")
        })
        .collect();
    let origin_inv = raw[0].inverse();
    raw.iter().map(|g| origin_inv.compose(g)).collect()
}

/// Parse oxts text straight to normalized ego poses.
pub fn parse_oxts(text: &str, path: Option<&Path>) -> Result<Vec<Se3>, KittiError> {
    Ok(oxts_to_poses(&parse_oxts_records(text, path)?))
}

pub fn write_oxts(records: &[OxtsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = write!(
            out,
            "{:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e}",
            r.lat, r.lon, r.alt, r.roll, r.pitch, r.yaw
        );
        for v in &r.rest {
            let _ = write!(out, " {v:.12e}");
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Labels
// ---------------------------------------------------------------------------

pub const DONT_CARE: &str = "DontCare";

/// One KITTI label line. `location` is the bottom-face center in camera
/// coordinates; [`label_to_pose`] bridges to the engine's box-center state.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class: String,
    pub truncated: f64,
    pub occluded: i8,
    pub alpha: f64,
    /// Pixel bbox (u_min, v_min, u_max, v_max).
    pub bbox: [f64; 4],
    pub height: f64,
    pub width: f64,
    pub length: f64,
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.class == DONT_CARE
    }
}

pub fn parse_labels_str(text: &str, path: Option<&Path>) -> Result<Vec<LabelRecord>, KittiError> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = Tokens::new(path, ln + 1, line);
        if tokens.len() != 15 && tokens.len() != 16 {
            return Err(tokens.error(
                1,
                format!("label line must have 15 or 16 fields, found {}", tokens.len()),
            ));
        }
        let (_, class) = tokens.next_str()?;
        let class = class.to_string();
        let truncated = tokens.next_f64()?;
        let (occ_col, occ_tok) = tokens.next_str()?;
        let occluded = occ_tok
            .parse::<f64>()
            .ok()
            .map(|v| v as i8)
            .ok_or_else(|| tokens.error(occ_col, format!("bad occlusion value {occ_tok:?}")))?;
        let alpha = tokens.next_f64()?;
        let bbox = [
            tokens.next_f64()?,
            tokens.next_f64()?,
            tokens.next_f64()?,
            tokens.next_f64()?,
        ];
        let height = tokens.next_f64()?;
        let width = tokens.next_f64()?;
        let length = tokens.next_f64()?;
        let location = [tokens.next_f64()?, tokens.next_f64()?, tokens.next_f64()?];
        let rotation_y = tokens.next_f64()?;
        let score = if tokens.next < tokens.len() {
            Some(tokens.next_f64()?)
        } else {
            None
        };
        let record = LabelRecord {
            class,
            truncated,
            occluded,
            alpha,
            bbox,
            height,
            width,
            length,
            location,
            rotation_y,
            score,
        };
        if !record.is_dont_care() {
            if record.height <= 0.0 || record.width <= 0.0 || record.length <= 0.0 {
                return Err(tokens.error(
                    1,
                    format!(
                        "non-{DONT_CARE} label must have positive dimensions, found ({}, {}, {})",
                        record.height, record.width, record.length
                    ),
                ));
            }
            if record.rotation_y.abs() > std::f64::consts::PI + 1e-6 {
                return Err(tokens.error(
                    1,
                    format!("rotation_y {} outside [-pi, pi]", record.rotation_y),
                ));
            }
        }
        out.push(record);
    }
    Ok(out)
}

pub fn parse_labels(path: &Path) -> Result<Vec<LabelRecord>, KittiError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_labels_str(&text, Some(path))
}

/// KITTI float formatting: %.2f for geometry, %.4f for the score (AP ranking
/// needs the extra resolution).
pub fn write_labels(records: &[LabelRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let _ = write!(
            out,
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            r.class,
            r.truncated,
            r.occluded,
            r.alpha,
            r.bbox[0],
            r.bbox[1],
            r.bbox[2],
            r.bbox[3],
            r.height,
            r.width,
            r.length,
            r.location[0],
            r.location[1],
            r.location[2],
            r.rotation_y
        );
        if let Some(score) = r.score {
            let _ = write!(out, " {score:.4}");
        }
        out.push('\n');
    }
    out
}

/// KITTI stores the bottom-face center; the engine state is the box center
/// (camera y points down, so the center sits half a height above).
pub fn label_to_pose(label: &LabelRecord) -> Result<ObjectPose, KittiError> {
    let size = crate::geom::BoxSize::new(label.height, label.width, label.length)?;
    Ok(ObjectPose::new(
        Vector3::new(
            label.location[0],
            label.location[1] - label.height / 2.0,
            label.location[2],
        ),
        label.rotation_y,
        size,
        vec![],
    ))
}

/// Inverse of [`label_to_pose`]: write the engine's box center back to a
/// bottom-face-center location.
pub fn pose_to_location(pose: &ObjectPose) -> [f64; 3] {
    [
        pose.t_c.x,
        pose.t_c.y + pose.size.height / 2.0,
        pose.t_c.z,
    ]
}

// ---------------------------------------------------------------------------
// Depth maps
// ---------------------------------------------------------------------------

/// 16-bit PNG depth: meters = stored / 256, stored 0 = invalid.
pub fn load_depth(path: &Path) -> Result<DepthMap, KittiError> {
    let img = image::open(path).map_err(|source| KittiError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let img16 = match img {
        image::DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(KittiError::BadImageFormat {
                path: path.to_path_buf(),
                expected: "16-bit grayscale PNG".into(),
                found: format!("{:?}", other.color()),
            })
        }
    };
    let (w, h) = img16.dimensions();
    let data: Vec<f64> = img16
        .pixels()
        .map(|p| {
            if p.0[0] == 0 {
                f64::INFINITY
            } else {
                p.0[0] as f64 / 256.0
            }
        })
        .collect();
    Ok(DepthMap::from_data(w, h, data))
}

pub fn save_depth(map: &DepthMap, path: &Path) -> Result<(), KittiError> {
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
        map.width,
        map.height,
        |x, y| {
            let v = match map.get(x, y) {
                Some(d) if d > 0.0 => {
                    let stored = (d * 256.0).round();
                    if stored > u16::MAX as f64 {
                        0
                    } else {
                        (stored as u16).max(1)
                    }
                }
                _ => 0,
            };
            image::Luma([v])
        },
    );
    img.save(path).map_err(|source| KittiError::Image {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// Instance masks
// ---------------------------------------------------------------------------

/// One binary instance mask, full image size.
#[derive(Debug, Clone)]
pub struct InstanceMask {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl InstanceMask {
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn pixel_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Per-frame mask set: one 8-bit PNG per instance (0 background, 255
/// foreground) plus an index file mapping instance id to detection row.
#[derive(Debug, Clone, Default)]
pub struct MaskSet {
    pub masks: Vec<InstanceMask>,
    /// (instance id, detection row in the frame's detections file).
    pub index: Vec<(u32, usize)>,
}

impl MaskSet {
    pub fn mask_for(&self, instance: u32) -> Option<&InstanceMask> {
        self.masks.iter().find(|m| m.id == instance)
    }

    pub fn instance_of_detection(&self, det_row: usize) -> Option<u32> {
        self.index
            .iter()
            .find(|(_, row)| *row == det_row)
            .map(|(id, _)| *id)
    }
}

fn mask_png_name(frame: usize, instance: u32) -> String {
    format!("{frame:06}_{instance:03}.png")
}

fn mask_index_name(frame: usize) -> String {
    format!("{frame:06}.txt")
}

/// Load the masks of one frame from `dir`. A missing index file means the
/// frame has no instances.
pub fn load_masks(dir: &Path, frame: usize) -> Result<MaskSet, KittiError> {
    let index_path = dir.join(mask_index_name(frame));
    if !index_path.exists() {
        return Ok(MaskSet::default());
    }
    let text = std::fs::read_to_string(&index_path).map_err(io_err(&index_path))?;
    let mut index = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = Tokens::new(Some(&index_path), ln + 1, line);
        if tokens.len() != 2 {
            return Err(tokens.error(1, "mask index line must be `<instance> <detection>`"));
        }
        let (col, tok) = tokens.next_str()?;
        let instance: u32 = tok
            .parse()
            .map_err(|_| tokens.error(col, format!("bad instance id {tok:?}")))?;
        let (col, tok) = tokens.next_str()?;
        let det: usize = tok
            .parse()
            .map_err(|_| tokens.error(col, format!("bad detection index {tok:?}")))?;
        index.push((instance, det));
    }
    let mut masks = Vec::with_capacity(index.len());
    for (instance, _) in &index {
        let path = dir.join(mask_png_name(frame, *instance));
        let img = image::open(&path).map_err(|source| KittiError::Image {
            path: path.clone(),
            source,
        })?;
        let img8 = match img {
            image::DynamicImage::ImageLuma8(img) => img,
            other => {
                return Err(KittiError::BadImageFormat {
                    path,
                    expected: "8-bit grayscale PNG".into(),
                    found: format!("{:?}", other.color()),
                })
            }
        };
        let (width, height) = img8.dimensions();
        masks.push(InstanceMask {
            id: *instance,
            width,
            height,
            data: img8.pixels().map(|p| p.0[0] >= 128).collect(),
        });
    }
    Ok(MaskSet { masks, index })
}

pub fn save_masks(dir: &Path, frame: usize, set: &MaskSet) -> Result<(), KittiError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut index_text = String::new();
    for (instance, det) in &set.index {
        let _ = writeln!(index_text, "{instance} {det}");
    }
    let index_path = dir.join(mask_index_name(frame));
    std::fs::write(&index_path, index_text).map_err(io_err(&index_path))?;
    for mask in &set.masks {
        let img = image::GrayImage::from_fn(mask.width, mask.height, |x, y| {
            image::Luma([if mask.get(x, y) { 255u8 } else { 0u8 }])
        });
        let path = dir.join(mask_png_name(frame, mask.id));
        img.save(&path).map_err(|source| KittiError::Image {
            path,
            source,
        })?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Plain pose files (SfM entry point and synthetic ego motion)
// ---------------------------------------------------------------------------

/// One camera-to-world transform per line as 12 row-major values of the 3x4
/// matrix (KITTI odometry layout).
pub fn parse_poses_str(text: &str, path: Option<&Path>) -> Result<Vec<Se3>, KittiError> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = Tokens::new(path, ln + 1, line);
        if tokens.len() != 12 {
            return Err(tokens.error(
                1,
                format!("pose line must have 12 values, found {}", tokens.len()),
            ));
        }
        let mut v = [0.0f64; 12];
        for slot in &mut v {
            *slot = tokens.next_f64()?;
        }
        let rot = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let se3 = Se3::new(rot, Vector3::new(v[3], v[7], v[11])).map_err(|e| {
            KittiError::Parse {
                path: path.map(Path::to_path_buf),
                line: ln + 1,
                column: 1,
                msg: format!("not a rigid transform: {e}"),
            }
        })?;
        out.push(se3);
    }
    Ok(out)
}

pub fn parse_poses(path: &Path) -> Result<Vec<Se3>, KittiError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_poses_str(&text, Some(path))
}

pub fn write_poses(poses: &[Se3]) -> String {
    let mut out = String::new();
    for g in poses {
        let r = g.rotation();
        let t = g.translation();
        let _ = writeln!(
            out,
            "{:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e} {:.12e}",
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t[0],
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t[1],
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t[2],
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const GOLDEN_CALIB: &str = "\
P0: 7.215377000000e+02 0.000000000000e+00 6.095593000000e+02 0.000000000000e+00 0.000000000000e+00 7.215377000000e+02 1.728540000000e+02 0.000000000000e+00 0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 0.000000000000e+00
P2: 7.215377000000e+02 0.000000000000e+00 6.095593000000e+02 4.485728000000e+01 0.000000000000e+00 7.215377000000e+02 1.728540000000e+02 2.163791000000e-01 0.000000000000e+00 0.000000000000e+00 1.000000000000e+00 2.745884000000e-03
R0_rect: 9.999239000000e-01 9.837760000000e-03 -7.445048000000e-03 -9.869795000000e-03 9.999421000000e-01 -4.278459000000e-03 7.402527000000e-03 4.351614000000e-03 9.999631000000e-01
Tr_velo_to_cam: 7.533745000000e-03 -9.999714000000e-01 -6.166020000000e-04 -4.069766000000e-03 1.480249000000e-02 7.280733000000e-04 -9.998902000000e-01 -7.631618000000e-02 9.998621000000e-01 7.523790000000e-03 1.480755000000e-02 -2.717806000000e-01
";

    #[test]
    fn golden_calib_intrinsics() {
        let calib = parse_calib_str(GOLDEN_CALIB, None).unwrap();
        let intr = calib.intrinsics(1242, 375).unwrap();
        assert_abs_diff_eq!(intr.fx, 721.5377, epsilon = 1e-9);
        assert_abs_diff_eq!(intr.fy, 721.5377, epsilon = 1e-9);
        assert_abs_diff_eq!(intr.cx, 609.5593, epsilon = 1e-9);
        assert_abs_diff_eq!(intr.cy, 172.854, epsilon = 1e-9);
    }

    #[test]
    fn calib_requires_p2() {
        let result = parse_calib_str("P0: 1 0 0 0 0 1 0 0 0 0 1 0\n", None);
        assert!(matches!(result, Err(KittiError::MissingKey { key, .. }) if key == "P2"));
    }

    #[test]
    fn calib_ignores_unknown_keys() {
        let text = format!("{GOLDEN_CALIB}Custom_key: 1 2 3\n");
        let calib = parse_calib_str(&text, None).unwrap();
        assert_eq!(calib.entries["Custom_key"], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn calib_reports_bad_token_position() {
        let err = parse_calib_str("P2: 1 2 x 4 5 6 7 8 9 10 11 12\n", None).unwrap_err();
        match err {
            KittiError::Parse { line, column, .. } => {
                assert_eq!(line, 1);
                assert_eq!(column, 9);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn calib_roundtrip_fixed_point() {
        let calib = parse_calib_str(GOLDEN_CALIB, None).unwrap();
        let once = write_calib(&calib);
        let twice = write_calib(&parse_calib_str(&once, None).unwrap());
        assert_eq!(once, twice);
    }

    fn oxts_line(lat: f64, lon: f64, alt: f64, roll: f64, pitch: f64, yaw: f64) -> String {
        let mut line = format!("{lat} {lon} {alt} {roll} {pitch} {yaw}");
        for _ in 0..24 {
            line.push_str(" 0.0");
        }
        line
    }

    #[test]
    fn oxts_identical_lines_give_identity_motion() {
        let text = format!(
            "{}\n{}\n",
            oxts_line(49.01, 8.43, 112.0, 0.01, 0.02, 0.5),
            oxts_line(49.01, 8.43, 112.0, 0.01, 0.02, 0.5)
        );
        let poses = parse_oxts(&text, None).unwrap();
        assert_eq!(poses.len(), 2);
        assert_abs_diff_eq!(
            poses[0].rotation(),
            &Matrix3::identity(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(poses[0].translation(), &Vector3::zeros(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            poses[1].rotation(),
            &Matrix3::identity(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(poses[1].translation(), &Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn oxts_pure_yaw_change_is_pure_rotation() {
        let text = format!(
            "{}\n{}\n",
            oxts_line(49.01, 8.43, 112.0, 0.0, 0.0, 0.3),
            oxts_line(49.01, 8.43, 112.0, 0.0, 0.0, 0.4)
        );
        let poses = parse_oxts(&text, None).unwrap();
        assert_abs_diff_eq!(poses[1].translation(), &Vector3::zeros(), epsilon = 1e-9);
        let angle = ((poses[1].rotation().trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos();
        assert_abs_diff_eq!(angle, 0.1, epsilon = 1e-9);
    }

    #[test]
    fn oxts_equator_arc_matches_geodesic_oracle() {
        // Straight east along the equator: Mercator x equals the great-circle
        // arc length exactly at lat 0; verify within 0.1%.
        let step_deg = 0.001;
        let n = 10;
        let text: String = (0..n)
            .map(|i| oxts_line(0.0, 8.0 + i as f64 * step_deg, 100.0, 0.0, 0.0, 0.0))
            .collect::<Vec<_>>()
            .join("\n");
        let poses = parse_oxts(&text, None).unwrap();
        for (i, pose) in poses.iter().enumerate() {
            let arc = EARTH_RADIUS_M * (i as f64 * step_deg).to_radians();
            let dist = pose.translation().norm();
            if i > 0 {
                assert!(
                    (dist - arc).abs() / arc < 1e-3,
                    "frame {i}: {dist} vs arc {arc}"
                );
            }
        }
    }

    #[test]
    fn oxts_rejects_wrong_field_count() {
        let err = parse_oxts("1 2 3\n", None).unwrap_err();
        match err {
            KittiError::Parse { line, msg, .. } => {
                assert_eq!(line, 1);
                assert!(msg.contains("30 fields"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn oxts_roundtrip_fixed_point() {
        let text = format!(
            "{}\n{}\n",
            oxts_line(49.01, 8.43, 112.0, 0.011, 0.022, 0.51),
            oxts_line(49.0101, 8.4302, 112.1, 0.012, 0.021, 0.52)
        );
        let records = parse_oxts_records(&text, None).unwrap();
        let once = write_oxts(&records);
        let twice = write_oxts(&parse_oxts_records(&once, None).unwrap());
        assert_eq!(once, twice);
    }

    const GOLDEN_LABEL: &str =
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n\
         DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n";

    #[test]
    fn golden_label_fields() {
        let labels = parse_labels_str(GOLDEN_LABEL, None).unwrap();
        assert_eq!(labels.len(), 2);
        let car = &labels[0];
        assert_eq!(car.class, "Car");
        assert_abs_diff_eq!(car.height, 1.65);
        assert_abs_diff_eq!(car.width, 1.67);
        assert_abs_diff_eq!(car.length, 3.64);
        assert_abs_diff_eq!(car.location[2], 46.70);
        assert_abs_diff_eq!(car.rotation_y, -1.59);
        assert_eq!(car.score, None);
        assert!(labels[1].is_dont_care());
    }

    #[test]
    fn label_roundtrip_fixed_point_and_dont_care_preserved() {
        let labels = parse_labels_str(GOLDEN_LABEL, None).unwrap();
        let once = write_labels(&labels);
        let labels2 = parse_labels_str(&once, None).unwrap();
        assert_eq!(labels, labels2);
        let twice = write_labels(&labels2);
        assert_eq!(once, twice);
        assert!(twice.contains("DontCare"));
    }

    #[test]
    fn label_score_roundtrip() {
        let mut labels = parse_labels_str(GOLDEN_LABEL, None).unwrap();
        labels[0].score = Some(0.87654321);
        let text = write_labels(&labels[..1]);
        assert!(text.trim_end().ends_with("0.8765"));
        let back = parse_labels_str(&text, None).unwrap();
        assert_abs_diff_eq!(back[0].score.unwrap(), 0.8765);
    }

    #[test]
    fn label_rejects_wrong_field_count() {
        assert!(matches!(
            parse_labels_str("Car 0.0 0 0.0 1 2 3 4\n", None),
            Err(KittiError::Parse { .. })
        ));
    }

    #[test]
    fn location_convention_bridges_bottom_center() {
        let labels = parse_labels_str(GOLDEN_LABEL, None).unwrap();
        let pose = label_to_pose(&labels[0]).unwrap();
        // h = 1.65: the box center sits 0.825 above (-y) the bottom center.
        assert_abs_diff_eq!(pose.t_c.y, 1.71 - 0.825, epsilon = 1e-12);
        let loc = pose_to_location(&pose);
        assert_abs_diff_eq!(loc[1], 1.71, epsilon = 1e-12);
        assert_abs_diff_eq!(loc[0], -0.65, epsilon = 1e-12);
    }

    #[test]
    fn depth_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.png");
        let mut map = DepthMap::new_invalid(64, 32);
        map.set(10, 10, 10.0);
        map.set(20, 5, 80.25);
        save_depth(&map, &path).unwrap();
        let loaded = load_depth(&path).unwrap();
        assert_eq!(loaded.get(0, 0), None);
        assert_abs_diff_eq!(loaded.get(10, 10).unwrap(), 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(loaded.get(20, 5).unwrap(), 80.25, epsilon = 1e-9);
    }

    #[test]
    fn depth_value_2560_is_ten_meters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(4, 4, |x, _| {
            image::Luma([if x == 0 { 0u16 } else { 2560 }])
        });
        img.save(&path).unwrap();
        let map = load_depth(&path).unwrap();
        assert_eq!(map.get(0, 0), None);
        assert_abs_diff_eq!(map.get(1, 0).unwrap(), 10.0);
    }

    #[test]
    fn depth_rejects_wrong_bit_depth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        image::GrayImage::new(4, 4).save(&path).unwrap();
        assert!(matches!(
            load_depth(&path),
            Err(KittiError::BadImageFormat { .. })
        ));
    }

    #[test]
    fn mask_set_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = vec![false; 32 * 16];
        data[5 * 32 + 7] = true;
        data[5 * 32 + 8] = true;
        let set = MaskSet {
            masks: vec![InstanceMask {
                id: 3,
                width: 32,
                height: 16,
                data,
            }],
            index: vec![(3, 0)],
        };
        save_masks(dir.path(), 12, &set).unwrap();
        let loaded = load_masks(dir.path(), 12).unwrap();
        assert_eq!(loaded.index, vec![(3, 0)]);
        let mask = loaded.mask_for(3).unwrap();
        assert!(mask.get(7, 5) && mask.get(8, 5));
        assert_eq!(mask.pixel_count(), 2);
        assert_eq!(loaded.instance_of_detection(0), Some(3));
        // Absent frame: empty set.
        assert!(load_masks(dir.path(), 99).unwrap().masks.is_empty());
    }

    #[test]
    fn pose_file_roundtrip() {
        let poses = vec![
            Se3::identity(),
            Se3::rot_y(0.2).compose(&Se3::from_translation(Vector3::new(1.0, 0.1, 5.0))),
        ];
        let once = write_poses(&poses);
        let parsed = parse_poses_str(&once, None).unwrap();
        assert_eq!(parsed.len(), 2);
        let twice = write_poses(&parsed);
        assert_eq!(once, twice);
        assert_abs_diff_eq!(
            parsed[1].translation(),
            poses[1].translation(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn pose_file_rejects_non_rigid() {
        let err = parse_poses_str("1 0 0 0 0 2 0 0 0 0 1 0\n", None).unwrap_err();
        assert!(matches!(err, KittiError::Parse { line: 1, .. }));
    }
}
