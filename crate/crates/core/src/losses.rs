//! The loss terms steering pose refinement: single-view and multi-view
//! silhouette cross-entropy, photometric consistency through the rendered
//! depth, depth-center alignment, and the vertical/size priors, each with
//! analytic gradients for the free variables (translation and size).
//!
//! Size gradients use (height, width, length) component order throughout.

use crate::geom::{warp_pose, CameraIntrinsics, ObjectPose, Point3d, Se3};
use crate::img::GrayImage;
use crate::render::{
    render_silhouette_cached, DepthMap, RenderConfig, RenderError, SilhouetteMap,
};
use crate::shape::{mesh_center, Mesh, ShapeSpace};
use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability clamp for the cross-entropy terms.
pub const BCE_EPS: f64 = 1e-6;
/// Smooth-L1 transition point for photometric residuals (intensity units).
pub const PHOTO_DELTA: f64 = 0.05;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("grid dimensions do not match: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("foreground and background masks overlap at {0} pixels")]
    OverlappingMasks(usize),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Shape(#[from] crate::shape::ShapeError),
}

/// Binary observation for the silhouette losses. Pixels may be neither
/// foreground nor background (other objects' pixels); those carry no signal
/// and are excluded from the mean.
#[derive(Debug, Clone)]
pub struct MaskObs {
    pub width: u32,
    pub height: u32,
    pub fg: Vec<bool>,
    pub bg: Vec<bool>,
}

impl MaskObs {
    pub fn new(width: u32, height: u32, fg: Vec<bool>, bg: Vec<bool>) -> Result<Self, LossError> {
        let n = width as usize * height as usize;
        if fg.len() != n || bg.len() != n {
            return Err(LossError::DimensionMismatch(
                width,
                height,
                (fg.len() / height.max(1) as usize) as u32,
                (bg.len() / width.max(1) as usize) as u32,
            ));
        }
        let overlap = fg.iter().zip(&bg).filter(|(&f, &b)| f && b).count();
        if overlap > 0 {
            return Err(LossError::OverlappingMasks(overlap));
        }
        Ok(Self {
            width,
            height,
            fg,
            bg,
        })
    }

    /// Foreground mask with everything else background.
    pub fn from_foreground(width: u32, height: u32, fg: Vec<bool>) -> Result<Self, LossError> {
        let bg = fg.iter().map(|&f| !f).collect();
        Self::new(width, height, fg, bg)
    }

    pub fn fg_count(&self) -> usize {
        self.fg.iter().filter(|&&b| b).count()
    }
}

/// Per-term weights of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub sil: f64,
    pub mv_sil: f64,
    pub depth: f64,
    pub photo: f64,
    pub size: f64,
    pub vertical: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sil: 1.0,
            mv_sil: 1.0,
            depth: 0.5,
            photo: 10.0,
            size: 0.5,
            vertical: 1.0,
        }
    }
}

/// Dataset statistics regularizing the optimization.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct Priors {
    /// Mean box size (height, width, length), meters.
    pub size_mean: [f64; 3],
    /// Camera-frame y of the ground plane (positive below the camera).
    pub y_plane: f64,
}

impl Default for Priors {
    fn default() -> Self {
        // KITTI car statistics.
        Self {
            size_mean: [1.53, 1.63, 3.88],
            y_plane: 1.65,
        }
    }
}

/// Value plus gradients of one term with respect to the free variables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermGrad {
    pub value: f64,
    pub grad_t: Vector3<f64>,
    /// (height, width, length) order.
    pub grad_size: Vector3<f64>,
}

impl TermGrad {
    pub fn zero() -> Self {
        Self {
            value: 0.0,
            grad_t: Vector3::zeros(),
            grad_size: Vector3::zeros(),
        }
    }
}

/// All term values, the weighted total, and its gradients.
#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub sil: f64,
    pub mv_sil: f64,
    pub photo: f64,
    pub depth_center: f64,
    pub vertical: f64,
    pub size: f64,
    pub total: f64,
    pub grad_t: [f64; 3],
    pub grad_size: [f64; 3],
    /// True when the depth term was gated off for this frame.
    pub depth_gated_off: bool,
    pub views_used: usize,
    pub views_skipped: usize,
    pub photo_pixels: usize,
}

/// Silhouette binary cross-entropy against an observed mask.
///
/// Mean over labeled pixels of `-log(p * fg + (1 - p) * bg)` with the log
/// argument clamped to `[eps, 1 - eps]`; also returns the per-pixel
/// cotangent consumed by [`crate::render::silhouette_vjp`].
pub fn sil_loss(sil: &SilhouetteMap, mask: &MaskObs) -> Result<(f64, Vec<f64>), LossError> {
    if sil.width != mask.width || sil.height != mask.height {
        return Err(LossError::DimensionMismatch(
            sil.width,
            sil.height,
            mask.width,
            mask.height,
        ));
    }
    let n = sil.data.len();
    let labeled = mask
        .fg
        .iter()
        .zip(&mask.bg)
        .filter(|(&f, &b)| f || b)
        .count();
    let mut cotangent = vec![0.0; n];
    if labeled == 0 {
        return Ok((0.0, cotangent));
    }
    let mut total = 0.0;
    for i in 0..n {
        let (is_fg, is_bg) = (mask.fg[i], mask.bg[i]);
        if !is_fg && !is_bg {
            continue;
        }
        let p = sil.data[i];
        let q = if is_fg { p } else { 1.0 - p };
        let clamped = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
        total -= clamped.ln();
        if (BCE_EPS..=1.0 - BCE_EPS).contains(&q) {
            // d(-ln q)/dp: q = p on fg, 1 - p on bg.
            let sign = if is_fg { -1.0 } else { 1.0 };
            cotangent[i] = sign / clamped / labeled as f64;
        }
    }
    Ok((total / labeled as f64, cotangent))
}

/// One target view for the multi-view losses.
#[derive(Debug, Clone)]
pub struct ViewObs<'a> {
    pub frame: usize,
    /// Ego motion, frame-i camera to this view's camera.
    pub g_ik: Se3,
    /// Object displacement in this view's camera coordinates.
    pub v: Vector3<f64>,
    pub mask: &'a MaskObs,
    pub intr: &'a CameraIntrinsics,
    pub cfg: RenderConfig,
    /// This view's image, for the photometric term.
    pub image: Option<&'a GrayImage>,
}

#[derive(Debug, Clone)]
pub struct MvSilResult {
    pub term: TermGrad,
    /// Views skipped because the warped object fell behind the camera.
    pub skipped: Vec<usize>,
}

/// Multi-view silhouette loss: render at the warped pose in every view and
/// sum the cross-entropies. Gradients flow back through the warp, whose
/// translation Jacobian is the ego rotation.
pub fn mv_sil_loss(
    mesh: &Mesh,
    pose_i: &ObjectPose,
    views: &[ViewObs],
    space: Option<&ShapeSpace>,
) -> Result<MvSilResult, LossError> {
    let mut term = TermGrad::zero();
    let mut skipped = Vec::new();
    for view in views {
        let pose_k = warp_pose(pose_i, &view.g_ik, &view.v);
        if pose_k.t_c.z <= view.cfg.near {
            skipped.push(view.frame);
            continue;
        }
        let rendered = render_silhouette_cached(mesh, &pose_k, view.intr, &view.cfg);
        if rendered.map.empty {
            skipped.push(view.frame);
            continue;
        }
        let (value, cotangent) = sil_loss(&rendered.map, view.mask)?;
        let grads = rendered.vjp(mesh, &pose_k, &cotangent, space)?;
        term.value += value;
        term.grad_t += view.g_ik.rotation().transpose() * grads.t_c;
        term.grad_size += grads.size;
    }
    Ok(MvSilResult { term, skipped })
}

#[derive(Debug, Clone)]
pub struct PhotoResult {
    pub term: TermGrad,
    /// Pixels that entered the mean, across views.
    pub pixels: usize,
    pub skipped: Vec<usize>,
}

fn smooth_l1(r: f64) -> (f64, f64) {
    if r.abs() <= PHOTO_DELTA {
        (r * r / (2.0 * PHOTO_DELTA), r / PHOTO_DELTA)
    } else {
        (r.abs() - PHOTO_DELTA / 2.0, r.signum())
    }
}

/// Photometric consistency: back-project every valid rendered-depth pixel
/// of frame i, warp it into each view, and compare intensities under
/// bilinear sampling with a smooth-L1 penalty, averaged per view over the
/// pixels that land inside the target image.
///
/// Returns the term (gradients via the depth channel) and leaves the
/// depth-render cotangent chain to the caller through
/// [`crate::render::depth_vjp`]: the second return value is that cotangent.
pub fn photo_loss(
    image_i: &GrayImage,
    depth_i: &DepthMap,
    cfg_i: &RenderConfig,
    intr_i: &CameraIntrinsics,
    views: &[ViewObs],
) -> Result<(PhotoResult, Vec<f64>), LossError> {
    if depth_i.width != cfg_i.width || depth_i.height != cfg_i.height {
        return Err(LossError::DimensionMismatch(
            depth_i.width,
            depth_i.height,
            cfg_i.width,
            cfg_i.height,
        ));
    }
    let npix = depth_i.raw().len();
    let mut cotangent = vec![0.0; npix];
    let mut result = PhotoResult {
        term: TermGrad::zero(),
        pixels: 0,
        skipped: Vec::new(),
    };
    for view in views {
        let Some(image_k) = view.image else {
            result.skipped.push(view.frame);
            continue;
        };
        // Collect residual contributions first; the mean needs the count.
        let mut contributions: Vec<(usize, f64, f64)> = Vec::new(); // (pix, rho, drho_dd)
        for iy in 0..cfg_i.height {
            for ix in 0..cfg_i.width {
                let pix = (iy * cfg_i.width + ix) as usize;
                let Some(depth) = depth_i.get(ix, iy) else {
                    continue;
                };
                let center_px = Vector2::new(
                    cfg_i.origin_x as f64 + ix as f64 + 0.5,
                    cfg_i.origin_y as f64 + iy as f64 + 0.5,
                );
                let ray = intr_i.ray(&center_px);
                let x_i = ray * depth;
                let x_k = view.g_ik.apply(&x_i) + view.v;
                if x_k.z <= 1e-6 {
                    continue;
                }
                let u = view.intr.fx * x_k.x / x_k.z + view.intr.cx;
                let vv = view.intr.fy * x_k.y / x_k.z + view.intr.cy;
                let Some((sampled, grad_img)) = image_k.sample_bilinear(&Vector2::new(u, vv))
                else {
                    continue;
                };
                // Intensity at the source pixel center is the pixel value.
                let (fx_full, fy_full) = (center_px.x as u32, center_px.y as u32);
                if fx_full >= image_i.width || fy_full >= image_i.height {
                    continue;
                }
                let residual = image_i.get(fx_full, fy_full) - sampled;
                let (rho, drho) = smooth_l1(residual);
                // d(residual)/dD = -grad_img . J_proj . R_ik . ray.
                let jproj = Matrix2x3::new(
                    view.intr.fx / x_k.z,
                    0.0,
                    -view.intr.fx * x_k.x / (x_k.z * x_k.z),
                    0.0,
                    view.intr.fy / x_k.z,
                    -view.intr.fy * x_k.y / (x_k.z * x_k.z),
                );
                let dxk_dd = view.g_ik.rotation() * ray;
                let dres_dd = -(grad_img.transpose() * jproj * dxk_dd)[0];
                contributions.push((pix, rho, drho * dres_dd));
            }
        }
        if contributions.is_empty() {
            result.skipped.push(view.frame);
            continue;
        }
        let n = contributions.len() as f64;
        let mut view_value = 0.0;
        for (pix, rho, dd) in contributions {
            view_value += rho;
            cotangent[pix] += dd / n;
        }
        result.term.value += view_value / n;
        result.pixels += n as usize;
    }
    Ok((result, cotangent))
}

/// Squared distance between the observed depth-cloud center and the posed
/// mesh's vertex mean.
pub fn depth_center_loss(
    p_bar: &Point3d,
    mesh: &Mesh,
    pose: &ObjectPose,
) -> Result<TermGrad, LossError> {
    let center_obj = mesh_center(mesh)?;
    let rot = crate::geom::yaw_matrix(pose.yaw);
    let center_cam = rot * center_obj + pose.t_c;
    let diff = center_cam - p_bar;
    let grad_center = 2.0 * diff;
    // d(center_cam)/d(size_axis) = R * (component of the object-frame mean
    // along that axis / scale), since decode scales per axis.
    let scale = pose.size.axis_scale();
    let g_obj = rot.transpose() * grad_center;
    Ok(TermGrad {
        value: diff.norm_squared(),
        grad_t: grad_center,
        grad_size: Vector3::new(
            g_obj.y * center_obj.y / scale.y,
            g_obj.x * center_obj.x / scale.x,
            g_obj.z * center_obj.z / scale.z,
        ),
    })
}

/// Ground-plane prior on the bottom-face center: `(y_bottom - y_plane)^2`
/// with `y_bottom = t_c.y + height / 2` (camera y points down).
pub fn vertical_loss(pose: &ObjectPose, priors: &Priors) -> TermGrad {
    let residual = pose.t_c.y + pose.size.height / 2.0 - priors.y_plane;
    TermGrad {
        value: residual * residual,
        grad_t: Vector3::new(0.0, 2.0 * residual, 0.0),
        grad_size: Vector3::new(residual, 0.0, 0.0),
    }
}

/// Size regularizer toward the dataset mean.
pub fn size_loss(pose: &ObjectPose, priors: &Priors) -> TermGrad {
    let diff = Vector3::new(
        pose.size.height - priors.size_mean[0],
        pose.size.width - priors.size_mean[1],
        pose.size.length - priors.size_mean[2],
    );
    TermGrad {
        value: diff.norm_squared(),
        grad_t: Vector3::zeros(),
        grad_size: 2.0 * diff,
    }
}

/// Weighted total. Terms gated off (None) contribute exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    sil: Option<&TermGrad>,
    mv_sil: Option<&TermGrad>,
    photo: Option<&TermGrad>,
    depth_center: Option<&TermGrad>,
    vertical: Option<&TermGrad>,
    size: Option<&TermGrad>,
    weights: &LossWeights,
) -> LossBreakdown {
    let zero = TermGrad::zero();
    let pick = |t: Option<&TermGrad>| *t.unwrap_or(&zero);
    let (s, m, p, d, v, z) = (
        pick(sil),
        pick(mv_sil),
        pick(photo),
        pick(depth_center),
        pick(vertical),
        pick(size),
    );
    let total = weights.sil * s.value
        + weights.mv_sil * m.value
        + weights.photo * p.value
        + weights.depth * d.value
        + weights.vertical * v.value
        + weights.size * z.value;
    let grad_t = weights.sil * s.grad_t
        + weights.mv_sil * m.grad_t
        + weights.photo * p.grad_t
        + weights.depth * d.grad_t
        + weights.vertical * v.grad_t
        + weights.size * z.grad_t;
    let grad_size = weights.sil * s.grad_size
        + weights.mv_sil * m.grad_size
        + weights.photo * p.grad_size
        + weights.depth * d.grad_size
        + weights.vertical * v.grad_size
        + weights.size * z.grad_size;
    LossBreakdown {
        sil: s.value,
        mv_sil: m.value,
        photo: p.value,
        depth_center: d.value,
        vertical: v.value,
        size: z.value,
        total,
        grad_t: grad_t.into(),
        grad_size: grad_size.into(),
        depth_gated_off: depth_center.is_none(),
        views_used: 0,
        views_skipped: 0,
        photo_pixels: 0,
    }
}
