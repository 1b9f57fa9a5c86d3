//! Differentiable rendering of a posed mesh: soft silhouette probability
//! maps and z-buffered depth maps, each with an analytic reverse-mode
//! gradient channel to translation, size, and shape embedding.
//!
//! Soft coverage follows the soft-aggregation formulation: a pixel at signed
//! squared distance d^2 from a face boundary (negative inside the face)
//! contributes a per-face probability `sigmoid(-sign * d^2 / sigma)` and the
//! silhouette aggregates faces as `1 - prod(1 - p_f)`. Distances live in
//! normalized device coordinates of the render target, `sigma` in NDC^2.
//!
//! Depth uses hard nearest-face assignment (one depth per pixel); gradients
//! flow through the ray/plane depth of the assigned face, not through pixel
//! selection. Faces are treated as double-sided.

use crate::geom::{CameraIntrinsics, ObjectPose};
use crate::shape::{Mesh, ShapeSpace};
use nalgebra::{Vector2, Vector3};
use thiserror::Error;

/// Soft-edge sharpness default, NDC^2 units.
pub const DEFAULT_SIGMA: f64 = 1e-4;

/// Per-face probability is neglected where it falls below ~1e-16, i.e.
/// beyond `MARGIN_SIGMAS * sqrt(sigma)` outside a face.
const MARGIN_SIGMAS: f64 = 6.0;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("invalid render config: {0}")]
    InvalidConfig(String),
    #[error("cotangent grid has {got} entries, render target has {expected}")]
    CotangentSize { got: usize, expected: usize },
}

/// Render target: either the full image or a pixel-aligned crop of it.
///
/// `origin` is the crop's top-left corner in full-image pixel coordinates;
/// projection always uses the full-image intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub origin_x: u32,
    pub origin_y: u32,
    pub sigma: f64,
    pub near: f64,
    pub far: f64,
}

impl RenderConfig {
    pub fn new(
        width: u32,
        height: u32,
        sigma: f64,
        near: f64,
        far: f64,
    ) -> Result<Self, RenderError> {
        Self::crop(0, 0, width, height, sigma, near, far)
    }

    pub fn crop(
        origin_x: u32,
        origin_y: u32,
        width: u32,
        height: u32,
        sigma: f64,
        near: f64,
        far: f64,
    ) -> Result<Self, RenderError> {
        if sigma <= 0.0 {
            return Err(RenderError::InvalidConfig(format!("sigma must be > 0, got {sigma}")));
        }
        if !(near > 0.0 && near < far) {
            return Err(RenderError::InvalidConfig(format!(
                "need 0 < near < far, got near={near}, far={far}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(RenderError::InvalidConfig("empty render target".into()));
        }
        Ok(Self {
            width,
            height,
            origin_x,
            origin_y,
            sigma,
            near,
            far,
        })
    }

    /// Full-image target with default sigma and generous clip planes.
    pub fn full(intr: &CameraIntrinsics) -> Self {
        Self {
            width: intr.width,
            height: intr.height,
            origin_x: 0,
            origin_y: 0,
            sigma: DEFAULT_SIGMA,
            near: 0.1,
            far: 300.0,
        }
    }

    fn npix(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// NDC units per pixel: the larger target dimension spans 2 NDC units.
    fn ndc_scale(&self) -> f64 {
        2.0 / self.width.max(self.height) as f64
    }

    /// Full-image pixel coordinates of a target pixel center.
    fn pixel_center(&self, ix: u32, iy: u32) -> Vector2<f64> {
        Vector2::new(
            self.origin_x as f64 + ix as f64 + 0.5,
            self.origin_y as f64 + iy as f64 + 0.5,
        )
    }

    fn to_ndc(&self, px: &Vector2<f64>) -> Vector2<f64> {
        let s = self.ndc_scale();
        Vector2::new(
            (px.x - (self.origin_x as f64 + self.width as f64 * 0.5)) * s,
            (px.y - (self.origin_y as f64 + self.height as f64 * 0.5)) * s,
        )
    }
}

/// Per-pixel coverage probability in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SilhouetteMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
    /// True when nothing was rasterized (mesh empty or behind the near plane).
    pub empty: bool,
}

impl SilhouetteMap {
    pub fn get(&self, ix: u32, iy: u32) -> f64 {
        self.data[(iy * self.width + ix) as usize]
    }

    /// Debug dump as an 8-bit grayscale PNG.
    pub fn save_png(&self, path: &std::path::Path) -> Result<(), image::ImageError> {
        let img = image::GrayImage::from_fn(self.width, self.height, |x, y| {
            image::Luma([(self.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8])
        });
        img.save(path)
    }
}

/// Per-pixel depth in meters; uncovered pixels are invalid.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    data: Vec<f64>,
    pub empty: bool,
}

impl DepthMap {
    pub fn new_invalid(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![f64::INFINITY; width as usize * height as usize],
            empty: true,
        }
    }

    pub fn from_data(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width as usize * height as usize);
        let empty = !data.iter().any(|d| d.is_finite());
        Self {
            width,
            height,
            data,
            empty,
        }
    }

    pub fn get(&self, ix: u32, iy: u32) -> Option<f64> {
        let d = self.data[(iy * self.width + ix) as usize];
        d.is_finite().then_some(d)
    }

    pub fn set(&mut self, ix: u32, iy: u32, depth: f64) {
        self.data[(iy * self.width + ix) as usize] = depth;
        self.empty = false;
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| d.is_finite()).count()
    }

    /// Debug dump as a 16-bit grayscale PNG, meters * 256, 0 = invalid.
    pub fn save_png(&self, path: &std::path::Path) -> Result<(), image::ImageError> {
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
            self.width,
            self.height,
            |x, y| {
                let v = match self.get(x, y) {
                    Some(d) if d * 256.0 <= u16::MAX as f64 && d > 0.0 => {
                        (d * 256.0).round().max(1.0) as u16
                    }
                    _ => 0,
                };
                image::Luma([v])
            },
        );
        img.save(path)
    }
}

/// Gradients of a scalar render functional with respect to the pose
/// translation, box size (height, width, length order), and embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub t_c: Vector3<f64>,
    pub size: Vector3<f64>,
    pub embedding: Vec<f64>,
}

impl RenderGrads {
    pub fn zeros(embedding_dim: usize) -> Self {
        Self {
            t_c: Vector3::zeros(),
            size: Vector3::zeros(),
            embedding: vec![0.0; embedding_dim],
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 36.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

struct PreparedFace {
    /// Camera-frame vertices.
    cam: [Vector3<f64>; 3],
    /// Mesh vertex indices, for gradient accumulation.
    idx: [usize; 3],
    /// Pixel-space bounding box (min x, min y, max x, max y), unexpanded.
    bbox: [f64; 4],
    /// Per-edge anchor, direction, and inverse squared length in NDC, for
    /// edges (0,1), (1,2), (2,0); precomputed once per render pass.
    edge_a: [Vector2<f64>; 3],
    edge_ab: [Vector2<f64>; 3],
    edge_inv_len2: [f64; 3],
}

impl PreparedFace {
    fn new(cam: [Vector3<f64>; 3], ndc: [Vector2<f64>; 3], idx: [usize; 3], bbox: [f64; 4]) -> Self {
        let mut edge_a = [Vector2::zeros(); 3];
        let mut edge_ab = [Vector2::zeros(); 3];
        let mut edge_inv_len2 = [0.0; 3];
        for (slot, (s, e)) in [(0usize, 1usize), (1, 2), (2, 0)].iter().enumerate() {
            let a = ndc[*s];
            let ab = ndc[*e] - a;
            let len2 = ab.norm_squared();
            edge_a[slot] = a;
            edge_ab[slot] = ab;
            edge_inv_len2[slot] = if len2 > 0.0 { 1.0 / len2 } else { 0.0 };
        }
        Self {
            cam,
            idx,
            bbox,
            edge_a,
            edge_ab,
            edge_inv_len2,
        }
    }
}

struct PosedMesh {
    cam_verts: Vec<Vector3<f64>>,
    faces: Vec<PreparedFace>,
}

fn pose_and_project(
    mesh: &Mesh,
    pose: &ObjectPose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> PosedMesh {
    let obj_to_cam = pose.to_camera();
    let cam_verts: Vec<Vector3<f64>> = mesh.vertices.iter().map(|v| obj_to_cam.apply(v)).collect();
    let mut faces = Vec::with_capacity(mesh.faces.len());
    for f in &mesh.faces {
        let idx = [f[0] as usize, f[1] as usize, f[2] as usize];
        let cam = [cam_verts[idx[0]], cam_verts[idx[1]], cam_verts[idx[2]]];
        // Faces reaching past the near plane are dropped rather than clipped;
        // object meshes span a small depth range.
        if cam.iter().any(|p| p.z <= cfg.near) {
            continue;
        }
        let px: Vec<Vector2<f64>> = cam
            .iter()
            .map(|p| Vector2::new(intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy))
            .collect();
        let bbox = [
            px.iter().map(|p| p.x).fold(f64::INFINITY, f64::min),
            px.iter().map(|p| p.y).fold(f64::INFINITY, f64::min),
            px.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max),
            px.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max),
        ];
        faces.push(PreparedFace::new(
            cam,
            [cfg.to_ndc(&px[0]), cfg.to_ndc(&px[1]), cfg.to_ndc(&px[2])],
            idx,
            bbox,
        ));
    }
    PosedMesh { cam_verts, faces }
}

/// Target-pixel index range covered by a pixel-space bbox plus margin.
fn pixel_range(cfg: &RenderConfig, bbox: &[f64; 4], margin_px: f64) -> Option<[u32; 4]> {
    let x0 = (bbox[0] - margin_px - cfg.origin_x as f64 - 0.5).floor().max(0.0);
    let y0 = (bbox[1] - margin_px - cfg.origin_y as f64 - 0.5).floor().max(0.0);
    let x1 = (bbox[2] + margin_px - cfg.origin_x as f64 + 0.5).ceil();
    let y1 = (bbox[3] + margin_px - cfg.origin_y as f64 + 0.5).ceil();
    if x1 < 0.0 || y1 < 0.0 || x0 >= cfg.width as f64 || y0 >= cfg.height as f64 {
        return None;
    }
    Some([
        x0 as u32,
        y0 as u32,
        (x1 as u32).min(cfg.width - 1),
        (y1 as u32).min(cfg.height - 1),
    ])
}

/// Signed squared distance of `q` to triangle `(a, b, c)` in the plane:
/// squared distance to the nearest boundary edge, with `inside` true when
/// `q` lies within the triangle (either winding).
struct PlaneDistance {
    d2: f64,
    inside: bool,
    /// Argmin edge as local vertex indices (start, end).
    edge: (usize, usize),
    /// Segment parameter of the closest point on that edge.
    t: f64,
    /// `q - closest`, needed for gradients.
    r: Vector2<f64>,
}

const EDGE_VERTS: [(usize, usize); 3] = [(0, 1), (1, 2), (2, 0)];

fn signed_distance(q: &Vector2<f64>, face: &PreparedFace) -> PlaneDistance {
    let mut all_nonneg = true;
    let mut all_nonpos = true;
    let mut best = PlaneDistance {
        d2: f64::INFINITY,
        inside: false,
        edge: (0, 1),
        t: 0.0,
        r: Vector2::zeros(),
    };
    for slot in 0..3 {
        let a = face.edge_a[slot];
        let ab = face.edge_ab[slot];
        let w = q - a;
        let cross = ab.x * w.y - ab.y * w.x;
        all_nonneg &= cross >= 0.0;
        all_nonpos &= cross <= 0.0;
        let t = (w.dot(&ab) * face.edge_inv_len2[slot]).clamp(0.0, 1.0);
        let r = w - ab * t;
        let d2 = r.norm_squared();
        if d2 < best.d2 {
            best.d2 = d2;
            best.edge = EDGE_VERTS[slot];
            best.t = t;
            best.r = r;
        }
    }
    best.inside = all_nonneg || all_nonpos;
    best
}

/// Silhouette forward pass with the intermediates the gradient pass reuses:
/// the per-pixel log-miss accumulator `L = sum_f log(1 - p_f)` and the
/// projected faces.
pub struct SilhouetteRender {
    pub map: SilhouetteMap,
    log_miss: Vec<f64>,
    posed: PosedMesh,
    cfg: RenderConfig,
    intr: CameraIntrinsics,
}

/// Render the soft silhouette keeping the forward intermediates, so a
/// following [`SilhouetteRender::vjp`] call costs one pass instead of two.
pub fn render_silhouette_cached(
    mesh: &Mesh,
    pose: &ObjectPose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> SilhouetteRender {
    let posed = pose_and_project(mesh, pose, intr, cfg);
    let mut log_miss = vec![0.0f64; cfg.npix()];
    let margin_d2 = (MARGIN_SIGMAS * cfg.sigma.sqrt()).powi(2);
    let margin_px = MARGIN_SIGMAS * cfg.sigma.sqrt() / cfg.ndc_scale();
    for face in &posed.faces {
        let Some([x0, y0, x1, y1]) = pixel_range(cfg, &face.bbox, margin_px) else {
            continue;
        };
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let q = cfg.to_ndc(&cfg.pixel_center(ix, iy));
                let dist = signed_distance(&q, face);
                // Beyond the margin the per-face probability is below 2e-16.
                if !dist.inside && dist.d2 >= margin_d2 {
                    continue;
                }
                let z = if dist.inside { dist.d2 } else { -dist.d2 } / cfg.sigma;
                log_miss[(iy * cfg.width + ix) as usize] -= softplus(z);
            }
        }
    }
    let data: Vec<f64> = log_miss.iter().map(|l| -l.exp_m1()).collect();
    let empty = posed.faces.is_empty();
    SilhouetteRender {
        map: SilhouetteMap {
            width: cfg.width,
            height: cfg.height,
            data,
            empty,
        },
        log_miss,
        posed,
        cfg: *cfg,
        intr: *intr,
    }
}

/// Soft silhouette render: per-pixel probability that the pixel is covered
/// by the mesh surface.
pub fn render_silhouette(
    mesh: &Mesh,
    pose: &ObjectPose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> SilhouetteMap {
    render_silhouette_cached(mesh, pose, intr, cfg).map
}

/// Chain per-camera-vertex gradients back to pose translation, size, and
/// embedding. `grad_cam[v]` is the gradient with respect to the camera-frame
/// position of mesh vertex v.
fn chain_vertex_grads(
    grad_cam: &[Vector3<f64>],
    mesh: &Mesh,
    pose: &ObjectPose,
    space: Option<&ShapeSpace>,
) -> RenderGrads {
    let rot = crate::geom::yaw_matrix(pose.yaw);
    let rot_t = rot.transpose();
    let scale = pose.size.axis_scale();
    let dim = space.map_or(0, |s| s.dim());
    let mut out = RenderGrads::zeros(dim);
    for (v, g) in grad_cam.iter().enumerate() {
        out.t_c += g;
        let g_obj = rot_t * g;
        let vert = mesh.vertices[v];
        // vert = scale .* unit, so d(vert)/d(scale_axis) = vert / scale_axis.
        out.size.x += g_obj.y * vert.y / scale.y; // height scales y
        out.size.y += g_obj.x * vert.x / scale.x; // width scales x
        out.size.z += g_obj.z * vert.z / scale.z; // length scales z
        if let Some(sp) = space {
            for (j, component) in sp.basis().iter().enumerate() {
                out.embedding[j] += g_obj.dot(&component[v].component_mul(&scale));
            }
        }
    }
    out
}

impl SilhouetteRender {
    /// Reverse-mode gradient of `sum_px cotangent * silhouette` with respect
    /// to pose translation, size, and (when `space` is given) the shape
    /// embedding. `mesh` and `pose` must be the ones this render came from.
    pub fn vjp(
        &self,
        mesh: &Mesh,
        pose: &ObjectPose,
        cotangent: &[f64],
        space: Option<&ShapeSpace>,
    ) -> Result<RenderGrads, RenderError> {
        let cfg = &self.cfg;
        if cotangent.len() != cfg.npix() {
            return Err(RenderError::CotangentSize {
                got: cotangent.len(),
                expected: cfg.npix(),
            });
        }
        let mut grad_ndc = vec![Vector2::<f64>::zeros(); mesh.vertices.len()];
        let margin_d2 = (MARGIN_SIGMAS * cfg.sigma.sqrt()).powi(2);
        let margin_px = MARGIN_SIGMAS * cfg.sigma.sqrt() / cfg.ndc_scale();
        for face in &self.posed.faces {
            let Some([x0, y0, x1, y1]) = pixel_range(cfg, &face.bbox, margin_px) else {
                continue;
            };
            for iy in y0..=y1 {
                for ix in x0..=x1 {
                    let pix = (iy * cfg.width + ix) as usize;
                    let cot = cotangent[pix];
                    if cot == 0.0 {
                        continue;
                    }
                    // Saturated interior: the chain factor exp(log_miss)
                    // underflows to zero, no face can contribute gradient.
                    if self.log_miss[pix] < -40.0 {
                        continue;
                    }
                    let q = cfg.to_ndc(&cfg.pixel_center(ix, iy));
                    let dist = signed_distance(&q, face);
                    if !dist.inside && dist.d2 >= margin_d2 {
                        continue;
                    }
                    let sgn = if dist.inside { -1.0 } else { 1.0 };
                    let z = -sgn * dist.d2 / cfg.sigma;
                    // dS/dz = (1 - S) * p_f = exp(log_miss) * sigmoid(z).
                    let ds_dz = self.log_miss[pix].exp() * sigmoid(z);
                    let c_d2 = cot * ds_dz * (-sgn / cfg.sigma);
                    // Envelope theorem on the closest point: with
                    // r = q - closest, d(d^2)/da = -2(1-t) r and
                    // d(d^2)/db = -2t r.
                    let (s, e) = dist.edge;
                    grad_ndc[face.idx[s]] += dist.r * (-2.0 * (1.0 - dist.t) * c_d2);
                    grad_ndc[face.idx[e]] += dist.r * (-2.0 * dist.t * c_d2);
                }
            }
        }
        // NDC -> camera-frame chain through the projection.
        let ndc_s = cfg.ndc_scale();
        let mut grad_cam = vec![Vector3::<f64>::zeros(); mesh.vertices.len()];
        for (v, g2) in grad_ndc.iter().enumerate() {
            if g2.x == 0.0 && g2.y == 0.0 {
                continue;
            }
            let p = self.posed.cam_verts[v];
            if p.z <= cfg.near {
                continue;
            }
            let gx = g2.x * ndc_s * self.intr.fx;
            let gy = g2.y * ndc_s * self.intr.fy;
            grad_cam[v] = Vector3::new(
                gx / p.z,
                gy / p.z,
                -(gx * p.x + gy * p.y) / (p.z * p.z),
            );
        }
        Ok(chain_vertex_grads(&grad_cam, mesh, pose, space))
    }
}

/// One-shot convenience over [`render_silhouette_cached`] + its `vjp`.
pub fn silhouette_vjp(
    mesh: &Mesh,
    pose: &ObjectPose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
    cotangent: &[f64],
    space: Option<&ShapeSpace>,
) -> Result<RenderGrads, RenderError> {
    render_silhouette_cached(mesh, pose, intr, cfg).vjp(mesh, pose, cotangent, space)
}

/// Per-pixel nearest-face assignment from a depth pass.
struct DepthAssignment {
    depth: Vec<f64>,
    face: Vec<i32>,
}

fn depth_forward(
    posed: &PosedMesh,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> DepthAssignment {
    let mut depth = vec![f64::INFINITY; cfg.npix()];
    let mut face_of = vec![-1i32; cfg.npix()];
    for (fi, face) in posed.faces.iter().enumerate() {
        let Some([x0, y0, x1, y1]) = pixel_range(cfg, &face.bbox, 0.0) else {
            continue;
        };
        let normal = (face.cam[1] - face.cam[0]).cross(&(face.cam[2] - face.cam[0]));
        let k = normal.dot(&face.cam[0]);
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let q = cfg.to_ndc(&cfg.pixel_center(ix, iy));
                if !signed_distance(&q, face).inside {
                    continue;
                }
                let center = cfg.pixel_center(ix, iy);
                let ray = intr.ray(&center);
                let m = normal.dot(&ray);
                if m.abs() < 1e-12 {
                    continue;
                }
                let z = k / m;
                if z < cfg.near || z > cfg.far {
                    continue;
                }
                let pix = (iy * cfg.width + ix) as usize;
                if z < depth[pix] {
                    depth[pix] = z;
                    face_of[pix] = fi as i32;
                }
            }
        }
    }
    DepthAssignment {
        depth,
        face: face_of,
    }
}

/// Depth forward pass with per-pixel face assignment kept for the gradient
/// pass.
pub struct DepthRender {
    pub map: DepthMap,
    assignment: DepthAssignment,
    posed: PosedMesh,
    cfg: RenderConfig,
    intr: CameraIntrinsics,
}

/// Render depth keeping the forward intermediates for a following
/// [`DepthRender::vjp`] call.
pub fn render_depth_cached(
    mesh: &Mesh,
    pose: &ObjectPose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> DepthRender {
    let posed = pose_and_project(mesh, pose, intr, cfg);
    let assignment = depth_forward(&posed, intr, cfg);
    let mut map = DepthMap::from_data(cfg.width, cfg.height, assignment.depth.clone());
    map.empty |= posed.faces.is_empty();
    DepthRender {
        map,
        assignment,
        posed,
        cfg: *cfg,
        intr: *intr,
    }
}

/// Z-buffered depth render; covered pixels carry the nearest surface depth
/// (exact ray/plane intersection, equivalent to perspective-correct
/// barycentric interpolation), uncovered pixels are invalid.
pub fn render_depth(
    mesh: &Mesh,
    pose: &ObjectPose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> DepthMap {
    render_depth_cached(mesh, pose, intr, cfg).map
}

impl DepthRender {
    /// Reverse-mode gradient of `sum_px cotangent * depth` with respect to
    /// pose translation, size, and embedding. Pixel selection is held fixed;
    /// only the assigned face's ray/plane depth is differentiated.
    pub fn vjp(
        &self,
        mesh: &Mesh,
        pose: &ObjectPose,
        cotangent: &[f64],
        space: Option<&ShapeSpace>,
    ) -> Result<RenderGrads, RenderError> {
        let cfg = &self.cfg;
        if cotangent.len() != cfg.npix() {
            return Err(RenderError::CotangentSize {
                got: cotangent.len(),
                expected: cfg.npix(),
            });
        }
        let mut grad_cam = vec![Vector3::<f64>::zeros(); mesh.vertices.len()];
        for iy in 0..cfg.height {
            for ix in 0..cfg.width {
                let pix = (iy * cfg.width + ix) as usize;
                let fi = self.assignment.face[pix];
                if fi < 0 {
                    continue;
                }
                let cot = cotangent[pix];
                if cot == 0.0 {
                    continue;
                }
                let face = &self.posed.faces[fi as usize];
                let ray = self.intr.ray(&cfg.pixel_center(ix, iy));
                let e1 = face.cam[1] - face.cam[0];
                let e2 = face.cam[2] - face.cam[0];
                let normal = e1.cross(&e2);
                let m = normal.dot(&ray);
                if m.abs() < 1e-12 {
                    continue;
                }
                let d = normal.dot(&face.cam[0]) / m;
                // D = (n . P0) / (n . r) with n = e1 x e2:
                //   dD = (dn . P0 + n . dP0) / m - (D / m) (dn . r)
                // so the cotangent on n is gn and on P0 directly n/m.
                let gn = (face.cam[0] / m - ray * (d / m)) * cot;
                let g_p0_direct = normal * (cot / m);
                // dn = dP0 x (e1 - e2) + dP1 x e2 + e1 x dP2.
                grad_cam[face.idx[0]] += (e1 - e2).cross(&gn) + g_p0_direct;
                grad_cam[face.idx[1]] += e2.cross(&gn);
                grad_cam[face.idx[2]] += gn.cross(&e1);
            }
        }
        Ok(chain_vertex_grads(&grad_cam, mesh, pose, space))
    }
}

/// One-shot convenience over [`render_depth_cached`] + its `vjp`.
pub fn depth_vjp(
    mesh: &Mesh,
    pose: &ObjectPose,
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
    cotangent: &[f64],
    space: Option<&ShapeSpace>,
) -> Result<RenderGrads, RenderError> {
    render_depth_cached(mesh, pose, intr, cfg).vjp(mesh, pose, cotangent, space)
}

/// Hard multi-object rasterization: per-pixel nearest instance id (0 = none)
/// and combined z-buffer. Used by the synthetic data generator and as the
/// hard-coverage oracle for the soft silhouette.
pub fn rasterize_instances(
    objects: &[(u32, &Mesh, &ObjectPose)],
    intr: &CameraIntrinsics,
    cfg: &RenderConfig,
) -> (Vec<u32>, DepthMap) {
    let mut instance = vec![0u32; cfg.npix()];
    let mut depth = vec![f64::INFINITY; cfg.npix()];
    for (id, mesh, pose) in objects {
        assert!(*id != 0, "instance id 0 is reserved for background");
        let posed = pose_and_project(mesh, pose, intr, cfg);
        let assignment = depth_forward(&posed, intr, cfg);
        for pix in 0..cfg.npix() {
            if assignment.depth[pix] < depth[pix] {
                depth[pix] = assignment.depth[pix];
                instance[pix] = *id;
            }
        }
    }
    (instance, DepthMap::from_data(cfg.width, cfg.height, depth))
}
