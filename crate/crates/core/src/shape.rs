//! Low-dimensional shape space: decode an embedding into an object-frame
//! triangle mesh, with a unit-cuboid fallback when no basis asset is given.
//!
//! The mean shape lives in a unit bounding box `[-0.5, 0.5]^3` centered at
//! the origin; `decode` scales it per axis by the metric box size
//! (height to y, width to x, length to z).

use crate::geom::{BoxSize, Point3d};
use nalgebra::Vector3;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("embedding has {got} coefficients, shape space expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("face {face} references vertex {index}, mesh has {count}")]
    FaceIndexOutOfRange { face: usize, index: u32, count: usize },
    #[error("mesh has no vertices")]
    EmptyMesh,
    #[error("face {0} is degenerate (zero area)")]
    DegenerateFace(usize),
    #[error("mean shape bounding box is not the unit box (max deviation {0:.3e})")]
    NotUnitBox(f64),
    #[error("shape asset: {0}")]
    Asset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Triangle mesh in the object frame, vertices in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3d>,
    pub faces: Vec<[u32; 3]>,
}

impl Mesh {
    /// Arithmetic mean of the vertices.
    pub fn center(&self) -> Result<Point3d, ShapeError> {
        mesh_center(self)
    }
}

/// Arithmetic mean of the mesh vertices (constant Jacobian 1/N per vertex).
pub fn mesh_center(m: &Mesh) -> Result<Point3d, ShapeError> {
    if m.vertices.is_empty() {
        return Err(ShapeError::EmptyMesh);
    }
    let sum: Vector3<f64> = m.vertices.iter().sum();
    Ok(sum / m.vertices.len() as f64)
}

/// PCA-style linear shape space over a normalized mean mesh.
#[derive(Debug, Clone)]
pub struct ShapeSpace {
    mean_vertices: Vec<Vector3<f64>>,
    basis: Vec<Vec<Vector3<f64>>>,
    faces: Vec<[u32; 3]>,
}

impl ShapeSpace {
    pub fn new(
        mean_vertices: Vec<Vector3<f64>>,
        basis: Vec<Vec<Vector3<f64>>>,
        faces: Vec<[u32; 3]>,
    ) -> Result<Self, ShapeError> {
        if mean_vertices.is_empty() {
            return Err(ShapeError::EmptyMesh);
        }
        let n = mean_vertices.len();
        for (j, component) in basis.iter().enumerate() {
            if component.len() != n {
                return Err(ShapeError::Asset(format!(
                    "basis component {j} has {} vertices, mean has {n}",
                    component.len()
                )));
            }
        }
        for (fi, f) in faces.iter().enumerate() {
            for &idx in f {
                if idx as usize >= n {
                    return Err(ShapeError::FaceIndexOutOfRange {
                        face: fi,
                        index: idx,
                        count: n,
                    });
                }
            }
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &mean_vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        let dev = (lo + Vector3::repeat(0.5))
            .abs()
            .max()
            .max((hi - Vector3::repeat(0.5)).abs().max());
        if dev > 1e-6 {
            return Err(ShapeError::NotUnitBox(dev));
        }
        Ok(Self {
            mean_vertices,
            basis,
            faces,
        })
    }

    /// Embedding dimensionality.
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn mean_vertices(&self) -> &[Vector3<f64>] {
        &self.mean_vertices
    }

    pub fn basis(&self) -> &[Vec<Vector3<f64>>] {
        &self.basis
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    /// Decode `mean + sum_j e_j * basis_j`, then scale per axis by `size`.
    /// Linear in both the embedding and the size.
    pub fn decode(&self, e: &[f64], size: &BoxSize) -> Result<Mesh, ShapeError> {
        if e.len() != self.dim() {
            return Err(ShapeError::DimensionMismatch {
                got: e.len(),
                expected: self.dim(),
            });
        }
        let scale = size.axis_scale();
        let mut vertices = Vec::with_capacity(self.mean_vertices.len());
        for (i, mean) in self.mean_vertices.iter().enumerate() {
            let mut v = *mean;
            for (coeff, component) in e.iter().zip(&self.basis) {
                v += component[i] * *coeff;
            }
            vertices.push(v.component_mul(&scale));
        }
        let mesh = Mesh {
            vertices,
            faces: self.faces.clone(),
        };
        for (fi, f) in mesh.faces.iter().enumerate() {
            let a = mesh.vertices[f[0] as usize];
            let b = mesh.vertices[f[1] as usize];
            let c = mesh.vertices[f[2] as usize];
            if (b - a).cross(&(c - a)).norm() <= 1e-12 {
                return Err(ShapeError::DegenerateFace(fi));
            }
        }
        Ok(mesh)
    }

    /// Write the space to the binary asset format.
    ///
    /// Layout (all little-endian): magic `SHSP`, u32 version = 1,
    /// u32 counts (N vertices, M faces, d components), N*3 f32 mean
    /// vertices, d*N*3 f32 basis components, M*3 u32 face indices.
    pub fn save(&self, path: &Path) -> Result<(), ShapeError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"SHSP");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&(self.mean_vertices.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.faces.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.basis.len() as u32).to_le_bytes());
        let push_vertices = |buf: &mut Vec<u8>, verts: &[Vector3<f64>]| {
            for v in verts {
                for c in 0..3 {
                    buf.extend_from_slice(&(v[c] as f32).to_le_bytes());
                }
            }
        };
        push_vertices(&mut buf, &self.mean_vertices);
        for component in &self.basis {
            push_vertices(&mut buf, component);
        }
        for f in &self.faces {
            for &idx in f {
                buf.extend_from_slice(&idx.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ShapeError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], ShapeError> {
            if *off + n > bytes.len() {
                return Err(ShapeError::Asset("truncated asset file".into()));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 4)? != b"SHSP" {
            return Err(ShapeError::Asset("bad magic, expected SHSP".into()));
        }
        let read_u32 = |off: &mut usize| -> Result<u32, ShapeError> {
            let s = take(off, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };
        let version = read_u32(&mut off)?;
        if version != 1 {
            return Err(ShapeError::Asset(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut off)? as usize;
        let m = read_u32(&mut off)? as usize;
        let d = read_u32(&mut off)? as usize;
        let read_vertices = |off: &mut usize| -> Result<Vec<Vector3<f64>>, ShapeError> {
            let mut verts = Vec::with_capacity(n);
            for _ in 0..n {
                let mut v = Vector3::zeros();
                for c in 0..3 {
                    let s = take(off, 4)?;
                    v[c] = f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64;
                }
                verts.push(v);
            }
            Ok(verts)
        };
        let mean = read_vertices(&mut off)?;
        let mut basis = Vec::with_capacity(d);
        for _ in 0..d {
            basis.push(read_vertices(&mut off)?);
        }
        let mut faces = Vec::with_capacity(m);
        for _ in 0..m {
            let mut f = [0u32; 3];
            for idx in &mut f {
                let s = take(&mut off, 4)?;
                *idx = u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
            }
            faces.push(f);
        }
        if off != bytes.len() {
            return Err(ShapeError::Asset("trailing bytes in asset file".into()));
        }
        Self::new(mean, basis, faces)
    }
}

/// Fallback shape space: an 8-vertex, 12-face unit box with d = 0.
///
/// Faces wind counter-clockwise seen from outside.
pub fn cuboid_space() -> ShapeSpace {
    let h = 0.5;
    let vertices = vec![
        Vector3::new(-h, -h, -h),
        Vector3::new(h, -h, -h),
        Vector3::new(h, h, -h),
        Vector3::new(-h, h, -h),
        Vector3::new(-h, -h, h),
        Vector3::new(h, -h, h),
        Vector3::new(h, h, h),
        Vector3::new(-h, h, h),
    ];
    // y points down, so "outward" is chosen by signed volume, checked in tests.
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [2, 3, 7],
        [2, 7, 6],
        [1, 2, 6],
        [1, 6, 5],
        [0, 4, 7],
        [0, 7, 3],
    ];
    ShapeSpace::new(vertices, Vec::new(), faces).expect("unit cuboid is a valid shape space")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cube_size(h: f64, w: f64, l: f64) -> BoxSize {
        BoxSize::new(h, w, l).unwrap()
    }

    /// Signed volume of a closed mesh; positive when faces point outward
    /// under the divergence theorem (right-handed coordinates).
    fn signed_volume(m: &Mesh) -> f64 {
        m.faces
            .iter()
            .map(|f| {
                let a = m.vertices[f[0] as usize];
                let b = m.vertices[f[1] as usize];
                let c = m.vertices[f[2] as usize];
                a.dot(&b.cross(&c)) / 6.0
            })
            .sum()
    }

    #[test]
    fn cuboid_decode_extents() {
        let space = cuboid_space();
        let mesh = space.decode(&[], &cube_size(1.5, 1.6, 3.9)).unwrap();
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &mesh.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        assert_abs_diff_eq!(hi - lo, Vector3::new(1.6, 1.5, 3.9), epsilon = 1e-12);
    }

    #[test]
    fn cuboid_volume_is_product_of_extents() {
        let space = cuboid_space();
        let mesh = space.decode(&[], &cube_size(2.0, 3.0, 4.0)).unwrap();
        assert_abs_diff_eq!(signed_volume(&mesh).abs(), 24.0, epsilon = 1e-9);
    }

    #[test]
    fn cuboid_faces_consistently_oriented() {
        let space = cuboid_space();
        let mesh = space.decode(&[], &cube_size(2.0, 2.0, 2.0)).unwrap();
        let vol = signed_volume(&mesh);
        assert_abs_diff_eq!(vol, 8.0, epsilon = 1e-9);
        // Every individual face must contribute with the same orientation:
        // flipping any one face changes the total volume.
        for fi in 0..mesh.faces.len() {
            let mut flipped = mesh.clone();
            flipped.faces[fi].swap(1, 2);
            assert!(signed_volume(&flipped) < vol - 1e-9, "face {fi} inconsistent");
        }
    }

    #[test]
    fn decode_zero_embedding_is_scaled_mean() {
        let space = cuboid_space();
        let mesh = space.decode(&[], &cube_size(2.0, 2.0, 2.0)).unwrap();
        for (v, m) in mesh.vertices.iter().zip(space.mean_vertices()) {
            assert_abs_diff_eq!(*v, m * 2.0, epsilon = 1e-12);
        }
    }

    fn two_component_space() -> ShapeSpace {
        let base = cuboid_space();
        let d1: Vec<Vector3<f64>> = base
            .mean_vertices()
            .iter()
            .map(|v| Vector3::new(v.x * 0.1, 0.0, v.z * 0.05))
            .collect();
        let d2: Vec<Vector3<f64>> = base
            .mean_vertices()
            .iter()
            .map(|v| Vector3::new(0.0, v.y * 0.08, 0.0))
            .collect();
        ShapeSpace::new(base.mean_vertices().to_vec(), vec![d1, d2], base.faces().to_vec())
            .unwrap()
    }

    #[test]
    fn decode_matches_linear_algebra_oracle() {
        let space = two_component_space();
        let size = cube_size(1.5, 1.6, 3.9);
        let e = [2.0, 0.0];
        let mesh = space.decode(&e, &size).unwrap();
        let scale = size.axis_scale();
        for (i, v) in mesh.vertices.iter().enumerate() {
            let expected =
                (space.mean_vertices()[i] + space.basis()[0][i] * 2.0).component_mul(&scale);
            assert_abs_diff_eq!(*v, expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn decode_dimension_mismatch() {
        let space = cuboid_space();
        assert!(matches!(
            space.decode(&[1.0], &cube_size(1.0, 1.0, 1.0)),
            Err(ShapeError::DimensionMismatch { got: 1, expected: 0 })
        ));
    }

    #[test]
    fn mesh_center_cases() {
        let space = cuboid_space();
        let mesh = space.decode(&[], &cube_size(1.0, 1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(mesh_center(&mesh).unwrap(), Vector3::zeros(), epsilon = 1e-12);

        let shift = Vector3::new(1.0, 2.0, 3.0);
        let moved = Mesh {
            vertices: mesh.vertices.iter().map(|v| v + shift).collect(),
            faces: mesh.faces.clone(),
        };
        assert_abs_diff_eq!(mesh_center(&moved).unwrap(), shift, epsilon = 1e-12);

        assert!(matches!(
            mesh_center(&Mesh { vertices: vec![], faces: vec![] }),
            Err(ShapeError::EmptyMesh)
        ));
    }

    #[test]
    fn mesh_center_matches_brute_force_sum() {
        let mut verts = Vec::new();
        let mut acc = Vector3::zeros();
        for i in 0..100 {
            let v = Vector3::new(
                (i as f64 * 0.37).sin() * 3.0,
                (i as f64 * 0.71).cos() * 2.0,
                (i as f64 * 0.13).sin() * 5.0,
            );
            acc += v;
            verts.push(v);
        }
        let mesh = Mesh { vertices: verts, faces: vec![] };
        assert_abs_diff_eq!(mesh_center(&mesh).unwrap(), acc / 100.0, epsilon = 1e-12);
    }

    #[test]
    fn center_size_jacobian_matches_finite_differences() {
        // The center of the unit cuboid is the origin, so perturb a shifted
        // space instead: move every mean vertex up by 0.1 within the box.
        let base = cuboid_space();
        let mean: Vec<Vector3<f64>> = base
            .mean_vertices()
            .iter()
            .map(|v| Vector3::new(v.x, v.y * 0.8 + 0.1, v.z))
            .collect();
        let space = ShapeSpace::new(
            {
                // Restore the unit bounding box by keeping the extremes.
                let mut m = mean;
                m[0].y = -0.5;
                m[1].y = -0.5;
                m[2].y = 0.5;
                m[3].y = 0.5;
                m
            },
            vec![],
            base.faces().to_vec(),
        )
        .unwrap();
        let size = cube_size(2.0, 1.0, 1.0);
        let h = 1e-5;
        let center = |s: &BoxSize| mesh_center(&space.decode(&[], s).unwrap()).unwrap();
        let up = center(&BoxSize::new(size.height + h, size.width, size.length).unwrap());
        let down = center(&BoxSize::new(size.height - h, size.width, size.length).unwrap());
        let fd = (up - down) / (2.0 * h);
        let mean_y: f64 = space.mean_vertices().iter().map(|v| v.y).sum::<f64>()
            / space.mean_vertices().len() as f64;
        assert_abs_diff_eq!(fd.y, mean_y, epsilon = 1e-6);
    }

    #[test]
    fn asset_roundtrip() {
        let space = two_component_space();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("car.shsp");
        space.save(&path).unwrap();
        let loaded = ShapeSpace::load(&path).unwrap();
        assert_eq!(loaded.dim(), 2);
        assert_eq!(loaded.faces(), space.faces());
        for (a, b) in loaded.mean_vertices().iter().zip(space.mean_vertices()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn asset_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.shsp");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(ShapeSpace::load(&path), Err(ShapeError::Asset(_))));
    }

    proptest! {
        #[test]
        fn decode_is_linear_in_embedding(
            a1 in -1.0..1.0f64, a2 in -1.0..1.0f64,
            b1 in -1.0..1.0f64, b2 in -1.0..1.0f64,
        ) {
            let space = two_component_space();
            let size = cube_size(1.5, 1.6, 3.9);
            let at = |e: &[f64]| space.decode(e, &size).unwrap();
            let zero = at(&[0.0, 0.0]);
            let sum = at(&[a1 + b1, a2 + b2]);
            let ea = at(&[a1, a2]);
            let eb = at(&[b1, b2]);
            for i in 0..zero.vertices.len() {
                let lhs = sum.vertices[i] - zero.vertices[i];
                let rhs = (ea.vertices[i] - zero.vertices[i]) + (eb.vertices[i] - zero.vertices[i]);
                prop_assert!((lhs - rhs).norm() < 1e-9);
            }
        }

        #[test]
        fn symmetric_mean_center_is_origin(
            h in 0.4..4.0f64, w in 0.4..4.0f64, l in 0.4..8.0f64,
        ) {
            let space = cuboid_space();
            let mesh = space.decode(&[], &cube_size(h, w, l)).unwrap();
            prop_assert!(mesh_center(&mesh).unwrap().norm() < 1e-9);
        }
    }
}
