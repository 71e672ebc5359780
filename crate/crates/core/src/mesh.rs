//! Triangle meshes: object CAD models in the object frame.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::stream_rng;
use crate::Vec3;

/// Vertex count above which [`model_diameter`] switches from the exhaustive
/// pairwise search to farthest-point sweeps.
pub const EXACT_DIAMETER_LIMIT: usize = 5000;

const DEFAULT_GRAY: [f64; 3] = [0.7, 0.7, 0.7];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeshError {
    #[error("triangle {triangle} references vertex {index} but the mesh has {count} vertices")]
    IndexOutOfRange { triangle: usize, index: usize, count: usize },
    #[error("vertex {0} is not finite")]
    NonFiniteVertex(usize),
    #[error("mesh has {colors} colors for {vertices} vertices")]
    ColorCount { colors: usize, vertices: usize },
    #[error("mesh has no triangles")]
    Empty,
    #[error("need at least 2 vertices, mesh has {0}")]
    TooFewVertices(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    /// Optional per-vertex RGB in `[0, 1]`.
    pub colors: Option<Vec<[f64; 3]>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>, colors: Option<Vec<[f64; 3]>>) -> Result<Self, MeshError> {
        let mesh = Self { vertices, triangles, colors };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if let Some(i) = self.vertices.iter().position(|v| !v.is_finite()) {
            return Err(MeshError::NonFiniteVertex(i));
        }
        let count = self.vertices.len();
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i >= count) {
                return Err(MeshError::IndexOutOfRange { triangle: t, index, count });
            }
        }
        if let Some(c) = &self.colors {
            if c.len() != count {
                return Err(MeshError::ColorCount { colors: c.len(), vertices: count });
            }
        }
        Ok(())
    }

    #[inline]
    pub fn color(&self, i: usize) -> [f64; 3] {
        self.colors.as_ref().map_or(DEFAULT_GRAY, |c| c[i])
    }

    pub fn triangle_vertices(&self, t: usize) -> [Vec3; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Axis-aligned cube centered at the origin with four vertices per face,
    /// so interpolated vertex normals equal the face normals. Faces are tinted
    /// with distinct colors.
    pub fn cube(side: f64) -> Self {
        let h = side / 2.0;
        // (normal axis, sign, color)
        let faces: [(usize, f64, [f64; 3]); 6] = [
            (0, 1.0, [0.9, 0.2, 0.2]),
            (0, -1.0, [0.2, 0.9, 0.9]),
            (1, 1.0, [0.2, 0.9, 0.2]),
            (1, -1.0, [0.9, 0.2, 0.9]),
            (2, 1.0, [0.2, 0.2, 0.9]),
            (2, -1.0, [0.9, 0.9, 0.2]),
        ];
        let mut vertices = Vec::with_capacity(24);
        let mut triangles = Vec::with_capacity(12);
        let mut colors = Vec::with_capacity(24);
        for (axis, sign, color) in faces {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let base = vertices.len();
            for (su, sv) in [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)] {
                let mut p = [0.0; 3];
                p[axis] = sign * h;
                p[u] = su * h;
                p[v] = sv * h;
                vertices.push(Vec3::from_array(p));
                colors.push(color);
            }
            // u x v = +axis, so this winding is outward for sign > 0
            if sign > 0.0 {
                triangles.push([base, base + 1, base + 2]);
                triangles.push([base, base + 2, base + 3]);
            } else {
                triangles.push([base, base + 2, base + 1]);
                triangles.push([base, base + 3, base + 2]);
            }
        }
        Self { vertices, triangles, colors: Some(colors) }
    }

    /// Axis-aligned cube with 8 shared corner vertices and outward winding.
    /// Face diagonals join the even-parity corners, so every corner sees the
    /// same incident area on each of its three faces.
    pub fn cube_shared_vertices(side: f64) -> Self {
        let h = side / 2.0;
        let vertices = (0..8)
            .map(|i| {
                let s = |bit: usize| if i & bit != 0 { h } else { -h };
                Vec3::new(s(1), s(2), s(4))
            })
            .collect();
        let triangles = vec![
            [0, 4, 6], [0, 6, 2], // -x
            [3, 5, 1], [3, 7, 5], // +x
            [0, 1, 5], [0, 5, 4], // -y
            [6, 7, 3], [6, 3, 2], // +y
            [0, 2, 3], [0, 3, 1], // -z
            [5, 7, 6], [5, 6, 4], // +z
        ];
        Self { vertices, triangles, colors: None }
    }

    /// Subdivided icosahedron projected onto a sphere.
    pub fn icosphere(radius: f64, subdivisions: usize) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Vec3> = [
            (-1.0, t, 0.0), (1.0, t, 0.0), (-1.0, -t, 0.0), (1.0, -t, 0.0),
            (0.0, -1.0, t), (0.0, 1.0, t), (0.0, -1.0, -t), (0.0, 1.0, -t),
            (t, 0.0, -1.0), (t, 0.0, 1.0), (-t, 0.0, -1.0), (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalized().unwrap())
        .collect();
        let mut triangles: Vec<[usize; 3]> = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        for _ in 0..subdivisions {
            let mut midpoints = std::collections::HashMap::new();
            let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
                let key = (a.min(b), a.max(b));
                *midpoints.entry(key).or_insert_with(|| {
                    verts.push(((verts[a] + verts[b]) * 0.5).normalized().unwrap());
                    verts.len() - 1
                })
            };
            let mut next = Vec::with_capacity(triangles.len() * 4);
            for [a, b, c] in triangles {
                let ab = midpoint(a, b, &mut vertices);
                let bc = midpoint(b, c, &mut vertices);
                let ca = midpoint(c, a, &mut vertices);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            triangles = next;
        }
        let vertices = vertices.into_iter().map(|v| v * radius).collect();
        Self { vertices, triangles, colors: None }
    }
}

/// Area-weighted vertex normals. Degenerate triangles contribute nothing;
/// vertices with no usable incident face get `(0, 0, 1)`.
pub fn compute_vertex_normals(mesh: &TriangleMesh) -> Vec<Vec3> {
    let mut acc = vec![Vec3::zeros(); mesh.vertices.len()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let [a, b, c] = mesh.triangle_vertices(t);
        // |cross| is twice the area, so this is already area weighted
        let n = (b - a).cross(c - a);
        for &i in tri {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .map(|n| n.normalized().unwrap_or(Vec3::new(0.0, 0.0, 1.0)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiameterMethod {
    Exhaustive,
    FarthestPointSweeps,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelDiameter {
    pub meters: f64,
    pub method: DiameterMethod,
}

/// Largest distance between two mesh vertices.
pub fn model_diameter(mesh: &TriangleMesh) -> Result<ModelDiameter, MeshError> {
    points_diameter(&mesh.vertices)
}

pub fn points_diameter(points: &[Vec3]) -> Result<ModelDiameter, MeshError> {
    let n = points.len();
    if n < 2 {
        return Err(MeshError::TooFewVertices(n));
    }
    if n <= EXACT_DIAMETER_LIMIT {
        let mut best = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                best = best.max((points[i] - points[j]).norm_squared());
            }
        }
        return Ok(ModelDiameter { meters: best.sqrt(), method: DiameterMethod::Exhaustive });
    }
    let farthest = |from: usize| -> (usize, f64) {
        let mut arg = from;
        let mut best = 0.0;
        for (i, p) in points.iter().enumerate() {
            let d = (*p - points[from]).norm_squared();
            if d > best {
                best = d;
                arg = i;
            }
        }
        (arg, best)
    };
    let mut start = 0;
    let mut best = 0.0f64;
    for _ in 0..3 {
        let (next, d) = farthest(start);
        best = best.max(d);
        start = next;
    }
    Ok(ModelDiameter { meters: best.sqrt(), method: DiameterMethod::FarthestPointSweeps })
}

/// A surface sample with its interpolated unit normal, in the object frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub position: Vec3,
    pub normal: Vec3,
}

/// Draws `count` points uniformly by area over the mesh surface. Normals are
/// barycentric interpolations of the area-weighted vertex normals.
pub fn sample_surface(mesh: &TriangleMesh, count: usize, seed: u64) -> Result<Vec<SurfacePoint>, MeshError> {
    if mesh.triangles.is_empty() {
        return Err(MeshError::Empty);
    }
    let normals = compute_vertex_normals(mesh);
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        let [a, b, c] = mesh.triangle_vertices(t);
        total += 0.5 * (b - a).cross(c - a).norm();
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(MeshError::Empty);
    }
    let mut rng: ChaCha8Rng = stream_rng(seed, 0);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let target = rng.gen::<f64>() * total;
        let t = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
        let (mut r1, mut r2): (f64, f64) = (rng.gen(), rng.gen());
        if r1 + r2 > 1.0 {
            r1 = 1.0 - r1;
            r2 = 1.0 - r2;
        }
        let l = [1.0 - r1 - r2, r1, r2];
        let [a, b, c] = mesh.triangles[t];
        let position = mesh.vertices[a] * l[0] + mesh.vertices[b] * l[1] + mesh.vertices[c] * l[2];
        let normal = (normals[a] * l[0] + normals[b] * l[1] + normals[c] * l[2])
            .normalized()
            .unwrap_or(normals[a]);
        out.push(SurfacePoint { position, normal });
    }
    Ok(out)
}

/// Euclidean distance from `p` to the closed triangle `abc`.
pub fn point_triangle_distance(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> f64 {
    // Ericson, closest point on triangle, region tests
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (p - a).norm();
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (p - b).norm();
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (p - (a + ab * v)).norm();
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (p - c).norm();
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (p - (a + ac * w)).norm();
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (p - (b + (c - b) * w)).norm();
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (p - (a + ab * v + ac * w)).norm()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use rand::Rng;

    #[test]
    fn validation_catches_bad_indices() {
        let err = TriangleMesh::new(vec![Vec3::zeros(); 2], vec![[0, 1, 2]], None).unwrap_err();
        assert!(matches!(err, MeshError::IndexOutOfRange { index: 2, .. }));
    }

    #[test]
    fn shared_cube_normals_point_to_corners() {
        let mesh = TriangleMesh::cube_shared_vertices(1.0);
        let s = 1.0 / 3f64.sqrt();
        for (v, n) in mesh.vertices.iter().zip(compute_vertex_normals(&mesh)) {
            let expected = Vec3::new(v.x.signum() * s, v.y.signum() * s, v.z.signum() * s);
            assert!((n - expected).max_abs() < 1e-12, "{v:?} -> {n:?}");
        }
    }

    #[test]
    fn faceted_cube_normals_are_face_normals() {
        let mesh = TriangleMesh::cube(0.1);
        for (v, n) in mesh.vertices.iter().zip(compute_vertex_normals(&mesh)) {
            // the normal picks out the coordinate at the face plane
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!((v.dot(n) - 0.05).abs() < 1e-12);
        }
    }

    #[test]
    fn single_triangle_normals() {
        let mesh = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
            None,
        )
        .unwrap();
        for n in compute_vertex_normals(&mesh) {
            assert_eq!(n, Vec3::new(0.0, 0.0, 1.0));
        }
    }

    #[test]
    fn icosphere_normals_are_radial() {
        let mesh = TriangleMesh::icosphere(0.3, 3);
        let max_angle = mesh
            .vertices
            .iter()
            .zip(compute_vertex_normals(&mesh))
            .map(|(v, n)| v.normalized().unwrap().dot(n).clamp(-1.0, 1.0).acos())
            .fold(0.0, f64::max);
        assert!(max_angle < 2f64.to_radians(), "max deviation {max_angle}");
    }

    #[test]
    fn diameter_examples() {
        let cube = TriangleMesh::cube_shared_vertices(1.0);
        let d = model_diameter(&cube).unwrap();
        assert!((d.meters - 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(d.method, DiameterMethod::Exhaustive);

        let two = [Vec3::zeros(), Vec3::new(0.0, 0.2, 0.0)];
        assert!((points_diameter(&two).unwrap().meters - 0.2).abs() < 1e-15);
        assert!(matches!(points_diameter(&two[..1]), Err(MeshError::TooFewVertices(1))));
    }

    #[test]
    fn large_clouds_use_sweeps() {
        let mesh = TriangleMesh::icosphere(0.5, 4);
        assert!(mesh.vertices.len() <= EXACT_DIAMETER_LIMIT);
        let mut pts = mesh.vertices.clone();
        pts.extend(TriangleMesh::icosphere(0.25, 4).vertices);
        let d = points_diameter(&pts).unwrap();
        assert_eq!(d.method, DiameterMethod::FarthestPointSweeps);
        assert!((d.meters - 1.0).abs() < 1e-3);
    }

    #[test]
    fn surface_samples_lie_on_mesh() {
        let mesh = TriangleMesh::cube(0.1);
        let samples = sample_surface(&mesh, 500, 7).unwrap();
        assert_eq!(samples.len(), 500);
        for s in &samples {
            // on the boundary of the cube: max coordinate is the half side
            assert!((s.position.max_abs() - 0.05).abs() < 1e-12);
            assert!((s.position.dot(s.normal) - 0.05).abs() < 1e-12);
        }
        assert_eq!(samples, sample_surface(&mesh, 500, 7).unwrap());
    }

    #[test]
    fn point_triangle_distance_regions() {
        let (a, b, c) = (Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0));
        assert!((point_triangle_distance(Vec3::new(0.2, 0.2, 0.5), a, b, c) - 0.5).abs() < 1e-15);
        assert!((point_triangle_distance(Vec3::new(-1.0, 0.0, 0.0), a, b, c) - 1.0).abs() < 1e-15);
        assert!((point_triangle_distance(Vec3::new(1.0, 1.0, 0.0), a, b, c) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn diameter_matches_brute_force(seed in 0u64..1000) {
            let mut rng = stream_rng(seed, 1);
            let pts: Vec<Vec3> = (0..100)
                .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect();
            let mut oracle = 0.0f64;
            for p in &pts {
                for q in &pts {
                    oracle = oracle.max((*p - *q).norm());
                }
            }
            prop_assert_eq!(points_diameter(&pts).unwrap().meters, oracle);
        }
    }
}
