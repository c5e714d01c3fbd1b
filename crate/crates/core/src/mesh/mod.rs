//! Triangle meshes with shared, immutable topology.
//!
//! Every mesh in the pipeline references a [`Topology`]: the face list plus
//! derived connectivity (edges, per-vertex neighbor lists) and a stable
//! fingerprint of the face list. Identical connectivity means identical
//! fingerprint, which is how datasets, models, and selection masks are checked
//! for compatibility.

mod io;

pub use io::{load_mesh, load_pointcloud, save_mesh, save_pointcloud, write_atomic};

use std::collections::BTreeSet;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("face {face}: vertex index {index} out of range (vertex count {n})")]
    IndexOutOfRange { face: usize, index: usize, n: usize },
    #[error("face {face}: degenerate triangle ({a}, {b}, {c})")]
    DegenerateFace { face: usize, a: usize, b: usize, c: usize },
    #[error("subdivision level {level} exceeds the cap of {max}")]
    SubdivisionBound { level: u32, max: u32 },
    #[error("vertex count {got} does not match topology vertex count {expected}")]
    VertexCountMismatch { got: usize, expected: usize },
    #[error("non-finite coordinate at row {row}")]
    NonFiniteCoordinate { row: usize },
    #[error("point cloud is empty")]
    EmptyPointCloud,
    #[error("vertex {vertex}: accumulated normal has zero magnitude")]
    ZeroNormal { vertex: usize },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Shared connectivity of a triangle mesh.
#[derive(Debug, Clone)]
pub struct Topology {
    faces: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    neighbors: Vec<Vec<usize>>,
    n_vertices: usize,
    fingerprint: String,
    // Directed edge arrays sorted by (dst, src); one entry per ordered pair.
    directed_src: Arc<Vec<usize>>,
    directed_dst: Arc<Vec<usize>>,
}

impl Topology {
    /// Builds connectivity from a face list over `n_vertices` vertices.
    ///
    /// Neighbor lists are sorted ascending and the edge list holds each
    /// unordered pair once, so reductions over them are reproducible.
    pub fn build(n_vertices: usize, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let mut edge_set: BTreeSet<[usize; 2]> = BTreeSet::new();
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n_vertices {
                    return Err(MeshError::IndexOutOfRange {
                        face: fi,
                        index: v,
                        n: n_vertices,
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::DegenerateFace {
                    face: fi,
                    a: f[0],
                    b: f[1],
                    c: f[2],
                });
            }
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[0], f[2])] {
                edge_set.insert([a.min(b), a.max(b)]);
            }
        }
        let edges: Vec<[usize; 2]> = edge_set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); n_vertices];
        for &[a, b] in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let mut directed: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2);
        for (dst, list) in neighbors.iter().enumerate() {
            for &src in list {
                directed.push((dst, src));
            }
        }
        let directed_dst = directed.iter().map(|&(d, _)| d).collect();
        let directed_src = directed.iter().map(|&(_, s)| s).collect();
        let fingerprint = fingerprint_faces(n_vertices, &faces);
        Ok(Topology {
            faces,
            edges,
            neighbors,
            n_vertices,
            fingerprint,
            directed_src: Arc::new(directed_src),
            directed_dst: Arc::new(directed_dst),
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Unordered edge list, each pair `[i, j]` with `i < j`, sorted.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    /// 1-ring neighbor lists, each sorted ascending.
    pub fn neighbors(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// Stable hash of the face list (and vertex count).
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Directed edges sorted by `(dst, src)`: for each vertex `i`, one entry
    /// per neighbor `j` with `src = j`, `dst = i`.
    pub fn directed_edges(&self) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
        (self.directed_src.clone(), self.directed_dst.clone())
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }
}

fn fingerprint_faces(n_vertices: usize, faces: &[[usize; 3]]) -> String {
    let mut hasher = Sha256::new();
    hasher.update((n_vertices as u64).to_le_bytes());
    for f in faces {
        for &v in f {
            hasher.update((v as u64).to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// A triangle mesh: vertex coordinates over a shared [`Topology`].
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<[f64; 3]>,
    topology: Arc<Topology>,
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 3]>, topology: Arc<Topology>) -> Result<Self, MeshError> {
        if vertices.len() != topology.n_vertices() {
            return Err(MeshError::VertexCountMismatch {
                got: vertices.len(),
                expected: topology.n_vertices(),
            });
        }
        for (row, v) in vertices.iter().enumerate() {
            if !v.iter().all(|c| c.is_finite()) {
                return Err(MeshError::NonFiniteCoordinate { row });
            }
        }
        Ok(Mesh { vertices, topology })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn fingerprint(&self) -> &str {
        self.topology.fingerprint()
    }

    /// Same topology, new coordinates.
    pub fn with_vertices(&self, vertices: Vec<[f64; 3]>) -> Result<Self, MeshError> {
        Mesh::new(vertices, self.topology.clone())
    }

    /// Vertex coordinates flattened row-major into `(n, 3)` tensor data.
    pub fn flat_coords(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.vertices.len() * 3);
        for v in &self.vertices {
            out.extend_from_slice(v);
        }
        out
    }
}

/// An unstructured 3D point set.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, MeshError> {
        if points.is_empty() {
            return Err(MeshError::EmptyPointCloud);
        }
        for (row, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(MeshError::NonFiniteCoordinate { row });
            }
        }
        Ok(PointCloud { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

// ---------------------------------------------------------------------------
// small vector helpers
// ---------------------------------------------------------------------------

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[allow(dead_code)]
pub(crate) fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = sub3(a, b);
    dot3(d, d)
}

// ---------------------------------------------------------------------------
// icosphere
// ---------------------------------------------------------------------------

const MAX_SUBDIVISION: u32 = 6;

/// Unit-radius icosphere by recursive icosahedron subdivision.
///
/// Level 0 is the icosahedron (12 vertices); level k has `10 * 4^k + 2`
/// vertices. Midpoints are re-projected onto the unit sphere at every level.
pub fn icosphere(subdivision_level: u32) -> Result<Mesh, MeshError> {
    if subdivision_level > MAX_SUBDIVISION {
        return Err(MeshError::SubdivisionBound {
            level: subdivision_level,
            max: MAX_SUBDIVISION,
        });
    }
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ];
    for v in &mut vertices {
        *v = scale3(*v, 1.0 / norm3(*v));
    }
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivision_level {
        let mut midpoint: std::collections::HashMap<(usize, usize), usize> =
            std::collections::HashMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let mut mid = [0usize; 3];
            for (k, (a, b)) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])].into_iter().enumerate() {
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoint.entry(key).or_insert_with(|| {
                    let m = scale3(add3(vertices[a], vertices[b]), 0.5);
                    let m = scale3(m, 1.0 / norm3(m));
                    vertices.push(m);
                    vertices.len() - 1
                });
            }
            new_faces.push([f[0], mid[0], mid[2]]);
            new_faces.push([f[1], mid[1], mid[0]]);
            new_faces.push([f[2], mid[2], mid[1]]);
            new_faces.push([mid[0], mid[1], mid[2]]);
        }
        faces = new_faces;
    }

    let topology = Arc::new(Topology::build(vertices.len(), faces)?);
    Mesh::new(vertices, topology)
}

// ---------------------------------------------------------------------------
// geometric primitives
// ---------------------------------------------------------------------------

/// Per-vertex unit normals: area-weighted average of incident face normals.
///
/// The un-normalized cross product of two face edges already carries the
/// face-area weight, so face contributions are accumulated as-is and the sum
/// normalized at the end. Orientation follows the face winding.
pub fn vertex_normals(mesh: &Mesh) -> Result<Vec<[f64; 3]>, MeshError> {
    let verts = mesh.vertices();
    let mut acc = vec![[0.0f64; 3]; verts.len()];
    for f in mesh.topology().faces() {
        let (a, b, c) = (verts[f[0]], verts[f[1]], verts[f[2]]);
        let n = cross3(sub3(b, a), sub3(c, a));
        for &v in f {
            acc[v] = add3(acc[v], n);
        }
    }
    for (i, n) in acc.iter_mut().enumerate() {
        let len = norm3(*n);
        if len <= 1e-300 {
            return Err(MeshError::ZeroNormal { vertex: i });
        }
        *n = scale3(*n, 1.0 / len);
    }
    Ok(acc)
}

/// Centers a point list on its centroid; returns the centered copy and the
/// centroid that restores the input by addition.
pub fn centroid_center(points: &[[f64; 3]]) -> (Vec<[f64; 3]>, [f64; 3]) {
    let c = centroid(points);
    let centered = points.iter().map(|&p| sub3(p, c)).collect();
    (centered, c)
}

pub fn centroid(points: &[[f64; 3]]) -> [f64; 3] {
    let mut c = [0.0f64; 3];
    for p in points {
        c = add3(c, *p);
    }
    scale3(c, 1.0 / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn icosphere_level0_counts() {
        let m = icosphere(0).unwrap();
        assert_eq!(m.n_vertices(), 12);
        assert_eq!(m.topology().faces().len(), 20);
        assert_eq!(m.topology().edges().len(), 30);
    }

    #[test]
    fn icosphere_level4_has_2562_vertices_and_euler_2() {
        let m = icosphere(4).unwrap();
        assert_eq!(m.n_vertices(), 10 * 4usize.pow(4) + 2);
        let v = m.n_vertices() as i64;
        let e = m.topology().edges().len() as i64;
        let f = m.topology().faces().len() as i64;
        assert_eq!(v - e + f, 2);
    }

    #[test]
    fn icosphere_level1_unit_radius() {
        let m = icosphere(1).unwrap();
        assert_eq!(m.n_vertices(), 42);
        for v in m.vertices() {
            assert!((norm3(*v) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn icosphere_level_cap() {
        assert!(matches!(
            icosphere(7),
            Err(MeshError::SubdivisionBound { level: 7, max: 6 })
        ));
    }

    #[test]
    fn euler_characteristic_all_levels() {
        for level in 0..=4 {
            let m = icosphere(level).unwrap();
            let v = m.n_vertices() as i64;
            let e = m.topology().edges().len() as i64;
            let f = m.topology().faces().len() as i64;
            assert_eq!(v - e + f, 2, "level {level}");
        }
    }

    #[test]
    fn single_triangle_topology() {
        let t = Topology::build(3, vec![[0, 1, 2]]).unwrap();
        assert_eq!(t.edges(), &[[0, 1], [0, 2], [1, 2]]);
        assert_eq!(t.neighbors()[0], vec![1, 2]);
    }

    #[test]
    fn icosahedron_five_neighbors() {
        let m = icosphere(0).unwrap();
        for v in 0..12 {
            assert_eq!(m.topology().degree(v), 5);
        }
    }

    #[test]
    fn shared_edge_deduplicated() {
        let t = Topology::build(4, vec![[0, 1, 2], [1, 3, 2]]).unwrap();
        let shared = t.edges().iter().filter(|e| **e == [1, 2]).count();
        assert_eq!(shared, 1);
        assert_eq!(t.edges().len(), 5);
    }

    #[test]
    fn topology_rejects_bad_faces() {
        assert!(matches!(
            Topology::build(3, vec![[0, 1, 3]]),
            Err(MeshError::IndexOutOfRange { .. })
        ));
        assert!(matches!(
            Topology::build(3, vec![[0, 1, 1]]),
            Err(MeshError::DegenerateFace { .. })
        ));
    }

    #[test]
    fn fingerprint_stable_and_distinct() {
        let a = Topology::build(3, vec![[0, 1, 2]]).unwrap();
        let b = Topology::build(3, vec![[0, 1, 2]]).unwrap();
        let c = Topology::build(3, vec![[0, 2, 1]]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn neighbor_lists_symmetric() {
        let m = icosphere(2).unwrap();
        let nb = m.topology().neighbors();
        for (i, list) in nb.iter().enumerate() {
            for &j in list {
                assert!(nb[j].contains(&i));
            }
        }
    }

    #[test]
    fn sphere_normals_point_radially() {
        // area-weighted normals on a level-2 icosphere sit within 2.4e-2 rad
        // of radial; the bound tightens as the tessellation refines
        let m = icosphere(2).unwrap();
        let normals = vertex_normals(&m).unwrap();
        for (v, n) in m.vertices().iter().zip(&normals) {
            let cosang = dot3(*v, *n).clamp(-1.0, 1.0);
            assert!(cosang.acos() < 2.5e-2, "angular error too large");
        }
        let m3 = icosphere(3).unwrap();
        let normals3 = vertex_normals(&m3).unwrap();
        for (v, n) in m3.vertices().iter().zip(&normals3) {
            let cosang = dot3(*v, *n).clamp(-1.0, 1.0);
            assert!(cosang.acos() < 1.2e-2, "angular error too large at level 3");
        }
    }

    #[test]
    fn planar_fan_normals_up() {
        // counter-clockwise fan around vertex 0 in the z = 0 plane
        let verts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.5, 1.0, 0.0],
            [-0.5, 1.0, 0.0],
        ];
        let topo = Arc::new(Topology::build(4, vec![[0, 1, 2], [0, 2, 3]]).unwrap());
        let m = Mesh::new(verts, topo).unwrap();
        for n in vertex_normals(&m).unwrap() {
            assert!((n[0]).abs() < 1e-12 && (n[1]).abs() < 1e-12 && (n[2] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_center_examples() {
        let (centered, c) = centroid_center(&[[1.0, 1.0, 1.0], [3.0, 3.0, 3.0]]);
        assert_eq!(c, [2.0, 2.0, 2.0]);
        assert_eq!(centered, vec![[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]]);
        let (again, c2) = centroid_center(&centered);
        assert!(norm3(c2) < 1e-12);
        for (a, b) in centered.iter().zip(&again) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normals_scale_invariant() {
        let m = icosphere(1).unwrap();
        let scaled = m
            .with_vertices(m.vertices().iter().map(|&v| scale3(v, 3.7)).collect())
            .unwrap();
        let n0 = vertex_normals(&m).unwrap();
        let n1 = vertex_normals(&scaled).unwrap();
        for (a, b) in n0.iter().zip(&n1) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn prop_centroid_recenter(pts in proptest::collection::vec(
            (-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0), 1..50)) {
            let pts: Vec<[f64;3]> = pts.into_iter().map(|(x,y,z)| [x,y,z]).collect();
            let (centered, _) = centroid_center(&pts);
            prop_assert!(norm3(centroid(&centered)) < 1e-12);
        }

        #[test]
        fn prop_normals_unit_norm(seed in 0u64..200) {
            // random radial bumps on an icosphere keep the mesh valid
            let base = icosphere(1).unwrap();
            let mut rng = crate::rng::rng_from_seed(seed);
            let verts: Vec<[f64;3]> = base.vertices().iter()
                .map(|&v| scale3(v, 1.0 + 0.3 * rand::Rng::random::<f64>(&mut rng)))
                .collect();
            let m = base.with_vertices(verts).unwrap();
            for n in vertex_normals(&m).unwrap() {
                prop_assert!((norm3(n) - 1.0).abs() < 1e-12);
            }
        }
    }
}
