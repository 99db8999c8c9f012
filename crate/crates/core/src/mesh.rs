//! Isosurface extraction with marching cubes, plus STL/OBJ export.
//!
//! Cube cases come from the classic 256-entry tables in [`mesh_tables`];
//! ambiguous saddle cases keep the fixed table resolution, which is standard
//! but not topologically exact on such saddles. Vertices are welded by the
//! lattice edge they sit on — an exact, order-independent key, so no
//! positional epsilon is involved. Cubes are processed in parallel by z-slab
//! and welded in slab order, making output bitwise deterministic for any
//! thread count. Triangles are wound so normals point away from the
//! above-iso region; closed level sets therefore enclose positive volume.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::mesh_tables::{EDGE_TABLE, TRI_TABLE};
use crate::volume::Volume3;

/// Errors from mesh extraction and export.
#[derive(Debug, Error)]
pub enum MeshError {
    #[error("iso level must be finite, got {0}")]
    BadIso(f64),
    #[error("vertex coordinates must be finite (vertex {0})")]
    NonFiniteVertex(usize),
    #[error("triangle {index} references vertex {vertex} out of range {count}")]
    IndexOutOfRange {
        index: usize,
        vertex: u32,
        count: usize,
    },
    #[error("triangle {0} is degenerate (area below 1e-12)")]
    DegenerateTriangle(usize),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Indexed triangle surface in millimeter coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<[f64; 3]>,
    triangles: Vec<[u32; 3]>,
    /// Unit normals, one per triangle.
    normals: Vec<[f64; 3]>,
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Doubled area vector of the triangle (a, b, c).
fn area_vec(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    cross(sub(b, a), sub(c, a))
}

impl TriMesh {
    /// Empty mesh.
    pub fn empty() -> Self {
        TriMesh {
            vertices: Vec::new(),
            triangles: Vec::new(),
            normals: Vec::new(),
        }
    }

    /// Builds a mesh from raw vertices and index triples, validating
    /// finiteness, index range, and non-degeneracy; normals are recomputed.
    pub fn from_parts(
        vertices: Vec<[f64; 3]>,
        triangles: Vec<[u32; 3]>,
    ) -> Result<Self, MeshError> {
        for (i, v) in vertices.iter().enumerate() {
            if v.iter().any(|c| !c.is_finite()) {
                return Err(MeshError::NonFiniteVertex(i));
            }
        }
        let mut normals = Vec::with_capacity(triangles.len());
        for (i, t) in triangles.iter().enumerate() {
            for &ix in t {
                if ix as usize >= vertices.len() {
                    return Err(MeshError::IndexOutOfRange {
                        index: i,
                        vertex: ix,
                        count: vertices.len(),
                    });
                }
            }
            let av = area_vec(
                vertices[t[0] as usize],
                vertices[t[1] as usize],
                vertices[t[2] as usize],
            );
            let len = norm(av);
            if len / 2.0 <= 1e-12 {
                return Err(MeshError::DegenerateTriangle(i));
            }
            normals.push([av[0] / len, av[1] / len, av[2] / len]);
        }
        Ok(TriMesh {
            vertices,
            triangles,
            normals,
        })
    }

    pub fn vertices(&self) -> &[[f64; 3]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn normals(&self) -> &[[f64; 3]] {
        &self.normals
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Total surface area in mm².
    pub fn surface_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                norm(area_vec(
                    self.vertices[t[0] as usize],
                    self.vertices[t[1] as usize],
                    self.vertices[t[2] as usize],
                )) / 2.0
            })
            .sum()
    }

    /// Signed enclosed volume in mm³ (divergence theorem over triangles);
    /// positive for a closed surface with outward normals.
    pub fn enclosed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let a = self.vertices[t[0] as usize];
                let b = self.vertices[t[1] as usize];
                let c = self.vertices[t[2] as usize];
                let d = cross(b, c);
                (a[0] * d[0] + a[1] * d[1] + a[2] * d[2]) / 6.0
            })
            .sum()
    }
}

/// Cell-corner offsets matching the case tables.
const CORNER: [[usize; 3]; 8] = [
    [0, 0, 0],
    [0, 1, 0],
    [1, 1, 0],
    [1, 0, 0],
    [0, 0, 1],
    [0, 1, 1],
    [1, 1, 1],
    [1, 0, 1],
];

/// For each cube edge: (offset of the lattice point the edge starts at,
/// axis it runs along). Interpolation always goes from the anchor toward
/// +axis, so both cubes sharing an edge compute bit-identical vertices.
const EDGE_ANCHOR: [([usize; 3], usize); 12] = [
    ([0, 0, 0], 1),
    ([0, 1, 0], 0),
    ([1, 0, 0], 1),
    ([0, 0, 0], 0),
    ([0, 0, 1], 1),
    ([0, 1, 1], 0),
    ([1, 0, 1], 1),
    ([0, 0, 1], 0),
    ([0, 0, 0], 2),
    ([0, 1, 0], 2),
    ([1, 1, 0], 2),
    ([1, 0, 0], 2),
];

/// One triangle corner prior to welding: lattice edge key plus position.
type EdgeVertex = ((usize, u8), [f64; 3]);

/// Extracts the iso-level surface of `v` as an indexed triangle mesh.
///
/// Voxel centers sit at integer multiples of the spacing. Volumes with
/// fewer than 2 voxels along an axis contain no cubes and yield an empty
/// mesh, as does an iso level outside the value range.
pub fn marching_cubes(v: &Volume3, iso: f64) -> Result<TriMesh, MeshError> {
    if !iso.is_finite() {
        return Err(MeshError::BadIso(iso));
    }
    let [nx, ny, nz] = v.dims();
    let spacing = v.spacing_mm();
    let data = v.data();
    if nx < 2 || ny < 2 || nz < 2 {
        return Ok(TriMesh::empty());
    }
    let value = |x: usize, y: usize, z: usize| data[(z * ny + y) * nx + x] as f64;
    let lattice = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;

    // Per z-slab, emit triangles as edge-keyed corners; slab order fixes the
    // final ordering regardless of thread count.
    let slabs: Vec<Vec<[EdgeVertex; 3]>> = (0..nz - 1)
        .into_par_iter()
        .map(|z| {
            let mut tris = Vec::new();
            for y in 0..ny - 1 {
                for x in 0..nx - 1 {
                    // The tables assume bit c set when corner c is below the
                    // iso level; the complementary convention picks opposite
                    // diagonals on ambiguous faces and opens cracks.
                    let mut case = 0usize;
                    for (c, off) in CORNER.iter().enumerate() {
                        if value(x + off[0], y + off[1], z + off[2]) < iso {
                            case |= 1 << c;
                        }
                    }
                    if EDGE_TABLE[case] == 0 {
                        continue;
                    }
                    let mut edge_vertex = [None::<EdgeVertex>; 12];
                    for (e, &(off, axis)) in EDGE_ANCHOR.iter().enumerate() {
                        if EDGE_TABLE[case] & (1 << e) == 0 {
                            continue;
                        }
                        let (ax, ay, az) = (x + off[0], y + off[1], z + off[2]);
                        let v0 = value(ax, ay, az);
                        let mut end = [ax, ay, az];
                        end[axis] += 1;
                        let v1 = value(end[0], end[1], end[2]);
                        let t = ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0);
                        let mut pos = [
                            ax as f64 * spacing[0],
                            ay as f64 * spacing[1],
                            az as f64 * spacing[2],
                        ];
                        pos[axis] += t * spacing[axis];
                        edge_vertex[e] = Some(((lattice(ax, ay, az), axis as u8), pos));
                    }
                    let row = &TRI_TABLE[case];
                    let mut i = 0;
                    while row[i] >= 0 {
                        let a = edge_vertex[row[i] as usize].expect("edge flagged by table");
                        let b = edge_vertex[row[i + 1] as usize].expect("edge flagged by table");
                        let c = edge_vertex[row[i + 2] as usize].expect("edge flagged by table");
                        // Table order winds around the below-iso side; swap
                        // so normals leave the above-iso region.
                        tris.push([a, c, b]);
                        i += 3;
                    }
                }
            }
            tris
        })
        .collect();

    // Weld vertices by lattice edge in emission order and drop degenerate
    // triangles (possible when the iso level hits corner values exactly).
    let mut index_of: HashMap<(usize, u8), u32> = HashMap::new();
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut triangles: Vec<[u32; 3]> = Vec::new();
    let mut normals: Vec<[f64; 3]> = Vec::new();
    for tri in slabs.into_iter().flatten() {
        let av = area_vec(tri[0].1, tri[1].1, tri[2].1);
        let len = norm(av);
        if len / 2.0 <= 1e-12 {
            continue;
        }
        let mut ix = [0u32; 3];
        for (slot, (key, pos)) in ix.iter_mut().zip(tri) {
            *slot = *index_of.entry(key).or_insert_with(|| {
                vertices.push(pos);
                (vertices.len() - 1) as u32
            });
        }
        triangles.push(ix);
        normals.push([av[0] / len, av[1] / len, av[2] / len]);
    }
    Ok(TriMesh {
        vertices,
        triangles,
        normals,
    })
}

/// Writes the mesh as binary STL: 80-byte zero header, little-endian u32
/// triangle count, then per triangle the normal and three vertices as
/// little-endian f32 plus a zero u16 attribute.
pub fn write_stl(mesh: &TriMesh, path: &Path) -> Result<(), MeshError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&[0u8; 80])?;
    w.write_all(&(mesh.triangles.len() as u32).to_le_bytes())?;
    for (t, n) in mesh.triangles.iter().zip(&mesh.normals) {
        for c in n {
            w.write_all(&(*c as f32).to_le_bytes())?;
        }
        for &ix in t {
            for c in mesh.vertices[ix as usize] {
                w.write_all(&(c as f32).to_le_bytes())?;
            }
        }
        w.write_all(&0u16.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the mesh as ASCII OBJ with 1-based `f` indices.
pub fn write_obj(mesh: &TriMesh, path: &Path) -> Result<(), MeshError> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in &mesh.vertices {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Ball occupancy with a one-voxel linear ramp at the boundary, so the
    /// 0.5 level sits exactly at `radius` (in voxel units).
    fn ball(radius: f64, dims: [usize; 3], spacing: [f64; 3]) -> Volume3 {
        let c = [
            (dims[0] - 1) as f64 / 2.0,
            (dims[1] - 1) as f64 / 2.0,
            (dims[2] - 1) as f64 / 2.0,
        ];
        Volume3::from_fn(dims, spacing, |x, y, z| {
            let d = ((x as f64 - c[0]).powi(2)
                + (y as f64 - c[1]).powi(2)
                + (z as f64 - c[2]).powi(2))
            .sqrt();
            (radius + 0.5 - d).clamp(0.0, 1.0) as f32
        })
        .unwrap()
    }

    /// Undirected edge → usage count.
    fn edge_counts(mesh: &TriMesh) -> HashMap<(u32, u32), usize> {
        let mut counts = HashMap::new();
        for t in mesh.triangles() {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let key = (a.min(b), a.max(b));
                *counts.entry(key).or_insert(0) += 1;
            }
        }
        counts
    }

    fn assert_closed(mesh: &TriMesh) {
        let counts = edge_counts(mesh);
        assert!(counts.values().all(|&c| c == 2), "open or non-manifold edge");
        let v = mesh.vertex_count() as i64;
        let e = counts.len() as i64;
        let f = mesh.triangle_count() as i64;
        assert_eq!(v - e + f, 2, "Euler characteristic");
    }

    #[test]
    fn flat_volume_yields_empty_mesh() {
        let v = Volume3::constant([8, 8, 8], [1.0; 3], 0.0).unwrap();
        let mesh = marching_cubes(&v, 0.5).unwrap();
        assert!(mesh.is_empty());
        assert_eq!(mesh.vertex_count(), 0);

        // Iso outside the value range is also empty, not an error.
        let v = ball(3.0, [9, 9, 9], [1.0; 3]);
        assert!(marching_cubes(&v, 2.0).unwrap().is_empty());
        assert!(marching_cubes(&v, -1.0).unwrap().is_empty());

        assert!(matches!(
            marching_cubes(&v, f64::NAN),
            Err(MeshError::BadIso(_))
        ));
    }

    #[test]
    fn single_voxel_gives_closed_octahedron() {
        let v = Volume3::from_fn([5, 5, 5], [1.0; 3], |x, y, z| {
            if (x, y, z) == (2, 2, 2) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let mesh = marching_cubes(&v, 0.5).unwrap();
        assert_eq!(mesh.vertex_count(), 6);
        assert_eq!(mesh.triangle_count(), 8);
        assert_closed(&mesh);
        assert!(mesh.enclosed_volume() > 0.0, "normals must point outward");
    }

    #[test]
    fn ball_mesh_is_watertight_with_analytic_area_and_volume() {
        let r = 10.0;
        let mesh = marching_cubes(&ball(r, [24, 24, 24], [1.0; 3]), 0.5).unwrap();
        assert!(!mesh.is_empty());
        assert_closed(&mesh);

        let area = mesh.surface_area();
        let analytic_area = 4.0 * std::f64::consts::PI * r * r;
        assert!(
            (area - analytic_area).abs() / analytic_area < 0.05,
            "area {area} vs {analytic_area}"
        );

        let vol = mesh.enclosed_volume();
        let analytic_vol = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        assert!(
            (vol - analytic_vol).abs() / analytic_vol < 0.05,
            "volume {vol} vs {analytic_vol}"
        );
    }

    #[test]
    fn uniform_spacing_scales_coordinates_only() {
        let unit = marching_cubes(&ball(5.0, [14, 14, 14], [1.0; 3]), 0.5).unwrap();
        let scaled = marching_cubes(&ball(5.0, [14, 14, 14], [2.0; 3]), 0.5).unwrap();
        assert_eq!(unit.triangles(), scaled.triangles());
        for (a, b) in unit.vertices().iter().zip(scaled.vertices()) {
            for k in 0..3 {
                assert_eq!(a[k] * 2.0, b[k]);
            }
        }
        assert!((scaled.surface_area() - 4.0 * unit.surface_area()).abs() < 1e-9);
    }

    #[test]
    fn extraction_is_deterministic() {
        let v = ball(6.0, [16, 16, 16], [1.0, 0.7, 1.3]);
        let a = marching_cubes(&v, 0.5).unwrap();
        let b = marching_cubes(&v, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stl_files_have_fixed_record_sizes() {
        let dir = tempfile::tempdir().unwrap();

        let empty = TriMesh::empty();
        let p = dir.path().join("empty.stl");
        write_stl(&empty, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 84);

        let one = TriMesh::from_parts(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let p = dir.path().join("one.stl");
        write_stl(&one, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 84 + 50);

        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes[..80].iter().all(|&b| b == 0));
        assert_eq!(u32::from_le_bytes(bytes[80..84].try_into().unwrap()), 1);
        // Normal of the unit right triangle in the xy-plane is +z.
        let nz = f32::from_le_bytes(bytes[92..96].try_into().unwrap());
        assert_eq!(nz, 1.0);
        assert_eq!(
            u16::from_le_bytes(bytes[132..134].try_into().unwrap()),
            0
        );
    }

    #[test]
    fn obj_round_trip_preserves_geometry() {
        let mesh = marching_cubes(&ball(4.0, [12, 12, 12], [1.0; 3]), 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ball.obj");
        write_obj(&mesh, &p).unwrap();

        let text = std::fs::read_to_string(&p).unwrap();
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for line in text.lines() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let c: Vec<f64> = parts.map(|s| s.parse().unwrap()).collect();
                    vertices.push([c[0], c[1], c[2]]);
                }
                Some("f") => {
                    let i: Vec<u32> = parts.map(|s| s.parse::<u32>().unwrap() - 1).collect();
                    triangles.push([i[0], i[1], i[2]]);
                }
                _ => panic!("unexpected obj line: {line}"),
            }
        }
        assert_eq!(vertices, mesh.vertices());
        assert_eq!(triangles, mesh.triangles());
    }

    #[test]
    fn from_parts_validates_and_computes_normals() {
        assert!(matches!(
            TriMesh::from_parts(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![[0, 1, 2]]),
            Err(MeshError::IndexOutOfRange { vertex: 2, .. })
        ));
        assert!(matches!(
            TriMesh::from_parts(vec![[f64::NAN; 3]], vec![]),
            Err(MeshError::NonFiniteVertex(0))
        ));
        assert!(matches!(
            TriMesh::from_parts(
                vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]],
                vec![[0, 1, 2]],
            ),
            Err(MeshError::DegenerateTriangle(0))
        ));
    }
}
