//! Triangulation of the unit disk and boundary geometry.
//!
//! The generator lays vertices on concentric rings: ring j of R carries 6j
//! vertices at radius j/R, plus the center vertex. Consecutive rings are
//! stitched by an angular sweep, which yields near-equilateral triangles
//! everywhere and exactly 6 R^2 of them. Outer-ring vertices sit on the unit
//! circle to machine precision, and the midpoints of boundary edges are
//! placed on the circle as well (at the bisecting angle), so every boundary
//! degree of freedom carries an exact polar angle and tangent.
//!
//! Triangles are stored counter-clockwise. Edge k of a triangle (a, b, c)
//! connects its vertices in the order (a,b), (b,c), (c,a).

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

/// Outward frame of a point on the unit circle.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryFrame {
    /// Polar angle in [0, 2 pi).
    pub omega: f64,
    /// Unit tangent, counter-clockwise: (-sin w, cos w).
    pub tau: [f64; 2],
    /// Unit outward normal: (cos w, sin w).
    pub normal: [f64; 2],
}

/// Undirected mesh edge.
#[derive(Debug, Clone, Copy)]
pub struct Edge {
    /// Endpoint vertex ids, smaller first.
    pub verts: [usize; 2],
    /// Adjacent triangles; `tris[1]` is None on the boundary.
    pub tris: [Option<usize>; 2],
}

/// Conforming triangulation of the unit disk with quadratic node layout.
#[derive(Debug, Clone)]
pub struct TriMesh {
    /// Target edge length the mesh was generated for.
    pub h: f64,
    pub vertices: Vec<[f64; 2]>,
    /// Counter-clockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    pub edges: Vec<Edge>,
    /// Per triangle: edge ids in local order (v0 v1), (v1 v2), (v2 v0).
    pub tri_edges: Vec<[usize; 3]>,
    /// Per triangle: adjacent triangle across each local edge.
    pub neighbors: Vec<[Option<usize>; 3]>,
    /// Edge midpoints; boundary midpoints lie on the unit circle.
    pub midpoints: Vec<[f64; 2]>,
    /// Boundary vertex ids ordered counter-clockwise from angle 0.
    pub boundary_loop: Vec<usize>,
    /// Boundary frame per quadratic node (vertices then midpoints), None inside.
    pub frames: Vec<Option<BoundaryFrame>>,
}

/// Polar angle in [0, 2 pi) of any nonzero point.
pub fn polar_angle(x: f64, y: f64) -> f64 {
    let r = x.hypot(y);
    let c = (x / r).clamp(-1.0, 1.0);
    if y >= 0.0 {
        c.acos()
    } else {
        2.0 * PI - c.acos()
    }
}

/// Frame (angle, tangent, outward normal) of a point on the unit circle.
///
/// Fails if the point is farther than 1e-10 from the circle.
pub fn boundary_frame(point: [f64; 2]) -> Result<BoundaryFrame> {
    let [x, y] = point;
    let r = x.hypot(y);
    if (r - 1.0).abs() > 1e-10 {
        return Err(Error::OffBoundary { x, y });
    }
    Ok(BoundaryFrame {
        omega: polar_angle(x, y),
        tau: [-y / r, x / r],
        normal: [x / r, y / r],
    })
}

impl TriMesh {
    /// Structured disk mesh with target edge length `h` in (0, 1).
    pub fn disk(h: f64) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) || !h.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "mesh size h = {h} must lie in (0, 1)"
            )));
        }
        let rings = ((1.0 / h).round() as usize).max(1);
        let mut vertices: Vec<[f64; 2]> = vec![[0.0, 0.0]];
        let mut ring_start = vec![0usize; rings + 1];
        for j in 1..=rings {
            ring_start[j] = vertices.len();
            let n = 6 * j;
            let r = j as f64 / rings as f64;
            for i in 0..n {
                let a = 2.0 * PI * i as f64 / n as f64;
                vertices.push([r * a.cos(), r * a.sin()]);
            }
        }

        let mut triangles: Vec<[usize; 3]> = Vec::with_capacity(6 * rings * rings);
        // Center fan.
        for i in 0..6.min(6 * rings) {
            let s = ring_start[1];
            triangles.push([0, s + i, s + (i + 1) % 6]);
        }
        // Stitch each pair of consecutive rings by sweeping angles upward.
        for j in 1..rings {
            let (si, ni) = (ring_start[j], 6 * j);
            let (so, no) = (ring_start[j + 1], 6 * (j + 1));
            let (mut i, mut o) = (0usize, 0usize);
            while i < ni || o < no {
                let advance_outer = if o == no {
                    false
                } else if i == ni {
                    true
                } else {
                    // Compare the angles the next step would reach; on a tie
                    // (both rings carry a node at the sector boundary) the
                    // inner ring advances first, which keeps the stitched
                    // edges short.
                    let ai = (i + 1) as f64 / ni as f64;
                    let ao = (o + 1) as f64 / no as f64;
                    ao < ai
                };
                if advance_outer {
                    triangles.push([so + o % no, so + (o + 1) % no, si + i % ni]);
                    o += 1;
                } else {
                    triangles.push([si + i % ni, so + o % no, si + (i + 1) % ni]);
                    i += 1;
                }
            }
        }

        let boundary_loop: Vec<usize> = (ring_start[rings]..vertices.len()).collect();
        Self::from_parts(h, vertices, triangles, boundary_loop)
    }

    /// Assemble connectivity from raw vertex and triangle lists and validate.
    pub fn from_parts(
        h: f64,
        vertices: Vec<[f64; 2]>,
        triangles: Vec<[usize; 3]>,
        boundary_loop: Vec<usize>,
    ) -> Result<Self> {
        let nv = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= nv {
                    return Err(Error::Format(format!(
                        "triangle {t} references vertex {v} of {nv}"
                    )));
                }
            }
        }

        // Unique edges keyed by sorted endpoints.
        let mut edge_of = std::collections::HashMap::<(usize, usize), usize>::new();
        let mut edges: Vec<Edge> = Vec::new();
        let mut tri_edges = vec![[usize::MAX; 3]; triangles.len()];
        for (t, tri) in triangles.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                let e = *edge_of.entry(key).or_insert_with(|| {
                    edges.push(Edge {
                        verts: [key.0, key.1],
                        tris: [None, None],
                    });
                    edges.len() - 1
                });
                tri_edges[t][k] = e;
                let slots = &mut edges[e].tris;
                if slots[0].is_none() {
                    slots[0] = Some(t);
                } else if slots[1].is_none() {
                    slots[1] = Some(t);
                } else {
                    return Err(Error::MeshQuality(format!(
                        "edge {:?} shared by more than two triangles",
                        edges[e].verts
                    )));
                }
            }
        }

        let mut neighbors = vec![[None; 3]; triangles.len()];
        for (t, te) in tri_edges.iter().enumerate() {
            for k in 0..3 {
                let e = &edges[te[k]];
                neighbors[t][k] = match e.tris {
                    [Some(a), Some(b)] => Some(if a == t { b } else { a }),
                    _ => None,
                };
            }
        }

        // The boundary loop must be exactly the set of single-triangle edges,
        // consecutive entries adjacent, traversed counter-clockwise.
        let boundary_edge_count = edges.iter().filter(|e| e.tris[1].is_none()).count();
        if boundary_loop.len() != boundary_edge_count {
            return Err(Error::MeshQuality(format!(
                "boundary loop has {} vertices but the mesh has {} boundary edges",
                boundary_loop.len(),
                boundary_edge_count
            )));
        }
        let nb = boundary_loop.len();
        for i in 0..nb {
            let (a, b) = (boundary_loop[i], boundary_loop[(i + 1) % nb]);
            let key = (a.min(b), a.max(b));
            match edge_of.get(&key) {
                Some(&e) if edges[e].tris[1].is_none() => {}
                _ => {
                    return Err(Error::MeshQuality(format!(
                        "boundary loop step {a}->{b} is not a boundary edge"
                    )));
                }
            }
        }
        let loop_angles: Vec<f64> = boundary_loop
            .iter()
            .map(|&v| polar_angle(vertices[v][0], vertices[v][1]))
            .collect();
        let mut wraps = 0;
        for i in 0..nb {
            if loop_angles[(i + 1) % nb] < loop_angles[i] {
                wraps += 1;
            }
        }
        if wraps != 1 {
            return Err(Error::MeshQuality(
                "boundary loop is not a single counter-clockwise cycle".into(),
            ));
        }

        // Midpoints; boundary midpoints are placed on the circle at the
        // bisecting angle so boundary nodes carry exact frames.
        let mut midpoints = vec![[0.0, 0.0]; edges.len()];
        for (e, edge) in edges.iter().enumerate() {
            let [a, b] = edge.verts;
            let (pa, pb) = (vertices[a], vertices[b]);
            if edge.tris[1].is_none() {
                let wa = polar_angle(pa[0], pa[1]);
                let wb = polar_angle(pb[0], pb[1]);
                let mut d = wb - wa;
                if d > PI {
                    d -= 2.0 * PI;
                } else if d < -PI {
                    d += 2.0 * PI;
                }
                let w = wa + 0.5 * d;
                midpoints[e] = [w.cos(), w.sin()];
            } else {
                midpoints[e] = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
            }
        }

        let mut frames: Vec<Option<BoundaryFrame>> = vec![None; nv + edges.len()];
        for &v in &boundary_loop {
            frames[v] = Some(boundary_frame(vertices[v])?);
        }
        for (e, edge) in edges.iter().enumerate() {
            if edge.tris[1].is_none() {
                frames[nv + e] = Some(boundary_frame(midpoints[e])?);
            }
        }

        let mesh = TriMesh {
            h,
            vertices,
            triangles,
            edges,
            tri_edges,
            neighbors,
            midpoints,
            boundary_loop,
            frames,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    fn validate(&self) -> Result<()> {
        let mut min_angle = f64::INFINITY;
        let mut max_edge: f64 = 0.0;
        for t in 0..self.triangles.len() {
            let a = self.signed_area(t);
            if a <= 0.0 {
                return Err(Error::MeshQuality(format!(
                    "triangle {t} has nonpositive signed area {a}"
                )));
            }
            let p = self.tri_coords(t);
            for k in 0..3 {
                let u = sub(p[(k + 1) % 3], p[k]);
                let v = sub(p[(k + 2) % 3], p[k]);
                let ang = angle_between(u, v);
                min_angle = min_angle.min(ang);
                max_edge = max_edge.max(norm(u));
            }
        }
        if min_angle < 20.0_f64.to_radians() {
            return Err(Error::MeshQuality(format!(
                "minimum interior angle {:.2} deg below the 20 deg gate",
                min_angle.to_degrees()
            )));
        }
        if max_edge > 1.5 * self.h {
            return Err(Error::MeshQuality(format!(
                "longest edge {max_edge:.4} exceeds 1.5 h = {:.4}",
                1.5 * self.h
            )));
        }
        for &v in &self.boundary_loop {
            let [x, y] = self.vertices[v];
            if (x.hypot(y) - 1.0).abs() > 1e-12 {
                return Err(Error::MeshQuality(format!(
                    "boundary vertex {v} is off the unit circle"
                )));
            }
        }
        for (e, edge) in self.edges.iter().enumerate() {
            if edge.tris[1].is_none() {
                let [x, y] = self.midpoints[e];
                if (x.hypot(y) - 1.0).abs() > 1e-12 {
                    return Err(Error::MeshQuality(format!(
                        "boundary midpoint of edge {e} is off the unit circle"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Number of quadratic nodes: vertices plus edge midpoints.
    pub fn n_p2_nodes(&self) -> usize {
        self.vertices.len() + self.edges.len()
    }

    /// Coordinates of quadratic node `n` (vertex id or nv + edge id).
    pub fn p2_coord(&self, n: usize) -> [f64; 2] {
        if n < self.vertices.len() {
            self.vertices[n]
        } else {
            self.midpoints[n - self.vertices.len()]
        }
    }

    /// Quadratic node ids of triangle `t` in local order
    /// (v0, v1, v2, m01, m12, m20).
    pub fn p2_nodes(&self, t: usize) -> [usize; 6] {
        let [a, b, c] = self.triangles[t];
        let nv = self.vertices.len();
        let e = self.tri_edges[t];
        [a, b, c, nv + e[0], nv + e[1], nv + e[2]]
    }

    pub fn tri_coords(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [p, q, r] = self.tri_coords(t);
        0.5 * ((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))
    }

    pub fn area_total(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.signed_area(t)).sum()
    }

    pub fn min_angle_deg(&self) -> f64 {
        let mut min_angle = f64::INFINITY;
        for t in 0..self.triangles.len() {
            let p = self.tri_coords(t);
            for k in 0..3 {
                let u = sub(p[(k + 1) % 3], p[k]);
                let v = sub(p[(k + 2) % 3], p[k]);
                min_angle = min_angle.min(angle_between(u, v));
            }
        }
        min_angle.to_degrees()
    }

    /// Serialize to the plain-text mesh format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("STIRMESH v1\n");
        let _ = writeln!(s, "h {}", self.h);
        let _ = writeln!(s, "vertices {}", self.vertices.len());
        for v in &self.vertices {
            let _ = writeln!(s, "{} {}", v[0], v[1]);
        }
        let _ = writeln!(s, "triangles {}", self.triangles.len());
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(s, "boundary {}", self.boundary_loop.len());
        for v in &self.boundary_loop {
            let _ = writeln!(s, "{v}");
        }
        s
    }

    /// Parse the plain-text mesh format and rebuild connectivity.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.trim() != "STIRMESH v1" {
            return Err(Error::Format(format!(
                "expected header 'STIRMESH v1', found '{header}'"
            )));
        }
        let mut next_line = || {
            lines
                .next()
                .ok_or_else(|| Error::Format("unexpected end of mesh file".into()))
        };
        let h_line = next_line()?;
        let h = parse_tagged_f64(h_line, "h")?;
        let nv = parse_tagged_usize(next_line()?, "vertices")?;
        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let l = next_line()?;
            let mut it = l.split_whitespace();
            let x = parse_f64(it.next().unwrap_or_default())?;
            let y = parse_f64(it.next().unwrap_or_default())?;
            vertices.push([x, y]);
        }
        let nt = parse_tagged_usize(next_line()?, "triangles")?;
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let l = next_line()?;
            let mut it = l.split_whitespace();
            let mut tri = [0usize; 3];
            for slot in &mut tri {
                *slot = parse_usize(it.next().unwrap_or_default())?;
            }
            triangles.push(tri);
        }
        let nb = parse_tagged_usize(next_line()?, "boundary")?;
        let mut boundary_loop = Vec::with_capacity(nb);
        for _ in 0..nb {
            boundary_loop.push(parse_usize(next_line()?.trim())?);
        }
        Self::from_parts(h, vertices, triangles, boundary_loop)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Stable content hash of the serialized mesh (16 hex characters).
    pub fn content_hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

fn angle_between(u: [f64; 2], v: [f64; 2]) -> f64 {
    let dot = u[0] * v[0] + u[1] * v[1];
    let cross = u[0] * v[1] - u[1] * v[0];
    cross.abs().atan2(dot)
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Parse(format!("expected a number, found '{s}'")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Parse(format!("expected an index, found '{s}'")))
}

fn parse_tagged_f64(line: &str, tag: &str) -> Result<f64> {
    let mut it = line.split_whitespace();
    if it.next() != Some(tag) {
        return Err(Error::Format(format!("expected '{tag} <value>': '{line}'")));
    }
    parse_f64(it.next().unwrap_or_default())
}

fn parse_tagged_usize(line: &str, tag: &str) -> Result<usize> {
    let mut it = line.split_whitespace();
    if it.next() != Some(tag) {
        return Err(Error::Format(format!("expected '{tag} <count>': '{line}'")));
    }
    parse_usize(it.next().unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_at_quarter_points() {
        let f = boundary_frame([0.0, -1.0]).unwrap();
        assert!((f.omega - 3.0 * PI / 2.0).abs() < 1e-14);
        assert!((f.tau[0] - 1.0).abs() < 1e-14 && f.tau[1].abs() < 1e-14);
        assert!((f.normal[1] + 1.0).abs() < 1e-14);

        let f = boundary_frame([1.0, 0.0]).unwrap();
        assert!(f.omega.abs() < 1e-14);
        assert!(f.tau[0].abs() < 1e-14 && (f.tau[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn frame_rejects_interior_point() {
        assert!(matches!(
            boundary_frame([0.5, 0.0]),
            Err(Error::OffBoundary { .. })
        ));
    }

    #[test]
    fn frame_orthonormal_everywhere() {
        for k in 0..360 {
            let w = 2.0 * PI * k as f64 / 360.0;
            let f = boundary_frame([w.cos(), w.sin()]).unwrap();
            let t = f.tau;
            let n = f.normal;
            assert!((t[0] * t[0] + t[1] * t[1] - 1.0).abs() < 1e-14);
            assert!((n[0] * n[0] + n[1] * n[1] - 1.0).abs() < 1e-14);
            assert!((t[0] * n[0] + t[1] * n[1]).abs() < 1e-14);
            // Tangent is the normal rotated a quarter turn counter-clockwise.
            assert!((t[0] + n[1]).abs() < 1e-14 && (t[1] - n[0]).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_h() {
        assert!(TriMesh::disk(0.0).is_err());
        assert!(TriMesh::disk(1.0).is_err());
        assert!(TriMesh::disk(-0.1).is_err());
    }

    #[test]
    fn coarse_mesh_structure() {
        let m = TriMesh::disk(0.5).unwrap();
        assert_eq!(m.n_triangles(), 24);
        assert_eq!(m.n_vertices(), 1 + 6 + 12);
        assert_eq!(m.boundary_loop.len(), 12);
        // Euler: V - E + T = 1 for a disk.
        assert_eq!(
            m.n_vertices() as i64 - m.n_edges() as i64 + m.n_triangles() as i64,
            1
        );
    }

    #[test]
    fn refinement_quadruples_triangles() {
        let coarse = TriMesh::disk(0.1).unwrap();
        let fine = TriMesh::disk(0.05).unwrap();
        let ratio = fine.n_triangles() as f64 / coarse.n_triangles() as f64;
        assert!(
            (3.5..=4.5).contains(&ratio),
            "triangle ratio {ratio} outside [3.5, 4.5]"
        );
    }

    #[test]
    fn quality_and_area_converge() {
        let mut prev_defect = f64::INFINITY;
        let mut rates = Vec::new();
        for h in [0.1, 0.05, 0.025] {
            let m = TriMesh::disk(h).unwrap();
            assert!(m.min_angle_deg() >= 20.0);
            let defect = PI - m.area_total();
            assert!(defect > 0.0, "inscribed mesh area must stay below pi");
            if prev_defect.is_finite() {
                rates.push((prev_defect / defect).log2());
            }
            prev_defect = defect;
        }
        for r in rates {
            assert!(r >= 1.8, "area defect decay rate {r} below 1.8");
        }
    }

    #[test]
    fn second_moment_matches_disk() {
        // integral of x^2 + y^2 over the unit disk is pi/2; the polygonal
        // approximation must land within O(h^2).
        let m = TriMesh::disk(0.1).unwrap();
        let rule = crate::quadrature::triangle_rule(2).unwrap();
        let mut total = 0.0;
        for t in 0..m.n_triangles() {
            let p = m.tri_coords(t);
            let jac = 2.0 * m.signed_area(t);
            for (pt, w) in rule.points.iter().zip(&rule.weights) {
                let x = p[0][0] + (p[1][0] - p[0][0]) * pt[0] + (p[2][0] - p[0][0]) * pt[1];
                let y = p[0][1] + (p[1][1] - p[0][1]) * pt[0] + (p[2][1] - p[0][1]) * pt[1];
                total += w * jac * (x * x + y * y);
            }
        }
        assert!(
            (total - PI / 2.0).abs() < 0.02,
            "second moment {total} far from {}",
            PI / 2.0
        );
    }

    #[test]
    fn interior_edges_shared_boundary_single_loop() {
        let m = TriMesh::disk(0.2).unwrap();
        let mut boundary_edges = 0;
        for e in &m.edges {
            match e.tris {
                [Some(_), Some(_)] => {}
                [Some(_), None] => boundary_edges += 1,
                _ => panic!("edge with no triangle"),
            }
        }
        assert_eq!(boundary_edges, m.boundary_loop.len());
    }

    #[test]
    fn boundary_midpoints_snapped() {
        let m = TriMesh::disk(0.2).unwrap();
        let nv = m.n_vertices();
        for (e, edge) in m.edges.iter().enumerate() {
            if edge.tris[1].is_none() {
                let [x, y] = m.midpoints[e];
                assert!((x.hypot(y) - 1.0).abs() < 1e-14);
                assert!(m.frames[nv + e].is_some());
            } else {
                assert!(m.frames[nv + e].is_none());
            }
        }
    }

    #[test]
    fn text_round_trip_preserves_hash() {
        let m = TriMesh::disk(0.25).unwrap();
        let text = m.to_text();
        let m2 = TriMesh::from_text(&text).unwrap();
        assert_eq!(m.content_hash(), m2.content_hash());
        assert_eq!(m.n_triangles(), m2.n_triangles());
        let dir = std::env::temp_dir().join("stirmix-mesh-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.stirmesh");
        m.save(&path).unwrap();
        let m3 = TriMesh::load(&path).unwrap();
        assert_eq!(m.content_hash(), m3.content_hash());
    }

    #[test]
    fn from_text_rejects_garbage() {
        assert!(TriMesh::from_text("not a mesh").is_err());
        assert!(TriMesh::from_text("STIRMESH v1\nh 0.5\nvertices 1\n0 0\n").is_err());
    }
}
