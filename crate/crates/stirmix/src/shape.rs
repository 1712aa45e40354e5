//! Lagrange shape functions on the reference triangle and the affine map to
//! physical triangles. Shared by the flow solver (quadratic velocity, linear
//! pressure) and the scalar-diffusion solves (linear elements).

/// Affine geometry of one physical triangle.
#[derive(Debug, Clone, Copy)]
pub struct TriGeom {
    pub verts: [[f64; 2]; 3],
    /// Determinant of the reference-to-physical Jacobian (= 2 area).
    pub det: f64,
    /// Inverse transpose of the Jacobian, row-major.
    pub jinv_t: [[f64; 2]; 2],
}

impl TriGeom {
    pub fn new(verts: [[f64; 2]; 3]) -> Self {
        let [p0, p1, p2] = verts;
        let j = [
            [p1[0] - p0[0], p2[0] - p0[0]],
            [p1[1] - p0[1], p2[1] - p0[1]],
        ];
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        // J^{-T} = adj(J)^T / det.
        let jinv_t = [
            [j[1][1] / det, -j[1][0] / det],
            [-j[0][1] / det, j[0][0] / det],
        ];
        TriGeom { verts, det, jinv_t }
    }

    pub fn area(&self) -> f64 {
        0.5 * self.det
    }

    /// Map a reference point to physical coordinates.
    pub fn to_physical(&self, xi: f64, eta: f64) -> [f64; 2] {
        let [p0, p1, p2] = self.verts;
        [
            p0[0] + (p1[0] - p0[0]) * xi + (p2[0] - p0[0]) * eta,
            p0[1] + (p1[1] - p0[1]) * xi + (p2[1] - p0[1]) * eta,
        ]
    }

    /// Push a reference gradient to a physical gradient.
    pub fn grad_to_physical(&self, g: [f64; 2]) -> [f64; 2] {
        [
            self.jinv_t[0][0] * g[0] + self.jinv_t[0][1] * g[1],
            self.jinv_t[1][0] * g[0] + self.jinv_t[1][1] * g[1],
        ]
    }
}

/// Values of the three linear shape functions at a reference point.
pub fn p1_values(xi: f64, eta: f64) -> [f64; 3] {
    [1.0 - xi - eta, xi, eta]
}

/// Reference gradients of the linear shape functions (constant).
pub fn p1_ref_grads() -> [[f64; 2]; 3] {
    [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]
}

/// Values of the six quadratic shape functions at a reference point, in
/// local node order (v0, v1, v2, m01, m12, m20).
pub fn p2_values(xi: f64, eta: f64) -> [f64; 6] {
    let l = [1.0 - xi - eta, xi, eta];
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[1] * l[2],
        4.0 * l[2] * l[0],
    ]
}

/// Reference gradients of the six quadratic shape functions.
pub fn p2_ref_grads(xi: f64, eta: f64) -> [[f64; 2]; 6] {
    let l = [1.0 - xi - eta, xi, eta];
    let dl = p1_ref_grads();
    let mut g = [[0.0; 2]; 6];
    for v in 0..3 {
        for d in 0..2 {
            g[v][d] = (4.0 * l[v] - 1.0) * dl[v][d];
        }
    }
    let pairs = [(0, 1), (1, 2), (2, 0)];
    for (m, (a, b)) in pairs.iter().enumerate() {
        for d in 0..2 {
            g[3 + m][d] = 4.0 * (l[*a] * dl[*b][d] + l[*b] * dl[*a][d]);
        }
    }
    g
}

/// Quadratic trace shapes along one edge, parameterized by s in [0, 1],
/// in the order (first endpoint, second endpoint, midpoint).
pub fn p2_edge_values(s: f64) -> [f64; 3] {
    [
        (1.0 - s) * (1.0 - 2.0 * s),
        s * (2.0 * s - 1.0),
        4.0 * s * (1.0 - s),
    ]
}
