//! Unsteady Stokes flow on the unit disk driven by tangential boundary
//! forcing through a friction-type slip condition.
//!
//! Space discretization: quadratic velocity, linear pressure. Interior
//! quadratic nodes carry two Cartesian velocity components; every boundary
//! node carries a single tangential component, so the discrete velocity
//! never penetrates the boundary at a node by construction.
//!
//! Time discretization: second-order backward differencing (plain backward
//! Euler on the first step), combined with a rotational incremental
//! pressure-correction split. Each step runs a pressure sub-iteration that
//! re-solves the velocity with the updated pressure until the pressure
//! increment drops below a tolerance; at convergence the step velocity is
//! weakly divergence free. The end-of-step projected velocity update is an
//! essential part of the scheme; a switch exists to skip it only so its
//! instability can be demonstrated.
//!
//! All system matrices are constant in time and factored once.

use crate::control::ControlBasis;
use crate::error::{Error, Result};
use crate::mesh::{polar_angle, TriMesh};
use crate::quadrature::{segment_rule_16, triangle_rule_16, triangle_rule_7};
use crate::shape::{p1_ref_grads, p1_values, p2_edge_values, p2_ref_grads, p2_values, TriGeom};
use crate::sparse::{matvec, Assembler, SpdSolver};
use sha2::{Digest, Sha256};
use sprs::CsMat;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Velocity degrees of freedom attached to one quadratic node.
#[derive(Debug, Clone, Copy)]
pub enum NodeDof {
    /// Interior node: dof ids of the x and y components.
    Interior(usize, usize),
    /// Boundary node: dof id of the tangential component and its direction.
    Tangential(usize, [f64; 2]),
}

/// Velocity space layout over a disk mesh.
pub struct VelocitySpace {
    pub mesh: Arc<TriMesh>,
    pub node_dofs: Vec<NodeDof>,
    pub n_dofs: usize,
}

impl VelocitySpace {
    pub fn new(mesh: Arc<TriMesh>) -> Self {
        let n_nodes = mesh.n_p2_nodes();
        let mut node_dofs = Vec::with_capacity(n_nodes);
        let mut next = 0;
        for n in 0..n_nodes {
            if let Some(frame) = &mesh.frames[n] {
                node_dofs.push(NodeDof::Tangential(next, frame.tau));
                next += 1;
            } else {
                node_dofs.push(NodeDof::Interior(next, next + 1));
                next += 2;
            }
        }
        VelocitySpace {
            mesh,
            node_dofs,
            n_dofs: next,
        }
    }

    /// Cartesian velocity vector carried by node `n` under coefficients `c`.
    #[inline]
    pub fn node_velocity(&self, c: &[f64], n: usize) -> [f64; 2] {
        match self.node_dofs[n] {
            NodeDof::Interior(ix, iy) => [c[ix], c[iy]],
            NodeDof::Tangential(it, tau) => [c[it] * tau[0], c[it] * tau[1]],
        }
    }

    /// Largest nodal speed for coefficient vector `c`.
    pub fn max_nodal_speed(&self, c: &[f64]) -> f64 {
        let mut m: f64 = 0.0;
        for n in 0..self.node_dofs.len() {
            let v = self.node_velocity(c, n);
            m = m.max(v[0].hypot(v[1]));
        }
        m
    }
}

/// Discrete flow history at the solver's own time step.
#[derive(Debug, Clone)]
pub struct VelocityTrajectory {
    pub dt: f64,
    pub slip_k: f64,
    pub times: Vec<f64>,
    /// Velocity coefficient vector per snapshot.
    pub velocity: Vec<Vec<f64>>,
    /// Pressure coefficient vector per snapshot.
    pub pressure: Vec<Vec<f64>>,
    /// Largest weak-divergence functional over all snapshots.
    pub max_weak_divergence: f64,
}

impl VelocityTrajectory {
    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// Linear-in-time interpolation of velocity coefficients at `t`.
    pub fn sample_velocity(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let t0 = self.times[0];
        let t1 = self.t_end();
        if t < t0 - 1e-9 || t > t1 + 1e-9 {
            return Err(Error::OutsideSpan { t, t0, t1 });
        }
        let t = t.clamp(t0, t1);
        let k = (((t - t0) / self.dt).floor() as usize).min(self.times.len() - 2);
        let lam = ((t - self.times[k]) / self.dt).clamp(0.0, 1.0);
        let a = &self.velocity[k];
        let b = &self.velocity[k + 1];
        for i in 0..out.len() {
            out[i] = a[i] + lam * (b[i] - a[i]);
        }
        Ok(())
    }

    /// Largest nodal speed over all snapshots.
    pub fn max_speed(&self, space: &VelocitySpace) -> f64 {
        self.velocity
            .iter()
            .map(|c| space.max_nodal_speed(c))
            .fold(0.0, f64::max)
    }

    /// Linear combination sum_i coeffs[i] * trajs[i] (snapshot-aligned).
    pub fn combine(coeffs: &[f64], trajs: &[&VelocityTrajectory]) -> Result<VelocityTrajectory> {
        if coeffs.len() != trajs.len() || trajs.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for {} trajectories",
                coeffs.len(),
                trajs.len()
            )));
        }
        let first = trajs[0];
        for t in trajs.iter().skip(1) {
            if t.times.len() != first.times.len() || (t.dt - first.dt).abs() > 1e-14 {
                return Err(Error::CadenceMismatch(
                    "trajectories must share snapshot times to combine".into(),
                ));
            }
        }
        let nsnap = first.times.len();
        let nu = first.velocity[0].len();
        let np = first.pressure[0].len();
        let mut velocity = vec![vec![0.0; nu]; nsnap];
        let mut pressure = vec![vec![0.0; np]; nsnap];
        for (a, tr) in coeffs.iter().zip(trajs) {
            for s in 0..nsnap {
                let src = &tr.velocity[s];
                let dst = &mut velocity[s];
                for i in 0..nu {
                    dst[i] += a * src[i];
                }
                let srcp = &tr.pressure[s];
                let dstp = &mut pressure[s];
                for i in 0..np {
                    dstp[i] += a * srcp[i];
                }
            }
        }
        let max_div = trajs
            .iter()
            .zip(coeffs)
            .map(|(t, a)| t.max_weak_divergence * a.abs())
            .sum();
        Ok(VelocityTrajectory {
            dt: first.dt,
            slip_k: first.slip_k,
            times: first.times.clone(),
            velocity,
            pressure,
            max_weak_divergence: max_div,
        })
    }
}

/// Time-stepping parameters of the flow solver.
#[derive(Debug, Clone, Copy)]
pub struct StokesConfig {
    /// Time-step size.
    pub dt: f64,
    /// Friction coefficient of the slip boundary condition.
    pub slip_k: f64,
    /// Pressure sub-iteration stops when the pressure increment drops below
    /// this L2 threshold.
    pub uzawa_eps: f64,
    /// Hard cap on pressure sweeps per time step.
    pub uzawa_max: usize,
}

impl Default for StokesConfig {
    fn default() -> Self {
        StokesConfig {
            dt: 0.01,
            slip_k: 0.5,
            uzawa_eps: 1e-10,
            uzawa_max: 500,
        }
    }
}

/// Extra knobs for verification runs; production solves use `Default`.
#[derive(Default)]
pub struct SolveOptions<'a> {
    /// Volumetric momentum forcing f(x, y, t).
    pub body_force: Option<&'a dyn Fn(f64, f64, f64) -> [f64; 2]>,
    /// Known divergence of an exact velocity, subtracted inside the pressure
    /// correction when verifying against a manufactured flow that is not
    /// divergence free.
    pub manufactured_divergence: Option<&'a dyn Fn(f64, f64, f64) -> f64>,
    /// Initial velocity coefficients (defaults to rest).
    pub initial_velocity: Option<Vec<f64>>,
    /// Initial pressure coefficients (defaults to zero).
    pub initial_pressure: Option<Vec<f64>>,
    /// Run exactly this many pressure sweeps per step instead of iterating
    /// to tolerance.
    pub fixed_pressure_sweeps: Option<usize>,
    /// Skip the end-of-step projected velocity update (unstable; exists to
    /// demonstrate that the update is essential).
    pub skip_end_of_step_projection: bool,
}

struct BoundaryEdgeQuad {
    /// Quadratic nodes on the edge: two endpoints then the midpoint.
    nodes: [usize; 3],
    /// Tangent direction of each node's degree of freedom.
    node_tau: [[f64; 2]; 3],
    /// Per quadrature point: (weight * chord length, trace shapes, circle
    /// tangent at the point, polar angle).
    points: Vec<(f64, [f64; 3], [f64; 2], f64)>,
}

/// Factored operators for one mesh and configuration.
pub struct StokesSolver {
    pub space: Arc<VelocitySpace>,
    pub cfg: StokesConfig,
    mass_v: CsMat<f64>,
    /// Divergence coupling: rows pressure vertices, columns velocity dofs.
    div_op: CsMat<f64>,
    /// Pressure-gradient action on velocity test functions (not the
    /// transpose of `div_op`; no integration by parts).
    grad_op: CsMat<f64>,
    mass_p: CsMat<f64>,
    fact_step_be: SpdSolver,
    fact_step_bdf2: SpdSolver,
    fact_mass_v: SpdSolver,
    fact_mass_p: SpdSolver,
    fact_poisson_pinned: SpdSolver,
    /// Integral of each linear pressure shape (row sums of the mass matrix).
    p_weights: Vec<f64>,
    area: f64,
    boundary_quad: Vec<BoundaryEdgeQuad>,
}

impl StokesSolver {
    pub fn new(mesh: Arc<TriMesh>, cfg: StokesConfig) -> Result<Self> {
        if !(cfg.dt > 0.0) || !(cfg.slip_k >= 0.0) || !(cfg.uzawa_eps > 0.0) {
            return Err(Error::InvalidParameter(
                "flow solver needs dt > 0, slip_k >= 0, uzawa_eps > 0".into(),
            ));
        }
        let space = Arc::new(VelocitySpace::new(mesh.clone()));
        let nu = space.n_dofs;
        let np = mesh.n_vertices();
        let rule = triangle_rule_7();

        let mut asm_mass = Assembler::new(nu, nu);
        let mut asm_visc = Assembler::new(nu, nu);
        let mut asm_div = Assembler::new(np, nu);
        let mut asm_grad = Assembler::new(nu, np);
        let mut asm_mp = Assembler::new(np, np);
        let mut asm_kp = Assembler::new(np, np);

        // Dof scatter per node: (dof id, direction).
        let dof_list = |n: usize| -> Vec<(usize, [f64; 2])> {
            match space.node_dofs[n] {
                NodeDof::Interior(ix, iy) => vec![(ix, [1.0, 0.0]), (iy, [0.0, 1.0])],
                NodeDof::Tangential(it, tau) => vec![(it, tau)],
            }
        };

        for t in 0..mesh.n_triangles() {
            let geom = TriGeom::new(mesh.tri_coords(t));
            let nodes = mesh.p2_nodes(t);
            let tri_verts = mesh.triangles[t];
            let p1g_ref = p1_ref_grads();
            let p1g: Vec<[f64; 2]> = p1g_ref
                .iter()
                .map(|g| geom.grad_to_physical(*g))
                .collect();

            // Local accumulators over quadrature.
            let mut m_loc = [[0.0; 6]; 6]; // int Na Nb
            let mut k_loc = [[0.0; 6]; 6]; // int grad Na . grad Nb
            let mut gg_loc = [[[0.0; 2]; 2]; 36]; // int (dNa_i)(dNb_j), flattened a*6+b
            let mut div_loc = [[[0.0; 2]; 6]; 3]; // int N1_p dNa (vertex p, node a, component)
            let mut grad_loc = [[[0.0; 2]; 6]; 3]; // int dN1_p Na
            let mut mp_loc = [[0.0; 3]; 3];

            for (pt, w) in rule.points.iter().zip(&rule.weights) {
                let wj = w * geom.det;
                let nvals = p2_values(pt[0], pt[1]);
                let ngrads_ref = p2_ref_grads(pt[0], pt[1]);
                let ngrads: Vec<[f64; 2]> = ngrads_ref
                    .iter()
                    .map(|g| geom.grad_to_physical(*g))
                    .collect();
                let pvals = p1_values(pt[0], pt[1]);
                for a in 0..6 {
                    for b in 0..6 {
                        m_loc[a][b] += wj * nvals[a] * nvals[b];
                        k_loc[a][b] += wj * (ngrads[a][0] * ngrads[b][0] + ngrads[a][1] * ngrads[b][1]);
                        for i in 0..2 {
                            for j in 0..2 {
                                gg_loc[a * 6 + b][i][j] += wj * ngrads[a][i] * ngrads[b][j];
                            }
                        }
                    }
                }
                for p in 0..3 {
                    for a in 0..6 {
                        for d in 0..2 {
                            div_loc[p][a][d] += wj * pvals[p] * ngrads[a][d];
                            grad_loc[p][a][d] += wj * p1g[p][d] * nvals[a];
                        }
                    }
                    for q in 0..3 {
                        mp_loc[p][q] += wj * pvals[p] * pvals[q];
                    }
                }
            }

            for a in 0..6 {
                for (ia, da) in dof_list(nodes[a]) {
                    for b in 0..6 {
                        for (ib, db) in dof_list(nodes[b]) {
                            let dadb = da[0] * db[0] + da[1] * db[1];
                            asm_mass.add(ia, ib, dadb * m_loc[a][b]);
                            // 2 int D(phi_a):D(phi_b)
                            //   = (da.db) int dNa.dNb + int (da.dNb)(db.dNa).
                            let mut cross = 0.0;
                            for i in 0..2 {
                                for j in 0..2 {
                                    cross += da[j] * db[i] * gg_loc[a * 6 + b][i][j];
                                }
                            }
                            asm_visc.add(ia, ib, dadb * k_loc[a][b] + cross);
                        }
                    }
                    for p in 0..3 {
                        let row = tri_verts[p];
                        let dv = da[0] * div_loc[p][a][0] + da[1] * div_loc[p][a][1];
                        asm_div.add(row, ia, dv);
                        let gv = da[0] * grad_loc[p][a][0] + da[1] * grad_loc[p][a][1];
                        asm_grad.add(ia, row, gv);
                    }
                }
            }
            let area = geom.area();
            for p in 0..3 {
                for q in 0..3 {
                    asm_mp.add(tri_verts[p], tri_verts[q], mp_loc[p][q]);
                    let kpq = area * (p1g[p][0] * p1g[q][0] + p1g[p][1] * p1g[q][1]);
                    asm_kp.add(tri_verts[p], tri_verts[q], kpq);
                }
            }
        }

        // Boundary friction and forcing geometry along chord edges.
        let seg = segment_rule_16();
        let nv = mesh.n_vertices();
        let mut boundary_quad = Vec::new();
        for (e, edge) in mesh.edges.iter().enumerate() {
            if edge.tris[1].is_some() {
                continue;
            }
            // Orient the chord so its endpoints run counter-clockwise.
            let t0 = edge.tris[0].expect("boundary edge has a triangle");
            let tri = mesh.triangles[t0];
            let k_loc = (0..3)
                .find(|&k| mesh.tri_edges[t0][k] == e)
                .expect("edge belongs to its triangle");
            let (a, b) = (tri[k_loc], tri[(k_loc + 1) % 3]);
            let nodes = [a, b, nv + e];
            let node_tau = [
                mesh.frames[a].as_ref().expect("boundary vertex frame").tau,
                mesh.frames[b].as_ref().expect("boundary vertex frame").tau,
                mesh.frames[nv + e].as_ref().expect("midpoint frame").tau,
            ];
            let pa = mesh.vertices[a];
            let pb = mesh.vertices[b];
            let chord = ((pb[0] - pa[0]).powi(2) + (pb[1] - pa[1]).powi(2)).sqrt();
            let mut points = Vec::with_capacity(seg.points.len());
            for (s, w) in seg.points.iter().zip(&seg.weights) {
                let x = pa[0] + (pb[0] - pa[0]) * s;
                let y = pa[1] + (pb[1] - pa[1]) * s;
                let r = x.hypot(y);
                let tau_q = [-y / r, x / r];
                points.push((w * chord, p2_edge_values(*s), tau_q, polar_angle(x, y)));
            }
            boundary_quad.push(BoundaryEdgeQuad {
                nodes,
                node_tau,
                points,
            });
        }
        // Friction bilinear form into the viscous block.
        for eq in &boundary_quad {
            for (wds, shapes, tau_q, _) in &eq.points {
                for a in 0..3 {
                    let ta = eq.node_tau[a][0] * tau_q[0] + eq.node_tau[a][1] * tau_q[1];
                    for b in 0..3 {
                        let tb = eq.node_tau[b][0] * tau_q[0] + eq.node_tau[b][1] * tau_q[1];
                        let (ia, ib) = match (space.node_dofs[eq.nodes[a]], space.node_dofs[eq.nodes[b]]) {
                            (NodeDof::Tangential(ia, _), NodeDof::Tangential(ib, _)) => (ia, ib),
                            _ => unreachable!("boundary edge node without tangential dof"),
                        };
                        asm_visc.add(ia, ib, cfg.slip_k * wds * shapes[a] * shapes[b] * ta * tb);
                    }
                }
            }
        }

        let mass_v = asm_mass.into_csr();
        let visc = asm_visc.into_csr();
        let div_op = asm_div.into_csr();
        let grad_op = asm_grad.into_csr();
        let mass_p = asm_mp.into_csr();
        let stiff_p = asm_kp.into_csr();

        let step_be = csr_axpy(1.0 / cfg.dt, &mass_v, &visc);
        let step_bdf2 = csr_axpy(1.5 / cfg.dt, &mass_v, &visc);
        let poisson_pinned = pin_first_dof(&stiff_p);

        let mut ones = vec![1.0; np];
        let mut p_weights = vec![0.0; np];
        matvec(&mass_p, &ones, &mut p_weights);
        ones.clear();
        let area: f64 = p_weights.iter().sum();

        Ok(StokesSolver {
            space,
            cfg,
            fact_step_be: SpdSolver::new(step_be)?,
            fact_step_bdf2: SpdSolver::new(step_bdf2)?,
            fact_mass_v: SpdSolver::new(mass_v.clone())?,
            fact_mass_p: SpdSolver::new(mass_p.clone())?,
            fact_poisson_pinned: SpdSolver::new(poisson_pinned)?,
            mass_v,
            div_op,
            grad_op,
            mass_p,
            p_weights,
            area,
            boundary_quad,
        })
    }

    pub fn mesh(&self) -> &Arc<TriMesh> {
        &self.space.mesh
    }

    fn l2_pressure_norm(&self, p: &[f64]) -> f64 {
        let mut tmp = vec![0.0; p.len()];
        matvec(&self.mass_p, p, &mut tmp);
        p.iter().zip(&tmp).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
    }

    fn remove_pressure_mean(&self, p: &mut [f64]) {
        let mean: f64 = p
            .iter()
            .zip(&self.p_weights)
            .map(|(v, w)| v * w)
            .sum::<f64>()
            / self.area;
        for v in p.iter_mut() {
            *v -= mean;
        }
    }

    /// Boundary forcing load vector at time `t` for tangential data
    /// g(omega, t), plus an optional volumetric force.
    fn load_vector(
        &self,
        t: f64,
        g: &dyn Fn(f64, f64) -> f64,
        body: Option<&dyn Fn(f64, f64, f64) -> [f64; 2]>,
    ) -> Vec<f64> {
        let mut f = vec![0.0; self.space.n_dofs];
        for eq in &self.boundary_quad {
            for (wds, shapes, tau_q, omega) in &eq.points {
                let gv = g(*omega, t);
                if gv == 0.0 {
                    continue;
                }
                for a in 0..3 {
                    let ta = eq.node_tau[a][0] * tau_q[0] + eq.node_tau[a][1] * tau_q[1];
                    if let NodeDof::Tangential(ia, _) = self.space.node_dofs[eq.nodes[a]] {
                        f[ia] += wds * gv * shapes[a] * ta;
                    }
                }
            }
        }
        if let Some(bf) = body {
            let mesh = &self.space.mesh;
            let rule = triangle_rule_16();
            for tri in 0..mesh.n_triangles() {
                let geom = TriGeom::new(mesh.tri_coords(tri));
                let nodes = mesh.p2_nodes(tri);
                for (pt, w) in rule.points.iter().zip(&rule.weights) {
                    let wj = w * geom.det;
                    let [x, y] = geom.to_physical(pt[0], pt[1]);
                    let fv = bf(x, y, t);
                    let nvals = p2_values(pt[0], pt[1]);
                    for a in 0..6 {
                        match self.space.node_dofs[nodes[a]] {
                            NodeDof::Interior(ix, iy) => {
                                f[ix] += wj * nvals[a] * fv[0];
                                f[iy] += wj * nvals[a] * fv[1];
                            }
                            NodeDof::Tangential(it, tau) => {
                                f[it] += wj * nvals[a] * (fv[0] * tau[0] + fv[1] * tau[1]);
                            }
                        }
                    }
                }
            }
        }
        f
    }

    /// March the flow from rest (or the configured initial state) to `t_end`
    /// under tangential boundary forcing `g(omega, t)`.
    pub fn solve(&self, t_end: f64, g: &dyn Fn(f64, f64) -> f64) -> Result<VelocityTrajectory> {
        self.solve_with(t_end, g, &SolveOptions::default())
    }

    pub fn solve_with(
        &self,
        t_end: f64,
        g: &dyn Fn(f64, f64) -> f64,
        opts: &SolveOptions,
    ) -> Result<VelocityTrajectory> {
        let dt = self.cfg.dt;
        if !(t_end > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "final time {t_end} must be positive"
            )));
        }
        let n_steps = (t_end / dt).round() as usize;
        if n_steps == 0 || ((n_steps as f64) * dt - t_end).abs() > 1e-9 {
            return Err(Error::CadenceMismatch(format!(
                "final time {t_end} is not a whole number of steps of {dt}"
            )));
        }
        let nu = self.space.n_dofs;
        let np = self.space.mesh.n_vertices();

        let mut v = opts.initial_velocity.clone().unwrap_or_else(|| vec![0.0; nu]);
        let mut p = opts.initial_pressure.clone().unwrap_or_else(|| vec![0.0; np]);
        if v.len() != nu || p.len() != np {
            return Err(Error::DimensionMismatch(
                "initial state size does not match the space".into(),
            ));
        }
        let mut v_old = v.clone();
        let mut p_old = p.clone();

        let mut times = Vec::with_capacity(n_steps + 1);
        let mut velocity = Vec::with_capacity(n_steps + 1);
        let mut pressure = Vec::with_capacity(n_steps + 1);
        times.push(0.0);
        velocity.push(v.clone());
        pressure.push(p.clone());

        let mut max_div = self.weak_divergence_max(&v);
        let mut rhs_time = vec![0.0; nu];
        let mut tmp_u = vec![0.0; nu];
        let mut tmp_p = vec![0.0; np];

        for s in 0..n_steps {
            let t_next = (s + 1) as f64 * dt;
            let first = s == 0;
            let a0 = if first { 1.0 } else { 1.5 };
            // Time-history part of the momentum right-hand side.
            if first {
                for i in 0..nu {
                    tmp_u[i] = v[i] / dt;
                }
            } else {
                for i in 0..nu {
                    tmp_u[i] = (2.0 * v[i] - 0.5 * v_old[i]) / dt;
                }
            }
            matvec(&self.mass_v, &tmp_u, &mut rhs_time);
            let load = self.load_vector(t_next, g, opts.body_force);

            // Divergence data of a manufactured exact flow, if provided.
            let div_exact = opts.manufactured_divergence.map(|dex| {
                let mesh = &self.space.mesh;
                let rule = triangle_rule_16();
                let mut dv = vec![0.0; np];
                for tri in 0..mesh.n_triangles() {
                    let geom = TriGeom::new(mesh.tri_coords(tri));
                    let verts = mesh.triangles[tri];
                    for (pt, w) in rule.points.iter().zip(&rule.weights) {
                        let wj = w * geom.det;
                        let [x, y] = geom.to_physical(pt[0], pt[1]);
                        let val = dex(x, y, t_next);
                        let pv = p1_values(pt[0], pt[1]);
                        for q in 0..3 {
                            dv[verts[q]] += wj * val * pv[q];
                        }
                    }
                }
                dv
            });

            // Pressure extrapolation as the sub-iteration start.
            let mut p_it: Vec<f64> = if first {
                p.clone()
            } else {
                p.iter().zip(&p_old).map(|(a, b)| 2.0 * a - b).collect()
            };

            let fact = if first { &self.fact_step_be } else { &self.fact_step_bdf2 };
            let mut v_tilde = Vec::new();
            let mut phi = Vec::new();
            let mut converged = opts.fixed_pressure_sweeps.is_some();
            let mut last_incr = f64::INFINITY;
            let sweeps_target = opts.fixed_pressure_sweeps.unwrap_or(self.cfg.uzawa_max);
            let mut rhs = vec![0.0; nu];
            for _sweep in 0..sweeps_target {
                // Momentum solve with the current pressure iterate: the weak
                // pressure term +int p (div w) is the divergence coupling
                // applied transposed.
                transpose_matvec(&self.div_op, &p_it, &mut rhs);
                for i in 0..nu {
                    rhs[i] += rhs_time[i] + load[i];
                }
                v_tilde = fact.solve(&rhs);

                // Weak divergence of the intermediate velocity.
                matvec(&self.div_op, &v_tilde, &mut tmp_p);
                if let Some(dv) = &div_exact {
                    for i in 0..np {
                        tmp_p[i] -= dv[i];
                    }
                }

                // Pressure-increment Poisson problem (pure Neumann, pinned).
                let mut rhs_phi: Vec<f64> = tmp_p.iter().map(|d| -d / dt).collect();
                let shift: f64 = rhs_phi.iter().sum::<f64>() / np as f64;
                for r in rhs_phi.iter_mut() {
                    *r -= shift;
                }
                rhs_phi[0] = 0.0;
                phi = self.fact_poisson_pinned.solve(&rhs_phi);
                let mean: f64 = phi
                    .iter()
                    .zip(&self.p_weights)
                    .map(|(v, w)| v * w)
                    .sum::<f64>()
                    / self.area;
                for v in phi.iter_mut() {
                    *v -= mean;
                }

                // Rotational pressure update: p += a0 phi - Minv (div vt).
                let minv_div = self.fact_mass_p.solve(&tmp_p);
                let mut p_new = p_it.clone();
                for i in 0..np {
                    p_new[i] += a0 * phi[i] - minv_div[i];
                }
                self.remove_pressure_mean(&mut p_new);
                let incr: f64 = {
                    let diff: Vec<f64> = p_new.iter().zip(&p_it).map(|(a, b)| a - b).collect();
                    self.l2_pressure_norm(&diff)
                };
                p_it = p_new;
                last_incr = incr;
                if opts.fixed_pressure_sweeps.is_none() && incr < self.cfg.uzawa_eps {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::PressureIterationStalled {
                    eps: self.cfg.uzawa_eps,
                    sweeps: sweeps_target,
                    last: last_incr,
                });
            }

            // End-of-step projected velocity: v = vt - dt * Minv (grad phi).
            let v_new = if opts.skip_end_of_step_projection {
                v_tilde
            } else {
                matvec(&self.grad_op, &phi, &mut tmp_u);
                let corr = self.fact_mass_v.solve(&tmp_u);
                v_tilde
                    .iter()
                    .zip(&corr)
                    .map(|(a, b)| a - dt * b)
                    .collect()
            };

            v_old = std::mem::replace(&mut v, v_new);
            p_old = std::mem::replace(&mut p, p_it);
            max_div = max_div.max(self.weak_divergence_max(&v));
            times.push(t_next);
            velocity.push(v.clone());
            pressure.push(p.clone());
        }

        Ok(VelocityTrajectory {
            dt,
            slip_k: self.cfg.slip_k,
            times,
            velocity,
            pressure,
            max_weak_divergence: max_div,
        })
    }

    /// Largest |int q div v| over all linear test functions q.
    pub fn weak_divergence_max(&self, v: &[f64]) -> f64 {
        let mut d = vec![0.0; self.space.mesh.n_vertices()];
        matvec(&self.div_op, v, &mut d);
        d.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Kinetic energy (1/2) int |v|^2 of one velocity coefficient vector.
    pub fn kinetic_energy(&self, v: &[f64]) -> f64 {
        let mut tmp = vec![0.0; v.len()];
        matvec(&self.mass_v, v, &mut tmp);
        0.5 * v.iter().zip(&tmp).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Energy bookkeeping of a trajectory under forcing `g`: boundary work
    /// against the accumulated kinetic, viscous, and friction terms.
    pub fn energy_balance(
        &self,
        traj: &VelocityTrajectory,
        g: &dyn Fn(f64, f64) -> f64,
    ) -> EnergyReport {
        let n = traj.times.len();
        let mesh = &self.space.mesh;
        let rule = triangle_rule_7();
        let mut work_rate = vec![0.0; n];
        let mut viscous_rate = vec![0.0; n];
        let mut friction_rate = vec![0.0; n];
        for (s, t) in traj.times.iter().enumerate() {
            let v = &traj.velocity[s];
            // Boundary rates.
            let mut w_rate = 0.0;
            let mut f_rate = 0.0;
            for eq in &self.boundary_quad {
                let cs: Vec<f64> = eq
                    .nodes
                    .iter()
                    .map(|&nid| match self.space.node_dofs[nid] {
                        NodeDof::Tangential(it, _) => v[it],
                        _ => unreachable!(),
                    })
                    .collect();
                for (wds, shapes, tau_q, omega) in &eq.points {
                    let mut vt = 0.0;
                    for a in 0..3 {
                        let ta = eq.node_tau[a][0] * tau_q[0] + eq.node_tau[a][1] * tau_q[1];
                        vt += shapes[a] * cs[a] * ta;
                    }
                    w_rate += wds * g(*omega, *t) * vt;
                    f_rate += wds * self.cfg.slip_k * vt * vt;
                }
            }
            work_rate[s] = w_rate;
            friction_rate[s] = f_rate;
            // Viscous rate 2 int |D(v)|^2.
            let mut visc = 0.0;
            for tri in 0..mesh.n_triangles() {
                let geom = TriGeom::new(mesh.tri_coords(tri));
                let nodes = mesh.p2_nodes(tri);
                for (pt, w) in rule.points.iter().zip(&rule.weights) {
                    let wj = w * geom.det;
                    let g_ref = p2_ref_grads(pt[0], pt[1]);
                    let mut grad = [[0.0; 2]; 2];
                    for a in 0..6 {
                        let ga = geom.grad_to_physical(g_ref[a]);
                        let vn = self.space.node_velocity(v, nodes[a]);
                        for i in 0..2 {
                            for j in 0..2 {
                                grad[i][j] += vn[i] * ga[j];
                            }
                        }
                    }
                    let d00 = grad[0][0];
                    let d11 = grad[1][1];
                    let d01 = 0.5 * (grad[0][1] + grad[1][0]);
                    visc += wj * 2.0 * (d00 * d00 + d11 * d11 + 2.0 * d01 * d01);
                }
            }
            viscous_rate[s] = visc;
        }
        let trap = |rates: &[f64]| -> f64 {
            let mut s = 0.0;
            for k in 0..n - 1 {
                s += 0.5 * (rates[k] + rates[k + 1]) * (traj.times[k + 1] - traj.times[k]);
            }
            s
        };
        let work = trap(&work_rate);
        let viscous = trap(&viscous_rate);
        let friction = trap(&friction_rate);
        let kinetic_initial = self.kinetic_energy(&traj.velocity[0]);
        let kinetic_final = self.kinetic_energy(traj.velocity.last().unwrap());
        let lhs = work;
        let rhs = (kinetic_final - kinetic_initial) + viscous + friction;
        let residual = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
        EnergyReport {
            work,
            kinetic_final,
            viscous,
            friction,
            residual,
        }
    }
}

/// Terms of the energy identity over one trajectory.
#[derive(Debug, Clone, Copy)]
pub struct EnergyReport {
    pub work: f64,
    pub kinetic_final: f64,
    pub viscous: f64,
    pub friction: f64,
    /// Relative imbalance between boundary work and the dissipation side.
    pub residual: f64,
}

/// Per-basis-function flow trajectories, one per control basis element.
pub struct BasisVelocities {
    pub descriptor: String,
    pub trajectories: Vec<VelocityTrajectory>,
}

impl BasisVelocities {
    /// Linear combination of the basis flows with coefficients `alpha`.
    pub fn combine(&self, alpha: &[f64]) -> Result<VelocityTrajectory> {
        let refs: Vec<&VelocityTrajectory> = self.trajectories.iter().collect();
        VelocityTrajectory::combine(alpha, &refs)
    }
}

/// Solve (or load from cache) the flow response of every basis function.
///
/// Each control basis element drives one linear solve from rest over the
/// full horizon; any control in the span is then a snapshot-wise linear
/// combination. Cached files are keyed by mesh content, basis element,
/// time step, and slip coefficient.
pub fn precompute_basis(
    solver: &StokesSolver,
    basis: &ControlBasis,
    cache_dir: Option<&Path>,
) -> Result<BasisVelocities> {
    let mesh_hash = solver.space.mesh.content_hash();
    let mut trajectories = Vec::with_capacity(basis.dim());
    for idx in 0..basis.dim() {
        let elem_desc = basis.element_descriptor(idx);
        let key = cache_key(&mesh_hash, &elem_desc, solver.cfg.dt, solver.cfg.slip_k);
        let path = cache_dir.map(|d| d.join(format!("stirvel_{key}.bin")));
        if let Some(p) = &path {
            if p.exists() {
                match read_velocity_cache(p, &mesh_hash, &elem_desc, solver.cfg.dt, solver.cfg.slip_k)
                {
                    Ok(traj) => {
                        trajectories.push(traj);
                        continue;
                    }
                    Err(_) => {
                        // Corrupt or stale cache entry: recompute below.
                        let _ = std::fs::remove_file(p);
                    }
                }
            }
        }
        let g = basis.element_forcing(idx);
        let traj = solver.solve(basis.horizon(), &g)?;
        if let Some(p) = &path {
            write_velocity_cache(p, &mesh_hash, &elem_desc, &traj)?;
        }
        trajectories.push(traj);
    }
    Ok(BasisVelocities {
        descriptor: basis.descriptor(),
        trajectories,
    })
}

fn cache_key(mesh_hash: &str, elem_desc: &str, dt: f64, slip_k: f64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(mesh_hash.as_bytes());
    hasher.update(elem_desc.as_bytes());
    hasher.update(dt.to_le_bytes());
    hasher.update(slip_k.to_le_bytes());
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

const VEL_MAGIC: &[u8] = b"STIRVEL v1\n";

fn write_velocity_cache(
    path: &Path,
    mesh_hash: &str,
    elem_desc: &str,
    traj: &VelocityTrajectory,
) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(VEL_MAGIC)?;
        write_str(&mut f, mesh_hash)?;
        write_str(&mut f, elem_desc)?;
        f.write_all(&traj.dt.to_le_bytes())?;
        f.write_all(&traj.slip_k.to_le_bytes())?;
        f.write_all(&traj.max_weak_divergence.to_le_bytes())?;
        f.write_all(&(traj.times.len() as u64).to_le_bytes())?;
        f.write_all(&(traj.velocity[0].len() as u64).to_le_bytes())?;
        f.write_all(&(traj.pressure[0].len() as u64).to_le_bytes())?;
        for s in 0..traj.times.len() {
            f.write_all(&traj.times[s].to_le_bytes())?;
            for v in &traj.velocity[s] {
                f.write_all(&v.to_le_bytes())?;
            }
            for v in &traj.pressure[s] {
                f.write_all(&v.to_le_bytes())?;
            }
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_velocity_cache(
    path: &Path,
    mesh_hash: &str,
    elem_desc: &str,
    dt: f64,
    slip_k: f64,
) -> Result<VelocityTrajectory> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = vec![0u8; VEL_MAGIC.len()];
    f.read_exact(&mut magic)?;
    if magic != VEL_MAGIC {
        return Err(Error::Format("velocity cache header mismatch".into()));
    }
    let file_hash = read_str(&mut f)?;
    let file_desc = read_str(&mut f)?;
    let file_dt = read_f64(&mut f)?;
    let file_k = read_f64(&mut f)?;
    if file_hash != mesh_hash || file_desc != elem_desc || file_dt != dt || file_k != slip_k {
        return Err(Error::CacheMismatch(format!(
            "cache key ({file_hash}, {file_desc}, {file_dt}, {file_k}) does not match \
             ({mesh_hash}, {elem_desc}, {dt}, {slip_k})"
        )));
    }
    let max_div = read_f64(&mut f)?;
    let nsnap = read_u64(&mut f)? as usize;
    let nu = read_u64(&mut f)? as usize;
    let np = read_u64(&mut f)? as usize;
    let mut times = Vec::with_capacity(nsnap);
    let mut velocity = Vec::with_capacity(nsnap);
    let mut pressure = Vec::with_capacity(nsnap);
    for _ in 0..nsnap {
        times.push(read_f64(&mut f)?);
        let mut v = vec![0.0; nu];
        for slot in v.iter_mut() {
            *slot = read_f64(&mut f)?;
        }
        velocity.push(v);
        let mut p = vec![0.0; np];
        for slot in p.iter_mut() {
            *slot = read_f64(&mut f)?;
        }
        pressure.push(p);
    }
    Ok(VelocityTrajectory {
        dt,
        slip_k,
        times,
        velocity,
        pressure,
        max_weak_divergence: max_div,
    })
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u64).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u64(r)? as usize;
    if n > 1 << 20 {
        return Err(Error::Format("unreasonable string length".into()));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("invalid utf-8".into()))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// c0 * diag-free sum: returns a*M + K for matching sparsity patterns.
fn csr_axpy(coef: f64, m: &CsMat<f64>, k: &CsMat<f64>) -> CsMat<f64> {
    let scaled = m.map(|v| coef * v);
    &scaled + k
}

/// Replace the first row and column by the identity to fix the additive
/// constant of a pure-Neumann operator.
fn pin_first_dof(a: &CsMat<f64>) -> CsMat<f64> {
    let mut asm = Assembler::new(a.rows(), a.cols());
    for (v, (i, j)) in a.iter() {
        if i != 0 && j != 0 {
            asm.add(i, j, *v);
        }
    }
    asm.add(0, 0, 1.0);
    asm.into_csr()
}

/// y = A^T x without materializing the transpose.
fn transpose_matvec(a: &CsMat<f64>, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(a.rows(), x.len());
    debug_assert_eq!(a.cols(), y.len());
    y.fill(0.0);
    for (v, (i, j)) in a.iter() {
        y[j] += v * x[i];
    }
}
