//! Dual-norm mixing diagnostics.
//!
//! The degree of mixing of a mean-free scalar is measured in the dual norm
//! sqrt((r, f)) where r solves the Neumann problem (-Delta + I) r = f: the
//! smoother companion r weights large-scale structure and forgives
//! filamentation, so the norm decays exactly when the scalar is stirred
//! toward weak convergence to its mean. This module owns that companion
//! solve, the terminal cost built from it, and the duality diagnostic that
//! pairs the forward and backward transported fields.

use std::sync::Arc;

use crate::control::GramMatrix;
use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::shape::{p1_ref_grads, TriGeom};
use crate::sparse::{Assembler, SpdSolver};
use crate::transport::{DgField, DgSpace, DgTrajectory};

/// Relative residual demanded of the companion solve.
const SOLVE_TOL: f64 = 1e-12;

/// Terminal cost split into its mixing and control-effort parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    /// Half the squared mix-norm of the terminal scalar.
    pub mix_part: f64,
    /// (gamma / 2) times the squared control norm.
    pub penalty_part: f64,
    /// mix_part + penalty_part.
    pub total: f64,
    /// Mix-norm of the terminal scalar.
    pub mix_norm: f64,
    /// Control norm sqrt(alpha' G alpha).
    pub g_norm: f64,
}

/// Continuous piecewise-linear Neumann solver for (-Delta + I) r = f,
/// shared by the mix-norm and the terminal condition of the backward
/// transport.
pub struct MixNorm {
    pub mesh: Arc<TriMesh>,
    fact: SpdSolver,
}

impl MixNorm {
    /// Assemble and factor the stiffness-plus-mass matrix of the hat-function
    /// space (natural boundary condition: no flux constraint on the wall).
    pub fn new(mesh: Arc<TriMesh>) -> Result<Self> {
        let nv = mesh.n_vertices();
        let mut asm = Assembler::new(nv, nv);
        let ref_grads = p1_ref_grads();
        for t in 0..mesh.n_triangles() {
            let verts = mesh.triangles[t];
            let geom = TriGeom::new(mesh.tri_coords(t));
            let area = geom.area();
            let mut g = [[0.0; 2]; 3];
            for (k, rg) in ref_grads.iter().enumerate() {
                g[k] = geom.grad_to_physical(*rg);
            }
            for a in 0..3 {
                for b in 0..3 {
                    let stiff = area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                    let mass = area / if a == b { 6.0 } else { 12.0 };
                    asm.add(verts[a], verts[b], stiff + mass);
                }
            }
        }
        let fact = SpdSolver::new(asm.into_csr())?;
        Ok(MixNorm { mesh, fact })
    }

    /// Nodal values of the companion r solving (-Delta + I) r = f weakly.
    pub fn companion_nodal(&self, dg: &DgSpace, f: &DgField) -> Result<Vec<f64>> {
        if !Arc::ptr_eq(&self.mesh, &dg.mesh) {
            return Err(Error::InvalidParameter(
                "mix-norm solver and transport space use different meshes".into(),
            ));
        }
        let b = dg.p1_load(f)?;
        let r = self.fact.solve(&b);
        let rel = self.fact.residual(&r, &b);
        if !(rel <= SOLVE_TOL) {
            return Err(Error::LinearSolve(format!(
                "companion solve residual {rel:.3e} exceeds {SOLVE_TOL:.0e}"
            )));
        }
        Ok(r)
    }

    /// The companion of f projected back into the transport space: the
    /// terminal condition of the backward solve, and the weight in the
    /// squared mix-norm (r, f).
    pub fn companion(&self, dg: &DgSpace, f: &DgField) -> Result<DgField> {
        dg.project_p1(&self.companion_nodal(dg, f)?)
    }

    /// Squared mix-norm (r, f); its square root is the mix-norm.
    pub fn mix_norm_sq(&self, dg: &DgSpace, f: &DgField) -> Result<f64> {
        let rho = self.companion(dg, f)?;
        dg.inner(&rho, f)
    }

    /// Dual-norm mixing measure sqrt((r, f)) of a transported scalar.
    pub fn mix_norm(&self, dg: &DgSpace, f: &DgField) -> Result<f64> {
        Ok(self.mix_norm_sq(dg, f)?.max(0.0).sqrt())
    }

    /// Full cost of a control: half the squared mix-norm of the terminal
    /// scalar plus the quadratic control penalty, with the pieces exposed.
    pub fn cost(
        &self,
        dg: &DgSpace,
        theta_final: &DgField,
        alpha: &[f64],
        gram: &GramMatrix,
        gamma: f64,
    ) -> Result<CostBreakdown> {
        Ok(self
            .cost_with_companion(dg, theta_final, alpha, gram, gamma)?
            .0)
    }

    /// Like `cost`, additionally returning the companion field of the
    /// terminal scalar (the state that seeds a backward transport).
    pub fn cost_with_companion(
        &self,
        dg: &DgSpace,
        theta_final: &DgField,
        alpha: &[f64],
        gram: &GramMatrix,
        gamma: f64,
    ) -> Result<(CostBreakdown, DgField)> {
        let companion = self.companion(dg, theta_final)?;
        let mix_sq = dg.inner(&companion, theta_final)?;
        let g_sq = gram.inner(alpha, alpha);
        let mix_part = 0.5 * mix_sq;
        let penalty_part = 0.5 * gamma * g_sq;
        let breakdown = CostBreakdown {
            mix_part,
            penalty_part,
            total: mix_part + penalty_part,
            mix_norm: mix_sq.max(0.0).sqrt(),
            g_norm: g_sq.max(0.0).sqrt(),
        };
        Ok((breakdown, companion))
    }
}

/// Pair the forward and backward trajectories snapshot by snapshot:
/// returns (time, integral of rho * theta) per shared snapshot. For exact
/// transport the pairing is a constant of the motion, so its spread is a
/// direct measure of the combined discretization error.
pub fn duality_pairing(
    dg: &DgSpace,
    theta: &DgTrajectory,
    rho: &DgTrajectory,
) -> Result<Vec<(f64, f64)>> {
    if theta.times.len() != rho.times.len() {
        return Err(Error::CadenceMismatch(format!(
            "{} forward snapshots vs {} backward snapshots",
            theta.times.len(),
            rho.times.len()
        )));
    }
    let mut out = Vec::with_capacity(theta.times.len());
    for (k, (&t, &s)) in theta.times.iter().zip(&rho.times).enumerate() {
        if (t - s).abs() > 1e-9 {
            return Err(Error::CadenceMismatch(format!(
                "snapshot {k}: forward time {t} vs backward time {s}"
            )));
        }
        out.push((t, dg.inner(&rho.fields[k], &theta.fields[k])?));
    }
    Ok(out)
}

/// Largest absolute excursion of the duality pairing from its time mean
/// (trapezoid average of the pairing over the sampled window).
pub fn duality_deviation(pairings: &[(f64, f64)]) -> f64 {
    if pairings.len() < 2 {
        return 0.0;
    }
    let span = pairings.last().unwrap().0 - pairings[0].0;
    let mean = if span.abs() > 0.0 {
        let mut integral = 0.0;
        for w in pairings.windows(2) {
            integral += 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1);
        }
        integral / span
    } else {
        pairings.iter().map(|&(_, v)| v).sum::<f64>() / pairings.len() as f64
    };
    pairings
        .iter()
        .map(|&(_, v)| (v - mean).abs())
        .fold(0.0, f64::max)
}
