//! Finite-dimensional tangential boundary controls: spatial circle modes
//! crossed with uniform time segments, their Gram geometry, and cost
//! gradients with respect to the coefficient vector.
//!
//! A control is g(omega, t) = sum_i alpha_i * mode_i(omega) * chi_i(t) in the
//! tangential direction, where each chi is the indicator of one of N uniform
//! segments of [0, T]. Coefficients are stored mode-major: index = mode * N +
//! segment.

use crate::error::{Error, Result};
use crate::mesh::{polar_angle, TriMesh};
use crate::quadrature::segment_rule_16;
use crate::sparse::DenseChol;
use crate::stokes::{BasisVelocities, VelocitySpace};
use crate::transport::{DgSpace, DgTrajectory};
use std::f64::consts::PI;
use std::fmt;

/// Spatial boundary profile, a function of the polar angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Constant profile 1.
    Constant,
    /// cos(m omega), m >= 1.
    Cos(u32),
    /// sin(m omega), m >= 1.
    Sin(u32),
}

impl Mode {
    #[inline]
    pub fn eval(&self, omega: f64) -> f64 {
        match *self {
            Mode::Constant => 1.0,
            Mode::Cos(m) => (m as f64 * omega).cos(),
            Mode::Sin(m) => (m as f64 * omega).sin(),
        }
    }

    /// Squared boundary norm of the profile over the unit circle.
    pub fn circle_inner(&self) -> f64 {
        match *self {
            Mode::Constant => 2.0 * PI,
            Mode::Cos(_) | Mode::Sin(_) => PI,
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        let s = s.trim();
        if s == "const" || s == "1" {
            return Ok(Mode::Constant);
        }
        let (kind, rest) = if let Some(r) = s.strip_prefix("cos") {
            ('c', r)
        } else if let Some(r) = s.strip_prefix("sin") {
            ('s', r)
        } else {
            return Err(Error::Parse(format!(
                "unknown boundary mode '{s}' (expected const, cos<m>, or sin<m>)"
            )));
        };
        let m: u32 = rest
            .parse()
            .map_err(|_| Error::Parse(format!("bad mode frequency in '{s}'")))?;
        if m == 0 {
            return Err(Error::Parse(format!(
                "mode frequency must be >= 1 in '{s}' (use 'const' for the constant profile)"
            )));
        }
        Ok(if kind == 'c' { Mode::Cos(m) } else { Mode::Sin(m) })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Mode::Constant => write!(f, "const"),
            Mode::Cos(m) => write!(f, "cos{m}"),
            Mode::Sin(m) => write!(f, "sin{m}"),
        }
    }
}

/// Control basis: spatial modes x N uniform time segments on [0, T].
#[derive(Debug, Clone)]
pub struct ControlBasis {
    modes: Vec<Mode>,
    n_segments: usize,
    horizon: f64,
}

impl ControlBasis {
    pub fn new(modes: Vec<Mode>, n_segments: usize, horizon: f64) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::InvalidParameter("control basis needs at least one mode".into()));
        }
        for (i, m) in modes.iter().enumerate() {
            if modes[..i].contains(m) {
                return Err(Error::InvalidParameter(format!("duplicate mode '{m}' in basis")));
            }
        }
        if n_segments == 0 {
            return Err(Error::InvalidParameter("segment count must be >= 1".into()));
        }
        if !(horizon > 0.0) {
            return Err(Error::InvalidParameter("horizon must be positive".into()));
        }
        Ok(ControlBasis {
            modes,
            n_segments,
            horizon,
        })
    }

    /// Parse a descriptor like `cos2,sin2,const|N=10|T=1`.
    pub fn parse(desc: &str) -> Result<Self> {
        let parts: Vec<&str> = desc.split('|').collect();
        if parts.len() != 3 {
            return Err(Error::Parse(format!(
                "basis descriptor '{desc}' must look like 'cos2,sin2|N=10|T=1'"
            )));
        }
        let modes = parts[0]
            .split(',')
            .map(Mode::parse)
            .collect::<Result<Vec<_>>>()?;
        let n_str = parts[1]
            .trim()
            .strip_prefix("N=")
            .ok_or_else(|| Error::Parse(format!("expected 'N=<count>' in '{desc}'")))?;
        let n: usize = n_str
            .parse()
            .map_err(|_| Error::Parse(format!("bad segment count '{n_str}'")))?;
        let t_str = parts[2]
            .trim()
            .strip_prefix("T=")
            .ok_or_else(|| Error::Parse(format!("expected 'T=<horizon>' in '{desc}'")))?;
        let t: f64 = t_str
            .parse()
            .map_err(|_| Error::Parse(format!("bad horizon '{t_str}'")))?;
        ControlBasis::new(modes, n, t)
    }

    /// Canonical descriptor string (round-trips through `parse`).
    pub fn descriptor(&self) -> String {
        let modes: Vec<String> = self.modes.iter().map(|m| m.to_string()).collect();
        format!("{}|N={}|T={}", modes.join(","), self.n_segments, self.horizon)
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn segment_len(&self) -> f64 {
        self.horizon / self.n_segments as f64
    }

    pub fn dim(&self) -> usize {
        self.modes.len() * self.n_segments
    }

    /// Flat coefficient index of (mode, segment), mode-major.
    pub fn index(&self, mode: usize, segment: usize) -> usize {
        mode * self.n_segments + segment
    }

    /// Inverse of `index`.
    pub fn mode_segment(&self, idx: usize) -> (usize, usize) {
        (idx / self.n_segments, idx % self.n_segments)
    }

    /// Index of the time segment containing `t`; segments are half-open on
    /// the left, so a segment boundary belongs to the earlier segment and
    /// t = 0 belongs to the first.
    pub fn segment_of(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let ds = self.segment_len();
        let j = (t / ds).ceil() as usize;
        j.saturating_sub(1).min(self.n_segments - 1)
    }

    /// Unique string naming one basis element (stable across runs; used for
    /// velocity cache keys).
    pub fn element_descriptor(&self, idx: usize) -> String {
        let (m, j) = self.mode_segment(idx);
        format!(
            "{}|seg={}/{}|T={}",
            self.modes[m],
            j + 1,
            self.n_segments,
            self.horizon
        )
    }

    /// Scalar tangential forcing of one basis element, as g(omega, t).
    pub fn element_forcing(&self, idx: usize) -> impl Fn(f64, f64) -> f64 + '_ {
        let (m, j) = self.mode_segment(idx);
        let mode = self.modes[m];
        move |omega: f64, t: f64| {
            if self.segment_of(t) == j {
                mode.eval(omega)
            } else {
                0.0
            }
        }
    }

    /// Full control g(omega, t) for coefficients `alpha`.
    pub fn eval(&self, alpha: &[f64], omega: f64, t: f64) -> Result<f64> {
        self.check_dim(alpha)?;
        let j = self.segment_of(t);
        let mut g = 0.0;
        for (m, mode) in self.modes.iter().enumerate() {
            g += alpha[self.index(m, j)] * mode.eval(omega);
        }
        Ok(g)
    }

    /// Forcing closure for the flow solver under coefficients `alpha`.
    pub fn forcing<'a>(&'a self, alpha: &'a [f64]) -> impl Fn(f64, f64) -> f64 + 'a {
        move |omega: f64, t: f64| {
            let j = self.segment_of(t);
            let mut g = 0.0;
            for (m, mode) in self.modes.iter().enumerate() {
                g += alpha[self.index(m, j)] * mode.eval(omega);
            }
            g
        }
    }

    fn check_dim(&self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "coefficient vector length {} does not match basis dimension {}",
                alpha.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Analytic Gram matrix of the basis in L2(0,T; L2(Gamma)).
    ///
    /// Circle modes are mutually orthogonal with squared norms 2*pi
    /// (constant) and pi (cos/sin, m >= 1); time segments are disjoint, so
    /// the Gram matrix is diagonal with entries mode_norm^2 * segment
    /// length.
    pub fn gram(&self) -> Result<GramMatrix> {
        let dim = self.dim();
        let ds = self.segment_len();
        let mut entries = vec![0.0; dim * dim];
        for (m, mode) in self.modes.iter().enumerate() {
            for j in 0..self.n_segments {
                let i = self.index(m, j);
                entries[i * dim + i] = mode.circle_inner() * ds;
            }
        }
        GramMatrix::new(dim, entries)
    }

    /// Gram matrix by numerical quadrature over the circular arcs between
    /// consecutive boundary vertices of `mesh` (a validation counterpart of
    /// the analytic `gram`).
    pub fn gram_boundary_quadrature(&self, mesh: &TriMesh) -> Result<Vec<f64>> {
        let nm = self.modes.len();
        let rule = segment_rule_16();
        // Angular inner products sum over exact circle arcs.
        let mut s_omega = vec![0.0; nm * nm];
        let loop_ids = &mesh.boundary_loop;
        for (k, &a) in loop_ids.iter().enumerate() {
            let b = loop_ids[(k + 1) % loop_ids.len()];
            let [xa, ya] = mesh.vertices[a];
            let [xb, yb] = mesh.vertices[b];
            let wa = polar_angle(xa, ya);
            let mut wb = polar_angle(xb, yb);
            if wb <= wa {
                wb += 2.0 * PI;
            }
            let len = wb - wa;
            for (s, w) in rule.points.iter().zip(&rule.weights) {
                let om = wa + len * s;
                let wq = w * len;
                for mi in 0..nm {
                    let vi = self.modes[mi].eval(om);
                    for mj in 0..nm {
                        s_omega[mi * nm + mj] += wq * vi * self.modes[mj].eval(om);
                    }
                }
            }
        }
        let dim = self.dim();
        let ds = self.segment_len();
        let mut g = vec![0.0; dim * dim];
        for mi in 0..nm {
            for mj in 0..nm {
                for j in 0..self.n_segments {
                    let r = self.index(mi, j);
                    let c = self.index(mj, j);
                    g[r * dim + c] = s_omega[mi * nm + mj] * ds;
                }
            }
        }
        Ok(g)
    }

    /// Per-mode amplitude beta_m = sqrt(sum_j alpha_{m,j}^2 * segment_len).
    pub fn mode_amplitudes(&self, alpha: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(alpha)?;
        let ds = self.segment_len();
        Ok((0..self.modes.len())
            .map(|m| {
                (0..self.n_segments)
                    .map(|j| alpha[self.index(m, j)].powi(2) * ds)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }
}

/// Symmetric positive definite Gram matrix with a cached factorization.
pub struct GramMatrix {
    dim: usize,
    entries: Vec<f64>,
    chol: DenseChol,
}

impl GramMatrix {
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {dim}x{dim} Gram matrix",
                entries.len()
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                if (entries[i * dim + j] - entries[j * dim + i]).abs() > 1e-14 {
                    return Err(Error::InvalidParameter(
                        "Gram matrix is not symmetric".into(),
                    ));
                }
            }
        }
        let chol = DenseChol::new(dim, &entries)?;
        Ok(GramMatrix { dim, entries, chol })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    /// y = G x.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim];
        for i in 0..self.dim {
            let row = &self.entries[i * self.dim..(i + 1) * self.dim];
            y[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        y
    }

    /// Solve G b = rhs.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.chol.solve(rhs)
    }

    /// Inner product a' G b.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.apply(a).iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Control norm sqrt(a' G a).
    pub fn norm(&self, a: &[f64]) -> f64 {
        self.inner(a, a).max(0.0).sqrt()
    }
}

/// A cost gradient expressed in the control basis.
#[derive(Debug, Clone)]
pub struct Gradient {
    /// Coefficients of the Riesz representative: grad J = sum b_i g_i.
    pub b: Vec<f64>,
    /// Directional derivatives xi_i = dJ/d(alpha_i); b solves G b = xi.
    pub xi: Vec<f64>,
    /// Squared gradient norm b' G b.
    pub norm_sq: f64,
}

/// Finite-difference stencil for the sampled gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffScheme {
    /// (J(a + d e_i) - J(a)) / d; dim+1 cost evaluations.
    Forward,
    /// (J(a + d e_i) - J(a - d e_i)) / (2 d); 2*dim+1 cost evaluations.
    Central,
}

/// Gradient by differencing the cost; returns the gradient, the cost at
/// `alpha`, and the number of cost evaluations spent.
pub fn gradient_sampled(
    alpha: &[f64],
    gram: &GramMatrix,
    delta: f64,
    scheme: DiffScheme,
    cost: &mut dyn FnMut(&[f64]) -> Result<f64>,
) -> Result<(Gradient, f64, usize)> {
    if alpha.len() != gram.dim() {
        return Err(Error::DimensionMismatch(format!(
            "alpha length {} vs Gram dimension {}",
            alpha.len(),
            gram.dim()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter("difference step must be positive".into()));
    }
    let dim = alpha.len();
    let mut evals = 0;
    let j0 = cost(alpha)?;
    evals += 1;
    let mut xi = vec![0.0; dim];
    let mut probe = alpha.to_vec();
    for i in 0..dim {
        match scheme {
            DiffScheme::Forward => {
                probe[i] = alpha[i] + delta;
                let jp = cost(&probe)?;
                evals += 1;
                xi[i] = (jp - j0) / delta;
            }
            DiffScheme::Central => {
                probe[i] = alpha[i] + delta;
                let jp = cost(&probe)?;
                probe[i] = alpha[i] - delta;
                let jm = cost(&probe)?;
                evals += 2;
                xi[i] = (jp - jm) / (2.0 * delta);
            }
        }
        probe[i] = alpha[i];
    }
    let b = gram.solve(&xi);
    let norm_sq = b.iter().zip(&xi).map(|(x, y)| x * y).sum::<f64>().max(0.0);
    Ok((
        Gradient { b, xi, norm_sq },
        j0,
        evals,
    ))
}

/// Gradient by the variational formula: the directional derivative along
/// basis element g_j is
///
///   xi_j = gamma * (G alpha)_j  +  int_0^T int_Omega theta (grad rho) . v_j,
///
/// where theta is the forward scalar, rho the backward companion, and v_j
/// the flow response of g_j. The Riesz coefficients b solve G b = xi, so
/// the represented gradient has squared norm b' G b = b' xi. One forward
/// and one backward scalar evolution price the whole vector, independent
/// of the basis dimension.
pub fn gradient_vf(
    alpha: &[f64],
    gram: &GramMatrix,
    gamma: f64,
    dg: &DgSpace,
    vspace: &VelocitySpace,
    theta: &DgTrajectory,
    rho: &DgTrajectory,
    vels: &BasisVelocities,
) -> Result<Gradient> {
    if alpha.len() != gram.dim() {
        return Err(Error::DimensionMismatch(format!(
            "alpha length {} vs Gram dimension {}",
            alpha.len(),
            gram.dim()
        )));
    }
    if vels.trajectories.len() != alpha.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} basis velocities for {} coefficients",
            vels.trajectories.len(),
            alpha.len()
        )));
    }
    let vol = dg.vf_volume_term(theta, rho, vels, vspace)?;
    let ga = gram.apply(alpha);
    let xi: Vec<f64> = ga
        .iter()
        .zip(&vol)
        .map(|(p, v)| gamma * p + v)
        .collect();
    let b = gram.solve(&xi);
    let norm_sq = b.iter().zip(&xi).map(|(x, y)| x * y).sum::<f64>().max(0.0);
    Ok(Gradient { b, xi, norm_sq })
}

/// Sampled gradient with the production stencil (forward differences).
pub fn gradient_ad(
    alpha: &[f64],
    gram: &GramMatrix,
    delta: f64,
    cost: &mut dyn FnMut(&[f64]) -> Result<f64>,
) -> Result<(Gradient, f64, usize)> {
    gradient_sampled(alpha, gram, delta, DiffScheme::Forward, cost)
}
