//! Gradient descent over control coefficients with Armijo backtracking,
//! three-part stopping tests, adaptive step scaling, and a coarse-to-fine
//! relay mode, plus binary checkpoints that make long runs restartable.
//!
//! The outer loop repeats: evaluate the cost and its gradient, walk downhill
//! along the Riesz representative of the gradient with a halving line
//! search, double the step budget for the next round from the accepted step,
//! and stop when the scaled gradient, the iteration budget, or the relative
//! change of iterate and cost says so.

use crate::control::{gradient_sampled, gradient_vf, ControlBasis, DiffScheme, Gradient, GramMatrix};
use crate::error::{Error, Result};
use crate::mesh::TriMesh;
use crate::mixnorm::{CostBreakdown, MixNorm};
use crate::stokes::{
    precompute_basis, BasisVelocities, StokesConfig, StokesSolver, VelocitySpace,
    VelocityTrajectory,
};
use crate::transport::{DgField, DgSpace, DgTrajectory, Direction};
use sha2::{Digest, Sha256};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Sentinel for "no change measured yet": relative changes start effectively
/// infinite so the first outer iteration always runs.
const CHANGE_SENTINEL: f64 = 1e10;

/// Sentinel cost before the first line-search trial.
const COST_SENTINEL: f64 = 1e10;

/// How the cost gradient is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMethod {
    /// Adjoint-based gradient: one forward and one backward transport pays
    /// for the whole coefficient vector.
    Vf,
    /// Sampled gradient: forward finite differences of the cost, one extra
    /// forward evolution per basis function.
    Ad,
}

impl GradientMethod {
    pub fn parse(s: &str) -> Result<GradientMethod> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vf" => Ok(GradientMethod::Vf),
            "ad" => Ok(GradientMethod::Ad),
            other => Err(Error::Parse(format!(
                "unknown gradient method '{other}' (expected 'vf' or 'ad')"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            GradientMethod::Vf => "vf",
            GradientMethod::Ad => "ad",
        }
    }
}

/// Knobs of the descent loop.
#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    /// Weight of the quadratic control penalty in the cost.
    pub gamma: f64,
    /// Stopping tolerance shared by all three stopping tests.
    pub tol: f64,
    /// Sufficient-descent fraction of the line search.
    pub mu: f64,
    /// Cap on line-search trials per outer iteration.
    pub back_max: usize,
    /// Cap on outer iterations.
    pub grad_max: usize,
    /// Step budget of the first outer iteration; later budgets adapt to
    /// twice the previously accepted step.
    pub step_scale0: f64,
    /// Gradient computation method.
    pub method: GradientMethod,
    /// Finite-difference step of the sampled gradient.
    pub delta: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            gamma: 1e-3,
            tol: 1e-5,
            mu: 0.3,
            back_max: 10,
            grad_max: 1000,
            step_scale0: 1e3,
            method: GradientMethod::Vf,
            delta: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidParameter("penalty weight must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("stopping tolerance must be positive".into()));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::InvalidParameter(
                "descent fraction must lie strictly between 0 and 1".into(),
            ));
        }
        if !(self.step_scale0 > 0.0) {
            return Err(Error::InvalidParameter("initial step budget must be positive".into()));
        }
        if self.back_max == 0 {
            return Err(Error::InvalidParameter("need at least one line-search trial".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidParameter("difference step must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to price a coefficient vector: spaces, basis flows,
/// initial scalar, Gram geometry, and the penalty weight.
pub struct CostEngine {
    pub dg: DgSpace,
    pub vspace: Arc<VelocitySpace>,
    pub mixnorm: MixNorm,
    pub basis: ControlBasis,
    pub gram: GramMatrix,
    pub vels: BasisVelocities,
    pub theta0: DgField,
    pub gamma: f64,
}

/// One priced coefficient vector with the by-products that later stages
/// reuse: the combined flow, the scalar trajectory, and the companion field
/// of the terminal scalar.
pub struct Evaluation {
    pub cost: CostBreakdown,
    pub velocity: VelocityTrajectory,
    pub theta: DgTrajectory,
    pub companion: DgField,
}

impl CostEngine {
    pub fn new(
        dg: DgSpace,
        vspace: Arc<VelocitySpace>,
        mixnorm: MixNorm,
        basis: ControlBasis,
        gram: GramMatrix,
        vels: BasisVelocities,
        theta0: DgField,
        gamma: f64,
    ) -> Result<Self> {
        if gram.dim() != basis.dim() {
            return Err(Error::DimensionMismatch(format!(
                "Gram dimension {} vs basis dimension {}",
                gram.dim(),
                basis.dim()
            )));
        }
        if vels.trajectories.len() != basis.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} basis flows for a basis of dimension {}",
                vels.trajectories.len(),
                basis.dim()
            )));
        }
        if !(gamma > 0.0) {
            return Err(Error::InvalidParameter("penalty weight must be positive".into()));
        }
        let horizon = basis.horizon();
        for tr in &vels.trajectories {
            if tr.t_end() + 1e-9 < horizon {
                return Err(Error::CadenceMismatch(format!(
                    "basis flow ends at t={} before the control horizon {horizon}",
                    tr.t_end()
                )));
            }
        }
        Ok(CostEngine {
            dg,
            vspace,
            mixnorm,
            basis,
            gram,
            vels,
            theta0,
            gamma,
        })
    }

    /// Assemble the whole pricing pipeline for one mesh: flow solver, basis
    /// flow responses (cached under `cache_dir` when given), transport and
    /// companion spaces, analytic Gram matrix, and the projected initial
    /// scalar.
    pub fn build(
        mesh: Arc<TriMesh>,
        dg_degree: usize,
        basis: ControlBasis,
        gamma: f64,
        flow: StokesConfig,
        theta0: &dyn Fn(f64, f64) -> f64,
        cache_dir: Option<&Path>,
    ) -> Result<CostEngine> {
        let solver = StokesSolver::new(mesh.clone(), flow)?;
        let vels = precompute_basis(&solver, &basis, cache_dir)?;
        let vspace = solver.space.clone();
        let dg = DgSpace::new(mesh.clone(), &vspace, dg_degree)?;
        let mixnorm = MixNorm::new(mesh)?;
        let gram = basis.gram()?;
        let theta0 = dg.project(theta0);
        CostEngine::new(dg, vspace, mixnorm, basis, gram, vels, theta0, gamma)
    }

    /// Price one coefficient vector: combine the basis flows, transport the
    /// initial scalar over the horizon, and assemble the cost.
    pub fn evaluate(&self, alpha: &[f64]) -> Result<Evaluation> {
        let velocity = self.vels.combine(alpha)?;
        let theta = self.dg.evolve(
            &self.theta0,
            &self.vspace,
            &velocity,
            0.0,
            self.basis.horizon(),
            Direction::Forward,
        )?;
        let (cost, companion) = self.mixnorm.cost_with_companion(
            &self.dg,
            theta.final_field(),
            alpha,
            &self.gram,
            self.gamma,
        )?;
        Ok(Evaluation {
            cost,
            velocity,
            theta,
            companion,
        })
    }

    /// Backward transport of the companion field through the evaluation's
    /// flow: the second trajectory of the adjoint gradient formula.
    pub fn backward(&self, ev: &Evaluation) -> Result<DgTrajectory> {
        self.dg.evolve(
            &ev.companion,
            &self.vspace,
            &ev.velocity,
            0.0,
            self.basis.horizon(),
            Direction::Backward,
        )
    }

    /// Gradient at `alpha` given its evaluation; returns the gradient and
    /// the number of extra cost evaluations spent (zero for the adjoint
    /// method, dimension + 1 for the sampled method).
    pub fn gradient(
        &self,
        alpha: &[f64],
        ev: &Evaluation,
        method: GradientMethod,
        delta: f64,
    ) -> Result<(Gradient, usize)> {
        match method {
            GradientMethod::Vf => {
                let rho = self.backward(ev)?;
                let g = gradient_vf(
                    alpha,
                    &self.gram,
                    self.gamma,
                    &self.dg,
                    &self.vspace,
                    &ev.theta,
                    &rho,
                    &self.vels,
                )?;
                Ok((g, 0))
            }
            GradientMethod::Ad => {
                let mut cost = |a: &[f64]| -> Result<f64> { Ok(self.evaluate(a)?.cost.total) };
                let (g, _, evals) =
                    gradient_sampled(alpha, &self.gram, delta, DiffScheme::Forward, &mut cost)?;
                Ok((g, evals))
            }
        }
    }
}

/// Relative change of the iterate and of the cost across the last accepted
/// step; both start at a large sentinel so the loop always takes a first
/// step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelChange {
    /// ||g - g_prev|| / ||g_prev|| (absolute change when the previous
    /// control is zero).
    pub step: f64,
    /// |J - J_prev| / J_prev (absolute change when the previous cost is
    /// zero).
    pub cost: f64,
}

impl RelChange {
    pub fn fresh() -> Self {
        RelChange {
            step: CHANGE_SENTINEL,
            cost: CHANGE_SENTINEL,
        }
    }

    /// Both changes at or below the tolerance.
    pub fn small(&self, tol: f64) -> bool {
        self.step <= tol && self.cost <= tol
    }
}

fn rel_or_abs(num: f64, den: f64) -> f64 {
    if den.abs() > 0.0 {
        num / den.abs()
    } else {
        num
    }
}

/// Outcome of one halving line search.
#[derive(Debug, Clone)]
pub struct Backtrack {
    /// Accepted step length.
    pub beta: f64,
    /// Accepted iterate.
    pub alpha: Vec<f64>,
    /// Cost at the accepted iterate.
    pub cost: f64,
    /// Number of trials priced.
    pub count: usize,
    /// Whether the sufficient-descent test held at acceptance. The search
    /// also exits on the trial cap or when both relative changes drop below
    /// tolerance; the last trial is then accepted anyway and flagged here.
    pub armijo: bool,
}

/// Halving line search along -b from `alpha_n`.
///
/// Trials start at the step budget `step_scale` and halve; a trial is
/// accepted as soon as its cost drops below the sufficient-descent target
/// J(alpha_n) - beta * mu * |grad J|^2. The relative changes in `change`
/// persist across calls (they carry the previous outer iteration's values
/// in) and are updated by every trial.
#[allow(clippy::too_many_arguments)]
pub fn backtrack(
    alpha_n: &[f64],
    b: &[f64],
    j_n: f64,
    grad_norm_sq: f64,
    control_norm_n: f64,
    step_scale: f64,
    change: &mut RelChange,
    cfg: &OptimizerConfig,
    cost: &mut dyn FnMut(&[f64]) -> Result<f64>,
) -> Result<Backtrack> {
    if !(grad_norm_sq > 0.0) {
        return Err(Error::InvalidParameter(
            "line search needs a nonzero gradient".into(),
        ));
    }
    if alpha_n.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "iterate length {} vs direction length {}",
            alpha_n.len(),
            b.len()
        )));
    }
    let grad_norm = grad_norm_sq.sqrt();
    let mut beta = 2.0 * step_scale;
    let mut jcost = COST_SENTINEL;
    let mut count = 0usize;
    let mut alpha = alpha_n.to_vec();
    while count < cfg.back_max
        && jcost >= j_n - beta * cfg.mu * grad_norm_sq
        && !change.small(cfg.tol)
    {
        beta *= 0.5;
        for (a, (an, bi)) in alpha.iter_mut().zip(alpha_n.iter().zip(b)) {
            *a = an - beta * bi;
        }
        jcost = cost(&alpha)?;
        change.step = rel_or_abs(beta * grad_norm, control_norm_n);
        change.cost = rel_or_abs((jcost - j_n).abs(), j_n);
        count += 1;
    }
    if count == 0 {
        // Entry condition failed before any trial: either the changes were
        // already quiet (the caller should have stopped) or the descent
        // target exceeds the cost sentinel. Nothing was priced, so there is
        // nothing to accept.
        return Err(Error::InvalidParameter(
            "line search made no trial; stopping tests should have fired first".into(),
        ));
    }
    let armijo = jcost < j_n - beta * cfg.mu * grad_norm_sq;
    Ok(Backtrack {
        beta,
        alpha,
        cost: jcost,
        count,
        armijo,
    })
}

/// One accepted iterate with everything measured about it.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// Relay stage this iterate belongs to (0 for single-mesh runs).
    pub stage: usize,
    /// Outer iteration number within the stage; 0 is the stage's starting
    /// point.
    pub n: usize,
    /// Coefficient vector.
    pub alpha: Vec<f64>,
    /// Cost at `alpha`, split into parts.
    pub cost: CostBreakdown,
    /// Gradient coefficients at `alpha`.
    pub b: Vec<f64>,
    /// Squared gradient norm b' G b.
    pub grad_norm_sq: f64,
    /// Step that produced this iterate (0 for n = 0).
    pub beta: f64,
    /// Line-search trials spent producing this iterate.
    pub backtracks: usize,
    /// Whether sufficient descent held at acceptance.
    pub armijo: bool,
    /// Relative control change at acceptance (sentinel at n = 0).
    pub step_change: f64,
    /// Relative cost change at acceptance (sentinel at n = 0).
    pub cost_change: f64,
    /// Scaled gradient size ||grad J|| / (1 + J), the tolerance stopping
    /// test.
    pub grad_measure: f64,
}

/// Which stopping tests fired; several can fire on the same iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StopFlags {
    /// ||grad J|| / (1 + J) at or below tolerance.
    pub gradient_small: bool,
    /// Outer iteration cap reached.
    pub iteration_cap: bool,
    /// Both relative changes at or below tolerance.
    pub change_small: bool,
}

impl StopFlags {
    pub fn any(&self) -> bool {
        self.gradient_small || self.iteration_cap || self.change_small
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.gradient_small {
            parts.push("gradient tolerance");
        }
        if self.iteration_cap {
            parts.push("iteration cap");
        }
        if self.change_small {
            parts.push("small relative change");
        }
        if parts.is_empty() {
            parts.push("still running");
        }
        parts.join(", ")
    }
}

/// Full trace of a finished (or checkpoint-reconstructed) run.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    /// Every accepted iterate, across all stages, in order.
    pub records: Vec<IterationRecord>,
    /// Stopping tests that ended the final stage.
    pub stop: StopFlags,
    /// Final coefficient vector.
    pub final_alpha: Vec<f64>,
    /// Wall-clock seconds per labeled phase.
    pub phases: Vec<(String, f64)>,
    /// Total cost evaluations across the run.
    pub cost_evals: usize,
    /// Total line-search trials across the run.
    pub backtrack_total: usize,
}

impl OptimizerState {
    pub fn final_record(&self) -> &IterationRecord {
        self.records.last().expect("a run records at least its start")
    }

    /// Cost totals in iterate order.
    pub fn cost_history(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.cost.total).collect()
    }

    /// Outer iterations of the final stage.
    pub fn outer_iterations(&self) -> usize {
        self.final_record().n
    }

    /// Cost re-evaluations at stage transitions: (record index of the new
    /// stage's start, previous stage's final cost, re-evaluated cost). An
    /// upward jump here reflects pricing the same control on a finer mesh
    /// and is expected, not an error.
    pub fn stage_jumps(&self) -> Vec<(usize, f64, f64)> {
        let mut jumps = Vec::new();
        for k in 1..self.records.len() {
            if self.records[k].stage != self.records[k - 1].stage {
                jumps.push((k, self.records[k - 1].cost.total, self.records[k].cost.total));
            }
        }
        jumps
    }
}

/// Derive evaluation counters from the record trace: the stage start costs
/// one evaluation, every later iterate costs its line-search trials, and
/// the sampled gradient adds dimension + 1 per record.
fn counters_from_records(
    records: &[IterationRecord],
    method: GradientMethod,
    dim: usize,
) -> (usize, usize) {
    let mut evals = 0usize;
    let mut backtracks = 0usize;
    for r in records {
        evals += if r.n == 0 { 1 } else { r.backtracks };
        backtracks += r.backtracks;
        if method == GradientMethod::Ad {
            evals += dim + 1;
        }
    }
    (evals, backtracks)
}

/// Mutable loop state between outer iterations; exactly what a checkpoint
/// persists.
struct LoopState {
    stage: usize,
    n: usize,
    alpha: Vec<f64>,
    step_scale: f64,
    change: RelChange,
    records: Vec<IterationRecord>,
}

/// Identity of a run for checkpoint validation.
struct CheckpointIdentity {
    config_hash: String,
    mesh_hash: String,
    basis_descriptor: String,
}

fn identity(engine: &CostEngine, cfg: &OptimizerConfig) -> CheckpointIdentity {
    let mut h = Sha256::new();
    h.update(b"stirmix optimizer config v1\n");
    h.update(engine.basis.descriptor().as_bytes());
    for v in [engine.gamma, cfg.tol, cfg.mu, cfg.step_scale0, cfg.delta] {
        h.update(v.to_le_bytes());
    }
    h.update((cfg.back_max as u64).to_le_bytes());
    h.update((cfg.grad_max as u64).to_le_bytes());
    h.update([match cfg.method {
        GradientMethod::Vf => 0u8,
        GradientMethod::Ad => 1u8,
    }]);
    h.update((engine.dg.degree() as u64).to_le_bytes());
    let tr = &engine.vels.trajectories[0];
    h.update(tr.dt.to_le_bytes());
    h.update(tr.slip_k.to_le_bytes());
    for c in &engine.theta0.coeffs {
        h.update(c.to_le_bytes());
    }
    let digest = h.finalize();
    let config_hash: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    CheckpointIdentity {
        config_hash,
        mesh_hash: engine.dg.mesh.content_hash(),
        basis_descriptor: engine.basis.descriptor(),
    }
}

/// Evaluate and measure the starting iterate of a stage.
fn stage_start(
    engine: &CostEngine,
    cfg: &OptimizerConfig,
    alpha: &[f64],
    stage: usize,
) -> Result<IterationRecord> {
    let ev = engine.evaluate(alpha)?;
    let (grad, _) = engine.gradient(alpha, &ev, cfg.method, cfg.delta)?;
    let grad_measure = grad.norm_sq.max(0.0).sqrt() / (1.0 + ev.cost.total);
    Ok(IterationRecord {
        stage,
        n: 0,
        alpha: alpha.to_vec(),
        cost: ev.cost,
        b: grad.b,
        grad_norm_sq: grad.norm_sq,
        beta: 0.0,
        backtracks: 0,
        armijo: true,
        step_change: CHANGE_SENTINEL,
        cost_change: CHANGE_SENTINEL,
        grad_measure,
    })
}

/// Run the outer loop from `st` until a stopping test fires, checkpointing
/// after every iteration when `ckpt` is given.
fn drive(
    engine: &CostEngine,
    cfg: &OptimizerConfig,
    mut st: LoopState,
    ckpt: Option<(&Path, &CheckpointIdentity)>,
) -> Result<(LoopState, StopFlags)> {
    loop {
        let last = st.records.last().expect("loop state carries a record");
        let flags = StopFlags {
            gradient_small: last.grad_measure <= cfg.tol,
            iteration_cap: st.n >= cfg.grad_max,
            change_small: st.change.small(cfg.tol),
        };
        if flags.any() {
            if let Some((path, id)) = ckpt {
                write_checkpoint(path, &checkpoint_of(&st, id, Some(flags)))?;
            }
            return Ok((st, flags));
        }

        let j_n = last.cost.total;
        let b = last.b.clone();
        let grad_norm_sq = last.grad_norm_sq;
        let control_norm = engine.gram.norm(&st.alpha);

        let mut stash: Option<Evaluation> = None;
        let mut oracle = |a: &[f64]| -> Result<f64> {
            let e = engine.evaluate(a)?;
            let j = e.cost.total;
            stash = Some(e);
            Ok(j)
        };
        let bt = backtrack(
            &st.alpha,
            &b,
            j_n,
            grad_norm_sq,
            control_norm,
            st.step_scale,
            &mut st.change,
            cfg,
            &mut oracle,
        )?;
        let ev = stash.expect("line search priced at least one trial");

        let (grad, _) = engine.gradient(&bt.alpha, &ev, cfg.method, cfg.delta)?;
        let grad_measure = grad.norm_sq.max(0.0).sqrt() / (1.0 + ev.cost.total);
        st.step_scale = 2.0 * bt.beta;
        st.n += 1;
        st.alpha = bt.alpha.clone();
        st.records.push(IterationRecord {
            stage: st.stage,
            n: st.n,
            alpha: bt.alpha,
            cost: ev.cost,
            b: grad.b,
            grad_norm_sq: grad.norm_sq,
            beta: bt.beta,
            backtracks: bt.count,
            armijo: bt.armijo,
            step_change: st.change.step,
            cost_change: st.change.cost,
            grad_measure,
        });
        if let Some((path, id)) = ckpt {
            write_checkpoint(path, &checkpoint_of(&st, id, None))?;
        }
    }
}

fn assemble_state(
    records: Vec<IterationRecord>,
    stop: StopFlags,
    phases: Vec<(String, f64)>,
    method: GradientMethod,
    dim: usize,
) -> OptimizerState {
    let (cost_evals, backtrack_total) = counters_from_records(&records, method, dim);
    let final_alpha = records
        .last()
        .map(|r| r.alpha.clone())
        .unwrap_or_default();
    OptimizerState {
        records,
        stop,
        final_alpha,
        phases,
        cost_evals,
        backtrack_total,
    }
}

/// Descent on a single mesh from `alpha0`. When `ckpt` is given, the loop
/// state is persisted there after the starting evaluation and after every
/// outer iteration (overwriting any previous file).
pub fn run_basic(
    engine: &CostEngine,
    cfg: &OptimizerConfig,
    alpha0: &[f64],
    ckpt: Option<&Path>,
) -> Result<OptimizerState> {
    cfg.validate()?;
    if alpha0.len() != engine.basis.dim() {
        return Err(Error::DimensionMismatch(format!(
            "starting vector length {} vs basis dimension {}",
            alpha0.len(),
            engine.basis.dim()
        )));
    }
    let id = identity(engine, cfg);
    let t0 = Instant::now();
    let rec0 = stage_start(engine, cfg, alpha0, 0)?;
    let init_s = t0.elapsed().as_secs_f64();
    let st = LoopState {
        stage: 0,
        n: 0,
        alpha: alpha0.to_vec(),
        step_scale: cfg.step_scale0,
        change: RelChange::fresh(),
        records: vec![rec0],
    };
    if let Some(path) = ckpt {
        write_checkpoint(path, &checkpoint_of(&st, &id, None))?;
    }
    let t1 = Instant::now();
    let (st, stop) = drive(engine, cfg, st, ckpt.map(|p| (p, &id)))?;
    let iter_s = t1.elapsed().as_secs_f64();
    Ok(assemble_state(
        st.records,
        stop,
        vec![
            ("start evaluation".into(), init_s),
            ("descent".into(), iter_s),
        ],
        cfg.method,
        engine.basis.dim(),
    ))
}

/// One stage of a coarse-to-fine relay.
pub struct RelayStage<'a> {
    /// Human-readable stage name (e.g. the mesh size).
    pub label: String,
    pub engine: &'a CostEngine,
}

fn stage_ckpt_path(base: &Path, stage: usize) -> PathBuf {
    let mut name = base.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".stage{stage}"));
    base.with_file_name(name)
}

/// Coarse-to-fine relay: run the basic loop per stage, seeding each stage
/// with the previous stage's final iterate. The first record of a new stage
/// prices the carried-over control on the new mesh, so its cost may jump
/// upward relative to the previous record; `OptimizerState::stage_jumps`
/// reports these.
pub fn run_relay(
    stages: &[RelayStage<'_>],
    cfg: &OptimizerConfig,
    alpha0: &[f64],
    ckpt_base: Option<&Path>,
) -> Result<OptimizerState> {
    cfg.validate()?;
    if stages.is_empty() {
        return Err(Error::InvalidParameter("relay needs at least one stage".into()));
    }
    let descriptor = stages[0].engine.basis.descriptor();
    for s in stages {
        if s.engine.basis.descriptor() != descriptor {
            return Err(Error::InvalidParameter(
                "all relay stages must share one control basis".into(),
            ));
        }
    }
    if alpha0.len() != stages[0].engine.basis.dim() {
        return Err(Error::DimensionMismatch(format!(
            "starting vector length {} vs basis dimension {}",
            alpha0.len(),
            stages[0].engine.basis.dim()
        )));
    }
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut phases: Vec<(String, f64)> = Vec::new();
    let mut alpha = alpha0.to_vec();
    let mut stop = StopFlags::default();
    for (k, stg) in stages.iter().enumerate() {
        let id = identity(stg.engine, cfg);
        let path = ckpt_base.map(|b| stage_ckpt_path(b, k));
        let t0 = Instant::now();
        let rec0 = stage_start(stg.engine, cfg, &alpha, k)?;
        records.push(rec0);
        let st = LoopState {
            stage: k,
            n: 0,
            alpha: alpha.clone(),
            step_scale: cfg.step_scale0,
            change: RelChange::fresh(),
            records,
        };
        if let Some(p) = &path {
            write_checkpoint(p, &checkpoint_of(&st, &id, None))?;
        }
        let (st, flags) = drive(stg.engine, cfg, st, path.as_deref().map(|p| (p, &id)))?;
        phases.push((
            format!("stage {} ({})", k + 1, stg.label),
            t0.elapsed().as_secs_f64(),
        ));
        records = st.records;
        alpha = st.alpha;
        stop = flags;
    }
    Ok(assemble_state(
        records,
        stop,
        phases,
        cfg.method,
        stages[0].engine.basis.dim(),
    ))
}

/// Persisted loop state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    pub mesh_hash: String,
    pub basis_descriptor: String,
    pub stage: usize,
    pub n: usize,
    pub step_scale: f64,
    pub change: RelChange,
    pub alpha: Vec<f64>,
    pub records: Vec<IterationRecord>,
    /// Present when the run finished; resuming then just reloads the state.
    pub finished: Option<StopFlags>,
}

fn checkpoint_of(st: &LoopState, id: &CheckpointIdentity, finished: Option<StopFlags>) -> Checkpoint {
    Checkpoint {
        config_hash: id.config_hash.clone(),
        mesh_hash: id.mesh_hash.clone(),
        basis_descriptor: id.basis_descriptor.clone(),
        stage: st.stage,
        n: st.n,
        step_scale: st.step_scale,
        change: st.change,
        alpha: st.alpha.clone(),
        records: st.records.clone(),
        finished,
    }
}

const CKPT_MAGIC: &[u8] = b"STIRCKPT v1\n";

fn write_str(f: &mut impl Write, s: &str) -> Result<()> {
    f.write_all(&(s.len() as u64).to_le_bytes())?;
    f.write_all(s.as_bytes())?;
    Ok(())
}

fn write_vec(f: &mut impl Write, v: &[f64]) -> Result<()> {
    f.write_all(&(v.len() as u64).to_le_bytes())?;
    for x in v {
        f.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(f: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(f: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_u8(f: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    f.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_str(f: &mut impl Read) -> Result<String> {
    let len = read_u64(f)? as usize;
    if len > 1 << 20 {
        return Err(Error::Format("unreasonable string length in checkpoint".into()));
    }
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
}

fn read_vec(f: &mut impl Read) -> Result<Vec<f64>> {
    let len = read_u64(f)? as usize;
    if len > 1 << 24 {
        return Err(Error::Format("unreasonable vector length in checkpoint".into()));
    }
    let mut v = Vec::with_capacity(len);
    for _ in 0..len {
        v.push(read_f64(f)?);
    }
    Ok(v)
}

/// Write a checkpoint atomically (temporary file, then rename).
pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(CKPT_MAGIC)?;
        write_str(&mut f, &ck.config_hash)?;
        write_str(&mut f, &ck.mesh_hash)?;
        write_str(&mut f, &ck.basis_descriptor)?;
        f.write_all(&(ck.stage as u64).to_le_bytes())?;
        f.write_all(&(ck.n as u64).to_le_bytes())?;
        f.write_all(&ck.step_scale.to_le_bytes())?;
        f.write_all(&ck.change.step.to_le_bytes())?;
        f.write_all(&ck.change.cost.to_le_bytes())?;
        match ck.finished {
            None => f.write_all(&[0u8; 4])?,
            Some(flags) => f.write_all(&[
                1u8,
                flags.gradient_small as u8,
                flags.iteration_cap as u8,
                flags.change_small as u8,
            ])?,
        }
        write_vec(&mut f, &ck.alpha)?;
        f.write_all(&(ck.records.len() as u64).to_le_bytes())?;
        for r in &ck.records {
            f.write_all(&(r.stage as u64).to_le_bytes())?;
            f.write_all(&(r.n as u64).to_le_bytes())?;
            write_vec(&mut f, &r.alpha)?;
            for v in [
                r.cost.mix_part,
                r.cost.penalty_part,
                r.cost.total,
                r.cost.mix_norm,
                r.cost.g_norm,
            ] {
                f.write_all(&v.to_le_bytes())?;
            }
            write_vec(&mut f, &r.b)?;
            f.write_all(&r.grad_norm_sq.to_le_bytes())?;
            f.write_all(&r.beta.to_le_bytes())?;
            f.write_all(&(r.backtracks as u64).to_le_bytes())?;
            f.write_all(&[r.armijo as u8])?;
            f.write_all(&r.step_change.to_le_bytes())?;
            f.write_all(&r.cost_change.to_le_bytes())?;
            f.write_all(&r.grad_measure.to_le_bytes())?;
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = BufReader::new(std::fs::File::open(path)?);
    let mut magic = vec![0u8; CKPT_MAGIC.len()];
    f.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let config_hash = read_str(&mut f)?;
    let mesh_hash = read_str(&mut f)?;
    let basis_descriptor = read_str(&mut f)?;
    let stage = read_u64(&mut f)? as usize;
    let n = read_u64(&mut f)? as usize;
    let step_scale = read_f64(&mut f)?;
    let change = RelChange {
        step: read_f64(&mut f)?,
        cost: read_f64(&mut f)?,
    };
    let finished = match read_u8(&mut f)? {
        0 => {
            let _ = (read_u8(&mut f)?, read_u8(&mut f)?, read_u8(&mut f)?);
            None
        }
        1 => Some(StopFlags {
            gradient_small: read_u8(&mut f)? != 0,
            iteration_cap: read_u8(&mut f)? != 0,
            change_small: read_u8(&mut f)? != 0,
        }),
        _ => return Err(Error::Format("bad finished marker in checkpoint".into())),
    };
    let alpha = read_vec(&mut f)?;
    let n_records = read_u64(&mut f)? as usize;
    if n_records > 1 << 24 {
        return Err(Error::Format("unreasonable record count in checkpoint".into()));
    }
    let mut records = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let stage = read_u64(&mut f)? as usize;
        let n = read_u64(&mut f)? as usize;
        let alpha = read_vec(&mut f)?;
        let cost = CostBreakdown {
            mix_part: read_f64(&mut f)?,
            penalty_part: read_f64(&mut f)?,
            total: read_f64(&mut f)?,
            mix_norm: read_f64(&mut f)?,
            g_norm: read_f64(&mut f)?,
        };
        let b = read_vec(&mut f)?;
        let grad_norm_sq = read_f64(&mut f)?;
        let beta = read_f64(&mut f)?;
        let backtracks = read_u64(&mut f)? as usize;
        let armijo = read_u8(&mut f)? != 0;
        let step_change = read_f64(&mut f)?;
        let cost_change = read_f64(&mut f)?;
        let grad_measure = read_f64(&mut f)?;
        records.push(IterationRecord {
            stage,
            n,
            alpha,
            cost,
            b,
            grad_norm_sq,
            beta,
            backtracks,
            armijo,
            step_change,
            cost_change,
            grad_measure,
        });
    }
    Ok(Checkpoint {
        config_hash,
        mesh_hash,
        basis_descriptor,
        stage,
        n,
        step_scale,
        change,
        alpha,
        records,
        finished,
    })
}

fn validate_checkpoint(ck: &Checkpoint, id: &CheckpointIdentity) -> Result<()> {
    if ck.basis_descriptor != id.basis_descriptor {
        return Err(Error::CacheMismatch(format!(
            "checkpoint basis '{}' does not match '{}'",
            ck.basis_descriptor, id.basis_descriptor
        )));
    }
    if ck.mesh_hash != id.mesh_hash {
        return Err(Error::CacheMismatch(
            "checkpoint was written for a different mesh".into(),
        ));
    }
    if ck.config_hash != id.config_hash {
        return Err(Error::CacheMismatch(
            "checkpoint was written under a different configuration".into(),
        ));
    }
    Ok(())
}

/// Continue a single-mesh run from its checkpoint. A finished checkpoint is
/// reloaded as-is; an unfinished one resumes the outer loop and keeps
/// checkpointing to the same file. The continued iterate sequence is
/// identical to the uninterrupted run's.
pub fn resume_basic(
    engine: &CostEngine,
    cfg: &OptimizerConfig,
    path: &Path,
) -> Result<OptimizerState> {
    cfg.validate()?;
    let ck = read_checkpoint(path)?;
    let id = identity(engine, cfg);
    validate_checkpoint(&ck, &id)?;
    if let Some(flags) = ck.finished {
        return Ok(assemble_state(
            ck.records,
            flags,
            vec![("reload of a finished run".into(), 0.0)],
            cfg.method,
            engine.basis.dim(),
        ));
    }
    let st = LoopState {
        stage: ck.stage,
        n: ck.n,
        alpha: ck.alpha,
        step_scale: ck.step_scale,
        change: ck.change,
        records: ck.records,
    };
    let t0 = Instant::now();
    let (st, stop) = drive(engine, cfg, st, Some((path, &id)))?;
    Ok(assemble_state(
        st.records,
        stop,
        vec![("resumed descent".into(), t0.elapsed().as_secs_f64())],
        cfg.method,
        engine.basis.dim(),
    ))
}

/// Continue a relay from its per-stage checkpoints (`<base>.stage<k>`).
/// Finished stages are reloaded, an unfinished stage resumes mid-loop, and
/// stages never started run fresh, seeded exactly as in `run_relay`.
pub fn resume_relay(
    stages: &[RelayStage<'_>],
    cfg: &OptimizerConfig,
    alpha0: &[f64],
    ckpt_base: &Path,
) -> Result<OptimizerState> {
    cfg.validate()?;
    if stages.is_empty() {
        return Err(Error::InvalidParameter("relay needs at least one stage".into()));
    }
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut phases: Vec<(String, f64)> = Vec::new();
    let mut alpha = alpha0.to_vec();
    let mut stop = StopFlags::default();
    for (k, stg) in stages.iter().enumerate() {
        let id = identity(stg.engine, cfg);
        let path = stage_ckpt_path(ckpt_base, k);
        let t0 = Instant::now();
        if path.exists() {
            let ck = read_checkpoint(&path)?;
            validate_checkpoint(&ck, &id)?;
            if let Some(flags) = ck.finished {
                records = ck.records;
                alpha = ck.alpha;
                stop = flags;
                phases.push((format!("stage {} ({}): reloaded", k + 1, stg.label), 0.0));
                continue;
            }
            let st = LoopState {
                stage: ck.stage,
                n: ck.n,
                alpha: ck.alpha,
                step_scale: ck.step_scale,
                change: ck.change,
                records: ck.records,
            };
            let (st, flags) = drive(stg.engine, cfg, st, Some((&path, &id)))?;
            records = st.records;
            alpha = st.alpha;
            stop = flags;
            phases.push((
                format!("stage {} ({}): resumed", k + 1, stg.label),
                t0.elapsed().as_secs_f64(),
            ));
        } else {
            let rec0 = stage_start(stg.engine, cfg, &alpha, k)?;
            records.push(rec0);
            let st = LoopState {
                stage: k,
                n: 0,
                alpha: alpha.clone(),
                step_scale: cfg.step_scale0,
                change: RelChange::fresh(),
                records,
            };
            write_checkpoint(&path, &checkpoint_of(&st, &id, None))?;
            let (st, flags) = drive(stg.engine, cfg, st, Some((&path, &id)))?;
            records = st.records;
            alpha = st.alpha;
            stop = flags;
            phases.push((
                format!("stage {} ({})", k + 1, stg.label),
                t0.elapsed().as_secs_f64(),
            ));
        }
    }
    Ok(assemble_state(
        records,
        stop,
        phases,
        cfg.method,
        stages[0].engine.basis.dim(),
    ))
}

/// Empirical order of a cost sequence approaching `target` (defaulting to
/// the sequence's own final value): for consecutive gaps e_k the local
/// order is ln|e_{k+2}/e_{k+1}| / ln|e_{k+1}/e_k|. Windows with a vanished
/// gap or a stagnant ratio are skipped and counted.
#[derive(Debug, Clone)]
pub struct RateReport {
    pub rates: Vec<f64>,
    pub mean: f64,
    pub skipped: usize,
}

pub fn convergence_rate(costs: &[f64], target: Option<f64>) -> Result<RateReport> {
    if costs.len() < 3 {
        return Err(Error::InvalidParameter(
            "rate estimation needs at least three cost values".into(),
        ));
    }
    let j_star = target.unwrap_or_else(|| *costs.last().unwrap());
    let gaps: Vec<f64> = costs.iter().map(|j| (j - j_star).abs()).collect();
    let mut rates = Vec::new();
    let mut skipped = 0usize;
    for k in 0..gaps.len() - 2 {
        let (e0, e1, e2) = (gaps[k], gaps[k + 1], gaps[k + 2]);
        if e0 == 0.0 || e1 == 0.0 || e2 == 0.0 {
            skipped += 1;
            continue;
        }
        let den = (e1 / e0).ln();
        if den == 0.0 {
            skipped += 1;
            continue;
        }
        rates.push((e2 / e1).ln() / den);
    }
    let mean = if rates.is_empty() {
        f64::NAN
    } else {
        rates.iter().sum::<f64>() / rates.len() as f64
    };
    Ok(RateReport {
        rates,
        mean,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_engine(h: f64, gamma: f64) -> CostEngine {
        let mesh = Arc::new(TriMesh::disk(h).unwrap());
        let basis = ControlBasis::parse("cos1|N=1|T=0.2").unwrap();
        CostEngine::build(
            mesh,
            1,
            basis,
            gamma,
            StokesConfig {
                dt: 0.1,
                ..Default::default()
            },
            &|_x, y| y,
            None,
        )
        .unwrap()
    }

    fn tiny_config(gamma: f64, grad_max: usize) -> OptimizerConfig {
        OptimizerConfig {
            gamma,
            grad_max,
            step_scale0: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn line_search_accepts_the_textbook_step() {
        // J(a) = a^2 / 2 from a = 1 along b = 1 with budget 1: the first
        // trial lands at the minimum and satisfies sufficient descent.
        let cfg = OptimizerConfig::default();
        let mut change = RelChange::fresh();
        let mut cost = |a: &[f64]| -> Result<f64> { Ok(0.5 * a[0] * a[0]) };
        let bt = backtrack(
            &[1.0],
            &[1.0],
            0.5,
            1.0,
            1.0,
            1.0,
            &mut change,
            &cfg,
            &mut cost,
        )
        .unwrap();
        assert_eq!(bt.count, 1);
        assert_eq!(bt.beta, 1.0);
        assert_eq!(bt.alpha, vec![0.0]);
        assert_eq!(bt.cost, 0.0);
        assert!(bt.armijo);
        assert_eq!(change.step, 1.0);
        assert_eq!(change.cost, 1.0);
    }

    #[test]
    fn line_search_halts_at_the_trial_cap() {
        // A cost that never descends exhausts the trial budget; the last
        // (smallest-step) trial is accepted and flagged.
        let cfg = OptimizerConfig::default();
        let mut change = RelChange::fresh();
        let mut cost = |_: &[f64]| -> Result<f64> { Ok(5.0) };
        let bt = backtrack(
            &[1.0],
            &[1.0],
            5.0,
            1.0,
            1.0,
            1.0,
            &mut change,
            &cfg,
            &mut cost,
        )
        .unwrap();
        assert_eq!(bt.count, cfg.back_max);
        assert!(!bt.armijo);
        assert_eq!(bt.beta, 2.0 / 1024.0);
        assert_eq!(bt.alpha[0], 1.0 - bt.beta);
        // The cost never moved, so its relative change collapsed at once.
        assert_eq!(change.cost, 0.0);
    }

    #[test]
    fn line_search_exits_when_changes_go_quiet() {
        // With a loose tolerance the relative-change exit fires before the
        // trial cap: the step change shrinks with beta while the flat cost
        // zeroes the cost change immediately.
        let cfg = OptimizerConfig {
            tol: 0.3,
            ..Default::default()
        };
        let mut change = RelChange::fresh();
        let mut cost = |_: &[f64]| -> Result<f64> { Ok(1.0) };
        let bt = backtrack(
            &[1.0],
            &[1.0],
            1.0,
            1.0,
            1.0,
            1.0,
            &mut change,
            &cfg,
            &mut cost,
        )
        .unwrap();
        // Trials at beta = 1, 1/2, 1/4: step change 1, 0.5, 0.25 <= 0.3.
        assert_eq!(bt.count, 3);
        assert_eq!(bt.beta, 0.25);
        assert!(!bt.armijo);
        assert_eq!(bt.alpha[0], 0.75);
    }

    #[test]
    fn line_search_rejects_a_zero_gradient() {
        let cfg = OptimizerConfig::default();
        let mut change = RelChange::fresh();
        let mut cost = |_: &[f64]| -> Result<f64> { Ok(1.0) };
        assert!(backtrack(
            &[1.0],
            &[0.0],
            1.0,
            0.0,
            1.0,
            1.0,
            &mut change,
            &cfg,
            &mut cost
        )
        .is_err());
    }

    #[test]
    fn pricing_matches_the_direct_cost_at_rest() {
        // alpha = 0 leaves the fluid at rest and the scalar frozen, so the
        // engine's price equals the direct cost of the initial scalar.
        let eng = tiny_engine(0.35, 1e-2);
        let ev = eng.evaluate(&[0.0]).unwrap();
        let direct = eng
            .mixnorm
            .cost(&eng.dg, &eng.theta0, &[0.0], &eng.gram, eng.gamma)
            .unwrap();
        assert_eq!(ev.cost.penalty_part, 0.0);
        assert!((ev.cost.total - direct.total).abs() <= 1e-12 * direct.total.abs());
        let comp = eng.mixnorm.companion(&eng.dg, &eng.theta0).unwrap();
        for (a, b) in ev.companion.coeffs.iter().zip(&comp.coeffs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn descent_walks_the_tiny_benchmark_downhill() {
        let eng = tiny_engine(0.35, 1e-2);
        let cfg = tiny_config(1e-2, 4);
        let state = run_basic(&eng, &cfg, &[1.0], None).unwrap();
        assert!(state.records.len() >= 2, "no iteration ran");
        for w in state.records.windows(2) {
            if w[1].armijo {
                assert!(
                    w[1].cost.total < w[0].cost.total,
                    "accepted iterate did not descend: {} -> {}",
                    w[0].cost.total,
                    w[1].cost.total
                );
            }
        }
        // Step budgets double off the accepted step: the next accepted step
        // is exactly 2 * (2 * beta_prev) / 2^trials.
        for w in state.records.windows(2) {
            if w[0].n == 0 {
                assert_eq!(
                    w[1].beta,
                    2.0 * cfg.step_scale0 / 2f64.powi(w[1].backtracks as i32)
                );
            } else {
                assert_eq!(
                    w[1].beta,
                    4.0 * w[0].beta / 2f64.powi(w[1].backtracks as i32)
                );
            }
        }
        assert!(state.stop.any());
        let derived = state
            .records
            .iter()
            .map(|r| if r.n == 0 { 1 } else { r.backtracks })
            .sum::<usize>();
        assert_eq!(state.cost_evals, derived);
    }

    #[test]
    fn iteration_cap_stops_and_is_reported() {
        let eng = tiny_engine(0.35, 1e-2);
        let cfg = tiny_config(1e-2, 1);
        let state = run_basic(&eng, &cfg, &[1.0], None).unwrap();
        assert!(state.stop.iteration_cap);
        assert_eq!(state.final_record().n, 1);
        assert_eq!(state.records.len(), 2);
        assert!(state.stop.describe().contains("iteration cap"));
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let eng = tiny_engine(0.35, 1e-2);
        let cfg = tiny_config(1e-2, 2);
        let dir = std::env::temp_dir().join("stirmix_ckpt_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.ckpt");
        let state = run_basic(&eng, &cfg, &[1.0], Some(&path)).unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.finished, Some(state.stop));
        assert_eq!(ck.records.len(), state.records.len());
        for (a, b) in ck.records.iter().zip(&state.records) {
            assert_eq!(a.n, b.n);
            assert_eq!(a.stage, b.stage);
            assert_eq!(a.backtracks, b.backtracks);
            assert_eq!(a.armijo, b.armijo);
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.b.iter().zip(&b.b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.cost.total.to_bits(), b.cost.total.to_bits());
            assert_eq!(a.beta.to_bits(), b.beta.to_bits());
            assert_eq!(a.grad_measure.to_bits(), b.grad_measure.to_bits());
        }
        // Reloading a finished run reproduces the final state.
        let again = resume_basic(&eng, &cfg, &path).unwrap();
        assert_eq!(again.stop, state.stop);
        for (x, y) in again.final_alpha.iter().zip(&state.final_alpha) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run_bitwise() {
        let eng = tiny_engine(0.35, 1e-2);
        let cfg = tiny_config(1e-2, 3);
        let full = run_basic(&eng, &cfg, &[1.0], None).unwrap();
        assert!(full.records.len() >= 3, "need at least two iterations");

        // Fabricate the checkpoint an interrupted run would have left after
        // its first outer iteration, then resume from it.
        let cut = 1usize;
        let id = identity(&eng, &cfg);
        let truncated = Checkpoint {
            config_hash: id.config_hash.clone(),
            mesh_hash: id.mesh_hash.clone(),
            basis_descriptor: id.basis_descriptor.clone(),
            stage: 0,
            n: cut,
            step_scale: 2.0 * full.records[cut].beta,
            change: RelChange {
                step: full.records[cut].step_change,
                cost: full.records[cut].cost_change,
            },
            alpha: full.records[cut].alpha.clone(),
            records: full.records[..=cut].to_vec(),
            finished: None,
        };
        let dir = std::env::temp_dir().join("stirmix_ckpt_resume");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("interrupted.ckpt");
        write_checkpoint(&path, &truncated).unwrap();

        let resumed = resume_basic(&eng, &cfg, &path).unwrap();
        assert_eq!(resumed.records.len(), full.records.len());
        assert_eq!(resumed.stop, full.stop);
        for (a, b) in resumed.records.iter().zip(&full.records) {
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                assert_eq!(x.to_bits(), y.to_bits(), "iterate diverged after resume");
            }
            assert_eq!(a.cost.total.to_bits(), b.cost.total.to_bits());
            assert_eq!(a.beta.to_bits(), b.beta.to_bits());
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn checkpoints_refuse_a_different_setup() {
        let eng = tiny_engine(0.35, 1e-2);
        let cfg = tiny_config(1e-2, 1);
        let dir = std::env::temp_dir().join("stirmix_ckpt_mismatch");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.ckpt");
        run_basic(&eng, &cfg, &[1.0], Some(&path)).unwrap();
        // Different tolerance -> different configuration fingerprint.
        let other = OptimizerConfig {
            tol: 1e-4,
            ..tiny_config(1e-2, 1)
        };
        assert!(matches!(
            resume_basic(&eng, &other, &path),
            Err(Error::CacheMismatch(_))
        ));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn single_stage_relay_matches_the_basic_run() {
        let eng = tiny_engine(0.35, 1e-2);
        let cfg = tiny_config(1e-2, 2);
        let basic = run_basic(&eng, &cfg, &[1.0], None).unwrap();
        let relay = run_relay(
            &[RelayStage {
                label: "only".into(),
                engine: &eng,
            }],
            &cfg,
            &[1.0],
            None,
        )
        .unwrap();
        assert_eq!(relay.records.len(), basic.records.len());
        for (a, b) in relay.records.iter().zip(&basic.records) {
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.cost.total.to_bits(), b.cost.total.to_bits());
        }
        assert_eq!(relay.stop, basic.stop);
    }

    #[test]
    fn relay_seeds_stages_and_reports_the_transition() {
        let coarse = tiny_engine(0.4, 1e-2);
        let fine = tiny_engine(0.3, 1e-2);
        let cfg = tiny_config(1e-2, 2);
        let state = run_relay(
            &[
                RelayStage {
                    label: "coarse".into(),
                    engine: &coarse,
                },
                RelayStage {
                    label: "fine".into(),
                    engine: &fine,
                },
            ],
            &cfg,
            &[1.0],
            None,
        )
        .unwrap();
        let jumps = state.stage_jumps();
        assert_eq!(jumps.len(), 1);
        let (idx, _before, after) = jumps[0];
        assert_eq!(state.records[idx].stage, 1);
        assert_eq!(state.records[idx].n, 0);
        // The fine stage starts exactly at the coarse stage's final iterate.
        for (x, y) in state.records[idx]
            .alpha
            .iter()
            .zip(&state.records[idx - 1].alpha)
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(after, state.records[idx].cost.total);
        assert_eq!(state.phases.len(), 2);
    }

    #[test]
    fn relay_resume_recovers_finished_and_missing_stages() {
        let coarse = tiny_engine(0.4, 1e-2);
        let fine = tiny_engine(0.3, 1e-2);
        let cfg = tiny_config(1e-2, 2);
        let stages = [
            RelayStage {
                label: "coarse".into(),
                engine: &coarse,
            },
            RelayStage {
                label: "fine".into(),
                engine: &fine,
            },
        ];
        let dir = std::env::temp_dir().join("stirmix_relay_resume");
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("relay.ckpt");
        let full = run_relay(&stages, &cfg, &[1.0], Some(&base)).unwrap();
        // Drop the fine stage's checkpoint: resume must reload the coarse
        // stage and rerun the fine one to the same iterates.
        std::fs::remove_file(stage_ckpt_path(&base, 1)).unwrap();
        let resumed = resume_relay(&stages, &cfg, &[1.0], &base).unwrap();
        assert_eq!(resumed.records.len(), full.records.len());
        for (a, b) in resumed.records.iter().zip(&full.records) {
            for (x, y) in a.alpha.iter().zip(&b.alpha) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn rate_of_synthetic_sequences() {
        // Geometric gap decay has order one.
        let costs: Vec<f64> = (0..8).map(|k| 0.5f64.powi(k)).collect();
        let r = convergence_rate(&costs, Some(0.0)).unwrap();
        assert_eq!(r.skipped, 0);
        for v in &r.rates {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!((r.mean - 1.0).abs() < 1e-12);

        // Squared decay e_{k+1} = e_k^2 has order two.
        let costs: Vec<f64> = (0..5).map(|k| 0.5f64.powi(1 << k)).collect();
        let r = convergence_rate(&costs, Some(0.0)).unwrap();
        for v in &r.rates {
            assert!((v - 2.0).abs() < 1e-12);
        }

        // Stagnation skips every window.
        let r = convergence_rate(&[3.0, 3.0, 3.0, 3.0], Some(1.0)).unwrap();
        assert!(r.rates.is_empty());
        assert_eq!(r.skipped, 2);
        assert!(r.mean.is_nan());

        // Defaulting the target to the final cost zeroes the last gap and
        // skips the windows that touch it.
        let costs: Vec<f64> = (0..6).map(|k| 5.0 + 0.5f64.powi(k)).collect();
        let r = convergence_rate(&costs, None).unwrap();
        assert!(r.skipped >= 1);

        assert!(convergence_rate(&[1.0, 2.0], None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn accepted_step_is_the_budget_over_a_power_of_two(
            budget in 1e-6f64..1e6,
            offset in -3.0f64..3.0,
        ) {
            // Quadratic cost along a descent direction: however many trials
            // the search needs, the accepted step is exactly the doubled
            // budget halved count times (all exact in floating point).
            let cfg = OptimizerConfig::default();
            let mut change = RelChange::fresh();
            let a0 = 1.0 + offset;
            let mut cost = |a: &[f64]| -> Result<f64> { Ok(0.5 * a[0] * a[0]) };
            let j0 = 0.5 * a0 * a0;
            let grad_sq = a0 * a0;
            if grad_sq <= 0.0 {
                return Ok(());
            }
            let bt = backtrack(
                &[a0], &[a0], j0, grad_sq, a0.abs(), budget,
                &mut change, &cfg, &mut cost,
            ).unwrap();
            prop_assert!(bt.count >= 1);
            prop_assert_eq!(
                bt.beta.to_bits(),
                (2.0 * budget / 2f64.powi(bt.count as i32)).to_bits()
            );
            if bt.armijo {
                prop_assert!(bt.cost < j0 - bt.beta * cfg.mu * grad_sq);
            }
        }
    }
}
