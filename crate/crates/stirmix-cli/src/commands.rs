//! The eight commands: mesh export, basis-flow precomputation, forward
//! stirring runs, cost scans, optimization (single mesh and relay),
//! checkpoint resume, and the numerical validation suites.

use std::sync::Arc;

use stirmix::control::ControlBasis;
use stirmix::mesh::TriMesh;
use stirmix::optimizer::{
    resume_basic, resume_relay, run_basic, run_relay, CostEngine, OptimizerState, RelayStage,
};
use stirmix::stokes::{precompute_basis, StokesConfig, StokesSolver, VelocitySpace};
use stirmix::transport::cfl_width;
use stirmix::validation::{
    duality_invariance, energy_balance_check, gradient_benchmark, manufactured_flow_convergence,
    rotation_transport_convergence,
};

use crate::config::RunConfig;
use crate::output::{num, write_field_vtk, write_mesh_vtk, Csv};
use crate::CliError;

fn flow_config(cfg: &RunConfig) -> StokesConfig {
    StokesConfig {
        dt: cfg.dt,
        slip_k: cfg.slip_k,
        ..Default::default()
    }
}

fn build_engine(cfg: &RunConfig, h: f64) -> Result<CostEngine, CliError> {
    let mesh = Arc::new(TriMesh::disk(h)?);
    let basis = ControlBasis::parse(&cfg.basis)?;
    let theta0 = cfg.theta0.build()?;
    Ok(CostEngine::build(
        mesh,
        cfg.degree,
        basis,
        cfg.gamma,
        flow_config(cfg),
        theta0.as_ref(),
        cfg.cache.as_deref(),
    )?)
}

// ---------------------------------------------------------------------------
// mesh
// ---------------------------------------------------------------------------

pub fn cmd_mesh(cfg: &RunConfig) -> Result<(), CliError> {
    let h = cfg.single_h()?;
    let mesh = Arc::new(TriMesh::disk(h)?);
    let space = VelocitySpace::new(mesh.clone());
    let width = cfl_width(&mesh);

    let mut csv = Csv::create(
        &cfg.outdir.join("mesh_stats.csv"),
        "mesh",
        &cfg.pairs(),
        &["h", "vertices", "triangles", "p2_nodes", "velocity_dofs", "min_cell_width"],
    )?;
    csv.row(&[
        num(h),
        mesh.n_vertices().to_string(),
        mesh.n_triangles().to_string(),
        mesh.n_p2_nodes().to_string(),
        space.n_dofs.to_string(),
        num(width),
    ])?;
    csv.finish()?;

    write_mesh_vtk(
        &cfg.outdir.join("mesh.vtk"),
        &format!("unit disk, h={h}"),
        &mesh,
    )?;
    println!(
        "mesh h={h}: {} vertices, {} triangles, {} velocity dofs, min cell width {width:.4}",
        mesh.n_vertices(),
        mesh.n_triangles(),
        space.n_dofs
    );
    println!("wrote mesh_stats.csv and mesh.vtk to {}", cfg.outdir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// basis-vel
// ---------------------------------------------------------------------------

pub fn cmd_basis_vel(cfg: &RunConfig) -> Result<(), CliError> {
    let h = cfg.single_h()?;
    let mesh = Arc::new(TriMesh::disk(h)?);
    let basis = ControlBasis::parse(&cfg.basis)?;
    let solver = StokesSolver::new(mesh, flow_config(cfg))?;
    let cache = cfg
        .cache
        .clone()
        .unwrap_or_else(|| cfg.outdir.join("cache"));
    std::fs::create_dir_all(&cache)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", cache.display())))?;

    let vels = precompute_basis(&solver, &basis, Some(&cache))?;
    let mut csv = Csv::create(
        &cfg.outdir.join("basis_velocities.csv"),
        "basis-vel",
        &cfg.pairs(),
        &["index", "element", "max_speed", "max_weak_divergence", "kinetic_final"],
    )?;
    for (i, traj) in vels.trajectories.iter().enumerate() {
        let vmax = traj.max_speed(&solver.space);
        let ke = solver.kinetic_energy(traj.velocity.last().unwrap());
        csv.row(&[
            i.to_string(),
            basis.element_descriptor(i),
            num(vmax),
            num(traj.max_weak_divergence),
            num(ke),
        ])?;
        println!(
            "element {i} ({}): max speed {vmax:.4}, weak divergence {:.2e}",
            basis.element_descriptor(i),
            traj.max_weak_divergence
        );
    }
    csv.finish()?;
    println!(
        "cached {} basis trajectories under {}",
        basis.dim(),
        cache.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

pub fn cmd_forward(cfg: &RunConfig) -> Result<(), CliError> {
    let h = cfg.single_h()?;
    let engine = build_engine(cfg, h)?;
    let alpha = cfg.coefficients(engine.basis.dim())?;
    let horizon = engine.basis.horizon();
    // A separate flow assembly provides the velocity mass matrix for the
    // kinetic-energy series.
    let solver = StokesSolver::new(engine.vspace.mesh.clone(), flow_config(cfg))?;

    let ev = engine.evaluate(&alpha)?;

    let mut series = Csv::create(
        &cfg.outdir.join("mixnorm_vs_time.csv"),
        "forward",
        &cfg.pairs(),
        &["t", "mix_norm", "l2_norm", "mass"],
    )?;
    let mut energy = Csv::create(
        &cfg.outdir.join("kinetic_energy.csv"),
        "forward",
        &cfg.pairs(),
        &["t", "kinetic_energy"],
    )?;
    for (s, t) in ev.theta.times.iter().enumerate() {
        let f = &ev.theta.fields[s];
        series.row(&[
            num(*t),
            num(engine.mixnorm.mix_norm(&engine.dg, f)?),
            num(engine.dg.l2_norm(f)?),
            num(engine.dg.integral(f)?),
        ])?;
        energy.row(&[num(*t), num(solver.kinetic_energy(&ev.velocity.velocity[s]))])?;
    }
    series.finish()?;
    energy.finish()?;

    let snap_times: Vec<f64> = if cfg.snapshots.is_empty() {
        vec![0.0, horizon]
    } else {
        cfg.snapshots.clone()
    };
    for &t in &snap_times {
        if !(0.0..=horizon + 1e-9).contains(&t) {
            return Err(CliError::Config(format!(
                "snapshot time {t} outside the horizon [0, {horizon}]"
            )));
        }
        let s = ((t / ev.velocity.dt).round() as usize).min(ev.theta.fields.len() - 1);
        let path = cfg.outdir.join(format!("theta_{s:06}.vtk"));
        write_field_vtk(
            &path,
            &format!("theta at t={}", ev.theta.times[s]),
            &engine.vspace.mesh,
            &engine.dg,
            &ev.theta.fields[s],
            "theta",
            cfg.vertex_values,
        )?;
        println!("snapshot t={} -> {}", ev.theta.times[s], path.display());
    }

    let first = ev.theta.fields.first().unwrap();
    let vmax = ev.velocity.max_speed(&engine.vspace);
    println!(
        "forward run over [0, {horizon}]: mix-norm {:.6e} -> {:.6e}, peak speed {vmax:.4}, \
         weak divergence {:.2e}",
        engine.mixnorm.mix_norm(&engine.dg, first)?,
        ev.cost.mix_norm,
        ev.velocity.max_weak_divergence
    );
    println!(
        "cost: total {:.6e} (mix part {:.6e}, penalty part {:.6e}), control norm {:.4}",
        ev.cost.total, ev.cost.mix_part, ev.cost.penalty_part, ev.cost.g_norm
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// scan
// ---------------------------------------------------------------------------

pub fn cmd_scan(cfg: &RunConfig) -> Result<(), CliError> {
    let h = cfg.single_h()?;
    let basis = ControlBasis::parse(&cfg.basis)?;
    if basis.dim() != 1 {
        return Err(CliError::Config(format!(
            "scan needs a one-dimensional control basis, but {:?} has dimension {}",
            cfg.basis,
            basis.dim()
        )));
    }
    let engine = build_engine(cfg, h)?;

    let mut csv = Csv::create(
        &cfg.outdir.join("cost_scan.csv"),
        "scan",
        &cfg.pairs(),
        &["alpha1", "cost_total", "cost_mix", "cost_penalty", "mix_norm", "g_norm"],
    )?;
    let mut a = cfg.alpha_min;
    let mut rows = 0usize;
    while a <= cfg.alpha_max + 1e-12 {
        let ev = engine.evaluate(&[a])?;
        csv.row(&[
            num(a),
            num(ev.cost.total),
            num(ev.cost.mix_part),
            num(ev.cost.penalty_part),
            num(ev.cost.mix_norm),
            num(ev.cost.g_norm),
        ])?;
        println!("alpha1={a}: cost {:.6e}, mix-norm {:.6e}", ev.cost.total, ev.cost.mix_norm);
        a += cfg.stride;
        rows += 1;
    }
    csv.finish()?;
    println!("scan wrote {rows} rows to cost_scan.csv");
    Ok(())
}

// ---------------------------------------------------------------------------
// optimize / relay / resume
// ---------------------------------------------------------------------------

fn write_iterations(cfg: &RunConfig, command: &str, st: &OptimizerState) -> Result<(), CliError> {
    let dim = st.final_alpha.len();
    let mut header: Vec<String> = [
        "stage", "n", "cost_total", "mix_norm", "g_norm", "grad_norm", "beta", "backtracks",
        "armijo",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for i in 1..=dim {
        header.push(format!("alpha_{i}"));
    }
    let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    let mut csv = Csv::create(
        &cfg.outdir.join("iterations.csv"),
        command,
        &cfg.pairs(),
        &header_refs,
    )?;
    for r in &st.records {
        let mut cells = vec![
            r.stage.to_string(),
            r.n.to_string(),
            num(r.cost.total),
            num(r.cost.mix_norm),
            num(r.cost.g_norm),
            num(r.grad_norm_sq.max(0.0).sqrt()),
            num(r.beta),
            r.backtracks.to_string(),
            r.armijo.to_string(),
        ];
        cells.extend(r.alpha.iter().map(|x| num(*x)));
        csv.row(&cells)?;
    }
    csv.finish()
}

fn print_summary(st: &OptimizerState) {
    let last = st.records.last().expect("at least the starting record");
    let alpha: Vec<String> = st.final_alpha.iter().map(|x| format!("{x:.5}")).collect();
    println!(
        "finished: alpha = [{}], cost {:.6e}, mix-norm {:.6e}",
        alpha.join(", "),
        last.cost.total,
        last.cost.mix_norm
    );
    println!(
        "stop: {}; {} cost evaluations, {} line-search trials",
        st.stop.describe(),
        st.cost_evals,
        st.backtrack_total
    );
    for (label, secs) in &st.phases {
        println!("  {label}: {secs:.1}s");
    }
}

pub fn cmd_optimize(cfg: &RunConfig) -> Result<(), CliError> {
    let h = cfg.single_h()?;
    let engine = build_engine(cfg, h)?;
    let alpha0 = cfg.coefficients(engine.basis.dim())?;
    let ckpt = cfg.checkpoint_path();
    let st = run_basic(&engine, &cfg.optimizer(), &alpha0, Some(&ckpt))?;
    write_iterations(cfg, "optimize", &st)?;
    print_summary(&st);
    Ok(())
}

fn relay_engines(cfg: &RunConfig) -> Result<Vec<CostEngine>, CliError> {
    if cfg.h.len() < 2 {
        return Err(CliError::Config(
            "relay needs h to list at least two mesh sizes (coarse to fine)".into(),
        ));
    }
    if !cfg.h.windows(2).all(|w| w[0] > w[1]) {
        return Err(CliError::Config(
            "relay mesh sizes must be strictly decreasing".into(),
        ));
    }
    cfg.h.iter().map(|&h| build_engine(cfg, h)).collect()
}

pub fn cmd_relay(cfg: &RunConfig) -> Result<(), CliError> {
    let engines = relay_engines(cfg)?;
    let stages: Vec<RelayStage> = engines
        .iter()
        .zip(&cfg.h)
        .map(|(engine, h)| RelayStage {
            label: format!("h={h}"),
            engine,
        })
        .collect();
    let alpha0 = cfg.coefficients(engines[0].basis.dim())?;
    let ckpt = cfg.checkpoint_path();
    let st = run_relay(&stages, &cfg.optimizer(), &alpha0, Some(&ckpt))?;
    write_iterations(cfg, "relay", &st)?;
    print_summary(&st);
    Ok(())
}

pub fn cmd_resume(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt = cfg.checkpoint_path();
    let st = if cfg.h.len() == 1 {
        if !ckpt.exists() {
            return Err(CliError::Config(format!(
                "checkpoint {} does not exist",
                ckpt.display()
            )));
        }
        let engine = build_engine(cfg, cfg.h[0])?;
        resume_basic(&engine, &cfg.optimizer(), &ckpt)?
    } else {
        let engines = relay_engines(cfg)?;
        let stages: Vec<RelayStage> = engines
            .iter()
            .zip(&cfg.h)
            .map(|(engine, h)| RelayStage {
                label: format!("h={h}"),
                engine,
            })
            .collect();
        let alpha0 = cfg.coefficients(engines[0].basis.dim())?;
        resume_relay(&stages, &cfg.optimizer(), &alpha0, &ckpt)?
    };
    write_iterations(cfg, "resume", &st)?;
    print_summary(&st);
    Ok(())
}

// ---------------------------------------------------------------------------
// validate
// ---------------------------------------------------------------------------

struct SuiteReport {
    csv: Csv,
    failures: usize,
}

impl SuiteReport {
    fn new(cfg: &RunConfig, suite: &str) -> Result<SuiteReport, CliError> {
        let csv = Csv::create(
            &cfg.outdir.join(format!("validate_{suite}.csv")),
            &format!("validate {suite}"),
            &[],
            &["check", "measured", "low", "high", "pass"],
        )?;
        Ok(SuiteReport { csv, failures: 0 })
    }

    /// Gate `measured` against [low, high]; NaN bounds mean unbounded.
    fn gate(&mut self, name: &str, measured: f64, low: f64, high: f64) -> Result<(), CliError> {
        let ok = (low.is_nan() || measured >= low) && (high.is_nan() || measured <= high);
        if !ok {
            self.failures += 1;
        }
        let verdict = if ok { "PASS" } else { "FAIL" };
        let lo = if low.is_nan() { "-inf".into() } else { num(low) };
        let hi = if high.is_nan() { "+inf".into() } else { num(high) };
        println!("{verdict} {name}: measured {measured:.6e}, expected [{lo}, {hi}]");
        self.csv.row(&[
            name.to_string(),
            num(measured),
            lo,
            hi,
            ok.to_string(),
        ])
    }

    fn finish(self, suite: &str) -> Result<(), CliError> {
        self.csv.finish()?;
        if self.failures > 0 {
            Err(CliError::Validation(format!(
                "validate {suite}: {} check(s) failed",
                self.failures
            )))
        } else {
            println!("validate {suite}: all checks passed");
            Ok(())
        }
    }
}

pub fn cmd_validate(cfg: &RunConfig, suite: &str) -> Result<(), CliError> {
    match suite {
        "stokes" => validate_stokes(cfg),
        "dg" => validate_dg(cfg),
        "duality" => validate_duality(cfg),
        "energy" => validate_energy(cfg),
        "gradcheck" => validate_gradcheck(cfg),
        other => Err(CliError::Config(format!(
            "unknown validation suite {other:?}; available: stokes, dg, duality, energy, gradcheck"
        ))),
    }
}

/// Flow convergence against the manufactured reference solution: errors
/// within a factor 2 of the tabulated reference values, fitted rates at
/// least 1.8.
fn validate_stokes(cfg: &RunConfig) -> Result<(), CliError> {
    let mut rep = SuiteReport::new(cfg, "stokes")?;
    let conv = manufactured_flow_convergence(&[0.1, 0.05], 0.01, 0.5)?;
    let v_ref = [3.1e-2, 7.2e-3];
    let p_ref = [1.6e-2, 3.6e-3];
    for (i, row) in conv.rows.iter().enumerate() {
        rep.gate(
            &format!("velocity_h1_error_h={}", row.h),
            row.v_h1,
            v_ref[i] / 2.0,
            v_ref[i] * 2.0,
        )?;
        rep.gate(
            &format!("pressure_l2_error_h={}", row.h),
            row.p_l2,
            p_ref[i] / 2.0,
            p_ref[i] * 2.0,
        )?;
    }
    rep.gate("velocity_h1_rate", conv.v_h1_slope, 1.8, f64::NAN)?;
    rep.gate("pressure_l2_rate", conv.p_l2_slope, 1.8, f64::NAN)?;
    rep.finish("stokes")
}

/// Transport convergence on the rigid rotation: L2 errors within a factor
/// 2 of the tabulated reference values. The fitted rate is reported for
/// information (the concentric-ring mesh family approaches the boundary-
/// limited order 1.5 from below, so it is not gated here).
fn validate_dg(cfg: &RunConfig) -> Result<(), CliError> {
    let mut rep = SuiteReport::new(cfg, "dg")?;
    let conv = rotation_transport_convergence(&[0.1, 0.05], 2, 1.0)?;
    let l2_ref = [1.8e-2, 5.1e-3];
    for (i, row) in conv.rows.iter().enumerate() {
        rep.gate(
            &format!("transport_l2_error_h={}", row.h),
            row.l2_err,
            l2_ref[i] / 2.0,
            l2_ref[i] * 2.0,
        )?;
    }
    println!("info transport_l2_rate: {:.3} (not gated)", conv.l2_slope);
    rep.finish("dg")
}

/// Forward/backward pairing invariance: largest excursion from the time
/// mean within a factor 3 of the tabulated reference deviations. Our
/// deviations sit *below* the reference band on the coarser meshes (the
/// reference numbers carry a quadrature noise floor this implementation
/// does not have), so the first two checks report the direction honestly.
fn validate_duality(cfg: &RunConfig) -> Result<(), CliError> {
    let mut rep = SuiteReport::new(cfg, "duality")?;
    let reference = [(0.1, 1.05e-4), (0.05, 3.15e-5), (0.025, 8.70e-6)];
    for (h, dev_ref) in reference {
        let report = duality_invariance(h)?;
        rep.gate(
            &format!("pairing_deviation_h={h}"),
            report.deviation,
            dev_ref / 3.0,
            dev_ref * 3.0,
        )?;
    }
    rep.finish("duality")
}

/// Boundary work balances kinetic + viscous + friction: residual at or
/// below 5% at dt=0.01 and shrinking when the step is halved.
fn validate_energy(cfg: &RunConfig) -> Result<(), CliError> {
    let mut rep = SuiteReport::new(cfg, "energy")?;
    let checks = energy_balance_check(0.1, &[0.01, 0.005])?;
    rep.gate("energy_residual_dt=0.01", checks[0].report.residual, f64::NAN, 0.05)?;
    rep.gate(
        "energy_residual_dt=0.005",
        checks[1].report.residual,
        f64::NAN,
        checks[0].report.residual,
    )?;
    rep.finish("energy")
}

/// Single-mode gradient benchmark: both gradient routes within 5% of the
/// tabulated reference coefficients at h=0.1, and the route gap shrinking
/// under refinement, within a factor 1.5 of the tabulated gaps.
fn validate_gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let mut rep = SuiteReport::new(cfg, "gradcheck")?;
    let cache = cfg.cache.as_deref();
    let coarse = gradient_benchmark(0.1, cache)?;
    let fine = gradient_benchmark(0.05, cache)?;
    let vf_ref: f64 = -8.86205e-3;
    let ad_ref: f64 = -7.82319e-3;
    rep.gate(
        "adjoint_coefficient_h=0.1",
        coarse.vf,
        vf_ref - 0.05 * vf_ref.abs(),
        vf_ref + 0.05 * vf_ref.abs(),
    )?;
    rep.gate(
        "sampled_coefficient_h=0.1",
        coarse.ad,
        ad_ref - 0.05 * ad_ref.abs(),
        ad_ref + 0.05 * ad_ref.abs(),
    )?;
    let gap_ref = [0.132, 0.074];
    rep.gate("route_gap_h=0.1", coarse.gap, gap_ref[0] / 1.5, gap_ref[0] * 1.5)?;
    rep.gate("route_gap_h=0.05", fine.gap, gap_ref[1] / 1.5, gap_ref[1] * 1.5)?;
    rep.gate("route_gap_shrinks", fine.gap, f64::NAN, coarse.gap)?;
    rep.finish("gradcheck")
}
