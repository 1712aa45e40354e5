use std::sync::Arc;
use stirmix::control::ControlBasis;
use stirmix::mesh::TriMesh;
use stirmix::optimizer::{run_basic, CostEngine, OptimizerConfig};
use stirmix::stokes::StokesConfig;

fn engine_for(
    h: f64,
    basis: &str,
    gamma: f64,
    theta0: &dyn Fn(f64, f64) -> f64,
) -> CostEngine {
    let mesh = Arc::new(TriMesh::disk(h).unwrap());
    CostEngine::build(
        mesh,
        2,
        ControlBasis::parse(basis).unwrap(),
        gamma,
        StokesConfig {
            slip_k: 0.5,
            ..Default::default()
        },
        theta0,
        None,
    )
    .unwrap()
}

fn report(tag: &str, st: &stirmix::optimizer::OptimizerState, t0: std::time::Instant) {
    let last = st.final_alpha.clone();
    let rec = st.records.last().unwrap();
    println!(
        "{tag}: alpha={last:?} iters={} stop={} evals={} backtracks={} J={:.6e}  ({:.1}s)",
        st.outer_iterations(),
        st.stop.describe(),
        st.cost_evals,
        st.backtrack_total,
        rec.cost.total,
        t0.elapsed().as_secs_f64()
    );
}

fn main() {
    let a: Vec<String> = std::env::args().collect();
    match a.get(1).map(|s| s.as_str()) {
        Some("mass") => {
            // Isolate the long-horizon mass drift: which ingredient grows it?
            let cases: [(&str, &str, Vec<f64>); 4] = [
                ("cos1 step T=10", "cos1|N=1|T=10", vec![1.0]),
                ("cos1 sin T=10", "cos1|N=1|T=10", vec![1.0]),
                ("cos2sin2 step T=10", "cos2,sin2|N=1|T=10", vec![4.97, 51.76]),
                ("cos1 step T=1", "cos1|N=1|T=1", vec![1.0]),
            ];
            for (i, (tag, basis, alpha)) in cases.iter().enumerate() {
                let step = |_: f64, y: f64| if y > 0.0 { 1.0 } else { -1.0 };
                let siny = |_: f64, y: f64| (2.0 * std::f64::consts::PI * y).sin();
                let th: &dyn Fn(f64, f64) -> f64 = if i == 1 { &siny } else { &step };
                let eng = engine_for(0.2, basis, 1e-3, th);
                let ev = eng.evaluate(alpha).unwrap();
                let m0 = eng.dg.integral(&ev.theta.fields[0]).unwrap();
                let mut worst = 0.0f64;
                let n = ev.theta.fields.len();
                for (s, f) in ev.theta.fields.iter().enumerate() {
                    let d = (eng.dg.integral(f).unwrap() - m0).abs();
                    worst = worst.max(d);
                    if s % (n / 5).max(1) == 0 || s + 1 == n {
                        println!("  {tag} t={:.1}: drift={d:.3e}", ev.theta.times[s]);
                    }
                }
                println!("{tag}: max drift {worst:.3e}");
            }
        }
        Some("opt5") => {
            let t0 = std::time::Instant::now();
            let eng = engine_for(0.1, "cos1|N=1|T=1", 1e-3, &|_, y| (y / 0.1).tanh());
            println!("engine built ({:.1}s)", t0.elapsed().as_secs_f64());
            let cfg = OptimizerConfig {
                gamma: 1e-3,
                ..Default::default()
            };
            let st = run_basic(&eng, &cfg, &[1.0], None).unwrap();
            report("opt5", &st, t0);
        }
        Some("opt6") => {
            let t0 = std::time::Instant::now();
            let eng = engine_for(0.1, "cos1|N=1|T=1", 1e-6, &|_, y| (y / 0.1).tanh());
            println!("engine built ({:.1}s)", t0.elapsed().as_secs_f64());
            let cfg = OptimizerConfig {
                gamma: 1e-6,
                ..Default::default()
            };
            let st = run_basic(&eng, &cfg, &[70.0], None).unwrap();
            report("opt6", &st, t0);
        }
        Some("opt8") => {
            let t0 = std::time::Instant::now();
            let eng = engine_for(0.1, "cos2,sin2|N=1|T=1", 1e-6, &|_, y| {
                (2.0 * std::f64::consts::PI * y).sin()
            });
            println!("engine built ({:.1}s)", t0.elapsed().as_secs_f64());
            let cfg = OptimizerConfig {
                gamma: 1e-6,
                ..Default::default()
            };
            let st = run_basic(&eng, &cfg, &[50.0, 40.0], None).unwrap();
            report("opt8", &st, t0);
            let first = st.records.first().unwrap();
            let last = st.records.last().unwrap();
            println!(
                "J0={:.6e} Jend={:.6e} drop={:.1}%  ratio sin/cos={:.2}",
                first.cost.total,
                last.cost.total,
                100.0 * (1.0 - last.cost.total / first.cost.total),
                st.final_alpha[1] / st.final_alpha[0]
            );
        }
        Some("diag8") => {
            let eng = engine_for(0.1, "cos2,sin2|N=1|T=1", 1e-6, &|_, y| {
                (2.0 * std::f64::consts::PI * y).sin()
            });
            // Gradient agreement at the starting point.
            let a0 = [50.0f64, 40.0];
            let ev = eng.evaluate(&a0).unwrap();
            let (gvf, _) = eng
                .gradient(&a0, &ev, stirmix::optimizer::GradientMethod::Vf, 1e-4)
                .unwrap();
            let (gad, _) = eng
                .gradient(&a0, &ev, stirmix::optimizer::GradientMethod::Ad, 1e-4)
                .unwrap();
            println!("VF b={:?} xi={:?}", gvf.b, gvf.xi);
            println!("AD b={:?} xi={:?}", gad.b, gad.xi);
            // Cost along a straight path to the reference optimum, plus nearby pts.
            for p in [
                [50.0, 40.0],
                [40.0, 43.0],
                [30.0, 46.0],
                [20.0, 49.0],
                [10.0, 50.9],
                [4.97, 51.76],
                [50.26, 34.51],
                [0.0, 52.0],
                [4.97, 40.0],
                [25.0, 25.0],
            ] {
                let ev = eng.evaluate(&p).unwrap();
                println!(
                    "J({:.2},{:.2}) = {:.6e}   mix={:.6e} pen={:.6e}",
                    p[0], p[1], ev.cost.total, ev.cost.mix_part, ev.cost.penalty_part
                );
            }
        }
        Some("trace8") => {
            let eng = engine_for(0.1, "cos2,sin2|N=1|T=1", 1e-6, &|_, y| {
                (2.0 * std::f64::consts::PI * y).sin()
            });
            let cfg = OptimizerConfig {
                gamma: 1e-6,
                ..Default::default()
            };
            let st = run_basic(&eng, &cfg, &[50.0, 40.0], None).unwrap();
            for r in &st.records {
                println!(
                    "n={} alpha=[{:.4},{:.4}] J={:.6e} |g|2={:.3e} beta={:.3e} bt={} armijo={} d_step={:.2e} d_cost={:.2e}",
                    r.n,
                    r.alpha[0],
                    r.alpha[1],
                    r.cost.total,
                    r.grad_norm_sq,
                    r.beta,
                    r.backtracks,
                    r.armijo,
                    r.step_change,
                    r.cost_change
                );
            }
        }
        Some("map8") => {
            let eng = engine_for(0.1, "cos2,sin2|N=1|T=1", 1e-6, &|_, y| {
                (2.0 * std::f64::consts::PI * y).sin()
            });
            println!("rows: cos = 0,5,10,20,30,40,50; cols: sin = 0,10,20,30,40,50,60");
            for &c in &[0.0f64, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0] {
                let mut line = format!("c={c:>4}: ");
                for &s in &[0.0f64, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0] {
                    let ev = eng.evaluate(&[c, s]).unwrap();
                    line.push_str(&format!("{:.4e} ", ev.cost.total));
                }
                println!("{line}");
            }
        }
        Some("fine8") => {
            let eng = engine_for(0.05, "cos2,sin2|N=1|T=1", 1e-6, &|_, y| {
                (2.0 * std::f64::consts::PI * y).sin()
            });
            for p in [[50.0, 40.0], [4.97, 51.76], [50.26, 34.51], [20.0, 49.0]] {
                let t0 = std::time::Instant::now();
                let ev = eng.evaluate(&p).unwrap();
                println!(
                    "h=0.05 J({:.2},{:.2}) = {:.6e}  mix={:.6e} pen={:.6e}  ({:.1}s)",
                    p[0],
                    p[1],
                    ev.cost.total,
                    ev.cost.mix_part,
                    ev.cost.penalty_part,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        Some("gsmall") => {
            let eng = engine_for(0.1, "cos2,sin2|N=1|T=1", 1e-6, &|_, y| {
                (2.0 * std::f64::consts::PI * y).sin()
            });
            for a0 in [[1.0f64, 1.0], [5.0, 5.0], [10.0, 20.0]] {
                let ev = eng.evaluate(&a0).unwrap();
                let (gvf, _) = eng
                    .gradient(&a0, &ev, stirmix::optimizer::GradientMethod::Vf, 1e-4)
                    .unwrap();
                let (gad, _) = eng
                    .gradient(&a0, &ev, stirmix::optimizer::GradientMethod::Ad, 1e-4)
                    .unwrap();
                println!("alpha={a0:?} VF b={:?}", gvf.b);
                println!("             AD b={:?}", gad.b);
            }
        }
        Some("pipe") => {
            use stirmix::control::{gradient_sampled, DiffScheme};
            // 1) strong stirring at h=0.2: conservation + dissipation + weak div.
            let eng = engine_for(0.2, "cos2,sin2|N=1|T=1", 1e-6, &|_, y| {
                (2.0 * std::f64::consts::PI * y).sin()
            });
            let ev = eng.evaluate(&[4.97, 51.76]).unwrap();
            let m0 = eng.dg.integral(&ev.theta.fields[0]).unwrap();
            let mut worst_drift = 0.0f64;
            let mut worst_growth = 0.0f64;
            let l2s: Vec<f64> = ev
                .theta
                .fields
                .iter()
                .map(|f| eng.dg.l2_norm(f).unwrap())
                .collect();
            for (k, f) in ev.theta.fields.iter().enumerate() {
                let m = eng.dg.integral(f).unwrap();
                worst_drift = worst_drift.max((m - m0).abs());
                if k > 0 {
                    worst_growth = worst_growth.max(l2s[k] - l2s[k - 1]);
                }
            }
            println!(
                "stir h=0.2: mass drift={worst_drift:.3e} max l2 growth={worst_growth:.3e} l2(0)={:.4} l2(T)={:.4} weakdiv={:.3e}",
                l2s[0],
                l2s.last().unwrap(),
                ev.velocity.max_weak_divergence
            );
            // 2) gradient routes + schemes at a modest point.
            let a = [3.0f64, 5.0];
            let ev2 = eng.evaluate(&a).unwrap();
            let (gvf, _) = eng
                .gradient(&a, &ev2, stirmix::optimizer::GradientMethod::Vf, 1e-4)
                .unwrap();
            let (gad, _) = eng
                .gradient(&a, &ev2, stirmix::optimizer::GradientMethod::Ad, 1e-4)
                .unwrap();
            let mut cost_fn = |al: &[f64]| eng.evaluate(al).map(|e| e.cost.total);
            let (gc, _, _) =
                gradient_sampled(&a, &eng.gram, 1e-4, DiffScheme::Central, &mut cost_fn).unwrap();
            println!("VF  b={:?}", gvf.b);
            println!("ADf b={:?}", gad.b);
            println!("ADc b={:?}", gc.b);
            let diff: f64 = gad
                .xi
                .iter()
                .zip(&gc.xi)
                .map(|(f, c)| (f - c).powi(2))
                .sum::<f64>()
                .sqrt();
            let nrm: f64 = gc.xi.iter().map(|x| x * x).sum::<f64>().sqrt();
            println!("fwd-vs-ctr |dxi|={diff:.3e} |xi|={nrm:.3e} rel={:.3e}", diff / nrm);
            // descent along -b
            let s = 0.01 * (a.iter().map(|x| x * x).sum::<f64>().sqrt())
                / (gvf.b.iter().map(|x| x * x).sum::<f64>().sqrt());
            let trial: Vec<f64> = a.iter().zip(&gvf.b).map(|(x, b)| x - s * b).collect();
            let jt = eng.evaluate(&trial).unwrap().cost.total;
            println!("descent: J={:.6e} -> {:.6e}", ev2.cost.total, jt);
            // 3) tabulated point at h=0.1.
            let eng1 = engine_for(0.1, "cos2,sin2|N=1|T=1", 1e-6, &|_, y| {
                (2.0 * std::f64::consts::PI * y).sin()
            });
            let evt = eng1.evaluate(&[4.97, 51.76]).unwrap();
            println!(
                "tab point: J={:.6e} mix_norm={:.6e} g_norm={:.6e}",
                evt.cost.total, evt.cost.mix_norm, evt.cost.g_norm
            );
            let l2f: Vec<f64> = evt
                .theta
                .fields
                .iter()
                .map(|f| eng1.dg.l2_norm(f).unwrap())
                .collect();
            let mut g1 = 0.0f64;
            for k in 1..l2f.len() {
                g1 = g1.max(l2f[k] - l2f[k - 1]);
            }
            println!("h=0.1 stir: max l2 growth={g1:.3e} l2(T)={:.4}", l2f.last().unwrap());
        }
        Some("pipe2") => {
            use stirmix::optimizer::{run_relay, RelayStage};
            // relay h=0.2 -> h=0.1 vs single run at h=0.1.
            let coarse = engine_for(0.2, "cos1|N=1|T=1", 1e-3, &|_, y| (y / 0.1).tanh());
            let fine = engine_for(0.1, "cos1|N=1|T=1", 1e-3, &|_, y| (y / 0.1).tanh());
            let cfg = OptimizerConfig {
                gamma: 1e-3,
                ..Default::default()
            };
            let stages = vec![
                RelayStage {
                    label: "h=0.2".into(),
                    engine: &coarse,
                },
                RelayStage {
                    label: "h=0.1".into(),
                    engine: &fine,
                },
            ];
            let (rel, single) = if std::env::args().nth(2).is_some() {
                (run_relay(&stages, &cfg, &[1.0], None).unwrap(), run_basic(&fine, &cfg, &[1.0], None).unwrap())
            } else {
                (run_relay(&stages, &cfg, &[1.0], None).unwrap(), run_basic(&fine, &cfg, &[1.0], None).unwrap())
            };
            let jr = rel.records.last().unwrap().cost.total;
            let js = single.records.last().unwrap().cost.total;
            println!(
                "relay J={jr:.6e} alpha={:?}  single J={js:.6e} alpha={:?}  dJ={:.3e}",
                rel.final_alpha,
                single.final_alpha,
                (jr - js).abs() / js
            );
            // mixing contrast at T=10, theta0 = sign(y).
            for &h in &[0.05f64] {
                for modes in ["cos1", "sin1"] {
                    let desc = format!("{modes}|N=1|T=10");
                    let eng = engine_for(h, &desc, 1e-3, &|_, y: f64| {
                        if y > 0.0 {
                            1.0
                        } else if y < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    let t0 = std::time::Instant::now();
                    let ev = eng.evaluate(&[1.0]).unwrap();
                    let vmax = ev.velocity.max_speed(&eng.vspace);
                    let mut hist = String::new();
                    for (k, f) in ev.theta.fields.iter().enumerate() {
                        if k % 100 == 0 {
                            let m = eng
                                .mixnorm
                                .mix_norm(&eng.dg, f)
                                .unwrap();
                            hist.push_str(&format!("{m:.3} "));
                        }
                    }
                    println!(
                        "h={h} {modes}: mix(T=10)={:.6e} vmax={:.4} hist={hist} ({:.1}s)",
                        ev.cost.mix_norm,
                        vmax,
                        t0.elapsed().as_secs_f64()
                    );
                }
            }
        }
        Some("long") => {
            for modes in ["cos1", "sin1"] {
                let desc = format!("{modes}|N=1|T=100");
                let eng = engine_for(0.1, &desc, 1e-3, &|_, y: f64| {
                    if y > 0.0 {
                        1.0
                    } else if y < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let t0 = std::time::Instant::now();
                let ev = eng.evaluate(&[1.0]).unwrap();
                let mut hist = String::new();
                for (k, f) in ev.theta.fields.iter().enumerate() {
                    if k % 1000 == 0 {
                        let m = eng.mixnorm.mix_norm(&eng.dg, f).unwrap();
                        hist.push_str(&format!("{m:.3} "));
                    }
                }
                println!(
                    "T=100 {modes}: mix={:.4e} hist={hist} ({:.0}s)",
                    ev.cost.mix_norm,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        Some("scan7a") => {
            let t0 = std::time::Instant::now();
            let eng = engine_for(0.1, "cos1|N=1|T=1", 1e-3, &|_, y| (y / 0.1).tanh());
            for k in 0..=10 {
                let alpha = [k as f64];
                let ev = eng.evaluate(&alpha).unwrap();
                println!("alpha={} J={:.6e}", k, ev.cost.total);
            }
            println!("({:.1}s)", t0.elapsed().as_secs_f64());
        }
        Some("scan7b") => {
            for &h in &[0.1f64, 0.05] {
                let t0 = std::time::Instant::now();
                let eng = engine_for(h, "cos1|N=1|T=1", 1e-6, &|_, y| (y / 0.1).tanh());
                println!("engine built ({:.1}s)", t0.elapsed().as_secs_f64());
                for &a in &[5.0f64, 10.0, 15.0, 20.0, 45.0, 50.0, 60.0] {
                    let tt = std::time::Instant::now();
                    let ev = eng.evaluate(&[a]).unwrap();
                    println!(
                        "h={h} alpha={a} J={:.6e}  ({:.1}s)",
                        ev.cost.total,
                        tt.elapsed().as_secs_f64()
                    );
                }
            }
        }
        Some("rot") => {
            for &h in &[0.1f64, 0.05] {
                let t0 = std::time::Instant::now();
                let row = stirmix::validation::rotation_transport_errors(h, 2, 1.0).unwrap();
                println!("{row:?}  ({:.1}s)", t0.elapsed().as_secs_f64());
            }
        }
        Some("dual") => {
            for &h in &[0.1f64, 0.05] {
                let t0 = std::time::Instant::now();
                let rep = stirmix::validation::duality_invariance(h).unwrap();
                println!(
                    "h={} deviation={:.4e} n={}  ({:.1}s)",
                    h,
                    rep.deviation,
                    rep.pairings.len(),
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        Some("dual3") => {
            let t0 = std::time::Instant::now();
            let rep = stirmix::validation::duality_invariance(0.025).unwrap();
            println!(
                "h=0.025 deviation={:.4e}  ({:.1}s)",
                rep.deviation,
                t0.elapsed().as_secs_f64()
            );
        }
        Some("grad") => {
            for &h in &[0.1f64, 0.05] {
                let t0 = std::time::Instant::now();
                let b = stirmix::validation::gradient_benchmark(h, None).unwrap();
                println!("{b:?}  ({:.1}s)", t0.elapsed().as_secs_f64());
            }
        }
        Some("energy") => {
            let t0 = std::time::Instant::now();
            let checks = stirmix::validation::energy_balance_check(0.1, &[0.01, 0.005]).unwrap();
            for c in &checks {
                println!("dt={} residual={:.4e}", c.dt, c.report.residual);
            }
            println!("({:.1}s)", t0.elapsed().as_secs_f64());
        }
        _ => {
            for &h in &[0.1f64, 0.05] {
                let t0 = std::time::Instant::now();
                let row = stirmix::validation::manufactured_flow_errors(h, 0.01, 0.5, false).unwrap();
                println!("{row:?}  ({:.1}s)", t0.elapsed().as_secs_f64());
            }
        }
    }
}
