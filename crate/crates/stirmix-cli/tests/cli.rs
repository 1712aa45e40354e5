//! End-to-end tests of the command-line binary: exit codes, CSV shapes,
//! reproducibility, and the headline physics of the forward runs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stirmix"));
    // Pin the metadata timestamp so byte comparisons are meaningful.
    c.env("SOURCE_DATE_EPOCH", "0");
    c
}

/// Fresh per-test output directory.
fn outdir(tag: &str) -> PathBuf {
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let dir = std::env::temp_dir().join(format!(
        "stirmix-cli-test-{}-{tag}-{n}",
        std::process::id()
    ));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_exit(out: &Output, code: i32, context: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{context}: exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Parse a CSV written by the binary: one leading `#` metadata line, a
/// header, then numeric rows. Returns (header, rows).
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let meta = lines.next().expect("metadata line");
    assert!(
        meta.starts_with("# stirmix"),
        "{}: metadata comment missing: {meta}",
        path.display()
    );
    assert!(
        meta.contains("T00:00:00Z"),
        "{}: pinned ISO timestamp missing: {meta}",
        path.display()
    );
    let header: Vec<String> = lines
        .next()
        .expect("header line")
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| {
            l.split(',')
                .map(|c| c.parse::<f64>().unwrap_or_else(|_| {
                    if c == "true" {
                        1.0
                    } else if c == "false" {
                        0.0
                    } else {
                        panic!("{}: unparseable cell {c:?}", path.display())
                    }
                }))
                .collect()
        })
        .collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<f64>], name: &str) -> Vec<f64> {
    let i = header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("column {name} in {header:?}"));
    rows.iter().map(|r| r[i]).collect()
}

#[test]
fn zero_control_leaves_the_scalar_untouched() {
    let dir = outdir("zero");
    let out = run(&[
        "forward",
        "--outdir",
        dir.to_str().unwrap(),
        "--set",
        "h=0.2",
        "--set",
        "basis=cos1|N=1|T=1",
        "--set",
        "theta0=step",
    ]);
    assert_exit(&out, 0, "forward with zero control");

    let (header, rows) = read_csv(&dir.join("mixnorm_vs_time.csv"));
    assert_eq!(rows.len(), 101, "one row per flow snapshot over [0,1]");
    let mix = column(&header, &rows, "mix_norm");
    for m in &mix {
        assert!(
            (m - mix[0]).abs() <= 1e-10,
            "mix-norm must stay constant without stirring: {} vs {}",
            m,
            mix[0]
        );
    }
    let (ke_header, ke_rows) = read_csv(&dir.join("kinetic_energy.csv"));
    let ke = column(&ke_header, &ke_rows, "kinetic_energy");
    assert_eq!(ke.len(), 101);
    assert!(ke.iter().all(|e| e.abs() <= 1e-20), "flow must stay at rest");
}

#[test]
fn long_horizon_contrast_between_the_two_dipoles() {
    let mut terminal = Vec::new();
    let mut initial = Vec::new();
    for modes in ["cos1", "sin1"] {
        let dir = outdir(modes);
        let out = run(&[
            "forward",
            "--outdir",
            dir.to_str().unwrap(),
            "--set",
            "h=0.2",
            "--set",
            &format!("basis={modes}|N=1|T=100"),
            "--set",
            "alpha0=1",
            "--set",
            "theta0=step",
        ]);
        assert_exit(&out, 0, "long forward run");
        let (header, rows) = read_csv(&dir.join("mixnorm_vs_time.csv"));
        let mix = column(&header, &rows, "mix_norm");
        initial.push(mix[0]);
        terminal.push(*mix.last().unwrap());

        // Mass of the two-color scalar stays at its initial value.
        let mass = column(&header, &rows, "mass");
        for m in &mass {
            assert!((m - mass[0]).abs() <= 1e-9, "mass drift {m} vs {}", mass[0]);
        }
    }
    let (cos_end, sin_end) = (terminal[0], terminal[1]);
    assert!(
        cos_end <= 0.15 * initial[0],
        "vertical dipole should mix the layers well by t=100: {} -> {cos_end}",
        initial[0]
    );
    assert!(
        sin_end >= 0.95 * initial[1],
        "horizontal dipole should barely mix the layers: {} -> {sin_end}",
        initial[1]
    );
    assert!(
        sin_end >= 3.0 * cos_end,
        "terminal contrast too weak: {sin_end:.4} vs {cos_end:.4}"
    );
}

#[test]
fn scan_covers_the_grid_and_an_empty_range_is_fine() {
    let dir = outdir("scan");
    let out = run(&[
        "scan",
        "--outdir",
        dir.to_str().unwrap(),
        "--set",
        "h=0.2",
        "--set",
        "basis=cos1|N=1|T=1",
        "--set",
        "theta0=tanh",
        "--set",
        "alpha_min=0",
        "--set",
        "alpha_max=3",
    ]);
    assert_exit(&out, 0, "scan 0..3");
    let (header, rows) = read_csv(&dir.join("cost_scan.csv"));
    let alphas = column(&header, &rows, "alpha1");
    assert_eq!(alphas, vec![0.0, 1.0, 2.0, 3.0]);
    let totals = column(&header, &rows, "cost_total");
    assert!(
        totals[1] < totals[0],
        "a little stirring beats none on this cost: {totals:?}"
    );

    let empty = outdir("scan-empty");
    let out = run(&[
        "scan",
        "--outdir",
        empty.to_str().unwrap(),
        "--set",
        "h=0.2",
        "--set",
        "alpha_min=5",
        "--set",
        "alpha_max=2",
    ]);
    assert_exit(&out, 0, "empty scan range");
    let (_, rows) = read_csv(&empty.join("cost_scan.csv"));
    assert!(rows.is_empty(), "empty range must produce a header-only CSV");
}

#[test]
fn bad_configurations_are_rejected_before_any_solve() {
    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("unknown key", vec!["mesh", "--set", "bogus=1"]),
        ("bad method", vec!["optimize", "--set", "method=newton"]),
        ("relay with one mesh", vec!["relay", "--set", "h=0.1"]),
        (
            "relay not strictly decreasing",
            vec!["relay", "--set", "h=0.1,0.2"],
        ),
        (
            "scan with a two-dimensional basis",
            vec!["scan", "--set", "basis=cos1,sin1|N=1|T=1"],
        ),
        (
            "alpha0 dimension mismatch",
            vec!["forward", "--set", "basis=cos1|N=1|T=1", "--set", "alpha0=1,2"],
        ),
        ("unknown validation suite", vec!["validate", "nonsense"]),
        ("mesh size out of range", vec!["mesh", "--set", "h=2.0"]),
    ];
    for (what, mut args) in cases {
        let dir = outdir("bad");
        args.extend(["--outdir", dir.to_str().unwrap()]);
        let out = bin().args(&args).output().expect("binary runs");
        assert_exit(&out, 2, what);
    }
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = outdir("lock");
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join(".stirmix.lock"), "held\n").unwrap();
    let out = run(&["mesh", "--outdir", dir.to_str().unwrap(), "--set", "h=0.2"]);
    assert_exit(&out, 2, "locked directory");

    // Releasing the lock lets the command through, and the lock is
    // removed again afterwards.
    std::fs::remove_file(dir.join(".stirmix.lock")).unwrap();
    let out = run(&["mesh", "--outdir", dir.to_str().unwrap(), "--set", "h=0.2"]);
    assert_exit(&out, 0, "unlocked directory");
    assert!(!dir.join(".stirmix.lock").exists(), "lock released on exit");
}

#[test]
fn optimize_then_resume_reloads_the_identical_history() {
    let dir = outdir("opt");
    let args = |outdir: &Path, ckpt: &Path| -> Vec<String> {
        vec![
            "--outdir".into(),
            outdir.to_str().unwrap().into(),
            "--set".into(),
            "h=0.2".into(),
            "--set".into(),
            "basis=cos1|N=1|T=1".into(),
            "--set".into(),
            "gamma=1e-3".into(),
            "--set".into(),
            "alpha0=1".into(),
            "--set".into(),
            "theta0=tanh".into(),
            "--set".into(),
            format!("checkpoint={}", ckpt.display()),
        ]
    };
    let ckpt = dir.join("run.ckpt");
    let mut a1: Vec<String> = vec!["optimize".into()];
    a1.extend(args(&dir, &ckpt));
    let out = bin().args(&a1).output().unwrap();
    assert_exit(&out, 0, "optimize");

    let dir2 = outdir("resume");
    let mut a2: Vec<String> = vec!["resume".into()];
    a2.extend(args(&dir2, &ckpt));
    let out = bin().args(&a2).output().unwrap();
    assert_exit(&out, 0, "resume");

    let rows = |d: &Path| -> Vec<String> {
        std::fs::read_to_string(d.join("iterations.csv"))
            .unwrap()
            .lines()
            .skip(1) // metadata names the command, which differs
            .map(str::to_string)
            .collect()
    };
    assert_eq!(
        rows(&dir),
        rows(&dir2),
        "resumed history must match the original bit for bit"
    );

    let (header, data) = read_csv(&dir.join("iterations.csv"));
    let totals = column(&header, &data, "cost_total");
    assert!(
        totals.windows(2).all(|w| w[1] < w[0]),
        "accepted iterates must descend: {totals:?}"
    );
    let final_alpha = *column(&header, &data, "alpha_1").last().unwrap();
    assert!(
        (final_alpha - 5.34255).abs() <= 5e-4,
        "descent target moved: {final_alpha}"
    );
}

#[test]
fn reruns_are_byte_identical_and_snapshots_are_valid_vtk() {
    let run_once = |tag: &str| -> PathBuf {
        let dir = outdir(tag);
        let out = run(&[
            "forward",
            "--outdir",
            dir.to_str().unwrap(),
            "--set",
            "h=0.2",
            "--set",
            "basis=cos1|N=1|T=1",
            "--set",
            "alpha0=2",
            "--set",
            "theta0=sin",
        ]);
        assert_exit(&out, 0, "forward rerun");
        dir
    };
    let d1 = run_once("rep1");
    let d2 = run_once("rep2");
    for file in ["mixnorm_vs_time.csv", "kinetic_energy.csv", "theta_000100.vtk"] {
        let b1 = std::fs::read(d1.join(file)).unwrap();
        let b2 = std::fs::read(d2.join(file)).unwrap();
        assert_eq!(b1, b2, "{file} differs between identical runs");
    }

    let vtk = std::fs::read_to_string(d1.join("theta_000100.vtk")).unwrap();
    assert!(vtk.starts_with("# vtk DataFile Version 3.0"));
    for section in [
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        "POINTS",
        "CELLS",
        "CELL_TYPES",
        "CELL_DATA",
        "SCALARS theta double 1",
        "POINT_DATA",
    ] {
        assert!(vtk.contains(section), "VTK section {section} missing");
    }
}

#[test]
fn energy_validation_suite_passes_and_writes_a_report() {
    let dir = outdir("val");
    let out = run(&["validate", "energy", "--outdir", dir.to_str().unwrap()]);
    assert_exit(&out, 0, "validate energy");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS energy_residual_dt=0.01"));
    let (header, rows) = read_csv(&dir.join("validate_energy.csv"));
    assert_eq!(rows.len(), 2);
    let pass = column(&header, &rows, "pass");
    assert!(pass.iter().all(|p| *p == 1.0));
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = outdir("cfgfile");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("run.cfg");
    std::fs::write(
        &cfg,
        "# experiment defaults\nh=0.3\nbasis=cos1|N=1|T=1\ntheta0=tanh\ngamma=1e-3\n",
    )
    .unwrap();
    // The --set override wins over the file value.
    let out = run(&[
        "mesh",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "h=0.2",
        "--outdir",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_exit(&out, 0, "mesh with config file");
    let (header, rows) = read_csv(&dir.join("out/mesh_stats.csv"));
    assert_eq!(column(&header, &rows, "h"), vec![0.2]);

    // An expression initial scalar parses, runs, and reproduces the
    // equivalent built-in profile.
    for (tag, theta0) in [("expr", "theta0=sin(2*pi*y)"), ("named", "theta0=sin")] {
        let out = run(&[
            "forward",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "h=0.2",
            "--set",
            theta0,
            "--outdir",
            dir.join(tag).to_str().unwrap(),
        ]);
        assert_exit(&out, 0, theta0);
    }
    let series = |tag: &str| -> Vec<f64> {
        let (header, rows) = read_csv(&dir.join(tag).join("mixnorm_vs_time.csv"));
        column(&header, &rows, "mix_norm")
    };
    let (expr, named) = (series("expr"), series("named"));
    for (a, b) in expr.iter().zip(&named) {
        assert!(
            (a - b).abs() <= 1e-12 * b.abs(),
            "expression and built-in profiles diverge: {a} vs {b}"
        );
    }
}
