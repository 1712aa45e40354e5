//! Flat key=value run configuration with command-line overrides.
//!
//! A run is described by a small set of typed keys (mesh size, horizon
//! discretization, control basis, initial scalar, optimizer knobs, output
//! locations). Values come from an optional config file, then `--set`
//! overrides in command-line order, then dedicated flags. Unknown keys are
//! rejected so typos cannot silently fall back to defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use stirmix::optimizer::{GradientMethod, OptimizerConfig};

use crate::CliError;

/// Initial-scalar selector. Three named profiles cover the standard
/// experiments; anything else is parsed as an expression in `x` and `y`
/// (standard functions and the constant `pi` are available).
#[derive(Debug, Clone, PartialEq)]
pub enum Theta0 {
    /// tanh(y / 0.1): a smoothed horizontal interface.
    Tanh,
    /// sin(2 pi y): a layered sine profile.
    Sin,
    /// sign(y): a sharp two-color interface, stored as its projection.
    Step,
    /// Arbitrary expression in x and y.
    Expr(String),
}

impl Theta0 {
    pub fn parse(value: &str) -> Self {
        match value {
            "tanh" => Theta0::Tanh,
            "sin" => Theta0::Sin,
            "step" => Theta0::Step,
            other => Theta0::Expr(other.to_string()),
        }
    }

    /// Canonical spelling for metadata lines.
    pub fn descriptor(&self) -> String {
        match self {
            Theta0::Tanh => "tanh".into(),
            Theta0::Sin => "sin".into(),
            Theta0::Step => "step".into(),
            Theta0::Expr(s) => s.clone(),
        }
    }

    /// Compile to a pointwise function.
    pub fn build(&self) -> Result<Box<dyn Fn(f64, f64) -> f64>, CliError> {
        match self {
            Theta0::Tanh => Ok(Box::new(|_, y| (y / 0.1).tanh())),
            Theta0::Sin => Ok(Box::new(|_, y| (2.0 * std::f64::consts::PI * y).sin())),
            Theta0::Step => Ok(Box::new(|_, y| if y > 0.0 { 1.0 } else { -1.0 })),
            Theta0::Expr(src) => {
                let expr: meval::Expr = src
                    .parse()
                    .map_err(|e| CliError::Config(format!("theta0 expression: {e}")))?;
                let f = expr
                    .bind2("x", "y")
                    .map_err(|e| CliError::Config(format!("theta0 expression: {e}")))?;
                Ok(Box::new(f))
            }
        }
    }
}

/// Complete, validated description of one command's inputs.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Mesh size(s); a single entry for ordinary runs, a strictly
    /// decreasing list for relay runs.
    pub h: Vec<f64>,
    /// Flow time step.
    pub dt: f64,
    /// Transport polynomial degree.
    pub degree: usize,
    /// Slip friction coefficient.
    pub slip_k: f64,
    /// Control penalty weight.
    pub gamma: f64,
    /// Control basis descriptor, e.g. `cos1,sin1|N=1|T=1`.
    pub basis: String,
    /// Control coefficients: the evaluation point for `forward`, the
    /// starting point for `optimize`/`relay`. Empty means all zeros.
    pub alpha0: Vec<f64>,
    pub theta0: Theta0,
    /// Gradient route for the optimizer.
    pub method: GradientMethod,
    pub tol: f64,
    pub mu: f64,
    pub back_max: usize,
    pub grad_max: usize,
    pub step_scale0: f64,
    pub delta: f64,
    pub outdir: PathBuf,
    /// Checkpoint file; defaults to `<outdir>/run.ckpt` when needed.
    pub checkpoint: Option<PathBuf>,
    /// Times at which `forward` exports field snapshots; empty means the
    /// endpoints of the horizon.
    pub snapshots: Vec<f64>,
    /// Scan grid: alpha_min, alpha_min+stride, ... up to alpha_max.
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub stride: f64,
    /// Whether field exports also carry vertex-sampled values.
    pub vertex_values: bool,
    /// Directory for cached basis-flow trajectories.
    pub cache: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            h: vec![0.1],
            dt: 0.01,
            degree: 2,
            slip_k: 0.5,
            gamma: 1e-3,
            basis: "cos1|N=1|T=1".into(),
            alpha0: Vec::new(),
            theta0: Theta0::Step,
            method: GradientMethod::Vf,
            tol: 1e-5,
            mu: 0.3,
            back_max: 10,
            grad_max: 1000,
            step_scale0: 1e3,
            delta: 1e-4,
            outdir: PathBuf::from("out"),
            checkpoint: None,
            snapshots: Vec::new(),
            alpha_min: 0.0,
            alpha_max: 10.0,
            stride: 1.0,
            vertex_values: true,
            cache: None,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64, CliError> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("key {key}: expected a number, got {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize, CliError> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("key {key}: expected an integer, got {v:?}")))
}

fn parse_f64_list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    let t = v.trim();
    if t.is_empty() {
        return Ok(Vec::new());
    }
    t.split(',').map(|s| parse_f64(key, s)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(CliError::Config(format!(
            "key {key}: expected true/false, got {other:?}"
        ))),
    }
}

fn fmt_list(xs: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x}");
    }
    s
}

impl RunConfig {
    /// Assemble a configuration: defaults, then the config file, then
    /// `--set key=value` overrides in order, then the `--outdir` flag.
    pub fn load(
        file: Option<&Path>,
        sets: &[String],
        outdir: Option<&Path>,
    ) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (ln, raw) in text.lines().enumerate() {
                let line = raw.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::Config(format!(
                        "{}:{}: expected key=value, got {line:?}",
                        path.display(),
                        ln + 1
                    ))
                })?;
                cfg.apply(key.trim(), value.trim())?;
            }
        }
        for s in sets {
            let (key, value) = s.split_once('=').ok_or_else(|| {
                CliError::Config(format!("--set expects key=value, got {s:?}"))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        if let Some(dir) = outdir {
            cfg.outdir = dir.to_path_buf();
        }
        cfg.check()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "h" => self.h = parse_f64_list(key, value)?,
            "dt" => self.dt = parse_f64(key, value)?,
            "degree" => self.degree = parse_usize(key, value)?,
            "k" => self.slip_k = parse_f64(key, value)?,
            "gamma" => self.gamma = parse_f64(key, value)?,
            "basis" => self.basis = value.to_string(),
            "alpha0" => self.alpha0 = parse_f64_list(key, value)?,
            "theta0" => self.theta0 = Theta0::parse(value),
            "method" => {
                self.method = match value {
                    "vf" => GradientMethod::Vf,
                    "ad" => GradientMethod::Ad,
                    other => {
                        return Err(CliError::Config(format!(
                            "key method: expected vf or ad, got {other:?}"
                        )))
                    }
                }
            }
            "tol" => self.tol = parse_f64(key, value)?,
            "mu" => self.mu = parse_f64(key, value)?,
            "back_max" => self.back_max = parse_usize(key, value)?,
            "grad_max" => self.grad_max = parse_usize(key, value)?,
            "step_scale0" => self.step_scale0 = parse_f64(key, value)?,
            "delta" => self.delta = parse_f64(key, value)?,
            "outdir" => self.outdir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "snapshots" => self.snapshots = parse_f64_list(key, value)?,
            "alpha_min" => self.alpha_min = parse_f64(key, value)?,
            "alpha_max" => self.alpha_max = parse_f64(key, value)?,
            "stride" => self.stride = parse_f64(key, value)?,
            "vertex_values" => self.vertex_values = parse_bool(key, value)?,
            "cache" => self.cache = Some(PathBuf::from(value)),
            other => {
                return Err(CliError::Config(format!("unknown config key {other:?}")))
            }
        }
        Ok(())
    }

    /// Command-independent sanity checks.
    fn check(&self) -> Result<(), CliError> {
        if self.h.is_empty() {
            return Err(CliError::Config("key h: at least one mesh size".into()));
        }
        for &h in &self.h {
            if !(h > 0.0 && h < 1.0) {
                return Err(CliError::Config(format!(
                    "key h: mesh size {h} outside (0, 1)"
                )));
            }
        }
        if !(self.dt > 0.0) {
            return Err(CliError::Config("key dt: must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(CliError::Config("key gamma: must be nonnegative".into()));
        }
        if !(self.stride > 0.0) {
            return Err(CliError::Config("key stride: must be positive".into()));
        }
        Ok(())
    }

    /// Exactly one mesh size (everything except relay/resume-relay).
    pub fn single_h(&self) -> Result<f64, CliError> {
        if self.h.len() != 1 {
            return Err(CliError::Config(format!(
                "this command needs exactly one mesh size, got h={}",
                fmt_list(&self.h)
            )));
        }
        Ok(self.h[0])
    }

    /// Optimizer knobs in library form.
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            gamma: self.gamma,
            tol: self.tol,
            mu: self.mu,
            back_max: self.back_max,
            grad_max: self.grad_max,
            step_scale0: self.step_scale0,
            method: self.method,
            delta: self.delta,
        }
    }

    /// Coefficients to run at: the configured ones, or zeros of the basis
    /// dimension when left empty.
    pub fn coefficients(&self, dim: usize) -> Result<Vec<f64>, CliError> {
        if self.alpha0.is_empty() {
            return Ok(vec![0.0; dim]);
        }
        if self.alpha0.len() != dim {
            return Err(CliError::Config(format!(
                "alpha0 has {} entries but the basis has dimension {dim}",
                self.alpha0.len()
            )));
        }
        Ok(self.alpha0.clone())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.outdir.join("run.ckpt"))
    }

    /// Canonical key=value pairs for CSV metadata lines (fixed order, so
    /// identical configurations produce identical bytes).
    pub fn pairs(&self) -> Vec<(String, String)> {
        let method = match self.method {
            GradientMethod::Vf => "vf",
            GradientMethod::Ad => "ad",
        };
        vec![
            ("h".into(), fmt_list(&self.h)),
            ("dt".into(), format!("{}", self.dt)),
            ("degree".into(), format!("{}", self.degree)),
            ("k".into(), format!("{}", self.slip_k)),
            ("gamma".into(), format!("{}", self.gamma)),
            ("basis".into(), self.basis.clone()),
            ("alpha0".into(), fmt_list(&self.alpha0)),
            ("theta0".into(), self.theta0.descriptor()),
            ("method".into(), method.into()),
        ]
    }
}
