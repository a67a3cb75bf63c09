//! Experiment configuration, presets, seed sweeps and CSV/JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::absorbing::AbsorbingSpec;
use crate::error::{Error, Result};
use crate::landscape::{numeric_rank, Classification};
use crate::linalg::Mat;
use crate::linnet::{forward_product, ArchSpec};
use crate::objective::CompletionProblem;
use crate::optimizer::{
    derive_seed, run, run_from, DivergenceInfo, InitSpec, Mode, RunConfig, Schedule, Segment, StepConvention,
    TrajectoryRecord, TrajectoryRow,
};

fn default_name() -> String {
    "experiment".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_record_every() -> usize {
    10
}
fn default_diagnostics_every() -> usize {
    1
}
fn default_rank_tol() -> f64 {
    1e-6
}
fn default_scale() -> f64 {
    1.0
}
fn default_threshold() -> f64 {
    0.05
}
fn default_sustain() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// `[[1, *], [ε, 1]]`, completed by `1/ε`.
    TwoByTwo { epsilon: f64 },
    /// Observed `(i, j, value)` triples, optional held-out `(i, j, value)` truths for
    /// missing entries and the minimal fitting rank.
    Explicit {
        rows: usize,
        cols: usize,
        observed: Vec<(usize, usize, f64)>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        hidden: Vec<(usize, usize, f64)>,
        r_star: usize,
    },
}

impl ProblemConfig {
    pub fn build(&self) -> Result<CompletionProblem> {
        match self {
            ProblemConfig::TwoByTwo { epsilon } => CompletionProblem::two_by_two(*epsilon),
            ProblemConfig::Explicit {
                rows,
                cols,
                observed,
                hidden,
                ..
            } => {
                let mut target = Mat::zeros(*rows, *cols);
                for &(i, j, v) in hidden.iter().chain(observed) {
                    if i >= *rows || j >= *cols {
                        return Err(Error::Config(format!(
                            "problem: entry ({i}, {j}) outside a {rows}x{cols} matrix"
                        )));
                    }
                    target[(i, j)] = v;
                }
                CompletionProblem::new(target, observed.iter().map(|&(i, j, _)| (i, j)).collect())
            }
        }
    }

    pub fn r_star(&self) -> usize {
        match self {
            ProblemConfig::TwoByTwo { .. } => 1,
            ProblemConfig::Explicit { r_star, .. } => *r_star,
        }
    }

    /// Missing entries with known truth.
    pub fn held_out(&self, p: &CompletionProblem) -> Vec<(usize, usize)> {
        match self {
            ProblemConfig::TwoByTwo { .. } => p.missing(),
            ProblemConfig::Explicit { hidden, .. } => hidden.iter().map(|&(i, j, _)| (i, j)).collect(),
        }
    }

    fn with_epsilon(&self, eps: f64) -> Result<Self> {
        match self {
            ProblemConfig::TwoByTwo { .. } => Ok(ProblemConfig::TwoByTwo { epsilon: eps }),
            ProblemConfig::Explicit { .. } => Err(Error::Config(
                "grid.epsilons needs a two_by_two problem".into(),
            )),
        }
    }

    fn epsilon(&self) -> Option<f64> {
        match self {
            ProblemConfig::TwoByTwo { epsilon } => Some(*epsilon),
            ProblemConfig::Explicit { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    /// Width of every hidden layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Full width list `d_in, …, d_out`; overrides `depth`/`width`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<usize>>,
}

impl ArchConfig {
    pub fn build(&self, p: &CompletionProblem) -> Result<ArchSpec> {
        if let Some(w) = &self.widths {
            let arch = ArchSpec::new(w.clone())?;
            if arch.d_in() != p.d_in() || arch.d_out() != p.d_out() {
                return Err(Error::Config(format!(
                    "arch.widths maps {} -> {} but the problem is {}x{}",
                    arch.d_in(),
                    arch.d_out(),
                    p.d_out(),
                    p.d_in()
                )));
            }
            return Ok(arch);
        }
        let depth = self
            .depth
            .ok_or_else(|| Error::Config("arch: set either `widths` or `depth` and `width`".into()))?;
        let width = self
            .width
            .unwrap_or_else(|| p.d_in().min(p.d_out()));
        ArchSpec::uniform(p.d_in(), p.d_out(), depth, width)
    }

    fn with_depth(&self, depth: usize) -> Result<Self> {
        if self.widths.is_some() {
            return Err(Error::Config("grid.depths needs arch.depth/arch.width, not arch.widths".into()));
        }
        Ok(Self {
            depth: Some(depth),
            ..self.clone()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { scale: default_scale() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbsorbingConfig {
    pub r: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub alpha: f64,
    pub cap_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffshootConfig {
    pub branch_steps: Vec<usize>,
    pub eta: f64,
    pub lambda: f64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_every: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpConfig {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_sustain")]
    pub sustain: usize,
}

impl Default for JumpConfig {
    fn default() -> Self {
        Self {
            threshold: default_threshold(),
            sustain: default_sustain(),
        }
    }
}

/// Low-noise tail appended after each high-noise duration `t₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowNoiseConfig {
    pub steps: usize,
    pub eta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilons: Option<Vec<f64>>,
    /// High-noise durations `t₀`: the schedule is cut at `t₀` and `low_noise` appended.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_durations: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_noise: Option<LowNoiseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeConfig {
    /// Defaults to the λ of the last schedule segment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub eta: f64,
    pub grad_tol: f64,
    pub max_steps: usize,
    #[serde(default = "default_probes")]
    pub hessian_probes: usize,
    #[serde(default = "default_hessian_iters")]
    pub hessian_iters: usize,
}

fn default_probes() -> usize {
    3
}
fn default_hessian_iters() -> usize {
    5000
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            eta: 0.05,
            grad_tol: 1e-10,
            max_steps: 2_000_000,
            hessian_probes: default_probes(),
            hessian_iters: default_hessian_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub decay_convention: StepConvention,
    /// Balance and soft-rank columns on every k-th recorded row (0 leaves them empty).
    #[serde(default = "default_diagnostics_every")]
    pub diagnostics_every: usize,
    /// Relative singular-value threshold for the reported numeric rank.
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub problem: ProblemConfig,
    pub arch: ArchConfig,
    #[serde(default)]
    pub init: InitConfig,
    pub schedule: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absorbing: Option<AbsorbingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offshoots: Option<OffshootConfig>,
    #[serde(default)]
    pub jump: JumpConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landscape: Option<LandscapeConfig>,
}

/// 1-based line of the first assignment or table header mentioning `key`.
fn line_of(src: &str, key: &str) -> Option<usize> {
    let leaf = key.rsplit('.').next().unwrap_or(key);
    src.lines().position(|l| {
        let t = l.trim_start();
        t.starts_with(&format!("{leaf} ")) || t.starts_with(&format!("{leaf}=")) || t.contains(&format!("[{key}]"))
    })
    .map(|i| i + 1)
}

fn invalid(src: Option<&str>, key: &str, msg: impl std::fmt::Display) -> Error {
    match src.and_then(|s| line_of(s, key)) {
        Some(line) => Error::Config(format!("`{key}` (line {line}): {msg}")),
        None => Error::Config(format!("`{key}`: {msg}")),
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate_with_source(Some(src))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with_source(None)
    }

    fn validate_with_source(&self, src: Option<&str>) -> Result<()> {
        if self.record_every == 0 {
            return Err(invalid(src, "record_every", "must be at least 1"));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(invalid(src, "rank_tol", "must lie in (0, 1)"));
        }
        if !(self.init.scale > 0.0) {
            return Err(invalid(src, "init.scale", "must be positive"));
        }
        let schedule = Schedule::new(self.schedule.clone()).map_err(|e| invalid(src, "schedule", e))?;
        let jump = &self.jump;
        if !(jump.threshold > 0.0 && jump.threshold < 1.0) {
            return Err(invalid(src, "jump.threshold", "must lie in (0, 1)"));
        }
        if jump.sustain == 0 {
            return Err(invalid(src, "jump.sustain", "must be at least 1"));
        }
        let p = self.problem.build().map_err(|e| invalid(src, "problem", e))?;
        self.arch.build(&p).map_err(|e| invalid(src, "arch", e))?;
        if let Some(a) = &self.absorbing {
            AbsorbingSpec::new(a.r, a.eps1, a.eps2, a.alpha, a.cap_c, 1).map_err(|e| invalid(src, "absorbing", e))?;
        }
        let cells = self.cells().map_err(|e| invalid(src, "grid", e))?;
        if let Some(o) = &self.offshoots {
            if o.steps == 0 || !(o.eta > 0.0) || !(o.lambda >= 0.0) {
                return Err(invalid(src, "offshoots", "needs positive steps and eta, nonnegative lambda"));
            }
            if o.record_every == Some(0) {
                return Err(invalid(src, "offshoots.record_every", "must be at least 1"));
            }
            let horizon = cells.iter().map(|c| c.schedule.total()).min().unwrap_or(schedule.total());
            if let Some(b) = o.branch_steps.iter().find(|&&b| b > horizon) {
                return Err(invalid(
                    src,
                    "offshoots.branch_steps",
                    format!("branch step {b} lies beyond the main-run horizon {horizon}"),
                ));
            }
        }
        Ok(())
    }

    /// Every `(depth, ε, t₀)` combination the grid spans, in that nesting order.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let grid = self.grid.clone().unwrap_or_default();
        let base = Schedule::new(self.schedule.clone())?;
        let depths: Vec<Option<usize>> = match &grid.depths {
            Some(d) => d.iter().map(|&x| Some(x)).collect(),
            None => vec![None],
        };
        let epsilons: Vec<Option<f64>> = match &grid.epsilons {
            Some(e) => e.iter().map(|&x| Some(x)).collect(),
            None => vec![None],
        };
        let durations: Vec<Option<usize>> = match &grid.noise_durations {
            Some(t) => {
                if grid.low_noise.is_none() {
                    return Err(Error::Config("grid.noise_durations needs grid.low_noise".into()));
                }
                t.iter().map(|&x| Some(x)).collect()
            }
            None => vec![None],
        };
        let mut cells = Vec::new();
        for &depth in &depths {
            for &eps in &epsilons {
                for &t0 in &durations {
                    let arch = match depth {
                        Some(d) => self.arch.with_depth(d)?,
                        None => self.arch.clone(),
                    };
                    let problem = match eps {
                        Some(e) => self.problem.with_epsilon(e)?,
                        None => self.problem.clone(),
                    };
                    let schedule = match (t0, &grid.low_noise) {
                        (Some(t), Some(low)) => {
                            if t > base.total() {
                                return Err(Error::Config(format!(
                                    "noise duration {t} exceeds the schedule's {} steps",
                                    base.total()
                                )));
                            }
                            base.truncated_then(
                                t,
                                Segment {
                                    end: low.steps,
                                    eta: low.eta,
                                    lambda: low.lambda,
                                },
                            )?
                        }
                        _ => base.clone(),
                    };
                    let mut parts = Vec::new();
                    if let Some(d) = depth {
                        parts.push(format!("depth{d}"));
                    }
                    if let Some(e) = eps {
                        parts.push(format!("eps{e}"));
                    }
                    if let Some(t) = t0 {
                        parts.push(format!("t0_{t}"));
                    }
                    let label = if parts.is_empty() { "main".to_string() } else { parts.join("_") };
                    cells.push(Cell {
                        label,
                        depth: arch.depth.or_else(|| arch.widths.as_ref().map(|w| w.len() - 1)),
                        epsilon: problem.epsilon(),
                        noise_duration: t0,
                        problem,
                        arch,
                        schedule,
                    });
                }
            }
        }
        Ok(cells)
    }
}

/// One grid point of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub depth: Option<usize>,
    pub epsilon: Option<f64>,
    pub noise_duration: Option<usize>,
    pub problem: ProblemConfig,
    pub arch: ArchConfig,
    pub schedule: Schedule,
}

/// Reads and validates a TOML experiment file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&src)
}

fn two_phase(warmup: usize, warm_eta: f64, end: usize, eta: f64, lambda: f64) -> Vec<Segment> {
    vec![
        Segment {
            end: warmup,
            eta: warm_eta,
            lambda,
        },
        Segment { end, eta, lambda },
    ]
}

/// Presets reproducing the four toy experiments.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let base = |name: &str, epsilon: f64, depth: usize, schedule: Vec<Segment>| ExperimentConfig {
        name: name.into(),
        seeds: (0..5).collect(),
        record_every: 10,
        mode: Mode::Sgd,
        decay_convention: StepConvention::Unhalved,
        diagnostics_every: 10,
        rank_tol: 0.05,
        out: None,
        problem: ProblemConfig::TwoByTwo { epsilon },
        arch: ArchConfig {
            depth: Some(depth),
            width: Some(100),
            widths: None,
        },
        init: InitConfig { scale: 0.5 },
        schedule,
        absorbing: Some(AbsorbingConfig {
            r: 1,
            eps1: 0.05,
            eps2: 0.4,
            alpha: 0.01,
            cap_c: 100.0,
        }),
        offshoots: None,
        jump: JumpConfig::default(),
        grid: None,
        landscape: None,
    };
    match name {
        "fig1" => Ok(ExperimentConfig {
            offshoots: Some(OffshootConfig {
                branch_steps: (1..=20).map(|k| 500 * k).collect(),
                eta: 0.02,
                lambda: 0.001,
                steps: 5000,
                record_every: None,
            }),
            ..base("fig1", 0.25, 3, two_phase(500, 0.03, 10_500, 0.2, 0.1))
        }),
        "fig2" => {
            let mut schedule = two_phase(500, 0.03, 5000, 0.25, 0.1);
            schedule.push(Segment {
                end: 8000,
                eta: 0.05,
                lambda: 0.001,
            });
            Ok(ExperimentConfig {
                grid: Some(GridConfig {
                    depths: Some(vec![3, 4]),
                    ..Default::default()
                }),
                ..base("fig2", 0.1, 3, schedule)
            })
        }
        "fig3" => Ok(ExperimentConfig {
            grid: Some(GridConfig {
                depths: None,
                epsilons: Some(vec![0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 1.0]),
                noise_durations: Some(vec![0, 1000, 2000, 4000, 8000]),
                low_noise: Some(LowNoiseConfig {
                    steps: 4000,
                    eta: 0.02,
                    lambda: 0.001,
                }),
            }),
            ..base("fig3", 0.25, 4, two_phase(500, 0.03, 8000, 0.2, 0.1))
        }),
        "fig4" => {
            let schedule = (0..10)
                .map(|k| {
                    let (eta, lambda) = if k % 2 == 0 { (0.1, 0.001) } else { (0.4, 0.1) };
                    Segment {
                        end: 1000 * (k + 1),
                        eta,
                        lambda,
                    }
                })
                .collect();
            Ok(base("fig4", 0.2, 3, schedule))
        }
        other => Err(Error::Usage(format!(
            "unknown preset `{other}` (expected fig1, fig2, fig3 or fig4)"
        ))),
    }
}

pub const PRESETS: [&str; 4] = ["fig1", "fig2", "fig3", "fig4"];

/// First recorded step whose ratio is below `threshold` and stays below for `sustain`
/// consecutive recorded points (counting itself).
pub fn detect_jump_in(ratios: &[(usize, f64)], threshold: f64, sustain: usize) -> Option<usize> {
    jump_row(ratios, threshold, sustain).map(|k| ratios[k].0)
}

fn jump_row(ratios: &[(usize, f64)], threshold: f64, sustain: usize) -> Option<usize> {
    let sustain = sustain.max(1);
    let mut run = 0;
    for (k, &(_, r)) in ratios.iter().enumerate() {
        if r < threshold {
            run += 1;
            if run == sustain {
                return Some(k + 1 - sustain);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// [`detect_jump_in`] on a trajectory.
pub fn detect_jump(record: &TrajectoryRecord, threshold: f64, sustain: usize) -> Option<usize> {
    detect_jump_in(&record.ratios(), threshold, sustain)
}

/// Step of the last point of the sustain window that confirmed the jump.
pub fn jump_confirmation(ratios: &[(usize, f64)], threshold: f64, sustain: usize) -> Option<usize> {
    jump_row(ratios, threshold, sustain).map(|k| ratios[k + sustain.max(1) - 1].0)
}

/// First recorded step after a detected jump, inside the jump's schedule segment,
/// where the ratio climbs back above `2·threshold`.
pub fn reverse_jump(ratios: &[(usize, f64)], schedule: &Schedule, threshold: f64, sustain: usize) -> Option<usize> {
    let start = detect_jump_in(ratios, threshold, sustain)?;
    let seg = schedule.segment_index(start.min(schedule.total().saturating_sub(1))).ok()?;
    let end = schedule.segments()[seg].end;
    ratios
        .iter()
        .filter(|&&(s, _)| s > start && s <= end)
        .find(|&&(_, r)| r > 2.0 * threshold)
        .map(|&(s, _)| s)
}

/// Trajectory CSV header for a target with `d` singular values.
pub fn csv_header(d: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "eta", "lambda", "train_cost", "reg_loss", "param_norm_sq"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=d).map(|k| format!("s{k}")));
    h.extend(
        [
            "ratio_s2_s1",
            "balance_err_max_spec",
            "balance_err_max_fro",
            "softrank_min",
            "softrank_max",
            "sampled_i",
            "sampled_j",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h
}

/// 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

fn csv_row(row: &TrajectoryRow, d: usize) -> Vec<String> {
    let mut out = vec![
        row.step.to_string(),
        fmt_float(row.eta),
        fmt_float(row.lambda),
        fmt_float(row.train_cost),
        fmt_float(row.reg_loss),
        fmt_float(row.param_norm_sq),
    ];
    out.extend((0..d).map(|k| fmt_float(row.singular_values.get(k).copied().unwrap_or(0.0))));
    out.push(fmt_float(row.ratio_s2_s1));
    out.push(fmt_opt(row.balance_max_spectral()));
    out.push(fmt_opt(row.balance_max_frobenius()));
    out.push(fmt_opt(row.soft_rank_min()));
    out.push(fmt_opt(row.soft_rank_max()));
    match row.sampled {
        Some((i, j)) => {
            out.push(i.to_string());
            out.push(j.to_string());
        }
        None => {
            out.push(String::new());
            out.push(String::new());
        }
    }
    out
}

/// Writes the trajectory CSV.
pub fn write_trajectory_csv(path: &Path, record: &TrajectoryRecord, d: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(csv_header(d)).map_err(|e| csv_error(path, e))?;
    for row in &record.rows {
        w.write_record(csv_row(row, d)).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Serialize(format!("{}: {e}", path.display()))
}

/// `(step, s₂/s₁)` pairs read back from a trajectory CSV.
pub fn read_ratios_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Serialize(format!("{}: missing column {name}", path.display())))
    };
    let (step_col, ratio_col) = (col("step")?, col("ratio_s2_s1")?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let parse_err = |what: &str| Error::Serialize(format!("{}: bad {what}", path.display()));
        let step = rec[step_col].parse().map_err(|_| parse_err("step"))?;
        let ratio = rec[ratio_col].parse().map_err(|_| parse_err("ratio"))?;
        out.push((step, ratio));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryEstimate {
    pub i: usize,
    pub j: usize,
    pub value: f64,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchPhase {
    /// Branched before the jump step.
    PreJump,
    /// Branched between the jump step and its confirmation.
    Transitional,
    /// Branched at or after the jump was confirmed.
    PostJump,
    /// The main run never jumped.
    NoJump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffshootSummary {
    pub branch_step: usize,
    pub phase: BranchPhase,
    pub csv: String,
    pub diverged: Option<DivergenceInfo>,
    pub final_missing: Vec<EntryEstimate>,
    /// `|estimate − target| / |target|` for the first held-out entry.
    pub relative_error: Option<f64>,
    pub final_numeric_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub cell: String,
    pub seed: u64,
    pub depth: Option<usize>,
    pub epsilon: Option<f64>,
    pub noise_duration: Option<usize>,
    pub csv: String,
    pub diverged: Option<DivergenceInfo>,
    pub jump_detected: bool,
    pub jump_step: Option<usize>,
    pub jump_confirmed_step: Option<usize>,
    pub reverse_jump_step: Option<usize>,
    pub final_step: usize,
    pub final_ratio: f64,
    pub final_singular_values: Vec<f64>,
    pub final_missing: Vec<EntryEstimate>,
    pub final_numeric_rank: Option<usize>,
    pub classification: Option<Classification>,
    /// Held-out squared error over the error of filling zeros.
    pub test_error_ratio: Option<f64>,
    pub offshoots: Vec<OffshootSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub seeds: usize,
    pub jumps: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<SeedSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<String>,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

fn estimates(a: &Mat, p: &CompletionProblem, held_out: &[(usize, usize)]) -> Vec<EntryEstimate> {
    held_out
        .iter()
        .map(|&(i, j)| EntryEstimate {
            i,
            j,
            value: a[(i, j)],
            target: p.target()[(i, j)],
        })
        .collect()
}

fn test_error_ratio(est: &[EntryEstimate]) -> Option<f64> {
    let zero: f64 = est.iter().map(|e| e.target * e.target).sum();
    if est.is_empty() || zero == 0.0 {
        return None;
    }
    Some(est.iter().map(|e| (e.value - e.target).powi(2)).sum::<f64>() / zero)
}

fn final_state(record: &TrajectoryRecord, p: &CompletionProblem, held_out: &[(usize, usize)], rank_tol: f64) -> (Vec<EntryEstimate>, Option<usize>) {
    if record.diverged.is_some() || !record.final_params.is_finite() {
        return (Vec::new(), None);
    }
    let a = forward_product(&record.final_params);
    (estimates(&a, p, held_out), numeric_rank(&a, rank_tol).ok())
}

struct Job<'a> {
    cell: &'a Cell,
    seed: u64,
}

fn main_run(cfg: &ExperimentConfig, cell: &Cell, seed: u64, snapshots: bool) -> Result<(RunConfig, TrajectoryRecord)> {
    let p = cell.problem.build()?;
    let arch = cell.arch.build(&p)?;
    let absorbing = match &cfg.absorbing {
        Some(a) => Some(AbsorbingSpec::for_arch(a.r, a.eps1, a.eps2, a.alpha, a.cap_c, &arch)?),
        None => None,
    };
    let mut rc = RunConfig::new(
        p,
        arch,
        InitSpec {
            scale: cfg.init.scale,
            seed: derive_seed(seed, 0),
        },
        cell.schedule.clone(),
        derive_seed(seed, 1),
    );
    rc.record_every = cfg.record_every;
    rc.mode = cfg.mode;
    rc.convention = cfg.decay_convention;
    rc.absorbing = absorbing;
    rc.full_diagnostics_every = cfg.diagnostics_every;
    if let (Some(o), true) = (&cfg.offshoots, snapshots) {
        rc.snapshots = o.branch_steps.clone();
    }
    let record = run(&rc)?;
    Ok((rc, record))
}

fn run_job(cfg: &ExperimentConfig, job: &Job, out: &Path) -> Result<(SeedSummary, Vec<String>)> {
    let cell = job.cell;
    let (rc, record) = main_run(cfg, cell, job.seed, true)?;
    let p = rc.problem.clone();
    let d = p.d_in().min(p.d_out());
    let held_out = cell.problem.held_out(&p);

    let dir = out.join(&cell.label);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rel = format!("{}/seed{}.csv", cell.label, job.seed);
    write_trajectory_csv(&out.join(&rel), &record, d)?;
    let mut files = vec![rel.clone()];

    let ratios = record.ratios();
    let jcfg = &cfg.jump;
    let jump_step = detect_jump_in(&ratios, jcfg.threshold, jcfg.sustain);
    let jump_confirmed_step = jump_confirmation(&ratios, jcfg.threshold, jcfg.sustain);
    let reverse_jump_step = reverse_jump(&ratios, &cell.schedule, jcfg.threshold, jcfg.sustain);
    let (final_missing, final_numeric_rank) = final_state(&record, &p, &held_out, cfg.rank_tol);
    let last = record.rows.last().expect("a record holds its initial row");

    let mut offshoots = Vec::new();
    if let Some(o) = &cfg.offshoots {
        for (k, (branch, theta)) in record.snapshots.iter().enumerate() {
            let schedule = Schedule::constant(o.steps, o.eta, o.lambda)?;
            let mut oc = rc.clone();
            oc.schedule = schedule;
            oc.steps = o.steps;
            oc.snapshots = Vec::new();
            oc.record_every = o.record_every.unwrap_or(cfg.record_every);
            oc.sampling_seed = derive_seed(job.seed, 2 + k as u64);
            let orec = run_from(theta.clone(), &oc, *branch)?;
            let orel = format!("{}/seed{}_offshoot{}.csv", cell.label, job.seed, branch);
            write_trajectory_csv(&out.join(&orel), &orec, d)?;
            files.push(orel.clone());
            let (est, rank) = final_state(&orec, &p, &held_out, cfg.rank_tol);
            let phase = match (jump_step, jump_confirmed_step) {
                (Some(j), _) if *branch < j => BranchPhase::PreJump,
                (Some(_), Some(c)) if *branch >= c => BranchPhase::PostJump,
                (Some(_), _) => BranchPhase::Transitional,
                (None, _) => BranchPhase::NoJump,
            };
            offshoots.push(OffshootSummary {
                branch_step: *branch,
                phase,
                csv: orel,
                diverged: orec.diverged.clone(),
                relative_error: est.first().map(|e| (e.value - e.target).abs() / e.target.abs()),
                final_missing: est,
                final_numeric_rank: rank,
            });
        }
    }

    let summary = SeedSummary {
        cell: cell.label.clone(),
        seed: job.seed,
        depth: cell.depth,
        epsilon: cell.epsilon,
        noise_duration: cell.noise_duration,
        csv: rel,
        diverged: record.diverged.clone(),
        jump_detected: jump_step.is_some(),
        jump_step,
        jump_confirmed_step,
        reverse_jump_step,
        final_step: last.step,
        final_ratio: last.ratio_s2_s1,
        final_singular_values: last.singular_values.clone(),
        test_error_ratio: test_error_ratio(&final_missing),
        classification: final_numeric_rank.map(|r| Classification::of(r, cell.problem.r_star())),
        final_missing,
        final_numeric_rank,
        offshoots,
    };
    Ok((summary, files))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Runs every `(cell, seed)` pair, writing per-seed CSVs, offshoot CSVs, `summary.json`
/// and `manifest.json` under `out`. Diverged seeds are recorded and the sweep continues.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cells = cfg.cells()?;
    let jobs: Vec<Job> = cells
        .iter()
        .flat_map(|cell| cfg.seeds.iter().map(move |&seed| Job { cell, seed }))
        .collect();
    let results = jobs
        .par_iter()
        .map(|job| run_job(cfg, job, out))
        .collect::<Result<Vec<_>>>()?;
    let mut files = Vec::new();
    let mut runs = Vec::with_capacity(results.len());
    for (summary, f) in results {
        files.extend(f);
        runs.push(summary);
    }
    let cell_summaries = cells
        .iter()
        .map(|c| {
            let of_cell: Vec<&SeedSummary> = runs.iter().filter(|r| r.cell == c.label).collect();
            CellSummary {
                cell: c.label.clone(),
                seeds: of_cell.len(),
                jumps: of_cell.iter().filter(|r| r.jump_detected).count(),
                diverged: of_cell.iter().filter(|r| r.diverged.is_some()).count(),
            }
        })
        .collect();
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        cells: cell_summaries,
        runs,
    };
    if !cfg.seeds.is_empty() {
        write_json(&out.join("summary.json"), &summary)?;
        files.push("summary.json".into());
    }
    files.sort();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seeds: cfg.seeds.clone(),
        cells: cells.iter().map(|c| c.label.clone()).collect(),
        files,
        config: cfg.clone(),
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub cell: String,
    pub seed: u64,
    pub steps: usize,
    pub jump_step: Option<usize>,
    pub reverse_jump_step: Option<usize>,
    pub diverged: Option<DivergenceInfo>,
}

/// Runs every main trajectory in memory (no offshoots, no files) and reports, per
/// seed, whether the ratio climbed back above twice the threshold after a detected
/// jump within the jump's schedule segment.
pub fn one_way_audit(cfg: &ExperimentConfig) -> Result<Vec<AuditEntry>> {
    cfg.validate()?;
    let cells = cfg.cells()?;
    let jobs: Vec<Job> = cells
        .iter()
        .flat_map(|cell| cfg.seeds.iter().map(move |&seed| Job { cell, seed }))
        .collect();
    jobs.par_iter()
        .map(|job| {
            let (_, record) = main_run(cfg, job.cell, job.seed, false)?;
            let ratios = record.ratios();
            let (th, sus) = (cfg.jump.threshold, cfg.jump.sustain);
            Ok(AuditEntry {
                cell: job.cell.label.clone(),
                seed: job.seed,
                steps: record.rows.last().map_or(0, |r| r.step),
                jump_step: detect_jump_in(&ratios, th, sus),
                reverse_jump_step: reverse_jump(&ratios, &job.cell.schedule, th, sus),
                diverged: record.diverged,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[problem]
kind = "two_by_two"
epsilon = 0.25

[arch]
depth = 3
width = 4

[[schedule]]
end = 50
eta = 0.05
lambda = 0.1
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.record_every, 10);
        assert_eq!(cfg.decay_convention, StepConvention::HalfDecay);
        assert_eq!(cfg.jump, JumpConfig { threshold: 0.05, sustain: 100 });
        assert_eq!(cfg.init.scale, 1.0);
        assert_eq!(cfg.mode, Mode::Sgd);
    }

    #[test]
    fn missing_schedule_is_named() {
        let src = MINIMAL.split("[[schedule]]").next().unwrap();
        let err = ExperimentConfig::from_toml_str(src).unwrap_err().to_string();
        assert!(err.contains("schedule"), "{err}");
    }

    #[test]
    fn unknown_key_names_key_and_line() {
        let src = format!("{MINIMAL}\n[jump]\nthreshold = 0.1\nsustian = 3\n");
        let err = ExperimentConfig::from_toml_str(&src).unwrap_err().to_string();
        assert!(err.contains("sustian"), "{err}");
        assert!(err.contains("line 17"), "{err}");
        let err = ExperimentConfig::from_toml_str(&format!("colour = 1\n{MINIMAL}")).unwrap_err().to_string();
        assert!(err.contains("colour") && err.contains("line 1"), "{err}");
    }

    #[test]
    fn validation_errors_name_key_and_line() {
        let src = format!("{MINIMAL}\n[offshoots]\nbranch_steps = [10, 60]\neta = 0.02\nlambda = 0.001\nsteps = 10\n");
        let err = ExperimentConfig::from_toml_str(&src).unwrap_err().to_string();
        assert!(err.contains("offshoots.branch_steps") && err.contains("line 16"), "{err}");
        let src = MINIMAL.replace("epsilon = 0.25", "epsilon = 0.25\n").replace("[arch]", "[jump]\nthreshold = 1.5\n\n[arch]");
        let err = ExperimentConfig::from_toml_str(&src).unwrap_err().to_string();
        assert!(err.contains("jump.threshold") && err.contains("line"), "{err}");
    }

    #[test]
    fn fig1_preset_values() {
        let cfg = preset("fig1").unwrap();
        let s = Schedule::new(cfg.schedule.clone()).unwrap();
        assert_eq!(s.at(499).unwrap(), (0.03, 0.1));
        assert_eq!(s.at(500).unwrap(), (0.2, 0.1));
        assert_eq!(s.total() - 500, 10_000);
        assert_eq!(cfg.problem, ProblemConfig::TwoByTwo { epsilon: 0.25 });
        assert_eq!((cfg.arch.depth, cfg.arch.width), (Some(3), Some(100)));
        let o = cfg.offshoots.unwrap();
        assert_eq!((o.eta, o.lambda), (0.02, 0.001));
    }

    #[test]
    fn fig2_schedule_boundaries() {
        let cfg = preset("fig2").unwrap();
        let s = Schedule::new(cfg.schedule.clone()).unwrap();
        assert_eq!(s.at(4999).unwrap(), (0.25, 0.1));
        assert_eq!(s.at(5000).unwrap(), (0.05, 0.001));
        let depths: Vec<_> = cfg.cells().unwrap().iter().map(|c| c.depth).collect();
        assert_eq!(depths, vec![Some(3), Some(4)]);
    }

    #[test]
    fn fig3_without_noise_phase() {
        let cfg = preset("fig3").unwrap();
        let cells = cfg.cells().unwrap();
        assert_eq!(cells.len(), 35);
        let no_noise = cells.iter().find(|c| c.noise_duration == Some(0)).unwrap();
        assert_eq!(no_noise.schedule.segments(), &[Segment { end: 4000, eta: 0.02, lambda: 0.001 }]);
        let long = cells.iter().find(|c| c.noise_duration == Some(8000)).unwrap();
        assert_eq!(long.schedule.total(), 12_000);
    }

    #[test]
    fn fig4_alternates() {
        let cfg = preset("fig4").unwrap();
        let s = Schedule::new(cfg.schedule.clone()).unwrap();
        assert_eq!(s.at(0).unwrap(), (0.1, 0.001));
        assert_eq!(s.at(1000).unwrap(), (0.4, 0.1));
        assert_eq!(s.at(2000).unwrap(), (0.1, 0.001));
        assert!(preset("fig5").is_err());
    }

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg, "{name}");
        }
    }

    #[test]
    fn jump_detection() {
        let flat: Vec<(usize, f64)> = (0..300).map(|k| (k * 10, 0.5)).collect();
        assert_eq!(detect_jump_in(&flat, 0.05, 100), None);
        let drop: Vec<(usize, f64)> = (0..300).map(|k| (k * 10, if k >= 120 { 0.0 } else { 0.5 })).collect();
        assert_eq!(detect_jump_in(&drop, 0.05, 100), Some(1200));
        assert_eq!(jump_confirmation(&drop, 0.05, 100), Some(2190));
        let blip: Vec<(usize, f64)> = (0..300)
            .map(|k| (k * 10, if (120..180).contains(&k) { 0.01 } else { 0.5 }))
            .collect();
        assert_eq!(detect_jump_in(&blip, 0.05, 100), None);
    }

    #[test]
    fn reverse_jump_audit() {
        let s = Schedule::new(vec![
            Segment { end: 1000, eta: 0.1, lambda: 0.1 },
            Segment { end: 3000, eta: 0.1, lambda: 0.0 },
        ])
        .unwrap();
        let clean: Vec<(usize, f64)> = (0..300).map(|k| (k * 10, if k >= 10 { 0.0 } else { 0.5 })).collect();
        assert_eq!(reverse_jump(&clean, &s, 0.05, 20), None);
        // Rising again in a later segment is not a reverse jump.
        let later: Vec<(usize, f64)> = (0..300)
            .map(|k| (k * 10, if (10..150).contains(&k) { 0.0 } else { 0.5 }))
            .collect();
        assert_eq!(reverse_jump(&later, &s, 0.05, 20), None);
        let back: Vec<(usize, f64)> = (0..300)
            .map(|k| (k * 10, if (10..60).contains(&k) { 0.0 } else { 0.5 }))
            .collect();
        assert_eq!(reverse_jump(&back, &s, 0.05, 20), Some(600));
    }

    #[test]
    fn float_format_has_17_digits() {
        let s = fmt_float(0.1);
        assert_eq!(s, "1.0000000000000001e-1");
        assert_eq!(s.parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn header_layout() {
        let h = csv_header(2);
        assert_eq!(h[..8], ["step", "eta", "lambda", "train_cost", "reg_loss", "param_norm_sq", "s1", "s2"]);
        assert_eq!(h.last().unwrap(), "sampled_j");
        assert_eq!(h.len(), 15);
    }
}
