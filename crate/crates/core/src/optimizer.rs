//! SGD (with replacement) and GD steppers, piecewise-constant schedules and trajectory recording.

use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::absorbing::{self, AbsorbingSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::linnet::{forward_product, init_gaussian, param_norm_sq, ArchSpec, NetworkParams};
use crate::objective::{chain_gradient, cost_unchecked, full_gradient, residual_matrix, CompletionProblem, LayerGradients};

/// How the per-entry gradient and the weight decay enter an SGD step.
///
/// With `T_ℓ` the per-entry chain product:
/// - `HalfDecay`: `W ← W − η(T + λW)`
/// - `FullGradient`: `W ← (1 − 2ηλ)W − ηT`, the exact per-entry gradient of `ℒ_λ`
/// - `Unhalved`: `W ← W − η(2T + λW)`, the gradient of `(A*_ij − A_ij)²` with decoupled decay `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepConvention {
    #[default]
    HalfDecay,
    FullGradient,
    Unhalved,
}

impl StepConvention {
    /// Multiplicative decay `1 − ηλ` or `1 − 2ηλ`.
    pub fn decay(self, eta: f64, lambda: f64) -> f64 {
        match self {
            StepConvention::HalfDecay | StepConvention::Unhalved => 1.0 - eta * lambda,
            StepConvention::FullGradient => 1.0 - 2.0 * eta * lambda,
        }
    }

    /// Factor in front of `T_ℓ`.
    pub fn grad_factor(self) -> f64 {
        match self {
            StepConvention::HalfDecay | StepConvention::FullGradient => 1.0,
            StepConvention::Unhalved => 2.0,
        }
    }

    /// Coefficient of `W` in the step direction.
    pub fn decay_coefficient(self, lambda: f64) -> f64 {
        match self {
            StepConvention::HalfDecay | StepConvention::Unhalved => lambda,
            StepConvention::FullGradient => 2.0 * lambda,
        }
    }
}

/// One constant piece of a schedule, active on `[previous end, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub end: usize,
    pub eta: f64,
    pub lambda: f64,
}

/// Piecewise-constant `(η, λ)` over steps `0..total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct Schedule {
    segments: Vec<Segment>,
}

impl Schedule {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Usage("a schedule needs at least one segment".into()));
        }
        let mut prev = 0;
        for (k, s) in segments.iter().enumerate() {
            if s.end <= prev {
                return Err(Error::Usage(format!(
                    "segment {k} ends at {} which does not exceed {prev}",
                    s.end
                )));
            }
            if !(s.eta > 0.0 && s.eta.is_finite()) {
                return Err(Error::Usage(format!("segment {k} has non-positive eta {}", s.eta)));
            }
            if !(s.lambda >= 0.0 && s.lambda.is_finite()) {
                return Err(Error::Usage(format!("segment {k} has negative lambda {}", s.lambda)));
            }
            prev = s.end;
        }
        Ok(Self { segments })
    }

    pub fn constant(steps: usize, eta: f64, lambda: f64) -> Result<Self> {
        Self::new(vec![Segment { end: steps, eta, lambda }])
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.segments.last().unwrap().end
    }

    /// Index of the segment containing step `t`.
    pub fn segment_index(&self, t: usize) -> Result<usize> {
        if t >= self.total() {
            return Err(Error::Usage(format!(
                "step {t} outside a schedule of {} steps",
                self.total()
            )));
        }
        Ok(self.segments.partition_point(|s| s.end <= t))
    }

    /// `(η, λ)` at step `t`.
    pub fn at(&self, t: usize) -> Result<(f64, f64)> {
        let s = self.segments[self.segment_index(t)?];
        Ok((s.eta, s.lambda))
    }

    /// Start step of segment `k`.
    pub fn segment_start(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.segments[k - 1].end
        }
    }

    /// Schedule cut at step `t0` (segments clipped, later ones dropped) followed by `tail`.
    pub fn truncated_then(&self, t0: usize, tail: Segment) -> Result<Self> {
        let mut out: Vec<Segment> = Vec::new();
        let mut start = 0;
        for s in &self.segments {
            if start >= t0 {
                break;
            }
            out.push(Segment { end: s.end.min(t0), ..*s });
            start = s.end;
        }
        let offset = out.last().map_or(0, |s| s.end);
        out.push(Segment {
            end: offset + tail.end,
            ..tail
        });
        Self::new(out)
    }
}

impl TryFrom<Vec<Segment>> for Schedule {
    type Error = Error;
    fn try_from(v: Vec<Segment>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Schedule> for Vec<Segment> {
    fn from(s: Schedule) -> Self {
        s.segments
    }
}

/// `(η, λ)` of the segment containing `t`.
pub fn schedule_at(s: &Schedule, t: usize) -> Result<(f64, f64)> {
    s.at(t)
}

/// Independent stream seed for `(base, stream)`: `splitmix64(base ⊕ splitmix64(stream))`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha8 stream for sampling.
pub fn sampling_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Scratch vectors for in-place SGD updates.
#[derive(Debug, Default)]
pub(crate) struct SgdWorkspace {
    v: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
}

impl SgdWorkspace {
    pub(crate) fn new(arch: &ArchSpec) -> Self {
        let w = arch.widths();
        let depth = arch.depth();
        Self {
            v: (0..depth).map(|l| DVector::zeros(w[l])).collect(),
            u: (0..depth).map(|l| DVector::zeros(w[l + 1])).collect(),
        }
    }
}

fn check_step_args(eta: f64, lambda: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Usage(format!("eta must be positive, got {eta}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Usage(format!("lambda must be nonnegative, got {lambda}")));
    }
    Ok(())
}

/// In-place SGD update on entry `idx`; every layer uses the pre-step weights.
/// Returns the residual `A_θ,ij − A*_ij` before the step.
pub(crate) fn sgd_update(
    theta: &mut NetworkParams,
    p: &CompletionProblem,
    eta: f64,
    lambda: f64,
    conv: StepConvention,
    idx: (usize, usize),
    ws: &mut SgdWorkspace,
) -> Result<f64> {
    let (i, j) = idx;
    let depth = theta.depth();
    let w = theta.weights_mut();
    // v_l = W_{l-1}⋯W_1 e_j feeds layer l; u_l = (W_L⋯W_{l+1})ᵀ e_i leaves it.
    ws.v[0].fill(0.0);
    ws.v[0][j] = 1.0;
    for l in 1..depth {
        let (head, tail) = ws.v.split_at_mut(l);
        tail[0].gemv(1.0, &w[l - 1], &head[l - 1], 0.0);
    }
    let pred = w[depth - 1].row(i).dot(&ws.v[depth - 1].transpose());
    let g = pred - p.target()[(i, j)];
    ws.u[depth - 1].fill(0.0);
    ws.u[depth - 1][i] = 1.0;
    for l in (0..depth - 1).rev() {
        let (head, tail) = ws.u.split_at_mut(l + 1);
        head[l].gemv_tr(1.0, &w[l + 1], &tail[0], 0.0);
    }
    let finite = g.is_finite()
        && ws.v.iter().all(|v| v.iter().all(|x| x.is_finite()))
        && ws.u.iter().all(|u| u.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite residual {g} at entry ({i}, {j})"),
        });
    }
    let decay = conv.decay(eta, lambda);
    let scale = -eta * conv.grad_factor() * g;
    for ((wl, u), v) in w.iter_mut().zip(&ws.u).zip(&ws.v) {
        wl.ger(scale, u, v, decay);
    }
    Ok(g)
}

/// SGD step on a uniformly sampled observed entry.
pub fn sgd_step<R: RngExt + ?Sized>(
    theta: &NetworkParams,
    p: &CompletionProblem,
    eta: f64,
    lambda: f64,
    conv: StepConvention,
    rng: &mut R,
) -> Result<(NetworkParams, (usize, usize))> {
    check_step_args(eta, lambda)?;
    let idx = p.observed()[rng.random_range(0..p.n_observed())];
    Ok((sgd_step_at(theta, p, eta, lambda, conv, idx)?, idx))
}

/// SGD step on the given observed entry.
pub fn sgd_step_at(
    theta: &NetworkParams,
    p: &CompletionProblem,
    eta: f64,
    lambda: f64,
    conv: StepConvention,
    idx: (usize, usize),
) -> Result<NetworkParams> {
    check_step_args(eta, lambda)?;
    if !p.is_observed(idx.0, idx.1) {
        return Err(Error::Usage(format!("index {idx:?} is not observed")));
    }
    check_problem_shape(theta.arch(), p)?;
    let mut next = theta.clone();
    let mut ws = SgdWorkspace::new(theta.arch());
    sgd_update(&mut next, p, eta, lambda, conv, idx, &mut ws)?;
    if !next.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            detail: format!("non-finite weights after updating on {idx:?}"),
        });
    }
    Ok(next)
}

/// Full-batch step `W_ℓ ← W_ℓ − η ∇_ℓ ℒ_λ`.
pub fn gd_step(theta: &NetworkParams, p: &CompletionProblem, eta: f64, lambda: f64) -> Result<NetworkParams> {
    check_step_args(eta, lambda)?;
    let g = full_gradient(theta, p, lambda)?;
    finite_or_diverged(theta.axpy(-eta, g.layers()))
}

/// Mean of the SGD directions over all observed entries under `conv`:
/// `k·(1/N)Σ T_ℓ + c·W_ℓ`.
pub fn mean_sgd_direction(
    theta: &NetworkParams,
    p: &CompletionProblem,
    lambda: f64,
    conv: StepConvention,
) -> Result<LayerGradients> {
    let a = forward_product(theta);
    let g = residual_matrix(&a, p)? * (conv.grad_factor() / p.n_observed() as f64);
    let c = conv.decay_coefficient(lambda);
    Ok(LayerGradients::new(
        chain_gradient(theta, &g)
            .into_iter()
            .zip(theta.weights())
            .map(|(t, w)| t + w * c)
            .collect(),
    ))
}

/// Full-batch step along [`mean_sgd_direction`], the expected SGD step under `conv`.
pub fn gd_step_convention(
    theta: &NetworkParams,
    p: &CompletionProblem,
    eta: f64,
    lambda: f64,
    conv: StepConvention,
) -> Result<NetworkParams> {
    check_step_args(eta, lambda)?;
    let d = mean_sgd_direction(theta, p, lambda, conv)?;
    finite_or_diverged(theta.axpy(-eta, d.layers()))
}

fn finite_or_diverged(theta: NetworkParams) -> Result<NetworkParams> {
    if theta.is_finite() {
        Ok(theta)
    } else {
        Err(Error::Divergence {
            step: 0,
            detail: "non-finite weights after a full-batch step".into(),
        })
    }
}

fn check_problem_shape(arch: &ArchSpec, p: &CompletionProblem) -> Result<()> {
    if arch.d_in() != p.d_in() || arch.d_out() != p.d_out() {
        return Err(Error::Shape(format!(
            "network maps {} -> {} but the target is {}x{}",
            arch.d_in(),
            arch.d_out(),
            p.d_out(),
            p.d_in()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Gd,
    #[default]
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub scale: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: CompletionProblem,
    pub arch: ArchSpec,
    pub init: InitSpec,
    pub schedule: Schedule,
    /// Number of steps to execute, at most `schedule.total()`.
    pub steps: usize,
    pub record_every: usize,
    pub mode: Mode,
    pub convention: StepConvention,
    /// Enables per-layer soft ranks in the record.
    pub absorbing: Option<AbsorbingSpec>,
    pub sampling_seed: u64,
    /// Balance and soft-rank diagnostics on every k-th recorded row (0 disables them).
    pub full_diagnostics_every: usize,
    /// Local step counts after which the parameters are kept in the record.
    pub snapshots: Vec<usize>,
}

impl RunConfig {
    /// Defaults: all schedule steps, records every step, SGD, half-decay convention, full diagnostics.
    pub fn new(problem: CompletionProblem, arch: ArchSpec, init: InitSpec, schedule: Schedule, sampling_seed: u64) -> Self {
        Self {
            steps: schedule.total(),
            problem,
            arch,
            init,
            schedule,
            record_every: 1,
            mode: Mode::Sgd,
            convention: StepConvention::HalfDecay,
            absorbing: None,
            sampling_seed,
            full_diagnostics_every: 1,
            snapshots: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.record_every == 0 {
            return Err(Error::Usage("record_every must be at least 1".into()));
        }
        if self.steps > self.schedule.total() {
            return Err(Error::Usage(format!(
                "{} steps requested but the schedule covers {}",
                self.steps,
                self.schedule.total()
            )));
        }
        check_problem_shape(&self.arch, &self.problem)
    }
}

/// Diagnostics of one recorded state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub eta: f64,
    pub lambda: f64,
    pub train_cost: f64,
    pub reg_loss: f64,
    pub param_norm_sq: f64,
    /// Singular values of `A_θ`, descending.
    pub singular_values: Vec<f64>,
    pub ratio_s2_s1: f64,
    pub balance_spectral: Option<Vec<f64>>,
    pub balance_frobenius: Option<Vec<f64>>,
    pub soft_ranks: Option<Vec<f64>>,
    /// Entry sampled by the step that produced this state.
    pub sampled: Option<(usize, usize)>,
}

impl TrajectoryRow {
    pub fn balance_max_spectral(&self) -> Option<f64> {
        self.balance_spectral.as_ref().map(|v| v.iter().copied().fold(0.0, f64::max))
    }

    pub fn balance_max_frobenius(&self) -> Option<f64> {
        self.balance_frobenius.as_ref().map(|v| v.iter().copied().fold(0.0, f64::max))
    }

    pub fn soft_rank_min(&self) -> Option<f64> {
        self.soft_ranks.as_ref().map(|v| v.iter().copied().fold(f64::INFINITY, f64::min))
    }

    pub fn soft_rank_max(&self) -> Option<f64> {
        self.soft_ranks.as_ref().map(|v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub step: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub rows: Vec<TrajectoryRow>,
    pub diverged: Option<DivergenceInfo>,
    /// State after the last executed step (may be non-finite when diverged).
    pub final_params: NetworkParams,
    /// `(step, θ)` for every requested snapshot that was reached.
    pub snapshots: Vec<(usize, NetworkParams)>,
}

impl TrajectoryRecord {
    /// `(step, s₂/s₁)` for every row.
    pub fn ratios(&self) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.step, r.ratio_s2_s1)).collect()
    }
}

/// `s₂/s₁`, or 0 when `s₁ = 0` or there is a single singular value.
pub fn singular_ratio(s: &[f64]) -> f64 {
    match s {
        [s1, s2, ..] if *s1 > 0.0 => s2 / s1,
        _ => 0.0,
    }
}

fn record_row(
    theta: &NetworkParams,
    p: &CompletionProblem,
    step: usize,
    (eta, lambda): (f64, f64),
    sampled: Option<(usize, usize)>,
    full: bool,
    absorbing: Option<&AbsorbingSpec>,
) -> Result<TrajectoryRow> {
    let a = forward_product(theta);
    let train_cost = cost_unchecked(&a, p);
    let norm = param_norm_sq(theta);
    let singular_values = linalg::singular_values(&a)?;
    let (balance_spectral, balance_frobenius) = if full && theta.depth() >= 2 {
        let b = absorbing::balance_error(theta)?;
        (Some(b.spectral), Some(b.frobenius))
    } else {
        (None, None)
    };
    let soft_ranks = match absorbing {
        Some(spec) if full => Some(
            theta
                .weights()
                .iter()
                .map(|w| absorbing::soft_rank(w, spec.alpha))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    Ok(TrajectoryRow {
        step,
        eta,
        lambda,
        train_cost,
        reg_loss: train_cost + lambda * norm,
        param_norm_sq: norm,
        ratio_s2_s1: singular_ratio(&singular_values),
        singular_values,
        balance_spectral,
        balance_frobenius,
        soft_ranks,
        sampled,
    })
}

/// Runs `config` from its Gaussian initialization.
pub fn run(config: &RunConfig) -> Result<TrajectoryRecord> {
    config.validate()?;
    let theta0 = init_gaussian(&config.arch, config.init.scale, config.init.seed)?;
    run_from(theta0, config, 0)
}

/// Runs `config` from `theta0`; recorded step numbers are offset by `start_step`.
pub fn run_from(theta0: NetworkParams, config: &RunConfig, start_step: usize) -> Result<TrajectoryRecord> {
    config.validate()?;
    if theta0.arch() != &config.arch {
        return Err(Error::Shape("initial parameters do not match the architecture".into()));
    }
    let p = &config.problem;
    let schedule = &config.schedule;
    let mut theta = theta0;
    let mut rng = sampling_rng(config.sampling_seed);
    let mut ws = SgdWorkspace::new(&config.arch);
    let absorbing = config.absorbing.as_ref();
    let mut records = 0usize;
    let full_due = |records: &mut usize| {
        let due = config.full_diagnostics_every > 0 && records.is_multiple_of(config.full_diagnostics_every);
        *records += 1;
        due
    };
    let mut rows = Vec::with_capacity(config.steps / config.record_every + 2);
    let first = schedule.at(0)?;
    let due = full_due(&mut records);
    rows.push(record_row(&theta, p, start_step, first, None, due, absorbing)?);
    let mut diverged = None;
    let mut snapshots = Vec::new();
    let mut wanted: Vec<usize> = config.snapshots.clone();
    wanted.sort_unstable();
    wanted.dedup();
    let mut wanted = wanted.into_iter().peekable();
    if wanted.next_if(|&s| s == 0).is_some() {
        snapshots.push((start_step, theta.clone()));
    }
    for t in 0..config.steps {
        let hp = schedule.at(t)?;
        let (eta, lambda) = hp;
        let sampled = match config.mode {
            Mode::Sgd => {
                let idx = p.observed()[rng.random_range(0..p.n_observed())];
                sgd_update(&mut theta, p, eta, lambda, config.convention, idx, &mut ws)
                    .map(|_| Some(idx))
            }
            Mode::Gd => gd_step_convention(&theta, p, eta, lambda, config.convention).map(|next| {
                theta = next;
                None
            }),
        };
        let sampled = match sampled {
            Ok(s) => s,
            Err(Error::Divergence { detail, .. }) => {
                diverged = Some(DivergenceInfo {
                    step: start_step + t + 1,
                    detail,
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let done = t + 1;
        if wanted.next_if(|&s| s == done).is_some() {
            snapshots.push((start_step + done, theta.clone()));
        }
        if done % config.record_every == 0 || done == config.steps {
            if !theta.is_finite() {
                diverged = Some(DivergenceInfo {
                    step: start_step + done,
                    detail: "non-finite weights".into(),
                });
                break;
            }
            let due = full_due(&mut records);
            match record_row(&theta, p, start_step + done, hp, sampled, due, absorbing) {
                Ok(row) if row.reg_loss.is_finite() => rows.push(row),
                Ok(row) => {
                    diverged = Some(DivergenceInfo {
                        step: start_step + done,
                        detail: format!("loss overflow (cost {:e})", row.train_cost),
                    });
                    break;
                }
                Err(Error::Numerical(detail)) => {
                    diverged = Some(DivergenceInfo {
                        step: start_step + done,
                        detail,
                    });
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(TrajectoryRecord {
        rows,
        diverged,
        final_params: theta,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::objective::regularized_loss;
    use proptest::prelude::*;

    fn scalar(a: f64, b: f64) -> NetworkParams {
        NetworkParams::from_layers(vec![Mat::from_element(1, 1, a), Mat::from_element(1, 1, b)]).unwrap()
    }

    fn fig2_schedule() -> Schedule {
        Schedule::new(vec![
            Segment { end: 500, eta: 0.03, lambda: 0.1 },
            Segment { end: 5000, eta: 0.25, lambda: 0.1 },
            Segment { end: 8000, eta: 0.05, lambda: 0.001 },
        ])
        .unwrap()
    }

    #[test]
    fn schedule_lookup() {
        let s = fig2_schedule();
        assert_eq!(s.at(499).unwrap(), (0.03, 0.1));
        assert_eq!(s.at(500).unwrap(), (0.25, 0.1));
        assert_eq!(s.at(4999).unwrap(), (0.25, 0.1));
        assert_eq!(s.at(5000).unwrap(), (0.05, 0.001));
        assert!(s.at(8000).is_err());
        for (k, seg) in s.segments().iter().enumerate() {
            assert_eq!(s.segment_index(seg.end - 1).unwrap(), k);
            if seg.end < s.total() {
                assert_eq!(s.segment_index(seg.end).unwrap(), k + 1);
            }
        }
        let c = Schedule::constant(10, 0.1, 0.2).unwrap();
        assert!((0..10).all(|t| c.at(t).unwrap() == (0.1, 0.2)));
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(vec![]).is_err());
        assert!(Schedule::new(vec![Segment { end: 0, eta: 0.1, lambda: 0.0 }]).is_err());
        assert!(Schedule::constant(5, 0.0, 0.1).is_err());
        assert!(Schedule::constant(5, 0.1, -0.1).is_err());
    }

    #[test]
    fn schedule_truncation() {
        let base = Schedule::new(vec![
            Segment { end: 500, eta: 0.03, lambda: 0.1 },
            Segment { end: 8000, eta: 0.2, lambda: 0.1 },
        ])
        .unwrap();
        let tail = Segment { end: 4000, eta: 0.02, lambda: 0.001 };
        let none = base.truncated_then(0, tail).unwrap();
        assert_eq!(none.segments(), &[tail]);
        let t = base.truncated_then(1000, tail).unwrap();
        assert_eq!(t.total(), 5000);
        assert_eq!(t.at(999).unwrap(), (0.2, 0.1));
        assert_eq!(t.at(1000).unwrap(), (0.02, 0.001));
        let short = base.truncated_then(300, tail).unwrap();
        assert_eq!(short.segments()[0].end, 300);
    }

    #[test]
    fn scalar_sgd_step() {
        let p = CompletionProblem::new(Mat::from_element(1, 1, 1.0), vec![(0, 0)]).unwrap();
        let next = sgd_step_at(&scalar(2.0, 3.0), &p, 0.01, 0.1, StepConvention::HalfDecay, (0, 0)).unwrap();
        assert!((next.layer(0)[(0, 0)] - 1.848).abs() < 1e-14);
        assert!((next.layer(1)[(0, 0)] - 2.897).abs() < 1e-14);
    }

    #[test]
    fn sgd_fixed_points() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 4).unwrap();
        let zero = NetworkParams::zeros(&arch);
        let mut rng = sampling_rng(1);
        for _ in 0..5 {
            let (next, _) = sgd_step(&zero, &p, 0.1, 0.1, StepConvention::HalfDecay, &mut rng).unwrap();
            assert_eq!(next, zero);
        }
        let fit = crate::linnet::balanced_factorization(p.target(), &arch).unwrap();
        let next = sgd_step_at(&fit, &p, 0.1, 0.0, StepConvention::HalfDecay, (1, 0)).unwrap();
        assert!((next.to_flat().iter().zip(fit.to_flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)) < 1e-14);
    }

    #[test]
    fn unobserved_entry_rejected() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 2, 2).unwrap();
        assert!(sgd_step_at(&NetworkParams::zeros(&arch), &p, 0.1, 0.0, StepConvention::HalfDecay, (0, 1)).is_err());
    }

    #[test]
    fn in_place_update_matches_chain_products() {
        let p = CompletionProblem::two_by_two(0.3).unwrap();
        let arch = ArchSpec::new(vec![2, 3, 5, 2]).unwrap();
        let theta = init_gaussian(&arch, 1.0, 9).unwrap();
        for &idx in p.observed() {
            for conv in [StepConvention::HalfDecay, StepConvention::FullGradient, StepConvention::Unhalved] {
                let (eta, lambda) = (0.05, 0.2);
                let next = sgd_step_at(&theta, &p, eta, lambda, conv, idx).unwrap();
                let g = crate::objective::entry_residual(&theta, &p, idx).unwrap();
                for l in 0..3 {
                    let t = crate::objective::layer_gradient(&theta, &g, l).unwrap();
                    let expect = theta.layer(l) * conv.decay(eta, lambda) - t * (eta * conv.grad_factor());
                    assert!((next.layer(l) - expect).norm() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn gd_is_mean_of_sgd() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::new(vec![2, 3, 3, 2]).unwrap();
        let theta = init_gaussian(&arch, 1.0, 4).unwrap();
        let (eta, lambda) = (0.07, 0.1);
        let n = p.n_observed() as f64;
        let mean = |conv| {
            let mut acc = vec![0.0; arch.param_count()];
            for &idx in p.observed() {
                let next = sgd_step_at(&theta, &p, eta, lambda, conv, idx).unwrap();
                for (a, x) in acc.iter_mut().zip(next.to_flat()) {
                    *a += x / n;
                }
            }
            acc
        };
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-13);
        let gd = gd_step(&theta, &p, eta, lambda).unwrap().to_flat();
        assert!(close(&mean(StepConvention::FullGradient), &gd));
        let gd_half = gd_step(&theta, &p, eta, lambda / 2.0).unwrap().to_flat();
        assert!(close(&mean(StepConvention::HalfDecay), &gd_half));
        for conv in [StepConvention::HalfDecay, StepConvention::FullGradient, StepConvention::Unhalved] {
            let g = gd_step_convention(&theta, &p, eta, lambda, conv).unwrap().to_flat();
            assert!(close(&mean(conv), &g));
        }
    }

    #[test]
    fn gd_stationary_point_is_fixed() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 3).unwrap();
        let zero = NetworkParams::zeros(&arch);
        assert_eq!(gd_step(&zero, &p, 0.1, 0.1).unwrap(), zero);
    }

    #[test]
    fn zero_step_run_records_initial_state() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 4).unwrap();
        let mut cfg = RunConfig::new(p, arch, InitSpec { scale: 1.0, seed: 1 }, Schedule::constant(10, 0.1, 0.1).unwrap(), 2);
        cfg.steps = 0;
        let rec = run(&cfg).unwrap();
        assert_eq!(rec.rows.len(), 1);
        assert_eq!(rec.rows[0].step, 0);
        assert!(rec.diverged.is_none());
    }

    #[test]
    fn run_is_deterministic_and_records_final_step() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 6).unwrap();
        let mut cfg = RunConfig::new(p, arch.clone(), InitSpec { scale: 0.5, seed: 3 }, Schedule::constant(95, 0.05, 0.1).unwrap(), 7);
        cfg.record_every = 10;
        cfg.absorbing = Some(AbsorbingSpec::for_arch(1, 0.1, 0.4, 0.01, 10.0, &arch).unwrap());
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a, b);
        let steps: Vec<usize> = a.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps.last(), Some(&95));
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
        for r in &a.rows {
            assert!(r.singular_values.windows(2).all(|w| w[0] >= w[1]));
            assert!((0.0..=1.0).contains(&r.ratio_s2_s1));
            assert_eq!(r.soft_ranks.as_ref().unwrap().len(), 3);
        }
        assert!(a.rows[1].sampled.is_some());
        cfg.snapshots = vec![40, 0, 40, 95];
        let snap = run(&cfg).unwrap();
        let steps: Vec<usize> = snap.snapshots.iter().map(|s| s.0).collect();
        assert_eq!(steps, vec![0, 40, 95]);
        assert_eq!(snap.snapshots[2].1, snap.final_params);
        assert_eq!(snap.rows, a.rows);
        cfg.mode = Mode::Gd;
        let gd = run(&cfg).unwrap();
        assert!(gd.rows.iter().all(|r| r.sampled.is_none()));
    }

    #[test]
    fn divergence_is_flagged() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 4).unwrap();
        let cfg = RunConfig::new(p, arch, InitSpec { scale: 3.0, seed: 1 }, Schedule::constant(2000, 5.0, 0.0).unwrap(), 2);
        let rec = run(&cfg).unwrap();
        assert!(rec.diverged.is_some());
        assert!(rec.rows.iter().all(|r| r.train_cost.is_finite()));
    }

    #[test]
    fn seed_derivation_separates_streams() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 0));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }

    proptest! {
        #[test]
        fn small_gd_steps_descend(seed in 0u64..500, lambda in 0.0..0.2f64) {
            let p = CompletionProblem::two_by_two(0.3).unwrap();
            let arch = ArchSpec::uniform(2, 2, 3, 3).unwrap();
            let theta = init_gaussian(&arch, 1.0, seed).unwrap();
            let before = regularized_loss(&theta, &p, lambda).unwrap();
            let mut eta = 0.1;
            let mut ok = false;
            for _ in 0..30 {
                let after = regularized_loss(&gd_step(&theta, &p, eta, lambda).unwrap(), &p, lambda).unwrap();
                if after <= before { ok = true; break; }
                eta /= 2.0;
            }
            prop_assert!(ok);
        }
    }
}
