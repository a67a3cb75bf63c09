//! Independent brute-force verifiers: finite differences, cyclic Jacobi, and Monte-Carlo
//! checks of closure and forced-column reachability.

use nalgebra::DVector;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::absorbing::{self, membership, AbsorbingSpec, BoundsQuery, Clause, Membership, Violation};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::linnet::{balanced_factorization, ArchSpec, NetworkParams};
use crate::objective::{regularized_loss, CompletionProblem, LayerGradients};
use crate::optimizer::{derive_seed, sgd_update, SgdWorkspace, StepConvention};

/// Central differences of `ℒ_λ` per weight entry.
pub fn fd_gradient(theta: &NetworkParams, p: &CompletionProblem, lambda: f64, h: f64) -> Result<LayerGradients> {
    if !(h > 0.0) {
        return Err(Error::Usage(format!("step h must be positive, got {h}")));
    }
    let mut work = theta.clone();
    let mut layers = Vec::with_capacity(theta.depth());
    for l in 0..theta.depth() {
        let (r, c) = theta.layer(l).shape();
        let mut g = Mat::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                let orig = theta.layer(l)[(i, j)];
                work.weights_mut()[l][(i, j)] = orig + h;
                let up = regularized_loss(&work, p, lambda)?;
                work.weights_mut()[l][(i, j)] = orig - h;
                let down = regularized_loss(&work, p, lambda)?;
                work.weights_mut()[l][(i, j)] = orig;
                g[(i, j)] = (up - down) / (2.0 * h);
            }
        }
        layers.push(g);
    }
    Ok(LayerGradients::new(layers))
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigen-decomposition: eigenvalues descending and an orthonormal frame
/// whose columns are the matching eigenvectors.
pub fn jacobi_eigs(s: &Mat, tol: f64) -> Result<(Vec<f64>, Mat)> {
    let n = s.nrows();
    if s.ncols() != n {
        return Err(Error::Shape(format!("expected a square matrix, got {:?}", s.shape())));
    }
    let asym = (s - s.transpose()).amax();
    if asym > 1e-12 * (1.0 + s.amax()) {
        return Err(Error::Usage(format!("matrix is not symmetric (asymmetry {asym:e})")));
    }
    let mut a = s.clone();
    let mut v = Mat::identity(n, n);
    let off = |a: &Mat| {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += a[(i, j)] * a[(i, j)];
                }
            }
        }
        acc.sqrt()
    };
    let mut sweeps = 0;
    while off(&a) > tol {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi iteration did not reach off-diagonal norm {tol:e} in {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&k| a[(k, k)]).collect();
    let frame = Mat::from_fn(n, n, |i, j| v[(i, order[j])]);
    Ok((values, frame))
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let g = Mat::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Inverse of `f_α` on `[0, α]`.
fn f_alpha_inverse(y: f64, alpha: f64) -> f64 {
    alpha * (1.0 - (1.0 - y.clamp(0.0, 1.0)).sqrt())
}

/// Draws a member of `B_r`: a random matrix of rank at most `min(r, d)` plus a soft tail,
/// balanced-factorized, mixed by random hidden rotations and perturbed within the
/// balance margin, then verified. Returns the member and the number of rejected draws.
pub fn sample_member(spec: &AbsorbingSpec, arch: &ArchSpec, rng: &mut ChaCha8Rng, max_attempts: usize) -> Result<(NetworkParams, usize)> {
    let depth = arch.depth();
    let d = arch.d_in().min(arch.d_out());
    let budget = 0.9 * spec.cap_c;
    for attempt in 0..max_attempts {
        let hard_cap = spec.r.min(d);
        let mut k = rng.random_range(0..=hard_cap);
        while k > 0 && budget / k as f64 <= spec.alpha {
            k -= 1;
        }
        let mut x: Vec<f64> = (0..k)
            .map(|_| spec.alpha * (1.0 + 1e-6) + rng.random::<f64>() * (budget / k as f64 - spec.alpha))
            .collect();
        let tail = d - k;
        if tail > 0 {
            let soft_budget = 0.9 * ((spec.r - k) as f64 + spec.eps2) * rng.random::<f64>();
            let weights: Vec<f64> = (0..tail).map(|_| rng.random::<f64>()).collect();
            let total: f64 = weights.iter().sum::<f64>().max(1e-300);
            for w in weights {
                let y = (soft_budget * w / total).min(0.999);
                x.push(f_alpha_inverse(y, spec.alpha));
            }
        }
        if x.iter().sum::<f64>() > budget {
            continue;
        }
        let sigma: Vec<f64> = x.iter().map(|&v| v.powf(depth as f64 / 2.0)).collect();
        let u = random_orthonormal(arch.d_out(), d, rng);
        let v = random_orthonormal(arch.d_in(), d, rng);
        let a = &u * Mat::from_diagonal(&DVector::from_vec(sigma)) * v.transpose();
        let base = balanced_factorization(&a, arch)?;
        let widths = arch.widths();
        let q: Vec<Mat> = (0..=depth)
            .map(|l| {
                if l == 0 || l == depth {
                    Mat::identity(widths[l], widths[l])
                } else {
                    random_orthonormal(widths[l], widths[l], rng)
                }
            })
            .collect();
        let c = spec.cap_c;
        let delta_max = -c.sqrt() + (c + spec.eps1 / 4.0).sqrt();
        let weights = (0..depth)
            .map(|l| {
                let w = &q[l + 1] * base.layer(l) * q[l].transpose();
                let (r, cc) = w.shape();
                let e = Mat::from_fn(r, cc, |_, _| StandardNormal.sample(rng));
                let scale = delta_max * rng.random::<f64>() / e.norm().max(1e-300);
                w + e * scale
            })
            .collect();
        let theta = NetworkParams::new(arch.clone(), weights)?;
        if membership(&theta, spec)?.member {
            return Ok((theta, attempt));
        }
    }
    Err(Error::Numerical(format!(
        "no member of B_r found in {max_attempts} attempts"
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosureMode {
    /// Step size must satisfy every closure ceiling; violations are failures.
    Compliant,
    /// Any step size; violations are only reported.
    Falsifier,
}

#[derive(Debug, Clone)]
pub struct ClosureSetup {
    pub spec: AbsorbingSpec,
    pub lambda: f64,
    pub eta: f64,
    pub convention: StepConvention,
    pub problem: CompletionProblem,
    pub arch: ArchSpec,
    pub trials: usize,
    pub steps: usize,
    pub seed: u64,
    pub mode: ClosureMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosureViolation {
    pub trial: usize,
    pub step: usize,
    pub violation: Violation,
    pub params: NetworkParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosureReport {
    pub mode: ClosureMode,
    pub trials: usize,
    pub steps: usize,
    pub step_checks: usize,
    pub rejected_samples: usize,
    /// Smallest membership margin seen over all checks.
    pub min_margin: f64,
    pub violations: Vec<ClosureViolation>,
}

impl ClosureReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Starts SGD from sampled members of `B_r` and checks membership after every step.
pub fn closure_monte_carlo(setup: &ClosureSetup) -> Result<ClosureReport> {
    let spec = &setup.spec;
    if setup.mode == ClosureMode::Compliant {
        let mut q = BoundsQuery::new(
            setup.lambda,
            &setup.arch,
            &setup.problem,
            spec.r,
            spec.eps1,
            spec.eps2,
            spec.cap_c,
        );
        q.alpha = Some(spec.alpha);
        q.eta = Some(setup.eta);
        let report = absorbing::bounds(&q)?;
        if !report.feasible {
            return Err(Error::Usage(format!(
                "parameters violate the closure conditions: {}",
                report.infeasible.join("; ")
            )));
        }
        if spec.n != setup.arch.max_dim() {
            return Err(Error::Usage(format!(
                "spec n = {} differs from the largest weight dimension {}",
                spec.n,
                setup.arch.max_dim()
            )));
        }
        if setup.convention != StepConvention::HalfDecay {
            return Err(Error::Usage("the closure ceilings are stated for the half-decay step".into()));
        }
    }
    let p = &setup.problem;
    let results = (0..setup.trials)
        .into_par_iter()
        .map(|trial| -> Result<(usize, f64, usize, Option<ClosureViolation>)> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.seed, 2 * trial as u64));
            let (mut theta, rejected) = sample_member(spec, &setup.arch, &mut rng, 10_000)?;
            let mut sgd_rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.seed, 2 * trial as u64 + 1));
            let mut ws = SgdWorkspace::new(&setup.arch);
            let mut min_margin = f64::INFINITY;
            for step in 1..=setup.steps {
                let idx = p.observed()[sgd_rng.random_range(0..p.n_observed())];
                sgd_update(&mut theta, p, setup.eta, setup.lambda, setup.convention, idx, &mut ws)?;
                let m = membership(&theta, spec)?;
                min_margin = min_margin.min(m.min_margin(spec));
                if let Some(violation) = m.violation {
                    return Ok((
                        step,
                        min_margin,
                        rejected,
                        Some(ClosureViolation {
                            trial,
                            step,
                            violation,
                            params: theta,
                        }),
                    ));
                }
            }
            Ok((setup.steps, min_margin, rejected, None))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = ClosureReport {
        mode: setup.mode,
        trials: setup.trials,
        steps: setup.steps,
        step_checks: 0,
        rejected_samples: 0,
        min_margin: f64::INFINITY,
        violations: Vec::new(),
    };
    for (checks, margin, rejected, violation) in results {
        report.step_checks += checks;
        report.rejected_samples += rejected;
        report.min_margin = report.min_margin.min(margin);
        report.violations.extend(violation);
    }
    Ok(report)
}

/// Which slice of the data the forced steps draw from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcedSlice {
    Columns(Vec<usize>),
    Rows(Vec<usize>),
}

/// The `r` columns (or rows, when `d_out < d_in`) holding the most observed entries,
/// ties broken by lower index.
pub fn forced_slice(p: &CompletionProblem, r: usize) -> ForcedSlice {
    let by_columns = p.d_in() <= p.d_out();
    let len = if by_columns { p.d_in() } else { p.d_out() };
    let mut counts = vec![0usize; len];
    for &(i, j) in p.observed() {
        counts[if by_columns { j } else { i }] += 1;
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order.into_iter().take(r).collect();
    chosen.sort_unstable();
    if by_columns {
        ForcedSlice::Columns(chosen)
    } else {
        ForcedSlice::Rows(chosen)
    }
}

#[derive(Debug, Clone)]
pub struct ReachabilitySetup {
    pub spec: AbsorbingSpec,
    pub lambda: f64,
    pub eta: f64,
    pub convention: StepConvention,
    pub problem: CompletionProblem,
    pub t1: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopeViolation {
    pub step: usize,
    pub layer: usize,
    /// 0-based index of the trailing squared singular value.
    pub index: usize,
    pub value: f64,
    pub envelope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReachabilityReport {
    pub slice: ForcedSlice,
    pub vacuous: bool,
    pub steps: usize,
    pub envelope_checks: usize,
    pub envelope_violations: Vec<EnvelopeViolation>,
    /// Largest `value / envelope` over all checks.
    pub max_envelope_ratio: f64,
    /// Per-layer squared singular values beyond `r` at the end.
    pub trailing_final: Vec<Vec<f64>>,
    /// Soft-rank clause `≤ r + ε₂` on every layer at the end.
    pub final_soft_rank_member: bool,
    pub final_membership: Membership,
}

impl ReachabilityReport {
    pub fn passed(&self) -> bool {
        self.envelope_violations.is_empty() && self.final_soft_rank_member
    }
}

/// Runs `t1` SGD steps drawing only from the forced slice and checks every trailing
/// squared singular value against `(1 − ηλ)^{2t} C + k_ℓ ε₁`, where `k_ℓ` counts the
/// layers between `W_ℓ` and the layer that touches the data slice.
pub fn forced_column_reachability(theta0: &NetworkParams, setup: &ReachabilitySetup) -> Result<ReachabilityReport> {
    let spec = &setup.spec;
    let p = &setup.problem;
    let depth = theta0.depth();
    let arch = theta0.arch();
    if arch.d_in() != p.d_in() || arch.d_out() != p.d_out() {
        return Err(Error::Shape("network does not match the problem".into()));
    }
    let start = membership(theta0, spec)?;
    if let Some(v) = start.violation.as_ref().filter(|v| v.clause != Clause::SoftRank) {
        return Err(Error::Usage(format!(
            "start is outside B_(C, eps1): {:?} on layer {} ({} > {})",
            v.clause, v.layer, v.value, v.limit
        )));
    }
    let n_min = p.d_in().min(p.d_out());
    let slice = forced_slice(p, spec.r);
    let soft_ok = |m: &Membership| m.soft_ranks.iter().all(|&s| s <= spec.r as f64 + spec.eps2);
    let trailing = |theta: &NetworkParams| -> Result<Vec<Vec<f64>>> {
        theta
            .weights()
            .iter()
            .map(|w| Ok(linalg::squared_singular_values(w)?.into_iter().skip(spec.r).collect()))
            .collect()
    };
    if spec.r >= n_min {
        return Ok(ReachabilityReport {
            slice,
            vacuous: true,
            steps: 0,
            envelope_checks: 0,
            envelope_violations: Vec::new(),
            max_envelope_ratio: 0.0,
            trailing_final: trailing(theta0)?,
            final_soft_rank_member: soft_ok(&start),
            final_membership: start,
        });
    }
    let pool: Vec<(usize, usize)> = p
        .observed()
        .iter()
        .copied()
        .filter(|&(i, j)| match &slice {
            ForcedSlice::Columns(c) => c.contains(&j),
            ForcedSlice::Rows(r) => r.contains(&i),
        })
        .collect();
    if pool.is_empty() {
        return Err(Error::Usage("the forced slice holds no observed entries".into()));
    }
    let c0 = theta0.weights().iter().map(linalg::frobenius_sq).fold(0.0, f64::max);
    let cap = spec.cap_c.max(c0);
    let offset = |l: usize| match slice {
        ForcedSlice::Columns(_) => l,
        ForcedSlice::Rows(_) => depth - 1 - l,
    };
    let contraction = (1.0 - setup.eta * setup.lambda).powi(2);
    let mut theta = theta0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    let mut ws = SgdWorkspace::new(arch);
    let mut decay = 1.0;
    let mut checks = 0;
    let mut max_ratio = 0.0_f64;
    let mut violations = Vec::new();
    for step in 1..=setup.t1 {
        let idx = pool[rng.random_range(0..pool.len())];
        sgd_update(&mut theta, p, setup.eta, setup.lambda, setup.convention, idx, &mut ws)?;
        decay *= contraction;
        for (l, tail) in trailing(&theta)?.into_iter().enumerate() {
            let envelope = decay * cap + offset(l) as f64 * spec.eps1;
            let slack = 1e-12 * (cap + spec.eps1);
            for (k, value) in tail.into_iter().enumerate() {
                checks += 1;
                max_ratio = max_ratio.max(value / envelope);
                if value > envelope + slack {
                    violations.push(EnvelopeViolation {
                        step,
                        layer: l,
                        index: spec.r + k,
                        value,
                        envelope,
                    });
                }
            }
        }
    }
    let final_membership = membership(&theta, spec)?;
    Ok(ReachabilityReport {
        slice,
        vacuous: false,
        steps: setup.t1,
        envelope_checks: checks,
        envelope_violations: violations,
        max_envelope_ratio: max_ratio,
        trailing_final: trailing(&theta)?,
        final_soft_rank_member: soft_ok(&final_membership),
        final_membership,
    })
}

/// Soft-rank threshold `√(αε₂/(2(n−r)))` the trailing singular values must fall under.
pub fn trailing_threshold(spec: &AbsorbingSpec, n_min: usize) -> f64 {
    (spec.alpha * spec.eps2 / (2.0 * (n_min - spec.r.min(n_min - 1)) as f64)).sqrt()
}
