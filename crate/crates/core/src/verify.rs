//! Oracle suites shared by the `verify` subcommand and the acceptance target.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::absorbing::{self, output_soft_rank, output_soft_rank_ceiling, AbsorbingSpec, BoundsQuery};
use crate::error::Result;
use crate::landscape::{converge, hessian_min_eig};
use crate::linalg::{self, Mat};
use crate::linnet::{balanced_factorization, forward_product, init_gaussian, param_norm_sq, representation_cost, ArchSpec, NetworkParams};
use crate::objective::{entry_residual, full_gradient, residual_bound, CompletionProblem};
use crate::optimizer::{derive_seed, StepConvention};
use crate::oracle::{
    closure_monte_carlo, fd_gradient, forced_column_reachability, jacobi_eigs, sample_member, ClosureMode, ClosureSetup,
    ReachabilitySetup,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteOutcome {
    pub name: String,
    pub passed: bool,
    pub checks: usize,
    pub failures: usize,
    /// Suite-specific worst statistic (largest error, smallest margin, ...).
    pub worst: f64,
    pub detail: String,
}

impl SuiteOutcome {
    fn new(name: &str, checks: usize, failures: usize, worst: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: failures == 0 && checks > 0,
            checks,
            failures,
            worst,
            detail,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * normal(rng))
}

/// Random target with a random non-empty observed subset.
fn random_problem(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64, min_observed: usize) -> Result<CompletionProblem> {
    let target = random_matrix(rng, rows, cols, scale);
    let all: Vec<(usize, usize)> = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).collect();
    let keep = rng.random_range(min_observed.clamp(1, all.len())..=all.len());
    let mut observed = all;
    for k in 0..keep {
        let pick = rng.random_range(k..observed.len());
        observed.swap(k, pick);
    }
    observed.truncate(keep);
    CompletionProblem::new(target, observed)
}

fn random_arch(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, depth: usize, max_width: usize) -> Result<ArchSpec> {
    let lo = d_in.min(d_out);
    let mut widths = vec![d_in];
    widths.extend((1..depth).map(|_| rng.random_range(lo..=max_width.max(lo))));
    widths.push(d_out);
    ArchSpec::new(widths)
}

/// Analytic gradient against central differences on random instances with `L ≤ 4`
/// and all dimensions `≤ 4`.
pub fn gradient_suite(configs: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst) = (0, 0.0_f64);
    for k in 0..configs {
        let (rows, cols) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let depth = rng.random_range(1..=4);
        let p = random_problem(&mut rng, rows, cols, 1.0, 1)?;
        let arch = random_arch(&mut rng, cols, rows, depth, 4)?;
        let lambda = if k % 4 == 0 { 0.0 } else { rng.random_range(0.0..1.0) };
        let theta = init_gaussian(&arch, 1.0, rng.random())?;
        let err = full_gradient(&theta, &p, lambda)?.relative_error(&fd_gradient(&theta, &p, lambda, 1e-5)?, 1e-8);
        worst = worst.max(err);
        if !(err <= 1e-6) {
            failures += 1;
        }
    }
    Ok(SuiteOutcome::new(
        "gradient",
        configs,
        failures,
        worst,
        format!("max relative error {worst:.3e} (limit 1e-6)"),
    ))
}

/// Balanced factorizations attain `R(A; L)` exactly; a penalized norm-minimization
/// search never finds parameters with `‖θ‖² < R(A_θ; L) − 1e-3`.
pub fn representation_suite(matrices: usize, searches: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst_attain) = (0, 0.0_f64);
    for _ in 0..matrices {
        let (rows, cols) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let depth = rng.random_range(1..=5);
        let a = random_matrix(&mut rng, rows, cols, 2.0);
        let arch = random_arch(&mut rng, cols, rows, depth, 6)?;
        let theta = balanced_factorization(&a, &arch)?;
        let r = representation_cost(&a, depth)?;
        let rel = (param_norm_sq(&theta) - r).abs() / r.max(f64::MIN_POSITIVE);
        let fit = (forward_product(&theta) - &a).norm() / a.norm().max(f64::MIN_POSITIVE);
        worst_attain = worst_attain.max(rel).max(fit);
        if !(rel <= 1e-10 && fit <= 1e-10) {
            failures += 1;
        }
    }
    let lambda = 1e-3;
    let arch = ArchSpec::uniform(2, 2, 3, 2)?;
    let all = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
    let mut worst_gap = f64::INFINITY;
    for _ in 0..searches {
        let p = CompletionProblem::new(random_matrix(&mut rng, 2, 2, 1.0), all.clone())?;
        let found = converge(&init_gaussian(&arch, 1.0, rng.random())?, &p, lambda, 0.05, 1e-10, 2_000_000)?;
        let gap = param_norm_sq(&found.params) - representation_cost(&forward_product(&found.params), 3)?;
        worst_gap = worst_gap.min(gap);
        if !(gap >= -1e-3) {
            failures += 1;
        }
    }
    Ok(SuiteOutcome::new(
        "representation",
        matrices + searches,
        failures,
        worst_attain,
        format!("attainment error {worst_attain:.3e} (limit 1e-10); smallest search gap ‖θ‖² − R = {worst_gap:.3e} (floor −1e-3)"),
    ))
}

/// GD convergences at `λ = 0.1` on random 3×3 problems end balanced.
pub fn balance_suite(runs: usize, seed: u64) -> Result<SuiteOutcome> {
    let outcomes: Vec<Result<f64>> = (0..runs)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
            let p = random_problem(&mut rng, 3, 3, 3.0, 5)?;
            let depth = 2 + k % 3;
            let arch = random_arch(&mut rng, 3, 3, depth, 4)?;
            let theta0 = init_gaussian(&arch, 1.0, rng.random())?;
            let found = converge(&theta0, &p, 0.1, 0.05, 1e-10, 2_000_000)?;
            Ok(absorbing::balance_error(&found.params)?.max_spectral)
        })
        .collect();
    let (mut failures, mut worst, mut errors) = (0, 0.0_f64, Vec::new());
    for o in outcomes {
        match o {
            Ok(b) => {
                worst = worst.max(b);
                if !(b <= 1e-6) {
                    failures += 1;
                }
            }
            Err(e) => {
                failures += 1;
                errors.push(e.to_string());
            }
        }
    }
    let mut detail = format!("max spectral balance error {worst:.3e} (limit 1e-6)");
    if !errors.is_empty() {
        detail.push_str(&format!("; {} runs failed: {}", errors.len(), errors.join(" | ")));
    }
    Ok(SuiteOutcome::new("balance", runs, failures, worst, detail))
}

/// Per-sample residual `‖G‖_F² ≤ 2(C₁ + C^L)` on random parameters with every
/// `‖W_ℓ‖_F² ≤ C`.
pub fn residual_bound_suite(draws: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst) = (0, 0.0_f64);
    for _ in 0..draws {
        let (rows, cols) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let depth = rng.random_range(1..=4);
        let p = random_problem(&mut rng, rows, cols, 2.0, 1)?;
        let arch = random_arch(&mut rng, cols, rows, depth, 5)?;
        let cap: f64 = rng.random_range(0.1..3.0);
        let layers = (0..depth)
            .map(|l| {
                let (r, c) = arch.layer_shape(l);
                let w = random_matrix(&mut rng, r, c, 1.0);
                let target: f64 = cap * rng.random_range(0.0..=1.0);
                &w * (target.sqrt() / w.norm().max(f64::MIN_POSITIVE))
            })
            .collect();
        let theta = NetworkParams::new(arch, layers)?;
        let idx = p.observed()[rng.random_range(0..p.n_observed())];
        let ratio = linalg::frobenius_sq(&entry_residual(&theta, &p, idx)?) / residual_bound(&p, cap, depth);
        worst = worst.max(ratio);
        if !(ratio <= 1.0) {
            failures += 1;
        }
    }
    Ok(SuiteOutcome::new(
        "residual_bound",
        draws,
        failures,
        worst,
        format!("largest ‖G‖²/bound {worst:.3e}"),
    ))
}

/// Closure setup on the ε = 0.25 problem with `ε₁` and `η` at half their ceilings.
pub fn compliant_closure_setup(trials: usize, steps: usize, seed: u64) -> Result<ClosureSetup> {
    let problem = CompletionProblem::two_by_two(0.25)?;
    let arch = ArchSpec::uniform(2, 2, 3, 2)?;
    let (lambda, eps2, cap_c) = (1.0, 0.4, 1.0);
    let ceilings = absorbing::bounds(&BoundsQuery::new(lambda, &arch, &problem, 1, 1e-12, eps2, cap_c))?;
    let alpha = 0.5 * ceilings.alpha_max;
    let mut q = BoundsQuery::new(lambda, &arch, &problem, 1, 1.0, eps2, cap_c);
    q.alpha = Some(alpha);
    let eps1 = 0.5 * absorbing::bounds(&q)?.eps1_max;
    q.eps1 = eps1;
    let eta = 0.5 * absorbing::bounds(&q)?.eta_max;
    Ok(ClosureSetup {
        spec: AbsorbingSpec::for_arch(1, eps1, eps2, alpha, cap_c, &arch)?,
        lambda,
        eta,
        convention: StepConvention::HalfDecay,
        problem,
        arch,
        trials,
        steps,
        seed,
        mode: ClosureMode::Compliant,
    })
}

/// Zero membership violations from sampled members under a compliant step size.
pub fn closure_suite(trials: usize, steps: usize, seed: u64) -> Result<SuiteOutcome> {
    let setup = compliant_closure_setup(trials, steps, seed)?;
    let report = closure_monte_carlo(&setup)?;
    Ok(SuiteOutcome::new(
        "closure",
        report.step_checks,
        report.violations.len(),
        report.min_margin,
        format!(
            "{} step-checks at eta {:.3e}, alpha {:.3e}, eps1 {:.3e}; smallest margin {:.3e}",
            report.step_checks, setup.eta, setup.spec.alpha, setup.spec.eps1, report.min_margin
        ),
    ))
}

/// Reachability parameters on the ε = 0.25 problem and the horizon `T₁`.
pub fn reachability_setup(seed: u64) -> Result<(ReachabilitySetup, AbsorbingSpec)> {
    let problem = CompletionProblem::two_by_two(0.25)?;
    let arch = ArchSpec::uniform(2, 2, 3, 2)?;
    let (lambda, eta, cap_c, alpha, eps2, eps1) = (1.0, 1e-3, 1.0, 0.25, 0.4, 0.0125);
    let spec = AbsorbingSpec::for_arch(1, eps1, eps2, alpha, cap_c, &arch)?;
    let mut q = BoundsQuery::new(lambda, &arch, &problem, 1, eps1, eps2, cap_c);
    q.alpha = Some(alpha);
    q.eta = Some(eta);
    let t1 = absorbing::bounds(&q)?.t1_min.ceil() as usize;
    // Starting points only need the norm and balance clauses, so sample at full rank.
    let start_spec = AbsorbingSpec::for_arch(2, eps1, eps2, alpha, cap_c, &arch)?;
    Ok((
        ReachabilitySetup {
            spec,
            lambda,
            eta,
            convention: StepConvention::HalfDecay,
            problem,
            t1,
            seed,
        },
        start_spec,
    ))
}

/// Trailing singular values stay under the decay envelope and the end state has soft
/// rank at most `r + ε₂` per layer.
pub fn reachability_suite(trials: usize, seed: u64) -> Result<SuiteOutcome> {
    let reports: Vec<Result<_>> = (0..trials)
        .into_par_iter()
        .map(|k| {
            let (mut setup, start_spec) = reachability_setup(derive_seed(seed, 2 * k as u64 + 1))?;
            let arch = ArchSpec::uniform(2, 2, 3, 2)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2 * k as u64));
            let (theta0, _) = sample_member(&start_spec, &arch, &mut rng, 10_000)?;
            setup.seed = derive_seed(seed, 2 * k as u64 + 1);
            forced_column_reachability(&theta0, &setup)
        })
        .collect();
    let (mut checks, mut failures, mut worst) = (0, 0, 0.0_f64);
    let mut steps = 0;
    for r in reports {
        let r = r?;
        steps = r.steps;
        checks += r.envelope_checks;
        worst = worst.max(r.max_envelope_ratio);
        if !r.passed() {
            failures += 1;
        }
    }
    Ok(SuiteOutcome::new(
        "reachability",
        checks,
        failures,
        worst,
        format!("{trials} trials of {steps} steps; {checks} envelope checks; largest value/envelope {worst:.3e}"),
    ))
}

/// Smallest Hessian eigenvalue at the origin: `2λ` for `L ≥ 3` and
/// `2λ − s₁(M⊙A*)/N` for `L = 2`.
pub fn hessian_origin_suite(seed: u64) -> Result<SuiteOutcome> {
    let (mut checks, mut failures, mut worst) = (0, 0, 0.0_f64);
    let mut lines = Vec::new();
    for (k, &(eps, lambda)) in [(0.25, 0.1), (0.5, 0.05), (0.1, 0.2)].iter().enumerate() {
        let p = CompletionProblem::two_by_two(eps)?;
        let m = p.target().component_mul(p.mask());
        for depth in 2..=4 {
            let expected = if depth == 2 {
                2.0 * lambda - linalg::singular_values(&m)?[0] / p.n_observed() as f64
            } else {
                2.0 * lambda
            };
            let arch = ArchSpec::uniform(2, 2, depth, 3)?;
            let est = hessian_min_eig(&NetworkParams::zeros(&arch), &p, lambda, 2, 5000, derive_seed(seed, k as u64))?;
            let err = (est.value - expected).abs();
            checks += 1;
            worst = worst.max(err);
            if !(err <= 1e-4) {
                failures += 1;
                lines.push(format!("eps {eps} lambda {lambda} L {depth}: {:.6} vs {expected:.6}", est.value));
            }
        }
    }
    let mut detail = format!("max |estimate − closed form| {worst:.3e} (limit 1e-4)");
    if !lines.is_empty() {
        detail.push_str(&format!("; {}", lines.join("; ")));
    }
    Ok(SuiteOutcome::new("hessian_origin", checks, failures, worst, detail))
}

/// Output soft rank of sampled members stays below `r + ε₂ + (nL²/α)C^{L−1}ε₁`.
pub fn soft_rank_ceiling_suite(samples: usize, seed: u64) -> Result<SuiteOutcome> {
    let arch = ArchSpec::uniform(3, 3, 3, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst, mut rejected) = (0, f64::INFINITY, 0);
    for _ in 0..samples {
        let eps1 = 10f64.powf(rng.random_range(-5.0..=-3.0));
        let spec = AbsorbingSpec::for_arch(1, eps1, 0.4, 0.1, 2.0, &arch)?;
        let (theta, rej) = sample_member(&spec, &arch, &mut rng, 10_000)?;
        rejected += rej;
        let margin = output_soft_rank_ceiling(&spec, arch.depth()) - output_soft_rank(&theta, spec.alpha)?;
        worst = worst.min(margin);
        if !(margin >= 0.0) {
            failures += 1;
        }
    }
    Ok(SuiteOutcome::new(
        "soft_rank_ceiling",
        samples,
        failures,
        worst,
        format!("smallest ceiling margin {worst:.3e}; {rejected} rejected draws"),
    ))
}

/// Jacobi eigenvalues against the main spectral path on random symmetric matrices up
/// to 16×16.
pub fn jacobi_suite(matrices: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut failures, mut worst) = (0, 0.0_f64);
    for _ in 0..matrices {
        let n = rng.random_range(1..=16);
        let b = random_matrix(&mut rng, n, n, 1.0);
        let s = linalg::symmetrize(&(&b + b.transpose()));
        let (jac, _) = jacobi_eigs(&s, 1e-13)?;
        let main = linalg::sym_eigenvalues(&s)?;
        let scale = main.iter().fold(1.0_f64, |m, x| m.max(x.abs()));
        let err = jac.iter().zip(&main).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
        worst = worst.max(err);
        if !(err <= 1e-10) {
            failures += 1;
        }
    }
    Ok(SuiteOutcome::new(
        "jacobi",
        matrices,
        failures,
        worst,
        format!("max eigenvalue disagreement {worst:.3e} relative to the spectral radius (limit 1e-10)"),
    ))
}

/// All oracle suites scaled by `trials`.
pub fn run_all(trials: usize, seed: u64) -> Result<Vec<SuiteOutcome>> {
    let t = trials.max(1);
    Ok(vec![
        gradient_suite(t, derive_seed(seed, 0))?,
        representation_suite(t, t.div_ceil(5), derive_seed(seed, 1))?,
        balance_suite(t, derive_seed(seed, 2))?,
        residual_bound_suite(10 * t, derive_seed(seed, 3))?,
        closure_suite(t, 500, derive_seed(seed, 4))?,
        reachability_suite(t.div_ceil(5), derive_seed(seed, 5))?,
        hessian_origin_suite(derive_seed(seed, 6))?,
        soft_rank_ceiling_suite(10 * t, derive_seed(seed, 7))?,
        jacobi_suite(10 * t, derive_seed(seed, 8))?,
    ])
}
