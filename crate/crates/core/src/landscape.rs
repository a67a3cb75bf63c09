//! Critical-point diagnostics: descent to stationarity, rank classification,
//! Hessian probing and λ-continuation.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::absorbing::{balance_error, BalanceReport};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::linnet::{forward_product, param_norm_sq, NetworkParams};
use crate::objective::{cost, full_gradient, regularized_loss, CompletionProblem};

/// Relative slack on loss comparisons so round-off does not count as an increase.
const LOSS_SLACK: f64 = 1e-13;
/// Consecutive accepted steps before the step size is allowed to grow back.
const GROW_AFTER: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Converged {
    pub params: NetworkParams,
    pub grad_norm: f64,
    pub steps: usize,
    pub final_eta: f64,
}

/// Full-batch descent on `ℒ_λ` from `theta0` until `‖∇ℒ_λ‖ ≤ grad_tol`.
///
/// Steps that raise the loss beyond round-off are rejected and halve `η`; after a run
/// of accepted steps `η` doubles again, never exceeding its initial value.
pub fn converge(
    theta0: &NetworkParams,
    p: &CompletionProblem,
    lambda: f64,
    eta: f64,
    grad_tol: f64,
    max_steps: usize,
) -> Result<Converged> {
    if !(grad_tol > 0.0) {
        return Err(Error::Usage(format!("grad_tol must be positive, got {grad_tol}")));
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Usage(format!("eta must be positive, got {eta}")));
    }
    let mut theta = theta0.clone();
    let mut loss = regularized_loss(&theta, p, lambda)?;
    let mut grad = full_gradient(&theta, p, lambda)?;
    let mut step_size = eta;
    let mut streak = 0;
    for step in 0..max_steps {
        let gn = grad.norm();
        if gn <= grad_tol {
            return Ok(Converged {
                params: theta,
                grad_norm: gn,
                steps: step,
                final_eta: step_size,
            });
        }
        let cand = theta.axpy(-step_size, grad.layers());
        let cand_loss = if cand.is_finite() {
            regularized_loss(&cand, p, lambda)?
        } else {
            f64::INFINITY
        };
        if cand_loss <= loss + LOSS_SLACK * loss.abs() {
            theta = cand;
            loss = cand_loss;
            grad = full_gradient(&theta, p, lambda)?;
            streak += 1;
            if streak >= GROW_AFTER && step_size < eta {
                step_size = (step_size * 2.0).min(eta);
                streak = 0;
            }
        } else {
            step_size /= 2.0;
            streak = 0;
            if step_size < eta * 1e-30 {
                break;
            }
        }
    }
    let gn = grad.norm();
    if gn <= grad_tol {
        return Ok(Converged {
            params: theta,
            grad_norm: gn,
            steps: max_steps,
            final_eta: step_size,
        });
    }
    Err(Error::NonConvergence {
        steps: max_steps,
        grad_norm: gn,
        params: Box::new(theta),
    })
}

/// Singular values at or below this count as zero whatever the relative tolerance,
/// so a product collapsed onto the origin has rank 0.
pub const RANK_FLOOR: f64 = 1e-8;

/// Number of singular values above `max(tol·s₁, RANK_FLOOR)`.
pub fn numeric_rank(a: &Mat, tol: f64) -> Result<usize> {
    if !(tol > 0.0) {
        return Err(Error::Usage(format!("rank tolerance must be positive, got {tol}")));
    }
    let s = linalg::singular_values(a)?;
    let s1 = s.first().copied().unwrap_or(0.0);
    let cut = (tol * s1).max(RANK_FLOOR);
    Ok(s.iter().filter(|&&x| x > cut).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    RankUnderestimating,
    Exact,
    RankOverestimating,
}

impl Classification {
    pub fn of(rank: usize, r_star: usize) -> Self {
        match rank.cmp(&r_star) {
            std::cmp::Ordering::Less => Classification::RankUnderestimating,
            std::cmp::Ordering::Equal => Classification::Exact,
            std::cmp::Ordering::Greater => Classification::RankOverestimating,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianEstimate {
    /// Rayleigh quotient of the best probe.
    pub value: f64,
    /// `‖Hv − value·v‖` at that probe.
    pub residual: f64,
    pub iterations: usize,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinimumReport {
    pub params: NetworkParams,
    pub lambda: f64,
    pub grad_norm: f64,
    pub balance: Option<BalanceReport>,
    pub singular_values: Vec<f64>,
    pub numeric_rank: usize,
    pub r_star: usize,
    pub classification: Classification,
    pub cost: f64,
    pub reg_loss: f64,
    pub hessian: Option<HessianEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifyOptions {
    /// Relative singular-value threshold for the numeric rank.
    pub rank_tol: f64,
    /// Largest gradient norm accepted as stationary.
    pub stationarity_tol: f64,
    /// Hessian probing `(probes, iters, seed)`; `None` skips it.
    pub hessian: Option<(usize, usize, u64)>,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            rank_tol: 1e-6,
            stationarity_tol: 1e-6,
            hessian: Some((3, 5000, 0)),
        }
    }
}

/// Classifies an approximately stationary `θ̂` by the numeric rank of `A_θ̂` against `r*`.
pub fn classify_minimum(
    theta: &NetworkParams,
    p: &CompletionProblem,
    lambda: f64,
    r_star: usize,
    opts: &ClassifyOptions,
) -> Result<MinimumReport> {
    let grad_norm = full_gradient(theta, p, lambda)?.norm();
    if !(grad_norm <= opts.stationarity_tol) {
        return Err(Error::Usage(format!(
            "point is not stationary: gradient norm {grad_norm:e} exceeds {:e}",
            opts.stationarity_tol
        )));
    }
    let a = forward_product(theta);
    let numeric_rank = numeric_rank(&a, opts.rank_tol)?;
    let balance = if theta.depth() >= 2 {
        Some(balance_error(theta)?)
    } else {
        None
    };
    let hessian = match opts.hessian {
        Some((probes, iters, seed)) => Some(hessian_min_eig(theta, p, lambda, probes, iters, seed)?),
        None => None,
    };
    let c = cost(&a, p)?;
    Ok(MinimumReport {
        params: theta.clone(),
        lambda,
        grad_norm,
        balance,
        singular_values: linalg::singular_values(&a)?,
        numeric_rank,
        r_star,
        classification: Classification::of(numeric_rank, r_star),
        cost: c,
        reg_loss: c + lambda * param_norm_sq(theta),
        hessian,
    })
}

struct Hvp<'a> {
    theta: &'a NetworkParams,
    p: &'a CompletionProblem,
    lambda: f64,
    h: f64,
    base: DVector<f64>,
}

impl Hvp<'_> {
    fn gradient_at(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let t = NetworkParams::from_flat(self.theta.arch(), x.as_slice())?;
        let g = full_gradient(&t, self.p, self.lambda)?;
        Ok(DVector::from_iterator(
            x.len(),
            g.layers().iter().flat_map(|m| m.iter().copied()),
        ))
    }

    /// Central difference of the gradient along the unit vector `v`.
    fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let up = self.gradient_at(&(&self.base + v * self.h))?;
        let down = self.gradient_at(&(&self.base - v * self.h))?;
        Ok((up - down) / (2.0 * self.h))
    }
}

/// Smallest Hessian eigenvalue of `ℒ_λ` at `θ` by shifted power iteration on
/// finite-difference Hessian-vector products.
pub fn hessian_min_eig(
    theta: &NetworkParams,
    p: &CompletionProblem,
    lambda: f64,
    probes: usize,
    iters: usize,
    seed: u64,
) -> Result<HessianEstimate> {
    let probes = probes.max(1);
    let base = DVector::from_vec(theta.to_flat());
    let hvp = Hvp {
        theta,
        p,
        lambda,
        h: 1e-5 * (1.0 + base.norm()),
        base,
    };
    let dim = hvp.base.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random_unit = || {
        let v = DVector::from_iterator(dim, (0..dim).map(|_| StandardNormal.sample(&mut rng)));
        let n: f64 = v.norm();
        v / n
    };

    // Spectral radius by plain power iteration fixes the shift.
    let mut v = random_unit();
    let mut radius = 0.0_f64;
    for _ in 0..100 {
        let hv = hvp.apply(&v)?;
        let n = hv.norm();
        if n == 0.0 {
            break;
        }
        radius = radius.max(n);
        v = hv / n;
    }
    let shift = 1.5 * radius + 1e-8;
    let tol = 1e-9 * (1.0 + radius);

    let mut best: Option<HessianEstimate> = None;
    for _ in 0..probes {
        let mut v = random_unit();
        let mut estimate = HessianEstimate {
            value: f64::NAN,
            residual: f64::INFINITY,
            iterations: 0,
            low_confidence: true,
        };
        for it in 1..=iters.max(1) {
            let hv = hvp.apply(&v)?;
            let mu = v.dot(&hv);
            let residual = (&hv - &v * mu).norm();
            estimate = HessianEstimate {
                value: mu,
                residual,
                iterations: it,
                low_confidence: residual > tol,
            };
            if residual <= tol {
                break;
            }
            let next = &v * shift - hv;
            let n = next.norm();
            if n == 0.0 {
                break;
            }
            v = next / n;
        }
        let better = match &best {
            None => true,
            Some(b) => estimate.value < b.value,
        };
        if better {
            best = Some(estimate);
        }
    }
    Ok(best.unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuationOptions {
    pub eta: f64,
    pub grad_tol: f64,
    pub max_steps: usize,
    pub rank_tol: f64,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            eta: 0.1,
            grad_tol: 1e-10,
            max_steps: 2_000_000,
            rank_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuationPoint {
    pub lambda: f64,
    pub params: NetworkParams,
    pub cost: f64,
    pub param_norm_sq: f64,
    pub rank: usize,
    pub grad_norm: f64,
    pub steps: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuationPath {
    pub r_star: usize,
    pub points: Vec<ContinuationPoint>,
    /// λ at which the numeric rank first changed; the path stops there.
    pub structure_lost_at: Option<f64>,
}

impl ContinuationPath {
    pub fn truncated(&self) -> bool {
        self.structure_lost_at.is_some()
    }
}

/// Warm-started descent along a strictly decreasing λ grid, starting from `start`.
pub fn lambda_continuation(
    p: &CompletionProblem,
    r_star: usize,
    lambdas: &[f64],
    start: &NetworkParams,
    opts: &ContinuationOptions,
) -> Result<ContinuationPath> {
    if lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Usage("every lambda must be positive".into()));
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Usage("the lambda grid must be strictly decreasing".into()));
    }
    let mut prev_rank = numeric_rank(&forward_product(start), opts.rank_tol)?;
    let mut theta = start.clone();
    let mut points = Vec::with_capacity(lambdas.len());
    let mut structure_lost_at = None;
    for &lambda in lambdas {
        let (params, grad_norm, steps, converged) =
            match converge(&theta, p, lambda, opts.eta, opts.grad_tol, opts.max_steps) {
                Ok(c) => (c.params, c.grad_norm, c.steps, true),
                Err(Error::NonConvergence {
                    steps,
                    grad_norm,
                    params,
                }) => (*params, grad_norm, steps, false),
                Err(e) => return Err(e),
            };
        let a = forward_product(&params);
        let rank = numeric_rank(&a, opts.rank_tol)?;
        points.push(ContinuationPoint {
            lambda,
            cost: cost(&a, p)?,
            param_norm_sq: param_norm_sq(&params),
            rank,
            grad_norm,
            steps,
            converged,
            params: params.clone(),
        });
        if rank != prev_rank {
            structure_lost_at = Some(lambda);
            break;
        }
        prev_rank = rank;
        theta = params;
    }
    Ok(ContinuationPath {
        r_star,
        points,
        structure_lost_at,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linnet::{balanced_factorization, init_gaussian, ArchSpec};
    use crate::oracle::jacobi_eigs;

    #[test]
    fn numeric_rank_examples() {
        assert_eq!(numeric_rank(&Mat::zeros(2, 3), 1e-6).unwrap(), 0);
        assert_eq!(numeric_rank(&Mat::identity(4, 4), 1e-6).unwrap(), 4);
        assert_eq!(numeric_rank(&(Mat::identity(2, 2) * 1e-20), 1e-6).unwrap(), 0);
        let a = Mat::from_row_slice(2, 2, &[1.0, 4.0, 0.25, 1.0]);
        assert_eq!(numeric_rank(&a, 1e-6).unwrap(), 1);
    }

    #[test]
    fn converge_from_critical_points() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 3).unwrap();
        let zero = NetworkParams::zeros(&arch);
        let c = converge(&zero, &p, 0.1, 0.1, 1e-10, 10).unwrap();
        assert_eq!(c.steps, 0);
        assert_eq!(c.params, zero);
    }

    #[test]
    fn converge_reaches_balanced_stationary_point() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 3).unwrap();
        let theta0 = init_gaussian(&arch, 1.0, 2).unwrap();
        let c = converge(&theta0, &p, 0.01, 0.1, 1e-10, 1_000_000).unwrap();
        assert!(c.grad_norm <= 1e-10);
        assert!(balance_error(&c.params).unwrap().max_spectral <= 1e-6);
    }

    #[test]
    fn non_convergence_carries_state() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 3).unwrap();
        let theta0 = init_gaussian(&arch, 1.0, 2).unwrap();
        match converge(&theta0, &p, 0.01, 0.1, 1e-10, 3) {
            Err(Error::NonConvergence { steps, params, .. }) => {
                assert_eq!(steps, 3);
                assert_eq!(params.arch(), &arch);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn classification_examples() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 2).unwrap();
        let opts = ClassifyOptions {
            hessian: None,
            ..Default::default()
        };
        let zero = classify_minimum(&NetworkParams::zeros(&arch), &p, 0.1, 1, &opts).unwrap();
        assert_eq!(zero.classification, Classification::RankUnderestimating);
        let fit = balanced_factorization(p.target(), &arch).unwrap();
        let exact = classify_minimum(&fit, &p, 0.0, 1, &opts).unwrap();
        assert_eq!(exact.classification, Classification::Exact);
        assert!(exact.cost < 1e-25);
        let err = classify_minimum(&init_gaussian(&arch, 1.0, 1).unwrap(), &p, 0.1, 1, &opts).unwrap_err();
        assert!(err.to_string().contains("gradient norm"));
    }

    fn origin_closed_form_depth2(p: &CompletionProblem, lambda: f64) -> f64 {
        let m = p.target().component_mul(p.mask());
        2.0 * lambda - linalg::singular_values(&m).unwrap()[0] / p.n_observed() as f64
    }

    #[test]
    fn hessian_at_origin() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        for depth in [3, 4] {
            let arch = ArchSpec::uniform(2, 2, depth, 3).unwrap();
            let h = hessian_min_eig(&NetworkParams::zeros(&arch), &p, 0.1, 2, 2000, 1).unwrap();
            assert!((h.value - 0.2).abs() < 1e-4, "{h:?}");
        }
        let arch = ArchSpec::uniform(2, 2, 2, 2).unwrap();
        let h = hessian_min_eig(&NetworkParams::zeros(&arch), &p, 0.1, 2, 5000, 1).unwrap();
        assert!((h.value - origin_closed_form_depth2(&p, 0.1)).abs() < 1e-4, "{h:?}");
        assert!(!h.low_confidence);
    }

    #[test]
    fn explicit_hessian_oracle_depth2() {
        // Brute-force Hessian by differencing the analytic gradient along each basis vector.
        let p = CompletionProblem::two_by_two(0.4).unwrap();
        let arch = ArchSpec::uniform(2, 2, 2, 2).unwrap();
        let zero = NetworkParams::zeros(&arch);
        let dim = arch.param_count();
        let h = 1e-6;
        let mut hess = Mat::zeros(dim, dim);
        for k in 0..dim {
            let mut e = vec![0.0; dim];
            e[k] = h;
            let up = full_gradient(&NetworkParams::from_flat(&arch, &e).unwrap(), &p, 0.05).unwrap();
            e[k] = -h;
            let down = full_gradient(&NetworkParams::from_flat(&arch, &e).unwrap(), &p, 0.05).unwrap();
            let col: Vec<f64> = up
                .layers()
                .iter()
                .zip(down.layers())
                .flat_map(|(a, b)| (a - b).iter().map(|x| x / (2.0 * h)).collect::<Vec<_>>())
                .collect();
            for (i, v) in col.into_iter().enumerate() {
                hess[(i, k)] = v;
            }
        }
        let (vals, _) = jacobi_eigs(&linalg::symmetrize(&hess), 1e-13).unwrap();
        let lowest = *vals.last().unwrap();
        assert!((lowest - origin_closed_form_depth2(&p, 0.05)).abs() < 1e-6);
        let est = hessian_min_eig(&zero, &p, 0.05, 2, 5000, 3).unwrap();
        assert!((est.value - lowest).abs() < 1e-4);
    }

    #[test]
    fn continuation_collapses_when_over_regularized() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 2).unwrap();
        let start = balanced_factorization(p.target(), &arch).unwrap();
        let opts = ContinuationOptions {
            max_steps: 200_000,
            ..Default::default()
        };
        let path = lambda_continuation(&p, 1, &[5.0, 1.0], &start, &opts).unwrap();
        assert!(path.truncated());
        assert_eq!(path.points.len(), 1);
        assert_eq!(path.points[0].rank, 0);
        assert!(lambda_continuation(&p, 1, &[0.1, 0.2], &start, &opts).is_err());
    }
}
