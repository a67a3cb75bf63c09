//! Absorbing sets `B_r`: soft rank, balancedness, membership and the admissible-bound calculator.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::linnet::{forward_product, ArchSpec, NetworkParams};
use crate::objective::CompletionProblem;

/// Parameters `(r, ε₁, ε₂, α, C)` of `B_r = B_{C,ε₁} ∩ B_{r,ε₂}` plus the largest weight dimension `n`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbsorbingSpec {
    pub r: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub alpha: f64,
    pub cap_c: f64,
    pub n: usize,
}

impl AbsorbingSpec {
    pub fn new(r: usize, eps1: f64, eps2: f64, alpha: f64, cap_c: f64, n: usize) -> Result<Self> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Usage(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("eps1", eps1)?;
        positive("eps2", eps2)?;
        positive("alpha", alpha)?;
        positive("cap_c", cap_c)?;
        if eps2 >= 0.5 {
            return Err(Error::Usage(format!("eps2 must be below 1/2, got {eps2}")));
        }
        if n == 0 {
            return Err(Error::Usage("n must be positive".into()));
        }
        Ok(Self {
            r,
            eps1,
            eps2,
            alpha,
            cap_c,
            n,
        })
    }

    /// Spec with `n` taken from the architecture.
    pub fn for_arch(r: usize, eps1: f64, eps2: f64, alpha: f64, cap_c: f64, arch: &ArchSpec) -> Result<Self> {
        Self::new(r, eps1, eps2, alpha, cap_c, arch.max_dim())
    }

    /// Checks `α ≤ (λ²/(2(C₁+C^L)))^{1/(L−2)}`.
    pub fn check_alpha(&self, lambda: f64, depth: usize, c1: f64) -> Result<()> {
        let max = alpha_max(lambda, depth, c1, self.cap_c)?;
        if self.alpha > max {
            return Err(Error::Usage(format!(
                "alpha {} exceeds its ceiling {max:e}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `f_α(x) = x(2α − x)/α²` for `x ≤ α`, else 1.
pub fn f_alpha(x: f64, alpha: f64) -> f64 {
    if x <= alpha {
        x * (2.0 * alpha - x) / (alpha * alpha)
    } else {
        1.0
    }
}

/// `f_α′(x) = 2/α − 2x/α²` for `x ≤ α`, else 0.
pub fn f_alpha_prime(x: f64, alpha: f64) -> f64 {
    if x <= alpha {
        2.0 / alpha - 2.0 * x / (alpha * alpha)
    } else {
        0.0
    }
}

/// `Σᵢ f_α(λᵢ(WᵀW))`, computed on the smaller symmetrized Gram matrix.
pub fn soft_rank(w: &Mat, alpha: f64) -> Result<f64> {
    Ok(linalg::squared_singular_values(w)?
        .into_iter()
        .map(|x| f_alpha(x, alpha))
        .sum())
}

/// Per-pair balance errors `‖W_ℓW_ℓᵀ − W_{ℓ+1}ᵀW_{ℓ+1}‖` for `ℓ = 1, …, L−1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceReport {
    pub spectral: Vec<f64>,
    pub frobenius: Vec<f64>,
    pub max_spectral: f64,
    pub max_frobenius: f64,
}

pub(crate) fn balance_matrix(theta: &NetworkParams, l: usize) -> Mat {
    let w = theta.weights();
    &w[l] * w[l].transpose() - w[l + 1].tr_mul(&w[l + 1])
}

/// Balance errors in spectral (authoritative) and Frobenius norms.
pub fn balance_error(theta: &NetworkParams) -> Result<BalanceReport> {
    let depth = theta.depth();
    if depth < 2 {
        return Err(Error::Usage("balance error needs depth at least 2".into()));
    }
    let mut spectral = Vec::with_capacity(depth - 1);
    let mut frobenius = Vec::with_capacity(depth - 1);
    for l in 0..depth - 1 {
        let d = balance_matrix(theta, l);
        spectral.push(linalg::sym_spectral_norm(&d)?);
        frobenius.push(d.norm());
    }
    Ok(BalanceReport {
        max_spectral: spectral.iter().copied().fold(0.0, f64::max),
        max_frobenius: frobenius.iter().copied().fold(0.0, f64::max),
        spectral,
        frobenius,
    })
}

/// Membership clauses in the order they are checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Clause {
    Norm,
    Balance,
    SoftRank,
}

/// First failing clause; `layer` is 0-based (for balance it names the pair `(layer, layer+1)`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub clause: Clause,
    pub layer: usize,
    pub value: f64,
    pub limit: f64,
    /// `limit − value`, negative on violation.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Membership {
    pub member: bool,
    pub violation: Option<Violation>,
    pub norms_sq: Vec<f64>,
    pub balance_spectral: Vec<f64>,
    pub soft_ranks: Vec<f64>,
}

impl Membership {
    /// Smallest margin over every clause and layer (negative iff not a member).
    pub fn min_margin(&self, spec: &AbsorbingSpec) -> f64 {
        let norm = self.norms_sq.iter().map(|v| spec.cap_c - v);
        let bal = self.balance_spectral.iter().map(|v| spec.eps1 - v);
        let soft = self
            .soft_ranks
            .iter()
            .map(|v| spec.r as f64 + spec.eps2 - v);
        norm.chain(bal).chain(soft).fold(f64::INFINITY, f64::min)
    }
}

/// Tests `θ ∈ B_r`: every `‖W_ℓ‖_F² ≤ C`, every spectral balance error `≤ ε₁`,
/// every `soft_rank(W_ℓ, α) ≤ r + ε₂`.
pub fn membership(theta: &NetworkParams, spec: &AbsorbingSpec) -> Result<Membership> {
    let norms_sq: Vec<f64> = theta.weights().iter().map(linalg::frobenius_sq).collect();
    let balance_spectral = if theta.depth() >= 2 {
        balance_error(theta)?.spectral
    } else {
        Vec::new()
    };
    let soft_ranks = theta
        .weights()
        .iter()
        .map(|w| soft_rank(w, spec.alpha))
        .collect::<Result<Vec<_>>>()?;
    let soft_limit = spec.r as f64 + spec.eps2;
    let first = |clause, values: &[f64], limit: f64| {
        values.iter().enumerate().find(|(_, v)| **v > limit).map(|(layer, &value)| Violation {
            clause,
            layer,
            value,
            limit,
            margin: limit - value,
        })
    };
    let violation = first(Clause::Norm, &norms_sq, spec.cap_c)
        .or_else(|| first(Clause::Balance, &balance_spectral, spec.eps1))
        .or_else(|| first(Clause::SoftRank, &soft_ranks, soft_limit));
    Ok(Membership {
        member: violation.is_none(),
        violation,
        norms_sq,
        balance_spectral,
        soft_ranks,
    })
}

/// `U diag(f_α′(λᵢ)) Uᵀ` for symmetric `A = U diag(λ) Uᵀ`.
pub fn spectral_gradient(a: &Mat, alpha: f64) -> Result<Mat> {
    let (vals, u) = linalg::sym_eigen(a)?;
    let d = nalgebra::DVector::from_iterator(vals.len(), vals.iter().map(|&x| f_alpha_prime(x, alpha)));
    Ok(&u * Mat::from_diagonal(&d) * u.transpose())
}

/// `F_α∘σ(A_θᵀA_θ)`, the soft rank of the end-to-end matrix.
pub fn output_soft_rank(theta: &NetworkParams, alpha: f64) -> Result<f64> {
    soft_rank(&forward_product(theta), alpha)
}

/// Ceiling `r + ε₂ + (nL²/α) C^{L−1} ε₁` on [`output_soft_rank`] for members of `B_r`.
pub fn output_soft_rank_ceiling(spec: &AbsorbingSpec, depth: usize) -> f64 {
    let l = depth as f64;
    spec.r as f64
        + spec.eps2
        + (spec.n as f64 * l * l / spec.alpha) * spec.cap_c.powi(depth as i32 - 1) * spec.eps1
}

/// `Σᵢ f_α(sᵢ(A)^{2/L})`: the per-layer soft rank of an exactly balanced factorization of `A`.
pub fn balanced_output_soft_rank(a: &Mat, depth: usize, alpha: f64) -> Result<f64> {
    let p = 2.0 / depth as f64;
    Ok(linalg::singular_values(a)?
        .into_iter()
        .map(|s| {
            let x = if s <= linalg::ZERO_SINGULAR { 0.0 } else { s.powf(p) };
            f_alpha(x, alpha)
        })
        .sum())
}

/// `(λ²/(2(C₁+C^L)))^{1/(L−2)}`.
pub fn alpha_max(lambda: f64, depth: usize, c1: f64, cap_c: f64) -> Result<f64> {
    if depth < 3 {
        return Err(Error::UnsupportedDepth {
            depth,
            detail: "the soft-rank knee ceiling needs depth at least 3".into(),
        });
    }
    let k = c1 + cap_c.powi(depth as i32);
    Ok((lambda * lambda / (2.0 * k)).powf(1.0 / (depth as f64 - 2.0)))
}

/// Inputs of the closure and reachability bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsQuery {
    pub lambda: f64,
    pub depth: usize,
    pub c1: f64,
    /// Largest weight dimension.
    pub n: usize,
    /// `min(d_in, d_out)`.
    pub n_min: usize,
    pub r: usize,
    pub eps1: f64,
    pub eps2: f64,
    pub cap_c: f64,
    /// Knee to evaluate the step-size ceilings at; defaults to the ceiling on α.
    pub alpha: Option<f64>,
    /// Step size for the reachability times; defaults to the closure ceiling.
    pub eta: Option<f64>,
    /// Initial `max_ℓ ‖W_ℓ‖_F²`; defaults to `cap_c`.
    pub c0: Option<f64>,
}

impl BoundsQuery {
    pub fn new(
        lambda: f64,
        arch: &ArchSpec,
        p: &CompletionProblem,
        r: usize,
        eps1: f64,
        eps2: f64,
        cap_c: f64,
    ) -> Self {
        Self {
            lambda,
            depth: arch.depth(),
            c1: p.c1(),
            n: arch.max_dim(),
            n_min: arch.d_in().min(arch.d_out()),
            r,
            eps1,
            eps2,
            cap_c,
            alpha: None,
            eta: None,
            c0: None,
        }
    }
}

/// The four closure step-size ceilings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaCeilings {
    pub norm: f64,
    pub balance: f64,
    pub soft_rank: f64,
    pub decay: f64,
}

impl EtaCeilings {
    pub fn min(&self) -> f64 {
        self.norm.min(self.balance).min(self.soft_rank).min(self.decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub alpha_max: f64,
    /// Knee the remaining quantities were evaluated at.
    pub alpha: f64,
    pub eps1_max: f64,
    pub eta_ceilings: EtaCeilings,
    pub eta_max: f64,
    /// Ceilings of the reachability statement (initial-norm and balance forms).
    pub eta_travel_ceilings: [f64; 2],
    pub eta_travel_max: f64,
    /// `C₁/(2λ)`, needed for closure.
    pub cap_c_min_closure: f64,
    /// `C₁/λ`, needed for reachability.
    pub cap_c_min_travel: f64,
    /// The stricter floor, used when both statements are invoked together.
    pub cap_c_min: f64,
    /// `αε₂/(4(n−r)(L−1))` with `n = min(d_in, d_out)`.
    pub eps1_travel_max: f64,
    /// Step size used for the times below.
    pub eta: f64,
    pub t0_min: f64,
    pub t1_min: f64,
    pub jump_prob_lower_bound: f64,
    /// `log₁₀` of the probability bound (finite even when the bound underflows).
    pub jump_prob_log10: f64,
    pub feasible: bool,
    pub infeasible: Vec<String>,
}

/// Closure and reachability constants for `(λ, L, C₁, r, ε₁, ε₂, C)`.
pub fn admissible_bounds(
    lambda: f64,
    arch: &ArchSpec,
    p: &CompletionProblem,
    r: usize,
    eps1: f64,
    eps2: f64,
    cap_c: f64,
) -> Result<BoundReport> {
    bounds(&BoundsQuery::new(lambda, arch, p, r, eps1, eps2, cap_c))
}

/// [`admissible_bounds`] with explicit overrides.
pub fn bounds(q: &BoundsQuery) -> Result<BoundReport> {
    for (name, v) in [("lambda", q.lambda), ("eps1", q.eps1), ("eps2", q.eps2), ("cap", q.cap_c)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Usage(format!("{name} must be positive and finite, got {v}")));
        }
    }
    if q.n == 0 || q.n_min == 0 {
        return Err(Error::Usage("dimensions must be positive".into()));
    }
    let depth = q.depth;
    let lam = q.lambda;
    let c = q.cap_c;
    let c1 = q.c1;
    let l = depth as f64;
    let n = q.n as f64;
    let r1 = q.r as f64 + 1.0;
    let alpha_max = alpha_max(lam, depth, c1, c)?;
    let alpha = q.alpha.unwrap_or(alpha_max);
    let k = c1 + c.powi(depth as i32);
    let c_lm1 = c.powi(depth as i32 - 1);

    let sqrt_eps1 = lam * alpha * q.eps2
        / (32.0 * n * l * r1 * c.powf((l - 1.0) / 2.0) * (2.0 * k).sqrt());
    let eps1_max = sqrt_eps1 * sqrt_eps1;

    let eta_ceilings = EtaCeilings {
        norm: c1 / (4.0 * (2.0 * k * c_lm1 + lam * lam * c)),
        balance: 2.0 * lam * q.eps1 / (4.0 * k * c_lm1 + lam * lam * q.eps1),
        soft_rank: lam * alpha * q.eps2 / (32.0 * n * r1 * (2.0 * k * c_lm1 + lam * lam * c)),
        decay: 2.0 * r1 / lam,
    };
    let eta_max = eta_ceilings.min();

    let c0 = q.c0.unwrap_or(c);
    let k0 = c1 + c0.powi(depth as i32);
    let eta_travel_ceilings = [
        c1 / (4.0 * (2.0 * k0 * c0.powi(depth as i32 - 1) + lam * lam * c0)),
        lam * q.eps1 / (4.0 * k * c_lm1 + 2.0 * lam * lam * c),
    ];
    let eta_travel_max = eta_travel_ceilings[0].min(eta_travel_ceilings[1]);

    let n_min = q.n_min as f64;
    let trailing = n_min - q.r as f64;
    let eps1_travel_max = if trailing > 0.0 {
        alpha * q.eps2 / (4.0 * trailing * (l - 1.0))
    } else {
        f64::INFINITY
    };

    let eta = q.eta.unwrap_or(eta_max);
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Usage(format!("eta must be positive and finite, got {eta}")));
    }
    let t0_min = ((2.0 * c0 / q.eps1).ln() / (eta * lam)).max(0.0);
    let t1_min = if trailing > 0.0 {
        ((4.0 * trailing * c / (alpha * q.eps2)).ln() / (2.0 * eta * lam)).max(0.0)
    } else {
        0.0
    };
    let jump_prob_log10 = if trailing > 0.0 {
        t1_min.ceil() * (q.r as f64 / n_min).log10()
    } else {
        0.0
    };
    let jump_prob_lower_bound = 10f64.powf(jump_prob_log10);

    let cap_c_min_closure = c1 / (2.0 * lam);
    let cap_c_min_travel = c1 / lam;
    let mut infeasible = Vec::new();
    if c < cap_c_min_closure {
        infeasible.push(format!("cap {c} is below C1/(2 lambda) = {cap_c_min_closure}"));
    }
    if alpha > alpha_max {
        infeasible.push(format!("alpha {alpha} exceeds its ceiling {alpha_max:e}"));
    }
    if q.eps1 > eps1_max {
        infeasible.push(format!("eps1 {} exceeds its ceiling {eps1_max:e}", q.eps1));
    }
    if q.eps2 >= 0.5 {
        infeasible.push(format!("eps2 {} is not below 1/2", q.eps2));
    }
    if eta > eta_max {
        infeasible.push(format!("eta {eta:e} exceeds its ceiling {eta_max:e}"));
    }

    Ok(BoundReport {
        alpha_max,
        alpha,
        eps1_max,
        eta_ceilings,
        eta_max,
        eta_travel_ceilings,
        eta_travel_max,
        cap_c_min_closure,
        cap_c_min_travel,
        cap_c_min: cap_c_min_travel,
        eps1_travel_max,
        eta,
        t0_min,
        t1_min,
        jump_prob_lower_bound,
        jump_prob_log10,
        feasible: infeasible.is_empty(),
        infeasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linnet::{balanced_factorization, init_gaussian};
    use proptest::prelude::*;

    fn diag(v: &[f64]) -> Mat {
        Mat::from_diagonal(&nalgebra::DVector::from_row_slice(v))
    }

    #[test]
    fn f_alpha_values() {
        let a = 0.2;
        assert_eq!(f_alpha(0.0, a), 0.0);
        assert!((f_alpha(a / 2.0, a) - 0.75).abs() < 1e-15);
        assert_eq!(f_alpha(a * 1.0001, a), 1.0);
        assert_eq!(f_alpha(5.0, a), 1.0);
        assert!((f_alpha(a, a) - 1.0).abs() < 1e-15);
        assert!(f_alpha_prime(a, a).abs() < 1e-12);
        assert_eq!(f_alpha_prime(0.0, a), 2.0 / a);
    }

    #[test]
    fn soft_rank_values() {
        let alpha = 0.1;
        assert_eq!(soft_rank(&Mat::zeros(3, 2), alpha).unwrap(), 0.0);
        let w = diag(&[1.0, (alpha / 2.0).sqrt()]);
        assert!((soft_rank(&w, alpha).unwrap() - 1.75).abs() < 1e-12);
        let hard = diag(&[2.0, 1.0, 0.0]);
        assert!((soft_rank(&hard, alpha).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn soft_rank_tends_to_hard_rank() {
        let w = diag(&[1.0, 0.5, 0.0]);
        let mut prev = f64::INFINITY;
        for k in 1..=6 {
            let v = soft_rank(&w, 10f64.powi(-k)).unwrap();
            assert!(v <= prev + 1e-12);
            prev = v;
        }
        assert!((prev - 2.0).abs() < 1e-12);
    }

    #[test]
    fn balance_examples() {
        let theta = NetworkParams::from_layers(vec![Mat::from_element(1, 1, 1.0), Mat::from_element(1, 1, 2.0)]).unwrap();
        let b = balance_error(&theta).unwrap();
        assert!((b.max_spectral - 3.0).abs() < 1e-15);
        assert!((b.max_frobenius - 3.0).abs() < 1e-15);
        let arch = ArchSpec::uniform(3, 3, 3, 4).unwrap();
        let a = Mat::from_fn(3, 3, |i, j| (i as f64 - j as f64 * 0.7).sin());
        let bal = balanced_factorization(&a, &arch).unwrap();
        assert!(balance_error(&bal).unwrap().max_spectral < 1e-10);
        let single = NetworkParams::from_layers(vec![Mat::zeros(2, 2)]).unwrap();
        assert!(balance_error(&single).is_err());
    }

    #[test]
    fn balance_is_conjugation_invariant() {
        let arch = ArchSpec::new(vec![2, 2, 2]).unwrap();
        let theta = init_gaussian(&arch, 1.0, 5).unwrap();
        let t = 0.7_f64;
        let q = Mat::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()]);
        let rotated = NetworkParams::new(
            arch,
            vec![&q * theta.layer(0), theta.layer(1) * q.transpose()],
        )
        .unwrap();
        let a = balance_error(&theta).unwrap().max_spectral;
        let b = balance_error(&rotated).unwrap().max_spectral;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn membership_examples() {
        let arch = ArchSpec::uniform(2, 2, 3, 2).unwrap();
        let spec = AbsorbingSpec::for_arch(0, 1e-3, 0.3, 0.1, 1.0, &arch).unwrap();
        assert!(membership(&NetworkParams::zeros(&arch), &spec).unwrap().member);

        let rank2 = balanced_factorization(&Mat::identity(2, 2), &arch).unwrap();
        let spec = AbsorbingSpec::for_arch(1, 1e-3, 0.4, 0.1, 5.0, &arch).unwrap();
        let m = membership(&rank2, &spec).unwrap();
        assert!(!m.member);
        assert_eq!(m.violation.as_ref().unwrap().clause, Clause::SoftRank);
        assert!(m.min_margin(&spec) < 0.0);

        let p = CompletionProblem::two_by_two(0.5).unwrap();
        let rank1 = balanced_factorization(p.target(), &arch).unwrap();
        let m = membership(&rank1, &spec).unwrap();
        assert!(m.member, "{m:?}");
        assert!(m.min_margin(&spec) >= 0.0);

        let tight = AbsorbingSpec::for_arch(1, 1e-3, 0.4, 0.1, 0.5, &arch).unwrap();
        assert_eq!(membership(&rank1, &tight).unwrap().violation.unwrap().clause, Clause::Norm);
    }

    #[test]
    fn spectral_gradient_examples() {
        let a = 0.3;
        let g = spectral_gradient(&Mat::zeros(3, 3), a).unwrap();
        assert!((g - Mat::identity(3, 3) * (2.0 / a)).norm() < 1e-12);
        let big = diag(&[1.0, 2.0]);
        assert!(spectral_gradient(&big, a).unwrap().norm() < 1e-15);
    }

    #[test]
    fn output_soft_rank_of_balanced_hard_rank() {
        let arch = ArchSpec::uniform(3, 3, 3, 3).unwrap();
        let a = diag(&[4.0, 2.0, 0.0]);
        let theta = balanced_factorization(&a, &arch).unwrap();
        assert!((output_soft_rank(&theta, 1e-3).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(output_soft_rank(&NetworkParams::zeros(&arch), 1e-3).unwrap(), 0.0);
        let per_layer = soft_rank(theta.layer(1), 1e-3).unwrap();
        assert!((balanced_output_soft_rank(&a, 3, 1e-3).unwrap() - per_layer).abs() < 1e-12);
    }

    #[test]
    fn alpha_ceiling_example() {
        assert!((alpha_max(0.1, 3, 1.0, 10.0).unwrap() - 0.01 / 2002.0).abs() < 1e-18);
        assert!((alpha_max(0.1, 3, 1.0, 10.0).unwrap() - 4.995e-6).abs() < 1e-9);
        assert!(matches!(alpha_max(0.1, 2, 1.0, 1.0), Err(Error::UnsupportedDepth { .. })));
    }

    fn report(cap: f64) -> BoundReport {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 2).unwrap();
        admissible_bounds(1.0, &arch, &p, 1, 1e-9, 0.4, cap).unwrap()
    }

    #[test]
    fn eta_max_is_min_of_ceilings() {
        let r = report(1.0);
        let c = &r.eta_ceilings;
        assert_eq!(r.eta_max, c.norm.min(c.balance).min(c.soft_rank).min(c.decay));
        assert!(r.feasible, "{:?}", r.infeasible);
        assert!((r.alpha_max - 0.25).abs() < 1e-15);
        assert_eq!(r.cap_c_min, r.cap_c_min_travel);
        assert!(r.t1_min > 1e8 && r.jump_prob_lower_bound == 0.0 && r.jump_prob_log10 < -1e7);
    }

    #[test]
    fn reachability_times() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 3, 2).unwrap();
        let mut q = BoundsQuery::new(1.0, &arch, &p, 1, 0.0125, 0.4, 1.0);
        q.alpha = Some(0.25);
        q.eta = Some(1e-3);
        q.c0 = Some(0.5);
        let r = bounds(&q).unwrap();
        assert!((r.t1_min - 40f64.ln() / 2e-3).abs() < 1e-9);
        assert!((r.t0_min - (2.0 * 0.5 / 0.0125f64).ln() / 1e-3).abs() < 1e-9);
        assert!((r.jump_prob_log10 - r.t1_min.ceil() * 0.5f64.log10()).abs() < 1e-9);
        assert!((r.eps1_travel_max - 0.0125).abs() < 1e-15);
        assert!((r.eta_travel_ceilings[1] - 0.0125 / 10.0).abs() < 1e-15);
        q.r = 2;
        let full = bounds(&q).unwrap();
        assert_eq!((full.t1_min, full.jump_prob_lower_bound), (0.0, 1.0));
    }

    #[test]
    fn bounds_shrink_with_capacity() {
        let a = report(1.0);
        let b = report(2.0);
        assert!(b.eta_max < a.eta_max);
        assert!(b.alpha_max < a.alpha_max);
    }

    #[test]
    fn low_capacity_is_infeasible() {
        let r = report(0.1);
        assert!(!r.feasible);
        assert!(r.infeasible[0].contains("cap"));
    }

    #[test]
    fn shallow_depth_unsupported() {
        let p = CompletionProblem::two_by_two(0.25).unwrap();
        let arch = ArchSpec::uniform(2, 2, 2, 2).unwrap();
        assert!(admissible_bounds(1.0, &arch, &p, 1, 1e-9, 0.4, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn f_alpha_shape(x in 0.0..2.0f64, y in 0.0..2.0f64, alpha in 0.01..1.0f64) {
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(f_alpha(lo, alpha) <= f_alpha(hi, alpha) + 1e-15);
            let d = f_alpha_prime(x, alpha);
            prop_assert!((0.0..=2.0 / alpha + 1e-12).contains(&d));
            prop_assert!((0.0..=1.0).contains(&f_alpha(x, alpha)));
            if x > 0.0 { prop_assert!(f_alpha(x, alpha) > 0.0); }
        }

        #[test]
        fn membership_is_monotone_in_r(seed in 0u64..500, scale in 0.05..1.5f64, r in 0usize..3) {
            let arch = ArchSpec::uniform(2, 3, 3, 3).unwrap();
            let theta = init_gaussian(&arch, scale, seed).unwrap();
            let a = AbsorbingSpec::for_arch(r, 0.5, 0.4, 0.05, 3.0, &arch).unwrap();
            let b = AbsorbingSpec { r: r + 1, ..a.clone() };
            if membership(&theta, &a).unwrap().member {
                prop_assert!(membership(&theta, &b).unwrap().member);
            }
        }
    }
}
