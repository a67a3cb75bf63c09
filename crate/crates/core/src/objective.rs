//! Matrix-completion loss, residuals and exact per-layer gradients.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::linnet::{forward_product, param_norm_sq, NetworkParams};

/// Target `A*` with its observed index set `I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionProblem {
    target: Mat,
    observed: Vec<(usize, usize)>,
    mask: Mat,
    c1: f64,
}

impl CompletionProblem {
    pub fn new(target: Mat, observed: Vec<(usize, usize)>) -> Result<Self> {
        if observed.is_empty() {
            return Err(Error::Usage("no observed entries".into()));
        }
        let mut mask = Mat::zeros(target.nrows(), target.ncols());
        for &(i, j) in &observed {
            if i >= target.nrows() || j >= target.ncols() {
                return Err(Error::Usage(format!(
                    "observed index ({i}, {j}) outside a {}x{} target",
                    target.nrows(),
                    target.ncols()
                )));
            }
            if mask[(i, j)] != 0.0 {
                return Err(Error::Usage(format!("observed index ({i}, {j}) listed twice")));
            }
            if !target[(i, j)].is_finite() {
                return Err(Error::Usage(format!("target entry ({i}, {j}) is not finite")));
            }
            mask[(i, j)] = 1.0;
        }
        let c1 = observed
            .iter()
            .map(|&(i, j)| target[(i, j)] * target[(i, j)])
            .fold(0.0, f64::max);
        Ok(Self {
            target,
            observed,
            mask,
            c1,
        })
    }

    /// The 2×2 problem `[[1, *], [ε, 1]]` whose rank-1 completion fills `*` with `1/ε`.
    /// The missing entry of the stored target holds that completion.
    pub fn two_by_two(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Usage(format!("epsilon must be positive, got {eps}")));
        }
        let target = Mat::from_row_slice(2, 2, &[1.0, 1.0 / eps, eps, 1.0]);
        Self::new(target, vec![(0, 0), (1, 0), (1, 1)])
    }

    pub fn target(&self) -> &Mat {
        &self.target
    }

    pub fn observed(&self) -> &[(usize, usize)] {
        &self.observed
    }

    /// `N = |I|`.
    pub fn n_observed(&self) -> usize {
        self.observed.len()
    }

    /// `C₁ = max_{(i,j)∈I} (A*_ij)²`.
    pub fn c1(&self) -> f64 {
        self.c1
    }

    /// 0/1 observation mask `M`.
    pub fn mask(&self) -> &Mat {
        &self.mask
    }

    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        i < self.mask.nrows() && j < self.mask.ncols() && self.mask[(i, j)] != 0.0
    }

    /// Unobserved indices in row-major order.
    pub fn missing(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.target.nrows() {
            for j in 0..self.target.ncols() {
                if !self.is_observed(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn d_in(&self) -> usize {
        self.target.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.target.nrows()
    }

    fn check_shape(&self, a: &Mat) -> Result<()> {
        if a.shape() != self.target.shape() {
            return Err(Error::Shape(format!(
                "matrix is {:?}, target is {:?}",
                a.shape(),
                self.target.shape()
            )));
        }
        Ok(())
    }
}

/// Per-layer matrices shaped like the network's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    layers: Vec<Mat>,
}

impl LayerGradients {
    pub fn new(layers: Vec<Mat>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[Mat] {
        &self.layers
    }

    pub fn into_layers(self) -> Vec<Mat> {
        self.layers
    }

    pub fn norm_sq(&self) -> f64 {
        self.layers.iter().map(linalg::frobenius_sq).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    /// Largest absolute difference against `other`, relative to `max(‖self‖_∞, ‖other‖_∞, floor)`.
    pub fn relative_error(&self, other: &LayerGradients, floor: f64) -> f64 {
        let mut diff = 0.0_f64;
        let mut scale = floor;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            diff = diff.max((a - b).amax());
            scale = scale.max(a.amax()).max(b.amax());
        }
        diff / scale
    }
}

/// `C(A) = (1/2N) Σ_{(i,j)∈I} (A*_ij − A_ij)²`.
pub fn cost(a: &Mat, p: &CompletionProblem) -> Result<f64> {
    p.check_shape(a)?;
    Ok(cost_unchecked(a, p))
}

pub(crate) fn cost_unchecked(a: &Mat, p: &CompletionProblem) -> f64 {
    let sum: f64 = p
        .observed
        .iter()
        .map(|&(i, j)| {
            let r = p.target[(i, j)] - a[(i, j)];
            r * r
        })
        .sum();
    sum / (2.0 * p.n_observed() as f64)
}

/// `ℒ_λ(θ) = C(A_θ) + λ‖θ‖²`.
pub fn regularized_loss(theta: &NetworkParams, p: &CompletionProblem, lambda: f64) -> Result<f64> {
    Ok(cost(&forward_product(theta), p)? + lambda * param_norm_sq(theta))
}

/// `G_{θ,ij}`: zero except entry `(i,j) = A_θ,ij − A*_ij`.
pub fn entry_residual(theta: &NetworkParams, p: &CompletionProblem, idx: (usize, usize)) -> Result<Mat> {
    let (i, j) = idx;
    if !p.is_observed(i, j) {
        return Err(Error::Usage(format!("index ({i}, {j}) is not observed")));
    }
    let a = forward_product(theta);
    p.check_shape(&a)?;
    let mut g = Mat::zeros(a.nrows(), a.ncols());
    g[(i, j)] = a[(i, j)] - p.target[(i, j)];
    Ok(g)
}

/// `M ⊙ (A − A*)`, the sum of all entry residuals.
pub fn residual_matrix(a: &Mat, p: &CompletionProblem) -> Result<Mat> {
    p.check_shape(a)?;
    Ok((a - &p.target).component_mul(&p.mask))
}

/// `T_ℓ = W_{ℓ+1}ᵀ ⋯ W_Lᵀ G W_1ᵀ ⋯ W_{ℓ−1}ᵀ` for the 0-based layer `l`.
pub fn layer_gradient(theta: &NetworkParams, g: &Mat, l: usize) -> Result<Mat> {
    let depth = theta.depth();
    if l >= depth {
        return Err(Error::Usage(format!("layer {l} out of range for depth {depth}")));
    }
    let arch = theta.arch();
    if g.shape() != (arch.d_out(), arch.d_in()) {
        return Err(Error::Shape(format!(
            "residual is {:?}, network maps to {:?}",
            g.shape(),
            (arch.d_out(), arch.d_in())
        )));
    }
    let w = theta.weights();
    // left = (W_L ⋯ W_{l+1})ᵀ G, right = (W_{l-1} ⋯ W_1)ᵀ
    let mut left = g.clone();
    for k in (l + 1..depth).rev() {
        left = w[k].tr_mul(&left);
    }
    let mut prefix: Option<Mat> = None;
    for wk in &w[..l] {
        prefix = Some(match prefix {
            None => wk.clone(),
            Some(p) => wk * p,
        });
    }
    Ok(match prefix {
        None => left,
        Some(p) => left * p.transpose(),
    })
}

/// Prefix products `P_l = W_{l−1} ⋯ W_1` (with `P_0 = I`) and suffix products
/// `S_l = W_L ⋯ W_{l+1}` (with `S_{L−1} = I`).
pub(crate) fn chain_products(theta: &NetworkParams) -> (Vec<Mat>, Vec<Mat>) {
    let w = theta.weights();
    let depth = w.len();
    let arch = theta.arch();
    let mut prefix = Vec::with_capacity(depth);
    prefix.push(Mat::identity(arch.d_in(), arch.d_in()));
    for l in 1..depth {
        let next = &w[l - 1] * &prefix[l - 1];
        prefix.push(next);
    }
    let mut suffix = vec![Mat::zeros(0, 0); depth];
    suffix[depth - 1] = Mat::identity(arch.d_out(), arch.d_out());
    for l in (0..depth - 1).rev() {
        suffix[l] = &suffix[l + 1] * &w[l + 1];
    }
    (prefix, suffix)
}

/// `Σ_{(i,j)} T_ℓ(G_ij)` for every layer given an aggregated residual `G`.
pub(crate) fn chain_gradient(theta: &NetworkParams, g: &Mat) -> Vec<Mat> {
    let (prefix, suffix) = chain_products(theta);
    (0..theta.depth())
        .map(|l| suffix[l].tr_mul(&(g * prefix[l].transpose())))
        .collect()
}

/// Exact gradient of `ℒ_λ`: `(1/N) Σ_{(i,j)∈I} T_ℓ(G_ij) + 2λ W_ℓ`.
pub fn full_gradient(theta: &NetworkParams, p: &CompletionProblem, lambda: f64) -> Result<LayerGradients> {
    let a = forward_product(theta);
    let g = residual_matrix(&a, p)? / p.n_observed() as f64;
    let layers = chain_gradient(theta, &g)
        .into_iter()
        .zip(theta.weights())
        .map(|(t, w)| t + w * (2.0 * lambda))
        .collect();
    Ok(LayerGradients::new(layers))
}

/// Ceiling `2(C₁ + C^L)` on `‖G_{θ,ij}‖_F²` when every `‖W_ℓ‖_F² ≤ C`.
pub fn residual_bound(p: &CompletionProblem, cap_c: f64, depth: usize) -> f64 {
    2.0 * (p.c1() + cap_c.powi(depth as i32))
}
