//! Deep linear network parameters `θ = (W₁, …, W_L)` and the maps built on them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, ZERO_SINGULAR};

/// Layer widths `w₀ = d_in, w₁, …, w_L = d_out`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ArchSpec {
    widths: Vec<usize>,
}

impl ArchSpec {
    /// Validates that every width is positive and every hidden width is at least `min(d_in, d_out)`.
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Usage(format!(
                "an architecture needs at least two widths, got {}",
                widths.len()
            )));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(Error::Usage(format!("width {pos} is zero")));
        }
        let d_in = widths[0];
        let d_out = *widths.last().unwrap();
        let floor = d_in.min(d_out);
        for (l, &w) in widths.iter().enumerate().take(widths.len() - 1).skip(1) {
            if w < floor {
                return Err(Error::Usage(format!(
                    "hidden width w_{l} = {w} is below min(d_in, d_out) = {floor}"
                )));
            }
        }
        Ok(Self { widths })
    }

    /// `depth` layers mapping `d_in → d_out` through hidden layers of equal `width`.
    pub fn uniform(d_in: usize, d_out: usize, depth: usize, width: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Usage("depth must be at least 1".into()));
        }
        let mut widths = vec![width; depth + 1];
        widths[0] = d_in;
        widths[depth] = d_out;
        Self::new(widths)
    }

    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn d_in(&self) -> usize {
        self.widths[0]
    }

    pub fn d_out(&self) -> usize {
        self.widths[self.depth()]
    }

    /// Shape `(rows, cols)` of layer `l` (0-based), i.e. `w_{l+1} × w_l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.widths[l + 1], self.widths[l])
    }

    /// Largest dimension of any weight matrix.
    pub fn max_dim(&self) -> usize {
        *self.widths.iter().max().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }
}

impl TryFrom<Vec<usize>> for ArchSpec {
    type Error = Error;
    fn try_from(widths: Vec<usize>) -> Result<Self> {
        Self::new(widths)
    }
}

impl From<ArchSpec> for Vec<usize> {
    fn from(a: ArchSpec) -> Self {
        a.widths
    }
}

/// Weights of a deep linear network; layer `l` (0-based) has shape `w_{l+1} × w_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    arch: ArchSpec,
    weights: Vec<Mat>,
}

impl NetworkParams {
    pub fn new(arch: ArchSpec, weights: Vec<Mat>) -> Result<Self> {
        if weights.len() != arch.depth() {
            return Err(Error::Shape(format!(
                "{} weight matrices for depth {}",
                weights.len(),
                arch.depth()
            )));
        }
        for (l, w) in weights.iter().enumerate() {
            if w.shape() != arch.layer_shape(l) {
                return Err(Error::Shape(format!(
                    "layer {l} is {:?}, expected {:?}",
                    w.shape(),
                    arch.layer_shape(l)
                )));
            }
        }
        Ok(Self { arch, weights })
    }

    pub fn zeros(arch: &ArchSpec) -> Self {
        let weights = (0..arch.depth())
            .map(|l| {
                let (r, c) = arch.layer_shape(l);
                Mat::zeros(r, c)
            })
            .collect();
        Self {
            arch: arch.clone(),
            weights,
        }
    }

    /// Builds a network from `L` layers, inferring the widths.
    pub fn from_layers(weights: Vec<Mat>) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| Error::Usage("no layers given".into()))?;
        let mut widths = vec![first.ncols()];
        for (l, w) in weights.iter().enumerate() {
            if w.ncols() != *widths.last().unwrap() {
                return Err(Error::Shape(format!(
                    "layer {l} has {} columns, previous layer has {} rows",
                    w.ncols(),
                    widths.last().unwrap()
                )));
            }
            widths.push(w.nrows());
        }
        Self::new(ArchSpec::new(widths)?, weights)
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Mat] {
        &self.weights
    }

    pub fn layer(&self, l: usize) -> &Mat {
        &self.weights[l]
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Mat] {
        &mut self.weights
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(linalg::all_finite)
    }

    /// Flattened parameters (layer by layer, column-major within a layer).
    pub fn to_flat(&self) -> Vec<f64> {
        self.weights
            .iter()
            .flat_map(|w| w.iter().copied())
            .collect()
    }

    /// Inverse of [`NetworkParams::to_flat`] for the same architecture.
    pub fn from_flat(arch: &ArchSpec, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                arch.param_count()
            )));
        }
        let mut offset = 0;
        let weights = (0..arch.depth())
            .map(|l| {
                let (r, c) = arch.layer_shape(l);
                let w = Mat::from_column_slice(r, c, &flat[offset..offset + r * c]);
                offset += r * c;
                w
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            weights,
        })
    }

    /// `self + t·dir`, layer by layer.
    pub fn axpy(&self, t: f64, dir: &[Mat]) -> Self {
        let weights = self
            .weights
            .iter()
            .zip(dir)
            .map(|(w, d)| w + d * t)
            .collect();
        Self {
            arch: self.arch.clone(),
            weights,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    widths: Vec<usize>,
    /// Row-major weights, one nested list per layer.
    weights: Vec<Vec<Vec<f64>>>,
}

impl Serialize for NetworkParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsRepr {
            widths: self.arch.widths.clone(),
            weights: self.weights.iter().map(linalg::to_rows).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for NetworkParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = ParamsRepr::deserialize(d)?;
        let arch = ArchSpec::new(repr.widths).map_err(serde::de::Error::custom)?;
        let weights = repr
            .weights
            .iter()
            .map(|rows| linalg::from_rows(rows))
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        NetworkParams::new(arch, weights).map_err(serde::de::Error::custom)
    }
}

/// `A_θ = W_L ⋯ W_1`, accumulated as `W_ℓ · (W_{ℓ−1} ⋯ W_1)` for `ℓ = 2, …, L`.
pub fn forward_product(theta: &NetworkParams) -> Mat {
    let mut acc = theta.weights[0].clone();
    for w in &theta.weights[1..] {
        acc = w * acc;
    }
    acc
}

/// Exactly balanced factorization `W_ℓ = U_ℓ S^{1/L} U_{ℓ−1}ᵀ` with `U₀ = V`, `U_L = U`
/// and padded-identity interior frames.
pub fn balanced_factorization(a: &Mat, arch: &ArchSpec) -> Result<NetworkParams> {
    if arch.d_in() != a.ncols() || arch.d_out() != a.nrows() {
        return Err(Error::Shape(format!(
            "architecture maps {} -> {} but the matrix is {}x{}",
            arch.d_in(),
            arch.d_out(),
            a.nrows(),
            a.ncols()
        )));
    }
    let depth = arch.depth();
    if depth == 1 {
        return NetworkParams::new(arch.clone(), vec![a.clone()]);
    }
    let (u, s, v_t) = linalg::thin_svd(a)?;
    let d = s.len();
    let root: Vec<f64> = s
        .iter()
        .map(|&x| {
            if x <= ZERO_SINGULAR {
                0.0
            } else {
                x.powf(1.0 / depth as f64)
            }
        })
        .collect();
    let mut weights = Vec::with_capacity(depth);
    for l in 0..depth {
        let (rows, cols) = arch.layer_shape(l);
        let mut w = Mat::zeros(rows, cols);
        if l == 0 {
            for k in 0..d {
                for j in 0..cols {
                    w[(k, j)] = root[k] * v_t[(k, j)];
                }
            }
        } else if l == depth - 1 {
            for i in 0..rows {
                for k in 0..d {
                    w[(i, k)] = u[(i, k)] * root[k];
                }
            }
        } else {
            for k in 0..d {
                w[(k, k)] = root[k];
            }
        }
        weights.push(w);
    }
    NetworkParams::new(arch.clone(), weights)
}

/// `R(A; L) = L Σᵢ sᵢ(A)^{2/L}` over nonzero singular values.
pub fn representation_cost(a: &Mat, depth: usize) -> Result<f64> {
    if depth == 0 {
        return Err(Error::Usage("depth must be at least 1".into()));
    }
    let s = linalg::singular_values(a)?;
    let p = 2.0 / depth as f64;
    Ok(depth as f64
        * s.iter()
            .filter(|&&x| x > ZERO_SINGULAR)
            .map(|x| x.powf(p))
            .sum::<f64>())
}

/// `‖θ‖² = Σ_ℓ ‖W_ℓ‖_F²`.
pub fn param_norm_sq(theta: &NetworkParams) -> f64 {
    theta.weights.iter().map(linalg::frobenius_sq).sum()
}

/// I.i.d. `N(0, (scale/√w_{ℓ−1})²)` entries, filled layer by layer in row-major order
/// from a ChaCha8 stream seeded with `seed`.
pub fn init_gaussian(arch: &ArchSpec, scale: f64, seed: u64) -> Result<NetworkParams> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Usage(format!("init scale must be positive, got {scale}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = NetworkParams::zeros(arch);
    for (l, w) in theta.weights.iter_mut().enumerate() {
        let std = scale / (arch.widths[l] as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Usage(e.to_string()))?;
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                w[(i, j)] = normal.sample(&mut rng);
            }
        }
    }
    Ok(theta)
}
