//! Thompson sampling from per-entity posteriors `N(mean, (H + lambda I)^{-1})`.
//!
//! Randomness comes from ChaCha20 keyed by an explicit 64-bit seed, so every
//! draw is replayable. Callers derive per-entity seeds with [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::incremental::{posterior_covariance, Covariance};
use crate::linalg;
use crate::model::{CoefficientState, GameModel, Instance, ScoreSource, TrainerConfig};

/// Square-root factor `L` of the posterior covariance, `L L^T = Sigma`.
#[derive(Clone, Debug, PartialEq)]
pub enum CovarianceFactor {
    /// Dense row-major lower triangular.
    Full {
        dim: usize,
        lower: Vec<f64>,
    },
    Diagonal(Vec<f64>),
}

impl CovarianceFactor {
    pub fn dim(&self) -> usize {
        match self {
            CovarianceFactor::Full { dim, .. } => *dim,
            CovarianceFactor::Diagonal(d) => d.len(),
        }
    }

    pub fn apply(&self, eps: &[f64]) -> Vec<f64> {
        match self {
            CovarianceFactor::Full { dim, lower } => (0..*dim)
                .map(|i| (0..=i).map(|j| lower[i * dim + j] * eps[j]).sum())
                .collect(),
            CovarianceFactor::Diagonal(s) => s.iter().zip(eps).map(|(a, b)| a * b).collect(),
        }
    }

    /// Dense `L L^T`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = match self {
                    CovarianceFactor::Full { lower, .. } => {
                        (0..=i.min(j)).map(|k| lower[i * n + k] * lower[j * n + k]).sum()
                    }
                    CovarianceFactor::Diagonal(s) => {
                        if i == j {
                            s[i] * s[i]
                        } else {
                            0.0
                        }
                    }
                };
            }
        }
        out
    }
}

pub fn covariance_factor(state: &CoefficientState) -> Result<CovarianceFactor> {
    match posterior_covariance(state)? {
        Covariance::Diagonal(v) => Ok(CovarianceFactor::Diagonal(v.iter().map(|x| x.sqrt()).collect())),
        Covariance::Full { dim, values } => Ok(CovarianceFactor::Full {
            dim,
            lower: linalg::cholesky(&values, dim)?,
        }),
    }
}

/// The standard-normal vector that [`thompson_sample`] uses for `seed`.
pub fn standard_normals(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `mean + L eps`.
pub fn sample_with_noise(state: &CoefficientState, eps: &[f64]) -> Result<Vec<f64>> {
    let factor = covariance_factor(state)?;
    Ok(state.mean.iter().zip(factor.apply(eps)).map(|(m, v)| m + v).collect())
}

pub fn thompson_sample(state: &CoefficientState, seed: u64) -> Result<Vec<f64>> {
    sample_with_noise(state, &standard_normals(state.dim(), seed))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable seed for a named sub-stream, e.g. `(global, [entity, request])`.
pub fn derive_seed(global: u64, parts: &[&str]) -> u64 {
    // FNV-1a over the parts, separated so ("ab","c") != ("a","bc")
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    splitmix64(global ^ splitmix64(h))
}

/// Fixed-effect point score plus one Thompson draw per random effect.
/// Unseen entities are drawn from the `N(0, 1/lambda)` prior.
pub fn sampled_score(model: &GameModel, inst: &Instance, config: &TrainerConfig, seed: u64) -> Result<f64> {
    let mut s = model.fixed_score(&inst.fixed_features)?;
    for a in &inst.re_assignments {
        let d = model.schema.re_dim(&a.re_type)?;
        a.features.check_dim(d)?;
        let prior;
        let state = match model.state(&a.key()) {
            Some(st) => st,
            None => {
                prior = CoefficientState::prior(d, model.hessian_mode, config.lambda_for(&a.re_type));
                &prior
            }
        };
        let beta = thompson_sample(state, derive_seed(seed, &[&a.re_type, &a.re_id]))?;
        s += a.features.dot(&beta)?;
    }
    Ok(s)
}
