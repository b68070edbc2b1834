//! Adaptive choice of the Kalman/particle balance `γ` for one local analysis.
//!
//! Two criteria are provided, both as searches over a fixed ascending grid:
//! the smallest `γ` whose particle weights keep an equivalent sample size of
//! at least a fraction of `k`, and the `γ` minimizing the `R⁻¹`-weighted
//! squared error of the predictive observation mean after resampling.

use nalgebra::DVector;

use crate::enspace::{pf_weights, weight_mean_matrix, SpectralCache};
use crate::error::{Error, Result};
use crate::sampling::{balanced_resample, ess};
use crate::scalar::{count, lit, Real};

/// Default grid spacing.
pub const DEFAULT_GRID_STEP: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub enum GammaPolicy<T: Real> {
    Fixed(T),
    /// Smallest grid `γ` with `ESS ≥ fraction · k`.
    EssTarget {
        fraction: T,
        grid: Vec<T>,
    },
    /// Grid `γ` minimizing the predictive mean squared error.
    MinMse {
        grid: Vec<T>,
    },
}

/// `0, 0.05, …, 1`.
pub fn default_grid<T: Real>() -> Vec<T> {
    uniform_grid(lit(DEFAULT_GRID_STEP))
}

/// `0, step, 2·step, …` up to and always including 1.
pub fn uniform_grid<T: Real>(step: T) -> Vec<T> {
    let n = (T::one() / step).round();
    let n = n.to_usize().unwrap_or(1).max(1);
    (0..=n).map(|i| count::<T>(i) / count::<T>(n)).collect()
}

fn validate_grid<T: Real>(grid: &[T]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("gamma grid is empty"));
    }
    if grid.iter().any(|&g| !(g >= T::zero() && g <= T::one())) {
        return Err(Error::invalid("gamma grid values must lie in [0, 1]"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("gamma grid must be strictly ascending"));
    }
    if *grid.last().unwrap() != T::one() {
        return Err(Error::invalid("gamma grid must contain 1"));
    }
    Ok(())
}

impl<T: Real> GammaPolicy<T> {
    pub fn fixed(value: T) -> Result<Self> {
        let p = Self::Fixed(value);
        p.validate()?;
        Ok(p)
    }

    pub fn ess_target(fraction: T) -> Self {
        Self::EssTarget {
            fraction,
            grid: default_grid(),
        }
    }

    pub fn min_mse() -> Self {
        Self::MinMse {
            grid: default_grid(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Fixed(g) if !(*g >= T::zero() && *g <= T::one()) => {
                Err(Error::invalid("fixed gamma must lie in [0, 1]"))
            }
            Self::Fixed(_) => Ok(()),
            Self::EssTarget { fraction, grid } => {
                if !(*fraction > T::zero() && *fraction <= T::one()) {
                    return Err(Error::invalid("ESS fraction must lie in (0, 1]"));
                }
                validate_grid(grid)
            }
            Self::MinMse { grid } => validate_grid(grid),
        }
    }

    /// Chooses `γ` for one cache. `seed` is the resampling seed the analysis
    /// will use; only the min-MSE criterion depends on it.
    pub fn choose(&self, cache: &SpectralCache<T>, seed: u64) -> Result<T> {
        match self {
            Self::Fixed(g) => Ok(*g),
            Self::EssTarget { fraction, grid } => Ok(choose_gamma_ess(cache, *fraction, grid)),
            Self::MinMse { grid } => choose_gamma_min_mse(cache, grid, seed),
        }
    }
}

/// First grid `γ` (ascending) whose weights have `ESS ≥ fraction · k`.
/// Falls back to the last grid value, which is 1 on a validated grid.
pub fn choose_gamma_ess<T: Real>(cache: &SpectralCache<T>, fraction: T, grid: &[T]) -> T {
    let target = fraction * count::<T>(cache.k);
    grid.iter()
        .copied()
        .find(|&g| ess(&pf_weights(cache, g)) >= target)
        .unwrap_or_else(|| *grid.last().expect("non-empty gamma grid"))
}

/// Mean weight vector `m^γ = W^μ W^α 𝟙 / k = W^μ N / k` after resampling.
pub fn mean_weight_vector<T: Real>(
    cache: &SpectralCache<T>,
    gamma: T,
    seed: u64,
) -> Result<DVector<T>> {
    let k = cache.k;
    let w_mu = weight_mean_matrix(cache, gamma);
    let plan = balanced_resample(&pf_weights(cache, gamma), k, seed)?;
    let n = DVector::from_iterator(k, plan.multiplicities.iter().map(|&m| count::<T>(m)));
    Ok(w_mu * n / count::<T>(k))
}

/// `(m^γ)ᵀ S m^γ − 2 (m^γ)ᵀ c`: the predictive squared error of the
/// resampled analysis mean minus that of the background mean.
pub fn mse_objective<T: Real>(cache: &SpectralCache<T>, gamma: T, seed: u64) -> Result<T> {
    let m = mean_weight_vector(cache, gamma, seed)?;
    let u = &cache.spectrum.eigvecs;
    let coeffs = u.tr_mul(&m);
    let quad = coeffs
        .iter()
        .zip(cache.spectrum.eigvals.iter())
        .fold(T::zero(), |acc, (&a, &l)| acc + l * a * a);
    Ok(quad - lit::<T>(2.0) * m.dot(&cache.c))
}

/// Grid `γ` minimizing [`mse_objective`]. Values within a relative `1e-12`
/// of the running minimum count as ties, which go to the largest `γ`.
pub fn choose_gamma_min_mse<T: Real>(cache: &SpectralCache<T>, grid: &[T], seed: u64) -> Result<T> {
    let rel = lit::<T>(1e-12);
    let mut best: Option<(T, T)> = None;
    for &g in grid {
        let obj = mse_objective(cache, g, seed)?;
        best = match best {
            None => Some((g, obj)),
            Some((_, b)) if obj <= b + rel * (obj.abs() + b.abs()) => Some((g, obj.min(b))),
            keep => keep,
        };
    }
    best.map(|(g, _)| g)
        .ok_or_else(|| Error::invalid("gamma grid is empty"))
}
