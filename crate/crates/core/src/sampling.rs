//! Balanced resampling, equivalent sample size and the index permutation
//! that keeps surviving particles in their own slot.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::{count, to_f64, Real};

/// Resampling outcome. Indices are zero-based: analysis member `i` descends
/// from background component `indices[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResamplePlan {
    pub indices: Vec<usize>,
    /// `N^j`: how many times component `j` was selected.
    pub multiplicities: Vec<usize>,
    pub seed: u64,
}

impl ResamplePlan {
    /// Every component selected once, in place.
    pub fn identity(k: usize, seed: u64) -> Self {
        Self {
            indices: (0..k).collect(),
            multiplicities: vec![1; k],
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Systematic residual resampling: `N^j = ⌊k α_j⌋ + B_j` where the
/// `B_j ∈ {0, 1}` come from one stratified uniform draw over the residuals.
/// Guarantees `|N^j − k α_j| < 1` and `E[N^j] = k α_j`.
///
/// The draw depends only on `seed`, so every caller passing the same seed and
/// weights gets the same plan regardless of call order.
pub fn balanced_resample<T: Real>(alpha: &DVector<T>, k: usize, seed: u64) -> Result<ResamplePlan> {
    if k == 0 {
        return Err(Error::invalid("cannot resample zero members"));
    }
    if alpha.is_empty() {
        return Err(Error::invalid("empty weight vector"));
    }
    let raw: Vec<f64> = alpha.iter().map(|&a| to_f64(a)).collect();
    if let Some(i) = raw.iter().position(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::invalid(format!(
            "weight {i} is negative or non-finite"
        )));
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("weights sum to zero"));
    }
    let kf = k as f64;
    // Round-off must not turn an integer expectation into a random draw.
    let expected: Vec<f64> = raw
        .iter()
        .map(|a| {
            let e = kf * a / total;
            if (e - e.round()).abs() < 1e-9 {
                e.round()
            } else {
                e
            }
        })
        .collect();
    let mut multiplicities: Vec<usize> = expected.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = multiplicities.iter().sum();
    let remaining = k.saturating_sub(assigned);
    if remaining > 0 {
        let residuals: Vec<f64> = expected.iter().map(|e| e - e.floor()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: f64 = rng.random::<f64>();
        let scale = remaining as f64 / residuals.iter().sum::<f64>();
        let last_positive = residuals.iter().rposition(|&r| r > 0.0).unwrap_or(0);
        let mut cum = 0.0;
        let mut point = 0usize;
        for (j, &r) in residuals.iter().enumerate() {
            if r <= 0.0 {
                continue;
            }
            cum += r * scale;
            // Points u, u+1, …, u+remaining−1 falling in [cum − r, cum).
            let upper = if j == last_positive {
                f64::INFINITY
            } else {
                cum
            };
            while point < remaining && (point as f64) + u < upper {
                multiplicities[j] += 1;
                point += 1;
            }
        }
    }
    let indices = multiplicities
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
        .collect();
    Ok(ResamplePlan {
        indices,
        multiplicities,
        seed,
    })
}

/// Equivalent sample size `1 / Σ α_i²`.
pub fn ess<T: Real>(alpha: &DVector<T>) -> T {
    T::one() / alpha.norm_squared()
}

/// Rearranges the indices so that every surviving particle `j` stays in slot
/// `j`; leftover copies fill the remaining slots in ascending index order.
/// The multiset of indices is unchanged and the operation is idempotent.
pub fn permute_for_continuity(plan: &ResamplePlan) -> ResamplePlan {
    let k = plan.indices.len();
    let mut counts = vec![0usize; plan.multiplicities.len().max(k)];
    for &i in &plan.indices {
        counts[i] += 1;
    }
    let mut slots: Vec<Option<usize>> = vec![None; k];
    for (j, slot) in slots.iter_mut().enumerate() {
        if counts[j] > 0 {
            *slot = Some(j);
            counts[j] -= 1;
        }
    }
    let mut spare = counts
        .iter()
        .enumerate()
        .flat_map(|(j, &n)| std::iter::repeat_n(j, n));
    let indices = slots
        .into_iter()
        .map(|s| s.unwrap_or_else(|| spare.next().expect("spare copies fill free slots")))
        .collect();
    ResamplePlan {
        indices,
        multiplicities: plan.multiplicities.clone(),
        seed: plan.seed,
    }
}

/// Expected counts `k α_j`, for diagnostics.
pub fn expected_counts<T: Real>(alpha: &DVector<T>, k: usize) -> DVector<T> {
    alpha * count::<T>(k) / alpha.sum()
}
