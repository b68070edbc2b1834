//! Ensemble-space analysis: the spectral cache of one local analysis, the
//! rational weight functions, particle weights, the ensemble-space analysis
//! covariance, stochastic and deterministic perturbation matrices, and the
//! final transform `x^a = x̄^b 𝟙ᵀ + X^b (W^μ W^α + W^ε)`.
//!
//! Everything here works on k×k matrices. The observation operator is never
//! materialized: observations enter only through the model equivalents
//! `Y^b = H(x^{b,i})` stored in an [`ObsBatch`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{self, solve_care, symmetrize, CareProblem, SymmetricSpectrum};
use crate::scalar::{count, lit, to_f64, Real};

pub mod oracle;

/// Background ensemble: q×k matrix, one member per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T: Real> {
    states: DMatrix<T>,
    mean: DVector<T>,
    deviations: DMatrix<T>,
}

impl<T: Real> Ensemble<T> {
    pub fn new(states: DMatrix<T>) -> Result<Self> {
        if states.ncols() < 2 {
            return Err(Error::invalid(format!(
                "ensemble needs at least 2 members, got {}",
                states.ncols()
            )));
        }
        let mean = states.column_mean();
        let mut deviations = states.clone();
        for mut col in deviations.column_iter_mut() {
            col -= &mean;
        }
        Ok(Self {
            states,
            mean,
            deviations,
        })
    }

    /// Builds `mean 𝟙ᵀ + deviations`; the deviations are recentered.
    pub fn from_parts(mean: &DVector<T>, deviations: &DMatrix<T>) -> Result<Self> {
        if mean.len() != deviations.nrows() {
            return Err(Error::dim(format!(
                "mean has length {}, deviations have {} rows",
                mean.len(),
                deviations.nrows()
            )));
        }
        let mut states = deviations.clone();
        for mut col in states.column_iter_mut() {
            col += mean;
        }
        Self::new(states)
    }

    pub fn states(&self) -> &DMatrix<T> {
        &self.states
    }

    pub fn into_states(self) -> DMatrix<T> {
        self.states
    }

    pub fn mean(&self) -> &DVector<T> {
        &self.mean
    }

    pub fn deviations(&self) -> &DMatrix<T> {
        &self.deviations
    }

    /// Number of members k.
    pub fn size(&self) -> usize {
        self.states.ncols()
    }

    /// State dimension q.
    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    /// Multiplies the deviations by `rho`, keeping the mean.
    pub fn inflate(&self, rho: T) -> Result<Self> {
        Self::from_parts(&self.mean, &(&self.deviations * rho))
    }

    /// Sample covariance `X^b X^bᵀ / (k−1)`.
    pub fn covariance(&self) -> DMatrix<T> {
        &self.deviations * self.deviations.transpose() / count::<T>(self.size() - 1)
    }

    /// Per-variable sample standard deviation.
    pub fn spread(&self) -> DVector<T> {
        let k1 = count::<T>(self.size() - 1);
        DVector::from_iterator(
            self.dim(),
            self.deviations
                .row_iter()
                .map(|r| (r.norm_squared() / k1).sqrt()),
        )
    }
}

/// Observations with diagonal error variances and per-member model equivalents.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsBatch<T: Real> {
    y: DVector<T>,
    r_diag: DVector<T>,
    equivalents: DMatrix<T>,
}

impl<T: Real> ObsBatch<T> {
    pub fn new(y: DVector<T>, r_diag: DVector<T>, equivalents: DMatrix<T>) -> Result<Self> {
        let d = y.len();
        if r_diag.len() != d || equivalents.nrows() != d {
            return Err(Error::dim(format!(
                "observation batch: y has {d} entries, r_diag {}, equivalents {} rows",
                r_diag.len(),
                equivalents.nrows()
            )));
        }
        if equivalents.ncols() < 2 {
            return Err(Error::invalid("equivalents need at least 2 member columns"));
        }
        if let Some(i) = r_diag.iter().position(|&r| !(r > T::zero())) {
            return Err(Error::invalid(format!(
                "observation error variance at {i} is not positive"
            )));
        }
        Ok(Self {
            y,
            r_diag,
            equivalents,
        })
    }

    /// A batch with no observations for an ensemble of `k` members.
    pub fn empty(k: usize) -> Self {
        Self {
            y: DVector::zeros(0),
            r_diag: DVector::zeros(0),
            equivalents: DMatrix::zeros(0, k),
        }
    }

    pub fn y(&self) -> &DVector<T> {
        &self.y
    }

    pub fn r_diag(&self) -> &DVector<T> {
        &self.r_diag
    }

    pub fn equivalents(&self) -> &DMatrix<T> {
        &self.equivalents
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn ensemble_size(&self) -> usize {
        self.equivalents.ncols()
    }

    /// Rows `indices` of the batch, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            y: self.y.select_rows(indices.iter()),
            r_diag: self.r_diag.select_rows(indices.iter()),
            equivalents: self.equivalents.select_rows(indices.iter()),
        }
    }
}

/// Sufficient statistics of one local analysis: the eigen-pairs of
/// `S = (HX^b)ᵀ R̃⁻¹ (HX^b)` and `c = (HX^b)ᵀ R̃⁻¹ (y − Hx̄^b)`, where `R̃⁻¹`
/// is the tapered inverse observation error variance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCache<T: Real> {
    pub spectrum: SymmetricSpectrum<T>,
    pub c: DVector<T>,
    pub k: usize,
}

impl<T: Real> SpectralCache<T> {
    /// Cache with `S = 0`, `c = 0`: the analysis is the identity.
    pub fn empty(k: usize) -> Self {
        Self {
            spectrum: SymmetricSpectrum {
                eigvecs: DMatrix::identity(k, k),
                eigvals: DVector::zeros(k),
            },
            c: DVector::zeros(k),
            k,
        }
    }

    pub fn s_matrix(&self) -> DMatrix<T> {
        self.spectrum.reconstruct()
    }

    pub fn eigvals(&self) -> &DVector<T> {
        &self.spectrum.eigvals
    }

    /// `U δ(f(λ)) Uᵀ`.
    pub fn apply_fn(&self, f: impl Fn(T) -> T) -> DMatrix<T> {
        self.spectrum.apply_fn(f)
    }

    /// `U δ(f(λ)) Uᵀ v`, without forming the k×k matrix.
    pub fn apply_fn_to(&self, f: impl Fn(T) -> T, v: &DVector<T>) -> DVector<T> {
        let u = &self.spectrum.eigvecs;
        let mut coeffs = u.tr_mul(v);
        for (c, &l) in coeffs.iter_mut().zip(self.spectrum.eigvals.iter()) {
            *c *= f(l);
        }
        u * coeffs
    }
}

/// Eigenvalues below this fraction of the largest are set to zero.
/// Eigenvalues below `ε (k−1)` are set to zero as well.
pub const EIGENVALUE_CLIP: f64 = 1e-12;

/// Builds the spectral cache from observations and per-observation taper
/// factors in `[0, 1]` multiplying `R⁻¹`.
pub fn build_cache<T: Real>(obs: &ObsBatch<T>, taper: &[T]) -> Result<SpectralCache<T>> {
    let k = obs.ensemble_size();
    if taper.len() != obs.len() {
        return Err(Error::dim(format!(
            "{} taper factors for {} observations",
            taper.len(),
            obs.len()
        )));
    }
    if let Some(i) = taper
        .iter()
        .position(|&t| !(t >= T::zero() && t <= T::one()))
    {
        return Err(Error::invalid(format!(
            "taper factor at {i} outside [0, 1]"
        )));
    }
    if obs.is_empty() {
        return Ok(SpectralCache::empty(k));
    }
    let eq = obs.equivalents();
    let eq_mean = eq.column_mean();
    let mut dev = eq.clone();
    for mut col in dev.column_iter_mut() {
        col -= &eq_mean;
    }
    let weights = DVector::from_iterator(
        obs.len(),
        taper.iter().zip(obs.r_diag().iter()).map(|(&t, &r)| t / r),
    );
    // δ(w) (HX^b), row-scaled.
    let mut weighted = dev.clone();
    for (mut row, &w) in weighted.row_iter_mut().zip(weights.iter()) {
        row *= w;
    }
    let s = dev.tr_mul(&weighted);
    let innovation = obs.y() - &eq_mean;
    let c = weighted.tr_mul(&innovation);
    let mut spectrum = linalg::sym_eig(&s)?;
    let lmax = spectrum.eigvals.max().max(T::zero());
    // Eigenvalues below ε (k−1) only ever enter as `k−1 + λ` and are rounding
    // noise (e.g. a collapsed ensemble); they are cleared too.
    let clip =
        (lit::<T>(EIGENVALUE_CLIP) * lmax).max(T::default_epsilon() * count::<T>(k.max(2) - 1));
    for l in spectrum.eigvals.iter_mut() {
        if *l < clip || *l <= T::zero() {
            *l = T::zero();
        }
    }
    Ok(SpectralCache { spectrum, c, k })
}

fn denom<T: Real>(lambda: T, gamma: T, k1: T) -> T {
    gamma * lambda * lambda + lit::<T>(2.0) * k1 * gamma * lambda + k1 * k1
}

/// Weight of eigen-direction `λ` in the component-mean transform.
pub fn f_mu<T: Real>(lambda: T, gamma: T, k: usize) -> T {
    let k1 = count::<T>(k - 1);
    (k1 * gamma * lambda + k1 * k1) / denom(lambda, gamma, k1)
}

/// Weight of eigen-direction `λ` in the mean-shift term `U δ(f(λ)) Uᵀ c 𝟙ᵀ`.
pub fn f_mubar<T: Real>(lambda: T, gamma: T, k: usize) -> T {
    let k1 = count::<T>(k - 1);
    (gamma + k1 * gamma * (T::one() - gamma) * lambda / denom(lambda, gamma, k1))
        / (k1 + gamma * lambda)
}

/// Eigenvalue of the ensemble-space component covariance `P̃^{a,γ}`.
pub fn f_gamma<T: Real>(lambda: T, gamma: T, k: usize) -> T {
    let k1 = count::<T>(k - 1);
    gamma * lambda / denom(lambda, gamma, k1)
}

/// Eigenvalue weight inside the particle-weight exponent.
pub fn f_alpha<T: Real>(lambda: T, gamma: T, k: usize) -> T {
    let k1 = count::<T>(k - 1);
    k1 * k1 * (T::one() - gamma) / denom(lambda, gamma, k1)
}

/// Closed-form deterministic perturbation weight at `γ = 1` (ETKF limit).
pub fn etkf_f_eps<T: Real>(lambda: T, k: usize) -> T {
    let k1 = count::<T>(k - 1);
    ((k1 * (k1 + lambda)).sqrt() - k1) / (k1 + lambda)
}

/// `W^μ = U δ(f^μ(λ)) Uᵀ + U δ(f^{μ̄}(λ)) Uᵀ c 𝟙ᵀ`.
///
/// At `γ = 0` this is exactly `I` (the particle filter keeps the members).
pub fn weight_mean_matrix<T: Real>(cache: &SpectralCache<T>, gamma: T) -> DMatrix<T> {
    let k = cache.k;
    if gamma == T::zero() {
        return DMatrix::identity(k, k);
    }
    let mut w = cache.apply_fn(|l| f_mu(l, gamma, k));
    let shift = cache.apply_fn_to(|l| f_mubar(l, gamma, k), &cache.c);
    for mut col in w.column_iter_mut() {
        col += &shift;
    }
    w
}

/// Particle-filter mixture weights `α^γ` on the simplex.
pub fn pf_weights<T: Real>(cache: &SpectralCache<T>, gamma: T) -> DVector<T> {
    let k = cache.k;
    let u = &cache.spectrum.eigvecs;
    let lam = &cache.spectrum.eigvals;
    let fa = lam.map(|l| f_alpha(l, gamma, k));
    let half = lit::<T>(0.5);
    let linear = cache.apply_fn_to(|l| f_alpha(l, gamma, k), &cache.c);
    let exponents = DVector::from_fn(k, |i, _| {
        let quad = (0..k).fold(T::zero(), |acc, j| {
            let uij = u[(i, j)];
            acc + uij * uij * lam[j] * fa[j]
        });
        linear[i] - half * quad
    });
    normalize_log_weights(&exponents)
}

/// Normalizes `exp(exponents)` to sum one after subtracting the maximum.
pub(crate) fn normalize_log_weights<T: Real>(exponents: &DVector<T>) -> DVector<T> {
    let k = exponents.len();
    let max = exponents
        .iter()
        .copied()
        .filter(|e| e.is_finite())
        .fold(None, |acc: Option<T>, e| Some(acc.map_or(e, |a| a.max(e))));
    let Some(max) = max else {
        log::warn!("all particle weight exponents are non-finite; using uniform weights");
        return DVector::from_element(k, T::one() / count::<T>(k));
    };
    let unnorm = exponents.map(|e| {
        if e.is_finite() {
            (e - max).exp()
        } else {
            T::zero()
        }
    });
    let total = unnorm.sum();
    unnorm / total
}

/// Ensemble-space component covariance `P̃^{a,γ} = U δ(f^γ(λ)) Uᵀ`.
pub fn analysis_cov_es<T: Real>(cache: &SpectralCache<T>, gamma: T) -> DMatrix<T> {
    let k = cache.k;
    symmetrize(&cache.apply_fn(|l| f_gamma(l, gamma, k)))
}

/// k×k standard normal draws with each row centered so that `E 𝟙 = 0`.
pub fn centered_normal_draws<T: Real, R: Rng + ?Sized>(k: usize, rng: &mut R) -> DMatrix<T> {
    let mut e = DMatrix::<T>::from_fn(k, k, |_, _| lit(rng.sample::<f64, _>(StandardNormal)));
    for mut row in e.row_iter_mut() {
        let m = row.mean();
        row.add_scalar_mut(-m);
    }
    e
}

/// Stochastic perturbation weights `W^ε = P̃^{1/2} E`.
///
/// With `E` holding row-centered standard normal draws, `X^b W^ε` has zero
/// ensemble mean and expected ensemble covariance `X^b P̃ X^bᵀ = P^{a,γ}`.
/// Round-off negative eigenvalues of `P̃` are clamped to zero.
pub fn stochastic_perturbations<T: Real>(
    p_tilde: &DMatrix<T>,
    e: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let k = p_tilde.nrows();
    if !p_tilde.is_square() || e.shape() != (k, k) {
        return Err(Error::dim(format!(
            "stochastic perturbations: P̃ is {:?}, E is {:?}",
            p_tilde.shape(),
            e.shape()
        )));
    }
    let row_sums = e.column_sum();
    let tol = lit::<T>(1e-10) * e.norm().max(T::one());
    if row_sums.amax() > tol {
        return Err(Error::invalid(format!(
            "noise matrix rows are not centered (max row sum {:e})",
            to_f64(row_sums.amax())
        )));
    }
    let root = linalg::sym_eig(p_tilde)?.apply_fn(|l| l.max(T::zero()).sqrt());
    Ok(root * e)
}

/// Columns of `W^μ` gathered by resample index: `W^μ W^α`.
pub fn gather_columns<T: Real>(w_mu: &DMatrix<T>, resample: &[usize]) -> DMatrix<T> {
    w_mu.select_columns(resample.iter())
}

/// Centered resampled mean transform `A = W^μ W^α (I − 𝟙𝟙ᵀ/k)`.
pub fn centered_transform<T: Real>(w_mu: &DMatrix<T>, resample: &[usize]) -> DMatrix<T> {
    let mut a = gather_columns(w_mu, resample);
    let row_mean = a.column_mean();
    for mut col in a.column_iter_mut() {
        col -= &row_mean;
    }
    a
}

/// Deterministic perturbation weights: the symmetric positive semidefinite
/// solution of `A W + W Aᵀ + W Wᵀ = (k−1) P̃`, which makes the analysis
/// covariance equal the resampled-means covariance plus `P^{a,γ}`.
pub fn deterministic_perturbations<T: Real>(
    w_mu: &DMatrix<T>,
    resample: &[usize],
    p_tilde: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    deterministic_perturbations_with(
        w_mu,
        resample,
        p_tilde,
        lit(linalg::CARE_DEFAULT_TOL),
        linalg::CARE_DEFAULT_MAX_ITER,
    )
}

pub fn deterministic_perturbations_with<T: Real>(
    w_mu: &DMatrix<T>,
    resample: &[usize],
    p_tilde: &DMatrix<T>,
    tol: T,
    max_iter: usize,
) -> Result<DMatrix<T>> {
    let k = w_mu.ncols();
    check_resample(resample, k)?;
    if p_tilde.shape() != (k, k) || w_mu.nrows() != k {
        return Err(Error::dim(format!(
            "deterministic perturbations: W^μ is {:?}, P̃ is {:?}",
            w_mu.shape(),
            p_tilde.shape()
        )));
    }
    let (problem, q) = perturbation_care(w_mu, resample, p_tilde)?;
    let x = solve_care(&problem, tol, max_iter)?.x;
    Ok(symmetrize(&(&q * x * q.transpose())))
}

/// The Riccati equation for `W^ε` in the coordinates of `𝟙^⊥`, with the
/// basis `Q` of [`ones_complement`]; `W^ε = Q X Qᵀ`.
///
/// `𝟙ᵀA = 0`, `A𝟙 = 0` and `C𝟙 = 0` hold exactly, so nothing is lost, and
/// `W^ε 𝟙 = 0` holds to rounding.
pub fn perturbation_care<T: Real>(
    w_mu: &DMatrix<T>,
    resample: &[usize],
    p_tilde: &DMatrix<T>,
) -> Result<(CareProblem<T>, DMatrix<T>)> {
    let k = w_mu.ncols();
    check_resample(resample, k)?;
    let q = ones_complement::<T>(k);
    let a = q.tr_mul(&centered_transform(w_mu, resample)) * &q;
    let c = q.tr_mul(&symmetrize(p_tilde)) * &q * count::<T>(k - 1);
    Ok((CareProblem::new(a, symmetrize(&c))?, q))
}

/// Orthonormal basis (k×(k−1)) of the complement of `𝟙`: the last `k−1`
/// columns of the Householder reflection swapping `e₁` and `𝟙/√k`.
pub fn ones_complement<T: Real>(k: usize) -> DMatrix<T> {
    let kf = count::<T>(k);
    let mut w = DVector::from_element(k, T::one() / kf.sqrt());
    w[0] -= T::one();
    let norm2 = w.norm_squared();
    let h = DMatrix::identity(k, k) - &w * w.transpose() * (lit::<T>(2.0) / norm2);
    h.columns(1, k - 1).into_owned()
}

fn check_resample(resample: &[usize], k: usize) -> Result<()> {
    if resample.len() != k {
        return Err(Error::dim(format!(
            "{} resample indices for {k} members",
            resample.len()
        )));
    }
    if let Some(&bad) = resample.iter().find(|&&i| i >= k) {
        return Err(Error::invalid(format!("resample index {bad} out of range")));
    }
    Ok(())
}

/// The pieces of one analysis transform.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<T: Real> {
    pub w_mu: DMatrix<T>,
    /// `I`: member `i` of the analysis descends from component `resample[i]`.
    pub resample: Vec<usize>,
    pub w_eps: DMatrix<T>,
    pub gamma: T,
}

impl<T: Real> WeightSet<T> {
    /// `W = W^μ W^α + W^ε`.
    pub fn transform(&self) -> DMatrix<T> {
        gather_columns(&self.w_mu, &self.resample) + &self.w_eps
    }

    /// Identity transform: analysis equals background.
    pub fn identity(k: usize) -> Self {
        Self {
            w_mu: DMatrix::identity(k, k),
            resample: (0..k).collect(),
            w_eps: DMatrix::zeros(k, k),
            gamma: T::one(),
        }
    }
}

/// `x̄^b 𝟙ᵀ + X^b W` for an explicit transform `W`.
pub fn apply_transform<T: Real>(ens: &Ensemble<T>, w: &DMatrix<T>) -> Result<Ensemble<T>> {
    let k = ens.size();
    if w.shape() != (k, k) {
        return Err(Error::dim(format!(
            "transform is {:?} for {k} members",
            w.shape()
        )));
    }
    let mut states = ens.deviations() * w;
    for mut col in states.column_iter_mut() {
        col += ens.mean();
    }
    Ensemble::new(states)
}

/// Analysis ensemble `x̄^b 𝟙ᵀ + X^b (W^μ W^α + W^ε)`.
///
/// When `W^ε = 0` and `W^μ = I` the analysis members are exact copies of the
/// resampled background members.
pub fn assemble_and_apply<T: Real>(ens: &Ensemble<T>, ws: &WeightSet<T>) -> Result<Ensemble<T>> {
    let k = ens.size();
    check_resample(&ws.resample, k)?;
    if ws.w_mu.shape() != (k, k) || ws.w_eps.shape() != (k, k) {
        return Err(Error::dim("weight set does not match ensemble size"));
    }
    let is_pure_resample =
        ws.w_eps.iter().all(|v| *v == T::zero()) && ws.w_mu == DMatrix::<T>::identity(k, k);
    if is_pure_resample {
        return Ensemble::new(ens.states().select_columns(ws.resample.iter()));
    }
    apply_transform(ens, &ws.transform())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_cache(members: &[f64], y: f64, r: f64) -> SpectralCache<f64> {
        let k = members.len();
        let obs = ObsBatch::new(
            DVector::from_element(1, y),
            DVector::from_element(1, r),
            DMatrix::from_row_slice(1, k, members),
        )
        .unwrap();
        build_cache(&obs, &[1.0]).unwrap()
    }

    #[test]
    fn ones_complement_is_orthonormal() {
        for k in [2, 3, 7, 40] {
            let q = ones_complement::<f64>(k);
            assert_eq!(q.shape(), (k, k - 1));
            assert!((q.tr_mul(&q) - DMatrix::identity(k - 1, k - 1)).amax() < 1e-14);
            assert!(q.tr_mul(&DVector::from_element(k, 1.0)).amax() < 1e-14);
        }
    }

    #[test]
    fn ensemble_requires_two_members() {
        assert!(Ensemble::new(DMatrix::<f64>::zeros(3, 1)).is_err());
        let e = Ensemble::new(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 6.0])).unwrap();
        assert_eq!(e.mean()[0], 3.0);
        assert!(e.deviations().column_sum().amax() < 1e-15);
    }

    #[test]
    fn obs_batch_validates_variances() {
        let bad = ObsBatch::new(
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 0.0),
            DMatrix::zeros(1, 3),
        );
        assert!(bad.is_err());
    }

    #[test]
    fn cache_scalar_rank_one() {
        let cache = scalar_cache(&[-1.0, 0.0, 1.0], 0.0, 1.0);
        let l = cache.eigvals();
        assert!((l[0] - 2.0).abs() < 1e-14);
        assert_eq!((l[1], l[2]), (0.0, 0.0));
        // S 𝟙 = 0
        assert!((cache.s_matrix() * DVector::from_element(3, 1.0)).amax() < 1e-14);
    }

    #[test]
    fn cache_fully_tapered_vanishes() {
        let obs = ObsBatch::new(
            DVector::from_vec(vec![3.0, -1.0]),
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 2.0, 5.0, -1.0, 0.5]),
        )
        .unwrap();
        let cache = build_cache(&obs, &[0.0, 0.0]).unwrap();
        assert!(cache.s_matrix().amax() == 0.0);
        assert!(cache.c.amax() == 0.0);
    }

    #[test]
    fn cache_zero_innovation() {
        let cache = scalar_cache(&[-1.0, 0.5, 3.5], 1.0, 0.7);
        assert!(cache.c.amax() < 1e-15);
    }

    #[test]
    fn cache_empty_batch() {
        let cache = build_cache(&ObsBatch::<f64>::empty(4), &[]).unwrap();
        assert_eq!(cache.k, 4);
        assert_eq!(weight_mean_matrix(&cache, 0.3), DMatrix::identity(4, 4));
    }

    #[test]
    fn cache_rejects_bad_taper() {
        let obs = ObsBatch::new(
            DVector::from_element(1, 0.0),
            DVector::from_element(1, 1.0),
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
        )
        .unwrap();
        assert!(build_cache(&obs, &[1.5]).is_err());
        assert!(build_cache(&obs, &[]).is_err());
    }

    #[test]
    fn rational_function_values() {
        assert!((f_mu(2.0f64, 1.0, 3) - 0.5).abs() < 1e-15);
        for &g in &[0.0, 0.3, 1.0] {
            for k in 2..6 {
                assert_eq!(f_mu(0.0, g, k), 1.0);
                assert_eq!(f_gamma(0.0, g, k), 0.0);
            }
        }
        for &l in &[0.0, 0.5, 10.0, 1e6] {
            assert_eq!(f_alpha(l, 1.0, 7), 0.0);
            // γ = 0: f^μ = f^α = 1, f^μ̄ = f^γ = 0
            assert_eq!(f_mu(l, 0.0, 7), 1.0);
            assert_eq!(f_alpha(l, 0.0, 7), 1.0);
            assert_eq!(f_mubar(l, 0.0, 7), 0.0);
            assert_eq!(f_gamma(l, 0.0, 7), 0.0);
        }
        // γ = 1 simplifications
        for &l in &[0.3, 2.0, 40.0] {
            let k1: f64 = 5.0;
            assert!((f_mu(l, 1.0, 6) - k1 / (k1 + l)).abs() < 1e-15);
            assert!((f_gamma(l, 1.0, 6) - l / (k1 + l).powi(2)).abs() < 1e-15);
            assert!((f_mubar(l, 1.0, 6) - 1.0 / (k1 + l)).abs() < 1e-15);
            let fe = etkf_f_eps(l, 6);
            let lhs = 2.0 * fe * f_mu(l, 1.0, 6) + fe * fe;
            assert!((lhs - k1 * f_gamma(l, 1.0, 6)).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_mean_identity_without_information() {
        let cache = SpectralCache::<f64>::empty(5);
        assert_eq!(weight_mean_matrix(&cache, 0.5), DMatrix::identity(5, 5));
    }

    #[test]
    fn weight_mean_etkf_form_at_gamma_one() {
        let cache = scalar_cache(&[-1.0, 0.0, 1.0], 0.0, 1.0);
        let w = weight_mean_matrix(&cache, 1.0);
        let expected = cache.apply_fn(|l| 2.0 / (2.0 + l));
        assert!((w - expected).amax() < 1e-15);
    }

    #[test]
    fn weight_mean_columns_sum_to_one() {
        let cache = scalar_cache(&[-1.0, 0.3, 2.0, 4.0], 1.7, 0.5);
        for &g in &[0.0, 0.2, 0.7, 1.0] {
            let w = weight_mean_matrix(&cache, g);
            let sums = w.row_sum();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn pf_weights_limits() {
        let cache = scalar_cache(&[0.0, 2.0], 0.0, 1.0);
        let a = pf_weights(&cache, 0.0);
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((a[0] - expected).abs() < 1e-14);
        assert!((a[0] - 0.8808).abs() < 1e-4);
        let u = pf_weights(&cache, 1.0);
        assert!(u.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let none = pf_weights(&SpectralCache::<f64>::empty(4), 0.0);
        assert!(none.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn pf_weights_do_not_overflow() {
        let cache = scalar_cache(&[0.0, 1e4, 2e4], 0.0, 1e-4);
        let a = pf_weights(&cache, 0.0);
        assert!(a.iter().all(|v| v.is_finite()));
        assert!((a.sum() - 1.0).abs() < 1e-14);
        assert_eq!(a[0], 1.0);
    }

    #[test]
    fn normalize_non_finite_falls_back_to_uniform() {
        let e = DVector::from_element(3, f64::NEG_INFINITY);
        assert!(normalize_log_weights(&e).iter().all(|&v| v == 1.0 / 3.0));
    }

    #[test]
    fn analysis_cov_limits() {
        let cache = scalar_cache(&[-1.0, 0.0, 1.0], 0.0, 1.0);
        assert_eq!(analysis_cov_es(&cache, 0.0).amax(), 0.0);
        let p = analysis_cov_es(&cache, 1.0);
        let top = linalg::sym_eig(&p).unwrap().eigvals[0];
        assert!((top - 0.125).abs() < 1e-15);
        let ones = DVector::from_element(3, 1.0);
        assert!((ones.transpose() * &p * &ones)[0].abs() < 1e-14);
        assert_eq!(
            analysis_cov_es(&SpectralCache::<f64>::empty(3), 0.5).amax(),
            0.0
        );
    }

    #[test]
    fn stochastic_perturbations_trivial() {
        let k = 4;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let e: DMatrix<f64> = centered_normal_draws(k, &mut rng);
        assert!(e.column_sum().amax() < 1e-14);
        let zero = stochastic_perturbations(&DMatrix::zeros(k, k), &e).unwrap();
        assert_eq!(zero.amax(), 0.0);
        let cache = scalar_cache(&[-1.0, 0.0, 1.0, 3.0], 0.0, 1.0);
        let p = analysis_cov_es(&cache, 0.5);
        let z = stochastic_perturbations(&p, &DMatrix::zeros(k, k)).unwrap();
        assert_eq!(z.amax(), 0.0);
        let w = stochastic_perturbations(&p, &e).unwrap();
        assert!(w.column_sum().amax() < 1e-13);
    }

    #[test]
    fn stochastic_perturbations_reject_uncentered_noise() {
        let e = DMatrix::from_element(3, 3, 1.0);
        assert!(stochastic_perturbations(&DMatrix::<f64>::identity(3, 3), &e).is_err());
    }

    #[test]
    fn deterministic_perturbations_limits() {
        let cache = scalar_cache(&[-1.0, 0.0, 1.0, 2.5], 0.4, 0.8);
        let k = 4;
        let idx: Vec<usize> = (0..k).collect();
        let w_mu = weight_mean_matrix(&cache, 1.0);
        let w_eps =
            deterministic_perturbations(&w_mu, &idx, &analysis_cov_es(&cache, 1.0)).unwrap();
        let expected = cache.apply_fn(|l| etkf_f_eps(l, k));
        assert!((&w_eps - expected).amax() < 1e-12);
        let w_mu0 = weight_mean_matrix(&cache, 0.0);
        let w0 = deterministic_perturbations(&w_mu0, &[0, 0, 1, 3], &analysis_cov_es(&cache, 0.0))
            .unwrap();
        assert_eq!(w0.amax(), 0.0);
    }

    #[test]
    fn identity_weight_set_returns_background() {
        let ens = Ensemble::new(DMatrix::from_row_slice(
            2,
            3,
            &[1.0, 2.0, 4.0, 0.0, -1.0, 3.0],
        ))
        .unwrap();
        let out = assemble_and_apply(&ens, &WeightSet::identity(3)).unwrap();
        assert_eq!(out.states(), ens.states());
    }

    #[test]
    fn pure_resample_copies_members() {
        let ens = Ensemble::new(DMatrix::from_row_slice(
            2,
            3,
            &[1.1, 2.3, 4.7, 0.1, -1.9, 3.3],
        ))
        .unwrap();
        let ws = WeightSet {
            w_mu: DMatrix::identity(3, 3),
            resample: vec![2, 2, 0],
            w_eps: DMatrix::zeros(3, 3),
            gamma: 0.0,
        };
        let out = assemble_and_apply(&ens, &ws).unwrap();
        assert_eq!(out.states().column(0), ens.states().column(2));
        assert_eq!(out.states().column(1), ens.states().column(2));
        assert_eq!(out.states().column(2), ens.states().column(0));
    }
}
