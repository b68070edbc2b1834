//! Dense state-space evaluation of the two-stage Gaussian mixture analysis.
//!
//! This is the reference the ensemble-space formulas are checked against. It
//! forms q×q and d×d matrices explicitly, so it is restricted to small
//! problems and is meant for tests and diagnostics only.

use nalgebra::{DMatrix, DVector};

use super::Ensemble;
use crate::error::{Error, Result};
use crate::scalar::{count, lit, Real};

/// Largest state or observation dimension the oracle accepts.
pub const ORACLE_MAX_DIM: usize = 200;

/// Parameters of the analysis mixture `Σ α_i N(μ_i, P^{a,γ})`.
#[derive(Debug, Clone)]
pub struct MixtureParams<T: Real> {
    /// q×k EnKF-stage means `ν^{γ,i}`.
    pub nu: DMatrix<T>,
    /// q×q EnKF-stage spread `Q`.
    pub q_mat: DMatrix<T>,
    /// q×k component means `μ^{γ,i}`.
    pub mu: DMatrix<T>,
    /// q×q component covariance `P^{a,γ}`.
    pub p_a: DMatrix<T>,
    pub alpha: DVector<T>,
    /// q×d composite gain `L^γ` with `μ^{γ,i} = x^{b,i} + L^γ (y − H x^{b,i})`.
    pub gain: DMatrix<T>,
}

/// `K(P) = P Hᵀ (H P Hᵀ + R)⁻¹`.
pub fn kalman_gain<T: Real>(p: &DMatrix<T>, h: &DMatrix<T>, r: &DMatrix<T>) -> Result<DMatrix<T>> {
    let ph = p * h.transpose();
    let innov_cov = h * &ph + r;
    let chol = innov_cov
        .cholesky()
        .ok_or_else(|| Error::invalid("innovation covariance is not positive definite"))?;
    // K = P Hᵀ M⁻¹  ⇔  M Kᵀ = H P
    Ok(chol.solve(&ph.transpose()).transpose())
}

/// Evaluates the mixture analysis directly in state space for a linear
/// observation operator `h` (d×q) with diagonal error variances `r_diag`.
pub fn oracle_mixture<T: Real>(
    ens: &Ensemble<T>,
    h: &DMatrix<T>,
    y: &DVector<T>,
    r_diag: &DVector<T>,
    gamma: T,
) -> Result<MixtureParams<T>> {
    let (q, k, d) = (ens.dim(), ens.size(), y.len());
    if q > ORACLE_MAX_DIM || d > ORACLE_MAX_DIM {
        return Err(Error::invalid(format!(
            "oracle limited to dimensions ≤ {ORACLE_MAX_DIM} (q={q}, d={d})"
        )));
    }
    if h.shape() != (d, q) || r_diag.len() != d {
        return Err(Error::dim(format!(
            "oracle: H is {:?}, y has {d}, r_diag has {}",
            h.shape(),
            r_diag.len()
        )));
    }
    if !(gamma >= T::zero() && gamma <= T::one()) {
        return Err(Error::invalid("gamma must lie in [0, 1]"));
    }
    let r = DMatrix::from_diagonal(r_diag);
    let xb = ens.states();
    let p_b = ens.covariance();

    // EnKF stage with the dampened likelihood.
    let k1 = kalman_gain(&(&p_b * gamma), h, &r)?;
    let mut nu = xb.clone();
    for (mut col, xcol) in nu.column_iter_mut().zip(xb.column_iter()) {
        col += &k1 * (y - h * xcol);
    }
    // Q = K(γP) R K(γP)ᵀ / γ, written without the division so that γ = 0 gives Q = 0.
    let m = h * &p_b * h.transpose() * gamma + &r;
    let m_inv = m
        .cholesky()
        .ok_or_else(|| Error::invalid("innovation covariance is not positive definite"))?
        .inverse();
    let php = &p_b * h.transpose();
    let q_mat = &php * &m_inv * &r * &m_inv * php.transpose() * gamma;
    let q_mat = (&q_mat + q_mat.transpose()) * lit::<T>(0.5);

    // Particle filter stage on the remaining likelihood.
    let one_minus = T::one() - gamma;
    let k2 = kalman_gain(&(&q_mat * one_minus), h, &r)?;
    let mut mu = nu.clone();
    for (mut col, ncol) in mu.column_iter_mut().zip(nu.column_iter()) {
        col += &k2 * (y - h * ncol);
    }
    let p_a = (DMatrix::identity(q, q) - &k2 * h) * &q_mat;
    let p_a = (&p_a + p_a.transpose()) * lit::<T>(0.5);

    let alpha = if one_minus == T::zero() {
        DVector::from_element(k, T::one() / count::<T>(k))
    } else {
        let sigma = h * &q_mat * h.transpose() + &r / one_minus;
        let chol = sigma
            .cholesky()
            .ok_or_else(|| Error::invalid("predictive covariance is not positive definite"))?;
        let exponents = DVector::from_iterator(
            k,
            nu.column_iter().map(|ncol| {
                let resid = y - h * ncol;
                let z = chol.solve(&resid);
                -lit::<T>(0.5) * resid.dot(&z)
            }),
        );
        super::normalize_log_weights(&exponents)
    };

    let gain = &k1 + &k2 * (DMatrix::identity(d, d) - h * &k1);
    Ok(MixtureParams {
        nu,
        q_mat,
        mu,
        p_a,
        alpha,
        gain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_textbook_gain() {
        let k = kalman_gain(
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((k[(0, 0)] - 0.5f64).abs() < 1e-15);
    }

    fn scalar_case() -> (Ensemble<f64>, DMatrix<f64>, DVector<f64>, DVector<f64>) {
        // members (−1, 0, 1): P^b = 1
        let ens = Ensemble::new(DMatrix::from_row_slice(1, 3, &[-1.0, 0.0, 1.0])).unwrap();
        (
            ens,
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 0.7),
            DVector::from_element(1, 1.0),
        )
    }

    #[test]
    fn enkf_limit() {
        let (ens, h, y, r) = scalar_case();
        let m = oracle_mixture(&ens, &h, &y, &r, 1.0).unwrap();
        assert!(m.alpha.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
        for i in 0..3 {
            let x = ens.states()[(0, i)];
            assert!((m.mu[(0, i)] - (x + 0.5 * (0.7 - x))).abs() < 1e-14);
        }
        // P^{a,1} = K R Kᵀ = 0.25
        assert!((m.p_a[(0, 0)] - 0.25).abs() < 1e-14);
    }

    #[test]
    fn pf_limit() {
        let (ens, h, y, r) = scalar_case();
        let m = oracle_mixture(&ens, &h, &y, &r, 0.0).unwrap();
        assert_eq!(&m.mu, ens.states());
        assert_eq!(m.p_a.amax(), 0.0);
        let lik: Vec<f64> = [-1.0f64, 0.0, 1.0]
            .iter()
            .map(|x| (-0.5 * (0.7 - x).powi(2)).exp())
            .collect();
        let total: f64 = lik.iter().sum();
        for (a, l) in m.alpha.iter().zip(&lik) {
            assert!((a - l / total).abs() < 1e-14);
        }
    }

    #[test]
    fn composite_gain_reproduces_means() {
        let (ens, h, y, r) = scalar_case();
        let m = oracle_mixture(&ens, &h, &y, &r, 0.4).unwrap();
        for i in 0..3 {
            let x = ens.states().column(i);
            let via_gain = x + &m.gain * (&y - &h * x);
            assert!((via_gain - m.mu.column(i)).amax() < 1e-14);
        }
    }

    #[test]
    fn rejects_large_problems() {
        let ens = Ensemble::new(DMatrix::<f64>::zeros(201, 2)).unwrap();
        let h = DMatrix::zeros(1, 201);
        let err = oracle_mixture(
            &ens,
            &h,
            &DVector::zeros(1),
            &DVector::from_element(1, 1.0),
            0.5,
        );
        assert!(err.is_err());
    }
}
