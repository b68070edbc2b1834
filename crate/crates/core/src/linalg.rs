//! Small dense kernels on k×k matrices: symmetric eigendecomposition,
//! Bartels–Stewart Lyapunov solves and the Newton iteration for the
//! continuous algebraic Riccati equation `A X + X Aᵀ + X Xᵀ = C`.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::{count, lit, to_f64, Real};

/// Eigen-pairs of a symmetric matrix, eigenvalues sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricSpectrum<T: Real> {
    /// Orthogonal matrix whose columns are eigenvectors.
    pub eigvecs: DMatrix<T>,
    pub eigvals: DVector<T>,
}

impl<T: Real> SymmetricSpectrum<T> {
    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    /// `U δ(f(λ)) Uᵀ`.
    pub fn apply_fn(&self, f: impl Fn(T) -> T) -> DMatrix<T> {
        let scaled = self.eigvals.map(f);
        let mut left = self.eigvecs.clone();
        for (mut col, s) in left.column_iter_mut().zip(scaled.iter()) {
            col *= *s;
        }
        left * self.eigvecs.transpose()
    }

    pub fn reconstruct(&self) -> DMatrix<T> {
        self.apply_fn(|l| l)
    }
}

pub(crate) fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * lit::<T>(0.5)
}

fn max_abs<T: Real>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
}

/// Decomposes the symmetric part `(m + mᵀ)/2` of `m`.
pub fn sym_eig<T: Real>(m: &DMatrix<T>) -> Result<SymmetricSpectrum<T>> {
    if !m.is_square() {
        return Err(Error::dim(format!(
            "sym_eig expects a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(SymmetricSpectrum {
            eigvecs: DMatrix::zeros(0, 0),
            eigvals: DVector::zeros(0),
        });
    }
    let sym = symmetrize(m);
    let eig =
        SymmetricEigen::try_new(sym.clone(), T::default_epsilon(), 1000 * n).ok_or_else(|| {
            let diag = sym.diagonal();
            Error::EigenNonConvergence {
                dim: n,
                norm: to_f64(sym.norm()),
                diag_min: to_f64(diag.min()),
                diag_max: to_f64(diag.max()),
            }
        })?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let eigvals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let eigvecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SymmetricSpectrum { eigvecs, eigvals })
}

/// Diagonal blocks (start, size) of a real quasi-upper-triangular Schur factor.
fn schur_blocks<T: Real>(t: &DMatrix<T>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let eps = T::default_epsilon();
    let mut blocks = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        if i + 1 < n {
            let sub = t[(i + 1, i)].abs();
            let scale = t[(i, i)].abs() + t[(i + 1, i + 1)].abs();
            if sub > eps * scale && sub > T::zero() {
                blocks.push((i, 2));
                i += 2;
                continue;
            }
        }
        blocks.push((i, 1));
        i += 1;
    }
    blocks
}

/// Eigenvalues (re, im) of a 1×1 or 2×2 diagonal block.
fn block_eigs<T: Real>(t: &DMatrix<T>, start: usize, size: usize) -> Vec<(f64, f64)> {
    if size == 1 {
        return vec![(to_f64(t[(start, start)]), 0.0)];
    }
    let a = to_f64(t[(start, start)]);
    let b = to_f64(t[(start, start + 1)]);
    let c = to_f64(t[(start + 1, start)]);
    let d = to_f64(t[(start + 1, start + 1)]);
    let half_tr = 0.5 * (a + d);
    let disc = 0.25 * (a - d) * (a - d) + b * c;
    if disc >= 0.0 {
        let s = disc.sqrt();
        vec![(half_tr + s, 0.0), (half_tr - s, 0.0)]
    } else {
        let s = (-disc).sqrt();
        vec![(half_tr, s), (half_tr, -s)]
    }
}

/// Solves `T_ii Z + Z T_jjᵀ = R` by vectorization; used for 1×1 and 2×2
/// Schur blocks.
fn solve_block_sylvester<T: Real>(
    tii: &DMatrix<T>,
    tjj: &DMatrix<T>,
    rhs: &DMatrix<T>,
) -> Option<DMatrix<T>> {
    let (si, sj) = (tii.nrows(), tjj.nrows());
    if si == 1 && sj == 1 {
        let denom = tii[(0, 0)] + tjj[(0, 0)];
        if denom == T::zero() {
            return None;
        }
        return Some(DMatrix::from_element(1, 1, rhs[(0, 0)] / denom));
    }
    // Column-major vec: (I ⊗ T_ii + T_jj ⊗ I) vec(Z) = vec(R).
    let m = si * sj;
    let mut sys = DMatrix::<T>::zeros(m, m);
    for q in 0..sj {
        for p in 0..si {
            let row = q * si + p;
            for pp in 0..si {
                sys[(row, q * si + pp)] += tii[(p, pp)];
            }
            for qq in 0..sj {
                sys[(row, qq * si + p)] += tjj[(q, qq)];
            }
        }
    }
    let b = DVector::from_iterator(m, rhs.iter().copied());
    let sol = sys.lu().solve(&b)?;
    Some(DMatrix::from_column_slice(si, sj, sol.as_slice()))
}

/// Largest dimension solved by the dense Kronecker fallback.
const KRONECKER_MAX_DIM: usize = 24;

/// Real Schur form. The QR iteration frequently stalls at a deflation
/// threshold of exactly machine precision, so it starts at `100 ε` and
/// loosens further before giving up.
fn real_schur<T: Real>(f: &DMatrix<T>) -> Option<Schur<T, nalgebra::Dyn>> {
    let n = f.nrows();
    [1e2, 1e4, 1e6].iter().find_map(|&scale| {
        Schur::try_new(f.clone(), T::default_epsilon() * lit(scale), 100 * n + 100)
    })
}

/// `(I ⊗ F + F ⊗ I) vec X = vec G` by dense LU.
fn solve_lyapunov_kronecker<T: Real>(f: &DMatrix<T>, g: &DMatrix<T>) -> Result<DMatrix<T>> {
    let x = solve_block_sylvester(f, f, g).ok_or(Error::SingularLyapunov {
        sum: 0.0,
        i: 0,
        j: 0,
    })?;
    Ok(if g == &g.transpose() {
        symmetrize(&x)
    } else {
        x
    })
}

/// Solves the Lyapunov equation `F X + X Fᵀ = G` by the Bartels–Stewart method.
///
/// The equation is singular when two eigenvalues of `F` sum to zero; that case
/// is reported with the offending sum.
pub fn solve_lyapunov<T: Real>(f: &DMatrix<T>, g: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = f.nrows();
    if !f.is_square() || g.shape() != (n, n) {
        return Err(Error::dim(format!(
            "lyapunov: F is {:?}, G is {:?}",
            f.shape(),
            g.shape()
        )));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let f_norm = f.norm();
    let Some(schur) = real_schur(f) else {
        if n <= KRONECKER_MAX_DIM {
            return solve_lyapunov_kronecker(f, g);
        }
        return Err(Error::SchurNonConvergence {
            dim: n,
            norm: to_f64(f_norm),
        });
    };
    let (q, t) = schur.unpack();
    let blocks = schur_blocks(&t);
    let eigs: Vec<_> = blocks.iter().map(|&(s, z)| block_eigs(&t, s, z)).collect();
    let singular_tol = 1e3 * f64::EPSILON * to_f64(f_norm).max(f64::MIN_POSITIVE);
    for (bi, ei) in eigs.iter().enumerate() {
        for (bj, ej) in eigs.iter().enumerate() {
            for &(ar, ai) in ei {
                for &(br, bim) in ej {
                    let sum = ((ar + br).powi(2) + (ai + bim).powi(2)).sqrt();
                    if sum <= singular_tol {
                        return Err(Error::SingularLyapunov {
                            sum: ar + br,
                            i: blocks[bi].0,
                            j: blocks[bj].0,
                        });
                    }
                }
            }
        }
    }

    let gt = q.transpose() * g * &q;
    let mut y = DMatrix::<T>::zeros(n, n);
    for &(j0, sj) in blocks.iter().rev() {
        for &(i0, si) in blocks.iter().rev() {
            let (i_end, j_end) = (i0 + si, j0 + sj);
            let mut rhs = gt.view((i0, j0), (si, sj)).clone_owned();
            if i_end < n {
                rhs -= t.view((i0, i_end), (si, n - i_end)) * y.view((i_end, j0), (n - i_end, sj));
            }
            if j_end < n {
                rhs -= y.view((i0, j_end), (si, n - j_end))
                    * t.view((j0, j_end), (sj, n - j_end)).transpose();
            }
            let tii = t.view((i0, i0), (si, si)).clone_owned();
            let tjj = t.view((j0, j0), (sj, sj)).clone_owned();
            let z = solve_block_sylvester(&tii, &tjj, &rhs).ok_or(Error::SingularLyapunov {
                sum: to_f64(tii.trace() / count(si) + tjj.trace() / count(sj)),
                i: i0,
                j: j0,
            })?;
            y.view_mut((i0, j0), (si, sj)).copy_from(&z);
        }
    }
    let x = &q * y * q.transpose();
    let g_asym = max_abs(&(g - g.transpose()));
    if g_asym <= lit::<T>(1e-14) * max_abs(g) {
        Ok(symmetrize(&x))
    } else {
        Ok(x)
    }
}

/// `A X + X Aᵀ + X Xᵀ = C` with `C` symmetric positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct CareProblem<T: Real> {
    pub a: DMatrix<T>,
    pub c: DMatrix<T>,
}

impl<T: Real> CareProblem<T> {
    pub fn new(a: DMatrix<T>, c: DMatrix<T>) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || c.shape() != (n, n) {
            return Err(Error::dim(format!(
                "CARE: A is {:?}, C is {:?}",
                a.shape(),
                c.shape()
            )));
        }
        let c_norm = c.norm();
        let asym = (&c - c.transpose()).norm();
        if asym > lit::<T>(1e-12) * c_norm.max(T::one()) {
            return Err(Error::invalid(format!(
                "CARE: C is not symmetric (asymmetry {:e})",
                to_f64(asym)
            )));
        }
        if n > 0 && c_norm > T::zero() {
            let min_eig = sym_eig(&c)?.eigvals.min();
            if min_eig < -lit::<T>(1e-10) * c_norm {
                return Err(Error::invalid(format!(
                    "CARE: C is not positive semidefinite (min eigenvalue {:e})",
                    to_f64(min_eig)
                )));
            }
        }
        Ok(Self { a, c })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn residual(&self, x: &DMatrix<T>) -> DMatrix<T> {
        &self.a * x + x * self.a.transpose() + x * x.transpose() - &self.c
    }
}

#[derive(Debug, Clone)]
pub struct CareSolution<T: Real> {
    pub x: DMatrix<T>,
    /// Newton steps taken; zero when the solution was found without iterating.
    pub iterations: usize,
    /// `‖A X + X Aᵀ + X Xᵀ − C‖_F`.
    pub residual: T,
    /// Relative residual `‖F X + X Fᵀ − G‖_F / ‖G‖_F` of every inner Lyapunov solve.
    pub lyapunov_residuals: Vec<T>,
}

pub const CARE_DEFAULT_TOL: f64 = 1e-10;
pub const CARE_DEFAULT_MAX_ITER: usize = 50;

/// Orthonormal basis of the subspace carrying the nonzero part of the solution.
///
/// A direction `z` with `zᵀA = 0` and `C z = 0` forces `X z = 0` for every
/// symmetric solution; Newton converges only linearly there, so such
/// directions are projected out (repeatedly, since the reduced problem can
/// expose new ones). For ensemble problems this always removes `𝟙`.
fn retained_subspace<T: Real>(a: &DMatrix<T>, c: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = a.nrows();
    let a_tol = lit::<T>(1e-11) * a.norm();
    let c_tol = lit::<T>(1e-12) * c.norm();
    let mut basis = DMatrix::<T>::identity(n, n);
    while basis.ncols() > 0 {
        let r = basis.ncols();
        let a_r = basis.transpose() * a * &basis;
        let c_r = symmetrize(&(basis.transpose() * c * &basis));
        // Left null vectors of A_r are null eigenvectors of A_r A_rᵀ. Those
        // eigenvalues are only accurate to about ε‖A‖², so screen loosely
        // and then check each candidate against A_r itself.
        let gram = sym_eig(&(&a_r * a_r.transpose()))?;
        let screen = lit::<T>(1e-6) * a.norm();
        let null_cols: Vec<usize> = (0..r)
            .filter(|&i| {
                gram.eigvals[i] <= screen * screen
                    && gram.eigvecs.column(i).tr_mul(&a_r).norm() <= a_tol
            })
            .collect();
        if null_cols.is_empty() {
            break;
        }
        let z0 = gram.eigvecs.select_columns(null_cols.iter());
        let inner = sym_eig(&(z0.transpose() * &c_r * &z0))?;
        let c_null: Vec<usize> = (0..inner.dim())
            .filter(|&i| inner.eigvals[i] <= c_tol)
            .collect();
        if c_null.is_empty() {
            break;
        }
        let nvec = &z0 * inner.eigvecs.select_columns(c_null.iter());
        let projector = DMatrix::<T>::identity(r, r) - &nvec * nvec.transpose();
        let proj = sym_eig(&projector)?;
        let keep: Vec<usize> = (0..r).filter(|&i| proj.eigvals[i] > lit(0.5)).collect();
        basis = &basis * proj.eigvecs.select_columns(keep.iter());
    }
    Ok(basis)
}

/// Exact solution `(A_s² + C)^{1/2} − A_s` for the symmetric part `A_s` of
/// `A`, shifted slightly so that `A + X₀` is safely anti-stable: the
/// symmetric part of `A + X₀` is then positive definite.
fn initial_guess<T: Real>(a: &DMatrix<T>, c: &DMatrix<T>, beta: T) -> Result<DMatrix<T>> {
    let n = a.nrows();
    let a_s = symmetrize(a);
    let root = sym_eig(&(&a_s * &a_s + c))?.apply_fn(|l| l.max(T::zero()).sqrt());
    Ok(symmetrize(&(root - a_s)) + DMatrix::identity(n, n) * (beta * lit(1e-6)))
}

/// Step length `t ∈ (0, 2]` minimizing `‖R(X + tN)‖_F`, where the Newton
/// direction `N` gives `R(X + tN) = (1 − t) R(X) + t² N²`.
///
/// Far from the solution full steps can overshoot and Newton then creeps back
/// at a halving rate; near it `t → 1` and convergence stays quadratic.
fn line_search<T: Real>(r: &DMatrix<T>, n: &DMatrix<T>) -> T {
    let v = n * n;
    let (al, be, de) = (r.norm_squared(), r.dot(&v), v.norm_squared());
    let two = lit::<T>(2.0);
    let f = |t: T| {
        let s = T::one() - t;
        al * s * s + two * be * s * t * t + de * t * t * t * t
    };
    let (mut best, mut f_best) = (T::one(), f(T::one()));
    for i in 1..=200 {
        let t = lit::<T>(i as f64 / 100.0);
        if f(t) < f_best {
            (best, f_best) = (t, f(t));
        }
    }
    // Polish the grid minimum with Newton steps on f'.
    for _ in 0..3 {
        let t = best;
        let d1 = two * de * t * t * t - lit::<T>(3.0) * be * t * t + (al + two * be) * t - al;
        let d2 = lit::<T>(6.0) * de * t * t - lit::<T>(6.0) * be * t + al + two * be;
        if d2 <= T::zero() {
            break;
        }
        let t_new = (t - d1 / d2).max(lit(1e-3)).min(two);
        if f(t_new) >= f_best {
            break;
        }
        (best, f_best) = (t_new, f(t_new));
    }
    best
}

/// Newton iteration for the symmetric positive semidefinite CARE solution.
///
/// Starts from [`initial_guess`] and solves one Lyapunov
/// equation per step. Stops once both the relative residual and the relative
/// step fall below `tol`.
pub fn solve_care<T: Real>(p: &CareProblem<T>, tol: T, max_iter: usize) -> Result<CareSolution<T>> {
    if tol <= T::zero() {
        return Err(Error::invalid("CARE tolerance must be positive"));
    }
    let n = p.dim();
    let c_norm = p.c.norm();
    if c_norm == T::zero() || n == 0 {
        return Ok(CareSolution {
            x: DMatrix::zeros(n, n),
            iterations: 0,
            residual: T::zero(),
            lyapunov_residuals: Vec::new(),
        });
    }
    let beta = p.a.norm() + c_norm.sqrt();
    let basis = retained_subspace(&p.a, &p.c)?;
    let r = basis.ncols();
    let a_r = basis.transpose() * &p.a * &basis;
    let c_r = symmetrize(&(basis.transpose() * &p.c * &basis));

    let res_tol = tol * c_norm;
    // Near quadratic convergence the error after a step is about the square
    // of the step, so a step of √tol already leaves an error of order tol.
    let step_tol = tol.sqrt();
    let mut x = initial_guess(&a_r, &c_r, beta)?;
    let mut lyapunov_residuals = Vec::new();
    let mut converged_at = None;
    let mut polishing = false;
    let mut last_residual = T::zero();
    for iteration in 1..=max_iter {
        if r == 0 {
            converged_at = Some(0);
            break;
        }
        let f = &a_r + &x;
        let g = symmetrize(&(&x * x.transpose() + &c_r));
        let next = solve_lyapunov(&f, &g).map_err(|e| Error::CareIteration {
            iteration,
            source: Box::new(e),
        })?;
        let lyap_res = (&f * &next + &next * f.transpose() - &g).norm();
        lyapunov_residuals.push(lyap_res / g.norm().max(lit(f64::MIN_POSITIVE)));
        let newton = symmetrize(&next) - &x;
        let current = &a_r * &x + &x * a_r.transpose() + &x * &x - &c_r;
        let next = &x + &newton * line_search(&current, &newton);
        let residual = (&a_r * &next + &next * a_r.transpose() + &next * &next - &c_r).norm();
        let step = (&next - &x).norm();
        let scale = next.norm().max(lit(f64::MIN_POSITIVE));
        x = next;
        last_residual = residual;
        if polishing {
            converged_at = Some(iteration);
            break;
        }
        if residual <= res_tol && step <= step_tol * scale {
            if step <= tol * scale || residual <= res_tol * lit(1e-2) {
                converged_at = Some(iteration);
                break;
            }
            // One more step squares the remaining error.
            polishing = true;
        }
    }
    let Some(iterations) = converged_at else {
        return Err(Error::CareNotConverged {
            iterations: max_iter,
            residual: to_f64(last_residual),
        });
    };
    let x = symmetrize(&(&basis * x * basis.transpose()));
    let residual = p.residual(&x).norm();
    Ok(CareSolution {
        x,
        iterations,
        residual,
        lyapunov_residuals,
    })
}
