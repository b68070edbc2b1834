//! Toy models for twin experiments: a linear-Gaussian system with an exact
//! Kalman filter, and Lorenz-96.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::enspace::{Ensemble, ObsBatch};
use crate::error::{Error, Result};
use crate::linalg::sym_eig;
use crate::scalar::{lit, to_f64, Real};
use crate::seed::{derive_seed, stream};
use crate::table::{join_f64, split_f64, split_usize, Table};

/// Lorenz-96 spin-up length in integration steps.
pub const L96_SPIN_UP_STEPS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind<T: Real> {
    /// `x ← A x + η`, `η ~ N(0, diag(noise_var))`.
    Linear {
        transition: DMatrix<T>,
        noise_var: DVector<T>,
    },
    /// `dxᵢ/dt = (xᵢ₊₁ − xᵢ₋₂) xᵢ₋₁ − xᵢ + F`, RK4 with `steps` steps of `dt`
    /// per cycle.
    Lorenz96 { forcing: T, dt: T, steps: usize },
}

/// How ensemble members of the linear model receive model noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseSampling {
    /// Independent draws, centered across the ensemble.
    #[default]
    Random,
    /// Draws rescaled so their sample covariance is exactly
    /// `diag(noise_var)` and orthogonal to `𝟙` and to the forecast
    /// deviations. Needs `k > 2q` in general.
    ExactMoments,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec<T: Real> {
    dim: usize,
    kind: ModelKind<T>,
    noise: NoiseSampling,
}

impl<T: Real> ModelSpec<T> {
    pub fn new(dim: usize, kind: ModelKind<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("model dimension must be at least 1"));
        }
        match &kind {
            ModelKind::Linear {
                transition,
                noise_var,
            } => {
                if transition.shape() != (dim, dim) || noise_var.len() != dim {
                    return Err(Error::dim(format!(
                        "linear model of dimension {dim}: transition {:?}, {} noise variances",
                        transition.shape(),
                        noise_var.len()
                    )));
                }
                if noise_var.iter().any(|&v| !(v >= T::zero())) {
                    return Err(Error::invalid("model-noise variances must be nonnegative"));
                }
            }
            ModelKind::Lorenz96 { dt, steps, .. } => {
                if !(*dt > T::zero()) {
                    return Err(Error::invalid("dt must be positive"));
                }
                if *steps == 0 {
                    return Err(Error::invalid("steps per cycle must be at least 1"));
                }
                if dim < 4 {
                    return Err(Error::invalid("Lorenz-96 needs at least 4 variables"));
                }
            }
        }
        Ok(Self {
            dim,
            kind,
            noise: NoiseSampling::Random,
        })
    }

    pub fn with_noise_sampling(mut self, noise: NoiseSampling) -> Self {
        self.noise = noise;
        self
    }

    pub fn noise_sampling(&self) -> NoiseSampling {
        self.noise
    }

    /// Standard configuration: F = 8, dt = 0.005, 40 steps per cycle.
    pub fn lorenz96(dim: usize) -> Result<Self> {
        Self::new(
            dim,
            ModelKind::Lorenz96 {
                forcing: lit(8.0),
                dt: lit(0.005),
                steps: 40,
            },
        )
    }

    pub fn linear(transition: DMatrix<T>, noise_var: DVector<T>) -> Result<Self> {
        Self::new(
            transition.nrows(),
            ModelKind::Linear {
                transition,
                noise_var,
            },
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &ModelKind<T> {
        &self.kind
    }

    fn check_state(&self, state: &DVector<T>) -> Result<()> {
        if state.len() != self.dim {
            return Err(Error::dim(format!(
                "state has length {}, model dimension is {}",
                state.len(),
                self.dim
            )));
        }
        check_finite(state)
    }

    /// One cycle without model noise.
    pub fn step(&self, state: &DVector<T>) -> Result<DVector<T>> {
        self.check_state(state)?;
        let out = match &self.kind {
            ModelKind::Linear { transition, .. } => transition * state,
            ModelKind::Lorenz96 { forcing, dt, steps } => {
                l96_integrate(state, *forcing, *dt, *steps)
            }
        };
        check_finite(&out)?;
        Ok(out)
    }

    /// One cycle including a model-noise draw (linear only; Lorenz-96 is
    /// deterministic).
    pub fn step_noisy<R: Rng + ?Sized>(
        &self,
        state: &DVector<T>,
        rng: &mut R,
    ) -> Result<DVector<T>> {
        let mut out = self.step(state)?;
        if let ModelKind::Linear { noise_var, .. } = &self.kind {
            for (x, &v) in out.iter_mut().zip(noise_var.iter()) {
                *x += v.sqrt() * lit::<T>(rng.sample::<f64, _>(StandardNormal));
            }
        }
        Ok(out)
    }

    /// Propagates every member over one cycle. Linear members receive model
    /// noise that sums to zero across the ensemble (see [`NoiseSampling`]),
    /// so the ensemble mean is untouched; draws come from the
    /// `(seed, MODEL, cycle)` stream regardless of thread count.
    pub fn propagate(&self, ens: &Ensemble<T>, seed: u64, cycle: u64) -> Result<Ensemble<T>> {
        let (q, k) = (ens.dim(), ens.size());
        if q != self.dim {
            return Err(Error::dim(format!(
                "ensemble dimension {q}, model dimension {}",
                self.dim
            )));
        }
        let states = match &self.kind {
            ModelKind::Linear {
                transition,
                noise_var,
            } => {
                check_finite_matrix(ens.states())?;
                let mut x = transition * ens.states();
                if noise_var.iter().any(|&v| v > T::zero()) {
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::MODEL, cycle]));
                    let draws = DMatrix::<T>::from_fn(q, k, |_, _| {
                        lit(rng.sample::<f64, _>(StandardNormal))
                    });
                    x += match self.noise {
                        NoiseSampling::Random => centered_noise(draws, noise_var),
                        NoiseSampling::ExactMoments => exact_moment_noise(draws, &x, noise_var)?,
                    };
                }
                check_finite_matrix(&x)?;
                x
            }
            ModelKind::Lorenz96 { .. } => {
                let cols: Vec<DVector<T>> = (0..k)
                    .into_par_iter()
                    .map(|j| self.step(&ens.states().column(j).into_owned()))
                    .collect::<Result<_>>()?;
                DMatrix::from_columns(&cols)
            }
        };
        Ensemble::new(states)
    }

    /// Runs `n` cycles without noise, returning the final state.
    pub fn run(&self, state: &DVector<T>, n: usize) -> Result<DVector<T>> {
        (0..n).try_fold(state.clone(), |x, _| self.step(&x))
    }
}

fn centered_noise<T: Real>(mut draws: DMatrix<T>, noise_var: &DVector<T>) -> DMatrix<T> {
    for (i, mut row) in draws.row_iter_mut().enumerate() {
        let m = row.mean();
        row.add_scalar_mut(-m);
        row *= noise_var[i].sqrt();
    }
    draws
}

/// Noise `E` with `E 𝟙 = 0`, `E Xᵀ = 0` for the deviations `X` of `states`,
/// and `E Eᵀ / (k−1) = diag(noise_var)`.
fn exact_moment_noise<T: Real>(
    draws: DMatrix<T>,
    states: &DMatrix<T>,
    noise_var: &DVector<T>,
) -> Result<DMatrix<T>> {
    let (q, k) = draws.shape();
    let mut span = DMatrix::<T>::from_element(k, q + 1, T::one());
    span.columns_mut(1, q).copy_from(&states.transpose());
    let gram = sym_eig(&(&span * span.transpose()))?;
    let top = gram.eigvals.max();
    let keep: Vec<usize> = (0..k)
        .filter(|&i| gram.eigvals[i] > lit::<T>(1e-12) * top)
        .collect();
    let basis = gram.eigvecs.select_columns(keep.iter());
    let free = &draws - (&draws * &basis) * basis.transpose();
    let m = sym_eig(&(&free * free.transpose()))?;
    if m.eigvals.min() <= lit::<T>(1e-10) * m.eigvals.max() {
        return Err(Error::invalid(format!(
            "exact-moment model noise needs more than {} members, got {k}",
            2 * q
        )));
    }
    let whiten = m.apply_fn(|l| T::one() / l.sqrt());
    let scale = DMatrix::from_diagonal(&noise_var.map(|v| (v * lit::<T>((k - 1) as f64)).sqrt()));
    Ok(scale * whiten * free)
}

fn check_finite<T: Real>(v: &DVector<T>) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn check_finite_matrix<T: Real>(m: &DMatrix<T>) -> Result<()> {
    // Report the state index (row) of the first bad value.
    for j in 0..m.ncols() {
        if let Some(index) = m.column(j).iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
    }
    Ok(())
}

/// Lorenz-96 tendency.
pub fn l96_rhs<T: Real>(x: &DVector<T>, forcing: T) -> DVector<T> {
    let n = x.len();
    DVector::from_fn(n, |i, _| {
        let xp1 = x[(i + 1) % n];
        let xm1 = x[(i + n - 1) % n];
        let xm2 = x[(i + n - 2) % n];
        (xp1 - xm2) * xm1 - x[i] + forcing
    })
}

/// `steps` classical RK4 steps of size `dt`.
pub fn l96_integrate<T: Real>(x: &DVector<T>, forcing: T, dt: T, steps: usize) -> DVector<T> {
    let half = lit::<T>(0.5);
    let sixth = lit::<T>(1.0 / 6.0);
    let two = lit::<T>(2.0);
    let mut x = x.clone();
    for _ in 0..steps {
        let k1 = l96_rhs(&x, forcing);
        let k2 = l96_rhs(&(&x + &k1 * (dt * half)), forcing);
        let k3 = l96_rhs(&(&x + &k2 * (dt * half)), forcing);
        let k4 = l96_rhs(&(&x + &k3 * dt), forcing);
        x += (k1 + k2 * two + k3 * two + k4) * (dt * sixth);
    }
    x
}

/// Truth trajectory and synthetic observations of a twin experiment.
///
/// `truth[0]` is the initial state; `observations[c]` observes `truth[c + 1]`
/// at `obs_sites` with error variances `r_diag`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinRun<T: Real> {
    pub truth: Vec<DVector<T>>,
    pub observations: Vec<DVector<T>>,
    pub obs_sites: Vec<usize>,
    pub r_diag: DVector<T>,
    pub seed: u64,
}

impl<T: Real> TwinRun<T> {
    pub fn cycles(&self) -> usize {
        self.observations.len()
    }

    /// Observation batch of cycle `c` for an ensemble (point observations).
    pub fn obs_batch(&self, c: usize, ens: &Ensemble<T>) -> Result<ObsBatch<T>> {
        ObsBatch::new(
            self.observations[c].clone(),
            self.r_diag.clone(),
            ens.states().select_rows(self.obs_sites.iter()),
        )
    }

    /// Selection operator `H` (d×q).
    pub fn h_matrix(&self, q: usize) -> DMatrix<T> {
        selection_matrix(&self.obs_sites, q)
    }

    /// Writes `truth.bin` and `obs.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(e.to_string()))?;
        let q = self.truth.first().map_or(0, |v| v.len());
        let truth = Table::new(
            self.truth.len(),
            q,
            self.truth
                .iter()
                .flat_map(|v| v.iter().map(|&x| to_f64(x)))
                .collect(),
        )?
        .with_meta("kind", "truth")
        .with_meta("seed", self.seed)
        .with_meta("cycles", self.cycles());
        truth.save(&dir.join("truth.bin"))?;
        let r: Vec<f64> = self.r_diag.iter().map(|&x| to_f64(x)).collect();
        let sites: Vec<String> = self.obs_sites.iter().map(|s| s.to_string()).collect();
        let obs = Table::new(
            self.observations.len(),
            self.obs_sites.len(),
            self.observations
                .iter()
                .flat_map(|v| v.iter().map(|&x| to_f64(x)))
                .collect(),
        )?
        .with_meta("kind", "observations")
        .with_meta("seed", self.seed)
        .with_meta("cycles", self.cycles())
        .with_meta("sites", sites.join(","))
        .with_meta("r_diag", join_f64(&r));
        obs.save(&dir.join("obs.bin"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let truth = Table::load(&dir.join("truth.bin"))?;
        let obs = Table::load(&dir.join("obs.bin"))?;
        let seed = truth
            .meta("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::invalid("twin truth lacks a seed"))?;
        let rows = |t: &Table| -> Vec<DVector<T>> {
            (0..t.rows)
                .map(|i| DVector::from_iterator(t.cols, t.row(i).iter().map(|&x| lit(x))))
                .collect()
        };
        let obs_sites = split_usize(obs.meta("sites").unwrap_or(""))?;
        let r = split_f64(obs.meta("r_diag").unwrap_or(""))?;
        if obs_sites.len() != obs.cols || r.len() != obs.cols || truth.rows != obs.rows + 1 {
            return Err(Error::invalid("twin files are inconsistent"));
        }
        Ok(Self {
            truth: rows(&truth),
            observations: rows(&obs),
            obs_sites,
            r_diag: DVector::from_iterator(r.len(), r.into_iter().map(lit)),
            seed,
        })
    }
}

pub fn selection_matrix<T: Real>(sites: &[usize], q: usize) -> DMatrix<T> {
    let mut h = DMatrix::zeros(sites.len(), q);
    for (i, &s) in sites.iter().enumerate() {
        h[(i, s)] = T::one();
    }
    h
}

/// Initial truth: Lorenz-96 starts from `F` plus `N(0, 0.01²)` noise and is
/// spun up; the linear model draws from `N(0, I)`.
pub fn initial_truth<T: Real>(spec: &ModelSpec<T>, seed: u64) -> Result<DVector<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::INITIAL]));
    let mut draw = || lit::<T>(rng.sample::<f64, _>(StandardNormal));
    match &spec.kind {
        ModelKind::Lorenz96 { forcing, dt, .. } => {
            let x = DVector::from_fn(spec.dim, |_, _| *forcing + draw() * lit(0.01));
            let x = l96_integrate(&x, *forcing, *dt, L96_SPIN_UP_STEPS);
            check_finite(&x)?;
            Ok(x)
        }
        ModelKind::Linear { .. } => Ok(DVector::from_fn(spec.dim, |_, _| draw())),
    }
}

/// Free run of `steps` integration steps (Lorenz-96) or noisy cycles (linear)
/// from `start`, returning every visited state.
pub fn free_run<T: Real>(
    spec: &ModelSpec<T>,
    start: &DVector<T>,
    steps: usize,
    seed: u64,
) -> Result<Vec<DVector<T>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::CLIMATOLOGY]));
    let mut x = start.clone();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        x = match &spec.kind {
            ModelKind::Lorenz96 { forcing, dt, .. } => l96_integrate(&x, *forcing, *dt, 1),
            ModelKind::Linear { .. } => spec.step_noisy(&x, &mut rng)?,
        };
        check_finite(&x)?;
        out.push(x.clone());
    }
    Ok(out)
}

/// Generates a truth run of `cycles` cycles and noisy point observations.
/// `r_diag` gives the error variance of each observed site; zero variances
/// produce exact observations.
pub fn make_twin<T: Real>(
    spec: &ModelSpec<T>,
    cycles: usize,
    obs_sites: &[usize],
    r_diag: &DVector<T>,
    seed: u64,
) -> Result<TwinRun<T>> {
    if cycles == 0 {
        return Err(Error::invalid("twin run needs at least one cycle"));
    }
    if r_diag.len() != obs_sites.len() {
        return Err(Error::dim(format!(
            "{} error variances for {} observed sites",
            r_diag.len(),
            obs_sites.len()
        )));
    }
    if let Some(&s) = obs_sites.iter().find(|&&s| s >= spec.dim) {
        return Err(Error::invalid(format!("observed site {s} outside state")));
    }
    if r_diag.iter().any(|&r| !(r >= T::zero())) {
        return Err(Error::invalid(
            "observation error variances must be nonnegative",
        ));
    }
    let mut truth_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::TRUTH]));
    let mut obs_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::OBSERVATION]));
    let mut truth = vec![initial_truth(spec, seed)?];
    let mut observations = Vec::with_capacity(cycles);
    for _ in 0..cycles {
        let next = spec.step_noisy(truth.last().expect("nonempty"), &mut truth_rng)?;
        let y = DVector::from_iterator(
            obs_sites.len(),
            obs_sites.iter().zip(r_diag.iter()).map(|(&s, &r)| {
                next[s] + r.sqrt() * lit::<T>(obs_rng.sample::<f64, _>(StandardNormal))
            }),
        );
        observations.push(y);
        truth.push(next);
    }
    Ok(TwinRun {
        truth,
        observations,
        obs_sites: obs_sites.to_vec(),
        r_diag: r_diag.clone(),
        seed,
    })
}

/// Exact posterior of one cycle.
#[derive(Debug, Clone)]
pub struct KalmanState<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

/// Exact Kalman filter for a linear-Gaussian twin, starting from the prior
/// `N(mean0, cov0)` at `truth[0]`. Entry `c` is the posterior after
/// assimilating `observations[c]`.
pub fn kalman_oracle<T: Real>(
    spec: &ModelSpec<T>,
    twin: &TwinRun<T>,
    mean0: &DVector<T>,
    cov0: &DMatrix<T>,
) -> Result<Vec<KalmanState<T>>> {
    let (a, qn) = match &spec.kind {
        ModelKind::Linear {
            transition,
            noise_var,
        } => (transition, DMatrix::from_diagonal(noise_var)),
        ModelKind::Lorenz96 { .. } => {
            return Err(Error::invalid("the Kalman oracle needs a linear model"))
        }
    };
    let q = spec.dim;
    let h = twin.h_matrix(q);
    let r = DMatrix::from_diagonal(&twin.r_diag);
    let mut mean = mean0.clone();
    let mut cov = cov0.clone();
    let mut out = Vec::with_capacity(twin.cycles());
    for y in &twin.observations {
        mean = a * &mean;
        cov = a * &cov * a.transpose() + &qn;
        let gain = crate::enspace::oracle::kalman_gain(&cov, &h, &r)?;
        mean += &gain * (y - &h * &mean);
        let ikh = DMatrix::identity(q, q) - &gain * &h;
        // Joseph form keeps the covariance symmetric positive semidefinite.
        cov = &ikh * &cov * ikh.transpose() + &gain * &r * gain.transpose();
        out.push(KalmanState {
            mean: mean.clone(),
            cov: cov.clone(),
        });
    }
    Ok(out)
}
