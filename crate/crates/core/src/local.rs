//! Localized analysis on a periodic grid.
//!
//! Each coarse site selects the observations within the taper support,
//! weights `R⁻¹` by the Gaspari–Cohn taper, chooses `γ`, and builds its own
//! transform `W = W^μ W^α + W^ε`. All coarse sites share the same resampling
//! seed (and, for the stochastic variant, the same noise matrix). Transforms
//! are interpolated entrywise to the fine grid and applied to each site's
//! block of state variables.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::enspace::{
    analysis_cov_es, build_cache, centered_normal_draws, deterministic_perturbations, etkf_f_eps,
    pf_weights, stochastic_perturbations, weight_mean_matrix, Ensemble, ObsBatch, SpectralCache,
    WeightSet,
};
use crate::error::{Error, Result};
use crate::gamma::GammaPolicy;
use crate::sampling::{balanced_resample, ess, permute_for_continuity};
use crate::scalar::{count, lit, Real};
use crate::seed::{derive_seed, stream};

/// Gaspari–Cohn fifth-order piecewise rational correlation function with
/// half-width `radius`; zero beyond `2 · radius`.
pub fn gaspari_cohn<T: Real>(dist: T, radius: T) -> T {
    let z = dist.abs() / radius;
    let one = T::one();
    let two = lit::<T>(2.0);
    let c = |v: f64| lit::<T>(v);
    if z <= one {
        let z2 = z * z;
        let z3 = z2 * z;
        ((-c(0.25) * z + c(0.5)) * z + c(0.625)) * z3 - c(5.0 / 3.0) * z2 + one
    } else if z < two {
        let z2 = z * z;
        (((c(1.0 / 12.0) * z - c(0.5)) * z + c(0.625)) * z + c(5.0 / 3.0)) * z2 - c(5.0) * z
            + c(4.0)
            - c(2.0 / 3.0) / z
    } else {
        T::zero()
    }
}

/// Taper support: half-width `radius`, cutoff at `2 · radius`. `None` disables
/// localization (every observation gets factor 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationSpec<T: Real> {
    radius: Option<T>,
}

impl<T: Real> LocalizationSpec<T> {
    pub fn new(radius: T) -> Result<Self> {
        if !(radius > T::zero()) {
            return Err(Error::invalid("localization radius must be positive"));
        }
        Ok(Self {
            radius: Some(radius),
        })
    }

    /// Infinite radius.
    pub fn global() -> Self {
        Self { radius: None }
    }

    pub fn radius(&self) -> Option<T> {
        self.radius
    }

    pub fn cutoff(&self) -> Option<T> {
        self.radius.map(|r| r * lit(2.0))
    }
}

pub fn taper_factor<T: Real>(dist: T, spec: &LocalizationSpec<T>) -> T {
    match spec.radius {
        None => T::one(),
        Some(r) => gaspari_cohn(dist, r).max(T::zero()).min(T::one()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    /// Periodic 1-D ring of `n` sites.
    Ring { n: usize },
    /// Doubly periodic `nx × ny` lattice, site index `y · nx + x`.
    Lattice { nx: usize, ny: usize },
}

/// Fine grid with a coarse analysis grid every `coarse_stride` points (per
/// dimension). Distances are periodic and measured in grid spacings.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    topology: Topology,
    coarse_stride: usize,
}

impl GridSpec {
    pub fn new(topology: Topology, coarse_stride: usize) -> Result<Self> {
        if coarse_stride == 0 {
            return Err(Error::invalid("coarse stride must be at least 1"));
        }
        let dims: Vec<usize> = match topology {
            Topology::Ring { n } => vec![n],
            Topology::Lattice { nx, ny } => vec![nx, ny],
        };
        if dims.contains(&0) {
            return Err(Error::invalid("grid must contain at least one site"));
        }
        if dims.iter().any(|&d| d % coarse_stride != 0) {
            return Err(Error::invalid(format!(
                "grid extent {dims:?} not divisible by coarse stride {coarse_stride}"
            )));
        }
        Ok(Self {
            topology,
            coarse_stride,
        })
    }

    pub fn ring(n: usize) -> Result<Self> {
        Self::new(Topology::Ring { n }, 1)
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn coarse_stride(&self) -> usize {
        self.coarse_stride
    }

    pub fn n_sites(&self) -> usize {
        match self.topology {
            Topology::Ring { n } => n,
            Topology::Lattice { nx, ny } => nx * ny,
        }
    }

    fn coords(&self, site: usize) -> (usize, usize) {
        match self.topology {
            Topology::Ring { .. } => (site, 0),
            Topology::Lattice { nx, .. } => (site % nx, site / nx),
        }
    }

    fn extents(&self) -> (usize, usize) {
        match self.topology {
            Topology::Ring { n } => (n, 1),
            Topology::Lattice { nx, ny } => (nx, ny),
        }
    }

    /// Periodic distance between two sites.
    pub fn distance<T: Real>(&self, a: usize, b: usize) -> T {
        let (ax, ay) = self.coords(a);
        let (bx, by) = self.coords(b);
        let (nx, ny) = self.extents();
        let wrap = |u: usize, v: usize, n: usize| {
            let d = u.abs_diff(v);
            d.min(n - d)
        };
        let dx = count::<T>(wrap(ax, bx, nx));
        let dy = count::<T>(wrap(ay, by, ny));
        (dx * dx + dy * dy).sqrt()
    }

    /// Fine-site indices of the coarse grid, in ascending order.
    pub fn coarse_sites(&self) -> Vec<usize> {
        let (nx, ny) = self.extents();
        let s = self.coarse_stride;
        let mut out = Vec::new();
        for y in (0..ny).step_by(s) {
            for x in (0..nx).step_by(s) {
                out.push(y * nx + x);
            }
        }
        out
    }

    /// Interpolation stencil of a fine site: (position in `coarse_sites()`,
    /// weight) pairs, linear on a ring and bilinear on a lattice, periodic.
    pub fn stencil<T: Real>(&self, site: usize) -> Vec<(usize, T)> {
        let s = self.coarse_stride;
        let (nx, ny) = self.extents();
        let (cnx, cny) = (nx / s, (ny / s).max(1));
        let (x, y) = self.coords(site);
        let axis = |u: usize, cn: usize| -> [(usize, T); 2] {
            let lo = u / s;
            let t = count::<T>(u % s) / count::<T>(s);
            [(lo, T::one() - t), ((lo + 1) % cn, t)]
        };
        let xs = axis(x, cnx);
        let ys = if ny == 1 {
            [(0, T::one()), (0, T::zero())]
        } else {
            axis(y, cny)
        };
        let mut out = Vec::with_capacity(4);
        for &(cy, wy) in &ys {
            for &(cx, wx) in &xs {
                let w = wx * wy;
                if w != T::zero() {
                    out.push((cy * cnx + cx, w));
                }
            }
        }
        out
    }
}

/// Observations located at grid sites (point observations of a site's state).
#[derive(Debug, Clone, PartialEq)]
pub struct LocatedObs<T: Real> {
    pub batch: ObsBatch<T>,
    pub sites: Vec<usize>,
}

impl<T: Real> LocatedObs<T> {
    pub fn new(batch: ObsBatch<T>, sites: Vec<usize>) -> Result<Self> {
        if sites.len() != batch.len() {
            return Err(Error::dim(format!(
                "{} observation sites for {} observations",
                sites.len(),
                batch.len()
            )));
        }
        Ok(Self { batch, sites })
    }
}

/// Observations with nonzero taper weight at `site` and their taper factors.
pub fn select_local_obs<T: Real>(
    site: usize,
    obs: &LocatedObs<T>,
    grid: &GridSpec,
    spec: &LocalizationSpec<T>,
) -> (ObsBatch<T>, Vec<T>) {
    let mut keep = Vec::new();
    let mut factors = Vec::new();
    for (i, &s) in obs.sites.iter().enumerate() {
        let f = taper_factor(grid.distance::<T>(site, s), spec);
        if f > T::zero() {
            keep.push(i);
            factors.push(f);
        }
    }
    (obs.batch.select(&keep), factors)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterVariant {
    /// Perturbations from the Riccati equation (ETKPF).
    Deterministic,
    /// Perturbations from a shared random noise matrix (stochastic EnKPF).
    Stochastic,
}

/// Result of one local (or global) analysis in ensemble space.
#[derive(Debug, Clone)]
pub struct SiteAnalysis<T: Real> {
    pub weights: WeightSet<T>,
    pub alpha: DVector<T>,
    pub ess: T,
}

impl<T: Real> SiteAnalysis<T> {
    pub fn transform(&self) -> DMatrix<T> {
        self.weights.transform()
    }
}

/// Full ETKPF analysis of one spectral cache: choose `γ`, weight, resample
/// (permuted for continuity), and build the perturbation matrix.
///
/// `noise` is the centered noise matrix for the stochastic variant and is
/// ignored by the deterministic one.
pub fn analyze_cache<T: Real>(
    cache: &SpectralCache<T>,
    policy: &GammaPolicy<T>,
    variant: FilterVariant,
    seed: u64,
    noise: Option<&DMatrix<T>>,
) -> Result<SiteAnalysis<T>> {
    let k = cache.k;
    let gamma = policy.choose(cache, seed)?;
    let alpha = pf_weights(cache, gamma);
    let plan = permute_for_continuity(&balanced_resample(&alpha, k, seed)?);
    let w_mu = weight_mean_matrix(cache, gamma);
    let p_tilde = analysis_cov_es(cache, gamma);
    let identity_resample = plan.indices.iter().enumerate().all(|(i, &j)| i == j);
    let w_eps = match variant {
        // At γ = 1 without resampling the Riccati solution is the ETKF square root.
        FilterVariant::Deterministic if gamma == T::one() && identity_resample => {
            cache.apply_fn(|l| etkf_f_eps(l, k))
        }
        FilterVariant::Deterministic => {
            deterministic_perturbations(&w_mu, &plan.indices, &p_tilde)?
        }
        FilterVariant::Stochastic => {
            let e =
                noise.ok_or_else(|| Error::invalid("stochastic variant needs a noise matrix"))?;
            stochastic_perturbations(&p_tilde, e)?
        }
    };
    Ok(SiteAnalysis {
        ess: ess(&alpha),
        alpha,
        weights: WeightSet {
            w_mu,
            resample: plan.indices,
            w_eps,
            gamma,
        },
    })
}

/// Noise matrix shared by every site of one stochastic analysis.
pub fn shared_noise<T: Real>(k: usize, seed: u64) -> DMatrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::NOISE]));
    centered_normal_draws(k, &mut rng)
}

/// Analysis settings shared by every site.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSettings<T: Real> {
    pub policy: GammaPolicy<T>,
    pub variant: FilterVariant,
    pub localization: LocalizationSpec<T>,
}

/// Output of [`local_analysis_field`].
#[derive(Debug, Clone)]
pub struct LocalAnalysis<T: Real> {
    pub analysis: Ensemble<T>,
    /// Fine-site index of each coarse site.
    pub coarse_sites: Vec<usize>,
    pub gamma: Vec<T>,
    pub ess: Vec<T>,
    /// Transform `W` computed at each coarse site.
    pub transforms: Vec<DMatrix<T>>,
}

/// Localized analysis of the whole grid.
///
/// The state vector is laid out site-major: site `s` owns rows
/// `s·b .. (s+1)·b` with `b = q / n_sites`.
pub fn local_analysis_field<T: Real>(
    ens: &Ensemble<T>,
    obs: &LocatedObs<T>,
    grid: &GridSpec,
    settings: &AnalysisSettings<T>,
    seed: u64,
) -> Result<LocalAnalysis<T>> {
    let k = ens.size();
    let n_sites = grid.n_sites();
    let q = ens.dim();
    if !q.is_multiple_of(n_sites) {
        return Err(Error::dim(format!(
            "state dimension {q} is not a multiple of {n_sites} sites"
        )));
    }
    if obs.batch.ensemble_size() != k {
        return Err(Error::dim(format!(
            "equivalents have {} members, ensemble has {k}",
            obs.batch.ensemble_size()
        )));
    }
    if let Some(&s) = obs.sites.iter().find(|&&s| s >= n_sites) {
        return Err(Error::invalid(format!("observation site {s} outside grid")));
    }
    settings.policy.validate()?;
    let block = q / n_sites;
    let noise = match settings.variant {
        FilterVariant::Stochastic => Some(shared_noise::<T>(k, seed)),
        FilterVariant::Deterministic => None,
    };
    let coarse_sites = grid.coarse_sites();

    let analyze_site = |site: usize| {
        let (local, taper) = select_local_obs(site, obs, grid, &settings.localization);
        build_cache(&local, &taper)
            .and_then(|cache| {
                analyze_cache(
                    &cache,
                    &settings.policy,
                    settings.variant,
                    seed,
                    noise.as_ref(),
                )
            })
            .map_err(|e| Error::Site {
                site,
                source: Box::new(e),
            })
    };
    let site_results: Vec<SiteAnalysis<T>> = if settings.localization.radius().is_none() {
        // Every site sees every observation at full weight.
        let shared = analyze_site(coarse_sites[0])?;
        vec![shared; coarse_sites.len()]
    } else {
        coarse_sites
            .par_iter()
            .map(|&site| analyze_site(site))
            .collect::<Result<_>>()?
    };
    let transforms: Vec<DMatrix<T>> = site_results.iter().map(|r| r.transform()).collect();

    let mean = ens.mean();
    let dev = ens.deviations();
    let blocks: Vec<DMatrix<T>> = (0..n_sites)
        .into_par_iter()
        .map(|site| {
            let stencil = grid.stencil::<T>(site);
            let w = if let [(c, _)] = stencil.as_slice() {
                transforms[*c].clone()
            } else {
                stencil.iter().fold(DMatrix::zeros(k, k), |acc, &(c, wt)| {
                    acc + &transforms[c] * wt
                })
            };
            let rows = site * block;
            let mut out = dev.rows(rows, block) * w;
            for mut col in out.column_iter_mut() {
                col += mean.rows(rows, block);
            }
            out
        })
        .collect();
    let mut states = DMatrix::zeros(q, k);
    for (site, b) in blocks.iter().enumerate() {
        states.rows_mut(site * block, block).copy_from(b);
    }

    Ok(LocalAnalysis {
        analysis: Ensemble::new(states)?,
        coarse_sites,
        gamma: site_results.iter().map(|r| r.weights.gamma).collect(),
        ess: site_results.iter().map(|r| r.ess).collect(),
        transforms,
    })
}

/// Unlocalized analysis with every observation at full weight.
pub fn global_analysis<T: Real>(
    ens: &Ensemble<T>,
    obs: &ObsBatch<T>,
    policy: &GammaPolicy<T>,
    variant: FilterVariant,
    seed: u64,
) -> Result<(Ensemble<T>, SiteAnalysis<T>)> {
    let taper = vec![T::one(); obs.len()];
    let cache = build_cache(obs, &taper)?;
    let noise = match variant {
        FilterVariant::Stochastic => Some(shared_noise::<T>(ens.size(), seed)),
        FilterVariant::Deterministic => None,
    };
    let site = analyze_cache(&cache, policy, variant, seed, noise.as_ref())?;
    let analysis = crate::enspace::assemble_and_apply(ens, &site.weights)?;
    Ok((analysis, site))
}
