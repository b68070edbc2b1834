use etkpf::enspace::oracle::oracle_mixture;
use etkpf::enspace::{
    analysis_cov_es, apply_transform, build_cache, centered_normal_draws,
    deterministic_perturbations, pf_weights, stochastic_perturbations, weight_mean_matrix,
    Ensemble, ObsBatch,
};
use etkpf::gamma::GammaPolicy;
use etkpf::linalg::{solve_care, CareProblem};
use etkpf::local::{
    global_analysis, local_analysis_field, AnalysisSettings, FilterVariant, GridSpec,
    LocalizationSpec, LocatedObs, Topology,
};
use etkpf::sampling::balanced_resample;
use etkpf::verify::crps_gaussian;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Instance {
    ens: Ensemble<f64>,
    h: DMatrix<f64>,
    y: DVector<f64>,
    r: DVector<f64>,
}

impl Instance {
    fn random(q: usize, d: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut n = || rng.sample::<f64, _>(StandardNormal);
        let ens = Ensemble::new(DMatrix::from_fn(q, k, |_, _| n())).unwrap();
        let h = DMatrix::from_fn(d, q, |_, _| n());
        let y = DVector::from_fn(d, |_, _| n());
        let r = DVector::from_fn(d, |_, _| 0.5 + n().abs());
        Self { ens, h, y, r }
    }

    fn obs(&self) -> ObsBatch<f64> {
        ObsBatch::new(self.y.clone(), self.r.clone(), &self.h * self.ens.states()).unwrap()
    }
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

#[test]
fn component_means_and_covariance_match_state_space() {
    for seed in 0..30 {
        let inst = Instance::random(6, 4, 5, seed);
        let cache = build_cache(&inst.obs(), &[1.0; 4]).unwrap();
        for &g in &[0.0, 0.3, 0.7, 1.0] {
            let m = oracle_mixture(&inst.ens, &inst.h, &inst.y, &inst.r, g).unwrap();
            let w_mu = weight_mean_matrix(&cache, g);
            let mut mu = inst.ens.deviations() * &w_mu;
            for mut col in mu.column_iter_mut() {
                col += inst.ens.mean();
            }
            assert!(rel(&mu, &m.mu) < 1e-9, "seed {seed} γ {g}");
            let x = inst.ens.deviations();
            let p = x * analysis_cov_es(&cache, g) * x.transpose();
            if m.p_a.norm() > 0.0 {
                assert!(rel(&p, &m.p_a) < 1e-9);
            } else {
                assert!(p.norm() < 1e-12);
            }
            let alpha = pf_weights(&cache, g);
            assert!((alpha - &m.alpha).amax() < 1e-10);
        }
    }
}

#[test]
fn global_localization_equals_global_analysis() {
    let inst = Instance::random(8, 8, 6, 4);
    // Point observations of every site.
    let h = DMatrix::<f64>::identity(8, 8);
    let batch = ObsBatch::new(inst.y.clone(), inst.r.clone(), &h * inst.ens.states()).unwrap();
    let located = LocatedObs::new(batch.clone(), (0..8).collect()).unwrap();
    let grid = GridSpec::ring(8).unwrap();
    for (variant, policy) in [
        (
            FilterVariant::Deterministic,
            GammaPolicy::fixed(0.4).unwrap(),
        ),
        (FilterVariant::Stochastic, GammaPolicy::min_mse()),
        (FilterVariant::Deterministic, GammaPolicy::ess_target(0.5)),
    ] {
        let settings = AnalysisSettings {
            policy: policy.clone(),
            variant,
            localization: LocalizationSpec::global(),
        };
        let local = local_analysis_field(&inst.ens, &located, &grid, &settings, 17).unwrap();
        let (global, _) = global_analysis(&inst.ens, &batch, &policy, variant, 17).unwrap();
        assert!((local.analysis.states() - global.states()).amax() < 1e-12);
        assert!(local.gamma.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn huge_radius_matches_global() {
    let inst = Instance::random(10, 10, 5, 8);
    let batch = ObsBatch::new(inst.y.clone(), inst.r.clone(), inst.ens.states().clone()).unwrap();
    let located = LocatedObs::new(batch.clone(), (0..10).collect()).unwrap();
    let grid = GridSpec::ring(10).unwrap();
    let policy = GammaPolicy::fixed(0.5).unwrap();
    let settings = AnalysisSettings {
        policy: policy.clone(),
        variant: FilterVariant::Deterministic,
        localization: LocalizationSpec::new(1e9).unwrap(),
    };
    let local = local_analysis_field(&inst.ens, &located, &grid, &settings, 3).unwrap();
    let (global, _) =
        global_analysis(&inst.ens, &batch, &policy, FilterVariant::Deterministic, 3).unwrap();
    assert!((local.analysis.states() - global.states()).amax() < 1e-8);
}

#[test]
fn coarse_grid_interpolates_between_sites() {
    let k = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let states = DMatrix::from_fn(24, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let ens = Ensemble::new(states.clone()).unwrap();
    let sites: Vec<usize> = (0..24).step_by(3).collect();
    let batch = ObsBatch::new(
        DVector::from_element(sites.len(), 0.3),
        DVector::from_element(sites.len(), 1.0),
        states.select_rows(sites.iter()),
    )
    .unwrap();
    let located = LocatedObs::new(batch, sites).unwrap();
    let settings = AnalysisSettings {
        policy: GammaPolicy::fixed(1.0).unwrap(),
        variant: FilterVariant::Deterministic,
        localization: LocalizationSpec::new(3.0).unwrap(),
    };
    let grid = GridSpec::new(Topology::Ring { n: 24 }, 4).unwrap();
    let out = local_analysis_field(&ens, &located, &grid, &settings, 0).unwrap();
    assert_eq!(out.coarse_sites, vec![0, 4, 8, 12, 16, 20]);
    // Site 2 sits halfway between coarse sites 0 and 4.
    let w = (&out.transforms[0] + &out.transforms[1]) * 0.5;
    let expected = apply_transform(&ens, &w).unwrap();
    assert!((out.analysis.states().row(2) - expected.states().row(2)).amax() < 1e-12);
    // Coarse sites use their own transform.
    let own = apply_transform(&ens, &out.transforms[2]).unwrap();
    assert!((out.analysis.states().row(8) - own.states().row(8)).amax() < 1e-12);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let inst = Instance::random(20, 20, 8, 1);
    let batch = ObsBatch::new(inst.y.clone(), inst.r.clone(), inst.ens.states().clone()).unwrap();
    let located = LocatedObs::new(batch, (0..20).collect()).unwrap();
    let grid = GridSpec::ring(20).unwrap();
    let settings = AnalysisSettings {
        policy: GammaPolicy::min_mse(),
        variant: FilterVariant::Deterministic,
        localization: LocalizationSpec::new(2.0).unwrap(),
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| local_analysis_field(&inst.ens, &located, &grid, &settings, 5).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.analysis.states(), b.analysis.states());
    assert_eq!(a.gamma, b.gamma);
}

#[test]
fn invalid_policy_is_rejected_before_sites_run() {
    let ens = Ensemble::new(DMatrix::from_fn(4, 3, |i, j| (i + j) as f64)).unwrap();
    let batch = ObsBatch::new(
        DVector::from_element(1, 0.0),
        DVector::from_element(1, 1.0),
        DMatrix::from_row_slice(1, 3, &[0.0, 1.0, 2.0]),
    )
    .unwrap();
    let located = LocatedObs::new(batch, vec![2]).unwrap();
    let settings = AnalysisSettings {
        policy: GammaPolicy::MinMse { grid: vec![0.5] },
        variant: FilterVariant::Deterministic,
        localization: LocalizationSpec::new(1.0).unwrap(),
    };
    // An invalid grid is rejected before any site runs.
    let err = local_analysis_field(&ens, &located, &GridSpec::ring(4).unwrap(), &settings, 0)
        .unwrap_err();
    assert!(err.to_string().contains("gamma"));
}

/// The stochastic perturbations are unbiased: averaged over noise draws the
/// analysis covariance equals the resampled-means covariance plus `P^{a,γ}`.
#[test]
fn stochastic_covariance_is_unbiased() {
    let inst = Instance::random(3, 2, 6, 21);
    let cache = build_cache(&inst.obs(), &[1.0, 1.0]).unwrap();
    let g = 0.5;
    let k = 6;
    let w_mu = weight_mean_matrix(&cache, g);
    let p_tilde = analysis_cov_es(&cache, g);
    let plan = balanced_resample(&pf_weights(&cache, g), k, 9).unwrap();
    let a = etkpf::enspace::centered_transform(&w_mu, &plan.indices);
    let x = inst.ens.deviations();
    let target = x * (&a * a.transpose() / (k as f64 - 1.0) + &p_tilde) * x.transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trials = 20_000;
    let mut acc = DMatrix::zeros(3, 3);
    for _ in 0..trials {
        let e = centered_normal_draws::<f64, _>(k, &mut rng);
        let w_eps = stochastic_perturbations(&p_tilde, &e).unwrap();
        let w = &a + w_eps;
        acc += x * &w * w.transpose() * x.transpose() / (k as f64 - 1.0);
    }
    acc /= trials as f64;
    assert!(
        rel(&acc, &target) < 0.03,
        "relative error {}",
        rel(&acc, &target)
    );
}

#[test]
fn deterministic_covariance_is_exact() {
    let inst = Instance::random(5, 3, 7, 30);
    let cache = build_cache(&inst.obs(), &[1.0; 3]).unwrap();
    for &g in &[0.1, 0.5, 0.9] {
        let w_mu = weight_mean_matrix(&cache, g);
        let p_tilde = analysis_cov_es(&cache, g);
        let plan = balanced_resample(&pf_weights(&cache, g), 7, 4).unwrap();
        let a = etkpf::enspace::centered_transform(&w_mu, &plan.indices);
        let w_eps = deterministic_perturbations(&w_mu, &plan.indices, &p_tilde).unwrap();
        let w = &a + &w_eps;
        let lhs = &w * w.transpose() / 6.0;
        let rhs = &a * a.transpose() / 6.0 + &p_tilde;
        assert!(rel(&lhs, &rhs) < 1e-10);
        assert!((&w_eps * DVector::from_element(7, 1.0)).amax() < 1e-10);
    }
}

#[test]
fn care_random_problems_converge_quickly() {
    for seed in 0..60 {
        let inst = Instance::random(8, 5, 3 + (seed as usize % 10), 100 + seed);
        let k = inst.ens.size();
        let cache = build_cache(&inst.obs(), &[1.0; 5]).unwrap();
        let g = (seed % 9) as f64 / 8.0;
        let w_mu = weight_mean_matrix(&cache, g);
        let plan = balanced_resample(&pf_weights(&cache, g), k, seed).unwrap();
        let a = etkpf::enspace::centered_transform(&w_mu, &plan.indices);
        let c = analysis_cov_es(&cache, g) * (k as f64 - 1.0);
        let c = (&c + c.transpose()) * 0.5;
        let problem = CareProblem::new(a, c.clone()).unwrap();
        let sol = solve_care(&problem, 1e-10, 50).unwrap();
        assert!(
            sol.iterations <= 10,
            "seed {seed}: {} iterations",
            sol.iterations
        );
        assert!(problem.residual(&sol.x).norm() <= 1e-10 * c.norm().max(1e-300) || c.norm() == 0.0);
    }
}

#[test]
fn gaussian_crps_matches_numerical_integral() {
    // CRPS = ∫ (F(x) − 1{x ≥ y})² dx for N(0, 1), y = 0.7.
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).unwrap();
    let y = 0.7;
    let h = 1e-3;
    let integral: f64 = (-10_000..10_000)
        .map(|i| {
            let x = (i as f64 + 0.5) * h;
            let step = if x >= y { 1.0 } else { 0.0 };
            (n.cdf(x) - step).powi(2) * h
        })
        .sum();
    assert!((crps_gaussian(0.0, 1.0, y) - integral).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn weights_are_a_probability_vector(seed: u64, g in 0.0f64..=1.0) {
        let inst = Instance::random(4, 3, 5, seed);
        let cache = build_cache(&inst.obs(), &[1.0; 3]).unwrap();
        let alpha = pf_weights(&cache, g);
        prop_assert!((alpha.sum() - 1.0).abs() < 1e-12);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn analysis_covariance_shrinks_with_information(seed: u64, g in 0.0f64..=1.0) {
        // P̃ ⪯ I/(k−1): the component covariance never exceeds the prior.
        let inst = Instance::random(4, 3, 6, seed);
        let cache = build_cache(&inst.obs(), &[1.0; 3]).unwrap();
        let p = analysis_cov_es(&cache, g);
        let eig = p.symmetric_eigenvalues();
        prop_assert!(eig.iter().all(|&l| (-1e-12..=1.0 / 5.0 + 1e-12).contains(&l)));
    }

    #[test]
    fn transform_preserves_mean_at_gamma_one(seed: u64) {
        // With uniform weights the analysis mean is the Kalman mean.
        let inst = Instance::random(5, 4, 6, seed);
        let (a, _) = global_analysis(&inst.ens, &inst.obs(), &GammaPolicy::fixed(1.0).unwrap(),
            FilterVariant::Deterministic, seed).unwrap();
        let m = oracle_mixture(&inst.ens, &inst.h, &inst.y, &inst.r, 1.0).unwrap();
        let kalman_mean = m.mu.column_mean();
        prop_assert!((a.mean() - kalman_mean).amax() < 1e-9);
    }
}
