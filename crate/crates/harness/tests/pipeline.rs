use std::path::{Path, PathBuf};

use etkpf::models::TwinRun;
use etkpf::verify::Metric;
use etkpf::verify::ScoreTable;
use etkpf_harness::archive::Archive;
use etkpf_harness::config::ExperimentConfig;
use etkpf_harness::run::{mean_after, run_cycled, run_forecast, score_ensemble};

fn shipped_configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "cfg"))
        .collect();
    v.sort();
    v
}

fn config(text: &str, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::parse(text).unwrap();
    c.output = out.to_path_buf();
    c
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let configs = shipped_configs();
    assert!(configs.len() >= 5);
    for p in configs {
        let c = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{e}"));
        let again = ExperimentConfig::parse(&c.serialize(true)).unwrap();
        assert_eq!(again, c, "{}", p.display());
        c.analysis_settings().unwrap();
        c.grid().unwrap();
        c.model_spec().unwrap();
    }
}

#[test]
fn level_error_config_uses_per_level_variances() {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/l96_level_errors.cfg");
    let c = ExperimentConfig::load(&p).unwrap();
    // Top-level wind error 2.1.
    assert!((c.obs_error_var[0] - 2.1f64.powi(2)).abs() < 1e-12);
    assert!((c.obs_error_var[2] - 1.6f64.powi(2)).abs() < 1e-12);
    assert_eq!(c.obs_error_var.len(), 20);
}

#[test]
fn ensemble_started_at_truth_stays_there_without_model_noise() {
    let tmp = tempfile::tempdir().unwrap();
    for gamma in [
        "filter.gamma = fixed\nfilter.gamma_value = 0.5",
        "filter.gamma = min_mse",
    ] {
        let text = format!(
            "model.kind = linear\nmodel.dim = 6\nmodel.transition = 0.9\nmodel.noise_var = 0\n\
             ensemble.size = 5\nensemble.init = truth\nobs.error_var = 0.3\nrun.cycles = 20\n{gamma}\n"
        );
        let run = run_cycled(&config(&text, &tmp.path().join("fixed"))).unwrap();
        for c in 0..20 {
            assert!(run.scores.get(c, 0, "state", Metric::Rmse).unwrap() < 1e-12);
            assert!(run.scores.get(c, 0, "state", Metric::Spread).unwrap() < 1e-12);
        }
    }
}

#[test]
fn forecast_lead_zero_reproduces_analysis_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let text =
        "model.kind = lorenz96\nmodel.dim = 40\nensemble.size = 8\nlocalization.radius = 3\n\
                obs.sites = every:2\nrun.cycles = 12\nforecast.leads = 0\n";
    let cfg = config(text, &tmp.path().join("a"));
    run_cycled(&cfg).unwrap();
    let f = run_forecast(&cfg, &cfg.output, &tmp.path().join("f")).unwrap();
    let arch = Archive::new(&cfg.output);
    let twin = TwinRun::<f64>::load(&arch.twin_dir()).unwrap();
    let mut expected = ScoreTable::new();
    for c in 0..12 {
        let a = arch.analysis(c).unwrap();
        score_ensemble(
            &mut expected,
            &cfg,
            c,
            0,
            "",
            &a,
            &twin.truth[c + 1],
            &twin.observations[c],
        )
        .unwrap();
    }
    let got: Vec<_> = f
        .scores
        .rows
        .iter()
        .filter(|r| !r.variable.starts_with("persistence."))
        .cloned()
        .collect();
    assert_eq!(got, expected.rows);
    assert!(f.scores.rows.iter().all(|r| r.lead == 0));
}

#[test]
fn launch_every_archive_length_gives_one_forecast() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "model.kind = lorenz96\nmodel.dim = 40\nensemble.size = 8\nlocalization.radius = 3\n\
                obs.sites = every:2\nrun.cycles = 10\nforecast.leads = 3\nforecast.launch_every = 10\n";
    let cfg = config(text, &tmp.path().join("a"));
    run_cycled(&cfg).unwrap();
    let f = run_forecast(&cfg, &cfg.output, &cfg.output).unwrap();
    assert!(f.scores.rows.iter().all(|r| r.cycle == 0));
    assert_eq!(
        f.summary_value(Some(3), "state", Metric::Rmse).map(|_| ()),
        Some(())
    );
    let summary = std::fs::read_to_string(cfg.output.join("forecast_summary.csv")).unwrap();
    assert!(summary.starts_with("lead,variable,metric,value,count\n"));
    assert!(summary.lines().any(|l| l.starts_with("all,state,crps,")));
}

#[test]
fn ensemble_forecast_beats_persistence() {
    let tmp = tempfile::tempdir().unwrap();
    let text =
        "model.kind = lorenz96\nmodel.dim = 40\nensemble.size = 20\nlocalization.radius = 4\n\
                obs.sites = every:2\nrun.cycles = 500\nrun.seed = 2\nforecast.leads = 4\n\
                forecast.launch_every = 5\nverify.spinup_cycles = 20\n";
    let cfg = config(text, &tmp.path().join("a"));
    let run = run_cycled(&cfg).unwrap();
    assert!(run.mean_after(20, "state", Metric::Rmse).unwrap() < 0.5 * run.climatology_std);
    let f = run_forecast(&cfg, &cfg.output, &cfg.output).unwrap();
    let ens = f.summary_value(None, "state", Metric::Crps).unwrap();
    let pers = f
        .summary_value(None, "persistence.state", Metric::Crps)
        .unwrap();
    assert!(ens <= pers, "ensemble {ens} persistence {pers}");
    for lead in 1..=4 {
        let e = f.summary_value(Some(lead), "state", Metric::Crps).unwrap();
        let p = f
            .summary_value(Some(lead), "persistence.state", Metric::Crps)
            .unwrap();
        assert!(e < p, "lead {lead}: {e} vs {p}");
    }
    // The archived score table agrees with a fresh recomputation.
    let again = etkpf_harness::rescore(&cfg.output).unwrap();
    assert_eq!(
        mean_after(&again, 20, "state", Metric::Crps),
        run.mean_after(20, "state", Metric::Crps)
    );
}

#[test]
fn event_scores_are_recorded_when_threshold_is_set() {
    let tmp = tempfile::tempdir().unwrap();
    let text =
        "model.kind = lorenz96\nmodel.dim = 40\nensemble.size = 10\nlocalization.radius = 4\n\
                obs.sites = every:2\nrun.cycles = 30\nverify.event_threshold = 5\n";
    let run = run_cycled(&config(text, &tmp.path().join("a"))).unwrap();
    let ets: Vec<_> = run
        .scores
        .rows
        .iter()
        .filter(|r| r.metric == Metric::Ets)
        .collect();
    assert_eq!(ets.len(), 30);
    run.scores.validate().unwrap();
    let csv = std::fs::read_to_string(tmp.path().join("a/scores.csv")).unwrap();
    assert!(csv.starts_with("cycle,lead,variable,metric,value\n"));
    let diag = std::fs::read_to_string(tmp.path().join("a/cycles/00000/diag.csv")).unwrap();
    assert!(diag.starts_with("site_index,gamma,ess\n"));
    assert_eq!(diag.lines().count(), 41);
}
