//! Cycled assimilation, forecasts and scoring.

use std::path::{Path, PathBuf};

use etkpf::enspace::{Ensemble, ObsBatch};
use etkpf::local::{local_analysis_field, LocatedObs};
use etkpf::models::{free_run, initial_truth, make_twin, ModelSpec, TwinRun};
use etkpf::seed::{derive_seed, stream};
use etkpf::verify::{self, Metric, ScoreTable};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::archive::{self, Archive, CycleFiles, Manifest, Status};
use crate::config::{ExperimentConfig, InitMode};
use crate::error::{core, HarnessError, Result};

/// Length of the free run behind the climatology.
pub const CLIMATOLOGY_STEPS: usize = 10_000;
/// Divergence: background RMSE above this multiple of the climatological std…
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// …for this many consecutive cycles.
pub const DIVERGENCE_CYCLES: usize = 5;

/// Counts consecutive cycles with background RMSE above a threshold.
#[derive(Debug, Clone)]
pub struct DivergenceMonitor {
    pub threshold: f64,
    consecutive: usize,
}

impl DivergenceMonitor {
    pub fn new(climatology_std: f64) -> Self {
        Self {
            threshold: DIVERGENCE_FACTOR * climatology_std,
            consecutive: 0,
        }
    }

    /// Records one cycle; true once the filter counts as diverged.
    pub fn observe(&mut self, rmse: f64) -> bool {
        // NaN counts as above the threshold.
        self.consecutive = if rmse <= self.threshold {
            0
        } else {
            self.consecutive + 1
        };
        self.consecutive >= DIVERGENCE_CYCLES
    }

    pub fn consecutive(&self) -> usize {
        self.consecutive
    }
}

/// Per-variable climatology from a free run.
#[derive(Debug, Clone)]
pub struct Climatology {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
    /// Sampled states (used to draw initial ensembles).
    pub states: Vec<DVector<f64>>,
}

impl Climatology {
    /// Root-mean-square of the per-variable standard deviations.
    pub fn std_scalar(&self) -> f64 {
        (self.std.map(|s| s * s).mean()).sqrt()
    }
}

pub fn climatology(spec: &ModelSpec<f64>, start: &DVector<f64>, seed: u64) -> Result<Climatology> {
    let states = free_run(spec, start, CLIMATOLOGY_STEPS, seed).map_err(core("models"))?;
    let n = states.len() as f64;
    let mean = states.iter().fold(DVector::zeros(spec.dim()), |a, x| a + x) / n;
    let var = states.iter().fold(DVector::zeros(spec.dim()), |a, x| {
        a + (x - &mean).map(|d| d * d)
    }) / (n - 1.0);
    Ok(Climatology {
        mean,
        std: var.map(f64::sqrt),
        states,
    })
}

/// Initial ensemble drawn according to `cfg.init`.
pub fn initial_ensemble(
    cfg: &ExperimentConfig,
    twin: &TwinRun<f64>,
    clim: &Climatology,
) -> Result<Ensemble<f64>> {
    let (q, k) = (cfg.model.dim(), cfg.ensemble_size);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::INITIAL, 1]));
    let states = match cfg.init {
        InitMode::Climatology => {
            // Draw from the second half of the free run, away from its start.
            let half = clim.states.len() / 2;
            let cols: Vec<DVector<f64>> = (0..k)
                .map(|_| clim.states[half + rng.random_range(0..clim.states.len() - half)].clone())
                .collect();
            DMatrix::from_columns(&cols)
        }
        InitMode::Prior => DMatrix::from_fn(q, k, |_, _| rng.sample::<f64, _>(StandardNormal)),
        InitMode::Truth => DMatrix::from_fn(q, k, |i, _| twin.truth[0][i]),
    };
    Ensemble::new(states).map_err(core("harness"))
}

/// Scores an ensemble valid at `truth` against the truth and the
/// observations `y` (variables `state` and `obs`), prefixing variable names
/// with `prefix`.
#[allow(clippy::too_many_arguments)]
pub fn score_ensemble(
    table: &mut ScoreTable,
    cfg: &ExperimentConfig,
    cycle: usize,
    lead: usize,
    prefix: &str,
    ens: &Ensemble<f64>,
    truth: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<()> {
    let err = core("verify");
    let q = ens.dim();
    let members: Vec<Vec<f64>> = (0..q)
        .map(|i| ens.states().row(i).iter().copied().collect())
        .collect();
    let mean: Vec<f64> = ens.mean().iter().copied().collect();
    let truth_v: Vec<f64> = truth.iter().copied().collect();

    let var = format!("{prefix}state");
    let crps: Vec<f64> = members
        .iter()
        .zip(&truth_v)
        .map(|(m, &t)| verify::crps_ensemble(m, t))
        .collect::<etkpf::Result<_>>()
        .map_err(&err)?;
    let cases: Vec<&[f64]> = members.iter().map(Vec::as_slice).collect();
    table.push(
        cycle,
        lead,
        &var,
        Metric::Rmse,
        Some(verify::rmse(&mean, &truth_v).map_err(&err)?),
    );
    table.push(
        cycle,
        lead,
        &var,
        Metric::Bias,
        Some(verify::bias(&mean, &truth_v).map_err(&err)?),
    );
    table.push(
        cycle,
        lead,
        &var,
        Metric::Spread,
        Some(verify::spread(&cases)),
    );
    table.push(cycle, lead, &var, Metric::Crps, Some(verify::mean(&crps)));

    let idx = cfg.obs_state_indices();
    if idx.is_empty() {
        return Ok(());
    }
    let var = format!("{prefix}obs");
    let yv: Vec<f64> = y.iter().copied().collect();
    let obs_cases: Vec<&[f64]> = idx.iter().map(|&i| members[i].as_slice()).collect();
    let obs_mean: Vec<f64> = idx.iter().map(|&i| mean[i]).collect();
    let crps: Vec<f64> = obs_cases
        .iter()
        .zip(&yv)
        .map(|(m, &o)| verify::crps_ensemble(m, o))
        .collect::<etkpf::Result<_>>()
        .map_err(&err)?;
    table.push(
        cycle,
        lead,
        &var,
        Metric::Rmse,
        Some(verify::rmse(&obs_mean, &yv).map_err(&err)?),
    );
    table.push(
        cycle,
        lead,
        &var,
        Metric::Bias,
        Some(verify::bias(&obs_mean, &yv).map_err(&err)?),
    );
    table.push(cycle, lead, &var, Metric::Crps, Some(verify::mean(&crps)));
    table.push(
        cycle,
        lead,
        &var,
        Metric::RmseSpreadRatio,
        verify::rmse_spread_ratio(&obs_cases, &yv, &cfg.obs_error_var).ok(),
    );
    if let Some(thr) = cfg.event_threshold {
        let probs: Vec<f64> = obs_cases
            .iter()
            .map(|m| verify::event_probability(m, thr))
            .collect();
        let outcomes: Vec<bool> = yv.iter().map(|&o| o > thr).collect();
        let s = verify::categorical_scores(&probs, &outcomes, 0.5).map_err(&err)?;
        table.push(cycle, lead, &var, Metric::Ets, s.ets);
        table.push(cycle, lead, &var, Metric::Fbi, s.fbi);
        table.push(cycle, lead, &var, Metric::Bss, s.bss);
    }
    Ok(())
}

/// Result of [`run_cycled`].
#[derive(Debug, Clone)]
pub struct CycledRun {
    pub archive: PathBuf,
    pub scores: ScoreTable,
    pub climatology_std: f64,
    pub completed: usize,
}

impl CycledRun {
    /// Mean of a lead-0 score over the cycles after spin-up.
    pub fn mean_after(&self, spinup: usize, variable: &str, metric: Metric) -> Option<f64> {
        mean_after(&self.scores, spinup, variable, metric)
    }
}

pub fn mean_after(
    scores: &ScoreTable,
    spinup: usize,
    variable: &str,
    metric: Metric,
) -> Option<f64> {
    let v: Vec<f64> = scores
        .rows
        .iter()
        .filter(|r| {
            r.cycle >= spinup && r.lead == 0 && r.variable == variable && r.metric == metric
        })
        .filter_map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn twin_for(cfg: &ExperimentConfig, spec: &ModelSpec<f64>) -> Result<TwinRun<f64>> {
    let r = DVector::from_vec(cfg.obs_error_var.clone());
    make_twin(spec, cfg.cycles, &cfg.obs_state_indices(), &r, cfg.seed).map_err(core("models"))
}

fn located_obs(
    cfg: &ExperimentConfig,
    twin: &TwinRun<f64>,
    c: usize,
    bg: &Ensemble<f64>,
) -> Result<LocatedObs<f64>> {
    let batch: ObsBatch<f64> = twin.obs_batch(c, bg).map_err(core("enspace"))?;
    LocatedObs::new(batch, cfg.obs_sites.clone()).map_err(core("local"))
}

/// Runs the twin experiment described by `cfg`, writing the archive to
/// `cfg.output`.
pub fn run_cycled(cfg: &ExperimentConfig) -> Result<CycledRun> {
    let spec = cfg.model_spec().map_err(core("models"))?;
    let grid = cfg.grid().map_err(core("local"))?;
    let settings = cfg.analysis_settings().map_err(core("local"))?;
    let (q, k) = (cfg.model.dim(), cfg.ensemble_size);

    let arch = Archive::create(&cfg.output)?;
    let mut manifest = Manifest {
        config_hash: archive::config_hash(cfg),
        seed: cfg.seed,
        cycles: cfg.cycles,
        completed: 0,
        k,
        q,
        status: Status::Running,
    };
    arch.write_manifest(&manifest)?;
    arch.write_text("config.cfg", &cfg.serialize(false))?;

    let twin = twin_for(cfg, &spec)?;
    twin.save(&arch.twin_dir()).map_err(core("archive"))?;
    let start = initial_truth(&spec, cfg.seed).map_err(core("models"))?;
    let clim = climatology(&spec, &start, cfg.seed)?;
    archive::save_climatology(
        &arch.path("climatology.bin"),
        &clim.mean,
        &clim.std,
        CLIMATOLOGY_STEPS,
    )?;
    let mut monitor = DivergenceMonitor::new(clim.std_scalar());

    let mut ens = initial_ensemble(cfg, &twin, &clim)?;
    archive::save_ensemble(&arch.path("initial.bin"), &ens, 0)?;
    let mut scores = ScoreTable::new();
    for c in 0..cfg.cycles {
        let bg = spec
            .propagate(&ens, cfg.seed, c as u64)
            .and_then(|e| e.inflate(cfg.inflation))
            .map_err(core("models"))?;
        score_ensemble(
            &mut scores,
            cfg,
            c,
            0,
            "",
            &bg,
            &twin.truth[c + 1],
            &twin.observations[c],
        )?;
        let rmse = scores
            .get(c, 0, "state", Metric::Rmse)
            .unwrap_or(f64::INFINITY);
        if monitor.observe(rmse) {
            let (threshold, over) = (monitor.threshold, monitor.consecutive());
            manifest.completed = c;
            manifest.status = Status::Diverged;
            arch.write_manifest(&manifest)?;
            archive::save_ensemble(&arch.path("divergence_background.bin"), &bg, c)?;
            arch.write_text(
                "divergence.txt",
                &format!(
                    "cycle={c}\nrmse={rmse}\nthreshold={threshold}\nconsecutive={over}\n\
                     climatology_std={}\nspread={}\n",
                    clim.std_scalar(),
                    scores
                        .get(c, 0, "state", Metric::Spread)
                        .unwrap_or(f64::NAN)
                ),
            )?;
            scores
                .save(&arch.path("scores.csv"))
                .map_err(core("archive"))?;
            return Err(HarnessError::Diverged {
                cycle: c,
                rmse,
                threshold,
                consecutive: over,
            });
        }
        let obs = located_obs(cfg, &twin, c, &bg)?;
        let la = local_analysis_field(
            &bg,
            &obs,
            &grid,
            &settings,
            derive_seed(cfg.seed, &[stream::ANALYSIS, c as u64]),
        )
        .map_err(|e| HarnessError::Cycle {
            cycle: c,
            source: Box::new(core("local")(e)),
        })?;
        arch.write_cycle(
            c,
            &CycleFiles {
                background: &bg,
                analysis: &la.analysis,
                sites: &la.coarse_sites,
                gamma: &la.gamma,
                ess: &la.ess,
            },
        )?;
        ens = la.analysis;
        log::debug!("cycle {c}: background rmse {rmse:.4}");
    }
    scores
        .save(&arch.path("scores.csv"))
        .map_err(core("archive"))?;
    manifest.completed = cfg.cycles;
    manifest.status = Status::Complete;
    arch.write_manifest(&manifest)?;
    Ok(CycledRun {
        archive: cfg.output.clone(),
        scores,
        climatology_std: clim.std_scalar(),
        completed: cfg.cycles,
    })
}

/// Recomputes `scores.csv` of an archive from its stored backgrounds.
pub fn rescore(dir: &Path) -> Result<ScoreTable> {
    let arch = Archive::new(dir);
    let manifest = arch.manifest()?;
    let cfg = arch.config()?;
    let twin = TwinRun::<f64>::load(&arch.twin_dir()).map_err(core("archive"))?;
    let mut scores = ScoreTable::new();
    for c in 0..manifest.completed {
        let bg = arch.background(c)?;
        score_ensemble(
            &mut scores,
            &cfg,
            c,
            0,
            "",
            &bg,
            &twin.truth[c + 1],
            &twin.observations[c],
        )?;
    }
    scores
        .save(&arch.path("scores.csv"))
        .map_err(core("archive"))?;
    Ok(scores)
}

/// Forecast scores and their per-lead aggregation.
#[derive(Debug, Clone)]
pub struct ForecastRun {
    pub scores: ScoreTable,
    /// `(lead, variable, metric, mean, count)`; lead `None` aggregates all leads.
    pub summary: Vec<(Option<usize>, String, Metric, f64, usize)>,
}

impl ForecastRun {
    pub fn summary_value(
        &self,
        lead: Option<usize>,
        variable: &str,
        metric: Metric,
    ) -> Option<f64> {
        self.summary
            .iter()
            .find(|(l, v, m, _, _)| *l == lead && v == variable && *m == metric)
            .map(|s| s.3)
    }
}

pub const SUMMARY_HEADER: &str = "lead,variable,metric,value,count";

/// Launches forecasts from every `cfg.launch_every`-th analysis of the
/// archive and scores each lead up to `cfg.forecast_leads` (lead 0 is the
/// analysis itself). A persistence forecast (the analysis ensemble held
/// fixed) is scored alongside under the `persistence.` prefix. Writes
/// `forecast.csv` and `forecast_summary.csv` into `out`.
pub fn run_forecast(cfg: &ExperimentConfig, archive_dir: &Path, out: &Path) -> Result<ForecastRun> {
    let arch = Archive::new(archive_dir);
    let manifest = arch.manifest()?;
    if manifest.config_hash != archive::config_hash(cfg) {
        return Err(HarnessError::Archive(format!(
            "{} was produced by a different configuration or seed",
            archive_dir.display()
        )));
    }
    let spec = cfg.model_spec().map_err(core("models"))?;
    let twin = TwinRun::<f64>::load(&arch.twin_dir()).map_err(core("archive"))?;
    let mut scores = ScoreTable::new();
    for c in (cfg.spinup_cycles..manifest.completed).step_by(cfg.launch_every) {
        let analysis = arch.analysis(c)?;
        let fseed = derive_seed(cfg.seed, &[stream::FORECAST, c as u64]);
        let mut ens = analysis.clone();
        for lead in 0..=cfg.forecast_leads {
            let t = c + lead;
            if t >= twin.cycles() {
                break;
            }
            if lead > 0 {
                ens = spec
                    .propagate(&ens, fseed, lead as u64)
                    .map_err(core("models"))?;
            }
            let (truth, y) = (&twin.truth[t + 1], &twin.observations[t]);
            score_ensemble(&mut scores, cfg, c, lead, "", &ens, truth, y)?;
            score_ensemble(
                &mut scores,
                cfg,
                c,
                lead,
                "persistence.",
                &analysis,
                truth,
                y,
            )?;
        }
    }
    let summary = summarize(&scores);
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    scores
        .save(&out.join("forecast.csv"))
        .map_err(core("archive"))?;
    let mut text = format!("{SUMMARY_HEADER}\n");
    for (lead, var, metric, value, count) in &summary {
        let lead = lead.map_or_else(|| "all".to_string(), |l| l.to_string());
        text.push_str(&format!("{lead},{var},{metric},{value},{count}\n"));
    }
    let p = out.join("forecast_summary.csv");
    std::fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))?;
    Ok(ForecastRun { scores, summary })
}

fn summarize(scores: &ScoreTable) -> Vec<(Option<usize>, String, Metric, f64, usize)> {
    let mut keys: Vec<(String, Metric)> = scores
        .rows
        .iter()
        .map(|r| (r.variable.clone(), r.metric))
        .collect();
    keys.sort();
    keys.dedup();
    let mut leads: Vec<usize> = scores.rows.iter().map(|r| r.lead).collect();
    leads.sort_unstable();
    leads.dedup();
    let mut out = Vec::new();
    for lead in leads.iter().map(|&l| Some(l)).chain([None]) {
        for (var, metric) in &keys {
            if let Some((mean, n)) = scores.mean_of(var, *metric, lead) {
                out.push((lead, var.clone(), *metric, mean, n));
            }
        }
    }
    out
}

/// Metrics reported by [`compare`].
pub const COMPARE_METRICS: [Metric; 4] = [Metric::Crps, Metric::Bias, Metric::Rmse, Metric::Spread];
pub const COMPARE_HEADER: &str = "run,variable,metric,reference,value,delta";

/// Side-by-side post-spin-up score means of several archives relative to
/// the first, as CSV.
pub fn compare(dirs: &[PathBuf]) -> Result<String> {
    let [reference, ..] = dirs else {
        return Err(HarnessError::Archive(
            "compare needs at least one archive".into(),
        ));
    };
    let load = |d: &Path| -> Result<(ScoreTable, usize)> {
        let arch = Archive::new(d);
        let cfg = arch.config()?;
        let scores = ScoreTable::load(&arch.path("scores.csv")).map_err(core("archive"))?;
        Ok((scores, cfg.spinup_cycles))
    };
    let (ref_scores, ref_spin) = load(reference)?;
    let mut out = format!("{COMPARE_HEADER}\n");
    for d in dirs {
        let (scores, spin) = load(d)?;
        for var in ["state", "obs"] {
            for metric in COMPARE_METRICS {
                let r = mean_after(&ref_scores, ref_spin, var, metric);
                let v = mean_after(&scores, spin, var, metric);
                if let (Some(r), Some(v)) = (r, v) {
                    out.push_str(&format!(
                        "{},{var},{metric},{r},{v},{}\n",
                        d.display(),
                        v - r
                    ));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn divergence_needs_consecutive_exceedances() {
        let mut m = DivergenceMonitor::new(1.0);
        for _ in 0..4 {
            assert!(!m.observe(11.0));
        }
        assert!(!m.observe(9.0));
        for _ in 0..4 {
            assert!(!m.observe(f64::NAN));
        }
        assert!(m.observe(10.5));
        assert_eq!(m.consecutive(), 5);
    }
}
