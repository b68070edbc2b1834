//! Experiment configuration: flat `key = value` lines with dotted section
//! prefixes.
//!
//! Grammar:
//!
//! ```text
//! file    = { line "\n" }
//! line    = blank | comment | entry
//! comment = { " " } "#" { any }
//! entry   = { " " } key { " " } "=" { " " } value { " " }
//! key     = section "." name        (lowercase letters, digits, "_")
//! ```
//!
//! Values run to the end of the line; lists are comma separated. Every key
//! may appear at most once and unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use etkpf::gamma::{uniform_grid, GammaPolicy};
use etkpf::local::{AnalysisSettings, FilterVariant, GridSpec, LocalizationSpec, Topology};
use etkpf::models::{ModelKind, ModelSpec, NoiseSampling};
use nalgebra::{DMatrix, DVector};

/// Malformed configuration, with the offending line and key when known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub file: Option<PathBuf>,
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(file) = &self.file {
            write!(f, "{}: ", file.display())?;
        }
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if let Some(key) = &self.key {
            write!(f, "key `{key}`: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "model.kind",
    "model.dim",
    "model.forcing",
    "model.dt",
    "model.steps",
    "model.transition",
    "model.noise_var",
    "model.noise_sampling",
    "filter.variant",
    "filter.gamma",
    "filter.gamma_value",
    "filter.ess_fraction",
    "filter.gamma_step",
    "filter.inflation",
    "ensemble.size",
    "ensemble.init",
    "localization.radius",
    "localization.coarse_stride",
    "grid.topology",
    "grid.nx",
    "grid.ny",
    "obs.sites",
    "obs.error_var",
    "obs.error_sd_levels",
    "run.cycles",
    "run.seed",
    "run.output",
    "forecast.leads",
    "forecast.launch_every",
    "verify.event_threshold",
    "verify.spinup_cycles",
];

const L96_KEYS: &[&str] = &["model.forcing", "model.dt", "model.steps"];
const LINEAR_KEYS: &[&str] = &[
    "model.transition",
    "model.noise_var",
    "model.noise_sampling",
];

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Lorenz96 {
        dim: usize,
        forcing: f64,
        dt: f64,
        steps: usize,
    },
    Linear {
        dim: usize,
        /// Row-major `dim × dim`.
        transition: Vec<f64>,
        noise_var: Vec<f64>,
        noise_sampling: NoiseSampling,
    },
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        match self {
            ModelConfig::Lorenz96 { dim, .. } | ModelConfig::Linear { dim, .. } => *dim,
        }
    }

    pub fn spec(&self) -> etkpf::Result<ModelSpec<f64>> {
        match self {
            ModelConfig::Lorenz96 {
                dim,
                forcing,
                dt,
                steps,
            } => ModelSpec::new(
                *dim,
                ModelKind::Lorenz96 {
                    forcing: *forcing,
                    dt: *dt,
                    steps: *steps,
                },
            ),
            ModelConfig::Linear {
                dim,
                transition,
                noise_var,
                noise_sampling,
            } => Ok(ModelSpec::linear(
                DMatrix::from_row_slice(*dim, *dim, transition),
                DVector::from_column_slice(noise_var),
            )?
            .with_noise_sampling(*noise_sampling)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaChoice {
    Fixed(f64),
    Ess { fraction: f64 },
    MinMse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Members drawn from the climatological free run.
    Climatology,
    /// Members drawn from `N(0, I)`, the linear model's truth prior.
    Prior,
    /// Every member equals the initial truth.
    Truth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub variant: FilterVariant,
    pub gamma: GammaChoice,
    pub gamma_step: f64,
    pub inflation: f64,
    pub ensemble_size: usize,
    pub init: InitMode,
    /// `None` disables localization.
    pub radius: Option<f64>,
    pub coarse_stride: usize,
    pub topology: Topology,
    pub obs_sites: Vec<usize>,
    /// Error variance of each observed site.
    pub obs_error_var: Vec<f64>,
    pub cycles: usize,
    pub seed: u64,
    pub output: PathBuf,
    pub forecast_leads: usize,
    pub launch_every: usize,
    pub event_threshold: Option<f64>,
    /// Leading cycles left out of run summaries.
    pub spinup_cycles: usize,
}

struct Entry {
    line: usize,
    value: String,
}

struct Entries {
    map: BTreeMap<String, Entry>,
}

fn err(line: Option<usize>, key: Option<&str>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        file: None,
        line,
        key: key.map(str::to_string),
        message: message.into(),
    }
}

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| err(Some(line), None, "expected `key = value`"))?;
            let key = key.trim();
            let value = value.trim();
            let well_formed = key
                .split_once('.')
                .is_some_and(|(s, n)| !s.is_empty() && !n.is_empty())
                && key
                    .chars()
                    .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.');
            if !well_formed {
                return Err(err(
                    Some(line),
                    Some(key),
                    "malformed key (expected section.name)",
                ));
            }
            if !KEYS.contains(&key) {
                return Err(err(Some(line), Some(key), "unknown key"));
            }
            if value.is_empty() {
                return Err(err(Some(line), Some(key), "empty value"));
            }
            if let Some(prev) = map.get(key) {
                let prev: &Entry = prev;
                return Err(err(
                    Some(line),
                    Some(key),
                    format!("duplicate key (first set on line {})", prev.line),
                ));
            }
            map.insert(
                key.to_string(),
                Entry {
                    line,
                    value: value.to_string(),
                },
            );
        }
        Ok(Self { map })
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.map.get(key).map(|e| e.line)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|e| e.value.as_str())
    }

    fn fail(&self, key: &str, message: impl Into<String>) -> ConfigError {
        err(self.line(key), Some(key), message)
    }

    fn required(&self, key: &str) -> Result<&str, ConfigError> {
        self.raw(key)
            .ok_or_else(|| err(None, Some(key), "required key is missing"))
    }

    fn parse_value<V: std::str::FromStr>(
        &self,
        key: &str,
        what: &str,
    ) -> Result<Option<V>, ConfigError> {
        self.raw(key)
            .map(|v| {
                v.parse::<V>()
                    .map_err(|_| self.fail(key, format!("expected {what}, got {v:?}")))
            })
            .transpose()
    }

    fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self
            .parse_value(key, "a nonnegative integer")?
            .unwrap_or(default))
    }

    fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v: f64 = self.parse_value(key, "a number")?.unwrap_or(default);
        if !v.is_finite() {
            return Err(self.fail(key, "value must be finite"));
        }
        Ok(v)
    }

    fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|t| {
                        let t = t.trim();
                        t.parse::<f64>()
                            .ok()
                            .filter(|x| x.is_finite())
                            .ok_or_else(|| self.fail(key, format!("bad number {t:?} in list")))
                    })
                    .collect()
            })
            .transpose()
    }

    fn check(&self, key: &str, ok: bool, message: &str) -> Result<(), ConfigError> {
        if ok {
            Ok(())
        } else {
            Err(self.fail(key, message))
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let e = Entries::parse(text)?;

        let kind = e.required("model.kind")?;
        let dim: usize = e
            .parse_value("model.dim", "a positive integer")?
            .ok_or_else(|| err(None, Some("model.dim"), "required key is missing"))?;
        e.check("model.dim", dim >= 1, "must be at least 1")?;
        let model = match kind {
            "lorenz96" => {
                if let Some(k) = LINEAR_KEYS.iter().find(|k| e.raw(k).is_some()) {
                    return Err(e.fail(k, "only valid for model.kind = linear"));
                }
                let forcing = e.f64_or("model.forcing", 8.0)?;
                let dt = e.f64_or("model.dt", 0.005)?;
                e.check("model.dt", dt > 0.0, "must be positive")?;
                let steps = e.usize_or("model.steps", 40)?;
                e.check("model.steps", steps >= 1, "must be at least 1")?;
                e.check(
                    "model.dim",
                    dim >= 4,
                    "Lorenz-96 needs at least 4 variables",
                )?;
                ModelConfig::Lorenz96 {
                    dim,
                    forcing,
                    dt,
                    steps,
                }
            }
            "linear" => {
                if let Some(k) = L96_KEYS.iter().find(|k| e.raw(k).is_some()) {
                    return Err(e.fail(k, "only valid for model.kind = lorenz96"));
                }
                let t = e.f64_list("model.transition")?.ok_or_else(|| {
                    err(
                        None,
                        Some("model.transition"),
                        "required for a linear model",
                    )
                })?;
                let transition = match t.len() {
                    1 => DMatrix::<f64>::identity(dim, dim) * t[0],
                    n if n == dim => DMatrix::from_diagonal(&DVector::from_vec(t)),
                    n if n == dim * dim => DMatrix::from_row_slice(dim, dim, &t),
                    n => {
                        return Err(e.fail(
                            "model.transition",
                            format!("expected 1, {dim} or {} values, got {n}", dim * dim),
                        ))
                    }
                };
                let noise = e.f64_list("model.noise_var")?.unwrap_or_else(|| vec![0.0]);
                let noise_var = broadcast(&e, "model.noise_var", noise, dim)?;
                e.check(
                    "model.noise_var",
                    noise_var.iter().all(|&v| v >= 0.0),
                    "variances must be nonnegative",
                )?;
                let noise_sampling = match e.raw("model.noise_sampling").unwrap_or("random") {
                    "random" => NoiseSampling::Random,
                    "exact" => NoiseSampling::ExactMoments,
                    v => {
                        return Err(e.fail(
                            "model.noise_sampling",
                            format!("expected random or exact, got {v:?}"),
                        ))
                    }
                };
                ModelConfig::Linear {
                    dim,
                    transition: transition.transpose().as_slice().to_vec(),
                    noise_var,
                    noise_sampling,
                }
            }
            other => {
                return Err(e.fail(
                    "model.kind",
                    format!("expected lorenz96 or linear, got {other:?}"),
                ))
            }
        };
        let is_l96 = matches!(model, ModelConfig::Lorenz96 { .. });

        let variant = match e.raw("filter.variant").unwrap_or("deterministic") {
            "deterministic" => FilterVariant::Deterministic,
            "stochastic" => FilterVariant::Stochastic,
            v => {
                return Err(e.fail(
                    "filter.variant",
                    format!("expected deterministic or stochastic, got {v:?}"),
                ))
            }
        };
        let gamma_value = e.f64_or("filter.gamma_value", 1.0)?;
        let ess_fraction = e.f64_or("filter.ess_fraction", 0.5)?;
        let gamma = match e.raw("filter.gamma").unwrap_or("fixed") {
            "fixed" => {
                e.check(
                    "filter.gamma_value",
                    (0.0..=1.0).contains(&gamma_value),
                    "must lie in [0, 1]",
                )?;
                if e.raw("filter.ess_fraction").is_some() {
                    return Err(e.fail("filter.ess_fraction", "only valid with filter.gamma = ess"));
                }
                GammaChoice::Fixed(gamma_value)
            }
            "ess" => {
                e.check(
                    "filter.ess_fraction",
                    ess_fraction > 0.0 && ess_fraction <= 1.0,
                    "must lie in (0, 1]",
                )?;
                if e.raw("filter.gamma_value").is_some() {
                    return Err(
                        e.fail("filter.gamma_value", "only valid with filter.gamma = fixed")
                    );
                }
                GammaChoice::Ess {
                    fraction: ess_fraction,
                }
            }
            "min_mse" => {
                for k in ["filter.gamma_value", "filter.ess_fraction"] {
                    if e.raw(k).is_some() {
                        return Err(e.fail(k, "not used with filter.gamma = min_mse"));
                    }
                }
                GammaChoice::MinMse
            }
            v => {
                return Err(e.fail(
                    "filter.gamma",
                    format!("expected fixed, ess or min_mse, got {v:?}"),
                ))
            }
        };
        let gamma_step = e.f64_or("filter.gamma_step", etkpf::gamma::DEFAULT_GRID_STEP)?;
        e.check(
            "filter.gamma_step",
            gamma_step > 0.0 && gamma_step <= 1.0,
            "must lie in (0, 1]",
        )?;
        let inflation = e.f64_or("filter.inflation", if is_l96 { 1.05 } else { 1.0 })?;
        e.check("filter.inflation", inflation >= 1.0, "must be at least 1")?;

        let ensemble_size: usize = e
            .parse_value("ensemble.size", "an integer")?
            .ok_or_else(|| err(None, Some("ensemble.size"), "required key is missing"))?;
        e.check("ensemble.size", ensemble_size >= 2, "must be at least 2")?;
        let init =
            match e
                .raw("ensemble.init")
                .unwrap_or(if is_l96 { "climatology" } else { "prior" })
            {
                "climatology" => InitMode::Climatology,
                "prior" => InitMode::Prior,
                "truth" => InitMode::Truth,
                v => {
                    return Err(e.fail(
                        "ensemble.init",
                        format!("expected climatology, prior or truth, got {v:?}"),
                    ))
                }
            };

        let radius = match e.raw("localization.radius").unwrap_or("inf") {
            "inf" => None,
            _ => {
                let r = e.f64_or("localization.radius", 0.0)?;
                e.check("localization.radius", r > 0.0, "must be positive or inf")?;
                Some(r)
            }
        };
        let coarse_stride = e.usize_or("localization.coarse_stride", 1)?;
        e.check(
            "localization.coarse_stride",
            coarse_stride >= 1,
            "must be at least 1",
        )?;

        let topology = match e.raw("grid.topology").unwrap_or("ring") {
            "ring" => {
                for k in ["grid.nx", "grid.ny"] {
                    if e.raw(k).is_some() {
                        return Err(e.fail(k, "only valid with grid.topology = lattice"));
                    }
                }
                Topology::Ring { n: dim }
            }
            "lattice" => {
                let nx: usize = e
                    .parse_value("grid.nx", "an integer")?
                    .ok_or_else(|| err(None, Some("grid.nx"), "required for a lattice"))?;
                let ny: usize = e
                    .parse_value("grid.ny", "an integer")?
                    .ok_or_else(|| err(None, Some("grid.ny"), "required for a lattice"))?;
                e.check(
                    "grid.nx",
                    nx >= 1 && ny >= 1,
                    "lattice extents must be positive",
                )?;
                e.check(
                    "grid.nx",
                    dim.is_multiple_of(nx * ny),
                    "model.dim must be a multiple of grid.nx * grid.ny",
                )?;
                Topology::Lattice { nx, ny }
            }
            v => {
                return Err(e.fail(
                    "grid.topology",
                    format!("expected ring or lattice, got {v:?}"),
                ))
            }
        };
        let n_sites = match topology {
            Topology::Ring { n } => n,
            Topology::Lattice { nx, ny } => nx * ny,
        };
        if let Err(msg) = GridSpec::new(topology, coarse_stride) {
            return Err(e.fail("localization.coarse_stride", msg.to_string()));
        }

        let obs_sites = parse_sites(&e, e.raw("obs.sites").unwrap_or("all"), n_sites)?;
        let obs_error_var = match (
            e.f64_list("obs.error_var")?,
            e.f64_list("obs.error_sd_levels")?,
        ) {
            (Some(_), Some(_)) => {
                return Err(e.fail(
                    "obs.error_sd_levels",
                    "set either obs.error_var or obs.error_sd_levels, not both",
                ))
            }
            (Some(v), None) => broadcast(&e, "obs.error_var", v, obs_sites.len())?,
            (None, Some(levels)) => {
                e.check(
                    "obs.error_sd_levels",
                    levels.iter().all(|&s| s > 0.0),
                    "standard deviations must be positive",
                )?;
                (0..obs_sites.len())
                    .map(|i| levels[i % levels.len()].powi(2))
                    .collect()
            }
            (None, None) => vec![1.0; obs_sites.len()],
        };
        let var_key = if e.raw("obs.error_sd_levels").is_some() {
            "obs.error_sd_levels"
        } else {
            "obs.error_var"
        };
        e.check(
            var_key,
            obs_error_var.iter().all(|&v| v > 0.0),
            "error variances must be positive",
        )?;

        let cycles: usize = e
            .parse_value("run.cycles", "an integer")?
            .ok_or_else(|| err(None, Some("run.cycles"), "required key is missing"))?;
        e.check("run.cycles", cycles >= 1, "must be at least 1")?;
        let seed: u64 = e
            .parse_value("run.seed", "an unsigned integer")?
            .unwrap_or(0);
        let output = PathBuf::from(e.raw("run.output").unwrap_or("out"));
        let forecast_leads = e.usize_or("forecast.leads", 0)?;
        let launch_every = e.usize_or("forecast.launch_every", 1)?;
        e.check(
            "forecast.launch_every",
            launch_every >= 1,
            "must be at least 1",
        )?;
        let event_threshold = match e.raw("verify.event_threshold") {
            None | Some("none") => None,
            Some(_) => Some(e.f64_or("verify.event_threshold", 0.0)?),
        };
        let spinup_cycles = e.usize_or("verify.spinup_cycles", 0)?;
        e.check(
            "verify.spinup_cycles",
            spinup_cycles < cycles,
            "must be smaller than run.cycles",
        )?;

        Ok(Self {
            model,
            variant,
            gamma,
            gamma_step,
            inflation,
            ensemble_size,
            init,
            radius,
            coarse_stride,
            topology,
            obs_sites,
            obs_error_var,
            cycles,
            seed,
            output,
            forecast_leads,
            launch_every,
            event_threshold,
            spinup_cycles,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| err(None, None, format!("cannot read: {e}")));
        text.and_then(|t| Self::parse(&t)).map_err(|mut e| {
            e.file = Some(path.to_path_buf());
            e
        })
    }

    /// Canonical text form. Every key is written explicitly; `run.output` is
    /// omitted when `with_output` is false so that archives do not depend on
    /// where they were written.
    pub fn serialize(&self, with_output: bool) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        match &self.model {
            ModelConfig::Lorenz96 {
                dim,
                forcing,
                dt,
                steps,
            } => {
                put("model.kind", "lorenz96".into());
                put("model.dim", dim.to_string());
                put("model.forcing", forcing.to_string());
                put("model.dt", dt.to_string());
                put("model.steps", steps.to_string());
            }
            ModelConfig::Linear {
                dim,
                transition,
                noise_var,
                noise_sampling,
            } => {
                put("model.kind", "linear".into());
                put("model.dim", dim.to_string());
                put("model.transition", list(transition));
                put("model.noise_var", list(noise_var));
                put(
                    "model.noise_sampling",
                    match noise_sampling {
                        NoiseSampling::Random => "random",
                        NoiseSampling::ExactMoments => "exact",
                    }
                    .into(),
                );
            }
        }
        put(
            "filter.variant",
            match self.variant {
                FilterVariant::Deterministic => "deterministic",
                FilterVariant::Stochastic => "stochastic",
            }
            .into(),
        );
        match self.gamma {
            GammaChoice::Fixed(g) => {
                put("filter.gamma", "fixed".into());
                put("filter.gamma_value", g.to_string());
            }
            GammaChoice::Ess { fraction } => {
                put("filter.gamma", "ess".into());
                put("filter.ess_fraction", fraction.to_string());
            }
            GammaChoice::MinMse => put("filter.gamma", "min_mse".into()),
        }
        put("filter.gamma_step", self.gamma_step.to_string());
        put("filter.inflation", self.inflation.to_string());
        put("ensemble.size", self.ensemble_size.to_string());
        put(
            "ensemble.init",
            match self.init {
                InitMode::Climatology => "climatology",
                InitMode::Prior => "prior",
                InitMode::Truth => "truth",
            }
            .into(),
        );
        put(
            "localization.radius",
            self.radius
                .map_or_else(|| "inf".to_string(), |r| r.to_string()),
        );
        put("localization.coarse_stride", self.coarse_stride.to_string());
        match self.topology {
            Topology::Ring { .. } => put("grid.topology", "ring".into()),
            Topology::Lattice { nx, ny } => {
                put("grid.topology", "lattice".into());
                put("grid.nx", nx.to_string());
                put("grid.ny", ny.to_string());
            }
        }
        put(
            "obs.sites",
            if self.obs_sites.is_empty() {
                "none".into()
            } else {
                self.obs_sites
                    .iter()
                    .map(|s| s.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            },
        );
        if !self.obs_error_var.is_empty() {
            put("obs.error_var", list(&self.obs_error_var));
        }
        put("run.cycles", self.cycles.to_string());
        put("run.seed", self.seed.to_string());
        if with_output {
            put("run.output", self.output.display().to_string());
        }
        put("forecast.leads", self.forecast_leads.to_string());
        put("forecast.launch_every", self.launch_every.to_string());
        put(
            "verify.event_threshold",
            self.event_threshold
                .map_or_else(|| "none".to_string(), |t| t.to_string()),
        );
        put("verify.spinup_cycles", self.spinup_cycles.to_string());
        out
    }

    pub fn model_spec(&self) -> etkpf::Result<ModelSpec<f64>> {
        self.model.spec()
    }

    pub fn grid(&self) -> etkpf::Result<GridSpec> {
        GridSpec::new(self.topology, self.coarse_stride)
    }

    pub fn gamma_policy(&self) -> GammaPolicy<f64> {
        let grid = uniform_grid(self.gamma_step);
        match self.gamma {
            GammaChoice::Fixed(g) => GammaPolicy::Fixed(g),
            GammaChoice::Ess { fraction } => GammaPolicy::EssTarget { fraction, grid },
            GammaChoice::MinMse => GammaPolicy::MinMse { grid },
        }
    }

    pub fn analysis_settings(&self) -> etkpf::Result<AnalysisSettings<f64>> {
        Ok(AnalysisSettings {
            policy: self.gamma_policy(),
            variant: self.variant,
            localization: match self.radius {
                Some(r) => LocalizationSpec::new(r)?,
                None => LocalizationSpec::global(),
            },
        })
    }

    /// State variables per grid site.
    pub fn block(&self) -> usize {
        let n = match self.topology {
            Topology::Ring { n } => n,
            Topology::Lattice { nx, ny } => nx * ny,
        };
        self.model.dim() / n
    }

    /// State index observed at each observed site (first variable of the
    /// site's block).
    pub fn obs_state_indices(&self) -> Vec<usize> {
        let b = self.block();
        self.obs_sites.iter().map(|&s| s * b).collect()
    }
}

fn broadcast(e: &Entries, key: &str, v: Vec<f64>, n: usize) -> Result<Vec<f64>, ConfigError> {
    match v.len() {
        1 => Ok(vec![v[0]; n]),
        m if m == n => Ok(v),
        m => Err(e.fail(key, format!("expected 1 or {n} values, got {m}"))),
    }
}

/// `all`, `none`, `every:N`, `every:N+offset` or an explicit comma list.
fn parse_sites(e: &Entries, v: &str, n_sites: usize) -> Result<Vec<usize>, ConfigError> {
    let key = "obs.sites";
    let sites: Vec<usize> = match v {
        "all" => (0..n_sites).collect(),
        "none" => Vec::new(),
        _ if v.starts_with("every:") => {
            let spec = &v["every:".len()..];
            let (stride, offset) = match spec.split_once('+') {
                Some((s, o)) => (s, o),
                None => (spec, "0"),
            };
            let stride: usize = stride
                .trim()
                .parse()
                .ok()
                .filter(|&s| s >= 1)
                .ok_or_else(|| e.fail(key, format!("bad stride in {v:?}")))?;
            let offset: usize = offset
                .trim()
                .parse()
                .ok()
                .filter(|&o| o < stride)
                .ok_or_else(|| e.fail(key, format!("bad offset in {v:?}")))?;
            (offset..n_sites).step_by(stride).collect()
        }
        _ => v
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| e.fail(key, format!("bad site {:?}", t.trim())))
            })
            .collect::<Result<_, _>>()?,
    };
    if let Some(&s) = sites.iter().find(|&&s| s >= n_sites) {
        return Err(e.fail(key, format!("site {s} outside the grid of {n_sites} sites")));
    }
    let mut sorted = sites.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != sites.len() {
        return Err(e.fail(key, "sites must be distinct"));
    }
    Ok(sites)
}

#[cfg(test)]
mod tests {
    use super::*;

    const L96: &str = "\
# standard Lorenz-96 LETKF
model.kind = lorenz96
model.dim = 40
ensemble.size = 20
localization.radius = 4
obs.sites = every:2
run.cycles = 500
run.seed = 7
";

    #[test]
    fn defaults_are_applied() {
        let c = ExperimentConfig::parse(L96).unwrap();
        assert_eq!(
            c.model,
            ModelConfig::Lorenz96 {
                dim: 40,
                forcing: 8.0,
                dt: 0.005,
                steps: 40
            }
        );
        assert_eq!(c.inflation, 1.05);
        assert_eq!(c.gamma, GammaChoice::Fixed(1.0));
        assert_eq!(c.obs_sites.len(), 20);
        assert_eq!(c.obs_error_var, vec![1.0; 20]);
        assert_eq!(c.radius, Some(4.0));
        assert_eq!(c.init, InitMode::Climatology);
    }

    #[test]
    fn round_trip() {
        let texts = [
            L96.to_string(),
            format!("{L96}filter.gamma = min_mse\nfilter.variant = stochastic\nverify.event_threshold = 5.5\n"),
            "model.kind = linear\nmodel.dim = 3\nmodel.transition = 0.9,0.8,0.7\nmodel.noise_var = 0.1\n\
             ensemble.size = 5\nrun.cycles = 4\nobs.error_sd_levels = 2.1,1.8\nfilter.gamma = ess\n\
             grid.topology = lattice\ngrid.nx = 3\ngrid.ny = 1\n"
                .to_string(),
        ];
        for text in texts {
            let c = ExperimentConfig::parse(&text).unwrap();
            let again = ExperimentConfig::parse(&c.serialize(true)).unwrap();
            assert_eq!(again, c);
            assert_eq!(again.serialize(true), c.serialize(true));
        }
    }

    #[test]
    fn noise_sampling_is_linear_only() {
        let base =
            "model.kind = linear\nmodel.dim = 2\nmodel.transition = 0.5\nmodel.noise_var = 0.1\nensemble.size = 6\nrun.cycles = 3\n";
        let c = ExperimentConfig::parse(&format!("{base}model.noise_sampling = exact\n")).unwrap();
        assert!(matches!(
            c.model,
            ModelConfig::Linear {
                noise_sampling: NoiseSampling::ExactMoments,
                ..
            }
        ));
        assert_eq!(ExperimentConfig::parse(&c.serialize(true)).unwrap(), c);
        let e =
            ExperimentConfig::parse(&format!("{base}model.noise_sampling = maybe\n")).unwrap_err();
        assert_eq!(e.key.as_deref(), Some("model.noise_sampling"));
        assert!(ExperimentConfig::parse(
            "model.kind = lorenz96\nensemble.size = 6\nrun.cycles = 3\nmodel.noise_sampling = exact\n"
        )
        .is_err());
    }

    #[test]
    fn level_errors_cycle_over_sites() {
        let text = L96.replace(
            "run.seed = 7",
            "obs.error_sd_levels = 2.1, 1.8, 1.6, 1.6, 1.7, 1.7",
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        assert!((c.obs_error_var[0] - 4.41).abs() < 1e-12);
        assert!((c.obs_error_var[6] - 4.41).abs() < 1e-12);
        assert!((c.obs_error_var[1] - 3.24).abs() < 1e-12);
    }

    fn error_of(text: &str) -> ConfigError {
        ExperimentConfig::parse(text).unwrap_err()
    }

    #[test]
    fn unknown_key_reports_line_and_key() {
        let e = error_of(&format!("{L96}filter.gama = 0.5\n"));
        assert_eq!(e.line, Some(9));
        assert_eq!(e.key.as_deref(), Some("filter.gama"));
        assert!(e
            .to_string()
            .starts_with("line 9: key `filter.gama`: unknown key"));
    }

    #[test]
    fn malformed_inputs() {
        assert_eq!(error_of("model.kind lorenz96\n").line, Some(1));
        assert_eq!(
            error_of(&format!("{L96}model.dim = 12\n")).message,
            "duplicate key (first set on line 3)"
        );
        let e = error_of(&L96.replace("model.dim = 40", "model.dim = forty"));
        assert_eq!((e.line, e.key.as_deref()), (Some(3), Some("model.dim")));
        let e = error_of(&L96.replace("run.cycles = 500\n", ""));
        assert_eq!(e.key.as_deref(), Some("run.cycles"));
        let e = error_of(&format!("{L96}model.transition = 1\n"));
        assert_eq!(e.key.as_deref(), Some("model.transition"));
        let e = error_of(&format!("{L96}localization.coarse_stride = 3\n"));
        assert_eq!(e.key.as_deref(), Some("localization.coarse_stride"));
        let e = error_of(&L96.replace("every:2", "0,2,40"));
        assert!(e.message.contains("outside"));
        let e = error_of(&format!("{L96}filter.inflation = 0.9\n"));
        assert_eq!(e.line, Some(9));
        let e = error_of("Model.Kind = linear\n");
        assert!(e.message.contains("malformed"));
    }

    #[test]
    fn site_patterns() {
        let c = ExperimentConfig::parse(&L96.replace("every:2", "every:4+1")).unwrap();
        assert_eq!(&c.obs_sites[..3], &[1, 5, 9]);
        let c = ExperimentConfig::parse(&L96.replace("every:2", "3, 7")).unwrap();
        assert_eq!(c.obs_sites, vec![3, 7]);
    }
}
