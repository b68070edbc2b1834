//! On-disk run archives.
//!
//! ```text
//! <dir>/MANIFEST                 key=value lines (format, config_hash, seed, ...)
//! <dir>/config.cfg               canonical configuration (without run.output)
//! <dir>/twin/truth.bin, obs.bin  truth trajectory and observations
//! <dir>/climatology.bin          rows: mean, std of the free run
//! <dir>/initial.bin              initial ensemble (members × variables)
//! <dir>/cycles/NNNNN/background.bin, analysis.bin
//! <dir>/cycles/NNNNN/moments.bin rows: background mean, spread, analysis mean, spread
//! <dir>/cycles/NNNNN/diag.csv    site_index,gamma,ess
//! <dir>/scores.csv               cycle,lead,variable,metric,value
//! ```
//!
//! Binary files use the table format of [`etkpf::table`]. Nothing written
//! depends on wall-clock time or the thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use etkpf::enspace::Ensemble;
use etkpf::table::Table;
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{core, HarnessError, Result};

pub const FORMAT: &str = "etkpf-archive 1";
pub const DIAG_HEADER: &str = "site_index,gamma,ess";

/// SHA-256 of the canonical configuration, ignoring `run.output` and the
/// `forecast.*` keys, which do not affect the cycled run.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let text: String = cfg
        .serialize(false)
        .lines()
        .filter(|l| !l.starts_with("forecast."))
        .map(|l| format!("{l}\n"))
        .collect();
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Running,
    Complete,
    Diverged,
}

impl Status {
    fn as_str(self) -> &'static str {
        match self {
            Status::Running => "running",
            Status::Complete => "complete",
            Status::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub cycles: usize,
    pub completed: usize,
    pub k: usize,
    pub q: usize,
    pub status: Status,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        format!(
            "format={FORMAT}\nconfig_hash={}\nseed={}\ncycles={}\ncompleted={}\nk={}\nq={}\nstatus={}\n",
            self.config_hash,
            self.seed,
            self.cycles,
            self.completed,
            self.k,
            self.q,
            self.status.as_str()
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            text.lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| HarnessError::Archive(format!("MANIFEST lacks `{key}`")))
        };
        if get("format")? != FORMAT {
            return Err(HarnessError::Archive("unsupported archive format".into()));
        }
        let num = |key: &str| -> Result<u64> {
            get(key)?
                .parse()
                .map_err(|_| HarnessError::Archive(format!("MANIFEST `{key}` is not an integer")))
        };
        let status = match get("status")? {
            "running" => Status::Running,
            "complete" => Status::Complete,
            "diverged" => Status::Diverged,
            s => return Err(HarnessError::Archive(format!("unknown status {s:?}"))),
        };
        Ok(Self {
            config_hash: get("config_hash")?.to_string(),
            seed: num("seed")?,
            cycles: num("cycles")? as usize,
            completed: num("completed")? as usize,
            k: num("k")? as usize,
            q: num("q")? as usize,
            status,
        })
    }
}

/// Handle on an archive directory.
#[derive(Debug, Clone)]
pub struct Archive {
    dir: PathBuf,
}

impl Archive {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Creates the directory, replacing any previous run stored there.
    pub fn create(dir: impl Into<PathBuf>) -> Result<Self> {
        let a = Self::new(dir);
        if a.dir.join("MANIFEST").exists() {
            for sub in ["cycles", "twin"] {
                let p = a.dir.join(sub);
                if p.exists() {
                    std::fs::remove_dir_all(&p).map_err(|e| HarnessError::io(&p, e))?;
                }
            }
        }
        std::fs::create_dir_all(a.dir.join("cycles")).map_err(|e| HarnessError::io(&a.dir, e))?;
        Ok(a)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn twin_dir(&self) -> PathBuf {
        self.dir.join("twin")
    }

    pub fn cycle_dir(&self, c: usize) -> PathBuf {
        self.dir.join("cycles").join(format!("{c:05}"))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))
    }

    pub fn read_text(&self, name: &str) -> Result<String> {
        let p = self.path(name);
        std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))
    }

    pub fn manifest(&self) -> Result<Manifest> {
        Manifest::parse(&self.read_text("MANIFEST")?)
    }

    pub fn write_manifest(&self, m: &Manifest) -> Result<()> {
        self.write_text("MANIFEST", &m.to_text())
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        let text = self.read_text("config.cfg")?;
        ExperimentConfig::parse(&text).map_err(|e| {
            HarnessError::Archive(format!("{}: {e}", self.path("config.cfg").display()))
        })
    }

    pub fn write_cycle(&self, c: usize, files: &CycleFiles<'_>) -> Result<()> {
        let d = self.cycle_dir(c);
        std::fs::create_dir_all(&d).map_err(|e| HarnessError::io(&d, e))?;
        save_ensemble(&d.join("background.bin"), files.background, c)?;
        save_ensemble(&d.join("analysis.bin"), files.analysis, c)?;
        let q = files.background.dim();
        let mut data = Vec::with_capacity(4 * q);
        for ens in [files.background, files.analysis] {
            data.extend(ens.mean().iter());
            data.extend(ens.spread().iter());
        }
        Table::new(4, q, data)
            .map_err(core("archive"))?
            .with_meta("kind", "moments")
            .with_meta("cycle", c)
            .with_meta(
                "rows",
                "background_mean,background_spread,analysis_mean,analysis_spread",
            )
            .save(&d.join("moments.bin"))
            .map_err(core("archive"))?;
        let mut csv = format!("{DIAG_HEADER}\n");
        for ((s, g), e) in files.sites.iter().zip(files.gamma).zip(files.ess) {
            let _ = writeln!(csv, "{s},{g},{e}");
        }
        let p = d.join("diag.csv");
        std::fs::write(&p, csv).map_err(|e| HarnessError::io(&p, e))
    }

    pub fn background(&self, c: usize) -> Result<Ensemble<f64>> {
        load_ensemble(&self.cycle_dir(c).join("background.bin"))
    }

    pub fn analysis(&self, c: usize) -> Result<Ensemble<f64>> {
        load_ensemble(&self.cycle_dir(c).join("analysis.bin"))
    }

    pub fn initial(&self) -> Result<Ensemble<f64>> {
        load_ensemble(&self.path("initial.bin"))
    }

    /// Per-site `(site_index, gamma, ess)` of cycle `c`.
    pub fn diagnostics(&self, c: usize) -> Result<Vec<(usize, f64, f64)>> {
        let p = self.cycle_dir(c).join("diag.csv");
        let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
        let bad = |l: &str| HarnessError::Archive(format!("{}: bad line {l:?}", p.display()));
        text.lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 3 {
                    return Err(bad(l));
                }
                Ok((
                    f[0].parse().map_err(|_| bad(l))?,
                    f[1].parse().map_err(|_| bad(l))?,
                    f[2].parse().map_err(|_| bad(l))?,
                ))
            })
            .collect()
    }

    /// Climatological mean and standard deviation per variable.
    pub fn climatology(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let t = Table::load(&self.path("climatology.bin")).map_err(core("archive"))?;
        if t.rows != 2 {
            return Err(HarnessError::Archive(
                "climatology.bin must have two rows".into(),
            ));
        }
        Ok((
            DVector::from_row_slice(t.row(0)),
            DVector::from_row_slice(t.row(1)),
        ))
    }
}

/// Files written for one cycle.
pub struct CycleFiles<'a> {
    pub background: &'a Ensemble<f64>,
    pub analysis: &'a Ensemble<f64>,
    pub sites: &'a [usize],
    pub gamma: &'a [f64],
    pub ess: &'a [f64],
}

/// Stores an ensemble as a `k × q` table (one member per row).
pub fn save_ensemble(path: &Path, ens: &Ensemble<f64>, cycle: usize) -> Result<()> {
    Table::new(ens.size(), ens.dim(), ens.states().as_slice().to_vec())
        .map_err(core("archive"))?
        .with_meta("kind", "ensemble")
        .with_meta("cycle", cycle)
        .save(path)
        .map_err(|e| HarnessError::io(path, e))
}

pub fn load_ensemble(path: &Path) -> Result<Ensemble<f64>> {
    let t = Table::load(path).map_err(|e| HarnessError::io(path, e))?;
    Ensemble::new(DMatrix::from_column_slice(t.cols, t.rows, &t.data)).map_err(core("archive"))
}

/// Writes a `2 × q` table of per-variable mean and standard deviation.
pub fn save_climatology(
    path: &Path,
    mean: &DVector<f64>,
    std: &DVector<f64>,
    steps: usize,
) -> Result<()> {
    let mut data = mean.as_slice().to_vec();
    data.extend(std.iter());
    Table::new(2, mean.len(), data)
        .map_err(core("archive"))?
        .with_meta("kind", "climatology")
        .with_meta("steps", steps)
        .with_meta("rows", "mean,std")
        .save(path)
        .map_err(|e| HarnessError::io(path, e))
}
