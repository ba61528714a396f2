//! Configuration, subcommand dispatch and CSV output for the `slsloc` tool.
//!
//! A run is described by one TOML document; every key is optional and unknown
//! keys are rejected:
//!
//! ```toml
//! master_seed = 0
//! n_list = [4, 8, 16, 32]
//! sigma_db = 0.53
//! threshold_dbm = -80.0
//! trials = 100
//! crlb_mask = "detected"        # or "all-beams"
//!
//! [room]
//! width = 8.0
//! [array]
//! n_elements = 32
//! [link]
//! tx_power_dbm = 40.0
//! [estimator]
//! method = "gauss-newton-damped"
//! [calibration]
//! tolerance = 0.15
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slsloc_core::simharness::{
    crlb_field, median_rmse, nlse_rmse_field, rss_max_field, sweep_over_n, write_cdf_csv, write_field_csv,
    write_summary_csv, MaskMode, MetricsSummary, MonteCarlo, RoomSpec, Scenario,
};
use slsloc_core::{ArrayConfig, EstimatorConfig, LinkBudget};

/// Noise level that calibrates the default configuration (see `calibrate`).
pub const DEFAULT_SIGMA_DB: f64 = 0.530884444;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid config key `{key}`: {reason}")]
    Invalid { key: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] slsloc_core::Error),

    #[error("calibration failed: {0}")]
    Calibration(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrlbMask {
    /// Beams whose noiseless RSS clears the detection threshold.
    #[default]
    Detected,
    AllBeams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationTarget {
    pub n: usize,
    pub median_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub targets: Vec<CalibrationTarget>,
    /// Largest accepted relative error of any target.
    pub tolerance: f64,
    pub sigma_min_db: f64,
    pub sigma_max_db: f64,
    pub points_per_decade: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            targets: vec![
                CalibrationTarget { n: 4, median_m: 0.74 },
                CalibrationTarget { n: 8, median_m: 0.11 },
            ],
            tolerance: 0.15,
            sigma_min_db: 1e-3,
            sigma_max_db: 1e2,
            points_per_decade: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub master_seed: u64,
    pub n_list: Vec<usize>,
    pub sigma_db: f64,
    pub threshold_dbm: f64,
    pub trials: usize,
    pub crlb_mask: CrlbMask,
    pub room: RoomSpec,
    pub array: ArrayConfig,
    pub link: LinkBudget,
    pub estimator: EstimatorConfig,
    pub calibration: CalibrationConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            n_list: vec![4, 8, 16, 32],
            sigma_db: DEFAULT_SIGMA_DB,
            threshold_dbm: -80.0,
            trials: 100,
            crlb_mask: CrlbMask::Detected,
            room: RoomSpec::default(),
            array: ArrayConfig::default(),
            link: LinkBudget::default(),
            estimator: EstimatorConfig::default(),
            calibration: CalibrationConfig::default(),
        }
    }
}

fn bad(key: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

/// Re-labels a core invariant error with the config section it came from.
fn in_section(section: &str, r: slsloc_core::Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        slsloc_core::Error::InvalidParameter { name, reason } => bad(format!("{section}.{name}"), reason),
        other => CliError::Core(other),
    })
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        in_section("room", self.room.validate())?;
        in_section("array", self.array.validate())?;
        in_section("link", self.link.validate())?;
        in_section("estimator", self.estimator.validate())?;
        if self.n_list.is_empty() {
            return Err(bad("n_list", "must not be empty"));
        }
        if self.n_list.contains(&0) {
            return Err(bad("n_list", "every N must be at least 1"));
        }
        if !(self.sigma_db > 0.0 && self.sigma_db.is_finite()) {
            return Err(bad("sigma_db", "must be finite and > 0"));
        }
        if !self.threshold_dbm.is_finite() {
            return Err(bad("threshold_dbm", "must be finite"));
        }
        if self.trials < 1 {
            return Err(bad("trials", "must be at least 1"));
        }
        let cal = &self.calibration;
        if cal.targets.is_empty() {
            return Err(bad("calibration.targets", "must not be empty"));
        }
        if cal
            .targets
            .iter()
            .any(|t| t.n < 1 || !(t.median_m > 0.0 && t.median_m.is_finite()))
        {
            return Err(bad("calibration.targets", "need n >= 1 and a finite median_m > 0"));
        }
        if !(cal.tolerance > 0.0 && cal.tolerance.is_finite()) {
            return Err(bad("calibration.tolerance", "must be finite and > 0"));
        }
        if !(cal.sigma_min_db > 0.0 && cal.sigma_max_db > cal.sigma_min_db && cal.sigma_max_db.is_finite()) {
            return Err(bad("calibration.sigma_min_db", "need 0 < sigma_min_db < sigma_max_db"));
        }
        if cal.points_per_decade < 1 {
            return Err(bad("calibration.points_per_decade", "must be at least 1"));
        }
        Ok(())
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            room: self.room,
            array: self.array,
            link: self.link,
            sigma_db: self.sigma_db,
            threshold_dbm: self.threshold_dbm,
        }
    }

    pub fn mask(&self) -> MaskMode {
        match self.crlb_mask {
            CrlbMask::Detected => MaskMode::Detected {
                threshold_dbm: self.threshold_dbm,
            },
            CrlbMask::AllBeams => MaskMode::AllBeams,
        }
    }

    pub fn monte_carlo(&self) -> MonteCarlo {
        MonteCarlo {
            trials: self.trials,
            master_seed: self.master_seed,
        }
    }
}

/// Parses and validates a TOML document; absent keys take their defaults.
pub fn parse_config(text: &str) -> Result<SimulationConfig> {
    let cfg: SimulationConfig = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn serialize_config(cfg: &SimulationConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| CliError::Parse(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<SimulationConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    RssMap,
    CrlbMap,
    NlseMap,
    SweepN,
    Cdf,
    Calibrate,
}

impl Subcommand {
    pub const ALL: [Subcommand; 6] = [
        Subcommand::RssMap,
        Subcommand::CrlbMap,
        Subcommand::NlseMap,
        Subcommand::SweepN,
        Subcommand::Cdf,
        Subcommand::Calibrate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Subcommand::RssMap => "rss-map",
            Subcommand::CrlbMap => "crlb-map",
            Subcommand::NlseMap => "nlse-map",
            Subcommand::SweepN => "sweep-n",
            Subcommand::Cdf => "cdf",
            Subcommand::Calibrate => "calibrate",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetFit {
    pub n: usize,
    pub target_m: f64,
    pub achieved_m: f64,
}

impl TargetFit {
    pub fn relative_error(&self) -> f64 {
        (self.achieved_m - self.target_m).abs() / self.target_m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub sigma_db: f64,
    pub fits: Vec<TargetFit>,
    pub tolerance: f64,
}

impl CalibrationReport {
    pub fn max_relative_error(&self) -> f64 {
        self.fits.iter().map(TargetFit::relative_error).fold(0.0, f64::max)
    }

    pub fn within_tolerance(&self) -> bool {
        self.max_relative_error() <= self.tolerance
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        use slsloc_core::simharness::format_sig9 as f;
        writeln!(
            out,
            "sigma_db,n,target_median_m,achieved_median_m,relative_error,within_tolerance"
        )?;
        for fit in &self.fits {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                f(self.sigma_db),
                fit.n,
                f(fit.target_m),
                f(fit.achieved_m),
                f(fit.relative_error()),
                self.within_tolerance() as u8
            )?;
        }
        Ok(())
    }
}

/// Fits `sigma_db` so the median CRLB of every target array size matches its
/// target. The CRLB is proportional to sigma, so each median is computed once
/// at unit noise and scaled while the log grid is searched; the chosen sigma is
/// then re-evaluated directly. Link constants stay as configured.
pub fn calibrate(cfg: &SimulationConfig) -> Result<CalibrationReport> {
    cfg.validate()?;
    let cal = &cfg.calibration;
    let base = cfg.scenario();
    let medians_at = |sigma: f64| -> Result<Vec<f64>> {
        cal.targets
            .iter()
            .map(|t| {
                let sc = base.with_elements(t.n)?;
                let field = crlb_field(&sc.room, &sc.array, &sc.beams(), &sc.link, sigma, cfg.mask())?;
                Ok(median_rmse(&field)?)
            })
            .collect()
    };
    let unit = medians_at(1.0)?;
    if let Some((t, _)) = cal.targets.iter().zip(&unit).find(|(_, m)| !m.is_finite()) {
        return Err(CliError::Calibration(format!(
            "median CRLB at N={} is unbounded (more than half of the room is a blindspot); no sigma can match it",
            t.n
        )));
    }
    let worst = |sigma: f64| {
        cal.targets
            .iter()
            .zip(&unit)
            .map(|(t, m)| (sigma * m - t.median_m).abs() / t.median_m)
            .fold(0.0, f64::max)
    };
    let decades = (cal.sigma_max_db / cal.sigma_min_db).log10();
    let points = (decades * cal.points_per_decade as f64).ceil() as usize;
    let (k_best, _) = (0..=points)
        .map(|k| {
            (
                k,
                worst(cal.sigma_min_db * 10f64.powf(k as f64 / cal.points_per_decade as f64)),
            )
        })
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("grid has at least one point");
    if k_best == 0 || k_best == points {
        return Err(CliError::Calibration(format!(
            "best sigma lies on the search boundary [{}, {}] dB; targets are not bracketed",
            cal.sigma_min_db, cal.sigma_max_db
        )));
    }
    let sigma = cal.sigma_min_db * 10f64.powf(k_best as f64 / cal.points_per_decade as f64);
    let achieved = medians_at(sigma)?;
    Ok(CalibrationReport {
        sigma_db: sigma,
        fits: cal
            .targets
            .iter()
            .zip(achieved)
            .map(|(t, a)| TargetFit {
                n: t.n,
                target_m: t.median_m,
                achieved_m: a,
            })
            .collect(),
        tolerance: cal.tolerance,
    })
}

/// CRLB and NLSE summaries over `cfg.n_list`.
pub fn sweep(cfg: &SimulationConfig) -> Result<Vec<MetricsSummary>> {
    cfg.validate()?;
    Ok(sweep_over_n(
        &cfg.scenario(),
        &cfg.n_list,
        &cfg.monte_carlo(),
        &cfg.estimator,
        cfg.mask(),
    )?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let io_err = |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = create(path)?;
    f(&mut out).map_err(io_err)?;
    out.flush().map_err(io_err)
}

/// Runs one subcommand and writes its CSV to `out`. A calibration that misses
/// its tolerance still writes its report before returning an error.
pub fn run_subcommand(cmd: Subcommand, cfg: &SimulationConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let sc = cfg.scenario();
    match cmd {
        Subcommand::RssMap => {
            let field = rss_max_field(&sc.room, &sc.array, &sc.beams(), &sc.link)?;
            write_with(out, |w| write_field_csv(w, &field))
        }
        Subcommand::CrlbMap => {
            let field = crlb_field(&sc.room, &sc.array, &sc.beams(), &sc.link, sc.sigma_db, cfg.mask())?;
            write_with(out, |w| write_field_csv(w, &field))
        }
        Subcommand::NlseMap => {
            let field = nlse_rmse_field(&sc, &sc.beams(), &cfg.monte_carlo(), &cfg.estimator)?;
            write_with(out, |w| write_field_csv(w, &field))
        }
        Subcommand::SweepN => {
            let rows = sweep(cfg)?;
            write_with(out, |w| write_summary_csv(w, &rows))
        }
        Subcommand::Cdf => {
            let rows = sweep(cfg)?;
            write_with(out, |w| write_cdf_csv(w, &rows))
        }
        Subcommand::Calibrate => {
            let report = calibrate(cfg)?;
            write_with(out, |w| report.write_csv(w))?;
            if report.within_tolerance() {
                Ok(())
            } else {
                Err(CliError::Calibration(format!(
                    "best sigma {:.6} dB leaves a relative error of {:.3} (tolerance {})",
                    report.sigma_db,
                    report.max_relative_error(),
                    report.tolerance
                )))
            }
        }
    }
}

/// Command-line overrides applied on top of the config file.
pub fn apply_overrides(cfg: &mut SimulationConfig, seed: Option<u64>, n: Option<usize>) -> Result<()> {
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    if let Some(n) = n {
        cfg.array = cfg.array.with_elements(n).map_err(|e| match e {
            slsloc_core::Error::InvalidParameter { reason, .. } => bad("--n", reason),
            other => CliError::Core(other),
        })?;
        cfg.n_list = vec![n];
    }
    cfg.validate()
}
