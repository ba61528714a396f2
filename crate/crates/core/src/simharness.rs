//! Room-grid field maps, Monte-Carlo NLSE trials and the summary metrics.
//!
//! The base station sits at the middle of one wall of a `width x depth` room:
//! cells span `x in [-width/2, width/2]` and `y in (0, depth]`. Cell centers lie
//! at `x = -width/2 + (i + 1/2) * step` and `y = (j + 1) * step`; cells closer
//! than one step to the base station are dropped.
//!
//! Unbounded cells (singular information, or a localization rate under 50%)
//! count as `+inf` in medians and never enter the CDF, so the CDF plateaus at
//! the coverage probability.

use std::fmt::Write as _;
use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arraymodel::{sls_beam_set, ArrayConfig, BeamSet};
use crate::error::{invalid, Error, Result};
use crate::estimator::{estimate, EstimatorConfig, Region};
use crate::fisher::{crlb_from_jacobian, rss_jacobian, DerivativeMode};
use crate::rfchannel::{exact_profile, synthesize_observation, LinkBudget, Position};
use crate::rng::trial_rng;

/// Lower edge of the estimator search region; keeps iterates off the base station.
pub const SEARCH_Y_MIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoomSpec {
    pub width: f64,
    pub depth: f64,
    pub grid_step: f64,
}

impl Default for RoomSpec {
    fn default() -> Self {
        Self {
            width: 8.0,
            depth: 8.0,
            grid_step: 0.1,
        }
    }
}

impl RoomSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(invalid("width", "must be finite and > 0"));
        }
        if !(self.depth > 0.0 && self.depth.is_finite()) {
            return Err(invalid("depth", "must be finite and > 0"));
        }
        if !(self.grid_step > 0.0 && self.grid_step <= self.width.min(self.depth)) {
            return Err(invalid("grid_step", "must be > 0 and no larger than the room"));
        }
        Ok(())
    }

    /// Columns and rows of the full grid before dropping cells near the base station.
    pub fn dims(&self) -> (usize, usize) {
        (
            (self.width / self.grid_step).round() as usize,
            (self.depth / self.grid_step).round() as usize,
        )
    }

    /// Cell centers, row-major by y then x.
    pub fn cells(&self) -> Vec<Position> {
        let (nx, ny) = self.dims();
        let step = self.grid_step;
        (0..ny)
            .flat_map(|j| {
                (0..nx)
                    .map(move |i| Position::new(-0.5 * self.width + (i as f64 + 0.5) * step, (j as f64 + 1.0) * step))
            })
            .filter(|p| p.x.hypot(p.y) >= step)
            .collect()
    }

    pub fn search_region(&self) -> Region {
        Region {
            x_min: -0.5 * self.width,
            x_max: 0.5 * self.width,
            y_min: SEARCH_Y_MIN,
            y_max: self.depth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    RssMaxDbm,
    CrlbM,
    NlseRmseM,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldMap {
    pub room: RoomSpec,
    pub kind: FieldKind,
    pub cells: Vec<Position>,
    /// Per-cell value; `+inf` where `unbounded` is set.
    pub values: Vec<f64>,
    pub unbounded: Vec<bool>,
    /// Fraction of localized trials per cell (NLSE fields only).
    pub localization_rate: Option<Vec<f64>>,
}

impl FieldMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn bounded_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(&self.unbounded)
            .filter_map(|(&v, &u)| (!u).then_some(v))
    }
}

/// Which beams feed the Fisher information of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MaskMode {
    AllBeams,
    /// Beams whose noiseless RSS reaches the threshold.
    Detected {
        threshold_dbm: f64,
    },
}

/// Everything that defines one simulated deployment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub room: RoomSpec,
    pub array: ArrayConfig,
    pub link: LinkBudget,
    pub sigma_db: f64,
    pub threshold_dbm: f64,
}

impl Scenario {
    pub fn with_elements(&self, n: usize) -> Result<Self> {
        Ok(Self {
            array: self.array.with_elements(n)?,
            ..*self
        })
    }

    pub fn beams(&self) -> BeamSet {
        sls_beam_set(&self.array)
    }

    pub fn detected_mask(&self) -> MaskMode {
        MaskMode::Detected {
            threshold_dbm: self.threshold_dbm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonteCarlo {
    pub trials: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Crlb,
    Nlse,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Crlb => "crlb",
            Variant::Nlse => "nlse",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub n_elements: usize,
    pub variant: Variant,
    pub median_rmse_m: f64,
    pub one_meter_coverage_pct: f64,
    pub cdf: Vec<(f64, f64)>,
    pub coverage_probability: f64,
}

fn build_field(room: &RoomSpec, kind: FieldKind, cells: Vec<Position>, values: Vec<f64>) -> FieldMap {
    let unbounded = values.iter().map(|v| !v.is_finite()).collect();
    FieldMap {
        room: *room,
        kind,
        cells,
        values,
        unbounded,
        localization_rate: None,
    }
}

/// Strongest beam RSS at every cell.
pub fn rss_max_field(room: &RoomSpec, array: &ArrayConfig, beams: &BeamSet, link: &LinkBudget) -> Result<FieldMap> {
    room.validate()?;
    let cells = room.cells();
    let values = cells
        .par_iter()
        .map(|&p| {
            let profile = exact_profile(p, array, beams, link)?;
            Ok(profile.into_iter().fold(f64::NEG_INFINITY, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(build_field(room, FieldKind::RssMaxDbm, cells, values))
}

/// CRLB at every cell under the given beam mask.
pub fn crlb_field(
    room: &RoomSpec,
    array: &ArrayConfig,
    beams: &BeamSet,
    link: &LinkBudget,
    sigma_db: f64,
    mask: MaskMode,
) -> Result<FieldMap> {
    room.validate()?;
    if !(sigma_db > 0.0 && sigma_db.is_finite()) {
        return Err(invalid("sigma_db", "must be finite and > 0"));
    }
    let cells = room.cells();
    let values = cells
        .par_iter()
        .map(|&p| {
            let jac = rss_jacobian(p, array, beams, DerivativeMode::ExactChain)?;
            let beam_mask = match mask {
                MaskMode::AllBeams => vec![true; beams.len()],
                MaskMode::Detected { threshold_dbm } => exact_profile(p, array, beams, link)?
                    .into_iter()
                    .map(|s| s >= threshold_dbm)
                    .collect(),
            };
            Ok(crlb_from_jacobian(&jac, sigma_db, &beam_mask))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(build_field(room, FieldKind::CrlbM, cells, values))
}

/// Per-cell RMS position error of the NLSE over `trials` noisy sweeps.
///
/// Only localized trials (enough detected beams) enter the RMSE; a cell whose
/// localization rate is below 50% is unbounded. Trial `t` of cell `c` draws its
/// noise from the stream `(master_seed, c, t)`.
pub fn nlse_rmse_field(
    scenario: &Scenario,
    beams: &BeamSet,
    mc: &MonteCarlo,
    est_cfg: &EstimatorConfig,
) -> Result<FieldMap> {
    let room = &scenario.room;
    room.validate()?;
    est_cfg.validate()?;
    if mc.trials < 1 {
        return Err(invalid("trials", "must be at least 1"));
    }
    let region = room.search_region();
    let cells = room.cells();
    let per_cell = cells
        .par_iter()
        .enumerate()
        .map(|(c, &truth)| {
            let mut sum_sq = 0.0;
            let mut localized = 0usize;
            for t in 0..mc.trials {
                let mut rng = trial_rng(mc.master_seed, c as u64, t as u64);
                let obs = synthesize_observation(
                    truth,
                    &scenario.array,
                    beams,
                    &scenario.link,
                    scenario.sigma_db,
                    scenario.threshold_dbm,
                    &mut rng,
                )?;
                match estimate(&obs, &scenario.array, beams, &scenario.link, est_cfg, &region) {
                    Ok(res) => {
                        sum_sq += res.estimate.distance_to(&truth).powi(2);
                        localized += 1;
                    }
                    Err(Error::Unlocalizable { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            let rate = localized as f64 / mc.trials as f64;
            let value = if 2 * localized >= mc.trials {
                (sum_sq / localized as f64).sqrt()
            } else {
                f64::INFINITY
            };
            Ok((value, rate))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let (values, rates): (Vec<f64>, Vec<f64>) = per_cell.into_iter().unzip();
    let mut field = build_field(room, FieldKind::NlseRmseM, cells, values);
    field.localization_rate = Some(rates);
    Ok(field)
}

/// Median over all cells with unbounded cells as `+inf`.
pub fn median_rmse(field: &FieldMap) -> Result<f64> {
    if field.is_empty() {
        return Err(Error::Empty("field"));
    }
    let mut v: Vec<f64> = field
        .values
        .iter()
        .zip(&field.unbounded)
        .map(|(&v, &u)| if u { f64::INFINITY } else { v })
        .collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn count_within(field: &FieldMap, bound_m: f64) -> usize {
    field.bounded_values().filter(|&v| v <= bound_m).count()
}

/// Percentage of cells whose value is finite and at most `bound_m`.
pub fn error_bound_coverage(field: &FieldMap, bound_m: f64) -> f64 {
    if field.is_empty() {
        return 0.0;
    }
    100.0 * count_within(field, bound_m) as f64 / field.len() as f64
}

/// Empirical CDF over all cells: `(value, fraction of cells <= value)` at every
/// distinct bounded value.
pub fn rmse_cdf(field: &FieldMap) -> Vec<(f64, f64)> {
    let total = field.len() as f64;
    let mut v: Vec<f64> = field.bounded_values().collect();
    v.sort_by(f64::total_cmp);
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
    for (k, &e) in v.iter().enumerate() {
        let p = (k + 1) as f64 / total;
        match out.last_mut() {
            Some(last) if last.0 == e => last.1 = p,
            _ => out.push((e, p)),
        }
    }
    out
}

/// Step-function evaluation of a CDF produced by [`rmse_cdf`].
pub fn cdf_at(cdf: &[(f64, f64)], error_m: f64) -> f64 {
    match cdf.partition_point(|&(e, _)| e <= error_m) {
        0 => 0.0,
        k => cdf[k - 1].1,
    }
}

pub fn summarize(field: &FieldMap, n_elements: usize, variant: Variant) -> Result<MetricsSummary> {
    let cdf = rmse_cdf(field);
    let coverage_probability = cdf.last().map_or(0.0, |&(_, p)| p);
    Ok(MetricsSummary {
        n_elements,
        variant,
        median_rmse_m: median_rmse(field)?,
        one_meter_coverage_pct: error_bound_coverage(field, 1.0),
        cdf,
        coverage_probability,
    })
}

/// CRLB and NLSE summaries for every array size in `n_list`, in that order.
pub fn sweep_over_n(
    scenario: &Scenario,
    n_list: &[usize],
    mc: &MonteCarlo,
    est_cfg: &EstimatorConfig,
    mask: MaskMode,
) -> Result<Vec<MetricsSummary>> {
    if n_list.is_empty() {
        return Err(Error::Empty("n_list"));
    }
    let mut out = Vec::with_capacity(2 * n_list.len());
    for &n in n_list {
        let sc = scenario.with_elements(n)?;
        let beams = sc.beams();
        let crlb = crlb_field(&sc.room, &sc.array, &beams, &sc.link, sc.sigma_db, mask)?;
        out.push(summarize(&crlb, n, Variant::Crlb)?);
        let nlse = nlse_rmse_field(&sc, &beams, mc, est_cfg)?;
        out.push(summarize(&nlse, n, Variant::Nlse)?);
    }
    Ok(out)
}

/// Formats with nine significant digits; plain decimal for moderate magnitudes.
pub fn format_sig9(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        format!("{v:.8e}")
    }
}

pub const FIELD_CSV_HEADER: &str = "x_m,y_m,value,unbounded";
pub const SUMMARY_CSV_HEADER: &str = "n,variant,median_rmse_m,one_meter_coverage_pct,coverage_probability";
pub const CDF_CSV_HEADER: &str = "n,variant,error_m,probability";

pub fn write_field_csv<W: Write>(mut out: W, field: &FieldMap) -> io::Result<()> {
    let mut buf = String::with_capacity(40 * field.len() + 32);
    buf.push_str(FIELD_CSV_HEADER);
    buf.push('\n');
    for ((p, &v), &u) in field.cells.iter().zip(&field.values).zip(&field.unbounded) {
        let _ = writeln!(
            buf,
            "{},{},{},{}",
            format_sig9(p.x),
            format_sig9(p.y),
            format_sig9(v),
            u as u8
        );
    }
    out.write_all(buf.as_bytes())
}

pub fn write_summary_csv<W: Write>(mut out: W, rows: &[MetricsSummary]) -> io::Result<()> {
    writeln!(out, "{SUMMARY_CSV_HEADER}")?;
    for s in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            s.n_elements,
            s.variant.as_str(),
            format_sig9(s.median_rmse_m),
            format_sig9(s.one_meter_coverage_pct),
            format_sig9(s.coverage_probability)
        )?;
    }
    Ok(())
}

pub fn write_cdf_csv<W: Write>(mut out: W, rows: &[MetricsSummary]) -> io::Result<()> {
    writeln!(out, "{CDF_CSV_HEADER}")?;
    for s in rows {
        for &(e, p) in &s.cdf {
            writeln!(
                out,
                "{},{},{},{}",
                s.n_elements,
                s.variant.as_str(),
                format_sig9(e),
                format_sig9(p)
            )?;
        }
    }
    Ok(())
}
