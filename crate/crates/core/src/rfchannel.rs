//! Per-beam RSS model and noisy sweep observations.
//!
//! The base station sits at the origin with its array along the x-axis; the
//! UE is at `(x, y)`. RSS in the logarithmic domain follows
//!
//! ```text
//! P_i = 20 log10(Pt Gr lambda^2 / (16 L pi^2)) + 20 log10 G_i(phi) - 40 log10 d
//! ```
//!
//! Every term uses `20 log10`, so the dBm figures produced here are twice the
//! conventional `10 log10` values of the linear Friis power. [`rss_linear`] is
//! the linear Friis power in watts; the two agree under `20 log10(P / 1 mW)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arraymodel::{gain_from_cos, ArrayConfig, BeamSet};
use crate::error::{invalid, Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Finite stand-in for `-inf` dBm at a pattern null.
pub const RSS_FLOOR_DBM: f64 = -300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkBudget {
    pub tx_power_dbm: f64,
    pub rx_gain_db: f64,
    pub loss_db: f64,
    pub carrier_hz: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        // 802.11ad EIRP ceiling plus a small receive gain; sets the log-domain
        // constant to about -54.8 dB against the -80 dBm detection threshold.
        Self {
            tx_power_dbm: 40.0,
            rx_gain_db: 0.6,
            loss_db: 0.0,
            carrier_hz: 60e9,
        }
    }
}

impl LinkBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_hz.is_finite() && self.carrier_hz > 0.0) {
            return Err(invalid("carrier_hz", "must be finite and > 0"));
        }
        if !(self.loss_db >= 0.0 && self.loss_db.is_finite()) {
            return Err(invalid("loss_db", "must be finite and >= 0"));
        }
        if !self.tx_power_dbm.is_finite() {
            return Err(invalid("tx_power_dbm", "must be finite"));
        }
        if !self.rx_gain_db.is_finite() {
            return Err(invalid("rx_gain_db", "must be finite"));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// `20 log10(Pt Gr lambda^2 / (16 L pi^2))` with `Pt` in mW and the gain and
    /// loss converted from dB to linear ratios.
    pub fn constant_term_db(&self) -> f64 {
        let lambda = self.wavelength();
        let pt_mw = db_to_ratio(self.tx_power_dbm);
        let ratio = pt_mw * db_to_ratio(self.rx_gain_db) * lambda * lambda
            / (16.0 * db_to_ratio(self.loss_db) * std::f64::consts::PI.powi(2));
        20.0 * ratio.log10()
    }
}

fn db_to_ratio(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// UE location in meters, base station at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_to(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationVector {
    pub rss_dbm: Vec<f64>,
    pub detected: Vec<bool>,
    pub sigma_db: f64,
}

impl ObservationVector {
    pub fn detected_count(&self) -> usize {
        self.detected.iter().filter(|&&d| d).count()
    }

    pub fn detected_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.detected.iter().enumerate().filter_map(|(i, &d)| d.then_some(i))
    }
}

/// `(phi, d)` of the UE as seen from the array: `d = |x|`, `phi = acos(x/d)`.
pub fn azimuth_and_distance(ue: Position) -> Result<(f64, f64)> {
    let d = ue.x.hypot(ue.y);
    if d <= 0.0 || !d.is_finite() {
        return Err(Error::DegenerateGeometry);
    }
    Ok(((ue.x / d).clamp(-1.0, 1.0).acos(), d))
}

/// Direction cosine and distance without going through the angle.
#[inline]
pub(crate) fn cos_and_distance(ue: Position) -> Result<(f64, f64)> {
    let d = ue.x.hypot(ue.y);
    if d <= 0.0 || !d.is_finite() {
        return Err(Error::DegenerateGeometry);
    }
    Ok(((ue.x / d).clamp(-1.0, 1.0), d))
}

/// Log-domain RSS in the `20 log10` convention given the constant term.
#[inline]
pub(crate) fn rss_from_parts(constant_db: f64, gain: f64, d: f64) -> f64 {
    if gain <= 0.0 {
        return RSS_FLOOR_DBM;
    }
    (constant_db + 20.0 * gain.log10() - 40.0 * d.log10()).max(RSS_FLOOR_DBM)
}

/// RSS of beam `beam` (zero-based) in dBm. Pattern nulls return [`RSS_FLOOR_DBM`].
pub fn rss_dbm(ue: Position, beam: usize, array: &ArrayConfig, beams: &BeamSet, link: &LinkBudget) -> Result<f64> {
    let beta = beams.phase(beam)?;
    let (cos_phi, d) = cos_and_distance(ue)?;
    let gain = gain_from_cos(cos_phi, beta, array);
    Ok(rss_from_parts(link.constant_term_db(), gain, d))
}

/// Linear Friis power in watts: `Pt G_i Gr (lambda / 4 pi d)^2 / L`.
pub fn rss_linear(ue: Position, beam: usize, array: &ArrayConfig, beams: &BeamSet, link: &LinkBudget) -> Result<f64> {
    let beta = beams.phase(beam)?;
    let (cos_phi, d) = cos_and_distance(ue)?;
    let gain = gain_from_cos(cos_phi, beta, array);
    let pt_w = db_to_ratio(link.tx_power_dbm) * 1e-3;
    let path = link.wavelength() / (4.0 * std::f64::consts::PI * d);
    Ok(pt_w * gain * db_to_ratio(link.rx_gain_db) * path * path / db_to_ratio(link.loss_db))
}

/// The noiseless sweep `p(x)`: one RSS per beam.
pub fn exact_profile(ue: Position, array: &ArrayConfig, beams: &BeamSet, link: &LinkBudget) -> Result<Vec<f64>> {
    let (cos_phi, d) = cos_and_distance(ue)?;
    let k = link.constant_term_db();
    Ok(beams
        .phases
        .iter()
        .map(|&beta| rss_from_parts(k, gain_from_cos(cos_phi, beta, array), d))
        .collect())
}

/// One noisy sweep: `s = p(x) + n`, `n ~ N(0, sigma^2 I)`. A beam counts as
/// detected when its noisy sample reaches `threshold_dbm`.
///
/// `sigma_db = 0` yields the noiseless profile.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_observation<R: Rng + ?Sized>(
    ue: Position,
    array: &ArrayConfig,
    beams: &BeamSet,
    link: &LinkBudget,
    sigma_db: f64,
    threshold_dbm: f64,
    rng: &mut R,
) -> Result<ObservationVector> {
    let noise = Normal::new(0.0, sigma_db).map_err(|_| invalid("sigma_db", "must be finite and >= 0"))?;
    let mut rss = exact_profile(ue, array, beams, link)?;
    for s in &mut rss {
        *s += noise.sample(rng);
    }
    let detected = rss.iter().map(|&s| s >= threshold_dbm).collect();
    Ok(ObservationVector {
        rss_dbm: rss,
        detected,
        sigma_db,
    })
}
