//! RSS Jacobian, Fisher information and the Cramer-Rao bound on position RMSE.
//!
//! Two derivative routes are provided:
//!
//! * [`DerivativeMode::ExactChain`] differentiates the log-domain RSS exactly,
//!   `(20/ln 10) * (G_i'/G_i - 2 d'/d)`, using the array magnitude of
//!   [`crate::arraymodel`]. This is what the bound and the estimator use.
//! * [`DerivativeMode::PaperLiteral`] evaluates `(20/ln 10) * (G_i' - 2 d')`
//!   with the half-wavelength special-case gain `G = sin(N psi)/sin(psi)`,
//!   `psi = pi x/d + beta`. It drops the `1/G` and `1/d` chain factors and is
//!   kept for comparison only.
//!
//! The array magnitude `|sin(N psi/2)/sin(psi/2)|` is the special-case gain
//! evaluated at half the phase, so the exact route reuses the same
//! `(N cos(N u) - cot(u) sin(N u)) / sin(u)` kernel with `u = psi/2`.

use std::f64::consts::{LN_10, PI};

use crate::arraymodel::{ArrayConfig, BeamSet};
use crate::error::{invalid, Error, Result};
use crate::rfchannel::{cos_and_distance, Position};

/// `20 / ln(10)`: converts a natural-log slope into dB.
pub const DB_PER_NEPER_AMPLITUDE: f64 = 20.0 / LN_10;

/// Beams whose linear gain falls below this are left out of the information sum.
pub const MIN_INFORMATIVE_GAIN: f64 = 1e-6;

/// `|sin psi|` below which the special-case partials are undefined.
pub const SINGULAR_SIN_PSI: f64 = 1e-10;

/// Relative determinant floor below which the information matrix is treated as singular.
const SINGULAR_DET_RATIO: f64 = 1e-15;

/// Below this reduced half-phase the log-gain slope uses its odd series.
const SERIES_HALF_PHASE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DerivativeMode {
    PaperLiteral,
    #[default]
    ExactChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// `N x 2` matrix of `(dP_i/dx, dP_i/dy)` in dB per meter. Rows of beams whose
/// derivative is undefined (pattern nulls, singular directions) are zero and
/// flagged in `singular`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    pub rows: Vec<[f64; 2]>,
    pub singular: Vec<bool>,
}

/// Symmetric 2x2 Fisher information `H^T H / sigma^2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FisherInfo {
    pub j_xx: f64,
    pub j_xy: f64,
    pub j_yy: f64,
}

impl FisherInfo {
    pub fn determinant(&self) -> f64 {
        self.j_xx * self.j_yy - self.j_xy * self.j_xy
    }

    pub fn trace(&self) -> f64 {
        self.j_xx + self.j_yy
    }

    /// `sqrt(tr(J^-1))`, or infinity when `J` is numerically singular.
    pub fn rmse_bound(&self) -> f64 {
        let det = self.determinant();
        if !(self.j_xx > 0.0 && self.j_yy > 0.0) || det <= SINGULAR_DET_RATIO * self.j_xx * self.j_yy {
            return f64::INFINITY;
        }
        (self.trace() / det).sqrt()
    }
}

/// Unscaled sums of `H^T H`.
#[derive(Debug, Clone, Copy, Default)]
struct InfoSums {
    xx: f64,
    xy: f64,
    yy: f64,
}

impl InfoSums {
    fn accumulate<'a>(rows: impl Iterator<Item = &'a [f64; 2]>) -> Self {
        rows.fold(Self::default(), |acc, [dx, dy]| Self {
            xx: acc.xx + dx * dx,
            xy: acc.xy + dx * dy,
            yy: acc.yy + dy * dy,
        })
    }

    /// `sigma * sqrt((S_xx + S_yy) / (S_xx S_yy - S_xy^2))`.
    fn rmse_bound(&self, sigma: f64) -> f64 {
        let det = self.xx * self.yy - self.xy * self.xy;
        if !(self.xx > 0.0 && self.yy > 0.0) || det <= SINGULAR_DET_RATIO * self.xx * self.yy {
            return f64::INFINITY;
        }
        sigma * ((self.xx + self.yy) / det).sqrt()
    }
}

/// Geometry shared by all beams at one UE position.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PoseGeometry {
    pub x: f64,
    pub y: f64,
    pub cos_phi: f64,
    pub d: f64,
}

impl PoseGeometry {
    pub fn new(ue: Position) -> Result<Self> {
        let (cos_phi, d) = cos_and_distance(ue)?;
        Ok(Self {
            x: ue.x,
            y: ue.y,
            cos_phi,
            d,
        })
    }

    /// `(d/dx, d/dy)` of the direction cosine `x/d`.
    #[inline]
    fn cos_gradient(&self) -> (f64, f64) {
        let d3 = self.d * self.d * self.d;
        (self.y * self.y / d3, -self.x * self.y / d3)
    }
}

/// Slope of `ln|sin(N u)/sin(u)|` with respect to `u`, i.e. `N cot(N u) - cot(u)`.
#[inline]
fn log_gain_slope(u: f64, n: usize) -> f64 {
    let n_f = n as f64;
    let r = u - PI * (u / PI).round();
    if r.abs() < SERIES_HALF_PHASE {
        let n2 = n_f * n_f;
        return -(n2 - 1.0) * r / 3.0 - (n2 * n2 - 1.0) * r * r * r / 45.0;
    }
    let (s, c) = u.sin_cos();
    let (sn, cn) = (n_f * u).sin_cos();
    n_f * cn / sn - c / s
}

/// Gain and exact-chain Jacobian row of one beam. `None` marks a beam whose
/// gain is too small to carry a usable log-slope.
#[inline]
pub(crate) fn exact_beam_response(geo: &PoseGeometry, beta: f64, array: &ArrayConfig) -> (f64, Option<[f64; 2]>) {
    let n = array.n_elements;
    let psi = array.geometric_phase(geo.cos_phi) + beta;
    let gain = array.efficiency * crate::arraymodel::array_factor_magnitude(psi, n);
    if gain < MIN_INFORMATIVE_GAIN {
        return (gain, None);
    }
    // u = psi/2 = pi s cos(phi) + beta/2; du/dcos = pi s
    let slope = log_gain_slope(0.5 * psi, n) * PI * array.spacing_wavelengths;
    let (dcx, dcy) = geo.cos_gradient();
    let d2 = geo.d * geo.d;
    let row = [
        DB_PER_NEPER_AMPLITUDE * (slope * dcx - 2.0 * geo.x / d2),
        DB_PER_NEPER_AMPLITUDE * (slope * dcy - 2.0 * geo.y / d2),
    ];
    (gain, Some(row))
}

/// Half-wavelength special-case gain `sin(N psi)/sin(psi)`, `psi = pi x/d + beta`.
/// Signed; its magnitude has grating lobes at `psi = +-pi`.
pub fn special_case_gain(ue: Position, beta: f64, n: usize) -> Result<f64> {
    let (cos_phi, _) = cos_and_distance(ue)?;
    let psi = PI * cos_phi + beta;
    let s = psi.sin();
    if s.abs() < SINGULAR_SIN_PSI {
        return Ok(n as f64 * (psi.cos() * (n as f64 * psi).cos()).signum());
    }
    Ok((n as f64 * psi).sin() / s)
}

fn special_case_kernel(ue: Position, beta: f64, n: usize, beam: usize) -> Result<(f64, PoseGeometry)> {
    let geo = PoseGeometry::new(ue)?;
    let psi = PI * geo.cos_phi + beta;
    let s = psi.sin();
    if s.abs() < SINGULAR_SIN_PSI {
        return Err(Error::SingularDirection { beam, sin_psi: s });
    }
    let n_f = n as f64;
    let kernel = (n_f * (n_f * psi).cos() - (n_f * psi).sin() * psi.cos() / s) / s;
    Ok((kernel, geo))
}

/// `dG/dx = pi y^2 (N cos(N psi) - cot(psi) sin(N psi)) / (sin(psi) d^3)` of the
/// special-case gain.
pub fn gain_partial_x(ue: Position, beta: f64, n: usize) -> Result<f64> {
    let (kernel, geo) = special_case_kernel(ue, beta, n, 0)?;
    Ok(PI * geo.y * geo.y * kernel / geo.d.powi(3))
}

/// `dG/dy = -pi x y (N cos(N psi) - cot(psi) sin(N psi)) / (sin(psi) d^3)`.
pub fn gain_partial_y(ue: Position, beta: f64, n: usize) -> Result<f64> {
    let (kernel, geo) = special_case_kernel(ue, beta, n, 0)?;
    Ok(-PI * geo.x * geo.y * kernel / geo.d.powi(3))
}

fn require_half_wavelength(array: &ArrayConfig) -> Result<()> {
    if (array.spacing_wavelengths - 0.5).abs() > 1e-12 {
        return Err(invalid(
            "spacing_wavelengths",
            "the special-case gain derivatives need half-wavelength spacing",
        ));
    }
    Ok(())
}

/// Jacobian of the RSS profile with respect to `(x, y)`.
pub fn rss_jacobian(
    ue: Position,
    array: &ArrayConfig,
    beams: &BeamSet,
    mode: DerivativeMode,
) -> Result<JacobianMatrix> {
    let geo = PoseGeometry::new(ue)?;
    let n = beams.len();
    let mut rows = Vec::with_capacity(n);
    let mut singular = Vec::with_capacity(n);
    match mode {
        DerivativeMode::ExactChain => {
            for &beta in &beams.phases {
                let (_, row) = exact_beam_response(&geo, beta, array);
                singular.push(row.is_none());
                rows.push(row.unwrap_or([0.0; 2]));
            }
        }
        DerivativeMode::PaperLiteral => {
            require_half_wavelength(array)?;
            let (ddx, ddy) = (geo.x / geo.d, geo.y / geo.d);
            for (i, &beta) in beams.phases.iter().enumerate() {
                match special_case_kernel(ue, beta, array.n_elements, i) {
                    Ok((kernel, _)) => {
                        let d3 = geo.d.powi(3);
                        let gx = PI * geo.y * geo.y * kernel / d3;
                        let gy = -PI * geo.x * geo.y * kernel / d3;
                        rows.push([
                            DB_PER_NEPER_AMPLITUDE * (gx - 2.0 * ddx),
                            DB_PER_NEPER_AMPLITUDE * (gy - 2.0 * ddy),
                        ]);
                        singular.push(false);
                    }
                    Err(Error::SingularDirection { .. }) => {
                        rows.push([0.0; 2]);
                        singular.push(true);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(JacobianMatrix { rows, singular })
}

fn check_mask(mask: &[bool], beams: &BeamSet) -> Result<()> {
    if mask.len() != beams.len() {
        return Err(invalid(
            "beam_mask",
            format!("has {} entries for {} beams", mask.len(), beams.len()),
        ));
    }
    Ok(())
}

fn check_sigma(sigma_db: f64) -> Result<()> {
    if !(sigma_db > 0.0 && sigma_db.is_finite()) {
        return Err(invalid("sigma_db", "must be finite and > 0"));
    }
    Ok(())
}

fn masked_sums(jac: &JacobianMatrix, mask: &[bool]) -> InfoSums {
    InfoSums::accumulate(
        jac.rows
            .iter()
            .zip(&jac.singular)
            .zip(mask)
            .filter(|((_, &sing), &keep)| keep && !sing)
            .map(|((row, _), _)| row),
    )
}

/// Fisher information over the beams selected by `beam_mask`.
pub fn fim_from_jacobian(jac: &JacobianMatrix, sigma_db: f64, beam_mask: &[bool]) -> FisherInfo {
    let s = masked_sums(jac, beam_mask);
    let inv_var = 1.0 / (sigma_db * sigma_db);
    FisherInfo {
        j_xx: s.xx * inv_var,
        j_xy: s.xy * inv_var,
        j_yy: s.yy * inv_var,
    }
}

/// `sqrt(tr(J^-1))` over the selected beams; infinity when the information is singular.
pub fn crlb_from_jacobian(jac: &JacobianMatrix, sigma_db: f64, beam_mask: &[bool]) -> f64 {
    masked_sums(jac, beam_mask).rmse_bound(sigma_db)
}

pub fn fim(
    ue: Position,
    array: &ArrayConfig,
    beams: &BeamSet,
    sigma_db: f64,
    beam_mask: &[bool],
) -> Result<FisherInfo> {
    check_sigma(sigma_db)?;
    check_mask(beam_mask, beams)?;
    let jac = rss_jacobian(ue, array, beams, DerivativeMode::ExactChain)?;
    Ok(fim_from_jacobian(&jac, sigma_db, beam_mask))
}

/// CRLB on position RMSE in meters. `f64::INFINITY` means unbounded (blindspot).
pub fn crlb_rmse(ue: Position, array: &ArrayConfig, beams: &BeamSet, sigma_db: f64, beam_mask: &[bool]) -> Result<f64> {
    check_sigma(sigma_db)?;
    check_mask(beam_mask, beams)?;
    let jac = rss_jacobian(ue, array, beams, DerivativeMode::ExactChain)?;
    Ok(crlb_from_jacobian(&jac, sigma_db, beam_mask))
}

/// Large-array approximation `N * A_m` of the RSS partial, keeping only the
/// `N cos(N psi)` term of the special-case gain derivative:
/// `A_m = (20/ln 10) c_m cos(N psi) / (sin(psi) d^3)` with `c_x = pi y^2` and
/// `c_y = -pi x y`.
pub fn asymptotic_partial(ue: Position, beta: f64, n: usize, axis: Axis) -> Result<f64> {
    Ok(n as f64 * asymptotic_coefficient(ue, beta, n, axis)?)
}

fn asymptotic_coefficient(ue: Position, beta: f64, n: usize, axis: Axis) -> Result<f64> {
    let geo = PoseGeometry::new(ue)?;
    let psi = PI * geo.cos_phi + beta;
    let s = psi.sin();
    if s.abs() < SINGULAR_SIN_PSI {
        return Err(Error::SingularDirection { beam: 0, sin_psi: s });
    }
    let c = match axis {
        Axis::X => PI * geo.y * geo.y,
        Axis::Y => -PI * geo.x * geo.y,
    };
    Ok(DB_PER_NEPER_AMPLITUDE * c * (n as f64 * psi).cos() / (s * geo.d.powi(3)))
}

/// Sums `(sum A_x^2, sum A_x A_y, sum A_y^2)` feeding the asymptotic bound.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AsymptoticSums {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

/// `sigma^2 / N * sqrt((S_xx + S_yy) / (S_xx S_yy - S_xy^2))`, infinity if singular.
pub fn asymptotic_bound_from_sums(sigma_db: f64, n: usize, sums: &AsymptoticSums) -> f64 {
    let s = InfoSums {
        xx: sums.xx,
        xy: sums.xy,
        yy: sums.yy,
    };
    let root = s.rmse_bound(1.0);
    sigma_db * sigma_db / n as f64 * root
}

/// Large-`N` closed form of the bound over all beams of a half-wavelength array.
pub fn asymptotic_crlb(ue: Position, array: &ArrayConfig, beams: &BeamSet, sigma_db: f64) -> Result<f64> {
    check_sigma(sigma_db)?;
    require_half_wavelength(array)?;
    let n = array.n_elements;
    let mut sums = AsymptoticSums::default();
    for &beta in &beams.phases {
        let ax = match asymptotic_coefficient(ue, beta, n, Axis::X) {
            Ok(v) => v,
            Err(Error::SingularDirection { .. }) => continue,
            Err(e) => return Err(e),
        };
        let ay = asymptotic_coefficient(ue, beta, n, Axis::Y)?;
        sums.xx += ax * ax;
        sums.xy += ax * ay;
        sums.yy += ay * ay;
    }
    Ok(asymptotic_bound_from_sums(sigma_db, n, &sums))
}
