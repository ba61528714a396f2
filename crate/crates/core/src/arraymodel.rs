//! Uniform linear array (ULA) factor and the sector-level-sweep beam set.
//!
//! The array lies along the x-axis with isotropic elements. Azimuth `phi` is
//! measured from the array axis, so broadside is `phi = pi/2`. The inter-element
//! phase progression of beam `i` is
//!
//! ```text
//! psi_i(phi) = 2*pi*(d_s/lambda)*cos(phi) + beta_i
//! ```
//!
//! Gains are amplitude-style: `G = efficiency * |A(psi)|`, which peaks at `N`
//! (not at the conventional power directivity `|A|^2 / N`). Downstream the RSS
//! model takes `20*log10(G)`.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Below this `|sin(psi/2)|` the closed-form magnitude switches to its series.
const SINGULAR_HALF_SIN: f64 = 1e-8;

/// Geometry of the radiating array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArrayConfig {
    pub n_elements: usize,
    /// Element spacing in wavelengths (`d_s / lambda`).
    pub spacing_wavelengths: f64,
    /// Radiation efficiency in `(0, 1]`.
    pub efficiency: f64,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            n_elements: 32,
            spacing_wavelengths: 0.5,
            efficiency: 1.0,
        }
    }
}

impl ArrayConfig {
    pub fn new(n_elements: usize, spacing_wavelengths: f64, efficiency: f64) -> Result<Self> {
        let cfg = Self {
            n_elements,
            spacing_wavelengths,
            efficiency,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Half-wavelength array with unit efficiency.
    pub fn half_wavelength(n_elements: usize) -> Result<Self> {
        Self::new(n_elements, 0.5, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_elements < 1 {
            return Err(invalid("n_elements", "must be at least 1"));
        }
        if !(self.spacing_wavelengths.is_finite() && self.spacing_wavelengths > 0.0) {
            return Err(invalid("spacing_wavelengths", "must be finite and > 0"));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(invalid("efficiency", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Same geometry with a different element count.
    pub fn with_elements(&self, n_elements: usize) -> Result<Self> {
        Self::new(n_elements, self.spacing_wavelengths, self.efficiency)
    }

    /// Geometric phase `k * d_s * cos(phi)` for a direction cosine.
    #[inline]
    pub fn geometric_phase(&self, cos_phi: f64) -> f64 {
        TAU * self.spacing_wavelengths * cos_phi
    }
}

/// Steering phases and boresight azimuths of the sweep, one entry per beam.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamSet {
    pub phases: Vec<f64>,
    pub boresights: Vec<f64>,
}

impl BeamSet {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn phase(&self, beam: usize) -> Result<f64> {
        self.phases.get(beam).copied().ok_or(Error::InvalidBeam {
            index: beam,
            count: self.len(),
        })
    }
}

/// Array factor by direct summation of the element phasors.
pub fn array_factor_complex(psi: f64, n: usize) -> Complex64 {
    (0..n).map(|m| Complex64::from_polar(1.0, m as f64 * psi)).sum()
}

/// `|sin(n*psi/2) / sin(psi/2)|`, with the removable singularities at
/// `psi = 2*pi*m` resolved to their limit `n`.
pub fn array_factor_magnitude(psi: f64, n: usize) -> f64 {
    let n_f = n as f64;
    // Reduce to (-pi, pi]; the magnitude is 2*pi periodic.
    let r = psi - TAU * (psi / TAU).round();
    let half_sin = (0.5 * r).sin();
    if half_sin.abs() < SINGULAR_HALF_SIN {
        // n * (1 - (n^2 - 1) r^2 / 24) + O(r^4)
        return n_f * (1.0 - (n_f * n_f - 1.0) * r * r / 24.0).abs();
    }
    ((0.5 * n_f * r).sin() / half_sin).abs().min(n_f)
}

/// Sector-level-sweep beams slicing the half circle `(0, pi)` into `N` equal
/// sectors. Boresight `theta_i = pi*(i + 1/2)/N` for the zero-based index `i`,
/// steered with `beta_i = -2*pi*(d_s/lambda)*cos(theta_i)`.
pub fn sls_beam_set(array: &ArrayConfig) -> BeamSet {
    let n = array.n_elements;
    let boresights: Vec<f64> = (0..n).map(|i| PI * (i as f64 + 0.5) / n as f64).collect();
    let phases = boresights
        .iter()
        .map(|&theta| -array.geometric_phase(theta.cos()))
        .collect();
    BeamSet { phases, boresights }
}

/// Linear amplitude gain `efficiency * |A(psi_i)|` of beam `beam` (zero-based)
/// toward azimuth `phi`.
pub fn beam_gain(phi: f64, beam: usize, array: &ArrayConfig, beams: &BeamSet) -> Result<f64> {
    let beta = beams.phase(beam)?;
    Ok(gain_from_cos(phi.cos(), beta, array))
}

/// Gain for a known direction cosine; skips the `acos`/`cos` round trip.
#[inline]
pub(crate) fn gain_from_cos(cos_phi: f64, beta: f64, array: &ArrayConfig) -> f64 {
    let psi = array.geometric_phase(cos_phi) + beta;
    array.efficiency * array_factor_magnitude(psi, array.n_elements)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn single_element_factor_is_unity() {
        for psi in [-3.0, 0.0, 0.4, 12.0] {
            let af = array_factor_complex(psi, 1);
            assert_eq!(af, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn aligned_phasors_sum_to_n() {
        let af = array_factor_complex(0.0, 4);
        assert_eq!(af, Complex64::new(4.0, 0.0));
        assert_eq!(array_factor_magnitude(0.0, 16), 16.0);
    }

    #[test]
    fn complex_sum_at_tabulated_point() {
        // Tabulated independently by summing exp(j*m*0.7), m = 0..7.
        let af = array_factor_complex(0.7, 8);
        assert!((af.re - -0.752_464_254_292_707_2).abs() < 1e-13);
        assert!((af.im - 0.623_053_321_303_390_1).abs() < 1e-13);
        assert!((array_factor_magnitude(0.7, 8) - 0.976_932_902_084_613_7).abs() < 1e-13);
    }

    #[test]
    fn opposed_pair_cancels() {
        assert!(array_factor_magnitude(PI, 2) < 1e-15);
    }

    #[test]
    fn magnitude_limit_at_grating_points() {
        for m in [-2.0, 1.0, 3.0] {
            let v = array_factor_magnitude(TAU * m, 9);
            assert!((v - 9.0).abs() < 1e-9, "{v}");
        }
        // just off the singularity the series branch must agree with the direct sum
        for psi in [1e-9, -3e-9, TAU + 2e-9] {
            let direct = array_factor_complex(psi, 12).norm();
            assert!((array_factor_magnitude(psi, 12) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn beam_set_single_element_is_broadside() {
        let beams = sls_beam_set(&ArrayConfig::half_wavelength(1).unwrap());
        assert_eq!(beams.len(), 1);
        assert!((beams.boresights[0] - PI / 2.0).abs() < 1e-15);
        assert!(beams.phases[0].abs() < 1e-15);
    }

    #[test]
    fn beam_set_two_elements() {
        let beams = sls_beam_set(&ArrayConfig::half_wavelength(2).unwrap());
        assert!((beams.boresights[0] - PI / 4.0).abs() < 1e-15);
        assert!((beams.boresights[1] - 3.0 * PI / 4.0).abs() < 1e-15);
        assert!((beams.phases[0] + PI * FRAC_1_SQRT_2).abs() < 1e-14);
        assert!((beams.phases[1] - PI * FRAC_1_SQRT_2).abs() < 1e-14);
    }

    #[test]
    fn nine_sectors_slice_half_circle() {
        let beams = sls_beam_set(&ArrayConfig::half_wavelength(9).unwrap());
        assert_eq!(beams.len(), 9);
        let width = PI / 9.0;
        for (i, theta) in beams.boresights.iter().enumerate() {
            assert!((theta - width * (i as f64 + 0.5)).abs() < 1e-14);
        }
        assert!((beams.boresights[4] - PI / 2.0).abs() < 1e-14);
    }

    #[test]
    fn boresights_symmetric_about_broadside() {
        for n in 1..40 {
            let b = sls_beam_set(&ArrayConfig::half_wavelength(n).unwrap());
            for i in 0..n {
                assert!((b.boresights[i] + b.boresights[n - 1 - i] - PI).abs() < 1e-13);
                assert!((b.phases[i] + b.phases[n - 1 - i]).abs() < 1e-13);
            }
            assert!(b.boresights.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn gain_peaks_at_boresight() {
        let array = ArrayConfig::new(16, 0.5, 0.8).unwrap();
        let beams = sls_beam_set(&array);
        for (i, &theta) in beams.boresights.iter().enumerate() {
            let g = beam_gain(theta, i, &array, &beams).unwrap();
            assert!((g - 0.8 * 16.0).abs() < 1e-9);
        }
    }

    #[test]
    fn isotropic_single_element() {
        let array = ArrayConfig::new(1, 0.5, 0.7).unwrap();
        let beams = sls_beam_set(&array);
        for phi in [0.0, 0.3, 1.5, PI] {
            assert!((beam_gain(phi, 0, &array, &beams).unwrap() - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn gain_matches_complex_oracle() {
        // psi and |A| tabulated by the direct complex sum for the second beam of N = 8.
        let array = ArrayConfig::half_wavelength(8).unwrap();
        let beams = sls_beam_set(&array);
        let g = beam_gain(PI / 3.0, 1, &array, &beams).unwrap();
        assert!((g - 1.716_870_691_234_445_1).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_beam() {
        let array = ArrayConfig::half_wavelength(4).unwrap();
        let beams = sls_beam_set(&array);
        assert_eq!(
            beam_gain(1.0, 4, &array, &beams),
            Err(Error::InvalidBeam { index: 4, count: 4 })
        );
    }

    #[test]
    fn config_invariants() {
        assert!(ArrayConfig::new(0, 0.5, 1.0).is_err());
        assert!(ArrayConfig::new(4, 0.0, 1.0).is_err());
        assert!(ArrayConfig::new(4, 0.5, 0.0).is_err());
        assert!(ArrayConfig::new(4, 0.5, 1.1).is_err());
        assert!(ArrayConfig::new(4, 0.25, 1.0).is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn closed_form_equals_direct_sum(psi in -40.0f64..40.0, n in 1usize..=64) {
                let direct = array_factor_complex(psi, n).norm();
                prop_assert!((array_factor_magnitude(psi, n) - direct).abs() < 1e-10);
            }

            #[test]
            fn magnitude_even_and_periodic(psi in -10.0f64..10.0, n in 1usize..=64) {
                let f = array_factor_magnitude(psi, n);
                prop_assert!((f - array_factor_magnitude(-psi, n)).abs() < 1e-9);
                prop_assert!((f - array_factor_magnitude(psi + TAU, n)).abs() < 1e-9);
                prop_assert!((0.0..=n as f64).contains(&f));
            }

            #[test]
            fn gain_bounded(phi in 0.0f64..=PI, n in 1usize..=48, eff in 0.05f64..=1.0) {
                let array = ArrayConfig::new(n, 0.5, eff).unwrap();
                let beams = sls_beam_set(&array);
                for i in 0..n {
                    let g = beam_gain(phi, i, &array, &beams).unwrap();
                    prop_assert!(g >= 0.0 && g <= eff * n as f64 + 1e-12);
                }
            }
        }
    }
}
