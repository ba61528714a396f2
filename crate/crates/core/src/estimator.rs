//! Nonlinear least-squares position estimation from a truncated sweep.
//!
//! The estimator minimizes `||s - p(x)||^2` over the detected beams. Two
//! iterations are available: the literal fixed-gain update
//! `x <- x - H^T (s - p(x))` ([`Method::PaperNewton`]) and a damped
//! Gauss-Newton (Levenberg-Marquardt) step ([`Method::GaussNewtonDamped`]),
//! which is the default. Either one is run from a uniform grid of starting
//! points and the lowest-residual result wins.

use serde::{Deserialize, Serialize};

use crate::arraymodel::{ArrayConfig, BeamSet};
use crate::error::{invalid, Error, Result};
use crate::fisher::{exact_beam_response, PoseGeometry};
use crate::rfchannel::{rss_from_parts, LinkBudget, ObservationVector, Position};

/// Consecutive damping increases allowed when the normal matrix is singular.
const MAX_SINGULAR_RETRIES: usize = 10;
const DAMPING_DECREASE: f64 = 0.5;
const DAMPING_INCREASE: f64 = 4.0;
const MIN_DAMPING: f64 = 1e-15;
/// Damping beyond this means the step can no longer make progress.
const MAX_DAMPING: f64 = 1e12;
/// Relative cost difference under which two multistart results tie.
/// Largest damping at which a short accepted step counts as convergence.
const CONVERGED_MAX_DAMPING: f64 = 1.0;
/// Grid runs stop once within this many step tolerances of a known endpoint.
const MERGE_RADIUS_STEPS: f64 = 10.0;
/// Iterations a grid run gets before it must be competitive.
const PRUNE_AFTER: usize = 10;
/// A grid run still above this multiple of the best cost so far is abandoned.
const PRUNE_COST_RATIO: f64 = 2.0;
/// A rejected step this far below the tolerance ends the iteration as converged.
const REJECTED_STEP_FRACTION: f64 = 1e-3;
const COST_TIE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PaperNewton,
    #[default]
    GaussNewtonDamped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub method: Method,
    pub max_iterations: usize,
    /// Converged once a step moves less than this many meters.
    pub step_tolerance: f64,
    /// Starting points per axis of the search region.
    pub multistart_grid: usize,
    pub damping_initial: f64,
    /// Fewer detected beams than this makes an observation unlocalizable.
    pub min_detected: usize,
    /// Extra starts taken from the best local minima of a direction scan of
    /// the residual with the range profiled out. Zero keeps the plain grid.
    pub scan_starts: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            method: Method::GaussNewtonDamped,
            max_iterations: 100,
            step_tolerance: 1e-4,
            multistart_grid: 5,
            damping_initial: 1e-2,
            min_detected: 2,
            scan_starts: 3,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(invalid("max_iterations", "must be at least 1"));
        }
        if !(self.step_tolerance > 0.0 && self.step_tolerance.is_finite()) {
            return Err(invalid("step_tolerance", "must be finite and > 0"));
        }
        if self.multistart_grid < 1 {
            return Err(invalid("multistart_grid", "must be at least 1"));
        }
        if !(self.damping_initial > 0.0 && self.damping_initial.is_finite()) {
            return Err(invalid("damping_initial", "must be finite and > 0"));
        }
        if self.min_detected < 1 {
            return Err(invalid("min_detected", "must be at least 1"));
        }
        Ok(())
    }
}

/// Axis-aligned search rectangle; estimates are clamped into it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let r = Self {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        if !(x_min < x_max && y_min < y_max) || ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite()) {
            return Err(invalid("search_region", "must be a finite nonempty rectangle"));
        }
        Ok(r)
    }

    pub fn clamp(&self, p: Position) -> Position {
        Position::new(p.x.clamp(self.x_min, self.x_max), p.y.clamp(self.y_min, self.y_max))
    }

    pub fn contains(&self, p: Position) -> bool {
        (self.x_min..=self.x_max).contains(&p.x) && (self.y_min..=self.y_max).contains(&p.y)
    }

    /// Centers of a `k x k` partition, row-major by y then x.
    pub fn grid(&self, k: usize) -> Vec<Position> {
        let (w, h) = (self.x_max - self.x_min, self.y_max - self.y_min);
        let at = |lo: f64, span: f64, i: usize| lo + span * (i as f64 + 0.5) / k as f64;
        (0..k)
            .flat_map(|iy| (0..k).map(move |ix| Position::new(at(self.x_min, w, ix), at(self.y_min, h, iy))))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorResult {
    pub estimate: Position,
    pub iterations: usize,
    pub converged: bool,
    /// `||s - p(estimate)||` over detected beams, in dB.
    pub residual_norm: f64,
    pub detected_count: usize,
}

/// A least-squares model `r(x) = s - p(x)` with Jacobian `H = dp/dx`.
pub trait LeastSquaresModel {
    /// Fill `r` with the residuals at `at`, and `h` with the model Jacobian
    /// rows when `h` is given.
    fn evaluate(&self, at: Position, r: &mut Vec<f64>, h: Option<&mut Vec<[f64; 2]>>) -> Result<()>;
}

/// Log-RSS model over the detected beams of one observation.
#[derive(Debug, Clone)]
pub struct RssModel<'a> {
    array: &'a ArrayConfig,
    constant_db: f64,
    phases: Vec<f64>,
    measured: Vec<f64>,
    /// Phases of the beams that were not detected; only the scan ranking uses them.
    silent: Vec<f64>,
}

impl<'a> RssModel<'a> {
    pub fn new(obs: &ObservationVector, array: &'a ArrayConfig, beams: &BeamSet, link: &LinkBudget) -> Result<Self> {
        if obs.detected.len() != beams.len() || obs.rss_dbm.len() != beams.len() {
            return Err(invalid("observation", "length differs from the beam set"));
        }
        let idx: Vec<usize> = obs.detected_indices().collect();
        if idx.is_empty() {
            return Err(Error::Unlocalizable {
                detected: 0,
                required: 1,
            });
        }
        Ok(Self {
            array,
            constant_db: link.constant_term_db(),
            phases: idx.iter().map(|&i| beams.phases[i]).collect(),
            measured: idx.iter().map(|&i| obs.rss_dbm[i]).collect(),
            silent: (0..beams.len())
                .filter(|&i| !obs.detected[i])
                .map(|i| beams.phases[i])
                .collect(),
        })
    }
}

/// Dynamic range of the beams used by the direction scan, in dB.
pub const SCAN_WINDOW_DB: f64 = 20.0;

/// Beam windows of the continuation from a scan start, in dB below the strongest.
const CONTINUATION_WINDOWS_DB: [f64; 3] = [SCAN_WINDOW_DB, 30.0, 40.0];

/// Fine-scan points on each side of a scan estimate.
const REFINE_STEPS: usize = 75;
/// Half width of the fine scan, in coarse scan spacings.
const REFINE_HALF_WIDTH: f64 = 1.5;

fn scan_points(n: usize) -> usize {
    8 * n + 32
}

/// Residual clip used when ranking scan candidates, in dB.
pub const SCAN_CLIP_DB: f64 = 6.0;

impl RssModel<'_> {
    pub fn len(&self) -> usize {
        self.measured.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measured.is_empty()
    }

    /// The beams within [`SCAN_WINDOW_DB`] of the strongest.
    pub fn strong_beams(&self) -> Self {
        self.within_window(SCAN_WINDOW_DB)
    }

    /// The beams within `window_db` of the strongest (all beams if that leaves
    /// fewer than two).
    pub fn within_window(&self, window_db: f64) -> Self {
        let strongest = self.measured.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let keep: Vec<usize> = (0..self.measured.len())
            .filter(|&i| self.measured[i] >= strongest - window_db)
            .collect();
        if keep.len() < 2 {
            return self.clone();
        }
        Self {
            array: self.array,
            constant_db: self.constant_db,
            phases: keep.iter().map(|&i| self.phases[i]).collect(),
            measured: keep.iter().map(|&i| self.measured[i]).collect(),
            silent: self.silent.clone(),
        }
    }

    /// Profiled cost `(spread, offset)` of every beam of the model at direction cosine `c`.
    fn profile_at(&self, c: f64) -> (f64, f64) {
        let k = self.measured.len() as f64;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for (&beta, &s) in self.phases.iter().zip(&self.measured) {
            let gain = crate::arraymodel::gain_from_cos(c, beta, self.array);
            let v = s - rss_from_parts(self.constant_db, gain, 1.0);
            sum += v;
            sum_sq += v * v;
        }
        let offset = sum / k;
        (sum_sq - k * offset * offset, offset)
    }

    /// Fine direction scan of the full (unclipped) profiled cost within
    /// `half_width` of the direction cosine of `around`. Near the base station
    /// many beams put pattern nulls close together and the true basin can be
    /// narrower than any coarse start spacing.
    pub fn refine_direction(&self, around: Position, half_width: f64, steps: usize, region: &Region) -> Position {
        let c0 = around.x / around.x.hypot(around.y);
        let mut best = (f64::INFINITY, c0, 0.0);
        for j in 0..=2 * steps {
            let c = c0 + half_width * (j as f64 - steps as f64) / steps as f64;
            if c.abs() >= 1.0 {
                continue;
            }
            let (cost, offset) = self.profile_at(c);
            if cost < best.0 {
                best = (cost, c, offset);
            }
        }
        if !best.0.is_finite() {
            return around;
        }
        let (_, c, offset) = best;
        let d = 10f64.powf(-offset / 40.0);
        region.clamp(Position::new(d * c, d * (1.0 - c * c).sqrt()))
    }

    /// Scans the direction cosine `c` on a grid finer than the beamwidth. For a
    /// fixed `c` the residual is affine in `40 log10 d`, so the best range is the
    /// mean offset and the remaining cost is the spread about it. The `count`
    /// deepest local minima of that profile become starts, best first.
    ///
    /// Only beams within [`SCAN_WINDOW_DB`] of the strongest enter the scan:
    /// weak beams sit near pattern nulls, where the log-gain is too steep for
    /// any affordable grid.
    pub fn scan_starts(&self, count: usize, region: &Region) -> Vec<Position> {
        let m = scan_points(self.array.n_elements);
        let strong = self.strong_beams();
        let strong: Vec<(f64, f64)> = strong
            .phases
            .iter()
            .copied()
            .zip(strong.measured.iter().copied())
            .collect();
        let k = strong.len() as f64;
        let profile: Vec<(f64, f64, f64)> = (0..m)
            .map(|j| {
                let c = -1.0 + 2.0 * (j as f64 + 0.5) / m as f64;
                let (mut sum, mut sum_sq) = (0.0, 0.0);
                for &(beta, s) in &strong {
                    let gain = crate::arraymodel::gain_from_cos(c, beta, self.array);
                    let v = s - rss_from_parts(self.constant_db, gain, 1.0);
                    sum += v;
                    sum_sq += v * v;
                }
                let offset = sum / k;
                (c, sum_sq - k * offset * offset, offset)
            })
            .collect();
        let minima: Vec<&(f64, f64, f64)> = (0..m)
            .filter(|&j| {
                let v = profile[j].1;
                (j == 0 || v <= profile[j - 1].1) && (j + 1 == m || v < profile[j + 1].1)
            })
            .map(|j| &profile[j])
            .collect();
        // A few strong beams fit many directions exactly; rank the candidates by
        // how well every detected beam agrees, and by how far silent beams would
        // have risen above the weakest detection. Residuals are clipped so a
        // beam sitting near a null cannot dominate.
        let weakest = self.measured.iter().copied().fold(f64::INFINITY, f64::min);
        let mut ranked: Vec<(f64, f64, f64)> = minima
            .into_iter()
            .map(|&(c, _, offset)| {
                let agreement: f64 = self
                    .phases
                    .iter()
                    .zip(&self.measured)
                    .map(|(&beta, &s)| {
                        let gain = crate::arraymodel::gain_from_cos(c, beta, self.array);
                        let v = s - rss_from_parts(self.constant_db, gain, 1.0) - offset;
                        v.abs().min(SCAN_CLIP_DB).powi(2)
                    })
                    .sum();
                let silence: f64 = self
                    .silent
                    .iter()
                    .map(|&beta| {
                        let gain = crate::arraymodel::gain_from_cos(c, beta, self.array);
                        let excess = rss_from_parts(self.constant_db, gain, 1.0) + offset - weakest;
                        excess.clamp(0.0, SCAN_CLIP_DB).powi(2)
                    })
                    .sum();
                (agreement + silence, c, offset)
            })
            .collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        ranked
            .into_iter()
            .take(count)
            .map(|(_, c, offset)| {
                // s - p = offset + 40 log10 d vanishes on average
                let d = 10f64.powf(-offset / 40.0);
                region.clamp(Position::new(d * c, d * (1.0 - c * c).sqrt()))
            })
            .collect()
    }
}

impl LeastSquaresModel for RssModel<'_> {
    fn evaluate(&self, at: Position, r: &mut Vec<f64>, h: Option<&mut Vec<[f64; 2]>>) -> Result<()> {
        let geo = PoseGeometry::new(at)?;
        r.clear();
        match h {
            Some(h) => {
                h.clear();
                for (&beta, &s) in self.phases.iter().zip(&self.measured) {
                    let (gain, row) = exact_beam_response(&geo, beta, self.array);
                    r.push(s - rss_from_parts(self.constant_db, gain, geo.d));
                    h.push(row.unwrap_or([0.0; 2]));
                }
            }
            None => {
                for (&beta, &s) in self.phases.iter().zip(&self.measured) {
                    let gain = crate::arraymodel::gain_from_cos(geo.cos_phi, beta, self.array);
                    r.push(s - rss_from_parts(self.constant_db, gain, geo.d));
                }
            }
        }
        Ok(())
    }
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Residuals `s_i - p_i(candidate)` over the detected beams.
pub fn residual(
    candidate: Position,
    obs: &ObservationVector,
    array: &ArrayConfig,
    beams: &BeamSet,
    link: &LinkBudget,
) -> Result<Vec<f64>> {
    let model = RssModel::new(obs, array, beams, link)?;
    let mut r = Vec::new();
    model.evaluate(candidate, &mut r, None)?;
    Ok(r)
}

/// Literal fixed-gain update `x - H^T (s - p(x))`.
///
/// With `r = s - p` the gradient of `||r||^2 / 2` is `-H^T r`, so this moves
/// uphill; it is kept for comparison with the damped Gauss-Newton step.
pub fn paper_newton_step<M: LeastSquaresModel>(model: &M, candidate: Position) -> Result<Position> {
    let mut r = Vec::new();
    let mut h = Vec::new();
    model.evaluate(candidate, &mut r, Some(&mut h))?;
    let (gx, gy) = h
        .iter()
        .zip(&r)
        .fold((0.0, 0.0), |(gx, gy), (row, ri)| (gx + row[0] * ri, gy + row[1] * ri));
    Ok(Position::new(candidate.x - gx, candidate.y - gy))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonStep {
    /// New iterate when accepted, otherwise the unchanged candidate.
    pub position: Position,
    pub damping: f64,
    pub accepted: bool,
    /// Length of the proposed (clamped) step.
    pub step_norm: f64,
    /// `||r||^2` at `position`.
    pub cost: f64,
    /// The damped normal matrix stayed singular through every retry.
    pub stalled: bool,
}

/// One damped Gauss-Newton step `(H^T H + damping diag(H^T H))^-1 H^T r`.
///
/// The damping halves after an accepted step and grows fourfold after a
/// rejected one; a rejected step leaves the candidate unchanged.
pub fn gauss_newton_step<M: LeastSquaresModel>(
    model: &M,
    candidate: Position,
    damping: f64,
    region: Option<&Region>,
) -> Result<GaussNewtonStep> {
    let mut r = Vec::new();
    let mut h = Vec::new();
    model.evaluate(candidate, &mut r, Some(&mut h))?;
    let cost = squared_norm(&r);
    let mut trial_r = Vec::with_capacity(r.len());
    damped_step(model, candidate, damping, region, &r, &h, cost, &mut trial_r)
}

#[allow(clippy::too_many_arguments)]
fn damped_step<M: LeastSquaresModel>(
    model: &M,
    candidate: Position,
    mut damping: f64,
    region: Option<&Region>,
    r: &[f64],
    h: &[[f64; 2]],
    cost: f64,
    trial_r: &mut Vec<f64>,
) -> Result<GaussNewtonStep> {
    let (mut axx, mut axy, mut ayy, mut gx, mut gy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (row, ri) in h.iter().zip(r) {
        axx += row[0] * row[0];
        axy += row[0] * row[1];
        ayy += row[1] * row[1];
        gx += row[0] * ri;
        gy += row[1] * ri;
    }
    let unchanged = |damping: f64, step_norm: f64, stalled: bool| GaussNewtonStep {
        position: candidate,
        damping,
        accepted: false,
        step_norm,
        cost,
        stalled,
    };
    if gx == 0.0 && gy == 0.0 {
        return Ok(unchanged(damping, 0.0, false));
    }
    // Marquardt scaling, floored so a flat column does not make it singular.
    let floor = 1e-12 * (axx + ayy);
    let (dxx, dyy) = (axx.max(floor), ayy.max(floor));
    let mut attempt = 0;
    let (sx, sy) = loop {
        let mxx = axx + damping * dxx;
        let myy = ayy + damping * dyy;
        let det = mxx * myy - axy * axy;
        if det.is_finite() && det > 1e-14 * mxx * myy && mxx > 0.0 && myy > 0.0 {
            break ((myy * gx - axy * gy) / det, (mxx * gy - axy * gx) / det);
        }
        attempt += 1;
        if attempt > MAX_SINGULAR_RETRIES {
            return Ok(unchanged(damping, f64::INFINITY, true));
        }
        damping = (damping * DAMPING_INCREASE).max(1e-6);
    };
    let mut next = Position::new(candidate.x + sx, candidate.y + sy);
    if let Some(region) = region {
        next = region.clamp(next);
    }
    let step_norm = next.distance_to(&candidate);
    let trial_cost = match model.evaluate(next, trial_r, None) {
        Ok(()) => squared_norm(trial_r),
        Err(Error::DegenerateGeometry) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    if trial_cost < cost {
        Ok(GaussNewtonStep {
            position: next,
            damping: (damping * DAMPING_DECREASE).max(MIN_DAMPING),
            accepted: true,
            step_norm,
            cost: trial_cost,
            stalled: false,
        })
    } else {
        Ok(unchanged(damping * DAMPING_INCREASE, step_norm, false))
    }
}

/// Outcome of a single-start iteration.
#[derive(Debug, Clone, Copy)]
pub struct Run {
    pub position: Position,
    pub iterations: usize,
    pub converged: bool,
    /// Final `||r||^2`.
    pub cost: f64,
}

/// Damped Gauss-Newton from one start.
pub fn run_gauss_newton<M: LeastSquaresModel>(
    model: &M,
    start: Position,
    cfg: &EstimatorConfig,
    region: &Region,
) -> Result<Run> {
    run_gauss_newton_merging(model, start, cfg, region, &[], f64::INFINITY).map(|run| run.expect("never abandoned"))
}

/// As [`run_gauss_newton`], but gives up (`None`) once an iterate comes within
/// [`MERGE_RADIUS_STEPS`] step tolerances of an already known endpoint (from
/// there it would only re-find that endpoint), or when after [`PRUNE_AFTER`]
/// iterations its cost still exceeds `prune_above`.
fn run_gauss_newton_merging<M: LeastSquaresModel>(
    model: &M,
    start: Position,
    cfg: &EstimatorConfig,
    region: &Region,
    endpoints: &[Position],
    prune_above: f64,
) -> Result<Option<Run>> {
    let merge_radius = MERGE_RADIUS_STEPS * cfg.step_tolerance;
    let mut previous_short = false;
    let mut x = region.clamp(start);
    let mut damping = cfg.damping_initial;
    let mut r = Vec::new();
    let mut h = Vec::new();
    let mut trial_r = Vec::new();
    model.evaluate(x, &mut r, Some(&mut h))?;
    let mut cost = squared_norm(&r);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let step = damped_step(model, x, damping, Some(region), &r, &h, cost, &mut trial_r)?;
        damping = step.damping;
        if step.stalled || damping > MAX_DAMPING {
            break;
        }
        if step.accepted {
            x = step.position;
            cost = step.cost;
            // One short step can be a slow start along a curved valley; two in
            // a row, close to the undamped Gauss-Newton step, mark convergence.
            let short = step.step_norm < cfg.step_tolerance;
            if short && previous_short && damping <= CONVERGED_MAX_DAMPING {
                converged = true;
                break;
            }
            previous_short = short;
            if endpoints.iter().any(|e| e.distance_to(&x) < merge_radius) {
                return Ok(None);
            }
            if iterations >= PRUNE_AFTER && cost > prune_above {
                return Ok(None);
            }
            model.evaluate(x, &mut r, Some(&mut h))?;
        } else if step.step_norm < REJECTED_STEP_FRACTION * cfg.step_tolerance {
            // even a heavily damped step fails to descend: a minimum at this scale
            converged = true;
            break;
        }
    }
    Ok(Some(Run {
        position: x,
        iterations,
        converged,
        cost,
    }))
}

/// The literal update iterated from one start.
pub fn run_paper_newton<M: LeastSquaresModel>(
    model: &M,
    start: Position,
    cfg: &EstimatorConfig,
    region: &Region,
) -> Result<Run> {
    let mut x = region.clamp(start);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let next = region.clamp(paper_newton_step(model, x)?);
        let moved = next.distance_to(&x);
        x = next;
        if moved < cfg.step_tolerance {
            converged = true;
            break;
        }
    }
    let mut r = Vec::new();
    model.evaluate(x, &mut r, None)?;
    Ok(Run {
        position: x,
        iterations,
        converged,
        cost: squared_norm(&r),
    })
}

/// `a` is preferred over `b`: lower cost, ties toward smaller `|x|`, then
/// lexicographic `(x, y)`.
fn better(a: &Run, b: &Run) -> bool {
    let scale = a.cost.abs().max(b.cost.abs()).max(f64::MIN_POSITIVE);
    if (a.cost - b.cost).abs() > COST_TIE * scale {
        return a.cost < b.cost;
    }
    let (pa, pb) = (a.position, b.position);
    (pa.x.abs(), pa.x, pa.y) < (pb.x.abs(), pb.x, pb.y)
}

/// Multistart least-squares position estimate clamped to `region`.
pub fn estimate(
    obs: &ObservationVector,
    array: &ArrayConfig,
    beams: &BeamSet,
    link: &LinkBudget,
    cfg: &EstimatorConfig,
    region: &Region,
) -> Result<EstimatorResult> {
    let detected = obs.detected_count();
    let required = cfg.min_detected.max(1);
    if detected < required {
        return Err(Error::Unlocalizable { detected, required });
    }
    let model = RssModel::new(obs, array, beams, link)?;
    let run_from = |m: &RssModel, start: Position| match cfg.method {
        Method::GaussNewtonDamped => run_gauss_newton(m, start, cfg, region),
        Method::PaperNewton => run_paper_newton(m, start, cfg, region),
    };
    let mut runs: Vec<Run> = Vec::with_capacity(cfg.multistart_grid.pow(2) + cfg.scan_starts);
    if cfg.scan_starts > 0 {
        // Fit the smooth strong-beam cost first, then admit weaker (rougher)
        // beams stage by stage, ending with every detected beam.
        let mut stages: Vec<RssModel> = Vec::with_capacity(CONTINUATION_WINDOWS_DB.len() + 1);
        for &w in &CONTINUATION_WINDOWS_DB {
            let m = model.within_window(w);
            if m.len() < model.len() && stages.last().is_none_or(|prev| prev.len() < m.len()) {
                stages.push(m);
            }
        }
        stages.push(model.clone());
        for start in model.scan_starts(cfg.scan_starts, region) {
            let mut at = start;
            let mut iterations = 0;
            let mut last = None;
            for stage in &stages {
                let run = run_from(stage, at)?;
                iterations += run.iterations;
                at = run.position;
                last = Some(run);
            }
            let mut fine = last.expect("at least the full stage");
            fine.iterations = iterations;
            runs.push(fine);
        }
        // the scan grid can miss the narrow basins near the base station
        let spacing = 2.0 / scan_points(array.n_elements) as f64;
        let scanned = runs.len();
        for k in 0..scanned {
            let lead = runs[k];
            let start = model.refine_direction(lead.position, REFINE_HALF_WIDTH * spacing, REFINE_STEPS, region);
            if start.distance_to(&lead.position) > 0.0 {
                let mut polished = run_from(&model, start)?;
                polished.iterations += lead.iterations;
                runs.push(polished);
            }
        }
    }
    for start in region.grid(cfg.multistart_grid) {
        match cfg.method {
            Method::GaussNewtonDamped => {
                let known: Vec<Position> = runs.iter().filter(|r| r.converged).map(|r| r.position).collect();
                let best_cost = runs.iter().map(|r| r.cost).fold(f64::INFINITY, f64::min);
                let prune_above = PRUNE_COST_RATIO * best_cost + 1e-9;
                if let Some(run) = run_gauss_newton_merging(&model, start, cfg, region, &known, prune_above)? {
                    runs.push(run);
                }
            }
            Method::PaperNewton => runs.push(run_paper_newton(&model, start, cfg, region)?),
        }
    }
    let mut best: Option<Run> = None;
    for run in runs {
        if best.as_ref().is_none_or(|b| better(&run, b)) {
            best = Some(run);
        }
    }
    let best = best.ok_or(Error::Empty("multistart grid"))?;
    Ok(EstimatorResult {
        estimate: best.position,
        iterations: best.iterations,
        converged: best.converged,
        residual_norm: best.cost.sqrt(),
        detected_count: detected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arraymodel::sls_beam_set;
    use crate::rfchannel::{exact_profile, synthesize_observation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn room() -> Region {
        Region::new(-4.0, 4.0, 0.01, 8.0).unwrap()
    }

    fn setup(n: usize) -> (ArrayConfig, BeamSet, LinkBudget) {
        let array = ArrayConfig::half_wavelength(n).unwrap();
        let beams = sls_beam_set(&array);
        (array, beams, LinkBudget::default())
    }

    fn noiseless(
        ue: Position,
        array: &ArrayConfig,
        beams: &BeamSet,
        link: &LinkBudget,
        threshold: f64,
    ) -> ObservationVector {
        let rss = exact_profile(ue, array, beams, link).unwrap();
        let detected = rss.iter().map(|&s| s >= threshold).collect();
        ObservationVector {
            rss_dbm: rss,
            detected,
            sigma_db: 0.0,
        }
    }

    /// Linear model `p(x) = A x` used to check the step algebra.
    struct Linear {
        a: Vec<[f64; 2]>,
        s: Vec<f64>,
    }

    impl LeastSquaresModel for Linear {
        fn evaluate(&self, at: Position, r: &mut Vec<f64>, h: Option<&mut Vec<[f64; 2]>>) -> Result<()> {
            r.clear();
            r.extend(
                self.a
                    .iter()
                    .zip(&self.s)
                    .map(|(row, s)| s - (row[0] * at.x + row[1] * at.y)),
            );
            if let Some(h) = h {
                h.clear();
                h.extend_from_slice(&self.a);
            }
            Ok(())
        }
    }

    #[test]
    fn residual_zero_at_truth_and_masked_length() {
        let (array, beams, link) = setup(16);
        let ue = Position::new(0.8, 2.2);
        let obs = noiseless(ue, &array, &beams, &link, -80.0);
        let r = residual(ue, &obs, &array, &beams, &link).unwrap();
        assert_eq!(r.len(), obs.detected_count());
        assert!(r.iter().all(|v| v.abs() < 1e-12));

        let mut masked = obs.clone();
        masked.detected = (0..16).map(|i| i % 3 == 0).collect();
        let r = residual(ue, &masked, &array, &beams, &link).unwrap();
        assert_eq!(r.len(), 6);
    }

    #[test]
    fn residual_needs_a_detection() {
        let (array, beams, link) = setup(4);
        let mut obs = noiseless(Position::new(1.0, 1.0), &array, &beams, &link, -80.0);
        obs.detected = vec![false; 4];
        assert!(matches!(
            residual(Position::new(1.0, 1.0), &obs, &array, &beams, &link),
            Err(Error::Unlocalizable { detected: 0, .. })
        ));
    }

    #[test]
    fn truth_beats_one_meter_offset_on_average() {
        let (array, beams, link) = setup(16);
        let ue = Position::new(-0.6, 2.7);
        let off = Position::new(0.2, 3.3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut at_truth, mut at_off) = (0.0, 0.0);
        for _ in 0..1000 {
            let mut obs = synthesize_observation(ue, &array, &beams, &link, 1.0, -80.0, &mut rng).unwrap();
            obs.detected = vec![true; 16];
            at_truth += squared_norm(&residual(ue, &obs, &array, &beams, &link).unwrap());
            at_off += squared_norm(&residual(off, &obs, &array, &beams, &link).unwrap());
        }
        assert!(at_truth < at_off);
    }

    #[test]
    fn paper_step_fixed_point_and_flat_model() {
        let (array, beams, link) = setup(8);
        let ue = Position::new(0.5, 2.0);
        let obs = noiseless(ue, &array, &beams, &link, -1e9);
        let model = RssModel::new(&obs, &array, &beams, &link).unwrap();
        let next = paper_newton_step(&model, ue).unwrap();
        assert!(next.distance_to(&ue) < 1e-12);

        let flat = Linear {
            a: vec![[0.0; 2]; 3],
            s: vec![1.0, -2.0, 0.5],
        };
        let p = Position::new(0.3, 0.4);
        assert_eq!(paper_newton_step(&flat, p).unwrap(), p);
    }

    #[test]
    fn paper_step_moves_uphill() {
        // A small fraction of the literal update increases the residual; the
        // same fraction with the opposite sign decreases it.
        let (array, beams, link) = setup(8);
        let ue = Position::new(0.9, 2.4);
        let obs = noiseless(ue, &array, &beams, &link, -1e9);
        let model = RssModel::new(&obs, &array, &beams, &link).unwrap();
        let start = Position::new(1.0, 2.5);
        let mut r = Vec::new();
        model.evaluate(start, &mut r, None).unwrap();
        let cost0 = squared_norm(&r);
        let literal = paper_newton_step(&model, start).unwrap();
        let (dx, dy) = (literal.x - start.x, literal.y - start.y);
        let alpha = 1e-4 / dx.hypot(dy);
        model
            .evaluate(Position::new(start.x + alpha * dx, start.y + alpha * dy), &mut r, None)
            .unwrap();
        assert!(squared_norm(&r) > cost0);
        model
            .evaluate(Position::new(start.x - alpha * dx, start.y - alpha * dy), &mut r, None)
            .unwrap();
        assert!(squared_norm(&r) < cost0);
    }

    #[test]
    fn undamped_linear_step_is_exact() {
        let model = Linear {
            a: vec![[1.0, 0.0], [0.0, 2.0], [1.0, 1.0], [3.0, -1.0]],
            s: vec![1.0, 2.0, 0.5, -1.0],
        };
        // Normal equations solved by hand: A^T A = [[11, -2], [-2, 6]], A^T s = [-1.5, 5.5].
        let det = 11.0 * 6.0 - 4.0;
        let want = Position::new((6.0 * -1.5 + 2.0 * 5.5) / det, (11.0 * 5.5 + 2.0 * -1.5) / det);
        let step = gauss_newton_step(&model, Position::new(0.0, 0.0), 0.0, None).unwrap();
        assert!(step.accepted);
        assert!(step.position.distance_to(&want) < 1e-12);
    }

    #[test]
    fn rejected_step_keeps_candidate_and_cost() {
        let (array, beams, link) = setup(16);
        let obs = noiseless(Position::new(1.0, 3.0), &array, &beams, &link, -80.0);
        let model = RssModel::new(&obs, &array, &beams, &link).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let region = room();
        for _ in 0..200 {
            let start = Position::new(rng.random_range(-4.0..4.0), rng.random_range(0.1..8.0));
            let mut r = Vec::new();
            model.evaluate(start, &mut r, None).unwrap();
            let cost0 = squared_norm(&r);
            let damping = rng.random_range(1e-4..10.0);
            let step = gauss_newton_step(&model, start, damping, Some(&region)).unwrap();
            if step.accepted {
                assert!(step.cost < cost0);
                assert!(step.damping < damping);
            } else {
                assert_eq!(step.position, start);
                assert_eq!(step.cost, cost0);
            }
        }
    }

    #[test]
    fn converges_from_nearby_start() {
        let (array, beams, link) = setup(16);
        let truth = Position::new(1.0, 3.0);
        let obs = noiseless(truth, &array, &beams, &link, -80.0);
        let model = RssModel::new(&obs, &array, &beams, &link).unwrap();
        let cfg = EstimatorConfig {
            step_tolerance: 1e-9,
            ..EstimatorConfig::default()
        };
        let run = run_gauss_newton(&model, Position::new(1.12, 3.16), &cfg, &room()).unwrap();
        assert!(run.converged);
        assert!(run.position.distance_to(&truth) < 1e-3, "{:?}", run.position);
    }

    #[test]
    fn noiseless_estimate_recovers_truth() {
        let (array, beams, link) = setup(32);
        let truth = Position::new(1.0, 3.0);
        let obs = noiseless(truth, &array, &beams, &link, -80.0);
        let res = estimate(&obs, &array, &beams, &link, &EstimatorConfig::default(), &room()).unwrap();
        assert!(res.estimate.distance_to(&truth) < 1e-3, "{res:?}");
        assert!(res.residual_norm < 1e-3);
    }

    #[test]
    fn broadside_estimate_stays_on_axis() {
        let (array, beams, link) = setup(16);
        let truth = Position::new(0.0, 2.5);
        let obs = noiseless(truth, &array, &beams, &link, -80.0);
        let cfg = EstimatorConfig {
            step_tolerance: 1e-10,
            ..EstimatorConfig::default()
        };
        let res = estimate(&obs, &array, &beams, &link, &cfg, &room()).unwrap();
        assert!(res.estimate.x.abs() < 1e-6, "{res:?}");
    }

    #[test]
    fn zero_detections_are_unlocalizable() {
        let (array, beams, link) = setup(8);
        let mut obs = noiseless(Position::new(1.0, 1.0), &array, &beams, &link, -80.0);
        obs.detected = vec![false; 8];
        let err = estimate(&obs, &array, &beams, &link, &EstimatorConfig::default(), &room()).unwrap_err();
        assert!(matches!(err, Error::Unlocalizable { detected: 0, .. }));
    }

    #[test]
    fn estimate_is_deterministic_and_clamped() {
        let (array, beams, link) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let obs = synthesize_observation(Position::new(3.5, 7.5), &array, &beams, &link, 3.0, -80.0, &mut rng).unwrap();
        let cfg = EstimatorConfig::default();
        let a = estimate(&obs, &array, &beams, &link, &cfg, &room());
        let b = estimate(&obs, &array, &beams, &link, &cfg, &room());
        assert_eq!(a, b);
        if let Ok(res) = a {
            assert!(room().contains(res.estimate));
        }
    }

    #[test]
    fn paper_method_runs_and_stays_in_region() {
        let (array, beams, link) = setup(8);
        let obs = noiseless(Position::new(1.0, 2.0), &array, &beams, &link, -80.0);
        let cfg = EstimatorConfig {
            method: Method::PaperNewton,
            max_iterations: 20,
            ..EstimatorConfig::default()
        };
        let res = estimate(&obs, &array, &beams, &link, &cfg, &room()).unwrap();
        assert!(room().contains(res.estimate));
        assert!(res.residual_norm.is_finite());
    }

    #[test]
    fn multistart_grid_layout() {
        let g = Region::new(-4.0, 4.0, 0.0, 8.0).unwrap().grid(5);
        assert_eq!(g.len(), 25);
        assert_eq!(g[0], Position::new(-3.2, 0.8));
        assert_eq!(g[4], Position::new(3.2, 0.8));
        assert!((g[12].x).abs() < 1e-15 && (g[12].y - 4.0).abs() < 1e-15);
    }

    #[test]
    fn config_invariants() {
        let ok = EstimatorConfig::default();
        assert!(ok.validate().is_ok());
        assert!(EstimatorConfig {
            max_iterations: 0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(EstimatorConfig {
            step_tolerance: 0.0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(EstimatorConfig {
            multistart_grid: 0,
            ..ok
        }
        .validate()
        .is_err());
        assert!(Region::new(1.0, 1.0, 0.0, 1.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn accepted_steps_never_increase_cost(
                tx in -3.5f64..3.5, ty in 0.5f64..7.5, sx in -4.0f64..4.0, sy in 0.1f64..8.0, seed in any::<u64>()
            ) {
                let (array, beams, link) = setup(8);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut obs = synthesize_observation(Position::new(tx, ty), &array, &beams, &link, 1.0, -80.0, &mut rng).unwrap();
                obs.detected = vec![true; 8];
                let model = RssModel::new(&obs, &array, &beams, &link).unwrap();
                let region = room();
                let mut x = Position::new(sx, sy);
                let mut damping = 1e-2;
                let mut r = Vec::new();
                model.evaluate(x, &mut r, None).unwrap();
                let mut cost = squared_norm(&r);
                for _ in 0..30 {
                    let step = gauss_newton_step(&model, x, damping, Some(&region)).unwrap();
                    prop_assert!(step.cost <= cost);
                    x = step.position;
                    cost = step.cost;
                    damping = step.damping;
                }
            }
        }
    }
}
