//! Direction finding and position fixing: directional sweep bookkeeping,
//! bearing estimation with sub-grid peak interpolation and ambiguity
//! screening, two-station ray intersection, and error statistics.

use thiserror::Error;

use crate::channel::{dbm_to_mw, mw_to_dbm, AntennaPattern};
use crate::sim::Position;

#[derive(Debug, Error, PartialEq)]
pub enum LocalizerError {
    #[error("sweep profile has no angles")]
    EmptyProfile,
    #[error("rays are {angle_deg:.2} degrees apart; intersection is ill-conditioned")]
    IllConditioned { angle_deg: f64 },
    #[error("percentile needs at least one value")]
    EmptyData,
    #[error("percentile {p} out of range")]
    PercentileRange { p: f64 },
}

/// A second peak this close to the primary marks the profile ambiguous.
pub const AMBIGUITY_MARGIN_DB: f64 = 3.0;
/// ... provided it sits at least this many beamwidths away from the primary.
pub const AMBIGUITY_SEPARATION_BEAMWIDTHS: f64 = 2.0;
/// Rays closer than this to parallel make a useless intersection.
pub const MIN_RAY_SEPARATION_DEG: f64 = 5.0;

/// One full-circle sweep plan.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub start_deg: f64,
    pub step_deg: f64,
    /// Samples to collect before moving to the next angle.
    pub samples_per_angle: usize,
    pub antenna: AntennaPattern,
    /// Receiver noise floor; also the detectability reference.
    pub noise_floor_dbm: f64,
}

impl Default for SweepConfig {
    fn default() -> SweepConfig {
        SweepConfig {
            start_deg: 0.0,
            step_deg: 5.0,
            samples_per_angle: 20,
            antenna: AntennaPattern::default(),
            noise_floor_dbm: -112.0,
        }
    }
}

impl SweepConfig {
    pub fn angle_count(&self) -> usize {
        (360.0 / self.step_deg).round() as usize
    }

    /// Unwrapped label, so profile angles stay strictly increasing; callers
    /// fold into [0, 360) only where a direction is reported.
    pub fn angle_deg(&self, idx: usize) -> f64 {
        self.start_deg + idx as f64 * self.step_deg
    }
}

/// Dwell-until-full sweep progress: the antenna parks on one angle until the
/// sample quota is met, then steps.
#[derive(Debug, Clone)]
pub struct SweepState {
    pub config: SweepConfig,
    current_idx: usize,
    /// Per-angle linear-power sample sums and counts.
    sums_mw: Vec<f64>,
    counts: Vec<usize>,
    done: bool,
}

impl SweepState {
    pub fn new(config: SweepConfig) -> SweepState {
        let n = config.angle_count();
        SweepState { config, current_idx: 0, sums_mw: vec![0.0; n], counts: vec![0; n], done: false }
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Angle the antenna currently points at; `None` once the sweep is done.
    pub fn current_angle_deg(&self) -> Option<f64> {
        (!self.done).then(|| self.config.angle_deg(self.current_idx))
    }

    /// Feeds one measured sample at the current angle. Returns `true` when
    /// this sample completed the sweep.
    pub fn record_sample(&mut self, measured_dbm: f64) -> bool {
        if self.done {
            return false;
        }
        self.sums_mw[self.current_idx] += dbm_to_mw(measured_dbm);
        self.counts[self.current_idx] += 1;
        if self.counts[self.current_idx] >= self.config.samples_per_angle {
            self.current_idx += 1;
            if self.current_idx >= self.config.angle_count() {
                self.done = true;
                return true;
            }
        }
        false
    }

    pub fn reset(&mut self) {
        let n = self.config.angle_count();
        self.current_idx = 0;
        self.sums_mw = vec![0.0; n];
        self.counts = vec![0; n];
        self.done = false;
    }

    /// Collapses the collected samples into a profile; `None` until done.
    pub fn profile(&self, sniffer: Position) -> Option<SweepProfile> {
        if !self.done {
            return None;
        }
        Some(self.build_profile(self.config.angle_count(), sniffer))
    }

    /// Profile from whatever angles have their full sample quota — used when
    /// a sweep is cut off by a deadline (e.g. the victim went quiet). May
    /// cover zero angles.
    pub fn partial_profile(&self, sniffer: Position) -> SweepProfile {
        let covered = (0..self.config.angle_count())
            .take_while(|&i| self.counts[i] >= self.config.samples_per_angle)
            .count();
        self.build_profile(covered, sniffer)
    }

    fn build_profile(&self, n: usize, sniffer: Position) -> SweepProfile {
        let floor_mw = dbm_to_mw(self.config.noise_floor_dbm);
        let mut angles = Vec::with_capacity(n);
        let mut measured = Vec::with_capacity(n);
        let mut snr = Vec::with_capacity(n);
        let mut detectable = Vec::with_capacity(n);
        for i in 0..n {
            let mean_mw = self.sums_mw[i] / self.counts[i] as f64;
            angles.push(self.config.angle_deg(i));
            measured.push(mw_to_dbm(mean_mw));
            snr.push(mw_to_dbm(mean_mw) - self.config.noise_floor_dbm);
            // the mean carries the noise floor; what is left after removing
            // it must itself clear the floor to count as signal
            let signal_mw = mean_mw - floor_mw;
            detectable.push(signal_mw > floor_mw);
        }
        SweepProfile {
            sniffer,
            angles_deg: angles,
            measured_dbm: measured,
            snr_db: snr,
            detectable,
            beamwidth_deg: self.config.antenna.beamwidth_3db_deg,
            noise_floor_dbm: self.config.noise_floor_dbm,
        }
    }
}

/// Mean measured power per sweep angle. Angles are strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepProfile {
    /// Where the sweep was taken from.
    pub sniffer: Position,
    pub angles_deg: Vec<f64>,
    pub measured_dbm: Vec<f64>,
    /// Per-angle margin of the mean over the noise floor.
    pub snr_db: Vec<f64>,
    /// Whether the angle's mean rises meaningfully above the noise floor.
    pub detectable: Vec<bool>,
    pub beamwidth_deg: f64,
    pub noise_floor_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BearingQuality {
    Ok,
    /// A second, well-separated peak rivals the primary.
    Ambiguous,
    /// No angle rose above the noise floor.
    Undetectable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BearingEstimate {
    /// Interpolated direction of arrival; `None` when undetectable.
    pub bearing_deg: Option<f64>,
    pub quality: BearingQuality,
    /// Peak-over-median contrast of the profile.
    pub snr_db: f64,
    pub peak_dbm: f64,
    /// Refined peak directions, strongest first; more than one when
    /// ambiguous.
    pub candidates: Vec<f64>,
}

fn circular_sep_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Quadratic sub-grid refinement around grid index `i` (circular).
fn refine_peak(profile: &SweepProfile, i: usize) -> f64 {
    let n = profile.angles_deg.len();
    let step = 360.0 / n as f64;
    let l = profile.measured_dbm[(i + n - 1) % n];
    let c = profile.measured_dbm[i];
    let r = profile.measured_dbm[(i + 1) % n];
    let denom = l - 2.0 * c + r;
    let offset = if denom.abs() < 1e-12 { 0.0 } else { 0.5 * (l - r) / denom };
    (profile.angles_deg[i] + offset.clamp(-0.5, 0.5) * step).rem_euclid(360.0)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Turns a sweep profile into a direction estimate.
///
/// The peak is refined below grid resolution with a quadratic fit over its
/// circular neighbors. The profile is ambiguous when another local peak sits
/// within [`AMBIGUITY_MARGIN_DB`] of the primary and at least
/// [`AMBIGUITY_SEPARATION_BEAMWIDTHS`] beamwidths away, and undetectable when
/// no angle clears the noise floor.
pub fn estimate_bearing(profile: &SweepProfile) -> Result<BearingEstimate, LocalizerError> {
    let n = profile.angles_deg.len();
    if n == 0 {
        return Err(LocalizerError::EmptyProfile);
    }
    let peak_idx = (0..n)
        .max_by(|&a, &b| profile.measured_dbm[a].total_cmp(&profile.measured_dbm[b]))
        .expect("nonempty");
    let peak_dbm = profile.measured_dbm[peak_idx];
    let snr_db = peak_dbm - median(&profile.measured_dbm);

    if !profile.detectable.iter().any(|&d| d) {
        return Ok(BearingEstimate {
            bearing_deg: None,
            quality: BearingQuality::Undetectable,
            snr_db,
            peak_dbm,
            candidates: Vec::new(),
        });
    }

    // local maxima over the circular profile, strongest first
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&i| {
            let l = profile.measured_dbm[(i + n - 1) % n];
            let r = profile.measured_dbm[(i + 1) % n];
            profile.measured_dbm[i] > l && profile.measured_dbm[i] > r
        })
        .collect();
    peaks.sort_by(|&a, &b| profile.measured_dbm[b].total_cmp(&profile.measured_dbm[a]));

    let primary = refine_peak(profile, peak_idx);
    let mut candidates = vec![primary];
    let min_sep = AMBIGUITY_SEPARATION_BEAMWIDTHS * profile.beamwidth_deg;
    for &i in &peaks {
        if i == peak_idx {
            continue;
        }
        let close_power = peak_dbm - profile.measured_dbm[i] <= AMBIGUITY_MARGIN_DB;
        let far_angle =
            circular_sep_deg(profile.angles_deg[i], profile.angles_deg[peak_idx]) >= min_sep;
        if close_power && far_angle {
            candidates.push(refine_peak(profile, i));
        }
    }
    let quality =
        if candidates.len() > 1 { BearingQuality::Ambiguous } else { BearingQuality::Ok };
    Ok(BearingEstimate { bearing_deg: Some(primary), quality, snr_db, peak_dbm, candidates })
}

/// A sensor position plus estimated direction of arrival.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Position,
    pub bearing_deg: f64,
}

impl Ray {
    fn direction(&self) -> (f64, f64) {
        let rad = self.bearing_deg.to_radians();
        (rad.cos(), rad.sin())
    }

    /// Point at parameter `t` (meters along the bearing).
    fn at(&self, t: f64) -> Position {
        let (dx, dy) = self.direction();
        Position::new(self.origin.x + t * dx, self.origin.y + t * dy)
    }
}

/// A position fix from two bearings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fix {
    pub position: Position,
    /// Half the closest approach between the two rays; zero when they truly
    /// cross.
    pub residual_m: f64,
}

/// Intersects two bearing rays, least-squares style: the fix is the midpoint
/// of the closest approach, with forward-only travel along each ray. Errors
/// when the bearings are within [`MIN_RAY_SEPARATION_DEG`] of parallel.
pub fn multiangulate(r1: &Ray, r2: &Ray) -> Result<Fix, LocalizerError> {
    let sep = circular_sep_deg(r1.bearing_deg, r2.bearing_deg);
    let line_sep = sep.min(180.0 - sep.min(180.0)).abs();
    if line_sep < MIN_RAY_SEPARATION_DEG {
        return Err(LocalizerError::IllConditioned { angle_deg: line_sep });
    }
    let (d1x, d1y) = r1.direction();
    let (d2x, d2y) = r2.direction();
    let (ox, oy) = (r2.origin.x - r1.origin.x, r2.origin.y - r1.origin.y);
    // solve t1*d1 - t2*d2 = o for the line intersection
    let det = d1x * (-d2y) - (-d2x) * d1y;
    let t1 = (ox * (-d2y) - (-d2x) * oy) / det;
    let t2 = (d1x * oy - ox * d1y) / det;
    // a crossing behind a sensor is unreachable along its ray: pin that ray
    // at its origin and project onto the other, keeping the closer pairing
    let (p1, p2) = if t1 >= 0.0 && t2 >= 0.0 {
        (r1.at(t1), r2.at(t2))
    } else {
        let t2_pin1 = (d2x * -ox + d2y * -oy).max(0.0);
        let a = (r1.origin, r2.at(t2_pin1));
        let t1_pin2 = (d1x * ox + d1y * oy).max(0.0);
        let b = (r1.at(t1_pin2), r2.origin);
        if a.0.distance_to(a.1) <= b.0.distance_to(b.1) {
            a
        } else {
            b
        }
    };
    let gap = p1.distance_to(p2);
    Ok(Fix {
        position: Position::new(0.5 * (p1.x + p2.x), 0.5 * (p1.y + p2.y)),
        residual_m: 0.5 * gap,
    })
}

pub fn localization_error_m(fix: &Fix, truth: &Position) -> f64 {
    fix.position.distance_to(*truth)
}

/// Nearest-rank percentile: the smallest value with at least `p` percent of
/// the data at or below it.
pub fn percentile_nearest_rank(values: &[f64], p: f64) -> Result<f64, LocalizerError> {
    if values.is_empty() {
        return Err(LocalizerError::EmptyData);
    }
    if !(0.0..=100.0).contains(&p) || !p.is_finite() {
        return Err(LocalizerError::PercentileRange { p });
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Ok(v[rank.clamp(1, n) - 1])
}
