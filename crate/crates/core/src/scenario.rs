//! Scenario files and the run driver. A scenario is a TOML document pinning
//! the world layout (cell, victim points, crowd, repeaters, probes, the
//! attacker) plus an attack schedule; the driver replays it per victim point,
//! walking acquisition → scheduling manipulation → boost → sweep in order and
//! reducing what the probes saw into per-point metrics and CSV artifacts.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::attacker::{
    disambiguate_repeater, Attacker, AttackerConfig, AttackPhase, BearingCandidate, SilentPattern,
    DISAMBIGUATION_THRESHOLD_DB,
};
use crate::calib;
use crate::codec::MAX_SR_RESOURCE;
use crate::channel::{AntennaPattern, Bearer, ChannelModel, RepeaterModel};
use crate::enb::{Enb, EnbConfig};
use crate::localizer::{
    estimate_bearing, multiangulate, BearingQuality, Ray, SweepConfig, SweepProfile,
};
use crate::sim::{EntityId, Position, RngStreams};
use crate::ue::{PowerControlParams, TrafficProfile, Ue};
use crate::world::{EventRow, SnifferMode, World};

pub const SCHEMA_VERSION: u32 = 1;

// Fixed id blocks per role, so config order never shifts identities.
const ENB_ID: EntityId = EntityId(0);
const VICTIM_ID: EntityId = EntityId(1);
const BG_BASE: u32 = 10;
const REPEATER_BASE: u32 = 5_000;
const SNIFFER_BASE: u32 = 6_000;
const ATTACKER_ID: EntityId = EntityId(9_000);

// ---------------------------------------------------------------------------
// Schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub sim: SimSection,
    #[serde(default)]
    pub channel: ChannelSection,
    pub enb: EnbSection,
    pub victim: VictimSection,
    #[serde(default)]
    pub background: Option<BackgroundSection>,
    #[serde(default, rename = "repeater")]
    pub repeaters: Vec<RepeaterSection>,
    #[serde(default, rename = "sniffer")]
    pub sniffers: Vec<SnifferSection>,
    #[serde(default)]
    pub attacker: Option<AttackerSection>,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub localize: LocalizeSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub duration_ms: u64,
    /// End the run as soon as the attacker has the victim's identity
    /// (acquisition-only scenarios have nothing further to measure).
    #[serde(default)]
    pub stop_when_acquired: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub pl0_db: f64,
    pub d0_m: f64,
    pub exponent: f64,
    pub shadowing_sigma_db: f64,
    /// Cell-side decode sensitivity; probes carry their own floors.
    pub noise_floor_dbm: f64,
    pub capture_margin_db: f64,
}

impl Default for ChannelSection {
    fn default() -> ChannelSection {
        let c = ChannelModel::default();
        ChannelSection {
            pl0_db: c.pl0_db,
            d0_m: c.d0_m,
            exponent: c.exponent,
            shadowing_sigma_db: c.shadowing_sigma_db,
            noise_floor_dbm: c.noise_floor_dbm,
            capture_margin_db: c.capture_margin_db,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnbSection {
    pub position: [f64; 2],
    #[serde(default = "d_ref_tx")]
    pub ref_tx_power_dbm: f64,
    #[serde(default = "d_target_rx")]
    pub target_rx_power_dbm: f64,
    #[serde(default = "d_hysteresis")]
    pub hysteresis_db: f64,
    #[serde(default = "d_true")]
    pub tpc_enabled: bool,
    #[serde(default = "d_timeout")]
    pub inactivity_timeout_ms: u64,
    #[serde(default = "d_quantum")]
    pub grant_quantum_bytes: u32,
    #[serde(default = "d_sr_grant")]
    pub sr_grant_bytes: u32,
    #[serde(default = "d_bytes_per_rb")]
    pub bytes_per_rb: u32,
    #[serde(default = "d_k_grant")]
    pub k_grant_ms: u64,
    #[serde(default = "d_sr_pool")]
    pub sr_resource_count: u16,
    #[serde(default = "d_sr_period")]
    pub sr_periodicity_ms: u16,
}

fn d_ref_tx() -> f64 {
    calib::MACRO_ENB_REF_TX_DBM
}
fn d_target_rx() -> f64 {
    -100.0
}
fn d_hysteresis() -> f64 {
    1.0
}
fn d_true() -> bool {
    true
}
fn d_timeout() -> u64 {
    15_000
}
fn d_quantum() -> u32 {
    100
}
fn d_sr_grant() -> u32 {
    10
}
fn d_bytes_per_rb() -> u32 {
    25
}
fn d_k_grant() -> u64 {
    4
}
fn d_sr_pool() -> u16 {
    2_048
}
fn d_sr_period() -> u16 {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSection {
    /// One sub-run per point; metrics are reported per point.
    pub points: Vec<[f64; 2]>,
    #[serde(default)]
    pub traffic: TrafficSection,
    #[serde(default)]
    pub power: PowerSection,
    /// When set, the network pings the victim at this time so it holds a
    /// connection before the attack begins.
    #[serde(default)]
    pub connect_at_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, tag = "profile", rename_all = "snake_case")]
pub enum TrafficSection {
    #[default]
    Idle,
    Poisson {
        rate_per_s: f64,
        message_bytes: u32,
    },
}

impl TrafficSection {
    fn to_profile(&self) -> TrafficProfile {
        match *self {
            TrafficSection::Idle => TrafficProfile::Idle,
            TrafficSection::Poisson { rate_per_s, message_bytes } => {
                TrafficProfile::Poisson { rate_per_s, message_bytes }
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerSection {
    pub p0_dbm: f64,
    pub alpha: f64,
}

impl Default for PowerSection {
    fn default() -> PowerSection {
        PowerSection { p0_dbm: calib::MACRO_P0_DBM, alpha: calib::MACRO_ALPHA }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSection {
    pub count: u32,
    pub area: AreaSection,
    #[serde(default)]
    pub traffic: TrafficSection,
    /// Poisson rate of server-side pings per terminal (downlink activity).
    #[serde(default)]
    pub dl_rate_per_s: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaSection {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepeaterSection {
    #[serde(default)]
    pub id: Option<String>,
    /// Service-antenna position: absolute, or relative to the victim point.
    #[serde(default)]
    pub internal: Option<[f64; 2]>,
    #[serde(default)]
    pub internal_offset_from_victim: Option<[f64; 2]>,
    /// Donor-antenna position (where the copy re-enters the air).
    pub external: [f64; 2],
    pub sensitivity_dbm: f64,
    pub output_power_dbm: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnifferSection {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub position: Option<[f64; 2]>,
    #[serde(default)]
    pub offset_from_victim: Option<[f64; 2]>,
    pub mode: SnifferModeSection,
    #[serde(default)]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnifferModeSection {
    Sweep,
    Monitor,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub start_deg: f64,
    pub step_deg: f64,
    pub samples_per_angle: usize,
    pub noise_floor_dbm: f64,
    pub antenna: AntennaSection,
}

impl Default for SweepSection {
    fn default() -> SweepSection {
        let c = SweepConfig::default();
        SweepSection {
            start_deg: c.start_deg,
            step_deg: c.step_deg,
            samples_per_angle: c.samples_per_angle,
            noise_floor_dbm: c.noise_floor_dbm,
            antenna: AntennaSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AntennaSection {
    pub boresight_gain_db: f64,
    pub beamwidth_3db_deg: f64,
    pub floor_db: f64,
}

impl Default for AntennaSection {
    fn default() -> AntennaSection {
        let a = AntennaPattern::default();
        AntennaSection {
            boresight_gain_db: a.boresight_gain_db,
            beamwidth_3db_deg: a.beamwidth_3db_deg,
            floor_db: a.floor_db,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerSection {
    #[serde(default)]
    pub position: Option<[f64; 2]>,
    #[serde(default)]
    pub offset_from_victim: Option<[f64; 2]>,
    #[serde(default)]
    pub attack_start_ms: u64,
    /// When false the victim identity is read off the cell state instead of
    /// being acquired over the air (unit-style scenarios).
    #[serde(default = "d_true")]
    pub acquisition: bool,
    #[serde(default = "d_max_rounds")]
    pub max_rounds: usize,
    #[serde(default = "d_dl_inject")]
    pub dl_injection_power_dbm: f64,
    #[serde(default = "d_ul_inject")]
    pub ul_injection_power_dbm: f64,
    #[serde(default = "d_step_period")]
    pub step_period_ms: u64,
    #[serde(default = "d_fake_bsr")]
    pub fake_bsr_bytes: u32,
    #[serde(default = "d_boost_subframe")]
    pub boost_subframe: u8,
    #[serde(default = "d_duty")]
    pub duty_fraction: f64,
    #[serde(default = "d_true")]
    pub sched_manip: bool,
    #[serde(default = "d_true")]
    pub power_boost: bool,
    /// When the boost arm switches on (given `power_boost`).
    #[serde(default)]
    pub boost_at: BoostAt,
    #[serde(default)]
    pub pattern: PatternSection,
}

fn d_max_rounds() -> usize {
    3
}
fn d_dl_inject() -> f64 {
    30.0
}
fn d_ul_inject() -> f64 {
    10.0
}
fn d_step_period() -> u64 {
    100
}
fn d_fake_bsr() -> u32 {
    200
}
fn d_boost_subframe() -> u8 {
    9
}
fn d_duty() -> f64 {
    0.10
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoostAt {
    /// As soon as the scheduling loop is live.
    #[default]
    OnAttack,
    /// Off for the first sweep, on for the second (repeater disambiguation).
    BetweenSweeps,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatternSection {
    pub count: usize,
    pub gap_ms: u64,
    pub tolerance_ms: u64,
    pub burst_merge_ms: u64,
}

impl Default for PatternSection {
    fn default() -> PatternSection {
        let p = SilentPattern::default();
        PatternSection {
            count: p.count,
            gap_ms: p.gap_ms,
            tolerance_ms: p.tolerance_ms,
            burst_merge_ms: p.burst_merge_ms,
        }
    }
}

impl PatternSection {
    fn to_pattern(&self) -> SilentPattern {
        SilentPattern {
            count: self.count,
            gap_ms: self.gap_ms,
            tolerance_ms: self.tolerance_ms,
            burst_merge_ms: self.burst_merge_ms,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// Scheduling-loop warmup before the first sweep starts.
    pub pre_sweep_settle_ms: u64,
    /// Power-boost ramp time between sweeps.
    pub boost_settle_ms: u64,
    /// A sweep still unfinished this long after starting is cut short.
    pub sweep_deadline_ms: u64,
    /// Acquisition still unresolved this long after the attack start fails
    /// the point.
    pub acquisition_deadline_ms: u64,
}

impl Default for ScheduleSection {
    fn default() -> ScheduleSection {
        ScheduleSection {
            pre_sweep_settle_ms: 1_000,
            boost_settle_ms: 1_000,
            sweep_deadline_ms: 60_000,
            acquisition_deadline_ms: 90_000,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeSection {
    /// Intersect bearings from the first two usable sweep probes.
    pub enabled: bool,
    /// Classify bearing peaks genuine-vs-repeater from the boost delta.
    pub disambiguate: bool,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Steady-state window start for averaged readings; defaults to the
    /// back half of the run.
    pub eval_from_ms: Option<u64>,
    /// Point index singled out in summaries (e.g. a reference measurement
    /// spot).
    pub highlight_point: Option<usize>,
}

// ---------------------------------------------------------------------------
// Errors and validation
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("scenario invalid:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("batch needs at least one seed")]
    EmptySeeds,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Scenario, ScenarioError> {
        let scn: Scenario = toml::from_str(text)?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn from_file(path: &Path) -> Result<Scenario, ScenarioError> {
        Scenario::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Structural checks beyond what deserialization enforces. Collects every
    /// problem instead of stopping at the first.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut bad: Vec<String> = Vec::new();

        if self.schema_version != SCHEMA_VERSION {
            bad.push(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.name.is_empty() {
            bad.push("name must be non-empty".into());
        }
        if self.sim.duration_ms == 0 {
            bad.push("sim.duration_ms must be positive".into());
        }
        if self.channel.d0_m <= 0.0 || self.channel.exponent <= 0.0 {
            bad.push("channel reference distance and exponent must be positive".into());
        }
        if self.channel.shadowing_sigma_db < 0.0 || self.channel.capture_margin_db < 0.0 {
            bad.push("channel sigma and capture margin must be non-negative".into());
        }
        if self.enb.bytes_per_rb == 0 || self.enb.sr_grant_bytes == 0 || self.enb.grant_quantum_bytes == 0
        {
            bad.push("enb grant sizing fields must be positive".into());
        }
        if self.enb.sr_resource_count == 0 || self.enb.sr_resource_count > MAX_SR_RESOURCE + 1 {
            bad.push(format!(
                "enb.sr_resource_count must be in 1..={}",
                MAX_SR_RESOURCE + 1
            ));
        }
        if self.enb.sr_periodicity_ms == 0 {
            bad.push("enb.sr_periodicity_ms must be positive".into());
        }
        if self.victim.points.is_empty() {
            bad.push("victim.points must list at least one position".into());
        }
        if !(0.0..=1.0).contains(&self.victim.power.alpha) {
            bad.push("victim.power.alpha must be within [0, 1]".into());
        }
        check_traffic("victim.traffic", &self.victim.traffic, &mut bad);

        if let Some(bg) = &self.background {
            if bg.count == 0 {
                bad.push("background.count must be positive".into());
            }
            let connections = u32::from(self.enb.sr_resource_count);
            if bg.count + 2 > connections {
                bad.push(format!(
                    "background.count {} exceeds the SR resource pool {}",
                    bg.count, self.enb.sr_resource_count
                ));
            }
            if bg.area.x_min >= bg.area.x_max || bg.area.y_min >= bg.area.y_max {
                bad.push("background.area must have x_min < x_max and y_min < y_max".into());
            }
            if bg.dl_rate_per_s < 0.0 {
                bad.push("background.dl_rate_per_s must be non-negative".into());
            }
            check_traffic("background.traffic", &bg.traffic, &mut bad);
        }

        let mut ids = BTreeSet::new();
        for (i, r) in self.repeaters.iter().enumerate() {
            if let Some(id) = &r.id {
                if !ids.insert(id.clone()) {
                    bad.push(format!("duplicate entity id {id:?}"));
                }
            }
            match (r.internal, r.internal_offset_from_victim) {
                (Some(_), Some(_)) | (None, None) => bad.push(format!(
                    "repeater {i}: exactly one of internal / internal_offset_from_victim"
                )),
                _ => {}
            }
        }
        let mut sweep_count = 0;
        for (i, s) in self.sniffers.iter().enumerate() {
            if let Some(id) = &s.id {
                if !ids.insert(id.clone()) {
                    bad.push(format!("duplicate entity id {id:?}"));
                }
            }
            match (s.position, s.offset_from_victim) {
                (Some(_), Some(_)) | (None, None) => bad.push(format!(
                    "sniffer {i}: exactly one of position / offset_from_victim"
                )),
                _ => {}
            }
            if s.mode == SnifferModeSection::Sweep {
                sweep_count += 1;
            }
            let sw = &s.sweep;
            if sw.step_deg <= 0.0 || sw.step_deg > 360.0 {
                bad.push(format!("sniffer {i}: sweep.step_deg must be in (0, 360]"));
            } else {
                let ratio = 360.0 / sw.step_deg;
                if (ratio - ratio.round()).abs() > 1e-9 {
                    bad.push(format!("sniffer {i}: sweep.step_deg must divide 360 evenly"));
                }
            }
            if sw.samples_per_angle == 0 {
                bad.push(format!("sniffer {i}: sweep.samples_per_angle must be positive"));
            }
            if sw.antenna.beamwidth_3db_deg <= 0.0 {
                bad.push(format!("sniffer {i}: antenna beamwidth must be positive"));
            }
        }

        if let Some(a) = &self.attacker {
            match (a.position, a.offset_from_victim) {
                (Some(_), Some(_)) | (None, None) => {
                    bad.push("attacker: exactly one of position / offset_from_victim".into())
                }
                _ => {}
            }
            if a.acquisition {
                if let Err(e) = a.pattern.to_pattern().validate() {
                    bad.push(format!("attacker.pattern: {e}"));
                }
            } else if self.victim.connect_at_ms.is_none() {
                bad.push(
                    "attacker.acquisition = false needs victim.connect_at_ms so an identity exists to assume"
                        .into(),
                );
            }
            if a.boost_subframe > 9 {
                bad.push("attacker.boost_subframe must be within a frame (0..=9)".into());
            }
            if !(0.0 < a.duty_fraction && a.duty_fraction <= 1.0) {
                bad.push("attacker.duty_fraction must be in (0, 1]".into());
            }
            if a.step_period_ms == 0 {
                bad.push("attacker.step_period_ms must be positive".into());
            }
            if a.attack_start_ms >= self.sim.duration_ms {
                bad.push("attacker.attack_start_ms must fall inside the run".into());
            }
        }

        if self.localize.enabled && sweep_count < 2 {
            bad.push("localize.enabled needs at least two sweep-mode sniffers".into());
        }
        if self.localize.disambiguate {
            if sweep_count < 1 {
                bad.push("localize.disambiguate needs a sweep-mode sniffer".into());
            }
            if self.repeaters.is_empty() {
                bad.push("localize.disambiguate without repeaters has nothing to classify".into());
            }
            match &self.attacker {
                Some(a) if a.power_boost && a.boost_at == BoostAt::BetweenSweeps => {}
                _ => bad.push(
                    "localize.disambiguate needs an attacker with power_boost and boost_at = \"between_sweeps\""
                        .into(),
                ),
            }
        }
        if let Some(hp) = self.metrics.highlight_point {
            if hp >= self.victim.points.len() {
                bad.push(format!("metrics.highlight_point {hp} out of range"));
            }
        }

        if bad.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(bad))
        }
    }

    fn channel_model(&self) -> ChannelModel {
        ChannelModel {
            pl0_db: self.channel.pl0_db,
            d0_m: self.channel.d0_m,
            exponent: self.channel.exponent,
            shadowing_sigma_db: self.channel.shadowing_sigma_db,
            noise_floor_dbm: self.channel.noise_floor_dbm,
            capture_margin_db: self.channel.capture_margin_db,
        }
    }

    fn enb_config(&self) -> EnbConfig {
        EnbConfig {
            ref_tx_power_dbm: self.enb.ref_tx_power_dbm,
            target_rx_power_dbm: self.enb.target_rx_power_dbm,
            hysteresis_db: self.enb.hysteresis_db,
            tpc_enabled: self.enb.tpc_enabled,
            inactivity_timeout_ms: self.enb.inactivity_timeout_ms,
            grant_quantum_bytes: self.enb.grant_quantum_bytes,
            sr_grant_bytes: self.enb.sr_grant_bytes,
            bytes_per_rb: self.enb.bytes_per_rb,
            k_grant_ms: self.enb.k_grant_ms,
            sr_resource_count: self.enb.sr_resource_count,
            sr_periodicity_ms: self.enb.sr_periodicity_ms,
        }
    }
}

fn check_traffic(field: &str, t: &TrafficSection, bad: &mut Vec<String>) {
    if let TrafficSection::Poisson { rate_per_s, message_bytes } = t {
        if *rate_per_s <= 0.0 {
            bad.push(format!("{field}: rate_per_s must be positive"));
        }
        if *message_bytes == 0 || *message_bytes > 150_000 {
            bad.push(format!("{field}: message_bytes must be in 1..=150000"));
        }
    }
}

fn pos(xy: [f64; 2]) -> Position {
    Position::new(xy[0], xy[1])
}

fn resolve(position: Option<[f64; 2]>, offset: Option<[f64; 2]>, victim: Position) -> Position {
    match (position, offset) {
        (Some(p), _) => pos(p),
        (None, Some(o)) => Position::new(victim.x + o[0], victim.y + o[1]),
        (None, None) => unreachable!("validated"),
    }
}

// ---------------------------------------------------------------------------
// Run driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub seed: u64,
    /// Disarm the power-boost arm regardless of the scenario.
    pub no_boost: bool,
    /// Disarm the scheduling-manipulation arm regardless of the scenario.
    pub no_sched_manip: bool,
}

impl Default for RunOptions {
    fn default() -> RunOptions {
        RunOptions { seed: 1, no_boost: false, no_sched_manip: false }
    }
}

/// One candidate direction with its level under both boost states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateReport {
    pub angle_deg: f64,
    pub unboosted_dbm: f64,
    pub boosted_dbm: f64,
    pub genuine: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorSummary {
    pub sniffer: String,
    pub samples: usize,
    /// Averages over the steady-state window, power-domain.
    pub mean_signal_dbm: f64,
    pub mean_measured_dbm: f64,
    pub noise_floor_dbm: f64,
    /// Mean tracked signal above the receiver floor.
    pub detectable: bool,
}

#[derive(Debug, Clone)]
pub struct SweepRecord {
    pub sniffer: String,
    /// 1-based sweep round (2 = after the boost switch in two-sweep flows).
    pub round: usize,
    pub profile: SweepProfile,
}

#[derive(Debug, Clone, Default)]
pub struct PointMetrics {
    /// True exactly when a localization fix with finite error was produced.
    pub success: bool,
    /// Per sweep sniffer, final round.
    pub bearings_deg: Vec<Option<f64>>,
    pub bearing_errors_deg: Vec<Option<f64>>,
    pub qualities: Vec<String>,
    pub fix: Option<Position>,
    pub fix_residual_m: Option<f64>,
    pub distance_error_m: Option<f64>,
    /// Strongest profile peak across sweep sniffers, final round.
    pub max_dbm: Option<f64>,
    pub snr_db: Option<f64>,
    pub acquired_rnti: Option<u16>,
    pub acquisition_ms: Option<u64>,
    /// Victim connection (re)assignments observed.
    pub rnti_changes: usize,
    /// First identity release, if any.
    pub victim_expiry_ms: Option<u64>,
    pub anomaly_flagged: bool,
    /// Mean victim transmit power over the steady-state window.
    pub converged_tx_dbm: Option<f64>,
    pub rsrp_dbm: Option<f64>,
    pub candidates: Vec<CandidateReport>,
    /// Bearing of the first genuine candidate after disambiguation.
    pub genuine_bearing_deg: Option<f64>,
    pub failure: Option<String>,
    /// (phase name, start ms); consecutive gaps partition the run.
    pub phase_marks: Vec<(String, u64)>,
    pub run_len_ms: u64,
}

#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub point_index: usize,
    pub victim_position: Position,
    pub metrics: PointMetrics,
    pub events: Vec<EventRow>,
    pub sweeps: Vec<SweepRecord>,
    pub monitors: Vec<MonitorSummary>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: String,
    pub seed: u64,
    pub points: Vec<PointOutcome>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Flow {
    /// Waiting for the attack start (or no attacker at all).
    Idle,
    Acquiring,
    Settling { until: u64 },
    Sweeping { round: usize, started: u64 },
    BoostSettling { until: u64 },
    /// Nothing left to drive; run to the configured duration.
    RunOut,
    Done,
}

pub fn run_scenario(scn: &Scenario, opts: &RunOptions) -> Result<RunResult, ScenarioError> {
    scn.validate()?;
    let points: Vec<PointOutcome> = (0..scn.victim.points.len())
        .into_par_iter()
        .map(|i| run_point(scn, opts, i))
        .collect();
    Ok(RunResult { scenario: scn.name.clone(), seed: opts.seed, points })
}

fn run_point(scn: &Scenario, opts: &RunOptions, point_index: usize) -> PointOutcome {
    let streams = RngStreams::new(opts.seed);
    let pl = format!("p{point_index}");
    let victim_pos = pos(scn.victim.points[point_index]);
    let duration = scn.sim.duration_ms;

    let enb = Enb::new(
        scn.enb_config(),
        ENB_ID,
        pos(scn.enb.position),
        streams.stream(&format!("{pl}-rnti")),
    );
    let params = PowerControlParams { p0_dbm: scn.victim.power.p0_dbm, alpha: scn.victim.power.alpha };
    let mut victim = Ue::new(
        VICTIM_ID,
        victim_pos,
        params,
        scn.victim.traffic.to_profile(),
        scn.enb.ref_tx_power_dbm,
        scn.enb.bytes_per_rb,
        scn.enb.k_grant_ms,
    );
    victim.start_traffic(streams.stream(&format!("{pl}-victim-traffic")), 0);

    let mut world = World::new(
        scn.channel_model(),
        streams.stream(&format!("{pl}-shadow")),
        enb,
        victim,
    );

    if let Some(bg) = &scn.background {
        let mut place = streams.stream(&format!("{pl}-bg-place"));
        for j in 0..bg.count {
            let p = Position::new(
                place.gen_range(bg.area.x_min..bg.area.x_max),
                place.gen_range(bg.area.y_min..bg.area.y_max),
            );
            let mut ue = Ue::new(
                EntityId(BG_BASE + j),
                p,
                PowerControlParams::default(),
                bg.traffic.to_profile(),
                scn.enb.ref_tx_power_dbm,
                scn.enb.bytes_per_rb,
                scn.enb.k_grant_ms,
            );
            ue.start_traffic(streams.stream(&format!("{pl}-bg{j}-traffic")), 0);
            world.add_background_ue(ue);
            if bg.dl_rate_per_s > 0.0 {
                world.add_downlink_traffic(
                    EntityId(BG_BASE + j),
                    bg.dl_rate_per_s,
                    streams.stream(&format!("{pl}-bg{j}-dl")),
                );
            }
        }
    }

    for (i, r) in scn.repeaters.iter().enumerate() {
        let internal = resolve(r.internal, r.internal_offset_from_victim, victim_pos);
        world.add_repeater(RepeaterModel {
            id: EntityId(REPEATER_BASE + i as u32),
            internal_position: internal,
            external_position: pos(r.external),
            sensitivity_dbm: r.sensitivity_dbm,
            output_power_dbm: r.output_power_dbm,
        });
    }

    let mut sweep_idx: Vec<usize> = Vec::new();
    for (i, s) in scn.sniffers.iter().enumerate() {
        let config = SweepConfig {
            start_deg: s.sweep.start_deg,
            step_deg: s.sweep.step_deg,
            samples_per_angle: s.sweep.samples_per_angle,
            antenna: AntennaPattern {
                boresight_gain_db: s.sweep.antenna.boresight_gain_db,
                beamwidth_3db_deg: s.sweep.antenna.beamwidth_3db_deg,
                floor_db: s.sweep.antenna.floor_db,
            },
            noise_floor_dbm: s.sweep.noise_floor_dbm,
        };
        let mode = match s.mode {
            SnifferModeSection::Sweep => SnifferMode::Sweep,
            SnifferModeSection::Monitor => SnifferMode::Monitor,
        };
        let idx = world.add_sniffer(
            EntityId(SNIFFER_BASE + i as u32),
            resolve(s.position, s.offset_from_victim, victim_pos),
            mode,
            config,
            streams.stream(&format!("{pl}-sniffer{i}-noise")),
        );
        if s.mode == SnifferModeSection::Sweep {
            sweep_idx.push(idx);
        }
    }

    let boost_wanted = scn
        .attacker
        .as_ref()
        .map(|a| a.power_boost && !opts.no_boost)
        .unwrap_or(false);
    if let Some(a) = &scn.attacker {
        let config = AttackerConfig {
            pattern: a.pattern.to_pattern(),
            max_rounds: a.max_rounds,
            dl_injection_power_dbm: a.dl_injection_power_dbm,
            ul_injection_power_dbm: a.ul_injection_power_dbm,
            step_period_ms: a.step_period_ms,
            fake_bsr_bytes: a.fake_bsr_bytes,
            boost_subframe: a.boost_subframe,
            duty_fraction: a.duty_fraction,
            sched_manip: a.sched_manip && !opts.no_sched_manip,
            // armed by the flow once the scheduling loop is live
            power_boost: false,
        };
        world.set_attacker(Attacker::new(
            config,
            ATTACKER_ID,
            resolve(a.position, a.offset_from_victim, victim_pos),
        ));
    }

    if let Some(at) = scn.victim.connect_at_ms {
        world.enb.queue_downlink(VICTIM_ID, Bearer::Drb1, at.max(1));
    }

    let mut flow = Flow::Idle;
    let mut marks: Vec<(String, u64)> = vec![("start".into(), 0)];
    let mut failure: Option<String> = None;
    let attack = scn.attacker.as_ref();

    while world.now_ms < duration {
        let t = world.now_ms;
        match flow {
            Flow::Idle => match attack {
                None => flow = Flow::RunOut,
                Some(a) if t >= a.attack_start_ms => {
                    if a.acquisition {
                        world.attacker.as_mut().expect("attacker built").begin_acquisition(t);
                        marks.push(("acquisition".into(), t));
                        flow = Flow::Acquiring;
                    } else if let Some(rnti) = world.enb.rnti_of(VICTIM_ID) {
                        let sr = world.enb.record(rnti).expect("record exists").sr_config;
                        world.attacker.as_mut().expect("attacker built").assume_victim(rnti, sr);
                        flow = enter_manip(
                            &mut world,
                            &mut marks,
                            t,
                            boost_wanted,
                            a,
                            &sweep_idx,
                            scn.schedule.pre_sweep_settle_ms,
                        );
                    } else if t > a.attack_start_ms + 5_000 {
                        failure = Some("victim never connected; no identity to assume".into());
                        break;
                    }
                }
                Some(_) => {}
            },
            Flow::Acquiring => {
                let a = attack.expect("acquiring implies attacker");
                let phase = world.attacker.as_ref().expect("attacker built").phase;
                match phase {
                    AttackPhase::Manipulating => {
                        flow = enter_manip(
                            &mut world,
                            &mut marks,
                            t,
                            boost_wanted,
                            a,
                            &sweep_idx,
                            scn.schedule.pre_sweep_settle_ms,
                        );
                    }
                    AttackPhase::Idle => {
                        failure = Some("acquisition exhausted its rounds".into());
                        break;
                    }
                    AttackPhase::Acquiring => {
                        if t >= a.attack_start_ms + scn.schedule.acquisition_deadline_ms {
                            failure = Some("acquisition deadline passed".into());
                            break;
                        }
                    }
                }
            }
            Flow::Settling { until } => {
                if t >= until {
                    for &i in &sweep_idx {
                        world.start_sweep(i);
                    }
                    marks.push(("sweep1".into(), t));
                    flow = Flow::Sweeping { round: 1, started: t };
                }
            }
            Flow::Sweeping { round, started } => {
                let all_done = sweep_idx.iter().all(|&i| world.sweep_done(i));
                let expired = t >= started + scn.schedule.sweep_deadline_ms;
                if all_done || expired {
                    if expired {
                        for &i in &sweep_idx {
                            if !world.sweep_done(i) {
                                world.abort_sweep(i);
                            }
                        }
                    }
                    let second_sweep = attack
                        .map(|a| a.boost_at == BoostAt::BetweenSweeps && boost_wanted)
                        .unwrap_or(false);
                    if round == 1 && second_sweep {
                        world.attacker.as_mut().expect("attacker built").config.power_boost = true;
                        marks.push(("boost_settle".into(), t));
                        flow = Flow::BoostSettling { until: t + scn.schedule.boost_settle_ms };
                    } else {
                        flow = Flow::Done;
                    }
                }
            }
            Flow::BoostSettling { until } => {
                if t >= until {
                    for &i in &sweep_idx {
                        world.start_sweep(i);
                    }
                    marks.push(("sweep2".into(), t));
                    flow = Flow::Sweeping { round: 2, started: t };
                }
            }
            Flow::RunOut => {
                if scn.sim.stop_when_acquired
                    && world.attacker.as_ref().is_some_and(|a| a.victim_rnti.is_some())
                {
                    flow = Flow::Done;
                }
            }
            Flow::Done => break,
        }
        if flow == Flow::Done {
            break;
        }
        world.advance();
    }
    if let Some(f) = &failure {
        marks.push((format!("failed: {f}"), world.now_ms));
    }
    marks.push(("end".into(), world.now_ms));

    finish_point(scn, point_index, victim_pos, world, marks, failure)
}

/// Flips the flow into the live-scheduling stage: arms the boost when it is
/// due now, then either settles into sweeps or just runs out the clock.
fn enter_manip(
    world: &mut World,
    marks: &mut Vec<(String, u64)>,
    t: u64,
    boost_wanted: bool,
    a: &AttackerSection,
    sweep_idx: &[usize],
    settle_ms: u64,
) -> Flow {
    marks.push(("manipulation".into(), t));
    if boost_wanted && a.boost_at == BoostAt::OnAttack {
        world.attacker.as_mut().expect("attacker built").config.power_boost = true;
    }
    if sweep_idx.is_empty() {
        Flow::RunOut
    } else {
        Flow::Settling { until: t + settle_ms }
    }
}

fn finish_point(
    scn: &Scenario,
    point_index: usize,
    victim_pos: Position,
    world: World,
    marks: Vec<(String, u64)>,
    failure: Option<String>,
) -> PointOutcome {
    let end_ms = world.now_ms;
    let eval_from = scn.metrics.eval_from_ms.unwrap_or(end_ms / 2);

    let mut m = PointMetrics {
        failure,
        phase_marks: marks,
        run_len_ms: end_ms,
        ..PointMetrics::default()
    };

    if let Some(att) = &world.attacker {
        m.acquired_rnti = att.victim_rnti;
        m.acquisition_ms = att.acquired_at_ms;
    }
    m.rnti_changes = world
        .victim_rnti_history
        .iter()
        .filter(|(_, r)| r.is_some())
        .count();
    m.victim_expiry_ms = world
        .victim_rnti_history
        .iter()
        .find(|(_, r)| r.is_none())
        .map(|&(t, _)| t);
    m.anomaly_flagged = world.events.iter().any(|e| e.event == "anomaly");
    m.rsrp_dbm = world.victim.rsrp_dbm;

    let late_tx: Vec<f64> = world
        .victim_tx_log
        .iter()
        .filter(|&&(t, _)| t >= eval_from)
        .map(|&(_, p)| p)
        .collect();
    if !late_tx.is_empty() {
        m.converged_tx_dbm = Some(mean_db(&late_tx));
    }

    // probe reductions
    let mut sweeps = Vec::new();
    let mut monitors = Vec::new();
    let mut final_profiles: Vec<(Position, SweepProfile)> = Vec::new();
    for s in &world.sniffers {
        let label = s.label.to_string();
        match s.mode {
            SnifferMode::Sweep => {
                for (round, (_, profile)) in s.profiles.iter().enumerate() {
                    sweeps.push(SweepRecord {
                        sniffer: label.clone(),
                        round: round + 1,
                        profile: profile.clone(),
                    });
                }
                if let Some((_, last)) = s.profiles.last() {
                    final_profiles.push((s.position, last.clone()));
                }
            }
            SnifferMode::Monitor => {
                let window: Vec<_> =
                    s.monitor.iter().filter(|smp| smp.time_ms >= eval_from).collect();
                if window.is_empty() {
                    continue;
                }
                let signal =
                    mean_db(&window.iter().map(|smp| smp.signal_dbm).collect::<Vec<_>>());
                let measured =
                    mean_db(&window.iter().map(|smp| smp.measured_dbm).collect::<Vec<_>>());
                let floor = s.sweep.config.noise_floor_dbm;
                monitors.push(MonitorSummary {
                    sniffer: label.clone(),
                    samples: window.len(),
                    mean_signal_dbm: signal,
                    mean_measured_dbm: measured,
                    noise_floor_dbm: floor,
                    detectable: signal > floor,
                });
            }
        }
    }

    // bearings from the final round of each sweep probe
    let mut rays: Vec<Ray> = Vec::new();
    for (origin, profile) in &final_profiles {
        match estimate_bearing(profile) {
            Ok(est) => {
                let truth = origin.bearing_deg_to(victim_pos);
                m.bearings_deg.push(est.bearing_deg);
                m.bearing_errors_deg
                    .push(est.bearing_deg.map(|b| circular_sep(b, truth)));
                m.qualities.push(format!("{:?}", est.quality).to_lowercase());
                if est.snr_db > m.snr_db.unwrap_or(f64::NEG_INFINITY) {
                    m.snr_db = Some(est.snr_db);
                }
                if est.peak_dbm > m.max_dbm.unwrap_or(f64::NEG_INFINITY) {
                    m.max_dbm = Some(est.peak_dbm);
                }
                if est.quality != BearingQuality::Undetectable {
                    if let Some(b) = est.bearing_deg {
                        rays.push(Ray { origin: *origin, bearing_deg: b });
                    }
                }
            }
            Err(_) => {
                m.bearings_deg.push(None);
                m.bearing_errors_deg.push(None);
                m.qualities.push("empty".into());
            }
        }
    }

    if scn.localize.enabled && rays.len() >= 2 {
        if let Ok(fix) = multiangulate(&rays[0], &rays[1]) {
            m.fix = Some(fix.position);
            m.fix_residual_m = Some(fix.residual_m);
            m.distance_error_m = Some(fix.position.distance_to(victim_pos));
        }
    }

    if scn.localize.disambiguate {
        disambiguate_point(&world, &mut m, victim_pos);
    }

    m.success = m.distance_error_m.map(f64::is_finite).unwrap_or(false);

    PointOutcome {
        point_index,
        victim_position: victim_pos,
        metrics: m,
        events: world.events,
        sweeps,
        monitors,
    }
}

/// Reduces a two-sweep run on the first sweep probe into boost-delta
/// candidates and classifies them.
fn disambiguate_point(world: &World, m: &mut PointMetrics, victim_pos: Position) {
    let Some(s) = world
        .sniffers
        .iter()
        .find(|s| matches!(s.mode, SnifferMode::Sweep))
    else {
        return;
    };
    if s.profiles.len() < 2 {
        return;
    }
    let (_, before) = &s.profiles[s.profiles.len() - 2];
    let (_, after) = &s.profiles[s.profiles.len() - 1];
    let Ok(est) = estimate_bearing(before) else { return };
    if est.candidates.is_empty() {
        return;
    }
    let candidates: Vec<BearingCandidate> = est
        .candidates
        .iter()
        .map(|&angle| {
            let i = nearest_angle_index(before, angle);
            let j = nearest_angle_index(after, angle);
            BearingCandidate {
                angle_deg: angle,
                unboosted_dbm: before.measured_dbm[i],
                boosted_dbm: after.measured_dbm[j],
            }
        })
        .collect();
    let verdict = disambiguate_repeater(&candidates, DISAMBIGUATION_THRESHOLD_DB);
    for (i, c) in candidates.iter().enumerate() {
        m.candidates.push(CandidateReport {
            angle_deg: c.angle_deg,
            unboosted_dbm: c.unboosted_dbm,
            boosted_dbm: c.boosted_dbm,
            genuine: verdict.genuine.contains(&i),
        });
    }
    if let Some(&g) = verdict.genuine.first() {
        let bearing = candidates[g].angle_deg;
        m.genuine_bearing_deg = Some(bearing);
        let truth = s.position.bearing_deg_to(victim_pos);
        // the resolved direction supersedes the raw (ambiguous) estimate
        if let Some(first_err) = m.bearing_errors_deg.first_mut() {
            *first_err = Some(circular_sep(bearing, truth));
        }
        if let Some(first_bearing) = m.bearings_deg.first_mut() {
            *first_bearing = Some(bearing);
        }
    }
}

fn nearest_angle_index(profile: &SweepProfile, angle_deg: f64) -> usize {
    (0..profile.angles_deg.len())
        .min_by(|&a, &b| {
            circular_sep(profile.angles_deg[a], angle_deg)
                .total_cmp(&circular_sep(profile.angles_deg[b], angle_deg))
        })
        .expect("profiles are non-empty")
}

fn circular_sep(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Power-domain mean of dB readings.
fn mean_db(values: &[f64]) -> f64 {
    let mw: f64 = values.iter().map(|&v| 10f64.powf(v / 10.0)).sum();
    10.0 * (mw / values.len() as f64).log10()
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

fn csv_safe(s: &str) -> String {
    s.replace(',', ";")
}

pub fn events_csv(events: &[EventRow]) -> String {
    let mut out = String::from("time_ms,entity,event,rnti,value_db,extra\n");
    for e in events {
        let rnti = e.rnti.map(|r| format!("0x{r:04x}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            e.time_ms,
            e.entity,
            e.event,
            rnti,
            fmt_opt(e.value_db),
            csv_safe(&e.extra)
        );
    }
    out
}

pub fn sweeps_csv(sweeps: &[SweepRecord]) -> String {
    let mut out = String::from("sniffer,angle_deg,power_dbm\n");
    for rec in sweeps {
        for (a, p) in rec.profile.angles_deg.iter().zip(&rec.profile.measured_dbm) {
            let _ = writeln!(out, "{}-sweep{},{a:.4},{p:.4}", rec.sniffer, rec.round);
        }
    }
    out
}

pub fn metrics_csv(result: &RunResult) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for p in &result.points {
        let _ = writeln!(out, "{}", metrics_row(&result.scenario, result.seed, p));
    }
    out
}

pub const METRICS_HEADER: &str =
    "scenario,seed,point,success,bearing_err_deg_1,bearing_err_deg_2,dist_err_m,max_dbm,snr_db";

fn metrics_row(scenario: &str, seed: u64, p: &PointOutcome) -> String {
    let m = &p.metrics;
    let b1 = m.bearing_errors_deg.first().copied().flatten();
    let b2 = m.bearing_errors_deg.get(1).copied().flatten();
    format!(
        "{},{},{},{},{},{},{},{},{}",
        scenario,
        seed,
        p.point_index,
        m.success,
        fmt_opt(b1),
        fmt_opt(b2),
        fmt_opt(m.distance_error_m),
        fmt_opt(m.max_dbm),
        fmt_opt(m.snr_db),
    )
}

/// Writes `metrics.csv` plus per-point `point<N>/{events,sweeps}.csv` under
/// `dir`. Byte-deterministic for a given result.
pub fn write_outputs(result: &RunResult, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(result))?;
    for p in &result.points {
        let pdir = dir.join(format!("point{}", p.point_index));
        fs::create_dir_all(&pdir)?;
        fs::write(pdir.join("events.csv"), events_csv(&p.events))?;
        fs::write(pdir.join("sweeps.csv"), sweeps_csv(&p.sweeps))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batch runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BatchRow {
    pub seed: u64,
    pub point: usize,
    pub success: bool,
    pub bearing_err_deg_1: Option<f64>,
    pub bearing_err_deg_2: Option<f64>,
    pub dist_err_m: Option<f64>,
    pub max_dbm: Option<f64>,
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchAggregate {
    pub runs: usize,
    pub success_rate: f64,
    /// 70th percentile over finite values; None when none were finite.
    pub p70_bearing_err_deg: Option<f64>,
    pub p70_dist_err_m: Option<f64>,
    pub max_dbm: Option<f64>,
    pub p70_snr_db: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchResult {
    pub scenario: String,
    pub rows: Vec<BatchRow>,
    pub aggregate: BatchAggregate,
}

pub fn run_batch(
    scn: &Scenario,
    seeds: &[u64],
    base: &RunOptions,
) -> Result<BatchResult, ScenarioError> {
    if seeds.is_empty() {
        return Err(ScenarioError::EmptySeeds);
    }
    scn.validate()?;
    let runs: Vec<RunResult> = seeds
        .par_iter()
        .map(|&seed| {
            let opts = RunOptions { seed, ..*base };
            run_scenario(scn, &opts).expect("validated above")
        })
        .collect();
    let mut rows: Vec<BatchRow> = runs
        .iter()
        .flat_map(|r| {
            r.points.iter().map(move |p| BatchRow {
                seed: r.seed,
                point: p.point_index,
                success: p.metrics.success,
                bearing_err_deg_1: p.metrics.bearing_errors_deg.first().copied().flatten(),
                bearing_err_deg_2: p.metrics.bearing_errors_deg.get(1).copied().flatten(),
                dist_err_m: p.metrics.distance_error_m,
                max_dbm: p.metrics.max_dbm,
                snr_db: p.metrics.snr_db,
            })
        })
        .collect();
    // aggregation must not depend on seed order
    rows.sort_by_key(|r| (r.seed, r.point));
    let aggregate = aggregate_rows(&rows);
    Ok(BatchResult { scenario: scn.name.clone(), rows, aggregate })
}

fn aggregate_rows(rows: &[BatchRow]) -> BatchAggregate {
    let succ = rows.iter().filter(|r| r.success).count();
    let bearings: Vec<f64> = rows
        .iter()
        .flat_map(|r| [r.bearing_err_deg_1, r.bearing_err_deg_2])
        .flatten()
        .filter(|v| v.is_finite())
        .collect();
    let dists: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.dist_err_m)
        .filter(|v| v.is_finite())
        .collect();
    let snrs: Vec<f64> = rows
        .iter()
        .filter_map(|r| r.snr_db)
        .filter(|v| v.is_finite())
        .collect();
    let maxes = rows.iter().filter_map(|r| r.max_dbm);
    BatchAggregate {
        runs: rows.len(),
        success_rate: succ as f64 / rows.len() as f64,
        p70_bearing_err_deg: p70(&bearings),
        p70_dist_err_m: p70(&dists),
        max_dbm: maxes.fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v)))),
        p70_snr_db: p70(&snrs),
    }
}

fn p70(values: &[f64]) -> Option<f64> {
    crate::localizer::percentile_nearest_rank(values, 70.0).ok()
}

pub fn batch_csv(batch: &BatchResult) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in &batch.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            batch.scenario,
            r.seed,
            r.point,
            r.success,
            fmt_opt(r.bearing_err_deg_1),
            fmt_opt(r.bearing_err_deg_2),
            fmt_opt(r.dist_err_m),
            fmt_opt(r.max_dbm),
            fmt_opt(r.snr_db),
        );
    }
    let a = &batch.aggregate;
    // the aggregate pools bearings from every probe, so the second
    // per-probe column stays empty
    let _ = writeln!(
        out,
        "{},all,p70,{:.4},{},,{},{},{}",
        batch.scenario,
        a.success_rate,
        fmt_opt(a.p70_bearing_err_deg),
        fmt_opt(a.p70_dist_err_m),
        fmt_opt(a.max_dbm),
        fmt_opt(a.p70_snr_db),
    );
    out
}
