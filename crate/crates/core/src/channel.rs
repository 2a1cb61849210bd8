//! Radio propagation: log-distance path loss with log-normal shadowing,
//! capture-effect resolution between co-channel transmissions, directional
//! antenna patterns, and constant-output amplify-and-forward repeaters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib;
use crate::codec::{Dci0, MacPdu, SchedulingRequest, SchedulingRequestConfig};
use crate::sim::{gaussian, EntityId, Position, SimTime};

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("degenerate geometry: distance {0} m is not positive")]
    DegenerateDistance(f64),
    #[error("UE transmission at {0} dBm exceeds the 23 dBm power class")]
    UePowerClass(f64),
    #[error("{link:?} transmission on {channel:?}")]
    LinkChannelMismatch { link: LinkDirection, channel: PhyChannel },
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Sum of powers given in dBm, in dBm.
pub fn power_sum_dbm(levels: &[f64]) -> f64 {
    mw_to_dbm(levels.iter().map(|&l| dbm_to_mw(l)).sum())
}

// ---------------------------------------------------------------------------
// Propagation model
// ---------------------------------------------------------------------------

/// Log-distance propagation with optional log-normal shadowing.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    /// Path loss at the reference distance, dB.
    pub pl0_db: f64,
    /// Reference distance, m.
    pub d0_m: f64,
    /// Path-loss exponent.
    pub exponent: f64,
    /// Standard deviation of the shadowing term, dB. Zero disables it.
    pub shadowing_sigma_db: f64,
    /// Receiver noise floor, dBm; arrivals below it are undetectable.
    pub noise_floor_dbm: f64,
    /// How much louder an overshadowing transmission must arrive to win
    /// capture, dB.
    pub capture_margin_db: f64,
}

impl Default for ChannelModel {
    /// Macro-cell defaults calibrated against the reference power table.
    fn default() -> ChannelModel {
        ChannelModel {
            pl0_db: calib::MACRO_PL0_DB,
            d0_m: 1.0,
            exponent: calib::MACRO_PATH_LOSS_EXPONENT,
            shadowing_sigma_db: 2.0,
            noise_floor_dbm: -112.0,
            capture_margin_db: 3.0,
        }
    }
}

impl ChannelModel {
    /// Deterministic path loss at distance `d` meters.
    pub fn path_loss(&self, d: f64) -> Result<f64, ChannelError> {
        if !(d > 0.0) {
            return Err(ChannelError::DegenerateDistance(d));
        }
        Ok(self.pl0_db + 10.0 * self.exponent * (d / self.d0_m).log10())
    }

    /// Received power without the shadowing draw.
    pub fn received_power_det(
        &self,
        tx_power_dbm: f64,
        tx_pos: Position,
        rx_pos: Position,
        rx_gain_db: f64,
    ) -> Result<f64, ChannelError> {
        let pl = self.path_loss(tx_pos.distance_to(rx_pos))?;
        Ok(tx_power_dbm - pl + rx_gain_db)
    }

    /// Received power including a fresh shadowing draw from `rng`.
    pub fn received_power<R: Rng + ?Sized>(
        &self,
        tx: &Transmission,
        rx_pos: Position,
        rx_gain_db: f64,
        rng: &mut R,
    ) -> Result<f64, ChannelError> {
        let det = self.received_power_det(tx.tx_power_dbm, tx.position, rx_pos, rx_gain_db)?;
        let shadow = if self.shadowing_sigma_db > 0.0 {
            gaussian(rng, 0.0, self.shadowing_sigma_db)
        } else {
            0.0
        };
        Ok(det + shadow)
    }

    pub fn detectable(&self, rx_dbm: f64) -> bool {
        rx_dbm >= self.noise_floor_dbm
    }
}

/// Quasi-static shadowing: one draw per directed (transmitter, receiver) link,
/// reused for the rest of the run. Shadowing is spatial, so repeated
/// transmissions over an unchanged link see the same offset — which is what
/// makes boost-on/boost-off power deltas meaningful.
#[derive(Debug)]
pub struct LinkShadowing {
    sigma_db: f64,
    rng: ChaCha8Rng,
    draws: BTreeMap<(EntityId, EntityId), f64>,
}

impl LinkShadowing {
    pub fn new(sigma_db: f64, rng: ChaCha8Rng) -> LinkShadowing {
        LinkShadowing { sigma_db, rng, draws: BTreeMap::new() }
    }

    pub fn shadow_db(&mut self, tx: EntityId, rx: EntityId) -> f64 {
        if self.sigma_db <= 0.0 {
            return 0.0;
        }
        let sigma = self.sigma_db;
        let rng = &mut self.rng;
        *self
            .draws
            .entry((tx, rx))
            .or_insert_with(|| gaussian(rng, 0.0, sigma))
    }
}

// ---------------------------------------------------------------------------
// Transmissions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SourceKind {
    Enb,
    Ue,
    Repeater,
    Attacker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkDirection {
    Downlink,
    Uplink,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhyChannel {
    /// Downlink control (stands in for the whole modeled downlink).
    Pdcch,
    /// Uplink control: scheduling requests.
    Pucch,
    /// Uplink shared: MAC PDUs on granted subframes.
    Pusch,
}

/// Data bearer categories distinguishable from sniffed downlink headers.
/// Short-message control traffic rides the signaling bearer; voice-call
/// control rides the first data bearer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Bearer {
    Srb,
    Drb1,
    Drb2,
}

/// What a transmission carries.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dci(Dci0),
    RrcSetup { rnti: u16, sr_config: SchedulingRequestConfig },
    BearerData { rnti: u16, bearer: Bearer },
    Sr(SchedulingRequest),
    MacPdu(MacPdu),
}

impl Payload {
    /// RNTI the payload is addressed to or attributable from, if any.
    pub fn rnti(&self) -> Option<u16> {
        match self {
            Payload::Dci(d) => Some(d.rnti),
            Payload::RrcSetup { rnti, .. } => Some(*rnti),
            Payload::BearerData { rnti, .. } => Some(*rnti),
            Payload::Sr(sr) => Some(sr.rnti),
            Payload::MacPdu(p) => Some(p.rnti),
        }
    }
}

/// One subframe-long emission from a single antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub source: EntityId,
    pub source_kind: SourceKind,
    pub position: Position,
    pub tx_power_dbm: f64,
    pub link: LinkDirection,
    pub channel: PhyChannel,
    pub payload: Payload,
    pub time: SimTime,
}

impl Transmission {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.source_kind == SourceKind::Ue && self.tx_power_dbm > crate::ue::P_CMAX_DBM + 1e-9 {
            return Err(ChannelError::UePowerClass(self.tx_power_dbm));
        }
        let ok = match self.link {
            LinkDirection::Downlink => self.channel == PhyChannel::Pdcch,
            LinkDirection::Uplink => {
                self.channel == PhyChannel::Pucch || self.channel == PhyChannel::Pusch
            }
        };
        if !ok {
            return Err(ChannelError::LinkChannelMismatch { link: self.link, channel: self.channel });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Capture resolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureWinner {
    Legit,
    Injected,
}

/// Subframe-granular capture effect: the injected transmission replaces the
/// legitimate one at the receiver iff it arrives at least `margin_db` louder.
/// Ties and anything weaker leave the legitimate signal decodable.
pub fn resolve_capture(
    legit_rx_dbm: f64,
    injected_rx_dbm: Option<f64>,
    margin_db: f64,
) -> CaptureWinner {
    match injected_rx_dbm {
        Some(inj) if inj >= legit_rx_dbm + margin_db && inj > legit_rx_dbm => CaptureWinner::Injected,
        _ => CaptureWinner::Legit,
    }
}

// ---------------------------------------------------------------------------
// Directional antennas
// ---------------------------------------------------------------------------

/// Parabolic main-lobe approximation of a directional antenna.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AntennaPattern {
    pub boresight_gain_db: f64,
    pub beamwidth_3db_deg: f64,
    /// Minimum gain far off boresight (front-to-back floor), dB.
    pub floor_db: f64,
}

impl Default for AntennaPattern {
    fn default() -> AntennaPattern {
        AntennaPattern { boresight_gain_db: 10.0, beamwidth_3db_deg: 30.0, floor_db: -10.0 }
    }
}

impl AntennaPattern {
    /// Gain at `offset_deg` away from boresight. The quadratic main lobe drops
    /// 3 dB at half the beamwidth and clamps at the floor beyond that.
    pub fn gain_db(&self, offset_deg: f64) -> f64 {
        // normalize to [-180, 180]
        let o = (offset_deg + 180.0).rem_euclid(360.0) - 180.0;
        let lobe = self.boresight_gain_db - 12.0 * (o / self.beamwidth_3db_deg).powi(2);
        lobe.max(self.floor_db)
    }
}

// ---------------------------------------------------------------------------
// Repeaters
// ---------------------------------------------------------------------------

/// Constant-output amplify-and-forward repeater. Anything received on the
/// service antenna above the sensitivity threshold is re-emitted from the
/// donor antenna at exactly `output_power_dbm`, in the same subframe. The
/// fixed output is what makes relayed power insensitive to the victim's
/// transmit-power changes.
#[derive(Debug, Clone)]
pub struct RepeaterModel {
    pub id: EntityId,
    /// Service antenna: where uplink is picked up.
    pub internal_position: Position,
    /// Donor antenna: where the copy is re-emitted.
    pub external_position: Position,
    pub sensitivity_dbm: f64,
    pub output_power_dbm: f64,
}

/// Relays `inbound` if it arrived above the sensitivity threshold.
pub fn repeater_relay(
    rep: &RepeaterModel,
    inbound: &Transmission,
    rx_dbm_at_internal: f64,
) -> Option<Transmission> {
    if rx_dbm_at_internal < rep.sensitivity_dbm {
        return None;
    }
    Some(Transmission {
        source: rep.id,
        source_kind: SourceKind::Repeater,
        position: rep.external_position,
        tx_power_dbm: rep.output_power_dbm,
        link: inbound.link,
        channel: inbound.channel,
        payload: inbound.payload.clone(),
        time: inbound.time,
    })
}
