//! Victim-side UE model: accumulated uplink power control, scheduling-request
//! gating, buffer bookkeeping, and grant servicing. The UE is deliberately
//! standard-shaped — it transmits on any grant addressed to its RNTI and
//! applies whatever TPC commands arrive, which is exactly the surface the
//! attacker leans on.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    BsrCe, Dci0, MacPdu, PduContent, SchedulingRequest, SchedulingRequestConfig, TpcCommand,
    LCID_DATA,
};
use crate::sim::{exponential, EntityId, Position};

/// UE power class ceiling, dBm.
pub const P_CMAX_DBM: f64 = 23.0;
/// Floor of the accumulated closed-loop term, dB.
pub const F_FLOOR_DB: f64 = -40.0;
/// A UE retries its scheduling request if no grant shows up within this long.
pub const SR_RETRY_MS: u64 = 40;

#[derive(Debug, Error, PartialEq)]
pub enum UeError {
    #[error("grant of zero resource blocks")]
    ZeroRbGrant,
    #[error("path loss estimate is not finite")]
    BadPathLoss,
}

/// dB step commanded by each two-bit TPC code (accumulated mode).
pub fn tpc_delta(cmd: TpcCommand) -> f64 {
    match cmd.value() {
        0 => -1.0,
        1 => 0.0,
        2 => 1.0,
        _ => 3.0,
    }
}

/// Open-loop operating point of uplink power control.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerControlParams {
    pub p0_dbm: f64,
    /// Fractional path-loss compensation, in [0, 1].
    pub alpha: f64,
}

impl Default for PowerControlParams {
    fn default() -> PowerControlParams {
        PowerControlParams { p0_dbm: crate::calib::MACRO_P0_DBM, alpha: crate::calib::MACRO_ALPHA }
    }
}

/// Per-connection closed-loop state.
#[derive(Debug, Clone, Copy)]
pub struct PowerControlState {
    pub params: PowerControlParams,
    /// Accumulated TPC term f(i), dB. Floored, not capped: the power formula's
    /// min() does the capping.
    pub f_db: f64,
}

impl PowerControlState {
    pub fn new(params: PowerControlParams) -> PowerControlState {
        PowerControlState { params, f_db: 0.0 }
    }

    pub fn apply_tpc(&mut self, cmd: TpcCommand) {
        self.f_db = (self.f_db + tpc_delta(cmd)).max(F_FLOOR_DB);
    }
}

/// PUSCH transmit power for a grant of `m_rb` resource blocks:
/// min(P_CMAX, p0 + 10 log10(M) + alpha * PL + f).
pub fn compute_tx_power(
    state: &PowerControlState,
    path_loss_db: f64,
    m_rb: u32,
) -> Result<f64, UeError> {
    if m_rb == 0 {
        return Err(UeError::ZeroRbGrant);
    }
    if !path_loss_db.is_finite() {
        return Err(UeError::BadPathLoss);
    }
    let p = state.params.p0_dbm
        + 10.0 * (m_rb as f64).log10()
        + state.params.alpha * path_loss_db
        + state.f_db;
    Ok(p.min(P_CMAX_DBM))
}

// ---------------------------------------------------------------------------
// Application traffic
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", deny_unknown_fields, rename_all = "snake_case")]
pub enum TrafficProfile {
    /// No self-generated uplink at all (an uncooperative target).
    Idle,
    /// Poisson message arrivals feeding the uplink buffer.
    Poisson { rate_per_s: f64, message_bytes: u32 },
}

// ---------------------------------------------------------------------------
// UE state machine
// ---------------------------------------------------------------------------

/// Where a serviced grant originally came from. Behaviorally invisible to the
/// UE; carried only so runs can label transmissions in their event logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrantOrigin {
    Network,
    Injected,
}

#[derive(Debug, Clone, Copy)]
pub struct UeLink {
    pub rnti: u16,
    pub sr_config: SchedulingRequestConfig,
}

#[derive(Debug)]
pub struct Ue {
    pub entity: EntityId,
    pub position: Position,
    pub power: PowerControlState,
    pub link: Option<UeLink>,
    pub buffer_bytes: u32,
    /// ms -> (grant bytes, RBs, origin)
    pending_tx: BTreeMap<u64, (u32, u8, GrantOrigin)>,
    sr_sent_at: Option<u64>,
    pub traffic: TrafficProfile,
    next_arrival_ms: Option<u64>,
    traffic_rng: Option<ChaCha8Rng>,
    /// Latest downlink reference-signal measurement.
    pub rsrp_dbm: Option<f64>,
    /// Broadcast downlink reference power the UE pairs with RSRP to estimate
    /// its path loss.
    pub enb_ref_tx_dbm: f64,
    pub bytes_per_rb: u32,
    pub k_grant_ms: u64,
}

impl Ue {
    pub fn new(
        entity: EntityId,
        position: Position,
        params: PowerControlParams,
        traffic: TrafficProfile,
        enb_ref_tx_dbm: f64,
        bytes_per_rb: u32,
        k_grant_ms: u64,
    ) -> Ue {
        Ue {
            entity,
            position,
            power: PowerControlState::new(params),
            link: None,
            buffer_bytes: 0,
            pending_tx: BTreeMap::new(),
            sr_sent_at: None,
            traffic,
            next_arrival_ms: None,
            traffic_rng: None,
            rsrp_dbm: None,
            enb_ref_tx_dbm,
            bytes_per_rb,
            k_grant_ms,
        }
    }

    pub fn start_traffic(&mut self, rng: ChaCha8Rng, from_ms: u64) {
        if let TrafficProfile::Poisson { rate_per_s, .. } = self.traffic {
            let mut rng = rng;
            let gap = exponential(&mut rng, 1000.0 / rate_per_s);
            self.next_arrival_ms = Some(from_ms + gap.ceil() as u64);
            self.traffic_rng = Some(rng);
        }
    }

    /// Feeds Poisson arrivals due at or before `at_ms` into the buffer.
    /// Returns the number of bytes that arrived.
    pub fn poll_traffic(&mut self, at_ms: u64) -> u32 {
        let TrafficProfile::Poisson { rate_per_s, message_bytes } = self.traffic else {
            return 0;
        };
        let mut arrived = 0;
        while let Some(due) = self.next_arrival_ms {
            if due > at_ms {
                break;
            }
            arrived += message_bytes;
            let rng = self.traffic_rng.as_mut().expect("traffic started");
            let gap = exponential(rng, 1000.0 / rate_per_s).ceil().max(1.0) as u64;
            self.next_arrival_ms = Some(due + gap);
        }
        self.buffer_bytes += arrived;
        arrived
    }

    pub fn next_arrival_ms(&self) -> Option<u64> {
        self.next_arrival_ms
    }

    /// New RRC connection: fresh RNTI, fresh accumulated-TPC state.
    pub fn connect(&mut self, rnti: u16, sr_config: SchedulingRequestConfig) {
        self.link = Some(UeLink { rnti, sr_config });
        self.power.f_db = 0.0;
        self.pending_tx.clear();
        self.sr_sent_at = None;
    }

    pub fn disconnect(&mut self) {
        self.link = None;
        self.pending_tx.clear();
        self.sr_sent_at = None;
    }

    /// Any downlink reception from the serving cell doubles as an RSRP sample.
    pub fn observe_downlink_power(&mut self, rx_dbm: f64) {
        self.rsrp_dbm = Some(rx_dbm);
    }

    /// UE-side path loss estimate from the broadcast reference power.
    pub fn path_loss_estimate_db(&self) -> Option<f64> {
        self.rsrp_dbm.map(|rsrp| self.enb_ref_tx_dbm - rsrp)
    }

    /// Handles a decoded grant addressed to this UE: applies the TPC command
    /// and schedules the PUSCH `k_grant` subframes out.
    pub fn on_dci0(&mut self, dci: &Dci0, at_ms: u64, origin: GrantOrigin) -> bool {
        let Some(link) = self.link else { return false };
        if dci.rnti != link.rnti {
            return false;
        }
        self.power.apply_tpc(dci.tpc);
        let m = dci.rb_alloc.len.max(1);
        let bytes = m as u32 * self.bytes_per_rb;
        self.pending_tx.insert(at_ms + self.k_grant_ms, (bytes, m, origin));
        self.sr_sent_at = None; // grant arrived; SR no longer outstanding
        true
    }

    pub fn has_pending_tx(&self) -> bool {
        !self.pending_tx.is_empty()
    }

    /// If a grant is due this subframe, builds the transport block: buffered
    /// data first, padding for the rest, and a BSR for whatever remains.
    pub fn pusch_due(&mut self, at_ms: u64) -> Option<(MacPdu, u8, GrantOrigin)> {
        let (bytes, m, origin) = self.pending_tx.remove(&at_ms)?;
        let link = self.link?;
        let sdu = self.buffer_bytes.min(bytes);
        self.buffer_bytes -= sdu;
        let content = if sdu > 0 { PduContent::Data { sdu_bytes: sdu } } else { PduContent::Padding };
        let pdu = MacPdu {
            rnti: link.rnti,
            bsr: Some(BsrCe { lcid: LCID_DATA, buffer_size_bytes: self.buffer_bytes }),
            content,
            payload_len_bytes: bytes,
        };
        Some((pdu, m, origin))
    }

    /// Emits a scheduling request when this subframe is one of the UE's SR
    /// opportunities, it has data, and no grant or recent SR is in flight.
    pub fn maybe_send_sr(&mut self, at_ms: u64) -> Option<SchedulingRequest> {
        let link = self.link?;
        if self.buffer_bytes == 0 || !self.pending_tx.is_empty() {
            return None;
        }
        if let Some(sent) = self.sr_sent_at {
            if at_ms < sent + SR_RETRY_MS {
                return None;
            }
        }
        if !link.sr_config.is_opportunity(at_ms) {
            return None;
        }
        self.sr_sent_at = Some(at_ms);
        Some(SchedulingRequest { rnti: link.rnti, config: link.sr_config })
    }

    /// Transmit power for a PUSCH of `m_rb` blocks given the current estimate.
    pub fn tx_power_dbm(&self, m_rb: u32) -> Result<f64, UeError> {
        let pl = self.path_loss_estimate_db().ok_or(UeError::BadPathLoss)?;
        compute_tx_power(&self.power, pl, m_rb)
    }
}
