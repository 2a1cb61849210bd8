//! Base-station model: RNTI lifecycle, scheduling-request and BSR driven
//! grant issue, closed-loop TPC decisions, and the uplink anomaly heuristics
//! an operator could run against scheduling manipulation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::channel::{Bearer, LinkDirection, Payload, PhyChannel, SourceKind, Transmission};
use crate::codec::{
    BsrCe, Dci0, MacPdu, RbAlloc, SchedulingRequest, SchedulingRequestConfig, TpcCommand, MAX_RBS,
    MAX_SR_RESOURCE,
};
use crate::sim::{EntityId, Position, SimTime};

#[derive(Debug, Error, PartialEq)]
pub enum EnbError {
    #[error("RNTI space exhausted")]
    RntiSpaceExhausted,
    #[error("SR resource space exhausted")]
    SrResourcesExhausted,
    #[error("entity already has an active RNTI")]
    AlreadyConnected,
}

/// Scheduler and control-loop knobs.
#[derive(Debug, Clone)]
pub struct EnbConfig {
    /// Downlink transmit power, also the reference power UEs pair with RSRP.
    pub ref_tx_power_dbm: f64,
    /// Desired PUSCH arrival power at the cell edge of the control loop.
    pub target_rx_power_dbm: f64,
    /// Half-width of the no-correction band around the target.
    pub hysteresis_db: f64,
    pub tpc_enabled: bool,
    /// An RNTI with no activity for this long is released.
    pub inactivity_timeout_ms: u64,
    /// Bytes granted per subframe when serving a BSR.
    pub grant_quantum_bytes: u32,
    /// Size of the immediate grant answering a scheduling request; just
    /// enough for a BSR.
    pub sr_grant_bytes: u32,
    /// Transport bytes carried per resource block.
    pub bytes_per_rb: u32,
    /// Grant-to-PUSCH lead time in subframes.
    pub k_grant_ms: u64,
    /// Size of the PUCCH scheduling-request resource pool.
    pub sr_resource_count: u16,
    /// Periodicity assigned to new connections.
    pub sr_periodicity_ms: u16,
}

impl Default for EnbConfig {
    fn default() -> EnbConfig {
        EnbConfig {
            ref_tx_power_dbm: crate::calib::MACRO_ENB_REF_TX_DBM,
            target_rx_power_dbm: -100.0,
            hysteresis_db: 1.0,
            tpc_enabled: true,
            inactivity_timeout_ms: 15_000,
            grant_quantum_bytes: 100,
            sr_grant_bytes: 10,
            bytes_per_rb: 25,
            k_grant_ms: 4,
            sr_resource_count: 2048,
            sr_periodicity_ms: 10,
        }
    }
}

/// Scheduler-side connection state for one RNTI.
#[derive(Debug, Clone)]
pub struct RntiRecord {
    pub rnti: u16,
    pub ue: EntityId,
    pub sr_config: SchedulingRequestConfig,
    pub connected_at_ms: u64,
    pub last_activity_ms: u64,
    /// Bytes granted but not yet reached their PUSCH subframe; keeps BSR
    /// top-ups from double-granting.
    pub pending_grant_bytes: u32,
    /// Latest closed-loop decision; consumed by the next DCI to this RNTI.
    pub pending_tpc: TpcCommand,
}

/// A scheduled uplink allocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UplinkGrant {
    pub rnti: u16,
    pub grant_bytes: u32,
    pub rb_alloc: RbAlloc,
    /// When the scheduler decided.
    pub issued_ms: u64,
    /// When the DCI goes on the air (one DCI per RNTI per subframe).
    pub announce_ms: u64,
    /// PUSCH subframe: announce + k_grant.
    pub scheduled_ms: u64,
}

/// Operator-side heuristics over a window of uplink transport blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AnomalyFlags {
    /// The RNTI keeps reporting an empty buffer yet keeps transmitting.
    pub zero_bsr_repeated_uplink: bool,
    /// The RNTI keeps sending blocks that are nothing but filler.
    pub padding_only_payloads: bool,
}

impl AnomalyFlags {
    pub fn any(self) -> bool {
        self.zero_bsr_repeated_uplink || self.padding_only_payloads
    }

    pub fn merge(&mut self, other: AnomalyFlags) {
        self.zero_bsr_repeated_uplink |= other.zero_bsr_repeated_uplink;
        self.padding_only_payloads |= other.padding_only_payloads;
    }
}

/// Flag thresholds: this many matching blocks inside one second.
pub const ANOMALY_THRESHOLD: usize = 5;
pub const ANOMALY_WINDOW_MS: u64 = 1000;

/// Pure heuristic over (subframe, block) pairs, oldest first.
pub fn detect_anomalies(window: &[(u64, MacPdu)]) -> AnomalyFlags {
    let mut flags = AnomalyFlags::default();
    let mut lo = 0;
    let mut padding = 0usize;
    let mut padding_zero_bsr = 0usize;
    for hi in 0..window.len() {
        let (t_hi, ref pdu) = window[hi];
        if pdu.is_padding() {
            padding += 1;
            if pdu.bsr.map_or(false, |b| b.buffer_size_bytes == 0) {
                padding_zero_bsr += 1;
            }
        }
        while window[lo].0 + ANOMALY_WINDOW_MS <= t_hi {
            let (_, ref old) = window[lo];
            if old.is_padding() {
                padding -= 1;
                if old.bsr.map_or(false, |b| b.buffer_size_bytes == 0) {
                    padding_zero_bsr -= 1;
                }
            }
            lo += 1;
        }
        flags.padding_only_payloads |= padding >= ANOMALY_THRESHOLD;
        flags.zero_bsr_repeated_uplink |= padding_zero_bsr >= ANOMALY_THRESHOLD;
    }
    flags
}

/// What became of an arriving scheduling request.
#[derive(Debug, Clone, PartialEq)]
pub enum SrOutcome {
    Granted(UplinkGrant),
    IgnoredUnknownRnti,
    IgnoredWrongResource,
}

// C-RNTI value range; avoids the reserved identifiers at both ends.
const RNTI_MIN: u16 = 0x003D;
const RNTI_MAX: u16 = 0xFFF3;

#[derive(Debug)]
pub struct Enb {
    pub config: EnbConfig,
    pub entity: EntityId,
    pub position: Position,
    records: BTreeMap<u16, RntiRecord>,
    by_ue: BTreeMap<EntityId, u16>,
    grants_by_announce: BTreeMap<u64, Vec<UplinkGrant>>,
    next_free_announce: BTreeMap<u16, u64>,
    /// scheduled subframe -> (rnti, grant bytes, RBs)
    expected_pusch: BTreeMap<u64, Vec<(u16, u32, u8)>>,
    rnti_rng: ChaCha8Rng,
    /// Every RNTI handed out during the run; a reconnect never reuses one.
    used_rntis: BTreeSet<u16>,
    free_sr_resources: BTreeSet<u16>,
    dl_queue: BTreeMap<u64, Vec<(EntityId, Bearer)>>,
    /// Rolling per-RNTI block windows feeding the anomaly heuristics.
    anomaly_windows: BTreeMap<u16, VecDeque<(u64, MacPdu)>>,
    pub anomaly_flags: BTreeMap<u16, AnomalyFlags>,
    pub ignored_sr_count: u64,
    pub unexpected_pusch_count: u64,
    pub missed_pusch_count: u64,
}

impl Enb {
    pub fn new(config: EnbConfig, entity: EntityId, position: Position, rnti_rng: ChaCha8Rng) -> Enb {
        let pool_top = config.sr_resource_count.min(MAX_SR_RESOURCE + 1);
        Enb {
            config,
            entity,
            position,
            records: BTreeMap::new(),
            by_ue: BTreeMap::new(),
            grants_by_announce: BTreeMap::new(),
            next_free_announce: BTreeMap::new(),
            expected_pusch: BTreeMap::new(),
            rnti_rng,
            used_rntis: BTreeSet::new(),
            free_sr_resources: (0..pool_top).collect(),
            dl_queue: BTreeMap::new(),
            anomaly_windows: BTreeMap::new(),
            anomaly_flags: BTreeMap::new(),
            ignored_sr_count: 0,
            unexpected_pusch_count: 0,
            missed_pusch_count: 0,
        }
    }

    pub fn record(&self, rnti: u16) -> Option<&RntiRecord> {
        self.records.get(&rnti)
    }

    pub fn rnti_of(&self, ue: EntityId) -> Option<u16> {
        self.by_ue.get(&ue).copied()
    }

    pub fn active_connections(&self) -> usize {
        self.records.len()
    }

    /// Admits a UE: fresh random RNTI (never one used before in this run) and
    /// a dedicated SR resource. Returns the record plus the setup broadcast.
    pub fn rrc_connect(
        &mut self,
        ue: EntityId,
        at_ms: u64,
    ) -> Result<(RntiRecord, Transmission), EnbError> {
        if self.by_ue.contains_key(&ue) {
            return Err(EnbError::AlreadyConnected);
        }
        if self.used_rntis.len() >= (RNTI_MAX - RNTI_MIN) as usize {
            return Err(EnbError::RntiSpaceExhausted);
        }
        let rnti = loop {
            let candidate = self.rnti_rng.gen_range(RNTI_MIN..RNTI_MAX);
            if self.used_rntis.insert(candidate) {
                break candidate;
            }
        };
        let resource = *self
            .free_sr_resources
            .iter()
            .next()
            .ok_or(EnbError::SrResourcesExhausted)?;
        self.free_sr_resources.remove(&resource);
        let sr_config = SchedulingRequestConfig::new(resource, self.config.sr_periodicity_ms)
            .expect("pool stays inside the codec range");
        let record = RntiRecord {
            rnti,
            ue,
            sr_config,
            connected_at_ms: at_ms,
            last_activity_ms: at_ms,
            pending_grant_bytes: 0,
            pending_tpc: TpcCommand::HOLD,
        };
        self.records.insert(rnti, record.clone());
        self.by_ue.insert(ue, rnti);
        let tx = Transmission {
            source: self.entity,
            source_kind: SourceKind::Enb,
            position: self.position,
            tx_power_dbm: self.config.ref_tx_power_dbm,
            link: LinkDirection::Downlink,
            channel: PhyChannel::Pdcch,
            payload: Payload::RrcSetup { rnti, sr_config },
            time: SimTime::from_ms(at_ms),
        };
        Ok((record, tx))
    }

    /// Releases every RNTI idle for the full timeout. Returns what expired.
    pub fn expire_idle(&mut self, at_ms: u64) -> Vec<(u16, EntityId)> {
        let timeout = self.config.inactivity_timeout_ms;
        let dead: Vec<u16> = self
            .records
            .values()
            .filter(|r| at_ms.saturating_sub(r.last_activity_ms) >= timeout)
            .map(|r| r.rnti)
            .collect();
        let mut out = Vec::new();
        for rnti in dead {
            let r = self.records.remove(&rnti).expect("collected above");
            self.by_ue.remove(&r.ue);
            self.free_sr_resources.insert(r.sr_config.resource_index);
            self.next_free_announce.remove(&rnti);
            self.anomaly_windows.remove(&rnti);
            out.push((rnti, r.ue));
        }
        out
    }

    fn push_grant(&mut self, rnti: u16, grant_bytes: u32, at_ms: u64) -> UplinkGrant {
        let m = grant_bytes
            .div_ceil(self.config.bytes_per_rb)
            .clamp(1, MAX_RBS as u32) as u8;
        let next_free = self.next_free_announce.entry(rnti).or_insert(at_ms);
        let announce_ms = (*next_free).max(at_ms);
        *next_free = announce_ms + 1;
        let grant = UplinkGrant {
            rnti,
            grant_bytes,
            rb_alloc: RbAlloc::new(0, m).expect("clamped"),
            issued_ms: at_ms,
            announce_ms,
            scheduled_ms: announce_ms + self.config.k_grant_ms,
        };
        self.grants_by_announce.entry(announce_ms).or_default().push(grant);
        if let Some(r) = self.records.get_mut(&rnti) {
            r.pending_grant_bytes += grant_bytes;
        }
        grant
    }

    /// A scheduling request on the right resource earns a BSR-sized grant at
    /// `at + k_grant`. Requests for unknown RNTIs or on the wrong resource
    /// are ignored and counted.
    pub fn on_scheduling_request(&mut self, sr: &SchedulingRequest, at_ms: u64) -> SrOutcome {
        let Some(record) = self.records.get_mut(&sr.rnti) else {
            self.ignored_sr_count += 1;
            return SrOutcome::IgnoredUnknownRnti;
        };
        if record.sr_config != sr.config {
            self.ignored_sr_count += 1;
            return SrOutcome::IgnoredWrongResource;
        }
        record.last_activity_ms = at_ms;
        let bytes = self.config.sr_grant_bytes;
        SrOutcome::Granted(self.push_grant(sr.rnti, bytes, at_ms))
    }

    /// Serves a decoded buffer status: tops pending grants up to the reported
    /// backlog, one quantum-sized grant per subframe, without double-counting
    /// what is already scheduled.
    pub fn on_bsr(&mut self, rnti: u16, bsr: &BsrCe, at_ms: u64) -> Vec<UplinkGrant> {
        let Some(record) = self.records.get_mut(&rnti) else {
            return Vec::new();
        };
        let additional = bsr.buffer_size_bytes.saturating_sub(record.pending_grant_bytes);
        if additional == 0 {
            return Vec::new();
        }
        let quantum = self.config.grant_quantum_bytes;
        let n = additional.div_ceil(quantum);
        (0..n).map(|_| self.push_grant(rnti, quantum, at_ms)).collect()
    }

    /// Bang-bang power control: one step toward the target only when the
    /// measurement falls outside the hysteresis band. The aggressive +3 code
    /// is never a scheduler decision.
    pub fn tpc_decision(&self, measured_dbm: f64) -> TpcCommand {
        if !self.config.tpc_enabled {
            return TpcCommand::HOLD;
        }
        if measured_dbm > self.config.target_rx_power_dbm + self.config.hysteresis_db {
            TpcCommand::DOWN
        } else if measured_dbm < self.config.target_rx_power_dbm - self.config.hysteresis_db {
            TpcCommand::UP
        } else {
            TpcCommand::HOLD
        }
    }

    /// Consumes the grant expectations for PUSCH subframe `s`; call once when
    /// processing the arrivals transmitted at `s`. Pending-byte accounting is
    /// settled here whether or not the block actually arrived.
    pub fn take_expected_pusch(&mut self, s_ms: u64) -> BTreeMap<u16, (u32, u8)> {
        let mut out = BTreeMap::new();
        if let Some(entries) = self.expected_pusch.remove(&s_ms) {
            for (rnti, bytes, m) in entries {
                if let Some(r) = self.records.get_mut(&rnti) {
                    r.pending_grant_bytes = r.pending_grant_bytes.saturating_sub(bytes);
                }
                let e = out.entry(rnti).or_insert((0u32, 0u8));
                e.0 += bytes;
                e.1 = e.1.max(m);
            }
        }
        out
    }

    pub fn note_missed_pusch(&mut self) {
        self.missed_pusch_count += 1;
    }

    /// Handles one decoded uplink transport block that arrived with
    /// `measured_dbm` at the cell. `expected` must come from
    /// [`Enb::take_expected_pusch`] for the block's subframe: the grant's
    /// (bytes, blocks) when one was scheduled. Returns the follow-up grants
    /// its BSR earned.
    pub fn on_pusch(
        &mut self,
        pdu: &MacPdu,
        measured_dbm: f64,
        tx_subframe_ms: u64,
        at_ms: u64,
        expected: Option<(u32, u8)>,
    ) -> Vec<UplinkGrant> {
        let Some((_, m_rb)) = expected else {
            self.unexpected_pusch_count += 1;
            return Vec::new();
        };
        if !self.records.contains_key(&pdu.rnti) {
            self.unexpected_pusch_count += 1;
            return Vec::new();
        }
        // the loop regulates per-block power density, so a wide allocation
        // is not mistaken for a hot terminal
        let per_rb_dbm = measured_dbm - 10.0 * f64::from(m_rb.max(1)).log10();
        let decision = self.tpc_decision(per_rb_dbm);
        {
            let record = self.records.get_mut(&pdu.rnti).expect("checked");
            record.last_activity_ms = at_ms;
            record.pending_tpc = decision;
        }
        // operator-side heuristics over a rolling one-second window
        let window = self.anomaly_windows.entry(pdu.rnti).or_default();
        window.push_back((tx_subframe_ms, *pdu));
        while window
            .front()
            .is_some_and(|(t, _)| t + ANOMALY_WINDOW_MS <= tx_subframe_ms)
        {
            window.pop_front();
        }
        let contiguous = window.make_contiguous().to_vec();
        let flags = detect_anomalies(&contiguous);
        if flags.any() {
            self.anomaly_flags.entry(pdu.rnti).or_default().merge(flags);
        }
        match pdu.bsr {
            Some(bsr) if bsr.buffer_size_bytes > 0 => self.on_bsr(pdu.rnti, &bsr, at_ms),
            _ => Vec::new(),
        }
    }

    pub fn queue_downlink(&mut self, ue: EntityId, bearer: Bearer, deliver_at_ms: u64) {
        self.dl_queue.entry(deliver_at_ms).or_default().push((ue, bearer));
    }

    /// Downlink app deliveries due this subframe.
    pub fn take_due_downlink(&mut self, at_ms: u64) -> Vec<(EntityId, Bearer)> {
        self.dl_queue.remove(&at_ms).unwrap_or_default()
    }

    pub fn note_downlink_activity(&mut self, rnti: u16, at_ms: u64) {
        if let Some(r) = self.records.get_mut(&rnti) {
            r.last_activity_ms = at_ms;
        }
    }

    /// Emits this subframe's grant DCIs. At most one DCI per RNTI per
    /// subframe by construction of the announce queue.
    pub fn emit_grant_dcis(&mut self, at_ms: u64) -> Vec<(UplinkGrant, Transmission)> {
        let Some(grants) = self.grants_by_announce.remove(&at_ms) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for grant in grants {
            // the RNTI may have expired between issue and announce
            let Some(record) = self.records.get_mut(&grant.rnti) else { continue };
            // one measurement, one correction: later DCIs issued before the
            // next decode must not repeat a stale step
            let tpc = std::mem::replace(&mut record.pending_tpc, TpcCommand::HOLD);
            let dci = Dci0 { rnti: grant.rnti, rb_alloc: grant.rb_alloc, tpc, flags: 0 };
            self.expected_pusch
                .entry(grant.scheduled_ms)
                .or_default()
                .push((grant.rnti, grant.grant_bytes, grant.rb_alloc.len));
            let tx = Transmission {
                source: self.entity,
                source_kind: SourceKind::Enb,
                position: self.position,
                tx_power_dbm: self.config.ref_tx_power_dbm,
                link: LinkDirection::Downlink,
                channel: PhyChannel::Pdcch,
                payload: Payload::Dci(dci),
                time: SimTime::from_ms(at_ms),
            };
            out.push((grant, tx));
        }
        out
    }

    /// Downlink bearer transmission helper.
    pub fn bearer_transmission(&self, rnti: u16, bearer: Bearer, at_ms: u64) -> Transmission {
        Transmission {
            source: self.entity,
            source_kind: SourceKind::Enb,
            position: self.position,
            tx_power_dbm: self.config.ref_tx_power_dbm,
            link: LinkDirection::Downlink,
            channel: PhyChannel::Pdcch,
            payload: Payload::BearerData { rnti, bearer },
            time: SimTime::from_ms(at_ms),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::PduContent;
    use crate::sim::RngStreams;
    use crate::ue::{compute_tx_power, PowerControlParams, PowerControlState};

    fn test_enb() -> Enb {
        Enb::new(
            EnbConfig::default(),
            EntityId(0),
            Position::new(0.0, 0.0),
            RngStreams::new(42).stream("rnti"),
        )
    }

    fn pdu(rnti: u16, padding: bool, bsr_bytes: u32) -> MacPdu {
        MacPdu {
            rnti,
            bsr: Some(BsrCe { lcid: 3, buffer_size_bytes: bsr_bytes }),
            content: if padding {
                PduContent::Padding
            } else {
                PduContent::Data { sdu_bytes: 10 }
            },
            payload_len_bytes: 10,
        }
    }

    #[test]
    fn connect_assigns_distinct_rntis_and_resources() {
        let mut enb = test_enb();
        let mut rntis = BTreeSet::new();
        let mut resources = BTreeSet::new();
        for i in 0..1000 {
            let (rec, tx) = enb.rrc_connect(EntityId(i + 1), i as u64).unwrap();
            assert!(rntis.insert(rec.rnti), "duplicate rnti {}", rec.rnti);
            assert!(
                resources.insert(rec.sr_config.resource_index),
                "duplicate SR resource {}",
                rec.sr_config.resource_index
            );
            match tx.payload {
                Payload::RrcSetup { rnti, sr_config } => {
                    assert_eq!(rnti, rec.rnti);
                    assert_eq!(sr_config, rec.sr_config);
                }
                _ => panic!("setup payload expected"),
            }
        }
        assert_eq!(rntis.len(), 1000);
        assert_eq!(resources.len(), 1000);
    }

    #[test]
    fn reconnect_gets_a_fresh_rnti() {
        let mut enb = test_enb();
        let (rec, _) = enb.rrc_connect(EntityId(1), 0).unwrap();
        let first = rec.rnti;
        let expired = enb.expire_idle(rec.connected_at_ms + enb.config.inactivity_timeout_ms);
        assert_eq!(expired, vec![(first, EntityId(1))]);
        let (rec2, _) = enb.rrc_connect(EntityId(1), 20_000).unwrap();
        assert_ne!(rec2.rnti, first);
    }

    #[test]
    fn double_connect_rejected() {
        let mut enb = test_enb();
        enb.rrc_connect(EntityId(1), 0).unwrap();
        assert_eq!(enb.rrc_connect(EntityId(1), 1).unwrap_err(), EnbError::AlreadyConnected);
    }

    #[test]
    fn expiry_is_exact_without_activity() {
        let mut enb = test_enb();
        let (rec, _) = enb.rrc_connect(EntityId(1), 137).unwrap();
        let timeout = enb.config.inactivity_timeout_ms;
        for t in 138..137 + timeout {
            assert!(enb.expire_idle(t).is_empty(), "expired early at {t}");
        }
        let expired = enb.expire_idle(137 + timeout);
        assert_eq!(expired, vec![(rec.rnti, EntityId(1))]);
    }

    #[test]
    fn activity_postpones_expiry() {
        let mut enb = test_enb();
        let (rec, _) = enb.rrc_connect(EntityId(1), 0).unwrap();
        let sr = SchedulingRequest { rnti: rec.rnti, config: rec.sr_config };
        assert!(matches!(enb.on_scheduling_request(&sr, 10_000), SrOutcome::Granted(_)));
        assert!(enb.expire_idle(15_000).is_empty());
        assert_eq!(enb.expire_idle(25_000).len(), 1);
    }

    #[test]
    fn sr_grant_lands_k_subframes_out() {
        let mut enb = test_enb();
        let (rec, _) = enb.rrc_connect(EntityId(1), 0).unwrap();
        let sr = SchedulingRequest { rnti: rec.rnti, config: rec.sr_config };
        let SrOutcome::Granted(g) = enb.on_scheduling_request(&sr, 1000) else {
            panic!("grant expected");
        };
        assert_eq!(g.scheduled_ms, 1004);
        assert_eq!(g.announce_ms, 1000);
        assert!(g.scheduled_ms > g.issued_ms);
        assert!(g.grant_bytes >= 2, "BSR-sized grant");
        // the DCI comes out on the announce subframe
        let dcis = enb.emit_grant_dcis(1000);
        assert_eq!(dcis.len(), 1);
        assert_eq!(dcis[0].0, g);
    }

    #[test]
    fn sr_on_wrong_resource_or_unknown_rnti_ignored() {
        let mut enb = test_enb();
        let (rec, _) = enb.rrc_connect(EntityId(1), 0).unwrap();
        let wrong = SchedulingRequest {
            rnti: rec.rnti,
            config: SchedulingRequestConfig::new(
                rec.sr_config.resource_index + 1,
                rec.sr_config.periodicity_ms,
            )
            .unwrap(),
        };
        assert_eq!(enb.on_scheduling_request(&wrong, 5), SrOutcome::IgnoredWrongResource);
        let unknown = SchedulingRequest { rnti: 0x7777, config: rec.sr_config };
        assert_eq!(enb.on_scheduling_request(&unknown, 6), SrOutcome::IgnoredUnknownRnti);
        assert_eq!(enb.ignored_sr_count, 2);
    }

    #[test]
    fn bsr_grants_cover_the_backlog_once() {
        let mut enb = test_enb();
        let (rec, _) = enb.rrc_connect(EntityId(1), 0).unwrap();
        let bsr = BsrCe { lcid: 3, buffer_size_bytes: 200 };
        let grants = enb.on_bsr(rec.rnti, &bsr, 100);
        let total: u32 = grants.iter().map(|g| g.grant_bytes).sum();
        assert!(total >= 200, "grants total {total}");
        assert_eq!(grants.len(), 2, "one quantum per grant");
        // one grant per subframe, consecutive
        assert_eq!(grants[0].announce_ms + 1, grants[1].announce_ms);
        assert_eq!(grants[0].scheduled_ms + 1, grants[1].scheduled_ms);

        // single-shot oracle: a second identical BSR while those grants are
        // still pending must not add anything
        let again = enb.on_bsr(rec.rnti, &bsr, 101);
        assert!(again.is_empty(), "double-count: {again:?}");
        assert_eq!(enb.record(rec.rnti).unwrap().pending_grant_bytes, 200);

        // once the grants are consumed the accounting drains
        enb.emit_grant_dcis(grants[0].announce_ms);
        enb.emit_grant_dcis(grants[1].announce_ms);
        enb.take_expected_pusch(grants[0].scheduled_ms);
        enb.take_expected_pusch(grants[1].scheduled_ms);
        assert_eq!(enb.record(rec.rnti).unwrap().pending_grant_bytes, 0);
        let after = enb.on_bsr(rec.rnti, &bsr, 120);
        assert_eq!(after.len(), 2, "fresh backlog earns fresh grants");
    }

    #[test]
    fn zero_bsr_earns_nothing() {
        let mut enb = test_enb();
        let (rec, _) = enb.rrc_connect(EntityId(1), 0).unwrap();
        let bsr = BsrCe { lcid: 3, buffer_size_bytes: 0 };
        assert!(enb.on_bsr(rec.rnti, &bsr, 5).is_empty());
    }

    #[test]
    fn tpc_decision_band() {
        let enb = test_enb(); // target -100, hysteresis 1
        assert_eq!(enb.tpc_decision(-98.9), TpcCommand::DOWN);
        assert_eq!(enb.tpc_decision(-99.5), TpcCommand::HOLD);
        assert_eq!(enb.tpc_decision(-100.0), TpcCommand::HOLD);
        assert_eq!(enb.tpc_decision(-100.9), TpcCommand::HOLD);
        assert_eq!(enb.tpc_decision(-101.1), TpcCommand::UP);
        // never the aggressive code, over a wide sweep
        let mut m = -140.0;
        while m < -60.0 {
            assert_ne!(enb.tpc_decision(m), TpcCommand::BOOST);
            m += 0.25;
        }
    }

    #[test]
    fn tpc_disabled_always_holds() {
        let mut enb = test_enb();
        enb.config.tpc_enabled = false;
        for m in [-130.0, -100.0, -70.0] {
            assert_eq!(enb.tpc_decision(m), TpcCommand::HOLD);
        }
    }

    #[test]
    fn closed_loop_converges_within_linear_bound() {
        // The eNB's one-step commands against the UE's accumulation reach the
        // hysteresis band from any start in well under 30 subframes per dB.
        let enb = test_enb();
        let params = PowerControlParams { p0_dbm: -60.0, alpha: 0.6 };
        for start_err in [-25.0, -10.0, -2.5, 0.0, 3.0, 18.0] {
            let mut state = PowerControlState::new(params);
            let pl = 100.0;
            // choose f so the first measurement sits exactly start_err from
            // target: measured = tx - pl
            let open = compute_tx_power(&state, pl, 4).unwrap();
            state.f_db = enb.config.target_rx_power_dbm + start_err + pl - open;
            let bound = (30.0 * start_err.abs()).max(1.0) as usize;
            let mut steps = 0;
            loop {
                let measured = compute_tx_power(&state, pl, 4).unwrap() - pl;
                let err = measured - enb.config.target_rx_power_dbm;
                if err.abs() <= enb.config.hysteresis_db {
                    break;
                }
                state.apply_tpc(enb.tpc_decision(measured));
                steps += 1;
                assert!(steps <= bound, "start {start_err}: {steps} steps > {bound}");
            }
        }
    }

    #[test]
    fn anomaly_heuristics() {
        // five padding blocks with zero BSR inside a second: both flags
        let attack: Vec<(u64, MacPdu)> = (0..5).map(|i| (i * 100, pdu(1, true, 0))).collect();
        let f = detect_anomalies(&attack);
        assert!(f.padding_only_payloads);
        assert!(f.zero_bsr_repeated_uplink);

        // four is under the threshold
        let four: Vec<(u64, MacPdu)> = (0..4).map(|i| (i * 100, pdu(1, true, 0))).collect();
        assert!(!detect_anomalies(&four).any());

        // five padding blocks spread over more than a second: nothing
        let slow: Vec<(u64, MacPdu)> = (0..5).map(|i| (i * 300, pdu(1, true, 0))).collect();
        assert!(!detect_anomalies(&slow).any());

        // a benign burst of data blocks with zero BSR: nothing
        let benign: Vec<(u64, MacPdu)> = (0..10).map(|i| (i * 50, pdu(1, false, 0))).collect();
        assert!(!detect_anomalies(&benign).any());

        // one stray padding block: nothing
        assert!(!detect_anomalies(&[(0, pdu(1, true, 0))]).any());

        // padding with fabricated nonzero BSRs still trips the padding flag
        let fabricated: Vec<(u64, MacPdu)> = (0..5).map(|i| (i * 100, pdu(1, true, 999))).collect();
        let f = detect_anomalies(&fabricated);
        assert!(f.padding_only_payloads);
        assert!(!f.zero_bsr_repeated_uplink);
    }

    #[test]
    fn pusch_updates_activity_and_tpc() {
        let mut enb = test_enb();
        let (rec, _) = enb.rrc_connect(EntityId(1), 0).unwrap();
        let sr = SchedulingRequest { rnti: rec.rnti, config: rec.sr_config };
        let SrOutcome::Granted(g) = enb.on_scheduling_request(&sr, 0) else { panic!() };
        enb.emit_grant_dcis(g.announce_ms);
        let expected = enb.take_expected_pusch(g.scheduled_ms);
        assert!(expected.contains_key(&rec.rnti));
        // arrives 4 dB hot: scheduler steps it down on the next DCI
        let follow = enb.on_pusch(
            &pdu(rec.rnti, false, 0),
            -96.0,
            g.scheduled_ms,
            g.scheduled_ms + 1,
            Some((g.grant_bytes, g.rb_alloc.len)),
        );
        assert!(follow.is_empty());
        let r = enb.record(rec.rnti).unwrap();
        assert_eq!(r.pending_tpc, TpcCommand::DOWN);
        assert_eq!(r.last_activity_ms, g.scheduled_ms + 1);
    }

    #[test]
    fn unexpected_pusch_counted_not_processed() {
        let mut enb = test_enb();
        let (rec, _) = enb.rrc_connect(EntityId(1), 0).unwrap();
        let follow = enb.on_pusch(&pdu(rec.rnti, false, 500), -100.0, 50, 51, None);
        assert!(follow.is_empty());
        assert_eq!(enb.unexpected_pusch_count, 1);
        assert_eq!(enb.record(rec.rnti).unwrap().last_activity_ms, 0, "no refresh");
    }

    #[test]
    fn grants_announce_once_per_rnti_per_subframe() {
        let mut enb = test_enb();
        let (rec, _) = enb.rrc_connect(EntityId(1), 0).unwrap();
        let bsr = BsrCe { lcid: 3, buffer_size_bytes: 1000 };
        let grants = enb.on_bsr(rec.rnti, &bsr, 10);
        assert_eq!(grants.len(), 10);
        let mut announces: Vec<u64> = grants.iter().map(|g| g.announce_ms).collect();
        let deduped = announces.clone();
        announces.dedup();
        assert_eq!(announces, deduped, "announce slots must be unique");
        for g in &grants {
            assert_eq!(g.scheduled_ms, g.announce_ms + enb.config.k_grant_ms);
        }
    }
}
