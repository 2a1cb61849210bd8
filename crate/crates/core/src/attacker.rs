//! Overshadowing attacker: learns the victim's RNTI by pairing silent app
//! messages with downlink bursts, hijacks the scheduling loop with forged
//! requests and fabricated buffer reports, injects power-boost commands, and
//! separates genuine bearings from repeater decoys.

use std::collections::{BTreeMap, VecDeque};

use crate::channel::{Bearer, LinkDirection, Payload, PhyChannel, SourceKind, Transmission};
use crate::codec::{
    BsrCe, Dci0, MacPdu, PduContent, RbAlloc, SchedulingRequest, SchedulingRequestConfig,
    TpcCommand,
};
use crate::sim::{EntityId, Position, SimTime};

/// Timing signature the attacker embeds in its silent messages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SilentPattern {
    /// Messages per round.
    pub count: usize,
    /// Spacing between messages.
    pub gap_ms: u64,
    /// Acceptable deviation when matching observed burst gaps.
    pub tolerance_ms: u64,
    /// Downlink activity closer than this collapses into one burst.
    pub burst_merge_ms: u64,
}

impl Default for SilentPattern {
    fn default() -> SilentPattern {
        SilentPattern { count: 4, gap_ms: 7000, tolerance_ms: 250, burst_merge_ms: 1000 }
    }
}

impl SilentPattern {
    /// Gaps must comfortably outlast organic chatter and the tolerance must
    /// not be so loose that adjacent gaps blur together.
    pub fn validate(&self) -> Result<(), String> {
        if self.count < 2 {
            return Err(format!("pattern needs at least 2 messages, got {}", self.count));
        }
        if self.gap_ms <= 6000 {
            return Err(format!("gap {} ms too short; must exceed 6000 ms", self.gap_ms));
        }
        if self.tolerance_ms >= self.gap_ms / 2 {
            return Err(format!(
                "tolerance {} ms must stay under half the gap ({} ms)",
                self.tolerance_ms,
                self.gap_ms / 2
            ));
        }
        Ok(())
    }
}

/// One decoded downlink user-data transmission, as seen by the attacker's
/// receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownlinkObservation {
    pub time_ms: u64,
    pub rnti: u16,
    pub bearer: Bearer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AcquisitionOutcome {
    /// Exactly one RNTI shows the embedded timing signature.
    Ok(u16),
    NotFound,
    /// Multiple RNTIs match; ascending order.
    Ambiguous(Vec<u16>),
}

/// Collapses per-RNTI observation times into burst start times.
fn cluster_bursts(times: &[u64], merge_ms: u64) -> Vec<u64> {
    let mut bursts = Vec::new();
    let mut last: Option<u64> = None;
    for &t in times {
        match last {
            Some(prev) if t.saturating_sub(prev) < merge_ms => {}
            _ => bursts.push(t),
        }
        last = Some(t);
    }
    bursts
}

fn bursts_match(bursts: &[u64], pattern: &SilentPattern) -> bool {
    if pattern.count < 2 {
        return !bursts.is_empty();
    }
    bursts.windows(pattern.count).any(|w| {
        w.windows(2).all(|pair| {
            let gap = pair[1] - pair[0];
            gap.abs_diff(pattern.gap_ms) <= pattern.tolerance_ms
        })
    })
}

/// Searches the downlink log for the RNTI whose activity bursts line up with
/// the silent-message pattern. Bursts must be consecutive: any stray burst
/// between two pattern messages breaks the match for that window.
pub fn acquire_rnti(
    observations: &[DownlinkObservation],
    pattern: &SilentPattern,
) -> AcquisitionOutcome {
    let mut per_rnti: BTreeMap<u16, Vec<u64>> = BTreeMap::new();
    for obs in observations {
        per_rnti.entry(obs.rnti).or_default().push(obs.time_ms);
    }
    let mut matches = Vec::new();
    for (rnti, mut times) in per_rnti {
        times.sort_unstable();
        let bursts = cluster_bursts(&times, pattern.burst_merge_ms);
        if bursts_match(&bursts, pattern) {
            matches.push(rnti);
        }
    }
    match matches.len() {
        0 => AcquisitionOutcome::NotFound,
        1 => AcquisitionOutcome::Ok(matches[0]),
        _ => AcquisitionOutcome::Ambiguous(matches),
    }
}

/// A bearing peak measured with the boost off and on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BearingCandidate {
    pub angle_deg: f64,
    pub unboosted_dbm: f64,
    pub boosted_dbm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disambiguation {
    /// Indices of candidates that track the commanded boost: the device.
    pub genuine: Vec<usize>,
    /// Indices whose level barely moves: constant-output relays.
    pub repeaters: Vec<usize>,
}

/// Power along the true path follows the boost command; a constant-output
/// repeater's does not. A candidate is genuine when its level rises by at
/// least `threshold_db`.
pub fn disambiguate_repeater(candidates: &[BearingCandidate], threshold_db: f64) -> Disambiguation {
    let mut genuine = Vec::new();
    let mut repeaters = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        if c.boosted_dbm - c.unboosted_dbm >= threshold_db {
            genuine.push(i);
        } else {
            repeaters.push(i);
        }
    }
    Disambiguation { genuine, repeaters }
}

/// Default genuine-vs-repeater decision threshold.
pub const DISAMBIGUATION_THRESHOLD_DB: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackPhase {
    Idle,
    /// Sending the silent-message round and watching the downlink.
    Acquiring,
    /// RNTI and SR configuration in hand; the scheduling loop is live.
    Manipulating,
}

#[derive(Debug, Clone)]
pub struct AttackerConfig {
    pub pattern: SilentPattern,
    /// Rounds of silent messages to try before giving up.
    pub max_rounds: usize,
    /// Downlink injection power for overshadowing control messages.
    pub dl_injection_power_dbm: f64,
    /// Uplink spoof power toward the base station.
    pub ul_injection_power_dbm: f64,
    /// One manipulation step per this many subframes.
    pub step_period_ms: u64,
    /// Fabricated backlog reported on hijacked grants.
    pub fake_bsr_bytes: u32,
    /// Frame slot carrying the injected power-boost command.
    pub boost_subframe: u8,
    /// Stealth cap on the share of victim grants the attacker may consume.
    pub duty_fraction: f64,
    pub sched_manip: bool,
    pub power_boost: bool,
}

impl Default for AttackerConfig {
    fn default() -> AttackerConfig {
        AttackerConfig {
            pattern: SilentPattern::default(),
            max_rounds: 3,
            dl_injection_power_dbm: 30.0,
            ul_injection_power_dbm: 10.0,
            step_period_ms: 100,
            fake_bsr_bytes: 200,
            boost_subframe: 9,
            duty_fraction: 0.10,
            sched_manip: true,
            power_boost: true,
        }
    }
}

/// Per-window scheduling-use ledger entry.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DutyWindow {
    /// Uplink subframes the network granted to the victim in this window.
    pub granted: u32,
    /// Of those, subframes the attacker transmitted on.
    pub used: u32,
}

/// Stealth bound: the attacker consumes at most `fraction` of the victim's
/// grants per window, plus one.
pub fn duty_bound(fraction: f64, granted: u32) -> f64 {
    fraction * granted as f64 + 1.0
}

#[derive(Debug)]
pub struct Attacker {
    pub config: AttackerConfig,
    pub entity: EntityId,
    pub position: Position,
    pub phase: AttackPhase,
    pub victim_rnti: Option<u16>,
    pub victim_sr_config: Option<SchedulingRequestConfig>,
    observations: Vec<DownlinkObservation>,
    /// RNTI -> SR resource, harvested from connection setups on the air.
    setup_cache: BTreeMap<u16, SchedulingRequestConfig>,
    messages_sent: usize,
    rounds_done: usize,
    next_message_ms: Option<u64>,
    next_attempt_ms: Option<u64>,
    /// Step windows already holding a forged request.
    last_step_window: Option<u64>,
    /// Hijacked-grant transmissions waiting for their subframe.
    fake_pusch_queue: VecDeque<u64>,
    duty: BTreeMap<u64, DutyWindow>,
    pub acquisition_outcome: Option<AcquisitionOutcome>,
    pub acquired_at_ms: Option<u64>,
    pub forged_sr_count: u64,
    pub fake_pusch_count: u64,
    pub boost_dci_count: u64,
}

impl Attacker {
    pub fn new(config: AttackerConfig, entity: EntityId, position: Position) -> Attacker {
        Attacker {
            config,
            entity,
            position,
            phase: AttackPhase::Idle,
            victim_rnti: None,
            victim_sr_config: None,
            observations: Vec::new(),
            setup_cache: BTreeMap::new(),
            messages_sent: 0,
            rounds_done: 0,
            next_message_ms: None,
            next_attempt_ms: None,
            last_step_window: None,
            fake_pusch_queue: VecDeque::new(),
            duty: BTreeMap::new(),
            acquisition_outcome: None,
            acquired_at_ms: None,
            forged_sr_count: 0,
            fake_pusch_count: 0,
            boost_dci_count: 0,
        }
    }

    /// Starts the silent-message round; acquisition runs from `at`.
    pub fn begin_acquisition(&mut self, at_ms: u64) {
        self.phase = AttackPhase::Acquiring;
        self.messages_sent = 0;
        self.rounds_done = 0;
        self.next_message_ms = Some(at_ms);
        self.next_attempt_ms = None;
    }

    /// Skips acquisition entirely (the RNTI is already known).
    pub fn assume_victim(&mut self, rnti: u16, sr_config: SchedulingRequestConfig) {
        self.victim_rnti = Some(rnti);
        self.victim_sr_config = Some(sr_config);
        self.phase = AttackPhase::Manipulating;
    }

    /// True when a silent app message should enter the network now.
    pub fn poll_silent_message(&mut self, at_ms: u64) -> bool {
        if self.phase != AttackPhase::Acquiring {
            return false;
        }
        match self.next_message_ms {
            Some(due) if at_ms >= due => {
                self.messages_sent += 1;
                if self.messages_sent < self.config.pattern.count {
                    self.next_message_ms = Some(due + self.config.pattern.gap_ms);
                } else {
                    // one settle gap, then start matching
                    self.next_message_ms = None;
                    self.next_attempt_ms = Some(due + 1000);
                    self.rounds_done += 1;
                }
                true
            }
            _ => false,
        }
    }

    /// Records a legitimate downlink transmission caught on the air.
    pub fn observe_downlink(&mut self, tx: &Transmission) {
        let at_ms = tx.time.as_ms();
        match tx.payload {
            Payload::BearerData { rnti, bearer } => {
                self.observations.push(DownlinkObservation { time_ms: at_ms, rnti, bearer });
            }
            Payload::RrcSetup { rnti, sr_config } => {
                self.setup_cache.insert(rnti, sr_config);
            }
            Payload::Dci(dci) => {
                if self.victim_rnti == Some(dci.rnti) && dci.rb_alloc.len > 0 {
                    // k_grant is protocol-fixed, so the slot is predictable
                    self.record_grant(at_ms + 4);
                }
            }
            _ => {}
        }
    }

    /// Looks up the victim's uplink control resource from captured setups.
    pub fn capture_sr_config(&self, rnti: u16) -> Option<SchedulingRequestConfig> {
        self.setup_cache.get(&rnti).copied()
    }

    /// Runs the burst matcher once the round is complete. On a unique match
    /// the attack moves to the manipulation phase; on failure another round
    /// starts, up to the configured limit.
    pub fn try_acquire(&mut self, at_ms: u64) -> Option<AcquisitionOutcome> {
        if self.phase != AttackPhase::Acquiring {
            return None;
        }
        let due = self.next_attempt_ms?;
        if at_ms < due {
            return None;
        }
        let outcome = acquire_rnti(&self.observations, &self.config.pattern);
        self.acquisition_outcome = Some(outcome.clone());
        match outcome {
            AcquisitionOutcome::Ok(rnti) => {
                self.victim_rnti = Some(rnti);
                self.victim_sr_config = self.capture_sr_config(rnti);
                self.acquired_at_ms = Some(at_ms);
                self.phase = AttackPhase::Manipulating;
                self.next_attempt_ms = None;
            }
            _ if self.rounds_done < self.config.max_rounds => {
                self.messages_sent = 0;
                self.next_message_ms = Some(at_ms + self.config.pattern.gap_ms);
                self.next_attempt_ms = None;
            }
            _ => {
                self.phase = AttackPhase::Idle;
                self.next_attempt_ms = None;
            }
        }
        Some(self.acquisition_outcome.clone().expect("just set"))
    }

    fn window_of(&self, at_ms: u64) -> u64 {
        at_ms / self.config.step_period_ms
    }

    /// Notes a network grant to the victim whose uplink slot is `scheduled`.
    pub fn record_grant(&mut self, scheduled_ms: u64) {
        let w = self.window_of(scheduled_ms);
        self.duty.entry(w).or_default().granted += 1;
    }

    /// Asks to transmit on the victim's grant at `scheduled`; refuses when
    /// that would break the stealth bound for the window.
    pub fn try_use_grant(&mut self, scheduled_ms: u64) -> bool {
        let w = self.window_of(scheduled_ms);
        let entry = self.duty.entry(w).or_default();
        if (entry.used + 1) as f64 <= duty_bound(self.config.duty_fraction, entry.granted) {
            entry.used += 1;
            true
        } else {
            false
        }
    }

    pub fn duty_windows(&self) -> &BTreeMap<u64, DutyWindow> {
        &self.duty
    }

    /// One scheduling-manipulation step per period: a forged request on the
    /// victim's dedicated resource, with the hijack slot booked in advance.
    pub fn forged_sr_due(&mut self, at_ms: u64) -> Option<Transmission> {
        if self.phase != AttackPhase::Manipulating || !self.config.sched_manip {
            return None;
        }
        let (rnti, sr_config) = (self.victim_rnti?, self.victim_sr_config?);
        if !sr_config.is_opportunity(at_ms) {
            return None;
        }
        let window = self.window_of(at_ms);
        if self.last_step_window == Some(window) {
            return None;
        }
        self.last_step_window = Some(window);
        self.forged_sr_count += 1;
        // request processed next subframe, grant announced there, k later
        self.fake_pusch_queue.push_back(at_ms + 1 + 4);
        Some(Transmission {
            source: self.entity,
            source_kind: SourceKind::Attacker,
            position: self.position,
            tx_power_dbm: self.config.ul_injection_power_dbm,
            link: LinkDirection::Uplink,
            channel: PhyChannel::Pucch,
            payload: Payload::Sr(SchedulingRequest { rnti, config: sr_config }),
            time: SimTime::from_ms(at_ms),
        })
    }

    /// The hijacked-grant transmission: a plausible data block carrying a
    /// fabricated backlog report, sent over the victim's allocation.
    pub fn fake_pusch_due(&mut self, at_ms: u64) -> Option<Transmission> {
        while self.fake_pusch_queue.front().is_some_and(|&s| s < at_ms) {
            self.fake_pusch_queue.pop_front();
        }
        if self.fake_pusch_queue.front() != Some(&at_ms) {
            return None;
        }
        self.fake_pusch_queue.pop_front();
        let rnti = self.victim_rnti?;
        if !self.try_use_grant(at_ms) {
            return None;
        }
        self.fake_pusch_count += 1;
        let pdu = MacPdu {
            rnti,
            bsr: Some(BsrCe { lcid: 3, buffer_size_bytes: self.config.fake_bsr_bytes }),
            content: PduContent::Data { sdu_bytes: 8 },
            payload_len_bytes: 10,
        };
        Some(Transmission {
            source: self.entity,
            source_kind: SourceKind::Attacker,
            position: self.position,
            tx_power_dbm: self.config.ul_injection_power_dbm,
            link: LinkDirection::Uplink,
            channel: PhyChannel::Pusch,
            payload: Payload::MacPdu(pdu),
            time: SimTime::from_ms(at_ms),
        })
    }

    /// Injected downlink control message: minimum allocation, maximum power
    /// step, once per frame on the configured subframe.
    pub fn boost_dci_due(&mut self, at_ms: u64) -> Option<Transmission> {
        if self.phase != AttackPhase::Manipulating || !self.config.power_boost {
            return None;
        }
        let rnti = self.victim_rnti?;
        if SimTime::from_ms(at_ms).subframe() != self.config.boost_subframe {
            return None;
        }
        self.boost_dci_count += 1;
        let dci = Dci0 {
            rnti,
            rb_alloc: RbAlloc::new(0, 1).expect("one block"),
            tpc: TpcCommand::BOOST,
            flags: 0,
        };
        Some(Transmission {
            source: self.entity,
            source_kind: SourceKind::Attacker,
            position: self.position,
            tx_power_dbm: self.config.dl_injection_power_dbm,
            link: LinkDirection::Downlink,
            channel: PhyChannel::Pdcch,
            payload: Payload::Dci(dci),
            time: SimTime::from_ms(at_ms),
        })
    }
}
