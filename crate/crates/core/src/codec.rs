//! Bit-exact codecs for the control messages carried on the modeled air
//! interface: uplink grants (DCI format 0), scheduling requests, and buffer
//! status report MAC control elements.
//!
//! Bit strings are most-significant-bit-first; `BitString::to_bin_string`
//! renders the on-air format used by the golden-file tests.

use std::fmt;
use std::sync::OnceLock;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("{field} value {value} out of range (max {max})")]
    FieldRange {
        field: &'static str,
        value: u32,
        max: u32,
    },
    #[error("bit string has {got} bits, expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("invalid scheduling-request periodicity code {0}")]
    SrPeriodicity(u32),
}

// ---------------------------------------------------------------------------
// Bit string plumbing
// ---------------------------------------------------------------------------

/// MSB-first bit string.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct BitString {
    len: usize,
    bytes: Vec<u8>,
}

impl BitString {
    pub fn new() -> BitString {
        BitString::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends the low `width` bits of `value`, most significant first.
    pub fn push_bits(&mut self, value: u32, width: usize) {
        assert!(width <= 32);
        for i in (0..width).rev() {
            self.push_bit((value >> i) & 1 == 1);
        }
    }

    pub fn push_bit(&mut self, bit: bool) {
        let byte = self.len / 8;
        if byte == self.bytes.len() {
            self.bytes.push(0);
        }
        if bit {
            self.bytes[byte] |= 0x80 >> (self.len % 8);
        }
        self.len += 1;
    }

    pub fn bit(&self, idx: usize) -> bool {
        assert!(idx < self.len);
        self.bytes[idx / 8] & (0x80 >> (idx % 8)) != 0
    }

    pub fn to_bin_string(&self) -> String {
        (0..self.len).map(|i| if self.bit(i) { '1' } else { '0' }).collect()
    }

    pub fn from_bin_string(s: &str) -> Option<BitString> {
        let mut out = BitString::new();
        for c in s.chars() {
            match c {
                '0' => out.push_bit(false),
                '1' => out.push_bit(true),
                _ => return None,
            }
        }
        Some(out)
    }

    /// Copy of the first `len` bits; handy for truncation tests.
    pub fn truncated(&self, len: usize) -> BitString {
        let mut out = BitString::new();
        for i in 0..len.min(self.len) {
            out.push_bit(self.bit(i));
        }
        out
    }
}

impl fmt::Debug for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitString({})", self.to_bin_string())
    }
}

struct BitReader<'a> {
    bits: &'a BitString,
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bits: &'a BitString) -> BitReader<'a> {
        BitReader { bits, pos: 0 }
    }

    fn read(&mut self, width: usize) -> Result<u32, CodecError> {
        if self.pos + width > self.bits.len() {
            return Err(CodecError::Length {
                got: self.bits.len(),
                expected: self.pos + width,
            });
        }
        let mut v = 0u32;
        for _ in 0..width {
            v = (v << 1) | self.bits.bit(self.pos) as u32;
            self.pos += 1;
        }
        Ok(v)
    }
}

// ---------------------------------------------------------------------------
// TPC commands
// ---------------------------------------------------------------------------

/// Two-bit transmit power control command as carried in DCI format 0.
/// The dB step each code maps to lives with the UE power control logic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TpcCommand(u8);

impl TpcCommand {
    pub const DOWN: TpcCommand = TpcCommand(0); // -1 dB
    pub const HOLD: TpcCommand = TpcCommand(1); //  0 dB
    pub const UP: TpcCommand = TpcCommand(2); // +1 dB
    pub const BOOST: TpcCommand = TpcCommand(3); // +3 dB

    pub fn new(v: u8) -> Result<TpcCommand, CodecError> {
        if v > 3 {
            return Err(CodecError::FieldRange { field: "tpc", value: v as u32, max: 3 });
        }
        Ok(TpcCommand(v))
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn all() -> [TpcCommand; 4] {
        [Self::DOWN, Self::HOLD, Self::UP, Self::BOOST]
    }
}

// ---------------------------------------------------------------------------
// DCI format 0
// ---------------------------------------------------------------------------

/// Cell bandwidth in resource blocks (10 MHz carrier).
pub const MAX_RBS: u8 = 50;

/// Contiguous uplink resource-block allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RbAlloc {
    pub start: u8,
    pub len: u8,
}

impl RbAlloc {
    pub fn new(start: u8, len: u8) -> Result<RbAlloc, CodecError> {
        if start >= MAX_RBS {
            return Err(CodecError::FieldRange { field: "rb_start", value: start as u32, max: MAX_RBS as u32 - 1 });
        }
        if len == 0 || start as u32 + len as u32 > MAX_RBS as u32 {
            return Err(CodecError::FieldRange { field: "rb_len", value: len as u32, max: (MAX_RBS - start) as u32 });
        }
        Ok(RbAlloc { start, len })
    }
}

/// Uplink grant + power control message.
///
/// 37-bit payload, MSB first: `[rnti:16][rb_start:7][rb_len:6][tpc:2][flags:6]`.
/// A real format 0 ties the RNTI to the CRC scrambling; here it is an explicit
/// field so the budget stays honest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dci0 {
    pub rnti: u16,
    pub rb_alloc: RbAlloc,
    pub tpc: TpcCommand,
    /// Hopping / CQI-request style odds and ends; zero unless a test sets them.
    pub flags: u8,
}

pub const DCI0_BITS: usize = 37;
/// Bit offset of the TPC field inside the encoded message.
pub const DCI0_TPC_OFFSET: usize = 16 + 7 + 6;

pub fn encode_dci0(d: &Dci0) -> Result<BitString, CodecError> {
    // RbAlloc::new enforces the RB invariants; re-check in case of direct
    // struct construction.
    RbAlloc::new(d.rb_alloc.start, d.rb_alloc.len)?;
    if d.flags > 0x3f {
        return Err(CodecError::FieldRange { field: "flags", value: d.flags as u32, max: 0x3f });
    }
    let mut bits = BitString::new();
    bits.push_bits(d.rnti as u32, 16);
    bits.push_bits(d.rb_alloc.start as u32, 7);
    bits.push_bits(d.rb_alloc.len as u32, 6);
    bits.push_bits(d.tpc.value() as u32, 2);
    bits.push_bits(d.flags as u32, 6);
    debug_assert_eq!(bits.len(), DCI0_BITS);
    Ok(bits)
}

/// Inverse of [`encode_dci0`] on encoder outputs. Tolerates field values the
/// encoder would reject (e.g. an all-zero message decodes to a zero-length
/// allocation) so that arbitrary on-air bits can still be inspected.
pub fn decode_dci0(bits: &BitString) -> Result<Dci0, CodecError> {
    if bits.len() != DCI0_BITS {
        return Err(CodecError::Length { got: bits.len(), expected: DCI0_BITS });
    }
    let mut r = BitReader::new(bits);
    let rnti = r.read(16)? as u16;
    let start = r.read(7)? as u8;
    let len = r.read(6)? as u8;
    let tpc = TpcCommand::new(r.read(2)? as u8).expect("2-bit field");
    let flags = r.read(6)? as u8;
    Ok(Dci0 { rnti, rb_alloc: RbAlloc { start, len }, tpc, flags })
}

// ---------------------------------------------------------------------------
// Scheduling requests
// ---------------------------------------------------------------------------

/// Permitted SR periodicities in subframes.
pub const SR_PERIODS_MS: [u16; 5] = [5, 10, 20, 40, 80];

/// Dedicated PUCCH scheduling-request resource: which resource index a UE
/// signals on and how often the opportunity recurs. The subframe phase is
/// derived from the resource index, mirroring how the config index pins both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulingRequestConfig {
    pub resource_index: u16,
    pub periodicity_ms: u16,
}

pub const MAX_SR_RESOURCE: u16 = 2047;

impl SchedulingRequestConfig {
    pub fn new(resource_index: u16, periodicity_ms: u16) -> Result<SchedulingRequestConfig, CodecError> {
        if resource_index > MAX_SR_RESOURCE {
            return Err(CodecError::FieldRange {
                field: "sr_resource_index",
                value: resource_index as u32,
                max: MAX_SR_RESOURCE as u32,
            });
        }
        if !SR_PERIODS_MS.contains(&periodicity_ms) {
            return Err(CodecError::SrPeriodicity(periodicity_ms as u32));
        }
        Ok(SchedulingRequestConfig { resource_index, periodicity_ms })
    }

    pub fn subframe_offset(&self) -> u64 {
        (self.resource_index % self.periodicity_ms) as u64
    }

    /// True when the absolute subframe `ms` is one of this config's SR
    /// opportunities.
    pub fn is_opportunity(&self, ms: u64) -> bool {
        ms % self.periodicity_ms as u64 == self.subframe_offset()
    }

    /// First opportunity at or after `ms`.
    pub fn next_opportunity(&self, ms: u64) -> u64 {
        let p = self.periodicity_ms as u64;
        let off = self.subframe_offset();
        if ms % p <= off {
            ms - ms % p + off
        } else {
            ms - ms % p + p + off
        }
    }
}

/// One-bit scheduling request as observed on the air: presence on a dedicated
/// PUCCH resource, attributable to the RNTI that owns the resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulingRequest {
    pub rnti: u16,
    pub config: SchedulingRequestConfig,
}

pub const SR_BITS: usize = 30;

pub fn encode_sr(sr: &SchedulingRequest) -> Result<BitString, CodecError> {
    SchedulingRequestConfig::new(sr.config.resource_index, sr.config.periodicity_ms)?;
    let code = SR_PERIODS_MS
        .iter()
        .position(|&p| p == sr.config.periodicity_ms)
        .expect("validated") as u32;
    let mut bits = BitString::new();
    bits.push_bits(sr.rnti as u32, 16);
    bits.push_bits(sr.config.resource_index as u32, 11);
    bits.push_bits(code, 3);
    debug_assert_eq!(bits.len(), SR_BITS);
    Ok(bits)
}

pub fn decode_sr(bits: &BitString) -> Result<SchedulingRequest, CodecError> {
    if bits.len() != SR_BITS {
        return Err(CodecError::Length { got: bits.len(), expected: SR_BITS });
    }
    let mut r = BitReader::new(bits);
    let rnti = r.read(16)? as u16;
    let resource_index = r.read(11)? as u16;
    let code = r.read(3)?;
    let periodicity_ms = *SR_PERIODS_MS
        .get(code as usize)
        .ok_or(CodecError::SrPeriodicity(code))?;
    Ok(SchedulingRequest {
        rnti,
        config: SchedulingRequestConfig { resource_index, periodicity_ms },
    })
}

// ---------------------------------------------------------------------------
// Buffer status reports
// ---------------------------------------------------------------------------

/// Logical channel ID that carries ordinary data bearers.
pub const LCID_DATA: u8 = 3;
pub const MAX_LCID: u8 = 10;

pub const BSR_LEVEL_COUNT: usize = 64;
pub const MAX_BSR_BYTES: u32 = 150_000;

/// Lower bounds of the 64 exponentially spaced BSR size levels, in bytes.
/// Level 0 means an empty buffer; level 63 saturates at 150 kB.
pub fn bsr_levels() -> &'static [u32; BSR_LEVEL_COUNT] {
    static LEVELS: OnceLock<[u32; BSR_LEVEL_COUNT]> = OnceLock::new();
    LEVELS.get_or_init(|| {
        let mut t = [0u32; BSR_LEVEL_COUNT];
        // levels 1..=63 span [10, 150000] geometrically
        let lo = 10.0f64;
        let hi = MAX_BSR_BYTES as f64;
        for (k, slot) in t.iter_mut().enumerate().skip(1) {
            let frac = (k - 1) as f64 / (BSR_LEVEL_COUNT - 2) as f64;
            *slot = (lo * (hi / lo).powf(frac)).ceil() as u32;
        }
        t[BSR_LEVEL_COUNT - 1] = MAX_BSR_BYTES;
        t
    })
}

/// Largest level whose lower bound does not exceed `bytes`.
pub fn bsr_index(bytes: u32) -> u8 {
    let levels = bsr_levels();
    (levels.partition_point(|&lo| lo <= bytes) - 1) as u8
}

/// Buffer status MAC control element.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BsrCe {
    pub lcid: u8,
    pub buffer_size_bytes: u32,
}

pub const BSR_BITS: usize = 10;

/// Encodes as `[lcid:4][level:6]`; the buffer size is quantized to its level.
pub fn encode_bsr(bsr: &BsrCe) -> Result<BitString, CodecError> {
    if bsr.lcid > MAX_LCID {
        return Err(CodecError::FieldRange { field: "lcid", value: bsr.lcid as u32, max: MAX_LCID as u32 });
    }
    let mut bits = BitString::new();
    bits.push_bits(bsr.lcid as u32, 4);
    bits.push_bits(bsr_index(bsr.buffer_size_bytes) as u32, 6);
    debug_assert_eq!(bits.len(), BSR_BITS);
    Ok(bits)
}

/// Decodes to the level's lower bound, i.e. a value never above what the
/// sender reported.
pub fn decode_bsr(bits: &BitString) -> Result<BsrCe, CodecError> {
    if bits.len() != BSR_BITS {
        return Err(CodecError::Length { got: bits.len(), expected: BSR_BITS });
    }
    let mut r = BitReader::new(bits);
    let lcid = r.read(4)? as u8;
    if lcid > MAX_LCID {
        return Err(CodecError::FieldRange { field: "lcid", value: lcid as u32, max: MAX_LCID as u32 });
    }
    let level = r.read(6)? as usize;
    Ok(BsrCe { lcid, buffer_size_bytes: bsr_levels()[level] })
}

// ---------------------------------------------------------------------------
// MAC PDUs
// ---------------------------------------------------------------------------

/// What a transport block carries besides its optional BSR.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PduContent {
    /// Real upper-layer bytes.
    Data { sdu_bytes: u32 },
    /// Filler only; a padded block never carries an SDU.
    Padding,
}

/// Uplink transport block at the granularity the simulator cares about.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacPdu {
    pub rnti: u16,
    pub bsr: Option<BsrCe>,
    pub content: PduContent,
    /// Size of the block as granted, data and filler included.
    pub payload_len_bytes: u32,
}

impl MacPdu {
    pub fn is_padding(&self) -> bool {
        matches!(self.content, PduContent::Padding)
    }

    pub fn sdu_bytes(&self) -> u32 {
        match self.content {
            PduContent::Data { sdu_bytes } => sdu_bytes,
            PduContent::Padding => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bit_push_and_read() {
        let mut b = BitString::new();
        b.push_bits(0b1011, 4);
        b.push_bits(0b0, 1);
        b.push_bits(0b110, 3);
        assert_eq!(b.to_bin_string(), "10110110");
        assert_eq!(BitString::from_bin_string("10110110").unwrap(), b);
        assert!(BitString::from_bin_string("10x").is_none());
    }

    #[test]
    fn dci0_round_trip_and_length() {
        let d = Dci0 {
            rnti: 0xC5A1,
            rb_alloc: RbAlloc::new(7, 3).unwrap(),
            tpc: TpcCommand::BOOST,
            flags: 0,
        };
        let bits = encode_dci0(&d).unwrap();
        assert_eq!(bits.len(), DCI0_BITS);
        assert_eq!(decode_dci0(&bits).unwrap(), d);
    }

    #[test]
    fn dci0_budget_at_max_allocation() {
        // widest expressible allocation still fits the 37-bit budget
        let d = Dci0 {
            rnti: 0xFFFF,
            rb_alloc: RbAlloc::new(0, MAX_RBS).unwrap(),
            tpc: TpcCommand::BOOST,
            flags: 0x3f,
        };
        let bits = encode_dci0(&d).unwrap();
        assert!(bits.len() <= 37);
        assert_eq!(decode_dci0(&bits).unwrap(), d);
    }

    #[test]
    fn tpc_occupies_its_two_bits() {
        // tpc=3 with everything else zeroed: exactly the two bits at the TPC
        // offset are set
        let d = Dci0 {
            rnti: 0,
            rb_alloc: RbAlloc { start: 0, len: 0 },
            tpc: TpcCommand::BOOST,
            flags: 0,
        };
        // bypass the len>=1 encoder check via direct field layout: encode with
        // len 1 and clear the bit afterwards is uglier than just checking a
        // valid message, so verify offsets on a valid one instead.
        let d = Dci0 { rb_alloc: RbAlloc::new(0, 1).unwrap(), ..d };
        let bits = encode_dci0(&d).unwrap();
        for i in 0..DCI0_BITS {
            let expect = i == DCI0_TPC_OFFSET
                || i == DCI0_TPC_OFFSET + 1
                || i == 28; // lowest bit of rb_len = 1
            assert_eq!(bits.bit(i), expect, "bit {i}");
        }
    }

    #[test]
    fn dci0_all_zero_decodes_with_tpc_zero() {
        let zeros = BitString::from_bin_string(&"0".repeat(DCI0_BITS)).unwrap();
        let d = decode_dci0(&zeros).unwrap();
        assert_eq!(d.tpc, TpcCommand::DOWN);
        assert_eq!(d.rnti, 0);
        assert_eq!(d.rb_alloc.len, 0);
    }

    #[test]
    fn dci0_truncated_rejected() {
        let d = Dci0 {
            rnti: 1,
            rb_alloc: RbAlloc::new(0, 1).unwrap(),
            tpc: TpcCommand::HOLD,
            flags: 0,
        };
        let bits = encode_dci0(&d).unwrap();
        let err = decode_dci0(&bits.truncated(36)).unwrap_err();
        assert!(matches!(err, CodecError::Length { got: 36, .. }));
    }

    #[test]
    fn rb_alloc_bounds() {
        assert!(RbAlloc::new(0, MAX_RBS).is_ok());
        assert!(RbAlloc::new(0, 0).is_err());
        assert!(RbAlloc::new(MAX_RBS, 1).is_err());
        assert!(RbAlloc::new(48, 3).is_err());
    }

    #[test]
    fn sr_round_trip() {
        let sr = SchedulingRequest {
            rnti: 0x1234,
            config: SchedulingRequestConfig::new(137, 10).unwrap(),
        };
        let bits = encode_sr(&sr).unwrap();
        assert_eq!(bits.len(), SR_BITS);
        assert_eq!(decode_sr(&bits).unwrap(), sr);
    }

    #[test]
    fn sr_opportunity_phase() {
        let cfg = SchedulingRequestConfig::new(137, 10).unwrap();
        assert_eq!(cfg.subframe_offset(), 7);
        assert!(cfg.is_opportunity(7));
        assert!(cfg.is_opportunity(1237));
        assert!(!cfg.is_opportunity(1236));
        assert_eq!(cfg.next_opportunity(0), 7);
        assert_eq!(cfg.next_opportunity(7), 7);
        assert_eq!(cfg.next_opportunity(8), 17);
    }

    #[test]
    fn sr_config_validation() {
        assert!(SchedulingRequestConfig::new(2048, 10).is_err());
        assert!(SchedulingRequestConfig::new(0, 15).is_err());
        for p in SR_PERIODS_MS {
            assert!(SchedulingRequestConfig::new(0, p).is_ok());
        }
    }

    #[test]
    fn bsr_levels_monotone_and_bounded() {
        let levels = bsr_levels();
        assert_eq!(levels[0], 0);
        assert_eq!(levels[BSR_LEVEL_COUNT - 1], MAX_BSR_BYTES);
        for k in 1..BSR_LEVEL_COUNT {
            assert!(levels[k] > levels[k - 1], "level {k} not increasing");
        }
    }

    #[test]
    fn bsr_quantization_cases() {
        // oracle: linear scan for the largest lower bound <= value
        let scan = |bytes: u32| -> u8 {
            let mut best = 0;
            for (k, &lo) in bsr_levels().iter().enumerate() {
                if lo <= bytes {
                    best = k as u8;
                }
            }
            best
        };

        assert_eq!(bsr_index(0), 0);
        let ce = BsrCe { lcid: LCID_DATA, buffer_size_bytes: 0 };
        assert_eq!(decode_bsr(&encode_bsr(&ce).unwrap()).unwrap().buffer_size_bytes, 0);

        // a 200-byte buffer lands on a level whose lower bound is <= 200
        let k = scan(200);
        assert_eq!(bsr_index(200), k);
        let ce = BsrCe { lcid: LCID_DATA, buffer_size_bytes: 200 };
        let dec = decode_bsr(&encode_bsr(&ce).unwrap()).unwrap();
        assert_eq!(dec.buffer_size_bytes, bsr_levels()[k as usize]);
        assert!(dec.buffer_size_bytes <= 200);
        assert!(dec.buffer_size_bytes > 150, "level too coarse: {}", dec.buffer_size_bytes);

        // anything above the table max saturates at the top level
        let ce = BsrCe { lcid: LCID_DATA, buffer_size_bytes: 3_000_000 };
        let dec = decode_bsr(&encode_bsr(&ce).unwrap()).unwrap();
        assert_eq!(dec.buffer_size_bytes, MAX_BSR_BYTES);
        assert_eq!(bsr_index(3_000_000), (BSR_LEVEL_COUNT - 1) as u8);
    }

    #[test]
    fn bsr_lcid_range() {
        let ce = BsrCe { lcid: 11, buffer_size_bytes: 10 };
        assert!(encode_bsr(&ce).is_err());
    }

    proptest! {
        #[test]
        fn dci0_round_trip_prop(rnti: u16, start in 0u8..MAX_RBS, len_seed in 1u8..=MAX_RBS, tpc in 0u8..4, flags in 0u8..0x40) {
            let len = len_seed.min(MAX_RBS - start);
            let d = Dci0 {
                rnti,
                rb_alloc: RbAlloc::new(start, len).unwrap(),
                tpc: TpcCommand::new(tpc).unwrap(),
                flags,
            };
            let bits = encode_dci0(&d).unwrap();
            prop_assert!(bits.len() <= 37);
            prop_assert_eq!(decode_dci0(&bits).unwrap(), d);
        }

        #[test]
        fn sr_round_trip_prop(rnti: u16, res in 0u16..=MAX_SR_RESOURCE, pi in 0usize..SR_PERIODS_MS.len()) {
            let sr = SchedulingRequest {
                rnti,
                config: SchedulingRequestConfig::new(res, SR_PERIODS_MS[pi]).unwrap(),
            };
            prop_assert_eq!(decode_sr(&encode_sr(&sr).unwrap()).unwrap(), sr);
        }

        #[test]
        fn bsr_quantization_monotone(a: u32, b: u32) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(bsr_index(lo) <= bsr_index(hi));
            // decoded lower bound never exceeds the true value
            prop_assert!(bsr_levels()[bsr_index(lo) as usize] <= lo.max(0));
        }
    }
}
