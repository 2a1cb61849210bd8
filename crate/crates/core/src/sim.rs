//! Simulation clock, seeded RNG streams, and planar geometry primitives.
//!
//! The simulator is subframe-synchronous: one tick is one 1 ms subframe, ten
//! subframes make a radio frame. Everything that needs randomness draws from a
//! named stream so that runs are reproducible and components cannot perturb
//! each other's sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Number of 1 ms subframes per radio frame.
pub const SUBFRAMES_PER_FRAME: u64 = 10;

/// Subframe-granular timestamp. One subframe is 1 ms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime {
    frame: u64,
    subframe: u8,
}

impl SimTime {
    pub const ZERO: SimTime = SimTime { frame: 0, subframe: 0 };

    pub fn new(frame: u64, subframe: u8) -> SimTime {
        assert!(
            (subframe as u64) < SUBFRAMES_PER_FRAME,
            "subframe {subframe} out of range"
        );
        SimTime { frame, subframe }
    }

    pub fn from_ms(ms: u64) -> SimTime {
        SimTime {
            frame: ms / SUBFRAMES_PER_FRAME,
            subframe: (ms % SUBFRAMES_PER_FRAME) as u8,
        }
    }

    pub fn as_ms(self) -> u64 {
        self.frame * SUBFRAMES_PER_FRAME + self.subframe as u64
    }

    pub fn frame(self) -> u64 {
        self.frame
    }

    pub fn subframe(self) -> u8 {
        self.subframe
    }

    /// Next subframe, carrying into the next frame after subframe 9.
    pub fn next(self) -> SimTime {
        SimTime::from_ms(self.as_ms() + 1)
    }

    pub fn plus_ms(self, ms: u64) -> SimTime {
        SimTime::from_ms(self.as_ms() + ms)
    }
}

impl std::fmt::Display for SimTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.frame, self.subframe)
    }
}

/// Index of an entity inside a run's registry. Assigned once at world build
/// time from the (role, id) sort order, so configs that list entities in a
/// different order still produce identical runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntityId(pub u32);

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Position {
        Position { x, y }
    }

    pub fn distance_to(self, other: Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Bearing from `self` to `other`, degrees counterclockwise from +x,
    /// normalized to [0, 360).
    pub fn bearing_deg_to(self, other: Position) -> f64 {
        (other.y - self.y)
            .atan2(other.x - self.x)
            .to_degrees()
            .rem_euclid(360.0)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Position {
    fn from(v: [f64; 2]) -> Position {
        Position { x: v[0], y: v[1] }
    }
}

impl From<Position> for [f64; 2] {
    fn from(p: Position) -> [f64; 2] {
        [p.x, p.y]
    }
}

/// Factory for named, independent, reproducible random streams.
///
/// The same (seed, label) pair always yields the same stream; distinct labels
/// select distinct ChaCha stream counters, so adding a consumer never shifts
/// the draws seen by existing ones.
#[derive(Debug, Clone)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> RngStreams {
        RngStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, label: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a_64(label.as_bytes()));
        rng
    }
}

// Stable across platforms and releases, unlike the std hasher.
fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Box-Muller Gaussian draw.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    mean + sd * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Inverse-CDF exponential draw with the given mean.
pub fn exponential<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    -mean * u.ln()
}
