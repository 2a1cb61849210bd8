//! Deterministic subframe-level simulator of an LTE uplink localization
//! pipeline: a base station with closed-loop power control, standard victim
//! terminals, an overshadowing attacker, constant-output repeaters, and
//! sweeping direction-finding sniffers.

pub mod attacker;
pub mod calib;
pub mod channel;
pub mod codec;
pub mod enb;
pub mod localizer;
pub mod scenario;
pub mod sim;
pub mod ue;
pub mod world;
