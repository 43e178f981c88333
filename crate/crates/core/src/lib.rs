//! Hierarchical VWAP execution over level-2 market replay.
//!
//! A parent order is split across eight half-hour tranches by a volume
//! profile forecast ([`macro_trader`]), each tranche is carved into
//! mini-tranches by a subgoal-selecting agent ([`meta_trader`]), and each
//! mini-tranche is worked one lot at a time by an execution agent
//! ([`micro_trader`]) against a queue-position replay simulator
//! ([`exchange`]).

pub mod baselines;
pub mod exchange;
pub mod harness;
pub mod hmdp;
pub mod kv;
pub mod lob_data;
pub mod macro_trader;
pub mod meta_trader;
pub mod micro_trader;
pub mod rl;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// RNG for an independent stream of a master seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed for stream `stream` of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    seeded_rng(seed, stream.wrapping_add(1)).next_u64()
}
