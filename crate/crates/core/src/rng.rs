//! Deterministic random streams.
//!
//! A master seed keys a ChaCha8 generator; every independent unit of work
//! (tomography setting, readout pass, Monte Carlo segment, bootstrap resample)
//! gets its own stream id derived from a domain tag and up to two indices.
//! Results therefore do not depend on how units are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Domain tags keep stream ids from different pipelines disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Tomography = 1,
    Readout = 2,
    MonteCarlo = 3,
    Bootstrap = 4,
    Emission = 5,
    Misc = 15,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream id for `(domain, a, b)`; a pure function of its inputs.
pub fn stream_id(domain: Domain, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(domain as u64) ^ a) ^ b.rotate_left(17))
}

/// Generator for one unit of work.
pub fn substream(master_seed: u64, domain: Domain, a: u64, b: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream_id(domain, a, b));
    rng
}
