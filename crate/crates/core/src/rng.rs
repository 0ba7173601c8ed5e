//! Splittable deterministic randomness.
//!
//! Every random draw in the crate comes from a [`Rng`], a ChaCha8 stream
//! cipher used as a counter-based generator. A generator is identified by a
//! 64-bit key seed and a 64-bit stream id; [`Rng::split`] derives an
//! independent child without consuming anything from the parent, so the
//! value produced for scene 17 does not depend on how many scenes were
//! generated before it or on which thread generated it.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALGORITHM: &str = "ChaCha8";

#[derive(Clone, Debug)]
pub struct Rng {
    key_seed: u64,
    stream: u64,
    core: ChaCha8Rng,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a, used to turn domain labels into stream ids.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::keyed(seed, 0)
    }

    fn keyed(key_seed: u64, stream: u64) -> Self {
        let mut core = ChaCha8Rng::seed_from_u64(key_seed);
        core.set_stream(stream);
        Rng {
            key_seed,
            stream,
            core,
        }
    }

    /// Child generator number `index`. Independent of the parent's position.
    pub fn split(&self, index: u64) -> Self {
        let key = mix(self.key_seed ^ mix(self.stream.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        Self::keyed(key, index)
    }

    /// Child generator for a named purpose, e.g. `"label-noise"`.
    pub fn named(&self, label: &str) -> Self {
        self.split(label_hash(label))
    }

    pub fn key_seed(&self) -> u64 {
        self.key_seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.core.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.core.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.core.fill_bytes(dst)
    }
}
