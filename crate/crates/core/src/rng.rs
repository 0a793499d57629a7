// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seed derivation. Every random stream in the lab comes from one master seed:
//! a phase or shard label is hashed (FNV-1a) and mixed with the master seed
//! through SplitMix64, and the result seeds a ChaCha8 generator.

use rand::SeedableRng;

pub type LabRng = rand_chacha::ChaCha8Rng;

/// One step of the SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for the stream named `label` under `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ splitmix64(fnv1a(label)))
}

pub fn rng_for(master: u64, label: &str) -> LabRng {
    LabRng::seed_from_u64(derive_seed(master, label))
}
