//! Deterministic seed derivation.
//!
//! Runs, episodes, and RNG consumers each get independent streams derived
//! from one base seed, so experiments reproduce bit-for-bit while distinct
//! (run, sequence-length) jobs stay decorrelated. SplitMix64 is used as the
//! mixing function: it is stable across platforms and library versions,
//! unlike the std hasher.

/// One round of the SplitMix64 output function.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix extra words into a seed, one at a time.
pub fn mix(base: u64, words: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &w in words {
        s = splitmix64(s ^ w.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    s
}

/// Seed for one training/evaluation run, from the harness base seed.
pub fn run_seed(base_seed: u64, seq_len: usize, run_index: usize) -> u64 {
    mix(base_seed, &[seq_len as u64, run_index as u64])
}

/// Named sub-stream of a run seed (platform sampling, weight init, ...).
pub fn sub_seed(seed: u64, domain: u64) -> u64 {
    mix(seed, &[domain])
}
