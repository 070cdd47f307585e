//! Derivation of independent RNG seeds from a base seed and a label.

/// SplitMix64 finalizer.
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed for the sub-stream `label` of `base`. Stable across platforms and
/// releases (FNV-1a over the label, then SplitMix64).
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(base ^ mix(h))
}

/// Seed for the `index`-th member of a family of streams.
pub fn derive_indexed(base: u64, label: &str, index: u64) -> u64 {
    mix(derive_seed(base, label) ^ mix(index.wrapping_add(1)))
}
