//! Seed derivation so that independent random streams (per layer, per weight)
//! are reproducible functions of one config seed plus a stable label.

/// FNV-1a hash of a label, used to give each named stream its own offset.
fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in label.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer; decorrelates nearby seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a label such as a weight name.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    splitmix64(base ^ fnv1a(label))
}

/// Formats a float with 17 significant digits so CSV values round-trip
/// exactly through `f64::from_str`.
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}
