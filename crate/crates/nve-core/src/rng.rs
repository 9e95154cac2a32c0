//! Counter-based deterministic generator for weight initialization.
//!
//! Every weight element is addressable as `hash(seed, layer, slot, index)`
//! without sequential draws, so identical specs produce bit-identical
//! weights on any platform and slots can be generated in any order.

/// SplitMix64 finalizer; good avalanche, cheap, stable.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic u64 for a (seed, layer, slot, index) address.
pub fn counter_u64(seed: u64, layer: u64, slot: u64, index: u64) -> u64 {
    let mut h = mix64(seed ^ 0x4e56_4531); // "NVE1" tag keeps seed 0 nontrivial
    h = mix64(h ^ layer.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    h = mix64(h ^ slot.wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    mix64(h ^ index)
}

/// Uniform f64 in [0, 1) from a counter address.
pub fn counter_unit_f64(seed: u64, layer: u64, slot: u64, index: u64) -> f64 {
    // 53 mantissa bits.
    (counter_u64(seed, layer, slot, index) >> 11) as f64 / (1u64 << 53) as f64
}

/// Uniform f32 in [-bound, +bound) from a counter address.
pub fn counter_uniform_f32(seed: u64, layer: u64, slot: u64, index: u64, bound: f32) -> f32 {
    let u = counter_unit_f64(seed, layer, slot, index);
    ((2.0 * u - 1.0) as f32) * bound
}
