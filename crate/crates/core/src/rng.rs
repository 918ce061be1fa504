//! Counter-based random numbers.
//!
//! Every draw is a pure function of `(seed, stream)`; there is no generator
//! state to thread through parallel code. Uses Philox4x32-10.

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// One Philox4x32 block with 10 rounds.
pub fn philox4x32_10(counter: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut c = counter;
    let mut k = key;
    for round in 0..10 {
        if round > 0 {
            k[0] = k[0].wrapping_add(PHILOX_W0);
            k[1] = k[1].wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, c[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, c[2]);
        c = [hi1 ^ c[1] ^ k[0], lo1, hi0 ^ c[3] ^ k[1], lo0];
    }
    c
}

/// What a draw is used for. Distinct roles never share streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Role {
    Common = 0,
    Idiosyncratic = 1,
    BridgeCommon = 2,
    BridgeIdiosyncratic = 3,
    Initial = 4,
    Cloud = 5,
    Projection = 6,
}

/// Address of one draw: `(role, particle, step, column)` plus a free tag
/// (refinement level, instance number, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub role: Role,
    pub particle: u32,
    pub step: u32,
    pub column: u16,
    pub tag: u32,
}

impl StreamKey {
    pub fn new(role: Role, particle: usize, step: usize, column: usize) -> Self {
        Self {
            role,
            particle: particle as u32,
            step: step as u32,
            column: column as u16,
            tag: 0,
        }
    }

    pub fn with_tag(mut self, tag: u32) -> Self {
        self.tag = tag;
        self
    }

    fn counter(&self) -> [u32; 4] {
        [
            self.step,
            self.particle,
            (self.column as u32) | ((self.role as u32) << 16),
            self.tag,
        ]
    }
}

#[inline]
fn seed_key(seed: u64) -> [u32; 2] {
    [seed as u32, (seed >> 32) as u32]
}

#[inline]
fn to_unit(hi: u32, lo: u32) -> f64 {
    let bits = (((hi as u64) << 32) | lo as u64) >> 11;
    bits as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Two uniforms in `[0, 1)` with 53-bit resolution.
pub fn uniform_pair(seed: u64, key: StreamKey) -> (f64, f64) {
    let r = philox4x32_10(key.counter(), seed_key(seed));
    (to_unit(r[0], r[1]), to_unit(r[2], r[3]))
}

/// Standard normal draw (Box-Muller, cosine branch).
pub fn standard_normal(seed: u64, key: StreamKey) -> f64 {
    let (u0, u1) = uniform_pair(seed, key);
    let radius = (-2.0 * (1.0 - u0).ln()).sqrt();
    radius * (std::f64::consts::TAU * u1).cos()
}

/// Derive the seed for replicate `index` of a study with base seed `base`.
pub fn replicate_seed(base: u64, index: usize) -> u64 {
    base.wrapping_add(index as u64)
}
