//! Counter-based deterministic noise streams.
//!
//! Every random draw is a pure function of (stream key, draw index), so
//! results cannot depend on execution order or thread scheduling. Streams are
//! keyed by (seed, domain, window index, timestep); disjoint keys give
//! independent streams, which is what lets windows sample in parallel while
//! staying bitwise reproducible.
//!
//! The generator is the splitmix64 finalizer applied to `key + (i+1)*GAMMA`
//! — no state to advance, just a counter. Normals come from Box-Muller using
//! two raw draws each (the sine branch is discarded to keep one normal per
//! counter pair; no cached state).

use crate::grid::ImageGrid;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Domain tags keep streams for different purposes disjoint even when the
/// (seed, window, t) triple collides.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    /// The single panorama-wide z_T draw at the start of a run.
    PanoramaInit,
    /// Per-window, per-timestep sampler noise.
    Sample,
    /// Training loop draws (batch indices, timesteps, forward noise).
    Train,
    /// Model weight initialization.
    ModelInit,
    /// Filter-bank kernel initialization.
    FilterBank,
    /// Texture dataset generation.
    Texture,
    /// Random pair selection in reference baselines.
    Pairs,
}

impl StreamDomain {
    fn tag(self) -> u64 {
        match self {
            StreamDomain::PanoramaInit => 0x01,
            StreamDomain::Sample => 0x02,
            StreamDomain::Train => 0x03,
            StreamDomain::ModelInit => 0x04,
            StreamDomain::FilterBank => 0x05,
            StreamDomain::Texture => 0x06,
            StreamDomain::Pairs => 0x07,
        }
    }
}

/// splitmix64 output finalizer: bijective avalanche mix of a 64-bit word.
#[inline]
fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

#[derive(Debug, Clone)]
pub struct NoiseStream {
    key: u64,
    /// Number of raw u64 draws consumed so far.
    counter: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, domain: StreamDomain, window: u32, t: u32) -> Self {
        // Chain the fields through the mixer so that no two (seed, domain,
        // window, t) tuples share a key by construction of simple xors.
        let k = mix(seed ^ 0x5359_4E43_4449_4646); // "SYNCDIFF" in ASCII
        let k = mix(k ^ domain.tag());
        let k = mix(k ^ (((window as u64) << 32) | t as u64));
        NoiseStream { key: k, counter: 0 }
    }

    /// Raw draws consumed so far. Deterministic samplers assert this does
    /// not move.
    pub fn position(&self) -> u64 {
        self.counter
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let i = self.counter;
        self.counter += 1;
        mix(self.key.wrapping_add((i.wrapping_add(1)).wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1), 53-bit resolution.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // Fixed-point multiply keeps the draw count at exactly one u64.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_uniform()
    }

    /// Standard normal via Box-Muller; consumes exactly two raw draws.
    pub fn next_normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Grid of iid standard normals, filled in storage order.
    pub fn normal_grid(&mut self, h: usize, w: usize, d: usize) -> ImageGrid {
        let mut g = ImageGrid::zeros(h, w, d);
        for v in g.data_mut() {
            *v = self.next_normal();
        }
        g
    }
}
