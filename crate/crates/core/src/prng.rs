//! Deterministic counter-based PRNG for weight initialization and synthetic
//! data.
//!
//! The generator is fixed and fully specified so that banks and encoders
//! built from the same seed are byte-identical on every platform:
//!
//! * draw `i` of seed `s` is `mix(s + (i+1) * 0x9E3779B97F4A7C15)` where
//!   `mix` is the SplitMix64 finalizer
//!   (`z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
//!   z *= 0x94D049BB133111EB; z ^= z >> 31`), all wrapping;
//! * uniforms map the top 53 bits to `[0, 1)`: `(x >> 11) as f64 * 2^-53`;
//! * gaussians are the sum of 12 consecutive uniforms minus 6 (variance
//!   exactly 1), which uses only IEEE add/sub and is therefore bit-exact
//!   across platforms, unlike Box-Muller's libm calls.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const STEP: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Counter-based deterministic random number generator.
#[derive(Debug, Clone)]
pub struct Prng {
    seed: u64,
    counter: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(STEP)))
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_f32(&mut self) -> f32 {
        self.uniform_f64() as f32
    }

    /// Standard-normal draw: sum of 12 uniforms minus 6 (Irwin-Hall).
    pub fn gaussian_f64(&mut self) -> f64 {
        let mut acc = 0.0f64;
        for _ in 0..12 {
            acc += self.uniform_f64();
        }
        acc - 6.0
    }
}

/// Tensor of i.i.d. `N(0, std^2)` samples, deterministic given the PRNG
/// state. Consumes 12 counter positions per element.
pub fn init_gaussian(shape: Vec<usize>, prng: &mut Prng, std: f32) -> Result<Tensor> {
    if std.is_nan() || std <= 0.0 {
        return Err(Error::Parameter {
            name: "std",
            message: format!("must be positive, got {std}"),
        });
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push((prng.gaussian_f64() * std as f64) as f32);
    }
    Tensor::new(shape, data)
}
