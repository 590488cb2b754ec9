use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent, seeded random streams for the parts of a run that draw.
#[derive(Debug, Clone)]
pub(crate) struct SimRng(ChaCha8Rng);

/// Stream identifiers; each consumer gets its own so enabling one source of
/// randomness never perturbs another.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Stream {
    Jitter = 1,
    Signals = 2,
    Environment = 3,
}

impl SimRng {
    pub(crate) fn new(seed: u64, stream: Stream) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        SimRng(rng)
    }

    /// Uniform in `[0, 1)`.
    pub(crate) fn unit(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    /// Uniform in `[-half_width, half_width]`.
    pub(crate) fn symmetric(&mut self, half_width: f64) -> f64 {
        (2.0 * self.unit() - 1.0) * half_width
    }

    /// Standard normal via Box-Muller.
    pub(crate) fn gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }
}
