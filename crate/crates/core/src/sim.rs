//! Deterministic simulation context: seeded randomness and a fixed clock.

use chrono::DateTime;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Simulated wall clock. Every reading advances it by one second so that
/// repeated runs with the same seed render identical timestamps.
#[derive(Debug, Clone)]
pub struct SimClock {
    now: i64,
}

pub const CLOCK_EPOCH: i64 = 1_791_000_000;

impl SimClock {
    pub fn starting_at(unix_seconds: i64) -> Self {
        SimClock { now: unix_seconds }
    }

    pub fn tick(&mut self) -> i64 {
        self.now += 1;
        self.now
    }

    /// `date`-style rendering of the next tick.
    pub fn date(&mut self) -> String {
        let t = self.tick();
        DateTime::from_timestamp(t, 0)
            .expect("simulated clock stays in range")
            .format("%a %b %e %H:%M:%S UTC %Y")
            .to_string()
    }
}

impl Default for SimClock {
    fn default() -> Self {
        SimClock::starting_at(CLOCK_EPOCH)
    }
}

#[derive(Debug, Clone)]
pub struct SimEnv {
    pub rng: ChaCha20Rng,
    pub clock: SimClock,
}

impl SimEnv {
    pub fn seeded(seed: u64) -> Self {
        SimEnv { rng: ChaCha20Rng::seed_from_u64(seed), clock: SimClock::default() }
    }
}
