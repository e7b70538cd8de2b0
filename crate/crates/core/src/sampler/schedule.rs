use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Uniform poll-ratio draws in `[alpha_low, alpha_high)`, one per training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PollRatioSchedule {
    alpha_low: f64,
    alpha_high: f64,
    rng: SplitMix64,
}

impl PollRatioSchedule {
    pub fn new(alpha_low: f64, alpha_high: f64, seed: u64) -> Result<Self> {
        if !(alpha_low > 0.0 && alpha_low <= alpha_high && alpha_high < 1.0) {
            return Err(Error::contract(format!(
                "poll ratio range must satisfy 0 < low <= high < 1, got [{alpha_low}, {alpha_high}]"
            )));
        }
        Ok(Self {
            alpha_low,
            alpha_high,
            rng: SplitMix64::new(seed),
        })
    }

    /// A degenerate schedule that always yields `alpha`.
    pub fn fixed(alpha: f64, seed: u64) -> Result<Self> {
        Self::new(alpha, alpha, seed)
    }

    pub fn alpha_low(&self) -> f64 {
        self.alpha_low
    }

    pub fn alpha_high(&self) -> f64 {
        self.alpha_high
    }

    pub fn rng_state(&self) -> u64 {
        self.rng.state()
    }

    pub fn sample(&mut self) -> f64 {
        let u = self.rng.next_f64();
        let alpha = self.alpha_low + u * (self.alpha_high - self.alpha_low);
        alpha.clamp(self.alpha_low, self.alpha_high)
    }
}

/// Convenience free function mirroring [`PollRatioSchedule::sample`].
pub fn sample_poll_ratio(schedule: &mut PollRatioSchedule) -> f64 {
    schedule.sample()
}
