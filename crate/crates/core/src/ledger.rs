use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

/// Model-call accounting for one sample or a whole run.
///
/// Counts are exact and deterministic. Wall-clock is kept alongside but never
/// serialized with the counts, so persisted artifacts stay byte-stable.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComputeLedger {
    /// Full evaluations of the reverse operator `R_t`.
    pub reverse_passes: u64,
    /// Forward evaluations of the noise predictor.
    pub network_calls: u64,
    /// Backward (vector-Jacobian) passes through the noise predictor.
    pub network_backward_calls: u64,
    pub decoder_calls: u64,
    pub metric_evals: u64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl ComputeLedger {
    /// Forward plus backward predictor calls; the unit compute parity is
    /// matched on.
    pub fn model_calls(&self) -> u64 {
        self.network_calls + self.network_backward_calls
    }

    /// Same counts, wall-clock zeroed.
    pub fn counts_only(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..*self
        }
    }
}

impl AddAssign for ComputeLedger {
    fn add_assign(&mut self, o: Self) {
        self.reverse_passes += o.reverse_passes;
        self.network_calls += o.network_calls;
        self.network_backward_calls += o.network_backward_calls;
        self.decoder_calls += o.decoder_calls;
        self.metric_evals += o.metric_evals;
        self.wall_clock_secs += o.wall_clock_secs;
    }
}

impl Add for ComputeLedger {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        self += o;
        self
    }
}

impl std::iter::Sum for ComputeLedger {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}
