//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use lsa_core::attack::ProbeContext;
use lsa_core::denoiser::{ArchDescriptor, MlpDenoiser};
use lsa_core::reverse::{ReverseConfig, ReverseOperator, Stride};
use lsa_core::rng::SeedPolicy;
use lsa_core::{Clip, ScheduleConfig, Split};

/// A randomly initialized MLP probe context over clips of length `n`.
pub fn context(n: usize, calls: usize) -> ProbeContext {
    let schedule = Arc::new(ScheduleConfig { steps: 100, beta_min: 1e-3, beta_max: 0.2, ..Default::default() }.build().unwrap());
    let arch = ArchDescriptor { hidden: vec![256, 256], ..ArchDescriptor::new(n) };
    let model = MlpDenoiser::init(arch, 1).unwrap();
    ProbeContext {
        op: ReverseOperator::new(schedule, Arc::new(model), ReverseConfig { stride: Stride::MaxCalls(calls), checkpointing: true }),
        codec: None,
        seeds: SeedPolicy::new(0),
    }
}

pub fn clip(n: usize) -> Clip {
    Clip {
        id: "bench-0000".into(),
        samples: (0..n).map(|i| (i as f64 * 0.05).sin() * (-(i as f64) / n as f64).exp()).collect(),
        sample_rate: 16_000.0,
        split: Split::Member,
    }
}
