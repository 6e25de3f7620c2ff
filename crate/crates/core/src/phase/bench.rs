use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{FocalCommand, PhaseKernel, QuantizationConfig};
use crate::geometry::ArrayLayout;
use crate::medium::MediumState;
use crate::{Error, Result, Vec3};

/// Host timing for phase-frame computation.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub repetitions: usize,
    pub channels: usize,
    /// Median batch wall time divided by the batch size.
    pub latency_per_frame: f64,
    pub refresh_rate: f64,
    pub frames_per_second: f64,
    /// Same frames computed one call at a time.
    pub sequential_latency_per_frame: f64,
    pub batch_speedup: f64,
}

impl BenchReport {
    /// refresh = 1 / latency, the identity the report is built on.
    pub fn refresh_identity_holds(&self) -> bool {
        (self.refresh_rate * self.latency_per_frame - 1.0).abs() < 1e-9
    }
}

fn median(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let mid = samples.len() / 2;
    if samples.len() % 2 == 0 {
        (samples[mid - 1] + samples[mid]) / 2.0
    } else {
        samples[mid]
    }
}

/// Times `frames` random in-volume frames, `repetitions` times, both as one
/// batch call and as sequential single-frame calls.
pub fn benchmark(layout: &ArrayLayout, frames: usize, repetitions: usize) -> Result<BenchReport> {
    if frames == 0 || repetitions == 0 {
        return Err(Error::InvalidArgument("frames and repetitions must be ≥ 1".into()));
    }
    let medium = MediumState::reference();
    let kernel = PhaseKernel::new(layout, &medium, &QuantizationConfig::for_layout(layout)?)?;
    let volume = layout.working_volume();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let commands: Vec<_> = (0..frames)
        .map(|_| {
            FocalCommand::focus(Vec3::new(
                rng.random_range(volume.x_range.0..=volume.x_range.1),
                rng.random_range(volume.y_range.0..=volume.y_range.1),
                rng.random_range(volume.z_range.0..=volume.z_range.1),
            ))
        })
        .collect();

    let mut batch_times = Vec::with_capacity(repetitions);
    let mut sequential_times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let out = kernel.batch(&commands)?;
        batch_times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(out);

        let start = Instant::now();
        for c in &commands {
            std::hint::black_box(kernel.frame(c)?);
        }
        sequential_times.push(start.elapsed().as_secs_f64());
    }
    // A zero reading would make the refresh rate infinite.
    let batch = median(batch_times).max(1e-9);
    let sequential = median(sequential_times).max(1e-9);
    let latency = batch / frames as f64;
    Ok(BenchReport {
        frames,
        repetitions,
        channels: layout.emitter_count(),
        latency_per_frame: latency,
        refresh_rate: 1.0 / latency,
        frames_per_second: frames as f64 / batch,
        sequential_latency_per_frame: sequential / frames as f64,
        batch_speedup: sequential / batch,
    })
}
