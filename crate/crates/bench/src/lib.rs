//! Shared fixtures for the criterion benches.

use arcnet_core::network::{AdamConfig, BundleSpec, DiscriminatorSpec, GeneratorSpec, ModelBundle};
use arcnet_core::training::{Batch, TrainConfig};
use arcnet_core::{phantom, HighFrequencyGuidance};
use candle_core::{DType, Device};

/// The reduced network used for smoke training: depth 7 at 128x128.
pub fn smoke_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        crop: 128,
        resize_scales: vec![128, 136, 144, 152],
        generator: GeneratorSpec {
            depth: 7,
            base_width: 16,
            max_width: 128,
            ..Default::default()
        },
        discriminator: DiscriminatorSpec {
            widths: vec![16, 32, 64, 128, 1],
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn smoke_bundle() -> ModelBundle {
    let cfg = smoke_config();
    ModelBundle::new(&cfg.bundle_spec(), cfg.adam(), "bench", DType::F32, &Device::Cpu).unwrap()
}

pub fn smoke_batch(n: usize, size: usize) -> Batch {
    let (mut degraded, mut clear, mut target) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n as u64 {
        let (c, d) = phantom::simulated_pair(size, size, i);
        degraded.push(d);
        clear.push(c);
        target.push(phantom::target_cataract(&phantom::clear_fundus(size, size, 100 + i), i));
    }
    Batch { degraded, clear, target }
}

/// A tiny bundle for per-step overhead measurements.
pub fn tiny_bundle() -> ModelBundle {
    let spec = BundleSpec {
        generator: GeneratorSpec {
            depth: 5,
            base_width: 8,
            max_width: 32,
            ..Default::default()
        },
        discriminator: DiscriminatorSpec {
            widths: vec![8, 16, 32, 32, 1],
            ..Default::default()
        },
        guidance: Some(HighFrequencyGuidance::default()),
        seed: 0,
    };
    ModelBundle::new(&spec, AdamConfig::default(), "bench", DType::F32, &Device::Cpu).unwrap()
}
