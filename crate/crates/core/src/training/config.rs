use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degradation::SamplingRanges;
use crate::error::{Error, Result};
use crate::frequency::{HighFrequencyGuidance, StructureGuidance};
use crate::network::{AdamConfig, BundleSpec, DiscriminatorSpec, GeneratorSpec};
use crate::objectives::LossWeights;

/// Everything a training run depends on. Serialized as the JSON accepted by
/// `arcnet train --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub source_manifest: Option<PathBuf>,
    pub target_manifest: Option<PathBuf>,
    pub epochs: usize,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub resize_scales: Vec<usize>,
    pub weights: LossWeights,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub guidance: HighFrequencyGuidance,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub use_hfc: bool,
    pub use_structure_loss: bool,
    pub use_domain_loss: bool,
    /// Resynthesize source pairs from the clear images every epoch instead
    /// of reading pre-baked degraded images.
    pub synthesize_sources: bool,
    pub sampling: SamplingRanges,
    pub deterministic: bool,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            source_manifest: None,
            target_manifest: None,
            epochs: 100,
            phase1_epochs: 80,
            phase2_epochs: 20,
            lr_phase1: 2e-4,
            lr_phase2: 5e-5,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            batch_size: 8,
            crop: 256,
            resize_scales: vec![286, 306, 326, 346],
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 1000,
            guidance: HighFrequencyGuidance::default(),
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            use_hfc: true,
            use_structure_loss: true,
            use_domain_loss: true,
            synthesize_sources: false,
            sampling: SamplingRanges::default(),
            deterministic: true,
            output_dir: PathBuf::from("runs/train"),
        }
    }
}

impl TrainConfig {
    /// Relative paths in the file are taken relative to the file itself.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let manifests = [&mut cfg.source_manifest, &mut cfg.target_manifest].into_iter().flatten();
        for p in manifests.chain([&mut cfg.output_dir]) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs != self.phase1_epochs + self.phase2_epochs {
            return fail(format!(
                "epochs ({}) must equal phase1_epochs + phase2_epochs ({} + {})",
                self.epochs, self.phase1_epochs, self.phase2_epochs
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if self.resize_scales.is_empty() {
            return fail("resize_scales is empty".into());
        }
        if self.resize_scales.iter().any(|&s| s < self.crop) {
            return fail(format!("crop {} exceeds the smallest resize scale", self.crop));
        }
        if self.crop % self.generator.size_multiple() != 0 {
            return fail(format!(
                "crop {} is not a multiple of {} required by a depth-{} generator",
                self.crop,
                self.generator.size_multiple(),
                self.generator.depth
            ));
        }
        for (name, lr) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(lr.is_finite() && lr > 0.0) {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if self.use_structure_loss && !self.use_hfc {
            return fail("structure loss needs the high-frequency guidance (use_hfc)".into());
        }
        self.weights.validate()?;
        self.sampling.validate()?;
        self.bundle_spec().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr_phase1,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    /// Network layout implied by the flags: without guidance the generator
    /// sees only the three image channels.
    pub fn bundle_spec(&self) -> BundleSpec {
        let guidance = self.use_hfc.then_some(self.guidance);
        let mut generator = self.generator.clone();
        generator.in_channels = 3 + guidance.map_or(0, |g| g.channels());
        BundleSpec {
            generator,
            discriminator: self.discriminator.clone(),
            guidance,
            seed: self.seed,
        }
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch < self.phase1_epochs {
            self.lr_phase1
        } else {
            self.lr_phase2
        }
    }

    /// SHA-256 of the canonical JSON with the seed and output location
    /// blanked, so runs that differ only in those share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
