//! Patch discriminator: a stack of 4x4 convolutions emitting one raw logit
//! per overlapping input patch.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, BatchNorm2d, Conv2d, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![64, 128, 256, 512, 1],
            strides: vec![2, 2, 2, 1, 1],
            kernel: 4,
            padding: 1,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != self.strides.len() || self.widths.len() < 2 {
            return Err(Error::Config("discriminator widths and strides must align".into()));
        }
        if self.widths.last() != Some(&1) {
            return Err(Error::Config("discriminator must end in a single-channel map".into()));
        }
        if self.strides.contains(&0) || self.kernel == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!("invalid discriminator spec {self:?}")));
        }
        Ok(())
    }

    /// Side length of the logit map for an input of side `n`.
    pub fn output_size(&self, n: usize) -> Option<usize> {
        self.strides.iter().try_fold(n, |n, &s| {
            (n + 2 * self.padding).checked_sub(self.kernel).map(|v| v / s + 1)
        })
    }
}

struct Layer {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

pub struct Discriminator {
    spec: DiscriminatorSpec,
    store: ParamStore,
    layers: Vec<Layer>,
}

impl Discriminator {
    pub fn new(spec: &DiscriminatorSpec, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(seed, dtype, device);
        let n = spec.widths.len();
        let mut layers = Vec::with_capacity(n);
        let mut c_in = spec.in_channels;
        for (i, (&w, &s)) in spec.widths.iter().zip(&spec.strides).enumerate() {
            let normed = i > 0 && i < n - 1;
            let conv = Conv2d::new(&mut store, &format!("conv{i}"), c_in, w, spec.kernel, s, spec.padding, !normed)?;
            let norm = if normed {
                Some(BatchNorm2d::new(&mut store, &format!("norm{i}"), w)?)
            } else {
                None
            };
            layers.push(Layer { conv, norm });
            c_in = w;
        }
        Ok(Self { spec: spec.clone(), store, layers })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.store.trainable()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// `(batch, 3, H, W)` images in `[-1, 1]` to `(batch, 1, h, w)` logits.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!("discriminator expects {} channels, got {c}", self.spec.in_channels)));
        }
        if self.spec.output_size(h.min(w)).map_or(true, |n| n == 0) {
            return Err(Error::Shape(format!("input {h}x{w} too small for the discriminator")));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.conv.forward(&h)?;
            if let Some(norm) = &layer.norm {
                h = norm.forward(&h, train)?;
            }
            if i < last {
                h = leaky_relu(&h)?;
            }
        }
        Ok(h)
    }
}
