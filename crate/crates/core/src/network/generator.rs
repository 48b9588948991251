//! U-Net generator: stride-2 4x4 convolutions down to a 1x1 bottleneck,
//! transposed convolutions back up, with every encoder output concatenated
//! onto the matching decoder input.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, BatchNorm2d, Conv2d, ConvTranspose2d, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    /// Degraded image channels plus guidance channels.
    pub in_channels: usize,
    pub out_channels: usize,
    /// Number of down-sampling (and up-sampling) layers.
    pub depth: usize,
    pub base_width: usize,
    pub max_width: usize,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            in_channels: 6,
            out_channels: 3,
            depth: 8,
            base_width: 64,
            max_width: 512,
        }
    }
}

impl GeneratorSpec {
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_width << i.min(20)).min(self.max_width))
            .collect()
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.depth > 12 {
            return Err(Error::Config(format!("generator depth {} outside 2..=12", self.depth)));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 || self.max_width < self.base_width {
            return Err(Error::Config(format!("invalid generator spec {self:?}")));
        }
        Ok(())
    }
}

struct Down {
    conv: Conv2d,
    norm: Option<BatchNorm2d>,
}

struct Up {
    conv: ConvTranspose2d,
    norm: Option<BatchNorm2d>,
}

pub struct Generator {
    spec: GeneratorSpec,
    store: ParamStore,
    down: Vec<Down>,
    up: Vec<Up>,
}

impl Generator {
    pub fn new(spec: &GeneratorSpec, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new(seed, dtype, device);
        let widths = spec.widths();
        let d = spec.depth;

        let mut down = Vec::with_capacity(d);
        for i in 0..d {
            let c_in = if i == 0 { spec.in_channels } else { widths[i - 1] };
            // outermost and innermost layers carry no normalization
            let normed = i != 0 && i != d - 1;
            let conv = Conv2d::new(&mut store, &format!("down{i}.conv"), c_in, widths[i], 4, 2, 1, !normed)?;
            let norm = if normed {
                Some(BatchNorm2d::new(&mut store, &format!("down{i}.norm"), widths[i])?)
            } else {
                None
            };
            down.push(Down { conv, norm });
        }

        // up[k] mirrors down[d - 1 - k]
        let mut up = Vec::with_capacity(d);
        for k in 0..d {
            let level = d - 1 - k;
            let c_in = if k == 0 { widths[level] } else { 2 * widths[level] };
            let outermost = level == 0;
            let c_out = if outermost { spec.out_channels } else { widths[level - 1] };
            let conv = ConvTranspose2d::new(&mut store, &format!("up{level}.conv"), c_in, c_out, 4, 2, 1, outermost)?;
            let norm = if outermost {
                None
            } else {
                Some(BatchNorm2d::new(&mut store, &format!("up{level}.norm"), c_out)?)
            };
            up.push(Up { conv, norm });
        }
        Ok(Self { spec: spec.clone(), store, down, up })
    }

    pub fn spec(&self) -> &GeneratorSpec {
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

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let m = self.spec.size_multiple();
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!("generator expects {} input channels, got {c}", self.spec.in_channels)));
        }
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("generator input {h}x{w} is not a multiple of {m}")));
        }
        Ok(())
    }

    /// Map `(batch, in_channels, H, W)` in network range to
    /// `(batch, out_channels, H, W)` in `[-1, 1]`.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.run(x, train, false)
    }

    /// Forward pass with the bottleneck activations replaced by zeros, so
    /// only the skip connections carry information.
    pub fn forward_without_bottleneck(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.run(x, train, true)
    }

    fn run(&self, x: &Tensor, train: bool, zero_bottleneck: bool) -> Result<Tensor> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x.clone();
        for (i, layer) in self.down.iter().enumerate() {
            if i > 0 {
                h = leaky_relu(&h)?;
            }
            h = layer.conv.forward(&h)?;
            if let Some(norm) = &layer.norm {
                h = norm.forward(&h, train)?;
            }
            skips.push(h.clone());
        }
        let mut u = skips.pop().expect("depth >= 2");
        if zero_bottleneck {
            u = u.zeros_like()?;
        }
        for layer in &self.up {
            u = layer.conv.forward(&u.relu()?)?;
            match &layer.norm {
                Some(norm) => {
                    u = norm.forward(&u, train)?;
                    let skip = skips.pop().expect("one skip per inner level");
                    u = Tensor::cat(&[&skip, &u], 1)?;
                }
                None => u = u.tanh()?,
            }
        }
        Ok(u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_widths_cap_at_512() {
        assert_eq!(GeneratorSpec::default().widths(), [64, 128, 256, 512, 512, 512, 512, 512]);
    }

    #[test]
    fn small_generator_shapes() {
        let spec = GeneratorSpec { in_channels: 6, out_channels: 3, depth: 5, base_width: 4, max_width: 16 };
        let g = Generator::new(&spec, 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 6, 64, 32), &Device::Cpu).unwrap();
        let y = g.forward(&x, true).unwrap();
        assert_eq!(y.dims(), [2, 3, 64, 32]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        let bad = Tensor::zeros((1, 6, 48, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.forward(&bad, false), Err(Error::Shape(_))));
        let bad_c = Tensor::zeros((1, 3, 64, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(g.forward(&bad_c, false), Err(Error::Shape(_))));
    }

    #[test]
    fn same_seed_same_weights() {
        let spec = GeneratorSpec { depth: 3, base_width: 2, max_width: 4, ..Default::default() };
        let a = Generator::new(&spec, 7, DType::F32, &Device::Cpu).unwrap();
        let b = Generator::new(&spec, 7, DType::F32, &Device::Cpu).unwrap();
        let c = Generator::new(&spec, 8, DType::F32, &Device::Cpu).unwrap();
        let flat = |g: &Generator| -> Vec<f32> {
            g.trainable().iter().flat_map(|v| v.flatten_all().unwrap().to_vec1::<f32>().unwrap()).collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }
}
