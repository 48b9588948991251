use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{fused, ops};
use crate::error::{Error, Result};

/// Standard deviation of the zero-mean Gaussian used for conv weights.
pub const INIT_STD: f64 = 0.02;
pub const LEAKY_SLOPE: f64 = 0.2;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Named trainable parameters plus non-trainable buffers (running stats).
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn make(&self, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        Ok(Var::from_tensor(&t)?)
    }

    pub fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Param(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let v = self.make(values, shape)?;
        self.params.push((name, v.clone()));
        Ok(v)
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let v = self.make(vec![value; n], shape)?;
        self.params.push((name, v.clone()));
        Ok(v)
    }

    pub fn buffer(&mut self, name: String, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let v = self.make(vec![value; n], shape)?;
        self.buffers.push((name, v.clone()));
        Ok(v)
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named_trainable(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Every parameter and buffer, by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(n, v)| (n.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrite every parameter and buffer from `tensors[prefix + name]`.
    pub fn load(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.normal(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], INIT_STD)?;
        let bias = if bias {
            Some(store.constant(format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(x, &self.weight, self.bias.as_deref(), self.stride, self.padding)
    }
}

pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.normal(format!("{name}.weight"), &[c_in, c_out, kernel, kernel], INIT_STD)?;
        let bias = if bias {
            Some(store.constant(format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv_transpose2d(x, &self.weight, self.bias.as_deref(), self.stride, self.padding)
    }
}

/// Batch normalization over `(batch, row, col)` per channel. Training mode
/// normalizes with batch statistics and folds them into the running
/// estimates; inference mode uses the running estimates only.
pub struct BatchNorm2d {
    scale: Var,
    shift: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.constant(format!("{name}.weight"), &[channels], 1.0)?,
            shift: store.constant(format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: store.buffer(format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(format!("{name}.running_var"), &[channels], 1.0)?,
            channels,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("batch norm expects {} channels, got {c}", self.channels)));
        }
        let shape = (1, c, 1, 1);
        if train {
            let n = (b * h * w) as f64;
            let (mean, var) = fused::channel_moments(x)?;
            let unbiased = if n > 1.0 { (var * (n / (n - 1.0)))? } else { var };
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (mean * BN_MOMENTUM)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            return fused::batch_norm_train(x, &self.scale, &self.shift, BN_EPS);
        }
        // Inference folds the running statistics into one per-channel affine map.
        let inv = (self.running_var.as_tensor() + BN_EPS)?.sqrt()?.recip()?;
        let gain = (self.scale.as_tensor() * &inv)?;
        let bias = (self.shift.as_tensor() - (self.running_mean.as_tensor() * &gain)?)?;
        Ok(x.broadcast_mul(&gain.reshape(shape)?)?.broadcast_add(&bias.reshape(shape)?)?)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    fused::leaky_relu(x, LEAKY_SLOPE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_norm_train_and_eval() {
        let dev = Device::Cpu;
        let mut store = ParamStore::new(0, DType::F64, &dev);
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::randn(0f64, 1.0, (4, 2, 3, 3), &dev).unwrap().affine(3.0, 5.0).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean = y.mean_keepdim(3).unwrap().mean_keepdim(2).unwrap().mean_keepdim(0).unwrap();
        for m in mean.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!(m.abs() < 1e-12);
        }
        let rm = store.named_tensors().into_iter().find(|(n, _)| n == "bn.running_mean").unwrap().1;
        let rm = rm.to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|&v| v > 0.3 && v < 0.7), "{rm:?}");
        let a = bn.forward(&x, false).unwrap();
        let b = bn.forward(&x, false).unwrap();
        assert_eq!(a.flatten_all().unwrap().to_vec1::<f64>().unwrap(), b.flatten_all().unwrap().to_vec1::<f64>().unwrap());
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[-1.0f64, 0.0, 2.0], &Device::Cpu).unwrap();
        assert_eq!(leaky_relu(&x).unwrap().to_vec1::<f64>().unwrap(), [-0.2, 0.0, 2.0]);
    }

    #[test]
    fn store_load_round_trip() {
        let dev = Device::Cpu;
        let mut a = ParamStore::new(1, DType::F32, &dev);
        let mut b = ParamStore::new(2, DType::F32, &dev);
        Conv2d::new(&mut a, "c", 2, 3, 4, 2, 1, true).unwrap();
        Conv2d::new(&mut b, "c", 2, 3, 4, 2, 1, true).unwrap();
        let map: HashMap<_, _> = a.named_tensors().into_iter().map(|(n, t)| (format!("x.{n}"), t)).collect();
        b.load(&map, "x.").unwrap();
        for ((_, ta), (_, tb)) in a.named_tensors().iter().zip(b.named_tensors()) {
            assert_eq!(ta.flatten_all().unwrap().to_vec1::<f32>().unwrap(), tb.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
        assert!(b.load(&HashMap::new(), "x.").is_err());
    }
}
