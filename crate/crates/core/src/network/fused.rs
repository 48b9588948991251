//! Fused CPU kernels for the elementwise and normalization layers.
//!
//! Composing these from generic tensor ops is correct but slow: the
//! backward pass of broadcasts, reductions and `maximum` dominates a
//! training step. Each op here computes its forward and backward in one
//! pass over contiguous memory.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("fused op expects contiguous input"),
    }
}

macro_rules! dispatch {
    ($name:expr, $storage:expr, |$v:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32($v) => CpuStorage::F32($body),
            CpuStorage::F64($v) => CpuStorage::F64($body),
            other => candle_core::bail!("{}: unsupported dtype {:?}", $name, other.dtype()),
        }
    };
}

struct LeakyRelu(f64);

struct LeakyReluGrad(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(x: &[T], slope: f64) -> Vec<T> {
            let a = T::from_f64(slope);
            x.iter().map(|&v| if v > T::zero() { v } else { v * a }).collect()
        }
        Ok((dispatch!("leaky-relu", s, |v| run(slice(v, l)?, self.0)), l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &LeakyReluGrad(self.0))?))
    }
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(x: &[T], g: &[T], slope: f64) -> Vec<T> {
            let a = T::from_f64(slope);
            x.iter().zip(g).map(|(&v, &g)| if v > T::zero() { g } else { g * a }).collect()
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(run(slice(x, l1)?, slice(g, l2)?, self.0)),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(run(slice(x, l1)?, slice(g, l2)?, self.0)),
            _ => candle_core::bail!("leaky-relu-grad: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// `max(x, slope·x)` for `0 < slope < 1`.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LeakyRelu(slope))?)
}

/// Per-channel mean and biased variance of `(B, C, H, W)` data.
fn moments<T: WithDType>(x: &[T], b: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let planes = || (0..b).flat_map(move |i| x[(i * c + ch) * hw..][..hw].iter().map(|v| v.to_f64()));
        let mu = planes().sum::<f64>() / m;
        mean[ch] = mu;
        var[ch] = planes().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
    }
    (mean, var)
}

/// Training-mode batch normalization over `(x, scale, shift)`.
struct BatchNormTrain {
    eps: f64,
}

/// Gradients `(dx, dscale, dshift)` packed into one flat tensor.
struct BatchNormGrad {
    eps: f64,
}

/// Per-channel `[mean; biased variance]` as a `(2, C)` tensor.
struct Moments;

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        fn run<T: WithDType>(x: &[T], g: &[T], s: &[T], b: usize, c: usize, hw: usize, eps: f64) -> Vec<T> {
            let (mean, var) = moments(x, b, c, hw);
            let mut out = vec![T::zero(); x.len()];
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + eps).sqrt();
                let (gain, bias) = (g[ch].to_f64() * inv, s[ch].to_f64() - g[ch].to_f64() * inv * mean[ch]);
                for i in 0..b {
                    let o = (i * c + ch) * hw;
                    for (dst, src) in out[o..o + hw].iter_mut().zip(&x[o..o + hw]) {
                        *dst = T::from_f64(src.to_f64() * gain + bias);
                    }
                }
            }
            out
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(s)) => {
                CpuStorage::F32(run(slice(x, l1)?, slice(g, l2)?, slice(s, l3)?, b, c, hw, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(s)) => {
                CpuStorage::F64(run(slice(x, l1)?, slice(g, l2)?, slice(s, l3)?, b, c, hw, self.eps))
            }
            _ => candle_core::bail!("batch-norm: unsupported dtypes"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let n = x.elem_count();
        let c = scale.elem_count();
        let packed = x.apply_op3_no_bwd(scale, &grad.contiguous()?, &BatchNormGrad { eps: self.eps })?;
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dscale = packed.narrow(0, n, c)?;
        let dshift = packed.narrow(0, n + c, c)?;
        Ok((Some(dx), Some(dscale), Some(dshift)))
    }
}

impl CustomOp3 for BatchNormGrad {
    fn name(&self) -> &'static str {
        "batch-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        // dx = scale·inv/m · (m·g − Σg − x̂·Σ(g·x̂))
        fn run<T: WithDType>(x: &[T], scale: &[T], g: &[T], b: usize, c: usize, hw: usize, eps: f64) -> Vec<T> {
            let (mean, var) = moments(x, b, c, hw);
            let n = x.len();
            let m = (b * hw) as f64;
            let mut out = vec![T::zero(); n + 2 * c];
            for ch in 0..c {
                let inv = 1.0 / (var[ch] + eps).sqrt();
                let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                for i in 0..b {
                    let o = (i * c + ch) * hw;
                    for (xv, gv) in x[o..o + hw].iter().zip(&g[o..o + hw]) {
                        let gv = gv.to_f64();
                        sum_g += gv;
                        sum_gx += gv * (xv.to_f64() - mean[ch]) * inv;
                    }
                }
                let k = scale[ch].to_f64() * inv / m;
                for i in 0..b {
                    let o = (i * c + ch) * hw;
                    for j in o..o + hw {
                        let xhat = (x[j].to_f64() - mean[ch]) * inv;
                        out[j] = T::from_f64(k * (m * g[j].to_f64() - sum_g - xhat * sum_gx));
                    }
                }
                out[n + ch] = T::from_f64(sum_gx);
                out[n + c + ch] = T::from_f64(sum_g);
            }
            out
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(s), CpuStorage::F32(g)) => {
                CpuStorage::F32(run(slice(x, l1)?, slice(s, l2)?, slice(g, l3)?, b, c, hw, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(s), CpuStorage::F64(g)) => {
                CpuStorage::F64(run(slice(x, l1)?, slice(s, l2)?, slice(g, l3)?, b, c, hw, self.eps))
            }
            _ => candle_core::bail!("batch-norm-grad: unsupported dtypes"),
        };
        let len = l1.shape().elem_count() + 2 * c;
        Ok((out, Shape::from(len)))
    }
}

impl CustomOp1 for Moments {
    fn name(&self) -> &'static str {
        "moments"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        fn run<T: WithDType>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
            let (mean, var) = moments(x, b, c, hw);
            mean.into_iter().chain(var).map(T::from_f64).collect()
        }
        Ok((dispatch!("moments", s, |v| run(slice(v, l)?, b, c, h * w)), Shape::from((2, c))))
    }
}

/// Normalize each channel of `(B, C, H, W)` data by its batch statistics,
/// then apply `scale` and `shift` (both `(C)`).
pub fn batch_norm_train(x: &Tensor, scale: &Tensor, shift: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?
        .apply_op3(&scale.contiguous()?, &shift.contiguous()?, BatchNormTrain { eps })?)
}

/// Per-channel `(mean, biased variance)`, detached from the graph.
pub fn channel_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let m = x.detach().contiguous()?.apply_op1_no_bwd(&Moments)?;
    Ok((m.get(0)?, m.get(1)?))
}
