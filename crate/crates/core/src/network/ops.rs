//! Convolution and transposed convolution as gather + matmul.
//!
//! `Im2Col` unfolds every receptive field into a column; `Col2Im` folds
//! columns back with accumulation. The two are adjoint, so each one's
//! backward pass is the other, and both convolutions differentiate through
//! plain matrix products.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn check(&self) -> Result<()> {
        if self.stride == 0
            || self.kernel == 0
            || self.height + 2 * self.padding < self.kernel
            || self.width + 2 * self.padding < self.kernel
        {
            return Err(Error::Shape(format!("degenerate convolution geometry {self:?}")));
        }
        Ok(())
    }

    /// For each `(k, out)` pair along one axis: the input coordinate, if any.
    fn taps(&self, k: usize, out: usize, len: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

fn im2col_kernel<T: WithDType>(src: &[T], batch: usize, channels: usize, g: &Geometry) -> Vec<T> {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let (ho, wo) = (g.out_height(), g.out_width());
    let rows = channels * k * k;
    let mut dst = vec![T::zero(); batch * rows * ho * wo];
    for b in 0..batch {
        for c in 0..channels {
            let plane = &src[(b * channels + c) * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (b * rows + (c * k + ky) * k + kx) * ho * wo;
                    let out = &mut dst[row..row + ho * wo];
                    for oy in 0..ho {
                        let Some(iy) = g.taps(ky, oy, h) else { continue };
                        let line = &plane[iy * w..(iy + 1) * w];
                        let out_line = &mut out[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out_line.iter_mut().enumerate() {
                            if let Some(ix) = g.taps(kx, ox, w) {
                                *o = line[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im_kernel<T: WithDType>(src: &[T], batch: usize, channels: usize, g: &Geometry) -> Vec<T> {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let (ho, wo) = (g.out_height(), g.out_width());
    let rows = channels * k * k;
    let mut dst = vec![T::zero(); batch * channels * h * w];
    for b in 0..batch {
        for c in 0..channels {
            let plane = &mut dst[(b * channels + c) * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (b * rows + (c * k + ky) * k + kx) * ho * wo;
                    let cols = &src[row..row + ho * wo];
                    for oy in 0..ho {
                        let Some(iy) = g.taps(ky, oy, h) else { continue };
                        let line = &mut plane[iy * w..(iy + 1) * w];
                        for (ox, &v) in cols[oy * wo..(oy + 1) * wo].iter().enumerate() {
                            if let Some(ix) = g.taps(kx, ox, w) {
                                line[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col/col2im expect contiguous input"),
    }
}

/// `(B, C, H, W) -> (B, C·k·k, Ho·Wo)`.
struct Im2Col(Geometry);

/// `(B, C·k·k, Ho·Wo) -> (B, C, H, W)`, summing overlapping taps.
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let g = self.0;
        if (h, w) != (g.height, g.width) {
            candle_core::bail!("im2col geometry {g:?} does not match input {h}x{w}");
        }
        let shape = Shape::from((b, c * g.kernel * g.kernel, g.out_height() * g.out_width()));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col_kernel(contiguous(v, layout)?, b, c, &g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col_kernel(contiguous(v, layout)?, b, c, &g)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, rows, cols) = layout.shape().dims3()?;
        let g = self.0;
        let kk = g.kernel * g.kernel;
        if rows % kk != 0 || cols != g.out_height() * g.out_width() {
            candle_core::bail!("col2im geometry {g:?} does not match columns {rows}x{cols}");
        }
        let c = rows / kk;
        let shape = Shape::from((b, c, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im_kernel(contiguous(v, layout)?, b, c, &g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im_kernel(contiguous(v, layout)?, b, c, &g)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

pub fn im2col(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let g = Geometry { height: h, width: w, kernel, stride, padding };
    g.check()?;
    Ok(x.contiguous()?.apply_op1(Im2Col(g))?)
}

pub fn col2im(cols: &Tensor, g: Geometry) -> Result<Tensor> {
    g.check()?;
    Ok(cols.contiguous()?.apply_op1(Col2Im(g))?)
}

/// 2-D convolution. `weight` is `(C_out, C_in, k, k)`, `bias` is `(C_out)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    let (c_out, wc_in, k, k2) = weight.dims4()?;
    if wc_in != c_in || k != k2 {
        return Err(Error::Shape(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let g = Geometry { height: h, width: w, kernel: k, stride, padding };
    let cols = im2col(x, k, stride, padding)?;
    let wm = weight.reshape((c_out, c_in * k * k))?;
    let y = wm.broadcast_matmul(&cols)?.reshape((b, c_out, g.out_height(), g.out_width()))?;
    match bias {
        Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, c_out, 1, 1))?)?),
        None => Ok(y),
    }
}

/// Transposed convolution. `weight` is `(C_in, C_out, k, k)`; the output
/// side is `(H - 1)·stride - 2·padding + k`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (b, c_in, h, w) = x.dims4()?;
    let (wc_in, c_out, k, k2) = weight.dims4()?;
    if wc_in != c_in || k != k2 {
        return Err(Error::Shape(format!(
            "transposed conv weight {:?} incompatible with input {:?}",
            weight.dims(),
            x.dims()
        )));
    }
    let out_h = ((h - 1) * stride + k)
        .checked_sub(2 * padding)
        .ok_or_else(|| Error::Shape("transposed conv output is empty".into()))?;
    let out_w = ((w - 1) * stride + k)
        .checked_sub(2 * padding)
        .ok_or_else(|| Error::Shape("transposed conv output is empty".into()))?;
    let g = Geometry { height: out_h, width: out_w, kernel: k, stride, padding };
    if g.out_height() != h || g.out_width() != w {
        return Err(Error::Shape(format!("transposed conv geometry {g:?} does not invert {h}x{w}")));
    }
    let wt = weight.reshape((c_in, c_out * k * k))?.t()?;
    let cols = wt.broadcast_matmul(&x.reshape((b, c_in, h * w))?)?;
    let y = col2im(&cols, g)?;
    match bias {
        Some(bias) => Ok(y.broadcast_add(&bias.reshape((1, c_out, 1, 1))?)?),
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn conv_matches_native() {
        let dev = Device::Cpu;
        for (stride, pad, size) in [(2, 1, 16), (1, 1, 9), (1, 0, 7), (2, 1, 5)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, size, size + 1), &dev).unwrap();
            let w = Tensor::randn(0f64, 1.0, (5, 3, 4, 4), &dev).unwrap();
            let ours = conv2d(&x, &w, None, stride, pad).unwrap();
            let native = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), native.dims());
            assert!(max_abs_diff(&ours, &native) < 1e-10);
        }
    }

    #[test]
    fn transposed_conv_matches_native() {
        let dev = Device::Cpu;
        for (stride, pad, size) in [(2, 1, 1), (2, 1, 4), (1, 1, 6)] {
            let x = Tensor::randn(0f64, 1.0, (2, 3, size, size), &dev).unwrap();
            let w = Tensor::randn(0f64, 1.0, (3, 5, 4, 4), &dev).unwrap();
            let ours = conv_transpose2d(&x, &w, None, stride, pad).unwrap();
            let native = x.conv_transpose2d(&w, pad, 0, stride, 1).unwrap();
            assert_eq!(ours.dims(), native.dims());
            assert!(max_abs_diff(&ours, &native) < 1e-10);
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (2, 3, 9, 8), &dev).unwrap();
        let g = Geometry { height: 9, width: 8, kernel: 4, stride: 2, padding: 1 };
        let cols = im2col(&x, 4, 2, 1).unwrap();
        let y = Tensor::randn(0f64, 1.0, cols.dims(), &dev).unwrap();
        let lhs = (cols * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let rhs = (x * col2im(&y, g).unwrap()).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn gradients_match_native_conv() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (2, 3, 8, 8), &dev).unwrap();
        let w = Var::randn(0f64, 1.0, (4, 3, 4, 4), &dev).unwrap();
        let target = Tensor::randn(0f64, 1.0, (2, 4, 4, 4), &dev).unwrap();
        let loss = |y: Tensor| (y - &target).unwrap().sqr().unwrap().sum_all().unwrap();
        let g1 = loss(conv2d(&x, &w, None, 2, 1).unwrap()).backward().unwrap();
        let g2 = loss(x.conv2d(&w, 1, 2, 1, 1).unwrap()).backward().unwrap();
        for v in [&x, &w] {
            assert!(max_abs_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn transposed_gradients_match_native() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (2, 3, 4, 4), &dev).unwrap();
        let w = Var::randn(0f64, 1.0, (3, 2, 4, 4), &dev).unwrap();
        let target = Tensor::randn(0f64, 1.0, (2, 2, 8, 8), &dev).unwrap();
        let loss = |y: Tensor| (y - &target).unwrap().sqr().unwrap().sum_all().unwrap();
        let g1 = loss(conv_transpose2d(&x, &w, None, 2, 1).unwrap()).backward().unwrap();
        let g2 = loss(x.conv_transpose2d(&w, 1, 0, 2, 1).unwrap()).backward().unwrap();
        for v in [&x, &w] {
            assert!(max_abs_diff(g1.get(v).unwrap(), g2.get(v).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn f32_is_supported() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (1, 2, 8, 8), &dev).unwrap();
        let w = Tensor::randn(0f32, 1.0, (3, 2, 4, 4), &dev).unwrap();
        let y = conv2d(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.dims(), [1, 3, 4, 4]);
        assert_eq!(y.dtype(), DType::F32);
    }
}
