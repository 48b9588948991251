//! Additive low/high frequency split used as structure guidance.
//!
//! The low-frequency component is a wide reflect-padded Gaussian blur; the
//! high-frequency component is the residual, so `lfc + hfc` rebuilds the
//! image exactly.

use candle_core::{DType, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{blur_channels, blur_matrix};
use crate::image::FundusImage;

pub const DEFAULT_RADIUS: usize = 26;
pub const DEFAULT_SIGMA: f64 = 9.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyPair {
    pub lfc: Array3<f64>,
    pub hfc: Array3<f64>,
    pub r_p: usize,
    pub sigma_p: f64,
}

impl FrequencyPair {
    /// The low-frequency part as an image, clamped to `[0, 1]`.
    pub fn lfc_image(&self) -> FundusImage {
        let mut img = FundusImage::new(self.lfc.clone(), None).expect("lfc has image shape");
        img.clamp_unit();
        img
    }

    /// The high-frequency part mapped affinely from `[-1, 1]` to `[0, 1]`
    /// for viewing. Never feed this back into training.
    pub fn hfc_image(&self) -> FundusImage {
        let pixels = self.hfc.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0));
        FundusImage::new(pixels, None).expect("hfc has image shape")
    }
}

pub fn decompose(img: &FundusImage, r_p: usize, sigma_p: f64) -> Result<FrequencyPair> {
    if r_p < 1 {
        return Err(Error::Param(format!("low-pass radius must be >= 1, got {r_p}")));
    }
    let lfc = blur_channels(img.pixels(), r_p, sigma_p)?;
    let hfc = img.pixels() - &lfc;
    Ok(FrequencyPair {
        lfc,
        hfc,
        r_p,
        sigma_p,
    })
}

/// Turns an image into an auxiliary raster that is concatenated to the
/// generator input and compared by the structure loss.
pub trait StructureGuidance: Send + Sync {
    fn name(&self) -> &str;

    fn channels(&self) -> usize {
        3
    }

    fn guidance(&self, img: &FundusImage) -> Result<Array3<f64>>;

    /// Differentiable batch version over `(batch, channel, row, col)` tensors
    /// holding `[0, 1]` intensities. Guidances that only serve as network
    /// input may leave this unimplemented.
    fn guidance_tensor(&self, _images: &Tensor) -> Result<Tensor> {
        Err(Error::Config(format!(
            "guidance {:?} has no differentiable form and cannot drive the structure loss",
            self.name()
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighFrequencyGuidance {
    pub r_p: usize,
    pub sigma_p: f64,
}

impl Default for HighFrequencyGuidance {
    fn default() -> Self {
        Self {
            r_p: DEFAULT_RADIUS,
            sigma_p: DEFAULT_SIGMA,
        }
    }
}

impl HighFrequencyGuidance {
    pub fn new(r_p: usize, sigma_p: f64) -> Result<Self> {
        if r_p < 1 {
            return Err(Error::Param(format!("low-pass radius must be >= 1, got {r_p}")));
        }
        crate::filter::gaussian_kernel_1d(r_p, sigma_p)?;
        Ok(Self { r_p, sigma_p })
    }

    fn operator(&self, n: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let m = blur_matrix(n, self.r_p, self.sigma_p)?;
        let t = Tensor::from_vec(m.into_raw_vec_and_offset().0, (n, n), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reflect-padded Gaussian blur of a `(..., rows, cols)` tensor, written
    /// as `M_rows · x · M_colsᵀ` so that it differentiates through matmul.
    pub fn low_pass_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() < 2 {
            return Err(Error::Shape(format!("expected at least 2 dims, got {dims:?}")));
        }
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let rows = self.operator(h, x.dtype(), x.device())?;
        let cols_t = self.operator(w, x.dtype(), x.device())?.t()?;
        Ok(rows.broadcast_matmul(x)?.broadcast_matmul(&cols_t)?)
    }
}

impl StructureGuidance for HighFrequencyGuidance {
    fn name(&self) -> &str {
        "hfc"
    }

    fn guidance(&self, img: &FundusImage) -> Result<Array3<f64>> {
        Ok(decompose(img, self.r_p, self.sigma_p)?.hfc)
    }

    fn guidance_tensor(&self, images: &Tensor) -> Result<Tensor> {
        Ok((images - self.low_pass_tensor(images)?)?)
    }
}
