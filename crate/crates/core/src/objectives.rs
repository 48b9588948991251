//! Adversarial, image, structure and domain loss terms and their weighted
//! total.
//!
//! Every loss here takes batched `(batch, channel, row, col)` tensors and
//! returns a differentiable scalar tensor. Image-space terms expect `[0, 1]`
//! intensities; adversarial terms expect raw patch logits.

use std::fmt::Write as _;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::StructureGuidance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the image L1 term.
    pub lambda1: f64,
    /// Weight of the structure term.
    pub lambda2: f64,
    /// Weight of the domain adversarial term.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 100.0,
            lambda2: 50.0,
            lambda3: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Generator-side loss terms of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_p: f64,
    pub l_i: f64,
    pub l_s: f64,
    pub l_d: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_p,l_i,l_s,l_d,total";

    /// Build a report whose `total` is the weighted sum of the parts.
    pub fn new(step: u64, l_p: f64, l_i: f64, l_s: f64, l_d: f64, weights: &LossWeights) -> Self {
        let mut r = Self {
            step,
            l_p,
            l_i,
            l_s,
            l_d,
            total: 0.0,
        };
        r.total = total_generator_loss(&r, weights);
        r
    }

    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(s, "{},{},{},{},{},{}", self.step, self.l_p, self.l_i, self.l_s, self.l_d, self.total).unwrap();
        s
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Data(format!("expected 6 fields in log row, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|_| Error::Data(format!("bad number {:?} in log row", fields[i])))
        };
        Ok(Self {
            step: fields[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad step {:?} in log row", fields[0])))?,
            l_p: num(1)?,
            l_i: num(2)?,
            l_s: num(3)?,
            l_d: num(4)?,
            total: num(5)?,
        })
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_p", self.l_p),
            ("l_i", self.l_i),
            ("l_s", self.l_s),
            ("l_d", self.l_d),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Real patches pushed toward 1, fake toward 0.
    Discriminator,
    /// Fake patches pushed toward 1 (non-saturating form).
    Generator,
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Patch-averaged binary cross-entropy on raw logits.
///
/// The discriminator side averages the real and fake halves, so all-zero
/// logits cost `ln 2`. The generator side ignores `real` and returns
/// `mean(-log sigmoid(fake))`.
pub fn adversarial_loss(real: Option<&Tensor>, fake: &Tensor, side: Side) -> Result<Tensor> {
    let loss = match side {
        Side::Generator => softplus(&fake.neg()?)?.mean_all()?,
        Side::Discriminator => {
            let real = real.ok_or_else(|| Error::Param("discriminator loss needs real logits".into()))?;
            if real.dims() != fake.dims() {
                return Err(Error::Shape(format!(
                    "real logits {:?} and fake logits {:?} differ",
                    real.dims(),
                    fake.dims()
                )));
            }
            let on_real = softplus(&real.neg()?)?.mean_all()?;
            let on_fake = softplus(fake)?.mean_all()?;
            ((on_real + on_fake)? * 0.5)?
        }
    };
    ensure_finite("adversarial", &loss)?;
    Ok(loss)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean absolute difference over every element.
pub fn image_l1(restored: &Tensor, reference: &Tensor) -> Result<Tensor> {
    same_shape(restored, reference)?;
    Ok((restored - reference)?.abs()?.mean_all()?)
}

/// L1 distance between the guidance rasters of the two images.
pub fn structure_l1(restored: &Tensor, reference: &Tensor, guidance: &dyn StructureGuidance) -> Result<Tensor> {
    same_shape(restored, reference)?;
    image_l1(&guidance.guidance_tensor(restored)?, &guidance.guidance_tensor(reference)?)
}

pub fn total_generator_loss(parts: &LossReport, w: &LossWeights) -> f64 {
    parts.l_p + w.lambda1 * parts.l_i + w.lambda2 * parts.l_s + w.lambda3 * parts.l_d
}

/// Read a scalar loss tensor, failing if it is not finite.
pub fn ensure_finite(term: &str, loss: &Tensor) -> Result<f64> {
    let v = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(term, format!("loss evaluated to {v}")))
    }
}
