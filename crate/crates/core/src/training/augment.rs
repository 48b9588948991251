use rand::Rng;

use crate::error::{Error, Result};
use crate::image::FundusImage;

/// One augmentation draw: the square scale to resize to and the top-left
/// corner of the crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub scale: usize,
    pub top: usize,
    pub left: usize,
}

impl CropWindow {
    /// Pick a scale uniformly from `scales`, then a uniformly placed window.
    pub fn draw(scales: &[usize], crop: usize, rng: &mut impl Rng) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::Param("no resize scales".into()));
        }
        let scale = scales[rng.random_range(0..scales.len())];
        if scale < crop {
            return Err(Error::Param(format!("scale {scale} is smaller than crop {crop}")));
        }
        Ok(Self {
            scale,
            top: rng.random_range(0..=scale - crop),
            left: rng.random_range(0..=scale - crop),
        })
    }

    pub fn apply(&self, img: &FundusImage, crop: usize) -> Result<FundusImage> {
        img.resize(self.scale, self.scale)?.crop(self.top, self.left, crop, crop)
    }
}

/// Resize to a randomly chosen square scale, then take one random crop.
/// When `paired` is given it receives exactly the same scale and window.
pub fn augment(
    img: &FundusImage,
    paired: Option<&FundusImage>,
    scales: &[usize],
    crop: usize,
    rng: &mut impl Rng,
) -> Result<(FundusImage, Option<FundusImage>)> {
    if let Some(p) = paired {
        if (p.height(), p.width()) != (img.height(), img.width()) {
            return Err(Error::Shape("paired images differ in size".into()));
        }
    }
    let window = CropWindow::draw(scales, crop, rng)?;
    Ok((window.apply(img, crop)?, paired.map(|p| window.apply(p, crop)).transpose()?))
}
