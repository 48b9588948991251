//! Cataract-like degradation of clear fundus images.
//!
//! Each channel `s_c` of a clear image becomes
//!
//! ```text
//! C(s_c) = alpha * (s_c * g_B) + beta * (J * g_L) * (L_c - s_c)
//! ```
//!
//! where `*` is a reflect-padded Gaussian convolution, `J` is the normalized
//! radial distance panel around `panel_center`, and `L_c` is the brightest
//! value of the channel (inside the field of view when a mask is present).
//! The result is clamped to `[0, 1]`.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::blur_plane;
use crate::image::FundusImage;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    pub alpha: f64,
    pub beta: f64,
    /// `(row, column)` of the panel's zero point.
    pub panel_center: (usize, usize),
    pub r_b: usize,
    pub sigma_b: f64,
    pub r_l: usize,
    pub sigma_l: f64,
    #[serde(default)]
    pub seed: u64,
}

impl DegradationParams {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Param(format!("alpha must lie in (0,1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Param(format!("beta must lie in [0,1], got {}", self.beta)));
        }
        for (name, r, sigma) in [("B", self.r_b, self.sigma_b), ("L", self.r_l, self.sigma_l)] {
            if r > 0 && !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::Param(format!("sigma_{name} must be positive, got {sigma}")));
            }
        }
        let (a, b) = self.panel_center;
        if a >= height || b >= width {
            return Err(Error::Param(format!(
                "panel center ({a},{b}) outside {height}x{width} image"
            )));
        }
        Ok(())
    }
}

/// Radial distance map `J`, scaled so that its maximum is one.
#[derive(Debug, Clone, PartialEq)]
pub struct CataractPanel {
    pub values: Array2<f64>,
}

pub fn build_panel(height: usize, width: usize, center: (usize, usize)) -> Result<CataractPanel> {
    let (a, b) = center;
    if a >= height || b >= width {
        return Err(Error::Param(format!(
            "panel center ({a},{b}) outside {height}x{width} raster"
        )));
    }
    let raw = Array2::from_shape_fn((height, width), |(i, j)| {
        let (di, dj) = (i as f64 - a as f64, j as f64 - b as f64);
        (di * di + dj * dj).sqrt()
    });
    let max = raw.fold(0.0f64, |m, &v| m.max(v));
    let values = if max > 0.0 { raw / max } else { raw };
    Ok(CataractPanel { values })
}

fn smooth(plane: ArrayView2<f64>, r: usize, sigma: f64) -> Result<Array2<f64>> {
    if r == 0 {
        Ok(plane.to_owned())
    } else {
        blur_plane(plane, r, sigma)
    }
}

/// Brightest value of every channel, restricted to the mask when present.
pub fn channel_illumination(img: &FundusImage) -> [f64; 3] {
    let mask = img.mask();
    [0, 1, 2].map(|c| {
        let ch = img.channel(c);
        let mut best = f64::NEG_INFINITY;
        for ((i, j), &v) in ch.indexed_iter() {
            if mask.map_or(true, |m| m[[i, j]]) {
                best = best.max(v);
            }
        }
        if best.is_finite() {
            best
        } else {
            // empty mask: fall back to the whole channel
            ch.fold(0.0f64, |m, &v| m.max(v))
        }
    })
}

/// Apply the degradation with a precomputed (already smoothed) haze panel
/// and explicit per-channel illumination.
pub fn degrade_with_panel(
    s: &FundusImage,
    alpha: f64,
    beta: f64,
    r_b: usize,
    sigma_b: f64,
    haze: &Array2<f64>,
    illumination: [f64; 3],
) -> Result<FundusImage> {
    if haze.dim() != (s.height(), s.width()) {
        return Err(Error::Shape("haze panel does not match image".into()));
    }
    let mut out = s.clone();
    for (c, l_c) in illumination.iter().enumerate() {
        let src = s.channel(c);
        let base = smooth(src, r_b, sigma_b)?;
        Zip::from(out.channel_mut(c))
            .and(&base)
            .and(&src)
            .and(haze)
            .for_each(|o, &blurred, &sc, &j| {
                *o = (alpha * blurred + beta * j * (l_c - sc)).clamp(0.0, 1.0);
            });
    }
    Ok(out)
}

pub fn simulate_cataract(s: &FundusImage, p: &DegradationParams) -> Result<FundusImage> {
    p.validate(s.height(), s.width())?;
    let panel = build_panel(s.height(), s.width(), p.panel_center)?;
    let haze = smooth(panel.values.view(), p.r_l, p.sigma_l)?;
    degrade_with_panel(
        s,
        p.alpha,
        p.beta,
        p.r_b,
        p.sigma_b,
        &haze,
        channel_illumination(s),
    )
}

/// Sampling distribution for [`sample_params`]. Radii are drawn from
/// inclusive integer ranges and paired with `sigma = (r + 1) / 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingRanges {
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    /// Fraction of each side, centered, from which the panel center is drawn.
    pub center_box: f64,
    pub r_b: (usize, usize),
    pub r_l: (usize, usize),
}

impl Default for SamplingRanges {
    fn default() -> Self {
        Self {
            alpha: (0.6, 0.95),
            beta: (0.2, 0.6),
            center_box: 0.5,
            r_b: (3, 11),
            r_l: (20, 40),
        }
    }
}

impl SamplingRanges {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.0 <= self.alpha.1
            && self.alpha.0 > 0.0
            && self.alpha.1 <= 1.0
            && self.beta.0 <= self.beta.1
            && self.beta.0 >= 0.0
            && self.beta.1 <= 1.0
            && self.center_box > 0.0
            && self.center_box <= 1.0
            && self.r_b.0 <= self.r_b.1
            && self.r_l.0 <= self.r_l.1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid sampling ranges {self:?}")))
        }
    }
}

pub fn sigma_for_radius(r: usize) -> f64 {
    (r as f64 + 1.0) / 3.0
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn centered_range(n: usize, fraction: f64) -> (usize, usize) {
    let margin = ((1.0 - fraction) / 2.0 * n as f64).floor() as usize;
    let lo = margin.min(n - 1);
    let hi = (n - margin).max(lo + 1).min(n);
    (lo, hi)
}

pub fn sample_params(height: usize, width: usize, seed: u64) -> DegradationParams {
    sample_params_with(height, width, seed, &SamplingRanges::default())
}

/// Draw a parameter set; identical `(height, width, seed, ranges)` always
/// give identical parameters.
pub fn sample_params_with(
    height: usize,
    width: usize,
    seed: u64,
    ranges: &SamplingRanges,
) -> DegradationParams {
    let mut rng = rng::stream(seed, "degradation", &[]);
    let alpha = uniform(&mut rng, ranges.alpha);
    let beta = uniform(&mut rng, ranges.beta);
    let (r0, r1) = centered_range(height.max(1), ranges.center_box);
    let (c0, c1) = centered_range(width.max(1), ranges.center_box);
    let panel_center = (rng.random_range(r0..r1), rng.random_range(c0..c1));
    let r_b = rng.random_range(ranges.r_b.0..=ranges.r_b.1);
    let r_l = rng.random_range(ranges.r_l.0..=ranges.r_l.1);
    DegradationParams {
        alpha,
        beta,
        panel_center,
        r_b,
        sigma_b: sigma_for_radius(r_b),
        r_l,
        sigma_l: sigma_for_radius(r_l),
        seed,
    }
}
