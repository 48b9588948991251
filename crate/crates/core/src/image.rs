//! Fundus image representation, 8-bit file I/O and field-of-view masks.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageReader, RgbImage};
use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

/// Boolean raster; `true` marks pixels inside the fundus field of view.
pub type Mask = Array2<bool>;

/// RGB raster with intensities in `[0, 1]`, stored channel-major as
/// `(channel, row, column)`, plus an optional field-of-view mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FundusImage {
    pixels: Array3<f64>,
    mask: Option<Mask>,
}

impl FundusImage {
    pub fn new(pixels: Array3<f64>, mask: Option<Mask>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Shape("image has zero area".into()));
        }
        if let Some(m) = &mask {
            if m.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "mask {:?} does not match image {h}x{w}",
                    m.dim()
                )));
            }
        }
        Ok(Self { pixels, mask })
    }

    /// Constant image with every channel set to `value`.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            pixels: Array3::from_elem((3, height, width), value),
            mask: None,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        Self {
            pixels: Array3::from_shape_fn((3, height, width), |(c, i, j)| f(c, i, j)),
            mask: None,
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array3<f64> {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.pixels.slice(s![c, .., ..])
    }

    pub fn channel_mut(&mut self, c: usize) -> ArrayViewMut2<'_, f64> {
        self.pixels.slice_mut(s![c, .., ..])
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }

    pub fn with_mask(mut self, mask: Option<Mask>) -> Result<Self> {
        if let Some(m) = &mask {
            if m.dim() != (self.height(), self.width()) {
                return Err(Error::Shape("mask does not match image".into()));
            }
        }
        self.mask = mask;
        Ok(self)
    }

    /// Mask, or an all-true raster when the image carries none.
    pub fn mask_or_full(&self) -> Mask {
        self.mask
            .clone()
            .unwrap_or_else(|| Array2::from_elem((self.height(), self.width()), true))
    }

    pub fn is_in_unit_range(&self) -> bool {
        self.pixels.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(&mut self) {
        self.pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// Copy with the pixel window `[top, top+height) x [left, left+width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height() || left + width > self.width() {
            return Err(Error::Shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        let pixels = self
            .pixels
            .slice(s![.., top..top + height, left..left + width])
            .to_owned();
        let mask = self
            .mask
            .as_ref()
            .map(|m| m.slice(s![top..top + height, left..left + width]).to_owned());
        Self::new(pixels, mask)
    }

    /// Bilinear resize with half-pixel centers; the mask is resampled by
    /// nearest neighbour.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Param("resize target has zero area".into()));
        }
        if height == self.height() && width == self.width() {
            return Ok(self.clone());
        }
        let (sh, sw) = (self.height(), self.width());
        let ys = sample_positions(sh, height);
        let xs = sample_positions(sw, width);
        let mut out = Array3::zeros((3, height, width));
        for c in 0..3 {
            let src = self.channel(c);
            for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
                    let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
                    out[[c, i, j]] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        let mask = self.mask.as_ref().map(|m| {
            Array2::from_shape_fn((height, width), |(i, j)| {
                let y = ((i as f64 + 0.5) * sh as f64 / height as f64) as usize;
                let x = ((j as f64 + 0.5) * sw as f64 / width as f64) as usize;
                m[[y.min(sh - 1), x.min(sw - 1)]]
            })
        });
        Self::new(out, mask)
    }
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

fn open_dynamic(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Load an 8-bit, 3-channel PNG or JPEG. A byte value `v` maps to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<FundusImage> {
    let path = path.as_ref();
    let img = open_dynamic(path)?;
    let rgb = match img.color() {
        ColorType::Rgb8 => img.into_rgb8(),
        other => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit RGB, found {other:?}"),
            })
        }
    };
    Ok(from_rgb8(&rgb))
}

pub fn from_rgb8(rgb: &RgbImage) -> FundusImage {
    let (w, h) = rgb.dimensions();
    let pixels = Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
        rgb.get_pixel(j as u32, i as u32)[c] as f64 / 255.0
    });
    FundusImage { pixels, mask: None }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn to_rgb8(img: &FundusImage) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        image::Rgb([0, 1, 2].map(|c| quantize(img.pixels[[c, i, j]])))
    })
}

/// Write an 8-bit image; the format follows the file extension. Values are
/// quantized with round-half-up, so `0.5` becomes byte 128.
pub fn save_image(img: &FundusImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if !img.is_in_unit_range() {
        return Err(Error::Param(format!(
            "refusing to save {}: pixel values outside [0,1]",
            path.display()
        )));
    }
    save_rgb8(&to_rgb8(img), path)
}

fn save_rgb8(rgb: &RgbImage, path: &Path) -> Result<()> {
    rgb.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Load a binary mask from any 8-bit image; luminance above 127 is inside.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let gray = open_dynamic(path)?.into_luma8();
    let (w, h) = gray.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        gray.get_pixel(j as u32, i as u32)[0] > 127
    }))
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = mask.dim();
    let gray = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    gray.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

const FOV_CLOSING_RADIUS: isize = 5;

/// Threshold the per-pixel channel maximum and close the result with a disk
/// of radius 5. Out-of-bounds neighbours are ignored by both the dilation
/// and the erosion, so a uniform image maps to a uniform mask.
pub fn estimate_fov_mask(img: &FundusImage, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Param(format!(
            "fov threshold must lie in (0,1), got {threshold}"
        )));
    }
    let (h, w) = (img.height(), img.width());
    let raw = Array2::from_shape_fn((h, w), |(i, j)| {
        (0..3).map(|c| img.pixels[[c, i, j]]).fold(f64::MIN, f64::max) >= threshold
    });
    let disk = disk_offsets(FOV_CLOSING_RADIUS);
    let dilated = morph(&raw, &disk, true);
    Ok(morph(&dilated, &disk, false))
}

fn disk_offsets(r: isize) -> Vec<(isize, isize)> {
    let mut v = Vec::new();
    for di in -r..=r {
        for dj in -r..=r {
            if di * di + dj * dj <= r * r {
                v.push((di, dj));
            }
        }
    }
    v
}

/// Dilation (`any`) or erosion (`all`) over in-bounds neighbours.
fn morph(src: &Mask, offsets: &[(isize, isize)], dilate: bool) -> Mask {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut neighbours = offsets.iter().filter_map(|&(di, dj)| {
            let (y, x) = (i as isize + di, j as isize + dj);
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
                .then(|| src[[y as usize, x as usize]])
        });
        if dilate {
            neighbours.any(|v| v)
        } else {
            neighbours.all(|v| v)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_scaling() {
        let rgb = RgbImage::from_fn(3, 1, |x, _| {
            let v = [255u8, 0, 128][x as usize];
            image::Rgb([v, v, v])
        });
        let img = from_rgb8(&rgb);
        assert_eq!(img.pixels()[[0, 0, 0]], 1.0);
        assert_eq!(img.pixels()[[1, 0, 1]], 0.0);
        assert!((img.pixels()[[2, 0, 2]] - 128.0 / 255.0).abs() < 1e-12);
        assert!((img.pixels()[[2, 0, 2]] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn save_quantizes_half_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.png");
        save_image(&FundusImage::filled(4, 5, 0.5), &path).unwrap();
        let back = load_image(&path).unwrap();
        assert!(back.pixels().iter().all(|&v| v == 128.0 / 255.0));

        for (value, byte) in [(0.0, 0u8), (1.0, 255u8)] {
            let p = dir.path().join(format!("{byte}.png"));
            save_image(&FundusImage::filled(2, 2, value), &p).unwrap();
            let raw = image::open(&p).unwrap().into_rgb8();
            assert!(raw.as_raw().iter().all(|&b| b == byte));
        }
    }

    #[test]
    fn grayscale_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        image::GrayImage::new(4, 4).save(&path).unwrap();
        assert!(matches!(load_image(&path), Err(Error::Format { .. })));
        let rgba = dir.path().join("rgba.png");
        image::RgbaImage::new(4, 4).save(&rgba).unwrap();
        assert!(matches!(load_image(&rgba), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_image("/nonexistent/nothing.png"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn out_of_range_save_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = FundusImage::filled(2, 2, 1.5);
        assert!(save_image(&img, dir.path().join("x.png")).is_err());
    }

    #[test]
    fn fov_uniform_images() {
        let black = estimate_fov_mask(&FundusImage::filled(32, 32, 0.0), 0.05).unwrap();
        assert!(black.iter().all(|&v| !v));
        let white = estimate_fov_mask(&FundusImage::filled(32, 32, 1.0), 0.05).unwrap();
        assert!(white.iter().all(|&v| v));
    }

    #[test]
    fn fov_disk_area() {
        let img = FundusImage::from_fn(256, 256, |_, i, j| {
            let (y, x) = (i as f64 - 128.0, j as f64 - 128.0);
            if y * y + x * x <= 100.0 * 100.0 {
                0.8
            } else {
                0.0
            }
        });
        let mask = estimate_fov_mask(&img, 0.05).unwrap();
        let area = mask.iter().filter(|&&v| v).count() as f64;
        let expected = std::f64::consts::PI * 100.0 * 100.0;
        assert!((area - expected).abs() / expected < 0.02, "area {area}");
    }

    #[test]
    fn fov_closing_fills_dark_vessels() {
        let mut img = FundusImage::filled(40, 40, 0.6);
        for c in 0..3 {
            img.channel_mut(c).column_mut(20).fill(0.0);
        }
        let mask = estimate_fov_mask(&img, 0.05).unwrap();
        assert!(mask.iter().all(|&v| v));
        assert!(img.channel(0).column(20).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fov_rejects_bad_threshold() {
        let img = FundusImage::filled(4, 4, 0.5);
        assert!(estimate_fov_mask(&img, 0.0).is_err());
        assert!(estimate_fov_mask(&img, 1.0).is_err());
    }

    #[test]
    fn mask_shape_is_checked() {
        let img = FundusImage::filled(4, 4, 0.5);
        assert!(img.clone().with_mask(Some(Array2::from_elem((4, 3), true))).is_err());
        assert!(img.with_mask(Some(Array2::from_elem((4, 4), true))).is_ok());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = FundusImage::filled(10, 12, 0.3);
        let up = img.resize(17, 23).unwrap();
        assert!(up.pixels().iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert_eq!(img.resize(10, 12).unwrap(), img);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn png_round_trip_within_one_step(
            h in 1usize..12, w in 1usize..12, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
            let img = FundusImage::new(Array3::from_shape_vec((3, h, w), vals).unwrap(), None).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.png");
            save_image(&img, &path).unwrap();
            let back = load_image(&path).unwrap();
            let err = img.pixels().iter().zip(back.pixels()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(err <= 1.0 / 255.0 + 1e-12);
        }
    }
}
