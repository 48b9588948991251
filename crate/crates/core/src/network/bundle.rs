use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::discriminator::{Discriminator, DiscriminatorSpec};
use super::generator::{Generator, GeneratorSpec};
use crate::error::{Error, Result};
use crate::frequency::{HighFrequencyGuidance, StructureGuidance};
use crate::image::FundusImage;
use crate::rng;

pub const CHECKPOINT_FORMAT: &str = "arcnet-ckpt-v1";

/// Everything needed to rebuild the three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    /// Guidance concatenated to the generator input; `None` feeds the bare
    /// image.
    pub guidance: Option<HighFrequencyGuidance>,
    pub seed: u64,
}

impl BundleSpec {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        let expected = 3 + self.guidance.as_ref().map_or(0, |g| g.channels());
        if self.generator.in_channels != expected {
            return Err(Error::Config(format!(
                "generator takes {} input channels but the guidance setting implies {expected}",
                self.generator.in_channels
            )));
        }
        if self.generator.out_channels != self.discriminator.in_channels {
            return Err(Error::Config("generator output and discriminator input channels differ".into()));
        }
        Ok(())
    }
}

/// Generator, pixel discriminator and domain discriminator, each with its
/// own optimizer. The two discriminators share an architecture but are
/// initialized from different seeds.
pub struct ModelBundle {
    pub spec: BundleSpec,
    pub generator: Generator,
    pub pixel_disc: Discriminator,
    pub domain_disc: Discriminator,
    pub opt_generator: Adam,
    pub opt_pixel: Adam,
    pub opt_domain: Adam,
    pub step: u64,
    pub fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    step: u64,
    fingerprint: String,
    spec: BundleSpec,
    dtype: String,
    optimizers: BTreeMap<String, (AdamConfig, u64)>,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

impl ModelBundle {
    pub fn new(spec: &BundleSpec, adam: AdamConfig, fingerprint: &str, dtype: DType, device: &Device) -> Result<Self> {
        spec.validate()?;
        let seed = |i| rng::derive_seed(spec.seed, "init", &[i]);
        let generator = Generator::new(&spec.generator, seed(0), dtype, device)?;
        let pixel_disc = Discriminator::new(&spec.discriminator, seed(1), dtype, device)?;
        let domain_disc = Discriminator::new(&spec.discriminator, seed(2), dtype, device)?;
        let opt_generator = Adam::new(generator.store().named_trainable(), adam)?;
        let opt_pixel = Adam::new(pixel_disc.store().named_trainable(), adam)?;
        let opt_domain = Adam::new(domain_disc.store().named_trainable(), adam)?;
        Ok(Self {
            spec: spec.clone(),
            generator,
            pixel_disc,
            domain_disc,
            opt_generator,
            opt_pixel,
            opt_domain,
            step: 0,
            fingerprint: fingerprint.to_string(),
        })
    }

    pub fn guidance(&self) -> Option<&HighFrequencyGuidance> {
        self.spec.guidance.as_ref()
    }

    pub fn dtype(&self) -> DType {
        self.generator.store().dtype()
    }

    pub fn device(&self) -> &Device {
        self.generator.store().device()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.opt_generator.set_lr(lr);
        self.opt_pixel.set_lr(lr);
        self.opt_domain.set_lr(lr);
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let nets = [
            ("generator.", self.generator.store()),
            ("pixel_disc.", self.pixel_disc.store()),
            ("domain_disc.", self.domain_disc.store()),
        ];
        let mut out: Vec<(String, Tensor)> = nets
            .iter()
            .flat_map(|(p, s)| s.named_tensors().into_iter().map(move |(n, t)| (format!("{p}{n}"), t)))
            .collect();
        out.extend(self.opt_generator.named_state("opt.generator."));
        out.extend(self.opt_pixel.named_state("opt.pixel_disc."));
        out.extend(self.opt_domain.named_state("opt.domain_disc."));
        out
    }

    /// Write a single-file archive: the format tag on its own line, then a
    /// safetensors payload whose metadata carries the JSON header.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let optimizers = [
            ("generator", &self.opt_generator),
            ("pixel_disc", &self.opt_pixel),
            ("domain_disc", &self.opt_domain),
        ]
        .into_iter()
        .map(|(n, o)| (n.to_string(), (o.config(), o.steps())))
        .collect();
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            step: self.step,
            fingerprint: self.fingerprint.clone(),
            spec: self.spec.clone(),
            dtype: dtype_name(self.dtype())?.into(),
            optimizers,
        };
        let meta = HashMap::from([("header".to_string(), serde_json::to_string(&header)?)]);
        let tensors = self.named_tensors();
        let payload = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut bytes = Vec::with_capacity(payload.len() + 32);
        bytes.extend_from_slice(CHECKPOINT_FORMAT.as_bytes());
        bytes.push(b'\n');
        bytes.extend_from_slice(&payload);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let tag = format!("{CHECKPOINT_FORMAT}\n");
        let payload = bytes
            .strip_prefix(tag.as_bytes())
            .ok_or_else(|| Error::Checkpoint(format!("{} is not an {CHECKPOINT_FORMAT} archive", path.display())))?;
        let (_, st_meta) =
            safetensors::SafeTensors::read_metadata(payload).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let header_json = st_meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("header"))
            .ok_or_else(|| Error::Checkpoint("archive has no header".into()))?;
        let header: Header = serde_json::from_str(header_json)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format tag {}", header.format)));
        }
        let dtype = match header.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other}"))),
        };
        let tensors = candle_core::safetensors::load_buffer(payload, device)?;
        let adam = |name: &str| {
            header
                .optimizers
                .get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer {name}")))
        };
        let (gen_cfg, gen_steps) = adam("generator")?;
        let mut bundle = Self::new(&header.spec, gen_cfg, &header.fingerprint, dtype, device)?;
        bundle.generator.store().load(&tensors, "generator.")?;
        bundle.pixel_disc.store().load(&tensors, "pixel_disc.")?;
        bundle.domain_disc.store().load(&tensors, "domain_disc.")?;
        bundle.opt_generator.load_state(&tensors, "opt.generator.", gen_steps)?;
        let (pix_cfg, pix_steps) = adam("pixel_disc")?;
        bundle.opt_pixel = Adam::new(bundle.pixel_disc.store().named_trainable(), pix_cfg)?;
        bundle.opt_pixel.load_state(&tensors, "opt.pixel_disc.", pix_steps)?;
        let (dom_cfg, dom_steps) = adam("domain_disc")?;
        bundle.opt_domain = Adam::new(bundle.domain_disc.store().named_trainable(), dom_cfg)?;
        bundle.opt_domain.load_state(&tensors, "opt.domain_disc.", dom_steps)?;
        bundle.step = header.step;
        Ok(bundle)
    }
}

/// Stack images into a `(batch, 3, H, W)` tensor of `[0, 1]` intensities.
pub fn images_to_tensor(images: &[&FundusImage], dtype: DType, device: &Device) -> Result<Tensor> {
    rasters_to_tensor(&images.iter().map(|i| i.pixels()).collect::<Vec<_>>(), dtype, device)
}

fn rasters_to_tensor(rasters: &[&Array3<f64>], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = rasters.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let dim = first.dim();
    if rasters.iter().any(|r| r.dim() != dim) {
        return Err(Error::Shape("batch images differ in size".into()));
    }
    let data: Vec<f64> = rasters.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(data, (rasters.len(), dim.0, dim.1, dim.2), device)?.to_dtype(dtype)?)
}

/// `[0, 1] -> [-1, 1]`.
pub fn to_network_range(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(2.0, -1.0)?)
}

/// `[-1, 1] -> [0, 1]`.
pub fn to_unit_range(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.5)?)
}

/// Generator input for a batch: the image in network range, followed by the
/// raw (unrescaled) guidance raster when guidance is enabled.
pub fn generator_input(
    images: &[&FundusImage],
    guidance: Option<&dyn StructureGuidance>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let x = to_network_range(&images_to_tensor(images, dtype, device)?)?;
    match guidance {
        None => Ok(x),
        Some(g) => {
            let rasters = images.iter().map(|i| g.guidance(i)).collect::<Result<Vec<_>>>()?;
            let gt = rasters_to_tensor(&rasters.iter().collect::<Vec<_>>(), dtype, device)?;
            Ok(Tensor::cat(&[&x, &gt], 1)?)
        }
    }
}

/// Split a `(batch, 3, H, W)` tensor of `[0, 1]` intensities into images,
/// clamping stray values.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<FundusImage>> {
    let (b, c, h, w) = t.dims4()?;
    let data = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    data.chunks(c * h * w)
        .take(b)
        .map(|chunk| {
            let pixels = Array3::from_shape_vec((c, h, w), chunk.to_vec()).expect("chunk size");
            let mut img = FundusImage::new(pixels, None)?;
            img.clamp_unit();
            Ok(img)
        })
        .collect()
}

/// Restore degraded images in inference mode. Every image must already be
/// at a size the generator accepts; masks carry over to the outputs.
pub fn restore_batch(bundle: &ModelBundle, degraded: &[&FundusImage]) -> Result<Vec<FundusImage>> {
    let guidance = bundle.guidance().map(|g| g as &dyn StructureGuidance);
    let input = generator_input(degraded, guidance, bundle.dtype(), bundle.device())?;
    let out = to_unit_range(&bundle.generator.forward(&input, false)?)?;
    tensor_to_images(&out)?
        .into_iter()
        .zip(degraded)
        .map(|(img, src)| img.with_mask(src.mask().cloned()))
        .collect()
}

pub fn restore(bundle: &ModelBundle, degraded: &FundusImage) -> Result<FundusImage> {
    Ok(restore_batch(bundle, &[degraded])?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom;

    fn tiny_spec(guidance: bool) -> BundleSpec {
        BundleSpec {
            generator: GeneratorSpec {
                in_channels: if guidance { 6 } else { 3 },
                depth: 4,
                base_width: 4,
                max_width: 8,
                ..Default::default()
            },
            discriminator: DiscriminatorSpec { widths: vec![4, 4, 4, 4, 1], ..Default::default() },
            guidance: guidance.then(|| HighFrequencyGuidance::new(5, 2.0).unwrap()),
            seed: 3,
        }
    }

    #[test]
    fn guidance_and_channels_must_agree() {
        let mut spec = tiny_spec(true);
        spec.generator.in_channels = 3;
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        assert!(tiny_spec(false).validate().is_ok());
    }

    #[test]
    fn restore_is_deterministic_and_in_range() {
        let bundle = ModelBundle::new(&tiny_spec(true), AdamConfig::default(), "fp", DType::F32, &Device::Cpu).unwrap();
        let (_, degraded) = phantom::simulated_pair(32, 32, 0);
        let a = restore(&bundle, &degraded).unwrap();
        let b = restore(&bundle, &degraded).unwrap();
        assert_eq!(a, b);
        assert!(a.is_in_unit_range());
        assert_eq!((a.height(), a.width()), (32, 32));
        assert_eq!(a.mask(), degraded.mask());
        let odd = FundusImage::filled(24, 32, 0.5);
        assert!(matches!(restore(&bundle, &odd), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.arcnet");
        let mut bundle =
            ModelBundle::new(&tiny_spec(true), AdamConfig::default(), "abc", DType::F32, &Device::Cpu).unwrap();
        bundle.step = 17;
        bundle.save(&path).unwrap();
        let raw = fs::read(&path).unwrap();
        assert!(raw.starts_with(b"arcnet-ckpt-v1\n"));
        let back = ModelBundle::load(&path, &Device::Cpu).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.fingerprint, "abc");
        assert_eq!(back.spec, bundle.spec);
        let (_, degraded) = phantom::simulated_pair(32, 32, 1);
        assert_eq!(restore(&bundle, &degraded).unwrap(), restore(&back, &degraded).unwrap());

        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(ModelBundle::load(&path, &Device::Cpu), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn discriminators_share_shape_not_weights() {
        let bundle = ModelBundle::new(&tiny_spec(false), AdamConfig::default(), "", DType::F32, &Device::Cpu).unwrap();
        let p = bundle.pixel_disc.store().named_tensors();
        let d = bundle.domain_disc.store().named_tensors();
        assert_eq!(p.len(), d.len());
        for ((na, ta), (nb, tb)) in p.iter().zip(&d) {
            assert_eq!(na, nb);
            assert_eq!(ta.dims(), tb.dims());
        }
        let w = |v: &[(String, Tensor)]| v[0].1.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_ne!(w(&p), w(&d));
    }
}
