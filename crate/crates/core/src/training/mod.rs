//! Domain-adaptation training: paired source batches teach restoration,
//! unpaired target batches are pulled toward the source outputs by the
//! domain discriminator.

mod augment;
mod config;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

pub use augment::{augment, CropWindow};
pub use config::TrainConfig;

use crate::degradation::{sample_params_with, simulate_cataract};
use crate::error::{Error, Result};
use crate::frequency::StructureGuidance;
use crate::image::{load_image, FundusImage};
use crate::manifest::{DatasetManifest, Role};
use crate::network::{generator_input, images_to_tensor, to_network_range, to_unit_range, ModelBundle};
use crate::objectives::{adversarial_loss, ensure_finite, image_l1, structure_l1, LossReport, LossWeights, Side};
use crate::rng;

pub const LOG_FILE: &str = "train_log.csv";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step}.arcnet"))
}

#[derive(Debug, Clone)]
pub struct SourcePair {
    pub degraded: FundusImage,
    pub clear: FundusImage,
}

pub enum SourceData {
    /// Pre-baked degraded/clear pairs.
    Paired(Vec<SourcePair>),
    /// Clear images only; a fresh degradation is sampled for every image in
    /// every epoch.
    Synthesized(Vec<FundusImage>),
}

impl SourceData {
    pub fn len(&self) -> usize {
        match self {
            Self::Paired(p) => p.len(),
            Self::Synthesized(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One step's worth of augmented images.
#[derive(Debug, Clone)]
pub struct Batch {
    pub degraded: Vec<FundusImage>,
    pub clear: Vec<FundusImage>,
    pub target: Vec<FundusImage>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub use_structure_loss: bool,
    pub use_domain_loss: bool,
    /// Skip both discriminator updates (used to isolate generator updates).
    pub freeze_discriminators: bool,
}

impl StepOptions {
    pub fn from_config(c: &TrainConfig) -> Self {
        Self {
            weights: c.weights,
            use_structure_loss: c.use_structure_loss,
            use_domain_loss: c.use_domain_loss,
            freeze_discriminators: false,
        }
    }
}

fn refs(v: &[FundusImage]) -> Vec<&FundusImage> {
    v.iter().collect()
}

fn rename_term(term: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Numeric { detail, .. } => Error::numeric(term, detail),
        other => other,
    }
}

/// One discriminator update each on detached generator outputs. Returns
/// the pixel and (when `fake_t` is given) domain discriminator losses.
pub fn update_discriminators(
    bundle: &mut ModelBundle,
    clear_net: &Tensor,
    fake_s: &Tensor,
    fake_t: Option<&Tensor>,
) -> Result<(f64, Option<f64>)> {
    let fake_s = fake_s.detach();
    let real = bundle.pixel_disc.forward(clear_net, true)?;
    let fake = bundle.pixel_disc.forward(&fake_s, true)?;
    let d_p = adversarial_loss(Some(&real), &fake, Side::Discriminator).map_err(rename_term("d_p"))?;
    bundle.opt_pixel.step(&d_p.backward()?)?;
    let d_p = ensure_finite("d_p", &d_p)?;

    let d_d = match fake_t {
        None => None,
        Some(ft) => {
            // Source outputs play "real", target outputs "fake".
            let real = bundle.domain_disc.forward(&fake_s, true)?;
            let fake = bundle.domain_disc.forward(&ft.detach(), true)?;
            let d_d = adversarial_loss(Some(&real), &fake, Side::Discriminator).map_err(rename_term("d_d"))?;
            bundle.opt_domain.step(&d_d.backward()?)?;
            Some(ensure_finite("d_d", &d_d)?)
        }
    };
    Ok((d_p, d_d))
}

/// Generator-side terms on one batch, still attached to the graph.
pub struct GeneratorLosses {
    pub l_p: Tensor,
    pub l_i: Tensor,
    pub l_s: Option<Tensor>,
    pub l_d: Option<Tensor>,
    pub total: Tensor,
}

/// `fake_s`/`fake_t` are raw generator outputs in `[-1, 1]`; `clear` holds
/// the source references in `[0, 1]`. Image and structure terms only ever
/// see source outputs.
pub fn generator_losses(
    bundle: &ModelBundle,
    fake_s: &Tensor,
    clear: &Tensor,
    fake_t: Option<&Tensor>,
    opts: &StepOptions,
) -> Result<GeneratorLosses> {
    let w = opts.weights;
    let s_hat = to_unit_range(fake_s)?;
    let l_p = adversarial_loss(None, &bundle.pixel_disc.forward(fake_s, true)?, Side::Generator).map_err(rename_term("l_p"))?;
    let l_i = image_l1(&s_hat, clear)?;
    let mut total = (&l_p + (&l_i * w.lambda1)?)?;
    let l_s = if opts.use_structure_loss {
        let g = bundle
            .guidance()
            .ok_or_else(|| Error::Config("structure loss needs guidance".into()))?;
        let l = structure_l1(&s_hat, clear, g as &dyn StructureGuidance)?;
        total = (total + (&l * w.lambda2)?)?;
        Some(l)
    } else {
        None
    };
    let l_d = match fake_t {
        Some(ft) => {
            let logits = bundle.domain_disc.forward(ft, true)?;
            let l = adversarial_loss(None, &logits, Side::Generator).map_err(rename_term("l_d"))?;
            total = (total + (&l * w.lambda3)?)?;
            Some(l)
        }
        None => None,
    };
    Ok(GeneratorLosses {
        l_p,
        l_i,
        l_s,
        l_d,
        total,
    })
}

/// One optimization step: pixel discriminator, domain discriminator, then
/// generator. The returned report holds the generator-side terms used for
/// the generator update.
pub fn train_step(bundle: &mut ModelBundle, batch: &Batch, opts: &StepOptions) -> Result<LossReport> {
    let n = batch.degraded.len();
    if n == 0 || batch.clear.len() != n {
        return Err(Error::Shape(format!(
            "source batch has {n} degraded and {} clear images",
            batch.clear.len()
        )));
    }
    if opts.use_domain_loss && batch.target.len() != n {
        return Err(Error::Shape(format!(
            "source and target batches must match in size ({n} vs {})",
            batch.target.len()
        )));
    }
    let (dtype, device) = (bundle.dtype(), bundle.device().clone());
    let guidance = bundle.guidance().copied();
    let guidance = guidance.as_ref().map(|g| g as &dyn StructureGuidance);

    let src_in = generator_input(&refs(&batch.degraded), guidance, dtype, &device)?;
    let clear = images_to_tensor(&refs(&batch.clear), dtype, &device)?;
    let fake_s = bundle.generator.forward(&src_in, true)?;
    let fake_t = if opts.use_domain_loss {
        let tgt_in = generator_input(&refs(&batch.target), guidance, dtype, &device)?;
        Some(bundle.generator.forward(&tgt_in, true)?)
    } else {
        None
    };

    if !opts.freeze_discriminators {
        let (d_p, d_d) = update_discriminators(bundle, &to_network_range(&clear)?, &fake_s, fake_t.as_ref())?;
        log::trace!("step {}: d_p {d_p:.4} d_d {d_d:?}", bundle.step + 1);
    }

    let losses = generator_losses(bundle, &fake_s, &clear, fake_t.as_ref(), opts)?;
    let l_p = ensure_finite("l_p", &losses.l_p)?;
    let l_i = ensure_finite("l_i", &losses.l_i)?;
    let l_s = losses.l_s.as_ref().map(|l| ensure_finite("l_s", l)).transpose()?.unwrap_or(0.0);
    let l_d = losses.l_d.as_ref().map(|l| ensure_finite("l_d", l)).transpose()?.unwrap_or(0.0);
    ensure_finite("total", &losses.total)?;
    bundle.opt_generator.step(&losses.total.backward()?)?;
    bundle.step += 1;
    Ok(LossReport::new(bundle.step, l_p, l_i, l_s, l_d, &opts.weights))
}

/// Model plus position in the schedule.
pub struct TrainState {
    pub bundle: ModelBundle,
    pub epoch: usize,
    /// Index of the next batch within `epoch`.
    pub batch: usize,
}

pub struct Trainer {
    config: TrainConfig,
    fingerprint: String,
    source: SourceData,
    targets: Vec<FundusImage>,
    state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig, source: SourceData, targets: Vec<FundusImage>) -> Result<Self> {
        Self::check_inputs(&config, &source, &targets)?;
        let fingerprint = config.fingerprint();
        let bundle = ModelBundle::new(&config.bundle_spec(), config.adam(), &fingerprint, DType::F32, &Device::Cpu)?;
        Ok(Self {
            config,
            fingerprint,
            source,
            targets,
            state: TrainState {
                bundle,
                epoch: 0,
                batch: 0,
            },
        })
    }

    /// Continue from a checkpoint written by a run with the same config.
    pub fn resume(config: TrainConfig, source: SourceData, targets: Vec<FundusImage>, checkpoint: &Path) -> Result<Self> {
        Self::check_inputs(&config, &source, &targets)?;
        let fingerprint = config.fingerprint();
        let bundle = ModelBundle::load(checkpoint, &Device::Cpu)?;
        if bundle.fingerprint != fingerprint || bundle.spec != config.bundle_spec() {
            return Err(Error::Config(format!(
                "checkpoint {} was written by a different configuration",
                checkpoint.display()
            )));
        }
        let mut trainer = Self {
            config,
            fingerprint,
            source,
            targets,
            state: TrainState {
                bundle,
                epoch: 0,
                batch: 0,
            },
        };
        let spe = trainer.steps_per_epoch() as u64;
        let step = trainer.state.bundle.step;
        trainer.state.epoch = (step / spe) as usize;
        trainer.state.batch = (step % spe) as usize;
        Ok(trainer)
    }

    fn check_inputs(config: &TrainConfig, source: &SourceData, targets: &[FundusImage]) -> Result<()> {
        config.validate()?;
        if source.is_empty() {
            return Err(Error::Config("no source images".into()));
        }
        if config.use_domain_loss && targets.is_empty() {
            return Err(Error::Config("domain loss enabled but no target images".into()));
        }
        if let SourceData::Paired(pairs) = source {
            if pairs.iter().any(|p| p.degraded.pixels().dim() != p.clear.pixels().dim()) {
                return Err(Error::Data("a source pair has mismatched image sizes".into()));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.state.bundle
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.state.bundle
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.source.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.config.epochs) as u64
    }

    /// Assemble batch `index` of `epoch`. Every random choice comes from a
    /// stream keyed by `(epoch, index)`, so any batch can be rebuilt without
    /// replaying earlier ones.
    pub fn batch(&self, epoch: usize, index: usize) -> Result<Batch> {
        let c = &self.config;
        let n = self.source.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(c.seed, "shuffle", &[epoch as u64]));
        let lo = index * c.batch_size;
        let members = &order[lo.min(n)..(lo + c.batch_size).min(n)];
        if members.is_empty() {
            return Err(Error::Param(format!("epoch has no batch {index}")));
        }

        let mut aug = rng::stream(c.seed, "augment", &[epoch as u64, index as u64]);
        let mut degraded = Vec::with_capacity(members.len());
        let mut clear = Vec::with_capacity(members.len());
        for &i in members {
            let (d, s) = match &self.source {
                SourceData::Paired(p) => augment(&p[i].degraded, Some(&p[i].clear), &c.resize_scales, c.crop, &mut aug)?,
                SourceData::Synthesized(imgs) => {
                    let s = &imgs[i];
                    let seed = rng::derive_seed(c.seed, "synthesis", &[epoch as u64, i as u64]);
                    let params = sample_params_with(s.height(), s.width(), seed, &c.sampling);
                    augment(&simulate_cataract(s, &params)?, Some(s), &c.resize_scales, c.crop, &mut aug)?
                }
            };
            degraded.push(d);
            clear.push(s.expect("paired augmentation"));
        }

        let mut target = Vec::new();
        if c.use_domain_loss {
            let nt = self.targets.len();
            let picks: Vec<usize> = if nt >= n {
                let mut t_order: Vec<usize> = (0..nt).collect();
                t_order.shuffle(&mut rng::stream(c.seed, "target-order", &[epoch as u64]));
                t_order[lo..lo + members.len()].to_vec()
            } else {
                let mut r = rng::stream(c.seed, "target-draw", &[epoch as u64, index as u64]);
                (0..members.len()).map(|_| r.random_range(0..nt)).collect()
            };
            for t in picks {
                target.push(augment(&self.targets[t], None, &c.resize_scales, c.crop, &mut aug)?.0);
            }
        }
        Ok(Batch { degraded, clear, target })
    }

    /// Train through the remaining schedule, writing the log and checkpoints
    /// under `output_dir`. Returns the final checkpoint path.
    pub fn run(&mut self) -> Result<PathBuf> {
        self.run_with(|_| {})
    }

    /// Like [`run`](Self::run), calling `on_step` after every step.
    pub fn run_with(&mut self, mut on_step: impl FnMut(&LossReport)) -> Result<PathBuf> {
        let out = self.config.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let cfg_path = out.join("config.json");
        fs::write(&cfg_path, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(&cfg_path, e))?;
        let mut log = self.open_log(&out)?;
        let opts = StepOptions::from_config(&self.config);
        let spe = self.steps_per_epoch();
        let mut last_saved = None;

        while self.state.epoch < self.config.epochs {
            let epoch = self.state.epoch;
            self.state.bundle.set_lr(self.config.learning_rate(epoch));
            while self.state.batch < spe {
                let batch = self.batch(epoch, self.state.batch)?;
                let report = train_step(&mut self.state.bundle, &batch, &opts)?;
                writeln!(log, "{}", report.csv_row()).map_err(|e| Error::io(out.join(LOG_FILE), e))?;
                on_step(&report);
                self.state.batch += 1;
                let step = self.state.bundle.step;
                if self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0 {
                    log.flush().map_err(|e| Error::io(out.join(LOG_FILE), e))?;
                    let p = checkpoint_path(&out, step);
                    self.state.bundle.save(&p)?;
                    last_saved = Some(step);
                }
            }
            log::info!("epoch {}/{} done at step {}", epoch + 1, self.config.epochs, self.state.bundle.step);
            self.state.epoch += 1;
            self.state.batch = 0;
        }
        log.flush().map_err(|e| Error::io(out.join(LOG_FILE), e))?;
        let step = self.state.bundle.step;
        let path = checkpoint_path(&out, step);
        if last_saved != Some(step) {
            self.state.bundle.save(&path)?;
        }
        Ok(path)
    }

    /// Open the log for appending, dropping rows past the current step so a
    /// resumed run continues without gaps or duplicates.
    fn open_log(&self, out: &Path) -> Result<File> {
        let path = out.join(LOG_FILE);
        let step = self.state.bundle.step;
        let kept: Vec<LossReport> = if step > 0 && path.exists() {
            read_log(&path)?.into_iter().filter(|r| r.step <= step).collect()
        } else {
            Vec::new()
        };
        let mut text = format!("{}\n", LossReport::CSV_HEADER);
        for r in &kept {
            text.push_str(&r.csv_row());
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(LossReport::parse_csv_row)
        .collect()
}

fn load_manifest(path: Option<&PathBuf>, what: &str) -> Result<DatasetManifest> {
    let path = path.ok_or_else(|| Error::Config(format!("{what} manifest is required")))?;
    let m = DatasetManifest::load(path)?;
    m.validate()?;
    Ok(m)
}

/// Read source and target images named by the config's manifests.
pub fn load_training_data(config: &TrainConfig) -> Result<(SourceData, Vec<FundusImage>)> {
    let src = load_manifest(config.source_manifest.as_ref(), "source")?;
    let source = if config.synthesize_sources {
        let clear = src.paths(Role::SourceClear).iter().map(load_image).collect::<Result<Vec<_>>>()?;
        SourceData::Synthesized(clear)
    } else {
        let pairs = src
            .pairs(Role::SourceDegraded, Role::SourceClear)?
            .into_iter()
            .map(|p| {
                Ok(SourcePair {
                    degraded: load_image(&p.first)?,
                    clear: load_image(&p.second)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        SourceData::Paired(pairs)
    };
    if source.is_empty() {
        return Err(Error::Config("source manifest lists no usable images".into()));
    }
    let targets = if config.use_domain_loss {
        let tgt = load_manifest(config.target_manifest.as_ref(), "target")?;
        let t = tgt.paths(Role::Target).iter().map(load_image).collect::<Result<Vec<_>>>()?;
        if t.is_empty() {
            return Err(Error::Config("target manifest lists no target images".into()));
        }
        t
    } else {
        Vec::new()
    };
    Ok((source, targets))
}

/// Train from the manifests in `config`, optionally resuming.
pub fn fit(config: &TrainConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let (source, targets) = load_training_data(config)?;
    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(config.clone(), source, targets, ckpt)?,
        None => Trainer::new(config.clone(), source, targets)?,
    };
    trainer.run()
}
