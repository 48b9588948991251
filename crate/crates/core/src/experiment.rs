//! End-to-end protocol: train with a set of ablation flags, restore an
//! evaluation set, score it and write one result row.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_dir, EvalReport};
use crate::image::{load_image, save_image, FundusImage};
use crate::manifest::{DatasetManifest, Role};
use crate::network::{restore, ModelBundle};
use crate::training::{fit, TrainConfig};

/// Which manifest entries to restore and what to compare them with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPairing {
    pub manifest: PathBuf,
    #[serde(default = "default_from")]
    pub input_role: Role,
    #[serde(default = "default_to")]
    pub reference_role: Role,
    /// Optional overlap masks named by pair id.
    #[serde(default)]
    pub mask_dir: Option<PathBuf>,
}

fn default_from() -> Role {
    Role::Target
}

fn default_to() -> Role {
    Role::Reference
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub source_manifest: PathBuf,
    pub target_manifest: PathBuf,
    pub use_hfc: bool,
    pub use_structure_loss: bool,
    pub use_domain_loss: bool,
    pub eval: EvalPairing,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Everything else about training. Manifests, flags, seed and output
    /// directory in here are overwritten from the fields above.
    #[serde(default)]
    pub train: TrainConfig,
}

impl ExperimentSpec {
    /// Relative paths in the file are taken relative to the file itself.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut spec.source_manifest,
            &mut spec.target_manifest,
            &mut spec.eval.manifest,
            &mut spec.output_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(m) = spec.eval.mask_dir.as_mut().filter(|m| m.is_relative()) {
            *m = base.join(&*m);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_structure_loss && !self.use_hfc {
            return Err(Error::Config(
                "use_structure_loss requires use_hfc: a structure loss without guidance is undefined".into(),
            ));
        }
        if self.name.trim().is_empty() {
            return Err(Error::Config("experiment name is empty".into()));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            source_manifest: Some(self.source_manifest.clone()),
            target_manifest: Some(self.target_manifest.clone()),
            use_hfc: self.use_hfc,
            use_structure_loss: self.use_structure_loss,
            use_domain_loss: self.use_domain_loss,
            seed: self.seed,
            output_dir: self.output_dir.join("train"),
            ..self.train.clone()
        }
    }
}

/// The single machine-readable row an experiment produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub name: String,
    pub seed: u64,
    pub fingerprint: String,
    pub use_hfc: bool,
    pub use_structure_loss: bool,
    pub use_domain_loss: bool,
    pub n_pairs: usize,
    pub mean_ssim: Option<f64>,
    pub mean_psnr: Option<f64>,
}

impl ResultRow {
    pub const CSV_HEADER: &'static str =
        "name,seed,fingerprint,use_hfc,use_structure_loss,use_domain_loss,n_pairs,mean_ssim,mean_psnr";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| match v {
            None => String::new(),
            Some(x) if x.is_infinite() && x > 0.0 => "inf".into(),
            Some(x) => x.to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.name,
            self.seed,
            self.fingerprint,
            self.use_hfc,
            self.use_structure_loss,
            self.use_domain_loss,
            self.n_pairs,
            opt(self.mean_ssim),
            opt(self.mean_psnr)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutputs {
    pub checkpoint: PathBuf,
    pub restored_dir: PathBuf,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
    pub result_json: PathBuf,
    pub result_csv: PathBuf,
}

/// Restore at `size`×`size` (the generator's working size) and resize the
/// result back to the input's own size.
pub fn restore_at_size(bundle: &ModelBundle, img: &FundusImage, size: usize) -> Result<FundusImage> {
    let (h, w) = (img.height(), img.width());
    if (h, w) == (size, size) {
        return restore(bundle, img);
    }
    let mut out = restore(bundle, &img.resize(size, size)?)?.resize(h, w)?;
    out.clamp_unit();
    out.with_mask(img.mask().cloned())
}

/// Restore each `(id, path)` into `out_dir/<id>.png`.
pub fn restore_files(bundle: &ModelBundle, inputs: &[(String, PathBuf)], out_dir: &Path, size: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    inputs
        .iter()
        .map(|(id, path)| {
            let out = out_dir.join(format!("{id}.png"));
            save_image(&restore_at_size(bundle, &load_image(path)?, size)?, &out)?;
            Ok(out)
        })
        .collect()
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutputs> {
    spec.validate()?;
    let config = spec.train_config();
    let checkpoint = fit(&config, None)?;
    let bundle = ModelBundle::load(&checkpoint, &Device::Cpu)?;

    let manifest = DatasetManifest::load(&spec.eval.manifest)?;
    manifest.validate()?;
    let pairs = manifest.pairs(spec.eval.input_role, spec.eval.reference_role)?;
    if pairs.is_empty() {
        return Err(Error::Config("evaluation manifest yields no pairs".into()));
    }
    let out = &spec.output_dir;
    let restored_dir = out.join("restored");
    let reference_dir = out.join("reference");
    fs::create_dir_all(&reference_dir).map_err(|e| Error::io(&reference_dir, e))?;
    let inputs: Vec<(String, PathBuf)> = pairs.iter().map(|p| (p.id.clone(), p.first.clone())).collect();
    restore_files(&bundle, &inputs, &restored_dir, config.crop)?;
    for p in &pairs {
        save_image(&load_image(&p.second)?, reference_dir.join(format!("{}.png", p.id)))?;
    }

    let mut report: EvalReport = evaluate_dir(&restored_dir, &reference_dir, spec.eval.mask_dir.as_deref())?;
    report.fingerprint = Some(config.fingerprint());
    let report_json = out.join("report.json");
    let report_csv = report.write(&report_json)?;

    let row = ResultRow {
        name: spec.name.clone(),
        seed: spec.seed,
        fingerprint: config.fingerprint(),
        use_hfc: spec.use_hfc,
        use_structure_loss: spec.use_structure_loss,
        use_domain_loss: spec.use_domain_loss,
        n_pairs: report.rows.len(),
        mean_ssim: report.mean_ssim,
        mean_psnr: report.mean_psnr,
    };
    let result_json = out.join("result.json");
    let result_csv = out.join("result.csv");
    let json = serde_json::to_value(&row)?;
    // Keep an infinite PSNR representable.
    let json = match (json, row.mean_psnr) {
        (serde_json::Value::Object(mut m), Some(p)) if p.is_infinite() => {
            m.insert("mean_psnr".into(), "inf".into());
            serde_json::Value::Object(m)
        }
        (j, _) => j,
    };
    fs::write(&result_json, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(&result_json, e))?;
    fs::write(&result_csv, format!("{}\n{}\n", ResultRow::CSV_HEADER, row.csv_row()))
        .map_err(|e| Error::io(&result_csv, e))?;
    Ok(ExperimentOutputs {
        checkpoint,
        restored_dir,
        report_json,
        report_csv,
        result_json,
        result_csv,
    })
}
