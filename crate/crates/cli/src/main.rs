use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arcnet_core::degradation::{sample_params_with, simulate_cataract, DegradationParams, SamplingRanges};
use arcnet_core::evaluation::evaluate_dir;
use arcnet_core::experiment::{restore_at_size, run_experiment, ExperimentSpec};
use arcnet_core::frequency::decompose;
use arcnet_core::image::{estimate_fov_mask, load_image, save_image};
use arcnet_core::manifest::list_images;
use arcnet_core::network::{restore, ModelBundle};
use arcnet_core::rng::derive_seed;
use arcnet_core::training::{fit, TrainConfig};
use arcnet_core::{Error, Result};
use candle_core::Device;
use clap::{Parser, Subcommand};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "arcnet", version, about = "Annotation-free cataract fundus restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade every clear image in a directory with the cataract model.
    Simulate {
        /// Directory of clear PNG/JPEG images.
        #[arg(long)]
        input_dir: PathBuf,
        /// Receives `<stem>.png` and a `<stem>.json` parameter sidecar per image.
        #[arg(long)]
        output_dir: PathBuf,
        /// Root seed; image i draws its parameters from stream `params[i]`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file holding either one fixed parameter set or sampling ranges.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Estimate a field-of-view mask at this threshold so the brightest
        /// value per channel is taken inside the fundus only.
        #[arg(long)]
        fov_threshold: Option<f64>,
    },
    /// Split an image into low- and high-frequency parts.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        /// Gaussian radius.
        #[arg(long, default_value_t = 26)]
        rp: usize,
        /// Gaussian spatial constant.
        #[arg(long, default_value_t = 9.0)]
        sigma: f64,
        /// Writes `<prefix>_lfc.png` and `<prefix>_hfc.png`.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Train a model bundle from a JSON training config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the config's root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore one image or a directory of images with a trained checkpoint.
    Restore {
        #[arg(long)]
        checkpoint: PathBuf,
        /// An image file or a directory of images.
        #[arg(long)]
        input: PathBuf,
        /// An image file, or a directory when the input is a directory.
        #[arg(long)]
        output: PathBuf,
        /// Run the generator at size x size and resize the result back.
        /// Without it the image must already fit the generator.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Score restored images against references by file stem.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Directory of field-of-view masks named like the images.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// JSON report path; the CSV lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train, restore and evaluate one ablation setting end to end.
    Experiment {
        #[arg(long)]
        spec: PathBuf,
        /// Override the spec's root seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ParamsFile {
    Fixed(DegradationParams),
    Ranges(SamplingRanges),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Param(_) | Error::Json(_) => 2,
        Error::Numeric { .. } => 4,
        _ => 3,
    }
}

/// candle sizes its matmul thread pool from this variable on every call, so
/// pinning it before any work starts fixes the reduction order.
fn pin_threads(deterministic: bool) {
    if deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: String) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn simulate(
    input_dir: &Path,
    output_dir: &Path,
    seed: u64,
    params: Option<&Path>,
    fov_threshold: Option<f64>,
) -> Result<()> {
    let params = match params {
        Some(p) => read_json::<ParamsFile>(p)?,
        None => ParamsFile::Ranges(SamplingRanges::default()),
    };
    if let ParamsFile::Ranges(r) = &params {
        r.validate()?;
    }
    let inputs = list_images(input_dir)?;
    if inputs.is_empty() {
        return Err(Error::Data(format!("no images in {}", input_dir.display())));
    }
    create_dir(output_dir)?;
    for (i, path) in inputs.iter().enumerate() {
        let mut img = load_image(path)?;
        if let Some(t) = fov_threshold {
            let mask = estimate_fov_mask(&img, t)?;
            img = img.with_mask(Some(mask))?;
        }
        let p = match &params {
            ParamsFile::Fixed(p) => p.clone(),
            ParamsFile::Ranges(r) => {
                sample_params_with(img.height(), img.width(), derive_seed(seed, "params", &[i as u64]), r)
            }
        };
        let out = simulate_cataract(&img, &p)?;
        let name = stem(path);
        save_image(&out, output_dir.join(format!("{name}.png")))?;
        write_file(&output_dir.join(format!("{name}.json")), serde_json::to_string_pretty(&p)?)?;
        log::info!("{} -> {name}.png", path.display());
    }
    Ok(())
}

fn decompose_cmd(input: &Path, rp: usize, sigma: f64, prefix: &Path) -> Result<()> {
    let pair = decompose(&load_image(input)?, rp, sigma)?;
    let with_suffix = |s: &str| {
        let mut name = prefix.as_os_str().to_owned();
        name.push(s);
        PathBuf::from(name)
    };
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_image(&pair.lfc_image(), with_suffix("_lfc.png"))?;
    save_image(&pair.hfc_image(), with_suffix("_hfc.png"))
}

fn train(config: &Path, resume: Option<&Path>, seed: Option<u64>) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    pin_threads(cfg.deterministic);
    let ckpt = fit(&cfg, resume)?;
    println!("{}", ckpt.display());
    Ok(())
}

fn restore_cmd(checkpoint: &Path, input: &Path, output: &Path, size: Option<usize>) -> Result<()> {
    pin_threads(true);
    let bundle = ModelBundle::load(checkpoint, &Device::Cpu)?;
    let run = |src: &Path, dst: &Path| -> Result<()> {
        let img = load_image(src)?;
        let out = match size {
            Some(n) => restore_at_size(&bundle, &img, n)?,
            None => restore(&bundle, &img)?,
        };
        save_image(&out, dst)
    };
    if input.is_dir() {
        let files = list_images(input)?;
        if files.is_empty() {
            return Err(Error::Data(format!("no images in {}", input.display())));
        }
        create_dir(output)?;
        for f in &files {
            run(f, &output.join(format!("{}.png", stem(f))))?;
        }
    } else {
        if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        run(input, output)?;
    }
    Ok(())
}

fn evaluate(pred: &Path, reference: &Path, mask: Option<&Path>, out: &Path) -> Result<()> {
    let report = evaluate_dir(pred, reference, mask)?;
    let csv = report.write(out)?;
    for s in &report.skipped {
        log::warn!("skipped {}: {}", s.id, s.reason);
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} pairs  SSIM {}  PSNR {}  ({} , {})",
        report.rows.len(),
        fmt(report.mean_ssim),
        fmt(report.mean_psnr),
        out.display(),
        csv.display()
    );
    Ok(())
}

fn experiment(spec: &Path, seed: Option<u64>) -> Result<()> {
    let mut spec = ExperimentSpec::load(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    pin_threads(spec.train.deterministic);
    let out = run_experiment(&spec)?;
    println!("{}", out.result_json.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            input_dir,
            output_dir,
            seed,
            params,
            fov_threshold,
        } => simulate(&input_dir, &output_dir, seed, params.as_deref(), fov_threshold),
        Command::Decompose {
            input,
            rp,
            sigma,
            out_prefix,
        } => decompose_cmd(&input, rp, sigma, &out_prefix),
        Command::Train { config, resume, seed } => train(&config, resume.as_deref(), seed),
        Command::Restore {
            checkpoint,
            input,
            output,
            size,
        } => restore_cmd(&checkpoint, &input, &output, size),
        Command::Evaluate {
            pred,
            reference,
            mask,
            out,
        } => evaluate(&pred, &reference, mask.as_deref(), &out),
        Command::Experiment { spec, seed } => experiment(&spec, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
