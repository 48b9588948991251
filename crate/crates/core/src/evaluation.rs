//! Full-reference quality metrics over optional overlap masks, and the
//! per-directory report built from them.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_kernel_1d;
use crate::image::{load_image, load_mask, FundusImage, Mask};
use crate::manifest::{file_stem, list_images};

fn check_pair(a: &FundusImage, b: &FundusImage, mask: Option<&Mask>) -> Result<()> {
    if a.pixels().dim() != b.pixels().dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.pixels().dim(), b.pixels().dim())));
    }
    if let Some(m) = mask {
        if m.dim() != (a.height(), a.width()) {
            return Err(Error::Shape(format!("mask {:?} vs image {:?}", m.dim(), (a.height(), a.width()))));
        }
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB with peak 1.0. Identical inputs give
/// `f64::INFINITY`.
pub fn psnr(a: &FundusImage, b: &FundusImage, mask: Option<&Mask>) -> Result<f64> {
    check_pair(a, b, mask)?;
    let (c, h, w) = a.pixels().dim();
    let (mut sum, mut count) = (0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| !m[[y, x]]) {
                continue;
            }
            for ch in 0..c {
                let d = a.pixels()[[ch, y, x]] - b.pixels()[[ch, y, x]];
                sum += d * d;
            }
            count += c;
        }
    }
    if count == 0 {
        return Err(Error::Data("psnr over an empty mask".into()));
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    /// Side length of the square Gaussian window (odd).
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

/// Gaussian-weighted sums over every window lying fully inside the plane.
fn valid_filter(plane: ArrayView2<f64>, k: &[f64]) -> Array2<f64> {
    let n = k.len();
    let (h, w) = plane.dim();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = (0..n).map(|i| k[i] * plane[[y, x + i]]).sum::<f64>();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = (0..n).map(|i| k[i] * rows[[y + i, x]]).sum::<f64>();
        }
    }
    out
}

/// Window centres (in valid-output coordinates) whose window is entirely
/// inside the mask.
fn usable_centres(mask: Option<&Mask>, h: usize, w: usize, n: usize) -> Array2<bool> {
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    match mask {
        None => Array2::from_elem((oh, ow), true),
        Some(m) => Array2::from_shape_fn((oh, ow), |(y, x)| m.slice(s![y..y + n, x..x + n]).iter().all(|&v| v)),
    }
}

/// Mean structural similarity, averaged over channels and over window
/// centres whose full window lies inside the mask.
pub fn ssim(a: &FundusImage, b: &FundusImage, mask: Option<&Mask>) -> Result<f64> {
    ssim_with(a, b, mask, &SsimParams::default())
}

pub fn ssim_with(a: &FundusImage, b: &FundusImage, mask: Option<&Mask>, p: &SsimParams) -> Result<f64> {
    check_pair(a, b, mask)?;
    if p.window % 2 == 0 || p.window == 0 {
        return Err(Error::Param(format!("ssim window must be odd, got {}", p.window)));
    }
    let (c, h, w) = a.pixels().dim();
    if h < p.window || w < p.window {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than the {} window", p.window)));
    }
    let k = gaussian_kernel_1d(p.window / 2, p.sigma)?;
    let usable = usable_centres(mask, h, w, p.window);
    let n_usable = usable.iter().filter(|&&u| u).count();
    if n_usable == 0 {
        return Err(Error::Data("no ssim window fits inside the mask".into()));
    }
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let mu_x = valid_filter(x, &k);
        let mu_y = valid_filter(y, &k);
        let xx = valid_filter((&x * &x).view(), &k);
        let yy = valid_filter((&y * &y).view(), &k);
        let xy = valid_filter((&x * &y).view(), &k);
        let mut sum = 0.0;
        for ((idx, &ok), &mx) in usable.indexed_iter().zip(mu_x.iter()) {
            if !ok {
                continue;
            }
            let my = mu_y[idx];
            let vx = xx[idx] - mx * mx;
            let vy = yy[idx] - my * my;
            let cov = xy[idx] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += sum / n_usable as f64;
    }
    Ok(total / c as f64)
}

/// A quality measure that can be added to reports without touching the
/// evaluation loop. No-reference metrics ignore `reference`.
pub trait Metric: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, pred: &FundusImage, reference: Option<&FundusImage>, mask: Option<&Mask>) -> Result<f64>;
}

fn require_ref<'a>(name: &str, r: Option<&'a FundusImage>) -> Result<&'a FundusImage> {
    r.ok_or_else(|| Error::Param(format!("{name} needs a reference image")))
}

pub struct Psnr;

impl Metric for Psnr {
    fn name(&self) -> &str {
        "psnr"
    }

    fn evaluate(&self, pred: &FundusImage, reference: Option<&FundusImage>, mask: Option<&Mask>) -> Result<f64> {
        psnr(pred, require_ref("psnr", reference)?, mask)
    }
}

pub struct Ssim(pub SsimParams);

impl Metric for Ssim {
    fn name(&self) -> &str {
        "ssim"
    }

    fn evaluate(&self, pred: &FundusImage, reference: Option<&FundusImage>, mask: Option<&Mask>) -> Result<f64> {
        ssim_with(pred, require_ref("ssim", reference)?, mask, &self.0)
    }
}

/// JSON has no infinity, so an infinite PSNR is written as the string
/// `"inf"`.
mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad psnr value {s:?}"))),
        }
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub ssim: f64,
    #[serde(with = "psnr_serde")]
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_ssim: Option<f64>,
    #[serde(with = "opt_psnr")]
    pub mean_psnr: Option<f64>,
    pub fingerprint: Option<String>,
    pub ssim_params: SsimParams,
    pub psnr_peak: f64,
    pub skipped: Vec<Skipped>,
}

mod opt_psnr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::psnr_serde")] f64);

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.map(Wrap).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

/// One prediction/reference pair to score.
pub struct EvalPair {
    pub id: String,
    pub pred: FundusImage,
    pub reference: FundusImage,
    pub mask: Option<Mask>,
}

impl EvalReport {
    pub fn from_rows(mut rows: Vec<EvalRow>, mut skipped: Vec<Skipped>, params: SsimParams) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        skipped.sort_by(|a, b| a.id.cmp(&b.id));
        let mean = |f: fn(&EvalRow) -> f64| (!rows.is_empty()).then(|| rows.iter().map(f).sum::<f64>() / rows.len() as f64);
        Self {
            mean_ssim: mean(|r| r.ssim),
            mean_psnr: mean(|r| r.psnr),
            rows,
            fingerprint: None,
            ssim_params: params,
            psnr_peak: 1.0,
            skipped,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,ssim,psnr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.id, r.ssim, fmt_psnr(r.psnr)));
        }
        out
    }

    /// Write the JSON report to `json_path` and the per-row CSV next to it.
    pub fn write(&self, json_path: impl AsRef<Path>) -> Result<PathBuf> {
        let json_path = json_path.as_ref();
        if let Some(parent) = json_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(json_path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(json_path, e))?;
        let csv_path = json_path.with_extension("csv");
        fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        Ok(csv_path)
    }
}

pub fn evaluate_pairs(pairs: &[EvalPair], params: &SsimParams) -> Result<EvalReport> {
    let rows = pairs
        .iter()
        .map(|p| {
            Ok(EvalRow {
                id: p.id.clone(),
                ssim: ssim_with(&p.pred, &p.reference, p.mask.as_ref(), params)?,
                psnr: psnr(&p.pred, &p.reference, p.mask.as_ref())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, Vec::new(), *params))
}

/// Score every prediction against the reference with the same file stem.
/// Unmatched stems and pairs that cannot be scored are listed as skipped.
pub fn evaluate_dir(pred_dir: &Path, ref_dir: &Path, mask_dir: Option<&Path>) -> Result<EvalReport> {
    let params = SsimParams::default();
    let by_stem = |dir: &Path| -> Result<std::collections::BTreeMap<String, PathBuf>> {
        Ok(list_images(dir)?.into_iter().map(|p| (file_stem(&p), p)).collect())
    };
    let preds = by_stem(pred_dir)?;
    let refs = by_stem(ref_dir)?;
    let masks = mask_dir.map(by_stem).transpose()?;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (id, _) in refs.iter().filter(|(id, _)| !preds.contains_key(*id)) {
        skipped.push(Skipped {
            id: id.clone(),
            reason: "no prediction".into(),
        });
    }
    for (id, pred_path) in &preds {
        let Some(ref_path) = refs.get(id) else {
            skipped.push(Skipped {
                id: id.clone(),
                reason: "no reference".into(),
            });
            continue;
        };
        let mask = match &masks {
            None => None,
            Some(m) => match m.get(id) {
                Some(p) => Some(load_mask(p)?),
                None => {
                    skipped.push(Skipped {
                        id: id.clone(),
                        reason: "no mask".into(),
                    });
                    continue;
                }
            },
        };
        let pred = load_image(pred_path)?;
        let reference = load_image(ref_path)?;
        let scored = ssim_with(&pred, &reference, mask.as_ref(), &params)
            .and_then(|s| Ok((s, psnr(&pred, &reference, mask.as_ref())?)));
        match scored {
            Ok((ssim, psnr)) => rows.push(EvalRow { id: id.clone(), ssim, psnr }),
            Err(e) => skipped.push(Skipped {
                id: id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    Ok(EvalReport::from_rows(rows, skipped, params))
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;

    /// Direct per-window SSIM with an explicit 2-D Gaussian window.
    pub fn ssim_sliding(a: &FundusImage, b: &FundusImage) -> f64 {
        let p = SsimParams::default();
        let r = p.window / 2;
        let mut g = vec![vec![0.0; p.window]; p.window];
        let mut norm = 0.0;
        for (i, row) in g.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (dy, dx) = (i as f64 - r as f64, j as f64 - r as f64);
                *v = (-(dy * dy + dx * dx) / (2.0 * p.sigma * p.sigma)).exp();
                norm += *v;
            }
        }
        let c1 = (p.k1 * p.dynamic_range).powi(2);
        let c2 = (p.k2 * p.dynamic_range).powi(2);
        let (c, h, w) = a.pixels().dim();
        let mut total = 0.0;
        for ch in 0..c {
            let mut sum = 0.0;
            let mut n = 0;
            for cy in r..h - r {
                for cx in r..w - r {
                    let (mut mx, mut my) = (0.0, 0.0);
                    for i in 0..p.window {
                        for j in 0..p.window {
                            let wgt = g[i][j] / norm;
                            mx += wgt * a.pixels()[[ch, cy + i - r, cx + j - r]];
                            my += wgt * b.pixels()[[ch, cy + i - r, cx + j - r]];
                        }
                    }
                    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..p.window {
                        for j in 0..p.window {
                            let wgt = g[i][j] / norm;
                            let dx = a.pixels()[[ch, cy + i - r, cx + j - r]] - mx;
                            let dy = b.pixels()[[ch, cy + i - r, cx + j - r]] - my;
                            vx += wgt * dx * dx;
                            vy += wgt * dy * dy;
                            cov += wgt * dx * dy;
                        }
                    }
                    sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
            total += sum / n as f64;
        }
        total / c as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::save_image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FundusImage {
        FundusImage::from_fn(h, w, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn psnr_closed_forms() {
        let a = FundusImage::filled(16, 16, 0.5);
        assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
        let b = FundusImage::filled(16, 16, 0.6);
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
        let empty = Mask::from_elem((16, 16), false);
        assert!(matches!(psnr(&a, &b, Some(&empty)), Err(Error::Data(_))));
    }

    #[test]
    fn psnr_matches_mse_oracle_under_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 20, 24);
        let b = random_image(&mut rng, 20, 24);
        let mask = Mask::from_shape_fn((20, 24), |(y, x)| (y + x) % 3 != 0);
        let (mut sum, mut n) = (0.0, 0.0);
        for ((ch, y, x), v) in a.pixels().indexed_iter() {
            if mask[[y, x]] {
                sum += (v - b.pixels()[[ch, y, x]]).powi(2);
                n += 1.0;
            }
        }
        let oracle = 10.0 * (n / sum).log10();
        assert!((psnr(&a, &b, Some(&mask)).unwrap() - oracle).abs() < 1e-6);
        let full = Mask::from_elem((20, 24), true);
        assert!((psnr(&a, &b, Some(&full)).unwrap() - psnr(&a, &b, None).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = FundusImage::filled(16, 16, 0.5);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1, 0.2, 0.4] {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let noisy = FundusImage::from_fn(16, 16, |_, _, _| 0.5 + amp * (rng.random::<f64>() - 0.5));
            let p = psnr(&base, &noisy, None).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_image(&mut rng, 32, 32);
        let b = random_image(&mut rng, 32, 32);
        assert_eq!(ssim(&a, &a, None).unwrap(), 1.0);
        assert_eq!(ssim(&a, &b, None).unwrap(), ssim(&b, &a, None).unwrap());

        let zero = FundusImage::filled(16, 16, 0.0);
        let one = FundusImage::filled(16, 16, 1.0);
        let (c1, c2) = (1e-4, 9e-4);
        let oracle = (c1 * c2) / ((1.0 + c1) * c2);
        assert!((ssim(&zero, &one, None).unwrap() - oracle).abs() < 1e-12);

        let small = FundusImage::filled(10, 16, 0.0);
        assert!(matches!(ssim(&small, &small, None), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_matches_sliding_window_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..3 {
            let a = random_image(&mut rng, 24, 28);
            let b = FundusImage::from_fn(24, 28, |c, y, x| (0.7 * a.pixels()[[c, y, x]] + 0.3 * rng.random::<f64>()).min(1.0));
            let got = ssim(&a, &b, None).unwrap();
            let want = oracle::ssim_sliding(&a, &b);
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn ssim_mask_restricts_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_image(&mut rng, 32, 32);
        let mut b = a.clone();
        // Corrupt the right half; a mask over the left half must not see it.
        b.pixels_mut().slice_mut(s![.., .., 16..]).fill(0.0);
        let left = Mask::from_shape_fn((32, 32), |(_, x)| x < 16);
        assert_eq!(ssim(&a, &b, Some(&left)).unwrap(), 1.0);
        assert!(ssim(&a, &b, None).unwrap() < 0.9);
        let full = Mask::from_elem((32, 32), true);
        assert!((ssim(&a, &b, Some(&full)).unwrap() - ssim(&a, &b, None).unwrap()).abs() < 1e-9);
        let thin = Mask::from_shape_fn((32, 32), |(_, x)| x < 5);
        assert!(matches!(ssim(&a, &b, Some(&thin)), Err(Error::Data(_))));
    }

    #[test]
    fn report_means_and_serialization() {
        let a = FundusImage::filled(16, 16, 0.5);
        let pairs = [0.1, 0.2, 0.5]
            .iter()
            .enumerate()
            .map(|(i, d)| EvalPair {
                id: format!("p{i}"),
                pred: FundusImage::filled(16, 16, 0.5 - d),
                reference: a.clone(),
                mask: None,
            })
            .collect::<Vec<_>>();
        let report = evaluate_pairs(&pairs, &SsimParams::default()).unwrap();
        let want = [20.0, 13.979400086720377, 6.020599913279624];
        for (r, w) in report.rows.iter().zip(want) {
            assert!((r.psnr - w).abs() < 1e-9);
        }
        let mean = report.rows.iter().map(|r| r.ssim).sum::<f64>() / 3.0;
        assert!((report.mean_ssim.unwrap() - mean).abs() < 1e-9);

        let same = evaluate_pairs(
            &[EvalPair {
                id: "x".into(),
                pred: a.clone(),
                reference: a.clone(),
                mask: None,
            }],
            &SsimParams::default(),
        )
        .unwrap();
        let json = serde_json::to_string(&same).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""), "{json}");
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, same);
        assert!(same.to_csv().contains("x,1,inf"));
    }

    #[test]
    fn evaluate_dir_matches_stems_and_lists_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let (pred, reference) = (dir.path().join("pred"), dir.path().join("ref"));
        fs::create_dir_all(&pred).unwrap();
        fs::create_dir_all(&reference).unwrap();
        let img = FundusImage::filled(16, 16, 0.4);
        for stem in ["a", "b"] {
            save_image(&img, pred.join(format!("{stem}.png"))).unwrap();
            save_image(&img, reference.join(format!("{stem}.png"))).unwrap();
        }
        save_image(&img, pred.join("only_pred.png")).unwrap();
        let report = evaluate_dir(&pred, &reference, None).unwrap();
        assert_eq!(report.rows.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(report.mean_ssim, Some(1.0));
        assert_eq!(report.mean_psnr, Some(f64::INFINITY));
        assert_eq!(report.skipped.len(), 1);

        let other = dir.path().join("other");
        fs::create_dir_all(&other).unwrap();
        save_image(&img, other.join("zzz.png")).unwrap();
        let disjoint = evaluate_dir(&pred, &other, None).unwrap();
        assert!(disjoint.rows.is_empty());
        assert!(!disjoint.skipped.is_empty());
        assert_eq!(disjoint.mean_ssim, None);

        let out = dir.path().join("out/report.json");
        let csv = report.write(&out).unwrap();
        assert!(csv.ends_with("report.csv"));
        assert!(fs::read_to_string(&csv).unwrap().starts_with("id,ssim,psnr\n"));
    }
}
