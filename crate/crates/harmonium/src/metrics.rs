//! Harmonization evaluation metrics over (prediction, ground truth, mask)
//! triplets.
//!
//! Values are reported on the 0-255 scale so magnitudes line up with the
//! published benchmark tables, while images stay in `[0, 1]` internally.
//! fMSE and fSSIM restrict MSE and SSIM to the foreground region.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, LinearImage};

/// SSIM window parameters, fixed for every report.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
pub const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// PSNR is capped at 100 dB once MSE drops below `255^2 * 1e-10`.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse: f64,
    pub fmse: f64,
    pub psnr: f64,
    pub fssim: f64,
    pub foreground_ratio: f64,
}

fn check_sizes(pred: &LinearImage, gt: &LinearImage) -> Result<()> {
    if !pred.same_size(gt) {
        return Err(Error::Shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

/// Mean over all pixels and channels of `(255 pred - 255 gt)^2`.
pub fn mse(pred: &LinearImage, gt: &LinearImage) -> Result<f64> {
    check_sizes(pred, gt)?;
    let n = pred.pixels().len() as f64;
    let sum: f64 = pred
        .pixels()
        .iter()
        .zip(gt.pixels())
        .map(|(p, g)| {
            let d = 255.0 * (p - g);
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// MSE restricted to foreground pixels.
pub fn fmse(pred: &LinearImage, gt: &LinearImage, mask: &BinaryMask) -> Result<f64> {
    check_sizes(pred, gt)?;
    if !mask.matches_image(pred) {
        return Err(Error::Shape(format!(
            "mask is {}x{} but images are {}x{}",
            mask.width(),
            mask.height(),
            pred.width(),
            pred.height()
        )));
    }
    let fg = mask.count_true();
    if fg == 0 {
        return Err(Error::Precondition(
            "fmse requires at least one foreground pixel".into(),
        ));
    }
    let mut sum = 0.0;
    for y in 0..pred.height() {
        for x in 0..pred.width() {
            if mask.get(x, y) {
                let p = pred.get(x, y);
                let g = gt.get(x, y);
                for c in 0..3 {
                    let d = 255.0 * (p[c] - g[c]);
                    sum += d * d;
                }
            }
        }
    }
    Ok(sum / (fg as f64 * 3.0))
}

/// `10 log10(255^2 / mse)`, capped at 100 dB for near-identical pairs.
pub fn psnr(pred: &LinearImage, gt: &LinearImage) -> Result<f64> {
    let m = mse(pred, gt)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    let peak_sq = 255.0 * 255.0;
    if mse < peak_sq * 1e-10 {
        PSNR_CAP_DB
    } else {
        10.0 * (peak_sq / mse).log10()
    }
}

/// SSIM averaged over the foreground.
///
/// The SSIM map uses an 11x11 Gaussian window (sigma 1.5) on the 0-255
/// scale, per channel, averaged across channels. At image borders the
/// window is clipped and its weights renormalized, so every pixel has a
/// value and masked averaging stays well defined.
pub fn fssim(pred: &LinearImage, gt: &LinearImage, mask: &BinaryMask) -> Result<f64> {
    check_sizes(pred, gt)?;
    if !mask.matches_image(pred) {
        return Err(Error::Shape(format!(
            "mask is {}x{} but images are {}x{}",
            mask.width(),
            mask.height(),
            pred.width(),
            pred.height()
        )));
    }
    if pred.width() < SSIM_WINDOW || pred.height() < SSIM_WINDOW {
        return Err(Error::Precondition(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            pred.width(),
            pred.height(),
            SSIM_WINDOW,
            SSIM_WINDOW
        )));
    }
    if mask.count_true() == 0 {
        return Err(Error::Precondition(
            "fssim requires at least one foreground pixel".into(),
        ));
    }

    let map = ssim_map(pred, gt);
    let (w, h) = (pred.width(), pred.height());
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                sum += map[y * w + x];
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// Channel-averaged SSIM map with one value per pixel.
pub fn ssim_map(pred: &LinearImage, gt: &LinearImage) -> Vec<f64> {
    let (w, h) = (pred.width(), pred.height());
    let kernel = gaussian_kernel();

    // Per-channel planes on the 0-255 scale.
    let mut map = vec![0.0; w * h];
    let mut x_plane = vec![0.0; w * h];
    let mut y_plane = vec![0.0; w * h];
    for c in 0..3 {
        for yy in 0..h {
            for xx in 0..w {
                x_plane[yy * w + xx] = 255.0 * pred.get(xx, yy)[c];
                y_plane[yy * w + xx] = 255.0 * gt.get(xx, yy)[c];
            }
        }
        let mu_x = filter_separable(&x_plane, w, h, &kernel);
        let mu_y = filter_separable(&y_plane, w, h, &kernel);
        let xx_sq: Vec<f64> = x_plane.iter().map(|v| v * v).collect();
        let yy_sq: Vec<f64> = y_plane.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x_plane.iter().zip(&y_plane).map(|(a, b)| a * b).collect();
        let ex2 = filter_separable(&xx_sq, w, h, &kernel);
        let ey2 = filter_separable(&yy_sq, w, h, &kernel);
        let exy = filter_separable(&xy, w, h, &kernel);

        for i in 0..w * h {
            let var_x = ex2[i] - mu_x[i] * mu_x[i];
            let var_y = ey2[i] - mu_y[i] * mu_y[i];
            let cov = exy[i] - mu_x[i] * mu_y[i];
            let ssim = ((2.0 * mu_x[i] * mu_y[i] + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((mu_x[i] * mu_x[i] + mu_y[i] * mu_y[i] + SSIM_C1)
                    * (var_x + var_y + SSIM_C2));
            map[i] += ssim / 3.0;
        }
    }
    map
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut k = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = (i as isize - r) as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable weighted mean with border clipping; the truncated 2-D window
/// renormalization factorizes into the two 1-D passes.
fn filter_separable(plane: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let xx = x + i as isize - r;
                if xx >= 0 && xx < w as isize {
                    acc += kv * plane[y as usize * w + xx as usize];
                    wsum += kv;
                }
            }
            tmp[y as usize * w + x as usize] = acc / wsum;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let yy = y + i as isize - r;
                if yy >= 0 && yy < h as isize {
                    acc += kv * tmp[yy as usize * w + x as usize];
                    wsum += kv;
                }
            }
            out[y as usize * w + x as usize] = acc / wsum;
        }
    }
    out
}

/// Full per-image report.
pub fn report(pred: &LinearImage, gt: &LinearImage, mask: &BinaryMask) -> Result<MetricReport> {
    let mse = mse(pred, gt)?;
    let fmse = fmse(pred, gt, mask)?;
    let fssim = fssim(pred, gt, mask)?;
    let total = (mask.width() * mask.height()) as f64;
    Ok(MetricReport {
        mse,
        fmse,
        psnr: psnr_from_mse(mse),
        fssim,
        foreground_ratio: mask.count_true() as f64 / total,
    })
}

/// Evaluation outcome over a manifest: per-image reports plus unweighted
/// per-image means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_image: Vec<(String, MetricReport)>,
    pub aggregate: MetricReport,
    /// Manifest entries with no prediction file; they are excluded from
    /// the aggregate and flag the run as incomplete.
    pub missing: Vec<String>,
    pub incomplete: bool,
    pub config: EvalConfig,
}

/// Snapshot of the fixed metric parameters, recorded in every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub scale: String,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub psnr_cap_db: f64,
    pub aggregation: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scale: "0-255".into(),
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            ssim_c1: SSIM_C1,
            ssim_c2: SSIM_C2,
            psnr_cap_db: PSNR_CAP_DB,
            aggregation: "unweighted-image-mean".into(),
        }
    }
}

/// Evaluates predictions against a built dataset manifest.
///
/// The prediction for an entry is looked up by the composite's file name
/// inside `predictions_dir`. Missing predictions are listed and excluded;
/// the run is then flagged incomplete.
pub fn evaluate_manifest(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    predictions_dir: &Path,
    jobs: usize,
) -> Result<Evaluation> {
    let mut tasks: Vec<(String, PathBuf, PathBuf, PathBuf)> = Vec::new();
    let mut missing = Vec::new();
    for entry in &manifest.entries {
        let composite = manifest_dir.join(&entry.composite_path);
        let name = composite
            .file_name()
            .ok_or_else(|| Error::Data(format!("bad composite path {:?}", entry.composite_path)))?;
        let image_id = Path::new(name)
            .file_stem()
            .unwrap_or(name)
            .to_string_lossy()
            .into_owned();
        let pred_path = predictions_dir.join(name);
        if !pred_path.is_file() {
            missing.push(image_id);
            continue;
        }
        tasks.push((
            image_id,
            pred_path,
            manifest_dir.join(&entry.real_path),
            manifest_dir.join(&entry.mask_path),
        ));
    }

    let eval_one = |(image_id, pred_path, real_path, mask_path): &(
        String,
        PathBuf,
        PathBuf,
        PathBuf,
    )|
     -> Result<(String, MetricReport)> {
        let pred = LinearImage::load_png(pred_path)?;
        let gt = LinearImage::load_png(real_path)?;
        let mask = BinaryMask::load_png(mask_path)?;
        Ok((image_id.clone(), report(&pred, &gt, &mask)?))
    };

    let per_image: Vec<(String, MetricReport)> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            tasks.par_iter().map(eval_one).collect::<Result<Vec<_>>>()
        })?
    } else {
        tasks.iter().map(eval_one).collect::<Result<Vec<_>>>()?
    };

    if per_image.is_empty() {
        return Err(Error::Precondition(
            "no predictions found for any manifest entry".into(),
        ));
    }

    let n = per_image.len() as f64;
    let mut agg = MetricReport {
        mse: 0.0,
        fmse: 0.0,
        psnr: 0.0,
        fssim: 0.0,
        foreground_ratio: 0.0,
    };
    for (_, r) in &per_image {
        agg.mse += r.mse / n;
        agg.fmse += r.fmse / n;
        agg.psnr += r.psnr / n;
        agg.fssim += r.fssim / n;
        agg.foreground_ratio += r.foreground_ratio / n;
    }

    Ok(Evaluation {
        per_image,
        aggregate: agg,
        incomplete: !missing.is_empty(),
        missing,
        config: EvalConfig::default(),
    })
}

impl Evaluation {
    /// CSV with the schema `image_id,mse,fmse,psnr,fssim,foreground_ratio`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(Error::Csv)?;
        writer.write_record(["image_id", "mse", "fmse", "psnr", "fssim", "foreground_ratio"])?;
        for (id, r) in &self.per_image {
            writer.write_record([
                id.clone(),
                r.mse.to_string(),
                r.fmse.to_string(),
                r.psnr.to_string(),
                r.fssim.to_string(),
                r.foreground_ratio.to_string(),
            ])?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_aggregate_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct AggregateOut<'a> {
            config: &'a EvalConfig,
            images_evaluated: usize,
            incomplete: bool,
            missing: &'a [String],
            mean: &'a MetricReport,
        }
        let out = AggregateOut {
            config: &self.config,
            images_evaluated: self.per_image.len(),
            incomplete: self.incomplete,
            missing: &self.missing,
            mean: &self.aggregate,
        };
        let text = serde_json::to_string_pretty(&out)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Human-readable aggregate table.
    pub fn format_table(&self) -> String {
        let mut s = String::new();
        s.push_str("images    MSE       fMSE      PSNR     fSSIM\n");
        s.push_str(&format!(
            "{:<9} {:<9.2} {:<9.2} {:<8.2} {:.4}\n",
            self.per_image.len(),
            self.aggregate.mse,
            self.aggregate.fmse,
            self.aggregate.psnr,
            self.aggregate.fssim
        ));
        if self.incomplete {
            s.push_str(&format!(
                "incomplete: {} entries had no prediction\n",
                self.missing.len()
            ));
        }
        s
    }

    /// Per-image reports keyed by id, for joins in tests and tooling.
    pub fn by_id(&self) -> BTreeMap<&str, &MetricReport> {
        self.per_image
            .iter()
            .map(|(id, r)| (id.as_str(), r))
            .collect()
    }
}
