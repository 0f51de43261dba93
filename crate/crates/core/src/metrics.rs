//! PSNR and SSIM on `[0, 1]` images.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{list_files, load_image, Image};
use crate::error::{Error, Result};

/// Reported when the mean squared error is below `1e-20`; this is the value
/// the formula itself gives at that threshold.
pub const PSNR_SENTINEL: f64 = 200.0;
const MSE_FLOOR: f64 = 1e-20;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(x: &Image, gt: &Image) -> Result<()> {
    if !x.same_shape(gt) {
        return Err(Error::shape(format!(
            "comparing {}x{}x{} with {}x{}x{}",
            x.channels, x.height, x.width, gt.channels, gt.height, gt.width
        )));
    }
    Ok(())
}

pub fn mse(x: &[f32], gt: &[f32]) -> f64 {
    let sum: f64 = x
        .iter()
        .zip(gt)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    sum / x.len() as f64
}

/// `10 log10(1 / mse)` with peak value 1.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_SENTINEL
    } else {
        -10.0 * mse.log10()
    }
}

pub fn psnr(x: &Image, gt: &Image) -> Result<f64> {
    check_pair(x, gt)?;
    Ok(psnr_from_mse(mse(&x.pixels, &gt.pixels)))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - mid;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &plane[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&src[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (i, t) in taps.iter().enumerate() {
            let src = &rows[(r + i) * ow..(r + i + 1) * ow];
            for (o, v) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, taps: &[f64]) -> f64 {
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, taps);
    let my = filter_valid(y, h, w, taps);
    let sxx = filter_valid(&prod(x, x), h, w, taps);
    let syy = filter_valid(&prod(y, y), h, w, taps);
    let sxy = filter_valid(&prod(x, y), h, w, taps);
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    total / n as f64
}

/// Mean SSIM over all valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(x: &Image, gt: &Image) -> Result<f64> {
    check_pair(x, gt)?;
    if x.height < SSIM_WINDOW || x.width < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            x.height, x.width
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let plane = x.height * x.width;
    let mut total = 0.0;
    for c in 0..x.channels {
        let a: Vec<f64> = x.pixels[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = gt.pixels[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        total += ssim_plane(&a, &b, x.height, x.width, &taps);
    }
    Ok(total / x.channels as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn average_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len() as f64
    }

    pub fn average_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    /// One `name,psnr,ssim` line per image, then `average,psnr,ssim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            writeln!(out, "{},{:.4},{:.6}", r.name, r.psnr, r.ssim).expect("writing to a String");
        }
        writeln!(out, "average,{:.4},{:.6}", self.average_psnr(), self.average_ssim()).expect("writing to a String");
        out
    }
}

fn relative_names(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    Ok(list_files(dir)?
        .into_iter()
        .map(|p| {
            let name = p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().into_owned();
            (name, p)
        })
        .collect())
}

/// Scores every file in `denoised` against the same-named file in
/// `reference`.
pub fn evaluate_dir(denoised: impl AsRef<Path>, reference: impl AsRef<Path>) -> Result<MetricReport> {
    let (denoised, reference) = (denoised.as_ref(), reference.as_ref());
    let ours = relative_names(denoised)?;
    let theirs = relative_names(reference)?;
    for (name, _) in &theirs {
        if !ours.iter().any(|(n, _)| n == name) {
            return Err(Error::UnpairedFile(denoised.join(name).display().to_string()));
        }
    }
    if ours.is_empty() {
        return Err(Error::EmptyDataset(denoised.to_path_buf()));
    }
    let mut report = MetricReport::default();
    for (name, path) in ours {
        let other = reference.join(&name);
        if !theirs.iter().any(|(n, _)| *n == name) {
            return Err(Error::UnpairedFile(other.display().to_string()));
        }
        let x = load_image(&path)?;
        let gt = load_image(&other)?;
        check_pair(&x, &gt).map_err(|e| Error::shape(format!("{name}: {e}")))?;
        report.rows.push(MetricRow {
            psnr: psnr(&x, &gt)?,
            ssim: ssim(&x, &gt)?,
            name,
        });
    }
    Ok(report)
}
