//! Reference-based quality metrics: PSNR, SSIM and body/background region
//! breakdowns.
//!
//! Videos are `C x T x H x W` in `[0, 1]`. SSIM is computed per channel and
//! frame over valid window positions with an 11-tap Gaussian window
//! (sigma 1.5, K1 = 0.01, K2 = 0.03) and averaged.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::compositor::gaussian_kernel_1d;
use crate::error::{Error, Result};
use crate::Video;

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(a: &Video, b: &Video) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("metric inputs differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::shape("metric inputs are empty"));
    }
    for (name, v) in [("a", a), ("b", b)] {
        if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::Range(format!("metric input {name} outside [0, 1]")));
        }
    }
    Ok(())
}

/// PSNR in dB for a mean squared error, capped for a zero error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn mse(a: &Video, b: &Video) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    Ok(sum / a.len() as f64)
}

pub fn psnr(a: &Video, b: &Video) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Sum of squared errors and pixel count over positions where the
/// `1 x T x H x W` weight is at least 0.5 (`select == true`) or below it.
fn masked_sse(a: &Video, b: &Video, mask: &Video, select: bool) -> (f64, usize) {
    let (c, t, h, w) = a.dim();
    let (mut sse, mut n) = (0.0, 0usize);
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                if (mask[[0, ti, y, x]] >= 0.5) != select {
                    continue;
                }
                for ci in 0..c {
                    sse += (a[[ci, ti, y, x]] as f64 - b[[ci, ti, y, x]] as f64).powi(2);
                    n += 1;
                }
            }
        }
    }
    (sse, n)
}

fn ssim_plane(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>, k: &[f64]) -> f64 {
    let (h, w) = a.dim();
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let to64 = |v: ArrayView2<'_, f32>| v.mapv(|x| x as f64);
    let (a, b) = (to64(a), to64(b));
    let filter = |img: &Array2<f64>| {
        let mut rows = Array2::<f64>::zeros((h, wo));
        for y in 0..h {
            for x in 0..wo {
                rows[[y, x]] = (0..n).map(|i| k[i] * img[[y, x + i]]).sum();
            }
        }
        let mut out = Array2::<f64>::zeros((ho, wo));
        for y in 0..ho {
            for x in 0..wo {
                out[[y, x]] = (0..n).map(|i| k[i] * rows[[y + i, x]]).sum();
            }
        }
        out
    };
    let mu_a = filter(&a);
    let mu_b = filter(&b);
    let saa = filter(&(&a * &a));
    let sbb = filter(&(&b * &b));
    let sab = filter(&(&a * &b));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for y in 0..ho {
        for x in 0..wo {
            let (ma, mb) = (mu_a[[y, x]], mu_b[[y, x]]);
            let va = saa[[y, x]] - ma * ma;
            let vb = sbb[[y, x]] - mb * mb;
            let cov = sab[[y, x]] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (ho * wo) as f64
}

/// Mean SSIM over channels and frames.
pub fn ssim(a: &Video, b: &Video) -> Result<f64> {
    check_pair(a, b)?;
    let (c, t, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_kernel_1d(SSIM_SIGMA, SSIM_WINDOW / 2)?;
    let mut total = 0.0;
    for ci in 0..c {
        for ti in 0..t {
            total += ssim_plane(a.slice(s![ci, ti, .., ..]), b.slice(s![ci, ti, .., ..]), &k);
        }
    }
    Ok(total / (c * t) as f64)
}

/// Whole-frame and per-region scores. A region with no pixels is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub psnr_all: f64,
    pub psnr_body: Option<f64>,
    pub psnr_bg: Option<f64>,
    pub ssim_all: f64,
}

/// `body_mask` is `1 x T x H x W`; pixels at or above 0.5 count as body.
pub fn region_report(output: &Video, truth: &Video, body_mask: &Video) -> Result<RegionReport> {
    check_pair(output, truth)?;
    let (_, t, h, w) = output.dim();
    if body_mask.dim() != (1, t, h, w) {
        return Err(Error::shape(format!(
            "body mask {:?} does not match video {:?}",
            body_mask.dim(),
            output.dim()
        )));
    }
    let region = |select: bool| {
        let (sse, n) = masked_sse(output, truth, body_mask, select);
        (n > 0).then(|| psnr_from_mse(sse / n as f64))
    };
    Ok(RegionReport {
        psnr_all: psnr(output, truth)?,
        psnr_body: region(true),
        psnr_bg: region(false),
        ssim_all: ssim(output, truth)?,
    })
}

/// One CSV row: `sample_id, metric, region, value`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub sample_id: String,
    pub metric: &'static str,
    pub region: &'static str,
    pub value: f64,
}

impl RegionReport {
    /// Rows for the present metrics, in a fixed order.
    pub fn rows(&self, sample_id: &str) -> Vec<MetricRow> {
        let mut rows = Vec::with_capacity(4);
        let mut push = |metric, region, value: Option<f64>| {
            if let Some(value) = value {
                rows.push(MetricRow {
                    sample_id: sample_id.to_string(),
                    metric,
                    region,
                    value,
                });
            }
        };
        push("psnr", "all", Some(self.psnr_all));
        push("psnr", "body", self.psnr_body);
        push("psnr", "background", self.psnr_bg);
        push("ssim", "all", Some(self.ssim_all));
        rows
    }
}

pub fn write_metric_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    wtr.write_record(["sample_id", "metric", "region", "value"])
        .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        wtr.write_record([r.sample_id.as_str(), r.metric, r.region, &r.value.to_string()])
            .map_err(|e| Error::csv(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}
