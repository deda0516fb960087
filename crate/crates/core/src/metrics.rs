//! Image and representation similarity metrics and report assembly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::read_ppm;
use crate::representations::Image;

pub const SSIM_WIN: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Dimension(format!("correlation of lengths {} and {}", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn pearson_f32(a: &[f32], b: &[f32]) -> Result<f64> {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    pearson(&a, &b)
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::Dimension(format!(
            "image shapes {}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    Ok(())
}

/// Pearson correlation over all flattened pixels.
pub fn pixcorr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    pearson_f32(&a.data, &b.data)
}

/// Mean local SSIM of channel-mean grayscale images over all valid 7×7 windows.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    ssim_gray(&a.gray(), &b.gray(), a.height, a.width)
}

pub fn ssim_gray(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::Parameter(format!("image {h}x{w} is smaller than the {SSIM_WIN}x{SSIM_WIN} window")));
    }
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let np = (SSIM_WIN * SSIM_WIN) as f64;
    let mut acc = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WIN {
        for ox in 0..=w - SSIM_WIN {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for yy in oy..oy + SSIM_WIN {
                for xx in ox..ox + SSIM_WIN {
                    let (p, q) = (x[yy * w + xx], y[yy * w + xx]);
                    sx += p;
                    sy += q;
                    sxx += p * p;
                    syy += q * q;
                    sxy += p * q;
                }
            }
            let (mx, my) = (sx / np, sy / np);
            let vx = (sxx / np - mx * mx).max(0.0);
            let vy = (syy / np - my * my).max(0.0);
            let cxy = sxy / np - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Two-way identification accuracy over all ordered pairs `(i, j ≠ i)`.
///
/// Trial `(i, j)` succeeds when `corr(dec_i, gt_i) > corr(dec_i, gt_j)` and
/// scores 0.5 on a tie. Undefined correlations count as 0.
pub fn two_way_identification<F>(decoded: &[Vec<f64>], gt: &[Vec<f64>], feature: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if decoded.len() != gt.len() {
        return Err(Error::Dimension(format!("{} decoded vs {} ground-truth items", decoded.len(), gt.len())));
    }
    let n = decoded.len();
    if n < 2 {
        return Err(Error::Parameter("two-way identification needs at least 2 items".into()));
    }
    let fd: Vec<Vec<f64>> = decoded.iter().map(|d| feature(d)).collect();
    let fg: Vec<Vec<f64>> = gt.iter().map(|d| feature(d)).collect();
    let corr = |a: &[f64], b: &[f64]| -> Result<f64> {
        match pearson(a, b) {
            Ok(c) => Ok(c),
            Err(Error::UndefinedCorrelation(_)) => Ok(0.0),
            Err(e) => Err(e),
        }
    };
    let mut score = 0.0;
    for i in 0..n {
        let own = corr(&fd[i], &fg[i])?;
        for j in 0..n {
            if j == i {
                continue;
            }
            let other = corr(&fd[i], &fg[j])?;
            if own > other {
                score += 1.0;
            } else if own == other {
                score += 0.5;
            }
        }
    }
    Ok(score / (n * (n - 1)) as f64)
}

/// Default feature function: the flattened values themselves.
pub fn identity_features(x: &[f64]) -> Vec<f64> {
    x.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub items: Vec<f64>,
}

impl MetricSummary {
    /// Population mean and std of the per-item values.
    pub fn from_items(items: Vec<f64>) -> Self {
        let n = items.len().max(1) as f64;
        let mean = items.iter().sum::<f64>() / n;
        let var = items.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            items,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: serde_json::Value,
    pub n: usize,
    pub metrics: BTreeMap<String, MetricSummary>,
}

/// File name of decoded item `i` inside a decode directory.
pub fn item_file_name(i: usize) -> String {
    format!("item_{i:04}.ppm")
}

/// Scores decoded images against ground truth.
///
/// Per-item `pixcorr` maps undefined correlations (constant images) to 0.
/// `two_way` is a set-level score; its per-item value is that item's success
/// rate against all distractors, so the mean equals the set accuracy.
pub fn evaluate_images(decoded: &[Image], gt: &[Image], config: serde_json::Value) -> Result<MetricsReport> {
    if decoded.len() != gt.len() {
        return Err(Error::Data(format!("{} decoded images for {} test items", decoded.len(), gt.len())));
    }
    let mut pc = Vec::with_capacity(gt.len());
    let mut ss = Vec::with_capacity(gt.len());
    for (d, g) in decoded.iter().zip(gt) {
        pc.push(match pixcorr(d, g) {
            Ok(v) => v,
            Err(Error::UndefinedCorrelation(_)) => 0.0,
            Err(e) => return Err(e),
        });
        ss.push(ssim(d, g)?);
    }
    let dv: Vec<Vec<f64>> = decoded.iter().map(|i| i.data.iter().map(|&v| v as f64).collect()).collect();
    let gv: Vec<Vec<f64>> = gt.iter().map(|i| i.data.iter().map(|&v| v as f64).collect()).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("pixcorr".to_string(), MetricSummary::from_items(pc));
    metrics.insert("ssim".to_string(), MetricSummary::from_items(ss));
    if gt.len() >= 2 {
        metrics.insert("two_way".to_string(), MetricSummary::from_items(per_item_two_way(&dv, &gv)?));
    }
    Ok(MetricsReport {
        config,
        n: gt.len(),
        metrics,
    })
}

/// Per-item two-way success rates (pixel features).
pub fn per_item_two_way(decoded: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = decoded.len();
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            let own = pearson(&decoded[i], &gt[i]).unwrap_or(0.0);
            for j in (0..n).filter(|&j| j != i) {
                let other = pearson(&decoded[i], &gt[j]).unwrap_or(0.0);
                s += if own > other {
                    1.0
                } else if own == other {
                    0.5
                } else {
                    0.0
                };
            }
            Ok(s / (n - 1) as f64)
        })
        .collect()
}

/// Reads `item_XXXX.ppm` for every ground-truth item from `dir` and scores them.
pub fn evaluate_dir(dir: &Path, gt: &[Image], config: serde_json::Value) -> Result<MetricsReport> {
    let mut decoded = Vec::with_capacity(gt.len());
    for i in 0..gt.len() {
        let p = dir.join(item_file_name(i));
        if !p.exists() {
            return Err(Error::Data(format!("missing decoded item {}", p.display())));
        }
        decoded.push(read_ppm(&p)?);
    }
    evaluate_images(&decoded, gt, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_ssim_matches_closed_form() {
        let a = Image::filled(3, 8, 8, 0.2);
        let b = Image::filled(3, 8, 8, 0.4);
        let c1 = 1e-4;
        let expect = (2.0 * 0.2 * 0.4 + c1) / (0.04 + 0.16 + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-6);
    }
}
