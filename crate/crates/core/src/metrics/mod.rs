//! RMSE, PSNR and SSIM on normalized reconstructions, plus mean / std
//! aggregation and report emission.
//!
//! All metrics assume intensities in [0, 1] and PSNR uses `MAX = 1`. They
//! are computed on the 495 x 495 region covered by the patch grid.

mod ssim;

pub use ssim::{gaussian_window, ssim, SsimConfig};

use crate::preprocess::Grid;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const REPORT_REGION: &str = "495x495";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("image {width}x{height} smaller than the {window}x{window} SSIM window")]
    TooSmall { width: usize, height: usize, window: usize },
    #[error("invalid SSIM config: {0}")]
    Config(String),
    #[error("no rows to aggregate")]
    Empty,
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn check_shape(a: &Grid, b: &Grid) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::Shape((a.width, a.height), (b.width, b.height)));
    }
    Ok(())
}

pub fn mse(pred: &Grid, target: &Grid) -> Result<f64> {
    check_shape(pred, target)?;
    let sum: f64 = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&p, &t)| {
            let d = f64::from(p) - f64::from(t);
            d * d
        })
        .sum();
    Ok(sum / pred.data.len() as f64)
}

pub fn rmse(pred: &Grid, target: &Grid) -> Result<f64> {
    Ok(mse(pred, target)?.sqrt())
}

/// `20 log10(max / rmse)`; identical images give `f64::INFINITY`.
pub fn psnr(pred: &Grid, target: &Grid, max_val: f64) -> Result<f64> {
    Ok(psnr_from_rmse(rmse(pred, target)?, max_val))
}

pub fn psnr_from_rmse(rmse: f64, max_val: f64) -> f64 {
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        20.0 * (max_val / rmse).log10()
    }
}

/// Metrics of one reconstructed image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub rmse: f64,
    /// `None` stands for +infinity (exact reconstruction).
    pub psnr: Option<f64>,
    pub ssim: f64,
}

pub fn image_metrics(pred: &Grid, target: &Grid) -> Result<ImageMetrics> {
    let r = rmse(pred, target)?;
    let p = psnr_from_rmse(r, 1.0);
    Ok(ImageMetrics {
        rmse: r,
        psnr: p.is_finite().then_some(p),
        ssim: ssim(pred, target, &SsimConfig::default())?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    #[default]
    Population,
    Sample,
}

/// Mean and standard deviation (two-pass).
pub fn mean_std(values: &[f64], mode: StdMode) -> Option<(f64, f64)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    let denom = match mode {
        StdMode::Population => n as f64,
        StdMode::Sample if n > 1 => (n - 1) as f64,
        StdMode::Sample => return Some((mean, 0.0)),
    };
    Some((mean, (ss / denom).sqrt()))
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub psnr_mean_db: f64,
    pub psnr_std_db: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub n_images: usize,
    /// Images with infinite PSNR, left out of the PSNR mean and std.
    #[serde(default)]
    pub psnr_infinite: usize,
}

pub fn aggregate(method: &str, images: &[ImageMetrics], mode: StdMode) -> Result<MetricRow> {
    if images.is_empty() {
        return Err(MetricsError::Empty);
    }
    let rmse: Vec<f64> = images.iter().map(|m| m.rmse).collect();
    let ssim: Vec<f64> = images.iter().map(|m| m.ssim).collect();
    let psnr: Vec<f64> = images.iter().filter_map(|m| m.psnr).collect();
    let infinite = images.len() - psnr.len();
    if infinite > 0 {
        log::warn!("{method}: {infinite} exact reconstructions excluded from PSNR statistics");
    }
    let (rmse_mean, rmse_std) = mean_std(&rmse, mode).ok_or(MetricsError::Empty)?;
    let (ssim_mean, ssim_std) = mean_std(&ssim, mode).ok_or(MetricsError::Empty)?;
    let (psnr_mean_db, psnr_std_db) = mean_std(&psnr, mode).unwrap_or((f64::INFINITY, 0.0));
    Ok(MetricRow {
        method: method.to_string(),
        rmse_mean,
        rmse_std,
        psnr_mean_db,
        psnr_std_db,
        ssim_mean,
        ssim_std,
        n_images: images.len(),
        psnr_infinite: infinite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub psnr_max: f64,
    pub std: StdMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<MetricRow>,
    pub region: String,
    pub conventions: Conventions,
}

impl Report {
    pub fn new(rows: Vec<MetricRow>, std: StdMode) -> Self {
        Self {
            rows,
            region: REPORT_REGION.into(),
            conventions: Conventions { psnr_max: 1.0, std },
        }
    }

    /// `method,metric,mean,std`, one line per bar.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,metric,mean,std\n");
        for r in &self.rows {
            for (metric, mean, std) in [
                ("rmse", r.rmse_mean, r.rmse_std),
                ("psnr", r.psnr_mean_db, r.psnr_std_db),
                ("ssim", r.ssim_mean, r.ssim_std),
            ] {
                out.push_str(&format!("{},{metric},{mean},{std}\n", r.method));
            }
        }
        out
    }

    pub fn emit(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        if self.rows.is_empty() {
            return Err(MetricsError::Empty);
        }
        write(json_path.as_ref(), &serde_json::to_string_pretty(self)?)?;
        write(csv_path.as_ref(), &self.to_csv())
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: Vec<f32>) -> Grid {
        let n = (v.len() as f64).sqrt() as usize;
        Grid::new(n, n, v)
    }

    #[test]
    fn rmse_closed_forms() {
        let a = grid(vec![0.2; 16]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b = grid(vec![0.25; 16]);
        let r = rmse(&b, &a).unwrap();
        assert!((r - 0.05).abs() < 1e-7);
        assert_eq!(r, rmse(&a, &b).unwrap());
    }

    #[test]
    fn psnr_closed_forms() {
        assert_eq!(psnr_from_rmse(0.1, 1.0), 20.0);
        assert_eq!(psnr_from_rmse(0.01, 1.0), 40.0);
        assert_eq!(psnr_from_rmse(0.0, 1.0), f64::INFINITY);
        assert!(psnr_from_rmse(0.2, 1.0) < psnr_from_rmse(0.1, 1.0));
    }

    #[test]
    fn shape_mismatch() {
        let a = Grid::filled(4, 4, 0.0);
        let b = Grid::filled(4, 5, 0.0);
        assert!(matches!(rmse(&a, &b), Err(MetricsError::Shape(..))));
    }

    #[test]
    fn std_modes() {
        assert_eq!(mean_std(&[1.0, 3.0], StdMode::Population), Some((2.0, 1.0)));
        let (_, s) = mean_std(&[1.0, 3.0], StdMode::Sample).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[5.0], StdMode::Population), Some((5.0, 0.0)));
        assert_eq!(mean_std(&[], StdMode::Population), None);
    }

    #[test]
    fn aggregate_skips_infinite_psnr() {
        let rows = [
            ImageMetrics {
                rmse: 0.0,
                psnr: None,
                ssim: 1.0,
            },
            ImageMetrics {
                rmse: 0.1,
                psnr: Some(20.0),
                ssim: 0.5,
            },
            ImageMetrics {
                rmse: 0.01,
                psnr: Some(40.0),
                ssim: 0.9,
            },
        ];
        let row = aggregate("m", &rows, StdMode::Population).unwrap();
        assert_eq!(row.psnr_infinite, 1);
        assert_eq!(row.psnr_mean_db, 30.0);
        assert_eq!(row.psnr_std_db, 10.0);
        assert_eq!(row.n_images, 3);
        assert!(matches!(
            aggregate("m", &[], StdMode::Population),
            Err(MetricsError::Empty)
        ));
    }

    #[test]
    fn csv_layout() {
        let row = aggregate(
            "Baseline",
            &[ImageMetrics {
                rmse: 0.1,
                psnr: Some(20.0),
                ssim: 0.5,
            }],
            StdMode::Population,
        )
        .unwrap();
        let csv = Report::new(vec![row], StdMode::Population).to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "method,metric,mean,std");
        assert_eq!(lines[1], "Baseline,rmse,0.1,0");
        assert_eq!(lines[2], "Baseline,psnr,20,0");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn report_json_shape() {
        let r = Report::new(vec![], StdMode::Population);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["region"], "495x495");
        assert_eq!(v["conventions"]["std"], "population");
        assert_eq!(v["conventions"]["psnr_max"], 1.0);
    }
}
