use super::{check_shape, MetricsError, Result};
use crate::preprocess::Grid;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
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

impl SsimConfig {
    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) || self.sigma <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(MetricsError::Config(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(cfg: &SsimConfig) -> Vec<f64> {
    let half = (cfg.window / 2) as f64;
    let taps: Vec<f64> = (0..cfg.window)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * cfg.sigma * cfg.sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Valid-mode separable filter of a row-major `h x w` map.
fn filter(src: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w - k + 1, h - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let line = &src[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&line[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (i, t) in taps.iter().enumerate() {
            let src_row = &rows[(r + i) * ow..(r + i + 1) * ow];
            for (o, v) in out[r * ow..(r + 1) * ow].iter_mut().zip(src_row) {
                *o += t * v;
            }
        }
    }
    out
}

/// Mean SSIM over every window position that lies fully inside the image.
pub fn ssim(pred: &Grid, target: &Grid, cfg: &SsimConfig) -> Result<f64> {
    check_shape(pred, target)?;
    cfg.validate()?;
    let (w, h) = (pred.width, pred.height);
    if w < cfg.window || h < cfg.window {
        return Err(MetricsError::TooSmall {
            width: w,
            height: h,
            window: cfg.window,
        });
    }
    let taps = gaussian_window(cfg);
    let x: Vec<f64> = pred.data.iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = target.data.iter().map(|&v| f64::from(v)).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter(&x, w, h, &taps);
    let my = filter(&y, w, h, &taps);
    let mxx = filter(&prod(&x, &x), w, h, &taps);
    let myy = filter(&prod(&y, &y), w, h, &taps);
    let mxy = filter(&prod(&x, &y), w, h, &taps);
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let t = gaussian_window(&SsimConfig::default());
        assert_eq!(t.len(), 11);
        let s: f64 = t.iter().sum();
        assert!((s - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(t[i], t[10 - i]);
        }
        assert!(t[5] > t[4]);
    }

    #[test]
    fn identical_images_score_one() {
        let g = Grid::new(16, 16, (0..256).map(|i| (i % 13) as f32 / 12.0).collect());
        let s = ssim(&g, &g, &SsimConfig::default()).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn too_small_rejected() {
        let g = Grid::filled(10, 20, 0.5);
        assert!(matches!(
            ssim(&g, &g, &SsimConfig::default()),
            Err(MetricsError::TooSmall { .. })
        ));
    }
}
