//! Synthetic thorax / abdomen / pelvis phantoms with dose-dependent noise.
//!
//! Each pair shares one clean anatomy and draws independent noise for the
//! quarter- and full-dose acquisitions. Noise per pixel is
//!
//! ```text
//! n = sigma_r * sqrt((1 + s) / dose) * z_p + sigma_e * z_g
//! ```
//!
//! where `s = max(hu + 1000, 0) / 1000` is the relative attenuation,
//! `z_p` a standardized Poisson draw, `z_g` a standard normal and `sigma_r`
//! a regime-specific scale (denser anatomy, fewer photons, more noise).
//! The `z_p` field is smoothed by a unit-variance Gaussian whose width is
//! regime-specific, mimicking sharp lung versus soft-tissue reconstruction
//! kernels.

use super::io::{write_hu16, Manifest, ManifestEntry};
use super::{DoseTag, HuSlice, PreprocessError, Result, SLICE_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Lung,
    Abdomen,
    Pelvis,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Lung, Regime::Abdomen, Regime::Pelvis];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Lung => "lung",
            Regime::Abdomen => "abdomen",
            Regime::Pelvis => "pelvis",
        }
    }

    pub fn parse(s: &str) -> Option<Regime> {
        Regime::ALL.into_iter().find(|r| r.as_str() == s)
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub slices_per_regime: usize,
    pub slices_per_patient: usize,
    pub quarter_dose: f64,
    pub full_dose: f64,
    /// Full-dose noise scale at water, HU, per regime (lung, abdomen, pelvis).
    pub sigma_hu: [f64; 3],
    pub electronic_sigma_hu: f64,
    /// Correlation length of the quantum noise, pixels, per regime.
    pub noise_corr_px: [f64; 3],
    /// Mean photon count behind the standardized Poisson term at full dose.
    pub photons: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            slices_per_regime: 12,
            slices_per_patient: 4,
            quarter_dose: 0.25,
            full_dose: 1.0,
            sigma_hu: [14.0, 28.0, 48.0],
            electronic_sigma_hu: 4.0,
            noise_corr_px: [0.0, 0.7, 1.4],
            photons: 64.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.slices_per_patient > 0
            && self.quarter_dose > 0.0
            && self.full_dose > 0.0
            && self.photons > 0.0
            && self.electronic_sigma_hu >= 0.0
            && self.sigma_hu.iter().all(|s| *s >= 0.0 && s.is_finite())
            && self.noise_corr_px.iter().all(|s| (0.0..=8.0).contains(s));
        if ok {
            Ok(())
        } else {
            Err(PreprocessError::Manifest(format!("invalid phantom config: {self:?}")))
        }
    }

    pub fn sigma_for(&self, regime: Regime) -> f64 {
        self.sigma_hu[regime as usize]
    }

    pub fn corr_for(&self, regime: Regime) -> f64 {
        self.noise_corr_px[regime as usize]
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Ring {
        cx: f64,
        cy: f64,
        r_in: f64,
        r_out: f64,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let dx = x - cx;
                let dy = y - cy;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Ring { cx, cy, r_in, r_out } => {
                let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                d2 >= r_in * r_in && d2 <= r_out * r_out
            }
        }
    }
}

/// Later layers overwrite earlier ones.
struct Layer {
    shape: Shape,
    hu: f64,
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, hu: f64) -> Layer {
    Layer {
        shape: Shape::Ellipse {
            cx,
            cy,
            rx,
            ry,
            angle: 0.0,
        },
        hu,
    }
}

fn rotated(cx: f64, cy: f64, rx: f64, ry: f64, angle: f64, hu: f64) -> Layer {
    Layer {
        shape: Shape::Ellipse { cx, cy, rx, ry, angle },
        hu,
    }
}

fn ring(cx: f64, cy: f64, r_in: f64, r_out: f64, hu: f64) -> Layer {
    Layer {
        shape: Shape::Ring { cx, cy, r_in, r_out },
        hu,
    }
}

/// Scene in slice coordinates (origin at the image center, y down).
fn anatomy(regime: Regime, rng: &mut ChaCha8Rng) -> Vec<Layer> {
    let mut j = |a: f64| rng.random_range(-a..=a);
    let (bx, by) = (j(8.0), j(8.0));
    let scale = 1.0 + j(0.06);
    let s = |v: f64| v * scale;
    let mut layers = Vec::new();
    match regime {
        Regime::Lung => {
            layers.push(ellipse(bx, by, s(205.0), s(150.0), -90.0));
            layers.push(ellipse(bx, by, s(190.0), s(136.0), 40.0));
            for side in [-1.0, 1.0] {
                let cx = bx + side * s(88.0 + j(6.0));
                layers.push(rotated(
                    cx,
                    by - s(8.0),
                    s(72.0 + j(6.0)),
                    s(102.0 + j(6.0)),
                    side * 0.12,
                    -820.0 + j(40.0),
                ));
                for _ in 0..5 {
                    let vx = cx + j(45.0);
                    let vy = by + j(70.0);
                    layers.push(ellipse(vx, vy, 3.0 + j(1.5), 3.0 + j(1.5), 30.0));
                }
            }
            layers.push(ellipse(bx + s(22.0), by + s(18.0), s(52.0), s(46.0), 45.0));
            layers.push(ellipse(bx, by + s(108.0), s(22.0), s(20.0), 700.0));
            layers.push(ellipse(bx, by + s(108.0), s(12.0), s(10.0), 280.0));
            for k in 0..10 {
                let t = std::f64::consts::PI * (0.15 + 0.7 * k as f64 / 9.0);
                let (sx, cy) = (t.cos(), t.sin());
                for side in [-1.0, 1.0] {
                    let rx = bx + side * s(176.0) * cy.max(0.3);
                    let ry = by - s(120.0) * sx;
                    layers.push(ellipse(rx, ry, 7.0, 5.0, 650.0));
                }
            }
        }
        Regime::Abdomen => {
            layers.push(ellipse(bx, by, s(215.0), s(162.0), -100.0));
            layers.push(ellipse(bx, by, s(196.0), s(144.0), 40.0));
            layers.push(rotated(
                bx - s(70.0),
                by - s(15.0),
                s(92.0 + j(8.0)),
                s(72.0 + j(6.0)),
                0.2,
                62.0 + j(6.0),
            ));
            layers.push(ellipse(bx + s(98.0), by - s(20.0), s(38.0), s(52.0), 48.0));
            layers.push(ellipse(bx + s(20.0), by - s(62.0), s(46.0), s(30.0), 30.0));
            for side in [-1.0, 1.0] {
                layers.push(ellipse(bx + side * s(62.0), by + s(60.0), s(22.0), s(34.0), 32.0));
            }
            layers.push(ellipse(bx + s(10.0), by + s(18.0), s(40.0), s(12.0), 42.0));
            for _ in 0..4 {
                layers.push(ellipse(
                    bx + j(60.0),
                    by + j(40.0) - 10.0,
                    7.0 + j(3.0),
                    6.0 + j(3.0),
                    -900.0,
                ));
            }
            layers.push(ellipse(bx, by + s(108.0), s(24.0), s(21.0), 720.0));
            layers.push(ellipse(bx, by + s(108.0), s(13.0), s(11.0), 260.0));
        }
        Regime::Pelvis => {
            layers.push(ellipse(bx, by, s(225.0), s(150.0), -100.0));
            layers.push(ellipse(bx, by, s(206.0), s(134.0), 40.0));
            for side in [-1.0, 1.0] {
                let cx = bx + side * s(120.0 + j(6.0));
                layers.push(ring(cx, by - s(6.0), s(28.0), s(44.0), 780.0 + j(40.0)));
                layers.push(ellipse(cx, by - s(6.0), s(28.0), s(28.0), 320.0));
                layers.push(rotated(
                    bx + side * s(70.0),
                    by + s(70.0),
                    s(48.0),
                    s(12.0),
                    side * 0.6,
                    700.0,
                ));
            }
            layers.push(ellipse(bx, by + s(96.0), s(40.0), s(22.0), 680.0));
            layers.push(ellipse(bx, by + s(96.0), s(26.0), s(12.0), 300.0));
            layers.push(ellipse(bx, by - s(40.0), s(52.0 + j(8.0)), s(42.0 + j(6.0)), 8.0));
            layers.push(ellipse(bx, by + s(30.0), s(24.0), s(20.0), 46.0));
        }
    }
    for _ in 0..3 {
        let (lx, ly) = (bx + j(110.0), by + j(70.0));
        let r = 4.0 + j(2.0).abs() * 2.0;
        let contrast = if j(1.0) > 0.0 { 60.0 } else { -40.0 };
        layers.push(ellipse(lx, ly, r, r, 40.0 + contrast));
    }
    layers
}

/// Noise-free slice, row-major HU.
fn render(layers: &[Layer]) -> Vec<f64> {
    let half = (SLICE_SIZE as f64 - 1.0) / 2.0;
    let mut out = vec![-1000.0; SLICE_SIZE * SLICE_SIZE];
    for (i, px) in out.iter_mut().enumerate() {
        let x = (i % SLICE_SIZE) as f64 - half;
        let y = (i / SLICE_SIZE) as f64 - half;
        for l in layers {
            if l.shape.contains(x, y) {
                *px = l.hu;
            }
        }
    }
    out
}

/// 1-D taps with unit sum of squares, so white input keeps unit variance.
fn unit_power_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= norm);
    w
}

/// Separable blur with edge clamping, in place on an N x N field.
fn correlate(field: &mut [f64], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let w = unit_power_kernel(sigma);
    let r = (w.len() / 2) as i64;
    let n = SLICE_SIZE as i64;
    let at = |i: i64| i.clamp(0, n - 1) as usize;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..SLICE_SIZE {
        let row = &field[y * SLICE_SIZE..(y + 1) * SLICE_SIZE];
        for x in 0..n {
            tmp[y * SLICE_SIZE + x as usize] = w.iter().enumerate().map(|(k, wk)| wk * row[at(x + k as i64 - r)]).sum();
        }
    }
    for y in 0..n {
        for x in 0..SLICE_SIZE {
            field[y as usize * SLICE_SIZE + x] = w
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * tmp[at(y + k as i64 - r) * SLICE_SIZE + x])
                .sum();
        }
    }
}

fn add_noise(clean: &[f64], sigma_r: f64, corr: f64, dose: f64, cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<i16> {
    let lambda = cfg.photons * dose;
    let poisson = Poisson::new(lambda).expect("positive photon count");
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let inv_sqrt_l = 1.0 / lambda.sqrt();
    let mut zp: Vec<f64> = (0..clean.len())
        .map(|_| (poisson.sample(rng) - lambda) * inv_sqrt_l)
        .collect();
    correlate(&mut zp, corr);
    clean
        .iter()
        .zip(&zp)
        .map(|(&hu, &zp)| {
            let s = (hu + 1000.0).max(0.0) / 1000.0;
            let zg: f64 = gauss.sample(rng);
            let v = hu + sigma_r * ((1.0 + s) / dose).sqrt() * zp + cfg.electronic_sigma_hu * zg;
            v.round().clamp(-1024.0, 3071.0) as i16
        })
        .collect()
}

/// One simulated acquisition.
#[derive(Debug, Clone)]
pub struct PhantomPair {
    pub regime: Regime,
    pub pair_id: String,
    pub patient_id: String,
    pub quarter: HuSlice,
    pub full: HuSlice,
}

fn pair_rng(seed: u64, regime: Regime, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(regime.index() << 32 | index as u64);
    rng
}

/// Deterministic in `(seed, regime, index)`.
pub fn phantom_pair(regime: Regime, index: usize, seed: u64, cfg: &PhantomConfig) -> Result<PhantomPair> {
    cfg.validate()?;
    let mut rng = pair_rng(seed, regime, index);
    let clean = render(&anatomy(regime, &mut rng));
    let (sigma, corr) = (cfg.sigma_for(regime), cfg.corr_for(regime));
    let q = add_noise(&clean, sigma, corr, cfg.quarter_dose, cfg, &mut rng);
    let f = add_noise(&clean, sigma, corr, cfg.full_dose, cfg, &mut rng);
    let pair_id = format!("{regime}-{index:04}");
    let patient_id = format!("{regime}-p{:03}", index / cfg.slices_per_patient);
    Ok(PhantomPair {
        regime,
        quarter: HuSlice::new(format!("{pair_id}-q"), &patient_id, DoseTag::Quarter, q)?,
        full: HuSlice::new(format!("{pair_id}-f"), &patient_id, DoseTag::Full, f)?,
        pair_id,
        patient_id,
    })
}

/// Writes `slices_per_regime` pairs per regime as `.hu16` files plus
/// `manifest.json` into `out_dir`.
pub fn generate_dataset(cfg: &PhantomConfig, seed: u64, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| PreprocessError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let jobs: Vec<(Regime, usize)> = Regime::ALL
        .into_iter()
        .flat_map(|r| (0..cfg.slices_per_regime).map(move |i| (r, i)))
        .collect();
    let entries: Vec<Vec<ManifestEntry>> = jobs
        .par_iter()
        .map(|&(regime, i)| {
            let p = phantom_pair(regime, i, seed, cfg)?;
            let mut out = Vec::with_capacity(2);
            for s in [&p.quarter, &p.full] {
                let file = format!("{}.hu16", s.slice_id);
                write_hu16(s, out_dir.join(&file))?;
                out.push(ManifestEntry {
                    slice_id: s.slice_id.clone(),
                    patient_id: p.patient_id.clone(),
                    dose_tag: s.dose,
                    path: file,
                    pair_id: p.pair_id.clone(),
                    regime: Some(regime.as_str().to_string()),
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        entries: entries.into_iter().flatten().collect(),
        base_dir: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}
