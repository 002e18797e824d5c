//! Deterministic HU-histogram probe.
//!
//! The slice is block-averaged 4 x 4 (suppressing noise). A block belongs to
//! the body when it lies above -950 HU and its enclosing 16 x 16 block lies
//! above -900 HU (rejecting correlated background noise). Five features are
//! measured on the body:
//!
//! | feature  | definition                                                   |
//! |----------|--------------------------------------------------------------|
//! | `air`    | body fraction in (-950, -400] HU (aerated tissue)            |
//! | `soft`   | body fraction in (-400, 300] HU                              |
//! | `bone`   | body fraction above 300 HU                                   |
//! | `height` | bone centroid row minus body centroid row, over body half-height |
//! | `spread` | std of bone columns over body half-width                     |
//!
//! Label score = `bias + w . features` from [`SCORE_TABLE`], then softmax.

use super::{ProfileSource, StructureProfile, LABELS};
use crate::preprocess::HuSlice;
use serde::{Deserialize, Serialize};

const BLOCK: usize = 4;
const MASK_BLOCK: usize = 16;
const BODY_MIN_HU: f64 = -950.0;
const MASK_MIN_HU: f64 = -900.0;
const AIR_MAX_HU: f64 = -400.0;
const BONE_MIN_HU: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HuFeatures {
    pub air: f64,
    pub soft: f64,
    pub bone: f64,
    pub height: f64,
    pub spread: f64,
}

impl HuFeatures {
    fn as_array(&self) -> [f64; 5] {
        [self.air, self.soft, self.bone, self.height, self.spread]
    }
}

/// Rows follow [`LABELS`]; columns are `[bias, air, soft, bone, height, spread]`.
pub const SCORE_TABLE: [[f64; 6]; 19] = [
    [-6.0, 0.0, 0.0, 0.0, 0.0, 0.0],     // Brain
    [-2.0, 16.0, -2.0, 0.0, 0.0, 0.0],   // Lungs
    [1.0, -14.0, 2.0, -40.0, 0.0, 0.0],  // Liver
    [0.0, -14.0, 2.0, -40.0, 0.0, 0.0],  // Stomach
    [-0.6, -14.0, 2.0, -40.0, 0.5, 0.0], // Kidneys
    [-0.8, -14.0, 2.0, -40.0, 0.0, 0.0], // Pancreas
    [-1.0, -6.0, 2.0, -40.0, 0.0, 0.0],  // Spleen
    [-3.0, 6.0, 1.0, 0.0, 0.0, 0.0],     // Heart
    [-3.2, 10.0, 0.0, 0.0, 0.0, 1.0],    // Chest
    [1.4, -14.0, 2.0, -40.0, 0.0, 0.0],  // Abdomen
    [-2.5, -4.0, 0.0, 40.0, -1.0, 2.0],  // Pelvis
    [-2.0, -2.0, 0.0, 10.0, 1.5, -1.0],  // Spine
    [-4.0, 8.0, 0.0, 0.0, 0.0, 2.0],     // Ribs
    [-3.5, -4.0, 0.0, 30.0, -1.0, 1.0],  // Bladder
    [-4.0, -4.0, 0.0, 30.0, -1.0, 0.0],  // Prostate
    [-4.5, -4.0, 0.0, 28.0, -1.0, 0.0],  // Uterus
    [-3.0, -4.0, 1.0, 0.0, 0.0, 0.0],    // Adrenal Glands
    [-5.0, 4.0, 0.0, 0.0, 0.0, 0.0],     // Thyroid
    [-4.0, 6.0, 0.0, 0.0, 0.0, 0.0],     // Esophagus
];

/// Features of one slice; an empty body gives all zeros.
pub fn hu_features(slice: &HuSlice) -> HuFeatures {
    let (w, h) = (slice.width() / BLOCK, slice.height() / BLOCK);
    let px = slice.pixels();
    let block_mean = |r0: usize, c0: usize, size: usize| {
        let mut sum = 0.0;
        for r in r0..(r0 + size).min(slice.height()) {
            for c in c0..(c0 + size).min(slice.width()) {
                sum += f64::from(px[r * slice.width() + c]);
            }
        }
        sum / (size * size) as f64
    };
    let ratio = MASK_BLOCK / BLOCK;
    let mw = w.div_ceil(ratio);
    let mask: Vec<bool> = (0..h.div_ceil(ratio))
        .flat_map(|mr| (0..mw).map(move |mc| (mr, mc)))
        .map(|(mr, mc)| block_mean(mr * MASK_BLOCK, mc * MASK_BLOCK, MASK_BLOCK) > MASK_MIN_HU)
        .collect();
    let mut n_body = 0usize;
    let (mut air, mut soft, mut bone) = (0usize, 0usize, 0usize);
    let mut body_r = 0.0;
    let (mut bone_r, mut bone_c, mut bone_c2) = (0.0, 0.0, 0.0);
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    for br in 0..h {
        for bc in 0..w {
            let v = block_mean(br * BLOCK, bc * BLOCK, BLOCK);
            if v <= BODY_MIN_HU || !mask[(br / ratio) * mw + bc / ratio] {
                continue;
            }
            let (r, c) = (br as f64, bc as f64);
            n_body += 1;
            body_r += r;
            rmin = rmin.min(br);
            rmax = rmax.max(br);
            cmin = cmin.min(bc);
            cmax = cmax.max(bc);
            if v <= AIR_MAX_HU {
                air += 1;
            } else if v <= BONE_MIN_HU {
                soft += 1;
            } else {
                bone += 1;
                bone_r += r;
                bone_c += c;
                bone_c2 += c * c;
            }
        }
    }
    if n_body == 0 {
        return HuFeatures::default();
    }
    let nb = n_body as f64;
    let mut f = HuFeatures {
        air: air as f64 / nb,
        soft: soft as f64 / nb,
        bone: bone as f64 / nb,
        height: 0.0,
        spread: 0.0,
    };
    if bone > 0 {
        let k = bone as f64;
        let half_h = ((rmax - rmin) as f64 / 2.0).max(1.0);
        let half_w = ((cmax - cmin) as f64 / 2.0).max(1.0);
        let mean_c = bone_c / k;
        f.height = ((bone_r / k - body_r / nb) / half_h).clamp(-1.0, 1.0);
        f.spread = ((bone_c2 / k - mean_c * mean_c).max(0.0).sqrt() / half_w).min(1.0);
    }
    f
}

pub fn scores(features: &HuFeatures) -> [f64; 19] {
    let x = features.as_array();
    let mut out = [0.0; 19];
    for (o, row) in out.iter_mut().zip(SCORE_TABLE.iter()) {
        *o = row[0] + row[1..].iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
    }
    out
}

/// Pure function of the pixel data.
pub fn profile_builtin(slice: &HuSlice) -> StructureProfile {
    let s = scores(&hu_features(slice));
    StructureProfile::from_scores(&slice.slice_id, &s, ProfileSource::Builtin)
        .expect("finite scores over the fixed label set")
}

const _: () = assert!(SCORE_TABLE.len() == LABELS.len());

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::phantom::{phantom_pair, PhantomConfig, Regime};
    use crate::preprocess::DoseTag;

    fn uniform(hu: i16) -> HuSlice {
        HuSlice::new("u", "p", DoseTag::Quarter, vec![hu; 512 * 512]).unwrap()
    }

    #[test]
    fn uniform_water_is_abdominal() {
        let f = hu_features(&uniform(0));
        assert_eq!(f.soft, 1.0);
        let p = profile_builtin(&uniform(0));
        assert!(
            ["Abdomen", "Liver", "Stomach"].contains(&p.top_label()),
            "{}",
            p.top_label()
        );
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn air_only_slice_is_valid() {
        let p = profile_builtin(&uniform(-1000));
        p.validate().unwrap();
    }

    #[test]
    fn phantom_regimes_reach_their_labels() {
        let cfg = PhantomConfig::default();
        for (regime, label) in [
            (Regime::Lung, "Lungs"),
            (Regime::Pelvis, "Pelvis"),
            (Regime::Abdomen, "Abdomen"),
        ] {
            for i in 0..3 {
                let q = phantom_pair(regime, i, 11, &cfg).unwrap().quarter;
                let p = profile_builtin(&q);
                assert_eq!(p.top_label(), label, "{regime} #{i}: {:?}", hu_features(&q));
            }
        }
    }

    #[test]
    fn lung_phantom_has_aerated_fraction() {
        let q = phantom_pair(Regime::Lung, 0, 2, &PhantomConfig::default())
            .unwrap()
            .quarter;
        let f = hu_features(&q);
        assert!(f.air > 0.3, "{f:?}");
        assert!(f.spread > 0.3, "ribs spread laterally: {f:?}");
    }
}
