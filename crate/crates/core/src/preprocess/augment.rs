use super::{Grid, PatchPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugPolicy {
    Baseline,
    Expert,
}

/// Transform applied to a patch pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugTag {
    Identity,
    Rot90,
    RotNeg90,
    FlipH,
    FlipV,
    Rotate { degrees: f32 },
}

impl AugTag {
    pub fn apply(&self, g: &Grid) -> Grid {
        match *self {
            AugTag::Identity => g.clone(),
            AugTag::Rot90 => rot90(g),
            AugTag::RotNeg90 => rot_neg90(g),
            AugTag::FlipH => flip_h(g),
            AugTag::FlipV => flip_v(g),
            AugTag::Rotate { degrees } => rotate_bilinear(g, degrees),
        }
    }
}

/// Counter-clockwise quarter turn.
fn rot90(g: &Grid) -> Grid {
    let (w, h) = (g.width, g.height);
    let mut out = Grid::filled(h, w, 0.0);
    for r in 0..w {
        for c in 0..h {
            out.set(r, c, g.at(c, w - 1 - r));
        }
    }
    out
}

fn rot_neg90(g: &Grid) -> Grid {
    let (w, h) = (g.width, g.height);
    let mut out = Grid::filled(h, w, 0.0);
    for r in 0..w {
        for c in 0..h {
            out.set(r, c, g.at(h - 1 - c, r));
        }
    }
    out
}

fn flip_h(g: &Grid) -> Grid {
    let mut out = g.clone();
    for row in out.data.chunks_mut(g.width) {
        row.reverse();
    }
    out
}

fn flip_v(g: &Grid) -> Grid {
    let mut out = Vec::with_capacity(g.data.len());
    for row in g.data.chunks(g.width).rev() {
        out.extend_from_slice(row);
    }
    Grid::new(g.width, g.height, out)
}

/// Mirror a coordinate into `[0, n - 1]` (edge pixel not repeated).
fn reflect(mut x: f32, n: usize) -> f32 {
    let hi = (n - 1) as f32;
    if hi == 0.0 {
        return 0.0;
    }
    loop {
        if x < 0.0 {
            x = -x;
        } else if x > hi {
            x = 2.0 * hi - x;
        } else {
            return x;
        }
    }
}

/// Rotates about the patch center by `degrees` (counter-clockwise) with
/// bilinear sampling and reflected borders. Output stays in the input's
/// value range since every sample is a convex combination.
pub fn rotate_bilinear(g: &Grid, degrees: f32) -> Grid {
    let (w, h) = (g.width, g.height);
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = (w as f32 - 1.0) / 2.0;
    let cy = (h as f32 - 1.0) / 2.0;
    let mut out = Grid::filled(w, h, 0.0);
    for r in 0..h {
        for col in 0..w {
            let x = col as f32 - cx;
            let y = r as f32 - cy;
            // inverse map: rotate the output coordinate back by -theta
            let sx = reflect(c * x - s * y + cx, w);
            let sy = reflect(s * x + c * y + cy, h);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            let top = g.at(y0, x0) * (1.0 - fx) + g.at(y0, x1) * fx;
            let bot = g.at(y1, x0) * (1.0 - fx) + g.at(y1, x1) * fx;
            out.set(r, col, top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Expands one pair into its augmented variants. Both doses always receive
/// the identical transform.
///
/// Baseline: original, +90, -90, horizontal and vertical flip. Expert: the
/// same plus one rotation by an angle drawn uniformly from [30, 60] degrees.
pub fn augment(pair: &PatchPair, policy: AugPolicy, seed: u64) -> Vec<PatchPair> {
    augment_tags(policy, seed)
        .into_iter()
        .map(|tag| PatchPair {
            low: tag.apply(&pair.low),
            full: tag.apply(&pair.full),
            origin: pair.origin.clone(),
            augmentation: tag,
        })
        .collect()
}

/// The transforms [`augment`] applies, in emission order.
pub fn augment_tags(policy: AugPolicy, seed: u64) -> Vec<AugTag> {
    let mut tags = vec![
        AugTag::Identity,
        AugTag::Rot90,
        AugTag::RotNeg90,
        AugTag::FlipH,
        AugTag::FlipV,
    ];
    if policy == AugPolicy::Expert {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tags.push(AugTag::Rotate {
            degrees: rng.random_range(30.0f32..=60.0),
        });
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::PatchOrigin;

    fn ramp(n: usize) -> Grid {
        Grid::new(n, n, (0..n * n).map(|i| (i % 97) as f32 / 96.0).collect())
    }

    fn pair() -> PatchPair {
        PatchPair {
            low: ramp(55),
            full: rot90(&ramp(55)),
            origin: PatchOrigin {
                slice_id: "s1".into(),
                row_tile: 2,
                col_tile: 3,
            },
            augmentation: AugTag::Identity,
        }
    }

    #[test]
    fn quarter_turns_cancel() {
        let g = ramp(55);
        assert_eq!(rot_neg90(&rot90(&g)), g);
        assert_eq!(rot90(&rot_neg90(&g)), g);
        let four = rot90(&rot90(&rot90(&rot90(&g))));
        assert_eq!(four, g);
    }

    #[test]
    fn flips_are_involutions() {
        let g = ramp(55);
        assert_eq!(flip_h(&flip_h(&g)), g);
        assert_eq!(flip_v(&flip_v(&g)), g);
        assert_ne!(flip_h(&g), g);
    }

    #[test]
    fn rot90_moves_corners() {
        let mut g = Grid::filled(3, 3, 0.0);
        g.set(0, 2, 1.0); // top-right
        let r = rot90(&g);
        assert_eq!(r.at(0, 0), 1.0); // counter-clockwise: top-right -> top-left
    }

    #[test]
    fn smooth_disk_survives_45_degrees() {
        let n = 55;
        let c = (n as f32 - 1.0) / 2.0;
        let disk = Grid::new(
            n,
            n,
            (0..n * n)
                .map(|i| {
                    let (r, col) = ((i / n) as f32, (i % n) as f32);
                    let d = ((r - c).powi(2) + (col - c).powi(2)).sqrt();
                    // soft edge well inside the reflected-corner footprint
                    ((13.0 - d) / 2.0).clamp(0.0, 1.0)
                })
                .collect(),
        );
        let rot = rotate_bilinear(&disk, 45.0);
        let mad: f32 =
            rot.data.iter().zip(&disk.data).map(|(a, b)| (a - b).abs()).sum::<f32>() / disk.data.len() as f32;
        assert!(mad < 1e-2, "mean abs diff {mad}");
    }

    #[test]
    fn zero_rotation_is_identity() {
        let g = ramp(55);
        let r = rotate_bilinear(&g, 0.0);
        for (a, b) in r.data.iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn policies_and_pairing() {
        let p = pair();
        let base = augment(&p, AugPolicy::Baseline, 1);
        assert_eq!(base.len(), 5);
        let exp = augment(&p, AugPolicy::Expert, 1);
        assert_eq!(exp.len(), 6);
        let AugTag::Rotate { degrees } = exp[5].augmentation else {
            panic!("expected a fractional rotation");
        };
        assert!((30.0..=60.0).contains(&degrees));
        for a in exp {
            assert_eq!(a.origin, p.origin);
            assert_eq!(a.low, a.augmentation.apply(&p.low));
            assert_eq!(a.full, a.augmentation.apply(&p.full));
            assert!(a.low.data.iter().chain(&a.full.data).all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(augment(&p, AugPolicy::Expert, 7), augment(&p, AugPolicy::Expert, 7));
    }
}
