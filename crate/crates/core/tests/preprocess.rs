//! Slice windowing, tiling, augmentation and the phantom dataset on disk.

use aide_core::preprocess::io::{read_hu16, write_hu16, Manifest};
use aide_core::preprocess::phantom::{generate_dataset, PhantomConfig};
use aide_core::preprocess::{
    augment, augment_tags, covered_region, normalize_hu, patch_pairs, patchify, unpatchify, AugPolicy, AugTag, DoseTag,
    Grid, HuSlice, COVERED, PATCH_SIZE,
};
use proptest::prelude::*;

fn slice_from(seed: u64) -> HuSlice {
    let px = (0..512 * 512)
        .map(|i: u64| (((i.wrapping_mul(2654435761) ^ seed) % 4000) as i64 - 1000) as i16)
        .collect();
    HuSlice::new("s", "p", DoseTag::Quarter, px).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tiling_round_trips_on_the_covered_square(seed in any::<u64>(), fill in 0.0f32..1.0) {
        let g = normalize_hu(&slice_from(seed));
        let back = unpatchify(&patchify(&g).unwrap(), fill).unwrap();
        prop_assert_eq!(covered_region(&back).unwrap(), covered_region(&g).unwrap());
        // 512 - 495 = 17: an 8-pixel ring on top/left, 9 on bottom/right.
        for (r, c) in [(0, 0), (7, 300), (300, 7), (503, 200), (200, 503), (511, 511)] {
            prop_assert_eq!(back.at(r, c), fill);
        }
        prop_assert_eq!(back.at(8, 8), g.at(8, 8));
        prop_assert_eq!(back.at(502, 502), g.at(502, 502));
    }

    #[test]
    fn windowing_is_the_clipped_linear_map(hu in -2048i16..=4096) {
        let s = HuSlice::new("w", "p", DoseTag::Full, vec![hu; 512 * 512]).unwrap();
        let v = normalize_hu(&s).at(100, 100);
        let want = ((f32::from(hu) + 1000.0) / 4000.0).clamp(0.0, 1.0);
        prop_assert_eq!(v, want);
    }
}

#[test]
fn patch_index_maps_to_grid_position() {
    let s = slice_from(7);
    let g = normalize_hu(&s);
    let tiles = patchify(&g).unwrap();
    assert_eq!(tiles.len(), 81);
    assert_eq!(COVERED, 495);
    for (i, t) in tiles.iter().enumerate() {
        let (tr, tc) = (i / 9, i % 9);
        for (r, c) in [(0, 0), (54, 54), (13, 40)] {
            assert_eq!(t.at(r, c), g.at(8 + tr * PATCH_SIZE + r, 8 + tc * PATCH_SIZE + c));
        }
    }
}

fn literal_transform(tag: AugTag, g: &Grid, r: usize, c: usize) -> f32 {
    let n = g.width;
    match tag {
        AugTag::Identity => g.at(r, c),
        // Counter-clockwise quarter turn: output (r, c) reads input (c, n-1-r).
        AugTag::Rot90 => g.at(c, n - 1 - r),
        AugTag::RotNeg90 => g.at(n - 1 - c, r),
        AugTag::FlipH => g.at(r, n - 1 - c),
        AugTag::FlipV => g.at(n - 1 - r, c),
        AugTag::Rotate { .. } => unreachable!(),
    }
}

#[test]
fn augmentations_follow_index_formulas_and_stay_paired() {
    let s = slice_from(3);
    let mut f = slice_from(4);
    f.dose = DoseTag::Full;
    let pair = patch_pairs(&s, &f).unwrap().swap_remove(40);
    let out = augment(&pair, AugPolicy::Baseline, 0);
    assert_eq!(out.len(), 5);
    for p in &out {
        assert_eq!(p.origin, pair.origin);
        for (r, c) in [(0, 0), (0, 54), (54, 0), (10, 33), (27, 27)] {
            assert_eq!(p.low.at(r, c), literal_transform(p.augmentation, &pair.low, r, c));
            assert_eq!(p.full.at(r, c), literal_transform(p.augmentation, &pair.full, r, c));
        }
    }
}

#[test]
fn expert_policy_adds_one_seeded_rotation() {
    for seed in 0..50 {
        let tags = augment_tags(AugPolicy::Expert, seed);
        assert_eq!(tags.len(), 6);
        assert_eq!(tags[..5], augment_tags(AugPolicy::Baseline, seed)[..]);
        match tags[5] {
            AugTag::Rotate { degrees } => assert!((30.0..=60.0).contains(&degrees)),
            other => panic!("{other:?}"),
        }
        assert_eq!(tags, augment_tags(AugPolicy::Expert, seed));
    }
    assert_ne!(augment_tags(AugPolicy::Expert, 1), augment_tags(AugPolicy::Expert, 2));
}

#[test]
fn generated_dataset_reloads_into_aligned_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        slices_per_regime: 3,
        slices_per_patient: 2,
        ..Default::default()
    };
    generate_dataset(&cfg, 12, dir.path()).unwrap();
    let m = Manifest::load(dir.path().join("manifest.json")).unwrap();
    let pairs = m.pairs().unwrap();
    assert_eq!(pairs.len(), 9);
    let patients: std::collections::BTreeSet<_> = m.entries.iter().map(|e| e.patient_id.clone()).collect();
    assert_eq!(patients.len(), 6);
    for p in &pairs {
        let q = m.read_slice(&p.quarter).unwrap();
        let f = m.read_slice(&p.full).unwrap();
        assert_eq!((q.dose, f.dose), (DoseTag::Quarter, DoseTag::Full));
        let tiles = patch_pairs(&q, &f).unwrap();
        assert_eq!(tiles.len(), 81);
        assert_eq!(tiles[80].origin.row_tile, 8);
        assert_eq!(tiles[80].origin.col_tile, 8);
    }
}

#[test]
fn hu16_files_are_little_endian_raw() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.hu16");
    let s = slice_from(11);
    write_hu16(&s, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 512 * 512 * 2);
    assert_eq!(i16::from_le_bytes([bytes[2], bytes[3]]), s.pixels()[1]);
    let back = read_hu16(&path, "s", "p", DoseTag::Quarter).unwrap();
    assert_eq!(back, s);
    std::fs::write(&path, &bytes[..100]).unwrap();
    assert!(read_hu16(&path, "s", "p", DoseTag::Quarter).is_err());
}
