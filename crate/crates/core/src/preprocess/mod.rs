//! HU windowing, 55x55 patch tiling and training-time augmentation.

mod augment;
pub mod io;
pub mod phantom;

pub use augment::{augment, augment_tags, rotate_bilinear, AugPolicy, AugTag};

use crate::tensor::Tensor4;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SLICE_SIZE: usize = 512;
pub const PATCH_SIZE: usize = 55;
pub const GRID_TILES: usize = 9;
/// Edge of the square region covered by the 9 x 9 tile grid.
pub const COVERED: usize = PATCH_SIZE * GRID_TILES;
pub const PATCHES_PER_SLICE: usize = GRID_TILES * GRID_TILES;

pub const HU_WINDOW_MIN: f32 = -1000.0;
pub const HU_WINDOW_MAX: f32 = 3000.0;
pub const HU_RAW_MIN: i16 = -2048;
pub const HU_RAW_MAX: i16 = 4096;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("slice {id}: {width}x{height} is not {SLICE_SIZE}x{SLICE_SIZE}")]
    NotReferenceSize { id: String, width: usize, height: usize },
    #[error("image {width}x{height} smaller than the {COVERED}x{COVERED} tile grid")]
    TooSmall { width: usize, height: usize },
    #[error("expected {expected} patches, got {got}")]
    PatchCount { expected: usize, got: usize },
    #[error("pixel buffer has {got} values for {width}x{height}")]
    PixelCount { width: usize, height: usize, got: usize },
    #[error("slice {id}: HU value {value} outside raw range [{HU_RAW_MIN}, {HU_RAW_MAX}]")]
    HuRange { id: String, value: i16 },
    #[error("patch shape mismatch: {0}")]
    PatchShape(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoseTag {
    Quarter,
    Full,
}

/// One CT slice in Hounsfield units, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HuSlice {
    pub slice_id: String,
    pub patient_id: String,
    pub dose: DoseTag,
    width: usize,
    height: usize,
    pixels: Vec<i16>,
}

impl HuSlice {
    /// A 512 x 512 slice.
    pub fn new(
        slice_id: impl Into<String>,
        patient_id: impl Into<String>,
        dose: DoseTag,
        pixels: Vec<i16>,
    ) -> Result<Self> {
        Self::with_size(slice_id, patient_id, dose, SLICE_SIZE, SLICE_SIZE, pixels, false)
    }

    /// Any size when `allow_any_size`, otherwise exactly 512 x 512.
    pub fn with_size(
        slice_id: impl Into<String>,
        patient_id: impl Into<String>,
        dose: DoseTag,
        width: usize,
        height: usize,
        pixels: Vec<i16>,
        allow_any_size: bool,
    ) -> Result<Self> {
        let slice_id = slice_id.into();
        if !allow_any_size && (width != SLICE_SIZE || height != SLICE_SIZE) {
            return Err(PreprocessError::NotReferenceSize {
                id: slice_id,
                width,
                height,
            });
        }
        if pixels.len() != width * height {
            return Err(PreprocessError::PixelCount {
                width,
                height,
                got: pixels.len(),
            });
        }
        if let Some(&value) = pixels.iter().find(|&&v| !(HU_RAW_MIN..=HU_RAW_MAX).contains(&v)) {
            return Err(PreprocessError::HuRange { id: slice_id, value });
        }
        Ok(Self {
            slice_id,
            patient_id: patient_id.into(),
            dose,
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[i16] {
        &self.pixels
    }

    pub fn at(&self, row: usize, col: usize) -> i16 {
        self.pixels[row * self.width + col]
    }
}

/// Row-major 2-D grid of normalized intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "grid buffer length");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        Self::new(width, height, vec![v; width * height])
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    /// Copies the `h x w` window starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Grid {
        let mut out = Vec::with_capacity(h * w);
        for r in row..row + h {
            out.extend_from_slice(&self.data[r * self.width + col..][..w]);
        }
        Grid::new(w, h, out)
    }
}

/// Linear map of the [-1000, 3000] HU window onto [0, 1], clipping outside.
pub fn normalize_hu_value(hu: f32) -> f32 {
    ((hu - HU_WINDOW_MIN) / (HU_WINDOW_MAX - HU_WINDOW_MIN)).clamp(0.0, 1.0)
}

pub fn normalize_hu(slice: &HuSlice) -> Grid {
    Grid::new(
        slice.width,
        slice.height,
        slice.pixels.iter().map(|&v| normalize_hu_value(f32::from(v))).collect(),
    )
}

/// Top-left corner of the tile grid: the leftover splits floor/ceil between borders.
pub fn grid_offset(width: usize, height: usize) -> Result<(usize, usize)> {
    if width < COVERED || height < COVERED {
        return Err(PreprocessError::TooSmall { width, height });
    }
    Ok(((height - COVERED) / 2, (width - COVERED) / 2))
}

/// Cuts the 9 x 9 grid of non-overlapping 55 x 55 tiles, row-major.
pub fn patchify(img: &Grid) -> Result<Vec<Grid>> {
    let (r0, c0) = grid_offset(img.width, img.height)?;
    let mut out = Vec::with_capacity(PATCHES_PER_SLICE);
    for tr in 0..GRID_TILES {
        for tc in 0..GRID_TILES {
            out.push(img.crop(r0 + tr * PATCH_SIZE, c0 + tc * PATCH_SIZE, PATCH_SIZE, PATCH_SIZE));
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`] for a 512 x 512 slice; the uncovered ring gets `fill`.
pub fn unpatchify(patches: &[Grid], fill: f32) -> Result<Grid> {
    unpatchify_to(patches, SLICE_SIZE, SLICE_SIZE, fill)
}

pub fn unpatchify_to(patches: &[Grid], width: usize, height: usize, fill: f32) -> Result<Grid> {
    if patches.len() != PATCHES_PER_SLICE {
        return Err(PreprocessError::PatchCount {
            expected: PATCHES_PER_SLICE,
            got: patches.len(),
        });
    }
    let (r0, c0) = grid_offset(width, height)?;
    let mut out = Grid::filled(width, height, fill);
    for (i, p) in patches.iter().enumerate() {
        if p.width != PATCH_SIZE || p.height != PATCH_SIZE {
            return Err(PreprocessError::PatchShape(format!(
                "patch {i} is {}x{}",
                p.width, p.height
            )));
        }
        let (tr, tc) = (i / GRID_TILES, i % GRID_TILES);
        for r in 0..PATCH_SIZE {
            let dst = (r0 + tr * PATCH_SIZE + r) * width + c0 + tc * PATCH_SIZE;
            out.data[dst..dst + PATCH_SIZE].copy_from_slice(&p.data[r * PATCH_SIZE..][..PATCH_SIZE]);
        }
    }
    Ok(out)
}

/// The covered square of a full-size grid (what metrics are computed on).
pub fn covered_region(img: &Grid) -> Result<Grid> {
    let (r0, c0) = grid_offset(img.width, img.height)?;
    Ok(img.crop(r0, c0, COVERED, COVERED))
}

/// Stacks equally sized grids into an `(n, 1, h, w)` tensor.
pub fn grids_to_tensor(grids: &[Grid]) -> Result<Tensor4<f32>> {
    let Some(first) = grids.first() else {
        return Ok(Tensor4::zeros([0, 1, PATCH_SIZE, PATCH_SIZE]));
    };
    let mut data = Vec::with_capacity(grids.len() * first.data.len());
    for g in grids {
        if (g.width, g.height) != (first.width, first.height) {
            return Err(PreprocessError::PatchShape(format!(
                "{}x{} vs {}x{}",
                g.width, g.height, first.width, first.height
            )));
        }
        data.extend_from_slice(&g.data);
    }
    Tensor4::from_vec([grids.len(), 1, first.height, first.width], data)
        .map_err(|e| PreprocessError::PatchShape(e.to_string()))
}

pub fn tensor_to_grids(t: &Tensor4<f32>) -> Vec<Grid> {
    let [n, _, h, w] = t.shape();
    (0..n).map(|i| Grid::new(w, h, t.item(i).to_vec())).collect()
}

/// Where a patch came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatchOrigin {
    pub slice_id: String,
    pub row_tile: usize,
    pub col_tile: usize,
}

/// Aligned low-dose / full-dose patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub low: Grid,
    pub full: Grid,
    pub origin: PatchOrigin,
    pub augmentation: AugTag,
}

/// Normalizes and tiles a quarter/full slice pair into 81 patch pairs.
pub fn patch_pairs(low: &HuSlice, full: &HuSlice) -> Result<Vec<PatchPair>> {
    if (low.width, low.height) != (full.width, full.height) {
        return Err(PreprocessError::PatchShape(format!(
            "pair {} / {} differ in size",
            low.slice_id, full.slice_id
        )));
    }
    let lp = patchify(&normalize_hu(low))?;
    let fp = patchify(&normalize_hu(full))?;
    Ok(lp
        .into_iter()
        .zip(fp)
        .enumerate()
        .map(|(i, (l, f))| PatchPair {
            low: l,
            full: f,
            origin: PatchOrigin {
                slice_id: low.slice_id.clone(),
                row_tile: i / GRID_TILES,
                col_tile: i % GRID_TILES,
            },
            augmentation: AugTag::Identity,
        })
        .collect())
}
