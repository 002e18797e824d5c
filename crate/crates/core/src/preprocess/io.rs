//! Raw `.hu16` slice files and the JSON dataset manifest.
//!
//! A slice file is `width * height` little-endian `i16` HU values, row-major,
//! with no header. The manifest is a JSON array of [`ManifestEntry`]; the
//! quarter- and full-dose slices of one acquisition share a `pair_id`.

use super::{DoseTag, HuSlice, PreprocessError, Result, SLICE_SIZE};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn io_err(path: &Path, source: std::io::Error) -> PreprocessError {
    PreprocessError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_hu16(slice: &HuSlice, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = slice.pixels().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads a 512 x 512 slice file.
pub fn read_hu16(path: impl AsRef<Path>, slice_id: &str, patient_id: &str, dose: DoseTag) -> Result<HuSlice> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let expected = SLICE_SIZE * SLICE_SIZE * 2;
    if bytes.len() != expected {
        return Err(PreprocessError::Manifest(format!(
            "{}: {} bytes, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let px = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    HuSlice::new(slice_id, patient_id, dose, px)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slice_id: String,
    pub patient_id: String,
    pub dose_tag: DoseTag,
    /// Relative paths resolve against the manifest's directory.
    pub path: String,
    pub pair_id: String,
    /// Generating regime for synthetic data; absent for real scans.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
}

/// Quarter/full entries of one acquisition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEntry {
    pub pair_id: String,
    pub quarter: ManifestEntry,
    pub full: ManifestEntry,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| PreprocessError::Manifest(format!("{}: {e}", path.display())))?;
        Ok(Self {
            entries,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    /// Writes the entries; relative paths are rebased onto the new
    /// manifest's directory, or made absolute when outside it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let absolute = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        let target = absolute(path.parent().unwrap_or(Path::new("")));
        let base = absolute(&self.base_dir);
        let entries: Vec<ManifestEntry> = self
            .entries
            .iter()
            .map(|e| {
                let mut e = e.clone();
                if base != target && Path::new(&e.path).is_relative() {
                    let full = base.join(&e.path);
                    let rebased = full.strip_prefix(&target).map(Path::to_path_buf).unwrap_or(full);
                    e.path = rebased.to_string_lossy().into_owned();
                }
                e
            })
            .collect();
        let text = serde_json::to_string_pretty(&entries).map_err(|e| PreprocessError::Manifest(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn read_slice(&self, entry: &ManifestEntry) -> Result<HuSlice> {
        read_hu16(self.resolve(entry), &entry.slice_id, &entry.patient_id, entry.dose_tag)
    }

    /// Groups entries by `pair_id`, ordered by id. Every pair must have
    /// exactly one quarter and one full entry.
    pub fn pairs(&self) -> Result<Vec<PairEntry>> {
        let mut by_id: BTreeMap<&str, (Option<&ManifestEntry>, Option<&ManifestEntry>)> = BTreeMap::new();
        for e in &self.entries {
            let slot = by_id.entry(&e.pair_id).or_default();
            let target = match e.dose_tag {
                DoseTag::Quarter => &mut slot.0,
                DoseTag::Full => &mut slot.1,
            };
            if target.replace(e).is_some() {
                return Err(PreprocessError::Manifest(format!(
                    "pair {} has two {:?} entries",
                    e.pair_id, e.dose_tag
                )));
            }
        }
        by_id
            .into_iter()
            .map(|(id, slot)| match slot {
                (Some(q), Some(f)) => Ok(PairEntry {
                    pair_id: id.to_string(),
                    quarter: q.clone(),
                    full: f.clone(),
                }),
                _ => Err(PreprocessError::Manifest(format!("pair {id} is incomplete"))),
            })
            .collect()
    }

    /// Keeps only the entries of the given pairs.
    pub fn subset(&self, pairs: &[PairEntry]) -> Manifest {
        let entries = pairs.iter().flat_map(|p| [p.quarter.clone(), p.full.clone()]).collect();
        Manifest {
            entries,
            base_dir: self.base_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, pair: &str, dose: DoseTag) -> ManifestEntry {
        ManifestEntry {
            slice_id: id.into(),
            patient_id: "p0".into(),
            dose_tag: dose,
            path: format!("{id}.hu16"),
            pair_id: pair.into(),
            regime: None,
        }
    }

    #[test]
    fn saved_subset_resolves_from_its_new_directory() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        std::fs::create_dir_all(&data).unwrap();
        let m = Manifest {
            entries: vec![entry("a-q", "a", DoseTag::Quarter), entry("a-f", "a", DoseTag::Full)],
            base_dir: data.clone(),
        };
        let out = dir.path().join("test.json");
        m.save(&out).unwrap();
        let back = Manifest::load(&out).unwrap();
        assert_eq!(back.entries[0].path, "data/a-q.hu16");
        assert_eq!(back.resolve(&back.entries[0]), m.resolve(&m.entries[0]));

        let elsewhere = tempfile::tempdir().unwrap();
        let out = elsewhere.path().join("test.json");
        m.save(&out).unwrap();
        let back = Manifest::load(&out).unwrap();
        assert!(Path::new(&back.entries[1].path).is_absolute());
        assert_eq!(back.resolve(&back.entries[1]), m.resolve(&m.entries[1]));
    }

    #[test]
    fn hu16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<i16> = (0..512 * 512).map(|i| ((i % 5000) as i16) - 1500).collect();
        let s = HuSlice::new("a", "p", DoseTag::Full, px).unwrap();
        let path = dir.path().join("a.hu16");
        write_hu16(&s, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 512 * 512 * 2);
        assert_eq!(read_hu16(&path, "a", "p", DoseTag::Full).unwrap(), s);
    }

    #[test]
    fn pairing_by_pair_id() {
        let m = Manifest {
            entries: vec![
                entry("b_q", "b", DoseTag::Quarter),
                entry("a_f", "a", DoseTag::Full),
                entry("a_q", "a", DoseTag::Quarter),
                entry("b_f", "b", DoseTag::Full),
            ],
            base_dir: PathBuf::new(),
        };
        let pairs = m.pairs().unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].pair_id, "a");
        assert_eq!(pairs[0].quarter.slice_id, "a_q");
        assert_eq!(pairs[1].full.slice_id, "b_f");
    }

    #[test]
    fn incomplete_pair_rejected() {
        let m = Manifest {
            entries: vec![entry("a_q", "a", DoseTag::Quarter)],
            base_dir: PathBuf::new(),
        };
        assert!(matches!(m.pairs(), Err(PreprocessError::Manifest(_))));
    }

    #[test]
    fn manifest_json_shape() {
        let e = entry("a_q", "a", DoseTag::Quarter);
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["dose_tag"], "quarter");
        assert!(v.get("regime").is_none());
    }
}
