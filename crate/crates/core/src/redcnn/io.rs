//! Binary model file.
//!
//! All integers little-endian:
//!
//! ```text
//! "AIDE" | version u16
//! num_enc u16 | channels u16 | kernel u16 | stride u16 | padding u16
//! n_shortcuts u16 | (enc u16, dec u16) * n_shortcuts
//! slot kind u8 (0 baseline, 1 cluster) | cluster id u8
//! seed u64 | manifest hash: len u16 + utf8
//! description: len u32 + utf8
//! n_tensors u32 | per tensor: name len u16 + utf8, dims 4 x u32
//! weights: f32 for every tensor, table order, row-major
//! crc32 u32 over every preceding byte
//! ```

use super::{ClusterSlot, ExpertModel, ModelError, RedCnnConfig, Result, TrainFingerprint};
use crate::tensor::{ParamSet, Tensor4};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"AIDE";
pub const FORMAT_VERSION: u16 = 1;

/// Everything before the weight block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHeader {
    pub version: u16,
    pub config: RedCnnConfig,
    pub cluster_id: ClusterSlot,
    pub fingerprint: TrainFingerprint,
    pub description: String,
    pub tensors: Vec<(String, [usize; 4])>,
    data_offset: usize,
}

impl ModelHeader {
    fn weight_count(&self) -> usize {
        self.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn total_len(&self) -> usize {
        self.data_offset + 4 * self.weight_count() + 4
    }
}

fn u16_of(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| ModelError::Format(format!("{what} {v} exceeds u16")))
}

pub fn to_bytes(model: &ExpertModel) -> Result<Vec<u8>> {
    let cfg = &model.config;
    let mut buf = Vec::with_capacity(64 + 4 * model.params.num_weights());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (v, what) in [
        (cfg.num_enc_layers, "num_enc_layers"),
        (cfg.channels, "channels"),
        (cfg.kernel, "kernel"),
        (cfg.stride, "stride"),
        (cfg.padding, "padding"),
        (cfg.shortcut_pairs.len(), "shortcut count"),
    ] {
        buf.extend_from_slice(&u16_of(v, what)?.to_le_bytes());
    }
    for &(e, d) in &cfg.shortcut_pairs {
        buf.extend_from_slice(&u16_of(e, "shortcut")?.to_le_bytes());
        buf.extend_from_slice(&u16_of(d, "shortcut")?.to_le_bytes());
    }
    match model.cluster_id {
        ClusterSlot::Baseline => buf.extend_from_slice(&[0, 0]),
        ClusterSlot::Cluster(c) => buf.extend_from_slice(&[1, c]),
    }
    buf.extend_from_slice(&model.fingerprint.seed.to_le_bytes());
    let hash = model.fingerprint.manifest_hash.as_bytes();
    buf.extend_from_slice(&u16_of(hash.len(), "hash length")?.to_le_bytes());
    buf.extend_from_slice(hash);
    let desc = model.description.as_bytes();
    let desc_len = u32::try_from(desc.len()).map_err(|_| ModelError::Format("description too long".into()))?;
    buf.extend_from_slice(&desc_len.to_le_bytes());
    buf.extend_from_slice(desc);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for e in model.params.entries() {
        let name = e.name.as_bytes();
        buf.extend_from_slice(&u16_of(name.len(), "name length")?.to_le_bytes());
        buf.extend_from_slice(name);
        for d in e.weights.shape() {
            let d = u32::try_from(d).map_err(|_| ModelError::Format("dimension exceeds u32".into()))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
    }
    for e in model.params.entries() {
        for v in e.weights.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(ModelError::Truncated {
                needed: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| ModelError::Format(format!("invalid utf-8: {e}")))
    }
}

/// Parses the header without touching the weights. Works for any config.
pub fn read_header(bytes: &[u8]) -> Result<ModelHeader> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(ModelError::BadMagic(magic));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(version));
    }
    let num_enc_layers = r.u16()? as usize;
    let channels = r.u16()? as usize;
    let kernel = r.u16()? as usize;
    let stride = r.u16()? as usize;
    let padding = r.u16()? as usize;
    let n_pairs = r.u16()? as usize;
    let mut shortcut_pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        shortcut_pairs.push((r.u16()? as usize, r.u16()? as usize));
    }
    let cluster_id = match (r.u8()?, r.u8()?) {
        (0, _) => ClusterSlot::Baseline,
        (1, c) if c < 3 => ClusterSlot::Cluster(c),
        (k, c) => return Err(ModelError::Format(format!("bad slot tag ({k}, {c})"))),
    };
    let seed = r.u64()?;
    let hash_len = r.u16()? as usize;
    let manifest_hash = r.string(hash_len)?;
    let desc_len = r.u32()? as usize;
    let description = r.string(desc_len)?;
    let n_tensors = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n_tensors.min(1024));
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.u32()? as usize;
        }
        tensors.push((name, shape));
    }
    Ok(ModelHeader {
        version,
        config: RedCnnConfig {
            num_enc_layers,
            channels,
            kernel,
            stride,
            padding,
            shortcut_pairs,
        },
        cluster_id,
        fingerprint: TrainFingerprint { seed, manifest_hash },
        description,
        tensors,
        data_offset: r.pos,
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<ExpertModel> {
    let header = read_header(bytes)?;
    let needed = header.total_len();
    if bytes.len() < needed {
        return Err(ModelError::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(ModelError::Format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - needed
        )));
    }
    let body = &bytes[..needed - 4];
    let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(ModelError::Checksum { stored, computed });
    }
    header
        .config
        .validate()
        .map_err(|e| ModelError::ShapeTable(e.to_string()))?;
    let expected = header.config.param_shapes();
    if expected != header.tensors {
        return Err(ModelError::ShapeTable(format!(
            "expected {} tensors {:?}, file has {:?}",
            expected.len(),
            expected.iter().map(|(n, s)| format!("{n}{s:?}")).collect::<Vec<_>>(),
            header
                .tensors
                .iter()
                .map(|(n, s)| format!("{n}{s:?}"))
                .collect::<Vec<_>>()
        )));
    }
    let mut params = ParamSet::new();
    let mut pos = header.data_offset;
    for (name, shape) in &header.tensors {
        let n: usize = shape.iter().product();
        let data = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 4 * n;
        params.insert(name.clone(), Tensor4::from_vec(*shape, data)?)?;
    }
    if header.description.trim().is_empty() {
        return Err(ModelError::Format("empty model description".into()));
    }
    Ok(ExpertModel {
        config: header.config,
        params,
        cluster_id: header.cluster_id,
        description: header.description,
        fingerprint: header.fingerprint,
    })
}

pub fn save(model: &ExpertModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ExpertModel> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::redcnn::build;

    fn small() -> ExpertModel {
        build(RedCnnConfig::with_layers(2, 4), 9)
            .unwrap()
            .with_slot(ClusterSlot::Cluster(2), "lungs and chest")
    }

    #[test]
    fn bytes_round_trip_is_exact() {
        let m = small();
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupted_weight_byte_fails_checksum() {
        let m = small();
        let mut b = to_bytes(&m).unwrap();
        let idx = b.len() - 20;
        b[idx] ^= 0x40;
        assert!(matches!(from_bytes(&b), Err(ModelError::Checksum { .. })));
    }

    #[test]
    fn truncation_and_magic_and_version() {
        let b = to_bytes(&small()).unwrap();
        assert!(matches!(
            from_bytes(&b[..b.len() - 7]),
            Err(ModelError::Truncated { .. })
        ));
        assert!(matches!(from_bytes(&b[..10]), Err(ModelError::Truncated { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(ModelError::BadMagic(_))));
        let mut v = b.clone();
        v[4] = 9;
        assert!(matches!(from_bytes(&v), Err(ModelError::UnsupportedVersion(9))));
    }

    #[test]
    fn shape_table_mismatch_detected() {
        let m = small();
        let mut b = to_bytes(&m).unwrap();
        // channels field lives right after magic+version+num_enc
        b[8] = 5;
        let body = b.len() - 4;
        let crc = crc32fast::hash(&b[..body]);
        b[body..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(from_bytes(&b), Err(ModelError::ShapeTable(_))));
    }
}
