//! Named-tensor checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "KADP"
//! version u32      (currently 1)
//! meta    u32 length + UTF-8 JSON bytes, preserved verbatim
//! entries u32 count, then per entry:
//!         u32 name length + name bytes
//!         u32 ndim + ndim x u64 dims
//!         u64 byte offset into the payload
//! payload u64 byte length + f32 little-endian values
//! ```
//!
//! Values are stored as 32-bit floats; loading widens back to f64, so a
//! round trip loses at most one 32-bit rounding per value and
//! save -> load -> save is byte-identical. Entries are written in sorted
//! name order with consecutive offsets, making the serialization canonical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterConfig, AdapterSlot};
use crate::backbone::BackboneConfig;
use crate::error::{Error, FormatError, Result};
use crate::ndgrad::Tensor;
use crate::params::ParamStore;

pub const MAGIC: [u8; 4] = *b"KADP";
pub const VERSION: u32 = 1;

/// Typed view of the metadata header.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// "backbone" | "adapter" | "model" | "mlm_head"
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Free-form knowledge tag for adapters: "factual" | "linguistic" | other.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knowledge_kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<BackboneConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterConfig>,
    /// For fused model checkpoints: every adapter slot in fusion order.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapters: Option<Vec<AdapterSlot>>,
    pub step: u64,
    pub seed: u64,
}

impl CheckpointMeta {
    pub fn new(kind: &str, step: u64, seed: u64) -> Self {
        CheckpointMeta {
            kind: kind.to_string(),
            name: None,
            knowledge_kind: None,
            backbone: None,
            adapter: None,
            adapters: None,
            step,
            seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("meta serializes")
    }
}

/// An in-memory checkpoint: parameters plus the verbatim metadata text.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub meta_json: String,
}

impl Checkpoint {
    pub fn new(store: ParamStore, meta: &CheckpointMeta) -> Self {
        Checkpoint {
            store,
            meta_json: meta.to_json(),
        }
    }

    pub fn meta(&self) -> Result<CheckpointMeta> {
        Ok(serde_json::from_str(&self.meta_json)?)
    }
}

pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = ckpt.meta_json.as_bytes();
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta);

    let entries: Vec<(&String, &Tensor)> = ckpt.store.iter().collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, tensor) in &entries {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        let dims = tensor.shape();
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += (tensor.numel() * 4) as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, tensor) in &entries {
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(FormatError::Truncated {
                expected: self.pos + n,
                got: self.bytes.len(),
            }));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::Format(FormatError::BadMagic(magic)));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(FormatError::UnsupportedVersion(version)));
    }
    let meta_len = r.u32()? as usize;
    let meta_json = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|e| Error::Validation { line: None, message: format!("metadata is not UTF-8: {e}") })?;

    let n_entries = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| Error::Validation { line: None, message: format!("entry name is not UTF-8: {e}") })?;
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let offset = r.u64()?;
        entries.push((name, dims, offset));
    }
    let payload_len = r.u64()? as usize;
    let payload = r.take(payload_len)?;

    // offsets must be non-overlapping and in-bounds
    let mut spans: Vec<(u64, u64, &str)> = entries
        .iter()
        .map(|(name, dims, offset)| {
            let bytes = dims.iter().product::<usize>() as u64 * 4;
            (*offset, offset + bytes, name.as_str())
        })
        .collect();
    spans.sort();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(Error::Format(FormatError::OverlappingEntries {
                name: w[1].2.to_string(),
            }));
        }
    }
    if let Some(&(_, end, name)) = spans.iter().max_by_key(|s| s.1) {
        if end > payload_len as u64 {
            return Err(Error::Format(FormatError::EntryOutOfBounds {
                name: name.to_string(),
            }));
        }
    }

    let mut store = ParamStore::new();
    for (name, dims, offset) in entries {
        let numel: usize = dims.iter().product();
        let start = offset as usize;
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let b: [u8; 4] = payload[start + i * 4..start + i * 4 + 4].try_into().unwrap();
            data.push(f32::from_le_bytes(b) as f64);
        }
        store.insert(&name, Tensor::new(dims, data)?.trainable());
    }
    Ok(Checkpoint { store, meta_json })
}

/// Write atomically: to a temporary sibling, then rename into place.
pub fn save_file(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_file(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

/// Rounding bound for one f64 -> f32 -> f64 trip: half an ulp at the value's
/// exponent, with the subnormal floor.
pub fn f32_rounding_bound(x: f64) -> f64 {
    let ax = x.abs();
    let ulp_rel = ax * f32::EPSILON as f64 / 2.0;
    let subnormal = f32::MIN_POSITIVE as f64 * f32::EPSILON as f64;
    ulp_rel.max(subnormal)
}

/// Byte-level hash for checkpoint comparisons (FNV-1a).
pub fn digest(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Convenience: canonical bytes of a bare store (for equality checks).
pub fn store_digest(store: &ParamStore) -> u64 {
    let ckpt = Checkpoint {
        store: store.clone(),
        meta_json: String::new(),
    };
    digest(&to_bytes(&ckpt))
}

/// A store keyed map of raw f64 bytes, for exact mutation tracking.
pub fn store_value_bytes(store: &ParamStore) -> BTreeMap<String, Vec<u8>> {
    store
        .iter()
        .map(|(name, t)| {
            let mut bytes = Vec::with_capacity(t.numel() * 8);
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            (name.clone(), bytes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        store.insert_normal("backbone.w", &[4, 3], 1.0, &mut rng);
        store.insert_normal("adapter.fac.layer0.up.w", &[2, 5], 0.3, &mut rng);
        store.insert_filled("head.pretrain.out.b", &[7], 0.25);
        store
    }

    fn meta() -> CheckpointMeta {
        let mut m = CheckpointMeta::new("adapter", 12, 42);
        m.name = Some("fac".into());
        m.knowledge_kind = Some("factual".into());
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ckpt = Checkpoint::new(random_store(1), &meta());
        let bytes1 = to_bytes(&ckpt);
        let loaded = from_bytes(&bytes1).unwrap();
        let bytes2 = to_bytes(&loaded);
        assert_eq!(bytes1, bytes2);
        assert_eq!(loaded.meta_json, ckpt.meta_json);
    }

    #[test]
    fn roundtrip_error_is_within_f32_rounding() {
        let store = random_store(7);
        let ckpt = Checkpoint::new(store.clone(), &meta());
        let loaded = from_bytes(&to_bytes(&ckpt)).unwrap();
        for (name, original) in store.iter() {
            let reloaded = loaded.store.get(name).unwrap();
            assert_eq!(original.shape(), reloaded.shape());
            for (&a, &b) in original.data().iter().zip(reloaded.data()) {
                assert!(
                    (a - b).abs() <= f32_rounding_bound(a),
                    "{name}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn bad_magic_is_distinct_error() {
        let ckpt = Checkpoint::new(random_store(2), &meta());
        let mut bytes = to_bytes(&ckpt);
        bytes[0] = b'X';
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Format(FormatError::BadMagic(_)))
        ));
    }

    #[test]
    fn bad_version_is_distinct_error() {
        let ckpt = Checkpoint::new(random_store(2), &meta());
        let mut bytes = to_bytes(&ckpt);
        bytes[4] = 9;
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Format(FormatError::UnsupportedVersion(9)))
        ));
    }

    #[test]
    fn truncated_payload_is_detected_and_nothing_is_returned() {
        let ckpt = Checkpoint::new(random_store(3), &meta());
        let bytes = to_bytes(&ckpt);
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            from_bytes(cut),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn overlapping_entries_are_rejected() {
        let ckpt = Checkpoint::new(random_store(4), &meta());
        let mut bytes = to_bytes(&ckpt);
        // rewrite the second entry's offset to collide with the first.
        // layout: 4 magic + 4 version + 4 meta_len + meta + 4 n_entries
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut pos = 12 + meta_len + 4;
        // first entry
        let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4 + name_len;
        let ndim = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4 + ndim * 8 + 8;
        // second entry
        let name_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4 + name_len;
        let ndim = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4 + ndim * 8;
        bytes[pos..pos + 8].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(Error::Format(FormatError::OverlappingEntries { .. }))
        ));
    }

    #[test]
    fn file_roundtrip_is_atomic_and_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint::new(random_store(5), &meta());
        save_file(&ckpt, &path).unwrap();
        assert!(!path.with_extension("tmp").exists());
        let loaded = load_file(&path).unwrap();
        save_file(&loaded, &path).unwrap();
        let again = load_file(&path).unwrap();
        assert_eq!(to_bytes(&loaded), to_bytes(&again));
    }

    #[test]
    fn meta_roundtrips_typed() {
        let ckpt = Checkpoint::new(random_store(6), &meta());
        let m = ckpt.meta().unwrap();
        assert_eq!(m.kind, "adapter");
        assert_eq!(m.knowledge_kind.as_deref(), Some("factual"));
        assert_eq!(m.step, 12);
        assert_eq!(m.seed, 42);
    }
}
