//! Flat tensor archive used for checkpoints, feature caches and
//! spectrogram dumps.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size   field
//! 0       8      magic  b"AVSRARCH"
//! 8       4      u32    format version (currently 1)
//! 12      4      u32    metadata length M
//! 16      M      UTF-8  metadata, one `key=value` per line
//! ..      4      u32    entry count N
//! then N entries:
//!         2      u16    name length n
//!         n      UTF-8  name (e.g. `msr/audio_enc1/w_xr`)
//!         1      u8     kind: 0 = trainable weight, 1 = buffer
//!         1      u8     rank R
//!         8·R    u64    extents, outermost first
//!         8·E    f64    payload, row-major, E = product of extents
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"AVSRARCH";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push(Entry {
            name: name.into(),
            kind: ParamKind::Weight,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn from_store(store: &ParamStore) -> Self {
        let entries = store
            .iter()
            .map(|(_, p)| Entry {
                name: p.name.clone(),
                kind: p.kind,
                tensor: p.value.clone(),
            })
            .collect();
        Self {
            metadata: BTreeMap::new(),
            entries,
        }
    }

    /// Only the store entries whose names start with `prefix`.
    pub fn from_store_prefix(store: &ParamStore, prefix: &str) -> Self {
        let mut a = Self::from_store(store);
        a.entries.retain(|e| e.name.starts_with(prefix));
        a
    }

    /// Metadata value, or a version error naming the missing key.
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Version(format!("checkpoint metadata has no '{key}'")))
    }

    /// [`Archive::load_into`] restricted to store entries under `prefix`;
    /// returns how many were loaded.
    pub fn load_prefix_into(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let ids: Vec<_> = store
            .ids()
            .filter(|&id| store.get(id).name.starts_with(prefix))
            .collect();
        for &id in &ids {
            let name = store.get(id).name.clone();
            let Some(t) = self.get(&name) else {
                return Err(Error::Version(format!(
                    "checkpoint has no entry for '{name}'"
                )));
            };
            if t.shape() != store.value(id).shape() {
                return Err(Error::Version(format!(
                    "'{name}' is {:?} in checkpoint but {:?} in model",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(ids.len())
    }

    /// Copies every archived tensor into the matching store entry. Names
    /// missing from the archive are an error; extra archive entries are not.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let Some(t) = self.get(&name) else {
                return Err(Error::Version(format!(
                    "checkpoint has no entry for '{name}'"
                )));
            };
            if t.shape() != store.value(id).shape() {
                return Err(Error::Version(format!(
                    "'{name}' is {:?} in checkpoint but {:?} in model",
                    t.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!(
                    "metadata entry '{k}' is not representable"
                )));
            }
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::Format(format!("name too long: {}", e.name)));
            }
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[match e.kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            }])?;
            w.write_all(&[e.tensor.ndim() as u8])?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in e.tensor.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a tensor archive (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Version(format!(
                "archive version {version}, this build reads {VERSION}"
            )));
        }
        let meta_len = read_u32(r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta =
            String::from_utf8(meta).map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata line '{line}'")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let n = read_u32(r)? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let mut b1 = [0u8; 2];
            r.read_exact(&mut b1)?;
            let kind = match b1[0] {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                k => {
                    return Err(Error::Format(format!(
                        "unknown entry kind {k} for '{name}'"
                    )))
                }
            };
            let rank = b1[1] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b8 = [0u8; 8];
                r.read_exact(&mut b8)?;
                shape.push(u64::from_le_bytes(b8) as usize);
            }
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 8];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| Error::Format(format!("entry '{name}': {e}")))?;
            entries.push(Entry { name, kind, tensor });
        }
        Ok(Self { metadata, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Writes a single tensor (e.g. a spectrogram) as a one-entry archive.
pub fn save_tensor(path: impl AsRef<Path>, name: &str, t: &Tensor) -> Result<()> {
    let mut a = Archive::new();
    a.push(name, t.clone());
    a.save(path)
}

pub fn load_tensor(path: impl AsRef<Path>, name: &str) -> Result<Tensor> {
    let a = Archive::load(path)?;
    a.get(name)
        .cloned()
        .ok_or_else(|| Error::Format(format!("archive has no tensor '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_of_a_tiny_archive() {
        let mut a = Archive::new().with_meta("phase", "ae");
        a.push("w", Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap());
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &9u32.to_le_bytes());
        assert_eq!(&buf[16..25], b"phase=ae\n");
        assert_eq!(&buf[25..29], &1u32.to_le_bytes());
        assert_eq!(&buf[29..31], &1u16.to_le_bytes());
        assert_eq!(buf[31], b'w');
        assert_eq!(&buf[32..34], &[0, 2]);
        assert_eq!(&buf[34..42], &1u64.to_le_bytes());
        assert_eq!(&buf[42..50], &2u64.to_le_bytes());
        assert_eq!(&buf[50..58], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 66);
        assert_eq!(Archive::read_from(&mut buf.as_slice()).unwrap(), a);
    }

    #[test]
    fn wrong_version_is_a_version_error() {
        let mut buf = Vec::new();
        Archive::new().write_to(&mut buf).unwrap();
        buf[8] = 9;
        assert!(matches!(
            Archive::read_from(&mut buf.as_slice()),
            Err(Error::Version(_))
        ));
        buf[0] = b'X';
        assert!(matches!(
            Archive::read_from(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
