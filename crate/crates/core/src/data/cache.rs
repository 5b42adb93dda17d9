//! `FAEMB1` embedding cache.
//!
//! Layout (little-endian): `b"FAEMB1\0"` plus one zero pad byte, then `u32`
//! count, `u32` dim, `u32` num_locals, then `count` rows of
//! `(1 + num_locals) * dim` f32 values, global feature first. A sibling
//! `<file>.json` lists split, label (`-1` for OOD) and source path per row.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::manifest::DatasetManifest;
use crate::encoder::{CacheBackend, ImageEncoder, ImageFeatures};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"FAEMB1\0\0";
pub const CACHE_HEADER_LEN: usize = 8 + 12;
const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    num_locals: usize,
    data: Vec<f32>,
}

impl EmbeddingCache {
    pub fn new(dim: usize, num_locals: usize) -> Self {
        Self {
            dim,
            num_locals,
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_locals(&self) -> usize {
        self.num_locals
    }

    pub fn row_width(&self) -> usize {
        self.dim * (1 + self.num_locals)
    }

    pub fn len(&self) -> usize {
        if self.row_width() == 0 {
            0
        } else {
            self.data.len() / self.row_width()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.row_width() {
            return Err(Error::Dimension {
                what: "cache row",
                expected: self.row_width(),
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn push_features(&mut self, features: &ImageFeatures) -> Result<()> {
        self.push_row(&features.to_row())
    }

    pub fn row(&self, index: usize) -> Result<&[f32]> {
        if index >= self.len() {
            return Err(Error::Data(format!(
                "cache row {index} out of range ({} rows)",
                self.len()
            )));
        }
        let w = self.row_width();
        Ok(&self.data[index * w..(index + 1) * w])
    }

    /// Decodes one row through the pass-through cache backend.
    pub fn features(&self, index: usize) -> Result<ImageFeatures> {
        CacheBackend::new(self.dim, self.num_locals).encode_image(self.row(index)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CACHE_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_locals as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CACHE_HEADER_LEN {
            return Err(Error::Format(
                "embedding cache shorter than its header".into(),
            ));
        }
        if &bytes[..7] != b"FAEMB1\0" {
            return Err(Error::Format(
                "not an FAEMB1 embedding cache (bad magic)".into(),
            ));
        }
        let word =
            |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
        let (count, dim, num_locals) = (word(8), word(12), word(16));
        if dim == 0 {
            return Err(Error::Format("embedding cache declares dim = 0".into()));
        }
        let expected = count
            .checked_mul(dim * (1 + num_locals))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("embedding cache header overflows".into()))?;
        let payload = &bytes[CACHE_HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "embedding cache payload is {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            dim,
            num_locals,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Per-row metadata stored next to a cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRowMeta {
    pub split: String,
    pub label: i64,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheSidecar {
    pub schema_version: u32,
    pub rows: Vec<CacheRowMeta>,
}

pub fn sidecar_path(cache_path: &Path) -> PathBuf {
    let mut name = cache_path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Encodes every manifest entry and writes the cache plus its sidecar.
///
/// `load_input` turns an entry's source path into the encoder's raw input.
/// Entries are written in manifest order, so re-running with the same
/// encoder reproduces the files byte for byte.
pub fn cache_embeddings<E, F>(
    manifest: &DatasetManifest,
    encoder: &E,
    mut load_input: F,
    out_path: &Path,
) -> Result<(EmbeddingCache, CacheSidecar)>
where
    E: ImageEncoder + ?Sized,
    F: FnMut(&str) -> Result<Vec<f32>>,
{
    let mut cache: Option<EmbeddingCache> = None;
    let mut rows = Vec::with_capacity(manifest.entries.len());
    for (i, entry) in manifest.entries.iter().enumerate() {
        let path = entry.path.as_deref().ok_or_else(|| {
            Error::Data(format!(
                "{}: entry {i} has no source path to encode",
                manifest.name
            ))
        })?;
        let features = encoder.encode_image(&load_input(path)?)?;
        let c =
            cache.get_or_insert_with(|| EmbeddingCache::new(features.dim(), encoder.num_locals()));
        c.push_features(&features)?;
        rows.push(CacheRowMeta {
            split: entry.split.clone(),
            label: entry.label,
            path: path.to_string(),
        });
    }
    let cache =
        cache.ok_or_else(|| Error::Data(format!("{}: manifest has no entries", manifest.name)))?;
    let sidecar = CacheSidecar {
        schema_version: SIDECAR_VERSION,
        rows,
    };
    cache.write(out_path)?;
    let side = sidecar_path(out_path);
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    Ok((cache, sidecar))
}

/// Reads raw encoder input stored as little-endian f32 values.
pub fn read_raw_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: raw input length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_row(dim: usize, n: usize, hot: usize) -> Vec<f32> {
        let mut row = vec![0.0; dim * (1 + n)];
        for block in 0..=n {
            row[block * dim + (hot + block) % dim] = 1.0;
        }
        row
    }

    #[test]
    fn file_size_follows_layout() {
        let mut cache = EmbeddingCache::new(8, 2);
        for i in 0..3 {
            cache.push_row(&unit_row(8, 2, i)).unwrap();
        }
        let bytes = cache.to_bytes();
        assert_eq!(bytes.len(), 8 + 12 + 3 * 3 * 8 * 4);
        assert_eq!(&bytes[..8], b"FAEMB1\0\0");
        assert_eq!(EmbeddingCache::from_bytes(&bytes).unwrap(), cache);
    }

    #[test]
    fn rejects_corrupt_files() {
        let mut cache = EmbeddingCache::new(2, 0);
        cache.push_row(&[1.0, 0.0]).unwrap();
        let bytes = cache.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'G';
        assert!(matches!(
            EmbeddingCache::from_bytes(&bad),
            Err(Error::Format(_))
        ));
        assert!(EmbeddingCache::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(EmbeddingCache::from_bytes(&bytes[..10]).is_err());
        assert!(cache.push_row(&[1.0]).is_err());
        assert!(cache.row(1).is_err());
    }

    #[test]
    fn rows_decode_to_features() {
        let mut cache = EmbeddingCache::new(4, 1);
        cache.push_row(&unit_row(4, 1, 2)).unwrap();
        let f = cache.features(0).unwrap();
        assert_eq!(f.global[2], 1.0);
        assert_eq!(f.locals[[0, 3]], 1.0);
    }
}
