//! Dataset manifests, the embedding cache and the benchmark registry.

pub mod cache;
pub mod manifest;
pub mod registry;
pub mod synthetic;

use std::path::Path;

use crate::encoder::ImageFeatures;
use crate::error::{Error, Result};

pub use cache::{cache_embeddings, EmbeddingCache};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry};
pub use registry::{resolve_benchmark, Benchmark, BenchmarkSpec, Registry};
pub use synthetic::SyntheticConfig;

/// A manifest together with the embedding cache its entries point into.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub cache: EmbeddingCache,
}

impl Dataset {
    /// Checks that every entry references an existing cache row.
    pub fn new(manifest: DatasetManifest, cache: EmbeddingCache) -> Result<Self> {
        manifest.validate()?;
        for (i, entry) in manifest.entries.iter().enumerate() {
            match entry.row {
                Some(row) if row < cache.len() => {}
                Some(row) => {
                    return Err(Error::Data(format!(
                        "{}: entry {i} references cache row {row} but the cache has {} rows",
                        manifest.name,
                        cache.len()
                    )))
                }
                None => {
                    return Err(Error::Data(format!(
                        "{}: entry {i} has no cache row; build a cache for this manifest first",
                        manifest.name
                    )))
                }
            }
        }
        Ok(Self { manifest, cache })
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let cache_path = manifest.cache_path(manifest_path).ok_or_else(|| {
            Error::Data(format!(
                "{}: manifest does not name an embedding cache",
                manifest_path.display()
            ))
        })?;
        let cache = EmbeddingCache::read(&cache_path)?;
        Self::new(manifest, cache)
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    /// Features of manifest entry `entry`.
    pub fn features(&self, entry: usize) -> Result<ImageFeatures> {
        let e = self
            .manifest
            .entries
            .get(entry)
            .ok_or_else(|| Error::Data(format!("{}: no entry {entry}", self.manifest.name)))?;
        self.cache
            .features(e.row.expect("validated in Dataset::new"))
    }
}
