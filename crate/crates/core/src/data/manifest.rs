//! Dataset manifests (JSON, schema version 1).
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "name": "imagenet1k",
//!   "class_names": ["tench", "goldfish"],
//!   "cache": "imagenet1k.faemb",
//!   "entries": [{"row": 0, "path": "val/0001.jpg", "label": 1, "split": "test"}]
//! }
//! ```
//!
//! ID manifests list their classes and label every entry with a class
//! index; OOD manifests have no classes and label every entry `-1`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const SPLIT_TRAIN: &str = "train";
pub const SPLIT_TEST: &str = "test";

fn default_split() -> String {
    SPLIT_TEST.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Row in the manifest's embedding cache.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
    /// Source image path, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Class index, or `-1` for OOD.
    pub label: i64,
    #[serde(default = "default_split")]
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Embedding cache file, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn is_ood(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Indices of entries belonging to `split`, in manifest order.
    pub fn split_indices(&self, split: &str) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |pointer: String, msg: &str| Err(Error::Format(format!("{pointer}: {msg}")));
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return fail(
                "/schema_version".into(),
                &format!(
                    "unsupported version {} (expected {MANIFEST_SCHEMA_VERSION})",
                    self.schema_version
                ),
            );
        }
        let mut seen = BTreeSet::new();
        for (i, name) in self.class_names.iter().enumerate() {
            if !seen.insert(name) {
                return fail(
                    format!("/class_names/{i}"),
                    &format!("duplicate class `{name}`"),
                );
            }
        }
        let c = self.class_names.len() as i64;
        for (i, e) in self.entries.iter().enumerate() {
            if e.row.is_none() && e.path.is_none() {
                return fail(format!("/entries/{i}"), "entry needs a `row` or a `path`");
            }
            if self.is_ood() {
                if e.label != -1 {
                    return fail(
                        format!("/entries/{i}/label"),
                        &format!("OOD manifest labels must be -1, got {}", e.label),
                    );
                }
            } else if !(0..c).contains(&e.label) {
                return fail(
                    format!("/entries/{i}/label"),
                    &format!("label {} outside [0, {c})", e.label),
                );
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let manifest: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Format(format!("{}: {}", json_pointer(e.path()), e.inner())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Resolves the cache path relative to the manifest's directory.
    pub fn cache_path(&self, manifest_path: &Path) -> Option<PathBuf> {
        self.cache.as_ref().map(|c| {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(c)
        })
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_json(&text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}
